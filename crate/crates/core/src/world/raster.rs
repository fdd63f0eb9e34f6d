use super::{Background, Pose, Shape, SubjectSpec, Texture, CHANNELS, ROTATION_STEPS};

pub(crate) const SUPERSAMPLE: usize = 4;
/// Mask value of the dark cells of a texture.
pub const TEXTURE_DARK: f32 = 0.55;

impl Shape {
    /// Point test in normalized local coordinates, `(u, v) ∈ [-1, 1]²`, `v` down.
    pub fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::Triangle => (-1.0..=0.6).contains(&v) && u.abs() <= (v + 1.0) * 0.55,
            Shape::Cross => {
                (u.abs() <= 0.34 && v.abs() <= 1.0) || (v.abs() <= 0.34 && u.abs() <= 1.0)
            }
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            Shape::Star => {
                let r = (u * u + v * v).sqrt();
                let phi = v.atan2(u) + std::f64::consts::FRAC_PI_2;
                let t = (phi * 5.0 / std::f64::consts::TAU).rem_euclid(1.0);
                let tip = 1.0 - 2.0 * (t - 0.5).abs();
                r <= 0.42 + 0.58 * (1.0 - tip)
            }
            Shape::Semicircle => u * u + v * v <= 1.0 && v >= -0.15,
            Shape::Bar => u.abs() <= 1.0 && v.abs() <= 0.42,
        }
    }
}

impl Texture {
    /// Mask modulation at local pixel offset `(lx, ly)` from the subject centre.
    pub fn value(self, lx: f64, ly: f64) -> f32 {
        const CELL: f64 = 1.5;
        let dark = match self {
            Texture::Plain => false,
            Texture::Striped => (ly / CELL).floor().rem_euclid(2.0) != 0.0,
            Texture::Checkered => {
                ((lx / CELL).floor() + (ly / CELL).floor()).rem_euclid(2.0) != 0.0
            }
            Texture::Dotted => {
                let dx = lx.rem_euclid(2.0) - 1.0;
                let dy = ly.rem_euclid(2.0) - 1.0;
                dx * dx + dy * dy < 0.4
            }
        };
        if dark {
            TEXTURE_DARK
        } else {
            1.0
        }
    }
}

/// Texture value of the subject at point `(px, py)`, or `None` if outside.
#[inline]
pub(crate) fn sample_subject(
    shape: Shape,
    texture: Texture,
    radius: f64,
    rotation: i32,
    cx: f64,
    cy: f64,
    px: f64,
    py: f64,
) -> Option<f32> {
    let dx = px - cx;
    let dy = py - cy;
    if dx.abs() > radius + 0.01 || dy.abs() > radius + 0.01 {
        return None;
    }
    let theta =
        rotation.rem_euclid(ROTATION_STEPS) as f64 * std::f64::consts::TAU / ROTATION_STEPS as f64;
    let (s, c) = theta.sin_cos();
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    if shape.contains(lx / radius, ly / radius) {
        Some(texture.value(lx, ly))
    } else {
        None
    }
}

#[inline]
pub(crate) fn subsample_offset(k: usize) -> f64 {
    (k as f64 + 0.5) / SUPERSAMPLE as f64
}

/// Renders one frame as `CHANNELS × height × width`.
pub fn render_frame(
    subjects: &[(SubjectSpec, Pose)],
    background: Background,
    height: usize,
    width: usize,
) -> Vec<f32> {
    let plane = height * width;
    let mut out = vec![0.0f32; CHANNELS * plane];
    let bg = background.rgb();
    let n_sub = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for y in 0..height {
        for x in 0..width {
            let mut mask = 0.0f32;
            let mut rgb = [0.0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + subsample_offset(sx);
                    let py = y as f64 + subsample_offset(sy);
                    let hit = subjects.iter().rev().find_map(|(spec, pose)| {
                        sample_subject(
                            spec.shape,
                            spec.texture,
                            spec.radius_px(width) as f64,
                            pose.rotation,
                            pose.x as f64,
                            pose.y as f64,
                            px,
                            py,
                        )
                        .map(|t| (t, spec.color))
                    });
                    match hit {
                        Some((t, color)) => {
                            mask += t;
                            for k in 0..3 {
                                rgb[k] += color[k];
                            }
                        }
                        None => {
                            for k in 0..3 {
                                rgb[k] += bg[k];
                            }
                        }
                    }
                }
            }
            let i = y * width + x;
            out[i] = mask / n_sub;
            for k in 0..3 {
                out[(k + 1) * plane + i] = rgb[k] / n_sub;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Texture;

    #[test]
    fn shapes_are_distinct_at_smallest_scale() {
        // Coverage patterns of every shape pair differ at radius 1.6 px.
        let patterns: Vec<Vec<f32>> = Shape::ALL
            .iter()
            .map(|&shape| {
                let spec = SubjectSpec {
                    shape,
                    color: [0.9, 0.1, 0.1],
                    texture: Texture::Plain,
                    scale: 0.2,
                };
                render_frame(&[(spec, Pose::new(8.0, 8.0, 1))], Background::Gray, 16, 16)[..256]
                    .to_vec()
            })
            .collect();
        for i in 0..patterns.len() {
            for j in (i + 1)..patterns.len() {
                assert_ne!(
                    patterns[i],
                    patterns[j],
                    "{} vs {}",
                    Shape::ALL[i],
                    Shape::ALL[j]
                );
            }
        }
    }

    #[test]
    fn background_only_frame() {
        let f = render_frame(&[], Background::Sand, 4, 4);
        assert!(f[..16].iter().all(|&m| m == 0.0));
        assert!(f[16..32].iter().all(|&r| (r - 0.8).abs() < 1e-6));
    }
}
