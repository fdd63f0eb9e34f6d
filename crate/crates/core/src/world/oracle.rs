//! Deterministic detector for rendered (or generated) clips.
//!
//! Per frame:
//! 1. estimate the background from near-zero mask pixels;
//! 2. label 8-connected foreground components (`mask > FG_THRESHOLD`);
//! 3. per component, fit the palette colour by least squares on
//!    `rgb = bg + α·(c − bg)`, which also yields per-pixel coverage `α`;
//! 4. match `α` against cached coverage templates over shape × rotation ×
//!    scale × integer centre;
//! 5. pick the texture whose mask template best explains channel 0.
//!
//! Fit residuals become confidences `q = exp(−max(0, r − tol) / (κ·area))`,
//! which are exactly 1 on clean renders and decay smoothly on blurry ones.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use super::raster::{sample_subject, subsample_offset, SUPERSAMPLE};
use super::{
    identity_match, Background, Descriptor, Identity, ParsedCaption, Pose, Shape, SubjectSpec,
    Texture, CHANNELS, MAX_SUBJECTS, PALETTE, ROTATION_STEPS, SCALE_GRID, SCALE_MAX, SCALE_MIN,
};
use crate::latent::LatentVideo;

const FG_THRESHOLD: f64 = 0.2;
const BG_THRESHOLD: f64 = 0.02;
const MIN_COMPONENT: usize = 2;
const HALF: i32 = 6;
const WIN: usize = (2 * HALF) as usize;
const CENTER_SEARCH: i32 = 3;
const KAPPA_SHAPE: f64 = 0.1;
const KAPPA_COLOR: f64 = 0.1;
const KAPPA_TEXTURE: f64 = 0.05;
const RESIDUAL_TOL: f64 = 1e-6;

const POSE_WEIGHT_POSITION: f64 = 0.5;
const POSE_WEIGHT_ORIENTATION: f64 = 0.25;
const POSE_WEIGHT_SCALE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub shape: Shape,
    pub color_id: usize,
    pub color_rgb: [f32; 3],
    pub texture: Texture,
    pub pose: Pose,
    pub scale: f32,
    pub q_shape: f64,
    pub q_color: f64,
    pub q_texture: f64,
    /// Sum of fitted coverage over the component.
    pub area: f64,
}

impl Detection {
    pub fn identity(&self) -> Identity {
        Identity {
            shape: self.shape,
            color: self.color_id,
            texture: self.texture,
        }
    }

    pub fn descriptor(&self) -> Descriptor {
        Descriptor::from_parts(
            self.shape,
            self.q_shape,
            self.color_id,
            self.q_color,
            self.texture,
            self.q_texture,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub detections: Vec<Detection>,
    pub background: Background,
    pub background_rgb: [f32; 3],
}

/// Per-subject scores against a reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMatch {
    pub identity_match: f64,
    pub pose_similarity: f64,
    /// Index into each frame's detections, if any was assigned.
    pub track: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OracleReport {
    pub frames: Vec<FrameReport>,
    /// Filled by [`OracleReport::score_references`].
    pub subjects: Vec<SubjectMatch>,
    /// Filled by [`OracleReport::check_caption`].
    pub attribute_checks: BTreeMap<String, bool>,
}

/// Weighted pose agreement in `[0, 1]`: position 0.5, orientation 0.25,
/// scale 0.25. Orientation is compared modulo the shape's symmetry.
pub fn pose_similarity(
    shape: Shape,
    a: Pose,
    a_scale: f32,
    b: Pose,
    b_scale: f32,
    width: usize,
) -> f64 {
    let dist = (((a.x - b.x) as f64).powi(2) + ((a.y - b.y) as f64).powi(2)).sqrt();
    let position = 1.0 - (dist / (width as f64 / 2.0)).min(1.0);
    let orientation = match shape.symmetry() {
        0 => 1.0,
        order => {
            let period = 360.0 / order as f64;
            let step = 360.0 / ROTATION_STEPS as f64;
            let diff = ((a.rotation - b.rotation) as f64 * step).rem_euclid(period);
            let d = diff.min(period - diff);
            1.0 - d / (period / 2.0)
        }
    };
    let scale = 1.0 - ((a_scale - b_scale).abs() as f64 / (SCALE_MAX - SCALE_MIN) as f64).min(1.0);
    POSE_WEIGHT_POSITION * position
        + POSE_WEIGHT_ORIENTATION * orientation
        + POSE_WEIGHT_SCALE * scale
}

struct Template {
    shape: Shape,
    rotation: i32,
    scale_index: usize,
    coverage: [f32; WIN * WIN],
    masks: [[f32; WIN * WIN]; 4],
    area: f64,
}

struct TemplateBank {
    templates: Vec<Template>,
}

impl TemplateBank {
    fn build(width: usize) -> Self {
        let n_sub = (SUPERSAMPLE * SUPERSAMPLE) as f32;
        let mut templates = Vec::new();
        for &shape in Shape::ALL {
            for rotation in 0..ROTATION_STEPS {
                for (scale_index, &scale) in SCALE_GRID.iter().enumerate() {
                    let radius = (scale * width as f32 / 2.0) as f64;
                    let mut coverage = [0f32; WIN * WIN];
                    let mut masks = [[0f32; WIN * WIN]; 4];
                    for wy in 0..WIN {
                        for wx in 0..WIN {
                            let mut inside = 0f32;
                            let mut tex = [0f32; 4];
                            for sy in 0..SUPERSAMPLE {
                                for sx in 0..SUPERSAMPLE {
                                    let px = wx as f64 + subsample_offset(sx);
                                    let py = wy as f64 + subsample_offset(sy);
                                    for (ti, &texture) in Texture::ALL.iter().enumerate() {
                                        if let Some(v) = sample_subject(
                                            shape,
                                            texture,
                                            radius,
                                            rotation,
                                            HALF as f64,
                                            HALF as f64,
                                            px,
                                            py,
                                        ) {
                                            tex[ti] += v;
                                            if ti == 0 {
                                                inside += 1.0;
                                            }
                                        }
                                    }
                                }
                            }
                            let i = wy * WIN + wx;
                            coverage[i] = inside / n_sub;
                            for t in 0..4 {
                                masks[t][i] = tex[t] / n_sub;
                            }
                        }
                    }
                    let area = coverage.iter().map(|&c| c as f64).sum();
                    templates.push(Template {
                        shape,
                        rotation,
                        scale_index,
                        coverage,
                        masks,
                        area,
                    });
                }
            }
        }
        Self { templates }
    }

    fn for_width(width: usize) -> Arc<TemplateBank> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<TemplateBank>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut guard = cache.lock().expect("template cache poisoned");
        guard
            .entry(width)
            .or_insert_with(|| Arc::new(TemplateBank::build(width)))
            .clone()
    }
}

struct FrameView<'a> {
    height: usize,
    width: usize,
    mask: &'a [f32],
    rgb: [&'a [f32]; 3],
}

impl FrameView<'_> {
    fn rgb_at(&self, p: usize) -> [f64; 3] {
        [
            self.rgb[0][p] as f64,
            self.rgb[1][p] as f64,
            self.rgb[2][p] as f64,
        ]
    }
}

/// Runs the detector on every frame of `video`.
pub fn detect_subjects(video: &LatentVideo) -> OracleReport {
    debug_assert_eq!(video.channels(), CHANNELS);
    let bank = TemplateBank::for_width(video.width());
    let plane = video.height() * video.width();
    let frames = (0..video.frames())
        .map(|f| {
            let frame = video.frame(f);
            let view = FrameView {
                height: video.height(),
                width: video.width(),
                mask: &frame[..plane],
                rgb: [
                    &frame[plane..2 * plane],
                    &frame[2 * plane..3 * plane],
                    &frame[3 * plane..4 * plane],
                ],
            };
            detect_frame(&view, &bank)
        })
        .collect();
    OracleReport {
        frames,
        ..Default::default()
    }
}

fn estimate_background(view: &FrameView) -> (Background, [f64; 3]) {
    let plane = view.height * view.width;
    let mut sum = [0f64; 3];
    let mut n = 0usize;
    for p in 0..plane {
        if (view.mask[p] as f64) < BG_THRESHOLD {
            let c = view.rgb_at(p);
            for k in 0..3 {
                sum[k] += c[k];
            }
            n += 1;
        }
    }
    if n == 0 {
        for p in 0..plane {
            let c = view.rgb_at(p);
            for k in 0..3 {
                sum[k] += c[k];
            }
        }
        n = plane;
    }
    let mean = sum.map(|s| s / n as f64);
    let (bg, dist) = Background::ALL
        .iter()
        .map(|&b| {
            let r = b.rgb();
            let d: f64 = (0..3).map(|k| (mean[k] - r[k] as f64).powi(2)).sum();
            (b, d.sqrt())
        })
        .fold((Background::Gray, f64::INFINITY), |acc, x| {
            if x.1 < acc.1 {
                x
            } else {
                acc
            }
        });
    // Snap to the exact palette value when the estimate is clearly that background.
    let rgb = if dist < 0.05 {
        bg.rgb().map(|v| v as f64)
    } else {
        mean
    };
    (bg, rgb)
}

fn label_components(view: &FrameView) -> Vec<Vec<usize>> {
    let (h, w) = (view.height, view.width);
    let mut label = vec![usize::MAX; h * w];
    let mut comps = Vec::new();
    for start in 0..h * w {
        if label[start] != usize::MAX || (view.mask[start] as f64) <= FG_THRESHOLD {
            continue;
        }
        let id = comps.len();
        let mut pixels = Vec::new();
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (y, x) = ((p / w) as i32, (p % w) as i32);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i32 || nx >= w as i32 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if label[q] == usize::MAX && (view.mask[q] as f64) > FG_THRESHOLD {
                        label[q] = id;
                        queue.push_back(q);
                    }
                }
            }
        }
        comps.push(pixels);
    }
    comps.retain(|c| c.len() >= MIN_COMPONENT);
    comps
}

fn confidence(residual: f64, kappa: f64, area: f64) -> f64 {
    (-(residual - RESIDUAL_TOL * area).max(0.0) / (kappa * area.max(1.0))).exp()
}

fn detect_frame(view: &FrameView, bank: &TemplateBank) -> FrameReport {
    let (background, bg) = estimate_background(view);
    let (h, w) = (view.height, view.width);
    let mut comps = label_components(view);
    // largest first; ties keep scan order
    comps.sort_by(|a, b| b.len().cmp(&a.len()));
    comps.truncate(MAX_SUBJECTS);

    let mut owner = vec![usize::MAX; h * w];
    for (ci, c) in comps.iter().enumerate() {
        for &p in c {
            owner[p] = ci;
        }
    }

    let mut detections = Vec::new();
    for (ci, comp) in comps.iter().enumerate() {
        // component plus a one-pixel ring of unowned pixels
        let mut in_region = vec![false; h * w];
        for &p in comp {
            in_region[p] = true;
            let (y, x) = ((p / w) as i32, (p % w) as i32);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && nx >= 0 && ny < h as i32 && nx < w as i32 {
                        let q = ny as usize * w + nx as usize;
                        if owner[q] == usize::MAX {
                            in_region[q] = true;
                        }
                    }
                }
            }
        }
        let region: Vec<usize> = (0..h * w).filter(|&p| in_region[p]).collect();
        let ignore = |p: usize| owner[p] != usize::MAX && owner[p] != ci;

        // colour fit
        let mut best_color = (f64::INFINITY, 0usize);
        for (k, (_, c)) in PALETTE.iter().enumerate() {
            let d = [
                c[0] as f64 - bg[0],
                c[1] as f64 - bg[1],
                c[2] as f64 - bg[2],
            ];
            let dd: f64 = d.iter().map(|v| v * v).sum();
            let mut res = 0.0;
            for &p in &region {
                let o = view.rgb_at(p);
                let e = [o[0] - bg[0], o[1] - bg[1], o[2] - bg[2]];
                let a = ((e[0] * d[0] + e[1] * d[1] + e[2] * d[2]) / dd).clamp(0.0, 1.0);
                res += (0..3).map(|j| (e[j] - a * d[j]).powi(2)).sum::<f64>();
            }
            if res < best_color.0 {
                best_color = (res, k);
            }
        }
        let color_id = best_color.1;
        let c = PALETTE[color_id].1;
        let d = [
            c[0] as f64 - bg[0],
            c[1] as f64 - bg[1],
            c[2] as f64 - bg[2],
        ];
        let dd: f64 = d.iter().map(|v| v * v).sum();
        let mut alpha = vec![0f64; h * w];
        let (mut area, mut cx, mut cy) = (0.0, 0.0, 0.0);
        let mut num = [0f64; 3];
        let mut den = 0.0;
        for &p in &region {
            let o = view.rgb_at(p);
            let e = [o[0] - bg[0], o[1] - bg[1], o[2] - bg[2]];
            let a = ((e[0] * d[0] + e[1] * d[1] + e[2] * d[2]) / dd).clamp(0.0, 1.0);
            alpha[p] = a;
            area += a;
            cx += a * ((p % w) as f64 + 0.5);
            cy += a * ((p / w) as f64 + 0.5);
            for j in 0..3 {
                num[j] += a * e[j];
            }
            den += a * a;
        }
        if area < 0.5 {
            continue;
        }
        let (cx, cy) = (cx / area, cy / area);
        let color_rgb = [0, 1, 2].map(|j| {
            if den > 0.0 {
                (bg[j] + num[j] / den).clamp(0.0, 1.0) as f32
            } else {
                bg[j] as f32
            }
        });
        let total_a2: f64 = region.iter().map(|&p| alpha[p] * alpha[p]).sum();

        // silhouette search
        let mut best = (f64::INFINITY, 0usize, 0i32, 0i32);
        let mut evaluated: Vec<(f64, usize, i32, i32)> = Vec::new();
        let (rx, ry) = (cx.round() as i32, cy.round() as i32);
        for (ti, t) in bank.templates.iter().enumerate() {
            if t.area < 0.5 * area || t.area > 2.0 * area {
                continue;
            }
            for oy in (ry - CENTER_SEARCH)..=(ry + CENTER_SEARCH) {
                for ox in (rx - CENTER_SEARCH)..=(rx + CENTER_SEARCH) {
                    if ox < 0 || oy < 0 || ox > w as i32 || oy > h as i32 {
                        continue;
                    }
                    let mut ssd = total_a2;
                    for wy in 0..WIN {
                        let y = oy - HALF + wy as i32;
                        if y < 0 || y >= h as i32 {
                            continue;
                        }
                        for wx in 0..WIN {
                            let x = ox - HALF + wx as i32;
                            if x < 0 || x >= w as i32 {
                                continue;
                            }
                            let tv = t.coverage[wy * WIN + wx] as f64;
                            let p = y as usize * w + x as usize;
                            if ignore(p) {
                                // neither penalize nor reward pixels owned by another subject
                                let a = alpha[p];
                                ssd -= a * a;
                                continue;
                            }
                            let a = alpha[p];
                            ssd += tv * tv - 2.0 * a * tv;
                        }
                    }
                    evaluated.push((ssd, ti, ox, oy));
                    if ssd < best.0 - 1e-12 {
                        best = (ssd, ti, ox, oy);
                    }
                }
            }
        }
        if !best.0.is_finite() {
            continue;
        }
        let ssd = best.0;

        // Texture lives in the rotated frame, so every placement whose
        // silhouette ties the best one (symmetric shapes) is tried.
        let tie = ssd + 1e-6 * area.max(1.0);
        let mut best_tex = (f64::INFINITY, 0usize, best.1, best.2, best.3);
        for &(_, ti, ox, oy) in evaluated.iter().filter(|e| e.0 <= tie) {
            let t = &bank.templates[ti];
            for k in 0..Texture::ALL.len() {
                let mut s = 0.0;
                for wy in 0..WIN {
                    let y = oy - HALF + wy as i32;
                    if y < 0 || y >= h as i32 {
                        continue;
                    }
                    for wx in 0..WIN {
                        let x = ox - HALF + wx as i32;
                        if x < 0 || x >= w as i32 {
                            continue;
                        }
                        let p = y as usize * w + x as usize;
                        if ignore(p) {
                            continue;
                        }
                        let diff = view.mask[p] as f64 - t.masks[k][wy * WIN + wx] as f64;
                        s += diff * diff;
                    }
                }
                if s < best_tex.0 - 1e-12 {
                    best_tex = (s, k, ti, ox, oy);
                }
            }
        }
        let (_, _, ti, ox, oy) = best_tex;
        let t = &bank.templates[ti];

        detections.push(Detection {
            shape: t.shape,
            color_id,
            color_rgb,
            texture: Texture::ALL[best_tex.1],
            pose: Pose::new(ox as f32, oy as f32, t.rotation),
            scale: SCALE_GRID[t.scale_index],
            q_shape: confidence(ssd.max(0.0), KAPPA_SHAPE, area),
            q_color: confidence(best_color.0, KAPPA_COLOR, area),
            q_texture: confidence(best_tex.0, KAPPA_TEXTURE, area),
            area,
        });
    }

    FrameReport {
        detections,
        background,
        background_rgb: bg.map(|v| v as f32),
    }
}

impl OracleReport {
    /// Greedy per-frame assignment of detections to subjects by descriptor
    /// similarity. Returns, per subject, the matched detection per frame.
    pub fn assign(&self, descriptors: &[Descriptor]) -> Vec<Vec<Option<usize>>> {
        let mut tracks = vec![vec![None; self.frames.len()]; descriptors.len()];
        for (f, frame) in self.frames.iter().enumerate() {
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for (i, d) in descriptors.iter().enumerate() {
                for (j, det) in frame.detections.iter().enumerate() {
                    let s = identity_match(d, &det.descriptor());
                    if s > 0.0 {
                        pairs.push((s, i, j));
                    }
                }
            }
            pairs.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut used_det = vec![false; frame.detections.len()];
            for (_, i, j) in pairs {
                if tracks[i][f].is_none() && !used_det[j] {
                    tracks[i][f] = Some(j);
                    used_det[j] = true;
                }
            }
        }
        tracks
    }

    /// Scores each reference subject (spec + reference pose) against the clip:
    /// mean per-frame identity match and pose similarity (0 where unmatched).
    pub fn score_references(&mut self, refs: &[(SubjectSpec, Pose)], width: usize) {
        let descriptors: Vec<Descriptor> = refs.iter().map(|(s, _)| s.descriptor()).collect();
        let tracks = self.assign(&descriptors);
        let n = self.frames.len().max(1) as f64;
        self.subjects = refs
            .iter()
            .zip(&descriptors)
            .zip(tracks)
            .map(|(((spec, pose), desc), track)| {
                let mut id = 0.0;
                let mut ps = 0.0;
                for (f, m) in track.iter().enumerate() {
                    if let Some(j) = m {
                        let det = &self.frames[f].detections[*j];
                        id += identity_match(desc, &det.descriptor());
                        ps += pose_similarity(
                            spec.shape, det.pose, det.scale, *pose, spec.scale, width,
                        );
                    }
                }
                SubjectMatch {
                    identity_match: id / n,
                    pose_similarity: ps / n,
                    track,
                }
            })
            .collect();
    }

    /// Checks every attribute named by a parsed caption: per subject colour,
    /// shape and motion direction, plus the background.
    pub fn check_caption(&mut self, caption: &ParsedCaption) {
        let descriptors: Vec<Descriptor> = caption
            .subjects
            .iter()
            .map(|s| {
                Identity {
                    shape: s.shape,
                    color: s.color,
                    texture: s.texture,
                }
                .descriptor()
            })
            .collect();
        let tracks = self.assign(&descriptors);
        let n = self.frames.len();
        let mut checks = BTreeMap::new();
        for (i, (subject, track)) in caption.subjects.iter().zip(&tracks).enumerate() {
            let matched: Vec<(usize, &Detection)> = track
                .iter()
                .enumerate()
                .filter_map(|(f, m)| m.map(|j| (f, &self.frames[f].detections[j])))
                .collect();
            let majority = |pred: &dyn Fn(&Detection) -> bool| {
                2 * matched.iter().filter(|(_, d)| pred(d)).count() > n
            };
            checks.insert(
                format!("s{i}.color"),
                majority(&|d| d.color_id == subject.color),
            );
            checks.insert(
                format!("s{i}.shape"),
                majority(&|d| d.shape == subject.shape),
            );
            let motion_ok = match (matched.first(), matched.last()) {
                (Some(&(f0, a)), Some(&(f1, b))) if 2 * matched.len() > n => {
                    let expected = subject.motion.direction;
                    if f1 > f0 {
                        let vx = (b.pose.x - a.pose.x) as f64 / (f1 - f0) as f64;
                        let vy = (b.pose.y - a.pose.y) as f64 / (f1 - f0) as f64;
                        let sign = |v: f64| {
                            if v > 0.4 {
                                1
                            } else if v < -0.4 {
                                -1
                            } else {
                                0
                            }
                        };
                        [sign(vx), sign(vy)] == expected
                    } else {
                        expected == [0, 0]
                    }
                }
                _ => false,
            };
            checks.insert(format!("s{i}.motion"), motion_ok);
        }
        let bg_votes = self
            .frames
            .iter()
            .filter(|f| f.background == caption.background)
            .count();
        checks.insert("background".into(), 2 * bg_votes > n);
        self.attribute_checks = checks;
    }

    pub fn text_accuracy(&self) -> f64 {
        if self.attribute_checks.is_empty() {
            return 0.0;
        }
        self.attribute_checks.values().filter(|&&v| v).count() as f64
            / self.attribute_checks.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{render_reference, WorldConfig};

    #[test]
    fn pose_similarity_bounds_and_symmetry_handling() {
        let p = Pose::new(8.0, 8.0, 0);
        assert_eq!(pose_similarity(Shape::Star, p, 0.4, p, 0.4, 16), 1.0);
        // a square rotated by 90° is the same pose
        let q = Pose::new(8.0, 8.0, 3);
        assert_eq!(pose_similarity(Shape::Square, p, 0.4, q, 0.4, 16), 1.0);
        let far = Pose::new(0.0, 0.0, 6);
        let s = pose_similarity(Shape::Semicircle, p, 0.2, far, 0.6, 16);
        assert!((0.0..0.2).contains(&s), "{s}");
    }

    #[test]
    fn clean_reference_is_recovered_exactly() {
        let world = WorldConfig::default();
        for &shape in Shape::ALL {
            for &texture in Texture::ALL {
                let spec = SubjectSpec::new(shape, 5, texture, 0.45);
                let pose = Pose::new(7.0, 9.0, 2);
                let v = render_reference(&spec, pose, Background::Sand, &world).unwrap();
                let mut r = detect_subjects(&v);
                assert_eq!(r.frames[0].detections.len(), 1);
                let d = &r.frames[0].detections[0];
                assert_eq!((d.shape, d.color_id, d.texture), (shape, 5, texture));
                r.score_references(&[(spec, pose)], 16);
                assert_eq!(r.subjects[0].identity_match, 1.0, "{shape} {texture}");
                assert_eq!(r.subjects[0].pose_similarity, 1.0);
            }
        }
    }

    #[test]
    fn zeros_give_no_detections() {
        let v = LatentVideo::zeros(3, 4, 16, 16);
        let r = detect_subjects(&v);
        assert!(r.frames.iter().all(|f| f.detections.is_empty()));
    }
}
