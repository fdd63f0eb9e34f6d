//! Parametric world of moving textured shapes, rendered straight into latent
//! space.
//!
//! The latent codec is the identity: a clip is `frames × 4 × 16 × 16` with
//!
//! | channel | content                                                        |
//! |---------|----------------------------------------------------------------|
//! | 0       | subject mask: shape coverage × texture value (0 on background) |
//! | 1..=3   | RGB: subject colour blended over the background colour          |
//!
//! Every pixel is integrated over a 4×4 subpixel grid, so coverage is
//! fractional at shape edges. Textures only modulate channel 0; colour
//! channels carry the pure palette colour, which keeps the oracle exact on
//! clean renders.

mod caption;
mod generate;
mod oracle;
mod raster;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentVideo;

pub use caption::{
    caption_scene, describe_subject, direction_from_word, parse_caption, MotionPhrase,
    ParsedCaption, ParsedSubject, Vocab, NULL_TOKEN,
};
pub use generate::SceneSampler;
pub use oracle::{
    detect_subjects, pose_similarity, Detection, FrameReport, OracleReport, SubjectMatch,
};
pub use raster::{render_frame, TEXTURE_DARK};

pub const CHANNELS: usize = 4;
/// Orientation is quantized to 12 steps of 30°.
pub const ROTATION_STEPS: i32 = 12;
pub const SCALE_MIN: f32 = 0.2;
pub const SCALE_MAX: f32 = 0.6;
/// Scales the generator draws from and the oracle searches over.
pub const SCALE_GRID: [f32; 9] = [0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6];
/// Descriptor similarity at or above which two subjects count as the same.
pub const IDENTITY_THRESHOLD: f64 = 0.9;
pub const MAX_SUBJECTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
        }
    }
}

impl WorldConfig {
    pub fn video_dims(&self) -> [usize; 4] {
        [self.frames, CHANNELS, self.height, self.width]
    }

    pub fn check_video(&self, v: &LatentVideo) -> Result<()> {
        let [_, c, h, w] = v.dims();
        if c != CHANNELS || h != self.height || w != self.width {
            return Err(Error::shape(format!(
                "video {:?} does not match world {}x{}x{}",
                v.dims(),
                CHANNELS,
                self.height,
                self.width
            )));
        }
        Ok(())
    }
}

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn from_name(word: &str) -> Option<Self> {
                match word { $($word => Some($name::$variant),)+ _ => None }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum!(Shape {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Cross => "cross",
    Ring => "ring",
    Star => "star",
    Semicircle => "semicircle",
    Bar => "bar",
});

named_enum!(Texture {
    Plain => "plain",
    Striped => "striped",
    Checkered => "checkered",
    Dotted => "dotted",
});

named_enum!(Background {
    White => "white",
    Black => "black",
    Gray => "gray",
    Sand => "sand",
});

impl Shape {
    /// Order of the rotation symmetry group; 0 means fully rotation invariant.
    pub fn symmetry(self) -> u32 {
        match self {
            Shape::Circle | Shape::Ring => 0,
            Shape::Square | Shape::Cross => 4,
            Shape::Triangle => 3,
            Shape::Star => 5,
            Shape::Semicircle => 1,
            Shape::Bar => 2,
        }
    }
}

impl Background {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Background::White => [1.0, 1.0, 1.0],
            Background::Black => [0.0, 0.0, 0.0],
            Background::Gray => [0.5, 0.5, 0.5],
            Background::Sand => [0.8, 0.72, 0.55],
        }
    }
}

/// The eight quantized subject colours.
pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("orange", [0.95, 0.5, 0.05]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("green", [0.1, 0.75, 0.2]),
    ("cyan", [0.1, 0.8, 0.9]),
    ("blue", [0.1, 0.2, 0.9]),
    ("purple", [0.55, 0.1, 0.8]),
    ("pink", [0.95, 0.45, 0.75]),
];

pub fn color_name(id: usize) -> &'static str {
    PALETTE[id].0
}

pub fn color_id_from_name(word: &str) -> Option<usize> {
    PALETTE.iter().position(|(n, _)| *n == word)
}

/// Nearest palette entry to an RGB triple.
pub fn quantize_color(rgb: [f32; 3]) -> usize {
    let mut best = (f32::INFINITY, 0);
    for (i, (_, p)) in PALETTE.iter().enumerate() {
        let d: f32 = (0..3).map(|k| (rgb[k] - p[k]).powi(2)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// The discrete identity of a subject: 8 shapes × 8 colours × 4 textures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub shape: Shape,
    pub color: usize,
    pub texture: Texture,
}

impl Identity {
    pub const COUNT: usize = 256;

    pub fn index(&self) -> usize {
        (self.shape.index() * PALETTE.len() + self.color) * Texture::ALL.len()
            + self.texture.index()
    }

    pub fn from_index(i: usize) -> Self {
        let texture = Texture::ALL[i % 4];
        let color = (i / 4) % PALETTE.len();
        let shape = Shape::ALL[i / 32];
        Self {
            shape,
            color,
            texture,
        }
    }

    pub fn descriptor(&self) -> Descriptor {
        Descriptor::from_parts(self.shape, 1.0, self.color, 1.0, self.texture, 1.0)
    }
}

pub const DESCRIPTOR_LEN: usize = 20;

/// Identity descriptor: `[q_s·onehot(shape) | q_c·onehot(colour) | q_t·onehot(texture)] / √3`.
///
/// The `q` weights are 1 for specification-derived descriptors, so those
/// are unit vectors and their similarity is the cosine. The oracle uses
/// `q < 1` to express how well an observed subject fits its best template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Descriptor(pub [f64; DESCRIPTOR_LEN]);

impl Descriptor {
    pub fn from_parts(
        shape: Shape,
        q_shape: f64,
        color: usize,
        q_color: f64,
        texture: Texture,
        q_texture: f64,
    ) -> Self {
        let norm = 1.0 / 3f64.sqrt();
        let mut v = [0.0; DESCRIPTOR_LEN];
        v[shape.index()] = q_shape * norm;
        v[8 + color] = q_color * norm;
        v[16 + texture.index()] = q_texture * norm;
        Descriptor(v)
    }

    pub fn dot(&self, other: &Descriptor) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn distance(&self, other: &Descriptor) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Calibrated identity similarity in `[0, 1]`; symmetric.
pub fn identity_match(a: &Descriptor, b: &Descriptor) -> f64 {
    a.dot(b).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub shape: Shape,
    pub color: [f32; 3],
    pub texture: Texture,
    /// Diameter as a fraction of the frame width.
    pub scale: f32,
}

impl SubjectSpec {
    pub fn new(shape: Shape, color_id: usize, texture: Texture, scale: f32) -> Self {
        Self {
            shape,
            color: PALETTE[color_id].1,
            texture,
            scale,
        }
    }

    pub fn from_identity(id: Identity, scale: f32) -> Self {
        Self::new(id.shape, id.color, id.texture, scale)
    }

    pub fn color_id(&self) -> usize {
        quantize_color(self.color)
    }

    pub fn identity(&self) -> Identity {
        Identity {
            shape: self.shape,
            color: self.color_id(),
            texture: self.texture,
        }
    }

    pub fn descriptor(&self) -> Descriptor {
        self.identity().descriptor()
    }

    pub fn radius_px(&self, width: usize) -> f32 {
        self.scale * width as f32 / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(SCALE_MIN..=SCALE_MAX).contains(&self.scale) {
            return Err(Error::invalid(format!(
                "subject scale {} outside [{SCALE_MIN}, {SCALE_MAX}]",
                self.scale
            )));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid(format!(
                "subject colour {:?} outside [0,1]^3",
                self.color
            )));
        }
        Ok(())
    }
}

/// Placement of a subject in one frame. Rotation is in 30° steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f32,
    pub y: f32,
    pub rotation: i32,
}

impl Pose {
    pub fn new(x: f32, y: f32, rotation: i32) -> Self {
        Self {
            x,
            y,
            rotation: rotation.rem_euclid(ROTATION_STEPS),
        }
    }
}

/// Integer-grid linear trajectory: pixels and rotation steps per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: [i32; 2],
    pub velocity: [i32; 2],
    pub start_rotation: i32,
    pub rotation_rate: i32,
}

impl Trajectory {
    pub fn still(x: i32, y: i32) -> Self {
        Self {
            start: [x, y],
            velocity: [0, 0],
            start_rotation: 0,
            rotation_rate: 0,
        }
    }

    pub fn pose_at(&self, frame: usize) -> Pose {
        let t = frame as i32;
        Pose::new(
            (self.start[0] + self.velocity[0] * t) as f32,
            (self.start[1] + self.velocity[1] * t) as f32,
            self.start_rotation + self.rotation_rate * t,
        )
    }

    pub fn motion(&self) -> MotionKind {
        if self.velocity != [0, 0] {
            MotionKind::Linear
        } else if self.rotation_rate != 0 {
            MotionKind::Spin
        } else {
            MotionKind::Static
        }
    }
}

named_enum!(
    /// Coarse motion category used by tags.
    MotionKind {
        Static => "static",
        Spin => "spin",
        Linear => "linear",
    }
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptSubject {
    pub spec: SubjectSpec,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub id: String,
    pub subjects: Vec<ScriptSubject>,
    pub background: Background,
    pub frames: usize,
    pub seed: u64,
}

impl SceneScript {
    pub fn validate(&self, world: &WorldConfig) -> Result<()> {
        let reject = |reason: String| Error::Script {
            id: self.id.clone(),
            reason,
        };
        if self.subjects.is_empty() || self.subjects.len() > MAX_SUBJECTS {
            return Err(reject(format!(
                "needs 1..={MAX_SUBJECTS} subjects, has {}",
                self.subjects.len()
            )));
        }
        if self.frames == 0 {
            return Err(reject("frame count must be positive".into()));
        }
        for (i, s) in self.subjects.iter().enumerate() {
            s.spec
                .validate()
                .map_err(|e| reject(format!("subject {i}: {e}")))?;
            for f in 0..self.frames {
                let p = s.trajectory.pose_at(f);
                if p.x < 0.0 || p.y < 0.0 || p.x > world.width as f32 || p.y > world.height as f32 {
                    return Err(reject(format!(
                        "subject {i} centre ({}, {}) leaves the frame at t={f}",
                        p.x, p.y
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn poses_at(&self, frame: usize) -> Vec<(SubjectSpec, Pose)> {
        self.subjects
            .iter()
            .map(|s| (s.spec, s.trajectory.pose_at(frame)))
            .collect()
    }
}

/// Renders every frame of a script. Later subjects draw over earlier ones.
pub fn render_scene(script: &SceneScript, world: &WorldConfig) -> Result<LatentVideo> {
    script.validate(world)?;
    let mut data = Vec::with_capacity(script.frames * CHANNELS * world.height * world.width);
    for f in 0..script.frames {
        data.extend(render_frame(
            &script.poses_at(f),
            script.background,
            world.height,
            world.width,
        ));
    }
    LatentVideo::from_vec([script.frames, CHANNELS, world.height, world.width], data)
}

/// Single-frame render of one subject at `pose` on `background`.
pub fn render_reference(
    subject: &SubjectSpec,
    pose: Pose,
    background: Background,
    world: &WorldConfig,
) -> Result<LatentVideo> {
    subject.validate()?;
    let data = render_frame(&[(*subject, pose)], background, world.height, world.width);
    LatentVideo::from_vec([1, CHANNELS, world.height, world.width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_index_roundtrip() {
        for i in 0..Identity::COUNT {
            assert_eq!(Identity::from_index(i).index(), i);
        }
    }

    #[test]
    fn descriptor_is_pure_and_unit() {
        let s = SubjectSpec::new(Shape::Star, 3, Texture::Dotted, 0.4);
        let d1 = s.descriptor();
        let d2 = SubjectSpec { scale: 0.55, ..s }.descriptor();
        assert_eq!(d1, d2);
        assert!((identity_match(&d1, &d1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn color_only_difference_is_below_threshold() {
        let a = SubjectSpec::new(Shape::Circle, 0, Texture::Plain, 0.4).descriptor();
        let b = SubjectSpec::new(Shape::Circle, 1, Texture::Plain, 0.4).descriptor();
        let m = identity_match(&a, &b);
        assert!(m < IDENTITY_THRESHOLD, "{m}");
        assert_eq!(m, identity_match(&b, &a));
    }

    #[test]
    fn palette_is_separable_from_every_background() {
        // Colour fitting solves rgb = bg + a·(c − bg); two palette entries must
        // never be collinear through a background colour.
        for bg in Background::ALL {
            let b = bg.rgb();
            for i in 0..PALETTE.len() {
                for j in (i + 1)..PALETTE.len() {
                    let u: Vec<f32> = (0..3).map(|k| PALETTE[i].1[k] - b[k]).collect();
                    let v: Vec<f32> = (0..3).map(|k| PALETTE[j].1[k] - b[k]).collect();
                    let dot: f32 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                    let nu: f32 = u.iter().map(|a| a * a).sum::<f32>().sqrt();
                    let nv: f32 = v.iter().map(|a| a * a).sum::<f32>().sqrt();
                    assert!(
                        dot / (nu * nv) < 0.995,
                        "{bg} {} {}",
                        PALETTE[i].0,
                        PALETTE[j].0
                    );
                }
            }
        }
    }

    #[test]
    fn validate_rejects_exit_and_bad_counts() {
        let world = WorldConfig::default();
        let spec = SubjectSpec::new(Shape::Square, 2, Texture::Plain, 0.3);
        let mut s = SceneScript {
            id: "s".into(),
            subjects: vec![ScriptSubject {
                spec,
                trajectory: Trajectory {
                    start: [14, 8],
                    velocity: [1, 0],
                    start_rotation: 0,
                    rotation_rate: 0,
                },
            }],
            background: Background::Gray,
            frames: 8,
            seed: 1,
        };
        assert!(render_scene(&s, &world).is_err());
        s.subjects[0].trajectory.start = [4, 8];
        assert!(render_scene(&s, &world).is_ok());
        s.subjects.clear();
        assert!(s.validate(&world).is_err());
    }
}
