//! Euler sampling with three-pass, two-scale guidance over reference and text
//! conditions, plus the deterministic prompt rephraser.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dit::{assemble_state, forward, Conditioning, WeightSource};
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::train::gaussian_latent;
use crate::world::{
    color_id_from_name, color_name, describe_subject, direction_from_word, Background,
    MotionPhrase, ParsedCaption, ParsedSubject, Shape, SubjectSpec, Texture, Vocab,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CfgSchedule {
    Static {
        w1: f64,
        w2: f64,
    },
    /// Linear in sampler progress `s` (0 at pure noise, 1 at the last step).
    Linear {
        w1: (f64, f64),
        w2: (f64, f64),
    },
}

impl Default for CfgSchedule {
    fn default() -> Self {
        CfgSchedule::Static { w1: 3.5, w2: 3.5 }
    }
}

impl CfgSchedule {
    /// Reference scale rising 1 → 4 while text scale falls 5 → 1.
    pub fn dynamic_default() -> Self {
        CfgSchedule::Linear {
            w1: (1.0, 4.0),
            w2: (5.0, 1.0),
        }
    }

    pub fn at(&self, s: f64) -> (f64, f64) {
        match *self {
            CfgSchedule::Static { w1, w2 } => (w1, w2),
            CfgSchedule::Linear { w1, w2 } => {
                let lerp = |(a, b): (f64, f64)| if s == 1.0 { b } else { a + s * (b - a) };
                (lerp(w1), lerp(w2))
            }
        }
    }

    fn scales(&self) -> [f64; 4] {
        match *self {
            CfgSchedule::Static { w1, w2 } => [w1, w2, w1, w2],
            CfgSchedule::Linear { w1, w2 } => [w1.0, w1.1, w2.0, w2.1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "guidance scales must be >= 0: {self}"
            )))
        }
    }
}

impl fmt::Display for CfgSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CfgSchedule::Static { w1, w2 } => write!(f, "static:{w1},{w2}"),
            CfgSchedule::Linear { w1, w2 } => {
                write!(f, "linear:{}-{},{}-{}", w1.0, w1.1, w2.0, w2.1)
            }
        }
    }
}

impl CfgSchedule {
    /// Parses without range checks; negative scales survive for `validate`
    /// to report.
    pub fn parse_unchecked(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad guidance schedule `{s}`"));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let (mode, rest) = s.split_once(':').ok_or_else(bad)?;
        let (a, b) = rest.split_once(',').ok_or_else(bad)?;
        Ok(match mode.trim() {
            "static" => CfgSchedule::Static {
                w1: num(a)?,
                w2: num(b)?,
            },
            "linear" => {
                let range = |v: &str| -> Result<(f64, f64)> {
                    let v = v.trim();
                    // skip a leading sign when looking for the separator
                    let cut = v
                        .get(1..)
                        .and_then(|tail| tail.find('-'))
                        .map(|i| i + 1)
                        .ok_or_else(bad)?;
                    Ok((num(&v[..cut])?, num(&v[cut + 1..])?))
                };
                CfgSchedule::Linear {
                    w1: range(a)?,
                    w2: range(b)?,
                }
            }
            _ => return Err(bad()),
        })
    }
}

impl FromStr for CfgSchedule {
    type Err = Error;

    /// `static:W1,W2` or `linear:A-B,C-D` (ω1 from A to B, ω2 from C to D).
    fn from_str(s: &str) -> Result<Self> {
        let schedule = Self::parse_unchecked(s)?;
        schedule.validate()?;
        Ok(schedule)
    }
}

fn to_f64(t: &Tensor) -> Result<Tensor> {
    Ok(t.to_dtype(DType::F64)?)
}

/// `v∅ + ω1·(v_ref − v∅) + ω2·(v_full − v_ref)`, combined in f64.
pub fn combine_guidance(
    v_null: &Tensor,
    v_ref: &Tensor,
    v_full: &Tensor,
    w1: f64,
    w2: f64,
) -> Result<Tensor> {
    let (n, r, a) = (to_f64(v_null)?, to_f64(v_ref)?, to_f64(v_full)?);
    let ref_term = ((&r - &n)? * w1)?;
    let text_term = ((&a - &r)? * w2)?;
    Ok(((n + ref_term)? + text_term)?)
}

/// Guided velocity on video positions for sampler state `state` at time `t`.
/// When `w1 == w2` the reference-only pass cancels and two passes suffice.
pub fn cfg_velocity(
    w: &dyn WeightSource,
    state: &LatentVideo,
    cond: &Conditioning,
    ref_noise: &LatentVideo,
    t: f64,
    w1: f64,
    w2: f64,
) -> Result<Tensor> {
    if !(w1 >= 0.0 && w2 >= 0.0) {
        return Err(Error::invalid(format!(
            "guidance scales must be >= 0, got {w1}, {w2}"
        )));
    }
    let f = state.frames();
    let pass = |drop_ref: bool, drop_text: bool| -> Result<Tensor> {
        let c = cond.with_drops(drop_ref, drop_text);
        let input = assemble_state(state, c.effective_refs(), t, ref_noise)?;
        Ok(forward(w, &input, &c, t)?.narrow(0, 0, f)?)
    };
    let v_null = pass(true, true)?;
    let v_full = pass(false, false)?;
    if w1 == w2 {
        let n = to_f64(&v_null)?;
        let d = ((to_f64(&v_full)? - &n)? * w1)?;
        return Ok((n + d)?);
    }
    let v_ref = pass(false, true)?;
    combine_guidance(&v_null, &v_ref, &v_full, w1, w2)
}

/// Three forward passes always, for checking the two-pass shortcut.
pub fn cfg_velocity_three_pass(
    w: &dyn WeightSource,
    state: &LatentVideo,
    cond: &Conditioning,
    ref_noise: &LatentVideo,
    t: f64,
    w1: f64,
    w2: f64,
) -> Result<Tensor> {
    let f = state.frames();
    let pass = |drop_ref: bool, drop_text: bool| -> Result<Tensor> {
        let c = cond.with_drops(drop_ref, drop_text);
        let input = assemble_state(state, c.effective_refs(), t, ref_noise)?;
        Ok(forward(w, &input, &c, t)?.narrow(0, 0, f)?)
    };
    combine_guidance(
        &pass(true, true)?,
        &pass(false, true)?,
        &pass(false, false)?,
        w1,
        w2,
    )
}

/// Sampler progress at step `k` of `steps` (0 at the first step).
pub fn progress(k: usize, steps: usize) -> f64 {
    if steps <= 1 {
        0.0
    } else {
        k as f64 / (steps - 1) as f64
    }
}

/// Euler integration from `t = 1` to `t = 0` with `Δt = 1/steps`;
/// `velocity(k, t, state)` returns the velocity at step `k`.
pub fn euler_integrate(
    mut state: Vec<f64>,
    steps: usize,
    mut velocity: impl FnMut(usize, f64, &[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = velocity(k, t, &state)?;
        if v.len() != state.len() {
            return Err(Error::shape("velocity length differs from state"));
        }
        state.iter_mut().zip(&v).for_each(|(z, v)| *z -= dt * v);
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub caption: String,
    pub references: Vec<LatentVideo>,
    pub steps: usize,
    pub seed: u64,
    pub schedule: CfgSchedule,
    pub dims: [usize; 4],
    pub ref_rope_offset: usize,
}

impl SampleRequest {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        self.schedule.validate()
    }

    pub fn conditioning(&self, vocab: &Vocab) -> Result<Conditioning> {
        Ok(Conditioning {
            ref_rope_offset: self.ref_rope_offset,
            ..Conditioning::new(vocab.encode(&self.caption)?, self.references.clone())
        })
    }
}

/// Draws the initial video noise and the reference noise from `seed`.
pub fn initial_noise(dims: [usize; 4], refs: usize, seed: u64) -> (LatentVideo, LatentVideo) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = gaussian_latent(dims, &mut rng);
    let [_, c, h, w] = dims;
    let r = gaussian_latent([refs.max(1), c, h, w], &mut rng);
    (z, r)
}

pub fn sample(w: &dyn WeightSource, req: &SampleRequest) -> Result<LatentVideo> {
    req.validate()?;
    let cond = req.conditioning(&Vocab::default())?;
    let (z, ref_noise) = initial_noise(req.dims, req.references.len(), req.seed);
    let out = euler_integrate(
        z.data().iter().map(|&v| v as f64).collect(),
        req.steps,
        |k, t, state| {
            let (w1, w2) = req.schedule.at(progress(k, req.steps));
            let s = LatentVideo::from_vec(req.dims, state.iter().map(|&v| v as f32).collect())?;
            let v = cfg_velocity(w, &s, &cond, &ref_noise, t, w1, w2)?;
            Ok(v.flatten_all()?.to_vec1::<f64>()?)
        },
    )?;
    LatentVideo::from_vec(req.dims, out.into_iter().map(|v| v as f32).collect())
}

/// Intermediate products of the three rephrasing stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Rephrased {
    /// Fine-grained description of every reference.
    pub descriptions: Vec<String>,
    /// The prompt with each mention replaced by a coarse, distinguishable name.
    pub coarse: String,
    /// Final caption in the grammar, defaults filled in.
    pub caption: String,
}

struct Mention {
    text: String,
    color: Option<usize>,
    texture: Option<Texture>,
    shape: Option<Shape>,
    motion: Option<MotionPhrase>,
}

fn parse_motion(words: &[&str], offset: usize) -> Result<Option<MotionPhrase>> {
    let bad = |i: usize, msg: String| Error::CaptionParse {
        position: offset + i,
        message: msg,
    };
    if words.is_empty() {
        return Ok(None);
    }
    let mut direction = [0, 0];
    let mut spinning = false;
    let mut i = match words[0] {
        "stays" | "stay" => {
            if words.get(1) != Some(&"still") {
                return Err(bad(1, "expected `still`".into()));
            }
            2
        }
        "moves" | "move" | "moving" => {
            let d = words
                .get(1)
                .and_then(|w| direction_from_word(w))
                .ok_or_else(|| bad(1, "expected a direction".into()))?;
            direction = d;
            2
        }
        "spins" | "spin" | "spinning" => {
            spinning = true;
            1
        }
        w => return Err(bad(0, format!("unexpected word `{w}`"))),
    };
    if i < words.len() {
        if words[i] == "while" && matches!(words.get(i + 1), Some(&"spinning")) && !spinning {
            spinning = true;
            i += 2;
        } else if words[i] == "while" && words.get(i + 1) == Some(&"moving") && spinning {
            direction = words
                .get(i + 2)
                .and_then(|w| direction_from_word(w))
                .ok_or_else(|| bad(i + 2, "expected a direction".into()))?;
            i += 3;
        }
    }
    if let Some(w) = words.get(i) {
        return Err(bad(i, format!("trailing word `{w}`")));
    }
    Ok(Some(MotionPhrase {
        direction,
        spinning,
    }))
}

/// Multi-stage rephrasing: per-reference fine descriptions, mention binding
/// by colour/texture/shape, then default motion and background clauses.
/// References the prompt never mentions are appended as still subjects.
pub fn rephrase_stages(prompt: &str, refs: &[SubjectSpec]) -> Result<Rephrased> {
    let descriptions: Vec<String> = refs.iter().map(describe_subject).collect();
    let lowered = prompt.trim().trim_end_matches('.').to_lowercase();
    let words: Vec<&str> = lowered.split_whitespace().collect();

    // background clause: "... on a|the BG background"
    let mut body_end = words.len();
    let mut background = None;
    if words.len() >= 4 && words[words.len() - 1] == "background" {
        let k = words.len() - 4;
        if words[k] == "on" && matches!(words[k + 1], "a" | "the") {
            background =
                Some(
                    Background::from_name(words[k + 2]).ok_or_else(|| Error::CaptionParse {
                        position: k + 2,
                        message: format!("unknown background `{}`", words[k + 2]),
                    })?,
                );
            body_end = k;
        }
    }

    let mut mentions: Vec<Mention> = Vec::new();
    let mut start = 0;
    while start < body_end {
        let end = (start..body_end)
            .find(|&i| words[i] == "and")
            .unwrap_or(body_end);
        let clause = &words[start..end];
        let mut i = 0;
        if matches!(clause.first(), Some(&("a" | "an" | "the"))) {
            i = 1;
        }
        let (mut color, mut texture, mut shape) = (None, None, None);
        let mut named = Vec::new();
        while i < clause.len() {
            let w = clause[i];
            if let Some(c) = color_id_from_name(w) {
                color = Some(c);
            } else if let Some(t) = Texture::from_name(w) {
                texture = Some(t);
            } else if let Some(s) = Shape::from_name(w) {
                shape = Some(s);
            } else {
                break;
            }
            named.push(w);
            i += 1;
        }
        let motion = parse_motion(&clause[i..], start + i)?;
        if named.is_empty() {
            // "... and spins" continues the previous clause
            let prev = mentions.last_mut().ok_or_else(|| Error::CaptionParse {
                position: start,
                message: "clause names no subject".into(),
            })?;
            let m = motion.ok_or_else(|| Error::CaptionParse {
                position: start,
                message: "empty clause".into(),
            })?;
            let p = prev.motion.get_or_insert(MotionPhrase {
                direction: [0, 0],
                spinning: false,
            });
            p.spinning |= m.spinning;
            if m.direction != [0, 0] {
                p.direction = m.direction;
            }
        } else {
            mentions.push(Mention {
                text: format!("the {}", named.join(" ")),
                color,
                texture,
                shape,
                motion,
            });
        }
        start = end + 1;
    }

    // stage 2: bind every mention to an unused matching reference
    let mut bound = vec![false; refs.len()];
    let mut subjects = Vec::new();
    let mut coarse_clauses = Vec::new();
    for m in &mentions {
        let j = (0..refs.len())
            .find(|&j| {
                let r = &refs[j];
                !bound[j]
                    && m.color.is_none_or(|c| c == r.color_id())
                    && m.texture.is_none_or(|t| t == r.texture)
                    && m.shape.is_none_or(|s| s == r.shape)
            })
            .ok_or_else(|| Error::UnboundSubject(m.text.clone()))?;
        bound[j] = true;
        let r = &refs[j];
        // stage 3: default motion
        let motion = m.motion.unwrap_or(MotionPhrase {
            direction: [0, 0],
            spinning: false,
        });
        coarse_clauses.push(format!(
            "the {} {} {}",
            color_name(r.color_id()),
            r.shape,
            motion.render()
        ));
        subjects.push(ParsedSubject {
            color: r.color_id(),
            texture: r.texture,
            shape: r.shape,
            motion,
        });
    }
    for (j, r) in refs.iter().enumerate().filter(|(j, _)| !bound[*j]) {
        let _ = j;
        let still = MotionPhrase {
            direction: [0, 0],
            spinning: false,
        };
        coarse_clauses.push(format!(
            "the {} {} {}",
            color_name(r.color_id()),
            r.shape,
            still.render()
        ));
        subjects.push(ParsedSubject {
            color: r.color_id(),
            texture: r.texture,
            shape: r.shape,
            motion: still,
        });
    }
    if subjects.is_empty() {
        return Err(Error::invalid(
            "prompt names no subject and no references were given",
        ));
    }
    let background = background.unwrap_or(Background::Gray);
    let coarse = format!(
        "{} on a {} background",
        coarse_clauses.join(" and "),
        background
    );
    let caption = ParsedCaption {
        subjects,
        background,
    }
    .render();
    Ok(Rephrased {
        descriptions,
        coarse,
        caption,
    })
}

pub fn rephrase(prompt: &str, refs: &[SubjectSpec]) -> Result<String> {
    Ok(rephrase_stages(prompt, refs)?.caption)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::{DitConfig, ModelWeights};
    use crate::world::parse_caption;

    #[test]
    fn schedule_parse_and_endpoints() {
        let s: CfgSchedule = "linear:1-4,5-1".parse().unwrap();
        assert_eq!(s, CfgSchedule::dynamic_default());
        assert_eq!(s.at(0.0), (1.0, 5.0));
        assert_eq!(s.at(1.0), (4.0, 1.0));
        assert_eq!(s.to_string().parse::<CfgSchedule>().unwrap(), s);
        let st: CfgSchedule = "static:3.5,3.5".parse().unwrap();
        assert_eq!(st, CfgSchedule::default());
        assert!("static:-1,3".parse::<CfgSchedule>().is_err());
        assert!("cubic:1,2".parse::<CfgSchedule>().is_err());
        assert_eq!(progress(0, 1), 0.0);
        assert_eq!(progress(4, 5), 1.0);
    }

    #[test]
    fn euler_is_first_order_on_linear_field() {
        // dz/dt = a·z integrated from t=1 to 0 has z(0) = z(1)·e^{-a}
        let a = 0.8;
        let exact = (-a as f64).exp();
        let err = |steps| {
            let z = euler_integrate(vec![1.0], steps, |_, _, s| Ok(vec![a * s[0]])).unwrap();
            (z[0] - exact).abs()
        };
        let (e1, e2) = (err(20), err(40));
        assert!((e1 / e2 - 2.0).abs() < 0.1, "{e1} {e2}");
    }

    #[test]
    fn one_step_matches_hand_update() {
        let w = ModelWeights::random(DitConfig::default(), 7, 0.1).unwrap();
        let req = SampleRequest {
            caption: "a red plain circle stays still on a gray background".into(),
            references: vec![],
            steps: 1,
            seed: 3,
            schedule: CfgSchedule::Static { w1: 1.0, w2: 1.0 },
            dims: [8, 4, 16, 16],
            ref_rope_offset: 0,
        };
        let out = sample(&w, &req).unwrap();
        let (z, r) = initial_noise(req.dims, 0, 3);
        let cond = req.conditioning(&Vocab::default()).unwrap();
        let input = assemble_state(&z, &[], 1.0, &r).unwrap();
        let v = forward(&w, &input, &cond, 1.0)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        for ((o, z), v) in out.data().iter().zip(z.data()).zip(v) {
            assert!((*o as f64 - (*z as f64 - v as f64)).abs() < 1e-5);
        }
        assert_eq!(sample(&w, &req).unwrap(), out);
    }

    fn spec(shape: Shape, color: usize, texture: Texture) -> SubjectSpec {
        SubjectSpec::new(shape, color, texture, 0.4)
    }

    #[test]
    fn rephrase_fixpoint_and_enrichment() {
        let refs = [
            spec(Shape::Circle, 0, Texture::Striped),
            spec(Shape::Bar, 5, Texture::Plain),
        ];
        let full = "a red striped circle moves right while spinning and a blue plain bar stays still on a white background";
        assert_eq!(rephrase(full, &refs).unwrap(), full);

        let one = rephrase("the circle spins", &refs[..1]).unwrap();
        let p = parse_caption(&one).unwrap();
        assert_eq!(p.subjects[0].color, 0);
        assert_eq!(p.subjects[0].texture, Texture::Striped);
        assert!(p.subjects[0].motion.spinning);
        assert_eq!(p.subjects[0].motion.direction, [0, 0]);
        assert_eq!(p.background, Background::Gray);

        let both = rephrase(
            "the bar moves up and the circle moves left on a sand background",
            &refs,
        )
        .unwrap();
        let p = parse_caption(&both).unwrap();
        assert_eq!(p.subjects[0].shape, Shape::Bar);
        assert_eq!(p.subjects[1].shape, Shape::Circle);
        assert_eq!(p.subjects[1].motion.direction, [-1, 0]);

        let stages = rephrase_stages("the circle moves right and spins", &refs).unwrap();
        assert_eq!(stages.descriptions[0], "a red striped circle");
        assert!(stages
            .coarse
            .starts_with("the red circle moves right while spinning"));
        parse_caption(&stages.caption).unwrap();
    }

    #[test]
    fn unbound_mentions_fail() {
        let refs = [spec(Shape::Circle, 0, Texture::Plain)];
        assert!(matches!(
            rephrase("the square moves left", &refs),
            Err(Error::UnboundSubject(m)) if m == "the square"
        ));
        assert!(matches!(
            rephrase("the blue circle moves left", &refs),
            Err(Error::UnboundSubject(_))
        ));
        assert!(rephrase("the circle dances", &refs).is_err());
    }
}
