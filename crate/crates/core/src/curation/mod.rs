//! Triplet construction: in-pair and cross-pair references, subject binding
//! in captions, hierarchical tags, feedback-driven sampling weights and
//! super-resolution degradation.

mod bank;
mod manifest;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::world::{
    describe_subject, render_reference, render_scene, Background, Identity, MotionPhrase, Pose,
    SceneSampler, SceneScript, SubjectSpec, WorldConfig, IDENTITY_THRESHOLD,
};

pub use bank::{BankEntry, RetrievalBank};
pub use manifest::{
    load_reference, read_manifest, reference_sidecar, save_reference, sidecar_path, write_dataset,
    ManifestRecord, ReferenceRecord,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingMode {
    #[serde(rename = "in")]
    InPair,
    #[serde(rename = "cross")]
    CrossPair,
}

impl PairingMode {
    pub fn name(self) -> &'static str {
        match self {
            PairingMode::InPair => "in",
            PairingMode::CrossPair => "cross",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "in" | "in_pair" | "in-pair" => Some(PairingMode::InPair),
            "cross" | "cross_pair" | "cross-pair" => Some(PairingMode::CrossPair),
            _ => None,
        }
    }
}

/// One reference subject: its specification, where it was rendered from, and
/// the single-frame latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub spec: SubjectSpec,
    pub pose: Pose,
    pub background: Background,
    pub source_script_id: String,
    pub latent: LatentVideo,
}

impl Reference {
    pub fn render(
        spec: SubjectSpec,
        pose: Pose,
        background: Background,
        source_script_id: impl Into<String>,
        world: &WorldConfig,
    ) -> Result<Self> {
        Ok(Self {
            latent: render_reference(&spec, pose, background, world)?,
            spec,
            pose,
            background,
            source_script_id: source_script_id.into(),
        })
    }
}

/// Five-level hierarchical tag: subject count, primary subject category,
/// primary motion type, background, pairing mode.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TagCode {
    levels: [String; 5],
}

impl TagCode {
    pub const LEVELS: usize = 5;

    pub fn new(levels: [String; 5]) -> Result<Self> {
        if let Some(l) = levels.iter().find(|l| l.is_empty() || l.contains('.')) {
            return Err(Error::invalid(format!("bad tag level `{l}`")));
        }
        Ok(Self { levels })
    }

    pub fn parse(encoded: &str) -> Result<Self> {
        let parts: Vec<&str> = encoded.split('.').collect();
        let levels: [String; 5] = parts
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .try_into()
            .map_err(|_| Error::invalid(format!("tag `{encoded}` must have exactly 5 levels")))?;
        Self::new(levels)
    }

    pub fn levels(&self) -> &[String; 5] {
        &self.levels
    }

    pub fn encoded(&self) -> String {
        self.levels.join(".")
    }

    /// Dotted encoding of the first `k` levels (`k = 0` is the empty root).
    pub fn prefix(&self, k: usize) -> String {
        self.levels[..k.min(5)].join(".")
    }

    /// True when `prefix` is exactly the encoding of some leading levels.
    pub fn has_prefix(&self, prefix: &str) -> bool {
        (1..=5).any(|k| self.prefix(k) == prefix)
    }
}

impl std::fmt::Display for TagCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.encoded())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub id: String,
    pub caption: String,
    pub video: LatentVideo,
    pub references: Vec<Reference>,
    pub pairing_mode: PairingMode,
    pub tag: TagCode,
    pub source_script_id: String,
    pub script: SceneScript,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleBand {
    pub min: f32,
    pub max: f32,
}

impl Default for ScaleBand {
    fn default() -> Self {
        Self { min: 0.3, max: 0.6 }
    }
}

impl ScaleBand {
    pub fn contains(&self, scale: f32) -> bool {
        (self.min..=self.max).contains(&scale)
    }
}

fn stage_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// The keyframe a script's references are cropped from.
pub fn keyframe(script: &SceneScript) -> usize {
    stage_rng(script.seed, 1).random_range(0..script.frames)
}

/// Video description with coarse subject names, one clause per subject.
fn coarse_clauses(script: &SceneScript) -> Vec<String> {
    script
        .subjects
        .iter()
        .map(|s| {
            let motion =
                MotionPhrase::from_velocity(s.trajectory.velocity, s.trajectory.rotation_rate);
            format!("the {} {}", s.spec.shape, motion.render())
        })
        .collect()
}

/// The user-style prompt for a scene: coarse subject names, full motion and
/// background clauses.
pub fn coarse_prompt(script: &SceneScript) -> String {
    format!(
        "{} on a {} background",
        coarse_clauses(script).join(" and "),
        script.background
    )
}

/// Subject binding: each subject's coarse name in the video description is
/// replaced with the refined description of its bound reference.
pub fn bind_caption(script: &SceneScript, references: &[Reference]) -> Result<String> {
    if references.len() != script.subjects.len() {
        return Err(Error::invalid(format!(
            "{} references for {} subjects",
            references.len(),
            script.subjects.len()
        )));
    }
    let clauses: Vec<String> = coarse_clauses(script)
        .into_iter()
        .zip(script.subjects.iter().zip(references))
        .map(|(clause, (subject, r))| {
            clause.replacen(
                &format!("the {}", subject.spec.shape),
                &describe_subject(&r.spec),
                1,
            )
        })
        .collect();
    Ok(format!(
        "{} on a {} background",
        clauses.join(" and "),
        script.background
    ))
}

pub fn assign_tag(script: &SceneScript, mode: PairingMode) -> TagCode {
    let primary = &script.subjects[0];
    TagCode {
        levels: [
            script.subjects.len().to_string(),
            primary.spec.shape.name().to_string(),
            primary.trajectory.motion().name().to_string(),
            script.background.name().to_string(),
            mode.name().to_string(),
        ],
    }
}

/// In-pair triplet: references are the video's own subjects at a keyframe,
/// on the video's background.
pub fn make_in_pair(
    script: &SceneScript,
    video: &LatentVideo,
    band: ScaleBand,
    world: &WorldConfig,
) -> Result<Triplet> {
    for (i, s) in script.subjects.iter().enumerate() {
        if !band.contains(s.spec.scale) {
            return Err(Error::Script {
                id: script.id.clone(),
                reason: format!(
                    "subject {i} scale {} outside the in-pair band [{}, {}]",
                    s.spec.scale, band.min, band.max
                ),
            });
        }
    }
    world.check_video(video)?;
    let k = keyframe(script);
    let references = script
        .subjects
        .iter()
        .map(|s| {
            Reference::render(
                s.spec,
                s.trajectory.pose_at(k),
                script.background,
                script.id.clone(),
                world,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    finish_triplet(script, video, references, PairingMode::InPair)
}

/// Cross-pair triplet: per subject, the top-k nearest bank entries from other
/// scripts are candidates; those passing the identity threshold are kept and
/// one is chosen uniformly with a script-seeded generator.
pub fn make_cross_pair(
    script: &SceneScript,
    video: &LatentVideo,
    bank: &RetrievalBank,
    top_k: usize,
    world: &WorldConfig,
) -> Result<Triplet> {
    world.check_video(video)?;
    let mut rng = stage_rng(script.seed, 2);
    let mut references = Vec::with_capacity(script.subjects.len());
    for (i, s) in script.subjects.iter().enumerate() {
        let query = s.spec.descriptor();
        let candidates: Vec<&BankEntry> = bank
            .query(&query, top_k, Some(&script.id))
            .into_iter()
            .map(|(e, _)| &bank.entries()[e])
            .filter(|e| crate::world::identity_match(&query, &e.descriptor) >= IDENTITY_THRESHOLD)
            .collect();
        if candidates.is_empty() {
            return Err(Error::InsufficientCandidates {
                script: script.id.clone(),
                subject: i,
            });
        }
        let chosen = candidates[rng.random_range(0..candidates.len())];
        references.push(chosen.reference.clone());
    }
    finish_triplet(script, video, references, PairingMode::CrossPair)
}

fn finish_triplet(
    script: &SceneScript,
    video: &LatentVideo,
    references: Vec<Reference>,
    mode: PairingMode,
) -> Result<Triplet> {
    Ok(Triplet {
        id: format!("{}-{}", script.id, mode.name()),
        caption: bind_caption(script, &references)?,
        video: video.clone(),
        tag: assign_tag(script, mode),
        pairing_mode: mode,
        source_script_id: script.id.clone(),
        script: script.clone(),
        seed: script.seed,
        references,
    })
}

/// Sampling weights `∝ 1 + deficiency(longest matching prefix)`, summing to 1.
pub fn rebalance(tags: &[TagCode], feedback: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
    if tags.is_empty() {
        return Err(Error::invalid("rebalance needs a non-empty dataset"));
    }
    if let Some((k, v)) = feedback
        .iter()
        .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
    {
        return Err(Error::invalid(format!(
            "deficiency for `{k}` must be >= 0, got {v}"
        )));
    }
    let raw: Vec<f64> = tags
        .iter()
        .map(|t| {
            let deficiency = (1..=TagCode::LEVELS)
                .rev()
                .find_map(|k| feedback.get(&t.prefix(k)))
                .copied()
                .unwrap_or(0.0);
            1.0 + deficiency
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Area-downsample by `factor`, add seeded Gaussian noise of std `sigma`,
/// then upsample back by pixel replication (nearest neighbour).
pub fn degrade_video(
    video: &LatentVideo,
    factor: usize,
    sigma: f64,
    seed: u64,
) -> Result<LatentVideo> {
    let [f, c, h, w] = video.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "frame {h}x{w} is not divisible by factor {factor}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    let (lh, lw) = (h / factor, w / factor);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LatentVideo::zeros(f, c, h, w);
    let inv = 1.0 / (factor * factor) as f64;
    for fi in 0..f {
        for ci in 0..c {
            for by in 0..lh {
                for bx in 0..lw {
                    let mut sum = 0.0f64;
                    for y in by * factor..(by + 1) * factor {
                        for x in bx * factor..(bx + 1) * factor {
                            sum += video.get(fi, ci, y, x) as f64;
                        }
                    }
                    let mut v = sum * inv;
                    if sigma > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v += sigma * z;
                    }
                    let v = v as f32;
                    for y in by * factor..(by + 1) * factor {
                        for x in bx * factor..(bx + 1) * factor {
                            out.set(fi, ci, y, x, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `<prompt, low-res, high-res, reference>` super-resolution training unit.
#[derive(Debug, Clone)]
pub struct SrQuadruple {
    pub caption: String,
    pub low: LatentVideo,
    pub high: LatentVideo,
    pub references: Vec<Reference>,
}

pub fn make_sr_quadruple(triplet: &Triplet, factor: usize, sigma: f64) -> Result<SrQuadruple> {
    Ok(SrQuadruple {
        caption: triplet.caption.clone(),
        low: degrade_video(&triplet.video, factor, sigma, triplet.seed)?,
        high: triplet.video.clone(),
        references: triplet.references.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub in_pair: usize,
    pub cross_pair: usize,
    pub scale_band: ScaleBand,
    pub top_k: usize,
    /// Single-subject retrieval-pool scripts generated per identity.
    pub pool_per_identity: usize,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            in_pair: 2700,
            cross_pair: 3300,
            scale_band: ScaleBand::default(),
            top_k: 15,
            pool_per_identity: 16,
            seed: 17,
        }
    }
}

pub struct Dataset {
    pub triplets: Vec<Triplet>,
    pub bank: RetrievalBank,
}

/// Scripts for the retrieval pool: `per_identity` single-subject scenes of
/// every identity at random placements.
pub fn retrieval_pool(sampler: &SceneSampler, per_identity: usize, seed: u64) -> Vec<SceneScript> {
    let mut out = Vec::with_capacity(Identity::COUNT * per_identity);
    for idx in 0..Identity::COUNT {
        let identity = Identity::from_index(idx);
        for k in 0..per_identity {
            let s = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((idx * per_identity + k) as u64);
            let mut script = sampler.sample_with_count(format!("pool-{idx:03}-{k:02}"), s, 1);
            let spec = &mut script.subjects[0].spec;
            *spec = SubjectSpec::from_identity(identity, spec.scale);
            out.push(script);
        }
    }
    out
}

/// Scene scripts for one dataset: in-band scripts for in-pair triplets, the
/// rest for cross-pair triplets, plus the single-subject retrieval pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptSet {
    pub in_pair: Vec<SceneScript>,
    pub cross_pair: Vec<SceneScript>,
    pub pool: Vec<SceneScript>,
}

pub fn generate_scripts(sampler: &SceneSampler, cfg: &CurationConfig) -> ScriptSet {
    let mut in_pair = Vec::with_capacity(cfg.in_pair);
    let mut cross_pair = Vec::with_capacity(cfg.cross_pair);
    let mut n = 0u64;
    while in_pair.len() < cfg.in_pair || cross_pair.len() < cfg.cross_pair {
        let seed = cfg.seed.wrapping_mul(7_919).wrapping_add(n);
        let script = sampler.sample(format!("s{n:06}"), seed);
        n += 1;
        let in_band = script
            .subjects
            .iter()
            .all(|s| cfg.scale_band.contains(s.spec.scale));
        if in_band && in_pair.len() < cfg.in_pair {
            in_pair.push(script);
        } else if cross_pair.len() < cfg.cross_pair {
            cross_pair.push(script);
        }
    }
    ScriptSet {
        in_pair,
        cross_pair,
        pool: retrieval_pool(sampler, cfg.pool_per_identity, cfg.seed),
    }
}

/// Builds the retrieval bank over the pool plus all dataset scripts, then
/// the in-pair and cross-pair triplets.
pub fn build_triplets(world: &WorldConfig, scripts: &ScriptSet, cfg: &CurationConfig) -> Result<Dataset> {
    let all: Vec<SceneScript> = scripts
        .pool
        .iter()
        .chain(&scripts.in_pair)
        .chain(&scripts.cross_pair)
        .cloned()
        .collect();
    let bank = RetrievalBank::build(&all, world)?;
    let mut triplets = Vec::with_capacity(scripts.in_pair.len() + scripts.cross_pair.len());
    for s in &scripts.in_pair {
        let video = render_scene(s, world)?;
        triplets.push(make_in_pair(s, &video, cfg.scale_band, world)?);
    }
    for s in &scripts.cross_pair {
        let video = render_scene(s, world)?;
        triplets.push(make_cross_pair(s, &video, &bank, cfg.top_k, world)?);
    }
    Ok(Dataset { triplets, bank })
}

pub fn build_dataset(sampler: &SceneSampler, cfg: &CurationConfig) -> Result<Dataset> {
    build_triplets(&sampler.world, &generate_scripts(sampler, cfg), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{parse_caption, ScriptSubject, Shape, Texture, Trajectory};

    fn tag(s: &str) -> TagCode {
        TagCode::parse(s).unwrap()
    }

    #[test]
    fn tag_mapping_matches_vocabulary() {
        let script = SceneScript {
            id: "x".into(),
            subjects: vec![
                ScriptSubject {
                    spec: SubjectSpec::new(Shape::Circle, 0, Texture::Plain, 0.3),
                    trajectory: Trajectory {
                        start: [4, 4],
                        velocity: [1, 0],
                        start_rotation: 0,
                        rotation_rate: 0,
                    },
                },
                ScriptSubject {
                    spec: SubjectSpec::new(Shape::Bar, 2, Texture::Dotted, 0.3),
                    trajectory: Trajectory::still(12, 12),
                },
            ],
            background: Background::White,
            frames: 8,
            seed: 3,
        };
        assert_eq!(
            assign_tag(&script, PairingMode::CrossPair).encoded(),
            "2.circle.linear.white.cross"
        );
    }

    #[test]
    fn tag_parse_requires_five_levels() {
        assert!(TagCode::parse("1.circle.static.gray").is_err());
        assert!(TagCode::parse("1.circle.static.gray.in.x").is_err());
        assert!(TagCode::parse("1..static.gray.in").is_err());
        let t = tag("1.circle.static.gray.in");
        assert!(t.has_prefix("1.circle"));
        assert!(!t.has_prefix("1.circ"));
        assert_eq!(t.prefix(0), "");
    }

    #[test]
    fn rebalance_uniform_and_hand_case() {
        let tags = vec![
            tag("1.circle.static.gray.in"),
            tag("1.circle.linear.gray.in"),
            tag("2.star.static.gray.in"),
            tag("2.star.spin.white.cross"),
        ];
        let w = rebalance(&tags, &BTreeMap::new()).unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));

        // prefix "1" covers half the data with deficiency 1: raw 2,2,1,1 → /6
        let fb = BTreeMap::from([("1".to_string(), 1.0)]);
        let w = rebalance(&tags, &fb).unwrap();
        let expect = [2.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((w[0] / w[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rebalance_uses_longest_prefix_and_validates() {
        let tags = vec![tag("1.circle.static.gray.in"), tag("1.star.static.gray.in")];
        let fb = BTreeMap::from([("1".to_string(), 1.0), ("1.circle".to_string(), 3.0)]);
        let w = rebalance(&tags, &fb).unwrap();
        assert!((w[0] / w[1] - 2.0).abs() < 1e-12);
        assert!(rebalance(&[], &fb).is_err());
        let bad = BTreeMap::from([("1".to_string(), -0.5)]);
        assert!(rebalance(&tags, &bad).is_err());
    }

    #[test]
    fn degrade_identity_and_constant_cases() {
        let world = WorldConfig::default();
        let sampler = SceneSampler::new(world);
        let v = render_scene(&sampler.sample("d", 5), &world).unwrap();
        let same = degrade_video(&v, 1, 0.0, 9).unwrap();
        assert!(same
            .data()
            .iter()
            .zip(v.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        let c = LatentVideo::from_vec([2, 4, 16, 16], vec![0.3; 2 * 4 * 256]).unwrap();
        assert_eq!(degrade_video(&c, 2, 0.0, 1).unwrap(), c);
        assert!(degrade_video(&c, 3, 0.0, 1).is_err());
        assert!(degrade_video(&c, 2, -1.0, 1).is_err());
    }

    #[test]
    fn in_pair_binding_and_band() {
        let world = WorldConfig::default();
        let sampler = SceneSampler::new(world);
        let script = (0..)
            .map(|s| sampler.sample_with_count("ip", s, 1))
            .find(|s| ScaleBand::default().contains(s.subjects[0].spec.scale))
            .unwrap();
        let video = render_scene(&script, &world).unwrap();
        let t = make_in_pair(&script, &video, ScaleBand::default(), &world).unwrap();
        assert_eq!(t.references.len(), 1);
        assert_eq!(t.pairing_mode, PairingMode::InPair);
        let parsed = parse_caption(&t.caption).unwrap();
        assert_eq!(parsed.subjects[0].color, t.references[0].spec.color_id());
        assert_eq!(parsed.subjects[0].texture, t.references[0].spec.texture);
        assert_eq!(parsed.subjects[0].shape, t.references[0].spec.shape);

        let narrow = ScaleBand { min: 0.7, max: 0.8 };
        assert!(make_in_pair(&script, &video, narrow, &world).is_err());
    }
}
