//! Preference pairs (RoPE-offset consistency pairs and real-vs-generated
//! pairs), the flow-matching DPO objective and DPO training against an
//! EMA-tracked reference model.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{Reference, Triplet};
use crate::dit::{
    DeltaView, DenseDelta, LoraAdapter, LoraParams, LoraView, ModelWeights, WeightSource,
};
use crate::error::{Error, Result};
use crate::inference::{sample, CfgSchedule, SampleRequest};
use crate::latent::LatentVideo;
use crate::train::{
    flow_loss, gaussian_latent, Adam, AdamConfig, DivergenceGuard, Ema, TimestepSampler,
    TrainSample,
};
use crate::world::{detect_subjects, Vocab, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Consis,
    RealFake,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::Consis => "consis",
            Provenance::RealFake => "realfake",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "consis" => Some(Provenance::Consis),
            "realfake" | "real_fake" | "real-fake" => Some(Provenance::RealFake),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub id: String,
    pub caption: String,
    pub references: Vec<Reference>,
    pub winner: LatentVideo,
    pub loser: LatentVideo,
    pub provenance: Provenance,
    pub seed: u64,
    pub steps: usize,
    /// Reference RoPE offset used for the loser (0 for real-fake pairs).
    pub offset: usize,
    pub source_model: String,
    pub winner_identity: f64,
    pub loser_identity: f64,
    pub winner_motion: f64,
    pub loser_motion: f64,
}

/// A prompt with its references, the input to pair generation.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrompt {
    pub id: String,
    pub caption: String,
    pub references: Vec<Reference>,
}

impl PairPrompt {
    pub fn from_triplet(t: &Triplet) -> Self {
        Self {
            id: t.id.clone(),
            caption: t.caption.clone(),
            references: t.references.clone(),
        }
    }
}

/// Mean oracle identity of a clip against its references.
pub fn identity_against(video: &LatentVideo, refs: &[Reference]) -> f64 {
    if refs.is_empty() {
        return 0.0;
    }
    let mut report = detect_subjects(video);
    let specs: Vec<_> = refs.iter().map(|r| (r.spec, r.pose)).collect();
    report.score_references(&specs, video.width());
    report.subjects.iter().map(|s| s.identity_match).sum::<f64>() / refs.len() as f64
}

/// Scores of every generated candidate, kept or not.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGeneration {
    pub pairs: Vec<PreferencePair>,
    /// `(winner identity, loser identity, winner motion, loser motion)`.
    pub candidates: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsisConfig {
    pub offset: usize,
    pub margin: f64,
    pub steps: usize,
    pub schedule: CfgSchedule,
    pub count: usize,
    pub seed: u64,
}

impl ConsisConfig {
    /// Offset of twice the clip length, margin 0.1 identity.
    pub fn for_world(world: &WorldConfig) -> Self {
        Self {
            offset: 2 * world.frames,
            margin: 0.1,
            steps: 16,
            schedule: CfgSchedule::default(),
            count: 400,
            seed: 0,
        }
    }
}

fn prompt_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(i as u64)
}

/// Winner sampled with the canonical reference positions, loser with the
/// reference RoPE offset shifted by `offset`; same seed, steps and
/// conditions. Pairs whose identity gap is below the margin are dropped.
pub fn gen_consis_pairs(
    cross_model: &dyn WeightSource,
    model_id: &str,
    prompts: &[PairPrompt],
    world: &WorldConfig,
    cfg: &ConsisConfig,
) -> Result<PairGeneration> {
    if cfg.offset == 0 {
        return Err(Error::invalid("consistency pairs need a positive RoPE offset"));
    }
    let mut out = PairGeneration {
        pairs: Vec::new(),
        candidates: Vec::new(),
    };
    for (i, p) in prompts.iter().take(cfg.count).enumerate() {
        let seed = prompt_seed(cfg.seed, i);
        let mut req = SampleRequest {
            caption: p.caption.clone(),
            references: p.references.iter().map(|r| r.latent.clone()).collect(),
            steps: cfg.steps,
            seed,
            schedule: cfg.schedule,
            dims: world.video_dims(),
            ref_rope_offset: 0,
        };
        let winner = sample(cross_model, &req)?;
        req.ref_rope_offset = cfg.offset;
        let loser = sample(cross_model, &req)?;
        let scores = [
            identity_against(&winner, &p.references),
            identity_against(&loser, &p.references),
            winner.mean_frame_difference(),
            loser.mean_frame_difference(),
        ];
        out.candidates.push(scores);
        if scores[0] - scores[1] >= cfg.margin {
            out.pairs.push(PreferencePair {
                id: format!("consis-{i:04}"),
                caption: p.caption.clone(),
                references: p.references.clone(),
                winner,
                loser,
                provenance: Provenance::Consis,
                seed,
                steps: cfg.steps,
                offset: cfg.offset,
                source_model: model_id.to_string(),
                winner_identity: scores[0],
                loser_identity: scores[1],
                winner_motion: scores[2],
                loser_motion: scores[3],
            });
        }
    }
    if out.pairs.is_empty() {
        return Err(Error::EmptyAfterCuration {
            candidates: out.candidates.len(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealFakeConfig {
    pub keep_threshold: f64,
    /// Kept only when loser motion < ratio × real motion.
    pub max_motion_ratio: f64,
    pub steps: usize,
    pub schedule: CfgSchedule,
    pub count: usize,
    pub seed: u64,
}

impl Default for RealFakeConfig {
    fn default() -> Self {
        Self {
            keep_threshold: 0.9,
            max_motion_ratio: 1.0,
            steps: 16,
            schedule: CfgSchedule::default(),
            count: 320,
            seed: 0,
        }
    }
}

/// Ground-truth clip as winner, the in-pair model's sample for the same
/// caption and references as loser. Kept only when the loser holds identity
/// (≥ threshold) but moves less than the real clip.
pub fn gen_realfake_pairs(
    in_pair_model: &dyn WeightSource,
    model_id: &str,
    triplets: &[Triplet],
    world: &WorldConfig,
    cfg: &RealFakeConfig,
) -> Result<PairGeneration> {
    let mut out = PairGeneration {
        pairs: Vec::new(),
        candidates: Vec::new(),
    };
    for (i, t) in triplets.iter().take(cfg.count).enumerate() {
        let seed = prompt_seed(cfg.seed, i);
        let req = SampleRequest {
            caption: t.caption.clone(),
            references: t.references.iter().map(|r| r.latent.clone()).collect(),
            steps: cfg.steps,
            seed,
            schedule: cfg.schedule,
            dims: world.video_dims(),
            ref_rope_offset: 0,
        };
        let loser = sample(in_pair_model, &req)?;
        let scores = [
            identity_against(&t.video, &t.references),
            identity_against(&loser, &t.references),
            t.video.mean_frame_difference(),
            loser.mean_frame_difference(),
        ];
        out.candidates.push(scores);
        if scores[1] >= cfg.keep_threshold && scores[3] < cfg.max_motion_ratio * scores[2] {
            out.pairs.push(PreferencePair {
                id: format!("realfake-{i:04}"),
                caption: t.caption.clone(),
                references: t.references.clone(),
                winner: t.video.clone(),
                loser,
                provenance: Provenance::RealFake,
                seed,
                steps: cfg.steps,
                offset: 0,
                source_model: model_id.to_string(),
                winner_identity: scores[0],
                loser_identity: scores[1],
                winner_motion: scores[2],
                loser_motion: scores[3],
            });
        }
    }
    if out.pairs.is_empty() {
        return Err(Error::EmptyAfterCuration {
            candidates: out.candidates.len(),
        });
    }
    Ok(out)
}

/// Winner and loser as training samples sharing caption and references.
#[derive(Debug, Clone)]
pub struct DpoSample {
    pub winner: TrainSample,
    pub loser: TrainSample,
}

impl DpoSample {
    pub fn from_pair(p: &PreferencePair, vocab: &Vocab) -> Result<Self> {
        let tokens = vocab.encode(&p.caption)?;
        let refs: Vec<LatentVideo> = p.references.iter().map(|r| r.latent.clone()).collect();
        Ok(Self {
            winner: TrainSample {
                video: p.winner.clone(),
                refs: refs.clone(),
                tokens: tokens.clone(),
            },
            loser: TrainSample {
                video: p.loser.clone(),
                refs,
                tokens,
            },
        })
    }
}

/// `−log σ(x)` evaluated without overflow on either side.
fn neg_log_sigmoid(x: &Tensor) -> Result<Tensor> {
    let v = x.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    Ok(if v >= 0.0 {
        (x.neg()?.exp()? + 1.0)?.log()?
    } else {
        (x.neg()? + (x.exp()? + 1.0)?.log()?)?
    })
}

/// The scalar objective from the four flow errors.
pub fn dpo_objective(e_theta_w: f64, e_ref_w: f64, e_theta_l: f64, e_ref_l: f64, beta: f64) -> f64 {
    let x = beta * ((e_ref_w - e_theta_w) - (e_ref_l - e_theta_l));
    // −log σ(x) = softplus(−x)
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// DPO loss of one pair: the log-likelihood is replaced by the negative flow
/// error at one `(t, noise)` shared by all four passes. Gradients flow only
/// through `theta`.
pub fn dpo_loss(
    theta: &dyn WeightSource,
    reference: &dyn WeightSource,
    s: &DpoSample,
    t: f64,
    noise: &LatentVideo,
    beta: f64,
) -> Result<Tensor> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be > 0, got {beta}")));
    }
    let e = |w: &dyn WeightSource, x: &TrainSample| flow_loss(w, x, t, noise, false, false);
    let ref_w = e(reference, &s.winner)?.detach();
    let ref_l = e(reference, &s.loser)?.detach();
    let th_w = e(theta, &s.winner)?;
    let th_l = e(theta, &s.loser)?;
    let x = (((ref_w - th_w)? - (ref_l - th_l)?)? * beta)?;
    neg_log_sigmoid(&x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub adam: AdamConfig,
    pub iterations: usize,
    pub batch_size: usize,
    /// EMA decay of the reference model; 1 keeps it frozen.
    pub ref_ema_decay: f64,
    pub rank: usize,
    pub lora_scale: f64,
    pub timestep: TimestepSampler,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 500.0,
            adam: AdamConfig {
                lr: 5e-4,
                ..AdamConfig::default()
            },
            iterations: 4000,
            batch_size: 2,
            ref_ema_decay: 0.99,
            rank: 16,
            lora_scale: 1.0,
            timestep: TimestepSampler::default(),
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            bad.push(format!("beta = {} must be > 0", self.beta));
        }
        if !(self.ref_ema_decay > 0.0 && self.ref_ema_decay <= 1.0) {
            bad.push(format!("ref_ema_decay = {} outside (0, 1]", self.ref_ema_decay));
        }
        if self.rank == 0 {
            bad.push("rank must be >= 1".into());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".into());
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            bad.push(format!("learning rate {} must be positive", self.adam.lr));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(bad))
        }
    }
}

pub struct DpoOutcome {
    pub adapter: LoraAdapter,
    pub losses: Vec<f64>,
    /// Dense delta of the reference model after the last update.
    pub reference_delta: DenseDelta,
}

/// Trains a fresh LoRA on top of `base` (the merged SFT model). The
/// reference model starts at `base` and follows an EMA of the trained model
/// after every optimizer step.
pub fn dpo_train(base: &ModelWeights, pairs: &[DpoSample], cfg: &DpoConfig) -> Result<DpoOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("no preference pairs to train on"));
    }
    let dtype = base.dtype();
    let targets = base.config().lora_targets();
    let init = LoraAdapter::init(base, &targets, cfg.rank, cfg.lora_scale, cfg.seed)?;
    let params = LoraParams::from_adapter(&init, dtype)?;
    let vars = params.vars();
    let mut adam = Adam::new(cfg.adam, &vars)?;
    let start = params.delta()?;
    let names: Vec<String> = start.keys().cloned().collect();
    let initial: Vec<Tensor> = start.values().map(|t| t.zeros_like()).collect::<candle_core::Result<_>>()?;
    let mut ema = Ema::new(cfg.ref_ema_decay, &initial)?;
    let to_delta = |values: &[Tensor]| -> Result<DenseDelta> {
        names
            .iter()
            .zip(values)
            .map(|(k, v)| Ok((k.clone(), v.to_dtype(dtype)?)))
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD90);
    let mut guard = DivergenceGuard::default();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let theta = LoraView {
        base,
        params: &params,
    };
    for it in 0..cfg.iterations {
        let ref_delta = to_delta(ema.values())?;
        let reference = DeltaView {
            base,
            delta: &ref_delta,
        };
        let mut total: Option<Tensor> = None;
        for _ in 0..cfg.batch_size {
            let s = &pairs[rng.random_range(0..pairs.len())];
            let t = cfg.timestep.sample(&mut rng);
            let [f, c, h, w] = s.winner.video.dims();
            let noise = gaussian_latent([f + s.winner.refs.len(), c, h, w], &mut rng);
            let l = dpo_loss(&theta, &reference, s, t, &noise, cfg.beta)?;
            total = Some(match total {
                None => l,
                Some(acc) => (acc + l)?,
            });
        }
        let loss = (total.expect("batch_size >= 1") / cfg.batch_size as f64)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        guard.check(it, value)?;
        let grads = loss.backward()?;
        adam.step(&vars, &grads)?;
        // the reference update happens after the optimizer step
        let current: Vec<Tensor> = params.delta()?.into_values().collect();
        ema.update(&current)?;
        losses.push(value);
    }
    let metadata = BTreeMap::from([
        ("kind".to_string(), "dpo".to_string()),
        ("beta".to_string(), cfg.beta.to_string()),
        ("iterations".to_string(), cfg.iterations.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
    ]);
    Ok(DpoOutcome {
        adapter: params.to_adapter(metadata)?,
        losses,
        reference_delta: to_delta(ema.values())?,
    })
}

/// JSON-lines pair manifest record; tensors live next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub caption: String,
    pub winner: String,
    pub loser: String,
    pub references: Vec<String>,
    pub provenance: Provenance,
    pub seed: u64,
    pub steps: usize,
    pub offset: usize,
    pub source_model: String,
    pub winner_identity: f64,
    pub loser_identity: f64,
    pub winner_motion: f64,
    pub loser_motion: f64,
}

pub fn write_pairs(dir: &std::path::Path, pairs: &[PreferencePair]) -> Result<std::path::PathBuf> {
    use std::io::Write;
    std::fs::create_dir_all(dir.join("pairs"))?;
    let mut lines = Vec::new();
    for p in pairs {
        let winner = format!("pairs/{}_win.lgt", p.id);
        let loser = format!("pairs/{}_lose.lgt", p.id);
        p.winner.save(&dir.join(&winner))?;
        p.loser.save(&dir.join(&loser))?;
        let mut references = Vec::new();
        for (j, r) in p.references.iter().enumerate() {
            let path = format!("pairs/{}_ref{j}.lgt", p.id);
            crate::curation::save_reference(&dir.join(&path), r)?;
            references.push(path);
        }
        let rec = PairRecord {
            id: p.id.clone(),
            caption: p.caption.clone(),
            winner,
            loser,
            references,
            provenance: p.provenance,
            seed: p.seed,
            steps: p.steps,
            offset: p.offset,
            source_model: p.source_model.clone(),
            winner_identity: p.winner_identity,
            loser_identity: p.loser_identity,
            winner_motion: p.winner_motion,
            loser_motion: p.loser_motion,
        };
        lines.push(serde_json::to_string(&rec)?);
    }
    let path = dir.join("pairs.jsonl");
    let mut f = std::fs::File::create(&path)?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(path)
}

pub fn read_pairs(manifest: &std::path::Path) -> Result<Vec<PreferencePair>> {
    let dir = manifest.parent().unwrap_or(std::path::Path::new("."));
    let text = std::fs::read_to_string(manifest)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: PairRecord = serde_json::from_str(l)?;
            Ok(PreferencePair {
                references: r
                    .references
                    .iter()
                    .map(|p| crate::curation::load_reference(&dir.join(p)))
                    .collect::<Result<_>>()?,
                winner: LatentVideo::load(&dir.join(&r.winner))?,
                loser: LatentVideo::load(&dir.join(&r.loser))?,
                id: r.id,
                caption: r.caption,
                provenance: r.provenance,
                seed: r.seed,
                steps: r.steps,
                offset: r.offset,
                source_model: r.source_model,
                winner_identity: r.winner_identity,
                loser_identity: r.loser_identity,
                winner_motion: r.winner_motion,
                loser_motion: r.loser_motion,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::DitConfig;

    #[test]
    fn objective_symmetry_and_monotonicity() {
        let ln2 = std::f64::consts::LN_2;
        assert!((dpo_objective(0.3, 0.3, 0.7, 0.7, 10.0) - ln2).abs() < 1e-15);
        assert!((dpo_objective(0.1, 0.9, 0.8, 0.2, 1e-12) - ln2).abs() < 1e-9);
        // shrinking the winner's error strictly lowers the loss
        let mut last = f64::INFINITY;
        for k in 0..20 {
            let e_w = 0.5 - 0.02 * k as f64;
            let l = dpo_objective(e_w, 0.5, 0.5, 0.5, 5.0);
            assert!(l < last);
            last = l;
        }
        assert!(dpo_objective(0.0, 1e6, 1e6, 0.0, 1.0).is_finite());
        assert!(dpo_objective(1e6, 0.0, 0.0, 1e6, 1.0).is_finite());
    }

    fn toy_pair(seed: u64) -> DpoSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refs = vec![gaussian_latent([1, 4, 16, 16], &mut rng)];
        let mk = |rng: &mut ChaCha8Rng| TrainSample {
            video: gaussian_latent([8, 4, 16, 16], rng),
            refs: refs.clone(),
            tokens: vec![3, 4, 5],
        };
        DpoSample {
            winner: mk(&mut rng),
            loser: mk(&mut rng),
        }
    }

    #[test]
    fn loss_is_log2_at_reference() {
        let w = ModelWeights::random(DitConfig::default(), 2, 0.1).unwrap();
        let s = toy_pair(1);
        let noise = gaussian_latent([9, 4, 16, 16], &mut ChaCha8Rng::seed_from_u64(4));
        let l = dpo_loss(&w, &w, &s, 0.4, &noise, 100.0).unwrap();
        let v = l.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-6, "{v}");
        assert!(dpo_loss(&w, &w, &s, 0.4, &noise, 0.0).is_err());
    }

    #[test]
    fn zero_iterations_is_identity_and_frozen_reference_stays_put() {
        let w = ModelWeights::random(DitConfig::default(), 3, 0.1).unwrap();
        let pairs = vec![toy_pair(2)];
        let mut cfg = DpoConfig {
            iterations: 0,
            rank: 2,
            ..DpoConfig::default()
        };
        let out = dpo_train(&w, &pairs, &cfg).unwrap();
        for f in out.adapter.factors.values() {
            assert!(f.b.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
        }
        cfg.iterations = 2;
        cfg.ref_ema_decay = 1.0;
        let out = dpo_train(&w, &pairs, &cfg).unwrap();
        for d in out.reference_delta.values() {
            assert!(d.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
        }
        assert!((out.losses[0] - std::f64::consts::LN_2).abs() < 1e-6);
        let again = dpo_train(&w, &pairs, &cfg).unwrap();
        assert_eq!(again.losses, out.losses);
    }
}
