//! Rectified-flow training: full-parameter base pretraining and LoRA
//! fine-tuning with modality drops, EMA tracking and a divergence guard.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curation::{PairingMode, Triplet};
use crate::dit::{
    forward, Conditioning, DitConfig, LoraAdapter, LoraParams, LoraView, ModelWeights, WeightSource,
};
use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::world::{caption_scene, Vocab};

pub const T_MIN: f64 = 1e-4;
pub const T_MAX: f64 = 1.0 - 1e-4;
pub const DIVERGENCE_LOSS: f64 = 1e3;
pub const DIVERGENCE_STEPS: usize = 100;

/// Logit-normal timestep sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimestepSampler {
    pub mean: f64,
    pub std: f64,
}

impl Default for TimestepSampler {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl TimestepSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        let x = self.mean + self.std * z;
        (1.0 / (1.0 + (-x).exp())).clamp(T_MIN, T_MAX)
    }
}

pub fn sample_timestep<R: Rng + ?Sized>(sampler: &TimestepSampler, rng: &mut R) -> f64 {
    sampler.sample(rng)
}

pub fn gaussian_latent<R: Rng + ?Sized>(dims: [usize; 4], rng: &mut R) -> LatentVideo {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    LatentVideo::from_vec(dims, data).expect("finite gaussian draw")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear learning-rate warmup length in steps.
    pub warmup: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 20,
        }
    }
}

/// Adam over a fixed, ordered list of variables.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, vars: &[&Var]) -> Result<Self> {
        let zeros = vars
            .iter()
            .map(|v| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        })
    }

    pub fn step(&mut self, vars: &[&Var], grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let warm = if c.warmup == 0 {
            1.0
        } else {
            (self.step as f64 / c.warmup as f64).min(1.0)
        };
        let lr = c.lr * warm;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, var) in vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // detached so optimizer state never holds the autograd graph
            let g = &g.detach();
            self.m[i] = ((&self.m[i] * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            self.v[i] = ((&self.v[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let mhat = (&self.m[i] / bc1)?;
            let denom = ((&self.v[i] / bc2)?.sqrt()? + c.eps)?;
            let update = ((mhat / denom)? * lr)?;
            var.set(&(var.as_tensor().detach() - update)?)?;
        }
        Ok(())
    }
}

/// Tracks non-finite and persistently huge losses.
#[derive(Debug, Default)]
pub struct DivergenceGuard {
    above: usize,
}

impl DivergenceGuard {
    pub fn check(&mut self, iteration: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                iteration,
                detail: format!("loss = {loss}"),
            });
        }
        if loss > DIVERGENCE_LOSS {
            self.above += 1;
            if self.above >= DIVERGENCE_STEPS {
                return Err(Error::Diverged {
                    iteration,
                    threshold: DIVERGENCE_LOSS,
                    steps: DIVERGENCE_STEPS,
                });
            }
        } else {
            self.above = 0;
        }
        Ok(())
    }
}

/// A training example with its caption already tokenized.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub video: LatentVideo,
    pub refs: Vec<LatentVideo>,
    pub tokens: Vec<u32>,
}

impl TrainSample {
    pub fn from_triplet(t: &Triplet, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            video: t.video.clone(),
            refs: t.references.iter().map(|r| r.latent.clone()).collect(),
            tokens: vocab.encode(&t.caption)?,
        })
    }

    /// Text-to-video sample: the scene caption, no references.
    pub fn text_only(t: &Triplet, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            video: t.video.clone(),
            refs: Vec::new(),
            tokens: vocab.encode(&caption_scene(&t.script))?,
        })
    }

    pub fn conditioning(&self) -> Conditioning {
        Conditioning::new(self.tokens.clone(), self.refs.clone())
    }
}

/// Mean squared error between the predicted velocity on video positions and
/// `u = noise − z`.
pub fn flow_loss_from_prediction(
    pred_video: &Tensor,
    video: &LatentVideo,
    noise: &LatentVideo,
) -> Result<Tensor> {
    let f = video.frames();
    let dtype = pred_video.dtype();
    let z = video.to_tensor(&Device::Cpu, dtype)?;
    let eps = noise.to_tensor(&Device::Cpu, dtype)?.narrow(0, 0, f)?;
    let target = (eps - z)?;
    Ok((pred_video - target)?.sqr()?.mean_all()?)
}

/// Flow-matching loss of one sample at time `t` with a given noise draw
/// (`f+n` positions; the reference part is ignored when refs are dropped).
pub fn flow_loss(
    w: &dyn WeightSource,
    sample: &TrainSample,
    t: f64,
    noise: &LatentVideo,
    drop_ref: bool,
    drop_text: bool,
) -> Result<Tensor> {
    let cond = sample.conditioning().with_drops(drop_ref, drop_text);
    let input = cond.input(&sample.video, t, noise)?;
    let v = forward(w, &input, &cond, t)?;
    let f = sample.video.frames();
    flow_loss_from_prediction(&v.narrow(0, 0, f)?, &sample.video, noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub pairing: Option<PairingMode>,
    pub rank: usize,
    pub lora_scale: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub ref_drop_prob: f64,
    pub text_drop_prob: f64,
    pub timestep: TimestepSampler,
    pub ema_decay: f64,
    pub seed: u64,
    /// Record every LoRA parameter after each step (for recurrence checks).
    #[serde(default)]
    pub trace_params: bool,
}

impl SftConfig {
    /// Defaults for one pairing mode: early stop at 8000 (in-pair) or 5000
    /// (cross-pair) iterations; in-pair drops references more often,
    /// cross-pair drops text more often.
    pub fn for_pairing(mode: PairingMode) -> Self {
        let (iterations, ref_drop_prob, text_drop_prob) = match mode {
            PairingMode::InPair => (8000, 0.3, 0.1),
            PairingMode::CrossPair => (5000, 0.1, 0.3),
        };
        Self {
            pairing: Some(mode),
            rank: 16,
            lora_scale: 1.0,
            adam: AdamConfig::default(),
            batch_size: 4,
            iterations,
            ref_drop_prob,
            text_drop_prob,
            timestep: TimestepSampler::default(),
            ema_decay: 0.999,
            seed: 0,
            trace_params: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (k, p) in [
            ("ref_drop_prob", self.ref_drop_prob),
            ("text_drop_prob", self.text_drop_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                bad.push(format!("{k} = {p} outside [0, 1]"));
            }
        }
        if self.rank == 0 {
            bad.push("rank must be >= 1".into());
        }
        if !(self.ema_decay > 0.0 && self.ema_decay <= 1.0) {
            bad.push(format!("ema_decay = {} outside (0, 1]", self.ema_decay));
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".into());
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            bad.push(format!("learning rate {} must be positive", self.adam.lr));
        }
        if !(self.timestep.std >= 0.0 && self.timestep.mean.is_finite()) {
            bad.push("timestep sampler needs finite mean and std >= 0".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(bad))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropStats {
    pub samples: usize,
    pub ref_drops: usize,
    pub text_drops: usize,
}

pub struct SftOutcome {
    pub adapter: LoraAdapter,
    pub ema: LoraAdapter,
    pub losses: Vec<f64>,
    pub drops: DropStats,
    /// Flattened LoRA parameters after each step, when tracing.
    pub trace: Vec<Vec<f64>>,
}

/// Exponential moving average over an ordered set of tensors.
pub struct Ema {
    decay: f64,
    values: Vec<Tensor>,
}

impl Ema {
    pub fn new(decay: f64, init: &[Tensor]) -> Result<Self> {
        let values = init
            .iter()
            .map(|t| t.detach().to_dtype(DType::F64)?.copy())
            .collect::<candle_core::Result<_>>()?;
        Ok(Self { decay, values })
    }

    /// `ema ← decay·ema + (1−decay)·θ`, in f64.
    pub fn update(&mut self, current: &[Tensor]) -> Result<()> {
        for (e, c) in self.values.iter_mut().zip(current) {
            let c = c.detach().to_dtype(DType::F64)?;
            *e = ((&*e * self.decay)? + (c * (1.0 - self.decay))?)?;
        }
        Ok(())
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }
}

fn flatten_f64(ts: &[Tensor]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for t in ts {
        out.extend(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
    }
    Ok(out)
}

fn select_samples(
    samples: &[TrainSample],
    weights: Option<&[f64]>,
) -> Result<Option<WeightedIndex<f64>>> {
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    match weights {
        None => Ok(None),
        Some(w) if w.len() == samples.len() => {
            Ok(Some(WeightedIndex::new(w).map_err(|e| {
                Error::invalid(format!("sampling weights: {e}"))
            })?))
        }
        Some(w) => Err(Error::invalid(format!(
            "{} sampling weights for {} samples",
            w.len(),
            samples.len()
        ))),
    }
}

/// LoRA fine-tuning on top of frozen `base` weights.
pub fn train_sft(
    base: &ModelWeights,
    samples: &[TrainSample],
    weights: Option<&[f64]>,
    cfg: &SftConfig,
) -> Result<SftOutcome> {
    cfg.validate()?;
    let picker = select_samples(samples, weights)?;
    let targets = base.config().lora_targets();
    let init = LoraAdapter::init(base, &targets, cfg.rank, cfg.lora_scale, cfg.seed)?;
    let params = LoraParams::from_adapter(&init, DType::F32)?;
    let vars = params.vars();
    let mut adam = Adam::new(cfg.adam, &vars)?;
    let snapshot = |vars: &[&Var]| {
        vars.iter()
            .map(|v| v.as_tensor().clone())
            .collect::<Vec<_>>()
    };
    let mut ema = Ema::new(cfg.ema_decay, &snapshot(&vars))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5F7);
    let mut guard = DivergenceGuard::default();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut drops = DropStats::default();
    let mut trace = Vec::new();
    let view = LoraView {
        base,
        params: &params,
    };
    for it in 0..cfg.iterations {
        let mut total: Option<Tensor> = None;
        for _ in 0..cfg.batch_size {
            let idx = match &picker {
                Some(p) => p.sample(&mut rng),
                None => rng.random_range(0..samples.len()),
            };
            let s = &samples[idx];
            let drop_ref = rng.random_bool(cfg.ref_drop_prob);
            let drop_text = rng.random_bool(cfg.text_drop_prob);
            drops.samples += 1;
            drops.ref_drops += drop_ref as usize;
            drops.text_drops += drop_text as usize;
            let t = cfg.timestep.sample(&mut rng);
            let [f, c, h, w] = s.video.dims();
            let noise = gaussian_latent([f + s.refs.len(), c, h, w], &mut rng);
            let l = flow_loss(&view, s, t, &noise, drop_ref, drop_text)?;
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
        ema.update(&snapshot(&vars))?;
        losses.push(value);
        if cfg.trace_params {
            trace.push(flatten_f64(&snapshot(&vars))?);
        }
    }
    let mut metadata = BTreeMap::from([
        ("rank".to_string(), cfg.rank.to_string()),
        ("iterations".to_string(), cfg.iterations.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
    ]);
    if let Some(m) = cfg.pairing {
        metadata.insert("pairing".into(), m.name().into());
    }
    let adapter = params.to_adapter(metadata.clone())?;
    let mut ema_adapter = adapter.clone();
    for (f, pair) in ema_adapter.factors.values_mut().zip(ema.values().chunks(2)) {
        f.a = pair[0].to_dtype(DType::F32)?;
        f.b = pair[1].to_dtype(DType::F32)?;
    }
    ema_adapter
        .metadata
        .insert("ema_decay".into(), cfg.ema_decay.to_string());
    Ok(SftOutcome {
        adapter,
        ema: ema_adapter,
        losses,
        drops,
        trace,
    })
}

/// Full-parameter variables standing in for model weights.
pub struct VarWeights {
    config: DitConfig,
    vars: BTreeMap<String, Var>,
}

impl VarWeights {
    pub fn from_weights(w: &ModelWeights) -> Result<Self> {
        let vars = w
            .tensors()
            .iter()
            .map(|(k, t)| Ok((k.clone(), Var::from_tensor(t)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: *w.config(),
            vars,
        })
    }

    pub fn vars(&self) -> Vec<&Var> {
        self.vars.values().collect()
    }

    pub fn to_weights(&self) -> Result<ModelWeights> {
        let tensors = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect();
        ModelWeights::from_tensors(self.config, tensors)
    }
}

impl WeightSource for VarWeights {
    fn config(&self) -> &DitConfig {
        &self.config
    }

    fn weight(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| Error::invalid(format!("missing weight `{name}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub text_drop_prob: f64,
    pub timestep: TimestepSampler,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig {
                lr: 1e-3,
                warmup: 100,
                ..AdamConfig::default()
            },
            batch_size: 4,
            iterations: 3000,
            text_drop_prob: 0.1,
            timestep: TimestepSampler::default(),
            seed: 0,
        }
    }
}

pub struct PretrainOutcome {
    pub weights: ModelWeights,
    pub losses: Vec<f64>,
}

/// Text-to-video base model trained from scratch on reference-free samples:
/// the stand-in for a pretrained foundation model.
pub fn pretrain_base(
    config: DitConfig,
    samples: &[TrainSample],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if samples.is_empty() {
        return Err(Error::invalid("pretraining set is empty"));
    }
    if !(0.0..=1.0).contains(&cfg.text_drop_prob) {
        return Err(Error::ConfigInvalid(vec![format!(
            "text_drop_prob = {} outside [0, 1]",
            cfg.text_drop_prob
        )]));
    }
    let init = ModelWeights::init(config, cfg.seed)?;
    let params = VarWeights::from_weights(&init)?;
    let vars = params.vars();
    let mut adam = Adam::new(cfg.adam, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xBA5E);
    let mut guard = DivergenceGuard::default();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let mut total: Option<Tensor> = None;
        for _ in 0..cfg.batch_size {
            let s = &samples[rng.random_range(0..samples.len())];
            let drop_text = rng.random_bool(cfg.text_drop_prob);
            let t = cfg.timestep.sample(&mut rng);
            let noise = gaussian_latent(s.video.dims(), &mut rng);
            let l = flow_loss(&params, s, t, &noise, true, drop_text)?;
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
        losses.push(value);
    }
    Ok(PretrainOutcome {
        weights: params.to_weights()?,
        losses,
    })
}
