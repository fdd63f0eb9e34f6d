use candle_core::DType;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use s2vlab::curation::PairingMode;
use s2vlab::dit::{DitConfig, LoraAdapter, ModelWeights, WeightSource};
use s2vlab::train::{
    gaussian_latent, pretrain_base, train_sft, PretrainConfig, SftConfig, TrainSample,
};
use s2vlab::world::{Vocab, WorldConfig};

fn tiny_config() -> DitConfig {
    let mut c = DitConfig::for_world(&WorldConfig {
        frames: 2,
        height: 4,
        width: 4,
    });
    c.depth = 2;
    c.hidden = 16;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.temporal_window = 2;
    c
}

fn samples(cfg: &DitConfig, n: usize) -> Vec<TrainSample> {
    let vocab = Vocab::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    (0..n)
        .map(|i| TrainSample {
            video: gaussian_latent([2, cfg.channels, 4, 4], &mut rng),
            refs: (0..i % 3)
                .map(|_| gaussian_latent([1, cfg.channels, 4, 4], &mut rng))
                .collect(),
            tokens: vocab.encode("a blue striped square moves left on a black background").unwrap(),
        })
        .collect()
}

fn flat(adapter: &LoraAdapter) -> Vec<f64> {
    let mut out = Vec::new();
    for f in adapter.factors.values() {
        for t in [&f.a, &f.b] {
            out.extend(t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap());
        }
    }
    out
}

fn sft_config(iterations: usize) -> SftConfig {
    let mut c = SftConfig::for_pairing(PairingMode::InPair);
    c.iterations = iterations;
    c.rank = 2;
    c.seed = 4;
    c
}

#[test]
fn sft_leaves_the_base_untouched() {
    let cfg = tiny_config();
    let base = ModelWeights::random(cfg, 1, 0.2).unwrap();
    let before = base.clone();
    let out = train_sft(&base, &samples(&cfg, 6), None, &sft_config(5)).unwrap();
    for (name, t) in before.tensors() {
        let a: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = base.weight(name).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b, "{name} changed");
    }
    assert!(flat(&out.adapter).iter().any(|v| *v != 0.0));
}

#[test]
fn drop_frequencies_match_configuration() {
    let cfg = tiny_config();
    let base = ModelWeights::random(cfg, 1, 0.2).unwrap();
    let mut c = sft_config(150);
    c.rank = 1;
    c.ref_drop_prob = 0.3;
    c.text_drop_prob = 0.1;
    let out = train_sft(&base, &samples(&cfg, 6), None, &c).unwrap();
    let n = out.drops.samples as f64;
    assert_eq!(out.drops.samples, 150 * c.batch_size);
    for (count, p) in [(out.drops.ref_drops, 0.3), (out.drops.text_drops, 0.1)] {
        let sigma = (n * p * (1.0 - p)).sqrt();
        let dev = (count as f64 - n * p).abs();
        assert!(dev <= 3.0 * sigma, "{count} drops of {n} at p={p}");
    }
}

#[test]
fn ema_follows_its_recurrence() {
    let cfg = tiny_config();
    let base = ModelWeights::random(cfg, 2, 0.2).unwrap();
    let mut c = sft_config(12);
    c.ema_decay = 0.9;
    c.trace_params = true;
    let out = train_sft(&base, &samples(&cfg, 5), None, &c).unwrap();
    let init = LoraAdapter::init(&base, &cfg.lora_targets(), c.rank, c.lora_scale, c.seed).unwrap();
    let mut ema = flat(&init);
    assert_eq!(out.trace.len(), 12);
    for theta in &out.trace {
        for (e, t) in ema.iter_mut().zip(theta) {
            *e = c.ema_decay * *e + (1.0 - c.ema_decay) * t;
        }
    }
    let got = flat(&out.ema);
    assert_eq!(got.len(), ema.len());
    for (g, e) in got.iter().zip(&ema) {
        // stored as f32
        assert!((g - e).abs() <= 1e-6 * e.abs().max(1.0), "{g} vs {e}");
    }
    // the last traced parameters are the adapter itself
    let last = out.trace.last().unwrap();
    for (a, b) in flat(&out.adapter).iter().zip(last) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
    }
}

#[test]
fn training_is_seed_deterministic() {
    let cfg = tiny_config();
    let base = ModelWeights::random(cfg, 1, 0.2).unwrap();
    let s = samples(&cfg, 6);
    let a = train_sft(&base, &s, None, &sft_config(4)).unwrap();
    let b = train_sft(&base, &s, None, &sft_config(4)).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(flat(&a.adapter), flat(&b.adapter));
    let mut other = sft_config(4);
    other.seed = 5;
    assert_ne!(train_sft(&base, &s, None, &other).unwrap().losses, a.losses);
}

#[test]
fn pretraining_reduces_the_loss() {
    let cfg = tiny_config();
    let data = samples(&cfg, 8)
        .into_iter()
        .map(|s| TrainSample { refs: vec![], ..s })
        .collect::<Vec<_>>();
    let out = pretrain_base(
        cfg,
        &data,
        &PretrainConfig {
            iterations: 200,
            seed: 3,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    let k = 20;
    let head: f64 = out.losses[..k].iter().sum::<f64>() / k as f64;
    let tail: f64 = out.losses[out.losses.len() - k..].iter().sum::<f64>() / k as f64;
    assert!(tail < head, "{head} -> {tail}");
}
