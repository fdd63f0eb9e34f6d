use candle_core::DType;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2vlab::dit::{assemble_input, DitConfig, ModelWeights, WeightSource};
use s2vlab::latent::LatentVideo;
use s2vlab::train::{flow_loss, gaussian_latent, TrainSample, VarWeights};
use s2vlab::world::{Vocab, WorldConfig};

fn latent(dims: [usize; 4], seed: u64) -> LatentVideo {
    gaussian_latent(dims, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assembled_inputs_keep_flag_and_padding(
        f in 1usize..10, n in 0usize..5, c in 1usize..5, h in 1usize..7, w in 1usize..7,
        t in 0.0f64..=1.0, seed in any::<u64>(),
    ) {
        let video = latent([f, c, h, w], seed);
        let refs: Vec<_> = (0..n).map(|j| latent([1, c, h, w], seed ^ (j as u64 + 1))).collect();
        let noise = latent([f + n, c, h, w], !seed);
        let input = assemble_input(&video, &refs, t, &noise).unwrap();
        prop_assert_eq!(input.tensor.dims(), [f + n, 2 * c + 1, h, w]);
        input.check_invariants().unwrap();
        for (j, r) in refs.iter().enumerate() {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        prop_assert_eq!(input.tensor.get(f + j, c + ch, y, x), r.get(0, ch, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn endpoints_are_exact(f in 1usize..6, n in 0usize..4, seed in any::<u64>()) {
        let (c, h, w) = (4, 4, 4);
        let video = latent([f, c, h, w], seed);
        let refs: Vec<_> = (0..n).map(|j| latent([1, c, h, w], seed.wrapping_add(j as u64 + 7))).collect();
        let noise = latent([f + n, c, h, w], seed ^ 0xABCD);
        let clean = assemble_input(&video, &refs, 0.0, &noise).unwrap();
        let noisy = assemble_input(&video, &refs, 1.0, &noise).unwrap();
        for p in 0..f + n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let z = if p < f { video.get(p, ch, y, x) } else { refs[p - f].get(0, ch, y, x) };
                        prop_assert_eq!(clean.tensor.get(p, ch, y, x), z);
                        prop_assert_eq!(noisy.tensor.get(p, ch, y, x), noise.get(p, ch, y, x));
                    }
                }
            }
        }
    }
}

fn tiny_config() -> DitConfig {
    let mut c = DitConfig::for_world(&WorldConfig {
        frames: 2,
        height: 4,
        width: 4,
    });
    c.depth = 2;
    c.hidden = 8;
    c.heads = 2;
    c.mlp_ratio = 2;
    c.temporal_window = 2;
    c.max_text_len = 24;
    c
}

/// Autodiff against central differences on a scalar flow loss through the
/// whole forward pass, in f64.
#[test]
fn forward_gradient_matches_finite_differences() {
    let cfg = tiny_config();
    let base = ModelWeights::random(cfg, 3, 0.3).unwrap().to_dtype(DType::F64).unwrap();
    let vocab = Vocab::default();
    let sample = TrainSample {
        video: latent([2, cfg.channels, 4, 4], 1),
        refs: vec![latent([1, cfg.channels, 4, 4], 2)],
        tokens: vocab.encode("a red plain circle still on a gray background").unwrap(),
    };
    let noise = latent([3, cfg.channels, 4, 4], 5);
    let t = 0.37;

    let vars = VarWeights::from_weights(&base).unwrap();
    let loss = flow_loss(&vars, &sample, t, &noise, false, false).unwrap();
    let grads = loss.backward().unwrap();

    let eval = |w: &ModelWeights| {
        flow_loss(w, &sample, t, &noise, false, false)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    };
    let names: Vec<String> = base.tensors().keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut ok, mut total) = (0, 0);
    let h = 1e-5;
    for _ in 0..300 {
        let name = &names[rng.random_range(0..names.len())];
        let tensor = &base.tensors()[name];
        let flat: Vec<f64> = tensor.flatten_all().unwrap().to_vec1().unwrap();
        let i = rng.random_range(0..flat.len());
        let g: Vec<f64> = match grads.get(&vars.weight(name).unwrap()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; flat.len()],
        };
        let shifted = |delta: f64| {
            let mut d = flat.clone();
            d[i] += delta;
            let mut tensors = base.tensors().clone();
            tensors.insert(
                name.clone(),
                candle_core::Tensor::from_vec(d, tensor.dims(), tensor.device()).unwrap(),
            );
            eval(&ModelWeights::from_tensors(cfg, tensors).unwrap())
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let analytic = g[i];
        let scale = analytic.abs().max(numeric.abs());
        total += 1;
        if (analytic - numeric).abs() <= 1e-3 * scale + 1e-9 {
            ok += 1;
        }
    }
    assert!(ok * 100 >= total * 99, "{ok}/{total} coordinates agree");
}
