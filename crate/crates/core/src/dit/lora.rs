use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DitConfig, ModelWeights, WeightSource};
use crate::error::{Error, Result};
use crate::tensor_io::{
    read_sidecar, read_tensor, write_sidecar, write_tensor, Sidecar, StoredTensor,
};

/// `ΔW = scale · B · A` with `A: r × in`, `B: out × r`.
#[derive(Debug, Clone)]
pub struct LoraFactor {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
}

impl LoraFactor {
    pub fn rank(&self) -> usize {
        self.a.dims()[0]
    }

    /// Materialized delta, computed in f64 and returned in `dtype`.
    pub fn delta(&self, dtype: DType) -> Result<Tensor> {
        let a = self.a.to_dtype(DType::F64)?;
        let b = self.b.to_dtype(DType::F64)?;
        Ok((b.matmul(&a)? * self.scale)?.to_dtype(dtype)?)
    }
}

/// Dense per-target weight deltas, keyed by target name.
pub type DenseDelta = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Default)]
pub struct LoraAdapter {
    pub factors: BTreeMap<String, LoraFactor>,
    pub metadata: BTreeMap<String, String>,
}

fn target_weight(weights: &ModelWeights, target: &str) -> Result<Tensor> {
    match weights.tensors().get(&format!("{target}.weight")) {
        Some(t) if t.rank() == 2 => Ok(t.clone()),
        _ => Err(Error::UnknownTarget(target.to_string())),
    }
}

impl LoraAdapter {
    /// Fresh adapter: `A` Gaussian with std `1/√in`, `B` zero, so the
    /// adapted model starts exactly at the base.
    pub fn init(
        weights: &ModelWeights,
        targets: &[String],
        rank: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("LoRA rank must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut factors = BTreeMap::new();
        for target in targets {
            let w = target_weight(weights, target)?;
            let (out, inp) = w.dims2()?;
            let normal = Normal::new(0.0, 1.0 / (inp as f64).sqrt()).expect("finite std");
            let a: Vec<f32> = (0..rank * inp)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            factors.insert(
                target.clone(),
                LoraFactor {
                    a: Tensor::from_vec(a, (rank, inp), &Device::Cpu)?,
                    b: Tensor::zeros((out, rank), DType::F32, &Device::Cpu)?,
                    scale,
                },
            );
        }
        Ok(Self {
            factors,
            metadata: BTreeMap::from([("rank".to_string(), rank.to_string())]),
        })
    }

    pub fn targets(&self) -> Vec<String> {
        self.factors.keys().cloned().collect()
    }

    pub fn delta(&self, dtype: DType) -> Result<DenseDelta> {
        self.factors
            .iter()
            .map(|(k, f)| Ok((k.clone(), f.delta(dtype)?)))
            .collect()
    }

    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        for f in out.factors.values_mut() {
            f.scale = -f.scale;
        }
        out
    }

    pub fn check_finite(&self) -> Result<()> {
        for (k, f) in &self.factors {
            for t in [&f.a, &f.b] {
                let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid(format!(
                        "adapter factor `{k}` is not finite"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut meta = Sidecar::new();
        meta.insert("targets".into(), self.targets().join(","));
        for (k, f) in &self.factors {
            meta.insert(format!("scale.{k}"), format!("{:?}", f.scale));
            for (suffix, t) in [("A", &f.a), ("B", &f.b)] {
                let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                write_tensor(
                    &dir.join(format!("{k}.{suffix}.lgt")),
                    &StoredTensor::new(t.dims().to_vec(), data)?,
                )?;
            }
        }
        for (k, v) in &self.metadata {
            meta.insert(format!("meta.{k}"), v.clone());
        }
        write_sidecar(&dir.join("adapter.txt"), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("adapter.txt");
        let meta = read_sidecar(&path)?;
        let bad = |message: String| Error::Format {
            path: path.clone(),
            message,
        };
        let targets = meta
            .get("targets")
            .ok_or_else(|| bad("missing `targets`".into()))?;
        let mut factors = BTreeMap::new();
        for k in targets.split(',').filter(|s| !s.is_empty()) {
            let scale = meta
                .get(&format!("scale.{k}"))
                .ok_or_else(|| bad(format!("missing scale for `{k}`")))?
                .parse::<f64>()
                .map_err(|e| bad(format!("scale for `{k}`: {e}")))?;
            let load = |suffix: &str| -> Result<Tensor> {
                let s = read_tensor(&dir.join(format!("{k}.{suffix}.lgt")))?;
                Ok(Tensor::from_vec(s.data, s.dims, &Device::Cpu)?)
            };
            let (a, b) = (load("A")?, load("B")?);
            if a.rank() != 2 || b.rank() != 2 || a.dims()[0] != b.dims()[1] {
                return Err(bad(format!("factor shapes for `{k}` are inconsistent")));
            }
            factors.insert(k.to_string(), LoraFactor { a, b, scale });
        }
        let metadata = meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Self { factors, metadata })
    }
}

/// `W' = W + scale·B·A` for every targeted matrix; the input is untouched.
pub fn apply_lora(weights: &ModelWeights, adapter: &LoraAdapter) -> Result<ModelWeights> {
    let mut delta = DenseDelta::new();
    for (target, f) in &adapter.factors {
        let w = target_weight(weights, target)?;
        let (out, inp) = w.dims2()?;
        if f.a.dims() != [f.rank(), inp] || f.b.dims() != [out, f.rank()] {
            return Err(Error::shape(format!(
                "adapter `{target}` has A {:?}, B {:?} for a {out}x{inp} matrix",
                f.a.dims(),
                f.b.dims()
            )));
        }
        if f.scale != 0.0 {
            delta.insert(target.clone(), f.delta(w.dtype())?);
        }
    }
    apply_delta(weights, &delta)
}

pub fn apply_delta(weights: &ModelWeights, delta: &DenseDelta) -> Result<ModelWeights> {
    let mut tensors = weights.tensors().clone();
    for (target, d) in delta {
        let w = target_weight(weights, target)?;
        if w.dims() != d.dims() {
            return Err(Error::shape(format!(
                "delta for `{target}` is {:?}, weight is {:?}",
                d.dims(),
                w.dims()
            )));
        }
        let d = d.to_dtype(w.dtype())?;
        tensors.insert(format!("{target}.weight"), (w + d)?);
    }
    ModelWeights::from_tensors(*weights.config(), tensors)
}

/// Linear combination `Σ lᵢ·scaleᵢ·Bᵢ·Aᵢ`, represented exactly by stacking
/// factors (ranks add). Zero coefficients are dropped.
pub fn merge_loras(items: &[(&LoraAdapter, f64)]) -> Result<LoraAdapter> {
    let Some((first, _)) = items.first() else {
        return Err(Error::invalid("merge needs at least one adapter"));
    };
    let targets = first.targets();
    for (a, _) in items {
        if a.targets() != targets {
            return Err(Error::TargetMismatch(format!(
                "{:?} vs {:?}",
                targets,
                a.targets()
            )));
        }
    }
    let mut factors = BTreeMap::new();
    for target in &targets {
        let live: Vec<(&LoraFactor, f64)> = items
            .iter()
            .map(|(a, l)| (&a.factors[target], *l))
            .filter(|(f, l)| *l != 0.0 && f.scale != 0.0)
            .collect();
        let reference = &first.factors[target];
        let (out, inp) = (reference.b.dims()[0], reference.a.dims()[1]);
        let factor = if live.is_empty() {
            LoraFactor {
                a: Tensor::zeros((1, inp), DType::F32, &Device::Cpu)?,
                b: Tensor::zeros((out, 1), DType::F32, &Device::Cpu)?,
                scale: 0.0,
            }
        } else {
            let a: Vec<Tensor> = live
                .iter()
                .map(|(f, _)| f.a.to_dtype(DType::F32))
                .collect::<candle_core::Result<_>>()?;
            let b: Vec<Tensor> = live
                .iter()
                .map(|(f, l)| (f.b.to_dtype(DType::F64)? * (l * f.scale))?.to_dtype(DType::F32))
                .collect::<candle_core::Result<_>>()?;
            LoraFactor {
                a: Tensor::cat(&a, 0)?,
                b: Tensor::cat(&b, 1)?,
                scale: 1.0,
            }
        };
        factors.insert(target.clone(), factor);
    }
    let coefficients: Vec<String> = items.iter().map(|(_, l)| l.to_string()).collect();
    Ok(LoraAdapter {
        factors,
        metadata: BTreeMap::from([("merged_coefficients".to_string(), coefficients.join(","))]),
    })
}

/// Trainable LoRA factors.
pub struct LoraParams {
    factors: BTreeMap<String, (Var, Var, f64)>,
}

impl LoraParams {
    pub fn from_adapter(adapter: &LoraAdapter, dtype: DType) -> Result<Self> {
        let factors = adapter
            .factors
            .iter()
            .map(|(k, f)| {
                Ok((
                    k.clone(),
                    (
                        Var::from_tensor(&f.a.to_dtype(dtype)?)?,
                        Var::from_tensor(&f.b.to_dtype(dtype)?)?,
                        f.scale,
                    ),
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { factors })
    }

    /// Variables in a fixed order: `A` then `B` for each target, by name.
    pub fn vars(&self) -> Vec<&Var> {
        self.factors.values().flat_map(|(a, b, _)| [a, b]).collect()
    }

    pub fn var_names(&self) -> Vec<String> {
        self.factors
            .keys()
            .flat_map(|k| [format!("{k}.A"), format!("{k}.B")])
            .collect()
    }

    pub fn to_adapter(&self, metadata: BTreeMap<String, String>) -> Result<LoraAdapter> {
        let factors = self
            .factors
            .iter()
            .map(|(k, (a, b, s))| {
                Ok((
                    k.clone(),
                    LoraFactor {
                        a: a.as_tensor().to_dtype(DType::F32)?,
                        b: b.as_tensor().to_dtype(DType::F32)?,
                        scale: *s,
                    },
                ))
            })
            .collect::<Result<_>>()?;
        Ok(LoraAdapter { factors, metadata })
    }

    /// Detached dense deltas of the current factors.
    pub fn delta(&self) -> Result<DenseDelta> {
        self.factors
            .iter()
            .map(|(k, (a, b, s))| {
                Ok((
                    k.clone(),
                    (b.as_tensor().matmul(a.as_tensor())? * *s)?.detach(),
                ))
            })
            .collect()
    }
}

/// Base weights plus live LoRA variables, so gradients reach the factors.
pub struct LoraView<'a> {
    pub base: &'a ModelWeights,
    pub params: &'a LoraParams,
}

impl WeightSource for LoraView<'_> {
    fn config(&self) -> &DitConfig {
        self.base.config()
    }

    fn weight(&self, name: &str) -> Result<Tensor> {
        let w = self.base.weight(name)?;
        match name
            .strip_suffix(".weight")
            .and_then(|t| self.params.factors.get(t))
        {
            Some((a, b, s)) => Ok((w + (b.as_tensor().matmul(a.as_tensor())? * *s)?)?),
            None => Ok(w),
        }
    }
}

/// Base weights plus fixed dense deltas.
pub struct DeltaView<'a> {
    pub base: &'a ModelWeights,
    pub delta: &'a DenseDelta,
}

impl WeightSource for DeltaView<'_> {
    fn config(&self) -> &DitConfig {
        self.base.config()
    }

    fn weight(&self, name: &str) -> Result<Tensor> {
        let w = self.base.weight(name)?;
        match name.strip_suffix(".weight").and_then(|t| self.delta.get(t)) {
            Some(d) => Ok((w + d)?),
            None => Ok(w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a.to_dtype(DType::F64).unwrap() - b.to_dtype(DType::F64).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    fn randomized(w: &ModelWeights, rank: usize, seed: u64) -> LoraAdapter {
        let mut a = LoraAdapter::init(w, &w.config().lora_targets(), rank, 0.7, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let normal = Normal::new(0.0, 0.1).unwrap();
        for f in a.factors.values_mut() {
            let (out, r) = f.b.dims2().unwrap();
            let v: Vec<f32> = (0..out * r)
                .map(|_| normal.sample(&mut rng) as f32)
                .collect();
            f.b = Tensor::from_vec(v, (out, r), &Device::Cpu).unwrap();
        }
        a
    }

    /// Rows of a random square matrix orthonormalized by Gram-Schmidt.
    fn orthonormal(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        while rows.len() < n {
            let mut v: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            for _ in 0..2 {
                for r in &rows {
                    let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                rows.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        rows
    }

    #[test]
    fn full_rank_factorization_reproduces_delta() {
        let w = ModelWeights::random(DitConfig::default(), 1, 0.1).unwrap();
        let target = "blocks.1.attn.out";
        let (out, inp) = w
            .weight(&format!("{target}.weight"))
            .unwrap()
            .dims2()
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 0.05).unwrap();
        let dw: Vec<f64> = (0..out * inp).map(|_| normal.sample(&mut rng)).collect();
        // ΔW = (ΔW Qᵀ) Q for orthogonal Q
        let q = orthonormal(inp, 5);
        let b: Vec<f64> = (0..out)
            .flat_map(|i| {
                let dw = &dw;
                q.iter()
                    .map(move |row| (0..inp).map(|k| dw[i * inp + k] * row[k]).sum::<f64>())
            })
            .collect();
        let adapter = LoraAdapter {
            factors: BTreeMap::from([(
                target.to_string(),
                LoraFactor {
                    a: Tensor::from_vec(q.concat(), (inp, inp), &Device::Cpu).unwrap(),
                    b: Tensor::from_vec(b, (out, inp), &Device::Cpu).unwrap(),
                    scale: 1.0,
                },
            )]),
            metadata: BTreeMap::new(),
        };
        let merged = apply_lora(&w, &adapter).unwrap();
        let explicit = (w
            .weight(&format!("{target}.weight"))
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            + Tensor::from_vec(dw, (out, inp), &Device::Cpu).unwrap())
        .unwrap();
        assert!(
            max_abs_diff(
                &merged.weight(&format!("{target}.weight")).unwrap(),
                &explicit
            ) < 1e-6
        );
    }

    #[test]
    fn negated_adapter_restores_base() {
        let w = ModelWeights::random(DitConfig::default(), 2, 0.1).unwrap();
        let a = randomized(&w, 4, 9);
        let back = apply_lora(&apply_lora(&w, &a).unwrap(), &a.negated()).unwrap();
        for (k, t) in w.tensors() {
            assert!(max_abs_diff(t, &back.tensors()[k]) < 1e-6, "{k}");
        }
        // functional update
        let again = apply_lora(&w, &a).unwrap();
        assert!(
            max_abs_diff(
                &w.weight("final.proj.weight").unwrap(),
                &again.weight("final.proj.weight").unwrap()
            ) > 0.0
        );
    }

    #[test]
    fn unknown_target_and_shape_errors() {
        let w = ModelWeights::random(DitConfig::default(), 2, 0.1).unwrap();
        let mut a = randomized(&w, 2, 1);
        let f = a.factors.remove("final.proj").unwrap();
        a.factors.insert("blocks.9.mlp.fc1".into(), f.clone());
        assert!(matches!(apply_lora(&w, &a), Err(Error::UnknownTarget(_))));
        let mut a = randomized(&w, 2, 1);
        a.factors.insert("patch_embed".into(), f);
        assert!(matches!(apply_lora(&w, &a), Err(Error::Shape(_))));
        assert!(matches!(
            LoraAdapter::init(&w, &["pos_embed".into()], 2, 1.0, 0),
            Err(Error::UnknownTarget(_))
        ));
    }

    #[test]
    fn merge_is_linear_and_order_free() {
        let w = ModelWeights::random(DitConfig::default(), 3, 0.1).unwrap();
        let a = randomized(&w, 2, 11);
        let b = randomized(&w, 5, 12);
        let m = merge_loras(&[(&a, 0.3), (&b, 0.7)]).unwrap();
        let swapped = merge_loras(&[(&b, 0.7), (&a, 0.3)]).unwrap();
        let (da, db) = (a.delta(DType::F64).unwrap(), b.delta(DType::F64).unwrap());
        for (k, d) in m.delta(DType::F64).unwrap() {
            let want = ((&da[&k] * 0.3).unwrap() + (&db[&k] * 0.7).unwrap()).unwrap();
            assert!(max_abs_diff(&d, &want) < 1e-6, "{k}");
            assert!(max_abs_diff(&d, &swapped.delta(DType::F64).unwrap()[&k]) < 1e-6);
        }
        let mut partial = a.clone();
        partial.factors.remove("final.proj");
        assert!(matches!(
            merge_loras(&[(&a, 1.0), (&partial, 1.0)]),
            Err(Error::TargetMismatch(_))
        ));
    }

    #[test]
    fn adapter_round_trip() {
        let w = ModelWeights::random(DitConfig::default(), 3, 0.1).unwrap();
        let mut a = randomized(&w, 3, 5);
        a.metadata.insert("stage".into(), "test".into());
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let back = LoraAdapter::load(dir.path()).unwrap();
        assert_eq!(back.metadata, a.metadata);
        for (k, f) in &a.factors {
            let g = &back.factors[k];
            assert_eq!(f.scale, g.scale);
            assert_eq!(max_abs_diff(&f.a, &g.a), 0.0);
            assert_eq!(max_abs_diff(&f.b, &g.b), 0.0);
        }
    }
}
