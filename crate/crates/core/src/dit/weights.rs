use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::DitConfig;
use crate::error::{Error, Result};
use crate::tensor_io::{read_sidecar, read_tensor, write_sidecar, Sidecar, StoredTensor};

/// Anything the forward pass can pull named weight matrices from.
pub trait WeightSource {
    fn config(&self) -> &DitConfig;
    fn weight(&self, name: &str) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    config: DitConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl WeightSource for ModelWeights {
    fn config(&self) -> &DitConfig {
        &self.config
    }

    fn weight(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("missing weight `{name}`")))
    }
}

/// Names and shapes of every parameter, with the fan-in used for init.
fn layout(c: &DitConfig) -> Vec<(String, Vec<usize>)> {
    let h = c.hidden;
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("patch_embed.weight".into(), vec![h, c.patch_in()]),
        ("patch_embed.bias".into(), vec![h]),
        ("pos_embed".into(), vec![c.patches(), h]),
        ("text_embed".into(), vec![c.vocab_size, h]),
        ("text_pos".into(), vec![c.max_text_len, h]),
        ("time.fc1.weight".into(), vec![h, h]),
        ("time.fc1.bias".into(), vec![h]),
        ("time.fc2.weight".into(), vec![h, h]),
        ("time.fc2.bias".into(), vec![h]),
    ];
    for i in 0..c.depth {
        let m = c.mlp_ratio * h;
        for (name, dims) in [
            ("ada.weight", vec![6 * h, h]),
            ("ada.bias", vec![6 * h]),
            ("attn.qkv.weight", vec![3 * h, h]),
            ("attn.qkv.bias", vec![3 * h]),
            ("attn.out.weight", vec![h, h]),
            ("attn.out.bias", vec![h]),
            ("mlp.fc1.weight", vec![m, h]),
            ("mlp.fc1.bias", vec![m]),
            ("mlp.fc2.weight", vec![h, m]),
            ("mlp.fc2.bias", vec![h]),
        ] {
            v.push((format!("blocks.{i}.{name}"), dims));
        }
    }
    v.push(("final.ada.weight".into(), vec![2 * h, h]));
    v.push(("final.ada.bias".into(), vec![2 * h]));
    v.push(("final.proj.weight".into(), vec![c.patch_out(), h]));
    v.push(("final.proj.bias".into(), vec![c.patch_out()]));
    v
}

impl ModelWeights {
    /// Training initialization: Gaussian matrices scaled by fan-in, zero
    /// biases, zero modulation and output projections (every block starts as
    /// the identity), and zero condition/flag columns in the patch embedding
    /// so reference conditioning starts switched off.
    pub fn init(config: DitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noised_cols = config.channels * config.patch * config.patch;
        let mut tensors = BTreeMap::new();
        for (name, dims) in layout(&config) {
            let n: usize = dims.iter().product();
            let zero =
                name.ends_with(".bias") || name.contains("ada.") || name.starts_with("final.proj");
            let data: Vec<f32> = if zero {
                vec![0.0; n]
            } else {
                let std = match name.as_str() {
                    "pos_embed" | "text_embed" | "text_pos" => 0.5,
                    _ => 1.0 / (dims[1] as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("finite std");
                let mut d: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
                if name == "patch_embed.weight" {
                    let cols = dims[1];
                    for row in d.chunks_mut(cols) {
                        // patch vectors are laid out channel-major
                        row[noised_cols..].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                d
            };
            tensors.insert(name, Tensor::from_vec(data, dims, &Device::Cpu)?);
        }
        Ok(Self { config, tensors })
    }

    /// Every parameter Gaussian with standard deviation `std`, nothing
    /// zeroed. Used for algebraic and gradient checks.
    pub fn random(config: DitConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, dims) in layout(&config) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
            tensors.insert(name, Tensor::from_vec(data, dims, &Device::Cpu)?);
        }
        Ok(Self { config, tensors })
    }

    pub fn from_tensors(config: DitConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        for (name, dims) in layout(&config) {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("missing weight `{name}`")))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::shape(format!(
                    "weight `{name}` is {:?}, expected {dims:?}",
                    t.dims()
                )));
            }
        }
        if tensors.len() != layout(&config).len() {
            return Err(Error::invalid("unexpected extra weights"));
        }
        Ok(Self { config, tensors })
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn dtype(&self) -> DType {
        self.tensors
            .values()
            .next()
            .map(|t| t.dtype())
            .unwrap_or(DType::F32)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.to_dtype(dtype)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: self.config,
            tensors,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.elem_count()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("weight `{name}` is not finite")));
            }
        }
        Ok(())
    }

    /// Writes one LGT1 file per tensor plus `model.txt` with hyperparameters.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, t) in &self.tensors {
            let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let stored = StoredTensor::new(t.dims().to_vec(), data)?;
            crate::tensor_io::write_tensor(&dir.join(format!("{name}.lgt")), &stored)?;
        }
        write_sidecar(&dir.join("model.txt"), &config_sidecar(&self.config))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config = config_from_sidecar(&read_sidecar(&dir.join("model.txt"))?, dir)?;
        let mut tensors = BTreeMap::new();
        for (name, _) in layout(&config) {
            let stored = read_tensor(&dir.join(format!("{name}.lgt")))?;
            tensors.insert(
                name,
                Tensor::from_vec(stored.data, stored.dims, &Device::Cpu)?,
            );
        }
        Self::from_tensors(config, tensors)
    }
}

pub(crate) fn config_sidecar(c: &DitConfig) -> Sidecar {
    Sidecar::from([
        ("depth".into(), c.depth.to_string()),
        ("hidden".into(), c.hidden.to_string()),
        ("heads".into(), c.heads.to_string()),
        ("patch".into(), c.patch.to_string()),
        ("temporal_window".into(), c.temporal_window.to_string()),
        ("mlp_ratio".into(), c.mlp_ratio.to_string()),
        ("vocab_size".into(), c.vocab_size.to_string()),
        ("max_text_len".into(), c.max_text_len.to_string()),
        ("channels".into(), c.channels.to_string()),
        ("height".into(), c.height.to_string()),
        ("width".into(), c.width.to_string()),
        ("rope_base".into(), c.rope_base.to_string()),
    ])
}

pub(crate) fn config_from_sidecar(meta: &Sidecar, origin: &Path) -> Result<DitConfig> {
    let get = |k: &str| -> Result<&str> {
        meta.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Format {
                path: origin.to_path_buf(),
                message: format!("missing hyperparameter `{k}`"),
            })
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            message: format!("hyperparameter `{k}`: {e}"),
        })
    };
    let config = DitConfig {
        depth: int("depth")?,
        hidden: int("hidden")?,
        heads: int("heads")?,
        patch: int("patch")?,
        temporal_window: int("temporal_window")?,
        mlp_ratio: int("mlp_ratio")?,
        vocab_size: int("vocab_size")?,
        max_text_len: int("max_text_len")?,
        channels: int("channels")?,
        height: int("height")?,
        width: int("width")?,
        rope_base: get("rope_base")?.parse().map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            message: format!("hyperparameter `rope_base`: {e}"),
        })?,
    };
    config.validate()?;
    Ok(config)
}
