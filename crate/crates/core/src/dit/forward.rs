use candle_core::{DType, Device, Tensor, D};

use super::{Conditioning, DitConfig, ModelInput, WeightSource};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace temporal attention with a zero residual (test hook).
    pub ablate_temporal_attention: bool,
}

const MASKED: f64 = -1e9;
const LN_EPS: f64 = 1e-6;

/// Temporal visibility: `mask[i][j]` is true when position `i` may attend to
/// position `j`. Video frames see their own window plus every reference;
/// references see all references.
pub fn temporal_mask(frames: usize, refs: usize, window: usize) -> Vec<Vec<bool>> {
    let len = frames + refs;
    (0..len)
        .map(|i| {
            (0..len)
                .map(|j| match (i < frames, j < frames) {
                    (true, true) => i / window == j / window,
                    (true, false) => true,
                    (false, true) => false,
                    (false, false) => true,
                })
                .collect()
        })
        .collect()
}

/// Temporal rotary index: frame `i` → `i`, reference `j` → `f + j + Δ`.
pub fn rope_positions(frames: usize, refs: usize, offset: usize) -> Vec<usize> {
    (0..frames)
        .chain((0..refs).map(|j| frames + j + offset))
        .collect()
}

fn linear(w: &dyn WeightSource, name: &str, x: &Tensor) -> Result<Tensor> {
    let weight = w.weight(&format!("{name}.weight"))?;
    let bias = w.weight(&format!("{name}.bias"))?;
    let dims = x.dims().to_vec();
    let inner = *dims.last().expect("non-scalar input");
    let rows = x.elem_count() / inner;
    let y = x
        .reshape((rows, inner))?
        .matmul(&weight.t()?)?
        .broadcast_add(&bias)?;
    let mut out = dims;
    *out.last_mut().expect("non-scalar input") = weight.dims()[0];
    Ok(y.reshape(out)?)
}

/// Rows `[start, start+len)` of a linear layer: one of q, k, v from the
/// packed qkv matrix. Slicing the weight keeps the backward pass cheap.
fn linear_rows(
    w: &dyn WeightSource,
    name: &str,
    x: &Tensor,
    start: usize,
    len: usize,
) -> Result<Tensor> {
    let weight = w.weight(&format!("{name}.weight"))?.narrow(0, start, len)?;
    let bias = w.weight(&format!("{name}.bias"))?.narrow(0, start, len)?;
    let dims = x.dims().to_vec();
    let inner = *dims.last().expect("non-scalar input");
    let rows = x.elem_count() / inner;
    let y = x
        .reshape((rows, inner))?
        .matmul(&weight.t()?)?
        .broadcast_add(&bias)?;
    let mut out = dims;
    *out.last_mut().expect("non-scalar input") = len;
    Ok(y.reshape(out)?)
}

fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?)
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `(b, l, hidden)` → `(b, heads, l, head_dim)`.
fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, l, h) = x.dims3()?;
    Ok(x.reshape((b, l, heads, h / heads))?
        .transpose(1, 2)?
        .contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, heads, l, d) = x.dims4()?;
    Ok(x.transpose(1, 2)?
        .contiguous()?
        .reshape((b, l, heads * d))?)
}

fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let mut s = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (d as f64).sqrt()))?;
    if let Some(m) = mask {
        s = s.broadcast_add(m)?;
    }
    Ok(softmax_last(&s)?.matmul(v)?)
}

struct Rope {
    cos: Tensor,
    sin: Tensor,
    /// `x · rot` is rotate-half: `[-x2, x1]`.
    rot: Tensor,
}

fn rope_tables(c: &DitConfig, positions: &[usize], dtype: DType) -> Result<Rope> {
    let dh = c.head_dim();
    let half = dh / 2;
    let mut cos = Vec::with_capacity(positions.len() * dh);
    let mut sin = Vec::with_capacity(positions.len() * dh);
    for &p in positions {
        for _ in 0..2 {
            for k in 0..half {
                let freq = c.rope_base.powf(-2.0 * k as f64 / dh as f64);
                let a = p as f64 * freq;
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
    }
    let mut rot = vec![0f64; dh * dh];
    for k in 0..half {
        // out[k] = -x[k + half], out[k + half] = x[k]
        rot[(k + half) * dh + k] = -1.0;
        rot[k * dh + k + half] = 1.0;
    }
    let shape = (positions.len(), dh);
    let cpu = &Device::Cpu;
    Ok(Rope {
        cos: Tensor::from_vec(cos, shape, cpu)?.to_dtype(dtype)?,
        sin: Tensor::from_vec(sin, shape, cpu)?.to_dtype(dtype)?,
        rot: Tensor::from_vec(rot, (dh, dh), cpu)?.to_dtype(dtype)?,
    })
}

fn apply_rope(x: &Tensor, rope: &Rope) -> Result<Tensor> {
    let (b, hd, l, d) = x.dims4()?;
    let rotated = x
        .reshape((b * hd * l, d))?
        .matmul(&rope.rot)?
        .reshape((b, hd, l, d))?;
    Ok((x.broadcast_mul(&rope.cos)? + rotated.broadcast_mul(&rope.sin)?)?)
}

fn timestep_embedding(t: f64, dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    let scaled = t * 1000.0;
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        v.push((scaled * freq).cos());
    }
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        v.push((scaled * freq).sin());
    }
    Ok(Tensor::from_vec(v, (1, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn forward(
    w: &dyn WeightSource,
    input: &ModelInput,
    cond: &Conditioning,
    t: f64,
) -> Result<Tensor> {
    forward_with(w, input, cond, t, ForwardOptions::default())
}

/// Velocity for every temporal position, `(f+n) × c × h × w`.
pub fn forward_with(
    w: &dyn WeightSource,
    input: &ModelInput,
    cond: &Conditioning,
    t: f64,
    opts: ForwardOptions,
) -> Result<Tensor> {
    let c = *w.config();
    let [fp, cin, h, wd] = input.tensor.dims();
    if cin != 2 * c.channels + 1 || h != c.height || wd != c.width {
        return Err(Error::shape(format!(
            "input {:?} does not fit model ({} channels, {}x{})",
            input.tensor.dims(),
            c.channels,
            c.height,
            c.width
        )));
    }
    if fp != input.positions() {
        return Err(Error::shape("input position count disagrees with f + n"));
    }
    if input.refs != cond.effective_refs().len() {
        return Err(Error::shape(format!(
            "input has {} reference positions but conditioning supplies {}",
            input.refs,
            cond.effective_refs().len()
        )));
    }
    let tokens = cond.effective_tokens();
    if tokens.len() > c.max_text_len {
        return Err(Error::shape(format!(
            "{} text tokens exceed the limit of {}",
            tokens.len(),
            c.max_text_len
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
    }

    let pos_embed = w.weight("pos_embed")?;
    let dtype = pos_embed.dtype();
    let p = c.patch;
    let (hp, wp) = (h / p, wd / p);
    let np = hp * wp;
    let hidden = c.hidden;

    let x = input
        .tensor
        .to_tensor(&Device::Cpu, dtype)?
        .reshape((fp, cin, hp, p, wp, p))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((fp, np, cin * p * p))?;
    let mut x = linear(w, "patch_embed", &x)?.broadcast_add(&pos_embed)?;

    let temb = timestep_embedding(t, hidden, dtype)?;
    let temb = linear(w, "time.fc2", &linear(w, "time.fc1", &temb)?.silu()?)?;
    let cs = temb.silu()?;

    let ids = Tensor::from_vec(tokens.clone(), tokens.len(), &Device::Cpu)?;
    let text = w
        .weight("text_embed")?
        .index_select(&ids, 0)?
        .add(&w.weight("text_pos")?.narrow(0, 0, tokens.len())?)?;

    let positions = rope_positions(input.frames, input.refs, cond.ref_rope_offset);
    let rope = rope_tables(&c, &positions, dtype)?;
    let mask: Vec<f64> = temporal_mask(input.frames, input.refs, c.temporal_window)
        .into_iter()
        .flatten()
        .map(|ok| if ok { 0.0 } else { MASKED })
        .collect();
    let mask = Tensor::from_vec(mask, (fp, fp), &Device::Cpu)?.to_dtype(dtype)?;

    for i in 0..c.depth {
        let prefix = format!("blocks.{i}");
        let mods = linear(w, &format!("{prefix}.ada"), &cs)?.chunk(6, D::Minus1)?;
        let (shift1, scale1, gate1) = (&mods[0], &mods[1], &mods[2]);
        let (shift2, scale2, gate2) = (&mods[3], &mods[4], &mods[5]);
        let xn = modulate(&layer_norm(&x)?, shift1, scale1)?;
        let qkv_name = format!("{prefix}.attn.qkv");
        let attn = match c.block_kind(i) {
            BlockKind::Spatial => {
                let tn = modulate(&layer_norm(&text)?, shift1, scale1)?;
                let tlen = tokens.len();
                let text_part = |start| -> Result<Tensor> {
                    Ok(linear_rows(w, &qkv_name, &tn, start, hidden)?
                        .unsqueeze(0)?
                        .broadcast_as((fp, tlen, hidden))?)
                };
                let (tk, tv) = (text_part(hidden)?, text_part(2 * hidden)?);
                let q = linear_rows(w, &qkv_name, &xn, 0, hidden)?;
                let k = linear_rows(w, &qkv_name, &xn, hidden, hidden)?;
                let v = linear_rows(w, &qkv_name, &xn, 2 * hidden, hidden)?;
                let k = Tensor::cat(&[&k, &tk], 1)?;
                let v = Tensor::cat(&[&v, &tv], 1)?;
                let o = attention(
                    &split_heads(&q, c.heads)?,
                    &split_heads(&k, c.heads)?,
                    &split_heads(&v, c.heads)?,
                    None,
                )?;
                Some(linear(w, &format!("{prefix}.attn.out"), &merge_heads(&o)?)?)
            }
            BlockKind::Temporal if opts.ablate_temporal_attention => None,
            BlockKind::Temporal => {
                let xt = xn.transpose(0, 1)?.contiguous()?;
                let part =
                    |start| split_heads(&linear_rows(w, &qkv_name, &xt, start, hidden)?, c.heads);
                let q = apply_rope(&part(0)?, &rope)?;
                let k = apply_rope(&part(hidden)?, &rope)?;
                let v = part(2 * hidden)?;
                let o = merge_heads(&attention(&q, &k, &v, Some(&mask))?)?;
                let o = linear(w, &format!("{prefix}.attn.out"), &o)?;
                Some(o.transpose(0, 1)?.contiguous()?)
            }
        };
        if let Some(a) = attn {
            x = (x + a.broadcast_mul(gate1)?)?;
        }
        let xn = modulate(&layer_norm(&x)?, shift2, scale2)?;
        let m = linear(
            w,
            &format!("{prefix}.mlp.fc2"),
            &linear(w, &format!("{prefix}.mlp.fc1"), &xn)?.silu()?,
        )?;
        x = (x + m.broadcast_mul(gate2)?)?;
    }

    let mods = linear(w, "final.ada", &cs)?.chunk(2, D::Minus1)?;
    let x = modulate(&layer_norm(&x)?, &mods[0], &mods[1])?;
    let out = linear(w, "final.proj", &x)?;
    Ok(out
        .reshape((fp, hp, wp, c.channels, p, p))?
        .permute((0, 3, 1, 4, 2, 5))?
        .contiguous()?
        .reshape((fp, c.channels, h, wd))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::{assemble_input, ModelWeights};
    use crate::latent::LatentVideo;
    use crate::world::Vocab;

    fn wave(dims: [usize; 4], phase: f32) -> LatentVideo {
        let n: usize = dims.iter().product();
        LatentVideo::from_vec(
            dims,
            (0..n).map(|i| (i as f32 * 0.37 + phase).sin()).collect(),
        )
        .unwrap()
    }

    fn setup(n: usize) -> (ModelWeights, ModelInput, Conditioning) {
        let w = ModelWeights::random(DitConfig::default(), 5, 0.2).unwrap();
        let refs: Vec<_> = (0..n).map(|j| wave([1, 4, 16, 16], j as f32)).collect();
        let v = wave([8, 4, 16, 16], 0.5);
        let noise = wave([8 + n, 4, 16, 16], 1.5);
        let toks = Vocab::default()
            .encode("a red plain circle moves right on a gray background")
            .unwrap();
        let cond = Conditioning::new(toks, refs.clone());
        let input = assemble_input(&v, &refs, 0.4, &noise).unwrap();
        (w, input, cond)
    }

    fn values(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn deterministic_and_shaped() {
        let (w, input, cond) = setup(2);
        let a = forward(&w, &input, &cond, 0.4).unwrap();
        let b = forward(&w, &input, &cond, 0.4).unwrap();
        assert_eq!(a.dims(), &[10, 4, 16, 16]);
        assert_eq!(values(&a), values(&b));
        assert!(values(&a).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mask_grants_reference_visibility() {
        for window in [4, 10, 100] {
            let m = temporal_mask(8, 2, window);
            for i in 0..8 {
                assert!(m[i][8] && m[i][9]);
                for j in 0..8 {
                    assert_eq!(m[i][j], i / window == j / window);
                }
            }
            for i in 8..10 {
                assert!((0..8).all(|j| !m[i][j]));
            }
        }
        assert!(temporal_mask(8, 2, 100)
            .iter()
            .take(8)
            .all(|r| r.iter().all(|&v| v)));
        assert_eq!(rope_positions(3, 2, 5), vec![0, 1, 2, 8, 9]);
    }

    #[test]
    fn offset_only_touches_temporal_attention() {
        let (w, input, cond) = setup(2);
        let shifted = Conditioning {
            ref_rope_offset: 16,
            ..cond.clone()
        };
        let a = forward(&w, &input, &cond, 0.4).unwrap();
        let b = forward(&w, &input, &shifted, 0.4).unwrap();
        assert_ne!(values(&a), values(&b));
        let ablate = ForwardOptions {
            ablate_temporal_attention: true,
        };
        let a = forward_with(&w, &input, &cond, 0.4, ablate).unwrap();
        let b = forward_with(&w, &input, &shifted, 0.4, ablate).unwrap();
        assert_eq!(values(&a), values(&b));
    }

    #[test]
    fn null_text_changes_output() {
        let (w, input, cond) = setup(1);
        let a = forward(&w, &input, &cond, 0.4).unwrap();
        let b = forward(&w, &input, &cond.with_drops(false, true), 0.4).unwrap();
        assert_ne!(values(&a), values(&b));
    }

    #[test]
    fn rope_matrix_is_rotate_half() {
        let c = DitConfig::default();
        let rope = rope_tables(&c, &[0, 3, 11], DType::F64).unwrap();
        let dh = c.head_dim();
        let x: Vec<f64> = (0..3 * dh).map(|i| (i as f64 * 0.7).cos()).collect();
        let xt = Tensor::from_vec(x.clone(), (1, 1, 3, dh), &Device::Cpu).unwrap();
        let got = apply_rope(&xt, &rope)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let cos = rope.cos.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let sin = rope.sin.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let half = dh / 2;
        for p in 0..3 {
            for k in 0..dh {
                let i = p * dh + k;
                let rot = if k < half { -x[i + half] } else { x[i - half] };
                assert!((got[i] - (x[i] * cos[i] + rot * sin[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reference_count_must_match() {
        let (w, input, cond) = setup(2);
        assert!(forward(&w, &input, &cond.with_drops(true, false), 0.4).is_err());
    }
}
