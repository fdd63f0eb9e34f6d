use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::world::Vocab;

/// Assembled model input, `(f+n) × (2c+1) × h × w`: noised latents, clean
/// reference condition (zero on video positions), then the flag plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub tensor: LatentVideo,
    pub frames: usize,
    pub refs: usize,
    pub channels: usize,
}

impl ModelInput {
    pub fn positions(&self) -> usize {
        self.frames + self.refs
    }

    /// Checks the flag and zero-padding invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let c = self.channels;
        let [fp, cc, h, w] = self.tensor.dims();
        if fp != self.positions() || cc != 2 * c + 1 {
            return Err(Error::shape(format!(
                "input dims {:?} disagree with f={}, n={}, c={c}",
                self.tensor.dims(),
                self.frames,
                self.refs
            )));
        }
        for p in 0..fp {
            let is_ref = p >= self.frames;
            for y in 0..h {
                for x in 0..w {
                    let flag = self.tensor.get(p, 2 * c, y, x);
                    if flag != if is_ref { 1.0 } else { 0.0 } {
                        return Err(Error::invalid(format!("flag plane wrong at position {p}")));
                    }
                    if !is_ref && (c..2 * c).any(|ch| self.tensor.get(p, ch, y, x) != 0.0) {
                        return Err(Error::invalid(format!(
                            "condition channels non-zero at video position {p}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `z_t = (1-t)·z + t·noise` on video and reference positions; clean
/// references go to the condition channels.
pub fn assemble_input(
    video: &LatentVideo,
    refs: &[LatentVideo],
    t: f64,
    noise: &LatentVideo,
) -> Result<ModelInput> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
    }
    let [f, c, h, w] = video.dims();
    for (j, r) in refs.iter().enumerate() {
        if r.dims() != [1, c, h, w] {
            return Err(Error::shape(format!(
                "reference {j} is {:?}, expected [1, {c}, {h}, {w}]",
                r.dims()
            )));
        }
    }
    let n = refs.len();
    if noise.dims() != [f + n, c, h, w] {
        return Err(Error::shape(format!(
            "noise is {:?}, expected {:?}",
            noise.dims(),
            [f + n, c, h, w]
        )));
    }
    let plane = h * w;
    let cin = 2 * c + 1;
    let mut data = vec![0f32; (f + n) * cin * plane];
    let (a, b) = (1.0 - t, t);
    for p in 0..f + n {
        let clean: &[f32] = if p < f {
            video.frame(p)
        } else {
            refs[p - f].frame(0)
        };
        let eps = noise.frame(p);
        let out = &mut data[p * cin * plane..(p + 1) * cin * plane];
        for i in 0..c * plane {
            out[i] = (a * clean[i] as f64 + b * eps[i] as f64) as f32;
        }
        if p >= f {
            out[c * plane..2 * c * plane].copy_from_slice(clean);
            out[2 * c * plane..].iter_mut().for_each(|v| *v = 1.0);
        }
    }
    Ok(ModelInput {
        tensor: LatentVideo::from_vec([f + n, cin, h, w], data)?,
        frames: f,
        refs: n,
        channels: c,
    })
}

/// Input for a sampler state: video positions carry `state` as is, while
/// references are noised to time `t` with `ref_noise` (`n` frames).
pub fn assemble_state(
    state: &LatentVideo,
    refs: &[LatentVideo],
    t: f64,
    ref_noise: &LatentVideo,
) -> Result<ModelInput> {
    let [f, c, h, w] = state.dims();
    let n = refs.len();
    if ref_noise.frames() < n || ref_noise.frame_len() != c * h * w {
        return Err(Error::shape(format!(
            "reference noise {:?} cannot cover {n} references",
            ref_noise.dims()
        )));
    }
    let mut noise = state.data().to_vec();
    noise.extend_from_slice(&ref_noise.data()[..n * c * h * w]);
    let noise = LatentVideo::from_vec([f + n, c, h, w], noise)?;
    let mut m = assemble_input(state, refs, t, &noise)?;
    // video positions are the state itself, not an interpolation
    let cin = 2 * c + 1;
    let plane = h * w;
    let data = m.tensor.data_mut();
    for p in 0..f {
        data[p * cin * plane..p * cin * plane + c * plane].copy_from_slice(state.frame(p));
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub text_tokens: Vec<u32>,
    pub references: Vec<LatentVideo>,
    /// Extra temporal rotary offset for reference tokens; 0 is canonical.
    pub ref_rope_offset: usize,
    pub drop_text: bool,
    pub drop_ref: bool,
}

impl Conditioning {
    pub fn new(text_tokens: Vec<u32>, references: Vec<LatentVideo>) -> Self {
        Self {
            text_tokens,
            references,
            ref_rope_offset: 0,
            drop_text: false,
            drop_ref: false,
        }
    }

    /// Tokens the model sees: the null sequence when text is dropped.
    pub fn effective_tokens(&self) -> Vec<u32> {
        if self.drop_text || self.text_tokens.is_empty() {
            Vocab::null_sequence()
        } else {
            self.text_tokens.clone()
        }
    }

    /// References the model sees: none when dropped (an `n = 0` sequence).
    pub fn effective_refs(&self) -> &[LatentVideo] {
        if self.drop_ref {
            &[]
        } else {
            &self.references
        }
    }

    pub fn with_drops(&self, drop_ref: bool, drop_text: bool) -> Self {
        Self {
            drop_ref,
            drop_text,
            ..self.clone()
        }
    }

    /// Assembles the model input for these conditions.
    pub fn input(&self, video: &LatentVideo, t: f64, noise: &LatentVideo) -> Result<ModelInput> {
        let n = self.effective_refs().len();
        let [f, c, h, w] = video.dims();
        let noise = if noise.frames() == f + n {
            noise.clone()
        } else if noise.frames() > f + n {
            // drop_ref keeps the video part of a shared noise draw
            LatentVideo::from_vec(
                [f + n, c, h, w],
                noise.data()[..(f + n) * c * h * w].to_vec(),
            )?
        } else {
            return Err(Error::shape(format!(
                "noise has {} positions, need {}",
                noise.frames(),
                f + n
            )));
        };
        assemble_input(video, self.effective_refs(), t, &noise)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn filled(dims: [usize; 4], seed: u32) -> LatentVideo {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|i| (((i as u32).wrapping_mul(2654435761) ^ seed) % 1000) as f32 / 500.0 - 1.0)
            .collect();
        LatentVideo::from_vec(dims, data).unwrap()
    }

    #[test]
    fn reference_example_dims() {
        let v = filled([8, 4, 16, 16], 1);
        let refs = vec![filled([1, 4, 16, 16], 2), filled([1, 4, 16, 16], 3)];
        let noise = filled([10, 4, 16, 16], 4);
        let m = assemble_input(&v, &refs, 0.3, &noise).unwrap();
        assert_eq!(m.tensor.dims(), [10, 9, 16, 16]);
        assert!(assemble_input(&v, &refs, 1.5, &noise).is_err());
        assert!(assemble_input(&v, &refs[..1], 0.5, &noise).is_err());
    }

    proptest! {
        #[test]
        fn structure_and_endpoints(f in 1usize..6, n in 0usize..4, c in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u32>(), t in 0.0f64..=1.0) {
            let v = filled([f, c, h, w], seed);
            let refs: Vec<_> = (0..n).map(|j| filled([1, c, h, w], seed ^ (j as u32 + 7))).collect();
            let noise = filled([f + n, c, h, w], seed ^ 99);
            let m = assemble_input(&v, &refs, t, &noise).unwrap();
            prop_assert_eq!(m.tensor.dims(), [f + n, 2 * c + 1, h, w]);
            m.check_invariants().unwrap();
            for (tt, expect_noise) in [(0.0, false), (1.0, true)] {
                let m = assemble_input(&v, &refs, tt, &noise).unwrap();
                for p in 0..f + n {
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let clean = if p < f { v.get(p, ch, y, x) } else { refs[p - f].get(0, ch, y, x) };
                                let want = if expect_noise { noise.get(p, ch, y, x) } else { clean };
                                prop_assert_eq!(m.tensor.get(p, ch, y, x), want);
                                let cond = if p < f { 0.0 } else { clean };
                                prop_assert_eq!(m.tensor.get(p, c + ch, y, x), cond);
                            }
                        }
                    }
                }
            }
        }
    }
}
