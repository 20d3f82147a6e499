//! Rotation-equivariant channel attention (ReCA) and the squeeze-excite
//! baseline it replaces.
//!
//! ReCA squeezes a re-feature map, splits it into the `N` orientation
//! submaps and runs two stages of conv blocks. Block `i` of a stage sums
//! the shared kernel `W_{(n−i) mod N}` applied to submap `n`:
//!
//! ```text
//! CB^a_i = Σ_n W^a_{(n−i) mod N} · F_squ(n)
//! CB^b_i = Σ_n W^b_{(n−i) mod N} · relu(BN(CB^a))_n
//! ```
//!
//! so an orientation shift of the input re-indexes the blocks and nothing
//! else. The sigmoid of `CB^b`, laid back out in kernel-channel-major
//! order, gates the input channels.
//!
//! Both stages are realized as 1×1 convolutions with an expanded weight
//! `W[o·N + i, c·N + m] = bank[(m − i) mod N][o, c]`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::groupequiv::{check_orientations, merge_orientations, split_orientations_tensor, ReFeatureMap};
use crate::params::{next_var, NormParams, NormVars, Params};
use crate::rng::Rng;
use crate::tensor::{Tensor, BN_EPS};

pub const DEFAULT_REDUCTION: usize = 16;

/// Largest divisor of `kernel_channels` that does not exceed `r`, so the
/// bottleneck keeps at least one channel.
pub fn clamp_reduction(kernel_channels: usize, r: usize) -> usize {
    (1..=r.max(1).min(kernel_channels))
        .rev()
        .find(|d| kernel_channels.is_multiple_of(*d))
        .unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReCAParams {
    /// `[N, K/r, K]`: kernels of conv block stage a.
    pub w_a: Tensor,
    /// `[N, K, K/r]`: kernels of conv block stage b.
    pub w_b: Tensor,
    /// Shared by all `N` blocks, one pair per reduced channel.
    pub norm: NormParams,
    pub reduction: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ReCAVars {
    pub w_a: Var,
    pub w_b: Var,
    pub norm: NormVars,
    pub orientations: usize,
    pub kernel_channels: usize,
    pub hidden: usize,
}

fn check_shape(op: &'static str, t: &Tensor, want: &[usize]) -> Result<()> {
    if t.shape() == want {
        return Ok(());
    }
    if t.rank() != want.len() {
        return Err(Error::Rank {
            op,
            expected: want.len(),
            shape: t.shape().to_vec(),
        });
    }
    let axis = t.shape().iter().zip(want).position(|(a, b)| a != b).unwrap();
    Err(Error::Dimension {
        op,
        axis,
        expected: want[axis],
        found: t.shape()[axis],
    })
}

/// Bound of the He-uniform distribution: variance `2/fan_in`. Attention
/// bottlenecks are ReLU layers, and smaller draws keep every gate close to
/// `σ(0)`.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Validates `(C, N, r)` and returns `(K, K/r)`.
pub fn reduced_dims(channels: usize, n: usize, r: usize) -> Result<(usize, usize)> {
    check_orientations(n)?;
    if r == 0 {
        return Err(Error::invalid("reduction ratio must be positive"));
    }
    if channels == 0 || !channels.is_multiple_of(n) {
        return Err(Error::invalid(format!("channels {channels} not divisible by N={n}")));
    }
    let k = channels / n;
    if !k.is_multiple_of(r) {
        return Err(Error::invalid(format!(
            "kernel channels {k} not divisible by reduction ratio {r}"
        )));
    }
    Ok((k, k / r))
}

impl ReCAParams {
    pub fn new(w_a: Tensor, w_b: Tensor, norm: NormParams, reduction: usize) -> Result<Self> {
        let &[n, hidden, k] = w_a.shape() else {
            return Err(Error::Rank {
                op: "ReCAParams w_a",
                expected: 3,
                shape: w_a.shape().to_vec(),
            });
        };
        let (_, want_hidden) = reduced_dims(k * n, n, reduction)?;
        check_shape("ReCAParams w_a", &w_a, &[n, want_hidden, k])?;
        check_shape("ReCAParams w_b", &w_b, &[n, k, hidden])?;
        check_shape("ReCAParams gamma", &norm.gamma, &[hidden])?;
        check_shape("ReCAParams beta", &norm.beta, &[hidden])?;
        Ok(Self {
            w_a,
            w_b,
            norm,
            reduction,
        })
    }

    /// He-uniform weights, `±√(6/fan_in)`, with the fan-in of a whole
    /// conv block (`K·N` resp. `K/r·N`); identity batchnorm.
    pub fn init(channels: usize, n: usize, r: usize, rng: &mut Rng) -> Result<Self> {
        let (k, h) = reduced_dims(channels, n, r)?;
        let a = he_bound(k * n);
        let w_a = Tensor::uniform(&[n, h, k], -a, a, rng);
        let b = he_bound(h * n);
        let w_b = Tensor::uniform(&[n, k, h], -b, b, rng);
        Self::new(w_a, w_b, NormParams::identity(h), r)
    }

    /// Random weights and random batchnorm affine terms.
    pub fn init_with_random_norm(channels: usize, n: usize, r: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::init(channels, n, r, rng)?;
        let h = p.hidden();
        p.norm = NormParams {
            gamma: Tensor::uniform(&[h], 0.5, 1.5, rng),
            beta: Tensor::uniform(&[h], -0.5, 0.5, rng),
        };
        Ok(p)
    }

    /// All conv-block kernels zero, `beta = 0`.
    pub fn zeros(channels: usize, n: usize, r: usize) -> Result<Self> {
        let (k, h) = reduced_dims(channels, n, r)?;
        Self::new(
            Tensor::zeros(&[n, h, k]),
            Tensor::zeros(&[n, k, h]),
            NormParams::identity(h),
            r,
        )
    }

    pub fn orientations(&self) -> usize {
        self.w_a.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w_a.shape()[1]
    }

    pub fn kernel_channels(&self) -> usize {
        self.w_a.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.kernel_channels() * self.orientations()
    }
}

impl Params for ReCAParams {
    type Bound = ReCAVars;

    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w_a, &self.w_b, &self.norm.gamma, &self.norm.beta]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_a, &mut self.w_b, &mut self.norm.gamma, &mut self.norm.beta]
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<ReCAVars> {
        Ok(ReCAVars {
            w_a: next_var(vars)?,
            w_b: next_var(vars)?,
            norm: self.norm.bind_from(vars)?,
            orientations: self.orientations(),
            kernel_channels: self.kernel_channels(),
            hidden: self.hidden(),
        })
    }
}

/// `[N, out, in] → [out·N, in·N, 1, 1]` with
/// `W[o·N + i, c·N + m] = bank[(m − i) mod N, o, c]`.
pub fn expand_bank(bank: &Tensor) -> Result<Tensor> {
    let &[n, out, inp] = bank.shape() else {
        return Err(Error::Rank {
            op: "expand_bank",
            expected: 3,
            shape: bank.shape().to_vec(),
        });
    };
    let mut data = Vec::with_capacity(bank.len() * n);
    for o in 0..out {
        for i in 0..n {
            for c in 0..inp {
                for m in 0..n {
                    data.push(bank.data()[(((m + n - i) % n) * out + o) * inp + c]);
                }
            }
        }
    }
    Tensor::new(vec![out * n, inp * n, 1, 1], data)
}

/// Cyclically shared 1×1 conv blocks over `[B, in·N, H, W]`.
pub(crate) fn bank_conv_var(tape: &mut Tape, x: Var, bank: Var) -> Result<Var> {
    let w = tape.rearrange(bank, expand_bank)?;
    tape.conv2d(x, w, None, 1, 0)
}

fn check_input(tape: &Tape, x: Var, p: &ReCAVars) -> Result<[usize; 4]> {
    let dims = tape.value(x)?.dims4("reca")?;
    let c = p.kernel_channels * p.orientations;
    if dims[1] != c {
        return Err(Error::Dimension {
            op: "reca",
            axis: 1,
            expected: c,
            found: dims[1],
        });
    }
    Ok(dims)
}

/// Both conv-block stages with the shared batchnorm and ReLU between them.
/// `x` is `[B, K·N, H, W]`; statistics pool over batch, orientation block
/// and every spatial position.
fn conv_blocks_var(tape: &mut Tape, x: Var, p: &ReCAVars) -> Result<Var> {
    let [b, _, h, w] = tape.value(x)?.dims4("reca conv blocks")?;
    let a = bank_conv_var(tape, x, p.w_a)?;
    let a = tape.reshape(a, &[b, p.hidden, p.orientations, h, w])?;
    let a = tape.batchnorm(a, p.norm.gamma, p.norm.beta, BN_EPS, &[0, 2, 3, 4])?;
    let a = tape.relu(a)?;
    let a = tape.reshape(a, &[b, p.hidden * p.orientations, h, w])?;
    bank_conv_var(tape, a, p.w_b)
}

/// Pre-sigmoid attention logits `CB^b`, shaped `[B, C, 1, 1]`.
pub fn reca_logits_var(tape: &mut Tape, x: Var, p: &ReCAVars) -> Result<Var> {
    check_input(tape, x, p)?;
    let squeezed = tape.global_avg_pool(x)?;
    conv_blocks_var(tape, squeezed, p)
}

/// The same conv blocks applied at every pixel, without the squeeze.
pub(crate) fn local_logits_var(tape: &mut Tape, x: Var, p: &ReCAVars) -> Result<Var> {
    check_input(tape, x, p)?;
    conv_blocks_var(tape, x, p)
}

/// Differentiable [`reca_forward`] on a tape.
pub fn reca_forward_var(tape: &mut Tape, x: Var, p: &ReCAVars) -> Result<Var> {
    let logits = reca_logits_var(tape, x, p)?;
    let att = tape.sigmoid(logits)?;
    tape.mul(x, att)
}

fn check_orientation_match(x: &ReFeatureMap, p: &ReCAParams) -> Result<()> {
    if x.orientations() != p.orientations() {
        return Err(Error::OrientationMismatch {
            what: "ReCA input",
            expected: p.orientations(),
            found: x.orientations(),
        });
    }
    Ok(())
}

fn run_blocks(parts: &[Tensor], bank: &Tensor, in_dim: usize, op: &'static str) -> Result<Vec<Tensor>> {
    let n = bank.shape()[0];
    if parts.len() != n {
        return Err(Error::OrientationMismatch {
            what: op,
            expected: n,
            found: parts.len(),
        });
    }
    let as4: Vec<Tensor> = parts
        .iter()
        .map(|p| match *p.shape() {
            [b, c] if c == in_dim => p.reshape(&[b, c, 1, 1]),
            [_, c] => Err(Error::Dimension {
                op,
                axis: 1,
                expected: in_dim,
                found: c,
            }),
            _ => Err(Error::Rank {
                op,
                expected: 2,
                shape: p.shape().to_vec(),
            }),
        })
        .collect::<Result<_>>()?;
    let merged = merge_orientations(&as4)?;
    let mut tape = Tape::new();
    let x = tape.leaf(merged.into_tensor());
    let w = tape.leaf(bank.clone());
    let y = bank_conv_var(&mut tape, x, w)?;
    let out = tape.value(y)?;
    let b = out.shape()[0];
    let out_dim = bank.shape()[1];
    split_orientations_tensor(out, n)?
        .into_iter()
        .map(|t| t.reshape(&[b, out_dim]))
        .collect()
}

/// Stage-a conv blocks on the squeezed submaps `F_squ(n)`, each `[B, K]`.
pub fn conv_block_a(f_squ: &[Tensor], p: &ReCAParams) -> Result<Vec<Tensor>> {
    run_blocks(f_squ, &p.w_a, p.kernel_channels(), "conv_block_a")
}

/// Stage-b conv blocks on `[B, K/r]` inputs (already normalized and
/// rectified).
pub fn conv_block_b(cb_a: &[Tensor], p: &ReCAParams) -> Result<Vec<Tensor>> {
    run_blocks(cb_a, &p.w_b, p.hidden(), "conv_block_b")
}

/// Pre-sigmoid channel logits `[B, C, 1, 1]`.
pub fn reca_logits(x: &ReFeatureMap, p: &ReCAParams) -> Result<Tensor> {
    check_orientation_match(x, p)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.tensor().clone());
    let pv = p.bind(&mut tape)?;
    let y = reca_logits_var(&mut tape, xv, &pv)?;
    Ok(tape.value(y)?.clone())
}

/// Channel gates `σ(CB^b)` in the input's channel layout, `[B, C, 1, 1]`.
pub fn reca_attention(x: &ReFeatureMap, p: &ReCAParams) -> Result<Tensor> {
    Ok(crate::tensor::sigmoid(&reca_logits(x, p)?))
}

pub fn reca_forward(x: &ReFeatureMap, p: &ReCAParams) -> Result<ReFeatureMap> {
    check_orientation_match(x, p)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.tensor().clone());
    let pv = p.bind(&mut tape)?;
    let y = reca_forward_var(&mut tape, xv, &pv)?;
    ReFeatureMap::new(tape.value(y)?.clone(), x.orientations())
}

/// Squeeze-excite weights with no orientation structure.
#[derive(Clone, Debug, PartialEq)]
pub struct SEParams {
    /// `[C/r, C]`
    pub w1: Tensor,
    /// `[C, C/r]`
    pub w2: Tensor,
    /// Batchnorm between the two layers, when present.
    pub norm: Option<NormParams>,
}

#[derive(Clone, Copy, Debug)]
pub struct SEVars {
    pub w1: Var,
    pub w2: Var,
    pub norm: Option<NormVars>,
    pub channels: usize,
    pub hidden: usize,
}

impl SEParams {
    pub fn new(w1: Tensor, w2: Tensor, norm: Option<NormParams>) -> Result<Self> {
        let &[hidden, c] = w1.shape() else {
            return Err(Error::Rank {
                op: "SEParams w1",
                expected: 2,
                shape: w1.shape().to_vec(),
            });
        };
        check_shape("SEParams w2", &w2, &[c, hidden])?;
        if let Some(nm) = &norm {
            check_shape("SEParams gamma", &nm.gamma, &[hidden])?;
            check_shape("SEParams beta", &nm.beta, &[hidden])?;
        }
        Ok(Self { w1, w2, norm })
    }

    pub fn init(channels: usize, r: usize, with_norm: bool, rng: &mut Rng) -> Result<Self> {
        if r == 0 || !channels.is_multiple_of(r) {
            return Err(Error::invalid(format!(
                "channels {channels} not divisible by reduction ratio {r}"
            )));
        }
        let h = channels / r;
        let a = he_bound(channels);
        let w1 = Tensor::uniform(&[h, channels], -a, a, rng);
        let b = he_bound(h);
        let w2 = Tensor::uniform(&[channels, h], -b, b, rng);
        Self::new(w1, w2, with_norm.then(|| NormParams::identity(h)))
    }

    pub fn zeros(channels: usize, r: usize, with_norm: bool) -> Result<Self> {
        if r == 0 || !channels.is_multiple_of(r) {
            return Err(Error::invalid(format!(
                "channels {channels} not divisible by reduction ratio {r}"
            )));
        }
        let h = channels / r;
        Self::new(
            Tensor::zeros(&[h, channels]),
            Tensor::zeros(&[channels, h]),
            with_norm.then(|| NormParams::identity(h)),
        )
    }

    /// The `N = 1` ReCA weights viewed as a squeeze-excite block with
    /// batchnorm.
    pub fn from_trivial_reca(p: &ReCAParams) -> Result<Self> {
        if p.orientations() != 1 {
            return Err(Error::OrientationMismatch {
                what: "SEParams::from_trivial_reca",
                expected: 1,
                found: p.orientations(),
            });
        }
        let (h, k) = (p.hidden(), p.kernel_channels());
        Self::new(
            p.w_a.reshape(&[h, k])?,
            p.w_b.reshape(&[k, h])?,
            Some(p.norm.clone()),
        )
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }
}

impl Params for SEParams {
    type Bound = SEVars;

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.w1, &self.w2];
        v.extend(self.norm.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w1, &mut self.w2];
        v.extend(self.norm.tensors_mut());
        v
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<SEVars> {
        Ok(SEVars {
            w1: next_var(vars)?,
            w2: next_var(vars)?,
            norm: self.norm.bind_from(vars)?,
            channels: self.channels(),
            hidden: self.hidden(),
        })
    }
}

/// Two 1×1 layers over `[B, C, H, W]`; batchnorm (if any) pools over batch
/// and space.
fn se_blocks_var(tape: &mut Tape, x: Var, p: &SEVars) -> Result<Var> {
    let [_, c, _, _] = tape.value(x)?.dims4("squeeze-excite")?;
    if c != p.channels {
        return Err(Error::Dimension {
            op: "squeeze-excite",
            axis: 1,
            expected: p.channels,
            found: c,
        });
    }
    let w1 = tape.reshape(p.w1, &[p.hidden, p.channels, 1, 1])?;
    let w2 = tape.reshape(p.w2, &[p.channels, p.hidden, 1, 1])?;
    let mut a = tape.conv2d(x, w1, None, 1, 0)?;
    if let Some(nm) = p.norm {
        a = tape.batchnorm(a, nm.gamma, nm.beta, BN_EPS, &[0, 2, 3])?;
    }
    let a = tape.relu(a)?;
    tape.conv2d(a, w2, None, 1, 0)
}

pub(crate) fn se_logits_var(tape: &mut Tape, x: Var, p: &SEVars) -> Result<Var> {
    let s = tape.global_avg_pool(x)?;
    se_blocks_var(tape, s, p)
}

pub(crate) fn se_local_logits_var(tape: &mut Tape, x: Var, p: &SEVars) -> Result<Var> {
    se_blocks_var(tape, x, p)
}

/// Differentiable [`se_forward`] on a tape.
pub fn se_forward_var(tape: &mut Tape, x: Var, p: &SEVars) -> Result<Var> {
    let logits = se_logits_var(tape, x, p)?;
    let att = tape.sigmoid(logits)?;
    tape.mul(x, att)
}

/// `x ⊙ σ(W2 · relu(W1 · gap(x)))`, with batchnorm after `W1` when the
/// parameters carry one.
pub fn se_forward(x: &Tensor, p: &SEParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv = p.bind(&mut tape)?;
    let y = se_forward_var(&mut tape, xv, &pv)?;
    Ok(tape.value(y)?.clone())
}
