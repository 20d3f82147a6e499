//! Cyclic-group feature maps and convolutions over C1, C2 and C4.
//!
//! A re-feature map stores `K` kernel channels, each with `N` orientation
//! copies, in kernel-channel-major order: channel `k·N + n` is orientation
//! `n` of kernel channel `k`.
//!
//! The group element `s` acts by rotating the spatial plane
//! `s · 4/N` quarter turns counter-clockwise and moving orientation `n` to
//! `(n + s) mod N`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{next_var, Params};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

pub const SUPPORTED_ORIENTATIONS: [usize; 3] = [1, 2, 4];

pub fn check_orientations(n: usize) -> Result<()> {
    if SUPPORTED_ORIENTATIONS.contains(&n) {
        Ok(())
    } else {
        Err(Error::invalid(format!("orientations must be 1, 2 or 4, got {n}")))
    }
}

/// Quarter turns performed by group element `s` of C_N.
pub fn quarter_turns(n: usize, s: usize) -> i64 {
    (s * (4 / n)) as i64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReFeatureMap {
    data: Tensor,
    kernel_channels: usize,
    orientations: usize,
}

impl ReFeatureMap {
    pub fn new(data: Tensor, orientations: usize) -> Result<Self> {
        check_orientations(orientations)?;
        let [_, c, _, _] = data.dims4("ReFeatureMap")?;
        if c % orientations != 0 {
            return Err(Error::Dimension {
                op: "ReFeatureMap",
                axis: 1,
                expected: (c / orientations + 1) * orientations,
                found: c,
            });
        }
        Ok(Self {
            kernel_channels: c / orientations,
            orientations,
            data,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn kernel_channels(&self) -> usize {
        self.kernel_channels
    }

    pub fn orientations(&self) -> usize {
        self.orientations
    }

    pub fn channels(&self) -> usize {
        self.kernel_channels * self.orientations
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

/// Cyclic shift of the orientation index, `n → (n + s) mod N`, in every
/// kernel channel of a `[B, K·N, ...]` tensor.
pub fn shift_orientations(x: &Tensor, n: usize, s: usize) -> Result<Tensor> {
    if x.rank() < 2 || !x.shape()[1].is_multiple_of(n) {
        return Err(Error::invalid(format!(
            "shift_orientations: shape {:?} not divisible into N={n} orientations",
            x.shape()
        )));
    }
    let s = s % n;
    if s == 0 {
        return Ok(x.clone());
    }
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let mut out = vec![0.0; x.len()];
    for (b, src) in x.data().chunks(c * inner).enumerate() {
        for ch in 0..c {
            let (k, o) = (ch / n, ch % n);
            let dst = k * n + (o + s) % n;
            let base = b * c * inner;
            out[base + dst * inner..base + (dst + 1) * inner]
                .copy_from_slice(&src[ch * inner..(ch + 1) * inner]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Group action on a raw `[B, K·N, H, W]` tensor.
pub fn g_act_tensor(x: &Tensor, n: usize, s: usize) -> Result<Tensor> {
    check_orientations(n)?;
    if s >= n {
        return Err(Error::invalid(format!("group element {s} out of range for C{n}")));
    }
    let [_, _, h, w] = x.dims4("g_act")?;
    if h != w {
        return Err(Error::Dimension {
            op: "g_act",
            axis: 3,
            expected: h,
            found: w,
        });
    }
    shift_orientations(&tensor::rot90(x, quarter_turns(n, s))?, n, s)
}

pub fn g_act(x: &ReFeatureMap, s: usize) -> Result<ReFeatureMap> {
    Ok(ReFeatureMap {
        data: g_act_tensor(&x.data, x.orientations, s)?,
        ..*x
    })
}

/// Orientation submaps: submap `n` holds channels `{k·N + n}`.
pub fn split_orientations(x: &ReFeatureMap) -> Result<Vec<Tensor>> {
    split_orientations_tensor(x.tensor(), x.orientations())
}

pub fn split_orientations_tensor(x: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    let [b, c, h, w] = x.dims4("split_orientations")?;
    if c % n != 0 {
        return Err(Error::Dimension {
            op: "split_orientations",
            axis: 1,
            expected: (c / n + 1) * n,
            found: c,
        });
    }
    let k = c / n;
    let plane = h * w;
    Ok((0..n)
        .map(|o| {
            let mut data = Vec::with_capacity(b * k * plane);
            for bi in 0..b {
                for ki in 0..k {
                    let start = ((bi * c) + ki * n + o) * plane;
                    data.extend_from_slice(&x.data()[start..start + plane]);
                }
            }
            Tensor::new(vec![b, k, h, w], data).expect("consistent split shape")
        })
        .collect())
}

/// Inverse of [`split_orientations`].
pub fn merge_orientations(parts: &[Tensor]) -> Result<ReFeatureMap> {
    let n = parts.len();
    check_orientations(n)?;
    let first = parts[0].dims4("merge_orientations")?;
    if let Some(p) = parts.iter().find(|p| p.shape() != parts[0].shape()) {
        return Err(Error::Broadcast {
            op: "merge_orientations",
            lhs: parts[0].shape().to_vec(),
            rhs: p.shape().to_vec(),
        });
    }
    let [b, k, h, w] = first;
    let plane = h * w;
    let mut data = vec![0.0; b * k * n * plane];
    for (o, part) in parts.iter().enumerate() {
        for bi in 0..b {
            for ki in 0..k {
                let src = (bi * k + ki) * plane;
                let dst = (bi * k * n + ki * n + o) * plane;
                data[dst..dst + plane].copy_from_slice(&part.data()[src..src + plane]);
            }
        }
    }
    ReFeatureMap::new(Tensor::new(vec![b, k * n, h, w], data)?, n)
}

fn kernel_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// First-layer weights lifting a plain image to a re-feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftConvParams {
    /// `[K_out, C_in, k, k]`
    pub weight: Tensor,
    /// `[K_out]`, shared by all orientations of a kernel channel.
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LiftConvVars {
    pub weight: Var,
    pub bias: Var,
}

impl LiftConvParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [k_out, _, kh, kw] = weight.dims4("LiftConvParams")?;
        check_square_odd(kh, kw)?;
        if bias.shape() != [k_out] {
            return Err(Error::Dimension {
                op: "LiftConvParams bias",
                axis: 0,
                expected: k_out,
                found: bias.len(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn init(k_out: usize, c_in: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        check_square_odd(kernel, kernel)?;
        let a = kernel_bound(c_in * kernel * kernel);
        let weight = Tensor::uniform(&[k_out, c_in, kernel, kernel], -a, a, rng);
        let bias = Tensor::uniform(&[k_out], -a, a, rng);
        Self::new(weight, bias)
    }

    pub fn k_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }
}

impl Params for LiftConvParams {
    type Bound = LiftConvVars;

    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<LiftConvVars> {
        Ok(LiftConvVars {
            weight: next_var(vars)?,
            bias: next_var(vars)?,
        })
    }
}

/// Regular group convolution weights indexed by relative orientation.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupConvParams {
    /// `[K_out, K_in, N, k, k]`
    pub weight: Tensor,
    /// `[K_out]`
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct GroupConvVars {
    pub weight: Var,
    pub bias: Var,
    orientations: usize,
}

impl GroupConvParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let &[k_out, _, n, kh, kw] = weight.shape() else {
            return Err(Error::Rank {
                op: "GroupConvParams",
                expected: 5,
                shape: weight.shape().to_vec(),
            });
        };
        check_orientations(n)?;
        check_square_odd(kh, kw)?;
        if bias.shape() != [k_out] {
            return Err(Error::Dimension {
                op: "GroupConvParams bias",
                axis: 0,
                expected: k_out,
                found: bias.len(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn init(k_out: usize, k_in: usize, n: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        check_orientations(n)?;
        check_square_odd(kernel, kernel)?;
        let a = kernel_bound(k_in * n * kernel * kernel);
        let weight = Tensor::uniform(&[k_out, k_in, n, kernel, kernel], -a, a, rng);
        let bias = Tensor::uniform(&[k_out], -a, a, rng);
        Self::new(weight, bias)
    }

    pub fn k_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn k_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn orientations(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[3]
    }
}

impl Params for GroupConvParams {
    type Bound = GroupConvVars;

    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<GroupConvVars> {
        Ok(GroupConvVars {
            weight: next_var(vars)?,
            bias: next_var(vars)?,
            orientations: self.orientations(),
        })
    }
}

fn check_square_odd(kh: usize, kw: usize) -> Result<()> {
    if kh != kw || kh.is_multiple_of(2) {
        return Err(Error::invalid(format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    Ok(())
}

/// `[K_out, C_in, k, k] → [K_out·N, C_in, k, k]`: row `k·N + i` is the
/// kernel rotated by orientation `i`.
pub fn expand_lift_weight(weight: &Tensor, n: usize) -> Result<Tensor> {
    let [k_out, c_in, kh, kw] = weight.dims4("expand_lift_weight")?;
    let block = c_in * kh * kw;
    let mut data = Vec::with_capacity(weight.len() * n);
    for k in 0..k_out {
        let kernel = Tensor::new(vec![c_in, kh, kw], weight.data()[k * block..(k + 1) * block].to_vec())?;
        for i in 0..n {
            data.extend_from_slice(tensor::rot90(&kernel, quarter_turns(n, i))?.data());
        }
    }
    Tensor::new(vec![k_out * n, c_in, kh, kw], data)
}

/// `[K_out, K_in, N, k, k] → [K_out·N, K_in·N, k, k]` with
/// `W[o·N+i, c·N+m] = rot(weight[o, c, (m−i) mod N], i)`.
pub fn expand_group_weight(weight: &Tensor) -> Result<Tensor> {
    let &[k_out, k_in, n, kh, kw] = weight.shape() else {
        return Err(Error::Rank {
            op: "expand_group_weight",
            expected: 5,
            shape: weight.shape().to_vec(),
        });
    };
    let plane = kh * kw;
    let mut data = Vec::with_capacity(weight.len() * n);
    for o in 0..k_out {
        for i in 0..n {
            for c in 0..k_in {
                for m in 0..n {
                    let rel = (m + n - i) % n;
                    let start = ((o * k_in + c) * n + rel) * plane;
                    let kernel = Tensor::new(vec![kh, kw], weight.data()[start..start + plane].to_vec())?;
                    data.extend_from_slice(tensor::rot90(&kernel, quarter_turns(n, i))?.data());
                }
            }
        }
    }
    Tensor::new(vec![k_out * n, k_in * n, kh, kw], data)
}

/// Repeats each entry `n` times: `[K] → [K·N]`.
pub fn expand_bias(bias: &Tensor, n: usize) -> Result<Tensor> {
    let data = bias.data().iter().flat_map(|&b| std::iter::repeat_n(b, n)).collect();
    Tensor::new(vec![bias.len() * n], data)
}

/// Differentiable [`lift_conv`] on a tape.
pub fn lift_conv_var(tape: &mut Tape, x: Var, p: &LiftConvVars, n: usize) -> Result<Var> {
    check_orientations(n)?;
    let k = tape.shape(p.weight)?[2];
    let w = tape.rearrange(p.weight, |t| expand_lift_weight(t, n))?;
    let b = tape.rearrange(p.bias, |t| expand_bias(t, n))?;
    tape.conv2d(x, w, Some(b), 1, (k - 1) / 2)
}

/// Stride 2 runs the stride-1 convolution followed by 2×2 mean pooling;
/// plain strided sampling of an even grid is not closed under rotation.
pub fn group_conv_var(tape: &mut Tape, x: Var, p: &GroupConvVars, stride: usize) -> Result<Var> {
    let n = p.orientations;
    let [_, c, h, w] = tape.value(x)?.dims4("group_conv")?;
    if c % n != 0 {
        return Err(Error::OrientationMismatch {
            what: "group_conv input",
            expected: n,
            found: c,
        });
    }
    let k_in = tape.shape(p.weight)?[1];
    if c != k_in * n {
        return Err(Error::Dimension {
            op: "group_conv",
            axis: 1,
            expected: k_in * n,
            found: c,
        });
    }
    match stride {
        1 => {}
        2 if h % 2 == 0 && w % 2 == 0 => {}
        2 => {
            return Err(Error::invalid(format!(
                "group_conv: stride 2 needs even spatial extents, got {h}x{w}"
            )))
        }
        _ => return Err(Error::invalid(format!("group_conv: stride must be 1 or 2, got {stride}"))),
    }
    let k = tape.shape(p.weight)?[3];
    let wfull = tape.rearrange(p.weight, expand_group_weight)?;
    let b = tape.rearrange(p.bias, |t| expand_bias(t, n))?;
    let y = tape.conv2d(x, wfull, Some(b), 1, (k - 1) / 2)?;
    if stride == 2 {
        tape.avg_pool2x2(y)
    } else {
        Ok(y)
    }
}

/// Lifting convolution: orientation `i` of kernel channel `k` is `x`
/// correlated with kernel `k` rotated by `i`.
pub fn lift_conv(x: &Tensor, p: &LiftConvParams, n: usize) -> Result<ReFeatureMap> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv = p.bind(&mut tape)?;
    let y = lift_conv_var(&mut tape, xv, &pv, n)?;
    ReFeatureMap::new(tape.value(y)?.clone(), n)
}

pub fn group_conv(x: &ReFeatureMap, p: &GroupConvParams, stride: usize) -> Result<ReFeatureMap> {
    if x.orientations() != p.orientations() {
        return Err(Error::OrientationMismatch {
            what: "group_conv input",
            expected: p.orientations(),
            found: x.orientations(),
        });
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.tensor().clone());
    let pv = p.bind(&mut tape)?;
    let y = group_conv_var(&mut tape, xv, &pv, stride)?;
    ReFeatureMap::new(tape.value(y)?.clone(), x.orientations())
}
