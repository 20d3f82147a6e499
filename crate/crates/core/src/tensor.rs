//! Dense row-major `f64` tensors and the small op set the networks need.
//!
//! Rotation convention: a positive quarter turn rotates the last two axes
//! counter-clockwise, so `[[1, 2], [3, 4]]` becomes `[[2, 4], [1, 3]]`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Output planes below this many multiply-adds are computed serially.
const PAR_CONV_WORK: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor extents must be positive (axis {axis} of {shape:?})"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(f).collect(),
        }
    }

    /// Tensor whose values are their own flat indices; used to derive
    /// gather maps from pure index permutations.
    pub fn iota(shape: &[usize]) -> Self {
        Self::from_fn(shape, |i| i as f64)
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| rng.uniform(lo, hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `‖self − reference‖ / ‖reference‖`, or the absolute norm when the
    /// reference is zero.
    pub fn relative_residual(&self, reference: &Tensor) -> Result<f64> {
        same_shape("relative_residual", self, reference)?;
        let diff: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = reference.frobenius_norm();
        Ok(if norm > 0.0 { diff / norm } else { diff })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_owned()))
        }
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [b, c, h, w] => Ok([b, c, h, w]),
            _ => Err(Error::Rank {
                op,
                expected: 4,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Channel slice `[.., c0..c0+count, ..]` of a rank-4 tensor.
    pub fn narrow_channels(&self, c0: usize, count: usize) -> Result<Tensor> {
        let [b, c, h, w] = self.dims4("narrow_channels")?;
        if c0 + count > c || count == 0 {
            return Err(Error::Dimension {
                op: "narrow_channels",
                axis: 1,
                expected: c0 + count,
                found: c,
            });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * count * plane);
        for bi in 0..b {
            let start = (bi * c + c0) * plane;
            data.extend_from_slice(&self.data[start..start + count * plane]);
        }
        Tensor::new(vec![b, count, h, w], data)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Broadcast {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

/// Output index range `[start, end)` along one axis for which the input
/// coordinate `o * stride + k - pad` lies inside `[0, input)`.
fn valid_range(k: usize, pad: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    let start = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let end = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(output)
    } else {
        0
    };
    (start, end.max(start))
}

pub(crate) fn conv_output_len(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad)
        .checked_sub(k)
        .map(|span| span / stride + 1)
}

/// 2-D cross-correlation `[B,Cin,H,W] ⋆ [Cout,Cin,kh,kw] (+ bias)`.
///
/// Every output pixel accumulates its terms in the fixed order
/// kernel-row, kernel-col, in-channel; the bias is added last. Padded
/// positions contribute no term.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [batch, cin, h, wd] = x.dims4("conv2d")?;
    let [cout, wcin, kh, kw] = w.dims4("conv2d")?;
    if wcin != cin {
        return Err(Error::Dimension {
            op: "conv2d",
            axis: 1,
            expected: cin,
            found: wcin,
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid(format!(
            "conv2d: kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    if !(1..=2).contains(&stride) {
        return Err(Error::invalid(format!("conv2d: stride must be 1 or 2, got {stride}")));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::Dimension {
                op: "conv2d bias",
                axis: 0,
                expected: cout,
                found: b.shape().first().copied().unwrap_or(0),
            });
        }
    }
    let ho = conv_output_len(h, kh, stride, pad).ok_or(Error::Dimension {
        op: "conv2d",
        axis: 2,
        expected: kh,
        found: h + 2 * pad,
    })?;
    let wo = conv_output_len(wd, kw, stride, pad).ok_or(Error::Dimension {
        op: "conv2d",
        axis: 3,
        expected: kw,
        found: wd + 2 * pad,
    })?;

    let plane_in = h * wd;
    let plane_out = ho * wo;
    let mut out = vec![0.0; batch * cout * plane_out];
    let xd = x.data();
    let wdat = w.data();

    let compute_plane = |idx: usize, acc: &mut [f64]| {
        let (bi, co) = (idx / cout, idx % cout);
        let xb = &xd[bi * cin * plane_in..(bi + 1) * cin * plane_in];
        for ky in 0..kh {
            let (oy0, oy1) = valid_range(ky, pad, stride, h, ho);
            for kx in 0..kw {
                let (ox0, ox1) = valid_range(kx, pad, stride, wd, wo);
                if ox0 >= ox1 {
                    continue;
                }
                for ci in 0..cin {
                    let wv = wdat[((co * cin + ci) * kh + ky) * kw + kx];
                    let xc = &xb[ci * plane_in..(ci + 1) * plane_in];
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &xc[iy * wd..(iy + 1) * wd];
                        let dst = &mut acc[oy * wo + ox0..oy * wo + ox1];
                        if stride == 1 {
                            let src = &row[ox0 + kx - pad..ox1 + kx - pad];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d += wv * row[(ox0 + j) * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            let bv = b.data()[co];
            acc.iter_mut().for_each(|v| *v += bv);
        }
    };

    let work = batch * cout * plane_out * cin * kh * kw;
    if work >= PAR_CONV_WORK && batch * cout > 1 {
        out.par_chunks_mut(plane_out)
            .enumerate()
            .for_each(|(idx, acc)| compute_plane(idx, acc));
    } else {
        out.chunks_mut(plane_out)
            .enumerate()
            .for_each(|(idx, acc)| compute_plane(idx, acc));
    }
    Tensor::new(vec![batch, cout, ho, wo], out)
}

/// Rotates the last two axes by `quarter_turns · 90°` counter-clockwise.
///
/// Odd turns on a non-square trailing plane swap its extents.
pub fn rot90(x: &Tensor, quarter_turns: i64) -> Result<Tensor> {
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::Rank {
            op: "rot90",
            expected: 2,
            shape: x.shape().to_vec(),
        });
    }
    let turns = quarter_turns.rem_euclid(4);
    if turns == 0 {
        return Ok(x.clone());
    }
    let (h, w) = (x.shape[rank - 2], x.shape[rank - 1]);
    let lead: usize = x.shape[..rank - 2].iter().product();
    let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Vec::with_capacity(x.len());
    for p in 0..lead {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let (si, sj) = match turns {
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                out.push(src[si * w + sj]);
            }
        }
    }
    let mut shape = x.shape.clone();
    shape[rank - 2] = oh;
    shape[rank - 1] = ow;
    Tensor::new(shape, out)
}

/// Spatial mean: `[B,C,H,W] -> [B,C,1,1]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4("global_avg_pool")?;
    let plane = h * w;
    let data = x
        .data
        .chunks(plane)
        .map(|p| p.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![b, c, 1, 1], data)
}

/// Nearest-neighbour 2× upsampling: each pixel becomes a 2×2 block.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4("upsample_nearest2x")?;
    let mut out = Vec::with_capacity(x.len() * 4);
    for plane in x.data.chunks(h * w) {
        for i in 0..2 * h {
            let row = &plane[(i / 2) * w..(i / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::new(vec![b, c, 2 * h, 2 * w], out)
}

/// 2×2 mean pooling with stride 2; requires even spatial extents.
pub fn avg_pool2x2(x: &Tensor) -> Result<Tensor> {
    let [b, c, h, w] = x.dims4("avg_pool2x2")?;
    for (axis, extent) in [(2, h), (3, w)] {
        if extent % 2 != 0 {
            return Err(Error::Dimension {
                op: "avg_pool2x2",
                axis,
                expected: extent + 1,
                found: extent,
            });
        }
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.data.chunks(h * w) {
        for i in 0..oh {
            for j in 0..ow {
                let top = 2 * i * w + 2 * j;
                let s = plane[top] + plane[top + 1] + plane[top + w] + plane[top + w + 1];
                out.push(0.25 * s);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

/// Shape of `op(a, b)` under spatial broadcasting: ranks must agree and
/// extents may differ only on axes ≥ 2, where one side must be 1.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let fail = || Error::Broadcast {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(fail());
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(axis, (&da, &db))| match (da, db) {
            _ if da == db => Ok(da),
            (1, _) | (_, 1) if axis >= 2 => Ok(da.max(db)),
            _ => Err(fail()),
        })
        .collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Flat source index in `src` for every element of `out_shape`, treating
/// size-1 axes of `src` as broadcast.
pub(crate) fn broadcast_index(src: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let src_strides: Vec<usize> = strides(src)
        .into_iter()
        .zip(src)
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect();
    let numel: usize = out_shape.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(numel);
    for _ in 0..numel {
        out.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for axis in (0..out_shape.len()).rev() {
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
    out
}

fn binary(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape.clone(), data);
    }
    let shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let ia = broadcast_index(&a.shape, &shape);
    let ib = broadcast_index(&b.shape, &shape);
    let data = ia
        .iter()
        .zip(&ib)
        .map(|(&i, &j)| f(a.data[i], b.data[j]))
        .collect();
    Tensor::new(shape, data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid_scalar(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// `scale · x + shift`.
pub fn affine(x: &Tensor, scale: f64, shift: f64) -> Tensor {
    x.map(|v| scale * v + shift)
}

/// Per-element normalization group for batchnorm: elements share a group
/// when they agree on every axis outside `reduce_axes`.
#[derive(Clone, Debug)]
pub(crate) struct NormGroups {
    pub group_of: Vec<usize>,
    pub channel_of_group: Vec<usize>,
    pub count: usize,
}

impl NormGroups {
    pub fn new(shape: &[usize], reduce_axes: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::Rank {
                op: "batchnorm",
                expected: 2,
                shape: shape.to_vec(),
            });
        }
        if reduce_axes.contains(&1) {
            return Err(Error::invalid("batchnorm: reduce axes must exclude the channel axis"));
        }
        if let Some(&a) = reduce_axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::invalid(format!(
                "batchnorm: reduce axis {a} out of range for rank {}",
                shape.len()
            )));
        }
        let keep: Vec<usize> = (0..shape.len()).filter(|a| !reduce_axes.contains(a)).collect();
        let keep_shape: Vec<usize> = keep.iter().map(|&a| shape[a]).collect();
        let keep_strides = strides(&keep_shape);
        let groups: usize = keep_shape.iter().product();
        let count: usize = shape.iter().product::<usize>() / groups;
        if count < 2 {
            return Err(Error::DegenerateStatistics {
                shape: shape.to_vec(),
                axes: reduce_axes.to_vec(),
            });
        }
        let chan_pos = keep.iter().position(|&a| a == 1).expect("channel axis kept");
        let channel_of_group = (0..groups)
            .map(|g| (g / keep_strides[chan_pos]) % keep_shape[chan_pos])
            .collect();

        let numel: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut group_of = Vec::with_capacity(numel);
        for _ in 0..numel {
            group_of.push(keep.iter().zip(&keep_strides).map(|(&a, s)| idx[a] * s).sum());
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Ok(Self {
            group_of,
            channel_of_group,
            count,
        })
    }

    pub fn groups(&self) -> usize {
        self.channel_of_group.len()
    }
}

/// Normalized values and per-group inverse standard deviations, kept for
/// differentiation.
#[derive(Clone, Debug)]
pub(crate) struct BatchNormOutput {
    pub output: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub groups: NormGroups,
}

pub(crate) fn batchnorm_full(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    reduce_axes: &[usize],
) -> Result<BatchNormOutput> {
    if eps <= 0.0 {
        return Err(Error::invalid(format!("batchnorm: eps must be positive, got {eps}")));
    }
    let groups = NormGroups::new(x.shape(), reduce_axes)?;
    let c = x.shape[1];
    for (name, t) in [("batchnorm gamma", gamma), ("batchnorm beta", beta)] {
        if t.shape() != [c] {
            return Err(Error::Dimension {
                op: name,
                axis: 0,
                expected: c,
                found: t.shape().first().copied().unwrap_or(0),
            });
        }
    }
    let ng = groups.groups();
    let n = groups.count as f64;
    let mut mean = vec![0.0; ng];
    for (v, &g) in x.data.iter().zip(&groups.group_of) {
        mean[g] += v;
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; ng];
    for (v, &g) in x.data.iter().zip(&groups.group_of) {
        let d = v - mean[g];
        var[g] += d * d;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / n + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for (v, &g) in x.data.iter().zip(&groups.group_of) {
        let ch = groups.channel_of_group[g];
        let xh = (v - mean[g]) * inv_std[g];
        xhat.push(xh);
        out.push(xh * gamma.data[ch] + beta.data[ch]);
    }
    Ok(BatchNormOutput {
        output: Tensor::new(x.shape.clone(), out)?,
        xhat: Tensor::new(x.shape.clone(), xhat)?,
        inv_std,
        groups,
    })
}

/// Batch normalization over `reduce_axes` with per-channel (axis 1) affine
/// parameters. Statistics use the biased variance of the provided values.
pub fn batchnorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    reduce_axes: &[usize],
) -> Result<Tensor> {
    batchnorm_full(x, gamma, beta, eps, reduce_axes).map(|o| o.output)
}

pub const BN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Six nested loops, zero padding explicit.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let [bn, cin, h, wd] = x.dims4("t").unwrap();
        let [cout, _, kh, kw] = w.dims4("t").unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[bn, cout, ho, wo]);
        for n in 0..bn {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += w.data()[((co * cin + ci) * kh + ky) * kw + kx]
                                        * x.data()[((n * cin + ci) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((n * cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn new_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn conv_zero_input_is_zero() {
        let mut rng = Rng::new(0);
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let w = Tensor::uniform(&[2, 1, 3, 3], -1.0, 1.0, &mut rng);
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[2])), 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = Rng::new(1);
        let x = Tensor::uniform(&[2, 1, 5, 4], -1.0, 1.0, &mut rng);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = Rng::new(2);
        for (stride, pad, hw) in [(1, 1, 5), (2, 1, 5), (1, 0, 5), (2, 1, 6), (1, 2, 3)] {
            let x = Tensor::uniform(&[1, 2, hw, hw], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
            let got = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let want = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn conv_large_parallel_path_matches_naive() {
        let mut rng = Rng::new(3);
        let x = Tensor::uniform(&[2, 6, 12, 12], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[8, 6, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[8], -1.0, 1.0, &mut rng);
        let got = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        assert!(got.max_abs_diff(&naive_conv(&x, &w, &b, 1, 1)).unwrap() <= 1e-12);
    }

    #[test]
    fn conv_errors_name_axis() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        match conv2d(&x, &w, None, 1, 1) {
            Err(Error::Dimension { axis: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 2, 2]), None, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), None, 3, 1).is_err());
    }

    #[test]
    fn rot90_counter_clockwise() {
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rot90(&x, 1).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
        assert_eq!(rot90(&x, 0).unwrap(), x);
        assert_eq!(rot90(&x, 4).unwrap(), x);
        assert_eq!(rot90(&x, -1).unwrap(), rot90(&x, 3).unwrap());
    }

    #[test]
    fn rot90_composition_law() {
        let mut rng = Rng::new(4);
        let x = Tensor::uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng);
        for a in 0..4 {
            for b in 0..4 {
                let lhs = rot90(&rot90(&x, a).unwrap(), b).unwrap();
                assert_eq!(lhs, rot90(&x, (a + b) % 4).unwrap());
            }
        }
    }

    #[test]
    fn rot90_non_square_swaps_extents() {
        let x = Tensor::iota(&[1, 2, 3]);
        let r = rot90(&x, 1).unwrap();
        assert_eq!(r.shape(), &[1, 3, 2]);
        assert_eq!(rot90(&r, 3).unwrap(), x);
    }

    #[test]
    fn gap_values_and_invariance() {
        let c = Tensor::full(&[1, 2, 3, 3], 1.5);
        assert!(global_avg_pool(&c).unwrap().data().iter().all(|&v| v == 1.5));
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let mut rng = Rng::new(5);
        let x = Tensor::uniform(&[2, 3, 6, 6], -1.0, 1.0, &mut rng);
        let p = global_avg_pool(&x).unwrap();
        for k in 1..4 {
            let q = global_avg_pool(&rot90(&x, k).unwrap()).unwrap();
            assert!(p.max_abs_diff(&q).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn upsample_blocks_and_commutes() {
        let one = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(upsample_nearest2x(&one).unwrap().data(), &[1.0; 4]);
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let up = upsample_nearest2x(&x).unwrap();
        assert_eq!(
            up.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let mut rng = Rng::new(6);
        let x = Tensor::uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
        for k in 0..4 {
            let a = upsample_nearest2x(&rot90(&x, k).unwrap()).unwrap();
            let b = rot90(&upsample_nearest2x(&x).unwrap(), k).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn avg_pool_values() {
        let x = Tensor::iota(&[1, 1, 2, 4]);
        assert_eq!(avg_pool2x2(&x).unwrap().data(), &[2.5, 4.5]);
        assert!(avg_pool2x2(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn elementwise_basics() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(relu(&t(&[2], &[-3.0, 3.0])).data(), &[0.0, 3.0]);
        let mut rng = Rng::new(7);
        let x = Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        assert_eq!(add(&x, &Tensor::zeros(x.shape())).unwrap(), x);
        assert!(sigmoid_scalar(-800.0).is_finite() && sigmoid_scalar(800.0) == 1.0);
        assert_eq!(affine(&t(&[1], &[2.0]), -1.0, 1.0).data(), &[-1.0]);
    }

    #[test]
    fn broadcast_over_spatial_only() {
        let x = Tensor::iota(&[1, 2, 2, 2]);
        let g = t(&[1, 2, 1, 1], &[10.0, 100.0]);
        let y = mul(&x, &g).unwrap();
        assert_eq!(y.data(), &[0., 10., 20., 30., 400., 500., 600., 700.]);
        assert_eq!(add(&g, &x).unwrap().shape(), &[1, 2, 2, 2]);
        assert!(matches!(
            add(&x, &Tensor::zeros(&[1, 1, 2, 2])),
            Err(Error::Broadcast { .. })
        ));
    }

    #[test]
    fn batchnorm_cases() {
        let ones = Tensor::full(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let c = Tensor::full(&[3, 2, 2, 2], 4.0);
        let y = batchnorm(&c, &ones, &zeros, BN_EPS, &[0, 2, 3]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = Rng::new(8);
        let x = Tensor::uniform(&[3, 2, 4, 4], -2.0, 5.0, &mut rng);
        let beta = t(&[2], &[0.3, -0.7]);
        let y = batchnorm(&x, &zeros, &beta, BN_EPS, &[0, 2, 3]).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, beta.data()[(i / 16) % 2]);
        }

        let gamma = t(&[2], &[1.3, 0.4]);
        let y = batchnorm(&x, &gamma, &zeros, BN_EPS, &[0, 2, 3]).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.data()[(b * 2 + ch) * 16..(b * 2 + ch + 1) * 16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-10);
        }
        let r = batchnorm(&rot90(&x, 1).unwrap(), &gamma, &zeros, BN_EPS, &[0, 2, 3]).unwrap();
        assert!(r.max_abs_diff(&rot90(&y, 1).unwrap()).unwrap() <= 1e-12);
    }

    #[test]
    fn batchnorm_errors() {
        let g = Tensor::full(&[2], 1.0);
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            batchnorm(&x, &g, &g, BN_EPS, &[0]),
            Err(Error::DegenerateStatistics { .. })
        ));
        assert!(batchnorm(&Tensor::zeros(&[2, 2]), &g, &g, BN_EPS, &[1]).is_err());
        assert!(batchnorm(&Tensor::zeros(&[2, 2]), &g, &g, 0.0, &[0]).is_err());
    }

    #[test]
    fn valid_range_edges() {
        // k=0, pad=1, stride=1 over 4 -> output 0 reads -1 (invalid)
        assert_eq!(valid_range(0, 1, 1, 4, 4), (1, 4));
        assert_eq!(valid_range(2, 1, 1, 4, 4), (0, 3));
        assert_eq!(valid_range(0, 1, 2, 5, 3), (1, 3));
    }
}
