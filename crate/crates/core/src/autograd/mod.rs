//! Reverse-mode differentiation.
//!
//! Every network in this crate is written against [`Tape`]: plain forward
//! passes record onto a throwaway tape and read the result back, so the
//! values that get differentiated are exactly the values the forward
//! functions return.

mod gradcheck;

pub use gradcheck::{gradcheck, probe_loss, GradcheckOptions, GradcheckReport, Stencil};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, NormGroups, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    /// `out[j] = x[index[j]]`
    Gather {
        x: usize,
        index: Arc<[usize]>,
    },
    Reshape {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Affine {
        x: usize,
        scale: f64,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
        groups: NormGroups,
    },
    GlobalAvgPool {
        x: usize,
    },
    AvgPool2x2 {
        x: usize,
    },
    Sum {
        x: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed primitives with their saved intermediates.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        self.value(v).map(Tensor::shape)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let out = tensor::conv2d(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|b| &self.nodes[b].value),
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x: xi,
                w: wi,
                bias: bi,
                stride,
                pad,
            },
        ))
    }

    /// Records `out[j] = x[index[j]]` with the given output shape.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        let xi = self.idx(x)?;
        let src = self.nodes[xi].value.data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!("gather index {bad} out of range {}", src.len())));
        }
        let out = Tensor::new(shape, index.iter().map(|&i| src[i]).collect())?;
        Ok(self.push(out, Op::Gather { x: xi, index }))
    }

    /// Applies an index-only rearrangement `f` (rotation, replication,
    /// channel shuffle) as a differentiable gather. `f` must move values
    /// without arithmetic; its effect is read off a tensor of indices.
    pub fn rearrange(&mut self, x: Var, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var> {
        let shape = self.shape(x)?.to_vec();
        let (index, out_shape) = index_map(&shape, f)?;
        self.gather(x, index, out_shape)
    }

    pub fn rot90(&mut self, x: Var, quarter_turns: i64) -> Result<Var> {
        self.rearrange(x, |t| tensor::rot90(t, quarter_turns))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        self.rearrange(x, tensor::upsample_nearest2x)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x: xi }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = tensor::add(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(out, Op::Add { a: ai, b: bi }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = tensor::sub(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(out, Op::Sub { a: ai, b: bi }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let out = tensor::mul(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(out, Op::Mul { a: ai, b: bi }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = tensor::relu(&self.nodes[xi].value);
        Ok(self.push(out, Op::Relu { x: xi }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = tensor::sigmoid(&self.nodes[xi].value);
        Ok(self.push(out, Op::Sigmoid { x: xi }))
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = tensor::affine(&self.nodes[xi].value, scale, shift);
        Ok(self.push(out, Op::Affine { x: xi, scale }))
    }

    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, reduce_axes: &[usize]) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let bn = tensor::batchnorm_full(
            &self.nodes[xi].value,
            &self.nodes[gi].value,
            &self.nodes[bi].value,
            eps,
            reduce_axes,
        )?;
        Ok(self.push(
            bn.output,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat: bn.xhat,
                inv_std: bn.inv_std,
                groups: bn.groups,
            },
        ))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = tensor::global_avg_pool(&self.nodes[xi].value)?;
        Ok(self.push(out, Op::GlobalAvgPool { x: xi }))
    }

    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = tensor::avg_pool2x2(&self.nodes[xi].value)?;
        Ok(self.push(out, Op::AvgPool2x2 { x: xi }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = Tensor::scalar(self.nodes[xi].value.sum());
        Ok(self.push(out, Op::Sum { x: xi }))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        self.sum(sq)
    }

    /// Concatenated pre-activation values of every recorded ReLU.
    pub fn relu_inputs(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(self.nodes[x].value.data()),
                _ => None,
            })
            .flatten()
            .copied()
            .collect()
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    /// Ops are visited in exact reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        let lv = &self.nodes[li].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; li + 1];
        grads[li] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for (parent, contribution) in self.local_grads(node, &g)? {
                accumulate(&mut grads[parent], contribution)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let val = |i: usize| &self.nodes[i].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let (gx, gw, gb) = conv2d_backward(val(*x), val(*w), g, *stride, *pad)?;
                let mut v = vec![(*x, gx), (*w, gw)];
                if let Some(b) = bias {
                    v.push((*b, gb));
                }
                v
            }
            Op::Gather { x, index } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                let d = gx.data_mut();
                for (&j, gv) in index.iter().zip(g.data()) {
                    d[j] += gv;
                }
                vec![(*x, gx)]
            }
            Op::Reshape { x } => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Add { a, b } => vec![
                (*a, reduce_to(g, val(*a).shape())?),
                (*b, reduce_to(g, val(*b).shape())?),
            ],
            Op::Sub { a, b } => vec![
                (*a, reduce_to(g, val(*a).shape())?),
                (*b, reduce_to(&g.map(|v| -v), val(*b).shape())?),
            ],
            Op::Mul { a, b } => {
                let ga = tensor::mul(g, val(*b))?;
                let gb = tensor::mul(g, val(*a))?;
                vec![
                    (*a, reduce_to(&ga, val(*a).shape())?),
                    (*b, reduce_to(&gb, val(*b).shape())?),
                ]
            }
            Op::Relu { x } => {
                // subgradient 0 at the kink
                let data = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::Sigmoid { x } => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                vec![(*x, Tensor::new(g.shape().to_vec(), data)?)]
            }
            Op::Affine { x, scale } => vec![(*x, g.map(|v| v * scale))],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                groups,
            } => {
                let gam = val(*gamma).data();
                let nc = gam.len();
                let ng = groups.groups();
                let count = groups.count as f64;
                let mut dgamma = vec![0.0; nc];
                let mut dbeta = vec![0.0; nc];
                let mut sum_dxhat = vec![0.0; ng];
                let mut sum_dxhat_xhat = vec![0.0; ng];
                for ((gv, xh), &grp) in g.data().iter().zip(xhat.data()).zip(&groups.group_of) {
                    let ch = groups.channel_of_group[grp];
                    dgamma[ch] += gv * xh;
                    dbeta[ch] += gv;
                    let dxh = gv * gam[ch];
                    sum_dxhat[grp] += dxh;
                    sum_dxhat_xhat[grp] += dxh * xh;
                }
                let dx: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xhat.data())
                    .zip(&groups.group_of)
                    .map(|((gv, xh), &grp)| {
                        let dxh = gv * gam[groups.channel_of_group[grp]];
                        inv_std[grp] / count * (count * dxh - sum_dxhat[grp] - xh * sum_dxhat_xhat[grp])
                    })
                    .collect();
                vec![
                    (*x, Tensor::new(g.shape().to_vec(), dx)?),
                    (*gamma, Tensor::new(vec![nc], dgamma)?),
                    (*beta, Tensor::new(vec![nc], dbeta)?),
                ]
            }
            Op::GlobalAvgPool { x } => {
                let [_, _, h, w] = val(*x).dims4("global_avg_pool backward")?;
                let inv = 1.0 / (h * w) as f64;
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * inv, h * w))
                    .collect();
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), data)?)]
            }
            Op::AvgPool2x2 { x } => {
                let up = tensor::upsample_nearest2x(g)?;
                vec![(*x, up.map(|v| 0.25 * v))]
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                vec![(*x, Tensor::full(val(*x).shape(), gv))]
            }
        })
    }
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Result<Tensor> {
        let shape = tape.shape(v)?;
        Ok(self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape)))
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) -> Result<()> {
    match slot {
        Some(acc) => {
            if acc.shape() != contribution.shape() {
                return Err(Error::Broadcast {
                    op: "backward accumulate",
                    lhs: acc.shape().to_vec(),
                    rhs: contribution.shape().to_vec(),
                });
            }
            acc.data_mut()
                .iter_mut()
                .zip(contribution.data())
                .for_each(|(a, c)| *a += c);
        }
        None => *slot = Some(contribution),
    }
    Ok(())
}

/// Sums `g` down to a broadcast operand's `shape`.
fn reduce_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    let index = tensor::broadcast_index(shape, g.shape());
    let mut out = Tensor::zeros(shape);
    let d = out.data_mut();
    for (&j, gv) in index.iter().zip(g.data()) {
        d[j] += gv;
    }
    Ok(out)
}

/// Source index for every output element of the pure rearrangement `f`.
pub(crate) fn index_map(
    shape: &[usize],
    f: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<(Arc<[usize]>, Vec<usize>)> {
    let moved = f(&Tensor::iota(shape))?;
    let index: Arc<[usize]> = moved.data().iter().map(|&v| v as usize).collect();
    Ok((index, moved.shape().to_vec()))
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [batch, cin, h, wd] = x.dims4("conv2d backward")?;
    let [cout, _, kh, kw] = w.dims4("conv2d backward")?;
    let [_, _, ho, wo] = g.dims4("conv2d backward")?;
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    {
        let gxd = gx.data_mut();
        for bi in 0..batch {
            for co in 0..cout {
                let gp = &gd[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
                for ci in 0..cin {
                    let xo = (bi * cin + ci) * h * wd;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wdat[((co * cin + ci) * kh + ky) * kw + kx];
                            let mut acc = 0.0;
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..wo {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let gv = gp[oy * wo + ox];
                                    let xi = xo + iy as usize * wd + ix as usize;
                                    acc += gv * xd[xi];
                                    gxd[xi] += gv * wv;
                                }
                            }
                            gw.data_mut()[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
                gb.data_mut()[co] += gp.iter().sum::<f64>();
            }
        }
    }
    Ok((gx, gw, gb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::uniform(&[2, 3], -1.0, 1.0, &mut Rng::new(0)));
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4]));
        let s = tape.sigmoid(x).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        let mut rng = Rng::new(1);
        let xv = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let wv = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let grad = |scale: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(xv.clone());
            let w = tape.leaf(wv.clone());
            let y = tape.conv2d(x, w, None, 1, 1).unwrap();
            let s = tape.sigmoid(y).unwrap();
            let l = tape.sum_squares(s).unwrap();
            let l = tape.affine(l, scale, 0.0).unwrap();
            tape.backward(l).unwrap().get(w).unwrap().clone()
        };
        let g1 = grad(1.0);
        let g3 = grad(-3.0);
        assert!(g3.max_abs_diff(&g1.map(|v| -3.0 * v)).unwrap() <= 1e-12);
    }

    #[test]
    fn shared_leaf_accumulates_once_per_use() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 2.0));
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn errors() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::zeros(&[2]));
        let y = b.leaf(Tensor::zeros(&[2]));
        assert!(matches!(a.backward(x), Err(Error::NonScalarLoss(_))));
        assert!(matches!(a.backward(y), Err(Error::ForeignVar)));
        assert!(matches!(a.add(x, y), Err(Error::ForeignVar)));
    }

    #[test]
    fn broadcast_gradient_reduces() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 3, 3], 1.0));
        let s = tape.leaf(Tensor::full(&[1, 2, 1, 1], 2.0));
        let y = tape.mul(x, s).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[9.0, 9.0]);
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn rearrange_matches_plain_op() {
        let mut rng = Rng::new(2);
        let xv = Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone());
        let r = tape.rot90(x, 1).unwrap();
        assert_eq!(tape.value(r).unwrap(), &tensor::rot90(&xv, 1).unwrap());
        let u = tape.upsample_nearest2x(x).unwrap();
        assert_eq!(tape.value(u).unwrap(), &tensor::upsample_nearest2x(&xv).unwrap());
    }
}
