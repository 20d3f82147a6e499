//! Reference evaluations written as plain index loops.
//!
//! Nothing here goes through the tape, the weight expansion or the im2col-free
//! convolution kernel used by the modules; the loops follow the defining sums
//! term by term so they can serve as an independent check.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, BN_EPS};

/// `(u, v)` of a `k×k` kernel after `q` counter-clockwise quarter turns,
/// expressed as the source index: `rot[u][v] = src[su][sv]`.
fn rotated_source(u: usize, v: usize, k: usize, q: usize) -> (usize, usize) {
    let (mut a, mut b) = (u, v);
    for _ in 0..q % 4 {
        // One turn: rot[u][v] = src[v][k-1-u].
        (a, b) = (b, k - 1 - a);
    }
    (a, b)
}

/// One stage of conv blocks:
/// `CB_i[b, o] = Σ_n Σ_c bank[(n − i) mod N, o, c] · F(n)[b, c]`.
pub fn conv_blocks(inputs: &[Tensor], bank: &Tensor) -> Result<Vec<Tensor>> {
    let &[n, out, inp] = bank.shape() else {
        return Err(Error::invalid("oracle conv_blocks: bank must be [N, out, in]"));
    };
    if inputs.len() != n {
        return Err(Error::invalid("oracle conv_blocks: need one input per orientation"));
    }
    let batch = inputs[0].shape()[0];
    for f in inputs {
        if f.shape() != [batch, inp] {
            return Err(Error::invalid("oracle conv_blocks: inputs must be [B, in]"));
        }
    }
    let w = |j: usize, o: usize, c: usize| bank.data()[(j * out + o) * inp + c];
    let mut blocks = Vec::with_capacity(n);
    for i in 0..n {
        let mut cb = vec![0.0; batch * out];
        for (m, f) in inputs.iter().enumerate() {
            let j = (m + n - i) % n;
            for b in 0..batch {
                for o in 0..out {
                    for c in 0..inp {
                        cb[b * out + o] += w(j, o, c) * f.data()[b * inp + c];
                    }
                }
            }
        }
        blocks.push(Tensor::new(vec![batch, out], cb)?);
    }
    Ok(blocks)
}

/// Full channel-attention logits of a `[B, K·N, H, W]` map, `[B, K·N]`:
/// squeeze, stage a, batchnorm over batch and orientation, ReLU, stage b.
pub fn reca_logits(x: &Tensor, n: usize, w_a: &Tensor, w_b: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let &[batch, c, h, w] = x.shape() else {
        return Err(Error::invalid("oracle reca_logits: input must be rank 4"));
    };
    let k = c / n;
    let hw = (h * w) as f64;
    let squeezed: Vec<Tensor> = (0..n)
        .map(|m| {
            let mut f = vec![0.0; batch * k];
            for b in 0..batch {
                for kc in 0..k {
                    let ch = kc * n + m;
                    let base = (b * c + ch) * h * w;
                    f[b * k + kc] = x.data()[base..base + h * w].iter().sum::<f64>() / hw;
                }
            }
            Tensor::new(vec![batch, k], f)
        })
        .collect::<Result<_>>()?;
    let a = conv_blocks(&squeezed, w_a)?;
    let hidden = w_a.shape()[1];
    let count = (batch * n) as f64;
    let mut normed: Vec<Vec<f64>> = a.iter().map(|t| t.data().to_vec()).collect();
    for j in 0..hidden {
        let mut mean = 0.0;
        for blk in &a {
            for b in 0..batch {
                mean += blk.data()[b * hidden + j];
            }
        }
        mean /= count;
        let mut var = 0.0;
        for blk in &a {
            for b in 0..batch {
                let d = blk.data()[b * hidden + j] - mean;
                var += d * d;
            }
        }
        var /= count;
        let scale = gamma.data()[j] / (var + BN_EPS).sqrt();
        for (i, blk) in a.iter().enumerate() {
            for b in 0..batch {
                let v = (blk.data()[b * hidden + j] - mean) * scale + beta.data()[j];
                normed[i][b * hidden + j] = v.max(0.0);
            }
        }
    }
    let normed: Vec<Tensor> = normed
        .into_iter()
        .map(|d| Tensor::new(vec![batch, hidden], d))
        .collect::<Result<_>>()?;
    let logits = conv_blocks(&normed, w_b)?;
    let mut out = vec![0.0; batch * c];
    for (i, blk) in logits.iter().enumerate() {
        for b in 0..batch {
            for kc in 0..k {
                out[b * c + kc * n + i] = blk.data()[b * k + kc];
            }
        }
    }
    Tensor::new(vec![batch, c], out)
}

/// Regular group convolution, zero padded to keep the spatial size:
///
/// ```text
/// y[b, o·N+i, p, q] = bias[o]
///     + Σ_c Σ_m Σ_u Σ_v rot_i(weight[o, c, (m − i) mod N])[u, v] · x[b, c·N+m, p+u−r, q+v−r]
/// ```
///
/// with `r = (k − 1)/2`. Stride 2 averages each 2×2 block of the stride-1
/// result.
pub fn group_conv(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let &[k_out, k_in, n, kh, kw] = weight.shape() else {
        return Err(Error::invalid("oracle group_conv: weight must be rank 5"));
    };
    let &[batch, c, h, w] = x.shape() else {
        return Err(Error::invalid("oracle group_conv: input must be rank 4"));
    };
    if kh != kw || kh % 2 == 0 || c != k_in * n {
        return Err(Error::invalid("oracle group_conv: incompatible shapes"));
    }
    let k = kh;
    let r = (k - 1) / 2;
    let quarter = 4 / n;
    let xat = |b: usize, ch: usize, p: isize, q: isize| -> f64 {
        if p < 0 || q < 0 || p >= h as isize || q >= w as isize {
            0.0
        } else {
            x.data()[((b * c + ch) * h + p as usize) * w + q as usize]
        }
    };
    let wat = |o: usize, ci: usize, j: usize, u: usize, v: usize| -> f64 {
        weight.data()[(((o * k_in + ci) * n + j) * k + u) * k + v]
    };
    let cout = k_out * n;
    let mut y = vec![0.0; batch * cout * h * w];
    for b in 0..batch {
        for o in 0..k_out {
            for i in 0..n {
                for p in 0..h {
                    for q in 0..w {
                        let mut acc = bias.data()[o];
                        for ci in 0..k_in {
                            for m in 0..n {
                                let j = (m + n - i) % n;
                                for u in 0..k {
                                    for v in 0..k {
                                        let (su, sv) = rotated_source(u, v, k, i * quarter);
                                        let pp = p as isize + u as isize - r as isize;
                                        let qq = q as isize + v as isize - r as isize;
                                        acc += wat(o, ci, j, su, sv) * xat(b, ci * n + m, pp, qq);
                                    }
                                }
                            }
                        }
                        y[((b * cout + o * n + i) * h + p) * w + q] = acc;
                    }
                }
            }
        }
    }
    let full = Tensor::new(vec![batch, cout, h, w], y)?;
    match stride {
        1 => Ok(full),
        2 => mean_pool2(&full),
        _ => Err(Error::invalid("oracle group_conv: stride must be 1 or 2")),
    }
}

/// Lifting convolution: `y[b, o·N+i] = bias[o] + Σ_c rot_i(weight[o, c]) ⋆ x[b, c]`.
pub fn lift_conv(x: &Tensor, weight: &Tensor, bias: &Tensor, n: usize) -> Result<Tensor> {
    let &[k_out, c_in, k, _] = weight.shape() else {
        return Err(Error::invalid("oracle lift_conv: weight must be rank 4"));
    };
    let &[batch, c, h, w] = x.shape() else {
        return Err(Error::invalid("oracle lift_conv: input must be rank 4"));
    };
    if c != c_in {
        return Err(Error::invalid("oracle lift_conv: channel mismatch"));
    }
    let r = (k - 1) / 2;
    let quarter = 4 / n;
    let cout = k_out * n;
    let mut y = vec![0.0; batch * cout * h * w];
    for b in 0..batch {
        for o in 0..k_out {
            for i in 0..n {
                for p in 0..h {
                    for q in 0..w {
                        let mut acc = bias.data()[o];
                        for ci in 0..c_in {
                            for u in 0..k {
                                for v in 0..k {
                                    let pp = p as isize + u as isize - r as isize;
                                    let qq = q as isize + v as isize - r as isize;
                                    if pp < 0 || qq < 0 || pp >= h as isize || qq >= w as isize {
                                        continue;
                                    }
                                    let (su, sv) = rotated_source(u, v, k, i * quarter);
                                    let wv = weight.data()[((o * c_in + ci) * k + su) * k + sv];
                                    acc += wv * x.data()[((b * c + ci) * h + pp as usize) * w + qq as usize];
                                }
                            }
                        }
                        y[((b * cout + o * n + i) * h + p) * w + q] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, cout, h, w], y)
}

fn mean_pool2(x: &Tensor) -> Result<Tensor> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::invalid("oracle pool: input must be rank 4"));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("oracle pool: odd extent"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut y = vec![0.0; b * c * ho * wo];
    for bc in 0..b * c {
        for p in 0..ho {
            for q in 0..wo {
                let at = |dp: usize, dq: usize| x.data()[(bc * h + 2 * p + dp) * w + 2 * q + dq];
                y[(bc * ho + p) * wo + q] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_index_matches_hand_example() {
        // [[1,2],[3,4]] turned once counter-clockwise is [[2,4],[1,3]].
        let src = [[1, 2], [3, 4]];
        let got: Vec<i32> = (0..4)
            .map(|t| {
                let (a, b) = rotated_source(t / 2, t % 2, 2, 1);
                src[a][b]
            })
            .collect();
        assert_eq!(got, vec![2, 4, 1, 3]);
        assert_eq!(rotated_source(0, 1, 3, 4), (0, 1));
    }

    #[test]
    fn single_orientation_blocks_are_a_matmul() {
        let f = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let bank = Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(conv_blocks(&[f], &bank).unwrap()[0].data(), &[11.0]);
    }

    #[test]
    fn identity_kernel_copies_orientation_zero() {
        let x = Tensor::iota(&[1, 4, 2, 2]);
        let w = Tensor::from_fn(&[1, 1, 4, 1, 1], |i| if i == 0 { 1.0 } else { 0.0 });
        let y = group_conv(&x, &w, &Tensor::zeros(&[1]), 1).unwrap();
        // Output orientation i reads input orientation m with (m − i) mod 4 = 0.
        assert_eq!(y, x);
    }
}
