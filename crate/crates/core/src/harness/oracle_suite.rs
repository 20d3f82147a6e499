use serde::Serialize;

use super::config::HarnessConfig;
use crate::error::Result;
use crate::groupequiv::{group_conv, lift_conv, GroupConvParams, LiftConvParams, ReFeatureMap};
use crate::oracle;
use crate::params::NormParams;
use crate::reca::{conv_block_a, conv_block_b, reca_logits, ReCAParams};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const TAG_ORACLE: u64 = 0x0AC1E;

#[derive(Clone, Debug, Serialize)]
pub struct OracleCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_abs_deviation: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub orientations: usize,
    pub trials: usize,
    pub zero_weights: bool,
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn check(&self, name: &str) -> Option<&OracleCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn max_abs_deviation(&self) -> f64 {
        self.checks.iter().fold(0.0, |a, c| a.max(c.max_abs_deviation))
    }
}

struct Tally {
    name: &'static str,
    instances: usize,
    max: f64,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            instances: 0,
            max: 0.0,
        }
    }

    fn record(&mut self, a: &Tensor, b: &Tensor) -> Result<()> {
        let d = a.max_abs_diff(b)?;
        // A NaN deviation must not vanish inside `max`.
        self.max = if d.is_nan() { f64::NAN } else { self.max.max(d) };
        self.instances += 1;
        Ok(())
    }

    fn finish(self, threshold: f64) -> OracleCheck {
        OracleCheck {
            name: self.name,
            instances: self.instances,
            max_abs_deviation: self.max,
            threshold,
            passed: self.max <= threshold,
        }
    }
}

fn draw(shape: &[usize], zero: bool, rng: &mut Rng) -> Tensor {
    if zero {
        Tensor::zeros(shape)
    } else {
        Tensor::uniform(shape, -1.0, 1.0, rng)
    }
}

fn dim(rng: &mut Rng, max: usize) -> usize {
    1 + rng.below(max)
}

/// Reorders per-orientation blocks so entry `(i + s) mod N` holds block `i`.
fn shift_blocks(blocks: &[Tensor], s: usize) -> Vec<Tensor> {
    let n = blocks.len();
    (0..n).map(|i| blocks[(i + n - s % n) % n].clone()).collect()
}

/// Module implementations against the naive loops on random instances
/// whose every extent is at most `oracle.max_dim`.
pub fn oracle_suite(cfg: &HarnessConfig) -> Result<OracleReport> {
    cfg.validate()?;
    let n = cfg.pyramid.orientations;
    let oc = &cfg.oracle;
    let zero = oc.zero_weights;
    let max = oc.max_dim;
    let mut rng = Rng::new(derive_seed(cfg.seed, TAG_ORACLE));

    let mut block_a = Tally::new("conv_block_a");
    let mut block_b = Tally::new("conv_block_b");
    let mut logits = Tally::new("reca_logits");
    let mut shift_a = Tally::new("shift_covariance_a");
    let mut shift_b = Tally::new("shift_covariance_b");
    let mut gconv = Tally::new("group_conv");
    let mut gconv2 = Tally::new("group_conv_stride2");
    let mut lconv = Tally::new("lift_conv");

    for _ in 0..oc.trials {
        // Conv blocks: K = hidden · r, both within the extent bound.
        let hidden = dim(&mut rng, max);
        let r = dim(&mut rng, max / hidden);
        let k = hidden * r;
        let min_batch = if n == 1 { 2 } else { 1 };
        let batch = min_batch + rng.below(max + 1 - min_batch);
        let norm = NormParams {
            gamma: Tensor::uniform(&[hidden], 0.5, 1.5, &mut rng),
            beta: Tensor::uniform(&[hidden], -0.5, 0.5, &mut rng),
        };
        let p = ReCAParams::new(
            draw(&[n, hidden, k], zero, &mut rng),
            draw(&[n, k, hidden], zero, &mut rng),
            norm,
            r,
        )?;
        let f_squ: Vec<Tensor> = (0..n).map(|_| Tensor::uniform(&[batch, k], -1.0, 1.0, &mut rng)).collect();
        let got_a = conv_block_a(&f_squ, &p)?;
        let want_a = oracle::conv_blocks(&f_squ, &p.w_a)?;
        for (g, w) in got_a.iter().zip(&want_a) {
            block_a.record(g, w)?;
        }
        let mid: Vec<Tensor> = (0..n).map(|_| Tensor::uniform(&[batch, hidden], -1.0, 1.0, &mut rng)).collect();
        let got_b = conv_block_b(&mid, &p)?;
        let want_b = oracle::conv_blocks(&mid, &p.w_b)?;
        for (g, w) in got_b.iter().zip(&want_b) {
            block_b.record(g, w)?;
        }

        // Shifting the orientation submaps by s re-indexes the blocks by s.
        for s in 1..n {
            let shifted_a = conv_block_a(&shift_blocks(&f_squ, s), &p)?;
            for (g, w) in shifted_a.iter().zip(&shift_blocks(&got_a, s)) {
                shift_a.record(g, w)?;
            }
            let shifted_b = conv_block_b(&shift_blocks(&mid, s), &p)?;
            for (g, w) in shifted_b.iter().zip(&shift_blocks(&got_b, s)) {
                shift_b.record(g, w)?;
            }
        }

        let (h, w) = (dim(&mut rng, max), dim(&mut rng, max));
        let x = ReFeatureMap::new(Tensor::uniform(&[batch, k * n, h, w], -1.0, 1.0, &mut rng), n)?;
        let got = reca_logits(&x, &p)?;
        let got = got.reshape(&[batch, k * n])?;
        let want = oracle::reca_logits(x.tensor(), n, &p.w_a, &p.w_b, &p.norm.gamma, &p.norm.beta)?;
        logits.record(&got, &want)?;

        // Group and lifting convolutions.
        let (k_in, k_out) = (dim(&mut rng, max), dim(&mut rng, max));
        let sizes: Vec<usize> = [1, 3, 5].into_iter().filter(|&s| s <= max).collect();
        let ks = sizes[rng.below(sizes.len())];
        let conv = GroupConvParams::new(
            draw(&[k_out, k_in, n, ks, ks], zero, &mut rng),
            draw(&[k_out], zero, &mut rng),
        )?;
        let (h, w) = (dim(&mut rng, max), dim(&mut rng, max));
        let x = ReFeatureMap::new(Tensor::uniform(&[batch, k_in * n, h, w], -1.0, 1.0, &mut rng), n)?;
        let got = group_conv(&x, &conv, 1)?;
        gconv.record(got.tensor(), &oracle::group_conv(x.tensor(), &conv.weight, &conv.bias, 1)?)?;

        let (h2, w2) = (2 * dim(&mut rng, max / 2), 2 * dim(&mut rng, max / 2));
        let x2 = ReFeatureMap::new(Tensor::uniform(&[batch, k_in * n, h2, w2], -1.0, 1.0, &mut rng), n)?;
        let got = group_conv(&x2, &conv, 2)?;
        gconv2.record(got.tensor(), &oracle::group_conv(x2.tensor(), &conv.weight, &conv.bias, 2)?)?;

        let c_in = dim(&mut rng, max);
        let lift = LiftConvParams::new(draw(&[k_out, c_in, ks, ks], zero, &mut rng), draw(&[k_out], zero, &mut rng))?;
        let img = Tensor::uniform(&[batch, c_in, h, w], -1.0, 1.0, &mut rng);
        let got = lift_conv(&img, &lift, n)?;
        lconv.record(got.tensor(), &oracle::lift_conv(&img, &lift.weight, &lift.bias, n)?)?;
    }

    let th = cfg.thresholds.oracle;
    let mut checks: Vec<OracleCheck> = [block_a, block_b, logits]
        .into_iter()
        .map(|t| t.finish(th))
        .collect();
    if n > 1 {
        checks.push(shift_a.finish(th));
        checks.push(shift_b.finish(th));
    }
    checks.extend([gconv, gconv2, lconv].into_iter().map(|t| t.finish(th)));
    Ok(OracleReport {
        orientations: n,
        trials: oc.trials,
        zero_weights: zero,
        checks,
    })
}
