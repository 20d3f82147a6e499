use rayon::prelude::*;
use serde::Serialize;

use super::config::HarnessConfig;
use crate::error::{Error, Result};
use crate::groupequiv::{g_act, quarter_turns, ReFeatureMap};
use crate::pyramid::{build_pyramid, toy_backbone, PyramidConfig, PyramidParams, Variant};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{rot90, Tensor};

const TAG_TRIAL: u64 = 0x7121;
const TAG_INPUT: u64 = 0x1A9;
const TAG_RESEED: u64 = 0x5EED;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialResiduals {
    pub trial: usize,
    /// Seed of the draw the residuals come from (after any reseeding).
    pub seed: u64,
    pub reseeds: usize,
    /// `[level][group element]` relative Frobenius residuals.
    pub residuals: Vec<Vec<f64>>,
    pub max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub label: &'static str,
    /// Whether the variant is expected to commute with the group action.
    pub expect_equivariant: bool,
    pub trials: Vec<TrialResiduals>,
    pub max_residual: f64,
    /// Smallest per-trial worst case; what a breakage claim rests on.
    pub min_trial_max: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivarianceReport {
    pub orientations: usize,
    pub levels: usize,
    pub input_shape: Vec<usize>,
    pub pass_threshold: f64,
    pub broken_threshold: f64,
    pub variants: Vec<VariantReport>,
}

impl EquivarianceReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

/// `[level][s]` residuals `‖P(rot_s x) − g_s·P(x)‖ / ‖g_s·P(x)‖` for every
/// group element, given the pyramid at the identity and at each rotation.
fn residual_table(outputs: &[Vec<ReFeatureMap>]) -> Result<Vec<Vec<f64>>> {
    let n = outputs.len();
    let levels = outputs[0].len();
    let mut table = vec![vec![0.0; n]; levels];
    for (s, rotated) in outputs.iter().enumerate() {
        for (l, (got, base)) in rotated.iter().zip(&outputs[0]).enumerate() {
            let expect = g_act(base, s)?;
            let r = got.tensor().relative_residual(expect.tensor())?;
            if !r.is_finite() {
                return Err(Error::NonFinite(format!("equivariance residual at level {l}, element {s}")));
            }
            table[l][s] = r;
        }
    }
    Ok(table)
}

fn rotated_inputs(x: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    (0..n).map(|s| rot90(x, quarter_turns(n, s))).collect()
}

fn trial_input(cfg: &HarnessConfig, seed: u64) -> Tensor {
    let s = cfg.input.size;
    Tensor::uniform(
        &[cfg.input.batch, cfg.pyramid.in_channels, s, s],
        -1.0,
        1.0,
        &mut Rng::new(derive_seed(seed, TAG_INPUT)),
    )
}

fn variant_config(cfg: &HarnessConfig, variant: Variant, seed: u64) -> PyramidConfig {
    PyramidConfig {
        variant,
        seed,
        ..cfg.pyramid.clone()
    }
}

/// Residual table of one variant on one draw, computing everything from
/// scratch.
fn standalone_table(cfg: &HarnessConfig, variant: Variant, seed: u64) -> Result<Vec<Vec<f64>>> {
    let p = PyramidParams::init(&variant_config(cfg, variant, seed))?;
    let outs = rotated_inputs(&trial_input(cfg, seed), cfg.pyramid.orientations)?
        .iter()
        .map(|x| p.forward(x).map(|o| o.pyramid))
        .collect::<Result<Vec<_>>>()?;
    residual_table(&outs)
}

fn table_max(t: &[Vec<f64>]) -> f64 {
    t.iter().flatten().fold(0.0, |a, &b| a.max(b))
}

/// Every variant on `trials` independent draws. Variants built from the
/// same trial seed share backbone and neck weights, so the backbone runs
/// once per rotated input and trial.
pub fn equivariance_matrix(cfg: &HarnessConfig) -> Result<EquivarianceReport> {
    cfg.validate()?;
    let n = cfg.pyramid.orientations;
    let th = &cfg.thresholds;
    let mut per_variant: Vec<Vec<TrialResiduals>> = vec![Vec::with_capacity(cfg.trials); Variant::ALL.len()];

    for trial in 0..cfg.trials {
        let seed = derive_seed(cfg.seed, TAG_TRIAL + trial as u64);
        let inputs = rotated_inputs(&trial_input(cfg, seed), n)?;
        let shared = PyramidParams::init(&variant_config(cfg, Variant::Baseline, seed))?;
        let feats = inputs
            .par_iter()
            .map(|x| toy_backbone(x, &shared))
            .collect::<Result<Vec<_>>>()?;

        let tables = Variant::ALL
            .par_iter()
            .map(|&v| {
                let p = PyramidParams::init(&variant_config(cfg, v, seed))?;
                let outs = feats
                    .iter()
                    .map(|f| build_pyramid(f, &p, v))
                    .collect::<Result<Vec<_>>>()?;
                residual_table(&outs)
            })
            .collect::<Result<Vec<_>>>()?;

        for (vi, (&v, table)) in Variant::ALL.iter().zip(tables).enumerate() {
            let mut result = TrialResiduals {
                trial,
                seed,
                reseeds: 0,
                max: table_max(&table),
                residuals: table,
            };
            let must_break = n > 1 && !v.is_equivariant();
            while must_break && result.max < th.broken && result.reseeds < cfg.max_reseeds {
                let reseed = derive_seed(seed, TAG_RESEED + result.reseeds as u64);
                let table = standalone_table(cfg, v, reseed)?;
                result = TrialResiduals {
                    trial,
                    seed: reseed,
                    reseeds: result.reseeds + 1,
                    max: table_max(&table),
                    residuals: table,
                };
            }
            per_variant[vi].push(result);
        }
    }

    let variants = Variant::ALL
        .iter()
        .zip(per_variant)
        .map(|(&v, trials)| {
            let expect_equivariant = n == 1 || v.is_equivariant();
            let max_residual = trials.iter().fold(0.0, |a: f64, t| a.max(t.max));
            let min_trial_max = trials.iter().fold(f64::INFINITY, |a: f64, t| a.min(t.max));
            let verdict = if expect_equivariant {
                if max_residual <= th.equivariant {
                    Verdict::Pass
                } else {
                    Verdict::Fail
                }
            } else if min_trial_max >= th.broken {
                Verdict::Pass
            } else {
                Verdict::Inconclusive
            };
            VariantReport {
                variant: v,
                label: v.label(),
                expect_equivariant,
                trials,
                max_residual,
                min_trial_max,
                verdict,
            }
        })
        .collect();

    let s = cfg.input.size;
    Ok(EquivarianceReport {
        orientations: n,
        levels: cfg.pyramid.levels,
        input_shape: vec![cfg.input.batch, cfg.pyramid.in_channels, s, s],
        pass_threshold: th.equivariant,
        broken_threshold: th.broken,
        variants,
    })
}
