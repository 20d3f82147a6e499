use serde::{Deserialize, Serialize};

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Central-difference rule for the numeric derivative at step `h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation error O(h²).
    ThreePoint,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, truncation
    /// error O(h⁴). Batch statistics over a handful of samples give the loss
    /// enough curvature that the three-point rule alone is off by more than
    /// 1e-6 at h = 1e-5.
    #[default]
    FivePoint,
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step; must lie in `[1e-7, 1e-3]`.
    pub h: f64,
    pub stencil: Stencil,
    pub tol: f64,
    /// Coordinates sampled per input tensor (all of them when fewer).
    pub coords_per_input: usize,
    /// ReLU inputs closer than this to zero mark the coordinate as a kink.
    pub kink_margin: f64,
    /// Denominator floor of the relative error, multiplied by `max(1, |L|)`
    /// at the base point: rounding in `L(x ± h)` grows with `|L|`, and the
    /// floor keeps near-zero gradient entries from turning it into a large
    /// relative error.
    pub scale_floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            stencil: Stencil::FivePoint,
            tol: 1e-6,
            coords_per_input: 50,
            kink_margin: 1e-6,
            scale_floor: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub name: String,
    pub coords_checked: usize,
    pub kinks_excluded: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tol: f64,
    pub passed: bool,
}

struct Eval {
    loss: f64,
    relu_inputs: Vec<f64>,
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<Eval>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let lv = tape.value(loss)?;
    let loss = lv.item().ok_or_else(|| Error::NonScalarLoss(lv.shape().to_vec()))?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("gradcheck loss".into()));
    }
    Ok(Eval {
        loss,
        relu_inputs: tape.relu_inputs(),
    })
}

/// True when some ReLU input changes sign between the base point and a
/// probe, or moves while lying within `margin` of zero.
fn crosses_kink(base: &[f64], probes: &[&Eval], margin: f64) -> bool {
    base.iter().enumerate().any(|(i, &b)| {
        probes.iter().any(|e| {
            let p = e.relu_inputs[i];
            (p > 0.0) != (b > 0.0) || (p != b && b.abs().min(p.abs()) < margin)
        })
    })
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central finite differences at `inputs`.
pub fn gradcheck<F>(name: &str, inputs: &[Tensor], f: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.h) {
        return Err(Error::invalid(format!("gradcheck: h={} outside [1e-7, 1e-3]", opts.h)));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base_loss = tape.value(loss)?.item().unwrap_or(0.0);
    let floor = opts.scale_floor * base_loss.abs().max(1.0);
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect::<Result<_>>()?;
    if analytic.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite(format!("{name}: analytic gradient")));
    }
    let base_relu = tape.relu_inputs();
    drop(tape);

    let mut rng = Rng::new(opts.seed);
    let mut report = GradcheckReport {
        name: name.to_owned(),
        coords_checked: 0,
        kinks_excluded: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        tol: opts.tol,
        passed: true,
    };
    let mut point = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for coord in sample_coords(grad.len(), opts.coords_per_input, &mut rng) {
            let orig = point[ti].data()[coord];
            let steps: &[f64] = match opts.stencil {
                Stencil::ThreePoint => &[1.0, -1.0],
                Stencil::FivePoint => &[1.0, -1.0, 2.0, -2.0],
            };
            let mut evals = Vec::with_capacity(steps.len());
            for &m in steps {
                point[ti].data_mut()[coord] = orig + m * opts.h;
                evals.push(evaluate(&f, &point)?);
            }
            point[ti].data_mut()[coord] = orig;

            let probes: Vec<&Eval> = evals.iter().collect();
            if crosses_kink(&base_relu, &probes, opts.kink_margin) {
                report.kinks_excluded += 1;
                continue;
            }
            let d1 = evals[0].loss - evals[1].loss;
            let numeric = match opts.stencil {
                Stencil::ThreePoint => d1 / (2.0 * opts.h),
                Stencil::FivePoint => (8.0 * d1 - (evals[2].loss - evals[3].loss)) / (12.0 * opts.h),
            };
            let a = grad.data()[coord];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.coords_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}

fn sample_coords(len: usize, want: usize, rng: &mut Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    if len <= want {
        return all;
    }
    for i in 0..want {
        let j = i + rng.below(len - i);
        all.swap(i, j);
    }
    all.truncate(want);
    all.sort_unstable();
    all
}

/// `Σ out ⊙ R` for a fixed random `R`: a scalar whose gradient exercises
/// every output element with distinct weights.
pub fn probe_loss(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out)?.to_vec();
    let r = tape.leaf(Tensor::uniform(&shape, -1.0, 1.0, &mut Rng::new(seed)));
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_agrees_exactly() {
        let mut rng = Rng::new(0);
        let x = Tensor::uniform(&[6], -1.0, 1.0, &mut rng);
        let rep = gradcheck(
            "affine",
            &[x],
            |t, v| {
                let y = t.affine(v[0], 3.0, 1.0)?;
                probe_loss(t, y, 1)
            },
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-10, "{rep:?}");
        assert_eq!(rep.coords_checked, 6);
    }

    #[test]
    fn five_point_stencil_cancels_cubic_truncation() {
        // f(x) = x⁴: the three-point error at h is 4x·h², the five-point one
        // vanishes up to rounding.
        let x = Tensor::new(vec![1], vec![0.7]).unwrap();
        let quartic = |t: &mut Tape, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            let q = t.mul(sq, sq)?;
            t.sum(q)
        };
        let mut opts = GradcheckOptions {
            h: 1e-3,
            stencil: Stencil::ThreePoint,
            ..Default::default()
        };
        let three = gradcheck("x4", std::slice::from_ref(&x), quartic, &opts).unwrap();
        assert!(three.max_abs_error > 1e-6, "{three:?}");
        opts.stencil = Stencil::FivePoint;
        let five = gradcheck("x4", &[x], quartic, &opts).unwrap();
        assert!(five.max_abs_error < 1e-10, "{five:?}");
    }

    #[test]
    fn relative_error_ignores_loss_scale() {
        let mut rng = Rng::new(4);
        let x = Tensor::uniform(&[40], -1.0, 1.0, &mut rng);
        let run = |scale: f64| {
            gradcheck(
                "scaled",
                std::slice::from_ref(&x),
                move |t, v| {
                    let s = t.sigmoid(v[0])?;
                    let q = t.sum_squares(s)?;
                    t.affine(q, scale, 0.0)
                },
                &GradcheckOptions::default(),
            )
            .unwrap()
            .max_rel_error
        };
        let (small, large) = (run(1.0), run(1e4));
        assert!(large <= 1e-6, "{large}");
        assert!(large < 100.0 * small.max(1e-12), "{small} {large}");
    }

    #[test]
    fn rejects_bad_step() {
        let opts = GradcheckOptions {
            h: 1e-2,
            ..Default::default()
        };
        assert!(gradcheck("x", &[Tensor::zeros(&[1])], |t, v| t.sum(v[0]), &opts).is_err());
    }

    #[test]
    fn relu_kinks_are_excluded() {
        let x = Tensor::new(vec![3], vec![1e-7, -0.5, 0.5]).unwrap();
        let rep = gradcheck(
            "relu",
            &[x],
            |t, v| {
                let y = t.relu(v[0])?;
                t.sum(y)
            },
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.kinks_excluded, 1);
        assert!(rep.passed);
    }

    #[test]
    fn sampling_is_bounded_and_distinct() {
        let mut rng = Rng::new(3);
        let c = sample_coords(500, 50, &mut rng);
        assert_eq!(c.len(), 50);
        let mut d = c.clone();
        d.dedup();
        assert_eq!(d.len(), 50);
        assert_eq!(sample_coords(7, 50, &mut rng).len(), 7);
    }
}
