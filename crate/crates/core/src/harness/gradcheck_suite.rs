use serde::Serialize;

use super::config::HarnessConfig;
use crate::autograd::{gradcheck, probe_loss, GradcheckOptions, GradcheckReport, Stencil, Tape, Var};
use crate::error::{Error, Result};
use crate::groupequiv::{
    g_act_tensor, group_conv_var, lift_conv_var, quarter_turns, GroupConvParams, LiftConvParams,
};
use crate::params::{NormParams, Params};
use crate::pyramid::{backbone_var, pyramid_var, PyramidConfig, PyramidParams, Variant};
use crate::reaff::{iaff_forward_var, reaff_forward_var, IAffParams, ReAFFParams};
use crate::reca::{clamp_reduction, reca_forward_var, se_forward_var, ReCAParams, SEParams};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{rot90, Tensor, BN_EPS};

const TAG_GRAD: u64 = 0x6AD;

#[derive(Clone, Debug, Serialize)]
pub struct GradientEquivariance {
    pub name: String,
    /// Worst relative residual of `∇L(g·x)` against `g·∇L(x)` over all
    /// group elements.
    pub max_residual: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckSuiteReport {
    pub orientations: usize,
    pub h: f64,
    pub stencil: Stencil,
    pub tol: f64,
    pub scale_floor: f64,
    pub coords_per_input: usize,
    pub checks: Vec<GradcheckReport>,
    pub gradient_equivariance: Vec<GradientEquivariance>,
}

impl GradcheckSuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed) && self.gradient_equivariance.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&GradcheckReport> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().fold(0.0, |a, c| a.max(c.max_rel_error))
    }
}

struct Suite {
    opts: GradcheckOptions,
    probe_seed: u64,
    rng: Rng,
    reports: Vec<GradcheckReport>,
}

impl Suite {
    fn rand(&mut self, shape: &[usize]) -> Tensor {
        Tensor::uniform(shape, -1.0, 1.0, &mut self.rng)
    }

    /// Checks `f` over plain tensor inputs, reduced by the probe loss.
    fn plain<F>(&mut self, name: &str, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let seed = self.probe_seed;
        let rep = gradcheck(
            name,
            &inputs,
            |t, v| {
                let out = f(t, v)?;
                probe_loss(t, out, seed)
            },
            &self.opts,
        )?;
        self.reports.push(rep);
        Ok(())
    }

    /// Checks `f` with respect to both its data inputs and every tensor of
    /// `p`.
    fn with_params<P, F>(&mut self, name: &str, data: Vec<Tensor>, p: &P, f: F) -> Result<()>
    where
        P: Params,
        F: Fn(&mut Tape, &[Var], &P::Bound) -> Result<Var>,
    {
        let nd = data.len();
        let mut inputs = data;
        inputs.extend(p.cloned_tensors());
        self.plain(name, inputs, |t, v| {
            let bound = p.bind_from(&mut v[nd..].iter().copied())?;
            f(t, &v[..nd], &bound)
        })
    }
}

/// Relative residual between `∇_x L` at `g·x` and `g·∇_x L(x)` for each
/// non-trivial element, with `L = Σ f(x)²`.
fn gradient_residual<F, A>(n: usize, inputs: &[Tensor], act: A, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>>,
    A: Fn(&Tensor, usize) -> Result<Tensor>,
{
    let grads = |xs: &[Tensor]| -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let outs = f(&mut tape, &vars)?;
        let mut loss = tape.sum_squares(outs[0])?;
        for &o in &outs[1..] {
            let l = tape.sum_squares(o)?;
            loss = tape.add(loss, l)?;
        }
        let g = tape.backward(loss)?;
        vars.iter().map(|&v| g.wrt(&tape, v)).collect()
    };
    let base = grads(inputs)?;
    let mut worst: f64 = 0.0;
    for s in 1..n {
        let moved: Vec<Tensor> = inputs.iter().map(|x| act(x, s)).collect::<Result<_>>()?;
        for (got, b) in grads(&moved)?.iter().zip(&base) {
            let r = got.relative_residual(&act(b, s)?)?;
            if !r.is_finite() {
                return Err(Error::NonFinite("gradient equivariance residual".into()));
            }
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

/// Finite-difference checks of every differentiable operation and module,
/// plus the commutation of gradients with the group action.
pub fn gradcheck_suite(cfg: &HarnessConfig) -> Result<GradcheckSuiteReport> {
    cfg.validate()?;
    let g = &cfg.gradcheck;
    let n = cfg.pyramid.orientations;
    let (b, k, s) = (g.batch, g.kernel_channels, g.size);
    let c = k * n;
    let r = clamp_reduction(k, g.reduction);
    let opts = GradcheckOptions {
        h: g.h,
        stencil: g.stencil,
        tol: cfg.thresholds.gradcheck,
        coords_per_input: g.coords_per_input,
        kink_margin: g.kink_margin,
        scale_floor: g.scale_floor,
        seed: derive_seed(cfg.seed, TAG_GRAD),
    };
    let mut suite = Suite {
        opts,
        probe_seed: derive_seed(cfg.seed, TAG_GRAD + 1),
        rng: Rng::new(derive_seed(cfg.seed, TAG_GRAD + 2)),
        reports: Vec::new(),
    };

    // Tensor primitives.
    let x = suite.rand(&[b, 2, s, s]);
    let w = suite.rand(&[3, 2, 3, 3]);
    let bias = suite.rand(&[3]);
    suite.plain("conv2d", vec![x.clone(), w.clone(), bias.clone()], |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
    })?;
    suite.plain("conv2d_stride2", vec![x.clone(), w, bias], |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
    })?;
    let wide = suite.rand(&[b, 2, s, s + 1]);
    suite.plain("rot90", vec![wide], |t, v| t.rot90(v[0], 1))?;
    suite.plain("upsample_nearest2x", vec![x.clone()], |t, v| t.upsample_nearest2x(v[0]))?;
    suite.plain("avg_pool2x2", vec![x.clone()], |t, v| t.avg_pool2x2(v[0]))?;
    suite.plain("global_avg_pool", vec![x.clone()], |t, v| t.global_avg_pool(v[0]))?;
    let big = suite.rand(&[b, c, s, s]);
    let small = suite.rand(&[b, c, 1, 1]);
    suite.plain("add_broadcast", vec![big.clone(), small.clone()], |t, v| t.add(v[0], v[1]))?;
    suite.plain("sub_broadcast", vec![big.clone(), small.clone()], |t, v| t.sub(v[0], v[1]))?;
    suite.plain("mul_broadcast", vec![big.clone(), small], |t, v| t.mul(v[0], v[1]))?;
    suite.plain("relu", vec![big.clone()], |t, v| t.relu(v[0]))?;
    suite.plain("sigmoid", vec![big.clone()], |t, v| t.sigmoid(v[0]))?;
    suite.plain("affine", vec![big.clone()], |t, v| t.affine(v[0], -1.5, 0.25))?;
    suite.plain("reshape", vec![big.clone()], |t, v| t.reshape(v[0], &[b, c * s * s]))?;
    let gamma = Tensor::uniform(&[2], 0.5, 1.5, &mut suite.rng);
    let beta = suite.rand(&[2]);
    suite.plain("batchnorm", vec![x.clone(), gamma, beta], |t, v| {
        t.batchnorm(v[0], v[1], v[2], BN_EPS, &[0, 2, 3])
    })?;
    let loss_input = suite.rand(&[b, 2, s, s]);
    {
        let rep = gradcheck("sum_squares", &[loss_input], |t, v| t.sum_squares(v[0]), &suite.opts)?;
        suite.reports.push(rep);
    }

    // Group convolutions.
    let img = suite.rand(&[b, 3, s, s]);
    let lift = LiftConvParams::init(k, 3, 3, &mut suite.rng)?;
    suite.with_params("lift_conv", vec![img.clone()], &lift, |t, v, p| lift_conv_var(t, v[0], p, n))?;
    let gconv = GroupConvParams::init(k, k, n, 3, &mut suite.rng)?;
    suite.with_params("group_conv", vec![big.clone()], &gconv, |t, v, p| group_conv_var(t, v[0], p, 1))?;
    suite.with_params("group_conv_stride2", vec![big.clone()], &gconv, |t, v, p| {
        group_conv_var(t, v[0], p, 2)
    })?;

    // Attention and fusion.
    let reca = ReCAParams::init_with_random_norm(c, n, r, &mut suite.rng)?;
    suite.with_params("reca_forward", vec![big.clone()], &reca, |t, v, p| reca_forward_var(t, v[0], p))?;
    let se_plain = SEParams::init(c, r, false, &mut suite.rng)?;
    suite.with_params("se_forward", vec![big.clone()], &se_plain, |t, v, p| se_forward_var(t, v[0], p))?;
    if b >= 2 {
        let mut se_bn = SEParams::init(c, r, true, &mut suite.rng)?;
        let h = se_bn.hidden();
        se_bn.norm = Some(NormParams {
            gamma: Tensor::uniform(&[h], 0.5, 1.5, &mut suite.rng),
            beta: suite.rand(&[h]),
        });
        suite.with_params("se_forward_batchnorm", vec![big.clone()], &se_bn, |t, v, p| {
            se_forward_var(t, v[0], p)
        })?;
    }
    let other = suite.rand(&[b, c, s, s]);
    let reaff = ReAFFParams::init(c, n, r, &mut suite.rng)?;
    suite.with_params("reaff_forward", vec![big.clone(), other.clone()], &reaff, |t, v, p| {
        reaff_forward_var(t, v[0], v[1], p)
    })?;
    let iaff = IAffParams::init(c, r, b >= 2, &mut suite.rng)?;
    suite.with_params("plain_iaff_forward", vec![big.clone(), other.clone()], &iaff, |t, v, p| {
        iaff_forward_var(t, v[0], v[1], p)
    })?;

    // Whole pyramids, every parameter included.
    let pcfg = |variant| PyramidConfig {
        levels: g.pyramid_levels,
        kernel_channels: k,
        orientations: n,
        reduction: g.reduction,
        kernel_size: 3,
        variant,
        seed: derive_seed(cfg.seed, TAG_GRAD + 3),
        zero_bias: false,
        in_channels: 3,
    };
    for v in Variant::ALL {
        if v == Variant::PlusReCA && b * n < 2 {
            continue;
        }
        let p = PyramidParams::init(&pcfg(v))?;
        let name = format!("pyramid_{}", v.key());
        let seed = suite.probe_seed;
        let inputs: Vec<Tensor> = std::iter::once(img.clone()).chain(p.cloned_tensors()).collect();
        let rep = gradcheck(
            &name,
            &inputs,
            |t, xs| {
                let pv = p.bind_from(&mut xs[1..].iter().copied())?;
                let feats = backbone_var(t, xs[0], &pv.backbone, n)?;
                let outs = pyramid_var(t, &feats, &pv)?;
                let mut acc = probe_loss(t, outs[0], seed)?;
                for (l, &o) in outs.iter().enumerate().skip(1) {
                    let term = probe_loss(t, o, seed + l as u64)?;
                    acc = t.add(acc, term)?;
                }
                Ok(acc)
            },
            &suite.opts,
        )?;
        suite.reports.push(rep);
    }

    // Gradients commute with the group action.
    let th = cfg.thresholds.gradient_equivariance;
    let act = |x: &Tensor, s: usize| g_act_tensor(x, n, s);
    let rotate = |x: &Tensor, s: usize| rot90(x, quarter_turns(n, s));
    let mut equiv = Vec::new();
    let mut record = |name: &str, r: f64| {
        equiv.push(GradientEquivariance {
            name: name.to_owned(),
            max_residual: r,
            threshold: th,
            passed: r <= th,
        })
    };
    record(
        "group_conv_stride2",
        gradient_residual(n, std::slice::from_ref(&big), act, |t, v| {
            let p = gconv.bind(t)?;
            Ok(vec![group_conv_var(t, v[0], &p, 2)?])
        })?,
    );
    record(
        "reca_forward",
        gradient_residual(n, std::slice::from_ref(&big), act, |t, v| {
            let p = reca.bind(t)?;
            Ok(vec![reca_forward_var(t, v[0], &p)?])
        })?,
    );
    record(
        "reaff_forward",
        gradient_residual(n, &[big.clone(), other.clone()], act, |t, v| {
            let p = reaff.bind(t)?;
            Ok(vec![reaff_forward_var(t, v[0], v[1], &p)?])
        })?,
    );
    for v in Variant::ALL.into_iter().filter(|v| v.is_equivariant()) {
        if v == Variant::PlusReCA && b * n < 2 {
            continue;
        }
        let p = PyramidParams::init(&pcfg(v))?;
        let name = format!("pyramid_{}", v.key());
        record(
            &name,
            gradient_residual(n, std::slice::from_ref(&img), rotate, |t, xs| {
                let pv = p.bind(t)?;
                let feats = backbone_var(t, xs[0], &pv.backbone, n)?;
                pyramid_var(t, &feats, &pv)
            })?,
        );
    }

    Ok(GradcheckSuiteReport {
        orientations: n,
        h: suite.opts.h,
        stencil: suite.opts.stencil,
        tol: suite.opts.tol,
        scale_floor: suite.opts.scale_floor,
        coords_per_input: suite.opts.coords_per_input,
        checks: suite.reports,
        gradient_equivariance: equiv,
    })
}
