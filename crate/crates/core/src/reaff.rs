//! Two-stage attentional feature fusion on re-feature maps (ReAFF) and its
//! plain counterpart (iAFF).
//!
//! Each stage computes an attention map from a global (squeezed) branch
//! and a local (per-pixel) branch, `M = σ(local(t) + global(t))`, and
//! blends the two inputs with it:
//!
//! ```text
//! U = M1(x + y) ⊙ x + (1 − M1(x + y)) ⊙ y
//! Z = M2(U)     ⊙ x + (1 − M2(U))     ⊙ y
//! ```

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::groupequiv::ReFeatureMap;
use crate::params::Params;
use crate::reca::{
    local_logits_var, reca_logits_var, se_local_logits_var, se_logits_var, ReCAParams, ReCAVars, SEParams, SEVars,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Global and local attention branches of one ReAFF stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ReMParams {
    pub global: ReCAParams,
    pub local: ReCAParams,
}

#[derive(Clone, Copy, Debug)]
pub struct ReMVars {
    pub global: ReCAVars,
    pub local: ReCAVars,
}

impl ReMParams {
    pub fn new(global: ReCAParams, local: ReCAParams) -> Result<Self> {
        let sig = |p: &ReCAParams| (p.channels(), p.orientations(), p.hidden());
        if sig(&global) != sig(&local) {
            return Err(Error::invalid(format!(
                "global branch (C, N, C/N/r) = {:?} differs from local branch {:?}",
                sig(&global),
                sig(&local)
            )));
        }
        Ok(Self { global, local })
    }

    pub fn init(channels: usize, n: usize, r: usize, rng: &mut Rng) -> Result<Self> {
        let global = ReCAParams::init_with_random_norm(channels, n, r, rng)?;
        let local = ReCAParams::init_with_random_norm(channels, n, r, rng)?;
        Self::new(global, local)
    }

    pub fn zeros(channels: usize, n: usize, r: usize) -> Result<Self> {
        Self::new(ReCAParams::zeros(channels, n, r)?, ReCAParams::zeros(channels, n, r)?)
    }

    pub fn orientations(&self) -> usize {
        self.global.orientations()
    }
}

impl Params for ReMParams {
    type Bound = ReMVars;

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.global.tensors();
        v.extend(self.local.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.global.tensors_mut();
        v.extend(self.local.tensors_mut());
        v
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<ReMVars> {
        Ok(ReMVars {
            global: self.global.bind_from(vars)?,
            local: self.local.bind_from(vars)?,
        })
    }
}

/// Independent parameters for the initial-integration and final-fusion
/// stages.
#[derive(Clone, Debug, PartialEq)]
pub struct ReAFFParams {
    pub stage1: ReMParams,
    pub stage2: ReMParams,
}

#[derive(Clone, Copy, Debug)]
pub struct ReAFFVars {
    pub stage1: ReMVars,
    pub stage2: ReMVars,
}

impl ReAFFParams {
    pub fn new(stage1: ReMParams, stage2: ReMParams) -> Result<Self> {
        let sig = |p: &ReMParams| (p.global.channels(), p.orientations(), p.global.hidden());
        if sig(&stage1) != sig(&stage2) {
            return Err(Error::invalid("ReAFF stages must share the feature-map signature"));
        }
        Ok(Self { stage1, stage2 })
    }

    pub fn init(channels: usize, n: usize, r: usize, rng: &mut Rng) -> Result<Self> {
        let stage1 = ReMParams::init(channels, n, r, rng)?;
        let stage2 = ReMParams::init(channels, n, r, rng)?;
        Self::new(stage1, stage2)
    }

    pub fn zeros(channels: usize, n: usize, r: usize) -> Result<Self> {
        Self::new(ReMParams::zeros(channels, n, r)?, ReMParams::zeros(channels, n, r)?)
    }

    pub fn orientations(&self) -> usize {
        self.stage1.orientations()
    }

    pub fn channels(&self) -> usize {
        self.stage1.global.channels()
    }
}

impl Params for ReAFFParams {
    type Bound = ReAFFVars;

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.stage1.tensors();
        v.extend(self.stage2.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.stage1.tensors_mut();
        v.extend(self.stage2.tensors_mut());
        v
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<ReAFFVars> {
        Ok(ReAFFVars {
            stage1: self.stage1.bind_from(vars)?,
            stage2: self.stage2.bind_from(vars)?,
        })
    }
}

/// Squeeze-excite branches of one plain MS-CAM stage.
#[derive(Clone, Debug, PartialEq)]
pub struct MsCamParams {
    pub global: SEParams,
    pub local: SEParams,
}

#[derive(Clone, Copy, Debug)]
pub struct MsCamVars {
    pub global: SEVars,
    pub local: SEVars,
}

impl MsCamParams {
    /// The local branch always normalizes (over batch and space); the
    /// global one only when `global_norm` is set, since it needs a batch
    /// of at least two.
    pub fn init(channels: usize, r: usize, global_norm: bool, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            global: SEParams::init(channels, r, global_norm, rng)?,
            local: SEParams::init(channels, r, true, rng)?,
        })
    }

    pub fn zeros(channels: usize, r: usize) -> Result<Self> {
        Ok(Self {
            global: SEParams::zeros(channels, r, false)?,
            local: SEParams::zeros(channels, r, true)?,
        })
    }

    pub fn from_trivial_rem(p: &ReMParams) -> Result<Self> {
        Ok(Self {
            global: SEParams::from_trivial_reca(&p.global)?,
            local: SEParams::from_trivial_reca(&p.local)?,
        })
    }
}

impl Params for MsCamParams {
    type Bound = MsCamVars;

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.global.tensors();
        v.extend(self.local.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.global.tensors_mut();
        v.extend(self.local.tensors_mut());
        v
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<MsCamVars> {
        Ok(MsCamVars {
            global: self.global.bind_from(vars)?,
            local: self.local.bind_from(vars)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IAffParams {
    pub stage1: MsCamParams,
    pub stage2: MsCamParams,
}

#[derive(Clone, Copy, Debug)]
pub struct IAffVars {
    pub stage1: MsCamVars,
    pub stage2: MsCamVars,
}

impl IAffParams {
    pub fn init(channels: usize, r: usize, global_norm: bool, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            stage1: MsCamParams::init(channels, r, global_norm, rng)?,
            stage2: MsCamParams::init(channels, r, global_norm, rng)?,
        })
    }

    pub fn zeros(channels: usize, r: usize) -> Result<Self> {
        Ok(Self {
            stage1: MsCamParams::zeros(channels, r)?,
            stage2: MsCamParams::zeros(channels, r)?,
        })
    }

    pub fn from_trivial_reaff(p: &ReAFFParams) -> Result<Self> {
        Ok(Self {
            stage1: MsCamParams::from_trivial_rem(&p.stage1)?,
            stage2: MsCamParams::from_trivial_rem(&p.stage2)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.stage1.global.channels()
    }
}

impl Params for IAffParams {
    type Bound = IAffVars;

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.stage1.tensors();
        v.extend(self.stage2.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.stage1.tensors_mut();
        v.extend(self.stage2.tensors_mut());
        v
    }

    fn bind_from(&self, vars: &mut dyn Iterator<Item = Var>) -> Result<IAffVars> {
        Ok(IAffVars {
            stage1: self.stage1.bind_from(vars)?,
            stage2: self.stage2.bind_from(vars)?,
        })
    }
}

/// Attention branch pair used by one fusion stage.
trait StageAttention {
    fn attention(&self, tape: &mut Tape, t: Var) -> Result<Var>;
}

impl StageAttention for ReMVars {
    fn attention(&self, tape: &mut Tape, t: Var) -> Result<Var> {
        let local = local_logits_var(tape, t, &self.local)?;
        let global = reca_logits_var(tape, t, &self.global)?;
        let sum = tape.add(local, global)?;
        tape.sigmoid(sum)
    }
}

impl StageAttention for MsCamVars {
    fn attention(&self, tape: &mut Tape, t: Var) -> Result<Var> {
        let local = se_local_logits_var(tape, t, &self.local)?;
        let global = se_logits_var(tape, t, &self.global)?;
        let sum = tape.add(local, global)?;
        tape.sigmoid(sum)
    }
}

/// `M ⊙ x + (1 − M) ⊙ y`, evaluated as `y + M ⊙ (x − y)`.
fn blend(tape: &mut Tape, x: Var, y: Var, m: Var) -> Result<Var> {
    let d = tape.sub(x, y)?;
    let md = tape.mul(m, d)?;
    tape.add(y, md)
}

fn two_stage<A: StageAttention>(tape: &mut Tape, x: Var, y: Var, s1: &A, s2: &A) -> Result<(Var, Var)> {
    if tape.shape(x)? != tape.shape(y)? {
        return Err(Error::Broadcast {
            op: "feature fusion",
            lhs: tape.shape(x)?.to_vec(),
            rhs: tape.shape(y)?.to_vec(),
        });
    }
    let sum = tape.add(x, y)?;
    let m1 = s1.attention(tape, sum)?;
    let u = blend(tape, x, y, m1)?;
    let m2 = s2.attention(tape, u)?;
    let z = blend(tape, x, y, m2)?;
    Ok((u, z))
}

/// Differentiable [`reaff_forward`] on a tape.
pub fn reaff_forward_var(tape: &mut Tape, x: Var, y: Var, p: &ReAFFVars) -> Result<Var> {
    two_stage(tape, x, y, &p.stage1, &p.stage2).map(|(_, z)| z)
}

/// Differentiable [`plain_iaff_forward`] on a tape.
pub fn iaff_forward_var(tape: &mut Tape, x: Var, y: Var, p: &IAffVars) -> Result<Var> {
    two_stage(tape, x, y, &p.stage1, &p.stage2).map(|(_, z)| z)
}

fn check_pair(x: &ReFeatureMap, y: &ReFeatureMap, n: usize) -> Result<()> {
    for (what, m) in [("ReAFF input x", x), ("ReAFF input y", y)] {
        if m.orientations() != n {
            return Err(Error::OrientationMismatch {
                what,
                expected: n,
                found: m.orientations(),
            });
        }
    }
    if x.shape() != y.shape() {
        return Err(Error::Broadcast {
            op: "reaff_forward",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    Ok(())
}

/// Local-branch logits with the full `[B, C, H, W]` extent.
pub fn local_logits(x: &ReFeatureMap, p: &ReMParams) -> Result<Tensor> {
    check_pair(x, x, p.orientations())?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.tensor().clone());
    let pv = p.local.bind(&mut tape)?;
    let y = local_logits_var(&mut tape, xv, &pv)?;
    Ok(tape.value(y)?.clone())
}

/// Attention map `M = σ(local + global) ∈ (0, 1)^{B×C×H×W}`.
pub fn rem_fuse(x: &ReFeatureMap, p: &ReMParams) -> Result<Tensor> {
    check_pair(x, x, p.orientations())?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.tensor().clone());
    let pv = p.bind(&mut tape)?;
    let m = pv.attention(&mut tape, xv)?;
    Ok(tape.value(m)?.clone())
}

/// Plain MS-CAM attention map.
pub fn ms_cam(x: &Tensor, p: &MsCamParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let pv = p.bind(&mut tape)?;
    let m = pv.attention(&mut tape, xv)?;
    Ok(tape.value(m)?.clone())
}

/// Intermediate `U` and final `Z` of the two fusion stages.
pub fn reaff_stages(x: &ReFeatureMap, y: &ReFeatureMap, p: &ReAFFParams) -> Result<(ReFeatureMap, ReFeatureMap)> {
    let n = p.orientations();
    check_pair(x, y, n)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.tensor().clone());
    let yv = tape.leaf(y.tensor().clone());
    let pv = p.bind(&mut tape)?;
    let (u, z) = two_stage(&mut tape, xv, yv, &pv.stage1, &pv.stage2)?;
    Ok((
        ReFeatureMap::new(tape.value(u)?.clone(), n)?,
        ReFeatureMap::new(tape.value(z)?.clone(), n)?,
    ))
}

pub fn reaff_forward(x: &ReFeatureMap, y: &ReFeatureMap, p: &ReAFFParams) -> Result<ReFeatureMap> {
    reaff_stages(x, y, p).map(|(_, z)| z)
}

pub fn plain_iaff_forward(x: &Tensor, y: &Tensor, p: &IAffParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let yv = tape.leaf(y.clone());
    let pv = p.bind(&mut tape)?;
    let z = iaff_forward_var(&mut tape, xv, yv, &pv)?;
    Ok(tape.value(z)?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groupequiv::g_act;

    fn rand_map(rng: &mut Rng, b: usize, k: usize, n: usize, hw: usize) -> ReFeatureMap {
        ReFeatureMap::new(Tensor::uniform(&[b, k * n, hw, hw], -1.0, 1.0, rng), n).unwrap()
    }

    #[test]
    fn constant_input_local_equals_global() {
        let mut rng = Rng::new(0);
        let c = Tensor::uniform(&[2, 16, 1, 1], -1.0, 1.0, &mut rng);
        let x = Tensor::from_fn(&[2, 16, 3, 3], |i| c.data()[i / 9]);
        let x = ReFeatureMap::new(x, 4).unwrap();
        let bank = ReCAParams::init_with_random_norm(16, 4, 2, &mut rng).unwrap();
        let p = ReMParams::new(bank.clone(), bank.clone()).unwrap();
        let local = local_logits(&x, &p).unwrap();
        let global = crate::reca::reca_logits(&x, &bank).unwrap();
        for (i, v) in local.data().iter().enumerate() {
            assert!((v - global.data()[i / 9]).abs() <= 1e-10);
        }
    }

    #[test]
    fn zero_params() {
        let mut rng = Rng::new(1);
        let x = rand_map(&mut rng, 1, 2, 4, 4);
        let y = rand_map(&mut rng, 1, 2, 4, 4);
        let p = ReAFFParams::zeros(8, 4, 2).unwrap();
        assert!(local_logits(&x, &p.stage1).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(rem_fuse(&x, &p.stage1).unwrap().data().iter().all(|&v| v == 0.5));
        let z = reaff_forward(&x, &y, &p).unwrap();
        let want = crate::tensor::add(&x.tensor().map(|v| 0.5 * v), &y.tensor().map(|v| 0.5 * v)).unwrap();
        assert!(z.tensor().max_abs_diff(&want).unwrap() <= 1e-12);

        let q = IAffParams::zeros(8, 2).unwrap();
        let z = plain_iaff_forward(x.tensor(), y.tensor(), &q).unwrap();
        assert!(z.max_abs_diff(&want).unwrap() <= 1e-12);
    }

    #[test]
    fn fusing_a_map_with_itself_returns_it() {
        let mut rng = Rng::new(2);
        let x = rand_map(&mut rng, 2, 2, 4, 4);
        let p = ReAFFParams::init(8, 4, 2, &mut rng).unwrap();
        assert!(reaff_forward(&x, &x, &p).unwrap().tensor().max_abs_diff(x.tensor()).unwrap() <= 1e-12);
        let q = IAffParams::init(8, 2, true, &mut rng).unwrap();
        assert!(plain_iaff_forward(x.tensor(), x.tensor(), &q).unwrap().max_abs_diff(x.tensor()).unwrap() <= 1e-12);
    }

    #[test]
    fn attention_is_open_unit_interval_and_outputs_convex() {
        let mut rng = Rng::new(3);
        let x = rand_map(&mut rng, 2, 2, 4, 5);
        let y = rand_map(&mut rng, 2, 2, 4, 5);
        let p = ReAFFParams::init(8, 4, 2, &mut rng).unwrap();
        let m = rem_fuse(&x, &p.stage1).unwrap();
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let (u, z) = reaff_stages(&x, &y, &p).unwrap();
        for t in [u.tensor(), z.tensor()] {
            for ((v, a), b) in t.data().iter().zip(x.tensor().data()).zip(y.tensor().data()) {
                assert!(*v >= a.min(*b) - 1e-12 && *v <= a.max(*b) + 1e-12);
            }
        }
    }

    #[test]
    fn reaff_is_jointly_equivariant() {
        let mut rng = Rng::new(4);
        let x = rand_map(&mut rng, 1, 4, 4, 6);
        let y = rand_map(&mut rng, 1, 4, 4, 6);
        let p = ReAFFParams::init(16, 4, 2, &mut rng).unwrap();
        let z = reaff_forward(&x, &y, &p).unwrap();
        let m = rem_fuse(&x, &p.stage1).unwrap();
        for s in 0..4 {
            let zs = reaff_forward(&g_act(&x, s).unwrap(), &g_act(&y, s).unwrap(), &p).unwrap();
            assert!(zs.tensor().relative_residual(g_act(&z, s).unwrap().tensor()).unwrap() <= 1e-10);
            let ms = rem_fuse(&g_act(&x, s).unwrap(), &p.stage1).unwrap();
            let want = crate::groupequiv::g_act_tensor(&m, 4, s).unwrap();
            assert!(ms.relative_residual(&want).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn plain_iaff_breaks_equivariance() {
        let mut rng = Rng::new(5);
        let x = rand_map(&mut rng, 1, 4, 4, 6);
        let y = rand_map(&mut rng, 1, 4, 4, 6);
        let p = IAffParams::init(16, 2, false, &mut rng).unwrap();
        let z = ReFeatureMap::new(plain_iaff_forward(x.tensor(), y.tensor(), &p).unwrap(), 4).unwrap();
        let worst = (1..4)
            .map(|s| {
                let zs = plain_iaff_forward(g_act(&x, s).unwrap().tensor(), g_act(&y, s).unwrap().tensor(), &p).unwrap();
                zs.relative_residual(g_act(&z, s).unwrap().tensor()).unwrap()
            })
            .fold(0.0, f64::max);
        assert!(worst >= 1e-2, "{worst}");
    }

    #[test]
    fn trivial_group_collapses_to_iaff() {
        let mut rng = Rng::new(6);
        let x = rand_map(&mut rng, 2, 6, 1, 4);
        let y = rand_map(&mut rng, 2, 6, 1, 4);
        let p = ReAFFParams::init(6, 1, 2, &mut rng).unwrap();
        let q = IAffParams::from_trivial_reaff(&p).unwrap();
        let a = reaff_forward(&x, &y, &p).unwrap();
        let b = plain_iaff_forward(x.tensor(), y.tensor(), &q).unwrap();
        assert!(a.tensor().max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn mismatched_inputs() {
        let mut rng = Rng::new(7);
        let p = ReAFFParams::init(8, 4, 2, &mut rng).unwrap();
        let x = rand_map(&mut rng, 1, 2, 4, 4);
        let y = rand_map(&mut rng, 1, 2, 4, 2);
        assert!(reaff_forward(&x, &y, &p).is_err());
        let y2 = rand_map(&mut rng, 1, 4, 2, 4);
        assert!(reaff_forward(&x, &y2, &p).is_err());
        let bad = ReCAParams::init(8, 2, 2, &mut rng).unwrap();
        assert!(ReMParams::new(p.stage1.global.clone(), bad).is_err());
    }
}
