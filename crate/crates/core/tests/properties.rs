use proptest::prelude::*;

use reafuse::autograd::Tape;
use reafuse::groupequiv::{g_act, group_conv, group_conv_var, lift_conv, GroupConvParams, LiftConvParams};
use reafuse::params::Params;
use reafuse::reaff::{reaff_forward, reaff_forward_var, ReAFFParams};
use reafuse::reca::{reca_forward, reca_forward_var, ReCAParams};
use reafuse::tensor::rot90;
use reafuse::{ReFeatureMap, Rng, Tensor};

fn orientations() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![1usize, 2, 4])
}

fn random_map(rng: &mut Rng, b: usize, k: usize, n: usize, h: usize, w: usize) -> ReFeatureMap {
    ReFeatureMap::new(Tensor::uniform(&[b, k * n, h, w], -1.0, 1.0, rng), n).unwrap()
}

fn randomize<P: Params>(p: &mut P, rng: &mut Rng) {
    for t in p.tensors_mut() {
        *t = Tensor::uniform(t.shape(), -1.0, 1.0, rng);
    }
}

/// Batch statistics need at least two samples per channel.
fn batch_for(n: usize, b: usize) -> usize {
    if n == 1 {
        b.max(2)
    } else {
        b
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn g_act_is_a_group_action(seed: u64, n in orientations(), k in 1usize..4, size in 1usize..6, s in 0usize..4, t in 0usize..4) {
        let mut rng = Rng::new(seed);
        let x = random_map(&mut rng, 1, k, n, size, size);
        prop_assert_eq!(g_act(&x, 0).unwrap(), x.clone());
        let lhs = g_act(&g_act(&x, s % n).unwrap(), t % n).unwrap();
        let rhs = g_act(&x, (s + t) % n).unwrap();
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn rot90_has_order_four(seed: u64, h in 1usize..6, w in 1usize..6, q in -5i64..6) {
        let x = Tensor::uniform(&[2, 3, h, w], -1.0, 1.0, &mut Rng::new(seed));
        let back = rot90(&rot90(&x, q).unwrap(), -q).unwrap();
        prop_assert_eq!(&back, &x);
        let full = (0..4).try_fold(x.clone(), |acc, _| rot90(&acc, 1)).unwrap();
        prop_assert_eq!(&full, &x);
    }

    #[test]
    fn lift_and_group_conv_commute_with_rotation(
        seed: u64,
        n in orientations(),
        k_in in 1usize..3,
        k_out in 1usize..3,
        kernel in prop::sample::select(vec![1usize, 3]),
        half in 1usize..4,
        s in 0usize..4,
    ) {
        let s = s % n;
        let mut rng = Rng::new(seed);
        let size = 2 * half;
        let img = Tensor::uniform(&[1, 2, size, size], -1.0, 1.0, &mut rng);
        let lift = LiftConvParams::init(k_in, 2, kernel, &mut rng).unwrap();
        let turns = (s * 4 / n) as i64;
        let lifted = lift_conv(&img, &lift, n).unwrap();
        let r = lift_conv(&rot90(&img, turns).unwrap(), &lift, n).unwrap();
        prop_assert!(r.tensor().max_abs_diff(g_act(&lifted, s).unwrap().tensor()).unwrap() <= 1e-12);

        let conv = GroupConvParams::init(k_out, k_in, n, kernel, &mut rng).unwrap();
        for stride in [1, 2] {
            let y = group_conv(&lifted, &conv, stride).unwrap();
            let yr = group_conv(&g_act(&lifted, s).unwrap(), &conv, stride).unwrap();
            let d = yr.tensor().max_abs_diff(g_act(&y, s).unwrap().tensor()).unwrap();
            prop_assert!(d <= 1e-12, "stride {} deviation {:e}", stride, d);
        }
    }

    #[test]
    fn reca_and_reaff_are_equivariant(
        seed: u64,
        n in orientations(),
        hidden in 1usize..3,
        r in 1usize..3,
        b in 1usize..3,
        size in 1usize..5,
        s in 0usize..4,
    ) {
        let s = s % n;
        let k = hidden * r;
        let b = batch_for(n, b);
        let mut rng = Rng::new(seed);
        let x = random_map(&mut rng, b, k, n, size, size);
        let y = random_map(&mut rng, b, k, n, size, size);
        let (gx, gy) = (g_act(&x, s).unwrap(), g_act(&y, s).unwrap());

        let mut p = ReCAParams::init(k * n, n, r, &mut rng).unwrap();
        randomize(&mut p, &mut rng);
        let want = g_act(&reca_forward(&x, &p).unwrap(), s).unwrap();
        let got = reca_forward(&gx, &p).unwrap();
        prop_assert!(got.tensor().relative_residual(want.tensor()).unwrap() <= 1e-10);

        let mut q = ReAFFParams::init(k * n, n, r, &mut rng).unwrap();
        randomize(&mut q, &mut rng);
        let want = g_act(&reaff_forward(&x, &y, &q).unwrap(), s).unwrap();
        let got = reaff_forward(&gx, &gy, &q).unwrap();
        prop_assert!(got.tensor().relative_residual(want.tensor()).unwrap() <= 1e-10);

        let same = reaff_forward(&x, &x, &q).unwrap();
        prop_assert!(same.tensor().max_abs_diff(x.tensor()).unwrap() <= 1e-12);
    }

    /// For an equivariant map f and L = Σ f(x)², the input gradient at g·x
    /// is g applied to the gradient at x.
    #[test]
    fn gradients_commute_with_the_group_action(
        seed: u64,
        n in prop::sample::select(vec![2usize, 4]),
        hidden in 1usize..3,
        b in 1usize..3,
        half in 1usize..3,
        s in 1usize..4,
    ) {
        let s = s % n;
        let k = hidden * 2;
        let size = 2 * half;
        let mut rng = Rng::new(seed);
        let x = random_map(&mut rng, b, k, n, size, size);
        let y = random_map(&mut rng, b, k, n, size, size);
        let conv = GroupConvParams::init(k, k, n, 3, &mut rng).unwrap();
        let reca = ReCAParams::init_with_random_norm(k * n, n, 2, &mut rng).unwrap();
        let mut reaff = ReAFFParams::init(k * n, n, 2, &mut rng).unwrap();
        randomize(&mut reaff, &mut rng);

        let grads = |x: &ReFeatureMap, y: &ReFeatureMap| -> (Tensor, Tensor) {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.tensor().clone());
            let yv = tape.leaf(y.tensor().clone());
            let cp = conv.bind(&mut tape).unwrap();
            let rp = reca.bind(&mut tape).unwrap();
            let fp = reaff.bind(&mut tape).unwrap();
            let c = group_conv_var(&mut tape, xv, &cp, 2).unwrap();
            let a = reca_forward_var(&mut tape, xv, &rp).unwrap();
            let f = reaff_forward_var(&mut tape, xv, yv, &fp).unwrap();
            let mut loss = tape.sum_squares(c).unwrap();
            for v in [a, f] {
                let l = tape.sum_squares(v).unwrap();
                loss = tape.add(loss, l).unwrap();
            }
            let g = tape.backward(loss).unwrap();
            (g.wrt(&tape, xv).unwrap(), g.wrt(&tape, yv).unwrap())
        };
        let (gx, gy) = grads(&x, &y);
        let (hx, hy) = grads(&g_act(&x, s).unwrap(), &g_act(&y, s).unwrap());
        for (moved, base) in [(hx, gx), (hy, gy)] {
            let want = g_act(&ReFeatureMap::new(base, n).unwrap(), s).unwrap();
            let r = moved.relative_residual(want.tensor()).unwrap();
            prop_assert!(r <= 1e-8, "residual {:e}", r);
        }
    }
}
