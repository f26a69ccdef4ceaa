//! Every differentiable op checked against central finite differences,
//! evaluated by replaying the recorded tape with perturbed leaves.

use std::sync::Arc;

use petri_grad::{GridDims, NodeId, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f32 = 1e-3;
const REL_TOL: f32 = 1e-2;
// Relative error is taken against max(|analytic|, |numeric|, FLOOR); below the
// floor f32 central differences carry no significant digits at h = 1e-3.
const FLOOR: f32 = 5e-2;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from `kinks` by more than the finite-difference step.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32, kinks: &[f32]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v: f32 = rng.gen_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > 10.0 * H) {
            break v;
        }
    })
}

/// Reduce `out` to a scalar through fixed random weights so every output
/// element contributes a distinct cotangent.
fn weighted_loss(tape: &mut Tape, rng: &mut ChaCha8Rng, out: NodeId) -> NodeId {
    let shape = tape.value(out).shape().to_vec();
    let r = tape.constant(uniform(rng, &shape, -1.0, 1.0));
    let p = tape.mul(out, r).unwrap();
    tape.sum(p).unwrap()
}

fn check(tape: &Tape, loss: NodeId, leaves: &[NodeId]) {
    let grads = tape.backward_wrt(loss, leaves).unwrap();
    for (leaf, g) in grads.iter() {
        let base = tape.value(leaf).clone();
        for i in 0..base.numel() {
            let eval = |delta: f32| {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                tape.replay(&[(leaf, t)], loss).unwrap().item().unwrap()
            };
            let numeric = (eval(H) - eval(-H)) / (2.0 * H);
            let analytic = g.data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(FLOOR);
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < REL_TOL,
                "{} leaf {:?}[{i}]: analytic {analytic} numeric {numeric}",
                tape.op(loss).name(),
                leaf
            );
        }
    }
}

fn unary_case(
    seed: u64,
    build: impl Fn(&mut Tape, NodeId) -> NodeId,
    lo: f32,
    hi: f32,
    kinks: &[f32],
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let x = tape.leaf(away_from(&mut rng, &[3, 4], lo, hi, kinks));
    let y = build(&mut tape, x);
    let loss = weighted_loss(&mut tape, &mut rng, y);
    check(&tape, loss, &[x]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_unary_ops(seed in any::<u64>()) {
        unary_case(seed, |t, x| t.tanh(x).unwrap(), -2.0, 2.0, &[]);
        unary_case(seed, |t, x| t.relu(x).unwrap(), -2.0, 2.0, &[0.0]);
        unary_case(seed, |t, x| t.clip(x, -0.5, 0.5).unwrap(), -1.0, 1.0, &[-0.5, 0.5]);
        unary_case(seed, |t, x| t.log(x).unwrap(), 0.5, 2.0, &[]);
        unary_case(seed, |t, x| t.neg(x).unwrap(), -1.0, 1.0, &[]);
        unary_case(seed, |t, x| t.scale(x, -2.5).unwrap(), -1.0, 1.0, &[]);
        unary_case(seed, |t, x| t.offset(x, 0.75).unwrap(), -1.0, 1.0, &[]);
        unary_case(seed, |t, x| t.softmax(x).unwrap(), -2.0, 2.0, &[]);
        unary_case(seed, |t, x| t.slice_cols(x, 1, 2).unwrap(), -1.0, 1.0, &[]);
        unary_case(seed, |t, x| t.sum(x).unwrap(), -1.0, 1.0, &[]);
    }

    #[test]
    fn masked_softmax(seed in any::<u64>()) {
        let mask: Arc<[bool]> = (0..12).map(|i| i % 4 != 2).collect::<Vec<_>>().into();
        unary_case(seed, move |t, x| t.softmax_masked(x, mask.clone()).unwrap(), -2.0, 2.0, &[]);
    }

    #[test]
    fn binary_ops_with_broadcast(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for rhs_shape in [vec![3, 4], vec![3, 1], vec![4], vec![1]] {
            let mut tape = Tape::new();
            let a = tape.leaf(uniform(&mut rng, &[3, 4], -1.0, 1.0));
            let b = tape.leaf(uniform(&mut rng, &rhs_shape, -1.0, 1.0));
            let s = tape.add(a, b).unwrap();
            let p = tape.mul(s, b).unwrap();
            let q = tape.mul(p, a).unwrap();
            let loss = weighted_loss(&mut tape, &mut rng, q);
            check(&tape, loss, &[a, b]);
        }
    }

    #[test]
    fn matmul_and_concat(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let a = tape.leaf(uniform(&mut rng, &[3, 5], -1.0, 1.0));
        let b = tape.leaf(uniform(&mut rng, &[5, 2], -1.0, 1.0));
        let c = tape.leaf(uniform(&mut rng, &[3, 1], -1.0, 1.0));
        let ab = tape.matmul(a, b).unwrap();
        let cat = tape.concat_cols(&[ab, c, ab]).unwrap();
        let loss = weighted_loss(&mut tape, &mut rng, cat);
        check(&tape, loss, &[a, b, c]);
    }

    #[test]
    fn cosine_similarity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let a = tape.leaf(uniform(&mut rng, &[4, 3], -1.0, 1.0));
        let b = tape.leaf(uniform(&mut rng, &[4, 3], -1.0, 1.0));
        let c = tape.cosine(a, b, 1e-8).unwrap();
        let loss = weighted_loss(&mut tape, &mut rng, c);
        check(&tape, loss, &[a, b]);
    }

    #[test]
    fn neighbor_linear_and_scatter(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = GridDims::new(2, 3, 4);
        let mut tape = Tape::new();
        let x = tape.leaf(uniform(&mut rng, &[grid.cells(), 2], -1.0, 1.0));
        let w = tape.leaf(uniform(&mut rng, &[18, 3], -0.5, 0.5));
        let b = tape.leaf(uniform(&mut rng, &[3], -0.5, 0.5));
        let cells: Arc<[u32]> = vec![0, 5, 11, 12, 23].into();
        let h = tape.neighbor_linear(grid, cells.clone(), x, w, b).unwrap();
        let t = tape.tanh(h).unwrap();
        let s = tape.scatter_rows(t, cells, grid.cells()).unwrap();
        let loss = weighted_loss(&mut tape, &mut rng, s);
        check(&tape, loss, &[x, w, b]);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let mut tape = Tape::new();
        let x = tape.constant(uniform(&mut rng, &[5, 4], -30.0, 30.0));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(4) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn replay_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let build = |x: &Tensor, w: &Tensor| {
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let wn = tape.leaf(w.clone());
        let h = tape.matmul(xn, wn).unwrap();
        let t = tape.tanh(h).unwrap();
        let s = tape.softmax(t).unwrap();
        tape.value(s).clone()
    };
    let x = uniform(&mut rng, &[16, 8], -1.0, 1.0);
    let w = uniform(&mut rng, &[8, 8], -1.0, 1.0);
    let a = build(&x, &w);
    let b = build(&x, &w);
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
