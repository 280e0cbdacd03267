//! Finite-difference checks for every primitive, plus accumulation contracts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check_gradients;
use super::*;

const EPS: Real = 1e-5;
const TOL: Real = 1e-4;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

fn rand_param(store: &mut ParamStore, name: &str, r: usize, c: usize, rng: &mut ChaCha8Rng) -> ParamId {
    store.add(name, Tensor::uniform(r, c, 1.0, rng))
}

fn assert_check<F: Fn(&mut Graph) -> crate::Result<Var>>(store: &mut ParamStore, f: F) {
    let report = check_gradients(store, None, EPS, f).unwrap();
    assert!(
        report.max_relative_error < TOL,
        "{} relative error {}",
        report.worst_param,
        report.max_relative_error
    );
}

/// Reduces any tensor to a scalar with a fixed random projection so that
/// every output coordinate receives a distinct upstream gradient.
fn project(g: &mut Graph, x: Var, seed: u64) -> crate::Result<Var> {
    let (r, c) = g.value(x).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(Tensor::uniform(r, c, 1.0, &mut rng));
    let p = g.mul(x, w)?;
    g.sum(p)
}

#[test]
fn linear_and_elementwise() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let x = rand_param(&mut s, "x", 3, 4, &mut r);
    let lin = Linear::new(&mut s, "lin", 4, 5, true, &mut r);
    let y = rand_param(&mut s, "y", 3, 5, &mut r);
    assert_check(&mut s, |g| {
        let xv = g.param(x);
        let h = lin.forward(g, xv)?;
        let t = g.tanh(h)?;
        let yv = g.param(y);
        let sg = g.sigmoid(yv)?;
        let m = g.mul(t, sg)?;
        let d = g.sub(m, yv)?;
        let a = g.add(d, t)?;
        let sc = g.scale(a, 0.7)?;
        project(g, sc, 1)
    });
}

#[test]
fn matmul_transposed_and_concat_slice() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let a = rand_param(&mut s, "a", 3, 4, &mut r);
    let b = rand_param(&mut s, "b", 5, 4, &mut r);
    let c = rand_param(&mut s, "c", 3, 2, &mut r);
    assert_check(&mut s, |g| {
        let (av, bv, cv) = (g.param(a), g.param(b), g.param(c));
        let m = g.matmul_bt(av, bv)?;
        let cat = g.concat_cols(&[m, cv])?;
        let sl = g.slice_cols(cat, 2, 4)?;
        project(g, sl, 2)
    });
}

#[test]
fn embedding_lookup_and_pooling() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let table = rand_param(&mut s, "emb", 6, 3, &mut r);
    let ids = [0usize, 2, 2, 5, 1, 3];
    let segs = [(0usize, 2usize), (2, 3), (5, 1)];
    let weights = [1.0, 2.0, 0.5, 0.0, 3.0, 1.5];
    assert_check(&mut s, |g| {
        let e = embedding_lookup(g, table, &ids)?;
        let p1 = mean_pool(g, e, &segs)?;
        let p2 = weighted_mean_pool(g, e, &segs, &weights)?;
        let a = g.add(p1, p2)?;
        project(g, a, 3)
    });
}

#[test]
fn batch_norm_both_modes() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let x = rand_param(&mut s, "x", 5, 3, &mut r);
    let mut bn = BatchNorm::new(&mut s, "bn", 3);
    s.get_mut(bn.gamma).value = Tensor::from_vec(1, 3, vec![0.5, 1.5, -1.0]).unwrap();
    s.get_mut(bn.beta).value = Tensor::from_vec(1, 3, vec![0.1, 0.0, -0.2]).unwrap();
    bn.running_mean = vec![0.1, -0.2, 0.3];
    bn.running_var = vec![0.5, 1.5, 2.0];
    assert_check(&mut s, |g| {
        let xv = g.param(x);
        let (t, _) = bn.forward(g, xv, true)?;
        let (e, _) = bn.forward(g, xv, false)?;
        let a = g.add(t, e)?;
        project(g, a, 4)
    });
}

#[test]
fn gru_cell_and_stack_with_mask() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let x = rand_param(&mut s, "x", 3, 4, &mut r);
    let h = rand_param(&mut s, "h", 3, 5, &mut r);
    let stack = GruStack::new(&mut s, "gru", 4, 5, 2, &mut r);
    let mask = [1.0, 0.0, 1.0];
    assert_check(&mut s, |g| {
        let (xv, hv) = (g.param(x), g.param(h));
        let st = stack.step(g, xv, &[hv, hv], Some(&mask))?;
        let st = stack.step(g, xv, &st, None)?;
        let c = g.concat_cols(&st)?;
        project(g, c, 5)
    });
}

#[test]
fn dot_attention_with_ragged_lengths() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let q = rand_param(&mut s, "q", 2, 3, &mut r);
    let k = rand_param(&mut s, "k", 8, 3, &mut r);
    let v = rand_param(&mut s, "v", 8, 2, &mut r);
    assert_check(&mut s, |g| {
        let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
        let (ctx, _) = g.attention(qv, kv, vv, &[4, 2])?;
        project(g, ctx, 6)
    });
}

#[test]
fn interleave_softmax_and_cross_entropy() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let a = rand_param(&mut s, "a", 2, 4, &mut r);
    let b = rand_param(&mut s, "b", 2, 4, &mut r);
    assert_check(&mut s, |g| {
        let (av, bv) = (g.param(a), g.param(b));
        let st = g.interleave_rows(&[av, bv])?;
        let sm = g.softmax(st)?;
        let p = project(g, sm, 7)?;
        let ce = g.cross_entropy(st, &[0, 3, 2, 1], &[0.5, 0.25, 0.0, 1.0])?;
        g.add(p, ce)
    });
}

#[test]
fn sigmoid_bce_with_col_mean_and_mask() {
    let mut r = rng();
    let mut s = ParamStore::new();
    let x = rand_param(&mut s, "x", 4, 3, &mut r);
    let mut mask = Tensor::zeros(4, 3);
    mask.set(1, 2, -1e6);
    assert_check(&mut s, |g| {
        let xv = g.param(x);
        let m = g.add_const(xv, &mask)?;
        let p = g.sigmoid(m)?;
        let mean = g.col_mean(p)?;
        g.binary_cross_entropy(mean, &[0.2, 0.9, 0.5], &[1.0, 1.0, 0.5])
    });
}

#[test]
fn sum_of_squares_gradient_is_twice_the_vector() {
    let mut s = ParamStore::new();
    let v = s.add("v", Tensor::row_vector(vec![1.0, -2.0, 0.5]));
    let mut g = Graph::new(&s);
    let x = g.param(v);
    let sq = g.mul(x, x).unwrap();
    let l = g.sum(sq).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(v).unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn two_backward_passes_double_the_accumulated_gradient() {
    let mut s = ParamStore::new();
    let v = s.add("v", Tensor::row_vector(vec![0.3, -0.7]));
    let run = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let x = g.param(v);
        let t = g.tanh(x).unwrap();
        let l = g.sum(t).unwrap();
        g.backward(l).unwrap()
    };
    let g1 = run(&s);
    s.accumulate(&g1);
    let once = s.get(v).grad.clone();
    let g2 = run(&s);
    s.accumulate(&g2);
    let twice = &s.get(v).grad;
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn backward_on_non_scalar_is_an_error() {
    let mut s = ParamStore::new();
    let v = s.add("v", Tensor::row_vector(vec![1.0, 2.0]));
    let mut g = Graph::new(&s);
    let x = g.param(v);
    assert!(g.backward(x).is_err());
}

#[test]
fn non_finite_values_trip_an_error_in_strict_mode() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s).strict(true);
    let x = g.input(Tensor::row_vector(vec![1.0, Real::NAN]));
    assert!(matches!(g.tanh(x), Err(crate::Error::NonFinite(_))));
}

#[test]
fn shape_mismatch_is_an_error() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let a = g.input(Tensor::zeros(2, 3));
    let b = g.input(Tensor::zeros(2, 2));
    assert!(g.add(a, b).is_err());
    assert!(g.matmul(a, b).is_err());
}

#[test]
fn bce_is_minimized_at_the_target() {
    let s = ParamStore::new();
    let target = 0.3;
    let bce = |p: Real| {
        let mut g = Graph::new(&s);
        let x = g.input(Tensor::scalar(p));
        let l = g.binary_cross_entropy(x, &[target], &[1.0]).unwrap();
        g.value(l).item()
    };
    let at_target = bce(target);
    for p in [0.01, 0.1, 0.29, 0.31, 0.5, 0.9, 0.99] {
        assert!(bce(p) > at_target);
    }
}

#[test]
fn clipping_bounds_the_global_norm() {
    let mut s = ParamStore::new();
    let a = s.add("a", Tensor::row_vector(vec![0.0; 2]));
    s.get_mut(a).grad = Tensor::row_vector(vec![30.0, 40.0]);
    let before = s.clip_grad_norm(DEFAULT_CLIP_NORM);
    assert!((before - 50.0).abs() < 1e-12);
    assert!((s.get(a).grad.norm() - 5.0).abs() < 1e-12);
}
