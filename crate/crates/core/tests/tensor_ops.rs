use lst_core::rng::seeded;
use lst_core::tensor::{AttentionMask, Graph, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = seeded(seed);
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks the analytic gradient of `f` (a scalar function of the given
/// inputs) against central differences.
fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let h = 1e-5;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]).unwrap().to_vec();
        for i in 0..t.numel() {
            let eval = |delta: f64| {
                let mut g2 = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| {
                        let mut x = x.clone();
                        if j == k {
                            x.data_mut()[i] += delta;
                        }
                        g2.leaf(x, false)
                    })
                    .collect();
                let o = f(&mut g2, &vs);
                g2.value(o).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-6, "input {k} entry {i}: analytic {} numeric {numeric}", analytic[i]);
        }
    }
}

/// Weighted sum so every output entry matters to the loss.
fn probe(g: &mut Graph, x: Var, seed: u64) -> Var {
    let s = g.shape(x).to_vec();
    let (r, c) = if s.len() == 2 { (s[0], s[1]) } else { (1, s[0]) };
    let w = random(r, c, seed);
    let w = Tensor::new(s, w.into_data()).unwrap();
    let w = g.constant(w);
    let m = g.mul(x, w).unwrap();
    g.sum(m).unwrap()
}

#[test]
fn matmul_gradients() {
    check(&[random(3, 4, 1), random(4, 2, 2)], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        probe(g, y, 9)
    });
    check(&[random(3, 4, 3), random(5, 4, 4)], |g, v| {
        let y = g.matmul_nt(v[0], v[1]).unwrap();
        probe(g, y, 9)
    });
}

#[test]
fn elementwise_gradients() {
    check(&[random(2, 3, 5), random(2, 3, 6)], |g, v| {
        let a = g.add(v[0], v[1]).unwrap();
        let b = g.mul(a, v[0]).unwrap();
        let c = g.silu(b).unwrap();
        let d = g.scale(c, 0.7).unwrap();
        probe(g, d, 1)
    });
}

#[test]
fn add_row_and_rms_norm_gradients() {
    let gain = Tensor::new(vec![4], vec![0.5, 1.0, 1.5, -0.3]).unwrap();
    let bias = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
    check(&[random(3, 4, 7), gain, bias], |g, v| {
        let y = g.add_row(v[0], v[2]).unwrap();
        let z = g.rms_norm(y, v[1], 1e-6).unwrap();
        probe(g, z, 2)
    });
}

#[test]
fn gather_concat_slice_transpose_gradients() {
    check(&[random(5, 3, 8), random(2, 3, 9)], |g, v| {
        let e = g.embedding(v[0], &[4, 0, 4, 2]).unwrap();
        let r = g.gather_rows(e, &[3, 1]).unwrap();
        let c = g.concat_rows(&[r, v[1]]).unwrap();
        let s = g.slice_cols(c, 1, 2).unwrap();
        let t = g.transpose(s).unwrap();
        let cc = g.concat_cols(&[t, t]).unwrap();
        probe(g, cc, 3)
    });
}

#[test]
fn softmax_and_cross_entropy_gradients() {
    let mask = AttentionMask::from_fn(3, 4, |r, c| c <= r + 1);
    check(&[random(3, 4, 10)], |g, v| {
        let s = g.masked_softmax(v[0], &mask).unwrap();
        probe(g, s, 4)
    });
    check(&[random(4, 5, 11)], |g, v| g.cross_entropy(v[0], &[1, usize::MAX, 4, 0], usize::MAX).unwrap());
    check(&[random(2, 6, 12)], |g, v| {
        let s = g.softmax(v[0]).unwrap();
        let m = g.mean(s).unwrap();
        let p = probe(g, v[0], 5);
        g.add(m, p).unwrap()
    });
}

#[test]
fn rope_gradients() {
    check(&[random(3, 8, 13)], |g, v| {
        let y = g.rope(v[0], &[0, 5, 17], 500_000.0, 4).unwrap();
        probe(g, y, 6)
    });
}

#[test]
fn masked_entries_are_exactly_zero() {
    let mut g = Graph::new();
    let x = g.leaf(random(3, 3, 14), true);
    let s = g.masked_softmax(x, &AttentionMask::causal(3)).unwrap();
    let v = g.value(s);
    for r in 0..3 {
        for c in r + 1..3 {
            assert_eq!(v.row(r)[c], 0.0);
        }
    }
    let l = probe(&mut g, s, 1);
    g.backward(l).unwrap();
    let gr = g.grad(x).unwrap();
    assert_eq!(gr[1], 0.0);
    assert_eq!(gr[2], 0.0);
    assert_eq!(gr[5], 0.0);
}

#[test]
fn cross_entropy_uniform_logits_is_log_vocab() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[3, 501]), false);
    let l = g.cross_entropy(x, &[0, 7, 500], usize::MAX).unwrap();
    assert!((g.value(l).item() - 501f64.ln()).abs() < 1e-12);
}

fn dot_after_rope(q: &[f64], k: &[f64], m: usize, n: usize) -> f64 {
    let mut g = Graph::new();
    let qv = g.leaf(Tensor::from_rows(1, q.len(), q.to_vec()).unwrap(), false);
    let kv = g.leaf(Tensor::from_rows(1, k.len(), k.to_vec()).unwrap(), false);
    let qr = g.rope(qv, &[m], 10_000.0, q.len()).unwrap();
    let kr = g.rope(kv, &[n], 10_000.0, k.len()).unwrap();
    g.value(qr).data().iter().zip(g.value(kr).data()).map(|(a, b)| a * b).sum()
}

proptest! {
    #[test]
    fn rope_scores_depend_only_on_offset(
        q in prop::collection::vec(-1.0f64..1.0, 8),
        k in prop::collection::vec(-1.0f64..1.0, 8),
        m in 0usize..200, n in 0usize..200, shift in 0usize..300,
    ) {
        let a = dot_after_rope(&q, &k, m, n);
        let b = dot_after_rope(&q, &k, m + shift, n + shift);
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn rope_preserves_norm(x in prop::collection::vec(-2.0f64..2.0, 6), p in 0usize..10_000) {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::from_rows(1, 6, x.clone()).unwrap(), false);
        let r = g.rope(v, &[p], 500_000.0, 6).unwrap();
        let n0: f64 = x.iter().map(|a| a * a).sum();
        let n1: f64 = g.value(r).data().iter().map(|a| a * a).sum();
        prop_assert!((n0 - n1).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one(x in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::from_rows(3, 4, x).unwrap(), false);
        let s = g.softmax(v).unwrap();
        for r in 0..3 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
