use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::error::Error;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

fn check(f: impl FnMut(&mut Tape, &[Var]) -> crate::error::Result<Var>, params: &[Matrix], tol: f64) -> GradCheckReport {
    let opts = GradCheckOptions {
        tol,
        ..GradCheckOptions::default()
    };
    let report = finite_difference_check(f, params, &opts).unwrap();
    assert!(report.passed(), "{:?}", report);
    report
}

#[test]
fn matmul_identity_and_oracle() {
    let mut t = Tape::new();
    let x = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
    let i2 = t.constant(Matrix::identity(2));
    let xv = t.constant(x.clone());
    let y = t.matmul(i2, xv).unwrap();
    assert_eq!(t.value(y), &x);

    let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.matmul(av, bv).unwrap();
    assert_eq!(t.value(c), &triple_loop(&a, &b));
    assert_eq!(t.value(c), &Matrix::from_rows(&[vec![2.0, 1.0], vec![4.0, 3.0]]).unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (p, q) = (random(4, 7, &mut rng), random(7, 3, &mut rng));
    let (pv, qv) = (t.constant(p.clone()), t.constant(q.clone()));
    let r = t.matmul(pv, qv).unwrap();
    let oracle = triple_loop(&p, &q);
    for (x, y) in t.value(r).data().iter().zip(oracle.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut t = Tape::new();
    let a = t.constant(Matrix::zeros(2, 3));
    let b = t.constant(Matrix::zeros(2, 3));
    assert!(matches!(t.matmul(a, b), Err(Error::DimensionMismatch { .. })));
}

#[test]
fn grad_of_sum_matmul_with_ones_is_all_n() {
    let (m, k, n) = (3, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(m, k, &mut rng);
    let mut t = Tape::new();
    let av = t.leaf(a.clone());
    let ones = t.constant(Matrix::filled(k, n, 1.0));
    let prod = t.matmul(av, ones).unwrap();
    let loss = t.sum(prod);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(av).unwrap(), &Matrix::filled(m, k, n as f64));

    let opts = GradCheckOptions {
        h: 1e-6,
        tol: 1e-6,
        ..GradCheckOptions::default()
    };
    let report = finite_difference_check(
        |t, v| {
            let ones = t.constant(Matrix::filled(k, n, 1.0));
            let p = t.matmul(v[0], ones)?;
            Ok(t.sum(p))
        },
        &[a],
        &opts,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.constant(Matrix::from_rows(&[vec![0.0, 0.0, 0.0], vec![1f64.ln(), 2f64.ln(), 3f64.ln()]]).unwrap());
    let y = t.softmax_rows(x);
    let v = t.value(y);
    for c in 0..3 {
        assert!((v.get(0, c) - 1.0 / 3.0).abs() < 1e-15);
        assert!((v.get(1, c) - (c as f64 + 1.0) / 6.0).abs() < 1e-15);
    }
    let shifted = t.constant(Matrix::from_rows(&[vec![100.0, 100.0, 100.0], vec![1f64.ln() - 7.5, 2f64.ln() - 7.5, 3f64.ln() - 7.5]]).unwrap());
    let ys = t.softmax_rows(shifted);
    for (a, b) in t.value(ys).data().iter().zip(t.value(y).data()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t = Tape::new();
    for _ in 0..20 {
        let x = random(6, 9, &mut rng).map(|v| v * 30.0);
        let xv = t.constant(x);
        let y = t.softmax_rows(xv);
        for r in 0..6 {
            let s: f64 = t.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(t.value(y).row(r).iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let x = t.constant(Matrix::from_rows(&[vec![4.0, 4.0, 4.0], vec![1.0, 3.0, 2.0]]).unwrap());
    let g = t.constant(Matrix::filled(1, 3, 1.0));
    let b = t.constant(Matrix::zeros(1, 3));
    let y = t.layer_norm_rows(x, g, b).unwrap();
    assert!(t.value(y).row(0).iter().all(|&v| v == 0.0));

    let x2 = t.constant(Matrix::row_vector(&[1.0, 3.0]));
    let g2 = t.constant(Matrix::filled(1, 2, 1.0));
    let b2 = t.constant(Matrix::zeros(1, 2));
    let y2 = t.layer_norm_rows(x2, g2, b2).unwrap();
    // mean 2, variance 1: (x - 2) / sqrt(1 + 1e-5)
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((t.value(y2).get(0, 0) + expect).abs() < 1e-15);
    assert!((t.value(y2).get(0, 1) - expect).abs() < 1e-15);
    assert!((expect - 1.0).abs() < 1e-5);

    // constant rows return the bias exactly
    let bias = Matrix::row_vector(&[0.3, -1.25, 7.0]);
    let gain = Matrix::row_vector(&[2.0, -3.0, 0.5]);
    let xc = t.constant(Matrix::filled(2, 3, -9.5));
    let gv = t.constant(gain);
    let bv = t.constant(bias.clone());
    let yc = t.layer_norm_rows(xc, gv, bv).unwrap();
    assert_eq!(t.value(yc).row(1), bias.data());

    let one = t.constant(Matrix::zeros(2, 1));
    let g1 = t.constant(Matrix::zeros(1, 1));
    assert!(t.layer_norm_rows(one, g1, g1).is_err());
    assert!(t.layer_norm_rows(x, g2, b2).is_err());
}

#[test]
fn mean_rows_and_concat() {
    let mut t = Tape::new();
    let single = t.constant(Matrix::row_vector(&[3.0, -1.0]));
    let m = t.mean_rows(single).unwrap();
    assert_eq!(t.value(m), t.value(single));
    let sym = t.constant(Matrix::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap());
    let m2 = t.mean_rows(sym).unwrap();
    assert_eq!(t.value(m2).data(), &[1.0, 1.0]);

    let c = t.concat_rows(&[sym]).unwrap();
    assert_eq!(t.value(c), t.value(sym));
    let g = t.constant(Matrix::zeros(1, 8));
    let e = t.constant(Matrix::zeros(3, 8));
    let cat = t.concat_rows(&[g, e]).unwrap();
    assert_eq!(t.shape(cat), (4, 8));
    assert!(t.concat_rows(&[g, sym]).is_err());
}

#[test]
fn cosine_and_frobenius_examples() {
    let mut t = Tape::new();
    let u = t.constant(Matrix::row_vector(&[0.3, -2.0, 5.0]));
    let c = t.cosine_similarity(u, u).unwrap();
    assert!((t.value(c).item() - 1.0).abs() < 1e-15);
    let ex = t.constant(Matrix::row_vector(&[1.0, 0.0]));
    let ey = t.constant(Matrix::row_vector(&[0.0, 1.0]));
    let c0 = t.cosine_similarity(ex, ey).unwrap();
    assert_eq!(t.value(c0).item(), 0.0);
    let d = t.constant(Matrix::row_vector(&[1.0, 1.0]));
    let c1 = t.cosine_similarity(d, ex).unwrap();
    assert!((t.value(c1).item() - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    let z = t.constant(Matrix::zeros(1, 2));
    assert!(matches!(t.cosine_similarity(z, ex), Err(Error::ZeroVector(_))));

    let zero = t.constant(Matrix::zeros(3, 3));
    let f0 = t.frobenius_sq(zero);
    assert_eq!(t.value(f0).item(), 0.0);
    let i3 = t.constant(Matrix::identity(3));
    let f1 = t.frobenius_sq(i3);
    assert_eq!(t.value(f1).item(), 3.0);
    let a = t.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let f2 = t.frobenius_sq(a);
    assert_eq!(t.value(f2).item(), 30.0);
}

#[test]
fn backward_basic_gradients_and_accumulation() {
    let p = Matrix::row_vector(&[0.5, -1.5, 2.0]);
    let mut t = Tape::new();
    let pv = t.leaf(p.clone());
    let s = t.sum(pv);
    t.backward(s).unwrap();
    assert_eq!(t.grad(pv).unwrap(), &Matrix::filled(1, 3, 1.0));
    t.backward(s).unwrap();
    assert_eq!(t.grad(pv).unwrap(), &Matrix::filled(1, 3, 2.0));
    t.zero_grads();
    let sq = t.frobenius_sq(pv);
    t.backward(sq).unwrap();
    assert_eq!(t.grad(pv).unwrap(), &p.map(|v| 2.0 * v));

    assert!(matches!(t.backward(pv), Err(Error::NotScalar { rows: 1, cols: 3 })));
}

#[test]
fn shared_subexpression_matches_tree_expansion() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(3, 4, &mut rng);
    let w = random(4, 4, &mut rng);

    let mut dag = Tape::new();
    let (xv, wv) = (dag.leaf(x.clone()), dag.leaf(w.clone()));
    let y = dag.matmul(xv, wv).unwrap();
    let sm = dag.softmax_rows(y);
    let prod = dag.mul(sm, y).unwrap();
    let l = dag.sum(prod);
    dag.backward(l).unwrap();

    let mut tree = Tape::new();
    let (xt, wt) = (tree.leaf(x), tree.leaf(w));
    let y1 = tree.matmul(xt, wt).unwrap();
    let y2 = tree.matmul(xt, wt).unwrap();
    let sm = tree.softmax_rows(y1);
    let prod = tree.mul(sm, y2).unwrap();
    let l2 = tree.sum(prod);
    tree.backward(l2).unwrap();

    assert_eq!(dag.value(l).item(), tree.value(l2).item());
    for (a, b) in dag.grad(wv).unwrap().data().iter().zip(tree.grad(wt).unwrap().data()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in dag.grad(xv).unwrap().data().iter().zip(tree.grad(xt).unwrap().data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn constants_receive_no_gradient() {
    let mut t = Tape::new();
    let c = t.constant(Matrix::row_vector(&[1.0, 2.0]));
    let p = t.leaf(Matrix::row_vector(&[3.0, 4.0]));
    let s = t.add(c, p).unwrap();
    let l = t.frobenius_sq(s);
    t.backward(l).unwrap();
    assert!(t.grad(c).is_none());
    assert!(!t.requires_grad(c));
    assert_eq!(t.grad(p).unwrap().data(), &[8.0, 12.0]);
}

#[test]
fn quadratic_gradcheck_is_tight() {
    let p = Matrix::row_vector(&[0.4, -1.1, 2.5, 0.0]);
    let opts = GradCheckOptions::default();
    let r = finite_difference_check(|t, v| Ok(t.frobenius_sq(v[0])), &[p], &opts).unwrap();
    assert!(r.max_rel_err() < 1e-9, "{r:?}");
}

#[test]
fn softmax_cross_entropy_chain_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(5, 6, &mut rng);
    let w = random(6, 4, &mut rng);
    let r = check(
        |t, v| {
            let logits = t.matmul(v[0], v[1])?;
            t.softmax_cross_entropy(logits, &[0, 3, 1, 1, 2])
        },
        &[x, w],
        1e-6,
    );
    assert!(r.max_rel_err() < 1e-6);
}

/// Every primitive against central differences on 20 seeds.
#[test]
fn primitives_pass_finite_differences_on_20_seeds() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let a = random(3, 5, &mut rng);
        let b = random(5, 4, &mut rng);
        let g = random(1, 5, &mut rng);
        let bias = random(1, 5, &mut rng);
        let u = random(1, 5, &mut rng);
        let probe = random(3, 5, &mut rng);
        let probe_t = random(5, 3, &mut rng);

        check(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                let p = t.constant(Matrix::filled(3, 4, 0.7));
                let m = t.mul(c, p)?;
                Ok(t.frobenius_sq(m))
            },
            &[a.clone(), b.clone()],
            1e-4,
        );
        check(
            |t, v| {
                let s = t.softmax_rows(v[0]);
                let pr = t.constant(probe.clone());
                let m = t.mul(s, pr)?;
                Ok(t.sum(m))
            },
            &[a.clone()],
            1e-4,
        );
        check(
            |t, v| {
                let y = t.layer_norm_rows(v[0], v[1], v[2])?;
                let pr = t.constant(probe.clone());
                let m = t.mul(y, pr)?;
                Ok(t.sum(m))
            },
            &[a.clone(), g.clone(), bias.clone()],
            1e-4,
        );
        check(
            |t, v| {
                let m = t.mean_rows(v[0])?;
                let cat = t.concat_rows(&[m, v[0], v[1]])?;
                let tr = t.transpose(cat);
                let s = t.slice_rows(tr, 1, 3)?;
                let sc = t.slice_cols(s, 2, 3)?;
                Ok(t.frobenius_sq(sc))
            },
            &[a.clone(), u.clone()],
            1e-4,
        );
        check(
            |t, v| {
                let h = t.slice_cols(v[0], 0, 2)?;
                let h2 = t.slice_cols(v[0], 2, 3)?;
                let j = t.concat_cols(&[h2, h])?;
                let gat = t.gather_rows(j, &[2, 0, 2, 1])?;
                let ge = t.gelu(gat);
                let r = t.add_row(ge, v[1])?;
                let pr = t.constant(Matrix::filled(4, 5, -0.3));
                let d = t.sub(r, pr)?;
                let sc = t.scale(d, 1.7);
                let sh = t.add_scalar(sc, 0.2);
                Ok(t.frobenius_sq(sh))
            },
            &[a.clone(), g.clone()],
            1e-4,
        );
        check(
            |t, v| {
                let c = t.cosine_similarity(v[0], v[1])?;
                let n = t.l2_normalize_rows(v[2])?;
                let pr = t.constant(probe_t.clone());
                let prod = t.matmul(n, pr)?;
                let ce = t.softmax_cross_entropy(prod, &[2, 0, 1])?;
                let s = t.add(c, ce)?;
                Ok(t.scale(s, 0.5))
            },
            &[u.clone(), g.clone(), a.clone()],
            1e-4,
        );
    }
}

#[test]
fn mac_counter_tracks_matmuls() {
    let mut t = Tape::new();
    let a = t.constant(Matrix::zeros(3, 4));
    let b = t.constant(Matrix::zeros(4, 5));
    t.matmul(a, b).unwrap();
    assert_eq!(t.macs(), 60);
}
