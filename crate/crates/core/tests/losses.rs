use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vlcap::losses::{mle_loss, vl_loss};
use vlcap::tensor::{Tape, Tensor};

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn infonce(tape: &mut Tape, f: &[Vec<f64>], ft: &[Vec<f64>], rho: f64) -> f64 {
    let a = tape.constant(Tensor::from_rows(f).unwrap());
    let b = tape.constant(Tensor::from_rows(ft).unwrap());
    let r = tape.constant(Tensor::scalar(rho));
    let l = vl_loss(tape, a, b, r, 100.0).unwrap();
    tape.item(l)
}

/// Exhaustive-loop symmetric InfoNCE.
fn brute_infonce(f: &[Vec<f64>], ft: &[Vec<f64>], rho: f64) -> f64 {
    let n = f.len();
    let scale = rho.exp().min(100.0);
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut dot = 0.0;
            for k in 0..f[i].len() {
                dot += f[i][k] * ft[j][k];
            }
            s[i][j] = scale * dot;
        }
    }
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..n {
        let mut zr = 0.0;
        let mut zc = 0.0;
        for j in 0..n {
            zr += s[i][j].exp();
            zc += s[j][i].exp();
        }
        rows += zr.ln() - s[i][i];
        cols += zc.ln() - s[i][i];
    }
    (rows + cols) / (2.0 * n as f64)
}

#[test]
fn smoothed_mle_matches_hand_expansion() {
    let mut tape = Tape::new();
    let rows = [[1.0, 2.0, 0.0, -1.0], [0.5, 0.5, 2.0, 0.0]];
    let logits = tape.constant(Tensor::from_rows(&rows.map(|r| r.to_vec())).unwrap());
    let loss = mle_loss(&mut tape, logits, &[1, 2], &[true, true], 0.1).unwrap();

    let z1 = 1f64.exp() + 2f64.exp() + 1.0 + (-1f64).exp();
    let z2 = 2.0 * 0.5f64.exp() + 2f64.exp() + 1.0;
    let (on, off) = (0.9, 0.1 / 3.0);
    let row1 = -(on * (2.0 - z1.ln()) + off * ((1.0 - z1.ln()) + (0.0 - z1.ln()) + (-1.0 - z1.ln())));
    let row2 = -(on * (2.0 - z2.ln()) + off * ((0.5 - z2.ln()) + (0.5 - z2.ln()) + (0.0 - z2.ln())));
    assert!((tape.item(loss) - (row1 + row2) / 2.0).abs() < 1e-12);
}

#[test]
fn unsmoothed_mle_is_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..7).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let targets = [0u32, 6, 3, 3, 1];
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::from_rows(&rows).unwrap());
    let loss = mle_loss(&mut tape, logits, &targets, &[true; 5], 0.0).unwrap();
    let want: f64 = rows
        .iter()
        .zip(targets)
        .map(|(r, t)| r.iter().map(|x| x.exp()).sum::<f64>().ln() - r[t as usize])
        .sum::<f64>()
        / 5.0;
    assert!((tape.item(loss) - want).abs() < 1e-12);
}

#[test]
fn infonce_matches_exhaustive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let f = unit_rows(&mut rng, 3, 4);
        let ft = unit_rows(&mut rng, 3, 4);
        let rho = rng.random_range(-1.0..3.0);
        let mut tape = Tape::new();
        assert!((infonce(&mut tape, &f, &ft, rho) - brute_infonce(&f, &ft, rho)).abs() < 1e-10);
    }
}

#[test]
fn logit_scale_is_clamped() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = unit_rows(&mut rng, 4, 3);
    let ft = unit_rows(&mut rng, 4, 3);
    let mut tape = Tape::new();
    let high = infonce(&mut tape, &f, &ft, 9.0);
    let at_cap = infonce(&mut tape, &f, &ft, 100f64.ln());
    assert!((high - at_cap).abs() < 1e-12);
}

#[test]
fn joint_row_permutation_leaves_loss_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f = unit_rows(&mut rng, 5, 3);
    let ft = unit_rows(&mut rng, 5, 3);
    let perm = [3, 0, 4, 1, 2];
    let pf: Vec<_> = perm.iter().map(|&i| f[i].clone()).collect();
    let pft: Vec<_> = perm.iter().map(|&i| ft[i].clone()).collect();
    let mut tape = Tape::new();
    let a = infonce(&mut tape, &f, &ft, 1.0);
    let b = infonce(&mut tape, &pf, &pft, 1.0);
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn raising_one_diagonal_similarity_lowers_the_loss() {
    // Embeddings in separate coordinates so off-diagonals stay fixed while the
    // first pair rotates into alignment.
    let pair = |theta: f64| {
        let f = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
        let ft = vec![vec![theta.cos(), theta.sin(), 0.0, 0.0], vec![0.0, 0.0, 0.6, 0.8]];
        (f, ft)
    };
    let mut tape = Tape::new();
    let mut prev = f64::INFINITY;
    for step in 0..6 {
        let (f, ft) = pair(1.5 - 0.3 * step as f64);
        let l = infonce(&mut tape, &f, &ft, 1.0);
        assert!(l < prev);
        prev = l;
    }
}

#[test]
fn rho_gradient_matches_finite_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = unit_rows(&mut rng, 4, 3);
    let ft = unit_rows(&mut rng, 4, 3);
    let rho0 = 1.2;
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_rows(&f).unwrap());
    let b = tape.constant(Tensor::from_rows(&ft).unwrap());
    let r = tape.leaf(Tensor::scalar(rho0).with_requires_grad(true));
    let l = vl_loss(&mut tape, a, b, r, 100.0).unwrap();
    tape.backward(l).unwrap();
    let analytic = tape.grad(r).unwrap()[0];
    let eps = 1e-6;
    let up = infonce(&mut tape, &f, &ft, rho0 + eps);
    let down = infonce(&mut tape, &f, &ft, rho0 - eps);
    assert!((analytic - (up - down) / (2.0 * eps)).abs() < 1e-7);
}
