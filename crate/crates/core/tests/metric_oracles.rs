//! FID and KID against independent f64 oracles written here from scratch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use r2i_core::eval::{fid, kid, top1_scores};
use r2i_core::numerics::Tensor;
use r2i_core::verify::{class_at1_percent, metric_oracles, FID_ORACLE_TOLERANCE};

type Mat = Vec<Vec<f64>>;

fn features(n: usize, d: usize, seed: u64, mix: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let base: f64 = rng.sample(StandardNormal);
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            data.push((e * (1.0 + 0.2 * j as f64) + mix * base + 0.1 * j as f64) as f32);
        }
    }
    Tensor::new(&[n, d], data).unwrap()
}

fn rows(t: &Tensor) -> Mat {
    let d = t.shape()[1];
    t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn mean_cov(x: &Mat) -> (Vec<f64>, Mat) {
    let (n, d) = (x.len() as f64, x[0].len());
    let mu: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in x {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (r[i] - mu[i]) * (r[j] - mu[j]) / (n - 1.0);
            }
        }
    }
    (mu, c)
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = a.len();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// Gauss-Jordan inverse with partial pivoting.
fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let p = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
        m.swap(col, p);
        let piv = m[col][col];
        m[col].iter_mut().for_each(|v| *v /= piv);
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                let src = m[col].clone();
                m[r].iter_mut().zip(&src).for_each(|(v, s)| *v -= f * s);
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Principal square root by the Denman-Beavers iteration.
fn sqrtm(a: &Mat) -> Mat {
    let n = a.len();
    let mut y = a.clone();
    let mut z: Mat = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..60 {
        let (yi, zi) = (inverse(&y), inverse(&z));
        let ny: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect()).collect();
        let nz: Mat = (0..n).map(|i| (0..n).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect()).collect();
        y = ny;
        z = nz;
    }
    y
}

fn fid_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (ma, ca) = mean_cov(&rows(a));
    let (mb, cb) = mean_cov(&rows(b));
    let root = sqrtm(&matmul(&ca, &cb));
    let d = ca.len();
    let mean: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let tr = |m: &Mat| (0..d).map(|i| m[i][i]).sum::<f64>();
    mean + tr(&ca) + tr(&cb) - 2.0 * tr(&root)
}

fn kid_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let (ra, rb) = (rows(a), rows(b));
    let d = ra[0].len() as f64;
    let k = |x: &[f64], y: &[f64]| (x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / d + 1.0).powi(3);
    let (n, m) = (ra.len() as f64, rb.len() as f64);
    let mut saa = 0.0;
    for (i, x) in ra.iter().enumerate() {
        for (j, y) in ra.iter().enumerate() {
            if i != j {
                saa += k(x, y);
            }
        }
    }
    let mut sbb = 0.0;
    for (i, x) in rb.iter().enumerate() {
        for (j, y) in rb.iter().enumerate() {
            if i != j {
                sbb += k(x, y);
            }
        }
    }
    let sab: f64 = ra.iter().map(|x| rb.iter().map(|y| k(x, y)).sum::<f64>()).sum();
    saa / (n * (n - 1.0)) + sbb / (m * (m - 1.0)) - 2.0 * sab / (n * m)
}

#[test]
fn fid_matches_denman_beavers_oracle() {
    let a = features(400, 6, 1, 0.0);
    let b = features(300, 6, 2, 0.7);
    let (got, want) = (fid(&a, &b).unwrap(), fid_oracle(&a, &b));
    assert!((got - want).abs() <= 1e-6 * want.max(1.0), "fid {got} vs oracle {want}");
}

#[test]
fn kid_matches_pairwise_oracle() {
    let a = features(120, 5, 3, 0.0);
    let b = features(90, 5, 4, 0.5);
    let (got, want) = (kid(&a, &b).unwrap(), kid_oracle(&a, &b));
    assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "kid {got} vs oracle {want}");
}

#[test]
fn shifted_gaussian_fid_and_same_distribution_kid() {
    let m = metric_oracles(10_000, 8, 0).unwrap();
    assert!((m.fid_shifted - 4.0).abs() <= FID_ORACLE_TOLERANCE * 4.0, "fid {}", m.fid_shifted);
    assert!(m.fid_self.abs() <= 1e-6, "fid(A,A) {}", m.fid_self);
    assert!(m.kid_mean.abs() <= 3.0 * m.kid_se, "kid {} +- {}", m.kid_mean, m.kid_se);
}

#[test]
fn printed_class_score_at_two_decimals() {
    assert_eq!(class_at1_percent(112, 121).unwrap(), "92.56");
    let preds: Vec<usize> = (0..121).map(|i| if i < 112 { i % 6 } else { (i + 1) % 6 }).collect();
    let truth: Vec<usize> = (0..121).map(|i| i % 6).collect();
    let (_, class_at1) = top1_scores(&preds, &truth).unwrap();
    assert_eq!(format!("{:.2}", 100.0 * class_at1), "92.56");
}
