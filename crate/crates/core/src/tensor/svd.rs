//! One-sided (Hestenes) Jacobi SVD for the small matrices used in rank checks
//! and truncation experiments.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default relative threshold for [`numerical_rank`] at 64-bit.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

const MAX_SWEEPS: usize = 100;

/// Thin SVD `M = U diag(s) Vᵀ` with `s` descending; `k = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Tensor<f64>,
    pub s: Vec<f64>,
    pub vt: Tensor<f64>,
}

impl Svd {
    /// Reconstruction from the leading `k` singular triples.
    pub fn reconstruct(&self, k: usize) -> Tensor<f64> {
        let (m, n) = (self.u.rows(), self.vt.cols());
        let k = k.min(self.s.len());
        let mut out = vec![0.0; m * n];
        for j in 0..k {
            let sj = self.s[j];
            if sj == 0.0 {
                continue;
            }
            for r in 0..m {
                let ur = self.u.data()[r * self.s.len() + j] * sj;
                let row = &mut out[r * n..(r + 1) * n];
                for (c, o) in row.iter_mut().enumerate() {
                    *o += ur * self.vt.data()[j * n + c];
                }
            }
        }
        Tensor::matrix(m, n, out).expect("svd reconstruction shape")
    }
}

pub fn svd<T: Scalar>(m: &Tensor<T>) -> Result<Svd> {
    if m.order() != 2 {
        return Err(Error::shape(format!("svd expects a matrix, got shape {:?}", m.shape())));
    }
    if m.data().iter().any(|x| !x.to_f64().is_finite()) {
        return Err(Error::Domain("svd input has non-finite entries".into()));
    }
    let tol = T::DTYPE.svd_tolerance();
    let (rows, cols) = (m.rows(), m.cols());
    if rows >= cols {
        let (u, s, v) = jacobi(m.to_f64(), tol);
        Ok(Svd { u, s, vt: v.transpose() })
    } else {
        let (u, s, v) = jacobi(m.to_f64().transpose(), tol);
        Ok(Svd { u: v, s, vt: u.transpose() })
    }
}

/// Returns `(U m×n, s, V n×n)` for a tall matrix (`m ≥ n`).
fn jacobi(a: Tensor<f64>, tol: f64) -> (Tensor<f64>, Vec<f64>, Tensor<f64>) {
    let (m, n) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.data()[i * n + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let mut u = Tensor::<f64>::zeros(&[m, n]);
    let mut vm = Tensor::<f64>::zeros(&[n, n]);
    let mut s = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        s.push(sigma);
        for i in 0..m {
            u.data_mut()[i * n + dst] = if sigma > 0.0 { cols[src][i] / sigma } else { 0.0 };
        }
        for i in 0..n {
            vm.data_mut()[i * n + dst] = v[src][i];
        }
    }
    (u, s, vm)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Singular values in descending order.
pub fn singular_values<T: Scalar>(m: &Tensor<T>) -> Result<Vec<f64>> {
    Ok(svd(m)?.s)
}

/// Best rank-`k` approximation (Eckart–Young) of `m`.
pub fn truncate<T: Scalar>(m: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    Ok(svd(m)?.reconstruct(k).cast())
}

/// Number of singular values above `tol · σ_max`.
pub fn numerical_rank<T: Scalar>(m: &Tensor<T>, tol: f64) -> Result<usize> {
    let s = singular_values(m)?;
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x > tol * top).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_case() {
        let m = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, -2.0]).unwrap();
        let s = singular_values(&m).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-14 && (s[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let m = Tensor::from_fn(&[5, 5], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 });
        assert!(singular_values(&m).unwrap().iter().all(|&s| (s - 1.0).abs() < 1e-15));
    }

    #[test]
    fn two_by_two_matches_gram_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let d: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (a, b, c, e) = (d[0], d[1], d[2], d[3]);
            // Gram matrix MᵀM = [[p, q], [q, r]]
            let p = a * a + c * c;
            let q = a * b + c * e;
            let r = b * b + e * e;
            let disc = ((p - r) * (p - r) + 4.0 * q * q).sqrt();
            let l1 = (p + r + disc) / 2.0;
            let l2 = ((p + r - disc) / 2.0).max(0.0);
            let s = singular_values(&Tensor::matrix(2, 2, d).unwrap()).unwrap();
            assert!((s[0] - l1.sqrt()).abs() < 1e-10);
            assert!((s[1] - l2.sqrt()).abs() < 1e-7);
        }
    }

    #[test]
    fn wide_and_tall_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(m, n) in &[(3, 7), (7, 3), (4, 4)] {
            let a = Tensor::from_fn(&[m, n], |_| rng.random_range(-1.0..1.0));
            let full = truncate(&a, m.min(n)).unwrap();
            assert!(full.rel_l2_error(&a) < 1e-12);
            let dec = svd(&a).unwrap();
            assert!(dec.s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn truncation_error_is_tail_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::from_fn(&[6, 5], |_| rng.random_range(-1.0..1.0));
        let s = singular_values(&a).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=5 {
            let t = truncate(&a, k).unwrap();
            let err = {
                let d: f64 = a.data().iter().zip(t.data()).map(|(x, y)| (x - y) * (x - y)).sum();
                d.sqrt()
            };
            let tail = s[k..].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((err - tail).abs() < 1e-8);
            assert!(err <= prev + 1e-12);
            prev = err;
            assert!(numerical_rank(&t, DEFAULT_RANK_TOL).unwrap() <= k);
        }
    }

    #[test]
    fn rank_of_outer_product_is_one() {
        let m = Tensor::from_fn(&[4, 3], |ix| (ix[0] as f64 + 1.0) * (ix[1] as f64 - 0.5));
        assert_eq!(numerical_rank(&m, DEFAULT_RANK_TOL).unwrap(), 1);
        assert_eq!(numerical_rank(&Tensor::<f64>::zeros(&[2, 2]), DEFAULT_RANK_TOL).unwrap(), 0);
    }

    #[test]
    fn rejects_non_finite() {
        let m = Tensor::matrix(1, 2, vec![f64::NAN, 1.0]).unwrap();
        assert!(matches!(svd(&m), Err(Error::Domain(_))));
    }
}
