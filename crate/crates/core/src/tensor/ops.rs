use super::{check_ring, increment, FactorMatrix, Tensor, TrCore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mode-`n` (1-based) tensor-vector product `T ×_n v`.
///
/// The result has mode `n` removed. Contracting an order-1 tensor yields a
/// single-element vector of shape `[1]`.
pub fn mode_n_vector_product<T: Scalar>(t: &Tensor<T>, v: &[T], n: usize) -> Result<Tensor<T>> {
    let d = t.order();
    if n == 0 || n > d {
        return Err(Error::Index(format!("mode {n} out of range for an order-{d} tensor")));
    }
    let dim = t.shape()[n - 1];
    if v.len() != dim {
        return Err(Error::shape(format!("vector of length {} cannot contract mode {n} of extent {dim}", v.len())));
    }
    let outer: usize = t.shape()[..n - 1].iter().product();
    let inner: usize = t.shape()[n..].iter().product();
    let data = t.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let base = o * dim * inner;
        for j in 0..inner {
            let mut acc = 0.0;
            for (k, vk) in v.iter().enumerate() {
                acc += data[base + k * inner + j].to_f64() * vk.to_f64();
            }
            out.push(T::from_f64(acc));
        }
    }
    let mut shape: Vec<usize> = t.shape().to_vec();
    shape.remove(n - 1);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::from_vec(&shape, out)
}

/// Column-wise Kronecker product of `A (I×R)` and `B (J×R)`, giving `(I·J)×R`.
pub fn khatri_rao<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.order() != 2 || b.order() != 2 {
        return Err(Error::shape("khatri_rao expects two matrices"));
    }
    let (i_rows, r) = (a.rows(), a.cols());
    let (j_rows, rb) = (b.rows(), b.cols());
    if r != rb {
        return Err(Error::shape(format!("khatri_rao column mismatch: {r} vs {rb}")));
    }
    let mut out = Vec::with_capacity(i_rows * j_rows * r);
    for i in 0..i_rows {
        for j in 0..j_rows {
            for c in 0..r {
                out.push(T::from_f64(a.row(i)[c].to_f64() * b.row(j)[c].to_f64()));
            }
        }
    }
    Tensor::matrix(i_rows * j_rows, r, out)
}

/// Plain matrix product, accumulated in f64 in ascending inner-index order.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.order() != 2 || b.order() != 2 || a.cols() != b.rows() {
        return Err(Error::shape(format!("cannot multiply {:?} by {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = ad[i * k + p].to_f64();
            for (j, o) in row.iter_mut().enumerate() {
                *o += x * bd[p * n + j].to_f64();
            }
        }
    }
    Tensor::matrix(m, n, out.into_iter().map(T::from_f64).collect())
}

/// Materializes `Σ_r ∏_k U^(k)(r, i_k)` on the given target shape.
pub fn cp_materialize<T: Scalar>(factors: &[FactorMatrix<T>], shape: &[usize]) -> Result<Tensor<T>> {
    if factors.is_empty() || factors.len() != shape.len() {
        return Err(Error::shape(format!("{} factors for an order-{} target", factors.len(), shape.len())));
    }
    let rank = factors[0].rank();
    for (k, f) in factors.iter().enumerate() {
        if f.rank() != rank {
            return Err(Error::Rank(format!("factor {} has rank {} but factor 1 has rank {rank}", k + 1, f.rank())));
        }
        if f.dim() != shape[k] {
            return Err(Error::shape(format!("factor {} has {} columns but mode {} has extent {}", k + 1, f.dim(), k + 1, shape[k])));
        }
    }
    let mut idx = vec![0usize; shape.len()];
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        let mut acc = 0.0;
        for r in 0..rank {
            let mut prod = 1.0;
            for (k, f) in factors.iter().enumerate() {
                prod *= f.at(r, idx[k]).to_f64();
            }
            acc += prod;
        }
        out.push(T::from_f64(acc));
        increment(&mut idx, shape);
    }
    Tensor::from_vec(shape, out)
}

/// Materializes a tensor ring: each element is `tr(∏_k core_k[:, i_k, :])`.
pub fn tr_materialize<T: Scalar>(cores: &[TrCore<T>]) -> Result<Tensor<T>> {
    check_ring(cores)?;
    let shape: Vec<usize> = cores.iter().map(|c| c.dim()).collect();
    let slices: Vec<Vec<Vec<f64>>> = cores.iter().map(|c| (0..c.dim()).map(|i| c.lateral_slice(i)).collect()).collect();
    let r0 = cores[0].rank_in();
    let mut idx = vec![0usize; shape.len()];
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        // running product is r0 × cols
        let mut prod = slices[0][idx[0]].clone();
        let mut cols = cores[0].rank_out();
        for k in 1..cores.len() {
            let next = &slices[k][idx[k]];
            let ncols = cores[k].rank_out();
            prod = small_matmul(&prod, next, r0, cols, ncols);
            cols = ncols;
        }
        let trace: f64 = (0..r0).map(|r| prod[r * cols + r]).sum();
        out.push(T::from_f64(trace));
        increment(&mut idx, &shape);
    }
    Tensor::from_vec(&shape, out)
}

/// `(m×k) · (k×n)` on flat row-major slices.
pub(crate) fn small_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let x = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += x * b[p * n + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn mode_product_scalar_case() {
        let t = Tensor::from_vec(&[1, 1, 1], vec![2.0]).unwrap();
        let r = mode_n_vector_product(&t, &[3.0], 1).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[6.0]);
    }

    #[test]
    fn mode_product_basis_selects_row() {
        let t = Tensor::from_fn(&[3, 4], |ix| (ix[0] * 4 + ix[1]) as f64);
        let r = mode_n_vector_product(&t, &[1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(r.data(), t.row(0));
    }

    #[test]
    fn mode_product_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random(&[2, 2, 2], &mut rng);
        let r = mode_n_vector_product(&t, &[1.0, 1.0], 1).unwrap();
        for j in 0..2 {
            for k in 0..2 {
                let want = t.get(&[0, j, k]) + t.get(&[1, j, k]);
                assert_eq!(r.get(&[j, k]), want);
            }
        }
        // middle mode against a naive loop
        let v = [0.3, -1.7];
        let r2 = mode_n_vector_product(&t, &v, 2).unwrap();
        for i in 0..2 {
            for k in 0..2 {
                let want: f64 = (0..2).map(|j| t.get(&[i, j, k]) * v[j]).sum();
                assert_eq!(r2.get(&[i, k]), want);
            }
        }
    }

    #[test]
    fn mode_product_errors() {
        let t = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(mode_n_vector_product(&t, &[1.0; 2], 2), Err(Error::Shape(_))));
        assert!(mode_n_vector_product(&t, &[1.0; 2], 0).is_err());
        assert!(mode_n_vector_product(&t, &[1.0; 2], 3).is_err());
    }

    #[test]
    fn khatri_rao_examples() {
        let a = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let kr = khatri_rao(&a, &b).unwrap();
        assert_eq!(kr.shape(), &[4, 2]);
        let col0: Vec<f64> = (0..4).map(|i| kr.get(&[i, 0])).collect();
        let col1: Vec<f64> = (0..4).map(|i| kr.get(&[i, 1])).collect();
        assert_eq!(col0, vec![2.0, 4.0, 0.0, 0.0]);
        assert_eq!(col1, vec![0.0, 0.0, 3.0, 5.0]);

        // single column: plain Kronecker product
        let u = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let v = Tensor::matrix(3, 1, vec![3.0, 4.0, 5.0]).unwrap();
        assert_eq!(khatri_rao(&u, &v).unwrap().data(), &[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]);

        // all-ones left operand stacks B
        let ones = Tensor::filled(&[3, 2], 1.0);
        let kr = khatri_rao(&ones, &b).unwrap();
        for blk in 0..3 {
            assert_eq!(&kr.data()[blk * 4..blk * 4 + 4], b.data());
        }

        assert!(khatri_rao(&a, &Tensor::<f64>::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn cp_rank_one_is_outer_product() {
        let f: Vec<FactorMatrix> = vec![
            FactorMatrix::new(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap(),
            FactorMatrix::new(Tensor::matrix(1, 3, vec![1.0, -1.0, 0.5]).unwrap()).unwrap(),
        ];
        let t = cp_materialize(&f, &[2, 3]).unwrap();
        assert_eq!(t.data(), &[1.0, -1.0, 0.5, 2.0, -2.0, 1.0]);
    }

    #[test]
    fn cp_matricization_matches_khatri_rao() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (r, n, i, o) = (3, 2, 4, 3);
        let u1 = random(&[r, n], &mut rng);
        let u2 = random(&[r, i], &mut rng);
        let u3 = random(&[r, o], &mut rng);
        let f: Vec<FactorMatrix> = [&u1, &u2, &u3].iter().map(|t| FactorMatrix::new((*t).clone()).unwrap()).collect();
        let w = cp_materialize(&f, &[n, i, o]).unwrap();
        // mode-2 unfolding: rows i, columns (n, o) with o fastest
        let kr = khatri_rao(&u1.transpose(), &u3.transpose()).unwrap();
        let unfold = matmul(&u2.transpose(), &kr.transpose()).unwrap();
        for ii in 0..i {
            for nn in 0..n {
                for oo in 0..o {
                    let a = w.get(&[nn, ii, oo]);
                    let b = unfold.get(&[ii, nn * o + oo]);
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn cp_errors() {
        let f = vec![FactorMatrix::<f64>::zeros(2, 3), FactorMatrix::zeros(3, 3)];
        assert!(matches!(cp_materialize(&f, &[3, 3]), Err(Error::Rank(_))));
        let f = vec![FactorMatrix::<f64>::zeros(2, 3), FactorMatrix::zeros(2, 3)];
        assert!(matches!(cp_materialize(&f, &[3, 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn tr_rank_one_ring_is_outer_product() {
        let cores = vec![
            TrCore::new(Tensor::from_vec(&[1, 2, 1], vec![2.0, 3.0]).unwrap()).unwrap(),
            TrCore::new(Tensor::from_vec(&[1, 2, 1], vec![1.0, -1.0]).unwrap()).unwrap(),
            TrCore::new(Tensor::from_vec(&[1, 1, 1], vec![0.5]).unwrap()).unwrap(),
        ];
        let t = tr_materialize(&cores).unwrap();
        assert_eq!(t.shape(), &[2, 2, 1]);
        assert_eq!(t.data(), &[1.0, -1.0, 1.5, -1.5]);
    }

    #[test]
    fn tr_with_unit_first_rank_is_tensor_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cores = vec![
            TrCore::new(random(&[1, 2, 3], &mut rng)).unwrap(),
            TrCore::new(random(&[3, 3, 2], &mut rng)).unwrap(),
            TrCore::new(random(&[2, 2, 1], &mut rng)).unwrap(),
        ];
        let t = tr_materialize(&cores).unwrap();
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..2 {
                    // left-to-right vector chain
                    let v: Vec<f64> = (0..3).map(|s| cores[0].at(0, a, s)).collect();
                    let w: Vec<f64> = (0..2).map(|s| (0..3).map(|r| v[r] * cores[1].at(r, b, s)).sum()).collect();
                    let x: f64 = (0..2).map(|r| w[r] * cores[2].at(r, c, 0)).sum();
                    assert!((t.get(&[a, b, c]) - x).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn tr_rejects_open_ring() {
        let cores = vec![TrCore::<f64>::zeros(2, 2, 3), TrCore::zeros(3, 2, 3)];
        assert!(matches!(tr_materialize(&cores), Err(Error::RingClosure(_))));
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(3, 1, vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[-2.0, -2.0]);
        assert!(matmul(&b, &b).is_err());
    }
}
