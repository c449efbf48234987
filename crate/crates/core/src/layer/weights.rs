//! Per-sample multilinear contraction of the expert tensor with its mode vectors.
//!
//! Every kind contracts the same list of mode vectors `[a_1, …, a_E, z̃]` and
//! produces an output of length `O`; only the storage of the weight tensor
//! differs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{cp_materialize, increment, tr_materialize, FactorMatrix, Tensor, TrCore};

/// Expert weight tensor in one of the supported storage forms.
#[derive(Debug, Clone, PartialEq)]
pub enum Weights<T = f64> {
    /// Full tensor of shape `[N_1, …, N_E, I', O]`.
    Dense(Tensor<T>),
    /// `E + 2` factor matrices of shape `R × d_k`, the last one for the output mode.
    Cp(Vec<FactorMatrix<T>>),
    /// `E + 2` ring cores of shape `(R_k, d_k, R_{k+1})`, the last one for the output mode.
    Tr(Vec<TrCore<T>>),
}

/// Intermediate products kept from a forward contraction.
#[derive(Debug, Clone)]
pub enum SampleCache {
    Dense,
    /// `U_k v_k` per input mode and their elementwise product.
    Cp { partial: Vec<Vec<f64>>, product: Vec<f64> },
    /// `core_k ×_2 v_k` per input mode (row-major `R_k × R_{k+1}`) and their chain product.
    Tr { slices: Vec<Vec<f64>>, chain: Vec<f64> },
}

impl<T: Scalar> Weights<T> {
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        match self {
            Weights::Dense(w) => vec![w],
            Weights::Cp(f) => f.iter().map(|m| m.tensor()).collect(),
            Weights::Tr(c) => c.iter().map(|m| m.tensor()).collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Weights::Dense(w) => vec![w],
            Weights::Cp(f) => f.iter_mut().map(|m| m.tensor_mut()).collect(),
            Weights::Tr(c) => c.iter_mut().map(|m| m.tensor_mut()).collect(),
        }
    }

    /// Extents `[d_1, …, d_{E+1}, O]` implied by the stored arrays.
    pub fn mode_dims(&self) -> Vec<usize> {
        match self {
            Weights::Dense(w) => w.shape().to_vec(),
            Weights::Cp(f) => f.iter().map(|m| m.dim()).collect(),
            Weights::Tr(c) => c.iter().map(|m| m.dim()).collect(),
        }
    }

    /// The full weight tensor.
    pub fn materialize(&self) -> Result<Tensor<T>> {
        match self {
            Weights::Dense(w) => Ok(w.clone()),
            Weights::Cp(f) => cp_materialize(f, &self.mode_dims()),
            Weights::Tr(c) => tr_materialize(c),
        }
    }

    /// Contracts the weight tensor with one vector per input mode.
    pub fn apply(&self, modes: &[&[f64]]) -> (Vec<f64>, SampleCache) {
        match self {
            Weights::Dense(w) => (dense_apply(w, modes), SampleCache::Dense),
            Weights::Cp(f) => cp_apply(f, modes),
            Weights::Tr(c) => tr_apply(c, modes),
        }
    }

    /// Reverse pass of [`Weights::apply`]: accumulates weight gradients into
    /// `grads` (one flat buffer per stored tensor) and returns the gradient
    /// with respect to each mode vector.
    pub fn backward(&self, modes: &[&[f64]], cache: &SampleCache, upstream: &[f64], grads: &mut [Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match (self, cache) {
            (Weights::Dense(w), SampleCache::Dense) => Ok(dense_backward(w, modes, upstream, &mut grads[0])),
            (Weights::Cp(f), SampleCache::Cp { partial, product }) => Ok(cp_backward(f, modes, partial, product, upstream, grads)),
            (Weights::Tr(c), SampleCache::Tr { slices, chain }) => Ok(tr_backward(c, modes, slices, chain, upstream, grads)),
            _ => Err(Error::usage("forward cache was produced by a different weight kind")),
        }
    }
}

fn dense_apply<T: Scalar>(w: &Tensor<T>, modes: &[&[f64]]) -> Vec<f64> {
    let shape = w.shape();
    let o = shape[shape.len() - 1];
    let in_shape = &shape[..shape.len() - 1];
    let count: usize = in_shape.iter().product();
    let mut y = vec![0.0; o];
    let mut idx = vec![0usize; in_shape.len()];
    for j in 0..count {
        let coef: f64 = idx.iter().zip(modes).map(|(&i, v)| v[i]).product();
        if coef != 0.0 {
            for (yo, wv) in y.iter_mut().zip(&w.data()[j * o..(j + 1) * o]) {
                *yo += coef * wv.to_f64();
            }
        }
        increment(&mut idx, in_shape);
    }
    y
}

fn dense_backward<T: Scalar>(w: &Tensor<T>, modes: &[&[f64]], g: &[f64], dw: &mut [f64]) -> Vec<Vec<f64>> {
    let shape = w.shape();
    let o = shape[shape.len() - 1];
    let in_shape = &shape[..shape.len() - 1];
    let count: usize = in_shape.iter().product();
    let mut dmodes: Vec<Vec<f64>> = in_shape.iter().map(|&d| vec![0.0; d]).collect();
    let mut idx = vec![0usize; in_shape.len()];
    for j in 0..count {
        let row = &w.data()[j * o..(j + 1) * o];
        let coef: f64 = idx.iter().zip(modes).map(|(&i, v)| v[i]).product();
        for (d, gv) in dw[j * o..(j + 1) * o].iter_mut().zip(g) {
            *d += coef * gv;
        }
        let wg: f64 = row.iter().zip(g).map(|(a, b)| a.to_f64() * b).sum();
        for k in 0..idx.len() {
            let others: f64 = (0..idx.len()).filter(|&l| l != k).map(|l| modes[l][idx[l]]).product();
            dmodes[k][idx[k]] += wg * others;
        }
        increment(&mut idx, in_shape);
    }
    dmodes
}

fn factor_times_vector<T: Scalar>(f: &FactorMatrix<T>, v: &[f64]) -> Vec<f64> {
    (0..f.rank())
        .map(|r| f.tensor().row(r).iter().zip(v).map(|(u, x)| u.to_f64() * x).sum())
        .collect()
}

fn cp_apply<T: Scalar>(factors: &[FactorMatrix<T>], modes: &[&[f64]]) -> (Vec<f64>, SampleCache) {
    let (inputs, out) = factors.split_at(factors.len() - 1);
    let out = &out[0];
    let partial: Vec<Vec<f64>> = inputs.iter().zip(modes).map(|(f, v)| factor_times_vector(f, v)).collect();
    let rank = out.rank();
    let product: Vec<f64> = (0..rank).map(|r| partial.iter().map(|p| p[r]).product()).collect();
    let mut y = vec![0.0; out.dim()];
    for (r, &c) in product.iter().enumerate() {
        for (yo, u) in y.iter_mut().zip(out.tensor().row(r)) {
            *yo += c * u.to_f64();
        }
    }
    (y, SampleCache::Cp { partial, product })
}

fn cp_backward<T: Scalar>(
    factors: &[FactorMatrix<T>],
    modes: &[&[f64]],
    partial: &[Vec<f64>],
    product: &[f64],
    g: &[f64],
    grads: &mut [Vec<f64>],
) -> Vec<Vec<f64>> {
    let m = factors.len() - 1;
    let out = &factors[m];
    let (rank, o) = (out.rank(), out.dim());
    let mut gc = vec![0.0; rank];
    for r in 0..rank {
        let row = out.tensor().row(r);
        gc[r] = row.iter().zip(g).map(|(u, gv)| u.to_f64() * gv).sum();
        for (d, gv) in grads[m][r * o..(r + 1) * o].iter_mut().zip(g) {
            *d += product[r] * gv;
        }
    }
    let mut dmodes = Vec::with_capacity(m);
    for k in 0..m {
        let dim = factors[k].dim();
        let mut dv = vec![0.0; dim];
        for r in 0..rank {
            let others: f64 = (0..m).filter(|&l| l != k).map(|l| partial[l][r]).product();
            let dp = gc[r] * others;
            let urow = factors[k].tensor().row(r);
            let drow = &mut grads[k][r * dim..(r + 1) * dim];
            for i in 0..dim {
                drow[i] += dp * modes[k][i];
                dv[i] += urow[i].to_f64() * dp;
            }
        }
        dmodes.push(dv);
    }
    dmodes
}

/// `core ×_2 v` as a row-major `R_in × R_out` matrix.
fn core_times_vector<T: Scalar>(core: &TrCore<T>, v: &[f64]) -> Vec<f64> {
    let (ri, d, ro) = (core.rank_in(), core.dim(), core.rank_out());
    let data = core.tensor().data();
    let mut m = vec![0.0; ri * ro];
    for r in 0..ri {
        for (n, &vn) in v.iter().enumerate().take(d) {
            let base = (r * d + n) * ro;
            for s in 0..ro {
                m[r * ro + s] += data[base + s].to_f64() * vn;
            }
        }
    }
    m
}

fn matmul_flat(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    crate::tensor::small_matmul(a, b, m, k, n)
}

fn tr_apply<T: Scalar>(cores: &[TrCore<T>], modes: &[&[f64]]) -> (Vec<f64>, SampleCache) {
    let (inputs, out) = cores.split_at(cores.len() - 1);
    let out = &out[0];
    let slices: Vec<Vec<f64>> = inputs.iter().zip(modes).map(|(c, v)| core_times_vector(c, v)).collect();
    let r1 = inputs[0].rank_in();
    let mut chain = slices[0].clone();
    let mut cols = inputs[0].rank_out();
    for (c, s) in inputs.iter().zip(&slices).skip(1) {
        chain = matmul_flat(&chain, s, r1, cols, c.rank_out());
        cols = c.rank_out();
    }
    // y_o = Σ_{r, l} chain[r, l] · out[l, o, r]
    let (rl, o) = (out.rank_in(), out.dim());
    let data = out.tensor().data();
    let mut y = vec![0.0; o];
    for l in 0..rl {
        for (oi, yo) in y.iter_mut().enumerate() {
            let base = (l * o + oi) * r1;
            let mut acc = 0.0;
            for r in 0..r1 {
                acc += chain[r * rl + l] * data[base + r].to_f64();
            }
            *yo += acc;
        }
    }
    (y, SampleCache::Tr { slices, chain })
}

fn tr_backward<T: Scalar>(
    cores: &[TrCore<T>],
    modes: &[&[f64]],
    slices: &[Vec<f64>],
    chain: &[f64],
    g: &[f64],
    grads: &mut [Vec<f64>],
) -> Vec<Vec<f64>> {
    let m = cores.len() - 1;
    let out = &cores[m];
    let r1 = cores[0].rank_in();
    let (rl, o) = (out.rank_in(), out.dim());
    let odata = out.tensor().data();

    let mut dchain = vec![0.0; r1 * rl];
    for l in 0..rl {
        for oi in 0..o {
            let base = (l * o + oi) * r1;
            for r in 0..r1 {
                dchain[r * rl + l] += g[oi] * odata[base + r].to_f64();
                grads[m][base + r] += g[oi] * chain[r * rl + l];
            }
        }
    }

    // prefix[k] = M_1 … M_{k-1} (R_1 × R_k); suffix[k] = M_{k+1} … M_m (R_{k+1} × R_l)
    let mut prefix: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut p: Vec<f64> = (0..r1 * r1).map(|x| if x / r1 == x % r1 { 1.0 } else { 0.0 }).collect();
    for k in 0..m {
        prefix.push(p.clone());
        p = matmul_flat(&p, &slices[k], r1, cores[k].rank_in(), cores[k].rank_out());
    }
    let mut suffix: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut s: Vec<f64> = (0..rl * rl).map(|x| if x / rl == x % rl { 1.0 } else { 0.0 }).collect();
    for k in (0..m).rev() {
        suffix[k] = s.clone();
        s = matmul_flat(&slices[k], &s, cores[k].rank_in(), cores[k].rank_out(), rl);
    }

    let mut dmodes = Vec::with_capacity(m);
    for k in 0..m {
        let (ri, d, ro) = (cores[k].rank_in(), cores[k].dim(), cores[k].rank_out());
        // dM_k = prefixᵀ · dchain · suffixᵀ
        let mut left = vec![0.0; ri * rl];
        for a in 0..r1 {
            for r in 0..ri {
                let pa = prefix[k][a * ri + r];
                if pa == 0.0 {
                    continue;
                }
                for l in 0..rl {
                    left[r * rl + l] += pa * dchain[a * rl + l];
                }
            }
        }
        let mut dm = vec![0.0; ri * ro];
        for r in 0..ri {
            for t in 0..ro {
                let mut acc = 0.0;
                for l in 0..rl {
                    acc += left[r * rl + l] * suffix[k][t * rl + l];
                }
                dm[r * ro + t] = acc;
            }
        }
        let data = cores[k].tensor().data();
        let mut dv = vec![0.0; d];
        for r in 0..ri {
            for n in 0..d {
                let base = (r * d + n) * ro;
                let vn = modes[k][n];
                let mut acc = 0.0;
                for t in 0..ro {
                    grads[k][base + t] += dm[r * ro + t] * vn;
                    acc += data[base + t].to_f64() * dm[r * ro + t];
                }
                dv[n] += acc;
            }
        }
        dmodes.push(dv);
    }
    dmodes
}
