use super::{increment, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Generalized sum-of-products contraction described by an einsum-style
/// descriptor, e.g. `"ij,j->i"` or `"nio,n,i->o"`.
///
/// Every letter that does not appear on the output side is summed over. The
/// summation visits the summed multi-index in ascending row-major order, so
/// results are bit-reproducible. A scalar result is returned with shape `[1]`.
pub fn contract<T: Scalar>(spec: &str, operands: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let plan = Plan::parse(spec, operands)?;
    let out_shape: Vec<usize> = if plan.output.is_empty() {
        vec![1]
    } else {
        plan.output.iter().map(|&l| plan.extent[l]).collect()
    };
    let out_extents: Vec<usize> = plan.output.iter().map(|&l| plan.extent[l]).collect();
    let sum_extents: Vec<usize> = plan.summed.iter().map(|&l| plan.extent[l]).collect();
    let out_len: usize = out_extents.iter().product();
    let sum_len: usize = sum_extents.iter().product();

    // per-operand (letter, stride) pairs; a repeated letter folds its strides
    let strides: Vec<Vec<(usize, usize)>> = plan
        .terms
        .iter()
        .zip(operands)
        .map(|(term, op)| {
            let mut pairs: Vec<(usize, usize)> = Vec::new();
            for (pos, &l) in term.iter().enumerate() {
                match pairs.iter_mut().find(|(pl, _)| *pl == l) {
                    Some(p) => p.1 += op.strides()[pos],
                    None => pairs.push((l, op.strides()[pos])),
                }
            }
            pairs
        })
        .collect();

    let mut value = [0usize; 26];
    let mut out_idx = vec![0usize; out_extents.len()];
    let mut data = Vec::with_capacity(out_len);
    for _ in 0..out_len {
        for (p, &l) in plan.output.iter().enumerate() {
            value[l] = out_idx[p];
        }
        let mut sum_idx = vec![0usize; sum_extents.len()];
        let mut acc = 0.0;
        for _ in 0..sum_len {
            for (p, &l) in plan.summed.iter().enumerate() {
                value[l] = sum_idx[p];
            }
            let mut prod = 1.0;
            for (k, op) in operands.iter().enumerate() {
                let off: usize = strides[k].iter().map(|&(l, s)| value[l] * s).sum();
                prod *= op.data()[off].to_f64();
            }
            acc += prod;
            if !sum_extents.is_empty() {
                increment(&mut sum_idx, &sum_extents);
            }
        }
        data.push(T::from_f64(acc));
        if !out_extents.is_empty() {
            increment(&mut out_idx, &out_extents);
        }
    }
    Tensor::from_vec(&out_shape, data)
}

struct Plan {
    terms: Vec<Vec<usize>>,
    output: Vec<usize>,
    summed: Vec<usize>,
    extent: [usize; 26],
}

impl Plan {
    fn parse<T: Scalar>(spec: &str, operands: &[&Tensor<T>]) -> Result<Self> {
        let spec: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        let (lhs, rhs) = spec
            .split_once("->")
            .ok_or_else(|| Error::Contraction(format!("missing '->' in {spec:?}")))?;
        let raw_terms: Vec<&str> = lhs.split(',').collect();
        if raw_terms.len() != operands.len() {
            return Err(Error::Contraction(format!(
                "descriptor names {} operands but {} were given",
                raw_terms.len(),
                operands.len()
            )));
        }
        let letter = |c: char| -> Result<usize> {
            if c.is_ascii_lowercase() {
                Ok(c as usize - 'a' as usize)
            } else {
                Err(Error::Contraction(format!("index label {c:?} is not a lowercase ASCII letter")))
            }
        };

        let mut extent = [0usize; 26];
        let mut first_seen: Vec<usize> = Vec::new();
        let mut terms = Vec::with_capacity(raw_terms.len());
        for (k, (term, op)) in raw_terms.iter().zip(operands).enumerate() {
            let labels: Vec<usize> = term.chars().map(letter).collect::<Result<_>>()?;
            if labels.len() != op.order() {
                return Err(Error::Contraction(format!(
                    "operand {} has order {} but its term {term:?} has {} labels",
                    k + 1,
                    op.order(),
                    labels.len()
                )));
            }
            for (pos, &l) in labels.iter().enumerate() {
                let e = op.shape()[pos];
                if extent[l] == 0 {
                    extent[l] = e;
                    first_seen.push(l);
                } else if extent[l] != e {
                    return Err(Error::shape(format!(
                        "index '{}' has extent {} in one operand and {e} in operand {}",
                        (b'a' + l as u8) as char,
                        extent[l],
                        k + 1
                    )));
                }
            }
            terms.push(labels);
        }

        let mut output = Vec::new();
        for c in rhs.chars() {
            let l = letter(c)?;
            if output.contains(&l) {
                return Err(Error::Contraction(format!("output index {c:?} is repeated")));
            }
            if extent[l] == 0 {
                return Err(Error::Contraction(format!("output index {c:?} does not appear in any operand")));
            }
            output.push(l);
        }
        let summed = first_seen.into_iter().filter(|l| !output.contains(l)).collect();
        Ok(Plan { terms, output, summed, extent })
    }
}
