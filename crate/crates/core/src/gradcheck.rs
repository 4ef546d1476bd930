//! Central finite-difference gradient verification.
//!
//! This module is the independent oracle for every analytic gradient in the
//! kernel: it re-evaluates the scalar objective at perturbed inputs and never
//! touches the backward pass it is checking. Verification runs in 64-bit.

use crate::error::Result;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Evaluate the objective at the given leaf values.
pub fn eval<F>(leaves: &[Tensor<f64>], f: &F) -> f64
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &ids).expect("objective construction failed");
    tape.value(root).item()
}

/// Central finite difference of the objective w.r.t. one coordinate.
pub fn central_difference<F>(
    leaves: &[Tensor<f64>],
    f: &F,
    leaf_idx: usize,
    coord: usize,
    h: f64,
) -> f64
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let mut plus = leaves.to_vec();
    plus[leaf_idx].data_mut()[coord] += h;
    let mut minus = leaves.to_vec();
    minus[leaf_idx].data_mut()[coord] -= h;
    (eval(&plus, f) - eval(&minus, f)) / (2.0 * h)
}

/// Compare analytic gradients against central finite differences at every
/// coordinate of every leaf. Returns the maximum relative error observed.
pub fn check(
    leaves: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
) -> f64 {
    let coords: Vec<(usize, usize)> = leaves
        .iter()
        .enumerate()
        .flat_map(|(li, t)| (0..t.len()).map(move |c| (li, c)))
        .collect();
    check_at(leaves, &f, &coords, DEFAULT_STEP)
}

/// Like [`check`], restricted to the listed `(leaf, coordinate)` pairs.
pub fn check_at<F>(leaves: &[Tensor<f64>], f: &F, coords: &[(usize, usize)], h: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[ValueId]) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &ids).expect("objective construction failed");
    let grads = tape.backward(root).expect("backward failed");

    let mut max_rel: f64 = 0.0;
    for &(li, c) in coords {
        let analytic = grads
            .wrt(ids[li])
            .map_or(0.0, |g| g.data()[c]);
        let numeric = central_difference(leaves, f, li, c, h);
        max_rel = max_rel.max(relative_error(analytic, numeric));
    }
    max_rel
}

/// Relative error with an absolute floor so near-zero gradients do not blow
/// the ratio up on finite-difference noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic() {
        // f(x) = sum(x * x); df/dx_i = 2 x_i
        let x = Tensor::new(vec![1, 3], vec![0.5, -1.25, 2.0]).unwrap();
        let max_rel = check(&[x], |tape, leaves| {
            let sq = tape.mul(leaves[0], leaves[0])?;
            let ones = tape.constant(Tensor::new(vec![3, 1], vec![1.0; 3]).unwrap());
            tape.matmul(sq, ones)
        });
        assert!(max_rel < 1e-8, "max rel err {max_rel}");
    }
}
