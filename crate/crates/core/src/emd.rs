//! Earth mover's distance between equal-size point sets.
//!
//! With equal masses the transport problem reduces to a minimum-cost perfect
//! matching, solved exactly here with the O(n^3) shortest augmenting path
//! form of the Hungarian algorithm (row/column potentials).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_CAP: usize = 64;

/// Minimum-cost assignment for a square cost matrix (`n x n`, row-major).
/// Returns `assignment[row] = col` and the total cost.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based arrays, index 0 is the virtual source column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut min_v = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[matched_row[j] - 1] = j - 1;
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    (assignment, total)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Pairwise Euclidean cost matrix between the rows of `a` and `b`.
pub fn cost_matrix(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, m) = (a.rows(), b.rows());
    let mut cost = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            cost.push(euclidean(a.row(i), b.row(j)));
        }
    }
    cost
}

/// EMD between two equal-size point sets under Euclidean ground distance:
/// the optimal matching cost divided by the number of points.
pub fn emd(a: &Tensor, b: &Tensor, cap: usize) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::shape("emd", &[a.shape(), b.shape()]));
    }
    let n = a.rows();
    if n > cap {
        return Err(Error::InvalidArgument(format!(
            "emd on {n} points exceeds the cap of {cap}"
        )));
    }
    let (_, total) = min_cost_assignment(&cost_matrix(a, b), n);
    Ok(total / n as f64)
}
