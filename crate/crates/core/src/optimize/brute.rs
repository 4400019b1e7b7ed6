use rayon::prelude::*;

use super::{CoverageProblem, Method, SelectionResult};
use crate::error::{Error, Result};

pub const DEFAULT_COMBINATION_LIMIT: u128 = 2_000_000;

const BATCH: usize = 4096;

/// `C(g, n)`, saturating at `u128::MAX`.
pub fn combination_count(g: usize, n: usize) -> u128 {
    if n > g {
        return 0;
    }
    let n = n.min(g - n);
    let mut c: u128 = 1;
    for i in 0..n {
        // c * (g - i) is divisible by (i + 1) at every step
        match c.checked_mul((g - i) as u128) {
            Some(v) => c = v / (i as u128 + 1),
            None => return u128::MAX,
        }
    }
    c
}

/// Advances `idx` to the next `n`-combination of `0..g` in lexicographic
/// order; returns false after the last one.
fn next_combination(idx: &mut [usize], g: usize) -> bool {
    let n = idx.len();
    let mut i = n;
    while i > 0 {
        i -= 1;
        if idx[i] < g - n + i {
            idx[i] += 1;
            for j in i + 1..n {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Exhaustive optimum over all `n`-subsets of the grid. Ties keep the
/// lexicographically first index tuple.
pub fn brute_force_select(problem: &CoverageProblem<'_>, n: usize, limit: u128) -> Result<SelectionResult> {
    problem.check_n(n)?;
    let g = problem.n_candidates();
    let count = combination_count(g, n);
    if count > limit {
        return Err(Error::TooManyCombinations { count, limit });
    }
    let matrix = problem.matrix();
    let params = problem.params;

    let mut current: Vec<usize> = (0..n).collect();
    let mut more = true;
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut batch: Vec<Vec<usize>> = Vec::with_capacity(BATCH);
    while more {
        batch.clear();
        while more && batch.len() < BATCH {
            batch.push(current.clone());
            more = next_combination(&mut current, g);
        }
        let scores: Vec<f64> = batch
            .par_iter()
            .map_init(|| matrix.evaluator(), |eval, combo| eval.coverage(combo, &params))
            .collect();
        for (combo, &s) in batch.iter().zip(&scores) {
            if best.as_ref().is_none_or(|(_, b)| s > *b) {
                best = Some((combo.clone(), s));
            }
        }
    }
    let (indices, _) = best.expect("at least one combination");
    Ok(problem.result(Method::Brute, None, indices, Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combination_counts() {
        assert_eq!(combination_count(12, 3), 220);
        assert_eq!(combination_count(6, 2), 15);
        assert_eq!(combination_count(5, 5), 1);
        assert_eq!(combination_count(3, 4), 0);
        assert_eq!(combination_count(400, 40), u128::MAX.min(combination_count(400, 40)));
        assert!(combination_count(400, 40) > DEFAULT_COMBINATION_LIMIT);
    }

    #[test]
    fn enumerates_in_lexicographic_order() {
        let mut idx = vec![0, 1];
        let mut all = vec![idx.clone()];
        while next_combination(&mut idx, 4) {
            all.push(idx.clone());
        }
        assert_eq!(all, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
    }
}
