//! Minimum-cost assignment on a square cost matrix.
//!
//! Two routes: exhaustive enumeration over all permutations (used for small
//! slot counts, and as the oracle) and an O(n^3) Hungarian solver with dual
//! potentials. Both return the permutation `perm` such that row `i` is
//! assigned column `perm[i]`.

use itertools::Itertools;

/// Row-major square cost matrix.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub n: usize,
    pub costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, costs: Vec<f64>) -> Self {
        assert_eq!(costs.len(), n * n, "cost matrix must be n x n");
        Self { n, costs }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.costs[row * self.n + col]
    }

    pub fn total(&self, perm: &[usize]) -> f64 {
        perm.iter()
            .enumerate()
            .map(|(row, &col)| self.at(row, col))
            .sum()
    }
}

/// Exhaustive minimum-cost assignment. Ties break toward the
/// lexicographically smallest permutation because candidates are enumerated
/// in lexicographic order and only strict improvements replace the incumbent.
pub fn brute_force(cost: &CostMatrix) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..cost.n).permutations(cost.n) {
        let total = cost.total(&perm);
        match &best {
            Some((incumbent, _)) if total >= *incumbent => {}
            _ => best = Some((total, perm)),
        }
    }
    best.expect("n >= 1").1
}

/// Hungarian algorithm (shortest augmenting path with dual potentials).
pub fn hungarian(cost: &CostMatrix) -> Vec<usize> {
    let n = cost.n;
    // 1-indexed internally; index 0 is the virtual start column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut assigned_row = vec![0usize; n + 1]; // assigned_row[col] = row
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        assigned_row[0] = row;
        let mut col0 = 0usize;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let row0 = assigned_row[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost.at(row0 - 1, col - 1) - u[row0] - v[col];
                if reduced < min_to[col] {
                    min_to[col] = reduced;
                    way[col] = col0;
                }
                if min_to[col] < delta {
                    delta = min_to[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[assigned_row[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_to[col] -= delta;
                }
            }
            col0 = col1;
            if assigned_row[col0] == 0 {
                break;
            }
        }
        // Augment along the alternating path.
        while col0 != 0 {
            let col1 = way[col0];
            assigned_row[col0] = assigned_row[col1];
            col0 = col1;
        }
    }

    let mut perm = vec![0usize; n];
    for col in 1..=n {
        if assigned_row[col] > 0 {
            perm[assigned_row[col] - 1] = col - 1;
        }
    }
    perm
}

/// Which assignment route to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Enumerate for n <= 5, Hungarian above.
    Auto,
    BruteForce,
    Hungarian,
}

/// Minimum-cost assignment with the given strategy.
pub fn min_cost_assignment(cost: &CostMatrix, strategy: Strategy) -> Vec<usize> {
    match strategy {
        Strategy::BruteForce => brute_force(cost),
        Strategy::Hungarian => hungarian(cost),
        Strategy::Auto => {
            if cost.n <= 5 {
                brute_force(cost)
            } else {
                hungarian(cost)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn known_three_by_three() {
        let cost = CostMatrix::new(3, vec![8.0, 5.0, 9.0, 4.0, 2.0, 4.0, 7.0, 3.0, 8.0]);
        let perm = hungarian(&cost);
        assert_eq!(perm, vec![0, 2, 1]);
        assert_eq!(cost.total(&perm), 15.0);
        assert_eq!(brute_force(&cost), perm);
    }

    #[test]
    fn single_element() {
        let cost = CostMatrix::new(1, vec![3.5]);
        assert_eq!(hungarian(&cost), vec![0]);
        assert_eq!(brute_force(&cost), vec![0]);
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=7 {
            for _ in 0..200 {
                let costs: Vec<f64> = (0..n * n).map(|_| rng.gen::<f64>() * 10.0).collect();
                let cost = CostMatrix::new(n, costs);
                let bf = brute_force(&cost);
                let hu = hungarian(&cost);
                // Optimal totals agree; with continuous random costs the
                // argmin is unique, so the permutations agree as well.
                assert_eq!(bf, hu, "n={n}");
            }
        }
    }

    #[test]
    fn brute_force_breaks_ties_lexicographically() {
        // All-equal costs: every permutation is optimal; identity is the
        // lexicographically smallest.
        let cost = CostMatrix::new(3, vec![1.0; 9]);
        assert_eq!(brute_force(&cost), vec![0, 1, 2]);
    }

    #[test]
    fn auto_switches_routes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let costs: Vec<f64> = (0..36).map(|_| rng.gen::<f64>()).collect();
        let cost = CostMatrix::new(6, costs);
        let perm = min_cost_assignment(&cost, Strategy::Auto);
        assert_eq!(perm, brute_force(&cost));
    }
}
