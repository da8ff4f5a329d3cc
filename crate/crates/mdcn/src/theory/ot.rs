//! Exact optimal transport between equal-size uniform empirical measures.

use crate::error::{Error, Result};

/// Largest sample size accepted by the assignment solver.
pub const ASSIGNMENT_CAP: usize = 256;

/// A uniform discrete distribution: n support points in d dimensions, each
/// carrying mass 1/n.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDist {
    points: Vec<f64>,
    n: usize,
    d: usize,
}

impl DiscreteDist {
    pub fn new(points: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Verify("distribution needs at least one point".into()));
        }
        if points.len() != n * d {
            return Err(Error::Verify(format!(
                "expected {n}x{d} = {} coordinates, got {}",
                n * d,
                points.len()
            )));
        }
        if !points.iter().all(|v| v.is_finite()) {
            return Err(Error::Verify("non-finite support point".into()));
        }
        Ok(DiscreteDist { points, n, d })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut points = Vec::with_capacity(n * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::Verify("ragged support rows".into()));
            }
            points.extend_from_slice(r);
        }
        DiscreteDist::new(points, n, d)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    /// Union of two equal-dimension samples (the p = n_a/(n_a+n_b) mixture).
    pub fn union(&self, other: &DiscreteDist) -> Result<DiscreteDist> {
        if self.d != other.d {
            return Err(Error::Verify("dimension mismatch in union".into()));
        }
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        DiscreteDist::new(points, self.n + other.n, self.d)
    }

    /// The same distribution with every point repeated `k` times.
    pub fn replicate(&self, k: usize) -> DiscreteDist {
        let mut points = Vec::with_capacity(self.points.len() * k);
        for _ in 0..k {
            points.extend_from_slice(&self.points);
        }
        DiscreteDist {
            points,
            n: self.n * k,
            d: self.d,
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Exact W1 between equal-size one-dimensional samples: the mean absolute
/// difference of the sorted values.
pub fn w1_exact_1d(a: &DiscreteDist, b: &DiscreteDist) -> Result<f64> {
    if a.dim() != 1 || b.dim() != 1 {
        return Err(Error::Verify(format!(
            "w1_exact_1d needs 1-d samples, got d={} and d={}",
            a.dim(),
            b.dim()
        )));
    }
    if a.len() != b.len() {
        return Err(Error::Verify(format!(
            "w1_exact_1d needs equal sizes, got {} and {}; use the assignment solver",
            a.len(),
            b.len()
        )));
    }
    let mut xs = a.points.clone();
    let mut ys = b.points.clone();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let total: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / a.len() as f64)
}

/// Exact W1 between equal-size uniform empiricals in any dimension: the
/// minimum-cost perfect matching under Euclidean cost, divided by n.
pub fn w1_exact_assignment(a: &DiscreteDist, b: &DiscreteDist) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Verify("dimension mismatch".into()));
    }
    if a.len() != b.len() {
        return Err(Error::Verify(format!(
            "assignment needs equal sizes, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() > ASSIGNMENT_CAP {
        return Err(Error::Verify(format!(
            "sample size {} exceeds the exact-assignment cap of {ASSIGNMENT_CAP}; subsample first",
            a.len()
        )));
    }
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = euclidean(a.point(i), b.point(j));
        }
    }
    let assignment = solve_assignment(&cost, n);
    // Summing the matched costs in sorted order makes the result independent
    // of which side was called first.
    let mut matched: Vec<f64> = (0..n).map(|j| cost[assignment[j] * n + j]).collect();
    matched.sort_by(|p, q| p.partial_cmp(q).unwrap());
    Ok(matched.iter().sum::<f64>() / n as f64)
}

/// Jonker-Volgenant style shortest augmenting paths with dual potentials,
/// O(n^3). Returns, for each column, the row assigned to it.
fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // row_of[j]: row matched to column j; index 0 is the virtual column.
    let mut row_of = vec![NONE; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 0..n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 * n + (j - 1)] - u[i0 + 1] - v[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j] + 1] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == NONE {
                break;
            }
        }
        // Augment along the alternating path.
        while j0 != 0 {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
        }
    }
    (0..n).map(|j| row_of[j + 1]).collect()
}

/// Mean absolute difference of two functions over the support of `dist`.
pub fn prob_discrepancy<F, G>(h: F, h2: G, dist: &DiscreteDist) -> f64
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> f64,
{
    let total: f64 = (0..dist.len())
        .map(|i| {
            let p = dist.point(i);
            (h(p) - h2(p)).abs()
        })
        .sum();
    total / dist.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist1(vals: &[f64]) -> DiscreteDist {
        DiscreteDist::new(vals.to_vec(), vals.len(), 1).unwrap()
    }

    #[test]
    fn w1_1d_on_point_masses_and_shifts() {
        assert_eq!(w1_exact_1d(&dist1(&[0.0]), &dist1(&[2.0])).unwrap(), 2.0);
        assert_eq!(
            w1_exact_1d(&dist1(&[1.0, 0.0]), &dist1(&[2.0, 1.0])).unwrap(),
            1.0
        );
        let same = dist1(&[0.3, -1.2, 4.0]);
        assert_eq!(w1_exact_1d(&same, &same).unwrap(), 0.0);
    }

    #[test]
    fn w1_1d_rejects_unequal_sizes() {
        let err = w1_exact_1d(&dist1(&[0.0]), &dist1(&[1.0, 2.0])).unwrap_err();
        assert!(err.to_string().contains("assignment"), "{err}");
    }

    #[test]
    fn assignment_is_zero_on_permuted_identical_inputs() {
        let a = DiscreteDist::from_rows(&[
            vec![0.0, 1.0],
            vec![2.0, -1.0],
            vec![0.5, 0.5],
        ])
        .unwrap();
        let b = DiscreteDist::from_rows(&[
            vec![0.5, 0.5],
            vec![0.0, 1.0],
            vec![2.0, -1.0],
        ])
        .unwrap();
        assert_eq!(w1_exact_assignment(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn assignment_prefers_square_sides_over_diagonals() {
        // Unit square: matching along the sides costs 1 per point, the
        // diagonal matching costs sqrt(2).
        let a = DiscreteDist::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let b = DiscreteDist::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(w1_exact_assignment(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn assignment_agrees_with_sorted_pairing_in_1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..=64);
            let xs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
            let a = dist1(&xs);
            let b = dist1(&ys);
            let exact = w1_exact_1d(&a, &b).unwrap();
            let matched = w1_exact_assignment(&a, &b).unwrap();
            assert!((exact - matched).abs() < 1e-9, "{exact} vs {matched}");
        }
    }

    #[test]
    fn w1_is_symmetric_and_triangle_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let n = rng.random_range(2..=20);
            let d = rng.random_range(1..=3);
            let sample = |rng: &mut ChaCha8Rng| {
                DiscreteDist::new(
                    (0..n * d).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect(),
                    n,
                    d,
                )
                .unwrap()
            };
            let a = sample(&mut rng);
            let b = sample(&mut rng);
            let c = sample(&mut rng);
            let ab = w1_exact_assignment(&a, &b).unwrap();
            let ba = w1_exact_assignment(&b, &a).unwrap();
            assert_eq!(ab, ba);
            let bc = w1_exact_assignment(&b, &c).unwrap();
            let ac = w1_exact_assignment(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-9, "{ac} > {ab} + {bc}");
        }
    }

    #[test]
    fn oversized_samples_are_rejected_with_advice() {
        let n = ASSIGNMENT_CAP + 1;
        let a = DiscreteDist::new(vec![0.0; n], n, 1).unwrap();
        let err = w1_exact_assignment(&a, &a).unwrap_err();
        assert!(err.to_string().contains("subsample"), "{err}");
    }

    #[test]
    fn discrepancy_basics() {
        let d = dist1(&[0.0, 1.0, -2.0, 5.0]);
        let f = |x: &[f64]| x[0] * 2.0;
        assert_eq!(prob_discrepancy(f, f, &d), 0.0);
        let g = |x: &[f64]| x[0] * 2.0 + 3.0;
        assert_eq!(prob_discrepancy(f, g, &d), 3.0);
        // Hand mean of absolute differences on a small support.
        let h = |x: &[f64]| x[0].abs();
        let expect = (0.0f64 - 0.0).abs() + (2.0f64 - 1.0).abs() + (-4.0f64 - 2.0).abs()
            + (10.0f64 - 5.0).abs();
        assert_eq!(prob_discrepancy(f, h, &d), expect / 4.0);
        // Symmetry.
        assert_eq!(prob_discrepancy(h, f, &d), prob_discrepancy(f, h, &d));
    }
}
