use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine_unchecked, is_permutation, PixelMatrix};

/// Square matrix of pixel-pair matching degrees; row = support pixel,
/// column = query pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingMatrix {
    n: usize,
    values: Vec<f64>,
}

impl MatchingMatrix {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || values.len() != n * n {
            return Err(Error::invalid(format!(
                "matching matrix must be square: side {n} with {} values",
                values.len()
            )));
        }
        Ok(Self { n, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("matching matrix must be square"));
        }
        Self::from_values(n, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[j * n + i] = self.values[i * n + j];
            }
        }
        Self { n, values }
    }

    /// Σ_i M[i][perm[i]].
    pub fn total(&self, a: &Assignment) -> f64 {
        a.perm
            .iter()
            .enumerate()
            .map(|(i, &j)| self.get(i, j))
            .sum()
    }

    /// Σ_i (1 − M[i][perm[i]]).
    pub fn total_cost(&self, a: &Assignment) -> f64 {
        a.perm
            .iter()
            .enumerate()
            .map(|(i, &j)| 1.0 - self.get(i, j))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AssignmentKind {
    /// One-to-one (Hungarian or repaired).
    Bijective,
    /// Per-row argmax; several support pixels may share a query pixel.
    ManyToOne,
}

/// `perm[i]` is the query pixel matched to support pixel `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub kind: AssignmentKind,
}

impl Assignment {
    pub fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
            kind: AssignmentKind::Bijective,
        }
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }
}

pub fn matching_matrix(support: &PixelMatrix, query: &PixelMatrix) -> Result<MatchingMatrix> {
    if support.n() != query.n() || support.c() != query.c() {
        return Err(Error::invalid(format!(
            "cannot match {}x{} support with {}x{} query",
            support.n(),
            support.c(),
            query.n(),
            query.c()
        )));
    }
    let n = support.n();
    let mut values = Vec::with_capacity(n * n);
    for s in support.rows() {
        for q in query.rows() {
            values.push(cosine_unchecked(s, q));
        }
    }
    MatchingMatrix::from_values(n, values)
}

/// Minimum-cost bijection on cost `C = 1 − M` (maximum total matching).
pub fn hungarian_assign(m: &MatchingMatrix) -> Result<Assignment> {
    if m.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matching matrix has non-finite entries"));
    }
    let cost: Vec<f64> = m.values.iter().map(|v| 1.0 - v).collect();
    Ok(Assignment {
        perm: solve_min_cost(&cost, m.n),
        kind: AssignmentKind::Bijective,
    })
}

/// Shortest-augmenting-path Hungarian algorithm with row/column potentials,
/// O(n³). `cost` is row-major `n×n`; returns the column assigned to each row.
///
/// Rows are inserted one at a time; each insertion grows a Dijkstra-like tree
/// over columns using reduced costs `cost[i][j] − u[i] − v[j]` until it reaches
/// a free column, then flips the alternating path. Columns are scanned in
/// ascending order and only a strictly smaller slack replaces the current
/// choice, so ties go to the lowest column index.
pub fn solve_min_cost(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n×n");
    // 1-based; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];

    for row in 1..=n {
        row_of_col[0] = row;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[row_of_col[j] - 1] = j - 1;
    }
    perm
}

/// Per-row argmax, ties to the lowest column.
pub fn nn_assign(m: &MatchingMatrix) -> Result<Assignment> {
    let perm = (0..m.n).map(|i| argmax_first(m.row(i))).collect::<Vec<_>>();
    Ok(Assignment {
        perm,
        kind: AssignmentKind::ManyToOne,
    })
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = j;
        }
    }
    best
}

/// Greedy repair of a nearest-neighbour assignment into a bijection: rows
/// claim columns in order of decreasing best similarity, each taking its best
/// column still free.
pub fn repair_to_bijection(m: &MatchingMatrix) -> Assignment {
    let n = m.n;
    let nn: Vec<usize> = (0..n).map(|i| argmax_first(m.row(i))).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m.get(b, nn[b]).total_cmp(&m.get(a, nn[a])).then(a.cmp(&b)));
    let mut taken = vec![false; n];
    let mut perm = vec![0; n];
    for i in order {
        let mut best: Option<usize> = None;
        for j in (0..n).filter(|&j| !taken[j]) {
            if best.is_none_or(|b| m.get(i, j) > m.get(i, b)) {
                best = Some(j);
            }
        }
        let j = best.expect("a free column always remains");
        taken[j] = true;
        perm[i] = j;
    }
    Assignment {
        perm,
        kind: AssignmentKind::Bijective,
    }
}

/// Output row `i` is query row `a.perm[i]`; support keeps its order.
pub fn rearrange(query: &PixelMatrix, a: &Assignment) -> Result<PixelMatrix> {
    if a.n() != query.n() {
        return Err(Error::invalid(format!(
            "assignment of length {} for {} query rows",
            a.n(),
            query.n()
        )));
    }
    if let Some(&bad) = a.perm.iter().find(|&&j| j >= query.n()) {
        return Err(Error::invalid(format!(
            "assignment index {bad} out of range for {} rows",
            query.n()
        )));
    }
    if a.kind == AssignmentKind::Bijective && !is_permutation(&a.perm) {
        return Err(Error::invalid("bijective assignment repeats an index"));
    }
    let mut data = Vec::with_capacity(query.data().len());
    for &j in &a.perm {
        data.extend_from_slice(query.row(j));
    }
    PixelMatrix::new(query.n(), query.c(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> MatchingMatrix {
        let v = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        MatchingMatrix::from_values(n, v).unwrap()
    }

    fn random_pixels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> PixelMatrix {
        let v = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        PixelMatrix::new(n, c, v).unwrap()
    }

    /// Exhaustive max of Σ M[i][p[i]] over all permutations (Heap's algorithm).
    fn brute_force_best(m: &MatchingMatrix) -> f64 {
        let n = m.n();
        let mut p: Vec<usize> = (0..n).collect();
        let mut c = vec![0usize; n];
        let score = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| m.get(i, j)).sum::<f64>();
        let mut best = score(&p);
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    p.swap(0, i);
                } else {
                    p.swap(c[i], i);
                }
                best = best.max(score(&p));
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        best
    }

    #[test]
    fn identity_matrix_gives_identity() {
        for n in 1..=9 {
            let mut v = vec![0.0; n * n];
            for i in 0..n {
                v[i * n + i] = 1.0;
            }
            let m = MatchingMatrix::from_values(n, v).unwrap();
            let a = hungarian_assign(&m).unwrap();
            assert_eq!(a.perm, (0..n).collect::<Vec<_>>());
            assert_eq!(m.total(&a), n as f64);
            assert_eq!(nn_assign(&m).unwrap().perm, a.perm);
        }
    }

    #[test]
    fn two_by_two_cost_example() {
        // cost [[1,2],[2,4]]; identity costs 5, swap costs 4
        let m = MatchingMatrix::from_rows(&[vec![0.0, -1.0], vec![-1.0, -3.0]]).unwrap();
        let a = hungarian_assign(&m).unwrap();
        assert_eq!(a.perm, vec![1, 0]);
        assert_eq!(m.total_cost(&a), 4.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let m = MatchingMatrix::from_values(3, vec![0.5; 9]).unwrap();
        assert_eq!(hungarian_assign(&m).unwrap().perm, vec![0, 1, 2]);
        assert_eq!(nn_assign(&m).unwrap().perm, vec![0, 0, 0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(MatchingMatrix::from_rows(&[vec![1.0, 2.0]]).is_err());
        let m = MatchingMatrix::from_values(2, vec![0.0, f64::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(
            hungarian_assign(&m),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn hungarian_matches_brute_force_7x7() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let m = random_matrix(&mut rng, 7);
            let a = hungarian_assign(&m).unwrap();
            assert!(is_permutation(&a.perm));
            assert!((m.total(&a) - brute_force_best(&m)).abs() < 1e-9);
        }
    }

    #[test]
    fn dominant_column_draws_every_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = random_matrix(&mut rng, 5);
        for i in 0..5 {
            m.values[i * 5 + 3] = 2.0;
        }
        let a = nn_assign(&m).unwrap();
        assert_eq!(a.perm, vec![3; 5]);
        assert_eq!(a.kind, AssignmentKind::ManyToOne);
    }

    #[test]
    fn nn_dominates_rowwise_and_hungarian_is_bijective_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(2..=7);
            let m = random_matrix(&mut rng, n);
            let nn = nn_assign(&m).unwrap();
            let h = hungarian_assign(&m).unwrap();
            for i in 0..n {
                assert!(m.row(i).iter().all(|&x| m.get(i, nn.perm[i]) >= x));
            }
            assert!(m.total(&nn) >= m.total(&h));
            let best = brute_force_best(&m);
            assert!((m.total(&h) - best).abs() < 1e-9);
            let rep = repair_to_bijection(&m);
            assert!(is_permutation(&rep.perm));
            assert!(m.total(&rep) <= best + 1e-12);
        }
    }

    #[test]
    fn matching_matrix_cases() {
        let s = PixelMatrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 1.0], vec![-1.0, 3.0]]).unwrap();
        let m = matching_matrix(&s, &s).unwrap();
        for i in 0..3 {
            assert!((m.get(i, i) - 1.0).abs() < 1e-15);
        }
        let a = PixelMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = PixelMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(matching_matrix(&a, &b).unwrap().get(0, 0), 0.0);
        assert!(matching_matrix(&s, &a).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = random_pixels(&mut rng, 9, 16);
        let q = random_pixels(&mut rng, 9, 16);
        let m = matching_matrix(&s, &q).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let (x, y) = (s.row(i), q.row(j));
                let d: f64 = (0..16).map(|k| x[k] * y[k]).sum();
                let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((m.get(i, j) - d / (nx * ny)).abs() < 1e-14);
                assert!(m.get(i, j).abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn rearrange_cases() {
        let q = PixelMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(rearrange(&q, &Assignment::identity(2)).unwrap(), q);
        let swapped = Assignment {
            perm: vec![1, 0],
            kind: AssignmentKind::Bijective,
        };
        let r = rearrange(&q, &swapped).unwrap();
        assert_eq!(r.row(0), &[3.0, 4.0]);
        assert_eq!(r.row(1), &[1.0, 2.0]);
        let bad = Assignment {
            perm: vec![0, 2],
            kind: AssignmentKind::ManyToOne,
        };
        assert!(rearrange(&q, &bad).is_err());
        let dup = Assignment {
            perm: vec![1, 1],
            kind: AssignmentKind::ManyToOne,
        };
        assert_eq!(rearrange(&q, &dup).unwrap().row(0), &[3.0, 4.0]);
    }

    #[test]
    fn rearranged_cosines_sum_to_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let s = random_pixels(&mut rng, 9, 6);
            let q = random_pixels(&mut rng, 9, 6);
            let m = matching_matrix(&s, &q).unwrap();
            let a = hungarian_assign(&m).unwrap();
            let r = rearrange(&q, &a).unwrap();
            let aligned: f64 = (0..9).map(|i| cosine_unchecked(s.row(i), r.row(i))).sum();
            assert!((aligned - m.total(&a)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn optimum_matches_brute_force_up_to_8(seed in any::<u64>(), n in 1usize..=8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, n);
            let a = hungarian_assign(&m).unwrap();
            prop_assert!((m.total(&a) - brute_force_best(&m)).abs() < 1e-9);
        }

        #[test]
        fn transpose_has_same_optimum(seed in any::<u64>(), n in 1usize..=12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, n);
            let a = hungarian_assign(&m).unwrap();
            let mt = m.transpose();
            let b = hungarian_assign(&mt).unwrap();
            prop_assert!((m.total(&a) - mt.total(&b)).abs() < 1e-9);
            // unique optimum with continuous random entries: inverse permutations
            for (i, &j) in a.perm.iter().enumerate() {
                prop_assert_eq!(b.perm[j], i);
            }
        }

        #[test]
        fn permuting_query_keeps_optimum(seed in any::<u64>(), n in 1usize..=12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_pixels(&mut rng, n, 5);
            let q = random_pixels(&mut rng, n, 5);
            let mut sigma: Vec<usize> = (0..n).collect();
            sigma.shuffle(&mut rng);
            let qp = rearrange(&q, &Assignment { perm: sigma, kind: AssignmentKind::Bijective }).unwrap();
            let m1 = matching_matrix(&s, &q).unwrap();
            let m2 = matching_matrix(&s, &qp).unwrap();
            let t1 = m1.total(&hungarian_assign(&m1).unwrap());
            let t2 = m2.total(&hungarian_assign(&m2).unwrap());
            prop_assert!((t1 - t2).abs() < 1e-9);
        }
    }
}
