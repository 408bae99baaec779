//! Unsupervised evaluation: many-to-one accuracy, V-measure, optimal
//! one-to-one cluster-to-tag mapping with confusion matrices, and directed
//! dependency accuracy.

use crate::error::{Error, Result};

/// Cluster × gold-tag cooccurrence counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    n_pred: usize,
    n_gold: usize,
    counts: Vec<u64>,
    total: u64,
}

impl ContingencyTable {
    pub fn new(n_pred: usize, n_gold: usize) -> Self {
        ContingencyTable { n_pred, n_gold, counts: vec![0; n_pred * n_gold], total: 0 }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Self {
        let n_pred = rows.len();
        let n_gold = rows.first().map_or(0, Vec::len);
        let mut t = ContingencyTable::new(n_pred, n_gold);
        for (p, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n_gold, "ragged contingency rows");
            for (g, &c) in row.iter().enumerate() {
                t.add_n(p, g, c);
            }
        }
        t
    }

    /// Tally parallel predicted/gold index sequences.
    pub fn from_sequences(
        n_pred: usize,
        n_gold: usize,
        pred: &[Vec<usize>],
        gold: &[Vec<usize>],
    ) -> Result<Self> {
        if pred.len() != gold.len() {
            return Err(Error::DimensionMismatch {
                context: "predicted vs gold sentence count",
                expected: gold.len(),
                found: pred.len(),
            });
        }
        let mut t = ContingencyTable::new(n_pred, n_gold);
        for (ps, gs) in pred.iter().zip(gold) {
            if ps.len() != gs.len() {
                return Err(Error::DimensionMismatch {
                    context: "predicted vs gold sentence length",
                    expected: gs.len(),
                    found: ps.len(),
                });
            }
            for (&p, &g) in ps.iter().zip(gs) {
                t.add(p, g);
            }
        }
        Ok(t)
    }

    pub fn add(&mut self, pred: usize, gold: usize) {
        self.add_n(pred, gold, 1);
    }

    pub fn add_n(&mut self, pred: usize, gold: usize, n: u64) {
        self.counts[pred * self.n_gold + gold] += n;
        self.total += n;
    }

    #[inline]
    pub fn get(&self, pred: usize, gold: usize) -> u64 {
        self.counts[pred * self.n_gold + gold]
    }

    pub fn n_pred(&self) -> usize {
        self.n_pred
    }

    pub fn n_gold(&self) -> usize {
        self.n_gold
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.total == 0 {
            return Err(Error::EmptyCorpus(" (empty contingency table)"));
        }
        Ok(())
    }

    fn pred_totals(&self) -> Vec<u64> {
        (0..self.n_pred).map(|p| (0..self.n_gold).map(|g| self.get(p, g)).sum()).collect()
    }

    fn gold_totals(&self) -> Vec<u64> {
        (0..self.n_gold).map(|g| (0..self.n_pred).map(|p| self.get(p, g)).sum()).collect()
    }

    /// Each cluster maps to its majority gold tag (many clusters may share
    /// one); the accuracy of that mapping. Ties break toward the lower gold
    /// index.
    pub fn many_to_one(&self) -> Result<f64> {
        self.require_nonempty()?;
        let mut correct = 0u64;
        for p in 0..self.n_pred {
            let mut best = 0u64;
            for g in 0..self.n_gold {
                let c = self.get(p, g);
                if c > best {
                    best = c;
                }
            }
            correct += best;
        }
        Ok(correct as f64 / self.total as f64)
    }

    /// V-measure with homogeneity and completeness, entropies in nats.
    /// Conventions: homogeneity is 1 when the gold entropy is 0,
    /// completeness is 1 when the cluster entropy is 0, and the V-measure is
    /// 0 when homogeneity + completeness is 0.
    pub fn v_measure(&self) -> Result<(f64, f64, f64)> {
        self.require_nonempty()?;
        let n = self.total as f64;
        let pred_tot = self.pred_totals();
        let gold_tot = self.gold_totals();
        let entropy = |tot: &[u64]| -> f64 {
            tot.iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n;
                    -p * p.ln()
                })
                .sum()
        };
        let h_gold = entropy(&gold_tot);
        let h_pred = entropy(&pred_tot);
        let mut h_gold_given_pred = 0.0;
        let mut h_pred_given_gold = 0.0;
        for p in 0..self.n_pred {
            for g in 0..self.n_gold {
                let c = self.get(p, g);
                if c == 0 {
                    continue;
                }
                let joint = c as f64 / n;
                h_gold_given_pred -= joint * (c as f64 / pred_tot[p] as f64).ln();
                h_pred_given_gold -= joint * (c as f64 / gold_tot[g] as f64).ln();
            }
        }
        let h = if h_gold == 0.0 { 1.0 } else { 1.0 - h_gold_given_pred / h_gold };
        let c = if h_pred == 0.0 { 1.0 } else { 1.0 - h_pred_given_gold / h_pred };
        let vm = if h + c == 0.0 { 0.0 } else { 2.0 * h * c / (h + c) };
        Ok((vm, h, c))
    }

    /// Optimal injective cluster-to-tag assignment (maximum total mapped count,
    /// exact Hungarian algorithm). Clusters left over when there are more
    /// clusters than tags map to `None`.
    pub fn one_to_one_map(&self) -> Result<Vec<Option<usize>>> {
        self.require_nonempty()?;
        Ok(assignment_max(&self.counts, self.n_pred, self.n_gold))
    }

    /// Total count captured by an injective mapping.
    pub fn mapped_count(&self, map: &[Option<usize>]) -> u64 {
        map.iter()
            .enumerate()
            .filter_map(|(p, g)| g.map(|g| self.get(p, g)))
            .sum()
    }

    /// Row-normalized confusion matrix under a one-to-one mapping,
    /// restricted to the given gold-tag subset (all gold tags when `None`).
    /// Row = gold tag; column = gold tag that the predicted cluster maps
    /// to; entries are fractions of the row's total gold count, so a row
    /// need not sum to one within the subset.
    pub fn confusion_matrix(
        &self,
        map: &[Option<usize>],
        subset: Option<&[usize]>,
    ) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        self.require_nonempty()?;
        let tags: Vec<usize> = match subset {
            Some(s) => s.to_vec(),
            None => (0..self.n_gold).collect(),
        };
        let gold_tot = self.gold_totals();
        let mut rows = Vec::with_capacity(tags.len());
        for &g in &tags {
            let denom = gold_tot[g] as f64;
            let mut row = Vec::with_capacity(tags.len());
            for &g2 in &tags {
                let num: u64 = (0..self.n_pred)
                    .filter(|&p| map.get(p).copied().flatten() == Some(g2))
                    .map(|p| self.get(p, g))
                    .sum();
                row.push(if denom > 0.0 { num as f64 / denom } else { 0.0 });
            }
            rows.push(row);
        }
        Ok((tags, rows))
    }
}

/// Maximum-weight injective assignment of rows to columns via the Hungarian
/// algorithm with potentials (O(n³)), exact on integer weights.
fn assignment_max(weights: &[u64], n_rows: usize, n_cols: usize) -> Vec<Option<usize>> {
    if n_rows == 0 || n_cols == 0 {
        return vec![None; n_rows];
    }
    // Pad columns so every row can be assigned; dummy columns carry zero
    // weight and mean "unmatched".
    let m = n_cols.max(n_rows);
    let w_max = *weights.iter().max().unwrap_or(&0) as i64;
    let cost = |i: usize, j: usize| -> i64 {
        if j < n_cols {
            w_max - weights[i * n_cols + j] as i64
        } else {
            w_max
        }
    };

    const INF: i64 = i64::MAX / 4;
    let n = n_rows;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; m + 1];
    let mut p = vec![0usize; m + 1]; // row matched to column j (1-based; 0 = free)
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut map = vec![None; n_rows];
    for j in 1..=m {
        if p[j] != 0 && j <= n_cols {
            map[p[j] - 1] = Some(j - 1);
        }
    }
    map
}

/// Fraction of tokens whose predicted head equals the gold head (the root
/// position 0 counts like any other head value).
pub fn directed_accuracy(pred_heads: &[Vec<usize>], gold_heads: &[Vec<usize>]) -> Result<f64> {
    if pred_heads.len() != gold_heads.len() {
        return Err(Error::DimensionMismatch {
            context: "predicted vs gold sentence count",
            expected: gold_heads.len(),
            found: pred_heads.len(),
        });
    }
    let mut total = 0u64;
    let mut correct = 0u64;
    for (ps, gs) in pred_heads.iter().zip(gold_heads) {
        if ps.len() != gs.len() {
            return Err(Error::DimensionMismatch {
                context: "predicted vs gold sentence length",
                expected: gs.len(),
                found: ps.len(),
            });
        }
        total += ps.len() as u64;
        correct += ps.iter().zip(gs).filter(|(a, b)| a == b).count() as u64;
    }
    if total == 0 {
        return Err(Error::EmptyCorpus(" (no tokens to score)"));
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{brute_force_matching, v_measure_direct};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn many_to_one_examples() {
        let diag = ContingencyTable::from_counts(&[vec![7, 0], vec![0, 3]]);
        assert_eq!(diag.many_to_one().unwrap(), 1.0);
        let tied = ContingencyTable::from_counts(&[vec![5, 5], vec![5, 5]]);
        assert_eq!(tied.many_to_one().unwrap(), 0.5);
        let mixed = ContingencyTable::from_counts(&[vec![8, 2], vec![3, 7]]);
        assert_eq!(mixed.many_to_one().unwrap(), 0.75);
    }

    #[test]
    fn v_measure_edge_conventions() {
        let perfect = ContingencyTable::from_counts(&[vec![4, 0], vec![0, 6]]);
        let (vm, h, c) = perfect.v_measure().unwrap();
        assert_eq!((vm, h, c), (1.0, 1.0, 1.0));
        // One cluster over two gold tags: zero homogeneity.
        let lumped = ContingencyTable::from_counts(&[vec![5, 5]]);
        let (vm, h, c) = lumped.v_measure().unwrap();
        assert_eq!(h, 0.0);
        assert_eq!(vm, 0.0);
        assert_eq!(c, 1.0); // single cluster has zero entropy
        // Single gold tag: homogeneity convention.
        let single_gold = ContingencyTable::from_counts(&[vec![5], vec![5]]);
        let (_, h, c) = single_gold.v_measure().unwrap();
        assert_eq!(h, 1.0);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn v_measure_matches_direct_entropy_oracle() {
        let counts = vec![vec![10u64, 0], vec![5, 5]];
        let table = ContingencyTable::from_counts(&counts);
        let (vm, h, c) = table.v_measure().unwrap();
        let (vm_o, h_o, c_o) = v_measure_direct(&counts);
        assert!((vm - vm_o).abs() < 1e-12);
        assert!((h - h_o).abs() < 1e-12);
        assert!((c - c_o).abs() < 1e-12);
    }

    #[test]
    fn v_measure_swap_symmetry_and_relabeling() {
        let counts = vec![vec![3u64, 1, 4], vec![1, 5, 9], vec![2, 6, 5]];
        let table = ContingencyTable::from_counts(&counts);
        let (vm, h, c) = table.v_measure().unwrap();
        // Transpose swaps the roles of pred and gold.
        let transposed: Vec<Vec<u64>> =
            (0..3).map(|g| (0..3).map(|p| counts[p][g]).collect()).collect();
        let t2 = ContingencyTable::from_counts(&transposed);
        let (vm2, h2, c2) = t2.v_measure().unwrap();
        assert!((vm - vm2).abs() < 1e-12);
        assert!((h - c2).abs() < 1e-12);
        assert!((c - h2).abs() < 1e-12);
        // Relabeling either side leaves everything unchanged.
        let relabeled: Vec<Vec<u64>> = vec![counts[2].clone(), counts[0].clone(), counts[1].clone()];
        let t3 = ContingencyTable::from_counts(&relabeled);
        let (vm3, ..) = t3.v_measure().unwrap();
        assert!((vm - vm3).abs() < 1e-12);
    }

    #[test]
    fn one_to_one_examples() {
        let diag = ContingencyTable::from_counts(&[vec![7, 0], vec![0, 3]]);
        assert_eq!(diag.one_to_one_map().unwrap(), vec![Some(0), Some(1)]);
        let crossed = ContingencyTable::from_counts(&[vec![1, 9], vec![9, 1]]);
        assert_eq!(crossed.one_to_one_map().unwrap(), vec![Some(1), Some(0)]);
    }

    #[test]
    fn one_to_one_matches_brute_force() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for trial in 0..50 {
            let rows = 2 + trial % 5;
            let cols = 2 + (trial / 2) % 5;
            let counts: Vec<Vec<u64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(0..40)).collect())
                .collect();
            let table = ContingencyTable::from_counts(&counts);
            let map = table.one_to_one_map().unwrap();
            let (best, _) = brute_force_matching(&counts);
            assert_eq!(table.mapped_count(&map), best, "trial {trial}: {counts:?} {map:?}");
            // Injectivity.
            let mut seen = std::collections::HashSet::new();
            for g in map.iter().flatten() {
                assert!(seen.insert(*g));
            }
        }
    }

    #[test]
    fn more_clusters_than_tags_leaves_some_unmatched() {
        let table = ContingencyTable::from_counts(&[vec![5], vec![9], vec![2]]);
        let map = table.one_to_one_map().unwrap();
        assert_eq!(map.iter().filter(|g| g.is_some()).count(), 1);
        assert_eq!(map[1], Some(0));
        assert_eq!(table.mapped_count(&map), 9);
    }

    #[test]
    fn many_to_one_dominates_one_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..30 {
            let rows = 2 + rng.gen_range(0..5);
            let cols = 2 + rng.gen_range(0..5);
            let counts: Vec<Vec<u64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(0..20)).collect())
                .collect();
            let table = ContingencyTable::from_counts(&counts);
            if table.total() == 0 {
                continue;
            }
            let m1 = table.many_to_one().unwrap();
            let map = table.one_to_one_map().unwrap();
            let one = table.mapped_count(&map) as f64 / table.total() as f64;
            assert!(m1 >= one - 1e-15);
            let (vm, h, c) = table.v_measure().unwrap();
            for &x in &[m1, one, vm, h, c] {
                assert!((-1e-12..=1.0 + 1e-12).contains(&x));
            }
        }
    }

    #[test]
    fn confusion_matrix_follows_the_mapping() {
        // Cluster 0 -> tag 1, cluster 1 -> tag 0.
        let table = ContingencyTable::from_counts(&[vec![1, 9], vec![9, 1]]);
        let map = table.one_to_one_map().unwrap();
        let (tags, rows) = table.confusion_matrix(&map, None).unwrap();
        assert_eq!(tags, vec![0, 1]);
        // Gold 0: 9 of 10 tokens sit in cluster 1, which maps to tag 0.
        assert!((rows[0][0] - 0.9).abs() < 1e-12);
        assert!((rows[0][1] - 0.1).abs() < 1e-12);
        assert!((rows[1][1] - 0.9).abs() < 1e-12);
        let (tags_sub, rows_sub) = table.confusion_matrix(&map, Some(&[1])).unwrap();
        assert_eq!(tags_sub, vec![1]);
        assert_eq!(rows_sub.len(), 1);
        assert!((rows_sub[0][0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn directed_accuracy_examples() {
        let gold = vec![vec![2, 0], vec![0, 1, 2]];
        assert_eq!(directed_accuracy(&gold, &gold).unwrap(), 1.0);
        let wrong = vec![vec![0, 1], vec![2, 0, 2]];
        // Sentence 1: 0 of 2; sentence 2: 1 of 3 (the third token).
        assert!((directed_accuracy(&wrong, &gold).unwrap() - 0.2).abs() < 1e-12);
        let bad_shape = vec![vec![0], vec![0, 1, 2]];
        assert!(directed_accuracy(&bad_shape, &gold).is_err());
    }

    #[test]
    fn metrics_are_order_invariant() {
        let pred = vec![vec![0, 1, 0], vec![1, 1]];
        let gold = vec![vec![1, 0, 1], vec![0, 0]];
        let t1 = ContingencyTable::from_sequences(2, 2, &pred, &gold).unwrap();
        let rev_pred: Vec<_> = pred.iter().rev().cloned().collect();
        let rev_gold: Vec<_> = gold.iter().rev().cloned().collect();
        let t2 = ContingencyTable::from_sequences(2, 2, &rev_pred, &rev_gold).unwrap();
        assert_eq!(t1, t2);
        let d1 = directed_accuracy(&pred, &gold).unwrap();
        let d2 = directed_accuracy(&rev_pred, &rev_gold).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn empty_table_is_an_error() {
        let table = ContingencyTable::new(2, 2);
        assert!(table.many_to_one().is_err());
        assert!(table.v_measure().is_err());
        assert!(table.one_to_one_map().is_err());
    }
}
