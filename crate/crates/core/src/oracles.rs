//! Brute-force reference implementations used by the test suites.
//!
//! Everything here is deliberately written as straight-line enumeration or
//! probability-space arithmetic, independent of the dynamic programs and
//! log-space code paths it is used to check. Runtimes are exponential; call
//! only on tiny instances.

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let fp = f(&probe);
        probe[i] = x[i] - step;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Largest relative error between analytic and numeric gradients, ignoring
/// coordinates where both are below `min_abs`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], min_abs: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if a.abs() <= min_abs && n.abs() <= min_abs {
            continue;
        }
        let rel = (a - n).abs() / a.abs().max(n.abs());
        worst = worst.max(rel);
    }
    worst
}

fn softmax_prob(logits: &[f64]) -> Vec<f64> {
    let hi = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - hi).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn sigmoid_prob(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// ---------------------------------------------------------------------------
// Markov chain over K states: exhaustive enumeration of all K^len sequences.
// ---------------------------------------------------------------------------

fn each_sequence(len: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    let mut z = vec![0usize; len];
    loop {
        visit(&z);
        let mut pos = 0;
        loop {
            if pos == len {
                return;
            }
            z[pos] += 1;
            if z[pos] < k {
                break;
            }
            z[pos] = 0;
            pos += 1;
        }
    }
}

fn markov_path_log_prob(
    init_logits: &[f64],
    trans_logits: &[Vec<f64>],
    scores: &[Vec<f64>],
    z: &[usize],
) -> f64 {
    let pi = softmax_prob(init_logits);
    let mut lp = pi[z[0]].ln() + scores[0][z[0]];
    for i in 1..z.len() {
        let row = softmax_prob(&trans_logits[z[i - 1]]);
        lp += row[z[i]].ln() + scores[i][z[i]];
    }
    lp
}

/// log Σ_z p(z, x) by summing all K^len sequences in probability space.
pub fn enum_markov_log_marginal(
    init_logits: &[f64],
    trans_logits: &[Vec<f64>],
    scores: &[Vec<f64>],
) -> f64 {
    let (len, k) = (scores.len(), init_logits.len());
    let mut total = 0.0f64;
    // Shift by the per-token max score so probability-space sums stay in range.
    let shift: f64 = scores
        .iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    each_sequence(len, k, |z| {
        total += (markov_path_log_prob(init_logits, trans_logits, scores, z) - shift).exp();
    });
    total.ln() + shift
}

/// Posterior unary and pairwise marginals by enumeration.
#[allow(clippy::type_complexity)]
pub fn enum_markov_posteriors(
    init_logits: &[f64],
    trans_logits: &[Vec<f64>],
    scores: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>, f64) {
    let (len, k) = (scores.len(), init_logits.len());
    let ll = enum_markov_log_marginal(init_logits, trans_logits, scores);
    let mut gamma = vec![vec![0.0; k]; len];
    let mut xi = vec![vec![vec![0.0; k]; k]; len.saturating_sub(1)];
    each_sequence(len, k, |z| {
        let w = (markov_path_log_prob(init_logits, trans_logits, scores, z) - ll).exp();
        for (i, &zi) in z.iter().enumerate() {
            gamma[i][zi] += w;
            if i + 1 < len {
                xi[i][zi][z[i + 1]] += w;
            }
        }
    });
    (gamma, xi, ll)
}

/// Best state sequence by enumeration; ties go to the first sequence in
/// lexicographic order (lowest state indices first).
pub fn enum_markov_viterbi(
    init_logits: &[f64],
    trans_logits: &[Vec<f64>],
    scores: &[Vec<f64>],
) -> Vec<usize> {
    let (len, k) = (scores.len(), init_logits.len());
    let mut best = (f64::NEG_INFINITY, vec![0usize; len]);
    each_sequence(len, k, |z| {
        let lp = markov_path_log_prob(init_logits, trans_logits, scores, z);
        if lp > best.0 {
            best = (lp, z.to_vec());
        }
    });
    best.1
}

// ---------------------------------------------------------------------------
// DMV: enumeration over single-rooted projective trees and taggings.
// ---------------------------------------------------------------------------

/// Is `anc` (1-based) an ancestor of `node` (1-based) under `heads`?
fn is_ancestor(heads: &[usize], anc: usize, node: usize) -> bool {
    let mut cur = node;
    for _ in 0..heads.len() {
        let h = heads[cur - 1];
        if h == 0 {
            return false;
        }
        if h == anc {
            return true;
        }
        cur = h;
    }
    false
}

/// Single-rooted, acyclic, projective head vector (1-based heads, 0 = root)?
pub fn is_projective_tree(heads: &[usize]) -> bool {
    let n = heads.len();
    if heads.iter().filter(|&&h| h == 0).count() != 1 {
        return false;
    }
    for (i, &h) in heads.iter().enumerate() {
        if h > n || h == i + 1 {
            return false;
        }
    }
    // Acyclic: every node reaches the root.
    for m in 1..=n {
        let mut cur = m;
        let mut steps = 0;
        while heads[cur - 1] != 0 {
            cur = heads[cur - 1];
            steps += 1;
            if steps > n {
                return false;
            }
        }
    }
    // Projective: the head dominates everything between itself and the child.
    for m in 1..=n {
        let h = heads[m - 1];
        if h == 0 {
            continue;
        }
        let (lo, hi) = if h < m { (h, m) } else { (m, h) };
        for p in lo + 1..hi {
            if !is_ancestor(heads, h, p) {
                return false;
            }
        }
    }
    true
}

/// All single-rooted projective head vectors for `n` tokens.
pub fn all_projective_trees(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut heads = vec![0usize; n];
    loop {
        if is_projective_tree(&heads) {
            out.push(heads.clone());
        }
        let mut pos = 0;
        loop {
            if pos == n {
                return out;
            }
            heads[pos] += 1;
            if heads[pos] <= n {
                break;
            }
            heads[pos] = 0;
            pos += 1;
        }
    }
}

/// Joint log probability of one (tree, tagging) derivation.
///
/// Logit layouts: `root[tag]`; `attach[head_tag][dir][child_tag]`;
/// `stop[head_tag][dir][valence]` with dir 0 = left, 1 = right and
/// valence 0 = adjacent (no child yet in that direction), 1 = non-adjacent.
pub fn dmv_derivation_log_prob(
    root_logits: &[f64],
    attach_logits: &[Vec<Vec<f64>>],
    stop_logits: &[Vec<Vec<f64>>],
    scores: &[Vec<f64>],
    heads: &[usize],
    tags: &[usize],
) -> f64 {
    let n = heads.len();
    let root_pos = heads.iter().position(|&h| h == 0).expect("rooted tree");
    let mut lp = softmax_prob(root_logits)[tags[root_pos]].ln();
    for (i, &t) in tags.iter().enumerate() {
        lp += scores[i][t];
    }
    for i in 0..n {
        let t = tags[i];
        for dir in 0..2 {
            let children: Vec<usize> = (0..n)
                .filter(|&j| heads[j] == i + 1 && if dir == 0 { j < i } else { j > i })
                .collect();
            let p_stop_adj = sigmoid_prob(stop_logits[t][dir][0]);
            let p_stop_non = sigmoid_prob(stop_logits[t][dir][1]);
            if children.is_empty() {
                lp += p_stop_adj.ln();
            } else {
                let att = softmax_prob(&attach_logits[t][dir]);
                lp += (1.0 - p_stop_adj).ln();
                lp += (children.len() as f64 - 1.0) * (1.0 - p_stop_non).ln();
                lp += p_stop_non.ln();
                for &c in &children {
                    lp += att[tags[c]].ln();
                }
            }
        }
    }
    lp
}

fn each_derivation(
    n: usize,
    k: usize,
    trees: &[Vec<usize>],
    mut visit: impl FnMut(&[usize], &[usize]),
) {
    for heads in trees {
        each_sequence(n, k, |tags| visit(heads, tags));
    }
}

/// log Σ over (projective trees × taggings) of the joint, by enumeration.
pub fn enum_dmv_log_marginal(
    root_logits: &[f64],
    attach_logits: &[Vec<Vec<f64>>],
    stop_logits: &[Vec<Vec<f64>>],
    scores: &[Vec<f64>],
) -> f64 {
    let (n, k) = (scores.len(), root_logits.len());
    let trees = all_projective_trees(n);
    let mut lps = Vec::new();
    each_derivation(n, k, &trees, |heads, tags| {
        lps.push(dmv_derivation_log_prob(
            root_logits,
            attach_logits,
            stop_logits,
            scores,
            heads,
            tags,
        ));
    });
    let hi = lps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + lps.iter().map(|&lp| (lp - hi).exp()).sum::<f64>().ln()
}

/// Posterior tag marginals p(tag_i = t | x) by enumeration.
pub fn enum_dmv_tag_posteriors(
    root_logits: &[f64],
    attach_logits: &[Vec<Vec<f64>>],
    stop_logits: &[Vec<Vec<f64>>],
    scores: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let (n, k) = (scores.len(), root_logits.len());
    let ll = enum_dmv_log_marginal(root_logits, attach_logits, stop_logits, scores);
    let trees = all_projective_trees(n);
    let mut post = vec![vec![0.0; k]; n];
    each_derivation(n, k, &trees, |heads, tags| {
        let w = (dmv_derivation_log_prob(root_logits, attach_logits, stop_logits, scores, heads, tags)
            - ll)
            .exp();
        for (i, &t) in tags.iter().enumerate() {
            post[i][t] += w;
        }
    });
    post
}

/// Best (heads, tags) derivation by enumeration, with its log probability.
/// Ties go to the first derivation visited (trees in head-vector counting
/// order, tags lexicographic).
pub fn enum_dmv_viterbi(
    root_logits: &[f64],
    attach_logits: &[Vec<Vec<f64>>],
    stop_logits: &[Vec<Vec<f64>>],
    scores: &[Vec<f64>],
) -> (Vec<usize>, Vec<usize>, f64) {
    let (n, k) = (scores.len(), root_logits.len());
    let trees = all_projective_trees(n);
    let mut best: (Vec<usize>, Vec<usize>, f64) = (Vec::new(), Vec::new(), f64::NEG_INFINITY);
    each_derivation(n, k, &trees, |heads, tags| {
        let lp =
            dmv_derivation_log_prob(root_logits, attach_logits, stop_logits, scores, heads, tags);
        if lp > best.2 {
            best = (heads.to_vec(), tags.to_vec(), lp);
        }
    });
    best
}

// ---------------------------------------------------------------------------
// Gaussian HMM likelihood: scaled forward recursion in probability space.
// ---------------------------------------------------------------------------

fn diag_gaussian_pdf(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut p = 1.0;
    for i in 0..x.len() {
        let d = x[i] - mean[i];
        p *= (-0.5 * d * d / var[i]).exp() / (std::f64::consts::TAU * var[i]).sqrt();
    }
    p
}

/// Log likelihood of a Gaussian HMM, computed with the scaled (probability
/// space) forward algorithm. `init` and `trans` are probabilities, not logits.
pub fn gaussian_hmm_log_likelihood(
    init: &[f64],
    trans: &[Vec<f64>],
    means: &[Vec<f64>],
    vars: &[Vec<f64>],
    xs: &[Vec<f64>],
) -> f64 {
    let k = init.len();
    let mut alpha: Vec<f64> = (0..k)
        .map(|s| init[s] * diag_gaussian_pdf(&xs[0], &means[s], &vars[s]))
        .collect();
    let mut ll = 0.0;
    let c0: f64 = alpha.iter().sum();
    ll += c0.ln();
    alpha.iter_mut().for_each(|a| *a /= c0);
    for x in &xs[1..] {
        let mut next = vec![0.0; k];
        for (s, slot) in next.iter_mut().enumerate() {
            let reach: f64 = (0..k).map(|p| alpha[p] * trans[p][s]).sum();
            *slot = reach * diag_gaussian_pdf(x, &means[s], &vars[s]);
        }
        let c: f64 = next.iter().sum();
        ll += c.ln();
        next.iter_mut().for_each(|a| *a /= c);
        alpha = next;
    }
    ll
}

// ---------------------------------------------------------------------------
// Clustering metrics and assignment, the slow way.
// ---------------------------------------------------------------------------

/// V-measure from first principles: joint/marginal entropies via H(X|Y) =
/// H(X,Y) - H(Y), all in nats.
pub fn v_measure_direct(counts: &[Vec<u64>]) -> (f64, f64, f64) {
    let n: u64 = counts.iter().flatten().sum();
    let nf = n as f64;
    let ent = |ps: &[f64]| -> f64 {
        ps.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    };
    let joint: Vec<f64> = counts.iter().flatten().map(|&c| c as f64 / nf).collect();
    let pred: Vec<f64> = counts
        .iter()
        .map(|row| row.iter().sum::<u64>() as f64 / nf)
        .collect();
    let ngold = counts[0].len();
    let gold: Vec<f64> = (0..ngold)
        .map(|g| counts.iter().map(|row| row[g]).sum::<u64>() as f64 / nf)
        .collect();
    let h_joint = ent(&joint);
    let h_pred = ent(&pred);
    let h_gold = ent(&gold);
    let h_gold_given_pred = h_joint - h_pred;
    let h_pred_given_gold = h_joint - h_gold;
    let h = if h_gold == 0.0 { 1.0 } else { 1.0 - h_gold_given_pred / h_gold };
    let c = if h_pred == 0.0 { 1.0 } else { 1.0 - h_pred_given_gold / h_pred };
    let vm = if h + c == 0.0 { 0.0 } else { 2.0 * h * c / (h + c) };
    (vm, h, c)
}

/// Exhaustive maximum-weight injective assignment of rows to columns.
/// Returns (best mapped weight, one optimal map). Exponential; rows ≤ ~8.
pub fn brute_force_matching(counts: &[Vec<u64>]) -> (u64, Vec<Option<usize>>) {
    let rows = counts.len();
    let cols = counts[0].len();
    let mut best = (0u64, vec![None; rows]);
    let mut map = vec![None; rows];
    let mut used = vec![false; cols];
    fn rec(
        r: usize,
        rows: usize,
        cols: usize,
        counts: &[Vec<u64>],
        used: &mut [bool],
        map: &mut Vec<Option<usize>>,
        acc: u64,
        best: &mut (u64, Vec<Option<usize>>),
    ) {
        if r == rows {
            if acc > best.0 {
                *best = (acc, map.clone());
            }
            return;
        }
        // Leave row r unmatched.
        map[r] = None;
        rec(r + 1, rows, cols, counts, used, map, acc, best);
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                map[r] = Some(c);
                rec(r + 1, rows, cols, counts, used, map, acc + counts[r][c], best);
                used[c] = false;
                map[r] = None;
            }
        }
    }
    rec(0, rows, cols, counts, &mut used, &mut map, 0, &mut best);
    best
}

// ---------------------------------------------------------------------------
// Dense determinant for the finite-difference Jacobian check.
// ---------------------------------------------------------------------------

/// log |det A| by Gaussian elimination with partial pivoting.
/// Returns -inf for a singular matrix.
pub fn log_abs_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut log_det = 0.0;
    for col in 0..n {
        let (pivot, pval) = (col..n)
            .map(|r| (r, m[r][col].abs()))
            .fold((col, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if pval == 0.0 {
            return f64::NEG_INFINITY;
        }
        m.swap(col, pivot);
        log_det += m[col][col].abs().ln();
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..n {
                let sub = f * m[col][c];
                m[r][c] -= sub;
            }
        }
    }
    log_det
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projective_trees_are_counted_correctly() {
        // 1 token: only [0]. 2 tokens: [0,1] and [2,0].
        assert_eq!(all_projective_trees(1), vec![vec![0]]);
        assert_eq!(all_projective_trees(2).len(), 2);
        // 3 tokens: 7 projective single-rooted trees.
        assert_eq!(all_projective_trees(3).len(), 7);
    }

    #[test]
    fn crossing_arcs_are_rejected() {
        // 1 <- 3, 2 <- 4 crosses (heads 1-based).
        assert!(!is_projective_tree(&[3, 4, 0, 3]));
        // Cycle 1 <-> 2 with root on 3.
        assert!(!is_projective_tree(&[2, 1, 0]));
        // Right chain is fine.
        assert!(is_projective_tree(&[0, 1, 2]));
    }

    #[test]
    fn markov_enum_single_state() {
        let scores = vec![vec![-0.5], vec![-1.5], vec![-2.0]];
        let ll = enum_markov_log_marginal(&[0.3], &[vec![1.7]], &scores);
        assert!((ll - (-4.0)).abs() < 1e-12);
    }

    #[test]
    fn log_abs_det_identity_and_scale() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(log_abs_det(&eye).abs() < 1e-15);
        let m = vec![vec![2.0, 0.0], vec![0.0, 3.0]];
        assert!((log_abs_det(&m) - 6.0f64.ln()).abs() < 1e-12);
        let sing = vec![vec![1.0, 2.0], vec![2.0, 4.0]];
        assert_eq!(log_abs_det(&sing), f64::NEG_INFINITY);
    }

    #[test]
    fn brute_force_matching_crossed_table() {
        let (total, map) = brute_force_matching(&[vec![1, 9], vec![9, 1]]);
        assert_eq!(total, 18);
        assert_eq!(map, vec![Some(1), Some(0)]);
    }
}
