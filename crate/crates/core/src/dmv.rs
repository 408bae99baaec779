//! Dependency model with valence over latent tags.
//!
//! Head-outward generative story: the root generates exactly one head token;
//! every token, per direction, repeatedly decides CONTINUE and attaches a
//! child (valence Adjacent before its first child in that direction,
//! NonAdjacent after), then decides STOP. Attachment distributions are
//! softmax rows per (head tag, direction); stop decisions are Bernoulli
//! logits per (head tag, direction, valence).
//!
//! Inference uses a split-head chart with half-constituents (an unstopped
//! head side), sealed half-constituents (stop decision folded in), and
//! trapezoids (an arc plus the child's inner-facing sealed half). Runtime is
//! O(len^3 K^2). Expected counts come from an adjoint sweep over the same
//! chart in reverse order, which is the inside-outside computation without a
//! separately derived outside recursion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::EmissionScores;
use crate::matrix::Mat;
use crate::scalar::{log_add_exp, log_sigmoid, log_softmax, sigmoid, softmax, Scalar};

/// Attachment direction relative to the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::Left, Direction::Right];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Direction::Left => 0,
            Direction::Right => 1,
        }
    }
}

/// Whether a head has already generated a child in the given direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Valence {
    /// No child generated yet in this direction.
    Adjacent,
    /// At least one child generated in this direction.
    NonAdjacent,
}

impl Valence {
    pub const ALL: [Valence; 2] = [Valence::Adjacent, Valence::NonAdjacent];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Valence::Adjacent => 0,
            Valence::NonAdjacent => 1,
        }
    }
}

const L: usize = 0;
const R: usize = 1;
const ADJ: usize = 0;
const NONADJ: usize = 1;

/// Root, attachment, and stop logits of the DMV prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmvParams<S> {
    num_tags: usize,
    /// K logits, softmax over the root child's tag.
    pub root_logits: Vec<S>,
    /// K × 2 × K logits, row-major `[head][direction][child]`; softmax over
    /// the child tag within each (head, direction) row.
    pub attach_logits: Vec<S>,
    /// K × 2 × 2 Bernoulli logits `[head][direction][valence]` for STOP.
    pub stop_logits: Vec<S>,
}

/// A projective dependency parse plus the tag assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyParse {
    /// 1-based head per token; 0 marks the root's child.
    pub heads: Vec<usize>,
    /// Tag index per token.
    pub tags: Vec<usize>,
}

/// Gradients of the log marginal w.r.t. logits and emission scores, in the
/// same layouts as [`DmvParams`].
#[derive(Debug, Clone)]
pub struct DmvGrads<S> {
    pub root_logits: Vec<S>,
    pub attach_logits: Vec<S>,
    pub stop_logits: Vec<S>,
    /// `scores[i][t]` = posterior probability that token i carries tag t.
    pub scores: Mat<S>,
}

#[inline]
fn i3(n: usize, k: usize, h: usize, x: usize, t: usize) -> usize {
    (h * n + x) * k + t
}

#[inline]
fn i4(n: usize, k: usize, h: usize, m: usize, a: usize, b: usize) -> usize {
    ((h * n + m) * k + a) * k + b
}

/// Per-call log-probability tables realized from the logits.
struct LogTables<S> {
    k: usize,
    root: Vec<S>,
    attach: Vec<S>,
    stop: Vec<S>,
    cont: Vec<S>,
}

impl<S: Scalar> LogTables<S> {
    #[inline]
    fn attach(&self, head: usize, dir: usize, child: usize) -> S {
        self.attach[(head * 2 + dir) * self.k + child]
    }

    #[inline]
    fn stop(&self, head: usize, dir: usize, val: usize) -> S {
        self.stop[(head * 2 + dir) * 2 + val]
    }

    #[inline]
    fn cont(&self, head: usize, dir: usize, val: usize) -> S {
        self.cont[(head * 2 + dir) * 2 + val]
    }
}

struct InsideChart<S> {
    n: usize,
    k: usize,
    seal_l: Vec<S>,
    seal_r: Vec<S>,
    half_l: Vec<S>,
    half_r: Vec<S>,
    trap_l: Vec<S>,
    trap_r: Vec<S>,
    log_marginal: S,
    /// Number of chart combinations performed (Θ(len³ K²)).
    ops: usize,
}

impl<S: Scalar> DmvParams<S> {
    /// Uniform multinomials: all logits zero (stop probabilities 1/2).
    pub fn uniform(num_tags: usize) -> Self {
        DmvParams {
            num_tags,
            root_logits: vec![S::zero(); num_tags],
            attach_logits: vec![S::zero(); num_tags * 2 * num_tags],
            stop_logits: vec![S::zero(); num_tags * 2 * 2],
        }
    }

    /// All logits drawn i.i.d. from U[0, 1], the same recipe as the Markov
    /// initializer.
    pub fn init(num_tags: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut p = DmvParams::uniform(num_tags);
        for v in p
            .root_logits
            .iter_mut()
            .chain(p.attach_logits.iter_mut())
            .chain(p.stop_logits.iter_mut())
        {
            *v = S::of(rng.gen::<f64>());
        }
        p
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    #[inline]
    pub fn attach_logit(&self, head: usize, dir: Direction, child: usize) -> S {
        self.attach_logits[(head * 2 + dir.index()) * self.num_tags + child]
    }

    #[inline]
    pub fn stop_logit(&self, head: usize, dir: Direction, val: Valence) -> S {
        self.stop_logits[(head * 2 + dir.index()) * 2 + val.index()]
    }

    pub fn set_attach_logit(&mut self, head: usize, dir: Direction, child: usize, v: S) {
        self.attach_logits[(head * 2 + dir.index()) * self.num_tags + child] = v;
    }

    pub fn set_stop_logit(&mut self, head: usize, dir: Direction, val: Valence, v: S) {
        self.stop_logits[(head * 2 + dir.index()) * 2 + val.index()] = v;
    }

    pub fn param_count(&self) -> usize {
        let k = self.num_tags;
        k + 2 * k * k + 4 * k
    }

    pub fn extend_params_flat(&self, out: &mut Vec<S>) {
        out.extend_from_slice(&self.root_logits);
        out.extend_from_slice(&self.attach_logits);
        out.extend_from_slice(&self.stop_logits);
    }

    pub fn load_params_flat(&mut self, flat: &[S]) -> usize {
        let k = self.num_tags;
        let (a, b, c) = (k, k + 2 * k * k, k + 2 * k * k + 4 * k);
        self.root_logits.copy_from_slice(&flat[..a]);
        self.attach_logits.copy_from_slice(&flat[a..b]);
        self.stop_logits.copy_from_slice(&flat[b..c]);
        c
    }

    fn tables(&self) -> LogTables<S> {
        let k = self.num_tags;
        let root = log_softmax(&self.root_logits);
        let mut attach = vec![S::zero(); 2 * k * k];
        for row in 0..2 * k {
            let ls = log_softmax(&self.attach_logits[row * k..(row + 1) * k]);
            attach[row * k..(row + 1) * k].copy_from_slice(&ls);
        }
        let stop: Vec<S> = self.stop_logits.iter().map(|&z| log_sigmoid(z)).collect();
        let cont: Vec<S> = self.stop_logits.iter().map(|&z| log_sigmoid(-z)).collect();
        LogTables { k, root, attach, stop, cont }
    }

    fn check_scores(&self, scores: &EmissionScores<S>) -> Result<()> {
        if scores.num_states() != self.num_tags {
            return Err(Error::DimensionMismatch {
                context: "emission scores vs DMV tags",
                expected: self.num_tags,
                found: scores.num_states(),
            });
        }
        if scores.is_empty() {
            return Err(Error::EmptyCorpus(" (zero-length sentence)"));
        }
        scores.check_feasible()
    }

    fn inside(&self, scores: &EmissionScores<S>, tb: &LogTables<S>) -> InsideChart<S> {
        let n = scores.len();
        let k = self.num_tags;
        let ninf = S::neg_infinity();
        let mut ch = InsideChart {
            n,
            k,
            seal_l: vec![ninf; n * n * k],
            seal_r: vec![ninf; n * n * k],
            half_l: vec![ninf; n * n * k],
            half_r: vec![ninf; n * n * k],
            trap_l: vec![ninf; n * n * k * k],
            trap_r: vec![ninf; n * n * k * k],
            log_marginal: ninf,
            ops: 0,
        };
        for h in 0..n {
            for t in 0..k {
                ch.seal_l[i3(n, k, h, h, t)] = tb.stop(t, L, ADJ);
                ch.seal_r[i3(n, k, h, h, t)] = tb.stop(t, R, ADJ);
            }
        }
        for w in 1..n {
            // Trapezoids: arc head -> child at distance w, child's
            // inner-facing side sealed, head's earlier children folded in.
            for h in 0..n - w {
                let m = h + w;
                for th in 0..k {
                    for tm in 0..k {
                        let mut acc = ninf;
                        for split in h..m {
                            let head_part = if split == h {
                                tb.cont(th, R, ADJ)
                            } else {
                                ch.half_r[i3(n, k, h, split, th)] + tb.cont(th, R, NONADJ)
                            };
                            acc = log_add_exp(acc, head_part + ch.seal_l[i3(n, k, m, split + 1, tm)]);
                            ch.ops += 1;
                        }
                        ch.trap_r[i4(n, k, h, m, th, tm)] =
                            acc + tb.attach(th, R, tm) + scores.get(m, tm);
                    }
                }
            }
            for h in w..n {
                let m = h - w;
                for th in 0..k {
                    for tm in 0..k {
                        let mut acc = ninf;
                        for split in m..h {
                            let head_part = if split + 1 == h {
                                tb.cont(th, L, ADJ)
                            } else {
                                ch.half_l[i3(n, k, h, split + 1, th)] + tb.cont(th, L, NONADJ)
                            };
                            acc = log_add_exp(acc, head_part + ch.seal_r[i3(n, k, m, split, tm)]);
                            ch.ops += 1;
                        }
                        ch.trap_l[i4(n, k, h, m, th, tm)] =
                            acc + tb.attach(th, L, tm) + scores.get(m, tm);
                    }
                }
            }
            // Half-constituents: the farthest child's outer side sealed.
            for h in 0..n - w {
                let e = h + w;
                for th in 0..k {
                    let mut acc = ninf;
                    for m in h + 1..=e {
                        for tm in 0..k {
                            acc = log_add_exp(
                                acc,
                                ch.trap_r[i4(n, k, h, m, th, tm)] + ch.seal_r[i3(n, k, m, e, tm)],
                            );
                            ch.ops += 1;
                        }
                    }
                    ch.half_r[i3(n, k, h, e, th)] = acc;
                }
            }
            for h in w..n {
                let b = h - w;
                for th in 0..k {
                    let mut acc = ninf;
                    for m in b..h {
                        for tm in 0..k {
                            acc = log_add_exp(
                                acc,
                                ch.trap_l[i4(n, k, h, m, th, tm)] + ch.seal_l[i3(n, k, m, b, tm)],
                            );
                            ch.ops += 1;
                        }
                    }
                    ch.half_l[i3(n, k, h, b, th)] = acc;
                }
            }
            // Seals: the non-adjacent stop decision.
            for h in 0..n - w {
                let e = h + w;
                for t in 0..k {
                    ch.seal_r[i3(n, k, h, e, t)] =
                        ch.half_r[i3(n, k, h, e, t)] + tb.stop(t, R, NONADJ);
                }
            }
            for h in w..n {
                let b = h - w;
                for t in 0..k {
                    ch.seal_l[i3(n, k, h, b, t)] =
                        ch.half_l[i3(n, k, h, b, t)] + tb.stop(t, L, NONADJ);
                }
            }
        }
        let mut ll = ninf;
        for r in 0..n {
            for t in 0..k {
                ll = log_add_exp(
                    ll,
                    tb.root[t]
                        + scores.get(r, t)
                        + ch.seal_l[i3(n, k, r, 0, t)]
                        + ch.seal_r[i3(n, k, r, n - 1, t)],
                );
                ch.ops += 1;
            }
        }
        ch.log_marginal = ll;
        ch
    }

    /// log Σ over (projective trees, tag assignments) of the joint score.
    pub fn log_marginal(&self, scores: &EmissionScores<S>) -> Result<S> {
        self.check_scores(scores)?;
        Ok(self.inside(scores, &self.tables()).log_marginal)
    }

    /// Log marginal plus the number of chart combinations performed.
    pub fn inside_stats(&self, scores: &EmissionScores<S>) -> Result<(S, usize)> {
        self.check_scores(scores)?;
        let ch = self.inside(scores, &self.tables());
        Ok((ch.log_marginal, ch.ops))
    }

    /// Exact gradient of the log marginal for every parameter group, via an
    /// adjoint sweep over the inside chart. Also returns the log marginal.
    pub fn expected_counts(&self, scores: &EmissionScores<S>) -> Result<(DmvGrads<S>, S)> {
        self.check_scores(scores)?;
        let tb = self.tables();
        let ch = self.inside(scores, &tb);
        let (n, k) = (ch.n, ch.k);
        let ll = ch.log_marginal;
        if ll == S::neg_infinity() {
            return Err(Error::ImpossibleObservation { token: 0 });
        }
        let zero = S::zero();
        let mut bar_seal_l = vec![zero; n * n * k];
        let mut bar_seal_r = vec![zero; n * n * k];
        let mut bar_half_l = vec![zero; n * n * k];
        let mut bar_half_r = vec![zero; n * n * k];
        let mut bar_trap_l = vec![zero; n * n * k * k];
        let mut bar_trap_r = vec![zero; n * n * k * k];
        let mut e_root = vec![zero; k];
        let mut e_attach = vec![zero; 2 * k * k];
        let mut e_stop = vec![zero; 4 * k];
        let mut e_cont = vec![zero; 4 * k];
        let mut grad_scores = Mat::zeros(n, k);

        let att_idx = |h: usize, d: usize, c: usize| (h * 2 + d) * k + c;
        let sv_idx = |h: usize, d: usize, v: usize| (h * 2 + d) * 2 + v;

        // Goal.
        for r in 0..n {
            for t in 0..k {
                let w = tb.root[t]
                    + scores.get(r, t)
                    + ch.seal_l[i3(n, k, r, 0, t)]
                    + ch.seal_r[i3(n, k, r, n - 1, t)];
                if w > S::neg_infinity() {
                    let p = (w - ll).exp();
                    e_root[t] += p;
                    grad_scores.add_at(r, t, p);
                    bar_seal_l[i3(n, k, r, 0, t)] += p;
                    bar_seal_r[i3(n, k, r, n - 1, t)] += p;
                }
            }
        }

        for w in (1..n).rev() {
            // Seals.
            for h in 0..n - w {
                let e = h + w;
                for t in 0..k {
                    let b = bar_seal_r[i3(n, k, h, e, t)];
                    if b != zero {
                        bar_half_r[i3(n, k, h, e, t)] += b;
                        e_stop[sv_idx(t, R, NONADJ)] += b;
                    }
                }
            }
            for h in w..n {
                let bpos = h - w;
                for t in 0..k {
                    let b = bar_seal_l[i3(n, k, h, bpos, t)];
                    if b != zero {
                        bar_half_l[i3(n, k, h, bpos, t)] += b;
                        e_stop[sv_idx(t, L, NONADJ)] += b;
                    }
                }
            }
            // Halves.
            for h in 0..n - w {
                let e = h + w;
                for th in 0..k {
                    let b = bar_half_r[i3(n, k, h, e, th)];
                    if b == zero {
                        continue;
                    }
                    let v = ch.half_r[i3(n, k, h, e, th)];
                    for m in h + 1..=e {
                        for tm in 0..k {
                            let c = ch.trap_r[i4(n, k, h, m, th, tm)] + ch.seal_r[i3(n, k, m, e, tm)];
                            if c > S::neg_infinity() {
                                let p = b * (c - v).exp();
                                bar_trap_r[i4(n, k, h, m, th, tm)] += p;
                                bar_seal_r[i3(n, k, m, e, tm)] += p;
                            }
                        }
                    }
                }
            }
            for h in w..n {
                let bpos = h - w;
                for th in 0..k {
                    let b = bar_half_l[i3(n, k, h, bpos, th)];
                    if b == zero {
                        continue;
                    }
                    let v = ch.half_l[i3(n, k, h, bpos, th)];
                    for m in bpos..h {
                        for tm in 0..k {
                            let c =
                                ch.trap_l[i4(n, k, h, m, th, tm)] + ch.seal_l[i3(n, k, m, bpos, tm)];
                            if c > S::neg_infinity() {
                                let p = b * (c - v).exp();
                                bar_trap_l[i4(n, k, h, m, th, tm)] += p;
                                bar_seal_l[i3(n, k, m, bpos, tm)] += p;
                            }
                        }
                    }
                }
            }
            // Trapezoids.
            for h in 0..n - w {
                let m = h + w;
                for th in 0..k {
                    for tm in 0..k {
                        let b = bar_trap_r[i4(n, k, h, m, th, tm)];
                        if b == zero {
                            continue;
                        }
                        e_attach[att_idx(th, R, tm)] += b;
                        grad_scores.add_at(m, tm, b);
                        let inner =
                            ch.trap_r[i4(n, k, h, m, th, tm)] - tb.attach(th, R, tm) - scores.get(m, tm);
                        for split in h..m {
                            let head_part = if split == h {
                                tb.cont(th, R, ADJ)
                            } else {
                                ch.half_r[i3(n, k, h, split, th)] + tb.cont(th, R, NONADJ)
                            };
                            let c = head_part + ch.seal_l[i3(n, k, m, split + 1, tm)];
                            if c > S::neg_infinity() {
                                let p = b * (c - inner).exp();
                                if split == h {
                                    e_cont[sv_idx(th, R, ADJ)] += p;
                                } else {
                                    e_cont[sv_idx(th, R, NONADJ)] += p;
                                    bar_half_r[i3(n, k, h, split, th)] += p;
                                }
                                bar_seal_l[i3(n, k, m, split + 1, tm)] += p;
                            }
                        }
                    }
                }
            }
            for h in w..n {
                let m = h - w;
                for th in 0..k {
                    for tm in 0..k {
                        let b = bar_trap_l[i4(n, k, h, m, th, tm)];
                        if b == zero {
                            continue;
                        }
                        e_attach[att_idx(th, L, tm)] += b;
                        grad_scores.add_at(m, tm, b);
                        let inner =
                            ch.trap_l[i4(n, k, h, m, th, tm)] - tb.attach(th, L, tm) - scores.get(m, tm);
                        for split in m..h {
                            let head_part = if split + 1 == h {
                                tb.cont(th, L, ADJ)
                            } else {
                                ch.half_l[i3(n, k, h, split + 1, th)] + tb.cont(th, L, NONADJ)
                            };
                            let c = head_part + ch.seal_r[i3(n, k, m, split, tm)];
                            if c > S::neg_infinity() {
                                let p = b * (c - inner).exp();
                                if split + 1 == h {
                                    e_cont[sv_idx(th, L, ADJ)] += p;
                                } else {
                                    e_cont[sv_idx(th, L, NONADJ)] += p;
                                    bar_half_l[i3(n, k, h, split + 1, th)] += p;
                                }
                                bar_seal_r[i3(n, k, m, split, tm)] += p;
                            }
                        }
                    }
                }
            }
        }
        // Width-zero seals carry the adjacent stop decisions.
        for h in 0..n {
            for t in 0..k {
                e_stop[sv_idx(t, R, ADJ)] += bar_seal_r[i3(n, k, h, h, t)];
                e_stop[sv_idx(t, L, ADJ)] += bar_seal_l[i3(n, k, h, h, t)];
            }
        }

        // Expected counts -> logit gradients through softmax/sigmoid.
        let p_root = softmax(&self.root_logits);
        let root_total: S = e_root.iter().copied().sum();
        let grad_root: Vec<S> = (0..k).map(|t| e_root[t] - p_root[t] * root_total).collect();
        let mut grad_attach = vec![zero; 2 * k * k];
        for row in 0..2 * k {
            let probs = softmax(&self.attach_logits[row * k..(row + 1) * k]);
            let total: S = e_attach[row * k..(row + 1) * k].iter().copied().sum();
            for c in 0..k {
                grad_attach[row * k + c] = e_attach[row * k + c] - probs[c] * total;
            }
        }
        let mut grad_stop = vec![zero; 4 * k];
        for i in 0..4 * k {
            let sig = sigmoid(self.stop_logits[i]);
            grad_stop[i] = e_stop[i] * (S::one() - sig) - e_cont[i] * sig;
        }
        Ok((
            DmvGrads {
                root_logits: grad_root,
                attach_logits: grad_attach,
                stop_logits: grad_stop,
                scores: grad_scores,
            },
            ll,
        ))
    }

    /// Highest-scoring (tree, tagging) derivation and its log score. Ties
    /// break toward the smaller head index, then the smaller tag index.
    pub fn viterbi(&self, scores: &EmissionScores<S>) -> Result<(DependencyParse, S)> {
        self.check_scores(scores)?;
        let tb = self.tables();
        let n = scores.len();
        let k = self.num_tags;
        let ninf = S::neg_infinity();
        let mut seal_l = vec![ninf; n * n * k];
        let mut seal_r = vec![ninf; n * n * k];
        let mut half_l = vec![ninf; n * n * k];
        let mut half_r = vec![ninf; n * n * k];
        let mut trap_l = vec![ninf; n * n * k * k];
        let mut trap_r = vec![ninf; n * n * k * k];
        let mut bp_trap_l = vec![0u32; n * n * k * k];
        let mut bp_trap_r = vec![0u32; n * n * k * k];
        let mut bp_half_l = vec![(0u32, 0u32); n * n * k];
        let mut bp_half_r = vec![(0u32, 0u32); n * n * k];

        for h in 0..n {
            for t in 0..k {
                seal_l[i3(n, k, h, h, t)] = tb.stop(t, L, ADJ);
                seal_r[i3(n, k, h, h, t)] = tb.stop(t, R, ADJ);
            }
        }
        for w in 1..n {
            for h in 0..n - w {
                let m = h + w;
                for th in 0..k {
                    for tm in 0..k {
                        let mut best = ninf;
                        let mut arg = h as u32;
                        for split in h..m {
                            let head_part = if split == h {
                                tb.cont(th, R, ADJ)
                            } else {
                                half_r[i3(n, k, h, split, th)] + tb.cont(th, R, NONADJ)
                            };
                            let c = head_part + seal_l[i3(n, k, m, split + 1, tm)];
                            if c > best {
                                best = c;
                                arg = split as u32;
                            }
                        }
                        trap_r[i4(n, k, h, m, th, tm)] = best + tb.attach(th, R, tm) + scores.get(m, tm);
                        bp_trap_r[i4(n, k, h, m, th, tm)] = arg;
                    }
                }
            }
            for h in w..n {
                let m = h - w;
                for th in 0..k {
                    for tm in 0..k {
                        let mut best = ninf;
                        let mut arg = m as u32;
                        for split in m..h {
                            let head_part = if split + 1 == h {
                                tb.cont(th, L, ADJ)
                            } else {
                                half_l[i3(n, k, h, split + 1, th)] + tb.cont(th, L, NONADJ)
                            };
                            let c = head_part + seal_r[i3(n, k, m, split, tm)];
                            if c > best {
                                best = c;
                                arg = split as u32;
                            }
                        }
                        trap_l[i4(n, k, h, m, th, tm)] = best + tb.attach(th, L, tm) + scores.get(m, tm);
                        bp_trap_l[i4(n, k, h, m, th, tm)] = arg;
                    }
                }
            }
            for h in 0..n - w {
                let e = h + w;
                for th in 0..k {
                    let mut best = ninf;
                    let mut arg = (0u32, 0u32);
                    for m in h + 1..=e {
                        for tm in 0..k {
                            let c = trap_r[i4(n, k, h, m, th, tm)] + seal_r[i3(n, k, m, e, tm)];
                            if c > best {
                                best = c;
                                arg = (m as u32, tm as u32);
                            }
                        }
                    }
                    half_r[i3(n, k, h, e, th)] = best;
                    bp_half_r[i3(n, k, h, e, th)] = arg;
                }
            }
            for h in w..n {
                let bpos = h - w;
                for th in 0..k {
                    let mut best = ninf;
                    let mut arg = (0u32, 0u32);
                    for m in bpos..h {
                        for tm in 0..k {
                            let c = trap_l[i4(n, k, h, m, th, tm)] + seal_l[i3(n, k, m, bpos, tm)];
                            if c > best {
                                best = c;
                                arg = (m as u32, tm as u32);
                            }
                        }
                    }
                    half_l[i3(n, k, h, bpos, th)] = best;
                    bp_half_l[i3(n, k, h, bpos, th)] = arg;
                }
            }
            for h in 0..n - w {
                let e = h + w;
                for t in 0..k {
                    seal_r[i3(n, k, h, e, t)] = half_r[i3(n, k, h, e, t)] + tb.stop(t, R, NONADJ);
                }
            }
            for h in w..n {
                let bpos = h - w;
                for t in 0..k {
                    seal_l[i3(n, k, h, bpos, t)] = half_l[i3(n, k, h, bpos, t)] + tb.stop(t, L, NONADJ);
                }
            }
        }
        let mut best = ninf;
        let mut best_root = (0usize, 0usize);
        for r in 0..n {
            for t in 0..k {
                let c = tb.root[t]
                    + scores.get(r, t)
                    + seal_l[i3(n, k, r, 0, t)]
                    + seal_r[i3(n, k, r, n - 1, t)];
                if c > best {
                    best = c;
                    best_root = (r, t);
                }
            }
        }

        // Backtrace.
        let mut heads = vec![0usize; n];
        let mut tags = vec![0usize; n];
        struct Walk<'a> {
            n: usize,
            k: usize,
            bp_trap_l: &'a [u32],
            bp_trap_r: &'a [u32],
            bp_half_l: &'a [(u32, u32)],
            bp_half_r: &'a [(u32, u32)],
            heads: &'a mut [usize],
            tags: &'a mut [usize],
        }
        impl Walk<'_> {
            fn seal_r(&mut self, h: usize, e: usize, t: usize) {
                if e > h {
                    self.half_r(h, e, t);
                }
            }
            fn seal_l(&mut self, h: usize, b: usize, t: usize) {
                if b < h {
                    self.half_l(h, b, t);
                }
            }
            fn half_r(&mut self, h: usize, e: usize, th: usize) {
                let (m, tm) = self.bp_half_r[i3(self.n, self.k, h, e, th)];
                let (m, tm) = (m as usize, tm as usize);
                self.heads[m] = h + 1;
                self.tags[m] = tm;
                self.trap_r(h, m, th, tm);
                self.seal_r(m, e, tm);
            }
            fn half_l(&mut self, h: usize, b: usize, th: usize) {
                let (m, tm) = self.bp_half_l[i3(self.n, self.k, h, b, th)];
                let (m, tm) = (m as usize, tm as usize);
                self.heads[m] = h + 1;
                self.tags[m] = tm;
                self.trap_l(h, m, th, tm);
                self.seal_l(m, b, tm);
            }
            fn trap_r(&mut self, h: usize, m: usize, th: usize, tm: usize) {
                let split = self.bp_trap_r[i4(self.n, self.k, h, m, th, tm)] as usize;
                self.seal_l(m, split + 1, tm);
                if split > h {
                    self.half_r(h, split, th);
                }
            }
            fn trap_l(&mut self, h: usize, m: usize, th: usize, tm: usize) {
                let split = self.bp_trap_l[i4(self.n, self.k, h, m, th, tm)] as usize;
                self.seal_r(m, split, tm);
                if split + 1 < h {
                    self.half_l(h, split + 1, th);
                }
            }
        }
        let (r, t) = best_root;
        heads[r] = 0;
        tags[r] = t;
        let mut walk = Walk {
            n,
            k,
            bp_trap_l: &bp_trap_l,
            bp_trap_r: &bp_trap_r,
            bp_half_l: &bp_half_l,
            bp_half_r: &bp_half_r,
            heads: &mut heads,
            tags: &mut tags,
        };
        walk.seal_l(r, 0, t);
        walk.seal_r(r, n - 1, t);
        Ok((DependencyParse { heads, tags }, best))
    }
}

/// Viterbi-EM training of a discrete DMV on observed tag sequences.
///
/// Alternates (a) best-parse decoding of every sentence under the current
/// multinomials (emission scores fixed at 0 for the observed tag) and
/// (b) count-and-normalize with additive smoothing. Starts from uniform
/// multinomials. Returns the trained logits together with the per-iteration
/// total Viterbi log score (measured with the parameters used for that
/// iteration's decoding pass).
pub fn train_viterbi_em<S: Scalar>(
    tag_sequences: &[Vec<usize>],
    num_tags: usize,
    iterations: usize,
    smoothing: f64,
) -> Result<(DmvParams<S>, Vec<S>)> {
    if smoothing <= 0.0 {
        return Err(Error::InvalidConfig("smoothing must be positive".into()));
    }
    if tag_sequences.is_empty() {
        return Err(Error::EmptyCorpus(" (no tag sequences)"));
    }
    for seq in tag_sequences {
        if seq.is_empty() {
            return Err(Error::EmptyCorpus(" (zero-length sentence)"));
        }
        if let Some(&t) = seq.iter().max() {
            if t >= num_tags {
                return Err(Error::DimensionMismatch {
                    context: "observed tag index vs tag count",
                    expected: num_tags,
                    found: t + 1,
                });
            }
        }
    }
    let k = num_tags;
    let lam = S::of(smoothing);
    let mut params = DmvParams::<S>::uniform(k);
    let mut score_trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let mut c_root = vec![S::zero(); k];
        let mut c_attach = vec![S::zero(); 2 * k * k];
        let mut c_stop = vec![S::zero(); 4 * k];
        let mut c_cont = vec![S::zero(); 4 * k];
        let mut total = S::zero();
        for seq in tag_sequences {
            let n = seq.len();
            let mut mat = Mat::filled(n, k, S::neg_infinity());
            for (i, &t) in seq.iter().enumerate() {
                mat.set(i, t, S::zero());
            }
            let scores = EmissionScores::new(mat);
            let (parse, score) = params.viterbi(&scores)?;
            total += score;
            count_events(&parse.heads, &parse.tags, k, &mut c_root, &mut c_attach, &mut c_stop, &mut c_cont);
        }
        score_trace.push(total);
        // M step: normalize with additive smoothing, store as log probs /
        // Bernoulli logits.
        let n_root: S = c_root.iter().copied().sum();
        for t in 0..k {
            params.root_logits[t] = ((c_root[t] + lam) / (n_root + lam * S::of_usize(k))).ln();
        }
        for row in 0..2 * k {
            let total_row: S = c_attach[row * k..(row + 1) * k].iter().copied().sum();
            for c in 0..k {
                params.attach_logits[row * k + c] =
                    ((c_attach[row * k + c] + lam) / (total_row + lam * S::of_usize(k))).ln();
            }
        }
        for i in 0..4 * k {
            let p_stop = (c_stop[i] + lam) / (c_stop[i] + c_cont[i] + lam + lam);
            params.stop_logits[i] = (p_stop / (S::one() - p_stop)).ln();
        }
    }
    Ok((params, score_trace))
}

/// Accumulate root/attach/stop/continue events of one parsed sentence.
fn count_events<S: Scalar>(
    heads: &[usize],
    tags: &[usize],
    k: usize,
    c_root: &mut [S],
    c_attach: &mut [S],
    c_stop: &mut [S],
    c_cont: &mut [S],
) {
    let n = heads.len();
    let sv = |t: usize, d: usize, v: usize| (t * 2 + d) * 2 + v;
    for (i, &h) in heads.iter().enumerate() {
        if h == 0 {
            c_root[tags[i]] += S::one();
        }
    }
    for i in 0..n {
        let t = tags[i];
        for dir in 0..2 {
            let mut n_children = 0usize;
            for (j, &h) in heads.iter().enumerate() {
                if h == i + 1 && (if dir == L { j < i } else { j > i }) {
                    n_children += 1;
                    c_attach[(t * 2 + dir) * k + tags[j]] += S::one();
                }
            }
            if n_children == 0 {
                c_stop[sv(t, dir, ADJ)] += S::one();
            } else {
                c_cont[sv(t, dir, ADJ)] += S::one();
                c_cont[sv(t, dir, NONADJ)] += S::of_usize(n_children - 1);
                c_stop[sv(t, dir, NONADJ)] += S::one();
            }
        }
    }
}
