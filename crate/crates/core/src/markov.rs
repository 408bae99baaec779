//! Markov-structured syntax model over K latent states.
//!
//! Multinomials are parameterized as unconstrained logits realized through a
//! softmax, so the marginal likelihood can be ascended directly by gradient
//! methods. All recursions run in natural-log space with log-sum-exp; there
//! is no end-of-sentence transition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::scalar::{log_softmax, log_sum_exp, softmax, Scalar};

/// Per-token log emission values: an `len × K` matrix of `log p(x_i | z_i = k)`.
/// Entries are finite or -inf.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionScores<S> {
    mat: Mat<S>,
}

impl<S: Scalar> EmissionScores<S> {
    pub fn new(mat: Mat<S>) -> Self {
        EmissionScores { mat }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        EmissionScores { mat: Mat::from_rows(rows) }
    }

    pub fn len(&self) -> usize {
        self.mat.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.mat.rows() == 0
    }

    pub fn num_states(&self) -> usize {
        self.mat.cols()
    }

    #[inline]
    pub fn get(&self, token: usize, state: usize) -> S {
        self.mat.get(token, state)
    }

    pub fn row(&self, token: usize) -> &[S] {
        self.mat.row(token)
    }

    pub fn as_mat(&self) -> &Mat<S> {
        &self.mat
    }

    /// Error if any token has no admissible state at all.
    pub fn check_feasible(&self) -> Result<()> {
        for i in 0..self.len() {
            if self.row(i).iter().all(|&v| v == S::neg_infinity()) {
                return Err(Error::ImpossibleObservation { token: i });
            }
        }
        Ok(())
    }
}

/// Initial and transition logits of the Markov prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovParams<S> {
    pub init_logits: Vec<S>,
    /// Row = previous state.
    pub trans_logits: Mat<S>,
}

/// Posterior marginals from the forward-backward recursion.
#[derive(Debug, Clone)]
pub struct MarkovPosteriors<S> {
    /// `gamma[i][k] = p(z_i = k | x)`, rows sum to one.
    pub gamma: Mat<S>,
    /// `xi[i][j][k] = p(z_i = j, z_{i+1} = k | x)`, one `K × K` matrix per
    /// adjacent pair; each sums to one.
    pub xi: Vec<Mat<S>>,
    pub log_marginal: S,
}

/// Gradients of the log marginal w.r.t. logits and emission scores.
#[derive(Debug, Clone)]
pub struct MarkovGrads<S> {
    pub init_logits: Vec<S>,
    pub trans_logits: Mat<S>,
    /// Equals the posterior state marginals gamma.
    pub scores: Mat<S>,
}

impl<S: Scalar> MarkovParams<S> {
    /// All logits drawn i.i.d. from U[0, 1]; softmax then realizes
    /// probabilities proportional to exp(u).
    pub fn init(num_states: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let init_logits = (0..num_states).map(|_| S::of(rng.gen::<f64>())).collect();
        let mut trans_logits = Mat::zeros(num_states, num_states);
        for v in trans_logits.as_mut_slice().iter_mut() {
            *v = S::of(rng.gen::<f64>());
        }
        MarkovParams { init_logits, trans_logits }
    }

    pub fn num_states(&self) -> usize {
        self.init_logits.len()
    }

    pub fn param_count(&self) -> usize {
        let k = self.num_states();
        k + k * k
    }

    pub fn extend_params_flat(&self, out: &mut Vec<S>) {
        out.extend_from_slice(&self.init_logits);
        out.extend_from_slice(self.trans_logits.as_slice());
    }

    pub fn load_params_flat(&mut self, flat: &[S]) -> usize {
        let k = self.num_states();
        self.init_logits.copy_from_slice(&flat[..k]);
        self.trans_logits.as_mut_slice().copy_from_slice(&flat[k..k + k * k]);
        k + k * k
    }

    fn log_probs(&self) -> (Vec<S>, Mat<S>) {
        let log_init = log_softmax(&self.init_logits);
        let k = self.num_states();
        let mut log_trans = Mat::zeros(k, k);
        for j in 0..k {
            let row = log_softmax(self.trans_logits.row(j));
            log_trans.row_mut(j).copy_from_slice(&row);
        }
        (log_init, log_trans)
    }

    fn check_scores(&self, scores: &EmissionScores<S>) -> Result<()> {
        if scores.num_states() != self.num_states() {
            return Err(Error::DimensionMismatch {
                context: "emission scores vs Markov states",
                expected: self.num_states(),
                found: scores.num_states(),
            });
        }
        if scores.is_empty() {
            return Err(Error::EmptyCorpus(" (zero-length sentence)"));
        }
        scores.check_feasible()
    }

    fn forward(&self, scores: &EmissionScores<S>) -> (Mat<S>, S) {
        let (log_init, log_trans) = self.log_probs();
        let (len, k) = (scores.len(), self.num_states());
        let mut alpha = Mat::filled(len, k, S::neg_infinity());
        for s in 0..k {
            alpha.set(0, s, log_init[s] + scores.get(0, s));
        }
        let mut scratch = vec![S::neg_infinity(); k];
        for i in 1..len {
            for s in 0..k {
                for (j, slot) in scratch.iter_mut().enumerate() {
                    *slot = alpha.get(i - 1, j) + log_trans.get(j, s);
                }
                alpha.set(i, s, log_sum_exp(&scratch) + scores.get(i, s));
            }
        }
        let ll = log_sum_exp(alpha.row(len - 1));
        (alpha, ll)
    }

    /// log Σ_z Π_i p(z_i | z_{i-1}) exp(scores[i, z_i]).
    pub fn log_marginal(&self, scores: &EmissionScores<S>) -> Result<S> {
        self.check_scores(scores)?;
        Ok(self.forward(scores).1)
    }

    /// Posterior unary and pairwise state marginals plus the log marginal.
    pub fn forward_backward(&self, scores: &EmissionScores<S>) -> Result<MarkovPosteriors<S>> {
        self.check_scores(scores)?;
        let (log_init, log_trans) = self.log_probs();
        let (len, k) = (scores.len(), self.num_states());
        let (alpha, ll) = self.forward(scores);

        let mut beta = Mat::filled(len, k, S::zero());
        let mut scratch = vec![S::neg_infinity(); k];
        for i in (0..len - 1).rev() {
            for j in 0..k {
                for (s, slot) in scratch.iter_mut().enumerate() {
                    *slot = log_trans.get(j, s) + scores.get(i + 1, s) + beta.get(i + 1, s);
                }
                beta.set(i, j, log_sum_exp(&scratch));
            }
        }

        let mut gamma = Mat::zeros(len, k);
        for i in 0..len {
            for s in 0..k {
                gamma.set(i, s, (alpha.get(i, s) + beta.get(i, s) - ll).exp());
            }
        }
        let mut xi = Vec::with_capacity(len.saturating_sub(1));
        for i in 0..len - 1 {
            let mut pair = Mat::zeros(k, k);
            for j in 0..k {
                for s in 0..k {
                    let lp = alpha.get(i, j)
                        + log_trans.get(j, s)
                        + scores.get(i + 1, s)
                        + beta.get(i + 1, s)
                        - ll;
                    pair.set(j, s, lp.exp());
                }
            }
            xi.push(pair);
        }
        let _ = log_init; // initial term already folded into alpha
        Ok(MarkovPosteriors { gamma, xi, log_marginal: ll })
    }

    /// Most probable state sequence; ties break toward the lower state index.
    pub fn viterbi(&self, scores: &EmissionScores<S>) -> Result<Vec<usize>> {
        self.check_scores(scores)?;
        let (log_init, log_trans) = self.log_probs();
        let (len, k) = (scores.len(), self.num_states());
        let mut delta = Mat::filled(len, k, S::neg_infinity());
        let mut back = vec![vec![0usize; k]; len];
        for s in 0..k {
            delta.set(0, s, log_init[s] + scores.get(0, s));
        }
        for i in 1..len {
            for s in 0..k {
                let mut best = S::neg_infinity();
                let mut arg = 0usize;
                for j in 0..k {
                    let cand = delta.get(i - 1, j) + log_trans.get(j, s);
                    if cand > best {
                        best = cand;
                        arg = j;
                    }
                }
                delta.set(i, s, best + scores.get(i, s));
                back[i][s] = arg;
            }
        }
        let mut cur = 0usize;
        let mut best = S::neg_infinity();
        for s in 0..k {
            if delta.get(len - 1, s) > best {
                best = delta.get(len - 1, s);
                cur = s;
            }
        }
        let mut path = vec![0usize; len];
        path[len - 1] = cur;
        for i in (1..len).rev() {
            cur = back[i][cur];
            path[i - 1] = cur;
        }
        Ok(path)
    }

    /// Exact gradient of the log marginal w.r.t. logits and emission scores.
    ///
    /// `d log p / d scores[i,k]` is the posterior gamma; logit gradients are
    /// expected transition counts minus their softmax-weighted totals.
    pub fn grad_log_marginal(&self, scores: &EmissionScores<S>) -> Result<(MarkovGrads<S>, S)> {
        let post = self.forward_backward(scores)?;
        let k = self.num_states();
        let pi = softmax(&self.init_logits);
        let mut grad_init = vec![S::zero(); k];
        for s in 0..k {
            grad_init[s] = post.gamma.get(0, s) - pi[s];
        }
        let mut grad_trans = Mat::zeros(k, k);
        if !post.xi.is_empty() {
            let mut counts = Mat::zeros(k, k);
            for pair in &post.xi {
                for j in 0..k {
                    for s in 0..k {
                        counts.add_at(j, s, pair.get(j, s));
                    }
                }
            }
            for j in 0..k {
                let row_total: S = counts.row(j).iter().copied().sum();
                let probs = softmax(self.trans_logits.row(j));
                for s in 0..k {
                    grad_trans.set(j, s, counts.get(j, s) - probs[s] * row_total);
                }
            }
        }
        let ll = post.log_marginal;
        Ok((
            MarkovGrads {
                init_logits: grad_init,
                trans_logits: grad_trans,
                scores: post.gamma,
            },
            ll,
        ))
    }
}
