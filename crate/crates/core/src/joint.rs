//! The full generative model: syntax prior × per-state diagonal Gaussians ×
//! volume-preserving projector.
//!
//! Emission scores are Gaussian log densities evaluated at the inverse
//! projection of each observed vector, plus the (identically zero) log
//! Jacobian determinant. With a depth-0 flow the model degenerates exactly
//! to a Gaussian HMM or Gaussian DMV over the observed vectors.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Sentence};
use crate::dmv::{DmvGrads, DmvParams};
use crate::error::{Error, Result};
use crate::flow::{Flow, FlowGrads};
use crate::markov::{EmissionScores, MarkovGrads, MarkovParams};
use crate::matrix::Mat;
use crate::scalar::{ln_two_pi, softmax, Scalar};

/// Elementwise lower bound on emission variances. Guards the degenerate
/// zero-variance solution that drives the likelihood to infinity.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// K diagonal Gaussians over latent embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmissions<S> {
    /// K × d means.
    pub means: Mat<S>,
    /// K × d variances, elementwise ≥ [`VARIANCE_FLOOR`].
    pub variances: Mat<S>,
    pub trainable_variance: bool,
}

impl<S: Scalar> GaussianEmissions<S> {
    pub fn new(means: Mat<S>, mut variances: Mat<S>, trainable_variance: bool) -> Result<Self> {
        if means.rows() != variances.rows() || means.cols() != variances.cols() {
            return Err(Error::DimensionMismatch {
                context: "Gaussian means vs variances",
                expected: means.rows() * means.cols(),
                found: variances.rows() * variances.cols(),
            });
        }
        let floor = S::of(VARIANCE_FLOOR);
        for v in variances.as_mut_slice() {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: "Gaussian variance".into() });
            }
            *v = v.max(floor);
        }
        Ok(GaussianEmissions { means, variances, trainable_variance })
    }

    /// Means at the empirical mean of `latents` plus per-coordinate Gaussian
    /// noise of the given standard deviation; variances at the empirical
    /// per-coordinate variance.
    pub fn init_from_latents(
        latents: &Mat<S>,
        num_states: usize,
        noise_std: f64,
        trainable_variance: bool,
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        let (n, d) = (latents.rows(), latents.cols());
        if n == 0 {
            return Err(Error::EmptyCorpus(" (no latent vectors)"));
        }
        let nf = S::of_usize(n);
        let mut mean = vec![S::zero(); d];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(latents.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![S::zero(); d];
        for r in 0..n {
            for (j, &v) in latents.row(r).iter().enumerate() {
                let diff = v - mean[j];
                var[j] += diff * diff;
            }
        }
        var.iter_mut().for_each(|v| *v /= nf);

        let mut means = Mat::zeros(num_states, d);
        for k in 0..num_states {
            for j in 0..d {
                let noise = standard_normal(rng) * noise_std;
                means.set(k, j, mean[j] + S::of(noise));
            }
        }
        let mut variances = Mat::zeros(num_states, d);
        for k in 0..num_states {
            variances.row_mut(k).copy_from_slice(&var);
        }
        GaussianEmissions::new(means, variances, trainable_variance)
    }

    pub fn num_states(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Diagonal Gaussian log density of `e` under state `k`.
    pub fn log_density(&self, k: usize, e: &[S]) -> S {
        let half = S::of(0.5);
        let mut acc = S::zero();
        for (j, &x) in e.iter().enumerate() {
            let var = self.variances.get(k, j);
            let diff = x - self.means.get(k, j);
            acc -= half * (ln_two_pi::<S>() + var.ln() + diff * diff / var);
        }
        acc
    }

    pub fn param_count(&self) -> usize {
        let base = self.means.rows() * self.means.cols();
        if self.trainable_variance {
            2 * base
        } else {
            base
        }
    }

    pub fn extend_params_flat(&self, out: &mut Vec<S>) {
        out.extend_from_slice(self.means.as_slice());
        if self.trainable_variance {
            out.extend_from_slice(self.variances.as_slice());
        }
    }

    pub fn load_params_flat(&mut self, flat: &[S]) -> usize {
        let base = self.means.rows() * self.means.cols();
        self.means.as_mut_slice().copy_from_slice(&flat[..base]);
        if self.trainable_variance {
            let floor = S::of(VARIANCE_FLOOR);
            for (v, &src) in self.variances.as_mut_slice().iter_mut().zip(&flat[base..2 * base]) {
                *v = src.max(floor);
            }
            2 * base
        } else {
            base
        }
    }
}

fn standard_normal(rng: &mut impl RngCore) -> f64 {
    // Box-Muller; draws two uniforms per call for simplicity.
    let u1: f64 = loop {
        let u = rng.gen::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// The discrete structured prior: Markov chain or DMV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "structure")]
pub enum SyntaxParams<S> {
    Markov(MarkovParams<S>),
    Dmv(DmvParams<S>),
}

impl<S: Scalar> SyntaxParams<S> {
    pub fn num_states(&self) -> usize {
        match self {
            SyntaxParams::Markov(m) => m.num_states(),
            SyntaxParams::Dmv(d) => d.num_tags(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SyntaxParams::Markov(_) => "markov",
            SyntaxParams::Dmv(_) => "dmv",
        }
    }

    pub fn as_markov(&self) -> Result<&MarkovParams<S>> {
        match self {
            SyntaxParams::Markov(m) => Ok(m),
            SyntaxParams::Dmv(_) => {
                Err(Error::StructureMismatch { expected: "markov", found: "dmv" })
            }
        }
    }

    pub fn as_dmv(&self) -> Result<&DmvParams<S>> {
        match self {
            SyntaxParams::Dmv(d) => Ok(d),
            SyntaxParams::Markov(_) => {
                Err(Error::StructureMismatch { expected: "dmv", found: "markov" })
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            SyntaxParams::Markov(m) => m.param_count(),
            SyntaxParams::Dmv(d) => d.param_count(),
        }
    }

    pub fn extend_params_flat(&self, out: &mut Vec<S>) {
        match self {
            SyntaxParams::Markov(m) => m.extend_params_flat(out),
            SyntaxParams::Dmv(d) => d.extend_params_flat(out),
        }
    }

    pub fn load_params_flat(&mut self, flat: &[S]) -> usize {
        match self {
            SyntaxParams::Markov(m) => m.load_params_flat(flat),
            SyntaxParams::Dmv(d) => d.load_params_flat(flat),
        }
    }
}

/// Gradients of one sentence's log likelihood, shape-aligned with the model.
#[derive(Debug, Clone)]
pub struct JointGrads<S> {
    pub flow: FlowGrads<S>,
    pub means: Mat<S>,
    /// Present only when the variance is trainable.
    pub variances: Option<Mat<S>>,
    pub syntax: SyntaxGrads<S>,
}

/// Syntax-logit gradients (emission-score gradients are consumed internally).
#[derive(Debug, Clone)]
pub enum SyntaxGrads<S> {
    Markov { init_logits: Vec<S>, trans_logits: Mat<S> },
    Dmv { root_logits: Vec<S>, attach_logits: Vec<S>, stop_logits: Vec<S> },
}

impl<S: Scalar> JointGrads<S> {
    pub fn zeros(model: &JointModel<S>) -> Self {
        let k = model.emissions.num_states();
        let d = model.emissions.dim();
        let syntax = match &model.syntax {
            SyntaxParams::Markov(_) => SyntaxGrads::Markov {
                init_logits: vec![S::zero(); k],
                trans_logits: Mat::zeros(k, k),
            },
            SyntaxParams::Dmv(_) => SyntaxGrads::Dmv {
                root_logits: vec![S::zero(); k],
                attach_logits: vec![S::zero(); 2 * k * k],
                stop_logits: vec![S::zero(); 4 * k],
            },
        };
        JointGrads {
            flow: FlowGrads::zeros(&model.flow),
            means: Mat::zeros(k, d),
            variances: model.emissions.trainable_variance.then(|| Mat::zeros(k, d)),
            syntax,
        }
    }

    pub fn add(&mut self, other: &JointGrads<S>) {
        self.flow.add(&other.flow);
        for (a, b) in self.means.as_mut_slice().iter_mut().zip(other.means.as_slice()) {
            *a += *b;
        }
        if let (Some(va), Some(vb)) = (&mut self.variances, &other.variances) {
            for (a, b) in va.as_mut_slice().iter_mut().zip(vb.as_slice()) {
                *a += *b;
            }
        }
        match (&mut self.syntax, &other.syntax) {
            (
                SyntaxGrads::Markov { init_logits: ia, trans_logits: ta },
                SyntaxGrads::Markov { init_logits: ib, trans_logits: tb },
            ) => {
                for (a, b) in ia.iter_mut().zip(ib) {
                    *a += *b;
                }
                for (a, b) in ta.as_mut_slice().iter_mut().zip(tb.as_slice()) {
                    *a += *b;
                }
            }
            (
                SyntaxGrads::Dmv { root_logits: ra, attach_logits: aa, stop_logits: sa },
                SyntaxGrads::Dmv { root_logits: rb, attach_logits: ab, stop_logits: sb },
            ) => {
                for (a, b) in ra.iter_mut().zip(rb) {
                    *a += *b;
                }
                for (a, b) in aa.iter_mut().zip(ab) {
                    *a += *b;
                }
                for (a, b) in sa.iter_mut().zip(sb) {
                    *a += *b;
                }
            }
            _ => panic!("mismatched syntax gradient kinds"),
        }
    }

    pub fn scale(&mut self, factor: S) {
        for l in &mut self.flow.layers {
            for v in l
                .w1
                .as_mut_slice()
                .iter_mut()
                .chain(l.b1.iter_mut())
                .chain(l.w2.as_mut_slice().iter_mut())
                .chain(l.b2.iter_mut())
            {
                *v *= factor;
            }
        }
        for v in self.means.as_mut_slice() {
            *v *= factor;
        }
        if let Some(vars) = &mut self.variances {
            for v in vars.as_mut_slice() {
                *v *= factor;
            }
        }
        match &mut self.syntax {
            SyntaxGrads::Markov { init_logits, trans_logits } => {
                for v in init_logits.iter_mut().chain(trans_logits.as_mut_slice()) {
                    *v *= factor;
                }
            }
            SyntaxGrads::Dmv { root_logits, attach_logits, stop_logits } => {
                for v in root_logits
                    .iter_mut()
                    .chain(attach_logits.iter_mut())
                    .chain(stop_logits.iter_mut())
                {
                    *v *= factor;
                }
            }
        }
    }

    /// Flatten in the model's canonical parameter order.
    pub fn to_flat(&self) -> Vec<S> {
        let mut out = Vec::new();
        self.flow.extend_flat(&mut out);
        out.extend_from_slice(self.means.as_slice());
        if let Some(vars) = &self.variances {
            out.extend_from_slice(vars.as_slice());
        }
        match &self.syntax {
            SyntaxGrads::Markov { init_logits, trans_logits } => {
                out.extend_from_slice(init_logits);
                out.extend_from_slice(trans_logits.as_slice());
            }
            SyntaxGrads::Dmv { root_logits, attach_logits, stop_logits } => {
                out.extend_from_slice(root_logits);
                out.extend_from_slice(attach_logits);
                out.extend_from_slice(stop_logits);
            }
        }
        out
    }
}

/// Flow + Gaussian emissions + syntax prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointModel<S> {
    pub flow: Flow<S>,
    pub emissions: GaussianEmissions<S>,
    pub syntax: SyntaxParams<S>,
}

/// Sentence length sampler for synthetic generation. For the DMV the range
/// acts as an accepted window: derivations outside it are rejected and
/// redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LengthDist {
    Fixed(usize),
    Uniform { min: usize, max: usize },
}

impl LengthDist {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LengthDist::Fixed(n) => n >= 1,
            LengthDist::Uniform { min, max } => min >= 1 && min <= max,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid length distribution {self:?}")))
        }
    }

    fn bounds(&self) -> (usize, usize) {
        match *self {
            LengthDist::Fixed(n) => (n, n),
            LengthDist::Uniform { min, max } => (min, max),
        }
    }

    fn sample(&self, rng: &mut impl RngCore) -> usize {
        match *self {
            LengthDist::Fixed(n) => n,
            LengthDist::Uniform { min, max } => rng.gen_range(min..=max),
        }
    }
}

impl<S: Scalar> JointModel<S> {
    /// K and dimension consistency across the three components.
    pub fn validate(&self) -> Result<()> {
        if self.syntax.num_states() != self.emissions.num_states() {
            return Err(Error::DimensionMismatch {
                context: "syntax states vs Gaussian states",
                expected: self.emissions.num_states(),
                found: self.syntax.num_states(),
            });
        }
        if self.flow.in_dim() != self.emissions.dim() {
            return Err(Error::DimensionMismatch {
                context: "flow dimension vs Gaussian dimension",
                expected: self.emissions.dim(),
                found: self.flow.in_dim(),
            });
        }
        Ok(())
    }

    pub fn num_states(&self) -> usize {
        self.emissions.num_states()
    }

    pub fn dim(&self) -> usize {
        self.emissions.dim()
    }

    /// Marginal emission factor per token and state: the Gaussian log
    /// density at the inverse-projected embedding plus the log Jacobian
    /// determinant (zero for this flow). Also returns the latent vectors.
    pub fn emission_log_scores(&self, embeddings: &Mat<S>) -> Result<(EmissionScores<S>, Mat<S>)> {
        let k = self.num_states();
        let len = embeddings.rows();
        let mut scores = Mat::zeros(len, k);
        let mut latents = Mat::zeros(len, self.dim());
        for i in 0..len {
            let (e, log_det) = self.flow.inverse_apply(embeddings.row(i))?;
            for s in 0..k {
                scores.set(i, s, self.emissions.log_density(s, &e) + log_det);
            }
            latents.row_mut(i).copy_from_slice(&e);
        }
        Ok((EmissionScores::new(scores), latents))
    }

    /// Exact log marginal likelihood of one sentence.
    pub fn sentence_log_likelihood(&self, sentence: &Sentence<S>) -> Result<S> {
        self.log_likelihood_of(&sentence.embeddings)
    }

    /// Log likelihood of a raw `len × d` embedding matrix.
    pub fn log_likelihood_of(&self, embeddings: &Mat<S>) -> Result<S> {
        let (scores, _) = self.emission_log_scores(embeddings)?;
        match &self.syntax {
            SyntaxParams::Markov(m) => m.log_marginal(&scores),
            SyntaxParams::Dmv(d) => d.log_marginal(&scores),
        }
    }

    /// Exact gradient of the sentence log likelihood for all trainable
    /// parameter groups, plus the log likelihood itself.
    pub fn grad_sentence(&self, sentence: &Sentence<S>) -> Result<(JointGrads<S>, S)> {
        let embeddings = &sentence.embeddings;
        let (scores, latents) = self.emission_log_scores(embeddings)?;
        let k = self.num_states();
        let d = self.dim();
        let len = embeddings.rows();

        // Syntax gradients and the posterior state marginals.
        let (syntax, grad_scores, ll) = match &self.syntax {
            SyntaxParams::Markov(m) => {
                let (g, ll): (MarkovGrads<S>, S) = m.grad_log_marginal(&scores)?;
                (
                    SyntaxGrads::Markov { init_logits: g.init_logits, trans_logits: g.trans_logits },
                    g.scores,
                    ll,
                )
            }
            SyntaxParams::Dmv(dm) => {
                let (g, ll): (DmvGrads<S>, S) = dm.expected_counts(&scores)?;
                (
                    SyntaxGrads::Dmv {
                        root_logits: g.root_logits,
                        attach_logits: g.attach_logits,
                        stop_logits: g.stop_logits,
                    },
                    g.scores,
                    ll,
                )
            }
        };

        // Gaussian gradients and the gradient w.r.t. each latent vector.
        let mut means = Mat::zeros(k, d);
        let mut variances = self.emissions.trainable_variance.then(|| Mat::zeros(k, d));
        let mut flow_grads = FlowGrads::zeros(&self.flow);
        let half = S::of(0.5);
        for i in 0..len {
            let e = latents.row(i);
            let mut grad_e = vec![S::zero(); d];
            for s in 0..k {
                let w = grad_scores.get(i, s);
                if w == S::zero() {
                    continue;
                }
                for j in 0..d {
                    let var = self.emissions.variances.get(s, j);
                    let diff = e[j] - self.emissions.means.get(s, j);
                    means.add_at(s, j, w * diff / var);
                    grad_e[j] -= w * diff / var;
                    if let Some(vars) = &mut variances {
                        vars.add_at(s, j, w * half * (diff * diff / (var * var) - var.recip()));
                    }
                }
            }
            self.flow.inverse_apply_with_grad(embeddings.row(i), &grad_e, &mut flow_grads)?;
        }
        Ok((JointGrads { flow: flow_grads, means, variances, syntax }, ll))
    }

    pub fn param_count(&self) -> usize {
        self.flow.param_count() + self.emissions.param_count() + self.syntax.param_count()
    }

    /// All trainable parameters in canonical order: flow, means,
    /// [variances], syntax logits.
    pub fn params_flat(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        self.flow.extend_params_flat(&mut out);
        self.emissions.extend_params_flat(&mut out);
        self.syntax.extend_params_flat(&mut out);
        out
    }

    pub fn load_params_flat(&mut self, flat: &[S]) {
        let mut pos = self.flow.load_params_flat(flat);
        pos += self.emissions.load_params_flat(&flat[pos..]);
        pos += self.syntax.load_params_flat(&flat[pos..]);
        debug_assert_eq!(pos, flat.len());
    }

    /// Ancestral sampling: draw structure and tags from the syntax prior,
    /// latent vectors from the state Gaussians, and push them through the
    /// forward projection. Gold tags (and heads, for the DMV) are recorded.
    pub fn sample_corpus(
        &self,
        n_sentences: usize,
        length_dist: LengthDist,
        seed: u64,
    ) -> Result<Corpus<S>> {
        length_dist.validate()?;
        if n_sentences == 0 {
            return Err(Error::InvalidConfig("cannot sample an empty corpus".into()));
        }
        self.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut sentences = Vec::with_capacity(n_sentences);
        let mut token_counter = 0usize;
        for _ in 0..n_sentences {
            let (tags, heads) = match &self.syntax {
                SyntaxParams::Markov(m) => {
                    let len = length_dist.sample(&mut rng);
                    (sample_markov_tags(m, len, &mut rng), None)
                }
                SyntaxParams::Dmv(dm) => {
                    let (tags, heads) = sample_dmv_derivation(dm, length_dist, &mut rng)?;
                    (tags, Some(heads))
                }
            };
            let len = tags.len();
            let d = self.dim();
            let mut emb = Mat::zeros(len, d);
            for (i, &z) in tags.iter().enumerate() {
                let mut e = vec![S::zero(); d];
                for (j, ej) in e.iter_mut().enumerate() {
                    let std = self.emissions.variances.get(z, j).sqrt();
                    *ej = self.emissions.means.get(z, j) + std * S::of(standard_normal(&mut rng));
                }
                let x = self.flow.forward_apply(&e)?;
                emb.row_mut(i).copy_from_slice(&x);
            }
            let tokens: Vec<String> = (0..len)
                .map(|_| {
                    token_counter += 1;
                    format!("t{token_counter}")
                })
                .collect();
            sentences.push(Sentence {
                tokens,
                embeddings: emb,
                gold_tags: Some(tags.iter().map(|t| t.to_string()).collect()),
                gold_heads: heads,
                non_projective: false,
            });
        }
        Corpus::new(sentences, None)
    }
}

fn sample_cat<S: Scalar>(probs: &[S], rng: &mut impl RngCore) -> usize {
    let u = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p.to_f64().unwrap_or(0.0);
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn sample_markov_tags<S: Scalar>(
    params: &MarkovParams<S>,
    len: usize,
    rng: &mut impl RngCore,
) -> Vec<usize> {
    let init = softmax(&params.init_logits);
    let rows: Vec<Vec<S>> = (0..params.num_states())
        .map(|j| softmax(params.trans_logits.row(j)))
        .collect();
    let mut tags = Vec::with_capacity(len);
    let mut prev = sample_cat(&init, rng);
    tags.push(prev);
    for _ in 1..len {
        prev = sample_cat(&rows[prev], rng);
        tags.push(prev);
    }
    tags
}

struct SampledNode {
    tag: usize,
    /// Children in generation order (nearest first).
    left: Vec<usize>,
    right: Vec<usize>,
}

/// Head-outward derivation sampling with rejection on the length window.
fn sample_dmv_derivation<S: Scalar>(
    params: &DmvParams<S>,
    length_dist: LengthDist,
    rng: &mut impl RngCore,
) -> Result<(Vec<usize>, Vec<usize>)> {
    use crate::dmv::{Direction, Valence};
    let k = params.num_tags();
    let root_probs = softmax(&params.root_logits);
    let attach_probs: Vec<Vec<Vec<S>>> = (0..k)
        .map(|h| {
            Direction::ALL
                .iter()
                .map(|&d| softmax(&(0..k).map(|c| params.attach_logit(h, d, c)).collect::<Vec<_>>()))
                .collect()
        })
        .collect();
    let stop_probs: Vec<Vec<Vec<f64>>> = (0..k)
        .map(|h| {
            Direction::ALL
                .iter()
                .map(|&d| {
                    Valence::ALL
                        .iter()
                        .map(|&v| {
                            crate::scalar::sigmoid(params.stop_logit(h, d, v)).to_f64().unwrap()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let (min_len, max_len) = length_dist.bounds();
    let size_cap = max_len.saturating_mul(8).max(64);
    const MAX_ATTEMPTS: usize = 100_000;
    for _ in 0..MAX_ATTEMPTS {
        let mut arena: Vec<SampledNode> = Vec::new();
        let root_tag = sample_cat(&root_probs, rng);
        if expand(root_tag, &attach_probs, &stop_probs, rng, &mut arena, size_cap).is_none() {
            continue; // runaway derivation, redraw
        }
        if arena.len() < min_len || arena.len() > max_len {
            continue;
        }
        // Linearize: farthest left child first, head, then right children
        // nearest first.
        let mut order = Vec::with_capacity(arena.len());
        let mut pos = vec![0usize; arena.len()];
        linearize(0, &arena, &mut order);
        for (p, &id) in order.iter().enumerate() {
            pos[id] = p;
        }
        let mut tags = vec![0usize; arena.len()];
        let mut heads = vec![0usize; arena.len()];
        for (id, node) in arena.iter().enumerate() {
            tags[pos[id]] = node.tag;
            for &c in node.left.iter().chain(&node.right) {
                heads[pos[c]] = pos[id] + 1;
            }
        }
        heads[pos[0]] = 0;
        return Ok((tags, heads));
    }
    Err(Error::InvalidConfig(format!(
        "could not sample a derivation inside the length window {length_dist:?}"
    )))
}

fn expand<S: Scalar>(
    tag: usize,
    attach_probs: &[Vec<Vec<S>>],
    stop_probs: &[Vec<Vec<f64>>],
    rng: &mut impl RngCore,
    arena: &mut Vec<SampledNode>,
    size_cap: usize,
) -> Option<usize> {
    if arena.len() >= size_cap {
        return None;
    }
    let id = arena.len();
    arena.push(SampledNode { tag, left: Vec::new(), right: Vec::new() });
    for dir in 0..2 {
        let mut valence = 0usize;
        loop {
            let p_stop = stop_probs[tag][dir][valence];
            if rng.gen::<f64>() < p_stop {
                break;
            }
            let child_tag = sample_cat(&attach_probs[tag][dir], rng);
            let child = expand(child_tag, attach_probs, stop_probs, rng, arena, size_cap)?;
            if dir == 0 {
                arena[id].left.push(child);
            } else {
                arena[id].right.push(child);
            }
            valence = 1;
        }
    }
    Some(id)
}

fn linearize(id: usize, arena: &[SampledNode], out: &mut Vec<usize>) {
    for &c in arena[id].left.iter().rev() {
        linearize(c, arena, out);
    }
    out.push(id);
    for &c in &arena[id].right {
        linearize(c, arena, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmv::{Direction, Valence};
    use crate::oracles::{
        enum_markov_log_marginal, finite_diff_grad, gaussian_hmm_log_likelihood, max_rel_err,
    };

    fn markov_model(d: usize, k: usize, depth: usize, seed: u64) -> JointModel<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut means = Mat::zeros(k, d);
        for v in means.as_mut_slice() {
            *v = rng.gen::<f64>() * 4.0 - 2.0;
        }
        let mut vars = Mat::zeros(k, d);
        for v in vars.as_mut_slice() {
            *v = 0.3 + rng.gen::<f64>();
        }
        JointModel {
            flow: Flow::init(d, depth, seed.wrapping_add(1)).unwrap(),
            emissions: GaussianEmissions::new(means, vars, false).unwrap(),
            syntax: SyntaxParams::Markov(MarkovParams::init(k, seed.wrapping_add(2))),
        }
    }

    fn sentence_of(emb: Mat<f64>) -> Sentence<f64> {
        Sentence {
            tokens: (0..emb.rows()).map(|i| format!("w{i}")).collect(),
            embeddings: emb,
            gold_tags: None,
            gold_heads: None,
            non_projective: false,
        }
    }

    #[test]
    fn standard_normal_score_at_zero() {
        let model = JointModel {
            flow: Flow::identity(1),
            emissions: GaussianEmissions::new(Mat::zeros(1, 1), Mat::filled(1, 1, 1.0), false)
                .unwrap(),
            syntax: SyntaxParams::Markov(MarkovParams {
                init_logits: vec![0.0],
                trans_logits: Mat::zeros(1, 1),
            }),
        };
        let (scores, _) = model.emission_log_scores(&Mat::filled(1, 1, 0.0)).unwrap();
        let expect = -0.5 * std::f64::consts::TAU.ln(); // -0.9189385...
        assert!((scores.get(0, 0) - expect).abs() < 1e-7 + 1e-12);
        assert!((scores.get(0, 0) - (-0.9189385)).abs() < 1e-6);

        let (scores2, _) = model.emission_log_scores(&Mat::filled(1, 1, 2.0)).unwrap();
        assert!((scores2.get(0, 0) - (expect - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn scores_match_density_at_projected_point() {
        let mut model = markov_model(2, 2, 1, 7);
        model.emissions.trainable_variance = false;
        let x = vec![0.7, -0.3];
        let (e, _) = model.flow.inverse_apply(&x).unwrap();
        let (scores, latents) = model.emission_log_scores(&Mat::from_rows(&[x])).unwrap();
        assert_eq!(latents.row(0), &e[..]);
        for s in 0..2 {
            let mut direct = 0.0;
            for j in 0..2 {
                let var = model.emissions.variances.get(s, j);
                let diff = e[j] - model.emissions.means.get(s, j);
                direct += -0.5 * ((std::f64::consts::TAU * var).ln() + diff * diff / var);
            }
            assert!((scores.get(0, s) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_zero_equals_independent_gaussian_hmm() {
        let model = markov_model(3, 2, 0, 99);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..10 {
            let len = rng.gen_range(1..=6);
            let mut emb = Mat::zeros(len, 3);
            for v in emb.as_mut_slice() {
                *v = rng.gen::<f64>() * 4.0 - 2.0;
            }
            let ll = model.log_likelihood_of(&emb).unwrap();
            let m = model.syntax.as_markov().unwrap();
            let init = softmax(&m.init_logits);
            let trans: Vec<Vec<f64>> =
                (0..2).map(|j| softmax(m.trans_logits.row(j))).collect();
            let means: Vec<Vec<f64>> =
                (0..2).map(|s| model.emissions.means.row(s).to_vec()).collect();
            let vars: Vec<Vec<f64>> =
                (0..2).map(|s| model.emissions.variances.row(s).to_vec()).collect();
            let xs: Vec<Vec<f64>> = (0..len).map(|i| emb.row(i).to_vec()).collect();
            let oracle = gaussian_hmm_log_likelihood(&init, &trans, &means, &vars, &xs);
            assert!((ll - oracle).abs() <= 1e-10, "{ll} vs {oracle}");
        }
    }

    #[test]
    fn flow_model_matches_tag_enumeration() {
        let model = markov_model(2, 2, 2, 41);
        let emb = Mat::from_rows(&[vec![0.5, -1.0], vec![1.5, 0.25]]);
        let ll = model.log_likelihood_of(&emb).unwrap();
        // Independent route: densities at inverse-projected points, then the
        // brute-force sum over the 4 tag sequences.
        let m = model.syntax.as_markov().unwrap();
        let mut rows = Vec::new();
        for i in 0..2 {
            let (e, _) = model.flow.inverse_apply(emb.row(i)).unwrap();
            let mut row = Vec::new();
            for s in 0..2 {
                let mut lp = 0.0;
                for j in 0..2 {
                    let var = model.emissions.variances.get(s, j);
                    let diff = e[j] - model.emissions.means.get(s, j);
                    lp += -0.5 * ((std::f64::consts::TAU * var).ln() + diff * diff / var);
                }
                row.push(lp);
            }
            rows.push(row);
        }
        let trans: Vec<Vec<f64>> = (0..2).map(|j| m.trans_logits.row(j).to_vec()).collect();
        let oracle = enum_markov_log_marginal(&m.init_logits, &trans, &rows);
        assert!((ll - oracle).abs() <= 1e-10);
    }

    #[test]
    fn likelihood_transport_invariance() {
        // Model A: flow F with Gaussians η. Model B: identity flow, same η.
        // LL_A(x) must equal LL_B(F^{-1}(x)) bit-for-bit.
        let model_a = markov_model(4, 3, 3, 17);
        let mut model_b = model_a.clone();
        model_b.flow = Flow::identity(4);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..5 {
            let len = rng.gen_range(1..=5);
            let mut emb = Mat::zeros(len, 4);
            for v in emb.as_mut_slice() {
                *v = rng.gen::<f64>() * 2.0 - 1.0;
            }
            let mut projected = Mat::zeros(len, 4);
            for i in 0..len {
                let (e, _) = model_a.flow.inverse_apply(emb.row(i)).unwrap();
                projected.row_mut(i).copy_from_slice(&e);
            }
            let ll_a = model_a.log_likelihood_of(&emb).unwrap();
            let ll_b = model_b.log_likelihood_of(&projected).unwrap();
            assert_eq!(ll_a, ll_b);
        }
    }

    #[test]
    fn gradients_match_finite_differences_markov() {
        let mut model = markov_model(4, 2, 2, 1234);
        model.emissions.trainable_variance = true;
        let emb = Mat::from_rows(&[
            vec![0.4, -0.2, 1.0, 0.3],
            vec![-0.6, 0.9, 0.1, -0.4],
            vec![0.2, 0.2, -0.8, 0.5],
        ]);
        let sent = sentence_of(emb);
        let (grads, _) = model.grad_sentence(&sent).unwrap();
        let analytic = grads.to_flat();
        let theta = model.params_flat();
        let objective = |p: &[f64]| {
            let mut m = model.clone();
            m.load_params_flat(p);
            m.sentence_log_likelihood(&sent).unwrap()
        };
        let numeric = finite_diff_grad(objective, &theta, 1e-5);
        let err = max_rel_err(&analytic, &numeric, 1e-8);
        assert!(err <= 1e-4, "markov joint grad err {err}");
    }

    #[test]
    fn gradients_match_finite_differences_dmv() {
        let mut model = markov_model(4, 2, 2, 4321);
        model.syntax = SyntaxParams::Dmv(DmvParams::init(2, 77));
        let emb = Mat::from_rows(&[
            vec![0.4, -0.2, 1.0, 0.3],
            vec![-0.6, 0.9, 0.1, -0.4],
            vec![0.2, 0.2, -0.8, 0.5],
        ]);
        let sent = sentence_of(emb);
        let (grads, _) = model.grad_sentence(&sent).unwrap();
        let analytic = grads.to_flat();
        let theta = model.params_flat();
        let objective = |p: &[f64]| {
            let mut m = model.clone();
            m.load_params_flat(p);
            m.sentence_log_likelihood(&sent).unwrap()
        };
        let numeric = finite_diff_grad(objective, &theta, 1e-5);
        let err = max_rel_err(&analytic, &numeric, 1e-8);
        assert!(err <= 1e-4, "dmv joint grad err {err}");
    }

    #[test]
    fn depth_zero_single_state_mean_gradient() {
        // K = 1: gamma = 1, so the mean gradient is Σ (x_i - μ)/σ².
        let d = 2;
        let model = JointModel {
            flow: Flow::identity(d),
            emissions: GaussianEmissions::new(
                Mat::from_rows(&[vec![0.5, -0.5]]),
                Mat::filled(1, d, 2.0),
                false,
            )
            .unwrap(),
            syntax: SyntaxParams::Markov(MarkovParams {
                init_logits: vec![0.0],
                trans_logits: Mat::zeros(1, 1),
            }),
        };
        let emb = Mat::from_rows(&[vec![1.0, 1.0], vec![-1.0, 0.0]]);
        let sent = sentence_of(emb);
        let (grads, _) = model.grad_sentence(&sent).unwrap();
        let expect = [
            ((1.0 - 0.5) + (-1.0 - 0.5)) / 2.0,
            ((1.0 + 0.5) + (0.0 + 0.5)) / 2.0,
        ];
        assert!((grads.means.get(0, 0) - expect[0]).abs() < 1e-12);
        assert!((grads.means.get(0, 1) - expect[1]).abs() < 1e-12);
        assert!(grads.variances.is_none());
    }

    #[test]
    fn sampling_is_deterministic() {
        let model = markov_model(2, 2, 1, 5);
        let a = model.sample_corpus(4, LengthDist::Uniform { min: 1, max: 5 }, 33).unwrap();
        let b = model.sample_corpus(4, LengthDist::Uniform { min: 1, max: 5 }, 33).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.sentences.iter().zip(&b.sentences) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.gold_tags, y.gold_tags);
            assert_eq!(x.embeddings.as_slice(), y.embeddings.as_slice());
        }
    }

    #[test]
    fn forced_stops_sample_single_token_derivations() {
        let mut dmv = DmvParams::<f64>::uniform(2);
        for t in 0..2 {
            for d in Direction::ALL {
                for v in Valence::ALL {
                    dmv.set_stop_logit(t, d, v, 40.0);
                }
            }
        }
        let model = JointModel {
            flow: Flow::identity(2),
            emissions: GaussianEmissions::new(Mat::zeros(2, 2), Mat::filled(2, 2, 1.0), false)
                .unwrap(),
            syntax: SyntaxParams::Dmv(dmv),
        };
        let corpus = model.sample_corpus(10, LengthDist::Uniform { min: 1, max: 8 }, 1).unwrap();
        for s in &corpus.sentences {
            assert_eq!(s.len(), 1);
            assert_eq!(s.gold_heads.as_deref(), Some(&[0usize][..]));
        }
    }

    #[test]
    fn dmv_sampling_yields_valid_projective_trees() {
        let dmv = DmvParams::<f64>::init(2, 9);
        let model = JointModel {
            flow: Flow::identity(2),
            emissions: GaussianEmissions::new(Mat::zeros(2, 2), Mat::filled(2, 2, 1.0), false)
                .unwrap(),
            syntax: SyntaxParams::Dmv(dmv),
        };
        let corpus = model.sample_corpus(50, LengthDist::Uniform { min: 1, max: 8 }, 2).unwrap();
        for s in &corpus.sentences {
            assert!(s.len() <= 8);
            let heads = s.gold_heads.as_deref().unwrap();
            assert!(crate::oracles::is_projective_tree(heads));
        }
    }

    #[test]
    fn separated_states_are_recovered_from_samples() {
        // Two unit-variance states 20 apart: posterior decoding of sampled
        // tokens recovers the sampled states essentially always.
        let k = 2;
        let d = 2;
        let mut means = Mat::zeros(k, d);
        means.set(0, 0, -10.0);
        means.set(1, 0, 10.0);
        let model = JointModel {
            flow: Flow::identity(d),
            emissions: GaussianEmissions::new(means, Mat::filled(k, d, 1.0), false).unwrap(),
            syntax: SyntaxParams::Markov(MarkovParams::init(k, 8)),
        };
        let corpus = model
            .sample_corpus(2_000, LengthDist::Uniform { min: 3, max: 12 }, 99)
            .unwrap();
        let m = model.syntax.as_markov().unwrap();
        let mut total = 0usize;
        let mut wrong = 0usize;
        for s in &corpus.sentences {
            let (scores, _) = model.emission_log_scores(&s.embeddings).unwrap();
            let post = m.forward_backward(&scores).unwrap();
            let gold = s.gold_tags.as_ref().unwrap();
            for i in 0..s.len() {
                let map = if post.gamma.get(i, 0) >= post.gamma.get(i, 1) { 0 } else { 1 };
                total += 1;
                if map.to_string() != gold[i] {
                    wrong += 1;
                }
            }
        }
        assert!(total > 10_000);
        assert!((wrong as f64 / total as f64) < 1e-4, "{wrong}/{total}");
    }

    #[test]
    fn invalid_length_distributions_are_rejected() {
        let model = markov_model(2, 2, 0, 3);
        assert!(model.sample_corpus(1, LengthDist::Fixed(0), 0).is_err());
        assert!(model
            .sample_corpus(1, LengthDist::Uniform { min: 3, max: 2 }, 0)
            .is_err());
        assert!(model.sample_corpus(0, LengthDist::Fixed(3), 0).is_err());
    }

    #[test]
    fn init_from_latents_uses_empirical_moments() {
        let latents = Mat::from_rows(&[vec![1.0f64, 10.0], vec![3.0, 14.0]]);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let em = GaussianEmissions::init_from_latents(&latents, 3, 0.0, false, &mut rng).unwrap();
        for k in 0..3 {
            assert!((em.means.get(k, 0) - 2.0).abs() < 1e-12);
            assert!((em.means.get(k, 1) - 12.0).abs() < 1e-12);
            assert!((em.variances.get(k, 0) - 1.0).abs() < 1e-12);
            assert!((em.variances.get(k, 1) - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_floor_is_enforced() {
        let em = GaussianEmissions::new(Mat::zeros(1, 2), Mat::filled(1, 2, 1e-12), true).unwrap();
        assert!(em.variances.get(0, 0) >= VARIANCE_FLOOR);
        let mut em2 = em.clone();
        em2.load_params_flat(&[0.0, 0.0, -5.0, 1.0]);
        assert!(em2.variances.get(0, 0) >= VARIANCE_FLOOR);
        assert_eq!(em2.variances.get(0, 1), 1.0);
    }
}
