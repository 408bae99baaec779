//! Volume-preserving invertible projector.
//!
//! The inverse projection (the direction used for training and inference) is
//! a stack of additive coupling layers. Each layer splits its input into
//! contiguous left/right halves, passes one half through unchanged, and adds
//! a learned function of the fixed half to the other:
//!
//! ```text
//! h_l = x_l            h_r = x_r + g(x_l)        (left fixed)
//! ```
//!
//! The Jacobian is unit-triangular, so the log determinant is exactly zero;
//! it is still computed and returned so likelihood code keeps the correction
//! term explicit. Layers alternate which half is fixed. The coupling
//! function `g` is affine -> rectifier -> affine with hidden width equal to
//! the half width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::scalar::Scalar;

/// Which half of the input passes through a coupling layer unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    LeftFixed,
    RightFixed,
}

impl Side {
    pub fn flipped(self) -> Side {
        match self {
            Side::LeftFixed => Side::RightFixed,
            Side::RightFixed => Side::LeftFixed,
        }
    }
}

/// One additive coupling layer over an even-dimensional vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingLayer<S> {
    pub in_dim: usize,
    pub side: Side,
    /// First affine map, `half -> hidden` (hidden = half).
    pub w1: Mat<S>,
    pub b1: Vec<S>,
    /// Output affine map, `hidden -> half`.
    pub w2: Mat<S>,
    pub b2: Vec<S>,
}

impl<S: Scalar> CouplingLayer<S> {
    /// Zero-initialized layer (g ≡ 0, i.e. the identity map).
    pub fn zeros(in_dim: usize, side: Side) -> Result<Self> {
        if in_dim % 2 != 0 || in_dim == 0 {
            return Err(Error::OddDimension(in_dim));
        }
        let half = in_dim / 2;
        Ok(CouplingLayer {
            in_dim,
            side,
            w1: Mat::zeros(half, half),
            b1: vec![S::zero(); half],
            w2: Mat::zeros(half, half),
            b2: vec![S::zero(); half],
        })
    }

    fn half(&self) -> usize {
        self.in_dim / 2
    }

    pub fn param_count(&self) -> usize {
        let h = self.half();
        2 * h * h + 2 * h
    }

    /// g(u) = w2 · relu(w1 · u + b1) + b2.
    fn coupling_fn(&self, u: &[S]) -> Vec<S> {
        let h = self.half();
        let mut out = self.b2.clone();
        for i in 0..h {
            let mut a = self.b1[i];
            for (q, &uq) in u.iter().enumerate() {
                a += self.w1.get(i, q) * uq;
            }
            if a > S::zero() {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += self.w2.get(j, i) * a;
                }
            }
        }
        out
    }

    /// Apply in the inverse-projection direction: fixed half unchanged,
    /// other half shifted by g(fixed half).
    fn apply(&self, v: &mut [S]) {
        let h = self.half();
        let (l, r) = v.split_at_mut(h);
        match self.side {
            Side::LeftFixed => {
                let g = self.coupling_fn(l);
                for (ri, gi) in r.iter_mut().zip(&g) {
                    *ri += *gi;
                }
            }
            Side::RightFixed => {
                let g = self.coupling_fn(r);
                for (li, gi) in l.iter_mut().zip(&g) {
                    *li += *gi;
                }
            }
        }
    }

    /// Invert [`Self::apply`].
    fn unapply(&self, v: &mut [S]) {
        let h = self.half();
        let (l, r) = v.split_at_mut(h);
        match self.side {
            Side::LeftFixed => {
                let g = self.coupling_fn(l);
                for (ri, gi) in r.iter_mut().zip(&g) {
                    *ri -= *gi;
                }
            }
            Side::RightFixed => {
                let g = self.coupling_fn(r);
                for (li, gi) in l.iter_mut().zip(&g) {
                    *li -= *gi;
                }
            }
        }
    }

    /// Backprop through the layer given its input `v_in` and the gradient
    /// w.r.t. its output. Returns the gradient w.r.t. the input and adds the
    /// parameter gradients into `grads`.
    fn backprop(&self, v_in: &[S], d_out: &[S], grads: &mut LayerGrads<S>) -> Vec<S> {
        let h = self.half();
        let (fixed, d_shift, d_fixed) = match self.side {
            Side::LeftFixed => (&v_in[..h], &d_out[h..], &d_out[..h]),
            Side::RightFixed => (&v_in[h..], &d_out[..h], &d_out[h..]),
        };
        // Recompute pre-activations of g at the fixed half.
        let mut act = self.b1.clone();
        for i in 0..h {
            for (q, &uq) in fixed.iter().enumerate() {
                act[i] += self.w1.get(i, q) * uq;
            }
        }
        // d g / d params and d g / d fixed-input, with upstream d_shift.
        let mut d_fixed_total = d_fixed.to_vec();
        for (j, &dz) in d_shift.iter().enumerate() {
            grads.b2[j] += dz;
        }
        for i in 0..h {
            let hidden = if act[i] > S::zero() { act[i] } else { S::zero() };
            let mut d_hidden = S::zero();
            for (j, &dz) in d_shift.iter().enumerate() {
                grads.w2.add_at(j, i, dz * hidden);
                d_hidden += self.w2.get(j, i) * dz;
            }
            // Rectifier subgradient at exactly zero is zero.
            if act[i] > S::zero() {
                grads.b1[i] += d_hidden;
                for (q, &uq) in fixed.iter().enumerate() {
                    grads.w1.add_at(i, q, d_hidden * uq);
                    d_fixed_total[q] += self.w1.get(i, q) * d_hidden;
                }
            }
        }
        // Reassemble gradient w.r.t. the layer input.
        let mut d_in = vec![S::zero(); self.in_dim];
        match self.side {
            Side::LeftFixed => {
                d_in[..h].copy_from_slice(&d_fixed_total);
                d_in[h..].copy_from_slice(&d_out[h..]);
            }
            Side::RightFixed => {
                d_in[h..].copy_from_slice(&d_fixed_total);
                d_in[..h].copy_from_slice(&d_out[..h]);
            }
        }
        d_in
    }
}

/// Gradient accumulator for one coupling layer, shape-aligned with it.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<S> {
    pub w1: Mat<S>,
    pub b1: Vec<S>,
    pub w2: Mat<S>,
    pub b2: Vec<S>,
}

impl<S: Scalar> LayerGrads<S> {
    fn zeros(half: usize) -> Self {
        LayerGrads {
            w1: Mat::zeros(half, half),
            b1: vec![S::zero(); half],
            w2: Mat::zeros(half, half),
            b2: vec![S::zero(); half],
        }
    }
}

/// Gradient accumulator for a whole flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrads<S> {
    pub layers: Vec<LayerGrads<S>>,
}

impl<S: Scalar> FlowGrads<S> {
    pub fn zeros(flow: &Flow<S>) -> Self {
        FlowGrads {
            layers: flow.layers.iter().map(|l| LayerGrads::zeros(l.half())).collect(),
        }
    }

    pub fn add(&mut self, other: &FlowGrads<S>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w1.as_mut_slice().iter_mut().zip(b.w1.as_slice()) {
                *x += *y;
            }
            for (x, y) in a.b1.iter_mut().zip(&b.b1) {
                *x += *y;
            }
            for (x, y) in a.w2.as_mut_slice().iter_mut().zip(b.w2.as_slice()) {
                *x += *y;
            }
            for (x, y) in a.b2.iter_mut().zip(&b.b2) {
                *x += *y;
            }
        }
    }

    /// Append all gradients in the flow's canonical parameter order.
    pub fn extend_flat(&self, out: &mut Vec<S>) {
        for l in &self.layers {
            out.extend_from_slice(l.w1.as_slice());
            out.extend_from_slice(&l.b1);
            out.extend_from_slice(l.w2.as_slice());
            out.extend_from_slice(&l.b2);
        }
    }
}

/// A stack of coupling layers with alternating fixed sides.
///
/// Depth 0 is the identity map (any dimension, including odd, is then
/// permitted; layers require an even dimension).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Flow<S> {
    in_dim: usize,
    layers: Vec<CouplingLayer<S>>,
}

impl<S: Scalar> Flow<S> {
    /// Identity flow (depth 0).
    pub fn identity(in_dim: usize) -> Self {
        Flow { in_dim, layers: Vec::new() }
    }

    /// Randomly initialized flow of the given depth. Weights are drawn from
    /// the uniform distribution on [-sqrt(3/n_in), sqrt(3/n_in)] (mean zero,
    /// standard deviation sqrt(1/n_in)); biases start at zero.
    pub fn init(in_dim: usize, depth: usize, seed: u64) -> Result<Self> {
        if depth > 0 && (in_dim % 2 != 0 || in_dim == 0) {
            return Err(Error::OddDimension(in_dim));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(depth);
        let mut side = Side::LeftFixed;
        for _ in 0..depth {
            let mut layer = CouplingLayer::zeros(in_dim, side)?;
            let bound = (3.0 / layer.half() as f64).sqrt();
            for w in layer.w1.as_mut_slice().iter_mut() {
                *w = S::of((rng.gen::<f64>() * 2.0 - 1.0) * bound);
            }
            for w in layer.w2.as_mut_slice().iter_mut() {
                *w = S::of((rng.gen::<f64>() * 2.0 - 1.0) * bound);
            }
            layers.push(layer);
            side = side.flipped();
        }
        Ok(Flow { in_dim, layers })
    }

    /// Build from explicit layers; sides must alternate.
    pub fn from_layers(in_dim: usize, layers: Vec<CouplingLayer<S>>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim != in_dim {
                return Err(Error::DimensionMismatch {
                    context: "coupling layer",
                    expected: in_dim,
                    found: l.in_dim,
                });
            }
            if i > 0 && l.side == layers[i - 1].side {
                return Err(Error::InvalidConfig(
                    "consecutive coupling layers must alternate fixed sides".into(),
                ));
            }
        }
        Ok(Flow { in_dim, layers })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[CouplingLayer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer<S>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(CouplingLayer::param_count).sum()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.in_dim {
            return Err(Error::DimensionMismatch {
                context: "flow input",
                expected: self.in_dim,
                found: len,
            });
        }
        Ok(())
    }

    /// Inverse projection: observed vector -> latent vector, with the log
    /// absolute Jacobian determinant (identically zero for coupling layers).
    pub fn inverse_apply(&self, x: &[S]) -> Result<(Vec<S>, S)> {
        self.check_dim(x.len())?;
        let mut v = x.to_vec();
        for layer in &self.layers {
            layer.apply(&mut v);
        }
        Ok((v, S::zero()))
    }

    /// Forward projection: latent vector -> observed vector. Exact inverse
    /// of [`Self::inverse_apply`].
    pub fn forward_apply(&self, e: &[S]) -> Result<Vec<S>> {
        self.check_dim(e.len())?;
        let mut v = e.to_vec();
        for layer in self.layers.iter().rev() {
            layer.unapply(&mut v);
        }
        Ok(v)
    }

    /// Inverse projection together with exact gradients: given the gradient
    /// of some objective w.r.t. the latent output, returns the latent
    /// output, the gradient w.r.t. the input, and adds parameter gradients
    /// into `grads`.
    pub fn inverse_apply_with_grad(
        &self,
        x: &[S],
        upstream_grad_e: &[S],
        grads: &mut FlowGrads<S>,
    ) -> Result<(Vec<S>, Vec<S>)> {
        self.check_dim(x.len())?;
        self.check_dim(upstream_grad_e.len())?;
        // Forward pass caching every layer input.
        let mut inputs: Vec<Vec<S>> = Vec::with_capacity(self.layers.len());
        let mut v = x.to_vec();
        for layer in &self.layers {
            inputs.push(v.clone());
            layer.apply(&mut v);
        }
        // Backward pass in reverse layer order.
        let mut d = upstream_grad_e.to_vec();
        for (layer, input, g) in self
            .layers
            .iter()
            .zip(&inputs)
            .zip(&mut grads.layers)
            .map(|((l, i), g)| (l, i, g))
            .rev()
        {
            d = layer.backprop(input, &d, g);
        }
        Ok((v, d))
    }

    /// Append all parameters in canonical order (per layer: w1, b1, w2, b2).
    pub fn extend_params_flat(&self, out: &mut Vec<S>) {
        for l in &self.layers {
            out.extend_from_slice(l.w1.as_slice());
            out.extend_from_slice(&l.b1);
            out.extend_from_slice(l.w2.as_slice());
            out.extend_from_slice(&l.b2);
        }
    }

    /// Load parameters from a flat slice in canonical order; returns the
    /// number of scalars consumed.
    pub fn load_params_flat(&mut self, flat: &[S]) -> usize {
        let mut pos = 0;
        for l in &mut self.layers {
            for w in l.w1.as_mut_slice().iter_mut() {
                *w = flat[pos];
                pos += 1;
            }
            for b in l.b1.iter_mut() {
                *b = flat[pos];
                pos += 1;
            }
            for w in l.w2.as_mut_slice().iter_mut() {
                *w = flat[pos];
                pos += 1;
            }
            for b in l.b2.iter_mut() {
                *b = flat[pos];
                pos += 1;
            }
        }
        pos
    }
}
