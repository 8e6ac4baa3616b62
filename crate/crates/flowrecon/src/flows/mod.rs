//! Invertible flow stacks with exact log-density.
//!
//! A [`FlowStack`] is an ordered sequence of coupling layers (affine or
//! rational-quadratic spline), fixed permutations, and — for one-dimensional
//! latents — unconditional elementwise transforms. Every layer is invertible
//! by construction; forward, inverse, and log-density come in a plain f64
//! flavor for sampling/evaluation and a taped flavor for training.

pub mod penalty;
pub mod serialize;
pub mod spline;

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{
    adam_step, mlp_forward_batch, mlp_forward_taped, mlp_init_into, AdamState, Activation,
    MlpSpec, ParamVector, Segment, Tape, Var,
};
use crate::error::{Error, Result};

pub use penalty::{fd_lipschitz_penalty, fd_penalty_taped, FdPenaltyConfig, FdPenaltyEstimate};

pub(crate) const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Bound on the affine coupling log-scale: `s = 3 tanh(raw / 3)`.
const AFFINE_SCALE_MAX: f64 = 3.0;

/// Kind of invertible elementwise transform used by couplings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CouplingKind {
    Affine,
    RqSpline { bins: usize, tail_bound: f64 },
}

impl CouplingKind {
    /// Spline with the crate defaults: 8 bins, tail bound 3.
    pub fn default_spline() -> Self {
        CouplingKind::RqSpline { bins: 8, tail_bound: 3.0 }
    }

    fn params_per_element(&self) -> usize {
        match self {
            CouplingKind::Affine => 2,
            CouplingKind::RqSpline { bins, .. } => spline::params_per_element(*bins),
        }
    }

    fn validate(&self) -> Result<()> {
        if let CouplingKind::RqSpline { bins, tail_bound } = self {
            if *bins < 2 {
                return Err(Error::config(format!("spline needs >= 2 bins, got {bins}")));
            }
            if *tail_bound <= 0.0 {
                return Err(Error::config(format!(
                    "spline tail bound must be > 0, got {tail_bound}"
                )));
            }
        }
        Ok(())
    }
}

/// Coupling layer: the identity half feeds a conditioner MLP whose output
/// parameterizes the transform of the other half.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    pub kind: CouplingKind,
    pub identity_idx: Arc<Vec<usize>>,
    pub transform_idx: Arc<Vec<usize>>,
    pub conditioner: MlpSpec,
    pub param_offset: usize,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Coupling(CouplingLayer),
    /// Fixed column permutation: output column `j` reads input column
    /// `forward[j]`.
    Permutation { forward: Arc<Vec<usize>>, inverse: Arc<Vec<usize>> },
    /// Unconditional per-dimension transform (used when the latent dimension
    /// is too small to split into coupling halves).
    Elementwise { kind: CouplingKind, param_offset: usize },
}

/// Architecture description for [`FlowStack::build`].
#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub latent_dim: usize,
    pub flow_steps: usize,
    pub couplings_per_step: usize,
    pub kind: CouplingKind,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub zero_init_last: bool,
}

impl FlowConfig {
    pub fn new(latent_dim: usize, flow_steps: usize, couplings_per_step: usize, kind: CouplingKind) -> Self {
        FlowConfig {
            latent_dim,
            flow_steps,
            couplings_per_step,
            kind,
            hidden_width: 64,
            hidden_layers: 2,
            activation: Activation::Tanh,
            zero_init_last: true,
        }
    }
}

/// Composition of invertible transforms with a flat parameter vector.
#[derive(Debug, Clone)]
pub struct FlowStack {
    latent_dim: usize,
    layers: Vec<Layer>,
    params: ParamVector,
    config: FlowConfig,
    seed: u64,
}

impl FlowStack {
    /// Builds a stack of `flow_steps x couplings_per_step` coupling layers
    /// with alternating checkerboard masks and a reverse permutation between
    /// steps. With `zero_init_last` every layer starts as the identity.
    pub fn build(config: &FlowConfig, seed: u64) -> Result<FlowStack> {
        let d = config.latent_dim;
        if d == 0 {
            return Err(Error::config("flow needs latent_dim >= 1"));
        }
        if config.flow_steps == 0 || config.couplings_per_step == 0 {
            return Err(Error::config("flow needs flow_steps >= 1 and couplings_per_step >= 1"));
        }
        config.kind.validate()?;

        let mut layers = Vec::new();
        let mut segments: Vec<Segment> = Vec::new();
        let mut offset = 0usize;

        if d == 1 {
            let per = config.kind.params_per_element();
            for c in 0..config.flow_steps * config.couplings_per_step {
                layers.push(Layer::Elementwise { kind: config.kind, param_offset: offset });
                segments.push(Segment { name: format!("layer{c}.elementwise"), shape: vec![per] });
                offset += per;
            }
        } else {
            let evens: Arc<Vec<usize>> = Arc::new((0..d).step_by(2).collect());
            let odds: Arc<Vec<usize>> = Arc::new((1..d).step_by(2).collect());
            let reverse: Arc<Vec<usize>> = Arc::new((0..d).rev().collect());
            let mut c = 0;
            for step in 0..config.flow_steps {
                if step > 0 {
                    layers.push(Layer::Permutation {
                        forward: Arc::clone(&reverse),
                        inverse: Arc::clone(&reverse),
                    });
                }
                for _ in 0..config.couplings_per_step {
                    let (identity_idx, transform_idx) = if c % 2 == 0 {
                        (Arc::clone(&evens), Arc::clone(&odds))
                    } else {
                        (Arc::clone(&odds), Arc::clone(&evens))
                    };
                    let m = transform_idx.len();
                    let mut sizes = vec![identity_idx.len()];
                    sizes.extend(std::iter::repeat(config.hidden_width).take(config.hidden_layers));
                    sizes.push(m * config.kind.params_per_element());
                    let conditioner = MlpSpec::new(sizes, config.activation, config.zero_init_last)?;
                    for seg in conditioner.segments(&format!("layer{c}.")) {
                        segments.push(seg);
                    }
                    let count = conditioner.param_count();
                    layers.push(Layer::Coupling(CouplingLayer {
                        kind: config.kind,
                        identity_idx,
                        transform_idx,
                        conditioner,
                        param_offset: offset,
                    }));
                    offset += count;
                    c += 1;
                }
            }
            // With an odd number of inter-step reversals the net column order
            // would be reversed; one more reversal keeps zero-init stacks at
            // the exact identity map.
            if config.flow_steps % 2 == 0 {
                layers.push(Layer::Permutation {
                    forward: Arc::clone(&reverse),
                    inverse: Arc::clone(&reverse),
                });
            }
        }

        let mut params = ParamVector::zeros(segments);
        let mut c = 0u64;
        for layer in &layers {
            if let Layer::Coupling(cl) = layer {
                let end = cl.param_offset + cl.conditioner.param_count();
                let seg = &mut params.values_mut()[cl.param_offset..end];
                mlp_init_into(&cl.conditioner, seed.wrapping_add(c), seg);
                c += 1;
            }
            // Elementwise layers start at zero raw parameters: the identity.
        }

        Ok(FlowStack { latent_dim: d, layers, params, config: config.clone(), seed })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Number of coupling (or elementwise) transforms, permutations excluded.
    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| !matches!(l, Layer::Permutation { .. })).count()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn build_seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, values: Vec<f64>) -> Result<()> {
        self.params = self.params.with_values(values)?;
        Ok(())
    }

    /// Re-randomizes all parameters, including zero-initialized final layers.
    /// Used where a "random parameters" stack is wanted rather than the
    /// identity.
    pub fn randomize_params(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in self.params.values_mut() {
            *v = scale * (2.0 * rng.random::<f64>() - 1.0);
        }
    }

    fn check_width(&self, m: &Array2<f64>) -> Result<()> {
        if m.ncols() != self.latent_dim {
            return Err(Error::dimension(format!(
                "batch has width {}, flow expects {}",
                m.ncols(),
                self.latent_dim
            )));
        }
        Ok(())
    }

    fn check_finite_slice(buf: &[f64], layer: usize, direction: &str) -> Result<()> {
        if buf.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite value after layer {layer} ({direction} pass)"
            )));
        }
        Ok(())
    }

    /// Splits conditioner output into bounded log-scales and shifts.
    fn affine_scales_shifts(h: &[f64], n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
        let mut s = vec![0.0; n * m];
        let mut t = vec![0.0; n * m];
        for i in 0..n {
            let row = &h[i * 2 * m..(i + 1) * 2 * m];
            for j in 0..m {
                s[i * m + j] = AFFINE_SCALE_MAX * (row[j] / AFFINE_SCALE_MAX).tanh();
                t[i * m + j] = row[m + j];
            }
        }
        (s, t)
    }

    /// `x = T(z)` plus the per-sample forward log-determinant.
    pub fn forward(&self, z: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
        self.check_width(z)?;
        let n = z.nrows();
        let d = self.latent_dim;
        let mut x: Vec<f64> = z.iter().cloned().collect();
        let mut logdet = vec![0.0; n];
        for (li, layer) in self.layers.iter().enumerate() {
            self.apply_forward(layer, &mut x, &mut logdet, n)?;
            Self::check_finite_slice(&x, li, "forward")?;
        }
        Ok((Array2::from_shape_vec((n, d), x).expect("shape"), logdet))
    }

    /// `z = T^{-1}(x)` plus the per-sample inverse log-determinant
    /// (the negative of the forward log-determinant at the matching point).
    pub fn inverse(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
        self.check_width(x)?;
        let n = x.nrows();
        let d = self.latent_dim;
        let mut z: Vec<f64> = x.iter().cloned().collect();
        let mut logdet_inv = vec![0.0; n];
        for (li, layer) in self.layers.iter().enumerate().rev() {
            self.apply_inverse(layer, &mut z, &mut logdet_inv, n)?;
            Self::check_finite_slice(&z, li, "inverse")?;
        }
        Ok((Array2::from_shape_vec((n, d), z).expect("shape"), logdet_inv))
    }

    /// `log tau(x) = log N(T^{-1}(x); 0, I) + logdet_inv(x)`.
    pub fn log_density(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        let (z, logdet_inv) = self.inverse(x)?;
        let d = self.latent_dim as f64;
        Ok(z
            .rows()
            .into_iter()
            .zip(logdet_inv)
            .map(|(row, ld)| {
                let sq: f64 = row.iter().map(|v| v * v).sum();
                -0.5 * d * LN_2PI - 0.5 * sq + ld
            })
            .collect())
    }

    fn gather_cols_flat(x: &[f64], d: usize, idx: &[usize], n: usize) -> Vec<f64> {
        let k = idx.len();
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            for (jj, &j) in idx.iter().enumerate() {
                out[i * k + jj] = x[i * d + j];
            }
        }
        out
    }

    fn scatter_cols_flat(x: &mut [f64], d: usize, idx: &[usize], vals: &[f64], n: usize) {
        let k = idx.len();
        for i in 0..n {
            for (jj, &j) in idx.iter().enumerate() {
                x[i * d + j] = vals[i * k + jj];
            }
        }
    }

    fn conditioner_out(&self, cl: &CouplingLayer, xa: &[f64], n: usize) -> Result<Vec<f64>> {
        let seg = &self.params.values()[cl.param_offset..cl.param_offset + cl.conditioner.param_count()];
        mlp_forward_batch(seg, &cl.conditioner, xa, n)
    }

    fn apply_forward(&self, layer: &Layer, x: &mut Vec<f64>, logdet: &mut [f64], n: usize) -> Result<()> {
        let d = self.latent_dim;
        match layer {
            Layer::Permutation { forward, .. } => {
                let mut out = vec![0.0; x.len()];
                for i in 0..n {
                    for (j, &src) in forward.iter().enumerate() {
                        out[i * d + j] = x[i * d + src];
                    }
                }
                *x = out;
            }
            Layer::Coupling(cl) => {
                let xa = Self::gather_cols_flat(x, d, &cl.identity_idx, n);
                let xb = Self::gather_cols_flat(x, d, &cl.transform_idx, n);
                let m = cl.transform_idx.len();
                let h = self.conditioner_out(cl, &xa, n)?;
                match cl.kind {
                    CouplingKind::Affine => {
                        let (s, t) = Self::affine_scales_shifts(&h, n, m);
                        let mut yb = vec![0.0; n * m];
                        for i in 0..n {
                            for j in 0..m {
                                let e = i * m + j;
                                yb[e] = xb[e] * s[e].exp() + t[e];
                                logdet[i] += s[e];
                            }
                        }
                        Self::scatter_cols_flat(x, d, &cl.transform_idx, &yb, n);
                    }
                    CouplingKind::RqSpline { bins, tail_bound } => {
                        let (yb, ld) = spline::spline_forward_batch(&h, &xb, bins, tail_bound);
                        for i in 0..n {
                            for j in 0..m {
                                logdet[i] += ld[i * m + j];
                            }
                        }
                        Self::scatter_cols_flat(x, d, &cl.transform_idx, &yb, n);
                    }
                }
            }
            Layer::Elementwise { kind, param_offset } => {
                let per = kind.params_per_element();
                let raw = &self.params.values()[*param_offset..*param_offset + d * per];
                match kind {
                    CouplingKind::Affine => {
                        for i in 0..n {
                            for j in 0..d {
                                let s = AFFINE_SCALE_MAX * (raw[j * 2] / AFFINE_SCALE_MAX).tanh();
                                let t = raw[j * 2 + 1];
                                x[i * d + j] = x[i * d + j] * s.exp() + t;
                                logdet[i] += s;
                            }
                        }
                    }
                    CouplingKind::RqSpline { bins, tail_bound } => {
                        let mut raw_rep = vec![0.0; n * d * per];
                        for i in 0..n {
                            raw_rep[i * d * per..(i + 1) * d * per].copy_from_slice(raw);
                        }
                        let (y, ld) = spline::spline_forward_batch(&raw_rep, x, *bins, *tail_bound);
                        for i in 0..n {
                            for j in 0..d {
                                logdet[i] += ld[i * d + j];
                            }
                        }
                        *x = y;
                    }
                }
            }
        }
        Ok(())
    }

    fn apply_inverse(&self, layer: &Layer, x: &mut Vec<f64>, logdet_inv: &mut [f64], n: usize) -> Result<()> {
        let d = self.latent_dim;
        match layer {
            Layer::Permutation { inverse, .. } => {
                let mut out = vec![0.0; x.len()];
                for i in 0..n {
                    for (j, &src) in inverse.iter().enumerate() {
                        out[i * d + j] = x[i * d + src];
                    }
                }
                *x = out;
            }
            Layer::Coupling(cl) => {
                let ya = Self::gather_cols_flat(x, d, &cl.identity_idx, n);
                let yb = Self::gather_cols_flat(x, d, &cl.transform_idx, n);
                let m = cl.transform_idx.len();
                let h = self.conditioner_out(cl, &ya, n)?;
                match cl.kind {
                    CouplingKind::Affine => {
                        let (s, t) = Self::affine_scales_shifts(&h, n, m);
                        let mut xb = vec![0.0; n * m];
                        for i in 0..n {
                            for j in 0..m {
                                let e = i * m + j;
                                xb[e] = (yb[e] - t[e]) * (-s[e]).exp();
                                logdet_inv[i] -= s[e];
                            }
                        }
                        Self::scatter_cols_flat(x, d, &cl.transform_idx, &xb, n);
                    }
                    CouplingKind::RqSpline { bins, tail_bound } => {
                        let (xb, ld) = spline::spline_inverse_batch(&h, &yb, bins, tail_bound);
                        for i in 0..n {
                            for j in 0..m {
                                logdet_inv[i] -= ld[i * m + j];
                            }
                        }
                        Self::scatter_cols_flat(x, d, &cl.transform_idx, &xb, n);
                    }
                }
            }
            Layer::Elementwise { kind, param_offset } => {
                let per = kind.params_per_element();
                let raw = &self.params.values()[*param_offset..*param_offset + d * per];
                match kind {
                    CouplingKind::Affine => {
                        for i in 0..n {
                            for j in 0..d {
                                let s = AFFINE_SCALE_MAX * (raw[j * 2] / AFFINE_SCALE_MAX).tanh();
                                let t = raw[j * 2 + 1];
                                x[i * d + j] = (x[i * d + j] - t) * (-s).exp();
                                logdet_inv[i] -= s;
                            }
                        }
                    }
                    CouplingKind::RqSpline { bins, tail_bound } => {
                        let mut raw_rep = vec![0.0; n * d * per];
                        for i in 0..n {
                            raw_rep[i * d * per..(i + 1) * d * per].copy_from_slice(raw);
                        }
                        let (xs, ld) = spline::spline_inverse_batch(&raw_rep, x, *bins, *tail_bound);
                        for i in 0..n {
                            for j in 0..d {
                                logdet_inv[i] -= ld[i * d + j];
                            }
                        }
                        *x = xs;
                    }
                }
            }
        }
        Ok(())
    }

    fn taped_affine(tape: &mut Tape, h: Var, m: usize) -> (Var, Var) {
        let s_idx: Arc<Vec<usize>> = Arc::new((0..m).collect());
        let t_idx: Arc<Vec<usize>> = Arc::new((m..2 * m).collect());
        let s_raw = tape.gather_cols(h, 2 * m, s_idx);
        let t = tape.gather_cols(h, 2 * m, t_idx);
        let scaled = tape.scale(s_raw, 1.0 / AFFINE_SCALE_MAX);
        let th = tape.tanh(scaled);
        let s = tape.scale(th, AFFINE_SCALE_MAX);
        (s, t)
    }

    /// Elementwise affine raw layout per dimension: `(s_raw, t)` interleaved,
    /// replicated across the batch before this call.
    fn taped_affine_elementwise(tape: &mut Tape, raw: Var, n: usize, d: usize) -> (Var, Var) {
        let s_idx: Arc<Vec<usize>> = Arc::new((0..n * d).map(|e| e * 2).collect());
        let t_idx: Arc<Vec<usize>> = Arc::new((0..n * d).map(|e| e * 2 + 1).collect());
        let s_raw = tape.gather(raw, s_idx);
        let t = tape.gather(raw, t_idx);
        let scaled = tape.scale(s_raw, 1.0 / AFFINE_SCALE_MAX);
        let th = tape.tanh(scaled);
        let s = tape.scale(th, AFFINE_SCALE_MAX);
        (s, t)
    }

    /// Taped forward pass. `params` is this stack's flat parameter node
    /// (leaf or constant), `z` a flat `n x d` node. Returns `(x, logdet)`.
    pub fn forward_taped(&self, tape: &mut Tape, params: Var, z: Var, n: usize) -> Result<(Var, Var)> {
        let d = self.latent_dim;
        let mut x = z;
        let mut logdet = tape.constant(vec![0.0; n]);
        for (li, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Permutation { forward, .. } => {
                    x = tape.gather_cols(x, d, Arc::clone(forward));
                }
                Layer::Coupling(cl) => {
                    let xa = tape.gather_cols(x, d, Arc::clone(&cl.identity_idx));
                    let xb = tape.gather_cols(x, d, Arc::clone(&cl.transform_idx));
                    let m = cl.transform_idx.len();
                    let h = mlp_forward_taped(tape, params, cl.param_offset, &cl.conditioner, xa, n);
                    let (yb, ld_row) = match cl.kind {
                        CouplingKind::Affine => {
                            let (s, t) = Self::taped_affine(tape, h, m);
                            let es = tape.exp(s);
                            let xs = tape.mul(xb, es);
                            let yb = tape.add(xs, t);
                            let ld = tape.row_sum(s, m);
                            (yb, ld)
                        }
                        CouplingKind::RqSpline { bins, tail_bound } => {
                            let (yb, ld_el) =
                                spline::spline_forward_taped(tape, h, xb, n * m, bins, tail_bound);
                            let ld = tape.row_sum(ld_el, m);
                            (yb, ld)
                        }
                    };
                    let sa = tape.scatter_cols(xa, d, Arc::clone(&cl.identity_idx));
                    let sb = tape.scatter_cols(yb, d, Arc::clone(&cl.transform_idx));
                    x = tape.add(sa, sb);
                    logdet = tape.add(logdet, ld_row);
                }
                Layer::Elementwise { kind, param_offset } => {
                    let per = kind.params_per_element();
                    let raw_seg = tape.slice(params, *param_offset, d * per);
                    let rep_idx: Arc<Vec<usize>> =
                        Arc::new((0..n * d * per).map(|q| q % (d * per)).collect());
                    let raw = tape.gather(raw_seg, rep_idx);
                    match kind {
                        CouplingKind::Affine => {
                            let (s, t) = Self::taped_affine_elementwise(tape, raw, n, d);
                            let es = tape.exp(s);
                            let xs = tape.mul(x, es);
                            x = tape.add(xs, t);
                            let ld = tape.row_sum(s, d);
                            logdet = tape.add(logdet, ld);
                        }
                        CouplingKind::RqSpline { bins, tail_bound } => {
                            let (y, ld_el) =
                                spline::spline_forward_taped(tape, raw, x, n * d, *bins, *tail_bound);
                            x = y;
                            let ld = tape.row_sum(ld_el, d);
                            logdet = tape.add(logdet, ld);
                        }
                    }
                }
            }
            tape.check_finite(x, &format!("forward pass, layer {li}"))?;
        }
        Ok((x, logdet))
    }

    /// Taped inverse pass: returns `(z, logdet_inv)`.
    pub fn inverse_taped(&self, tape: &mut Tape, params: Var, x: Var, n: usize) -> Result<(Var, Var)> {
        let d = self.latent_dim;
        let mut z = x;
        let mut logdet_inv = tape.constant(vec![0.0; n]);
        for (li, layer) in self.layers.iter().enumerate().rev() {
            match layer {
                Layer::Permutation { inverse, .. } => {
                    z = tape.gather_cols(z, d, Arc::clone(inverse));
                }
                Layer::Coupling(cl) => {
                    let ya = tape.gather_cols(z, d, Arc::clone(&cl.identity_idx));
                    let yb = tape.gather_cols(z, d, Arc::clone(&cl.transform_idx));
                    let m = cl.transform_idx.len();
                    let h = mlp_forward_taped(tape, params, cl.param_offset, &cl.conditioner, ya, n);
                    let (xb, ld_row) = match cl.kind {
                        CouplingKind::Affine => {
                            let (s, t) = Self::taped_affine(tape, h, m);
                            let neg_s = tape.neg(s);
                            let es = tape.exp(neg_s);
                            let diff = tape.sub(yb, t);
                            let xb = tape.mul(diff, es);
                            let ld = tape.row_sum(s, m);
                            (xb, ld)
                        }
                        CouplingKind::RqSpline { bins, tail_bound } => {
                            let (xb, ld_el) =
                                spline::spline_inverse_taped(tape, h, yb, n * m, bins, tail_bound);
                            let ld = tape.row_sum(ld_el, m);
                            (xb, ld)
                        }
                    };
                    let sa = tape.scatter_cols(ya, d, Arc::clone(&cl.identity_idx));
                    let sb = tape.scatter_cols(xb, d, Arc::clone(&cl.transform_idx));
                    z = tape.add(sa, sb);
                    logdet_inv = tape.sub(logdet_inv, ld_row);
                }
                Layer::Elementwise { kind, param_offset } => {
                    let per = kind.params_per_element();
                    let raw_seg = tape.slice(params, *param_offset, d * per);
                    let rep_idx: Arc<Vec<usize>> =
                        Arc::new((0..n * d * per).map(|q| q % (d * per)).collect());
                    let raw = tape.gather(raw_seg, rep_idx);
                    match kind {
                        CouplingKind::Affine => {
                            let (s, t) = Self::taped_affine_elementwise(tape, raw, n, d);
                            let neg_s = tape.neg(s);
                            let es = tape.exp(neg_s);
                            let diff = tape.sub(z, t);
                            z = tape.mul(diff, es);
                            let ld = tape.row_sum(s, d);
                            logdet_inv = tape.sub(logdet_inv, ld);
                        }
                        CouplingKind::RqSpline { bins, tail_bound } => {
                            let (xs, ld_el) =
                                spline::spline_inverse_taped(tape, raw, z, n * d, *bins, *tail_bound);
                            z = xs;
                            let ld = tape.row_sum(ld_el, d);
                            logdet_inv = tape.sub(logdet_inv, ld);
                        }
                    }
                }
            }
            tape.check_finite(z, &format!("inverse pass, layer {li}"))?;
        }
        Ok((z, logdet_inv))
    }

    /// Taped log-density of `x` rows.
    pub fn log_density_taped(&self, tape: &mut Tape, params: Var, x: Var, n: usize) -> Result<Var> {
        let (z, logdet_inv) = self.inverse_taped(tape, params, x, n)?;
        let sq = tape.square(z);
        let ss = tape.row_sum(sq, self.latent_dim);
        let quad = tape.scale(ss, -0.5);
        let shifted = tape.add_const(quad, -0.5 * self.latent_dim as f64 * LN_2PI);
        Ok(tape.add(shifted, logdet_inv))
    }
}

/// Options for [`fit_density_mle`].
#[derive(Debug, Clone)]
pub struct MleConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub fd_penalty: Option<FdPenaltyConfig>,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig { steps: 1000, batch_size: 128, learning_rate: 1e-3, seed: 0, fd_penalty: None }
    }
}

/// Maximum-likelihood density fit: minimizes `-mean log_density(data)` with
/// Adam over minibatches. Returns the per-step loss history.
pub fn fit_density_mle(stack: &mut FlowStack, data: &Array2<f64>, cfg: &MleConfig) -> Result<Vec<f64>> {
    if data.nrows() < 2 {
        return Err(Error::config(format!("mle fit needs >= 2 samples, got {}", data.nrows())));
    }
    if data.ncols() != stack.latent_dim() {
        return Err(Error::dimension(format!(
            "data width {} does not match flow dimension {}",
            data.ncols(),
            stack.latent_dim()
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("training data contains non-finite values"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(stack.params().len(), cfg.learning_rate)?;
    let mut history = Vec::with_capacity(cfg.steps);
    let n_data = data.nrows();
    let b = cfg.batch_size.min(n_data);

    for step in 0..cfg.steps {
        let mut batch = Array2::zeros((b, stack.latent_dim()));
        for i in 0..b {
            let pick = rng.random_range(0..n_data);
            batch.row_mut(i).assign(&data.row(pick));
        }
        let pen_seed: u64 = rng.random();
        let result = (|| -> Result<(ParamVector, f64)> {
            let mut tape = Tape::new();
            let p = tape.param(stack.params().values().to_vec());
            let xb = tape.constant(batch.iter().cloned().collect());
            let logp = stack.log_density_taped(&mut tape, p, xb, b)?;
            let mean_lp = tape.mean_all(logp);
            let mut loss = tape.neg(mean_lp);
            if let Some(fd) = &cfg.fd_penalty {
                if fd.weight > 0.0 {
                    let (z0, _) = stack.inverse(&batch)?;
                    let zc = tape.constant(z0.iter().cloned().collect());
                    let (x_at_z, _) = stack.forward_taped(&mut tape, p, zc, b)?;
                    let pen = fd_penalty_taped(stack, &mut tape, p, &z0, x_at_z, fd, pen_seed)?;
                    let wpen = tape.scale(pen, fd.weight);
                    loss = tape.add(loss, wpen);
                }
            }
            let loss_val = tape.val(loss)[0];
            let grads = tape.backward(loss)?;
            let gvec = grads.get(p, stack.params().len());
            Ok((stack.params().with_values(gvec)?, loss_val))
        })();
        let (g, loss_val) = result.map_err(|e| Error::Training { step, message: e.to_string() })?;
        adam_step(&mut opt, stack.params_mut(), &g)?;
        history.push(loss_val);
    }
    Ok(history)
}
