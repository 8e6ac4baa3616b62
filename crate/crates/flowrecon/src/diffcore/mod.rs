//! Parameterized function blocks, gradient evaluation, and the optimizer.
//!
//! The trainable state of every model in this crate lives in a flat
//! [`ParamVector`] with a named segment layout. MLP conditioners are described
//! by [`MlpSpec`] and evaluated either directly ([`mlp_forward_batch`]) or on a
//! [`Tape`] for training ([`mlp_forward_taped`]). [`grad`] is the single entry
//! point for reverse-mode gradients; [`adam_step`] applies the update.

pub mod tape;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
pub use tape::{sigmoid, softplus, CustomVjp, Tape, Var};

/// One named, shaped segment of a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn size(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat, seedable store of all learnable parameters of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let expected: usize = layout.iter().map(Segment::size).sum();
        if values.len() != expected {
            return Err(Error::dimension(format!(
                "param vector has {} values but layout declares {}",
                values.len(),
                expected
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite parameter value {bad}")));
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Vec<Segment>) -> Self {
        let len = layout.iter().map(Segment::size).sum();
        ParamVector { values: vec![0.0; len], layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    /// Byte offset (in elements) of a named segment.
    pub fn segment_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut start = 0;
        for seg in &self.layout {
            let size = seg.size();
            if seg.name == name {
                return Some(start..start + size);
            }
            start += size;
        }
        None
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.segment_range(name).map(|r| &self.values[r])
    }

    /// Same layout, values from `values`.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values, self.layout.clone())
    }
}

/// Activation for MLP hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Architecture of an MLP conditioner: `layer_sizes[0]` inputs through to
/// `layer_sizes.last()` outputs, hidden layers activated, additive skip
/// connections every two hidden layers of equal width, linear output layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub zero_init_last: bool,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, zero_init_last: bool) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config(format!(
                "mlp needs at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::config("mlp layer sizes must be positive"));
        }
        Ok(MlpSpec { layer_sizes, activation, zero_init_last })
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Named (weight, bias) segments, in evaluation order.
    pub fn segments(&self, prefix: &str) -> Vec<Segment> {
        let mut segs = Vec::new();
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            segs.push(Segment { name: format!("{prefix}layer{l}.weight"), shape: vec![fan_out, fan_in] });
            segs.push(Segment { name: format!("{prefix}layer{l}.bias"), shape: vec![fan_out] });
        }
        segs
    }

    pub fn param_count(&self) -> usize {
        self.segments("").iter().map(Segment::size).sum()
    }
}

/// Fills an MLP's parameter values in place: Xavier-uniform weights, zero
/// biases, final layer zeroed when `zero_init_last` is set. Deterministic per
/// seed. `out` must have length [`MlpSpec::param_count`].
pub fn mlp_init_into(spec: &MlpSpec, seed: u64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), spec.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = 0;
    for l in 0..spec.n_layers() {
        let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let last = l + 1 == spec.layer_sizes.len() - 1;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut out[pos..pos + fan_in * fan_out] {
            let u: f64 = rng.random();
            *w = if last && spec.zero_init_last { 0.0 } else { bound * (2.0 * u - 1.0) };
        }
        pos += fan_in * fan_out;
        for b in &mut out[pos..pos + fan_out] {
            *b = 0.0;
        }
        pos += fan_out;
    }
}

/// Freshly initialized parameters for `spec`.
pub fn mlp_init(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut pv = ParamVector::zeros(spec.segments(""));
    mlp_init_into(spec, seed, pv.values_mut());
    pv
}

fn apply_activation(act: Activation, buf: &mut [f64]) {
    match act {
        Activation::Tanh => {
            for v in buf {
                *v = v.tanh();
            }
        }
        Activation::Relu => {
            for v in buf {
                *v = v.max(0.0);
            }
        }
    }
}

/// Batch MLP forward over `n` rows of `inputs` (flat `n x input_size`), using
/// the flat parameter slice that [`mlp_init`] produced.
pub fn mlp_forward_batch(params: &[f64], spec: &MlpSpec, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
    if params.len() != spec.param_count() {
        return Err(Error::dimension(format!(
            "mlp expects {} parameters, got {}",
            spec.param_count(),
            params.len()
        )));
    }
    if inputs.len() != n * spec.input_size() {
        return Err(Error::dimension(format!(
            "mlp expects {} x {} inputs, got {} values",
            n,
            spec.input_size(),
            inputs.len()
        )));
    }
    let mut cur = inputs.to_vec();
    let mut skip_anchor: Option<Vec<f64>> = None;
    let mut pos = 0;
    let n_layers = spec.n_layers();
    for l in 0..n_layers {
        let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let w = &params[pos..pos + fan_in * fan_out];
        pos += fan_in * fan_out;
        let b = &params[pos..pos + fan_out];
        pos += fan_out;

        let mut next = vec![0.0; n * fan_out];
        for (row_in, row_out) in cur.chunks(fan_in).zip(next.chunks_mut(fan_out)) {
            for (j, o) in row_out.iter_mut().enumerate() {
                let wr = &w[j * fan_in..(j + 1) * fan_in];
                let mut acc = b[j];
                for (x, ww) in row_in.iter().zip(wr) {
                    acc += x * ww;
                }
                *o = acc;
            }
        }
        let last = l + 1 == n_layers;
        if !last {
            apply_activation(spec.activation, &mut next);
            // Hidden layer index is l (0-based); a pair completes on odd l.
            if l % 2 == 1 {
                if let Some(anchor) = &skip_anchor {
                    if anchor.len() == next.len() {
                        for (v, a) in next.iter_mut().zip(anchor) {
                            *v += a;
                        }
                    }
                }
                skip_anchor = Some(next.clone());
            }
        }
        cur = next;
    }
    Ok(cur)
}

/// Single-row convenience wrapper over [`mlp_forward_batch`].
pub fn mlp_forward(params: &ParamVector, spec: &MlpSpec, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != spec.input_size() {
        return Err(Error::dimension(format!(
            "mlp input has {} entries, expected {}",
            input.len(),
            spec.input_size()
        )));
    }
    mlp_forward_batch(params.values(), spec, input, 1)
}

/// MLP forward recorded on a tape. `params` is the full parameter leaf;
/// `offset` locates this conditioner's segment inside it. `input` is a flat
/// `n x input_size` node. Must mirror [`mlp_forward_batch`] exactly.
pub fn mlp_forward_taped(
    tape: &mut Tape,
    params: Var,
    offset: usize,
    spec: &MlpSpec,
    input: Var,
    n: usize,
) -> Var {
    let mut cur = input;
    let mut skip_anchor: Option<Var> = None;
    let mut pos = offset;
    let n_layers = spec.n_layers();
    for l in 0..n_layers {
        let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let w = tape.slice(params, pos, fan_in * fan_out);
        pos += fan_in * fan_out;
        let b = tape.slice(params, pos, fan_out);
        pos += fan_out;

        let z = tape.matmul_nt(cur, w, n, fan_in, fan_out);
        let mut h = tape.add_row_vec(z, b, fan_out);
        let last = l + 1 == n_layers;
        if !last {
            h = match spec.activation {
                Activation::Tanh => tape.tanh(h),
                Activation::Relu => tape.relu(h),
            };
            if l % 2 == 1 {
                if let Some(anchor) = skip_anchor {
                    if tape.val(anchor).len() == tape.val(h).len() {
                        h = tape.add(h, anchor);
                    }
                }
                skip_anchor = Some(h);
            }
        }
        cur = h;
    }
    cur
}

/// Reverse-mode gradient of a scalar loss with respect to `params`.
///
/// The loss is expressed against the tape: the closure receives a fresh tape
/// and the parameter leaf, and returns the scalar loss node.
pub fn grad<F>(params: &ParamVector, loss_fn: F) -> Result<ParamVector>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let (g, _) = grad_with_loss(params, loss_fn)?;
    Ok(g)
}

/// [`grad`] that also reports the loss value.
pub fn grad_with_loss<F>(params: &ParamVector, loss_fn: F) -> Result<(ParamVector, f64)>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = tape.param(params.values().to_vec());
    let loss = loss_fn(&mut tape, p)?;
    let loss_val = tape.val(loss)[0];
    let grads = tape.backward(loss)?;
    let g = grads.get(p, params.len());
    Ok((params.with_values(g)?, loss_val))
}

/// Adam optimizer state with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state for `n` parameters. Betas 0.9/0.999, eps 1e-8.
    pub fn new(n: usize, learning_rate: f64) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(Error::config(format!("learning rate must be > 0, got {learning_rate}")));
        }
        Ok(AdamState {
            step_count: 0,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    /// Default learning rate 1e-4.
    pub fn with_default_lr(n: usize) -> Self {
        AdamState::new(n, 1e-4).unwrap()
    }
}

/// One Adam update in place; increments `step_count`.
pub fn adam_step(state: &mut AdamState, params: &mut ParamVector, grads: &ParamVector) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.first_moment.len() != n {
        return Err(Error::dimension(format!(
            "adam: params {}, grads {}, state {}",
            n,
            grads.len(),
            state.first_moment.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let p = params.values_mut();
    for i in 0..n {
        let g = grads.values()[i];
        state.first_moment[i] = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * g;
        state.second_moment[i] = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.first_moment[i] / bc1;
        let v_hat = state.second_moment[i] / bc2;
        p[i] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}
