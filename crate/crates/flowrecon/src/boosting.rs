//! Gradient-boosted mixtures of flow stacks.
//!
//! A [`BoostedFlow`] is a convex mixture of [`FlowStack`] components built
//! stage-wise: each new component is fit against the functional gradient of
//! the variational objective with all previous components frozen, then its
//! stage weight is tuned by projected SGD with Monte Carlo gradient
//! estimates, clipped to `[0, 1]`.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{adam_step, AdamState, Tape, Var};
use crate::error::{Error, Result};
use crate::flows::serialize::{flow_from_bytes, flow_to_bytes};
use crate::flows::{fd_penalty_taped, FdPenaltyConfig, FlowStack};
use crate::io::{atomic_write, ByteReader, ByteWriter};
use crate::sampling::{self, PssGrouping, Scheme};

/// The target the variational fit descends on: per-sample negative
/// unnormalized log-posterior (data fidelity plus prior regularity), as a
/// taped expression of the flow output `x`.
pub trait PosteriorObjective: Sync {
    fn neg_log_post_taped(&self, tape: &mut Tape, x: Var, n: usize) -> Result<Var>;

    /// Plain evaluation, by default through a throwaway tape.
    fn neg_log_post(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.iter().cloned().collect());
        let v = self.neg_log_post_taped(&mut tape, xv, x.nrows())?;
        Ok(tape.val(v).to_vec())
    }
}

/// Convex mixture of flow stacks with stage weights; `betas[0]` is pinned
/// to 1 (the first component is the whole model until a second is added).
#[derive(Debug, Clone)]
pub struct BoostedFlow {
    components: Vec<FlowStack>,
    betas: Vec<f64>,
}

/// Unrolls stage weights into mixture weights: `w_j = beta_j prod_{c>j}
/// (1 - beta_c)`, with the first weight computed as the residual so the sum
/// is exactly 1.
pub fn effective_weights(betas: &[f64]) -> Result<Vec<f64>> {
    if betas.is_empty() {
        return Err(Error::config("weight sequence is empty"));
    }
    if betas[0] != 1.0 {
        return Err(Error::config(format!("beta_1 must equal 1, got {}", betas[0])));
    }
    for (c, &b) in betas.iter().enumerate() {
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::config(format!("beta_{} = {b} outside [0, 1]", c + 1)));
        }
    }
    let c = betas.len();
    let mut w = vec![0.0; c];
    let mut tail_product = 1.0;
    for j in (1..c).rev() {
        w[j] = betas[j] * tail_product;
        tail_product *= 1.0 - betas[j];
    }
    w[0] = 1.0 - w[1..].iter().sum::<f64>();
    Ok(w)
}

fn mixture_logp_plain(
    components: &[FlowStack],
    weights: &[f64],
    x: &Array2<f64>,
) -> Result<Vec<f64>> {
    let n = x.nrows();
    let mut parts: Vec<(f64, Vec<f64>)> = Vec::new();
    for (j, (comp, &w)) in components.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let lp = comp
            .log_density(x)
            .map_err(|e| Error::numeric(format!("component {j}: {e}")))?;
        parts.push((w.ln(), lp));
    }
    if parts.len() == 1 && parts[0].0 == 0.0 {
        return Ok(parts.pop().unwrap().1);
    }
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let mx = parts
            .iter()
            .map(|(lw, lp)| lw + lp[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = parts.iter().map(|(lw, lp)| (lw + lp[i] - mx).exp()).sum();
        *o = mx + s.ln();
    }
    Ok(out)
}

fn mixture_logp_taped(
    tape: &mut Tape,
    components: &[FlowStack],
    weights: &[f64],
    x: Var,
    n: usize,
) -> Result<Var> {
    let mut parts = Vec::new();
    for (j, (comp, &w)) in components.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let p = tape.constant(comp.params().values().to_vec());
        let lp = comp
            .log_density_taped(tape, p, x, n)
            .map_err(|e| Error::numeric(format!("component {j}: {e}")))?;
        parts.push(tape.add_const(lp, w.ln()));
    }
    Ok(tape.log_sum_exp(&parts))
}

impl BoostedFlow {
    pub fn new(first: FlowStack) -> Self {
        BoostedFlow { components: vec![first], betas: vec![1.0] }
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[FlowStack] {
        &self.components
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn latent_dim(&self) -> usize {
        self.components[0].latent_dim()
    }

    /// Mixture weights derived from the stage weights; sums to exactly 1.
    pub fn effective_weights(&self) -> Result<Vec<f64>> {
        effective_weights(&self.betas)
    }

    pub fn push_component(&mut self, stack: FlowStack, beta: f64) -> Result<()> {
        if stack.latent_dim() != self.latent_dim() {
            return Err(Error::dimension(format!(
                "component dimension {} does not match mixture dimension {}",
                stack.latent_dim(),
                self.latent_dim()
            )));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config(format!("stage weight {beta} outside [0, 1]")));
        }
        self.components.push(stack);
        self.betas.push(beta);
        Ok(())
    }

    /// Overwrites the newest component's stage weight.
    pub fn set_last_beta(&mut self, beta: f64) -> Result<()> {
        if self.betas.len() < 2 {
            return Err(Error::config("the first stage weight is pinned to 1"));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config(format!("stage weight {beta} outside [0, 1]")));
        }
        *self.betas.last_mut().unwrap() = beta;
        Ok(())
    }

    /// `log sum_j w_j exp(log_density_j(x))` by log-sum-exp.
    pub fn mixture_log_density(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        let w = self.effective_weights()?;
        mixture_logp_plain(&self.components, &w, x)
    }

    /// Taped mixture log-density with all component parameters frozen.
    pub fn mixture_log_density_taped(&self, tape: &mut Tape, x: Var, n: usize) -> Result<Var> {
        let w = self.effective_weights()?;
        mixture_logp_taped(tape, &self.components, &w, x, n)
    }

    /// Draws one sample per design row: a component is picked from the
    /// effective weights using a dedicated uniform stream seeded by `seed`,
    /// then that component's flow transforms the Gaussianized row.
    pub fn mixture_sample(&self, design: &sampling::UnitDesign, seed: u64) -> Result<Array2<f64>> {
        if design.dim() != self.latent_dim() {
            return Err(Error::dimension(format!(
                "design dimension {} does not match mixture dimension {}",
                design.dim(),
                self.latent_dim()
            )));
        }
        let weights = self.effective_weights()?;
        let z = sampling::to_gaussian(design);
        let n = z.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut assignment = vec![0usize; n];
        for a in assignment.iter_mut() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = weights.len() - 1;
            for (j, &w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            *a = pick;
        }
        let mut out = Array2::zeros((n, self.latent_dim()));
        for (j, comp) in self.components.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&i| assignment[i] == j).collect();
            if rows.is_empty() {
                continue;
            }
            let mut sub = Array2::zeros((rows.len(), self.latent_dim()));
            for (r, &i) in rows.iter().enumerate() {
                sub.row_mut(r).assign(&z.points.row(i));
            }
            let (x, _) = comp.forward(&sub)?;
            for (r, &i) in rows.iter().enumerate() {
                out.row_mut(i).assign(&x.row(r));
            }
        }
        Ok(out)
    }

    /// Monte Carlo estimate of the variational objective
    /// `E_{x ~ mixture}[log tau_mix(x) + neg_log_post(x)]`, with its standard
    /// error.
    pub fn objective_estimate(
        &self,
        objective: &dyn PosteriorObjective,
        n: usize,
        seed: u64,
    ) -> Result<(f64, f64)> {
        let design = sampling::srs(n, self.latent_dim(), seed)?;
        let x = self.mixture_sample(&design, seed.wrapping_add(1))?;
        let logp = self.mixture_log_density(&x)?;
        let nlp = objective.neg_log_post(&x)?;
        let vals: Vec<f64> = logp.iter().zip(&nlp).map(|(a, b)| a + b).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Ok((mean, (var / n as f64).sqrt()))
    }
}

/// Per-stage training settings shared by component fitting.
#[derive(Debug, Clone)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub scheme: Scheme,
    pub grouping: Option<PssGrouping>,
    pub seed: u64,
    pub fd_penalty: Option<FdPenaltyConfig>,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            steps: 500,
            batch_size: 32,
            learning_rate: 1e-2,
            scheme: Scheme::Lpss,
            grouping: None,
            seed: 0,
            fd_penalty: None,
        }
    }
}

fn stage_design(cfg: &StageConfig, d: usize, step: usize) -> Result<sampling::LatentBatch> {
    let design = sampling::design(
        cfg.scheme,
        cfg.batch_size,
        d,
        cfg.seed.wrapping_add(step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        cfg.grouping.as_ref(),
        10,
    )?;
    Ok(sampling::to_gaussian(&design))
}

/// Fits one new component against the frozen mixture and appends it with
/// stage weight `1 / (C + 1)`. Returns the per-step loss history.
///
/// The fit minimizes the variational bound of the pilot mixture
/// `(1 - b) tau_prev + b t` at the fixed initialization weight
/// `b = 1 / (C + 1)`, over the new component's parameters only:
/// `E_t[log((1-b) tau_prev(x) + b t(x)) + neg_log_post(x)]`. Its `b -> 0`
/// limit is the bare functional-gradient objective
/// `E_t[log tau_prev(x) + neg_log_post(x)]`, which is unbounded below for
/// location families and diverges in practice; the pilot mixture's own
/// density term bounds it.
pub fn fit_new_component(
    bf: &mut BoostedFlow,
    objective: &dyn PosteriorObjective,
    cfg: &StageConfig,
) -> Result<Vec<f64>> {
    let d = bf.latent_dim();
    let prev_weights = bf.effective_weights()?;
    let pilot = 1.0 / (bf.n_components() + 1) as f64;
    let scaled_prev: Vec<f64> = prev_weights.iter().map(|w| w * (1.0 - pilot)).collect();
    let mut new_comp = FlowStack::build(
        &bf.components[0].config().clone(),
        cfg.seed.wrapping_add(0x5eed_c0de),
    )?;
    let mut opt = AdamState::new(new_comp.params().len(), cfg.learning_rate)?;
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let z = stage_design(cfg, d, step)?;
        let pen_seed = cfg.seed.wrapping_add(step as u64).wrapping_add(0xfd);
        let result = (|| -> Result<(Vec<f64>, f64)> {
            let mut tape = Tape::new();
            let p = tape.param(new_comp.params().values().to_vec());
            let zc = tape.constant(z.points.iter().cloned().collect());
            let (x, logdet) = new_comp.forward_taped(&mut tape, p, zc, cfg.batch_size)?;
            // log t(t(z)) = log pi(z) - logdet(z): no inverse pass needed for
            // the new component's own density at its samples.
            let log_pi: Vec<f64> = z
                .points
                .rows()
                .into_iter()
                .map(|row| {
                    -0.5 * d as f64 * crate::flows::LN_2PI
                        - 0.5 * row.iter().map(|v| v * v).sum::<f64>()
                })
                .collect();
            let log_pi = tape.constant(log_pi);
            let log_t = tape.sub(log_pi, logdet);
            let log_t = tape.add_const(log_t, pilot.ln());
            let log_prev = mixture_logp_taped(
                &mut tape,
                &bf.components,
                &scaled_prev,
                x,
                cfg.batch_size,
            )?;
            let log_mix = tape.log_sum_exp(&[log_prev, log_t]);
            let nlp = objective.neg_log_post_taped(&mut tape, x, cfg.batch_size)?;
            let per_row = tape.add(log_mix, nlp);
            let mut loss = tape.mean_all(per_row);
            if let Some(fd) = &cfg.fd_penalty {
                if fd.weight > 0.0 {
                    let pen =
                        fd_penalty_taped(&new_comp, &mut tape, p, &z.points, x, fd, pen_seed)?;
                    let wpen = tape.scale(pen, fd.weight);
                    loss = tape.add(loss, wpen);
                }
            }
            let loss_val = tape.val(loss)[0];
            let grads = tape.backward(loss)?;
            Ok((grads.get(p, new_comp.params().len()), loss_val))
        })();
        let (g, loss_val) =
            result.map_err(|e| Error::Training { step, message: e.to_string() })?;
        let gv = new_comp.params().with_values(g)?;
        adam_step(&mut opt, new_comp.params_mut(), &gv)?;
        history.push(loss_val);
    }

    bf.push_component(new_comp, pilot)?;
    Ok(history)
}

/// Settings for the stage-weight SGD.
#[derive(Debug, Clone)]
pub struct WeightUpdateConfig {
    pub step_size: f64,
    pub tolerance: f64,
    pub max_iters: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for WeightUpdateConfig {
    fn default() -> Self {
        WeightUpdateConfig {
            step_size: 0.05,
            tolerance: 1e-3,
            max_iters: 60,
            mc_samples: 256,
            seed: 0,
        }
    }
}

impl WeightUpdateConfig {
    fn validate(&self) -> Result<()> {
        if self.step_size <= 0.0 || self.tolerance <= 0.0 || self.max_iters == 0 || self.mc_samples == 0
        {
            return Err(Error::config(
                "weight update needs positive step size, tolerance, iterations, and sample count",
            ));
        }
        Ok(())
    }
}

/// One iterate of the projected SGD on a stage weight.
#[derive(Debug, Clone, Copy)]
pub struct WeightStep {
    pub beta: f64,
    pub gradient: f64,
    pub gradient_se: f64,
}

/// Trace of [`update_weight`]; `converged` is false when the iteration
/// stopped at `max_iters` instead of the tolerance.
#[derive(Debug, Clone)]
pub struct WeightTrace {
    pub steps: Vec<WeightStep>,
    pub converged: bool,
}

impl WeightTrace {
    pub fn final_beta(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.beta)
    }
}

/// Projected SGD driver: `beta <- clip(beta - step * grad(iter, beta), 0, 1)`
/// until the change drops below `tolerance` or `max_iters` is hit. The
/// gradient comes from a caller-supplied estimator, which lets tests stub the
/// Monte Carlo expectations exactly.
pub fn sgd_weight_iterations(
    beta0: f64,
    cfg: &WeightUpdateConfig,
    mut grad_estimate: impl FnMut(usize, f64) -> (f64, f64),
) -> Result<WeightTrace> {
    cfg.validate()?;
    let mut beta = beta0.clamp(0.0, 1.0);
    let mut steps = Vec::new();
    let mut converged = false;
    for s in 0..cfg.max_iters {
        let (grad, se) = grad_estimate(s, beta);
        let next = (beta - cfg.step_size * grad).clamp(0.0, 1.0);
        steps.push(WeightStep { beta: next, gradient: grad, gradient_se: se });
        let delta = (next - beta).abs();
        beta = next;
        if delta < cfg.tolerance {
            converged = true;
            break;
        }
    }
    Ok(WeightTrace { steps, converged })
}

/// Tunes the newest component's stage weight by Monte Carlo SGD: the gradient
/// estimate is `mean[xi(x_new)] - mean[xi(x_prev)]`, samples drawn from the
/// new component and the previous mixture respectively.
///
/// `xi(x) = log m_beta(x) + neg_log_post(x)` uses the mixture density at the
/// current iterate's weight, which is the exact derivative of the variational
/// bound in `beta`; the frozen-mixture form is its `beta -> 0` limit.
pub fn update_weight(
    bf: &mut BoostedFlow,
    objective: &dyn PosteriorObjective,
    cfg: &WeightUpdateConfig,
) -> Result<WeightTrace> {
    cfg.validate()?;
    let c = bf.n_components();
    if c < 2 {
        return Err(Error::config("weight update needs at least two components"));
    }
    let d = bf.latent_dim();
    let prev = BoostedFlow {
        components: bf.components[..c - 1].to_vec(),
        betas: bf.betas[..c - 1].to_vec(),
    };
    let new_comp = &bf.components[c - 1];
    let beta0 = bf.betas[c - 1];
    let n = cfg.mc_samples;

    let prev_weights = prev.effective_weights()?;
    let xi = |x: &Array2<f64>, beta: f64| -> Result<Vec<f64>> {
        // log((1 - beta) tau_prev(x) + beta t(x)) + nlp(x), degenerate ends
        // handled by dropping the vanished term.
        let log_prev = if beta < 1.0 {
            Some(mixture_logp_plain(&prev.components, &prev_weights, x)?)
        } else {
            None
        };
        let log_new = if beta > 0.0 { Some(new_comp.log_density(x)?) } else { None };
        let nlp = objective.neg_log_post(x)?;
        let mut out = Vec::with_capacity(x.nrows());
        for i in 0..x.nrows() {
            let mut terms: Vec<f64> = Vec::with_capacity(2);
            if let Some(lp) = &log_prev {
                terms.push((1.0 - beta).ln() + lp[i]);
            }
            if let Some(lt) = &log_new {
                terms.push(beta.ln() + lt[i]);
            }
            let mx = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
            out.push(lse + nlp[i]);
        }
        Ok(out)
    };

    let mut failure: Option<Error> = None;
    let trace = sgd_weight_iterations(beta0, cfg, |s, beta| {
        let run = || -> Result<(f64, f64)> {
            let seed_new = cfg.seed.wrapping_add(2 * s as u64);
            let seed_prev = cfg.seed.wrapping_add(2 * s as u64 + 1);
            let design_new = sampling::srs(n, d, seed_new)?;
            let z_new = sampling::to_gaussian(&design_new);
            let (x_new, _) = new_comp.forward(&z_new.points)?;
            let design_prev = sampling::srs(n, d, seed_prev)?;
            let x_prev = prev.mixture_sample(&design_prev, seed_prev.wrapping_add(7))?;
            let xi_new = xi(&x_new, beta)?;
            let xi_prev = xi(&x_prev, beta)?;
            let diffs: Vec<f64> = xi_new.iter().zip(&xi_prev).map(|(a, b)| a - b).collect();
            let mean = diffs.iter().sum::<f64>() / n as f64;
            let var = diffs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            Ok((mean, (var / n as f64).sqrt()))
        };
        match run() {
            Ok(pair) => pair,
            Err(e) => {
                failure = Some(e);
                (0.0, 0.0)
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    bf.set_last_beta(trace.final_beta())?;
    Ok(trace)
}

const BOOSTED_MAGIC: &[u8; 4] = b"RGFB";
const BOOSTED_VERSION: u32 = 1;

/// Serializes a boosted mixture: beta table plus nested flow blobs.
pub fn boosted_to_bytes(bf: &BoostedFlow) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(BOOSTED_MAGIC);
    w.u32(BOOSTED_VERSION);
    w.u32(bf.components.len() as u32);
    for &b in &bf.betas {
        w.f64(b);
    }
    for comp in &bf.components {
        let blob = flow_to_bytes(comp);
        w.u64(blob.len() as u64);
        w.bytes(&blob);
    }
    w.into_inner()
}

pub fn boosted_from_bytes(bytes: &[u8]) -> Result<BoostedFlow> {
    let mut r = ByteReader::new(bytes);
    if r.bytes(4)? != BOOSTED_MAGIC {
        return Err(Error::Parse("not a boosted-flow blob (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != BOOSTED_VERSION {
        return Err(Error::Parse(format!("unsupported boosted blob version {version}")));
    }
    let c = r.u32()? as usize;
    if c == 0 {
        return Err(Error::Parse("boosted blob has zero components".into()));
    }
    let mut betas = Vec::with_capacity(c);
    for _ in 0..c {
        betas.push(r.f64()?);
    }
    let mut components = Vec::with_capacity(c);
    for _ in 0..c {
        let len = r.u64()? as usize;
        components.push(flow_from_bytes(r.bytes(len)?)?);
    }
    effective_weights(&betas)?;
    Ok(BoostedFlow { components, betas })
}

pub fn save_boosted(bf: &BoostedFlow, path: &Path) -> Result<()> {
    atomic_write(path, &boosted_to_bytes(bf))
}

pub fn load_boosted(path: &Path) -> Result<BoostedFlow> {
    boosted_from_bytes(&std::fs::read(path)?)
}
