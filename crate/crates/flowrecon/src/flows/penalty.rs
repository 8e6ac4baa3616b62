//! Finite-difference estimate of the local Lipschitz constants of a flow.
//!
//! Approximates `Lip(T) = sup_x sup_{|nu|=1} ||T(x) - T(x + eps nu)|| / eps`
//! by the max over a batch of points and freshly drawn unit directions, in
//! both directions when `bidirectional` is set. Added to training losses as a
//! stability regularizer against exploding inverses.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};
use crate::sampling::inverse_normal_cdf;

use super::FlowStack;

/// Settings for the finite-difference Lipschitz penalty.
#[derive(Debug, Clone)]
pub struct FdPenaltyConfig {
    /// FD step size.
    pub step: f64,
    /// Unit directions drawn per evaluation.
    pub n_directions: usize,
    /// Weight of the penalty in the training loss; 0 disables it.
    pub weight: f64,
    /// Also penalize the inverse map.
    pub bidirectional: bool,
}

impl Default for FdPenaltyConfig {
    fn default() -> Self {
        FdPenaltyConfig { step: 1e-3, n_directions: 1, weight: 1.0, bidirectional: true }
    }
}

impl FdPenaltyConfig {
    fn validate(&self) -> Result<()> {
        if self.step <= 0.0 {
            return Err(Error::config(format!("fd penalty step must be > 0, got {}", self.step)));
        }
        if self.n_directions == 0 {
            return Err(Error::config("fd penalty needs n_directions >= 1"));
        }
        Ok(())
    }
}

/// Directional Lipschitz estimates of a flow, per direction of evaluation.
#[derive(Debug, Clone, Copy)]
pub struct FdPenaltyEstimate {
    pub forward: f64,
    pub inverse: Option<f64>,
}

impl FdPenaltyEstimate {
    /// Penalty value added to losses: forward plus inverse estimate.
    pub fn total(&self) -> f64 {
        self.forward + self.inverse.unwrap_or(0.0)
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d)
            .map(|_| inverse_normal_cdf(rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12)))
            .collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn shifted(batch: &Array2<f64>, dir: &[f64], eps: f64) -> Array2<f64> {
    let mut out = batch.clone();
    for mut row in out.rows_mut() {
        for (v, d) in row.iter_mut().zip(dir) {
            *v += eps * d;
        }
    }
    out
}

fn max_row_rate(a: &Array2<f64>, b: &Array2<f64>, eps: f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for (ra, rb) in a.rows().into_iter().zip(b.rows()) {
        let d2: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
        best = best.max(d2.sqrt() / eps);
    }
    best
}

/// Plain FD Lipschitz estimate at the rows of `batch` (latent-space points).
/// The inverse estimate is taken at the forward images of the batch.
pub fn fd_lipschitz_penalty(
    stack: &FlowStack,
    batch: &Array2<f64>,
    cfg: &FdPenaltyConfig,
    seed: u64,
) -> Result<FdPenaltyEstimate> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = stack.latent_dim();
    let (x0, _) = stack.forward(batch)?;
    let mut fwd = f64::NEG_INFINITY;
    let mut inv = f64::NEG_INFINITY;
    for _ in 0..cfg.n_directions {
        let nu = unit_direction(&mut rng, d);
        let (x1, _) = stack.forward(&shifted(batch, &nu, cfg.step))?;
        fwd = fwd.max(max_row_rate(&x0, &x1, cfg.step));
        if cfg.bidirectional {
            let nu_inv = unit_direction(&mut rng, d);
            let (z0, _) = stack.inverse(&x0)?;
            let (z1, _) = stack.inverse(&shifted(&x0, &nu_inv, cfg.step))?;
            inv = inv.max(max_row_rate(&z0, &z1, cfg.step));
        }
    }
    Ok(FdPenaltyEstimate { forward: fwd, inverse: cfg.bidirectional.then_some(inv) })
}

/// Taped FD penalty for training losses. `z` holds the latent points (their
/// values), `x_at_z` is the already-taped forward image of those points.
/// Returns the scalar unweighted penalty node (forward + inverse estimate).
pub fn fd_penalty_taped(
    stack: &FlowStack,
    tape: &mut Tape,
    params: Var,
    z: &Array2<f64>,
    x_at_z: Var,
    cfg: &FdPenaltyConfig,
    seed: u64,
) -> Result<Var> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = z.nrows();
    let d = stack.latent_dim();

    // Per-direction estimate vectors; the global max element gets the gradient.
    let rate_rows = |tape: &mut Tape, a: Var, b: Var| -> Var {
        let diff = tape.sub(a, b);
        let sq = tape.square(diff);
        let ss = tape.row_sum(sq, d);
        let eps_floor = 1e-300;
        let safe = tape.add_const(ss, eps_floor);
        let norm = tape.sqrt(safe);
        tape.scale(norm, 1.0 / cfg.step)
    };
    let push_best = |tape: &mut Tape, v: Var, out: &mut Vec<(Var, usize, f64)>| {
        let vals = tape.val(v);
        let (idx, best) = vals
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
        out.push((v, idx, best));
    };

    let mut fwd_cands: Vec<(Var, usize, f64)> = Vec::new();
    let mut inv_cands: Vec<(Var, usize, f64)> = Vec::new();
    let x0_vals = tape.val(x_at_z).to_vec();
    for _ in 0..cfg.n_directions {
        let nu = unit_direction(&mut rng, d);
        let z1 = shifted(z, &nu, cfg.step);
        let z1c = tape.constant(z1.iter().cloned().collect());
        let (x1, _) = stack.forward_taped(tape, params, z1c, n)?;
        let r = rate_rows(tape, x_at_z, x1);
        push_best(tape, r, &mut fwd_cands);

        if cfg.bidirectional {
            let nu_inv = unit_direction(&mut rng, d);
            let y0 = tape.constant(x0_vals.clone());
            let mut y1_vals = x0_vals.clone();
            for row in y1_vals.chunks_mut(d) {
                for (v, dir) in row.iter_mut().zip(&nu_inv) {
                    *v += cfg.step * dir;
                }
            }
            let y1 = tape.constant(y1_vals);
            let (z0b, _) = stack.inverse_taped(tape, params, y0, n)?;
            let (z1b, _) = stack.inverse_taped(tape, params, y1, n)?;
            let r = rate_rows(tape, z0b, z1b);
            push_best(tape, r, &mut inv_cands);
        }
    }

    let pick = |tape: &mut Tape, cands: &[(Var, usize, f64)]| -> Var {
        let best = cands
            .iter()
            .max_by(|a, b| a.2.partial_cmp(&b.2).expect("finite estimates"))
            .expect("at least one direction");
        tape.gather(best.0, std::sync::Arc::new(vec![best.1]))
    };
    let fwd = pick(tape, &fwd_cands);
    if cfg.bidirectional {
        let inv = pick(tape, &inv_cands);
        Ok(tape.add(fwd, inv))
    } else {
        Ok(fwd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{CouplingKind, FlowConfig};

    fn identity_stack(d: usize) -> FlowStack {
        let mut cfg = FlowConfig::new(d, 1, 2, CouplingKind::Affine);
        cfg.hidden_width = 4;
        FlowStack::build(&cfg, 0).unwrap()
    }

    #[test]
    fn identity_stack_estimates_one_both_directions() {
        let fs = identity_stack(4);
        let batch = Array2::from_shape_fn((8, 4), |(i, j)| (i as f64 - 3.0) * 0.3 + j as f64 * 0.1);
        let cfg = FdPenaltyConfig::default();
        let est = fd_lipschitz_penalty(&fs, &batch, &cfg, 1).unwrap();
        assert!((est.forward - 1.0).abs() < 1e-9, "forward {}", est.forward);
        assert!((est.inverse.unwrap() - 1.0).abs() < 1e-9);
        assert!((est.total() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn pinned_scale_two_gives_two_forward_half_inverse() {
        // One affine coupling scaling the odd dims by 2; probe along a
        // transformed axis only.
        let mut cfg = FlowConfig::new(2, 1, 1, CouplingKind::Affine);
        cfg.hidden_width = 4;
        cfg.hidden_layers = 1;
        let mut fs = FlowStack::build(&cfg, 0).unwrap();
        let s_raw = 3.0 * (2.0f64.ln() / 3.0).atanh();
        let range = fs.params().segment_range("layer0.layer1.bias").unwrap();
        let vals = fs.params_mut().values_mut();
        for v in vals.iter_mut() {
            *v = 0.0;
        }
        vals[range.start] = s_raw;

        let batch = Array2::zeros((1, 2));
        let eps = 1e-4;
        // Probe manually along the transformed axis (dim 1).
        let (x0, _) = fs.forward(&batch).unwrap();
        let mut shifted = batch.clone();
        shifted[[0, 1]] += eps;
        let (x1, _) = fs.forward(&shifted).unwrap();
        let fwd: f64 = x0
            .iter()
            .zip(x1.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / eps;
        assert!((fwd - 2.0).abs() < 1e-9, "forward rate {fwd}");

        let (z0, _) = fs.inverse(&x0).unwrap();
        let mut yshift = x0.clone();
        yshift[[0, 1]] += eps;
        let (z1, _) = fs.inverse(&yshift).unwrap();
        let inv: f64 = z0
            .iter()
            .zip(z1.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / eps;
        assert!((inv - 0.5).abs() < 1e-9, "inverse rate {inv}");
    }

    #[test]
    fn estimate_tracks_sup_gradient_of_cubic_map() {
        // Harness transform t(x) = x^3 per dim, batch on a grid of [-2, 2];
        // the FD estimate should approach sup |3x^2| over the grid.
        let grid: Vec<f64> = (0..81).map(|i| -2.0 + 4.0 * i as f64 / 80.0).collect();
        let eps = 1e-4;
        let cube = |x: f64| x * x * x;
        let mut best = f64::NEG_INFINITY;
        for &x in &grid {
            let rate = ((cube(x + eps) - cube(x)) / eps).abs();
            best = best.max(rate);
        }
        let sup: f64 = grid.iter().map(|&x| 3.0 * x * x).fold(f64::NEG_INFINITY, f64::max);
        assert!((best - sup).abs() / sup < 0.05, "estimate {best} vs sup {sup}");
    }

    #[test]
    fn estimate_tracks_dense_grid_spectral_norm_of_flow() {
        // For a random 2-D flow, the penalty estimate with many directions
        // should approach the dense-grid sup of the Jacobian spectral norm.
        let mut cfg_flow = FlowConfig::new(2, 2, 2, CouplingKind::Affine);
        cfg_flow.hidden_width = 8;
        let mut fs = FlowStack::build(&cfg_flow, 2).unwrap();
        fs.randomize_params(13, 0.7);

        let side = 21;
        let mut grid = Array2::zeros((side * side, 2));
        for i in 0..side {
            for j in 0..side {
                grid[[i * side + j, 0]] = -2.0 + 4.0 * i as f64 / (side - 1) as f64;
                grid[[i * side + j, 1]] = -2.0 + 4.0 * j as f64 / (side - 1) as f64;
            }
        }
        // Spectral norm of the FD Jacobian at every grid point.
        let h = 1e-5;
        let mut sup = f64::NEG_INFINITY;
        let (x0, _) = fs.forward(&grid).unwrap();
        for r in 0..side * side {
            let mut jac = [[0.0f64; 2]; 2];
            for j in 0..2 {
                let mut gp = grid.clone();
                gp[[r, j]] += h;
                let (xp, _) = fs.forward(&gp).unwrap();
                for i in 0..2 {
                    jac[i][j] = (xp[[r, i]] - x0[[r, i]]) / h;
                }
            }
            // Closed-form largest singular value of a 2x2 matrix.
            let a2 = jac[0][0] * jac[0][0] + jac[0][1] * jac[0][1] + jac[1][0] * jac[1][0]
                + jac[1][1] * jac[1][1];
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            let s = ((a2 + 2.0 * det.abs()).sqrt() + (a2 - 2.0 * det.abs()).max(0.0).sqrt()) / 2.0;
            sup = sup.max(s);
        }

        let cfg = FdPenaltyConfig { step: 1e-5, n_directions: 64, weight: 1.0, bidirectional: false };
        let est = fd_lipschitz_penalty(&fs, &grid, &cfg, 4).unwrap();
        assert!(
            (est.forward - sup).abs() / sup < 0.05,
            "estimate {} vs dense-grid sup {}",
            est.forward,
            sup
        );
    }

    #[test]
    fn taped_penalty_matches_plain_estimate() {
        let mut cfg_flow = FlowConfig::new(4, 2, 2, CouplingKind::Affine);
        cfg_flow.hidden_width = 8;
        let mut fs = FlowStack::build(&cfg_flow, 3).unwrap();
        fs.randomize_params(7, 0.5);
        let batch = Array2::from_shape_fn((6, 4), |(i, j)| 0.2 * i as f64 - 0.3 * j as f64);
        let cfg = FdPenaltyConfig { step: 1e-3, n_directions: 2, weight: 1.0, bidirectional: true };

        let plain = fd_lipschitz_penalty(&fs, &batch, &cfg, 99).unwrap();

        let mut tape = Tape::new();
        let p = tape.constant(fs.params().values().to_vec());
        let zc = tape.constant(batch.iter().cloned().collect());
        let (x_at_z, _) = fs.forward_taped(&mut tape, p, zc, 6).unwrap();
        let pen = fd_penalty_taped(&fs, &mut tape, p, &batch, x_at_z, &cfg, 99).unwrap();
        assert!((tape.val(pen)[0] - plain.total()).abs() < 1e-9);
    }

    #[test]
    fn taped_penalty_gradient_matches_finite_differences() {
        let mut cfg_flow = FlowConfig::new(2, 1, 2, CouplingKind::Affine);
        cfg_flow.hidden_width = 4;
        let mut fs = FlowStack::build(&cfg_flow, 1).unwrap();
        fs.randomize_params(11, 0.4);
        let batch = Array2::from_shape_fn((4, 2), |(i, j)| 0.3 * i as f64 - 0.2 * j as f64);
        let cfg = FdPenaltyConfig { step: 1e-3, n_directions: 1, weight: 1.0, bidirectional: true };

        // The taped penalty detaches the inverse-side probe points (they are
        // the forward images under the *current* parameters), so the FD
        // oracle must hold them fixed at the unperturbed images as well.
        let (x0_fixed, _) = fs.forward(&batch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nu = unit_direction(&mut rng, 2);
        let nu_inv = unit_direction(&mut rng, 2);
        let eval = |fsx: &FlowStack| -> f64 {
            let (a, _) = fsx.forward(&batch).unwrap();
            let (b, _) = fsx.forward(&shifted(&batch, &nu, cfg.step)).unwrap();
            let fwd = max_row_rate(&a, &b, cfg.step);
            let (za, _) = fsx.inverse(&x0_fixed).unwrap();
            let (zb, _) = fsx.inverse(&shifted(&x0_fixed, &nu_inv, cfg.step)).unwrap();
            fwd + max_row_rate(&za, &zb, cfg.step)
        };

        let mut tape = Tape::new();
        let p = tape.param(fs.params().values().to_vec());
        let zc = tape.constant(batch.iter().cloned().collect());
        let (x_at_z, _) = fs.forward_taped(&mut tape, p, zc, 4).unwrap();
        let pen = fd_penalty_taped(&fs, &mut tape, p, &batch, x_at_z, &cfg, 5).unwrap();
        let grads = tape.backward(pen).unwrap();
        let analytic = grads.get(p, fs.params().len());

        let step = 1e-6;
        let mut clone = fs.clone();
        let mut checked = 0;
        for i in 0..fs.params().len() {
            let orig = fs.params().values()[i];
            clone.params_mut().values_mut()[i] = orig + step;
            let fp = eval(&clone);
            clone.params_mut().values_mut()[i] = orig - step;
            let fm = eval(&clone);
            clone.params_mut().values_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[i];
            if numeric.abs() < 1e-10 && a.abs() < 1e-10 {
                continue;
            }
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 2e-3,
                "param {i}: analytic {a} vs numeric {numeric}"
            );
            checked += 1;
        }
        assert!(checked > 0, "no informative parameters checked");
    }
}
