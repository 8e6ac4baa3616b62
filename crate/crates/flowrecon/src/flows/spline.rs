//! Monotone rational-quadratic spline transforms.
//!
//! Each transformed element carries `3*bins - 1` raw parameters: `bins` bin
//! widths, `bins` bin heights, and `bins - 1` interior knot derivatives.
//! Widths and heights go through a softmax (with a minimum bin fraction),
//! derivatives through a shifted softplus, so every raw parameterization
//! yields a strictly monotone spline on `[-B, B]` that matches the identity
//! with unit slope at the boundary knots. Outside the interval the transform
//! is the identity.
//!
//! All-zero raw parameters give exactly the identity map.

use std::sync::Arc;

use crate::diffcore::{softplus, Tape, Var};

/// Smallest bin fraction after the softmax.
const MIN_BIN_FRACTION: f64 = 1e-3;
/// Smallest knot derivative.
const MIN_DERIVATIVE: f64 = 1e-3;

/// Raw parameter count per transformed element.
pub fn params_per_element(bins: usize) -> usize {
    3 * bins - 1
}

/// Shift so that a zero raw derivative parameter maps to slope 1.
fn derivative_shift() -> f64 {
    // min + softplus(c) = 1
    ((1.0 - MIN_DERIVATIVE).exp() - 1.0).ln()
}

/// Scratch knot buffers reused across elements.
pub struct SplineScratch {
    cum_x: Vec<f64>,
    cum_y: Vec<f64>,
    deriv: Vec<f64>,
}

impl SplineScratch {
    pub fn new(bins: usize) -> Self {
        SplineScratch {
            cum_x: vec![0.0; bins + 1],
            cum_y: vec![0.0; bins + 1],
            deriv: vec![0.0; bins + 1],
        }
    }
}

fn fill_knots(raw: &[f64], bins: usize, tail: f64, scratch: &mut SplineScratch) {
    debug_assert_eq!(raw.len(), params_per_element(bins));
    let two_b = 2.0 * tail;
    let softmax_fill = |src: &[f64], cum: &mut [f64]| {
        let mx = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in src {
            z += (v - mx).exp();
        }
        let lo = MIN_BIN_FRACTION;
        let span = 1.0 - bins as f64 * lo;
        cum[0] = -tail;
        let mut acc = 0.0;
        for (k, &v) in src.iter().enumerate() {
            let frac = lo + span * (v - mx).exp() / z;
            acc += frac;
            cum[k + 1] = -tail + two_b * acc;
        }
        cum[bins] = tail;
    };
    softmax_fill(&raw[..bins], &mut scratch.cum_x);
    softmax_fill(&raw[bins..2 * bins], &mut scratch.cum_y);
    let shift = derivative_shift();
    scratch.deriv[0] = 1.0;
    scratch.deriv[bins] = 1.0;
    for k in 1..bins {
        scratch.deriv[k] = MIN_DERIVATIVE + softplus(raw[2 * bins + k - 1] + shift);
    }
}

fn find_bin(cum: &[f64], v: f64) -> usize {
    let bins = cum.len() - 1;
    let mut k = 0;
    while k + 1 < bins && v >= cum[k + 1] {
        k += 1;
    }
    k
}

/// Forward spline at one element: returns `(y, log dy/dx)`.
pub fn spline_forward_one(
    raw: &[f64],
    x: f64,
    bins: usize,
    tail: f64,
    scratch: &mut SplineScratch,
) -> (f64, f64) {
    if !(-tail..tail).contains(&x) {
        return (x, 0.0);
    }
    fill_knots(raw, bins, tail, scratch);
    let k = find_bin(&scratch.cum_x, x);
    let w = scratch.cum_x[k + 1] - scratch.cum_x[k];
    let h = scratch.cum_y[k + 1] - scratch.cum_y[k];
    let s = h / w;
    let d_lo = scratch.deriv[k];
    let d_hi = scratch.deriv[k + 1];
    let theta = (x - scratch.cum_x[k]) / w;
    let tp = theta * (1.0 - theta);
    let denom = s + (d_hi + d_lo - 2.0 * s) * tp;
    let y = scratch.cum_y[k] + h * (s * theta * theta + d_lo * tp) / denom;
    let num = s * s * (d_hi * theta * theta + 2.0 * s * tp + d_lo * (1.0 - theta) * (1.0 - theta));
    (y, num.ln() - 2.0 * denom.ln())
}

/// Inverse spline at one element: returns `(x, log dy/dx at x)`.
pub fn spline_inverse_one(
    raw: &[f64],
    y: f64,
    bins: usize,
    tail: f64,
    scratch: &mut SplineScratch,
) -> (f64, f64) {
    if !(-tail..tail).contains(&y) {
        return (y, 0.0);
    }
    fill_knots(raw, bins, tail, scratch);
    let k = find_bin(&scratch.cum_y, y);
    let w = scratch.cum_x[k + 1] - scratch.cum_x[k];
    let h = scratch.cum_y[k + 1] - scratch.cum_y[k];
    let s = h / w;
    let d_lo = scratch.deriv[k];
    let d_hi = scratch.deriv[k + 1];
    let dy = y - scratch.cum_y[k];
    let gamma = d_hi + d_lo - 2.0 * s;
    let a = h * (s - d_lo) + dy * gamma;
    let b = h * d_lo - dy * gamma;
    let c = -s * dy;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let theta = 2.0 * c / (-b - disc.sqrt());
    let x = scratch.cum_x[k] + theta * w;
    let tp = theta * (1.0 - theta);
    let denom = s + gamma * tp;
    let num = s * s * (d_hi * theta * theta + 2.0 * s * tp + d_lo * (1.0 - theta) * (1.0 - theta));
    (x, num.ln() - 2.0 * denom.ln())
}

/// Batch forward: `raw` is `P x (3*bins-1)` flat, `x` has length `P`.
/// Returns `(y, log_deriv)` of length `P` each.
pub fn spline_forward_batch(raw: &[f64], x: &[f64], bins: usize, tail: f64) -> (Vec<f64>, Vec<f64>) {
    let ppe = params_per_element(bins);
    debug_assert_eq!(raw.len(), x.len() * ppe);
    let mut scratch = SplineScratch::new(bins);
    let mut y = vec![0.0; x.len()];
    let mut ld = vec![0.0; x.len()];
    for (e, &xv) in x.iter().enumerate() {
        let (yv, l) = spline_forward_one(&raw[e * ppe..(e + 1) * ppe], xv, bins, tail, &mut scratch);
        y[e] = yv;
        ld[e] = l;
    }
    (y, ld)
}

/// Batch inverse, mirroring [`spline_forward_batch`].
pub fn spline_inverse_batch(raw: &[f64], y: &[f64], bins: usize, tail: f64) -> (Vec<f64>, Vec<f64>) {
    let ppe = params_per_element(bins);
    debug_assert_eq!(raw.len(), y.len() * ppe);
    let mut scratch = SplineScratch::new(bins);
    let mut x = vec![0.0; y.len()];
    let mut ld = vec![0.0; y.len()];
    for (e, &yv) in y.iter().enumerate() {
        let (xv, l) = spline_inverse_one(&raw[e * ppe..(e + 1) * ppe], yv, bins, tail, &mut scratch);
        x[e] = xv;
        ld[e] = l;
    }
    (x, ld)
}

/// Per-element knot tensors on the tape, shared by the taped forward and
/// inverse paths. All buffers are `P x bins` (or `P x (bins-1)` for raw
/// derivatives) in element-major order.
struct TapedKnots {
    cum_before_x: Var,
    width: Var,
    cum_before_y: Var,
    height: Var,
    deriv: Var,
    bins: usize,
    tail: f64,
    p: usize,
}

/// `raw` is the conditioner output laid out `P x (3*bins-1)` element-major.
fn build_taped_knots(tape: &mut Tape, raw: Var, p: usize, bins: usize, tail: f64) -> TapedKnots {
    let ppe = params_per_element(bins);
    debug_assert_eq!(tape.val(raw).len(), p * ppe);
    let gather_block = |tape: &mut Tape, offset: usize, count: usize| -> Var {
        let mut idx = Vec::with_capacity(p * count);
        for e in 0..p {
            for q in 0..count {
                idx.push(e * ppe + offset + q);
            }
        }
        tape.gather(raw, Arc::new(idx))
    };
    let w_raw = gather_block(tape, 0, bins);
    let h_raw = gather_block(tape, bins, bins);
    let d_raw = gather_block(tape, 2 * bins, bins - 1);

    let span = 1.0 - bins as f64 * MIN_BIN_FRACTION;
    let two_b = 2.0 * tail;
    let frac = |tape: &mut Tape, v: Var| -> (Var, Var) {
        let sm = tape.softmax_chunks(v, bins);
        let sm = tape.scale(sm, span);
        let f = tape.add_const(sm, MIN_BIN_FRACTION);
        let cum = tape.cumsum_chunks(f, bins);
        let cum_before = tape.sub(cum, f);
        let width = tape.scale(f, two_b);
        let cum_before = tape.scale(cum_before, two_b);
        (cum_before, width)
    };
    let (cum_before_x, width) = frac(tape, w_raw);
    let (cum_before_y, height) = frac(tape, h_raw);
    let shifted = tape.add_const(d_raw, derivative_shift());
    let sp = tape.softplus(shifted);
    let deriv = tape.add_const(sp, MIN_DERIVATIVE);
    TapedKnots { cum_before_x, width, cum_before_y, height, deriv, bins, tail, p }
}

struct BinSelection {
    x_lo: Var,
    width: Var,
    y_lo: Var,
    height: Var,
    d_lo: Var,
    d_hi: Var,
    in_range: Arc<Vec<f64>>,
}

/// Gathers per-element bin quantities given eagerly computed bin indices.
fn select_bins(tape: &mut Tape, knots: &TapedKnots, bin_idx: &[usize], in_range: Arc<Vec<f64>>) -> BinSelection {
    let (p, bins, tail) = (knots.p, knots.bins, knots.tail);
    let idx_bin: Arc<Vec<usize>> =
        Arc::new(bin_idx.iter().enumerate().map(|(e, &k)| e * bins + k).collect());
    let x_cb = tape.gather(knots.cum_before_x, Arc::clone(&idx_bin));
    let x_lo = tape.add_const(x_cb, -tail);
    let width = tape.gather(knots.width, Arc::clone(&idx_bin));
    let y_cb = tape.gather(knots.cum_before_y, Arc::clone(&idx_bin));
    let y_lo = tape.add_const(y_cb, -tail);
    let height = tape.gather(knots.height, idx_bin);

    // Boundary derivatives are pinned to 1; interior ones come from the
    // derivative buffer. The clamped gather index is masked out by Select.
    let ones = tape.constant(vec![1.0; p]);
    let lo_mask: Arc<Vec<f64>> = Arc::new(
        bin_idx.iter().map(|&k| if k == 0 { 1.0 } else { 0.0 }).collect(),
    );
    let hi_mask: Arc<Vec<f64>> = Arc::new(
        bin_idx.iter().map(|&k| if k == bins - 1 { 1.0 } else { 0.0 }).collect(),
    );
    let lo_idx: Arc<Vec<usize>> = Arc::new(
        bin_idx
            .iter()
            .enumerate()
            .map(|(e, &k)| e * (bins - 1) + k.saturating_sub(1))
            .collect(),
    );
    let hi_idx: Arc<Vec<usize>> = Arc::new(
        bin_idx
            .iter()
            .enumerate()
            .map(|(e, &k)| e * (bins - 1) + k.min(bins - 2))
            .collect(),
    );
    let d_lo_raw = tape.gather(knots.deriv, lo_idx);
    let d_lo = tape.select(lo_mask, ones, d_lo_raw);
    let d_hi_raw = tape.gather(knots.deriv, hi_idx);
    let d_hi = tape.select(hi_mask, ones, d_hi_raw);
    BinSelection { x_lo, width, y_lo, height, d_lo, d_hi, in_range }
}

/// Rational-quadratic pieces shared by forward and inverse: given theta in
/// [0,1] and the bin selection, returns `(value_inside, log_deriv_inside)`
/// where value is the forward output.
fn rq_from_theta(tape: &mut Tape, sel: &BinSelection, theta: Var) -> (Var, Var) {
    let s = tape.div(sel.height, sel.width);
    let one_m = tape.neg(theta);
    let one_m = tape.add_const(one_m, 1.0);
    let tp = tape.mul(theta, one_m);
    let two_s = tape.scale(s, 2.0);
    let dsum = tape.add(sel.d_hi, sel.d_lo);
    let gamma = tape.sub(dsum, two_s);
    let gtp = tape.mul(gamma, tp);
    let denom = tape.add(s, gtp);

    let th2 = tape.square(theta);
    let sth2 = tape.mul(s, th2);
    let dtp = tape.mul(sel.d_lo, tp);
    let num_y = tape.add(sth2, dtp);
    let hnum = tape.mul(sel.height, num_y);
    let frac = tape.div(hnum, denom);
    let y_in = tape.add(sel.y_lo, frac);

    let om2 = tape.square(one_m);
    let dh_th2 = tape.mul(sel.d_hi, th2);
    let stp2 = tape.mul(two_s, tp);
    let dl_om2 = tape.mul(sel.d_lo, om2);
    let tmp = tape.add(dh_th2, stp2);
    let dnum = tape.add(tmp, dl_om2);
    let s2 = tape.square(s);
    let deriv_num = tape.mul(s2, dnum);
    let ln_num = tape.ln(deriv_num);
    let ln_den = tape.ln(denom);
    let two_ln_den = tape.scale(ln_den, 2.0);
    let log_deriv = tape.sub(ln_num, two_ln_den);
    (y_in, log_deriv)
}

fn masked_outputs(
    tape: &mut Tape,
    sel: &BinSelection,
    inner_val: Var,
    inner_ld: Var,
    passthrough: Var,
) -> (Var, Var) {
    let p = tape.val(passthrough).len();
    let zeros = tape.constant(vec![0.0; p]);
    let out = tape.select(Arc::clone(&sel.in_range), inner_val, passthrough);
    let ld = tape.select(Arc::clone(&sel.in_range), inner_ld, zeros);
    (out, ld)
}

/// Taped forward spline over `P` elements. `raw` is `P x (3*bins-1)`,
/// `x` has length `P`. Returns `(y, log_deriv)` nodes of length `P`.
pub fn spline_forward_taped(
    tape: &mut Tape,
    raw: Var,
    x: Var,
    p: usize,
    bins: usize,
    tail: f64,
) -> (Var, Var) {
    let knots = build_taped_knots(tape, raw, p, bins, tail);
    let xv = tape.val(x).to_vec();
    let margin = 1e-12;
    let in_range: Arc<Vec<f64>> = Arc::new(
        xv.iter().map(|&v| if v > -tail && v < tail { 1.0 } else { 0.0 }).collect(),
    );
    // Bin indices from eager knot values.
    let cbx = tape.val(knots.cum_before_x).to_vec();
    let bin_idx: Vec<usize> = xv
        .iter()
        .enumerate()
        .map(|(e, &v)| {
            let mut k = 0;
            // cum_before_x[e*bins + k] is the knot position k relative to -B.
            while k + 1 < bins && v + tail >= cbx[e * bins + k + 1] {
                k += 1;
            }
            k
        })
        .collect();
    let sel = select_bins(tape, &knots, &bin_idx, in_range);
    let xc = tape.clamp(x, -tail + margin, tail - margin);
    let dx = tape.sub(xc, sel.x_lo);
    let theta = tape.div(dx, sel.width);
    let (y_in, ld_in) = rq_from_theta(tape, &sel, theta);
    masked_outputs(tape, &sel, y_in, ld_in, x)
}

/// Taped inverse spline; returns `(x, log_deriv_of_forward_at_x)`.
pub fn spline_inverse_taped(
    tape: &mut Tape,
    raw: Var,
    y: Var,
    p: usize,
    bins: usize,
    tail: f64,
) -> (Var, Var) {
    let knots = build_taped_knots(tape, raw, p, bins, tail);
    let yv = tape.val(y).to_vec();
    let margin = 1e-12;
    let in_range: Arc<Vec<f64>> = Arc::new(
        yv.iter().map(|&v| if v > -tail && v < tail { 1.0 } else { 0.0 }).collect(),
    );
    let cby = tape.val(knots.cum_before_y).to_vec();
    let bin_idx: Vec<usize> = yv
        .iter()
        .enumerate()
        .map(|(e, &v)| {
            let mut k = 0;
            while k + 1 < bins && v + tail >= cby[e * bins + k + 1] {
                k += 1;
            }
            k
        })
        .collect();
    let sel = select_bins(tape, &knots, &bin_idx, in_range);

    let yc = tape.clamp(y, -tail + margin, tail - margin);
    let dy = tape.sub(yc, sel.y_lo);
    let s = tape.div(sel.height, sel.width);
    let two_s = tape.scale(s, 2.0);
    let dsum = tape.add(sel.d_hi, sel.d_lo);
    let gamma = tape.sub(dsum, two_s);

    // theta solves a quadratic; taking the stable root keeps it in [0,1].
    let smd = tape.sub(s, sel.d_lo);
    let hsmd = tape.mul(sel.height, smd);
    let dyg = tape.mul(dy, gamma);
    let coef_a = tape.add(hsmd, dyg);
    let hd = tape.mul(sel.height, sel.d_lo);
    let coef_b = tape.sub(hd, dyg);
    let sdy = tape.mul(s, dy);
    let coef_c = tape.neg(sdy);

    let b2 = tape.square(coef_b);
    let ac = tape.mul(coef_a, coef_c);
    let four_ac = tape.scale(ac, 4.0);
    let disc = tape.sub(b2, four_ac);
    let disc = tape.clamp(disc, 0.0, f64::INFINITY);
    let root = tape.sqrt(disc);
    let neg_b = tape.neg(coef_b);
    let denom_q = tape.sub(neg_b, root);
    let two_c = tape.scale(coef_c, 2.0);
    let theta = tape.div(two_c, denom_q);

    let tw = tape.mul(theta, sel.width);
    let x_in = tape.add(sel.x_lo, tw);
    let (_, ld_in) = rq_from_theta(tape, &sel, theta);
    masked_outputs(tape, &sel, x_in, ld_in, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const BINS: usize = 8;
    const TAIL: f64 = 3.0;

    fn random_raw(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
        (0..p * params_per_element(BINS)).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
    }

    #[test]
    fn zero_raw_params_give_identity() {
        let raw = vec![0.0; params_per_element(BINS)];
        let mut scratch = SplineScratch::new(BINS);
        for &x in &[-2.9, -1.0, 0.0, 0.4, 2.5] {
            let (y, ld) = spline_forward_one(&raw, x, BINS, TAIL, &mut scratch);
            assert!((y - x).abs() < 1e-12, "x={x}, y={y}");
            assert!(ld.abs() < 1e-12, "log deriv {ld}");
        }
    }

    #[test]
    fn outputs_are_sorted_for_sorted_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = random_raw(&mut rng, 1);
        let mut scratch = SplineScratch::new(BINS);
        let xs: Vec<f64> = (0..200).map(|i| -3.5 + 7.0 * i as f64 / 199.0).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| spline_forward_one(&raw, x, BINS, TAIL, &mut scratch).0)
            .collect();
        for w in ys.windows(2) {
            assert!(w[1] > w[0], "not strictly increasing: {} then {}", w[0], w[1]);
        }
    }

    #[test]
    fn forward_then_inverse_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = 64;
        let raw = random_raw(&mut rng, p);
        let x: Vec<f64> = (0..p).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
        let (y, ld_f) = spline_forward_batch(&raw, &x, BINS, TAIL);
        let (x2, ld_b) = spline_inverse_batch(&raw, &y, BINS, TAIL);
        for e in 0..p {
            assert!((x[e] - x2[e]).abs() < 1e-10, "roundtrip {} vs {}", x[e], x2[e]);
            assert!((ld_f[e] - ld_b[e]).abs() < 1e-9);
        }
    }

    #[test]
    fn log_derivative_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let raw = random_raw(&mut rng, 1);
        let mut scratch = SplineScratch::new(BINS);
        for i in 0..20 {
            let x = -2.7 + 5.4 * i as f64 / 19.0;
            let (_, ld) = spline_forward_one(&raw, x, BINS, TAIL, &mut scratch);
            let h = 1e-6;
            let (yp, _) = spline_forward_one(&raw, x + h, BINS, TAIL, &mut scratch);
            let (ym, _) = spline_forward_one(&raw, x - h, BINS, TAIL, &mut scratch);
            let num = ((yp - ym) / (2.0 * h)).ln();
            assert!(
                (ld - num).abs() / num.abs().max(1e-8) < 1e-4,
                "x={x}: analytic {ld} vs numeric {num}"
            );
        }
    }

    #[test]
    fn taped_forward_matches_plain_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = 32;
        let raw = random_raw(&mut rng, p);
        let x: Vec<f64> = (0..p).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
        let (y_plain, ld_plain) = spline_forward_batch(&raw, &x, BINS, TAIL);

        let mut tape = Tape::new();
        let raw_v = tape.param(raw.clone());
        let x_v = tape.constant(x.clone());
        let (y_v, ld_v) = spline_forward_taped(&mut tape, raw_v, x_v, p, BINS, TAIL);
        for e in 0..p {
            assert!((tape.val(y_v)[e] - y_plain[e]).abs() < 1e-11);
            assert!((tape.val(ld_v)[e] - ld_plain[e]).abs() < 1e-10);
        }
    }

    #[test]
    fn taped_inverse_matches_plain_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = 32;
        let raw = random_raw(&mut rng, p);
        let y: Vec<f64> = (0..p).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect();
        let (x_plain, ld_plain) = spline_inverse_batch(&raw, &y, BINS, TAIL);

        let mut tape = Tape::new();
        let raw_v = tape.param(raw.clone());
        let y_v = tape.constant(y.clone());
        let (x_v, ld_v) = spline_inverse_taped(&mut tape, raw_v, y_v, p, BINS, TAIL);
        for e in 0..p {
            assert!((tape.val(x_v)[e] - x_plain[e]).abs() < 1e-11);
            assert!((tape.val(ld_v)[e] - ld_plain[e]).abs() < 1e-10);
        }
    }

    #[test]
    fn taped_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = 4;
        let raw = random_raw(&mut rng, p);
        let x: Vec<f64> = vec![-1.3, 0.2, 0.9, 2.1];

        // Loss = sum(y) + sum(log_deriv): exercises both outputs.
        let eval = |raw_vals: &[f64]| -> f64 {
            let (y, ld) = spline_forward_batch(raw_vals, &x, BINS, TAIL);
            y.iter().sum::<f64>() + ld.iter().sum::<f64>()
        };
        let mut tape = Tape::new();
        let raw_v = tape.param(raw.clone());
        let x_v = tape.constant(x.clone());
        let (y_v, ld_v) = spline_forward_taped(&mut tape, raw_v, x_v, p, BINS, TAIL);
        let sy = tape.sum_all(y_v);
        let sl = tape.sum_all(ld_v);
        let loss = tape.add(sy, sl);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(raw_v, raw.len());

        let step = 1e-6;
        let mut vals = raw.clone();
        for i in 0..vals.len() {
            let orig = vals[i];
            vals[i] = orig + step;
            let fp = eval(&vals);
            vals[i] = orig - step;
            let fm = eval(&vals);
            vals[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-4,
                "raw param {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}
