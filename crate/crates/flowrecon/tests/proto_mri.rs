//! Scratch prototype for tuning the MRI acceptance configuration. Deleted
//! before release.

use std::time::Instant;

use flowrecon::flows::{CouplingKind, FlowConfig};
use flowrecon::forward_ops::{
    make_cartesian_mask, make_phantom, masked_fft_forward, zero_filled_recon, ForwardOperator,
    PhantomKind,
};
use flowrecon::metrics::{posterior_stats, psnr};
use flowrecon::sampling::Scheme;
use flowrecon::variational::{fit_posterior, posterior_sample, InverseProblem, Regularizer, TrainConfig};
use num_complex::Complex64;

fn run_mri(
    accel: f64,
    lambda: f64,
    steps: usize,
    lr: f64,
    hidden: usize,
    depth_steps: usize,
    nonneg: bool,
    fd: bool,
) -> (f64, f64, f64) {
    let truth = make_phantom(PhantomKind::Ring { asymmetry: 0.0 }, 32).unwrap();
    let mask = make_cartesian_mask(32, 32, accel, 0.08, 5).unwrap();
    let dc: f64 = truth.iter().sum::<f64>() / 32.0; // c * sqrt(H*W) for constant-ish scale
    let sigma = 0.01 * dc;
    let meas = masked_fft_forward(&truth, &mask, sigma, Some(9)).unwrap();
    let zf = zero_filled_recon(&meas, &mask).unwrap();
    let peak = truth.iter().cloned().fold(0.0, f64::max);
    let psnr_zf = psnr(&truth, &zf, peak).unwrap();

    let mut problem = InverseProblem::new(ForwardOperator::masked_fft(mask), meas, sigma).unwrap();
    problem.regularizer = Regularizer::Tv;
    problem.reg_weight = lambda;
    problem.nonneg = nonneg;
    problem.ground_truth = Some(truth.clone());

    let mut flow = FlowConfig::new(1024, depth_steps, 4, CouplingKind::Affine);
    flow.hidden_width = hidden;
    let mut cfg = TrainConfig::new(flow);
    cfg.steps = steps;
    cfg.batch_size = 16;
    cfg.learning_rate = lr;
    cfg.scheme = Scheme::Lpss;
    cfg.seed = 1;
    if fd {
        cfg.fd_penalty = Some(flowrecon::flows::FdPenaltyConfig {
            step: 1e-3,
            n_directions: 1,
            weight: 1.0,
            bidirectional: true,
        });
    }
    let t0 = Instant::now();
    let (model, history) = fit_posterior(&problem, &cfg).unwrap();
    let train_time = t0.elapsed().as_secs_f64();

    let ps = posterior_sample(&model, &problem, 512, Scheme::Lpss, 33).unwrap();
    let stats = posterior_stats(&ps, Some(&truth)).unwrap();
    let psnr_mean = psnr(&truth, &stats.mean_image, peak).unwrap();
    println!(
        "accel {accel} lambda {lambda} steps {steps} lr {lr} hidden {hidden} depth {} nonneg {nonneg} fd {fd}: \
         psnr_zf {psnr_zf:.2} psnr_mean {psnr_mean:.2} mean_std {:.4} train {:.1}s last_total {:.1}",
        depth_steps * 4,
        stats.mean_of_std,
        train_time,
        history.last().unwrap().total
    );
    let _ = Complex64::new(0.0, 0.0);
    (psnr_zf, psnr_mean, stats.mean_of_std)
}

#[test]
#[ignore]
fn proto() {
    run_mri(4.0, 3.0, 2500, 2e-3, 48, 3, false, false);
    run_mri(4.0, 5.0, 2500, 2e-3, 48, 3, false, false);
    run_mri(4.0, 5.0, 2500, 2e-3, 48, 3, true, false);
    run_mri(4.0, 5.0, 2000, 5e-3, 48, 3, false, true);
}
