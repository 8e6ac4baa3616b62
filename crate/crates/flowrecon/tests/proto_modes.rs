//! Scratch prototypes for the multi-modality and Table-1-analogue
//! configurations. Deleted before release.

use std::time::Instant;

use flowrecon::flows::{CouplingKind, FdPenaltyConfig, FlowConfig};
use flowrecon::forward_ops::{image_energy_density, make_phantom, ForwardOperator, PhantomKind};
use flowrecon::metrics::{mode_cluster, prdc, PosteriorSamples};
use flowrecon::sampling::Scheme;
use flowrecon::variational::{fit_posterior, posterior_sample, InverseProblem, TrainConfig};

fn two_blob_problem(size: usize) -> InverseProblem {
    let img = make_phantom(PhantomKind::TwoBlob, size).unwrap();
    let density = image_energy_density(&img).unwrap();
    InverseProblem::new(ForwardOperator::image_energy(density), Vec::new(), 1.0).unwrap()
}

fn minor_mode_fraction(ps: &PosteriorSamples, seed: u64) -> f64 {
    let clustering = mode_cluster(ps, 2, seed, None).unwrap();
    let c0 = clustering.labels.iter().filter(|&&l| l == 0).count() as f64;
    let n = ps.n() as f64;
    (c0 / n).min(1.0 - c0 / n)
}

#[test]
#[ignore]
fn proto_modes() {
    let problem = two_blob_problem(16);
    for seed in 0..5u64 {
        let mut flow = FlowConfig::new(2, 2, 2, CouplingKind::Affine);
        flow.hidden_width = 16;
        let mut cfg = TrainConfig::new(flow);
        cfg.steps = 1500;
        cfg.batch_size = 64;
        cfg.learning_rate = 5e-3;
        cfg.scheme = Scheme::Lpss;
        cfg.seed = seed;
        let t0 = Instant::now();
        let (m1, _) = fit_posterior(&problem, &cfg).unwrap();
        let ps1 = posterior_sample(&m1, &problem, 10_000, Scheme::Srs, seed ^ 0xaa).unwrap();
        let f1 = minor_mode_fraction(&ps1, seed);

        cfg.stages = 2;
        cfg.stage_steps = Some(1500);
        let (m2, _) = fit_posterior(&problem, &cfg).unwrap();
        let ps2 = posterior_sample(&m2, &problem, 10_000, Scheme::Srs, seed ^ 0xbb).unwrap();
        let f2 = minor_mode_fraction(&ps2, seed);
        println!(
            "seed {seed}: C1 minor {f1:.4}  C2 minor {f2:.4}  betas {:?}  ({:.1}s)",
            m2.betas(),
            t0.elapsed().as_secs_f64()
        );
    }
}

#[test]
#[ignore]
fn proto_modes_1d() {
    use flowrecon::boosting::{
        fit_new_component, update_weight, BoostedFlow, PosteriorObjective, StageConfig,
        WeightUpdateConfig,
    };
    use flowrecon::diffcore::{adam_step, AdamState, Tape, Var};
    use flowrecon::flows::FlowStack;
    use flowrecon::sampling;
    use flowrecon::Result;

    struct Bimodal1d {
        mu: f64,
        sigma: f64,
        major_weight: f64,
    }
    impl PosteriorObjective for Bimodal1d {
        fn neg_log_post_taped(&self, tape: &mut Tape, x: Var, _n: usize) -> Result<Var> {
            let inv2s2 = 1.0 / (2.0 * self.sigma * self.sigma);
            let l = tape.add_const(x, self.mu);
            let l2 = tape.square(l);
            let lq = tape.scale(l2, -inv2s2);
            let lq = tape.add_const(lq, (1.0 - self.major_weight).ln());
            let r = tape.add_const(x, -self.mu);
            let r2 = tape.square(r);
            let rq = tape.scale(r2, -inv2s2);
            let rq = tape.add_const(rq, self.major_weight.ln());
            let lse = tape.log_sum_exp(&[lq, rq]);
            Ok(tape.neg(lse))
        }
    }

    let target = Bimodal1d { mu: 3.0, sigma: 0.5, major_weight: 0.65 };
    for seed in 0..5u64 {
        let flow_cfg = FlowConfig::new(1, 1, 2, CouplingKind::Affine);
        let mut stack = FlowStack::build(&flow_cfg, seed).unwrap();
        stack.randomize_params(seed.wrapping_add(17), 0.4);
        let mut opt = AdamState::new(stack.params().len(), 0.05).unwrap();
        for step in 0..600 {
            let design = sampling::srs(64, 1, seed * 100_000 + step).unwrap();
            let z = sampling::to_gaussian(&design);
            let mut tape = Tape::new();
            let p = tape.param(stack.params().values().to_vec());
            let zc = tape.constant(z.points.iter().cloned().collect());
            let (x, logdet) = stack.forward_taped(&mut tape, p, zc, 64).unwrap();
            let nlp = target.neg_log_post_taped(&mut tape, x, 64).unwrap();
            let fid = tape.mean_all(nlp);
            let ent = tape.mean_all(logdet);
            let neg_ent = tape.neg(ent);
            let loss = tape.add(fid, neg_ent);
            let grads = tape.backward(loss).unwrap();
            let g = stack.params().with_values(grads.get(p, stack.params().len())).unwrap();
            adam_step(&mut opt, stack.params_mut(), &g).unwrap();
        }
        println!("  stage1 params: {:?}", stack.params().values());
        let mut bf = BoostedFlow::new(stack);
        let design = sampling::srs(10_000, 1, seed ^ 0x77).unwrap();
        let s1 = bf.mixture_sample(&design, seed ^ 0x78).unwrap();
        let ps1 = PosteriorSamples::new(s1);
        let f1 = minor_mode_fraction(&ps1, seed);

        let stage = StageConfig {
            steps: 1000,
            batch_size: 64,
            learning_rate: 0.05,
            scheme: Scheme::Srs,
            grouping: None,
            seed: seed ^ 0xface,
            fd_penalty: None,
        };
        fit_new_component(&mut bf, &target, &stage).unwrap();
        let wu = WeightUpdateConfig {
            step_size: 0.05,
            tolerance: 1e-4,
            max_iters: 40,
            mc_samples: 512,
            seed: seed ^ 0xbeef,
        };
        update_weight(&mut bf, &target, &wu).unwrap();
        let s2 = bf.mixture_sample(&design, seed ^ 0x79).unwrap();
        let ps2 = PosteriorSamples::new(s2);
        let f2 = minor_mode_fraction(&ps2, seed);
        println!("seed {seed}: C1 minor {f1:.4}  C2 minor {f2:.4}  beta {:.3}", bf.betas()[1]);
    }
}

#[test]
#[ignore]
fn proto_table1() {
    let img = make_phantom(PhantomKind::TwoBlob, 32).unwrap();
    let density = image_energy_density(&img).unwrap();
    let real = density.grid_sample(1000, 999);
    let problem =
        InverseProblem::new(ForwardOperator::image_energy(density), Vec::new(), 1.0).unwrap();

    for seed in 0..5u64 {
        let t0 = Instant::now();
        // Config A: spline + FD penalty + LPSS.
        let mut flow_a = FlowConfig::new(2, 2, 2, CouplingKind::default_spline());
        flow_a.hidden_width = 16;
        let mut cfg_a = TrainConfig::new(flow_a);
        cfg_a.steps = 4000;
        cfg_a.batch_size = 64;
        cfg_a.learning_rate = 2e-3;
        cfg_a.scheme = Scheme::Lpss;
        cfg_a.fd_penalty = Some(FdPenaltyConfig { step: 1e-3, n_directions: 1, weight: 0.01, bidirectional: true });
        cfg_a.seed = seed;
        let (ma, _) = fit_posterior(&problem, &cfg_a).unwrap();
        let pa = posterior_sample(&ma, &problem, 1000, Scheme::Lpss, seed ^ 0x11).unwrap();
        let ra = prdc(&real, &pa.samples, 5).unwrap();

        // Config B: affine + SRS, no penalty.
        let mut flow_b = FlowConfig::new(2, 2, 2, CouplingKind::Affine);
        flow_b.hidden_width = 16;
        let mut cfg_b = TrainConfig::new(flow_b);
        cfg_b.steps = 4000;
        cfg_b.batch_size = 64;
        cfg_b.learning_rate = 2e-3;
        cfg_b.scheme = Scheme::Srs;
        cfg_b.seed = seed;
        let (mb, _) = fit_posterior(&problem, &cfg_b).unwrap();
        let pb = posterior_sample(&mb, &problem, 1000, Scheme::Srs, seed ^ 0x22).unwrap();
        let rb = prdc(&real, &pb.samples, 5).unwrap();

        println!(
            "seed {seed}: A(spline/fd/lpss) d {:.3} c {:.3} | B(affine/srs) d {:.3} c {:.3} ({:.0}s)",
            ra.density, ra.coverage, rb.density, rb.coverage, t0.elapsed().as_secs_f64()
        );
    }
}
