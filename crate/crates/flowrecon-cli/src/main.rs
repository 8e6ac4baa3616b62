//! Command-line front end: end-to-end posterior reconstruction runs,
//! sampling-scheme variance studies, and design exports.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array2;

use flowrecon::boosting::save_boosted;
use flowrecon::forward_ops::{
    image_energy_density, make_cartesian_mask, make_phantom, masked_fft_forward,
    visibility_forward, zero_filled_recon, ForwardOperator, PhantomKind, SamplingMask, UvTable,
};
use flowrecon::io::{atomic_write, read_pgm, write_csv, write_f32_raw, write_pgm};
use flowrecon::metrics::{
    mc_variance_study, mode_cluster, posterior_stats, prdc, psnr, PosteriorSamples, TestFunction,
};
use flowrecon::sampling::{design, Scheme};
use flowrecon::variational::{
    fit_posterior, posterior_sample, InverseProblem, LossBreakdown, TrainConfig,
};
use flowrecon::{Error, Result};

use config::{ImageSource, KvConfig, RunConfig, Task};

#[derive(Parser)]
#[command(name = "flowrecon", about = "Flow-based posterior reconstruction for inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark described by a flat key=value config file.
    Run {
        /// Path to the config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable the finite-difference stability penalty.
        #[arg(long)]
        no_fd_penalty: bool,
        /// Override the sampling scheme (srs|lhs|maximin-lhs|pss|lpss|sobol).
        #[arg(long)]
        scheme: Option<String>,
        /// Override the coupling kind (affine|spline).
        #[arg(long)]
        coupling: Option<String>,
        /// Override the number of boosting stages.
        #[arg(long)]
        stages: Option<usize>,
    },
    /// Replicate-variance comparison of sampling schemes.
    DesignStudy {
        /// Comma-separated schemes.
        #[arg(long, default_value = "srs,lhs,lpss,sobol")]
        schemes: String,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long, default_value_t = 500)]
        replicates: usize,
        /// Test function: additive | product-sines | constant.
        #[arg(long, default_value = "additive")]
        function: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a unit-hypercube design as CSV.
    ExportDesign {
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("FLOWRECON_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numeric(_) | Error::Training { .. } => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out, no_fd_penalty, scheme, coupling, stages } => {
            let mut kv = KvConfig::load(&config)?;
            if let Some(out) = out {
                kv.set("output_dir", out.display().to_string());
            }
            if no_fd_penalty {
                kv.set("fd.weight", "0".into());
            }
            if let Some(s) = scheme {
                kv.set("sampler.scheme", s);
            }
            if let Some(c) = coupling {
                kv.set("model.coupling", c);
            }
            if let Some(c) = stages {
                kv.set("train.stages", c.to_string());
            }
            let cfg = RunConfig::from_kv(&kv)?;
            run(&cfg)
        }
        Command::DesignStudy { schemes, n, d, replicates, function, seed, out } => {
            let schemes: Result<Vec<Scheme>> =
                schemes.split(',').map(|s| Scheme::parse(s.trim())).collect();
            let g = TestFunction::parse(&function)?;
            let rows = mc_variance_study(&schemes?, g, n, d, replicates, seed, None)?;
            let table: Vec<Vec<f64>> =
                rows.iter().map(|r| vec![r.variance, r.ratio_vs_srs]).collect();
            write_named_csv(
                &out,
                "scheme,variance,ratio_vs_srs",
                rows.iter().map(|r| r.scheme.name().to_string()).collect(),
                &table,
            )?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::ExportDesign { scheme, n, d, seed, out } => {
            let scheme = Scheme::parse(&scheme)?;
            let dsn = design(scheme, n, d, seed, None, 10)?;
            let header: Vec<String> = (0..d).map(|j| format!("dim{j}")).collect();
            let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows: Vec<Vec<f64>> =
                dsn.points.rows().into_iter().map(|r| r.to_vec()).collect();
            write_csv(&out, &header_refs, &rows)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

/// CSV with a leading string column.
fn write_named_csv(
    path: &Path,
    header: &str,
    names: Vec<String>,
    rows: &[Vec<f64>],
) -> Result<()> {
    let mut s = String::from(header);
    s.push('\n');
    for (name, row) in names.iter().zip(rows) {
        s.push_str(name);
        for v in row {
            s.push(',');
            s.push_str(&format!("{v}"));
        }
        s.push('\n');
    }
    atomic_write(path, s.as_bytes())
}

fn load_image(src: &ImageSource) -> Result<Array2<f64>> {
    match src {
        ImageSource::Pgm(path) => read_pgm(path),
        ImageSource::Phantom { kind, size, asymmetry } => {
            let kind = match kind.as_str() {
                "ring" => PhantomKind::Ring { asymmetry: *asymmetry },
                "two_blob" => PhantomKind::TwoBlob,
                "shepp_logan" | "shepp_logan_like" => PhantomKind::SheppLoganLike,
                other => {
                    return Err(Error::config(format!(
                        "invalid field 'problem.phantom': unknown kind '{other}'"
                    )))
                }
            };
            make_phantom(kind, *size)
        }
    }
}

fn train_config(cfg: &RunConfig, latent_dim: usize) -> TrainConfig {
    let mut tc = TrainConfig::new(cfg.flow_config(latent_dim));
    tc.steps = cfg.steps;
    tc.batch_size = cfg.batch_size;
    tc.scheme = cfg.scheme;
    tc.grouping = cfg.grouping_for(latent_dim);
    tc.learning_rate = cfg.learning_rate;
    tc.fd_penalty = cfg.fd_config();
    tc.stages = cfg.stages;
    tc.stage_steps = cfg.stage_steps;
    tc.seed = cfg.seed;
    tc.entropy_weight = cfg.entropy_weight;
    tc
}

fn run(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    atomic_write(&cfg.output_dir.join("config.resolved"), cfg.snapshot().as_bytes())?;
    match cfg.task {
        Task::Density2d => run_density2d(cfg),
        Task::Mri => run_mri(cfg),
        Task::Interferometry => run_interferometry(cfg),
        Task::DesignStudy => {
            let g = TestFunction::parse(&cfg.study_function)?;
            let rows = mc_variance_study(
                &cfg.study_schemes,
                g,
                cfg.study_n,
                cfg.study_d,
                cfg.study_replicates,
                cfg.seed,
                None,
            )?;
            let table: Vec<Vec<f64>> =
                rows.iter().map(|r| vec![r.variance, r.ratio_vs_srs]).collect();
            write_named_csv(
                &cfg.output_dir.join("variance.csv"),
                "scheme,variance,ratio_vs_srs",
                rows.iter().map(|r| r.scheme.name().to_string()).collect(),
                &table,
            )?;
            println!("ok: {}", cfg.output_dir.display());
            Ok(())
        }
    }
}

fn write_history(dir: &Path, history: &[LossBreakdown]) -> Result<()> {
    let rows: Vec<Vec<f64>> = history
        .iter()
        .enumerate()
        .map(|(i, b)| vec![i as f64, b.fidelity, b.prior, b.entropy, b.fd_penalty, b.total])
        .collect();
    write_csv(
        &dir.join("loss_history.csv"),
        &["step", "fidelity", "prior", "entropy", "fd_penalty", "total"],
        &rows,
    )
}

/// Writes a stat map as raw float32 (source of truth) plus a min-max scaled
/// 16-bit PGM with the affine scale recorded in a sidecar.
fn write_map(dir: &Path, name: &str, img: &Array2<f64>) -> Result<()> {
    write_f32_raw(&dir.join(format!("{name}.f32")), img)?;
    let min = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let scaled = img.mapv(|v| {
        if span > 0.0 {
            (((v - min) / span) * 65535.0).round() as u16
        } else {
            0
        }
    });
    let pgm = dir.join(format!("{name}.pgm"));
    write_pgm(&pgm, &scaled, 65535)?;
    let sidecar = format!("{{\"min\": {min}, \"max\": {max}, \"maxval\": 65535}}\n");
    atomic_write(&dir.join(format!("{name}.pgm.json")), sidecar.as_bytes())
}

fn write_sample_artifacts(
    dir: &Path,
    ps: &PosteriorSamples,
    truth: Option<&Array2<f64>>,
) -> Result<Vec<(String, f64)>> {
    write_f32_raw(&dir.join("samples.f32"), &ps.samples)?;
    let stats = posterior_stats(ps, truth)?;
    write_map(dir, "mean", &stats.mean_image)?;
    write_map(dir, "std", &stats.std_image)?;
    let mut rows = vec![("mean_of_std".to_string(), stats.mean_of_std)];
    if let Some(err) = &stats.abs_error_image {
        write_map(dir, "abserr", err)?;
        rows.push(("mean_abs_error".to_string(), stats.mean_abs_error.unwrap()));
    }
    Ok(rows)
}

fn write_metrics(dir: &Path, rows: &[(String, f64)]) -> Result<()> {
    let names: Vec<String> = rows.iter().map(|(n, _)| n.clone()).collect();
    let values: Vec<Vec<f64>> = rows.iter().map(|(_, v)| vec![*v]).collect();
    write_named_csv(&dir.join("metrics.csv"), "metric,value", names, &values)
}

fn run_density2d(cfg: &RunConfig) -> Result<()> {
    let img = load_image(&cfg.image)?;
    let density = image_energy_density(&img)?;
    let sampler = density.clone();
    let mut problem =
        InverseProblem::new(ForwardOperator::image_energy(density), Vec::new(), 1.0)?;
    problem.regularizer = cfg.regularizer;
    problem.reg_weight = cfg.lambda;

    let tc = train_config(cfg, 2);
    let (model, history) = fit_posterior(&problem, &tc)?;
    write_history(&cfg.output_dir, &history)?;
    save_boosted(&model, &cfg.output_dir.join("model.bin"))?;

    let ps = posterior_sample(&model, &problem, cfg.eval_samples, cfg.eval_scheme, cfg.seed ^ 0x5a)?;
    let mut metric_rows = write_sample_artifacts(&cfg.output_dir, &ps, None)?;

    let real = sampler.grid_sample(cfg.real_samples, cfg.seed ^ 0x60d);
    let report = prdc(&real, &ps.samples, cfg.prdc_k)?;
    metric_rows.push(("precision".into(), report.precision));
    metric_rows.push(("recall".into(), report.recall));
    metric_rows.push(("density".into(), report.density));
    metric_rows.push(("coverage".into(), report.coverage));
    write_metrics(&cfg.output_dir, &metric_rows)?;
    println!("ok: {}", cfg.output_dir.display());
    Ok(())
}

fn run_mri(cfg: &RunConfig) -> Result<()> {
    let truth = load_image(&cfg.image)?;
    let (h, w) = truth.dim();
    let mask = match &cfg.mask_csv {
        Some(path) => SamplingMask::load_csv(path, h, w)?,
        None => make_cartesian_mask(h, w, cfg.accel, cfg.center_fraction, cfg.mask_seed)?,
    };
    mask.save_csv(&cfg.output_dir.join("mask.csv"))?;
    let measurement = masked_fft_forward(&truth, &mask, cfg.sigma, Some(cfg.noise_seed))?;
    let zf = zero_filled_recon(&measurement, &mask)?;
    let peak = truth.iter().cloned().fold(0.0, f64::max);
    let psnr_zf = psnr(&truth, &zf, peak)?;

    let mut problem = InverseProblem::new(
        ForwardOperator::masked_fft(mask),
        measurement,
        cfg.sigma,
    )?;
    problem.regularizer = cfg.regularizer;
    problem.reg_weight = cfg.lambda;
    problem.nonneg = cfg.nonneg;
    problem.ground_truth = Some(truth.clone());

    let tc = train_config(cfg, h * w);
    let (model, history) = fit_posterior(&problem, &tc)?;
    write_history(&cfg.output_dir, &history)?;
    save_boosted(&model, &cfg.output_dir.join("model.bin"))?;

    let ps = posterior_sample(&model, &problem, cfg.eval_samples, cfg.eval_scheme, cfg.seed ^ 0x5a)?;
    let mut metric_rows = write_sample_artifacts(&cfg.output_dir, &ps, Some(&truth))?;
    let stats = posterior_stats(&ps, Some(&truth))?;
    let psnr_mean = psnr(&truth, &stats.mean_image, peak)?;
    metric_rows.push(("psnr_mean".into(), psnr_mean));
    metric_rows.push(("psnr_zero_filled".into(), psnr_zf));
    write_metrics(&cfg.output_dir, &metric_rows)?;
    println!("ok: {}", cfg.output_dir.display());
    Ok(())
}

fn run_interferometry(cfg: &RunConfig) -> Result<()> {
    let truth = load_image(&cfg.image)?;
    let (h, w) = truth.dim();
    let uv = match &cfg.uv_csv {
        Some(path) => UvTable::load_csv(path)?,
        None => UvTable::synthetic(cfg.uv_points, cfg.uv_max_freq, cfg.sigma, cfg.uv_seed)?,
    };
    uv.save_csv(&cfg.output_dir.join("uv.csv"))?;
    let measurement = visibility_forward(&truth, &uv, Some(cfg.noise_seed))?;

    let mut problem = InverseProblem::new(
        ForwardOperator::sparse_visibility(h, w, uv),
        measurement,
        cfg.sigma,
    )?;
    problem.regularizer = cfg.regularizer;
    problem.reg_weight = cfg.lambda;
    problem.nonneg = cfg.nonneg;
    problem.ground_truth = Some(truth.clone());

    let tc = train_config(cfg, h * w);
    let (model, history) = fit_posterior(&problem, &tc)?;
    write_history(&cfg.output_dir, &history)?;
    save_boosted(&model, &cfg.output_dir.join("model.bin"))?;

    let ps = posterior_sample(&model, &problem, cfg.eval_samples, cfg.eval_scheme, cfg.seed ^ 0x5a)?;
    let mut metric_rows = write_sample_artifacts(&cfg.output_dir, &ps, Some(&truth))?;
    if cfg.modes >= 2 {
        let clustering = mode_cluster(&ps, cfg.modes, cfg.seed ^ 0x3e, Some(&truth))?;
        for (m, stats) in clustering.per_mode.iter().enumerate() {
            let frac = clustering.labels.iter().filter(|&&l| l == m).count() as f64
                / ps.n() as f64;
            metric_rows.push((format!("mode{m}_fraction"), frac));
            metric_rows.push((format!("mode{m}_mean_of_std"), stats.mean_of_std));
            if let Some(mae) = stats.mean_abs_error {
                metric_rows.push((format!("mode{m}_mean_abs_error"), mae));
            }
        }
    }
    write_metrics(&cfg.output_dir, &metric_rows)?;
    println!("ok: {}", cfg.output_dir.display());
    Ok(())
}
