//! Flat `key = value` run configuration.
//!
//! Lines are `section.key = value`; `#` starts a comment. The resolved
//! configuration (defaults filled in, overrides applied) is written back in
//! the same format, so a snapshot is always re-runnable.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use flowrecon::diffcore::Activation;
use flowrecon::flows::{CouplingKind, FdPenaltyConfig, FlowConfig};
use flowrecon::sampling::{PssGrouping, Scheme};
use flowrecon::variational::Regularizer;
use flowrecon::{Error, Result};

/// Benchmark task selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Density2d,
    Mri,
    Interferometry,
    DesignStudy,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s.to_ascii_lowercase().as_str() {
            "density2d" => Ok(Task::Density2d),
            "mri" => Ok(Task::Mri),
            "interferometry" => Ok(Task::Interferometry),
            "design_study" | "design-study" => Ok(Task::DesignStudy),
            other => Err(Error::config(format!("invalid field 'task': unknown task '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Density2d => "density2d",
            Task::Mri => "mri",
            Task::Interferometry => "interferometry",
            Task::DesignStudy => "design_study",
        }
    }
}

/// Raw key-value view of a config file.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<KvConfig> {
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(KvConfig { values })
    }

    pub fn load(path: &Path) -> Result<KvConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config '{}': {e}", path.display())))?;
        KvConfig::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("missing required field '{key}'")))
    }

    fn parse_with<T>(&self, key: &str, default: T, f: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => {
                f(raw).ok_or_else(|| Error::config(format!("invalid field '{key}': '{raw}'")))
            }
        }
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        self.parse_with(key, default, |s| match s.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            _ => None,
        })
    }

    fn string_or(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }
}

/// Source of the ground-truth image.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Pgm(PathBuf),
    Phantom { kind: String, size: usize, asymmetry: f64 },
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub output_dir: PathBuf,

    pub coupling: String,
    pub flow_steps: usize,
    pub couplings_per_step: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub spline_bins: usize,
    pub tail_bound: f64,

    pub scheme: Scheme,
    pub grouping: String,

    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub stages: usize,
    pub stage_steps: Option<usize>,
    pub entropy_weight: f64,

    pub fd_weight: f64,
    pub fd_step: f64,
    pub fd_directions: usize,
    pub fd_bidirectional: bool,

    pub image: ImageSource,
    pub sigma: f64,
    pub noise_seed: u64,
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub nonneg: bool,
    pub accel: f64,
    pub center_fraction: f64,
    pub mask_seed: u64,
    pub mask_csv: Option<PathBuf>,
    pub uv_points: usize,
    pub uv_max_freq: f64,
    pub uv_csv: Option<PathBuf>,
    pub uv_seed: u64,

    pub eval_samples: usize,
    pub eval_scheme: Scheme,
    pub prdc_k: usize,
    pub real_samples: usize,
    pub modes: usize,

    pub study_schemes: Vec<Scheme>,
    pub study_n: usize,
    pub study_d: usize,
    pub study_replicates: usize,
    pub study_function: String,
}

impl RunConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<RunConfig> {
        let task = Task::parse(kv.require("task")?)?;
        let seed: u64 = kv
            .require("seed")?
            .parse()
            .map_err(|_| Error::config("invalid field 'seed': expected an integer"))?;
        let output_dir = PathBuf::from(kv.require("output_dir")?);

        let coupling = kv.string_or("model.coupling", "affine");
        if !matches!(coupling.as_str(), "affine" | "spline") {
            return Err(Error::config(format!("invalid field 'model.coupling': '{coupling}'")));
        }
        let scheme = Scheme::parse(&kv.string_or("sampler.scheme", "lpss"))
            .map_err(|e| Error::config(format!("invalid field 'sampler.scheme': {e}")))?;
        let eval_scheme_raw = kv.string_or("eval.scheme", "");
        let eval_scheme = if eval_scheme_raw.is_empty() {
            scheme
        } else {
            Scheme::parse(&eval_scheme_raw)
                .map_err(|e| Error::config(format!("invalid field 'eval.scheme': {e}")))?
        };
        let grouping = kv.string_or("sampler.grouping", "auto");
        if !matches!(grouping.as_str(), "auto" | "pairs" | "singletons") {
            return Err(Error::config(format!("invalid field 'sampler.grouping': '{grouping}'")));
        }
        let regularizer = Regularizer::parse(&kv.string_or("problem.regularizer", "none"))
            .map_err(|e| Error::config(format!("invalid field 'problem.regularizer': {e}")))?;

        let image = if let Some(path) = kv.get("problem.image") {
            let p = PathBuf::from(path);
            if !p.exists() {
                return Err(Error::config(format!(
                    "invalid field 'problem.image': file '{path}' does not exist"
                )));
            }
            ImageSource::Pgm(p)
        } else {
            ImageSource::Phantom {
                kind: kv.string_or("problem.phantom", "two_blob"),
                size: kv.usize_or("problem.phantom_size", 32)?,
                asymmetry: kv.f64_or("problem.phantom_asymmetry", 0.0)?,
            }
        };
        let mask_csv = kv.get("problem.mask_csv").map(PathBuf::from);
        if let Some(p) = &mask_csv {
            if !p.exists() {
                return Err(Error::config(format!(
                    "invalid field 'problem.mask_csv': file '{}' does not exist",
                    p.display()
                )));
            }
        }
        let uv_csv = kv.get("problem.uv_csv").map(PathBuf::from);
        if let Some(p) = &uv_csv {
            if !p.exists() {
                return Err(Error::config(format!(
                    "invalid field 'problem.uv_csv': file '{}' does not exist",
                    p.display()
                )));
            }
        }

        let study_schemes: Result<Vec<Scheme>> = kv
            .string_or("study.schemes", "srs,lhs,lpss,sobol")
            .split(',')
            .map(|s| {
                Scheme::parse(s.trim())
                    .map_err(|e| Error::config(format!("invalid field 'study.schemes': {e}")))
            })
            .collect();

        let cfg = RunConfig {
            task,
            seed,
            output_dir,
            coupling,
            flow_steps: kv.usize_or("model.flow_steps", 2)?,
            couplings_per_step: kv.usize_or("model.couplings_per_step", 4)?,
            hidden_width: kv.usize_or("model.hidden_width", 64)?,
            hidden_layers: kv.usize_or("model.hidden_layers", 2)?,
            spline_bins: kv.usize_or("model.spline_bins", 8)?,
            tail_bound: kv.f64_or("model.tail_bound", 3.0)?,
            scheme,
            grouping,
            steps: kv.usize_or("train.steps", 2000)?,
            batch_size: kv.usize_or("train.batch_size", 32)?,
            learning_rate: kv.f64_or("train.learning_rate", 1e-3)?,
            stages: kv.usize_or("train.stages", 1)?,
            stage_steps: match kv.get("train.stage_steps") {
                None => None,
                Some(raw) => Some(raw.parse().map_err(|_| {
                    Error::config(format!("invalid field 'train.stage_steps': '{raw}'"))
                })?),
            },
            entropy_weight: kv.f64_or("train.entropy_weight", 1.0)?,
            fd_weight: kv.f64_or("fd.weight", 0.0)?,
            fd_step: kv.f64_or("fd.step", 1e-3)?,
            fd_directions: kv.usize_or("fd.directions", 1)?,
            fd_bidirectional: kv.bool_or("fd.bidirectional", true)?,
            image,
            sigma: kv.f64_or("problem.sigma", 0.05)?,
            noise_seed: kv.usize_or("problem.noise_seed", 1)? as u64,
            lambda: kv.f64_or("problem.lambda", 0.0)?,
            regularizer,
            nonneg: kv.bool_or("problem.nonneg", false)?,
            accel: kv.f64_or("problem.accel", 4.0)?,
            center_fraction: kv.f64_or("problem.center_fraction", 0.08)?,
            mask_seed: kv.usize_or("problem.mask_seed", 0)? as u64,
            mask_csv,
            uv_points: kv.usize_or("problem.uv_points", 40)?,
            uv_max_freq: kv.f64_or("problem.uv_max_freq", 8.0)?,
            uv_csv,
            uv_seed: kv.usize_or("problem.uv_seed", 0)? as u64,
            eval_samples: kv.usize_or("eval.samples", 1000)?,
            eval_scheme,
            prdc_k: kv.usize_or("eval.prdc_k", 5)?,
            real_samples: kv.usize_or("eval.real_samples", 1000)?,
            modes: kv.usize_or("eval.modes", 1)?,
            study_schemes: study_schemes?,
            study_n: kv.usize_or("study.n", 64)?,
            study_d: kv.usize_or("study.d", 2)?,
            study_replicates: kv.usize_or("study.replicates", 500)?,
            study_function: kv.string_or("study.function", "additive"),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("invalid field 'train.batch_size': must be >= 1"));
        }
        if self.stages == 0 {
            return Err(Error::config("invalid field 'train.stages': must be >= 1"));
        }
        if self.sigma <= 0.0 {
            return Err(Error::config("invalid field 'problem.sigma': must be > 0"));
        }
        if self.accel < 1.0 {
            return Err(Error::config("invalid field 'problem.accel': must be >= 1"));
        }
        if self.spline_bins < 2 {
            return Err(Error::config("invalid field 'model.spline_bins': must be >= 2"));
        }
        Ok(())
    }

    pub fn coupling_kind(&self) -> CouplingKind {
        match self.coupling.as_str() {
            "spline" => CouplingKind::RqSpline { bins: self.spline_bins, tail_bound: self.tail_bound },
            _ => CouplingKind::Affine,
        }
    }

    pub fn flow_config(&self, latent_dim: usize) -> FlowConfig {
        FlowConfig {
            latent_dim,
            flow_steps: self.flow_steps,
            couplings_per_step: self.couplings_per_step,
            kind: self.coupling_kind(),
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            activation: Activation::Tanh,
            zero_init_last: true,
        }
    }

    pub fn fd_config(&self) -> Option<FdPenaltyConfig> {
        if self.fd_weight > 0.0 {
            Some(FdPenaltyConfig {
                step: self.fd_step,
                n_directions: self.fd_directions,
                weight: self.fd_weight,
                bidirectional: self.fd_bidirectional,
            })
        } else {
            None
        }
    }

    pub fn grouping_for(&self, d: usize) -> Option<PssGrouping> {
        match self.grouping.as_str() {
            "pairs" => Some(PssGrouping::consecutive_pairs(d)),
            "singletons" => Some(PssGrouping::singletons(d)),
            _ => None,
        }
    }

    /// Serializes the resolved configuration back to the flat format.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("task", self.task.name().into());
        kv("seed", self.seed.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("model.coupling", self.coupling.clone());
        kv("model.flow_steps", self.flow_steps.to_string());
        kv("model.couplings_per_step", self.couplings_per_step.to_string());
        kv("model.hidden_width", self.hidden_width.to_string());
        kv("model.hidden_layers", self.hidden_layers.to_string());
        kv("model.spline_bins", self.spline_bins.to_string());
        kv("model.tail_bound", self.tail_bound.to_string());
        kv("sampler.scheme", self.scheme.name().into());
        kv("sampler.grouping", self.grouping.clone());
        kv("train.steps", self.steps.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.learning_rate", self.learning_rate.to_string());
        kv("train.stages", self.stages.to_string());
        if let Some(ss) = self.stage_steps {
            kv("train.stage_steps", ss.to_string());
        }
        kv("train.entropy_weight", self.entropy_weight.to_string());
        kv("fd.weight", self.fd_weight.to_string());
        kv("fd.step", self.fd_step.to_string());
        kv("fd.directions", self.fd_directions.to_string());
        kv("fd.bidirectional", self.fd_bidirectional.to_string());
        match &self.image {
            ImageSource::Pgm(p) => kv("problem.image", p.display().to_string()),
            ImageSource::Phantom { kind, size, asymmetry } => {
                kv("problem.phantom", kind.clone());
                kv("problem.phantom_size", size.to_string());
                kv("problem.phantom_asymmetry", asymmetry.to_string());
            }
        }
        kv("problem.sigma", self.sigma.to_string());
        kv("problem.noise_seed", self.noise_seed.to_string());
        kv("problem.lambda", self.lambda.to_string());
        kv("problem.regularizer", self.regularizer.name().into());
        kv("problem.nonneg", self.nonneg.to_string());
        kv("problem.accel", self.accel.to_string());
        kv("problem.center_fraction", self.center_fraction.to_string());
        kv("problem.mask_seed", self.mask_seed.to_string());
        if let Some(p) = &self.mask_csv {
            kv("problem.mask_csv", p.display().to_string());
        }
        kv("problem.uv_points", self.uv_points.to_string());
        kv("problem.uv_max_freq", self.uv_max_freq.to_string());
        if let Some(p) = &self.uv_csv {
            kv("problem.uv_csv", p.display().to_string());
        }
        kv("problem.uv_seed", self.uv_seed.to_string());
        kv("eval.samples", self.eval_samples.to_string());
        kv("eval.scheme", self.eval_scheme.name().into());
        kv("eval.prdc_k", self.prdc_k.to_string());
        kv("eval.real_samples", self.real_samples.to_string());
        kv("eval.modes", self.modes.to_string());
        kv("study.schemes", self.study_schemes.iter().map(|s| s.name()).collect::<Vec<_>>().join(","));
        kv("study.n", self.study_n.to_string());
        kv("study.d", self.study_d.to_string());
        kv("study.replicates", self.study_replicates.to_string());
        kv("study.function", self.study_function.clone());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(task: &str) -> String {
        format!("task = {task}\nseed = 7\noutput_dir = /tmp/out\n")
    }

    #[test]
    fn missing_seed_names_the_field() {
        let kv = KvConfig::parse("task = density2d\noutput_dir = /tmp/x\n").unwrap();
        let err = RunConfig::from_kv(&kv).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let kv = KvConfig::parse(&minimal("density2d")).unwrap();
        let cfg = RunConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.scheme, Scheme::Lpss);
        assert_eq!(cfg.batch_size, 32);
    }

    #[test]
    fn snapshot_round_trips() {
        let kv = KvConfig::parse(&minimal("mri")).unwrap();
        let cfg = RunConfig::from_kv(&kv).unwrap();
        let snap = cfg.snapshot();
        let kv2 = KvConfig::parse(&snap).unwrap();
        let cfg2 = RunConfig::from_kv(&kv2).unwrap();
        assert_eq!(cfg2.snapshot(), snap);
    }

    #[test]
    fn bad_field_values_name_the_field() {
        let mut kv = KvConfig::parse(&minimal("density2d")).unwrap();
        kv.set("train.batch_size", "zero".into());
        let err = RunConfig::from_kv(&kv).unwrap_err();
        assert!(err.to_string().contains("train.batch_size"), "{err}");

        let mut kv = KvConfig::parse(&minimal("density2d")).unwrap();
        kv.set("problem.image", "/definitely/not/here.pgm".into());
        let err = RunConfig::from_kv(&kv).unwrap_err();
        assert!(err.to_string().contains("problem.image"), "{err}");
    }
}
