//! Run configuration, command implementations and plot-data output for the
//! `wdno` binary.
//!
//! Every artifact-producing command writes a provenance record next to its
//! output: `run.json` inside output directories, `<stem>.run.json` beside
//! output files. Records hold no timestamps, so re-running a command with
//! the same inputs reproduces every byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{
    GuidanceSchedule, NoiseSchedule, SamplerConfig, SamplerMode, ScheduleConfig, TrainConfig,
};
use crate::error::{bail, Error, Result};
use crate::multires;
use crate::nn::{DenoiserConfig, ParamStore};
use crate::par::Execution;
use crate::pde::{self, BurgersConfig, Dataset, ManifestEntry, System, Trajectory};
use crate::rng;
use crate::task::{self, Codec, ControlObjective, TaskKind};
use crate::tensor::{metrics, AxisRole, GridTensor, Metrics};
use crate::wavelet::{roundtrip_error, WaveletSpec};

/// Denoiser hyperparameters under their table names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub initial_dimension: usize,
    /// One entry per downsampling stage.
    pub dimension_multiplier: Vec<usize>,
    pub convolution_kernel_size: usize,
    pub resnet_block_groups: usize,
    pub time_embedding_dimension: usize,
    pub attention: bool,
}

impl ModelSection {
    pub fn denoiser(&self, kind: TaskKind, diffusion_steps: usize) -> DenoiserConfig {
        DenoiserConfig {
            in_channels: kind.target_channels(),
            cond_channels: kind.cond_channels(),
            base_width: self.initial_dimension,
            depth: self.dimension_multiplier.len(),
            channel_mult: self.dimension_multiplier.clone(),
            kernel: self.convolution_kernel_size,
            groups: self.resnet_block_groups,
            time_embed_dim: self.time_embedding_dimension,
            attention: self.attention,
            diffusion_steps,
            prior_skip: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrScheduler {
    CosineAnnealing,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub training_batch_size: usize,
    pub learning_rate: f64,
    pub training_steps: usize,
    pub learning_rate_scheduler: LrScheduler,
    pub cond_drop_prob: f64,
}

impl TrainingSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.training_steps,
            batch_size: self.training_batch_size,
            learning_rate: self.learning_rate,
            cosine_lr: self.learning_rate_scheduler == LrScheduler::CosineAnnealing,
            cond_drop: self.cond_drop_prob,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    pub sampler: SamplerMode,
    pub ddim_sampling_iterations: usize,
    pub ddim_eta: f64,
    pub cfg_weight: f64,
    pub intensity_of_guidance: f64,
    pub scheduler_of_guidance: GuidanceSchedule,
    /// Weight of the initial-state reconstruction term added to the control
    /// guidance objective.
    pub recon_guidance_weight: f64,
    /// Bound on the normalized `x0` estimate during sampling; `0` disables
    /// clipping.
    pub clip_denoised: f64,
}

impl InferenceSection {
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            mode: self.sampler,
            ddim_steps: self.ddim_sampling_iterations,
            ddim_eta: self.ddim_eta,
            cfg_weight: self.cfg_weight,
            guidance_weight: self.intensity_of_guidance,
            guidance_schedule: self.scheduler_of_guidance,
            recon_guidance_weight: self.recon_guidance_weight,
            clip_x0: (self.clip_denoised > 0.0).then_some(self.clip_denoised),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiresSection {
    /// Halvings applied to stored trajectories before base-model training.
    pub base_level: usize,
    /// Pair levels used for super-resolution training, counted from
    /// `base_level`.
    pub max_level: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    /// Control-energy weight of the objective.
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

/// Everything a command needs besides its file arguments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub system: System,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    pub solver: BurgersConfig,
    pub model: ModelSection,
    pub schedule: ScheduleConfig,
    pub training: TrainingSection,
    pub inference: InferenceSection,
    pub multires: MultiresSection,
    pub control: ControlSection,
}

impl RunConfig {
    /// Full-scale values: 128-wide four-stage UNet, batch 16, learning rate
    /// 1e-4 with cosine annealing, DDIM 50 steps at η = 1, guidance 120000.
    pub fn full_scale(seed: u64) -> Self {
        Self {
            seed,
            system: System::Burgers,
            output_dir: None,
            data: DataSection::default(),
            solver: BurgersConfig::default(),
            model: ModelSection {
                initial_dimension: 128,
                dimension_multiplier: vec![1, 2, 4, 8],
                convolution_kernel_size: 3,
                resnet_block_groups: 8,
                time_embedding_dimension: 128,
                attention: true,
            },
            schedule: ScheduleConfig::default(),
            training: TrainingSection {
                training_batch_size: 16,
                learning_rate: 1e-4,
                training_steps: 190_000,
                learning_rate_scheduler: LrScheduler::CosineAnnealing,
                cond_drop_prob: 0.1,
            },
            inference: InferenceSection {
                sampler: SamplerMode::Ddim,
                ddim_sampling_iterations: 50,
                ddim_eta: 1.0,
                cfg_weight: 1.0,
                intensity_of_guidance: 120_000.0,
                scheduler_of_guidance: GuidanceSchedule::Cosine,
                recon_guidance_weight: 0.0,
                clip_denoised: 0.0,
            },
            multires: MultiresSection {
                base_level: 0,
                max_level: 3,
            },
            control: ControlSection { alpha: DESK_ALPHA },
        }
    }

    /// Sizes reduced to run on one CPU core; sampler settings unchanged
    /// apart from the guidance intensity tuned for the small model.
    pub fn desk(seed: u64) -> Self {
        let full = Self::full_scale(seed);
        Self {
            solver: BurgersConfig::desk(),
            model: ModelSection {
                initial_dimension: 8,
                dimension_multiplier: vec![1, 2],
                convolution_kernel_size: 3,
                resnet_block_groups: 4,
                time_embedding_dimension: 32,
                attention: false,
            },
            training: TrainingSection {
                learning_rate: DESK_LR,
                training_steps: 2000,
                ..full.training
            },
            inference: InferenceSection {
                intensity_of_guidance: DESK_GUIDANCE,
                ..full.inference
            },
            multires: MultiresSection {
                base_level: 1,
                max_level: 2,
            },
            ..full
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(seed)),
            "full-scale" => Ok(Self::full_scale(seed)),
            other => Err(Error::Invalid(format!("unknown preset '{other}'"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        let schedule = NoiseSchedule::new(&self.schedule)?;
        self.model.denoiser(TaskKind::Simulate, schedule.steps).validate()?;
        self.training.train_config().validate()?;
        self.inference.sampler_config().validate(schedule.steps)?;
        if self.multires.max_level == 0 {
            bail!(Config, "multires.max_level must be at least 1");
        }
        if !(self.control.alpha >= 0.0 && self.control.alpha.is_finite()) {
            bail!(Config, "control.alpha must be finite and non-negative");
        }
        for p in [&self.data.train, &self.data.test].into_iter().flatten() {
            if !p.join("manifest.csv").is_file() {
                bail!(Config, "dataset {} has no manifest.csv", p.display());
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Learning rate of the desk preset.
pub const DESK_LR: f64 = 3e-3;
/// Guidance intensity of the desk preset.
pub const DESK_GUIDANCE: f64 = 3.0;
/// Control-energy weight used by both presets.
pub const DESK_ALPHA: f64 = 2e-5;

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Long-format `series,x,y` table with 17 significant digits.
pub fn emit_plot_data(series: &[(String, Vec<(f64, f64)>)], path: &Path) -> Result<()> {
    if series.is_empty() || series.iter().any(|(_, pts)| pts.is_empty()) {
        bail!(Invalid, "plot data needs at least one non-empty series");
    }
    let mut text = String::from("series,x,y\n");
    for (name, pts) in series {
        if name.contains([',', '\n']) {
            bail!(Invalid, "series name '{}' contains a separator", name);
        }
        for (x, y) in pts {
            let _ = writeln!(text, "{name},{x:.16e},{y:.16e}");
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`emit_plot_data`].
pub fn read_plot_data(path: &Path) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("series,x,y") {
        return Err(Error::corrupt(path, "unexpected plot-data header"));
    }
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let bad = || Error::corrupt(path, format!("bad row '{line}'"));
        if cols.len() != 3 {
            return Err(bad());
        }
        let x: f64 = cols[1].parse().map_err(|_| bad())?;
        let y: f64 = cols[2].parse().map_err(|_| bad())?;
        match out.last_mut() {
            Some((name, pts)) if name == cols[0] => pts.push((x, y)),
            _ => out.push((cols[0].to_string(), vec![(x, y)])),
        }
    }
    Ok(out)
}

#[derive(Parser, Debug)]
#[command(name = "wdno", version, about = "Wavelet-domain diffusion for PDE simulation and control")]
pub struct Cli {
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a dataset of solver trajectories.
    GenData(GenDataArgs),
    /// Train a base-resolution model.
    #[command(alias = "train-brm")]
    Train(TrainArgs),
    /// Train a super-resolution model on multi-level pairs.
    TrainSrm(TrainArgs),
    /// Sample state trajectories for given forces and initial states.
    Simulate(SimulateArgs),
    /// Sample a control sequence steering `u0` to `u*`.
    Control(ControlArgs),
    /// Base model followed by repeated super-resolution steps.
    Superres(SuperresArgs),
    /// Error metrics and per-time-step error series against reference data.
    Eval(EvalArgs),
    /// Round-trip random tensors through the wavelet transform.
    WaveletCheck(WaveletCheckArgs),
    /// Print a preset configuration.
    Preset(PresetArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value = "burgers")]
    pub system: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Solver settings; the desk solver when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `simulate` or `control` (base models only).
    #[arg(long, default_value = "simulate")]
    pub task: String,
    #[arg(long)]
    pub overwrite: bool,
}

/// Sampler flags that override the checkpoint's stored settings.
#[derive(Args, Debug, Clone)]
pub struct SamplerArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ddim_steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory, or a force file (with `--u0`).
    #[arg(long)]
    pub cond: PathBuf,
    #[arg(long)]
    pub u0: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct ControlArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub u0: PathBuf,
    #[arg(long)]
    pub ustar: PathBuf,
    #[arg(long = "lambda")]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct SuperresArgs {
    #[arg(long)]
    pub brm: PathBuf,
    #[arg(long)]
    pub srm: PathBuf,
    /// Dataset directory, or a force file (with `--u0`), at the target
    /// resolution.
    #[arg(long)]
    pub cond: PathBuf,
    #[arg(long)]
    pub u0: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Predicted dataset directory or state file.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference dataset directory or state file; downsampled to the
    /// prediction grid when finer.
    #[arg(long)]
    pub truth: PathBuf,
    /// Directory receiving `metrics.csv` and `series.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct WaveletCheckArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "bior2.4")]
    pub wavelet: String,
    #[arg(long, default_value = "periodization")]
    pub mode: String,
    /// Tensor dims, e.g. `81x120` or `32x64x64`.
    #[arg(long, default_value = "81x120")]
    pub dims: String,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct PresetArgs {
    /// `desk` or `full-scale`.
    #[arg(long, default_value = "desk")]
    pub name: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    config_hash: Option<String>,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "serde_json::Map::is_empty")]
    results: serde_json::Map<String, serde_json::Value>,
}

impl<'a> Provenance<'a> {
    fn new(command: &'a str, seed: Option<u64>, config: Option<&RunConfig>) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_hash: config.map(RunConfig::hash),
            inputs: Vec::new(),
            outputs: Vec::new(),
            results: serde_json::Map::new(),
        }
    }

    fn input(mut self, name: &str, path: &Path) -> Result<Self> {
        let bytes = if path.is_dir() {
            std::fs::read(path.join("manifest.csv")).map_err(|e| Error::io(path, e))?
        } else {
            std::fs::read(path).map_err(|e| Error::io(path, e))?
        };
        self.inputs.push((name.into(), hex_digest(&bytes)));
        Ok(self)
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("provenance serializes") + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn provenance_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("run.json")
    } else {
        let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.with_file_name(format!("{stem}.run.json"))
    }
}

fn guard(out: &Path, overwrite: bool) -> Result<()> {
    let taken = if out.is_dir() {
        std::fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some()
    } else {
        out.exists()
    };
    if taken && !overwrite {
        bail!(Invalid, "{} exists; pass --overwrite to replace it", out.display());
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(())
}

fn schedule_of(store: &ParamStore) -> Result<NoiseSchedule> {
    let cfg = match store.meta.get("schedule") {
        Some(s) => serde_json::from_str(s).map_err(|e| Error::Config(format!("checkpoint schedule: {e}")))?,
        None => ScheduleConfig {
            steps: store.config.diffusion_steps,
            ..ScheduleConfig::default()
        },
    };
    NoiseSchedule::new(&cfg)
}

fn meta_usize(store: &ParamStore, key: &str) -> Result<usize> {
    store
        .meta
        .get(key)
        .ok_or_else(|| Error::Invalid(format!("checkpoint lacks '{key}' metadata")))?
        .parse()
        .map_err(|_| Error::Invalid(format!("checkpoint '{key}' metadata is not a count")))
}

/// Sampler settings: the stored inference section, then `--config`, then
/// flags.
fn sampler_of(store: &ParamStore, args: &SamplerArgs) -> Result<(SamplerConfig, u64, Option<RunConfig>)> {
    let config = args.config.as_deref().map(RunConfig::load).transpose()?;
    let mut sampler = match (&config, store.meta.get("inference")) {
        (Some(c), _) => c.inference.sampler_config(),
        (None, Some(s)) => {
            let inf: InferenceSection =
                serde_json::from_str(s).map_err(|e| Error::Config(format!("checkpoint inference: {e}")))?;
            inf.sampler_config()
        }
        (None, None) => SamplerConfig::default(),
    };
    if let Some(s) = args.ddim_steps {
        sampler.ddim_steps = s;
        sampler.mode = SamplerMode::Ddim;
    }
    if let Some(e) = args.eta {
        sampler.ddim_eta = e;
    }
    let seed = args.seed.or(config.as_ref().map(|c| c.seed)).unwrap_or(0);
    Ok((sampler, seed, config))
}

fn read_line(path: &Path) -> Result<Vec<f64>> {
    let t = GridTensor::read(path)?;
    if t.rank() != 1 {
        bail!(Shape, "{} holds a rank-{} tensor, expected a line", path.display(), t.rank());
    }
    Ok(t.into_data())
}

/// Conditioning cases from a dataset directory or a force file plus `u0`.
fn read_cases(cond: &Path, u0: Option<&Path>) -> Result<(Vec<(GridTensor, Vec<f64>)>, Option<Dataset>)> {
    if cond.is_dir() {
        let ds = Dataset::open(cond)?;
        let trajs = ds.load_all(Execution::Parallel)?;
        Ok((trajs.iter().map(|t| (t.f.clone(), t.u0())).collect(), Some(ds)))
    } else {
        let Some(u0) = u0 else {
            bail!(Invalid, "a force file needs --u0");
        };
        Ok((vec![(GridTensor::read(cond)?, read_line(u0)?)], None))
    }
}

fn case_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| rng::derive_seed(seed, "case", i)).collect()
}

/// Writes states as a dataset (directory input) or a single file.
fn write_states(out: &Path, states: &[GridTensor], forces: &[GridTensor], source: Option<&Dataset>) -> Result<Vec<String>> {
    match source {
        None => {
            states[0].write(out)?;
            Ok(vec![out.display().to_string()])
        }
        Some(ds) => {
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let mut manifest = String::from("sample_id,seed,u_path,f_path\n");
            let mut names = Vec::new();
            for (i, (u, f)) in states.iter().zip(forces).enumerate() {
                let e: &ManifestEntry = &ds.entries[i];
                let (up, fp) = (format!("u_{:05}.wdt", e.sample_id), format!("f_{:05}.wdt", e.sample_id));
                u.write(&out.join(&up))?;
                f.write(&out.join(&fp))?;
                let _ = writeln!(manifest, "{},{},{},{}", e.sample_id, e.seed, up, fp);
                names.push(up);
            }
            let path = out.join("manifest.csv");
            std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
            Ok(names)
        }
    }
}

fn exec_of(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let exec = exec_of(cli.sequential);
    match cli.command {
        Command::GenData(a) => gen_data(a, exec),
        Command::Train(a) => train(a, false, exec),
        Command::TrainSrm(a) => train(a, true, exec),
        Command::Simulate(a) => simulate(a, exec),
        Command::Control(a) => control(a, exec),
        Command::Superres(a) => superres(a, exec),
        Command::Eval(a) => eval(a),
        Command::WaveletCheck(a) => wavelet_check(a),
        Command::Preset(a) => {
            print!("{}", RunConfig::preset(&a.name, a.seed)?.to_toml()?);
            Ok(())
        }
    }
}

fn gen_data(a: GenDataArgs, exec: Execution) -> Result<()> {
    let system: System = a.system.parse()?;
    let config = a.config.as_deref().map(RunConfig::load).transpose()?;
    let solver = config.as_ref().map(|c| c.solver.clone()).unwrap_or_else(BurgersConfig::desk);
    guard(&a.out, a.overwrite)?;
    let ds = pde::gen_dataset(a.n, system, a.seed, &solver, &a.out, exec)?;
    let mut p = Provenance::new("gen-data", Some(a.seed), config.as_ref());
    p.inputs.push(("system".into(), a.system.clone()));
    p.inputs.push((
        "solver".into(),
        hex_digest(serde_json::to_string(&solver).expect("solver serializes").as_bytes()),
    ));
    p.outputs = ds.entries.iter().map(|e| e.u_path.clone()).collect();
    p.write(&provenance_path(&a.out))?;
    println!("wrote {} trajectories to {}", ds.len(), a.out.display());
    Ok(())
}

fn load_training_data(a: &TrainArgs, cfg: &RunConfig) -> Result<(PathBuf, Dataset, Vec<Trajectory>)> {
    let dir = a
        .data
        .clone()
        .or_else(|| cfg.data.train.clone())
        .ok_or_else(|| Error::Invalid("no training data: pass --data or set data.train".into()))?;
    let ds = Dataset::open(&dir)?;
    let trajs = ds.load_all(Execution::Parallel)?;
    Ok((dir, ds, trajs))
}

fn train(a: TrainArgs, srm: bool, exec: Execution) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    guard(&a.out, a.overwrite)?;
    let (dir, ds, trajs) = load_training_data(&a, &cfg)?;
    let schedule = NoiseSchedule::new(&cfg.schedule)?;
    let codec = Codec::default();
    let base = cfg.multires.base_level;
    let kind = if srm { TaskKind::Superres } else { a.task.parse()? };
    let net = cfg.model.denoiser(kind, schedule.steps);
    let (mut store, losses) = if srm {
        let at_base = trajs
            .iter()
            .map(|t| {
                Ok(Trajectory {
                    seed: t.seed,
                    u: multires::state_at_level(&t.u, base)?,
                    f: multires::force_at_level(&t.f, base)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pairs = multires::build_pairs(&at_base, cfg.multires.max_level, exec)?;
        let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        multires::write_pair_manifest(&ds, base, cfg.multires.max_level, &a.out.with_file_name(format!("{stem}.pairs.csv")))?;
        multires::train_srm(&codec, &net, &pairs, &schedule, &cfg.training.train_config(), cfg.seed, exec)?
    } else {
        if kind == TaskKind::Superres {
            bail!(Invalid, "use train-srm for super-resolution models");
        }
        let groups = [codec.examples(kind, &trajs, base, exec)?];
        task::fit(kind, &codec, &net, &groups, &schedule, &cfg.training.train_config(), cfg.seed, exec)?
    };
    let f = multires::force_at_level(&trajs[0].f, base)?;
    let meta = [
        ("level", base.to_string()),
        ("nt", f.dims()[0].to_string()),
        ("nx", f.dims()[1].to_string()),
        ("schedule", serde_json::to_string(&cfg.schedule).expect("schedule serializes")),
        ("inference", serde_json::to_string(&cfg.inference).expect("inference serializes")),
        ("alpha", format!("{:e}", cfg.control.alpha)),
        ("horizon", format!("{:e}", cfg.solver.horizon)),
    ];
    for (k, v) in meta {
        store.meta.insert(k.into(), v);
    }
    store.save(&a.out)?;
    let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let loss_path = a.out.with_file_name(format!("{stem}.losses.csv"));
    let pts = losses.iter().enumerate().map(|(i, l)| (i as f64, *l)).collect();
    emit_plot_data(&[("loss".into(), pts)], &loss_path)?;
    let mut p = Provenance::new(if srm { "train-srm" } else { "train" }, Some(cfg.seed), Some(&cfg)).input("data", &dir)?;
    p.outputs = vec![a.out.display().to_string(), loss_path.display().to_string()];
    p.write(&provenance_path(&a.out))?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    println!(
        "trained {} model: {} steps, final mean loss {:.6}",
        kind.as_str(),
        losses.len(),
        tail.iter().sum::<f64>() / tail.len() as f64
    );
    Ok(())
}

fn at_level(cases: &[(GridTensor, Vec<f64>)], level: usize) -> Result<Vec<(GridTensor, Vec<f64>)>> {
    cases
        .iter()
        .map(|(f, u0)| Ok((multires::force_at_level(f, level)?, multires::line_at_level(u0, level)?)))
        .collect()
}

fn simulate(a: SimulateArgs, exec: Execution) -> Result<()> {
    let store = ParamStore::load(&a.ckpt)?;
    let (sampler, seed, config) = sampler_of(&store, &a.sampler)?;
    let schedule = schedule_of(&store)?;
    let level = meta_usize(&store, "level").unwrap_or(0);
    let (raw, source) = read_cases(&a.cond, a.u0.as_deref())?;
    let cases = if source.is_some() { at_level(&raw, level)? } else { raw };
    guard(&a.out, a.overwrite)?;
    let states = task::simulate(&store, exec, &schedule, &sampler, &cases, &case_seeds(seed, cases.len()))?;
    let forces: Vec<GridTensor> = cases.iter().map(|c| c.0.clone()).collect();
    let mut p = Provenance::new("simulate", Some(seed), config.as_ref())
        .input("ckpt", &a.ckpt)?
        .input("cond", &a.cond)?;
    p.outputs = write_states(&a.out, &states, &forces, source.as_ref())?;
    p.results.insert("sampler".into(), serde_json::to_value(&sampler).expect("sampler serializes"));
    p.write(&provenance_path(&a.out))?;
    println!("simulated {} trajectories of {:?}", states.len(), states[0].dims());
    Ok(())
}

fn control(a: ControlArgs, exec: Execution) -> Result<()> {
    let store = ParamStore::load(&a.ckpt)?;
    let (mut sampler, seed, config) = sampler_of(&store, &a.sampler)?;
    if let Some(l) = a.lambda {
        sampler.guidance_weight = l;
    }
    let schedule = schedule_of(&store)?;
    let level = meta_usize(&store, "level").unwrap_or(0);
    let nt = meta_usize(&store, "nt")?;
    let parse_meta = |k: &str, d: f64| store.meta.get(k).and_then(|v| v.parse().ok()).unwrap_or(d);
    let alpha = a
        .alpha
        .or(config.as_ref().map(|c| c.control.alpha))
        .unwrap_or_else(|| parse_meta("alpha", DESK_ALPHA));
    let solver = config.as_ref().map(|c| c.solver.clone()).unwrap_or_else(BurgersConfig::desk);
    let horizon = parse_meta("horizon", solver.horizon);
    let u0_full = read_line(&a.u0)?;
    let us_full = read_line(&a.ustar)?;
    let cases = [(multires::line_at_level(&u0_full, level)?, multires::line_at_level(&us_full, level)?)];
    guard(&a.out, a.overwrite)?;
    let objective = ControlObjective {
        alpha,
        horizon,
        recon_weight: 0.0,
    };
    let out = task::control(&store, exec, &schedule, &sampler, &objective, nt, &cases, &case_seeds(seed, 1))?;
    let j = pde::eval_control_objective(&out[0].force, &u0_full, &us_full, alpha, &solver)?;
    out[0].force.write(&a.out)?;
    let mut p = Provenance::new("control", Some(seed), config.as_ref())
        .input("ckpt", &a.ckpt)?
        .input("u0", &a.u0)?
        .input("ustar", &a.ustar)?;
    p.outputs = vec![a.out.display().to_string()];
    p.results.insert("lambda".into(), sampler.guidance_weight.into());
    p.results.insert("alpha".into(), alpha.into());
    p.results.insert("objective".into(), j.into());
    p.write(&provenance_path(&a.out))?;
    println!("control objective (solver) {j:.6e}");
    Ok(())
}

fn superres(a: SuperresArgs, exec: Execution) -> Result<()> {
    let brm = ParamStore::load(&a.brm)?;
    let srm = ParamStore::load(&a.srm)?;
    let (sampler, seed, config) = sampler_of(&brm, &a.sampler)?;
    let schedule = schedule_of(&brm)?;
    if schedule != schedule_of(&srm)? {
        bail!(Invalid, "base and super-resolution models use different noise schedules");
    }
    let (cases, source) = read_cases(&a.cond, a.u0.as_deref())?;
    guard(&a.out, a.overwrite)?;
    let seeds = case_seeds(seed, cases.len());
    let states = multires::superres_infer(&brm, &srm, exec, &schedule, &sampler, &cases, a.steps, &seeds)?;
    let forces: Vec<GridTensor> = cases.iter().map(|c| c.0.clone()).collect();
    let mut p = Provenance::new("superres", Some(seed), config.as_ref())
        .input("brm", &a.brm)?
        .input("srm", &a.srm)?
        .input("cond", &a.cond)?;
    p.outputs = write_states(&a.out, &states, &forces, source.as_ref())?;
    p.results.insert("steps".into(), a.steps.into());
    p.write(&provenance_path(&a.out))?;
    println!("generated {} trajectories of {:?}", states.len(), states[0].dims());
    Ok(())
}

fn read_states(path: &Path) -> Result<Vec<(String, GridTensor)>> {
    if path.is_dir() {
        let ds = Dataset::open(path)?;
        ds.entries
            .iter()
            .map(|e| Ok((e.sample_id.to_string(), GridTensor::read(&ds.dir.join(&e.u_path))?)))
            .collect()
    } else {
        Ok(vec![("0".into(), GridTensor::read(path)?)])
    }
}

/// Halves `truth` until it matches `dims`.
fn match_grid(truth: &GridTensor, dims: &[usize]) -> Result<GridTensor> {
    let mut cur = truth.clone();
    while cur.dims() != dims {
        if cur.dims().iter().zip(dims).any(|(a, b)| a < b) || cur.dims().len() != dims.len() {
            bail!(Shape, "reference {:?} cannot be brought to {:?}", truth.dims(), dims);
        }
        cur = multires::state_at_level(&cur, 1)?;
    }
    Ok(cur)
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = read_states(&a.pred)?;
    let truth = read_states(&a.truth)?;
    if pred.len() != truth.len() {
        bail!(Invalid, "{} predictions for {} references", pred.len(), truth.len());
    }
    guard(&a.out.join("metrics.csv"), a.overwrite)?;
    let mut rows: Vec<(String, Metrics)> = Vec::with_capacity(pred.len() + 1);
    let (nt1, nx) = (pred[0].1.dims()[0], pred[0].1.dims()[1]);
    let mut per_step = vec![[0.0f64; 2]; nt1];
    for ((id, p), (_, t)) in pred.iter().zip(&truth) {
        let t = match_grid(t, p.dims())?;
        rows.push((id.clone(), metrics(p, &t, true)?));
        if p.dims() != [nt1, nx] {
            bail!(Shape, "predictions of differing dims {:?} and {:?}", p.dims(), [nt1, nx]);
        }
        for (k, acc) in per_step.iter_mut().enumerate() {
            for j in 0..nx {
                let d = p.data()[k * nx + j] - t.data()[k * nx + j];
                acc[0] += d * d;
                acc[1] += d.abs();
            }
        }
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&Metrics) -> f64| rows.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
    let summary = Metrics {
        mse: mean(|m| m.mse),
        mae: mean(|m| m.mae),
        linf: rows.iter().map(|(_, m)| m.linf).fold(0.0, f64::max),
        rel_l2: mean(|m| m.rel_l2),
    };
    rows.push(("mean".into(), summary));
    crate::tensor::write_metrics_csv(&a.out.join("metrics.csv"), &rows)?;
    let scale = n * nx as f64;
    let series: Vec<(String, Vec<(f64, f64)>)> = ["mse", "mae"]
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let pts = per_step.iter().enumerate().skip(1).map(|(k, acc)| (k as f64, acc[c] / scale)).collect();
            (name.to_string(), pts)
        })
        .collect();
    emit_plot_data(&series, &a.out.join("series.csv"))?;
    let mut p = Provenance::new("eval", None, None).input("pred", &a.pred)?.input("truth", &a.truth)?;
    p.outputs = vec!["metrics.csv".into(), "series.csv".into()];
    p.results.insert("mse".into(), summary.mse.into());
    p.write(&a.out.join("run.json"))?;
    println!("mse {:.6e} over {} samples (initial frame excluded)", summary.mse, pred.len());
    Ok(())
}

/// Parses `81x120`-style dims.
pub fn parse_dims(s: &str) -> Result<Vec<usize>> {
    let dims = s
        .split(['x', 'X', ','])
        .map(|d| d.trim().parse::<usize>().map_err(|_| Error::Invalid(format!("bad dims '{s}'"))))
        .collect::<Result<Vec<_>>>()?;
    if dims.is_empty() || dims.contains(&0) {
        bail!(Invalid, "bad dims '{}'", s);
    }
    Ok(dims)
}

/// Largest relative round-trip error over `n` seeded Gaussian tensors.
pub fn wavelet_roundtrip_max(spec: &WaveletSpec, dims: &[usize], n: usize, seed: u64) -> Result<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let roles = if dims.len() == 2 {
        vec![AxisRole::Time, AxisRole::Space]
    } else {
        vec![AxisRole::Space; dims.len()]
    };
    let axes: Vec<usize> = (0..dims.len()).collect();
    let len: usize = dims.iter().product();
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut r = rng::stream(seed, "wavelet-check", i as u64);
        let data: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut r)).collect();
        let t = GridTensor::new(dims.to_vec(), roles.clone(), data)?;
        worst = worst.max(roundtrip_error(&t, spec, &axes)?);
    }
    Ok(worst)
}

fn wavelet_check(a: WaveletCheckArgs) -> Result<()> {
    let spec = WaveletSpec::parse(&a.wavelet, &a.mode)?;
    let dims = parse_dims(&a.dims)?;
    let worst = wavelet_roundtrip_max(&spec, &dims, a.n, a.seed)?;
    println!(
        "{} {} {:?}: max relative round-trip error {:.3e} over {} tensors",
        a.wavelet, a.mode, dims, worst, a.n
    );
    if worst > a.tol {
        return Err(Error::NonFinite(format!("round-trip error {worst:.3e} exceeds {:.1e}", a.tol)));
    }
    Ok(())
}

/// Process exit code for a command result.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) => e.exit_code(),
    }
}
