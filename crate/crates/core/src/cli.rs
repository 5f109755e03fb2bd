//! Configuration and command implementations behind the `cryoforge` binary.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypenet::{HypeNetConfig, Mode};
use crate::metrics::{
    knn_classify, pca_reduce, per_image_protocol, select_images, write_report, MetricsConfig, OracleSource,
    VolumeSource,
};
use crate::phantom::{generate_phantom, read_mrc, write_mrc, PhantomSpec, VoxelVolume};
use crate::simulate::{backproject_dataset, read_dataset, simulate_dataset, write_dataset, ParticleDataset, SimulateConfig};
use crate::tensor::Real;
use crate::train::{
    centered_hartley, extract_latents, read_info, reconstruct_volume, train, write_latents, Precision, TrainConfig,
    TrainState, FINAL_CHECKPOINT,
};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const VOLUME_DIR: &str = "volumes";

/// Per-structure volume file name shared by every command that writes maps.
pub fn volume_name(s: usize) -> String {
    format!("structure_{s:03}.mrc")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomsConfig {
    /// Number of distinct structures.
    pub structures: usize,
    /// Volume side D.
    pub size: usize,
    /// Random-walk persistence of every phantom, in [0, 1].
    pub connectivity_bias: f64,
}

impl Default for PhantomsConfig {
    fn default() -> Self {
        PhantomsConfig {
            structures: 10,
            size: 32,
            connectivity_bias: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory written by `simulate` and read by the other commands.
    pub data: PathBuf,
    /// Output directory of the command.
    pub out: PathBuf,
    /// Model checkpoint; empty means `<out>/model.cfts` of a training run.
    pub checkpoint: PathBuf,
    /// Directory of predicted `structure_NNN.mrc` maps scored by `eval`.
    pub volumes: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data: "data".into(),
            out: "out".into(),
            checkpoint: PathBuf::new(),
            volumes: PathBuf::new(),
        }
    }
}

/// The complete experiment description; every section is optional in JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub phantoms: PhantomsConfig,
    pub simulate: SimulateConfig,
    pub model: HypeNetConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub paths: PathsConfig,
    /// Seed of phantom generation and simulation.
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> std::result::Result<ExperimentConfig, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::input(Error::io(path, e)))?;
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.phantoms.structures == 0 {
            bad.push("phantoms.structures must be at least 1".to_string());
        }
        if self.phantoms.size < 16 || self.phantoms.size % 2 != 0 {
            bad.push(format!("phantoms.size must be even and >= 16, got {}", self.phantoms.size));
        }
        if !(0.0..=1.0).contains(&self.phantoms.connectivity_bias) {
            bad.push(format!(
                "phantoms.connectivity_bias must lie in [0, 1], got {}",
                self.phantoms.connectivity_bias
            ));
        }
        for r in [
            self.simulate.validate(),
            self.model.validate(),
            self.train.validate(),
            self.metrics.validate(),
        ] {
            if let Err(e) = r {
                bad.push(e.to_string());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// `key = default` lines for every configuration key.
    pub fn defaults_listing() -> String {
        let v = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &v, &mut lines);
        lines.join("\n")
    }
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        other => out.push(format!("  {prefix} = {other}")),
    }
}

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub const MISSING_INPUT: i32 = 2;
    pub const CONFIG_INVALID: i32 = 3;
    pub const NUMERIC: i32 = 4;

    fn input(e: Error) -> Failure {
        Failure {
            code: Self::MISSING_INPUT,
            message: e.to_string(),
        }
    }

    fn config(message: String) -> Failure {
        Failure {
            code: Self::CONFIG_INVALID,
            message,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let code = match &e {
            Error::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => Self::MISSING_INPUT,
            Error::Config(_) => Self::CONFIG_INVALID,
            Error::NonFinite { .. } => Self::NUMERIC,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CmdResult = std::result::Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "cryoforge", version, about = "Simulate, reconstruct and score fixed-pose cryo-EM datasets")]
pub struct Cli {
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true, env = "CRYOFORGE_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate phantoms and a particle dataset.
    Simulate(SimulateArgs),
    /// Train a reconstruction model on a dataset.
    Train(TrainArgs),
    /// Write one reconstructed map per structure from a trained model.
    Reconstruct(ModelArgs),
    /// Write one backprojected map per structure from labels and poses.
    Backproject(BackprojectArgs),
    /// Score predicted maps against the ground truth.
    Eval(EvalArgs),
    /// Export latents and score their class separability.
    Latents(LatentArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (paths.out; paths.data for simulate).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub structures: Option<usize>,
    /// Images per structure.
    #[arg(long)]
    pub per: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    /// Signal-to-noise ratio, or `inf` for clean images.
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Apply the microscope CTF.
    #[arg(long)]
    pub ctf: Option<bool>,
    /// Maximum in-plane shift in pixels.
    #[arg(long)]
    pub t_max: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset directory or manifest (paths.data).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Model initialization and shuffling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("unknown precision {other:?}, expected f32 or f64")),
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArg,
    /// Model checkpoint (paths.checkpoint).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image-selection seed (metrics.seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BackprojectArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArg,
    /// Wiener regularization as a fraction of the peak sampling density.
    #[arg(long, default_value_t = crate::simulate::DEFAULT_WIENER_FLOOR)]
    pub wiener_floor: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory of predicted maps (paths.volumes); used when no checkpoint is given.
    #[arg(long)]
    pub volumes: Option<PathBuf>,
    #[arg(long)]
    pub gt_threshold: Option<f64>,
    #[arg(long)]
    pub pred_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct LatentArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// PCA dimension (metrics.pca_dim).
    #[arg(long)]
    pub d1: Option<usize>,
    /// Neighbours of the classifier (metrics.knn).
    #[arg(long)]
    pub knn: Option<usize>,
}

fn base_config(c: &Common) -> std::result::Result<ExperimentConfig, Failure> {
    match &c.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn finish_config(cfg: &ExperimentConfig, dir: &Path) -> CmdResult {
    cfg.validate().map_err(|e| Failure::config(e.to_string()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RESOLVED_CONFIG);
    let text = serde_json::to_string_pretty(cfg).map_err(Error::from)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn require(path: &Path, what: &str) -> CmdResult {
    if path.as_os_str().is_empty() || !path.exists() {
        return Err(Failure {
            code: Failure::MISSING_INPUT,
            message: format!("{what} not found: {}", path.display()),
        });
    }
    Ok(())
}

fn load_dataset(path: &Path) -> std::result::Result<ParticleDataset, Failure> {
    require(path, "dataset")?;
    Ok(read_dataset(path)?)
}

/// Ground-truth maps listed in the dataset manifest.
pub fn load_ground_truth(data: &Path, ds: &ParticleDataset) -> std::result::Result<Vec<VoxelVolume>, Failure> {
    let base = if data.is_dir() {
        data.to_path_buf()
    } else {
        data.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    if ds.manifest.files.volumes.len() < ds.structure_count() {
        return Err(Failure {
            code: Failure::MISSING_INPUT,
            message: format!(
                "dataset lists {} ground-truth volumes for {} structures",
                ds.manifest.files.volumes.len(),
                ds.structure_count()
            ),
        });
    }
    ds.manifest
        .files
        .volumes
        .iter()
        .map(|f| {
            let p = base.join(f);
            require(&p, "ground-truth volume")?;
            Ok(read_mrc(&p)?)
        })
        .collect()
}

pub fn cmd_simulate(a: SimulateArgs) -> CmdResult {
    let mut cfg = base_config(&a.common)?;
    set(&mut cfg.paths.data, a.common.out);
    set(&mut cfg.phantoms.structures, a.structures);
    set(&mut cfg.simulate.n_per, a.per);
    if let Some(d) = a.size {
        cfg.phantoms.size = d;
        cfg.model.size = d;
    }
    set(&mut cfg.simulate.snr, a.snr);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.simulate.ctf, a.ctf);
    set(&mut cfg.simulate.t_max, a.t_max);
    let dir = cfg.paths.data.clone();
    finish_config(&cfg, &dir)?;

    let specs: Vec<PhantomSpec> = (0..cfg.phantoms.structures as u64)
        .map(|i| PhantomSpec::for_structure(cfg.seed, i, cfg.phantoms.connectivity_bias))
        .collect();
    let volumes = specs
        .iter()
        .map(|s| generate_phantom(s, cfg.phantoms.size, cfg.simulate.pixel_size))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(dir.join(VOLUME_DIR)).map_err(|e| Error::io(dir.join(VOLUME_DIR), e))?;
    let mut names = Vec::new();
    for (s, v) in volumes.iter().enumerate() {
        let name = format!("{VOLUME_DIR}/{}", volume_name(s));
        write_mrc(v, &dir.join(&name))?;
        names.push(name);
    }
    let mut ds = simulate_dataset(&volumes, &cfg.simulate, cfg.seed)?;
    ds.manifest.phantoms = specs;
    let manifest = write_dataset(&ds, &dir, &names)?;
    info!("wrote {} images of {} structures to {}", ds.len(), volumes.len(), manifest.display());
    Ok(())
}

fn run_training<T: Real>(ds: &ParticleDataset, cfg: &ExperimentConfig, resume: Option<&Path>) -> CmdResult {
    let mut state = match resume {
        Some(p) => {
            require(p, "checkpoint")?;
            let (state, info) = TrainState::<T>::load(p)?;
            if info.model != cfg.model {
                return Err(Failure::config(format!(
                    "model section differs from the checkpoint {}",
                    p.display()
                )));
            }
            state
        }
        None => TrainState::<T>::init(ds, &cfg.model, &cfg.train)?,
    };
    train(ds, &mut state, &cfg.train, Some(&cfg.paths.out))?;
    info!(
        "trained {} epochs, final loss {:.4e}",
        state.epoch,
        state.log.last().map_or(f64::NAN, |e| e.mean_loss)
    );
    Ok(())
}

pub fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = base_config(&a.common)?;
    set(&mut cfg.paths.out, a.common.out);
    set(&mut cfg.paths.data, a.data.data);
    set(&mut cfg.model.mode, a.mode);
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.train.batch, a.batch);
    set(&mut cfg.train.lr, a.lr);
    set(&mut cfg.train.seed, a.seed);
    set(&mut cfg.train.precision, a.precision);
    let ds = load_dataset(&cfg.paths.data)?;
    if cfg.model.size != ds.size {
        warn!("model.size {} replaced by the dataset image size {}", cfg.model.size, ds.size);
        cfg.model.size = ds.size;
    }
    let out = cfg.paths.out.clone();
    finish_config(&cfg, &out)?;
    match cfg.train.precision {
        Precision::F32 => run_training::<f32>(&ds, &cfg, a.resume.as_deref()),
        Precision::F64 => run_training::<f64>(&ds, &cfg, a.resume.as_deref()),
    }
}

fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    if cfg.paths.checkpoint.as_os_str().is_empty() {
        cfg.paths.out.join(FINAL_CHECKPOINT)
    } else {
        cfg.paths.checkpoint.clone()
    }
}

fn model_config(a: &ModelArgs) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = base_config(&a.common)?;
    set(&mut cfg.paths.out, a.common.out.clone());
    set(&mut cfg.paths.data, a.data.data.clone());
    set(&mut cfg.paths.checkpoint, a.checkpoint.clone());
    set(&mut cfg.metrics.seed, a.seed);
    Ok(cfg)
}

/// Runs `f` with the checkpoint loaded at its stored precision.
fn with_model<R>(path: &Path, f: impl ModelUser<R>) -> std::result::Result<R, Failure> {
    require(path, "checkpoint")?;
    let info = read_info(path)?;
    match info.train.precision {
        Precision::F32 => f.run(&TrainState::<f32>::load(path)?.0.model),
        Precision::F64 => f.run(&TrainState::<f64>::load(path)?.0.model),
    }
}

trait ModelUser<R> {
    fn run<T: Real>(self, model: &crate::hypenet::HypeNet<T>) -> std::result::Result<R, Failure>;
}

struct Reconstruct<'a> {
    ds: &'a ParticleDataset,
    seed: u64,
    out: &'a Path,
}

impl ModelUser<()> for Reconstruct<'_> {
    fn run<T: Real>(self, model: &crate::hypenet::HypeNet<T>) -> CmdResult {
        for (s, pick) in select_images(self.ds, self.seed).into_iter().enumerate() {
            let Some(i) = pick else {
                warn!("structure {s} has no images; skipped");
                continue;
            };
            let v = reconstruct_volume(model, &centered_hartley(self.ds, i)?, self.ds.size)?;
            write_mrc(&v, &self.out.join(volume_name(s)))?;
        }
        Ok(())
    }
}

pub fn cmd_reconstruct(a: ModelArgs) -> CmdResult {
    let cfg = model_config(&a)?;
    let ds = load_dataset(&cfg.paths.data)?;
    finish_config(&cfg, &cfg.paths.out)?;
    with_model(
        &checkpoint_path(&cfg),
        Reconstruct {
            ds: &ds,
            seed: cfg.metrics.seed,
            out: &cfg.paths.out,
        },
    )
}

pub fn cmd_backproject(a: BackprojectArgs) -> CmdResult {
    let mut cfg = base_config(&a.common)?;
    set(&mut cfg.paths.out, a.common.out);
    set(&mut cfg.paths.data, a.data.data);
    if !(a.wiener_floor.is_finite() && a.wiener_floor >= 0.0) {
        return Err(Failure::config(format!("wiener_floor must be non-negative, got {}", a.wiener_floor)));
    }
    let ds = load_dataset(&cfg.paths.data)?;
    finish_config(&cfg, &cfg.paths.out)?;
    for s in 0..ds.structure_count() {
        let idx = ds.indices_of(s);
        if idx.is_empty() {
            warn!("structure {s} has no images; skipped");
            continue;
        }
        let v = backproject_dataset(&ds, &idx, a.wiener_floor)?;
        write_mrc(&v, &cfg.paths.out.join(volume_name(s)))?;
    }
    Ok(())
}

struct Evaluate<'a> {
    ds: &'a ParticleDataset,
    gt: &'a [VoxelVolume],
    cfg: &'a ExperimentConfig,
}

impl Evaluate<'_> {
    fn score(&self, source: &(dyn VolumeSource + Sync)) -> CmdResult {
        let report = per_image_protocol(self.ds, source, self.gt, &self.cfg.metrics)?;
        for w in &report.warnings {
            warn!("{w}");
        }
        let echo = serde_json::to_value(self.cfg).map_err(Error::from)?;
        write_report(&report, &self.cfg.paths.out, &self.cfg.metrics, &echo)?;
        info!("mean FSC_AUC {:.4} over {} structures", report.mean("fsc_auc"), report.rows.len());
        Ok(())
    }
}

impl ModelUser<()> for Evaluate<'_> {
    fn run<T: Real>(self, model: &crate::hypenet::HypeNet<T>) -> CmdResult {
        self.score(model)
    }
}

pub fn cmd_eval(a: EvalArgs) -> CmdResult {
    let mut cfg = model_config(&a.model)?;
    set(&mut cfg.paths.volumes, a.volumes);
    set(&mut cfg.metrics.gt_threshold, a.gt_threshold);
    set(&mut cfg.metrics.pred_threshold, a.pred_threshold);
    let ds = load_dataset(&cfg.paths.data)?;
    let gt = load_ground_truth(&cfg.paths.data, &ds)?;
    finish_config(&cfg, &cfg.paths.out)?;
    let job = Evaluate { ds: &ds, gt: &gt, cfg: &cfg };
    if cfg.paths.volumes.as_os_str().is_empty() {
        return with_model(&checkpoint_path(&cfg), job);
    }
    let dir = &cfg.paths.volumes;
    require(dir, "volume directory")?;
    let pred = (0..ds.structure_count())
        .map(|s| {
            let p = dir.join(volume_name(s));
            require(&p, "predicted volume")?;
            Ok(read_mrc(&p)?)
        })
        .collect::<std::result::Result<Vec<_>, Failure>>()?;
    job.score(&OracleSource(&pred))
}

pub const LATENTS_CSV: &str = "latents.csv";
pub const PCA_CSV: &str = "pca.csv";
pub const CLASSIFICATION_JSON: &str = "classification.json";

struct Latents<'a> {
    ds: &'a ParticleDataset,
    cfg: &'a ExperimentConfig,
}

impl ModelUser<()> for Latents<'_> {
    fn run<T: Real>(self, model: &crate::hypenet::HypeNet<T>) -> CmdResult {
        let out = &self.cfg.paths.out;
        let z = extract_latents(model, self.ds)?;
        write_latents(&z, &out.join(LATENTS_CSV))?;
        let pca = pca_reduce(&z, self.cfg.metrics.pca_dim)?;
        if pca.rank_deficient {
            warn!("latents span fewer than {} directions", self.cfg.metrics.pca_dim);
        }
        write_latents(&pca.projected, &out.join(PCA_CSV))?;
        let c = knn_classify(&pca.projected, &self.ds.structure_ids, self.cfg.metrics.knn, self.cfg.metrics.seed)?;
        let doc = serde_json::json!({
            "accuracy": c.accuracy,
            "precision": c.precision,
            "recall": c.recall,
            "f1": c.f1,
            "train_size": c.train_size,
            "test_size": c.test_size,
            "pca_dim": self.cfg.metrics.pca_dim,
            "knn": self.cfg.metrics.knn,
            "explained_variance": pca.explained_variance,
            "rank_deficient": pca.rank_deficient,
        });
        let p = out.join(CLASSIFICATION_JSON);
        fs::write(&p, serde_json::to_string_pretty(&doc).map_err(Error::from)? + "\n").map_err(|e| Error::io(&p, e))?;
        info!("1-NN accuracy {:.4}", c.accuracy);
        Ok(())
    }
}

pub fn cmd_latents(a: LatentArgs) -> CmdResult {
    let mut cfg = model_config(&a.model)?;
    set(&mut cfg.metrics.pca_dim, a.d1);
    set(&mut cfg.metrics.knn, a.knn);
    let ds = load_dataset(&cfg.paths.data)?;
    finish_config(&cfg, &cfg.paths.out)?;
    with_model(&checkpoint_path(&cfg), Latents { ds: &ds, cfg: &cfg })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> CmdResult
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    use clap::{CommandFactory, FromArgMatches};
    let help = format!(
        "Configuration keys and defaults (JSON via --config; flags win):\n{}",
        ExperimentConfig::defaults_listing()
    );
    let matches = Cli::command()
        .after_long_help(help.clone())
        .mut_subcommands(|c| c.after_long_help(help.clone()))
        .try_get_matches_from(args);
    let matches = match matches {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            e.print().map_err(|e| Error::io("<stdout>", e))?;
            return Ok(());
        }
        Err(e) => {
            return Err(Failure::config(e.render().to_string()));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Failure::config(e.to_string()))?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::config("--threads must be at least 1".into()));
        }
        // a pool already built by an earlier call in this process is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Backproject(a) => cmd_backproject(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Latents(a) => cmd_latents(a),
    }
}
