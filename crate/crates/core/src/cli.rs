//! The `reloc` command line: `gen-gt`, `augment`, `localize`, `evaluate`.
//!
//! Every option can come from a `key = value` config file (`--config`) or
//! from `--key value` flags; flags win. Each run writes
//! `<command>.manifest.json` with the resolved configuration. Failures of
//! single frames are recorded and never abort a run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentation::{augment, AugmentationConfig};
use crate::dataset_io::{
    scan_dataset, write_pose_file, write_rgb, write_scene_coord_image, FrameEntry, FrameId, SplitManifest,
};
use crate::evaluation::{
    build_report, default_edges, inlier_histogram_csv, ErrorComponent, ErrorHistogramSpec, FrameResult,
    InlierAccumulator, COMPLETE, DEFAULT_INLIER_THRESHOLD_MM,
};
use crate::geometry::{pose_error, Intrinsics, Pose};
use crate::par;
use crate::pose_solver::{ransac_localize, RansacConfig};
use crate::predictor::{sample_grid, MapDirectorySource, OracleConfig, OracleSource, PredictionSource, WorldBox};
use crate::rng;
use crate::scene_map::scene_coords_from_depth;

pub const RESULTS_SCHEMA: &str = "reloc.results";
pub const AUGMENT_SCHEMA: &str = "reloc.augment";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    ConfigConflict(String),
    #[error("{0}")]
    InvalidConfig(String),
    #[error("{0}")]
    MissingInput(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// Stable identifier used in the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::ConfigConflict(_) => "config_conflict",
            CliError::InvalidConfig(_) => "invalid_config",
            CliError::MissingInput(_) => "missing_input",
            CliError::InvalidInput(_) => "invalid_input",
            CliError::Io { .. } => "io",
            CliError::Other(_) => "error",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::ConfigConflict(_) | CliError::InvalidConfig(_) => 2,
            _ => 1,
        }
    }

    /// `{"error":"<kind>","message":"..."}`.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

fn other<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Other(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    GenGt,
    Augment,
    Localize,
    Evaluate,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::GenGt => "gen-gt",
            Subcommand::Augment => "augment",
            Subcommand::Localize => "localize",
            Subcommand::Evaluate => "evaluate",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        [Subcommand::GenGt, Subcommand::Augment, Subcommand::Localize, Subcommand::Evaluate]
            .into_iter()
            .find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceConfig {
    Oracle(OracleConfig),
    MapDirectory { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramConfig {
    pub translation_step_cm: f64,
    pub translation_bins: usize,
    pub rotation_step_deg: f64,
    pub rotation_bins: usize,
    pub scene_coord: ErrorHistogramSpec,
}

/// Fully resolved options of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Subcommand,
    pub dataset_root: Option<PathBuf>,
    /// Scene directories under the root; empty means discover.
    pub scenes: Vec<String>,
    pub train_split: Option<PathBuf>,
    pub test_split: Option<PathBuf>,
    pub intrinsics: Intrinsics,
    pub augmentation: AugmentationConfig,
    pub ransac: RansacConfig,
    pub grid: (u32, u32),
    pub source: Option<SourceConfig>,
    pub gt_maps: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub inlier_threshold_mm: f64,
    pub histograms: HistogramConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub threads: usize,
}

/// `(key, help)`; every key is both a `--flag` and a config-file key.
const OPTIONS: &[(&str, &str)] = &[
    ("dataset-root", "scene directory, or a directory of scene directories"),
    ("scenes", "comma-separated scene names under the dataset root"),
    ("train-split", "split file overriding <scene>/TrainSplit.txt"),
    ("test-split", "split file overriding <scene>/TestSplit.txt"),
    ("fx", "focal length x, px"),
    ("fy", "focal length y, px"),
    ("cx", "principal point x, px"),
    ("cy", "principal point y, px"),
    ("width", "image width, px"),
    ("height", "image height, px"),
    ("aug-p-2d", "probability of the 2D branch"),
    ("aug-p-3d", "probability of the 3D branch"),
    ("aug-p-identity", "probability of no augmentation"),
    ("aug-trans-2d-frac", "2D translation range, fraction of image size"),
    ("aug-rot-2d-deg", "2D rotation range, degrees"),
    ("aug-scale-min", "2D minimum scale"),
    ("aug-scale-max", "2D maximum scale"),
    ("aug-rot-3d-deg", "3D maximum rotation, degrees"),
    ("aug-trans-3d-mm", "3D maximum translation, mm"),
    ("hypotheses", "RANSAC hypotheses K"),
    ("inlier-threshold-px", "RANSAC inlier threshold, px"),
    ("refine-steps", "refinement rounds R"),
    ("refine-inlier-cap", "inliers used per refinement round P"),
    ("refine-min-inliers", "minimum inliers to continue refining Q"),
    ("max-sampling-attempts", "minimal samples per hypothesis slot"),
    ("grid-width", "correspondence grid columns"),
    ("grid-height", "correspondence grid rows"),
    ("oracle", "use the noisy ground-truth oracle as prediction source"),
    ("oracle-sigma-mm", "oracle Gaussian noise, mm"),
    ("oracle-outlier-fraction", "oracle outlier fraction"),
    ("oracle-box-min", "oracle outlier box minimum x,y,z in mm"),
    ("oracle-box-max", "oracle outlier box maximum x,y,z in mm"),
    ("prediction-maps", "directory of SCRD prediction maps"),
    ("gt-maps", "directory of SCRD ground-truth maps (evaluate)"),
    ("results", "results file to evaluate"),
    ("inlier-threshold-mm", "scene-coordinate inlier threshold, mm"),
    ("hist-t-step-cm", "translation histogram step, cm"),
    ("hist-t-bins", "translation histogram bins"),
    ("hist-r-step-deg", "rotation histogram step, degrees"),
    ("hist-r-bins", "rotation histogram bins"),
    ("coord-hist-bin-mm", "scene-coordinate histogram bin width, mm"),
    ("coord-hist-bins", "scene-coordinate histogram bins"),
    ("output-dir", "output directory"),
    ("seed", "global seed"),
    ("threads", "worker threads, 0 for all cores"),
];

fn command() -> Command {
    let args: Vec<Arg> = std::iter::once(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key = value config file"),
    )
    .chain(OPTIONS.iter().map(|&(key, help)| {
        let arg = Arg::new(key).long(key).help(help);
        if key == "oracle" {
            arg.value_name("BOOL")
                .num_args(0..=1)
                .default_missing_value("true")
                .action(ArgAction::Set)
        } else {
            arg.value_name("VALUE")
        }
    }))
    .collect();
    let sub = |name: &'static str, about: &'static str| Command::new(name).about(about).args(args.clone());
    Command::new("reloc")
        .about("Scene-coordinate camera relocalization")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .subcommand(sub("gen-gt", "write ground-truth scene-coordinate maps from depth"))
        .subcommand(sub("augment", "write augmented training samples"))
        .subcommand(sub("localize", "estimate test-frame poses"))
        .subcommand(sub("evaluate", "compute metric reports from a results file"))
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::InvalidConfig(format!("config line {}: expected key = value", n + 1)))?;
        let k = k.trim().to_string();
        if k == "config" || !OPTIONS.iter().any(|(o, _)| *o == k) {
            return Err(CliError::InvalidConfig(format!("config line {}: unknown key {k:?}", n + 1)));
        }
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::InvalidConfig(format!("config line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(out)
}

fn merged_options(m: &ArgMatches) -> Result<BTreeMap<String, String>, CliError> {
    let mut opts = match m.get_one::<String>("config") {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(format!("reading config {path}")))?;
            parse_config_file(&text)?
        }
        None => BTreeMap::new(),
    };
    for (key, _) in OPTIONS {
        if let Some(v) = m.get_one::<String>(key) {
            opts.insert(key.to_string(), v.clone());
        }
    }
    Ok(opts)
}

struct Opts(BTreeMap<String, String>);

impl Opts {
    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.0.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::InvalidConfig(format!("{key}: cannot parse {v:?}"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.0.get(key).map(PathBuf::from)
    }

    fn triple(&self, key: &str, default: [f64; 3]) -> Result<[f64; 3], CliError> {
        let Some(v) = self.0.get(key) else {
            return Ok(default);
        };
        let parts: Vec<f64> = v
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::InvalidConfig(format!("{key}: expected x,y,z, got {v:?}")))?;
        <[f64; 3]>::try_from(parts).map_err(|_| CliError::InvalidConfig(format!("{key}: expected x,y,z, got {v:?}")))
    }

    fn has(&self, key: &str) -> bool {
        self.0.contains_key(key)
    }
}

/// Default oracle outlier box, mm.
pub const DEFAULT_OUTLIER_BOX_MM: f64 = 3000.0;

impl RunConfig {
    fn from_options(command: Subcommand, o: &Opts) -> Result<Self, CliError> {
        let seed: u64 = o.get("seed", 0)?;
        let k7 = Intrinsics::seven_scenes();
        let intrinsics = Intrinsics::new(
            o.get("fx", k7.fx)?,
            o.get("fy", k7.fy)?,
            o.get("cx", k7.cx)?,
            o.get("cy", k7.cy)?,
            o.get("width", k7.width)?,
            o.get("height", k7.height)?,
        )
        .map_err(|e| CliError::InvalidConfig(e.to_string()))?;

        let ad = AugmentationConfig::default();
        let augmentation = AugmentationConfig {
            p_2d: o.get("aug-p-2d", ad.p_2d)?,
            p_3d: o.get("aug-p-3d", ad.p_3d)?,
            p_identity: o.get("aug-p-identity", ad.p_identity)?,
            trans_2d_frac: o.get("aug-trans-2d-frac", ad.trans_2d_frac)?,
            rot_2d_deg: o.get("aug-rot-2d-deg", ad.rot_2d_deg)?,
            scale_range: (o.get("aug-scale-min", ad.scale_range.0)?, o.get("aug-scale-max", ad.scale_range.1)?),
            rot_3d_deg_max: o.get("aug-rot-3d-deg", ad.rot_3d_deg_max)?,
            trans_3d_mm_max: o.get("aug-trans-3d-mm", ad.trans_3d_mm_max)?,
            rng_seed: seed,
        };
        augmentation
            .validate()
            .map_err(|e| CliError::InvalidConfig(e.to_string()))?;

        let rd = RansacConfig::default();
        let grid: (u32, u32) = (o.get("grid-width", 40)?, o.get("grid-height", 40)?);
        let ransac = RansacConfig {
            n_correspondences: grid.0 as usize * grid.1 as usize,
            n_hypotheses: o.get("hypotheses", rd.n_hypotheses)?,
            inlier_threshold_px: o.get("inlier-threshold-px", rd.inlier_threshold_px)?,
            refine_steps: o.get("refine-steps", rd.refine_steps)?,
            refine_inlier_cap: o.get("refine-inlier-cap", rd.refine_inlier_cap)?,
            refine_min_inliers: o.get("refine-min-inliers", rd.refine_min_inliers)?,
            max_sampling_attempts_per_hypothesis: o.get("max-sampling-attempts", rd.max_sampling_attempts_per_hypothesis)?,
            rng_seed: seed,
        };
        ransac.validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;

        let oracle: bool = o.get("oracle", false)?;
        let maps = o.path("prediction-maps");
        let oracle_keys = ["oracle-sigma-mm", "oracle-outlier-fraction", "oracle-box-min", "oracle-box-max"];
        if !oracle && oracle_keys.iter().any(|k| o.has(k)) {
            return Err(CliError::ConfigConflict("oracle-* options given without --oracle".into()));
        }
        let source = match (oracle, maps) {
            (true, Some(_)) => {
                return Err(CliError::ConfigConflict(
                    "--oracle and --prediction-maps are mutually exclusive".into(),
                ))
            }
            (true, None) => {
                let b = DEFAULT_OUTLIER_BOX_MM;
                let cfg = OracleConfig {
                    noise_sigma_mm: o.get("oracle-sigma-mm", 10.0)?,
                    outlier_fraction: o.get("oracle-outlier-fraction", 0.0)?,
                    outlier_bounds: WorldBox {
                        min: o.triple("oracle-box-min", [-b; 3])?,
                        max: o.triple("oracle-box-max", [b; 3])?,
                    },
                    rng_seed: seed,
                };
                cfg.validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;
                Some(SourceConfig::Oracle(cfg))
            }
            (false, Some(dir)) => Some(SourceConfig::MapDirectory { dir }),
            (false, None) => None,
        };

        let cfg = RunConfig {
            command,
            dataset_root: o.path("dataset-root"),
            scenes: o
                .0
                .get("scenes")
                .map(|s| s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect())
                .unwrap_or_default(),
            train_split: o.path("train-split"),
            test_split: o.path("test-split"),
            intrinsics,
            augmentation,
            ransac,
            grid,
            source,
            gt_maps: o.path("gt-maps"),
            results: o.path("results"),
            inlier_threshold_mm: o.get("inlier-threshold-mm", DEFAULT_INLIER_THRESHOLD_MM)?,
            histograms: HistogramConfig {
                translation_step_cm: o.get("hist-t-step-cm", 1.0)?,
                translation_bins: o.get("hist-t-bins", 50)?,
                rotation_step_deg: o.get("hist-r-step-deg", 1.0)?,
                rotation_bins: o.get("hist-r-bins", 50)?,
                scene_coord: ErrorHistogramSpec {
                    bin_width_mm: o.get("coord-hist-bin-mm", 10.0)?,
                    bins: o.get("coord-hist-bins", 50)?,
                },
            },
            output_dir: o
                .path("output-dir")
                .ok_or_else(|| CliError::MissingInput("--output-dir is required".into()))?,
            seed,
            threads: o.get("threads", 0)?,
        };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CliError> {
        let h = &self.histograms;
        if !(h.translation_step_cm > 0.0 && h.rotation_step_deg > 0.0 && h.scene_coord.bin_width_mm > 0.0) {
            return Err(CliError::InvalidConfig("histogram steps must be positive".into()));
        }
        if !(self.inlier_threshold_mm > 0.0) {
            return Err(CliError::InvalidConfig("inlier-threshold-mm must be positive".into()));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 || self.grid.0 > self.intrinsics.width || self.grid.1 > self.intrinsics.height {
            return Err(CliError::InvalidConfig("grid must fit inside the image".into()));
        }
        match self.command {
            Subcommand::Localize if self.source.is_none() => Err(CliError::MissingInput(
                "localize needs --oracle or --prediction-maps".into(),
            )),
            Subcommand::GenGt | Subcommand::Augment | Subcommand::Localize if self.dataset_root.is_none() => {
                Err(CliError::MissingInput("--dataset-root is required".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Parses arguments (including the program name) into a config.
pub fn parse_args<I, T>(args: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let m = command()
        .try_get_matches_from(args)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cmd = Subcommand::from_name(name).expect("known subcommand");
    RunConfig::from_options(cmd, &Opts(merged_options(sub)?))
}

/// Runs one invocation; returns the process exit code. Errors are printed to
/// stderr as a single JSON line.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let m = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            // --help, --version
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprintln!("{}", CliError::Usage(e.to_string().trim().to_string()).to_json_line());
            return 2;
        }
    };
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cmd = Subcommand::from_name(name).expect("known subcommand");
    let result = merged_options(sub)
        .and_then(|o| RunConfig::from_options(cmd, &Opts(o)))
        .and_then(|cfg| run(&cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.exit_code()
        }
    }
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(format!("creating {}", cfg.output_dir.display())))?;
    write_manifest(cfg)?;
    match cfg.command {
        Subcommand::GenGt => cmd_gen_gt(cfg).map(|_| ()),
        Subcommand::Augment => cmd_augment(cfg).map(|_| ()),
        Subcommand::Localize => cmd_localize(cfg).map(|_| ()),
        Subcommand::Evaluate => cmd_evaluate(cfg).map(|_| ()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(format!("creating {}", parent.display())))?;
    }
    fs::write(path, contents).map_err(io_err(format!("writing {}", path.display())))
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config: &'a RunConfig,
}

fn write_manifest(cfg: &RunConfig) -> Result<(), CliError> {
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: cfg,
    };
    let json = serde_json::to_string_pretty(&m).map_err(other)?;
    write_file(&cfg.output_dir.join(format!("{}.manifest.json", cfg.command.name())), json + "\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Split {
    Train,
    Test,
}

/// Scene directories to process, sorted by name.
fn scene_roots(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let root = cfg
        .dataset_root
        .as_ref()
        .ok_or_else(|| CliError::MissingInput("--dataset-root is required".into()))?;
    if !root.is_dir() {
        return Err(CliError::MissingInput(format!("dataset root {} does not exist", root.display())));
    }
    if !cfg.scenes.is_empty() {
        let mut out: Vec<PathBuf> = cfg.scenes.iter().map(|s| root.join(s)).collect();
        out.sort();
        for s in &out {
            if !s.is_dir() {
                return Err(CliError::MissingInput(format!("scene {} does not exist", s.display())));
            }
        }
        return Ok(out);
    }
    let is_scene = |p: &Path| p.join("TrainSplit.txt").is_file() || p.join("TestSplit.txt").is_file();
    if is_scene(root) {
        return Ok(vec![root.clone()]);
    }
    let mut out = Vec::new();
    for e in fs::read_dir(root).map_err(io_err(format!("listing {}", root.display())))? {
        let p = e.map_err(io_err("listing dataset root"))?.path();
        if p.is_dir() && is_scene(&p) {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::MissingInput(format!("no scenes with split files under {}", root.display())));
    }
    Ok(out)
}

fn split_manifest(cfg: &RunConfig, scene: &Path, split: Split) -> Result<Option<SplitManifest>, CliError> {
    let (over, name) = match split {
        Split::Train => (&cfg.train_split, "TrainSplit.txt"),
        Split::Test => (&cfg.test_split, "TestSplit.txt"),
    };
    let path = over.clone().unwrap_or_else(|| scene.join(name));
    if !path.is_file() {
        return Ok(None);
    }
    SplitManifest::load(&path)
        .map(Some)
        .map_err(io_err(format!("reading {}", path.display())))
}

/// Frame entries of the given splits over all scenes, sorted by frame id.
fn frame_entries(cfg: &RunConfig, splits: &[Split]) -> Result<Vec<FrameEntry>, CliError> {
    let mut entries = Vec::new();
    for scene in scene_roots(cfg)? {
        let mut seqs = Vec::new();
        for &s in splits {
            if let Some(m) = split_manifest(cfg, &scene, s)? {
                seqs.extend(m.sequences);
            }
        }
        if seqs.is_empty() {
            log::warn!("{}: no split file, skipping", scene.display());
            continue;
        }
        let ds = scan_dataset(&scene, &SplitManifest::new(seqs), cfg.intrinsics)
            .map_err(|e| CliError::MissingInput(e.to_string()))?;
        for issue in &ds.issues {
            log::warn!("{issue}");
        }
        entries.extend(ds.frames);
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(entries)
}

/// Per-run outcome counts, written as `<command>.summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub frames: usize,
    pub succeeded: usize,
    pub failures: Vec<FrameFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFailure {
    pub frame: String,
    pub reason: String,
}

fn write_summary(cfg: &RunConfig, outcomes: Vec<(FrameId, Result<(), String>)>) -> Result<RunSummary, CliError> {
    let frames = outcomes.len();
    let failures: Vec<FrameFailure> = outcomes
        .into_iter()
        .filter_map(|(id, r)| {
            r.err().map(|reason| {
                log::warn!("{id}: {reason}");
                FrameFailure {
                    frame: id.to_string(),
                    reason,
                }
            })
        })
        .collect();
    let summary = RunSummary {
        command: cfg.command.name().to_string(),
        frames,
        succeeded: frames - failures.len(),
        failures,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(other)?;
    write_file(&cfg.output_dir.join(format!("{}.summary.json", cfg.command.name())), json + "\n")?;
    log::info!("{}: {}/{} frames ok", summary.command, summary.succeeded, summary.frames);
    Ok(summary)
}

/// Writes `<output>/gt/<scene>/<seq>/frame-XXXXXX.scrd` for every frame of
/// both splits.
pub fn cmd_gen_gt(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let entries = frame_entries(cfg, &[Split::Train, Split::Test])?;
    let gt_dir = cfg.output_dir.join("gt");
    let outcomes = par::with_threads(cfg.threads, || {
        par::map_slice(&entries, |e| {
            let r = (|| {
                let f = e.load(&cfg.intrinsics).map_err(|x| x.to_string())?;
                let (coords, mask) = scene_coords_from_depth(&f.depth, &f.pose, &f.intrinsics).map_err(|x| x.to_string())?;
                let path = MapDirectorySource::map_path(&gt_dir, &f.id);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|x| x.to_string())?;
                }
                write_scene_coord_image(&path, &coords, Some(&mask)).map_err(|x| x.to_string())
            })();
            (e.id.clone(), r)
        })
    });
    write_summary(cfg, outcomes)
}

fn pose_row_major(p: &Pose) -> [f64; 12] {
    let m = p.to_matrix();
    std::array::from_fn(|i| m[(i / 4, i % 4)])
}

#[derive(Serialize)]
struct AugmentRecord<'a> {
    frame: String,
    augmentation: &'a crate::augmentation::Augmentation,
    warp: Option<crate::augmentation::ImageWarp>,
    /// Camera-to-world pose of the sample, row-major 3x4, mm.
    pose: [f64; 12],
    masked_pixels: usize,
}

/// Writes one augmented sample per training frame under
/// `<output>/augmented/<scene>/<seq>/` plus `augment.jsonl` provenance.
pub fn cmd_augment(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let entries = frame_entries(cfg, &[Split::Train])?;
    let out_dir = cfg.output_dir.join("augmented");
    let results = par::with_threads(cfg.threads, || {
        par::map_slice(&entries, |e| {
            let r = (|| {
                let f = e.load(&cfg.intrinsics).map_err(|x| x.to_string())?;
                let (coords, mask) = scene_coords_from_depth(&f.depth, &f.pose, &f.intrinsics).map_err(|x| x.to_string())?;
                let mut rng = cfg.augmentation.frame_rng(&f.id.to_string());
                let s = augment(&cfg.augmentation, &mut rng, &f.rgb, &coords, &mask, &f.intrinsics, &f.pose)
                    .map_err(|x| x.to_string())?;
                let dir = out_dir.join(&f.id.scene).join(&f.id.sequence);
                fs::create_dir_all(&dir).map_err(|x| x.to_string())?;
                let stem = f.id.stem();
                write_rgb(&dir.join(format!("{stem}.color.png")), &s.rgb).map_err(|x| x.to_string())?;
                write_scene_coord_image(&dir.join(format!("{stem}.scrd")), &s.coords, Some(&s.mask))
                    .map_err(|x| x.to_string())?;
                write_pose_file(&dir.join(format!("{stem}.pose.txt")), &s.pose).map_err(|x| x.to_string())?;
                let rec = AugmentRecord {
                    frame: f.id.to_string(),
                    augmentation: &s.augmentation,
                    warp: s.warp,
                    pose: pose_row_major(&s.pose),
                    masked_pixels: s.mask.count(),
                };
                serde_json::to_string(&rec).map_err(|x| x.to_string())
            })();
            (e.id.clone(), r)
        })
    });
    let mut lines = vec![serde_json::json!({ "schema": AUGMENT_SCHEMA, "version": SCHEMA_VERSION }).to_string()];
    let mut outcomes = Vec::with_capacity(results.len());
    for (id, r) in results {
        outcomes.push((id, r.map(|line| lines.push(line))));
    }
    write_file(&cfg.output_dir.join("augment.jsonl"), lines.join("\n") + "\n")?;
    write_summary(cfg, outcomes)
}

fn make_source(cfg: &RunConfig) -> Result<Box<dyn PredictionSource>, CliError> {
    match &cfg.source {
        Some(SourceConfig::Oracle(o)) => Ok(Box::new(
            OracleSource::new(*o).map_err(|e| CliError::InvalidConfig(e.to_string()))?,
        )),
        Some(SourceConfig::MapDirectory { dir }) => {
            if !dir.is_dir() {
                return Err(CliError::MissingInput(format!("prediction maps {} not found", dir.display())));
            }
            Ok(Box::new(MapDirectorySource::new(dir.clone())))
        }
        None => Err(CliError::MissingInput("no prediction source".into())),
    }
}

/// Predict, sample the grid, run RANSAC and score against ground truth.
pub fn localize_frame(cfg: &RunConfig, source: &dyn PredictionSource, entry: &FrameEntry) -> FrameResult {
    let id = entry.id.to_string();
    let scene = entry.id.scene.clone();
    let fail = |reason: String| FrameResult::failed(id.clone(), scene.clone(), reason);
    let frame = match entry.load(&cfg.intrinsics) {
        Ok(f) => f,
        Err(e) => return fail(e.to_string()),
    };
    let (pred, mask) = match source.predict(&frame) {
        Ok(p) => p,
        Err(e) => return fail(e.to_string()),
    };
    let corrs = match sample_grid(&pred, &mask, cfg.grid.0, cfg.grid.1) {
        Ok(c) => c,
        Err(e) => return fail(e.to_string()),
    };
    let ransac = RansacConfig {
        rng_seed: rng::stream_seed(rng::frame_seed(cfg.seed, &id), "ransac", 0),
        ..cfg.ransac.clone()
    };
    match ransac_localize(&corrs, &frame.intrinsics, &ransac) {
        Ok(res) => FrameResult::localized(
            id.clone(),
            scene.clone(),
            &res.pose,
            pose_error(&res.pose, &frame.pose),
            res.inlier_count,
            res.diagnostics,
        ),
        Err(e) => fail(e.to_string()),
    }
}

/// Localizes every test frame and writes `results.jsonl`: a header object,
/// then one record per frame ordered by frame id.
pub fn cmd_localize(cfg: &RunConfig) -> Result<Vec<FrameResult>, CliError> {
    let entries = frame_entries(cfg, &[Split::Test])?;
    let source = make_source(cfg)?;
    let source = source.as_ref();
    let results = par::with_threads(cfg.threads, || par::map_slice(&entries, |e| localize_frame(cfg, source, e)));
    let mut lines = vec![serde_json::json!({
        "schema": RESULTS_SCHEMA,
        "version": SCHEMA_VERSION,
        "seed": cfg.seed,
    })
    .to_string()];
    for r in &results {
        lines.push(serde_json::to_string(r).map_err(other)?);
    }
    write_file(&cfg.output_dir.join("results.jsonl"), lines.join("\n") + "\n")?;
    write_summary(
        cfg,
        entries
            .iter()
            .zip(&results)
            .map(|(e, r)| (e.id.clone(), r.failure.clone().map_or(Ok(()), Err)))
            .collect(),
    )?;
    Ok(results)
}

/// Reads a results file written by `localize`.
pub fn read_results(path: &Path) -> Result<Vec<FrameResult>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => CliError::MissingInput(format!("results file {} not found", path.display())),
        _ => CliError::Io {
            context: format!("reading {}", path.display()),
            source: e,
        },
    })?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: serde_json::Value = lines
        .next()
        .ok_or_else(|| CliError::InvalidInput("results file is empty".into()))
        .and_then(|l| serde_json::from_str(l).map_err(|e| CliError::InvalidInput(format!("results header: {e}"))))?;
    if header["schema"] != RESULTS_SCHEMA || header["version"] != SCHEMA_VERSION {
        return Err(CliError::InvalidInput(format!("unsupported results header {header}")));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::InvalidInput(format!("results line {}: {e}", i + 2)))
        })
        .collect()
}

/// Writes `metrics.csv`, `failures.csv`, cumulative histograms under
/// `histograms/`, and, when both prediction and ground-truth map directories
/// are given, `scene_coords.csv` plus error histograms.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let path = cfg.results.clone().unwrap_or_else(|| cfg.output_dir.join("results.jsonl"));
    let results = read_results(&path)?;
    if results.is_empty() {
        return Err(CliError::InvalidInput(format!("{} has no frames", path.display())));
    }
    let h = &cfg.histograms;
    let t_edges = default_edges(h.translation_step_cm, h.translation_bins);
    let r_edges = default_edges(h.rotation_step_deg, h.rotation_bins);
    let report = build_report(&results, &t_edges, &r_edges).map_err(other)?;
    let out = &cfg.output_dir;
    let metrics = report.metrics_csv().map_err(other)?;
    write_file(&out.join("metrics.csv"), &metrics)?;
    write_file(&out.join("failures.csv"), report.failures_csv().map_err(other)?)?;
    for scene in report.scene_names() {
        for c in [ErrorComponent::Translation, ErrorComponent::Rotation] {
            let csv = report.histogram_csv(&scene, c).expect("scene from report").map_err(other)?;
            write_file(&out.join("histograms").join(format!("{scene}_{}.csv", c.name())), csv)?;
        }
    }
    if let (Some(SourceConfig::MapDirectory { dir }), Some(gt)) = (&cfg.source, &cfg.gt_maps) {
        evaluate_scene_coords(cfg, &results, dir, gt)?;
    }
    log::info!("metrics:\n{metrics}");
    Ok(())
}

fn evaluate_scene_coords(cfg: &RunConfig, results: &[FrameResult], pred_dir: &Path, gt_dir: &Path) -> Result<(), CliError> {
    let spec = cfg.histograms.scene_coord;
    let new_acc = || InlierAccumulator::new(cfg.inlier_threshold_mm, spec).map_err(other);
    let mut per_scene: BTreeMap<String, (InlierAccumulator, usize)> = BTreeMap::new();
    let mut complete = (new_acc()?, 0usize);
    for r in results {
        let id: FrameId = r.frame.parse().map_err(CliError::InvalidInput)?;
        let load = |dir: &Path| crate::dataset_io::load_scene_coord_image(&MapDirectorySource::map_path(dir, &id));
        let (pred, gt) = match (load(pred_dir), load(gt_dir)) {
            (Ok((p, _)), Ok(g)) => (p, g),
            (Err(e), _) | (_, Err(e)) => {
                log::warn!("{id}: scene-coordinate maps unavailable: {e}");
                continue;
            }
        };
        let entry = match per_scene.entry(id.scene.clone()) {
            std::collections::btree_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::btree_map::Entry::Vacant(v) => v.insert((new_acc()?, 0)),
        };
        if let Err(e) = entry.0.add(&pred, &gt.0, &gt.1) {
            log::warn!("{id}: {e}");
            continue;
        }
        entry.1 += 1;
        complete.0.add(&pred, &gt.0, &gt.1).map_err(other)?;
        complete.1 += 1;
    }
    if complete.1 == 0 {
        return Err(CliError::MissingInput("no frame had both prediction and ground-truth maps".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scene", "frames", "masked_pixels", "inlier_fraction", "mean_inlier_error_mm", "threshold_mm"])
        .map_err(other)?;
    let rows = per_scene
        .iter()
        .map(|(s, (a, n))| (s.as_str(), a, *n))
        .chain(std::iter::once((COMPLETE, &complete.0, complete.1)));
    for (scene, acc, n) in rows {
        let stats = acc.finish().map_err(other)?;
        w.write_record([
            scene.to_string(),
            n.to_string(),
            stats.masked_pixels.to_string(),
            stats.inlier_fraction.to_string(),
            stats.mean_inlier_error_mm.map_or(String::new(), |m| m.to_string()),
            cfg.inlier_threshold_mm.to_string(),
        ])
        .map_err(other)?;
        let csv = inlier_histogram_csv(&stats).map_err(other)?;
        write_file(&cfg.output_dir.join("histograms").join(format!("{scene}_scene_coord.csv")), csv)?;
    }
    let bytes = w.into_inner().map_err(|e| other(e.error()))?;
    write_file(&cfg.output_dir.join("scene_coords.csv"), bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(extra: &[&str]) -> Vec<String> {
        ["reloc"].iter().chain(extra).map(|s| s.to_string()).collect()
    }

    #[test]
    fn oracle_and_maps_conflict() {
        let e = parse_args(args(&["localize", "--dataset-root", "x", "--output-dir", "o", "--oracle", "--prediction-maps", "m"]))
            .unwrap_err();
        assert_eq!(e.kind(), "config_conflict");
        assert_eq!(e.exit_code(), 2);
        let line: serde_json::Value = serde_json::from_str(&e.to_json_line()).unwrap();
        assert_eq!(line["error"], "config_conflict");
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "# comment\nseed = 5\nhypotheses = 64\noutput-dir = out\noracle = true\noracle-sigma-mm = 3\n").unwrap();
        let cfg = parse_args(args(&[
            "localize",
            "--config",
            file.to_str().unwrap(),
            "--dataset-root",
            "d",
            "--hypotheses",
            "128",
        ]))
        .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.ransac.n_hypotheses, 128);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        match cfg.source {
            Some(SourceConfig::Oracle(o)) => assert_eq!(o.noise_sigma_mm, 3.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_file_errors() {
        assert_eq!(parse_config_file("bogus = 1").unwrap_err().kind(), "invalid_config");
        assert_eq!(parse_config_file("seed = 1\nseed = 2").unwrap_err().kind(), "invalid_config");
        assert_eq!(parse_config_file("seed").unwrap_err().kind(), "invalid_config");
        let m = parse_config_file("  seed=7  # trailing\n\n").unwrap();
        assert_eq!(m["seed"], "7");
    }

    #[test]
    fn missing_and_invalid_options() {
        assert_eq!(parse_args(args(&["evaluate"])).unwrap_err().kind(), "missing_input");
        assert_eq!(
            parse_args(args(&["localize", "--output-dir", "o", "--dataset-root", "d"])).unwrap_err().kind(),
            "missing_input"
        );
        assert_eq!(
            parse_args(args(&["evaluate", "--output-dir", "o", "--seed", "x"])).unwrap_err().kind(),
            "invalid_config"
        );
        assert_eq!(
            parse_args(args(&["evaluate", "--output-dir", "o", "--oracle-sigma-mm", "3"])).unwrap_err().kind(),
            "config_conflict"
        );
        assert_eq!(parse_args(args(&["frobnicate"])).unwrap_err().kind(), "usage");
    }

    #[test]
    fn defaults() {
        let cfg = parse_args(args(&["evaluate", "--output-dir", "o"])).unwrap();
        assert_eq!(cfg.ransac, RansacConfig { n_correspondences: 1600, ..RansacConfig::default() });
        assert_eq!(cfg.grid, (40, 40));
        assert_eq!(cfg.inlier_threshold_mm, 100.0);
        assert_eq!(cfg.intrinsics, Intrinsics::seven_scenes());
    }
}
