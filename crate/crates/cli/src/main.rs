//! `defotox` command-line entry point.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use config::{parse_growth, parse_stage, parse_target, RunConfig, OUT_ROOT_ENV};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "defotox", version, about = "Deformation-based toxicity prediction pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (default: $DEFOTOX_OUT_ROOT/<subcommand>, or runs/<subcommand>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Synthetic phantom with ground-truth deformations and landmarks.
    Phantom(PhantomArgs),
    /// Synthetic cohort with deformation-driven labels.
    Cohort(CohortArgs),
    /// Isotropic resampling, normalization, cropping and masking of a volume.
    Preprocess(PreprocessArgs),
    /// Rigid registration of a moving onto a fixed volume.
    RegRigid(RigidArgs),
    /// Trains a registration UNet on a cohort directory.
    RegTrain(RegTrainArgs),
    /// Two-stage registration of a planning CT to a cone-beam scan.
    RegApply(RegApplyArgs),
    /// Jacobian matrix field and determinant of a displacement field.
    Jacobian(JacobianArgs),
    /// Trains the toxicity classifier on one fraction.
    ToxTrain(ToxArgs),
    /// Cross-validated ablation over branch combinations.
    Ablate(ToxArgs),
    /// Cross-validated performance against fraction index.
    Evolve(ToxArgs),
    /// Gradient verification of every layer and loss.
    Gradcheck,
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Phantom(_) => "phantom",
            Cmd::Cohort(_) => "cohort",
            Cmd::Preprocess(_) => "preprocess",
            Cmd::RegRigid(_) => "reg-rigid",
            Cmd::RegTrain(_) => "reg-train",
            Cmd::RegApply(_) => "reg-apply",
            Cmd::Jacobian(_) => "jacobian",
            Cmd::ToxTrain(_) => "tox-train",
            Cmd::Ablate(_) => "ablate",
            Cmd::Evolve(_) => "evolve",
            Cmd::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long)]
    deformation_mm: Option<f64>,
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args, Debug)]
struct CohortArgs {
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    strength: Option<f64>,
    /// linear or constant
    #[arg(long)]
    growth: Option<String>,
    /// ng_tube, hospitalization or radionecrosis
    #[arg(long)]
    target: Option<String>,
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<u32>>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    spacing_mm: Option<f64>,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    crop: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct RigidArgs {
    #[arg(long)]
    fixed: Option<PathBuf>,
    #[arg(long)]
    moving: Option<PathBuf>,
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Args, Debug)]
struct RegTrainArgs {
    #[arg(long)]
    cohort: Option<PathBuf>,
    /// modality or anatomy
    #[arg(long)]
    stage: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args, Debug)]
struct RegApplyArgs {
    #[arg(long)]
    pct: Option<PathBuf>,
    #[arg(long)]
    cbct: Option<PathBuf>,
    /// Trained modality model; the direct-field engine when absent.
    #[arg(long)]
    model_a: Option<PathBuf>,
    /// Trained anatomy model; the direct-field engine when absent.
    #[arg(long)]
    model_b: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct JacobianArgs {
    #[arg(long)]
    dvf: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ToxArgs {
    /// Cohort directory; a synthetic cohort is generated when absent.
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    fraction: Option<u32>,
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<u32>>,
    /// Subset of cbct,jf,clinical
    #[arg(long, value_delimiter = ',')]
    branches: Option<Vec<String>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    strength: Option<f64>,
    #[arg(long)]
    growth: Option<String>,
}

/// Machine-parsable failure written to standard error.
#[derive(Debug, Serialize)]
pub struct Failure {
    pub error: String,
    pub message: String,
}

impl From<defotox::Error> for Failure {
    fn from(e: defotox::Error) -> Self {
        Failure {
            error: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

impl Failure {
    pub fn new(kind: &str, message: impl Into<String>) -> Self {
        Failure {
            error: kind.to_string(),
            message: message.into(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut c = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let o = &cli.common;
    if let Some(v) = o.threads {
        c.threads = v;
    }
    if let Some(v) = &o.out {
        c.out = Some(v.clone());
    }
    if let Some(v) = o.seed {
        c.seed = v;
    }
    match &cli.cmd {
        Cmd::Phantom(a) => {
            set(&mut c.deformation_mm, a.deformation_mm);
            set(&mut c.grid, a.grid);
        }
        Cmd::Cohort(a) => {
            set(&mut c.synthetic.n, a.n);
            set(&mut c.grid, a.grid);
            set(&mut c.synthetic.effect.strength, a.strength);
            if let Some(g) = &a.growth {
                c.synthetic.effect.growth = parse_growth(g)?;
            }
            if let Some(t) = &a.target {
                c.synthetic.effect.target = parse_target(t)?;
            }
            if let Some(f) = &a.fractions {
                c.synthetic.fractions = f.clone();
            }
        }
        Cmd::Preprocess(a) => {
            set_some(&mut c.input, a.input.clone());
            set_some(&mut c.spacing_mm, a.spacing_mm);
            if let Some(v) = &a.crop {
                c.crop = Some([v[0], v[1], v[2]]);
            }
        }
        Cmd::RegRigid(a) => {
            set_some(&mut c.fixed, a.fixed.clone());
            set_some(&mut c.moving, a.moving.clone());
            set(&mut c.rigid_levels, a.levels);
        }
        Cmd::RegTrain(a) => {
            set_some(&mut c.cohort, a.cohort.clone());
            if let Some(s) = &a.stage {
                c.stage = parse_stage(s)?;
            }
            set(&mut c.dir.epochs, a.epochs);
            if let Some(l) = a.lambda {
                match c.stage {
                    defotox::regnet::Stage::Modality => c.lambda_modality = l,
                    defotox::regnet::Stage::Anatomy => c.lambda_anatomy = l,
                }
            }
        }
        Cmd::RegApply(a) => {
            set_some(&mut c.pct, a.pct.clone());
            set_some(&mut c.cbct, a.cbct.clone());
            set_some(&mut c.model_a, a.model_a.clone());
            set_some(&mut c.model_b, a.model_b.clone());
        }
        Cmd::Jacobian(a) => set_some(&mut c.dvf, a.dvf.clone()),
        Cmd::ToxTrain(a) | Cmd::Ablate(a) | Cmd::Evolve(a) => {
            set_some(&mut c.cohort, a.cohort.clone());
            set(&mut c.fraction, a.fraction);
            if let Some(f) = &a.fractions {
                c.fractions = f.clone();
            }
            if let Some(b) = &a.branches {
                c.branches = b.clone();
            }
            set(&mut c.classifier.epochs, a.epochs);
            set(&mut c.synthetic.effect.strength, a.strength);
            if let Some(g) = &a.growth {
                c.synthetic.effect.growth = parse_growth(g)?;
            }
        }
        Cmd::Gradcheck => {}
    }
    Ok(c)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_some<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn out_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    match &cfg.out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(name),
    }
}

pub const PARTIAL_MARKER: &str = "PARTIAL.json";
const STAGING: &str = ".staging";

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    defotox::Error::io(path, e).into()
}

/// Runs `f` against a staging directory inside `out`; its contents move into
/// `out` only on success. A failed run leaves a partial-run marker and
/// nothing else.
fn staged(out: &Path, name: &str, cfg: &RunConfig, f: impl FnOnce(&Path) -> CliResult<()>) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let staging = out.join(STAGING);
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| io_failure(&staging, e))?;
    }
    std::fs::create_dir_all(&staging).map_err(|e| io_failure(&staging, e))?;
    let marker = out.join(PARTIAL_MARKER);
    let result = commands::write_json(&staging.join("config.json"), cfg).and_then(|_| f(&staging));
    match result {
        Ok(()) => {
            for entry in std::fs::read_dir(&staging).map_err(|e| io_failure(&staging, e))? {
                let entry = entry.map_err(|e| io_failure(&staging, e))?;
                let dest = out.join(entry.file_name());
                if dest.is_dir() {
                    std::fs::remove_dir_all(&dest).map_err(|e| io_failure(&dest, e))?;
                }
                std::fs::rename(entry.path(), &dest).map_err(|e| io_failure(&dest, e))?;
            }
            std::fs::remove_dir_all(&staging).map_err(|e| io_failure(&staging, e))?;
            if marker.exists() {
                std::fs::remove_file(&marker).map_err(|e| io_failure(&marker, e))?;
            }
            Ok(())
        }
        Err(fail) => {
            let _ = std::fs::remove_dir_all(&staging);
            let body = serde_json::json!({ "subcommand": name, "error": fail.error, "message": fail.message });
            let _ = std::fs::write(&marker, serde_json::to_vec_pretty(&body).unwrap_or_default());
            Err(fail)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve(&cli)?;
    defotox::par::init_threads(cfg.threads);
    let name = cli.cmd.name();
    let out = out_dir(&cfg, name);
    log::info!("{name}: writing to {}", out.display());
    staged(&out, name, &cfg, |dir| commands::dispatch(&cli.cmd, &cfg, dir))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let f = Failure::new("usage", e.to_string().trim());
            eprintln!("{}", serde_json::to_string(&f).expect("serializable"));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", serde_json::to_string(&f).expect("serializable"));
            ExitCode::from(1)
        }
    }
}
