mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use surfseq::data::{generate_synthetic, Dataset, Split, SynthConfig, DEFAULT_NOISE};
use surfseq::error::ErrorClass;
use surfseq::geom::Icosphere;
use surfseq::model::{Checkpoint, Head, SiT, SiTConfig};
use surfseq::patching::build_ico_patch_table;
use surfseq::resample::{resample_signal, rotate_signal, Rotation};
use surfseq::train::{self, log_csv, Job, LabelScale, Optimizer, Setup, TrainOutcome};
use surfseq::{binio, PatchTable, SurfaceSignal, TriMesh};

use crate::config::{default_patch_order, Overlay};

#[derive(Parser, Debug)]
#[command(
    name = "surfseq",
    version,
    about = "Surface vision transformers on icospheric patch sequences"
)]
struct Cli {
    /// Worker threads for batch assembly
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Run everything on one thread
    #[arg(long, global = true)]
    deterministic: bool,

    /// Random seed
    #[arg(long, global = true, env = "SURFSEQ_SEED", hide_env_values = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write an icosphere mesh
    Tessellate {
        /// Subdivision order
        #[arg(long)]
        order: u32,
        /// Output mesh file
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the patch table of a high-order mesh over a low-order one
    PatchTable {
        /// High-order icosphere mesh
        #[arg(long)]
        high: PathBuf,
        /// Low-order icosphere mesh whose faces define the patches
        #[arg(long)]
        low: PathBuf,
        /// Output table file
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample a signal between meshes, optionally rotating it first
    Resample {
        /// Input signal file
        #[arg(long)]
        signal: PathBuf,
        /// Mesh the signal lives on
        #[arg(long)]
        src: PathBuf,
        /// Mesh to resample onto
        #[arg(long)]
        dst: PathBuf,
        /// Output signal file
        #[arg(long)]
        out: PathBuf,
        /// Rotation applied on the source mesh, as AXIS:DEGREES (e.g. z:15)
        #[arg(long, value_parser = Rotation::from_str)]
        rotate: Option<Rotation>,
    },
    /// Generate a synthetic age-regression dataset
    GenData {
        /// Grid order of the signals
        #[arg(long)]
        order: u32,
        /// Number of samples
        #[arg(long)]
        samples: usize,
        /// Noise amplitude
        #[arg(long, default_value_t = DEFAULT_NOISE)]
        noise: f64,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-patch-prediction pretraining
    Pretrain(RunArgs),
    /// Supervised training, from scratch or from a checkpoint
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Initialize from this checkpoint (all but the head)
        #[arg(long)]
        init: Option<PathBuf>,
        /// Add the scan-age embedding
        #[arg(long)]
        deconfound: bool,
        /// Prediction task
        #[arg(long, value_enum, default_value_t = Task::Regression)]
        task: Task,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        /// Dataset manifest
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint to evaluate
        #[arg(long)]
        ckpt: PathBuf,
        /// Split to score: train, val or test
        #[arg(long, default_value = "test")]
        split: Split,
        /// Also write per-sample predictions here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict one signal
    Predict {
        /// Signal file on the checkpoint's grid
        #[arg(long)]
        signal: PathBuf,
        /// Checkpoint to predict with
        #[arg(long)]
        ckpt: PathBuf,
        /// Scan age in weeks, needed by deconfounded models
        #[arg(long)]
        scan_age: Option<f64>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Dataset manifest
    #[arg(long)]
    manifest: PathBuf,
    /// Architecture preset
    #[arg(long, value_enum)]
    model: Preset,
    /// TOML file of training settings; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Patch grid order [default: min(2, grid order - 3), or the --init checkpoint's]
    #[arg(long)]
    patch_order: Option<u32>,
    /// Optimizer [default: sgd-momentum]
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Learning rate [default: 1e-3, or 1e-4 with --init]
    #[arg(long)]
    lr: Option<f64>,
    /// SGD momentum [default: 0.9]
    #[arg(long)]
    momentum: Option<f64>,
    /// Batch size [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Optimizer steps [default: 2000, or 1000 with --init]
    #[arg(long)]
    iterations: Option<usize>,
    /// Rotation angles in degrees, comma separated, or "none" [default: 5,10,15,20,25,30]
    #[arg(long)]
    augment: Option<String>,
    /// Dropout probability [default: 0]
    #[arg(long)]
    dropout: Option<f64>,
    /// Sample gestational-age categories equally
    #[arg(long)]
    balanced: bool,
    /// Validate every this many steps [default: 100]
    #[arg(long)]
    val_every: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Preset {
    /// 12 layers, 3 heads, D=192
    Tiny,
    /// 12 layers, 6 heads, D=384
    Small,
    /// 2 layers, 2 heads, D=64; a desk-scale preset, not a published configuration
    Micro,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum OptimizerArg {
    SgdMomentum,
    Adam,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Task {
    Regression,
    Classification,
}

/// A failure reported as one line and mapped to an exit code.
struct Failure {
    class: ErrorClass,
    code: String,
    message: String,
}

impl From<surfseq::Error> for Failure {
    fn from(e: surfseq::Error) -> Self {
        Failure {
            class: e.class(),
            code: e.code(),
            message: e.to_string(),
        }
    }
}

impl Failure {
    fn usage(code: &str, message: impl Into<String>) -> Self {
        Failure {
            class: ErrorClass::Usage,
            code: code.into(),
            message: message.into(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.class {
            ErrorClass::Usage => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        }
    }

    fn class_name(&self) -> &'static str {
        match self.class {
            ErrorClass::Usage => "usage",
            ErrorClass::Data => "data",
            ErrorClass::Numeric => "numeric",
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = f.message.replace('\n', " ");
            eprintln!("error[{}] {}: {}", f.class_name(), f.code, msg);
            ExitCode::from(f.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let threads = if cli.deterministic { 1 } else { cli.threads.max(1) };
    let seed = cli.seed;
    match cli.command {
        Command::Tessellate { order, out } => {
            announce(json!({"command": "tessellate", "order": order, "out": out}), seed);
            let ico = Icosphere::new(order);
            ico.mesh.store(&out)?;
            println!(
                "wrote {} V={} E={} F={}",
                out.display(),
                ico.vertex_count(),
                ico.mesh.edge_count(),
                ico.face_count()
            );
        }
        Command::PatchTable { high, low, out } => {
            announce(json!({"command": "patch-table", "high": high, "low": low, "out": out}), seed);
            let high = load_ico(&high)?;
            let low = load_ico(&low)?;
            let table = build_ico_patch_table(&high, &low).map_err(surfseq::Error::from)?;
            table.store(&out)?;
            println!("wrote {} P={} K={}", out.display(), table.patch_count(), table.patch_size());
        }
        Command::Resample {
            signal,
            src,
            dst,
            out,
            rotate,
        } => {
            announce(
                json!({"command": "resample", "signal": signal, "src": src, "dst": dst, "out": out,
                       "rotate": rotate.map(|r| r.to_string())}),
                seed,
            );
            let sig = SurfaceSignal::load(&signal)?;
            let (src, dst) = (load_ico(&src)?, load_ico(&dst)?);
            let sig = match rotate {
                Some(r) => rotate_signal(&sig, &src, r).map_err(surfseq::Error::from)?,
                None => sig,
            };
            let res = resample_signal(&sig, &src, &dst).map_err(surfseq::Error::from)?;
            res.store(&out)?;
            println!("wrote {} V={} C={}", out.display(), res.vertex_count(), res.channel_count());
        }
        Command::GenData {
            order,
            samples,
            noise,
            out,
        } => {
            let cfg = SynthConfig {
                order,
                samples,
                seed,
                noise,
            };
            announce(
                json!({"command": "gen-data", "order": order, "samples": samples, "noise": noise, "out": out}),
                seed,
            );
            let (manifest, path) = generate_synthetic(&cfg, &out)?;
            println!("wrote {} samples={}", path.display(), manifest.samples.len());
        }
        Command::Pretrain(run) => {
            let ds = Dataset::open(&run.manifest)?;
            let (setup, overlay) = prepare(&run, &ds, None)?;
            let train = overlay.resolve(seed, threads, false);
            let model = preset(run.model, &setup, &ds).with_head(Head::Reconstruction);
            let config = announce_run("pretrain", &run, &model, &train, &setup, seed);
            let job = Job {
                dataset: &ds,
                setup: &setup,
                model,
                train,
                init: None,
            };
            let outcome = train::pretrain_mpp(&job)?;
            write_outputs(&run.out, &outcome, &config, "mpp_loss")?;
        }
        Command::Train {
            run,
            init,
            deconfound,
            task,
        } => {
            let ds = Dataset::open(&run.manifest)?;
            let init = init.as_deref().map(Checkpoint::load).transpose()?;
            let (setup, overlay) = prepare(&run, &ds, init.as_ref())?;
            let train = overlay.resolve(seed, threads, init.is_some());
            let mut model = preset(run.model, &setup, &ds).with_head(match task {
                Task::Regression => Head::Regression,
                Task::Classification => Head::Classification,
            });
            model.deconfound = deconfound;
            let config = announce_run("train", &run, &model, &train, &setup, seed);
            let job = Job {
                dataset: &ds,
                setup: &setup,
                model,
                train,
                init: init.as_ref(),
            };
            let outcome = train::train_supervised(&job)?;
            let metric = if task == Task::Regression { "mae" } else { "auc" };
            write_outputs(&run.out, &outcome, &config, metric)?;
        }
        Command::Eval {
            manifest,
            ckpt,
            split,
            out,
        } => {
            announce(
                json!({"command": "eval", "manifest": manifest, "ckpt": ckpt, "split": split.to_string(), "out": out}),
                seed,
            );
            let ds = Dataset::open(&manifest)?;
            let ck = Checkpoint::load(&ckpt)?;
            let report = train::evaluate(&ds, split, &ck)?;
            println!(
                "split={} n={} {}={:.3} ({})",
                split,
                report.ids.len(),
                report.metric.name(),
                report.metric.value(),
                report.metric.value()
            );
            if let Some(dir) = out {
                mkdir(&dir)?;
                let mut csv = String::from("sample,label,prediction\n");
                for ((&i, y), p) in report.ids.iter().zip(&report.labels).zip(&report.predictions) {
                    csv.push_str(&format!("{},{},{}\n", ds.manifest.samples[i].signal, y, p));
                }
                let path = dir.join("predictions.csv");
                binio::write_atomic(&path, csv.as_bytes())?;
                println!("predictions: {}", path.display());
            }
        }
        Command::Predict {
            signal,
            ckpt,
            scan_age,
        } => {
            announce(
                json!({"command": "predict", "signal": signal, "ckpt": ckpt, "scan_age": scan_age}),
                seed,
            );
            let ck = Checkpoint::load(&ckpt)?;
            let sig = SurfaceSignal::load(&signal)?;
            let grid_order = ck
                .meta
                .grid_order
                .ok_or_else(|| Failure::usage("cli.checkpoint", "checkpoint records no grid order"))?;
            let patch_order = ck
                .meta
                .patch_order
                .ok_or_else(|| Failure::usage("cli.checkpoint", "checkpoint records no patch order"))?;
            let setup = Setup::new(grid_order, patch_order)?;
            let mut model = SiT::from_checkpoint(&ck).map_err(surfseq::Error::from)?;
            let scale = LabelScale {
                mean: ck.meta.label_mean,
                std: ck.meta.label_std,
            };
            let y = train::predict_signal(&mut model, scale, &setup.table, &sig, scan_age)?;
            println!("prediction={y}");
        }
    }
    Ok(())
}

fn announce(config: serde_json::Value, seed: u64) {
    println!("config: {config}");
    println!("seed: {seed}");
}

fn announce_run(
    command: &str,
    run: &RunArgs,
    model: &SiTConfig,
    train: &train::TrainConfig,
    setup: &Setup,
    seed: u64,
) -> serde_json::Value {
    let config = json!({
            "command": command,
            "manifest": run.manifest,
            "out": run.out,
            "grid_order": setup.grid_order(),
            "patch_order": setup.patch_order,
            "model": model,
            "train": train,
        });
    announce(config.clone(), seed);
    config
}

fn load_ico(path: &Path) -> CliResult<Icosphere> {
    let mesh = TriMesh::load(path)?;
    Ok(Icosphere::from_mesh(mesh).map_err(surfseq::Error::from)?)
}

fn mkdir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| surfseq::Error::io(dir, e).into())
}

fn parse_augment(s: &str) -> CliResult<Vec<f64>> {
    if s.trim() == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|a| {
            a.trim()
                .parse::<f64>()
                .map_err(|_| Failure::usage("cli.augment", format!("bad angle {a:?} in --augment")))
        })
        .collect()
}

/// Merge the config file and flags; build the grid and patch table.
fn prepare(run: &RunArgs, ds: &Dataset, init: Option<&Checkpoint>) -> CliResult<(Setup, Overlay)> {
    let file = match &run.config {
        Some(p) => Overlay::load(p).map_err(|e| Failure::usage("cli.config", e.to_string()))?,
        None => Overlay::default(),
    };
    let flags = Overlay {
        optimizer: run.optimizer.map(|o| match o {
            OptimizerArg::SgdMomentum => Optimizer::SgdMomentum,
            OptimizerArg::Adam => Optimizer::Adam,
        }),
        learning_rate: run.lr,
        momentum: run.momentum,
        batch_size: run.batch_size,
        iterations: run.iterations,
        augmentation: run.augment.as_deref().map(parse_augment).transpose()?,
        dropout_p: run.dropout,
        balanced_sampling: run.balanced.then_some(true),
        val_every: run.val_every,
        patch_order: run.patch_order,
    };
    let overlay = file.then(flags);
    let grid_order = ds.manifest.grid_order;
    let patch_order = overlay
        .patch_order
        .or(init.and_then(|c| c.meta.patch_order))
        .unwrap_or_else(|| default_patch_order(grid_order));
    let setup = Setup::new(grid_order, patch_order)?;
    Ok((setup, overlay))
}

fn preset(p: Preset, setup: &Setup, ds: &Dataset) -> SiTConfig {
    let table: &PatchTable = &setup.table;
    let dim = table.patch_size() * ds.manifest.channels.len();
    let n = table.patch_count();
    match p {
        Preset::Tiny => SiTConfig::tiny(dim, n),
        Preset::Small => SiTConfig::small(dim, n),
        Preset::Micro => SiTConfig::micro(dim, n),
    }
}

fn write_outputs(dir: &Path, outcome: &TrainOutcome, config: &serde_json::Value, metric: &str) -> CliResult {
    mkdir(dir)?;
    let config_path = dir.join("config.json");
    let text = serde_json::to_string_pretty(config).expect("json value serializes");
    binio::write_atomic(&config_path, text.as_bytes())?;
    let metrics = dir.join("metrics.csv");
    binio::write_atomic(&metrics, log_csv(&outcome.log).as_bytes())?;
    let final_path = dir.join("final.ckpt");
    outcome.final_checkpoint.store(&final_path)?;
    let best_path = dir.join("best.ckpt");
    outcome.best_checkpoint.store(&best_path)?;
    println!("saved config: {}", config_path.display());
    println!("metrics: {}", metrics.display());
    println!("checkpoint: {}", final_path.display());
    println!("best checkpoint: {} (step {}, val {}={})", best_path.display(), outcome.best_step, metric, outcome.best_value);
    Ok(())
}
