//! Command-line driver.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::backend::{self, Backend};
use crate::baseline::{det_sam_predict, FileDetector};
use crate::config::{Config, CONFIG_ENV};
use crate::data::{self, generate_synthetic, split_dataset, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dataset, MetricsReport};
use crate::imageio;
use crate::inference::{predict_image, write_segmentation};
use crate::pipeline::{self, EvalMode};
use crate::teacher::Teacher;
use crate::trainer::{fit, load_checkpoint, FitOptions, TrainState};
use crate::types::{LabelKind, SemanticSegmentation};
use crate::viz::emit_overlay;

#[derive(Debug, Parser)]
#[command(name = "partseg", version, about = "Weakly supervised part segmentation with a distilled prompter")]
pub struct Cli {
    #[command(flatten)]
    pub config: ConfigArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Base settings before any config file.
    #[arg(long, value_enum, global = true, default_value = "full")]
    pub preset: Preset,

    /// Config file (key=value lines); defaults to $PARTSEG_CONFIG when set.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// `mock` or `adapter:<path>`.
    #[arg(long, global = true, default_value = "mock")]
    pub backend: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Full,
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Supervision {
    Box,
    Point,
}

impl From<Supervision> for LabelKind {
    fn from(s: Supervision) -> Self {
        match s {
            Supervision::Box => LabelKind::Box,
            Supervision::Point => LabelKind::Point,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Student,
    OracleBox,
    OraclePoint,
    Detsam,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory written by `synth` (contains labels.json).
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// COCO-style annotation file, used with --images.
    #[arg(long, requires = "images", conflicts_with = "data")]
    pub coco: Option<PathBuf>,

    #[arg(long)]
    pub images: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic rectangle-parts dataset.
    Synth {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        categories: usize,
        #[arg(long, default_value_t = 4)]
        max_parts: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Fraction held out under `val/`.
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the prompter from weak labels.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "box")]
        supervision: Supervision,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a dataset and write metrics.json.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "student")]
        mode: Mode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Detector corner noise, as a fraction of the image side.
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, default_value_t = 0.0)]
        drop: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detector boxes from a JSON file fed to the decoder.
    Baseline {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Color overlay of a predicted (and optionally a ground-truth) map.
    Plot {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    config_hash: String,
    config: String,
    backend: &'a str,
    outputs: Vec<String>,
}

fn resolve_config(args: &ConfigArgs) -> Result<Config> {
    let mut cfg = match args.preset {
        Preset::Full => Config::default(),
        Preset::Desk => Config::desk(),
    };
    let file = args
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    if let Some(path) = file {
        cfg = Config::parse_over(cfg, &std::fs::read_to_string(&path)?)?;
    }
    for o in &args.overrides {
        cfg = Config::parse_over(cfg, o)?;
    }
    cfg.validate()
}

fn load_data(args: &DataArgs, cfg: &Config) -> Result<Dataset> {
    match (&args.data, &args.coco, &args.images) {
        (Some(dir), _, _) => {
            let ds = data::load_dataset(dir)?;
            if ds.image_size != cfg.image_size {
                return Err(Error::InvalidConfig(format!(
                    "dataset images are {} px, image_size is {}",
                    ds.image_size, cfg.image_size
                )));
            }
            Ok(ds)
        }
        (None, Some(ann), Some(images)) => data::load_coco_parts(ann, images, cfg),
        _ => Err(Error::InvalidConfig("pass --data DIR or --coco FILE --images DIR".into())),
    }
}

fn log_config(cfg: &Config) {
    eprintln!("config hash {}", cfg.hash());
    for line in cfg.to_text().lines() {
        log::info!("  {line}");
    }
}

fn write_manifest(out: &Path, command: &str, cfg: &Config, backend: &str, outputs: &[String]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config.txt"))?;
    let m = Manifest {
        command,
        argv: std::env::args().collect(),
        config_hash: cfg.hash(),
        config: cfg.to_text(),
        backend,
        outputs: outputs.to_vec(),
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

fn write_report(out: &Path, report: &MetricsReport) -> Result<String> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.json"), serde_json::to_vec_pretty(report)?)?;
    eprintln!("mIoU {:.4}  mACC {:.4}  images {}", report.miou, report.macc, report.num_images);
    Ok("metrics.json".into())
}

fn checkpoint_state(path: &Path) -> Result<(TrainState, Config)> {
    let state = load_checkpoint(path, None)?;
    let cfg = state.config()?.validate()?;
    Ok((state, cfg))
}

fn check_frozen(state: &TrainState, backend: &dyn Backend, teacher: &Teacher) -> Result<()> {
    if state.meta.backend_checksum != backend.parameter_checksum()
        || state.meta.teacher_checksum != teacher.parameter_checksum()
    {
        return Err(Error::VersionMismatch(
            "checkpoint was trained against a different backend or teacher".into(),
        ));
    }
    Ok(())
}

fn read_segmentation(path: &Path, background: u16) -> Result<SemanticSegmentation> {
    Ok(SemanticSegmentation {
        labels: imageio::read_indexed_png(path)?,
        scores: None,
        background,
    })
}

fn execute(cli: &Cli) -> Result<()> {
    let spec = cli.config.backend.as_str();
    match &cli.command {
        Command::Synth {
            n,
            seed,
            categories,
            max_parts,
            size,
            val_fraction,
            out,
        } => {
            let cfg = resolve_config(&cli.config)?;
            let ds = generate_synthetic(&SyntheticSpec {
                n_images: *n,
                n_categories: *categories,
                max_parts: *max_parts,
                size: *size,
                seed: *seed,
            });
            let (train, val) = split_dataset(&ds, (1.0 - val_fraction, *val_fraction), *seed)?;
            data::save_dataset(&train, &out.join("train"))?;
            data::save_dataset(&val, &out.join("val"))?;
            eprintln!("wrote {} train and {} val images", train.len(), val.len());
            write_manifest(out, "synth", &cfg, spec, &["train".into(), "val".into()])
        }
        Command::Train {
            data,
            supervision,
            resume,
            out,
        } => {
            let cfg = resolve_config(&cli.config)?;
            log_config(&cfg);
            let backend = backend::from_spec(spec, &cfg)?;
            let teacher = Teacher::new(&cfg);
            let ds = load_data(data, &cfg)?;
            let samples = pipeline::encode_samples(&ds, (*supervision).into(), backend.as_ref(), &teacher, &cfg)?;
            let state = match resume {
                Some(path) => {
                    let s = load_checkpoint(path, Some(&cfg))?;
                    check_frozen(&s, backend.as_ref(), &teacher)?;
                    s
                }
                None => TrainState::new(&cfg, cfg.seed, &backend.parameter_checksum(), &teacher.parameter_checksum())?,
            };
            eprintln!("prompter parameters: {}", state.meta.num_parameters);
            let opts = FitOptions {
                out_dir: Some(out.clone()),
                verbose: true,
            };
            let state = fit(&samples, &cfg, state, &opts)?;
            check_frozen(&state, backend.as_ref(), &teacher)?;
            write_manifest(out, "train", &cfg, spec, &["loss.csv".into(), "final.psck".into()])
        }
        Command::Eval {
            data,
            mode,
            checkpoint,
            jitter,
            drop,
            seed,
            out,
        } => {
            let (state, cfg) = match checkpoint {
                Some(path) => {
                    let (s, c) = checkpoint_state(path)?;
                    (Some(s), c)
                }
                None => (None, resolve_config(&cli.config)?),
            };
            log_config(&cfg);
            let backend = backend::from_spec(spec, &cfg)?;
            let teacher = Teacher::new(&cfg);
            if let Some(s) = &state {
                check_frozen(s, backend.as_ref(), &teacher)?;
            }
            let ds = load_data(data, &cfg)?;
            let eval_mode = match mode {
                Mode::Student => EvalMode::Student,
                Mode::OracleBox => EvalMode::Oracle(LabelKind::Box),
                Mode::OraclePoint => EvalMode::Oracle(LabelKind::Point),
                Mode::Detsam => EvalMode::DetSam {
                    jitter_sigma: *jitter,
                    drop_prob: *drop,
                    seed: *seed,
                },
            };
            let report = pipeline::evaluate(
                &ds,
                eval_mode,
                state.as_ref().map(|s| &s.params),
                backend.as_ref(),
                &teacher,
                &cfg,
            )?;
            let name = write_report(out, &report)?;
            write_manifest(out, "eval", &cfg, spec, &[name])
        }
        Command::Infer { checkpoint, image, out } => {
            let (state, cfg) = checkpoint_state(checkpoint)?;
            log_config(&cfg);
            let backend = backend::from_spec(spec, &cfg)?;
            let img = imageio::read_rgb_image(image, cfg.image_size)?;
            let seg = predict_image(&img, &state.params, backend.as_ref(), &cfg)?;
            std::fs::create_dir_all(out)?;
            let names: Vec<String> = (0..cfg.num_categories).map(|c| format!("part{c}")).collect();
            write_segmentation(&seg, &names, &out.join("segmentation.png"))?;
            write_manifest(
                out,
                "infer",
                &cfg,
                spec,
                &["segmentation.png".into(), "segmentation.json".into()],
            )
        }
        Command::Baseline { data, detections, out } => {
            let cfg = resolve_config(&cli.config)?;
            log_config(&cfg);
            let backend = backend::from_spec(spec, &cfg)?;
            let teacher = Teacher::new(&cfg);
            let ds = load_data(data, &cfg)?;
            let detector = FileDetector::load(detections)?;
            let report = evaluate_dataset(
                &ds,
                |r| det_sam_predict(&r.image, Some(r), &detector, &teacher, backend.as_ref(), &cfg),
                &cfg.hash(),
            )?;
            let name = write_report(out, &report)?;
            write_manifest(out, "baseline", &cfg, spec, &[name])
        }
        Command::Plot { image, pred, gt, out } => {
            let cfg = resolve_config(&cli.config)?;
            let img = imageio::read_rgb_image(image, cfg.image_size)?;
            let background = cfg.no_part() as u16;
            let palette = imageio::palette(cfg.num_categories);
            let names: Vec<String> = (0..cfg.num_categories).map(|c| format!("part{c}")).collect();
            std::fs::create_dir_all(out)?;
            let mut outputs = vec!["pred_overlay.png".to_string()];
            emit_overlay(&img, &read_segmentation(pred, background)?, &names, &palette, &out.join(&outputs[0]))?;
            if let Some(gt) = gt {
                outputs.push("gt_overlay.png".into());
                emit_overlay(&img, &read_segmentation(gt, background)?, &names, &palette, &out.join(&outputs[1]))?;
            }
            write_manifest(out, "plot", &cfg, spec, &outputs)
        }
    }
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}
