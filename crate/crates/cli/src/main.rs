use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use segrefine::config::{parse_config, ConfigError, PipelineConfig};
use segrefine::pipeline::{
    self, label_array, label_tensor, metrics_json, run_batch, run_pipeline, stage_caf, stage_diffuse, stage_eval,
    stage_graphs, stage_solve, stage_superpixels, write_label_png, write_metrics, write_segment_png, CafArtifacts,
    DiffusionArtifacts, PipelineError, RunOptions,
};
use segrefine::superpixel::SuperpixelMap;
use segrefine::synthetic::TwoRegionSpec;
use segrefine::tensorio::{load_bundle, read_tensor, write_bundle, write_tensor, Tensor};
use segrefine::Scalar;

#[derive(Parser)]
#[command(name = "segrefine", version, about = "Training-free segmentation refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage on one bundle.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Ground-truth label tensor (H x W, i64 or u8).
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Also write every intermediate artifact and the solver log.
        #[arg(long)]
        debug: bool,
    },
    /// Run every bundle directory under ROOT and merge their metrics.
    Batch {
        #[arg(long)]
        root: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Attention fusion: writes s_clip, s_dino, feat_clip, feat_dino.
    Caf {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Graph diffusion on a directory produced by `caf`: writes sg_clip, sg_dino.
    Diffuse {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Segment an H x W x 3 u8 image tensor: writes superpixels.stf and superpixels.png.
    Superpixels {
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Convex fusion on a directory produced by `diffuse`.
    Solve {
        #[arg(long)]
        input: PathBuf,
        /// Superpixel labels from `superpixels`; computed from --image when absent.
        #[arg(long, required_unless_present = "image")]
        superpixels: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a label tensor against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Class names, comma separated; their count fixes the class count.
        #[arg(long, value_delimiter = ',', required_unless_present = "manifest")]
        classes: Vec<String>,
        /// Take class names from a bundle manifest instead.
        #[arg(long, conflicts_with = "classes")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write metrics here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a constructed two-region bundle and its ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, ConfigError> {
    match path {
        Some(p) => parse_config(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<PipelineError>() {
        e.exit_code() as u8
    } else if err.downcast_ref::<ConfigError>().is_some() {
        2
    } else {
        3
    }
}

fn put(dir: &Path, name: &str, t: &Tensor) -> anyhow::Result<()> {
    write_tensor(dir.join(name), t).with_context(|| format!("writing {name}"))
}

fn get(dir: &Path, name: &str) -> anyhow::Result<Tensor> {
    read_tensor(dir.join(name)).with_context(|| format!("reading {}", dir.join(name).display()))
}

fn run_caf_cmd<T: Scalar>(manifest: &Path, cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let bundle =
        load_bundle(manifest).map_err(|e| PipelineError::new(pipeline::Stage::Load, pipeline::FailureKind::Data, e))?;
    let a = stage_caf::<T>(&bundle, cfg)?;
    put(out, "s_clip.stf", &a.s_clip)?;
    put(out, "s_dino.stf", &a.s_dino)?;
    put(out, "feat_clip.stf", &a.feat_clip)?;
    put(out, "feat_dino.stf", &a.feat_dino)
}

fn run_diffuse_cmd<T: Scalar>(input: &Path, cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let caf = CafArtifacts {
        s_clip: get(input, "s_clip.stf")?,
        s_dino: get(input, "s_dino.stf")?,
        feat_clip: get(input, "feat_clip.stf")?,
        feat_dino: get(input, "feat_dino.stf")?,
    };
    let graphs = stage_graphs::<T>(&caf, cfg)?;
    let d = stage_diffuse(&caf, &graphs, cfg)?;
    put(out, "sg_clip.stf", &d.sg_clip)?;
    put(out, "sg_dino.stf", &d.sg_dino)
}

fn run_solve_cmd<T: Scalar>(input: &Path, sp: &SuperpixelMap, cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    let d = DiffusionArtifacts {
        sg_clip: get(input, "sg_clip.stf")?,
        sg_dino: get(input, "sg_dino.stf")?,
    };
    let s = stage_solve::<T>(&d, sp, cfg)?;
    put(out, "q.stf", &s.q)?;
    put(out, "labels.stf", &label_tensor(s.labels.view()))?;
    write_label_png(&out.join("labels.png"), s.labels.view())?;
    std::fs::write(out.join("convergence.csv"), &s.convergence_csv)?;
    Ok(())
}

macro_rules! dispatch {
    ($precision:expr, $f:ident ( $($arg:expr),* )) => {
        match $precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn prepare(common: &Common) -> anyhow::Result<PipelineConfig> {
    let cfg = load_config(common.config.as_deref())?;
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(cfg)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let threads = pipeline::worker_threads();
    match cli.command {
        Command::Run {
            manifest,
            common,
            gt,
            debug,
        } => {
            let cfg = prepare(&common)?;
            let opts = RunOptions { gt, debug };
            let out = pipeline::with_worker_pool(threads, || {
                dispatch!(common.precision, run_pipeline(&manifest, &cfg, &common.out, &opts))
            })??;
            if let Some(m) = out.metrics {
                println!("mIoU {:.4} over {} pixels", m.miou, m.pixels_evaluated);
            }
        }
        Command::Batch { root, common } => {
            let cfg = prepare(&common)?;
            let out = dispatch!(common.precision, run_batch(&root, &cfg, &common.out, threads))?;
            println!("processed {} bundles", out.images.len());
            if let Some(m) = out.metrics {
                println!("mIoU {:.4} over {} pixels", m.miou, m.pixels_evaluated);
            }
        }
        Command::Caf { manifest, common } => {
            let cfg = prepare(&common)?;
            pipeline::with_worker_pool(threads, || {
                dispatch!(common.precision, run_caf_cmd(&manifest, &cfg, &common.out))
            })??;
        }
        Command::Diffuse { input, common } => {
            let cfg = prepare(&common)?;
            pipeline::with_worker_pool(threads, || {
                dispatch!(common.precision, run_diffuse_cmd(&input, &cfg, &common.out))
            })??;
        }
        Command::Superpixels { image, common } => {
            let cfg = prepare(&common)?;
            let sp = stage_superpixels(&read_tensor(&image)?, &cfg)?;
            put(&common.out, "superpixels.stf", &sp.to_tensor())?;
            write_segment_png(&common.out.join("superpixels.png"), sp.labels().view())?;
            println!("{} segments", sp.num_segments());
        }
        Command::Solve {
            input,
            superpixels,
            image,
            common,
        } => {
            let cfg = prepare(&common)?;
            let sp = match (superpixels, image) {
                (Some(p), _) => SuperpixelMap::from_tensor(&read_tensor(&p)?)?,
                (None, Some(img)) => stage_superpixels(&read_tensor(&img)?, &cfg)?,
                (None, None) => unreachable!("clap requires one of --superpixels/--image"),
            };
            pipeline::with_worker_pool(threads, || {
                dispatch!(common.precision, run_solve_cmd(&input, &sp, &cfg, &common.out))
            })??;
        }
        Command::Eval {
            pred,
            gt,
            classes,
            manifest,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let names = match manifest {
                Some(m) => load_bundle_names(&m)?,
                None => classes,
            };
            let labels = label_array(&read_tensor(&pred)?)?;
            let cm = stage_eval(labels.view(), &read_tensor(&gt)?, names.len(), cfg.eval.ignore_index)?;
            let metrics = cm.metrics(&names);
            match out {
                Some(path) => write_metrics(&path, &metrics)?,
                None => print!("{}", metrics_json(&metrics)),
            }
        }
        Command::Synth { out, noise, seed } => {
            let spec = TwoRegionSpec {
                noise,
                seed,
                ..Default::default()
            };
            let (bundle, gt) = spec.build();
            let manifest = write_bundle(&out, &bundle)?;
            write_tensor(out.join("gt.stf"), &gt)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn load_bundle_names(manifest: &Path) -> anyhow::Result<Vec<String>> {
    Ok(load_bundle(manifest)?.class_names)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
