//! End-to-end orchestration and the per-stage entry points used by the CLI.
//!
//! Stage boundaries exchange `f32` tensors, the same form written by
//! `--debug`, so re-entering any stage from dumped files reproduces the fused
//! run bit for bit.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::caf::{run_caf, ScoreMap};
use crate::config::PipelineConfig;
use crate::cscp::{argmax_labels, collapse_kl_targets, scores_to_probs, solve_pdhg, CscpError};
use crate::diffusion::refine_bidirectional;
use crate::eval::{ConfusionMatrix, Metrics};
use crate::geometry::Grid;
use crate::graph::{build_transition, mean_features, GraphError, TransitionMatrix};
use crate::scalar::Scalar;
use crate::superpixel::{build_edge_weights, image_view, segment_felzenszwalb, SuperpixelMap};
use crate::tensorio::{load_bundle, read_tensor, write_tensor, FeatureBundle, Tensor, TensorError};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

/// Largest patch count for which `--debug` also writes dense transition matrices.
pub const DENSE_DUMP_LIMIT: usize = 4096;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "SEGREFINE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Load,
    Caf,
    Graph,
    Diffusion,
    Superpixels,
    Solve,
    Eval,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Caf => "caf",
            Stage::Graph => "graph",
            Stage::Diffusion => "diffusion",
            Stage::Superpixels => "superpixels",
            Stage::Solve => "solve",
            Stage::Eval => "eval",
            Stage::Output => "output",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Config,
    Data,
    Numerical,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Config => 2,
            FailureKind::Data => 3,
            FailureKind::Numerical => 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    pub kind: FailureKind,
    #[source]
    pub source: BoxError,
}

impl PipelineError {
    pub fn new(stage: Stage, kind: FailureKind, source: impl Into<BoxError>) -> Self {
        Self {
            stage,
            kind,
            source: source.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

fn data<E: Into<BoxError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::new(stage, FailureKind::Data, e)
}

fn graph_err(e: GraphError) -> PipelineError {
    let kind = match e {
        GraphError::NotStochastic { .. } => FailureKind::Numerical,
        _ => FailureKind::Data,
    };
    PipelineError::new(Stage::Graph, kind, e)
}

fn cscp_err(stage: Stage) -> impl FnOnce(CscpError) -> PipelineError {
    move |e| {
        let kind = match e {
            CscpError::NonFiniteEncountered { .. } => FailureKind::Numerical,
            _ => FailureKind::Data,
        };
        PipelineError::new(stage, kind, e)
    }
}

fn ensure_finite(stage: Stage, what: &str, t: &Tensor) -> Result<(), PipelineError> {
    match t.as_f32() {
        Ok(v) if v.iter().all(|x| x.is_finite()) => Ok(()),
        Ok(_) => Err(PipelineError::new(
            stage,
            FailureKind::Numerical,
            format!("{what} contains non-finite values"),
        )),
        Err(e) => Err(data(stage)(e)),
    }
}

/// Scores and graph features on the CLIP grid, each `rows x cols x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct CafArtifacts {
    pub s_clip: Tensor,
    pub s_dino: Tensor,
    pub feat_clip: Tensor,
    pub feat_dino: Tensor,
}

/// Diffused scores, `rows x cols x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionArtifacts {
    pub sg_clip: Tensor,
    pub sg_dino: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveArtifacts {
    /// `H x W x K` final distributions.
    pub q: Tensor,
    pub labels: Array2<i64>,
    pub energy: f64,
    pub iterations: usize,
    pub converged: bool,
    pub convergence_csv: String,
}

fn grid_tensor<T: Scalar>(values: &Array2<T>, grid: Grid) -> Tensor {
    ScoreMap {
        values: values.clone(),
        grid,
    }
    .to_tensor()
}

fn grid_rows<T: Scalar>(stage: Stage, t: &Tensor) -> Result<ScoreMap<T>, PipelineError> {
    ScoreMap::from_tensor(t).map_err(data(stage))
}

pub fn stage_caf<T: Scalar>(bundle: &FeatureBundle, cfg: &PipelineConfig) -> Result<CafArtifacts, PipelineError> {
    let out = run_caf(bundle, T::of_f64(cfg.lambda1)).map_err(data(Stage::Caf))?;
    let grid = out.s_clip.grid;
    let feat_clip = mean_features(out.clip_layer_feats.view()).map_err(graph_err)?;
    let feat_dino = mean_features(out.dino_layer_feats.view()).map_err(graph_err)?;
    let artifacts = CafArtifacts {
        s_clip: out.s_clip.to_tensor(),
        s_dino: out.s_dino.to_tensor(),
        feat_clip: grid_tensor(&feat_clip, grid),
        feat_dino: grid_tensor(&feat_dino, grid),
    };
    ensure_finite(Stage::Caf, "s_clip", &artifacts.s_clip)?;
    ensure_finite(Stage::Caf, "s_dino", &artifacts.s_dino)?;
    Ok(artifacts)
}

/// Transition matrices over CLIP-grid patches: `(T_clip, T_dino)`.
pub fn stage_graphs<T: Scalar>(
    caf: &CafArtifacts,
    cfg: &PipelineConfig,
) -> Result<(TransitionMatrix<T>, TransitionMatrix<T>), PipelineError> {
    let fc = grid_rows::<T>(Stage::Graph, &caf.feat_clip)?;
    let fd = grid_rows::<T>(Stage::Graph, &caf.feat_dino)?;
    if fc.grid != fd.grid {
        return Err(PipelineError::new(
            Stage::Graph,
            FailureKind::Data,
            format!("feature grids differ: {} vs {}", fc.grid, fd.grid),
        ));
    }
    let tau = T::of_f64(cfg.graph.tau);
    let (tc, td) = rayon::join(
        || build_transition(fc.values.view(), cfg.graph.k, tau, fc.grid),
        || build_transition(fd.values.view(), cfg.graph.k, tau, fd.grid),
    );
    Ok((tc.map_err(graph_err)?, td.map_err(graph_err)?))
}

pub fn stage_diffuse<T: Scalar>(
    caf: &CafArtifacts,
    graphs: &(TransitionMatrix<T>, TransitionMatrix<T>),
    cfg: &PipelineConfig,
) -> Result<DiffusionArtifacts, PipelineError> {
    let sc = grid_rows::<T>(Stage::Diffusion, &caf.s_clip)?;
    let sd = grid_rows::<T>(Stage::Diffusion, &caf.s_dino)?;
    let (tc, td) = graphs;
    for (name, g) in [("s_clip", sc.grid), ("s_dino", sd.grid)] {
        if g != tc.grid() {
            return Err(PipelineError::new(
                Stage::Diffusion,
                FailureKind::Data,
                format!("{name} grid {g} does not match graph grid {}", tc.grid()),
            ));
        }
    }
    let (gc, gd) = refine_bidirectional(tc, td, &sc, &sd, &cfg.diffusion_params()).map_err(data(Stage::Diffusion))?;
    let out = DiffusionArtifacts {
        sg_clip: gc.to_tensor(),
        sg_dino: gd.to_tensor(),
    };
    ensure_finite(Stage::Diffusion, "sg_clip", &out.sg_clip)?;
    ensure_finite(Stage::Diffusion, "sg_dino", &out.sg_dino)?;
    Ok(out)
}

pub fn stage_superpixels(image: &Tensor, cfg: &PipelineConfig) -> Result<SuperpixelMap, PipelineError> {
    let view = image_view(image).map_err(data(Stage::Superpixels))?;
    let s = &cfg.superpixel;
    segment_felzenszwalb::<f64>(view, s.scale, s.min_size, s.sigma).map_err(data(Stage::Superpixels))
}

pub fn stage_solve<T: Scalar>(
    diffusion: &DiffusionArtifacts,
    superpixels: &SuperpixelMap,
    cfg: &PipelineConfig,
) -> Result<SolveArtifacts, PipelineError> {
    let params = cfg.cscp_params::<T>();
    let size = (superpixels.height(), superpixels.width());
    let sc = grid_rows::<T>(Stage::Solve, &diffusion.sg_clip)?;
    let sd = grid_rows::<T>(Stage::Solve, &diffusion.sg_dino)?;
    let to_probs = |s: &ScoreMap<T>| scores_to_probs(s, size, params.softmax_temp, params.eps_floor);
    let a = to_probs(&sc).map_err(cscp_err(Stage::Solve))?;
    let b = to_probs(&sd).map_err(cscp_err(Stage::Solve))?;
    let (g, lambda_total) =
        collapse_kl_targets(&a, &b, params.lambda_c, params.lambda_d).map_err(cscp_err(Stage::Solve))?;
    let w = build_edge_weights(
        superpixels,
        T::of_f64(cfg.superpixel.w_in),
        T::of_f64(cfg.superpixel.w_cross),
    );
    let sol = solve_pdhg(&g, lambda_total, &w, &params).map_err(cscp_err(Stage::Solve))?;
    log::info!(
        "solver stopped after {} iterations (converged: {}), energy {}",
        sol.iterations,
        sol.converged,
        sol.energy
    );
    Ok(SolveArtifacts {
        q: sol.q.to_tensor(),
        labels: argmax_labels(&sol.q),
        energy: sol.energy.to_f64().unwrap_or(f64::NAN),
        iterations: sol.iterations,
        converged: sol.converged,
        convergence_csv: sol.log_csv(),
    })
}

pub fn stage_eval(
    labels: ArrayView2<'_, i64>,
    gt: &Tensor,
    num_classes: usize,
    ignore_index: Option<i64>,
) -> Result<ConfusionMatrix, PipelineError> {
    let gt = label_array(gt).map_err(data(Stage::Eval))?;
    let mut cm = ConfusionMatrix::new(num_classes, ignore_index);
    cm.accumulate(labels, gt.view()).map_err(data(Stage::Eval))?;
    Ok(cm)
}

/// Every intermediate of one image.
#[derive(Debug, Clone)]
pub struct Processed<T> {
    pub caf: CafArtifacts,
    pub graphs: (TransitionMatrix<T>, TransitionMatrix<T>),
    pub diffusion: DiffusionArtifacts,
    pub superpixels: SuperpixelMap,
    pub solve: SolveArtifacts,
}

pub fn process_bundle<T: Scalar>(bundle: &FeatureBundle, cfg: &PipelineConfig) -> Result<Processed<T>, PipelineError> {
    cfg.validate()
        .map_err(|e| PipelineError::new(Stage::Config, FailureKind::Config, e))?;
    let caf = stage_caf::<T>(bundle, cfg)?;
    let graphs = stage_graphs::<T>(&caf, cfg)?;
    let diffusion = stage_diffuse(&caf, &graphs, cfg)?;
    let superpixels = stage_superpixels(&bundle.image, cfg)?;
    let solve = stage_solve::<T>(&diffusion, &superpixels, cfg)?;
    Ok(Processed {
        caf,
        graphs,
        diffusion,
        superpixels,
        solve,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub gt: Option<PathBuf>,
    pub debug: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub labels: Array2<i64>,
    pub class_names: Vec<String>,
    pub confusion: Option<ConfusionMatrix>,
    pub metrics: Option<Metrics>,
}

/// Loads a bundle, runs every stage and writes `labels.png`, `labels.stf`
/// and, given ground truth, `metrics.json` into `out_dir`.
pub fn run_pipeline<T: Scalar>(
    manifest: &Path,
    cfg: &PipelineConfig,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<RunOutput, PipelineError> {
    let bundle = load_bundle(manifest).map_err(data(Stage::Load))?;
    let gt = opts
        .gt
        .as_ref()
        .map(|p| read_tensor(p).map_err(data(Stage::Load)))
        .transpose()?;
    let processed = process_bundle::<T>(&bundle, cfg)?;
    let labels = processed.solve.labels.clone();
    let confusion = gt
        .as_ref()
        .map(|gt| stage_eval(labels.view(), gt, bundle.num_classes(), cfg.eval.ignore_index))
        .transpose()?;
    let metrics = confusion.as_ref().map(|cm| cm.metrics(&bundle.class_names));

    fs::create_dir_all(out_dir).map_err(data(Stage::Output))?;
    write_label_png(&out_dir.join("labels.png"), labels.view())?;
    write_tensor(out_dir.join("labels.stf"), &label_tensor(labels.view())).map_err(data(Stage::Output))?;
    if let Some(m) = &metrics {
        write_metrics(&out_dir.join("metrics.json"), m)?;
    }
    if opts.debug {
        write_debug(out_dir, &processed)?;
    }
    Ok(RunOutput {
        labels,
        class_names: bundle.class_names,
        confusion,
        metrics,
    })
}

fn write_debug<T: Scalar>(dir: &Path, p: &Processed<T>) -> Result<(), PipelineError> {
    let put = |name: &str, t: &Tensor| write_tensor(dir.join(name), t).map_err(data(Stage::Output));
    put("s_clip.stf", &p.caf.s_clip)?;
    put("s_dino.stf", &p.caf.s_dino)?;
    put("feat_clip.stf", &p.caf.feat_clip)?;
    put("feat_dino.stf", &p.caf.feat_dino)?;
    if p.graphs.0.len() <= DENSE_DUMP_LIMIT {
        put(
            "t_clip.stf",
            &Tensor::from_array(&p.graphs.0.to_dense()).map_err(data(Stage::Output))?,
        )?;
        put(
            "t_dino.stf",
            &Tensor::from_array(&p.graphs.1.to_dense()).map_err(data(Stage::Output))?,
        )?;
    }
    put("sg_clip.stf", &p.diffusion.sg_clip)?;
    put("sg_dino.stf", &p.diffusion.sg_dino)?;
    put("superpixels.stf", &p.superpixels.to_tensor())?;
    put("q.stf", &p.solve.q)?;
    fs::write(dir.join("convergence.csv"), &p.solve.convergence_csv).map_err(data(Stage::Output))
}

/// Pretty-printed metrics with a trailing newline.
pub fn metrics_json(m: &Metrics) -> String {
    let mut text = serde_json::to_string_pretty(m).expect("metrics serialize");
    text.push('\n');
    text
}

pub fn write_metrics(path: &Path, m: &Metrics) -> Result<(), PipelineError> {
    fs::write(path, metrics_json(m)).map_err(data(Stage::Output))
}

/// `H x W` integer tensor (i64 or u8) as a label array.
pub fn label_array(t: &Tensor) -> Result<Array2<i64>, TensorError> {
    t.expect_rank(2)?;
    let values = t.to_labels()?;
    Ok(Array2::from_shape_vec((t.shape()[0], t.shape()[1]), values).expect("tensor invariant"))
}

pub fn label_tensor(labels: ArrayView2<'_, i64>) -> Tensor {
    let (h, w) = labels.dim();
    Tensor::from_i64(vec![h, w], labels.iter().copied().collect()).expect("non-empty label map")
}

/// Bit-interleaved colour for a class index (the usual VOC-style palette).
pub fn palette_color(index: u8) -> [u8; 3] {
    let mut rgb = [0u8; 3];
    let mut c = index;
    for bit in (0..8).rev() {
        for (ch, v) in rgb.iter_mut().enumerate() {
            *v |= ((c >> ch) & 1) << bit;
        }
        c >>= 3;
    }
    rgb
}

fn encode_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<(), PipelineError> {
    let file = fs::File::create(path).map_err(data_err_output)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header().map_err(data_err_output)?;
    writer.write_image_data(data).map_err(data_err_output)?;
    writer.finish().map_err(data_err_output)
}

fn data_err_output<E: Into<BoxError>>(e: E) -> PipelineError {
    PipelineError::new(Stage::Output, FailureKind::Data, e)
}

/// Palette-indexed PNG; labels must lie in `0..=255`.
pub fn write_label_png(path: &Path, labels: ArrayView2<'_, i64>) -> Result<(), PipelineError> {
    let (h, w) = labels.dim();
    let mut pixels = Vec::with_capacity(h * w);
    for &l in labels.iter() {
        let idx = u8::try_from(l).map_err(|_| data_err_output(format!("label {l} does not fit an 8-bit palette")))?;
        pixels.push(idx);
    }
    let entries = pixels.iter().copied().max().unwrap_or(0) as usize + 1;
    let palette: Vec<u8> = (0..entries).flat_map(|i| palette_color(i as u8)).collect();
    encode_png(path, w, h, png::ColorType::Indexed, Some(palette), &pixels)
}

/// RGB PNG with a pseudo-random colour per segment id (seeded by the id).
pub fn write_segment_png(path: &Path, labels: ArrayView2<'_, i64>) -> Result<(), PipelineError> {
    let (h, w) = labels.dim();
    let mut colors = std::collections::HashMap::new();
    let mut pixels = Vec::with_capacity(h * w * 3);
    for &l in labels.iter() {
        let rgb = *colors
            .entry(l)
            .or_insert_with(|| ChaCha8Rng::seed_from_u64(l as u64).gen::<[u8; 3]>());
        pixels.extend_from_slice(&rgb);
    }
    encode_png(path, w, h, png::ColorType::Rgb, None, &pixels)
}

/// Reads the worker cap from `SEGREFINE_THREADS`; `None` means rayon's default.
pub fn worker_threads() -> Option<usize> {
    let raw = std::env::var(THREADS_ENV).ok()?;
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => Some(n),
        _ => {
            log::warn!("ignoring {THREADS_ENV}={raw:?}; expected a positive integer");
            None
        }
    }
}

/// Runs `f` inside a pool of at most `threads` workers.
pub fn with_worker_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| PipelineError::new(Stage::Config, FailureKind::Config, e))?;
    Ok(pool.install(f))
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// Bundle directory names in processing order.
    pub images: Vec<String>,
    pub metrics: Option<Metrics>,
}

/// Every immediate subdirectory of `root` holding a `manifest.json`, sorted by name.
pub fn discover_manifests(root: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut found = Vec::new();
    for entry in fs::read_dir(root).map_err(data(Stage::Load))? {
        let path = entry.map_err(data(Stage::Load))?.path().join("manifest.json");
        if path.is_file() {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

/// Runs every bundle under `root`, writing each into `out_dir/<name>`.
/// A `gt.stf` next to a manifest enables evaluation for that image; the
/// per-image confusion matrices are summed into `out_dir/metrics.json`.
pub fn run_batch<T: Scalar>(
    root: &Path,
    cfg: &PipelineConfig,
    out_dir: &Path,
    threads: Option<usize>,
) -> Result<BatchOutput, PipelineError> {
    let manifests = discover_manifests(root)?;
    let jobs: Vec<(String, PathBuf, RunOptions)> = manifests
        .into_iter()
        .map(|m| {
            let dir = m.parent().expect("manifest inside a directory");
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let gt = dir.join("gt.stf");
            let opts = RunOptions {
                gt: gt.is_file().then_some(gt),
                debug: false,
            };
            (name, m, opts)
        })
        .collect();
    let results: Vec<Result<RunOutput, PipelineError>> = with_worker_pool(threads, || {
        jobs.par_iter()
            .map(|(name, manifest, opts)| run_pipeline::<T>(manifest, cfg, &out_dir.join(name), opts))
            .collect()
    })?;

    let mut merged: Option<(ConfusionMatrix, Vec<String>)> = None;
    for result in results {
        let out = result?;
        if let Some(cm) = out.confusion {
            match &mut merged {
                None => merged = Some((cm, out.class_names)),
                Some((acc, _)) => acc.merge(&cm).map_err(data(Stage::Eval))?,
            }
        }
    }
    let metrics = merged.map(|(cm, names)| cm.metrics(&names));
    if let Some(m) = &metrics {
        write_metrics(&out_dir.join("metrics.json"), m)?;
    }
    Ok(BatchOutput {
        images: jobs.into_iter().map(|(n, _, _)| n).collect(),
        metrics,
    })
}
