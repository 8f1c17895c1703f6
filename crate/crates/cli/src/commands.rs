//! Command implementations. Each writes its artifacts under the configured
//! directories and returns what it computed.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use liftdepth::metrics::{capped_mask, compute_metrics, error_map, MetricReport};
use liftdepth::model::{build_model, lifting_consistency, load_checkpoint, mean_loss, save_checkpoint, train, LiftFormer, ModelConfig, StepRecord};
use liftdepth::numcore::{finite_diff_check, lftd, GradCheckOptions, GradCheckReport, ParamStore, Tensor};
use liftdepth::par::{self, Execution};
use liftdepth::scenes::{generate_scene, read_dataset, read_manifest, read_ppm, write_dataset, write_pfm, write_ppm_gray, DatasetEntry, SceneSpec};

use crate::config::{ConfigError, Predictor, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

pub const LOSS_LOG: &str = "loss.log";
pub const TRAIN_SUMMARY: &str = "train_summary.txt";
pub const EVAL_DIR: &str = "eval";
pub const DUMP_DIR: &str = "dump";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::usage(e.0)
    }
}

impl From<liftdepth::Error> for CliError {
    fn from(e: liftdepth::Error) -> Self {
        use liftdepth::Error as E;
        let code = match &e {
            E::Config(_) | E::InvalidInput(_) | E::Io { .. } => EXIT_USAGE,
            E::Shape { .. } | E::Format { .. } | E::UnsupportedEndianness { .. } | E::Checkpoint(_) => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::usage(format!("io error on {}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn say(out: &mut dyn Write, line: impl fmt::Display) {
    let _ = writeln!(out, "{line}");
}

/// Writes samples `0..cfg.samples` of `cfg.scene` to `dir`.
pub fn cmd_gen(cfg: &RunConfig, dir: &Path, workers: usize, out: &mut dyn Write) -> CliResult<Vec<DatasetEntry>> {
    let entries = par::with_workers(workers, || write_dataset(dir, &cfg.scene, cfg.samples, Execution::from_workers(workers)))?;
    say(out, format!("wrote {} samples to {}", entries.len(), dir.display()));
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    /// Mean per-sample loss over the training set before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn format_step(r: &StepRecord) -> String {
    format!("{} {} {}", r.step, r.loss, r.lr)
}

fn load_data(dir: &Path) -> CliResult<Vec<liftdepth::scenes::SceneSample>> {
    if !dir.join(liftdepth::scenes::MANIFEST).is_file() {
        return Err(CliError::usage(format!("no dataset at {} (run `gen` first)", dir.display())));
    }
    Ok(read_dataset(dir)?)
}

/// Trains from `cfg.data_dir` on one thread, writing the loss log, a summary
/// and the final checkpoint.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<TrainOutcome> {
    let data = load_data(&cfg.data_dir)?;
    let mut model = build_model(&cfg.model)?;
    create_dir(&cfg.out_dir)?;
    let exec = Execution::Sequential;
    let initial_loss = if data.is_empty() { f64::NAN } else { mean_loss(&model, &data, &cfg.loss(), exec)? };
    let mut log = String::new();
    let records = train(&mut model, &data, &cfg.train, exec, |r| {
        let line = format_step(r);
        say(out, &line);
        log.push_str(&line);
        log.push('\n');
    })?;
    let final_loss = if data.is_empty() { f64::NAN } else { mean_loss(&model, &data, &cfg.loss(), exec)? };
    write_file(&cfg.out_dir.join(LOSS_LOG), &log)?;
    let summary = format!("steps {}\ninitial_loss {initial_loss}\nfinal_loss {final_loss}\n", records.len());
    write_file(&cfg.out_dir.join(TRAIN_SUMMARY), &summary)?;
    write_file(&cfg.out_dir.join("config.txt"), cfg.to_text())?;
    save_checkpoint(&cfg.checkpoint, &model.params)?;
    say(out, format!("initial loss {initial_loss} final loss {final_loss}"));
    say(out, format!("checkpoint {}", cfg.checkpoint.display()));
    Ok(TrainOutcome { records, initial_loss, final_loss })
}

/// Builds the configured model and loads `cfg.checkpoint` into it.
pub fn load_model(cfg: &RunConfig) -> CliResult<LiftFormer> {
    let mut model = build_model(&cfg.model)?;
    if !cfg.checkpoint.is_dir() {
        return Err(CliError::data(format!("no checkpoint at {}", cfg.checkpoint.display())));
    }
    load_checkpoint(&cfg.checkpoint, &mut model.params)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub samples: Vec<(String, MetricReport)>,
    /// Names of samples with no valid pixel under the cap.
    pub skipped: Vec<String>,
    pub aggregate: Option<MetricReport>,
    /// Largest lifting-consistency error over all evaluated traces.
    pub max_lifting_error: f64,
}

/// Per-sample and aggregate metrics over `cfg.eval_dir`, plus predicted
/// depth maps (and optional error maps) under `out_dir/eval`.
pub fn cmd_eval(cfg: &RunConfig, workers: usize, out: &mut dyn Write) -> CliResult<EvalOutcome> {
    let data = load_data(&cfg.eval_dir)?;
    let names: Vec<String> = read_manifest(&cfg.eval_dir)?.into_iter().map(|e| e.name).collect();
    let model = match cfg.predictor {
        Predictor::Model => Some(load_model(cfg)?),
        Predictor::GroundTruth => None,
    };
    let dir = cfg.out_dir.join(EVAL_DIR);
    create_dir(&dir)?;
    let exec = Execution::from_workers(workers);
    let results = par::with_workers(workers, || {
        par::map_indexed(exec, &data, |_, s| -> CliResult<(Tensor, f64)> {
            match &model {
                Some(m) => {
                    let t = m.forward(&s.image)?;
                    let rep = lifting_consistency(&t);
                    Ok((t.depth, rep.max_linearity_error.max(rep.max_depth_error)))
                }
                None => Ok((s.depth.clone(), 0.0)),
            }
        })
    });
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut max_lifting_error: f64 = 0.0;
    let mut csv = format!("sample,{}\n", MetricReport::csv_header());
    for ((name, s), r) in names.iter().zip(&data).zip(results) {
        let (pred, lift) = r?;
        max_lifting_error = max_lifting_error.max(lift);
        write_pfm(&dir.join(format!("{name}.pred.pfm")), &pred)?;
        let mask = capped_mask(s.depth.data(), &s.mask, cfg.depth_cap);
        if !mask.iter().any(|&m| m) {
            skipped.push(name.clone());
            continue;
        }
        let rep = compute_metrics(pred.data(), s.depth.data(), &mask)?;
        if cfg.error_maps {
            let img = error_map(pred.data(), s.depth.data(), &mask)?;
            write_ppm_gray(&dir.join(format!("{name}.err.ppm")), s.width(), s.height(), &img)?;
        }
        csv.push_str(&format!("{name},{}\n", rep.to_csv_row()));
        samples.push((name.clone(), rep));
    }
    let reports: Vec<MetricReport> = samples.iter().map(|(_, r)| r.clone()).collect();
    let aggregate = MetricReport::mean(&reports);
    let mut text = String::new();
    if let Some(a) = &aggregate {
        csv.push_str(&format!("mean,{}\n", a.to_csv_row()));
        text = a.to_text();
    }
    text.push_str(&format!("samples {}\nskipped {}\n", samples.len(), skipped.len()));
    write_file(&dir.join("metrics.csv"), &csv)?;
    write_file(&dir.join("metrics.txt"), &text)?;
    for n in &skipped {
        say(out, format!("{n}: no valid pixels under the depth cap, skipped"));
    }
    say(out, text.trim_end());
    Ok(EvalOutcome { samples, skipped, aggregate, max_lifting_error })
}

/// Depth for one PPM image, written as PFM.
pub fn cmd_infer(cfg: &RunConfig, image: &Path, output: &Path, out: &mut dyn Write) -> CliResult<Tensor> {
    let model = load_model(cfg)?;
    let img = read_ppm(image)?;
    let depth = model.forward(&img)?.depth;
    write_pfm(output, &depth)?;
    say(out, format!("wrote {}", output.display()));
    Ok(depth)
}

#[derive(Clone, Debug)]
pub struct GradCheckRequest {
    /// Distort the backward pass of this parameter.
    pub corrupt: Option<String>,
    /// Check a model with no parameters.
    pub empty: bool,
    /// Finite-difference half-width.
    pub eps: f64,
}

impl Default for GradCheckRequest {
    fn default() -> Self {
        Self { corrupt: None, empty: false, eps: 1e-5 }
    }
}

/// Central differences over every parameter of the 32x32 preset.
pub fn cmd_gradcheck(cfg: &RunConfig, req: &GradCheckRequest, out: &mut dyn Write) -> CliResult<GradCheckReport> {
    let opts = GradCheckOptions {
        eps: req.eps,
        tol: 1e-3,
        corrupt: req.corrupt.clone(),
        ..GradCheckOptions::default()
    };
    let report = if req.empty {
        let mut store = ParamStore::new(cfg.model.seed);
        finite_diff_check(&mut store, |g, _| Ok(g.constant(&Tensor::scalar(0.0))), &opts)?
    } else {
        let mcfg = ModelConfig {
            seed: cfg.model.seed,
            use_er: cfg.model.use_er,
            ..ModelConfig::tiny()
        };
        let mut model = build_model(&mcfg)?;
        let spec = SceneSpec {
            height: mcfg.height,
            width: mcfg.width,
            ..cfg.scene.clone()
        };
        let sample = generate_scene(&spec)?;
        model.gradient_check(&sample, &cfg.loss(), &opts)?
    };
    say(out, &report);
    for f in report.failures() {
        say(out, format!("worst offender {} (max relative error {:e})", f.name, f.max_rel_error));
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DumpTarget {
    Frame,
    Dgr,
    ErAlpha,
    Depth,
}

impl DumpTarget {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "frame" => Ok(Self::Frame),
            "dgr" => Ok(Self::Dgr),
            "er-alpha" => Ok(Self::ErAlpha),
            "depth" => Ok(Self::Depth),
            _ => Err(CliError::usage(format!("unknown dump target `{s}` (frame, dgr, er-alpha, depth)"))),
        }
    }
}

/// Writes the requested tensors as LFTD files under `out_dir/dump`. The
/// input is `image` when given, else scene 0 of the configured spec.
pub fn cmd_dump(cfg: &RunConfig, what: DumpTarget, image: Option<&Path>, untrained: bool, out: &mut dyn Write) -> CliResult<Vec<PathBuf>> {
    let model = if untrained { build_model(&cfg.model)? } else { load_model(cfg)? };
    let dir = cfg.out_dir.join(DUMP_DIR);
    create_dir(&dir)?;
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    if what == DumpTarget::Frame {
        let (n, c) = (model.frame.count(), model.frame.dim());
        tensors.push(("frame".into(), Tensor::new(vec![n, c], model.frame.matrix(&model.params).to_vec())?));
    } else {
        let img = match image {
            Some(p) => read_ppm(p)?,
            None => generate_scene(&cfg.scene.for_index(0))?.image,
        };
        let trace = model.forward(&img)?;
        match what {
            DumpTarget::Dgr => tensors.extend(trace.dgr.into_iter().enumerate().map(|(l, t)| (format!("dgr{l}"), t))),
            DumpTarget::ErAlpha => {
                if trace.er_alpha.is_empty() {
                    return Err(CliError::usage("model has no edge enhancement (use_er = false)"));
                }
                tensors.extend(trace.er_alpha.into_iter().enumerate().map(|(l, t)| (format!("er_alpha{}", l + 1), t)));
            }
            DumpTarget::Depth => tensors.push(("depth".into(), trace.depth)),
            DumpTarget::Frame => unreachable!("handled above"),
        }
    }
    let mut written = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let path = dir.join(format!("{name}.lftd"));
        lftd::write(&path, &t)?;
        say(out, format!("wrote {} {:?}", path.display(), t.shape()));
        written.push(path);
    }
    Ok(written)
}
