use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hba_core::data::{load_dataset, prepare_image, preprocess, read_rgb, split, synth_fundus, write_dataset, Prepared};
use hba_core::metrics::{
    evaluate, extract_centroid, write_overlay, Basis, EvalReport, Segmenter, DEFAULT_THRESHOLD,
};
use hba_core::model::{Network, NetworkConfig, Variant};
use hba_core::train::{fit, write_history, HistoryRow, TrainError, TrainState};
use hba_core::verify::{check_scope, CheckResult, Precision, Scope};
use hba_core::Shape;
use image::{Rgb, RgbImage};

use crate::config::{RunConfig, SplitMode};

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const HISTORY: &str = "history.csv";

/// Paths inside a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        RunPaths { root: root.to_path_buf() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join(RESOLVED_CONFIG)
    }
    pub fn history(&self) -> PathBuf {
        self.root.join(HISTORY)
    }
    pub fn best(&self) -> PathBuf {
        self.root.join("checkpoints/best.ckpt")
    }
    pub fn last(&self) -> PathBuf {
        self.root.join("checkpoints/last.ckpt")
    }
    pub fn state(&self) -> PathBuf {
        self.root.join("checkpoints/state.bin")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }
}

/// Validates `run` and writes its resolved copy before any other work.
fn start_run(run: &RunConfig) -> Result<RunPaths> {
    run.validate()?;
    let paths = RunPaths::new(&run.out);
    fs::create_dir_all(&paths.root).with_context(|| format!("cannot create {}", paths.root.display()))?;
    fs::write(paths.config(), run.to_text())?;
    Ok(paths)
}

fn load_prepared(dataset: &Path, size: usize, fovea_radius: f64) -> Result<Vec<Prepared>> {
    let samples = load_dataset(dataset)?;
    if samples.is_empty() {
        bail!("dataset {} has no samples", dataset.display());
    }
    samples.iter().map(|s| preprocess(s, size, fovea_radius).map_err(Into::into)).collect()
}

fn run_dataset(run: &RunConfig) -> Result<Vec<Prepared>> {
    let dataset = run.dataset.as_deref().context("no dataset configured (set `dataset = <dir>`)")?;
    load_prepared(dataset, run.network.input_size, run.fovea_radius())
}

struct Partition {
    train: Vec<Prepared>,
    val: Vec<Prepared>,
    test: Vec<Prepared>,
}

fn partition(run: &RunConfig, data: Vec<Prepared>) -> Result<Partition> {
    Ok(match run.split {
        SplitMode::All => Partition { train: data.clone(), val: data.clone(), test: data },
        SplitMode::Holdout => {
            if data.len() < 3 {
                bail!("a holdout split needs at least 3 samples, found {} (use `split = all`)", data.len());
            }
            let s = split(&data, run.seed())?;
            Partition { train: s.train, val: s.val, test: s.test }
        }
    })
}

#[derive(Debug)]
pub struct TrainSummary {
    pub paths: RunPaths,
    pub param_count: usize,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub report: EvalReport,
}

fn train_prepared(run: &RunConfig, data: Partition, resume: bool, log: &mut dyn Write) -> Result<TrainSummary> {
    let paths = start_run(run)?;
    let (mut net, state) = if resume && paths.state().exists() {
        let net = Network::load(&paths.last(), &run.network)?;
        let state = TrainState::load(&paths.state())?;
        writeln!(log, "resuming after epoch {}", state.epoch)?;
        (net, Some(state))
    } else {
        (Network::build(&run.network, run.seed())?, None)
    };
    let param_count = net.param_count();
    writeln!(
        log,
        "{}: {param_count} parameters, {} train / {} val / {} test samples",
        run.network.variant,
        data.train.len(),
        data.val.len(),
        data.test.len()
    )?;
    let max_epochs = run.train.max_epochs;
    let outcome = fit(&mut net, &data.train, &data.val, &run.train, state, &mut |e| {
        let io = |e: std::io::Error| TrainError::Io(e);
        write_history(&paths.history(), &e.state.history)?;
        e.network.save(&paths.last())?;
        if e.improved {
            e.network.save(&paths.best())?;
        }
        e.state.save(&paths.state())?;
        writeln!(
            log,
            "epoch {:>4}/{max_epochs} lr {:.6} train {:.4} val {:.4}{}",
            e.epoch,
            e.lr,
            e.train_loss,
            e.val_loss,
            if e.improved { " *" } else { "" }
        )
        .map_err(io)?;
        Ok(())
    })?;
    write_history(&paths.history(), &outcome.history)?;
    net.save(&paths.best())?;
    if outcome.stopped_early {
        writeln!(log, "early stop after epoch {}; best epoch {}", outcome.history.len(), outcome.best_epoch)?;
    }
    let report = evaluate(&net, &data.test, Basis::Resized)?;
    let name = match run.split {
        SplitMode::Holdout => "test.csv",
        SplitMode::All => "train.csv",
    };
    report.write_csv(&paths.eval().join(name))?;
    log_report(&report, log)?;
    Ok(TrainSummary {
        paths,
        param_count,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        stopped_early: outcome.stopped_early,
        report,
    })
}

/// Trains one network and evaluates its best weights on the test split.
pub fn cmd_train(run: &RunConfig, resume: bool, log: &mut dyn Write) -> Result<TrainSummary> {
    run.validate()?;
    let data = partition(run, run_dataset(run)?)?;
    train_prepared(run, data, resume, log)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|v| format!("{v:.digits$}")).unwrap_or_else(|| "-".into())
}

fn log_report(report: &EvalReport, log: &mut dyn Write) -> Result<()> {
    for w in &report.warnings {
        writeln!(log, "warning: {w}")?;
    }
    write!(
        log,
        "fovea ED {} px ({} of {} located, {} basis)",
        fmt_opt(report.fovea_ed.mean, 3),
        report.fovea_ed.count,
        report.rows.len(),
        report.basis
    )?;
    if report.has_od {
        write!(log, ", OD ED {} px, OD DC {}", fmt_opt(report.od_ed.mean, 3), fmt_opt(report.od_dc.mean, 4))?;
    }
    writeln!(log)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Missing when the variant's configuration is invalid.
    pub params: Option<usize>,
    pub fovea_ed: Option<f64>,
    pub od_dc: Option<f64>,
    pub error: Option<String>,
}

fn variant_dir(v: Variant) -> String {
    v.name().replace('+', "_")
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,params,fovea_ed,od_dc\n");
    for r in rows {
        let cell = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let params = r.params.map(|p| p.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{params},{},{}\n", r.variant, cell(r.fovea_ed), cell(r.od_dc)));
    }
    out
}

/// Every variant of the ladder under one seed: parameter counts, and unless
/// `count_only`, a training run and test metrics per variant.
pub fn cmd_ablate(run: &RunConfig, count_only: bool, log: &mut dyn Write) -> Result<Vec<AblationRow>> {
    let paths = start_run(run)?;
    let data = if count_only { None } else { Some(run_dataset(run)?) };
    let mut rows = Vec::new();
    for variant in Variant::LADDER {
        let mut sub = run.clone();
        sub.network = run.network.with_variant(variant);
        sub.out = paths.root.join(variant_dir(variant));
        let mut row = AblationRow { variant, params: None, fovea_ed: None, od_dc: None, error: None };
        match sub.network.validate().and_then(|_| sub.network.param_count()) {
            Ok(p) => row.params = Some(p),
            Err(e) => {
                writeln!(log, "{variant} failed: {e}")?;
                row.error = Some(e.to_string());
                rows.push(row);
                continue;
            }
        }
        if let Some(data) = &data {
            writeln!(log, "== {variant}")?;
            match partition(&sub, data.clone()).and_then(|p| train_prepared(&sub, p, false, log)) {
                Ok(summary) => {
                    row.fovea_ed = summary.report.fovea_ed.mean;
                    row.od_dc = summary.report.od_dc.mean;
                }
                Err(e) => {
                    writeln!(log, "{variant} failed: {e:#}")?;
                    row.error = Some(format!("{e:#}"));
                }
            }
        }
        rows.push(row);
    }
    fs::write(paths.root.join("ablation.csv"), ablation_csv(&rows))?;
    writeln!(log, "{:<22} {:>12} {:>10} {:>8}", "variant", "params", "fovea ED", "OD DC")?;
    for r in &rows {
        writeln!(
            log,
            "{:<22} {:>12} {:>10} {:>8}{}",
            r.variant.to_string(),
            r.params.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
            fmt_opt(r.fovea_ed, 3),
            fmt_opt(r.od_dc, 4),
            if r.error.is_some() { "  (failed)" } else { "" }
        )?;
    }
    Ok(rows)
}

pub struct EvaluateArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    /// When set, the checkpoint must have been written for this network.
    pub expected: Option<&'a NetworkConfig>,
    pub fovea_radius: Option<f64>,
    pub basis: Basis,
    pub overlay: bool,
    pub out: &'a Path,
}

pub fn load_network(checkpoint: &Path, expected: Option<&NetworkConfig>) -> Result<Network> {
    Ok(match expected {
        Some(cfg) => Network::load(checkpoint, cfg)?,
        None => Network::load_any(checkpoint)?,
    })
}

/// Scores a checkpoint on a dataset; writes `eval/report.csv` and optional overlays.
pub fn cmd_evaluate(args: &EvaluateArgs, log: &mut dyn Write) -> Result<EvalReport> {
    let net = load_network(args.checkpoint, args.expected)?;
    let size = net.config().input_size;
    let radius = args.fovea_radius.unwrap_or_else(|| hba_core::data::fovea_radius_for(size));
    let data = load_prepared(args.dataset, size, radius)?;
    let report = evaluate(&net, &data, args.basis)?;
    let paths = RunPaths::new(args.out);
    report.write_csv(&paths.eval().join("report.csv"))?;
    if args.overlay {
        for s in &data {
            let probs = net.segment(s)?;
            write_overlay(&paths.eval().join("overlays").join(format!("{}.png", s.id)), s, &probs)?;
        }
    }
    log_report(&report, log)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub image: String,
    /// Original-image coordinates.
    pub fovea_xy: Option<(f64, f64)>,
    pub od_xy: Option<(f64, f64)>,
}

/// Segments images; writes one mask PNG per image (red fovea, green disc,
/// original size) and `predictions/coordinates.csv`.
pub fn cmd_predict(checkpoint: &Path, images: &[PathBuf], out: &Path, log: &mut dyn Write) -> Result<Vec<Prediction>> {
    if images.is_empty() {
        bail!("no images given");
    }
    let net = load_network(checkpoint, None)?;
    let size = net.config().input_size;
    let dir = RunPaths::new(out).predictions();
    fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    let mut csv = String::from("image,fovea_x,fovea_y,od_x,od_y\n");
    for path in images {
        let (w, h, rgb) = read_rgb(path)?;
        let (input, scale) = prepare_image(w, h, &rgb, size)?;
        let mut probs = net.predict(&input)?;
        for v in probs.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        let plane = size * size;
        let centroid = |c: usize| {
            extract_centroid(&probs.data()[c * plane..(c + 1) * plane], size, size, DEFAULT_THRESHOLD)
                .map(|p| scale.to_original(p))
        };
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let pred = Prediction { image: stem.clone(), fovea_xy: centroid(0), od_xy: centroid(1) };
        let full = if (w, h) == (size, size) {
            probs
        } else {
            probs.resized((h, w), hba_core::tensor::ResampleMode::Bilinear)?
        };
        debug_assert_eq!(full.shape(), Shape::new(1, 2, h, w));
        let on = |c: usize, x: u32, y: u32| full.data()[c * w * h + y as usize * w + x as usize] > DEFAULT_THRESHOLD;
        let mask = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            Rgb([if on(0, x, y) { 255 } else { 0 }, if on(1, x, y) { 255 } else { 0 }, 0])
        });
        let mask_path = dir.join(format!("{stem}.png"));
        mask.save(&mask_path).with_context(|| format!("cannot write {}", mask_path.display()))?;
        let xy = |p: Option<(f64, f64)>| p.map(|(x, y)| format!("{x:.3},{y:.3}")).unwrap_or_else(|| ",".into());
        csv.push_str(&format!("{stem},{},{}\n", xy(pred.fovea_xy), xy(pred.od_xy)));
        writeln!(log, "{stem}: fovea {} disc {}", xy(pred.fovea_xy), xy(pred.od_xy))?;
        rows.push(pred);
    }
    fs::write(dir.join("coordinates.csv"), csv)?;
    Ok(rows)
}

/// Runs the gradient suites of `scopes` in both precisions.
pub fn cmd_gradcheck(scopes: &[Scope], log: &mut dyn Write) -> Result<Vec<CheckResult>> {
    let mut all = Vec::new();
    for &scope in scopes {
        for precision in [Precision::F32, Precision::F64] {
            for r in check_scope(scope, precision)? {
                writeln!(log, "{r}")?;
                all.push(r);
            }
        }
    }
    Ok(all)
}

pub struct SynthArgs<'a> {
    pub out: &'a Path,
    pub count: usize,
    pub size: usize,
    pub disease_level: f64,
    pub seed: u64,
}

pub fn cmd_synth(args: &SynthArgs, log: &mut dyn Write) -> Result<()> {
    let samples = synth_fundus(args.count, args.size, args.disease_level, args.seed)?;
    write_dataset(args.out, &samples)?;
    writeln!(log, "wrote {} synthetic images to {}", samples.len(), args.out.display())?;
    Ok(())
}
