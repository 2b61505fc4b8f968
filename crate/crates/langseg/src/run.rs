//! Pipelines behind the subcommands: train with logging and checkpoints, evaluate into report
//! files, and the ablation matrix.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use langseg_core::eval::{self, AblationVariant, Segmenter};
use langseg_core::metrics::MetricReport;
use langseg_core::model::{self, ModelConfig};
use langseg_core::synth::{self, Scenario, SegSample};
use langseg_core::text::{self, TokenSequence, Vocabulary};
use langseg_core::train::{StepLog, TrainConfig, Trainer};
use langseg_core::ParamStore;

use crate::checkpoint::{checkpoint_path, Checkpoint};
use crate::config::{architecture_hash, Resolved};
use crate::error::{self, AppError, Result};
use crate::netpbm;

pub const TRAIN_LOG: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,gen,triplet,seg,multi_scale,total";

/// One CSV line of the loss log. Floats use the shortest representation that reads back
/// to the same bits, so identical runs give identical files.
pub fn log_line(l: &StepLog) -> String {
    let b = &l.breakdown;
    format!("{},{},{},{},{},{}", l.step, b.gen, b.triplet, b.seg, b.multi_scale, b.total)
}

pub fn tokenize_all(samples: &[SegSample], vocab: &Vocabulary, max_len: usize) -> Vec<TokenSequence> {
    samples.iter().map(|s| text::tokenize(&s.prompt, vocab, max_len)).collect()
}

/// Keeps the header and the lines for steps `<= step` of an existing log.
fn truncated_log(path: &Path, step: u64) -> Result<String> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(format!("{LOG_HEADER}\n")),
        Err(e) => return Err(AppError::io(path, e)),
    };
    let mut out = format!("{LOG_HEADER}\n");
    for line in text.lines().skip(1) {
        let s: u64 = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| AppError::format(path, format!("bad log line {line:?}")))?;
        if s <= step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trains on `data`, appending to `<out>/train_log.csv` and writing `ckpt_<step>.bin` every
/// `checkpoint_interval` steps and at the end. `on_step` sees every step's log.
pub fn train(
    res: &Resolved,
    data: &[SegSample],
    resume: Option<Checkpoint>,
    out: &Path,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<Checkpoint> {
    let hash = architecture_hash(&res.model, &res.vocab);
    let tokens = tokenize_all(data, &res.vocab, res.model.max_tokens);
    let mut trainer = match resume {
        None => {
            let params = model::init_params(&res.model, res.train.seed)?;
            Trainer::new(res.model, res.train, params, data, &tokens)?
        }
        Some(ck) => {
            ck.check_hash(&hash)?;
            Trainer::resume(res.model, res.train, ck.params, ck.adam, ck.step, data, &tokens)?
        }
    };
    let log_path = out.join(TRAIN_LOG);
    let head = truncated_log(&log_path, trainer.step)?;
    error::write(&log_path, head.as_bytes())?;
    let file = std::fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| AppError::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let snapshot = |t: &Trainer<'_>| Checkpoint {
        step: t.step,
        model: res.model,
        config_hash: hash.clone(),
        params: t.params.clone(),
        adam: t.adam.clone(),
    };
    while !trainer.is_done() {
        let rec = trainer.step();
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                log.flush().map_err(|e| AppError::io(&log_path, e))?;
                return Err(e.into());
            }
        };
        writeln!(log, "{}", log_line(&rec)).map_err(|e| AppError::io(&log_path, e))?;
        on_step(&rec);
        let every = res.train.checkpoint_interval;
        if every > 0 && rec.step % every == 0 && !trainer.is_done() {
            snapshot(&trainer).save(&checkpoint_path(out, rec.step))?;
        }
    }
    log.flush().map_err(|e| AppError::io(&log_path, e))?;
    let ck = snapshot(&trainer);
    ck.save(&checkpoint_path(out, ck.step))?;
    Ok(ck)
}

/// Trains without touching the filesystem; used by the ablation runner.
pub fn train_in_memory(model: ModelConfig, train: TrainConfig, vocab: &Vocabulary, data: &[SegSample]) -> Result<ParamStore> {
    let tokens = tokenize_all(data, vocab, model.max_tokens);
    let params = model::init_params(&model, train.seed)?;
    let mut t = Trainer::new(model, train, params, data, &tokens)?;
    while !t.is_done() {
        t.step()?;
    }
    Ok(t.params)
}

#[derive(Debug, Serialize)]
struct ClassIouJson {
    id: usize,
    name: String,
    iou: Option<f64>,
}

#[derive(Debug, Serialize)]
struct ReportJson {
    miou: f64,
    pixel_accuracy: f64,
    mean_class_iou: f64,
    evaluated_pixels: u64,
    ignored_classes: Vec<usize>,
    class_iou: Vec<ClassIouJson>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    scenarios: Vec<ScenarioJson>,
}

#[derive(Debug, Serialize)]
struct ScenarioJson {
    scenario: String,
    #[serde(flatten)]
    report: ReportJson,
}

#[derive(Debug, Serialize)]
struct ReportFile {
    metadata: Metadata,
    #[serde(flatten)]
    report: ReportJson,
}

#[derive(Debug, Serialize)]
struct Metadata {
    method: String,
    checkpoint_step: u64,
    mean_class_iou_definition: &'static str,
    miou_definition: &'static str,
}

fn report_json(r: &MetricReport, names: &[String]) -> ReportJson {
    ReportJson {
        miou: r.miou,
        pixel_accuracy: r.pixel_accuracy,
        mean_class_iou: r.mean_class_iou,
        evaluated_pixels: r.evaluated_pixels,
        ignored_classes: r.ignored_classes.clone(),
        class_iou: r
            .class_iou
            .iter()
            .enumerate()
            .map(|(id, iou)| ClassIouJson {
                id,
                name: names.get(id).cloned().unwrap_or_else(|| format!("class{id}")),
                iou: *iou,
            })
            .collect(),
        scenarios: r
            .scenarios
            .iter()
            .map(|(s, sub)| ScenarioJson {
                scenario: s.clone(),
                report: report_json(sub, names),
            })
            .collect(),
    }
}

const MEAN_CLASS_IOU_NOTE: &str =
    "unweighted mean of per-class IoU over classes present in ground truth (numerically equal to miou)";
const MIOU_NOTE: &str = "mean IoU over classes with a non-empty ground-truth row; absent classes are listed in ignored_classes";

pub const METRIC_COLUMNS: &str = "miou,pixel_accuracy,class_iou";

fn metric_cells(r: &MetricReport) -> String {
    format!("{:.6},{:.6},{:.6}", r.miou, r.pixel_accuracy, r.mean_class_iou)
}

/// `report.json`, `report.csv` and `report_scenarios.csv` under `out`.
pub fn write_report(report: &MetricReport, method: &str, step: u64, out: &Path) -> Result<()> {
    let file = ReportFile {
        metadata: Metadata {
            method: method.to_string(),
            checkpoint_step: step,
            mean_class_iou_definition: MEAN_CLASS_IOU_NOTE,
            miou_definition: MIOU_NOTE,
        },
        report: report_json(report, &synth::class_names()),
    };
    let mut json = serde_json::to_vec_pretty(&file).expect("report serializes");
    json.push(b'\n');
    error::write(&out.join("report.json"), &json)?;
    let csv = format!("method,{METRIC_COLUMNS}\n{method},{}\n", metric_cells(report));
    error::write(&out.join("report.csv"), csv.as_bytes())?;
    let mut sc = format!("scenario,{METRIC_COLUMNS}\n");
    for (name, sub) in &report.scenarios {
        let _ = writeln!(sc, "{name},{}", metric_cells(sub));
    }
    error::write(&out.join("report_scenarios.csv"), sc.as_bytes())
}

pub struct EvalOutput {
    pub report: MetricReport,
    /// Predicted masks written, one per evaluated sample.
    pub predictions: Vec<PathBuf>,
}

/// Evaluates `samples` (optionally only some scenarios), writing reports and predicted masks
/// `<out>/predictions/<index>.pgm`.
pub fn evaluate(
    ck: &Checkpoint,
    vocab: &Vocabulary,
    samples: &[SegSample],
    filter: Option<&[Scenario]>,
    zero_text: bool,
    out: &Path,
) -> Result<EvalOutput> {
    let seg = Segmenter {
        params: &ck.params,
        config: ck.model,
        vocab,
        zero_text,
    };
    let report = eval::evaluate(&seg, samples, filter)?;
    let mut predictions = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if filter.is_some_and(|f| !f.contains(&s.scenario)) {
            continue;
        }
        let pred = eval::SegModel::predict(&seg, s)?;
        let p = out.join("predictions").join(format!("{i:06}.pgm"));
        netpbm::write_pgm(&p, &pred)?;
        predictions.push(p);
    }
    write_report(&report, "langseg", ck.step, out)?;
    Ok(EvalOutput { report, predictions })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: AblationVariant,
    /// Held-out report per training seed.
    pub runs: Vec<(u64, MetricReport)>,
}

impl AblationRow {
    fn mean(&self, f: impl Fn(&MetricReport) -> f64) -> f64 {
        self.runs.iter().map(|(_, r)| f(r)).sum::<f64>() / self.runs.len() as f64
    }

    pub fn miou(&self) -> f64 {
        self.mean(|r| r.miou)
    }

    pub fn pixel_accuracy(&self) -> f64 {
        self.mean(|r| r.pixel_accuracy)
    }

    pub fn mean_class_iou(&self) -> f64 {
        self.mean(|r| r.mean_class_iou)
    }

    /// Seed-averaged mIoU on one scenario of the held-out split.
    pub fn scenario_miou(&self, name: &str) -> Option<f64> {
        let v: Option<Vec<f64>> = self.runs.iter().map(|(_, r)| r.scenario(name).map(|s| s.miou)).collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Trains every variant once per seed on the first 80% of `data` and evaluates on the rest.
pub fn run_ablation(
    res: &Resolved,
    data: &[SegSample],
    variants: &[AblationVariant],
    seeds: &[u64],
    on_run: &mut dyn FnMut(AblationVariant, u64, &MetricReport),
) -> Result<Vec<AblationRow>> {
    let (train, test) = eval::held_out_split(data);
    if train.is_empty() || test.is_empty() {
        return Err(AppError::Config(format!(
            "ablation needs a held-out split; {} samples is too few",
            data.len()
        )));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let base = TrainConfig { seed, ..res.train };
            let (m, t) = v.apply(&res.model, &base);
            let params = train_in_memory(m, t, &res.vocab, train)?;
            let seg = Segmenter {
                params: &params,
                config: m,
                vocab: &res.vocab,
                zero_text: t.zero_text,
            };
            let r = eval::evaluate(&seg, test, None)?;
            on_run(v, seed, &r);
            runs.push((seed, r));
        }
        rows.push(AblationRow { variant: v, runs });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("variant,{METRIC_COLUMNS}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6}",
            r.variant.name(),
            r.miou(),
            r.pixel_accuracy(),
            r.mean_class_iou()
        );
    }
    s
}

/// Per-variant, per-scenario held-out mIoU (seed-averaged).
pub fn ablation_scenarios_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,scenario,miou\n");
    for r in rows {
        for sc in synth::SCENARIOS {
            if let Some(m) = r.scenario_miou(sc.as_str()) {
                let _ = writeln!(s, "{},{},{m:.6}", r.variant.name(), sc.as_str());
            }
        }
    }
    s
}
