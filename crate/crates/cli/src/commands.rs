//! The subcommands. Each returns an outcome struct so tests can inspect what
//! happened; the binary only prints.
//!
//! Run directory layout:
//!
//! ```text
//! <out>/manifest.json        config digest, model ids, cell list
//! <out>/task.toml            task spec the run used
//! <out>/embeddings.jsonl     embedding cache (unless a cache dir is set)
//! <out>/cells/<cell>/        one per (method, seed):
//!     cell.json  selection.json  prompts.jsonl  predictions.jsonl  report.json
//! <out>/reports.{json,csv}  aggregate.{json,csv}  plotdata.json  ranking.json
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use demopick_core::corpus::load_pool;
use demopick_core::embedder::{EmbedOptions, Embedder, EmbeddingCache, HttpEmbeddingService};
use demopick_core::eval::{
    aggregate, aggregate_to_csv, emit_report, rank_both, rank_methods, write_atomic, AggregateRow,
    Metric, ReportFormat, RunInfo,
};
use demopick_core::experiment::{
    read_journal, run_predictions, run_selection, Backends, RunOptions,
};
use demopick_core::inference::HttpScorer;
use demopick_core::mock::{HashingEmbedder, MockMode, MockScorer};
use demopick_core::prompt::render_example;
use demopick_core::{
    AcquisitionConfig, EvaluationReport, Pool, PredictionRecord, Scorer, SelectionResult, TaskKind,
    TaskSpec,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Embed,
    Select,
    Predict,
    Evaluate,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Select => "select",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        })
    }
}

/// An error tagged with the pipeline stage it came from.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: anyhow::Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {:#}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

pub type StageResult<T> = Result<T, StageError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T, E: Into<anyhow::Error>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|e| StageError {
            stage,
            source: e.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub task: String,
    pub n_pool: usize,
    pub n_test: usize,
    pub scoring_model: String,
    pub embedding_model: Option<String>,
    pub ablate_labels: bool,
    pub cells: Vec<String>,
}

/// Loaded data and service backends for one config.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub task: Arc<TaskSpec>,
    pub pool: Pool,
    pub test: Pool,
    pub scorer: Box<dyn Scorer>,
    pub embedder: Option<Embedder>,
}

impl Session {
    pub fn open(cfg: ExperimentConfig) -> StageResult<Self> {
        cfg.validate().at(Stage::Config)?;
        let task = Arc::new(TaskSpec::load(cfg.resolve(&cfg.task)).at(Stage::Ingest)?);
        let pool = load_pool(cfg.resolve(&cfg.pool), task.clone()).at(Stage::Ingest)?;
        let test = load_pool(cfg.resolve(&cfg.test), task.clone()).at(Stage::Ingest)?;
        if test.is_empty() {
            return Err(anyhow!("test set is empty")).at(Stage::Ingest);
        }
        let (scorer, embedding): (
            Box<dyn Scorer>,
            Option<Box<dyn demopick_core::embedder::EmbeddingService>>,
        ) = match &cfg.mock {
            Some(spec) => {
                let label_prefix = task.template.label_prefix.as_str();
                let mode =
                    MockMode::parse(spec, &task.separator, label_prefix).at(Stage::Config)?;
                (
                    Box::new(MockScorer::new(mode)),
                    Some(Box::new(HashingEmbedder::default())),
                )
            }
            None => {
                let s = cfg.scoring.as_ref().expect("validated");
                (
                    Box::new(HttpScorer::new(&s.url, &s.model)),
                    cfg.embedding
                        .as_ref()
                        .map(|e| Box::new(HttpEmbeddingService::new(&e.url, &e.model)) as Box<_>),
                )
            }
        };
        let embedder = match embedding {
            Some(service) => {
                let cache_path = cfg
                    .cache_file()
                    .unwrap_or_else(|| cfg.output_dir().join("embeddings.jsonl"));
                let cache = EmbeddingCache::open(&cache_path).at(Stage::Embed)?;
                Some(Embedder::new(service, cache).with_options(EmbedOptions {
                    concurrency: cfg.concurrency,
                    ..EmbedOptions::default()
                }))
            }
            None => None,
        };
        Ok(Session {
            cfg,
            task,
            pool,
            test,
            scorer,
            embedder,
        })
    }

    fn backends(&self) -> Backends<'_> {
        Backends {
            scorer: self.scorer.as_ref(),
            embedder: self.embedder.as_ref(),
        }
    }

    pub fn out(&self) -> PathBuf {
        self.cfg.output_dir()
    }

    pub fn cell_dir(&self, cell: &AcquisitionConfig) -> PathBuf {
        self.out().join("cells").join(cell.cell_name())
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            config_digest: self.cfg.digest(),
            task: self.task.name.clone(),
            n_pool: self.pool.len(),
            n_test: self.test.len(),
            scoring_model: self.scorer.model_id().to_string(),
            embedding_model: self.embedder.as_ref().map(|e| e.model_id().to_string()),
            ablate_labels: self.cfg.ablate_labels,
            cells: self.cfg.cells().iter().map(|c| c.cell_name()).collect(),
        }
    }

    fn write_run_header(&self) -> anyhow::Result<()> {
        let out = self.out();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        write_json(&out.join("manifest.json"), &self.manifest())?;
        write_atomic(
            &out.join("task.toml"),
            self.task.to_toml_string().as_bytes(),
        )?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub name: String,
    pub dir: PathBuf,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone)]
pub struct ReportOutcome {
    pub reports: Vec<EvaluationReport>,
    pub rows: Vec<AggregateRow>,
    pub metric: Metric,
    pub ranking: Vec<String>,
    pub disagree: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out: PathBuf,
    pub cells: Vec<CellOutcome>,
    pub report: ReportOutcome,
}

/// Full pipeline: select, predict and evaluate every cell, then report.
pub fn cmd_run(cfg: ExperimentConfig) -> StageResult<RunOutcome> {
    let session = Session::open(cfg)?;
    session.write_run_header().at(Stage::Report)?;
    let mut cells = Vec::new();
    for cell in session.cfg.cells() {
        let selection = select_cell(&session, &cell)?;
        cells.push(predict_cell(&session, &cell, selection)?);
    }
    let report = cmd_report(&session.out(), Metric::MacroF1)?;
    Ok(RunOutcome {
        out: session.out(),
        cells,
        report,
    })
}

/// Selection only; writes `selection.json` per cell and returns the paths.
pub fn cmd_select(cfg: ExperimentConfig) -> StageResult<Vec<PathBuf>> {
    let session = Session::open(cfg)?;
    session.write_run_header().at(Stage::Report)?;
    let mut paths = Vec::new();
    for cell in session.cfg.cells() {
        select_cell(&session, &cell)?;
        paths.push(session.cell_dir(&cell).join("selection.json"));
    }
    Ok(paths)
}

/// Prediction from selections written earlier by `select`.
pub fn cmd_predict(cfg: ExperimentConfig) -> StageResult<Vec<CellOutcome>> {
    let session = Session::open(cfg)?;
    session.write_run_header().at(Stage::Report)?;
    let mut cells = Vec::new();
    for cell in session.cfg.cells() {
        let path = session.cell_dir(&cell).join("selection.json");
        if !path.exists() {
            return Err(anyhow!("{} is missing; run `select` first", path.display()))
                .at(Stage::Predict);
        }
        let selection: SelectionResult = read_json(&path).at(Stage::Predict)?;
        let made = selection.config();
        if (made.method, made.k, made.polarity, made.seed)
            != (cell.method, cell.k, cell.polarity, cell.seed)
        {
            return Err(anyhow!(
                "{} was made with different settings",
                path.display()
            ))
            .at(Stage::Predict);
        }
        cells.push(predict_cell(&session, &cell, selection)?);
    }
    Ok(cells)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedOutcome {
    pub model: String,
    pub texts: usize,
    pub requests: usize,
}

/// Embeds the pool and test set into the cache ahead of selection.
pub fn cmd_embed(cfg: ExperimentConfig) -> StageResult<EmbedOutcome> {
    let session = Session::open(cfg)?;
    let embedder = session
        .embedder
        .as_ref()
        .ok_or_else(|| anyhow!("no embedding service configured"))
        .at(Stage::Config)?;
    let texts = session
        .pool
        .examples()
        .iter()
        .chain(session.test.examples())
        .map(|e| render_example(e, &session.task, false))
        .collect::<Result<Vec<_>, _>>()
        .at(Stage::Embed)?;
    embedder.embed_batch(&texts).at(Stage::Embed)?;
    Ok(EmbedOutcome {
        model: embedder.model_id().to_string(),
        texts: texts.len(),
        requests: embedder.requests_issued(),
    })
}

fn select_cell(session: &Session, cell: &AcquisitionConfig) -> StageResult<SelectionResult> {
    let name = cell.cell_name();
    let dir = session.cell_dir(cell);
    let selection = run_selection(
        &session.pool,
        &session.test,
        cell,
        &session.task,
        &session.backends(),
        session.cfg.concurrency,
    )
    .with_context(|| format!("cell {name}"))
    .at(Stage::Select)?;
    write_json(&dir.join("cell.json"), cell).at(Stage::Select)?;
    write_json(&dir.join("selection.json"), &selection).at(Stage::Select)?;
    log::info!("{name}: selection written");
    Ok(selection)
}

fn predict_cell(
    session: &Session,
    cell: &AcquisitionConfig,
    selection: SelectionResult,
) -> StageResult<CellOutcome> {
    let name = cell.cell_name();
    let dir = session.cell_dir(cell);
    let opts = RunOptions {
        ablate_labels: session.cfg.ablate_labels,
        seed: cell.seed,
        concurrency: session.cfg.concurrency,
        journal: Some(dir.join("predictions.jsonl")),
    };
    let output = run_predictions(
        &session.pool,
        &session.test,
        selection,
        &session.task,
        &opts,
        session.scorer.as_ref(),
    )
    .with_context(|| format!("cell {name}"))
    .at(Stage::Predict)?;
    if session.cfg.dump_prompts {
        let mut text = String::new();
        for p in &output.prompts {
            text.push_str(&serde_json::to_string(p).expect("prompt serializes"));
            text.push('\n');
        }
        write_atomic(&dir.join("prompts.jsonl"), text.as_bytes()).at(Stage::Predict)?;
    }
    let report = cell_report(
        &session.task,
        cell,
        session.scorer.model_id(),
        &output.records,
    )
    .with_context(|| format!("cell {name}"))
    .at(Stage::Evaluate)?;
    write_json(&dir.join("report.json"), &report).at(Stage::Evaluate)?;
    log::info!("{name}: accuracy {:.4}", report.accuracy);
    Ok(CellOutcome { name, dir, report })
}

fn cell_report(
    task: &TaskSpec,
    cell: &AcquisitionConfig,
    model_id: &str,
    records: &[PredictionRecord],
) -> anyhow::Result<EvaluationReport> {
    Ok(EvaluationReport::from_records(
        task,
        RunInfo {
            method: cell.method.as_str(),
            model_id,
            k: cell.k,
            polarity: cell.polarity.as_str(),
            seed: cell.seed,
        },
        records,
    )?)
}

#[derive(Serialize)]
struct RankingFile<'a> {
    metric: Metric,
    ranking: &'a [String],
    by_macro_f1: &'a [String],
    by_accuracy: &'a [String],
    disagree: bool,
}

/// Rebuilds every cell report from its prediction journal, then writes the
/// aggregate files and ranks the methods under `metric`.
pub fn cmd_report(run_dir: &Path, metric: Metric) -> StageResult<ReportOutcome> {
    let manifest: Manifest = read_json(&run_dir.join("manifest.json")).at(Stage::Report)?;
    let task = TaskSpec::load(run_dir.join("task.toml")).at(Stage::Report)?;
    let mut reports = Vec::with_capacity(manifest.cells.len());
    for name in &manifest.cells {
        let dir = run_dir.join("cells").join(name);
        let cell: AcquisitionConfig = read_json(&dir.join("cell.json")).at(Stage::Report)?;
        let journal = dir.join("predictions.jsonl");
        if !journal.exists() {
            return Err(anyhow!("{} is missing", journal.display())).at(Stage::Report);
        }
        let records = read_journal(&journal).at(Stage::Report)?;
        if records.len() != manifest.n_test {
            return Err(anyhow!(
                "{} holds {} of {} predictions",
                journal.display(),
                records.len(),
                manifest.n_test
            ))
            .at(Stage::Report);
        }
        reports
            .push(cell_report(&task, &cell, &manifest.scoring_model, &records).at(Stage::Report)?);
    }
    report_from(run_dir, reports, metric, task.kind)
}

fn report_from(
    run_dir: &Path,
    reports: Vec<EvaluationReport>,
    metric: Metric,
    kind: TaskKind,
) -> StageResult<ReportOutcome> {
    let mut warnings = Vec::new();
    let metric = if kind == TaskKind::Multichoice && metric == Metric::MacroF1 {
        warnings.push("multichoice task has no macro-F1; ranking by accuracy".to_string());
        Metric::Accuracy
    } else {
        metric
    };
    let rows = aggregate(&reports, &["method", "polarity", "k"]).at(Stage::Report)?;
    let ranking = rank_methods(&rows, metric).at(Stage::Report)?;
    let both = rank_both(&rows).at(Stage::Report)?;
    if both.disagree {
        warnings.push(format!(
            "method rankings disagree: macro-F1 orders {:?}, accuracy orders {:?}",
            both.by_macro_f1, both.by_accuracy
        ));
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let write = || -> anyhow::Result<()> {
        emit_report(&run_dir.join("reports.json"), &reports, ReportFormat::Json)?;
        emit_report(&run_dir.join("reports.csv"), &reports, ReportFormat::Csv)?;
        emit_report(
            &run_dir.join("plotdata.json"),
            &reports,
            ReportFormat::Plotdata,
        )?;
        write_json(&run_dir.join("aggregate.json"), &rows)?;
        write_atomic(
            &run_dir.join("aggregate.csv"),
            aggregate_to_csv(&rows)?.as_bytes(),
        )?;
        write_json(
            &run_dir.join("ranking.json"),
            &RankingFile {
                metric,
                ranking: &ranking,
                by_macro_f1: &both.by_macro_f1,
                by_accuracy: &both.by_accuracy,
                disagree: both.disagree,
            },
        )
    };
    write().at(Stage::Report)?;
    Ok(ReportOutcome {
        reports,
        rows,
        metric,
        ranking,
        disagree: both.disagree,
        warnings,
    })
}

/// Writes a run directory from reports computed elsewhere and reports on it.
/// Lets callers rank results that did not come from [`cmd_run`].
pub fn report_reports(
    run_dir: &Path,
    reports: Vec<EvaluationReport>,
    metric: Metric,
    kind: TaskKind,
) -> StageResult<ReportOutcome> {
    if reports.is_empty() {
        return Err(anyhow!("no reports")).at(Stage::Report);
    }
    fs::create_dir_all(run_dir)
        .with_context(|| format!("creating {}", run_dir.display()))
        .at(Stage::Report)?;
    report_from(run_dir, reports, metric, kind)
}
