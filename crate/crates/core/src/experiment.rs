//! One (method, seed) cell of an experiment: select demonstrations, build
//! prompts, predict every test example.
//!
//! Predictions are appended to an optional JSONL journal one record at a
//! time. Re-running with the same journal skips the records already there, so
//! a run interrupted by a service failure can resume.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::corpus::{randomize_labels, Label, Pool, TaskSpec};
use crate::embedder::{Embedder, EmbeddingIndex, Polarity};
use crate::error::{Error, Result};
use crate::inference::{candidates_for, perplexity, predict, PredictionRecord, Scorer};
use crate::prompt::{build_prompt, render_example, PromptInstance};
use crate::select::{
    select_diverse, select_random, select_similar, select_uncertain, AcquisitionConfig, Method,
    SelectionResult, TestSelection,
};

/// Service backends for one run.
pub struct Backends<'a> {
    pub scorer: &'a dyn Scorer,
    /// Required by diversity and similarity selection.
    pub embedder: Option<&'a Embedder>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replace demonstration labels with uniformly random ones.
    pub ablate_labels: bool,
    /// Seed for the label ablation.
    pub seed: u64,
    /// Maximum scoring requests in flight.
    pub concurrency: usize,
    pub journal: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub selection: SelectionResult,
    pub prompts: Vec<PromptInstance>,
    pub records: Vec<PredictionRecord>,
}

/// Method name as it appears in records, with a `-least` suffix for the
/// inverted variants.
pub fn method_label(cfg: &AcquisitionConfig) -> String {
    match cfg.polarity {
        Polarity::Most => cfg.method.to_string(),
        Polarity::Least => format!("{}-least", cfg.method),
    }
}

fn render_all(pool: &Pool, task: &TaskSpec) -> Result<Vec<String>> {
    pool.examples()
        .iter()
        .map(|e| render_example(e, task, false))
        .collect()
}

fn need_embedder<'a>(b: &Backends<'a>, method: Method) -> Result<&'a Embedder> {
    b.embedder
        .ok_or_else(|| Error::Config(format!("{method} selection needs an embedding service")))
}

fn thread_pool(concurrency: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Runs the selection stage alone.
pub fn run_selection(
    pool: &Pool,
    test_set: &Pool,
    cfg: &AcquisitionConfig,
    task: &TaskSpec,
    backends: &Backends<'_>,
    concurrency: usize,
) -> Result<SelectionResult> {
    cfg.validate(pool.len())?;
    if cfg.k == 0 {
        return Ok(match cfg.method {
            Method::Similarity => SelectionResult::per_test(
                cfg,
                test_set
                    .ids()
                    .map(|id| TestSelection {
                        test_id: id.to_string(),
                        demos: vec![],
                    })
                    .collect(),
            ),
            _ => SelectionResult::global(cfg, vec![]),
        });
    }
    let workers = thread_pool(concurrency)?;
    match cfg.method {
        Method::Random => select_random(pool, cfg),
        Method::Diversity => {
            let embedder = need_embedder(backends, cfg.method)?;
            let vectors = embedder.embed_batch(&render_all(pool, task)?)?;
            let index = EmbeddingIndex::build(pool, vectors)?;
            select_diverse(pool, &index, cfg)
        }
        Method::Uncertainty => {
            let texts = render_all(pool, task)?;
            let scores: Vec<f64> = workers.install(|| {
                texts
                    .par_iter()
                    .map(|t| perplexity(backends.scorer, t))
                    .collect::<Result<_>>()
            })?;
            let ppl: HashMap<String, f64> = pool.ids().map(str::to_string).zip(scores).collect();
            select_uncertain(pool, &ppl, cfg)
        }
        Method::Similarity => {
            let embedder = need_embedder(backends, cfg.method)?;
            let index =
                EmbeddingIndex::build(pool, embedder.embed_batch(&render_all(pool, task)?)?)?;
            let test_vecs = embedder.embed_batch(&render_all(test_set, task)?)?;
            let tests = workers.install(|| {
                test_set
                    .examples()
                    .par_iter()
                    .zip(test_vecs.par_iter())
                    .map(|(t, v)| {
                        Ok(TestSelection {
                            test_id: t.id.clone(),
                            demos: select_similar(pool, &index, v, cfg)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            Ok(SelectionResult::per_test(cfg, tests))
        }
    }
}

/// Selection, optional label ablation, prompting and prediction for every
/// test example, in test-set order.
pub fn run_experiment(
    pool: &Pool,
    test_set: &Pool,
    cfg: &AcquisitionConfig,
    task: &TaskSpec,
    opts: &RunOptions,
    backends: &Backends<'_>,
) -> Result<ExperimentOutput> {
    let selection = run_selection(pool, test_set, cfg, task, backends, opts.concurrency)?;
    run_predictions(pool, test_set, selection, task, opts, backends.scorer)
}

/// Prompting and prediction for a selection made earlier.
pub fn run_predictions(
    pool: &Pool,
    test_set: &Pool,
    selection: SelectionResult,
    task: &TaskSpec,
    opts: &RunOptions,
    scorer: &dyn Scorer,
) -> Result<ExperimentOutput> {
    selection.validate(pool)?;
    let concurrency = opts.concurrency.max(1);
    let overrides: Option<HashMap<String, Label>> = if opts.ablate_labels {
        let shuffled = randomize_labels(pool, opts.seed)?;
        Some(
            shuffled
                .examples()
                .iter()
                .map(|e| {
                    (
                        e.id.clone(),
                        e.label.clone().expect("randomized labels are set"),
                    )
                })
                .collect(),
        )
    } else {
        None
    };

    let mut prompts = Vec::with_capacity(test_set.len());
    for test in test_set.examples() {
        let chosen = selection
            .demos_for(&test.id)
            .ok_or_else(|| Error::InvalidPool(format!("no selection for test {:?}", test.id)))?;
        let demos: Vec<_> = chosen.iter().map(|s| &pool.examples()[s.index]).collect();
        prompts.push(build_prompt(&demos, test, task, overrides.as_ref())?);
    }

    let mut records = match &opts.journal {
        Some(path) => read_journal_prefix(path, test_set)?,
        None => Vec::new(),
    };
    if !records.is_empty() {
        log::info!("resuming after {} journaled records", records.len());
    }

    let method = method_label(&selection.config());
    let workers = thread_pool(concurrency)?;
    let mut journal = match &opts.journal {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| Error::io(path, e))?,
            )
        }
        None => None,
    };

    let todo: Vec<usize> = (records.len()..test_set.len()).collect();
    for batch in todo.chunks(concurrency) {
        let fresh: Vec<PredictionRecord> = workers.install(|| {
            batch
                .par_iter()
                .map(|&i| {
                    let test = &test_set.examples()[i];
                    let candidates = candidates_for(task, test)?;
                    predict(
                        scorer,
                        &prompts[i],
                        &candidates,
                        test.label.clone(),
                        &method,
                    )
                })
                .collect::<Result<_>>()
        })?;
        for rec in fresh {
            if let (Some(f), Some(path)) = (journal.as_mut(), opts.journal.as_ref()) {
                let mut line = serde_json::to_vec(&rec).expect("record serializes");
                line.push(b'\n');
                f.write_all(&line).map_err(|e| Error::io(path, e))?;
            }
            records.push(rec);
        }
    }

    Ok(ExperimentOutput {
        selection,
        prompts,
        records,
    })
}

/// Reads a prediction journal, strict: any bad line is an error naming it.
pub fn read_journal(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Ingest {
            file: path.display().to_string(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Journaled records that line up with the start of `test_set`.
///
/// A trailing partial line (an interrupted write) is dropped and the file is
/// truncated back to the last complete record; any other mismatch is an
/// error.
fn read_journal_prefix(path: &Path, test_set: &Pool) -> Result<Vec<PredictionRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut good_len = 0usize;
    let mut offset = 0usize;
    for (n, chunk) in bytes.split_inclusive(|b| *b == b'\n').enumerate() {
        offset += chunk.len();
        let complete = chunk.ends_with(b"\n");
        let parsed = serde_json::from_slice::<PredictionRecord>(chunk);
        match parsed {
            Ok(rec) if complete => {
                let expected = test_set.get(records.len()).map(|e| e.id.as_str());
                if expected != Some(rec.test_id.as_str()) {
                    return Err(Error::Ingest {
                        file: path.display().to_string(),
                        line: n + 1,
                        message: format!(
                            "journal record for {:?} does not match test example {:?}",
                            rec.test_id, expected
                        ),
                    });
                }
                records.push(rec);
                good_len = offset;
            }
            _ if offset == bytes.len() && !complete => {
                log::warn!("{}: dropping partial final line", path.display());
            }
            Ok(_) => unreachable!("complete records are handled above"),
            Err(e) => {
                return Err(Error::Ingest {
                    file: path.display().to_string(),
                    line: n + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    if good_len < bytes.len() {
        let f = OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.set_len(good_len as u64).map_err(|e| Error::io(path, e))?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Example, TaskSpec};
    use crate::embedder::EmbeddingCache;
    use crate::mock::{HashingEmbedder, MockMode, MockScorer};
    use crate::select::Selections;
    use std::sync::Arc;

    fn task() -> Arc<TaskSpec> {
        Arc::new(
            TaskSpec::from_toml_str(
                r#"
name = "toy"
kind = "classification"
label_set = ["A", "B"]
label_prefix = " Label:"
[verbalizer]
A = "alpha"
B = "beta"
[[template]]
field = "text"
prefix = "Text: "
"#,
            )
            .unwrap(),
        )
    }

    fn pools() -> (Pool, Pool) {
        let words = [
            "red", "green", "blue", "cyan", "pink", "gold", "grey", "teal",
        ];
        let pool = (0..16)
            .map(|i| {
                Example::new(format!("p{i}"))
                    .with_field(
                        "text",
                        format!("{} thing {}", words[i % 8], "x ".repeat(i % 5)),
                    )
                    .with_label(Label::class(if i % 2 == 0 { "A" } else { "B" }))
            })
            .collect();
        let test = (0..6)
            .map(|i| {
                Example::new(format!("t{i}"))
                    .with_field("text", format!("{} thing", words[i]))
                    .with_label(Label::class(if i % 2 == 0 { "A" } else { "B" }))
            })
            .collect();
        (
            Pool::new(task(), pool).unwrap(),
            Pool::new(task(), test).unwrap(),
        )
    }

    fn copy_last() -> MockScorer {
        MockScorer::new(MockMode::parse("copy-last", "\n\n", " Label:").unwrap())
    }

    #[test]
    fn every_method_runs_and_is_deterministic() {
        let (pool, test) = pools();
        let scorer = copy_last();
        let embedder = Embedder::new(
            Box::new(HashingEmbedder::default()),
            EmbeddingCache::in_memory(),
        );
        let b = Backends {
            scorer: &scorer,
            embedder: Some(&embedder),
        };
        for method in Method::ALL {
            let cfg = AcquisitionConfig::new(method).k(4).seed(2);
            let opts = RunOptions {
                concurrency: 3,
                ..Default::default()
            };
            let a = run_experiment(&pool, &test, &cfg, &task(), &opts, &b).unwrap();
            let again = run_experiment(&pool, &test, &cfg, &task(), &opts, &b).unwrap();
            assert_eq!(a.records, again.records);
            assert_eq!(a.records.len(), test.len());
            a.selection.validate(&pool).unwrap();
            assert_eq!(a.selection.scope(), method.scope());
            for (r, t) in a.records.iter().zip(test.examples()) {
                assert_eq!(r.test_id, t.id);
            }
        }
    }

    #[test]
    fn similarity_selects_per_test() {
        let (pool, test) = pools();
        let scorer = copy_last();
        let embedder = Embedder::new(
            Box::new(HashingEmbedder::default()),
            EmbeddingCache::in_memory(),
        );
        let b = Backends {
            scorer: &scorer,
            embedder: Some(&embedder),
        };
        let cfg = AcquisitionConfig::new(Method::Similarity).k(3);
        let out = run_experiment(&pool, &test, &cfg, &task(), &RunOptions::default(), &b).unwrap();
        match &out.selection.selections {
            Selections::PerTest { tests } => assert_eq!(tests.len(), test.len()),
            _ => panic!("similarity must be per-test"),
        }
    }

    #[test]
    fn zero_shot_prompts_have_no_demos() {
        let (pool, test) = pools();
        let scorer = copy_last();
        let b = Backends {
            scorer: &scorer,
            embedder: None,
        };
        let cfg = AcquisitionConfig::new(Method::Random).k(0);
        let out = run_experiment(&pool, &test, &cfg, &task(), &RunOptions::default(), &b).unwrap();
        assert!(out.prompts.iter().all(|p| p.k() == 0));
        // No demonstration to copy: every candidate ties and the first wins.
        assert!(out.records.iter().all(|r| r.predicted == Label::class("A")));
    }

    #[test]
    fn missing_embedder_is_an_error() {
        let (pool, test) = pools();
        let scorer = copy_last();
        let b = Backends {
            scorer: &scorer,
            embedder: None,
        };
        let cfg = AcquisitionConfig::new(Method::Diversity).k(2);
        assert!(run_experiment(&pool, &test, &cfg, &task(), &RunOptions::default(), &b).is_err());
    }

    #[test]
    fn ablation_changes_demo_labels_only() {
        let (pool, test) = pools();
        let scorer = copy_last();
        let b = Backends {
            scorer: &scorer,
            embedder: None,
        };
        let cfg = AcquisitionConfig::new(Method::Random).k(16).seed(1);
        let plain =
            run_experiment(&pool, &test, &cfg, &task(), &RunOptions::default(), &b).unwrap();
        let opts = RunOptions {
            ablate_labels: true,
            seed: 9,
            ..Default::default()
        };
        let ablated = run_experiment(&pool, &test, &cfg, &task(), &opts, &b).unwrap();
        assert_eq!(plain.selection, ablated.selection);
        let ids = |o: &ExperimentOutput| {
            o.prompts[0]
                .demonstrations
                .iter()
                .map(|d| d.id.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(&plain), ids(&ablated));
        assert_ne!(plain.prompts[0].full_text, ablated.prompts[0].full_text);
    }

    #[test]
    fn journal_resume_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let (pool, test) = pools();
        let scorer = copy_last();
        let b = Backends {
            scorer: &scorer,
            embedder: None,
        };
        let cfg = AcquisitionConfig::new(Method::Random).k(4).seed(5);
        let full_path = dir.path().join("full.jsonl");
        let opts = RunOptions {
            journal: Some(full_path.clone()),
            concurrency: 2,
            ..Default::default()
        };
        let full = run_experiment(&pool, &test, &cfg, &task(), &opts, &b).unwrap();
        let full_bytes = fs::read(&full_path).unwrap();

        // Keep two complete lines and half of the third.
        let cut_path = dir.path().join("cut.jsonl");
        let lines: Vec<&[u8]> = full_bytes.split_inclusive(|b| *b == b'\n').collect();
        let mut partial = [lines[0], lines[1]].concat();
        partial.extend_from_slice(&lines[2][..lines[2].len() / 2]);
        fs::write(&cut_path, &partial).unwrap();
        let opts = RunOptions {
            journal: Some(cut_path.clone()),
            concurrency: 2,
            ..Default::default()
        };
        let resumed = run_experiment(&pool, &test, &cfg, &task(), &opts, &b).unwrap();
        assert_eq!(resumed.records, full.records);
        assert_eq!(fs::read(&cut_path).unwrap(), full_bytes);
        assert_eq!(read_journal(&cut_path).unwrap(), full.records);
    }

    #[test]
    fn corrupt_journal_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j.jsonl");
        fs::write(&p, "not json\n").unwrap();
        let err = read_journal(&p).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
