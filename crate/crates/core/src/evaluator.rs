//! Scoring backends: score-table lookup, an external command, and a
//! synthetic quadratic surface.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::averaging::ca_of_run;
use crate::error::{Error, Result};
use crate::registry::{Run, RunPool, Split, SplitFamily, WeightStore, META_RUN_ID, META_SNAPSHOT_INDEX};
use crate::tensor_store::{save_tensormap, TensorMap};

pub const TIMEOUT_ENV: &str = "SNAPSOUP_EVAL_TIMEOUT_SECS";
pub const DEFAULT_TIMEOUT_SECS: u64 = 3600;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SplitSpec {
    pub split: Split,
    pub metric: String,
}

impl SplitSpec {
    pub fn new(split: Split, metric: impl Into<String>) -> Self {
        SplitSpec {
            split,
            metric: metric.into(),
        }
    }
}

/// A model to score: a pool snapshot, a run's checkpoint average, or any
/// other weight map.
#[derive(Debug, Clone, Copy)]
pub enum ModelRef<'a> {
    Snapshot {
        run: &'a Run,
        index: u32,
    },
    Ca {
        run: &'a Run,
        weights: Option<&'a TensorMap>,
    },
    Composite(&'a TensorMap),
}

/// What a backend may consult while scoring.
#[derive(Clone, Copy)]
pub struct ScoringContext<'a> {
    pub pool: &'a RunPool,
    pub weights: Option<&'a dyn WeightStore>,
}

impl<'a> ScoringContext<'a> {
    pub fn new(pool: &'a RunPool, weights: Option<&'a dyn WeightStore>) -> Self {
        ScoringContext { pool, weights }
    }

    fn store(&self) -> Result<&'a dyn WeightStore> {
        self.weights
            .ok_or_else(|| Error::MissingWeights("this evaluator needs snapshot weights".into()))
    }
}

#[derive(Debug, Clone)]
pub enum Evaluator {
    ScoreTable,
    External(ExternalCommand),
    SyntheticQuadratic(SyntheticQuadratic),
}

impl Evaluator {
    pub fn name(&self) -> &'static str {
        match self {
            Evaluator::ScoreTable => "table",
            Evaluator::External(_) => "external",
            Evaluator::SyntheticQuadratic(_) => "synthetic",
        }
    }

    /// Whether scoring a snapshot requires its weights.
    pub fn needs_weights(&self) -> bool {
        !matches!(self, Evaluator::ScoreTable)
    }

    pub fn score(&self, ctx: &ScoringContext<'_>, model: ModelRef<'_>, split: &SplitSpec) -> Result<f64> {
        let value = match self {
            Evaluator::ScoreTable => score_table(ctx.pool, model, split)?,
            Evaluator::SyntheticQuadratic(q) => match model {
                ModelRef::Composite(tm) | ModelRef::Ca { weights: Some(tm), .. } => q.score(tm, &split.split)?,
                ModelRef::Ca { run, weights: None } => q.score(&ca_of_run(run, ctx.store()?)?, &split.split)?,
                ModelRef::Snapshot { run, index } => q.score(&ctx.store()?.load(run, index)?, &split.split)?,
            },
            Evaluator::External(cmd) => match model {
                ModelRef::Snapshot { run, index } => {
                    match run.snapshot(index).and_then(|s| s.weights_path.as_deref()) {
                        Some(path) => cmd.score_path(path, split)?,
                        None => cmd.score_map(&ctx.store()?.load(run, index)?, split)?,
                    }
                }
                ModelRef::Ca { weights: Some(tm), .. } | ModelRef::Composite(tm) => cmd.score_map(tm, split)?,
                ModelRef::Ca { run, weights: None } => cmd.score_map(&ca_of_run(run, ctx.store()?)?, split)?,
            },
        };
        if !value.is_finite() {
            return Err(Error::InvalidScore(format!("non-finite score on {}", split.split)));
        }
        Ok(value)
    }

    /// Unweighted mean over `languages` of the `family` splits.
    pub fn score_mean(
        &self,
        ctx: &ScoringContext<'_>,
        model: ModelRef<'_>,
        family: SplitFamily,
        languages: &[String],
        metric: &str,
    ) -> Result<f64> {
        if languages.is_empty() {
            return Err(Error::Config(format!("no {family} languages to evaluate on")));
        }
        let mut sum = 0.0;
        for lang in languages {
            sum += self.score(ctx, model, &SplitSpec::new(family.split(lang), metric))?;
        }
        Ok(sum / languages.len() as f64)
    }
}

fn score_table(pool: &RunPool, model: ModelRef<'_>, split: &SplitSpec) -> Result<f64> {
    let (run_id, index) = match model {
        ModelRef::Snapshot { run, index } => (run.run_id.as_str(), index),
        ModelRef::Ca { run, .. } => (run.run_id.as_str(), crate::registry::CA_SENTINEL_INDEX),
        ModelRef::Composite(tm) => {
            let run = tm.meta().get(META_RUN_ID);
            let idx = tm.meta().get(META_SNAPSHOT_INDEX).and_then(|s| s.parse::<u32>().ok());
            match (run, idx) {
                (Some(run), Some(idx)) => (run.as_str(), idx),
                _ => {
                    return Err(Error::UnscorableComposite(format!(
                        "score table has no record for an averaged model ({})",
                        crate::averaging::model_label(tm)
                    )))
                }
            }
        }
    };
    pool.require_score(run_id, index, &split.split, &split.metric)
}

/// `s0 - c * ||w - w*_split||^2` with one optimum per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuadratic {
    pub s0: f64,
    pub curvature: f64,
    /// Name/shape layout the optima are flattened against.
    pub layout: Vec<(String, Vec<usize>)>,
    pub optima: BTreeMap<Split, Vec<f64>>,
}

impl SyntheticQuadratic {
    pub fn optimum(&self, split: &Split) -> Result<&[f64]> {
        self.optima
            .get(split)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("synthetic evaluator has no optimum for {split}")))
    }

    pub fn score(&self, tm: &TensorMap, split: &Split) -> Result<f64> {
        let opt = self.optimum(split)?;
        if tm.signature() != self.layout {
            return Err(Error::Incompatible(Box::new(crate::tensor_store::compare_signatures(
                &self.layout,
                &tm.signature(),
            ))));
        }
        let mut d2 = 0.0f64;
        let mut i = 0;
        for (_, t) in tm.iter() {
            for &x in t.data() {
                let d = x as f64 - opt[i];
                d2 += d * d;
                i += 1;
            }
        }
        Ok(self.s0 - self.curvature * d2)
    }
}

/// Runs a user-supplied command per (model, split) and reads `{"score": x}`
/// from the last non-empty line of its stdout.
#[derive(Debug, Clone)]
pub struct ExternalCommand {
    pub template: String,
    pub timeout: Duration,
}

impl ExternalCommand {
    /// Timeout comes from `SNAPSOUP_EVAL_TIMEOUT_SECS` when set.
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if !template.contains("{model}") || !template.contains("{split}") {
            return Err(Error::Config(
                "external command template needs {model} and {split} placeholders".into(),
            ));
        }
        let secs = match std::env::var(TIMEOUT_ENV) {
            Ok(v) => v
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{TIMEOUT_ENV} must be an integer, got {v:?}")))?,
            Err(_) => DEFAULT_TIMEOUT_SECS,
        };
        Ok(ExternalCommand {
            template,
            timeout: Duration::from_secs(secs),
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn score_path(&self, model_path: &Path, split: &SplitSpec) -> Result<f64> {
        score_external(model_path, split, &self.template, self.timeout)
    }

    pub fn score_map(&self, tm: &TensorMap, split: &SplitSpec) -> Result<f64> {
        let file = tempfile::Builder::new()
            .prefix("snapsoup-")
            .suffix(".tpak")
            .tempfile()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        save_tensormap(tm, file.path())?;
        self.score_path(file.path(), split)
    }
}

fn argv_for(template: &str, model_path: &Path, split: &SplitSpec) -> Result<Vec<String>> {
    let words = shlex::split(template)
        .filter(|w| !w.is_empty())
        .ok_or_else(|| Error::Config(format!("cannot parse command template {template:?}")))?;
    let model = model_path.to_string_lossy();
    let split_id = split.split.to_string();
    Ok(words
        .into_iter()
        .map(|w| {
            w.replace("{model}", &model)
                .replace("{split}", &split_id)
                .replace("{metric}", &split.metric)
        })
        .collect())
}

fn parse_score_output(stdout: &str) -> Result<f64> {
    let line = stdout
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::External("evaluator printed nothing".into()))?;
    let v: serde_json::Value = serde_json::from_str(line.trim())
        .map_err(|e| Error::External(format!("unparsable evaluator output {line:?}: {e}")))?;
    let score = match v.get("score") {
        Some(serde_json::Value::Number(n)) => n.as_f64(),
        Some(serde_json::Value::String(s)) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .ok_or_else(|| Error::External(format!("evaluator output has no numeric \"score\": {line:?}")))?;
    if !score.is_finite() {
        return Err(Error::External(format!("non-finite score {score}")));
    }
    Ok(score)
}

/// Spawn the evaluation command for one model file and split.
pub fn score_external(model_path: &Path, split: &SplitSpec, template: &str, timeout: Duration) -> Result<f64> {
    let argv = argv_for(template, model_path, split)?;
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| Error::External(format!("cannot spawn {:?}: {e}", argv[0])))?;

    let mut out_pipe = child.stdout.take().expect("piped stdout");
    let mut err_pipe = child.stderr.take().expect("piped stderr");
    let out_reader = std::thread::spawn(move || {
        let mut s = String::new();
        out_pipe.read_to_string(&mut s).map(|_| s)
    });
    let err_reader = std::thread::spawn(move || {
        let mut s = String::new();
        err_pipe.read_to_string(&mut s).map(|_| s)
    });

    let status = match child
        .wait_timeout(timeout)
        .map_err(|e| Error::External(format!("waiting on evaluator: {e}")))?
    {
        Some(status) => status,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(Error::External(format!(
                "evaluator timed out after {} s",
                timeout.as_secs_f64()
            )));
        }
    };
    let stdout = out_reader.join().ok().and_then(|r| r.ok()).unwrap_or_default();
    let stderr = err_reader.join().ok().and_then(|r| r.ok()).unwrap_or_default();
    if !status.success() {
        return Err(Error::External(format!(
            "evaluator exited with {}: {}",
            status
                .code()
                .map_or_else(|| "a signal".to_string(), |c| format!("status {c}")),
            stderr.trim()
        )));
    }
    parse_score_output(&stdout)
}

/// Where to write a temporary model file for an external evaluator, if needed.
pub fn model_path_hint(run: &Run, index: u32) -> Option<PathBuf> {
    run.snapshot(index).and_then(|s| s.weights_path.clone())
}
