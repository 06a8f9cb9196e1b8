//! Experiment pool: runs, their hyperparameters, snapshots and score records.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor_store::{load_tensormap_with, CodecOptions, TensorMap};

pub const DEFAULT_SNAPSHOTS_PER_RUN: u32 = 10;

/// Snapshot index used in score files for the within-run checkpoint average.
pub const CA_SENTINEL_INDEX: u32 = 0;

/// Metadata keys identifying which pool entity a tensor map came from.
pub const META_RUN_ID: &str = "run_id";
pub const META_SNAPSHOT_INDEX: &str = "snapshot_index";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub batch_size: u32,
    pub seed: i64,
}

/// (learning rate, batch size) identity of a hyperparameter configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConfigKey {
    lr_bits: u64,
    pub batch_size: u32,
}

impl ConfigKey {
    pub fn learning_rate(&self) -> f64 {
        f64::from_bits(self.lr_bits)
    }
}

impl Ord for ConfigKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.learning_rate()
            .total_cmp(&other.learning_rate())
            .then(self.batch_size.cmp(&other.batch_size))
    }
}

impl PartialOrd for ConfigKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl HyperParams {
    pub fn config_key(&self) -> ConfigKey {
        ConfigKey {
            lr_bits: self.learning_rate.to_bits(),
            batch_size: self.batch_size,
        }
    }

    fn validate(&self, run_id: &str) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Manifest(format!(
                "run {run_id:?}: learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Manifest(format!("run {run_id:?}: batch size must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub run_id: String,
    pub index: u32,
    pub weights_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub run_id: String,
    pub hparams: HyperParams,
    /// Ordered by index, exactly 1..=S.
    pub snapshots: Vec<Snapshot>,
}

impl Run {
    /// Index of the final snapshot.
    pub fn last_index(&self) -> u32 {
        self.snapshots.len() as u32
    }

    pub fn snapshot(&self, index: u32) -> Option<&Snapshot> {
        index.checked_sub(1).and_then(|i| self.snapshots.get(i as usize))
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.snapshots.iter().map(|s| s.index)
    }
}

/// Evaluation split: source-language dev, or a per-language target dev/test set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    SrcDev,
    TrgDev(String),
    Test(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitFamily {
    TrgDev,
    Test,
}

impl Split {
    pub fn family(&self) -> Option<SplitFamily> {
        match self {
            Split::SrcDev => None,
            Split::TrgDev(_) => Some(SplitFamily::TrgDev),
            Split::Test(_) => Some(SplitFamily::Test),
        }
    }

    pub fn language(&self) -> Option<&str> {
        match self {
            Split::SrcDev => None,
            Split::TrgDev(l) | Split::Test(l) => Some(l),
        }
    }
}

impl SplitFamily {
    pub fn split(self, lang: &str) -> Split {
        match self {
            SplitFamily::TrgDev => Split::TrgDev(lang.to_string()),
            SplitFamily::Test => Split::Test(lang.to_string()),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::SrcDev => write!(f, "src-dev"),
            Split::TrgDev(l) => write!(f, "trg-dev:{l}"),
            Split::Test(l) => write!(f, "test:{l}"),
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "src-dev" {
            return Ok(Split::SrcDev);
        }
        let lang_of = |rest: &str| {
            if rest.is_empty() || rest.contains(char::is_whitespace) {
                Err(Error::InvalidSplit(s.to_string()))
            } else {
                Ok(rest.to_string())
            }
        };
        if let Some(rest) = s.strip_prefix("trg-dev:") {
            return Ok(Split::TrgDev(lang_of(rest)?));
        }
        if let Some(rest) = s.strip_prefix("test:") {
            return Ok(Split::Test(lang_of(rest)?));
        }
        Err(Error::InvalidSplit(s.to_string()))
    }
}

impl Serialize for Split {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Split {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for SplitFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitFamily::TrgDev => "trg-dev",
            SplitFamily::Test => "test",
        })
    }
}

impl FromStr for SplitFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trg-dev" => Ok(SplitFamily::TrgDev),
            "test" => Ok(SplitFamily::Test),
            other => Err(Error::InvalidSplit(other.to_string())),
        }
    }
}

/// One score row. Values are in percentage points (e.g. `77.3`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub run_id: String,
    pub snapshot_index: u32,
    pub split: Split,
    pub metric: String,
    pub value: f64,
}

// split -> metric -> value, for one snapshot (or the CA sentinel).
type SnapshotScores = BTreeMap<Split, BTreeMap<String, f64>>;

#[derive(Debug, Clone)]
pub struct RunPool {
    snapshots_per_run: u32,
    runs: Vec<Run>,
    by_id: HashMap<String, usize>,
    // Per run, indexed by snapshot index; slot 0 holds CA sentinel rows.
    scores: Vec<Vec<SnapshotScores>>,
    splits: BTreeSet<Split>,
    metrics: BTreeSet<String>,
    n_records: usize,
    warnings: Vec<String>,
}

impl RunPool {
    pub fn new(snapshots_per_run: u32, runs: Vec<Run>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(runs.len());
        for (i, run) in runs.iter().enumerate() {
            if run.run_id.is_empty() {
                return Err(Error::Manifest("empty run_id".into()));
            }
            if by_id.insert(run.run_id.clone(), i).is_some() {
                return Err(Error::DuplicateRun(run.run_id.clone()));
            }
            run.hparams.validate(&run.run_id)?;
            let found: Vec<u32> = run.indices().collect();
            if !found.iter().copied().eq(1..=snapshots_per_run) {
                return Err(Error::SnapshotGap {
                    run_id: run.run_id.clone(),
                    expected: snapshots_per_run,
                    found,
                });
            }
            if let Some(s) = run.snapshots.iter().find(|s| s.run_id != run.run_id) {
                return Err(Error::Manifest(format!(
                    "snapshot {} claims run {:?} but is listed under {:?}",
                    s.index, s.run_id, run.run_id
                )));
            }
        }

        let mut warnings = Vec::new();
        let mut seeds: BTreeMap<ConfigKey, usize> = BTreeMap::new();
        for run in &runs {
            *seeds.entry(run.hparams.config_key()).or_default() += 1;
        }
        let distinct: BTreeSet<usize> = seeds.values().copied().collect();
        if distinct.len() > 1 {
            let msg = format!(
                "unequal number of seeds per hyperparameter configuration: {}",
                seeds
                    .iter()
                    .map(|(k, n)| format!("lr={} bs={}: {n}", k.learning_rate(), k.batch_size))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }

        let scores = runs
            .iter()
            .map(|_| vec![SnapshotScores::new(); snapshots_per_run as usize + 1])
            .collect();
        Ok(RunPool {
            snapshots_per_run,
            runs,
            by_id,
            scores,
            splits: BTreeSet::new(),
            metrics: BTreeSet::new(),
            n_records: 0,
            warnings,
        })
    }

    pub fn snapshots_per_run(&self) -> u32 {
        self.snapshots_per_run
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn run(&self, run_id: &str) -> Option<&Run> {
        self.by_id.get(run_id).map(|&i| &self.runs[i])
    }

    pub fn require_run(&self, run_id: &str) -> Result<&Run> {
        self.run(run_id).ok_or_else(|| Error::UnknownRun(run_id.to_string()))
    }

    pub fn total_snapshots(&self) -> usize {
        self.runs.iter().map(|r| r.snapshots.len()).sum()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn splits(&self) -> &BTreeSet<Split> {
        &self.splits
    }

    pub fn metrics(&self) -> &BTreeSet<String> {
        &self.metrics
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    /// Runs grouped by (lr, batch size), in ascending config order.
    pub fn configs(&self) -> BTreeMap<ConfigKey, Vec<&Run>> {
        let mut out: BTreeMap<ConfigKey, Vec<&Run>> = BTreeMap::new();
        for run in &self.runs {
            out.entry(run.hparams.config_key()).or_default().push(run);
        }
        out
    }

    /// Languages with at least one record in `family`.
    pub fn languages(&self, family: SplitFamily) -> Vec<String> {
        self.splits
            .iter()
            .filter(|s| s.family() == Some(family))
            .filter_map(|s| s.language().map(str::to_string))
            .collect()
    }

    pub fn add_score(&mut self, rec: ScoreRecord) -> Result<()> {
        let &ri = self
            .by_id
            .get(&rec.run_id)
            .ok_or_else(|| Error::UnknownRun(rec.run_id.clone()))?;
        if rec.snapshot_index > self.snapshots_per_run {
            return Err(Error::UnknownSnapshot {
                run_id: rec.run_id,
                index: rec.snapshot_index,
            });
        }
        if !rec.value.is_finite() {
            return Err(Error::InvalidScore(format!(
                "non-finite value for {}/{} {} {}",
                rec.run_id, rec.snapshot_index, rec.split, rec.metric
            )));
        }
        if rec.metric.is_empty() {
            return Err(Error::InvalidScore("empty metric name".into()));
        }
        let slot = self.scores[ri][rec.snapshot_index as usize]
            .entry(rec.split.clone())
            .or_default();
        if slot.contains_key(&rec.metric) {
            return Err(Error::DuplicateScore(format!(
                "{}, {}, {}, {}",
                rec.run_id, rec.snapshot_index, rec.split, rec.metric
            )));
        }
        slot.insert(rec.metric.clone(), rec.value);
        self.metrics.insert(rec.metric);
        self.splits.insert(rec.split);
        self.n_records += 1;
        Ok(())
    }

    pub fn score(&self, run_id: &str, index: u32, split: &Split, metric: &str) -> Option<f64> {
        let &ri = self.by_id.get(run_id)?;
        self.scores[ri].get(index as usize)?.get(split)?.get(metric).copied()
    }

    pub fn require_score(&self, run_id: &str, index: u32, split: &Split, metric: &str) -> Result<f64> {
        self.score(run_id, index, split, metric)
            .ok_or_else(|| Error::MissingScore(format!("{run_id}/{index} {split} {metric}")))
    }

    /// Per-language scores of one snapshot within a split family.
    pub fn family_scores(&self, run_id: &str, index: u32, family: SplitFamily, metric: &str) -> BTreeMap<String, f64> {
        let Some(&ri) = self.by_id.get(run_id) else {
            return BTreeMap::new();
        };
        let Some(slot) = self.scores[ri].get(index as usize) else {
            return BTreeMap::new();
        };
        slot.iter()
            .filter(|(split, _)| split.family() == Some(family))
            .filter_map(|(split, m)| Some((split.language()?.to_string(), *m.get(metric)?)))
            .collect()
    }

    /// Unweighted mean over all target languages with a record for this snapshot.
    pub fn mean_over_languages(&self, run_id: &str, index: u32, family: SplitFamily, metric: &str) -> Result<f64> {
        self.require_run(run_id)?;
        let scores = self.family_scores(run_id, index, family, metric);
        if scores.is_empty() {
            return Err(Error::MissingScore(format!(
                "no {family} records for {run_id}/{index} ({metric})"
            )));
        }
        Ok(scores.values().sum::<f64>() / scores.len() as f64)
    }

    /// All records in canonical (run, snapshot, split, metric) order.
    pub fn records(&self) -> Vec<ScoreRecord> {
        let mut out = Vec::with_capacity(self.n_records);
        for (run, per_run) in self.runs.iter().zip(&self.scores) {
            for (index, slot) in per_run.iter().enumerate() {
                for (split, metrics) in slot {
                    for (metric, &value) in metrics {
                        out.push(ScoreRecord {
                            run_id: run.run_id.clone(),
                            snapshot_index: index as u32,
                            split: split.clone(),
                            metric: metric.clone(),
                            value,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn ingest_scores(&mut self, path: &Path) -> Result<usize> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = parse_scores(&text)?;
        let n = records.len();
        for rec in records {
            self.add_score(rec)?;
        }
        Ok(n)
    }
}

/// Parse a scores file: JSONL when the first non-blank character is `{`, CSV otherwise.
pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>> {
    if text.trim_start().starts_with('{') {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::InvalidScore(format!("line {}: {e}", i + 1))))
            .collect()
    } else {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        let expected = ["run_id", "snapshot_index", "split", "metric", "value"];
        if !headers.iter().eq(expected.iter().copied()) {
            return Err(Error::InvalidScore(format!(
                "expected CSV header {}, found {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        rdr.deserialize()
            .map(|r| r.map_err(|e| Error::InvalidScore(e.to_string())))
            .collect()
    }
}

pub fn write_scores_csv(records: &[ScoreRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in records {
        w.serialize(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Consuming form of [`RunPool::ingest_scores`].
pub fn ingest_scores(mut pool: RunPool, path: &Path) -> Result<RunPool> {
    pool.ingest_scores(path)?;
    Ok(pool)
}

fn default_snapshots_per_run() -> u32 {
    DEFAULT_SNAPSHOTS_PER_RUN
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default = "default_snapshots_per_run")]
    pub snapshots_per_run: u32,
    #[serde(default)]
    pub runs: Vec<ManifestRun>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRun {
    pub run_id: String,
    pub lr: f64,
    pub batch_size: u32,
    pub seed: i64,
    /// Omitted in score-only manifests; snapshots 1..=S are then implied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshots: Option<Vec<ManifestSnapshot>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSnapshot {
    pub index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl Manifest {
    /// Build a pool, resolving relative weight paths against `base_dir` and
    /// checking that referenced weight files exist.
    pub fn into_pool(self, base_dir: &Path) -> Result<RunPool> {
        let s = self.snapshots_per_run;
        if s == 0 {
            return Err(Error::Manifest("snapshots_per_run must be at least 1".into()));
        }
        let mut runs = Vec::with_capacity(self.runs.len());
        for mr in self.runs {
            let snapshots = match mr.snapshots {
                None => (1..=s)
                    .map(|index| Snapshot {
                        run_id: mr.run_id.clone(),
                        index,
                        weights_path: None,
                    })
                    .collect(),
                Some(mut listed) => {
                    listed.sort_by_key(|m| m.index);
                    let mut out = Vec::with_capacity(listed.len());
                    for ms in listed {
                        let weights_path = ms.path.map(|p| base_dir.join(p));
                        if let Some(p) = &weights_path {
                            fs::metadata(p).map_err(|e| Error::io(p, e))?;
                        }
                        out.push(Snapshot {
                            run_id: mr.run_id.clone(),
                            index: ms.index,
                            weights_path,
                        });
                    }
                    out
                }
            };
            runs.push(Run {
                run_id: mr.run_id,
                hparams: HyperParams {
                    learning_rate: mr.lr,
                    batch_size: mr.batch_size,
                    seed: mr.seed,
                },
                snapshots,
            });
        }
        RunPool::new(s, runs)
    }
}

pub fn load_manifest(path: &Path) -> Result<RunPool> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    manifest.into_pool(base)
}

/// Access to snapshot weights. Implementations tag the returned map's
/// metadata with [`META_RUN_ID`] and [`META_SNAPSHOT_INDEX`].
pub trait WeightStore: Sync {
    fn load(&self, run: &Run, index: u32) -> Result<TensorMap>;
}

/// Reads TPAK files referenced by the manifest.
#[derive(Debug, Clone, Copy, Default)]
pub struct FileWeights {
    pub opts: CodecOptions,
}

impl WeightStore for FileWeights {
    fn load(&self, run: &Run, index: u32) -> Result<TensorMap> {
        let snap = run.snapshot(index).ok_or_else(|| Error::UnknownSnapshot {
            run_id: run.run_id.clone(),
            index,
        })?;
        let path = snap
            .weights_path
            .as_ref()
            .ok_or_else(|| Error::MissingWeights(format!("{}/{index} has no weight file", run.run_id)))?;
        let mut tm = load_tensormap_with(path, self.opts)?;
        tag(&mut tm, &run.run_id, index);
        Ok(tm)
    }
}

/// In-memory weights keyed by (run_id, snapshot index).
#[derive(Debug, Clone, Default)]
pub struct MemoryWeights {
    maps: HashMap<(String, u32), TensorMap>,
}

impl MemoryWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, run_id: &str, index: u32, tm: TensorMap) {
        self.maps.insert((run_id.to_string(), index), tm);
    }

    pub fn get(&self, run_id: &str, index: u32) -> Option<&TensorMap> {
        self.maps.get(&(run_id.to_string(), index))
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

impl WeightStore for MemoryWeights {
    fn load(&self, run: &Run, index: u32) -> Result<TensorMap> {
        let mut tm = self
            .maps
            .get(&(run.run_id.clone(), index))
            .cloned()
            .ok_or_else(|| Error::MissingWeights(format!("{}/{index} has no weights", run.run_id)))?;
        tag(&mut tm, &run.run_id, index);
        Ok(tm)
    }
}

pub(crate) fn tag(tm: &mut TensorMap, run_id: &str, index: u32) {
    tm.set_meta(META_RUN_ID, run_id);
    tm.set_meta(META_SNAPSHOT_INDEX, index.to_string());
}
