//! Run-by-run experiment: sample r runs, apply each strategy, repeat, and
//! aggregate to mean and std per cell.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{rank_candidates, RunningAverage, SoupCandidate, DEFAULT_SOUP_K};
use crate::error::{Error, Result};
use crate::evaluator::{Evaluator, ModelRef, ScoringContext, SplitSpec};
use crate::registry::{Run, RunPool, Split, SplitFamily, WeightStore};
use crate::report::{compute_highlights, Highlight, HighlightRule};
use crate::selection::{argmax_by_key, argmax_latest, Variant};
use crate::tensor_store::TensorMap;

pub const RNG_ALGORITHM: &str = "chacha20/rand_chacha-0.9/seed_from_u64+stream=repetition";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    MaxSrcDev,
    MaxTrgDev,
    AccumulativeAvg,
    Soup,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::MaxSrcDev,
        Strategy::MaxTrgDev,
        Strategy::AccumulativeAvg,
        Strategy::Soup,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::MaxSrcDev => "max-src-dev",
            Strategy::MaxTrgDev => "max-trg-dev",
            Strategy::AccumulativeAvg => "accumulative-avg",
            Strategy::Soup => "soup",
        }
    }

    /// Strategies that produce one cell per variant. Soup ignores variants.
    pub fn per_variant(self) -> bool {
        self != Strategy::Soup
    }

    /// Whether the strategy averages weights.
    pub fn averages(self) -> bool {
        matches!(self, Strategy::AccumulativeAvg | Strategy::Soup)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Pairwise-distinct (lr, batch size) configs, one seed per config.
    DistinctConfigs,
    /// Uniform over all runs.
    AllRuns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub r_max: usize,
    pub repetitions: usize,
    pub variants: Vec<Variant>,
    pub strategies: Vec<Strategy>,
    pub rng_seed: u64,
    pub metric: String,
    /// Split family the cells report.
    pub eval_family: SplitFamily,
    /// Target languages; empty means every language the pool or evaluator knows.
    pub languages: Vec<String>,
    pub sampling: Sampling,
    /// Grow one sample per repetition instead of drawing afresh for every r.
    pub nested: bool,
    pub soup_k: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            r_max: 10,
            repetitions: 10,
            variants: vec![Variant::Last, Variant::SrcDev, Variant::Ca],
            strategies: vec![Strategy::MaxSrcDev, Strategy::AccumulativeAvg],
            rng_seed: 42,
            metric: "accuracy".into(),
            eval_family: SplitFamily::Test,
            languages: Vec::new(),
            sampling: Sampling::DistinctConfigs,
            nested: true,
            soup_k: DEFAULT_SOUP_K,
        }
    }
}

impl ProtocolConfig {
    /// Check the config against a pool.
    pub fn validate(&self, pool: &RunPool) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if self.r_max == 0 {
            return Err(Error::Config("r_max must be at least 1".into()));
        }
        let available = match self.sampling {
            Sampling::DistinctConfigs => pool.configs().len(),
            Sampling::AllRuns => pool.runs().len(),
        };
        if self.r_max > available {
            return Err(Error::Config(format!(
                "r_max {} exceeds the {available} {} available",
                self.r_max,
                match self.sampling {
                    Sampling::DistinctConfigs => "distinct configs",
                    Sampling::AllRuns => "runs",
                }
            )));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies requested".into()));
        }
        if self.strategies.iter().any(|s| s.per_variant()) && self.variants.is_empty() {
            return Err(Error::Config("no variants requested".into()));
        }
        if self.variants.contains(&Variant::TrgDev) {
            for s in [Strategy::MaxSrcDev, Strategy::AccumulativeAvg] {
                if self.strategies.contains(&s) {
                    return Err(Error::Config(format!("variant trg-dev cannot be combined with {s}")));
                }
            }
        }
        if self.strategies.contains(&Strategy::Soup) {
            if self.soup_k == 0 {
                return Err(Error::Config("soup size must be at least 1".into()));
            }
            if (pool.snapshots_per_run() as usize) < self.soup_k {
                return Err(Error::Config(format!(
                    "soup of {} needs more snapshots than one run has at r=1",
                    self.soup_k
                )));
            }
        }
        let mut seen = BTreeSet::new();
        if !self.variants.iter().all(|v| seen.insert(*v)) {
            return Err(Error::Config("duplicate variant".into()));
        }
        let mut seen = BTreeSet::new();
        if !self.strategies.iter().all(|s| seen.insert(*s)) {
            return Err(Error::Config("duplicate strategy".into()));
        }
        Ok(())
    }

    /// Cell keys in table order: r, then strategy, then variant.
    pub fn cell_keys(&self) -> Vec<(usize, Option<Variant>, Strategy)> {
        let mut out = Vec::new();
        for r in 1..=self.r_max {
            for &s in &self.strategies {
                if s.per_variant() {
                    out.extend(self.variants.iter().map(|&v| (r, Some(v), s)));
                } else {
                    out.push((r, None, s));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub r: usize,
    pub variant: Option<Variant>,
    pub strategy: Strategy,
    pub mean: f64,
    pub std: f64,
    pub n_reps: usize,
    /// Per-repetition values, in repetition order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTable {
    pub rng: String,
    pub evaluator: String,
    pub config: ProtocolConfig,
    pub cells: Vec<CellResult>,
    #[serde(default)]
    pub highlights: Vec<Highlight>,
}

impl ProtocolTable {
    pub fn cell(&self, r: usize, variant: Option<Variant>, strategy: Strategy) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.r == r && c.variant == variant && c.strategy == strategy)
    }
}

/// Generator for one repetition: the protocol seed, on its own stream.
pub fn repetition_rng(seed: u64, repetition: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(repetition as u64);
    rng
}

/// Draw `r` runs. Under distinct-config sampling the configs are drawn
/// without replacement first, then one seed per chosen config.
pub fn sample_runs<'p, R: Rng + ?Sized>(
    pool: &'p RunPool,
    r: usize,
    sampling: Sampling,
    rng: &mut R,
) -> Result<Vec<&'p Run>> {
    match sampling {
        Sampling::DistinctConfigs => {
            let mut configs: Vec<Vec<&Run>> = pool.configs().into_values().collect();
            if r > configs.len() {
                return Err(Error::Config(format!(
                    "cannot sample {r} runs from {} distinct configs",
                    configs.len()
                )));
            }
            partial_shuffle(&mut configs, r, rng);
            Ok(configs[..r]
                .iter_mut()
                .map(|runs| {
                    runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
                    runs[rng.random_range(0..runs.len())]
                })
                .collect())
        }
        Sampling::AllRuns => {
            let mut runs: Vec<&Run> = pool.runs().iter().collect();
            if r > runs.len() {
                return Err(Error::Config(format!("cannot sample {r} runs from {}", runs.len())));
            }
            partial_shuffle(&mut runs, r, rng);
            runs.truncate(r);
            Ok(runs)
        }
    }
}

/// Fisher-Yates over the first `k` positions.
fn partial_shuffle<T, R: Rng + ?Sized>(items: &mut [T], k: usize, rng: &mut R) {
    let n = items.len();
    for i in 0..k.min(n) {
        let j = rng.random_range(i..n);
        items.swap(i, j);
    }
}

/// Run sets for r = 1..=r_max of one repetition.
pub fn repetition_samples<'p>(pool: &'p RunPool, cfg: &ProtocolConfig, repetition: usize) -> Result<Vec<Vec<&'p Run>>> {
    let mut rng = repetition_rng(cfg.rng_seed, repetition);
    if cfg.nested {
        let seq = sample_runs(pool, cfg.r_max, cfg.sampling, &mut rng)?;
        Ok((1..=cfg.r_max).map(|r| seq[..r].to_vec()).collect())
    } else {
        (1..=cfg.r_max)
            .map(|r| sample_runs(pool, r, cfg.sampling, &mut rng))
            .collect()
    }
}

/// Arithmetic mean and population std (Welford).
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("no values to aggregate".into()));
    }
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &x) in values.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::InvalidScore(format!("non-finite value {x} in aggregate")));
        }
        let d = x - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (x - mean);
    }
    Ok((mean, (m2 / values.len() as f64).max(0.0).sqrt()))
}

/// One run's variant model, scored through the evaluator.
#[derive(Debug, Clone)]
struct Resolved {
    src_dev: Option<f64>,
    trg_dev: Option<f64>,
    eval: f64,
    weights: Option<TensorMap>,
}

struct Needs {
    src_dev: bool,
    trg_dev: bool,
    weights: bool,
}

struct Env<'a> {
    ctx: ScoringContext<'a>,
    ev: &'a Evaluator,
    cfg: &'a ProtocolConfig,
    langs: Vec<String>,
    needs: Needs,
}

impl Env<'_> {
    fn spec(&self, split: Split) -> SplitSpec {
        SplitSpec::new(split, self.cfg.metric.clone())
    }

    fn eval_mean(&self, model: ModelRef<'_>) -> Result<f64> {
        self.ev
            .score_mean(&self.ctx, model, self.cfg.eval_family, &self.langs, &self.cfg.metric)
    }

    fn trg_mean(&self, model: ModelRef<'_>) -> Result<f64> {
        self.ev
            .score_mean(&self.ctx, model, SplitFamily::TrgDev, &self.langs, &self.cfg.metric)
    }

    fn store(&self) -> Result<&dyn WeightStore> {
        self.ctx
            .weights
            .ok_or_else(|| Error::MissingWeights("averaging strategies need snapshot weights".into()))
    }

    fn snapshot_src_dev(&self, run: &Run) -> Result<Vec<(u32, f64)>> {
        let spec = self.spec(Split::SrcDev);
        run.indices()
            .map(|index| {
                Ok((
                    index,
                    self.ev.score(&self.ctx, ModelRef::Snapshot { run, index }, &spec)?,
                ))
            })
            .collect()
    }

    fn resolve(&self, run: &Run, variant: Variant, src: Option<&[(u32, f64)]>) -> Result<Resolved> {
        match variant {
            Variant::Last | Variant::SrcDev => {
                let (index, src_known) = if variant == Variant::Last {
                    (run.last_index(), None)
                } else {
                    let scored = src.ok_or_else(|| Error::MissingScore("src-dev scores not computed".into()))?;
                    let (i, v) = argmax_latest(scored.iter().copied())
                        .ok_or_else(|| Error::Empty(format!("run {:?} has no snapshots", run.run_id)))?;
                    (i, Some(v))
                };
                let weights = if self.needs.weights || self.ev.needs_weights() {
                    Some(self.store()?.load(run, index)?)
                } else {
                    None
                };
                // In-process evaluators score the loaded map directly.
                let model = match (&weights, self.ev) {
                    (Some(w), Evaluator::SyntheticQuadratic(_)) => ModelRef::Composite(w),
                    _ => ModelRef::Snapshot { run, index },
                };
                let src_dev = match (self.needs.src_dev, src_known) {
                    (false, _) => None,
                    (true, Some(v)) => Some(v),
                    (true, None) => Some(self.ev.score(&self.ctx, model, &self.spec(Split::SrcDev))?),
                };
                Ok(Resolved {
                    src_dev,
                    trg_dev: self.needs.trg_dev.then(|| self.trg_mean(model)).transpose()?,
                    eval: self.eval_mean(model)?,
                    weights: weights.filter(|_| self.needs.weights),
                })
            }
            Variant::Ca => {
                let weights = if self.needs.weights || self.ev.needs_weights() {
                    Some(crate::averaging::ca_of_run(run, self.store()?)?)
                } else {
                    None
                };
                let model = ModelRef::Ca {
                    run,
                    weights: weights.as_ref(),
                };
                Ok(Resolved {
                    src_dev: self
                        .needs
                        .src_dev
                        .then(|| self.ev.score(&self.ctx, model, &self.spec(Split::SrcDev)))
                        .transpose()?,
                    trg_dev: self.needs.trg_dev.then(|| self.trg_mean(model)).transpose()?,
                    eval: self.eval_mean(model)?,
                    weights: weights.filter(|_| self.needs.weights),
                })
            }
            Variant::TrgDev => {
                let mut trg_sum = 0.0;
                let mut eval_sum = 0.0;
                for lang in &self.langs {
                    let spec = self.spec(Split::TrgDev(lang.clone()));
                    let scored = run
                        .indices()
                        .map(|index| {
                            Ok((
                                index,
                                self.ev.score(&self.ctx, ModelRef::Snapshot { run, index }, &spec)?,
                            ))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let (index, v) = argmax_latest(scored)
                        .ok_or_else(|| Error::Empty(format!("run {:?} has no snapshots", run.run_id)))?;
                    trg_sum += v;
                    eval_sum += self.ev.score(
                        &self.ctx,
                        ModelRef::Snapshot { run, index },
                        &self.spec(self.cfg.eval_family.split(lang)),
                    )?;
                }
                let n = self.langs.len() as f64;
                Ok(Resolved {
                    src_dev: None,
                    trg_dev: Some(trg_sum / n),
                    eval: eval_sum / n,
                    weights: None,
                })
            }
        }
    }
}

fn resolve_languages(pool: &RunPool, ev: &Evaluator, cfg: &ProtocolConfig) -> Result<Vec<String>> {
    if !cfg.languages.is_empty() {
        return Ok(cfg.languages.clone());
    }
    let mut langs = pool.languages(cfg.eval_family);
    if langs.is_empty() {
        if let Evaluator::SyntheticQuadratic(q) = ev {
            langs = q
                .optima
                .keys()
                .filter(|s| s.family() == Some(cfg.eval_family))
                .filter_map(|s| s.language().map(str::to_string))
                .collect();
        }
    }
    if langs.is_empty() {
        return Err(Error::Config(format!("no {} languages known", cfg.eval_family)));
    }
    Ok(langs)
}

type Key = (String, Variant);

/// Run the full protocol. Every repetition uses one sample for all cells.
pub fn run_protocol(
    pool: &RunPool,
    ev: &Evaluator,
    store: Option<&dyn WeightStore>,
    cfg: &ProtocolConfig,
) -> Result<ProtocolTable> {
    cfg.validate(pool)?;
    let needs = Needs {
        src_dev: cfg.strategies.contains(&Strategy::MaxSrcDev),
        trg_dev: cfg.strategies.contains(&Strategy::MaxTrgDev),
        weights: cfg.strategies.contains(&Strategy::AccumulativeAvg),
    };
    if cfg.strategies.iter().any(|s| s.averages()) && store.is_none() {
        return Err(Error::MissingWeights(
            "accumulative averaging and soups need snapshot weights".into(),
        ));
    }
    let env = Env {
        ctx: ScoringContext::new(pool, store),
        ev,
        cfg,
        langs: resolve_languages(pool, ev, cfg)?,
        needs,
    };

    let samples: Vec<Vec<Vec<&Run>>> = (0..cfg.repetitions)
        .map(|rep| repetition_samples(pool, cfg, rep))
        .collect::<Result<_>>()?;
    let mut used: BTreeMap<&str, &Run> = BTreeMap::new();
    for rep in &samples {
        for runs in rep {
            for run in runs {
                used.insert(run.run_id.as_str(), run);
            }
        }
    }
    let used: Vec<&Run> = used.into_values().collect();

    let want_src = cfg.variants.contains(&Variant::SrcDev) || cfg.strategies.contains(&Strategy::Soup);
    let src_scores: HashMap<&str, Vec<(u32, f64)>> = if want_src {
        used.par_iter()
            .map(|run| Ok((run.run_id.as_str(), env.snapshot_src_dev(run)?)))
            .collect::<Result<_>>()?
    } else {
        HashMap::new()
    };

    let per_variant = cfg.strategies.iter().any(|s| s.per_variant());
    let jobs: Vec<(&Run, Variant)> = if per_variant {
        used.iter()
            .flat_map(|run| cfg.variants.iter().map(move |&v| (*run, v)))
            .collect()
    } else {
        Vec::new()
    };
    let resolved: HashMap<Key, Resolved> = jobs
        .par_iter()
        .map(|&(run, v)| {
            let src = src_scores.get(run.run_id.as_str()).map(Vec::as_slice);
            Ok(((run.run_id.clone(), v), env.resolve(run, v, src)?))
        })
        .collect::<Result<_>>()?;

    let per_rep: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|rep| run_repetition(&env, rep, &resolved, &src_scores))
        .collect::<Result<_>>()?;

    let keys = cfg.cell_keys();
    let mut cells = Vec::with_capacity(keys.len());
    for (i, (r, variant, strategy)) in keys.into_iter().enumerate() {
        let values: Vec<f64> = per_rep.iter().map(|v| v[i]).collect();
        let (mean, std) = aggregate(&values)?;
        cells.push(CellResult {
            r,
            variant,
            strategy,
            mean,
            std,
            n_reps: values.len(),
            values,
        });
    }
    let highlights = compute_highlights(&cells, &HighlightRule::default());
    Ok(ProtocolTable {
        rng: RNG_ALGORITHM.into(),
        evaluator: ev.name().into(),
        config: cfg.clone(),
        cells,
        highlights,
    })
}

/// Values of every cell for one repetition, in `cell_keys` order.
fn run_repetition(
    env: &Env<'_>,
    samples: &[Vec<&Run>],
    resolved: &HashMap<Key, Resolved>,
    src_scores: &HashMap<&str, Vec<(u32, f64)>>,
) -> Result<Vec<f64>> {
    let cfg = env.cfg;
    let get = |run: &Run, v: Variant| -> &Resolved { &resolved[&(run.run_id.clone(), v)] };
    // Running averages per variant, with the runs already folded in.
    let mut running: BTreeMap<Variant, (RunningAverage, Vec<&str>)> = BTreeMap::new();
    let mut out = Vec::new();

    for (r_idx, runs) in samples.iter().enumerate() {
        debug_assert_eq!(runs.len(), r_idx + 1);
        for &strategy in &cfg.strategies {
            match strategy {
                Strategy::MaxSrcDev | Strategy::MaxTrgDev => {
                    for &v in &cfg.variants {
                        let items = runs.iter().map(|run| {
                            let res = get(run, v);
                            let key = if strategy == Strategy::MaxSrcDev {
                                res.src_dev
                            } else {
                                res.trg_dev
                            };
                            (run.run_id.as_str(), key.expect("selection score resolved"), res.eval)
                        });
                        let (_, eval) = argmax_by_key(items).expect("r >= 1");
                        out.push(eval);
                    }
                }
                Strategy::AccumulativeAvg => {
                    for &v in &cfg.variants {
                        let (avg, folded) = running.entry(v).or_insert_with(|| (RunningAverage::new(), Vec::new()));
                        let is_prefix =
                            folded.len() <= runs.len() && folded.iter().zip(runs.iter()).all(|(a, b)| *a == b.run_id);
                        if !is_prefix {
                            *avg = RunningAverage::new();
                            folded.clear();
                        }
                        for run in &runs[folded.len()..] {
                            let w = get(run, v).weights.as_ref().ok_or_else(|| {
                                Error::MissingWeights(format!("{v} model of run {:?} has no weights", run.run_id))
                            })?;
                            avg.push(w)?;
                            folded.push(run.run_id.as_str());
                        }
                        let tm = avg.finalize()?;
                        out.push(env.eval_mean(ModelRef::Composite(&tm))?);
                    }
                }
                Strategy::Soup => {
                    let mut cands: Vec<SoupCandidate> = runs
                        .iter()
                        .flat_map(|run| {
                            src_scores[run.run_id.as_str()]
                                .iter()
                                .map(|&(index, src_dev)| SoupCandidate {
                                    run_id: run.run_id.clone(),
                                    index,
                                    src_dev,
                                })
                        })
                        .collect();
                    rank_candidates(&mut cands);
                    let store = env.store()?;
                    let mut avg = RunningAverage::new();
                    for c in cands.iter().take(cfg.soup_k) {
                        let run = runs.iter().find(|r| r.run_id == c.run_id).expect("candidate run");
                        avg.push(&store.load(run, c.index)?)?;
                    }
                    let tm = avg.finalize()?;
                    out.push(env.eval_mean(ModelRef::Composite(&tm))?);
                }
            }
        }
    }
    Ok(out)
}
