//! Per-run model variants and cross-run selection strategies.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::averaging::ca_of_run;
use crate::error::{Error, Result};
use crate::registry::{Run, RunPool, Split, SplitFamily, WeightStore, CA_SENTINEL_INDEX};
use crate::tensor_store::TensorMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Final snapshot of the run.
    Last,
    /// Snapshot with the best source-language dev score.
    SrcDev,
    /// Uniform average of all snapshots of the run.
    Ca,
    /// Per-language best target-dev snapshot. Uses target-language labels,
    /// so it is an oracle and not a zero-shot result.
    TrgDev,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Last, Variant::SrcDev, Variant::Ca, Variant::TrgDev];

    pub fn is_oracle(self) -> bool {
        self == Variant::TrgDev
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Last => "last",
            Variant::SrcDev => "src-dev",
            Variant::Ca => "ca",
            Variant::TrgDev => "trg-dev",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Which weights a variant model stands for.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Choice {
    Snapshot { index: u32 },
    PerLanguage { indices: BTreeMap<String, u32> },
    Average,
}

/// Scores attached to a variant model: source dev plus per-language target
/// dev and test.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VariantScores {
    pub src_dev: Option<f64>,
    pub trg_dev: BTreeMap<String, f64>,
    pub test: BTreeMap<String, f64>,
}

impl VariantScores {
    pub fn family(&self, family: SplitFamily) -> &BTreeMap<String, f64> {
        match family {
            SplitFamily::TrgDev => &self.trg_dev,
            SplitFamily::Test => &self.test,
        }
    }

    /// Unweighted mean over languages.
    pub fn mean(&self, family: SplitFamily) -> Option<f64> {
        let m = self.family(family);
        (!m.is_empty()).then(|| m.values().sum::<f64>() / m.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantModel {
    pub run_id: String,
    pub variant: Variant,
    pub oracle: bool,
    pub choice: Choice,
    #[serde(skip)]
    pub weights: Option<TensorMap>,
    pub scores: VariantScores,
}

/// Index with the highest score; ties resolve to the later snapshot.
pub(crate) fn argmax_latest(scored: impl IntoIterator<Item = (u32, f64)>) -> Option<(u32, f64)> {
    scored.into_iter().fold(None, |best, (idx, v)| match best {
        Some((_, bv)) if v < bv => best,
        _ => Some((idx, v)),
    })
}

fn snapshot_scores(pool: &RunPool, run_id: &str, index: u32, metric: &str) -> VariantScores {
    VariantScores {
        src_dev: pool.score(run_id, index, &Split::SrcDev, metric),
        trg_dev: pool.family_scores(run_id, index, SplitFamily::TrgDev, metric),
        test: pool.family_scores(run_id, index, SplitFamily::Test, metric),
    }
}

/// Snapshot of `run` with the best source-dev score (later snapshot on ties).
pub fn best_src_dev_snapshot(pool: &RunPool, run: &Run, metric: &str) -> Result<(u32, f64)> {
    let mut scored = Vec::with_capacity(run.snapshots.len());
    for index in run.indices() {
        scored.push((index, pool.require_score(&run.run_id, index, &Split::SrcDev, metric)?));
    }
    argmax_latest(scored).ok_or_else(|| Error::MissingScore(format!("run {:?} has no snapshots", run.run_id)))
}

/// Per-language best target-dev snapshot of `run` over the pool's target languages.
pub fn best_trg_dev_snapshots(pool: &RunPool, run: &Run, metric: &str) -> Result<BTreeMap<String, (u32, f64)>> {
    let langs = pool.languages(SplitFamily::TrgDev);
    if langs.is_empty() {
        return Err(Error::MissingScore("no trg-dev records in pool".into()));
    }
    let mut out = BTreeMap::new();
    for lang in langs {
        let split = Split::TrgDev(lang.clone());
        let mut scored = Vec::with_capacity(run.snapshots.len());
        for index in run.indices() {
            scored.push((index, pool.require_score(&run.run_id, index, &split, metric)?));
        }
        if let Some(best) = argmax_latest(scored) {
            out.insert(lang, best);
        }
    }
    Ok(out)
}

/// Build the `variant` model of `run`. Scores come from the pool's score
/// table; weights are loaded when a store is given (never for TRG-DEV, which
/// has no single weight map).
pub fn build_variant(
    pool: &RunPool,
    run: &Run,
    variant: Variant,
    metric: &str,
    store: Option<&dyn WeightStore>,
) -> Result<VariantModel> {
    let (choice, scores, weights) = match variant {
        Variant::Last | Variant::SrcDev => {
            let index = if variant == Variant::Last {
                run.last_index()
            } else {
                best_src_dev_snapshot(pool, run, metric)?.0
            };
            let weights = store.map(|s| s.load(run, index)).transpose()?;
            (
                Choice::Snapshot { index },
                snapshot_scores(pool, &run.run_id, index, metric),
                weights,
            )
        }
        Variant::Ca => {
            let weights = store.map(|s| ca_of_run(run, s)).transpose()?;
            (
                Choice::Average,
                snapshot_scores(pool, &run.run_id, CA_SENTINEL_INDEX, metric),
                weights,
            )
        }
        Variant::TrgDev => {
            let best = best_trg_dev_snapshots(pool, run, metric)?;
            let mut scores = VariantScores::default();
            let mut indices = BTreeMap::new();
            for (lang, (index, value)) in best {
                scores.trg_dev.insert(lang.clone(), value);
                if let Some(t) = pool.score(&run.run_id, index, &Split::Test(lang.clone()), metric) {
                    scores.test.insert(lang.clone(), t);
                }
                indices.insert(lang, index);
            }
            (Choice::PerLanguage { indices }, scores, None)
        }
    };
    Ok(VariantModel {
        run_id: run.run_id.clone(),
        variant,
        oracle: variant.is_oracle(),
        choice,
        weights,
        scores,
    })
}

/// Outcome of a cross-run selection.
#[derive(Debug, Clone, Copy)]
pub struct Selected<'a> {
    pub model: &'a VariantModel,
    /// The validation score the selection maximized.
    pub score: f64,
    /// Set when the selection looked at target-language data.
    pub oracle: bool,
}

/// Item with the highest score; ties go to the lexicographically smallest key.
pub fn argmax_by_key<'a, T>(items: impl IntoIterator<Item = (&'a str, f64, T)>) -> Option<(f64, T)> {
    let mut best: Option<(&str, f64, T)> = None;
    for (key, score, item) in items {
        let better = match &best {
            None => true,
            Some((bk, bs, _)) => score > *bs || (score == *bs && key < *bk),
        };
        if better {
            best = Some((key, score, item));
        }
    }
    best.map(|(_, s, t)| (s, t))
}

/// The run whose variant model has the best source-dev score.
pub fn max_src_dev<'a>(models: impl IntoIterator<Item = &'a VariantModel>) -> Result<Selected<'a>> {
    let mut items = Vec::new();
    for m in models {
        let s = m.scores.src_dev.ok_or_else(|| {
            Error::MissingScore(format!("{} model of {:?} has no src-dev score", m.variant, m.run_id))
        })?;
        items.push((m.run_id.as_str(), s, m));
    }
    let (score, model) = argmax_by_key(items).ok_or_else(|| Error::Empty("no models to select from".into()))?;
    Ok(Selected {
        model,
        score,
        oracle: model.oracle,
    })
}

/// The run whose variant model has the best mean target-dev score. Always an oracle.
pub fn max_trg_dev<'a>(models: impl IntoIterator<Item = &'a VariantModel>) -> Result<Selected<'a>> {
    let mut items = Vec::new();
    for m in models {
        let s = m.scores.mean(SplitFamily::TrgDev).ok_or_else(|| {
            Error::MissingScore(format!("{} model of {:?} has no trg-dev scores", m.variant, m.run_id))
        })?;
        items.push((m.run_id.as_str(), s, m));
    }
    let (score, model) = argmax_by_key(items).ok_or_else(|| Error::Empty("no models to select from".into()))?;
    Ok(Selected {
        model,
        score,
        oracle: true,
    })
}
