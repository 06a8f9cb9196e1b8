//! Uniform weight-space averaging: batch and streaming means, within-run
//! checkpoint averages (CA), cross-run accumulative averages and model soups.
//!
//! All sums are carried in f64 and cast to f32 exactly once, on output.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::registry::{tag, Run, RunPool, Split, WeightStore, CA_SENTINEL_INDEX, META_RUN_ID, META_SNAPSHOT_INDEX};
use crate::selection::{build_variant, Variant};
use crate::tensor_store::{compare_signatures, Tensor, TensorMap};

pub const META_COUNT: &str = "averaged_count";
pub const META_CONSTITUENTS: &str = "constituents";

/// Default number of snapshots in a soup.
pub const DEFAULT_SOUP_K: usize = 5;

/// Short identity of a map for provenance metadata.
pub fn model_label(tm: &TensorMap) -> String {
    let meta = tm.meta();
    if let Some(id) = meta.get("id") {
        return id.clone();
    }
    match (meta.get(META_RUN_ID), meta.get(META_SNAPSHOT_INDEX)) {
        (Some(run), Some(idx)) if idx == "0" => format!("{run}/ca"),
        (Some(run), Some(idx)) => format!("{run}/{idx}"),
        (Some(run), None) => run.clone(),
        _ => "?".to_string(),
    }
}

/// Streaming uniform mean. Keeps the same f64 sums as `average_checkpoints`,
/// so both paths give identical bits.
#[derive(Debug, Clone, Default)]
pub struct RunningAverage {
    count: usize,
    template: Vec<(String, Vec<usize>)>,
    acc: Option<Vec<Vec<f64>>>,
    constituents: Vec<String>,
    first_meta: BTreeMap<String, String>,
}

impl RunningAverage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn push(&mut self, m: &TensorMap) -> Result<()> {
        let sig = m.signature();
        match &mut self.acc {
            None => {
                self.acc = Some(
                    m.iter()
                        .map(|(_, t)| t.data().iter().map(|&v| v as f64).collect())
                        .collect(),
                );
                self.template = sig;
                self.first_meta = m.meta().clone();
            }
            Some(acc) => {
                if sig != self.template {
                    return Err(Error::Incompatible(Box::new(compare_signatures(&self.template, &sig))));
                }
                for (sum, (_, t)) in acc.iter_mut().zip(m.iter()) {
                    for (s, &x) in sum.iter_mut().zip(t.data()) {
                        *s += x as f64;
                    }
                }
            }
        }
        self.count += 1;
        self.constituents.push(model_label(m));
        Ok(())
    }

    pub fn finalize(&self) -> Result<TensorMap> {
        let acc = self
            .acc
            .as_ref()
            .ok_or_else(|| Error::Empty("running average has no members".into()))?;
        let mut out = TensorMap::new();
        let n = self.count as f64;
        for ((name, shape), sum) in self.template.iter().zip(acc) {
            let data = sum.iter().map(|&s| (s / n) as f32).collect();
            out.insert(name.clone(), Tensor::new(shape.clone(), data)?)?;
        }
        annotate(&mut out, self.count, &self.constituents, &self.first_meta);
        Ok(out)
    }
}

fn annotate(out: &mut TensorMap, count: usize, constituents: &[String], first_meta: &BTreeMap<String, String>) {
    // The mean of a single map is that map, metadata included.
    if count == 1 {
        *out.meta_mut() = first_meta.clone();
        return;
    }
    out.set_meta(META_COUNT, count.to_string());
    out.set_meta(META_CONSTITUENTS, constituents.join(","));
}

/// Element-wise uniform mean of `ms`: f64 sum divided by the count.
pub fn average_checkpoints(ms: &[TensorMap]) -> Result<TensorMap> {
    let first = ms
        .first()
        .ok_or_else(|| Error::Empty("no checkpoints to average".into()))?;
    let template = first.signature();
    for m in &ms[1..] {
        let sig = m.signature();
        if sig != template {
            return Err(Error::Incompatible(Box::new(compare_signatures(&template, &sig))));
        }
    }
    let n = ms.len() as f64;
    let tensors: Vec<(String, Vec<usize>, Vec<f32>)> = template
        .par_iter()
        .map(|(name, shape)| {
            let mut sum = vec![0.0f64; first.get(name).map_or(0, Tensor::numel)];
            for m in ms {
                let t = m.get(name).expect("signature checked");
                for (s, &x) in sum.iter_mut().zip(t.data()) {
                    *s += x as f64;
                }
            }
            let data = sum.into_iter().map(|s| (s / n) as f32).collect();
            (name.clone(), shape.clone(), data)
        })
        .collect();
    let mut out = TensorMap::new();
    for (name, shape, data) in tensors {
        out.insert(name, Tensor::new(shape, data)?)?;
    }
    let labels: Vec<String> = ms.iter().map(model_label).collect();
    annotate(&mut out, ms.len(), &labels, first.meta());
    Ok(out)
}

/// Uniform mean of all snapshots of one run, tagged with the CA sentinel index.
pub fn ca_of_run(run: &Run, store: &dyn WeightStore) -> Result<TensorMap> {
    if run.snapshots.is_empty() {
        return Err(Error::Empty(format!("run {:?} has no snapshots", run.run_id)));
    }
    let mut avg = RunningAverage::new();
    for index in run.indices() {
        avg.push(&store.load(run, index)?)?;
    }
    let mut out = avg.finalize()?;
    tag(&mut out, &run.run_id, CA_SENTINEL_INDEX);
    Ok(out)
}

/// Mean over the per-run variant models of `runs`.
pub fn accumulative_average(
    pool: &RunPool,
    runs: &[&Run],
    variant: Variant,
    metric: &str,
    store: &dyn WeightStore,
) -> Result<TensorMap> {
    if runs.is_empty() {
        return Err(Error::Empty("no runs to average".into()));
    }
    let mut avg = RunningAverage::new();
    for run in runs {
        let vm = build_variant(pool, run, variant, metric, Some(store))?;
        let weights = vm.weights.ok_or_else(|| {
            Error::MissingWeights(format!(
                "{variant} model of run {:?} has no single weight map",
                run.run_id
            ))
        })?;
        avg.push(&weights)?;
    }
    avg.finalize()
}

/// A snapshot ranked for soup membership.
#[derive(Debug, Clone, PartialEq)]
pub struct SoupCandidate {
    pub run_id: String,
    pub index: u32,
    pub src_dev: f64,
}

/// Every scored snapshot of `runs`, best source-dev score first. Ties go to
/// the lexicographically smaller run_id, then the lower snapshot index.
pub fn soup_candidates(pool: &RunPool, runs: &[&Run], metric: &str) -> Vec<SoupCandidate> {
    let mut out: Vec<SoupCandidate> = runs
        .iter()
        .flat_map(|run| {
            run.indices().filter_map(move |index| {
                pool.score(&run.run_id, index, &Split::SrcDev, metric)
                    .map(|src_dev| SoupCandidate {
                        run_id: run.run_id.clone(),
                        index,
                        src_dev,
                    })
            })
        })
        .collect();
    rank_candidates(&mut out);
    out
}

/// Sort best source-dev score first; ties go to the lexicographically
/// smaller run_id, then the lower snapshot index.
pub fn rank_candidates(cands: &mut [SoupCandidate]) {
    cands.sort_by(|a, b| {
        b.src_dev
            .partial_cmp(&a.src_dev)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.run_id.cmp(&b.run_id))
            .then(a.index.cmp(&b.index))
    });
}

/// Uniform mean of the `k` best source-dev snapshots across `runs`.
pub fn soup(pool: &RunPool, runs: &[&Run], k: usize, metric: &str, store: &dyn WeightStore) -> Result<TensorMap> {
    if k == 0 {
        return Err(Error::Config("soup size must be at least 1".into()));
    }
    let ranked = soup_candidates(pool, runs, metric);
    if ranked.len() < k {
        return Err(Error::MissingScore(format!(
            "soup of {k} needs {k} snapshots with src-dev scores, found {}",
            ranked.len()
        )));
    }
    let mut avg = RunningAverage::new();
    for c in &ranked[..k] {
        let run = pool.require_run(&c.run_id)?;
        avg.push(&store.load(run, c.index)?)?;
    }
    avg.finalize()
}
