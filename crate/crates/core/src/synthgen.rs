//! Synthetic run pools on a quadratic score surface.
//!
//! Snapshot `t` of run `j` is
//! `w*_trg + delta_j + max(0, 1 - decay*t/T) * d_j + b_j + eps_{j,t}` where
//! `delta_j` is shared by all seeds of a config, `d_j` is the initial
//! displacement, `b_j` the run bias and `eps` per-snapshot noise. The
//! source optimum is `w*_trg + delta_src_trg * u` for a fixed unit vector
//! `u`; each target language has its optimum scattered around `w*_trg`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::RunningAverage;
use crate::error::{Error, Result};
use crate::evaluator::SyntheticQuadratic;
use crate::registry::{
    write_scores_csv, HyperParams, Manifest, ManifestRun, ManifestSnapshot, MemoryWeights, Run, RunPool, ScoreRecord,
    Snapshot, Split, CA_SENTINEL_INDEX, META_RUN_ID, META_SNAPSHOT_INDEX,
};
use crate::tensor_store::{save_tensormap, Tensor, TensorMap};

pub const LEARNING_RATES: [f64; 7] = [1e-6, 5e-6, 1e-5, 1.5e-5, 2e-5, 2.5e-5, 3e-5];
pub const BATCH_SIZES: [u32; 3] = [16, 32, 64];
const LANGUAGE_CODES: [&str; 14] = [
    "ar", "bg", "de", "el", "es", "fr", "hi", "ru", "sw", "th", "tr", "ur", "vi", "zh",
];
pub const HEAD_TENSOR: &str = "classifier.weight";
pub const BODY_TENSOR: &str = "encoder.weight";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dim: usize,
    pub n_configs: usize,
    pub seeds_per_config: usize,
    pub snapshots_per_run: u32,
    pub sigma_noise: f64,
    pub sigma_bias: f64,
    /// Offset shared by all seeds of one (lr, batch size) config.
    pub sigma_config: f64,
    /// Scale of the initial displacement that decays over training.
    pub sigma_init: f64,
    pub decay: f64,
    pub delta_src_trg: f64,
    /// Spread of per-language optima around the common target optimum.
    pub sigma_lang: f64,
    pub languages: usize,
    pub rng_seed: u64,
    pub s0: f64,
    /// Defaults to `1/dim`, so scores drop by the mean squared coordinate error.
    pub curvature: Option<f64>,
    pub metric: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 256,
            n_configs: 21,
            seeds_per_config: 3,
            snapshots_per_run: 10,
            sigma_noise: 2.0,
            sigma_bias: 3.0,
            sigma_config: 3.0,
            sigma_init: 3.0,
            decay: 1.0,
            delta_src_trg: 6.0,
            sigma_lang: 4.0,
            languages: 4,
            rng_seed: 42,
            s0: 100.0,
            curvature: None,
            metric: "accuracy".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let scales = [
            ("sigma_noise", self.sigma_noise),
            ("sigma_bias", self.sigma_bias),
            ("sigma_config", self.sigma_config),
            ("sigma_init", self.sigma_init),
            ("decay", self.decay),
            ("delta_src_trg", self.delta_src_trg),
            ("sigma_lang", self.sigma_lang),
        ];
        for (name, v) in scales {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if self.n_configs == 0 || self.seeds_per_config == 0 || self.snapshots_per_run == 0 {
            return Err(Error::Config("configs, seeds and snapshots must be at least 1".into()));
        }
        if self.languages == 0 {
            return Err(Error::Config("at least one target language is required".into()));
        }
        if let Some(c) = self.curvature {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("curvature must be positive, got {c}")));
            }
        }
        if !self.s0.is_finite() {
            return Err(Error::Config("s0 must be finite".into()));
        }
        Ok(())
    }

    pub fn curvature(&self) -> f64 {
        self.curvature.unwrap_or(1.0 / self.dim as f64)
    }

    pub fn language_names(&self) -> Vec<String> {
        (0..self.languages)
            .map(|i| match LANGUAGE_CODES.get(i) {
                Some(c) if self.languages <= LANGUAGE_CODES.len() => c.to_string(),
                _ => format!("l{i:02}"),
            })
            .collect()
    }

    /// Tensor layout: a head of `dim/8` values and the remaining body.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let head = self.dim / 8;
        let mut out = Vec::new();
        if head > 0 {
            out.push((HEAD_TENSOR.to_string(), vec![head]));
        }
        out.push((BODY_TENSOR.to_string(), vec![self.dim - head]));
        out
    }

    /// `(lr, batch size)` of config `i`; the learning-rate grid extends in
    /// steps of 5e-6 past the listed values.
    pub fn hparams(i: usize) -> (f64, u32) {
        let li = i / BATCH_SIZES.len();
        let lr = LEARNING_RATES
            .get(li)
            .copied()
            .unwrap_or_else(|| LEARNING_RATES[6] + 5e-6 * (li - 6) as f64);
        (lr, BATCH_SIZES[i % BATCH_SIZES.len()])
    }
}

pub fn run_id_for(lr: f64, batch_size: u32, seed: i64) -> String {
    format!("lr{lr:e}_bs{batch_size}_s{seed}")
}

/// Ground truth of a generated pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    pub evaluator: SyntheticQuadratic,
    /// `w*_trg + delta_j + b_j` per run: where the run's snapshots converge.
    #[serde(skip)]
    pub centers: BTreeMap<String, Vec<f64>>,
}

impl SynthTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub struct SynthPool {
    pub pool: RunPool,
    pub weights: MemoryWeights,
    pub truth: SynthTruth,
}

fn normal_vec(rng: &mut ChaCha20Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Round to the nearest f32 so optima are exactly representable in weights.
fn f32_exact(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

fn to_map(flat: &[f64], layout: &[(String, Vec<usize>)]) -> TensorMap {
    let mut tm = TensorMap::new();
    let mut off = 0;
    for (name, shape) in layout {
        let n: usize = shape.iter().product();
        let data = flat[off..off + n].iter().map(|&x| x as f32).collect();
        tm.insert(name.clone(), Tensor::new(shape.clone(), data).expect("layout shape"))
            .expect("layout name");
        off += n;
    }
    tm
}

struct GeneratedRun {
    run: Run,
    snapshots: Vec<TensorMap>,
    center: Vec<f64>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthPool> {
    cfg.validate()?;
    let dim = cfg.dim;
    let layout = cfg.layout();
    let langs = cfg.language_names();

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(0);
    let w_trg = f32_exact(normal_vec(&mut rng, dim, 1.0));
    let mut u = normal_vec(&mut rng, dim, 1.0);
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    u.iter_mut().for_each(|x| *x /= norm);
    let mut optima = BTreeMap::new();
    optima.insert(
        Split::SrcDev,
        f32_exact(w_trg.iter().zip(&u).map(|(w, u)| w + cfg.delta_src_trg * u).collect()),
    );
    for lang in &langs {
        let z = normal_vec(&mut rng, dim, cfg.sigma_lang);
        let opt = f32_exact(w_trg.iter().zip(&z).map(|(w, z)| w + z).collect());
        optima.insert(Split::TrgDev(lang.clone()), opt.clone());
        optima.insert(Split::Test(lang.clone()), opt);
    }
    let config_offsets: Vec<Vec<f64>> = (0..cfg.n_configs)
        .map(|_| normal_vec(&mut rng, dim, cfg.sigma_config))
        .collect();

    let quad = SyntheticQuadratic {
        s0: cfg.s0,
        curvature: cfg.curvature(),
        layout: layout.clone(),
        optima,
    };

    let specs: Vec<(usize, i64)> = (0..cfg.n_configs)
        .flat_map(|c| (1..=cfg.seeds_per_config as i64).map(move |s| (c, s)))
        .collect();
    let t_max = cfg.snapshots_per_run as f64;
    let generated: Vec<GeneratedRun> = specs
        .par_iter()
        .enumerate()
        .map(|(j, &(c, seed))| {
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(j as u64 + 1);
            let (lr, bs) = SynthConfig::hparams(c);
            let run_id = run_id_for(lr, bs, seed);
            let d = normal_vec(&mut rng, dim, cfg.sigma_init);
            let b = normal_vec(&mut rng, dim, cfg.sigma_bias);
            let center: Vec<f64> = (0..dim).map(|i| w_trg[i] + config_offsets[c][i] + b[i]).collect();
            let snapshots = (1..=cfg.snapshots_per_run)
                .map(|t| {
                    let k = (1.0 - cfg.decay * t as f64 / t_max).max(0.0);
                    let eps = normal_vec(&mut rng, dim, cfg.sigma_noise);
                    let w: Vec<f64> = (0..dim).map(|i| center[i] + k * d[i] + eps[i]).collect();
                    let mut tm = to_map(&w, &layout);
                    tm.set_meta(META_RUN_ID, run_id.clone());
                    tm.set_meta(META_SNAPSHOT_INDEX, t.to_string());
                    tm
                })
                .collect();
            let run = Run {
                run_id: run_id.clone(),
                hparams: HyperParams {
                    learning_rate: lr,
                    batch_size: bs,
                    seed,
                },
                snapshots: (1..=cfg.snapshots_per_run)
                    .map(|index| Snapshot {
                        run_id: run_id.clone(),
                        index,
                        weights_path: None,
                    })
                    .collect(),
            };
            GeneratedRun { run, snapshots, center }
        })
        .collect();

    let records: Vec<Vec<ScoreRecord>> = generated
        .par_iter()
        .map(|g| score_run(&quad, g, &cfg.metric))
        .collect::<Result<_>>()?;

    let mut weights = MemoryWeights::new();
    let mut centers = BTreeMap::new();
    let mut runs = Vec::with_capacity(generated.len());
    for g in generated {
        for (i, tm) in g.snapshots.into_iter().enumerate() {
            weights.insert(&g.run.run_id, i as u32 + 1, tm);
        }
        centers.insert(g.run.run_id.clone(), g.center);
        runs.push(g.run);
    }
    let mut pool = RunPool::new(cfg.snapshots_per_run, runs)?;
    for rec in records.into_iter().flatten() {
        pool.add_score(rec)?;
    }
    Ok(SynthPool {
        pool,
        weights,
        truth: SynthTruth {
            config: cfg.clone(),
            evaluator: quad,
            centers,
        },
    })
}

/// Scores on every split for each snapshot plus the CA sentinel row.
fn score_run(quad: &SyntheticQuadratic, g: &GeneratedRun, metric: &str) -> Result<Vec<ScoreRecord>> {
    let mut avg = RunningAverage::new();
    for tm in &g.snapshots {
        avg.push(tm)?;
    }
    let ca = avg.finalize()?;
    let models = std::iter::once((CA_SENTINEL_INDEX, &ca))
        .chain(g.snapshots.iter().enumerate().map(|(i, tm)| (i as u32 + 1, tm)));
    let mut out = Vec::new();
    for (index, tm) in models {
        for split in quad.optima.keys() {
            out.push(ScoreRecord {
                run_id: g.run.run_id.clone(),
                snapshot_index: index,
                split: split.clone(),
                metric: metric.to_string(),
                value: quad.score(tm, split)?,
            });
        }
    }
    Ok(out)
}

pub fn snapshot_file_name(run_id: &str, index: u32) -> String {
    format!("{run_id}_{index:02}.tpak")
}

impl SynthPool {
    /// Write `manifest.json`, `snapshots/*.tpak`, `scores.csv` and `truth.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let snap_dir = dir.join("snapshots");
        fs::create_dir_all(&snap_dir).map_err(|e| Error::io(&snap_dir, e))?;
        let mut manifest = Manifest {
            snapshots_per_run: self.pool.snapshots_per_run(),
            runs: Vec::new(),
        };
        for run in self.pool.runs() {
            let mut snaps = Vec::new();
            for index in run.indices() {
                let name = snapshot_file_name(&run.run_id, index);
                let tm = self
                    .weights
                    .get(&run.run_id, index)
                    .ok_or_else(|| Error::MissingWeights(format!("{}/{index} has no weights", run.run_id)))?;
                save_tensormap(tm, &snap_dir.join(&name))?;
                snaps.push(ManifestSnapshot {
                    index,
                    path: Some(format!("snapshots/{name}")),
                });
            }
            manifest.runs.push(ManifestRun {
                run_id: run.run_id.clone(),
                lr: run.hparams.learning_rate,
                batch_size: run.hparams.batch_size,
                seed: run.hparams.seed,
                snapshots: Some(snaps),
            });
        }
        write_json(&dir.join("manifest.json"), &manifest)?;
        write_scores_csv(&self.pool.records(), &dir.join("scores.csv"))?;
        write_json(&dir.join("truth.json"), &self.truth)?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
