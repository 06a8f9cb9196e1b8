//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use snapsoup::averaging::{average_checkpoints, RunningAverage};
use snapsoup::evaluator::{Evaluator, SyntheticQuadratic};
use snapsoup::protocol::{run_protocol, ProtocolConfig, ProtocolTable, Strategy};
use snapsoup::registry::{HyperParams, Run, RunPool, ScoreRecord, Snapshot, Split};
use snapsoup::report::{
    compute_highlights, grid_summary, render, render_grid, Format, GridTable, HighlightLevel, HighlightRule,
};
use snapsoup::selection::{build_variant, max_src_dev, max_trg_dev, Choice, Variant};
use snapsoup::synthgen::{generate, SynthConfig};
use snapsoup::tensor_store::{decode, encode, CodecOptions, Tensor, TensorMap};

// Averaging algebra.
const ALGEBRA_CASES: usize = 1000;
const ALGEBRA_MAX_ELEMENTS: usize = 100_000;
const ALGEBRA_MAX_MODELS: usize = 8;
const ALGEBRA_REL_TOL: f64 = 1e-6;
const ALGEBRA_BUDGET: Duration = Duration::from_secs(30);

// TPAK round trip.
const TPAK_CASES: usize = 500;
const TPAK_BUDGET: Duration = Duration::from_secs(10);

// Selection oracle.
const SELECTION_TRIALS: usize = 1000;
const SELECTION_MAX_RUNS: usize = 63;
const SELECTION_SNAPSHOTS: u32 = 10;
const SELECTION_MAX_LANGUAGES: usize = 12; // 1 + 2 * 12 = 25 splits <= 26
const SELECTION_BUDGET: Duration = Duration::from_secs(30);

// Jensen.
const JENSEN_TRIALS: usize = 10_000;
const JENSEN_SLACK: f64 = 1e-9;
const JENSEN_BUDGET: Duration = Duration::from_secs(30);

// r = 1 equality.
const R1_POOLS: u64 = 4;
const R1_BUDGET: Duration = Duration::from_secs(60);

// Qualitative reproduction on synthetic pools.
const QUAL_DIM: usize = 256;
const QUAL_CONFIGS: usize = 21;
const QUAL_SEEDS: usize = 3;
const QUAL_SEED: u64 = 42;
const QUAL_FIRST_R_ABOVE: usize = 3;
const QUAL_NOISE_SIGMAS: f64 = 2.0;
const QUAL_POOLS: u64 = 100;
const QUAL_DISAGREEMENT_MIN: f64 = 0.5;
const QUAL_BUDGET: Duration = Duration::from_secs(300);

// Golden report fixture.
const GOLDEN_DISPLAY: &str = "48.4_{0.5}";
const GOLDEN_DIFF: f64 = 4.0;
const GOLDEN_TOL: f64 = 1e-9;

// Grid fixture.
const GRID_DELTA: f64 = 5.2;
const GRID_DELTA_DISPLAY: &str = "5.2";
const GRID_TOL: f64 = 1e-9;

const DETERMINISM_BUDGET: Duration = Duration::from_secs(120);
const FIXTURE_BUDGET: Duration = Duration::from_secs(5);

const RESULTS_NER: &str = include_str!("fixtures/results_ner.json");
const GRID_NER: &str = include_str!("fixtures/grid_ner.json");

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn max_abs_diff(a: &TensorMap, b: &TensorMap) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| (p as f64 - q as f64).abs())
        })
        .fold(0.0, f64::max)
}

fn max_abs(ms: &[TensorMap]) -> f64 {
    ms.iter()
        .flat_map(|m| m.flatten())
        .map(|x| (x as f64).abs())
        .fold(0.0, f64::max)
}

fn random_layout(r: &mut ChaCha20Rng) -> Vec<(String, Vec<usize>)> {
    let n_tensors = r.random_range(1..=3);
    let exp: f64 = r.random_range(0.0..=(ALGEBRA_MAX_ELEMENTS as f64).log10());
    let total = (10f64.powf(exp) as usize).clamp(n_tensors, ALGEBRA_MAX_ELEMENTS);
    let mut left = total;
    (0..n_tensors)
        .map(|i| {
            let n = if i + 1 == n_tensors {
                left
            } else {
                let n = r.random_range(1..=left - (n_tensors - i - 1));
                left -= n;
                n
            };
            let shape = if n % 4 == 0 && n >= 8 { vec![4, n / 4] } else { vec![n] };
            (format!("layer{i}.weight"), shape)
        })
        .collect()
}

fn random_map(r: &mut ChaCha20Rng, layout: &[(String, Vec<usize>)], scale: f64) -> TensorMap {
    let mut tm = TensorMap::new();
    for (name, shape) in layout {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| (scale * r.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        tm.insert(name.clone(), Tensor::new(shape.clone(), data).unwrap())
            .unwrap();
    }
    tm
}

fn stream(ms: &[TensorMap]) -> TensorMap {
    let mut avg = RunningAverage::new();
    for m in ms {
        avg.push(m).unwrap();
    }
    avg.finalize().unwrap()
}

/// f64 mean by brute force over flattened models.
fn oracle_mean(ms: &[TensorMap]) -> Vec<f32> {
    let flat: Vec<Vec<f32>> = ms.iter().map(|m| m.flatten()).collect();
    (0..flat[0].len())
        .map(|i| (flat.iter().map(|f| f[i] as f64).sum::<f64>() / ms.len() as f64) as f32)
        .collect()
}

fn criterion_averaging_algebra() -> Outcome {
    let mut r = rng(1);
    let mut elements = 0usize;
    for case in 0..ALGEBRA_CASES {
        let layout = random_layout(&mut r);
        let k = r.random_range(1..=ALGEBRA_MAX_MODELS);
        let scale = 10f64.powf(r.random_range(-3.0..3.0));
        let a: Vec<TensorMap> = (0..k).map(|_| random_map(&mut r, &layout, scale)).collect();
        let b: Vec<TensorMap> = (0..k).map(|_| random_map(&mut r, &layout, scale)).collect();
        elements += a[0].numel();
        let tol = ALGEBRA_REL_TOL * max_abs(&a).max(f64::MIN_POSITIVE);

        let batch = average_checkpoints(&a).unwrap();

        let copies = vec![a[0].clone(); k];
        ensure!(
            average_checkpoints(&copies).unwrap().bit_eq(&a[0]),
            "case {case}: idempotence (batch)"
        );
        ensure!(stream(&copies).bit_eq(&a[0]), "case {case}: idempotence (streaming)");

        let mut perm = a.clone();
        perm.shuffle(&mut r);
        let d = max_abs_diff(&average_checkpoints(&perm).unwrap(), &batch);
        ensure!(d <= tol, "case {case}: permutation changed the mean by {d:e} > {tol:e}");

        let d = max_abs_diff(&stream(&a), &batch);
        ensure!(d <= tol, "case {case}: streaming differs from batch by {d:e} > {tol:e}");

        let oracle = oracle_mean(&a);
        let d = batch
            .flatten()
            .iter()
            .zip(&oracle)
            .map(|(&x, &y)| (x as f64 - y as f64).abs())
            .fold(0.0, f64::max);
        ensure!(d <= tol, "case {case}: batch differs from the f64 oracle by {d:e}");

        let alpha: f64 = r.random_range(-2.0..2.0);
        let beta: f64 = r.random_range(-2.0..2.0);
        let combo: Vec<TensorMap> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                let mut tm = TensorMap::new();
                for ((name, tx), (_, ty)) in x.iter().zip(y.iter()) {
                    let data = tx
                        .data()
                        .iter()
                        .zip(ty.data())
                        .map(|(&p, &q)| (alpha * p as f64 + beta * q as f64) as f32)
                        .collect();
                    tm.insert(name, Tensor::new(tx.shape().to_vec(), data).unwrap())
                        .unwrap();
                }
                tm
            })
            .collect();
        let lhs = average_checkpoints(&combo).unwrap().flatten();
        let ma = batch.flatten();
        let mb = average_checkpoints(&b).unwrap().flatten();
        let lin_tol = ALGEBRA_REL_TOL * (alpha.abs() * max_abs(&a) + beta.abs() * max_abs(&b)).max(f64::MIN_POSITIVE);
        for i in 0..lhs.len() {
            let rhs = alpha * ma[i] as f64 + beta * mb[i] as f64;
            let d = (lhs[i] as f64 - rhs).abs();
            ensure!(d <= lin_tol, "case {case}: linearity off by {d:e} > {lin_tol:e} at {i}");
        }
    }
    Ok(format!(
        "{ALGEBRA_CASES} cases, {elements} elements per model in total, rel tol {ALGEBRA_REL_TOL:e}"
    ))
}

fn random_name(r: &mut ChaCha20Rng) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-/";
    let n = r.random_range(1..=24);
    let mut s: String = (0..n).map(|_| CHARS[r.random_range(0..CHARS.len())] as char).collect();
    if r.random_bool(0.1) {
        s.push('é');
    }
    s
}

fn random_finite_f32(r: &mut ChaCha20Rng) -> f32 {
    loop {
        let v = f32::from_bits(r.random());
        if v.is_finite() {
            return v;
        }
    }
}

fn criterion_tpak_roundtrip() -> Outcome {
    let mut r = rng(2);
    let opts = CodecOptions::default();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bytes_total = 0;
    for case in 0..TPAK_CASES {
        let mut tm = TensorMap::new();
        for _ in 0..r.random_range(0..=6) {
            let rank = r.random_range(0..=3);
            let shape: Vec<usize> = (0..rank).map(|_| r.random_range(0..=7)).collect();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| random_finite_f32(&mut r)).collect();
            tm.insert(random_name(&mut r), Tensor::new(shape, data).unwrap())
                .unwrap();
        }
        for _ in 0..r.random_range(0..=3) {
            tm.set_meta(random_name(&mut r), random_name(&mut r));
        }
        let bytes = encode(&tm, opts).map_err(|e| format!("case {case}: {e}"))?;
        let back = decode(&bytes, opts).map_err(|e| format!("case {case}: {e}"))?;
        ensure!(back.bit_eq(&tm), "case {case}: tensors changed");
        ensure!(back.meta() == tm.meta(), "case {case}: metadata changed");
        ensure!(
            encode(&back, opts).unwrap() == bytes,
            "case {case}: re-encoding changed bytes"
        );
        if case % 10 == 0 {
            let path = dir.path().join(format!("m{case}.tpak"));
            snapsoup::tensor_store::save_tensormap(&tm, &path).unwrap();
            let loaded = snapsoup::tensor_store::load_tensormap(&path).unwrap();
            ensure!(std::fs::read(&path).unwrap() == bytes, "case {case}: file bytes differ");
            ensure!(loaded.bit_eq(&tm), "case {case}: file reload changed tensors");
        }
        bytes_total += bytes.len();
    }
    Ok(format!(
        "{TPAK_CASES} maps, {bytes_total} bytes, byte-identical re-encode"
    ))
}

/// Last index holding the maximum, by two passes.
fn brute_latest(scores: &[(u32, f64)]) -> u32 {
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    scores.iter().filter(|s| s.1 == best).map(|s| s.0).max().unwrap()
}

/// Smallest run_id holding the maximum, by two passes.
fn brute_best_run(items: &[(String, f64)]) -> String {
    let best = items.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    items.iter().filter(|s| s.1 == best).map(|s| s.0.clone()).min().unwrap()
}

fn criterion_selection_oracle() -> Outcome {
    let mut r = rng(3);
    let mut checks = 0usize;
    for trial in 0..SELECTION_TRIALS {
        let n_runs = r.random_range(1..=SELECTION_MAX_RUNS);
        let n_langs = r.random_range(1..=SELECTION_MAX_LANGUAGES);
        let langs: Vec<String> = (0..n_langs).map(|i| format!("l{i:02}")).collect();
        let mut ids: Vec<String> = Vec::new();
        while ids.len() < n_runs {
            let id = format!("run{:x}", r.random_range(0..4096u32));
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        let runs: Vec<Run> = ids
            .iter()
            .map(|id| Run {
                run_id: id.clone(),
                hparams: HyperParams {
                    learning_rate: [1e-6, 5e-6, 1e-5][r.random_range(0..3)],
                    batch_size: [16, 32, 64][r.random_range(0..3)],
                    seed: r.random_range(1..4),
                },
                snapshots: (1..=SELECTION_SNAPSHOTS)
                    .map(|index| Snapshot {
                        run_id: id.clone(),
                        index,
                        weights_path: None,
                    })
                    .collect(),
            })
            .collect();
        let mut pool = RunPool::new(SELECTION_SNAPSHOTS, runs).map_err(|e| e.to_string())?;
        // Coarse values force frequent ties.
        let mut table = std::collections::HashMap::new();
        let splits: Vec<Split> = std::iter::once(Split::SrcDev)
            .chain(langs.iter().map(|l| Split::TrgDev(l.clone())))
            .chain(langs.iter().map(|l| Split::Test(l.clone())))
            .collect();
        for id in &ids {
            for index in 0..=SELECTION_SNAPSHOTS {
                for split in &splits {
                    let value = 70.0 + r.random_range(0..12) as f64 / 10.0;
                    table.insert((id.clone(), index, split.clone()), value);
                    pool.add_score(ScoreRecord {
                        run_id: id.clone(),
                        snapshot_index: index,
                        split: split.clone(),
                        metric: "m".into(),
                        value,
                    })
                    .unwrap();
                }
            }
        }
        let score = |id: &str, index: u32, split: &Split| table[&(id.to_string(), index, split.clone())];
        let trg_mean = |id: &str, index: u32| {
            langs
                .iter()
                .map(|l| score(id, index, &Split::TrgDev(l.clone())))
                .sum::<f64>()
                / n_langs as f64
        };

        let mut src_choice = std::collections::HashMap::new();
        let mut trg_choice = std::collections::HashMap::new();
        for run in pool.runs() {
            let id = &run.run_id;
            let scored: Vec<(u32, f64)> = (1..=SELECTION_SNAPSHOTS)
                .map(|i| (i, score(id, i, &Split::SrcDev)))
                .collect();
            let want = brute_latest(&scored);
            let got = build_variant(&pool, run, Variant::SrcDev, "m", None).unwrap();
            ensure!(
                got.choice == Choice::Snapshot { index: want },
                "trial {trial}: src-dev snapshot of {id}"
            );
            src_choice.insert(id.clone(), want);

            let got = build_variant(&pool, run, Variant::TrgDev, "m", None).unwrap();
            let Choice::PerLanguage { indices } = &got.choice else {
                return Err(format!("trial {trial}: trg-dev choice kind"));
            };
            let mut per_lang = Vec::new();
            for l in &langs {
                let split = Split::TrgDev(l.clone());
                let scored: Vec<(u32, f64)> = (1..=SELECTION_SNAPSHOTS).map(|i| (i, score(id, i, &split))).collect();
                let want = brute_latest(&scored);
                ensure!(
                    indices.get(l) == Some(&want),
                    "trial {trial}: trg-dev snapshot of {id} for {l}"
                );
                per_lang.push(score(id, want, &split));
                checks += 1;
            }
            trg_choice.insert(id.clone(), per_lang.iter().sum::<f64>() / n_langs as f64);
            checks += 1;
        }

        for v in [Variant::Last, Variant::SrcDev, Variant::Ca, Variant::TrgDev] {
            let models: Vec<_> = pool
                .runs()
                .iter()
                .map(|run| build_variant(&pool, run, v, "m", None).unwrap())
                .collect();
            let index_of = |id: &str| match v {
                Variant::Last => SELECTION_SNAPSHOTS,
                Variant::SrcDev => src_choice[id],
                _ => 0,
            };
            if v != Variant::TrgDev {
                let items: Vec<(String, f64)> = ids
                    .iter()
                    .map(|id| (id.clone(), score(id, index_of(id), &Split::SrcDev)))
                    .collect();
                let got = max_src_dev(&models).unwrap();
                ensure!(
                    got.model.run_id == brute_best_run(&items),
                    "trial {trial}: max-src-dev {v}"
                );
            }
            let items: Vec<(String, f64)> = ids
                .iter()
                .map(|id| {
                    let m = if v == Variant::TrgDev {
                        trg_choice[id]
                    } else {
                        trg_mean(id, index_of(id))
                    };
                    (id.clone(), m)
                })
                .collect();
            let got = max_trg_dev(&models).unwrap();
            ensure!(
                got.model.run_id == brute_best_run(&items),
                "trial {trial}: max-trg-dev {v}"
            );
            ensure!(got.oracle, "trial {trial}: max-trg-dev must be flagged as oracle");
            checks += 2;
        }
    }
    Ok(format!(
        "{SELECTION_TRIALS} trials, {checks} selections equal to brute force"
    ))
}

fn criterion_jensen() -> Outcome {
    let mut r = rng(4);
    let mut min_gap = f64::INFINITY;
    for trial in 0..JENSEN_TRIALS {
        let dim = r.random_range(1..=64);
        let k = r.random_range(1..=8);
        let sigma = 10f64.powf(r.random_range(-1.0..1.0));
        let layout = vec![("w".to_string(), vec![dim])];
        let opt: Vec<f64> = (0..dim)
            .map(|_| r.sample::<f64, _>(StandardNormal) as f32 as f64)
            .collect();
        let q = SyntheticQuadratic {
            s0: 100.0,
            curvature: 10f64.powf(r.random_range(-3.0..0.0)),
            layout: layout.clone(),
            optima: [(Split::SrcDev, opt)].into_iter().collect(),
        };
        let ms: Vec<TensorMap> = (0..k).map(|_| random_map(&mut r, &layout, sigma)).collect();
        let mean_score = ms.iter().map(|m| q.score(m, &Split::SrcDev).unwrap()).sum::<f64>() / k as f64;
        let avg_score = q.score(&average_checkpoints(&ms).unwrap(), &Split::SrcDev).unwrap();
        let gap = avg_score - mean_score;
        ensure!(
            gap >= -JENSEN_SLACK,
            "trial {trial}: score of mean {avg_score} < mean score {mean_score}"
        );
        min_gap = min_gap.min(gap);
    }
    Ok(format!(
        "0 of {JENSEN_TRIALS} violated (slack {JENSEN_SLACK:e}, min gap {min_gap:e})"
    ))
}

fn r1_config(r_max: usize) -> ProtocolConfig {
    ProtocolConfig {
        r_max,
        repetitions: 10,
        variants: vec![Variant::Last, Variant::SrcDev, Variant::Ca],
        strategies: vec![Strategy::MaxSrcDev, Strategy::AccumulativeAvg],
        ..Default::default()
    }
}

fn check_r1(table: &ProtocolTable, label: &str) -> Result<usize, String> {
    let mut n = 0;
    for v in [Variant::Last, Variant::SrcDev, Variant::Ca] {
        let a = table.cell(1, Some(v), Strategy::MaxSrcDev).ok_or("missing cell")?;
        let b = table
            .cell(1, Some(v), Strategy::AccumulativeAvg)
            .ok_or("missing cell")?;
        ensure!(
            a.mean.to_bits() == b.mean.to_bits() && a.std.to_bits() == b.std.to_bits() && a.values == b.values,
            "{label}: r=1 {v}: max-src-dev {} != accumulative {}",
            a.mean,
            b.mean
        );
        n += 1;
    }
    Ok(n)
}

fn criterion_r1_equality() -> Outcome {
    let mut checked = 0;
    for k in 0..R1_POOLS {
        let cfg = SynthConfig {
            dim: [8, 33, 64, 256][k as usize],
            n_configs: [3, 7, 12, 21][k as usize],
            seeds_per_config: [1, 2, 3, 3][k as usize],
            sigma_noise: [0.0, 0.5, 2.0, 5.0][k as usize],
            rng_seed: 100 + k,
            ..Default::default()
        };
        let p = generate(&cfg).map_err(|e| e.to_string())?;
        let ev = Evaluator::SyntheticQuadratic(p.truth.evaluator.clone());
        for r_max in [1, 3] {
            let t = run_protocol(&p.pool, &ev, Some(&p.weights), &r1_config(r_max)).map_err(|e| e.to_string())?;
            checked += check_r1(&t, &format!("synthetic pool {k}, r_max {r_max}"))?;
        }
        let t = run_protocol(&p.pool, &Evaluator::ScoreTable, Some(&p.weights), &r1_config(1))
            .map_err(|e| e.to_string())?;
        checked += check_r1(&t, &format!("score-table pool {k}"))?;
    }
    Ok(format!("{checked} (pool, evaluator, variant) cells equal bit for bit"))
}

fn criterion_qualitative() -> Outcome {
    let base = SynthConfig {
        dim: QUAL_DIM,
        n_configs: QUAL_CONFIGS,
        seeds_per_config: QUAL_SEEDS,
        rng_seed: QUAL_SEED,
        ..Default::default()
    };
    let p = generate(&base).map_err(|e| e.to_string())?;
    let ev = Evaluator::SyntheticQuadratic(p.truth.evaluator.clone());
    let cfg = ProtocolConfig {
        rng_seed: QUAL_SEED,
        ..r1_config(10)
    };
    let t = run_protocol(&p.pool, &ev, Some(&p.weights), &cfg).map_err(|e| e.to_string())?;
    let reps = cfg.repetitions as f64;
    let acc = |r: usize, v: Variant| t.cell(r, Some(v), Strategy::AccumulativeAvg).unwrap();
    let sel = |r: usize, v: Variant| t.cell(r, Some(v), Strategy::MaxSrcDev).unwrap();

    // (a) accumulative CA rises with r and beats max-src-dev CA from r = 3 on.
    for r in 1..cfg.r_max {
        let (a, b) = (acc(r, Variant::Ca), acc(r + 1, Variant::Ca));
        let noise = QUAL_NOISE_SIGMAS * ((a.std.powi(2) + b.std.powi(2)) / reps).sqrt();
        ensure!(
            b.mean >= a.mean - noise,
            "(a) accumulative CA dropped from {:.3} at r={r} to {:.3} (noise allowance {noise:.3})",
            a.mean,
            b.mean
        );
    }
    for r in QUAL_FIRST_R_ABOVE..=cfg.r_max {
        ensure!(
            acc(r, Variant::Ca).mean > sel(r, Variant::Ca).mean,
            "(a) r={r}: accumulative CA {:.3} <= max-src-dev CA {:.3}",
            acc(r, Variant::Ca).mean,
            sel(r, Variant::Ca).mean
        );
    }
    // (b) repetition spread shrinks.
    for v in [Variant::Last, Variant::SrcDev, Variant::Ca] {
        ensure!(
            acc(cfg.r_max, v).std < acc(1, v).std,
            "(b) {v}: std at r=10 {:.3} >= std at r=1 {:.3}",
            acc(cfg.r_max, v).std,
            acc(1, v).std
        );
    }
    // (c) src-dev and mean trg-dev disagree on the best run.
    let mut disagree = 0;
    for k in 0..QUAL_POOLS {
        let cfg = SynthConfig {
            rng_seed: QUAL_SEED + k,
            delta_src_trg: 2.0 * base.sigma_bias,
            ..base.clone()
        };
        let p = generate(&cfg).map_err(|e| e.to_string())?;
        let models: Vec<_> = p
            .pool
            .runs()
            .iter()
            .map(|run| build_variant(&p.pool, run, Variant::Ca, &cfg.metric, None).unwrap())
            .collect();
        if max_src_dev(&models).unwrap().model.run_id != max_trg_dev(&models).unwrap().model.run_id {
            disagree += 1;
        }
    }
    let freq = disagree as f64 / QUAL_POOLS as f64;
    ensure!(
        freq > QUAL_DISAGREEMENT_MIN,
        "(c) disagreement {freq} <= {QUAL_DISAGREEMENT_MIN}"
    );
    Ok(format!(
        "(a) acc CA {:.2} -> {:.2} vs max-src-dev CA {:.2} at r=10; (b) acc CA std {:.3} -> {:.3}; (c) disagreement {:.2}",
        acc(1, Variant::Ca).mean,
        acc(10, Variant::Ca).mean,
        sel(10, Variant::Ca).mean,
        acc(1, Variant::Ca).std,
        acc(10, Variant::Ca).std,
        freq
    ))
}

fn criterion_golden_report() -> Outcome {
    let table: ProtocolTable = serde_json::from_str(RESULTS_NER).map_err(|e| e.to_string())?;
    let rule = HighlightRule::default();
    let h = compute_highlights(&table.cells, &rule);
    let hit = h
        .iter()
        .find(|h| h.r == 10 && h.variant == Some(Variant::Ca) && h.strategy == Strategy::AccumulativeAvg)
        .ok_or("accumulative CA at r=10 has no highlight")?;
    ensure!(hit.level == HighlightLevel::Strong, "level is {:?}", hit.level);
    ensure!(
        (hit.diff - GOLDEN_DIFF).abs() <= GOLDEN_TOL,
        "diff {} != {GOLDEN_DIFF}",
        hit.diff
    );

    let json: serde_json::Value =
        serde_json::from_str(&render(&table, Format::Json, &rule).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let cell = json["cells"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["r"] == 10 && c["variant"] == "ca" && c["strategy"] == "accumulative-avg")
        .ok_or("cell missing from JSON")?;
    ensure!(cell["display"] == GOLDEN_DISPLAY, "display {}", cell["display"]);
    ensure!(cell["highlight"] == "strong", "JSON highlight {}", cell["highlight"]);
    ensure!(cell["mean"] == 48.4, "JSON mean {} is not exact", cell["mean"]);
    let md = render(&table, Format::Markdown, &rule).map_err(|e| e.to_string())?;
    ensure!(
        md.contains(&format!("**{GOLDEN_DISPLAY}** ^")),
        "markdown lacks the strong bold cell"
    );
    Ok(format!("{GOLDEN_DISPLAY} strong, diff {:.1}", hit.diff))
}

fn criterion_grid_delta() -> Outcome {
    let grid: GridTable = serde_json::from_str(GRID_NER).map_err(|e| e.to_string())?;
    let summary = grid_summary(&grid).map_err(|e| e.to_string())?;
    let col = summary
        .iter()
        .find(|s| s.column == "src-dev")
        .ok_or("no src-dev column")?;
    ensure!(col.best == 45.9, "best {}", col.best);
    ensure!(
        col.at_max_validation == Some(40.7),
        "at max validation {:?}",
        col.at_max_validation
    );
    let delta = col.delta.ok_or("no delta")?;
    ensure!((delta - GRID_DELTA).abs() <= GRID_TOL, "delta {delta}");
    ensure!(
        format!("{delta:.1}") == GRID_DELTA_DISPLAY,
        "delta displays as {delta:.1}"
    );
    let md = render_grid(&grid, Format::Markdown).map_err(|e| e.to_string())?;
    let delta_row = md.lines().find(|l| l.contains('Δ')).ok_or("no delta row")?;
    ensure!(
        delta_row.split('|').nth(4).map(str::trim) == Some(GRID_DELTA_DISPLAY),
        "delta row {delta_row}"
    );
    Ok(format!(
        "src-dev: {} - {} = {delta:.1}, rendered in the Δ row",
        col.best,
        col.at_max_validation.unwrap()
    ))
}

fn criterion_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_snapsoup");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        ensure!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        Ok(())
    };
    let pool = d.join("pool");
    run(&["synth", "--dim", "64", "--out", pool.to_str().unwrap()])?;
    let manifest = pool.join("manifest.json");
    let truth = pool.join("truth.json");
    let mut outputs = Vec::new();
    for (i, jobs) in ["1", "4"].iter().enumerate() {
        let out = d.join(format!("t{i}.json"));
        run(&[
            "protocol",
            "--jobs",
            jobs,
            "--manifest",
            manifest.to_str().unwrap(),
            "--evaluator",
            "synthetic",
            "--truth",
            truth.to_str().unwrap(),
            "--seed",
            "42",
            "--strategies",
            "max-src-dev,max-trg-dev,accumulative-avg,soup",
            "--out",
            out.to_str().unwrap(),
        ])?;
        outputs.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure!(outputs[0] == outputs[1], "protocol JSON differs between invocations");

    let p = generate(&SynthConfig {
        dim: 32,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let ev = Evaluator::SyntheticQuadratic(p.truth.evaluator.clone());
    let cfg = ProtocolConfig::default();
    let a = serde_json::to_string(&run_protocol(&p.pool, &ev, Some(&p.weights), &cfg).unwrap()).unwrap();
    let b = serde_json::to_string(&run_protocol(&p.pool, &ev, Some(&p.weights), &cfg).unwrap()).unwrap();
    ensure!(a == b, "in-process protocol output differs");
    Ok(format!(
        "{} identical bytes across two CLI runs (--jobs 1 vs 4)",
        outputs[0].len()
    ))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            name: "averaging algebra",
            budget: ALGEBRA_BUDGET,
            run: criterion_averaging_algebra,
        },
        Criterion {
            name: "TPAK round trip",
            budget: TPAK_BUDGET,
            run: criterion_tpak_roundtrip,
        },
        Criterion {
            name: "selection oracle equivalence",
            budget: SELECTION_BUDGET,
            run: criterion_selection_oracle,
        },
        Criterion {
            name: "Jensen property",
            budget: JENSEN_BUDGET,
            run: criterion_jensen,
        },
        Criterion {
            name: "r=1 equality",
            budget: R1_BUDGET,
            run: criterion_r1_equality,
        },
        Criterion {
            name: "qualitative reproduction",
            budget: QUAL_BUDGET,
            run: criterion_qualitative,
        },
        Criterion {
            name: "golden report fixture",
            budget: FIXTURE_BUDGET,
            run: criterion_golden_report,
        },
        Criterion {
            name: "grid delta fixture",
            budget: FIXTURE_BUDGET,
            run: criterion_grid_delta,
        },
        Criterion {
            name: "protocol determinism",
            budget: DETERMINISM_BUDGET,
            run: criterion_determinism,
        },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, c) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run));
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(Ok(d)) if elapsed <= c.budget => (true, d),
            Ok(Ok(d)) => (false, format!("{d}; over budget")),
            Ok(Err(e)) => (false, e),
            Err(p) => (
                false,
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()),
            ),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} [{}] {}: {} ({:.2}s, budget {}s)",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            c.name,
            detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
