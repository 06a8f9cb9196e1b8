//! Rendering of protocol tables and per-config result grids.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{aggregate, CellResult, ProtocolTable, Strategy};
use crate::registry::{RunPool, SplitFamily};
use crate::selection::{build_variant, Variant};

/// Slack for comparisons against the highlight thresholds, so that
/// differences like 74.4 - 74.3 land on the intended side of 0.1.
pub const HIGHLIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HighlightLevel {
    Strong,
    Weak,
}

impl HighlightLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            HighlightLevel::Strong => "strong",
            HighlightLevel::Weak => "weak",
        }
    }
}

/// What an averaging cell is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Best max-src-dev cell of the same r, over all variants.
    #[default]
    BestInRow,
    /// Max-src-dev cell of the same r and variant.
    PerVariant,
    /// Best max-src-dev cell of the whole table.
    Overall,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best-in-row" | "row" => Ok(Baseline::BestInRow),
            "per-variant" | "variant" => Ok(Baseline::PerVariant),
            "overall" => Ok(Baseline::Overall),
            _ => Err(Error::Config(format!("unknown highlight baseline {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HighlightRule {
    pub strong_threshold: f64,
    pub weak_band: f64,
    pub baseline: Baseline,
}

impl Default for HighlightRule {
    fn default() -> Self {
        HighlightRule {
            strong_threshold: 0.2,
            weak_band: 0.1,
            baseline: Baseline::BestInRow,
        }
    }
}

impl HighlightRule {
    pub fn with_baseline(baseline: Baseline) -> Self {
        HighlightRule {
            baseline,
            ..Default::default()
        }
    }

    pub fn classify(&self, diff: f64) -> Option<HighlightLevel> {
        if diff >= self.strong_threshold - HIGHLIGHT_TOLERANCE {
            Some(HighlightLevel::Strong)
        } else if diff.abs() <= self.weak_band + HIGHLIGHT_TOLERANCE {
            Some(HighlightLevel::Weak)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Highlight {
    pub r: usize,
    pub variant: Option<Variant>,
    pub strategy: Strategy,
    pub level: HighlightLevel,
    /// Cell mean minus the baseline, unrounded.
    pub diff: f64,
    pub baseline: f64,
}

fn max_of(it: impl Iterator<Item = f64>) -> Option<f64> {
    it.fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

/// Highlights for every averaging cell (accumulative and soup).
pub fn compute_highlights(cells: &[CellResult], rule: &HighlightRule) -> Vec<Highlight> {
    let src = || cells.iter().filter(|c| c.strategy == Strategy::MaxSrcDev);
    let overall = max_of(src().map(|c| c.mean));
    let mut out = Vec::new();
    for c in cells.iter().filter(|c| c.strategy.averages()) {
        let row_best = || max_of(src().filter(|b| b.r == c.r).map(|b| b.mean));
        let base = match rule.baseline {
            Baseline::BestInRow => row_best(),
            Baseline::Overall => overall,
            Baseline::PerVariant => match c.variant {
                Some(v) => src().find(|b| b.r == c.r && b.variant == Some(v)).map(|b| b.mean),
                None => row_best(),
            },
        };
        let Some(base) = base else { continue };
        let diff = c.mean - base;
        if let Some(level) = rule.classify(diff) {
            out.push(Highlight {
                r: c.r,
                variant: c.variant,
                strategy: c.strategy,
                level,
                diff,
                baseline: base,
            });
        }
    }
    out
}

/// `mean_{std}` at one decimal.
pub fn display_cell(mean: f64, std: f64) -> String {
    format!("{mean:.1}_{{{std:.1}}}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Markdown,
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config(format!("unknown format {s:?}"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Markdown => "markdown",
            Format::Csv => "csv",
            Format::Json => "json",
        })
    }
}

fn column_label(strategy: Strategy, variant: Option<Variant>) -> String {
    match variant {
        Some(v) => format!("{strategy} {v}"),
        None => strategy.to_string(),
    }
}

#[derive(Serialize)]
struct JsonCell<'a> {
    r: usize,
    variant: Option<Variant>,
    strategy: Strategy,
    mean: f64,
    std: f64,
    n_reps: usize,
    display: String,
    highlight: Option<HighlightLevel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    diff: Option<f64>,
    #[serde(skip_serializing_if = "<[f64]>::is_empty")]
    values: &'a [f64],
}

#[derive(Serialize)]
struct JsonReport<'a> {
    rng: &'a str,
    evaluator: &'a str,
    config: &'a crate::protocol::ProtocolConfig,
    rule: &'a HighlightRule,
    cells: Vec<JsonCell<'a>>,
}

pub fn render(table: &ProtocolTable, fmt: Format, rule: &HighlightRule) -> Result<String> {
    let highlights = compute_highlights(&table.cells, rule);
    let find = |c: &CellResult| {
        highlights
            .iter()
            .find(|h| h.r == c.r && h.variant == c.variant && h.strategy == c.strategy)
    };
    match fmt {
        Format::Json => {
            let cells = table
                .cells
                .iter()
                .map(|c| JsonCell {
                    r: c.r,
                    variant: c.variant,
                    strategy: c.strategy,
                    mean: c.mean,
                    std: c.std,
                    n_reps: c.n_reps,
                    display: display_cell(c.mean, c.std),
                    highlight: find(c).map(|h| h.level),
                    diff: find(c).map(|h| h.diff),
                    values: &c.values,
                })
                .collect();
            let report = JsonReport {
                rng: &table.rng,
                evaluator: &table.evaluator,
                config: &table.config,
                rule,
                cells,
            };
            Ok(serde_json::to_string_pretty(&report)? + "\n")
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["r", "variant", "strategy", "mean", "std", "highlight"])?;
            for c in &table.cells {
                w.write_record([
                    c.r.to_string(),
                    c.variant.map(|v| v.to_string()).unwrap_or_default(),
                    c.strategy.to_string(),
                    c.mean.to_string(),
                    c.std.to_string(),
                    find(c).map(|h| h.level.as_str().to_string()).unwrap_or_default(),
                ])?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        Format::Markdown => Ok(render_markdown(table, &highlights)),
    }
}

fn render_markdown(table: &ProtocolTable, highlights: &[Highlight]) -> String {
    let mut columns: Vec<(Strategy, Option<Variant>)> = Vec::new();
    let mut rows: Vec<usize> = Vec::new();
    for c in &table.cells {
        if !columns.contains(&(c.strategy, c.variant)) {
            columns.push((c.strategy, c.variant));
        }
        if !rows.contains(&c.r) {
            rows.push(c.r);
        }
    }
    rows.sort_unstable();
    let col_best: Vec<Option<f64>> = columns
        .iter()
        .map(|&(s, v)| {
            max_of(
                table
                    .cells
                    .iter()
                    .filter(|c| c.strategy == s && c.variant == v)
                    .map(|c| c.mean),
            )
        })
        .collect();

    let mut out = String::new();
    out.push_str("| r |");
    for &(s, v) in &columns {
        let _ = write!(out, " {} |", column_label(s, v));
    }
    out.push_str("\n|---|");
    for _ in &columns {
        out.push_str("---|");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "| {r} |");
        for (i, &(s, v)) in columns.iter().enumerate() {
            let Some(c) = table
                .cells
                .iter()
                .find(|c| c.r == r && c.strategy == s && c.variant == v)
            else {
                out.push_str(" |");
                continue;
            };
            let mut text = display_cell(c.mean, c.std);
            if col_best[i] == Some(c.mean) {
                text = format!("**{text}**");
            }
            match highlights
                .iter()
                .find(|h| h.r == r && h.strategy == s && h.variant == v)
            {
                Some(h) if h.level == HighlightLevel::Strong => text.push_str(" ^"),
                Some(_) => text.push_str(" ~"),
                None => {}
            }
            let _ = write!(out, " {text} |");
        }
        out.push('\n');
    }
    out.push_str(
        "\nBold: best per column. `^`: at least +0.2 over the best max-src-dev cell. `~`: within 0.1 of it.\n",
    );
    out
}

/// Mean and std over seeds for one (config, column) pair, plus the
/// validation score that model selection would have seen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub mean: f64,
    pub std: f64,
    #[serde(default)]
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub learning_rate: f64,
    pub batch_size: u32,
    pub cells: Vec<Option<GridCell>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub columns: Vec<String>,
    pub rows: Vec<GridRow>,
    /// Per-column row index that counts as max-validation, overriding the
    /// argmax of the cells' validation scores.
    #[serde(default)]
    pub max_validation_rows: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnSummary {
    pub column: String,
    pub best_row: usize,
    pub best: f64,
    pub max_validation_row: Option<usize>,
    pub at_max_validation: Option<f64>,
    /// Best minus the value at max validation.
    pub delta: Option<f64>,
}

/// Per column: the best value, the value at max validation, and their difference.
/// Ties go to the first row.
pub fn grid_summary(grid: &GridTable) -> Result<Vec<ColumnSummary>> {
    let mut out = Vec::with_capacity(grid.columns.len());
    for (j, name) in grid.columns.iter().enumerate() {
        let cells: Vec<(usize, GridCell)> = grid
            .rows
            .iter()
            .enumerate()
            .filter_map(|(i, row)| row.cells.get(j).copied().flatten().map(|c| (i, c)))
            .collect();
        let first = |key: &dyn Fn(&GridCell) -> Option<f64>| {
            cells
                .iter()
                .fold(None, |best: Option<(usize, f64)>, (i, c)| match (best, key(c)) {
                    (_, None) => best,
                    (Some((_, b)), Some(v)) if v <= b => best,
                    (_, Some(v)) => Some((*i, v)),
                })
        };
        let (best_row, best) =
            first(&|c| Some(c.mean)).ok_or_else(|| Error::Empty(format!("grid column {name:?} has no values")))?;
        let max_validation_row = match grid.max_validation_rows.get(j).copied().flatten() {
            Some(i) => {
                if !cells.iter().any(|(k, _)| *k == i) {
                    return Err(Error::Config(format!(
                        "max-validation row {i} of column {name:?} has no value"
                    )));
                }
                Some(i)
            }
            None => first(&|c| c.validation).map(|(i, _)| i),
        };
        let at_max_validation =
            max_validation_row.and_then(|i| cells.iter().find(|(k, _)| *k == i).map(|(_, c)| c.mean));
        out.push(ColumnSummary {
            column: name.clone(),
            best_row,
            best,
            max_validation_row,
            at_max_validation,
            delta: at_max_validation.map(|v| best - v),
        });
    }
    Ok(out)
}

pub fn render_grid(grid: &GridTable, fmt: Format) -> Result<String> {
    let summary = grid_summary(grid)?;
    match fmt {
        Format::Json => {
            #[derive(Serialize)]
            struct Out<'a> {
                grid: &'a GridTable,
                summary: &'a [ColumnSummary],
            }
            Ok(serde_json::to_string_pretty(&Out {
                grid,
                summary: &summary,
            })? + "\n")
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "learning_rate",
                "batch_size",
                "column",
                "mean",
                "std",
                "validation",
                "best",
                "max_validation",
            ])?;
            for (i, row) in grid.rows.iter().enumerate() {
                for (j, cell) in row.cells.iter().enumerate() {
                    let Some(c) = cell else { continue };
                    let s = &summary[j];
                    w.write_record([
                        format!("{:e}", row.learning_rate),
                        row.batch_size.to_string(),
                        grid.columns[j].clone(),
                        c.mean.to_string(),
                        c.std.to_string(),
                        c.validation.map(|v| v.to_string()).unwrap_or_default(),
                        (s.best_row == i).to_string(),
                        (s.max_validation_row == Some(i)).to_string(),
                    ])?;
                }
            }
            for s in &summary {
                w.write_record([
                    String::new(),
                    String::new(),
                    format!("delta:{}", s.column),
                    s.delta.map(|d| d.to_string()).unwrap_or_default(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ])?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        Format::Markdown => {
            let mut out = String::from("| lr | bs |");
            for c in &grid.columns {
                let _ = write!(out, " {c} |");
            }
            out.push_str("\n|---|---|");
            for _ in &grid.columns {
                out.push_str("---|");
            }
            out.push('\n');
            for (i, row) in grid.rows.iter().enumerate() {
                let _ = write!(out, "| {:e} | {} |", row.learning_rate, row.batch_size);
                for (j, cell) in row.cells.iter().enumerate() {
                    let Some(c) = cell else {
                        out.push_str(" |");
                        continue;
                    };
                    let mut text = display_cell(c.mean, c.std);
                    if summary[j].best_row == i {
                        text = format!("**{text}**");
                    }
                    if summary[j].max_validation_row == Some(i) {
                        text.push_str(" (v)");
                    }
                    let _ = write!(out, " {text} |");
                }
                out.push('\n');
            }
            out.push_str("| | Δ |");
            for s in &summary {
                match s.delta {
                    Some(d) => {
                        let _ = write!(out, " {d:.1} |");
                    }
                    None => out.push_str(" |"),
                }
            }
            out.push_str("\n\nBold: best per column. (v): max validation.\n");
            Ok(out)
        }
    }
}

/// One row per (lr, batch size), one column per variant; seeds aggregated.
/// TRG-DEV validation is its mean target-dev score, the rest use source dev.
pub fn grid_from_pool(pool: &RunPool, variants: &[Variant], metric: &str, family: SplitFamily) -> Result<GridTable> {
    let mut rows = Vec::new();
    for (key, runs) in pool.configs() {
        let mut cells = Vec::with_capacity(variants.len());
        for &v in variants {
            let mut values = Vec::with_capacity(runs.len());
            let mut validation = Vec::with_capacity(runs.len());
            for run in &runs {
                let m = build_variant(pool, run, v, metric, None)?;
                values.push(m.scores.mean(family).ok_or_else(|| {
                    Error::MissingScore(format!("{v} model of {:?} has no {family} scores", run.run_id))
                })?);
                let val = if v == Variant::TrgDev {
                    m.scores.mean(SplitFamily::TrgDev)
                } else {
                    m.scores.src_dev
                };
                if let Some(val) = val {
                    validation.push(val);
                }
            }
            let (mean, std) = aggregate(&values)?;
            let validation = if validation.len() == values.len() {
                Some(aggregate(&validation)?.0)
            } else {
                None
            };
            cells.push(Some(GridCell { mean, std, validation }));
        }
        rows.push(GridRow {
            learning_rate: key.learning_rate(),
            batch_size: key.batch_size,
            cells,
        });
    }
    Ok(GridTable {
        columns: variants.iter().map(|v| v.to_string()).collect(),
        rows,
        max_validation_rows: Vec::new(),
    })
}
