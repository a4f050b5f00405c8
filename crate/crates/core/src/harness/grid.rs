//! Resumable ablation grids. Every cell persists its outcome as soon as it
//! finishes; a rerun only computes cells without a stored outcome.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::EvalReport;
use super::pipeline::{pretrained, run_scheme, PretrainSpec};
use super::write_atomic;
use crate::error::{Error, Result};
use crate::masking::MaskStrategy;
use crate::model::{Framework, PromptStyle};
use crate::series::TimeSeriesDataset;
use crate::tuning::Scheme;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Schemes,
    Mask,
    Ratio,
    Lookback,
    Patch,
    PretrainLen,
    Prompt,
    Framework,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::Schemes,
        Ablation::Mask,
        Ablation::Ratio,
        Ablation::Lookback,
        Ablation::Patch,
        Ablation::PretrainLen,
        Ablation::Prompt,
        Ablation::Framework,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Schemes => "schemes",
            Ablation::Mask => "mask",
            Ablation::Ratio => "ratio",
            Ablation::Lookback => "lookback",
            Ablation::Patch => "patch",
            Ablation::PretrainLen => "pretrain-len",
            Ablation::Prompt => "prompt",
            Ablation::Framework => "framework",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

/// One grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub framework: Framework,
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub patch: usize,
    pub pretrain_length: usize,
    pub lookback: usize,
    pub scheme: Scheme,
    pub prompt: PromptStyle,
    pub seed: u64,
}

impl Cell {
    fn base(cfg: &ExperimentConfig, seed: u64) -> Self {
        Cell {
            label: String::new(),
            framework: cfg.model.framework,
            strategy: cfg.mask.strategy,
            ratio: cfg.mask.ratio,
            patch: cfg.window.patch,
            pretrain_length: cfg.training.pretrain_length,
            lookback: cfg.window.history,
            scheme: cfg.scheme.scheme,
            prompt: cfg.scheme.prompt,
            seed,
        }
    }

    pub fn key(&self) -> String {
        let label: String = self
            .label
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect();
        format!("{label}-s{}", self.seed)
    }

    pub fn pretrain_spec(&self) -> PretrainSpec {
        PretrainSpec {
            framework: self.framework,
            strategy: self.strategy,
            ratio: self.ratio,
            patch: self.patch,
            pretrain_length: self.pretrain_length,
            seed: self.seed,
        }
    }
}

/// Grid cells for `ablation`, one per grid value and seed.
pub fn cells(ablation: Ablation, cfg: &ExperimentConfig) -> Vec<Cell> {
    let sw = &cfg.sweep;
    let mut out = Vec::new();
    for seed in cfg.training.seeds() {
        let base = Cell::base(cfg, seed);
        let mut push = |label: String, f: &dyn Fn(&mut Cell)| {
            let mut c = base.clone();
            c.label = label;
            f(&mut c);
            out.push(c);
        };
        match ablation {
            Ablation::Schemes => {
                for s in Scheme::ALL {
                    let prompt = if s == Scheme::PtTuning { cfg.scheme.prompt } else { PromptStyle::None };
                    let prompt = if s == Scheme::PtTuning && prompt == PromptStyle::None {
                        PromptStyle::AddFuture
                    } else {
                        prompt
                    };
                    push(s.short().to_string(), &|c| {
                        c.scheme = s;
                        c.prompt = prompt;
                    });
                }
            }
            Ablation::Mask => {
                for &st in &sw.strategies {
                    push(st.as_str().to_string(), &|c| c.strategy = st);
                }
            }
            Ablation::Ratio => {
                for &r in &sw.ratios {
                    push(format!("ratio={r}"), &|c| c.ratio = r);
                }
            }
            Ablation::Lookback => {
                for &l in &sw.lookbacks {
                    push(format!("lookback={l}"), &|c| c.lookback = l);
                }
            }
            Ablation::Patch => {
                for &p in &sw.patches {
                    push(format!("patch={p}"), &|c| c.patch = p);
                }
            }
            Ablation::PretrainLen => {
                for &l in &sw.pretrain_lengths {
                    push(format!("pretrain_length={l}"), &|c| c.pretrain_length = l);
                }
            }
            Ablation::Prompt => {
                for &pr in &sw.prompts {
                    push(pr.as_str().to_string(), &|c| {
                        c.scheme = Scheme::PtTuning;
                        c.prompt = pr;
                    });
                }
            }
            Ablation::Framework => {
                for &fw in &sw.frameworks {
                    push(fw.as_str().to_string(), &|c| c.framework = fw);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: Cell,
    pub status: CellStatus,
    pub reason: Option<String>,
    pub pretrain_tokens: Option<usize>,
    pub pretrain_first_loss: Option<f64>,
    pub pretrain_last_loss: Option<f64>,
    pub report: Option<EvalReport>,
}

/// Errors that mark a cell as invalid rather than aborting the grid.
fn is_cell_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::DatasetTooSmall { .. })
}

fn check_cell(cell: &Cell, horizons: &[usize]) -> Result<()> {
    if cell.lookback % cell.patch != 0 {
        return Err(Error::Config(format!(
            "look-back {} is not divisible by patch size {}",
            cell.lookback, cell.patch
        )));
    }
    if let Some(h) = horizons.iter().find(|h| *h % cell.patch != 0) {
        return Err(Error::Config(format!("horizon {h} is not divisible by patch size {}", cell.patch)));
    }
    cell.pretrain_spec().effective_length().map(|_| ())
}

pub fn run_cell(cfg: &ExperimentConfig, ds: &TimeSeriesDataset, cell: &Cell, cache_dir: &Path) -> Result<CellOutcome> {
    let attempt = || -> Result<CellOutcome> {
        check_cell(cell, &cfg.sweep.horizons)?;
        let (model, log) = pretrained(cfg, ds, &cell.pretrain_spec(), cache_dir)?;
        let run = run_scheme(cfg, ds, &model, cell.scheme, cell.prompt, cell.lookback, &cfg.sweep.horizons, cell.seed)?;
        Ok(CellOutcome {
            cell: cell.clone(),
            status: CellStatus::Ok,
            reason: None,
            pretrain_tokens: Some(log.effective_length / cell.patch),
            pretrain_first_loss: log.losses.first().copied(),
            pretrain_last_loss: log.losses.last().copied(),
            report: Some(run.report),
        })
    };
    match attempt() {
        Err(e) if is_cell_error(&e) => Ok(CellOutcome {
            cell: cell.clone(),
            status: CellStatus::Skipped,
            reason: Some(e.to_string()),
            pretrain_tokens: None,
            pretrain_first_loss: None,
            pretrain_last_loss: None,
            report: None,
        }),
        other => other,
    }
}

#[derive(Clone, Debug)]
pub struct GridRun {
    pub dir: PathBuf,
    pub outcomes: Vec<CellOutcome>,
    /// Cells computed in this call, as opposed to loaded from disk.
    pub computed: usize,
    pub metrics_csv: PathBuf,
}

/// Runs (or resumes) a grid under `run_dir/<ablation>/` and writes its
/// metrics CSV.
pub fn run_grid(ablation: Ablation, cfg: &ExperimentConfig, ds: &TimeSeriesDataset, run_dir: &Path) -> Result<GridRun> {
    let dir = run_dir.join(ablation.as_str());
    let cache = run_dir.join("pretrained");
    let mut outcomes = Vec::new();
    let mut computed = 0;
    for cell in cells(ablation, cfg) {
        let path = dir.join("cells").join(format!("{}.json", cell.key()));
        if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let stored: CellOutcome = serde_json::from_str(&text)
                .map_err(|e| Error::Checkpoint(format!("unreadable cell {}: {e}", path.display())))?;
            if stored.cell == cell {
                outcomes.push(stored);
                continue;
            }
        }
        let outcome = run_cell(cfg, ds, &cell, &cache)?;
        write_atomic(&path, serde_json::to_string_pretty(&outcome).expect("outcome serializes").as_bytes())?;
        outcomes.push(outcome);
        computed += 1;
    }
    let metrics_csv = dir.join("metrics.csv");
    write_atomic(&metrics_csv, &metrics_csv_bytes(ablation, cfg, &outcomes)?)?;
    if cfg.training.repeats > 1 {
        write_atomic(&dir.join("summary.csv"), &summary_csv_bytes(ablation, cfg, &outcomes)?)?;
    }
    if ablation == Ablation::Schemes {
        write_atomic(&dir.join("table.csv"), &scheme_table_bytes(cfg, &outcomes)?)?;
    }
    Ok(GridRun {
        dir,
        outcomes,
        computed,
        metrics_csv,
    })
}

fn csv_err(e: impl fmt::Display) -> Error {
    Error::Contract(format!("csv output failed: {e}"))
}

pub const METRICS_HEADER: [&str; 21] = [
    "config_hash",
    "seed",
    "ablation",
    "cell",
    "status",
    "reason",
    "framework",
    "strategy",
    "ratio",
    "patch",
    "pretrain_length",
    "pretrain_tokens",
    "lookback",
    "scheme",
    "prompt",
    "horizon",
    "mse",
    "mae",
    "trainable",
    "total",
    "pretrain_last_loss",
];

/// One row per cell and horizon plus an `avg` row per cell; skipped cells
/// get a single row carrying the reason.
pub fn metrics_csv_bytes(ablation: Ablation, cfg: &ExperimentConfig, outcomes: &[CellOutcome]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    let hash = cfg.hash();
    for o in outcomes {
        let c = &o.cell;
        let fixed = [
            hash.clone(),
            c.seed.to_string(),
            ablation.to_string(),
            c.label.clone(),
            match o.status {
                CellStatus::Ok => "ok".into(),
                CellStatus::Skipped => "skipped".into(),
            },
            o.reason.clone().unwrap_or_default(),
            c.framework.to_string(),
            c.strategy.to_string(),
            c.ratio.to_string(),
            c.patch.to_string(),
            c.pretrain_length.to_string(),
            o.pretrain_tokens.map(|x| x.to_string()).unwrap_or_default(),
            c.lookback.to_string(),
            c.scheme.to_string(),
            c.prompt.to_string(),
        ];
        let last_loss = o.pretrain_last_loss.map(|x| x.to_string()).unwrap_or_default();
        match &o.report {
            None => {
                let mut row = fixed.to_vec();
                row.extend(["", "", "", "", "", ""].map(String::from));
                w.write_record(&row).map_err(csv_err)?;
            }
            Some(r) => {
                for h in &r.horizons {
                    let mut row = fixed.to_vec();
                    row.extend([
                        h.horizon.to_string(),
                        h.mse.to_string(),
                        h.mae.to_string(),
                        h.trainable.to_string(),
                        r.total.to_string(),
                        last_loss.clone(),
                    ]);
                    w.write_record(&row).map_err(csv_err)?;
                }
                let mut row = fixed.to_vec();
                row.extend([
                    "avg".into(),
                    r.avg_mse.to_string(),
                    r.avg_mae.to_string(),
                    r.trainable.to_string(),
                    r.total.to_string(),
                    last_loss,
                ]);
                w.write_record(&row).map_err(csv_err)?;
            }
        }
    }
    w.into_inner().map_err(csv_err)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// Mean and population std across seeds, per cell label and horizon.
pub fn summary_csv_bytes(ablation: Ablation, cfg: &ExperimentConfig, outcomes: &[CellOutcome]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config_hash", "ablation", "cell", "horizon", "runs", "mse_mean", "mse_std", "mae_mean", "mae_std"])
        .map_err(csv_err)?;
    let mut labels: Vec<&str> = Vec::new();
    for o in outcomes {
        if !labels.contains(&o.cell.label.as_str()) {
            labels.push(&o.cell.label);
        }
    }
    for label in labels {
        let reports: Vec<&EvalReport> = outcomes
            .iter()
            .filter(|o| o.cell.label == label)
            .filter_map(|o| o.report.as_ref())
            .collect();
        let Some(first) = reports.first() else { continue };
        let mut keys: Vec<(String, Vec<f64>, Vec<f64>)> = first
            .horizons
            .iter()
            .enumerate()
            .map(|(i, h)| {
                (
                    h.horizon.to_string(),
                    reports.iter().map(|r| r.horizons[i].mse).collect(),
                    reports.iter().map(|r| r.horizons[i].mae).collect(),
                )
            })
            .collect();
        keys.push((
            "avg".into(),
            reports.iter().map(|r| r.avg_mse).collect(),
            reports.iter().map(|r| r.avg_mae).collect(),
        ));
        for (h, mse, mae) in keys {
            let (mm, ms) = mean_std(&mse);
            let (am, as_) = mean_std(&mae);
            w.write_record([
                cfg.hash(),
                ablation.to_string(),
                label.to_string(),
                h,
                reports.len().to_string(),
                mm.to_string(),
                ms.to_string(),
                am.to_string(),
                as_.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(csv_err)
}

/// Scheme-by-horizon table: one row per scheme and seed, MSE and MAE
/// columns for every horizon and their averages.
pub fn scheme_table_bytes(cfg: &ExperimentConfig, outcomes: &[CellOutcome]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["config_hash".to_string(), "seed".into(), "scheme".into()];
    for h in &cfg.sweep.horizons {
        header.push(format!("mse_{h}"));
        header.push(format!("mae_{h}"));
    }
    header.extend(["mse_avg".into(), "mae_avg".into(), "trainable".into()]);
    w.write_record(&header).map_err(csv_err)?;
    for o in outcomes {
        let mut row = vec![cfg.hash(), o.cell.seed.to_string(), o.cell.scheme.short().to_string()];
        match &o.report {
            Some(r) => {
                for h in &r.horizons {
                    row.push(h.mse.to_string());
                    row.push(h.mae.to_string());
                }
                row.extend([r.avg_mse.to_string(), r.avg_mae.to_string(), r.trainable.to_string()]);
            }
            None => row.extend(std::iter::repeat_n(String::new(), header.len() - 3)),
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}
