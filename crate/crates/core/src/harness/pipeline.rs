//! Pretrain, tune and evaluate, with pretrained checkpoints reused across runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::eval::{evaluate, EvalReport};
use crate::error::{Error, Result};
use crate::masking::{expected_masked, segment_length, MaskStrategy};
use crate::model::{Framework, Model, PretrainOptions, PromptStyle};
use crate::optim::AdamState;
use crate::series::{ingest_csv, make_windows, sinusoid_dataset, Split, TimeSeriesDataset, WindowConfig, WindowSample};
use crate::tuning::{tune, Scheme, SchemeSpec, TuneReport};

/// Environment variable naming the directory that relative dataset paths
/// are resolved against.
pub const DATA_ROOT_ENV: &str = "CROSSMAE_DATA_ROOT";

pub fn load_dataset(cfg: &ExperimentConfig, data_root: Option<&Path>) -> Result<TimeSeriesDataset> {
    let ratios = cfg.split_ratios();
    match &cfg.dataset.path {
        None if cfg.dataset.name == "sinusoid" => sinusoid_dataset(cfg.dataset.points, cfg.dataset.period, ratios),
        None => Err(Error::Config(format!(
            "dataset `{}` needs dataset.path",
            cfg.dataset.name
        ))),
        Some(p) => {
            let p = PathBuf::from(p);
            let full = match data_root {
                Some(root) if p.is_relative() => root.join(p),
                _ => p,
            };
            let mut ds = ingest_csv(&full, ratios)?;
            ds.name = cfg.dataset.name.clone();
            Ok(ds)
        }
    }
}

/// At most `cap` windows, spread evenly over the input.
pub fn subsample(windows: Vec<WindowSample>, cap: Option<usize>) -> Vec<WindowSample> {
    match cap {
        Some(cap) if cap > 0 && windows.len() > cap => {
            let n = windows.len();
            (0..cap).map(|i| windows[i * n / cap].clone()).collect()
        }
        _ => windows,
    }
}

pub fn windows(
    cfg: &ExperimentConfig,
    ds: &TimeSeriesDataset,
    split: Split,
    history: usize,
    horizon: usize,
    patch: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    let wc = WindowConfig {
        history,
        horizon,
        patch,
        stride,
    };
    Ok(subsample(make_windows(ds, split, &wc)?, cfg.training.max_windows))
}

/// Everything that determines a pretrained checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub framework: Framework,
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub patch: usize,
    pub pretrain_length: usize,
    pub seed: u64,
}

impl PretrainSpec {
    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Self {
        PretrainSpec {
            framework: cfg.model.framework,
            strategy: cfg.mask.strategy,
            ratio: cfg.mask.ratio,
            patch: cfg.window.patch,
            pretrain_length: cfg.training.pretrain_length,
            seed,
        }
    }

    /// Cache key covering this spec plus the dataset, model and training
    /// blocks of `cfg`.
    pub fn key(&self, cfg: &ExperimentConfig) -> String {
        let text = serde_json::json!({
            "spec": self,
            "dataset": cfg.dataset,
            "model": cfg.model,
            "training": cfg.training,
        })
        .to_string();
        hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
    }

    /// Pretraining window length actually used: the configured length cut
    /// down to whole patches and, for segment-based strategies, whole mask
    /// segments.
    pub fn effective_length(&self) -> Result<usize> {
        let p = self.patch;
        if p == 0 {
            return Err(Error::Config("patch size must be positive".into()));
        }
        let mut n = self.pretrain_length / p;
        if matches!(self.strategy, MaskStrategy::Isometric | MaskStrategy::Periodic) {
            let s = segment_length(self.ratio)?;
            n -= n % s;
        }
        if n == 0 {
            return Err(Error::Config(format!(
                "pretraining length {} leaves no whole mask segment at patch {p}, ratio {}",
                self.pretrain_length, self.ratio
            )));
        }
        expected_masked(self.strategy, n, self.ratio).and_then(|k| {
            if k == 0 || k >= n {
                Err(Error::Config(format!(
                    "ratio {} over {n} tokens masks {k}, leaving no masked or no visible token",
                    self.ratio
                )))
            } else {
                Ok(n * p)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub spec: PretrainSpec,
    pub effective_length: usize,
    pub windows: usize,
    pub losses: Vec<f64>,
}

pub fn pretrain(cfg: &ExperimentConfig, ds: &TimeSeriesDataset, spec: &PretrainSpec) -> Result<(Model, PretrainLog)> {
    let len = spec.effective_length()?;
    let mut mc = cfg.model_config();
    mc.patch = spec.patch;
    mc.framework = spec.framework;
    let mut model = Model::new(mc, spec.seed)?;
    let train = windows(cfg, ds, Split::Train, len, 0, spec.patch, cfg.training.pretrain_stride)?;
    let opts = PretrainOptions {
        strategy: spec.strategy,
        ratio: spec.ratio,
        batch_size: cfg.training.batch_size,
        seed: spec.seed,
        dropout: cfg.training.dropout,
    };
    let mut adam = AdamState::with_lr(cfg.training.lr);
    let losses = match cfg.training.pretrain_steps {
        Some(steps) => model.pretrain_steps(&train, &opts, &mut adam, steps)?,
        None => (0..cfg.training.pretrain_epochs as u64)
            .map(|e| model.pretrain_epoch(&train, &opts, &mut adam, e))
            .collect::<Result<_>>()?,
    };
    let log = PretrainLog {
        spec: spec.clone(),
        effective_length: len,
        windows: train.len(),
        losses,
    };
    Ok((model, log))
}

/// Loads the checkpoint for `spec` from `cache_dir` or trains and stores it.
pub fn pretrained(cfg: &ExperimentConfig, ds: &TimeSeriesDataset, spec: &PretrainSpec, cache_dir: &Path) -> Result<(Model, PretrainLog)> {
    let key = spec.key(cfg);
    let ckpt = cache_dir.join(format!("{key}.ckpt"));
    let log_path = cache_dir.join(format!("{key}.json"));
    if ckpt.exists() && log_path.exists() {
        let (model, _) = Model::load(&ckpt)?;
        let text = std::fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let log = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("bad pretraining log: {e}")))?;
        return Ok((model, log));
    }
    let (model, log) = pretrain(cfg, ds, spec)?;
    model.save(&ckpt, &cfg.hash())?;
    super::write_atomic(&log_path, serde_json::to_string_pretty(&log).expect("log serializes").as_bytes())?;
    Ok((model, log))
}

pub fn scheme_spec(cfg: &ExperimentConfig, scheme: Scheme, prompt: PromptStyle, horizon: usize, seed: u64) -> SchemeSpec {
    let t = &cfg.training;
    SchemeSpec {
        scheme,
        prompt_style: if scheme == Scheme::PtTuning { prompt } else { PromptStyle::None },
        horizon,
        epochs: if scheme == Scheme::DirectForecast { 0 } else { t.finetune_epochs },
        lr: t.lr,
        batch_size: t.batch_size,
        patience: t.patience,
        concat_rows: cfg.scheme.concat_rows,
        max_steps: t.tune_steps,
        seed,
        dropout: t.dropout,
    }
}

/// Forecasts of one horizon on the test windows.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonForecasts {
    pub horizon: usize,
    pub windows: Vec<WindowSample>,
    pub predictions: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct SchemeRun {
    pub report: EvalReport,
    pub tuning: Vec<TuneReport>,
    pub forecasts: Vec<HorizonForecasts>,
    /// Tuned model of the last horizon.
    pub model: Model,
}

/// Tunes a copy of `pretrained` per horizon and evaluates it on the test
/// split.
#[allow(clippy::too_many_arguments)]
pub fn run_scheme(
    cfg: &ExperimentConfig,
    ds: &TimeSeriesDataset,
    pretrained: &Model,
    scheme: Scheme,
    prompt: PromptStyle,
    lookback: usize,
    horizons: &[usize],
    seed: u64,
) -> Result<SchemeRun> {
    let p = pretrained.patch();
    let t = &cfg.training;
    let mut metrics = Vec::new();
    let mut tuning = Vec::new();
    let mut forecasts = Vec::new();
    let mut total = 0;
    let mut last = None;
    for &h in horizons {
        let spec = scheme_spec(cfg, scheme, prompt, h, seed);
        let mut model = pretrained.clone();
        let train = windows(cfg, ds, Split::Train, lookback, h, p, t.tune_stride)?;
        let val = windows(cfg, ds, Split::Val, lookback, h, p, t.tune_stride)?;
        let test = windows(cfg, ds, Split::Test, lookback, h, p, t.eval_stride)?;
        tuning.push(tune(&mut model, &spec, &train, &val)?);
        let (m, predictions) = evaluate(&model, &test, h, scheme.uses_head())?;
        metrics.push(m);
        total = total.max(model.store.total_count());
        forecasts.push(HorizonForecasts {
            horizon: h,
            windows: test,
            predictions,
        });
        last = Some(model);
    }
    let model = last.ok_or_else(|| Error::Config("no horizons to evaluate".into()))?;
    Ok(SchemeRun {
        report: EvalReport::new(scheme.as_str(), metrics, total, seed, &cfg.hash()),
        tuning,
        forecasts,
        model,
    })
}
