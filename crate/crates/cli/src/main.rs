//! `crossmae` command line: pretraining, tuning, evaluation, ablation grids
//! and reports. Every command prints one JSON summary line on success; a
//! failure prints `{"error": <kind>, "message": ...}` and exits nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crossmae::harness::pipeline::{scheme_spec, windows};
use crossmae::harness::{
    dump_features, efficiency_report, emit_forecast_plots, evaluate, load_dataset, pretrained, run_dir, run_grid,
    write_atomic, write_attention_csv, write_val_curve, Ablation, EvalReport, ExperimentConfig, ForecastSeries,
    PretrainSpec, DATA_ROOT_ENV,
};
use crossmae::model::{Model, PromptStyle};
use crossmae::series::{Split, TimeSeriesDataset, WindowSample};
use crossmae::tuning::{tune, Scheme};
use crossmae::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "crossmae", version, about = "Masked-autoencoder pretraining and prompt tuning for forecasting")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML experiment config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the small sinusoid configuration instead of the defaults.
    #[arg(long, global = true, conflicts_with = "config")]
    toy: bool,
    /// Output root; each config writes under `<out>/<config hash>/`.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Directory that relative dataset paths resolve against.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    /// Overrides `training.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain (or reuse) the checkpoint described by the config.
    Pretrain,
    /// Tune one scheme on a pretrained checkpoint.
    Tune {
        #[arg(long)]
        scheme: Scheme,
        /// Prompt style for `pt`; defaults to the config's `scheme.prompt`.
        #[arg(long)]
        prompt: Option<PromptStyle>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Pretrained checkpoint; pretrains from the config when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Forecast the first test window of every channel and write plot data.
    Forecast {
        /// One or more checkpoints, each plotted as its own series.
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Also export attention weights of the first checkpoint.
        #[arg(long)]
        attention: bool,
    },
    /// Run (or resume) an ablation grid.
    Ablate {
        /// schemes | mask | ratio | lookback | patch | pretrain-len | prompt | framework
        ablation: Ablation,
    },
    /// Write encoded visible tokens and the mask token as CSV.
    DumpFeatures {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of test windows to encode.
        #[arg(long, default_value_t = 64)]
        windows: usize,
    },
    /// Parameter counts and median seconds per training iteration per scheme.
    ReportEfficiency {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 50)]
        iterations: usize,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    dir: PathBuf,
    data_root: Option<PathBuf>,
}

impl Ctx {
    fn new(g: &Global) -> Result<Self> {
        let mut cfg = match (&g.config, g.toy) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, true) => ExperimentConfig::toy(),
            (None, false) => ExperimentConfig::default(),
        };
        if let Some(s) = g.seed {
            cfg.training.seed = s;
        }
        cfg.validate()?;
        let dir = run_dir(&g.out, &cfg);
        write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
        Ok(Ctx {
            cfg,
            dir,
            data_root: g.data_root.clone(),
        })
    }

    fn dataset(&self) -> Result<TimeSeriesDataset> {
        load_dataset(&self.cfg, self.data_root.as_deref())
    }

    fn horizon(&self, h: Option<usize>) -> usize {
        h.unwrap_or(self.cfg.window.horizon)
    }

    fn test_windows(&self, ds: &TimeSeriesDataset, model: &Model, horizon: usize) -> Result<Vec<WindowSample>> {
        let t = &self.cfg.training;
        windows(&self.cfg, ds, Split::Test, self.cfg.window.history, horizon, model.patch(), t.eval_stride)
    }

    /// The given checkpoint, or the config's pretrained one.
    fn model(&self, ds: &TimeSeriesDataset, checkpoint: Option<&Path>) -> Result<Model> {
        match checkpoint {
            Some(p) => Ok(Model::load(p)?.0),
            None => {
                let spec = PretrainSpec::from_config(&self.cfg, self.cfg.training.seed);
                Ok(pretrained(&self.cfg, ds, &spec, &self.dir.join("pretrained"))?.0)
            }
        }
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Contract(format!("csv output failed: {e}"))
}

fn forecasts_csv(test: &[WindowSample], predictions: &[Vec<f64>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["window", "channel", "origin", "t", "target", "prediction"]).map_err(csv_err)?;
    for (i, (win, pred)) in test.iter().zip(predictions).enumerate() {
        for (t, (y, p)) in win.future.iter().zip(pred).enumerate() {
            w.write_record([
                i.to_string(),
                win.channel.to_string(),
                win.origin.to_string(),
                t.to_string(),
                y.to_string(),
                p.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(csv_err)
}

fn run(cli: Cli) -> Result<Value> {
    let ctx = Ctx::new(&cli.global)?;
    let cfg = &ctx.cfg;
    let seed = cfg.training.seed;
    match cli.command {
        Command::Pretrain => {
            let ds = ctx.dataset()?;
            let spec = PretrainSpec::from_config(cfg, seed);
            let cache = ctx.dir.join("pretrained");
            let (_, log) = pretrained(cfg, &ds, &spec, &cache)?;
            Ok(json!({
                "checkpoint": cache.join(format!("{}.ckpt", spec.key(cfg))),
                "effective_length": log.effective_length,
                "windows": log.windows,
                "first_loss": log.losses.first(),
                "last_loss": log.losses.last(),
            }))
        }
        Command::Tune {
            scheme,
            prompt,
            horizon,
            checkpoint,
        } => {
            let ds = ctx.dataset()?;
            let h = ctx.horizon(horizon);
            let mut model = ctx.model(&ds, checkpoint.as_deref())?;
            let mut spec = scheme_spec(cfg, scheme, cfg.scheme.prompt, h, seed);
            if let Some(p) = prompt {
                spec.prompt_style = p;
            }
            spec.validate()?;
            let (lh, p, stride) = (cfg.window.history, model.patch(), cfg.training.tune_stride);
            let train = windows(cfg, &ds, Split::Train, lh, h, p, stride)?;
            let val = windows(cfg, &ds, Split::Val, lh, h, p, stride)?;
            let report = tune(&mut model, &spec, &train, &val)?;
            let name = format!("{}-{}-h{h}", scheme.short(), spec.prompt_style.as_str());
            let ckpt = ctx.dir.join("tuned").join(format!("{name}.ckpt"));
            let curve = ctx.dir.join("tuned").join(format!("{name}.val.csv"));
            model.save(&ckpt, &cfg.hash())?;
            write_val_curve(&report, h, &curve)?;
            Ok(json!({
                "checkpoint": ckpt,
                "val_curve": curve,
                "best_epoch": report.best_epoch,
                "steps": report.steps,
                "trainable": report.trainable,
            }))
        }
        Command::Evaluate { checkpoint, horizon } => {
            let ds = ctx.dataset()?;
            let h = ctx.horizon(horizon);
            let model = Model::load(&checkpoint)?.0;
            let test = ctx.test_windows(&ds, &model, h)?;
            let (m, predictions) = evaluate(&model, &test, h, model.head.is_some())?;
            let name = stem(&checkpoint);
            let report = EvalReport::new(&name, vec![m], model.store.total_count(), seed, &cfg.hash());
            let out = ctx.dir.join("eval");
            write_atomic(&out.join(format!("{name}-h{h}.forecasts.csv")), &forecasts_csv(&test, &predictions)?)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            write_atomic(&out.join(format!("{name}-h{h}.json")), text.as_bytes())?;
            Ok(serde_json::to_value(&report).expect("report serializes"))
        }
        Command::Forecast {
            checkpoint,
            horizon,
            attention,
        } => {
            let ds = ctx.dataset()?;
            let h = ctx.horizon(horizon);
            let out = ctx.dir.join("forecast");
            let mut series = Vec::new();
            for (i, path) in checkpoint.iter().enumerate() {
                let model = Model::load(path)?.0;
                let test = ctx.test_windows(&ds, &model, h)?;
                let mut firsts: Vec<WindowSample> = Vec::new();
                for w in test {
                    if !firsts.iter().any(|f| f.channel == w.channel) {
                        firsts.push(w);
                    }
                }
                let preds = model.forecast(&firsts, h, model.head.is_some())?;
                for (w, p) in firsts.iter().zip(preds) {
                    series.push(ForecastSeries {
                        scheme: stem(path),
                        channel: w.channel,
                        target: w.future.clone(),
                        prediction: p,
                    });
                }
                if attention && i == 0 {
                    if let Some(w) = firsts.first() {
                        let maps = model.attention_maps(w, h)?;
                        write_attention_csv(&maps, &out.join("attention.csv"))?;
                    }
                }
            }
            let (csv, svgs) = emit_forecast_plots(&series, &out)?;
            Ok(json!({ "csv": csv, "svg": svgs }))
        }
        Command::Ablate { ablation } => {
            let ds = ctx.dataset()?;
            let grid = run_grid(ablation, cfg, &ds, &ctx.dir)?;
            let skipped: Vec<Value> = grid
                .outcomes
                .iter()
                .filter(|o| o.reason.is_some())
                .map(|o| json!({ "cell": o.cell.label, "reason": o.reason }))
                .collect();
            Ok(json!({
                "dir": grid.dir,
                "metrics_csv": grid.metrics_csv,
                "cells": grid.outcomes.len(),
                "computed": grid.computed,
                "skipped": skipped,
            }))
        }
        Command::DumpFeatures { checkpoint, windows: cap } => {
            let ds = ctx.dataset()?;
            let model = ctx.model(&ds, checkpoint.as_deref())?;
            let h = model.patch();
            let mut test = ctx.test_windows(&ds, &model, h)?;
            test.truncate(cap.max(1));
            let path = ctx.dir.join("features.csv");
            let r = dump_features(&model, &test, cfg.mask.strategy, cfg.mask.ratio, seed, &path)?;
            Ok(json!({ "csv": path, "rows": r.rows, "centroid_ratio": r.centroid_ratio }))
        }
        Command::ReportEfficiency {
            checkpoint,
            horizon,
            warmup,
            iterations,
        } => {
            let ds = ctx.dataset()?;
            let h = ctx.horizon(horizon);
            let model = match &checkpoint {
                Some(p) => Model::load(p)?.0,
                None => Model::new(cfg.model_config(), seed)?,
            };
            let (lh, p) = (cfg.window.history, model.patch());
            let train = windows(cfg, &ds, Split::Train, lh, h, p, cfg.training.tune_stride)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "scheme",
                "trainable",
                "total",
                "param_bytes",
                "trainable_bytes",
                "optimizer_bytes",
                "seconds_per_iter",
                "horizon",
                "seed",
                "config_hash",
            ])
            .map_err(csv_err)?;
            let mut rows = Vec::new();
            for scheme in Scheme::ALL {
                let spec = scheme_spec(cfg, scheme, cfg.scheme.prompt, h, seed);
                let r = efficiency_report(&model, &spec, &train, warmup, iterations)?;
                w.write_record([
                    r.scheme.clone(),
                    r.trainable.to_string(),
                    r.total.to_string(),
                    r.param_bytes.to_string(),
                    r.trainable_bytes.to_string(),
                    r.optimizer_bytes.to_string(),
                    r.seconds_per_iter.to_string(),
                    h.to_string(),
                    seed.to_string(),
                    cfg.hash(),
                ])
                .map_err(csv_err)?;
                rows.push(r);
            }
            let path = ctx.dir.join("efficiency.csv");
            write_atomic(&path, &w.into_inner().map_err(csv_err)?)?;
            Ok(json!({ "csv": path, "schemes": rows }))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", json!({ "error": "usage", "message": message.trim() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
