//! Efficiency summaries, feature dumps, plot data and attention exports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::error::{Error, Result};
use crate::masking::{plan_batch, MaskStrategy};
use crate::model::{AttentionMap, Model, PatchBatch};
use crate::optim::AdamState;
use crate::series::{instance_normalize, WindowSample};
use crate::tensor::Tape;
use crate::tuning::{forecast_loss, prepare, SchemeSpec, TuneReport};

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Contract(format!("csv output failed: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub scheme: String,
    pub trainable: usize,
    pub total: usize,
    /// Bytes of all parameters, of the trainable ones, and of the Adam
    /// moments kept for them.
    pub param_bytes: usize,
    pub trainable_bytes: usize,
    pub optimizer_bytes: usize,
    pub warmup: usize,
    pub iterations: usize,
    /// Median wall time of one training iteration.
    pub seconds_per_iter: f64,
}

/// Parameter counts of a prepared scheme plus the median time of a training
/// iteration on `windows` (one batch), after `warmup` untimed iterations.
pub fn efficiency_report(
    model: &Model,
    spec: &SchemeSpec,
    windows: &[WindowSample],
    warmup: usize,
    iterations: usize,
) -> Result<EfficiencyReport> {
    let iterations = iterations.max(1);
    let history = windows
        .first()
        .map(|w| w.history.len())
        .ok_or_else(|| Error::Dataset("no windows to time".into()))?;
    let mut m = model.clone();
    prepare(&mut m, spec, history)?;
    let refs: Vec<&WindowSample> = windows.iter().take(spec.batch_size).collect();
    let mut adam = AdamState::with_lr(spec.lr);
    let trains = m.store.trainable_count() > 0;
    let mut times = Vec::with_capacity(iterations);
    for i in 0..warmup + iterations {
        let start = Instant::now();
        forecast_loss(&mut m, &refs, spec.horizon, spec.scheme.uses_head(), None, trains)?;
        if trains {
            m.store.adam_step(&mut adam)?;
        }
        if i >= warmup {
            times.push(start.elapsed().as_secs_f64());
        }
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 {
        times[n / 2]
    } else {
        (times[n / 2 - 1] + times[n / 2]) / 2.0
    };
    let trainable = m.store.trainable_count();
    let total = m.store.total_count();
    Ok(EfficiencyReport {
        scheme: spec.scheme.to_string(),
        trainable,
        total,
        param_bytes: total * 8,
        trainable_bytes: trainable * 8,
        optimizer_bytes: trainable * 16,
        warmup,
        iterations,
        seconds_per_iter: median,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDump {
    pub rows: usize,
    /// `|M - centroid| / median |token - centroid|` over the encoded tokens.
    pub centroid_ratio: f64,
}

/// Writes every encoded visible token (under the given masking) and the
/// mask token as CSV rows.
pub fn dump_features(
    model: &Model,
    windows: &[WindowSample],
    strategy: MaskStrategy,
    ratio: f64,
    seed: u64,
    path: &Path,
) -> Result<FeatureDump> {
    if windows.is_empty() {
        return Err(Error::Dataset("no windows to encode".into()));
    }
    let d = model.d();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["kind".to_string(), "window".into(), "channel".into(), "origin".into(), "position".into()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_err)?;
    let mut tokens: Vec<Vec<f64>> = Vec::new();
    for (chunk_no, chunk) in windows.chunks(64).enumerate() {
        let norm: Vec<WindowSample> = chunk.iter().map(instance_normalize).collect();
        let hist: Vec<&[f64]> = norm.iter().map(|w| w.history.as_slice()).collect();
        let batch = PatchBatch::from_series(&hist, model.patch())?;
        let plans = plan_batch(strategy, batch.n, ratio, seed.wrapping_add(chunk_no as u64), batch.batch)?;
        let mut tape = Tape::new();
        let mut f = model.fwd(&mut tape);
        let x = batch.constant(f.tape)?;
        let t = model.embed(&mut f, x, 0)?;
        let h = model.encode_visible(&mut f, t, &plans)?;
        let values = tape.value(h);
        let k = plans[0].visible.len();
        for (b, plan) in plans.iter().enumerate() {
            for (j, &pos) in plan.visible.iter().enumerate() {
                let row = &values[(b * k + j) * d..(b * k + j + 1) * d];
                let win = &chunk[b];
                let mut rec = vec![
                    "token".to_string(),
                    (chunk_no * 64 + b).to_string(),
                    win.channel.to_string(),
                    win.origin.to_string(),
                    pos.to_string(),
                ];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(csv_err)?;
                tokens.push(row.to_vec());
            }
        }
    }
    let mask = model.store.tensor(model.mask_token).data().to_vec();
    let mut rec = vec!["mask_token".to_string(), String::new(), String::new(), String::new(), String::new()];
    rec.extend(mask.iter().map(|v| v.to_string()));
    w.write_record(&rec).map_err(csv_err)?;
    write_atomic(path, &w.into_inner().map_err(csv_err)?)?;
    Ok(FeatureDump {
        rows: tokens.len() + 1,
        centroid_ratio: centroid_ratio(&tokens, &mask),
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `|point - centroid| / median |token - centroid|`; zero spread gives 0
/// when the point sits on the centroid and infinity otherwise.
pub fn centroid_ratio(tokens: &[Vec<f64>], point: &[f64]) -> f64 {
    let d = point.len();
    let n = tokens.len().max(1) as f64;
    let centroid: Vec<f64> = (0..d).map(|j| tokens.iter().map(|t| t[j]).sum::<f64>() / n).collect();
    let mut spread: Vec<f64> = tokens.iter().map(|t| dist(t, &centroid)).collect();
    spread.sort_by(f64::total_cmp);
    let median = match spread.len() {
        0 => 0.0,
        m if m % 2 == 1 => spread[m / 2],
        m => (spread[m / 2 - 1] + spread[m / 2]) / 2.0,
    };
    let off = dist(point, &centroid);
    if median > 0.0 {
        off / median
    } else if off == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Forecast of one scheme for one channel, aligned with its target.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastSeries {
    pub scheme: String,
    pub channel: usize,
    pub target: Vec<f64>,
    pub prediction: Vec<f64>,
}

/// Writes `forecasts.csv` (long format: t, target, prediction, channel,
/// scheme) and one SVG line chart per channel into `dir`.
pub fn emit_forecast_plots(series: &[ForecastSeries], dir: &Path) -> Result<(PathBuf, Vec<PathBuf>)> {
    for s in series {
        if s.target.len() != s.prediction.len() {
            return Err(Error::Contract(format!(
                "{} channel {}: {} predictions for {} targets",
                s.scheme,
                s.channel,
                s.prediction.len(),
                s.target.len()
            )));
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["t", "target", "prediction", "channel", "scheme"]).map_err(csv_err)?;
    for s in series {
        for (t, (y, p)) in s.target.iter().zip(&s.prediction).enumerate() {
            w.write_record([t.to_string(), y.to_string(), p.to_string(), s.channel.to_string(), s.scheme.clone()])
                .map_err(csv_err)?;
        }
    }
    let csv_path = dir.join("forecasts.csv");
    write_atomic(&csv_path, &w.into_inner().map_err(csv_err)?)?;
    let mut channels: Vec<usize> = series.iter().map(|s| s.channel).collect();
    channels.sort_unstable();
    channels.dedup();
    let mut svgs = Vec::new();
    for c in channels {
        let group: Vec<&ForecastSeries> = series.iter().filter(|s| s.channel == c).collect();
        let path = dir.join(format!("forecast_channel_{c}.svg"));
        write_atomic(&path, line_chart(&group).as_bytes())?;
        svgs.push(path);
    }
    Ok((csv_path, svgs))
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn line_chart(group: &[&ForecastSeries]) -> String {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let mut lines: Vec<(String, &[f64])> = Vec::new();
    if let Some(first) = group.first() {
        lines.push(("target".into(), first.target.as_slice()));
    }
    for s in group {
        lines.push((s.scheme.clone(), s.prediction.as_slice()));
    }
    let all = lines.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0) };
    let len = lines.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (len - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (k, (name, vals)) in lines.iter().enumerate() {
        let color = if k == 0 { "#000000" } else { PALETTE[(k - 1) % PALETTE.len()] };
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.2},{:.2}", x(i), y(*v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
            pts.join(" "),
            escape(name)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            pad + 90.0 * k as f64,
            pad / 2.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Long-format attention weights: layer, head, query, key, weight.
pub fn write_attention_csv(maps: &[AttentionMap], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "head", "query", "key", "weight"]).map_err(csv_err)?;
    for m in maps {
        for q in 0..m.queries {
            for k in 0..m.keys {
                w.write_record([
                    m.layer.clone(),
                    m.head.to_string(),
                    q.to_string(),
                    k.to_string(),
                    m.data[q * m.keys + k].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    write_atomic(path, &w.into_inner().map_err(csv_err)?)
}

/// Per-epoch validation curve of one tuning run.
pub fn write_val_curve(report: &TuneReport, horizon: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scheme", "horizon", "epoch", "steps", "train_loss", "val_mse", "best"]).map_err(csv_err)?;
    for e in &report.curve {
        w.write_record([
            report.scheme.to_string(),
            horizon.to_string(),
            e.epoch.to_string(),
            e.steps.to_string(),
            if e.train_loss.is_nan() { String::new() } else { e.train_loss.to_string() },
            e.val_mse.to_string(),
            (e.epoch == report.best_epoch).to_string(),
        ])
        .map_err(csv_err)?;
    }
    write_atomic(path, &w.into_inner().map_err(csv_err)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Framework, ModelConfig};
    use crate::series::{make_windows, sinusoid_dataset, Split, SplitRatios, WindowConfig};
    use crate::tuning::Scheme;

    fn model() -> Model {
        Model::new(
            ModelConfig {
                n_encoder_layers: 1,
                n_decoder_layers: 1,
                patch: 4,
                model_dim: 8,
                n_heads: 2,
                ffn_dim: 16,
                dropout: 0.0,
                framework: Framework::CrossMae,
            },
            0,
        )
        .unwrap()
    }

    fn windows() -> Vec<WindowSample> {
        let ds = sinusoid_dataset(300, 16.0, SplitRatios::ETT).unwrap();
        make_windows(&ds, Split::Test, &WindowConfig { history: 16, horizon: 8, patch: 4, stride: 4 }).unwrap()
    }

    #[test]
    fn efficiency_counts() {
        let m = model();
        let r = efficiency_report(&m, &SchemeSpec::new(Scheme::PtTuning, 8), &windows(), 1, 3).unwrap();
        assert_eq!((r.trainable, r.total), (2 * 8, m.store.total_count() + 16));
        assert!(r.seconds_per_iter >= 0.0);
        let r = efficiency_report(&m, &SchemeSpec::new(Scheme::DirectForecast, 8), &windows(), 0, 1).unwrap();
        assert_eq!(r.trainable, 0);
        assert_eq!(r.total, m.store.iter().map(|p| p.tensor.shape().iter().product::<usize>()).sum::<usize>());
    }

    #[test]
    fn feature_rows_and_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let ws = windows();
        let path = dir.path().join("f.csv");
        let r = dump_features(&model(), &ws, MaskStrategy::Isometric, 0.75, 0, &path).unwrap();
        assert_eq!(r.rows, ws.len() + 1);
        assert!(r.centroid_ratio.is_finite() && r.centroid_ratio >= 0.0);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), r.rows + 1);
        assert!(text.lines().last().unwrap().starts_with("mask_token"));
    }

    #[test]
    fn centroid_ratio_examples() {
        let t = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        assert_eq!(centroid_ratio(&t, &[0.0, 0.0]), 0.0);
        assert!((centroid_ratio(&t, &[2.0, 0.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn plots_are_long_csv_and_valid_svg() {
        let dir = tempfile::tempdir().unwrap();
        let series: Vec<ForecastSeries> = ["df", "pt<&>"]
            .iter()
            .flat_map(|s| {
                (0..2).map(move |c| ForecastSeries {
                    scheme: s.to_string(),
                    channel: c,
                    target: vec![0.0, 1.0, 0.5],
                    prediction: vec![0.1, 0.9, 0.123456789012345],
                })
            })
            .collect();
        let (csv_path, svgs) = emit_forecast_plots(&series, dir.path()).unwrap();
        let mut r = csv::Reader::from_path(&csv_path).unwrap();
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 3 * 2 * 2);
        assert_eq!(rows[2][2].parse::<f64>().unwrap().to_bits(), 0.123456789012345f64.to_bits());
        assert_eq!(svgs.len(), 2);
        for p in svgs {
            let text = std::fs::read_to_string(p).unwrap();
            let doc = roxmltree::Document::parse(&text).unwrap();
            assert_eq!(doc.root_element().tag_name().name(), "svg");
        }
        let bad = ForecastSeries {
            scheme: "x".into(),
            channel: 0,
            target: vec![1.0],
            prediction: vec![],
        };
        assert!(matches!(emit_forecast_plots(&[bad], dir.path()), Err(Error::Contract(_))));
    }

    #[test]
    fn attention_csv_has_every_weight() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let maps = m.attention_maps(&windows()[0], 8).unwrap();
        let path = dir.path().join("a.csv");
        write_attention_csv(&maps, &path).unwrap();
        let expected: usize = maps.iter().map(|a| a.queries * a.keys).sum();
        assert_eq!(std::fs::read_to_string(path).unwrap().lines().count(), expected + 1);
    }
}
