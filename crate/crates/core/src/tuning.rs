//! Downstream forecasting schemes on top of a pretrained model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, PatchBatch, PromptStyle};
use crate::optim::AdamState;
use crate::params::{ParamGroup, ParamStore};
use crate::series::{instance_normalize, pe_table, shuffled_order, WindowSample};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    FineTune,
    DirectForecast,
    LinearProbe,
    MaskTokenTune,
    PtTuning,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::FineTune,
        Scheme::DirectForecast,
        Scheme::LinearProbe,
        Scheme::MaskTokenTune,
        Scheme::PtTuning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::FineTune => "fine_tune",
            Scheme::DirectForecast => "direct_forecast",
            Scheme::LinearProbe => "linear_probe",
            Scheme::MaskTokenTune => "mask_token_tune",
            Scheme::PtTuning => "pt_tuning",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Scheme::FineTune => "ft",
            Scheme::DirectForecast => "df",
            Scheme::LinearProbe => "lp",
            Scheme::MaskTokenTune => "mtf",
            Scheme::PtTuning => "pt",
        }
    }

    /// Groups that receive gradient updates.
    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        match self {
            Scheme::FineTune => &[ParamGroup::ForecastHead],
            Scheme::DirectForecast => &[],
            Scheme::LinearProbe => &[ParamGroup::Predictor],
            Scheme::MaskTokenTune => &[ParamGroup::MaskToken],
            Scheme::PtTuning => &[ParamGroup::Prompt],
        }
    }

    pub fn uses_head(self) -> bool {
        self == Scheme::FineTune
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_").to_ascii_lowercase();
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == norm || x.short() == norm || (norm == "pt_t" && *x == Scheme::PtTuning))
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}` (expected ft|df|lp|mtf|pt)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeSpec {
    pub scheme: Scheme,
    pub prompt_style: PromptStyle,
    pub horizon: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    /// Prompt rows for `concat_history`; other styles take their row count
    /// from the token counts.
    pub concat_rows: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub dropout: bool,
}

impl SchemeSpec {
    pub fn new(scheme: Scheme, horizon: usize) -> Self {
        SchemeSpec {
            scheme,
            prompt_style: if scheme == Scheme::PtTuning {
                PromptStyle::AddFuture
            } else {
                PromptStyle::None
            },
            horizon,
            epochs: if scheme == Scheme::DirectForecast { 0 } else { 20 },
            lr: 1e-3,
            batch_size: 32,
            patience: 3,
            concat_rows: 4,
            max_steps: None,
            seed: 0,
            dropout: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scheme == Scheme::DirectForecast && self.epochs > 0 {
            return Err(Error::Config("direct forecasting has nothing to train; set epochs = 0".into()));
        }
        match (self.scheme, self.prompt_style) {
            (Scheme::PtTuning, PromptStyle::None) => {
                return Err(Error::Config("pt_tuning needs a prompt style".into()));
            }
            (Scheme::PtTuning, _) | (_, PromptStyle::None) => {}
            (s, _) => {
                return Err(Error::Config(format!("prompt tokens are only trained by pt_tuning, not {s}")));
            }
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.prompt_style == PromptStyle::ConcatHistory && self.concat_rows == 0 {
            return Err(Error::Config("concat_history needs at least one prompt row".into()));
        }
        Ok(())
    }

    pub fn prompt_rows(&self, n_history: usize, n_future: usize) -> usize {
        match self.prompt_style {
            PromptStyle::None => 0,
            PromptStyle::AddFuture => n_future,
            PromptStyle::AddHistory => n_history,
            PromptStyle::ConcatHistory => self.concat_rows,
        }
    }
}

/// `F[i] = M + P[i] + pe(n_h + i)` as plain values, `[n_f, d]` row-major.
pub fn assemble_future_tokens(mask_token: &[f64], prompt: Option<&[f64]>, n_h: usize, n_f: usize) -> Result<Vec<f64>> {
    let d = mask_token.len();
    if let Some(p) = prompt {
        if p.len() != n_f * d {
            return Err(Error::Config(format!(
                "prompt holds {} rows, expected {n_f} future rows",
                p.len() / d.max(1)
            )));
        }
    }
    let mut out = pe_table(n_h..n_h + n_f, d)?;
    for (i, row) in out.chunks_mut(d).enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            let p = prompt.map_or(0.0, |p| p[i * d + j]);
            *x = (mask_token[j] + p) + *x;
        }
    }
    Ok(out)
}

/// History tokens `[n_h, d]` after a history-side prompt. Returns the new
/// token rows; `concat_history` prepends the prompt rows unchanged.
pub fn apply_prompt_history(style: PromptStyle, tokens: &[f64], prompt: &[f64], d: usize) -> Result<Vec<f64>> {
    match style {
        PromptStyle::AddHistory => {
            if prompt.len() != tokens.len() {
                return Err(Error::Config(format!(
                    "add_history prompt has {} rows for {} history tokens",
                    prompt.len() / d,
                    tokens.len() / d
                )));
            }
            Ok(tokens.iter().zip(prompt).map(|(h, p)| h + p).collect())
        }
        PromptStyle::ConcatHistory => {
            if prompt.is_empty() || prompt.len() % d != 0 {
                return Err(Error::Config("concat_history needs whole prompt rows".into()));
            }
            Ok([prompt, tokens].concat())
        }
        PromptStyle::None | PromptStyle::AddFuture => Ok(tokens.to_vec()),
    }
}

/// Closed-form trainable parameter count of a scheme.
pub fn expected_trainable_count(spec: &SchemeSpec, model_dim: usize, patch: usize, n_history: usize) -> usize {
    let d = model_dim;
    match spec.scheme {
        Scheme::DirectForecast => 0,
        Scheme::MaskTokenTune => d,
        Scheme::LinearProbe => d * patch + patch,
        Scheme::PtTuning => spec.prompt_rows(n_history, spec.horizon / patch) * d,
        Scheme::FineTune => n_history * d * spec.horizon + spec.horizon,
    }
}

/// Attaches whatever the scheme needs (prompt tokens or a forecast head) and
/// sets freeze flags. Safe to call again on an already prepared model.
pub fn prepare(model: &mut Model, spec: &SchemeSpec, history_len: usize) -> Result<()> {
    spec.validate()?;
    let p = model.patch();
    if history_len % p != 0 || spec.horizon % p != 0 {
        return Err(Error::Config(format!(
            "look-back {history_len} and horizon {} must be divisible by patch size {p}",
            spec.horizon
        )));
    }
    let (n_h, n_f) = (history_len / p, spec.horizon / p);
    match spec.scheme {
        Scheme::PtTuning => {
            let rows = spec.prompt_rows(n_h, n_f);
            match &model.prompt {
                Some(pr) if pr.style == spec.prompt_style && pr.rows == rows => {}
                Some(_) => return Err(Error::Contract("model carries a different prompt".into())),
                None => model.attach_prompt(spec.prompt_style, rows)?,
            }
        }
        Scheme::FineTune => {
            if model.head.is_none() {
                model.attach_head(n_h, spec.horizon, spec.seed)?;
            }
        }
        _ => {}
    }
    model.store.train_only(spec.scheme.trainable_groups());
    Ok(())
}

fn normalized_batch(model: &Model, windows: &[&WindowSample], horizon: usize) -> Result<(PatchBatch, Vec<f64>)> {
    let norm: Vec<WindowSample> = windows.iter().map(|w| instance_normalize(w)).collect();
    if norm.iter().any(|w| w.future.len() != horizon) {
        return Err(Error::Config(format!("windows do not carry a future of {horizon} values")));
    }
    let hist: Vec<&[f64]> = norm.iter().map(|w| w.history.as_slice()).collect();
    let batch = PatchBatch::from_series(&hist, model.patch())?;
    let target = norm.iter().flat_map(|w| w.future.iter().copied()).collect();
    Ok((batch, target))
}

/// Forecast MSE over the horizon in normalized space. When `dropout_seed` is
/// given the pass runs with dropout and gradients are accumulated into the
/// store.
pub fn forecast_loss(
    model: &mut Model,
    windows: &[&WindowSample],
    horizon: usize,
    use_head: bool,
    dropout_seed: Option<u64>,
    accumulate: bool,
) -> Result<f64> {
    let (batch, target) = normalized_batch(model, windows, horizon)?;
    let mut tape = match dropout_seed {
        Some(s) => Tape::with_dropout(s),
        None => Tape::new(),
    };
    let mut f = model.fwd(&mut tape);
    let y = model.forecast_forward(&mut f, &batch, horizon, use_head)?;
    let bind = f.bind;
    let t = tape.constant(vec![batch.batch, horizon], target)?;
    let loss = tape.mse(y, t)?;
    let value = tape.value(loss)[0];
    if accumulate {
        let grads = tape.backward(loss)?;
        model.store.accumulate(&bind, &grads)?;
    }
    Ok(value)
}

/// Mean normalized-space forecast MSE over `windows`, no dropout.
pub fn validation_mse(model: &mut Model, windows: &[WindowSample], horizon: usize, use_head: bool) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Dataset("no validation windows".into()));
    }
    let mut total = 0.0;
    for chunk in windows.chunks(256) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        total += forecast_loss(model, &refs, horizon, use_head, None, false)? * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub scheme: Scheme,
    /// Entry 0 is the untrained model.
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
    pub trainable: usize,
}

fn copy_trainable(from: &ParamStore, to: &mut ParamStore) {
    let names: Vec<String> = from
        .iter()
        .filter(|p| !from.is_frozen(p.group))
        .map(|p| p.name.clone())
        .collect();
    for name in names {
        if let (Some(src), Some(dst)) = (from.by_name(&name), to.by_name(&name)) {
            to.tensor_mut(dst).data_mut().copy_from_slice(from.tensor(src).data());
        }
    }
}

/// Trains the scheme's groups with Adam on forecast MSE, early stopping on
/// validation MSE, and leaves the parameters of the best trained epoch in
/// place.
pub fn tune(model: &mut Model, spec: &SchemeSpec, train: &[WindowSample], val: &[WindowSample]) -> Result<TuneReport> {
    let history_len = train
        .first()
        .or(val.first())
        .map(|w| w.history.len())
        .ok_or_else(|| Error::Dataset("no tuning windows".into()))?;
    prepare(model, spec, history_len)?;
    let use_head = spec.scheme.uses_head();
    let initial = validation_mse(model, val, spec.horizon, use_head)?;
    let mut curve = vec![EpochRecord {
        epoch: 0,
        steps: 0,
        train_loss: f64::NAN,
        val_mse: initial,
    }];
    let mut report = TuneReport {
        scheme: spec.scheme,
        curve: Vec::new(),
        best_epoch: 0,
        steps: 0,
        trainable: model.store.trainable_count(),
    };
    if spec.epochs > 0 && train.is_empty() {
        return Err(Error::Dataset("no training windows".into()));
    }
    let mut adam = AdamState::with_lr(spec.lr);
    let mut best = (f64::INFINITY, model.store.clone());
    let mut since_best = 0;
    let cap = spec.max_steps.unwrap_or(usize::MAX);
    for epoch in 1..=spec.epochs {
        if report.steps >= cap {
            break;
        }
        let order = shuffled_order(train.len(), spec.seed, epoch as u64);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(spec.batch_size) {
            if report.steps >= cap {
                break;
            }
            let ws: Vec<&WindowSample> = chunk.iter().map(|&i| &train[i]).collect();
            let seed = spec.dropout.then(|| spec.seed ^ model.step_count.wrapping_mul(0x9E37_79B9));
            total += forecast_loss(model, &ws, spec.horizon, use_head, seed, true)?;
            model.store.adam_step(&mut adam)?;
            model.step_count += 1;
            report.steps += 1;
            batches += 1;
        }
        let val_mse = validation_mse(model, val, spec.horizon, use_head)?;
        curve.push(EpochRecord {
            epoch,
            steps: report.steps,
            train_loss: total / batches.max(1) as f64,
            val_mse,
        });
        if val_mse < best.0 {
            best = (val_mse, model.store.clone());
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= spec.patience {
                break;
            }
        }
    }
    copy_trainable(&best.1, &mut model.store);
    report.curve = curve;
    Ok(report)
}

/// Conventional fine-tuning: a fresh linear head over the flattened encoder
/// output, trained with the encoder frozen.
pub fn fine_tune_conventional(
    model: &mut Model,
    horizon: usize,
    train: &[WindowSample],
    val: &[WindowSample],
    epochs: usize,
    seed: u64,
) -> Result<TuneReport> {
    let spec = SchemeSpec {
        epochs,
        seed,
        ..SchemeSpec::new(Scheme::FineTune, horizon)
    };
    tune(model, &spec, train, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Framework, ModelConfig};
    use crate::series::{make_windows, sinusoid_dataset, Split, SplitRatios, WindowConfig};

    fn small_model() -> Model {
        let cfg = ModelConfig {
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            patch: 4,
            model_dim: 8,
            n_heads: 2,
            ffn_dim: 16,
            dropout: 0.05,
            framework: Framework::CrossMae,
        };
        Model::new(cfg, 3).unwrap()
    }

    fn windows(split: Split) -> Vec<WindowSample> {
        let ds = sinusoid_dataset(400, 16.0, SplitRatios::ETT).unwrap();
        let wc = WindowConfig {
            history: 16,
            horizon: 8,
            patch: 4,
            stride: 4,
        };
        make_windows(&ds, split, &wc).unwrap()
    }

    #[test]
    fn scheme_names_parse() {
        for s in Scheme::ALL {
            assert_eq!(s.short().parse::<Scheme>().unwrap(), s);
            assert_eq!(s.as_str().parse::<Scheme>().unwrap(), s);
        }
        assert!("xx".parse::<Scheme>().is_err());
    }

    #[test]
    fn direct_forecast_with_epochs_is_rejected() {
        let spec = SchemeSpec {
            epochs: 1,
            ..SchemeSpec::new(Scheme::DirectForecast, 8)
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let spec = SchemeSpec {
            prompt_style: PromptStyle::AddFuture,
            ..SchemeSpec::new(Scheme::LinearProbe, 8)
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn trainable_counts_at_defaults() {
        let d = 64;
        let counts: Vec<usize> = Scheme::ALL
            .iter()
            .map(|&s| expected_trainable_count(&SchemeSpec::new(s, 336), d, 8, 64))
            .collect();
        assert_eq!(counts, vec![64 * 64 * 336 + 336, 0, 520, 64, 2688]);
        let mut m = Model::new(ModelConfig::default(), 0).unwrap();
        for s in [Scheme::DirectForecast, Scheme::LinearProbe, Scheme::MaskTokenTune] {
            prepare(&mut m, &SchemeSpec::new(s, 336), 512).unwrap();
            assert_eq!(m.store.trainable_count(), expected_trainable_count(&SchemeSpec::new(s, 336), d, 8, 64));
        }
    }

    #[test]
    fn future_tokens_examples() {
        let m = [0.1, -0.2, 0.3, 0.0];
        let zero = assemble_future_tokens(&m, Some(&[0.0; 8]), 5, 2).unwrap();
        assert_eq!(zero, assemble_future_tokens(&m, None, 5, 2).unwrap());
        let p = [1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0];
        let f = assemble_future_tokens(&m, Some(&p), 5, 2).unwrap();
        assert_ne!(f[..4], f[4..]);
        assert!(assemble_future_tokens(&m, Some(&[0.0; 4]), 5, 2).is_err());
        assert_eq!(assemble_future_tokens(&[0.0; 64], None, 64, 336 / 8).unwrap().len(), 42 * 64);
    }

    #[test]
    fn future_tokens_match_the_model_path() {
        let mut m = small_model();
        prepare(&mut m, &SchemeSpec::new(Scheme::PtTuning, 12), 16).unwrap();
        let pid = m.prompt.as_ref().unwrap().id;
        m.store.tensor_mut(pid).data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = i as f64 * 0.01);
        let mut tape = Tape::new();
        let mut f = m.fwd(&mut tape);
        let q = m.future_queries(&mut f, 2, 4, 3).unwrap();
        let oracle = assemble_future_tokens(
            m.store.tensor(m.mask_token).data(),
            Some(m.store.tensor(pid).data()),
            4,
            3,
        )
        .unwrap();
        assert_eq!(tape.value(q), [oracle.clone(), oracle].concat().as_slice());
    }

    #[test]
    fn history_prompt_examples() {
        let h = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(apply_prompt_history(PromptStyle::AddHistory, &h, &[0.0; 4], 2).unwrap(), h);
        assert!(apply_prompt_history(PromptStyle::AddHistory, &h, &[0.0; 2], 2).is_err());
        let c = apply_prompt_history(PromptStyle::ConcatHistory, &h, &[9.0, 9.0], 2).unwrap();
        assert_eq!(c, vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_prompt_matches_direct_forecast() {
        let base = small_model();
        let test = windows(Split::Test);
        let df = base.forecast(&test, 8, false).unwrap();
        for style in [PromptStyle::AddFuture, PromptStyle::AddHistory] {
            let mut m = base.clone();
            let spec = SchemeSpec {
                prompt_style: style,
                ..SchemeSpec::new(Scheme::PtTuning, 8)
            };
            prepare(&mut m, &spec, 16).unwrap();
            assert_eq!(df, m.forecast(&test, 8, false).unwrap(), "{style}");
        }
    }

    #[test]
    fn concat_prompt_grows_keys() {
        let mut m = small_model();
        let spec = SchemeSpec {
            prompt_style: PromptStyle::ConcatHistory,
            concat_rows: 4,
            ..SchemeSpec::new(Scheme::PtTuning, 8)
        };
        prepare(&mut m, &spec, 16).unwrap();
        let maps = m.attention_maps(&windows(Split::Test)[0], 8).unwrap();
        let enc = maps.iter().find(|a| a.layer == "encoder.0").unwrap();
        assert_eq!((enc.queries, enc.keys), (8, 8));
        let dec = maps.iter().find(|a| a.layer == "decoder.0").unwrap();
        assert_eq!((dec.queries, dec.keys), (2, 8));
    }

    #[test]
    fn only_trainable_groups_change() {
        let train = windows(Split::Train);
        let val = windows(Split::Val);
        for scheme in [Scheme::LinearProbe, Scheme::MaskTokenTune, Scheme::PtTuning, Scheme::FineTune] {
            let mut m = small_model();
            let spec = SchemeSpec {
                max_steps: Some(5),
                epochs: 1,
                patience: 10,
                batch_size: 4,
                lr: 1e-2,
                ..SchemeSpec::new(scheme, 8)
            };
            prepare(&mut m, &spec, 16).unwrap();
            let before: Vec<String> = ParamGroup::ALL.iter().map(|g| m.store.group_hash(*g)).collect();
            tune(&mut m, &spec, &train, &val).unwrap();
            for (g, h) in ParamGroup::ALL.iter().zip(&before) {
                let trained = scheme.trainable_groups().contains(g);
                assert_eq!(m.store.group_hash(*g) != *h, trained, "{scheme}: {g}");
            }
        }
    }

    #[test]
    fn gradients_stay_in_the_prompt() {
        let mut m = small_model();
        let spec = SchemeSpec::new(Scheme::PtTuning, 8);
        prepare(&mut m, &spec, 16).unwrap();
        let train = windows(Split::Train);
        let refs: Vec<&WindowSample> = train.iter().take(8).collect();
        forecast_loss(&mut m, &refs, 8, false, None, true).unwrap();
        for g in ParamGroup::ALL {
            let norm = m.store.l2_grad_norm(g);
            if g == ParamGroup::Prompt {
                assert!(norm > 0.0);
            } else {
                assert_eq!(norm, 0.0, "{g}");
            }
        }
    }

    #[test]
    fn direct_forecast_trains_nothing() {
        let mut m = small_model();
        let before = m.store.clone();
        let r = tune(&mut m, &SchemeSpec::new(Scheme::DirectForecast, 8), &windows(Split::Train), &windows(Split::Val)).unwrap();
        assert_eq!((r.steps, r.trainable, r.curve.len()), (0, 0, 1));
        assert_eq!(before.iter().map(|p| p.tensor.data()).collect::<Vec<_>>(), m.store.iter().map(|p| p.tensor.data()).collect::<Vec<_>>());
    }

    #[test]
    fn tuning_is_deterministic() {
        let run = || {
            let mut m = small_model();
            let spec = SchemeSpec {
                epochs: 2,
                batch_size: 8,
                ..SchemeSpec::new(Scheme::PtTuning, 8)
            };
            let r = tune(&mut m, &spec, &windows(Split::Train), &windows(Split::Val)).unwrap();
            (r.curve.iter().map(|e| e.val_mse.to_bits()).collect::<Vec<_>>(), m.store.group_hash(ParamGroup::Prompt))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn untrained_head_is_a_fixed_baseline() {
        let mut a = small_model();
        let mut b = small_model();
        fine_tune_conventional(&mut a, 8, &windows(Split::Train), &windows(Split::Val), 0, 1).unwrap();
        fine_tune_conventional(&mut b, 8, &windows(Split::Train), &windows(Split::Val), 0, 1).unwrap();
        assert_eq!(a.store.count(ParamGroup::ForecastHead), 4 * 8 * 8 + 8);
        let t = windows(Split::Test);
        assert_eq!(a.forecast(&t, 8, true).unwrap(), b.forecast(&t, 8, true).unwrap());
    }
}
