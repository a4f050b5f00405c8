//! The pretraining model and its variants.
//!
//! All three frameworks share one parameter layout: patch projection,
//! encoder blocks + final norm, mask token, decoder blocks + final norm and a
//! linear predictor. They differ only in how tokens flow:
//!
//! * `cross_mae`: visible tokens through the encoder; mask-token queries read
//!   the encoded tokens through cross-attention and never attend to each other.
//! * `mae_style`: encoded visible tokens and mask tokens are merged back into
//!   sequence order and run through self-attention decoder blocks.
//! * `beit_style`: mask tokens replace masked inputs and the whole sequence
//!   runs through encoder and decoder blocks as one self-attention tower.

pub mod layers;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Manifest};
use crate::error::{Error, Result};
use crate::masking::{plan_batch, MaskPlan, MaskStrategy};
use crate::optim::AdamState;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::series::{instance_normalize, pe_table, shuffled_order, WindowSample};
use crate::tensor::{Tape, Var};

pub use layers::{AttentionRecord, Block, Builder, Fwd, Linear, Norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    CrossMae,
    MaeStyle,
    BeitStyle,
}

impl Framework {
    pub const ALL: [Framework; 3] = [Framework::BeitStyle, Framework::MaeStyle, Framework::CrossMae];

    pub fn as_str(self) -> &'static str {
        match self {
            Framework::CrossMae => "cross_mae",
            Framework::MaeStyle => "mae_style",
            Framework::BeitStyle => "beit_style",
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Framework::ALL
            .into_iter()
            .find(|f| f.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown framework `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub patch: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub framework: Framework,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            patch: 8,
            model_dim: 64,
            n_heads: 4,
            ffn_dim: 256,
            dropout: 0.05,
            framework: Framework::CrossMae,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config(format!("model_dim {} must be even", self.model_dim)));
        }
        if self.patch == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("patch and ffn_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Parameter count of the pretrained model, from layer dimensions.
    pub fn param_count(&self) -> usize {
        let (d, p) = (self.model_dim, self.patch);
        let blocks = (self.n_encoder_layers + self.n_decoder_layers) * layers::block_param_count(d, self.ffn_dim);
        (p * d + d) + blocks + 2 * (2 * d) + d + (d * p + p)
    }
}

/// How prompt tokens enter the forecasting pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    None,
    AddFuture,
    AddHistory,
    ConcatHistory,
}

impl PromptStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptStyle::None => "none",
            PromptStyle::AddFuture => "add_future",
            PromptStyle::AddHistory => "add_history",
            PromptStyle::ConcatHistory => "concat_history",
        }
    }
}

impl FromStr for PromptStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "none" => Ok(PromptStyle::None),
            "add_future" => Ok(PromptStyle::AddFuture),
            "add_history" => Ok(PromptStyle::AddHistory),
            "concat_history" => Ok(PromptStyle::ConcatHistory),
            _ => Err(Error::Config(format!("unknown prompt style `{s}`"))),
        }
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct Prompt {
    pub id: ParamId,
    pub style: PromptStyle,
    pub rows: usize,
}

/// Patches of a batch of (normalized) series, `[batch, n, p]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub data: Vec<f64>,
    pub batch: usize,
    pub n: usize,
    pub p: usize,
}

impl PatchBatch {
    pub fn from_series(series: &[&[f64]], p: usize) -> Result<Self> {
        let len = series.first().map_or(0, |s| s.len());
        if series.is_empty() || len == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if series.iter().any(|s| s.len() != len) || p == 0 || len % p != 0 {
            return Err(Error::Config(format!(
                "series of length {len} cannot be cut into patches of {p}"
            )));
        }
        Ok(PatchBatch {
            data: series.concat(),
            batch: series.len(),
            n: len / p,
            p,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.n, self.p]
    }

    pub fn constant(&self, tape: &mut Tape) -> Result<Var> {
        tape.constant(self.shape().to_vec(), self.data.clone())
    }

    /// Patches at each sample's masked positions, `[batch, k, p]`.
    pub fn gather(&self, index: &[Vec<usize>]) -> Vec<f64> {
        let mut out = Vec::new();
        for (b, ix) in index.iter().enumerate() {
            for &i in ix {
                let s = (b * self.n + i) * self.p;
                out.extend_from_slice(&self.data[s..s + self.p]);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub patch_projection: Linear,
    pub encoder: Vec<Block>,
    pub encoder_norm: Norm,
    pub mask_token: ParamId,
    pub decoder: Vec<Block>,
    pub decoder_norm: Norm,
    pub predictor: Linear,
    pub prompt: Option<Prompt>,
    pub head: Option<Linear>,
    /// Optimizer steps taken on this model so far.
    pub step_count: u64,
}

fn check_masks(plans: &[MaskPlan], batch: usize, n: usize) -> Result<()> {
    if plans.len() != batch {
        return Err(Error::Contract(format!("{} mask plans for a batch of {batch}", plans.len())));
    }
    if plans.iter().any(|p| p.n_tokens != n) {
        return Err(Error::Contract(format!("mask plans must cover {n} tokens")));
    }
    Ok(())
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: Some(&mut rng),
        };
        Model::layout(config, &mut b).map(|m| m.with_store(store))
    }

    /// Rebuilds a model around parameters restored from a checkpoint.
    pub fn from_store(config: ModelConfig, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut b: Builder<'_, ChaCha8Rng> = Builder {
            store: &mut store,
            rng: None,
        };
        let mut m = Model::layout(config, &mut b)?;
        m.store = store;
        Ok(m)
    }

    fn with_store(mut self, store: ParamStore) -> Self {
        self.store = store;
        self
    }

    fn layout<R: rand::Rng>(config: ModelConfig, b: &mut Builder<'_, R>) -> Result<Self> {
        let (d, h, f, p) = (config.model_dim, config.n_heads, config.ffn_dim, config.patch);
        let patch_projection = Linear::build(b, "patch_projection", ParamGroup::PatchProjection, p, d)?;
        let encoder = (0..config.n_encoder_layers)
            .map(|i| Block::build(b, &format!("encoder.{i}"), ParamGroup::Encoder, d, h, f))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = Norm::build(b, "encoder.norm", ParamGroup::Encoder, d)?;
        let mask_token = b.normal("mask_token", ParamGroup::MaskToken, vec![d])?;
        let decoder = (0..config.n_decoder_layers)
            .map(|i| Block::build(b, &format!("decoder.{i}"), ParamGroup::Decoder, d, h, f))
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = Norm::build(b, "decoder.norm", ParamGroup::Decoder, d)?;
        let predictor = Linear::build(b, "predictor", ParamGroup::Predictor, d, p)?;
        Ok(Model {
            config,
            store: ParamStore::new(),
            patch_projection,
            encoder,
            encoder_norm,
            mask_token,
            decoder,
            decoder_norm,
            predictor,
            prompt: None,
            head: None,
            step_count: 0,
        })
    }

    pub fn d(&self) -> usize {
        self.config.model_dim
    }

    pub fn patch(&self) -> usize {
        self.config.patch
    }

    /// Tape forward context; dropout is live only if the tape carries an RNG.
    pub fn fwd<'t>(&self, tape: &'t mut Tape) -> Fwd<'t> {
        Fwd::new(tape, &self.store, self.config.dropout)
    }

    fn pe_const(&self, f: &mut Fwd<'_>, positions: &[Vec<usize>]) -> Result<Var> {
        let d = self.d();
        let k = positions.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(positions.len() * k * d);
        for pos in positions {
            data.extend(pe_table(pos.iter().copied(), d)?);
        }
        f.tape.constant(vec![positions.len(), k, d], data)
    }

    /// Projects patches `[b, n, p]` to tokens and adds the fixed positional
    /// embedding of `pos_base..pos_base + n`.
    pub fn embed(&self, f: &mut Fwd<'_>, patches: Var, pos_base: usize) -> Result<Var> {
        let s = f.tape.shape(patches).to_vec();
        if s.len() != 3 || s[2] != self.patch() {
            return Err(Error::Dimension(format!(
                "patches of shape {:?} for patch size {}",
                s,
                self.patch()
            )));
        }
        let x = self.patch_projection.forward(f, patches)?;
        let pe = f.tape.constant(vec![s[1], self.d()], pe_table(pos_base..pos_base + s[1], self.d())?)?;
        f.tape.add_broadcast(x, pe)
    }

    /// Encoder blocks followed by the encoder norm.
    pub fn encode(&self, f: &mut Fwd<'_>, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for (i, blk) in self.encoder.iter().enumerate() {
            x = blk.forward_self(f, x, &format!("encoder.{i}"))?;
        }
        self.encoder_norm.forward(f, x)
    }

    pub fn encode_visible(&self, f: &mut Fwd<'_>, tokens: Var, plans: &[MaskPlan]) -> Result<Var> {
        let s = f.tape.shape(tokens).to_vec();
        check_masks(plans, s[0], s[1])?;
        if plans.iter().any(|p| p.visible.is_empty()) {
            return Err(Error::Contract("encoder needs at least one visible token".into()));
        }
        let index: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
        let vis = f.tape.gather_rows(tokens, &index)?;
        self.encode(f, vis)
    }

    /// `M + P + pe(position)` for every requested position, `[b, k, d]`.
    /// `prompt` is `[k, d]` and added element-wise when present.
    pub fn mask_queries(&self, f: &mut Fwd<'_>, positions: &[Vec<usize>], prompt: Option<Var>) -> Result<Var> {
        let k = positions.first().map_or(0, Vec::len);
        let shape = [positions.len(), k, self.d()];
        let m = f.p(self.mask_token);
        let mut q = f.tape.broadcast_to(m, &shape)?;
        if let Some(p) = prompt {
            q = f.tape.add_broadcast(q, p)?;
        }
        let pe = self.pe_const(f, positions)?;
        f.tape.add(q, pe)
    }

    /// Cross-attention decoder. Keys and values come from the unchanged
    /// `memory` at every layer; queries never attend to each other.
    pub fn cross_decode(&self, f: &mut Fwd<'_>, memory: Var, queries: Var) -> Result<Var> {
        if f.tape.shape(memory)[1] == 0 {
            return Err(Error::Contract("cross decoder needs at least one encoded token".into()));
        }
        if f.tape.shape(queries)[1] == 0 {
            return Err(Error::Contract("cross decoder needs at least one query".into()));
        }
        let mut x = queries;
        for (i, blk) in self.decoder.iter().enumerate() {
            x = blk.forward_cross(f, x, memory, &format!("decoder.{i}"))?;
        }
        self.decoder_norm.forward(f, x)
    }

    fn self_decode(&self, f: &mut Fwd<'_>, seq: Var) -> Result<Var> {
        let mut x = seq;
        for (i, blk) in self.decoder.iter().enumerate() {
            x = blk.forward_self(f, x, &format!("decoder.{i}"))?;
        }
        self.decoder_norm.forward(f, x)
    }

    /// Puts `first` (at `plans[b].visible`) and `second` (at `plans[b].masked`)
    /// back into sequence order.
    fn merge(&self, f: &mut Fwd<'_>, first: Var, second: Var, plans: &[MaskPlan]) -> Result<Var> {
        let cat = f.tape.concat(&[first, second], 1)?;
        let order: Vec<Vec<usize>> = plans
            .iter()
            .map(|p| {
                let mut slot = vec![0; p.n_tokens];
                p.visible.iter().enumerate().for_each(|(j, &i)| slot[i] = j);
                let nv = p.visible.len();
                p.masked.iter().enumerate().for_each(|(j, &i)| slot[i] = nv + j);
                slot
            })
            .collect();
        f.tape.gather_rows(cat, &order)
    }

    /// MAE-style decoding over the merged sequence; returns masked slots.
    pub fn self_decode_mae(&self, f: &mut Fwd<'_>, encoded: Var, plans: &[MaskPlan]) -> Result<Var> {
        if f.tape.shape(encoded)[1] == 0 {
            return Err(Error::Contract("decoder needs at least one encoded token".into()));
        }
        let masked: Vec<Vec<usize>> = plans.iter().map(|p| p.masked.clone()).collect();
        let q = self.mask_queries(f, &masked, None)?;
        let seq = self.merge(f, encoded, q, plans)?;
        let out = self.self_decode(f, seq)?;
        f.tape.gather_rows(out, &masked)
    }

    /// Encoder then decoder blocks as one self-attention tower.
    fn tower(&self, f: &mut Fwd<'_>, seq: Var) -> Result<Var> {
        let x = self.encode(f, seq)?;
        self.self_decode(f, x)
    }

    /// BEiT-style pass: mask tokens substituted into the input embedding,
    /// whole sequence through the tower; returns masked slots.
    pub fn encode_beit(&self, f: &mut Fwd<'_>, tokens: Var, plans: &[MaskPlan]) -> Result<Var> {
        let s = f.tape.shape(tokens).to_vec();
        check_masks(plans, s[0], s[1])?;
        let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
        let masked: Vec<Vec<usize>> = plans.iter().map(|p| p.masked.clone()).collect();
        let vis = f.tape.gather_rows(tokens, &visible)?;
        let q = self.mask_queries(f, &masked, None)?;
        let seq = self.merge(f, vis, q, plans)?;
        let out = self.tower(f, seq)?;
        f.tape.gather_rows(out, &masked)
    }

    /// Linear map `d -> p` per token.
    pub fn predict(&self, f: &mut Fwd<'_>, tokens: Var) -> Result<Var> {
        self.predictor.forward(f, tokens)
    }

    /// Reconstruction of the masked patches, `[b, k, p]`.
    pub fn reconstruct(&self, f: &mut Fwd<'_>, patches: &PatchBatch, plans: &[MaskPlan]) -> Result<Var> {
        check_masks(plans, patches.batch, patches.n)?;
        let x = patches.constant(f.tape)?;
        let tokens = self.embed(f, x, 0)?;
        let decoded = match self.config.framework {
            Framework::CrossMae => {
                let h = self.encode_visible(f, tokens, plans)?;
                let masked: Vec<Vec<usize>> = plans.iter().map(|p| p.masked.clone()).collect();
                let q = self.mask_queries(f, &masked, None)?;
                self.cross_decode(f, h, q)?
            }
            Framework::MaeStyle => {
                let h = self.encode_visible(f, tokens, plans)?;
                self.self_decode_mae(f, h, plans)?
            }
            Framework::BeitStyle => self.encode_beit(f, tokens, plans)?,
        };
        self.predict(f, decoded)
    }

    pub fn attach_prompt(&mut self, style: PromptStyle, rows: usize) -> Result<()> {
        if style == PromptStyle::None {
            return Ok(());
        }
        if self.prompt.is_some() {
            return Err(Error::Contract("model already carries prompt tokens".into()));
        }
        if rows == 0 {
            return Err(Error::Config("prompt needs at least one row".into()));
        }
        let id = self.store.add(
            "prompt.tokens",
            ParamGroup::Prompt,
            crate::tensor::Tensor::zeros(vec![rows, self.d()]),
        )?;
        self.prompt = Some(Prompt { id, style, rows });
        Ok(())
    }

    /// Attaches a fresh linear head from the flattened `[n_tokens, d]`
    /// encoder output to `horizon` values.
    pub fn attach_head(&mut self, n_tokens: usize, horizon: usize, seed: u64) -> Result<()> {
        if self.head.is_some() {
            return Err(Error::Contract("model already carries a forecast head".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut self.store,
            rng: Some(&mut rng),
        };
        self.head = Some(Linear::build(&mut b, "head", ParamGroup::ForecastHead, n_tokens * self.config.model_dim, horizon)?);
        Ok(())
    }

    /// History tokens after any history-side prompt, before the encoder.
    fn history_tokens(&self, f: &mut Fwd<'_>, history: &PatchBatch) -> Result<Var> {
        let x = history.constant(f.tape)?;
        let mut tokens = self.embed(f, x, 0)?;
        if let Some(pr) = &self.prompt {
            let pv = f.p(pr.id);
            match pr.style {
                PromptStyle::AddHistory => {
                    if pr.rows != history.n {
                        return Err(Error::Config(format!(
                            "add_history prompt has {} rows for {} history tokens",
                            pr.rows, history.n
                        )));
                    }
                    tokens = f.tape.add_broadcast(tokens, pv)?;
                }
                PromptStyle::ConcatHistory => {
                    let pb = f.tape.broadcast_to(pv, &[history.batch, pr.rows, self.d()])?;
                    tokens = f.tape.concat(&[pb, tokens], 1)?;
                }
                PromptStyle::AddFuture | PromptStyle::None => {}
            }
        }
        Ok(tokens)
    }

    /// Future queries `F = M + P + E_p` at positions `n_h..n_h + n_f`.
    pub fn future_queries(&self, f: &mut Fwd<'_>, batch: usize, n_h: usize, n_f: usize) -> Result<Var> {
        let prompt = match &self.prompt {
            Some(pr) if pr.style == PromptStyle::AddFuture => {
                if pr.rows != n_f {
                    return Err(Error::Config(format!(
                        "add_future prompt has {} rows for {} future tokens",
                        pr.rows, n_f
                    )));
                }
                Some(f.p(pr.id))
            }
            _ => None,
        };
        let positions = vec![(n_h..n_h + n_f).collect::<Vec<_>>(); batch];
        self.mask_queries(f, &positions, prompt)
    }

    /// Forecast in normalized space, `[b, horizon]`. Uses the attached head
    /// when `use_head` is set, otherwise decodes extended mask tokens.
    pub fn forecast_forward(&self, f: &mut Fwd<'_>, history: &PatchBatch, horizon: usize, use_head: bool) -> Result<Var> {
        let p = self.patch();
        if history.p != p {
            return Err(Error::Config(format!("history patches of {} for model patch {p}", history.p)));
        }
        if horizon == 0 || horizon % p != 0 {
            return Err(Error::Config(format!("horizon {horizon} is not divisible by patch size {p}")));
        }
        let n_f = horizon / p;
        let (b, n_h) = (history.batch, history.n);
        let tokens = self.history_tokens(f, history)?;
        let n_tok = f.tape.shape(tokens)[1];
        if use_head {
            let head = self
                .head
                .as_ref()
                .ok_or_else(|| Error::Contract("no forecast head attached".into()))?;
            let h = match self.config.framework {
                Framework::BeitStyle => self.tower(f, tokens)?,
                _ => self.encode(f, tokens)?,
            };
            let flat = f.tape.reshape(h, &[b, n_tok * self.d()])?;
            let out = head.forward(f, flat)?;
            if f.tape.shape(out) != [b, horizon] {
                return Err(Error::Dimension(format!(
                    "head produces {:?}, expected [{b}, {horizon}]",
                    f.tape.shape(out)
                )));
            }
            return Ok(out);
        }
        let queries = self.future_queries(f, b, n_h, n_f)?;
        let tail: Vec<Vec<usize>> = vec![(n_tok..n_tok + n_f).collect(); b];
        let decoded = match self.config.framework {
            Framework::CrossMae => {
                let h = self.encode(f, tokens)?;
                self.cross_decode(f, h, queries)?
            }
            Framework::MaeStyle => {
                let h = self.encode(f, tokens)?;
                let seq = f.tape.concat(&[h, queries], 1)?;
                let out = self.self_decode(f, seq)?;
                f.tape.gather_rows(out, &tail)?
            }
            Framework::BeitStyle => {
                let seq = f.tape.concat(&[tokens, queries], 1)?;
                let out = self.tower(f, seq)?;
                f.tape.gather_rows(out, &tail)?
            }
        };
        let patches = self.predict(f, decoded)?;
        f.tape.reshape(patches, &[b, horizon])
    }

    /// Forecasts on the dataset scale: instance-normalize each history,
    /// forecast, denormalize. One vector of `horizon` values per window.
    pub fn forecast(&self, windows: &[WindowSample], horizon: usize, use_head: bool) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(256) {
            let norm: Vec<WindowSample> = chunk.iter().map(instance_normalize).collect();
            let hist: Vec<&[f64]> = norm.iter().map(|w| w.history.as_slice()).collect();
            let batch = PatchBatch::from_series(&hist, self.patch())?;
            let mut tape = Tape::new();
            let mut f = self.fwd(&mut tape);
            let y = self.forecast_forward(&mut f, &batch, horizon, use_head)?;
            let v = tape.value(y);
            for (i, w) in norm.iter().enumerate() {
                out.push(
                    v[i * horizon..(i + 1) * horizon]
                        .iter()
                        .map(|x| x * w.revin_std + w.revin_mean)
                        .collect(),
                );
            }
        }
        Ok(out)
    }

    pub fn manifest(&self, config_hash: &str) -> Manifest {
        let mut cfg = serde_json::to_value(&self.config).expect("config serializes");
        if let Some(pr) = &self.prompt {
            cfg["prompt_style"] = serde_json::Value::String(pr.style.as_str().into());
        }
        Manifest {
            framework: self.config.framework.as_str().into(),
            config_hash: config_hash.into(),
            step_count: self.step_count,
            frozen: checkpoint::freeze_flags(&self.store),
            model_config: cfg,
        }
    }

    pub fn save(&self, path: &std::path::Path, config_hash: &str) -> Result<()> {
        checkpoint::save(path, &self.store, &self.manifest(config_hash))
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Manifest)> {
        let (store, manifest) = checkpoint::load(path)?;
        Model::from_parts(store, manifest)
    }

    pub fn from_parts(store: ParamStore, manifest: Manifest) -> Result<(Self, Manifest)> {
        let config: ModelConfig = serde_json::from_value(manifest.model_config.clone())
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        if config.framework.as_str() != manifest.framework {
            return Err(Error::Checkpoint("framework tag disagrees with model config".into()));
        }
        let mut m = Model::from_store(config, store)?;
        if let Some(id) = m.store.by_name("prompt.tokens") {
            let style: PromptStyle = manifest
                .model_config
                .get("prompt_style")
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::Checkpoint("prompt tokens without a prompt style".into()))?
                .parse()?;
            let rows = m.store.tensor(id).shape()[0];
            m.prompt = Some(Prompt { id, style, rows });
        }
        if let (Some(w), Some(b)) = (m.store.by_name("head.weight"), m.store.by_name("head.bias")) {
            m.head = Some(Linear { w, b });
        }
        m.step_count = manifest.step_count;
        Ok((m, manifest))
    }
}

/// Mean squared error over masked patches only.
pub fn masked_mse(tape: &mut Tape, reconstructed: Var, target: &PatchBatch, plans: &[MaskPlan]) -> Result<Var> {
    check_masks(plans, target.batch, target.n)?;
    let k = plans.first().map_or(0, |p| p.masked.len());
    if k == 0 {
        return Err(Error::Contract("masked loss over an empty masked set".into()));
    }
    if plans.iter().any(|p| p.masked.len() != k) {
        return Err(Error::Contract("mask plans in one batch must mask equally many tokens".into()));
    }
    let expect = [target.batch, k, target.p];
    if tape.shape(reconstructed) != expect {
        return Err(Error::Dimension(format!(
            "reconstruction {:?} for targets {:?}",
            tape.shape(reconstructed),
            expect
        )));
    }
    let index: Vec<Vec<usize>> = plans.iter().map(|p| p.masked.clone()).collect();
    let t = tape.constant(expect.to_vec(), target.gather(&index))?;
    tape.mse(reconstructed, t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Dropout during training; evaluation never drops.
    pub dropout: bool,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            strategy: MaskStrategy::Isometric,
            ratio: 0.75,
            batch_size: 32,
            seed: 0,
            dropout: true,
        }
    }
}

impl Model {
    /// One optimizer step of masked reconstruction on `windows`.
    pub fn pretrain_step(&mut self, windows: &[&WindowSample], opts: &PretrainOptions, adam: &mut AdamState) -> Result<f64> {
        let norm: Vec<WindowSample> = windows.iter().map(|w| instance_normalize(w)).collect();
        let hist: Vec<&[f64]> = norm.iter().map(|w| w.history.as_slice()).collect();
        let batch = PatchBatch::from_series(&hist, self.patch())?;
        let step_seed = opts.seed.wrapping_add(self.step_count.wrapping_mul(7919));
        let plans = plan_batch(opts.strategy, batch.n, opts.ratio, step_seed, batch.batch)?;
        let mut tape = if opts.dropout {
            Tape::with_dropout(step_seed ^ 0xD5A6)
        } else {
            Tape::new()
        };
        let mut f = self.fwd(&mut tape);
        let recon = self.reconstruct(&mut f, &batch, &plans)?;
        let bind = f.bind;
        let loss = masked_mse(&mut tape, recon, &batch, &plans)?;
        let value = tape.value(loss)[0];
        let grads = tape.backward(loss)?;
        self.store.accumulate(&bind, &grads)?;
        self.store.adam_step(adam)?;
        self.step_count += 1;
        Ok(value)
    }

    /// One pass over `windows` in a seeded shuffled order; mean batch loss.
    pub fn pretrain_epoch(&mut self, windows: &[WindowSample], opts: &PretrainOptions, adam: &mut AdamState, epoch: u64) -> Result<f64> {
        if windows.is_empty() {
            return Err(Error::Dataset("no pretraining windows".into()));
        }
        let order = shuffled_order(windows.len(), opts.seed, epoch);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let ws: Vec<&WindowSample> = chunk.iter().map(|&i| &windows[i]).collect();
            total += self.pretrain_step(&ws, opts, adam)?;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    /// Exactly `steps` optimizer steps, walking shuffled epochs as needed.
    /// Returns the loss of every step.
    pub fn pretrain_steps(&mut self, windows: &[WindowSample], opts: &PretrainOptions, adam: &mut AdamState, steps: usize) -> Result<Vec<f64>> {
        if windows.is_empty() {
            return Err(Error::Dataset("no pretraining windows".into()));
        }
        let bs = opts.batch_size.max(1);
        let mut losses = Vec::with_capacity(steps);
        let mut epoch = 0u64;
        while losses.len() < steps {
            let order = shuffled_order(windows.len(), opts.seed, epoch);
            for chunk in order.chunks(bs) {
                if losses.len() == steps {
                    break;
                }
                let ws: Vec<&WindowSample> = chunk.iter().map(|&i| &windows[i]).collect();
                losses.push(self.pretrain_step(&ws, opts, adam)?);
            }
            epoch += 1;
        }
        Ok(losses)
    }
}

/// One attention probability matrix, `[queries, keys]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: String,
    pub head: usize,
    pub queries: usize,
    pub keys: usize,
    pub data: Vec<f64>,
}

impl Model {
    /// Attention probabilities of every layer and head for the forecasting
    /// pass on a single window.
    pub fn attention_maps(&self, window: &WindowSample, horizon: usize) -> Result<Vec<AttentionMap>> {
        let norm = instance_normalize(window);
        let batch = PatchBatch::from_series(&[norm.history.as_slice()], self.patch())?;
        let mut tape = Tape::new();
        let mut f = self.fwd(&mut tape);
        self.forecast_forward(&mut f, &batch, horizon, false)?;
        let records = std::mem::take(&mut f.attention);
        let mut maps = Vec::new();
        for rec in records {
            let s = tape.shape(rec.probs).to_vec();
            let (q, k) = (s[1], s[2]);
            let v = tape.value(rec.probs);
            for h in 0..rec.heads {
                maps.push(AttentionMap {
                    layer: rec.layer.clone(),
                    head: h,
                    queries: q,
                    keys: k,
                    data: v[h * q * k..(h + 1) * q * k].to_vec(),
                });
            }
        }
        Ok(maps)
    }
}
