//! Transformer building blocks on the tape.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::params::{Binding, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Creates parameters when an RNG is supplied, otherwise looks them up by
/// name in an existing store (checkpoint restore).
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: Option<&'a mut R>,
}

impl<R: Rng> Builder<'_, R> {
    fn param(&mut self, name: &str, group: ParamGroup, shape: Vec<usize>, init: Init) -> Result<ParamId> {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let n = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal => {
                        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
                        (0..n).map(|_| dist.sample(rng)).collect()
                    }
                };
                self.store.add(name, group, Tensor::new(shape, data)?)
            }
            None => {
                let id = self.store.by_name(name).ok_or_else(|| {
                    crate::Error::Checkpoint(format!("missing parameter `{name}`"))
                })?;
                let got = self.store.tensor(id).shape();
                if got != shape.as_slice() {
                    return Err(crate::Error::Checkpoint(format!(
                        "parameter `{name}` has shape {got:?}, expected {shape:?}"
                    )));
                }
                if self.store.get(id).group != group {
                    return Err(crate::Error::Checkpoint(format!("parameter `{name}` is in the wrong group")));
                }
                Ok(id)
            }
        }
    }

    pub fn normal(&mut self, name: &str, group: ParamGroup, shape: Vec<usize>) -> Result<ParamId> {
        self.param(name, group, shape, Init::Normal)
    }

    pub fn zeros(&mut self, name: &str, group: ParamGroup, shape: Vec<usize>) -> Result<ParamId> {
        self.param(name, group, shape, Init::Zeros)
    }

    pub fn ones(&mut self, name: &str, group: ParamGroup, shape: Vec<usize>) -> Result<ParamId> {
        self.param(name, group, shape, Init::Ones)
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal,
}

/// One forward pass: tape, bound parameters, dropout rate and the attention
/// probabilities recorded along the way.
pub struct Fwd<'t> {
    pub tape: &'t mut Tape,
    pub bind: Binding,
    pub dropout: f64,
    pub attention: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layer: String,
    /// `[batch * heads, queries, keys]`
    pub probs: Var,
    pub heads: usize,
}

impl<'t> Fwd<'t> {
    pub fn new(tape: &'t mut Tape, store: &ParamStore, dropout: f64) -> Self {
        let bind = store.bind(tape);
        Fwd {
            tape,
            bind,
            dropout,
            attention: Vec::new(),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.bind.var(id)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, name: &str, group: ParamGroup, din: usize, dout: usize) -> Result<Self> {
        Ok(Linear {
            w: b.normal(&format!("{name}.weight"), group, vec![din, dout])?,
            b: b.zeros(&format!("{name}.bias"), group, vec![dout])?,
        })
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let y = f.tape.matmul(x, f.p(self.w))?;
        f.tape.add_broadcast(y, f.p(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, name: &str, group: ParamGroup, d: usize) -> Result<Self> {
        Ok(Norm {
            gain: b.ones(&format!("{name}.gain"), group, vec![d])?,
            bias: b.zeros(&format!("{name}.bias"), group, vec![d])?,
        })
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let (g, b) = (f.p(self.gain), f.p(self.bias));
        f.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn build<R: Rng>(b: &mut Builder<'_, R>, name: &str, group: ParamGroup, d: usize, heads: usize) -> Result<Self> {
        Ok(Attention {
            q: Linear::build(b, &format!("{name}.q"), group, d, d)?,
            k: Linear::build(b, &format!("{name}.k"), group, d, d)?,
            v: Linear::build(b, &format!("{name}.v"), group, d, d)?,
            out: Linear::build(b, &format!("{name}.out"), group, d, d)?,
            heads,
        })
    }

    fn split_heads(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let s = f.tape.shape(x).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        let h = self.heads;
        let x = f.tape.reshape(x, &[b, n, h, d / h])?;
        let x = f.tape.permute(x, &[0, 2, 1, 3])?;
        f.tape.reshape(x, &[b * h, n, d / h])
    }

    /// `queries: [b, nq, d]`, `memory: [b, nk, d]` -> `[b, nq, d]`.
    pub fn forward(&self, f: &mut Fwd<'_>, queries: Var, memory: Var, label: &str) -> Result<Var> {
        let s = f.tape.shape(queries).to_vec();
        let (b, nq, d) = (s[0], s[1], s[2]);
        let h = self.heads;
        let q = self.q.forward(f, queries)?;
        let k = self.k.forward(f, memory)?;
        let v = self.v.forward(f, memory)?;
        let q = self.split_heads(f, q)?;
        let k = self.split_heads(f, k)?;
        let v = self.split_heads(f, v)?;
        let kt = f.tape.transpose(k)?;
        let scores = f.tape.bmm(q, kt)?;
        let scores = f.tape.scale(scores, 1.0 / ((d / h) as f64).sqrt());
        let probs = f.tape.softmax_lastdim(scores)?;
        f.attention.push(AttentionRecord {
            layer: label.to_string(),
            probs,
            heads: h,
        });
        let probs = f.tape.dropout(probs, f.dropout);
        let ctx = f.tape.bmm(probs, v)?;
        let ctx = f.tape.reshape(ctx, &[b, h, nq, d / h])?;
        let ctx = f.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = f.tape.reshape(ctx, &[b, nq, d])?;
        self.out.forward(f, ctx)
    }
}

/// Pre-norm transformer block: `x += attn(LN(x), mem)`, `x += FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm_attn: Norm,
    pub attn: Attention,
    pub norm_ffn: Norm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl Block {
    pub fn build<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        group: ParamGroup,
        d: usize,
        heads: usize,
        ffn: usize,
    ) -> Result<Self> {
        Ok(Block {
            norm_attn: Norm::build(b, &format!("{name}.norm_attn"), group, d)?,
            attn: Attention::build(b, &format!("{name}.attn"), group, d, heads)?,
            norm_ffn: Norm::build(b, &format!("{name}.norm_ffn"), group, d)?,
            ffn_in: Linear::build(b, &format!("{name}.ffn_in"), group, d, ffn)?,
            ffn_out: Linear::build(b, &format!("{name}.ffn_out"), group, ffn, d)?,
        })
    }

    fn ffn(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let n = self.norm_ffn.forward(f, x)?;
        let hid = self.ffn_in.forward(f, n)?;
        let hid = f.tape.gelu(hid);
        let hid = f.tape.dropout(hid, f.dropout);
        let out = self.ffn_out.forward(f, hid)?;
        let out = f.tape.dropout(out, f.dropout);
        f.tape.add(x, out)
    }

    pub fn forward_self(&self, f: &mut Fwd<'_>, x: Var, label: &str) -> Result<Var> {
        let n = self.norm_attn.forward(f, x)?;
        let a = self.attn.forward(f, n, n, label)?;
        let x = f.tape.add(x, a)?;
        self.ffn(f, x)
    }

    /// Queries are normalized; the memory is used as given.
    pub fn forward_cross(&self, f: &mut Fwd<'_>, x: Var, memory: Var, label: &str) -> Result<Var> {
        let n = self.norm_attn.forward(f, x)?;
        let a = self.attn.forward(f, n, memory, label)?;
        let x = f.tape.add(x, a)?;
        self.ffn(f, x)
    }

    /// Output of the attention sub-layer alone, `x + attn(LN(x), mem)`.
    pub fn attention_residual(&self, f: &mut Fwd<'_>, x: Var, memory: Var, label: &str) -> Result<Var> {
        let n = self.norm_attn.forward(f, x)?;
        let a = self.attn.forward(f, n, memory, label)?;
        f.tape.add(x, a)
    }
}

/// Parameter count of one block, from its dimensions.
pub fn block_param_count(d: usize, ffn: usize) -> usize {
    2 * 2 * d + 4 * (d * d + d) + (d * ffn + ffn) + (ffn * d + d)
}
