//! Small causal transformer over a window of recent observations.
//!
//! Each element is processed on its own (the context length may differ
//! between elements), so masks are always per element with batch extent 1.
//! Sites per pass, in traversal order: embedding, then per block the
//! attention probabilities, the attention residual and the MLP residual.

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::dropout::{ConsistentDropout, MaskRouter};
use crate::error::{Error, Result};

const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GptConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub block: usize,
}

impl Default for GptConfig {
    fn default() -> Self {
        GptConfig {
            d_model: 64,
            layers: 4,
            heads: 4,
            block: 8,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct Gpt {
    cfg: GptConfig,
    obs_dim: usize,
    embed: (ParamId, ParamId),
    pos: ParamId,
    blocks: Vec<Block>,
    lnf: (ParamId, ParamId),
    head: (ParamId, ParamId),
    dropout: ConsistentDropout,
}

fn normal(rng: &mut dyn RngCore, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("positive extents")
}

impl Gpt {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        obs_dim: usize,
        out_dim: usize,
        cfg: GptConfig,
        p: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let GptConfig {
            d_model: d,
            layers,
            heads,
            block,
        } = cfg;
        if d == 0 || heads == 0 || layers == 0 || block == 0 || d % heads != 0 || obs_dim == 0 || out_dim == 0 {
            return Err(Error::config("gpt", format!("invalid configuration {cfg:?}")));
        }
        let dropout = ConsistentDropout::new(p)?;
        let std = 0.02;
        let resid_std = std / (2.0 * layers as f64).sqrt();
        let mut add = |name: String, t: Tensor| store.add(format!("{prefix}{name}"), t);
        let ones = |n| Tensor::filled(&[n], 1.0);
        let zeros = |n| Tensor::zeros(&[n]);

        let embed = (
            add("embed.w".into(), normal(rng, &[obs_dim, d], std)),
            add("embed.b".into(), zeros(d)),
        );
        let pos = add("pos".into(), normal(rng, &[block, d], std));
        let blocks = (0..layers)
            .map(|l| Block {
                ln1: (
                    add(format!("h{l}.ln1.g"), ones(d)),
                    add(format!("h{l}.ln1.b"), zeros(d)),
                ),
                wq: add(format!("h{l}.wq"), normal(rng, &[d, d], std)),
                wk: add(format!("h{l}.wk"), normal(rng, &[d, d], std)),
                wv: add(format!("h{l}.wv"), normal(rng, &[d, d], std)),
                wo: (
                    add(format!("h{l}.wo"), normal(rng, &[d, d], resid_std)),
                    add(format!("h{l}.bo"), zeros(d)),
                ),
                ln2: (
                    add(format!("h{l}.ln2.g"), ones(d)),
                    add(format!("h{l}.ln2.b"), zeros(d)),
                ),
                fc1: (
                    add(format!("h{l}.fc1.w"), normal(rng, &[d, 4 * d], std)),
                    add(format!("h{l}.fc1.b"), zeros(4 * d)),
                ),
                fc2: (
                    add(format!("h{l}.fc2.w"), normal(rng, &[4 * d, d], resid_std)),
                    add(format!("h{l}.fc2.b"), zeros(d)),
                ),
            })
            .collect();
        let lnf = (add("lnf.g".into(), ones(d)), add("lnf.b".into(), zeros(d)));
        let head = (
            add("head.w".into(), normal(rng, &[d, out_dim], std)),
            add("head.b".into(), zeros(out_dim)),
        );
        Ok(Gpt {
            cfg,
            obs_dim,
            embed,
            pos,
            blocks,
            lnf,
            head,
            dropout,
        })
    }

    pub fn config(&self) -> GptConfig {
        self.cfg
    }

    pub fn p(&self) -> f64 {
        self.dropout.p
    }

    pub fn site_count(&self) -> usize {
        1 + 3 * self.cfg.layers
    }

    /// Context length of a flattened observation window.
    pub fn context_len(&self, ctx: &[f64]) -> Result<usize> {
        let t = ctx.len() / self.obs_dim;
        if ctx.is_empty() || !ctx.len().is_multiple_of(self.obs_dim) || t > self.cfg.block {
            return Err(Error::shape(
                "gpt context",
                &[ctx.len()],
                &[self.cfg.block, self.obs_dim],
            ));
        }
        Ok(t)
    }

    /// `(width, p)` of every site for a context of `t` positions.
    pub fn sites(&self, t: usize) -> Vec<(usize, f64)> {
        let (d, h, p) = (self.cfg.d_model, self.cfg.heads, self.dropout.p);
        let mut s = vec![(t * d, p)];
        for _ in 0..self.cfg.layers {
            s.extend([(h * t * t, p), (t * d, p), (t * d, p)]);
        }
        s
    }

    fn ln(&self, tape: &mut Tape, store: &ParamStore, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
        let gv = tape.param(store, g);
        let bv = tape.param(store, b);
        tape.layernorm(x, gv, bv, 1e-5)
    }

    fn lin(&self, tape: &mut Tape, store: &ParamStore, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let wv = tape.param(store, w);
        let bv = tape.param(store, b);
        tape.linear(x, wv, bv)
    }

    /// Causal self-attention of `[T, D]` activations (already normalized).
    pub fn causal_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        layer: usize,
        x: Var,
        router: &mut MaskRouter<'_>,
    ) -> Result<Var> {
        let blk = &self.blocks[layer];
        let t = tape.shape(x)[0];
        let (d, h) = (self.cfg.d_model, self.cfg.heads);
        let dh = d / h;
        let heads_of = |tape: &mut Tape, w: ParamId, perm: &[usize]| -> Result<Var> {
            let wv = tape.param(store, w);
            let y = tape.matmul(x, wv)?;
            let y = tape.reshape(y, &[t, h, dh])?;
            tape.permute(y, perm)
        };
        let q = heads_of(tape, blk.wq, &[1, 0, 2])?;
        let kt = heads_of(tape, blk.wk, &[1, 2, 0])?;
        let v = heads_of(tape, blk.wv, &[1, 0, 2])?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let causal: Vec<f64> = (0..h * t * t)
            .map(|i| if (i % t) > (i / t) % t { MASKED } else { 0.0 })
            .collect();
        let causal = tape.constant(Tensor::new(vec![h, t, t], causal)?);
        let scores = tape.add(scores, causal)?;
        let att = tape.softmax(scores, 2)?;
        let att = self.dropout.forward(tape, att, 1, router)?;
        let y = tape.bmm(att, v)?;
        let y = tape.permute(y, &[1, 0, 2])?;
        let y = tape.reshape(y, &[t, d])?;
        self.lin(tape, store, y, blk.wo)
    }

    /// Head output `[1, out]` for one flattened context window.
    pub fn forward_one(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &[f64],
        router: &mut MaskRouter<'_>,
    ) -> Result<Var> {
        let t = self.context_len(ctx)?;
        let obs = tape.constant(Tensor::matrix(t, self.obs_dim, ctx.to_vec())?);
        let emb = self.lin(tape, store, obs, self.embed)?;
        let pos_all = tape.param(store, self.pos);
        let pos = tape.select_rows(pos_all, &(0..t).collect::<Vec<_>>())?;
        let mut x = tape.add(emb, pos)?;
        x = self.dropout.forward(tape, x, 1, router)?;
        for (l, blk) in self.blocks.iter().enumerate() {
            let h = self.ln(tape, store, x, blk.ln1)?;
            let a = self.causal_attention(tape, store, l, h, router)?;
            let a = self.dropout.forward(tape, a, 1, router)?;
            x = tape.add(x, a)?;
            let h = self.ln(tape, store, x, blk.ln2)?;
            let m = self.lin(tape, store, h, blk.fc1)?;
            let m = tape.relu(m);
            let m = self.lin(tape, store, m, blk.fc2)?;
            let m = self.dropout.forward(tape, m, 1, router)?;
            x = tape.add(x, m)?;
        }
        let x = self.ln(tape, store, x, self.lnf)?;
        let last = tape.select_rows(x, &[t - 1])?;
        self.lin(tape, store, last, self.head)
    }
}
