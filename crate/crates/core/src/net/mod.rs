//! Transformer backbone with explicit reverse-mode gradients.
//!
//! Tokens are embedded with role-dependent affine maps, optionally shifted by
//! a time embedding, and processed by pre-norm blocks whose normalisations are
//! modulated (scale and shift) from a per-sequence conditioning embedding.

pub mod mlp;
pub mod ops;
pub mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::Species;
use crate::rng::StreamRng;
use ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, masked_softmax, silu, silu_grad};
pub use mlp::Mlp;
pub use params::{AdamW, AdamWConfig, Grads, Init, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenType {
    Condition = 0,
    Deposition = 1,
    Particle = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PdgRole {
    None = 0,
    Electron = 1,
    Positron = 2,
    Photon = 3,
}

impl From<Species> for PdgRole {
    fn from(s: Species) -> Self {
        match s {
            Species::Electron => PdgRole::Electron,
            Species::Positron => PdgRole::Positron,
            Species::Photon => PdgRole::Photon,
        }
    }
}

/// Role triple of a token. Masked tokens are padding: they never serve as
/// attention keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Role {
    pub kind: TokenType,
    pub pdg: PdgRole,
    pub masked: bool,
}

impl Role {
    pub fn new(kind: TokenType, pdg: PdgRole) -> Self {
        Self { kind, pdg, masked: false }
    }

    pub fn padding() -> Self {
        Self {
            kind: TokenType::Particle,
            pdg: PdgRole::None,
            masked: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub time_embedding: bool,
    pub causal: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_dim: 8,
            out_dim: 8,
            cond_dim: 8,
            hidden: 128,
            layers: 4,
            heads: 4,
            ff_mult: 4,
            dropout: 0.0,
            time_embedding: false,
            causal: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::invalid(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.hidden % 2 != 0 {
            return Err(Error::invalid("hidden must be even for the time embedding"));
        }
        if self.in_dim == 0 || self.out_dim == 0 || self.ff_mult == 0 {
            return Err(Error::invalid("in_dim, out_dim and ff_mult must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// A batch of equal-length token sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub batch: usize,
    pub len: usize,
    /// `batch × len × in_dim`
    pub tokens: Vec<f64>,
    /// `batch × len`
    pub roles: Vec<Role>,
    /// Flow time per sequence, present iff the backbone uses a time embedding.
    pub time: Option<Vec<f64>>,
    /// `batch × cond_dim`
    pub cond: Vec<f64>,
    pub cond_pdg: Vec<PdgRole>,
}

/// Sinusoidal embedding with alternating `sin(ω_i t)`, `cos(ω_i t)` and `ω_i`
/// geometric from 1 to 10⁴.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let w = if half > 1 {
            10f64.powf(4.0 * i as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out.push((w * t).sin());
        out.push((w * t).cos());
    }
    out
}

#[derive(Debug, Clone)]
struct BlockIds {
    ada_w: usize,
    ada_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    out_w: usize,
    out_b: usize,
    ff_in_w: usize,
    ff_in_b: usize,
    ff_out_w: usize,
    ff_out_b: usize,
}

#[derive(Debug, Clone)]
struct Ids {
    w_mask: usize,
    w_pdg: usize,
    w_type: usize,
    b_mask: usize,
    b_pdg: usize,
    b_type: usize,
    time_w: usize,
    time_b: usize,
    cond_pdg: usize,
    cond_w: usize,
    cond_b: usize,
    blocks: Vec<BlockIds>,
    final_w: usize,
    final_b: usize,
    head_w: usize,
    head_b: usize,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub params: ParamSet,
    ids: Ids,
}

struct LayerCache {
    mods: Vec<f64>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    drop1: Option<Vec<f64>>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    a2: Vec<f64>,
    h: Vec<f64>,
    g: Vec<f64>,
    drop2: Option<Vec<f64>>,
}

/// Activations recorded by [`Backbone::forward`].
pub struct Cache {
    tau: Option<Vec<f64>>,
    c: Vec<f64>,
    sc: Vec<f64>,
    layers: Vec<LayerCache>,
    modf: Vec<f64>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    af: Vec<f64>,
}

fn dropout_mask(n: usize, p: f64, rng: &mut Option<&mut StreamRng>) -> Option<Vec<f64>> {
    let rng = rng.as_mut()?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some((0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect())
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::stream(seed, &[]);
        let r = &mut rng;
        let h = cfg.hidden;
        let d = cfg.in_dim;
        let f = cfg.ff_mult * h;
        let mut p = ParamSet::default();
        let emb = Init::Normal(1.0 / (d as f64).sqrt());
        let w_mask = p.add("embed.w_mask", &[2, d, h], emb, r);
        let w_pdg = p.add("embed.w_pdg", &[4, d, h], emb, r);
        let w_type = p.add("embed.w_type", &[3, d, h], emb, r);
        let b_mask = p.add("embed.b_mask", &[2, h], Init::Zeros, r);
        let b_pdg = p.add("embed.b_pdg", &[4, h], Init::Normal(1.0), r);
        let b_type = p.add("embed.b_type", &[3, h], Init::Normal(1.0), r);
        let hs = Init::Normal(1.0 / (h as f64).sqrt());
        let time_w = p.add("time.w", &[h, h], hs, r);
        let time_b = p.add("time.b", &[h], Init::Zeros, r);
        let cond_pdg = p.add("cond.pdg", &[4, h], Init::Normal(1.0), r);
        let cond_w = p.add("cond.w", &[cfg.cond_dim, h], Init::Normal(1.0 / (cfg.cond_dim.max(1) as f64).sqrt()), r);
        let cond_b = p.add("cond.b", &[h], Init::Zeros, r);
        let res = Init::Normal(1.0 / ((h * 2 * cfg.layers.max(1)) as f64).sqrt());
        let blocks = (0..cfg.layers)
            .map(|l| BlockIds {
                ada_w: p.add(format!("block{l}.ada.w"), &[h, 4 * h], Init::Zeros, r),
                ada_b: p.add(format!("block{l}.ada.b"), &[4 * h], Init::Zeros, r),
                qkv_w: p.add(format!("block{l}.attn.qkv.w"), &[h, 3 * h], hs, r),
                qkv_b: p.add(format!("block{l}.attn.qkv.b"), &[3 * h], Init::Zeros, r),
                out_w: p.add(format!("block{l}.attn.out.w"), &[h, h], res, r),
                out_b: p.add(format!("block{l}.attn.out.b"), &[h], Init::Zeros, r),
                ff_in_w: p.add(format!("block{l}.ff.in.w"), &[h, f], hs, r),
                ff_in_b: p.add(format!("block{l}.ff.in.b"), &[f], Init::Zeros, r),
                ff_out_w: p.add(format!("block{l}.ff.out.w"), &[f, h], Init::Normal(1.0 / ((f * cfg.layers.max(1)) as f64).sqrt()), r),
                ff_out_b: p.add(format!("block{l}.ff.out.b"), &[h], Init::Zeros, r),
            })
            .collect();
        let final_w = p.add("final.ada.w", &[h, 2 * h], Init::Zeros, r);
        let final_b = p.add("final.ada.b", &[2 * h], Init::Zeros, r);
        let head_w = p.add("head.w", &[h, cfg.out_dim], Init::Zeros, r);
        let head_b = p.add("head.b", &[cfg.out_dim], Init::Zeros, r);
        Ok(Self {
            cfg,
            params: p,
            ids: Ids {
                w_mask,
                w_pdg,
                w_type,
                b_mask,
                b_pdg,
                b_type,
                time_w,
                time_b,
                cond_pdg,
                cond_w,
                cond_b,
                blocks,
                final_w,
                final_b,
                head_w,
                head_b,
            },
        })
    }

    /// `v = ((W_mask + W_pdg + W_type)/3)·x + (b_mask + b_pdg + b_type)/3`.
    pub fn embed_token(&self, x: &[f64], role: Role) -> Vec<f64> {
        let (h, d) = (self.cfg.hidden, self.cfg.in_dim);
        let mut v = vec![0.0; h];
        self.embed_into(x, role, &mut v);
        debug_assert_eq!(x.len(), d);
        v
    }

    fn bank_rows(&self, role: Role) -> [(usize, usize, usize); 3] {
        let i = &self.ids;
        [
            (i.w_mask, i.b_mask, role.masked as usize),
            (i.w_pdg, i.b_pdg, role.pdg as usize),
            (i.w_type, i.b_type, role.kind as usize),
        ]
    }

    fn embed_into(&self, x: &[f64], role: Role, v: &mut [f64]) {
        let (h, d) = (self.cfg.hidden, self.cfg.in_dim);
        let third = 1.0 / 3.0;
        for (w_id, b_id, k) in self.bank_rows(role) {
            let w = &self.params.get(w_id)[k * d * h..(k + 1) * d * h];
            let b = &self.params.get(b_id)[k * h..(k + 1) * h];
            for (o, bb) in v.iter_mut().zip(b) {
                *o += third * bb;
            }
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    let s = third * xi;
                    for (o, ww) in v.iter_mut().zip(&w[i * h..(i + 1) * h]) {
                        *o += s * ww;
                    }
                }
            }
        }
    }

    fn check(&self, b: &SeqBatch) -> Result<()> {
        let n = b.batch * b.len;
        let bad = |what: &str, expected: usize, got: usize| {
            Err(Error::invalid(format!("{what}: expected {expected}, got {got}")))
        };
        if b.tokens.len() != n * self.cfg.in_dim {
            return bad("token buffer", n * self.cfg.in_dim, b.tokens.len());
        }
        if b.roles.len() != n {
            return bad("roles", n, b.roles.len());
        }
        if b.cond.len() != b.batch * self.cfg.cond_dim {
            return bad("condition buffer", b.batch * self.cfg.cond_dim, b.cond.len());
        }
        if b.cond_pdg.len() != b.batch {
            return bad("condition pdg", b.batch, b.cond_pdg.len());
        }
        match (&b.time, self.cfg.time_embedding) {
            (Some(t), true) if t.len() == b.batch => Ok(()),
            (None, false) => Ok(()),
            _ => Err(Error::invalid("time must be given exactly when the backbone embeds time")),
        }
    }

    /// Output only, without recording activations for backward.
    pub fn predict(&self, b: &SeqBatch) -> Result<Vec<f64>> {
        Ok(self.forward(b, None)?.0)
    }

    /// Per-token outputs (`batch × len × out_dim`) and the activation cache.
    /// Dropout is active only when an rng is supplied.
    pub fn forward(&self, b: &SeqBatch, mut rng: Option<&mut StreamRng>) -> Result<(Vec<f64>, Cache)> {
        self.check(b)?;
        let cfg = &self.cfg;
        let (h, d, l_len) = (cfg.hidden, cfg.in_dim, b.len);
        let n = b.batch * l_len;
        let ids = &self.ids;
        let p = &self.params;

        let mut x = vec![0.0; n * h];
        for r in 0..n {
            self.embed_into(&b.tokens[r * d..(r + 1) * d], b.roles[r], &mut x[r * h..(r + 1) * h]);
        }

        let mut c = linear(&b.cond, p.get(ids.cond_w), p.get(ids.cond_b), b.batch, cfg.cond_dim, h);
        for (row, pdg) in c.chunks_exact_mut(h).zip(&b.cond_pdg) {
            let e = &p.get(ids.cond_pdg)[*pdg as usize * h..(*pdg as usize + 1) * h];
            row.iter_mut().zip(e).for_each(|(a, b)| *a += b);
        }
        let tau = b.time.as_ref().map(|ts| ts.iter().flat_map(|&t| time_embedding(t, h)).collect::<Vec<_>>());
        if let Some(tau) = &tau {
            let te = linear(tau, p.get(ids.time_w), p.get(ids.time_b), b.batch, h, h);
            for (r, row) in x.chunks_exact_mut(h).enumerate() {
                let t = &te[(r / l_len) * h..(r / l_len + 1) * h];
                row.iter_mut().zip(t).for_each(|(a, b)| *a += b);
            }
            c.iter_mut().zip(&te).for_each(|(a, b)| *a += b);
        }
        let sc: Vec<f64> = c.iter().map(|&v| silu(v)).collect();

        let valid: Vec<bool> = b.roles.iter().map(|r| !r.masked).collect();
        let mut layers = Vec::with_capacity(cfg.layers);
        for blk in &ids.blocks {
            let mods = linear(&sc, p.get(blk.ada_w), p.get(blk.ada_b), b.batch, h, 4 * h);
            let (xhat1, rstd1) = layer_norm(&x, h);
            let a1 = modulate(&xhat1, &mods, 0, h, l_len);
            let qkv = linear(&a1, p.get(blk.qkv_w), p.get(blk.qkv_b), n, h, 3 * h);
            let (probs, att) = self.attention(&qkv, &valid, b.batch, l_len);
            let mut y = linear(&att, p.get(blk.out_w), p.get(blk.out_b), n, h, h);
            let drop1 = dropout_mask(n * h, cfg.dropout, &mut rng);
            if let Some(m) = &drop1 {
                y.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
            let (xhat2, rstd2) = layer_norm(&x, h);
            let a2 = modulate(&xhat2, &mods, 2, h, l_len);
            let f = cfg.ff_mult * h;
            let hpre = linear(&a2, p.get(blk.ff_in_w), p.get(blk.ff_in_b), n, h, f);
            let g: Vec<f64> = hpre.iter().map(|&v| gelu(v)).collect();
            let mut z = linear(&g, p.get(blk.ff_out_w), p.get(blk.ff_out_b), n, f, h);
            let drop2 = dropout_mask(n * h, cfg.dropout, &mut rng);
            if let Some(m) = &drop2 {
                z.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
            x.iter_mut().zip(&z).for_each(|(a, b)| *a += b);
            layers.push(LayerCache {
                mods,
                xhat1,
                rstd1,
                a1,
                qkv,
                probs,
                att,
                drop1,
                xhat2,
                rstd2,
                a2,
                h: hpre,
                g,
                drop2,
            });
        }

        let modf = linear(&sc, p.get(ids.final_w), p.get(ids.final_b), b.batch, h, 2 * h);
        let (xhatf, rstdf) = layer_norm(&x, h);
        let af = modulate(&xhatf, &modf, 0, h, l_len);
        let out = linear(&af, p.get(ids.head_w), p.get(ids.head_b), n, h, cfg.out_dim);
        Ok((
            out,
            Cache {
                tau,
                c,
                sc,
                layers,
                modf,
                xhatf,
                rstdf,
                af,
            },
        ))
    }

    fn attention(&self, qkv: &[f64], valid: &[bool], batch: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
        let h = self.cfg.hidden;
        let nh = self.cfg.heads;
        let dh = h / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let causal = self.cfg.causal;
        let mut probs = vec![0.0; batch * nh * len * len];
        let mut att = vec![0.0; batch * len * h];
        for b in 0..batch {
            let keep = |i: usize, j: usize| valid[b * len + j] && (!causal || j <= i);
            for head in 0..nh {
                let off = head * dh;
                for i in 0..len {
                    let q = &qkv[(b * len + i) * 3 * h + off..][..dh];
                    let row = &mut probs[((b * nh + head) * len + i) * len..][..len];
                    for (j, s) in row.iter_mut().enumerate() {
                        if keep(i, j) {
                            let k = &qkv[(b * len + j) * 3 * h + h + off..][..dh];
                            *s = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    masked_softmax(row, |j| keep(i, j));
                    let o = &mut att[(b * len + i) * h + off..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        if pij != 0.0 {
                            let v = &qkv[(b * len + j) * 3 * h + 2 * h + off..][..dh];
                            o.iter_mut().zip(v).for_each(|(a, b)| *a += pij * b);
                        }
                    }
                }
            }
        }
        (probs, att)
    }

    fn attention_backward(&self, qkv: &[f64], probs: &[f64], datt: &[f64], batch: usize, len: usize) -> Vec<f64> {
        let h = self.cfg.hidden;
        let nh = self.cfg.heads;
        let dh = h / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dqkv = vec![0.0; qkv.len()];
        let mut dp = vec![0.0; len];
        for b in 0..batch {
            for head in 0..nh {
                let off = head * dh;
                for i in 0..len {
                    let row = &probs[((b * nh + head) * len + i) * len..][..len];
                    let go = &datt[(b * len + i) * h + off..][..dh];
                    let mut rs = 0.0;
                    for j in 0..len {
                        dp[j] = 0.0;
                        if row[j] != 0.0 {
                            let vo = (b * len + j) * 3 * h + 2 * h + off;
                            let mut s = 0.0;
                            for k in 0..dh {
                                s += go[k] * qkv[vo + k];
                                dqkv[vo + k] += row[j] * go[k];
                            }
                            dp[j] = s;
                            rs += row[j] * s;
                        }
                    }
                    let qo = (b * len + i) * 3 * h + off;
                    for j in 0..len {
                        if row[j] != 0.0 {
                            let ds = scale * row[j] * (dp[j] - rs);
                            let ko = (b * len + j) * 3 * h + h + off;
                            for k in 0..dh {
                                dqkv[qo + k] += ds * qkv[ko + k];
                                dqkv[ko + k] += ds * qkv[qo + k];
                            }
                        }
                    }
                }
            }
        }
        dqkv
    }

    /// Parameter gradients and token-input gradients for upstream `d_out`.
    pub fn backward(&self, b: &SeqBatch, cache: &Cache, d_out: &[f64]) -> (Grads, Vec<f64>) {
        let cfg = &self.cfg;
        let (h, d, len) = (cfg.hidden, cfg.in_dim, b.len);
        let n = b.batch * len;
        let f = cfg.ff_mult * h;
        let ids = &self.ids;
        let p = &self.params;
        let mut g = p.zero_grads();

        let daf = {
            let (dw, db) = two_mut(&mut g.0, ids.head_w, ids.head_b);
            linear_backward(&cache.af, p.get(ids.head_w), d_out, n, h, cfg.out_dim, dw, db)
        };
        let mut dsc = vec![0.0; b.batch * h];
        let (dxhat, dmod) = modulate_backward(&cache.xhatf, &cache.modf, 0, &daf, h, len, b.batch, 2);
        {
            let (dw, db) = two_mut(&mut g.0, ids.final_w, ids.final_b);
            let ds = linear_backward(&cache.sc, p.get(ids.final_w), &dmod, b.batch, h, 2 * h, dw, db);
            dsc.iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
        }
        let mut dx = layer_norm_backward(&cache.xhatf, &cache.rstdf, &dxhat, h);

        for (blk, lc) in ids.blocks.iter().zip(&cache.layers).rev() {
            let mut dmods = vec![0.0; b.batch * 4 * h];
            let mut dz = dx.clone();
            if let Some(m) = &lc.drop2 {
                dz.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
            let mut dg = {
                let (dw, db) = two_mut(&mut g.0, blk.ff_out_w, blk.ff_out_b);
                linear_backward(&lc.g, p.get(blk.ff_out_w), &dz, n, f, h, dw, db)
            };
            dg.iter_mut().zip(&lc.h).for_each(|(a, &x)| *a *= gelu_grad(x));
            let da2 = {
                let (dw, db) = two_mut(&mut g.0, blk.ff_in_w, blk.ff_in_b);
                linear_backward(&lc.a2, p.get(blk.ff_in_w), &dg, n, h, f, dw, db)
            };
            let (dxhat2, dm2) = modulate_backward(&lc.xhat2, &lc.mods, 2, &da2, h, len, b.batch, 4);
            dmods.iter_mut().zip(&dm2).for_each(|(a, b)| *a += b);
            let dln2 = layer_norm_backward(&lc.xhat2, &lc.rstd2, &dxhat2, h);
            dx.iter_mut().zip(&dln2).for_each(|(a, b)| *a += b);

            let mut dy = dx.clone();
            if let Some(m) = &lc.drop1 {
                dy.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
            let datt = {
                let (dw, db) = two_mut(&mut g.0, blk.out_w, blk.out_b);
                linear_backward(&lc.att, p.get(blk.out_w), &dy, n, h, h, dw, db)
            };
            let dqkv = self.attention_backward(&lc.qkv, &lc.probs, &datt, b.batch, len);
            let da1 = {
                let (dw, db) = two_mut(&mut g.0, blk.qkv_w, blk.qkv_b);
                linear_backward(&lc.a1, p.get(blk.qkv_w), &dqkv, n, h, 3 * h, dw, db)
            };
            let (dxhat1, dm1) = modulate_backward(&lc.xhat1, &lc.mods, 0, &da1, h, len, b.batch, 4);
            dmods.iter_mut().zip(&dm1).for_each(|(a, b)| *a += b);
            let dln1 = layer_norm_backward(&lc.xhat1, &lc.rstd1, &dxhat1, h);
            dx.iter_mut().zip(&dln1).for_each(|(a, b)| *a += b);

            let (dw, db) = two_mut(&mut g.0, blk.ada_w, blk.ada_b);
            let ds = linear_backward(&cache.sc, p.get(blk.ada_w), &dmods, b.batch, h, 4 * h, dw, db);
            dsc.iter_mut().zip(&ds).for_each(|(a, b)| *a += b);
        }

        let dc: Vec<f64> = dsc.iter().zip(&cache.c).map(|(g, &c)| g * silu_grad(c)).collect();
        {
            let (dw, db) = two_mut(&mut g.0, ids.cond_w, ids.cond_b);
            linear_backward(&b.cond, p.get(ids.cond_w), &dc, b.batch, cfg.cond_dim, h, dw, db);
        }
        for (row, pdg) in dc.chunks_exact(h).zip(&b.cond_pdg) {
            let gp = &mut g.0[ids.cond_pdg][*pdg as usize * h..(*pdg as usize + 1) * h];
            gp.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        if let Some(tau) = &cache.tau {
            let mut dte = dc.clone();
            for (r, row) in dx.chunks_exact(h).enumerate() {
                let t = &mut dte[(r / len) * h..(r / len + 1) * h];
                t.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            let (dw, db) = two_mut(&mut g.0, ids.time_w, ids.time_b);
            linear_backward(tau, p.get(ids.time_w), &dte, b.batch, h, h, dw, db);
        }

        let third = 1.0 / 3.0;
        let mut d_tokens = vec![0.0; n * d];
        for r in 0..n {
            let dv = &dx[r * h..(r + 1) * h];
            let x = &b.tokens[r * d..(r + 1) * d];
            let dt = &mut d_tokens[r * d..(r + 1) * d];
            for (w_id, b_id, k) in self.bank_rows(b.roles[r]) {
                let gb = &mut g.0[b_id][k * h..(k + 1) * h];
                gb.iter_mut().zip(dv).for_each(|(a, b)| *a += third * b);
                let w = &p.get(w_id)[k * d * h..(k + 1) * d * h];
                for i in 0..d {
                    let wr = &w[i * h..(i + 1) * h];
                    dt[i] += third * wr.iter().zip(dv).map(|(a, b)| a * b).sum::<f64>();
                }
                let gw = &mut g.0[w_id][k * d * h..(k + 1) * d * h];
                for (i, &xi) in x.iter().enumerate() {
                    if xi != 0.0 {
                        let s = third * xi;
                        gw[i * h..(i + 1) * h].iter_mut().zip(dv).for_each(|(a, b)| *a += s * b);
                    }
                }
            }
        }
        (g, d_tokens)
    }

    pub fn meta_json(&self) -> String {
        serde_json::to_string(&self.cfg).expect("config serialises")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        params::save_checkpoint(path, &self.meta_json(), &self.params)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (meta, tensors) = params::load_checkpoint(path)?;
        let cfg: BackboneConfig = serde_json::from_str(&meta).map_err(|e| Error::invalid(e.to_string()))?;
        let mut model = Self::new(cfg, 0)?;
        model.params.load_from(&tensors)?;
        Ok(model)
    }
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

/// `x̂·(1 + scale) + shift` with `scale, shift` taken from chunk pair
/// `(slot, slot+1)` of each sequence's modulation row.
fn modulate(xhat: &[f64], mods: &[f64], slot: usize, h: usize, len: usize) -> Vec<f64> {
    let width = mods.len() / (xhat.len() / h / len).max(1);
    let mut out = vec![0.0; xhat.len()];
    for (r, (o, x)) in out.chunks_exact_mut(h).zip(xhat.chunks_exact(h)).enumerate() {
        let m = &mods[(r / len) * width..][..width];
        let (s, sh) = (&m[slot * h..(slot + 1) * h], &m[(slot + 1) * h..(slot + 2) * h]);
        for c in 0..h {
            o[c] = x[c] * (1.0 + s[c]) + sh[c];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn modulate_backward(
    xhat: &[f64],
    mods: &[f64],
    slot: usize,
    da: &[f64],
    h: usize,
    len: usize,
    batch: usize,
    chunks: usize,
) -> (Vec<f64>, Vec<f64>) {
    let width = chunks * h;
    let mut dxhat = vec![0.0; xhat.len()];
    let mut dmods = vec![0.0; batch * width];
    for r in 0..xhat.len() / h {
        let bi = r / len;
        let m = &mods[bi * width..][..width];
        let dm = &mut dmods[bi * width..][..width];
        for c in 0..h {
            let g = da[r * h + c];
            dxhat[r * h + c] = g * (1.0 + m[slot * h + c]);
            dm[slot * h + c] += g * xhat[r * h + c];
            dm[(slot + 1) * h + c] += g;
        }
    }
    (dxhat, dmods)
}

/// Fills every parameter with N(0, std²) draws; used to exercise all paths
/// in gradient checks where zero initialisations would hide terms.
pub fn randomize(params: &mut ParamSet, std: f64, seed: u64) {
    let mut rng = crate::rng::stream(seed, &[]);
    for t in &mut params.tensors {
        for v in &mut t.data {
            *v = std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}
