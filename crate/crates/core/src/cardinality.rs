//! Autoregressive categorical model over per-species outgoing counts.
//!
//! Sequence layout: `[type prompt, condition prompt, n_e⁻, n_e⁺, n_γ]`. The
//! output at position `k + 1` gives the logits of the `k`-th count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Cardinalities, Context, CONDITION_DIM};
use crate::error::{Error, Result};
use crate::net::ops::log_sum_exp;
use crate::net::{AdamW, AdamWConfig, Backbone, BackboneConfig, PdgRole, Role, SeqBatch, TokenType};
use crate::oracle::Species;
use crate::rng::{self, StreamRng};

pub const SEQ_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CardinalityConfig {
    pub n_max: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
}

impl Default for CardinalityConfig {
    fn default() -> Self {
        Self {
            n_max: 20,
            hidden: 128,
            layers: 4,
            heads: 4,
            ff_mult: 4,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CardinalityModel {
    pub n_max: usize,
    pub net: Backbone,
}

impl CardinalityModel {
    pub fn new(cfg: CardinalityConfig, seed: u64) -> Result<Self> {
        let net = Backbone::new(
            BackboneConfig {
                in_dim: CONDITION_DIM.max(cfg.n_max + 1),
                out_dim: cfg.n_max + 1,
                cond_dim: CONDITION_DIM,
                hidden: cfg.hidden,
                layers: cfg.layers,
                heads: cfg.heads,
                ff_mult: cfg.ff_mult,
                dropout: cfg.dropout,
                time_embedding: false,
                causal: true,
            },
            seed,
        )?;
        Ok(Self { n_max: cfg.n_max, net })
    }

    pub fn from_backbone(net: Backbone) -> Result<Self> {
        let c = net.cfg;
        if !c.causal || c.time_embedding || c.cond_dim != CONDITION_DIM || c.in_dim < c.out_dim {
            return Err(Error::invalid("backbone is not a cardinality decoder"));
        }
        Ok(Self {
            n_max: c.out_dim - 1,
            net,
        })
    }

    fn vocab(&self) -> usize {
        self.n_max + 1
    }

    fn check_counts(&self, n: &Cardinalities) -> Result<()> {
        if let Some(&c) = n.0.iter().find(|&&c| c > self.n_max) {
            return Err(Error::Overflow {
                index: 0,
                count: c,
                limit: self.n_max,
            });
        }
        Ok(())
    }

    /// Sequences with the given count prefixes; unknown counts are zero tokens.
    fn sequences(&self, ctx: &[Context], prefixes: &[&[usize]], len: usize) -> SeqBatch {
        let d = self.net.cfg.in_dim;
        let b = ctx.len();
        let mut tokens = vec![0.0; b * len * d];
        let mut roles = Vec::with_capacity(b * len);
        let mut cond = Vec::with_capacity(b * CONDITION_DIM);
        for (i, (c, pre)) in ctx.iter().zip(prefixes).enumerate() {
            let row = &mut tokens[i * len * d..(i + 1) * len * d];
            row[d..d + CONDITION_DIM].copy_from_slice(&c.cond);
            roles.push(Role::new(TokenType::Condition, c.species.into()));
            roles.push(Role::new(TokenType::Condition, PdgRole::None));
            for k in 0..len - 2 {
                if let Some(&n) = pre.get(k) {
                    row[(k + 2) * d + n] = 1.0;
                }
                roles.push(Role::new(TokenType::Particle, Species::ALL[k].into()));
            }
            cond.extend_from_slice(&c.cond);
        }
        SeqBatch {
            batch: b,
            len,
            tokens,
            roles,
            time: None,
            cond,
            cond_pdg: ctx.iter().map(|c| c.species.into()).collect(),
        }
    }

    /// Per-position log-probabilities `batch × 3 × vocab`.
    fn log_probs(&self, out: &[f64], batch: usize, len: usize) -> Vec<f64> {
        let v = self.vocab();
        let mut lp = Vec::with_capacity(batch * 3 * v);
        for b in 0..batch {
            for k in 0..3 {
                let logits = &out[(b * len + k + 1) * v..][..v];
                let z = log_sum_exp(logits);
                lp.extend(logits.iter().map(|l| l - z));
            }
        }
        lp
    }

    pub fn log_prob(&self, ctx: &Context, n: &Cardinalities) -> Result<f64> {
        Ok(self.log_prob_batch(std::slice::from_ref(ctx), std::slice::from_ref(n))?[0])
    }

    pub fn log_prob_batch(&self, ctx: &[Context], ns: &[Cardinalities]) -> Result<Vec<f64>> {
        for n in ns {
            self.check_counts(n)?;
        }
        let pre: Vec<&[usize]> = ns.iter().map(|n| &n.0[..]).collect();
        let batch = self.sequences(ctx, &pre, SEQ_LEN);
        let out = self.net.predict(&batch)?;
        let lp = self.log_probs(&out, ctx.len(), SEQ_LEN);
        let v = self.vocab();
        Ok(ns
            .iter()
            .enumerate()
            .map(|(b, n)| (0..3).map(|k| lp[(b * 3 + k) * v + n.0[k]]).sum())
            .collect())
    }

    /// Mean negative log-likelihood and its gradients on one batch.
    pub fn loss_and_grads(
        &self,
        ctx: &[Context],
        ns: &[Cardinalities],
        rng: Option<&mut StreamRng>,
    ) -> Result<(f64, crate::net::Grads)> {
        let pre: Vec<&[usize]> = ns.iter().map(|n| &n.0[..]).collect();
        let batch = self.sequences(ctx, &pre, SEQ_LEN);
        let (out, cache) = self.net.forward(&batch, rng)?;
        let v = self.vocab();
        let lp = self.log_probs(&out, ctx.len(), SEQ_LEN);
        let scale = 1.0 / ctx.len() as f64;
        let mut loss = 0.0;
        let mut d_out = vec![0.0; out.len()];
        for (b, n) in ns.iter().enumerate() {
            for k in 0..3 {
                let row = &lp[(b * 3 + k) * v..][..v];
                loss -= row[n.0[k]];
                let d = &mut d_out[(b * SEQ_LEN + k + 1) * v..][..v];
                for (j, g) in d.iter_mut().enumerate() {
                    *g = scale * (row[j].exp() - (j == n.0[k]) as u8 as f64);
                }
            }
        }
        let (g, _) = self.net.backward(&batch, &cache, &d_out);
        Ok((loss * scale, g))
    }

    /// Ancestral draw in the fixed species order.
    pub fn sample<R: Rng + ?Sized>(&self, ctx: &Context, rng: &mut R) -> Result<Cardinalities> {
        let u: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        Ok(self.sample_with_uniforms(std::slice::from_ref(ctx), &[u])?[0])
    }

    /// Batched ancestral sampling driven by explicit uniforms, so each draw
    /// depends only on its own context and uniforms.
    pub fn sample_with_uniforms(&self, ctx: &[Context], uniforms: &[[f64; 3]]) -> Result<Vec<Cardinalities>> {
        let v = self.vocab();
        let mut counts = vec![[0usize; 3]; ctx.len()];
        for k in 0..3 {
            let pre: Vec<&[usize]> = counts.iter().map(|c| &c[..k]).collect();
            let len = k + 2;
            let batch = self.sequences(ctx, &pre, len);
            let out = self.net.predict(&batch)?;
            for (b, c) in counts.iter_mut().enumerate() {
                let logits = &out[(b * len + k + 1) * v..][..v];
                let z = log_sum_exp(logits);
                let mut acc = 0.0;
                c[k] = v - 1;
                for (j, l) in logits.iter().enumerate() {
                    acc += (l - z).exp();
                    if uniforms[b][k] < acc {
                        c[k] = j;
                        break;
                    }
                }
            }
        }
        Ok(counts.into_iter().map(Cardinalities).collect())
    }

    /// Samples one count vector per context with per-context seeds.
    pub fn sample_batch(&self, ctx: &[Context], seeds: &[u64]) -> Result<Vec<Cardinalities>> {
        let uniforms: Vec<[f64; 3]> = seeds
            .iter()
            .map(|&s| {
                let mut r = rng::stream(s, &[]);
                [r.random(), r.random(), r.random()]
            })
            .collect();
        let mut out = Vec::with_capacity(ctx.len());
        for (c, u) in ctx.chunks(512).zip(uniforms.chunks(512)) {
            out.extend(self.sample_with_uniforms(c, u)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Linear warm-up over the first 2% of steps, then cosine decay to a
    /// tenth of the base rate.
    pub fn learning_rate(&self, step: usize, total: usize) -> f64 {
        let base = self.optimizer.lr;
        let warm = (total / 50).max(1);
        if step < warm {
            return base * (step + 1) as f64 / warm as f64;
        }
        let frac = ((step - warm) as f64 / (total.saturating_sub(warm)).max(1) as f64).min(1.0);
        base * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

/// Shuffled index order for an epoch.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[epoch as u64]));
    idx
}

/// One pass over `data` with teacher forcing. Returns the per-batch loss trace.
pub fn train_epoch(
    model: &mut CardinalityModel,
    opt: &mut AdamW,
    data: &[(Context, Cardinalities)],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<f64>> {
    for (i, (_, n)) in data.iter().enumerate() {
        model.check_counts(n).map_err(|_| Error::Overflow {
            index: i,
            count: n.0.iter().copied().max().unwrap_or(0),
            limit: model.n_max,
        })?;
    }
    let order = epoch_order(data.len(), seed, epoch);
    let mut drop_rng = rng::stream(seed, &[epoch as u64, 1]);
    let mut trace = Vec::new();
    for (bi, chunk) in order.chunks(batch_size.max(1)).enumerate() {
        let ctx: Vec<Context> = chunk.iter().map(|&i| data[i].0).collect();
        let ns: Vec<Cardinalities> = chunk.iter().map(|&i| data[i].1).collect();
        let (loss, g) = model.loss_and_grads(&ctx, &ns, Some(&mut drop_rng))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(bi));
        }
        opt.step(&mut model.net.params, &g)?;
        trace.push(loss);
    }
    Ok(trace)
}

/// Mean negative log-likelihood without dropout.
pub fn evaluate(model: &CardinalityModel, data: &[(Context, Cardinalities)]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(512) {
        let ctx: Vec<Context> = chunk.iter().map(|d| d.0).collect();
        let ns: Vec<Cardinalities> = chunk.iter().map(|d| d.1).collect();
        total -= model.log_prob_batch(&ctx, &ns)?.iter().sum::<f64>();
    }
    Ok(total / data.len().max(1) as f64)
}

/// Trains for `cfg.epochs`; returns the mean training loss per epoch.
pub fn train(model: &mut CardinalityModel, data: &[(Context, Cardinalities)], cfg: &TrainConfig) -> Result<Vec<f64>> {
    let mut opt = AdamW::new(&model.net.params, cfg.optimizer);
    let mut per_epoch = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let trace = train_epoch(model, &mut opt, data, cfg.batch_size, cfg.seed, epoch)?;
        per_epoch.push(trace.iter().sum::<f64>() / trace.len().max(1) as f64);
    }
    Ok(per_epoch)
}
