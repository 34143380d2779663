//! Riemannian conditional flow matching: base distributions, couplings,
//! geodesic targets and the regression loss.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assign::{self, CostMatrix};
use crate::cardinality::TrainConfig;
use crate::dataset::{particle_offset, Cardinalities, Context, EncodedEvent, CONDITION_DIM, PARTICLE_DIM};
use crate::error::{Error, Result};
use crate::manifold::{cube_to_sphere, from_spherical, pole_rotation, rotate, ManifoldSpec};
use crate::net::{AdamW, Backbone, BackboneConfig, Grads, PdgRole, Role, SeqBatch, TokenType};
use crate::oracle::Condition;
use crate::rng::{self, StreamRng};

/// Exit point of the straight ray from `pos` on the cube surface along the
/// inward direction `dir`.
pub fn ray_trace(pos: &[f64; 3], dir: &[f64; 3]) -> Result<[f64; 3]> {
    let mut best = f64::INFINITY;
    let mut axis = usize::MAX;
    for i in 0..3 {
        if dir[i].abs() < 1e-12 {
            continue;
        }
        let t = (dir[i].signum() - pos[i]) / dir[i];
        if t < best {
            best = t;
            axis = i;
        }
    }
    if axis == usize::MAX || !(best > 0.0) {
        return Err(Error::invalid(format!("ray from {pos:?} along {dir:?} does not cross the cube")));
    }
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = (pos[i] + best * dir[i]).clamp(-1.0, 1.0);
    }
    out[axis] = dir[axis].signum();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseMode {
    Physical,
    IndependentGaussianLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub kappa: f64,
    pub e_cutoff: f64,
    pub mode: BaseMode,
}

impl BaseConfig {
    pub const KAPPA_PHYSICAL: f64 = 8.0;
    pub const KAPPA_ISOTROPIC: f64 = 1.4;

    pub fn physical(e_cutoff: f64) -> Self {
        Self {
            kappa: Self::KAPPA_PHYSICAL,
            e_cutoff,
            mode: BaseMode::Physical,
        }
    }

    pub fn isotropic(e_cutoff: f64) -> Self {
        Self {
            kappa: Self::KAPPA_ISOTROPIC,
            ..Self::physical(e_cutoff)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) || !(self.e_cutoff > 0.0) {
            return Err(Error::invalid(format!(
                "base needs kappa > 0 and e_cutoff > 0, got {} and {}",
                self.kappa, self.e_cutoff
            )));
        }
        Ok(())
    }
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self::physical(1.0)
    }
}

/// Condition-independent base randomness. A draw is realised for a given
/// condition by [`realize`], which lets couplings compare one noise draw
/// across several conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseNoise {
    pub deposition: f64,
    /// Per particle: `[n_pos, φ_pos, v_pos, n_dir, φ_dir, v_dir, n_mag]` with
    /// `n` standard normal, `φ ~ U(0, 2π)`, `v ~ U(0, 1)`.
    pub particles: Vec<[f64; 7]>,
}

pub fn draw_noise<R: Rng + ?Sized>(n_particles: usize, rng: &mut R) -> BaseNoise {
    let deposition = rng.sample(StandardNormal);
    let particles = (0..n_particles)
        .map(|_| {
            [
                rng.sample(StandardNormal),
                2.0 * PI * rng.random::<f64>(),
                rng.random(),
                rng.sample(StandardNormal),
                2.0 * PI * rng.random::<f64>(),
                rng.random(),
                rng.sample(StandardNormal),
            ]
        })
        .collect();
    BaseNoise { deposition, particles }
}

/// Poles of the physical base: sphere image of the ray-traced exit and the
/// incident direction.
#[derive(Debug, Clone, Copy)]
pub struct BaseFrame {
    rot_pos: [[f64; 3]; 3],
    rot_dir: [[f64; 3]; 3],
    e_upper: f64,
}

impl BaseFrame {
    pub fn new(c: &Condition, e_cutoff: f64) -> Result<Self> {
        let inc = &c.incident;
        let exit = cube_to_sphere(ray_trace(&inc.position, &inc.direction)?)?;
        Ok(Self {
            rot_pos: pole_rotation(&exit),
            rot_dir: pole_rotation(&inc.direction),
            e_upper: (inc.magnitude / e_cutoff).ln(),
        })
    }

    pub fn pole_position(&self) -> [f64; 3] {
        [self.rot_pos[0][2], self.rot_pos[1][2], self.rot_pos[2][2]]
    }

    pub fn pole_direction(&self) -> [f64; 3] {
        [self.rot_dir[0][2], self.rot_dir[1][2], self.rot_dir[2][2]]
    }

    pub fn e_upper(&self) -> f64 {
        self.e_upper
    }
}

/// Polar angle from the pole: `π·|tanh(n/κ)|`.
#[inline]
pub fn pole_angle(n: f64, kappa: f64) -> f64 {
    PI * (n / kappa).tanh().abs()
}

/// Log-magnitude coordinate `E_upper·(1 − tanh(|n|/2)) + 1`.
#[inline]
pub fn base_magnitude(n: f64, e_upper: f64) -> f64 {
    e_upper * (1.0 - (0.5 * n.abs()).tanh()) + 1.0
}

pub fn realize(noise: &BaseNoise, frame: &BaseFrame, cfg: &BaseConfig, out: &mut [f64]) {
    out[0] = noise.deposition;
    for (k, z) in noise.particles.iter().enumerate() {
        let off = particle_offset(k);
        let (pos, dir, u) = match cfg.mode {
            BaseMode::Physical => (
                rotate(&frame.rot_pos, &from_spherical(pole_angle(z[0], cfg.kappa), z[1])),
                rotate(&frame.rot_dir, &from_spherical(pole_angle(z[3], cfg.kappa), z[4])),
                base_magnitude(z[6], frame.e_upper),
            ),
            BaseMode::IndependentGaussianLogit => (
                from_spherical((1.0 - 2.0 * z[2]).clamp(-1.0, 1.0).acos(), z[1]),
                from_spherical((1.0 - 2.0 * z[5]).clamp(-1.0, 1.0).acos(), z[4]),
                z[6],
            ),
        };
        out[off..off + 3].copy_from_slice(&pos);
        out[off + 3..off + 6].copy_from_slice(&dir);
        out[off + 6] = u;
    }
}

/// One base draw on the cardinality-induced manifold.
pub fn sample_base<R: Rng + ?Sized>(
    condition: &Condition,
    card: Cardinalities,
    cfg: &BaseConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let frame = BaseFrame::new(condition, cfg.e_cutoff)?;
    let noise = draw_noise(card.total(), rng);
    let mut out = vec![0.0; 1 + PARTICLE_DIM * card.total()];
    realize(&noise, &frame, cfg, &mut out);
    Ok(out)
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn log_normal(x: f64) -> f64 {
    -0.5 * (x * x + LN_2PI)
}

/// Log-density (w.r.t. area) of a unit vector at polar angle `theta` from the
/// pole under the `π|tanh(n/κ)|` construction.
pub fn log_pole_density(theta: f64, kappa: f64) -> f64 {
    if !(theta > 0.0 && theta < PI) {
        return f64::NEG_INFINITY;
    }
    let r = theta / PI;
    let n = kappa * r.atanh();
    let dn = kappa / (PI * (1.0 - r * r));
    (2.0f64).ln() + log_normal(n) + dn.ln() - (2.0 * PI * theta.sin()).ln()
}

/// Log-density of the log-magnitude coordinate; `-∞` outside `(1, 1 + E_upper]`.
pub fn log_magnitude_density(u: f64, e_upper: f64) -> f64 {
    let w = 1.0 - (u - 1.0) / e_upper;
    if !(w >= 0.0 && w < 1.0) {
        return f64::NEG_INFINITY;
    }
    let n = 2.0 * w.atanh();
    let dn = 2.0 / (e_upper * (1.0 - w * w));
    (2.0f64).ln() + log_normal(n) + dn.ln()
}

/// Log-density of a base point w.r.t. the Riemannian volume of the product manifold.
pub fn log_base_density(point: &[f64], frame: &BaseFrame, cfg: &BaseConfig) -> f64 {
    let mut lp = log_normal(point[0]);
    let n = (point.len() - 1) / PARTICLE_DIM;
    let (pp, pd) = (frame.pole_position(), frame.pole_direction());
    for k in 0..n {
        let off = particle_offset(k);
        match cfg.mode {
            BaseMode::Physical => {
                let tp = crate::manifold::sphere_angle(&point[off..off + 3], &pp);
                let td = crate::manifold::sphere_angle(&point[off + 3..off + 6], &pd);
                lp += log_pole_density(tp, cfg.kappa) + log_pole_density(td, cfg.kappa);
                lp += log_magnitude_density(point[off + 6], frame.e_upper);
            }
            BaseMode::IndependentGaussianLogit => {
                lp += -2.0 * (4.0 * PI).ln() + log_normal(point[off + 6]);
            }
        }
    }
    lp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingKind {
    Independent,
    Ot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingConfig {
    pub kind: CouplingKind,
    pub group_size: usize,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            kind: CouplingKind::Ot,
            group_size: 128,
        }
    }
}

impl CouplingConfig {
    pub fn independent() -> Self {
        Self {
            kind: CouplingKind::Independent,
            group_size: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == CouplingKind::Ot && self.group_size < 2 {
            return Err(Error::invalid("ot coupling needs group_size >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    /// Index of the target within the batch.
    pub index: usize,
    pub y0: Vec<f64>,
    pub t: f64,
}

/// Base samples paired with `targets`. For OT, events with identical
/// cardinalities are grouped (at most `group_size` per group) and noise draws
/// are assigned to targets by minimum total squared geodesic distance.
pub fn make_pairs(
    targets: &[&EncodedEvent],
    base: &BaseConfig,
    coupling: &CouplingConfig,
    rng: &mut StreamRng,
) -> Result<Vec<TrainingPair>> {
    let frames = targets
        .iter()
        .map(|e| BaseFrame::new(&e.condition, base.e_cutoff))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs: Vec<TrainingPair> = Vec::with_capacity(targets.len());
    let mut groups: Vec<Vec<usize>> = Vec::new();
    match coupling.kind {
        CouplingKind::Independent => groups.extend((0..targets.len()).map(|i| vec![i])),
        CouplingKind::Ot => {
            let mut order: Vec<usize> = (0..targets.len()).collect();
            order.sort_by_key(|&i| targets[i].cardinalities);
            for run in order.chunk_by(|&a, &b| targets[a].cardinalities == targets[b].cardinalities) {
                groups.extend(run.chunks(coupling.group_size.max(1)).map(|c| c.to_vec()));
            }
        }
    }
    let mut scratch = Vec::new();
    for g in groups {
        let card = targets[g[0]].cardinalities;
        let spec = card.manifold();
        let dim = spec.dim();
        let noise: Vec<BaseNoise> = g.iter().map(|_| draw_noise(card.total(), rng)).collect();
        let perm = if g.len() > 1 {
            let cost = CostMatrix::from_fn(g.len(), |i, j| {
                scratch.resize(dim, 0.0);
                realize(&noise[j], &frames[g[i]], base, &mut scratch);
                spec.sq_distance(&scratch, &targets[g[i]].target.coords)
            })?;
            assign::solve(&cost)
        } else {
            vec![0]
        };
        for (i, &ti) in g.iter().enumerate() {
            let mut y0 = vec![0.0; dim];
            realize(&noise[perm[i]], &frames[ti], base, &mut y0);
            pairs.push(TrainingPair {
                index: ti,
                y0,
                t: 0.0,
            });
        }
    }
    pairs.sort_by_key(|p| p.index);
    for p in &mut pairs {
        p.t = rng.random();
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 4,
            heads: 4,
            ff_mult: 4,
            dropout: 0.02,
        }
    }
}

/// Time-dependent velocity field on event manifolds.
#[derive(Debug, Clone)]
pub struct FlowModel {
    pub net: Backbone,
}

/// Token input width: a particle block padded to the condition width.
const TOKEN_DIM: usize = CONDITION_DIM;

impl FlowModel {
    pub fn new(cfg: FlowConfig, seed: u64) -> Result<Self> {
        let net = Backbone::new(
            BackboneConfig {
                in_dim: TOKEN_DIM,
                out_dim: PARTICLE_DIM,
                cond_dim: CONDITION_DIM,
                hidden: cfg.hidden,
                layers: cfg.layers,
                heads: cfg.heads,
                ff_mult: cfg.ff_mult,
                dropout: cfg.dropout,
                time_embedding: true,
                causal: false,
            },
            seed,
        )?;
        Ok(Self { net })
    }

    pub fn from_backbone(net: Backbone) -> Result<Self> {
        let c = net.cfg;
        if c.causal || !c.time_embedding || c.in_dim != TOKEN_DIM || c.out_dim != PARTICLE_DIM {
            return Err(Error::invalid("backbone is not a flow velocity field"));
        }
        Ok(Self { net })
    }

    /// Tokens `[condition, deposition, particles…, padding…]`.
    pub fn sequences(&self, states: &[&[f64]], cards: &[Cardinalities], ctx: &[Context], t: &[f64]) -> SeqBatch {
        let n_max = cards.iter().map(|c| c.total()).max().unwrap_or(0);
        let len = 2 + n_max;
        let b = states.len();
        let mut tokens = vec![0.0; b * len * TOKEN_DIM];
        let mut roles = Vec::with_capacity(b * len);
        let mut cond = Vec::with_capacity(b * CONDITION_DIM);
        for (i, ((y, card), c)) in states.iter().zip(cards).zip(ctx).enumerate() {
            let row = &mut tokens[i * len * TOKEN_DIM..(i + 1) * len * TOKEN_DIM];
            row[..CONDITION_DIM].copy_from_slice(&c.cond);
            row[TOKEN_DIM] = y[0];
            roles.push(Role::new(TokenType::Condition, c.species.into()));
            roles.push(Role::new(TokenType::Deposition, PdgRole::None));
            let species = card.slot_species();
            for slot in 0..n_max {
                let tok = &mut row[(2 + slot) * TOKEN_DIM..(3 + slot) * TOKEN_DIM];
                if let Some(s) = species.get(slot) {
                    let off = particle_offset(slot);
                    tok[..PARTICLE_DIM].copy_from_slice(&y[off..off + PARTICLE_DIM]);
                    roles.push(Role::new(TokenType::Particle, (*s).into()));
                } else {
                    roles.push(Role::padding());
                }
            }
            cond.extend_from_slice(&c.cond);
        }
        SeqBatch {
            batch: b,
            len,
            tokens,
            roles,
            time: Some(t.to_vec()),
            cond,
            cond_pdg: ctx.iter().map(|c| c.species.into()).collect(),
        }
    }

    /// Gathers raw outputs of event `i` into manifold layout (unprojected).
    fn gather(out: &[f64], i: usize, len: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[0] = out[(i * len + 1) * PARTICLE_DIM];
        for k in 0..(dim - 1) / PARTICLE_DIM {
            let src = (i * len + 2 + k) * PARTICLE_DIM;
            v[particle_offset(k)..particle_offset(k + 1)].copy_from_slice(&out[src..src + PARTICLE_DIM]);
        }
        v
    }

    /// Tangent velocities at `states` and time `t` (one per state).
    pub fn velocity(&self, states: &[&[f64]], cards: &[Cardinalities], ctx: &[Context], t: &[f64]) -> Result<Vec<Vec<f64>>> {
        let batch = self.sequences(states, cards, ctx, t);
        let out = self.net.predict(&batch)?;
        Ok(states
            .iter()
            .zip(cards)
            .enumerate()
            .map(|(i, (y, c))| {
                let mut v = Self::gather(&out, i, batch.len, y.len());
                c.manifold().project_in_place(y, &mut v);
                v
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Grads,
    /// Pairs dropped because a sphere factor was antipodal.
    pub skipped: usize,
}

/// Mean squared error between projected outputs and geodesic velocities over
/// all unmasked coordinates, with parameter gradients.
pub fn cfm_loss(
    model: &FlowModel,
    targets: &[&EncodedEvent],
    pairs: &[TrainingPair],
    rng: Option<&mut StreamRng>,
) -> Result<LossOutput> {
    let mut yt = Vec::with_capacity(pairs.len());
    let mut vt = Vec::with_capacity(pairs.len());
    let mut specs: Vec<ManifoldSpec> = Vec::with_capacity(pairs.len());
    let mut kept: Vec<&TrainingPair> = Vec::with_capacity(pairs.len());
    for p in pairs {
        let e = targets[p.index];
        let spec = e.cardinalities.manifold();
        let mut y = vec![0.0; spec.dim()];
        let mut v = vec![0.0; spec.dim()];
        match spec.interpolate_into(&p.y0, &e.target.coords, p.t, &mut y, &mut v) {
            Ok(()) => {}
            Err(Error::Antipodal { .. }) => continue,
            Err(e) => return Err(e),
        }
        yt.push(y);
        vt.push(v);
        specs.push(spec);
        kept.push(p);
    }
    let skipped = pairs.len() - kept.len();
    let pairs = kept;
    if pairs.is_empty() {
        return Ok(LossOutput {
            loss: 0.0,
            grads: model.net.params.zero_grads(),
            skipped,
        });
    }
    let states: Vec<&[f64]> = yt.iter().map(|y| y.as_slice()).collect();
    let cards: Vec<Cardinalities> = pairs.iter().map(|p| targets[p.index].cardinalities).collect();
    let ctx: Vec<Context> = pairs.iter().map(|p| Context::of(targets[p.index])).collect();
    let ts: Vec<f64> = pairs.iter().map(|p| p.t).collect();
    let batch = model.sequences(&states, &cards, &ctx, &ts);
    let (out, cache) = model.net.forward(&batch, rng)?;
    let n_coords: usize = yt.iter().map(|y| y.len()).sum();
    let scale = 1.0 / n_coords as f64;
    let mut loss = 0.0;
    let mut d_out = vec![0.0; out.len()];
    let len = batch.len;
    for (i, ((y, v_star), spec)) in yt.iter().zip(&vt).zip(&specs).enumerate() {
        let mut v = FlowModel::gather(&out, i, len, y.len());
        spec.project_in_place(y, &mut v);
        let mut r: Vec<f64> = v.iter().zip(v_star).map(|(a, b)| a - b).collect();
        let li: f64 = r.iter().map(|x| x * x).sum();
        if !li.is_finite() {
            return Err(Error::NonFiniteLoss(pairs[i].index));
        }
        loss += li;
        // the projection is symmetric, so the pullback of 2r is P·2r
        spec.project_in_place(y, &mut r);
        d_out[(i * len + 1) * PARTICLE_DIM] = 2.0 * scale * r[0];
        for k in 0..(y.len() - 1) / PARTICLE_DIM {
            let dst = (i * len + 2 + k) * PARTICLE_DIM;
            for c in 0..PARTICLE_DIM {
                d_out[dst + c] = 2.0 * scale * r[particle_offset(k) + c];
            }
        }
    }
    let (grads, _) = model.net.backward(&batch, &cache, &d_out);
    Ok(LossOutput {
        loss: loss * scale,
        grads,
        skipped,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub skipped_pairs: usize,
}

/// Batches of indices with similar sequence lengths, in shuffled order.
fn bucketed_batches(data: &[EncodedEvent], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let order = crate::cardinality::epoch_order(data.len(), seed, epoch);
    let mut batches = Vec::new();
    for window in order.chunks(batch_size * 32) {
        let mut w = window.to_vec();
        w.sort_by_key(|&i| data[i].cardinalities);
        batches.extend(w.chunks(batch_size).map(|c| c.to_vec()));
    }
    batches.shuffle(&mut rng::stream(seed, &[epoch as u64, 2]));
    batches
}

/// Validation loss on fixed pairs (independent of training state).
pub fn evaluate_flow(
    model: &FlowModel,
    data: &[EncodedEvent],
    base: &BaseConfig,
    coupling: &CouplingConfig,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut weight = 0.0;
    for (bi, chunk) in data.chunks(256).enumerate() {
        let targets: Vec<&EncodedEvent> = chunk.iter().collect();
        let pairs = make_pairs(&targets, base, coupling, &mut rng::stream(seed, &[bi as u64]))?;
        let n: usize = targets.iter().map(|e| e.target.coords.len()).sum();
        total += cfm_loss(model, &targets, &pairs, None)?.loss * n as f64;
        weight += n as f64;
    }
    Ok(total / weight.max(1.0))
}

/// Trains the velocity field. `on_epoch(epoch, model, train, val)` is called
/// after every epoch (for checkpoints and logging).
#[allow(clippy::too_many_arguments)]
pub fn train_flow(
    model: &mut FlowModel,
    data: &[EncodedEvent],
    val: &[EncodedEvent],
    base: &BaseConfig,
    coupling: &CouplingConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &FlowModel, f64, f64) -> Result<()>,
) -> Result<FlowTrace> {
    base.validate()?;
    coupling.validate()?;
    let mut opt = AdamW::new(&model.net.params, cfg.optimizer);
    let mut trace = FlowTrace::default();
    let total_steps = cfg.epochs * data.len().div_ceil(cfg.batch_size.max(1));
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut count = 0;
        for (bi, idx) in bucketed_batches(data, cfg.batch_size.max(1), cfg.seed, epoch).iter().enumerate() {
            let mut r = rng::stream(cfg.seed, &[epoch as u64, 3, bi as u64]);
            let targets: Vec<&EncodedEvent> = idx.iter().map(|&i| &data[i]).collect();
            let pairs = make_pairs(&targets, base, coupling, &mut r)?;
            let out = cfm_loss(model, &targets, &pairs, Some(&mut r)).map_err(|e| match e {
                Error::NonFiniteLoss(_) => Error::NonFiniteLoss(bi),
                other => other,
            })?;
            trace.skipped_pairs += out.skipped;
            let lr = cfg.learning_rate(opt.step as usize, total_steps);
            opt.step_with_lr(&mut model.net.params, &out.grads, lr)?;
            sum += out.loss;
            count += 1;
        }
        let train = sum / count.max(1) as f64;
        let v = if val.is_empty() {
            f64::NAN
        } else {
            evaluate_flow(model, val, base, coupling, rng::named(cfg.seed, "validation"))?
        };
        trace.train_loss.push(train);
        trace.val_loss.push(v);
        on_epoch(epoch, model, train, v)?;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{encode_event, sample_gun, EventRecord};
    use crate::manifold::{dot3, sphere_angle};
    use crate::oracle::{simulate_event, ToyPhysicsConfig};

    fn encoded(n: usize, seed: u64) -> Vec<EncodedEvent> {
        let cfg = ToyPhysicsConfig::default();
        (0..n)
            .map(|i| {
                let mut r = rng::stream(seed, &[i as u64]);
                let c = sample_gun(&mut r);
                let rec = EventRecord::from_event(&simulate_event(&cfg, &c, &mut r));
                encode_event(&rec, cfg.e_cutoff).unwrap().0
            })
            .collect()
    }

    /// Marches along the ray in small steps, then bisects the exit.
    fn march(pos: &[f64; 3], dir: &[f64; 3]) -> [f64; 3] {
        let inside = |s: f64| (0..3).all(|i| (pos[i] + s * dir[i]).abs() <= 1.0);
        let mut s = 1e-9;
        while inside(s + 1e-3) {
            s += 1e-3;
        }
        let (mut lo, mut hi) = (s, s + 1e-3);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if inside(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        [pos[0] + lo * dir[0], pos[1] + lo * dir[1], pos[2] + lo * dir[2]]
    }

    #[test]
    fn ray_trace_examples() {
        assert_eq!(ray_trace(&[-1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), [1.0, 0.0, 0.0]);
        let r = 1.0 / 2f64.sqrt();
        let out = ray_trace(&[-1.0, 0.0, 0.0], &[r, r, 0.0]).unwrap();
        assert!(out[0].abs() < 1e-12 && out[1] == 1.0 && out[2] == 0.0);
        assert!(ray_trace(&[-1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn ray_trace_agrees_with_marcher() {
        let mut r = rng::stream(1, &[]);
        for _ in 0..10_000 {
            let c = sample_gun(&mut r);
            let (p, d) = (c.incident.position, c.incident.direction);
            let out = ray_trace(&p, &d).unwrap();
            let m = out.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!((m - 1.0).abs() < 1e-9);
            let reference = march(&p, &d);
            for i in 0..3 {
                assert!((out[i] - reference[i]).abs() < 1e-9);
            }
        }
    }

    fn beam() -> Condition {
        crate::dataset::ConditionTemplate::default().condition().unwrap()
    }

    #[test]
    fn sharp_base_collapses_to_poles() {
        let cfg = BaseConfig {
            kappa: 1e6,
            ..BaseConfig::physical(1.0)
        };
        let c = beam();
        let frame = BaseFrame::new(&c, 1.0).unwrap();
        let mut r = rng::stream(2, &[]);
        for _ in 0..1000 {
            let y = sample_base(&c, Cardinalities([1, 0, 1]), &cfg, &mut r).unwrap();
            for k in 0..2 {
                let off = particle_offset(k);
                assert!(sphere_angle(&y[off..off + 3], &frame.pole_position()) < 1e-3);
                assert!(sphere_angle(&y[off + 3..off + 6], &[1.0, 0.0, 0.0]) < 1e-3);
            }
        }
        assert_eq!(frame.pole_position(), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn isotropic_base_matches_quadrature() {
        let kappa = 1.4;
        // E[cos(π|tanh(n/κ)|)] by trapezoid quadrature over the normal density
        let m = 20_000;
        let mut expected = 0.0;
        for i in 0..=m {
            let n = -10.0 + 20.0 * i as f64 / m as f64;
            let w = if i == 0 || i == m { 0.5 } else { 1.0 };
            expected += w * (20.0 / m as f64) * (-0.5 * n * n).exp() / (2.0 * PI).sqrt() * pole_angle(n, kappa).cos();
        }
        let cfg = BaseConfig::isotropic(1.0);
        let c = beam();
        let frame = BaseFrame::new(&c, 1.0).unwrap();
        let mut r = rng::stream(3, &[]);
        let n = 100_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let y = sample_base(&c, Cardinalities([0, 0, 1]), &cfg, &mut r).unwrap();
                dot3(&y[1..4], &frame.pole_position())
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * sd / (n as f64).sqrt(), "{mean} vs {expected}");
    }

    #[test]
    fn empty_cardinalities_give_deposition_only() {
        let y = sample_base(&beam(), Cardinalities::default(), &BaseConfig::default(), &mut rng::stream(4, &[])).unwrap();
        assert_eq!(y.len(), 1);
    }

    #[test]
    fn base_samples_are_valid_points() {
        let mut r = rng::stream(5, &[]);
        for mode in [BaseMode::Physical, BaseMode::IndependentGaussianLogit] {
            let cfg = BaseConfig { mode, ..BaseConfig::default() };
            for _ in 0..200 {
                let c = sample_gun(&mut r);
                let card = Cardinalities([1, 2, 3]);
                let y = sample_base(&c, card, &cfg, &mut r).unwrap();
                card.manifold().validate_point(&y).unwrap();
                let lp = log_base_density(&y, &BaseFrame::new(&c, 1.0).unwrap(), &cfg);
                assert!(lp.is_finite());
            }
        }
    }

    #[test]
    fn pole_density_integrates_to_one() {
        for kappa in [1.4, 8.0] {
            let m = 200_000;
            let h = PI / m as f64;
            let total: f64 = (1..m)
                .map(|i| {
                    let th = i as f64 * h;
                    h * 2.0 * PI * th.sin() * log_pole_density(th, kappa).exp()
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-4, "kappa {kappa}: {total}");
        }
        let e_up = 5.0;
        let m = 200_000;
        let h = e_up / m as f64;
        let total: f64 = (0..m).map(|i| h * log_magnitude_density(1.0 + (i as f64 + 0.5) * h, e_up).exp()).sum();
        assert!((total - 1.0).abs() < 1e-3, "{total}");
        assert_eq!(log_magnitude_density(0.5, e_up), f64::NEG_INFINITY);
    }

    #[test]
    fn ot_pairs_never_cost_more_than_independent() {
        let data = encoded(400, 6);
        let targets: Vec<&EncodedEvent> = data.iter().collect();
        let base = BaseConfig::default();
        let ot = CouplingConfig {
            kind: CouplingKind::Ot,
            group_size: 64,
        };
        // identical noise streams: OT only permutes noise within groups
        let a = make_pairs(&targets, &base, &ot, &mut rng::stream(7, &[])).unwrap();
        let mut grouped = targets.clone();
        grouped.sort_by_key(|e| e.cardinalities);
        let cost = |pairs: &[TrainingPair], t: &[&EncodedEvent]| -> f64 {
            pairs
                .iter()
                .map(|p| t[p.index].cardinalities.manifold().sq_distance(&p.y0, &t[p.index].target.coords))
                .sum()
        };
        let ot_cost = cost(&a, &targets);
        // identity assignment of the same noise draws
        let mut frames_noise = rng::stream(7, &[]);
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.sort_by_key(|&i| targets[i].cardinalities);
        let mut ident = 0.0;
        for run in order.chunk_by(|&x, &y| targets[x].cardinalities == targets[y].cardinalities) {
            for g in run.chunks(64) {
                let card = targets[g[0]].cardinalities;
                for &i in g {
                    let noise = draw_noise(card.total(), &mut frames_noise);
                    let mut y0 = vec![0.0; card.manifold().dim()];
                    realize(&noise, &BaseFrame::new(&targets[i].condition, 1.0).unwrap(), &base, &mut y0);
                    ident += card.manifold().sq_distance(&y0, &targets[i].target.coords);
                }
            }
        }
        assert!(ot_cost <= ident + 1e-9, "{ot_cost} > {ident}");
        let single = make_pairs(&targets[..1], &base, &ot, &mut rng::stream(8, &[])).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn times_are_uniform() {
        let data = encoded(50, 9);
        let targets: Vec<&EncodedEvent> = data.iter().collect();
        let mut ts = Vec::new();
        let mut r = rng::stream(10, &[]);
        while ts.len() < 100_000 {
            ts.extend(make_pairs(&targets, &BaseConfig::default(), &CouplingConfig::independent(), &mut r).unwrap().iter().map(|p| p.t));
        }
        ts.sort_by(f64::total_cmp);
        let n = ts.len() as f64;
        let d = ts.iter().enumerate().map(|(i, t)| ((i + 1) as f64 / n - t).abs().max((t - i as f64 / n).abs())).fold(0.0, f64::max);
        // KS critical value at p = 0.001 is 1.95/√n
        assert!(d < 1.95 / n.sqrt(), "KS statistic {d}");
    }

    fn tiny_flow() -> FlowModel {
        FlowModel::new(
            FlowConfig {
                hidden: 8,
                layers: 2,
                heads: 2,
                ff_mult: 2,
                dropout: 0.0,
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn zero_model_loss_is_mean_squared_velocity() {
        let data = encoded(30, 11);
        let targets: Vec<&EncodedEvent> = data.iter().collect();
        let pairs = make_pairs(&targets, &BaseConfig::default(), &CouplingConfig::independent(), &mut rng::stream(12, &[])).unwrap();
        let loss = cfm_loss(&tiny_flow(), &targets, &pairs, None).unwrap().loss;
        let mut total = 0.0;
        let mut n = 0;
        for p in &pairs {
            let e = targets[p.index];
            let spec = e.cardinalities.manifold();
            let v = spec.geodesic_velocity(&spec.point(p.y0.clone()).unwrap(), &e.target, p.t).unwrap();
            total += v.components.iter().map(|x| x * x).sum::<f64>();
            n += v.components.len();
        }
        assert!((loss - total / n as f64).abs() < 1e-12);
    }

    #[test]
    fn cfm_gradient_matches_finite_differences() {
        let data = encoded(12, 13);
        let targets: Vec<&EncodedEvent> = data.iter().collect();
        let pairs = make_pairs(&targets, &BaseConfig::default(), &CouplingConfig::independent(), &mut rng::stream(14, &[])).unwrap();
        let mut m = tiny_flow();
        crate::net::randomize(&mut m.net.params, 0.4, 15);
        let g = cfm_loss(&m, &targets, &pairs, None).unwrap().grads;
        for ti in 0..m.net.params.tensors.len() {
            let len = m.net.params.tensors[ti].data.len();
            let mut num = 0.0;
            let mut den: f64 = 0.0;
            for k in (0..len).step_by(1 + len / 16) {
                let orig = m.net.params.tensors[ti].data[k];
                m.net.params.tensors[ti].data[k] = orig + 1e-5;
                let lp = cfm_loss(&m, &targets, &pairs, None).unwrap().loss;
                m.net.params.tensors[ti].data[k] = orig - 1e-5;
                let lm = cfm_loss(&m, &targets, &pairs, None).unwrap().loss;
                m.net.params.tensors[ti].data[k] = orig;
                let fd = (lp - lm) / 2e-5;
                num += (fd - g.0[ti][k]).powi(2);
                den += fd * fd;
            }
            assert!(num.sqrt() <= 1e-4 * den.sqrt().max(1e-8), "{}", m.net.params.tensors[ti].name);
        }
    }
}
