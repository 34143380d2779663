//! ODE integration of velocity fields on product manifolds, ancestral sampling
//! and exact likelihoods.

use serde::{Deserialize, Serialize};

use crate::cardinality::CardinalityModel;
use crate::cfm::{draw_noise, log_base_density, realize, BaseConfig, BaseFrame, FlowModel};
use crate::dataset::{condition_vector, decode_sample, Cardinalities, Context, EventRecord};
use crate::error::{Error, Result};
use crate::manifold::ManifoldSpec;
use crate::oracle::Condition;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Euler,
    Midpoint,
    Rk4,
}

impl SolverMethod {
    pub const ALL: [SolverMethod; 3] = [SolverMethod::Euler, SolverMethod::Midpoint, SolverMethod::Rk4];

    pub fn stages(self) -> usize {
        match self {
            SolverMethod::Euler => 1,
            SolverMethod::Midpoint => 2,
            SolverMethod::Rk4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SolverMethod::Euler => "euler",
            SolverMethod::Midpoint => "midpoint",
            SolverMethod::Rk4 => "rk4",
        }
    }

    /// Butcher tableau `(a, b, c)` of the explicit scheme.
    fn tableau(self) -> (&'static [&'static [f64]], &'static [f64], &'static [f64]) {
        match self {
            SolverMethod::Euler => (&[&[]], &[1.0], &[0.0]),
            SolverMethod::Midpoint => (&[&[], &[0.5]], &[0.0, 1.0], &[0.0, 0.5]),
            SolverMethod::Rk4 => (
                &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
                &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
                &[0.0, 0.5, 0.5, 1.0],
            ),
        }
    }
}

impl std::str::FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown solver method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Midpoint,
            steps: 10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("solver needs at least one step"));
        }
        Ok(())
    }

    /// Velocity evaluations per trajectory.
    pub fn evaluations(&self) -> usize {
        self.steps * self.method.stages()
    }
}

/// A batched, possibly time-dependent velocity field. `items[i]` identifies
/// which problem `states[i]` belongs to (several states may share an item).
pub trait VelocityField {
    fn eval(&self, items: &[usize], states: &[&[f64]], t: f64) -> Result<Vec<Vec<f64>>>;
}

/// Adapter for a per-state closure `(item, state, t) -> velocity`.
pub struct FnField<F>(pub F);

impl<F: Fn(usize, &[f64], f64) -> Vec<f64>> VelocityField for FnField<F> {
    fn eval(&self, items: &[usize], states: &[&[f64]], t: f64) -> Result<Vec<Vec<f64>>> {
        Ok(items.iter().zip(states).map(|(&i, y)| (self.0)(i, y, t)).collect())
    }
}

/// The learned field for a fixed set of conditions and cardinalities.
pub struct ConditionedFlow<'a> {
    pub model: &'a FlowModel,
    pub cards: Vec<Cardinalities>,
    pub ctx: Vec<Context>,
}

impl VelocityField for ConditionedFlow<'_> {
    fn eval(&self, items: &[usize], states: &[&[f64]], t: f64) -> Result<Vec<Vec<f64>>> {
        let cards: Vec<Cardinalities> = items.iter().map(|&i| self.cards[i]).collect();
        let ctx: Vec<Context> = items.iter().map(|&i| self.ctx[i]).collect();
        let ts = vec![t; items.len()];
        let mut out = Vec::with_capacity(items.len());
        // padded attention cost grows with the longest sequence, so keep chunks modest
        for start in (0..items.len()).step_by(512) {
            let end = (start + 512).min(items.len());
            out.extend(self.model.velocity(&states[start..end], &cards[start..end], &ctx[start..end], &ts[start..end])?);
        }
        Ok(out)
    }
}

fn check_finite(states: &[Vec<f64>], step: usize) -> Result<()> {
    if states.iter().all(|y| y.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::Integration(step))
    }
}

/// Projected, retracted velocities at `states`.
fn stage(field: &dyn VelocityField, specs: &[ManifoldSpec], states: &[Vec<f64>], t: f64) -> Result<Vec<Vec<f64>>> {
    let items: Vec<usize> = (0..states.len()).collect();
    let refs: Vec<&[f64]> = states.iter().map(|s| s.as_slice()).collect();
    let mut v = field.eval(&items, &refs, t)?;
    for ((vi, y), spec) in v.iter_mut().zip(states).zip(specs) {
        spec.project_in_place(y, vi);
    }
    Ok(v)
}

/// Advances every state by one explicit step of size `h` from time `t`.
/// Stage points and the result are retracted onto the manifold.
fn rk_step(
    field: &dyn VelocityField,
    specs: &[ManifoldSpec],
    y: &[Vec<f64>],
    t: f64,
    h: f64,
    method: SolverMethod,
) -> Result<Vec<Vec<f64>>> {
    let (a, b, c) = method.tableau();
    let mut ks: Vec<Vec<Vec<f64>>> = Vec::with_capacity(b.len());
    for s in 0..b.len() {
        let pts: Vec<Vec<f64>> = if s == 0 {
            y.to_vec()
        } else {
            y.iter()
                .enumerate()
                .map(|(i, yi)| {
                    let mut p = yi.clone();
                    for (j, &aij) in a[s].iter().enumerate() {
                        if aij != 0.0 {
                            p.iter_mut().zip(&ks[j][i]).for_each(|(p, k)| *p += h * aij * k);
                        }
                    }
                    specs[i].retract_in_place(&mut p);
                    p
                })
                .collect()
        };
        ks.push(stage(field, specs, &pts, t + c[s] * h)?);
    }
    Ok(y
        .iter()
        .enumerate()
        .map(|(i, yi)| {
            let mut p = yi.clone();
            for (s, &bs) in b.iter().enumerate() {
                if bs != 0.0 {
                    p.iter_mut().zip(&ks[s][i]).for_each(|(p, k)| *p += h * bs * k);
                }
            }
            specs[i].retract_in_place(&mut p);
            p
        })
        .collect())
}

/// Integrates a batch of states from `t0` to `t1` (either direction).
pub fn integrate_batch(
    field: &dyn VelocityField,
    specs: &[ManifoldSpec],
    y0: Vec<Vec<f64>>,
    cfg: &SolverConfig,
    t0: f64,
    t1: f64,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    for (y, s) in y0.iter().zip(specs) {
        s.validate_point(y)?;
    }
    let h = (t1 - t0) / cfg.steps as f64;
    let mut y = y0;
    for step in 0..cfg.steps {
        y = rk_step(field, specs, &y, t0 + step as f64 * h, h, cfg.method)?;
        check_finite(&y, step)?;
    }
    Ok(y)
}

/// Integrates the learned field for one event from t = 0 to t = 1.
pub fn integrate(
    model: &FlowModel,
    y0: &[f64],
    condition: &Condition,
    card: Cardinalities,
    e_cutoff: f64,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let field = ConditionedFlow {
        model,
        cards: vec![card],
        ctx: vec![Context::new(&condition_vector(condition, e_cutoff), condition.incident.species)],
    };
    Ok(integrate_batch(&field, &[card.manifold()], vec![y0.to_vec()], cfg, 0.0, 1.0)?.remove(0))
}

/// Riemannian divergence of the projected field at each state, by central
/// differences along an orthonormal tangent basis.
pub fn divergence(
    field: &dyn VelocityField,
    specs: &[ManifoldSpec],
    states: &[Vec<f64>],
    t: f64,
    eps: f64,
) -> Result<Vec<f64>> {
    let mut items = Vec::new();
    let mut pts: Vec<Vec<f64>> = Vec::new();
    let mut bases = Vec::with_capacity(states.len());
    for (i, (y, spec)) in states.iter().zip(specs).enumerate() {
        let basis = spec.tangent_basis(y);
        for e in &basis {
            for sign in [1.0, -1.0] {
                let v: Vec<f64> = e.iter().map(|x| sign * eps * x).collect();
                let mut p = vec![0.0; y.len()];
                spec.exp_into(y, &v, &mut p);
                pts.push(p);
                items.push(i);
            }
        }
        bases.push(basis);
    }
    let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
    let mut vel = field.eval(&items, &refs, t)?;
    for ((v, p), &i) in vel.iter_mut().zip(&pts).zip(&items) {
        specs[i].project_in_place(p, v);
    }
    let mut out = Vec::with_capacity(states.len());
    let mut k = 0;
    for basis in &bases {
        let mut div = 0.0;
        for e in basis {
            let (vp, vm) = (&vel[k], &vel[k + 1]);
            div += e.iter().zip(vp.iter().zip(vm)).map(|(e, (a, b))| e * (a - b)).sum::<f64>() / (2.0 * eps);
            k += 2;
        }
        out.push(div);
    }
    Ok(out)
}

/// Finite-difference step of the divergence.
pub const DIVERGENCE_STEP: f64 = 1e-6;

/// Integrates states backward from t = 1 to 0 together with the accumulated
/// divergence. Returns `(y0, −∫₀¹ div dt)` per state.
pub fn backward_with_divergence(
    field: &dyn VelocityField,
    specs: &[ManifoldSpec],
    y1: Vec<Vec<f64>>,
    cfg: &SolverConfig,
) -> Result<Vec<(Vec<f64>, f64)>> {
    cfg.validate()?;
    for (y, s) in y1.iter().zip(specs) {
        s.validate_point(y)?;
    }
    let (a, b, c) = cfg.method.tableau();
    let h = -1.0 / cfg.steps as f64;
    let mut y = y1;
    let mut acc = vec![0.0; y.len()];
    for step in 0..cfg.steps {
        let t = 1.0 + step as f64 * h;
        let mut ks: Vec<Vec<Vec<f64>>> = Vec::with_capacity(b.len());
        let mut ds: Vec<Vec<f64>> = Vec::with_capacity(b.len());
        for s in 0..b.len() {
            let pts: Vec<Vec<f64>> = y
                .iter()
                .enumerate()
                .map(|(i, yi)| {
                    let mut p = yi.clone();
                    for (j, &aij) in a[s].iter().enumerate() {
                        if aij != 0.0 {
                            p.iter_mut().zip(&ks[j][i]).for_each(|(p, k)| *p += h * aij * k);
                        }
                    }
                    specs[i].retract_in_place(&mut p);
                    p
                })
                .collect();
            let ts = t + c[s] * h;
            ks.push(stage(field, specs, &pts, ts)?);
            ds.push(divergence(field, specs, &pts, ts, DIVERGENCE_STEP)?);
        }
        for i in 0..y.len() {
            for (s, &bs) in b.iter().enumerate() {
                if bs != 0.0 {
                    let k = &ks[s][i];
                    y[i].iter_mut().zip(k).for_each(|(p, k)| *p += h * bs * k);
                    // dℓ/dt = div from ℓ(1) = 0 gives ℓ(0) = −∫₀¹ div
                    acc[i] += h * bs * ds[s][i];
                }
            }
            specs[i].retract_in_place(&mut y[i]);
        }
        check_finite(&y, step)?;
    }
    Ok(y.into_iter().zip(acc).collect())
}

/// `log q(y1)` under the learned flow: `log p_base(y0) − ∫₀¹ div v dt`.
/// Returns `-∞` when `y0` falls outside the support of the base.
pub fn log_likelihood(
    model: &FlowModel,
    y1: &[f64],
    condition: &Condition,
    card: Cardinalities,
    base: &BaseConfig,
    cfg: &SolverConfig,
) -> Result<f64> {
    Ok(log_likelihood_batch(model, &[(y1, condition, card)], base, cfg)?[0])
}

pub fn log_likelihood_batch(
    model: &FlowModel,
    events: &[(&[f64], &Condition, Cardinalities)],
    base: &BaseConfig,
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    let field = ConditionedFlow {
        model,
        cards: events.iter().map(|e| e.2).collect(),
        ctx: events
            .iter()
            .map(|e| Context::new(&condition_vector(e.1, base.e_cutoff), e.1.incident.species))
            .collect(),
    };
    let specs: Vec<ManifoldSpec> = events.iter().map(|e| e.2.manifold()).collect();
    let y1 = events.iter().map(|e| e.0.to_vec()).collect();
    let back = backward_with_divergence(&field, &specs, y1, cfg)?;
    events
        .iter()
        .zip(back)
        .map(|(e, (y0, log_jac))| {
            let frame = BaseFrame::new(e.1, base.e_cutoff)?;
            Ok(log_base_density(&y0, &frame, base) + log_jac)
        })
        .collect()
}

/// Per-event randomness: the cardinality draw uses `seed` directly, the base
/// draw a child stream.
pub fn sample_kernel(
    card_model: &CardinalityModel,
    flow: &FlowModel,
    condition: &Condition,
    base: &BaseConfig,
    solver: &SolverConfig,
    seed: u64,
) -> Result<EventRecord> {
    Ok(sample_kernel_batch(card_model, flow, std::slice::from_ref(condition), &[seed], base, solver)?.remove(0))
}

/// Batched ancestral sampling. Event `i` depends only on `conditions[i]` and
/// `seeds[i]`, never on the rest of the batch.
pub fn sample_kernel_batch(
    card_model: &CardinalityModel,
    flow: &FlowModel,
    conditions: &[Condition],
    seeds: &[u64],
    base: &BaseConfig,
    solver: &SolverConfig,
) -> Result<Vec<EventRecord>> {
    if conditions.len() != seeds.len() {
        return Err(Error::DimensionMismatch {
            expected: conditions.len(),
            got: seeds.len(),
        });
    }
    let ctx: Vec<Context> = conditions
        .iter()
        .map(|c| Context::new(&condition_vector(c, base.e_cutoff), c.incident.species))
        .collect();
    let cards = card_model.sample_batch(&ctx, seeds)?;
    sample_flow_batch(flow, conditions, &cards, seeds, base, solver)
}

/// Base draws for given cardinalities, integrated and decoded.
pub fn sample_flow_batch(
    flow: &FlowModel,
    conditions: &[Condition],
    cards: &[Cardinalities],
    seeds: &[u64],
    base: &BaseConfig,
    solver: &SolverConfig,
) -> Result<Vec<EventRecord>> {
    let points = base_points(conditions, cards, seeds, base)?;
    let ctx: Vec<Context> = conditions
        .iter()
        .map(|c| Context::new(&condition_vector(c, base.e_cutoff), c.incident.species))
        .collect();
    // similar lengths share a batch to limit padding
    let mut order: Vec<usize> = (0..conditions.len()).collect();
    order.sort_by_key(|&i| cards[i].total());
    let mut finals: Vec<Option<Vec<f64>>> = vec![None; conditions.len()];
    for chunk in order.chunks(256) {
        let field = ConditionedFlow {
            model: flow,
            cards: chunk.iter().map(|&i| cards[i]).collect(),
            ctx: chunk.iter().map(|&i| ctx[i]).collect(),
        };
        let specs: Vec<ManifoldSpec> = chunk.iter().map(|&i| cards[i].manifold()).collect();
        let y0 = chunk.iter().map(|&i| points[i].clone()).collect();
        for (&i, y) in chunk.iter().zip(integrate_batch(&field, &specs, y0, solver, 0.0, 1.0)?) {
            finals[i] = Some(y);
        }
    }
    finals
        .into_iter()
        .enumerate()
        .map(|(i, y)| decode_sample(&y.expect("every index is integrated"), cards[i], &conditions[i], base.e_cutoff))
        .collect()
}

/// Base samples for the given cardinalities (the t = 0 end of sampling).
pub fn base_points(conditions: &[Condition], cards: &[Cardinalities], seeds: &[u64], base: &BaseConfig) -> Result<Vec<Vec<f64>>> {
    conditions
        .iter()
        .zip(cards)
        .zip(seeds)
        .map(|((c, card), &s)| {
            let frame = BaseFrame::new(c, base.e_cutoff)?;
            let noise = draw_noise(card.total(), &mut rng::stream(s, &[1]));
            let mut y = vec![0.0; card.manifold().dim()];
            realize(&noise, &frame, base, &mut y);
            Ok(y)
        })
        .collect()
}

/// Base samples decoded directly, without a flow (the reference kernels).
pub fn sample_base_kernel(
    conditions: &[Condition],
    cards: &[Cardinalities],
    seeds: &[u64],
    base: &BaseConfig,
) -> Result<Vec<EventRecord>> {
    base_points(conditions, cards, seeds, base)?
        .iter()
        .zip(conditions.iter().zip(cards))
        .map(|(y, (c, card))| decode_sample(y, *card, c, base.e_cutoff))
        .collect()
}
