//! Autoregressive rollouts of a kernel across a sequence of cubes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cardinality::CardinalityModel;
use crate::cfm::{BaseConfig, FlowModel};
use crate::dataset::{condition_vector, Context, EventRecord};
use crate::error::{Error, Result};
use crate::flow::{sample_base_kernel, sample_kernel_batch, SolverConfig};
use crate::manifold::normalize3;
use crate::metrics::{mmd, subsample_report, Estimate};
use crate::oracle::{dominant_face, simulate_event, Condition, ParticleState, Species, ToyPhysicsConfig, DENSITY_RANGE};
use crate::rng;

/// Single-cube transition applied to a batch of incident particles.
/// Output `i` must depend only on `conditions[i]` and `seeds[i]`.
pub trait Kernel {
    fn apply(&self, conditions: &[Condition], seeds: &[u64]) -> Result<Vec<EventRecord>>;
}

pub struct OracleKernel {
    pub cfg: ToyPhysicsConfig,
}

impl Kernel for OracleKernel {
    fn apply(&self, conditions: &[Condition], seeds: &[u64]) -> Result<Vec<EventRecord>> {
        Ok(conditions
            .iter()
            .zip(seeds)
            .map(|(c, &s)| EventRecord::from_event(&simulate_event(&self.cfg, c, &mut rng::stream(s, &[]))))
            .collect())
    }
}

pub struct LearnedKernel<'a> {
    pub card: &'a CardinalityModel,
    pub flow: &'a FlowModel,
    pub base: BaseConfig,
    pub solver: SolverConfig,
}

impl Kernel for LearnedKernel<'_> {
    fn apply(&self, conditions: &[Condition], seeds: &[u64]) -> Result<Vec<EventRecord>> {
        sample_kernel_batch(self.card, self.flow, conditions, seeds, &self.base, &self.solver)
    }
}

/// The base distribution decoded without a flow, with learned cardinalities.
pub struct BaseKernel<'a> {
    pub card: &'a CardinalityModel,
    pub base: BaseConfig,
}

impl Kernel for BaseKernel<'_> {
    fn apply(&self, conditions: &[Condition], seeds: &[u64]) -> Result<Vec<EventRecord>> {
        let ctx: Vec<Context> = conditions
            .iter()
            .map(|c| Context::new(&condition_vector(c, self.base.e_cutoff), c.incident.species))
            .collect();
        let cards = self.card.sample_batch(&ctx, seeds)?;
        sample_base_kernel(conditions, &cards, seeds, &self.base)
    }
}

/// Moves an exiting particle to the opposite face of the next cube. A
/// direction that does not leave through the dominant face (possible for
/// learned outputs) is first mirrored so that it does.
pub fn transport_opposite_face(p: &ParticleState) -> ParticleState {
    let (axis, sign) = dominant_face(&p.position);
    let mut q = *p;
    q.position[axis] = -sign;
    if q.direction[axis] * sign <= 0.0 {
        q.direction[axis] = sign * q.direction[axis].abs().max(1e-9);
        normalize3(&mut q.direction);
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    HighLow,
    LowHigh,
    Alternating,
    Random10,
    Custom,
}

impl ScheduleKind {
    pub const NAMED: [ScheduleKind; 4] = [ScheduleKind::HighLow, ScheduleKind::LowHigh, ScheduleKind::Alternating, ScheduleKind::Random10];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::HighLow => "high_low",
            ScheduleKind::LowHigh => "low_high",
            ScheduleKind::Alternating => "alternating",
            ScheduleKind::Random10 => "random10",
            ScheduleKind::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitySchedule {
    pub kind: ScheduleKind,
    pub densities: Vec<f64>,
}

pub const HIGH_DENSITY: f64 = 8.0;
pub const LOW_DENSITY: f64 = 1.0;
pub const NAMED_ROUNDS: usize = 10;

impl DensitySchedule {
    /// The named schedules over [`NAMED_ROUNDS`] rounds. `seed` only affects random10.
    pub fn named(kind: ScheduleKind, seed: u64) -> Result<Self> {
        let n = NAMED_ROUNDS;
        let densities = match kind {
            ScheduleKind::HighLow => (0..n).map(|r| if r < n / 2 { HIGH_DENSITY } else { LOW_DENSITY }).collect(),
            ScheduleKind::LowHigh => (0..n).map(|r| if r < n / 2 { LOW_DENSITY } else { HIGH_DENSITY }).collect(),
            ScheduleKind::Alternating => (0..n).map(|r| if r % 2 == 0 { HIGH_DENSITY } else { LOW_DENSITY }).collect(),
            ScheduleKind::Random10 => {
                let mut r = rng::stream(rng::named(seed, "random10"), &[]);
                (0..n).map(|_| r.random_range(DENSITY_RANGE.0..=DENSITY_RANGE.1)).collect()
            }
            ScheduleKind::Custom => return Err(Error::invalid("custom schedules need explicit densities")),
        };
        Ok(Self { kind, densities })
    }

    pub fn custom(densities: Vec<f64>) -> Result<Self> {
        let s = Self {
            kind: ScheduleKind::Custom,
            densities,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.densities.is_empty() {
            return Err(Error::invalid("schedule has no rounds"));
        }
        if let Some(d) = self.densities.iter().find(|d| !(DENSITY_RANGE.0..=DENSITY_RANGE.1).contains(*d)) {
            return Err(Error::invalid(format!("schedule density {d} outside [{}, {}]", DENSITY_RANGE.0, DENSITY_RANGE.1)));
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.densities.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundLog {
    /// Particles leaving this round above the cutoff.
    pub multiplicity: usize,
    /// Energy deposited this round, including sub-cutoff particles.
    pub e_dep: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutState {
    pub round: usize,
    pub particles: Vec<ParticleState>,
    pub accumulated_e: f64,
    pub per_round_log: Vec<RoundLog>,
}

impl RolloutState {
    pub fn new(initial: ParticleState) -> Self {
        Self {
            round: 0,
            particles: vec![initial],
            accumulated_e: 0.0,
            per_round_log: Vec::new(),
        }
    }

    pub fn in_flight_energy(&self) -> f64 {
        self.particles.iter().map(|p| p.magnitude).sum()
    }

    /// `(multiplicity, e_dep)` per round, zero-padded to `rounds`.
    pub fn summary(&self, rounds: usize) -> Vec<f64> {
        let mut s = vec![0.0; 2 * rounds];
        for (r, log) in self.per_round_log.iter().take(rounds).enumerate() {
            s[2 * r] = log.multiplicity as f64;
            s[2 * r + 1] = log.e_dep;
        }
        s
    }
}

/// Seed of particle `k` in round `r` of rollout `i`.
fn particle_seed(seed: u64, rollout: usize, round: usize, k: usize) -> u64 {
    rng::derive(seed, &[rollout as u64, round as u64, k as u64])
}

/// Runs one rollout per initial particle in lockstep so every round is a
/// single batched kernel call. Rollout `i` uses seeds derived from
/// `(seed, i, round, particle)` only.
pub fn rollout_batch(
    kernel: &dyn Kernel,
    initial: &[ParticleState],
    schedule: &DensitySchedule,
    e_cutoff: f64,
    seed: u64,
) -> Result<Vec<RolloutState>> {
    schedule.validate()?;
    let mut states: Vec<RolloutState> = initial.iter().map(|p| RolloutState::new(*p)).collect();
    for (round, &density) in schedule.densities.iter().enumerate() {
        let mut conds = Vec::new();
        let mut seeds = Vec::new();
        let mut owner = Vec::new();
        for (i, st) in states.iter_mut().enumerate() {
            let (live, dead): (Vec<ParticleState>, Vec<ParticleState>) = st.particles.drain(..).partition(|p| p.magnitude > e_cutoff);
            let sub: f64 = dead.iter().map(|p| p.magnitude).sum();
            st.accumulated_e += sub;
            if live.is_empty() && st.per_round_log.len() == round && (round == 0 || sub > 0.0) {
                // an incident below the cutoff deposits everything in its first round
                st.per_round_log.push(RoundLog {
                    multiplicity: 0,
                    e_dep: sub,
                    density,
                });
                st.round = round + 1;
            }
            for (k, p) in live.iter().enumerate() {
                conds.push(Condition::new(*p, density).map_err(|e| Error::Rollout {
                    round,
                    source: Box::new(e),
                })?);
                seeds.push(particle_seed(seed, i, round, k));
                owner.push(i);
            }
        }
        if conds.is_empty() {
            break;
        }
        let events = kernel.apply(&conds, &seeds).map_err(|e| Error::Rollout {
            round,
            source: Box::new(e),
        })?;
        let mut round_logs: Vec<Option<RoundLog>> = vec![None; states.len()];
        for ((ev, &i), cond) in events.iter().zip(&owner).zip(&conds) {
            let log = round_logs[i].get_or_insert(RoundLog {
                multiplicity: 0,
                e_dep: 0.0,
                density,
            });
            let st = &mut states[i];
            let scale = energy_scale(ev, cond.incident.magnitude);
            log.e_dep += scale * ev.e_dep;
            st.accumulated_e += scale * ev.e_dep;
            for o in &ev.outgoing {
                let Ok(species) = Species::from_pdg(o.pdg) else {
                    continue;
                };
                let e = scale * o.e;
                if e <= e_cutoff {
                    log.e_dep += e;
                    st.accumulated_e += e;
                    continue;
                }
                log.multiplicity += 1;
                st.particles.push(transport_opposite_face(&ParticleState {
                    species,
                    position: o.pos,
                    direction: o.dir,
                    magnitude: e,
                }));
            }
        }
        for (st, log) in states.iter_mut().zip(round_logs) {
            if let Some(log) = log {
                st.per_round_log.push(log);
                st.round = round + 1;
            }
        }
    }
    Ok(states)
}

/// Factor that brings an event's deposition and outgoing energies down to the
/// incident energy when a kernel creates energy. Exact oracle events get 1.
/// This keeps every rollout within `e_in / e_cutoff` particles in flight.
fn energy_scale(ev: &EventRecord, e_in: f64) -> f64 {
    let total = ev.e_dep + ev.outgoing.iter().map(|o| o.e).sum::<f64>();
    if total > e_in * (1.0 + 1e-9) {
        e_in / total
    } else {
        1.0
    }
}

/// Rollout summaries of `n` copies of `initial`.
pub fn rollout_summaries(
    kernel: &dyn Kernel,
    initial: &ParticleState,
    schedule: &DensitySchedule,
    e_cutoff: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let init = vec![*initial; n];
    Ok(rollout_batch(kernel, &init, schedule, e_cutoff, seed)?
        .iter()
        .map(|s| s.summary(schedule.rounds()))
        .collect())
}

/// MMD between rollout summaries of two kernels.
#[allow(clippy::too_many_arguments)]
pub fn rollout_mmd(
    a: &dyn Kernel,
    b: &dyn Kernel,
    initial: &ParticleState,
    schedule: &DensitySchedule,
    e_cutoff: f64,
    n_rollouts: usize,
    k: usize,
    seeds: (u64, u64),
) -> Result<Estimate> {
    let xs = rollout_summaries(a, initial, schedule, e_cutoff, n_rollouts, seeds.0)?;
    let ys = rollout_summaries(b, initial, schedule, e_cutoff, n_rollouts, seeds.1)?;
    if xs == ys {
        // identical samples; the unbiased estimator would report its O(1/n) offset
        return Ok(Estimate { value: 0.0, sem: 0.0 });
    }
    subsample_report(|x, y| mmd(x, y), &xs, &ys, k)
}

/// Per-round mean and sem of the deposited energy.
pub fn per_round_deposition(summaries: &[Vec<f64>]) -> Vec<Estimate> {
    let rounds = summaries.first().map(|s| s.len() / 2).unwrap_or(0);
    (0..rounds)
        .map(|r| {
            let v: Vec<f64> = summaries.iter().map(|s| s[2 * r + 1]).collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            Estimate { value: mean, sem: sd / n.sqrt() }
        })
        .collect()
}
