//! Toy electromagnetic cascade in a homogeneous, density-scaled cube.
//!
//! All interaction lengths scale as `length_ref / density`. Kinematics are
//! massless (`E = |p|`) for every species so energy bookkeeping is exact:
//! each event satisfies `e_dep + Σ E_out = E_in` up to rounding.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{dot3, normalize3, SURFACE_TOL};
use crate::rng;

/// Gun energy range in MeV.
pub const ENERGY_RANGE: (f64, f64) = (20.0, 300.0);
/// Gun density range in g/cm³.
pub const DENSITY_RANGE: (f64, f64) = (0.5, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Species {
    Electron,
    Positron,
    Photon,
}

impl Species {
    /// Fixed grouping order used everywhere: `[e⁻, e⁺, γ]`.
    pub const ALL: [Species; 3] = [Species::Electron, Species::Positron, Species::Photon];

    pub fn pdg(self) -> i32 {
        match self {
            Species::Electron => 11,
            Species::Positron => -11,
            Species::Photon => 22,
        }
    }

    pub fn from_pdg(pdg: i32) -> Result<Self> {
        match pdg {
            11 => Ok(Species::Electron),
            -11 => Ok(Species::Positron),
            22 => Ok(Species::Photon),
            other => Err(Error::invalid(format!("unsupported pdg id {other}"))),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_charged(self) -> bool {
        self != Species::Photon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyPhysicsConfig {
    /// Radiation length at 1 g/cm³ (cm).
    pub radiation_length_ref: f64,
    /// Pair-conversion mean free path at 1 g/cm³ (cm).
    pub pair_mfp_ref: f64,
    /// Compton mean free path at 1 g/cm³ (cm).
    pub compton_mfp_ref: f64,
    /// Continuous loss of charged particles at 1 g/cm³ (MeV/cm).
    pub continuous_loss_rate_ref: f64,
    /// Tracking cutoff (MeV); particles at or below it deposit locally.
    pub e_cutoff: f64,
    pub max_internal_steps: usize,
    /// Half edge length of the cube (cm).
    pub cube_half_edge: f64,
    /// Longest charged step as a fraction of the local radiation length.
    pub max_step_x0: f64,
    /// Width (rad) of the Compton small-angle deflection.
    pub compton_deflection: f64,
}

impl Default for ToyPhysicsConfig {
    fn default() -> Self {
        Self {
            radiation_length_ref: 14.0,
            pair_mfp_ref: 18.0,
            compton_mfp_ref: 25.0,
            continuous_loss_rate_ref: 0.4,
            e_cutoff: 1.0,
            max_internal_steps: 100_000,
            cube_half_edge: 5.0,
            max_step_x0: 0.2,
            compton_deflection: 0.3,
        }
    }
}

impl ToyPhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("radiation_length_ref", self.radiation_length_ref),
            ("pair_mfp_ref", self.pair_mfp_ref),
            ("compton_mfp_ref", self.compton_mfp_ref),
            ("continuous_loss_rate_ref", self.continuous_loss_rate_ref),
            ("e_cutoff", self.e_cutoff),
            ("cube_half_edge", self.cube_half_edge),
            ("max_step_x0", self.max_step_x0),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_internal_steps == 0 {
            return Err(Error::invalid("max_internal_steps must be >= 1"));
        }
        if !(self.compton_deflection >= 0.0) {
            return Err(Error::invalid("compton_deflection must be >= 0"));
        }
        Ok(())
    }
}

/// A particle on the cube surface. `position` is in cube-local units
/// (the surface of `[-1, 1]³`); `magnitude` is the energy in MeV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleState {
    pub species: Species,
    pub position: [f64; 3],
    pub direction: [f64; 3],
    pub magnitude: f64,
}

/// Axis and sign of the face a surface point lies on; ties break x < y < z.
pub fn dominant_face(position: &[f64; 3]) -> (usize, f64) {
    let mut axis = 0;
    for i in 1..3 {
        if position[i].abs() > position[axis].abs() + SURFACE_TOL {
            axis = i;
        }
    }
    (axis, position[axis].signum())
}

impl ParticleState {
    pub fn validate(&self) -> Result<()> {
        let linf = self.position.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if (linf - 1.0).abs() > SURFACE_TOL {
            return Err(Error::invalid(format!(
                "position {:?} is not on the cube surface",
                self.position
            )));
        }
        let n = dot3(&self.direction, &self.direction).sqrt();
        if (n - 1.0).abs() > SURFACE_TOL {
            return Err(Error::invalid(format!("direction norm {n} is not 1")));
        }
        if !(self.magnitude > 0.0 && self.magnitude.is_finite()) {
            return Err(Error::invalid(format!("magnitude {} must be positive", self.magnitude)));
        }
        Ok(())
    }

    /// Component of the direction along the outward normal of the dominant face.
    pub fn outward_component(&self) -> f64 {
        let (axis, sign) = dominant_face(&self.position);
        self.direction[axis] * sign
    }

    pub fn is_inward(&self) -> bool {
        self.outward_component() < 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Condition {
    pub incident: ParticleState,
    pub density: f64,
}

impl Condition {
    /// Validates geometry and density. Energy is not range-checked here, see
    /// [`Condition::check_gun_energy`].
    pub fn new(incident: ParticleState, density: f64) -> Result<Self> {
        let c = Self { incident, density };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.incident.validate()?;
        if !self.incident.is_inward() {
            return Err(Error::invalid("incident direction does not point into the cube"));
        }
        if !(DENSITY_RANGE.0..=DENSITY_RANGE.1).contains(&self.density) {
            return Err(Error::invalid(format!(
                "density {} outside [{}, {}]",
                self.density, DENSITY_RANGE.0, DENSITY_RANGE.1
            )));
        }
        Ok(())
    }

    pub fn check_gun_energy(&self) -> Result<()> {
        let e = self.incident.magnitude;
        if !(ENERGY_RANGE.0..=ENERGY_RANGE.1).contains(&e) {
            return Err(Error::invalid(format!("incident energy {e} outside the gun range")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub condition: Condition,
    pub outgoing: Vec<ParticleState>,
    pub e_dep: f64,
    /// Step budget was exhausted; the remaining energy was deposited.
    pub truncated: bool,
}

impl Event {
    pub fn cardinalities(&self) -> [usize; 3] {
        let mut n = [0; 3];
        for p in &self.outgoing {
            n[p.species.index()] += 1;
        }
        n
    }

    /// Relative energy-conservation residual.
    pub fn conservation_residual(&self) -> f64 {
        let out: f64 = self.outgoing.iter().map(|p| p.magnitude).sum();
        let e_in = self.condition.incident.magnitude;
        (self.e_dep + out - e_in).abs() / e_in
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub events: usize,
    pub truncated: usize,
    pub mean_multiplicity: f64,
    pub mean_e_dep: f64,
}

impl GenerationStats {
    pub fn from_events(events: &[Event]) -> Self {
        let n = events.len();
        if n == 0 {
            return Self::default();
        }
        Self {
            events: n,
            truncated: events.iter().filter(|e| e.truncated).count(),
            mean_multiplicity: events.iter().map(|e| e.outgoing.len() as f64).sum::<f64>() / n as f64,
            mean_e_dep: events.iter().map(|e| e.e_dep).sum::<f64>() / n as f64,
        }
    }
}

/// Distance along `d` from interior/surface point `x` to the surface of the
/// cube `[-a, a]³`, and the axis through which it leaves.
fn distance_to_exit(x: &[f64; 3], d: &[f64; 3], a: f64) -> (f64, usize) {
    let mut best = f64::INFINITY;
    let mut axis = 0;
    for i in 0..3 {
        if d[i].abs() < 1e-12 {
            continue;
        }
        let t = (a * d[i].signum() - x[i]) / d[i];
        if t < best {
            best = t;
            axis = i;
        }
    }
    (best.max(0.0), axis)
}

/// Rotates unit vector `d` by polar angle `theta` about itself at azimuth `phi`.
pub(crate) fn deflect(d: &[f64; 3], theta: f64, phi: f64) -> [f64; 3] {
    let a = if d[0].abs() > 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
    let mut e1 = [
        d[1] * a[2] - d[2] * a[1],
        d[2] * a[0] - d[0] * a[2],
        d[0] * a[1] - d[1] * a[0],
    ];
    normalize3(&mut e1);
    let e2 = [
        d[1] * e1[2] - d[2] * e1[1],
        d[2] * e1[0] - d[0] * e1[2],
        d[0] * e1[1] - d[1] * e1[0],
    ];
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = ct * d[i] + st * (cp * e1[i] + sp * e2[i]);
    }
    normalize3(&mut out);
    out
}

struct Track {
    species: Species,
    x: [f64; 3],
    d: [f64; 3],
    e: f64,
}

pub fn simulate_event<R: Rng + ?Sized>(cfg: &ToyPhysicsConfig, cond: &Condition, rng: &mut R) -> Event {
    let a = cfg.cube_half_edge;
    let rho = cond.density;
    let x0 = cfg.radiation_length_ref / rho;
    let pair_mfp = cfg.pair_mfp_ref / rho;
    let compton_mfp = cfg.compton_mfp_ref / rho;
    let loss = cfg.continuous_loss_rate_ref * rho;
    let max_step = cfg.max_step_x0 * x0;
    let cut = cfg.e_cutoff;

    let inc = &cond.incident;
    let mut stack = vec![Track {
        species: inc.species,
        x: inc.position.map(|v| v * a),
        d: inc.direction,
        e: inc.magnitude,
    }];
    let mut outgoing = Vec::new();
    let mut e_dep = 0.0;
    let mut steps = 0usize;
    let mut truncated = false;

    let emit = |t: &Track, axis: usize, outgoing: &mut Vec<ParticleState>| {
        let mut pos = t.x.map(|v| (v / a).clamp(-1.0, 1.0));
        pos[axis] = t.d[axis].signum();
        outgoing.push(ParticleState {
            species: t.species,
            position: pos,
            direction: t.d,
            magnitude: t.e,
        });
    };

    'tracks: while let Some(mut t) = stack.pop() {
        loop {
            if t.e <= cut {
                e_dep += t.e;
                continue 'tracks;
            }
            steps += 1;
            if steps > cfg.max_internal_steps {
                truncated = true;
                e_dep += t.e + stack.iter().map(|s| s.e).sum::<f64>();
                stack.clear();
                break 'tracks;
            }
            let (d_exit, axis) = distance_to_exit(&t.x, &t.d, a);
            if t.species.is_charged() {
                let s_brem = x0 * rng.sample::<f64, _>(Exp1);
                let s_range = (t.e - cut) / loss;
                let s = s_brem.min(d_exit).min(s_range).min(max_step);
                for i in 0..3 {
                    t.x[i] += s * t.d[i];
                }
                if s == d_exit {
                    let lost = (loss * s).min(t.e - cut);
                    e_dep += lost;
                    t.e -= lost;
                    emit(&t, axis, &mut outgoing);
                    continue 'tracks;
                }
                if s == s_range {
                    e_dep += t.e;
                    continue 'tracks;
                }
                e_dep += loss * s;
                t.e -= loss * s;
                if s == s_brem {
                    let k = rng.random::<f64>() * t.e;
                    t.e -= k;
                    stack.push(Track {
                        species: Species::Photon,
                        x: t.x,
                        d: t.d,
                        e: k,
                    });
                }
                // Highland-scaled multiple scattering over the step just taken.
                let theta0 = 13.6 / t.e * (s / x0).sqrt();
                let tx: f64 = theta0 * rng.sample::<f64, _>(StandardNormal);
                let ty: f64 = theta0 * rng.sample::<f64, _>(StandardNormal);
                let theta = tx.hypot(ty).min(PI);
                let phi = 2.0 * PI * rng.random::<f64>();
                t.d = deflect(&t.d, theta, phi);
            } else {
                let pair = t.e > 2.0 * cut;
                let mfp = if pair { pair_mfp } else { compton_mfp };
                let s = mfp * rng.sample::<f64, _>(Exp1);
                if s >= d_exit {
                    for i in 0..3 {
                        t.x[i] += d_exit * t.d[i];
                    }
                    emit(&t, axis, &mut outgoing);
                    continue 'tracks;
                }
                for i in 0..3 {
                    t.x[i] += s * t.d[i];
                }
                if pair {
                    let half = 0.5 * t.e;
                    for species in [Species::Electron, Species::Positron] {
                        stack.push(Track {
                            species,
                            x: t.x,
                            d: t.d,
                            e: half,
                        });
                    }
                    continue 'tracks;
                }
                let u: f64 = rng.random();
                e_dep += u * t.e;
                t.e *= 1.0 - u;
                let theta = (cfg.compton_deflection * rng.sample::<f64, _>(StandardNormal)).abs().min(PI);
                let phi = 2.0 * PI * rng.random::<f64>();
                t.d = deflect(&t.d, theta, phi);
            }
        }
    }

    Event {
        condition: *cond,
        outgoing,
        e_dep,
        truncated,
    }
}

/// Simulates every condition with its own stream derived from `(seed, index)`.
pub fn simulate_batch(cfg: &ToyPhysicsConfig, conds: &[Condition], seed: u64) -> Vec<Event> {
    conds
        .iter()
        .enumerate()
        .map(|(i, c)| simulate_event(cfg, c, &mut rng::stream(seed, &[i as u64])))
        .collect()
}
