//! Event records, condition priors, manifold encoding and padded batches.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{
    cube_to_sphere, from_spherical, logit_decode, logit_encode, normalize3, sphere_to_cube,
    spherical_angles, FactorSpec, ManifoldSpec, ProductPoint,
};
use crate::oracle::{
    dominant_face, Condition, Event, ParticleState, Species, DENSITY_RANGE, ENERGY_RANGE,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Ambient width of one particle block: position (S²), direction (S²), log-magnitude.
pub const PARTICLE_DIM: usize = 7;
/// Width of the condition vector: density, position (S²), direction (S²), log-magnitude.
pub const CONDITION_DIM: usize = 8;
/// Smallest decoded log-magnitude; keeps decoded energies strictly above the cutoff.
pub const MAGNITUDE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutgoingRecord {
    pub pdg: i32,
    pub pos: [f64; 3],
    pub dir: [f64; 3],
    pub e: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRecord {
    pub schema_version: u32,
    pub pdg_in: i32,
    pub pos_in: [f64; 3],
    pub dir_in: [f64; 3],
    pub e_in: f64,
    pub density: f64,
    pub e_dep: f64,
    pub outgoing: Vec<OutgoingRecord>,
}

fn canonical_order(a: &OutgoingRecord, b: &OutgoingRecord) -> std::cmp::Ordering {
    let key = |r: &OutgoingRecord| Species::from_pdg(r.pdg).map(Species::index).unwrap_or(usize::MAX);
    key(a).cmp(&key(b)).then(b.e.total_cmp(&a.e))
}

impl EventRecord {
    /// Builds a record with outgoing particles grouped by species and sorted
    /// by descending energy within each group.
    pub fn from_event(ev: &Event) -> Self {
        let inc = &ev.condition.incident;
        let mut outgoing: Vec<_> = ev
            .outgoing
            .iter()
            .map(|p| OutgoingRecord {
                pdg: p.species.pdg(),
                pos: p.position,
                dir: p.direction,
                e: p.magnitude,
            })
            .collect();
        outgoing.sort_by(canonical_order);
        Self {
            schema_version: SCHEMA_VERSION,
            pdg_in: inc.species.pdg(),
            pos_in: inc.position,
            dir_in: inc.direction,
            e_in: inc.magnitude,
            density: ev.condition.density,
            e_dep: ev.e_dep,
            outgoing,
        }
    }

    pub fn condition(&self) -> Result<Condition> {
        Condition::new(
            ParticleState {
                species: Species::from_pdg(self.pdg_in)?,
                position: self.pos_in,
                direction: self.dir_in,
                magnitude: self.e_in,
            },
            self.density,
        )
    }

    pub fn to_event(&self) -> Result<Event> {
        let outgoing = self
            .outgoing
            .iter()
            .map(|o| {
                Ok(ParticleState {
                    species: Species::from_pdg(o.pdg)?,
                    position: o.pos,
                    direction: o.dir,
                    magnitude: o.e,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Event {
            condition: self.condition()?,
            outgoing,
            e_dep: self.e_dep,
            truncated: false,
        })
    }

    pub fn cardinalities(&self) -> Result<Cardinalities> {
        let mut n = [0; 3];
        for o in &self.outgoing {
            n[Species::from_pdg(o.pdg)?.index()] += 1;
        }
        Ok(Cardinalities(n))
    }
}

pub fn write_events(records: &[EventRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| parse_err("missing schema_version".into()))?;
        if version != SCHEMA_VERSION as u64 {
            return Err(Error::SchemaVersion {
                found: version as u32,
                expected: SCHEMA_VERSION,
            });
        }
        let rec: EventRecord = serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

/// Per-species outgoing counts in the order `[e⁻, e⁺, γ]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Cardinalities(pub [usize; 3]);

impl Cardinalities {
    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn get(&self, s: Species) -> usize {
        self.0[s.index()]
    }

    /// Species of each particle slot in grouped order.
    pub fn slot_species(&self) -> Vec<Species> {
        Species::ALL
            .iter()
            .flat_map(|&s| std::iter::repeat(s).take(self.get(s)))
            .collect()
    }

    pub fn manifold(&self) -> ManifoldSpec {
        event_manifold(self.total())
    }
}

/// `M_δ × (S² × S² × ℝ)^n` with the deposition as a logit coordinate of the
/// deposited fraction.
pub fn event_manifold(n_particles: usize) -> ManifoldSpec {
    let mut f = vec![FactorSpec::LogitInterval { lo: 0.0, hi: 1.0 }];
    for _ in 0..n_particles {
        f.extend([FactorSpec::Sphere2, FactorSpec::Sphere2, FactorSpec::Euclidean { dim: 1 }]);
    }
    ManifoldSpec::new(f).expect("event manifold factors are valid")
}

/// Offset of particle `k` in an event point.
#[inline]
pub fn particle_offset(k: usize) -> usize {
    1 + PARTICLE_DIM * k
}

/// Condition vector `(ρ, x̂_in, p̂_in, ln(E_in / E_cut))`.
pub fn condition_vector(c: &Condition, e_cutoff: f64) -> [f64; CONDITION_DIM] {
    let x = cube_to_sphere(c.incident.position).unwrap_or_else(|_| {
        let mut v = c.incident.position;
        normalize3(&mut v);
        v
    });
    let d = c.incident.direction;
    [
        c.density,
        x[0],
        x[1],
        x[2],
        d[0],
        d[1],
        d[2],
        (c.incident.magnitude / e_cutoff).ln(),
    ]
}

/// Fixed affine standardisation of a condition vector for network input:
/// density to roughly [-1.7, 1.7], log-energy centred.
pub fn normalize_condition(cv: &[f64; CONDITION_DIM]) -> [f64; CONDITION_DIM] {
    let mut out = *cv;
    out[0] = (cv[0] - 5.25) / 2.75;
    out[7] = cv[7] - 4.5;
    out
}

/// One conditioning context: normalised condition vector and incident species.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Context {
    pub cond: [f64; CONDITION_DIM],
    pub species: Species,
}

impl Context {
    pub fn new(condition_vector: &[f64; CONDITION_DIM], species: Species) -> Self {
        Self {
            cond: normalize_condition(condition_vector),
            species,
        }
    }

    pub fn of(e: &EncodedEvent) -> Self {
        Self::new(&e.condition_vector, e.pdg_in)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedEvent {
    pub condition: Condition,
    pub condition_vector: [f64; CONDITION_DIM],
    pub pdg_in: Species,
    pub cardinalities: Cardinalities,
    pub target: ProductPoint,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeStats {
    pub encoded: usize,
    /// Depositions at or beyond the interval bounds, clamped to the interior.
    pub clamped_deposition: usize,
    /// Records rejected for a particle at or below the cutoff.
    pub rejected_below_cutoff: usize,
    /// Records dropped for exceeding the cardinality cap.
    pub dropped_over_cap: usize,
}

/// Encodes a record into manifold coordinates. Returns the encoded event and
/// whether the deposition had to be clamped.
pub fn encode_event(rec: &EventRecord, e_cutoff: f64) -> Result<(EncodedEvent, bool)> {
    let condition = rec.condition()?;
    let card = rec.cardinalities()?;
    let mut outgoing = rec.outgoing.clone();
    outgoing.sort_by(canonical_order);
    let spec = card.manifold();
    let mut coords = vec![0.0; spec.dim()];
    let (z, clamped) = logit_encode(rec.e_dep / rec.e_in, 0.0, 1.0);
    coords[0] = z;
    for (k, o) in outgoing.iter().enumerate() {
        if !(o.e > e_cutoff) {
            return Err(Error::invalid(format!(
                "particle energy {} at or below cutoff {e_cutoff}",
                o.e
            )));
        }
        let off = particle_offset(k);
        coords[off..off + 3].copy_from_slice(&cube_to_sphere(o.pos)?);
        coords[off + 3..off + 6].copy_from_slice(&o.dir);
        coords[off + 6] = (o.e / e_cutoff).ln();
    }
    let target = spec.point(coords)?;
    Ok((
        EncodedEvent {
            condition_vector: condition_vector(&condition, e_cutoff),
            pdg_in: condition.incident.species,
            condition,
            cardinalities: card,
            target,
        },
        clamped,
    ))
}

/// Inverse of [`encode_event`] for a point on the cardinality-induced manifold.
pub fn decode_sample(
    point: &[f64],
    card: Cardinalities,
    condition: &Condition,
    e_cutoff: f64,
) -> Result<EventRecord> {
    let spec = card.manifold();
    if point.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: point.len(),
        });
    }
    let e_in = condition.incident.magnitude;
    let mut outgoing = Vec::with_capacity(card.total());
    for (k, species) in card.slot_species().into_iter().enumerate() {
        let off = particle_offset(k);
        let mut pos = [point[off], point[off + 1], point[off + 2]];
        normalize3(&mut pos);
        let mut dir = [point[off + 3], point[off + 4], point[off + 5]];
        normalize3(&mut dir);
        let u = point[off + 6].max(MAGNITUDE_FLOOR);
        outgoing.push(OutgoingRecord {
            pdg: species.pdg(),
            pos: sphere_to_cube(pos)?,
            dir,
            e: e_cutoff * u.exp(),
        });
    }
    let inc = &condition.incident;
    Ok(EventRecord {
        schema_version: SCHEMA_VERSION,
        pdg_in: inc.species.pdg(),
        pos_in: inc.position,
        dir_in: inc.direction,
        e_in,
        density: condition.density,
        e_dep: e_in * logit_decode(point[0], 0.0, 1.0),
        outgoing,
    })
}

/// 99.9th percentile of the per-species counts (max over species), rounded up.
pub fn cardinality_cap(records: &[EventRecord]) -> usize {
    if records.is_empty() {
        return 0;
    }
    let mut cap = 0;
    for s in Species::ALL {
        let mut counts: Vec<usize> = records
            .iter()
            .map(|r| r.outgoing.iter().filter(|o| o.pdg == s.pdg()).count())
            .collect();
        counts.sort_unstable();
        let idx = ((0.999 * counts.len() as f64).ceil() as usize).clamp(1, counts.len()) - 1;
        cap = cap.max(counts[idx]);
    }
    cap
}

/// Encodes records, dropping those whose per-species counts exceed `n_max`.
pub fn encode_all(
    records: &[EventRecord],
    e_cutoff: f64,
    n_max: usize,
) -> (Vec<EncodedEvent>, EncodeStats) {
    let mut stats = EncodeStats::default();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        match r.cardinalities() {
            Ok(c) if c.0.iter().any(|&n| n > n_max) => {
                stats.dropped_over_cap += 1;
                continue;
            }
            Err(_) => {
                stats.rejected_below_cutoff += 1;
                continue;
            }
            _ => {}
        }
        match encode_event(r, e_cutoff) {
            Ok((e, clamped)) => {
                stats.encoded += 1;
                stats.clamped_deposition += clamped as usize;
                out.push(e);
            }
            Err(_) => stats.rejected_below_cutoff += 1,
        }
    }
    (out, stats)
}

/// Slot kind in a padded batch row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    Deposition,
    Particle,
}

/// Fixed-layout batch: per event one deposition slot plus `n_pad` particle slots,
/// each `PARTICLE_DIM` wide. Masked slots hold the north-pole/zero sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub n_events: usize,
    pub n_pad: usize,
    pub coords: Vec<f64>,
    pub mask: Vec<bool>,
    pub species: Vec<Option<Species>>,
}

pub const SENTINEL: [f64; PARTICLE_DIM] = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0];

impl PaddedBatch {
    pub fn slots(&self) -> usize {
        1 + self.n_pad
    }

    pub fn slot_kind(&self, slot: usize) -> SlotKind {
        if slot == 0 {
            SlotKind::Deposition
        } else {
            SlotKind::Particle
        }
    }

    pub fn slot(&self, event: usize, slot: usize) -> &[f64] {
        let i = (event * self.slots() + slot) * PARTICLE_DIM;
        &self.coords[i..i + PARTICLE_DIM]
    }

    pub fn slot_mut(&mut self, event: usize, slot: usize) -> &mut [f64] {
        let i = (event * self.slots() + slot) * PARTICLE_DIM;
        &mut self.coords[i..i + PARTICLE_DIM]
    }

    /// Writes an event point (manifold layout) into row `event`.
    pub fn set_point(&mut self, event: usize, point: &[f64]) {
        let n = (point.len() - 1) / PARTICLE_DIM;
        self.slot_mut(event, 0)[0] = point[0];
        for k in 0..n {
            let off = particle_offset(k);
            self.slot_mut(event, k + 1).copy_from_slice(&point[off..off + PARTICLE_DIM]);
        }
    }

    /// Reads row `event` back into manifold layout.
    pub fn point(&self, event: usize) -> Vec<f64> {
        let row = event * self.slots();
        let n = (1..self.slots()).take_while(|&s| self.mask[row + s]).count();
        let mut p = vec![0.0; 1 + PARTICLE_DIM * n];
        p[0] = self.slot(event, 0)[0];
        for k in 0..n {
            let off = particle_offset(k);
            p[off..off + PARTICLE_DIM].copy_from_slice(self.slot(event, k + 1));
        }
        p
    }
}

pub fn make_batch(encoded: &[EncodedEvent], n_pad: usize) -> Result<PaddedBatch> {
    let points: Vec<(&[f64], Cardinalities)> = encoded
        .iter()
        .map(|e| (e.target.coords.as_slice(), e.cardinalities))
        .collect();
    make_batch_from_points(&points, n_pad)
}

pub fn make_batch_from_points(points: &[(&[f64], Cardinalities)], n_pad: usize) -> Result<PaddedBatch> {
    let slots = 1 + n_pad;
    let mut batch = PaddedBatch {
        n_events: points.len(),
        n_pad,
        coords: Vec::with_capacity(points.len() * slots * PARTICLE_DIM),
        mask: vec![false; points.len() * slots],
        species: vec![None; points.len() * slots],
    };
    for _ in 0..points.len() * slots {
        batch.coords.extend_from_slice(&SENTINEL);
    }
    for (i, (point, card)) in points.iter().enumerate() {
        if card.total() > n_pad {
            return Err(Error::Overflow {
                index: i,
                count: card.total(),
                limit: n_pad,
            });
        }
        let dep = batch.slot_mut(i, 0);
        dep.fill(0.0);
        batch.set_point(i, point);
        batch.mask[i * slots] = true;
        for (k, s) in card.slot_species().into_iter().enumerate() {
            batch.mask[i * slots + k + 1] = true;
            batch.species[i * slots + k + 1] = Some(s);
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Gun,
    PhiSweep,
    ThetaSweep,
    EnergySweep,
    IncidenceSweep,
    SlideSweep,
    DensitySweep,
}

impl PriorKind {
    pub const ALL: [PriorKind; 7] = [
        PriorKind::Gun,
        PriorKind::PhiSweep,
        PriorKind::ThetaSweep,
        PriorKind::EnergySweep,
        PriorKind::IncidenceSweep,
        PriorKind::SlideSweep,
        PriorKind::DensitySweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PriorKind::Gun => "gun",
            PriorKind::PhiSweep => "phi",
            PriorKind::ThetaSweep => "theta",
            PriorKind::EnergySweep => "energy",
            PriorKind::IncidenceSweep => "incidence",
            PriorKind::SlideSweep => "slide",
            PriorKind::DensitySweep => "density",
        }
    }
}

/// Fully explicit incident-particle template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionTemplate {
    pub pdg: i32,
    pub position: [f64; 3],
    pub direction: [f64; 3],
    pub energy: f64,
    pub density: f64,
}

impl Default for ConditionTemplate {
    /// Electron beam at 150 MeV into the centre of the −x face, ρ = 3.
    fn default() -> Self {
        Self {
            pdg: 11,
            position: [-1.0, 0.0, 0.0],
            direction: [1.0, 0.0, 0.0],
            energy: 150.0,
            density: 3.0,
        }
    }
}

impl ConditionTemplate {
    pub fn condition(&self) -> Result<Condition> {
        Condition::new(
            ParticleState {
                species: Species::from_pdg(self.pdg)?,
                position: self.position,
                direction: self.direction,
                magnitude: self.energy,
            },
            self.density,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub kind: PriorKind,
    pub fixed: ConditionTemplate,
    pub sweep_range: (f64, f64),
}

impl PriorSpec {
    /// Evaluation prior of the given kind around the default template.
    pub fn standard(kind: PriorKind) -> Self {
        let sweep_range = match kind {
            PriorKind::Gun => (0.0, 0.0),
            PriorKind::PhiSweep => (0.5 * PI, 1.5 * PI),
            PriorKind::ThetaSweep => (0.25 * PI, 0.75 * PI),
            PriorKind::EnergySweep => ENERGY_RANGE,
            PriorKind::IncidenceSweep => (0.0, 1.2),
            PriorKind::SlideSweep => (-1.0, 1.0),
            PriorKind::DensitySweep => DENSITY_RANGE,
        };
        Self {
            kind,
            fixed: ConditionTemplate::default(),
            sweep_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sweep_range;
        let bounds = match self.kind {
            PriorKind::Gun => return Ok(()),
            PriorKind::PhiSweep => (-2.0 * PI, 2.0 * PI),
            PriorKind::ThetaSweep => (0.0, PI),
            PriorKind::EnergySweep => ENERGY_RANGE,
            PriorKind::IncidenceSweep => (0.0, 0.5 * PI - 1e-6),
            PriorKind::SlideSweep => (-1.0, 1.0),
            PriorKind::DensitySweep => DENSITY_RANGE,
        };
        if !(lo <= hi && lo >= bounds.0 && hi <= bounds.1) {
            return Err(Error::invalid(format!(
                "{} sweep range ({lo}, {hi}) outside ({}, {})",
                self.kind.name(),
                bounds.0,
                bounds.1
            )));
        }
        self.fixed.condition()?;
        Ok(())
    }

    fn sweep_value<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (lo, hi) = self.sweep_range;
        if lo == hi {
            lo
        } else {
            lo + (hi - lo) * rng.random::<f64>()
        }
    }

    /// Condition at a given sweep coordinate (ignored for the gun).
    pub fn condition_at(&self, value: f64) -> Result<Condition> {
        let mut c = self.fixed.condition()?;
        let inc = &mut c.incident;
        match self.kind {
            PriorKind::Gun => {}
            PriorKind::PhiSweep | PriorKind::ThetaSweep => {
                let (theta0, phi0) = spherical_angles(&cube_to_sphere(inc.position)?);
                let (theta, phi) = if self.kind == PriorKind::PhiSweep {
                    (theta0, value)
                } else {
                    (value, phi0)
                };
                let u = from_spherical(theta, phi);
                inc.position = sphere_to_cube(u)?;
                inc.direction = [-u[0], -u[1], -u[2]];
            }
            PriorKind::EnergySweep => inc.magnitude = value,
            PriorKind::DensitySweep => c.density = value,
            PriorKind::IncidenceSweep => {
                let (axis, sign) = dominant_face(&inc.position);
                let tilt = (axis + 2) % 3;
                let mut d = [0.0; 3];
                d[axis] = -sign * value.cos();
                d[tilt] = value.sin();
                inc.direction = d;
            }
            PriorKind::SlideSweep => {
                let (axis, _) = dominant_face(&inc.position);
                inc.position[(axis + 2) % 3] = value;
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Draws one condition from the prior.
pub fn sample_condition<R: Rng + ?Sized>(prior: &PriorSpec, rng: &mut R) -> Result<Condition> {
    if prior.kind == PriorKind::Gun {
        return Ok(sample_gun(rng));
    }
    let v = prior.sweep_value(rng);
    prior.condition_at(v)
}

/// Training gun: uniform species, face, position on the face, inward direction
/// uniform in solid angle, energy and density.
pub fn sample_gun<R: Rng + ?Sized>(rng: &mut R) -> Condition {
    let species = Species::ALL[rng.random_range(0..3)];
    let face = rng.random_range(0..6);
    let axis = face / 2;
    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
    let mut position = [0.0; 3];
    for (i, p) in position.iter_mut().enumerate() {
        *p = if i == axis { sign } else { rng.random_range(-1.0..1.0) };
    }
    // cosθ ~ U(0, 1] about the inward normal gives uniform solid angle
    let cos_t = 1.0 - rng.random::<f64>();
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = 2.0 * PI * rng.random::<f64>();
    let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut direction = [0.0; 3];
    direction[axis] = -sign * cos_t;
    direction[a1] = sin_t * phi.cos();
    direction[a2] = sin_t * phi.sin();
    normalize3(&mut direction);
    let magnitude = ENERGY_RANGE.0 + (ENERGY_RANGE.1 - ENERGY_RANGE.0) * rng.random::<f64>();
    let density = DENSITY_RANGE.0 + (DENSITY_RANGE.1 - DENSITY_RANGE.0) * rng.random::<f64>();
    Condition {
        incident: ParticleState {
            species,
            position,
            direction,
            magnitude,
        },
        density,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{simulate_event, ToyPhysicsConfig};
    use crate::rng;

    fn oracle_records(n: usize, seed: u64) -> Vec<EventRecord> {
        let cfg = ToyPhysicsConfig::default();
        (0..n)
            .map(|i| {
                let mut r = rng::stream(seed, &[i as u64]);
                let c = sample_gun(&mut r);
                EventRecord::from_event(&simulate_event(&cfg, &c, &mut r))
            })
            .collect()
    }

    #[test]
    fn write_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let recs = oracle_records(200, 1);
        write_events(&recs, &path).unwrap();
        assert_eq!(read_events(&path).unwrap(), recs);

        let empty = dir.path().join("empty.jsonl");
        write_events(&[], &empty).unwrap();
        assert!(read_events(&empty).unwrap().is_empty());
    }

    #[test]
    fn truncated_line_and_version_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let recs = oracle_records(3, 2);
        write_events(&recs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 20]).unwrap();
        match read_events(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let mut bad = recs[0].clone();
        bad.schema_version = 9;
        write_events(&[bad], &path).unwrap();
        assert!(matches!(read_events(&path), Err(Error::SchemaVersion { found: 9, .. })));
    }

    #[test]
    fn records_are_canonically_ordered() {
        for r in oracle_records(300, 3) {
            for w in r.outgoing.windows(2) {
                assert_ne!(canonical_order(&w[0], &w[1]), std::cmp::Ordering::Greater);
            }
        }
    }

    #[test]
    fn encode_decode_round_trip_on_oracle_events() {
        let e_cut = ToyPhysicsConfig::default().e_cutoff;
        let recs = oracle_records(10_000, 4);
        let mut interior = 0;
        for r in &recs {
            let (enc, clamped) = encode_event(r, e_cut).unwrap();
            let dec = decode_sample(&enc.target.coords, enc.cardinalities, &enc.condition, e_cut).unwrap();
            if clamped {
                assert!((dec.e_dep - r.e_dep).abs() <= 1.01e-6 * r.e_in);
            } else {
                interior += 1;
                assert!((dec.e_dep - r.e_dep).abs() < 1e-9 * r.e_in);
            }
            assert_eq!(dec.outgoing.len(), r.outgoing.len());
            for (a, b) in dec.outgoing.iter().zip(&r.outgoing) {
                assert_eq!(a.pdg, b.pdg);
                assert!((a.e - b.e).abs() < 1e-9 * b.e);
                for i in 0..3 {
                    assert!((a.pos[i] - b.pos[i]).abs() < 1e-9);
                    assert!((a.dir[i] - b.dir[i]).abs() < 1e-9);
                }
            }
        }
        assert!(interior > 1000);
    }

    #[test]
    fn encode_examples() {
        let e_cut = 1.0;
        let mut rec = oracle_records(1, 5).remove(0);
        rec.outgoing.clear();
        rec.e_dep = rec.e_in / 2.0;
        let (enc, clamped) = encode_event(&rec, e_cut).unwrap();
        assert!(!clamped);
        assert_eq!(enc.cardinalities, Cardinalities([0, 0, 0]));
        assert_eq!(enc.target.coords, vec![0.0]);
        rec.outgoing.push(OutgoingRecord {
            pdg: 22,
            pos: [1.0, 0.0, 0.0],
            dir: [1.0, 0.0, 0.0],
            e: 0.5,
        });
        assert!(encode_event(&rec, e_cut).is_err());
    }

    #[test]
    fn within_species_permutation_permutes_slots() {
        let e_cut = 1.0;
        let recs = oracle_records(500, 6);
        let rec = recs.iter().find(|r| r.outgoing.iter().filter(|o| o.pdg == 22).count() >= 3).unwrap();
        let mut shuffled = rec.clone();
        shuffled.outgoing.reverse();
        let a = encode_event(rec, e_cut).unwrap().0;
        let b = encode_event(&shuffled, e_cut).unwrap().0;
        assert_eq!(a.target, b.target);
    }

    #[test]
    fn cap_and_encode_all() {
        let recs = oracle_records(2000, 7);
        let cap = cardinality_cap(&recs);
        assert!(cap >= 1);
        let (enc, stats) = encode_all(&recs, 1.0, cap);
        assert_eq!(enc.len() + stats.dropped_over_cap + stats.rejected_below_cutoff, recs.len());
        assert!(stats.dropped_over_cap <= 3 * recs.len() / 1000 + 3);
        let (_, none) = encode_all(&recs, 1.0, 0);
        assert_eq!(none.encoded, recs.iter().filter(|r| r.outgoing.is_empty()).count());
    }

    #[test]
    fn batch_layout_and_masks() {
        let e_cut = 1.0;
        let mut rec = oracle_records(1, 8).remove(0);
        rec.outgoing.clear();
        let (empty, _) = encode_event(&rec, e_cut).unwrap();
        let b = make_batch(&[empty.clone()], 4).unwrap();
        assert_eq!(b.mask, vec![true, false, false, false, false]);
        assert_eq!(b.slot(0, 3), &SENTINEL);

        let recs = oracle_records(50, 9);
        let (enc, _) = encode_all(&recs, e_cut, 100);
        let n_pad = enc.iter().map(|e| e.cardinalities.total()).max().unwrap();
        let b = make_batch(&enc, n_pad).unwrap();
        for (i, e) in enc.iter().enumerate() {
            assert_eq!(b.point(i), e.target.coords);
            let active = b.mask[i * b.slots()..(i + 1) * b.slots()].iter().filter(|&&m| m).count();
            assert_eq!(active, 1 + e.cardinalities.total());
        }
        let same = make_batch(&[enc[0].clone(), enc[0].clone()], n_pad).unwrap();
        assert_eq!(same.coords[..same.slots() * PARTICLE_DIM], same.coords[same.slots() * PARTICLE_DIM..]);
        let big = enc.iter().position(|e| e.cardinalities.total() > 0).unwrap();
        match make_batch(&enc, 0) {
            Err(Error::Overflow { index, .. }) => assert_eq!(index, big),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn gun_samples_are_valid_and_cover_ranges() {
        let mut r = rng::stream(10, &[]);
        let (mut e_min, mut e_max, mut d_min, mut d_max) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        let mut species = [0usize; 3];
        for _ in 0..100_000 {
            let c = sample_gun(&mut r);
            c.validate().unwrap();
            c.check_gun_energy().unwrap();
            e_min = e_min.min(c.incident.magnitude);
            e_max = e_max.max(c.incident.magnitude);
            d_min = d_min.min(c.density);
            d_max = d_max.max(c.density);
            species[c.incident.species.index()] += 1;
        }
        assert!(e_min - 20.0 < 2.8 && 300.0 - e_max < 2.8);
        assert!(d_min - 0.5 < 0.095 && 10.0 - d_max < 0.095);
        assert!(species.iter().all(|&n| n > 32_000));
    }

    #[test]
    fn sweep_priors() {
        let mut r = rng::stream(11, &[]);
        for kind in PriorKind::ALL {
            let p = PriorSpec::standard(kind);
            p.validate().unwrap();
            let (mut lo, mut hi) = (f64::MAX, f64::MIN);
            for _ in 0..2000 {
                let c = sample_condition(&p, &mut r).unwrap();
                c.validate().unwrap();
                let v = match kind {
                    PriorKind::EnergySweep => c.incident.magnitude,
                    PriorKind::DensitySweep => c.density,
                    _ => continue,
                };
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if matches!(kind, PriorKind::EnergySweep | PriorKind::DensitySweep) {
                let span = p.sweep_range.1 - p.sweep_range.0;
                assert!(lo - p.sweep_range.0 < 0.01 * span && p.sweep_range.1 - hi < 0.01 * span);
            }
        }
        let mut dens = PriorSpec::standard(PriorKind::DensitySweep);
        dens.sweep_range = (3.0, 3.0);
        for _ in 0..10 {
            assert_eq!(sample_condition(&dens, &mut r).unwrap().density, 3.0);
        }
        let slide = PriorSpec::standard(PriorKind::SlideSweep);
        assert_eq!(slide.condition_at(-1.0).unwrap().incident.position, [-1.0, 0.0, -1.0]);
        assert_eq!(slide.condition_at(1.0).unwrap().incident.position, [-1.0, 0.0, 1.0]);
        let mut bad = PriorSpec::standard(PriorKind::EnergySweep);
        bad.sweep_range = (10.0, 50.0);
        assert!(bad.validate().is_err());
        let inc = PriorSpec::standard(PriorKind::IncidenceSweep).condition_at(0.0).unwrap();
        assert_eq!(inc.incident.direction, [1.0, 0.0, 0.0]);
        let phi = PriorSpec::standard(PriorKind::PhiSweep).condition_at(PI).unwrap();
        assert!((phi.incident.position[0] + 1.0).abs() < 1e-12);
    }
}
