//! Product manifolds built from Euclidean, sphere and logit-interval factors.
//!
//! Points are flat coordinate vectors. Sphere factors are stored as embedded
//! unit 3-vectors and interval factors as an unconstrained logit coordinate,
//! so every factor except the sphere is flat.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Angle below which two sphere points count as antipodal for the log map.
pub const ANTIPODAL_TOL: f64 = 1e-6;

/// Unit-norm and surface tolerances for validated inputs.
pub const SURFACE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FactorSpec {
    Euclidean { dim: usize },
    Sphere2,
    LogitInterval { lo: f64, hi: f64 },
}

impl FactorSpec {
    pub fn ambient_dim(&self) -> usize {
        match *self {
            FactorSpec::Euclidean { dim } => dim,
            FactorSpec::Sphere2 => 3,
            FactorSpec::LogitInterval { .. } => 1,
        }
    }

    /// Intrinsic dimension (2 for the sphere).
    pub fn intrinsic_dim(&self) -> usize {
        match *self {
            FactorSpec::Sphere2 => 2,
            other => other.ambient_dim(),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            FactorSpec::Euclidean { dim } if dim == 0 => {
                Err(Error::invalid("euclidean factor needs dim >= 1"))
            }
            FactorSpec::LogitInterval { lo, hi } if !(lo < hi) => {
                Err(Error::invalid(format!("logit interval needs lo < hi, got [{lo}, {hi}]")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FactorSpec>", into = "Vec<FactorSpec>")]
pub struct ManifoldSpec {
    factors: Vec<FactorSpec>,
    offsets: Vec<usize>,
    dim: usize,
}

impl TryFrom<Vec<FactorSpec>> for ManifoldSpec {
    type Error = Error;

    fn try_from(factors: Vec<FactorSpec>) -> Result<Self> {
        ManifoldSpec::new(factors)
    }
}

impl From<ManifoldSpec> for Vec<FactorSpec> {
    fn from(spec: ManifoldSpec) -> Self {
        spec.factors
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductPoint {
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductTangent {
    pub base: ProductPoint,
    pub components: Vec<f64>,
}

impl ProductTangent {
    pub fn norm(&self) -> f64 {
        self.components.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl ManifoldSpec {
    pub fn new(factors: Vec<FactorSpec>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::invalid("manifold spec needs at least one factor"));
        }
        let mut offsets = Vec::with_capacity(factors.len());
        let mut dim = 0;
        for f in &factors {
            f.validate()?;
            offsets.push(dim);
            dim += f.ambient_dim();
        }
        Ok(Self {
            factors,
            offsets,
            dim,
        })
    }

    pub fn euclidean(dim: usize) -> Result<Self> {
        Self::new(vec![FactorSpec::Euclidean { dim }])
    }

    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Total ambient dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.factors.iter().map(FactorSpec::intrinsic_dim).sum()
    }

    /// Iterates `(factor, offset)` pairs.
    pub fn blocks(&self) -> impl Iterator<Item = (FactorSpec, usize)> + '_ {
        self.factors.iter().copied().zip(self.offsets.iter().copied())
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: len,
            });
        }
        Ok(())
    }

    /// Checks the sphere blocks of a point have unit norm.
    pub fn validate_point(&self, p: &[f64]) -> Result<()> {
        self.check(p.len())?;
        for (f, off) in self.blocks() {
            if f == FactorSpec::Sphere2 {
                let n = norm3(&p[off..off + 3]);
                if (n - 1.0).abs() > SURFACE_TOL {
                    return Err(Error::invalid(format!("sphere block at {off} has norm {n}")));
                }
            }
            if p[off..off + f.ambient_dim()].iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("non-finite coordinate in block at {off}")));
            }
        }
        Ok(())
    }

    pub fn point(&self, coords: Vec<f64>) -> Result<ProductPoint> {
        self.validate_point(&coords)?;
        Ok(ProductPoint { coords })
    }

    pub fn exp_map(&self, p: &ProductPoint, v: &ProductTangent) -> Result<ProductPoint> {
        self.check(p.coords.len())?;
        self.check(v.components.len())?;
        if v.base != *p {
            return Err(Error::invalid("tangent is not based at the given point"));
        }
        let mut out = vec![0.0; self.dim];
        self.exp_into(&p.coords, &v.components, &mut out);
        Ok(ProductPoint { coords: out })
    }

    /// Slice form of [`exp_map`](Self::exp_map); lengths must match `dim`.
    pub fn exp_into(&self, p: &[f64], v: &[f64], out: &mut [f64]) {
        for (f, off) in self.blocks() {
            match f {
                FactorSpec::Sphere2 => {
                    let r = off..off + 3;
                    sphere_exp(&p[r.clone()], &v[r.clone()], &mut out[r]);
                }
                _ => {
                    for i in off..off + f.ambient_dim() {
                        out[i] = p[i] + v[i];
                    }
                }
            }
        }
    }

    pub fn log_map(&self, p: &ProductPoint, q: &ProductPoint) -> Result<ProductTangent> {
        self.check(p.coords.len())?;
        self.check(q.coords.len())?;
        let mut out = vec![0.0; self.dim];
        self.log_into(&p.coords, &q.coords, &mut out)?;
        Ok(ProductTangent {
            base: p.clone(),
            components: out,
        })
    }

    pub fn log_into(&self, p: &[f64], q: &[f64], out: &mut [f64]) -> Result<()> {
        for (k, (f, off)) in self.blocks().enumerate() {
            match f {
                FactorSpec::Sphere2 => {
                    let r = off..off + 3;
                    sphere_log(&p[r.clone()], &q[r.clone()], &mut out[r])
                        .map_err(|_| Error::Antipodal { factor: k })?;
                }
                _ => {
                    for i in off..off + f.ambient_dim() {
                        out[i] = q[i] - p[i];
                    }
                }
            }
        }
        Ok(())
    }

    pub fn geodesic(&self, p0: &ProductPoint, p1: &ProductPoint, t: f64) -> Result<ProductPoint> {
        self.check(p0.coords.len())?;
        self.check(p1.coords.len())?;
        let mut point = vec![0.0; self.dim];
        let mut vel = vec![0.0; self.dim];
        self.interpolate_into(&p0.coords, &p1.coords, t, &mut point, &mut vel)?;
        Ok(ProductPoint { coords: point })
    }

    pub fn geodesic_velocity(
        &self,
        p0: &ProductPoint,
        p1: &ProductPoint,
        t: f64,
    ) -> Result<ProductTangent> {
        self.check(p0.coords.len())?;
        self.check(p1.coords.len())?;
        let mut point = vec![0.0; self.dim];
        let mut vel = vec![0.0; self.dim];
        self.interpolate_into(&p0.coords, &p1.coords, t, &mut point, &mut vel)?;
        Ok(ProductTangent {
            base: ProductPoint { coords: point },
            components: vel,
        })
    }

    /// Writes the geodesic point at `t` and its velocity in one pass.
    pub fn interpolate_into(
        &self,
        p0: &[f64],
        p1: &[f64],
        t: f64,
        point: &mut [f64],
        velocity: &mut [f64],
    ) -> Result<()> {
        for (k, (f, off)) in self.blocks().enumerate() {
            match f {
                FactorSpec::Sphere2 => {
                    let r = off..off + 3;
                    let mut v = [0.0; 3];
                    sphere_log(&p0[r.clone()], &p1[r.clone()], &mut v)
                        .map_err(|_| Error::Antipodal { factor: k })?;
                    let theta = norm3(&v);
                    if theta < 1e-300 {
                        point[r.clone()].copy_from_slice(&p0[r.clone()]);
                        velocity[r].fill(0.0);
                        continue;
                    }
                    let (s, c) = (t * theta).sin_cos();
                    for i in 0..3 {
                        let dir = v[i] / theta;
                        point[off + i] = c * p0[off + i] + s * dir;
                        velocity[off + i] = theta * (-s * p0[off + i] + c * dir);
                    }
                    normalize3(&mut point[r]);
                }
                _ => {
                    for i in off..off + f.ambient_dim() {
                        let d = p1[i] - p0[i];
                        point[i] = p0[i] + t * d;
                        velocity[i] = d;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn project_tangent(&self, p: &ProductPoint, w: &[f64]) -> Result<ProductTangent> {
        self.check(p.coords.len())?;
        self.check(w.len())?;
        let mut components = w.to_vec();
        self.project_in_place(&p.coords, &mut components);
        Ok(ProductTangent {
            base: p.clone(),
            components,
        })
    }

    /// Removes the normal component of every sphere block of `w` at `p`.
    pub fn project_in_place(&self, p: &[f64], w: &mut [f64]) {
        for (f, off) in self.blocks() {
            if f == FactorSpec::Sphere2 {
                let d = dot3(&w[off..off + 3], &p[off..off + 3]);
                for i in off..off + 3 {
                    w[i] -= d * p[i];
                }
            }
        }
    }

    /// Renormalizes every sphere block to unit length.
    pub fn retract_in_place(&self, p: &mut [f64]) {
        for (f, off) in self.blocks() {
            if f == FactorSpec::Sphere2 {
                normalize3(&mut p[off..off + 3]);
            }
        }
    }

    /// Squared product geodesic distance.
    pub fn sq_distance(&self, p: &[f64], q: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (f, off) in self.blocks() {
            match f {
                FactorSpec::Sphere2 => {
                    let a = sphere_angle(&p[off..off + 3], &q[off..off + 3]);
                    acc += a * a;
                }
                _ => {
                    for i in off..off + f.ambient_dim() {
                        let d = q[i] - p[i];
                        acc += d * d;
                    }
                }
            }
        }
        acc
    }

    /// Orthonormal basis of the tangent space at `p`, one vector per intrinsic dimension.
    pub fn tangent_basis(&self, p: &[f64]) -> Vec<Vec<f64>> {
        let mut basis = Vec::with_capacity(self.intrinsic_dim());
        for (f, off) in self.blocks() {
            match f {
                FactorSpec::Sphere2 => {
                    let (e1, e2) = sphere_tangent_frame(&p[off..off + 3]);
                    for e in [e1, e2] {
                        let mut v = vec![0.0; self.dim];
                        v[off..off + 3].copy_from_slice(&e);
                        basis.push(v);
                    }
                }
                _ => {
                    for i in off..off + f.ambient_dim() {
                        let mut v = vec![0.0; self.dim];
                        v[i] = 1.0;
                        basis.push(v);
                    }
                }
            }
        }
        basis
    }
}

#[inline]
pub(crate) fn dot3(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm3(a: &[f64]) -> f64 {
    dot3(a, a).sqrt()
}

#[inline]
pub fn normalize3(a: &mut [f64]) {
    let n = norm3(a);
    if n > 0.0 {
        a.iter_mut().for_each(|x| *x /= n);
    }
}

#[inline]
fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Great-circle angle between two unit vectors, stable near 0 and π.
pub fn sphere_angle(p: &[f64], q: &[f64]) -> f64 {
    norm3(&cross3(p, q)).atan2(dot3(p, q))
}

fn sphere_exp(p: &[f64], v: &[f64], out: &mut [f64]) {
    let theta = norm3(v);
    if theta < 1e-12 {
        for i in 0..3 {
            out[i] = p[i] + v[i];
        }
    } else {
        let (s, c) = theta.sin_cos();
        for i in 0..3 {
            out[i] = c * p[i] + s * v[i] / theta;
        }
    }
    normalize3(out);
}

fn sphere_log(p: &[f64], q: &[f64], out: &mut [f64]) -> std::result::Result<(), ()> {
    let c = dot3(p, q);
    let mut w = [q[0] - c * p[0], q[1] - c * p[1], q[2] - c * p[2]];
    let s = norm3(&w);
    let theta = s.atan2(c);
    if PI - theta < ANTIPODAL_TOL {
        return Err(());
    }
    if s < 1e-300 {
        out[..3].fill(0.0);
        return Ok(());
    }
    w.iter_mut().for_each(|x| *x *= theta / s);
    out[..3].copy_from_slice(&w);
    Ok(())
}

fn sphere_tangent_frame(p: &[f64]) -> ([f64; 3], [f64; 3]) {
    let a = if p[0].abs() > 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
    let mut e1 = cross3(p, &a);
    normalize3(&mut e1);
    let e2 = cross3(p, &e1);
    (e1, e2)
}

/// Maps a point on the surface of `[-1, 1]^3` radially onto the unit sphere.
pub fn cube_to_sphere(x: [f64; 3]) -> Result<[f64; 3]> {
    let linf = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if (linf - 1.0).abs() > SURFACE_TOL {
        return Err(Error::invalid(format!("point {x:?} is not on the cube surface")));
    }
    let n = norm3(&x);
    Ok([x[0] / n, x[1] / n, x[2] / n])
}

/// Inverse of [`cube_to_sphere`].
pub fn sphere_to_cube(u: [f64; 3]) -> Result<[f64; 3]> {
    if (norm3(&u) - 1.0).abs() > SURFACE_TOL {
        return Err(Error::invalid(format!("{u:?} is not a unit vector")));
    }
    let linf = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok([u[0] / linf, u[1] / linf, u[2] / linf])
}

/// Logit coordinate of `value` in `(lo, hi)`.
///
/// Values at or beyond the bounds are clamped to an interior margin of
/// `1e-6 * (hi - lo)`; the returned flag reports whether that happened.
pub fn logit_encode(value: f64, lo: f64, hi: f64) -> (f64, bool) {
    let eps = 1e-6 * (hi - lo);
    let (v, clamped) = if value < lo + eps {
        (lo + eps, true)
    } else if value > hi - eps {
        (hi - eps, true)
    } else {
        (value, false)
    };
    (((v - lo) / (hi - v)).ln(), clamped)
}

pub fn logit_decode(z: f64, lo: f64, hi: f64) -> f64 {
    // (lo + hi e^z) / (1 + e^z), written to stay in range for large |z|
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    let v = lo + (hi - lo) * s;
    v.clamp(lo.next_up(), hi.next_down())
}

/// Polar and azimuthal angle of a unit vector; azimuth in `(-π, π]`.
pub fn spherical_angles(u: &[f64]) -> (f64, f64) {
    let theta = u[2].clamp(-1.0, 1.0).acos();
    let mut phi = u[1].atan2(u[0]);
    if phi <= -PI {
        phi += 2.0 * PI;
    }
    (theta, phi)
}

pub fn from_spherical(theta: f64, phi: f64) -> [f64; 3] {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [st * cp, st * sp, ct]
}

/// Rotation matrix (row-major) taking the north pole `e_z` to the unit vector `d`.
///
/// Uses the Rodrigues rotation about `e_z × d`; the antipode maps through a
/// half-turn about `e_x`.
pub fn pole_rotation(d: &[f64]) -> [[f64; 3]; 3] {
    let c = d[2];
    if c > 1.0 - 1e-15 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    if c < -1.0 + 1e-15 {
        return [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
    }
    // axis k = e_z × d / |.|, sinθ = |e_z × d|
    let (kx, ky) = (-d[1], d[0]);
    let s = (kx * kx + ky * ky).sqrt();
    let (kx, ky) = (kx / s, ky / s);
    let v = 1.0 - c;
    [
        [c + kx * kx * v, kx * ky * v, ky * s],
        [kx * ky * v, c + ky * ky * v, -kx * s],
        [-ky * s, kx * s, c],
    ]
}

pub fn rotate(r: &[[f64; 3]; 3], x: &[f64; 3]) -> [f64; 3] {
    [
        r[0][0] * x[0] + r[0][1] * x[1] + r[0][2] * x[2],
        r[1][0] * x[0] + r[1][1] * x[1] + r[1][2] * x[2],
        r[2][0] * x[0] + r[2][1] * x[1] + r[2][2] * x[2],
    ]
}
