//! Kernel submanifolds of `A×B` real matrices.
//!
//! Four families are supported:
//!
//! ```text
//! Sphere              { X : ‖X‖_F = r }
//! Oblique             { X : ddiag(XᵀX) = I_B }
//! Stiefel             { X : XᵀX = I_B },  A ≥ B
//! SpecialOrthogonal   { X : XᵀX = I_n, det X = +1 }
//! ```
//!
//! All of them inherit the Frobenius inner product from the ambient space.
//! Tangent projections are orthogonal projections onto the tangent space.
//! Retractions are metric projections (sphere, oblique) or the Q factor of a
//! thin QR decomposition with positive `diag(R)` (Stiefel, SO(n)). Closed-form
//! exponential maps and geodesic distances exist for sphere and oblique only.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Default slack for `validate`.
pub const DEFAULT_TOLERANCE: f64 = 1e-8;
/// Default slack for tangency checks.
pub const DEFAULT_TANGENT_TOLERANCE: f64 = 1e-10;

/// Inputs whose norm (or `R` diagonal) falls below this fraction of the
/// input's Frobenius norm are treated as singular.
const SINGULAR_RTOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Sphere,
    Oblique,
    Stiefel,
    SpecialOrthogonal,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::Sphere,
        Family::Oblique,
        Family::Stiefel,
        Family::SpecialOrthogonal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Sphere => "sphere",
            Family::Oblique => "oblique",
            Family::Stiefel => "stiefel",
            Family::SpecialOrthogonal => "so",
        }
    }

    /// Families with closed-form exponential map and geodesic distance.
    pub fn has_exp_map(self) -> bool {
        matches!(self, Family::Sphere | Family::Oblique)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which submanifold a kernel lives on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    family: Family,
    rows: usize,
    cols: usize,
    radius: f64,
    tolerance: f64,
    tangent_tolerance: f64,
}

/// Outcome of a constraint check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub valid: bool,
    /// Norm of the deviation from the defining constraint.
    pub violation: f64,
}

impl ManifoldSpec {
    pub fn new(family: Family, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Structure(format!(
                "{family} kernel shape must be positive, got {rows}x{cols}"
            )));
        }
        match family {
            Family::Stiefel if rows < cols => {
                return Err(Error::Structure(format!(
                    "stiefel requires rows >= cols, got {rows}x{cols}"
                )))
            }
            Family::SpecialOrthogonal if rows != cols => {
                return Err(Error::Structure(format!(
                    "so(n) requires a square shape, got {rows}x{cols}"
                )))
            }
            _ => {}
        }
        let spec = ManifoldSpec {
            family,
            rows,
            cols,
            radius: 1.0,
            tolerance: DEFAULT_TOLERANCE,
            tangent_tolerance: DEFAULT_TANGENT_TOLERANCE,
        };
        if spec.intrinsic_dimension() < 1 {
            return Err(Error::Structure(format!(
                "{family} of shape {rows}x{cols} has dimension zero"
            )));
        }
        Ok(spec)
    }

    pub fn sphere(rows: usize, cols: usize) -> Result<Self> {
        Self::new(Family::Sphere, rows, cols)
    }

    pub fn oblique(rows: usize, cols: usize) -> Result<Self> {
        Self::new(Family::Oblique, rows, cols)
    }

    pub fn stiefel(rows: usize, cols: usize) -> Result<Self> {
        Self::new(Family::Stiefel, rows, cols)
    }

    pub fn special_orthogonal(n: usize) -> Result<Self> {
        Self::new(Family::SpecialOrthogonal, n, n)
    }

    /// Sphere radius. Only spheres carry one.
    pub fn with_radius(mut self, radius: f64) -> Result<Self> {
        if self.family != Family::Sphere {
            return Err(Error::Structure(format!(
                "radius is only defined for spheres, not {}",
                self.family
            )));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::Structure(format!("radius must be positive, got {radius}")));
        }
        self.radius = radius;
        Ok(self)
    }

    pub fn with_tolerance(mut self, tolerance: f64, tangent_tolerance: f64) -> Result<Self> {
        if !(tolerance >= 0.0 && tangent_tolerance >= 0.0) {
            return Err(Error::Structure("tolerances must be non-negative".into()));
        }
        self.tolerance = tolerance;
        self.tangent_tolerance = tangent_tolerance;
        Ok(self)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn tangent_tolerance(&self) -> f64 {
        self.tangent_tolerance
    }

    pub fn intrinsic_dimension(&self) -> usize {
        let (a, b) = (self.rows, self.cols);
        match self.family {
            Family::Sphere => a * b - 1,
            Family::Oblique => b * (a - 1),
            Family::Stiefel => a * b - b * (b + 1) / 2,
            Family::SpecialOrthogonal => a * (a - 1) / 2,
        }
    }

    pub fn check_shape(&self, m: &Mat) -> Result<()> {
        if m.nrows() != self.rows || m.ncols() != self.cols {
            return Err(Error::Structure(format!(
                "expected a {}x{} matrix for {}, got {}x{}",
                self.rows,
                self.cols,
                self.family,
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(())
    }

    /// Constraint check of a raw matrix against this manifold.
    pub fn validate(&self, m: &Mat) -> Result<Validation> {
        self.check_shape(m)?;
        let violation = match self.family {
            Family::Sphere => (m.norm() - self.radius).abs(),
            Family::Oblique => m
                .column_iter()
                .map(|c| (c.norm_squared() - 1.0).powi(2))
                .sum::<f64>()
                .sqrt(),
            Family::Stiefel => stiefel_violation(m),
            Family::SpecialOrthogonal => {
                let det = m.determinant();
                stiefel_violation(m).max((det - 1.0).abs())
            }
        };
        Ok(Validation {
            valid: violation <= self.tolerance,
            violation,
        })
    }

    /// Map an ambient matrix onto the manifold with the family's
    /// retraction-at-zero normalization: scale to the sphere, normalize
    /// columns, or take the sign-fixed QR factor (SO(n) also fixes the
    /// determinant).
    pub fn normalize(&self, m: &Mat) -> Result<KernelPoint> {
        self.check_shape(m)?;
        let value = match self.family {
            Family::Sphere => normalize_frobenius(m, self.radius)?,
            Family::Oblique => normalize_columns(m)?,
            Family::Stiefel => qr_q_positive(m)?,
            Family::SpecialOrthogonal => fix_determinant(qr_q_positive(m)?).0,
        };
        Ok(KernelPoint { spec: *self, value })
    }

    /// Deterministic random point: i.i.d. standard normal entries mapped
    /// through [`ManifoldSpec::normalize`].
    pub fn random_point(&self, seed: u64) -> KernelPoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let g = Mat::from_fn(self.rows, self.cols, |_, _| StandardNormal.sample(&mut rng));
            // A Gaussian matrix is singular with probability zero; redraw if it happens.
            if let Ok(p) = self.normalize(&g) {
                return p;
            }
        }
    }
}

fn stiefel_violation(m: &Mat) -> f64 {
    let mut gram = m.transpose() * m;
    for i in 0..gram.nrows() {
        gram[(i, i)] -= 1.0;
    }
    gram.norm()
}

/// `(M + Mᵀ)/2`
pub(crate) fn sym(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

fn normalize_frobenius(m: &Mat, radius: f64) -> Result<Mat> {
    let n = m.norm();
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::SingularStep(format!(
            "cannot normalize a matrix of norm {n}"
        )));
    }
    Ok(m * (radius / n))
}

fn normalize_columns(m: &Mat) -> Result<Mat> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let n = col.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::SingularStep(format!(
                "column {j} has norm {n} and cannot be normalized"
            )));
        }
        col /= n;
    }
    Ok(out)
}

/// Q factor of the thin QR decomposition with `diag(R) > 0`.
fn qr_q_positive(m: &Mat) -> Result<Mat> {
    let scale = m.norm();
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::SingularStep(format!("QR of a matrix with norm {scale}")));
    }
    let qr = m.clone().qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..m.ncols() {
        let d = r[(j, j)];
        if d.abs() <= SINGULAR_RTOL * scale {
            return Err(Error::SingularStep(format!(
                "rank-deficient step: |R[{j},{j}]| = {:.3e}",
                d.abs()
            )));
        }
        if d < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    Ok(q)
}

/// Negate the last column when `det(q) < 0`. Returns whether it fired.
fn fix_determinant(mut q: Mat) -> (Mat, bool) {
    if q.determinant() < 0.0 {
        let last = q.ncols() - 1;
        q.column_mut(last).neg_mut();
        (q, true)
    } else {
        (q, false)
    }
}

/// An `A×B` matrix tagged with the manifold it is meant to live on.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelPoint {
    spec: ManifoldSpec,
    value: Mat,
}

/// Diagnostics from a retraction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RetractInfo {
    /// SO(n) only: the QR factor had det −1 and its last column was negated.
    pub det_flipped: bool,
}

impl KernelPoint {
    /// Wraps `value` after a shape check. The constraint is not checked;
    /// see [`KernelPoint::on_manifold`].
    pub fn new(spec: ManifoldSpec, value: Mat) -> Result<Self> {
        spec.check_shape(&value)?;
        Ok(KernelPoint { spec, value })
    }

    /// Shape and constraint check.
    pub fn on_manifold(spec: ManifoldSpec, value: Mat) -> Result<Self> {
        let p = Self::new(spec, value)?;
        p.ensure_valid()?;
        Ok(p)
    }

    pub fn spec(&self) -> &ManifoldSpec {
        &self.spec
    }

    pub fn value(&self) -> &Mat {
        &self.value
    }

    pub fn into_value(self) -> Mat {
        self.value
    }

    pub fn validate(&self) -> Validation {
        self.spec
            .validate(&self.value)
            .expect("shape checked at construction")
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.valid {
            Ok(())
        } else {
            Err(Error::Constraint {
                what: format!("point is not on the {} manifold", self.spec.family),
                violation: v.violation,
                tolerance: self.spec.tolerance,
            })
        }
    }

    fn same_base(&self, v: &TangentVector) -> Result<()> {
        if v.at.spec != self.spec || v.at.value != self.value {
            return Err(Error::Structure(
                "tangent vector is attached to a different base point".into(),
            ));
        }
        Ok(())
    }

    /// Orthogonal projection of an ambient matrix onto the tangent space.
    pub fn project_tangent(&self, ambient: &Mat) -> Result<TangentVector> {
        self.spec.check_shape(ambient)?;
        self.ensure_valid()?;
        Ok(TangentVector {
            at: self.clone(),
            value: self.project_unchecked(ambient),
        })
    }

    pub(crate) fn project_unchecked(&self, ambient: &Mat) -> Mat {
        let p = &self.value;
        match self.spec.family {
            Family::Sphere => {
                let r2 = self.spec.radius * self.spec.radius;
                ambient - p * (p.dot(ambient) / r2)
            }
            Family::Oblique => {
                let mut out = ambient.clone();
                for (j, mut col) in out.column_iter_mut().enumerate() {
                    let pj = p.column(j);
                    let c = pj.dot(&col);
                    col.axpy(-c, &pj, 1.0);
                }
                out
            }
            Family::Stiefel | Family::SpecialOrthogonal => {
                ambient - p * sym(&(p.transpose() * ambient))
            }
        }
    }

    /// Retraction `R_p(v)`.
    pub fn retract(&self, v: &TangentVector) -> Result<KernelPoint> {
        self.retract_with_info(v).map(|(p, _)| p)
    }

    pub fn retract_with_info(&self, v: &TangentVector) -> Result<(KernelPoint, RetractInfo)> {
        self.same_base(v)?;
        self.ensure_valid()?;
        let mut info = RetractInfo::default();
        // R_p(0) = p exactly, not a renormalized copy.
        if v.value.iter().all(|&x| x == 0.0) {
            return Ok((self.clone(), info));
        }
        let y = &self.value + &v.value;
        let value = match self.spec.family {
            Family::Sphere => normalize_frobenius(&y, self.spec.radius)?,
            Family::Oblique => normalize_columns(&y)?,
            Family::Stiefel => qr_q_positive(&y)?,
            Family::SpecialOrthogonal => {
                let (q, flipped) = fix_determinant(qr_q_positive(&y)?);
                if flipped {
                    log::debug!("so(n) retraction produced det -1; last column negated");
                }
                info.det_flipped = flipped;
                q
            }
        };
        Ok((
            KernelPoint {
                spec: self.spec,
                value,
            },
            info,
        ))
    }

    /// Exponential map; sphere and oblique only.
    pub fn exp_map(&self, v: &TangentVector) -> Result<KernelPoint> {
        if !self.spec.family.has_exp_map() {
            return Err(Error::UnsupportedMap(self.spec.family.name()));
        }
        self.same_base(v)?;
        self.ensure_valid()?;
        let value = match self.spec.family {
            Family::Sphere => sphere_exp(&self.value, &v.value, self.spec.radius),
            _ => {
                let mut out = self.value.clone();
                for j in 0..out.ncols() {
                    let rows = self.spec.rows;
                    let pj = Mat::from_iterator(rows, 1, self.value.column(j).iter().copied());
                    let vj = Mat::from_iterator(rows, 1, v.value.column(j).iter().copied());
                    let moved = sphere_exp(&pj, &vj, 1.0);
                    out.set_column(j, &moved.column(0));
                }
                out
            }
        };
        Ok(KernelPoint {
            spec: self.spec,
            value,
        })
    }

    /// Frobenius inner product of two tangent vectors at this point.
    pub fn inner(&self, u: &TangentVector, w: &TangentVector) -> Result<f64> {
        self.same_base(u)?;
        self.same_base(w)?;
        Ok(u.value.dot(&w.value))
    }

    /// Closed-form geodesic distance; sphere and oblique only.
    pub fn geodesic_distance(&self, q: &KernelPoint) -> Result<f64> {
        if self.spec != q.spec {
            return Err(Error::Structure(
                "geodesic distance between points of different manifolds".into(),
            ));
        }
        match self.spec.family {
            // Angle as 2·atan2(‖p − q‖, ‖p + q‖): exact at p = q, unlike acos.
            Family::Sphere => {
                let r = self.spec.radius;
                let d = (&self.value - &q.value).norm();
                let s = (&self.value + &q.value).norm();
                Ok(r * 2.0 * d.atan2(s))
            }
            Family::Oblique => Ok(self
                .value
                .column_iter()
                .zip(q.value.column_iter())
                .map(|(a, b)| (2.0 * (a - b).norm().atan2((a + b).norm())).powi(2))
                .sum::<f64>()
                .sqrt()),
            f => Err(Error::UnsupportedMap(f.name())),
        }
    }
}

/// `cos(θ)p + r·sin(θ)·v/‖v‖` with `θ = ‖v‖/r`, limit `p` at `v = 0`.
fn sphere_exp(p: &Mat, v: &Mat, radius: f64) -> Mat {
    let nv = v.norm();
    if nv == 0.0 {
        return p.clone();
    }
    let theta = nv / radius;
    let q = p * theta.cos() + v * (radius * theta.sin() / nv);
    // Exact in exact arithmetic; the rescale stops round-off in ‖p‖ from
    // compounding over long runs of exp-map steps.
    let n = q.norm();
    q * (radius / n)
}

/// An ambient matrix in the tangent space at `at`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    at: KernelPoint,
    value: Mat,
}

impl TangentVector {
    /// Checks shape and tangency (within the spec's tangent tolerance).
    pub fn new(at: &KernelPoint, value: Mat) -> Result<Self> {
        at.spec.check_shape(&value)?;
        let v = TangentVector {
            at: at.clone(),
            value,
        };
        let dev = v.tangency_violation();
        let tol = at.spec.tangent_tolerance;
        if dev > tol {
            return Err(Error::Constraint {
                what: "matrix is not tangent at the base point".into(),
                violation: dev,
                tolerance: tol,
            });
        }
        Ok(v)
    }

    pub fn zero(at: &KernelPoint) -> Self {
        TangentVector {
            at: at.clone(),
            value: Mat::zeros(at.spec.rows, at.spec.cols),
        }
    }

    pub fn base(&self) -> &KernelPoint {
        &self.at
    }

    pub fn value(&self) -> &Mat {
        &self.value
    }

    pub fn norm(&self) -> f64 {
        self.value.norm()
    }

    pub fn scaled(&self, s: f64) -> Self {
        TangentVector {
            at: self.at.clone(),
            value: &self.value * s,
        }
    }

    /// Largest relative normal component; zero for exact tangent vectors.
    ///
    /// Sphere: `|⟨p, v⟩| / ‖v‖`; oblique: the same per column;
    /// Stiefel/SO(n): `‖sym(pᵀv)‖ / ‖v‖`.
    pub fn tangency_violation(&self) -> f64 {
        let p = &self.at.value;
        let v = &self.value;
        let ratio = |num: f64, den: f64| if num == 0.0 { 0.0 } else { num / den };
        match self.at.spec.family {
            Family::Sphere => ratio(p.dot(v).abs(), v.norm()),
            Family::Oblique => p
                .column_iter()
                .zip(v.column_iter())
                .map(|(a, b)| ratio(a.dot(&b).abs(), b.norm()))
                .fold(0.0, f64::max),
            Family::Stiefel | Family::SpecialOrthogonal => {
                ratio(sym(&(p.transpose() * v)).norm(), v.norm())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_1_SQRT_2, PI};

    fn m(rows: usize, cols: usize, data: &[f64]) -> Mat {
        Mat::from_row_slice(rows, cols, data)
    }

    #[test]
    fn dimensions() {
        assert_eq!(ManifoldSpec::sphere(3, 3).unwrap().intrinsic_dimension(), 8);
        assert_eq!(ManifoldSpec::oblique(3, 2).unwrap().intrinsic_dimension(), 4);
        assert_eq!(ManifoldSpec::stiefel(4, 2).unwrap().intrinsic_dimension(), 5);
        assert_eq!(
            ManifoldSpec::special_orthogonal(3).unwrap().intrinsic_dimension(),
            3
        );
    }

    #[test]
    fn shape_rules() {
        assert!(ManifoldSpec::stiefel(2, 3).is_err());
        assert!(ManifoldSpec::new(Family::SpecialOrthogonal, 3, 2).is_err());
        assert!(ManifoldSpec::sphere(1, 1).is_err());
        assert!(ManifoldSpec::oblique(1, 4).is_err());
        assert!(ManifoldSpec::stiefel(1, 1).is_err());
        assert!(ManifoldSpec::oblique(2, 2).unwrap().with_radius(2.0).is_err());
    }

    #[test]
    fn validate_examples() {
        let s = ManifoldSpec::sphere(2, 2).unwrap();
        let v = s.validate(&m(2, 2, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!(v.valid);
        assert_eq!(v.violation, 0.0);

        let st = ManifoldSpec::stiefel(3, 3).unwrap();
        let v = st.validate(&Mat::identity(3, 3)).unwrap();
        assert!(v.valid);
        assert_eq!(v.violation, 0.0);

        // ddiag([[4,0],[0,1]]) - I = diag(3, 0)
        let ob = ManifoldSpec::oblique(2, 2).unwrap();
        let v = ob.validate(&m(2, 2, &[2.0, 0.0, 0.0, 1.0])).unwrap();
        assert!(!v.valid);
        assert_abs_diff_eq!(v.violation, 3.0, epsilon = 1e-15);

        assert!(matches!(
            ob.validate(&Mat::zeros(3, 2)),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn so_rejects_reflections() {
        let so = ManifoldSpec::special_orthogonal(2).unwrap();
        let reflect = m(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let v = so.validate(&reflect).unwrap();
        assert!(!v.valid);
        assert_abs_diff_eq!(v.violation, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn sphere_projection_examples() {
        let s = ManifoldSpec::sphere(2, 2).unwrap();
        let p = KernelPoint::on_manifold(s, m(2, 2, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        let normal = p.project_tangent(p.value()).unwrap();
        assert_eq!(normal.value(), &Mat::zeros(2, 2));

        let tangent = m(2, 2, &[0.0, 0.3, -1.2, 0.5]);
        assert_eq!(p.project_tangent(&tangent).unwrap().value(), &tangent);
    }

    #[test]
    fn skew_is_tangent_at_identity() {
        let st = ManifoldSpec::stiefel(2, 2).unwrap();
        let p = KernelPoint::on_manifold(st, Mat::identity(2, 2)).unwrap();
        let skew = m(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        // sym(Iᵀ·skew) = 0 by hand
        assert_eq!(sym(&skew), Mat::zeros(2, 2));
        assert_eq!(p.project_tangent(&skew).unwrap().value(), &skew);
    }

    #[test]
    fn projection_requires_valid_point() {
        let s = ManifoldSpec::sphere(2, 1).unwrap();
        let off = KernelPoint::new(s, m(2, 1, &[2.0, 0.0])).unwrap();
        assert!(matches!(
            off.project_tangent(&Mat::zeros(2, 1)),
            Err(Error::Constraint { .. })
        ));
    }

    #[test]
    fn oblique_retraction_example() {
        let ob = ManifoldSpec::oblique(2, 2).unwrap();
        let p = KernelPoint::on_manifold(ob, Mat::identity(2, 2)).unwrap();
        let v = TangentVector::new(&p, m(2, 2, &[0.0, 0.0, 1.0, 0.0])).unwrap();
        let q = p.retract(&v).unwrap();
        let expect = m(2, 2, &[FRAC_1_SQRT_2, 0.0, FRAC_1_SQRT_2, 1.0]);
        assert_abs_diff_eq!(q.value(), &expect, epsilon = 1e-15);
    }

    #[test]
    fn stiefel_retraction_matches_gram_schmidt() {
        let st = ManifoldSpec::stiefel(2, 2).unwrap();
        let p = KernelPoint::on_manifold(st, Mat::identity(2, 2)).unwrap();
        let v = TangentVector::new(&p, m(2, 2, &[0.0, 0.1, -0.1, 0.0])).unwrap();
        let q = p.retract(&v).unwrap();
        let qtq = q.value().transpose() * q.value();
        assert_abs_diff_eq!(qtq, Mat::identity(2, 2), epsilon = 1e-12);

        // Gram-Schmidt on columns of [[1, .1], [-.1, 1]]
        let n = (1.0f64 + 0.01).sqrt();
        let gs = m(2, 2, &[1.0 / n, 0.1 / n, -0.1 / n, 1.0 / n]);
        assert_abs_diff_eq!(q.value(), &gs, epsilon = 1e-14);
    }

    #[test]
    fn zero_step_is_identity() {
        for (k, fam) in Family::ALL.into_iter().enumerate() {
            let spec = ManifoldSpec::new(fam, 3, 3).unwrap();
            let p = spec.random_point(k as u64);
            let q = p.retract(&TangentVector::zero(&p)).unwrap();
            assert_abs_diff_eq!(q.value(), p.value(), epsilon = 1e-14);
        }
    }

    #[test]
    fn degenerate_retraction_is_an_error() {
        let s = ManifoldSpec::oblique(2, 2).unwrap();
        let p = KernelPoint::on_manifold(s, Mat::identity(2, 2)).unwrap();
        // Not tangent, but exercises the zero-column branch directly.
        let bad = TangentVector {
            at: p.clone(),
            value: m(2, 2, &[-1.0, 0.0, 0.0, 0.0]),
        };
        assert!(matches!(p.retract(&bad), Err(Error::SingularStep(_))));

        let st = ManifoldSpec::stiefel(2, 2).unwrap();
        let p = KernelPoint::on_manifold(st, Mat::identity(2, 2)).unwrap();
        let bad = TangentVector {
            at: p.clone(),
            value: m(2, 2, &[0.0, 0.0, 0.0, -1.0]),
        };
        assert!(matches!(p.retract(&bad), Err(Error::SingularStep(_))));
    }

    #[test]
    fn exp_map_examples() {
        let s = ManifoldSpec::sphere(2, 1).unwrap();
        let e1 = KernelPoint::on_manifold(s, m(2, 1, &[1.0, 0.0])).unwrap();
        let v = TangentVector::new(&e1, m(2, 1, &[0.0, PI / 2.0])).unwrap();
        let q = e1.exp_map(&v).unwrap();
        assert_abs_diff_eq!(q.value(), &m(2, 1, &[0.0, 1.0]), epsilon = 1e-15);
        assert_eq!(e1.exp_map(&TangentVector::zero(&e1)).unwrap(), e1);

        let ob = ManifoldSpec::oblique(2, 2).unwrap();
        let p = KernelPoint::on_manifold(ob, Mat::identity(2, 2)).unwrap();
        let v = TangentVector::new(&p, m(2, 2, &[0.0, 0.0, PI, 0.0])).unwrap();
        let q = p.exp_map(&v).unwrap();
        assert_abs_diff_eq!(q.value(), &m(2, 2, &[-1.0, 0.0, 0.0, 1.0]), epsilon = 1e-15);

        let st = ManifoldSpec::stiefel(2, 2).unwrap();
        let p = KernelPoint::on_manifold(st, Mat::identity(2, 2)).unwrap();
        assert!(matches!(
            p.exp_map(&TangentVector::zero(&p)),
            Err(Error::UnsupportedMap("stiefel"))
        ));
    }

    #[test]
    fn sphere_exp_with_radius() {
        let s = ManifoldSpec::sphere(3, 1).unwrap().with_radius(2.5).unwrap();
        let p = s.random_point(4);
        let t = p
            .project_tangent(&m(3, 1, &[0.3, -1.0, 0.2]))
            .unwrap();
        let t = t.scaled(2.5 * PI / t.norm());
        let q = p.exp_map(&t).unwrap();
        assert_abs_diff_eq!(q.value(), &(-p.value()), epsilon = 1e-10);
        assert!(q.validate().valid);
    }

    #[test]
    fn random_points_are_valid_and_deterministic() {
        let s = ManifoldSpec::sphere(3, 3).unwrap();
        let p = s.random_point(7);
        assert_abs_diff_eq!(p.value().norm(), 1.0, epsilon = 1e-12);

        let st = ManifoldSpec::stiefel(4, 2).unwrap();
        let p = st.random_point(7);
        assert_abs_diff_eq!(
            p.value().transpose() * p.value(),
            Mat::identity(2, 2),
            epsilon = 1e-10
        );
        assert_eq!(st.random_point(7), p);

        for fam in Family::ALL {
            let spec = ManifoldSpec::new(fam, 4, 4).unwrap();
            for seed in 0..20 {
                assert!(spec.random_point(seed).validate().valid);
            }
        }
    }

    #[test]
    fn inner_examples() {
        let s = ManifoldSpec::sphere(3, 1).unwrap();
        let p = KernelPoint::on_manifold(s, m(3, 1, &[1.0, 0.0, 0.0])).unwrap();
        let z = TangentVector::zero(&p);
        assert_eq!(p.inner(&z, &z).unwrap(), 0.0);
        let u = TangentVector::new(&p, m(3, 1, &[0.0, 1.0, 0.0])).unwrap();
        let w = TangentVector::new(&p, m(3, 1, &[0.0, 0.0, 1.0])).unwrap();
        assert_eq!(p.inner(&u, &u).unwrap(), 1.0);
        assert_eq!(p.inner(&u, &w).unwrap(), 0.0);

        let other = KernelPoint::on_manifold(s, m(3, 1, &[0.0, 1.0, 0.0])).unwrap();
        assert!(matches!(other.inner(&u, &u), Err(Error::Structure(_))));
    }

    #[test]
    fn geodesic_distance_examples() {
        let s = ManifoldSpec::sphere(2, 1).unwrap();
        let e1 = KernelPoint::on_manifold(s, m(2, 1, &[1.0, 0.0])).unwrap();
        let e2 = KernelPoint::on_manifold(s, m(2, 1, &[0.0, 1.0])).unwrap();
        let neg = KernelPoint::on_manifold(s, m(2, 1, &[-1.0, 0.0])).unwrap();
        assert_eq!(e1.geodesic_distance(&e1).unwrap(), 0.0);
        assert_abs_diff_eq!(e1.geodesic_distance(&e2).unwrap(), PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e1.geodesic_distance(&neg).unwrap(), PI, epsilon = 1e-15);

        let st = ManifoldSpec::stiefel(2, 2).unwrap();
        let p = st.random_point(1);
        assert!(matches!(
            p.geodesic_distance(&p),
            Err(Error::UnsupportedMap(_))
        ));
    }

    #[test]
    fn tangent_constructor_rejects_normal_directions() {
        let s = ManifoldSpec::sphere(2, 1).unwrap();
        let p = KernelPoint::on_manifold(s, m(2, 1, &[1.0, 0.0])).unwrap();
        assert!(TangentVector::new(&p, m(2, 1, &[1.0, 1.0])).is_err());
    }
}
