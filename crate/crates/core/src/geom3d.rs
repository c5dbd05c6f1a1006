//! Rigid-motion arithmetic on SO(3)/SE(3).
//!
//! Rotations are validated on construction: `Rotation3::from_matrix` rejects
//! anything farther than [`ROTATION_TOL`] from the manifold. The two
//! projections ([`gram_schmidt_project`], [`procrustes_project`]) map raw
//! decoder features onto SO(3), and [`angular_distance`] is the rotation
//! error used by the training loss and the evaluation metrics.

use std::f64::consts::{PI, SQRT_2};
use std::fmt::Write as _;

use nalgebra::{Matrix3, Matrix3x2, Matrix4, Vector3};

use crate::cloudproc::PointCloud;
use crate::error::{Error, Result};

/// Frobenius tolerance on `RᵀR − I` and on `det R − 1`.
pub const ROTATION_TOL: f64 = 1e-9;

/// Columns closer than this angle (radians) are treated as parallel.
pub const PARALLEL_TOL: f64 = 1e-7;

const NORM_FLOOR: f64 = 1e-12;

/// A 3×3 proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Rotation3(Matrix3::identity())
    }

    /// Wraps `m` after checking orthonormality and orientation.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let orth = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if !orth.is_finite() || orth > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::NotARotation(format!(
                "|RᵀR − I|_F = {orth:.3e}, det = {det:.12}"
            )));
        }
        Ok(Rotation3(m))
    }

    /// For products of validated rotations, where the invariant holds by
    /// construction up to round-off.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation3(m)
    }

    /// Projects an arbitrary (possibly drifted) matrix back onto SO(3).
    pub fn renormalize(m: &Matrix3<f64>) -> Result<Self> {
        procrustes_project(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation3(self.0.transpose())
    }

    /// Exponential map from a rotation vector (Rodrigues).
    pub fn exp(omega: &Vector3<f64>) -> Self {
        let theta = omega.norm();
        let k = skew(omega);
        let (a, b) = if theta < 1e-8 {
            (1.0 - theta * theta / 6.0, 0.5 - theta * theta / 24.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
        };
        Rotation3(Matrix3::identity() + k * a + k * k * b)
    }

    /// Logarithm map to a rotation vector with angle in `[0, π]`.
    pub fn log(&self) -> Vector3<f64> {
        let r = &self.0;
        let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos.acos();
        let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
        if theta < 1e-8 {
            return w * 0.5;
        }
        if PI - theta > 1e-5 {
            return w * (theta / (2.0 * theta.sin()));
        }
        // Near π the antisymmetric part vanishes; recover the axis from the
        // symmetric part instead.
        let b = (r + Matrix3::identity()) * 0.5;
        let mut axis = Vector3::new(
            b[(0, 0)].max(0.0).sqrt(),
            b[(1, 1)].max(0.0).sqrt(),
            b[(2, 2)].max(0.0).sqrt(),
        );
        let i = axis.imax();
        for j in 0..3 {
            if j != i && b[(i, j)] < 0.0 {
                axis[j] = -axis[j];
            }
        }
        if w.dot(&axis) < 0.0 {
            axis = -axis;
        }
        axis.normalize() * theta
    }

    /// Geodesic angle to the identity.
    pub fn angle(&self) -> f64 {
        ((self.0.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }
}

impl std::ops::Mul for Rotation3 {
    type Output = Rotation3;

    fn mul(self, rhs: Rotation3) -> Rotation3 {
        Rotation3(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vector3<f64>> for Rotation3 {
    type Output = Vector3<f64>;

    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// An element of SE(3): `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation3,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Rotation3, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation3::identity(), t)
    }

    /// Right-multiplied exponential of the local 6-vector
    /// `(ω_x, ω_y, ω_z, v_x, v_y, v_z)`.
    pub fn exp_local(xi: &[f64; 6]) -> Self {
        Self::new(
            Rotation3::exp(&Vector3::new(xi[0], xi[1], xi[2])),
            Vector3::new(xi[3], xi[4], xi[5]),
        )
    }

    /// Inverse of [`RigidTransform::exp_local`].
    pub fn log_local(&self) -> [f64; 6] {
        let w = self.rotation.log();
        let t = self.translation;
        [w.x, w.y, w.z, t.x, t.y, t.z]
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::DegenerateInput(format!(
                "homogeneous bottom row must be (0,0,0,1), got {bottom:?}"
            )));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Ok(Self::new(Rotation3::from_matrix(r)?, t))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * v
    }

    /// Row-major upper 3×4 block.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = self.rotation.matrix();
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    /// Parses a row-major 3×4 block. Rotations off the manifold by more than
    /// [`ROTATION_TOL`] are projected back onto SO(3); the returned flag says
    /// whether that happened and the distance before projection.
    pub fn from_row_major_3x4(v: &[f64; 12]) -> Result<(Self, f64)> {
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        let drift = (r.transpose() * r - Matrix3::identity()).norm();
        let rot = match Rotation3::from_matrix(r) {
            Ok(rot) => rot,
            Err(_) => procrustes_project(&r)?,
        };
        Ok((Self::new(rot, t), drift))
    }

    /// One line of the KITTI pose format: 12 whitespace-separated decimals.
    /// Values are written in shortest round-trip form, so reading the line
    /// back reproduces the same bits.
    pub fn to_kitti_line(&self) -> String {
        let mut line = String::with_capacity(12 * 24);
        for (i, x) in self.to_row_major_3x4().iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            // normalize -0.0 so that text round trips are stable
            let x = if *x == 0.0 { 0.0 } else { *x };
            write!(line, "{x:e}").unwrap();
        }
        line
    }
}

/// `a ∘ b`: apply `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform::new(
        Rotation3::from_matrix_unchecked(a.rotation.matrix() * b.rotation.matrix()),
        a.rotation.matrix() * b.translation + a.translation,
    )
}

pub fn inverse(a: &RigidTransform) -> RigidTransform {
    let rt = a.rotation.transpose();
    RigidTransform::new(rt, -(rt.matrix() * a.translation))
}

/// `t_i⁻¹ ∘ t_j`, the pose of frame `j` expressed in frame `i`.
pub fn relative(t_i: &RigidTransform, t_j: &RigidTransform) -> RigidTransform {
    let rit = t_i.rotation.matrix().transpose();
    RigidTransform::new(
        Rotation3::from_matrix_unchecked(rit * t_j.rotation.matrix()),
        rit * (t_j.translation - t_i.translation),
    )
}

/// Transforms points and rotates normals. Padding rows stay zero.
pub fn apply(a: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .zip(&cloud.mask)
        .map(|(p, &real)| if real { a.transform_point(p) } else { Vector3::zeros() })
        .collect();
    let normals = cloud.normals.as_ref().map(|ns| {
        ns.iter()
            .zip(&cloud.mask)
            .map(|(n, &real)| if real { a.transform_vector(n) } else { Vector3::zeros() })
            .collect()
    });
    PointCloud {
        points,
        normals,
        mask: cloud.mask.clone(),
    }
}

/// Orthonormalizes the two columns of `w` and completes the frame with their
/// cross product.
///
/// This is the continuous 6D rotation parametrization; note it is not the
/// Frobenius-nearest rotation to `w` in general.
pub fn gram_schmidt_project(w: &Matrix3x2<f64>) -> Result<Rotation3> {
    let a1 = w.column(0).into_owned();
    let a2 = w.column(1).into_owned();
    let n1 = a1.norm();
    let n2 = a2.norm();
    if !(n1 >= NORM_FLOOR && n2 >= NORM_FLOOR) {
        return Err(Error::DegenerateInput(format!(
            "column norms {n1:.3e}, {n2:.3e} below {NORM_FLOOR:e}"
        )));
    }
    let b1 = a1 / n1;
    let u = a2 - b1 * b1.dot(&a2);
    let un = u.norm();
    // |sin| of the angle between the columns
    if un / n2 <= PARALLEL_TOL.sin() {
        return Err(Error::DegenerateInput(
            "columns are parallel within tolerance".into(),
        ));
    }
    let b2 = u / un;
    let b3 = b1.cross(&b2);
    Ok(Rotation3(Matrix3::from_columns(&[b1, b2, b3])))
}

/// Frobenius-nearest rotation: `U·diag(1, 1, det(UVᵀ))·Vᵀ` for `w = UΣVᵀ`.
pub fn procrustes_project(w: &Matrix3<f64>) -> Result<Rotation3> {
    let parts = ProcrustesParts::new(w)?;
    Ok(Rotation3(parts.rotation()))
}

/// SVD factors with the determinant sign folded into `u`, shared by the
/// projection and its derivative.
pub(crate) struct ProcrustesParts {
    /// `U·diag(1, 1, d)`
    pub u: Matrix3<f64>,
    pub v: Matrix3<f64>,
    /// `(σ₁, σ₂, d·σ₃)`, descending in the first two entries
    pub sigma: Vector3<f64>,
}

impl ProcrustesParts {
    pub fn new(w: &Matrix3<f64>) -> Result<Self> {
        if !w.iter().all(|x| x.is_finite()) {
            return Err(Error::DegenerateInput("non-finite matrix".into()));
        }
        let svd = w.svd(true, true);
        let mut u = svd.u.expect("requested U");
        let mut vt = svd.v_t.expect("requested Vᵀ");
        let mut s = svd.singular_values;
        // nalgebra does not promise an ordering; sort descending
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        let (u0, vt0, s0) = (u, vt, s);
        for (dst, &src) in order.iter().enumerate() {
            u.set_column(dst, &u0.column(src));
            vt.set_row(dst, &vt0.row(src));
            s[dst] = s0[src];
        }
        if s[2] <= NORM_FLOOR {
            return Err(Error::DegenerateInput(format!(
                "rank deficient, smallest singular value {:.3e}",
                s[2]
            )));
        }
        let v = vt.transpose();
        let d = (u * vt).determinant().signum();
        let mut u_fixed = u;
        u_fixed.set_column(2, &(u.column(2) * d));
        Ok(ProcrustesParts {
            u: u_fixed,
            v,
            sigma: Vector3::new(s[0], s[1], d * s[2]),
        })
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.u * self.v.transpose()
    }

    /// Pulls `∂L/∂R` back to `∂L/∂W`.
    pub fn backward(&self, grad_r: &Matrix3<f64>) -> Matrix3<f64> {
        let m = self.u.transpose() * grad_r * self.v;
        let mut k = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let denom = self.sigma[i] + self.sigma[j];
                    if denom.abs() > NORM_FLOOR {
                        k[(i, j)] = (m[(i, j)] - m[(j, i)]) / denom;
                    }
                }
            }
        }
        self.u * k * self.v.transpose()
    }
}

/// Geodesic angle between two rotations, computed from their chordal
/// distance: `‖a − b‖_F = 2√2·sin(δ/2)`.
pub fn angular_distance(ra: &Rotation3, rb: &Rotation3) -> f64 {
    let chord = (ra.matrix() - rb.matrix()).norm();
    2.0 * (chord / (2.0 * SQRT_2)).clamp(0.0, 1.0).asin()
}

/// An ordered set of poses mapping each cloud into a shared frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseSet {
    pub poses: Vec<RigidTransform>,
}

impl PoseSet {
    pub fn new(poses: Vec<RigidTransform>) -> Self {
        PoseSet { poses }
    }

    pub fn identity(n: usize) -> Self {
        PoseSet {
            poses: vec![RigidTransform::identity(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Re-expresses every pose in the frame of the first one.
    pub fn anchored(&self) -> PoseSet {
        match self.poses.first() {
            None => PoseSet::default(),
            Some(first) => {
                let inv = inverse(first);
                let mut poses: Vec<_> = self.poses.iter().map(|p| compose(&inv, p)).collect();
                poses[0] = RigidTransform::identity();
                PoseSet { poses }
            }
        }
    }

    pub fn to_kitti_string(&self) -> String {
        let mut out = String::new();
        for p in &self.poses {
            out.push_str(&p.to_kitti_line());
            out.push('\n');
        }
        out
    }
}

impl std::ops::Index<usize> for PoseSet {
    type Output = RigidTransform;

    fn index(&self, i: usize) -> &RigidTransform {
        &self.poses[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix3x2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rot_z(a: f64) -> Rotation3 {
        Rotation3::exp(&Vector3::new(0.0, 0.0, a))
    }

    fn random_rotation(rng: &mut impl Rng) -> Rotation3 {
        let w = Vector3::new(
            rng.random_range(-PI..PI),
            rng.random_range(-PI..PI),
            rng.random_range(-PI..PI),
        );
        Rotation3::exp(&(w.normalize() * rng.random_range(0.0..PI)))
    }

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        RigidTransform::new(
            random_rotation(rng),
            Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ),
        )
    }

    fn assert_transform_eq(a: &RigidTransform, b: &RigidTransform, tol: f64) {
        assert!(
            (a.rotation.matrix() - b.rotation.matrix()).norm() <= tol,
            "rotation mismatch {a:?} vs {b:?}"
        );
        assert!((a.translation - b.translation).norm() <= tol);
    }

    #[test]
    fn gram_schmidt_identity_columns() {
        let w = Matrix3x2::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0);
        assert_eq!(gram_schmidt_project(&w).unwrap(), Rotation3::identity());
        let w = Matrix3x2::new(2.0, 0.0, 0.0, 3.0, 0.0, 0.0);
        assert_eq!(gram_schmidt_project(&w).unwrap(), Rotation3::identity());
    }

    #[test]
    fn gram_schmidt_matches_explicit_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let w = Matrix3x2::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let r = gram_schmidt_project(&w).unwrap();
            // step-by-step oracle written without vector helpers
            let a = [w[(0, 0)], w[(1, 0)], w[(2, 0)]];
            let b = [w[(0, 1)], w[(1, 1)], w[(2, 1)]];
            let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            let e1 = [a[0] / na, a[1] / na, a[2] / na];
            let d = e1[0] * b[0] + e1[1] * b[1] + e1[2] * b[2];
            let u = [b[0] - d * e1[0], b[1] - d * e1[1], b[2] - d * e1[2]];
            let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            let e2 = [u[0] / nu, u[1] / nu, u[2] / nu];
            let e3 = [
                e1[1] * e2[2] - e1[2] * e2[1],
                e1[2] * e2[0] - e1[0] * e2[2],
                e1[0] * e2[1] - e1[1] * e2[0],
            ];
            for i in 0..3 {
                assert_abs_diff_eq!(r.matrix()[(i, 0)], e1[i], epsilon = 1e-14);
                assert_abs_diff_eq!(r.matrix()[(i, 1)], e2[i], epsilon = 1e-14);
                assert_abs_diff_eq!(r.matrix()[(i, 2)], e3[i], epsilon = 1e-14);
            }
            assert!(Rotation3::from_matrix(*r.matrix()).is_ok());
        }
    }

    #[test]
    fn gram_schmidt_rejects_degenerate() {
        let zero_col = Matrix3x2::new(0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            gram_schmidt_project(&zero_col),
            Err(Error::DegenerateInput(_))
        ));
        let parallel = Matrix3x2::new(1.0, 2.0, 1.0, 2.0, 0.0, 0.0);
        assert!(matches!(
            gram_schmidt_project(&parallel),
            Err(Error::DegenerateInput(_))
        ));
        assert!(gram_schmidt_project(&Matrix3x2::zeros()).is_err());
    }

    #[test]
    fn procrustes_fixed_points() {
        assert_eq!(
            procrustes_project(&Matrix3::identity()).unwrap().matrix(),
            &Matrix3::identity()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let q = random_rotation(&mut rng);
            let r = procrustes_project(q.matrix()).unwrap();
            assert!((r.matrix() - q.matrix()).norm() < 1e-12);
        }
    }

    #[test]
    fn procrustes_reflection_beats_sampled_rotations() {
        let w = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        let r = procrustes_project(&w).unwrap();
        assert!(Rotation3::from_matrix(*r.matrix()).is_ok());
        let best = (r.matrix() - w).norm();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100_000 {
            let q = random_rotation(&mut rng);
            assert!(best <= (q.matrix() - w).norm() + 1e-12);
        }
    }

    #[test]
    fn procrustes_rejects_rank_deficient() {
        let w = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            procrustes_project(&w),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn angular_distance_examples() {
        let r = rot_z(0.3);
        assert_eq!(angular_distance(&r, &r), 0.0);
        // trace-formula oracle: acos((tr(R) − 1)/2) for rot_z(π/2) is π/2
        let q = rot_z(PI / 2.0);
        let trace_angle = ((q.matrix().trace() - 1.0) / 2.0).acos();
        assert_abs_diff_eq!(trace_angle, PI / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            angular_distance(&q, &Rotation3::identity()),
            PI / 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn angular_distance_chord_identity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            let d = angular_distance(&a, &b);
            assert!((0.0..=PI).contains(&d));
            assert_abs_diff_eq!(d, angular_distance(&b, &a), epsilon = 1e-12);
            let chord = (a.matrix() - b.matrix()).norm();
            assert_abs_diff_eq!(chord, 2.0 * SQRT_2 * (d / 2.0).sin(), epsilon = 1e-9);
            assert_abs_diff_eq!(d, (a.transpose() * b).angle(), epsilon = 1e-6);
        }
    }

    #[test]
    fn relative_and_compose() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_transform(&mut rng);
        assert_transform_eq(&relative(&t, &t), &RigidTransform::identity(), 1e-12);
        assert_transform_eq(&relative(&RigidTransform::identity(), &t), &t, 1e-12);
        assert_transform_eq(&compose(&t, &inverse(&t)), &RigidTransform::identity(), 1e-12);
        for _ in 0..100 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let c = random_transform(&mut rng);
            assert_transform_eq(&compose(&a, &relative(&a, &b)), &b, 1e-12);
            assert_transform_eq(&compose(&compose(&a, &b), &c), &compose(&a, &compose(&b, &c)), 1e-12);
            assert_transform_eq(&relative(&a, &b), &inverse(&relative(&b, &a)), 1e-12);
        }
    }

    #[test]
    fn apply_hand_computed() {
        let t = RigidTransform::new(rot_z(PI / 2.0), Vector3::new(1.0, 0.0, 0.0));
        let cloud = PointCloud::from_points(vec![Vector3::new(1.0, 0.0, 0.0)]);
        let out = apply(&t, &cloud);
        // [0 −1 0; 1 0 0; 0 0 1]·(1,0,0) + (1,0,0) = (1,1,0)
        assert!((out.points[0] - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-15);
        assert_eq!(apply(&RigidTransform::identity(), &cloud), cloud);
    }

    #[test]
    fn apply_keeps_padding_zero() {
        let mut cloud = PointCloud::from_points(vec![Vector3::new(1.0, 2.0, 3.0)]);
        cloud.normals = Some(vec![Vector3::new(0.0, 0.0, 1.0)]);
        let cloud = crate::cloudproc::pad_to_length(&cloud, 3).unwrap();
        let t = RigidTransform::from_translation(Vector3::new(1.0, 1.0, 1.0));
        let out = apply(&t, &cloud);
        assert_eq!(out.mask, vec![true, false, false]);
        assert_eq!(out.points[2], Vector3::zeros());
        assert_eq!(out.normals.unwrap()[1], Vector3::zeros());
    }

    #[test]
    fn log_exp_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..500 {
            let r = random_rotation(&mut rng);
            let back = Rotation3::exp(&r.log());
            assert!((back.matrix() - r.matrix()).norm() < 1e-9);
        }
        let half_turn = rot_z(PI);
        assert!((Rotation3::exp(&half_turn.log()).matrix() - half_turn.matrix()).norm() < 1e-9);
    }

    #[test]
    fn kitti_line_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            let line = t.to_kitti_line();
            let vals: Vec<f64> = line.split_whitespace().map(|s| s.parse().unwrap()).collect();
            let (back, _) = RigidTransform::from_row_major_3x4(&vals.try_into().unwrap()).unwrap();
            assert_eq!(back.to_kitti_line(), line);
        }
        assert_eq!(
            RigidTransform::identity().to_kitti_line(),
            "1e0 0e0 0e0 0e0 0e0 1e0 0e0 0e0 0e0 0e0 1e0 0e0"
        );
    }

    #[test]
    fn homogeneous_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_transform(&mut rng);
        let h = t.to_homogeneous();
        assert_eq!(h.row(3).into_owned(), nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0));
        assert_transform_eq(&RigidTransform::from_homogeneous(&h).unwrap(), &t, 0.0);
    }

    #[test]
    fn rotation_constructor_rejects_scaled() {
        assert!(Rotation3::from_matrix(Matrix3::identity() * 1.001).is_err());
        assert!(Rotation3::from_matrix(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0))).is_err());
        let drift = Matrix3::identity() + Matrix3::from_element(1e-7);
        assert!(Rotation3::from_matrix(drift).is_err());
        assert!(Rotation3::renormalize(&drift).is_ok());
    }
}
