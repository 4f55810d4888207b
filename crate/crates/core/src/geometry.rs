//! Rigid-motion invariant geometry of residue frames.
//!
//! Every scalar produced here (distances, polar/azimuthal angles, edge
//! rotation angles, Euler angles, torsions) is unchanged when all input
//! coordinates are moved by the same proper rigid motion. Signed angles live
//! in `(-pi, pi]`; polar angles in `[0, pi]`.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::protein::residue::{chi_atoms, Residue};

/// Minimum angle (radians) between the two frame-defining bonds.
const COLLINEAR_EPS: f64 = 1e-6;
/// Projection norms below this make the edge rotation angle undefined.
const PROJECTION_EPS: f64 = 1e-9;
const GIMBAL_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    /// Unit vector in the same direction; `None` for (near) zero vectors.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: Vec3) -> Vec3 {
    Vec3::new(
        a[0][0] * v.x + a[0][1] * v.y + a[0][2] * v.z,
        a[1][0] * v.x + a[1][1] * v.y + a[1][2] * v.z,
        a[2][0] * v.x + a[2][1] * v.y + a[2][2] * v.z,
    )
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Proper rigid motion `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Transform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl SE3Transform {
    pub fn identity() -> Self {
        SE3Transform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: Vec3::ZERO,
        }
    }

    pub fn translation(t: Vec3) -> Self {
        SE3Transform {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation by `angle` about unit `axis` (Rodrigues), then translation.
    pub fn from_axis_angle(axis: Vec3, angle: f64, translation: Vec3) -> Result<Self> {
        let k = axis
            .normalized()
            .ok_or(Error::DegenerateGeometry("zero rotation axis"))?;
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let rotation = [
            [
                c + k.x * k.x * t,
                k.x * k.y * t - k.z * s,
                k.x * k.z * t + k.y * s,
            ],
            [
                k.y * k.x * t + k.z * s,
                c + k.y * k.y * t,
                k.y * k.z * t - k.x * s,
            ],
            [
                k.z * k.x * t - k.y * s,
                k.z * k.y * t + k.x * s,
                c + k.z * k.z * t,
            ],
        ];
        Ok(SE3Transform {
            rotation,
            translation,
        })
    }

    /// Uniformly random rotation (normalized Gaussian quaternion) and a
    /// translation with components in `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> Self {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        let rotation = [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ];
        let translation = Vec3::new(
            rng.random_range(-scale..=scale),
            rng.random_range(-scale..=scale),
            rng.random_range(-scale..=scale),
        );
        SE3Transform {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        mat_vec(&self.rotation, p) + self.translation
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.rotation, v)
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(&self, inner: &SE3Transform) -> SE3Transform {
        SE3Transform {
            rotation: mat_mul(&self.rotation, &inner.rotation),
            translation: self.apply(inner.translation),
        }
    }

    /// Checks `R^T R = I` and `det R = +1` within `tol`.
    pub fn is_proper(&self, tol: f64) -> bool {
        let rtr = mat_mul(&mat_transpose(&self.rotation), &self.rotation);
        let orthonormal = (0..3)
            .all(|i| (0..3).all(|j| (rtr[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < tol));
        orthonormal && (det(&self.rotation) - 1.0).abs() < tol
    }
}

fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn apply_se3(t: &SE3Transform, points: &[Vec3]) -> Vec<Vec3> {
    points.iter().map(|p| t.apply(*p)).collect()
}

/// Orthonormal right-handed frame anchored at a residue.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalFrame {
    pub origin: Vec3,
    pub axes: [Vec3; 3],
}

impl LocalFrame {
    /// Rotation matrix whose columns are the frame axes.
    pub fn rotation(&self) -> Mat3 {
        let [a, b, c] = self.axes;
        [[a.x, b.x, c.x], [a.y, b.y, c.y], [a.z, b.z, c.z]]
    }

    /// Coordinates of `p` in this frame.
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let r = p - self.origin;
        Vec3::new(
            r.dot(self.axes[0]),
            r.dot(self.axes[1]),
            r.dot(self.axes[2]),
        )
    }

    /// Same axes, different origin.
    pub fn translated_to(&self, origin: Vec3) -> LocalFrame {
        LocalFrame {
            origin,
            axes: self.axes,
        }
    }
}

/// Frame at `ca`: e1 along `ca -> c`, e2 the Gram-Schmidt component of
/// `ca -> n` orthogonal to e1, e3 = e1 x e2.
pub fn build_local_frame(n: Vec3, ca: Vec3, c: Vec3) -> Result<LocalFrame> {
    let to_c = c - ca;
    let to_n = n - ca;
    let (lc, ln) = (to_c.norm(), to_n.norm());
    if lc == 0.0 || ln == 0.0 || (n - c).norm() == 0.0 {
        return Err(Error::DegenerateGeometry("coincident frame atoms"));
    }
    let sin = to_c.cross(to_n).norm() / (lc * ln);
    if sin.asin().abs() < COLLINEAR_EPS || !sin.is_finite() {
        return Err(Error::DegenerateGeometry("collinear frame atoms"));
    }
    let e1 = to_c * (1.0 / lc);
    let e2 = (to_n - e1 * to_n.dot(e1))
        .normalized()
        .ok_or(Error::DegenerateGeometry("collinear frame atoms"))?;
    let e3 = e1.cross(e2);
    Ok(LocalFrame {
        origin: ca,
        axes: [e1, e2, e3],
    })
}

/// `(d, theta, phi)` of `p` in `frame`; theta measured from e3, phi from e1
/// towards e2. Degenerate directions resolve to zero angles.
pub fn spherical_coords(frame: &LocalFrame, p: Vec3) -> (f64, f64, f64) {
    let r = frame.to_local(p);
    let d = r.norm();
    if d == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let theta = (r.z / d).clamp(-1.0, 1.0).acos();
    let phi = if r.x == 0.0 && r.y == 0.0 {
        0.0
    } else {
        wrap_angle(r.y.atan2(r.x))
    };
    (d, theta, phi)
}

/// Signed dihedral of `p1-p2-p3-p4` in `(-pi, pi]`.
pub fn torsion_angle(p1: Vec3, p2: Vec3, p3: Vec3, p4: Vec3) -> Result<f64> {
    let b1 = p2 - p1;
    let b2 = p3 - p2;
    let b3 = p4 - p3;
    let b2u = b2.normalized().ok_or(Error::DegenerateTorsion)?;
    let n1 = b1.cross(b2);
    let n2 = b2.cross(b3);
    let collinear = |a: Vec3, b: Vec3, n: Vec3| {
        let scale = a.norm() * b.norm();
        scale == 0.0 || n.norm() / scale < COLLINEAR_EPS
    };
    if collinear(b1, b2, n1) || collinear(b2, b3, n2) {
        return Err(Error::DegenerateTorsion);
    }
    let y = n1.cross(n2).dot(b2u);
    let x = n1.dot(n2);
    Ok(wrap_angle(y.atan2(x)))
}

/// Signed angle, about the direction `i -> j`, from frame i's e1 to frame j's
/// e1 after projecting both onto the plane normal to that direction.
pub fn edge_rotation_angle(frame_i: &LocalFrame, frame_j: &LocalFrame) -> Result<f64> {
    let u = (frame_j.origin - frame_i.origin)
        .normalized()
        .ok_or(Error::DegenerateGeometry("coincident frame origins"))?;
    let project = |v: Vec3| v - u * v.dot(u);
    let a = project(frame_i.axes[0]);
    let b = project(frame_j.axes[0]);
    if a.norm() < PROJECTION_EPS || b.norm() < PROJECTION_EPS {
        return Ok(0.0);
    }
    Ok(wrap_angle(u.dot(a.cross(b)).atan2(a.dot(b))))
}

/// Z-Y-Z Euler angles of the relative rotation `R_i^T R_j`, so that
/// `R_z(t1) R_y(t2) R_z(t3) = R_i^T R_j`. At gimbal lock (t2 at 0 or pi)
/// `t3 = 0`. Note t2 lies in `[0, pi]`.
pub fn euler_angles(frame_i: &LocalFrame, frame_j: &LocalFrame) -> (f64, f64, f64) {
    let rel = mat_mul(&mat_transpose(&frame_i.rotation()), &frame_j.rotation());
    let beta = rel[0][2].hypot(rel[1][2]).atan2(rel[2][2]);
    if beta < GIMBAL_EPS {
        // R = R_z(alpha)
        (wrap_angle(rel[1][0].atan2(rel[0][0])), 0.0, 0.0)
    } else if PI - beta < GIMBAL_EPS {
        // R = R_z(alpha) R_y(pi)
        (wrap_angle((-rel[1][0]).atan2(rel[1][1])), PI, 0.0)
    } else {
        let alpha = rel[1][2].atan2(rel[0][2]);
        let gamma = rel[2][1].atan2(-rel[2][0]);
        (wrap_angle(alpha), beta, wrap_angle(gamma))
    }
}

/// First four side-chain dihedrals with availability mask.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SideChainTorsions {
    pub chi: [f64; 4],
    pub defined: [bool; 4],
}

impl SideChainTorsions {
    /// `[sin chi_k, cos chi_k]` for defined entries (zeros otherwise),
    /// followed by the 0/1 mask: 12 values.
    pub fn features(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for k in 0..4 {
            if self.defined[k] {
                out[2 * k] = self.chi[k].sin();
                out[2 * k + 1] = self.chi[k].cos();
                out[8 + k] = 1.0;
            }
        }
        out
    }
}

/// chi1..chi4 from the standard per-residue atom quadruples. Entries whose
/// atoms are absent or collinear stay masked with value 0.
pub fn side_chain_torsions(residue: &Residue) -> SideChainTorsions {
    let mut out = SideChainTorsions::default();
    for (k, quad) in chi_atoms(residue.aa_type).iter().enumerate().take(4) {
        let pts: Option<Vec<Vec3>> = quad.iter().map(|name| residue.atom(name)).collect();
        if let Some(p) = pts {
            if let Ok(angle) = torsion_angle(p[0], p[1], p[2], p[3]) {
                out.chi[k] = angle;
                out.defined[k] = true;
            }
        }
    }
    out
}

/// Geometry of a directed edge `i -> j`: position of j in frame i plus the
/// rotational degrees of freedom between the two frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeGeometry {
    pub d: f64,
    pub theta: f64,
    pub phi: f64,
    pub tau: f64,
    /// Backbone-frame Euler angles; present at backbone and all-atom levels.
    pub euler: Option<[f64; 3]>,
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const TOL: f64 = 1e-9;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    fn close_angle(a: f64, b: f64, tol: f64) -> bool {
        wrap_angle(a - b).abs() < tol
    }

    fn vclose(a: Vec3, b: Vec3, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    fn frame_is_valid(f: &LocalFrame) -> bool {
        let [a, b, c] = f.axes;
        close(a.dot(b), 0.0, 1e-10)
            && close(a.dot(c), 0.0, 1e-10)
            && close(b.dot(c), 0.0, 1e-10)
            && [a, b, c].iter().all(|v| close(v.norm(), 1.0, 1e-10))
            && vclose(a.cross(b), c, 1e-10)
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-20.0..20.0f64, -20.0..20.0f64, -20.0..20.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    fn random_frame(rng: &mut ChaCha8Rng) -> LocalFrame {
        loop {
            let p: [Vec3; 3] = std::array::from_fn(|_| {
                Vec3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                )
            });
            if let Ok(f) = build_local_frame(p[0], p[1], p[2]) {
                return f;
            }
        }
    }

    fn transform_frame(t: &SE3Transform, f: &LocalFrame) -> LocalFrame {
        LocalFrame {
            origin: t.apply(f.origin),
            axes: f.axes.map(|a| t.rotate(a)),
        }
    }

    #[test]
    fn axis_aligned_frame() {
        let f = build_local_frame(
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::ZERO,
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        assert_eq!(
            f.axes,
            [
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 1.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0)
            ]
        );
        assert_eq!(f.origin, Vec3::ZERO);
    }

    #[test]
    fn frame_rejects_collinear_and_coincident() {
        let o = Vec3::ZERO;
        assert!(build_local_frame(Vec3::new(-1.0, 0.0, 0.0), o, Vec3::new(2.0, 0.0, 0.0)).is_err());
        assert!(build_local_frame(Vec3::new(3.0, 0.0, 0.0), o, Vec3::new(2.0, 0.0, 0.0)).is_err());
        assert!(build_local_frame(o, o, Vec3::new(2.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn frame_is_rotation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, ca, c) = (
            Vec3::new(0.3, 1.2, -0.4),
            Vec3::new(0.1, 0.0, 0.2),
            Vec3::new(1.5, 0.1, 0.0),
        );
        let f = build_local_frame(n, ca, c).unwrap();
        for _ in 0..10 {
            let t = SE3Transform::random(&mut rng, 10.0);
            let g = build_local_frame(t.apply(n), t.apply(ca), t.apply(c)).unwrap();
            for k in 0..3 {
                assert!(vclose(g.axes[k], t.rotate(f.axes[k]), 1e-12));
            }
        }
    }

    #[test]
    fn spherical_examples() {
        let f = build_local_frame(
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::ZERO,
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        assert_eq!(
            spherical_coords(&f, Vec3::new(0.0, 0.0, 5.0)),
            (5.0, 0.0, 0.0)
        );
        let (d, theta, phi) = spherical_coords(&f, Vec3::new(3.0, 4.0, 0.0));
        assert_eq!(d, 5.0);
        assert!(close(theta, PI / 2.0, 1e-15));
        assert_eq!(phi, 4f64.atan2(3.0));
        assert_eq!(spherical_coords(&f, Vec3::ZERO), (0.0, 0.0, 0.0));
        let (_, theta, phi) = spherical_coords(&f, Vec3::new(0.0, 0.0, -2.0));
        assert_eq!((theta, phi), (PI, 0.0));
    }

    #[test]
    fn torsion_planar_cases() {
        let p = [
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::ZERO,
            Vec3::new(1.0, 0.0, 0.0),
        ];
        assert_eq!(
            torsion_angle(p[0], p[1], p[2], Vec3::new(1.0, 1.0, 0.0)).unwrap(),
            0.0
        );
        assert_eq!(
            torsion_angle(p[0], p[1], p[2], Vec3::new(1.0, -1.0, 0.0)).unwrap(),
            PI
        );
        let ninety = torsion_angle(p[0], p[1], p[2], Vec3::new(1.0, 0.0, 1.0)).unwrap();
        assert!(close(ninety.abs(), PI / 2.0, 1e-15));
        assert!(matches!(
            torsion_angle(
                Vec3::new(-1.0, 0.0, 0.0),
                p[1],
                p[2],
                Vec3::new(1.0, 1.0, 0.0)
            ),
            Err(Error::DegenerateTorsion)
        ));
    }

    #[test]
    fn mirror_negates_torsion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p: [Vec3; 4] = std::array::from_fn(|_| {
                Vec3::new(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                )
            });
            let m = p.map(|v| Vec3::new(v.x, v.y, -v.z));
            let a = torsion_angle(p[0], p[1], p[2], p[3]).unwrap();
            let b = torsion_angle(m[0], m[1], m[2], m[3]).unwrap();
            assert!(close_angle(a, -b, 1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn tau_examples() {
        let f = build_local_frame(
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::ZERO,
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        let moved = f.translated_to(Vec3::new(0.0, 0.0, 3.8));
        assert_eq!(edge_rotation_angle(&f, &moved).unwrap(), 0.0);

        // Rotate frame i by +pi/2 about the edge direction (here e3).
        let u = moved.origin - f.origin;
        let t = SE3Transform::from_axis_angle(u, PI / 2.0, Vec3::ZERO).unwrap();
        let rotated = LocalFrame {
            origin: moved.origin,
            axes: f.axes.map(|a| t.rotate(a)),
        };
        let tau = edge_rotation_angle(&f, &rotated).unwrap();
        assert!(close(tau, PI / 2.0, 1e-12), "{tau}");
        assert!(edge_rotation_angle(&f, &f).is_err());

        // e1 parallel to the edge direction: projection vanishes, tau = 0.
        let along = f.translated_to(Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(edge_rotation_angle(&f, &along).unwrap(), 0.0);
    }

    #[test]
    fn euler_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_frame(&mut rng);
        assert_eq!(euler_angles(&f, &f), (0.0, 0.0, 0.0));

        let alpha = 0.7;
        let t = SE3Transform::from_axis_angle(f.axes[2], alpha, Vec3::ZERO).unwrap();
        let g = LocalFrame {
            origin: f.origin,
            axes: f.axes.map(|a| t.rotate(a)),
        };
        let (a, b, c) = euler_angles(&f, &g);
        assert!(
            close(a, alpha, 1e-12) && b.abs() < 1e-6 && c == 0.0,
            "{a} {b} {c}"
        );
    }

    #[test]
    fn euler_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (fi, fj) = (random_frame(&mut rng), random_frame(&mut rng));
            let (a, b, c) = euler_angles(&fi, &fj);
            assert!((0.0..=PI).contains(&b));
            let recomposed = mat_mul(&mat_mul(&rot_z(a), &rot_y(b)), &rot_z(c));
            let rel = mat_mul(&mat_transpose(&fi.rotation()), &fj.rotation());
            for i in 0..3 {
                for j in 0..3 {
                    assert!(close(recomposed[i][j], rel[i][j], TOL));
                }
            }
        }
    }

    #[test]
    fn euler_gimbal_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_frame(&mut rng);
        let t = SE3Transform::from_axis_angle(f.axes[1], PI, Vec3::ZERO).unwrap();
        let t2 = SE3Transform::from_axis_angle(f.axes[2], 0.4, Vec3::ZERO)
            .unwrap()
            .compose(&t);
        let g = LocalFrame {
            origin: f.origin,
            axes: f.axes.map(|a| t2.rotate(a)),
        };
        let (a, b, c) = euler_angles(&f, &g);
        assert_eq!((b, c), (PI, 0.0));
        let recomposed = mat_mul(&rot_z(a), &rot_y(b));
        let rel = mat_mul(&mat_transpose(&f.rotation()), &g.rotation());
        for i in 0..3 {
            for j in 0..3 {
                assert!(close(recomposed[i][j], rel[i][j], 1e-6));
            }
        }
    }

    #[test]
    fn apply_se3_examples() {
        let pts = vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-4.0, 0.5, 2.0)];
        assert_eq!(apply_se3(&SE3Transform::identity(), &pts), pts);
        let t = SE3Transform::translation(Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(apply_se3(&t, &[Vec3::ZERO]), vec![Vec3::new(1.0, 2.0, 3.0)]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (t1, t2) = (
            SE3Transform::random(&mut rng, 5.0),
            SE3Transform::random(&mut rng, 5.0),
        );
        assert!(t1.is_proper(1e-10));
        let composed = t2.compose(&t1);
        for p in &pts {
            assert!(vclose(t2.apply(t1.apply(*p)), composed.apply(*p), 1e-12));
        }
    }

    fn residue(aa: usize, atoms: &[(&str, Vec3)]) -> Residue {
        Residue {
            aa_type: aa,
            seq_index: 0,
            atoms: atoms
                .iter()
                .map(|(n, p)| (n.to_string(), *p))
                .collect::<BTreeMap<_, _>>(),
        }
    }

    #[test]
    fn side_chain_masks() {
        use crate::protein::residue::aa_index;
        let backbone = [
            ("N", Vec3::new(0.0, 1.0, 0.0)),
            ("CA", Vec3::ZERO),
            ("C", Vec3::new(1.0, 0.0, 0.0)),
            ("CB", Vec3::new(-0.5, -0.5, 1.0)),
        ];
        let gly = side_chain_torsions(&residue(aa_index('G'), &backbone[..3]));
        assert_eq!(gly.defined, [false; 4]);
        let ala = side_chain_torsions(&residue(aa_index('A'), &backbone));
        assert_eq!(ala.defined, [false; 4]);
        assert_eq!(ala.features(), [0.0; 12]);

        // Serine with N-CA-CB-OG placed as a planar cis quadruple.
        let ser = residue(
            aa_index('S'),
            &[
                ("N", Vec3::new(0.0, 1.0, 0.0)),
                ("CA", Vec3::ZERO),
                ("CB", Vec3::new(1.0, 0.0, 0.0)),
                ("OG", Vec3::new(1.0, 1.0, 0.0)),
            ],
        );
        let t = side_chain_torsions(&ser);
        assert_eq!(t.defined, [true, false, false, false]);
        assert_eq!(t.chi[0], 0.0);
        let feats = t.features();
        assert_eq!(&feats[..2], &[0.0, 1.0]);
        assert_eq!(&feats[8..], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(PI), PI);
        assert!(close(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, 1e-15));
    }

    proptest! {
        #[test]
        fn random_frames_are_orthonormal(n in vec3(), ca in vec3(), c in vec3()) {
            if let Ok(f) = build_local_frame(n, ca, c) {
                prop_assert!(frame_is_valid(&f));
            }
        }

        #[test]
        fn invariants_under_rigid_motion(seed in any::<u64>(), p in vec3(), q in proptest::array::uniform4(vec3())) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fi = random_frame(&mut rng);
            let fj = random_frame(&mut rng);
            let t = SE3Transform::random(&mut rng, 50.0);
            let (ti, tj) = (transform_frame(&t, &fi), transform_frame(&t, &fj));

            let (d0, th0, ph0) = spherical_coords(&fi, p);
            let (d1, th1, ph1) = spherical_coords(&ti, t.apply(p));
            prop_assert!(close(d0, d1, TOL) && close(th0, th1, TOL) && close_angle(ph0, ph1, TOL));
            prop_assert!((0.0..=PI).contains(&th0));
            prop_assert!(ph0 > -PI && ph0 <= PI);

            let tau0 = edge_rotation_angle(&fi, &fj).unwrap();
            let tau1 = edge_rotation_angle(&ti, &tj).unwrap();
            prop_assert!(close_angle(tau0, tau1, TOL));

            let e0 = euler_angles(&fi, &fj);
            let e1 = euler_angles(&ti, &tj);
            prop_assert!(close_angle(e0.0, e1.0, TOL) && close(e0.1, e1.1, TOL) && close_angle(e0.2, e1.2, TOL));

            if let Ok(a) = torsion_angle(q[0], q[1], q[2], q[3]) {
                let b = torsion_angle(t.apply(q[0]), t.apply(q[1]), t.apply(q[2]), t.apply(q[3])).unwrap();
                prop_assert!(close_angle(a, b, TOL));
                prop_assert!(a > -PI && a <= PI);
            }
        }
    }
}
