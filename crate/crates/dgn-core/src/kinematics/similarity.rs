//! Similarity transforms, axis-angle rotations, and the closed-form
//! least-squares similarity fit with its analytic gradient.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::rotation_defect;

/// Similarity transform `x -> s R x + t` with isotropic positive scale.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn rigid(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.scale * (self.rotation * p.coords) + self.translation)
    }

    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * v)
    }

    /// Rotate a direction without scaling (for normals under rigid motion).
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn compose(&self, other: &SimilarityTransform) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let rt = self.rotation.transpose();
        SimilarityTransform {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::BadConfig(format!(
                "similarity scale {} not positive",
                self.scale
            )));
        }
        if rotation_defect(&self.rotation) > 1e-9 {
            return Err(Error::BadConfig("similarity rotation not orthonormal".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::BadConfig("similarity translation not finite".into()));
        }
        Ok(())
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        (self.scale - 1.0).abs() <= tol && rotation_defect(&self.rotation) <= tol
    }

    pub fn max_component_diff(&self, other: &SimilarityTransform) -> f64 {
        let mut m = (self.scale - other.scale).abs();
        m = m.max((self.rotation - other.rotation).amax());
        m = m.max((self.translation - other.translation).amax());
        m
    }
}

/// JSON record for a similarity transform: `{"s": .., "R": [9 row-major], "t": [3]}`.
#[derive(Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub s: f64,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&SimilarityTransform> for SimilarityRecord {
    fn from(t: &SimilarityTransform) -> Self {
        let r = &t.rotation;
        SimilarityRecord {
            s: t.scale,
            r: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            t: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl From<&SimilarityRecord> for SimilarityTransform {
    fn from(r: &SimilarityRecord) -> Self {
        SimilarityTransform {
            scale: r.s,
            rotation: Matrix3::from_row_slice(&r.r),
            translation: Vector3::new(r.t[0], r.t[1], r.t[2]),
        }
    }
}

/// Cotangent on a similarity transform; `rot` is the ambient (Frobenius)
/// gradient with respect to the 3x3 rotation entries.
#[derive(Debug, Clone)]
pub struct TransformGrad {
    pub scale: f64,
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
}

impl TransformGrad {
    pub fn zero() -> Self {
        TransformGrad {
            scale: 0.0,
            rot: Matrix3::zeros(),
            trans: Vector3::zeros(),
        }
    }

    pub fn add_assign(&mut self, other: &TransformGrad) {
        self.scale += other.scale;
        self.rot += other.rot;
        self.trans += other.trans;
    }

    pub fn is_zero(&self) -> bool {
        self.scale == 0.0 && self.rot == Matrix3::zeros() && self.trans == Vector3::zeros()
    }
}

/// VJP of `c = a.compose(b)`: cotangent on `c` to cotangents on `a` and `b`.
pub fn compose_vjp(
    a: &SimilarityTransform,
    b: &SimilarityTransform,
    grad_c: &TransformGrad,
) -> (TransformGrad, TransformGrad) {
    let ga = TransformGrad {
        scale: grad_c.scale * b.scale + grad_c.trans.dot(&(a.rotation * b.translation)),
        rot: grad_c.rot * b.rotation.transpose()
            + a.scale * grad_c.trans * b.translation.transpose(),
        trans: grad_c.trans,
    };
    let gb = TransformGrad {
        scale: grad_c.scale * a.scale,
        rot: a.rotation.transpose() * grad_c.rot,
        trans: a.scale * (a.rotation.transpose() * grad_c.trans),
    };
    (ga, gb)
}

/// VJP of `i = a.inverse()`.
pub fn inverse_vjp(a: &SimilarityTransform, grad_i: &TransformGrad) -> TransformGrad {
    let s2 = a.scale * a.scale;
    TransformGrad {
        scale: -grad_i.scale / s2 + grad_i.trans.dot(&(a.rotation.transpose() * a.translation)) / s2,
        rot: grad_i.rot.transpose() - (a.translation * grad_i.trans.transpose()) / a.scale,
        trans: -(a.rotation * grad_i.trans) / a.scale,
    }
}

/// VJP of `y = t.apply(x)` with respect to the transform and the point.
pub fn apply_vjp(
    t: &SimilarityTransform,
    x: &Point3<f64>,
    grad_y: &Vector3<f64>,
) -> (TransformGrad, Vector3<f64>) {
    let gt = TransformGrad {
        scale: grad_y.dot(&(t.rotation * x.coords)),
        rot: t.scale * grad_y * x.coords.transpose(),
        trans: *grad_y,
    };
    let gx = t.scale * (t.rotation.transpose() * grad_y);
    (gt, gx)
}

// ---------------------------------------------------------------------------
// Axis-angle rotations
// ---------------------------------------------------------------------------

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential map.
pub fn rotation_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    if theta2 < 1e-12 {
        // Second-order Taylor around zero.
        Matrix3::identity() + k * (1.0 - theta2 / 6.0) + k * k * (0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        Matrix3::identity() + k * (theta.sin() / theta) + k * k * ((1.0 - theta.cos()) / theta2)
    }
}

/// Principal-branch logarithm of a rotation matrix.
pub fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let antisym = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if theta < 1e-10 {
        antisym / 2.0
    } else if theta < std::f64::consts::PI - 1e-4 {
        antisym * (theta / (2.0 * theta.sin()))
    } else {
        // Near pi the antisymmetric part vanishes; recover the axis from
        // the symmetric part R ~ 2 a a^T - I.
        let m = (r + Matrix3::identity()) / 2.0;
        let col = (0..3)
            .max_by(|&i, &j| {
                m.column(i)
                    .norm()
                    .partial_cmp(&m.column(j).norm())
                    .unwrap()
            })
            .unwrap();
        let mut axis = m.column(col).normalize();
        // Fix the sign from the antisymmetric residual when available.
        if antisym.norm() > 1e-12 {
            if axis.dot(&antisym) < 0.0 {
                axis = -axis;
            }
        } else if axis.sum() < 0.0 {
            axis = -axis;
        }
        axis * theta
    }
}

/// VJP of the exponential map: ambient cotangent on R to cotangent on omega.
pub fn rotation_exp_vjp(omega: &Vector3<f64>, grad_r: &Matrix3<f64>) -> Vector3<f64> {
    let r = rotation_exp(omega);
    let theta2 = omega.norm_squared();
    let mut grad = Vector3::zeros();
    if theta2 < 1e-16 {
        for i in 0..3 {
            let mut e = Vector3::zeros();
            e[i] = 1.0;
            grad[i] = (grad_r.transpose() * (skew(&e) * r)).trace();
        }
        return grad;
    }
    // Gallego & Yezzi: dR/dw_i = (w_i [w]x + [w x (I - R) e_i]x) / |w|^2 * R
    let k = skew(omega);
    let eye_minus_r = Matrix3::identity() - r;
    for i in 0..3 {
        let mut e = Vector3::zeros();
        e[i] = 1.0;
        let v = omega.cross(&(eye_minus_r * e));
        let d = (k * omega[i] + skew(&v)) * r / theta2;
        grad[i] = (grad_r.transpose() * d).trace();
    }
    grad
}

// ---------------------------------------------------------------------------
// Closed-form similarity fit (Umeyama)
// ---------------------------------------------------------------------------

/// Point pairs for one hand part: `src[i]` is the observed position of the
/// template point `tgt[i]`.
#[derive(Debug, Clone)]
pub struct PartCorrespondence {
    pub part: usize,
    pub src: Vec<Point3<f64>>,
    pub tgt: Vec<Point3<f64>>,
}

struct FitContext {
    tgt_centroid: Vector3<f64>,
    u: Matrix3<f64>,
    v: Matrix3<f64>,
    sigma: Vector3<f64>,
    signs: Vector3<f64>,
    tgt_var: f64,
    transform: SimilarityTransform,
}

/// 3x3 SVD with singular values sorted descending.
fn svd3_sorted(a: &Matrix3<f64>) -> (Matrix3<f64>, Vector3<f64>, Matrix3<f64>) {
    let svd = a.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| svd.singular_values[j].partial_cmp(&svd.singular_values[i]).unwrap());
    let mut us = Matrix3::zeros();
    let mut vs = Matrix3::zeros();
    let mut sigma = Vector3::zeros();
    for (k, &i) in idx.iter().enumerate() {
        us.set_column(k, &u.column(i));
        vs.set_column(k, &vt.transpose().column(i));
        sigma[k] = svd.singular_values[i];
    }
    (us, sigma, vs)
}

fn fit_context(src: &[Point3<f64>], tgt: &[Point3<f64>], part: Option<usize>) -> Result<FitContext> {
    let n = src.len();
    if n != tgt.len() {
        return Err(Error::LengthMismatch {
            what: "correspondence pairs",
            got: n,
            expected: tgt.len(),
        });
    }
    if n < 3 {
        return Err(Error::TooFewPairs(n));
    }
    let nf = n as f64;
    let src_centroid = src.iter().map(|p| p.coords).sum::<Vector3<f64>>() / nf;
    let tgt_centroid = tgt.iter().map(|p| p.coords).sum::<Vector3<f64>>() / nf;

    // Cross covariance sum_i (p_i - p_mean)(q_i - q_mean)^T and target spread.
    let mut a = Matrix3::zeros();
    let mut tgt_var = 0.0;
    for (p, q) in src.iter().zip(tgt) {
        let pc = p.coords - src_centroid;
        let qc = q.coords - tgt_centroid;
        a += pc * qc.transpose();
        tgt_var += qc.norm_squared();
    }

    let (u, sigma, v) = svd3_sorted(&a);
    if !(sigma[0] > 0.0) || sigma[1] < 1e-9 * sigma[0] || tgt_var <= 0.0 {
        return Err(Error::DegenerateFit { part });
    }
    let flip = if (u.determinant() * v.determinant()) < 0.0 {
        -1.0
    } else {
        1.0
    };
    let signs = Vector3::new(1.0, 1.0, flip);
    let rotation = u * Matrix3::from_diagonal(&signs) * v.transpose();
    let scale = (sigma[0] * signs[0] + sigma[1] * signs[1] + sigma[2] * signs[2]) / tgt_var;
    let translation = src_centroid - scale * (rotation * tgt_centroid);
    Ok(FitContext {
        tgt_centroid,
        u,
        v,
        sigma,
        signs,
        tgt_var,
        transform: SimilarityTransform {
            scale,
            rotation,
            translation,
        },
    })
}

/// Least-squares similarity aligning template points onto observed points:
/// `argmin_T sum_i |src_i - T(tgt_i)|^2` via centroid subtraction, SVD of the
/// cross covariance, determinant sign fix, and the trace-ratio scale.
pub fn fit_similarity(pairs: &PartCorrespondence) -> Result<SimilarityTransform> {
    fit_context(&pairs.src, &pairs.tgt, Some(pairs.part)).map(|c| c.transform)
}

pub fn fit_similarity_points(
    src: &[Point3<f64>],
    tgt: &[Point3<f64>],
) -> Result<SimilarityTransform> {
    fit_context(src, tgt, None).map(|c| c.transform)
}

/// Gradient of a scalar function of the fitted `(s, R, t)` with respect to
/// the source points. Correspondences and target points are constants.
///
/// Fails when singular values of the cross covariance are too close: the
/// sign-corrected rotation is not differentiable there.
pub fn fit_similarity_vjp(
    pairs: &PartCorrespondence,
    grad: &TransformGrad,
) -> Result<Vec<Vector3<f64>>> {
    let ctx = fit_context(&pairs.src, &pairs.tgt, Some(pairs.part))?;
    let n = pairs.src.len() as f64;
    let sigma = &ctx.sigma;
    let gap_floor = 1e-6 * sigma[0];
    if sigma[0] - sigma[1] <= gap_floor || sigma[1] - sigma[2] <= gap_floor {
        return Err(Error::DegenerateGradient);
    }

    let t = &ctx.transform;
    // t = p_mean - s R q_mean folds translation cotangent into s and R.
    let rq = t.rotation * ctx.tgt_centroid;
    let s_eff = grad.scale - grad.trans.dot(&rq);
    let r_eff = grad.rot - t.scale * grad.trans * ctx.tgt_centroid.transpose();

    // Everything now flows through the SVD of the cross covariance A.
    // With P = U^T dA V, the scalar differential is <G_P, P>.
    let k = ctx.u.transpose() * r_eff * ctx.v;
    let mut g_p = Matrix3::zeros();
    for i in 0..3 {
        g_p[(i, i)] = s_eff * ctx.signs[i] / ctx.tgt_var;
    }
    for i in 0..3 {
        for j in (i + 1)..3 {
            let (si, sj) = (ctx.signs[i], ctx.signs[j]);
            if si == sj {
                let g = si * (k[(i, j)] - k[(j, i)]) / (sigma[i] + sigma[j]);
                g_p[(i, j)] += g;
                g_p[(j, i)] -= g;
            } else {
                let g = (k[(i, j)] + k[(j, i)]) / (sigma[i] - sigma[j]);
                g_p[(i, j)] += g;
                g_p[(j, i)] += g;
            }
        }
    }
    let g_a = ctx.u * g_p * ctx.v.transpose();

    let grads = pairs
        .src
        .iter()
        .zip(&pairs.tgt)
        .map(|(_, q)| {
            let qc = q.coords - ctx.tgt_centroid;
            g_a * qc + grad.trans / n
        })
        .collect();
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
        .normalize();
        rotation_exp(&(axis * rng.random_range(0.0..3.0)))
    }

    fn random_transform(rng: &mut ChaCha8Rng) -> SimilarityTransform {
        SimilarityTransform {
            scale: rng.random_range(0.5..2.0),
            rotation: random_rotation(rng),
            translation: Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            ),
        }
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3<f64>> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                )
            })
            .collect()
    }

    #[test]
    fn exp_log_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let omega = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize()
                * rng.random_range(0.0..3.1);
            let r = rotation_exp(&omega);
            assert!(rotation_defect(&r) < 1e-12);
            let back = rotation_log(&r);
            assert!((back - omega).norm() < 1e-9, "omega {omega:?} back {back:?}");
        }
        assert_eq!(rotation_exp(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn exp_vjp_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let omega = Vector3::new(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
            );
            let mut upstream = Matrix3::zeros();
            for i in 0..3 {
                for j in 0..3 {
                    upstream[(i, j)] = rng.random_range(-1.0..1.0);
                }
            }
            let analytic = rotation_exp_vjp(&omega, &upstream);
            let f = |x: &[f64]| {
                let r = rotation_exp(&Vector3::new(x[0], x[1], x[2]));
                (upstream.transpose() * r).trace()
            };
            let fd = central_diff(&f, &[omega.x, omega.y, omega.z], 1e-6);
            assert!(max_rel_err(&[analytic.x, analytic.y, analytic.z], &fd) < 1e-6);
        }
    }

    #[test]
    fn compose_inverse_apply_vjps_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Pack a transform as 7 numbers via axis-angle.
        let pack = |t: &SimilarityTransform| {
            let w = rotation_log(&t.rotation);
            vec![
                t.scale,
                w.x,
                w.y,
                w.z,
                t.translation.x,
                t.translation.y,
                t.translation.z,
            ]
        };
        let unpack = |x: &[f64]| SimilarityTransform {
            scale: x[0],
            rotation: rotation_exp(&Vector3::new(x[1], x[2], x[3])),
            translation: Vector3::new(x[4], x[5], x[6]),
        };
        for _ in 0..10 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let up = TransformGrad {
                scale: rng.random_range(-1.0..1.0),
                rot: Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                trans: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            };
            let dot = |t: &SimilarityTransform| {
                up.scale * t.scale
                    + (up.rot.transpose() * t.rotation).trace()
                    + up.trans.dot(&t.translation)
            };

            // compose: gradient with respect to a (through the exp chart).
            let (ga, gb) = compose_vjp(&a, &b, &up);
            let fa = |x: &[f64]| dot(&unpack(x).compose(&b));
            let fd_a = central_diff(&fa, &pack(&a), 1e-7);
            let wa = rotation_log(&a.rotation);
            let chain_a = {
                let rg = rotation_exp_vjp(&wa, &ga.rot);
                vec![ga.scale, rg.x, rg.y, rg.z, ga.trans.x, ga.trans.y, ga.trans.z]
            };
            assert!(max_rel_err(&chain_a, &fd_a) < 1e-5);

            let fb = |x: &[f64]| dot(&a.compose(&unpack(x)));
            let fd_b = central_diff(&fb, &pack(&b), 1e-7);
            let wb = rotation_log(&b.rotation);
            let chain_b = {
                let rg = rotation_exp_vjp(&wb, &gb.rot);
                vec![gb.scale, rg.x, rg.y, rg.z, gb.trans.x, gb.trans.y, gb.trans.z]
            };
            assert!(max_rel_err(&chain_b, &fd_b) < 1e-5);

            // inverse
            let gi = inverse_vjp(&a, &up);
            let fi = |x: &[f64]| dot(&unpack(x).inverse());
            let fd_i = central_diff(&fi, &pack(&a), 1e-7);
            let chain_i = {
                let rg = rotation_exp_vjp(&wa, &gi.rot);
                vec![gi.scale, rg.x, rg.y, rg.z, gi.trans.x, gi.trans.y, gi.trans.z]
            };
            assert!(max_rel_err(&chain_i, &fd_i) < 1e-5);

            // apply
            let x0 = Point3::new(1.0, -2.0, 0.5);
            let uy = Vector3::new(0.3, -0.7, 1.1);
            let (gt, gx) = apply_vjp(&a, &x0, &uy);
            let fapp = |x: &[f64]| uy.dot(&unpack(x).apply(&x0).coords);
            let fd_t = central_diff(&fapp, &pack(&a), 1e-7);
            let chain_t = {
                let rg = rotation_exp_vjp(&wa, &gt.rot);
                vec![gt.scale, rg.x, rg.y, rg.z, gt.trans.x, gt.trans.y, gt.trans.z]
            };
            assert!(max_rel_err(&chain_t, &fd_t) < 1e-5);
            let fx = |x: &[f64]| uy.dot(&a.apply(&Point3::new(x[0], x[1], x[2])).coords);
            let fd_x = central_diff(&fx, &[x0.x, x0.y, x0.z], 1e-7);
            assert!(max_rel_err(&[gx.x, gx.y, gx.z], &fd_x) < 1e-7);
        }
    }

    #[test]
    fn fit_identity_on_equal_point_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tgt = random_points(&mut rng, 12);
        let pairs = PartCorrespondence {
            part: 0,
            src: tgt.clone(),
            tgt,
        };
        let t = fit_similarity(&pairs).unwrap();
        assert!(t.max_component_diff(&SimilarityTransform::identity()) < 1e-12);
    }

    #[test]
    fn fit_recovers_random_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let truth = random_transform(&mut rng);
            let n = rng.random_range(4..40);
            let tgt = random_points(&mut rng, n);
            let src: Vec<Point3<f64>> = tgt.iter().map(|q| truth.apply(q)).collect();
            let fitted = fit_similarity_points(&src, &tgt).unwrap();
            assert!(
                fitted.max_component_diff(&truth) < 1e-9,
                "diff {}",
                fitted.max_component_diff(&truth)
            );
        }
    }

    #[test]
    fn fit_rejects_degenerate_targets() {
        let tgt: Vec<Point3<f64>> = (0..5).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let pairs = PartCorrespondence {
            part: 3,
            src: tgt.clone(),
            tgt,
        };
        assert!(matches!(
            fit_similarity(&pairs),
            Err(Error::DegenerateFit { part: Some(3) })
        ));
        let few = PartCorrespondence {
            part: 0,
            src: vec![Point3::origin(); 2],
            tgt: vec![Point3::origin(); 2],
        };
        assert!(matches!(fit_similarity(&few), Err(Error::TooFewPairs(2))));
    }

    #[test]
    fn fit_noisy_beats_random_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = random_transform(&mut rng);
        let tgt = random_points(&mut rng, 30);
        let src: Vec<Point3<f64>> = tgt
            .iter()
            .map(|q| {
                let p = truth.apply(q);
                Point3::new(
                    p.x + rng.random_range(-1.0..1.0),
                    p.y + rng.random_range(-1.0..1.0),
                    p.z + rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        let fitted = fit_similarity_points(&src, &tgt).unwrap();
        let residual = |t: &SimilarityTransform| {
            src.iter()
                .zip(&tgt)
                .map(|(p, q)| (p - t.apply(q)).norm_squared())
                .sum::<f64>()
        };
        let best = residual(&fitted);
        for _ in 0..1000 {
            let eps = 1e-3;
            let jitter = SimilarityTransform {
                scale: fitted.scale * (1.0 + rng.random_range(-eps..eps)),
                rotation: rotation_exp(&Vector3::new(
                    rng.random_range(-eps..eps),
                    rng.random_range(-eps..eps),
                    rng.random_range(-eps..eps),
                )) * fitted.rotation,
                translation: fitted.translation
                    + Vector3::new(
                        rng.random_range(-eps..eps),
                        rng.random_range(-eps..eps),
                        rng.random_range(-eps..eps),
                    ),
            };
            assert!(residual(&jitter) >= best - 1e-12);
        }
    }

    #[test]
    fn fit_equivariance_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tgt = random_points(&mut rng, 15);
        let truth = random_transform(&mut rng);
        let src: Vec<Point3<f64>> = tgt.iter().map(|q| truth.apply(q)).collect();
        let g = SimilarityTransform::rigid(
            random_rotation(&mut rng),
            Vector3::new(3.0, -4.0, 5.0),
        );
        let moved: Vec<Point3<f64>> = src.iter().map(|p| g.apply(p)).collect();
        let t1 = fit_similarity_points(&src, &tgt).unwrap();
        let t2 = fit_similarity_points(&moved, &tgt).unwrap();
        assert!(t2.max_component_diff(&g.compose(&t1)) < 1e-9);
    }

    #[test]
    fn planar_targets_keep_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let tgt: Vec<Point3<f64>> = (0..10)
                .map(|_| Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), 0.0))
                .collect();
            let truth = random_transform(&mut rng);
            let src: Vec<Point3<f64>> = tgt.iter().map(|q| truth.apply(q)).collect();
            let fitted = fit_similarity_points(&src, &tgt).unwrap();
            assert!(fitted.rotation.determinant() > 0.0);
            // The planar fit still reproduces the pair geometry exactly.
            for (p, q) in src.iter().zip(&tgt) {
                assert!((p - fitted.apply(q)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn fit_vjp_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tgt = random_points(&mut rng, 10);
        let truth = random_transform(&mut rng);
        let pairs = PartCorrespondence {
            part: 0,
            src: tgt.iter().map(|q| truth.apply(q)).collect(),
            tgt,
        };
        let grads = fit_similarity_vjp(&pairs, &TransformGrad::zero()).unwrap();
        assert!(grads.iter().all(|g| g.norm() == 0.0));
    }

    #[test]
    fn fit_vjp_translation_hand_check() {
        // Centered targets, src = tgt + delta: the fit is a pure translation
        // and d(t^T t)/d src_i = 2 t / n.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tgt = random_points(&mut rng, 8);
        let centroid = tgt.iter().map(|p| p.coords).sum::<Vector3<f64>>() / 8.0;
        for q in tgt.iter_mut() {
            q.coords -= centroid;
        }
        let delta = Vector3::new(1.5, -0.25, 0.75);
        let src: Vec<Point3<f64>> = tgt.iter().map(|q| q + delta).collect();
        let pairs = PartCorrespondence {
            part: 0,
            src,
            tgt,
        };
        let fitted = fit_similarity(&pairs).unwrap();
        assert!((fitted.translation - delta).norm() < 1e-12);
        let up = TransformGrad {
            scale: 0.0,
            rot: Matrix3::zeros(),
            trans: 2.0 * fitted.translation,
        };
        let grads = fit_similarity_vjp(&pairs, &up).unwrap();
        for g in grads {
            assert!((g - 2.0 * delta / 8.0).norm() < 1e-12);
        }
    }

    #[test]
    fn fit_vjp_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let tgt = random_points(&mut rng, 9);
            let truth = random_transform(&mut rng);
            let src: Vec<Point3<f64>> = tgt
                .iter()
                .map(|q| {
                    let p = truth.apply(q);
                    Point3::new(
                        p.x + rng.random_range(-0.5..0.5),
                        p.y + rng.random_range(-0.5..0.5),
                        p.z + rng.random_range(-0.5..0.5),
                    )
                })
                .collect();
            let up = TransformGrad {
                scale: rng.random_range(-1.0..1.0),
                rot: Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                trans: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            };
            let pairs = PartCorrespondence {
                part: 0,
                src: src.clone(),
                tgt: tgt.clone(),
            };
            let analytic = fit_similarity_vjp(&pairs, &up).unwrap();
            let flat: Vec<f64> = analytic.iter().flat_map(|g| [g.x, g.y, g.z]).collect();
            let x0: Vec<f64> = src.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
            let f = |x: &[f64]| {
                let moved: Vec<Point3<f64>> = x
                    .chunks(3)
                    .map(|c| Point3::new(c[0], c[1], c[2]))
                    .collect();
                let t = fit_similarity_points(&moved, &tgt).unwrap();
                up.scale * t.scale
                    + (up.rot.transpose() * t.rotation).trace()
                    + up.trans.dot(&t.translation)
            };
            let fd = central_diff(&f, &x0, 1e-6);
            let err = max_rel_err(&flat, &fd);
            assert!(err < 1e-3, "fit vjp rel err {err}");
        }
    }

    #[test]
    fn similarity_record_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = random_transform(&mut rng);
        let rec = SimilarityRecord::from(&t);
        let json = serde_json::to_string(&rec).unwrap();
        let back: SimilarityRecord = serde_json::from_str(&json).unwrap();
        let t2 = SimilarityTransform::from(&back);
        assert!(t.max_component_diff(&t2) < 1e-12);
    }
}
