//! Kinematics: pose parameters, linear blend skinning, forward-kinematics
//! composition/decomposition, and closed-form mesh refinement.
//!
//! Per-part transforms act in the model/camera frame. A non-root joint's
//! motion is a rotation in its rest-pose bone frame `B`; composing it into
//! the model frame conjugates by `B`, so `T = T_parent * B * L * B^-1` with
//! the frame stored as the local-to-model map.

mod similarity;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub use similarity::{
    apply_vjp, compose_vjp, fit_similarity, fit_similarity_points, fit_similarity_vjp,
    inverse_vjp, rotation_exp, rotation_exp_vjp, rotation_log, skew, PartCorrespondence,
    SimilarityRecord, SimilarityTransform, TransformGrad,
};

use crate::error::{Error, Result};
use crate::mesh::{Joint, RiggedMesh};

/// Kinematic parameter vector: global 7-DOF similarity (scale, axis-angle,
/// translation) plus a local axis-angle rotation per non-root joint.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    pub scale: f64,
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
    /// One axis-angle per non-root joint, in joint order skipping the root.
    pub locals: Vec<Vector3<f64>>,
}

impl PoseParams {
    pub fn rest(joint_count: usize) -> Self {
        PoseParams {
            scale: 1.0,
            rot: Vector3::zeros(),
            trans: Vector3::zeros(),
            locals: vec![Vector3::zeros(); joint_count.saturating_sub(1)],
        }
    }

    pub fn global_transform(&self) -> SimilarityTransform {
        SimilarityTransform {
            scale: self.scale,
            rotation: rotation_exp(&self.rot),
            translation: self.trans,
        }
    }

    pub fn dof(&self) -> usize {
        7 + 3 * self.locals.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dof());
        v.push(self.scale);
        v.extend_from_slice(self.rot.as_slice());
        v.extend_from_slice(self.trans.as_slice());
        for w in &self.locals {
            v.extend_from_slice(w.as_slice());
        }
        v
    }

    pub fn from_flat(x: &[f64], joint_count: usize) -> Result<Self> {
        let expected = 7 + 3 * joint_count.saturating_sub(1);
        if x.len() != expected {
            return Err(Error::LengthMismatch {
                what: "pose vector",
                got: x.len(),
                expected,
            });
        }
        let locals = x[7..]
            .chunks(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        Ok(PoseParams {
            scale: x[0],
            rot: Vector3::new(x[1], x[2], x[3]),
            trans: Vector3::new(x[4], x[5], x[6]),
            locals,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::BadConfig("pose scale must be positive".into()));
        }
        let finite = self.rot.iter().all(|v| v.is_finite())
            && self.trans.iter().all(|v| v.is_finite())
            && self
                .locals
                .iter()
                .all(|w| w.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::BadConfig("pose has non-finite entries".into()));
        }
        for w in &self.locals {
            if w.norm() >= std::f64::consts::PI {
                return Err(Error::BadConfig("local rotation outside principal branch".into()));
            }
        }
        Ok(())
    }

    /// Wrap local rotations back into the principal branch (same rotation
    /// matrices, smaller axis-angle vectors).
    pub fn wrap_locals(&mut self) {
        for w in self.locals.iter_mut() {
            let mut n = w.norm();
            while n >= std::f64::consts::PI {
                let next = (n - 2.0 * std::f64::consts::PI).abs();
                if next >= n {
                    break;
                }
                *w *= 1.0 - 2.0 * std::f64::consts::PI / n;
                n = w.norm();
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = PoseFile {
            scale: self.scale,
            rot: [self.rot.x, self.rot.y, self.rot.z],
            trans: [self.trans.x, self.trans.y, self.trans.z],
            locals: self.locals.iter().map(|w| [w.x, w.y, w.z]).collect(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: PoseFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(PoseParams {
            scale: file.scale,
            rot: Vector3::from(file.rot),
            trans: Vector3::from(file.trans),
            locals: file.locals.into_iter().map(Vector3::from).collect(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PoseFile {
    scale: f64,
    rot: [f64; 3],
    trans: [f64; 3],
    locals: Vec<[f64; 3]>,
}

/// Gradient of a scalar with respect to [`PoseParams`], same layout.
#[derive(Debug, Clone)]
pub struct PoseGrad {
    pub scale: f64,
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
    pub locals: Vec<Vector3<f64>>,
}

impl PoseGrad {
    pub fn zero(joint_count: usize) -> Self {
        PoseGrad {
            scale: 0.0,
            rot: Vector3::zeros(),
            trans: Vector3::zeros(),
            locals: vec![Vector3::zeros(); joint_count.saturating_sub(1)],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(7 + 3 * self.locals.len());
        v.push(self.scale);
        v.extend_from_slice(self.rot.as_slice());
        v.extend_from_slice(self.trans.as_slice());
        for w in &self.locals {
            v.extend_from_slice(w.as_slice());
        }
        v
    }
}

fn bone_frame_transform(joint: &Joint) -> SimilarityTransform {
    SimilarityTransform::rigid(joint.bone_frame.rotation, joint.bone_frame.translation)
}

fn check_transform_count(mesh: &RiggedMesh, got: usize) -> Result<()> {
    if got != mesh.part_count() {
        return Err(Error::TransformCount {
            expected: mesh.part_count(),
            got,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Linear blend skinning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LbsResult {
    pub vertices: Vec<Point3<f64>>,
    /// Joint positions: each joint moved by its own part transform.
    pub joints: Vec<Point3<f64>>,
}

pub fn lbs(mesh: &RiggedMesh, transforms: &[SimilarityTransform]) -> Result<LbsResult> {
    check_transform_count(mesh, transforms.len())?;
    let vertices = mesh
        .vertices
        .iter()
        .zip(&mesh.skin_weights)
        .map(|(v, weights)| {
            let mut acc = Vector3::zeros();
            for &(part, w) in weights {
                acc += w * transforms[part].apply(v).coords;
            }
            Point3::from(acc)
        })
        .collect();
    let joints = mesh
        .joints
        .iter()
        .enumerate()
        .map(|(j, joint)| transforms[j].apply(&joint.rest_position))
        .collect();
    Ok(LbsResult { vertices, joints })
}

/// Cotangents on posed vertices and joints back to per-part transforms.
pub fn lbs_vjp(
    mesh: &RiggedMesh,
    transforms: &[SimilarityTransform],
    grad_vertices: Option<&[Vector3<f64>]>,
    grad_joints: Option<&[Vector3<f64>]>,
) -> Result<Vec<TransformGrad>> {
    check_transform_count(mesh, transforms.len())?;
    let mut grads = vec![TransformGrad::zero(); transforms.len()];
    if let Some(gv) = grad_vertices {
        if gv.len() != mesh.vertices.len() {
            return Err(Error::LengthMismatch {
                what: "vertex cotangents",
                got: gv.len(),
                expected: mesh.vertices.len(),
            });
        }
        for ((v, weights), g) in mesh.vertices.iter().zip(&mesh.skin_weights).zip(gv) {
            if g.norm_squared() == 0.0 {
                continue;
            }
            for &(part, w) in weights {
                let (gt, _) = apply_vjp(&transforms[part], v, &(w * g));
                grads[part].add_assign(&gt);
            }
        }
    }
    if let Some(gj) = grad_joints {
        if gj.len() != mesh.joints.len() {
            return Err(Error::LengthMismatch {
                what: "joint cotangents",
                got: gj.len(),
                expected: mesh.joints.len(),
            });
        }
        for (j, (joint, g)) in mesh.joints.iter().zip(gj).enumerate() {
            if g.norm_squared() == 0.0 {
                continue;
            }
            let (gt, _) = apply_vjp(&grads_transform(transforms, j), &joint.rest_position, g);
            grads[j].add_assign(&gt);
        }
    }
    Ok(grads)
}

fn grads_transform(transforms: &[SimilarityTransform], j: usize) -> SimilarityTransform {
    transforms[j].clone()
}

// ---------------------------------------------------------------------------
// Forward kinematics
// ---------------------------------------------------------------------------

/// Compose per-joint local transforms (root entry = global transform, others
/// act in their bone frames) into model-frame part transforms.
pub fn compose_from_locals(
    mesh: &RiggedMesh,
    locals: &[SimilarityTransform],
) -> Result<Vec<SimilarityTransform>> {
    check_transform_count(mesh, locals.len())?;
    let order = mesh.joint_order();
    let mut out = vec![SimilarityTransform::identity(); locals.len()];
    for &j in &order {
        match mesh.joints[j].parent {
            None => out[j] = locals[j].clone(),
            Some(p) => {
                let bf = bone_frame_transform(&mesh.joints[j]);
                let conj = bf.compose(&locals[j]).compose(&bf.inverse());
                out[j] = out[p].compose(&conj);
            }
        }
    }
    Ok(out)
}

/// Reverse of [`compose_from_locals`]: cotangents on the part transforms to
/// cotangents on the local transforms.
pub fn compose_from_locals_vjp(
    mesh: &RiggedMesh,
    locals: &[SimilarityTransform],
    grad_transforms: &[TransformGrad],
) -> Result<Vec<TransformGrad>> {
    check_transform_count(mesh, locals.len())?;
    if grad_transforms.len() != locals.len() {
        return Err(Error::LengthMismatch {
            what: "transform cotangents",
            got: grad_transforms.len(),
            expected: locals.len(),
        });
    }
    let transforms = compose_from_locals(mesh, locals)?;
    let order = mesh.joint_order();
    let mut acc: Vec<TransformGrad> = grad_transforms.to_vec();
    let mut out = vec![TransformGrad::zero(); locals.len()];
    for &j in order.iter().rev() {
        let g = acc[j].clone();
        match mesh.joints[j].parent {
            None => out[j] = g,
            Some(p) => {
                if g.is_zero() {
                    continue;
                }
                let bf = bone_frame_transform(&mesh.joints[j]);
                let bf_inv = bf.inverse();
                let d = locals[j].compose(&bf_inv);
                let conj = bf.compose(&d);
                let (g_parent, g_conj) = compose_vjp(&transforms[p], &conj, &g);
                acc[p].add_assign(&g_parent);
                let (_, g_d) = compose_vjp(&bf, &d, &g_conj);
                let (g_local, _) = compose_vjp(&locals[j], &bf_inv, &g_d);
                out[j] = g_local;
            }
        }
    }
    Ok(out)
}

/// Forward kinematics: pose parameters to per-part model-frame transforms.
/// Non-root locals are pure rotations; scale and translation live in the
/// global transform only.
pub fn fk_compose(mesh: &RiggedMesh, pose: &PoseParams) -> Result<Vec<SimilarityTransform>> {
    if pose.locals.len() + 1 != mesh.part_count() {
        return Err(Error::TransformCount {
            expected: mesh.part_count(),
            got: pose.locals.len() + 1,
        });
    }
    let locals = pose_locals(mesh, pose);
    compose_from_locals(mesh, &locals)
}

fn pose_locals(mesh: &RiggedMesh, pose: &PoseParams) -> Vec<SimilarityTransform> {
    let mut locals = Vec::with_capacity(mesh.part_count());
    let mut li = 0usize;
    for joint in &mesh.joints {
        if joint.parent.is_none() {
            locals.push(pose.global_transform());
        } else {
            locals.push(SimilarityTransform::rigid(
                rotation_exp(&pose.locals[li]),
                Vector3::zeros(),
            ));
            li += 1;
        }
    }
    locals
}

/// Cotangents on part transforms back to pose parameters.
pub fn fk_compose_vjp(
    mesh: &RiggedMesh,
    pose: &PoseParams,
    grad_transforms: &[TransformGrad],
) -> Result<PoseGrad> {
    let locals = pose_locals(mesh, pose);
    let local_grads = compose_from_locals_vjp(mesh, &locals, grad_transforms)?;
    let mut out = PoseGrad::zero(mesh.part_count());
    let mut li = 0usize;
    for (joint, g) in mesh.joints.iter().zip(&local_grads) {
        if joint.parent.is_none() {
            out.scale = g.scale;
            out.rot = rotation_exp_vjp(&pose.rot, &g.rot);
            out.trans = g.trans;
        } else {
            out.locals[li] = rotation_exp_vjp(&pose.locals[li], &g.rot);
            li += 1;
        }
    }
    Ok(out)
}

/// Recover per-joint local transforms from model-frame part transforms:
/// `L = B^-1 * T_parent^-1 * T * B`, the exact algebraic inverse of
/// [`compose_from_locals`]. The root local is the global transform itself.
/// Inputs are similarities, so the scale/rotation split of `L` is exact.
pub fn fk_decompose(
    mesh: &RiggedMesh,
    transforms: &[SimilarityTransform],
) -> Result<Vec<SimilarityTransform>> {
    check_transform_count(mesh, transforms.len())?;
    for t in transforms {
        if !(t.scale > 0.0) || !t.scale.is_finite() {
            return Err(Error::BadConfig("singular parent transform".into()));
        }
    }
    let mut out = Vec::with_capacity(transforms.len());
    for (j, joint) in mesh.joints.iter().enumerate() {
        match joint.parent {
            None => out.push(transforms[j].clone()),
            Some(p) => {
                let bf = bone_frame_transform(joint);
                let local = bf
                    .inverse()
                    .compose(&transforms[p].inverse())
                    .compose(&transforms[j])
                    .compose(&bf);
                out.push(local);
            }
        }
    }
    Ok(out)
}

/// Cotangents on the recovered locals back to the part transforms.
pub fn fk_decompose_vjp(
    mesh: &RiggedMesh,
    transforms: &[SimilarityTransform],
    grad_locals: &[TransformGrad],
) -> Result<Vec<TransformGrad>> {
    check_transform_count(mesh, transforms.len())?;
    if grad_locals.len() != transforms.len() {
        return Err(Error::LengthMismatch {
            what: "local cotangents",
            got: grad_locals.len(),
            expected: transforms.len(),
        });
    }
    let mut out = vec![TransformGrad::zero(); transforms.len()];
    for (j, joint) in mesh.joints.iter().enumerate() {
        let g = &grad_locals[j];
        match joint.parent {
            None => out[j].add_assign(g),
            Some(p) => {
                if g.is_zero() {
                    continue;
                }
                let bf = bone_frame_transform(joint);
                let bf_inv = bf.inverse();
                let parent_inv = transforms[p].inverse();
                // local = bf_inv * (parent_inv * (t_j * bf))
                let a = transforms[j].compose(&bf);
                let b = parent_inv.compose(&a);
                let (_, g_b) = compose_vjp(&bf_inv, &b, g);
                let (g_pinv, g_a) = compose_vjp(&parent_inv, &a, &g_b);
                let (g_tj, _) = compose_vjp(&transforms[j], &bf, &g_a);
                out[j].add_assign(&g_tj);
                out[p].add_assign(&inverse_vjp(&transforms[p], &g_pinv));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Mesh refinement
// ---------------------------------------------------------------------------

/// Minimum top skinning weight for a vertex to enter a part's rigid fit.
/// Blended vertices move non-rigidly under LBS and would bias the fit.
pub const REFINE_DOMINANCE: f64 = 1.0 - 1e-6;

/// Per part: vertices whose top weight selects the part and is dominant.
pub fn refine_sets(mesh: &RiggedMesh) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); mesh.part_count()];
    for v in 0..mesh.vertex_count() {
        if mesh.max_weight(v) >= REFINE_DOMINANCE {
            sets[mesh.argmax_part(v)].push(v);
        }
    }
    sets
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub transforms: Vec<SimilarityTransform>,
    pub vertices: Vec<Point3<f64>>,
    pub joints: Vec<Point3<f64>>,
}

/// Closed-form refinement: fit a similarity per part from the estimated
/// vertices to the template, then repose the template by LBS. Joint
/// positions come from the fitted part transforms.
pub fn refine(mesh: &RiggedMesh, estimated: &[Point3<f64>]) -> Result<RefineResult> {
    if estimated.len() != mesh.vertex_count() {
        return Err(Error::LengthMismatch {
            what: "estimated vertices",
            got: estimated.len(),
            expected: mesh.vertex_count(),
        });
    }
    let sets = refine_sets(mesh);
    let mut transforms = Vec::with_capacity(sets.len());
    for (part, set) in sets.iter().enumerate() {
        if set.len() < 3 {
            return Err(Error::DegenerateFit { part: Some(part) });
        }
        let pairs = PartCorrespondence {
            part,
            src: set.iter().map(|&v| estimated[v]).collect(),
            tgt: set.iter().map(|&v| mesh.vertices[v]).collect(),
        };
        transforms.push(fit_similarity(&pairs)?);
    }
    let posed = lbs(mesh, &transforms)?;
    Ok(RefineResult {
        transforms,
        vertices: posed.vertices,
        joints: posed.joints,
    })
}

/// Cotangents on the refined part transforms back to the estimated vertices,
/// through each part's similarity fit.
pub fn refine_vjp(
    mesh: &RiggedMesh,
    estimated: &[Point3<f64>],
    grad_transforms: &[TransformGrad],
) -> Result<Vec<Vector3<f64>>> {
    let sets = refine_sets(mesh);
    let mut out = vec![Vector3::zeros(); estimated.len()];
    for (part, set) in sets.iter().enumerate() {
        if grad_transforms[part].is_zero() {
            continue;
        }
        let pairs = PartCorrespondence {
            part,
            src: set.iter().map(|&v| estimated[v]).collect(),
            tgt: set.iter().map(|&v| mesh.vertices[v]).collect(),
        };
        let grads = fit_similarity_vjp(&pairs, &grad_transforms[part])?;
        for (&v, g) in set.iter().zip(&grads) {
            out[v] += g;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::two_part_bar;
    use crate::gradcheck::{central_diff, max_rel_err};
    use nalgebra::{Matrix3, Matrix4};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_pose(mesh: &RiggedMesh, rng: &mut ChaCha8Rng, spread: f64) -> PoseParams {
        let mut pose = PoseParams::rest(mesh.part_count());
        pose.scale = rng.random_range(0.7..1.4);
        pose.rot = Vector3::from_fn(|_, _| rng.random_range(-spread..spread));
        pose.trans = Vector3::from_fn(|_, _| rng.random_range(-30.0..30.0));
        for w in pose.locals.iter_mut() {
            *w = Vector3::from_fn(|_, _| rng.random_range(-spread..spread));
        }
        pose
    }

    #[test]
    fn lbs_identity_reproduces_rest() {
        let mesh = two_part_bar();
        let transforms = vec![SimilarityTransform::identity(); mesh.part_count()];
        let posed = lbs(&mesh, &transforms).unwrap();
        assert_eq!(posed.vertices, mesh.vertices);
    }

    #[test]
    fn lbs_shared_transform_is_exact() {
        let mesh = two_part_bar();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let t = SimilarityTransform {
            scale: 1.3,
            rotation: rotation_exp(&Vector3::new(0.4, -0.2, 0.9)),
            translation: Vector3::new(5.0, -3.0, 2.0),
        };
        let _ = &mut rng;
        let posed = lbs(&mesh, &vec![t.clone(); mesh.part_count()]).unwrap();
        for (p, v) in posed.vertices.iter().zip(&mesh.vertices) {
            assert!((p - t.apply(v)).norm() < 1e-12);
        }
    }

    #[test]
    fn lbs_blended_vertex_is_midpoint() {
        let mesh = two_part_bar();
        let quarter_turn = SimilarityTransform::rigid(
            rotation_exp(&Vector3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0)),
            Vector3::zeros(),
        );
        let transforms = vec![SimilarityTransform::identity(), quarter_turn.clone()];
        let posed = lbs(&mesh, &transforms).unwrap();
        for (v, weights) in mesh.vertices.iter().zip(&mesh.skin_weights) {
            if weights.len() == 2 {
                let blend = 0.5 * v.coords + 0.5 * quarter_turn.apply(v).coords;
                let idx = mesh.vertices.iter().position(|u| u == v).unwrap();
                assert!((posed.vertices[idx].coords - blend).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn fk_rest_pose_is_identity() {
        let mesh = two_part_bar();
        let transforms = fk_compose(&mesh, &PoseParams::rest(mesh.part_count())).unwrap();
        for t in transforms {
            assert!(t.max_component_diff(&SimilarityTransform::identity()) < 1e-12);
        }
    }

    #[test]
    fn fk_single_chain_matches_homogeneous_product() {
        let mesh = two_part_bar();
        let mut pose = PoseParams::rest(mesh.part_count());
        pose.locals[0] = Vector3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0);
        let transforms = fk_compose(&mesh, &pose).unwrap();

        // Independent route: explicit 4x4 product T_p * B * L * B^-1.
        let homog = |s: f64, r: &Matrix3<f64>, t: &Vector3<f64>| -> Matrix4<f64> {
            let mut m = Matrix4::identity();
            for i in 0..3 {
                for j in 0..3 {
                    m[(i, j)] = s * r[(i, j)];
                }
                m[(i, 3)] = t[i];
            }
            m
        };
        let joint = &mesh.joints[1];
        let b = homog(
            1.0,
            &joint.bone_frame.rotation,
            &joint.bone_frame.translation,
        );
        let l = homog(
            1.0,
            &rotation_exp(&pose.locals[0]),
            &Vector3::zeros(),
        );
        let expected: Matrix4<f64> = b * l * b.try_inverse().unwrap();
        let got = homog(
            transforms[1].scale,
            &transforms[1].rotation,
            &transforms[1].translation,
        );
        assert!((expected - got).amax() < 1e-12);
    }

    #[test]
    fn fk_global_scale_propagates() {
        let mesh = two_part_bar();
        let mut pose = PoseParams::rest(mesh.part_count());
        pose.scale = 2.0;
        let transforms = fk_compose(&mesh, &pose).unwrap();
        let posed = lbs(&mesh, &transforms).unwrap();
        for t in &transforms {
            assert!((t.scale - 2.0).abs() < 1e-12);
        }
        for (j, joint) in posed.joints.iter().zip(&mesh.joints) {
            assert!((j.coords - 2.0 * joint.rest_position.coords).norm() < 1e-12);
        }
    }

    #[test]
    fn fk_decompose_roundtrip() {
        let mesh = two_part_bar();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let pose = random_pose(&mesh, &mut rng, 1.2);
            let transforms = fk_compose(&mesh, &pose).unwrap();
            let locals = fk_decompose(&mesh, &transforms).unwrap();
            // Non-root locals are pure rotations matching exp(omega).
            for (li, _joint) in mesh.joints.iter().enumerate().filter(|(_, j)| j.parent.is_some())
            {
                let l = &locals[li];
                assert!(l.translation.norm() < 1e-9, "t = {}", l.translation.norm());
                assert!((l.scale - 1.0).abs() < 1e-9);
                let expected = rotation_exp(&pose.locals[li - 1]);
                assert!((l.rotation - expected).amax() < 1e-9);
            }
            // Recomposition reproduces the inputs.
            let recomposed = compose_from_locals(&mesh, &locals).unwrap();
            for (a, b) in recomposed.iter().zip(&transforms) {
                assert!(a.max_component_diff(b) < 1e-9);
            }
        }
    }

    #[test]
    fn decompose_arbitrary_transforms_recompose() {
        let mesh = two_part_bar();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let transforms: Vec<SimilarityTransform> = (0..mesh.part_count())
                .map(|_| SimilarityTransform {
                    scale: rng.random_range(0.5..2.0),
                    rotation: rotation_exp(&Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))),
                    translation: Vector3::from_fn(|_, _| rng.random_range(-40.0..40.0)),
                })
                .collect();
            let locals = fk_decompose(&mesh, &transforms).unwrap();
            let recomposed = compose_from_locals(&mesh, &locals).unwrap();
            for (a, b) in recomposed.iter().zip(&transforms) {
                assert!(a.max_component_diff(b) < 1e-9);
            }
        }
    }

    #[test]
    fn fk_compose_vjp_matches_fd() {
        let mesh = two_part_bar();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let pose = random_pose(&mesh, &mut rng, 0.8);
            let upstream: Vec<TransformGrad> = (0..mesh.part_count())
                .map(|_| TransformGrad {
                    scale: rng.random_range(-1.0..1.0),
                    rot: Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                    trans: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                })
                .collect();
            let analytic = fk_compose_vjp(&mesh, &pose, &upstream).unwrap().to_flat();
            let f = |x: &[f64]| {
                let p = PoseParams::from_flat(x, mesh.part_count()).unwrap();
                let ts = fk_compose(&mesh, &p).unwrap();
                ts.iter()
                    .zip(&upstream)
                    .map(|(t, u)| {
                        u.scale * t.scale
                            + (u.rot.transpose() * t.rotation).trace()
                            + u.trans.dot(&t.translation)
                    })
                    .sum()
            };
            let fd = central_diff(&f, &pose.to_flat(), 1e-6);
            let err = max_rel_err(&analytic, &fd);
            assert!(err < 1e-5, "fk vjp rel err {err}");
        }
    }

    #[test]
    fn fk_decompose_vjp_matches_fd() {
        let mesh = two_part_bar();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let pose = random_pose(&mesh, &mut rng, 0.9);
        let transforms = fk_compose(&mesh, &pose).unwrap();
        let upstream: Vec<TransformGrad> = (0..mesh.part_count())
            .map(|_| TransformGrad {
                scale: rng.random_range(-1.0..1.0),
                rot: Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                trans: Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            })
            .collect();
        let analytic = fk_decompose_vjp(&mesh, &transforms, &upstream).unwrap();

        // Pack transforms via the exp chart and chain through it.
        let pack = |ts: &[SimilarityTransform]| -> Vec<f64> {
            ts.iter()
                .flat_map(|t| {
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
                })
                .collect()
        };
        let unpack = |x: &[f64]| -> Vec<SimilarityTransform> {
            x.chunks(7)
                .map(|c| SimilarityTransform {
                    scale: c[0],
                    rotation: rotation_exp(&Vector3::new(c[1], c[2], c[3])),
                    translation: Vector3::new(c[4], c[5], c[6]),
                })
                .collect()
        };
        let f = |x: &[f64]| {
            let ts = unpack(x);
            let locals = fk_decompose(&mesh, &ts).unwrap();
            locals
                .iter()
                .zip(&upstream)
                .map(|(t, u)| {
                    u.scale * t.scale
                        + (u.rot.transpose() * t.rotation).trace()
                        + u.trans.dot(&t.translation)
                })
                .sum()
        };
        let fd = central_diff(&f, &pack(&transforms), 1e-7);
        let chained: Vec<f64> = transforms
            .iter()
            .zip(&analytic)
            .flat_map(|(t, g)| {
                let w = rotation_log(&t.rotation);
                let rg = rotation_exp_vjp(&w, &g.rot);
                vec![g.scale, rg.x, rg.y, rg.z, g.trans.x, g.trans.y, g.trans.z]
            })
            .collect();
        let err = max_rel_err(&chained, &fd);
        assert!(err < 1e-5, "decompose vjp rel err {err}");
    }

    #[test]
    fn refine_identity_on_rest() {
        let mesh = two_part_bar();
        let res = refine(&mesh, &mesh.vertices).unwrap();
        for t in &res.transforms {
            assert!(t.max_component_diff(&SimilarityTransform::identity()) < 1e-9);
        }
        for (a, b) in res.vertices.iter().zip(&mesh.vertices) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn refine_recovers_rigid_per_part_motion() {
        let mesh = two_part_bar();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..20 {
            let pose = random_pose(&mesh, &mut rng, 1.0);
            let transforms = fk_compose(&mesh, &pose).unwrap();
            let posed = lbs(&mesh, &transforms).unwrap();
            let res = refine(&mesh, &posed.vertices).unwrap();
            for (a, b) in res.transforms.iter().zip(&transforms) {
                assert!(a.max_component_diff(b) < 1e-6, "diff {}", a.max_component_diff(b));
            }
            for (&v, (a, b)) in mesh
                .skin_weights
                .iter()
                .map(|w| w.len() == 1)
                .collect::<Vec<_>>()
                .iter()
                .zip(res.vertices.iter().zip(&posed.vertices))
            {
                if v {
                    assert!((a - b).norm() < 1e-6);
                }
            }
            // Idempotence: refining the refined vertices changes nothing.
            let again = refine(&mesh, &res.vertices).unwrap();
            for (a, b) in again.vertices.iter().zip(&res.vertices) {
                assert!((a - b).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn refine_denoises_gaussian_noise() {
        let mesh = two_part_bar();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let pose = random_pose(&mesh, &mut rng, 0.6);
        let transforms = fk_compose(&mesh, &pose).unwrap();
        let clean = lbs(&mesh, &transforms).unwrap().vertices;
        let mut wins = 0;
        for _ in 0..20 {
            let noisy: Vec<Point3<f64>> = clean
                .iter()
                .map(|p| {
                    Point3::new(
                        p.x + 5.0 * standard_normal(&mut rng),
                        p.y + 5.0 * standard_normal(&mut rng),
                        p.z + 5.0 * standard_normal(&mut rng),
                    )
                })
                .collect();
            let refined = refine(&mesh, &noisy).unwrap();
            let err_in: f64 =
                noisy.iter().zip(&clean).map(|(a, b)| (a - b).norm()).sum::<f64>();
            let err_out: f64 = refined
                .vertices
                .iter()
                .zip(&clean)
                .map(|(a, b)| (a - b).norm())
                .sum::<f64>();
            if err_out < err_in {
                wins += 1;
            }
        }
        assert!(wins >= 19, "denoised in {wins}/20 trials");
    }

    fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
        use rand_distr::{Distribution, StandardNormal};
        let v: f64 = StandardNormal.sample(rng);
        v
    }
}
