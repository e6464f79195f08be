//! Self-supervision model-fitting energy: data terms (ICP to the frontal
//! surface, lifting through the mesh grid), kinematic priors (joint
//! collision, per-part rigidity, local-translation offset), and multi-view
//! consistency — every term with analytic gradients.
//!
//! Data terms are means over depth points and the rigidity term a mean over
//! vertices, so the default weights are independent of scene size. The
//! collision and offset sums run over the fixed, small joint set.

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dualgrid::{extension, extension_vjp, window_of, GridFeatureMap, ScatterPoint, SIGMA};
use crate::embedding::MeshEmbedding;
use crate::error::{Error, Result};
use crate::kinematics::{
    fk_compose, fk_compose_vjp, fk_decompose, fk_decompose_vjp, lbs, lbs_vjp, refine, refine_vjp,
    PoseParams, RefineResult, SimilarityTransform, TransformGrad,
};
use crate::mesh::{vertex_normals, RiggedMesh, VertexNormals};
use crate::synth::Scene;

/// Occupancy below this mass marks a mesh-grid cell as empty for lifting.
const EMPTY_CELL_MASS: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyWeights {
    /// Lifting weight inside the data term.
    pub alpha: f64,
    /// Prior block weight.
    pub lambda1: f64,
    /// Multi-view block weight.
    pub lambda2: f64,
    /// Rigidity (arap) weight inside the prior.
    pub kappa1: f64,
    /// Offset weight inside the prior (per mm^2).
    pub kappa2: f64,
    /// Cross-view ICP weight inside the multi-view block.
    pub eta1: f64,
    /// Cross-view lifting weight inside the multi-view block.
    pub eta2: f64,
    /// Joint collision threshold (mm).
    pub t_col: f64,
    /// Smooth-L1 transition (mm).
    pub beta: f64,
}

impl Default for EnergyWeights {
    fn default() -> Self {
        EnergyWeights {
            alpha: 0.25,
            lambda1: 1.0,
            lambda2: 1.0,
            kappa1: 1.0,
            kappa2: 0.1,
            eta1: 1.0,
            eta2: 1.0,
            t_col: 5.0,
            beta: 1.0,
        }
    }
}

impl EnergyWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha,
            self.lambda1,
            self.lambda2,
            self.kappa1,
            self.kappa2,
            self.eta1,
            self.eta2,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::BadConfig("energy weights must be >= 0".into()));
        }
        if !(self.t_col > 0.0) || !(self.beta > 0.0) {
            return Err(Error::BadConfig("t_col and beta must be > 0".into()));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let w: EnergyWeights = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        w.validate()?;
        Ok(w)
    }
}

/// Per-term values, the weighted total, and the pose gradient.
#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub total: f64,
    pub data_icp: f64,
    pub data_lifting: f64,
    pub collision: f64,
    pub arap: f64,
    pub offset: f64,
    pub mv_vertex: f64,
    pub mv_icp: f64,
    pub mv_lifting: f64,
    /// Gradient with respect to the flat pose vector.
    pub grad_pose: Vec<f64>,
    /// Gradient with respect to each view's correspondence variables.
    pub grad_corr: Option<Vec<Vec<[f64; 2]>>>,
    pub grad_norm: f64,
    pub lifting_skipped: usize,
    pub empty_views: usize,
}

impl EnergyReport {
    /// The decomposition identity the reported total must satisfy.
    pub fn weighted_sum(&self, w: &EnergyWeights) -> f64 {
        self.data_icp
            + w.alpha * self.data_lifting
            + w.lambda1 * (self.collision + w.kappa1 * self.arap + w.kappa2 * self.offset)
            + w.lambda2 * (self.mv_vertex + w.eta1 * self.mv_icp + w.eta2 * self.mv_lifting)
    }
}

// ---------------------------------------------------------------------------
// Smooth L1
// ---------------------------------------------------------------------------

/// Huber-style smooth L1 of a 3-vector residual: `r^2/(2 beta)` below the
/// transition, `r - beta/2` above; C1 everywhere.
pub fn smooth_l1(x: &Vector3<f64>, beta: f64) -> f64 {
    let r = x.norm();
    if r < beta {
        r * r / (2.0 * beta)
    } else {
        r - beta / 2.0
    }
}

/// Value and gradient with respect to the residual vector.
pub fn smooth_l1_grad(x: &Vector3<f64>, beta: f64) -> (f64, Vector3<f64>) {
    let r = x.norm();
    if r < beta {
        (r * r / (2.0 * beta), x / beta)
    } else {
        (r - beta / 2.0, x / r)
    }
}

// ---------------------------------------------------------------------------
// ICP term
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct IcpTerm {
    pub value: f64,
    pub grad_vertices: Vec<Vector3<f64>>,
    /// Matched vertex per depth point.
    pub matches: Vec<usize>,
    pub empty: bool,
}

/// Data-to-model ICP: each depth point matched to its nearest vertex on the
/// frontal surface (normal facing the camera), smooth-L1 of the offset,
/// averaged over points. Matches are fixed at the current iterate; gradients
/// flow only to matched vertices. `given` reuses previously computed matches.
pub fn icp_term(
    points: &[Point3<f64>],
    vertices: &[Point3<f64>],
    normals: &VertexNormals,
    view_dir: &Vector3<f64>,
    beta: f64,
    given: Option<&[usize]>,
) -> Result<IcpTerm> {
    let mut grad_vertices = vec![Vector3::zeros(); vertices.len()];
    if points.is_empty() {
        log::warn!("icp term: empty depth point set");
        return Ok(IcpTerm {
            value: 0.0,
            grad_vertices,
            matches: Vec::new(),
            empty: true,
        });
    }
    let matches: Vec<usize> = match given {
        Some(m) => {
            if m.len() != points.len() {
                return Err(Error::LengthMismatch {
                    what: "icp matches",
                    got: m.len(),
                    expected: points.len(),
                });
            }
            m.to_vec()
        }
        None => {
            let frontal: Vec<usize> = (0..vertices.len())
                .filter(|&v| normals.valid[v] && normals.normals[v].dot(view_dir) < 0.0)
                .collect();
            if frontal.is_empty() {
                return Err(Error::NoFrontalVertices);
            }
            points
                .par_iter()
                .map(|p| {
                    let mut best = frontal[0];
                    let mut best_d = f64::INFINITY;
                    for &v in &frontal {
                        let d = (p - vertices[v]).norm_squared();
                        if d < best_d {
                            best_d = d;
                            best = v;
                        }
                    }
                    best
                })
                .collect()
        }
    };
    let n = points.len() as f64;
    let mut value = 0.0;
    for (p, &j) in points.iter().zip(&matches) {
        let delta = p - vertices[j];
        let (v, g) = smooth_l1_grad(&delta, beta);
        value += v;
        grad_vertices[j] -= g / n;
    }
    Ok(IcpTerm {
        value: value / n,
        grad_vertices,
        matches,
        empty: false,
    })
}

// ---------------------------------------------------------------------------
// Lifting term
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LiftingTerm {
    pub value: f64,
    pub grad_vertices: Vec<Vector3<f64>>,
    pub grad_corr: Vec<[f64; 2]>,
    /// Reconstructed surface position per point; None where skipped.
    pub lifts: Vec<Option<Point3<f64>>>,
    /// Points whose gather window held no scattered mass.
    pub skipped: usize,
}

/// Lifting energy: posed vertex positions are scattered onto the mesh grid
/// at the vertices' own mesh coordinates (with an occupancy channel for
/// per-cell normalization), gathered at each point's correspondence
/// coordinate, and compared to the point with smooth L1. Gradients flow to
/// both the posed vertices and the correspondence coordinates.
pub fn lifting_term(
    points: &[Point3<f64>],
    corr: &[[f64; 2]],
    vertex_grid: &[[f64; 2]],
    posed_vertices: &[Point3<f64>],
    grid: usize,
    kernel: usize,
    beta: f64,
) -> Result<LiftingTerm> {
    if corr.len() != points.len() {
        return Err(Error::LengthMismatch {
            what: "correspondences",
            got: corr.len(),
            expected: points.len(),
        });
    }
    if vertex_grid.len() != posed_vertices.len() {
        return Err(Error::LengthMismatch {
            what: "vertex grid coords",
            got: vertex_grid.len(),
            expected: posed_vertices.len(),
        });
    }
    let mut grad_vertices = vec![Vector3::zeros(); posed_vertices.len()];
    let mut grad_corr = vec![[0.0f64; 2]; corr.len()];
    if points.is_empty() {
        return Ok(LiftingTerm {
            value: 0.0,
            grad_vertices,
            grad_corr,
            lifts: Vec::new(),
            skipped: 0,
        });
    }

    let scatter: Vec<ScatterPoint> = vertex_grid
        .iter()
        .zip(posed_vertices)
        .map(|(&m, p)| ScatterPoint {
            m,
            f: vec![p.x, p.y, p.z, 1.0],
        })
        .collect();
    let map = extension(&scatter, grid, kernel)?;

    // Occupied window cells and renormalized gather per query. Occupancy
    // depends only on the fixed vertex coordinates, so the structure is
    // constant under both vertex and correspondence perturbations.
    struct Gather {
        cells: Vec<(usize, usize, f64)>,
        total: f64,
        lift: Vector3<f64>,
    }
    let gathers: Vec<Option<Gather>> = corr
        .iter()
        .map(|&c| {
            let hi = (grid - 1) as f64;
            if !(c[0] >= 0.0 && c[0] <= hi && c[1] >= 0.0 && c[1] <= hi) {
                return Err(Error::GridBounds(c[0], c[1], hi));
            }
            let win = window_of(c, grid, kernel);
            let mut cells = Vec::new();
            let mut total = 0.0;
            for (nx, ny, w) in win.nodes() {
                if map.node(nx, ny)[3] >= EMPTY_CELL_MASS {
                    cells.push((nx, ny, w));
                    total += w;
                }
            }
            if total < 1e-9 {
                return Ok(None);
            }
            let mut lift = Vector3::zeros();
            for &(nx, ny, w) in &cells {
                let cell = map.node(nx, ny);
                lift += (w / total) * Vector3::new(cell[0], cell[1], cell[2]) / cell[3];
            }
            Ok(Some(Gather { cells, total, lift }))
        })
        .collect::<Result<_>>()?;

    let live = gathers.iter().filter(|g| g.is_some()).count();
    let skipped = points.len() - live;
    let lifts: Vec<Option<Point3<f64>>> = gathers
        .iter()
        .map(|g| g.as_ref().map(|g| Point3::from(g.lift)))
        .collect();
    if live == 0 {
        log::warn!("lifting term: every point skipped (empty mesh-grid windows)");
        return Ok(LiftingTerm {
            value: 0.0,
            grad_vertices,
            grad_corr,
            lifts,
            skipped,
        });
    }
    let n = live as f64;
    let mut value = 0.0;
    let mut map_cotangent = GridFeatureMap::zeros(grid, 4);
    for (i, (p, gather)) in points.iter().zip(&gathers).enumerate() {
        let Some(g) = gather else { continue };
        let delta = p.coords - g.lift;
        let (v, psi_grad) = smooth_l1_grad(&delta, beta);
        value += v;
        let gl = -psi_grad / n; // d value / d lift
        // The renormalized weights form a softmax over the occupied cells;
        // their position derivative uses the occupied weighted mean node.
        let mut mean = [0.0f64; 2];
        for &(nx, ny, w) in &g.cells {
            mean[0] += w / g.total * nx as f64;
            mean[1] += w / g.total * ny as f64;
        }
        let mut dc = [0.0f64; 2];
        for &(nx, ny, w) in &g.cells {
            let vn = w / g.total;
            let cell = map.node(nx, ny);
            let mass = cell[3];
            let j_n = Vector3::new(cell[0], cell[1], cell[2]) / mass;
            let coef = gl.dot(&j_n) * 2.0 * SIGMA * vn;
            dc[0] += coef * (nx as f64 - mean[0]);
            dc[1] += coef * (ny as f64 - mean[1]);
            // Cell cotangents through J = S / M.
            let gj = vn * gl;
            let slot = map_cotangent.node_mut(nx, ny);
            slot[0] += gj.x / mass;
            slot[1] += gj.y / mass;
            slot[2] += gj.z / mass;
            slot[3] -= gj.dot(&j_n) / mass;
        }
        grad_corr[i] = dc;
    }
    // Back through the scatter to the vertex positions; the vertices' own
    // grid coordinates are fixed intrinsic quantities, their position
    // cotangents are discarded.
    let scatter_grads = extension_vjp(&scatter, grid, kernel, &map_cotangent)?;
    for (gv, (df, _)) in grad_vertices.iter_mut().zip(&scatter_grads) {
        gv.x += df[0];
        gv.y += df[1];
        gv.z += df[2];
    }
    Ok(LiftingTerm {
        value: value / n,
        grad_vertices,
        grad_corr,
        lifts,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Collision term
// ---------------------------------------------------------------------------

/// Hinge penalty on close joint pairs, excluding parent-child pairs whose
/// rest distance may legitimately be small. Sum over unordered pairs.
pub fn collision_term(
    joints: &[Point3<f64>],
    parents: &[Option<usize>],
    t_col: f64,
) -> (f64, Vec<Vector3<f64>>) {
    let n = joints.len();
    let mut value = 0.0;
    let mut grads = vec![Vector3::zeros(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if parents[i] == Some(j) || parents[j] == Some(i) {
                continue;
            }
            let d = joints[i] - joints[j];
            let dist = d.norm();
            if dist < t_col {
                value += t_col - dist;
                if dist > 1e-12 {
                    let dir = d / dist;
                    grads[i] -= dir;
                    grads[j] += dir;
                }
            }
        }
    }
    (value, grads)
}

// ---------------------------------------------------------------------------
// Rigidity (arap) and offset terms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ArapTerm {
    pub value: f64,
    pub grad: Vec<Vector3<f64>>,
    pub refined: RefineResult,
}

/// Mean squared distance between the vertex estimate and its rigid-per-part
/// reposing. The gradient includes the path through the per-part similarity
/// fits and the skinning.
pub fn arap_term(mesh: &RiggedMesh, estimated: &[Point3<f64>]) -> Result<ArapTerm> {
    let refined = refine(mesh, estimated)?;
    let n = estimated.len() as f64;
    let mut value = 0.0;
    let mut grad: Vec<Vector3<f64>> = Vec::with_capacity(estimated.len());
    let mut upstream_refined: Vec<Vector3<f64>> = Vec::with_capacity(estimated.len());
    for (p, r) in estimated.iter().zip(&refined.vertices) {
        let d = p - r;
        value += d.norm_squared();
        grad.push(2.0 * d / n);
        upstream_refined.push(-2.0 * d / n);
    }
    let tgrads = lbs_vjp(mesh, &refined.transforms, Some(&upstream_refined), None)?;
    let through_fit = refine_vjp(mesh, estimated, &tgrads)?;
    for (g, extra) in grad.iter_mut().zip(&through_fit) {
        *g += extra;
    }
    Ok(ArapTerm {
        value: value / n,
        grad,
        refined,
    })
}

#[derive(Debug, Clone)]
pub struct OffsetTerm {
    pub value: f64,
    pub grad_transforms: Vec<TransformGrad>,
}

/// Sum of squared local translations over non-root joints, recovered by the
/// forward-kinematics decomposition; gradients on the part transforms.
pub fn offset_term(mesh: &RiggedMesh, transforms: &[SimilarityTransform]) -> Result<OffsetTerm> {
    let locals = fk_decompose(mesh, transforms)?;
    let mut value = 0.0;
    let mut local_grads = vec![TransformGrad::zero(); locals.len()];
    for (j, joint) in mesh.joints.iter().enumerate() {
        if joint.parent.is_some() {
            value += locals[j].translation.norm_squared();
            local_grads[j].trans = 2.0 * locals[j].translation;
        }
    }
    let grad_transforms = fk_decompose_vjp(mesh, transforms, &local_grads)?;
    Ok(OffsetTerm {
        value,
        grad_transforms,
    })
}

/// Offset energy of a raw vertex estimate, through the refinement fits.
pub fn offset_from_estimate(
    mesh: &RiggedMesh,
    estimated: &[Point3<f64>],
) -> Result<(f64, Vec<Vector3<f64>>)> {
    let refined = refine(mesh, estimated)?;
    let off = offset_term(mesh, &refined.transforms)?;
    let grads = refine_vjp(mesh, estimated, &off.grad_transforms)?;
    Ok((off.value, grads))
}

// ---------------------------------------------------------------------------
// Multi-view consistency
// ---------------------------------------------------------------------------

pub struct MvView<'a> {
    /// Posed vertices in this view's camera frame.
    pub vertices_cam: &'a [Point3<f64>],
    /// World-to-camera rigid transform.
    pub extrinsics: &'a SimilarityTransform,
    /// Depth points in this camera frame.
    pub points: &'a [Point3<f64>],
    /// Correspondence coordinate per point.
    pub corr: Option<&'a [[f64; 2]]>,
    /// Reference views contribute only to the vertex consistency term.
    pub is_reference: bool,
}

#[derive(Debug, Clone)]
pub struct MvTerm {
    pub vertex: f64,
    pub icp: f64,
    pub lifting: f64,
    /// Per view, gradients on that view's camera-frame vertices.
    pub grad_vertices: Vec<Vec<Vector3<f64>>>,
    pub grad_corr: Vec<Option<Vec<[f64; 2]>>>,
    pub lifting_skipped: usize,
}

/// Multi-view consistency: per-view vertex estimates are mapped into the
/// canonical (world) frame and tied to their component-wise median across
/// views (the median is held fixed in the gradient); non-reference views
/// additionally match the mesh against their own depth maps with the ICP
/// and lifting terms.
pub fn multiview_term(
    mesh: &RiggedMesh,
    views: &[MvView],
    vertex_grid: &[[f64; 2]],
    grid: usize,
    kernel: usize,
    beta: f64,
) -> Result<MvTerm> {
    if views.len() < 2 {
        return Err(Error::TooFewViews {
            needed: 2,
            got: views.len(),
        });
    }
    let nverts = views[0].vertices_cam.len();
    for view in views {
        if view.vertices_cam.len() != nverts {
            return Err(Error::LengthMismatch {
                what: "view vertices",
                got: view.vertices_cam.len(),
                expected: nverts,
            });
        }
        if !view.extrinsics.is_rigid(1e-9) {
            return Err(Error::NonRigidExtrinsics);
        }
    }

    // Canonical-frame copies and the per-component median.
    let canonical: Vec<Vec<Point3<f64>>> = views
        .iter()
        .map(|view| {
            let inv = view.extrinsics.inverse();
            view.vertices_cam.iter().map(|p| inv.apply(p)).collect()
        })
        .collect();
    let mut medians = Vec::with_capacity(nverts);
    let mut scratch: Vec<f64> = Vec::with_capacity(views.len());
    for v in 0..nverts {
        let mut med = Vector3::zeros();
        for axis in 0..3 {
            scratch.clear();
            scratch.extend(canonical.iter().map(|c| c[v].coords[axis]));
            scratch.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = scratch.len();
            med[axis] = if k % 2 == 1 {
                scratch[k / 2]
            } else {
                0.5 * (scratch[k / 2 - 1] + scratch[k / 2])
            };
        }
        medians.push(Point3::from(med));
    }

    let norm = (views.len() * nverts) as f64;
    let mut vertex_value = 0.0;
    let mut grad_vertices: Vec<Vec<Vector3<f64>>> = views
        .iter()
        .map(|v| vec![Vector3::zeros(); v.vertices_cam.len()])
        .collect();
    for (vi, view) in views.iter().enumerate() {
        let r = &view.extrinsics.rotation;
        for v in 0..nverts {
            let delta = canonical[vi][v] - medians[v];
            let (val, g) = smooth_l1_grad(&delta, beta);
            vertex_value += val;
            // x_world = R^T (x_cam - t): the cotangent transforms by R.
            grad_vertices[vi][v] += r * (g / norm);
        }
    }

    // Cross-view data terms on non-reference views.
    let cross: Vec<usize> = views
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_reference)
        .map(|(i, _)| i)
        .collect();
    let mut icp_value = 0.0;
    let mut lifting_value = 0.0;
    let mut lifting_skipped = 0;
    let mut grad_corr: Vec<Option<Vec<[f64; 2]>>> = views.iter().map(|_| None).collect();
    let view_dir = Vector3::new(0.0, 0.0, 1.0);
    if !cross.is_empty() {
        let share = cross.len() as f64;
        for &vi in &cross {
            let view = &views[vi];
            if view.points.is_empty() {
                continue;
            }
            let normals = vertex_normals(mesh, view.vertices_cam)?;
            let icp = icp_term(
                view.points,
                view.vertices_cam,
                &normals,
                &view_dir,
                beta,
                None,
            )?;
            icp_value += icp.value / share;
            for (g, add) in grad_vertices[vi].iter_mut().zip(&icp.grad_vertices) {
                *g += add / share;
            }
            if let Some(corr) = view.corr {
                let lift = lifting_term(
                    view.points,
                    corr,
                    vertex_grid,
                    view.vertices_cam,
                    grid,
                    kernel,
                    beta,
                )?;
                lifting_value += lift.value / share;
                lifting_skipped += lift.skipped;
                for (g, add) in grad_vertices[vi].iter_mut().zip(&lift.grad_vertices) {
                    *g += add / share;
                }
                grad_corr[vi] = Some(
                    lift.grad_corr
                        .iter()
                        .map(|g| [g[0] / share, g[1] / share])
                        .collect(),
                );
            }
        }
    }

    Ok(MvTerm {
        vertex: vertex_value / norm,
        icp: icp_value,
        lifting: lifting_value,
        grad_vertices,
        grad_corr,
        lifting_skipped,
    })
}

// ---------------------------------------------------------------------------
// Total energy over pose parameters
// ---------------------------------------------------------------------------

/// Options for one total-energy evaluation.
pub struct EvalOptions<'a> {
    /// Mesh-grid kernel size for the lifting term.
    pub kernel: usize,
    /// Reuse fixed ICP matches per view instead of re-matching.
    pub icp_matches: Option<&'a [Vec<usize>]>,
    /// Also return gradients with respect to the correspondence variables.
    pub corr_grads: bool,
}

/// Evaluate the full energy at a pose against every view of a scene.
///
/// View 0 is the reference view carrying the single-view data term; further
/// views form the multi-view block (cross-view ICP and lifting, Eq.-13
/// style). The vertex consistency term is identically zero here because all
/// views share one posed mesh, and is reported as such. Returns per-term
/// values, the weighted total, and the gradient with respect to the flat
/// pose vector (plus correspondence gradients when requested).
pub fn total_energy(
    mesh: &RiggedMesh,
    embedding: &MeshEmbedding,
    scene: &Scene,
    pose: &PoseParams,
    corr: &[Vec<[f64; 2]>],
    weights: &EnergyWeights,
    opts: &EvalOptions,
) -> Result<EnergyReport> {
    weights.validate()?;
    pose.validate()?;
    if scene.views.is_empty() {
        return Err(Error::TooFewViews { needed: 1, got: 0 });
    }
    if corr.len() != scene.views.len() {
        return Err(Error::LengthMismatch {
            what: "per-view correspondences",
            got: corr.len(),
            expected: scene.views.len(),
        });
    }

    let vertex_grid = embedding.vertex_grid_coords()?;
    let grid = embedding.grid_size;
    let transforms = fk_compose(mesh, pose)?;
    let posed = lbs(mesh, &transforms)?;
    let view_dir = Vector3::new(0.0, 0.0, 1.0);

    let mut world_grad = vec![Vector3::zeros(); mesh.vertex_count()];
    let mut joint_grad = vec![Vector3::zeros(); mesh.joints.len()];
    let mut grad_corr: Vec<Vec<[f64; 2]>> =
        corr.iter().map(|c| vec![[0.0; 2]; c.len()]).collect();

    let mut data_icp = 0.0;
    let mut data_lifting = 0.0;
    let mut mv_icp = 0.0;
    let mut mv_lifting = 0.0;
    let mut lifting_skipped = 0;
    let mut empty_views = 0;
    let cross_views = scene.views.len().saturating_sub(1);

    for (vi, view) in scene.views.iter().enumerate() {
        let ext = &view.camera.extrinsics;
        let cam_verts: Vec<Point3<f64>> = posed.vertices.iter().map(|p| ext.apply(p)).collect();
        let normals = vertex_normals(mesh, &cam_verts)?;
        if view.points.is_empty() {
            empty_views += 1;
        }
        // Weight on this view's data terms inside the total.
        let (icp_w, lift_w) = if vi == 0 {
            (1.0, weights.alpha)
        } else {
            let share = cross_views as f64;
            (
                weights.lambda2 * weights.eta1 / share,
                weights.lambda2 * weights.eta2 / share,
            )
        };

        let icp = icp_term(
            &view.points,
            &cam_verts,
            &normals,
            &view_dir,
            weights.beta,
            opts.icp_matches.map(|m| m[vi].as_slice()),
        )?;
        let lift = lifting_term(
            &view.points,
            &corr[vi],
            &vertex_grid,
            &cam_verts,
            grid,
            opts.kernel,
            weights.beta,
        )?;
        lifting_skipped += lift.skipped;
        if vi == 0 {
            data_icp = icp.value;
            data_lifting = lift.value;
        } else {
            mv_icp += icp.value / cross_views as f64;
            mv_lifting += lift.value / cross_views as f64;
        }
        // Rotate camera-frame vertex cotangents back to the world frame.
        let rt = ext.rotation.transpose();
        for ((wg, gi), gl) in world_grad
            .iter_mut()
            .zip(&icp.grad_vertices)
            .zip(&lift.grad_vertices)
        {
            *wg += rt * (icp_w * gi + lift_w * gl);
        }
        if opts.corr_grads {
            for (g, add) in grad_corr[vi].iter_mut().zip(&lift.grad_corr) {
                g[0] += lift_w * add[0];
                g[1] += lift_w * add[1];
            }
        }
    }

    // All views share one posed mesh, so the canonical per-view vertex
    // copies coincide and the median consistency term vanishes identically.
    let mv_vertex = 0.0;

    let parents: Vec<Option<usize>> = mesh.joints.iter().map(|j| j.parent).collect();
    let (collision, col_grads) = collision_term(&posed.joints, &parents, weights.t_col);
    for (jg, add) in joint_grad.iter_mut().zip(&col_grads) {
        *jg += weights.lambda1 * add;
    }

    let arap = arap_term(mesh, &posed.vertices)?;
    let w_arap = weights.lambda1 * weights.kappa1;
    for (wg, add) in world_grad.iter_mut().zip(&arap.grad) {
        *wg += w_arap * add;
    }

    let off = offset_term(mesh, &arap.refined.transforms)?;
    let w_off = weights.lambda1 * weights.kappa2;
    let off_vertex_grads = refine_vjp(mesh, &posed.vertices, &off.grad_transforms)?;
    for (wg, add) in world_grad.iter_mut().zip(&off_vertex_grads) {
        *wg += w_off * add;
    }

    // Collapse vertex and joint cotangents onto the part transforms, then
    // onto the pose parameters.
    let lbs_grads = lbs_vjp(mesh, &transforms, Some(&world_grad), Some(&joint_grad))?;
    let pose_grad = fk_compose_vjp(mesh, pose, &lbs_grads)?;
    let grad_pose = pose_grad.to_flat();
    let grad_norm = grad_pose.iter().map(|g| g * g).sum::<f64>().sqrt();

    let mut report = EnergyReport {
        total: 0.0,
        data_icp,
        data_lifting,
        collision,
        arap: arap.value,
        offset: off.value,
        mv_vertex,
        mv_icp,
        mv_lifting,
        grad_pose,
        grad_corr: opts.corr_grads.then_some(grad_corr),
        grad_norm,
        lifting_skipped,
        empty_views,
    };
    report.total = report.weighted_sum(weights);
    if !report.total.is_finite() {
        return Err(Error::NonFiniteEnergy(0));
    }
    Ok(report)
}

/// Fresh ICP matches for every view of the scene at the given pose.
pub fn icp_matches(
    mesh: &RiggedMesh,
    scene: &Scene,
    pose: &PoseParams,
    beta: f64,
) -> Result<Vec<Vec<usize>>> {
    let transforms = fk_compose(mesh, pose)?;
    let posed = lbs(mesh, &transforms)?;
    let view_dir = Vector3::new(0.0, 0.0, 1.0);
    scene
        .views
        .iter()
        .map(|view| {
            let cam_verts: Vec<Point3<f64>> = posed
                .vertices
                .iter()
                .map(|p| view.camera.extrinsics.apply(p))
                .collect();
            let normals = vertex_normals(mesh, &cam_verts)?;
            icp_term(&view.points, &cam_verts, &normals, &view_dir, beta, None).map(|t| t.matches)
        })
        .collect()
}
