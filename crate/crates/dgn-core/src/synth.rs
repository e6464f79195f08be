//! Synthetic depth data: pinhole z-buffer rasterization of the posed mesh,
//! sensor-style corruption (Gaussian noise, elliptical holes), backprojection
//! to point clouds, and multi-view scene bundles with ground truth.
//!
//! Pixel `(u, v)` has its center at continuous image coordinates `(u, v)`
//! exactly; depth is the camera-frame z of the nearest surface along the
//! pixel ray. Rasterization uses half-plane edge functions with a
//! deterministic fill rule and f64 internal math, f32 output.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Point3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::MeshEmbedding;
use crate::error::{Error, Result};
use crate::kinematics::{fk_compose, lbs, PoseParams, SimilarityTransform};
use crate::mesh::{rotation_defect, vertex_normals, RiggedMesh};

/// Pinhole camera: intrinsics in pixels, rigid world-to-camera extrinsics.
#[derive(Debug, Clone)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub extrinsics: SimilarityTransform,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::DegenerateCamera);
        }
        if !self.extrinsics.is_rigid(1e-9) {
            return Err(Error::NonRigidExtrinsics);
        }
        Ok(())
    }

    /// Project a camera-frame point to continuous pixel coordinates.
    pub fn project(&self, p: &Point3<f64>) -> Option<[f64; 2]> {
        if p.z <= 0.0 {
            return None;
        }
        Some([
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ])
    }

    /// Direction of the ray through pixel center `(u, v)`, z component 1.
    pub fn ray_dir(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Camera at `eye` looking at `target` (world frame, mm).
    pub fn look_at(
        eye: Point3<f64>,
        target: Point3<f64>,
        up: Vector3<f64>,
        fx: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let z = (target - eye).normalize();
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        // Rows of R map world axes onto camera axes.
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye.coords);
        Camera {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            extrinsics: SimilarityTransform::rigid(r, t),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    extrinsics: ExtrinsicsRecord,
}

#[derive(Serialize, Deserialize)]
struct ExtrinsicsRecord {
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let r = &c.extrinsics.rotation;
        CameraRecord {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            extrinsics: ExtrinsicsRecord {
                rotation: [
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
                translation: [
                    c.extrinsics.translation.x,
                    c.extrinsics.translation.y,
                    c.extrinsics.translation.z,
                ],
            },
        }
    }
}

impl TryFrom<CameraRecord> for Camera {
    type Error = Error;
    fn try_from(rec: CameraRecord) -> Result<Camera> {
        let camera = Camera {
            fx: rec.fx,
            fy: rec.fy,
            cx: rec.cx,
            cy: rec.cy,
            width: rec.width,
            height: rec.height,
            extrinsics: SimilarityTransform::rigid(
                Matrix3::from_row_slice(&rec.extrinsics.rotation),
                Vector3::from(rec.extrinsics.translation),
            ),
        };
        camera.validate()?;
        Ok(camera)
    }
}

/// Load a camera rig file: a JSON array of camera records.
pub fn load_camera_rig(path: &Path) -> Result<Vec<Camera>> {
    let recs: Vec<CameraRecord> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    recs.into_iter().map(Camera::try_from).collect()
}

pub fn save_camera_rig(path: &Path, cameras: &[Camera]) -> Result<()> {
    let recs: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    std::fs::write(path, serde_json::to_string_pretty(&recs)?)?;
    Ok(())
}

/// Per-pixel ground-truth mesh-grid coordinates for rendered pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMap {
    pub data: Vec<[f32; 2]>,
    pub mask: Vec<bool>,
}

/// Depth image in millimeters; 0 marks invalid pixels (background or holes).
#[derive(Debug, Clone)]
pub struct DepthFrame {
    pub camera: Camera,
    pub depth: Vec<f32>,
    pub corr: Option<CorrMap>,
}

impl DepthFrame {
    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let n = self.camera.width * self.camera.height;
        if self.depth.len() != n {
            return Err(Error::LengthMismatch {
                what: "depth buffer",
                got: self.depth.len(),
                expected: n,
            });
        }
        if self.depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::BadConfig("negative or non-finite depth".into()));
        }
        if let Some(corr) = &self.corr {
            if corr.data.len() != n || corr.mask.len() != n {
                return Err(Error::LengthMismatch {
                    what: "corr map",
                    got: corr.data.len(),
                    expected: n,
                });
            }
        }
        Ok(())
    }
}

struct RasterOut {
    depth: Vec<f64>,
    face: Vec<i64>,
    attr: Vec<[f64; 2]>,
}

/// Scanline-parallel z-buffer rasterization. `attrs` are per-vertex values
/// interpolated perspective-correctly (the mesh-grid coordinates).
fn rasterize(
    faces: &[[usize; 3]],
    cam_verts: &[Point3<f64>],
    camera: &Camera,
    attrs: Option<&[[f64; 2]]>,
) -> RasterOut {
    let (w, h) = (camera.width, camera.height);
    struct Prepped {
        idx: usize,
        px: [[f64; 2]; 3],
        z: [f64; 3],
        x_range: (usize, usize),
        y_range: (usize, usize),
    }
    let mut prepped = Vec::new();
    for (fi, f) in faces.iter().enumerate() {
        let p: Vec<&Point3<f64>> = f.iter().map(|&i| &cam_verts[i]).collect();
        if p.iter().any(|q| q.z <= 1e-6) {
            continue;
        }
        let px: Vec<[f64; 2]> = p.iter().map(|q| camera.project(q).unwrap()).collect();
        let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
        for q in &px {
            x0 = x0.min(q[0]);
            x1 = x1.max(q[0]);
            y0 = y0.min(q[1]);
            y1 = y1.max(q[1]);
        }
        if x1 < 0.0 || y1 < 0.0 || x0 > (w - 1) as f64 || y0 > (h - 1) as f64 {
            continue;
        }
        let xa = x0.ceil().max(0.0) as usize;
        let xb = x1.floor().min((w - 1) as f64) as usize;
        let ya = y0.ceil().max(0.0) as usize;
        let yb = y1.floor().min((h - 1) as f64) as usize;
        if xa > xb || ya > yb {
            continue;
        }
        prepped.push(Prepped {
            idx: fi,
            px: [px[0], px[1], px[2]],
            z: [p[0].z, p[1].z, p[2].z],
            x_range: (xa, xb),
            y_range: (ya, yb),
        });
    }

    // On-edge pixels belong to exactly one of the two triangles sharing the
    // edge: include only when the edge direction satisfies a fixed rule.
    fn edge_accepts(e: f64, dx: f64, dy: f64) -> bool {
        if e > 0.0 {
            true
        } else if e < 0.0 {
            false
        } else {
            dy > 0.0 || (dy == 0.0 && dx > 0.0)
        }
    }

    let rows: Vec<(Vec<f64>, Vec<i64>, Vec<[f64; 2]>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut zrow = vec![f64::INFINITY; w];
            let mut frow = vec![-1i64; w];
            let mut arow = vec![[0.0f64; 2]; w];
            let yf = y as f64;
            for t in &prepped {
                if y < t.y_range.0 || y > t.y_range.1 {
                    continue;
                }
                // Canonical counter-clockwise screen orientation.
                let area2_raw = (t.px[1][0] - t.px[0][0]) * (t.px[2][1] - t.px[0][1])
                    - (t.px[1][1] - t.px[0][1]) * (t.px[2][0] - t.px[0][0]);
                if area2_raw.abs() < 1e-18 {
                    continue;
                }
                let order: [usize; 3] = if area2_raw > 0.0 { [0, 1, 2] } else { [0, 2, 1] };
                let area2 = area2_raw.abs();
                for x in t.x_range.0..=t.x_range.1 {
                    let xf = x as f64;
                    let mut bary = [0.0f64; 3];
                    let mut inside = true;
                    for k in 0..3 {
                        let p0 = t.px[order[k]];
                        let p1 = t.px[order[(k + 1) % 3]];
                        let (dx, dy) = (p1[0] - p0[0], p1[1] - p0[1]);
                        let e = dx * (yf - p0[1]) - dy * (xf - p0[0]);
                        if !edge_accepts(e, dx, dy) {
                            inside = false;
                            break;
                        }
                        // Edge (k, k+1) is opposite vertex k+2.
                        bary[(k + 2) % 3] = e / area2;
                    }
                    if !inside {
                        continue;
                    }
                    // Perspective-correct depth: equals the analytic
                    // intersection of the pixel ray with the triangle plane.
                    let inv_z = bary[0] / t.z[order[0]]
                        + bary[1] / t.z[order[1]]
                        + bary[2] / t.z[order[2]];
                    if inv_z <= 0.0 {
                        continue;
                    }
                    let z = 1.0 / inv_z;
                    if z < zrow[x] {
                        zrow[x] = z;
                        frow[x] = t.idx as i64;
                        if let Some(attrs) = attrs {
                            let mut val = [0.0f64; 2];
                            for k in 0..3 {
                                let vidx = faces[t.idx][order[k]];
                                let wk = bary[k] / t.z[order[k]] * z;
                                val[0] += wk * attrs[vidx][0];
                                val[1] += wk * attrs[vidx][1];
                            }
                            arow[x] = val;
                        }
                    }
                }
            }
            (zrow, frow, arow)
        })
        .collect();

    let mut out = RasterOut {
        depth: vec![f64::INFINITY; w * h],
        face: vec![-1; w * h],
        attr: vec![[0.0; 2]; w * h],
    };
    for (y, (zrow, frow, arow)) in rows.into_iter().enumerate() {
        let base = y * w;
        out.depth[base..base + w].copy_from_slice(&zrow);
        out.face[base..base + w].copy_from_slice(&frow);
        out.attr[base..base + w].copy_from_slice(&arow);
    }
    out
}

/// Render a depth map of the posed mesh. `vertex_grid` (per-vertex mesh-grid
/// coordinates) enables the ground-truth correspondence map.
pub fn render_depth(
    mesh: &RiggedMesh,
    posed_world: &[Point3<f64>],
    camera: &Camera,
    vertex_grid: Option<&[[f64; 2]]>,
) -> Result<DepthFrame> {
    camera.validate()?;
    if posed_world.len() != mesh.vertex_count() {
        return Err(Error::LengthMismatch {
            what: "posed vertices",
            got: posed_world.len(),
            expected: mesh.vertex_count(),
        });
    }
    if posed_world
        .iter()
        .any(|p| !p.coords.iter().all(|v| v.is_finite()))
    {
        return Err(Error::BadConfig("non-finite posed vertex".into()));
    }
    let cam_verts: Vec<Point3<f64>> = posed_world
        .iter()
        .map(|p| camera.extrinsics.apply(p))
        .collect();
    let out = rasterize(&mesh.faces, &cam_verts, camera, vertex_grid);
    let depth: Vec<f32> = out
        .depth
        .iter()
        .map(|&z| if z.is_finite() { z as f32 } else { 0.0 })
        .collect();
    let corr = vertex_grid.map(|_| CorrMap {
        data: out.attr.iter().map(|a| [a[0] as f32, a[1] as f32]).collect(),
        mask: out.face.iter().map(|&f| f >= 0).collect(),
    });
    Ok(DepthFrame {
        camera: camera.clone(),
        depth,
        corr,
    })
}

/// Flat-shaded grayscale preview (headlight Lambertian), for reports.
pub fn render_shading(
    mesh: &RiggedMesh,
    posed_world: &[Point3<f64>],
    camera: &Camera,
) -> Result<Vec<u8>> {
    camera.validate()?;
    let cam_verts: Vec<Point3<f64>> = posed_world
        .iter()
        .map(|p| camera.extrinsics.apply(p))
        .collect();
    let out = rasterize(&mesh.faces, &cam_verts, camera, None);
    let shade: Vec<u8> = out
        .face
        .iter()
        .map(|&fi| {
            if fi < 0 {
                0u8
            } else {
                let f = mesh.faces[fi as usize];
                let n = (cam_verts[f[1]] - cam_verts[f[0]])
                    .cross(&(cam_verts[f[2]] - cam_verts[f[0]]));
                let norm = n.norm();
                if norm < 1e-12 {
                    25
                } else {
                    let facing = (-n.z / norm).max(0.0);
                    (25.0 + 230.0 * facing) as u8
                }
            }
        })
        .collect();
    Ok(shade)
}

/// Gaussian depth noise plus elliptical hole dropout, deterministic by seed.
/// Ground-truth fields are left untouched.
pub fn corrupt(
    frame: &DepthFrame,
    noise_sigma: f64,
    hole_fraction: f64,
    seed: u64,
) -> Result<DepthFrame> {
    if !(0.0..=1.0).contains(&hole_fraction) {
        return Err(Error::BadHoleFraction(hole_fraction));
    }
    frame.validate()?;
    let mut out = frame.clone();
    let (w, h) = (frame.camera.width, frame.camera.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if noise_sigma > 0.0 {
        for d in out.depth.iter_mut() {
            if *d > 0.0 {
                let n: f64 = StandardNormal.sample(&mut rng);
                let v = *d as f64 + noise_sigma * n;
                *d = if v > 0.0 { v as f32 } else { 0.0 };
            }
        }
    }
    if hole_fraction > 0.0 {
        let valid: usize = out.valid_count();
        let target = (hole_fraction * valid as f64).round() as usize;
        if hole_fraction >= 1.0 {
            out.depth.iter_mut().for_each(|d| *d = 0.0);
        } else {
            let mut zeroed = 0usize;
            let mut attempts = 0usize;
            let max_radius = (w.min(h) as f64 / 6.0).max(2.0);
            while zeroed < target && attempts < 10_000 {
                attempts += 1;
                let cx: f64 = rng.random_range(0.0..w as f64);
                let cy: f64 = rng.random_range(0.0..h as f64);
                let ra: f64 = rng.random_range(1.0..max_radius);
                let rb: f64 = rng.random_range(1.0..max_radius);
                let phi: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let (cphi, sphi) = (phi.cos(), phi.sin());
                let reach = ra.max(rb);
                let y0 = (cy - reach).floor().max(0.0) as usize;
                let y1 = (cy + reach).ceil().min((h - 1) as f64) as usize;
                let x0 = (cx - reach).floor().max(0.0) as usize;
                let x1 = (cx + reach).ceil().min((w - 1) as f64) as usize;
                'blob: for y in y0..=y1 {
                    for x in x0..=x1 {
                        let dx = x as f64 - cx;
                        let dy = y as f64 - cy;
                        let u = (cphi * dx + sphi * dy) / ra;
                        let v = (-sphi * dx + cphi * dy) / rb;
                        if u * u + v * v <= 1.0 {
                            let i = y * w + x;
                            if out.depth[i] > 0.0 {
                                out.depth[i] = 0.0;
                                zeroed += 1;
                                if zeroed >= target {
                                    break 'blob;
                                }
                            }
                        }
                    }
                }
            }
            if zeroed < target {
                // Deterministic fallback for pathological targets.
                for d in out.depth.iter_mut() {
                    if *d > 0.0 {
                        *d = 0.0;
                        zeroed += 1;
                        if zeroed >= target {
                            break;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Valid pixels lifted to camera-frame 3D points, with their pixel indices.
pub fn backproject(frame: &DepthFrame) -> Vec<(Point3<f64>, usize)> {
    let w = frame.camera.width;
    frame
        .depth
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 0.0)
        .map(|(i, &d)| {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            let z = d as f64;
            (
                Point3::new(
                    (u - frame.camera.cx) * z / frame.camera.fx,
                    (v - frame.camera.cy) * z / frame.camera.fy,
                    z,
                ),
                i,
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

/// Where a view's energy-facing point cloud comes from.
///
/// `Backproject` lifts the (possibly corrupted) depth map, the realistic
/// setting. `Vertices` takes the camera-facing posed vertices directly with
/// their exact mesh coordinates; rasterization quantizes points onto pixel
/// rays, so only vertex point sets are exactly consistent with the energy's
/// nearest-vertex matching and scatter/gather reconstruction at ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    Backproject,
    Vertices,
}

#[derive(Debug, Clone)]
pub struct SceneView {
    pub camera: Camera,
    pub frame: DepthFrame,
    /// Energy-facing points in this view's camera frame.
    pub points: Vec<Point3<f64>>,
    /// Ground-truth mesh-grid coordinate per point.
    pub corr_gt: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub views: Vec<SceneView>,
    pub gt_pose: Option<PoseParams>,
    pub point_source: PointSource,
}

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub noise_sigma: f64,
    pub hole_fraction: f64,
    pub seed: u64,
    pub point_source: PointSource,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            noise_sigma: 0.0,
            hole_fraction: 0.0,
            seed: 0,
            point_source: PointSource::Backproject,
        }
    }
}

/// Render and corrupt every view of the posed mesh; the bundle carries the
/// ground-truth pose, per-view frames, points, and correspondences.
pub fn make_scene(
    mesh: &RiggedMesh,
    embedding: &MeshEmbedding,
    pose: &PoseParams,
    cameras: &[Camera],
    config: &SceneConfig,
) -> Result<Scene> {
    if cameras.is_empty() {
        return Err(Error::TooFewViews { needed: 1, got: 0 });
    }
    pose.validate()?;
    let transforms = fk_compose(mesh, pose)?;
    let posed = lbs(mesh, &transforms)?;
    let vgrid = embedding.vertex_grid_coords()?;
    let mut views = Vec::with_capacity(cameras.len());
    for (vi, camera) in cameras.iter().enumerate() {
        let clean = render_depth(mesh, &posed.vertices, camera, Some(&vgrid))?;
        let frame = corrupt(
            &clean,
            config.noise_sigma,
            config.hole_fraction,
            config.seed.wrapping_add(vi as u64),
        )?;
        let (points, corr_gt) = match config.point_source {
            PointSource::Backproject => {
                let pts = backproject(&frame);
                let corr = frame.corr.as_ref().map(|c| {
                    pts.iter()
                        .map(|&(_, i)| [c.data[i][0] as f64, c.data[i][1] as f64])
                        .collect()
                });
                (pts.into_iter().map(|(p, _)| p).collect(), corr)
            }
            PointSource::Vertices => {
                let cam_verts: Vec<Point3<f64>> = posed
                    .vertices
                    .iter()
                    .map(|p| camera.extrinsics.apply(p))
                    .collect();
                let normals = vertex_normals(mesh, &cam_verts)?;
                let mut pts = Vec::new();
                let mut corr = Vec::new();
                for v in 0..cam_verts.len() {
                    if normals.valid[v] && normals.normals[v].z < 0.0 {
                        pts.push(cam_verts[v]);
                        corr.push(vgrid[v]);
                    }
                }
                (pts, Some(corr))
            }
        };
        views.push(SceneView {
            camera: camera.clone(),
            frame,
            points,
            corr_gt,
        });
    }
    Ok(Scene {
        views,
        gt_pose: Some(pose.clone()),
        point_source: config.point_source,
    })
}

// ---------------------------------------------------------------------------
// Binary depth frame: magic "DGND", u32 W, u32 H, f32 fx/fy/cx/cy, 12 x f32
// extrinsics (row-major R then t), u32 flags (bit 0: corr block present),
// W*H f32 depths, then the optional corr block (W*H x 2 f32 + W*H u8 mask).
// ---------------------------------------------------------------------------

const DGND_MAGIC: &[u8; 4] = b"DGND";

pub fn save_depth_frame(path: &Path, frame: &DepthFrame) -> Result<()> {
    frame.validate()?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(DGND_MAGIC)?;
    out.write_all(&(frame.camera.width as u32).to_le_bytes())?;
    out.write_all(&(frame.camera.height as u32).to_le_bytes())?;
    for v in [
        frame.camera.fx,
        frame.camera.fy,
        frame.camera.cx,
        frame.camera.cy,
    ] {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    let r = &frame.camera.extrinsics.rotation;
    for i in 0..3 {
        for j in 0..3 {
            out.write_all(&(r[(i, j)] as f32).to_le_bytes())?;
        }
    }
    for i in 0..3 {
        out.write_all(&(frame.camera.extrinsics.translation[i] as f32).to_le_bytes())?;
    }
    let flags: u32 = if frame.corr.is_some() { 1 } else { 0 };
    out.write_all(&flags.to_le_bytes())?;
    for &d in &frame.depth {
        out.write_all(&d.to_le_bytes())?;
    }
    if let Some(corr) = &frame.corr {
        for c in &corr.data {
            out.write_all(&c[0].to_le_bytes())?;
            out.write_all(&c[1].to_le_bytes())?;
        }
        for &m in &corr.mask {
            out.write_all(&[m as u8])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Nearest rotation matrix (polar projection); extrinsics are stored in f32
/// and need re-orthonormalization to satisfy the strict rigidity invariant.
fn reorthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.set_column(2, &(-u.column(2)));
        u2 * vt
    } else {
        r
    }
}

pub fn load_depth_frame(path: &Path) -> Result<DepthFrame> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut head = [0u8; 4];
    file.read_exact(&mut head).map_err(|_| Error::Truncated)?;
    if &head != DGND_MAGIC {
        return Err(Error::BadMagic { expected: "DGND" });
    }
    fn read_u32(f: &mut impl Read) -> Result<u32> {
        let mut buf = [0u8; 4];
        f.read_exact(&mut buf).map_err(|_| Error::Truncated)?;
        Ok(u32::from_le_bytes(buf))
    }
    fn read_f32(f: &mut impl Read) -> Result<f32> {
        let mut buf = [0u8; 4];
        f.read_exact(&mut buf).map_err(|_| Error::Truncated)?;
        Ok(f32::from_le_bytes(buf))
    }
    let w = read_u32(&mut file)? as usize;
    let h = read_u32(&mut file)? as usize;
    let fx = read_f32(&mut file)? as f64;
    let fy = read_f32(&mut file)? as f64;
    let cx = read_f32(&mut file)? as f64;
    let cy = read_f32(&mut file)? as f64;
    let mut rot = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            rot[(i, j)] = read_f32(&mut file)? as f64;
        }
    }
    let mut trans = Vector3::zeros();
    for i in 0..3 {
        trans[i] = read_f32(&mut file)? as f64;
    }
    if rotation_defect(&rot) > 1e-4 {
        return Err(Error::NonRigidExtrinsics);
    }
    let flags = read_u32(&mut file)?;
    let mut depth = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        depth.push(read_f32(&mut file)?);
    }
    let corr = if flags & 1 != 0 {
        let mut data = Vec::with_capacity(w * h);
        for _ in 0..w * h {
            let a = read_f32(&mut file)?;
            let b = read_f32(&mut file)?;
            data.push([a, b]);
        }
        let mut mask = vec![0u8; w * h];
        file.read_exact(&mut mask).map_err(|_| Error::Truncated)?;
        Some(CorrMap {
            data,
            mask: mask.into_iter().map(|m| m != 0).collect(),
        })
    } else {
        None
    };
    let frame = DepthFrame {
        camera: Camera {
            fx,
            fy,
            cx,
            cy,
            width: w,
            height: h,
            extrinsics: SimilarityTransform::rigid(reorthonormalize(&rot), trans),
        },
        depth,
        corr,
    };
    frame.validate()?;
    Ok(frame)
}

// ---------------------------------------------------------------------------
// Scene directory I/O
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SceneFile {
    point_source: PointSource,
    gt_pose: Option<PoseJson>,
    views: Vec<SceneViewFile>,
}

#[derive(Serialize, Deserialize)]
struct PoseJson {
    scale: f64,
    rot: [f64; 3],
    trans: [f64; 3],
    locals: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct SceneViewFile {
    frame: String,
    /// Stored only for vertex-sourced scenes; backprojected points are
    /// recomputed from the frame on load.
    points: Option<Vec<[f64; 3]>>,
    corr: Option<Vec<[f64; 2]>>,
}

pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut views = Vec::new();
    for (vi, view) in scene.views.iter().enumerate() {
        let name = format!("view_{vi:03}.dgnd");
        save_depth_frame(&dir.join(&name), &view.frame)?;
        let store_points = scene.point_source == PointSource::Vertices;
        views.push(SceneViewFile {
            frame: name,
            points: store_points
                .then(|| view.points.iter().map(|p| [p.x, p.y, p.z]).collect()),
            corr: if store_points {
                view.corr_gt.clone()
            } else {
                None
            },
        });
    }
    let file = SceneFile {
        point_source: scene.point_source,
        gt_pose: scene.gt_pose.as_ref().map(|p| PoseJson {
            scale: p.scale,
            rot: [p.rot.x, p.rot.y, p.rot.z],
            trans: [p.trans.x, p.trans.y, p.trans.z],
            locals: p.locals.iter().map(|w| [w.x, w.y, w.z]).collect(),
        }),
        views,
    };
    std::fs::write(dir.join("scene.json"), serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let file: SceneFile =
        serde_json::from_str(&std::fs::read_to_string(dir.join("scene.json"))?)?;
    let mut views = Vec::new();
    for vf in &file.views {
        let frame = load_depth_frame(&dir.join(&vf.frame))?;
        let (points, corr_gt) = match &vf.points {
            Some(pts) => (
                pts.iter().map(|p| Point3::new(p[0], p[1], p[2])).collect(),
                vf.corr.clone(),
            ),
            None => {
                let pts = backproject(&frame);
                let corr = frame.corr.as_ref().map(|c| {
                    pts.iter()
                        .map(|&(_, i)| [c.data[i][0] as f64, c.data[i][1] as f64])
                        .collect()
                });
                (pts.into_iter().map(|(p, _)| p).collect(), corr)
            }
        };
        views.push(SceneView {
            camera: frame.camera.clone(),
            frame,
            points,
            corr_gt,
        });
    }
    Ok(Scene {
        views,
        gt_pose: file.gt_pose.map(|p| PoseParams {
            scale: p.scale,
            rot: Vector3::from(p.rot),
            trans: Vector3::from(p.trans),
            locals: p.locals.into_iter().map(Vector3::from).collect(),
        }),
        point_source: file.point_source,
    })
}

/// Conventional asset file names inside a self-contained scene directory.
pub fn scene_asset_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join("mesh.obj"),
        dir.join("rig.json"),
        dir.join("embedding.json"),
    )
}
