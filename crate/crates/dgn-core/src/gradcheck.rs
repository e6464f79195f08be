//! Finite-difference gradient verification.
//!
//! Central differences with a per-coordinate step; used by unit tests, the
//! acceptance suite, and the `gradcheck` CLI subcommand.

/// Central finite differences of a scalar function at `x`.
///
/// The step for coordinate `i` is `eps * max(1, |x_i|)`.
pub fn central_diff<F>(f: &F, x: &[f64], eps: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let h = eps * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Max-norm relative error between two gradient vectors.
///
/// `max_i |a_i - b_i|` normalized by the larger of the two max norms, with a
/// small absolute floor so that exactly-zero gradients compare equal.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let scale = a
        .iter()
        .chain(b.iter())
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
        .max(1e-9);
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc.max((x - y).abs()))
        / scale
}

/// Outcome of one randomized gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: &'static str,
    pub configs: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<24} {:>3} configs  max rel err {:>10.3e}  tol {:>8.1e}  {}",
            self.name,
            self.configs,
            self.max_rel_err,
            self.tol,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

// ---------------------------------------------------------------------------
// Randomized verification suite over every differentiable operation
// ---------------------------------------------------------------------------

use nalgebra::{Matrix3, Point3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assets::two_part_bar;
use crate::dualgrid::{
    extension, extension_vjp, sampling, sampling_vjp, GridFeatureMap, ScatterPoint,
};
use crate::embedding::MeshEmbedding;
use crate::energy::{
    arap_term, icp_matches, icp_term, lifting_term, offset_from_estimate, smooth_l1, total_energy,
    EnergyWeights, EvalOptions, MvView,
};
use crate::kinematics::{
    fit_similarity_points, fit_similarity_vjp, rotation_exp, PartCorrespondence, PoseParams,
    SimilarityTransform, TransformGrad,
};
use crate::mesh::vertex_normals;
use crate::synth::{make_scene, Camera, PointSource, SceneConfig};

fn rand_cell(rng: &mut ChaCha8Rng, grid: usize) -> f64 {
    rng.random_range(0..grid - 1) as f64 + rng.random_range(0.1..0.45)
}

fn check_extension(rng: &mut ChaCha8Rng, configs: usize) -> GradCheckReport {
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let g = rng.random_range(6..14);
        let k = rng.random_range(2..=6usize.min(g));
        let n = rng.random_range(2..6);
        let points: Vec<ScatterPoint> = (0..n)
            .map(|_| ScatterPoint {
                m: [rand_cell(rng, g), rand_cell(rng, g)],
                f: (0..2).map(|_| rng.random_range(-2.0..2.0)).collect(),
            })
            .collect();
        let mut upstream = GridFeatureMap::zeros(g, 2);
        for v in upstream.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let grads = extension_vjp(&points, g, k, &upstream).unwrap();
        let x0: Vec<f64> = points
            .iter()
            .flat_map(|p| {
                let mut v = vec![p.m[0], p.m[1]];
                v.extend_from_slice(&p.f);
                v
            })
            .collect();
        let func = |x: &[f64]| {
            let pts: Vec<ScatterPoint> = x
                .chunks(4)
                .map(|c| ScatterPoint {
                    m: [c[0], c[1]],
                    f: c[2..].to_vec(),
                })
                .collect();
            let map = extension(&pts, g, k).unwrap();
            map.data
                .iter()
                .zip(&upstream.data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let fd = central_diff(&func, &x0, 1e-6 * g as f64);
        let analytic: Vec<f64> = grads
            .iter()
            .flat_map(|(df, dm)| {
                let mut v = vec![dm[0], dm[1]];
                v.extend_from_slice(df);
                v
            })
            .collect();
        worst = worst.max(max_rel_err(&analytic, &fd));
    }
    GradCheckReport {
        name: "extension_vjp",
        configs,
        max_rel_err: worst,
        tol: 1e-4,
    }
}

fn check_sampling(rng: &mut ChaCha8Rng, configs: usize) -> GradCheckReport {
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let g = rng.random_range(6..14);
        let k = rng.random_range(2..=6usize.min(g));
        let mut map = GridFeatureMap::zeros(g, 2);
        for v in map.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let queries: Vec<[f64; 2]> = (0..4)
            .map(|_| [rand_cell(rng, g), rand_cell(rng, g)])
            .collect();
        let upstream: Vec<Vec<f64>> = (0..queries.len())
            .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (dmap, dq) = sampling_vjp(&map, &queries, k, &upstream).unwrap();
        let dot = |out: &[Vec<f64>]| {
            out.iter()
                .zip(&upstream)
                .map(|(o, u)| o.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
        };
        let q0: Vec<f64> = queries.iter().flat_map(|q| q.to_vec()).collect();
        let fq = |x: &[f64]| {
            let qs: Vec<[f64; 2]> = x.chunks(2).map(|c| [c[0], c[1]]).collect();
            dot(&sampling(&map, &qs, k).unwrap())
        };
        let fd_q = central_diff(&fq, &q0, 1e-6 * g as f64);
        let aq: Vec<f64> = dq.iter().flat_map(|d| d.to_vec()).collect();
        worst = worst.max(max_rel_err(&aq, &fd_q));
        let fm = |x: &[f64]| {
            let m2 = GridFeatureMap {
                grid_size: g,
                channels: 2,
                data: x.to_vec(),
            };
            dot(&sampling(&m2, &queries, k).unwrap())
        };
        let fd_m = central_diff(&fm, &map.data, 1e-5);
        worst = worst.max(max_rel_err(&dmap.data, &fd_m));
    }
    GradCheckReport {
        name: "sampling_vjp",
        configs,
        max_rel_err: worst,
        tol: 1e-4,
    }
}

fn check_fit_similarity(rng: &mut ChaCha8Rng, configs: usize) -> GradCheckReport {
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let n = rng.random_range(5..15);
        let tgt: Vec<Point3<f64>> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                )
            })
            .collect();
        let truth = SimilarityTransform {
            scale: rng.random_range(0.6..1.6),
            rotation: rotation_exp(&Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0))),
            translation: Vector3::from_fn(|_, _| rng.random_range(-30.0..30.0)),
        };
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
            let moved: Vec<Point3<f64>> =
                x.chunks(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
            let t = fit_similarity_points(&moved, &tgt).unwrap();
            up.scale * t.scale
                + (up.rot.transpose() * t.rotation).trace()
                + up.trans.dot(&t.translation)
        };
        let fd = central_diff(&f, &x0, 1e-6);
        worst = worst.max(max_rel_err(&flat, &fd));
    }
    GradCheckReport {
        name: "fit_similarity_vjp",
        configs,
        max_rel_err: worst,
        tol: 1e-3,
    }
}

fn bar_embedding_for(mesh: &crate::mesh::RiggedMesh, grid: usize) -> MeshEmbedding {
    MeshEmbedding::from_coords(
        mesh.vertices
            .iter()
            .map(|p| [p.y, p.z + 0.3 * p.x])
            .collect(),
        grid,
    )
    .unwrap()
}

fn check_icp(rng: &mut ChaCha8Rng, configs: usize) -> GradCheckReport {
    let mesh = two_part_bar();
    let normals = vertex_normals(&mesh, &mesh.vertices).unwrap();
    let view_dir = Vector3::new(0.0, 0.0, 1.0);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let points: Vec<Point3<f64>> = (0..15)
            .map(|_| {
                Point3::new(
                    rng.random_range(-8.0..8.0),
                    rng.random_range(-5.0..65.0),
                    rng.random_range(-10.0..-4.0),
                )
            })
            .collect();
        let base = icp_term(&points, &mesh.vertices, &normals, &view_dir, 1.0, None).unwrap();
        let x0: Vec<f64> = mesh.vertices.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let f = |x: &[f64]| {
            let moved: Vec<Point3<f64>> =
                x.chunks(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
            icp_term(&points, &moved, &normals, &view_dir, 1.0, Some(&base.matches))
                .unwrap()
                .value
        };
        let fd = central_diff(&f, &x0, 1e-6);
        let flat: Vec<f64> = base
            .grad_vertices
            .iter()
            .flat_map(|g| [g.x, g.y, g.z])
            .collect();
        worst = worst.max(max_rel_err(&flat, &fd));
    }
    GradCheckReport {
        name: "icp_term",
        configs,
        max_rel_err: worst,
        tol: 1e-3,
    }
}

fn check_lifting(rng: &mut ChaCha8Rng, configs: usize) -> GradCheckReport {
    let mesh = two_part_bar();
    let emb = bar_embedding_for(&mesh, 16);
    let vgrid = emb.vertex_grid_coords().unwrap();
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let kernel = rng.random_range(3..6);
        let queries: Vec<[f64; 2]> = (0..5)
            .map(|_| {
                [
                    rng.random_range(2..12) as f64 + rng.random_range(0.1..0.45),
                    rng.random_range(2..12) as f64 + rng.random_range(0.1..0.45),
                ]
            })
            .collect();
        let points: Vec<Point3<f64>> = (0..5)
            .map(|_| {
                Point3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(0.0..60.0),
                    rng.random_range(-8.0..8.0),
                )
            })
            .collect();
        let base =
            lifting_term(&points, &queries, &vgrid, &mesh.vertices, 16, kernel, 1.0).unwrap();
        let x0: Vec<f64> = queries
            .iter()
            .flat_map(|q| q.to_vec())
            .chain(mesh.vertices.iter().flat_map(|p| vec![p.x, p.y, p.z]))
            .collect();
        let nq = queries.len() * 2;
        let f = |x: &[f64]| {
            let qs: Vec<[f64; 2]> = x[..nq].chunks(2).map(|c| [c[0], c[1]]).collect();
            let vs: Vec<Point3<f64>> = x[nq..]
                .chunks(3)
                .map(|c| Point3::new(c[0], c[1], c[2]))
                .collect();
            lifting_term(&points, &qs, &vgrid, &vs, 16, kernel, 1.0)
                .unwrap()
                .value
        };
        let fd = central_diff(&f, &x0, 1e-6);
        let analytic: Vec<f64> = base
            .grad_corr
            .iter()
            .flat_map(|g| g.to_vec())
            .chain(base.grad_vertices.iter().flat_map(|g| vec![g.x, g.y, g.z]))
            .collect();
        worst = worst.max(max_rel_err(&analytic, &fd));
    }
    GradCheckReport {
        name: "lifting_term",
        configs,
        max_rel_err: worst,
        tol: 1e-3,
    }
}

fn check_collision(rng: &mut ChaCha8Rng, configs: usize) -> GradCheckReport {
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let n = rng.random_range(4..8);
        let joints: Vec<Point3<f64>> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-6.0..6.0),
                    rng.random_range(-6.0..6.0),
                    rng.random_range(-6.0..6.0),
                )
            })
            .collect();
        let parents: Vec<Option<usize>> =
            (0..n).map(|j| if j == 0 { None } else { Some(j - 1) }).collect();
        let t_col = 5.0;
        let (_, grads) = crate::energy::collision_term(&joints, &parents, t_col);
        let x0: Vec<f64> = joints.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let f = |x: &[f64]| {
            let moved: Vec<Point3<f64>> =
                x.chunks(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
            crate::energy::collision_term(&moved, &parents, t_col).0
        };
        let fd = central_diff(&f, &x0, 1e-7);
        let flat: Vec<f64> = grads.iter().flat_map(|g| [g.x, g.y, g.z]).collect();
        // Hinge boundaries are measure zero; rare straddles would fail FD,
        // so keep the step tiny relative to pair distances.
        worst = worst.max(max_rel_err(&flat, &fd));
    }
    GradCheckReport {
        name: "collision_term",
        configs,
        max_rel_err: worst,
        tol: 1e-3,
    }
}

fn check_arap(rng: &mut ChaCha8Rng, configs: usize) -> GradCheckReport {
    let mesh = two_part_bar();
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let noisy: Vec<Point3<f64>> = mesh
            .vertices
            .iter()
            .map(|p| {
                Point3::new(
                    p.x + rng.random_range(-2.0..2.0),
                    p.y + rng.random_range(-2.0..2.0),
                    p.z + rng.random_range(-2.0..2.0),
                )
            })
            .collect();
        let term = arap_term(&mesh, &noisy).unwrap();
        let x0: Vec<f64> = noisy.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let f = |x: &[f64]| {
            let moved: Vec<Point3<f64>> =
                x.chunks(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
            arap_term(&mesh, &moved).unwrap().value
        };
        let fd = central_diff(&f, &x0, 1e-5);
        let flat: Vec<f64> = term.grad.iter().flat_map(|g| [g.x, g.y, g.z]).collect();
        worst = worst.max(max_rel_err(&flat, &fd));
    }
    GradCheckReport {
        name: "arap_term",
        configs,
        max_rel_err: worst,
        tol: 1e-3,
    }
}

fn check_offset(rng: &mut ChaCha8Rng, configs: usize) -> GradCheckReport {
    let mesh = two_part_bar();
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let noisy: Vec<Point3<f64>> = mesh
            .vertices
            .iter()
            .map(|p| {
                Point3::new(
                    p.x + rng.random_range(-2.0..2.0),
                    p.y + rng.random_range(-2.0..2.0),
                    p.z + rng.random_range(-2.0..2.0),
                )
            })
            .collect();
        let (_, grads) = offset_from_estimate(&mesh, &noisy).unwrap();
        let x0: Vec<f64> = noisy.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let f = |x: &[f64]| {
            let moved: Vec<Point3<f64>> =
                x.chunks(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
            offset_from_estimate(&mesh, &moved).unwrap().0
        };
        let fd = central_diff(&f, &x0, 1e-5);
        let flat: Vec<f64> = grads.iter().flat_map(|g| [g.x, g.y, g.z]).collect();
        worst = worst.max(max_rel_err(&flat, &fd));
    }
    GradCheckReport {
        name: "offset_term",
        configs,
        max_rel_err: worst,
        tol: 1e-4,
    }
}

fn check_multiview(rng: &mut ChaCha8Rng, configs: usize) -> GradCheckReport {
    let mesh = two_part_bar();
    let emb = bar_embedding_for(&mesh, 16);
    let vgrid = emb.vertex_grid_coords().unwrap();
    let ext0 = SimilarityTransform::identity();
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let ext1 = SimilarityTransform::rigid(
            rotation_exp(&Vector3::from_fn(|_, _| rng.random_range(-0.8..0.8))),
            Vector3::from_fn(|_, _| rng.random_range(-20.0..20.0)),
        );
        let mut v1: Vec<Point3<f64>> = mesh.vertices.iter().map(|p| ext1.apply(p)).collect();
        for p in v1.iter_mut() {
            p.x += rng.random_range(-0.5..0.5);
            p.y += rng.random_range(-0.5..0.5);
            p.z += rng.random_range(-0.5..0.5);
        }
        let views = vec![
            MvView {
                vertices_cam: &mesh.vertices,
                extrinsics: &ext0,
                points: &[],
                corr: None,
                is_reference: true,
            },
            MvView {
                vertices_cam: &v1,
                extrinsics: &ext1,
                points: &[],
                corr: None,
                is_reference: false,
            },
        ];
        let term = crate::energy::multiview_term(&mesh, &views, &vgrid, 16, 4, 1.0).unwrap();
        // Frozen-median objective, as differentiated by the implementation.
        let inv1 = ext1.inverse();
        let canon1: Vec<Point3<f64>> = v1.iter().map(|p| inv1.apply(p)).collect();
        let medians: Vec<Point3<f64>> = mesh
            .vertices
            .iter()
            .zip(&canon1)
            .map(|(a, b)| Point3::from((a.coords + b.coords) / 2.0))
            .collect();
        let f = |x: &[f64]| {
            let moved: Vec<Point3<f64>> =
                x.chunks(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
            let canon: Vec<Point3<f64>> = moved.iter().map(|p| inv1.apply(p)).collect();
            let mut total = 0.0;
            for (c, m) in mesh.vertices.iter().zip(&medians) {
                total += smooth_l1(&(c - m), 1.0);
            }
            for (c, m) in canon.iter().zip(&medians) {
                total += smooth_l1(&(c - m), 1.0);
            }
            total / (2.0 * mesh.vertices.len() as f64)
        };
        let x0: Vec<f64> = v1.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let fd = central_diff(&f, &x0, 1e-6);
        let flat: Vec<f64> = term.grad_vertices[1]
            .iter()
            .flat_map(|g| [g.x, g.y, g.z])
            .collect();
        worst = worst.max(max_rel_err(&flat, &fd));
    }
    GradCheckReport {
        name: "multiview_term",
        configs,
        max_rel_err: worst,
        tol: 1e-3,
    }
}

fn check_total_energy(rng: &mut ChaCha8Rng, configs: usize) -> GradCheckReport {
    let mesh = two_part_bar();
    let emb = bar_embedding_for(&mesh, 16);
    let cams = vec![Camera::look_at(
        Point3::new(0.0, 30.0, 300.0),
        Point3::new(0.0, 30.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        120.0,
        48,
        48,
    )];
    let gt = PoseParams::rest(mesh.part_count());
    let scene = make_scene(
        &mesh,
        &emb,
        &gt,
        &cams,
        &SceneConfig {
            point_source: PointSource::Backproject,
            ..Default::default()
        },
    )
    .unwrap();
    let corr: Vec<Vec<[f64; 2]>> = scene
        .views
        .iter()
        .map(|v| v.corr_gt.clone().unwrap())
        .collect();
    let weights = EnergyWeights::default();
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let mut pose = PoseParams::rest(mesh.part_count());
        pose.scale = rng.random_range(0.9..1.1);
        pose.rot = Vector3::from_fn(|_, _| rng.random_range(-0.15..0.15));
        pose.trans = Vector3::from_fn(|_, _| rng.random_range(-6.0..6.0));
        pose.locals[0] = Vector3::from_fn(|_, _| rng.random_range(-0.2..0.2));
        let matches = icp_matches(&mesh, &scene, &pose, weights.beta).unwrap();
        let opts = EvalOptions {
            kernel: 4,
            icp_matches: Some(&matches),
            corr_grads: false,
        };
        let report = total_energy(&mesh, &emb, &scene, &pose, &corr, &weights, &opts).unwrap();
        let x0 = pose.to_flat();
        let f = |x: &[f64]| {
            let p = PoseParams::from_flat(x, mesh.part_count()).unwrap();
            total_energy(&mesh, &emb, &scene, &p, &corr, &weights, &opts)
                .unwrap()
                .total
        };
        let fd = central_diff(&f, &x0, 1e-6);
        worst = worst.max(max_rel_err(&report.grad_pose, &fd));
    }
    GradCheckReport {
        name: "total_energy",
        configs,
        max_rel_err: worst,
        tol: 1e-3,
    }
}

/// Run every gradient check at `configs` random configurations each.
pub fn run_suite(seed: u64, configs: usize) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check_extension(&mut rng, configs),
        check_sampling(&mut rng, configs),
        check_fit_similarity(&mut rng, configs),
        check_icp(&mut rng, configs),
        check_lifting(&mut rng, configs),
        check_collision(&mut rng, configs),
        check_arap(&mut rng, configs),
        check_offset(&mut rng, configs),
        check_multiview(&mut rng, configs),
        check_total_energy(&mut rng, configs),
    ]
}
