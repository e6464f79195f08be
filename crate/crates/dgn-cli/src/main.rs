//! Command-line front end for the dual-grid hand registration toolkit.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use nalgebra::{Point3, Vector3};

use dgn_core::assets;
use dgn_core::dualgrid::{self, GridFeatureMap, ScatterPoint};
use dgn_core::embedding::{compute_embedding, MeshEmbedding};
use dgn_core::energy::EnergyWeights;
use dgn_core::evalkit;
use dgn_core::fitter::{self, CorrMode, FitConfig};
use dgn_core::gradcheck;
use dgn_core::kinematics::PoseParams;
use dgn_core::mesh;
use dgn_core::synth::{self, Camera, PointSource, SceneConfig};

#[derive(Parser)]
#[command(
    name = "dgn",
    about = "Dual-grid hand mesh registration: embedding, synthesis, fitting, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the 2D mesh embedding (geodesics + MDS + SMACOF).
    Embed {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        rig: PathBuf,
        #[arg(long, default_value_t = 16)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Render a multi-view synthetic scene with ground truth.
    Synth {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        rig: PathBuf,
        #[arg(long)]
        emb: PathBuf,
        /// Pose file; omit for the rest pose.
        #[arg(long)]
        pose: Option<PathBuf>,
        /// Camera rig JSON (array of cameras).
        #[arg(long)]
        cams: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0.0)]
        holes: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Energy-facing point source: backproject | vertices.
        #[arg(long, default_value = "backproject")]
        points: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the pose of a self-contained scene directory.
    Fit {
        #[arg(long)]
        scene: PathBuf,
        /// rest | gt | perturb:ROT_DEG,TRANS_MM
        #[arg(long, default_value = "rest")]
        init: String,
        /// gt | icp | free
        #[arg(long, default_value = "icp")]
        mode: String,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Optional weights JSON overriding the defaults.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Per-iteration JSONL log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        kernel: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare fitted poses in a results directory against ground truth.
    Eval {
        /// Directory of <frame_id>.theta.json files.
        #[arg(long)]
        results: PathBuf,
        /// Directory of <frame_id>/ scene subdirectories.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also render shaded preview images per frame.
        #[arg(long, default_value_t = false)]
        previews: bool,
    },
    /// Finite-difference verification of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        configs: usize,
        /// Write a golden feature-map file here.
        #[arg(long)]
        golden: Option<PathBuf>,
        /// Compare against a previously written golden file.
        #[arg(long)]
        check: Option<PathBuf>,
    },
    /// Generate the procedural hand assets (mesh + rig).
    MakeHand {
        #[arg(long)]
        out: PathBuf,
        /// Generate the small two-finger rig instead of the full hand.
        #[arg(long, default_value_t = false)]
        mini: bool,
    },
    /// Generate an orbiting camera rig file.
    MakeCams {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        views: usize,
        /// Orbit target (world mm).
        #[arg(long, num_args = 3, default_values_t = [40.0, 60.0, 12.0])]
        target: Vec<f64>,
        #[arg(long, default_value_t = 450.0)]
        distance: f64,
        #[arg(long, default_value_t = 240.0)]
        fx: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Total azimuth span of the orbit in degrees.
        #[arg(long, default_value_t = 90.0)]
        span: f64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Embed {
            mesh: mesh_path,
            rig,
            grid,
            out,
            max_iters,
            tol,
        } => {
            let rigged = mesh::load_rigged_mesh(&mesh_path, &rig)?;
            println!(
                "loaded mesh: {} vertices, {} faces, {} parts",
                rigged.vertex_count(),
                rigged.faces.len(),
                rigged.part_count()
            );
            let (embedding, smacof) = compute_embedding(&rigged, grid, max_iters, tol)?;
            embedding.save(&out)?;
            println!(
                "embedding: grid {}x{}, stress {:.6e} -> {:.6e} in {} iterations{}",
                grid,
                grid,
                smacof.stress_trace.first().unwrap(),
                smacof.stress_trace.last().unwrap(),
                smacof.iterations,
                if smacof.converged { "" } else { " (not converged)" }
            );
            println!("wrote {}", out.display());
        }
        Command::Synth {
            mesh: mesh_path,
            rig,
            emb,
            pose,
            cams,
            noise,
            holes,
            seed,
            points,
            out,
        } => {
            let rigged = mesh::load_rigged_mesh(&mesh_path, &rig)?;
            let embedding = MeshEmbedding::load(&emb)?;
            let cameras = synth::load_camera_rig(&cams)?;
            let gt_pose = match pose {
                Some(p) => PoseParams::load(&p)?,
                None => PoseParams::rest(rigged.part_count()),
            };
            let point_source = match points.as_str() {
                "backproject" => PointSource::Backproject,
                "vertices" => PointSource::Vertices,
                other => bail!("unknown point source {other:?}"),
            };
            let scene = synth::make_scene(
                &rigged,
                &embedding,
                &gt_pose,
                &cameras,
                &SceneConfig {
                    noise_sigma: noise,
                    hole_fraction: holes,
                    seed,
                    point_source,
                },
            )?;
            synth::save_scene(&out, &scene)?;
            // Make the scene self-contained for `fit`.
            let (mesh_copy, rig_copy, emb_copy) = synth::scene_asset_paths(&out);
            mesh::save_obj(&mesh_copy, &rigged.vertices, &rigged.faces)?;
            mesh::save_rig(&rig_copy, &rigged.joints, &rigged.skin_weights)?;
            embedding.save(&emb_copy)?;
            for (i, view) in scene.views.iter().enumerate() {
                println!(
                    "view {i}: {} valid pixels, {} points",
                    view.frame.valid_count(),
                    view.points.len()
                );
            }
            println!("wrote scene to {}", out.display());
        }
        Command::Fit {
            scene: scene_dir,
            init,
            mode,
            iters,
            tol,
            weights,
            log,
            out,
            kernel,
            seed,
        } => {
            let (mesh_path, rig_path, emb_path) = synth::scene_asset_paths(&scene_dir);
            let rigged = mesh::load_rigged_mesh(&mesh_path, &rig_path)
                .context("scene directory must contain mesh.obj and rig.json")?;
            let embedding = MeshEmbedding::load(&emb_path)?;
            let scene = synth::load_scene(&scene_dir)?;
            let corr_mode = match mode.as_str() {
                "gt" => CorrMode::FixedGt,
                "icp" => CorrMode::IcpReestimate,
                "free" => CorrMode::FreeVariables,
                other => bail!("unknown correspondence mode {other:?}"),
            };
            let init_pose = parse_init(&init, &scene, rigged.part_count(), seed)?;
            let mut config = FitConfig {
                max_iters: iters,
                tol,
                corr_mode,
                kernel,
                seed,
                ..Default::default()
            };
            if let Some(w) = weights {
                config.weights = EnergyWeights::load(&w)?;
            }
            let result = fitter::fit(&rigged, &embedding, &scene, &init_pose, &config)?;
            if let Some(log_path) = log {
                let mut lines = String::new();
                for entry in &result.trace {
                    lines.push_str(&serde_json::to_string(entry)?);
                    lines.push('\n');
                }
                std::fs::write(&log_path, lines)?;
            }
            result.pose.save(&out)?;
            let last = result.trace.last().unwrap();
            println!(
                "fit: {} iterations, total {:.6e}, grad norm {:.3e}, {:.2}s{}",
                last.iter,
                last.total,
                last.grad_norm,
                result.wall_time,
                if result.converged { ", converged" } else { "" }
            );
            if let Some(gt) = &scene.gt_pose {
                let est = fitter::pose_vertices(&rigged, &result.pose)?;
                let truth = fitter::pose_vertices(&rigged, gt)?;
                let err = est
                    .iter()
                    .zip(&truth)
                    .map(|(a, b)| (a - b).norm())
                    .sum::<f64>()
                    / est.len() as f64;
                println!("mean vertex error vs ground truth: {err:.3} mm");
            }
            println!("wrote {}", out.display());
        }
        Command::Eval {
            results,
            gt,
            out,
            previews,
        } => {
            let mut estimates = Vec::new();
            for entry in std::fs::read_dir(&results)? {
                let path = entry?.path();
                let name = path.file_name().unwrap().to_string_lossy().to_string();
                if let Some(id) = name.strip_suffix(".theta.json") {
                    estimates.push((id.to_string(), PoseParams::load(&path)?));
                }
            }
            estimates.sort_by(|a, b| a.0.cmp(&b.0));
            if estimates.is_empty() {
                bail!("no <id>.theta.json files in {}", results.display());
            }
            let mut gts = Vec::new();
            let mut first_scene: Option<(PathBuf, synth::Scene)> = None;
            for (id, _) in &estimates {
                let dir = gt.join(id);
                let scene = synth::load_scene(&dir)
                    .with_context(|| format!("loading gt scene {}", dir.display()))?;
                let pose = scene
                    .gt_pose
                    .clone()
                    .with_context(|| format!("scene {id} has no ground truth pose"))?;
                gts.push((id.clone(), pose));
                if first_scene.is_none() {
                    first_scene = Some((dir, scene));
                }
            }
            let (first_dir, first) = first_scene.unwrap();
            let (mesh_path, rig_path, _) = synth::scene_asset_paths(&first_dir);
            let rigged = mesh::load_rigged_mesh(&mesh_path, &rig_path)?;
            let frames = evalkit::pair_by_id(estimates, gts)?;
            let metrics = evalkit::evaluate_batch(&rigged, &frames)?;
            evalkit::write_report(&out, &metrics)?;
            if previews {
                let prev_dir = out.join("previews");
                std::fs::create_dir_all(&prev_dir)?;
                let camera = &first.views[0].camera;
                for frame in &frames {
                    evalkit::write_preview(
                        &prev_dir.join(format!("{}_estimate.png", frame.id)),
                        &rigged,
                        &frame.estimate,
                        camera,
                    )?;
                    evalkit::write_preview(
                        &prev_dir.join(format!("{}_gt.png", frame.id)),
                        &rigged,
                        &frame.gt,
                        camera,
                    )?;
                }
            }
            println!(
                "{} frames: mean joint error {:.3} mm, mean vertex error {:.3} mm",
                metrics.frames.len(),
                metrics.mean_joint_err,
                metrics.mean_vertex_err
            );
            println!("wrote report to {}", out.display());
        }
        Command::Gradcheck {
            seed,
            configs,
            golden,
            check,
        } => {
            let reports = gradcheck::run_suite(seed, configs);
            let mut failed = false;
            for report in &reports {
                println!("{report}");
                failed |= !report.passed();
            }
            if let Some(dir) = golden {
                std::fs::create_dir_all(&dir)?;
                let map = golden_map(seed);
                dualgrid::save_feature_map(&dir.join("extension.dgnf"), &map)?;
                println!("wrote golden feature map to {}", dir.display());
            }
            if let Some(dir) = check {
                let expected = dualgrid::load_feature_map(&dir.join("extension.dgnf"))?;
                let map = golden_map(seed);
                let max_diff = map
                    .data
                    .iter()
                    .zip(&expected.data)
                    .map(|(a, b)| (*a as f32 - *b as f32).abs())
                    .fold(0.0f32, f32::max);
                println!("golden feature map max deviation: {max_diff:e}");
                if max_diff > 0.0 {
                    bail!("golden file mismatch");
                }
            }
            if failed {
                bail!("gradient checks failed");
            }
        }
        Command::MakeHand { out, mini } => {
            std::fs::create_dir_all(&out)?;
            let rigged = if mini {
                assets::mini_hand()
            } else {
                assets::hand_mesh()
            };
            let name = if mini { "mini" } else { "hand" };
            let mesh_path = out.join(format!("{name}.obj"));
            let rig_path = out.join(format!("{name}.rig.json"));
            mesh::save_obj(&mesh_path, &rigged.vertices, &rigged.faces)?;
            mesh::save_rig(&rig_path, &rigged.joints, &rigged.skin_weights)?;
            println!(
                "wrote {} ({} vertices, {} parts) and {}",
                mesh_path.display(),
                rigged.vertex_count(),
                rigged.part_count(),
                rig_path.display()
            );
        }
        Command::MakeCams {
            out,
            views,
            target,
            distance,
            fx,
            size,
            span,
        } => {
            let target = Point3::new(target[0], target[1], target[2]);
            let cams = orbit_cameras(target, distance, fx, size, views, span);
            synth::save_camera_rig(&out, &cams)?;
            println!("wrote {} cameras to {}", views, out.display());
        }
    }
    Ok(())
}

fn parse_init(spec: &str, scene: &synth::Scene, parts: usize, seed: u64) -> Result<PoseParams> {
    if spec == "rest" {
        return Ok(PoseParams::rest(parts));
    }
    let gt = || {
        scene
            .gt_pose
            .clone()
            .context("scene carries no ground-truth pose")
    };
    if spec == "gt" {
        return gt();
    }
    if let Some(rest) = spec.strip_prefix("perturb:") {
        let parts_spec: Vec<&str> = rest.split(',').collect();
        if parts_spec.len() != 2 {
            bail!("expected perturb:ROT_DEG,TRANS_MM");
        }
        let rot: f64 = parts_spec[0].parse()?;
        let trans: f64 = parts_spec[1].parse()?;
        return Ok(fitter::perturb_pose(&gt()?, rot, trans, seed));
    }
    bail!("unknown init {spec:?} (use rest | gt | perturb:ROT,TRANS)")
}

/// Cameras on an azimuth arc around the target, all looking at it.
fn orbit_cameras(
    target: Point3<f64>,
    distance: f64,
    fx: f64,
    size: usize,
    views: usize,
    span_deg: f64,
) -> Vec<Camera> {
    (0..views)
        .map(|i| {
            let t = if views > 1 {
                i as f64 / (views - 1) as f64 - 0.5
            } else {
                0.0
            };
            let az = (t * span_deg).to_radians();
            let eye = Point3::new(
                target.x + distance * az.sin(),
                target.y,
                target.z + distance * az.cos(),
            );
            Camera::look_at(eye, target, Vector3::new(0.0, 1.0, 0.0), fx, size, size)
        })
        .collect()
}

/// Deterministic feature map used for the gradcheck golden file.
fn golden_map(seed: u64) -> GridFeatureMap {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x600D);
    let points: Vec<ScatterPoint> = (0..24)
        .map(|_| ScatterPoint {
            m: [rng.random_range(0.0..15.0), rng.random_range(0.0..15.0)],
            f: (0..3)
                .map(|_| (rng.random_range(-4.0..4.0) as f32) as f64)
                .collect(),
        })
        .collect();
    dualgrid::extension(&points, 16, 8).expect("golden extension")
}
