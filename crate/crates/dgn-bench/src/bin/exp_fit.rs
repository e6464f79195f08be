use dgn_core::embedding::MeshEmbedding;
use dgn_core::energy::EnergyWeights;
use dgn_core::fitter::{fit, perturb_pose, pose_vertices, CorrMode, FitConfig};
use dgn_core::mesh::load_rigged_mesh;
use dgn_core::synth::{load_scene, scene_asset_paths};
use std::path::Path;

fn main() {
    let dir = Path::new("/tmp/scene1");
    let (m, r, e) = scene_asset_paths(dir);
    let mesh = load_rigged_mesh(&m, &r).unwrap();
    let emb = MeshEmbedding::load(&e).unwrap();
    let scene = load_scene(dir).unwrap();
    let gt = scene.gt_pose.clone().unwrap();
    let gt_verts = pose_vertices(&mesh, &gt).unwrap();
    let args: Vec<String> = std::env::args().collect();
    let beta: f64 = args[1].parse().unwrap();
    let alpha: f64 = args[2].parse().unwrap();
    let rematch: usize = args[3].parse().unwrap();
    let iters: usize = args[4].parse().unwrap();
    let mode = match args.get(5).map(|s| s.as_str()) {
        Some("gt") => CorrMode::FixedGt,
        _ => CorrMode::IcpReestimate,
    };
    for seed in 1..=6u64 {
        let init = perturb_pose(&gt, 15.0, 20.0, seed);
        let config = FitConfig {
            max_iters: iters,
            tol: 1e-10,
            rematch_period: rematch,
            weights: EnergyWeights { alpha, beta, ..Default::default() },
            corr_mode: mode,
            ..Default::default()
        };
        let t0 = std::time::Instant::now();
        let res = fit(&mesh, &emb, &scene, &init, &config).unwrap();
        let v = pose_vertices(&mesh, &res.pose).unwrap();
        let err = v.iter().zip(&gt_verts).map(|(a, b)| (a - b).norm()).sum::<f64>() / v.len() as f64;
        println!("seed {seed}: err {err:.3} mm  iters {}  {:.1}s", res.trace.len() - 1, t0.elapsed().as_secs_f64());
    }
}
