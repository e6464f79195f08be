//! Metrics and reporting: mean joint position error, percentage of success
//! frames, mean vertex error, and shaded preview images.

use std::io::Write;
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::pose_vertices;
use crate::kinematics::{fk_compose, lbs, PoseParams};
use crate::mesh::RiggedMesh;
use crate::synth::{render_shading, Camera};

/// Euclidean distance per joint between prediction and ground truth.
pub fn joint_error(pred: &[Point3<f64>], gt: &[Point3<f64>]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "joints",
            got: pred.len(),
            expected: gt.len(),
        });
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).norm()).collect())
}

/// Fraction of frames whose maximum joint error stays within each threshold.
/// Thresholds must be sorted ascending; the curve is non-decreasing.
pub fn success_frames(max_errors: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if max_errors.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::BadConfig("thresholds must be sorted ascending".into()));
    }
    let n = max_errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hits = max_errors.iter().filter(|&&e| e <= t).count();
            (t, hits as f64 / n)
        })
        .collect())
}

/// 5 mm to 80 mm in 5 mm steps.
pub fn default_thresholds() -> Vec<f64> {
    (1..=16).map(|i| 5.0 * i as f64).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub id: String,
    pub mean_joint_err: f64,
    pub max_joint_err: f64,
    pub mean_vertex_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean joint position error over all joints and frames (mm).
    pub mean_joint_err: f64,
    /// `(threshold mm, fraction of success frames)`.
    pub success_curve: Vec<(f64, f64)>,
    /// Mean vertex error over all vertices and frames (mm).
    pub mean_vertex_err: f64,
    pub frames: Vec<FrameMetrics>,
}

/// One frame of a batch: estimate and ground truth poses under a shared id.
#[derive(Debug, Clone)]
pub struct FramePair {
    pub id: String,
    pub estimate: PoseParams,
    pub gt: PoseParams,
}

/// Align result and ground-truth batches by frame id.
pub fn pair_by_id(
    results: Vec<(String, PoseParams)>,
    gts: Vec<(String, PoseParams)>,
) -> Result<Vec<FramePair>> {
    let mut out = Vec::with_capacity(results.len());
    for (id, estimate) in results {
        let gt = gts
            .iter()
            .find(|(gid, _)| *gid == id)
            .map(|(_, g)| g.clone())
            .ok_or_else(|| Error::FrameIdMismatch(id.clone(), "ground truth"))?;
        out.push(FramePair { id, estimate, gt });
    }
    Ok(out)
}

/// Batch metrics over aligned frames.
pub fn evaluate_batch(mesh: &RiggedMesh, frames: &[FramePair]) -> Result<Metrics> {
    if frames.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut per_frame = Vec::with_capacity(frames.len());
    let mut sums = Vec::with_capacity(frames.len());
    for frame in frames {
        let est = lbs(mesh, &fk_compose(mesh, &frame.estimate)?)?;
        let truth = lbs(mesh, &fk_compose(mesh, &frame.gt)?)?;
        let jerr = joint_error(&est.joints, &truth.joints)?;
        let verr: Vec<f64> = est
            .vertices
            .iter()
            .zip(&truth.vertices)
            .map(|(a, b)| (a - b).norm())
            .collect();
        sums.push((
            frame.id.clone(),
            jerr.iter().sum::<f64>(),
            jerr.len(),
            verr.iter().sum::<f64>(),
            verr.len(),
        ));
        per_frame.push(FrameMetrics {
            id: frame.id.clone(),
            mean_joint_err: jerr.iter().sum::<f64>() / jerr.len() as f64,
            max_joint_err: jerr.iter().fold(0.0, |a: f64, &b| a.max(b)),
            mean_vertex_err: verr.iter().sum::<f64>() / verr.len() as f64,
        });
    }
    // Aggregate in id-sorted order so the totals are exactly invariant
    // under frame reordering.
    sums.sort_by(|a, b| a.0.cmp(&b.0));
    let (mut joint_sum, mut joint_count, mut vertex_sum, mut vertex_count) = (0.0, 0, 0.0, 0);
    for (_, js, jc, vs, vc) in &sums {
        joint_sum += js;
        joint_count += jc;
        vertex_sum += vs;
        vertex_count += vc;
    }
    let mut sorted_max: Vec<(String, f64)> = per_frame
        .iter()
        .map(|f| (f.id.clone(), f.max_joint_err))
        .collect();
    sorted_max.sort_by(|a, b| a.0.cmp(&b.0));
    let sorted_errors: Vec<f64> = sorted_max.into_iter().map(|(_, e)| e).collect();
    Ok(Metrics {
        mean_joint_err: joint_sum / joint_count as f64,
        success_curve: success_frames(&sorted_errors, &default_thresholds())?,
        mean_vertex_err: vertex_sum / vertex_count as f64,
        frames: per_frame,
    })
}

/// Write `metrics.json`, `success_curve.csv`, and `frames.jsonl`.
pub fn write_report(out_dir: &Path, metrics: &Metrics) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(metrics)?,
    )?;
    let mut csv = String::from("threshold_mm,fraction\n");
    for (t, f) in &metrics.success_curve {
        csv.push_str(&format!("{t},{f}\n"));
    }
    std::fs::write(out_dir.join("success_curve.csv"), csv)?;
    let mut jsonl = std::io::BufWriter::new(std::fs::File::create(out_dir.join("frames.jsonl"))?);
    for frame in &metrics.frames {
        serde_json::to_writer(&mut jsonl, frame)?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;
    Ok(())
}

/// Shaded grayscale preview of a posed mesh, written as a PNG.
pub fn write_preview(
    path: &Path,
    mesh: &RiggedMesh,
    pose: &PoseParams,
    camera: &Camera,
) -> Result<()> {
    let posed = pose_vertices(mesh, pose)?;
    let shade = render_shading(mesh, &posed, camera)?;
    let img = image::GrayImage::from_raw(camera.width as u32, camera.height as u32, shade)
        .ok_or(Error::BadMapShape)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::BadConfig(format!("png write failed: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::two_part_bar;
    use crate::fitter::perturb_pose;
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn joint_error_basics() {
        let gt = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 1.0, 1.0)];
        let same = joint_error(&gt, &gt).unwrap();
        assert!(same.iter().all(|&e| e == 0.0));
        let pred = vec![Point3::new(3.0, 4.0, 0.0), Point3::new(1.0, 1.0, 1.0)];
        let err = joint_error(&pred, &gt).unwrap();
        assert!((err[0] - 5.0).abs() < 1e-12);
        assert_eq!(err[1], 0.0);
        // Mean equals an independent sum/J recomputation.
        let mean = err.iter().sum::<f64>() / err.len() as f64;
        let mut acc = 0.0;
        for e in &err {
            acc += e;
        }
        assert!((mean - acc / 2.0).abs() < 1e-15);
    }

    #[test]
    fn success_curve_shapes() {
        let all_zero = vec![0.0; 5];
        let curve = success_frames(&all_zero, &default_thresholds()).unwrap();
        assert!(curve.iter().all(|&(_, f)| f == 1.0));
        let single = vec![25.0];
        let curve = success_frames(&single, &[20.0, 30.0]).unwrap();
        assert_eq!(curve[0].1, 0.0);
        assert_eq!(curve[1].1, 1.0);
        assert!(matches!(success_frames(&[], &[5.0]), Err(Error::EmptyBatch)));
        // Random errors against brute-force counting.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let errors: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..90.0)).collect();
        let thresholds = default_thresholds();
        let curve = success_frames(&errors, &thresholds).unwrap();
        for (t, f) in &curve {
            let mut count = 0usize;
            for e in &errors {
                if e <= t {
                    count += 1;
                }
            }
            assert_eq!(*f, count as f64 / 200.0);
        }
        for w in curve.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn batch_metrics_roundtrip_and_invariance() {
        let mesh = two_part_bar();
        let gt = PoseParams::rest(mesh.part_count());
        let frames: Vec<FramePair> = (0..6)
            .map(|i| FramePair {
                id: format!("frame_{i:03}"),
                estimate: perturb_pose(&gt, 10.0, 10.0, i),
                gt: gt.clone(),
            })
            .collect();
        let metrics = evaluate_batch(&mesh, &frames).unwrap();
        assert!(metrics.mean_joint_err > 0.0);
        for w in metrics.success_curve.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
        // Frame order does not change the aggregates.
        let mut reversed = frames.clone();
        reversed.reverse();
        let metrics2 = evaluate_batch(&mesh, &reversed).unwrap();
        assert_eq!(metrics.mean_joint_err, metrics2.mean_joint_err);
        assert_eq!(metrics.mean_vertex_err, metrics2.mean_vertex_err);

        // Report files round-trip consistently.
        let dir = std::env::temp_dir().join(format!("dgn_eval_{}", std::process::id()));
        write_report(&dir, &metrics).unwrap();
        let loaded: Metrics =
            serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap())
                .unwrap();
        let mut joint_sum = 0.0;
        for line in std::fs::read_to_string(dir.join("frames.jsonl")).unwrap().lines() {
            let f: FrameMetrics = serde_json::from_str(line).unwrap();
            joint_sum += f.mean_joint_err;
        }
        assert!((joint_sum / 6.0 - loaded.mean_joint_err).abs() < 1e-12);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mismatched_ids_error() {
        let gt = PoseParams::rest(2);
        let res = pair_by_id(
            vec![("a".into(), gt.clone())],
            vec![("b".into(), gt.clone())],
        );
        assert!(matches!(res, Err(Error::FrameIdMismatch(..))));
    }

    #[test]
    fn preview_is_byte_identical_across_runs() {
        let mesh = two_part_bar();
        let pose = PoseParams::rest(mesh.part_count());
        let cam = Camera::look_at(
            Point3::new(0.0, 30.0, 300.0),
            Point3::new(0.0, 30.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            120.0,
            64,
            64,
        );
        let dir = std::env::temp_dir().join(format!("dgn_prev_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.png");
        let p2 = dir.join("b.png");
        write_preview(&p1, &mesh, &pose, &cam).unwrap();
        write_preview(&p2, &mesh, &pose, &cam).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }
}
