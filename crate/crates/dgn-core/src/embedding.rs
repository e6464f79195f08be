//! 2D mesh coordinates: classical MDS initialization, SMACOF stress
//! majorization, and the affine map between embedding space and the discrete
//! mesh grid.
//!
//! The embedding is an intrinsic surface property: it is computed once from
//! rest-pose geodesic distances and never changes with pose or view.

use std::io::{BufReader, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-vertex 2D mesh coordinates plus the mesh-grid mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshEmbedding {
    /// Per-vertex 2D coordinates in embedding units.
    pub coords: Vec<[f64; 2]>,
    /// Tight bounds of `coords`: `[min_x, min_y, max_x, max_y]`.
    pub bbox: [f64; 4],
    /// Mesh grid nodes per side (G >= 2).
    pub grid_size: usize,
}

/// Fraction added to each bbox side before mapping onto the grid, so kernel
/// windows around extreme vertices stay inside the grid.
const BBOX_MARGIN: f64 = 0.05;

impl MeshEmbedding {
    pub fn from_coords(coords: Vec<[f64; 2]>, grid_size: usize) -> Result<Self> {
        if grid_size < 2 {
            return Err(Error::BadConfig(format!("grid size {grid_size} < 2")));
        }
        if coords.is_empty() {
            return Err(Error::BadConfig("empty embedding".into()));
        }
        let mut bbox = [
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ];
        for c in &coords {
            if !c[0].is_finite() || !c[1].is_finite() {
                return Err(Error::BadConfig("non-finite embedding coordinate".into()));
            }
            bbox[0] = bbox[0].min(c[0]);
            bbox[1] = bbox[1].min(c[1]);
            bbox[2] = bbox[2].max(c[0]);
            bbox[3] = bbox[3].max(c[1]);
        }
        Ok(MeshEmbedding {
            coords,
            bbox,
            grid_size,
        })
    }

    fn expanded(&self) -> Result<([f64; 2], [f64; 2])> {
        let w = self.bbox[2] - self.bbox[0];
        let h = self.bbox[3] - self.bbox[1];
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::DegenerateBbox);
        }
        let origin = [self.bbox[0] - BBOX_MARGIN * w, self.bbox[1] - BBOX_MARGIN * h];
        let size = [w * (1.0 + 2.0 * BBOX_MARGIN), h * (1.0 + 2.0 * BBOX_MARGIN)];
        Ok((origin, size))
    }

    /// Map an embedding-space point onto the continuous grid `[0, G-1]^2`.
    pub fn to_grid(&self, m: [f64; 2]) -> Result<[f64; 2]> {
        let (origin, size) = self.expanded()?;
        let g = (self.grid_size - 1) as f64;
        Ok([
            (m[0] - origin[0]) / size[0] * g,
            (m[1] - origin[1]) / size[1] * g,
        ])
    }

    /// Inverse of [`MeshEmbedding::to_grid`].
    pub fn from_grid(&self, g: [f64; 2]) -> Result<[f64; 2]> {
        let (origin, size) = self.expanded()?;
        let gg = (self.grid_size - 1) as f64;
        Ok([
            origin[0] + g[0] / gg * size[0],
            origin[1] + g[1] / gg * size[1],
        ])
    }

    /// Grid coordinates of every vertex.
    pub fn vertex_grid_coords(&self) -> Result<Vec<[f64; 2]>> {
        self.coords.iter().map(|&c| self.to_grid(c)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = EmbeddingFile {
            grid_size: self.grid_size,
            bbox: self.bbox,
            coords: self.coords.clone(),
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut out, &file)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: EmbeddingFile =
            serde_json::from_reader(BufReader::new(std::fs::File::open(path)?))?;
        let emb = MeshEmbedding::from_coords(file.coords, file.grid_size)?;
        // Stored bbox must agree with the coordinates it claims to bound.
        for (a, b) in emb.bbox.iter().zip(&file.bbox) {
            if (a - b).abs() > 1e-9 * (1.0 + a.abs()) {
                return Err(Error::BadConfig("embedding bbox inconsistent".into()));
            }
        }
        Ok(emb)
    }
}

#[derive(Serialize, Deserialize)]
struct EmbeddingFile {
    grid_size: usize,
    bbox: [f64; 4],
    coords: Vec<[f64; 2]>,
}

fn validate_distance_matrix(d: &[Vec<f64>]) -> Result<usize> {
    let n = d.len();
    let mut max_asym: f64 = 0.0;
    for (i, row) in d.iter().enumerate() {
        if row.len() != n {
            return Err(Error::BadDistanceMatrix("matrix not square".into()));
        }
        if row[i].abs() > 1e-9 {
            return Err(Error::BadDistanceMatrix(format!(
                "nonzero diagonal at {i}"
            )));
        }
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::BadDistanceMatrix(format!(
                    "bad entry at ({i}, {j})"
                )));
            }
            max_asym = max_asym.max((v - d[j][i]).abs());
        }
    }
    if max_asym > 1e-6 {
        return Err(Error::NonSymmetricDistance(max_asym));
    }
    Ok(n)
}

/// Classical MDS: top-2 principal coordinates of the double-centered squared
/// distance matrix. Deterministic; axis signs are fixed so vertex 0 has
/// non-negative coordinates.
pub fn classical_mds_init(d: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let n = validate_distance_matrix(d)?;
    if n == 1 {
        return Ok(vec![[0.0, 0.0]]);
    }

    // b = -1/2 J D^2 J via row/column/grand means of squared distances.
    let sq = |x: f64| x * x;
    let mut row_mean = vec![0.0f64; n];
    for i in 0..n {
        row_mean[i] = d[i].iter().map(|&v| sq(v)).sum::<f64>() / n as f64;
    }
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut b = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            b[(i, j)] = -0.5 * (sq(d[i][j]) - row_mean[i] - row_mean[j] + grand);
        }
    }

    let (vals, vecs) = top2_symmetric(&b);
    let mut coords = vec![[0.0f64; 2]; n];
    for k in 0..2 {
        let scale = vals[k].max(0.0).sqrt();
        for i in 0..n {
            coords[i][k] = scale * vecs[(i, k)];
        }
    }
    // Axis-sign canonicalization for reproducible output.
    for k in 0..2 {
        if coords[0][k] < 0.0 {
            for c in coords.iter_mut() {
                c[k] = -c[k];
            }
        }
    }
    Ok(coords)
}

/// Top-2 eigenpairs of a symmetric matrix by shifted subspace iteration with
/// a Rayleigh-Ritz finish. Deterministic start vectors, descending order.
fn top2_symmetric(b: &DMatrix<f64>) -> ([f64; 2], DMatrix<f64>) {
    let n = b.nrows();
    // Gershgorin shift makes the most-positive eigenvalues dominant.
    let shift = (0..n)
        .map(|i| (0..n).map(|j| b[(i, j)].abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let shifted = {
        let mut s = b.clone();
        for i in 0..n {
            s[(i, i)] += shift;
        }
        s
    };

    let mut q = DMatrix::<f64>::zeros(n, 2);
    for i in 0..n {
        q[(i, 0)] = (i as f64 + 1.0).sin();
        q[(i, 1)] = (2.0 * i as f64 + 0.5).cos();
    }
    orthonormalize2(&mut q);

    let mut prev = [f64::INFINITY; 2];
    for _ in 0..5000 {
        let mut y = &shifted * &q;
        orthonormalize2(&mut y);
        q = y;
        // Ritz values on the current subspace.
        let m = q.transpose() * (&shifted * &q);
        let vals = [m[(0, 0)], m[(1, 1)]];
        let scale = vals[0].abs().max(vals[1].abs()).max(1e-300);
        let done = (vals[0] - prev[0]).abs() + (vals[1] - prev[1]).abs() < 1e-14 * scale;
        prev = vals;
        if done {
            break;
        }
    }

    // Rayleigh-Ritz: diagonalize the projected 2x2 to get principal axes.
    let m = q.transpose() * (&shifted * &q);
    let (l1, l2, rot) = eig2(m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
    let u = &q * rot;
    ([l1 - shift, l2 - shift], u)
}

/// Eigen-decomposition of a symmetric 2x2 `[[a, c], [c, d]]`, eigenvalues in
/// descending order with the rotation taking the basis onto the eigenvectors.
fn eig2(a: f64, c: f64, d: f64) -> (f64, f64, DMatrix<f64>) {
    let tr = a + d;
    let det = a * d - c * c;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let l1 = tr / 2.0 + disc;
    let l2 = tr / 2.0 - disc;
    let mut v1 = if c.abs() > 1e-300 {
        [l1 - d, c]
    } else if a >= d {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    let norm = (v1[0] * v1[0] + v1[1] * v1[1]).sqrt();
    v1 = [v1[0] / norm, v1[1] / norm];
    let v2 = [-v1[1], v1[0]];
    let mut rot = DMatrix::<f64>::zeros(2, 2);
    rot[(0, 0)] = v1[0];
    rot[(1, 0)] = v1[1];
    rot[(0, 1)] = v2[0];
    rot[(1, 1)] = v2[1];
    (l1, l2, rot)
}

fn orthonormalize2(q: &mut DMatrix<f64>) {
    let n = q.nrows();
    let norm0 = (0..n).map(|i| q[(i, 0)] * q[(i, 0)]).sum::<f64>().sqrt();
    if norm0 > 0.0 {
        for i in 0..n {
            q[(i, 0)] /= norm0;
        }
    }
    let dot = (0..n).map(|i| q[(i, 0)] * q[(i, 1)]).sum::<f64>();
    for i in 0..n {
        q[(i, 1)] -= dot * q[(i, 0)];
    }
    let norm1 = (0..n).map(|i| q[(i, 1)] * q[(i, 1)]).sum::<f64>().sqrt();
    if norm1 > 0.0 {
        for i in 0..n {
            q[(i, 1)] /= norm1;
        }
    }
}

/// Raw stress: sum over unordered pairs of squared residuals between target
/// distances and embedded Euclidean distances.
pub fn stress(d: &[Vec<f64>], x: &[[f64; 2]]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = x[i][0] - x[j][0];
            let dy = x[i][1] - x[j][1];
            let rho = (dx * dx + dy * dy).sqrt();
            let r = d[i][j] - rho;
            s += r * r;
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct SmacofResult {
    pub coords: Vec<[f64; 2]>,
    /// Stress before iteration 1, then after every Guttman step.
    pub stress_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Stress failed to decrease on the very first iteration.
    pub stagnated: bool,
}

/// SMACOF stress majorization. Stress is non-increasing at every iteration;
/// zero-distance point pairs contribute no update. Coordinates are
/// re-centered by the Guttman transform each step.
pub fn smacof_refine(
    d: &[Vec<f64>],
    init: &[[f64; 2]],
    max_iters: usize,
    tol: f64,
) -> Result<SmacofResult> {
    let n = validate_distance_matrix(d)?;
    if init.len() != n {
        return Err(Error::LengthMismatch {
            what: "smacof init",
            got: init.len(),
            expected: n,
        });
    }
    if max_iters < 1 || tol <= 0.0 {
        return Err(Error::BadConfig("smacof needs max_iters >= 1, tol > 0".into()));
    }
    for c in init {
        if !c[0].is_finite() || !c[1].is_finite() {
            return Err(Error::BadConfig("non-finite smacof init".into()));
        }
    }

    let mut x: Vec<[f64; 2]> = init.to_vec();
    let mut trace = vec![stress(d, &x)];
    let mut converged = false;
    let mut stagnated = false;
    let mut iterations = 0;
    for it in 0..max_iters {
        let prev = x.clone();
        let next: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = [0.0f64; 2];
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let dx = prev[i][0] - prev[j][0];
                    let dy = prev[i][1] - prev[j][1];
                    let rho = (dx * dx + dy * dy).sqrt();
                    if rho > 0.0 {
                        let f = d[i][j] / rho;
                        acc[0] += f * dx;
                        acc[1] += f * dy;
                    }
                }
                [acc[0] / n as f64, acc[1] / n as f64]
            })
            .collect();
        x = next;
        let s = stress(d, &x);
        let s_prev = *trace.last().unwrap();
        trace.push(s);
        iterations = it + 1;
        let decrease = s_prev - s;
        if it == 0 && decrease <= 0.0 && s > 0.0 {
            stagnated = true;
        }
        if decrease / s_prev.max(1e-300) < tol {
            converged = true;
            break;
        }
    }
    Ok(SmacofResult {
        coords: x,
        stress_trace: trace,
        iterations,
        converged,
        stagnated,
    })
}

/// Embed a rigged mesh: all-pairs geodesic distances on its surface graph,
/// classical MDS, then SMACOF refinement.
pub fn compute_embedding(
    mesh: &crate::mesh::RiggedMesh,
    grid_size: usize,
    max_iters: usize,
    tol: f64,
) -> Result<(MeshEmbedding, SmacofResult)> {
    let graph = crate::mesh::SurfaceGraph::from_mesh(mesh)?;
    let d = crate::mesh::all_pairs_geodesics(&graph)?;
    embed_distances(&d, grid_size, max_iters, tol)
}

/// Full embedding pipeline on a given distance matrix: classical MDS
/// provides the start and SMACOF refines it.
pub fn embed_distances(
    d: &[Vec<f64>],
    grid_size: usize,
    max_iters: usize,
    tol: f64,
) -> Result<(MeshEmbedding, SmacofResult)> {
    let init = classical_mds_init(d)?;
    let refined = smacof_refine(d, &init, max_iters, tol)?;
    let embedding = MeshEmbedding::from_coords(refined.coords.clone(), grid_size)?;
    Ok((embedding, refined))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn pairwise(coords: &[[f64; 2]]) -> Vec<Vec<f64>> {
        let n = coords.len();
        let mut d = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let dx = coords[i][0] - coords[j][0];
                let dy = coords[i][1] - coords[j][1];
                d[i][j] = (dx * dx + dy * dy).sqrt();
            }
        }
        d
    }

    #[test]
    fn classical_mds_equilateral_triangle() {
        let d = vec![
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ];
        let coords = classical_mds_init(&d).unwrap();
        let got = pairwise(&coords);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(
                        (got[i][j] - 1.0).abs() < 1e-9,
                        "distance ({i},{j}) = {}",
                        got[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn classical_mds_two_points() {
        let d = vec![vec![0.0, 5.0], vec![5.0, 0.0]];
        let coords = classical_mds_init(&d).unwrap();
        let got = pairwise(&coords);
        assert!((got[0][1] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn classical_mds_rejects_asymmetry() {
        let d = vec![vec![0.0, 1.0], vec![1.1, 0.0]];
        assert!(matches!(
            classical_mds_init(&d),
            Err(Error::NonSymmetricDistance(_))
        ));
    }

    #[test]
    fn classical_mds_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let coords: Vec<[f64; 2]> = (0..12)
            .map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)])
            .collect();
        let d = pairwise(&coords);
        let a = classical_mds_init(&d).unwrap();
        let b = classical_mds_init(&d).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x[0].to_bits(), y[0].to_bits());
            assert_eq!(x[1].to_bits(), y[1].to_bits());
        }
    }

    #[test]
    fn smacof_fixed_point() {
        // Exact centered embedding: one Guttman step must return it unchanged.
        let coords = vec![[-0.5, 0.0], [0.5, 0.0], [0.0, 0.75]];
        let center = [
            coords.iter().map(|c| c[0]).sum::<f64>() / 3.0,
            coords.iter().map(|c| c[1]).sum::<f64>() / 3.0,
        ];
        let coords: Vec<[f64; 2]> = coords
            .iter()
            .map(|c| [c[0] - center[0], c[1] - center[1]])
            .collect();
        let d = pairwise(&coords);
        let res = smacof_refine(&d, &coords, 10, 1e-12).unwrap();
        for (a, b) in res.coords.iter().zip(&coords) {
            assert!((a[0] - b[0]).abs() < 1e-12);
            assert!((a[1] - b[1]).abs() < 1e-12);
        }
        assert!(res.stress_trace[0] < 1e-20);
    }

    #[test]
    fn smacof_recovers_equilateral_from_perturbed_init() {
        let d = vec![
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ];
        let init = vec![[0.1, -0.05], [0.8, 0.1], [0.4, 0.9]];
        let res = smacof_refine(&d, &init, 10000, 1e-16).unwrap();
        assert!(
            *res.stress_trace.last().unwrap() < 1e-10,
            "stress {}",
            res.stress_trace.last().unwrap()
        );
    }

    #[test]
    fn smacof_stress_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..5 {
            let n = 10;
            let mut d = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in (i + 1)..n {
                    let v = rng.random_range(0.1..2.0);
                    d[i][j] = v;
                    d[j][i] = v;
                }
            }
            let init: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let res = smacof_refine(&d, &init, 200, 1e-15).unwrap();
            for w in res.stress_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "stress increased: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn smacof_coincident_init_stagnates() {
        let d = vec![
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ];
        let init = vec![[0.3, 0.3]; 3];
        let res = smacof_refine(&d, &init, 5, 1e-12).unwrap();
        assert!(res.stagnated);
    }

    #[test]
    fn grid_mapping_roundtrip() {
        let coords = vec![[0.0, 0.0], [2.0, 0.0], [2.0, 3.0], [0.0, 3.0], [1.0, 1.5]];
        let emb = MeshEmbedding::from_coords(coords, 16).unwrap();
        // bbox center maps to the grid center.
        let center = emb.to_grid([1.0, 1.5]).unwrap();
        assert!((center[0] - 7.5).abs() < 1e-12);
        assert!((center[1] - 7.5).abs() < 1e-12);
        // Expanded-bbox min corner maps to (0, 0).
        let min_corner = emb.to_grid([-0.1, -0.15]).unwrap();
        assert!(min_corner[0].abs() < 1e-12);
        assert!(min_corner[1].abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let m = [rng.random_range(-0.1..2.1), rng.random_range(-0.15..3.15)];
            let g = emb.to_grid(m).unwrap();
            let back = emb.from_grid(g).unwrap();
            assert!((back[0] - m[0]).abs() < 1e-12);
            assert!((back[1] - m[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_bbox_errors() {
        let emb = MeshEmbedding::from_coords(vec![[0.0, 0.0], [0.0, 1.0]], 8).unwrap();
        assert!(matches!(emb.to_grid([0.0, 0.5]), Err(Error::DegenerateBbox)));
    }

    #[test]
    fn embedding_file_roundtrip() {
        let dir = std::env::temp_dir().join(format!("dgn_emb_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.emb.json");
        let emb =
            MeshEmbedding::from_coords(vec![[0.0, 0.0], [1.0, 0.5], [0.3, 2.0]], 16).unwrap();
        emb.save(&path).unwrap();
        let back = MeshEmbedding::load(&path).unwrap();
        assert_eq!(emb, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
