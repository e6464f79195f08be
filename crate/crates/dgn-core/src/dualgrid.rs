//! Extension (scatter) and sampling (gather) between continuous mesh
//! coordinates and the discrete mesh grid, with analytic gradients.
//!
//! A point at continuous grid coordinate `m` interacts with the
//! `kernel x kernel` window of nearest grid nodes. Node `n` receives the
//! Gaussian-softmax weight
//!
//! ```text
//! w_n = exp(-sigma * |n - m|^2) / sum_{l in window} exp(-sigma * |l - m|^2)
//! ```
//!
//! so per-point weights always sum to 1. Extension deposits `w_n * f` at each
//! window node (contributions from distinct points add); sampling returns the
//! weighted sum of node features. Gradients with respect to `m` treat window
//! membership as locally constant.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Gaussian falloff of the softmax weights.
pub const SIGMA: f64 = 0.5;

/// Dense `G x G x d` feature map on the mesh grid. Storage is row-major over
/// nodes (y outer, x inner) with channels contiguous per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFeatureMap {
    pub grid_size: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl GridFeatureMap {
    pub fn zeros(grid_size: usize, channels: usize) -> Self {
        GridFeatureMap {
            grid_size,
            channels,
            data: vec![0.0; grid_size * grid_size * channels],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        (y * self.grid_size + x) * self.channels
    }

    pub fn node(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y);
        &self.data[i..i + self.channels]
    }

    pub fn node_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.index(x, y);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.grid_size * self.grid_size * self.channels {
            return Err(Error::BadMapShape);
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadMapShape);
        }
        Ok(())
    }
}

/// A feature vector bound to a continuous mesh-grid coordinate.
#[derive(Debug, Clone)]
pub struct ScatterPoint {
    pub m: [f64; 2],
    pub f: Vec<f64>,
}

fn check_bounds(m: [f64; 2], grid: usize) -> Result<()> {
    let hi = (grid - 1) as f64;
    if !(m[0] >= 0.0 && m[0] <= hi && m[1] >= 0.0 && m[1] <= hi) {
        return Err(Error::GridBounds(m[0], m[1], hi));
    }
    Ok(())
}

fn check_kernel(kernel: usize, grid: usize) -> Result<()> {
    if kernel < 1 || kernel > grid {
        return Err(Error::BadKernel { kernel, grid });
    }
    Ok(())
}

/// The kernel window around `m`: origin node, normalized weights (row-major,
/// y outer), and the weighted mean node position.
pub(crate) struct Window {
    pub x0: usize,
    pub y0: usize,
    pub kernel: usize,
    pub weights: Vec<f64>,
    pub mean_node: [f64; 2],
}

impl Window {
    #[inline]
    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let k = self.kernel;
        (0..k * k).map(move |i| {
            let dx = i % k;
            let dy = i / k;
            (self.x0 + dx, self.y0 + dy, self.weights[i])
        })
    }
}

fn window_start(m: f64, grid: usize, kernel: usize) -> usize {
    let s = (m - kernel as f64 / 2.0).ceil() as i64;
    s.clamp(0, (grid - kernel) as i64) as usize
}

pub(crate) fn window_of(m: [f64; 2], grid: usize, kernel: usize) -> Window {
    let x0 = window_start(m[0], grid, kernel);
    let y0 = window_start(m[1], grid, kernel);
    let mut weights = Vec::with_capacity(kernel * kernel);
    let mut total = 0.0;
    for dy in 0..kernel {
        let ny = (y0 + dy) as f64;
        for dx in 0..kernel {
            let nx = (x0 + dx) as f64;
            let d2 = (nx - m[0]) * (nx - m[0]) + (ny - m[1]) * (ny - m[1]);
            let e = (-SIGMA * d2).exp();
            weights.push(e);
            total += e;
        }
    }
    let mut mean_node = [0.0f64; 2];
    for (i, w) in weights.iter_mut().enumerate() {
        *w /= total;
        let dx = (i % kernel) as f64;
        let dy = (i / kernel) as f64;
        mean_node[0] += *w * (x0 as f64 + dx);
        mean_node[1] += *w * (y0 as f64 + dy);
    }
    Window {
        x0,
        y0,
        kernel,
        weights,
        mean_node,
    }
}

/// Scatter point features onto the mesh grid (scatter-add semantics).
pub fn extension(points: &[ScatterPoint], grid: usize, kernel: usize) -> Result<GridFeatureMap> {
    check_kernel(kernel, grid)?;
    let Some(first) = points.first() else {
        return Err(Error::BadConfig("extension needs at least one point".into()));
    };
    let channels = first.f.len();
    let mut map = GridFeatureMap::zeros(grid, channels);
    for p in points {
        check_bounds(p.m, grid)?;
        if p.f.len() != channels {
            return Err(Error::LengthMismatch {
                what: "scatter feature",
                got: p.f.len(),
                expected: channels,
            });
        }
        let win = window_of(p.m, grid, kernel);
        for (nx, ny, w) in win.nodes() {
            let slot = map.node_mut(nx, ny);
            for (s, &f) in slot.iter_mut().zip(&p.f) {
                *s += w * f;
            }
        }
    }
    Ok(map)
}

/// Gather map features at continuous grid coordinates.
pub fn sampling(map: &GridFeatureMap, queries: &[[f64; 2]], kernel: usize) -> Result<Vec<Vec<f64>>> {
    check_kernel(kernel, map.grid_size)?;
    map.validate()?;
    let mut out = Vec::with_capacity(queries.len());
    for &q in queries {
        check_bounds(q, map.grid_size)?;
        let win = window_of(q, map.grid_size, kernel);
        let mut acc = vec![0.0f64; map.channels];
        for (nx, ny, w) in win.nodes() {
            for (a, &v) in acc.iter_mut().zip(map.node(nx, ny)) {
                *a += w * v;
            }
        }
        out.push(acc);
    }
    Ok(out)
}

/// Gradients of `<upstream, extension(points)>` with respect to each point's
/// feature vector and grid coordinate.
pub fn extension_vjp(
    points: &[ScatterPoint],
    grid: usize,
    kernel: usize,
    upstream: &GridFeatureMap,
) -> Result<Vec<(Vec<f64>, [f64; 2])>> {
    check_kernel(kernel, grid)?;
    if upstream.grid_size != grid {
        return Err(Error::BadMapShape);
    }
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        check_bounds(p.m, grid)?;
        if p.f.len() != upstream.channels {
            return Err(Error::LengthMismatch {
                what: "scatter feature",
                got: p.f.len(),
                expected: upstream.channels,
            });
        }
        let win = window_of(p.m, grid, kernel);
        let mut df = vec![0.0f64; upstream.channels];
        let mut dm = [0.0f64; 2];
        for (nx, ny, w) in win.nodes() {
            let u = upstream.node(nx, ny);
            let mut uf = 0.0;
            for ((d, &uv), &fv) in df.iter_mut().zip(u).zip(&p.f) {
                *d += w * uv;
                uf += uv * fv;
            }
            // d w_n / d m = 2 sigma w_n (n - mean_node)
            let gx = 2.0 * SIGMA * w * (nx as f64 - win.mean_node[0]);
            let gy = 2.0 * SIGMA * w * (ny as f64 - win.mean_node[1]);
            dm[0] += uf * gx;
            dm[1] += uf * gy;
        }
        out.push((df, dm));
    }
    Ok(out)
}

/// Gradients of `<upstream, sampling(map, queries)>` with respect to the map
/// and to each query coordinate.
pub fn sampling_vjp(
    map: &GridFeatureMap,
    queries: &[[f64; 2]],
    kernel: usize,
    upstream: &[Vec<f64>],
) -> Result<(GridFeatureMap, Vec<[f64; 2]>)> {
    check_kernel(kernel, map.grid_size)?;
    map.validate()?;
    if upstream.len() != queries.len() {
        return Err(Error::LengthMismatch {
            what: "sampling upstream",
            got: upstream.len(),
            expected: queries.len(),
        });
    }
    let mut dmap = GridFeatureMap::zeros(map.grid_size, map.channels);
    let mut dq = Vec::with_capacity(queries.len());
    for (&q, u) in queries.iter().zip(upstream) {
        check_bounds(q, map.grid_size)?;
        if u.len() != map.channels {
            return Err(Error::LengthMismatch {
                what: "sampling upstream row",
                got: u.len(),
                expected: map.channels,
            });
        }
        let win = window_of(q, map.grid_size, kernel);
        let mut dm = [0.0f64; 2];
        for (nx, ny, w) in win.nodes() {
            let node = map.node(nx, ny);
            let slot = dmap.node_mut(nx, ny);
            let mut uv = 0.0;
            for ((s, &uev), &nv) in slot.iter_mut().zip(u).zip(node) {
                *s += w * uev;
                uv += uev * nv;
            }
            let gx = 2.0 * SIGMA * w * (nx as f64 - win.mean_node[0]);
            let gy = 2.0 * SIGMA * w * (ny as f64 - win.mean_node[1]);
            dm[0] += uv * gx;
            dm[1] += uv * gy;
        }
        dq.push(dm);
    }
    Ok((dmap, dq))
}

// ---------------------------------------------------------------------------
// Binary serialization: magic "DGNF", u32 G, u32 d, u32 reserved, then
// little-endian f32 data in storage order.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"DGNF";

pub fn save_feature_map(path: &Path, map: &GridFeatureMap) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(map.grid_size as u32).to_le_bytes())?;
    out.write_all(&(map.channels as u32).to_le_bytes())?;
    out.write_all(&0u32.to_le_bytes())?;
    for &v in &map.data {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_feature_map(path: &Path) -> Result<GridFeatureMap> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; 16];
    file.read_exact(&mut header).map_err(|_| Error::Truncated)?;
    if &header[0..4] != MAGIC {
        return Err(Error::BadMagic { expected: "DGNF" });
    }
    let grid = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = grid * grid * channels;
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        file.read_exact(&mut buf).map_err(|_| Error::Truncated)?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    let map = GridFeatureMap {
        grid_size: grid,
        channels,
        data,
    };
    map.validate()?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Eq. 2 evaluated from scratch over an explicit node list.
    fn direct_weights(m: [f64; 2], nodes: &[(usize, usize)]) -> Vec<f64> {
        let es: Vec<f64> = nodes
            .iter()
            .map(|&(nx, ny)| {
                let d2 = (nx as f64 - m[0]).powi(2) + (ny as f64 - m[1]).powi(2);
                (-0.5 * d2).exp()
            })
            .collect();
        let total: f64 = es.iter().sum();
        es.into_iter().map(|e| e / total).collect()
    }

    #[test]
    fn midpoint_splits_evenly() {
        // Point midway between two horizontally adjacent nodes: by symmetry
        // each side of the window receives exactly half of the mass.
        let m = [0.5, 0.0];
        let map = extension(
            &[ScatterPoint {
                m,
                f: vec![1.0],
            }],
            2,
            2,
        )
        .unwrap();
        let left = map.node(0, 0)[0] + map.node(0, 1)[0];
        let right = map.node(1, 0)[0] + map.node(1, 1)[0];
        assert!((left - 0.5).abs() < 1e-12);
        assert!((right - 0.5).abs() < 1e-12);
        assert!((map.node(0, 0)[0] - map.node(1, 0)[0]).abs() < 1e-15);
        // And the two nearest nodes carry the direct softmax value.
        let w = direct_weights(m, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
        assert!((map.node(0, 0)[0] - w[0]).abs() < 1e-15);
    }

    #[test]
    fn interior_node_weight_matches_direct_sum() {
        // One point at an interior node with kernel 8: the node's own weight
        // equals e^0 over the direct sum across the 64 window nodes.
        let g = 16usize;
        let m = [7.0, 7.0];
        let map = extension(&[ScatterPoint { m, f: vec![1.0] }], g, 8).unwrap();
        let nodes: Vec<(usize, usize)> = (3..11)
            .flat_map(|y| (3..11).map(move |x| (x, y)))
            .collect();
        let w = direct_weights(m, &nodes);
        let own = w[nodes.iter().position(|&n| n == (7, 7)).unwrap()];
        assert!((map.node(7, 7)[0] - own).abs() < 1e-14);
        assert!(SIGMA == 0.5);
    }

    #[test]
    fn partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let g = rng.random_range(4..20);
            let k = rng.random_range(1..=g.min(8));
            let m = [
                rng.random_range(0.0..(g - 1) as f64),
                rng.random_range(0.0..(g - 1) as f64),
            ];
            let map = extension(&[ScatterPoint { m, f: vec![1.0] }], g, k).unwrap();
            let total: f64 = map.data.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_map_samples_constant() {
        let mut map = GridFeatureMap::zeros(10, 2);
        for v in map.data.iter_mut() {
            *v = 3.25;
        }
        let queries = [[0.0, 0.0], [4.3, 8.9], [9.0, 9.0], [2.5, 2.5]];
        let out = sampling(&map, &queries, 4).unwrap();
        for row in out {
            assert!((row[0] - 3.25).abs() < 1e-12);
            assert!((row[1] - 3.25).abs() < 1e-12);
        }
        let zero = GridFeatureMap::zeros(10, 2);
        let out = sampling(&zero, &queries, 4).unwrap();
        assert!(out.iter().all(|r| r.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn scatter_then_gather_scaling_law() {
        // extension of a single f at m followed by sampling at m returns
        // f * sum of squared window weights.
        let g = 12usize;
        let k = 6usize;
        let m = [4.3, 7.6];
        let f = 2.5f64;
        let map = extension(&[ScatterPoint { m, f: vec![f] }], g, k).unwrap();
        let out = sampling(&map, &[m], k).unwrap();
        let x0 = 2usize; // ceil(4.3 - 3) = 2
        let y0 = 5usize; // ceil(7.6 - 3) = 5
        let nodes: Vec<(usize, usize)> = (y0..y0 + k)
            .flat_map(|y| (x0..x0 + k).map(move |x| (x, y)))
            .collect();
        let w = direct_weights(m, &nodes);
        let scale: f64 = w.iter().map(|&v| v * v).sum();
        assert!((out[0][0] - f * scale).abs() < 1e-12);
    }

    #[test]
    fn extension_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = 9;
        let k = 4;
        let pts: Vec<[f64; 2]> = (0..6)
            .map(|_| {
                [
                    rng.random_range(0.0..(g - 1) as f64),
                    rng.random_range(0.0..(g - 1) as f64),
                ]
            })
            .collect();
        let f1: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
        let f2: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
        let (alpha, beta) = (1.7, -0.4);
        let mk = |fs: &[Vec<f64>]| {
            let points: Vec<ScatterPoint> = pts
                .iter()
                .zip(fs)
                .map(|(&m, f)| ScatterPoint { m, f: f.clone() })
                .collect();
            extension(&points, g, k).unwrap()
        };
        let combined: Vec<Vec<f64>> = f1
            .iter()
            .zip(&f2)
            .map(|(a, b)| vec![alpha * a[0] + beta * b[0]])
            .collect();
        let lhs = mk(&combined);
        let (m1, m2) = (mk(&f1), mk(&f2));
        for i in 0..lhs.data.len() {
            let rhs = alpha * m1.data[i] + beta * m2.data[i];
            assert!((lhs.data[i] - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_covariance() {
        let g = 16;
        let k = 4;
        let base: Vec<ScatterPoint> = vec![
            ScatterPoint {
                m: [4.2, 5.7],
                f: vec![1.0, -2.0],
            },
            ScatterPoint {
                m: [5.9, 4.1],
                f: vec![0.3, 0.9],
            },
        ];
        let shifted: Vec<ScatterPoint> = base
            .iter()
            .map(|p| ScatterPoint {
                m: [p.m[0] + 3.0, p.m[1] + 2.0],
                f: p.f.clone(),
            })
            .collect();
        let a = extension(&base, g, k).unwrap();
        let b = extension(&shifted, g, k).unwrap();
        for y in 0..g - 2 {
            for x in 0..g - 3 {
                let va = a.node(x, y);
                let vb = b.node(x + 3, y + 2);
                for c in 0..2 {
                    assert!((va[c] - vb[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn out_of_bounds_and_bad_kernel() {
        let p = [ScatterPoint {
            m: [-0.1, 0.0],
            f: vec![1.0],
        }];
        assert!(matches!(extension(&p, 8, 2), Err(Error::GridBounds(..))));
        let p = [ScatterPoint {
            m: [1.0, 1.0],
            f: vec![1.0],
        }];
        assert!(matches!(
            extension(&p, 8, 0),
            Err(Error::BadKernel { .. })
        ));
        assert!(matches!(
            extension(&p, 8, 9),
            Err(Error::BadKernel { .. })
        ));
        let map = GridFeatureMap::zeros(8, 1);
        assert!(matches!(
            sampling(&map, &[[8.0, 0.0]], 2),
            Err(Error::GridBounds(..))
        ));
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        g: usize,
        _k: usize,
        n: usize,
        d: usize,
    ) -> Vec<ScatterPoint> {
        (0..n)
            .map(|_| {
                // Keep coordinates away from window-membership boundaries so
                // finite differences stay inside one membership cell.
                let cell = |r: &mut ChaCha8Rng| {
                    let base = r.random_range(0..g - 1) as f64;
                    base + r.random_range(0.1..0.45)
                };
                ScatterPoint {
                    m: [cell(rng), cell(rng)],
                    f: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
                }
            })
            .collect()
    }

    #[test]
    fn extension_vjp_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let points = random_instance(&mut rng, 10, 4, 5, 3);
        let upstream = GridFeatureMap::zeros(10, 3);
        let grads = extension_vjp(&points, 10, 4, &upstream).unwrap();
        for (df, dm) in grads {
            assert!(df.iter().all(|&v| v == 0.0));
            assert_eq!(dm, [0.0, 0.0]);
        }
    }

    #[test]
    fn extension_vjp_feature_gradient_is_weight_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = 10;
        let k = 4;
        let points = random_instance(&mut rng, g, k, 3, 2);
        let mut upstream = GridFeatureMap::zeros(g, 2);
        for v in upstream.data.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let grads = extension_vjp(&points, g, k, &upstream).unwrap();
        for (p, (df, _)) in points.iter().zip(&grads) {
            let win = window_of(p.m, g, k);
            let mut expect = vec![0.0f64; 2];
            for (nx, ny, w) in win.nodes() {
                for (e, &u) in expect.iter_mut().zip(upstream.node(nx, ny)) {
                    *e += w * u;
                }
            }
            for (a, b) in df.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn extension_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..5 {
            let g = 8 + trial;
            let k = 3 + trial % 3;
            let points = random_instance(&mut rng, g, k, 4, 2);
            let mut upstream = GridFeatureMap::zeros(g, 2);
            for v in upstream.data.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let grads = extension_vjp(&points, g, k, &upstream).unwrap();

            // Flatten (m, f) into one variable vector.
            let pack = |pts: &[ScatterPoint]| -> Vec<f64> {
                pts.iter()
                    .flat_map(|p| {
                        let mut v = vec![p.m[0], p.m[1]];
                        v.extend_from_slice(&p.f);
                        v
                    })
                    .collect()
            };
            let unpack = |x: &[f64]| -> Vec<ScatterPoint> {
                x.chunks(4)
                    .map(|c| ScatterPoint {
                        m: [c[0], c[1]],
                        f: c[2..].to_vec(),
                    })
                    .collect()
            };
            let x0 = pack(&points);
            let func = |x: &[f64]| {
                let pts = unpack(x);
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
            let err = max_rel_err(&analytic, &fd);
            assert!(err < 1e-4, "extension vjp rel err {err}");
        }
    }

    #[test]
    fn sampling_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..5 {
            let g = 8 + trial;
            let k = 3 + trial % 3;
            let mut map = GridFeatureMap::zeros(g, 2);
            for v in map.data.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let queries: Vec<[f64; 2]> = random_instance(&mut rng, g, k, 4, 1)
                .into_iter()
                .map(|p| p.m)
                .collect();
            let upstream: Vec<Vec<f64>> = (0..queries.len())
                .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let (dmap, dq) = sampling_vjp(&map, &queries, k, &upstream).unwrap();

            // Check query gradients.
            let q0: Vec<f64> = queries.iter().flat_map(|q| q.to_vec()).collect();
            let func_q = |x: &[f64]| {
                let qs: Vec<[f64; 2]> = x.chunks(2).map(|c| [c[0], c[1]]).collect();
                let out = sampling(&map, &qs, k).unwrap();
                out.iter()
                    .zip(&upstream)
                    .map(|(o, u)| o.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
                    .sum::<f64>()
            };
            let fd_q = central_diff(&func_q, &q0, 1e-6 * g as f64);
            let analytic_q: Vec<f64> = dq.iter().flat_map(|d| d.to_vec()).collect();
            assert!(max_rel_err(&analytic_q, &fd_q) < 1e-4);

            // Check map gradients (linear, should be near-exact).
            let func_m = |x: &[f64]| {
                let m2 = GridFeatureMap {
                    grid_size: g,
                    channels: 2,
                    data: x.to_vec(),
                };
                let out = sampling(&m2, &queries, k).unwrap();
                out.iter()
                    .zip(&upstream)
                    .map(|(o, u)| o.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
                    .sum::<f64>()
            };
            let fd_m = central_diff(&func_m, &map.data, 1e-5);
            assert!(max_rel_err(&dmap.data, &fd_m) < 1e-4);
        }
    }

    #[test]
    fn constant_map_has_zero_position_gradient() {
        let mut map = GridFeatureMap::zeros(9, 1);
        for v in map.data.iter_mut() {
            *v = 7.7;
        }
        let queries = [[2.3, 4.4], [6.1, 1.2]];
        let upstream = vec![vec![1.0], vec![-2.0]];
        let (_, dq) = sampling_vjp(&map, &queries, 4, &upstream).unwrap();
        for d in dq {
            assert!(d[0].abs() < 1e-12 && d[1].abs() < 1e-12);
        }
    }

    #[test]
    fn feature_map_file_roundtrip() {
        let dir = std::env::temp_dir().join(format!("dgn_dgnf_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("map.dgnf");
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut map = GridFeatureMap::zeros(6, 3);
        for v in map.data.iter_mut() {
            *v = (rng.random_range(-10.0..10.0) as f32) as f64; // f32-exact values
        }
        save_feature_map(&path, &map).unwrap();
        let back = load_feature_map(&path).unwrap();
        assert_eq!(map, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
