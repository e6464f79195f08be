//! Rigged triangle mesh: geometry, skeleton, skinning weights, surface graph.
//!
//! Units are millimeters throughout. The skeleton is a rooted tree (root =
//! wrist, parent index -1 in the rig file) and every joint doubles as a hand
//! part for skinning: palm plus three bones per finger.

use std::collections::BinaryHeap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rest-pose rigid frame attached to a joint. `rotation` columns are the
/// frame axes expressed in model coordinates, `translation` is the frame
/// origin (the joint position). For non-root joints the z-axis points toward
/// the parent joint.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneFrame {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl BoneFrame {
    pub fn z_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into()
    }
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub rest_position: Point3<f64>,
    pub bone_frame: BoneFrame,
}

/// Triangle mesh with skeleton and per-vertex sparse skinning weights.
///
/// Invariants (checked by [`RiggedMesh::validate`]):
/// - every face index is in range and every vertex appears in some face;
/// - per-vertex weights are non-negative and sum to 1;
/// - joint parents form a rooted tree and bone frames are valid rotations
///   with the z-axis pointing at the parent joint.
#[derive(Debug, Clone)]
pub struct RiggedMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[usize; 3]>,
    pub joints: Vec<Joint>,
    /// Per vertex: sparse `(part index, weight)` pairs, parts == joints.
    pub skin_weights: Vec<Vec<(usize, f64)>>,
}

pub(crate) fn rotation_defect(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r;
    let mut defect: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            defect = defect.max((gram[(i, j)] - target).abs());
        }
    }
    if r.determinant() <= 0.0 {
        defect = defect.max(1.0);
    }
    defect
}

impl RiggedMesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn part_count(&self) -> usize {
        self.joints.len()
    }

    /// Part membership: index of the largest skinning weight (first wins ties).
    pub fn argmax_part(&self, vertex: usize) -> usize {
        let mut best = 0usize;
        let mut best_w = f64::NEG_INFINITY;
        for &(part, w) in &self.skin_weights[vertex] {
            if w > best_w {
                best_w = w;
                best = part;
            }
        }
        best
    }

    /// Largest skinning weight of a vertex.
    pub fn max_weight(&self, vertex: usize) -> f64 {
        self.skin_weights[vertex]
            .iter()
            .map(|&(_, w)| w)
            .fold(0.0, f64::max)
    }

    /// Topological order of joints, parents before children.
    pub fn joint_order(&self) -> Vec<usize> {
        let n = self.joints.len();
        let mut order = Vec::with_capacity(n);
        let mut placed = vec![false; n];
        while order.len() < n {
            for j in 0..n {
                if placed[j] {
                    continue;
                }
                match self.joints[j].parent {
                    None => {
                        order.push(j);
                        placed[j] = true;
                    }
                    Some(p) if placed[p] => {
                        order.push(j);
                        placed[j] = true;
                    }
                    _ => {}
                }
            }
        }
        order
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.vertices.len();
        let mut referenced = vec![false; nv];
        for (fi, f) in self.faces.iter().enumerate() {
            for &i in f {
                if i >= nv {
                    return Err(Error::FaceIndexOutOfRange {
                        face: fi,
                        index: i,
                        count: nv,
                    });
                }
                referenced[i] = true;
            }
        }
        if let Some(v) = referenced.iter().position(|&r| !r) {
            return Err(Error::UnreferencedVertex(v));
        }

        self.validate_skeleton()?;

        if self.skin_weights.len() != nv {
            return Err(Error::WeightCountMismatch {
                weights: self.skin_weights.len(),
                vertices: nv,
            });
        }
        let parts = self.joints.len();
        for (v, weights) in self.skin_weights.iter().enumerate() {
            let mut total = 0.0;
            for &(part, w) in weights {
                if part >= parts {
                    return Err(Error::PartIndexOutOfRange {
                        vertex: v,
                        part,
                        count: parts,
                    });
                }
                if w < 0.0 {
                    return Err(Error::NegativeWeight { vertex: v });
                }
                total += w;
            }
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::WeightsNotNormalizable { vertex: v, total });
            }
        }
        Ok(())
    }

    fn validate_skeleton(&self) -> Result<()> {
        let n = self.joints.len();
        let mut roots = 0usize;
        for (j, joint) in self.joints.iter().enumerate() {
            match joint.parent {
                None => roots += 1,
                Some(p) if p >= n => return Err(Error::SkeletonNotTree(j)),
                Some(_) => {}
            }
            // Walk to the root; more than n steps means a cycle.
            let mut cur = joint.parent;
            let mut steps = 0usize;
            while let Some(p) = cur {
                steps += 1;
                if steps > n {
                    return Err(Error::SkeletonNotTree(j));
                }
                cur = self.joints[p].parent;
            }
        }
        if roots != 1 {
            return Err(Error::SkeletonNotTree(0));
        }
        for (j, joint) in self.joints.iter().enumerate() {
            if rotation_defect(&joint.bone_frame.rotation) > 1e-9 {
                return Err(Error::BadBoneFrame { joint: j });
            }
            if let Some(p) = joint.parent {
                let dir = self.joints[p].rest_position - joint.rest_position;
                let norm = dir.norm();
                if norm < 1e-12 {
                    return Err(Error::BoneFrameAxis { joint: j });
                }
                let dir = dir / norm;
                if (joint.bone_frame.z_axis() - dir).amax() > 1e-6 {
                    return Err(Error::BoneFrameAxis { joint: j });
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Wavefront OBJ subset: `v x y z` and `f i j k` records.
// ---------------------------------------------------------------------------

pub fn load_obj(path: &Path) -> Result<(Vec<Point3<f64>>, Vec<[usize; 3]>)> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    parse_obj(reader)
}

pub fn parse_obj<R: BufRead>(reader: R) -> Result<(Vec<Point3<f64>>, Vec<[usize; 3]>)> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut warned: Vec<String> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let mut tokens = line.split_whitespace();
        let Some(record) = tokens.next() else {
            continue;
        };
        match record {
            "v" => {
                let mut coords = [0.0f64; 3];
                for c in coords.iter_mut() {
                    let tok = tokens.next().ok_or_else(|| Error::Parse {
                        line: lineno,
                        msg: "v record needs 3 coordinates".into(),
                    })?;
                    *c = tok.parse().map_err(|_| Error::Parse {
                        line: lineno,
                        msg: format!("bad coordinate {tok:?}"),
                    })?;
                }
                vertices.push(Point3::new(coords[0], coords[1], coords[2]));
            }
            "f" => {
                let idx: Vec<&str> = tokens.collect();
                if idx.len() != 3 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("only triangles supported, got {} indices", idx.len()),
                    });
                }
                let mut face = [0usize; 3];
                for (slot, tok) in face.iter_mut().zip(idx) {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| Error::Parse {
                        line: lineno,
                        msg: format!("bad face index {tok:?}"),
                    })?;
                    if i < 1 {
                        return Err(Error::Parse {
                            line: lineno,
                            msg: format!("face indices are 1-based, got {i}"),
                        });
                    }
                    *slot = (i - 1) as usize;
                }
                faces.push(face);
            }
            "#" => {}
            other => {
                if !warned.iter().any(|w| w == other) {
                    log::warn!("ignoring OBJ record type {other:?}");
                    warned.push(other.to_string());
                }
            }
        }
    }
    Ok((vertices, faces))
}

pub fn save_obj(path: &Path, vertices: &[Point3<f64>], faces: &[[usize; 3]]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in vertices {
        // Default float formatting round-trips f64 exactly.
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for f in faces {
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Rig file (JSON)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RigJointRecord {
    name: String,
    parent: i64,
    rest_position: [f64; 3],
    bone_frame: RigFrameRecord,
}

#[derive(Serialize, Deserialize)]
struct RigFrameRecord {
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct RigFile {
    joints: Vec<RigJointRecord>,
    skin_weights: Vec<Vec<(usize, f64)>>,
}

pub fn load_rig(path: &Path) -> Result<(Vec<Joint>, Vec<Vec<(usize, f64)>>)> {
    let file: RigFile = serde_json::from_reader(BufReader::new(std::fs::File::open(path)?))?;
    let joints = file
        .joints
        .into_iter()
        .map(|j| Joint {
            name: j.name,
            parent: (j.parent >= 0).then_some(j.parent as usize),
            rest_position: Point3::new(
                j.rest_position[0],
                j.rest_position[1],
                j.rest_position[2],
            ),
            bone_frame: BoneFrame {
                rotation: Matrix3::from_row_slice(&j.bone_frame.rotation),
                translation: Vector3::new(
                    j.bone_frame.translation[0],
                    j.bone_frame.translation[1],
                    j.bone_frame.translation[2],
                ),
            },
        })
        .collect();
    Ok((joints, file.skin_weights))
}

pub fn save_rig(path: &Path, joints: &[Joint], skin_weights: &[Vec<(usize, f64)>]) -> Result<()> {
    let file = RigFile {
        joints: joints
            .iter()
            .map(|j| RigJointRecord {
                name: j.name.clone(),
                parent: j.parent.map(|p| p as i64).unwrap_or(-1),
                rest_position: [j.rest_position.x, j.rest_position.y, j.rest_position.z],
                bone_frame: RigFrameRecord {
                    rotation: {
                        let r = &j.bone_frame.rotation;
                        [
                            r[(0, 0)],
                            r[(0, 1)],
                            r[(0, 2)],
                            r[(1, 0)],
                            r[(1, 1)],
                            r[(1, 2)],
                            r[(2, 0)],
                            r[(2, 1)],
                            r[(2, 2)],
                        ]
                    },
                    translation: [
                        j.bone_frame.translation.x,
                        j.bone_frame.translation.y,
                        j.bone_frame.translation.z,
                    ],
                },
            })
            .collect(),
        skin_weights: skin_weights.to_vec(),
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut out, &file)?;
    out.flush()?;
    Ok(())
}

/// Load mesh + rig, normalize skinning weights, and validate all invariants.
pub fn load_rigged_mesh(mesh_path: &Path, rig_path: &Path) -> Result<RiggedMesh> {
    let (vertices, faces) = load_obj(mesh_path)?;
    let (joints, raw_weights) = load_rig(rig_path)?;
    if raw_weights.len() != vertices.len() {
        return Err(Error::WeightCountMismatch {
            weights: raw_weights.len(),
            vertices: vertices.len(),
        });
    }
    let mut skin_weights = Vec::with_capacity(raw_weights.len());
    for (v, entries) in raw_weights.into_iter().enumerate() {
        let mut merged: Vec<(usize, f64)> = Vec::new();
        for (part, w) in entries {
            if w < 0.0 {
                return Err(Error::NegativeWeight { vertex: v });
            }
            match merged.iter_mut().find(|(p, _)| *p == part) {
                Some(slot) => slot.1 += w,
                None => merged.push((part, w)),
            }
        }
        let total: f64 = merged.iter().map(|&(_, w)| w).sum();
        if total < 1e-9 {
            return Err(Error::WeightsNotNormalizable { vertex: v, total });
        }
        for entry in merged.iter_mut() {
            entry.1 /= total;
        }
        skin_weights.push(merged);
    }
    let mesh = RiggedMesh {
        vertices,
        faces,
        joints,
        skin_weights,
    };
    mesh.validate()?;
    log::info!(
        "loaded rigged mesh: {} vertices, {} faces, {} joints",
        mesh.vertices.len(),
        mesh.faces.len(),
        mesh.joints.len()
    );
    Ok(mesh)
}

// ---------------------------------------------------------------------------
// Vertex normals
// ---------------------------------------------------------------------------

/// Area-weighted vertex normals for a posed copy of the mesh.
#[derive(Debug, Clone)]
pub struct VertexNormals {
    /// Unit normals; the zero vector where `valid` is false.
    pub normals: Vec<Vector3<f64>>,
    /// False for vertices touched only by zero-area faces.
    pub valid: Vec<bool>,
}

pub fn vertex_normals(mesh: &RiggedMesh, posed: &[Point3<f64>]) -> Result<VertexNormals> {
    if posed.len() != mesh.vertices.len() {
        return Err(Error::LengthMismatch {
            what: "posed vertices",
            got: posed.len(),
            expected: mesh.vertices.len(),
        });
    }
    let mut acc = vec![Vector3::zeros(); posed.len()];
    for f in &mesh.faces {
        let a = posed[f[0]];
        let b = posed[f[1]];
        let c = posed[f[2]];
        // Cross product = 2 * area * unit normal, so summing is area weighting.
        let n = (b - a).cross(&(c - a));
        if n.norm_squared() > 0.0 {
            acc[f[0]] += n;
            acc[f[1]] += n;
            acc[f[2]] += n;
        }
    }
    let mut normals = Vec::with_capacity(acc.len());
    let mut valid = Vec::with_capacity(acc.len());
    for n in acc {
        let norm = n.norm();
        if norm < 1e-12 {
            normals.push(Vector3::zeros());
            valid.push(false);
        } else {
            normals.push(n / norm);
            valid.push(true);
        }
    }
    Ok(VertexNormals { normals, valid })
}

// ---------------------------------------------------------------------------
// Surface graph and geodesic distances
// ---------------------------------------------------------------------------

/// Edge graph of the mesh surface with Euclidean edge lengths.
#[derive(Debug, Clone)]
pub struct SurfaceGraph {
    /// Per vertex: `(neighbor, edge length)`, neighbors sorted by index.
    pub adjacency: Vec<Vec<(usize, f64)>>,
}

impl SurfaceGraph {
    pub fn from_mesh(mesh: &RiggedMesh) -> Result<Self> {
        Self::from_parts(&mesh.vertices, &mesh.faces)
    }

    pub fn from_parts(vertices: &[Point3<f64>], faces: &[[usize; 3]]) -> Result<Self> {
        let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); vertices.len()];
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(faces.len() * 3);
        for f in faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                edges.push((a.min(b), a.max(b)));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        for (a, b) in edges {
            let len = (vertices[a] - vertices[b]).norm();
            if len <= 0.0 {
                return Err(Error::InvalidMesh(format!(
                    "zero-length edge between vertices {a} and {b}"
                )));
            }
            adjacency[a].push((b, len));
            adjacency[b].push((a, len));
        }
        for list in adjacency.iter_mut() {
            list.sort_unstable_by(|x, y| x.0.cmp(&y.0));
        }
        let graph = SurfaceGraph { adjacency };
        graph.check_connected()?;
        Ok(graph)
    }

    pub fn vertex_count(&self) -> usize {
        self.adjacency.len()
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.adjacency.len();
        if n == 0 {
            return Ok(());
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(u, _) in &self.adjacency[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        match seen.iter().position(|&s| !s) {
            Some(u) => Err(Error::Disconnected(u)),
            None => Ok(()),
        }
    }
}

struct HeapNode {
    vertex: usize,
    dist: f64,
}

impl PartialEq for HeapNode {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist
    }
}
impl Eq for HeapNode {}
impl PartialOrd for HeapNode {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapNode {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap on distance; tie-break on index for determinism.
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap()
            .then(other.vertex.cmp(&self.vertex))
    }
}

fn dijkstra(graph: &SurfaceGraph, source: usize) -> Vec<f64> {
    let n = graph.vertex_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(HeapNode {
        vertex: source,
        dist: 0.0,
    });
    while let Some(HeapNode { vertex, dist: d }) = heap.pop() {
        if done[vertex] {
            continue;
        }
        done[vertex] = true;
        for &(u, len) in &graph.adjacency[vertex] {
            let cand = d + len;
            if cand < dist[u] {
                dist[u] = cand;
                heap.push(HeapNode {
                    vertex: u,
                    dist: cand,
                });
            }
        }
    }
    dist
}

/// Shortest-path distances along mesh edges from each source to every vertex.
pub fn geodesic_distances(graph: &SurfaceGraph, sources: &[usize]) -> Result<Vec<Vec<f64>>> {
    graph.check_connected()?;
    let rows: Vec<Vec<f64>> = sources
        .par_iter()
        .map(|&s| dijkstra(graph, s))
        .collect();
    Ok(rows)
}

/// All-pairs geodesic distance matrix (row-major, `n x n`).
pub fn all_pairs_geodesics(graph: &SurfaceGraph) -> Result<Vec<Vec<f64>>> {
    let sources: Vec<usize> = (0..graph.vertex_count()).collect();
    geodesic_distances(graph, &sources)
}
