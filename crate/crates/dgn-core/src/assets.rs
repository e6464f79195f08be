//! Procedurally generated rigged meshes: small rigs for tests and demos, and
//! the shipped hand asset (box palm with lofted finger tubes, 1721 vertices,
//! 16 parts: palm plus three bones for each of five fingers).
//!
//! All generators are deterministic. The hand is built as a closed,
//! consistently oriented surface: a gridded box palm with rectangular holes
//! bridged onto elliptical finger lofts. Finger cross sections are elliptical
//! on purpose, so every part's point spread has well-separated principal
//! axes and per-part similarity fits stay away from degeneracies.

use std::collections::HashMap;

use nalgebra::{Matrix3, Point3, Vector3};

use crate::mesh::{BoneFrame, Joint, RiggedMesh};

struct MeshBuilder {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
    weights: Vec<Vec<(usize, f64)>>,
}

impl MeshBuilder {
    fn new() -> Self {
        MeshBuilder {
            vertices: Vec::new(),
            faces: Vec::new(),
            weights: Vec::new(),
        }
    }

    fn add_vertex(&mut self, p: Point3<f64>, weights: Vec<(usize, f64)>) -> usize {
        self.vertices.push(p);
        self.weights.push(weights);
        self.vertices.len() - 1
    }

    fn quad(&mut self, a: usize, b: usize, c: usize, d: usize) {
        self.faces.push([a, b, c]);
        self.faces.push([a, c, d]);
    }

    /// Elliptical ring: CCW as seen from +(u x v).
    fn ring(
        &mut self,
        center: Point3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
        a: f64,
        b: f64,
        sides: usize,
        weights: Vec<(usize, f64)>,
    ) -> Vec<usize> {
        (0..sides)
            .map(|i| {
                let theta = 2.0 * std::f64::consts::PI * i as f64 / sides as f64;
                let p = center + a * theta.cos() * u + b * theta.sin() * v;
                self.add_vertex(p, weights.clone())
            })
            .collect()
    }

    /// Side wall between two equal rings; `upper` is further along the loft
    /// axis, both rings CCW when seen from that axis.
    fn tube(&mut self, lower: &[usize], upper: &[usize]) {
        let n = lower.len();
        for i in 0..n {
            let j = (i + 1) % n;
            self.faces.push([lower[i], upper[j], upper[i]]);
            self.faces.push([lower[i], lower[j], upper[j]]);
        }
    }

    /// Cone cap closing a ring at its +axis end.
    fn cap_out(&mut self, ring: &[usize], tip: usize) {
        let n = ring.len();
        for i in 0..n {
            self.faces.push([ring[i], ring[(i + 1) % n], tip]);
        }
    }

    /// Cone cap closing a ring at its -axis end.
    fn cap_in(&mut self, ring: &[usize], tip: usize) {
        let n = ring.len();
        for i in 0..n {
            self.faces.push([ring[(i + 1) % n], ring[i], tip]);
        }
    }

    /// Triangulate the collar between a hole rim in the surrounding surface
    /// and a smaller tube base ring. Loops are sorted by angle in the
    /// `(u, v)` basis (with `u x v` the outward face normal); the emitted
    /// strip is oriented to glue consistently with the surrounding quads and
    /// the tube wall. Both loops must be star-shaped around the center.
    fn bridge(
        &mut self,
        rim: &[usize],
        ring: &[usize],
        center: Point3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
    ) {
        let angle = |idx: usize, verts: &Vec<Point3<f64>>| -> f64 {
            let d = verts[idx] - center;
            d.dot(&v).atan2(d.dot(&u))
        };
        let mut inner: Vec<usize> = rim.to_vec();
        let mut outer: Vec<usize> = ring.to_vec();
        inner.sort_by(|&x, &y| {
            angle(x, &self.vertices)
                .partial_cmp(&angle(y, &self.vertices))
                .unwrap()
        });
        outer.sort_by(|&x, &y| {
            angle(x, &self.vertices)
                .partial_cmp(&angle(y, &self.vertices))
                .unwrap()
        });
        let (ni, no) = (inner.len(), outer.len());
        let two_pi = 2.0 * std::f64::consts::PI;
        let theta = |list: &[usize], k: usize, verts: &Vec<Point3<f64>>| -> f64 {
            angle(list[k % list.len()], verts) + (k / list.len()) as f64 * two_pi
        };
        let (mut i, mut j) = (0usize, 0usize);
        while i < ni || j < no {
            let ti = theta(&inner, i + 1, &self.vertices);
            let tj = theta(&outer, j + 1, &self.vertices);
            if (j < no && tj <= ti) || i >= ni {
                self.faces
                    .push([inner[i % ni], outer[(j + 1) % no], outer[j % no]]);
                j += 1;
            } else {
                self.faces
                    .push([inner[i % ni], inner[(i + 1) % ni], outer[j % no]]);
                i += 1;
            }
        }
    }

    /// Split the edge `(a, b)`: insert its midpoint into both adjacent faces.
    fn split_edge(&mut self, a: usize, b: usize) {
        let mid = Point3::from((self.vertices[a].coords + self.vertices[b].coords) / 2.0);
        let w = self.weights[a].clone();
        let m = self.add_vertex(mid, w);
        let old = std::mem::take(&mut self.faces);
        for f in old {
            let has = |x: usize, y: usize| {
                (0..3).any(|k| f[k] == x && f[(k + 1) % 3] == y)
                    || (0..3).any(|k| f[k] == y && f[(k + 1) % 3] == x)
            };
            if has(a, b) {
                // Preserve winding: replace b with m, then a with m.
                let mut f1 = f;
                let mut f2 = f;
                for s in f1.iter_mut() {
                    if *s == b {
                        *s = m;
                    }
                }
                for s in f2.iter_mut() {
                    if *s == a {
                        *s = m;
                    }
                }
                self.faces.push(f1);
                self.faces.push(f2);
            } else {
                self.faces.push(f);
            }
        }
    }

    fn finish(self, joints: Vec<Joint>) -> RiggedMesh {
        RiggedMesh {
            vertices: self.vertices,
            faces: self.faces,
            joints,
            skin_weights: self.weights,
        }
    }
}

fn joint(name: &str, parent: Option<usize>, pos: Point3<f64>, z_toward: Option<Point3<f64>>) -> Joint {
    let rotation = match z_toward {
        Some(target) => {
            let z = (target - pos).normalize();
            let up = Vector3::new(0.0, 0.0, 1.0);
            let x = if z.cross(&up).norm() > 1e-9 {
                z.cross(&up).normalize()
            } else {
                Vector3::new(1.0, 0.0, 0.0)
            };
            let y = z.cross(&x);
            Matrix3::from_columns(&[x, y, z])
        }
        None => Matrix3::identity(),
    };
    Joint {
        name: name.into(),
        parent,
        rest_position: pos,
        bone_frame: BoneFrame {
            rotation,
            translation: pos.coords,
        },
    }
}

/// Two-segment bar along +y: root part [0, 30], child part [30, 60], one
/// 50/50 blended ring at the boundary. 30 vertices, 2 parts.
pub fn two_part_bar() -> RiggedMesh {
    let mut b = MeshBuilder::new();
    let u = Vector3::new(0.0, 0.0, 1.0);
    let v = Vector3::new(1.0, 0.0, 0.0);
    let ring_at = |b: &mut MeshBuilder, y: f64, w: Vec<(usize, f64)>| -> Vec<usize> {
        b.ring(Point3::new(0.0, y, 0.0), u, v, 6.0, 4.0, 4, w)
    };
    let bottom = b.add_vertex(Point3::new(0.0, 0.0, 0.0), vec![(0, 1.0)]);
    let mut rings = Vec::new();
    for &(y, part) in &[(2.0, 0), (14.0, 0), (26.0, 0)] {
        rings.push(ring_at(&mut b, y, vec![(part, 1.0)]));
    }
    rings.push(ring_at(&mut b, 30.0, vec![(0, 0.5), (1, 0.5)]));
    for &(y, part) in &[(34.0, 1), (46.0, 1), (58.0, 1)] {
        rings.push(ring_at(&mut b, y, vec![(part, 1.0)]));
    }
    let top = b.add_vertex(Point3::new(0.0, 60.0, 0.0), vec![(1, 1.0)]);
    b.cap_in(&rings[0], bottom);
    for w in 0..rings.len() - 1 {
        let (lo, hi) = (rings[w].clone(), rings[w + 1].clone());
        b.tube(&lo, &hi);
    }
    b.cap_out(&rings[6], top);

    let joints = vec![
        joint("wrist", None, Point3::new(0.0, 0.0, 0.0), None),
        joint(
            "mid",
            Some(0),
            Point3::new(0.0, 30.0, 0.0),
            Some(Point3::new(0.0, 0.0, 0.0)),
        ),
    ];
    let mesh = b.finish(joints);
    debug_assert!(mesh.validate().is_ok());
    mesh
}

#[derive(Clone, Copy)]
enum AttachFace {
    /// y = depth face, holes indexed by (x cell, z cell).
    Knuckle,
    /// x = width face, holes indexed by (y cell, z cell).
    Side,
}

struct FingerSpec {
    face: AttachFace,
    /// Left/lower cell of the 2x2 hole along the face's first axis.
    cell: usize,
    /// Direction of the finger axis (unit, in the z = mid plane).
    dir: Vector3<f64>,
    /// Bone lengths (proximal, middle, distal); the tip closes the loft.
    lengths: [f64; 3],
    rings: usize,
    radius_a: f64,
    radius_b: f64,
}

struct HandSpec {
    width: f64,
    depth: f64,
    height: f64,
    nx: usize,
    ny: usize,
    nz: usize,
    hole_z_cell: usize,
    wrist: Point3<f64>,
    fingers: Vec<FingerSpec>,
    ring_sides: usize,
    /// Wrist-face edge splits that fine-tune the final vertex count.
    filler_splits: usize,
    /// Half-width of the skinning blend zone around joints (mm).
    blend: f64,
}

fn build_hand(spec: &HandSpec) -> RiggedMesh {
    let mut b = MeshBuilder::new();
    let (dx, dy, dz) = (
        spec.width / spec.nx as f64,
        spec.depth / spec.ny as f64,
        spec.height / spec.nz as f64,
    );

    // Joints: root wrist + (mcp, pip, dip) per finger, parts == joints.
    let mut joints = vec![joint("wrist", None, spec.wrist, None)];
    let mut finger_parts = Vec::new();
    for (f, fs) in spec.fingers.iter().enumerate() {
        let attach = match fs.face {
            AttachFace::Knuckle => Point3::new(
                (fs.cell as f64 + 1.0) * dx,
                spec.depth,
                (spec.hole_z_cell as f64 + 1.0) * dz,
            ),
            AttachFace::Side => Point3::new(
                spec.width,
                (fs.cell as f64 + 1.0) * dy,
                (spec.hole_z_cell as f64 + 1.0) * dz,
            ),
        };
        let mcp = attach;
        let pip = mcp + fs.dir * fs.lengths[0];
        let dip = pip + fs.dir * fs.lengths[1];
        let base = joints.len();
        joints.push(joint(&format!("f{f}_mcp"), Some(0), mcp, Some(spec.wrist)));
        joints.push(joint(&format!("f{f}_pip"), Some(base), pip, Some(mcp)));
        joints.push(joint(&format!("f{f}_dip"), Some(base + 1), dip, Some(pip)));
        finger_parts.push((base, attach));
    }

    // Box palm with lazily created vertices so hole interiors never exist.
    let mut index: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let mut hole_rings: Vec<Vec<usize>> = vec![Vec::new(); spec.fingers.len()];
    {
        let mut get = |b: &mut MeshBuilder, i: usize, j: usize, k: usize| -> usize {
            *index.entry((i, j, k)).or_insert_with(|| {
                b.add_vertex(
                    Point3::new(i as f64 * dx, j as f64 * dy, k as f64 * dz),
                    vec![(0, 1.0)],
                )
            })
        };
        let holes = |face: AttachFace, a: usize, kc: usize, fingers: &[FingerSpec]| -> bool {
            fingers.iter().any(|fs| {
                matches!(
                    (fs.face, face),
                    (AttachFace::Knuckle, AttachFace::Knuckle)
                        | (AttachFace::Side, AttachFace::Side)
                ) && (fs.cell..fs.cell + 2).contains(&a)
                    && (spec.hole_z_cell..spec.hole_z_cell + 2).contains(&kc)
            })
        };
        // z = 0 and z = height
        for j in 0..spec.ny {
            for i in 0..spec.nx {
                let (a, c, d, e) = (
                    get(&mut b, i, j, 0),
                    get(&mut b, i, j + 1, 0),
                    get(&mut b, i + 1, j + 1, 0),
                    get(&mut b, i + 1, j, 0),
                );
                b.quad(a, c, d, e);
                let (a, c, d, e) = (
                    get(&mut b, i, j, spec.nz),
                    get(&mut b, i + 1, j, spec.nz),
                    get(&mut b, i + 1, j + 1, spec.nz),
                    get(&mut b, i, j + 1, spec.nz),
                );
                b.quad(a, c, d, e);
            }
        }
        // y = 0 (wrist) and y = depth (knuckle, with holes)
        for k in 0..spec.nz {
            for i in 0..spec.nx {
                let (a, c, d, e) = (
                    get(&mut b, i, 0, k),
                    get(&mut b, i + 1, 0, k),
                    get(&mut b, i + 1, 0, k + 1),
                    get(&mut b, i, 0, k + 1),
                );
                b.quad(a, c, d, e);
                if !holes(AttachFace::Knuckle, i, k, &spec.fingers) {
                    let (a, c, d, e) = (
                        get(&mut b, i, spec.ny, k),
                        get(&mut b, i, spec.ny, k + 1),
                        get(&mut b, i + 1, spec.ny, k + 1),
                        get(&mut b, i + 1, spec.ny, k),
                    );
                    b.quad(a, c, d, e);
                }
            }
        }
        // x = 0 and x = width (with the thumb hole)
        for k in 0..spec.nz {
            for j in 0..spec.ny {
                let (a, c, d, e) = (
                    get(&mut b, 0, j, k),
                    get(&mut b, 0, j, k + 1),
                    get(&mut b, 0, j + 1, k + 1),
                    get(&mut b, 0, j + 1, k),
                );
                b.quad(a, c, d, e);
                if !holes(AttachFace::Side, j, k, &spec.fingers) {
                    let (a, c, d, e) = (
                        get(&mut b, spec.nx, j, k),
                        get(&mut b, spec.nx, j + 1, k),
                        get(&mut b, spec.nx, j + 1, k + 1),
                        get(&mut b, spec.nx, j, k + 1),
                    );
                    b.quad(a, c, d, e);
                }
            }
        }
        // Collect hole boundary rings (the 8 vertices around each 2x2 hole).
        for (f, fs) in spec.fingers.iter().enumerate() {
            let (a0, k0) = (fs.cell, spec.hole_z_cell);
            let ring_coords: [(usize, usize); 8] = [
                (a0, k0),
                (a0 + 1, k0),
                (a0 + 2, k0),
                (a0 + 2, k0 + 1),
                (a0 + 2, k0 + 2),
                (a0 + 1, k0 + 2),
                (a0, k0 + 2),
                (a0, k0 + 1),
            ];
            hole_rings[f] = ring_coords
                .iter()
                .map(|&(a, k)| match fs.face {
                    AttachFace::Knuckle => get(&mut b, a, spec.ny, k),
                    AttachFace::Side => get(&mut b, spec.nx, a, k),
                })
                .collect();
        }
    }

    // Fingers: lofted elliptical tubes bridged onto the hole rings.
    for ((fs, ring), &(base_joint, attach)) in spec
        .fingers
        .iter()
        .zip(&hole_rings)
        .zip(&finger_parts)
    {
        let total: f64 = fs.lengths.iter().sum();
        let dir = fs.dir;
        // Orthonormal ellipse axes with eu x ev = dir.
        let up = Vector3::new(0.0, 0.0, 1.0);
        let eu = up.cross(&dir).normalize();
        let ev = dir.cross(&eu);
        let t1 = fs.lengths[0];
        let t2 = fs.lengths[0] + fs.lengths[1];
        let weights_at = |t: f64| -> Vec<(usize, f64)> {
            let bl = spec.blend;
            let ramp = |x: f64| x.clamp(0.0, 1.0);
            if t < bl {
                let w = ramp((bl - t) / bl);
                if w >= 1.0 - 1e-12 {
                    vec![(0, 1.0)]
                } else {
                    vec![(0, w), (base_joint, 1.0 - w)]
                }
            } else if (t - t1).abs() <= bl {
                let w = ramp((t1 + bl - t) / (2.0 * bl));
                vec![(base_joint, w), (base_joint + 1, 1.0 - w)]
            } else if (t - t2).abs() <= bl {
                let w = ramp((t2 + bl - t) / (2.0 * bl));
                vec![(base_joint + 1, w), (base_joint + 2, 1.0 - w)]
            } else if t < t1 {
                vec![(base_joint, 1.0)]
            } else if t < t2 {
                vec![(base_joint + 1, 1.0)]
            } else {
                vec![(base_joint + 2, 1.0)]
            }
        };
        let mut rings: Vec<Vec<usize>> = Vec::with_capacity(fs.rings);
        for r in 0..fs.rings {
            let t = 1.0 + r as f64 * (total - 3.0) / (fs.rings - 1) as f64;
            let taper = 1.0 - 0.25 * t / total;
            let ring_v = b.ring(
                attach + dir * t,
                eu,
                ev,
                fs.radius_a * taper,
                fs.radius_b * taper,
                spec.ring_sides,
                weights_at(t),
            );
            rings.push(ring_v);
        }
        for w in rings.windows(2) {
            b.tube(&w[0], &w[1]);
        }
        let tip = b.add_vertex(attach + dir * total, vec![(base_joint + 2, 1.0)]);
        b.cap_out(rings.last().unwrap(), tip);
        // Bridge the palm hole ring to the first finger ring.
        let (bu, bv) = match fs.face {
            AttachFace::Knuckle => (Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 0.0)),
            AttachFace::Side => (Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.0, 0.0, 1.0)),
        };
        b.bridge(ring, &rings[0], attach, bu, bv);
    }

    // Fine-tune the vertex count with edge splits on the wrist face.
    for s in 0..spec.filler_splits {
        let i = 1 + s % (spec.nx - 2);
        let k = 1 + (s / (spec.nx - 2)) % (spec.nz - 1);
        let a = index[&(i, 0, k)];
        let c = index[&(i + 1, 0, k)];
        b.split_edge(a, c);
    }

    let mesh = b.finish(joints);
    debug_assert!(mesh.validate().is_ok(), "{:?}", mesh.validate());
    mesh
}

fn fan_dir(angle_deg: f64) -> Vector3<f64> {
    let a = angle_deg.to_radians();
    Vector3::new(a.sin(), a.cos(), 0.0)
}

/// The shipped hand: 1721 vertices, 16 parts (palm + 3 bones x 5 fingers),
/// millimeter units, fingers spread so that no two non-adjacent joints come
/// within the 5 mm collision threshold at rest.
pub fn hand_mesh() -> RiggedMesh {
    let thumb_dir = Vector3::new(0.82, 0.57, 0.0).normalize();
    let spec = HandSpec {
        width: 80.0,
        depth: 90.0,
        height: 24.0,
        nx: 16,
        ny: 18,
        nz: 4,
        hole_z_cell: 1,
        wrist: Point3::new(40.0, 15.0, 12.0),
        ring_sides: 12,
        filler_splits: 7,
        blend: 3.0,
        fingers: vec![
            FingerSpec {
                face: AttachFace::Knuckle,
                cell: 1,
                dir: fan_dir(-18.0),
                lengths: [26.0, 18.0, 14.0],
                rings: 15,
                radius_a: 4.6,
                radius_b: 3.4,
            },
            FingerSpec {
                face: AttachFace::Knuckle,
                cell: 5,
                dir: fan_dir(-6.0),
                lengths: [30.0, 20.0, 16.0],
                rings: 16,
                radius_a: 4.8,
                radius_b: 3.5,
            },
            FingerSpec {
                face: AttachFace::Knuckle,
                cell: 9,
                dir: fan_dir(6.0),
                lengths: [28.0, 19.0, 15.0],
                rings: 15,
                radius_a: 4.7,
                radius_b: 3.4,
            },
            FingerSpec {
                face: AttachFace::Knuckle,
                cell: 13,
                dir: fan_dir(18.0),
                lengths: [22.0, 16.0, 12.0],
                rings: 13,
                radius_a: 4.2,
                radius_b: 3.1,
            },
            FingerSpec {
                face: AttachFace::Side,
                cell: 10,
                dir: thumb_dir,
                lengths: [26.0, 18.0, 14.0],
                rings: 13,
                radius_a: 5.0,
                radius_b: 3.6,
            },
        ],
    };
    build_hand(&spec)
}

/// Small two-finger hand (7 parts) for fast end-to-end tests.
pub fn mini_hand() -> RiggedMesh {
    let spec = HandSpec {
        width: 40.0,
        depth: 40.0,
        height: 16.0,
        nx: 8,
        ny: 8,
        nz: 4,
        hole_z_cell: 1,
        wrist: Point3::new(20.0, 8.0, 8.0),
        ring_sides: 12,
        filler_splits: 0,
        blend: 2.5,
        fingers: vec![
            FingerSpec {
                face: AttachFace::Knuckle,
                cell: 1,
                dir: fan_dir(-12.0),
                lengths: [16.0, 12.0, 9.0],
                rings: 7,
                radius_a: 4.2,
                radius_b: 3.1,
            },
            FingerSpec {
                face: AttachFace::Knuckle,
                cell: 5,
                dir: fan_dir(12.0),
                lengths: [18.0, 13.0, 10.0],
                rings: 7,
                radius_a: 4.2,
                radius_b: 3.1,
            },
        ],
    };
    build_hand(&spec)
}
