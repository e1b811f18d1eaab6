//! Procedural meshes and the synthetic datasets used for desk-scale
//! training runs: analytic primitives with seeded non-rigid radial
//! deformations and random rigid motions.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::geom::{self, Vec3};
use crate::mesh::TriMesh;

pub fn icosphere(subdivisions: u32, radius: f64) -> TriMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut positions: Vec<Vec3> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for p in &mut positions {
        *p = geom::normalize(*p);
    }
    let mut triangles: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for tri in &triangles {
            let mut mid = [0usize; 3];
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[k] = *midpoint.entry(key).or_insert_with(|| {
                    positions.push(geom::normalize(geom::scale(
                        geom::add(positions[a], positions[b]),
                        0.5,
                    )));
                    positions.len() - 1
                });
            }
            next.push([tri[0], mid[0], mid[2]]);
            next.push([tri[1], mid[1], mid[0]]);
            next.push([tri[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        triangles = next;
    }
    for p in &mut positions {
        *p = geom::scale(*p, radius);
    }
    TriMesh::new(positions, triangles)
}

/// Regular planar grid in the xy-plane, triangulated consistently with CCW
/// orientation seen from +z.
pub fn flat_grid(nx: usize, ny: usize, spacing: f64) -> TriMesh {
    let mut positions = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            positions.push([i as f64 * spacing, j as f64 * spacing, 0.0]);
        }
    }
    let idx = |i: usize, j: usize| j * nx + i;
    let mut triangles = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    TriMesh::new(positions, triangles)
}

/// Open cylinder around the z axis with outward normals.
pub fn cylinder(n_around: usize, n_rings: usize, radius: f64, height: f64) -> TriMesh {
    let mut positions = Vec::new();
    for j in 0..n_rings {
        let z = height * j as f64 / (n_rings - 1) as f64;
        for i in 0..n_around {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n_around as f64;
            positions.push([radius * a.cos(), radius * a.sin(), z]);
        }
    }
    let idx = |i: usize, j: usize| j * n_around + i % n_around;
    let mut triangles = Vec::new();
    for j in 0..n_rings - 1 {
        for i in 0..n_around {
            triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    TriMesh::new(positions, triangles)
}

pub fn torus(n_major: usize, n_minor: usize, big_r: f64, small_r: f64) -> TriMesh {
    let mut positions = Vec::new();
    for j in 0..n_minor {
        let b = 2.0 * std::f64::consts::PI * j as f64 / n_minor as f64;
        for i in 0..n_major {
            let a = 2.0 * std::f64::consts::PI * i as f64 / n_major as f64;
            let w = big_r + small_r * b.cos();
            positions.push([w * a.cos(), w * a.sin(), small_r * b.sin()]);
        }
    }
    let idx = |i: usize, j: usize| (j % n_minor) * n_major + i % n_major;
    let mut triangles = Vec::new();
    for j in 0..n_minor {
        for i in 0..n_major {
            triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
            triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
        }
    }
    TriMesh::new(positions, triangles)
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // Uniform rotation from a random unit quaternion.
    let u1: f64 = rng.gen_range(0.0..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let u3: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let (w, x, y, z) = (a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn random_rigid_motion(rng: &mut ChaCha8Rng) -> ([[f64; 3]; 3], Vec3) {
    let rot = random_rotation(rng);
    let t = [
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
        rng.gen_range(-2.0..2.0),
    ];
    (rot, t)
}

pub fn apply_rigid(mesh: &TriMesh, rot: &[[f64; 3]; 3], t: Vec3) -> TriMesh {
    TriMesh::new(
        mesh.positions
            .iter()
            .map(|&p| geom::add(geom::mat_vec(rot, p), t))
            .collect(),
        mesh.triangles.clone(),
    )
}

#[derive(Debug, Clone, Copy)]
struct Bump {
    center: Vec3,
    amplitude: f64,
    width: f64,
}

/// Scales each position away from the origin by smooth Gaussian bumps
/// centered at unit directions.
fn radial_deform(mesh: &mut TriMesh, bumps: &[Bump]) {
    for p in &mut mesh.positions {
        let d = geom::normalize(*p);
        let mut s = 1.0;
        for b in bumps {
            let t = 1.0 - geom::dot(d, b.center);
            s += b.amplitude * (-t * t / (b.width * b.width)).exp();
        }
        *p = geom::scale(*p, s);
    }
}

fn random_bumps(rng: &mut ChaCha8Rng, count: usize, amp_range: (f64, f64)) -> Vec<Bump> {
    (0..count)
        .map(|_| Bump {
            center: geom::normalize([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]),
            amplitude: rng.gen_range(amp_range.0..amp_range.1),
            width: rng.gen_range(0.3..0.6),
        })
        .collect()
}

pub const CLASS_NAMES: [&str; 3] = ["sphere", "torus", "ellipsoid"];

/// Labeled meshes for the 3-class shape classification task. Classes cycle
/// so any prefix is balanced.
pub fn generate_classification(count: usize, seed: u64) -> Vec<(TriMesh, usize)> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)));
        let mut mesh = match class {
            0 => {
                let mut m = icosphere(3, 1.0);
                radial_deform(&mut m, &random_bumps(&mut rng, 6, (0.02, 0.08)));
                m
            }
            1 => {
                let small = rng.gen_range(0.3..0.4);
                let mut m = torus(32, 16, 1.0, small);
                let bumps = random_bumps(&mut rng, 4, (0.01, 0.05));
                radial_deform(&mut m, &bumps);
                m
            }
            _ => {
                let mut m = icosphere(3, 1.0);
                for p in &mut m.positions {
                    *p = [p[0], 0.6 * p[1], 0.45 * p[2]];
                }
                radial_deform(&mut m, &random_bumps(&mut rng, 6, (0.05, 0.15)));
                m
            }
        };
        let (rot, t) = random_rigid_motion(&mut rng);
        mesh = apply_rigid(&mesh, &rot, t);
        out.push((mesh, class));
    }
    out
}

/// Per-vertex binary labels: 1 on bump regions, 0 elsewhere. The labels are
/// recoverable from local geometry, so they survive rigid motions.
pub fn generate_segmentation(count: usize, seed: u64) -> Vec<(TriMesh, Vec<usize>)> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xd134_2543_de82_ef95u64.wrapping_mul(i as u64 + 1)));
        let mut mesh = icosphere(3, 1.0);
        let bumps = random_bumps(&mut rng, 4, (0.2, 0.35));
        let labels: Vec<usize> = mesh
            .positions
            .iter()
            .map(|&p| {
                let d = geom::normalize(p);
                let on_bump = bumps
                    .iter()
                    .any(|b| (1.0 - geom::dot(d, b.center)) < b.width * b.width * 1.2);
                on_bump as usize
            })
            .collect();
        radial_deform(&mut mesh, &bumps);
        let (rot, t) = random_rigid_motion(&mut rng);
        mesh = apply_rigid(&mesh, &rot, t);
        out.push((mesh, labels));
    }
    out
}

/// Regression samples: a shared landmark bump layout with per-mesh random
/// amplitudes, deformed from the unit-sphere template. Targets are rest-pose
/// position and normal per vertex. Returns (template, samples).
pub fn generate_regression(count: usize, seed: u64) -> (TriMesh, Vec<(TriMesh, Vec<[f64; 6]>)>) {
    let template = icosphere(3, 1.0);
    // Fixed landmark layout shared by every sample.
    let mut layout_rng = ChaCha8Rng::seed_from_u64(0x5fcu64);
    let centers: Vec<Vec3> = (0..8)
        .map(|_| {
            geom::normalize([
                layout_rng.gen_range(-1.0..1.0),
                layout_rng.gen_range(-1.0..1.0),
                layout_rng.gen_range(-1.0..1.0),
            ])
        })
        .collect();
    let widths: Vec<f64> = (0..8).map(|k| 0.25 + 0.05 * k as f64).collect();

    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xa076_1d64_78bd_642fu64.wrapping_mul(i as u64 + 1)));
        let bumps: Vec<Bump> = centers
            .iter()
            .zip(&widths)
            .map(|(&center, &width)| Bump {
                center,
                width,
                amplitude: rng.gen_range(0.15..0.3),
            })
            .collect();
        let mut mesh = template.clone();
        radial_deform(&mut mesh, &bumps);
        let targets: Vec<[f64; 6]> = template
            .positions
            .iter()
            .map(|&p| [p[0], p[1], p[2], p[0], p[1], p[2]])
            .collect();
        let (rot, t) = random_rigid_motion(&mut rng);
        mesh = apply_rigid(&mesh, &rot, t);
        samples.push((mesh, targets));
    }
    (template, samples)
}
