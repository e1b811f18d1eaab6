//! Multi-resolution mesh hierarchies: quadric-error-metric edge collapse,
//! fine-to-coarse vertex nesting for pooling, cross-level frame alignment,
//! and the coarse-to-fine multiscale frame solve.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use num_complex::Complex64;

use crate::frames::{
    self, connection_coefficients, extract_frames, match_frames, singularity_indices, Connection,
    FrameAtlas, FrameError, RoSyField, RosyOptions,
};
use crate::geom::{self, Vec3};
use crate::mesh::{MeshError, TangentBasis, Topology, TriMesh};

#[derive(Debug, thiserror::Error)]
pub enum HierarchyError {
    #[error("level targets must be strictly decreasing and >= 4")]
    BadTargets,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

#[derive(Debug, Clone)]
pub struct SimplifyResult {
    pub mesh: TriMesh,
    /// Fine vertex -> coarse vertex index.
    pub parent_of: Vec<usize>,
    /// False when the target could not be reached without breaking
    /// manifoldness; mesh holds the achieved count.
    pub reached_target: bool,
}

/// Symmetric 4x4 quadric stored as its 10 upper-triangular entries.
#[derive(Debug, Clone, Copy, Default)]
struct Quadric {
    q: [f64; 10], // order: 00 01 02 03 11 12 13 22 23 33
}

impl Quadric {
    fn from_plane(n: Vec3, d: f64, weight: f64) -> Self {
        let p = [n[0], n[1], n[2], d];
        let mut q = [0.0; 10];
        let mut k = 0;
        for i in 0..4 {
            for j in i..4 {
                q[k] = weight * p[i] * p[j];
                k += 1;
            }
        }
        Quadric { q }
    }

    fn add(&mut self, other: &Quadric) {
        for (a, b) in self.q.iter_mut().zip(&other.q) {
            *a += b;
        }
    }

    fn full(&self) -> [[f64; 4]; 4] {
        let q = &self.q;
        [
            [q[0], q[1], q[2], q[3]],
            [q[1], q[4], q[5], q[6]],
            [q[2], q[5], q[7], q[8]],
            [q[3], q[6], q[8], q[9]],
        ]
    }

    fn cost(&self, p: Vec3) -> f64 {
        let m = self.full();
        let v = [p[0], p[1], p[2], 1.0];
        let mut s = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                s += v[i] * m[i][j] * v[j];
            }
        }
        s
    }

    /// Quadric-optimal position, or None when the 3x3 block is
    /// ill-conditioned (Frobenius condition estimate > 1e8).
    fn optimal_position(&self) -> Option<Vec3> {
        let m = self.full();
        let a = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        let b = [-m[0][3], -m[1][3], -m[2][3]];
        let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
            - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
        if det.abs() < 1e-300 {
            return None;
        }
        let inv = [
            [
                (a[1][1] * a[2][2] - a[1][2] * a[2][1]) / det,
                (a[0][2] * a[2][1] - a[0][1] * a[2][2]) / det,
                (a[0][1] * a[1][2] - a[0][2] * a[1][1]) / det,
            ],
            [
                (a[1][2] * a[2][0] - a[1][0] * a[2][2]) / det,
                (a[0][0] * a[2][2] - a[0][2] * a[2][0]) / det,
                (a[0][2] * a[1][0] - a[0][0] * a[1][2]) / det,
            ],
            [
                (a[1][0] * a[2][1] - a[1][1] * a[2][0]) / det,
                (a[0][1] * a[2][0] - a[0][0] * a[2][1]) / det,
                (a[0][0] * a[1][1] - a[0][1] * a[1][0]) / det,
            ],
        ];
        let frob = |m: &[[f64; 3]; 3]| -> f64 {
            m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
        };
        let cond = frob(&a) * frob(&inv);
        if !cond.is_finite() || cond > 1e8 {
            return None;
        }
        Some(geom::mat_vec(&inv, b))
    }
}

#[derive(Debug, Clone, Copy)]
struct HeapCost(f64, u64);

impl PartialEq for HeapCost {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}
impl Eq for HeapCost {}
impl PartialOrd for HeapCost {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapCost {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Iterative edge collapse by minimal quadric error. Collapses that break
/// the link condition or flip a surviving triangle normal are skipped. Ties
/// break by insertion sequence for determinism.
pub fn simplify_qem(mesh: &TriMesh, topo: &Topology, target_vertices: usize) -> SimplifyResult {
    let nv = mesh.vertex_count();
    let mut positions = mesh.positions.clone();
    let mut quadrics = vec![Quadric::default(); nv];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let n = mesh.face_normal(t);
        let d = -geom::dot(n, mesh.positions[tri[0]]);
        let q = Quadric::from_plane(n, d, mesh.triangle_area(t));
        for &v in tri {
            quadrics[v].add(&q);
        }
    }

    let mut tris: Vec<[usize; 3]> = mesh.triangles.clone();
    let mut tri_alive = vec![true; tris.len()];
    let mut v_alive = vec![true; nv];
    let mut v_tris: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nv];
    for (t, tri) in tris.iter().enumerate() {
        for &v in tri {
            v_tris[v].insert(t);
        }
    }
    let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nv];
    for &(u, v) in &topo.edges {
        neighbors[u].insert(v);
        neighbors[v].insert(u);
    }
    let mut version = vec![0u64; nv];
    let mut rep: Vec<usize> = (0..nv).collect();

    struct Candidate {
        u: usize,
        v: usize,
        vu: u64,
        vv: u64,
        pos: Vec3,
    }
    let mut heap: BinaryHeap<Reverse<(HeapCost, usize)>> = BinaryHeap::new();
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut seq = 0u64;

    let push_edge = |u: usize,
                         v: usize,
                         positions: &[Vec3],
                         quadrics: &[Quadric],
                         version: &[u64],
                         heap: &mut BinaryHeap<Reverse<(HeapCost, usize)>>,
                         candidates: &mut Vec<Candidate>,
                         seq: &mut u64| {
        let mut q = quadrics[u];
        q.add(&quadrics[v]);
        let pos = q
            .optimal_position()
            .unwrap_or_else(|| geom::scale(geom::add(positions[u], positions[v]), 0.5));
        let cost = q.cost(pos).max(0.0);
        let id = candidates.len();
        candidates.push(Candidate {
            u,
            v,
            vu: version[u],
            vv: version[v],
            pos,
        });
        heap.push(Reverse((HeapCost(cost, *seq), id)));
        *seq += 1;
    };

    for &(u, v) in &topo.edges {
        push_edge(u, v, &positions, &quadrics, &version, &mut heap, &mut candidates, &mut seq);
    }

    let mut alive_count = nv;
    let mut reached_target = alive_count <= target_vertices;

    while alive_count > target_vertices {
        let Some(Reverse((_, id))) = heap.pop() else {
            break;
        };
        let c = &candidates[id];
        let (u, v) = (c.u, c.v);
        if !v_alive[u] || !v_alive[v] || version[u] != c.vu || version[v] != c.vv {
            continue;
        }
        if !neighbors[u].contains(&v) {
            continue;
        }

        // Link condition: common neighbors must be exactly the opposite
        // vertices of the faces shared by the edge.
        let shared_faces: Vec<usize> = v_tris[u].intersection(&v_tris[v]).copied().collect();
        let common: BTreeSet<usize> = neighbors[u].intersection(&neighbors[v]).copied().collect();
        if common.len() != shared_faces.len() || shared_faces.is_empty() {
            continue;
        }

        // Normal-flip check on every triangle that survives the collapse.
        let pos = c.pos;
        let mut flips = false;
        for &t in v_tris[u].union(&v_tris[v]) {
            if !tri_alive[t] || shared_faces.contains(&t) {
                continue;
            }
            let tri = tris[t];
            let old = [positions[tri[0]], positions[tri[1]], positions[tri[2]]];
            let mut new = old;
            for (k, &w) in tri.iter().enumerate() {
                if w == u || w == v {
                    new[k] = pos;
                }
            }
            let n_old = geom::cross(geom::sub(old[1], old[0]), geom::sub(old[2], old[0]));
            let n_new = geom::cross(geom::sub(new[1], new[0]), geom::sub(new[2], new[0]));
            if geom::dot(n_old, n_new) <= 1e-14 {
                flips = true;
                break;
            }
        }
        if flips {
            continue;
        }

        // Collapse v into u at the optimal position.
        positions[u] = pos;
        let qv = quadrics[v];
        quadrics[u].add(&qv);
        v_alive[v] = false;
        rep[v] = u;
        alive_count -= 1;

        for &t in &shared_faces {
            tri_alive[t] = false;
            for &w in &tris[t] {
                v_tris[w].remove(&t);
            }
        }
        let v_faces: Vec<usize> = v_tris[v].iter().copied().collect();
        for t in v_faces {
            for w in tris[t].iter_mut() {
                if *w == v {
                    *w = u;
                }
            }
            v_tris[u].insert(t);
        }
        v_tris[v].clear();

        let v_neigh: Vec<usize> = neighbors[v].iter().copied().collect();
        for w in v_neigh {
            neighbors[w].remove(&v);
            if w != u {
                neighbors[w].insert(u);
                neighbors[u].insert(w);
            }
        }
        neighbors[v].clear();
        neighbors[u].remove(&u);
        neighbors[u].remove(&v);

        version[u] += 1;
        let u_neigh: Vec<usize> = neighbors[u].iter().copied().collect();
        for w in u_neigh {
            push_edge(
                u.min(w),
                u.max(w),
                &positions,
                &quadrics,
                &version,
                &mut heap,
                &mut candidates,
                &mut seq,
            );
        }
        if alive_count <= target_vertices {
            reached_target = true;
        }
    }

    // Compact surviving vertices in index order.
    let mut coarse_index = vec![usize::MAX; nv];
    let mut coarse_positions = Vec::new();
    for i in 0..nv {
        if v_alive[i] {
            coarse_index[i] = coarse_positions.len();
            coarse_positions.push(positions[i]);
        }
    }
    let resolve = |mut i: usize| -> usize {
        while rep[i] != i {
            i = rep[i];
        }
        i
    };
    let parent_of: Vec<usize> = (0..nv).map(|i| coarse_index[resolve(i)]).collect();
    let coarse_tris: Vec<[usize; 3]> = tris
        .iter()
        .enumerate()
        .filter(|&(t, _)| tri_alive[t])
        .map(|(_, tri)| [coarse_index[tri[0]], coarse_index[tri[1]], coarse_index[tri[2]]])
        .collect();

    SimplifyResult {
        mesh: TriMesh::new(coarse_positions, coarse_tris),
        parent_of,
        reached_target,
    }
}

/// One hierarchy level with everything the conv layers need.
#[derive(Debug, Clone)]
pub struct Level {
    pub mesh: TriMesh,
    pub topo: Topology,
    pub basis: TangentBasis,
    pub conn: Connection,
    pub field: RoSyField,
    pub atlas: FrameAtlas,
}

#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub n: usize,
    /// Level 0 is the finest.
    pub levels: Vec<Level>,
    /// parent_of[k]: level-k vertex -> level-(k+1) vertex.
    pub parent_of: Vec<Vec<usize>>,
    /// group_offset[k][c]: offset aligning fine vertex c's groups to its
    /// parent's groups (group i of parent matches group i+offset of child).
    pub group_offset: Vec<Vec<u8>>,
}

fn prepare_level_mesh(mut mesh: TriMesh) -> Result<(TriMesh, Topology, TangentBasis, Connection), HierarchyError> {
    let topo = mesh.validate()?;
    mesh.compute_vertex_geometry(&topo);
    let basis = mesh.tangent_basis();
    let conn = connection_coefficients(&mesh, &topo, &basis)?;
    Ok((mesh, topo, basis, conn))
}

/// Simplifies level by level, then solves the frame field coarse-to-fine:
/// the coarsest level from scratch, each finer level initialized by its
/// parents' field re-expressed through the minimal normal-alignment
/// rotation and refined by warm-started conjugate gradient.
pub fn build_hierarchy(
    mesh: TriMesh,
    level_targets: &[usize],
    opts: &RosyOptions,
) -> Result<Hierarchy, HierarchyError> {
    let mut prev = mesh.vertex_count();
    for &t in level_targets {
        if t >= prev || t < 4 {
            return Err(HierarchyError::BadTargets);
        }
        prev = t;
    }

    // Simplify and prepare geometry for every level.
    let (m0, t0, b0, c0) = prepare_level_mesh(mesh)?;
    let mut meshes = vec![(m0, t0, b0, c0)];
    let mut parent_of = Vec::new();
    for &target in level_targets {
        let (m, t, _, _) = meshes.last().unwrap();
        let res = simplify_qem(m, t, target);
        parent_of.push(res.parent_of);
        meshes.push(prepare_level_mesh(res.mesh)?);
    }

    // Coarse-to-fine field solve.
    let n_levels = meshes.len();
    let mut fields: Vec<Option<RoSyField>> = vec![None; n_levels];
    {
        let (m, t, b, c) = &meshes[n_levels - 1];
        fields[n_levels - 1] = Some(frames::solve_rosy(m, t, c, b, opts)?);
    }
    for k in (0..n_levels - 1).rev() {
        let init = {
            let parent_field = fields[k + 1].as_ref().unwrap();
            let (_, _, fine_basis, _) = &meshes[k];
            let (_, _, coarse_basis, _) = &meshes[k + 1];
            let map = &parent_of[k];
            (0..map.len())
                .map(|c| {
                    let p = map[c];
                    transport_between_planes(
                        parent_field.values[p],
                        opts.n,
                        coarse_basis,
                        p,
                        fine_basis,
                        c,
                    )
                })
                .collect::<Vec<Complex64>>()
        };
        let (m, t, b, c) = &meshes[k];
        fields[k] = Some(frames::refine_rosy(m, t, c, b, opts, &init)?);
    }

    // Frames, matching, singularities per level.
    let mut levels = Vec::with_capacity(n_levels);
    for (k, (m, t, b, c)) in meshes.into_iter().enumerate() {
        let field = fields[k].take().unwrap();
        let mut atlas = extract_frames(&field, &b);
        match_frames(&mut atlas, &t, &c);
        singularity_indices(&mut atlas, &t, &c, &m.triangles);
        levels.push(Level {
            mesh: m,
            topo: t,
            basis: b,
            conn: c,
            field,
            atlas,
        });
    }

    // Cross-level group alignment.
    let mut group_offset = Vec::with_capacity(n_levels - 1);
    for k in 0..n_levels - 1 {
        let fine = &levels[k];
        let coarse = &levels[k + 1];
        let offsets: Vec<u8> = (0..fine.mesh.vertex_count())
            .map(|c| {
                let p = parent_of[k][c];
                cross_level_offset(&fine.atlas, &fine.basis, c, &coarse.atlas, &coarse.basis, p)
            })
            .collect();
        group_offset.push(offsets);
    }

    Ok(Hierarchy {
        n: opts.n,
        levels,
        parent_of,
        group_offset,
    })
}

/// Re-expresses a field value from one vertex tangent plane to another via
/// the minimal rotation aligning the normals.
pub fn transport_between_planes(
    value: Complex64,
    n: usize,
    from_basis: &TangentBasis,
    from: usize,
    to_basis: &TangentBasis,
    to: usize,
) -> Complex64 {
    let angle = value.arg() / n as f64;
    let dir = geom::add(
        geom::scale(from_basis.e0[from], angle.cos()),
        geom::scale(from_basis.e1[from], angle.sin()),
    );
    let rot = geom::rotation_between(from_basis.n[from], to_basis.n[to]);
    let moved = geom::mat_vec(&rot, dir);
    let a = geom::dot(moved, to_basis.e1[to]).atan2(geom::dot(moved, to_basis.e0[to]));
    Complex64::from_polar(1.0, n as f64 * a)
}

/// Offset m such that the child's frame F^m, rotated into the parent's
/// tangent plane, is closest to the parent's frame F^0.
fn cross_level_offset(
    fine_atlas: &FrameAtlas,
    fine_basis: &TangentBasis,
    child: usize,
    coarse_atlas: &FrameAtlas,
    coarse_basis: &TangentBasis,
    parent: usize,
) -> u8 {
    let n = fine_atlas.n;
    let dir = fine_atlas.frame_dir3(fine_basis, child, 0);
    let rot = geom::rotation_between(fine_basis.n[child], coarse_basis.n[parent]);
    let moved = geom::mat_vec(&rot, dir);
    let phi = geom::dot(moved, coarse_basis.e1[parent]).atan2(geom::dot(moved, coarse_basis.e0[parent]));
    let step = 2.0 * std::f64::consts::PI / n as f64;
    let target = coarse_atlas.frame_angle(parent, 0);
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for m in 0..n {
        let d = geom::wrap_angle(phi + step * m as f64 - target).abs();
        if d < best_dist - 1e-15 {
            best_dist = d;
            best = m;
        }
    }
    best as u8
}
