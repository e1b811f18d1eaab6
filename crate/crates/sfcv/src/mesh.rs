//! Triangle mesh container, manifold validation, and per-vertex derived
//! geometry (normals, one-ring areas, principal curvatures, tangent bases).

use std::collections::HashMap;

use crate::geom::{self, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("empty mesh")]
    Empty,
    #[error("triangle {0} repeats a vertex index")]
    DuplicateIndex(usize),
    #[error("triangle {0} references vertex {1} out of range")]
    IndexOutOfRange(usize, usize),
    #[error("triangle {0} has zero area")]
    DegenerateTriangle(usize),
    #[error("non-manifold edge ({0}, {1}): shared by more than two triangles")]
    NonManifoldEdge(usize, usize),
    #[error("inconsistent orientation at edge ({0}, {1}): directed edge repeated")]
    InconsistentOrientation(usize, usize),
    #[error("non-manifold vertex {0}: incident triangles form more than one fan")]
    NonManifoldVertex(usize),
    #[error("zero-length edge ({0}, {1})")]
    ZeroLengthEdge(usize, usize),
}

/// Indexed triangle mesh. The derived per-vertex block is empty until
/// [`TriMesh::compute_vertex_geometry`] fills it.
#[derive(Debug, Clone, Default)]
pub struct TriMesh {
    pub positions: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub normals: Vec<Vec3>,
    pub one_ring_area: Vec<f64>,
    pub k_max: Vec<f64>,
    pub k_min: Vec<f64>,
    pub dir_max: Vec<Vec3>,
}

/// Per-vertex orthonormal right-handed triple (e0, e1, n).
#[derive(Debug, Clone)]
pub struct TangentBasis {
    pub e0: Vec<Vec3>,
    pub e1: Vec<Vec3>,
    pub n: Vec<Vec3>,
}

/// Edge and adjacency tables shared by the downstream modules. Edge order is
/// canonical: undirected edges (u, v) with u < v, sorted lexicographically.
#[derive(Debug, Clone)]
pub struct Topology {
    pub edges: Vec<(usize, usize)>,
    pub edge_index: HashMap<(usize, usize), usize>,
    /// Sorted one-ring vertex neighbors.
    pub neighbors: Vec<Vec<usize>>,
    pub vertex_triangles: Vec<Vec<usize>>,
    /// True when the edge borders fewer than two triangles.
    pub boundary_edge: Vec<bool>,
}

/// Structured summary emitted by validation and geometry derivation.
#[derive(Debug, Clone, Default)]
pub struct QualityReport {
    pub vertex_count: usize,
    pub triangle_count: usize,
    pub edge_count: usize,
    pub has_boundary: bool,
    pub degenerate_fit_vertices: Vec<usize>,
}

impl QualityReport {
    pub fn to_text(&self) -> String {
        format!(
            "vertices {}\ntriangles {}\nedges {}\nboundary {}\ndegenerate_fits {}\n",
            self.vertex_count,
            self.triangle_count,
            self.edge_count,
            self.has_boundary,
            self.degenerate_fit_vertices.len()
        )
    }
}

impl TriMesh {
    pub fn new(positions: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Self {
        TriMesh {
            positions,
            triangles,
            ..Default::default()
        }
    }

    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    pub fn has_geometry(&self) -> bool {
        self.normals.len() == self.positions.len() && !self.positions.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let ab = geom::sub(self.positions[b], self.positions[a]);
        let ac = geom::sub(self.positions[c], self.positions[a]);
        0.5 * geom::norm(geom::cross(ab, ac))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    pub fn face_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangles[t];
        let ab = geom::sub(self.positions[b], self.positions[a]);
        let ac = geom::sub(self.positions[c], self.positions[a]);
        geom::normalize(geom::cross(ab, ac))
    }

    /// Euler characteristic V - E + F.
    pub fn euler_characteristic(&self, topo: &Topology) -> i64 {
        self.positions.len() as i64 - topo.edges.len() as i64 + self.triangles.len() as i64
    }

    /// Checks manifoldness, orientation consistency, and triangle sanity;
    /// returns the adjacency tables on success.
    pub fn validate(&self) -> Result<Topology, MeshError> {
        if self.positions.is_empty() || self.triangles.is_empty() {
            return Err(MeshError::Empty);
        }
        let nv = self.positions.len();
        let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
        let mut undirected: HashMap<(usize, usize), usize> = HashMap::new();
        let mut vertex_triangles = vec![Vec::new(); nv];
        for (t, tri) in self.triangles.iter().enumerate() {
            let [a, b, c] = *tri;
            if a == b || b == c || a == c {
                return Err(MeshError::DuplicateIndex(t));
            }
            for &v in tri {
                if v >= nv {
                    return Err(MeshError::IndexOutOfRange(t, v));
                }
                vertex_triangles[v].push(t);
            }
            if self.triangle_area(t) <= 0.0 {
                return Err(MeshError::DegenerateTriangle(t));
            }
            for (u, v) in [(a, b), (b, c), (c, a)] {
                if directed.insert((u, v), t).is_some() {
                    return Err(MeshError::InconsistentOrientation(u, v));
                }
                let key = (u.min(v), u.max(v));
                let cnt = undirected.entry(key).or_insert(0);
                *cnt += 1;
                if *cnt > 2 {
                    return Err(MeshError::NonManifoldEdge(key.0, key.1));
                }
            }
        }

        let mut edges: Vec<(usize, usize)> = undirected.keys().copied().collect();
        edges.sort_unstable();
        let edge_index: HashMap<(usize, usize), usize> =
            edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let boundary_edge: Vec<bool> = edges.iter().map(|e| undirected[e] < 2).collect();

        let mut neighbors = vec![Vec::new(); nv];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }

        // Vertex-manifold: incident triangles of each vertex must form a
        // single fan connected across shared incident edges.
        for v in 0..nv {
            let tris = &vertex_triangles[v];
            if tris.is_empty() {
                continue;
            }
            let local: HashMap<usize, usize> =
                tris.iter().enumerate().map(|(i, &t)| (t, i)).collect();
            let mut adj = vec![Vec::new(); tris.len()];
            let mut by_edge: HashMap<usize, Vec<usize>> = HashMap::new();
            for (i, &t) in tris.iter().enumerate() {
                for &w in &self.triangles[t] {
                    if w == v {
                        continue;
                    }
                    let key = (v.min(w), v.max(w));
                    by_edge.entry(edge_index[&key]).or_default().push(i);
                }
            }
            for (_, ts) in by_edge {
                if ts.len() == 2 {
                    adj[ts[0]].push(ts[1]);
                    adj[ts[1]].push(ts[0]);
                }
            }
            let mut seen = vec![false; tris.len()];
            let mut stack = vec![0usize];
            seen[0] = true;
            let mut count = 0;
            while let Some(i) = stack.pop() {
                count += 1;
                for &j in &adj[i] {
                    if !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            let _ = local;
            if count != tris.len() {
                return Err(MeshError::NonManifoldVertex(v));
            }
        }

        Ok(Topology {
            edges,
            edge_index,
            neighbors,
            vertex_triangles,
            boundary_edge,
        })
    }

    /// Fills normals, one-ring areas, and principal curvatures from a
    /// quadratic height fit over the 2-ring. Returns the quality report.
    pub fn compute_vertex_geometry(&mut self, topo: &Topology) -> QualityReport {
        let nv = self.positions.len();
        let mut normals = vec![[0.0; 3]; nv];
        let mut area = vec![0.0; nv];
        for (t, tri) in self.triangles.iter().enumerate() {
            let [a, b, c] = *tri;
            let ab = geom::sub(self.positions[b], self.positions[a]);
            let ac = geom::sub(self.positions[c], self.positions[a]);
            let fnormal = geom::cross(ab, ac); // length = 2 * area
            let fa = self.triangle_area(t);
            for &v in &[a, b, c] {
                normals[v] = geom::add(normals[v], fnormal);
                area[v] += fa;
            }
        }
        for n in &mut normals {
            *n = geom::normalize(*n);
        }

        let mut k_max = vec![0.0; nv];
        let mut k_min = vec![0.0; nv];
        let mut dir_max = vec![[0.0; 3]; nv];
        let mut report = QualityReport {
            vertex_count: nv,
            triangle_count: self.triangles.len(),
            edge_count: topo.edges.len(),
            has_boundary: topo.boundary_edge.iter().any(|&b| b),
            degenerate_fit_vertices: Vec::new(),
        };

        for v in 0..nv {
            let n = normals[v];
            let (e0, e1) = tangent_frame_for_normal(n);
            // 2-ring neighborhood, excluding v itself.
            let mut ring: Vec<usize> = Vec::new();
            for &u in &topo.neighbors[v] {
                if !ring.contains(&u) {
                    ring.push(u);
                }
                for &w in &topo.neighbors[u] {
                    if w != v && !ring.contains(&w) {
                        ring.push(w);
                    }
                }
            }
            ring.sort_unstable();
            if ring.len() < 5 {
                report.degenerate_fit_vertices.push(v);
                dir_max[v] = e0;
                continue;
            }
            // Least-squares fit h = (a u^2 + 2 b u v + c v^2) / 2 over the
            // ring, with the coefficient vector (a, b, c).
            let mut ata = [[0.0; 3]; 3];
            let mut atb = [0.0; 3];
            for &y in &ring {
                let d = geom::sub(self.positions[y], self.positions[v]);
                let u = geom::dot(d, e0);
                let w = geom::dot(d, e1);
                let h = geom::dot(d, n);
                let row = [0.5 * u * u, u * w, 0.5 * w * w];
                for i in 0..3 {
                    for j in 0..3 {
                        ata[i][j] += row[i] * row[j];
                    }
                    atb[i] += row[i] * h;
                }
            }
            match solve3(&ata, &atb) {
                Some([a, b, c]) => {
                    // Outward normals: the surface bends away from n, so the
                    // shape operator is the negated fitted Hessian.
                    let (l1, l2, dir) = eig2(-a, -b, -c);
                    k_max[v] = l1;
                    k_min[v] = l2;
                    dir_max[v] = geom::normalize(geom::add(
                        geom::scale(e0, dir[0]),
                        geom::scale(e1, dir[1]),
                    ));
                }
                None => {
                    report.degenerate_fit_vertices.push(v);
                    dir_max[v] = e0;
                }
            }
        }

        self.normals = normals;
        self.one_ring_area = area;
        self.k_max = k_max;
        self.k_min = k_min;
        self.dir_max = dir_max;
        report
    }

    /// Builds the per-vertex tangent bases. Requires normals.
    pub fn tangent_basis(&self) -> TangentBasis {
        assert!(self.has_geometry(), "tangent_basis requires vertex geometry");
        let mut e0 = Vec::with_capacity(self.positions.len());
        let mut e1 = Vec::with_capacity(self.positions.len());
        for &n in &self.normals {
            let (a, b) = tangent_frame_for_normal(n);
            e0.push(a);
            e1.push(b);
        }
        TangentBasis {
            e0,
            e1,
            n: self.normals.clone(),
        }
    }
}

/// Deterministic tangent frame: project the global axis least aligned with n
/// (ties broken by lowest axis index) onto the tangent plane, then complete
/// the right-handed triple.
pub fn tangent_frame_for_normal(n: Vec3) -> (Vec3, Vec3) {
    let mut best = 0;
    let mut best_abs = n[0].abs();
    for i in 1..3 {
        if n[i].abs() < best_abs {
            best = i;
            best_abs = n[i].abs();
        }
    }
    let mut axis = [0.0; 3];
    axis[best] = 1.0;
    let e0 = geom::normalize(geom::sub(axis, geom::scale(n, geom::dot(axis, n))));
    let e1 = geom::cross(n, e0);
    (e0, e1)
}

/// Sum over vertices of the angle defect (2*pi - incident angles). Equals
/// 2*pi*chi for closed meshes.
pub fn angle_defect_sum(mesh: &TriMesh) -> f64 {
    let nv = mesh.positions.len();
    let mut angles = vec![0.0; nv];
    for tri in &mesh.triangles {
        for r in 0..3 {
            let v = tri[r];
            let a = tri[(r + 1) % 3];
            let b = tri[(r + 2) % 3];
            let da = geom::normalize(geom::sub(mesh.positions[a], mesh.positions[v]));
            let db = geom::normalize(geom::sub(mesh.positions[b], mesh.positions[v]));
            angles[v] += geom::dot(da, db).clamp(-1.0, 1.0).acos();
        }
    }
    angles
        .iter()
        .map(|&a| 2.0 * std::f64::consts::PI - a)
        .sum()
}

fn solve3(a: &[[f64; 3]; 3], b: &[f64; 3]) -> Option<[f64; 3]> {
    let mut m = [[0.0f64; 4]; 3];
    for i in 0..3 {
        m[i][..3].copy_from_slice(&a[i]);
        m[i][3] = b[i];
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-14 {
            return None;
        }
        m.swap(col, piv);
        let d = m[col][col];
        for j in col..4 {
            m[col][j] /= d;
        }
        for i in 0..3 {
            if i != col {
                let f = m[i][col];
                for j in col..4 {
                    m[i][j] -= f * m[col][j];
                }
            }
        }
    }
    Some([m[0][3], m[1][3], m[2][3]])
}

/// Eigen-decomposition of the symmetric 2x2 [[a, b], [b, c]]; returns
/// (larger eigenvalue, smaller eigenvalue, unit eigenvector of the larger).
fn eig2(a: f64, b: f64, c: f64) -> (f64, f64, [f64; 2]) {
    let tr = a + c;
    let diff = a - c;
    let disc = (diff * diff / 4.0 + b * b).sqrt();
    let l1 = tr / 2.0 + disc;
    let l2 = tr / 2.0 - disc;
    let dir = if b.abs() > 1e-14 {
        let v = [b, l1 - a];
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        [v[0] / n, v[1] / n]
    } else if a >= c {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    (l1, l2, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn tangent_frame_axis_aligned() {
        let (e0, e1) = tangent_frame_for_normal([0.0, 0.0, 1.0]);
        assert_eq!(e0, [1.0, 0.0, 0.0]);
        assert_eq!(e1, [0.0, 1.0, 0.0]);
        let (e0, e1) = tangent_frame_for_normal([1.0, 0.0, 0.0]);
        assert_eq!(e0, [0.0, 1.0, 0.0]);
        assert_eq!(e1, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn tangent_frame_is_right_handed() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = geom::normalize([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            let (e0, e1) = tangent_frame_for_normal(n);
            let det = geom::dot(geom::cross(e0, e1), n);
            assert!((det - 1.0).abs() < 1e-10);
            assert!(geom::dot(e0, n).abs() < 1e-10);
            assert!(geom::dot(e0, e1).abs() < 1e-10);
        }
    }

    #[test]
    fn icosphere_curvature_near_one() {
        let mut mesh = synth::icosphere(3, 1.0);
        let topo = mesh.validate().unwrap();
        let report = mesh.compute_vertex_geometry(&topo);
        assert!(report.degenerate_fit_vertices.is_empty());
        for v in 0..mesh.vertex_count() {
            assert!((mesh.k_max[v] - 1.0).abs() < 0.05, "k_max {}", mesh.k_max[v]);
            assert!((mesh.k_min[v] - 1.0).abs() < 0.05, "k_min {}", mesh.k_min[v]);
        }
    }

    #[test]
    fn flat_grid_zero_curvature() {
        let mut mesh = synth::flat_grid(8, 8, 1.0);
        let topo = mesh.validate().unwrap();
        mesh.compute_vertex_geometry(&topo);
        // Interior vertex away from the boundary.
        let v = interior_vertex(&mesh, &topo);
        assert!(mesh.k_max[v].abs() < 1e-8);
        assert!(mesh.k_min[v].abs() < 1e-8);
    }

    #[test]
    fn cylinder_curvature() {
        let mut mesh = synth::cylinder(40, 20, 2.0, 8.0);
        let topo = mesh.validate().unwrap();
        mesh.compute_vertex_geometry(&topo);
        let v = interior_vertex(&mesh, &topo);
        assert!((mesh.k_max[v] - 0.5).abs() < 0.025, "k_max {}", mesh.k_max[v]);
        assert!(mesh.k_min[v].abs() < 0.025, "k_min {}", mesh.k_min[v]);
        // Axis is z; max-curvature direction is perpendicular to it.
        assert!(mesh.dir_max[v][2].abs() < 0.05);
    }

    #[test]
    fn gauss_bonnet_closed_meshes() {
        let sphere = synth::icosphere(2, 1.0);
        let sum = angle_defect_sum(&sphere);
        assert!((sum - 4.0 * std::f64::consts::PI).abs() < 1e-6);
        let torus = synth::torus(24, 16, 1.0, 0.4);
        let sum = angle_defect_sum(&torus);
        assert!(sum.abs() < 1e-6);
    }

    #[test]
    fn rigid_motion_invariance() {
        use rand::SeedableRng;
        // Anisotropic mesh: dir_max is only well-defined away from umbilics.
        let mut mesh = synth::cylinder(24, 10, 2.0, 6.0);
        let topo = mesh.validate().unwrap();
        mesh.compute_vertex_geometry(&topo);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (rot, t) = synth::random_rigid_motion(&mut rng);
        let mut moved = TriMesh::new(
            mesh.positions
                .iter()
                .map(|&p| geom::add(geom::mat_vec(&rot, p), t))
                .collect(),
            mesh.triangles.clone(),
        );
        let topo2 = moved.validate().unwrap();
        moved.compute_vertex_geometry(&topo2);
        for v in 0..mesh.vertex_count() {
            assert!((mesh.one_ring_area[v] - moved.one_ring_area[v]).abs() < 1e-8);
            assert!((mesh.k_max[v] - moved.k_max[v]).abs() < 1e-8);
            assert!((mesh.k_min[v] - moved.k_min[v]).abs() < 1e-8);
            let rn = geom::mat_vec(&rot, mesh.normals[v]);
            for i in 0..3 {
                assert!((rn[i] - moved.normals[v][i]).abs() < 1e-8);
            }
            let rd = geom::mat_vec(&rot, mesh.dir_max[v]);
            // dir_max is defined up to sign.
            let d = geom::dot(rd, moved.dir_max[v]).abs();
            assert!(d > 1.0 - 1e-8, "dir_max misrotated: {}", d);
        }
    }

    fn interior_vertex(mesh: &TriMesh, topo: &Topology) -> usize {
        'outer: for v in 0..mesh.vertex_count() {
            for &u in &topo.neighbors[v] {
                let e = (v.min(u), v.max(u));
                if topo.boundary_edge[topo.edge_index[&e]] {
                    continue 'outer;
                }
                for &w in &topo.neighbors[u] {
                    let e = (u.min(w), u.max(w));
                    if topo.boundary_edge[topo.edge_index[&e]] {
                        continue 'outer;
                    }
                }
            }
            return v;
        }
        panic!("no interior vertex");
    }
}
