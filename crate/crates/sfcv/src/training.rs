//! Losses, the Adam optimizer, evaluation metrics, checkpointing, and the
//! mesh-at-a-time train/evaluate loops.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::convops::FeatureMap;
use crate::geom::{self, Vec3};
use crate::mesh::{Topology, TriMesh};
use crate::network::{
    LayerState, MeshContext, Network, NetworkDescription, NetworkError, Output, OutputGrad,
};

pub const W_NORMAL: f64 = 0.1;
pub const W_REG: f64 = 0.2;
pub const W_CONSISTENCY: f64 = 20.0;

/// Reserved per-vertex label excluded from the cross-entropy mean.
pub const IGNORE_LABEL: i64 = -1;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in parameter block '{0}'; step aborted")]
    NanGradient(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint network hash mismatch: file {file}, expected {expected}")]
    HashMismatch { file: String, expected: String },
}

// ---------------------------------------------------------------- losses

/// Softmax cross-entropy for a single score vector. Returns the loss and
/// d(loss)/d(scores).
pub fn cross_entropy(scores: &[f64], label: usize) -> Result<(f64, Vec<f64>), TrainError> {
    if label >= scores.len() {
        return Err(TrainError::LabelOutOfRange {
            label: label as i64,
            classes: scores.len(),
        });
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (scores[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean softmax cross-entropy over labeled vertices; scores are a
/// (class, vertex) map and labels may use `IGNORE_LABEL`.
pub fn cross_entropy_vertices(
    scores: &FeatureMap,
    labels: &[i64],
) -> Result<(f64, FeatureMap), TrainError> {
    if labels.len() != scores.vertices {
        return Err(TrainError::ShapeMismatch(format!(
            "{} labels for {} vertices",
            labels.len(),
            scores.vertices
        )));
    }
    let k = scores.channels;
    let mut grad = FeatureMap::zeros(k, scores.vertices);
    let mut loss = 0.0;
    let mut counted = 0usize;
    for v in 0..scores.vertices {
        let label = labels[v];
        if label == IGNORE_LABEL {
            continue;
        }
        if label < 0 || label as usize >= k {
            return Err(TrainError::LabelOutOfRange { label, classes: k });
        }
        let column: Vec<f64> = (0..k).map(|c| scores.get(c, v)).collect();
        let (l, g) = cross_entropy(&column, label as usize)?;
        loss += l;
        for c in 0..k {
            grad.set(c, v, g[c]);
        }
        counted += 1;
    }
    if counted > 0 {
        loss /= counted as f64;
        for x in &mut grad.values {
            *x /= counted as f64;
        }
    }
    Ok((loss, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Three-part l1 regression loss over per-vertex positions and normals
/// (channels 0..3 positions, 3..6 normals): per-vertex data terms with
/// Laplacian regularization of both fields, plus normal/position
/// consistency over directed edges. Subgradient 0 at kinks.
pub fn regression_loss(
    pred: &FeatureMap,
    target_pos: &[Vec3],
    target_normal: &[Vec3],
    neighbors: &[Vec<usize>],
) -> Result<(f64, FeatureMap), TrainError> {
    let nv = pred.vertices;
    if pred.channels != 6 {
        return Err(TrainError::ShapeMismatch(format!(
            "regression head needs 6 channels, got {}",
            pred.channels
        )));
    }
    if target_pos.len() != nv || target_normal.len() != nv || neighbors.len() != nv {
        return Err(TrainError::ShapeMismatch(
            "targets/adjacency do not match prediction vertices".into(),
        ));
    }
    let p = |i: usize| -> Vec3 { [pred.get(0, i), pred.get(1, i), pred.get(2, i)] };
    let n = |i: usize| -> Vec3 { [pred.get(3, i), pred.get(4, i), pred.get(5, i)] };
    let mut grad = FeatureMap::zeros(6, nv);
    let mut loss = 0.0;
    let inv_v = 1.0 / nv as f64;
    let n_edges: usize = neighbors.iter().map(|r| r.len()).sum();

    for i in 0..nv {
        let pi = p(i);
        let ni = n(i);
        // Position and normal data terms.
        for a in 0..3 {
            let d = pi[a] - target_pos[i][a];
            loss += inv_v * d.abs();
            grad.values[a * nv + i] += inv_v * sign(d);
            let dn = ni[a] - target_normal[i][a];
            loss += W_NORMAL * inv_v * dn.abs();
            grad.values[(a + 3) * nv + i] += W_NORMAL * inv_v * sign(dn);
        }
        // Laplacian terms, normalized by the valence of i.
        if !neighbors[i].is_empty() {
            let wi = W_REG / neighbors[i].len() as f64;
            for &j in &neighbors[i] {
                let pj = p(j);
                let nj = n(j);
                for a in 0..3 {
                    let d = pi[a] - pj[a];
                    loss += inv_v * wi * d.abs();
                    let s = inv_v * wi * sign(d);
                    grad.values[a * nv + i] += s;
                    grad.values[a * nv + j] -= s;
                    let dn = ni[a] - nj[a];
                    loss += W_NORMAL * inv_v * wi * dn.abs();
                    let s = W_NORMAL * inv_v * wi * sign(dn);
                    grad.values[(a + 3) * nv + i] += s;
                    grad.values[(a + 3) * nv + j] -= s;
                }
            }
        }
        // Consistency over directed edges: |n_i . (p_i - p_j)|.
        if n_edges > 0 {
            let we = W_CONSISTENCY / n_edges as f64;
            for &j in &neighbors[i] {
                let pj = p(j);
                let d = geom::sub(pi, pj);
                let dot = geom::dot(ni, d);
                loss += we * dot.abs();
                let s = we * sign(dot);
                for a in 0..3 {
                    grad.values[(a + 3) * nv + i] += s * d[a];
                    grad.values[a * nv + i] += s * ni[a];
                    grad.values[a * nv + j] -= s * ni[a];
                }
            }
        }
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------- optimizer

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One bias-corrected update. `names` labels parameter blocks for the
    /// NaN abort message.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        names: &[String],
    ) -> Result<(), TrainError> {
        if params.len() != grads.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} parameter blocks vs {} gradient blocks",
                params.len(),
                grads.len()
            )));
        }
        // A NaN anywhere aborts the step before touching any parameter.
        for (bi, g) in grads.iter().enumerate() {
            if g.iter().any(|x| !x.is_finite()) {
                let name = names.get(bi).cloned().unwrap_or_else(|| format!("#{}", bi));
                return Err(TrainError::NanGradient(name));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (bi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[bi], &mut self.v[bi]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, Copy)]
struct DijkstraCost(f64);
impl PartialEq for DijkstraCost {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0) == std::cmp::Ordering::Equal
    }
}
impl Eq for DijkstraCost {}
impl PartialOrd for DijkstraCost {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.0.total_cmp(&other.0))
    }
}
impl Ord for DijkstraCost {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Shortest-path graph for geodesic distance estimates: mesh edges plus
/// one shortcut per adjacent triangle pair, connecting the two opposite
/// vertices at their straight-line distance after unfolding the pair into
/// a plane. The shortcuts roughly double the directional resolution of the
/// graph metric.
pub struct GeodesicGraph {
    adj: Vec<Vec<(usize, f64)>>,
    area_norm: f64,
}

impl GeodesicGraph {
    pub fn new(mesh: &TriMesh, topo: &Topology) -> Self {
        let nv = mesh.vertex_count();
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nv];
        for &(u, v) in &topo.edges {
            let w = geom::norm(geom::sub(mesh.positions[u], mesh.positions[v]));
            adj[u].push((v, w));
            adj[v].push((u, w));
        }
        for (e, &(u, v)) in topo.edges.iter().enumerate() {
            if topo.boundary_edge[e] {
                continue;
            }
            let shared: Vec<usize> = topo.vertex_triangles[u]
                .iter()
                .filter(|&&t| mesh.triangles[t].contains(&v))
                .copied()
                .collect();
            if shared.len() != 2 {
                continue;
            }
            let opposite = |t: usize| {
                *mesh.triangles[t]
                    .iter()
                    .find(|&&x| x != u && x != v)
                    .unwrap()
            };
            let (a, b) = (opposite(shared[0]), opposite(shared[1]));
            // Unfold both triangles about the shared edge into a plane.
            let pu = mesh.positions[u];
            let edge = geom::sub(mesh.positions[v], pu);
            let len = geom::norm(edge);
            if len < 1e-14 {
                continue;
            }
            let dir = geom::scale(edge, 1.0 / len);
            let planar = |p: Vec3| -> (f64, f64) {
                let d = geom::sub(p, pu);
                let x = geom::dot(d, dir);
                let y = (geom::dot(d, d) - x * x).max(0.0).sqrt();
                (x, y)
            };
            let (xa, ya) = planar(mesh.positions[a]);
            let (xb, yb) = planar(mesh.positions[b]);
            // a above the edge, b mirrored below.
            let w = ((xa - xb) * (xa - xb) + (ya + yb) * (ya + yb)).sqrt();
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        GeodesicGraph {
            adj,
            area_norm: mesh.total_area().sqrt(),
        }
    }

    pub fn distances(&self, source: usize) -> Vec<f64> {
        let nv = self.adj.len();
        let mut dist = vec![f64::INFINITY; nv];
        dist[source] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((DijkstraCost(0.0), source)));
        while let Some(Reverse((DijkstraCost(d), u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &self.adj[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Reverse((DijkstraCost(nd), v)));
                }
            }
        }
        dist
    }

    /// Geodesic error normalized by the square root of total surface area;
    /// infinite when the vertices are in different components.
    pub fn error(&self, from: usize, to: usize) -> f64 {
        self.distances(from)[to] / self.area_norm
    }
}

/// Shortest graph distances from a source vertex (edges + unfolded
/// triangle-pair shortcuts).
pub fn dijkstra_distances(mesh: &TriMesh, topo: &Topology, source: usize) -> Vec<f64> {
    GeodesicGraph::new(mesh, topo).distances(source)
}

/// One-shot geodesic error between two template vertices.
pub fn geodesic_error(mesh: &TriMesh, topo: &Topology, from: usize, to: usize) -> f64 {
    GeodesicGraph::new(mesh, topo).error(from, to)
}

/// Index of the vertex nearest to a point.
pub fn nearest_vertex(mesh: &TriMesh, p: Vec3) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &q) in mesh.positions.iter().enumerate() {
        let d = geom::norm(geom::sub(p, q));
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------- dataset

/// Supervision attached to one preprocessed mesh.
#[derive(Debug, Clone)]
pub enum Target {
    Class(usize),
    VertexLabels(Vec<i64>),
    /// Rest-pose position and normal per vertex.
    Rest {
        positions: Vec<Vec3>,
        normals: Vec<Vec3>,
    },
}

pub struct Sample {
    pub ctx: MeshContext,
    pub target: Target,
}

/// Finest-level 1-ring adjacency recovered from the cached patches.
pub fn finest_neighbors(ctx: &MeshContext) -> Vec<Vec<usize>> {
    let p = &ctx.patches[0];
    (0..p.vertices)
        .map(|x| {
            let r = p.entries(x);
            p.neighbor[r.start + 1..r.end].to_vec()
        })
        .collect()
}

fn loss_and_grad(
    output: &Output,
    sample: &Sample,
) -> Result<(f64, OutputGrad, Option<bool>), TrainError> {
    match (&sample.target, output) {
        (Target::Class(label), Output::Scores(scores)) => {
            let (loss, grad) = cross_entropy(scores, *label)?;
            let pred = argmax(scores);
            Ok((loss, OutputGrad::Scores(grad), Some(pred == *label)))
        }
        (Target::VertexLabels(labels), Output::Dense(scores)) => {
            let (loss, grad) = cross_entropy_vertices(scores, labels)?;
            Ok((loss, OutputGrad::Dense(grad), None))
        }
        (Target::Rest { positions, normals }, Output::Dense(pred)) => {
            let neighbors = finest_neighbors(&sample.ctx);
            let (loss, grad) = regression_loss(pred, positions, normals, &neighbors)?;
            Ok((loss, OutputGrad::Dense(grad), None))
        }
        _ => Err(TrainError::ShapeMismatch(
            "network output kind does not match the target kind".into(),
        )),
    }
}

pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------- loops

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Meshes whose gradients are accumulated per optimizer step.
    pub batch: usize,
    /// Round parameters to f32 after every optimizer step, emulating
    /// single-precision training while keeping the f64 code path.
    pub single_precision: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 1e-2,
            seed: 0,
            batch: 1,
            single_precision: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: Option<f64>,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        match self.accuracy {
            Some(a) => format!(
                "epoch={} loss={:.6} accuracy={:.4}",
                self.epoch, self.mean_loss, a
            ),
            None => format!("epoch={} loss={:.6}", self.epoch, self.mean_loss),
        }
    }
}

/// Mesh-at-a-time training with a per-epoch seeded shuffle. `start_epoch`
/// continues a run resumed from a checkpoint: the shuffle for epoch e is
/// seeded by (seed, e), so resuming reproduces the from-scratch sequence.
pub fn train(
    net: &mut Network,
    opt: &mut Adam,
    samples: &[Sample],
    cfg: &TrainConfig,
    start_epoch: usize,
) -> Result<Vec<EpochRecord>, TrainError> {
    let names = param_names(net);
    let mut log = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b9));
        order.shuffle(&mut rng);

        let mut total_loss = 0.0;
        let mut correct = 0usize;
        let mut classified = 0usize;
        let mut acc: Option<Vec<Vec<f64>>> = None;
        let mut in_batch = 0usize;
        for (step, &si) in order.iter().enumerate() {
            let sample = &samples[si];
            let (output, tape) = net.forward(&sample.ctx, true)?;
            let (loss, out_grad, was_correct) = loss_and_grad(&output, sample)?;
            total_loss += loss;
            if let Some(c) = was_correct {
                classified += 1;
                if c {
                    correct += 1;
                }
            }
            let grads = net.backward(&sample.ctx, &tape, out_grad)?;
            let slices = Network::grad_slices(&grads);
            match &mut acc {
                None => acc = Some(slices.iter().map(|s| s.to_vec()).collect()),
                Some(a) => {
                    for (dst, src) in a.iter_mut().zip(&slices) {
                        for (d, s) in dst.iter_mut().zip(src.iter()) {
                            *d += s;
                        }
                    }
                }
            }
            in_batch += 1;
            let last = step + 1 == order.len();
            if in_batch == cfg.batch.max(1) || last {
                let mut batched = acc.take().unwrap();
                if in_batch > 1 {
                    let inv = 1.0 / in_batch as f64;
                    for block in &mut batched {
                        for g in block.iter_mut() {
                            *g *= inv;
                        }
                    }
                }
                let refs: Vec<&[f64]> = batched.iter().map(|b| b.as_slice()).collect();
                let mut params = net.visit_params();
                opt.step(&mut params, &refs, &names)?;
                if cfg.single_precision {
                    for slice in params {
                        for x in slice.iter_mut() {
                            *x = *x as f32 as f64;
                        }
                    }
                }
                in_batch = 0;
            }
        }
        log.push(EpochRecord {
            epoch,
            mean_loss: total_loss / samples.len().max(1) as f64,
            accuracy: if classified > 0 {
                Some(correct as f64 / classified as f64)
            } else {
                None
            },
        });
    }
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct EvalMetrics {
    pub mean_loss: f64,
    /// Fraction correct: per-mesh for classification, per-vertex for
    /// segmentation; absent for regression.
    pub accuracy: Option<f64>,
}

pub fn evaluate(net: &Network, samples: &[Sample]) -> Result<EvalMetrics, TrainError> {
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut counted = 0usize;
    for sample in samples {
        let (output, _) = net.forward(&sample.ctx, false)?;
        let (loss, _, _) = loss_and_grad(&output, sample)?;
        total_loss += loss;
        match (&sample.target, &output) {
            (Target::Class(label), Output::Scores(scores)) => {
                counted += 1;
                if argmax(scores) == *label {
                    correct += 1;
                }
            }
            (Target::VertexLabels(labels), Output::Dense(scores)) => {
                for v in 0..scores.vertices {
                    if labels[v] == IGNORE_LABEL {
                        continue;
                    }
                    counted += 1;
                    let col: Vec<f64> = (0..scores.channels).map(|c| scores.get(c, v)).collect();
                    if argmax(&col) as i64 == labels[v] {
                        correct += 1;
                    }
                }
            }
            _ => {}
        }
    }
    Ok(EvalMetrics {
        mean_loss: total_loss / samples.len().max(1) as f64,
        accuracy: if counted > 0 {
            Some(correct as f64 / counted as f64)
        } else {
            None
        },
    })
}

/// Block labels aligned with `Network::visit_params`.
pub fn param_names(net: &Network) -> Vec<String> {
    let mut names = Vec::new();
    for (i, layer) in net.layers.iter().enumerate() {
        let tag = net.desc.layers[i].name();
        match layer {
            LayerState::GconvRaw { .. } | LayerState::Gconv { .. } => {
                names.push(format!("layer{}.{}.kernel", i, tag))
            }
            LayerState::Gconv1x1 { .. } | LayerState::GlobalPoolDense { .. } => {
                names.push(format!("layer{}.{}.weights", i, tag));
                names.push(format!("layer{}.{}.bias", i, tag));
            }
            LayerState::ResidualBlock { .. } => {
                for part in [
                    "kernel1", "bn1.scale", "bn1.shift", "kernel2", "bn2.scale", "bn2.shift",
                ] {
                    names.push(format!("layer{}.{}.{}", i, tag, part));
                }
            }
            LayerState::Batchnorm(_) => {
                names.push(format!("layer{}.{}.scale", i, tag));
                names.push(format!("layer{}.{}.shift", i, tag));
            }
            LayerState::Stateless => {}
        }
    }
    names
}

// ---------------------------------------------------------------- checkpoints

const CHECKPOINT_MAGIC: &[u8; 4] = b"SFCK";
const CHECKPOINT_VERSION: u32 = 1;

fn batchnorms(net: &mut Network) -> Vec<&mut crate::convops::BatchNorm> {
    let mut out = Vec::new();
    for layer in &mut net.layers {
        match layer {
            LayerState::Batchnorm(bn) => out.push(bn),
            LayerState::ResidualBlock { bn1, bn2, .. } => {
                out.push(bn1);
                out.push(bn2);
            }
            _ => {}
        }
    }
    out
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    w.write_all(&(xs.len() as u64).to_le_bytes())?;
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R) -> Result<Vec<f64>, TrainError> {
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let len = u64::from_le_bytes(len8) as usize;
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Versioned binary checkpoint: header (magic, version, description hash),
/// the description JSON, completed-epoch count, parameter tensors in
/// declaration order (little-endian f64), batchnorm running statistics, and
/// the optimizer state.
pub fn save_checkpoint(
    path: &Path,
    net: &mut Network,
    opt: &Adam,
    epoch: usize,
) -> Result<(), TrainError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&net.desc.content_hash())?;
    let desc_json = serde_json::to_string(&net.desc)
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    w.write_all(&(desc_json.len() as u64).to_le_bytes())?;
    w.write_all(desc_json.as_bytes())?;
    w.write_all(&(epoch as u64).to_le_bytes())?;

    let params = net.visit_params();
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    let snapshots: Vec<Vec<f64>> = params.iter().map(|p| p.to_vec()).collect();
    for p in &snapshots {
        write_f64s(&mut w, p)?;
    }
    let bns = batchnorms(net);
    w.write_all(&(bns.len() as u64).to_le_bytes())?;
    for bn in bns {
        w.write_all(&[bn.initialized as u8])?;
        write_f64s(&mut w, &bn.running_mean)?;
        write_f64s(&mut w, &bn.running_var)?;
    }
    w.write_all(&opt.step_count.to_le_bytes())?;
    w.write_all(&opt.lr.to_le_bytes())?;
    w.write_all(&(opt.m.len() as u64).to_le_bytes())?;
    for block in opt.m.iter().chain(&opt.v) {
        write_f64s(&mut w, block)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: Adam,
    pub epoch: usize,
}

/// Loads a checkpoint; when `expected_hash` is given, refuses a file whose
/// network description differs.
pub fn load_checkpoint(
    path: &Path,
    expected_hash: Option<[u8; 32]>,
) -> Result<Checkpoint, TrainError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint("bad magic bytes".into()));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version > CHECKPOINT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "file version {} is newer than supported version {}",
            version, CHECKPOINT_VERSION
        )));
    }
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash)?;
    if let Some(expected) = expected_hash {
        if hash != expected {
            return Err(TrainError::HashMismatch {
                file: hex(&hash),
                expected: hex(&expected),
            });
        }
    }
    let mut len8 = [0u8; 8];
    r.read_exact(&mut len8)?;
    let mut desc_buf = vec![0u8; u64::from_le_bytes(len8) as usize];
    r.read_exact(&mut desc_buf)?;
    let desc: NetworkDescription = serde_json::from_slice(&desc_buf)
        .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    if desc.content_hash() != hash {
        return Err(TrainError::Checkpoint(
            "stored description does not match the header hash".into(),
        ));
    }
    r.read_exact(&mut len8)?;
    let epoch = u64::from_le_bytes(len8) as usize;

    let levels = levels_needed(&desc);
    let mut net = Network::init(desc, levels, 0)?;
    r.read_exact(&mut len8)?;
    let n_blocks = u64::from_le_bytes(len8) as usize;
    {
        let mut params = net.visit_params();
        if params.len() != n_blocks {
            return Err(TrainError::Checkpoint(format!(
                "{} parameter blocks in file, network has {}",
                n_blocks,
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let vals = read_f64s(&mut r)?;
            if vals.len() != p.len() {
                return Err(TrainError::Checkpoint("parameter block size mismatch".into()));
            }
            p.copy_from_slice(&vals);
        }
    }
    r.read_exact(&mut len8)?;
    let n_bn = u64::from_le_bytes(len8) as usize;
    {
        let mut bns = batchnorms(&mut net);
        if bns.len() != n_bn {
            return Err(TrainError::Checkpoint("batchnorm count mismatch".into()));
        }
        for bn in bns.iter_mut() {
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            bn.initialized = flag[0] != 0;
            bn.running_mean = read_f64s(&mut r)?;
            bn.running_var = read_f64s(&mut r)?;
        }
    }
    let mut step8 = [0u8; 8];
    r.read_exact(&mut step8)?;
    let step_count = u64::from_le_bytes(step8);
    let mut lr8 = [0u8; 8];
    r.read_exact(&mut lr8)?;
    let lr = f64::from_le_bytes(lr8);
    r.read_exact(&mut len8)?;
    let n_m = u64::from_le_bytes(len8) as usize;
    let mut opt = Adam::new(lr);
    opt.step_count = step_count;
    for _ in 0..n_m {
        opt.m.push(read_f64s(&mut r)?);
    }
    for _ in 0..n_m {
        opt.v.push(read_f64s(&mut r)?);
    }
    Ok(Checkpoint {
        network: net,
        optimizer: opt,
        epoch,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Hierarchy depth a description requires (deepest pool level + 1).
pub fn levels_needed(desc: &NetworkDescription) -> usize {
    let mut level = 0usize;
    let mut max = 0usize;
    for layer in &desc.layers {
        match layer {
            crate::network::LayerSpec::Pool { .. } => {
                level += 1;
                max = max.max(level);
            }
            crate::network::LayerSpec::Unpool => level = level.saturating_sub(1),
            _ => {}
        }
    }
    max + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convops::ReduceMode;
    use crate::network::LayerSpec;
    use crate::synth;
    use rand::Rng;

    #[test]
    fn cross_entropy_analytic_cases() {
        // Dominant true logit.
        let (loss, _) = cross_entropy(&[100.0, 0.0, 0.0], 0).unwrap();
        assert!(loss < 1e-6);
        // Uniform scores -> ln K.
        let (loss, grad) = cross_entropy(&[0.5, 0.5, 0.5, 0.5], 2).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-10);
        // Gradient sums to zero (softmax minus one-hot).
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&[0.0, 1.0], 5),
            Err(TrainError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (_, grad) = cross_entropy(&scores, 3).unwrap();
        let h = 1e-5;
        for i in 0..5 {
            let mut up = scores.clone();
            up[i] += h;
            let mut dn = scores.clone();
            dn[i] -= h;
            let fd = (cross_entropy(&up, 3).unwrap().0 - cross_entropy(&dn, 3).unwrap().0)
                / (2.0 * h);
            assert!((fd - grad[i]).abs() / fd.abs().max(1e-6) < 1e-4);
        }
    }

    #[test]
    fn vertex_cross_entropy_respects_ignore_label() {
        let mut scores = FeatureMap::zeros(2, 3);
        scores.set(0, 0, 5.0);
        scores.set(1, 1, 5.0);
        scores.set(0, 2, -9.0); // would be a huge loss if counted
        scores.set(1, 2, 9.0);
        let (loss_all, _) = cross_entropy_vertices(&scores, &[0, 1, 0]).unwrap();
        let (loss_ign, grad) = cross_entropy_vertices(&scores, &[0, 1, IGNORE_LABEL]).unwrap();
        assert!(loss_ign < loss_all);
        assert_eq!(grad.get(0, 2), 0.0);
        assert_eq!(grad.get(1, 2), 0.0);
    }

    #[test]
    fn regression_loss_trivial_cases() {
        // Perfect constant prediction with orthogonal normals: zero loss.
        let nv = 4;
        let mut pred = FeatureMap::zeros(6, nv);
        for v in 0..nv {
            pred.set(2, v, 1.0); // p = (0,0,1) everywhere
            pred.set(3, v, 1.0); // n = (1,0,0); p_i - p_j = 0 anyway
        }
        let pos = vec![[0.0, 0.0, 1.0]; nv];
        let nrm = vec![[1.0, 0.0, 0.0]; nv];
        let neigh: Vec<Vec<usize>> = vec![vec![1, 2], vec![0], vec![0], vec![]];
        let (loss, grad) = regression_loss(&pred, &pos, &nrm, &neigh).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values.iter().all(|&x| x == 0.0));

        // Single vertex, position off by (1,0,0), no neighbors: loss 1.
        let mut pred = FeatureMap::zeros(6, 1);
        pred.set(0, 0, 1.0);
        pred.set(3, 0, 1.0);
        let (loss, _) = regression_loss(
            &pred,
            &[[0.0, 0.0, 0.0]],
            &[[1.0, 0.0, 0.0]],
            &[vec![]],
        )
        .unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    /// Term-by-term scalar oracle of the printed formula on random data.
    #[test]
    fn regression_loss_matches_scalar_oracle() {
        let nv = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pred = FeatureMap::zeros(6, nv);
        for x in &mut pred.values {
            *x = rng.gen_range(-1.0..1.0);
        }
        let pos: Vec<Vec3> = (0..nv)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let nrm: Vec<Vec3> = (0..nv)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        // Ring adjacency (symmetric).
        let neigh: Vec<Vec<usize>> = (0..nv)
            .map(|i| vec![(i + 1) % nv, (i + nv - 1) % nv])
            .collect();
        let (loss, _) = regression_loss(&pred, &pos, &nrm, &neigh).unwrap();

        // Oracle written directly from the displayed formula.
        let p = |i: usize, a: usize| pred.get(a, i);
        let n = |i: usize, a: usize| pred.get(a + 3, i);
        let l1 = |x: [f64; 3]| x[0].abs() + x[1].abs() + x[2].abs();
        let mut expect = 0.0;
        let e_count: usize = neigh.iter().map(|r| r.len()).sum();
        for i in 0..nv {
            let dp = [p(i, 0) - pos[i][0], p(i, 1) - pos[i][1], p(i, 2) - pos[i][2]];
            let mut lap_p = 0.0;
            let mut lap_n = 0.0;
            for &j in &neigh[i] {
                lap_p += l1([p(i, 0) - p(j, 0), p(i, 1) - p(j, 1), p(i, 2) - p(j, 2)]);
                lap_n += l1([n(i, 0) - n(j, 0), n(i, 1) - n(j, 1), n(i, 2) - n(j, 2)]);
            }
            expect += (l1(dp) + W_REG / neigh[i].len() as f64 * lap_p) / nv as f64;
            let dn = [n(i, 0) - nrm[i][0], n(i, 1) - nrm[i][1], n(i, 2) - nrm[i][2]];
            expect += W_NORMAL * (l1(dn) + W_REG / neigh[i].len() as f64 * lap_n) / nv as f64;
            for &j in &neigh[i] {
                let dot = n(i, 0) * (p(i, 0) - p(j, 0))
                    + n(i, 1) * (p(i, 1) - p(j, 1))
                    + n(i, 2) * (p(i, 2) - p(j, 2));
                expect += W_CONSISTENCY / e_count as f64 * dot.abs();
            }
        }
        assert!((loss - expect).abs() < 1e-10, "{} vs {}", loss, expect);
    }

    #[test]
    fn regression_loss_gradient_matches_finite_differences() {
        let nv = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut pred = FeatureMap::zeros(6, nv);
        for x in &mut pred.values {
            *x = rng.gen_range(-1.0..1.0);
        }
        let pos: Vec<Vec3> = (0..nv).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let nrm: Vec<Vec3> = (0..nv).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let neigh: Vec<Vec<usize>> = (0..nv)
            .map(|i| vec![(i + 1) % nv, (i + nv - 1) % nv])
            .collect();
        let (_, grad) = regression_loss(&pred, &pos, &nrm, &neigh).unwrap();
        let h = 1e-6;
        for i in 0..pred.values.len() {
            let mut up = pred.clone();
            up.values[i] += h;
            let mut dn = pred.clone();
            dn.values[i] -= h;
            let fd = (regression_loss(&up, &pos, &nrm, &neigh).unwrap().0
                - regression_loss(&dn, &pos, &nrm, &neigh).unwrap().0)
                / (2.0 * h);
            assert!(
                (fd - grad.values[i]).abs() < 1e-6,
                "grad[{}]: fd {} vs {}",
                i,
                fd,
                grad.values[i]
            );
        }
    }

    #[test]
    fn adam_basic_properties() {
        // Zero gradients leave parameters unchanged.
        let mut opt = Adam::new(0.1);
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        let before = p.clone();
        opt.step(&mut [&mut p], &[&g], &[String::from("p")]).unwrap();
        for (a, b) in p.iter().zip(&before) {
            assert!((a - b).abs() < 1e-15);
        }

        // First step moves each coordinate by ~lr in the -sign(g) direction.
        let mut opt = Adam::new(0.05);
        let mut p = vec![0.0, 0.0];
        let g = vec![3.0, -0.2];
        opt.step(&mut [&mut p], &[&g], &[String::from("p")]).unwrap();
        assert!((p[0] + 0.05).abs() < 1e-6);
        assert!((p[1] - 0.05).abs() < 1e-6);

        // Convex quadratic decreases monotonically after warmup.
        let mut opt = Adam::new(0.05);
        let mut x = vec![3.0, -4.0];
        let mut prev = f64::INFINITY;
        for step in 0..100 {
            let g = vec![2.0 * x[0], 2.0 * x[1]];
            opt.step(&mut [&mut x], &[&g], &[String::from("x")]).unwrap();
            let f = x[0] * x[0] + x[1] * x[1];
            if step >= 10 {
                assert!(f <= prev + 1e-12, "step {}: {} > {}", step, f, prev);
            }
            prev = f;
        }
        assert!(prev < 9.0);

        // NaN gradient aborts without touching parameters.
        let mut opt = Adam::new(0.1);
        let mut p = vec![1.0];
        let g = vec![f64::NAN];
        let err = opt
            .step(&mut [&mut p], &[&g], &[String::from("block.a")])
            .unwrap_err();
        assert!(matches!(err, TrainError::NanGradient(ref n) if n == "block.a"));
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn geodesic_error_definition_and_sphere() {
        // flat_grid(3,3,0.5): 4 cells of area 0.25 -> total area 1.
        let mesh = synth::flat_grid(3, 3, 0.5);
        let topo = mesh.validate().unwrap();
        assert!((mesh.total_area() - 1.0).abs() < 1e-12);
        assert_eq!(geodesic_error(&mesh, &topo, 0, 0), 0.0);
        // Adjacent vertices along an axis: path length one edge = 0.5.
        assert!((geodesic_error(&mesh, &topo, 0, 1) - 0.5).abs() < 1e-12);
        // Two steps along the axis.
        assert!((geodesic_error(&mesh, &topo, 0, 2) - 1.0).abs() < 1e-12);

        // Dijkstra vs analytic great-circle distance on a sphere.
        let mesh = synth::icosphere(3, 1.0);
        let topo = mesh.validate().unwrap();
        let dist = dijkstra_distances(&mesh, &topo, 0);
        let p0 = mesh.positions[0];
        let mut checked = 0;
        for v in 0..mesh.vertex_count() {
            let arc = geom::dot(p0, mesh.positions[v]).clamp(-1.0, 1.0).acos();
            if arc > 1.0 {
                let rel = (dist[v] - arc).abs() / arc;
                assert!(rel < 0.10, "vertex {}: rel err {}", v, rel);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    fn tiny_classifier() -> NetworkDescription {
        NetworkDescription {
            n: 4,
            layers: vec![
                LayerSpec::GconvRaw { out_channels: 4 },
                LayerSpec::Relu,
                LayerSpec::Gconv { out_channels: 4 },
                LayerSpec::Reduce {
                    mode: ReduceMode::Max,
                },
                LayerSpec::GlobalPoolDense { classes: 3 },
            ],
        }
    }

    fn tiny_samples() -> Vec<Sample> {
        use crate::network::tests::context_for;
        let mut samples = Vec::new();
        for (i, mesh) in [
            synth::icosphere(1, 1.0),
            synth::torus(8, 6, 1.0, 0.4),
            synth::icosphere(1, 1.4),
        ]
        .into_iter()
        .enumerate()
        {
            let nv = mesh.vertex_count();
            samples.push(Sample {
                ctx: context_for(mesh, &[nv / 3]),
                target: Target::Class(i % 3),
            });
        }
        samples
    }

    #[test]
    fn overfits_single_mesh() {
        let samples = tiny_samples();
        let one = &samples[..1];
        let mut net = Network::init(tiny_classifier(), 2, 5).unwrap();
        let mut opt = Adam::new(0.03);
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 0.03,
            seed: 1,
            batch: 1,
            single_precision: false,
        };
        let log = train(&mut net, &mut opt, one, &cfg, 0).unwrap();
        let last = log.last().unwrap();
        assert!(
            last.mean_loss < 0.01,
            "failed to overfit: final loss {}",
            last.mean_loss
        );
    }

    #[test]
    fn checkpoint_round_trip_and_bit_exact_resume() {
        let samples = tiny_samples();
        let cfg = TrainConfig {
            epochs: 4,
            learning_rate: 0.01,
            seed: 9,
            batch: 1,
            single_precision: false,
        };
        // Straight-through run.
        let mut net_a = Network::init(tiny_classifier(), 2, 2).unwrap();
        let mut opt_a = Adam::new(cfg.learning_rate);
        let log_a = train(&mut net_a, &mut opt_a, &samples, &cfg, 0).unwrap();

        // Run two epochs, checkpoint, reload, resume.
        let mut net_b = Network::init(tiny_classifier(), 2, 2).unwrap();
        let mut opt_b = Adam::new(cfg.learning_rate);
        let half = TrainConfig { epochs: 2, ..cfg.clone() };
        train(&mut net_b, &mut opt_b, &samples, &half, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&path, &mut net_b, &opt_b, 2).unwrap();

        let expected = tiny_classifier().content_hash();
        let ck = load_checkpoint(&path, Some(expected)).unwrap();
        assert_eq!(ck.epoch, 2);
        let mut net_c = ck.network;
        let mut opt_c = ck.optimizer;
        let log_c = train(&mut net_c, &mut opt_c, &samples, &cfg, 2).unwrap();

        // Same next-epoch losses bit for bit, same final parameters.
        assert_eq!(log_a[2].mean_loss.to_bits(), log_c[0].mean_loss.to_bits());
        assert_eq!(log_a[3].mean_loss.to_bits(), log_c[1].mean_loss.to_bits());
        let pa: Vec<f64> = net_a.visit_params().iter().flat_map(|s| s.to_vec()).collect();
        let pc: Vec<f64> = net_c.visit_params().iter().flat_map(|s| s.to_vec()).collect();
        assert_eq!(pa.len(), pc.len());
        for (a, c) in pa.iter().zip(&pc) {
            assert_eq!(a.to_bits(), c.to_bits());
        }

        // Hash mismatch is refused with both hashes reported.
        let mut other = tiny_classifier();
        other.layers.push(LayerSpec::Relu);
        let err = load_checkpoint(&path, Some(other.content_hash())).unwrap_err();
        assert!(matches!(err, TrainError::HashMismatch { .. }));
    }
}
