//! Differentiable layers over grouped feature maps: the semi-discrete
//! grouped convolution with cubic polynomial kernels, grouped 1x1
//! convolution, duplication/reduction across groups, grouped pooling over
//! hierarchy levels, batch normalization, ReLU, and the global pooling +
//! dense head. Every layer has an exact reverse-mode gradient.

use crate::frames::FrameAtlas;
use crate::geom;
use crate::mesh::{TangentBasis, Topology, TriMesh};

#[derive(Debug, thiserror::Error)]
pub enum ConvError {
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("feature map lives on {got} vertices but the layer expects {expected}")]
    LevelMismatch { expected: usize, got: usize },
    #[error("non-finite value produced by layer {0}")]
    NonFinite(&'static str),
    #[error("batchnorm evaluated with no accumulated statistics")]
    NoStatistics,
}

/// Feature tensor indexed (group, channel, vertex).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedFeatureMap {
    pub groups: usize,
    pub channels: usize,
    pub vertices: usize,
    pub values: Vec<f64>,
}

impl GroupedFeatureMap {
    pub fn zeros(groups: usize, channels: usize, vertices: usize) -> Self {
        GroupedFeatureMap {
            groups,
            channels,
            vertices,
            values: vec![0.0; groups * channels * vertices],
        }
    }

    #[inline]
    pub fn idx(&self, g: usize, c: usize, v: usize) -> usize {
        (g * self.channels + c) * self.vertices + v
    }

    #[inline]
    pub fn get(&self, g: usize, c: usize, v: usize) -> f64 {
        self.values[(g * self.channels + c) * self.vertices + v]
    }

    #[inline]
    pub fn set(&mut self, g: usize, c: usize, v: usize, x: f64) {
        self.values[(g * self.channels + c) * self.vertices + v] = x;
    }

    pub fn check_finite(&self, layer: &'static str) -> Result<(), ConvError> {
        if self.values.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(ConvError::NonFinite(layer))
        }
    }
}

/// Ungrouped feature tensor indexed (channel, vertex).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub vertices: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, vertices: usize) -> Self {
        FeatureMap {
            channels,
            vertices,
            values: vec![0.0; channels * vertices],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, v: usize) -> f64 {
        self.values[c * self.vertices + v]
    }

    #[inline]
    pub fn set(&mut self, c: usize, v: usize, x: f64) {
        self.values[c * self.vertices + v] = x;
    }
}

pub const MONOMIALS: usize = 10;

/// Cubic two-variable monomial basis evaluated at (u, v):
/// 1, u, v, u^2, uv, v^2, u^3, u^2 v, u v^2, v^3.
pub fn monomial_row(u: f64, v: f64) -> [f64; MONOMIALS] {
    [
        1.0,
        u,
        v,
        u * u,
        u * v,
        v * v,
        u * u * u,
        u * u * v,
        u * v * v,
        v * v * v,
    ]
}

/// Raw geometric input channels per (vertex, frame, neighbor): the
/// frame-projected neighbor normal (3), the normalized height of the
/// neighbor over the tangent plane (1), and a constant 1.
pub const RAW_CHANNELS: usize = 5;

/// Precomputed local patches: for every vertex x the closed 1-ring
/// P(x) = {x} + neighbors, with per-frame normalized tangent coordinates,
/// cached monomial rows, sampling weights, group-matching offsets, and the
/// raw geometric input block for the first network layer.
#[derive(Debug, Clone)]
pub struct PatchData {
    pub n: usize,
    pub vertices: usize,
    /// CSR offsets into the per-entry arrays; entry range of vertex x is
    /// start[x]..start[x+1], with the center vertex first.
    pub start: Vec<usize>,
    pub neighbor: Vec<usize>,
    pub weight: Vec<f64>,
    pub weight_sum: Vec<f64>,
    /// m(x, y) per entry: group k at x reads group (k + m) mod N at y.
    pub offset: Vec<u8>,
    /// Monomial rows, indexed entry * N + frame.
    pub monomials: Vec<[f64; MONOMIALS]>,
    /// Raw input features, indexed entry * N + frame.
    pub raw: Vec<[f64; RAW_CHANNELS]>,
    /// Patch radius r per vertex (frame-independent).
    pub radius: Vec<f64>,
    /// Vertices with no neighbors, kept with r = 1 by convention.
    pub isolated: Vec<usize>,
}

impl PatchData {
    pub fn entries(&self, x: usize) -> std::ops::Range<usize> {
        self.start[x]..self.start[x + 1]
    }
}

/// Builds PatchData for one hierarchy level.
pub fn build_patches(
    mesh: &TriMesh,
    topo: &Topology,
    basis: &TangentBasis,
    atlas: &FrameAtlas,
) -> PatchData {
    let nv = mesh.vertex_count();
    let n = atlas.n;
    let mut start = Vec::with_capacity(nv + 1);
    let mut neighbor = Vec::new();
    let mut weight = Vec::new();
    let mut weight_sum = Vec::with_capacity(nv);
    let mut offset = Vec::new();
    let mut monomials = Vec::new();
    let mut raw = Vec::new();
    let mut radius = Vec::with_capacity(nv);
    let mut isolated = Vec::new();

    start.push(0);
    for x in 0..nv {
        let ring = &topo.neighbors[x];
        if ring.is_empty() {
            isolated.push(x);
        }
        // Patch radius: max tangent-projected offset over the open ring.
        let mut r = 0.0f64;
        for &y in ring {
            let d = geom::sub(mesh.positions[y], mesh.positions[x]);
            let a = geom::dot(d, basis.e0[x]);
            let b = geom::dot(d, basis.e1[x]);
            r = r.max((a * a + b * b).sqrt());
        }
        if r <= 0.0 {
            r = 1.0;
        }
        radius.push(r);

        let mut wsum = 0.0;
        for (slot, &y) in std::iter::once(&x).chain(ring.iter()).enumerate() {
            let is_center = slot == 0;
            neighbor.push(y);
            let w = mesh.one_ring_area[y];
            weight.push(w);
            wsum += w;
            let m = if is_center {
                0
            } else {
                atlas.offset(topo, x, y) as u8
            };
            offset.push(m);

            let d = geom::sub(mesh.positions[y], mesh.positions[x]);
            let a = geom::dot(d, basis.e0[x]) / r;
            let b = geom::dot(d, basis.e1[x]) / r;
            let h = geom::dot(d, basis.n[x]) / r;
            let ny = mesh.normals[y];
            let na = geom::dot(ny, basis.e0[x]);
            let nb = geom::dot(ny, basis.e1[x]);
            let nh = geom::dot(ny, basis.n[x]);
            for k in 0..n {
                let t = atlas.frame_angle(x, k);
                let (s, c) = t.sin_cos();
                // Rotate tangent coordinates into frame k.
                let u = a * c + b * s;
                let v = -a * s + b * c;
                monomials.push(monomial_row(u, v));
                let pn0 = na * c + nb * s;
                let pn1 = -na * s + nb * c;
                raw.push([pn0, pn1, nh, h, 1.0]);
            }
        }
        weight_sum.push(wsum);
        start.push(neighbor.len());
    }

    PatchData {
        n,
        vertices: nv,
        start,
        neighbor,
        weight,
        weight_sum,
        offset,
        monomials,
        raw,
        radius,
        isolated,
    }
}

/// Cubic polynomial kernel bank: coefficients indexed
/// (out_channel, in_channel, monomial), shared across groups and vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub weights: Vec<f64>,
}

impl PolyKernel {
    pub fn zeros(out_channels: usize, in_channels: usize) -> Self {
        PolyKernel {
            out_channels,
            in_channels,
            weights: vec![0.0; out_channels * in_channels * MONOMIALS],
        }
    }

    #[inline]
    pub fn coeffs(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.in_channels + j) * MONOMIALS;
        &self.weights[base..base + MONOMIALS]
    }

    #[inline]
    fn eval(&self, i: usize, j: usize, mono: &[f64; MONOMIALS]) -> f64 {
        let c = self.coeffs(i, j);
        let mut s = 0.0;
        for t in 0..MONOMIALS {
            s += c[t] * mono[t];
        }
        s
    }
}

fn check_gconv_shapes(
    patches: &PatchData,
    input: &GroupedFeatureMap,
    kernel: &PolyKernel,
) -> Result<(), ConvError> {
    if input.vertices != patches.vertices {
        return Err(ConvError::LevelMismatch {
            expected: patches.vertices,
            got: input.vertices,
        });
    }
    if input.groups != patches.n {
        return Err(ConvError::ShapeMismatch(format!(
            "input has {} groups, patches expect {}",
            input.groups, patches.n
        )));
    }
    if input.channels != kernel.in_channels {
        return Err(ConvError::ChannelMismatch {
            expected: kernel.in_channels,
            got: input.channels,
        });
    }
    Ok(())
}

/// Semi-discrete grouped convolution:
/// out^i(x, k) = (1/W_x) sum_j sum_{y in P(x)} w_y k^{ij}(u, v) in^j(y, (k+m(x,y)) mod N).
pub fn gconv(
    patches: &PatchData,
    input: &GroupedFeatureMap,
    kernel: &PolyKernel,
) -> Result<GroupedFeatureMap, ConvError> {
    check_gconv_shapes(patches, input, kernel)?;
    let n = patches.n;
    let (ci, co) = (kernel.in_channels, kernel.out_channels);
    let mut out = GroupedFeatureMap::zeros(n, co, patches.vertices);
    for x in 0..patches.vertices {
        let inv_w = 1.0 / patches.weight_sum[x];
        for e in patches.entries(x) {
            let y = patches.neighbor[e];
            let m = patches.offset[e] as usize;
            let w = patches.weight[e] * inv_w;
            for k in 0..n {
                let mono = &patches.monomials[e * n + k];
                let g_in = (k + m) % n;
                for i in 0..co {
                    let mut acc = 0.0;
                    for j in 0..ci {
                        acc += kernel.eval(i, j, mono) * input.get(g_in, j, y);
                    }
                    let slot = out.idx(k, i, x);
                    out.values[slot] += w * acc;
                }
            }
        }
    }
    out.check_finite("gconv")?;
    Ok(out)
}

/// Reverse-mode transpose of `gconv`: returns (input gradient, kernel
/// gradient) for a given upstream gradient.
pub fn gconv_backward(
    patches: &PatchData,
    input: &GroupedFeatureMap,
    kernel: &PolyKernel,
    out_grad: &GroupedFeatureMap,
) -> Result<(GroupedFeatureMap, PolyKernel), ConvError> {
    check_gconv_shapes(patches, input, kernel)?;
    let n = patches.n;
    let (ci, co) = (kernel.in_channels, kernel.out_channels);
    let mut in_grad = GroupedFeatureMap::zeros(n, ci, patches.vertices);
    let mut k_grad = PolyKernel::zeros(co, ci);
    for x in 0..patches.vertices {
        let inv_w = 1.0 / patches.weight_sum[x];
        for e in patches.entries(x) {
            let y = patches.neighbor[e];
            let m = patches.offset[e] as usize;
            let w = patches.weight[e] * inv_w;
            for k in 0..n {
                let mono = &patches.monomials[e * n + k];
                let g_in = (k + m) % n;
                for i in 0..co {
                    let g = w * out_grad.get(k, i, x);
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..ci {
                        let slot = in_grad.idx(g_in, j, y);
                        in_grad.values[slot] += g * kernel.eval(i, j, mono);
                        let f = g * input.get(g_in, j, y);
                        let base = (i * ci + j) * MONOMIALS;
                        for t in 0..MONOMIALS {
                            k_grad.weights[base + t] += f * mono[t];
                        }
                    }
                }
            }
        }
    }
    Ok((in_grad, k_grad))
}

/// First-layer convolution over the raw geometric input block: the "input
/// feature" of neighbor y under frame k of x is the 5-channel block cached
/// in PatchData, so only the kernel carries parameters.
pub fn gconv_raw(patches: &PatchData, kernel: &PolyKernel) -> Result<GroupedFeatureMap, ConvError> {
    if kernel.in_channels != RAW_CHANNELS {
        return Err(ConvError::ChannelMismatch {
            expected: RAW_CHANNELS,
            got: kernel.in_channels,
        });
    }
    let n = patches.n;
    let co = kernel.out_channels;
    let mut out = GroupedFeatureMap::zeros(n, co, patches.vertices);
    for x in 0..patches.vertices {
        let inv_w = 1.0 / patches.weight_sum[x];
        for e in patches.entries(x) {
            let w = patches.weight[e] * inv_w;
            for k in 0..n {
                let mono = &patches.monomials[e * n + k];
                let feat = &patches.raw[e * n + k];
                for i in 0..co {
                    let mut acc = 0.0;
                    for j in 0..RAW_CHANNELS {
                        acc += kernel.eval(i, j, mono) * feat[j];
                    }
                    let slot = out.idx(k, i, x);
                    out.values[slot] += w * acc;
                }
            }
        }
    }
    out.check_finite("gconv_raw")?;
    Ok(out)
}

/// Kernel gradient of `gconv_raw` (the geometry itself is not trained).
pub fn gconv_raw_backward(
    patches: &PatchData,
    kernel: &PolyKernel,
    out_grad: &GroupedFeatureMap,
) -> PolyKernel {
    let n = patches.n;
    let (ci, co) = (RAW_CHANNELS, kernel.out_channels);
    let mut k_grad = PolyKernel::zeros(co, ci);
    for x in 0..patches.vertices {
        let inv_w = 1.0 / patches.weight_sum[x];
        for e in patches.entries(x) {
            let w = patches.weight[e] * inv_w;
            for k in 0..n {
                let mono = &patches.monomials[e * n + k];
                let feat = &patches.raw[e * n + k];
                for i in 0..co {
                    let g = w * out_grad.get(k, i, x);
                    if g == 0.0 {
                        continue;
                    }
                    for j in 0..ci {
                        let base = (i * ci + j) * MONOMIALS;
                        let f = g * feat[j];
                        for t in 0..MONOMIALS {
                            k_grad.weights[base + t] += f * mono[t];
                        }
                    }
                }
            }
        }
    }
    k_grad
}

/// Grouped 1x1 convolution: a per-(group, vertex) affine map with weights
/// shared across groups.
pub fn gconv1x1(
    input: &GroupedFeatureMap,
    weights: &FeatureMap, // (out_channel, in_channel)
    bias: &[f64],
) -> Result<GroupedFeatureMap, ConvError> {
    let (co, ci) = (weights.channels, weights.vertices);
    if input.channels != ci {
        return Err(ConvError::ChannelMismatch {
            expected: ci,
            got: input.channels,
        });
    }
    if bias.len() != co {
        return Err(ConvError::ShapeMismatch(format!(
            "bias length {} vs {} output channels",
            bias.len(),
            co
        )));
    }
    let mut out = GroupedFeatureMap::zeros(input.groups, co, input.vertices);
    for g in 0..input.groups {
        for i in 0..co {
            for v in 0..input.vertices {
                let mut acc = bias[i];
                for j in 0..ci {
                    acc += weights.get(i, j) * input.get(g, j, v);
                }
                out.set(g, i, v, acc);
            }
        }
    }
    out.check_finite("gconv1x1")?;
    Ok(out)
}

pub fn gconv1x1_backward(
    input: &GroupedFeatureMap,
    weights: &FeatureMap,
    out_grad: &GroupedFeatureMap,
) -> (GroupedFeatureMap, FeatureMap, Vec<f64>) {
    let (co, ci) = (weights.channels, weights.vertices);
    let mut in_grad = GroupedFeatureMap::zeros(input.groups, ci, input.vertices);
    let mut w_grad = FeatureMap::zeros(co, ci);
    let mut b_grad = vec![0.0; co];
    for g in 0..input.groups {
        for i in 0..co {
            for v in 0..input.vertices {
                let go = out_grad.get(g, i, v);
                b_grad[i] += go;
                for j in 0..ci {
                    let slot = in_grad.idx(g, j, v);
                    in_grad.values[slot] += weights.get(i, j) * go;
                    w_grad.values[i * ci + j] += input.get(g, j, v) * go;
                }
            }
        }
    }
    (in_grad, w_grad, b_grad)
}

/// Copies an ungrouped feature map into N identical groups.
pub fn duplicate(features: &FeatureMap, n: usize) -> GroupedFeatureMap {
    let mut out = GroupedFeatureMap::zeros(n, features.channels, features.vertices);
    for g in 0..n {
        let base = g * features.values.len();
        out.values[base..base + features.values.len()].copy_from_slice(&features.values);
    }
    out
}

pub fn duplicate_backward(out_grad: &GroupedFeatureMap) -> FeatureMap {
    let mut grad = FeatureMap::zeros(out_grad.channels, out_grad.vertices);
    for g in 0..out_grad.groups {
        for c in 0..out_grad.channels {
            for v in 0..out_grad.vertices {
                grad.values[c * out_grad.vertices + v] += out_grad.get(g, c, v);
            }
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceMode {
    Max,
    Average,
}

/// Collapses groups into an ungrouped map by component-wise max (ties break
/// to the lowest group index) or mean.
pub fn reduce(input: &GroupedFeatureMap, mode: ReduceMode) -> (FeatureMap, Vec<usize>) {
    let mut out = FeatureMap::zeros(input.channels, input.vertices);
    let mut argmax = Vec::new();
    match mode {
        ReduceMode::Max => {
            argmax = vec![0usize; input.channels * input.vertices];
            for c in 0..input.channels {
                for v in 0..input.vertices {
                    let mut best = input.get(0, c, v);
                    let mut best_g = 0;
                    for g in 1..input.groups {
                        let x = input.get(g, c, v);
                        if x > best {
                            best = x;
                            best_g = g;
                        }
                    }
                    out.set(c, v, best);
                    argmax[c * input.vertices + v] = best_g;
                }
            }
        }
        ReduceMode::Average => {
            let inv = 1.0 / input.groups as f64;
            for c in 0..input.channels {
                for v in 0..input.vertices {
                    let mut s = 0.0;
                    for g in 0..input.groups {
                        s += input.get(g, c, v);
                    }
                    out.set(c, v, s * inv);
                }
            }
        }
    }
    (out, argmax)
}

pub fn reduce_backward(
    groups: usize,
    mode: ReduceMode,
    argmax: &[usize],
    out_grad: &FeatureMap,
) -> GroupedFeatureMap {
    let mut grad = GroupedFeatureMap::zeros(groups, out_grad.channels, out_grad.vertices);
    match mode {
        ReduceMode::Max => {
            for c in 0..out_grad.channels {
                for v in 0..out_grad.vertices {
                    let g = argmax[c * out_grad.vertices + v];
                    grad.set(g, c, v, out_grad.get(c, v));
                }
            }
        }
        ReduceMode::Average => {
            let inv = 1.0 / groups as f64;
            for g in 0..groups {
                for c in 0..out_grad.channels {
                    for v in 0..out_grad.vertices {
                        grad.set(g, c, v, out_grad.get(c, v) * inv);
                    }
                }
            }
        }
    }
    grad
}

/// Cross-level maps needed by pool/unpool: which coarse vertex each fine
/// vertex collapses to, and the group offset aligning their frames (coarse
/// group i matches fine group (i + offset) mod N).
#[derive(Debug, Clone)]
pub struct PoolMap {
    pub parent_of: Vec<usize>,
    pub group_offset: Vec<u8>,
    pub coarse_vertices: usize,
}

/// Grouped pooling: coarse vertex y, group i aggregates
/// f^{(i + offset(x)) mod N}(x) over fine children x. Returns the pooled map
/// plus, for max mode, the winning fine entry per output slot.
pub fn pool(
    input: &GroupedFeatureMap,
    map: &PoolMap,
    mode: ReduceMode,
) -> Result<(GroupedFeatureMap, Vec<usize>), ConvError> {
    if input.vertices != map.parent_of.len() {
        return Err(ConvError::LevelMismatch {
            expected: map.parent_of.len(),
            got: input.vertices,
        });
    }
    let n = input.groups;
    let mut out = GroupedFeatureMap::zeros(n, input.channels, map.coarse_vertices);
    let mut arg = Vec::new();
    match mode {
        ReduceMode::Max => {
            let mut best = vec![f64::NEG_INFINITY; out.values.len()];
            arg = vec![usize::MAX; out.values.len()];
            for x in 0..input.vertices {
                let y = map.parent_of[x];
                let o = map.group_offset[x] as usize;
                for i in 0..n {
                    let g = (i + o) % n;
                    for c in 0..input.channels {
                        let val = input.get(g, c, x);
                        let slot = out.idx(i, c, y);
                        if val > best[slot] {
                            best[slot] = val;
                            arg[slot] = input.idx(g, c, x);
                        }
                    }
                }
            }
            out.values.copy_from_slice(&best);
        }
        ReduceMode::Average => {
            let mut counts = vec![0usize; map.coarse_vertices];
            for &y in &map.parent_of {
                counts[y] += 1;
            }
            for x in 0..input.vertices {
                let y = map.parent_of[x];
                let o = map.group_offset[x] as usize;
                let inv = 1.0 / counts[y] as f64;
                for i in 0..n {
                    let g = (i + o) % n;
                    for c in 0..input.channels {
                        let slot = out.idx(i, c, y);
                        out.values[slot] += input.get(g, c, x) * inv;
                    }
                }
            }
        }
    }
    out.check_finite("pool")?;
    Ok((out, arg))
}

pub fn pool_backward(
    fine_vertices: usize,
    channels: usize,
    map: &PoolMap,
    mode: ReduceMode,
    arg: &[usize],
    out_grad: &GroupedFeatureMap,
) -> GroupedFeatureMap {
    let n = out_grad.groups;
    let mut grad = GroupedFeatureMap::zeros(n, channels, fine_vertices);
    match mode {
        ReduceMode::Max => {
            for (slot, &src) in arg.iter().enumerate() {
                if src != usize::MAX {
                    grad.values[src] += out_grad.values[slot];
                }
            }
        }
        ReduceMode::Average => {
            let mut counts = vec![0usize; map.coarse_vertices];
            for &y in &map.parent_of {
                counts[y] += 1;
            }
            for x in 0..fine_vertices {
                let y = map.parent_of[x];
                let o = map.group_offset[x] as usize;
                let inv = 1.0 / counts[y] as f64;
                for i in 0..n {
                    let g = (i + o) % n;
                    for c in 0..channels {
                        let slot = grad.idx(g, c, x);
                        grad.values[slot] += out_grad.get(i, c, y) * inv;
                    }
                }
            }
        }
    }
    grad
}

/// Unpooling copies parent values back to children through the same group
/// alignment as pool: fine vertex x, group (i + offset(x)) mod N receives
/// the parent's group i, so unpool is the copy transpose of pool.
pub fn unpool(input: &GroupedFeatureMap, map: &PoolMap) -> Result<GroupedFeatureMap, ConvError> {
    if input.vertices != map.coarse_vertices {
        return Err(ConvError::LevelMismatch {
            expected: map.coarse_vertices,
            got: input.vertices,
        });
    }
    let n = input.groups;
    let mut out = GroupedFeatureMap::zeros(n, input.channels, map.parent_of.len());
    for x in 0..map.parent_of.len() {
        let y = map.parent_of[x];
        let o = map.group_offset[x] as usize;
        for i in 0..n {
            let g = (i + o) % n;
            for c in 0..input.channels {
                out.set(g, c, x, input.get(i, c, y));
            }
        }
    }
    Ok(out)
}

pub fn unpool_backward(map: &PoolMap, out_grad: &GroupedFeatureMap) -> GroupedFeatureMap {
    let n = out_grad.groups;
    let mut grad = GroupedFeatureMap::zeros(n, out_grad.channels, map.coarse_vertices);
    for x in 0..map.parent_of.len() {
        let y = map.parent_of[x];
        let o = map.group_offset[x] as usize;
        for i in 0..n {
            let g = (i + o) % n;
            for c in 0..out_grad.channels {
                let slot = grad.idx(i, c, y);
                grad.values[slot] += out_grad.get(g, c, x);
            }
        }
    }
    grad
}

/// Batch normalization over grouped maps. Statistics are pooled per channel
/// jointly across groups and vertices, which keeps the layer equivariant
/// under section relabeling. Running statistics (momentum 0.9) serve eval
/// mode; to keep the forward pass pure for finite-difference checks, the
/// running update computed by `forward_train` is committed in `backward`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BatchNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub initialized: bool,
    pub momentum: f64,
    pub eps: f64,
}

/// Per-forward cache consumed by the backward pass.
pub struct BatchNormCtx {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub groups: usize,
    pub vertices: usize,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            scale: vec![1.0; channels],
            shift: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: false,
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn forward_train(
        &self,
        input: &GroupedFeatureMap,
    ) -> Result<(GroupedFeatureMap, BatchNormCtx), ConvError> {
        let ch = self.channels();
        if input.channels != ch {
            return Err(ConvError::ChannelMismatch {
                expected: ch,
                got: input.channels,
            });
        }
        let count = (input.groups * input.vertices) as f64;
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        for g in 0..input.groups {
            for c in 0..ch {
                for v in 0..input.vertices {
                    mean[c] += input.get(g, c, v);
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for g in 0..input.groups {
            for c in 0..ch {
                for v in 0..input.vertices {
                    let d = input.get(g, c, v) - mean[c];
                    var[c] += d * d;
                }
            }
        }
        for s in &mut var {
            *s /= count;
        }
        let inv_std: Vec<f64> = var.iter().map(|&s| 1.0 / (s + self.eps).sqrt()).collect();
        let mut out = GroupedFeatureMap::zeros(input.groups, ch, input.vertices);
        let mut x_hat = vec![0.0; input.values.len()];
        for g in 0..input.groups {
            for c in 0..ch {
                for v in 0..input.vertices {
                    let slot = input.idx(g, c, v);
                    let h = (input.values[slot] - mean[c]) * inv_std[c];
                    x_hat[slot] = h;
                    out.values[slot] = self.scale[c] * h + self.shift[c];
                }
            }
        }
        out.check_finite("batchnorm")?;
        Ok((
            out,
            BatchNormCtx {
                x_hat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                groups: input.groups,
                vertices: input.vertices,
            },
        ))
    }

    pub fn forward_eval(&self, input: &GroupedFeatureMap) -> Result<GroupedFeatureMap, ConvError> {
        if !self.initialized {
            return Err(ConvError::NoStatistics);
        }
        let ch = self.channels();
        if input.channels != ch {
            return Err(ConvError::ChannelMismatch {
                expected: ch,
                got: input.channels,
            });
        }
        let mut out = GroupedFeatureMap::zeros(input.groups, ch, input.vertices);
        for g in 0..input.groups {
            for c in 0..ch {
                let inv = 1.0 / (self.running_var[c] + self.eps).sqrt();
                for v in 0..input.vertices {
                    let h = (input.get(g, c, v) - self.running_mean[c]) * inv;
                    out.set(g, c, v, self.scale[c] * h + self.shift[c]);
                }
            }
        }
        out.check_finite("batchnorm")?;
        Ok(out)
    }

    /// Input/scale/shift gradients; also folds the cached batch statistics
    /// into the running statistics.
    pub fn backward(
        &mut self,
        ctx: &BatchNormCtx,
        out_grad: &GroupedFeatureMap,
    ) -> (GroupedFeatureMap, Vec<f64>, Vec<f64>) {
        let ch = self.channels();
        let count = (ctx.groups * ctx.vertices) as f64;
        let mut scale_grad = vec![0.0; ch];
        let mut shift_grad = vec![0.0; ch];
        let mut sum_g = vec![0.0; ch];
        let mut sum_gh = vec![0.0; ch];
        for g in 0..ctx.groups {
            for c in 0..ch {
                for v in 0..ctx.vertices {
                    let slot = out_grad.idx(g, c, v);
                    let go = out_grad.values[slot];
                    let h = ctx.x_hat[slot];
                    scale_grad[c] += go * h;
                    shift_grad[c] += go;
                    sum_g[c] += go;
                    sum_gh[c] += go * h;
                }
            }
        }
        let mut in_grad = GroupedFeatureMap::zeros(ctx.groups, ch, ctx.vertices);
        for g in 0..ctx.groups {
            for c in 0..ch {
                let a = self.scale[c] * ctx.inv_std[c];
                for v in 0..ctx.vertices {
                    let slot = out_grad.idx(g, c, v);
                    let go = out_grad.values[slot];
                    let h = ctx.x_hat[slot];
                    in_grad.values[slot] =
                        a * (go - sum_g[c] / count - h * sum_gh[c] / count);
                }
            }
        }
        // Commit the running-statistics update recorded at forward time.
        if self.initialized {
            for c in 0..ch {
                self.running_mean[c] =
                    self.momentum * self.running_mean[c] + (1.0 - self.momentum) * ctx.batch_mean[c];
                self.running_var[c] =
                    self.momentum * self.running_var[c] + (1.0 - self.momentum) * ctx.batch_var[c];
            }
        } else {
            self.running_mean.copy_from_slice(&ctx.batch_mean);
            self.running_var.copy_from_slice(&ctx.batch_var);
            self.initialized = true;
        }
        (in_grad, scale_grad, shift_grad)
    }
}

pub fn relu(input: &GroupedFeatureMap) -> GroupedFeatureMap {
    let mut out = input.clone();
    for x in &mut out.values {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    out
}

pub fn relu_backward(input: &GroupedFeatureMap, out_grad: &GroupedFeatureMap) -> GroupedFeatureMap {
    let mut grad = out_grad.clone();
    for (g, &x) in grad.values.iter_mut().zip(&input.values) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    grad
}

/// Average pooling over all vertices followed by a dense affine map to
/// class scores. Takes the ungrouped map produced by a prior reduce.
pub fn global_pool_dense(
    input: &FeatureMap,
    weights: &FeatureMap, // (class, channel)
    bias: &[f64],
) -> Result<Vec<f64>, ConvError> {
    let (k, ci) = (weights.channels, weights.vertices);
    if input.channels != ci {
        return Err(ConvError::ChannelMismatch {
            expected: ci,
            got: input.channels,
        });
    }
    if bias.len() != k {
        return Err(ConvError::ShapeMismatch(format!(
            "bias length {} vs {} classes",
            bias.len(),
            k
        )));
    }
    let inv = 1.0 / input.vertices as f64;
    let pooled: Vec<f64> = (0..ci)
        .map(|c| (0..input.vertices).map(|v| input.get(c, v)).sum::<f64>() * inv)
        .collect();
    let scores: Vec<f64> = (0..k)
        .map(|i| {
            bias[i]
                + (0..ci)
                    .map(|c| weights.get(i, c) * pooled[c])
                    .sum::<f64>()
        })
        .collect();
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(ConvError::NonFinite("global_pool_dense"));
    }
    Ok(scores)
}

pub fn global_pool_dense_backward(
    input: &FeatureMap,
    weights: &FeatureMap,
    score_grad: &[f64],
) -> (FeatureMap, FeatureMap, Vec<f64>) {
    let (k, ci) = (weights.channels, weights.vertices);
    let inv = 1.0 / input.vertices as f64;
    let pooled: Vec<f64> = (0..ci)
        .map(|c| (0..input.vertices).map(|v| input.get(c, v)).sum::<f64>() * inv)
        .collect();
    let mut w_grad = FeatureMap::zeros(k, ci);
    let mut b_grad = vec![0.0; k];
    let mut pooled_grad = vec![0.0; ci];
    for i in 0..k {
        b_grad[i] = score_grad[i];
        for c in 0..ci {
            w_grad.values[i * ci + c] = score_grad[i] * pooled[c];
            pooled_grad[c] += score_grad[i] * weights.get(i, c);
        }
    }
    let mut in_grad = FeatureMap::zeros(ci, input.vertices);
    for c in 0..ci {
        let g = pooled_grad[c] * inv;
        for v in 0..input.vertices {
            in_grad.set(c, v, g);
        }
    }
    (in_grad, w_grad, b_grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::{connection_coefficients, match_frames, solve_rosy, RosyOptions};
    use crate::synth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prepared(mesh: TriMesh) -> (TriMesh, Topology, TangentBasis, FrameAtlas) {
        let mut mesh = mesh;
        let topo = mesh.validate().unwrap();
        mesh.compute_vertex_geometry(&topo);
        let basis = mesh.tangent_basis();
        let conn = connection_coefficients(&mesh, &topo, &basis).unwrap();
        let opts = RosyOptions::default();
        let field = solve_rosy(&mesh, &topo, &conn, &basis, &opts).unwrap();
        let mut atlas = crate::frames::extract_frames(&field, &basis);
        match_frames(&mut atlas, &topo, &conn);
        (mesh, topo, basis, atlas)
    }

    fn random_map(rng: &mut ChaCha8Rng, g: usize, c: usize, v: usize) -> GroupedFeatureMap {
        let mut map = GroupedFeatureMap::zeros(g, c, v);
        for x in &mut map.values {
            *x = rng.gen_range(-1.0..1.0);
        }
        map
    }

    fn random_kernel(rng: &mut ChaCha8Rng, co: usize, ci: usize) -> PolyKernel {
        let mut k = PolyKernel::zeros(co, ci);
        for x in &mut k.weights {
            *x = rng.gen_range(-1.0..1.0);
        }
        k
    }

    /// Closed 1-ring hexagon in the z = 0 plane, unit circumradius.
    fn hexagon() -> TriMesh {
        let mut positions = vec![[0.0, 0.0, 0.0]];
        for k in 0..6 {
            let a = std::f64::consts::PI / 3.0 * k as f64;
            positions.push([a.cos(), a.sin(), 0.0]);
        }
        let triangles = (0..6).map(|k| [0, 1 + k, 1 + (k + 1) % 6]).collect();
        TriMesh::new(positions, triangles)
    }

    /// Atlas with root angle zero everywhere and zero offsets — valid on
    /// flat meshes where the constant field is parallel.
    fn trivial_atlas(n: usize, topo: &Topology, nv: usize) -> FrameAtlas {
        FrameAtlas {
            n,
            root_angle: vec![0.0; nv],
            offsets: vec![0; topo.edges.len()],
            face_index: Vec::new(),
        }
    }

    #[test]
    fn hexagon_patch_geometry() {
        let mut mesh = hexagon();
        let topo = mesh.validate().unwrap();
        mesh.compute_vertex_geometry(&topo);
        let basis = mesh.tangent_basis();
        let atlas = trivial_atlas(4, &topo, mesh.vertex_count());
        let p = build_patches(&mesh, &topo, &basis, &atlas);
        assert!(p.isolated.is_empty());
        assert!((p.radius[0] - 1.0).abs() < 1e-12);
        // Center entry: (u, v) = (0, 0), height 0, so the monomial row is
        // (1, 0, ..., 0); ring entries sit at normalized radius 1.
        let e0 = p.start[0];
        assert_eq!(p.neighbor[e0], 0);
        for k in 0..4 {
            let mono = &p.monomials[e0 * 4 + k];
            assert!((mono[0] - 1.0).abs() < 1e-12);
            for t in 1..MONOMIALS {
                assert!(mono[t].abs() < 1e-12);
            }
            assert!(p.raw[e0 * 4 + k][3].abs() < 1e-12);
        }
        for e in p.start[0] + 1..p.start[1] {
            for k in 0..4 {
                let mono = &p.monomials[e * 4 + k];
                let r2 = mono[1] * mono[1] + mono[2] * mono[2];
                assert!((r2 - 1.0).abs() < 1e-10, "ring radius^2 {}", r2);
                // Flat patch: projected normal is (0, 0, 1), height 0.
                let raw = &p.raw[e * 4 + k];
                assert!(raw[0].abs() < 1e-12 && raw[1].abs() < 1e-12);
                assert!((raw[2] - 1.0).abs() < 1e-12);
                assert!(raw[3].abs() < 1e-12);
                assert!((raw[4] - 1.0).abs() < 1e-12);
            }
        }
        assert!(p.weight_sum[0] > 0.0);
    }

    #[test]
    fn patch_radius_frame_independent_and_normalized() {
        let (mesh, topo, basis, atlas) = prepared(synth::icosphere(2, 1.0));
        let p = build_patches(&mesh, &topo, &basis, &atlas);
        for x in 0..mesh.vertex_count() {
            assert!(p.radius[x] > 0.0);
            // Max normalized tangent radius over the patch is exactly 1.
            for k in 0..p.n {
                let mut max_r: f64 = 0.0;
                for e in p.entries(x) {
                    let mono = &p.monomials[e * p.n + k];
                    max_r = max_r.max((mono[1] * mono[1] + mono[2] * mono[2]).sqrt());
                }
                assert!((max_r - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn patch_rigid_invariance_up_to_section_shift() {
        let base = synth::torus(16, 10, 1.0, 0.4);
        let (mesh, topo, basis, atlas) = prepared(base.clone());
        let p = build_patches(&mesh, &topo, &basis, &atlas);

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (rot, trans) = synth::random_rigid_motion(&mut rng);
        let moved = synth::apply_rigid(&base, &rot, trans);
        let (mesh2, topo2, basis2, atlas2) = prepared(moved);
        let p2 = build_patches(&mesh2, &topo2, &basis2, &atlas2);

        // Frames are geometric, so the moved field is the rotated field up
        // to a per-vertex relabeling s_x; recover it by matching frame 0.
        let n = atlas.n;
        let step = 2.0 * std::f64::consts::PI / n as f64;
        let shift: Vec<usize> = (0..mesh.vertex_count())
            .map(|x| {
                let d = geom::mat_vec(&rot, atlas.frame_dir3(&basis, x, 0));
                let phi = geom::dot(d, basis2.e1[x]).atan2(geom::dot(d, basis2.e0[x]));
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for s in 0..n {
                    let dist =
                        geom::wrap_angle(atlas2.frame_angle(x, s) - phi).abs();
                    if dist < best_d {
                        best_d = dist;
                        best = s;
                    }
                }
                assert!(best_d < 1e-6, "frame sets differ by {} > tol", best_d);
                let _ = step;
                best
            })
            .collect();

        for x in 0..mesh.vertex_count() {
            for (e, e2) in p.entries(x).zip(p2.entries(x)) {
                let y = p.neighbor[e];
                assert_eq!(y, p2.neighbor[e2]);
                assert!((p.weight[e] - p2.weight[e2]).abs() < 1e-8);
                for k in 0..n {
                    // Frame k of the original corresponds to frame
                    // (k + shift[x]) mod n after the motion.
                    let k2 = (k + shift[x]) % n;
                    let a = &p.monomials[e * n + k];
                    let b = &p2.monomials[e2 * n + k2];
                    for t in 0..MONOMIALS {
                        assert!((a[t] - b[t]).abs() < 1e-7, "monomial drift");
                    }
                    let ra = &p.raw[e * n + k];
                    let rb = &p2.raw[e2 * n + k2];
                    for t in 0..RAW_CHANNELS {
                        assert!((ra[t] - rb[t]).abs() < 1e-7, "raw drift");
                    }
                }
                if y != x {
                    let m = p.offset[e] as usize;
                    let m2 = p2.offset[e2] as usize;
                    assert_eq!((m + shift[y]) % n, (m2 + shift[x]) % n);
                }
            }
        }
    }

    #[test]
    fn gconv_constant_kernel_averages_constant() {
        let (mesh, topo, basis, atlas) = prepared(synth::icosphere(1, 1.0));
        let p = build_patches(&mesh, &topo, &basis, &atlas);
        let mut input = GroupedFeatureMap::zeros(4, 1, mesh.vertex_count());
        for x in &mut input.values {
            *x = 2.5;
        }
        let mut kernel = PolyKernel::zeros(1, 1);
        kernel.weights[0] = 1.0; // constant polynomial
        let out = gconv(&p, &input, &kernel).unwrap();
        for &x in &out.values {
            assert!((x - 2.5).abs() < 1e-12);
        }
        // Zero kernel -> zero output.
        let zero = gconv(&p, &input, &PolyKernel::zeros(1, 1)).unwrap();
        assert!(zero.values.iter().all(|&x| x == 0.0));
    }

    /// Scalar brute-force oracle on a hand-placed star patch: center with
    /// three neighbors, all quantities written out term by term.
    #[test]
    fn gconv_star_patch_scalar_oracle() {
        let n = 4;
        let coords = [(0.0, 0.0), (1.0, 0.0), (-0.4, 0.8), (0.3, -0.9)];
        let ws = [2.0, 1.0, 1.5, 0.5];
        let ms = [0u8, 1, 3, 2];
        let mut monomials = Vec::new();
        let mut raw = Vec::new();
        for (e, &(u, v)) in coords.iter().enumerate() {
            for k in 0..n {
                // Rotate the neighbor coordinates by the frame angle.
                let t = std::f64::consts::FRAC_PI_2 * k as f64;
                let (s, c) = t.sin_cos();
                let uk = u * c + v * s;
                let vk = -u * s + v * c;
                monomials.push(monomial_row(uk, vk));
                raw.push([0.0; RAW_CHANNELS]);
                let _ = e;
            }
        }
        let patches = PatchData {
            n,
            vertices: 1,
            start: vec![0, 4],
            neighbor: vec![0, 0, 0, 0], // all entries read vertex 0
            weight: ws.to_vec(),
            weight_sum: vec![ws.iter().sum()],
            offset: ms.to_vec(),
            monomials,
            raw,
            radius: vec![1.0],
            isolated: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = random_map(&mut rng, n, 2, 1);
        let kernel = random_kernel(&mut rng, 3, 2);
        let out = gconv(&patches, &input, &kernel).unwrap();

        let wsum: f64 = ws.iter().sum();
        for k in 0..n {
            for i in 0..3 {
                let mut expect = 0.0;
                for e in 0..4 {
                    let (u, v) = coords[e];
                    let t = std::f64::consts::FRAC_PI_2 * k as f64;
                    let uk = u * t.cos() + v * t.sin();
                    let vk = -u * t.sin() + v * t.cos();
                    for j in 0..2 {
                        let c = kernel.coeffs(i, j);
                        let poly = c[0]
                            + c[1] * uk
                            + c[2] * vk
                            + c[3] * uk * uk
                            + c[4] * uk * vk
                            + c[5] * vk * vk
                            + c[6] * uk * uk * uk
                            + c[7] * uk * uk * vk
                            + c[8] * uk * vk * vk
                            + c[9] * vk * vk * vk;
                        let g = (k + ms[e] as usize) % n;
                        expect += ws[e] * poly * input.get(g, j, 0);
                    }
                }
                expect /= wsum;
                assert!(
                    (out.get(k, i, 0) - expect).abs() < 1e-12,
                    "k={} i={}: {} vs {}",
                    k,
                    i,
                    out.get(k, i, 0),
                    expect
                );
            }
        }
    }

    #[test]
    fn gconv_linearity() {
        let (mesh, topo, basis, atlas) = prepared(synth::icosphere(1, 1.0));
        let p = build_patches(&mesh, &topo, &basis, &atlas);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_map(&mut rng, 4, 2, mesh.vertex_count());
        let g = random_map(&mut rng, 4, 2, mesh.vertex_count());
        let kernel = random_kernel(&mut rng, 2, 2);
        let (a, b) = (1.7, -0.3);
        let mut combo = f.clone();
        for (x, (&fx, &gx)) in combo.values.iter_mut().zip(f.values.iter().zip(&g.values)) {
            *x = a * fx + b * gx;
        }
        let out_combo = gconv(&p, &combo, &kernel).unwrap();
        let out_f = gconv(&p, &f, &kernel).unwrap();
        let out_g = gconv(&p, &g, &kernel).unwrap();
        for i in 0..out_combo.values.len() {
            let expect = a * out_f.values[i] + b * out_g.values[i];
            assert!((out_combo.values[i] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn flat_grid_dense_stencil_and_translation() {
        let mut mesh = synth::flat_grid(8, 8, 1.0);
        let topo = mesh.validate().unwrap();
        mesh.compute_vertex_geometry(&topo);
        let basis = mesh.tangent_basis();
        let atlas = trivial_atlas(4, &topo, mesh.vertex_count());
        let mut p = build_patches(&mesh, &topo, &basis, &atlas);
        // Uniform sampling weights isolate the stencil structure.
        for w in &mut p.weight {
            *w = 1.0;
        }
        for x in 0..p.vertices {
            p.weight_sum[x] = (p.start[x + 1] - p.start[x]) as f64;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let kernel = random_kernel(&mut rng, 1, 1);

        // Interior vertices share one dense stencil: weight per lattice
        // offset computed straight from the kernel polynomial.
        let idx = |i: i64, j: i64| (j * 8 + i) as usize;
        let interior: Vec<(i64, i64)> = (2..6).flat_map(|j| (2..6).map(move |i| (i, j))).collect();
        let offsets: [(i64, i64); 7] =
            [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1)];
        // All interior radii equal sqrt(2) (the long diagonal neighbors).
        let r = 2.0f64.sqrt();
        let stencil: Vec<f64> = offsets
            .iter()
            .map(|&(di, dj)| {
                let mono = monomial_row(di as f64 / r, dj as f64 / r);
                kernel.eval(0, 0, &mono) / 7.0
            })
            .collect();

        let mut input = GroupedFeatureMap::zeros(4, 1, p.vertices);
        for x in &mut input.values {
            *x = rng.gen_range(-1.0..1.0);
        }
        let out = gconv(&p, &input, &kernel).unwrap();
        for &(i, j) in &interior {
            let mut expect = 0.0;
            for (t, &(di, dj)) in offsets.iter().enumerate() {
                expect += stencil[t] * input.get(0, 0, idx(i + di, j + dj));
            }
            let got = out.get(0, 0, idx(i, j));
            assert!((got - expect).abs() < 1e-10, "stencil mismatch {} {}", got, expect);
        }

        // Translation equivariance: shift the input one lattice step in x;
        // deep-interior outputs shift identically.
        let mut shifted = GroupedFeatureMap::zeros(4, 1, p.vertices);
        for g in 0..4 {
            for j in 0..8i64 {
                for i in 1..8i64 {
                    let v = input.get(g, 0, idx(i - 1, j));
                    shifted.set(g, 0, idx(i, j), v);
                }
            }
        }
        let out_shift = gconv(&p, &shifted, &kernel).unwrap();
        for j in 2..6i64 {
            for i in 3..6i64 {
                let a = out_shift.get(0, 0, idx(i, j));
                let b = out.get(0, 0, idx(i - 1, j));
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn section_shift_permutes_groups_and_reduce_invariant() {
        let (mesh, topo, basis, atlas) = prepared(synth::torus(12, 8, 1.0, 0.4));
        let p = build_patches(&mesh, &topo, &basis, &atlas);
        let shifted_atlas = atlas.shifted(1);
        let p2 = build_patches(&mesh, &topo, &basis, &shifted_atlas);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let kernel = random_kernel(&mut rng, 2, RAW_CHANNELS);
        let out = gconv_raw(&p, &kernel).unwrap();
        let out2 = gconv_raw(&p2, &kernel).unwrap();
        for k in 0..4 {
            for c in 0..2 {
                for v in 0..mesh.vertex_count() {
                    let a = out.get((k + 1) % 4, c, v);
                    let b = out2.get(k, c, v);
                    assert!((a - b).abs() < 1e-9, "shift equivariance broken");
                }
            }
        }
        let (r1, _) = reduce(&out, ReduceMode::Max);
        let (r2, _) = reduce(&out2, ReduceMode::Max);
        for (a, b) in r1.values.iter().zip(&r2.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn gconv1x1_identity_and_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = random_map(&mut rng, 4, 3, 7);
        let mut eye = FeatureMap::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        let out = gconv1x1(&input, &eye, &[0.0; 3]).unwrap();
        assert_eq!(out.values, input.values);

        let mut w = FeatureMap::zeros(2, 3);
        for x in &mut w.values {
            *x = rng.gen_range(-1.0..1.0);
        }
        let bias = [0.3, -0.1];
        let out = gconv1x1(&input, &w, &bias).unwrap();
        for g in 0..4 {
            for v in 0..7 {
                for i in 0..2 {
                    let mut expect = bias[i];
                    for j in 0..3 {
                        expect += w.get(i, j) * input.get(g, j, v);
                    }
                    assert!((out.get(g, i, v) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn duplicate_reduce_round_trip() {
        let feat = FeatureMap {
            channels: 1,
            vertices: 3,
            values: vec![1.0, -2.0, 3.0],
        };
        let dup = duplicate(&feat, 4);
        for g in 0..4 {
            for v in 0..3 {
                assert_eq!(dup.get(g, 0, v), feat.get(0, v));
            }
        }
        let (rmax, _) = reduce(&dup, ReduceMode::Max);
        let (ravg, _) = reduce(&dup, ReduceMode::Average);
        assert_eq!(rmax.values, feat.values);
        for (a, b) in ravg.values.iter().zip(&feat.values) {
            assert!((a - b).abs() < 1e-14);
        }
        let single = duplicate(&feat, 1);
        assert_eq!(single.values, feat.values);
    }

    #[test]
    fn reduce_modes_and_permutation_invariance() {
        let input = GroupedFeatureMap {
            groups: 4,
            channels: 1,
            vertices: 1,
            values: vec![1.0, 3.0, 2.0, 0.0],
        };
        let (m, arg) = reduce(&input, ReduceMode::Max);
        assert_eq!(m.values[0], 3.0);
        assert_eq!(arg[0], 1);
        let (a, _) = reduce(&input, ReduceMode::Average);
        assert!((a.values[0] - 1.5).abs() < 1e-14);

        // Max-reduce invariant over all 24 group permutations.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = random_map(&mut rng, 4, 2, 5);
        let (expect, _) = reduce(&base, ReduceMode::Max);
        let perms4: Vec<[usize; 4]> = {
            let mut out = Vec::new();
            for a in 0..4 {
                for b in 0..4 {
                    for c in 0..4 {
                        for d in 0..4 {
                            let p = [a, b, c, d];
                            let mut seen = [false; 4];
                            p.iter().for_each(|&x| seen[x] = true);
                            if seen.iter().all(|&s| s) {
                                out.push(p);
                            }
                        }
                    }
                }
            }
            out
        };
        assert_eq!(perms4.len(), 24);
        for perm in perms4 {
            let mut shuffled = base.clone();
            for (g_new, &g_old) in perm.iter().enumerate() {
                for c in 0..2 {
                    for v in 0..5 {
                        shuffled.set(g_new, c, v, base.get(g_old, c, v));
                    }
                }
            }
            let (got, _) = reduce(&shuffled, ReduceMode::Max);
            assert_eq!(got.values, expect.values);
        }
    }

    #[test]
    fn pool_unpool_trivial_cases() {
        // Single child per parent, zero offsets: pool is a relabeling and
        // unpool inverts it.
        let map = PoolMap {
            parent_of: vec![0, 1],
            group_offset: vec![0, 0],
            coarse_vertices: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_map(&mut rng, 4, 2, 2);
        let (pooled, _) = pool(&input, &map, ReduceMode::Max).unwrap();
        assert_eq!(pooled.values, input.values);
        let back = unpool(&pooled, &map).unwrap();
        assert_eq!(back.values, input.values);

        // Two children (2, 5), max: parent sees 5; gradient reaches only
        // the winning child.
        let map2 = PoolMap {
            parent_of: vec![0, 0],
            group_offset: vec![0, 0],
            coarse_vertices: 1,
        };
        let two = GroupedFeatureMap {
            groups: 1,
            channels: 1,
            vertices: 2,
            values: vec![2.0, 5.0],
        };
        let (pooled, arg) = pool(&two, &map2, ReduceMode::Max).unwrap();
        assert_eq!(pooled.values, vec![5.0]);
        let grad_out = GroupedFeatureMap {
            groups: 1,
            channels: 1,
            vertices: 1,
            values: vec![1.0],
        };
        let grad = pool_backward(2, 1, &map2, ReduceMode::Max, &arg, &grad_out);
        assert_eq!(grad.values, vec![0.0, 1.0]);

        // Constant map: pool and unpool preserve the constant under any
        // offsets.
        let map3 = PoolMap {
            parent_of: vec![0, 0, 1],
            group_offset: vec![1, 3, 2],
            coarse_vertices: 2,
        };
        let mut constant = GroupedFeatureMap::zeros(4, 1, 3);
        for x in &mut constant.values {
            *x = 7.0;
        }
        let (pooled, _) = pool(&constant, &map3, ReduceMode::Average).unwrap();
        assert!(pooled.values.iter().all(|&x| (x - 7.0).abs() < 1e-12));
        let back = unpool(&pooled, &map3).unwrap();
        assert!(back.values.iter().all(|&x| (x - 7.0).abs() < 1e-12));
    }

    #[test]
    fn pool_respects_group_offsets() {
        // One child with offset 1: parent group i must read child group
        // (i + 1) mod 4, and unpool must put it back.
        let map = PoolMap {
            parent_of: vec![0],
            group_offset: vec![1],
            coarse_vertices: 1,
        };
        let child = GroupedFeatureMap {
            groups: 4,
            channels: 1,
            vertices: 1,
            values: vec![10.0, 11.0, 12.0, 13.0],
        };
        let (pooled, _) = pool(&child, &map, ReduceMode::Max).unwrap();
        assert_eq!(pooled.values, vec![11.0, 12.0, 13.0, 10.0]);
        let back = unpool(&pooled, &map).unwrap();
        assert_eq!(back.values, child.values);
    }

    #[test]
    fn batchnorm_identity_and_relu() {
        // Mean-0 variance-1 input passes through (up to eps).
        let input = GroupedFeatureMap {
            groups: 1,
            channels: 1,
            vertices: 2,
            values: vec![1.0, -1.0],
        };
        let bn = BatchNorm::new(1);
        let (out, _) = bn.forward_train(&input).unwrap();
        for (a, b) in out.values.iter().zip(&input.values) {
            assert!((a - b).abs() < 1e-4);
        }

        let r = relu(&GroupedFeatureMap {
            groups: 1,
            channels: 1,
            vertices: 3,
            values: vec![-1.0, 0.0, 2.0],
        });
        assert_eq!(r.values, vec![0.0, 0.0, 2.0]);

        // Eval without statistics errors out.
        assert!(matches!(
            bn.forward_eval(&input),
            Err(ConvError::NoStatistics)
        ));
    }

    #[test]
    fn global_pool_dense_trivial_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // V identical columns -> pooled vector equals the column.
        let mut input = FeatureMap::zeros(3, 5);
        for c in 0..3 {
            for v in 0..5 {
                input.set(c, v, c as f64 + 1.0);
            }
        }
        let mut eye = FeatureMap::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        let scores = global_pool_dense(&input, &eye, &[0.0; 3]).unwrap();
        assert_eq!(scores, vec![1.0, 2.0, 3.0]);

        // Zero weights -> scores = bias.
        let zero_w = FeatureMap::zeros(2, 3);
        let scores = global_pool_dense(&input, &zero_w, &[0.4, -0.2]).unwrap();
        assert_eq!(scores, vec![0.4, -0.2]);

        // Random case vs dense oracle.
        let mut input = FeatureMap::zeros(3, 4);
        let mut w = FeatureMap::zeros(2, 3);
        for x in input.values.iter_mut().chain(&mut w.values) {
            *x = rng.gen_range(-1.0..1.0);
        }
        let bias = [0.1, 0.2];
        let scores = global_pool_dense(&input, &w, &bias).unwrap();
        for i in 0..2 {
            let mut expect = bias[i];
            for c in 0..3 {
                let pooled: f64 =
                    (0..4).map(|v| input.get(c, v)).sum::<f64>() / 4.0;
                expect += w.get(i, c) * pooled;
            }
            assert!((scores[i] - expect).abs() < 1e-12);
        }
    }

    // --- finite-difference gradient checks ---

    fn fd_check(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], tol: f64) {
        let h = 1e-5;
        let mut xp = x.to_vec();
        for i in 0..x.len() {
            xp[i] = x[i] + h;
            let up = f(&xp);
            xp[i] = x[i] - h;
            let dn = f(&xp);
            xp[i] = x[i];
            let fd = (up - dn) / (2.0 * h);
            if (fd - analytic[i]).abs() < 1e-8 {
                // Below central-difference rounding noise.
                continue;
            }
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (fd - analytic[i]).abs() / denom < tol,
                "grad[{}]: fd {} vs analytic {}",
                i,
                fd,
                analytic[i]
            );
        }
    }

    /// Shared random linear probe so the scalar loss is smooth.
    fn probe(values: &[f64], seed: u64) -> (Vec<f64>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe: Vec<f64> = (0..values.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = values.iter().zip(&probe).map(|(a, b)| a * b).sum();
        (probe, loss)
    }

    #[test]
    fn gconv_gradients_match_finite_differences() {
        let (mesh, topo, basis, atlas) = prepared(synth::icosphere(1, 1.0));
        let p = build_patches(&mesh, &topo, &basis, &atlas);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let input = random_map(&mut rng, 4, 2, mesh.vertex_count());
        let kernel = random_kernel(&mut rng, 2, 2);
        let out = gconv(&p, &input, &kernel).unwrap();
        let (probe_vec, _) = probe(&out.values, 100);
        let mut og = out.clone();
        og.values.copy_from_slice(&probe_vec);
        let (in_grad, k_grad) = gconv_backward(&p, &input, &kernel, &og).unwrap();

        fd_check(
            |x| {
                let mut m = input.clone();
                m.values.copy_from_slice(x);
                let o = gconv(&p, &m, &kernel).unwrap();
                o.values.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
            },
            &input.values,
            &in_grad.values,
            1e-4,
        );
        fd_check(
            |x| {
                let mut k = kernel.clone();
                k.weights.copy_from_slice(x);
                let o = gconv(&p, &input, &k).unwrap();
                o.values.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
            },
            &kernel.weights,
            &k_grad.weights,
            1e-4,
        );
    }

    #[test]
    fn gconv_raw_kernel_gradient_matches_finite_differences() {
        let (mesh, topo, basis, atlas) = prepared(synth::icosphere(1, 1.0));
        let p = build_patches(&mesh, &topo, &basis, &atlas);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let kernel = random_kernel(&mut rng, 2, RAW_CHANNELS);
        let out = gconv_raw(&p, &kernel).unwrap();
        let (probe_vec, _) = probe(&out.values, 101);
        let mut og = out.clone();
        og.values.copy_from_slice(&probe_vec);
        let k_grad = gconv_raw_backward(&p, &kernel, &og);
        fd_check(
            |x| {
                let mut k = kernel.clone();
                k.weights.copy_from_slice(x);
                let o = gconv_raw(&p, &k).unwrap();
                o.values.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
            },
            &kernel.weights,
            &k_grad.weights,
            1e-4,
        );
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let input = random_map(&mut rng, 4, 3, 6);

        // gconv1x1
        let mut w = FeatureMap::zeros(2, 3);
        for x in &mut w.values {
            *x = rng.gen_range(-1.0..1.0);
        }
        let bias = vec![0.1, -0.2];
        let out = gconv1x1(&input, &w, &bias).unwrap();
        let (probe_vec, _) = probe(&out.values, 102);
        let mut og = out.clone();
        og.values.copy_from_slice(&probe_vec);
        let (in_g, w_g, b_g) = gconv1x1_backward(&input, &w, &og);
        fd_check(
            |x| {
                let mut m = input.clone();
                m.values.copy_from_slice(x);
                let o = gconv1x1(&m, &w, &bias).unwrap();
                o.values.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
            },
            &input.values,
            &in_g.values,
            1e-4,
        );
        fd_check(
            |x| {
                let mut m = w.clone();
                m.values.copy_from_slice(x);
                let o = gconv1x1(&input, &m, &bias).unwrap();
                o.values.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
            },
            &w.values,
            &w_g.values,
            1e-4,
        );
        fd_check(
            |x| {
                let o = gconv1x1(&input, &w, x).unwrap();
                o.values.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
            },
            &bias,
            &b_g,
            1e-4,
        );

        // reduce (average is smooth; max is checked away from ties by the
        // random input).
        for mode in [ReduceMode::Max, ReduceMode::Average] {
            let (out, arg) = reduce(&input, mode);
            let (probe_vec, _) = probe(&out.values, 103);
            let mut og = out.clone();
            og.values.copy_from_slice(&probe_vec);
            let grad = reduce_backward(4, mode, &arg, &og);
            fd_check(
                |x| {
                    let mut m = input.clone();
                    m.values.copy_from_slice(x);
                    let (o, _) = reduce(&m, mode);
                    o.values.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
                },
                &input.values,
                &grad.values,
                1e-4,
            );
        }

        // pool / unpool
        let map = PoolMap {
            parent_of: vec![0, 0, 1, 1, 1, 0],
            group_offset: vec![0, 1, 2, 0, 3, 1],
            coarse_vertices: 2,
        };
        for mode in [ReduceMode::Max, ReduceMode::Average] {
            let (out, arg) = pool(&input, &map, mode).unwrap();
            let (probe_vec, _) = probe(&out.values, 104);
            let mut og = out.clone();
            og.values.copy_from_slice(&probe_vec);
            let grad = pool_backward(6, 3, &map, mode, &arg, &og);
            fd_check(
                |x| {
                    let mut m = input.clone();
                    m.values.copy_from_slice(x);
                    let (o, _) = pool(&m, &map, mode).unwrap();
                    o.values.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
                },
                &input.values,
                &grad.values,
                1e-4,
            );
        }
        let coarse = random_map(&mut rng, 4, 3, 2);
        let out = unpool(&coarse, &map).unwrap();
        let (probe_vec, _) = probe(&out.values, 105);
        let mut og = out.clone();
        og.values.copy_from_slice(&probe_vec);
        let grad = unpool_backward(&map, &og);
        fd_check(
            |x| {
                let mut m = coarse.clone();
                m.values.copy_from_slice(x);
                let o = unpool(&m, &map).unwrap();
                o.values.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
            },
            &coarse.values,
            &grad.values,
            1e-4,
        );

        // global_pool_dense
        let (feat, _) = reduce(&input, ReduceMode::Average);
        let mut dw = FeatureMap::zeros(2, 3);
        for x in &mut dw.values {
            *x = rng.gen_range(-1.0..1.0);
        }
        let db = vec![0.0, 0.5];
        let scores = global_pool_dense(&feat, &dw, &db).unwrap();
        let (probe_vec, _) = probe(&scores, 106);
        let (in_g, w_g, b_g) = global_pool_dense_backward(&feat, &dw, &probe_vec);
        fd_check(
            |x| {
                let mut m = feat.clone();
                m.values.copy_from_slice(x);
                let s = global_pool_dense(&m, &dw, &db).unwrap();
                s.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
            },
            &feat.values,
            &in_g.values,
            1e-4,
        );
        fd_check(
            |x| {
                let mut m = dw.clone();
                m.values.copy_from_slice(x);
                let s = global_pool_dense(&feat, &m, &db).unwrap();
                s.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
            },
            &dw.values,
            &w_g.values,
            1e-4,
        );
        fd_check(
            |x| {
                let s = global_pool_dense(&feat, &dw, x).unwrap();
                s.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
            },
            &db,
            &b_g,
            1e-4,
        );
    }

    #[test]
    fn batchnorm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let input = random_map(&mut rng, 4, 2, 5);
        let mut bn = BatchNorm::new(2);
        for (i, x) in bn.scale.iter_mut().enumerate() {
            *x = 1.0 + 0.2 * i as f64;
        }
        bn.shift = vec![0.1, -0.3];
        let (out, ctx) = bn.forward_train(&input).unwrap();
        let (probe_vec, _) = probe(&out.values, 107);
        let mut og = out.clone();
        og.values.copy_from_slice(&probe_vec);
        let bn_frozen = bn.clone();
        let (in_g, s_g, sh_g) = bn.backward(&ctx, &og);

        fd_check(
            |x| {
                let mut m = input.clone();
                m.values.copy_from_slice(x);
                let (o, _) = bn_frozen.forward_train(&m).unwrap();
                o.values.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
            },
            &input.values,
            &in_g.values,
            1e-4,
        );
        fd_check(
            |x| {
                let mut b = bn_frozen.clone();
                b.scale.copy_from_slice(x);
                let (o, _) = b.forward_train(&input).unwrap();
                o.values.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
            },
            &bn_frozen.scale,
            &s_g,
            1e-4,
        );
        fd_check(
            |x| {
                let mut b = bn_frozen.clone();
                b.shift.copy_from_slice(x);
                let (o, _) = b.forward_train(&input).unwrap();
                o.values.iter().zip(&probe_vec).map(|(a, b)| a * b).sum()
            },
            &bn_frozen.shift,
            &sh_g,
            1e-4,
        );

        // Running statistics were committed by backward; eval now works and
        // ReLU masks negatives in its gradient.
        assert!(bn.forward_eval(&input).is_ok());
        let g = relu_backward(
            &GroupedFeatureMap {
                groups: 1,
                channels: 1,
                vertices: 3,
                values: vec![-1.0, 0.0, 2.0],
            },
            &GroupedFeatureMap {
                groups: 1,
                channels: 1,
                vertices: 3,
                values: vec![1.0, 1.0, 1.0],
            },
        );
        assert_eq!(g.values, vec![0.0, 0.0, 1.0]);
    }
}
