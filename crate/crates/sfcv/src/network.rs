//! Network descriptions and the execution engine: an ordered layer list is
//! validated against a mesh hierarchy, given parameters, and run forward
//! and backward with a per-run activation tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::convops::{
    self, BatchNorm, BatchNormCtx, ConvError, FeatureMap, GroupedFeatureMap, PolyKernel, PoolMap,
    PatchData, ReduceMode, MONOMIALS, RAW_CHANNELS,
};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("layer {index} ({name}): {reason}")]
    BadLayer {
        index: usize,
        name: &'static str,
        reason: String,
    },
    #[error("network produced no output (empty layer list or no terminal layer)")]
    NoOutput,
    #[error(transparent)]
    Conv(#[from] ConvError),
    #[error("network description: {0}")]
    Description(String),
}

/// One layer of the ordered network description. Serialized as JSON with a
/// `type` tag.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// First layer: convolves the raw geometric patch features.
    GconvRaw { out_channels: usize },
    Gconv { out_channels: usize },
    Gconv1x1 { out_channels: usize },
    /// Two gconvs with batchnorm/ReLU and a skip addition; keeps the
    /// channel count.
    ResidualBlock,
    Batchnorm,
    Relu,
    Duplicate,
    Reduce { mode: ReduceMode },
    Pool { mode: ReduceMode },
    Unpool,
    GlobalPoolDense { classes: usize },
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::GconvRaw { .. } => "gconv_raw",
            LayerSpec::Gconv { .. } => "gconv",
            LayerSpec::Gconv1x1 { .. } => "gconv1x1",
            LayerSpec::ResidualBlock => "residual_block",
            LayerSpec::Batchnorm => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Duplicate => "duplicate",
            LayerSpec::Reduce { .. } => "reduce",
            LayerSpec::Pool { .. } => "pool",
            LayerSpec::Unpool => "unpool",
            LayerSpec::GlobalPoolDense { .. } => "global_pool_dense",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkDescription {
    pub n: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkDescription {
    pub fn from_json(text: &str) -> Result<Self, NetworkError> {
        serde_json::from_str(text).map_err(|e| NetworkError::Description(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("description serializes")
    }

    /// Hash of the canonical JSON form, used to pin checkpoints to the
    /// description they were trained with.
    pub fn content_hash(&self) -> [u8; 32] {
        let canonical = serde_json::to_string(self).expect("description serializes");
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        h.finalize().into()
    }
}

/// What flows between layers.
#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Grouped { channels: usize, level: usize },
    Dense { channels: usize, level: usize },
    Scores { classes: usize },
}

/// Per-level data a network run needs: patches for every level and the
/// cross-level pooling maps (pools[k] goes from level k to k+1).
#[derive(Debug, Clone)]
pub struct MeshContext {
    pub patches: Vec<PatchData>,
    pub pools: Vec<PoolMap>,
}

impl MeshContext {
    pub fn levels(&self) -> usize {
        self.patches.len()
    }
}

/// Checks the layer list against a hierarchy shape (vertex counts play no
/// role here; only typing, channels, and level indices). Returns the output
/// shape description for callers that need it.
fn validate(
    desc: &NetworkDescription,
    levels: usize,
) -> Result<Shape, NetworkError> {
    let bad = |index: usize, name: &'static str, reason: String| NetworkError::BadLayer {
        index,
        name,
        reason,
    };
    let mut shape: Option<Shape> = None;
    for (i, layer) in desc.layers.iter().enumerate() {
        let name = layer.name();
        shape = Some(match (layer, shape) {
            (LayerSpec::GconvRaw { out_channels }, None) => Shape::Grouped {
                channels: *out_channels,
                level: 0,
            },
            (LayerSpec::GconvRaw { .. }, Some(_)) => {
                return Err(bad(i, name, "must be the first layer".into()))
            }
            (LayerSpec::Gconv { out_channels }, Some(Shape::Grouped { level, .. })) => {
                Shape::Grouped {
                    channels: *out_channels,
                    level,
                }
            }
            (LayerSpec::Gconv1x1 { out_channels }, Some(Shape::Grouped { level, .. })) => {
                Shape::Grouped {
                    channels: *out_channels,
                    level,
                }
            }
            (LayerSpec::ResidualBlock, Some(s @ Shape::Grouped { .. })) => s,
            (LayerSpec::Batchnorm, Some(s @ Shape::Grouped { .. })) => s,
            (LayerSpec::Relu, Some(s @ Shape::Grouped { .. })) => s,
            (LayerSpec::Duplicate, Some(Shape::Dense { channels, level })) => {
                Shape::Grouped { channels, level }
            }
            (LayerSpec::Reduce { .. }, Some(Shape::Grouped { channels, level })) => {
                Shape::Dense { channels, level }
            }
            (LayerSpec::Pool { .. }, Some(Shape::Grouped { channels, level })) => {
                if level + 1 >= levels {
                    return Err(bad(i, name, format!("no level below {}", level)));
                }
                Shape::Grouped {
                    channels,
                    level: level + 1,
                }
            }
            (LayerSpec::Unpool, Some(Shape::Grouped { channels, level })) => {
                if level == 0 {
                    return Err(bad(i, name, "already at the finest level".into()));
                }
                Shape::Grouped {
                    channels,
                    level: level - 1,
                }
            }
            (LayerSpec::GlobalPoolDense { classes }, Some(Shape::Dense { .. })) => {
                Shape::Scores { classes: *classes }
            }
            (_, prior) => {
                return Err(bad(
                    i,
                    name,
                    format!("cannot follow {:?}", prior.map(|s| format!("{:?}", s))),
                ))
            }
        });
    }
    shape.ok_or(NetworkError::NoOutput)
}

/// Parameters (and batchnorm state) for one layer.
#[derive(Debug, Clone)]
pub enum LayerState {
    GconvRaw { kernel: PolyKernel },
    Gconv { kernel: PolyKernel },
    Gconv1x1 { weights: FeatureMap, bias: Vec<f64> },
    ResidualBlock {
        kernel1: PolyKernel,
        bn1: BatchNorm,
        kernel2: PolyKernel,
        bn2: BatchNorm,
    },
    Batchnorm(BatchNorm),
    GlobalPoolDense { weights: FeatureMap, bias: Vec<f64> },
    Stateless,
}

/// Gradients mirroring `LayerState` (batchnorm scale/shift as two vecs).
#[derive(Debug, Clone)]
pub enum LayerGrad {
    Kernel(PolyKernel),
    Affine { weights: FeatureMap, bias: Vec<f64> },
    ResidualBlock {
        kernel1: PolyKernel,
        bn1: (Vec<f64>, Vec<f64>),
        kernel2: PolyKernel,
        bn2: (Vec<f64>, Vec<f64>),
    },
    Batchnorm { scale: Vec<f64>, shift: Vec<f64> },
    None,
}

fn init_kernel(rng: &mut ChaCha8Rng, co: usize, ci: usize) -> PolyKernel {
    // Fan-based uniform bound with the monomial count as kernel size.
    let s = (6.0 / (MONOMIALS * ci + MONOMIALS * co) as f64).sqrt();
    let mut k = PolyKernel::zeros(co, ci);
    for x in &mut k.weights {
        *x = rng.gen_range(-s..s);
    }
    k
}

fn init_affine(rng: &mut ChaCha8Rng, co: usize, ci: usize) -> (FeatureMap, Vec<f64>) {
    let s = (6.0 / (ci + co) as f64).sqrt();
    let mut w = FeatureMap::zeros(co, ci);
    for x in &mut w.values {
        *x = rng.gen_range(-s..s);
    }
    (w, vec![0.0; co])
}

/// A description bound to parameters.
#[derive(Debug, Clone)]
pub struct Network {
    pub desc: NetworkDescription,
    pub layers: Vec<LayerState>,
}

/// Network output: class scores for classification heads, a dense map for
/// per-vertex heads, or a grouped map when the network ends mid-pipeline.
#[derive(Debug, Clone)]
pub enum Output {
    Scores(Vec<f64>),
    Dense(FeatureMap),
    Grouped(GroupedFeatureMap),
}

impl Output {
    pub fn values(&self) -> &[f64] {
        match self {
            Output::Scores(s) => s,
            Output::Dense(f) => &f.values,
            Output::Grouped(g) => &g.values,
        }
    }
}

/// Gradient flowing backward, mirroring `Output`.
pub enum OutputGrad {
    Scores(Vec<f64>),
    Dense(FeatureMap),
    Grouped(GroupedFeatureMap),
}

enum Value {
    Grouped(GroupedFeatureMap, usize),
    Dense(FeatureMap, usize),
    Scores(Vec<f64>),
}

/// Cached inputs/contexts per layer, consumed by `backward`.
enum TapeEntry {
    GconvRaw,
    Gconv { input: GroupedFeatureMap },
    Gconv1x1 { input: GroupedFeatureMap },
    ResidualBlock {
        input: GroupedFeatureMap,
        h1: GroupedFeatureMap,
        ctx1: BatchNormCtx,
        bn1_out: GroupedFeatureMap,
        h2: GroupedFeatureMap,
        ctx2: BatchNormCtx,
        sum: GroupedFeatureMap,
    },
    Batchnorm { ctx: BatchNormCtx },
    BatchnormEval,
    Relu { input: GroupedFeatureMap },
    Duplicate,
    Reduce { groups: usize, mode: ReduceMode, argmax: Vec<usize> },
    Pool {
        level: usize,
        mode: ReduceMode,
        arg: Vec<usize>,
        fine_vertices: usize,
        channels: usize,
    },
    Unpool { level: usize },
    GlobalPoolDense { input: FeatureMap },
}

pub struct Tape {
    entries: Vec<TapeEntry>,
}

impl Network {
    /// Fresh parameters for a description; deterministic per seed.
    pub fn init(desc: NetworkDescription, levels: usize, seed: u64) -> Result<Self, NetworkError> {
        validate(&desc, levels)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = 0usize;
        let mut layers = Vec::with_capacity(desc.layers.len());
        for layer in &desc.layers {
            let state = match layer {
                LayerSpec::GconvRaw { out_channels } => {
                    let k = init_kernel(&mut rng, *out_channels, RAW_CHANNELS);
                    channels = *out_channels;
                    LayerState::GconvRaw { kernel: k }
                }
                LayerSpec::Gconv { out_channels } => {
                    let k = init_kernel(&mut rng, *out_channels, channels);
                    channels = *out_channels;
                    LayerState::Gconv { kernel: k }
                }
                LayerSpec::Gconv1x1 { out_channels } => {
                    let (w, b) = init_affine(&mut rng, *out_channels, channels);
                    channels = *out_channels;
                    LayerState::Gconv1x1 { weights: w, bias: b }
                }
                LayerSpec::ResidualBlock => LayerState::ResidualBlock {
                    kernel1: init_kernel(&mut rng, channels, channels),
                    bn1: BatchNorm::new(channels),
                    kernel2: init_kernel(&mut rng, channels, channels),
                    bn2: BatchNorm::new(channels),
                },
                LayerSpec::Batchnorm => LayerState::Batchnorm(BatchNorm::new(channels)),
                LayerSpec::GlobalPoolDense { classes } => {
                    let (w, b) = init_affine(&mut rng, *classes, channels);
                    channels = *classes;
                    LayerState::GlobalPoolDense { weights: w, bias: b }
                }
                _ => LayerState::Stateless,
            };
            layers.push(state);
        }
        Ok(Network { desc, layers })
    }

    /// Enumerates every trainable parameter slice in declaration order.
    pub fn visit_params<'a>(&'a mut self) -> Vec<&'a mut [f64]> {
        let mut out: Vec<&'a mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                LayerState::GconvRaw { kernel } | LayerState::Gconv { kernel } => {
                    out.push(&mut kernel.weights)
                }
                LayerState::Gconv1x1 { weights, bias }
                | LayerState::GlobalPoolDense { weights, bias } => {
                    out.push(&mut weights.values);
                    out.push(bias);
                }
                LayerState::ResidualBlock {
                    kernel1,
                    bn1,
                    kernel2,
                    bn2,
                } => {
                    out.push(&mut kernel1.weights);
                    out.push(&mut bn1.scale);
                    out.push(&mut bn1.shift);
                    out.push(&mut kernel2.weights);
                    out.push(&mut bn2.scale);
                    out.push(&mut bn2.shift);
                }
                LayerState::Batchnorm(bn) => {
                    out.push(&mut bn.scale);
                    out.push(&mut bn.shift);
                }
                LayerState::Stateless => {}
            }
        }
        out
    }

    /// Gradient slices in the same order as `visit_params`.
    pub fn grad_slices(grads: &[LayerGrad]) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for g in grads {
            match g {
                LayerGrad::Kernel(k) => out.push(&k.weights),
                LayerGrad::Affine { weights, bias } => {
                    out.push(&weights.values);
                    out.push(bias);
                }
                LayerGrad::ResidualBlock {
                    kernel1,
                    bn1,
                    kernel2,
                    bn2,
                } => {
                    out.push(&kernel1.weights);
                    out.push(&bn1.0);
                    out.push(&bn1.1);
                    out.push(&kernel2.weights);
                    out.push(&bn2.0);
                    out.push(&bn2.1);
                }
                LayerGrad::Batchnorm { scale, shift } => {
                    out.push(scale);
                    out.push(shift);
                }
                LayerGrad::None => {}
            }
        }
        out
    }

    pub fn forward(
        &self,
        ctx: &MeshContext,
        train: bool,
    ) -> Result<(Output, Tape), NetworkError> {
        let mut value: Option<Value> = None;
        let mut entries = Vec::with_capacity(self.layers.len());
        for (i, (spec, state)) in self.desc.layers.iter().zip(&self.layers).enumerate() {
            let bad = |reason: String| NetworkError::BadLayer {
                index: i,
                name: spec.name(),
                reason,
            };
            let (next, entry) = match (spec, state, value) {
                (LayerSpec::GconvRaw { .. }, LayerState::GconvRaw { kernel }, None) => {
                    let out = convops::gconv_raw(&ctx.patches[0], kernel)?;
                    (Value::Grouped(out, 0), TapeEntry::GconvRaw)
                }
                (LayerSpec::Gconv { .. }, LayerState::Gconv { kernel }, Some(Value::Grouped(g, lv))) => {
                    let out = convops::gconv(&ctx.patches[lv], &g, kernel)?;
                    (Value::Grouped(out, lv), TapeEntry::Gconv { input: g })
                }
                (
                    LayerSpec::Gconv1x1 { .. },
                    LayerState::Gconv1x1 { weights, bias },
                    Some(Value::Grouped(g, lv)),
                ) => {
                    let out = convops::gconv1x1(&g, weights, bias)?;
                    (Value::Grouped(out, lv), TapeEntry::Gconv1x1 { input: g })
                }
                (
                    LayerSpec::ResidualBlock,
                    LayerState::ResidualBlock {
                        kernel1,
                        bn1,
                        kernel2,
                        bn2,
                    },
                    Some(Value::Grouped(g, lv)),
                ) => {
                    let patches = &ctx.patches[lv];
                    let h1 = convops::gconv(patches, &g, kernel1)?;
                    if train {
                        let (b1, ctx1) = bn1.forward_train(&h1)?;
                        let r1 = convops::relu(&b1);
                        let h2 = convops::gconv(patches, &r1, kernel2)?;
                        let (b2, ctx2) = bn2.forward_train(&h2)?;
                        let mut sum = b2;
                        for (s, x) in sum.values.iter_mut().zip(&g.values) {
                            *s += x;
                        }
                        let out = convops::relu(&sum);
                        (
                            Value::Grouped(out, lv),
                            TapeEntry::ResidualBlock {
                                input: g,
                                h1,
                                ctx1,
                                bn1_out: r1,
                                h2,
                                ctx2,
                                sum,
                            },
                        )
                    } else {
                        let b1 = bn1.forward_eval(&h1)?;
                        let r1 = convops::relu(&b1);
                        let h2 = convops::gconv(patches, &r1, kernel2)?;
                        let b2 = bn2.forward_eval(&h2)?;
                        let mut sum = b2;
                        for (s, x) in sum.values.iter_mut().zip(&g.values) {
                            *s += x;
                        }
                        let out = convops::relu(&sum);
                        (Value::Grouped(out, lv), TapeEntry::BatchnormEval)
                    }
                }
                (LayerSpec::Batchnorm, LayerState::Batchnorm(bn), Some(Value::Grouped(g, lv))) => {
                    if train {
                        let (out, bctx) = bn.forward_train(&g)?;
                        (Value::Grouped(out, lv), TapeEntry::Batchnorm { ctx: bctx })
                    } else {
                        let out = bn.forward_eval(&g)?;
                        (Value::Grouped(out, lv), TapeEntry::BatchnormEval)
                    }
                }
                (LayerSpec::Relu, _, Some(Value::Grouped(g, lv))) => {
                    let out = convops::relu(&g);
                    (Value::Grouped(out, lv), TapeEntry::Relu { input: g })
                }
                (LayerSpec::Duplicate, _, Some(Value::Dense(f, lv))) => {
                    let out = convops::duplicate(&f, self.desc.n);
                    (Value::Grouped(out, lv), TapeEntry::Duplicate)
                }
                (LayerSpec::Reduce { mode }, _, Some(Value::Grouped(g, lv))) => {
                    let (out, argmax) = convops::reduce(&g, *mode);
                    (
                        Value::Dense(out, lv),
                        TapeEntry::Reduce {
                            groups: g.groups,
                            mode: *mode,
                            argmax,
                        },
                    )
                }
                (LayerSpec::Pool { mode }, _, Some(Value::Grouped(g, lv))) => {
                    let map = &ctx.pools[lv];
                    let (out, arg) = convops::pool(&g, map, *mode)?;
                    (
                        Value::Grouped(out, lv + 1),
                        TapeEntry::Pool {
                            level: lv,
                            mode: *mode,
                            arg,
                            fine_vertices: g.vertices,
                            channels: g.channels,
                        },
                    )
                }
                (LayerSpec::Unpool, _, Some(Value::Grouped(g, lv))) => {
                    let map = &ctx.pools[lv - 1];
                    let out = convops::unpool(&g, map)?;
                    (Value::Grouped(out, lv - 1), TapeEntry::Unpool { level: lv - 1 })
                }
                (
                    LayerSpec::GlobalPoolDense { .. },
                    LayerState::GlobalPoolDense { weights, bias },
                    Some(Value::Dense(f, _)),
                ) => {
                    let scores = convops::global_pool_dense(&f, weights, bias)?;
                    (Value::Scores(scores), TapeEntry::GlobalPoolDense { input: f })
                }
                (_, _, v) => {
                    let what = match v {
                        None => "nothing",
                        Some(Value::Grouped(..)) => "a grouped map",
                        Some(Value::Dense(..)) => "a dense map",
                        Some(Value::Scores(..)) => "class scores",
                    };
                    return Err(bad(format!("cannot consume {}", what)));
                }
            };
            value = Some(next);
            entries.push(entry);
        }
        let out = match value.ok_or(NetworkError::NoOutput)? {
            Value::Scores(s) => Output::Scores(s),
            Value::Dense(f, _) => Output::Dense(f),
            Value::Grouped(g, _) => Output::Grouped(g),
        };
        Ok((out, Tape { entries }))
    }

    /// Reverse pass over a training tape. Returns per-layer parameter
    /// gradients in declaration order. Batchnorm running statistics are
    /// committed here.
    pub fn backward(
        &mut self,
        ctx: &MeshContext,
        tape: &Tape,
        out_grad: OutputGrad,
    ) -> Result<Vec<LayerGrad>, NetworkError> {
        enum Flow {
            Grouped(GroupedFeatureMap),
            Dense(FeatureMap),
            Scores(Vec<f64>),
        }
        let mut flow = match out_grad {
            OutputGrad::Scores(s) => Flow::Scores(s),
            OutputGrad::Dense(f) => Flow::Dense(f),
            OutputGrad::Grouped(g) => Flow::Grouped(g),
        };
        let mut grads = vec![LayerGrad::None; self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let entry = &tape.entries[i];
            let (new_flow, grad) = match (&mut self.layers[i], entry, flow) {
                (LayerState::GconvRaw { kernel }, TapeEntry::GconvRaw, Flow::Grouped(g)) => {
                    let kg = convops::gconv_raw_backward(&ctx.patches[0], kernel, &g);
                    // Nothing flows past the input layer.
                    (Flow::Scores(Vec::new()), LayerGrad::Kernel(kg))
                }
                (LayerState::Gconv { kernel }, TapeEntry::Gconv { input }, Flow::Grouped(g)) => {
                    let lv = level_of(input.vertices, ctx);
                    let (ig, kg) = convops::gconv_backward(&ctx.patches[lv], input, kernel, &g)?;
                    (Flow::Grouped(ig), LayerGrad::Kernel(kg))
                }
                (
                    LayerState::Gconv1x1 { weights, .. },
                    TapeEntry::Gconv1x1 { input },
                    Flow::Grouped(g),
                ) => {
                    let (ig, wg, bg) = convops::gconv1x1_backward(input, weights, &g);
                    (
                        Flow::Grouped(ig),
                        LayerGrad::Affine {
                            weights: wg,
                            bias: bg,
                        },
                    )
                }
                (
                    LayerState::ResidualBlock {
                        kernel1,
                        bn1,
                        kernel2,
                        bn2,
                    },
                    TapeEntry::ResidualBlock {
                        input,
                        h1,
                        ctx1,
                        bn1_out,
                        h2,
                        ctx2,
                        sum,
                    },
                    Flow::Grouped(g),
                ) => {
                    let lv = level_of(input.vertices, ctx);
                    let patches = &ctx.patches[lv];
                    let g_sum = convops::relu_backward(sum, &g);
                    let (g_h2, s2, sh2) = bn2.backward(ctx2, &g_sum);
                    let (g_r1, kg2) = convops::gconv_backward(patches, bn1_out, kernel2, &g_h2)?;
                    let g_b1 = {
                        // ReLU between bn1 and conv2: bn1_out already holds
                        // the rectified value.
                        let mut m = g_r1;
                        for (gv, &x) in m.values.iter_mut().zip(&bn1_out.values) {
                            if x <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                        m
                    };
                    let (g_h1, s1, sh1) = bn1.backward(ctx1, &g_b1);
                    let _ = h1;
                    let _ = h2;
                    let (mut g_in, kg1) = convops::gconv_backward(patches, input, kernel1, &g_h1)?;
                    // Skip connection adds the post-sum gradient directly.
                    for (a, b) in g_in.values.iter_mut().zip(&g_sum.values) {
                        *a += b;
                    }
                    (
                        Flow::Grouped(g_in),
                        LayerGrad::ResidualBlock {
                            kernel1: kg1,
                            bn1: (s1, sh1),
                            kernel2: kg2,
                            bn2: (s2, sh2),
                        },
                    )
                }
                (LayerState::Batchnorm(bn), TapeEntry::Batchnorm { ctx: bctx }, Flow::Grouped(g)) => {
                    let (ig, sg, shg) = bn.backward(bctx, &g);
                    (
                        Flow::Grouped(ig),
                        LayerGrad::Batchnorm {
                            scale: sg,
                            shift: shg,
                        },
                    )
                }
                (_, TapeEntry::Relu { input }, Flow::Grouped(g)) => {
                    (Flow::Grouped(convops::relu_backward(input, &g)), LayerGrad::None)
                }
                (_, TapeEntry::Duplicate, Flow::Grouped(g)) => {
                    (Flow::Dense(convops::duplicate_backward(&g)), LayerGrad::None)
                }
                (_, TapeEntry::Reduce { groups, mode, argmax }, Flow::Dense(f)) => (
                    Flow::Grouped(convops::reduce_backward(*groups, *mode, argmax, &f)),
                    LayerGrad::None,
                ),
                (
                    _,
                    TapeEntry::Pool {
                        level,
                        mode,
                        arg,
                        fine_vertices,
                        channels,
                    },
                    Flow::Grouped(g),
                ) => (
                    Flow::Grouped(convops::pool_backward(
                        *fine_vertices,
                        *channels,
                        &ctx.pools[*level],
                        *mode,
                        arg,
                        &g,
                    )),
                    LayerGrad::None,
                ),
                (_, TapeEntry::Unpool { level }, Flow::Grouped(g)) => (
                    Flow::Grouped(convops::unpool_backward(&ctx.pools[*level], &g)),
                    LayerGrad::None,
                ),
                (
                    LayerState::GlobalPoolDense { weights, .. },
                    TapeEntry::GlobalPoolDense { input },
                    Flow::Scores(s),
                ) => {
                    let (ig, wg, bg) = convops::global_pool_dense_backward(input, weights, &s);
                    (
                        Flow::Dense(ig),
                        LayerGrad::Affine {
                            weights: wg,
                            bias: bg,
                        },
                    )
                }
                (_, TapeEntry::BatchnormEval, _) => {
                    return Err(NetworkError::BadLayer {
                        index: i,
                        name: self.desc.layers[i].name(),
                        reason: "backward through an eval-mode forward".into(),
                    })
                }
                _ => {
                    return Err(NetworkError::BadLayer {
                        index: i,
                        name: self.desc.layers[i].name(),
                        reason: "gradient kind does not match the tape".into(),
                    })
                }
            };
            grads[i] = grad;
            flow = new_flow;
        }
        Ok(grads)
    }
}

fn level_of(vertices: usize, ctx: &MeshContext) -> usize {
    ctx.patches
        .iter()
        .position(|p| p.vertices == vertices)
        .expect("feature map matches a hierarchy level")
}
