//! Self-check suites: gradient checks, topology invariants, symmetry
//! properties, and the flat-grid oracle, each reporting measured values
//! against pinned tolerances. The CLI `verify` command and the acceptance
//! tests both run these.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cache::{hash_bytes, preprocess_mesh, PreprocessCache};
use crate::convops::{
    build_patches, gconv, monomial_row, GroupedFeatureMap, PolyKernel, ReduceMode,
};
use crate::frames::{
    extract_frames, match_frames, matching_residual, singularity_indices, solve_rosy, FrameAtlas,
    RosyOptions,
};
use crate::mesh::TriMesh;
use crate::network::{LayerSpec, MeshContext, Network, NetworkDescription, Output, OutputGrad};
use crate::synth;
use crate::training::{
    cross_entropy, cross_entropy_vertices, regression_loss, train, Adam, Sample, Target,
    TrainConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("unknown suite '{0}' (expected one of {})", SUITE_NAMES.join(", "))]
    UnknownSuite(String),
    #[error("suite setup failed: {0}")]
    Setup(String),
}

pub const SUITE_NAMES: [&str; 5] = [
    "gradcheck",
    "poincare-hopf",
    "section-permutation",
    "rigid-invariance",
    "flat-grid",
];

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub suite: &'static str,
    pub check: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteResult {
    fn new(suite: &'static str, check: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        let passed = measured.is_finite() && measured <= tolerance;
        SuiteResult {
            suite,
            check: check.into(),
            measured,
            tolerance,
            passed,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} suite={} check={} measured={:.3e} tolerance={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.check,
            self.measured,
            self.tolerance
        )
    }
}

pub fn run_suite(name: &str) -> Result<Vec<SuiteResult>, VerifyError> {
    match name {
        "gradcheck" => gradcheck(0),
        "poincare-hopf" => poincare_hopf(),
        "section-permutation" => section_permutation(0),
        "rigid-invariance" => rigid_invariance(0),
        "flat-grid" => flat_grid(),
        other => Err(VerifyError::UnknownSuite(other.into())),
    }
}

pub fn run_all() -> Result<Vec<SuiteResult>, VerifyError> {
    let mut out = Vec::new();
    for name in SUITE_NAMES {
        out.extend(run_suite(name)?);
    }
    Ok(out)
}

fn setup_err(e: impl std::fmt::Display) -> VerifyError {
    VerifyError::Setup(e.to_string())
}

fn context(mesh: TriMesh, targets: &[usize], opts: &RosyOptions) -> Result<PreprocessCache, VerifyError> {
    preprocess_mesh(mesh, targets, opts, hash_bytes(b"verify")).map_err(setup_err)
}

// ------------------------------------------------------------- gradcheck

/// Loss used by the gradient checks: what the probe network's output kind
/// demands.
enum ProbeTarget {
    Class(usize),
    VertexLabels(Vec<i64>),
    Rest,
}

fn probe_loss(
    net: &Network,
    ctx: &MeshContext,
    target: &ProbeTarget,
) -> Result<(f64, OutputGrad), VerifyError> {
    let (out, _) = net.forward(ctx, true).map_err(setup_err)?;
    match (target, out) {
        (ProbeTarget::Class(label), Output::Scores(scores)) => {
            let (loss, grad) = cross_entropy(&scores, *label).map_err(setup_err)?;
            Ok((loss, OutputGrad::Scores(grad)))
        }
        (ProbeTarget::VertexLabels(labels), Output::Dense(scores)) => {
            let (loss, grad) = cross_entropy_vertices(&scores, labels).map_err(setup_err)?;
            Ok((loss, OutputGrad::Dense(grad)))
        }
        (ProbeTarget::Rest, Output::Dense(pred)) => {
            let neighbors = crate::training::finest_neighbors(ctx);
            let v = pred.vertices;
            let positions: Vec<[f64; 3]> = (0..v)
                .map(|i| {
                    let t = i as f64 / v as f64;
                    [t.sin(), (2.0 * t).cos(), t]
                })
                .collect();
            let normals: Vec<[f64; 3]> = (0..v).map(|i| {
                let t = 1.0 + i as f64;
                let n = [1.0, t.sin(), t.cos()];
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                [n[0] / len, n[1] / len, n[2] / len]
            }).collect();
            let (loss, grad) =
                regression_loss(&pred, &positions, &normals, &neighbors).map_err(setup_err)?;
            Ok((loss, OutputGrad::Dense(grad)))
        }
        _ => Err(VerifyError::Setup("probe target does not match output".into())),
    }
}

/// Max relative error between analytic and central-difference gradients
/// over every parameter of `net`, with an absolute noise floor of 1e-8.
fn network_fd_error(
    net: &Network,
    ctx: &MeshContext,
    target: &ProbeTarget,
) -> Result<f64, VerifyError> {
    let mut work = net.clone();
    let (_, tape) = work.forward(ctx, true).map_err(setup_err)?;
    let (_, out_grad) = probe_loss(&work, ctx, target)?;
    let grads = work.backward(ctx, &tape, out_grad).map_err(setup_err)?;
    let grad_flat: Vec<f64> = Network::grad_slices(&grads)
        .iter()
        .flat_map(|s| s.to_vec())
        .collect();

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let mut flat_idx = 0usize;
    let n_slices = {
        let mut n = net.clone();
        n.visit_params().len()
    };
    let mut fd_net = net.clone();
    for si in 0..n_slices {
        let len = fd_net.visit_params()[si].len();
        for j in 0..len {
            let orig = fd_net.visit_params()[si][j];
            fd_net.visit_params()[si][j] = orig + h;
            let (up, _) = probe_loss(&fd_net, ctx, target)?;
            fd_net.visit_params()[si][j] = orig - h;
            let (dn, _) = probe_loss(&fd_net, ctx, target)?;
            fd_net.visit_params()[si][j] = orig;
            let fd = (up - dn) / (2.0 * h);
            let a = grad_flat[flat_idx];
            flat_idx += 1;
            if (fd - a).abs() < 1e-8 {
                continue;
            }
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    if flat_idx != grad_flat.len() {
        return Err(VerifyError::Setup("gradient length mismatch".into()));
    }
    Ok(max_rel)
}

pub fn gradcheck(seed: u64) -> Result<Vec<SuiteResult>, VerifyError> {
    let opts = RosyOptions::default();
    let two_level = context(synth::icosphere(1, 1.0), &[16], &opts)?;
    let ctx2 = two_level.context();
    let three_level = context(synth::icosphere(1, 1.0), &[16, 7], &opts)?;
    let ctx3 = three_level.context();

    let labels2: Vec<i64> = (0..ctx2.patches[0].vertices).map(|v| (v % 2) as i64).collect();
    let labels3: Vec<i64> = (0..ctx2.patches[0].vertices).map(|v| (v % 3) as i64).collect();
    let max = ReduceMode::Max;
    let avg = ReduceMode::Average;
    let probes: Vec<(&str, Vec<LayerSpec>, ProbeTarget, &MeshContext, f64)> = vec![
        (
            "gconv_raw",
            vec![LayerSpec::GconvRaw { out_channels: 2 }, LayerSpec::Reduce { mode: max }],
            ProbeTarget::VertexLabels(labels2.clone()),
            &ctx2,
            1e-4,
        ),
        (
            "gconv",
            vec![
                LayerSpec::GconvRaw { out_channels: 3 },
                LayerSpec::Relu,
                LayerSpec::Gconv { out_channels: 2 },
                LayerSpec::Reduce { mode: max },
            ],
            ProbeTarget::VertexLabels(labels2.clone()),
            &ctx2,
            1e-4,
        ),
        (
            "gconv1x1",
            vec![
                LayerSpec::GconvRaw { out_channels: 3 },
                LayerSpec::Gconv1x1 { out_channels: 2 },
                LayerSpec::Reduce { mode: avg },
            ],
            ProbeTarget::VertexLabels(labels2.clone()),
            &ctx2,
            1e-4,
        ),
        (
            "batchnorm",
            vec![
                LayerSpec::GconvRaw { out_channels: 3 },
                LayerSpec::Batchnorm,
                LayerSpec::Relu,
                LayerSpec::Gconv { out_channels: 2 },
                LayerSpec::Reduce { mode: max },
            ],
            ProbeTarget::VertexLabels(labels2.clone()),
            &ctx2,
            1e-4,
        ),
        (
            "residual_block",
            vec![
                LayerSpec::GconvRaw { out_channels: 3 },
                LayerSpec::ResidualBlock,
                LayerSpec::Reduce { mode: max },
            ],
            ProbeTarget::VertexLabels(labels3.clone()),
            &ctx2,
            1e-4,
        ),
        (
            "pool_unpool",
            vec![
                LayerSpec::GconvRaw { out_channels: 3 },
                LayerSpec::Pool { mode: max },
                LayerSpec::Gconv { out_channels: 3 },
                LayerSpec::Unpool,
                LayerSpec::Reduce { mode: max },
            ],
            ProbeTarget::VertexLabels(labels3.clone()),
            &ctx2,
            1e-4,
        ),
        (
            "global_pool_dense",
            vec![
                LayerSpec::GconvRaw { out_channels: 3 },
                LayerSpec::Reduce { mode: max },
                LayerSpec::GlobalPoolDense { classes: 2 },
            ],
            ProbeTarget::Class(1),
            &ctx2,
            1e-4,
        ),
        (
            "regression_loss",
            vec![
                LayerSpec::GconvRaw { out_channels: 4 },
                LayerSpec::Gconv1x1 { out_channels: 6 },
                LayerSpec::Reduce { mode: avg },
            ],
            ProbeTarget::Rest,
            &ctx2,
            1e-4,
        ),
        (
            "end_to_end",
            vec![
                LayerSpec::GconvRaw { out_channels: 3 },
                LayerSpec::Batchnorm,
                LayerSpec::Relu,
                LayerSpec::ResidualBlock,
                LayerSpec::Pool { mode: max },
                LayerSpec::Gconv { out_channels: 4 },
                LayerSpec::Pool { mode: avg },
                LayerSpec::Gconv { out_channels: 4 },
                LayerSpec::Reduce { mode: max },
                LayerSpec::GlobalPoolDense { classes: 3 },
            ],
            ProbeTarget::Class(2),
            &ctx3,
            1e-3,
        ),
    ];

    let mut results = Vec::new();
    for (name, layers, target, ctx, tol) in probes {
        let desc = NetworkDescription { n: 4, layers };
        let net = Network::init(desc, ctx.levels(), seed ^ 0xabcd).map_err(setup_err)?;
        let measured = network_fd_error(&net, ctx, &target)?;
        results.push(SuiteResult::new("gradcheck", name, measured, tol));
    }
    Ok(results)
}

// --------------------------------------------------------- poincare-hopf

pub fn poincare_hopf() -> Result<Vec<SuiteResult>, VerifyError> {
    let cases: Vec<(&str, TriMesh, f64)> = vec![
        ("icosphere", synth::icosphere(2, 1.0), 2.0),
        ("torus", synth::torus(16, 10, 1.0, 0.4), 0.0),
    ];
    let mut results = Vec::new();
    for (name, mut mesh, chi) in cases {
        let topo = mesh.validate().map_err(setup_err)?;
        mesh.compute_vertex_geometry(&topo);
        let basis = mesh.tangent_basis();
        let conn = crate::frames::connection_coefficients(&mesh, &topo, &basis).map_err(setup_err)?;
        let opts = RosyOptions::default();
        let field = solve_rosy(&mesh, &topo, &conn, &basis, &opts).map_err(setup_err)?;
        let mut atlas = extract_frames(&field, &basis);
        match_frames(&mut atlas, &topo, &conn);
        singularity_indices(&mut atlas, &topo, &conn, &mesh.triangles);
        results.push(SuiteResult::new(
            "poincare-hopf",
            format!("{}_index_sum", name),
            (atlas.index_sum() - chi).abs(),
            1e-12,
        ));
        let mut worst = 0.0f64;
        for &(u, v) in &topo.edges {
            worst = worst.max(matching_residual(&atlas, &topo, &conn, u, v).abs());
        }
        results.push(SuiteResult::new(
            "poincare-hopf",
            format!("{}_matched_residual", name),
            worst,
            std::f64::consts::PI / 4.0 + 1e-9,
        ));
    }
    Ok(results)
}

// -------------------------------------------------- section-permutation

/// Small classification network trained for a couple of epochs on one
/// sample, so the parameters are neither symmetric nor fresh-initialized.
fn small_trained_net(cache: &PreprocessCache, seed: u64) -> Result<Network, VerifyError> {
    let desc = NetworkDescription {
        n: cache.n,
        layers: vec![
            LayerSpec::GconvRaw { out_channels: 4 },
            LayerSpec::Batchnorm,
            LayerSpec::Relu,
            LayerSpec::Pool { mode: ReduceMode::Max },
            LayerSpec::Gconv { out_channels: 4 },
            LayerSpec::Reduce { mode: ReduceMode::Max },
            LayerSpec::GlobalPoolDense { classes: 3 },
        ],
    };
    let mut net = Network::init(desc, cache.levels.len(), seed).map_err(setup_err)?;
    let samples = vec![Sample {
        ctx: cache.context(),
        target: Target::Class(1),
    }];
    let mut opt = Adam::new(0.01);
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 0.01,
        seed,
        batch: 1,
        single_precision: false,
    };
    train(&mut net, &mut opt, &samples, &cfg, 0).map_err(setup_err)?;
    Ok(net)
}

/// Context with every level's section labels shifted by `s` branches.
/// Uniform shifts leave edge offsets and cross-level offsets unchanged.
fn shifted_context(cache: &PreprocessCache, s: usize) -> MeshContext {
    let mut ctx = cache.context();
    for (k, level) in cache.levels.iter().enumerate() {
        let topo = level.mesh.validate().expect("cached level mesh is valid");
        let atlas: FrameAtlas = level.atlas.shifted(s);
        ctx.patches[k] = build_patches(&level.mesh, &topo, &level.basis, &atlas);
    }
    ctx
}

pub fn section_permutation(seed: u64) -> Result<Vec<SuiteResult>, VerifyError> {
    let cache = context(synth::icosphere(2, 1.0), &[54], &RosyOptions::default())?;
    let net = small_trained_net(&cache, seed ^ 0x51)?;
    let base_ctx = cache.context();
    let (base_out, _) = net.forward(&base_ctx, true).map_err(setup_err)?;
    let mut results = Vec::new();
    for s in 1..4usize {
        let ctx = shifted_context(&cache, s);
        let (out, _) = net.forward(&ctx, true).map_err(setup_err)?;
        let measured = max_rel_diff(base_out.values(), out.values());
        results.push(SuiteResult::new(
            "section-permutation",
            format!("shift_{}", s),
            measured,
            1e-6,
        ));
    }
    Ok(results)
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a
        .iter()
        .map(|x| x.abs())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

// ------------------------------------------------------ rigid-invariance

pub fn rigid_invariance(seed: u64) -> Result<Vec<SuiteResult>, VerifyError> {
    let opts = RosyOptions::default();
    // A bumpy sphere: the deformation breaks the icosphere's symmetries so
    // decimation costs are well separated and the simplification sequence
    // is stable under rotation.
    let mut base_mesh = synth::icosphere(2, 1.0);
    for p in &mut base_mesh.positions {
        let s = 1.0 + 0.2 * (3.0 * p[0]).sin() * (2.0 * p[1] + 1.0).cos() + 0.1 * (4.0 * p[2]).sin();
        *p = crate::geom::scale(*p, s);
    }
    let targets = [54usize];
    let cache = context(base_mesh.clone(), &targets, &opts)?;
    let net = small_trained_net(&cache, seed ^ 0x917)?;
    let (base_out, _) = net.forward(&cache.context(), true).map_err(setup_err)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5afe);
    let mut results = Vec::new();
    for trial in 0..10 {
        let (rot, t) = synth::random_rigid_motion(&mut rng);
        let moved = synth::apply_rigid(&base_mesh, &rot, t);
        let moved_cache = context(moved, &targets, &opts)?;
        let (out, _) = net
            .forward(&moved_cache.context(), true)
            .map_err(setup_err)?;
        let measured = max_rel_diff(base_out.values(), out.values());
        results.push(SuiteResult::new(
            "rigid-invariance",
            format!("motion_{}", trial),
            measured,
            1e-6,
        ));
    }
    Ok(results)
}

// ------------------------------------------------------------- flat-grid

fn trivial_atlas(n: usize, edges: usize, vertices: usize, faces: usize) -> FrameAtlas {
    FrameAtlas {
        n,
        root_angle: vec![0.0; vertices],
        offsets: vec![0; edges],
        face_index: vec![0; faces],
    }
}

pub fn flat_grid() -> Result<Vec<SuiteResult>, VerifyError> {
    let mut mesh = synth::flat_grid(8, 8, 1.0);
    let topo = mesh.validate().map_err(setup_err)?;
    mesh.compute_vertex_geometry(&topo);
    let basis = mesh.tangent_basis();
    let atlas = trivial_atlas(4, topo.edges.len(), mesh.vertex_count(), mesh.triangles.len());
    let mut p = build_patches(&mesh, &topo, &basis, &atlas);
    // Uniform sampling weights isolate the stencil structure.
    for w in &mut p.weight {
        *w = 1.0;
    }
    for x in 0..p.vertices {
        p.weight_sum[x] = (p.start[x + 1] - p.start[x]) as f64;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut kernel = PolyKernel::zeros(1, 1);
    for w in &mut kernel.weights {
        *w = rng.gen_range(-1.0..1.0);
    }

    // All interior vertices share one dense 7-point stencil whose taps are
    // the kernel polynomial evaluated at the lattice offsets.
    let idx = |i: i64, j: i64| (j * 8 + i) as usize;
    let offsets: [(i64, i64); 7] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1)];
    let r = 2.0f64.sqrt();
    let stencil: Vec<f64> = offsets
        .iter()
        .map(|&(di, dj)| {
            let mono = monomial_row(di as f64 / r, dj as f64 / r);
            kernel
                .coeffs(0, 0)
                .iter()
                .zip(mono.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / 7.0
        })
        .collect();

    let mut input = GroupedFeatureMap::zeros(4, 1, p.vertices);
    for x in &mut input.values {
        *x = rng.gen_range(-1.0..1.0);
    }
    let out = gconv(&p, &input, &kernel).map_err(setup_err)?;
    let mut worst = 0.0f64;
    for j in 2..6i64 {
        for i in 2..6i64 {
            let mut expect = 0.0;
            for (t, &(di, dj)) in offsets.iter().enumerate() {
                expect += stencil[t] * input.get(0, 0, idx(i + di, j + dj));
            }
            worst = worst.max((out.get(0, 0, idx(i, j)) - expect).abs());
        }
    }
    let mut results = vec![SuiteResult::new("flat-grid", "dense_stencil", worst, 1e-10)];

    // Translation equivariance: shift the input one lattice step in x and
    // compare deep-interior outputs.
    let mut shifted = GroupedFeatureMap::zeros(4, 1, p.vertices);
    for g in 0..4 {
        for j in 0..8i64 {
            for i in 1..8i64 {
                let v = input.get(g, 0, idx(i - 1, j));
                shifted.set(g, 0, idx(i, j), v);
            }
        }
    }
    let out_shift = gconv(&p, &shifted, &kernel).map_err(setup_err)?;
    let mut worst = 0.0f64;
    for j in 2..6i64 {
        for i in 3..6i64 {
            let a = out_shift.get(0, 0, idx(i, j));
            let b = out.get(0, 0, idx(i - 1, j));
            worst = worst.max((a - b).abs());
        }
    }
    results.push(SuiteResult::new("flat-grid", "translation", worst, 1e-10));
    Ok(results)
}
