//! The architecture family: FNN, ResNet, gResNet with an affine
//! (modified-DMD) prior, OSG-Net, dual-OSG-Net with gating, and the
//! position-attention Transformer block for nodal PDE learning.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{BoundParams, ParamSet, Tape, Var};
use crate::datasets::{NormStats, PairSet};
use crate::error::{DueError, Result};
use crate::linalg::Cholesky;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(DueError::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Fully connected network: widths n₀..n_{L+1} with the activation applied
/// after each hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FnnSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl FnnSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 3 {
            return Err(DueError::Config(
                "FNN needs at least one hidden layer".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(DueError::Config("layer widths must be positive".into()));
        }
        Ok(FnnSpec { widths, activation })
    }

    /// Uniform hidden layers: input → depth×width → output.
    pub fn uniform(input: usize, depth: usize, width: usize, output: usize, activation: Activation) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat(width).take(depth));
        widths.push(output);
        FnnSpec::new(widths, activation)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// Glorot bound √(6/(fan_in+fan_out)) for layer ℓ.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn init_fnn_into(params: &mut ParamSet, prefix: &str, spec: &FnnSpec, rng: &mut ChaCha20Rng) -> Result<()> {
    for l in 1..=spec.layers() {
        let (fin, fout) = (spec.widths[l - 1], spec.widths[l]);
        let bound = glorot_bound(fin, fout);
        let data: Vec<f64> = (0..fin * fout)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        params.insert(&format!("{prefix}w{l}"), Tensor::new(vec![fin, fout], data)?)?;
        params.insert(&format!("{prefix}b{l}"), Tensor::zeros(vec![1, fout]))?;
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases, deterministic in the seed.
pub fn fnn_init(spec: &FnnSpec, seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    init_fnn_into(&mut params, "", spec, &mut rng)?;
    Ok(params)
}

/// FNN forward on the tape. Weights are stored input×output so the batch
/// flows as x·W, the transpose of the column-vector convention.
pub fn fnn_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    spec: &FnnSpec,
    x: Var,
) -> Result<Var> {
    if tape.value(x).cols() != spec.input_width() {
        return Err(DueError::Dimension(format!(
            "input width {} does not match spec n0={}",
            tape.value(x).cols(),
            spec.input_width()
        )));
    }
    let mut h = x;
    for l in 1..=spec.layers() {
        let w = bound.var(&format!("{prefix}w{l}"));
        let b = bound.var(&format!("{prefix}b{l}"));
        h = tape.matmul(h, w)?;
        h = tape.add_bias(h, b)?;
        if l < spec.layers() {
            h = spec.activation.apply(tape, h);
        }
    }
    Ok(h)
}

/// ResNet: u + N_θ(u).
pub fn resnet_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    spec: &FnnSpec,
    u: Var,
) -> Result<Var> {
    let core = fnn_forward(tape, bound, prefix, spec, u)?;
    tape.add(u, core)
}

/// Best-fit affine prior A·u + b (modified DMD).
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePrior {
    /// n×n
    pub a: Tensor,
    /// length n
    pub b: Vec<f64>,
}

impl AffinePrior {
    pub fn identity(n: usize) -> Self {
        let mut a = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            a.set(i, i, 1.0);
        }
        AffinePrior { a, b: vec![0.0; n] }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Plain (tape-free) application to a batch of row states.
    pub fn apply(&self, u: &Tensor) -> Result<Tensor> {
        let mut out = u.matmul(&self.a.transpose())?;
        let n = self.dim();
        for i in 0..out.rows() {
            for j in 0..n {
                let v = out.at(i, j) + self.b[j];
                out.set(i, j, v);
            }
        }
        Ok(out)
    }

    /// Tape application so gradients can flow through the input.
    pub fn forward(&self, tape: &mut Tape, u: Var) -> Result<Var> {
        let at = tape.constant(self.a.transpose());
        let bias = tape.constant(Tensor::new(vec![1, self.dim()], self.b.clone())?);
        let h = tape.matmul(u, at)?;
        tape.add_bias(h, bias)
    }

    /// Mean squared residual over a pair set.
    pub fn residual(&self, pairs: &PairSet) -> Result<f64> {
        let pred = self.apply(&pairs.inputs)?;
        let mut acc = 0.0;
        for (p, o) in pred.data().iter().zip(pairs.outputs.data()) {
            acc += (p - o) * (p - o);
        }
        Ok(acc / pairs.len() as f64)
    }
}

/// Least-squares affine fit [A b] = Y Xᵀ (X Xᵀ)⁻¹ with augmented inputs,
/// solved by Cholesky on the normal equations; falls back to a ridge solve
/// when the Gram matrix is numerically singular.
pub fn affine_fit(pairs: &PairSet) -> Result<AffinePrior> {
    let n = pairs.inputs.cols();
    let j = pairs.len();
    if j < n + 1 {
        return Err(DueError::InsufficientData(format!(
            "affine fit needs at least {} pairs, got {}",
            n + 1,
            j
        )));
    }
    let dim = n + 1;
    // Gram = X Xᵀ with X the (n+1)×J augmented input matrix.
    let mut gram = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim * n]; // X Yᵀ, column c holds the c-th output component
    for r in 0..j {
        let row = pairs.inputs.row(r);
        let out = pairs.outputs.row(r);
        for p in 0..dim {
            let xp = if p < n { row[p] } else { 1.0 };
            for q in 0..dim {
                let xq = if q < n { row[q] } else { 1.0 };
                gram[p * dim + q] += xp * xq;
            }
            for c in 0..n {
                rhs[p * n + c] += xp * out[c];
            }
        }
    }
    let chol = match Cholesky::factor(&gram, dim) {
        Ok(c) => c,
        Err(_) => {
            let trace: f64 = (0..dim).map(|i| gram[i * dim + i]).sum();
            for i in 0..dim {
                gram[i * dim + i] += 1e-10 * trace;
            }
            Cholesky::factor(&gram, dim).map_err(|_| {
                DueError::Numeric("affine fit Gram matrix singular even after ridge".into())
            })?
        }
    };
    let mut a = Tensor::zeros(vec![n, n]);
    let mut b = vec![0.0; n];
    let mut col = vec![0.0; dim];
    for c in 0..n {
        for p in 0..dim {
            col[p] = rhs[p * n + c];
        }
        chol.solve(&mut col);
        for p in 0..n {
            a.set(c, p, col[p]);
        }
        b[c] = col[n];
    }
    Ok(AffinePrior { a, b })
}

/// Memory-based ResNet step: w_next = w_k + N(w_{k−M},…,w_k). `history`
/// holds the M+1 states oldest first, each batch×m; the core net input width
/// must be (M+1)·m.
pub fn memory_resnet_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    spec: &FnnSpec,
    history: &[Var],
) -> Result<Var> {
    let last = *history
        .last()
        .ok_or_else(|| DueError::Contract("empty memory history".into()))?;
    let mut x = history[0];
    for &h in &history[1..] {
        x = tape.concat_cols(x, h)?;
    }
    let core = fnn_forward(tape, bound, prefix, spec, x)?;
    tape.add(last, core)
}

/// gResNet: A(u) + N_θ(u).
pub fn gresnet_forward(
    tape: &mut Tape,
    prior: &AffinePrior,
    bound: &BoundParams,
    prefix: &str,
    spec: &FnnSpec,
    u: Var,
) -> Result<Var> {
    let base = prior.forward(tape, u)?;
    let core = fnn_forward(tape, bound, prefix, spec, u)?;
    tape.add(base, core)
}

/// OSG-Net core: spec input width must be state dim + 1 for the Δ channel.
#[derive(Debug, Clone, PartialEq)]
pub struct OsgNet {
    pub core: FnnSpec,
}

impl OsgNet {
    pub fn new(core: FnnSpec) -> Result<Self> {
        if core.input_width() != core.output_width() + 1 {
            return Err(DueError::Config(format!(
                "OSG-Net input width {} must be state dim {} + 1",
                core.input_width(),
                core.output_width()
            )));
        }
        Ok(OsgNet { core })
    }

    pub fn state_dim(&self) -> usize {
        self.core.output_width()
    }
}

/// OSG-Net with distinct scaling lag and network lag feature:
/// u + Δ·N(concat(u, δ)). The plain form uses δ = Δ.
pub fn osgnet_forward_feat(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    net: &OsgNet,
    u: Var,
    delta_scale: Var,
    delta_feat: Var,
) -> Result<Var> {
    if tape.value(delta_scale).data().iter().any(|&d| d < 0.0) {
        return Err(DueError::Domain("negative time step in OSG-Net".into()));
    }
    let x = tape.concat_cols(u, delta_feat)?;
    let core = fnn_forward(tape, bound, prefix, &net.core, x)?;
    let scaled = tape.scale_rows(core, delta_scale)?;
    tape.add(u, scaled)
}

/// u + Δ·N(concat(u, Δ)), identity at Δ = 0 by construction.
pub fn osgnet_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    prefix: &str,
    net: &OsgNet,
    u: Var,
    delta: Var,
) -> Result<Var> {
    osgnet_forward_feat(tape, bound, prefix, net, u, delta, delta)
}

/// Two OSG-Net branches combined by a softmax gate that sees only the time
/// step size (as log₁₀ Δ).
#[derive(Debug, Clone, PartialEq)]
pub struct DualOsgNet {
    pub branch: OsgNet,
    pub gating: FnnSpec,
}

impl DualOsgNet {
    pub fn new(branch: OsgNet, gating: FnnSpec) -> Result<Self> {
        if gating.input_width() != 1 || gating.output_width() != 2 {
            return Err(DueError::Config(
                "gating network must map 1 input to 2 outputs".into(),
            ));
        }
        Ok(DualOsgNet { branch, gating })
    }

    /// Parameters for both branches ("a.", "b.") and the gate ("gate.").
    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_fnn_into(&mut params, "a.", &self.branch.core, &mut rng)?;
        init_fnn_into(&mut params, "b.", &self.branch.core, &mut rng)?;
        init_fnn_into(&mut params, "gate.", &self.gating, &mut rng)?;
        Ok(params)
    }
}

/// Gate weights for a batch of lags: softmax(gating(log₁₀ max(Δ, 1e−30))).
pub fn dual_osgnet_gate(
    tape: &mut Tape,
    bound: &BoundParams,
    net: &DualOsgNet,
    delta: Var,
) -> Result<Var> {
    let logd = Tensor::new(
        vec![tape.value(delta).rows(), 1],
        tape.value(delta)
            .data()
            .iter()
            .map(|d| d.max(1e-30).log10())
            .collect(),
    )?;
    let logd = tape.constant(logd);
    let logits = fnn_forward(tape, bound, "gate.", &net.gating, logd)?;
    tape.softmax_rows(logits)
}

pub fn dual_osgnet_forward_feat(
    tape: &mut Tape,
    bound: &BoundParams,
    net: &DualOsgNet,
    u: Var,
    delta_scale: Var,
    delta_feat: Var,
) -> Result<Var> {
    let weights = dual_osgnet_gate(tape, bound, net, delta_scale)?;
    let wa = tape.col(weights, 0)?;
    let wb = tape.col(weights, 1)?;
    let ya = osgnet_forward_feat(tape, bound, "a.", &net.branch, u, delta_scale, delta_feat)?;
    let yb = osgnet_forward_feat(tape, bound, "b.", &net.branch, u, delta_scale, delta_feat)?;
    let ya = tape.scale_rows(ya, wa)?;
    let yb = tape.scale_rows(yb, wb)?;
    tape.add(ya, yb)
}

pub fn dual_osgnet_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    net: &DualOsgNet,
    u: Var,
    delta: Var,
) -> Result<Var> {
    dual_osgnet_forward_feat(tape, bound, net, u, delta, delta)
}

/// Squared pairwise distances between two coordinate sets: D[i][j] =
/// ‖to_i − from_j‖².
pub fn pairwise_sq_dist(from_mesh: &Tensor, to_mesh: &Tensor) -> Result<Tensor> {
    if from_mesh.cols() != to_mesh.cols() {
        return Err(DueError::Dimension(format!(
            "coordinate widths differ: {} vs {}",
            from_mesh.cols(),
            to_mesh.cols()
        )));
    }
    let (p, q, d) = (from_mesh.rows(), to_mesh.rows(), from_mesh.cols());
    let mut out = Tensor::zeros(vec![q, p]);
    for i in 0..q {
        for j in 0..p {
            let mut s = 0.0;
            for k in 0..d {
                let diff = to_mesh.at(i, k) - from_mesh.at(j, k);
                s += diff * diff;
            }
            out.set(i, j, s);
        }
    }
    Ok(out)
}

/// Row-stochastic position-attention kernel Softmax(−λ·D).
pub fn pit_attention_kernel(lambda: f64, from_mesh: &Tensor, to_mesh: &Tensor) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(DueError::Domain("attention bandwidth must be ≥ 0".into()));
    }
    let d = pairwise_sq_dist(from_mesh, to_mesh)?;
    let (q, p) = (d.rows(), d.cols());
    let mut out = Tensor::zeros(vec![q, p]);
    for i in 0..q {
        let row = d.row(i);
        let mn = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for j in 0..p {
            let e = (-lambda * (row[j] - mn)).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..p {
            out.set(i, j, out.at(i, j) / sum);
        }
    }
    Ok(out)
}

/// Farthest-point coarsening: start at the point nearest the centroid, then
/// greedily add the point maximizing its minimum distance to the selected
/// set. Deterministic; ties resolve to the lowest index.
pub fn latent_mesh_coarsen(mesh: &Tensor, n_ltt: usize) -> Result<Tensor> {
    let (n, d) = (mesh.rows(), mesh.cols());
    if n_ltt == 0 || n_ltt > n {
        return Err(DueError::Domain(format!(
            "latent size {} outside 1..={}",
            n_ltt, n
        )));
    }
    let mut centroid = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            centroid[k] += mesh.at(i, k);
        }
    }
    for c in centroid.iter_mut() {
        *c /= n as f64;
    }
    let dist2 = |i: usize, point: &[f64]| -> f64 {
        (0..d).map(|k| (mesh.at(i, k) - point[k]).powi(2)).sum()
    };
    let mut start = 0;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let di = dist2(i, &centroid);
        if di < best {
            best = di;
            start = i;
        }
    }
    let mut selected = vec![start];
    let mut min_d: Vec<f64> = (0..n).map(|i| dist2(i, mesh.row(start))).collect();
    while selected.len() < n_ltt {
        let mut pick = 0;
        let mut far = -1.0;
        for (i, &md) in min_d.iter().enumerate() {
            if md > far {
                far = md;
                pick = i;
            }
        }
        selected.push(pick);
        for i in 0..n {
            min_d[i] = min_d[i].min(dist2(i, mesh.row(pick)));
        }
    }
    let mut out = Tensor::zeros(vec![n_ltt, d]);
    for (r, &i) in selected.iter().enumerate() {
        for k in 0..d {
            out.set(r, k, mesh.at(i, k));
        }
    }
    Ok(out)
}

/// Position-induced Transformer block: L attention layers mapping
/// mesh → latent → … → latent → mesh, then a weight-only output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PitSpec {
    pub mesh: Tensor,
    pub latent_mesh: Tensor,
    pub depth: usize,
    pub width: usize,
    pub state_components: usize,
    pub activation: Activation,
}

impl PitSpec {
    pub fn new(
        mesh: Tensor,
        latent_mesh: Tensor,
        depth: usize,
        width: usize,
        state_components: usize,
        activation: Activation,
    ) -> Result<Self> {
        if mesh.cols() != latent_mesh.cols() {
            return Err(DueError::Dimension(
                "mesh and latent mesh coordinate widths differ".into(),
            ));
        }
        if depth < 1 {
            return Err(DueError::Config("PiT depth must be at least 1".into()));
        }
        Ok(PitSpec {
            mesh,
            latent_mesh,
            depth,
            width,
            state_components,
            activation,
        })
    }

    pub fn coord_dim(&self) -> usize {
        self.mesh.cols()
    }

    /// Per-layer weight shape: d₀ = d_u + d, interior layers `width`, output
    /// layer d_u.
    fn layer_widths(&self) -> Vec<usize> {
        let mut w = vec![self.state_components + self.coord_dim()];
        w.extend(std::iter::repeat(self.width).take(self.depth));
        w.push(self.state_components);
        w
    }

    /// Mean nearest-neighbor distance of the latent mesh, setting the initial
    /// attention bandwidth λ = 1/h².
    pub fn latent_spacing(&self) -> f64 {
        let n = self.latent_mesh.rows();
        if n < 2 {
            return 1.0;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let mut nearest = f64::INFINITY;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let d: f64 = (0..self.coord_dim())
                    .map(|k| (self.latent_mesh.at(i, k) - self.latent_mesh.at(j, k)).powi(2))
                    .sum();
                nearest = nearest.min(d);
            }
            acc += nearest.sqrt();
        }
        acc / n as f64
    }
}

fn inv_softplus(y: f64) -> f64 {
    if y > 20.0 {
        y
    } else {
        (y.exp() - 1.0).max(1e-300).ln()
    }
}

/// Weights Glorot-initialized, bandwidths initialized to 1/h² of the latent
/// mesh via the softplus reparameterization.
pub fn pit_init(spec: &PitSpec, seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let widths = spec.layer_widths();
    for l in 1..=spec.depth + 1 {
        let (fin, fout) = (widths[l - 1], widths[l]);
        let bound = glorot_bound(fin, fout);
        let data: Vec<f64> = (0..fin * fout)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        params.insert(&format!("w{l}"), Tensor::new(vec![fin, fout], data)?)?;
    }
    let h = spec.latent_spacing();
    let lambda0 = 1.0 / (h * h);
    for l in 1..=spec.depth {
        params.insert(&format!("rho{l}"), Tensor::scalar(inv_softplus(lambda0)))?;
    }
    Ok(params)
}

/// Attention matrices for every layer given an input/output mesh, as tape
/// nodes (so λ gradients flow). Computed once per batch.
fn pit_attention_vars(
    tape: &mut Tape,
    bound: &BoundParams,
    spec: &PitSpec,
    io_mesh: &Tensor,
) -> Result<Vec<Var>> {
    let mut vars = Vec::with_capacity(spec.depth);
    for l in 1..=spec.depth {
        let from = if l == 1 { io_mesh } else { &spec.latent_mesh };
        let to = if l == spec.depth {
            io_mesh
        } else {
            &spec.latent_mesh
        };
        let neg_d = {
            let mut d = pairwise_sq_dist(from, to)?;
            for v in d.data_mut() {
                *v = -*v;
            }
            d
        };
        let neg_d = tape.constant(neg_d);
        let rho = bound.var(&format!("rho{l}"));
        let lambda = tape.softplus(rho);
        let scaled = tape.scale_by_scalar(neg_d, lambda)?;
        vars.push(tape.softmax_rows(scaled)?);
    }
    Ok(vars)
}

/// Forward a batch of fields (each n×d_u) through the PiT block on an
/// arbitrary input/output mesh. Attention kernels are shared across the
/// batch.
pub fn pit_forward_batch_on_mesh(
    tape: &mut Tape,
    bound: &BoundParams,
    spec: &PitSpec,
    io_mesh: &Tensor,
    fields: &[Var],
) -> Result<Vec<Var>> {
    let attn = pit_attention_vars(tape, bound, spec, io_mesh)?;
    let mesh_const = tape.constant(io_mesh.clone());
    let mut out = Vec::with_capacity(fields.len());
    for &u in fields {
        if tape.value(u).rows() != io_mesh.rows() {
            return Err(DueError::Dimension(format!(
                "field has {} rows but mesh has {}",
                tape.value(u).rows(),
                io_mesh.rows()
            )));
        }
        let mut h = tape.concat_cols(u, mesh_const)?;
        for l in 1..=spec.depth {
            let w = bound.var(&format!("w{l}"));
            h = tape.matmul(attn[l - 1], h)?;
            h = tape.matmul(h, w)?;
            h = spec.activation.apply(tape, h);
        }
        let w_out = bound.var(&format!("w{}", spec.depth + 1));
        out.push(tape.matmul(h, w_out)?);
    }
    Ok(out)
}

pub fn pit_forward(tape: &mut Tape, bound: &BoundParams, spec: &PitSpec, u: Var) -> Result<Var> {
    let mesh = spec.mesh.clone();
    Ok(pit_forward_batch_on_mesh(tape, bound, spec, &mesh, &[u])?[0])
}

/// PiT used as the core of a ResNet step: U + PiT(U).
pub fn pit_resnet_forward_on_mesh(
    tape: &mut Tape,
    bound: &BoundParams,
    spec: &PitSpec,
    io_mesh: &Tensor,
    fields: &[Var],
) -> Result<Vec<Var>> {
    let cores = pit_forward_batch_on_mesh(tape, bound, spec, io_mesh, fields)?;
    fields
        .iter()
        .zip(cores)
        .map(|(&u, c)| tape.add(u, c))
        .collect()
}

/// How a trained model steps in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ResNet,
    GResNet,
    OsgNet,
    DualOsgNet,
    PitResNet,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::ResNet => "resnet",
            ModelKind::GResNet => "gresnet",
            ModelKind::OsgNet => "osgnet",
            ModelKind::DualOsgNet => "dual_osgnet",
            ModelKind::PitResNet => "pit_resnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(ModelKind::ResNet),
            "gresnet" => Ok(ModelKind::GResNet),
            "osgnet" => Ok(ModelKind::OsgNet),
            "dual_osgnet" => Ok(ModelKind::DualOsgNet),
            "pit_resnet" => Ok(ModelKind::PitResNet),
            other => Err(DueError::Config(format!("unknown model kind {other:?}"))),
        }
    }

    pub fn varied_lag(&self) -> bool {
        matches!(self, ModelKind::OsgNet | ModelKind::DualOsgNet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LagInfo {
    Fixed(f64),
    Range(f64, f64),
}

/// A trained flow-map model: parameters, kind, normalization, lag metadata —
/// the persisted unit of prediction.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub kind: ModelKind,
    /// Core FNN spec (branch spec for dual-OSG-Net); absent for PiT models.
    pub spec: Option<FnnSpec>,
    pub gate_spec: Option<FnnSpec>,
    pub pit: Option<PitSpec>,
    pub params: ParamSet,
    pub prior: Option<AffinePrior>,
    pub norm: NormStats,
    pub memory: usize,
    pub lag: LagInfo,
    pub seed: u64,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        if (self.kind == ModelKind::GResNet) != self.prior.is_some() {
            return Err(DueError::Contract(
                "affine prior present iff kind is gresnet".into(),
            ));
        }
        if self.kind.varied_lag() != matches!(self.lag, LagInfo::Range(_, _)) {
            return Err(DueError::Contract(
                "lag range present iff kind is osgnet/dual_osgnet".into(),
            ));
        }
        if (self.kind == ModelKind::PitResNet) != self.pit.is_some() {
            return Err(DueError::Contract("pit spec present iff kind is pit".into()));
        }
        Ok(())
    }

    /// Observed state width (per node for PiT models).
    pub fn state_width(&self) -> usize {
        match self.kind {
            ModelKind::ResNet => {
                self.spec.as_ref().map_or(0, |s| s.output_width())
            }
            ModelKind::GResNet => self.prior.as_ref().map_or(0, |p| p.dim()),
            ModelKind::OsgNet | ModelKind::DualOsgNet => {
                self.spec.as_ref().map_or(0, |s| s.output_width())
            }
            ModelKind::PitResNet => self
                .pit
                .as_ref()
                .map_or(0, |p| p.mesh.rows() * p.state_components),
        }
    }
}

// ---- persistence (DUE-MODEL v1) ----

fn fmt17(v: f64) -> String {
    format!("{:.16e}", v)
}

fn widths_str(spec: &FnnSpec) -> String {
    spec.widths
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| DueError::Config(format!("bad width {t:?}")))
        })
        .collect()
}

fn push_param_block(out: &mut String, name: &str, t: &Tensor) {
    out.push_str(&format!("@param {} {}", name, t.shape().len()));
    for d in t.shape() {
        out.push_str(&format!(" {}", d));
    }
    out.push('\n');
    for (i, v) in t.data().iter().enumerate() {
        if i > 0 {
            out.push(if i % 8 == 0 { '\n' } else { ' ' });
        }
        out.push_str(&fmt17(*v));
    }
    out.push('\n');
}

pub fn save_model(bundle: &ModelBundle) -> Result<String> {
    bundle.validate()?;
    let mut out = String::from("DUE-MODEL v1\n");
    out.push_str(&format!("kind = {}\n", bundle.kind.name()));
    if let Some(spec) = &bundle.spec {
        out.push_str(&format!("widths = {}\n", widths_str(spec)));
        out.push_str(&format!("activation = {}\n", spec.activation.name()));
    }
    if let Some(gate) = &bundle.gate_spec {
        out.push_str(&format!("gate_widths = {}\n", widths_str(gate)));
    }
    if let Some(pit) = &bundle.pit {
        out.push_str(&format!("pit_depth = {}\n", pit.depth));
        out.push_str(&format!("pit_width = {}\n", pit.width));
        out.push_str(&format!("pit_components = {}\n", pit.state_components));
        out.push_str(&format!("activation = {}\n", pit.activation.name()));
    }
    out.push_str(&format!("memory = {}\n", bundle.memory));
    match bundle.lag {
        LagInfo::Fixed(d) => out.push_str(&format!("lag = {}\n", fmt17(d))),
        LagInfo::Range(lo, hi) => {
            out.push_str(&format!("lag_min = {}\n", fmt17(lo)));
            out.push_str(&format!("lag_max = {}\n", fmt17(hi)));
        }
    }
    out.push_str(&format!("norm_field = {}\n", bundle.norm.field));
    out.push_str(&format!(
        "norm_mean = {}\n",
        bundle.norm.mean.iter().map(|v| fmt17(*v)).collect::<Vec<_>>().join(",")
    ));
    out.push_str(&format!(
        "norm_std = {}\n",
        bundle.norm.std.iter().map(|v| fmt17(*v)).collect::<Vec<_>>().join(",")
    ));
    if let Some((m, s)) = bundle.norm.lag {
        out.push_str(&format!("norm_lag = {},{}\n", fmt17(m), fmt17(s)));
    }
    out.push_str(&format!("seed = {}\n", bundle.seed));
    for (name, value, _) in bundle.params.iter() {
        push_param_block(&mut out, name, value);
    }
    if let Some(prior) = &bundle.prior {
        push_param_block(&mut out, "prior.A", &prior.a);
        push_param_block(
            &mut out,
            "prior.b",
            &Tensor::new(vec![prior.b.len()], prior.b.clone())?,
        );
    }
    if let Some(pit) = &bundle.pit {
        push_param_block(&mut out, "pit.mesh", &pit.mesh);
        push_param_block(&mut out, "pit.latent_mesh", &pit.latent_mesh);
    }
    Ok(out)
}

pub fn load_model(text: &str) -> Result<ModelBundle> {
    let mut lines = text.lines().peekable();
    match lines.next() {
        Some("DUE-MODEL v1") => {}
        other => {
            return Err(DueError::Config(format!(
                "not a DUE-MODEL v1 file (first line {:?})",
                other
            )))
        }
    }
    let mut meta: std::collections::HashMap<String, String> = Default::default();
    while let Some(&line) = lines.peek() {
        if line.starts_with("@param") {
            break;
        }
        lines.next();
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DueError::Config(format!("bad metadata line {line:?}")))?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    // parameter blocks
    let mut blocks: Vec<(String, Tensor)> = Vec::new();
    while let Some(line) = lines.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("@param") => {}
            other => {
                return Err(DueError::Config(format!(
                    "expected @param block, got {:?}",
                    other
                )))
            }
        }
        let name = toks
            .next()
            .ok_or_else(|| DueError::Config("missing parameter name".into()))?
            .to_string();
        let rank: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| DueError::Config(format!("bad rank in {name}")))?;
        let shape: Vec<usize> = toks
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| DueError::Config(format!("bad dimension in {name}")))
            })
            .collect::<Result<_>>()?;
        if shape.len() != rank {
            return Err(DueError::Config(format!("rank mismatch in {name}")));
        }
        let total: usize = shape.iter().product();
        let mut data = Vec::with_capacity(total);
        while data.len() < total {
            let line = lines
                .next()
                .ok_or_else(|| DueError::Config(format!("truncated data for {name}")))?;
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| {
                    DueError::Config(format!("bad value {:?} in {}", tok, name))
                })?);
            }
        }
        if data.len() != total {
            return Err(DueError::Config(format!("excess data for {name}")));
        }
        blocks.push((name, Tensor::new(shape, data)?));
    }

    let get = |k: &str| -> Result<&String> {
        meta.get(k)
            .ok_or_else(|| DueError::Config(format!("missing key {k}")))
    };
    let kind = ModelKind::parse(get("kind")?)?;
    let activation = Activation::parse(get("activation")?)?;
    let memory: usize = get("memory")?
        .parse()
        .map_err(|_| DueError::Config("bad memory".into()))?;
    let lag = if meta.contains_key("lag") {
        LagInfo::Fixed(
            get("lag")?
                .parse()
                .map_err(|_| DueError::Config("bad lag".into()))?,
        )
    } else {
        LagInfo::Range(
            get("lag_min")?
                .parse()
                .map_err(|_| DueError::Config("bad lag_min".into()))?,
            get("lag_max")?
                .parse()
                .map_err(|_| DueError::Config("bad lag_max".into()))?,
        )
    };
    let parse_csv = |s: &str| -> Result<Vec<f64>> {
        s.split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| DueError::Config(format!("bad float {t:?}")))
            })
            .collect()
    };
    let mut norm = NormStats {
        mean: parse_csv(get("norm_mean")?)?,
        std: parse_csv(get("norm_std")?)?,
        field: get("norm_field")? == "true",
        lag: None,
    };
    if let Some(l) = meta.get("norm_lag") {
        let v = parse_csv(l)?;
        if v.len() != 2 {
            return Err(DueError::Config("norm_lag needs two values".into()));
        }
        norm.lag = Some((v[0], v[1]));
    }
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| DueError::Config("bad seed".into()))?;

    let mut params = ParamSet::new();
    let mut prior_a = None;
    let mut prior_b = None;
    let mut mesh = None;
    let mut latent = None;
    for (name, t) in blocks {
        match name.as_str() {
            "prior.A" => prior_a = Some(t),
            "prior.b" => prior_b = Some(t),
            "pit.mesh" => mesh = Some(t),
            "pit.latent_mesh" => latent = Some(t),
            _ => params.insert(&name, t)?,
        }
    }
    let prior = match (prior_a, prior_b) {
        (Some(a), Some(b)) => Some(AffinePrior {
            a,
            b: b.data().to_vec(),
        }),
        (None, None) => None,
        _ => return Err(DueError::Config("incomplete prior blocks".into())),
    };
    let spec = match meta.get("widths") {
        Some(w) => Some(FnnSpec::new(parse_widths(w)?, activation)?),
        None => None,
    };
    let gate_spec = match meta.get("gate_widths") {
        Some(w) => Some(FnnSpec::new(parse_widths(w)?, activation)?),
        None => None,
    };
    let pit = if kind == ModelKind::PitResNet {
        let depth: usize = get("pit_depth")?
            .parse()
            .map_err(|_| DueError::Config("bad pit_depth".into()))?;
        let width: usize = get("pit_width")?
            .parse()
            .map_err(|_| DueError::Config("bad pit_width".into()))?;
        let comps: usize = get("pit_components")?
            .parse()
            .map_err(|_| DueError::Config("bad pit_components".into()))?;
        Some(PitSpec::new(
            mesh.ok_or_else(|| DueError::Config("missing pit.mesh".into()))?,
            latent.ok_or_else(|| DueError::Config("missing pit.latent_mesh".into()))?,
            depth,
            width,
            comps,
            activation,
        )?)
    } else {
        None
    };
    let bundle = ModelBundle {
        kind,
        spec,
        gate_spec,
        pit,
        params,
        prior,
        norm,
        memory,
        lag,
        seed,
    };
    bundle.validate()?;
    Ok(bundle)
}
