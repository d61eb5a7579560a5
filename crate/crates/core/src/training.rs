//! Losses (MSE, multi-step rollout, GDSG), the Adam optimizer with cosine
//! annealing, and the mini-batch training loop, parameterized over model
//! kind. Training always operates in normalized coordinates; the fitted
//! statistics travel with the returned bundle.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{BoundParams, ParamSet, Tape, Var};
use crate::datasets::{normalize_fit, BurstSet, NormStats, OsgPairSet, PairSet};
use crate::error::{DueError, Result};
use crate::networks::{
    affine_fit, dual_osgnet_forward_feat, fnn_init, memory_resnet_forward, osgnet_forward_feat,
    pit_init, pit_resnet_forward_on_mesh, resnet_forward, Activation, AffinePrior, DualOsgNet,
    FnnSpec, LagInfo, ModelBundle, ModelKind, OsgNet, PitSpec,
};
use crate::tensor::Tensor;

pub const GRAD_CLIP: f64 = 10.0;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub memory: usize,
    pub multistep: usize,
    pub gdsg_lambda: f64,
    pub gdsg_pairs: usize,
    pub seed: u64,
    pub kind: ModelKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(DueError::Config(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(DueError::Config("learning rate must be positive".into()));
        }
        if self.gdsg_lambda < 0.0 {
            return Err(DueError::Config("gdsg lambda must be ≥ 0".into()));
        }
        if self.gdsg_lambda > 0.0 && self.gdsg_pairs < 1 {
            return Err(DueError::Config(
                "gdsg pair count must be ≥ 1 when lambda > 0".into(),
            ));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 5,
            lr: 1e-3,
            lr_min: 0.0,
            memory: 0,
            multistep: 0,
            gdsg_lambda: 0.0,
            gdsg_pairs: 1,
            seed: 0,
            kind: ModelKind::ResNet,
        }
    }
}

/// Architecture hyperparameters resolved from config; widths of the core net
/// follow from the dataset.
#[derive(Debug, Clone)]
pub struct ArchSpec {
    pub kind: ModelKind,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    /// Gating hidden layer (dual-OSG-Net).
    pub gate_depth: usize,
    pub gate_width: usize,
    /// PiT only: mesh coordinates and latent size.
    pub mesh: Option<Tensor>,
    pub latent_nodes: usize,
}

impl ArchSpec {
    pub fn new(kind: ModelKind, depth: usize, width: usize, activation: Activation) -> Self {
        ArchSpec {
            kind,
            depth,
            width,
            activation,
            gate_depth: 1,
            gate_width: 20,
            mesh: None,
            latent_nodes: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TrainData {
    Pairs(PairSet),
    Osg(OsgPairSet),
    Bursts(BurstSet),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossRecord {
    pub epochs: Vec<EpochStats>,
}

/// CSV serialization `epoch,mean_loss,lr,seconds`. Timing can be dropped for
/// byte-level determinism comparisons.
pub fn loss_csv_string(rec: &LossRecord, include_timing: bool) -> String {
    let mut out = String::from(if include_timing {
        "epoch,mean_loss,lr,seconds\n"
    } else {
        "epoch,mean_loss,lr\n"
    });
    for e in &rec.epochs {
        if include_timing {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.3}\n",
                e.epoch, e.mean_loss, e.lr, e.seconds
            ));
        } else {
            out.push_str(&format!("{},{:.16e},{:.16e}\n", e.epoch, e.mean_loss, e.lr));
        }
    }
    out
}

/// (1/J)·Σ_j ‖pred_j − target_j‖₂².
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(DueError::Dimension(format!(
            "mse shapes {:?} and {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let j = pred.rows().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / j)
}

/// η_min + (η₀ − η_min)·(1 + cos(πt/T))/2.
pub fn cosine_lr(eta0: f64, eta_min: f64, epoch: usize, total: usize) -> Result<f64> {
    if epoch > total {
        return Err(DueError::Domain(format!(
            "epoch {} beyond schedule length {}",
            epoch, total
        )));
    }
    let frac = epoch as f64 / total.max(1) as f64;
    Ok(eta_min + (eta0 - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

/// Adam first/second moment buffers, aligned with the parameter set's stable
/// ordering.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let m = params
            .iter()
            .map(|(_, t, _)| Tensor::zeros(t.shape().to_vec()))
            .collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One Adam update from the gradients currently stored in `params`.
pub fn adam_step(state: &mut AdamState, params: &mut ParamSet, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (_, value, grad)) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((x, g), (mi, vi)) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// Random semigroup probes: states uniform in the componentwise bounding box
/// (normalized coordinates), lags log-uniform on [Δ_min, Δ_max/2] so the
/// composed step stays inside the trained range.
pub fn sample_gdsg_inputs(
    bounds: &[(f64, f64)],
    lag_range: (f64, f64),
    q: usize,
    rng: &mut ChaCha20Rng,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (lag_min, lag_max) = lag_range;
    if lag_min <= 0.0 || lag_max < lag_min {
        return Err(DueError::Domain(format!(
            "bad lag range [{}, {}]",
            lag_min, lag_max
        )));
    }
    let lo = lag_min.ln();
    let hi = (lag_max / 2.0).max(lag_min * 1.000001).ln();
    let m = bounds.len();
    let mut states = Tensor::zeros(vec![q, m]);
    let mut d0 = Vec::with_capacity(q);
    let mut d1 = Vec::with_capacity(q);
    for i in 0..q {
        for (j, &(a, b)) in bounds.iter().enumerate() {
            states.set(i, j, if a < b { rng.random_range(a..=b) } else { a });
        }
        d0.push(rng.random_range(lo..=hi).exp());
        d1.push(rng.random_range(lo..=hi).exp());
    }
    Ok((states, d0, d1))
}

/// Semigroup violation of a flow map at one probe:
/// ½(‖Φ_{Δ₀+Δ₁}(u) − Φ_{Δ₁}∘Φ_{Δ₀}(u)‖² + ‖Φ_{Δ₀+Δ₁}(u) − Φ_{Δ₀}∘Φ_{Δ₁}(u)‖²).
pub fn gdsg_residual<F>(flowmap: F, u0: &Tensor, d0: f64, d1: f64) -> Result<f64>
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    let direct = flowmap(u0, d0 + d1)?;
    let ab = flowmap(&flowmap(u0, d0)?, d1)?;
    let ba = flowmap(&flowmap(u0, d1)?, d0)?;
    let mut acc = 0.0;
    for ((x, y), z) in direct.data().iter().zip(ab.data()).zip(ba.data()) {
        acc += 0.5 * ((x - y) * (x - y) + (x - z) * (x - z));
    }
    Ok(acc)
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let cols = t.cols();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), cols], data).expect("gather_rows")
}

/// The pieces of a model the training loop touches, shared with rollout.
pub(crate) struct OsgModel<'a> {
    pub dual: Option<&'a DualOsgNet>,
    pub single: Option<&'a OsgNet>,
}

impl OsgModel<'_> {
    /// One OSG forward on the tape; `delta_raw` scales the increment, the
    /// network sees the normalized log-lag feature.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        norm: &NormStats,
        u: Var,
        lags: &[f64],
    ) -> Result<Var> {
        let rows = lags.len();
        let scale = tape.constant(Tensor::new(vec![rows, 1], lags.to_vec())?);
        let feat = tape.constant(Tensor::new(
            vec![rows, 1],
            lags.iter().map(|&d| norm.normalize_lag(d)).collect(),
        )?);
        if let Some(dual) = self.dual {
            dual_osgnet_forward_feat(tape, bound, dual, u, scale, feat)
        } else {
            osgnet_forward_feat(tape, bound, "", self.single.unwrap(), u, scale, feat)
        }
    }
}

/// Multi-step memory rollout loss on one burst (Eq-style (M+2+K) window):
/// (1/(K+1))·Σ_k ‖ŵ_{M+1+k} − w_{M+1+k}‖₂². Public for direct checking; the
/// training loop batches the same computation.
pub fn multistep_rollout_loss(
    params: &ParamSet,
    spec: &FnnSpec,
    memory: usize,
    future: usize,
    burst: &Tensor,
) -> Result<f64> {
    if burst.rows() != memory + 2 + future {
        return Err(DueError::Dimension(format!(
            "burst has {} rows, expected {}",
            burst.rows(),
            memory + 2 + future
        )));
    }
    let m = burst.cols();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut history: Vec<Var> = (0..=memory)
        .map(|k| tape.constant(Tensor::new(vec![1, m], burst.row(k).to_vec()).unwrap()))
        .collect();
    let mut acc = 0.0;
    for k in 0..=future {
        let pred = memory_resnet_forward(&mut tape, &bound, "", spec, &history)?;
        let target = burst.row(memory + 1 + k);
        acc += tape
            .value(pred)
            .data()
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
        history.remove(0);
        history.push(pred);
    }
    Ok(acc / (future + 1) as f64)
}

struct TrainState {
    params: ParamSet,
    spec: Option<FnnSpec>,
    gate_spec: Option<FnnSpec>,
    dual: Option<DualOsgNet>,
    single: Option<OsgNet>,
    pit: Option<PitSpec>,
    prior: Option<AffinePrior>,
    norm: NormStats,
}

fn init_state(arch: &ArchSpec, data: &TrainData, cfg: &TrainConfig) -> Result<TrainState> {
    match (arch.kind, data) {
        (ModelKind::ResNet, TrainData::Pairs(p)) => {
            if cfg.memory != 0 || cfg.multistep != 0 {
                return Err(DueError::Config(
                    "memory/multistep training needs burst data".into(),
                ));
            }
            let m = p.inputs.cols();
            let norm = normalize_fit(&p.inputs, false);
            let spec = FnnSpec::uniform(m, arch.depth, arch.width, m, arch.activation)?;
            Ok(TrainState {
                params: fnn_init(&spec, cfg.seed)?,
                spec: Some(spec),
                gate_spec: None,
                dual: None,
                single: None,
                pit: None,
                prior: None,
                norm,
            })
        }
        (ModelKind::ResNet, TrainData::Bursts(b)) => {
            if b.memory != cfg.memory || b.future != cfg.multistep {
                return Err(DueError::Config(format!(
                    "burst data (M={}, K={}) does not match config (M={}, K={})",
                    b.memory, b.future, cfg.memory, cfg.multistep
                )));
            }
            let m = b.width();
            let mut all = Vec::new();
            for burst in &b.bursts {
                all.extend_from_slice(burst.data());
            }
            let stacked = Tensor::new(vec![all.len() / m, m], all)?;
            let norm = normalize_fit(&stacked, false);
            let spec = FnnSpec::uniform(
                (cfg.memory + 1) * m,
                arch.depth,
                arch.width,
                m,
                arch.activation,
            )?;
            Ok(TrainState {
                params: fnn_init(&spec, cfg.seed)?,
                spec: Some(spec),
                gate_spec: None,
                dual: None,
                single: None,
                pit: None,
                prior: None,
                norm,
            })
        }
        (ModelKind::GResNet, TrainData::Bursts(b)) => {
            if cfg.memory != 0 || b.memory != 0 {
                return Err(DueError::Config(
                    "gResNet does not take memory terms".into(),
                ));
            }
            if b.future != cfg.multistep {
                return Err(DueError::Config(format!(
                    "burst data (K={}) does not match config (K={})",
                    b.future, cfg.multistep
                )));
            }
            let m = b.width();
            let mut all = Vec::new();
            for burst in &b.bursts {
                all.extend_from_slice(burst.data());
            }
            let stacked = Tensor::new(vec![all.len() / m, m], all)?;
            let norm = normalize_fit(&stacked, false);
            // Prior fit on the normalized one-step pairs inside the bursts.
            let window = b.window_len();
            let mut ins = Vec::new();
            let mut outs = Vec::new();
            for burst in &b.bursts {
                let nb = norm.apply(burst);
                for k in 0..window - 1 {
                    ins.extend_from_slice(nb.row(k));
                    outs.extend_from_slice(nb.row(k + 1));
                }
            }
            let rows = ins.len() / m;
            let prior = affine_fit(&PairSet {
                inputs: Tensor::new(vec![rows, m], ins)?,
                outputs: Tensor::new(vec![rows, m], outs)?,
                lag: b.lag,
            })?;
            let spec = FnnSpec::uniform(m, arch.depth, arch.width, m, arch.activation)?;
            Ok(TrainState {
                params: fnn_init(&spec, cfg.seed)?,
                spec: Some(spec),
                gate_spec: None,
                dual: None,
                single: None,
                pit: None,
                prior: Some(prior),
                norm,
            })
        }
        (ModelKind::GResNet, TrainData::Pairs(p)) => {
            let m = p.inputs.cols();
            let norm = normalize_fit(&p.inputs, false);
            // Prior fit in the normalized coordinates training operates in.
            let fit_pairs = PairSet {
                inputs: norm.apply(&p.inputs),
                outputs: norm.apply(&p.outputs),
                lag: p.lag,
            };
            let prior = affine_fit(&fit_pairs)?;
            let spec = FnnSpec::uniform(m, arch.depth, arch.width, m, arch.activation)?;
            Ok(TrainState {
                params: fnn_init(&spec, cfg.seed)?,
                spec: Some(spec),
                gate_spec: None,
                dual: None,
                single: None,
                pit: None,
                prior: Some(prior),
                norm,
            })
        }
        (ModelKind::OsgNet, TrainData::Osg(o)) => {
            let m = o.inputs.cols();
            let norm = normalize_fit(&o.inputs, false).with_lag_stats(&o.lags);
            let spec = FnnSpec::uniform(m + 1, arch.depth, arch.width, m, arch.activation)?;
            let net = OsgNet::new(spec.clone())?;
            Ok(TrainState {
                params: fnn_init(&spec, cfg.seed)?,
                spec: Some(spec),
                gate_spec: None,
                dual: None,
                single: Some(net),
                pit: None,
                prior: None,
                norm,
            })
        }
        (ModelKind::DualOsgNet, TrainData::Osg(o)) => {
            let m = o.inputs.cols();
            let norm = normalize_fit(&o.inputs, false).with_lag_stats(&o.lags);
            let spec = FnnSpec::uniform(m + 1, arch.depth, arch.width, m, arch.activation)?;
            let gate = FnnSpec::uniform(1, arch.gate_depth, arch.gate_width, 2, arch.activation)?;
            let dual = DualOsgNet::new(OsgNet::new(spec.clone())?, gate.clone())?;
            Ok(TrainState {
                params: dual.init(cfg.seed)?,
                spec: Some(spec),
                gate_spec: Some(gate),
                dual: Some(dual),
                single: None,
                pit: None,
                prior: None,
                norm,
            })
        }
        (ModelKind::PitResNet, TrainData::Pairs(p)) => {
            let mesh = arch
                .mesh
                .clone()
                .ok_or_else(|| DueError::Config("PiT training needs a mesh".into()))?;
            if p.inputs.cols() != mesh.rows() {
                return Err(DueError::Dimension(format!(
                    "snapshot width {} does not match mesh size {}",
                    p.inputs.cols(),
                    mesh.rows()
                )));
            }
            let latent = crate::networks::latent_mesh_coarsen(&mesh, arch.latent_nodes.max(1))?;
            let norm = normalize_fit(&p.inputs, true);
            let pit = PitSpec::new(mesh, latent, arch.depth, arch.width, 1, arch.activation)?;
            Ok(TrainState {
                params: pit_init(&pit, cfg.seed)?,
                spec: None,
                gate_spec: None,
                dual: None,
                single: None,
                pit: Some(pit),
                prior: None,
                norm,
            })
        }
        (kind, _) => Err(DueError::Config(format!(
            "model kind {} is incompatible with this dataset",
            kind.name()
        ))),
    }
}

/// Mini-batch training per Algorithm-1 structure: seeded shuffle each epoch,
/// ⌊J/B⌋ batches, cosine-annealed Adam with global gradient clipping.
pub fn train(
    arch: &ArchSpec,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, LossRecord)> {
    cfg.validate()?;
    if arch.kind != cfg.kind {
        return Err(DueError::Config("arch kind does not match config".into()));
    }
    let mut st = init_state(arch, data, cfg)?;

    // Pre-normalize the whole dataset once.
    enum Prepared {
        Pairs {
            inputs: Tensor,
            outputs: Tensor,
        },
        Osg {
            inputs: Tensor,
            outputs: Tensor,
            lags: Vec<f64>,
            bounds: Vec<(f64, f64)>,
            lag_range: (f64, f64),
        },
        Bursts(Vec<Tensor>),
    }
    let prepared = match data {
        TrainData::Pairs(p) => Prepared::Pairs {
            inputs: st.norm.apply(&p.inputs),
            outputs: st.norm.apply(&p.outputs),
        },
        TrainData::Osg(o) => {
            let inputs = st.norm.apply(&o.inputs);
            let m = inputs.cols();
            let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); m];
            for i in 0..inputs.rows() {
                for j in 0..m {
                    let v = inputs.at(i, j);
                    bounds[j].0 = bounds[j].0.min(v);
                    bounds[j].1 = bounds[j].1.max(v);
                }
            }
            Prepared::Osg {
                inputs,
                outputs: st.norm.apply(&o.outputs),
                lags: o.lags.clone(),
                bounds,
                lag_range: (o.lag_min, o.lag_max),
            }
        }
        TrainData::Bursts(b) => Prepared::Bursts(
            b.bursts.iter().map(|burst| st.norm.apply(burst)).collect(),
        ),
    };
    let j_total = match &prepared {
        Prepared::Pairs { inputs, .. } => inputs.rows(),
        Prepared::Osg { lags, .. } => lags.len(),
        Prepared::Bursts(b) => b.len(),
    };
    let batches = j_total / cfg.batch_size;
    if batches == 0 {
        return Err(DueError::Config(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size, j_total
        )));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&st.params);
    let mut record = LossRecord::default();
    let mut indices: Vec<usize> = (0..j_total).collect();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(cfg.lr, cfg.lr_min, epoch, cfg.epochs)?;
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in 0..batches {
            let idx = &indices[batch * cfg.batch_size..(batch + 1) * cfg.batch_size];
            let mut tape = Tape::new();
            let bound = st.params.bind(&mut tape);
            let loss_var = match &prepared {
                Prepared::Pairs { inputs, outputs } => {
                    if let Some(pit) = &st.pit {
                        let n = inputs.cols();
                        let mesh = pit.mesh.clone();
                        let fields: Vec<Var> = idx
                            .iter()
                            .map(|&i| {
                                let t = Tensor::new(vec![n, 1], inputs.row(i).to_vec()).unwrap();
                                tape.constant(t)
                            })
                            .collect();
                        let outs =
                            pit_resnet_forward_on_mesh(&mut tape, &bound, pit, &mesh, &fields)?;
                        let mut acc: Option<Var> = None;
                        for (&o, &i) in outs.iter().zip(idx.iter()) {
                            let target = tape.constant(
                                Tensor::new(vec![n, 1], outputs.row(i).to_vec()).unwrap(),
                            );
                            let d = tape.sub(o, target)?;
                            let s = tape.sum_squares(d)?;
                            acc = Some(match acc {
                                None => s,
                                Some(a) => tape.add(a, s)?,
                            });
                        }
                        let total = acc.expect("non-empty batch");
                        tape.scale(total, 1.0 / idx.len() as f64)
                    } else {
                        let x = tape.constant(gather_rows(inputs, idx));
                        let y = tape.constant(gather_rows(outputs, idx));
                        let out = if let Some(prior) = &st.prior {
                            crate::networks::gresnet_forward(
                                &mut tape,
                                prior,
                                &bound,
                                "",
                                st.spec.as_ref().unwrap(),
                                x,
                            )?
                        } else {
                            resnet_forward(&mut tape, &bound, "", st.spec.as_ref().unwrap(), x)?
                        };
                        let d = tape.sub(out, y)?;
                        let s = tape.sum_squares(d)?;
                        tape.scale(s, 1.0 / idx.len() as f64)
                    }
                }
                Prepared::Osg {
                    inputs,
                    outputs,
                    lags,
                    bounds,
                    lag_range,
                } => {
                    let x = tape.constant(gather_rows(inputs, idx));
                    let y = tape.constant(gather_rows(outputs, idx));
                    let batch_lags: Vec<f64> = idx.iter().map(|&i| lags[i]).collect();
                    let model = OsgModel {
                        dual: st.dual.as_ref(),
                        single: st.single.as_ref(),
                    };
                    let pred = model.forward(&mut tape, &bound, &st.norm, x, &batch_lags)?;
                    let d = tape.sub(pred, y)?;
                    let data_sse = tape.sum_squares(d)?;
                    let data_term = tape.scale(data_sse, 1.0 / idx.len() as f64);
                    if cfg.gdsg_lambda > 0.0 {
                        // Q probe triples per data point: the residual term is
                        // Σ_j mean_q r^{(j,q)} / J, i.e. a mean over J·Q probes.
                        let q = idx.len() * cfg.gdsg_pairs;
                        let (probes, d0, d1) =
                            sample_gdsg_inputs(bounds, *lag_range, q, &mut rng)?;
                        let u0 = tape.constant(probes);
                        let sum_lags: Vec<f64> =
                            d0.iter().zip(&d1).map(|(a, b)| a + b).collect();
                        let direct = model.forward(&mut tape, &bound, &st.norm, u0, &sum_lags)?;
                        let s0 = model.forward(&mut tape, &bound, &st.norm, u0, &d0)?;
                        let ab = model.forward(&mut tape, &bound, &st.norm, s0, &d1)?;
                        let s1 = model.forward(&mut tape, &bound, &st.norm, u0, &d1)?;
                        let ba = model.forward(&mut tape, &bound, &st.norm, s1, &d0)?;
                        let e1 = tape.sub(direct, ab)?;
                        let e2 = tape.sub(direct, ba)?;
                        let r1 = tape.sum_squares(e1)?;
                        let r2 = tape.sum_squares(e2)?;
                        let rsum = tape.add(r1, r2)?;
                        let res_term = tape.scale(rsum, 0.5 / q as f64);
                        let weighted = tape.scale(res_term, cfg.gdsg_lambda);
                        let total = tape.add(data_term, weighted)?;
                        tape.scale(total, 1.0 / (1.0 + cfg.gdsg_lambda))
                    } else {
                        data_term
                    }
                }
                Prepared::Bursts(bursts) => {
                    let spec = st.spec.as_ref().unwrap();
                    let memory = cfg.memory;
                    let future = cfg.multistep;
                    let m = bursts[0].cols();
                    // Slice the batch into per-time tensors so the rollout is
                    // one batched matmul chain instead of per-burst tapes.
                    let window = memory + 2 + future;
                    let mut slabs = Vec::with_capacity(window);
                    for t in 0..window {
                        let mut data = Vec::with_capacity(idx.len() * m);
                        for &i in idx {
                            data.extend_from_slice(bursts[i].row(t));
                        }
                        slabs.push(
                            tape.constant(Tensor::new(vec![idx.len(), m], data).unwrap()),
                        );
                    }
                    let mut history: Vec<Var> = slabs[..=memory].to_vec();
                    let mut acc: Option<Var> = None;
                    for k in 0..=future {
                        let pred = if let Some(prior) = &st.prior {
                            crate::networks::gresnet_forward(
                                &mut tape, prior, &bound, "", spec, history[0],
                            )?
                        } else {
                            memory_resnet_forward(&mut tape, &bound, "", spec, &history)?
                        };
                        let d = tape.sub(pred, slabs[memory + 1 + k])?;
                        let s = tape.sum_squares(d)?;
                        acc = Some(match acc {
                            None => s,
                            Some(a) => tape.add(a, s)?,
                        });
                        history.remove(0);
                        history.push(pred);
                    }
                    let total = acc.expect("K+1 ≥ 1 steps");
                    tape.scale(total, 1.0 / ((future + 1) * idx.len()) as f64)
                }
            };
            let loss = tape.value(loss_var).data()[0];
            if !loss.is_finite() {
                return Err(DueError::Divergence(format!(
                    "non-finite loss at epoch {}, batch {}",
                    epoch, batch
                )));
            }
            loss_sum += loss;
            st.params.zero_grads();
            tape.backward(loss_var)?;
            st.params.accumulate_grads(&tape, &bound);
            let gnorm = st.params.grad_norm();
            if gnorm > GRAD_CLIP {
                st.params.scale_grads(GRAD_CLIP / gnorm);
            }
            adam_step(&mut adam, &mut st.params, lr);
        }
        record.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / batches as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    let lag = match data {
        TrainData::Pairs(p) => LagInfo::Fixed(p.lag),
        TrainData::Bursts(b) => LagInfo::Fixed(b.lag),
        TrainData::Osg(o) => LagInfo::Range(o.lag_min, o.lag_max),
    };
    let bundle = ModelBundle {
        kind: arch.kind,
        spec: st.spec,
        gate_spec: st.gate_spec,
        pit: st.pit,
        params: st.params,
        prior: st.prior,
        norm: st.norm,
        memory: cfg.memory,
        lag,
        seed: cfg.seed,
    };
    bundle.validate()?;
    Ok((bundle, record))
}
