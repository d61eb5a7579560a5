//! Recursive prediction with trained models — fixed lag, varied lag under a
//! step schedule, memory-based — plus the error metrics used for evaluation.
//! Internal state stays in normalized coordinates for the whole rollout and
//! is denormalized only at output.

use std::path::Path;

use crate::autodiff::Tape;
use crate::datasets::NormStats;
use crate::error::{DueError, Result};
use crate::modal::Basis;
use crate::networks::{
    gresnet_forward, memory_resnet_forward, pit_resnet_forward_on_mesh, resnet_forward, DualOsgNet,
    LagInfo, ModelBundle, ModelKind, OsgNet,
};
use crate::tensor::Tensor;
use crate::training::OsgModel;

/// How a varied-lag model steps through time.
#[derive(Debug, Clone, PartialEq)]
pub enum StepSchedule {
    Fixed { lag: f64, steps: usize },
    /// Lag starts at `start`, doubles each step, caps at `cap`, stops once
    /// cumulative time reaches `t_end`.
    Doubling { start: f64, cap: f64, t_end: f64 },
    Explicit(Vec<f64>),
}

impl StepSchedule {
    pub fn lags(&self) -> Result<Vec<f64>> {
        match self {
            StepSchedule::Fixed { lag, steps } => {
                if *lag <= 0.0 {
                    return Err(DueError::Domain(format!("lag {} must be positive", lag)));
                }
                Ok(vec![*lag; *steps])
            }
            StepSchedule::Doubling { start, cap, t_end } => {
                if *start <= 0.0 || *cap < *start || *t_end <= 0.0 {
                    return Err(DueError::Domain(format!(
                        "bad doubling schedule ({}, {}, {})",
                        start, cap, t_end
                    )));
                }
                let mut lags = Vec::new();
                let mut t = 0.0;
                let mut d = *start;
                while t < *t_end {
                    lags.push(d);
                    t += d;
                    d = (d * 2.0).min(*cap);
                }
                Ok(lags)
            }
            StepSchedule::Explicit(lags) => {
                if lags.iter().any(|&d| d < 0.0) {
                    return Err(DueError::Domain("negative lag in schedule".into()));
                }
                Ok(lags.clone())
            }
        }
    }
}

/// A rollout: times, predicted states, optional aligned reference.
#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub times: Vec<f64>,
    pub states: Tensor,
    pub reference: Option<Tensor>,
    pub warnings: Vec<String>,
}

impl PredictionResult {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn with_reference(mut self, reference: Tensor) -> Result<Self> {
        if reference.shape() != self.states.shape() {
            return Err(DueError::Dimension(format!(
                "reference shape {:?} does not match prediction {:?}",
                reference.shape(),
                self.states.shape()
            )));
        }
        self.reference = Some(reference);
        Ok(self)
    }
}

/// Per-step error metrics between aligned prediction and reference.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub l2: Vec<f64>,
    pub rel_l2: Vec<f64>,
    pub linf: Vec<f64>,
}

impl Metrics {
    pub fn horizon_mean_l2(&self) -> f64 {
        mean(&self.l2)
    }

    pub fn horizon_mean_rel_l2(&self) -> f64 {
        mean(&self.rel_l2)
    }

    pub fn horizon_mean_linf(&self) -> f64 {
        mean(&self.linf)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// ℓ₂, relative ℓ₂ (denominator floored at 1e-12), and ℓ∞ per step.
pub fn metrics(pred: &Tensor, reference: &Tensor) -> Result<Metrics> {
    if pred.shape() != reference.shape() {
        return Err(DueError::Dimension(format!(
            "metrics shapes {:?} and {:?} differ",
            pred.shape(),
            reference.shape()
        )));
    }
    let (rows, cols) = (pred.rows(), pred.cols());
    let mut l2 = Vec::with_capacity(rows);
    let mut rel = Vec::with_capacity(rows);
    let mut linf = Vec::with_capacity(rows);
    for k in 0..rows {
        let mut err2 = 0.0;
        let mut ref2 = 0.0;
        let mut emax = 0.0f64;
        for j in 0..cols {
            let e = pred.at(k, j) - reference.at(k, j);
            err2 += e * e;
            ref2 += reference.at(k, j) * reference.at(k, j);
            emax = emax.max(e.abs());
        }
        let e2 = err2.sqrt();
        l2.push(e2);
        rel.push(e2 / ref2.sqrt().max(1e-12));
        linf.push(emax);
    }
    Ok(Metrics { l2, rel_l2: rel, linf })
}

/// Average per-step metrics across several aligned rollouts.
pub fn aggregate_metrics(all: &[Metrics]) -> Result<Metrics> {
    let first = all
        .first()
        .ok_or_else(|| DueError::InsufficientData("no metrics to aggregate".into()))?;
    let steps = first.l2.len();
    if all.iter().any(|m| m.l2.len() != steps) {
        return Err(DueError::Dimension(
            "metrics have different step counts".into(),
        ));
    }
    let n = all.len() as f64;
    let avg = |f: fn(&Metrics) -> &Vec<f64>| -> Vec<f64> {
        (0..steps)
            .map(|k| all.iter().map(|m| f(m)[k]).sum::<f64>() / n)
            .collect()
    };
    Ok(Metrics {
        l2: avg(|m| &m.l2),
        rel_l2: avg(|m| &m.rel_l2),
        linf: avg(|m| &m.linf),
    })
}

fn one_step_fixed(bundle: &ModelBundle, state: &Tensor, mesh: Option<&Tensor>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bundle.params.bind(&mut tape);
    let x = tape.constant(state.clone());
    let out = match bundle.kind {
        ModelKind::ResNet => {
            resnet_forward(&mut tape, &bound, "", bundle.spec.as_ref().unwrap(), x)?
        }
        ModelKind::GResNet => gresnet_forward(
            &mut tape,
            bundle.prior.as_ref().unwrap(),
            &bound,
            "",
            bundle.spec.as_ref().unwrap(),
            x,
        )?,
        ModelKind::PitResNet => {
            let pit = bundle.pit.as_ref().unwrap();
            let io_mesh = mesh.unwrap_or(&pit.mesh);
            // state is 1×n; PiT wants an n×1 field.
            let field = tape.constant(Tensor::new(
                vec![state.cols(), 1],
                state.row(0).to_vec(),
            )?);
            let outs = pit_resnet_forward_on_mesh(&mut tape, &bound, pit, io_mesh, &[field])?;
            let v = tape.value(outs[0]).clone();
            return Tensor::new(vec![1, v.rows()], v.data().to_vec());
        }
        other => {
            return Err(DueError::Contract(format!(
                "{} is not a fixed-lag model",
                other.name()
            )))
        }
    };
    Ok(tape.value(out).clone())
}

fn one_step_varied(bundle: &ModelBundle, state: &Tensor, lag: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bundle.params.bind(&mut tape);
    let x = tape.constant(state.clone());
    let single;
    let dual;
    let model = match bundle.kind {
        ModelKind::OsgNet => {
            single = OsgNet::new(bundle.spec.clone().unwrap())?;
            OsgModel {
                dual: None,
                single: Some(&single),
            }
        }
        ModelKind::DualOsgNet => {
            dual = DualOsgNet::new(
                OsgNet::new(bundle.spec.clone().unwrap())?,
                bundle.gate_spec.clone().unwrap(),
            )?;
            OsgModel {
                dual: Some(&dual),
                single: None,
            }
        }
        other => {
            return Err(DueError::Contract(format!(
                "{} is not a varied-lag model",
                other.name()
            )))
        }
    };
    let out = model.forward(&mut tape, &bound, &bundle.norm, x, &[lag])?;
    Ok(tape.value(out).clone())
}

fn check_finite(state: &Tensor, step: usize) -> Result<()> {
    if !state.is_finite() {
        return Err(DueError::Divergence(format!(
            "rollout produced a non-finite state at step {}",
            step
        )));
    }
    Ok(())
}

fn denormalize_rows(norm: &NormStats, rows: &[Vec<f64>]) -> Result<Tensor> {
    let mut out = Tensor::from_rows(rows)?;
    let cols = out.cols();
    for i in 0..out.rows() {
        norm.invert_row(&mut out.data_mut()[i * cols..(i + 1) * cols]);
    }
    Ok(out)
}

/// Fixed-lag recursive prediction (Markovian, M = 0) on the training mesh.
pub fn predict_fixed(bundle: &ModelBundle, u0: &[f64], steps: usize) -> Result<PredictionResult> {
    predict_fixed_on_mesh(bundle, u0, steps, None)
}

/// Fixed-lag prediction; PiT models may supply an alternative evaluation
/// mesh whose node count matches `u0`.
pub fn predict_fixed_on_mesh(
    bundle: &ModelBundle,
    u0: &[f64],
    steps: usize,
    mesh: Option<&Tensor>,
) -> Result<PredictionResult> {
    if bundle.memory != 0 {
        return Err(DueError::Contract(
            "memory model needs predict_memory with seed states".into(),
        ));
    }
    let lag = match bundle.lag {
        LagInfo::Fixed(d) => d,
        LagInfo::Range(_, _) => {
            return Err(DueError::Contract(
                "varied-lag model needs predict_varied with a schedule".into(),
            ))
        }
    };
    let mut row = u0.to_vec();
    bundle.norm.apply_row(&mut row);
    let mut state = Tensor::new(vec![1, row.len()], row)?;
    let mut rows = vec![state.row(0).to_vec()];
    for k in 0..steps {
        state = one_step_fixed(bundle, &state, mesh)?;
        check_finite(&state, k + 1)?;
        rows.push(state.row(0).to_vec());
    }
    Ok(PredictionResult {
        times: (0..=steps).map(|k| k as f64 * lag).collect(),
        states: denormalize_rows(&bundle.norm, &rows)?,
        reference: None,
        warnings: Vec::new(),
    })
}

/// Varied-lag recursive prediction under a step schedule. Lags outside the
/// trained range produce a warning, not an error.
pub fn predict_varied(
    bundle: &ModelBundle,
    u0: &[f64],
    schedule: &StepSchedule,
) -> Result<PredictionResult> {
    let (lo, hi) = match bundle.lag {
        LagInfo::Range(lo, hi) => (lo, hi),
        LagInfo::Fixed(_) => {
            return Err(DueError::Contract(
                "fixed-lag model cannot take a varied schedule".into(),
            ))
        }
    };
    let lags = schedule.lags()?;
    let mut warnings = Vec::new();
    let n_out = lags.iter().filter(|&&d| d > 0.0 && (d < lo || d > hi)).count();
    if n_out > 0 {
        warnings.push(format!(
            "{} schedule lag(s) outside the trained range [{:.3e}, {:.3e}]",
            n_out, lo, hi
        ));
    }
    let mut row = u0.to_vec();
    bundle.norm.apply_row(&mut row);
    let mut state = Tensor::new(vec![1, row.len()], row)?;
    let mut rows = vec![state.row(0).to_vec()];
    let mut times = vec![0.0];
    for (k, &d) in lags.iter().enumerate() {
        state = one_step_varied(bundle, &state, d)?;
        check_finite(&state, k + 1)?;
        rows.push(state.row(0).to_vec());
        times.push(times[k] + d);
    }
    Ok(PredictionResult {
        times,
        states: denormalize_rows(&bundle.norm, &rows)?,
        reference: None,
        warnings,
    })
}

/// Memory-based prediction: the first M+1 outputs are the seeds verbatim.
pub fn predict_memory(
    bundle: &ModelBundle,
    seed_states: &Tensor,
    steps: usize,
) -> Result<PredictionResult> {
    let m_steps = bundle.memory;
    if seed_states.rows() != m_steps + 1 {
        return Err(DueError::Contract(format!(
            "memory M={} needs {} seed states, got {}",
            m_steps,
            m_steps + 1,
            seed_states.rows()
        )));
    }
    let lag = match bundle.lag {
        LagInfo::Fixed(d) => d,
        LagInfo::Range(_, _) => {
            return Err(DueError::Contract("memory models are fixed-lag".into()))
        }
    };
    let spec = bundle
        .spec
        .as_ref()
        .ok_or_else(|| DueError::Contract("memory model lacks a core spec".into()))?;
    let width = seed_states.cols();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m_steps + 1 + steps);
    for k in 0..=m_steps {
        let mut r = seed_states.row(k).to_vec();
        bundle.norm.apply_row(&mut r);
        rows.push(r);
    }
    for k in 0..steps {
        let mut tape = Tape::new();
        let bound = bundle.params.bind(&mut tape);
        let history: Vec<_> = rows[rows.len() - (m_steps + 1)..]
            .iter()
            .map(|r| tape.constant(Tensor::new(vec![1, width], r.clone()).unwrap()))
            .collect();
        let pred = memory_resnet_forward(&mut tape, &bound, "", spec, &history)?;
        let state = tape.value(pred).clone();
        check_finite(&state, m_steps + 1 + k)?;
        rows.push(state.row(0).to_vec());
    }
    // Seed rows must survive the round trip bitwise: keep the originals.
    let mut out = denormalize_rows(&bundle.norm, &rows)?;
    for k in 0..=m_steps {
        for j in 0..width {
            out.set(k, j, seed_states.at(k, j));
        }
    }
    Ok(PredictionResult {
        times: (0..rows.len()).map(|k| k as f64 * lag).collect(),
        states: out,
        reference: None,
        warnings: Vec::new(),
    })
}

/// Modal rollout: project the nodal IC, predict in coefficient space, and
/// reconstruct nodal values at every step.
pub fn rollout_modal(
    bundle: &ModelBundle,
    basis: &Basis,
    u0_nodal: &[f64],
    steps: usize,
) -> Result<PredictionResult> {
    if u0_nodal.len() != basis.nodes() {
        return Err(DueError::Dimension(format!(
            "nodal IC has {} values, basis has {} nodes",
            u0_nodal.len(),
            basis.nodes()
        )));
    }
    let snap = Tensor::new(vec![basis.nodes(), 1], u0_nodal.to_vec())?;
    let v0 = basis.project_forward(&snap)?;
    let modal = predict_fixed(bundle, v0.data(), steps)?;
    let n = basis.nodes();
    let mut nodal = Tensor::zeros(vec![modal.len(), n]);
    for k in 0..modal.len() {
        let v = Tensor::new(vec![basis.modes, 1], modal.states.row(k).to_vec())?;
        let u = basis.project_backward(&v)?;
        for j in 0..n {
            nodal.set(k, j, u.at(j, 0));
        }
    }
    Ok(PredictionResult {
        times: modal.times,
        states: nodal,
        reference: None,
        warnings: modal.warnings,
    })
}

fn fmt17(v: f64) -> String {
    format!("{:.16e}", v)
}

/// CSV: `t,<pred components...>[,<ref components...>,l2,rel_l2,linf]`.
pub fn write_prediction_csv(
    path: &Path,
    result: &PredictionResult,
    component_names: &[String],
) -> Result<()> {
    let width = result.states.cols();
    if component_names.len() != width {
        return Err(DueError::Dimension(format!(
            "{} component names for width {}",
            component_names.len(),
            width
        )));
    }
    let mut out = String::from("t");
    for n in component_names {
        out.push_str(&format!(",{n}"));
    }
    let m = match &result.reference {
        Some(r) => {
            for n in component_names {
                out.push_str(&format!(",ref_{n}"));
            }
            out.push_str(",l2,rel_l2,linf");
            Some(metrics(&result.states, r)?)
        }
        None => None,
    };
    out.push('\n');
    for k in 0..result.len() {
        out.push_str(&fmt17(result.times[k]));
        for j in 0..width {
            out.push(',');
            out.push_str(&fmt17(result.states.at(k, j)));
        }
        if let (Some(r), Some(m)) = (&result.reference, &m) {
            for j in 0..width {
                out.push(',');
                out.push_str(&fmt17(r.at(k, j)));
            }
            out.push_str(&format!(
                ",{},{},{}",
                fmt17(m.l2[k]),
                fmt17(m.rel_l2[k]),
                fmt17(m.linf[k])
            ));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
