//! Trajectory ingestion and rearrangement into the training-sample regimes:
//! fixed-lag pairs, varied-lag pairs, and memory/multi-step bursts, plus
//! normalization, noise injection, and train/test splitting.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{DueError, Result};
use crate::tensor::Tensor;

/// One time-stamped state sequence. `states` is K×m row-major; row k holds the
/// observed components at `times[k]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Tensor,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Tensor) -> Result<Self> {
        if states.rows() != times.len() {
            return Err(DueError::Dimension(format!(
                "{} time stamps but {} state rows",
                times.len(),
                states.rows()
            )));
        }
        for w in times.windows(2) {
            if w[1] <= w[0] {
                return Err(DueError::Domain(format!(
                    "times not strictly increasing at t={}",
                    w[1]
                )));
            }
        }
        Ok(Trajectory { times, states })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn width(&self) -> usize {
        self.states.cols()
    }
}

#[derive(Debug, Clone)]
pub struct TrajectorySet {
    pub trajectories: Vec<Trajectory>,
    pub component_names: Vec<String>,
}

impl TrajectorySet {
    pub fn new(trajectories: Vec<Trajectory>, component_names: Vec<String>) -> Result<Self> {
        if let Some(first) = trajectories.first() {
            let w = first.width();
            if trajectories.iter().any(|t| t.width() != w) {
                return Err(DueError::Dimension(
                    "trajectories have inconsistent state widths".into(),
                ));
            }
            if component_names.len() != w {
                return Err(DueError::Dimension(format!(
                    "{} component names for width {}",
                    component_names.len(),
                    w
                )));
            }
        }
        Ok(TrajectorySet {
            trajectories,
            component_names,
        })
    }

    pub fn width(&self) -> usize {
        self.trajectories.first().map_or(0, |t| t.width())
    }
}

/// Fixed-lag input/output pairs.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub inputs: Tensor,
    pub outputs: Tensor,
    pub lag: f64,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Varied-lag triples (u_in, Δ, u_out).
#[derive(Debug, Clone)]
pub struct OsgPairSet {
    pub inputs: Tensor,
    pub lags: Vec<f64>,
    pub outputs: Tensor,
    pub lag_min: f64,
    pub lag_max: f64,
}

impl OsgPairSet {
    pub fn from_triples(inputs: Tensor, lags: Vec<f64>, outputs: Tensor) -> Result<Self> {
        if inputs.rows() != lags.len() || outputs.rows() != lags.len() {
            return Err(DueError::Dimension("triple row counts disagree".into()));
        }
        if let Some(bad) = lags.iter().find(|&&d| d <= 0.0) {
            return Err(DueError::Domain(format!("nonpositive lag {}", bad)));
        }
        let lag_min = lags.iter().cloned().fold(f64::INFINITY, f64::min);
        let lag_max = lags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(OsgPairSet {
            inputs,
            lags,
            outputs,
            lag_min,
            lag_max,
        })
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Consecutive-state windows of length M+2+K at a fixed lag.
#[derive(Debug, Clone)]
pub struct BurstSet {
    /// Each burst is an (M+2+K)×m tensor.
    pub bursts: Vec<Tensor>,
    pub memory: usize,
    pub future: usize,
    pub lag: f64,
}

impl BurstSet {
    pub fn window_len(&self) -> usize {
        self.memory + 2 + self.future
    }

    pub fn width(&self) -> usize {
        self.bursts.first().map_or(0, |b| b.cols())
    }

    pub fn len(&self) -> usize {
        self.bursts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bursts.is_empty()
    }
}

const STD_FLOOR: f64 = 1e-12;

/// Per-component z-score statistics. `field` collapses all components into a
/// single mean/std, which keeps nodal PDE models applicable across meshes.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub field: bool,
    /// (mean, std) of log10(lag), present when lags vary.
    pub lag: Option<(f64, f64)>,
}

pub fn normalize_fit(data: &Tensor, field: bool) -> NormStats {
    let (rows, cols) = (data.rows(), data.cols());
    let groups = if field { 1 } else { cols };
    let mut mean = vec![0.0; groups];
    let mut std = vec![0.0; groups];
    let mut count = vec![0usize; groups];
    for i in 0..rows {
        for j in 0..cols {
            let g = if field { 0 } else { j };
            mean[g] += data.at(i, j);
            count[g] += 1;
        }
    }
    for g in 0..groups {
        mean[g] /= count[g].max(1) as f64;
    }
    for i in 0..rows {
        for j in 0..cols {
            let g = if field { 0 } else { j };
            let d = data.at(i, j) - mean[g];
            std[g] += d * d;
        }
    }
    for g in 0..groups {
        std[g] = (std[g] / count[g].max(1) as f64).sqrt().max(STD_FLOOR);
    }
    NormStats {
        mean,
        std,
        field,
        lag: None,
    }
}

impl NormStats {
    pub fn identity(width: usize) -> Self {
        NormStats {
            mean: vec![0.0; width],
            std: vec![1.0; width],
            field: false,
            lag: None,
        }
    }

    pub fn with_lag_stats(mut self, lags: &[f64]) -> Self {
        let logs: Vec<f64> = lags.iter().map(|d| d.max(1e-30).log10()).collect();
        let m = logs.iter().sum::<f64>() / logs.len().max(1) as f64;
        let v = logs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / logs.len().max(1) as f64;
        self.lag = Some((m, v.sqrt().max(STD_FLOOR)));
        self
    }

    fn group(&self, j: usize) -> usize {
        if self.field {
            0
        } else {
            j
        }
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            let g = self.group(j);
            *v = (*v - self.mean[g]) / self.std[g];
        }
    }

    pub fn invert_row(&self, row: &mut [f64]) {
        for (j, v) in row.iter_mut().enumerate() {
            let g = self.group(j);
            *v = *v * self.std[g] + self.mean[g];
        }
    }

    pub fn apply(&self, data: &Tensor) -> Tensor {
        let mut out = data.clone();
        let cols = data.cols();
        for i in 0..data.rows() {
            self.apply_row(&mut out.data_mut()[i * cols..(i + 1) * cols]);
        }
        out
    }

    pub fn invert(&self, data: &Tensor) -> Tensor {
        let mut out = data.clone();
        let cols = data.cols();
        for i in 0..data.rows() {
            self.invert_row(&mut out.data_mut()[i * cols..(i + 1) * cols]);
        }
        out
    }

    /// log10 then z-score, for varied lags.
    pub fn normalize_lag(&self, lag: f64) -> f64 {
        let (m, s) = self.lag.unwrap_or((0.0, 1.0));
        (lag.max(1e-30).log10() - m) / s
    }
}

fn parse_f64(tok: &str, file: &str, line: usize) -> Result<f64> {
    tok.trim().parse::<f64>().map_err(|_| DueError::Parse {
        file: file.to_string(),
        line,
        msg: format!("not a number: {:?}", tok.trim()),
    })
}

/// Parse one trajectory CSV: header `t,<name1>,...,<namem>` then one row per
/// time stamp.
pub fn load_trajectory_csv(path: &Path) -> Result<(Trajectory, Vec<String>)> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DueError::Parse {
        file: file.clone(),
        line: 1,
        msg: "empty file".into(),
    })?;
    let mut cols = header.split(',').map(|s| s.trim().to_string());
    match cols.next() {
        Some(t) if t == "t" => {}
        other => {
            return Err(DueError::Parse {
                file,
                line: 1,
                msg: format!("header must start with 't', got {:?}", other),
            })
        }
    }
    let names: Vec<String> = cols.collect();
    let width = names.len();
    if width == 0 {
        return Err(DueError::Parse {
            file,
            line: 1,
            msg: "no state columns".into(),
        });
    }
    let mut times = Vec::new();
    let mut data = Vec::new();
    for (idx, raw) in lines {
        let lineno = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = raw.split(',').collect();
        if toks.len() != width + 1 {
            return Err(DueError::Parse {
                file,
                line: lineno,
                msg: format!("expected {} fields, got {}", width + 1, toks.len()),
            });
        }
        let t = parse_f64(toks[0], &file, lineno)?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(DueError::Parse {
                    file,
                    line: lineno,
                    msg: format!("time {} not greater than previous {}", t, prev),
                });
            }
        }
        times.push(t);
        for tok in &toks[1..] {
            data.push(parse_f64(tok, &file, lineno)?);
        }
    }
    let states = Tensor::new(vec![times.len(), width], data)?;
    Ok((Trajectory::new(times, states)?, names))
}

/// Load the trajectory CSVs listed in a manifest (one relative path per line,
/// `#` comments allowed).
pub fn load_trajectories(manifest_path: &Path) -> Result<TrajectorySet> {
    let file = manifest_path.display().to_string();
    let text = fs::read_to_string(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut trajectories = Vec::new();
    let mut names: Option<Vec<String>> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let path = base.join(line);
        let (traj, these_names) = load_trajectory_csv(&path)?;
        match &names {
            None => names = Some(these_names),
            Some(n) if *n != these_names => {
                return Err(DueError::Parse {
                    file: file.clone(),
                    line: idx + 1,
                    msg: format!("component names of {} differ from earlier files", line),
                })
            }
            _ => {}
        }
        trajectories.push(traj);
    }
    if trajectories.is_empty() {
        return Err(DueError::InsufficientData(format!(
            "manifest {} lists no trajectories",
            file
        )));
    }
    TrajectorySet::new(trajectories, names.unwrap_or_default())
}

fn fmt17(v: f64) -> String {
    format!("{:.16e}", v)
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory, names: &[String]) -> Result<()> {
    let mut out = String::from("t");
    for n in names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for (k, &t) in traj.times.iter().enumerate() {
        out.push_str(&fmt17(t));
        for j in 0..traj.width() {
            out.push(',');
            out.push_str(&fmt17(traj.states.at(k, j)));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_manifest(path: &Path, entries: &[PathBuf]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&e.display().to_string());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Mesh file: header `x1,...,xd`, one row per node. Returns n×d coordinates.
pub fn load_mesh_csv(path: &Path) -> Result<Tensor> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DueError::Parse {
        file: file.clone(),
        line: 1,
        msg: "empty mesh file".into(),
    })?;
    let d = header.split(',').count();
    let mut rows = Vec::new();
    for (idx, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = raw.split(',').collect();
        if toks.len() != d {
            return Err(DueError::Parse {
                file,
                line: idx + 1,
                msg: format!("expected {} coordinates, got {}", d, toks.len()),
            });
        }
        let mut row = Vec::with_capacity(d);
        for tok in toks {
            row.push(parse_f64(tok, &file, idx + 1)?);
        }
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

pub fn write_mesh_csv(path: &Path, mesh: &Tensor) -> Result<()> {
    let d = mesh.cols();
    let mut out = (1..=d).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..mesh.rows() {
        let row = (0..d).map(|j| fmt17(mesh.at(i, j))).collect::<Vec<_>>();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// All consecutive pairs pooled across trajectories, requiring a consistent
/// lag (relative tolerance `lag_tol`).
pub fn segment_fixed(ts: &TrajectorySet, lag_tol: f64) -> Result<PairSet> {
    let m = ts.width();
    let mut lag: Option<f64> = None;
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    for (ti, traj) in ts.trajectories.iter().enumerate() {
        for k in 0..traj.len().saturating_sub(1) {
            let d = traj.times[k + 1] - traj.times[k];
            match lag {
                None => lag = Some(d),
                Some(l) => {
                    if (d - l).abs() > lag_tol * l.abs().max(1e-300) {
                        return Err(DueError::Domain(format!(
                            "trajectory {} has lag {} inconsistent with {}",
                            ti, d, l
                        )));
                    }
                }
            }
            inputs.extend_from_slice(traj.states.row(k));
            outputs.extend_from_slice(traj.states.row(k + 1));
        }
    }
    let lag = lag.ok_or_else(|| DueError::InsufficientData("no pairs to segment".into()))?;
    let rows = inputs.len() / m;
    Ok(PairSet {
        inputs: Tensor::new(vec![rows, m], inputs)?,
        outputs: Tensor::new(vec![rows, m], outputs)?,
        lag,
    })
}

/// Consecutive pairs keeping each pair's own lag.
pub fn segment_osg(ts: &TrajectorySet) -> Result<OsgPairSet> {
    let m = ts.width();
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let mut lags = Vec::new();
    for traj in &ts.trajectories {
        for k in 0..traj.len().saturating_sub(1) {
            let d = traj.times[k + 1] - traj.times[k];
            if d <= 0.0 {
                return Err(DueError::Domain(format!("nonpositive lag {}", d)));
            }
            lags.push(d);
            inputs.extend_from_slice(traj.states.row(k));
            outputs.extend_from_slice(traj.states.row(k + 1));
        }
    }
    if lags.is_empty() {
        return Err(DueError::InsufficientData("no pairs to segment".into()));
    }
    let rows = lags.len();
    OsgPairSet::from_triples(
        Tensor::new(vec![rows, m], inputs)?,
        lags,
        Tensor::new(vec![rows, m], outputs)?,
    )
}

/// Random contiguous windows of length M+2+K, `bursts_per_traj` from each
/// trajectory. Offsets are drawn without replacement when enough exist.
pub fn make_bursts(
    ts: &TrajectorySet,
    memory: usize,
    future: usize,
    bursts_per_traj: usize,
    seed: u64,
) -> Result<BurstSet> {
    let window = memory + 2 + future;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut lag: Option<f64> = None;
    let mut bursts = Vec::new();
    for (ti, traj) in ts.trajectories.iter().enumerate() {
        if traj.len() < window {
            return Err(DueError::InsufficientData(format!(
                "trajectory {} has {} states, bursts need at least {}",
                ti,
                traj.len(),
                window
            )));
        }
        let d = traj.times[1] - traj.times[0];
        match lag {
            None => lag = Some(d),
            Some(l) => {
                if (d - l).abs() > 1e-9 * l.abs() {
                    return Err(DueError::Domain(format!(
                        "trajectory {} lag {} inconsistent with {}",
                        ti, d, l
                    )));
                }
            }
        }
        let max_offset = traj.len() - window;
        let offsets: Vec<usize> = if max_offset + 1 >= bursts_per_traj {
            let mut all: Vec<usize> = (0..=max_offset).collect();
            all.shuffle(&mut rng);
            all.truncate(bursts_per_traj);
            all
        } else {
            (0..bursts_per_traj)
                .map(|_| rng.random_range(0..=max_offset))
                .collect()
        };
        for off in offsets {
            let mut data = Vec::with_capacity(window * traj.width());
            for k in off..off + window {
                data.extend_from_slice(traj.states.row(k));
            }
            bursts.push(Tensor::new(vec![window, traj.width()], data)?);
        }
    }
    Ok(BurstSet {
        bursts,
        memory,
        future,
        lag: lag.ok_or_else(|| DueError::InsufficientData("no trajectories".into()))?,
    })
}

/// Multiplicative noise v·(1+ε), ε ~ U[−η, η] i.i.d.
pub fn add_multiplicative_noise(ts: &TrajectorySet, eta: f64, seed: u64) -> Result<TrajectorySet> {
    if eta < 0.0 {
        return Err(DueError::Domain(format!("noise level {} negative", eta)));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut out = ts.clone();
    for traj in &mut out.trajectories {
        for v in traj.states.data_mut() {
            let eps: f64 = rng.random_range(-eta..=eta);
            *v *= 1.0 + eps;
        }
    }
    Ok(out)
}

/// Split by whole trajectories, never within one.
pub fn train_test_split(
    ts: &TrajectorySet,
    test_fraction: f64,
    seed: u64,
) -> Result<(TrajectorySet, TrajectorySet)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(DueError::Domain(format!(
            "test fraction {} outside [0, 1)",
            test_fraction
        )));
    }
    let n = ts.trajectories.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let test_idx: std::collections::HashSet<usize> = idx[..n_test].iter().cloned().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, t) in ts.trajectories.iter().enumerate() {
        if test_idx.contains(&i) {
            test.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    Ok((
        TrajectorySet::new(train, ts.component_names.clone())?,
        TrajectorySet::new(test, ts.component_names.clone())?,
    ))
}
