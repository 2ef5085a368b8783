//! Reference data on a mesh hierarchy, window sampling, the K-step unrolled
//! loss and the optimization loop.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, Adam, Tape, Tensor, Var};
use crate::benchmarks::{Benchmark, IcSampler, InitialCondition, StepRule};
use crate::error::{Error, Result};
use crate::grid::{make_grid, BoundaryCondition, Grid, State};
use crate::io::{write_atomic, write_csv, Cell, Trajectory};
use crate::networks::{build_metadata, Model};
use crate::physics::System;
use crate::scheme::{NodeSolver, Scheme};
use crate::stepper::{remap_conservative, steps_to};

const MAX_RESAMPLES: usize = 20;
pub const MANIFEST_NAME: &str = "manifest.json";

/// Where the per-level reference snapshots come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ReferenceSource {
    /// Classical WENO5 run on the level's own mesh.
    Native,
    /// Classical WENO5 on `mesh` cells, averaged onto the level.
    Coarsened { mesh: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub system: System,
    pub bc: BoundaryCondition,
    pub domain: [f64; 2],
    pub sampler: IcSampler,
    pub mesh_levels: Vec<usize>,
    pub t_final: f64,
    pub step: StepRule,
    pub n_traj: usize,
    pub seed: u64,
    pub source: ReferenceSource,
}

impl DatasetSpec {
    /// Desk-scale training set of a benchmark, with references averaged down
    /// from the benchmark's reference mesh.
    pub fn from_benchmark(b: &Benchmark, seed: u64) -> Self {
        DatasetSpec {
            system: b.system,
            bc: b.bc,
            domain: b.domain,
            sampler: b.sampler.clone(),
            mesh_levels: b.training.mesh_levels.clone(),
            t_final: b.training.t_final,
            step: StepRule::Ratio(b.dt_ratio),
            n_traj: b.training.n_traj,
            seed,
            source: ReferenceSource::Coarsened { mesh: b.reference_mesh },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleEvent {
    pub instance: usize,
    pub attempt: usize,
    pub reason: String,
}

/// Reference snapshots per (instance, mesh level).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub spec: DatasetSpec,
    pub ics: Vec<InitialCondition>,
    /// `trajectories[i][l]`.
    pub trajectories: Vec<Vec<Trajectory>>,
    pub resampled: Vec<ResampleEvent>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: DatasetSpec,
    ics: Vec<InitialCondition>,
    files: Vec<Vec<String>>,
    resampled: Vec<ResampleEvent>,
}

fn reference_trajectory(spec: &DatasetSpec, ic: &InitialCondition, n: usize) -> Result<Trajectory> {
    let grid = make_grid(spec.domain[0], spec.domain[1], n)?;
    let u0 = ic.instantiate(&grid, &spec.system)?;
    let max_dt = spec.step.max_dt(&spec.system, &grid, &u0)?;
    let (steps, dt) = steps_to(spec.t_final, max_dt)?;
    let scheme = Scheme::classical();
    match spec.source {
        ReferenceSource::Native => {
            let rec = scheme.rollout(&grid, spec.bc, spec.system, &u0, steps, dt, 1)?.into_result()?;
            Trajectory::from_record(&rec, ic.params())
        }
        ReferenceSource::Coarsened { mesh } => {
            if mesh < n {
                return Err(Error::Config(format!("reference mesh {mesh} is coarser than level {n}")));
            }
            let fine = make_grid(spec.domain[0], spec.domain[1], mesh)?;
            let f0 = ic.instantiate(&fine, &spec.system)?;
            let fine_max = spec.step.max_dt(&spec.system, &fine, &f0)?;
            let sub = (dt / fine_max).ceil().max(1.0) as usize;
            let rec = scheme
                .rollout(&fine, spec.bc, spec.system, &f0, steps * sub, dt / sub as f64, sub)?
                .into_result()?;
            let c = spec.system.n_components();
            let mut snaps = Array3::zeros((rec.snapshots.len(), n, c));
            for (m, st) in rec.snapshots.iter().enumerate() {
                snaps.index_axis_mut(Axis(0), m).assign(&remap_conservative(st.u.view(), n)?);
            }
            Ok(Trajectory { dx: grid.dx, dt, ic_params: ic.params(), snapshots: snaps, flux_log: None })
        }
    }
}

/// Draws `n_traj` initial conditions and runs classical WENO5 on every mesh
/// level. Instance `i` uses its own random stream, so the result does not
/// depend on thread scheduling. A diverged or non-physical run redraws the
/// instance.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<TrajectoryDataset> {
    if spec.mesh_levels.is_empty() || spec.n_traj == 0 {
        return Err(Error::Config("dataset needs at least one mesh level and one trajectory".into()));
    }
    spec.system.validate()?;
    let per: Vec<Result<(InitialCondition, Vec<Trajectory>, Vec<ResampleEvent>)>> = (0..spec.n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            let mut events = Vec::new();
            for attempt in 0..MAX_RESAMPLES {
                let ic = spec.sampler.sample(&mut rng);
                let runs: Result<Vec<Trajectory>> =
                    spec.mesh_levels.iter().map(|&n| reference_trajectory(spec, &ic, n)).collect();
                match runs {
                    Ok(t) => return Ok((ic, t, events)),
                    Err(e @ (Error::StepDiverged { .. } | Error::NonPhysicalState(_) | Error::Config(_))) => {
                        events.push(ResampleEvent { instance: i, attempt, reason: e.to_string() });
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(Error::TrainingAborted(format!("instance {i}: {MAX_RESAMPLES} draws failed")))
        })
        .collect();
    let mut ds = TrajectoryDataset { spec: spec.clone(), ics: Vec::new(), trajectories: Vec::new(), resampled: Vec::new() };
    for r in per {
        let (ic, t, ev) = r?;
        ds.ics.push(ic);
        ds.trajectories.push(t);
        ds.resampled.extend(ev);
    }
    Ok(ds)
}

impl TrajectoryDataset {
    pub fn n_instances(&self) -> usize {
        self.trajectories.len()
    }

    pub fn n_levels(&self) -> usize {
        self.spec.mesh_levels.len()
    }

    pub fn grid(&self, level: usize) -> Result<Grid> {
        let n = *self.spec.mesh_levels.get(level).ok_or_else(|| Error::invalid(format!("no mesh level {level}")))?;
        make_grid(self.spec.domain[0], self.spec.domain[1], n)
    }

    pub fn trajectory(&self, i: usize, l: usize) -> Result<&Trajectory> {
        self.trajectories
            .get(i)
            .and_then(|t| t.get(l))
            .ok_or_else(|| Error::invalid(format!("no trajectory ({i}, {l})")))
    }

    fn file_name(i: usize, n: usize) -> String {
        format!("traj_{i:04}_n{n}.hwtrj")
    }

    /// Writes one trajectory file per (instance, level) plus a JSON manifest.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for (i, levels) in self.trajectories.iter().enumerate() {
            let mut row = Vec::new();
            for (t, &n) in levels.iter().zip(&self.spec.mesh_levels) {
                let name = Self::file_name(i, n);
                t.save(&dir.join(&name))?;
                row.push(name);
            }
            files.push(row);
        }
        let m = Manifest { spec: self.spec.clone(), ics: self.ics.clone(), files, resampled: self.resampled.clone() };
        let json = serde_json::to_vec_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&dir.join(MANIFEST_NAME), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let raw = std::fs::read(dir.join(MANIFEST_NAME))?;
        let m: Manifest =
            serde_json::from_slice(&raw).map_err(|e| Error::Config(format!("{}: {e}", MANIFEST_NAME)))?;
        if m.files.len() != m.ics.len() {
            return Err(Error::Config("manifest lists files and initial data of different lengths".into()));
        }
        let mut trajectories = Vec::new();
        for row in &m.files {
            if row.len() != m.spec.mesh_levels.len() {
                return Err(Error::Config("manifest row does not cover every mesh level".into()));
            }
            let mut levels = Vec::new();
            for (name, &n) in row.iter().zip(&m.spec.mesh_levels) {
                let t = Trajectory::load(&dir.join(name))?;
                if t.n_cells() != n || t.n_components() != m.spec.system.n_components() {
                    return Err(Error::Config(format!("{name}: shape does not match level {n}")));
                }
                levels.push(t);
            }
            trajectories.push(levels);
        }
        Ok(TrajectoryDataset { spec: m.spec, ics: m.ics, trajectories, resampled: m.resampled })
    }
}

/// `L + 1` consecutive reference snapshots starting at `start`.
#[derive(Debug, Clone)]
pub struct Window {
    pub instance: usize,
    pub level: usize,
    pub start: usize,
    pub grid: Grid,
    pub dt: f64,
    /// `(L + 1, N, C)`.
    pub snapshots: Array3<f64>,
}

impl Window {
    pub fn initial(&self) -> State {
        State::new(self.snapshots.index_axis(Axis(0), 0).to_owned(), self.start as f64 * self.dt)
    }

    /// Conditioning field built from the window's first snapshot.
    pub fn metadata(&self) -> Result<Array2<f64>> {
        build_metadata(&self.grid, &self.initial())
    }
}

/// Uniform start `s` in `0..=M_l - L`.
pub fn sample_window<R: Rng>(ds: &TrajectoryDataset, i: usize, l: usize, len: usize, rng: &mut R) -> Result<Window> {
    let t = ds.trajectory(i, l)?;
    let m = t.n_snapshots() - 1;
    if m < len || len == 0 {
        return Err(Error::invalid(format!("trajectory ({i}, {l}) has {m} steps, window needs {len}")));
    }
    let start = rng.gen_range(0..=m - len);
    window_at(ds, i, l, start, len)
}

pub fn window_at(ds: &TrajectoryDataset, i: usize, l: usize, start: usize, len: usize) -> Result<Window> {
    let t = ds.trajectory(i, l)?;
    if start + len >= t.n_snapshots() {
        return Err(Error::invalid(format!("window {start}+{len} runs past {} snapshots", t.n_snapshots())));
    }
    Ok(Window {
        instance: i,
        level: l,
        start,
        grid: ds.grid(l)?,
        dt: t.dt,
        snapshots: t.snapshots.slice(s![start..=start + len, .., ..]).to_owned(),
    })
}

/// `(1/K) sum_{k=1..K} dx sum_j (u_hat_k - u_ref_k)^2`, composing the solver's
/// one-step map from the window's first snapshot.
pub fn unrolled_loss<'t>(solver: &NodeSolver<'t>, window: ArrayView3<'_, f64>, dt: f64, unroll: usize) -> Result<Var<'t>> {
    if unroll == 0 || unroll >= window.dim().0 {
        return Err(Error::invalid(format!("unroll depth {unroll} needs 1..{} snapshots", window.dim().0)));
    }
    let tape = solver.tape();
    let dx = solver.grid().dx;
    let mut u = tape.constant(Tensor::from_array2(window.index_axis(Axis(0), 0)));
    let mut total: Option<Var<'t>> = None;
    for k in 1..=unroll {
        u = solver.step(u, dt)?;
        let target = tape.constant(Tensor::from_array2(window.index_axis(Axis(0), k)));
        let term = u.sub(target)?.square().sum().scale(dx);
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    Ok(total.expect("unroll >= 1").scale(1.0 / unroll as f64))
}

/// Unrolled loss of a learned model on one window; the hypernetwork runs once.
pub fn window_loss<'t>(
    tape: &'t Tape,
    model: &Model,
    params: &[Var<'t>],
    bc: BoundaryCondition,
    system: System,
    window: &Window,
    unroll: usize,
) -> Result<Var<'t>> {
    let meta = tape.constant(Tensor::from_array2(window.metadata()?.view()));
    let solver = NodeSolver::learned(tape, &window.grid, bc, system, model, params, meta)?;
    unrolled_loss(&solver, window.snapshots.view(), window.dt, unroll)
}

fn is_invalid_window(e: &Error) -> bool {
    matches!(e, Error::StepDiverged { .. } | Error::NonPhysicalState(_))
}

/// Loss and gradient of one window, or `None` when the rollout left the
/// physical or finite range.
pub fn window_gradient(
    model: &Model,
    bc: BoundaryCondition,
    system: System,
    window: &Window,
    unroll: usize,
) -> Result<Option<(f64, Vec<Tensor>)>> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = model.params.tensors().iter().map(|t| tape.param(t.clone())).collect();
    let loss = match window_loss(&tape, model, &vars, bc, system, window, unroll) {
        Ok(l) => l,
        Err(e) if is_invalid_window(&e) => return Ok(None),
        Err(e) => return Err(e),
    };
    let value = loss.value().item()?;
    if !value.is_finite() {
        return Ok(None);
    }
    let g = tape.backward(loss)?;
    let grads: Vec<Tensor> = vars.iter().map(|v| g.wrt(*v)).collect();
    if grads.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
        return Ok(None);
    }
    Ok(Some((value, grads)))
}

#[derive(Debug, Clone)]
pub struct BatchGradient {
    /// Mean loss over valid windows.
    pub loss: f64,
    /// Mean gradient over valid windows.
    pub grads: Vec<Tensor>,
    pub valid: usize,
    pub invalid: usize,
}

/// Evaluates windows in parallel, one tape each, and merges the gradients in
/// window order.
pub fn batch_gradient(
    model: &Model,
    bc: BoundaryCondition,
    system: System,
    windows: &[Window],
    unroll: usize,
) -> Result<BatchGradient> {
    let results: Vec<Result<Option<(f64, Vec<Tensor>)>>> =
        windows.par_iter().map(|w| window_gradient(model, bc, system, w, unroll)).collect();
    let mut grads: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let (mut loss, mut valid, mut invalid) = (0.0, 0, 0);
    for r in results {
        match r? {
            Some((l, g)) => {
                loss += l;
                valid += 1;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b);
                }
            }
            None => invalid += 1,
        }
    }
    if valid > 0 {
        let inv = 1.0 / valid as f64;
        loss *= inv;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
    }
    Ok(BatchGradient { loss, grads, valid, invalid })
}

/// Mean unrolled loss over `windows` without gradients.
pub fn evaluate_loss(
    model: &Model,
    bc: BoundaryCondition,
    system: System,
    windows: &[Window],
    unroll: usize,
) -> Result<f64> {
    let losses: Vec<Result<Option<f64>>> = windows
        .par_iter()
        .map(|w| {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = model.params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
            match window_loss(&tape, model, &vars, bc, system, w, unroll) {
                Ok(l) => Ok(Some(l.value().item()?)),
                Err(e) if is_invalid_window(&e) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let valid: Vec<f64> = losses.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::TrainingAborted("every evaluation window diverged".into()));
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Window length `L`.
    pub window: usize,
    /// Unroll depth `K`.
    pub unroll: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Abort when more than this fraction of an epoch's windows is invalid.
    pub max_invalid_fraction: f64,
    /// Windows drawn per (instance, level) in each epoch.
    pub windows_per_pair: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window: 20,
            unroll: 4,
            epochs: 100,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            max_invalid_fraction: 0.5,
            windows_per_pair: 1,
        }
    }
}

impl TrainConfig {
    pub fn for_benchmark(b: &Benchmark) -> Self {
        TrainConfig { window: b.training.window, unroll: b.training.unroll, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unroll == 0 || self.unroll > self.window || self.batch_size == 0 || self.windows_per_pair == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!("bad training config: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean unrolled loss of the epoch's valid windows.
    pub loss: f64,
    pub wall_seconds: f64,
    pub windows: usize,
    pub invalid: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Adam,
    pub history: Vec<EpochStats>,
}

/// `per_pair` fresh windows per (instance, level), in shuffled order.
pub fn epoch_windows<R: Rng>(ds: &TrajectoryDataset, len: usize, per_pair: usize, rng: &mut R) -> Result<Vec<Window>> {
    let mut out = Vec::with_capacity(ds.n_instances() * ds.n_levels() * per_pair);
    for i in 0..ds.n_instances() {
        for l in 0..ds.n_levels() {
            for _ in 0..per_pair {
                out.push(sample_window(ds, i, l, len, rng)?);
            }
        }
    }
    out.shuffle(rng);
    Ok(out)
}

/// Trains `model` on `ds`. `on_epoch` sees every finished epoch (for logging
/// and checkpoints) and may stop training by returning an error.
pub fn train_with<F>(cfg: &TrainConfig, ds: &TrajectoryDataset, mut model: Model, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochStats, &Model, &Adam) -> Result<()>,
{
    cfg.validate()?;
    if model.n_components() != ds.spec.system.n_components() {
        return Err(Error::shape("model and dataset disagree on component count"));
    }
    let mut opt = Adam::new(cfg.lr).with_betas(cfg.beta1, cfg.beta2);
    opt.eps = cfg.adam_eps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let clock = Instant::now();
    let (bc, system) = (ds.spec.bc, ds.spec.system);
    for epoch in 1..=cfg.epochs {
        let windows = epoch_windows(ds, cfg.window, cfg.windows_per_pair, &mut rng)?;
        let (mut loss_sum, mut valid, mut invalid) = (0.0, 0usize, 0usize);
        for batch in windows.chunks(cfg.batch_size) {
            let mut bg = batch_gradient(&model, bc, system, batch, cfg.unroll)?;
            invalid += bg.invalid;
            if bg.valid == 0 {
                continue;
            }
            loss_sum += bg.loss * bg.valid as f64;
            valid += bg.valid;
            clip_global_norm(&mut bg.grads, cfg.clip_norm);
            opt.step(model.params.tensors_mut(), &bg.grads)?;
        }
        if invalid as f64 > cfg.max_invalid_fraction * windows.len() as f64 {
            return Err(Error::TrainingAborted(format!(
                "epoch {epoch}: {invalid} of {} windows diverged or left the physical range",
                windows.len()
            )));
        }
        let stats = EpochStats {
            epoch,
            loss: if valid > 0 { loss_sum / valid as f64 } else { f64::NAN },
            wall_seconds: clock.elapsed().as_secs_f64(),
            windows: windows.len(),
            invalid,
        };
        on_epoch(&stats, &model, &opt)?;
        history.push(stats);
    }
    Ok(TrainOutcome { model, optimizer: opt, history })
}

pub fn train(cfg: &TrainConfig, ds: &TrajectoryDataset, model: Model) -> Result<TrainOutcome> {
    train_with(cfg, ds, model, |_, _, _| Ok(()))
}

/// Optimizer moments and progress, stored next to the parameters in a checkpoint.
pub fn optimizer_entries(model: &Model, opt: &Adam, epoch: usize) -> Vec<(String, Tensor)> {
    let mut out = vec![
        ("train.epoch".to_string(), Tensor::scalar(epoch as f64)),
        ("adam.step".to_string(), Tensor::scalar(opt.step_count as f64)),
    ];
    let (m, v) = opt.moments();
    for (k, name) in model.params.names().iter().enumerate() {
        let shape = model.params.tensors()[k].shape().to_vec();
        if let (Some(mk), Some(vk)) = (m.get(k), v.get(k)) {
            out.push((format!("adam.m.{name}"), Tensor::new(shape.clone(), mk.clone()).expect("moment shape")));
            out.push((format!("adam.v.{name}"), Tensor::new(shape, vk.clone()).expect("moment shape")));
        }
    }
    out
}

/// Loss history CSV `epoch,loss,wall_seconds`.
pub fn write_loss_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    write_csv(
        path,
        &["epoch", "loss", "wall_seconds"],
        history.iter().map(|h| vec![Cell::from(h.epoch), Cell::from(h.loss), Cell::from(h.wall_seconds)]),
    )
}

/// Reference snapshot of instance `i`, level `l` as a state at its time.
pub fn snapshot_state(ds: &TrajectoryDataset, i: usize, l: usize, m: usize) -> Result<State> {
    let t = ds.trajectory(i, l)?;
    if m >= t.n_snapshots() {
        return Err(Error::invalid(format!("snapshot {m} of {}", t.n_snapshots())));
    }
    Ok(State::new(t.snapshot(m).to_owned(), m as f64 * t.dt))
}
