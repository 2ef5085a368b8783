//! SSP-RK3 time stepping, rollouts and the accuracy/conservation diagnostics.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::grid::{BoundaryCondition, Grid, State};
use crate::physics::{semi_discrete_rhs, FluxProvider, RhsEval, System, WeightsProvider};

/// Any entry above this magnitude aborts the rollout.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

/// Net weights of the three stage fluxes in one SSP-RK3 step.
pub const STAGE_FLUX_WEIGHTS: [f64; 3] = [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0];

/// The spatial operator `F(u)` of one configured scheme on one mesh.
pub struct SpatialOperator<'a> {
    pub grid: Grid,
    pub bc: BoundaryCondition,
    pub system: System,
    pub weights: Box<dyn WeightsProvider + 'a>,
    pub flux: Box<dyn FluxProvider + 'a>,
}

impl<'a> SpatialOperator<'a> {
    pub fn new(
        grid: Grid,
        bc: BoundaryCondition,
        system: System,
        weights: Box<dyn WeightsProvider + 'a>,
        flux: Box<dyn FluxProvider + 'a>,
    ) -> Self {
        SpatialOperator { grid, bc, system, weights, flux }
    }

    pub fn eval(&self, u: ArrayView2<'_, f64>) -> Result<RhsEval> {
        semi_discrete_rhs(&self.grid, self.bc, &self.system, u, self.weights.as_ref(), self.flux.as_ref())
    }
}

/// Face fluxes seen by one step.
#[derive(Debug, Clone)]
pub struct StepFluxes {
    /// Stage-weighted fluxes; the step update telescopes exactly over these.
    pub effective: Array2<f64>,
    /// Fluxes of the first stage, i.e. evaluated at the start-of-step state.
    pub initial: Array2<f64>,
}

fn guard(u: &Array2<f64>) -> Result<()> {
    let worst = u.iter().fold(0.0f64, |m, v| if v.is_nan() { f64::INFINITY } else { m.max(v.abs()) });
    if worst > DIVERGENCE_LIMIT {
        return Err(Error::StepDiverged { step: 0, max_abs: worst });
    }
    Ok(())
}

/// One three-stage SSP-RK3 step of `du/dt = F(u)`.
pub fn ssp_rk3_step<F>(state: &State, dt: f64, mut rhs: F) -> Result<(State, StepFluxes)>
where
    F: FnMut(ArrayView2<'_, f64>) -> Result<RhsEval>,
{
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("time step must be positive, got {dt}")));
    }
    let u0 = &state.u;
    let s0 = rhs(u0.view())?;
    let u1 = u0 + &(&s0.rhs * dt);
    guard(&u1)?;
    let s1 = rhs(u1.view())?;
    let u2 = u0 * 0.75 + &((&u1 + &(&s1.rhs * dt)) * 0.25);
    guard(&u2)?;
    let s2 = rhs(u2.view())?;
    let u3 = u0 * (1.0 / 3.0) + &((&u2 + &(&s2.rhs * dt)) * (2.0 / 3.0));
    guard(&u3)?;
    let [a, b, c] = STAGE_FLUX_WEIGHTS;
    let effective = &s0.fluxes * a + &(&s1.fluxes * b) + &(&s2.fluxes * c);
    Ok((State::new(u3, state.t + dt), StepFluxes { effective, initial: s0.fluxes }))
}

/// Fluxes through the two domain-boundary faces during one step.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFluxes {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl BoundaryFluxes {
    fn from_faces(f: &Array2<f64>) -> Self {
        BoundaryFluxes { left: f.row(0).to_vec(), right: f.row(f.nrows() - 1).to_vec() }
    }
}

/// Which logged boundary flux enters the conservation remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FluxLog {
    /// Stage-weighted flux actually used by the update.
    Effective,
    /// Flux evaluated at the state of time level `t_m`.
    TimeLevel,
}

#[derive(Debug, Clone)]
pub struct StepFailure {
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct RolloutRecord {
    /// States at `t_m = m * save_every * dt`.
    pub snapshots: Vec<State>,
    /// Per step, effective boundary fluxes.
    pub boundary_flux_log: Vec<BoundaryFluxes>,
    /// Per step, boundary fluxes at the start-of-step state.
    pub time_level_flux_log: Vec<BoundaryFluxes>,
    pub dt: f64,
    pub dx: f64,
    pub save_every: usize,
    pub failure: Option<StepFailure>,
}

impl RolloutRecord {
    pub fn n_steps(&self) -> usize {
        self.boundary_flux_log.len()
    }

    pub fn last(&self) -> &State {
        self.snapshots.last().expect("record holds the initial state")
    }

    pub fn into_result(self) -> Result<Self> {
        match &self.failure {
            None => Ok(self),
            Some(f) => Err(Error::StepDiverged {
                step: f.step,
                max_abs: self.last().u.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            }),
        }
    }

    /// Step index of snapshot `m`.
    pub fn snapshot_step(&self, m: usize) -> usize {
        m * self.save_every
    }
}

/// Advances `initial` by `n_steps` steps of size `dt`, keeping every state.
pub fn rollout(op: &SpatialOperator<'_>, initial: &State, n_steps: usize, dt: f64) -> Result<RolloutRecord> {
    rollout_strided(op, initial, n_steps, dt, 1)
}

/// Like [`rollout`], but keeps only every `save_every`-th state (plus the last
/// one when `n_steps` is not a multiple). Boundary fluxes are logged every step.
pub fn rollout_strided(
    op: &SpatialOperator<'_>,
    initial: &State,
    n_steps: usize,
    dt: f64,
    save_every: usize,
) -> Result<RolloutRecord> {
    if save_every == 0 {
        return Err(Error::invalid("save_every must be at least 1"));
    }
    if initial.n_cells() != op.grid.n_cells || initial.n_components() != op.system.n_components() {
        return Err(Error::shape(format!(
            "initial state {:?} does not fit {} cells of {:?}",
            initial.u.dim(),
            op.grid.n_cells,
            op.system
        )));
    }
    let mut rec = RolloutRecord {
        snapshots: vec![initial.clone()],
        boundary_flux_log: Vec::with_capacity(n_steps),
        time_level_flux_log: Vec::with_capacity(n_steps),
        dt,
        dx: op.grid.dx,
        save_every,
        failure: None,
    };
    let mut state = initial.clone();
    for step in 0..n_steps {
        match ssp_rk3_step(&state, dt, |u| op.eval(u)) {
            Ok((next, fl)) => {
                rec.boundary_flux_log.push(BoundaryFluxes::from_faces(&fl.effective));
                rec.time_level_flux_log.push(BoundaryFluxes::from_faces(&fl.initial));
                state = next;
                if (step + 1) % save_every == 0 {
                    rec.snapshots.push(state.clone());
                }
            }
            Err(e @ (Error::StepDiverged { .. } | Error::NonPhysicalState(_))) => {
                rec.failure = Some(StepFailure { step, message: e.to_string() });
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if rec.failure.is_none() && n_steps % save_every != 0 {
        rec.snapshots.push(state);
    }
    Ok(rec)
}

/// Number of steps and step size landing exactly on `t_final` with
/// `dt <= max_dt`.
pub fn steps_to(t_final: f64, max_dt: f64) -> Result<(usize, f64)> {
    if !(t_final >= 0.0) || !(max_dt > 0.0) {
        return Err(Error::invalid(format!("bad horizon {t_final} / step {max_dt}")));
    }
    if t_final == 0.0 {
        return Ok((0, max_dt));
    }
    let n = (t_final / max_dt - 1e-9).ceil().max(1.0) as usize;
    Ok((n, t_final / n as f64))
}

/// Sum with Neumaier compensation.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `C(q)(t_l)` for every stored snapshot of `record`, for one component.
pub fn conservation_remainder(record: &RolloutRecord, component: usize, log: FluxLog) -> Vec<f64> {
    let fluxes = match log {
        FluxLog::Effective => &record.boundary_flux_log,
        FluxLog::TimeLevel => &record.time_level_flux_log,
    };
    let q0 = record.snapshots[0].u.column(component);
    let mut out = Vec::with_capacity(record.snapshots.len());
    for (m, snap) in record.snapshots.iter().enumerate() {
        let step = if m + 1 == record.snapshots.len() && record.failure.is_none() {
            record.n_steps().min(record.snapshot_step(m))
        } else {
            record.snapshot_step(m)
        };
        let step = step.min(fluxes.len());
        let mass_change = compensated_sum(
            snap.u.column(component).iter().zip(q0.iter()).map(|(a, b)| (a - b) * record.dx),
        );
        let boundary = compensated_sum(
            fluxes[..step].iter().map(|f| (f.left[component] - f.right[component]) * record.dt),
        );
        out.push((mass_change - boundary).abs());
    }
    out
}

/// `max_t |sum_j q_j dx|`, the scale for relative conservation checks.
pub fn mass_scale(record: &RolloutRecord, component: usize) -> f64 {
    record
        .snapshots
        .iter()
        .map(|s| compensated_sum(s.u.column(component).iter().map(|v| v * record.dx)).abs())
        .fold(0.0, f64::max)
}

/// Snapshot times of a record.
pub fn snapshot_times(record: &RolloutRecord) -> Vec<f64> {
    record.snapshots.iter().map(|s| s.t).collect()
}

/// Block-averages a fine field down to `n_coarse` cells.
pub fn coarsen(fine: ArrayView2<'_, f64>, n_coarse: usize) -> Result<Array2<f64>> {
    let n_fine = fine.nrows();
    if n_coarse == 0 || n_fine % n_coarse != 0 {
        return Err(Error::invalid(format!("cannot coarsen {n_fine} cells to {n_coarse}")));
    }
    let r = n_fine / n_coarse;
    let mut out = Array2::zeros((n_coarse, fine.ncols()));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        for c in 0..fine.ncols() {
            row[c] = (0..r).map(|k| fine[[i * r + k, c]]).sum::<f64>() / r as f64;
        }
    }
    Ok(out)
}

/// Cell averages of piecewise-constant `fine` data over `n_coarse` equal
/// cells of the same interval. Any `n_coarse <= n_fine` works; overlaps are
/// computed in integer units of `1 / (n_fine * n_coarse)`.
pub fn remap_conservative(fine: ArrayView2<'_, f64>, n_coarse: usize) -> Result<Array2<f64>> {
    let n_fine = fine.nrows();
    if n_coarse == 0 || n_coarse > n_fine {
        return Err(Error::invalid(format!("cannot remap {n_fine} cells to {n_coarse}")));
    }
    if n_fine % n_coarse == 0 {
        return coarsen(fine, n_coarse);
    }
    let mut out = Array2::zeros((n_coarse, fine.ncols()));
    for i in 0..n_coarse {
        let (lo, hi) = (i * n_fine, (i + 1) * n_fine);
        for k in lo / n_coarse..=((hi - 1) / n_coarse).min(n_fine - 1) {
            let overlap = hi.min((k + 1) * n_coarse).saturating_sub(lo.max(k * n_coarse));
            let w = overlap as f64 / n_fine as f64;
            for c in 0..fine.ncols() {
                out[[i, c]] += w * fine[[k, c]];
            }
        }
    }
    Ok(out)
}

/// MSE per mesh level and refinement orders between consecutive levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub mse: Vec<f64>,
    /// `orders[k]` compares level `k` with level `k + 1`.
    pub orders: Vec<f64>,
}

pub fn mse(prediction: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>) -> Result<f64> {
    if prediction.dim() != reference.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", prediction.dim(), reference.dim())));
    }
    let n = prediction.len() as f64;
    Ok(prediction.iter().zip(reference.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Refinement orders under halved mesh size, on the RMSE scale:
/// `p = log2(E_h / E_{h/2}) / 2` with `E` the MSE.
pub fn orders_from_mse(mse: &[f64]) -> Vec<f64> {
    mse.windows(2).map(|w| 0.5 * (w[0] / w[1]).log2()).collect()
}

pub fn mse_and_order(predictions: &[Array2<f64>], references: &[Array2<f64>]) -> Result<Diagnostics> {
    if predictions.len() != references.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    let mse = predictions
        .iter()
        .zip(references)
        .map(|(p, r)| mse(p.view(), r.view()))
        .collect::<Result<Vec<_>>>()?;
    let orders = orders_from_mse(&mse);
    Ok(Diagnostics { mse, orders })
}
