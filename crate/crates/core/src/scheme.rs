//! Scheme selection and the two solver paths.
//!
//! The fast path plugs weight and flux providers into
//! [`crate::physics::semi_discrete_rhs`]. The differentiable path
//! ([`NodeSolver`]) rebuilds padding, candidates, weights, fluxes and SSP-RK3 on
//! a [`Tape`] from the same tap tables, so the two agree to round-off.

use std::rc::Rc;

use ndarray::{Array2, Array3, ArrayView2};

use crate::autodiff::{Padding, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::grid::{ghost_index_map, BoundaryCondition, Grid, State};
use crate::networks::{
    build_metadata, fluxnet_forward, fluxnet_tape, hypernet_tape, FluxNetConfig, Model, ParamStore,
    TargetNetParams, TargetVars,
};
use crate::physics::{ClassicalWeights, FluxProvider, LinearWeights, Rusanov, System, WeightsProvider};
use crate::stepper::{rollout_strided, RolloutRecord, SpatialOperator, DIVERGENCE_LIMIT};
use crate::weno::{
    candidate_taps, smoothness_taps, Side, WeightSource, WenoWeights, CURVATURE_WEIGHT, DEFAULT_EPSILON,
    DEFAULT_POWER, GHOST_WIDTH, LINEAR_WEIGHTS, SLOPE_WEIGHT,
};

/// Cell whose logits set the weights of face `j` (of `n + 1`). Cell `i` owns its
/// right face `i + 1`; face 0 borrows from cell `N - 1` (periodic, the same
/// physical face as face N) or cell 0 (no-flux).
pub fn weight_cell_of_face(bc: BoundaryCondition, n: usize, j: usize) -> usize {
    match (j, bc) {
        (0, BoundaryCondition::Periodic) => n - 1,
        (0, BoundaryCondition::NoFlux) => 0,
        _ => j - 1,
    }
}

fn softmax3(z: &[f64]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    e.map(|v| v / s)
}

/// Weights from a generated target network, one row shared by all components.
#[derive(Debug, Clone)]
pub struct LearnedWeights {
    pub target: TargetNetParams,
}

impl LearnedWeights {
    /// Turns `N x 6` logits into face weights.
    pub fn weights_from_logits(bc: BoundaryCondition, logits: ArrayView2<'_, f64>) -> WenoWeights {
        let n = logits.nrows();
        let mut w_minus = Array3::zeros((n + 1, 1, 3));
        let mut w_plus = Array3::zeros((n + 1, 1, 3));
        for j in 0..=n {
            let row = logits.row(weight_cell_of_face(bc, n, j));
            let row = row.as_slice().expect("standard layout");
            let (m, p) = (softmax3(&row[0..3]), softmax3(&row[3..6]));
            for k in 0..3 {
                w_minus[[j, 0, k]] = m[k];
                w_plus[[j, 0, k]] = p[k];
            }
        }
        WenoWeights { w_minus, w_plus, source: WeightSource::Learned }
    }
}

impl WeightsProvider for LearnedWeights {
    fn weights(&self, bc: BoundaryCondition, state: ArrayView2<'_, f64>, _: ArrayView2<'_, f64>) -> Result<WenoWeights> {
        let z = self.target.logits(state, bc.into())?;
        Ok(Self::weights_from_logits(bc, z.view()))
    }
}

/// FluxNet as a flux provider.
#[derive(Debug, Clone)]
pub struct LearnedFlux {
    pub cfg: FluxNetConfig,
    pub params: ParamStore,
}

impl FluxProvider for LearnedFlux {
    fn fluxes(
        &self,
        _: &System,
        bc: BoundaryCondition,
        u_minus: ArrayView2<'_, f64>,
        u_plus: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        fluxnet_forward(&self.cfg, &self.params, bc, u_minus, u_plus)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    /// Classical WENO5 with Jiang-Shu weights.
    Classical { epsilon: f64, power: f64 },
    /// Fixed optimal linear weights `d_k`.
    Linear,
    /// Hyper-CFCNN, or Hyper-CFCNN-F when the model carries a FluxNet.
    Learned(Model),
}

impl Scheme {
    pub fn classical() -> Self {
        Scheme::Classical { epsilon: DEFAULT_EPSILON, power: DEFAULT_POWER }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Classical { .. } => "weno5",
            Scheme::Linear => "linear",
            Scheme::Learned(m) if m.has_flux() => "hcfcnn-f",
            Scheme::Learned(_) => "hcfcnn",
        }
    }

    /// Configures the spatial operator for one rollout. Learned schemes run the
    /// hypernetwork here, once, on the rollout's initial state.
    pub fn operator(
        &self,
        grid: &Grid,
        bc: BoundaryCondition,
        system: System,
        initial: &State,
    ) -> Result<SpatialOperator<'static>> {
        system.validate()?;
        let (weights, flux): (Box<dyn WeightsProvider>, Box<dyn FluxProvider>) = match self {
            Scheme::Classical { epsilon, power } => {
                (Box::new(ClassicalWeights { epsilon: *epsilon, power: *power }), Box::new(Rusanov))
            }
            Scheme::Linear => (Box::new(LinearWeights), Box::new(Rusanov)),
            Scheme::Learned(model) => {
                if model.n_components() != system.n_components() {
                    return Err(Error::shape(format!(
                        "model built for {} components, system has {}",
                        model.n_components(),
                        system.n_components()
                    )));
                }
                let target = model.generate(grid, bc, initial)?;
                let flux: Box<dyn FluxProvider> = match &model.flux {
                    Some(cfg) => Box::new(LearnedFlux { cfg: *cfg, params: model.flux_store() }),
                    None => Box::new(Rusanov),
                };
                (Box::new(LearnedWeights { target }), flux)
            }
        };
        Ok(SpatialOperator::new(grid.clone(), bc, system, weights, flux))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn rollout(
        &self,
        grid: &Grid,
        bc: BoundaryCondition,
        system: System,
        initial: &State,
        n_steps: usize,
        dt: f64,
        save_every: usize,
    ) -> Result<RolloutRecord> {
        let op = self.operator(grid, bc, system, initial)?;
        rollout_strided(&op, initial, n_steps, dt, save_every)
    }
}

/// Weight rule of the differentiable solver.
#[derive(Clone)]
pub enum NodeWeights<'t> {
    Classical { epsilon: f64, power: f64 },
    Linear,
    Learned(TargetVars<'t>),
}

#[derive(Clone)]
pub enum NodeFlux<'t> {
    Rusanov,
    Learned(FluxNetConfig, Vec<Var<'t>>),
}

/// SSP-RK3 finite-volume solver on a tape.
pub struct NodeSolver<'t> {
    tape: &'t Tape,
    grid: Grid,
    bc: BoundaryCondition,
    system: System,
    weights: NodeWeights<'t>,
    flux: NodeFlux<'t>,
    pad_index: Rc<Vec<usize>>,
}

fn check_positive(v: &Var<'_>, what: &str) -> Result<()> {
    if let Some(bad) = v.value().data().iter().find(|&&x| !(x > 0.0)) {
        return Err(Error::NonPhysicalState(format!("{what} = {bad}")));
    }
    Ok(())
}

impl<'t> NodeSolver<'t> {
    pub fn new(
        tape: &'t Tape,
        grid: &Grid,
        bc: BoundaryCondition,
        system: System,
        weights: NodeWeights<'t>,
        flux: NodeFlux<'t>,
    ) -> Result<Self> {
        system.validate()?;
        let n = grid.n_cells;
        let c = system.n_components();
        let rows = ghost_index_map(bc, n, GHOST_WIDTH);
        let pad_index = Rc::new(rows.iter().flat_map(|&r| (0..c).map(move |k| r * c + k)).collect());
        Ok(NodeSolver { tape, grid: grid.clone(), bc, system, weights, flux, pad_index })
    }

    /// Learned solver: runs the hypernetwork once on `metadata`. `params` are the
    /// model's parameter nodes in store order.
    pub fn learned(
        tape: &'t Tape,
        grid: &Grid,
        bc: BoundaryCondition,
        system: System,
        model: &Model,
        params: &[Var<'t>],
        metadata: Var<'t>,
    ) -> Result<Self> {
        if params.len() != model.params.len() {
            return Err(Error::shape(format!("{} parameter nodes for {} entries", params.len(), model.params.len())));
        }
        let (hv, fv) = model.split_vars(params);
        let target = hypernet_tape(&model.hyper, hv, metadata, bc)?;
        let flux = match &model.flux {
            Some(cfg) => NodeFlux::Learned(*cfg, fv.to_vec()),
            None => NodeFlux::Rusanov,
        };
        NodeSolver::new(tape, grid, bc, system, NodeWeights::Learned(target), flux)
    }

    /// Metadata node for `initial`, as used by [`NodeSolver::learned`].
    pub fn metadata(tape: &'t Tape, grid: &Grid, initial: &State) -> Result<Var<'t>> {
        Ok(tape.constant(Tensor::from_array2(build_metadata(grid, initial)?.view())))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn taps(t: [(usize, f64); 3]) -> Rc<Vec<(usize, f64)>> {
        Rc::new(t.to_vec())
    }

    fn classical_side(&self, padded: Var<'t>, side: Side, eps: f64, r: f64) -> Result<[Var<'t>; 3]> {
        let faces = self.grid.n_cells + 1;
        let mut raw = Vec::with_capacity(3);
        for k in 0..3 {
            let (curv, slope) = smoothness_taps(side, k);
            let a = padded.stencil(Self::taps(curv), faces)?.square().scale(CURVATURE_WEIGHT);
            let b = padded.stencil(Self::taps(slope), faces)?.square().scale(SLOPE_WEIGHT);
            let beta = a.add(b)?;
            raw.push(beta.offset(eps).powf(r).recip().scale(LINEAR_WEIGHTS[k]));
        }
        let total = raw[0].add(raw[1])?.add(raw[2])?;
        Ok([raw[0].div(total)?, raw[1].div(total)?, raw[2].div(total)?])
    }

    /// Per-face weights `(w^-_k, w^+_k)`, each `(N+1) x 1` (shared) or `(N+1) x C`.
    fn face_weights(&self, u: Var<'t>, padded: Var<'t>) -> Result<([Var<'t>; 3], [Var<'t>; 3])> {
        let n = self.grid.n_cells;
        match &self.weights {
            NodeWeights::Classical { epsilon, power } => Ok((
                self.classical_side(padded, Side::Left, *epsilon, *power)?,
                self.classical_side(padded, Side::Right, *epsilon, *power)?,
            )),
            NodeWeights::Linear => {
                let d = LINEAR_WEIGHTS.map(|v| self.tape.constant(Tensor::scalar(v)));
                Ok((d, d))
            }
            NodeWeights::Learned(target) => {
                let z = target.logits(u, Padding::from(self.bc))?;
                let cells: Vec<usize> = (0..=n).map(|j| weight_cell_of_face(self.bc, n, j)).collect();
                let zf = z.rows(&cells)?;
                let wm = zf.cols(0..3)?.softmax_rows()?;
                let wp = zf.cols(3..6)?.softmax_rows()?;
                Ok((
                    [wm.col(0)?, wm.col(1)?, wm.col(2)?],
                    [wp.col(0)?, wp.col(1)?, wp.col(2)?],
                ))
            }
        }
    }

    fn reconstruct_side(&self, padded: Var<'t>, side: Side, w: &[Var<'t>; 3]) -> Result<Var<'t>> {
        let faces = self.grid.n_cells + 1;
        let mut acc: Option<Var<'t>> = None;
        for k in 0..3 {
            let q = padded.stencil(Self::taps(candidate_taps(side, k)), faces)?;
            let term = q.mul(w[k])?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(term)?,
            });
        }
        Ok(acc.expect("three terms"))
    }

    fn physical_flux(&self, u: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        match self.system {
            System::Burgers => Ok((u.square().scale(0.5), u.abs())),
            System::ShallowWater { g } => {
                let h = u.col(0)?;
                let hv = u.col(1)?;
                check_positive(&h, "water depth h")?;
                let v = hv.div(h)?;
                let f1 = hv.mul(hv)?.div(h)?.add(h.mul(h)?.scale(0.5 * g))?;
                let speed = v.abs().add(h.scale(g).sqrt())?;
                Ok((Var::concat_cols(&[hv, f1])?, speed))
            }
            System::Euler { gamma } => {
                let rho = u.col(0)?;
                let mom = u.col(1)?;
                let e = u.col(2)?;
                check_positive(&rho, "density")?;
                let vel = mom.div(rho)?;
                let p = e.sub(mom.mul(mom)?.scale(0.5).div(rho)?)?.scale(gamma - 1.0);
                check_positive(&p, "pressure")?;
                let f1 = mom.mul(vel)?.add(p)?;
                let f2 = vel.mul(e.add(p)?)?;
                let speed = vel.abs().add(p.scale(gamma).div(rho)?.sqrt())?;
                Ok((Var::concat_cols(&[mom, f1, f2])?, speed))
            }
        }
    }

    /// One flux per face, `(N + 1) x C`, before the periodic identification.
    fn numerical_flux(&self, um: Var<'t>, up: Var<'t>) -> Result<Var<'t>> {
        match &self.flux {
            NodeFlux::Rusanov => {
                let (fm, sm) = self.physical_flux(um)?;
                let (fp, sp) = self.physical_flux(up)?;
                let alpha = sm.max(sp)?;
                Ok(fm.add(fp)?.sub(up.sub(um)?.mul(alpha)?)?.scale(0.5))
            }
            NodeFlux::Learned(cfg, params) => fluxnet_tape(cfg, params, self.bc, um, up),
        }
    }

    /// Face fluxes `(N + 1) x C` for the state node `u` (`N x C`).
    pub fn face_fluxes(&self, u: Var<'t>) -> Result<Var<'t>> {
        let n = self.grid.n_cells;
        let c = self.system.n_components();
        if u.dims2()? != (n, c) {
            return Err(Error::shape(format!("state node {:?}, expected {n} x {c}", u.shape())));
        }
        let padded = u.gather(Rc::clone(&self.pad_index), vec![n + 2 * GHOST_WIDTH, c])?;
        let (wm, wp) = self.face_weights(u, padded)?;
        let um = self.reconstruct_side(padded, Side::Left, &wm)?;
        let up = self.reconstruct_side(padded, Side::Right, &wp)?;
        let f = self.numerical_flux(um, up)?;
        match self.bc {
            BoundaryCondition::Periodic => {
                let rows: Vec<usize> = std::iter::once(n).chain(1..=n).collect();
                f.rows(&rows)
            }
            BoundaryCondition::NoFlux => Ok(f),
        }
    }

    /// `du/dt` and the face fluxes it was built from.
    pub fn rhs(&self, u: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let f = self.face_fluxes(u)?;
        let diff = f.stencil(Rc::new(vec![(1, 1.0), (0, -1.0)]), self.grid.n_cells)?;
        Ok((diff.scale(-1.0 / self.grid.dx), f))
    }

    fn guard(v: &Var<'t>) -> Result<()> {
        let val = v.value();
        let worst = val.data().iter().fold(0.0f64, |m, x| if x.is_nan() { f64::INFINITY } else { m.max(x.abs()) });
        if worst > DIVERGENCE_LIMIT {
            return Err(Error::StepDiverged { step: 0, max_abs: worst });
        }
        Ok(())
    }

    /// One SSP-RK3 step.
    pub fn step(&self, u: Var<'t>, dt: f64) -> Result<Var<'t>> {
        let (r0, _) = self.rhs(u)?;
        let u1 = u.add(r0.scale(dt))?;
        Self::guard(&u1)?;
        let (r1, _) = self.rhs(u1)?;
        let u2 = u.scale(0.75).add(u1.add(r1.scale(dt))?.scale(0.25))?;
        Self::guard(&u2)?;
        let (r2, _) = self.rhs(u2)?;
        let u3 = u.scale(1.0 / 3.0).add(u2.add(r2.scale(dt))?.scale(2.0 / 3.0))?;
        Self::guard(&u3)?;
        Ok(u3)
    }
}
