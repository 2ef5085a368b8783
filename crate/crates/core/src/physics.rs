//! Physical fluxes, wave-speed bounds, the Rusanov flux and the conservative
//! semi-discrete right-hand side.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{pad_rows, BoundaryCondition, Grid};
use crate::weno::{self, WenoWeights, DEFAULT_EPSILON, DEFAULT_POWER, GHOST_WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum System {
    Burgers,
    ShallowWater { g: f64 },
    Euler { gamma: f64 },
}

impl System {
    pub const fn shallow_water() -> Self {
        System::ShallowWater { g: 1.0 }
    }

    pub const fn euler() -> Self {
        System::Euler { gamma: 1.4 }
    }

    pub fn n_components(&self) -> usize {
        match self {
            System::Burgers => 1,
            System::ShallowWater { .. } => 2,
            System::Euler { .. } => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            System::ShallowWater { g } if !(g > 0.0) => Err(Error::invalid(format!("g must be positive, got {g}"))),
            System::Euler { gamma } if !(gamma > 1.0) => {
                Err(Error::invalid(format!("gamma must exceed 1, got {gamma}")))
            }
            _ => Ok(()),
        }
    }

    pub fn component_names(&self) -> &'static [&'static str] {
        match self {
            System::Burgers => &["u"],
            System::ShallowWater { .. } => &["h", "hv"],
            System::Euler { .. } => &["rho", "rho_u", "E"],
        }
    }

    /// Euler pressure from conserved variables.
    #[inline]
    pub fn pressure(gamma: f64, u: &[f64]) -> f64 {
        (gamma - 1.0) * (u[2] - 0.5 * u[1] * u[1] / u[0])
    }

    #[inline]
    fn check(&self, u: &[f64]) -> Result<()> {
        match *self {
            System::Burgers => Ok(()),
            System::ShallowWater { .. } => {
                if u[0] > 0.0 {
                    Ok(())
                } else {
                    Err(Error::NonPhysicalState(format!("water depth h = {}", u[0])))
                }
            }
            System::Euler { gamma } => {
                let p = Self::pressure(gamma, u);
                if u[0] > 0.0 && p > 0.0 {
                    Ok(())
                } else {
                    Err(Error::NonPhysicalState(format!("density {} pressure {p}", u[0])))
                }
            }
        }
    }

    /// Writes `f(u)` into `out`.
    #[inline]
    pub fn flux_into(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        self.check(u)?;
        match *self {
            System::Burgers => out[0] = 0.5 * u[0] * u[0],
            System::ShallowWater { g } => {
                let (h, hv) = (u[0], u[1]);
                out[0] = hv;
                out[1] = hv * hv / h + 0.5 * g * h * h;
            }
            System::Euler { gamma } => {
                let (rho, mom, e) = (u[0], u[1], u[2]);
                let vel = mom / rho;
                let p = Self::pressure(gamma, u);
                out[0] = mom;
                out[1] = mom * vel + p;
                out[2] = vel * (e + p);
            }
        }
        Ok(())
    }

    /// Spectral radius of the flux Jacobian at `u`.
    #[inline]
    pub fn wave_speed(&self, u: &[f64]) -> Result<f64> {
        self.check(u)?;
        Ok(match *self {
            System::Burgers => u[0].abs(),
            System::ShallowWater { g } => (u[1] / u[0]).abs() + (g * u[0]).sqrt(),
            System::Euler { gamma } => {
                let p = Self::pressure(gamma, u);
                (u[1] / u[0]).abs() + (gamma * p / u[0]).sqrt()
            }
        })
    }

    /// Largest wave speed over all cells of a state.
    pub fn max_speed(&self, u: ArrayView2<'_, f64>) -> Result<f64> {
        let mut best: f64 = 0.0;
        for row in u.rows() {
            let r = row.to_vec();
            best = best.max(self.wave_speed(&r)?);
        }
        Ok(best)
    }
}

pub fn analytical_flux(sys: &System, u: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; sys.n_components()];
    sys.flux_into(u, &mut out)?;
    Ok(out)
}

pub fn max_wave_speed(sys: &System, u_left: &[f64], u_right: &[f64]) -> Result<f64> {
    Ok(sys.wave_speed(u_left)?.max(sys.wave_speed(u_right)?))
}

/// Local Lax-Friedrichs flux written into `out`.
#[inline]
pub fn rusanov_flux_into(sys: &System, um: &[f64], up: &[f64], out: &mut [f64]) -> Result<()> {
    let n = sys.n_components();
    let mut fm = [0.0; 3];
    let mut fp = [0.0; 3];
    sys.flux_into(um, &mut fm[..n])?;
    sys.flux_into(up, &mut fp[..n])?;
    let alpha = max_wave_speed(sys, um, up)?;
    for c in 0..n {
        out[c] = 0.5 * (fm[c] + fp[c] - alpha * (up[c] - um[c]));
    }
    Ok(())
}

pub fn rusanov_flux(sys: &System, u_minus: &[f64], u_plus: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; sys.n_components()];
    rusanov_flux_into(sys, u_minus, u_plus, &mut out)?;
    Ok(out)
}

/// Source of reconstruction weights for every face `0..=N`.
pub trait WeightsProvider {
    /// `state` is `N x C`, `padded` the same field with `GHOST_WIDTH` ghost cells.
    fn weights(&self, bc: BoundaryCondition, state: ArrayView2<'_, f64>, padded: ArrayView2<'_, f64>)
        -> Result<WenoWeights>;
}

/// Source of one numerical flux per face `0..=N`.
pub trait FluxProvider {
    fn fluxes(
        &self,
        sys: &System,
        bc: BoundaryCondition,
        u_minus: ArrayView2<'_, f64>,
        u_plus: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>>;
}

/// Jiang-Shu nonlinear weights, computed per component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassicalWeights {
    pub epsilon: f64,
    pub power: f64,
}

impl Default for ClassicalWeights {
    fn default() -> Self {
        ClassicalWeights { epsilon: DEFAULT_EPSILON, power: DEFAULT_POWER }
    }
}

impl WeightsProvider for ClassicalWeights {
    fn weights(&self, _: BoundaryCondition, _: ArrayView2<'_, f64>, padded: ArrayView2<'_, f64>) -> Result<WenoWeights> {
        weno::classical_weno_weights(padded, self.epsilon, self.power)
    }
}

/// The optimal linear weights on every face.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearWeights;

impl WeightsProvider for LinearWeights {
    fn weights(&self, _: BoundaryCondition, state: ArrayView2<'_, f64>, _: ArrayView2<'_, f64>) -> Result<WenoWeights> {
        Ok(WenoWeights::linear(state.nrows() + 1))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Rusanov;

impl FluxProvider for Rusanov {
    fn fluxes(
        &self,
        sys: &System,
        _: BoundaryCondition,
        u_minus: ArrayView2<'_, f64>,
        u_plus: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let n = sys.n_components();
        let faces = u_minus.nrows();
        let mut out = Array2::zeros((faces, n));
        let mut um = [0.0; 3];
        let mut up = [0.0; 3];
        let mut f = [0.0; 3];
        for j in 0..faces {
            for c in 0..n {
                um[c] = u_minus[[j, c]];
                up[c] = u_plus[[j, c]];
            }
            rusanov_flux_into(sys, &um[..n], &up[..n], &mut f[..n])?;
            for c in 0..n {
                out[[j, c]] = f[c];
            }
        }
        Ok(out)
    }
}

/// Result of one evaluation of the spatial operator.
#[derive(Debug, Clone)]
pub struct RhsEval {
    /// `du/dt`, `N x C`.
    pub rhs: Array2<f64>,
    /// One flux per face, `(N + 1) x C`; row `j` is the left face of cell `j`.
    pub fluxes: Array2<f64>,
}

impl RhsEval {
    pub fn left_boundary_flux(&self) -> Vec<f64> {
        self.fluxes.row(0).to_vec()
    }

    pub fn right_boundary_flux(&self) -> Vec<f64> {
        self.fluxes.row(self.fluxes.nrows() - 1).to_vec()
    }
}

/// Face fluxes from a state: pad, reconstruct with the given weights, evaluate
/// the flux. Under periodic boundaries face 0 takes the value of face N.
pub fn face_fluxes(
    bc: BoundaryCondition,
    sys: &System,
    u: ArrayView2<'_, f64>,
    weights: &dyn WeightsProvider,
    flux: &dyn FluxProvider,
) -> Result<Array2<f64>> {
    let n = u.nrows();
    if u.ncols() != sys.n_components() {
        return Err(Error::shape(format!("state has {} components, system needs {}", u.ncols(), sys.n_components())));
    }
    let padded = pad_rows(u, bc, GHOST_WIDTH)?;
    let cands = weno::candidates(padded.view())?;
    let w = weights.weights(bc, u, padded.view())?;
    let (um, up) = weno::reconstruct(&cands, &w)?;
    let mut f = flux.fluxes(sys, bc, um.view(), up.view())?;
    if f.dim() != (n + 1, sys.n_components()) {
        return Err(Error::shape(format!("flux provider returned {:?}", f.dim())));
    }
    if bc == BoundaryCondition::Periodic {
        let last = f.row(n).to_owned();
        f.row_mut(0).assign(&last);
    }
    Ok(f)
}

/// `du_i/dt = -(f_{i+1/2} - f_{i-1/2}) / dx` with one shared flux per face.
pub fn semi_discrete_rhs(
    grid: &Grid,
    bc: BoundaryCondition,
    sys: &System,
    u: ArrayView2<'_, f64>,
    weights: &dyn WeightsProvider,
    flux: &dyn FluxProvider,
) -> Result<RhsEval> {
    if u.nrows() != grid.n_cells {
        return Err(Error::shape(format!("state has {} cells, grid {}", u.nrows(), grid.n_cells)));
    }
    let fluxes = face_fluxes(bc, sys, u, weights, flux)?;
    let inv_dx = 1.0 / grid.dx;
    let rhs = Array2::from_shape_fn(u.raw_dim(), |(i, c)| -(fluxes[[i + 1, c]] - fluxes[[i, c]]) * inv_dx);
    Ok(RhsEval { rhs, fluxes })
}
