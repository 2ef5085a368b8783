//! Uniform 1D meshes, cell-average states and ghost-cell padding.
//!
//! Cells are indexed `0..N`. Faces are indexed `0..=N`, face `j` being the
//! left face of cell `j` (so face `j + 1` sits at `x_{j+1/2}`).

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest mesh that still leaves an interior once a WENO5 stencil is laid down.
pub const MIN_CELLS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub x_lo: f64,
    pub x_hi: f64,
    pub n_cells: usize,
    pub dx: f64,
    pub x_mid: Array1<f64>,
}

impl Grid {
    pub fn new(x_lo: f64, x_hi: f64, n_cells: usize) -> Result<Self> {
        if !(x_lo.is_finite() && x_hi.is_finite()) || x_hi <= x_lo {
            return Err(Error::InvalidGrid(format!(
                "domain must be increasing, got ({x_lo}, {x_hi})"
            )));
        }
        if n_cells < MIN_CELLS {
            return Err(Error::InvalidGrid(format!(
                "need at least {MIN_CELLS} cells, got {n_cells}"
            )));
        }
        let dx = (x_hi - x_lo) / n_cells as f64;
        let x_mid = Array1::from_shape_fn(n_cells, |i| x_lo + (i as f64 + 0.5) * dx);
        Ok(Grid { x_lo, x_hi, n_cells, dx, x_mid })
    }

    pub fn length(&self) -> f64 {
        self.x_hi - self.x_lo
    }

    /// Position of face `j` (left face of cell `j`).
    pub fn face(&self, j: usize) -> f64 {
        self.x_lo + j as f64 * self.dx
    }

    /// Cell centers mapped affinely so that `x_lo -> -1` and `x_hi -> 1`.
    pub fn normalized_centers(&self) -> Array1<f64> {
        let len = self.length();
        self.x_mid.mapv(|x| 2.0 * (x - self.x_lo) / len - 1.0)
    }
}

/// Shorthand for [`Grid::new`].
pub fn make_grid(x_lo: f64, x_hi: f64, n_cells: usize) -> Result<Grid> {
    Grid::new(x_lo, x_hi, n_cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryCondition {
    Periodic,
    /// Zero-gradient ghost cells (transmissive).
    NoFlux,
}

impl BoundaryCondition {
    pub fn code(self) -> u32 {
        match self {
            BoundaryCondition::Periodic => 0,
            BoundaryCondition::NoFlux => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(BoundaryCondition::Periodic),
            1 => Some(BoundaryCondition::NoFlux),
            _ => None,
        }
    }
}

/// Cell averages (`N x n_components`) at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub u: Array2<f64>,
    pub t: f64,
}

impl State {
    pub fn new(u: Array2<f64>, t: f64) -> Self {
        State { u, t }
    }

    pub fn n_cells(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().all(|v| v.is_finite())
    }

    /// `sum_i u_i dx` per component.
    pub fn totals(&self, dx: f64) -> Vec<f64> {
        self.u.columns().into_iter().map(|c| c.sum() * dx).collect()
    }
}

/// Interior cell feeding padded row `padded` of a field with `n` cells and
/// `width` ghost cells per side.
#[inline]
pub fn ghost_source(bc: BoundaryCondition, n: usize, width: usize, padded: usize) -> usize {
    let i = padded as isize - width as isize;
    match bc {
        BoundaryCondition::Periodic => i.rem_euclid(n as isize) as usize,
        BoundaryCondition::NoFlux => i.clamp(0, n as isize - 1) as usize,
    }
}

/// Row-index map of a padded field, reused by the autodiff gather.
pub fn ghost_index_map(bc: BoundaryCondition, n: usize, width: usize) -> Vec<usize> {
    (0..n + 2 * width).map(|p| ghost_source(bc, n, width, p)).collect()
}

/// Pads the rows of `u` with `width` ghost cells on each side.
pub fn pad_rows(u: ArrayView2<'_, f64>, bc: BoundaryCondition, width: usize) -> Result<Array2<f64>> {
    let n = u.nrows();
    if width == 0 {
        return Err(Error::invalid("ghost width must be at least 1"));
    }
    if n < width {
        return Err(Error::invalid(format!("{n} cells cannot feed {width} ghost cells")));
    }
    let c = u.ncols();
    Ok(Array2::from_shape_fn((n + 2 * width, c), |(p, k)| {
        u[[ghost_source(bc, n, width, p), k]]
    }))
}

pub fn pad_ghost(state: &State, bc: BoundaryCondition, width: usize) -> Result<Array2<f64>> {
    pad_rows(state.u.view(), bc, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s, Array2};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn column(v: &[f64]) -> State {
        State::new(Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap(), 0.0)
    }

    #[test]
    fn rejects_small_or_inverted_grids() {
        assert!(make_grid(0.0, 2.0 * PI, 4).is_err());
        assert!(make_grid(1.0, 1.0, 32).is_err());
        assert!(make_grid(1.0, 0.0, 32).is_err());
    }

    #[test]
    fn grid_spacing() {
        let g = make_grid(0.0, 2.0 * PI, 32).unwrap();
        assert!((g.dx - 0.196_349_540_849_362_08).abs() < 1e-15);
        assert!((g.x_mid[0] - 0.098_174_770_424_681_04).abs() < 1e-15);
        let g = make_grid(-5.0, 5.0, 64).unwrap();
        assert_eq!(g.dx, 0.15625);
        for w in g.x_mid.windows(2) {
            assert!(((w[1] - w[0]) - g.dx).abs() <= 1e-12 * g.dx);
        }
        assert_eq!(g.x_mid[0], -5.0 + g.dx / 2.0);
    }

    #[test]
    fn pad_examples() {
        let st = column(&[1.0, 2.0, 3.0, 4.0]);
        let p = pad_ghost(&st, BoundaryCondition::Periodic, 2).unwrap();
        assert_eq!(p.column(0).to_vec(), vec![3.0, 4.0, 1.0, 2.0, 3.0, 4.0, 1.0, 2.0]);
        let p = pad_ghost(&st, BoundaryCondition::NoFlux, 2).unwrap();
        assert_eq!(p.column(0).to_vec(), vec![1.0, 1.0, 1.0, 2.0, 3.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn pad_constant_and_systems() {
        let u = Array2::from_elem((5, 3), 2.5);
        for bc in [BoundaryCondition::Periodic, BoundaryCondition::NoFlux] {
            let p = pad_rows(u.view(), bc, 3).unwrap();
            assert!(p.iter().all(|&v| v == 2.5));
        }
        let u = array![[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]];
        let p = pad_rows(u.view(), BoundaryCondition::NoFlux, 1).unwrap();
        assert_eq!(p, array![[1.0, 10.0], [1.0, 10.0], [2.0, 20.0], [3.0, 30.0], [3.0, 30.0]]);
    }

    #[test]
    fn pad_rejects_bad_width() {
        let st = column(&[1.0, 2.0]);
        assert!(pad_ghost(&st, BoundaryCondition::Periodic, 0).is_err());
        assert!(pad_ghost(&st, BoundaryCondition::Periodic, 3).is_err());
    }

    proptest! {
        #[test]
        fn padding_keeps_interior(v in prop::collection::vec(-10.0f64..10.0, 3..40), w in 1usize..4) {
            prop_assume!(v.len() >= w);
            let st = column(&v);
            for bc in [BoundaryCondition::Periodic, BoundaryCondition::NoFlux] {
                let p = pad_ghost(&st, bc, w).unwrap();
                prop_assert_eq!(p.slice(s![w..w + v.len(), ..]), st.u.view());
            }
        }

        #[test]
        fn periodic_padding_is_shift_equivariant(
            v in prop::collection::vec(-10.0f64..10.0, 4..30), shift in 0usize..30, w in 1usize..4
        ) {
            let n = v.len();
            prop_assume!(n >= w);
            let shift = shift % n;
            let shifted: Vec<f64> = (0..n).map(|i| v[(i + n - shift) % n]).collect();
            let p = pad_ghost(&column(&v), BoundaryCondition::Periodic, w).unwrap();
            let ps = pad_ghost(&column(&shifted), BoundaryCondition::Periodic, w).unwrap();
            // Shifting the padded field by `shift` reproduces the padded shifted field
            // wherever both index windows are defined.
            for q in shift..n + 2 * w {
                prop_assert_eq!(ps[[q, 0]], p[[q - shift, 0]]);
            }
        }
    }
}
