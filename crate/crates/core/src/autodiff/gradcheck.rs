use rayon::prelude::*;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Entries whose analytic and numeric gradients both stay below this are
    /// compared in absolute terms only.
    pub floor: f64,
    /// Check at most this many evenly spread entries per parameter.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, floor: 1e-8, max_entries: None }
    }
}

#[derive(Debug, Clone)]
pub struct EntryCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl EntryCheck {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 { 0.0 } else { (self.analytic - self.numeric).abs() / scale }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
    pub floor: f64,
}

impl GradCheckReport {
    /// Worst relative error among entries above the floor.
    pub fn max_rel_error(&self) -> f64 {
        self.significant().map(EntryCheck::rel_error).fold(0.0, f64::max)
    }

    /// Worst absolute error among entries at or below the floor.
    pub fn max_abs_error_below_floor(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.analytic.abs().max(e.numeric.abs()) <= self.floor)
            .map(|e| (e.analytic - e.numeric).abs())
            .fold(0.0, f64::max)
    }

    pub fn significant(&self) -> impl Iterator<Item = &EntryCheck> {
        let floor = self.floor;
        self.entries.iter().filter(move |e| e.analytic.abs().max(e.numeric.abs()) > floor)
    }

    pub fn worst(&self) -> Option<&EntryCheck> {
        self.significant().max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()))
    }
}

/// Loss closure: builds a scalar from parameter nodes on the given tape.
pub trait LossFn: Sync {
    fn loss<'t>(&self, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>>;
}

impl<F> LossFn for F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    fn loss<'t>(&self, tape: &'t Tape, params: &[Var<'t>]) -> Result<Var<'t>> {
        self(tape, params)
    }
}

/// Pins a closure to the higher-ranked signature [`LossFn`] expects.
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    f
}

/// Loss value and gradients with respect to every parameter.
pub fn value_and_grad<L: LossFn + ?Sized>(f: &L, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f.loss(&tape, &vars)?;
    let value = loss.value().item()?;
    let g = tape.backward(loss)?;
    Ok((value, vars.iter().map(|v| g.wrt(*v)).collect()))
}

/// Loss value without recording gradients.
pub fn value_only<L: LossFn + ?Sized>(f: &L, params: &[Tensor]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    f.loss(&tape, &vars)?.value().item()
}

fn picked(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|k| k * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares reverse-mode gradients with central differences, entry by entry.
pub fn check_gradients<L: LossFn + ?Sized>(
    f: &L,
    params: &[Tensor],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, grads) = value_and_grad(f, params)?;
    let jobs: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| picked(t.len(), opts.max_entries).into_iter().map(move |i| (p, i)))
        .collect();
    let entries = jobs
        .par_iter()
        .map_init(
            || params.to_vec(),
            |local, &(p, i)| -> Result<EntryCheck> {
                let x0 = local[p].data()[i];
                local[p].data_mut()[i] = x0 + opts.h;
                let up = value_only(f, local);
                local[p].data_mut()[i] = x0 - opts.h;
                let down = value_only(f, local);
                local[p].data_mut()[i] = x0;
                let numeric = (up? - down?) / (2.0 * opts.h);
                Ok(EntryCheck { param: p, index: i, analytic: grads[p].data()[i], numeric })
            },
        )
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { entries, floor: opts.floor })
}
