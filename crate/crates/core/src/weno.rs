//! Fifth-order WENO reconstruction of interface states from cell averages.
//!
//! Every face `j` reads the six-cell window `(u_{j-3}, ..., u_{j+2})` of a field
//! padded with [`GHOST_WIDTH`] ghost cells, i.e. rows `j..j+6` of the padded
//! array. In the notation of the left-biased stencils the window is
//! `(u_{i-2}, ..., u_{i+3})` with `i = j - 1`, the cell to the left of the face.
//! Right-biased quantities are the left-biased ones applied to the window read
//! backwards, so mirrored data gives mirrored states bit for bit.
//!
//! The tap tables below are shared with the differentiable solver in
//! [`crate::scheme`], which must agree with this module to round-off.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Ghost cells needed per side: the far right-biased stencil reaches `u_{i+3}`.
pub const GHOST_WIDTH: usize = 3;

/// Width of the per-face window of padded rows.
pub const WINDOW: usize = 6;

/// Optimal linear weights `d_k`, ordered like the candidate stencils. The
/// right-biased set uses the same values in its own (mirrored) ordering.
pub const LINEAR_WEIGHTS: [f64; 3] = [0.1, 0.6, 0.3];

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_POWER: f64 = 2.0;

/// Candidate `k` evaluated at `x_{i+1/2}` from `(u_{i+k-2}, u_{i+k-1}, u_{i+k})`.
pub const CANDIDATE_COEFFS: [[f64; 3]; 3] = [
    [2.0 / 6.0, -7.0 / 6.0, 11.0 / 6.0],
    [-1.0 / 6.0, 5.0 / 6.0, 2.0 / 6.0],
    [2.0 / 6.0, 5.0 / 6.0, -1.0 / 6.0],
];

pub const CURVATURE_WEIGHT: f64 = 13.0 / 12.0;
pub const SLOPE_WEIGHT: f64 = 0.25;
const CURVATURE_COEFFS: [f64; 3] = [1.0, -2.0, 1.0];
const SLOPE_COEFFS: [[f64; 3]; 3] = [[1.0, -4.0, 3.0], [1.0, 0.0, -1.0], [3.0, -4.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `u^-`, biased towards the cell left of the face.
    Left,
    /// `u^+`, biased towards the cell right of the face.
    Right,
}

/// Three `(window offset, coefficient)` pairs.
pub type Taps = [(usize, f64); 3];

fn taps(side: Side, k: usize, coeffs: [f64; 3]) -> Taps {
    std::array::from_fn(|m| {
        let pos = k + m;
        let off = match side {
            Side::Left => pos,
            Side::Right => WINDOW - 1 - pos,
        };
        (off, coeffs[m])
    })
}

pub fn candidate_taps(side: Side, k: usize) -> Taps {
    taps(side, k, CANDIDATE_COEFFS[k])
}

/// Taps of the two squared differences entering the Jiang-Shu indicator `beta_k`.
pub fn smoothness_taps(side: Side, k: usize) -> (Taps, Taps) {
    (taps(side, k, CURVATURE_COEFFS), taps(side, k, SLOPE_COEFFS[k]))
}

#[inline]
fn apply(taps: &Taps, w: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &(off, c) in taps {
        acc += c * w[off];
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    Classical,
    Linear,
    Learned,
}

/// Candidate values `q_k^-` and `q_k^+`, each of shape `(faces, components, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateValues {
    pub q_minus: Array3<f64>,
    pub q_plus: Array3<f64>,
}

impl CandidateValues {
    pub fn n_faces(&self) -> usize {
        self.q_minus.dim().0
    }
}

/// Convex weights per face, shape `(faces, n_w, 3)`. `n_w` is either the number of
/// components or 1, in which case one weight row is shared by every component.
#[derive(Debug, Clone, PartialEq)]
pub struct WenoWeights {
    pub w_minus: Array3<f64>,
    pub w_plus: Array3<f64>,
    pub source: WeightSource,
}

impl WenoWeights {
    pub fn n_faces(&self) -> usize {
        self.w_minus.dim().0
    }

    /// Linear weights `d_k` on every face, shared across components.
    pub fn linear(n_faces: usize) -> Self {
        let w = Array3::from_shape_fn((n_faces, 1, 3), |(_, _, k)| LINEAR_WEIGHTS[k]);
        WenoWeights { w_minus: w.clone(), w_plus: w, source: WeightSource::Linear }
    }

    /// Maximum deviation of any row sum from one.
    pub fn simplex_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for w in [&self.w_minus, &self.w_plus] {
            for row in w.lanes(Axis(2)) {
                if row.iter().any(|&v| v < 0.0) {
                    return f64::INFINITY;
                }
                worst = worst.max((row.sum() - 1.0).abs());
            }
        }
        worst
    }
}

fn check_padded(padded: &ArrayView2<'_, f64>) -> Result<usize> {
    if padded.nrows() < WINDOW {
        return Err(Error::shape(format!(
            "padded field has {} rows, needs at least {WINDOW}",
            padded.nrows()
        )));
    }
    Ok(padded.nrows() - WINDOW + 1)
}

fn per_face<F>(padded: ArrayView2<'_, f64>, mut f: F) -> Result<(Array3<f64>, Array3<f64>)>
where
    F: FnMut(Side, usize, &[f64]) -> f64,
{
    let faces = check_padded(&padded)?;
    let nc = padded.ncols();
    let mut minus = Array3::zeros((faces, nc, 3));
    let mut plus = Array3::zeros((faces, nc, 3));
    let mut window = [0.0; WINDOW];
    for j in 0..faces {
        for c in 0..nc {
            for (m, w) in window.iter_mut().enumerate() {
                *w = padded[[j + m, c]];
            }
            for k in 0..3 {
                minus[[j, c, k]] = f(Side::Left, k, &window);
                plus[[j, c, k]] = f(Side::Right, k, &window);
            }
        }
    }
    Ok((minus, plus))
}

/// Candidate values on every face of a field padded with `GHOST_WIDTH` cells.
/// A padded field with `N + 6` rows yields `N + 1` faces.
pub fn candidates(padded: ArrayView2<'_, f64>) -> Result<CandidateValues> {
    let (q_minus, q_plus) =
        per_face(padded, |side, k, w| apply(&candidate_taps(side, k), w))?;
    Ok(CandidateValues { q_minus, q_plus })
}

/// Jiang-Shu smoothness indicators `(beta^-, beta^+)`, shaped like the candidates.
pub fn smoothness_indicators(padded: ArrayView2<'_, f64>) -> Result<(Array3<f64>, Array3<f64>)> {
    per_face(padded, |side, k, w| {
        let (curv, slope) = smoothness_taps(side, k);
        let a = apply(&curv, w);
        let b = apply(&slope, w);
        CURVATURE_WEIGHT * (a * a) + SLOPE_WEIGHT * (b * b)
    })
}

/// Nonlinear weights of one face from its three indicators.
#[inline]
pub fn classical_weight_row(beta: [f64; 3], d: [f64; 3], eps: f64, r: f64) -> [f64; 3] {
    let raw: [f64; 3] = std::array::from_fn(|k| d[k] / (eps + beta[k]).powf(r));
    let total = raw[0] + raw[1] + raw[2];
    raw.map(|w| w / total)
}

/// Applies [`classical_weight_row`] to every `(face, component)` row of `beta`.
pub fn classical_weights(beta: ArrayView3<'_, f64>, d: [f64; 3], eps: f64, r: f64) -> Result<Array3<f64>> {
    if !(eps > 0.0) || !(r >= 1.0) {
        return Err(Error::invalid(format!("need eps > 0 and r >= 1, got eps={eps}, r={r}")));
    }
    let mut out = Array3::zeros(beta.raw_dim());
    for (src, mut dst) in beta.lanes(Axis(2)).into_iter().zip(out.lanes_mut(Axis(2))) {
        let row = classical_weight_row([src[0], src[1], src[2]], d, eps, r);
        for k in 0..3 {
            dst[k] = row[k];
        }
    }
    Ok(out)
}

/// Classical WENO5 weights for both biases, one set per component.
pub fn classical_weno_weights(padded: ArrayView2<'_, f64>, eps: f64, r: f64) -> Result<WenoWeights> {
    let (bm, bp) = smoothness_indicators(padded)?;
    Ok(WenoWeights {
        w_minus: classical_weights(bm.view(), LINEAR_WEIGHTS, eps, r)?,
        w_plus: classical_weights(bp.view(), LINEAR_WEIGHTS, eps, r)?,
        source: WeightSource::Classical,
    })
}

fn combine(q: &Array3<f64>, w: &Array3<f64>) -> Array2<f64> {
    let (faces, nc, _) = q.dim();
    let shared = w.dim().1 == 1;
    Array2::from_shape_fn((faces, nc), |(j, c)| {
        let wc = if shared { 0 } else { c };
        let mut acc = 0.0;
        for k in 0..3 {
            acc += w[[j, wc, k]] * q[[j, c, k]];
        }
        acc
    })
}

/// Interface states `(u^-, u^+)`, each `(faces, components)`.
pub fn reconstruct(cands: &CandidateValues, weights: &WenoWeights) -> Result<(Array2<f64>, Array2<f64>)> {
    let (faces, nc, _) = cands.q_minus.dim();
    let (wf, wn, _) = weights.w_minus.dim();
    if wf != faces || weights.w_plus.dim() != weights.w_minus.dim() || !(wn == 1 || wn == nc) {
        return Err(Error::shape(format!(
            "weights {:?} do not match candidates {:?}",
            weights.w_minus.dim(),
            cands.q_minus.dim()
        )));
    }
    Ok((combine(&cands.q_minus, &weights.w_minus), combine(&cands.q_plus, &weights.w_plus)))
}

/// Rows `first..first + count` of a face array.
pub fn face_rows(a: &Array2<f64>, first: usize, count: usize) -> Array2<f64> {
    a.slice(s![first..first + count, ..]).to_owned()
}
