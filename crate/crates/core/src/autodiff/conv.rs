//! Plain 1D convolution kernels shared by the tape ops and the fast solver.
//!
//! Layouts (row-major): input `L x C_in`, shared kernel `K x C_in x C_out`,
//! local kernel `L x K x C_in x C_out`, bias `C_out` or `L x C_out`.

use crate::error::{Error, Result};
use crate::grid::{ghost_source, BoundaryCondition};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Circular,
    Replicate,
}

impl Padding {
    #[inline]
    fn source(self, len: usize, half: usize, padded: usize) -> usize {
        let bc = match self {
            Padding::Circular => BoundaryCondition::Periodic,
            Padding::Replicate => BoundaryCondition::NoFlux,
        };
        ghost_source(bc, len, half, padded)
    }
}

impl From<BoundaryCondition> for Padding {
    fn from(bc: BoundaryCondition) -> Self {
        match bc {
            BoundaryCondition::Periodic => Padding::Circular,
            BoundaryCondition::NoFlux => Padding::Replicate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub len: usize,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Position-dependent kernels and biases.
    pub local: bool,
}

impl ConvShape {
    pub fn kernel_len(&self) -> usize {
        let per = self.kernel * self.c_in * self.c_out;
        if self.local { self.len * per } else { per }
    }

    pub fn bias_len(&self) -> usize {
        if self.local { self.len * self.c_out } else { self.c_out }
    }

    /// Infers the shape from tensor shapes, validating them.
    pub fn infer(input: &[usize], kernel: &[usize], bias: &[usize], local: bool) -> Result<Self> {
        let bad = || Error::shape(format!("conv shapes input {input:?}, kernel {kernel:?}, bias {bias:?}"));
        let (len, c_in) = match input {
            [l, c] => (*l, *c),
            _ => return Err(bad()),
        };
        let (k, ki, ko) = match (local, kernel) {
            (false, [k, ci, co]) => (*k, *ci, *co),
            (true, [l, k, ci, co]) if *l == len => (*k, *ci, *co),
            _ => return Err(bad()),
        };
        if k % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {k}")));
        }
        if ki != c_in || len == 0 {
            return Err(bad());
        }
        let bias_ok = match (local, bias) {
            (false, [c]) => *c == ko,
            (true, [l, c]) => *l == len && *c == ko,
            _ => false,
        };
        if !bias_ok {
            return Err(bad());
        }
        Ok(ConvShape { len, kernel: k, c_in, c_out: ko, local })
    }
}

/// Output `L x C_out`, length preserved by padding `(K - 1) / 2` rows per side.
pub fn conv1d_forward(s: ConvShape, pad: Padding, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let half = s.kernel / 2;
    let per = s.kernel * s.c_in * s.c_out;
    let mut out = vec![0.0; s.len * s.c_out];
    for l in 0..s.len {
        let row = &mut out[l * s.c_out..(l + 1) * s.c_out];
        let b = if s.local { &bias[l * s.c_out..(l + 1) * s.c_out] } else { bias };
        row.copy_from_slice(b);
        let w = if s.local { &kernel[l * per..(l + 1) * per] } else { kernel };
        for k in 0..s.kernel {
            let src = pad.source(s.len, half, l + k);
            let x = &input[src * s.c_in..(src + 1) * s.c_in];
            for (c, &xv) in x.iter().enumerate() {
                let wk = &w[(k * s.c_in + c) * s.c_out..(k * s.c_in + c + 1) * s.c_out];
                for (o, &wv) in row.iter_mut().zip(wk) {
                    *o += xv * wv;
                }
            }
        }
    }
    out
}

/// Accumulates gradients of the input, kernel and bias given `d_out`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    s: ConvShape,
    pad: Padding,
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    mut d_input: Option<&mut [f64]>,
    mut d_kernel: Option<&mut [f64]>,
    mut d_bias: Option<&mut [f64]>,
) {
    let half = s.kernel / 2;
    let per = s.kernel * s.c_in * s.c_out;
    for l in 0..s.len {
        let g = &d_out[l * s.c_out..(l + 1) * s.c_out];
        if let Some(db) = d_bias.as_deref_mut() {
            let db = if s.local { &mut db[l * s.c_out..(l + 1) * s.c_out] } else { db };
            for (d, &gv) in db.iter_mut().zip(g) {
                *d += gv;
            }
        }
        let koff = if s.local { l * per } else { 0 };
        for k in 0..s.kernel {
            let src = pad.source(s.len, half, l + k);
            for c in 0..s.c_in {
                let base = koff + (k * s.c_in + c) * s.c_out;
                if let Some(di) = d_input.as_deref_mut() {
                    let w = &kernel[base..base + s.c_out];
                    di[src * s.c_in + c] += g.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(dk) = d_kernel.as_deref_mut() {
                    let x = input[src * s.c_in + c];
                    for (d, &gv) in dk[base..base + s.c_out].iter_mut().zip(g) {
                        *d += x * gv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let s = ConvShape { len: 4, kernel: 1, c_in: 1, c_out: 1, local: false };
        let x = [1.0, -2.0, 3.5, 0.25];
        assert_eq!(conv1d_forward(s, Padding::Circular, &x, &[1.0], &[0.0]), x.to_vec());
    }

    #[test]
    fn averaging_kernel_wraps() {
        let s = ConvShape { len: 4, kernel: 3, c_in: 1, c_out: 1, local: false };
        let third = 1.0 / 3.0;
        let out = conv1d_forward(s, Padding::Circular, &[1.0, 2.0, 3.0, 4.0], &[third; 3], &[0.0]);
        let expect = [7.0 / 3.0, 2.0, 3.0, 8.0 / 3.0];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let out = conv1d_forward(s, Padding::Replicate, &[1.0, 2.0, 3.0, 4.0], &[third; 3], &[0.0]);
        assert!((out[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((out[3] - 11.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shape_inference() {
        assert!(ConvShape::infer(&[8, 2], &[5, 2, 3], &[3], false).is_ok());
        assert!(ConvShape::infer(&[8, 2], &[4, 2, 3], &[3], false).is_err());
        assert!(ConvShape::infer(&[8, 2], &[5, 1, 3], &[3], false).is_err());
        assert!(ConvShape::infer(&[8, 2], &[8, 5, 2, 3], &[8, 3], true).is_ok());
        assert!(ConvShape::infer(&[8, 2], &[7, 5, 2, 3], &[8, 3], true).is_err());
    }
}
