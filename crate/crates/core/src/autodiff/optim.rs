use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!("{} parameters, {} gradients", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::shape("parameters changed shape between optimizer steps"));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.data_mut()[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.m = m;
        self.v = v;
    }
}

/// Rescales `grads` so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let g = vec![Tensor::zeros(&[2])];
        let mut opt = Adam::default();
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for scale in [1e-4, 1.0, 1e4] {
            let mut p = vec![Tensor::from_vec(vec![0.0, 0.0])];
            let g = vec![Tensor::from_vec(vec![scale, -3.0 * scale])];
            let mut opt = Adam::new(1e-3);
            opt.step(&mut p, &g).unwrap();
            assert!((p[0].data()[0] + 1e-3).abs() < 1e-7);
            assert!((p[0].data()[1] - 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn quadratic_bowl_descends() {
        let centre = [0.5, -1.5, 2.0];
        let loss = |x: &[f64]| x.iter().zip(centre).map(|(a, c)| (a - c) * (a - c)).sum::<f64>();
        let mut p = vec![Tensor::from_vec(vec![0.0; 3])];
        let mut opt = Adam::new(1e-2);
        let mut last = loss(p[0].data());
        for _ in 0..100 {
            let g: Vec<f64> = p[0].data().iter().zip(centre).map(|(a, c)| 2.0 * (a - c)).collect();
            opt.step(&mut p, &[Tensor::from_vec(g)]).unwrap();
            let now = loss(p[0].data());
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![Tensor::zeros(&[2])];
        assert!(Adam::default().step(&mut p, &[Tensor::zeros(&[3])]).is_err());
        assert!(Adam::default().step(&mut p, &[]).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::from_vec(vec![3.0]), Tensor::from_vec(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut g = vec![Tensor::from_vec(vec![0.3])];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g[0].data()[0], 0.3);
    }
}
