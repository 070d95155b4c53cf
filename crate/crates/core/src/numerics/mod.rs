//! Dense and sparse linear algebra, seeded sampling, k-means and a
//! finite-difference gradient checker shared by the learning modules.

mod activation;
mod gradcheck;
mod kmeans;
mod matrix;
mod rng;
mod sampler;
mod scalar;
mod sparse;

pub use activation::{argmax, log_sigmoid, log_sum_exp, sigmoid, softmax, softmax_unchecked, softplus};
pub use gradcheck::{fd_gradcheck, REL_FLOOR};
pub use kmeans::{kmeans, kmeans_restarts, KMeansResult};
pub use matrix::{axpy, cosine, dot, norm, squared_distance, DenseMatrix};
pub use rng::{mix_seed, SeededRng};
pub use sampler::{sample_discrete, DiscreteSampler, ALIAS_THRESHOLD};
pub use scalar::Real;
pub use sparse::SparseVector;

/// Per-parameter AdaGrad state.
#[derive(Clone, Debug)]
pub struct AdaGrad<T> {
    pub lr: T,
    accum: Vec<T>,
}

impl<T: Real> AdaGrad<T> {
    pub fn new(lr: T, len: usize) -> Self {
        Self {
            lr,
            accum: vec![T::zero(); len],
        }
    }

    /// Applies `param -= lr * g / sqrt(sum g^2)` to entry `i`.
    #[inline]
    pub fn step(&mut self, i: usize, param: &mut T, g: T) {
        if g == T::zero() {
            return;
        }
        self.accum[i] += g * g;
        *param -= self.lr * g / (self.accum[i].sqrt() + T::lit(1e-12));
    }
}

/// Adam moments for a single parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> Default for AdamConfig<T> {
    fn default() -> Self {
        Self {
            lr: T::lit(1e-3),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    /// One bias-corrected step at time `t` (1-based).
    pub fn step(&mut self, cfg: &AdamConfig<T>, t: u64, params: &mut [T], grads: &[T]) {
        let b1t = T::one() - cfg.beta1.powi(t as i32);
        let b2t = T::one() - cfg.beta2.powi(t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (T::one() - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (T::one() - cfg.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}
