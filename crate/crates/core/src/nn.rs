//! Small dense networks: MLP forward/backward over flat parameter vectors,
//! masked softmax and an Adam optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NnError {
    #[error("an MLP needs at least two layer sizes, got {0}")]
    TooFewLayers(usize),
    #[error("layer sizes must be positive")]
    ZeroSize,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("every entry is masked")]
    FullyMasked,
    #[error("non-finite gradient at parameter {0}")]
    NonFiniteGradient(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Weights and biases of a fully connected network, stored flat: for each
/// layer an `out × in` row-major weight block followed by `out` biases.
/// Hidden layers use `activation`; the output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Cache {
    /// Input to each layer (the network input first).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

/// Uniform `±sqrt(6 / fan_in)` weights, zero biases.
pub fn init_mlp(sizes: &[usize], activation: Activation, seed: u64) -> Result<MlpParams, NnError> {
    let mut p = MlpParams::zeros(sizes, activation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offset = 0;
    for w in sizes.windows(2) {
        let (fan_in, out) = (w[0], w[1]);
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in &mut p.params[offset..offset + fan_in * out] {
            *v = rng.random_range(-bound..bound);
        }
        offset += fan_in * out + out;
    }
    Ok(p)
}

impl MlpParams {
    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self, NnError> {
        if sizes.len() < 2 {
            return Err(NnError::TooFewLayers(sizes.len()));
        }
        if sizes.contains(&0) {
            return Err(NnError::ZeroSize);
        }
        Ok(MlpParams {
            sizes: sizes.to_vec(),
            activation,
            params: vec![0.0; param_count(sizes)],
        })
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().expect("at least two sizes")
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Offset of layer `l`'s weight block; its biases follow at `+ out*in`.
    pub fn layer_offset(&self, l: usize) -> usize {
        param_count(&self.sizes[..=l])
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Forward pass keeping what [`backward`](Self::backward) needs.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Cache), NnError> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layer_count());
        let mut pre = Vec::with_capacity(self.layer_count());
        let mut cur = x.to_vec();
        for l in 0..self.layer_count() {
            let z = self.affine(l, &cur);
            let last = l + 1 == self.layer_count();
            let a: Vec<f64> = if last {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            inputs.push(cur);
            pre.push(z);
            cur = a;
        }
        Ok((cur, Cache { inputs, pre }))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        for l in 0..self.layer_count() {
            let mut z = self.affine(l, &cur);
            if l + 1 < self.layer_count() {
                for v in &mut z {
                    *v = self.activation.apply(*v);
                }
            }
            cur = z;
        }
        Ok(cur)
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.input_size() {
            return Err(NnError::Dimension {
                expected: self.input_size(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.layer_offset(l);
        let w = &self.params[off..off + out * inp];
        let b = &self.params[off + out * inp..off + out * inp + out];
        (0..out)
            .map(|o| {
                let row = &w[o * inp..(o + 1) * inp];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[o]
            })
            .collect()
    }

    /// Gradients of `dy · y` with respect to the parameters and the input.
    pub fn backward(&self, cache: &Cache, dy: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let mut grads = vec![0.0; self.params.len()];
        let dx = self.backward_into(cache, dy, &mut grads)?;
        Ok((grads, dx))
    }

    /// Like [`backward`](Self::backward), adding into `grads`.
    pub fn backward_into(&self, cache: &Cache, dy: &[f64], grads: &mut [f64]) -> Result<Vec<f64>, NnError> {
        if dy.len() != self.output_size() {
            return Err(NnError::Dimension {
                expected: self.output_size(),
                got: dy.len(),
            });
        }
        if grads.len() != self.params.len() || cache.pre.len() != self.layer_count() {
            return Err(NnError::Dimension {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let mut delta = dy.to_vec();
        for l in (0..self.layer_count()).rev() {
            let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < self.layer_count() {
                // next layer's input is this layer's activation
                let act = &cache.inputs[l + 1];
                for o in 0..out {
                    delta[o] *= self.activation.derivative(cache.pre[l][o], act[o]);
                }
            }
            let off = self.layer_offset(l);
            let x = &cache.inputs[l];
            for o in 0..out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let gw = &mut grads[off + o * inp..off + (o + 1) * inp];
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += d * xi;
                }
                grads[off + out * inp + o] += d;
            }
            let w = &self.params[off..off + out * inp];
            let mut prev = vec![0.0; inp];
            for o in 0..out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                    *p += d * wi;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}

/// Softmax over unmasked entries (`mask[i] == true` means available);
/// masked entries get exactly 0.
pub fn softmax(z: &[f64], mask: &[bool]) -> Result<Vec<f64>, NnError> {
    if z.len() != mask.len() {
        return Err(NnError::Dimension {
            expected: z.len(),
            got: mask.len(),
        });
    }
    let max = z
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NnError::FullyMasked);
    }
    let mut out: Vec<f64> = z
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(out)
}

/// Adam moments and hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptState {
    pub fn new(len: usize, lr: f64) -> Self {
        OptState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam step (gradient descent direction). A non-finite
/// gradient rejects the whole step and leaves everything unchanged.
pub fn adam_step(params: &mut [f64], grads: &[f64], s: &mut OptState) -> Result<(), NnError> {
    if grads.len() != params.len() || s.m.len() != params.len() {
        return Err(NnError::Dimension {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NnError::NonFiniteGradient(i));
    }
    s.step += 1;
    let t = s.step as i32;
    let c1 = 1.0 - s.beta1.powi(t);
    let c2 = 1.0 - s.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
        s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
        let mhat = s.m[i] / c1;
        let vhat = s.v[i] / c2;
        params[i] -= s.lr * mhat / (vhat.sqrt() + s.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Central-difference gradient of `sum(w ⊙ y)`.
    fn numeric_grad(p: &MlpParams, x: &[f64], w: &[f64], h: f64) -> Vec<f64> {
        let f = |q: &MlpParams| -> f64 { q.predict(x).unwrap().iter().zip(w).map(|(a, b)| a * b).sum() };
        let mut q = p.clone();
        (0..p.params.len())
            .map(|i| {
                let orig = q.params[i];
                q.params[i] = orig + h;
                let up = f(&q);
                q.params[i] = orig - h;
                let down = f(&q);
                q.params[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_mlp(&[8, 64, 32, 1], Activation::Tanh, 3).unwrap();
        let b = init_mlp(&[8, 64, 32, 1], Activation::Tanh, 3).unwrap();
        assert_eq!(a, b);
        for l in 0..a.layer_count() {
            let (inp, out) = (a.sizes[l], a.sizes[l + 1]);
            let off = a.layer_offset(l);
            let bound = (6.0 / inp as f64).sqrt();
            assert!(a.params[off..off + inp * out].iter().all(|w| w.abs() <= bound));
            assert!(a.params[off + inp * out..off + inp * out + out].iter().all(|&b| b == 0.0));
        }
        assert_eq!(init_mlp(&[3], Activation::Tanh, 0), Err(NnError::TooFewLayers(1)));
        assert_eq!(init_mlp(&[3, 0, 1], Activation::Tanh, 0), Err(NnError::ZeroSize));
    }

    #[test]
    fn forward_cases() {
        let z = MlpParams::zeros(&[3, 4, 2], Activation::Tanh).unwrap();
        assert_eq!(z.predict(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        let mut id = MlpParams::zeros(&[3, 3], Activation::Tanh).unwrap();
        for i in 0..3 {
            id.params[i * 3 + i] = 1.0;
        }
        assert_eq!(id.predict(&[0.5, -7.0, 2.0]).unwrap(), vec![0.5, -7.0, 2.0]);

        let r = init_mlp(&[3, 4, 2], Activation::Tanh, 1).unwrap();
        assert_eq!(r.predict(&[0.1, 0.2, 0.3]).unwrap(), r.predict(&[0.1, 0.2, 0.3]).unwrap());
        assert_eq!(r.forward(&[0.1, 0.2, 0.3]).unwrap().0, r.predict(&[0.1, 0.2, 0.3]).unwrap());
        assert!(matches!(r.predict(&[1.0]), Err(NnError::Dimension { .. })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        for (seed, act) in [(1, Activation::Tanh), (2, Activation::Relu)] {
            let p = init_mlp(&[3, 4, 2], act, seed).unwrap();
            let x = [0.3, -0.7, 0.9];
            let w = [1.0, -0.5];
            let (_, cache) = p.forward(&x).unwrap();
            let (g, _) = p.backward(&cache, &w).unwrap();
            let n = numeric_grad(&p, &x, &w, 1e-5);
            for (a, b) in g.iter().zip(&n) {
                assert!(rel_err(*a, *b) < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = init_mlp(&[4, 5, 3, 1], Activation::Tanh, 9).unwrap();
        let x = vec![0.2, 0.4, -0.1, 0.8];
        let (_, cache) = p.forward(&x).unwrap();
        let (_, dx) = p.backward(&cache, &[1.0]).unwrap();
        for i in 0..4 {
            let mut up = x.clone();
            up[i] += 1e-5;
            let mut down = x.clone();
            down[i] -= 1e-5;
            let num = (p.predict(&up).unwrap()[0] - p.predict(&down).unwrap()[0]) / 2e-5;
            assert!(rel_err(dx[i], num) < 1e-4);
        }
    }

    #[test]
    fn backward_zero_and_linear() {
        let p = init_mlp(&[3, 4, 2], Activation::Tanh, 5).unwrap();
        let (_, cache) = p.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (g0, dx0) = p.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g0.iter().chain(&dx0).all(|&v| v == 0.0));
        let (g1, _) = p.backward(&cache, &[0.3, -1.1]).unwrap();
        let (g2, _) = p.backward(&cache, &[0.6, -2.2]).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_relative_eq!(2.0 * a, *b, max_relative = 1e-12);
        }
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&[2.0; 4], &[true; 4]).unwrap();
        assert!(u.iter().all(|&p| (p - 0.25).abs() < 1e-12));
        let p = softmax(&[0.0, 3f64.ln()], &[true, true]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        let m = softmax(&[0.0, 100.0, 0.0], &[true, false, true]).unwrap();
        assert_eq!(m, vec![0.5, 0.0, 0.5]);
        assert_eq!(softmax(&[1.0, 2.0], &[false, false]), Err(NnError::FullyMasked));
        let big = softmax(&[1000.0, 999.0], &[true, true]).unwrap();
        assert!(big.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn adam_cases() {
        let mut p = vec![1.0, 2.0];
        let mut s = OptState::new(2, 0.1);
        adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s.step, 1);

        let mut x = vec![0.0];
        let mut s = OptState::new(1, 0.1);
        adam_step(&mut x, &[1.0], &mut s).unwrap();
        assert!((x[0] + 0.1).abs() < 1e-6);

        let mut a = vec![0.5, -0.5];
        let mut b = a.clone();
        let mut sa = OptState::new(2, 0.01);
        let mut sb = sa.clone();
        adam_step(&mut a, &[0.3, 0.1], &mut sa).unwrap();
        adam_step(&mut b, &[0.3, 0.1], &mut sb).unwrap();
        assert_eq!((a, sa), (b, sb));

        let mut p = vec![1.0];
        let mut s = OptState::new(1, 0.1);
        assert_eq!(adam_step(&mut p, &[f64::NAN], &mut s), Err(NnError::NonFiniteGradient(0)));
        assert_eq!((p[0], s.step), (1.0, 0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn gradient_check(
                seed in 0u64..10_000,
                hidden1 in 1usize..17,
                hidden2 in 1usize..17,
                inp in 1usize..9,
                xs in prop::collection::vec(-1.0f64..1.0, 8),
            ) {
                let p = init_mlp(&[inp, hidden1, hidden2, 1], Activation::Tanh, seed).unwrap();
                let x = &xs[..inp];
                let (_, cache) = p.forward(x).unwrap();
                let (g, _) = p.backward(&cache, &[1.0]).unwrap();
                let n = numeric_grad(&p, x, &[1.0], 1e-5);
                for (a, b) in g.iter().zip(&n) {
                    prop_assert!(rel_err(*a, *b) < 1e-4, "{} vs {}", a, b);
                }
            }

            #[test]
            fn softmax_sums_to_one(
                entries in prop::collection::vec((-50.0f64..50.0, any::<bool>()), 1..64),
            ) {
                let z: Vec<f64> = entries.iter().map(|e| e.0).collect();
                let mut mask: Vec<bool> = entries.iter().map(|e| e.1).collect();
                mask[0] = true;
                let p = softmax(&z, &mask).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for (pi, m) in p.iter().zip(&mask) {
                    if !m { prop_assert_eq!(*pi, 0.0); }
                }
            }
        }
    }
}
