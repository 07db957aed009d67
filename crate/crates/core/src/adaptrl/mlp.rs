//! Fully connected network with rectifier hidden layers, batched forward and
//! backward passes, and momentum SGD.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// One affine layer. Weights are `out × in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub relu: bool,
}

impl Dense {
    /// He-uniform weights, zero bias.
    pub fn new(inputs: usize, outputs: usize, relu: bool, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("positive bound");
        Dense {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; outputs],
            relu,
        }
    }

    pub fn zeroed(inputs: usize, outputs: usize, relu: bool) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            relu,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// `out[b, o] = act(Σ_i x[b, i] w[o, i] + bias[o])`.
    fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), batch * self.inputs);
        let mut out = vec![0.0; batch * self.outputs];
        for b in 0..batch {
            let xi = &x[b * self.inputs..(b + 1) * self.inputs];
            let ob = &mut out[b * self.outputs..(b + 1) * self.outputs];
            for (o, dst) in ob.iter_mut().enumerate() {
                let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let mut acc = self.bias[o];
                for (wi, xv) in w.iter().zip(xi) {
                    acc += wi * xv;
                }
                *dst = if self.relu { acc.max(0.0) } else { acc };
            }
        }
        out
    }

    /// Given the layer input, its output and `∂L/∂output`, accumulates parameter
    /// gradients into `grad` and returns `∂L/∂input`.
    fn backward(
        &self,
        x: &[f64],
        y: &[f64],
        dy: &[f64],
        batch: usize,
        grad: &mut Dense,
    ) -> Vec<f64> {
        let mut dx = vec![0.0; batch * self.inputs];
        for b in 0..batch {
            let xi = &x[b * self.inputs..(b + 1) * self.inputs];
            let dxi = &mut dx[b * self.inputs..(b + 1) * self.inputs];
            for o in 0..self.outputs {
                let k = b * self.outputs + o;
                let mut g = dy[k];
                if self.relu && y[k] <= 0.0 {
                    g = 0.0;
                }
                if g == 0.0 {
                    continue;
                }
                grad.bias[o] += g;
                let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let gw = &mut grad.weights[o * self.inputs..(o + 1) * self.inputs];
                for i in 0..self.inputs {
                    gw[i] += g * xi[i];
                    dxi[i] += g * w[i];
                }
            }
        }
        dx
    }
}

/// Activations recorded by [`Mlp::forward_cached`]: entry 0 is the input,
/// entry `k + 1` the output of layer `k`.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub activations: Vec<Vec<f64>>,
    pub batch: usize,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Widths `[in, h1, …, out]`; hidden layers use rectifiers and the output
    /// layer is linear unless `relu_output` is set.
    pub fn new(widths: &[usize], relu_output: bool, rng: &mut impl Rng) -> Self {
        assert!(
            widths.len() >= 2,
            "an MLP needs at least input and output widths"
        );
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|k| Dense::new(widths[k], widths[k + 1], k + 1 < n || relu_output, rng))
            .collect();
        Mlp { layers }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs];
        w.extend(self.layers.iter().map(|l| l.outputs));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// Same shape, all parameters zero.
    pub fn zeros_like(&self) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeroed(l.inputs, l.outputs, l.relu))
                .collect(),
        }
    }

    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        assert_eq!(x.len(), batch * self.input_dim(), "input size mismatch");
        let mut cur = x.to_vec();
        for layer in &self.layers {
            cur = layer.forward(&cur, batch);
        }
        cur
    }

    pub fn forward_cached(&self, x: &[f64], batch: usize) -> MlpCache {
        assert_eq!(x.len(), batch * self.input_dim(), "input size mismatch");
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.layers {
            let next = layer.forward(activations.last().unwrap(), batch);
            activations.push(next);
        }
        MlpCache { activations, batch }
    }

    /// Backpropagates `∂L/∂output`, accumulating into `grad` (same shape as
    /// `self`), and returns `∂L/∂input`.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut d = d_out.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            d = layer.backward(
                &cache.activations[k],
                &cache.activations[k + 1],
                &d,
                cache.batch,
                &mut grad.layers[k],
            );
        }
        d
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }
}

/// Momentum SGD: `v ← μ v + g`, `θ ← θ − lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Momentum {
    pub fn new(lr: f64, momentum: f64, params: usize) -> Self {
        Momentum {
            lr,
            momentum,
            velocity: vec![0.0; params],
        }
    }

    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = &'a f64>,
    ) {
        let mut n = 0;
        for ((p, g), v) in params.zip(grads).zip(self.velocity.iter_mut()) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
            n += 1;
        }
        debug_assert_eq!(n, self.velocity.len(), "optimizer/parameter size mismatch");
    }
}
