//! Small fully-connected networks with explicit reverse-mode gradients.
//!
//! Parameters live in one flat buffer (per layer: weight `in x out` row-major,
//! then bias), which keeps the optimizer, gradient merging and checkpointing
//! uniform. Batches are row-major `n x dim` matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{sigmoid, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

/// Network shape: `hidden_layers` ReLU layers of `hidden_width`, then a linear
/// output layer whose columns get the per-column `heads` activation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub heads: Vec<Activation>,
}

impl MlpSpec {
    pub fn output_dim(&self) -> usize {
        self.heads.len()
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut prev = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((prev, self.hidden_width));
            prev = self.hidden_width;
        }
        dims.push((prev, self.output_dim()));
        dims
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub input: usize,
    pub output: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Clone, Debug)]
pub struct Mlp<T = f32> {
    spec: MlpSpec,
    layers: Vec<LayerLayout>,
    pub params: Vec<T>,
    pub grads: Vec<T>,
}

/// Activations saved by [`Mlp::forward`]: `acts[0]` is the input and
/// `acts[l + 1]` the activated output of layer `l`.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    pub rows: usize,
    acts: Vec<Vec<T>>,
}

impl<T: Real> MlpCache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("at least one layer")
    }

    pub fn input(&self) -> &[T] {
        &self.acts[0]
    }
}

impl<T: Real> Mlp<T> {
    /// All-zero parameters.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        if spec.input_dim == 0 || spec.heads.is_empty() {
            return Err(Error::InvalidArgument(
                "network needs a non-empty input and at least one output".into(),
            ));
        }
        if spec.hidden_layers > 0 && spec.hidden_width == 0 {
            return Err(Error::InvalidArgument("hidden width must be positive".into()));
        }
        let mut layers = Vec::new();
        let mut off = 0;
        for (input, output) in spec.layer_dims() {
            layers.push(LayerLayout {
                input,
                output,
                weight_offset: off,
                bias_offset: off + input * output,
            });
            off += input * output + output;
        }
        Ok(Self {
            spec,
            layers,
            params: vec![T::zero(); off],
            grads: vec![T::zero(); off],
        })
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases,
    /// deterministic in `seed`.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(spec, &mut rng)
    }

    pub fn init_with(spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        let mut mlp = Self::zeros(spec)?;
        for l in mlp.layers.clone() {
            let bound = 1.0 / (l.input as f64).sqrt();
            for p in &mut mlp.params[l.weight_offset..l.bias_offset + l.output] {
                *p = T::lit(rng.random_range(-bound..bound));
            }
        }
        Ok(mlp)
    }

    /// Network with the given flat parameter buffer.
    pub fn from_params(spec: MlpSpec, params: Vec<T>) -> Result<Self> {
        let mut mlp = Self::zeros(spec)?;
        if params.len() != mlp.params.len() {
            return Err(Error::Dimension {
                expected: mlp.params.len(),
                got: params.len(),
                context: "network parameters",
            });
        }
        mlp.params = params;
        Ok(mlp)
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerLayout] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [T] {
        let l = self.layers[layer];
        &mut self.params[l.weight_offset..l.bias_offset]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [T] {
        let l = self.layers[layer];
        &mut self.params[l.bias_offset..l.bias_offset + l.output]
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = T::zero());
    }

    /// Forward pass over `rows` inputs, keeping activations for backward.
    pub fn forward(&self, input: Vec<T>, rows: usize) -> Result<MlpCache<T>> {
        if input.len() != rows * self.spec.input_dim {
            return Err(Error::Dimension {
                expected: rows * self.spec.input_dim,
                got: input.len(),
                context: "network input",
            });
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        let last = self.layers.len() - 1;
        for (li, l) in self.layers.iter().enumerate() {
            let x = acts.last().expect("input pushed");
            let mut y = Vec::with_capacity(rows * l.output);
            for _ in 0..rows {
                y.extend_from_slice(&self.params[l.bias_offset..l.bias_offset + l.output]);
            }
            T::gemm(
                rows,
                l.input,
                l.output,
                T::one(),
                x,
                (l.input, 1),
                &self.params[l.weight_offset..l.bias_offset],
                (l.output, 1),
                T::one(),
                &mut y,
                l.output,
            );
            if li < last {
                y.iter_mut().for_each(|v| *v = v.max(T::zero()));
            } else {
                let heads = &self.spec.heads;
                for row in y.chunks_exact_mut(l.output) {
                    for (v, h) in row.iter_mut().zip(heads) {
                        match h {
                            Activation::Linear => {}
                            Activation::Relu => *v = v.max(T::zero()),
                            Activation::Sigmoid => *v = sigmoid(*v),
                        }
                    }
                }
            }
            acts.push(y);
        }
        Ok(MlpCache { rows, acts })
    }

    /// Single-row convenience wrapper around [`Mlp::forward`].
    pub fn eval(&self, input: &[T]) -> Result<Vec<T>> {
        Ok(self.forward(input.to_vec(), 1)?.output().to_vec())
    }

    /// Reverse pass. `upstream` is the gradient with respect to the activated
    /// outputs; parameter gradients are added into `grads` (shaped like
    /// `params`) and the input gradient is returned.
    pub fn backward_into(&self, cache: &MlpCache<T>, upstream: &[T], grads: &mut [T]) -> Vec<T> {
        let rows = cache.rows;
        assert_eq!(upstream.len(), rows * self.output_dim(), "upstream shape");
        assert_eq!(grads.len(), self.params.len(), "gradient buffer shape");
        let last = self.layers.len() - 1;
        let mut dy = upstream.to_vec();
        for li in (0..self.layers.len()).rev() {
            let l = self.layers[li];
            let y = &cache.acts[li + 1];
            let x = &cache.acts[li];
            // Local derivative of the activation, expressed through its output.
            if li < last {
                for (d, &v) in dy.iter_mut().zip(y) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
            } else {
                let heads = &self.spec.heads;
                for (drow, yrow) in dy.chunks_exact_mut(l.output).zip(y.chunks_exact(l.output)) {
                    for ((d, &v), h) in drow.iter_mut().zip(yrow).zip(heads) {
                        match h {
                            Activation::Linear => {}
                            Activation::Relu => {
                                if v <= T::zero() {
                                    *d = T::zero()
                                }
                            }
                            Activation::Sigmoid => *d *= v * (T::one() - v),
                        }
                    }
                }
            }
            // dW += x^T dy
            T::gemm(
                l.input,
                rows,
                l.output,
                T::one(),
                x,
                (1, l.input),
                &dy,
                (l.output, 1),
                T::one(),
                &mut grads[l.weight_offset..l.bias_offset],
                l.output,
            );
            let gb = &mut grads[l.bias_offset..l.bias_offset + l.output];
            for drow in dy.chunks_exact(l.output) {
                for (g, &d) in gb.iter_mut().zip(drow) {
                    *g += d;
                }
            }
            // dx = dy W^T
            let mut dx = vec![T::zero(); rows * l.input];
            T::gemm(
                rows,
                l.output,
                l.input,
                T::one(),
                &dy,
                (l.output, 1),
                &self.params[l.weight_offset..l.bias_offset],
                (1, l.output),
                T::zero(),
                &mut dx,
                l.input,
            );
            dy = dx;
        }
        dy
    }

    /// Like [`Mlp::backward_into`], accumulating into `self.grads`.
    pub fn backward(&mut self, cache: &MlpCache<T>, upstream: &[T]) -> Vec<T> {
        let mut grads = std::mem::take(&mut self.grads);
        let dx = self.backward_into(cache, upstream, &mut grads);
        self.grads = grads;
        dx
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| U::lit(p.as_f64())).collect(),
            grads: vec![U::zero(); self.params.len()],
        }
    }
}
