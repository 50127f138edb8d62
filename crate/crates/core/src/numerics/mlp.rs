//! Dense multi-layer perceptrons over flat `f64` parameter vectors.
//!
//! Layer `l` stores its weight matrix row-major as `(out, in)` followed by its
//! bias vector; layers are laid out back to back in a single [`ParamVector`].
//! Hidden layers use the spec's activation, the output head is always linear.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Activation of the hidden layers.
    pub activation: Activation,
}

/// Shape of one layer inside a [`ParamVector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub bias: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols + self.bias
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden,
            output_dim,
            activation: Activation::Relu,
        }
    }

    /// A single affine map with no hidden layer. Only meant for harnesses
    /// that need a hand-set linear encoder.
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden: Vec::new(),
            output_dim,
            activation: Activation::Identity,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "mlp dimensions must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Widths of every layer boundary, input first.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn manifest(&self) -> Vec<LayerShape> {
        self.widths()
            .windows(2)
            .enumerate()
            .map(|(layer, w)| LayerShape {
                layer,
                rows: w[1],
                cols: w[0],
                bias: w[1],
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.manifest().iter().map(LayerShape::len).sum()
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    fn layer_activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            Activation::Identity
        } else {
            self.activation
        }
    }
}

/// Flat parameter storage with its layer manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub manifest: Vec<LayerShape>,
}

impl ParamVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        ParamVector {
            values: vec![0.0; spec.param_count()],
            manifest: spec.manifest(),
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` per layer, zero biases.
    pub fn glorot<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec);
        let mut offset = 0;
        for shape in &p.manifest {
            let limit = (6.0 / (shape.rows + shape.cols) as f64).sqrt();
            for v in &mut p.values[offset..offset + shape.rows * shape.cols] {
                *v = rng.random_range(-limit..limit);
            }
            offset += shape.len();
        }
        p
    }

    pub fn from_values(spec: &MlpSpec, values: Vec<f64>) -> Result<Self> {
        let expected = spec.param_count();
        if values.len() != expected {
            return Err(Error::dim("parameter vector", expected, values.len()));
        }
        Ok(ParamVector {
            values,
            manifest: spec.manifest(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Checks the manifest invariant and that the layout matches `spec`.
    pub fn check_against(&self, spec: &MlpSpec) -> Result<()> {
        let manifest = spec.manifest();
        for (i, (have, want)) in self.manifest.iter().zip(&manifest).enumerate() {
            if have != want {
                return Err(Error::dim(format!("layer {i} shape"), want.len(), have.len()));
            }
        }
        if self.manifest.len() != manifest.len() {
            return Err(Error::dim("layer count", manifest.len(), self.manifest.len()));
        }
        let total: usize = manifest.iter().map(LayerShape::len).sum();
        if self.values.len() != total {
            return Err(Error::dim("parameter vector", total, self.values.len()));
        }
        Ok(())
    }

    /// Weight view and bias view of one layer.
    pub fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let offset: usize = self.manifest[..layer].iter().map(LayerShape::len).sum();
        let shape = self.manifest[layer];
        let w_end = offset + shape.rows * shape.cols;
        let w = ArrayView2::from_shape((shape.rows, shape.cols), &self.values[offset..w_end])
            .expect("manifest shape");
        let b = ArrayView1::from(&self.values[w_end..w_end + shape.bias]);
        (w, b)
    }

    /// `self <- (1 - rate) * self + rate * source`, elementwise.
    pub fn soft_update(&mut self, source: &ParamVector, rate: f64) {
        debug_assert_eq!(self.values.len(), source.values.len());
        for (t, s) in self.values.iter_mut().zip(&source.values) {
            *t = (1.0 - rate) * *t + rate * s;
        }
    }
}

/// Intermediate activations kept for a backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `inputs[l]` is the input of layer `l`; `inputs[L]` is the network output.
    activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("tape has an output")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.activations.pop().expect("tape has an output")
    }
}

pub struct Gradients {
    pub params: Vec<f64>,
    /// Gradient with respect to the network input, when requested.
    pub input: Option<Array2<f64>>,
}

/// A network: architecture plus its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamVector,
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        params.check_against(&spec)?;
        Ok(Mlp { spec, params })
    }

    pub fn glorot<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = ParamVector::glorot(&spec, rng);
        Ok(Mlp { spec, params })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = ParamVector::zeros(&spec);
        Ok(Mlp { spec, params })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    /// Forward pass over a batch (one sample per row), recording activations.
    pub fn forward_tape(&self, input: ArrayView2<'_, f64>) -> Result<Tape> {
        if input.ncols() != self.spec.input_dim {
            return Err(Error::dim("layer 0 input", self.spec.input_dim, input.ncols()));
        }
        let mut activations = Vec::with_capacity(self.spec.num_layers() + 1);
        activations.push(input.to_owned());
        for layer in 0..self.spec.num_layers() {
            let next = self.layer_forward(layer, activations[layer].view())?;
            activations.push(next);
        }
        Ok(Tape { activations })
    }

    /// Forward pass without keeping intermediates.
    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.spec.input_dim {
            return Err(Error::dim("layer 0 input", self.spec.input_dim, input.ncols()));
        }
        let mut x = self.layer_forward(0, input)?;
        for layer in 1..self.spec.num_layers() {
            x = self.layer_forward(layer, x.view())?;
        }
        Ok(x)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    fn layer_forward(&self, layer: usize, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (w, b) = self.params.layer(layer);
        let mut z = x.dot(&w.t());
        z += &b;
        let act = self.spec.layer_activation(layer);
        if act != Activation::Identity {
            z.mapv_inplace(|v| act.apply(v));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer,
                stage: "forward",
            });
        }
        Ok(z)
    }

    /// Reverse-mode pass. `grad_output` holds dL/d(output) per row.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_output: ArrayView2<'_, f64>,
        want_input_grad: bool,
    ) -> Result<Gradients> {
        let out = tape.output();
        if grad_output.dim() != out.dim() {
            return Err(Error::dim(
                "output gradient",
                out.len(),
                grad_output.len(),
            ));
        }
        let mut params = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(self.params.manifest.len());
        let mut acc = 0;
        for shape in &self.params.manifest {
            offsets.push(acc);
            acc += shape.len();
        }

        let mut delta = grad_output.to_owned();
        let num_layers = self.spec.num_layers();
        for layer in (0..num_layers).rev() {
            let act = self.spec.layer_activation(layer);
            if act != Activation::Identity {
                let y = &tape.activations[layer + 1];
                ndarray::Zip::from(&mut delta)
                    .and(y)
                    .for_each(|d, &y| *d *= act.derivative_from_output(y));
            }
            let x = &tape.activations[layer];
            let shape = self.params.manifest[layer];
            let off = offsets[layer];
            let gw = delta.t().dot(x);
            let gb: Array1<f64> = delta.sum_axis(Axis(0));
            let w_len = shape.rows * shape.cols;
            for (dst, src) in params[off..off + w_len].iter_mut().zip(gw.iter()) {
                *dst = *src;
            }
            for (dst, src) in params[off + w_len..off + w_len + shape.bias]
                .iter_mut()
                .zip(gb.iter())
            {
                *dst = *src;
            }
            if params[off..off + shape.len()].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer,
                    stage: "backward",
                });
            }
            if layer > 0 || want_input_grad {
                let (w, _) = self.params.layer(layer);
                delta = delta.dot(&w);
            }
        }
        Ok(Gradients {
            params,
            input: want_input_grad.then_some(delta),
        })
    }
}

/// Single-sample forward pass.
pub fn mlp_apply(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    params.check_against(spec)?;
    if input.len() != spec.input_dim {
        return Err(Error::dim("layer 0 input", spec.input_dim, input.len()));
    }
    let net = Mlp {
        spec: spec.clone(),
        params: params.clone(),
    };
    net.forward(input)
}

/// Gradient of `loss_head(output)` with respect to the parameters, for a
/// single input. The loss head returns the loss and dL/d(output).
pub fn grad<F>(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &[f64],
    loss_head: F,
) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&[f64]) -> (f64, Vec<f64>),
{
    spec.validate()?;
    params.check_against(spec)?;
    if input.len() != spec.input_dim {
        return Err(Error::dim("layer 0 input", spec.input_dim, input.len()));
    }
    let net = Mlp {
        spec: spec.clone(),
        params: params.clone(),
    };
    let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
    let tape = net.forward_tape(x)?;
    let out = tape.output().row(0).to_vec();
    let (loss, d_out) = loss_head(&out);
    if d_out.len() != spec.output_dim {
        return Err(Error::dim("loss head gradient", spec.output_dim, d_out.len()));
    }
    if !loss.is_finite() || d_out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            layer: spec.num_layers(),
            stage: "loss head",
        });
    }
    let g = ArrayView2::from_shape((1, d_out.len()), &d_out).expect("row vector");
    let grads = net.backward(&tape, g, false)?;
    Ok((loss, ParamVector::from_values(spec, grads.params)?))
}
