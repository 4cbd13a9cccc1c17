//! Layer specifications, the typed parameter store, and the flat f64
//! compute network.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One layer of the fixed sequential stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv1d {
        in_ch: usize,
        kernel: usize,
        out_ch: usize,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
    GlobalMaxPool,
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    L2Norm,
}

impl LayerSpec {
    /// conv1d = in_ch*k*out_ch + out_ch; dense = in*out + out; others 0.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv1d {
                in_ch,
                kernel,
                out_ch,
            } => in_ch * kernel * out_ch + out_ch,
            LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::GlobalMaxPool => "global_maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::L2Norm => "l2norm",
        }
    }
}

/// Runtime value passed between layers: sequence data `[len, ch]` stored
/// row-major, or a flat vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Seq {
        len: usize,
        ch: usize,
        data: Vec<f64>,
    },
    Flat(Vec<f64>),
}

impl Tensor {
    pub fn seq(len: usize, ch: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), len * ch);
        Tensor::Seq { len, ch, data }
    }

    pub fn flat(data: Vec<f64>) -> Self {
        Tensor::Flat(data)
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Tensor::Seq { data, .. } => data,
            Tensor::Flat(data) => data,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match self {
            Tensor::Seq { data, .. } => data,
            Tensor::Flat(data) => data,
        }
    }

    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        self.values().is_empty()
    }

    /// A zero tensor with the same shape.
    pub fn zeros_like(&self) -> Tensor {
        match self {
            Tensor::Seq { len, ch, data } => Tensor::Seq {
                len: *len,
                ch: *ch,
                data: vec![0.0; data.len()],
            },
            Tensor::Flat(data) => Tensor::Flat(vec![0.0; data.len()]),
        }
    }
}

/// Typed parameters of one layer, in the declaration layout
/// (conv `[in_ch, kernel, out_ch]`, dense `[inputs, outputs]`).
#[derive(Debug, Clone)]
pub enum LayerParams<T: Scalar> {
    None,
    Conv { weights: Array3<T>, bias: Array1<T> },
    Dense { weights: Array2<T>, bias: Array1<T> },
}

/// A sequential network: specs plus a typed parameter store.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    pub specs: Vec<LayerSpec>,
    pub params: Vec<LayerParams<T>>,
}

impl<T: Scalar> Network<T> {
    /// Initializes weights uniformly in +-sqrt(6/(fan_in + fan_out)) per
    /// layer (biases zero), deterministically from the seed.
    pub fn new(specs: Vec<LayerSpec>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .iter()
            .map(|spec| match *spec {
                LayerSpec::Conv1d {
                    in_ch,
                    kernel,
                    out_ch,
                } => {
                    let limit = (6.0 / ((in_ch * kernel) + (out_ch * kernel)) as f64).sqrt();
                    let weights = Array3::from_shape_simple_fn((in_ch, kernel, out_ch), || {
                        T::of_f64(rng.gen_range(-limit..limit))
                    });
                    LayerParams::Conv {
                        weights,
                        bias: Array1::from_elem(out_ch, T::zero()),
                    }
                }
                LayerSpec::Dense { inputs, outputs } => {
                    let limit = (6.0 / (inputs + outputs) as f64).sqrt();
                    let weights = Array2::from_shape_simple_fn((inputs, outputs), || {
                        T::of_f64(rng.gen_range(-limit..limit))
                    });
                    LayerParams::Dense {
                        weights,
                        bias: Array1::from_elem(outputs, T::zero()),
                    }
                }
                _ => LayerParams::None,
            })
            .collect();
        Self { specs, params }
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(LayerSpec::param_count).sum()
    }

    /// Parameters flattened in declaration order (per layer: weights
    /// row-major, then bias).
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            match p {
                LayerParams::None => {}
                LayerParams::Conv { weights, bias } => {
                    out.extend(weights.iter().copied());
                    out.extend(bias.iter().copied());
                }
                LayerParams::Dense { weights, bias } => {
                    out.extend(weights.iter().copied());
                    out.extend(bias.iter().copied());
                }
            }
        }
        out
    }

    /// Restores parameters from the declaration-order flat vector.
    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut pos = 0;
        for p in &mut self.params {
            match p {
                LayerParams::None => {}
                LayerParams::Conv { weights, bias } => {
                    for w in weights.iter_mut() {
                        *w = flat[pos];
                        pos += 1;
                    }
                    for b in bias.iter_mut() {
                        *b = flat[pos];
                        pos += 1;
                    }
                }
                LayerParams::Dense { weights, bias } => {
                    for w in weights.iter_mut() {
                        *w = flat[pos];
                        pos += 1;
                    }
                    for b in bias.iter_mut() {
                        *b = flat[pos];
                        pos += 1;
                    }
                }
            }
        }
        Ok(())
    }

    /// Compiles to the flat f64 kernel network.
    pub fn compile(&self) -> FastNet {
        let mut params = Vec::with_capacity(self.param_count());
        let mut ranges = Vec::with_capacity(self.specs.len());
        for (spec, p) in self.specs.iter().zip(&self.params) {
            let start = params.len();
            match (spec, p) {
                (
                    LayerSpec::Conv1d {
                        in_ch,
                        kernel,
                        out_ch,
                    },
                    LayerParams::Conv { weights, bias },
                ) => {
                    // repack [c][j][o] declaration layout into kernel-major [j][c][o]
                    for j in 0..*kernel {
                        for c in 0..*in_ch {
                            for o in 0..*out_ch {
                                params.push(weights[[c, j, o]].as_f64());
                            }
                        }
                    }
                    params.extend(bias.iter().map(|b| b.as_f64()));
                }
                (LayerSpec::Dense { .. }, LayerParams::Dense { weights, bias }) => {
                    params.extend(weights.iter().map(|w| w.as_f64()));
                    params.extend(bias.iter().map(|b| b.as_f64()));
                }
                _ => {}
            }
            ranges.push(start..params.len());
        }
        FastNet {
            specs: self.specs.clone(),
            params,
            ranges,
        }
    }

    /// Writes the kernel network's parameters back into the typed store.
    pub fn assign_from_fast(&mut self, fast: &FastNet) -> Result<()> {
        if fast.specs != self.specs {
            return Err(Error::Shape("layer stacks differ".into()));
        }
        for (i, (spec, p)) in self.specs.iter().zip(&mut self.params).enumerate() {
            let range = fast.ranges[i].clone();
            let slice = &fast.params[range];
            match (spec, p) {
                (
                    LayerSpec::Conv1d {
                        in_ch,
                        kernel,
                        out_ch,
                    },
                    LayerParams::Conv { weights, bias },
                ) => {
                    for j in 0..*kernel {
                        for c in 0..*in_ch {
                            for o in 0..*out_ch {
                                weights[[c, j, o]] =
                                    T::of_f64(slice[(j * in_ch + c) * out_ch + o]);
                            }
                        }
                    }
                    let w_len = in_ch * kernel * out_ch;
                    for (b, &v) in bias.iter_mut().zip(&slice[w_len..]) {
                        *b = T::of_f64(v);
                    }
                }
                (LayerSpec::Dense { inputs, outputs }, LayerParams::Dense { weights, bias }) => {
                    let w_len = inputs * outputs;
                    for (w, &v) in weights.iter_mut().zip(&slice[..w_len]) {
                        *w = T::of_f64(v);
                    }
                    for (b, &v) in bias.iter_mut().zip(&slice[w_len..]) {
                        *b = T::of_f64(v);
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Per-layer activations (and pool argmax positions) of one forward pass.
/// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
pub struct Cache {
    pub acts: Vec<Tensor>,
    pub argmax: Vec<Option<Vec<u32>>>,
}

/// The flat f64 network actually used for compute. Convolution weights are
/// stored kernel-major (`[j][c][o]`).
#[derive(Debug, Clone)]
pub struct FastNet {
    pub specs: Vec<LayerSpec>,
    pub params: Vec<f64>,
    /// Parameter range of each layer within `params`.
    pub ranges: Vec<std::ops::Range<usize>>,
}

impl FastNet {
    /// The layer owning flat parameter index `idx`.
    pub fn layer_of_param(&self, idx: usize) -> Option<(usize, &LayerSpec)> {
        self.ranges
            .iter()
            .position(|r| r.contains(&idx))
            .map(|i| (i, &self.specs[i]))
    }

    fn layer_forward(
        &self,
        layer: usize,
        input: &Tensor,
    ) -> Result<(Tensor, Option<Vec<u32>>)> {
        let spec = &self.specs[layer];
        let p = &self.params[self.ranges[layer].clone()];
        match (*spec, input) {
            (
                LayerSpec::Conv1d {
                    in_ch,
                    kernel,
                    out_ch,
                },
                Tensor::Seq { len, ch, data },
            ) => {
                if *ch != in_ch {
                    return Err(Error::Shape(format!(
                        "conv1d expects {in_ch} channels, got {ch}"
                    )));
                }
                if kernel % 2 == 0 {
                    return Err(Error::Shape("conv1d kernel must be odd".into()));
                }
                let w_len = in_ch * kernel * out_ch;
                let mut out = vec![0.0; len * out_ch];
                layers::conv1d_forward(
                    data,
                    *len,
                    in_ch,
                    &p[..w_len],
                    &p[w_len..],
                    kernel,
                    out_ch,
                    &mut out,
                );
                Ok((Tensor::seq(*len, out_ch, out), None))
            }
            (LayerSpec::MaxPool { size, stride }, Tensor::Seq { len, ch, data }) => {
                if *len < size {
                    return Err(Error::Shape(format!(
                        "maxpool size {size} exceeds sequence length {len}"
                    )));
                }
                let out_len = (len - size) / stride + 1;
                let mut out = vec![0.0; out_len * ch];
                let mut argmax = vec![0u32; out_len * ch];
                layers::maxpool_forward(data, *len, *ch, size, stride, &mut out, &mut argmax);
                Ok((Tensor::seq(out_len, *ch, out), Some(argmax)))
            }
            (LayerSpec::GlobalMaxPool, Tensor::Seq { len, ch, data }) => {
                let mut out = vec![0.0; *ch];
                let mut argmax = vec![0u32; *ch];
                layers::global_maxpool_forward(data, *len, *ch, &mut out, &mut argmax);
                Ok((Tensor::seq(1, *ch, out), Some(argmax)))
            }
            (LayerSpec::Flatten, Tensor::Seq { data, .. }) => {
                Ok((Tensor::flat(data.clone()), None))
            }
            (LayerSpec::Dense { inputs, outputs }, Tensor::Flat(data)) => {
                if data.len() != inputs {
                    return Err(Error::Shape(format!(
                        "dense expects {inputs} inputs, got {}",
                        data.len()
                    )));
                }
                let w_len = inputs * outputs;
                let mut out = vec![0.0; outputs];
                layers::dense_forward(data, &p[..w_len], &p[w_len..], inputs, outputs, &mut out);
                Ok((Tensor::flat(out), None))
            }
            (LayerSpec::Relu, t) => {
                let mut out = t.clone();
                layers::relu_forward(t.values(), out.values_mut());
                Ok((out, None))
            }
            (LayerSpec::L2Norm, Tensor::Flat(data)) => {
                let mut out = vec![0.0; data.len()];
                layers::l2norm_forward(data, &mut out);
                Ok((Tensor::flat(out), None))
            }
            (spec, _) => Err(Error::Shape(format!(
                "layer {} cannot consume this tensor kind",
                spec.kind_name()
            ))),
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut current = input.clone();
        for layer in 0..self.specs.len() {
            let (out, _) = self.layer_forward(layer, &current)?;
            current = out;
        }
        Ok(current)
    }

    /// Forward pass retaining every intermediate activation for backward.
    pub fn forward_cached(&self, input: &Tensor) -> Result<Cache> {
        let mut acts = Vec::with_capacity(self.specs.len() + 1);
        let mut argmax = Vec::with_capacity(self.specs.len());
        acts.push(input.clone());
        for layer in 0..self.specs.len() {
            let (out, arg) = self.layer_forward(layer, &acts[layer])?;
            acts.push(out);
            argmax.push(arg);
        }
        Ok(Cache { acts, argmax })
    }

    /// Output of a forward pass done through this cache.
    pub fn output_of<'a>(&self, cache: &'a Cache) -> &'a Tensor {
        &cache.acts[self.specs.len()]
    }

    /// Reverse-mode pass. `dout` is the gradient at the network output;
    /// parameter gradients are accumulated into `grads` (same layout as
    /// `params`); returns the gradient at the network input.
    pub fn backward(&self, cache: &Cache, dout: &Tensor, grads: &mut [f64]) -> Result<Tensor> {
        if grads.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer length mismatch".into()));
        }
        let mut current = dout.clone();
        for layer in (0..self.specs.len()).rev() {
            let input = &cache.acts[layer];
            let output = &cache.acts[layer + 1];
            let p = &self.params[self.ranges[layer].clone()];
            let g = &mut grads[self.ranges[layer].clone()];
            let spec = self.specs[layer];
            current = match (spec, input) {
                (
                    LayerSpec::Conv1d {
                        in_ch,
                        kernel,
                        out_ch,
                    },
                    Tensor::Seq { len, data, .. },
                ) => {
                    let w_len = in_ch * kernel * out_ch;
                    let (dw, db) = g.split_at_mut(w_len);
                    let mut dinput = vec![0.0; data.len()];
                    layers::conv1d_backward(
                        data,
                        *len,
                        in_ch,
                        &p[..w_len],
                        kernel,
                        out_ch,
                        current.values(),
                        &mut dinput,
                        dw,
                        db,
                    );
                    Tensor::seq(*len, in_ch, dinput)
                }
                (LayerSpec::MaxPool { .. }, Tensor::Seq { len, ch, data })
                | (LayerSpec::GlobalMaxPool, Tensor::Seq { len, ch, data }) => {
                    let argmax = cache.argmax[layer]
                        .as_ref()
                        .expect("pool layers record argmax");
                    let mut dinput = vec![0.0; data.len()];
                    layers::maxpool_backward(current.values(), argmax, &mut dinput);
                    Tensor::seq(*len, *ch, dinput)
                }
                (LayerSpec::Flatten, Tensor::Seq { len, ch, .. }) => {
                    Tensor::seq(*len, *ch, current.values().to_vec())
                }
                (LayerSpec::Dense { inputs, outputs }, Tensor::Flat(data)) => {
                    let w_len = inputs * outputs;
                    let (dw, db) = g.split_at_mut(w_len);
                    let mut dinput = vec![0.0; inputs];
                    layers::dense_backward(
                        data,
                        &p[..w_len],
                        inputs,
                        outputs,
                        current.values(),
                        &mut dinput,
                        dw,
                        db,
                    );
                    Tensor::flat(dinput)
                }
                (LayerSpec::Relu, _) => {
                    let mut dinput = input.zeros_like();
                    layers::relu_backward(output.values(), current.values(), dinput.values_mut());
                    dinput
                }
                (LayerSpec::L2Norm, Tensor::Flat(data)) => {
                    let mut dinput = vec![0.0; data.len()];
                    layers::l2norm_backward(data, current.values(), &mut dinput);
                    Tensor::flat(dinput)
                }
                (spec, _) => {
                    return Err(Error::Shape(format!(
                        "backward: layer {} tensor kind mismatch",
                        spec.kind_name()
                    )))
                }
            };
        }
        Ok(current)
    }
}
