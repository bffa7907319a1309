use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::{LayerCache, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A labelled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
}

impl Sample {
    pub fn new(input: Tensor, label: usize) -> Self {
        Sample { input, label }
    }
}

/// Flat parameter vector with per-layer `(start, length)` offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    flat: Vec<f32>,
    offsets: Vec<(usize, usize)>,
}

impl ModelParams {
    pub fn new(flat: Vec<f32>, offsets: Vec<(usize, usize)>) -> Result<Self> {
        let mut next = 0;
        for (i, &(start, len)) in offsets.iter().enumerate() {
            if start != next {
                return Err(Error::internal(format!(
                    "parameter offset {i} starts at {start}, expected {next}"
                )));
            }
            next = start + len;
        }
        if next != flat.len() {
            return Err(Error::internal(format!(
                "offsets cover {next} values but the parameter vector has {}",
                flat.len()
            )));
        }
        Ok(ModelParams { flat, offsets })
    }

    fn for_layers(layers: &[LayerSpec], flat: Vec<f32>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(layers.len());
        let mut start = 0;
        for l in layers {
            let len = l.param_count();
            offsets.push((start, len));
            start += len;
        }
        ModelParams::new(flat, offsets)
    }

    /// Same layout, every value zero.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            flat: vec![0.0; self.flat.len()],
            offsets: self.offsets.clone(),
        }
    }

    /// Same layout with a replacement value vector.
    pub fn with_values(&self, flat: Vec<f32>) -> Result<Self> {
        ModelParams::new(flat, self.offsets.clone())
    }

    pub fn flat(&self) -> &[f32] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f32] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<f32> {
        self.flat
    }

    pub fn offsets(&self) -> &[(usize, usize)] {
        &self.offsets
    }

    pub fn layer(&self, i: usize) -> &[f32] {
        let (s, l) = self.offsets[i];
        &self.flat[s..s + l]
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }
}

/// Every layer output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    outputs: Vec<Tensor>,
    relu_positions: Vec<usize>,
}

impl ForwardTrace {
    /// Output of the layer at position `layer`.
    pub fn layer_output(&self, layer: usize) -> Option<&Tensor> {
        self.outputs.get(layer)
    }

    pub fn outputs(&self) -> &[Tensor] {
        &self.outputs
    }

    /// Output of the `k`-th ReLU (1-based).
    pub fn relu_output(&self, k: usize) -> Option<&Tensor> {
        let pos = *self.relu_positions.get(k.checked_sub(1)?)?;
        self.outputs.get(pos)
    }

    pub fn relu_count(&self) -> usize {
        self.relu_positions.len()
    }
}

/// Loss, number of correct predictions and summed-then-averaged gradient of a batch.
#[derive(Debug, Clone)]
pub(crate) struct BatchGradient {
    pub loss: f32,
    pub correct: usize,
    pub grads: Vec<f32>,
}

/// A layered network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    params: ModelParams,
}

impl Model {
    /// Build a model, checking that layer shapes compose and the parameter count matches.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, flat: Vec<f32>) -> Result<Self> {
        let shapes = Self::infer_shapes(&input_shape, &layers)?;
        let expected: usize = layers.iter().map(LayerSpec::param_count).sum();
        if flat.len() != expected {
            return Err(Error::config(format!(
                "model declares {expected} parameters but {} were supplied",
                flat.len()
            )));
        }
        let params = ModelParams::for_layers(&layers, flat)?;
        Ok(Model {
            input_shape,
            layers,
            shapes,
            params,
        })
    }

    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases, drawn from `seed`.
    pub fn init(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = Vec::new();
        for l in &layers {
            let weights = l.weight_count();
            if weights == 0 {
                continue;
            }
            let bound = (6.0 / l.fan_in() as f64).sqrt() as f32;
            flat.extend((0..weights).map(|_| rng.gen_range(-bound..bound)));
            flat.extend(std::iter::repeat(0.0).take(l.param_count() - weights));
        }
        Model::new(input_shape, layers, flat)
    }

    fn infer_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("invalid input shape {input_shape:?}")));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.to_vec();
        for (i, l) in layers.iter().enumerate() {
            current = l
                .output_shape(&current)
                .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
            shapes.push(current.clone());
        }
        match shapes.last() {
            Some(s) if s.len() == 1 => Ok(shapes),
            Some(s) => Err(Error::config(format!(
                "final layer must produce a logit vector, got shape {s:?}"
            ))),
            None => Err(Error::config("model has no layers")),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Replace the parameters; the layout must match.
    pub fn set_params(&mut self, params: ModelParams) -> Result<()> {
        if params.offsets() != self.params.offsets() {
            return Err(Error::internal("parameter layout does not match the model"));
        }
        self.params = params;
        Ok(())
    }

    /// Copy of the architecture with new parameter values.
    pub fn with_params(&self, params: ModelParams) -> Result<Self> {
        let mut m = self.clone();
        m.set_params(params)?;
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map(|s| s[0]).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Output shape of the layer at `position`.
    pub fn layer_output_shape(&self, position: usize) -> Option<&[usize]> {
        self.shapes.get(position).map(Vec::as_slice)
    }

    /// Layer positions of the ReLUs, in order.
    pub fn relu_positions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Relu))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn relu_count(&self) -> usize {
        self.relu_positions().len()
    }

    /// Layer position of the `k`-th ReLU (1-based).
    pub fn relu_layer(&self, k: usize) -> Result<usize> {
        let positions = self.relu_positions();
        k.checked_sub(1)
            .and_then(|i| positions.get(i).copied())
            .ok_or_else(|| {
                Error::config(format!(
                    "ReLU index {k} out of range: model has {} ReLU layers",
                    positions.len()
                ))
            })
    }

    /// Channel count of the `k`-th ReLU output.
    pub fn relu_channels(&self, k: usize) -> Result<usize> {
        let pos = self.relu_layer(k)?;
        Ok(self.shapes[pos][0])
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            let first = self.layers.first().map(LayerSpec::name).unwrap_or("none");
            return Err(Error::config(format!(
                "layer 0 ({first}) expects input {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        Ok(())
    }

    /// Run layers `0..=last`, optionally keeping backward caches.
    fn run(
        &self,
        input: &Tensor,
        last: usize,
        keep_cache: bool,
    ) -> Result<(Vec<Tensor>, Vec<LayerCache>)> {
        self.check_input(input)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(last + 1);
        let mut caches = Vec::with_capacity(if keep_cache { last + 1 } else { 0 });
        for i in 0..=last {
            let x = if i == 0 { input } else { &outputs[i - 1] };
            let (y, cache) =
                self.layers[i].forward(self.params.layer(i), x, &self.shapes[i], keep_cache);
            outputs.push(y);
            if keep_cache {
                caches.push(cache);
            }
        }
        Ok((outputs, caches))
    }

    /// Backpropagate `grad` from the output of layer `top` down to the input.
    fn backprop(
        &self,
        input: &Tensor,
        outputs: &[Tensor],
        caches: &[LayerCache],
        top: usize,
        mut grad: Vec<f32>,
        grad_params: &mut [f32],
        need_input_grad: bool,
    ) -> Option<Vec<f32>> {
        for i in (0..=top).rev() {
            let x = if i == 0 { input } else { &outputs[i - 1] };
            let (s, l) = self.params.offsets()[i];
            let need = i > 0 || need_input_grad;
            match self.layers[i].backward(
                self.params.layer(i),
                x,
                &caches[i],
                &grad,
                &mut grad_params[s..s + l],
                need,
            ) {
                Some(g) => grad = g,
                None => return None,
            }
        }
        Some(grad)
    }

    /// Logits for one input, plus every layer output when `capture` is set.
    pub fn forward(&self, input: &Tensor, capture: bool) -> Result<(Tensor, Option<ForwardTrace>)> {
        let (mut outputs, _) = self.run(input, self.layers.len() - 1, false)?;
        if capture {
            let logits = outputs.last().cloned().expect("model has layers");
            let trace = ForwardTrace {
                outputs,
                relu_positions: self.relu_positions(),
            };
            Ok((logits, Some(trace)))
        } else {
            Ok((outputs.pop().expect("model has layers"), None))
        }
    }

    /// Logits only.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input, false)?.0)
    }

    /// Output of the `k`-th ReLU, stopping the forward pass there.
    pub fn relu_output(&self, input: &Tensor, k: usize) -> Result<Tensor> {
        let pos = self.relu_layer(k)?;
        let (mut outputs, _) = self.run(input, pos, false)?;
        Ok(outputs.pop().expect("at least one layer ran"))
    }

    /// Mean cross-entropy over `batch` and its gradient, laid out like the parameters.
    pub fn loss_and_grad(&self, batch: &[&Sample]) -> Result<(f32, ModelParams)> {
        let g = self.batch_gradient(batch)?;
        Ok((g.loss, self.params.with_values(g.grads)?))
    }

    pub(crate) fn batch_gradient(&self, batch: &[&Sample]) -> Result<BatchGradient> {
        if batch.is_empty() {
            return Err(Error::data("loss over an empty batch"));
        }
        let classes = self.num_classes();
        let top = self.layers.len() - 1;
        let mut grads = vec![0.0f32; self.params.len()];
        let mut loss_sum = 0.0f32;
        let mut correct = 0;
        for s in batch {
            if s.label >= classes {
                return Err(Error::data(format!(
                    "label {} outside [0, {classes})",
                    s.label
                )));
            }
            let (outputs, caches) = self.run(&s.input, top, true)?;
            let logits = &outputs[top];
            if logits.argmax() == s.label {
                correct += 1;
            }
            let (loss, dlogits) = softmax_cross_entropy(logits.data(), s.label);
            loss_sum += loss;
            self.backprop(&s.input, &outputs, &caches, top, dlogits, &mut grads, false);
        }
        let scale = 1.0 / batch.len() as f32;
        for g in &mut grads {
            *g *= scale;
        }
        Ok(BatchGradient {
            loss: loss_sum * scale,
            correct,
            grads,
        })
    }

    /// Gradient of `objective(output of layer `layer`)` with respect to the input.
    pub fn input_gradient<F>(&self, input: &Tensor, layer: usize, objective: F) -> Result<Tensor>
    where
        F: Fn(&Tensor) -> (f32, Vec<f32>),
    {
        Ok(self.objective_and_input_gradient(input, layer, objective)?.1)
    }

    /// Objective value together with its input gradient.
    ///
    /// `objective` maps the layer output to `(value, d value / d output)`.
    pub fn objective_and_input_gradient<F>(
        &self,
        input: &Tensor,
        layer: usize,
        objective: F,
    ) -> Result<(f32, Tensor)>
    where
        F: Fn(&Tensor) -> (f32, Vec<f32>),
    {
        if layer >= self.layers.len() {
            return Err(Error::config(format!(
                "objective attached to layer {layer}, model has {} layers",
                self.layers.len()
            )));
        }
        let (outputs, caches) = self.run(input, layer, true)?;
        let (value, grad) = objective(&outputs[layer]);
        if grad.len() != outputs[layer].len() {
            return Err(Error::internal(format!(
                "objective gradient has {} values, layer output has {}",
                grad.len(),
                outputs[layer].len()
            )));
        }
        let mut scratch = vec![0.0f32; self.params.len()];
        let dx = self
            .backprop(input, &outputs, &caches, layer, grad, &mut scratch, true)
            .expect("input gradient requested");
        Ok((value, Tensor::from_parts(input.shape().to_vec(), dx)))
    }
}

/// Cross-entropy of softmax(logits) against `label`, and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &[f32], label: usize) -> (f32, Vec<f32>) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&z| (z - max).exp()).collect();
    let mut sum = 0.0f32;
    for &e in &exps {
        sum += e;
    }
    let loss = sum.ln() - (logits[label] - max);
    let mut grad: Vec<f32> = exps.iter().map(|&e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_dense(n: usize) -> Model {
        let mut flat = vec![0.0; n * n + n];
        for i in 0..n {
            flat[i * n + i] = 1.0;
        }
        Model::new(vec![n], vec![LayerSpec::Dense { inputs: n, outputs: n }], flat).unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let m = identity_dense(4);
        let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.25]).unwrap();
        assert_eq!(m.predict(&x).unwrap().data(), x.data());
    }

    #[test]
    fn uniform_logits_give_log_c_loss() {
        let (loss, grad) = softmax_cross_entropy(&[0.3; 10], 4);
        assert!((loss - 10f32.ln()).abs() < 1e-6);
        assert!((grad[4] + 0.9).abs() < 1e-6);
        assert!((grad[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_model_bias_gradient_is_softmax_minus_onehot() {
        let layers = vec![LayerSpec::Dense { inputs: 3, outputs: 4 }];
        let m = Model::new(vec![3], layers, vec![0.0; 16]).unwrap();
        let batch: Vec<Sample> = [(0.1, 0), (0.7, 2), (-0.4, 2), (2.0, 3)]
            .iter()
            .map(|&(v, y)| Sample::new(Tensor::filled(vec![3], v), y))
            .collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let (loss, grads) = m.loss_and_grad(&refs).unwrap();
        assert!((loss - 4f32.ln()).abs() < 1e-6);
        let bias = grads.layer(0)[12..].to_vec();
        let expected = [0.25 - 0.25, 0.25, 0.25 - 0.5, 0.25 - 0.25];
        for (b, e) in bias.iter().zip(expected) {
            assert!((b - e).abs() < 1e-6, "{bias:?}");
        }
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let m = identity_dense(3);
        let s = Sample::new(Tensor::zeros(vec![3]), 3);
        assert!(matches!(m.loss_and_grad(&[&s]), Err(Error::Data(_))));
    }

    #[test]
    fn wrong_input_shape_names_layer() {
        let m = identity_dense(3);
        let err = m.predict(&Tensor::zeros(vec![4])).unwrap_err().to_string();
        assert!(err.contains("layer 0"), "{err}");
    }

    #[test]
    fn input_gradient_of_identity_dense_sum() {
        // objective = sum of outputs; gradient is each weight row's sum
        let n = 3;
        let mut flat = vec![0.0; n * n + n];
        flat[..9].copy_from_slice(&[1.0, 2.0, 0.0, 0.0, 1.0, -1.0, 3.0, 0.0, 1.0]);
        let m = Model::new(vec![n], vec![LayerSpec::Dense { inputs: n, outputs: n }], flat)
            .unwrap();
        let x = Tensor::new(vec![3], vec![0.2, 0.4, 0.6]).unwrap();
        let g = m
            .input_gradient(&x, 0, |y| (y.data().iter().sum(), vec![1.0; y.len()]))
            .unwrap();
        assert_eq!(g.data(), &[3.0, 0.0, 4.0]);
        let id = identity_dense(3);
        let g = id
            .input_gradient(&x, 0, |y| (y.data().iter().sum(), vec![1.0; y.len()]))
            .unwrap();
        assert_eq!(g.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_objective_has_zero_input_gradient() {
        let m = identity_dense(3);
        let x = Tensor::new(vec![3], vec![0.2, 0.4, 0.6]).unwrap();
        let g = m.input_gradient(&x, 0, |y| (1.0, vec![0.0; y.len()])).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(m.input_gradient(&x, 5, |y| (1.0, vec![0.0; y.len()])).is_err());
    }

    #[test]
    fn params_offsets_must_be_contiguous() {
        assert!(ModelParams::new(vec![0.0; 5], vec![(0, 2), (3, 2)]).is_err());
        assert!(ModelParams::new(vec![0.0; 5], vec![(0, 2), (2, 2)]).is_err());
        assert!(ModelParams::new(vec![0.0; 5], vec![(0, 2), (2, 0), (2, 3)]).is_ok());
    }
}
