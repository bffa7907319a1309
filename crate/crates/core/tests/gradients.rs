mod common;

use common::*;
use fedadapt::nn::{Architecture, LayerSpec, Model, Sample};
use fedadapt::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_layers(trial: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<LayerSpec>) {
    let classes = rng.gen_range(2..5);
    match trial % 5 {
        0 => {
            let d = rng.gen_range(3..9);
            let h = rng.gen_range(2..7);
            (
                vec![d],
                vec![
                    LayerSpec::Dense { inputs: d, outputs: h },
                    LayerSpec::Relu,
                    LayerSpec::Dense {
                        inputs: h,
                        outputs: classes,
                    },
                ],
            )
        }
        1 => {
            let c = rng.gen_range(1..3);
            let f = rng.gen_range(2..5);
            (
                vec![c, 6, 6],
                vec![
                    LayerSpec::conv3x3(c, f),
                    LayerSpec::Relu,
                    LayerSpec::Maxpool2d { window: 2, stride: 2 },
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        inputs: f * 9,
                        outputs: classes,
                    },
                ],
            )
        }
        2 => {
            let f = rng.gen_range(2..5);
            (
                vec![1, 7, 7],
                vec![
                    LayerSpec::Conv2d {
                        in_channels: 1,
                        out_channels: f,
                        kernel: 3,
                        stride: 2,
                        padding: 0,
                    },
                    LayerSpec::Relu,
                    LayerSpec::GlobalAvgPool,
                    LayerSpec::Dense {
                        inputs: f,
                        outputs: classes,
                    },
                ],
            )
        }
        3 => {
            let arch = Architecture::ALL[rng.gen_range(0..3)];
            (vec![1, 8, 8], arch.layers(&[1, 8, 8], classes).unwrap())
        }
        _ => (
            vec![2, 5, 5],
            vec![
                LayerSpec::conv3x3(2, 3),
                LayerSpec::Relu,
                LayerSpec::conv3x3(3, 2),
                LayerSpec::Relu,
                LayerSpec::Maxpool2d { window: 3, stride: 1 },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 18,
                    outputs: classes,
                },
            ],
        ),
    }
}

/// `Model::init` with biases drawn from U(-0.1, 0.1), so no pre-activation
/// sits exactly on a ReLU kink.
fn model_with_biases(shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64, rng: &mut ChaCha8Rng) -> Model {
    let m = Model::init(shape.clone(), layers.clone(), seed).unwrap();
    let mut flat = m.params().flat().to_vec();
    for (spec, &(start, len)) in layers.iter().zip(m.params().offsets()) {
        for v in &mut flat[start + spec.weight_count()..start + len] {
            *v = rng.gen_range(-0.1..0.1);
        }
    }
    Model::new(shape, layers, flat).unwrap()
}

fn random_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn as_map(t: &Tensor) -> Map {
    Map {
        shape: t.shape().to_vec(),
        data: to_f64(t.data()),
    }
}

/// Up to `max` distinct coordinates out of `n`.
fn coordinates(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, max).into_vec()
}

fn close(a: f64, b: f64, atol: f64, rtol: f64) -> bool {
    (a - b).abs() <= atol + rtol * b.abs()
}

#[test]
fn forward_matches_reference_on_random_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let (shape, layers) = random_layers(trial, &mut rng);
        let model = Model::init(shape.clone(), layers.clone(), trial as u64).unwrap();
        let x = random_input(&shape, &mut rng);
        let (out, trace) = model.forward(&x, true).unwrap();
        let reference = forward_all(&layers, &to_f64(model.params().flat()), &as_map(&x));
        let trace = trace.unwrap();
        for (i, r) in reference.iter().enumerate() {
            let got = trace.layer_output(i).unwrap();
            assert_eq!(got.shape(), r.shape.as_slice(), "trial {trial} layer {i}");
            for (a, b) in got.data().iter().zip(&r.data) {
                assert!(close(*a as f64, *b, 1e-5, 1e-5), "trial {trial} layer {i}: {a} vs {b}");
            }
        }
        assert_eq!(out.data(), trace.outputs().last().unwrap().data());
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..20 {
        let (shape, layers) = random_layers(trial, &mut rng);
        let model = model_with_biases(shape.clone(), layers.clone(), 100 + trial as u64, &mut rng);
        let classes = model.num_classes();
        let samples: Vec<Sample> = (0..3)
            .map(|_| Sample::new(random_input(&shape, &mut rng), rng.gen_range(0..classes)))
            .collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let (loss, grad) = model.loss_and_grad(&batch).unwrap();
        let reference: Vec<(Map, usize)> = samples.iter().map(|s| (as_map(&s.input), s.label)).collect();
        let p = to_f64(model.params().flat());
        let ref_loss = batch_loss(&layers, &p, &reference);
        assert!(close(loss as f64, ref_loss, 1e-5, 1e-5), "trial {trial}: loss {loss} vs {ref_loss}");
        let at = coordinates(p.len(), 200, &mut rng);
        let numeric = numeric_gradient(&p, &at, 1e-6, |q| batch_loss(&layers, q, &reference));
        for (&i, n) in at.iter().zip(&numeric) {
            let a = &grad.flat()[i];
            assert!(close(*a as f64, *n, 1e-4, 1e-3), "trial {trial} param {i}: {a} vs {n}");
        }
    }
}

#[test]
fn input_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..20 {
        let (shape, layers) = random_layers(trial, &mut rng);
        let model = model_with_biases(shape.clone(), layers.clone(), 200 + trial as u64, &mut rng);
        let x = random_input(&shape, &mut rng);
        let layer = rng.gen_range(0..layers.len());
        let n = model.layer_output_shape(layer).unwrap().iter().product::<usize>();
        let coef: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // objective: a fixed linear functional of the chosen layer's output
        let c32: Vec<f32> = coef.iter().map(|&c| c as f32).collect();
        let g = model
            .input_gradient(&x, layer, |t| {
                (t.data().iter().zip(&c32).map(|(a, b)| a * b).sum(), c32.clone())
            })
            .unwrap();
        let p = to_f64(model.params().flat());
        let at: Vec<usize> = (0..x.len()).collect();
        let numeric = numeric_gradient(&to_f64(x.data()), &at, 1e-6, |v| {
            let m = Map {
                shape: shape.clone(),
                data: v.to_vec(),
            };
            forward_all(&layers, &p, &m)[layer]
                .data
                .iter()
                .zip(&coef)
                .map(|(a, b)| a * b)
                .sum()
        });
        for (i, (a, n)) in g.data().iter().zip(&numeric).enumerate() {
            assert!(close(*a as f64, *n, 1e-4, 1e-3), "trial {trial} input {i}: {a} vs {n}");
        }
    }
}
