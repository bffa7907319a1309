//! Straightforward f64 reference implementations used as test oracles.
#![allow(dead_code)]

use fedadapt::data::synthetic::{generate, GlyphConfig};
use fedadapt::data::LabeledDataset;
use fedadapt::nn::LayerSpec;

/// A value together with its shape `[C, H, W]` or `[D]`.
#[derive(Debug, Clone)]
pub struct Map {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn layer_forward(spec: &LayerSpec, params: &[f64], x: &Map) -> Map {
    match *spec {
        LayerSpec::Dense { inputs, outputs } => {
            assert_eq!(x.data.len(), inputs);
            let (w, b) = params.split_at(inputs * outputs);
            let data = (0..outputs)
                .map(|o| b[o] + (0..inputs).map(|i| w[i * outputs + o] * x.data[i]).sum::<f64>())
                .collect();
            Map {
                shape: vec![outputs],
                data,
            }
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let (h, w) = (x.shape[1], x.shape[2]);
            let ho = (h + 2 * padding - kernel) / stride + 1;
            let wo = (w + 2 * padding - kernel) / stride + 1;
            let nw = out_channels * in_channels * kernel * kernel;
            let mut data = vec![0.0; out_channels * ho * wo];
            for o in 0..out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = params[nw + o];
                        for c in 0..in_channels {
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wi = ((o * in_channels + c) * kernel + ky) * kernel + kx;
                                    s += params[wi] * x.data[(c * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        data[(o * ho + oy) * wo + ox] = s;
                    }
                }
            }
            Map {
                shape: vec![out_channels, ho, wo],
                data,
            }
        }
        LayerSpec::Relu => Map {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        },
        LayerSpec::Maxpool2d { window, stride } => {
            let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
            let ho = (h - window) / stride + 1;
            let wo = (w - window) / stride + 1;
            let mut data = Vec::new();
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..window {
                            for dx in 0..window {
                                m = m.max(x.data[(ch * h + oy * stride + dy) * w + ox * stride + dx]);
                            }
                        }
                        data.push(m);
                    }
                }
            }
            Map {
                shape: vec![c, ho, wo],
                data,
            }
        }
        LayerSpec::GlobalAvgPool => {
            let c = x.shape[0];
            let n = x.data.len() / c;
            Map {
                shape: vec![c],
                data: x.data.chunks(n).map(|ch| ch.iter().sum::<f64>() / n as f64).collect(),
            }
        }
        LayerSpec::Flatten => Map {
            shape: vec![x.data.len()],
            data: x.data.clone(),
        },
    }
}

/// Outputs of every layer.
pub fn forward_all(layers: &[LayerSpec], params: &[f64], input: &Map) -> Vec<Map> {
    let mut out = Vec::new();
    let mut off = 0;
    let mut x = input.clone();
    for l in layers {
        let n = l.param_count();
        x = layer_forward(l, &params[off..off + n], &x);
        off += n;
        out.push(x.clone());
    }
    out
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Mean cross-entropy over a batch.
pub fn batch_loss(layers: &[LayerSpec], params: &[f64], batch: &[(Map, usize)]) -> f64 {
    batch
        .iter()
        .map(|(x, y)| cross_entropy(&forward_all(layers, params, x).last().unwrap().data, *y))
        .sum::<f64>()
        / batch.len() as f64
}

/// Central differences of `f` at `x` along the coordinates in `at`.
pub fn numeric_gradient(x: &[f64], at: &[usize], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    at.iter()
        .map(|&i| {
            let v = p[i];
            p[i] = v + h;
            let up = f(&p);
            p[i] = v - h;
            let down = f(&p);
            p[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn glyphs(size: usize, per_class: usize, seed: u64) -> LabeledDataset {
    generate(&GlyphConfig {
        size,
        per_class,
        seed,
        ..Default::default()
    })
    .unwrap()
}
