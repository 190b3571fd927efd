//! Test-only reference implementations. These are deliberately naive
//! nested-loop versions written from the operator definitions, sharing no
//! code with the library kernels.
#![allow(dead_code)]

use crackedge::graph::{GraphBuilder, ModelGraph, OpKind, Padding};
use crackedge::optimize::{collect_calibration_stats, quantize_model, QuantizedModel};
use crackedge::runtime::FloatTensor;
use crackedge::Scalar;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random chain: 1-3 conv blocks (optional relu / pool), flatten, dense,
/// optional relu, dense(2). Spatial size <= 8, channels <= 4, weights in
/// [-1, 1].
pub fn random_net<T: Scalar>(rng: &mut ChaCha8Rng) -> ModelGraph<T> {
    let h = rng.gen_range(1..=8);
    let w = rng.gen_range(1..=8);
    let c = rng.gen_range(1..=4);
    let mut b = GraphBuilder::<T>::new("random", "x", vec![1, h, w, c]);
    for i in 0..rng.gen_range(1..=3) {
        let [_, h, w, _] = b.current_shape().try_into().unwrap();
        let k = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let padding = if rng.gen_bool(0.5) && k <= h && k <= w { Padding::Valid } else { Padding::Same };
        b = b.conv2d(&format!("conv{i}"), rng.gen_range(1..=4), k, stride, padding).unwrap();
        if rng.gen_bool(0.7) {
            b = b.relu(&format!("relu{i}")).unwrap();
        }
        let [_, h, w, _] = b.current_shape().try_into().unwrap();
        if rng.gen_bool(0.5) {
            let window = rng.gen_range(1..=2).min(h).min(w);
            b = b.max_pool(&format!("pool{i}"), window, rng.gen_range(1..=2)).unwrap();
        }
    }
    b = b.flatten("flatten").unwrap().dense("fc1", rng.gen_range(1..=4)).unwrap();
    if rng.gen_bool(0.5) {
        b = b.relu("fc1_relu").unwrap();
    }
    let mut g = b.dense("fc2", 2).unwrap().finish();
    randomize_weights(&mut g, rng);
    g
}

pub fn randomize_weights<T: Scalar>(g: &mut ModelGraph<T>, rng: &mut ChaCha8Rng) {
    let ids: Vec<String> = g.parameter_ids().into_iter().map(String::from).collect();
    for id in ids {
        let n = g.tensors[&id].num_elements();
        let data = (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-1.0..=1.0))).collect();
        g.set_weights(&id, data).unwrap();
    }
}

pub fn random_input<T: Scalar>(g: &ModelGraph<T>, rng: &mut ChaCha8Rng) -> FloatTensor<T> {
    let shape = g.input.shape.clone();
    let n = shape.iter().product();
    FloatTensor::new(shape, (0..n).map(|_| T::from_f64_lossy(rng.gen_range(0.0..=1.0))).collect())
}

/// Calibrates on a few random inputs and quantizes.
pub fn random_quantized(g: &ModelGraph<f64>, rng: &mut ChaCha8Rng) -> QuantizedModel {
    let calib: Vec<_> = (0..4).map(|_| random_input(g, rng)).collect();
    let stats = collect_calibration_stats(g, &calib).unwrap();
    quantize_model(g, &stats).unwrap()
}

/// Output extent of a convolution or pooling window along one axis.
fn extent(input: usize, k: usize, stride: usize, same: bool) -> usize {
    if same {
        input.div_ceil(stride)
    } else {
        (input - k) / stride + 1
    }
}

fn same_pad(input: usize, out: usize, k: usize, stride: usize) -> usize {
    let needed = (out - 1) * stride + k;
    if needed > input {
        (needed - input) / 2
    } else {
        0
    }
}

/// Float oracle in f64. Returns the final tensor, flattened.
pub fn oracle_float(g: &ModelGraph<f64>, input: &[f64]) -> Vec<f64> {
    let mut shape = g.input.shape.clone();
    let mut x = input.to_vec();
    for node in &g.nodes {
        match node.kind {
            OpKind::Conv2D { stride, padding } => {
                let wid = &node.inputs[1];
                let ws = &g.tensors[wid].shape;
                let (oc, kh, kw, ic) = (ws[0], ws[1], ws[2], ws[3]);
                let wt = &g.weights[wid];
                let bias = &g.weights[&node.inputs[2]];
                let (h, w) = (shape[1], shape[2]);
                let same = padding == Padding::Same;
                let oh = extent(h, kh, stride, same);
                let ow = extent(w, kw, stride, same);
                let (pt, pl) = if same { (same_pad(h, oh, kh, stride), same_pad(w, ow, kw, stride)) } else { (0, 0) };
                let mut y = vec![0.0; oh * ow * oc];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for o in 0..oc {
                            let mut acc = bias[o];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pt as isize;
                                    let ix = (ox * stride + kx) as isize - pl as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    for ci in 0..ic {
                                        let xv = x[((iy as usize) * w + ix as usize) * ic + ci];
                                        acc += xv * wt[((o * kh + ky) * kw + kx) * ic + ci];
                                    }
                                }
                            }
                            y[(oy * ow + ox) * oc + o] = acc;
                        }
                    }
                }
                shape = vec![1, oh, ow, oc];
                x = y;
            }
            OpKind::MaxPool2D { window, stride } => {
                let (h, w, c) = (shape[1], shape[2], shape[3]);
                let oh = extent(h, window, stride, false);
                let ow = extent(w, window, stride, false);
                let mut y = vec![f64::NEG_INFINITY; oh * ow * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            for dy in 0..window {
                                for dx in 0..window {
                                    let v = x[((oy * stride + dy) * w + ox * stride + dx) * c + ch];
                                    let slot = &mut y[(oy * ow + ox) * c + ch];
                                    if v > *slot {
                                        *slot = v;
                                    }
                                }
                            }
                        }
                    }
                }
                shape = vec![1, oh, ow, c];
                x = y;
            }
            OpKind::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            OpKind::Flatten => shape = vec![1, x.len()],
            OpKind::Dense => {
                let wid = &node.inputs[1];
                let out = g.tensors[wid].shape[0];
                let wt = &g.weights[wid];
                let bias = &g.weights[&node.inputs[2]];
                let n = x.len();
                x = (0..out).map(|o| bias[o] + (0..n).map(|i| wt[o * n + i] * x[i]).sum::<f64>()).collect();
                shape = vec![out];
            }
            OpKind::Softmax => {
                let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                x = e.into_iter().map(|v| v / s).collect();
            }
        }
    }
    x
}

/// `round(acc * m0 / 2^(31 + shift))`, ties away from zero, in exact
/// integer arithmetic.
pub fn oracle_requant(acc: i64, m0: i32, shift: i32, zero_point: i32) -> i8 {
    let num = acc as i128 * m0 as i128;
    let den = 1i128 << (31 + shift);
    let mag = (num.abs() + den / 2) / den;
    let q = if num < 0 { -mag } else { mag };
    (q + zero_point as i128).clamp(-128, 127) as i8
}

/// Integer oracle: int8 in, int8 logits out.
pub fn oracle_int(qm: &QuantizedModel, input: &[i8]) -> Vec<i8> {
    let g = &qm.graph;
    let mut shape = g.input.shape.clone();
    let mut x = input.to_vec();
    let mut current = g.input.id.clone();
    for node in &g.nodes {
        let zp_in = qm.act_qparams[&current].zero_point as i64;
        let out_zp = qm.act_qparams[&node.output].zero_point;
        match node.kind {
            OpKind::Conv2D { stride, padding } => {
                let wid = &node.inputs[1];
                let ws = &g.tensors[wid].shape;
                let (oc, kh, kw, ic) = (ws[0], ws[1], ws[2], ws[3]);
                let wt = &qm.weight_q[wid];
                let bias = &qm.bias_q[&node.inputs[2]];
                let rq = qm.requant[&node.id];
                let (h, w) = (shape[1], shape[2]);
                let same = padding == Padding::Same;
                let oh = extent(h, kh, stride, same);
                let ow = extent(w, kw, stride, same);
                let (pt, pl) = if same { (same_pad(h, oh, kh, stride), same_pad(w, ow, kw, stride)) } else { (0, 0) };
                let mut y = vec![0i8; oh * ow * oc];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for o in 0..oc {
                            let mut acc = bias[o] as i64;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pt as isize;
                                    let ix = (ox * stride + kx) as isize - pl as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    for ci in 0..ic {
                                        let xv = x[((iy as usize) * w + ix as usize) * ic + ci] as i64 - zp_in;
                                        acc += xv * wt[((o * kh + ky) * kw + kx) * ic + ci] as i64;
                                    }
                                }
                            }
                            y[(oy * ow + ox) * oc + o] = oracle_requant(acc, rq.m0, rq.shift, out_zp);
                        }
                    }
                }
                shape = vec![1, oh, ow, oc];
                x = y;
            }
            OpKind::MaxPool2D { window, stride } => {
                let (h, w, c) = (shape[1], shape[2], shape[3]);
                let oh = extent(h, window, stride, false);
                let ow = extent(w, window, stride, false);
                let mut y = vec![i8::MIN; oh * ow * c];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            for dy in 0..window {
                                for dx in 0..window {
                                    let v = x[((oy * stride + dy) * w + ox * stride + dx) * c + ch];
                                    let slot = &mut y[(oy * ow + ox) * c + ch];
                                    *slot = (*slot).max(v);
                                }
                            }
                        }
                    }
                }
                shape = vec![1, oh, ow, c];
                x = y;
            }
            OpKind::Relu => x.iter_mut().for_each(|v| *v = (*v).max(zp_in as i8)),
            OpKind::Flatten => shape = vec![1, x.len()],
            OpKind::Dense => {
                let wid = &node.inputs[1];
                let out = g.tensors[wid].shape[0];
                let wt = &qm.weight_q[wid];
                let bias = &qm.bias_q[&node.inputs[2]];
                let rq = qm.requant[&node.id];
                let n = x.len();
                x = (0..out)
                    .map(|o| {
                        let acc = bias[o] as i64
                            + (0..n).map(|i| (x[i] as i64 - zp_in) * wt[o * n + i] as i64).sum::<i64>();
                        oracle_requant(acc, rq.m0, rq.shift, out_zp)
                    })
                    .collect();
                shape = vec![out];
            }
            OpKind::Softmax => panic!("softmax is not an int8 kernel"),
        }
        current = node.output.clone();
    }
    x
}

/// Quantizes a float input with the model's input qparams, written out
/// from the affine definition.
pub fn oracle_quantize_input(qm: &QuantizedModel, x: &[f64]) -> Vec<i8> {
    let p = qm.act_qparams[&qm.graph.input.id];
    x.iter()
        .map(|&v| ((v / p.scale).round() + p.zero_point as f64).clamp(-128.0, 127.0) as i8)
        .collect()
}

/// The hand-built classifier with its softmax head stripped, calibrated on
/// 16 synthetic images per class drawn at `calib_seed`.
pub fn quantized_handcrafted(calib_seed: u64) -> (crackedge::Model, QuantizedModel) {
    use crackedge::compat::{default_kl520_profile, strip_unsupported_head};
    use crackedge::harness::{build_handcrafted_model, synth_samples, SynthConfig};
    use crackedge::runtime::preprocess_for;

    let (g, _) = strip_unsupported_head(&build_handcrafted_model::<f32>(), &default_kl520_profile()).unwrap();
    let cfg = SynthConfig { n_per_class: 16, seed: calib_seed, ..Default::default() };
    let inputs: Vec<FloatTensor<f32>> =
        synth_samples(&cfg).unwrap().iter().map(|s| preprocess_for(&s.image, &g).unwrap()).collect();
    let qm = quantize_model(&g, &collect_calibration_stats(&g, &inputs).unwrap()).unwrap();
    (g, qm)
}
