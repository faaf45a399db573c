//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use dropprune::compressor::{decay_scale, Compressor, CompressorVars, SampledMasks};
use dropprune::data::Batch;
use dropprune::layers::{Activation, CriticNetwork, InputShape, LayerKind, Mask, NetworkBuilder};
use dropprune::trainer::critic_loss;
use dropprune::{Tape, Tensor, Var};
use rand::Rng;

pub const ACTIVATIONS: [Activation; 4] = [
    Activation::Identity,
    Activation::Relu,
    Activation::Tanh,
    Activation::Sigmoid,
];

pub fn random_activation<R: Rng>(rng: &mut R) -> Activation {
    ACTIVATIONS[rng.gen_range(0..ACTIVATIONS.len())]
}

/// Overwrites every bias with uniform noise so dropped units emit
/// something other than `f(0)`.
pub fn randomize_biases<R: Rng>(net: &mut CriticNetwork, rng: &mut R) {
    for layer in &mut net.layers {
        for b in layer.bias.data_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
    }
}

/// Small random critic from one of three families: FC only, conv then FC,
/// or LSTM then FC.
pub fn random_network<R: Rng>(rng: &mut R, family: usize) -> CriticNetwork {
    let classes = rng.gen_range(2..5);
    let mut net = match family % 3 {
        0 => {
            let mut b = NetworkBuilder::new(InputShape::Vector {
                features: rng.gen_range(2..7),
            });
            for _ in 0..rng.gen_range(1..4) {
                let units = rng.gen_range(1..7);
                let act = random_activation(rng);
                b = b.fc(units, act, rng);
            }
            b.output(classes, rng).unwrap()
        }
        1 => loop {
            let side = rng.gen_range(5..10);
            let mut b = NetworkBuilder::new(InputShape::Image {
                height: side,
                width: side,
                channels: rng.gen_range(1..4),
            });
            let mut ok = true;
            let mut hw = side;
            for _ in 0..rng.gen_range(1..3) {
                let kernel = rng.gen_range(1..4);
                let stride = rng.gen_range(1..3);
                if kernel > hw {
                    ok = false;
                    break;
                }
                let out = (hw - kernel) / stride + 1;
                let pool = out >= 2 && rng.gen_bool(0.5);
                let filters = rng.gen_range(1..5);
                let act = random_activation(rng);
                b = b.conv(filters, kernel, stride, pool, act, rng).unwrap();
                hw = if pool { out / 2 } else { out };
            }
            if !ok {
                continue;
            }
            for _ in 0..rng.gen_range(0..3) {
                let units = rng.gen_range(1..6);
                let act = random_activation(rng);
                b = b.fc(units, act, rng);
            }
            break b.output(classes, rng).unwrap();
        },
        _ => {
            let mut b = NetworkBuilder::new(InputShape::Sequence {
                steps: rng.gen_range(1..6),
                features: rng.gen_range(1..5),
            });
            for _ in 0..rng.gen_range(1..3) {
                let hidden = rng.gen_range(1..6);
                b = b.lstm(hidden, rng);
            }
            for _ in 0..rng.gen_range(0..2) {
                let units = rng.gen_range(1..6);
                let act = random_activation(rng);
                b = b.fc(units, act, rng);
            }
            b.output(classes, rng).unwrap()
        }
    };
    randomize_biases(&mut net, rng);
    net
}

/// One random mask per droppable layer; empty layers are allowed iff
/// `allow_empty`.
pub fn random_masks<R: Rng>(net: &CriticNetwork, rng: &mut R, allow_empty: bool) -> Vec<Mask> {
    net.unit_counts()
        .into_iter()
        .map(|n| {
            let mut m = Mask::from_bools((0..n).map(|_| rng.gen_bool(0.6)).collect());
            if !allow_empty && m.kept() == 0 {
                m.set(rng.gen_range(0..n), true);
            }
            m
        })
        .collect()
}

pub fn random_input<R: Rng>(shape: InputShape, batch: usize, rng: &mut R) -> Tensor {
    let dims = shape.batch_shape(batch);
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

pub fn random_batch<R: Rng>(net: &CriticNetwork, batch: usize, rng: &mut R) -> Batch {
    Batch {
        inputs: random_input(net.input, batch, rng),
        labels: (0..batch).map(|_| rng.gen_range(0..net.classes())).collect(),
    }
}

/// FC critic with 4 + 3 + 3 droppable units, random biases.
pub fn toy_critic<R: Rng>(rng: &mut R) -> CriticNetwork {
    let mut net = NetworkBuilder::new(InputShape::Vector { features: 3 })
        .fc(4, Activation::Tanh, rng)
        .fc(3, Activation::Relu, rng)
        .fc(3, Activation::Sigmoid, rng)
        .output(2, rng)
        .unwrap();
    randomize_biases(&mut net, rng);
    net
}

/// Every joint mask over layers of the given sizes (total bits ≤ 20).
pub fn enumerate_masks(units: &[usize]) -> Vec<Vec<Mask>> {
    let total: usize = units.iter().sum();
    assert!(total <= 20, "enumeration of {total} bits");
    (0..1u64 << total)
        .map(|code| {
            let mut shift = 0;
            units
                .iter()
                .map(|&n| {
                    let m = Mask::from_code(code >> shift, n);
                    shift += n;
                    m
                })
                .collect()
        })
        .collect()
}

/// Probability of `masks` when unit `j` of layer `l` is kept with
/// probability `q[l][j]`, by direct product.
pub fn mask_probability(q: &[Vec<f64>], masks: &[Mask]) -> f64 {
    q.iter()
        .zip(masks)
        .flat_map(|(ql, m)| ql.iter().zip(m.bits()).map(|(&q, &z)| if z { q } else { 1.0 - q }))
        .product()
}

/// Mean cross-entropy of `batch` under `masks`.
pub fn masked_loss(net: &mut CriticNetwork, batch: &Batch, masks: &[Mask]) -> f64 {
    net.set_masks(masks).unwrap();
    let mut tape = Tape::new();
    let (loss, _) = critic_loss(&mut tape, net, batch, false).unwrap();
    let v = tape.value(loss).data()[0];
    net.clear_masks();
    v
}

/// Decay multipliers and effective keep-probabilities for raw `p`.
pub fn decayed(probs: &[Vec<f64>], gamma: f64, tau: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let scales: Vec<Vec<f64>> = probs
        .iter()
        .map(|l| l.iter().map(|&p| decay_scale(p, gamma, tau)).collect())
        .collect();
    let eff = probs
        .iter()
        .zip(&scales)
        .map(|(l, s)| l.iter().zip(s).map(|(p, s)| p * s).collect())
        .collect();
    (scales, eff)
}

pub fn sample_for(masks: &[Mask], scales: &[Vec<f64>], eff: &[Vec<f64>]) -> SampledMasks {
    SampledMasks {
        masks: masks.to_vec(),
        scales: scales.to_vec(),
        effective: eff.to_vec(),
        log_prob: mask_probability(eff, masks).ln(),
    }
}

/// Handles of every compressor parameter in `params()` order.
pub fn compressor_handles(vars: &CompressorVars) -> Vec<Var> {
    vars.w_c
        .iter()
        .chain(&vars.w_i)
        .chain(std::iter::once(&vars.w_h))
        .chain(&vars.w_o)
        .copied()
        .collect()
}

/// Flattened gradient of the tape's last backward over `handles`.
pub fn flat_grads(tape: &Tape, handles: &[Var]) -> Vec<f64> {
    handles
        .iter()
        .flat_map(|&v| match tape.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(v).len()],
        })
        .collect()
}

/// `∇φ ln μ(masks)` for the compressor at its current parameters.
pub fn score(compressor: &Compressor, views: &[Tensor], sample: &SampledMasks) -> Vec<f64> {
    let mut tape = Tape::new();
    let pass = compressor.forward(&mut tape, views, true).unwrap();
    let lp = compressor.log_prob(&mut tape, &pass, sample).unwrap();
    tape.backward(lp).unwrap();
    flat_grads(&tape, &compressor_handles(&pass.vars))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst relative error between the tape gradient of `build` and central
/// differences, over every entry of every input. The output of `build` is
/// contracted with fixed pseudo-random weights so every entry matters.
pub fn gradient_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let weights = |n: usize| -> Vec<f64> { (0..n).map(|i| ((i * 7919 % 17) as f64 - 8.0) / 8.0 + 0.3).collect() };
    let eval = |ts: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let w = weights(tape.value(out).len());
        tape.value(out).data().iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let w = weights(tape.value(out).len());
    let weighted = tape.mul_const(out, w).unwrap();
    let loss = tape.sum(weighted).unwrap();
    tape.backward(loss).unwrap();

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn droppable_kinds(net: &CriticNetwork) -> Vec<LayerKind> {
    net.droppable().map(|l| l.kind).collect()
}
