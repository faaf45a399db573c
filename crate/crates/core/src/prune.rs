//! Structural pruning: fixed masks become genuinely smaller dense matrices.

use crate::error::{Error, Result};
use crate::layers::{Activation, ConvSpec, CriticLayer, CriticNetwork, InputShape, LayerKind, Mask};
use crate::tensor::{kernels, Tensor};

/// One pruned layer. `kept` lists the original indices of the surviving
/// units in increasing order; weights follow the critic's layouts with the
/// dropped units and their downstream fan-in removed.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedLayer {
    pub kind: LayerKind,
    pub activation: Activation,
    /// Geometry with `in_c` already reduced to the upstream kept count.
    pub conv: Option<ConvSpec>,
    pub kept: Vec<usize>,
    /// Unit count of the layer before pruning.
    pub original_units: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl PrunedLayer {
    pub fn units(&self) -> usize {
        self.kept.len()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// A mask-free network of small dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedModel {
    pub input: InputShape,
    pub layers: Vec<PrunedLayer>,
}

/// Output of each original unit when its mask bit is 0: FC and conv units
/// still emit `f(b_j)`, LSTM units emit 0.
fn dropped_outputs(layer: &CriticLayer) -> Vec<f64> {
    match layer.kind {
        LayerKind::Lstm => vec![0.0; layer.units()],
        _ => layer.bias.data().iter().map(|&b| layer.activation.apply(b)).collect(),
    }
}

/// What the next layer needs to know about its input.
struct Upstream {
    kept: Vec<usize>,
    /// Per original unit (channel), the constant it emits when dropped.
    constant: Vec<f64>,
    /// Spatial positions per channel (1 unless the upstream is a conv map).
    spatial: usize,
}

impl Upstream {
    fn width(&self) -> usize {
        self.constant.len()
    }
}

/// Removes every unit whose mask bit is 0.
///
/// Dropped FC and conv units emit the constant `f(b_j)` under masking, so
/// that constant is folded into the biases of the next layer before its
/// fan-in rows are deleted. The pruned model therefore reproduces the masked
/// critic exactly (up to rounding).
pub fn prune(net: &CriticNetwork, masks: &[Mask]) -> Result<CompressedModel> {
    net.validate()?;
    if masks.len() != net.droppable_count() {
        return Err(Error::dim("prune masks", &[masks.len()], &[net.droppable_count()]));
    }
    let mut up = match net.input {
        InputShape::Vector { features } | InputShape::Sequence { features, .. } => Upstream {
            kept: (0..features).collect(),
            constant: vec![0.0; features],
            spatial: 1,
        },
        InputShape::Image {
            height,
            width,
            channels,
        } => Upstream {
            kept: (0..channels).collect(),
            constant: vec![0.0; channels],
            spatial: height * width,
        },
    };

    let mut layers = Vec::with_capacity(net.layers.len());
    for (idx, layer) in net.layers.iter().enumerate() {
        let mask = match layer.kind {
            LayerKind::Output => Mask::ones(layer.units()),
            _ => masks[idx].clone(),
        };
        if mask.len() != layer.units() {
            return Err(Error::dim("prune mask", &[mask.len()], &[layer.units()]));
        }
        let kept = mask.kept_indices();
        if kept.is_empty() {
            return Err(Error::Contract(format!("layer {idx} keeps no units")));
        }
        let pruned = match layer.kind {
            LayerKind::FullyConnected | LayerKind::Output => prune_dense(layer, &up, &kept),
            LayerKind::Convolutional => prune_conv(layer, &up, &kept)?,
            LayerKind::Lstm => prune_lstm(layer, &up, &kept),
        };
        up = Upstream {
            kept,
            constant: dropped_outputs(layer),
            spatial: match layer.conv {
                Some(spec) => {
                    let (h, w) = spec.output_hw();
                    h * w
                }
                None => 1,
            },
        };
        layers.push(pruned);
    }
    Ok(CompressedModel {
        input: net.input,
        layers,
    })
}

/// Upstream index sets for an input row layout of `spatial` blocks of
/// `width` channels: (kept rows, dropped rows with their channel).
fn split_rows(up: &Upstream, spatial: usize) -> (Vec<usize>, Vec<(usize, usize)>) {
    let width = up.width();
    let mut keep_flag = vec![false; width];
    for &k in &up.kept {
        keep_flag[k] = true;
    }
    let mut kept_rows = Vec::with_capacity(spatial * up.kept.len());
    let mut dropped_rows = Vec::new();
    for pos in 0..spatial {
        for (ch, &keep) in keep_flag.iter().enumerate() {
            let row = pos * width + ch;
            if keep {
                kept_rows.push(row);
            } else {
                dropped_rows.push((row, ch));
            }
        }
    }
    (kept_rows, dropped_rows)
}

/// Selects `rows × cols` of a row-major matrix with `w_cols` columns.
fn gather(w: &Tensor, rows: &[usize], cols: &[usize]) -> Tensor {
    let n = w.shape()[1];
    let data = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| w.data()[r * n + c]))
        .collect();
    Tensor::new(vec![rows.len(), cols.len()], data).expect("gathered extents are positive")
}

/// Kept biases plus the folded contribution of dropped upstream rows.
fn folded_bias(layer: &CriticLayer, up: &Upstream, dropped_rows: &[(usize, usize)], kept: &[usize]) -> Tensor {
    let n = layer.weight.shape()[1];
    let w = layer.weight.data();
    let b = layer.bias.data();
    let data = kept
        .iter()
        .map(|&m| {
            let fold: f64 = dropped_rows
                .iter()
                .map(|&(row, ch)| up.constant[ch] * w[row * n + m])
                .sum();
            b[m] + fold
        })
        .collect();
    Tensor::new(vec![kept.len()], data).expect("non-empty kept set")
}

fn prune_dense(layer: &CriticLayer, up: &Upstream, kept: &[usize]) -> PrunedLayer {
    let (rows, dropped) = split_rows(up, up.spatial);
    PrunedLayer {
        kind: layer.kind,
        activation: layer.activation,
        conv: None,
        kept: kept.to_vec(),
        original_units: layer.units(),
        weight: gather(&layer.weight, &rows, kept),
        bias: folded_bias(layer, up, &dropped, kept),
    }
}

fn prune_conv(layer: &CriticLayer, up: &Upstream, kept: &[usize]) -> Result<PrunedLayer> {
    let mut spec = layer
        .conv
        .ok_or_else(|| Error::Contract("conv layer without geometry".into()))?;
    let taps = spec.geometry.kernel_h * spec.geometry.kernel_w;
    // kernel rows are (dy, dx, channel), so the tap index plays the role
    // of the spatial position
    let (rows, dropped) = split_rows(up, taps);
    spec.geometry.in_c = up.kept.len();
    Ok(PrunedLayer {
        kind: layer.kind,
        activation: layer.activation,
        conv: Some(spec),
        kept: kept.to_vec(),
        original_units: layer.units(),
        weight: gather(&layer.weight, &rows, kept),
        bias: folded_bias(layer, up, &dropped, kept),
    })
}

fn prune_lstm(layer: &CriticLayer, up: &Upstream, kept: &[usize]) -> PrunedLayer {
    let n = layer.units();
    let n_in = layer.fan_in();
    let rows: Vec<usize> = (0..4).flat_map(|g| kept.iter().map(move |&j| g * n + j)).collect();
    let cols: Vec<usize> = up
        .kept
        .iter()
        .copied()
        .chain(kept.iter().map(|&j| n_in + j))
        .collect();
    let bias = rows.iter().map(|&r| layer.bias.data()[r]).collect();
    PrunedLayer {
        kind: LayerKind::Lstm,
        activation: layer.activation,
        conv: None,
        kept: kept.to_vec(),
        original_units: n,
        weight: gather(&layer.weight, &rows, &cols),
        bias: Tensor::new(vec![rows.len()], bias).expect("non-empty kept set"),
    }
}

impl CompressedModel {
    /// Identity pruning of an unmasked critic.
    pub fn from_critic(net: &CriticNetwork) -> Result<Self> {
        let masks: Vec<Mask> = net.unit_counts().into_iter().map(Mask::ones).collect();
        prune(net, &masks)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(PrunedLayer::param_count).sum()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, PrunedLayer::units)
    }

    /// Rebuilds a critic with the pruned extents and all-ones masks.
    pub fn to_critic(&self) -> Result<CriticNetwork> {
        let layers = self
            .layers
            .iter()
            .map(|l| CriticLayer {
                kind: l.kind,
                weight: l.weight.clone(),
                bias: l.bias.clone(),
                activation: l.activation,
                conv: l.conv,
                keep_prob: vec![1.0; l.units()],
                mask: Mask::ones(l.units()),
            })
            .collect();
        CriticNetwork::new(self.input, layers)
    }

    /// Checks the structural invariants (extents chain, kept maps increasing).
    pub fn validate(&self) -> Result<()> {
        for (idx, l) in self.layers.iter().enumerate() {
            if l.kept.is_empty() || l.kept.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Contract(format!("layer {idx}: kept indices not strictly increasing")));
            }
            if l.kept.last().is_some_and(|&k| k >= l.original_units) {
                return Err(Error::Contract(format!("layer {idx}: kept index beyond original units")));
            }
            let units = match l.kind {
                LayerKind::Lstm => l.weight.shape().first().map_or(0, |r| r / 4),
                _ => l.weight.shape().get(1).copied().unwrap_or(0),
            };
            if units != l.units() {
                return Err(Error::dim("pruned layer", l.weight.shape(), &[l.units()]));
            }
        }
        self.to_critic().map(|_| ())
    }

    /// Forward pass of a `[batch, ...]` input through the dense layers
    /// only. Returns `batch×classes` logits.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let want = self.input.batch_shape(1);
        let shape = input.shape();
        if shape.len() != want.len() || shape[1..] != want[1..] {
            return Err(Error::dim("infer input", shape, &want));
        }
        let batch = shape[0];
        let mut act: Vec<f64> = Vec::new();
        let mut seq: Option<Vec<Vec<f64>>> = None;
        let mut cur = input.data().to_vec();
        if let InputShape::Sequence { steps, features } = self.input {
            let steps_data = (0..steps)
                .map(|t| {
                    (0..batch)
                        .flat_map(|b| {
                            let off = (b * steps + t) * features;
                            input.data()[off..off + features].iter().copied()
                        })
                        .collect()
                })
                .collect();
            seq = Some(steps_data);
        }
        for layer in &self.layers {
            match layer.kind {
                LayerKind::Convolutional => {
                    let spec = layer.conv.expect("validated conv geometry");
                    cur = conv_infer(layer, &spec, &cur, batch);
                }
                LayerKind::Lstm => {
                    let steps = seq.take().expect("sequence input before lstm");
                    seq = Some(lstm_infer(layer, &steps, batch));
                }
                LayerKind::FullyConnected | LayerKind::Output => {
                    if let Some(steps) = seq.take() {
                        cur = steps.into_iter().last().expect("at least one step");
                    }
                    let (d_in, d_out) = (layer.weight.shape()[0], layer.weight.shape()[1]);
                    act.clear();
                    act.resize(batch * d_out, 0.0);
                    kernels::gemm(batch, d_in, d_out, &cur, false, layer.weight.data(), false, &mut act, false);
                    add_bias_activate(&mut act, layer.bias.data(), layer.activation);
                    std::mem::swap(&mut cur, &mut act);
                }
            }
        }
        Tensor::new(vec![batch, self.classes()], cur)
    }

    /// Arg-max class per example.
    pub fn predict(&self, input: &Tensor) -> Result<Vec<usize>> {
        let logits = self.infer(input)?;
        Ok(logits
            .data()
            .chunks_exact(self.classes())
            .map(crate::trainer::argmax)
            .collect())
    }
}

fn add_bias_activate(rows: &mut [f64], bias: &[f64], activation: Activation) {
    for row in rows.chunks_exact_mut(bias.len()) {
        for (y, b) in row.iter_mut().zip(bias) {
            *y = activation.apply(*y + b);
        }
    }
}

fn conv_infer(layer: &PrunedLayer, spec: &ConvSpec, input: &[f64], batch: usize) -> Vec<f64> {
    let g = spec.geometry;
    let cols = kernels::im2col(input, batch, &g);
    let rows = batch * g.patches();
    let c_out = layer.units();
    let mut out = vec![0.0; rows * c_out];
    kernels::gemm(rows, g.patch_len(), c_out, &cols, false, layer.weight.data(), false, &mut out, false);
    add_bias_activate(&mut out, layer.bias.data(), layer.activation);
    if spec.pool {
        kernels::max_pool2(&out, batch, g.out_h(), g.out_w(), c_out).0
    } else {
        out
    }
}

fn lstm_infer(layer: &PrunedLayer, steps: &[Vec<f64>], batch: usize) -> Vec<Vec<f64>> {
    let n = layer.units();
    let width = layer.weight.shape()[1];
    let n_in = width - n;
    let mut h = vec![0.0; batch * n];
    let mut c = vec![0.0; batch * n];
    let mut joined = vec![0.0; batch * width];
    let mut pre = vec![0.0; batch * 4 * n];
    let mut out = Vec::with_capacity(steps.len());
    for x in steps {
        for b in 0..batch {
            joined[b * width..b * width + n_in].copy_from_slice(&x[b * n_in..(b + 1) * n_in]);
            joined[b * width + n_in..(b + 1) * width].copy_from_slice(&h[b * n..(b + 1) * n]);
        }
        kernels::gemm(batch, width, 4 * n, &joined, false, layer.weight.data(), true, &mut pre, false);
        for b in 0..batch {
            let p = &mut pre[b * 4 * n..(b + 1) * 4 * n];
            for (v, bias) in p.iter_mut().zip(layer.bias.data()) {
                *v += bias;
            }
            for j in 0..n {
                let i = kernels::sigmoid(p[j]);
                let f = kernels::sigmoid(p[n + j]);
                let o = kernels::sigmoid(p[2 * n + j]);
                let g = p[3 * n + j].tanh();
                let cell = f * c[b * n + j] + i * g;
                c[b * n + j] = cell;
                h[b * n + j] = o * cell.tanh();
            }
        }
        out.push(h.clone());
    }
    out
}
