//! Dropout-instrumented layers of the network being compressed (the critic).
//!
//! Every non-output layer owns a set of droppable units: FC neurons,
//! convolution kernels or LSTM hidden dimensions. A binary [`Mask`] over
//! those units multiplies the columns of the layer's weight matrix, so a
//! dropped unit contributes nothing through its weights while its bias still
//! flows. LSTM layers additionally mask their hidden state, using one mask for
//! every time step of a sequence.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    FullyConnected,
    Convolutional,
    Lstm,
    Output,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::FullyConnected => 0,
            LayerKind::Convolutional => 1,
            LayerKind::Lstm => 2,
            LayerKind::Output => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => LayerKind::FullyConnected,
            1 => LayerKind::Convolutional,
            2 => LayerKind::Lstm,
            3 => LayerKind::Output,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => crate::tensor::kernels::sigmoid(x),
        }
    }

    fn record(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Sigmoid => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Sigmoid,
            _ => return None,
        })
    }
}

/// Binary keep/drop decision per droppable unit.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask(Vec<bool>);

impl Mask {
    pub fn ones(n: usize) -> Self {
        Mask(vec![true; n])
    }

    pub fn zeros(n: usize) -> Self {
        Mask(vec![false; n])
    }

    pub fn from_bools(bits: Vec<bool>) -> Self {
        Mask(bits)
    }

    /// Bit `j` of `code` decides unit `j`.
    pub fn from_code(code: u64, n: usize) -> Self {
        Mask((0..n).map(|j| code >> j & 1 == 1).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, j: usize) -> bool {
        self.0[j]
    }

    pub fn set(&mut self, j: usize, keep: bool) {
        self.0[j] = keep;
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn kept(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn all_kept(&self) -> bool {
        self.0.iter().all(|&b| b)
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(j, &b)| b.then_some(j))
            .collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

impl std::fmt::Display for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Convolution geometry plus the optional 2×2 max-pool folded into `f(·)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub geometry: ConvGeometry,
    pub pool: bool,
}

impl ConvSpec {
    /// `(height, width)` of the layer's output map after pooling.
    pub fn output_hw(&self) -> (usize, usize) {
        let (h, w) = (self.geometry.out_h(), self.geometry.out_w());
        if self.pool {
            (h / 2, w / 2)
        } else {
            (h, w)
        }
    }
}

/// One layer of the critic.
///
/// Weight layouts: FC and output `d_in×d_out`; convolution
/// `(kh·kw·c_in)×c_out` with one vectorized kernel per column; LSTM
/// `4n×(n_in+n)` with gate blocks in (input, forget, output, cell) order.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticLayer {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
    pub conv: Option<ConvSpec>,
    /// Keep-probability per droppable unit, as last set by the compressor.
    pub keep_prob: Vec<f64>,
    pub mask: Mask,
}

impl CriticLayer {
    pub fn fully_connected<R: Rng + ?Sized>(d_in: usize, d_out: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = (6.0 / d_in as f64).sqrt();
        Self::dense(LayerKind::FullyConnected, d_in, d_out, activation, bound, rng)
    }

    pub fn output<R: Rng + ?Sized>(d_in: usize, classes: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (d_in + classes) as f64).sqrt();
        Self::dense(LayerKind::Output, d_in, classes, Activation::Identity, bound, rng)
    }

    fn dense<R: Rng + ?Sized>(
        kind: LayerKind,
        d_in: usize,
        d_out: usize,
        activation: Activation,
        bound: f64,
        rng: &mut R,
    ) -> Self {
        CriticLayer {
            kind,
            weight: Tensor::uniform(&[d_in, d_out], bound, rng),
            bias: Tensor::zeros(&[d_out]),
            activation,
            conv: None,
            keep_prob: vec![1.0; d_out],
            mask: Mask::ones(d_out),
        }
    }

    pub fn convolutional<R: Rng + ?Sized>(
        geometry: ConvGeometry,
        filters: usize,
        pool: bool,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        geometry.validate()?;
        let spec = ConvSpec { geometry, pool };
        let (oh, ow) = (geometry.out_h(), geometry.out_w());
        if pool && (oh < 2 || ow < 2) {
            return Err(Error::dim("conv pool", &[oh, ow], &[2, 2]));
        }
        let fan_in = geometry.patch_len();
        let bound = (6.0 / fan_in as f64).sqrt();
        Ok(CriticLayer {
            kind: LayerKind::Convolutional,
            weight: Tensor::uniform(&[fan_in, filters], bound, rng),
            bias: Tensor::zeros(&[filters]),
            activation,
            conv: Some(spec),
            keep_prob: vec![1.0; filters],
            mask: Mask::ones(filters),
        })
    }

    pub fn lstm<R: Rng + ?Sized>(n_in: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut bias = Tensor::zeros(&[4 * hidden]);
        // forget-gate bias of 1
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        CriticLayer {
            kind: LayerKind::Lstm,
            weight: Tensor::uniform(&[4 * hidden, n_in + hidden], bound, rng),
            bias,
            activation: Activation::Identity,
            conv: None,
            keep_prob: vec![1.0; hidden],
            mask: Mask::ones(hidden),
        }
    }

    /// Number of droppable units (output units for the output layer).
    pub fn units(&self) -> usize {
        match self.kind {
            LayerKind::Lstm => self.weight.shape()[0] / 4,
            _ => self.weight.shape()[1],
        }
    }

    /// Input extent seen by the weight matrix (`n_in` for LSTM).
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Lstm => self.weight.shape()[1] - self.units(),
            _ => self.weight.shape()[0],
        }
    }

    pub fn is_droppable(&self) -> bool {
        self.kind != LayerKind::Output
    }

    /// Parameters in the compressor's `d_f×d_drop` view, one column per unit.
    pub fn reshape_for_compressor(&self) -> Result<Tensor> {
        match self.kind {
            LayerKind::Output => Err(Error::Contract(
                "output layers carry no dropout and have no compressor view".into(),
            )),
            LayerKind::FullyConnected | LayerKind::Convolutional => Ok(self.weight.clone()),
            LayerKind::Lstm => lstm_to_unit_columns(&self.weight),
        }
    }
}

/// `4n×(n_in+n)` → `4(n_in+n)×n`: column `j` stacks the four gate rows of
/// hidden unit `j`.
pub fn lstm_to_unit_columns(w: &Tensor) -> Result<Tensor> {
    let (rows, width) = w.dims2()?;
    if rows % 4 != 0 {
        return Err(Error::dim("lstm reshape", w.shape(), &[4]));
    }
    let n = rows / 4;
    let mut out = Tensor::zeros(&[4 * width, n]);
    for gate in 0..4 {
        for j in 0..n {
            for c in 0..width {
                out.set2(gate * width + c, j, w.at2(gate * n + j, c));
            }
        }
    }
    Ok(out)
}

/// Inverse of [`lstm_to_unit_columns`].
pub fn lstm_from_unit_columns(v: &Tensor) -> Result<Tensor> {
    let (rows, n) = v.dims2()?;
    if rows % 4 != 0 {
        return Err(Error::dim("lstm reshape", v.shape(), &[4]));
    }
    let width = rows / 4;
    let mut out = Tensor::zeros(&[4 * n, width]);
    for gate in 0..4 {
        for j in 0..n {
            for c in 0..width {
                out.set2(gate * n + j, c, v.at2(gate * width + c, j));
            }
        }
    }
    Ok(out)
}

/// `f(X·(W·diag(z)) + b)` for an FC or output layer on a `batch×d_in` input.
pub fn fc_forward(tape: &mut Tape, layer: &CriticLayer, params: LayerVars, x: Var) -> Result<Var> {
    if !matches!(layer.kind, LayerKind::FullyConnected | LayerKind::Output) {
        return Err(Error::Contract(format!("fc_forward on a {:?} layer", layer.kind)));
    }
    let (_, d_in) = tape.value(x).dims2()?;
    if d_in != layer.fan_in() {
        return Err(Error::dim("fc_forward", tape.shape(x), layer.weight.shape()));
    }
    let w = masked_weight(tape, layer, params.weight)?;
    let y = tape.matmul(x, w)?;
    let y = tape.add_bias(y, params.bias)?;
    layer.activation.record(tape, y)
}

/// Convolution as `im2col(x)·(W·diag(z)) + b`, then activation and pooling.
/// Accepts `[batch, h, w, c]` or a single `[h, w, c]` image; output is NHWC.
pub fn conv_forward(tape: &mut Tape, layer: &CriticLayer, params: LayerVars, x: Var) -> Result<Var> {
    let spec = match (layer.kind, layer.conv) {
        (LayerKind::Convolutional, Some(spec)) => spec,
        _ => return Err(Error::Contract(format!("conv_forward on a {:?} layer", layer.kind))),
    };
    let g = spec.geometry;
    let batch = match *tape.shape(x) {
        [b, h, w, c] if (h, w, c) == (g.in_h, g.in_w, g.in_c) => b,
        [h, w, c] if (h, w, c) == (g.in_h, g.in_w, g.in_c) => 1,
        _ => return Err(Error::dim("conv_forward", tape.shape(x), &[g.in_h, g.in_w, g.in_c])),
    };
    let cols = tape.im2col(x, g.kernel_h, g.kernel_w, g.stride)?;
    let w = masked_weight(tape, layer, params.weight)?;
    let y = tape.matmul(cols, w)?;
    let y = tape.add_bias(y, params.bias)?;
    let y = layer.activation.record(tape, y)?;
    let y = tape.reshape(y, vec![batch, g.out_h(), g.out_w(), layer.units()])?;
    if spec.pool {
        tape.max_pool2(y)
    } else {
        Ok(y)
    }
}

fn masked_weight(tape: &mut Tape, layer: &CriticLayer, weight: Var) -> Result<Var> {
    if layer.kind == LayerKind::Output {
        return Ok(weight);
    }
    if layer.mask.len() != layer.units() {
        return Err(Error::dim("mask", &[layer.mask.len()], &[layer.units()]));
    }
    tape.mul_cols(weight, layer.mask.as_f64())
}

/// Runs an LSTM layer over per-step `batch×n_in` inputs.
///
/// The layer's mask `z` gates the recurrent input `h_{t−1}⊙z` and the
/// emitted `h_t⊙z` at every step; `input_mask` gates the incoming features
/// (all ones for the first layer). When `trace` is given, the mask vector
/// applied at each step is appended to it.
pub fn lstm_forward(
    tape: &mut Tape,
    layer: &CriticLayer,
    params: LayerVars,
    steps: &[Var],
    input_mask: &Mask,
    mut trace: Option<&mut Vec<Vec<f64>>>,
) -> Result<Vec<Var>> {
    if layer.kind != LayerKind::Lstm {
        return Err(Error::Contract(format!("lstm_forward on a {:?} layer", layer.kind)));
    }
    if steps.is_empty() {
        return Err(Error::Contract("lstm_forward needs at least one time step".into()));
    }
    let n = layer.units();
    let n_in = layer.fan_in();
    if input_mask.len() != n_in || layer.mask.len() != n {
        return Err(Error::dim("lstm masks", &[input_mask.len(), layer.mask.len()], &[n_in, n]));
    }
    let (batch, _) = tape.value(steps[0]).dims2()?;
    let z_in = input_mask.as_f64();
    let z = layer.mask.as_f64();

    let mut h = tape.constant(Tensor::zeros(&[batch, n]));
    let mut c = tape.constant(Tensor::zeros(&[batch, n]));
    let mut outputs = Vec::with_capacity(steps.len());
    for &x in steps {
        if tape.shape(x) != [batch, n_in] {
            return Err(Error::dim("lstm_forward", tape.shape(x), &[batch, n_in]));
        }
        let x_in = tape.mul_cols(x, z_in.clone())?;
        let h_in = tape.mul_cols(h, z.clone())?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(z.clone());
        }
        let joined = tape.concat_cols(&[x_in, h_in])?;
        let pre = tape.matmul_nt(joined, params.weight)?;
        let pre = tape.add_bias(pre, params.bias)?;
        let i_pre = tape.slice_cols(pre, 0, n)?;
        let f_pre = tape.slice_cols(pre, n, n)?;
        let o_pre = tape.slice_cols(pre, 2 * n, n)?;
        let g_pre = tape.slice_cols(pre, 3 * n, n)?;
        let i = tape.sigmoid(i_pre)?;
        let f = tape.sigmoid(f_pre)?;
        let o = tape.sigmoid(o_pre)?;
        let g = tape.tanh(g_pre)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        h = tape.mul(o, tc)?;
        outputs.push(tape.mul_cols(h, z.clone())?);
    }
    Ok(outputs)
}

/// Tensor-in/tensor-out LSTM pass over a `T×batch×n_in` sequence, returning
/// the masked hidden states as `T×batch×n`.
pub fn lstm_forward_seq(layer: &CriticLayer, x_seq: &Tensor, input_mask: &Mask) -> Result<Tensor> {
    let [steps, batch, n_in] = *x_seq.shape() else {
        return Err(Error::dim("lstm_forward_seq", x_seq.shape(), &[0, 0, layer.fan_in()]));
    };
    let mut tape = Tape::new();
    let params = LayerVars::constant(&mut tape, layer);
    let inputs: Vec<Var> = x_seq
        .data()
        .chunks_exact(batch * n_in)
        .map(|chunk| tape.constant(Tensor::new(vec![batch, n_in], chunk.to_vec()).expect("sized chunk")))
        .collect();
    let outs = lstm_forward(&mut tape, layer, params, &inputs, input_mask, None)?;
    let data = outs.iter().flat_map(|&v| tape.value(v).data().to_vec()).collect();
    Tensor::new(vec![steps, batch, layer.units()], data)
}

/// Tape handles of one layer's weight and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

impl LayerVars {
    /// Records the layer's parameters; they take part in backward iff
    /// `trainable`.
    pub fn record(tape: &mut Tape, layer: &CriticLayer, trainable: bool) -> Self {
        let w = layer.weight.clone().with_requires_grad(trainable);
        let b = layer.bias.clone().with_requires_grad(trainable);
        LayerVars {
            weight: tape.leaf(w),
            bias: tape.leaf(b),
        }
    }

    pub fn constant(tape: &mut Tape, layer: &CriticLayer) -> Self {
        Self::record(tape, layer, false)
    }
}

/// Shape of one example fed to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputShape {
    Vector { features: usize },
    Image { height: usize, width: usize, channels: usize },
    Sequence { steps: usize, features: usize },
}

impl InputShape {
    pub fn example_len(&self) -> usize {
        match *self {
            InputShape::Vector { features } => features,
            InputShape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
            InputShape::Sequence { steps, features } => steps * features,
        }
    }

    /// Batch tensor shape for `batch` examples.
    pub fn batch_shape(&self, batch: usize) -> Vec<usize> {
        match *self {
            InputShape::Vector { features } => vec![batch, features],
            InputShape::Image {
                height,
                width,
                channels,
            } => vec![batch, height, width, channels],
            InputShape::Sequence { steps, features } => vec![batch, steps, features],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    /// Reserved for sequence-labelling critics; not trainable here.
    CtcPlaceholder,
}

/// Layered critic. Conv and LSTM blocks lead, FC layers follow, and the last
/// layer is always [`LayerKind::Output`].
#[derive(Clone, Debug, PartialEq)]
pub struct CriticNetwork {
    pub input: InputShape,
    pub loss: LossKind,
    pub layers: Vec<CriticLayer>,
}

/// Result of a recorded forward pass.
pub struct ForwardPass {
    pub logits: Var,
    pub params: Vec<LayerVars>,
}

impl CriticNetwork {
    pub fn new(input: InputShape, layers: Vec<CriticLayer>) -> Result<Self> {
        let net = CriticNetwork {
            input,
            loss: LossKind::CrossEntropy,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks ordering and that adjacent extents compose.
    pub fn validate(&self) -> Result<()> {
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::Contract("network has no layers".into()))?;
        if last.kind != LayerKind::Output {
            return Err(Error::Contract("last layer must be an output layer".into()));
        }
        let mut stage = 0; // 0: conv/lstm block, 1: fc block
        let mut width = match self.input {
            InputShape::Vector { features } => features,
            InputShape::Image { .. } => 0,
            InputShape::Sequence { features, .. } => features,
        };
        let mut map: Option<(usize, usize, usize)> = match self.input {
            InputShape::Image {
                height,
                width,
                channels,
            } => Some((height, width, channels)),
            _ => None,
        };
        for (idx, layer) in self.layers.iter().enumerate() {
            if idx + 1 < self.layers.len() && layer.kind == LayerKind::Output {
                return Err(Error::Contract(format!("output layer at position {idx}")));
            }
            if layer.mask.len() != layer.units() {
                return Err(Error::dim("mask", &[layer.mask.len()], &[layer.units()]));
            }
            match layer.kind {
                LayerKind::Convolutional => {
                    let spec = layer
                        .conv
                        .ok_or_else(|| Error::Contract(format!("conv layer {idx} lacks geometry")))?;
                    let g = spec.geometry;
                    if stage != 0 || map != Some((g.in_h, g.in_w, g.in_c)) {
                        return Err(Error::Contract(format!(
                            "conv layer {idx} does not follow an image input of {}x{}x{}",
                            g.in_h, g.in_w, g.in_c
                        )));
                    }
                    let (oh, ow) = spec.output_hw();
                    map = Some((oh, ow, layer.units()));
                }
                LayerKind::Lstm => {
                    let seq = matches!(self.input, InputShape::Sequence { .. });
                    if stage != 0 || !seq || layer.fan_in() != width {
                        return Err(Error::Contract(format!("lstm layer {idx} misplaced")));
                    }
                    width = layer.units();
                }
                LayerKind::FullyConnected | LayerKind::Output => {
                    if let (0, Some((h, w, c))) = (stage, map) {
                        width = h * w * c;
                    }
                    stage = 1;
                    if layer.fan_in() != width {
                        return Err(Error::dim(
                            "layer chain",
                            &[width],
                            layer.weight.shape(),
                        ));
                    }
                    width = layer.units();
                }
            }
        }
        Ok(())
    }

    pub fn droppable(&self) -> impl Iterator<Item = &CriticLayer> {
        self.layers.iter().filter(|l| l.is_droppable())
    }

    pub fn droppable_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, CriticLayer::units)
    }

    /// Units per droppable layer (`d_drop`).
    pub fn unit_counts(&self) -> Vec<usize> {
        self.droppable().map(CriticLayer::units).collect()
    }

    pub fn masks(&self) -> Vec<Mask> {
        self.droppable().map(|l| l.mask.clone()).collect()
    }

    pub fn set_masks(&mut self, masks: &[Mask]) -> Result<()> {
        if masks.len() != self.droppable_count() {
            return Err(Error::dim("set_masks", &[masks.len()], &[self.droppable_count()]));
        }
        for (layer, m) in self.layers.iter_mut().zip(masks) {
            if m.len() != layer.units() {
                return Err(Error::dim("set_masks", &[m.len()], &[layer.units()]));
            }
            layer.mask = m.clone();
        }
        Ok(())
    }

    pub fn clear_masks(&mut self) {
        for layer in &mut self.layers {
            layer.mask = Mask::ones(layer.units());
        }
    }

    pub fn set_keep_probs(&mut self, probs: &[Vec<f64>]) {
        for (layer, p) in self.layers.iter_mut().zip(probs) {
            layer.keep_prob = p.clone();
        }
    }

    /// Compressor inputs, one `d_f×d_drop` matrix per droppable layer.
    pub fn compressor_views(&self) -> Result<Vec<Tensor>> {
        self.droppable().map(CriticLayer::reshape_for_compressor).collect()
    }

    /// Records a masked forward pass of a `[batch, ...]` input and returns
    /// the logits. Parameters join backward iff `trainable`.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor, trainable: bool) -> Result<ForwardPass> {
        self.forward_traced(tape, input, trainable, None)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        trainable: bool,
        mut trace: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<ForwardPass> {
        let shape = input.shape();
        if shape.len() < 2 || shape[1..] != self.input.batch_shape(1)[1..] {
            return Err(Error::dim("network input", shape, &self.input.batch_shape(1)));
        }
        let batch = shape[0];
        let params: Vec<LayerVars> = self
            .layers
            .iter()
            .map(|l| LayerVars::record(tape, l, trainable))
            .collect();

        let mut seq: Vec<Var> = Vec::new();
        let mut seq_mask = Mask::ones(0);
        let mut x = match self.input {
            InputShape::Sequence { steps, features } => {
                for t in 0..steps {
                    let mut step = Vec::with_capacity(batch * features);
                    for b in 0..batch {
                        let off = (b * steps + t) * features;
                        step.extend_from_slice(&input.data()[off..off + features]);
                    }
                    seq.push(tape.constant(Tensor::new(vec![batch, features], step)?));
                }
                seq_mask = Mask::ones(features);
                None
            }
            _ => Some(tape.constant(input.clone())),
        };

        for (layer, &p) in self.layers.iter().zip(&params) {
            match layer.kind {
                LayerKind::Convolutional => {
                    let cur = x.expect("conv layers follow an image input");
                    x = Some(conv_forward(tape, layer, p, cur)?);
                }
                LayerKind::Lstm => {
                    seq = lstm_forward(tape, layer, p, &seq, &seq_mask, trace.as_deref_mut())?;
                    seq_mask = layer.mask.clone();
                }
                LayerKind::FullyConnected | LayerKind::Output => {
                    let cur = match x {
                        Some(v) if tape.shape(v).len() == 4 => {
                            let n = tape.value(v).len() / batch;
                            tape.reshape(v, vec![batch, n])?
                        }
                        Some(v) => v,
                        None => *seq.last().expect("non-empty sequence"),
                    };
                    x = Some(fc_forward(tape, layer, p, cur)?);
                }
            }
        }
        Ok(ForwardPass {
            logits: x.expect("network ends with an output layer"),
            params,
        })
    }

    /// Masked forward pass without gradient tracking.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, input, false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Adds the gradients recorded on `tape` into every layer's tensors.
    pub fn accumulate_grads(&mut self, tape: &Tape, params: &[LayerVars]) -> Result<()> {
        for (layer, p) in self.layers.iter_mut().zip(params) {
            if let Some(g) = tape.grad(p.weight) {
                layer.weight.accumulate_grad(g)?;
            }
            if let Some(g) = tape.grad(p.bias) {
                layer.bias.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.weight.zero_grad();
            layer.bias.zero_grad();
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            [&l.weight, &l.bias]
                .iter()
                .all(|t| t.grad().map_or(true, |g| g.iter().all(|v| v.is_finite())))
        })
    }

    /// `θ ← θ − lr·∇θ` over accumulated gradients, then clears them.
    pub fn sgd_step(&mut self, lr: f64) {
        for layer in &mut self.layers {
            for t in [&mut layer.weight, &mut layer.bias] {
                if let Some(g) = t.grad().map(<[f64]>::to_vec) {
                    t.data_mut().iter_mut().zip(&g).for_each(|(w, g)| *w -= lr * g);
                }
                t.zero_grad();
            }
        }
    }
}

/// Parameter count of `net`, optionally restricted to the units kept by
/// `masks` (one per droppable layer). Dropped units lose their own weights
/// and bias and also the fan-in they provided downstream.
pub fn count_params(net: &CriticNetwork, masks: Option<&[Mask]>) -> usize {
    count(net, masks, true)
}

/// Like [`count_params`] but weights only.
pub fn count_weights(net: &CriticNetwork, masks: Option<&[Mask]>) -> usize {
    count(net, masks, false)
}

fn count(net: &CriticNetwork, masks: Option<&[Mask]>, with_bias: bool) -> usize {
    let kept_of = |idx: usize, layer: &CriticLayer| match (masks, layer.kind) {
        (_, LayerKind::Output) | (None, _) => layer.units(),
        (Some(m), _) => m[idx].kept(),
    };
    let mut total = 0;
    // kept upstream width, and the spatial size it is replicated over
    let (mut prev_kept, mut spatial) = match net.input {
        InputShape::Vector { features } | InputShape::Sequence { features, .. } => (features, 1),
        InputShape::Image {
            height,
            width,
            channels,
        } => (channels, height * width),
    };
    for (idx, layer) in net.layers.iter().enumerate() {
        let kept = kept_of(idx, layer);
        let bias = if with_bias { kept } else { 0 };
        total += match layer.kind {
            LayerKind::Convolutional => {
                let g = layer.conv.expect("conv geometry").geometry;
                let (oh, ow) = layer.conv.expect("conv geometry").output_hw();
                let n = g.kernel_h * g.kernel_w * prev_kept * kept;
                spatial = oh * ow;
                n + bias
            }
            LayerKind::Lstm => {
                let n = 4 * kept * (prev_kept + kept);
                spatial = 1;
                n + 4 * bias
            }
            LayerKind::FullyConnected | LayerKind::Output => {
                let n = spatial * prev_kept * kept;
                spatial = 1;
                n + bias
            }
        };
        prev_kept = kept;
    }
    total
}

/// Builder for common critic topologies.
pub struct NetworkBuilder {
    input: InputShape,
    layers: Vec<CriticLayer>,
    map: (usize, usize, usize),
    width: usize,
}

impl NetworkBuilder {
    pub fn new(input: InputShape) -> Self {
        let (map, width) = match input {
            InputShape::Image {
                height,
                width,
                channels,
            } => ((height, width, channels), height * width * channels),
            InputShape::Vector { features } | InputShape::Sequence { features, .. } => ((0, 0, 0), features),
        };
        NetworkBuilder {
            input,
            layers: Vec::new(),
            map,
            width,
        }
    }

    pub fn conv<R: Rng + ?Sized>(
        mut self,
        filters: usize,
        kernel: usize,
        stride: usize,
        pool: bool,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let (h, w, c) = self.map;
        let geometry = ConvGeometry {
            in_h: h,
            in_w: w,
            in_c: c,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
        };
        let layer = CriticLayer::convolutional(geometry, filters, pool, activation, rng)?;
        let (oh, ow) = layer.conv.expect("conv").output_hw();
        self.map = (oh, ow, filters);
        self.width = oh * ow * filters;
        self.layers.push(layer);
        Ok(self)
    }

    pub fn lstm<R: Rng + ?Sized>(mut self, hidden: usize, rng: &mut R) -> Self {
        self.layers.push(CriticLayer::lstm(self.width, hidden, rng));
        self.width = hidden;
        self
    }

    pub fn fc<R: Rng + ?Sized>(mut self, units: usize, activation: Activation, rng: &mut R) -> Self {
        self.layers
            .push(CriticLayer::fully_connected(self.width, units, activation, rng));
        self.width = units;
        self
    }

    pub fn output<R: Rng + ?Sized>(mut self, classes: usize, rng: &mut R) -> Result<CriticNetwork> {
        self.layers.push(CriticLayer::output(self.width, classes, rng));
        CriticNetwork::new(self.input, self.layers)
    }
}

/// LeNet-5 for 28×28 grayscale digits: conv 5×5×20 → pool → conv 5×5×50 →
/// pool → fc 500 → 10 classes.
pub fn lenet5<R: Rng + ?Sized>(rng: &mut R) -> Result<CriticNetwork> {
    NetworkBuilder::new(InputShape::Image {
        height: 28,
        width: 28,
        channels: 1,
    })
    .conv(20, 5, 1, true, Activation::Relu, rng)?
    .conv(50, 5, 1, true, Activation::Relu, rng)?
    .fc(500, Activation::Relu, rng)
    .output(10, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn single_fc(d_in: usize, d_out: usize, act: Activation) -> CriticLayer {
        CriticLayer::fully_connected(d_in, d_out, act, &mut rng())
    }

    fn run_fc(layer: &CriticLayer, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = LayerVars::constant(&mut tape, layer);
        let xv = tape.constant(x.clone());
        let y = fc_forward(&mut tape, layer, p, xv).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn fc_full_keep_is_plain_layer() {
        let layer = single_fc(4, 3, Activation::Tanh);
        let x = Tensor::uniform(&[5, 4], 1.0, &mut rng());
        let got = run_fc(&layer, &x);
        let mut plain = x.matmul(&layer.weight).unwrap();
        for r in 0..5 {
            for c in 0..3 {
                let v = (plain.at2(r, c) + layer.bias.data()[c]).tanh();
                plain.set2(r, c, v);
            }
        }
        assert_eq!(got, plain);
    }

    #[test]
    fn fc_full_drop_emits_activated_bias() {
        let mut layer = single_fc(4, 3, Activation::Sigmoid);
        layer.bias = Tensor::vector(vec![0.5, -1.0, 2.0]);
        layer.mask = Mask::zeros(3);
        let x = Tensor::uniform(&[2, 4], 1.0, &mut rng());
        let got = run_fc(&layer, &x);
        for r in 0..2 {
            for c in 0..3 {
                let want = Activation::Sigmoid.apply(layer.bias.data()[c]);
                assert_eq!(got.at2(r, c), want);
            }
        }
    }

    #[test]
    fn fc_dropped_column_is_inert() {
        let mut layer = single_fc(6, 4, Activation::Relu);
        layer.mask.set(2, false);
        let x = Tensor::uniform(&[3, 6], 1.0, &mut rng());
        let before = run_fc(&layer, &x);
        let mut r = rng();
        for row in 0..6 {
            layer.weight.set2(row, 2, r.gen_range(-10.0..10.0));
        }
        assert_eq!(run_fc(&layer, &x), before);
    }

    #[test]
    fn conv_dropped_kernel_channel_is_constant() {
        let g = ConvGeometry {
            in_h: 6,
            in_w: 6,
            in_c: 2,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
        };
        let mut layer = CriticLayer::convolutional(g, 3, false, Activation::Relu, &mut rng()).unwrap();
        layer.bias = Tensor::vector(vec![0.1, 0.7, -0.2]);
        layer.mask.set(1, false);
        let mut tape = Tape::new();
        let p = LayerVars::constant(&mut tape, &layer);
        let x = tape.constant(Tensor::uniform(&[6, 6, 2], 1.0, &mut rng()));
        let y = conv_forward(&mut tape, &layer, p, x).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 4, 4, 3]);
        for pos in 0..16 {
            assert_eq!(out.data()[pos * 3 + 1], 0.7);
        }
    }

    #[test]
    fn conv_one_by_one_identity_permutes_channels() {
        let g = ConvGeometry {
            in_h: 3,
            in_w: 3,
            in_c: 2,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
        };
        let mut layer = CriticLayer::convolutional(g, 2, false, Activation::Identity, &mut rng()).unwrap();
        layer.weight = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let input = Tensor::uniform(&[3, 3, 2], 1.0, &mut rng());
        let mut tape = Tape::new();
        let p = LayerVars::constant(&mut tape, &layer);
        let x = tape.constant(input.clone());
        let y = conv_forward(&mut tape, &layer, p, x).unwrap();
        let out = tape.value(y).data();
        for pos in 0..9 {
            assert_eq!(out[pos * 2], input.data()[pos * 2 + 1]);
            assert_eq!(out[pos * 2 + 1], input.data()[pos * 2]);
        }
    }

    #[test]
    fn lstm_single_step_matches_textbook_cell() {
        let mut r = rng();
        let layer = CriticLayer::lstm(3, 2, &mut r);
        let x = Tensor::uniform(&[1, 1, 3], 1.0, &mut r);
        let out = lstm_forward_seq(&layer, &x, &Mask::ones(3)).unwrap();

        // h_0 = c_0 = 0, so only the input block of W matters
        let n = 2;
        let pre: Vec<f64> = (0..4 * n)
            .map(|row| {
                (0..3).map(|c| layer.weight.at2(row, c) * x.data()[c]).sum::<f64>() + layer.bias.data()[row]
            })
            .collect();
        let s = crate::tensor::kernels::sigmoid;
        for j in 0..n {
            let (i, _f, o, g) = (s(pre[j]), s(pre[n + j]), s(pre[2 * n + j]), pre[3 * n + j].tanh());
            let c = i * g;
            let h = o * c.tanh();
            assert!((out.data()[j] - h).abs() < 1e-14);
        }
    }

    #[test]
    fn lstm_rejects_empty_sequence() {
        let layer = CriticLayer::lstm(3, 2, &mut rng());
        let mut tape = Tape::new();
        let p = LayerVars::constant(&mut tape, &layer);
        let err = lstm_forward(&mut tape, &layer, p, &[], &Mask::ones(3), None);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn lstm_masked_unit_is_silent_every_step() {
        let mut r = rng();
        let mut layer = CriticLayer::lstm(3, 4, &mut r);
        layer.mask.set(1, false);
        let x = Tensor::uniform(&[5, 2, 3], 1.0, &mut r);
        let out = lstm_forward_seq(&layer, &x, &Mask::ones(3)).unwrap();
        for t in 0..5 {
            for b in 0..2 {
                assert_eq!(out.data()[(t * 2 + b) * 4 + 1], 0.0);
            }
        }
        // recurrent weights reading the dropped unit have no effect
        let before = out;
        for row in 0..16 {
            layer.weight.set2(row, 3 + 1, r.gen_range(-5.0..5.0));
        }
        assert_eq!(lstm_forward_seq(&layer, &x, &Mask::ones(3)).unwrap(), before);
    }

    #[test]
    fn compressor_views() {
        let mut r = rng();
        let fc = CriticLayer::fully_connected(784, 500, Activation::Relu, &mut r);
        assert_eq!(fc.reshape_for_compressor().unwrap(), fc.weight);

        let net = lenet5(&mut r).unwrap();
        assert_eq!(net.layers[0].reshape_for_compressor().unwrap().shape(), &[25, 20]);

        let lstm = CriticLayer::lstm(8, 4, &mut r);
        let view = lstm.reshape_for_compressor().unwrap();
        assert_eq!(view.shape(), &[48, 4]);
        assert_eq!(lstm_from_unit_columns(&view).unwrap(), lstm.weight);
        // column j holds unit j's four gate rows
        for gate in 0..4 {
            for c in 0..12 {
                assert_eq!(view.at2(gate * 12 + c, 2), lstm.weight.at2(gate * 4 + 2, c));
            }
        }

        let out = CriticLayer::output(10, 3, &mut r);
        assert!(matches!(out.reshape_for_compressor(), Err(Error::Contract(_))));
    }

    #[test]
    fn param_counts() {
        let mut r = rng();
        let net = NetworkBuilder::new(InputShape::Vector { features: 10 })
            .output(10, &mut r)
            .unwrap();
        assert_eq!(count_params(&net, None), 110);

        let lenet = lenet5(&mut r).unwrap();
        let full = count_params(&lenet, None);
        assert_eq!(full, 431_080);
        let ones: Vec<Mask> = lenet.unit_counts().into_iter().map(Mask::ones).collect();
        assert_eq!(count_params(&lenet, Some(&ones)), full);
    }

    #[test]
    fn network_validation() {
        let mut r = rng();
        let no_output = vec![CriticLayer::fully_connected(3, 2, Activation::Relu, &mut r)];
        assert!(CriticNetwork::new(InputShape::Vector { features: 3 }, no_output).is_err());
        let broken = vec![
            CriticLayer::fully_connected(3, 2, Activation::Relu, &mut r),
            CriticLayer::output(5, 2, &mut r),
        ];
        assert!(CriticNetwork::new(InputShape::Vector { features: 3 }, broken).is_err());
        let lstm_on_vectors = vec![CriticLayer::lstm(3, 2, &mut r), CriticLayer::output(2, 2, &mut r)];
        assert!(CriticNetwork::new(InputShape::Vector { features: 3 }, lstm_on_vectors).is_err());
    }
}
