//! Declarative backbone+head assembly.
//!
//! The backbone is a stack of residual-block groups over 2D feature maps,
//! each group optionally followed by 2x2 max pooling and with twice the
//! filters of the previous group. After the last group the remaining
//! height is max-pooled away, width becomes the time axis, and a 1D head
//! maps features to per-frame class log-probabilities for CTC.
//!
//! Operational (generative-neuron) layers expect inputs in [-1, 1]; the
//! assembler guarantees that by mapping images to [-1, 1] at the input and
//! inserting a tanh in front of any operational layer whose incoming
//! signal is not already tanh-bounded.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, TrainerTrailer, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::layers::{
    selfonn_conv1d, selfonn_conv2d, Conv1dGeom, Conv2dGeom, DeformableConv2d, OperationalConv1d,
    OperationalConv2d,
};
use crate::tensor::{BnRunning, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    SelfOnn,
    Deformable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// One layer of a block (or of the head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub q_order: usize,
    pub filters: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn conv(filters: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            q_order: 1,
            filters,
            activation: Activation::Relu,
        }
    }

    pub fn self_onn(filters: usize, q_order: usize) -> Self {
        Self {
            kind: LayerKind::SelfOnn,
            q_order,
            filters,
            activation: Activation::Tanh,
        }
    }

    pub fn deformable(filters: usize) -> Self {
        Self {
            kind: LayerKind::Deformable,
            q_order: 1,
            filters,
            activation: Activation::Relu,
        }
    }

    /// Same layer with a different activation (operational layers must
    /// keep tanh).
    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    fn validate(&self, place: &str) -> Result<()> {
        if self.filters == 0 {
            return Err(Error::Config(format!("{place}: filters must be >= 1")));
        }
        if self.q_order == 0 {
            return Err(Error::Config(format!("{place}: q_order must be >= 1")));
        }
        match self.kind {
            LayerKind::Conv | LayerKind::Deformable => {
                if self.q_order != 1 {
                    return Err(Error::Config(format!(
                        "{place}: kind {:?} requires q_order == 1, got {}",
                        self.kind, self.q_order
                    )));
                }
            }
            LayerKind::SelfOnn => {
                if self.activation != Activation::Tanh {
                    return Err(Error::Config(format!(
                        "{place}: self_onn layers require tanh activation"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A group of identical residual blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub num_blocks: usize,
    pub layers: [LayerSpec; 2],
    pub pool_after: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_height: usize,
    pub base_filters: usize,
    pub backbone_groups: Vec<GroupSpec>,
    /// 1D head layers; the last one produces the K class logits.
    pub head_layers: Vec<LayerSpec>,
    /// K, including the blank at index 0.
    pub alphabet_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size < 2 {
            return Err(Error::Config(
                "alphabet_size must be >= 2 (blank plus at least one label)".into(),
            ));
        }
        if self.backbone_groups.is_empty() {
            return Err(Error::Config("at least one backbone group required".into()));
        }
        if self.head_layers.is_empty() {
            return Err(Error::Config("at least one head layer required".into()));
        }
        let pools = self
            .backbone_groups
            .iter()
            .filter(|g| g.pool_after)
            .count();
        if self.input_height < (1 << pools) {
            return Err(Error::Config(format!(
                "input_height {} cannot survive {pools} 2x pools",
                self.input_height
            )));
        }
        let mut want = self.base_filters;
        for (gi, group) in self.backbone_groups.iter().enumerate() {
            if group.num_blocks == 0 {
                return Err(Error::Config(format!("group {gi}: num_blocks must be >= 1")));
            }
            for (li, layer) in group.layers.iter().enumerate() {
                layer.validate(&format!("group {gi} layer {li}"))?;
                if layer.filters != want {
                    return Err(Error::Config(format!(
                        "group {gi} layer {li}: filters must double across groups \
                         (expected {want}, got {})",
                        layer.filters
                    )));
                }
            }
            want *= 2;
        }
        for (hi, layer) in self.head_layers.iter().enumerate() {
            layer.validate(&format!("head layer {hi}"))?;
            if layer.kind == LayerKind::Deformable {
                return Err(Error::Config(format!(
                    "head layer {hi}: deformable layers are 2D-only"
                )));
            }
        }
        let last = self.head_layers.last().unwrap();
        if last.filters != self.alphabet_size {
            return Err(Error::Config(format!(
                "final head layer must produce alphabet_size = {} channels, got {}",
                self.alphabet_size, last.filters
            )));
        }
        Ok(())
    }

    /// Horizontal downsampling factor between image width and frame count.
    pub fn pool_factor(&self) -> usize {
        1 << self
            .backbone_groups
            .iter()
            .filter(|g| g.pool_after)
            .count()
    }

    /// Small CPU-friendly all-convolutional default: two pooled groups of
    /// one block (16 then 32 filters) and a two-layer head.
    pub fn desk_conv(alphabet_size: usize) -> Self {
        Self {
            input_height: 32,
            base_filters: 16,
            backbone_groups: vec![
                GroupSpec {
                    num_blocks: 1,
                    layers: [LayerSpec::conv(16), LayerSpec::conv(16)],
                    pool_after: true,
                },
                GroupSpec {
                    num_blocks: 1,
                    layers: [LayerSpec::conv(32), LayerSpec::conv(32)],
                    pool_after: true,
                },
            ],
            head_layers: vec![LayerSpec::conv(32), LayerSpec::conv(alphabet_size)],
            alphabet_size,
        }
    }

    /// Desk-scale variant with operational layers in the backbone, the
    /// placement that works best close to the input.
    pub fn desk_selfonn(alphabet_size: usize, q_order: usize) -> Self {
        let mut cfg = Self::desk_conv(alphabet_size);
        for group in &mut cfg.backbone_groups {
            for layer in &mut group.layers {
                *layer = LayerSpec::self_onn(layer.filters, q_order);
            }
        }
        cfg
    }

    /// Paper-scale shape: 7 backbone blocks (groups of 2/2/3) and a
    /// 9-layer convolutional head.
    pub fn paper_head9(alphabet_size: usize) -> Self {
        let base = 64;
        let mut head: Vec<LayerSpec> = (0..8).map(|_| LayerSpec::conv(256)).collect();
        head.push(LayerSpec::conv(alphabet_size));
        Self {
            input_height: 64,
            base_filters: base,
            backbone_groups: vec![
                GroupSpec {
                    num_blocks: 2,
                    layers: [LayerSpec::conv(64), LayerSpec::conv(64)],
                    pool_after: true,
                },
                GroupSpec {
                    num_blocks: 2,
                    layers: [LayerSpec::conv(128), LayerSpec::conv(128)],
                    pool_after: true,
                },
                GroupSpec {
                    num_blocks: 3,
                    layers: [LayerSpec::conv(256), LayerSpec::conv(256)],
                    pool_after: true,
                },
            ],
            head_layers: head,
            alphabet_size,
        }
    }

    /// Paper-scale shape with an operational head of rising Q (3, 5, 7),
    /// one Q per successive head layer.
    pub fn paper_selfonn_head(alphabet_size: usize) -> Self {
        let mut cfg = Self::paper_head9(alphabet_size);
        cfg.head_layers = vec![
            LayerSpec::self_onn(256, 3),
            LayerSpec::self_onn(256, 5),
            LayerSpec::self_onn(alphabet_size, 7),
        ];
        cfg
    }
}

/// Learnable batch-norm affine pair plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: BnRunning,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0).requires_grad(),
            beta: Tensor::zeros(&[channels]).requires_grad(),
            running: BnRunning::new(channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConvLayer2d {
    Standard(OperationalConv2d),
    Deformable(DeformableConv2d),
}

/// One conv/BN/activation unit inside a residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayer {
    pub spec: LayerSpec,
    pub conv: ConvLayer2d,
    pub bn: BatchNorm,
}

/// Residual block: two layers with batch norm, identity skip, and a 1x1
/// projection exactly when the channel count changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub layers: Vec<BlockLayer>,
    pub projection: Option<OperationalConv2d>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGroup {
    pub blocks: Vec<ResBlock>,
    pub pool_after: bool,
}

/// 1D head layer; the final one has no batch norm or activation (it
/// produces the logits).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLayer {
    pub spec: LayerSpec,
    pub conv: OperationalConv1d,
    pub bn: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub groups: Vec<ModelGroup>,
    pub head: Vec<HeadLayer>,
}

/// Tape vars for every trainable tensor of one forward pass, in the same
/// order as [`Model::visit_params`].
pub struct BoundParams {
    pub vars: Vec<Var>,
}

fn make_conv2d(
    spec: &LayerSpec,
    c_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConvLayer2d> {
    let geom = Conv2dGeom::default();
    Ok(match spec.kind {
        LayerKind::Conv | LayerKind::SelfOnn => {
            let mut conv = OperationalConv2d::new(c_in, spec.filters, spec.q_order, geom)?;
            conv.init(rng);
            ConvLayer2d::Standard(conv)
        }
        LayerKind::Deformable => {
            let mut conv = DeformableConv2d::new(c_in, spec.filters, geom)?;
            conv.init(rng);
            ConvLayer2d::Deformable(conv)
        }
    })
}

/// Build a model from its config, deterministically for a given seed.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::new();
    let mut c_in = 1; // grayscale input
    for group in &config.backbone_groups {
        let mut blocks = Vec::new();
        for _ in 0..group.num_blocks {
            let block_in = c_in;
            let mut layers = Vec::new();
            for spec in &group.layers {
                let conv = make_conv2d(spec, c_in, &mut rng)?;
                let bn = BatchNorm::new(spec.filters);
                layers.push(BlockLayer {
                    spec: *spec,
                    conv,
                    bn,
                });
                c_in = spec.filters;
            }
            let projection = if block_in != c_in {
                let geom = Conv2dGeom {
                    kernel: (1, 1),
                    stride: (1, 1),
                    padding: (0, 0),
                    dilation: (1, 1),
                };
                let mut proj = OperationalConv2d::new(block_in, c_in, 1, geom)?;
                proj.init(&mut rng);
                Some(proj)
            } else {
                None
            };
            blocks.push(ResBlock { layers, projection });
        }
        groups.push(ModelGroup {
            blocks,
            pool_after: group.pool_after,
        });
    }

    let mut head = Vec::new();
    let n_head = config.head_layers.len();
    for (i, spec) in config.head_layers.iter().enumerate() {
        let mut conv = OperationalConv1d::new(c_in, spec.filters, spec.q_order, Conv1dGeom::default())?;
        conv.init(&mut rng);
        let bn = if i + 1 == n_head {
            None
        } else {
            Some(BatchNorm::new(spec.filters))
        };
        head.push(HeadLayer {
            spec: *spec,
            conv,
            bn,
        });
        c_in = spec.filters;
    }

    Ok(Model {
        config: config.clone(),
        groups,
        head,
    })
}

fn activation(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

impl Model {
    /// Visit every trainable tensor in declaration order. The checkpoint
    /// format, Adam buffers, and per-pass bound vars all rely on this
    /// single ordering.
    pub fn visit_params(&self, f: &mut dyn FnMut(&Tensor)) {
        for group in &self.groups {
            for block in &group.blocks {
                for layer in &block.layers {
                    match &layer.conv {
                        ConvLayer2d::Standard(c) => {
                            f(&c.weights);
                            f(&c.bias);
                        }
                        ConvLayer2d::Deformable(d) => {
                            f(&d.base.weights);
                            f(&d.base.bias);
                            f(&d.offset_predictor.weights);
                            f(&d.offset_predictor.bias);
                        }
                    }
                    f(&layer.bn.gamma);
                    f(&layer.bn.beta);
                }
                if let Some(p) = &block.projection {
                    f(&p.weights);
                    f(&p.bias);
                }
            }
        }
        for layer in &self.head {
            f(&layer.conv.weights);
            f(&layer.conv.bias);
            if let Some(bn) = &layer.bn {
                f(&bn.gamma);
                f(&bn.beta);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for group in &mut self.groups {
            for block in &mut group.blocks {
                for layer in &mut block.layers {
                    match &mut layer.conv {
                        ConvLayer2d::Standard(c) => {
                            f(&mut c.weights);
                            f(&mut c.bias);
                        }
                        ConvLayer2d::Deformable(d) => {
                            f(&mut d.base.weights);
                            f(&mut d.base.bias);
                            f(&mut d.offset_predictor.weights);
                            f(&mut d.offset_predictor.bias);
                        }
                    }
                    f(&mut layer.bn.gamma);
                    f(&mut layer.bn.beta);
                }
                if let Some(p) = &mut block.projection {
                    f(&mut p.weights);
                    f(&mut p.bias);
                }
            }
        }
        for layer in &mut self.head {
            f(&mut layer.conv.weights);
            f(&mut layer.conv.bias);
            if let Some(bn) = &mut layer.bn {
                f(&mut bn.gamma);
                f(&mut bn.beta);
            }
        }
    }

    /// Visit batch-norm running statistics (non-trainable buffers) in
    /// declaration order.
    pub fn visit_bn(&self, f: &mut dyn FnMut(&BnRunning)) {
        for group in &self.groups {
            for block in &group.blocks {
                for layer in &block.layers {
                    f(&layer.bn.running);
                }
            }
        }
        for layer in &self.head {
            if let Some(bn) = &layer.bn {
                f(&bn.running);
            }
        }
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BnRunning)) {
        for group in &mut self.groups {
            for block in &mut group.blocks {
                for layer in &mut block.layers {
                    f(&mut layer.bn.running);
                }
            }
        }
        for layer in &mut self.head {
            if let Some(bn) = &mut layer.bn {
                f(&mut bn.running);
            }
        }
    }

    /// Total trainable scalar count.
    pub fn count_parameters(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |t| total += t.numel());
        total
    }

    pub fn num_param_tensors(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_| n += 1);
        n
    }

    /// Training forward: batch statistics drive the normalization and the
    /// running stats are updated in place.
    pub fn forward_train(&mut self, tape: &mut Tape, images: &Tensor) -> Result<(Var, BoundParams)> {
        let (out, vars, updates) = self.forward_impl(tape, images, true)?;
        let mut it = updates.into_iter();
        self.visit_bn_mut(&mut |running| {
            if let Some(upd) = it.next() {
                *running = upd;
            }
        });
        Ok((out, BoundParams { vars }))
    }

    /// Inference forward: running statistics, no side effects.
    pub fn forward_eval(&self, tape: &mut Tape, images: &Tensor) -> Result<Var> {
        let (out, _, _) = self.forward_impl(tape, images, false)?;
        Ok(out)
    }

    /// Shared forward walk. Parameter vars are pushed in `visit_params`
    /// order; training mode collects updated BN running stats in
    /// `visit_bn` order.
    fn forward_impl(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        training: bool,
    ) -> Result<(Var, Vec<Var>, Vec<BnRunning>)> {
        if images.ndim() != 4 || images.shape()[1] != 1 {
            return Err(Error::Shape(format!(
                "expected [N, 1, H, W] grayscale images, got {:?}",
                images.shape()
            )));
        }
        if images.shape()[2] != self.config.input_height {
            return Err(Error::Shape(format!(
                "image height {} != configured input height {}",
                images.shape()[2],
                self.config.input_height
            )));
        }
        let mut vars = Vec::new();
        let mut updates = Vec::new();

        let raw = tape.leaf(images.clone(), false);
        // [0,1] grayscale to [-1,1], the bounded domain operational layers need
        let mut x = tape.affine(raw, 2.0, -1.0);
        let mut bounded = true;

        for group in &self.groups {
            for block in &group.blocks {
                x = block.forward(tape, x, training, &mut vars, &mut updates, &mut bounded)?;
            }
            if group.pool_after {
                x = tape.max_pool2d(x, (2, 2), (2, 2))?;
            }
        }

        // vertical collapse: pool the remaining height to 1, width = time
        let shape = tape.value(x).shape().to_vec();
        let rem_h = shape[2];
        if rem_h > 1 {
            x = tape.max_pool2d(x, (rem_h, 1), (rem_h, 1))?;
        }
        let shape = tape.value(x).shape().to_vec();
        let mut z = tape.reshape(x, &[shape[0], shape[1], shape[3]])?;

        let n_head = self.head.len();
        for (i, layer) in self.head.iter().enumerate() {
            z = layer.forward(
                tape,
                z,
                training,
                &mut vars,
                &mut updates,
                &mut bounded,
                i + 1 == n_head,
            )?;
        }

        // [N, K, T] -> [T, N, K], normalized over classes
        let out = tape.permute(z, &[2, 0, 1])?;
        let lp = tape.log_softmax(out, 2)?;
        debug_assert_eq!(vars.len(), self.num_param_tensors());
        Ok((lp, vars, updates))
    }
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        training: bool,
        vars: &mut Vec<Var>,
        updates: &mut Vec<BnRunning>,
        bounded: &mut bool,
    ) -> Result<Var> {
        let block_input = x;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.spec.kind == LayerKind::SelfOnn && !*bounded {
                h = tape.tanh(h);
                *bounded = true;
            }
            h = match &layer.conv {
                ConvLayer2d::Standard(c) => {
                    let w = tape.param(&c.weights);
                    let b = tape.param(&c.bias);
                    vars.extend([w, b]);
                    selfonn_conv2d(tape, h, w, b, c.geom)?
                }
                ConvLayer2d::Deformable(d) => {
                    let bw = tape.param(&d.base.weights);
                    let bb = tape.param(&d.base.bias);
                    let ow = tape.param(&d.offset_predictor.weights);
                    let ob = tape.param(&d.offset_predictor.bias);
                    vars.extend([bw, bb, ow, ob]);
                    d.forward(tape, h, bw, bb, ow, ob)?
                }
            };
            let gamma = tape.param(&layer.bn.gamma);
            let beta = tape.param(&layer.bn.beta);
            vars.extend([gamma, beta]);
            let (normed, upd) = tape.batch_norm(
                h,
                gamma,
                beta,
                &layer.bn.running,
                training,
                BN_EPS,
                BN_MOMENTUM,
            )?;
            if let Some(upd) = upd {
                updates.push(upd);
            }
            h = normed;
            *bounded = false; // batch norm can leave [-1, 1]
            if i == 0 {
                h = activation(tape, h, layer.spec.activation);
                *bounded = layer.spec.activation == Activation::Tanh;
            }
        }
        let skip = match &self.projection {
            None => block_input,
            Some(p) => {
                let w = tape.param(&p.weights);
                let b = tape.param(&p.bias);
                vars.extend([w, b]);
                selfonn_conv2d(tape, block_input, w, b, p.geom)?
            }
        };
        let sum = tape.add(h, skip)?;
        let act = self.layers.last().expect("blocks have layers").spec.activation;
        let out = activation(tape, sum, act);
        *bounded = act == Activation::Tanh;
        Ok(out)
    }
}

impl HeadLayer {
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        z: Var,
        training: bool,
        vars: &mut Vec<Var>,
        updates: &mut Vec<BnRunning>,
        bounded: &mut bool,
        is_final: bool,
    ) -> Result<Var> {
        let mut h = z;
        if self.spec.kind == LayerKind::SelfOnn && !*bounded {
            h = tape.tanh(h);
            *bounded = true;
        }
        let w = tape.param(&self.conv.weights);
        let b = tape.param(&self.conv.bias);
        vars.extend([w, b]);
        h = selfonn_conv1d(tape, h, w, b, self.conv.geom)?;
        if is_final {
            return Ok(h);
        }
        let bn = self.bn.as_ref().expect("non-final head layers carry BN");
        let gamma = tape.param(&bn.gamma);
        let beta = tape.param(&bn.beta);
        vars.extend([gamma, beta]);
        let (normed, upd) = tape.batch_norm(
            h,
            gamma,
            beta,
            &bn.running,
            training,
            BN_EPS,
            BN_MOMENTUM,
        )?;
        if let Some(upd) = upd {
            updates.push(upd);
        }
        *bounded = false;
        let out = activation(tape, normed, self.spec.activation);
        *bounded = self.spec.activation == Activation::Tanh;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_builds_and_runs() {
        let cfg = ModelConfig {
            input_height: 8,
            base_filters: 8,
            backbone_groups: vec![GroupSpec {
                num_blocks: 1,
                layers: [LayerSpec::conv(8), LayerSpec::conv(8)],
                pool_after: true,
            }],
            head_layers: vec![LayerSpec::conv(5)],
            alphabet_size: 5,
        };
        let mut model = build_model(&cfg, 7).unwrap();
        let images = Tensor::full(&[2, 1, 8, 16], 0.5);
        let mut tape = Tape::new();
        let (lp, bound) = model.forward_train(&mut tape, &images).unwrap();
        // W=16, one pool -> T=8
        assert_eq!(tape.value(lp).shape(), &[8, 2, 5]);
        assert_eq!(bound.vars.len(), model.num_param_tensors());
    }

    #[test]
    fn frames_are_normalized() {
        let cfg = ModelConfig::desk_conv(11);
        let model = build_model(&cfg, 3).unwrap();
        let images = Tensor::from_fn(&[1, 1, 32, 64], |i| ((i % 7) as f64) / 7.0);
        let mut tape = Tape::new();
        let lp = model.forward_eval(&mut tape, &images).unwrap();
        let v = tape.value(lp);
        let (t, n, k) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        assert_eq!((t, n, k), (16, 1, 11));
        for ti in 0..t {
            let s: f64 = (0..k).map(|ki| v.at(&[ti, 0, ki]).exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_midgray_image_gives_identical_frames() {
        // 0.5 maps to 0.0 at the input, matching the zero padding, so
        // eval-mode outputs are fully shift invariant.
        let cfg = ModelConfig::desk_conv(6);
        let model = build_model(&cfg, 1).unwrap();
        let images = Tensor::full(&[1, 1, 32, 48], 0.5);
        let mut tape = Tape::new();
        let lp = model.forward_eval(&mut tape, &images).unwrap();
        let v = tape.value(lp);
        let t = v.shape()[0];
        for ti in 1..t {
            for ki in 0..6 {
                assert!(
                    (v.at(&[ti, 0, ki]) - v.at(&[0, 0, ki])).abs() < 1e-12,
                    "frame {ti} differs at class {ki}"
                );
            }
        }
    }

    #[test]
    fn pooling_chain_rejects_narrow_images() {
        let cfg = ModelConfig::desk_conv(6);
        let model = build_model(&cfg, 1).unwrap();
        let images = Tensor::full(&[1, 1, 32, 1], 0.5);
        let mut tape = Tape::new();
        assert!(model.forward_eval(&mut tape, &images).is_err());
    }

    #[test]
    fn config_validation_names_violations() {
        let mut cfg = ModelConfig::desk_conv(6);
        cfg.backbone_groups[1].layers[0].filters = 24; // not double
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("double"), "{err}");

        let mut cfg2 = ModelConfig::desk_conv(6);
        cfg2.head_layers.pop();
        cfg2.head_layers.push(LayerSpec::conv(4)); // != K
        assert!(cfg2.validate().is_err());

        let mut cfg3 = ModelConfig::desk_selfonn(6, 3);
        cfg3.backbone_groups[0].layers[0].activation = Activation::Relu;
        assert!(cfg3.validate().is_err());
    }

    #[test]
    fn parameter_counts_are_analytic() {
        // single 3x3 conv 1 -> 8: weights 72 + bias 8 = 80
        let conv = OperationalConv2d::new(1, 8, 1, Conv2dGeom::default()).unwrap();
        assert_eq!(conv.param_count(), 80);
        // same layer as self-onn Q=3: 3*72 + 8 = 224
        let onn = OperationalConv2d::new(1, 8, 3, Conv2dGeom::default()).unwrap();
        assert_eq!(onn.param_count(), 224);

        // hand-computed total for the desk conv model
        let cfg = ModelConfig::desk_conv(11);
        let model = build_model(&cfg, 0).unwrap();
        let block1 = (16 * 1 * 9 + 16) + (16 * 16 * 9 + 16) + 2 * (16 + 16) + (16 * 1 + 16);
        let block2 = (32 * 16 * 9 + 32) + (32 * 32 * 9 + 32) + 2 * (32 + 32) + (32 * 16 + 32);
        let head = (32 * 32 * 3 + 32) + (32 + 32) + (11 * 32 * 3 + 11);
        assert_eq!(model.count_parameters(), block1 + block2 + head);
    }

    #[test]
    fn selfonn_param_ratio_tracks_q() {
        let k = 11;
        let conv = build_model(&ModelConfig::desk_conv(k), 0).unwrap();
        let mut onn_cfg = ModelConfig::desk_conv(k);
        for group in &mut onn_cfg.backbone_groups {
            for layer in &mut group.layers {
                *layer = LayerSpec::self_onn(layer.filters, 3);
            }
        }
        onn_cfg.head_layers = vec![
            LayerSpec::self_onn(32, 3),
            LayerSpec::self_onn(k, 3),
        ];
        let onn = build_model(&onn_cfg, 0).unwrap();
        let ratio = onn.count_parameters() as f64 / conv.count_parameters() as f64;
        assert!(onn.count_parameters() > conv.count_parameters());
        assert!(ratio > 2.5 && ratio < 3.0, "ratio {ratio}");
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::desk_selfonn(7, 3);
        let a = build_model(&cfg, 42).unwrap();
        let b = build_model(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let c = build_model(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }
}
