//! Miniature RCAN and EDSR builders.
//!
//! RCAN: head conv, residual groups of residual channel-attention blocks
//! (each group closed by a conv and a group-level skip), a trunk conv
//! with a long skip from the head output, and a pixel-shuffle upsampler
//! tail. EDSR is the same skeleton with plain residual blocks, no
//! channel attention and no group nesting. A scale-1 build omits the
//! upsampler entirely (the domain-mapping variant).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{from_f64, Scalar};
use crate::tensor::tape::{Eval, Ops, Tape};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Variant {
    Rcan,
    Edsr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_groups: usize,
    pub n_blocks_per_group: usize,
    pub channels: usize,
    /// Channel-attention bottleneck ratio.
    pub reduction: usize,
    pub scale: usize,
    pub in_channels: usize,
    pub kernel_size: usize,
    /// Optional EDSR-style residual scaling constant; off by default.
    pub residual_scale: Option<f64>,
}

impl ModelConfig {
    /// Small configuration that trains in seconds on a CPU.
    pub fn desk(scale: usize) -> Self {
        ModelConfig {
            variant: Variant::Rcan,
            n_groups: 2,
            n_blocks_per_group: 2,
            channels: 16,
            reduction: 4,
            scale,
            in_channels: 3,
            kernel_size: 3,
            residual_scale: None,
        }
    }

    /// Full-size RCAN: 10 groups of 8 blocks, 64 channels.
    pub fn paper(scale: usize) -> Self {
        ModelConfig {
            variant: Variant::Rcan,
            n_groups: 10,
            n_blocks_per_group: 8,
            channels: 64,
            reduction: 16,
            scale,
            in_channels: 3,
            kernel_size: 3,
            residual_scale: None,
        }
    }

    /// Full-size EDSR baseline: 8 residual blocks, 64 channels.
    pub fn edsr_paper(scale: usize) -> Self {
        ModelConfig {
            variant: Variant::Edsr,
            n_groups: 1,
            n_blocks_per_group: 8,
            channels: 64,
            reduction: 16,
            scale,
            in_channels: 3,
            kernel_size: 3,
            residual_scale: None,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_scale(mut self, scale: usize) -> Self {
        self.scale = scale;
        self
    }

    /// Total residual blocks; EDSR flattens groups into one block list.
    pub fn total_blocks(&self) -> usize {
        self.n_groups * self.n_blocks_per_group
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.n_blocks_per_group == 0 {
            return Err(Error::invalid(
                "model",
                "group and block counts must be positive",
            ));
        }
        if self.channels == 0 || self.in_channels == 0 {
            return Err(Error::invalid("model", "channel counts must be positive"));
        }
        if self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::invalid(
                "model",
                format!(
                    "channels {} must be divisible by reduction {}",
                    self.channels, self.reduction
                ),
            ));
        }
        if ![1, 2, 4].contains(&self.scale) {
            return Err(Error::invalid(
                "model",
                format!("scale {} not in {{1, 2, 4}}", self.scale),
            ));
        }
        if self.kernel_size.is_multiple_of(2) || self.kernel_size == 0 {
            return Err(Error::invalid("model", "kernel size must be odd"));
        }
        if let Some(rs) = self.residual_scale {
            if !(rs.is_finite() && rs > 0.0) {
                return Err(Error::invalid("model", "residual scale must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvLayer<S: Scalar> {
    weight: Tensor<S>,
    bias: Tensor<S>,
    padding: usize,
}

impl<S: Scalar> ConvLayer<S> {
    /// Kaiming-uniform fan-in weights (the PyTorch conv default,
    /// bound = 1/sqrt(fan_in)), zero bias.
    fn init(rng: &mut Rng, cout: usize, cin: usize, k: usize, padding: usize) -> Self {
        let fan_in = (cin * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let weight = Tensor::from_fn(Shape::new(cout, cin, k, k), |_| {
            from_f64(rng.uniform(-bound, bound))
        })
        .with_requires_grad(true);
        let bias = Tensor::zeros(Shape::new(1, cout, 1, 1)).with_requires_grad(true);
        ConvLayer {
            weight,
            bias,
            padding,
        }
    }

    fn forward<O: Ops<S>>(&self, cx: &mut O, x: &Tensor<S>) -> Result<Tensor<S>> {
        cx.conv2d(x, &self.weight, Some(&self.bias), 1, self.padding)
    }
}

#[derive(Clone, Debug)]
struct ChannelAttention<S: Scalar> {
    reduce: ConvLayer<S>,
    expand: ConvLayer<S>,
}

impl<S: Scalar> ChannelAttention<S> {
    fn init(rng: &mut Rng, channels: usize, reduction: usize) -> Self {
        ChannelAttention {
            reduce: ConvLayer::init(rng, channels / reduction, channels, 1, 0),
            expand: ConvLayer::init(rng, channels, channels / reduction, 1, 0),
        }
    }

    /// pool -> 1x1 reduce -> relu -> 1x1 expand -> sigmoid
    fn gate<O: Ops<S>>(&self, cx: &mut O, x: &Tensor<S>) -> Result<Tensor<S>> {
        let g = cx.global_avg_pool(x)?;
        let g = self.reduce.forward(cx, &g)?;
        let g = cx.relu(&g)?;
        let g = self.expand.forward(cx, &g)?;
        cx.sigmoid(&g)
    }
}

/// Residual block: conv -> relu -> conv, optionally gated by channel
/// attention, plus the block-level skip. EDSR blocks carry no attention,
/// which is exactly an attention gate pinned to 1.
#[derive(Clone, Debug)]
struct Block<S: Scalar> {
    conv1: ConvLayer<S>,
    conv2: ConvLayer<S>,
    attention: Option<ChannelAttention<S>>,
    residual_scale: Option<S>,
}

impl<S: Scalar> Block<S> {
    fn forward<O: Ops<S>>(&self, cx: &mut O, x: &Tensor<S>) -> Result<Tensor<S>> {
        let body = self.branch(cx, x)?;
        cx.add(x, &body)
    }

    /// The residual branch before the skip is applied.
    fn branch<O: Ops<S>>(&self, cx: &mut O, x: &Tensor<S>) -> Result<Tensor<S>> {
        let y = self.conv1.forward(cx, x)?;
        let y = cx.relu(&y)?;
        let mut y = self.conv2.forward(cx, &y)?;
        if let Some(ca) = &self.attention {
            let gate = ca.gate(cx, &y)?;
            y = cx.mul(&y, &gate)?;
        }
        if let Some(rs) = self.residual_scale {
            y = cx.scale(&y, rs)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
struct Group<S: Scalar> {
    blocks: Vec<Block<S>>,
    conv: ConvLayer<S>,
}

impl<S: Scalar> Group<S> {
    fn forward<O: Ops<S>>(&self, cx: &mut O, x: &Tensor<S>) -> Result<Tensor<S>> {
        let mut t = x.clone();
        for block in &self.blocks {
            t = block.forward(cx, &t)?;
        }
        let t = self.conv.forward(cx, &t)?;
        cx.add(&t, x)
    }
}

#[derive(Clone, Debug)]
enum Body<S: Scalar> {
    Groups(Vec<Group<S>>),
    Blocks(Vec<Block<S>>),
}

#[derive(Clone, Debug)]
pub struct Model<S: Scalar> {
    config: ModelConfig,
    head: ConvLayer<S>,
    body: Body<S>,
    trunk: ConvLayer<S>,
    /// One conv per x2 pixel-shuffle stage (two stages for scale 4).
    upsample: Vec<ConvLayer<S>>,
    tail: ConvLayer<S>,
}

/// Build an RCAN model; rejects configs whose variant is not `Rcan`.
pub fn build_rcan<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<S>> {
    if config.variant != Variant::Rcan {
        return Err(Error::invalid("build_rcan", "config variant is not rcan"));
    }
    Model::build(config, seed)
}

/// Build an EDSR model; rejects configs whose variant is not `Edsr`.
pub fn build_edsr<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<S>> {
    if config.variant != Variant::Edsr {
        return Err(Error::invalid("build_edsr", "config variant is not edsr"));
    }
    Model::build(config, seed)
}

impl<S: Scalar> Model<S> {
    /// Deterministic build: the same (config, seed) always yields
    /// bitwise-identical parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from(seed);
        let (c, k) = (config.channels, config.kernel_size);
        let pad = k / 2;
        let rs = config.residual_scale.map(from_f64::<S>);

        let head = ConvLayer::init(&mut rng, c, config.in_channels, k, pad);

        let make_block = |rng: &mut Rng, with_attention: bool| Block {
            conv1: ConvLayer::init(rng, c, c, k, pad),
            conv2: ConvLayer::init(rng, c, c, k, pad),
            attention: with_attention.then(|| ChannelAttention::init(rng, c, config.reduction)),
            residual_scale: rs,
        };

        let body = match config.variant {
            Variant::Rcan => Body::Groups(
                (0..config.n_groups)
                    .map(|_| Group {
                        blocks: (0..config.n_blocks_per_group)
                            .map(|_| make_block(&mut rng, true))
                            .collect(),
                        conv: ConvLayer::init(&mut rng, c, c, k, pad),
                    })
                    .collect(),
            ),
            Variant::Edsr => Body::Blocks(
                (0..config.total_blocks())
                    .map(|_| make_block(&mut rng, false))
                    .collect(),
            ),
        };

        let trunk = ConvLayer::init(&mut rng, c, c, k, pad);
        let n_stages = match config.scale {
            1 => 0,
            2 => 1,
            _ => 2,
        };
        let upsample = (0..n_stages)
            .map(|_| ConvLayer::init(&mut rng, c * 4, c, k, pad))
            .collect();
        let tail = ConvLayer::init(&mut rng, 3, c, k, pad);

        Ok(Model {
            config: config.clone(),
            head,
            body,
            trunk,
            upsample,
            tail,
        })
    }

    /// A model whose output equals its input exactly: delta-kernel head
    /// and tail, zeroed residual branches. Scale 1.
    pub fn identity(channels: usize) -> Result<Self> {
        if channels < 3 {
            return Err(Error::invalid("identity model", "needs at least 3 channels"));
        }
        let config = ModelConfig {
            variant: Variant::Rcan,
            n_groups: 1,
            n_blocks_per_group: 1,
            channels,
            reduction: 1,
            scale: 1,
            in_channels: 3,
            kernel_size: 3,
            residual_scale: None,
        };
        let mut model = Model::build(&config, 0)?;
        for (_, p) in model.params_mut() {
            *p = Tensor::zeros(p.shape()).with_requires_grad(true);
        }
        // head embeds the 3 input channels; tail extracts them
        let delta = |cout: usize, cin: usize| {
            let s = Shape::new(cout, cin, 3, 3);
            Tensor::from_fn(s, |i| {
                let hit = (0..cout.min(cin)).any(|c| i == s.idx(c, c, 1, 1));
                if hit {
                    S::one()
                } else {
                    S::zero()
                }
            })
            .with_requires_grad(true)
        };
        model.head.weight = delta(channels, 3);
        model.tail.weight = delta(3, channels);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn scale(&self) -> usize {
        self.config.scale
    }

    /// Traced forward pass; the output is the raw network value (not
    /// clipped), so the loss sees unclipped values.
    pub fn forward(&self, tape: &mut Tape<S>, input: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_with(tape, input)
    }

    /// Untraced inference; the output is clipped to [0, 1].
    pub fn infer(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward_with(&mut Eval, input)?.clamp01())
    }

    fn forward_with<O: Ops<S>>(&self, cx: &mut O, input: &Tensor<S>) -> Result<Tensor<S>> {
        let s = input.shape();
        if s.c != self.config.in_channels {
            return Err(Error::shape(
                "model forward",
                format!(
                    "input channel dimension C={} does not match the model's in_channels={}",
                    s.c, self.config.in_channels
                ),
            ));
        }
        let f0 = self.head.forward(cx, input)?;
        let mut t = f0.clone();
        match &self.body {
            Body::Groups(groups) => {
                for group in groups {
                    t = group.forward(cx, &t)?;
                }
            }
            Body::Blocks(blocks) => {
                for block in blocks {
                    t = block.forward(cx, &t)?;
                }
            }
        }
        let t = self.trunk.forward(cx, &t)?;
        let mut t = cx.add(&t, &f0)?;
        for up in &self.upsample {
            t = up.forward(cx, &t)?;
            t = cx.pixel_shuffle(&t, 2)?;
        }
        self.tail.forward(cx, &t)
    }

    /// Named parameters in a fixed order (the checkpoint and optimizer
    /// order). Names are unique.
    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = Vec::new();
        fn push<'a, S: Scalar>(
            name: String,
            layer: &'a ConvLayer<S>,
            out: &mut Vec<(String, &'a Tensor<S>)>,
        ) {
            out.push((format!("{name}.weight"), &layer.weight));
            out.push((format!("{name}.bias"), &layer.bias));
        }
        push("head".into(), &self.head, &mut out);
        match &self.body {
            Body::Groups(groups) => {
                for (gi, group) in groups.iter().enumerate() {
                    for (bi, block) in group.blocks.iter().enumerate() {
                        push(format!("g{gi}.b{bi}.conv1"), &block.conv1, &mut out);
                        push(format!("g{gi}.b{bi}.conv2"), &block.conv2, &mut out);
                        if let Some(ca) = &block.attention {
                            push(format!("g{gi}.b{bi}.ca.reduce"), &ca.reduce, &mut out);
                            push(format!("g{gi}.b{bi}.ca.expand"), &ca.expand, &mut out);
                        }
                    }
                    push(format!("g{gi}.conv"), &group.conv, &mut out);
                }
            }
            Body::Blocks(blocks) => {
                for (bi, block) in blocks.iter().enumerate() {
                    push(format!("b{bi}.conv1"), &block.conv1, &mut out);
                    push(format!("b{bi}.conv2"), &block.conv2, &mut out);
                }
            }
        }
        push("trunk".into(), &self.trunk, &mut out);
        for (ui, up) in self.upsample.iter().enumerate() {
            push(format!("up{ui}"), up, &mut out);
        }
        push("tail".into(), &self.tail, &mut out);
        out
    }

    /// Mutable view of the parameters, in the same order as [`Self::params`].
    pub(crate) fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::new();
        fn push<'a, S: Scalar>(
            name: String,
            layer: &'a mut ConvLayer<S>,
            out: &mut Vec<(String, &'a mut Tensor<S>)>,
        ) {
            out.push((format!("{name}.weight"), &mut layer.weight));
            out.push((format!("{name}.bias"), &mut layer.bias));
        }
        push("head".into(), &mut self.head, &mut out);
        match &mut self.body {
            Body::Groups(groups) => {
                for (gi, group) in groups.iter_mut().enumerate() {
                    for (bi, block) in group.blocks.iter_mut().enumerate() {
                        push(format!("g{gi}.b{bi}.conv1"), &mut block.conv1, &mut out);
                        push(format!("g{gi}.b{bi}.conv2"), &mut block.conv2, &mut out);
                        if let Some(ca) = &mut block.attention {
                            push(format!("g{gi}.b{bi}.ca.reduce"), &mut ca.reduce, &mut out);
                            push(format!("g{gi}.b{bi}.ca.expand"), &mut ca.expand, &mut out);
                        }
                    }
                    push(format!("g{gi}.conv"), &mut group.conv, &mut out);
                }
            }
            Body::Blocks(blocks) => {
                for (bi, block) in blocks.iter_mut().enumerate() {
                    push(format!("b{bi}.conv1"), &mut block.conv1, &mut out);
                    push(format!("b{bi}.conv2"), &mut block.conv2, &mut out);
                }
            }
        }
        push("trunk".into(), &mut self.trunk, &mut out);
        for (ui, up) in self.upsample.iter_mut().enumerate() {
            push(format!("up{ui}"), up, &mut out);
        }
        push("tail".into(), &mut self.tail, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copy with the parameter at `index` (in [`Self::params`] order)
    /// replaced; used by gradient checks to perturb one parameter.
    pub fn with_param_replaced(&self, index: usize, tensor: Tensor<S>) -> Model<S> {
        let mut clone = self.clone();
        *clone.params_mut()[index].1 = tensor;
        clone
    }

    /// Bitwise equality of all parameters.
    pub fn params_bit_eq(&self, other: &Model<S>) -> bool {
        let a = self.params();
        let b = other.params();
        a.len() == b.len()
            && a.iter()
                .zip(b.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_image(shape: Shape, seed: u64) -> Tensor<f32> {
        let mut rng = Rng::seed_from(seed);
        Tensor::from_fn(shape, |_| rng.next_f64() as f32)
    }

    /// Closed-form parameter count, layer by layer, independent of the
    /// builder's bookkeeping.
    fn expected_param_count(cfg: &ModelConfig) -> usize {
        let (c, k, cin) = (cfg.channels, cfg.kernel_size, cfg.in_channels);
        let conv = |co: usize, ci: usize, kk: usize| co * ci * kk * kk + co;
        let mut total = conv(c, cin, k); // head
        let block = conv(c, c, k) * 2
            + if cfg.variant == Variant::Rcan {
                conv(c / cfg.reduction, c, 1) + conv(c, c / cfg.reduction, 1)
            } else {
                0
            };
        total += block * cfg.total_blocks();
        if cfg.variant == Variant::Rcan {
            total += conv(c, c, k) * cfg.n_groups; // group convs
        }
        total += conv(c, c, k); // trunk
        let stages = match cfg.scale {
            1 => 0,
            2 => 1,
            _ => 2,
        };
        total += conv(c * 4, c, k) * stages;
        total += conv(3, c, k); // tail
        total
    }

    #[test]
    fn desk_config_shape_and_param_count() {
        let cfg = ModelConfig::desk(2);
        let model = build_rcan::<f32>(&cfg, 1).unwrap();
        let x = random_image(Shape::new(1, 3, 24, 24), 2);
        let y = model.infer(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 48, 48));
        assert_eq!(model.param_count(), expected_param_count(&cfg));
    }

    #[test]
    fn paper_configs_are_constructible() {
        let cfg = ModelConfig::paper(4);
        assert_eq!(
            (cfg.n_groups, cfg.n_blocks_per_group, cfg.channels),
            (10, 8, 64)
        );
        let model = build_rcan::<f32>(&cfg, 1).unwrap();
        assert_eq!(model.param_count(), expected_param_count(&cfg));

        let edsr_cfg = ModelConfig::edsr_paper(4);
        assert_eq!((edsr_cfg.total_blocks(), edsr_cfg.channels), (8, 64));
        let edsr = build_edsr::<f32>(&edsr_cfg, 1).unwrap();
        assert_eq!(edsr.param_count(), expected_param_count(&edsr_cfg));
    }

    #[test]
    fn scale_one_output_matches_input_shape() {
        let model = Model::<f32>::build(&ModelConfig::desk(1), 3).unwrap();
        let x = random_image(Shape::new(1, 3, 24, 24), 4);
        let y = model.infer(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn output_shape_contract_over_scales_and_sizes() {
        for &scale in &[1usize, 2, 4] {
            let model = Model::<f32>::build(&ModelConfig::desk(scale), 5).unwrap();
            for &(h, w) in &[(8usize, 8usize), (8, 12), (11, 9)] {
                let x = random_image(Shape::new(2, 3, h, w), 6);
                let y = model.infer(&x).unwrap();
                assert_eq!(y.shape(), Shape::new(2, 3, h * scale, w * scale));
            }
        }
    }

    #[test]
    fn edsr_scale2_shape_contract() {
        let model =
            build_edsr::<f32>(&ModelConfig::desk(2).with_variant(Variant::Edsr), 7).unwrap();
        let x = random_image(Shape::new(1, 3, 16, 16), 8);
        let y = model.infer(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 32, 32));
    }

    #[test]
    fn builder_variant_mismatch_rejected() {
        assert!(build_rcan::<f32>(&ModelConfig::edsr_paper(2), 0).is_err());
        assert!(build_edsr::<f32>(&ModelConfig::desk(2), 0).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::desk(2);
        cfg.channels = 10; // not divisible by reduction 4
        assert!(Model::<f32>::build(&cfg, 0).is_err());
        let mut cfg = ModelConfig::desk(2);
        cfg.scale = 3;
        assert!(Model::<f32>::build(&cfg, 0).is_err());
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let cfg = ModelConfig::desk(2);
        let a = Model::<f32>::build(&cfg, 42).unwrap();
        let b = Model::<f32>::build(&cfg, 42).unwrap();
        assert!(a.params_bit_eq(&b));
        let c = Model::<f32>::build(&cfg, 43).unwrap();
        assert!(!a.params_bit_eq(&c));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Model::<f32>::build(&ModelConfig::desk(2), 9).unwrap();
        let x = random_image(Shape::new(1, 3, 12, 12), 10);
        let a = model.infer(&x).unwrap();
        let b = model.infer(&x).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn param_names_are_unique() {
        let model = Model::<f32>::build(&ModelConfig::desk(4), 11).unwrap();
        let params = model.params();
        let mut names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        let before = names.len();
        names.dedup();
        assert_eq!(before, names.len());
    }

    #[test]
    fn zeroed_tail_conv_outputs_zero_image() {
        let mut model = Model::<f32>::build(&ModelConfig::desk(2), 12).unwrap();
        for (name, p) in model.params_mut() {
            if name.starts_with("tail.") {
                *p = Tensor::zeros(p.shape()).with_requires_grad(true);
            }
        }
        let x = random_image(Shape::new(1, 3, 8, 8), 13);
        let mut tape = Tape::new();
        let y = model.forward(&mut tape, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_residual_branch_makes_block_identity() {
        let mut model = Model::<f32>::build(&ModelConfig::desk(1), 14).unwrap();
        let Body::Groups(groups) = &mut model.body else {
            panic!("rcan body")
        };
        let block = &mut groups[0].blocks[0];
        block.conv2.weight = Tensor::zeros(block.conv2.weight.shape());
        block.conv2.bias = Tensor::zeros(block.conv2.bias.shape());
        let x = random_image(Shape::new(1, 16, 6, 6), 15);
        let y = block.forward(&mut Eval, &x).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn attention_gates_strictly_inside_unit_interval() {
        let model = Model::<f32>::build(&ModelConfig::desk(1), 16).unwrap();
        let Body::Groups(groups) = &model.body else {
            panic!("rcan body")
        };
        let x = random_image(Shape::new(2, 16, 6, 6), 17);
        for group in groups {
            for block in &group.blocks {
                let ca = block.attention.as_ref().unwrap();
                let gate = ca.gate(&mut Eval, &x).unwrap();
                assert_eq!(gate.shape(), Shape::new(2, 16, 1, 1));
                for &g in gate.data() {
                    assert!(g > 0.0 && g < 1.0, "gate {g} outside (0,1)");
                }
            }
        }
    }

    #[test]
    fn block_decomposes_into_skip_plus_gated_branch() {
        // rcab(x) == x + gate(body) * body, and with the gate absent the
        // same block is the plain EDSR residual block
        let model = Model::<f32>::build(&ModelConfig::desk(1), 18).unwrap();
        let Body::Groups(groups) = &model.body else {
            panic!("rcan body")
        };
        let rcab = &groups[0].blocks[0];
        let x = random_image(Shape::new(1, 16, 6, 6), 19);

        use crate::tensor::ops;
        let c1 = ops::conv2d(&x, &rcab.conv1.weight, Some(&rcab.conv1.bias), 1, 1).unwrap();
        let a1 = ops::relu(&c1);
        let body = ops::conv2d(&a1, &rcab.conv2.weight, Some(&rcab.conv2.bias), 1, 1).unwrap();
        let gate = rcab
            .attention
            .as_ref()
            .unwrap()
            .gate(&mut Eval, &body)
            .unwrap();
        let gated = ops::mul(&body, &gate).unwrap();
        let expected = ops::add(&x, &gated).unwrap();
        assert!(rcab.forward(&mut Eval, &x).unwrap().bit_eq(&expected));

        // gate forced to one == attention removed == EDSR block
        let plain = Block {
            conv1: rcab.conv1.clone(),
            conv2: rcab.conv2.clone(),
            attention: None,
            residual_scale: None,
        };
        let expected_plain = ops::add(&x, &body).unwrap();
        assert!(plain.forward(&mut Eval, &x).unwrap().bit_eq(&expected_plain));
    }

    #[test]
    fn identity_model_is_exact() {
        let model = Model::<f32>::identity(8).unwrap();
        let x = random_image(Shape::new(1, 3, 10, 10), 20);
        let y = model.infer(&x).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn forward_rejects_channel_mismatch() {
        let model = Model::<f32>::build(&ModelConfig::desk(2), 21).unwrap();
        let x = Tensor::<f32>::zeros(Shape::new(1, 4, 8, 8));
        assert!(model.infer(&x).is_err());
    }

    #[test]
    fn tiny_model_input_gradient_passes_grad_check() {
        let mut cfg = ModelConfig::desk(1);
        cfg.n_groups = 1;
        cfg.n_blocks_per_group = 1;
        cfg.channels = 4;
        cfg.reduction = 2;
        let model = Model::<f64>::build(&cfg, 22).unwrap();
        let mut rng = Rng::seed_from(23);
        let x = Tensor::<f64>::from_fn(Shape::new(1, 3, 5, 5), |_| rng.next_f64());
        let target = Tensor::<f64>::from_fn(Shape::new(1, 3, 5, 5), |_| rng.next_f64());
        let err = crate::tensor::grad_check::grad_check(
            |tape, x| {
                let y = model.forward(tape, x)?;
                tape.l1_loss(&y, &target)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn infer_clips_to_unit_interval() {
        let model = Model::<f32>::build(&ModelConfig::desk(1), 24).unwrap();
        let x = random_image(Shape::new(1, 3, 8, 8), 25);
        let y = model.infer(&x).unwrap();
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]

            // output shape = (N, 3, H*scale, W*scale) for any H, W >= 8
            #[test]
            fn output_shape_contract(
                h in 8usize..20,
                w in 8usize..20,
                scale_idx in 0usize..3,
                n in 1usize..3,
            ) {
                let scale = [1, 2, 4][scale_idx];
                let mut cfg = ModelConfig::desk(scale);
                cfg.n_groups = 1;
                cfg.n_blocks_per_group = 1;
                cfg.channels = 4;
                cfg.reduction = 2;
                let model = Model::<f32>::build(&cfg, 5).unwrap();
                let x = Tensor::zeros(Shape::new(n, 3, h, w));
                let y = model.infer(&x).unwrap();
                prop_assert_eq!(y.shape(), Shape::new(n, 3, h * scale, w * scale));
            }
        }
    }
}
