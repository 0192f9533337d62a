//! Encoder-decoder segmentation network with skip connections.
//!
//! Each level is a double-conv block (conv3x3 -> batchnorm -> relu, twice);
//! the encoder downsamples with 2x2 max pooling, the decoder upsamples with
//! nearest-neighbor 2x and concatenates the matching encoder features, and a
//! final 1x1 convolution produces per-class logits. Channel widths double at
//! every pooling level starting from `base_channels`.
//!
//! Parameter count closed form (k = 3, b = base, d = depth, with batchnorm):
//! a double-conv block a->c costs `9ac + c + 9c^2 + c` weights plus `4c` for
//! its two batchnorm layers; the network stacks blocks
//! `in->b, b->2b, ..., (3b 2^i)->(b 2^i)` plus a `b*classes + classes` head.
//! [`expected_parameter_count`] evaluates this and is asserted against the
//! actual build.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{load_checkpoint, save_checkpoint, Parameter, Scalar, Tape, Tensor};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_bands: usize,
    pub classes: usize,
    /// Number of pooling levels; input dims must divide by 2^depth.
    pub depth: usize,
    pub base_channels: usize,
    pub batchnorm: bool,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_bands: 10,
            classes: 2,
            depth: 2,
            base_channels: 8,
            batchnorm: true,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_bands == 0 || self.base_channels == 0 {
            return Err(Error::Config("bands and base channels must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.depth >= usize::BITS as usize {
            return Err(Error::Config("depth is unreasonably large".into()));
        }
        Ok(())
    }

    /// Checks that a tile size survives `depth` rounds of 2x pooling.
    pub fn validate_tile(&self, tile: usize) -> Result<()> {
        let div = 1usize << self.depth;
        if tile == 0 || tile % div != 0 {
            return Err(Error::Config(format!(
                "tile size {tile} is not divisible by 2^depth = {div}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct ConvDef {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct BnDef {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Clone, Copy, Debug)]
struct BlockDef {
    conv1: ConvDef,
    bn1: Option<BnDef>,
    conv2: ConvDef,
    bn2: Option<BnDef>,
}

/// Frozen running statistics for one batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
struct BnState<T> {
    mean: Vec<T>,
    var: Vec<T>,
}

/// One forward pass's connection to the tape: the logits plus the parameter
/// leases, needed to pull gradients back out after `backward`.
pub struct ForwardPass {
    pub logits: Tensor,
    leases: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct UNet<T: Scalar> {
    config: UNetConfig,
    params: Vec<Parameter<T>>,
    bn_state: Vec<BnState<T>>,
    enc: Vec<BlockDef>,
    bottleneck: BlockDef,
    dec: Vec<BlockDef>,
    head: ConvDef,
}

struct Builder<T: Scalar> {
    rng: ChaCha8Rng,
    params: Vec<Parameter<T>>,
    bn_state: Vec<BnState<T>>,
}

impl<T: Scalar> Builder<T> {
    /// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<ConvDef> {
        let fan_in = (cin * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let values: Vec<T> = (0..cout * cin * k * k)
            .map(|_| T::fromf(self.rng.gen_range(-bound..bound)))
            .collect();
        let w = self.push(Parameter::new(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            values,
        )?);
        let b = self.push(Parameter::new(
            format!("{name}.bias"),
            vec![cout],
            vec![T::zero(); cout],
        )?);
        Ok(ConvDef { w, b })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<BnDef> {
        let gamma = self.push(Parameter::new(
            format!("{name}.gamma"),
            vec![c],
            vec![T::one(); c],
        )?);
        let beta = self.push(Parameter::new(
            format!("{name}.beta"),
            vec![c],
            vec![T::zero(); c],
        )?);
        self.bn_state.push(BnState {
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        });
        Ok(BnDef {
            gamma,
            beta,
            state: self.bn_state.len() - 1,
        })
    }

    fn double_conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        batchnorm: bool,
    ) -> Result<BlockDef> {
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, 3)?;
        let bn1 = batchnorm
            .then(|| self.bn(&format!("{name}.bn1"), cout))
            .transpose()?;
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, 3)?;
        let bn2 = batchnorm
            .then(|| self.bn(&format!("{name}.bn2"), cout))
            .transpose()?;
        Ok(BlockDef {
            conv1,
            bn1,
            conv2,
            bn2,
        })
    }

    fn push(&mut self, p: Parameter<T>) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }
}

impl<T: Scalar> UNet<T> {
    /// Builds the network with seeded Kaiming-uniform initialization;
    /// identical seeds give bit-identical parameters.
    pub fn build(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params: Vec::new(),
            bn_state: Vec::new(),
        };
        let base = config.base_channels;
        let mut enc = Vec::new();
        let mut ch = config.in_bands;
        for i in 0..config.depth {
            let out = base << i;
            enc.push(b.double_conv(&format!("enc{i}"), ch, out, config.batchnorm)?);
            ch = out;
        }
        let bottleneck_out = if config.depth == 0 {
            base
        } else {
            base << config.depth
        };
        let bottleneck = b.double_conv("bottleneck", ch, bottleneck_out, config.batchnorm)?;
        let mut dec = Vec::new();
        for i in (0..config.depth).rev() {
            let skip = base << i;
            let below = base << (i + 1);
            dec.push(b.double_conv(&format!("dec{i}"), below + skip, skip, config.batchnorm)?);
        }
        let head = b.conv("head", base, config.classes, 1)?;
        Ok(UNet {
            config,
            params: b.params,
            bn_state: b.bn_state,
            enc,
            bottleneck,
            dec,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Forward pass; train mode leases trainable leaves and updates the
    /// batchnorm running statistics, eval mode is a pure function of
    /// (parameters, input).
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Tensor, mode: Mode) -> Result<ForwardPass> {
        match mode {
            Mode::Train => {
                let leases: Vec<Tensor> = self
                    .params
                    .iter()
                    .map(|p| p.lease(tape))
                    .collect::<Result<_>>()?;
                let (logits, updates) = self.forward_graph(tape, x, &leases, true)?;
                let m = T::fromf(BN_MOMENTUM);
                let keep = T::fromf(1.0 - BN_MOMENTUM);
                for (state, mean, var) in updates {
                    let s = &mut self.bn_state[state];
                    for (r, b) in s.mean.iter_mut().zip(&mean) {
                        *r = keep * *r + m * *b;
                    }
                    for (r, b) in s.var.iter_mut().zip(&var) {
                        *r = keep * *r + m * *b;
                    }
                }
                Ok(ForwardPass { logits, leases })
            }
            Mode::Eval => {
                let pass = self.forward_eval(tape, x)?;
                Ok(pass)
            }
        }
    }

    /// Eval-mode forward through shared immutable parameters.
    pub fn forward_eval(&self, tape: &mut Tape<T>, x: Tensor) -> Result<ForwardPass> {
        let leases: Vec<Tensor> = self
            .params
            .iter()
            .map(|p| p.lease_frozen(tape))
            .collect::<Result<_>>()?;
        let (logits, _) = self.forward_graph(tape, x, &leases, false)?;
        Ok(ForwardPass { logits, leases })
    }

    /// Core graph builder over caller-provided parameter leaves (one per
    /// parameter, in [`UNet::params`] order). Returns the logits and, in
    /// train mode, the batch statistics of every batchnorm layer.
    #[allow(clippy::type_complexity)]
    pub fn forward_graph(
        &self,
        tape: &mut Tape<T>,
        x: Tensor,
        leases: &[Tensor],
        train: bool,
    ) -> Result<(Tensor, Vec<(usize, Vec<T>, Vec<T>)>)> {
        if leases.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter leases, got {}",
                self.params.len(),
                leases.len()
            )));
        }
        let shape = tape.shape(x)?.to_vec();
        let (_, bands, h, w) = match shape[..] {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::Shape("input must be [B, bands, H, W]".into())),
        };
        if bands != self.config.in_bands {
            return Err(Error::Shape(format!(
                "input has {bands} bands, model expects {}",
                self.config.in_bands
            )));
        }
        let div = 1usize << self.config.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {h}x{w} must divide by 2^depth = {div}"
            )));
        }

        let mut updates = Vec::new();
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut cur = x;
        for block in &self.enc {
            let features = self.block(tape, cur, block, leases, train, &mut updates)?;
            skips.push(features);
            cur = tape.maxpool2d(features)?;
        }
        cur = self.block(tape, cur, &self.bottleneck, leases, train, &mut updates)?;
        for (block, &skip) in self.dec.iter().zip(skips.iter().rev()) {
            let up = tape.upsample_nearest2x(cur)?;
            let cat = tape.concat_channels(up, skip)?;
            cur = self.block(tape, cat, block, leases, train, &mut updates)?;
        }
        let logits = tape.conv2d(cur, leases[self.head.w], Some(leases[self.head.b]))?;
        Ok((logits, updates))
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        x: Tensor,
        def: &BlockDef,
        leases: &[Tensor],
        train: bool,
        updates: &mut Vec<(usize, Vec<T>, Vec<T>)>,
    ) -> Result<Tensor> {
        let mut cur = tape.conv2d(x, leases[def.conv1.w], Some(leases[def.conv1.b]))?;
        if let Some(bn) = &def.bn1 {
            cur = self.bn_layer(tape, cur, bn, leases, train, updates)?;
        }
        cur = tape.relu(cur)?;
        cur = tape.conv2d(cur, leases[def.conv2.w], Some(leases[def.conv2.b]))?;
        if let Some(bn) = &def.bn2 {
            cur = self.bn_layer(tape, cur, bn, leases, train, updates)?;
        }
        tape.relu(cur)
    }

    fn bn_layer(
        &self,
        tape: &mut Tape<T>,
        x: Tensor,
        def: &BnDef,
        leases: &[Tensor],
        train: bool,
        updates: &mut Vec<(usize, Vec<T>, Vec<T>)>,
    ) -> Result<Tensor> {
        if train {
            let (y, mean, var) =
                tape.batchnorm2d_train(x, leases[def.gamma], leases[def.beta], BN_EPS)?;
            updates.push((def.state, mean, var));
            Ok(y)
        } else {
            let state = &self.bn_state[def.state];
            tape.batchnorm2d_eval(
                x,
                leases[def.gamma],
                leases[def.beta],
                &state.mean,
                &state.var,
                BN_EPS,
            )
        }
    }

    /// Adds the tape's accumulated gradients for this pass into the
    /// parameters' grad buffers.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, pass: &ForwardPass) -> Result<()> {
        for (param, &lease) in self.params.iter_mut().zip(&pass.leases) {
            param.absorb_grad(tape, lease)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Swaps the two output channels of the head (weights and bias).
    /// Used to align a permutation-blind checkpoint with the label order.
    pub fn swap_output_channels(&mut self) -> Result<()> {
        if self.config.classes != 2 {
            return Err(Error::Config("channel swap requires exactly 2 classes".into()));
        }
        let w = &mut self.params[self.head.w];
        let half = w.values.len() / 2;
        let (a, b) = w.values.split_at_mut(half);
        a.swap_with_slice(b);
        let bias = &mut self.params[self.head.b];
        bias.values.swap(0, 1);
        Ok(())
    }

    /// Writes parameters plus batchnorm running statistics as NNW1 records.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut records = self.params.clone();
        for (i, s) in self.bn_state.iter().enumerate() {
            records.push(Parameter::new(
                format!("bn_state{i}.mean"),
                vec![s.mean.len()],
                s.mean.clone(),
            )?);
            records.push(Parameter::new(
                format!("bn_state{i}.var"),
                vec![s.var.len()],
                s.var.clone(),
            )?);
        }
        save_checkpoint(&records, path)
    }

    /// Rebuilds a network from a config and an NNW1 checkpoint written by
    /// [`UNet::save`]; record names and shapes must match the build.
    pub fn load(config: UNetConfig, path: impl AsRef<std::path::Path>) -> Result<Self> {
        let mut net = UNet::build(config)?;
        let records = load_checkpoint::<T>(path)?;
        let expected = net.params.len() + 2 * net.bn_state.len();
        if records.len() != expected {
            return Err(Error::Corruption(format!(
                "checkpoint has {} records, model needs {expected}",
                records.len()
            )));
        }
        for (i, rec) in records.into_iter().enumerate() {
            if i < net.params.len() {
                let p = &mut net.params[i];
                if rec.name != p.name || rec.shape != p.shape {
                    return Err(Error::Corruption(format!(
                        "record {i} is {}{:?}, expected {}{:?}",
                        rec.name, rec.shape, p.name, p.shape
                    )));
                }
                p.values = rec.values;
            } else {
                let j = i - net.params.len();
                let state = &mut net.bn_state[j / 2];
                if j % 2 == 0 {
                    state.mean = rec.values;
                } else {
                    state.var = rec.values;
                }
            }
        }
        Ok(net)
    }
}

/// Closed-form parameter count for a config; see the module docs.
pub fn expected_parameter_count(config: &UNetConfig) -> usize {
    let double_conv = |cin: usize, cout: usize| {
        let mut n = 9 * cin * cout + cout + 9 * cout * cout + cout;
        if config.batchnorm {
            n += 4 * cout;
        }
        n
    };
    let base = config.base_channels;
    let mut total = 0;
    let mut ch = config.in_bands;
    for i in 0..config.depth {
        total += double_conv(ch, base << i);
        ch = base << i;
    }
    let bottleneck_out = if config.depth == 0 {
        base
    } else {
        base << config.depth
    };
    total += double_conv(ch, bottleneck_out);
    for i in (0..config.depth).rev() {
        total += double_conv(3 * (base << i), base << i);
    }
    total + base * config.classes + config.classes
}
