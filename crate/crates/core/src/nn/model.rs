use std::collections::BTreeMap;

use super::blocks::{self, Binder, ParamStore};
use super::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ConvGeometry, Tape, Tensor, Var};

/// Layers of the non-dilated bottleneck of the plain variant.
const PLAIN_BOTTLENECK: [usize; 2] = [1, 1];

/// A built network: its configuration and parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub store: ParamStore,
}

/// Values recorded by one forward pass.
#[derive(Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Decoder stage outputs, deepest first.
    pub decoder_outputs: Vec<Var>,
    /// Tape leaf of every parameter that took part.
    pub bindings: BTreeMap<String, Var>,
}

impl Model {
    /// Build and initialize the parameters of `config` from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut r = rng::stream(seed, &[rng::tag::INIT]);
        let slope = config.leaky_slope;
        let variant = config.variant;
        let mut cin = config.in_channels;
        for l in 0..config.levels {
            let c = config.channels(l);
            blocks::init_encoder_block(&mut store, &format!("enc{l}"), cin, c, variant.residual_encoder(), slope, &mut r);
            cin = c;
        }
        let cb = config.bottleneck_channels();
        let layers = if variant.dilated_bottleneck() {
            config.dilation_rates.len()
        } else {
            PLAIN_BOTTLENECK.len()
        };
        blocks::init_bottleneck(&mut store, "bott", cin, cb, layers, slope, &mut r);
        let mut below = cb;
        for l in (0..config.levels).rev() {
            let c = config.channels(l);
            blocks::init_decoder_block(&mut store, &format!("dec{l}"), below, c, slope, &mut r);
            below = c;
        }
        if variant.deep_supervision() {
            let total: usize = (0..config.levels).map(|l| config.channels(l)).sum();
            store.init_conv("ds_head", total, config.num_classes, 1, 1.0, &mut r);
        } else {
            store.init_conv("final", config.channels(0), config.num_classes, 1, 1.0, &mut r);
        }
        Ok(Self { config, store })
    }

    /// Rebuild from stored parameters, checking names and shapes against `config`.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let reference = Self::build(config.clone(), 0)?;
        let names = |s: &ParamStore| s.params.keys().cloned().collect::<Vec<_>>();
        if names(&reference.store) != names(&store) {
            return Err(Error::Checkpoint(format!(
                "parameter names do not match a {} network",
                config.variant
            )));
        }
        for (name, t) in &reference.store.params {
            if store.params[name].shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    store.params[name].shape(),
                    t.shape()
                )));
            }
        }
        for (name, st) in &reference.store.norms {
            match store.norms.get(name) {
                Some(s) if s.channels() == st.channels() && s.running_var.len() == st.channels() => {}
                _ => return Err(Error::Checkpoint(format!("norm state {name} missing or mis-sized"))),
            }
        }
        if store.norms.len() != reference.store.norms.len() {
            return Err(Error::Checkpoint("unexpected norm states".into()));
        }
        Ok(Self { config, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// `(name, shape)` for every parameter, sorted by name.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.store
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, d, h, w] = match shape {
            &[n, c, d, h, w] => [n, c, d, h, w],
            s => return Err(Error::dim(format!("expected [N, C, D, H, W] input, got {s:?}"))),
        };
        if c != self.config.in_channels {
            return Err(Error::dim(format!(
                "input has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        let k = self.config.divisor();
        if d % k != 0 || h % k != 0 || w % k != 0 {
            return Err(Error::dim(format!(
                "spatial dims {d}x{h}x{w} must be divisible by {k}; pad_or_crop the volume first"
            )));
        }
        Ok(())
    }

    /// Eval-mode forward pass (running norm statistics, no state change).
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<ForwardOutput> {
        self.check_input(tape.value(input).shape())?;
        let config = &self.config;
        let mut b = Binder::eval(tape, &self.store, config.leaky_slope);
        run(config, &mut b, input)
    }

    /// Train-mode forward pass: batch statistics, running statistics updated.
    pub fn forward_train(&mut self, tape: &mut Tape, input: Var) -> Result<ForwardOutput> {
        self.check_input(tape.value(input).shape())?;
        let config = &self.config;
        let mut b = Binder::train(tape, &mut self.store, config.leaky_slope);
        run(config, &mut b, input)
    }

    /// Forward pass reading the named parameters from existing tape leaves.
    /// In train mode the running statistics of a scratch copy are updated.
    pub fn forward_bound(&self, tape: &mut Tape, input: Var, bound: BTreeMap<String, Var>, train: bool) -> Result<ForwardOutput> {
        self.check_input(tape.value(input).shape())?;
        let config = &self.config;
        if train {
            let mut store = self.store.clone();
            let mut b = Binder::train(tape, &mut store, config.leaky_slope).with_bound(bound);
            run(config, &mut b, input)
        } else {
            let mut b = Binder::eval(tape, &self.store, config.leaky_slope).with_bound(bound);
            run(config, &mut b, input)
        }
    }

    /// Eval-mode logits for a batch, without keeping the tape.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, x)?;
        Ok(tape.value(out.logits).clone())
    }
}

fn run(config: &ModelConfig, b: &mut Binder, input: Var) -> Result<ForwardOutput> {
    let variant = config.variant;
    let mut skips = Vec::with_capacity(config.levels);
    let mut x = input;
    for l in 0..config.levels {
        let (skip, pooled) = blocks::encoder_block(b, x, &format!("enc{l}"), variant.residual_encoder())?;
        skips.push(skip);
        x = pooled;
    }
    let rates: &[usize] = if variant.dilated_bottleneck() {
        &config.dilation_rates
    } else {
        &PLAIN_BOTTLENECK
    };
    x = blocks::bottleneck(b, x, "bott", rates)?;
    let mut decoder_outputs = Vec::with_capacity(config.levels);
    for l in (0..config.levels).rev() {
        x = blocks::decoder_block(b, x, skips[l], &format!("dec{l}"))?;
        decoder_outputs.push(x);
    }
    let logits = if variant.deep_supervision() {
        blocks::deep_supervision_head(b, &decoder_outputs, "ds_head")?
    } else {
        b.conv(x, "final", ConvGeometry::pointwise())?
    };
    Ok(ForwardOutput {
        logits,
        decoder_outputs,
        bindings: b.bindings().clone(),
    })
}
