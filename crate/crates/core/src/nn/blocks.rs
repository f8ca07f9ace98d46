//! Parameter storage, binding onto a tape, and the building blocks of the
//! encoder/decoder networks.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{BatchNormState, ConvGeometry, NormMode, Tape, Tensor, Var};

/// Named trainable tensors plus the running statistics of each norm layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    pub norms: BTreeMap<String, BatchNormState>,
}

impl ParamStore {
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    /// Kaiming-style uniform init: `U(-b, b)` with `b = gain * sqrt(3 / fan_in)`; zero bias.
    pub fn init_conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, gain: f32, rng: &mut Stream) {
        let fan_in = (cin * k * k * k) as f32;
        let bound = gain * (3.0 / fan_in).sqrt();
        let w = Tensor::from_fn(&[cout, cin, k, k, k], |_| rng.random_range(-bound..bound));
        self.params.insert(format!("{prefix}.weight"), w);
        self.params.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
    }

    pub fn init_norm(&mut self, prefix: &str, channels: usize) {
        self.params.insert(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0));
        self.params.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        self.norms.insert(prefix.to_string(), BatchNormState::new(channels));
    }
}

/// Gain of the fan-in scaled init for a leaky ReLU with the given slope.
pub fn leaky_gain(slope: f32) -> f32 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

enum Norms<'a> {
    Read(&'a BTreeMap<String, BatchNormState>),
    Write(&'a mut BTreeMap<String, BatchNormState>),
}

/// Binds stored parameters to tape leaves on first use and runs the layer
/// primitives against them.
pub struct Binder<'a> {
    pub tape: &'a mut Tape,
    params: &'a BTreeMap<String, Tensor>,
    norms: Norms<'a>,
    bound: BTreeMap<String, Var>,
    mode: NormMode,
    slope: f32,
}

impl<'a> Binder<'a> {
    /// Eval-mode binder; leaves the store untouched.
    pub fn eval(tape: &'a mut Tape, store: &'a ParamStore, slope: f32) -> Self {
        Self {
            tape,
            params: &store.params,
            norms: Norms::Read(&store.norms),
            bound: BTreeMap::new(),
            mode: NormMode::Eval,
            slope,
        }
    }

    /// Train-mode binder; updates running statistics in `store`.
    pub fn train(tape: &'a mut Tape, store: &'a mut ParamStore, slope: f32) -> Self {
        Self {
            tape,
            params: &store.params,
            norms: Norms::Write(&mut store.norms),
            bound: BTreeMap::new(),
            mode: NormMode::Train,
            slope,
        }
    }

    /// Use already-recorded leaves for some parameters (finite-difference checks).
    pub fn with_bound(mut self, bound: BTreeMap<String, Var>) -> Self {
        self.bound.extend(bound);
        self
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn slope(&self) -> f32 {
        self.slope
    }

    pub fn bindings(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn into_bindings(self) -> BTreeMap<String, Var> {
        self.bound
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.bound.contains_key(name) || self.params.contains_key(name)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))?;
        let v = self.tape.param(t.clone());
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv(&mut self, x: Var, prefix: &str, geom: ConvGeometry) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.tape.conv3d(x, w, Some(b), geom)
    }

    pub fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        let missing = || Error::State(format!("missing norm state {prefix}"));
        match &mut self.norms {
            Norms::Read(m) => {
                let mut st = m.get(prefix).ok_or_else(missing)?.clone();
                self.tape.batchnorm3d(x, g, b, &mut st, self.mode)
            }
            Norms::Write(m) => {
                let st = m.get_mut(prefix).ok_or_else(missing)?;
                self.tape.batchnorm3d(x, g, b, st, self.mode)
            }
        }
    }

    /// conv (3x3x3, "same") -> batch norm -> leaky ReLU.
    pub fn conv_norm_act(&mut self, x: Var, conv: &str, norm: &str, dilation: usize) -> Result<Var> {
        let y = self.conv(x, conv, ConvGeometry::same3(dilation))?;
        let y = self.norm(y, norm)?;
        Ok(self.tape.leaky_relu(y, self.slope))
    }
}

pub fn init_conv_norm(store: &mut ParamStore, conv: &str, norm: &str, cin: usize, cout: usize, slope: f32, rng: &mut Stream) {
    store.init_conv(conv, cin, cout, 3, leaky_gain(slope), rng);
    store.init_norm(norm, cout);
}

/// Two conv-norm-act layers; with `residual`, an extra 1x1x1 projection of the
/// input when channel counts differ.
pub fn init_encoder_block(
    store: &mut ParamStore,
    prefix: &str,
    cin: usize,
    cout: usize,
    residual: bool,
    slope: f32,
    rng: &mut Stream,
) {
    init_conv_norm(store, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), cin, cout, slope, rng);
    init_conv_norm(store, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), cout, cout, slope, rng);
    if residual && cin != cout {
        store.init_conv(&format!("{prefix}.proj"), cin, cout, 1, 1.0, rng);
    }
}

/// Returns `(skip, pooled)`; `skip` keeps the input's spatial dims and
/// `pooled` halves them.
pub fn encoder_block(b: &mut Binder, x: Var, prefix: &str, residual: bool) -> Result<(Var, Var)> {
    let h = b.conv_norm_act(x, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), 1)?;
    let mut skip = b.conv_norm_act(h, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), 1)?;
    if residual {
        let proj = format!("{prefix}.proj");
        let shortcut = if b.has_param(&format!("{proj}.weight")) {
            b.conv(x, &proj, ConvGeometry::pointwise())?
        } else {
            x
        };
        skip = b.tape.add(skip, shortcut)?;
    }
    let pooled = b.tape.maxpool3d(skip)?;
    Ok((skip, pooled))
}

pub fn init_bottleneck(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, layers: usize, slope: f32, rng: &mut Stream) {
    for i in 0..layers {
        let c = if i == 0 { cin } else { cout };
        init_conv_norm(store, &format!("{prefix}.conv{}", i + 1), &format!("{prefix}.bn{}", i + 1), c, cout, slope, rng);
    }
}

/// Sequential conv-norm-act layers, one per entry of `dilations`, each padded
/// to preserve spatial dims.
pub fn bottleneck(b: &mut Binder, x: Var, prefix: &str, dilations: &[usize]) -> Result<Var> {
    let mut y = x;
    for (i, &d) in dilations.iter().enumerate() {
        y = b.conv_norm_act(y, &format!("{prefix}.conv{}", i + 1), &format!("{prefix}.bn{}", i + 1), d)?;
    }
    Ok(y)
}

pub fn init_decoder_block(store: &mut ParamStore, prefix: &str, cin: usize, cskip: usize, slope: f32, rng: &mut Stream) {
    init_conv_norm(store, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), cin + cskip, cskip, slope, rng);
    init_conv_norm(store, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), cskip, cskip, slope, rng);
}

/// Upsample `x` by two, concatenate with `skip`, then two conv-norm-act layers.
pub fn decoder_block(b: &mut Binder, x: Var, skip: Var, prefix: &str) -> Result<Var> {
    let up = b.tape.upsample3d(x, 2)?;
    let (us, ss) = (b.tape.value(up).dims5()?, b.tape.value(skip).dims5()?);
    if us[0] != ss[0] || us[2..] != ss[2..] {
        return Err(Error::dim(format!(
            "upsampled decoder input {us:?} does not match skip {ss:?}"
        )));
    }
    let cat = b.tape.concat_channels(&[up, skip])?;
    let h = b.conv_norm_act(cat, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), 1)?;
    b.conv_norm_act(h, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), 1)
}

/// Upsample every decoder output to the resolution of the last one,
/// concatenate on channels, and map to class logits with a 1x1x1 conv.
pub fn deep_supervision_head(b: &mut Binder, outputs: &[Var], prefix: &str) -> Result<Var> {
    let last = *outputs
        .last()
        .ok_or_else(|| Error::dim("deep supervision head needs at least one input"))?;
    let full = b.tape.value(last).dims5()?;
    let mut ups = Vec::with_capacity(outputs.len());
    for &o in outputs {
        let d = b.tape.value(o).dims5()?;
        if d[0] != full[0] {
            return Err(Error::dim(format!(
                "decoder outputs disagree on batch size: {} vs {}",
                d[0], full[0]
            )));
        }
        let f = full[2] / d[2];
        if (2..5).any(|ax| d[ax] * f != full[ax]) {
            return Err(Error::dim(format!(
                "decoder output {d:?} is not an integer downscale of {full:?}"
            )));
        }
        ups.push(b.tape.upsample3d(o, f)?);
    }
    let cat = b.tape.concat_channels(&ups)?;
    b.conv(cat, prefix, ConvGeometry::pointwise())
}
