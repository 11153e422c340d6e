//! A tiny feed-forward network with hand-written backward passes.
//!
//! A [`MicroNet`] is a chain of layers applied to a channel-last grid. Any
//! layer output may be exposed as a named tap, optionally through a per-tap
//! 1x1 projection head (used by the student to match teacher channel counts).
//! The same engine plays the frozen segmentation teacher and the trainable
//! mimic student.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, ParseError, Result};
use crate::tensorgrid::{resize_channels, FeatureMap, Grid, LayerId};

pub type TapMap = BTreeMap<LayerId, FeatureMap>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// 3x3 convolution, zero padding 1.
    Conv3x3 {
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    },
    /// Per-pixel dense map over channels.
    Affine { in_dim: usize, out_dim: usize },
    Relu,
    /// Per-pixel classifier producing logits.
    Output1x1 { in_ch: usize, num_classes: usize },
}

impl LayerKind {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerKind::Conv3x3 { in_ch, out_ch, .. } => out_ch * 9 * in_ch + out_ch,
            LayerKind::Affine { in_dim, out_dim } => out_dim * in_dim + out_dim,
            LayerKind::Relu => 0,
            LayerKind::Output1x1 { in_ch, num_classes } => num_classes * in_ch + num_classes,
        }
    }

    fn expected_input(&self) -> Option<usize> {
        match *self {
            LayerKind::Conv3x3 { in_ch, .. } => Some(in_ch),
            LayerKind::Affine { in_dim, .. } => Some(in_dim),
            LayerKind::Relu => None,
            LayerKind::Output1x1 { in_ch, .. } => Some(in_ch),
        }
    }

    fn output_channels(&self, input: usize) -> usize {
        match *self {
            LayerKind::Conv3x3 { out_ch, .. } => out_ch,
            LayerKind::Affine { out_dim, .. } => out_dim,
            LayerKind::Relu => input,
            LayerKind::Output1x1 { num_classes, .. } => num_classes,
        }
    }

    fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        match *self {
            LayerKind::Conv3x3 { stride, .. } => ((h - 1) / stride + 1, (w - 1) / stride + 1),
            _ => (h, w),
        }
    }

    fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv3x3 { .. } => "conv3x3",
            LayerKind::Affine { .. } => "affine",
            LayerKind::Relu => "relu",
            LayerKind::Output1x1 { .. } => "output1x1",
        }
    }

    fn fields(&self) -> Vec<usize> {
        match *self {
            LayerKind::Conv3x3 {
                in_ch,
                out_ch,
                stride,
            } => vec![in_ch, out_ch, stride],
            LayerKind::Affine { in_dim, out_dim } => vec![in_dim, out_dim],
            LayerKind::Relu => vec![],
            LayerKind::Output1x1 { in_ch, num_classes } => vec![in_ch, num_classes],
        }
    }

    fn from_parts(tag: &str, fields: &[usize]) -> Option<LayerKind> {
        Some(match (tag, fields) {
            ("conv3x3", &[in_ch, out_ch, stride]) => LayerKind::Conv3x3 {
                in_ch,
                out_ch,
                stride,
            },
            ("affine", &[in_dim, out_dim]) => LayerKind::Affine { in_dim, out_dim },
            ("relu", &[]) => LayerKind::Relu,
            ("output1x1", &[in_ch, num_classes]) => LayerKind::Output1x1 { in_ch, num_classes },
            _ => return None,
        })
    }

    /// (fan_in, fan_out) for weight initialization.
    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerKind::Conv3x3 { in_ch, out_ch, .. } => (in_ch * 9, out_ch * 9),
            LayerKind::Affine { in_dim, out_dim } => (in_dim, out_dim),
            LayerKind::Relu => (0, 0),
            LayerKind::Output1x1 { in_ch, num_classes } => (in_ch, num_classes),
        }
    }

    fn weight_count(&self) -> usize {
        match *self {
            LayerKind::Conv3x3 { in_ch, out_ch, .. } => out_ch * 9 * in_ch,
            LayerKind::Affine { in_dim, out_dim } => out_dim * in_dim,
            LayerKind::Relu => 0,
            LayerKind::Output1x1 { in_ch, num_classes } => num_classes * in_ch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub tap: Option<LayerId>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec { kind, tap: None }
    }

    pub fn tapped(kind: LayerKind, tap: LayerId) -> Self {
        LayerSpec {
            kind,
            tap: Some(tap),
        }
    }
}

/// A 1x1 projection applied to a tap before it is exposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionHead {
    pub tap: LayerId,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl ProjectionHead {
    fn param_count(&self) -> usize {
        self.out_ch * self.in_ch + self.out_ch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Shuffling seed; derived from the run seed rather than configured.
    #[serde(skip)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroNet {
    input_channels: usize,
    layers: Vec<LayerSpec>,
    heads: Vec<ProjectionHead>,
    params: Vec<f64>,
    frozen: bool,
    layer_offsets: Vec<usize>,
    head_offsets: Vec<usize>,
}

/// Cached activations of one forward pass.
pub struct Forward {
    acts: Vec<Grid>,
    head_outputs: Vec<Grid>,
}

impl MicroNet {
    /// Builds a network with all parameters zero. Use [`MicroNet::init_params`]
    /// or [`MicroNet::seeded`] for a random start.
    pub fn new(
        input_channels: usize,
        layers: Vec<LayerSpec>,
        heads: Vec<ProjectionHead>,
    ) -> Result<Self> {
        if input_channels == 0 {
            return Err(Error::contract("network input must have >= 1 channel"));
        }
        if layers.is_empty() {
            return Err(Error::contract("network needs at least one layer"));
        }
        let mut ch = input_channels;
        let mut tap_channels = BTreeMap::new();
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0usize;
        for (i, spec) in layers.iter().enumerate() {
            if let Some(want) = spec.kind.expected_input() {
                if want != ch {
                    return Err(Error::contract(format!(
                        "layer {i} ({}) expects {want} input channels, chain provides {ch}",
                        spec.kind.tag()
                    )));
                }
            }
            if let LayerKind::Conv3x3 { stride, .. } = spec.kind {
                if stride == 0 {
                    return Err(Error::contract(format!("layer {i}: stride must be >= 1")));
                }
            }
            if spec.kind.fields().contains(&0) {
                return Err(Error::contract(format!("layer {i}: zero-sized dimension")));
            }
            ch = spec.kind.output_channels(ch);
            if let Some(tap) = spec.tap {
                if tap_channels.insert(tap, ch).is_some() {
                    return Err(Error::contract(format!("tap {tap} declared twice")));
                }
            }
            offsets.push(total);
            total += spec.kind.param_count();
        }
        let mut head_offsets = Vec::with_capacity(heads.len());
        let mut seen = Vec::new();
        for head in &heads {
            let Some(&tc) = tap_channels.get(&head.tap) else {
                return Err(Error::contract(format!(
                    "projection head for undeclared tap {}",
                    head.tap
                )));
            };
            if tc != head.in_ch || head.out_ch == 0 {
                return Err(Error::contract(format!(
                    "projection head for {} maps {}->{}, tap has {tc} channels",
                    head.tap, head.in_ch, head.out_ch
                )));
            }
            if seen.contains(&head.tap) {
                return Err(Error::contract(format!("two projection heads on {}", head.tap)));
            }
            seen.push(head.tap);
            head_offsets.push(total);
            total += head.param_count();
        }
        Ok(MicroNet {
            input_channels,
            layers,
            heads,
            params: vec![0.0; total],
            frozen: false,
            layer_offsets: offsets,
            head_offsets,
        })
    }

    /// Builds a network and draws its weights from `seed`.
    pub fn seeded(
        input_channels: usize,
        layers: Vec<LayerSpec>,
        heads: Vec<ProjectionHead>,
        seed: u64,
    ) -> Result<Self> {
        let mut net = MicroNet::new(input_channels, layers, heads)?;
        net.init_params(seed)?;
        Ok(net)
    }

    /// Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)); zero biases.
    pub fn init_params(&mut self, seed: u64) -> Result<()> {
        self.ensure_mutable()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (spec, &off) in self.layers.iter().zip(&self.layer_offsets) {
            let (fi, fo) = spec.kind.fans();
            let wc = spec.kind.weight_count();
            let pc = spec.kind.param_count();
            if pc == 0 {
                continue;
            }
            let a = (6.0 / (fi + fo) as f64).sqrt();
            for p in &mut self.params[off..off + wc] {
                *p = rng.random_range(-a..=a);
            }
            self.params[off + wc..off + pc].fill(0.0);
        }
        for (head, &off) in self.heads.iter().zip(&self.head_offsets) {
            let a = (6.0 / (head.in_ch + head.out_ch) as f64).sqrt();
            let wc = head.in_ch * head.out_ch;
            for p in &mut self.params[off..off + wc] {
                *p = rng.random_range(-a..=a);
            }
            self.params[off + wc..off + head.param_count()].fill(0.0);
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn heads(&self) -> &[ProjectionHead] {
        &self.heads
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Returns an unfrozen copy with identical parameters.
    pub fn thawed(&self) -> MicroNet {
        let mut n = self.clone();
        n.frozen = false;
        n
    }

    fn ensure_mutable(&self) -> Result<()> {
        if self.frozen {
            Err(Error::MutationRefused)
        } else {
            Ok(())
        }
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        self.ensure_mutable()?;
        if params.len() != self.params.len() {
            return Err(Error::contract(format!(
                "parameter vector has {} entries, network has {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Offset of the parameters belonging to the projection head on `tap`.
    pub fn head_param_range(&self, tap: LayerId) -> Option<std::ops::Range<usize>> {
        self.heads
            .iter()
            .zip(&self.head_offsets)
            .find(|(h, _)| h.tap == tap)
            .map(|(h, &off)| off..off + h.param_count())
    }

    pub fn layer_param_range(&self, index: usize) -> std::ops::Range<usize> {
        let off = self.layer_offsets[index];
        off..off + self.layers[index].kind.param_count()
    }

    /// Declared taps in layer order.
    pub fn taps(&self) -> Vec<LayerId> {
        self.layers.iter().filter_map(|l| l.tap).collect()
    }

    fn head_index(&self, tap: LayerId) -> Option<usize> {
        self.heads.iter().position(|h| h.tap == tap)
    }

    /// Channel count exposed at `tap` (after its projection head, if any).
    pub fn tap_channels(&self, tap: LayerId) -> Option<usize> {
        if let Some(h) = self.head_index(tap) {
            return Some(self.heads[h].out_ch);
        }
        let mut ch = self.input_channels;
        for spec in &self.layers {
            ch = spec.kind.output_channels(ch);
            if spec.tap == Some(tap) {
                return Some(ch);
            }
        }
        None
    }

    /// Spatial size of `tap` for an input of the given size.
    pub fn tap_size(&self, tap: LayerId, h: usize, w: usize) -> Option<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for spec in &self.layers {
            (h, w) = spec.kind.output_size(h, w);
            if spec.tap == Some(tap) {
                return Some((h, w));
            }
        }
        None
    }

    pub fn forward(&self, image: &Grid) -> Result<Forward> {
        if image.channels != self.input_channels {
            return Err(Error::contract(format!(
                "image has {} channels, network expects {}",
                image.channels, self.input_channels
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(image.clone());
        for (i, spec) in self.layers.iter().enumerate() {
            let p = &self.params[self.layer_range(i)];
            let next = layer_forward(&spec.kind, p, &acts[i]);
            acts.push(next);
        }
        let head_outputs = self
            .heads
            .iter()
            .zip(&self.head_offsets)
            .map(|(head, &off)| {
                let src = self.tap_layer_index(head.tap).expect("validated at construction");
                dense_forward(
                    &self.params[off..off + head.param_count()],
                    head.in_ch,
                    head.out_ch,
                    &acts[src + 1],
                )
            })
            .collect();
        Ok(Forward { acts, head_outputs })
    }

    fn layer_range(&self, i: usize) -> std::ops::Range<usize> {
        self.layer_param_range(i)
    }

    fn tap_layer_index(&self, tap: LayerId) -> Option<usize> {
        self.layers.iter().position(|l| l.tap == Some(tap))
    }

    fn tap_grid<'a>(&self, fwd: &'a Forward, tap: LayerId) -> Option<&'a Grid> {
        if let Some(h) = self.head_index(tap) {
            return Some(&fwd.head_outputs[h]);
        }
        self.tap_layer_index(tap).map(|i| &fwd.acts[i + 1])
    }

    /// Tap outputs of an already-computed forward pass.
    pub fn taps_of(&self, fwd: &Forward) -> TapMap {
        self.taps()
            .into_iter()
            .map(|t| (t, self.tap_grid(fwd, t).unwrap().clone().tagged(t)))
            .collect()
    }

    pub fn forward_with_taps(&self, image: &Grid) -> Result<TapMap> {
        let fwd = self.forward(image)?;
        Ok(self.taps_of(&fwd))
    }

    /// Gradient of a loss with respect to all parameters, given the loss
    /// gradient at each supplied tap.
    pub fn backward(&self, image: &Grid, upstream: &TapMap) -> Result<Vec<f64>> {
        let fwd = self.forward(image)?;
        self.backward_from(&fwd, upstream)
    }

    pub fn backward_from(&self, fwd: &Forward, upstream: &TapMap) -> Result<Vec<f64>> {
        for (tap, g) in upstream {
            let Some(out) = self.tap_grid(fwd, *tap) else {
                return Err(Error::contract(format!(
                    "upstream gradient supplied for undeclared tap {tap}"
                )));
            };
            if (g.height, g.width, g.channels) != (out.height, out.width, out.channels) {
                return Err(Error::contract(format!(
                    "upstream gradient for {tap} is {}x{}x{}, tap output is {}x{}x{}",
                    g.height, g.width, g.channels, out.height, out.width, out.channels
                )));
            }
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut carried: Option<Vec<f64>> = None;
        for i in (0..self.layers.len()).rev() {
            let spec = &self.layers[i];
            if let Some(up) = spec.tap.and_then(|t| upstream.get(&t)) {
                let out = &fwd.acts[i + 1];
                let acc = carried.get_or_insert_with(|| vec![0.0; out.data.len()]);
                match self.head_index(spec.tap.unwrap()) {
                    Some(h) => {
                        let head = &self.heads[h];
                        let off = self.head_offsets[h];
                        let range = off..off + head.param_count();
                        let (pg, gx) = dense_backward(
                            &self.params[range.clone()],
                            head.in_ch,
                            head.out_ch,
                            out,
                            &up.data,
                        );
                        add_into(&mut grads[range], &pg);
                        add_into(acc, &gx);
                    }
                    None => add_into(acc, &up.data),
                }
            }
            let Some(gout) = carried.take() else {
                continue;
            };
            let range = self.layer_range(i);
            let (pg, gin) = layer_backward(&spec.kind, &self.params[range.clone()], &fwd.acts[i], &gout);
            add_into(&mut grads[range], &pg);
            if i > 0 {
                carried = Some(gin);
            }
        }
        Ok(grads)
    }

    /// params <- params - lr * grads.
    pub fn sgd_step(&mut self, grads: &[f64], lr: f64) -> Result<()> {
        self.ensure_mutable()?;
        if grads.len() != self.params.len() {
            return Err(Error::contract(format!(
                "gradient has {} entries, network has {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            *p -= lr * g;
        }
        Ok(())
    }

    /// SHA-256 of the little-endian parameter bytes.
    pub fn param_checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Per-pixel argmax of the `O` tap, bilinearly resized to `out_h x out_w`.
    /// Ties go to the lowest class index.
    pub fn predict_classes(&self, image: &Grid, out_h: usize, out_w: usize) -> Result<Vec<u16>> {
        let taps = self.forward_with_taps(image)?;
        let logits = taps
            .get(&LayerId::O)
            .ok_or_else(|| Error::config("network has no O tap"))?;
        Ok(argmax_classes(logits, out_h, out_w))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u8(u8::from(self.frozen));
        w.len_u32(self.input_channels, "input channels")?;
        w.len_u32(self.layers.len(), "layer count")?;
        for spec in &self.layers {
            w.str8(spec.kind.tag())?;
            w.str8(spec.tap.map(LayerId::name).unwrap_or(""))?;
            let fields = spec.kind.fields();
            w.u8(fields.len() as u8);
            for f in fields {
                w.len_u32(f, "layer field")?;
            }
        }
        w.len_u32(self.heads.len(), "head count")?;
        for head in &self.heads {
            w.str8(head.tap.name())?;
            w.len_u32(head.in_ch, "head input channels")?;
            w.len_u32(head.out_ch, "head output channels")?;
        }
        w.u64(self.params.len() as u64);
        for p in &self.params {
            w.f64(*p);
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let frozen = r.u8("flags")? & 1 == 1;
        let input_channels = r.u32("input channels")? as usize;
        let n_layers = r.u32("layer count")? as usize;
        let mut layers = Vec::new();
        for i in 0..n_layers {
            let ctx = format!("layer {i}");
            let at = r.offset();
            let tag = r.str8(&ctx)?;
            let tap_name = r.str8(&ctx)?;
            let n_fields = r.u8(&ctx)? as usize;
            let fields = (0..n_fields)
                .map(|_| r.u32(&ctx).map(|v| v as usize))
                .collect::<Result<Vec<_>, ParseError>>()?;
            let kind = LayerKind::from_parts(&tag, &fields)
                .ok_or_else(|| r.invalid(at, &ctx, format!("unknown layer kind {tag:?} with {n_fields} fields")))?;
            let tap = if tap_name.is_empty() {
                None
            } else {
                Some(parse_layer(&r, at, &ctx, &tap_name)?)
            };
            layers.push(LayerSpec { kind, tap });
        }
        let n_heads = r.u32("head count")? as usize;
        let mut heads = Vec::new();
        for i in 0..n_heads {
            let ctx = format!("head {i}");
            let at = r.offset();
            let name = r.str8(&ctx)?;
            let tap = parse_layer(&r, at, &ctx, &name)?;
            let in_ch = r.u32(&ctx)? as usize;
            let out_ch = r.u32(&ctx)? as usize;
            heads.push(ProjectionHead { tap, in_ch, out_ch });
        }
        let count_at = r.offset();
        let n_params = r.u64("parameter count")?;
        let mut net = MicroNet::new(input_channels, layers, heads).map_err(|e| {
            Error::Parse(r.invalid(count_at, "layer table", e.to_string()))
        })?;
        if n_params != net.params.len() as u64 {
            return Err(r
                .invalid(
                    count_at,
                    "parameter count",
                    format!("file declares {n_params}, layer table implies {}", net.params.len()),
                )
                .into());
        }
        net.params = r.f64_array(net.params.len(), "parameters")?;
        r.finish("checkpoint")?;
        net.frozen = frozen;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        MicroNet::from_bytes(&read_file(path)?)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CSMN";
const CHECKPOINT_VERSION: u32 = 1;

fn parse_layer(r: &ByteReader<'_>, at: usize, ctx: &str, name: &str) -> Result<LayerId, ParseError> {
    name.parse()
        .map_err(|_| r.invalid(at, ctx, format!("unknown layer name {name:?}")))
}

pub(crate) fn argmax_classes(logits: &FeatureMap, out_h: usize, out_w: usize) -> Vec<u16> {
    let resized = resize_channels(
        &logits.data,
        logits.height,
        logits.width,
        logits.channels,
        out_h,
        out_w,
    );
    resized
        .chunks_exact(logits.channels)
        .map(|px| {
            let mut best = 0;
            for (k, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = k;
                }
            }
            best as u16
        })
        .collect()
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

fn layer_forward(kind: &LayerKind, p: &[f64], x: &Grid) -> Grid {
    match *kind {
        LayerKind::Conv3x3 {
            in_ch,
            out_ch,
            stride,
        } => conv_forward(p, in_ch, out_ch, stride, x),
        LayerKind::Affine { in_dim, out_dim } => dense_forward(p, in_dim, out_dim, x),
        LayerKind::Output1x1 { in_ch, num_classes } => dense_forward(p, in_ch, num_classes, x),
        LayerKind::Relu => Grid {
            data: x.data.iter().map(|&v| v.max(0.0)).collect(),
            ..*x
        },
    }
}

/// Returns (parameter gradient, input gradient).
fn layer_backward(kind: &LayerKind, p: &[f64], x: &Grid, gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    match *kind {
        LayerKind::Conv3x3 {
            in_ch,
            out_ch,
            stride,
        } => conv_backward(p, in_ch, out_ch, stride, x, gy),
        LayerKind::Affine { in_dim, out_dim } => dense_backward(p, in_dim, out_dim, x, gy),
        LayerKind::Output1x1 { in_ch, num_classes } => dense_backward(p, in_ch, num_classes, x, gy),
        LayerKind::Relu => (
            Vec::new(),
            x.data
                .iter()
                .zip(gy)
                .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                .collect(),
        ),
    }
}

// Dense weights are stored [out][in], followed by [out] biases.
fn dense_forward(p: &[f64], n_in: usize, n_out: usize, x: &Grid) -> Grid {
    let (w, b) = p.split_at(n_out * n_in);
    let mut data = Vec::with_capacity(x.height * x.width * n_out);
    for px in x.data.chunks_exact(n_in) {
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            data.push(b[o] + row.iter().zip(px).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    Grid {
        height: x.height,
        width: x.width,
        channels: n_out,
        data,
    }
}

fn dense_backward(p: &[f64], n_in: usize, n_out: usize, x: &Grid, gy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = &p[..n_out * n_in];
    let mut pg = vec![0.0; p.len()];
    let mut gx = vec![0.0; x.data.len()];
    let (gw, gb) = pg.split_at_mut(n_out * n_in);
    for ((px, gpx), gout) in x
        .data
        .chunks_exact(n_in)
        .zip(gx.chunks_exact_mut(n_in))
        .zip(gy.chunks_exact(n_out))
    {
        for (o, &g) in gout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb[o] += g;
            let row = &w[o * n_in..(o + 1) * n_in];
            let grow = &mut gw[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                grow[i] += g * px[i];
                gpx[i] += g * row[i];
            }
        }
    }
    (pg, gx)
}

// Conv weights are stored [out][ky][kx][in], followed by [out] biases.
fn conv_forward(p: &[f64], in_ch: usize, out_ch: usize, stride: usize, x: &Grid) -> Grid {
    let (oh, ow) = ((x.height - 1) / stride + 1, (x.width - 1) / stride + 1);
    let (w, b) = p.split_at(out_ch * 9 * in_ch);
    let mut data = vec![0.0; oh * ow * out_ch];
    for oy in 0..oh {
        for ox in 0..ow {
            let out = &mut data[(oy * ow + ox) * out_ch..(oy * ow + ox + 1) * out_ch];
            out.copy_from_slice(b);
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy as usize >= x.height {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix as usize >= x.width {
                        continue;
                    }
                    let px = x.pixel(iy as usize, ix as usize);
                    for (o, acc) in out.iter_mut().enumerate() {
                        let k = &w[((o * 3 + ky) * 3 + kx) * in_ch..][..in_ch];
                        *acc += k.iter().zip(px).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
    Grid {
        height: oh,
        width: ow,
        channels: out_ch,
        data,
    }
}

fn conv_backward(
    p: &[f64],
    in_ch: usize,
    out_ch: usize,
    stride: usize,
    x: &Grid,
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = ((x.height - 1) / stride + 1, (x.width - 1) / stride + 1);
    let nw = out_ch * 9 * in_ch;
    let w = &p[..nw];
    let mut pg = vec![0.0; p.len()];
    let mut gx = vec![0.0; x.data.len()];
    let (gw, gb) = pg.split_at_mut(nw);
    for oy in 0..oh {
        for ox in 0..ow {
            let gout = &gy[(oy * ow + ox) * out_ch..(oy * ow + ox + 1) * out_ch];
            for (o, &g) in gout.iter().enumerate() {
                gb[o] += g;
            }
            for ky in 0..3 {
                let iy = (oy * stride + ky) as isize - 1;
                if iy < 0 || iy as usize >= x.height {
                    continue;
                }
                for kx in 0..3 {
                    let ix = (ox * stride + kx) as isize - 1;
                    if ix < 0 || ix as usize >= x.width {
                        continue;
                    }
                    let base = (iy as usize * x.width + ix as usize) * in_ch;
                    let px = &x.data[base..base + in_ch];
                    let gpx = &mut gx[base..base + in_ch];
                    for (o, &g) in gout.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let koff = ((o * 3 + ky) * 3 + kx) * in_ch;
                        let k = &w[koff..koff + in_ch];
                        let gk = &mut gw[koff..koff + in_ch];
                        for i in 0..in_ch {
                            gk[i] += g * px[i];
                            gpx[i] += g * k[i];
                        }
                    }
                }
            }
        }
    }
    (pg, gx)
}

/// An image with one class id per pixel.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Grid,
    pub labels: Vec<u16>,
}

/// Mean per-pixel softmax cross-entropy of the `O` tap against the labels
/// sampled at the logit resolution. Returns (loss, logit gradient).
fn cross_entropy(logits: &FeatureMap, sample: &LabeledImage) -> Result<(f64, FeatureMap)> {
    let (h, w) = (sample.image.height, sample.image.width);
    if sample.labels.len() != h * w {
        return Err(Error::contract("label map does not match image size"));
    }
    let k = logits.channels;
    let mut grad = FeatureMap::zeros(LayerId::O, logits.height, logits.width, k);
    let mut total = 0.0;
    let mut counted = 0usize;
    for oy in 0..logits.height {
        let sy = ((2 * oy + 1) * h) / (2 * logits.height);
        for ox in 0..logits.width {
            let sx = ((2 * ox + 1) * w) / (2 * logits.width);
            let label = sample.labels[sy * w + sx] as usize;
            if label >= k {
                return Err(Error::contract(format!(
                    "label {label} outside the {k} network classes"
                )));
            }
            let z = logits.pixel(oy, ox);
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
            let sum: f64 = exps.iter().sum();
            total += sum.ln() + zmax - z[label];
            let g = &mut grad.data[(oy * logits.width + ox) * k..][..k];
            for c in 0..k {
                g[c] = exps[c] / sum - if c == label { 1.0 } else { 0.0 };
            }
            counted += 1;
        }
    }
    let n = counted as f64;
    for g in &mut grad.data {
        *g /= n;
    }
    Ok((total / n, grad))
}

pub fn mean_cross_entropy(net: &MicroNet, dataset: &[LabeledImage]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::contract("empty dataset"));
    }
    let losses = dataset
        .par_iter()
        .map(|s| {
            let taps = net.forward_with_taps(&s.image)?;
            let logits = taps.get(&LayerId::O).ok_or_else(|| Error::config("network has no O tap"))?;
            cross_entropy(logits, s).map(|(l, _)| l)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Fraction of logit-resolution pixels whose argmax matches the label.
pub fn pixel_accuracy(net: &MicroNet, dataset: &[LabeledImage]) -> Result<f64> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for s in dataset {
        let (h, w) = (s.image.height, s.image.width);
        let taps = net.forward_with_taps(&s.image)?;
        let logits = taps.get(&LayerId::O).ok_or_else(|| Error::config("network has no O tap"))?;
        let pred = argmax_classes(logits, logits.height, logits.width);
        for oy in 0..logits.height {
            let sy = ((2 * oy + 1) * h) / (2 * logits.height);
            for ox in 0..logits.width {
                let sx = ((2 * ox + 1) * w) / (2 * logits.width);
                hit += usize::from(pred[oy * logits.width + ox] == s.labels[sy * w + sx]);
                total += 1;
            }
        }
    }
    Ok(hit as f64 / total as f64)
}

/// Sums per-item gradients in input order.
pub(crate) fn sum_in_order(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut acc = vec![0.0; len];
    for g in &parts {
        add_into(&mut acc, g);
    }
    acc
}

/// Seeded mini-batch order: one shuffled permutation per epoch.
pub(crate) fn epoch_batches(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Trains with per-pixel softmax cross-entropy (batch mean) and returns the
/// frozen network along with the mean training loss of each epoch.
pub fn pretrain_teacher(
    mut net: MicroNet,
    dataset: &[LabeledImage],
    cfg: &TrainConfig,
) -> Result<(MicroNet, Vec<f64>)> {
    cfg.validate()?;
    if !net.taps().contains(&LayerId::O) {
        return Err(Error::config("teacher network needs an output head tapped as O"));
    }
    if dataset.is_empty() {
        return Err(Error::contract("teacher training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for batch in epoch_batches(&mut rng, dataset.len(), cfg.batch_size) {
            let parts = batch
                .par_iter()
                .map(|&idx| {
                    let s = &dataset[idx];
                    let fwd = net.forward(&s.image)?;
                    let taps = net.taps_of(&fwd);
                    let (loss, grad) = cross_entropy(&taps[&LayerId::O], s)?;
                    let up = TapMap::from([(LayerId::O, grad)]);
                    Ok((loss, net.backward_from(&fwd, &up)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / batch.len() as f64;
            let (losses, grads): (Vec<f64>, Vec<Vec<f64>>) = parts.into_iter().unzip();
            epoch_loss += losses.iter().sum::<f64>();
            let mut g = sum_in_order(grads, net.param_count());
            g.iter_mut().for_each(|v| *v *= scale);
            net.sgd_step(&g, cfg.learning_rate)?;
        }
        let mean = epoch_loss / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch: log.len() });
        }
        log.push(mean);
    }
    net.freeze();
    Ok((net, log))
}

/// Channel widths of the C1, C2, C3, C4, C5 and LH stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneWidths(pub [usize; 6]);

impl BackboneWidths {
    pub fn halved(self) -> Self {
        BackboneWidths(self.0.map(|w| (w / 2).max(1)))
    }
}

const BACKBONE_TAPS: [LayerId; 6] = [
    LayerId::C1,
    LayerId::C2,
    LayerId::C3,
    LayerId::C4,
    LayerId::C5,
    LayerId::LH,
];
const BACKBONE_STRIDES: [usize; 6] = [1, 2, 2, 2, 1, 1];

/// Conv/ReLU backbone tapped at C1..C5 and LH with a 1x1 classifier tapped O.
/// C2..C4 halve the spatial size; C5 and LH keep C4's resolution.
pub fn segmentation_layers(input_channels: usize, widths: BackboneWidths, num_classes: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut ch = input_channels;
    for ((&tap, &stride), &width) in BACKBONE_TAPS.iter().zip(&BACKBONE_STRIDES).zip(&widths.0) {
        layers.push(LayerSpec::new(LayerKind::Conv3x3 {
            in_ch: ch,
            out_ch: width,
            stride,
        }));
        layers.push(LayerSpec::tapped(LayerKind::Relu, tap));
        ch = width;
    }
    layers.push(LayerSpec::tapped(
        LayerKind::Output1x1 {
            in_ch: ch,
            num_classes,
        },
        LayerId::O,
    ));
    layers
}

/// A student sharing the teacher's stride schedule with halved widths and a
/// projection head on every supervised tap whose width differs.
pub fn student_for(teacher: &MicroNet, widths: BackboneWidths, num_classes: usize, supervised: &[LayerId], seed: u64) -> Result<MicroNet> {
    let layers = segmentation_layers(teacher.input_channels(), widths, num_classes);
    let probe = MicroNet::new(teacher.input_channels(), layers.clone(), vec![])?;
    let mut heads = Vec::new();
    for &tap in supervised {
        let want = teacher
            .tap_channels(tap)
            .ok_or_else(|| Error::config(format!("teacher has no tap {tap}")))?;
        let have = probe
            .tap_channels(tap)
            .ok_or_else(|| Error::config(format!("student has no tap {tap}")))?;
        if have != want {
            heads.push(ProjectionHead {
                tap,
                in_ch: have,
                out_ch: want,
            });
        }
    }
    MicroNet::seeded(teacher.input_channels(), layers, heads, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, c: usize, data: Vec<f64>) -> Grid {
        Grid::new(h, w, c, data).unwrap()
    }

    fn ramp(h: usize, w: usize, c: usize) -> Grid {
        let n = h * w * c;
        grid(h, w, c, (0..n).map(|i| (i as f64 * 0.37).sin()).collect())
    }

    #[test]
    fn identity_affine_passes_input_through() {
        let mut net = MicroNet::new(
            2,
            vec![LayerSpec::tapped(LayerKind::Affine { in_dim: 2, out_dim: 2 }, LayerId::LH)],
            vec![],
        )
        .unwrap();
        net.set_params(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = ramp(3, 2, 2);
        let taps = net.forward_with_taps(&x).unwrap();
        assert_eq!(taps[&LayerId::LH].data, x.data);
    }

    #[test]
    fn relu_zeroes_negatives() {
        let net = MicroNet::new(1, vec![LayerSpec::tapped(LayerKind::Relu, LayerId::C1)], vec![]).unwrap();
        let taps = net.forward_with_taps(&grid(1, 3, 1, vec![-1.0, 0.5, 2.0])).unwrap();
        assert_eq!(taps[&LayerId::C1].data, vec![0.0, 0.5, 2.0]);
    }

    #[test]
    fn zero_kernel_conv_is_constant_bias() {
        let kind = LayerKind::Conv3x3 {
            in_ch: 2,
            out_ch: 3,
            stride: 2,
        };
        let mut net = MicroNet::new(2, vec![LayerSpec::tapped(kind, LayerId::C2)], vec![]).unwrap();
        let mut p = vec![0.0; kind.param_count()];
        let n = p.len();
        p[n - 3..].copy_from_slice(&[0.5, -1.0, 2.0]);
        net.set_params(p).unwrap();
        let out = &net.forward_with_taps(&ramp(5, 4, 2)).unwrap()[&LayerId::C2];
        assert_eq!((out.height, out.width), (3, 2));
        for px in out.pixels() {
            assert_eq!(px, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let err = MicroNet::new(
            3,
            vec![LayerSpec::new(LayerKind::Affine { in_dim: 2, out_dim: 2 })],
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let net = MicroNet::new(2, vec![LayerSpec::tapped(LayerKind::Relu, LayerId::C1)], vec![]).unwrap();
        assert!(net.forward(&ramp(2, 2, 3)).is_err());
    }

    #[test]
    fn duplicate_taps_are_rejected() {
        let err = MicroNet::new(
            1,
            vec![
                LayerSpec::tapped(LayerKind::Relu, LayerId::C1),
                LayerSpec::tapped(LayerKind::Relu, LayerId::C1),
            ],
            vec![],
        );
        assert!(err.is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = MicroNet::seeded(2, segmentation_layers(2, BackboneWidths([2, 2, 2, 2, 2, 2]), 3), vec![], 4).unwrap();
        let x = ramp(8, 8, 2);
        let taps = net.forward_with_taps(&x).unwrap();
        let up: TapMap = taps
            .iter()
            .map(|(k, v)| (*k, FeatureMap::zeros(*k, v.height, v.width, v.channels)))
            .collect();
        let g = net.backward(&x, &up).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_weight_gradient_is_outer_product() {
        let mut net = MicroNet::new(
            3,
            vec![LayerSpec::tapped(LayerKind::Affine { in_dim: 3, out_dim: 2 }, LayerId::O)],
            vec![],
        )
        .unwrap();
        net.set_params(vec![0.3, -0.2, 0.1, 0.5, 0.4, -0.6, 0.0, 0.0]).unwrap();
        let x = grid(1, 1, 3, vec![1.0, 2.0, -1.5]);
        let g = FeatureMap::new(LayerId::O, 1, 1, 2, vec![0.7, -2.0]).unwrap();
        let grads = net.backward(&x, &TapMap::from([(LayerId::O, g)])).unwrap();
        let expect = [0.7, 1.4, -1.05, -2.0, -4.0, 3.0, 0.7, -2.0];
        for (a, b) in grads.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn undeclared_tap_gradient_is_rejected() {
        let net = MicroNet::new(1, vec![LayerSpec::tapped(LayerKind::Relu, LayerId::C1)], vec![]).unwrap();
        let x = grid(1, 1, 1, vec![1.0]);
        let up = TapMap::from([(LayerId::C2, FeatureMap::zeros(LayerId::C2, 1, 1, 1))]);
        assert!(matches!(net.backward(&x, &up), Err(Error::Contract(_))));
    }

    #[test]
    fn sgd_step_examples() {
        let mut net = MicroNet::new(1, vec![LayerSpec::new(LayerKind::Affine { in_dim: 1, out_dim: 1 })], vec![]).unwrap();
        net.set_params(vec![1.0, 2.0]).unwrap();
        net.sgd_step(&[1.0, -1.0], 0.0).unwrap();
        assert_eq!(net.params(), &[1.0, 2.0]);
        net.sgd_step(&[1.0, -1.0], 0.5).unwrap();
        assert_eq!(net.params(), &[0.5, 2.5]);

        let g = [0.25, -0.75];
        let mut twice = net.clone();
        twice.sgd_step(&g, 0.5).unwrap();
        twice.sgd_step(&g, 0.5).unwrap();
        let mut once = net.clone();
        once.sgd_step(&[0.5, -1.5], 0.5).unwrap();
        assert_eq!(twice.params(), once.params());
    }

    #[test]
    fn frozen_net_refuses_mutation() {
        let mut net = MicroNet::new(1, vec![LayerSpec::new(LayerKind::Affine { in_dim: 1, out_dim: 1 })], vec![]).unwrap();
        net.freeze();
        assert!(matches!(net.sgd_step(&[0.0, 0.0], 0.1), Err(Error::MutationRefused)));
        assert!(matches!(net.set_params(vec![0.0, 0.0]), Err(Error::MutationRefused)));
        assert!(matches!(net.init_params(1), Err(Error::MutationRefused)));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let layers = segmentation_layers(3, BackboneWidths([4, 4, 8, 8, 8, 8]), 5);
        let a = MicroNet::seeded(3, layers.clone(), vec![], 9).unwrap();
        let b = MicroNet::seeded(3, layers.clone(), vec![], 9).unwrap();
        let c = MicroNet::seeded(3, layers, vec![], 10).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        let r = a.layer_param_range(0);
        let bound = (6.0f64 / (27 + 36) as f64).sqrt();
        assert!(a.params()[r.start..r.start + 4 * 27].iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn tap_sizes_follow_stride_schedule() {
        let teacher = MicroNet::seeded(3, segmentation_layers(3, BackboneWidths([8, 8, 16, 16, 16, 16]), 4), vec![], 1).unwrap();
        let student = student_for(&teacher, BackboneWidths([8, 8, 16, 16, 16, 16]).halved(), 4, &LayerId::ALL, 2).unwrap();
        let x = ramp(32, 32, 3);
        let t = teacher.forward_with_taps(&x).unwrap();
        let s = student.forward_with_taps(&x).unwrap();
        for l in LayerId::ALL {
            assert_eq!(t[&l].shape(), s[&l].shape(), "tap {l}");
        }
        assert_eq!(t[&LayerId::C1].shape(), (32, 32, 8));
        assert_eq!(t[&LayerId::C2].shape(), (16, 16, 8));
        assert_eq!(t[&LayerId::C4].shape(), (4, 4, 16));
        assert_eq!(t[&LayerId::C5].shape(), (4, 4, 16));
        assert_eq!(teacher.tap_size(LayerId::O, 32, 32), Some((4, 4)));
    }

    #[test]
    fn checkpoint_round_trip_and_bad_magic() {
        let teacher = MicroNet::seeded(3, segmentation_layers(3, BackboneWidths([4, 4, 4, 4, 4, 4]), 3), vec![], 1).unwrap();
        let student = student_for(&teacher, BackboneWidths([2, 2, 2, 2, 2, 2]), 3, &[LayerId::C5, LayerId::O], 3).unwrap();
        let mut frozen = student.clone();
        frozen.freeze();
        for net in [teacher, student, frozen] {
            let bytes = net.to_bytes().unwrap();
            assert_eq!(&bytes[..4], b"CSMN");
            assert_eq!(MicroNet::from_bytes(&bytes).unwrap(), net);
        }
        let err = MicroNet::from_bytes(b"XXXX\x01\0\0\0").unwrap_err();
        assert!(matches!(err, Error::Parse(ParseError::BadMagic { offset: 0, .. })));
    }

    fn toy_separable(n: usize) -> Vec<LabeledImage> {
        // Class 1 where the pixel value is positive.
        (0..n)
            .map(|k| {
                let data: Vec<f64> = (0..16)
                    .map(|i| {
                        let s = ((k * 16 + i) as f64 * 0.731).sin();
                        if s.abs() < 0.1 { s.signum() * 0.1 } else { s }
                    })
                    .collect();
                let labels = data.iter().map(|&v| u16::from(v > 0.0)).collect();
                LabeledImage {
                    image: grid(4, 4, 1, data),
                    labels,
                }
            })
            .collect()
    }

    fn toy_net() -> MicroNet {
        MicroNet::seeded(
            1,
            vec![
                LayerSpec::new(LayerKind::Affine { in_dim: 1, out_dim: 4 }),
                LayerSpec::new(LayerKind::Relu),
                LayerSpec::tapped(LayerKind::Output1x1 { in_ch: 4, num_classes: 2 }, LayerId::O),
            ],
            vec![],
            17,
        )
        .unwrap()
    }

    #[test]
    fn pretrain_separable_toy_reaches_accuracy() {
        let data = toy_separable(16);
        let net = toy_net();
        let before = mean_cross_entropy(&net, &data).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.5,
            batch_size: 4,
            epochs: 60,
            seed: 3,
        };
        let (trained, log) = pretrain_teacher(net, &data, &cfg).unwrap();
        assert!(trained.is_frozen());
        assert_eq!(log.len(), 60);
        assert!(mean_cross_entropy(&trained, &data).unwrap() < before);
        assert!(pixel_accuracy(&trained, &data).unwrap() >= 0.95);
    }

    #[test]
    fn pretrain_with_zero_rate_keeps_params() {
        let data = toy_separable(4);
        let net = toy_net();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 2,
            epochs: 3,
            seed: 1,
        };
        let (trained, log) = pretrain_teacher(net.clone(), &data, &cfg).unwrap();
        assert_eq!(trained.params(), net.params());
        let l0 = mean_cross_entropy(&net, &data).unwrap();
        assert!(log.iter().all(|&l| (l - l0).abs() < 1e-12));
    }

    #[test]
    fn zeroed_head_loss_is_ln2() {
        let mut data = toy_separable(8);
        // Balance exactly: flip labels on half the images' mirrored copies.
        let mirrored: Vec<_> = data
            .iter()
            .map(|s| LabeledImage {
                image: Grid {
                    data: s.image.data.iter().map(|v| -v).collect(),
                    ..s.image.clone()
                },
                labels: s.labels.iter().map(|l| 1 - l).collect(),
            })
            .collect();
        data.extend(mirrored);
        let mut net = toy_net();
        let mut p = net.params().to_vec();
        let r = net.layer_param_range(2);
        p[r].fill(0.0);
        net.set_params(p).unwrap();
        let loss = mean_cross_entropy(&net, &data).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn pretrain_requires_output_tap() {
        let net = MicroNet::new(1, vec![LayerSpec::tapped(LayerKind::Relu, LayerId::C1)], vec![]).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            batch_size: 1,
            epochs: 1,
            seed: 0,
        };
        assert!(matches!(
            pretrain_teacher(net, &toy_separable(1), &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_separable(8);
        let cfg = TrainConfig {
            learning_rate: 0.3,
            batch_size: 3,
            epochs: 5,
            seed: 11,
        };
        let (a, la) = pretrain_teacher(toy_net(), &data, &cfg).unwrap();
        let (b, lb) = pretrain_teacher(toy_net(), &data, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(la, lb);
    }
}
