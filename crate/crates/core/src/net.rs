//! The U-Net saliency detector.
//!
//! The encoder is a small VGG-like FCN: five blocks of two 3×3 convs.
//! Only the first two blocks downsample and the last two use dilation 2,
//! which keeps the deep maps at 1/4 resolution. Decoding modules run from
//! the deepest (D⁵) to the shallowest (D¹); each fuses the skip feature Enⁱ
//! with the previous decoding feature, optionally enhances the fusion with
//! a global or local attention module (or a pooling baseline), and emits a
//! deeply supervised side output.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Binding, Group, Init, ParamRegistry};
use crate::ops::Mode;
use crate::picanet::{self, AttentionField, Footprint, GlobalConfig, LocalConfig, PoolMode};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    /// Whether a 2×2 max pool follows each block.
    pub downsample: Vec<bool>,
    /// Conv dilation inside each block.
    pub dilation: Vec<usize>,
    #[serde(default = "two")]
    pub convs_per_block: usize,
}

fn two() -> usize {
    2
}

impl EncoderSpec {
    pub fn toy() -> Self {
        Self {
            channels: vec![8, 16, 32, 32, 64],
            downsample: vec![true, true, false, false, false],
            dilation: vec![1, 1, 1, 2, 2],
            convs_per_block: 2,
        }
    }

    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    /// Product of the downsampling factors.
    pub fn overall_stride(&self) -> usize {
        self.downsample.iter().filter(|&&d| d).map(|_| 2).product()
    }

    /// Downsampling factor of block `b`'s output (0-based).
    pub fn stride_at(&self, b: usize) -> usize {
        self.downsample[..b].iter().filter(|&&d| d).map(|_| 2).product()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.downsample.len() != n || self.dilation.len() != n {
            return Err(Error::config("encoder channel, downsample and dilation lists must be non-empty and equally long"));
        }
        if self.downsample[n - 1] {
            return Err(Error::config("the last encoder block feeds the decoder directly and cannot downsample"));
        }
        if self.dilation.contains(&0) || self.channels.contains(&0) || self.convs_per_block == 0 {
            return Err(Error::config("encoder channels, dilations and conv counts must be at least 1"));
        }
        Ok(())
    }
}

/// Per-module context enhancement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Placement {
    Global,
    Local,
    None,
}

impl Placement {
    pub fn code(self) -> char {
        match self {
            Placement::Global => 'G',
            Placement::Local => 'L',
            Placement::None => 'N',
        }
    }
}

/// Per-module placement codes, deepest module first, e.g. `GGLLN`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PlacementString(pub Vec<Placement>);

impl FromStr for PlacementString {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                'G' => Ok(Placement::Global),
                'L' => Ok(Placement::Local),
                'N' => Ok(Placement::None),
                other => Err(Error::config(format!("placement code `{other}` is not one of G, L, N"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(PlacementString)
    }
}

impl fmt::Display for PlacementString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|p| write!(f, "{}", p.code()))
    }
}

impl PlacementString {
    /// Ablation-table style name, e.g. `+54G32LP` for `GGLLN` over D⁵…D¹.
    pub fn setting_name(&self) -> String {
        let modules = self.0.len();
        let idx = |k: usize| (modules - k).to_string();
        let pick = |want: Placement| -> String { self.0.iter().enumerate().filter(|(_, &p)| p == want).map(|(k, _)| idx(k)).collect() };
        let (g, l) = (pick(Placement::Global), pick(Placement::Local));
        match (g.is_empty(), l.is_empty()) {
            (true, true) => "U-Net".to_string(),
            (false, true) => format!("+{g}GP"),
            (true, false) => format!("+{l}LP"),
            (false, false) => format!("+{g}G{l}LP"),
        }
    }
}

impl Serialize for PlacementString {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PlacementString {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What fills the context branch of G/L modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// Pixel-wise contextual attention.
    #[default]
    Attention,
    /// Max pooling over the same footprint.
    Max,
    /// Average pooling over the same footprint.
    Avg,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModuleSpec {
    /// Module index i (5 = deepest for the toy net).
    pub index: usize,
    pub placement: Placement,
    /// Cⁱ: channels of the fused feature Fⁱ.
    pub fusion_channels: usize,
    /// Channels of Decⁱ, i.e. the next module's Cⁱ (C¹ for the last).
    pub output_channels: usize,
    pub loss_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub encoder: EncoderSpec,
    pub placement: PlacementString,
    /// Deep-supervision weights, deepest module first.
    pub loss_weights: Vec<f64>,
    pub input_size: usize,
    pub global: GlobalConfig,
    pub local: LocalConfig,
    #[serde(default)]
    pub context: ContextMode,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self::toy()
    }
}

impl NetworkSpec {
    /// Desk-scale network for 64×64 inputs with placement `GGLLN`.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderSpec::toy(),
            placement: "GGLLN".parse().expect("valid placement"),
            loss_weights: vec![0.5, 0.5, 0.8, 0.8, 1.0],
            input_size: 64,
            global: GlobalConfig::toy(),
            local: LocalConfig::toy(),
            context: ContextMode::Attention,
        }
    }

    pub fn with_placement(mut self, placement: &str) -> Result<Self> {
        self.placement = placement.parse()?;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let blocks = self.encoder.blocks();
        if self.placement.0.len() != blocks {
            return Err(Error::config(format!(
                "placement `{}` has {} codes, the network has {blocks} decoding modules",
                self.placement,
                self.placement.0.len()
            )));
        }
        if self.loss_weights.len() != blocks || self.loss_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::config(format!("need {blocks} positive loss weights, got {:?}", self.loss_weights)));
        }
        let stride = self.encoder.overall_stride();
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(Error::config(format!("input size {} is not divisible by the encoder stride {stride}", self.input_size)));
        }
        if self.placement.0.contains(&Placement::Global) {
            self.global.validate()?;
        }
        if self.placement.0.contains(&Placement::Local) {
            self.local.validate()?;
        }
        Ok(())
    }

    /// Decoding modules in execution order, deepest first.
    pub fn decoders(&self) -> Vec<DecoderModuleSpec> {
        let blocks = self.encoder.blocks();
        (0..blocks)
            .map(|k| {
                let index = blocks - k;
                let next = if index > 1 { index - 1 } else { 1 };
                DecoderModuleSpec {
                    index,
                    placement: self.placement.0[k],
                    fusion_channels: self.encoder.channels[index - 1],
                    output_channels: self.encoder.channels[next - 1],
                    loss_weight: self.loss_weights[k],
                }
            })
            .collect()
    }

    /// Spatial size of Enⁱ (1-based block index).
    pub fn feature_size(&self, index: usize) -> usize {
        self.input_size / self.encoder.stride_at(index - 1)
    }
}

/// Result of one network pass.
#[derive(Clone, Debug)]
pub struct NetOutput {
    /// Encoder features En¹…Enⁿ (pre-activation).
    pub encoder: Vec<Var>,
    /// Side saliency maps N×1×s×s, deepest module first; the last is the prediction.
    pub side_maps: Vec<Var>,
    /// Per module (deepest first): the normalized attention, when the module attends.
    pub attention: Vec<Option<Var>>,
}

impl NetOutput {
    pub fn saliency(&self) -> Var {
        *self.side_maps.last().expect("at least one decoding module")
    }
}

#[derive(Clone, Debug)]
pub struct SaliencyNet {
    spec: NetworkSpec,
}

fn enc_prefix(block: usize, conv: usize) -> String {
    format!("encoder.block{block}.conv{conv}")
}

fn dec_prefix(index: usize) -> String {
    format!("decoder.d{index}")
}

impl SaliencyNet {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Register every parameter with a deterministic initialization.
    pub fn init_params<T: Float>(&self, seed: u64) -> Result<ParamRegistry<T>> {
        let mut reg = ParamRegistry::new();
        let mut init = Init::new(seed);
        let enc = &self.spec.encoder;
        let mut c_in = 3;
        for b in 0..enc.blocks() {
            for j in 0..enc.convs_per_block {
                let prefix = enc_prefix(b + 1, j + 1);
                nn::register_conv(&mut reg, &mut init, &prefix, enc.channels[b], c_in, 3, Group::Encoder)?;
                c_in = enc.channels[b];
            }
        }
        let mut prev_channels = *enc.channels.last().expect("validated");
        for m in self.spec.decoders() {
            let p = dec_prefix(m.index);
            let skip = enc.channels[m.index - 1];
            nn::register_bn(&mut reg, &format!("{p}.en_bn"), skip, Group::Decoder)?;
            nn::register_conv(&mut reg, &mut init, &format!("{p}.fuse"), m.fusion_channels, skip + prev_channels, 1, Group::Decoder)?;
            let attends = m.placement != Placement::None;
            if attends && self.spec.context == ContextMode::Attention {
                match m.placement {
                    Placement::Global => picanet::register_global(
                        &mut reg,
                        &mut init,
                        &format!("{p}.global"),
                        m.fusion_channels,
                        &self.spec.global,
                        Group::Decoder,
                    )?,
                    Placement::Local => picanet::register_local(
                        &mut reg,
                        &mut init,
                        &format!("{p}.local"),
                        m.fusion_channels,
                        &self.spec.local,
                        Group::Decoder,
                    )?,
                    Placement::None => unreachable!(),
                }
            }
            let merged = if attends { 2 * m.fusion_channels } else { m.fusion_channels };
            nn::register_conv_weight(&mut reg, &mut init, &format!("{p}.dec_conv"), m.output_channels, merged, 1, Group::Decoder)?;
            nn::register_bn(&mut reg, &format!("{p}.dec_bn"), m.output_channels, Group::Decoder)?;
            nn::register_conv(&mut reg, &mut init, &format!("{p}.side"), 1, m.output_channels, 1, Group::Decoder)?;
            prev_channels = m.output_channels;
        }
        Ok(reg)
    }

    /// Encoder features En¹…Enⁿ (pre-activation) and the final feature map.
    pub fn encoder_forward<T: Float>(&self, tape: &mut Tape<T>, bind: &Binding<T>, image: Var) -> Result<(Vec<Var>, Var)> {
        let (_, c, h, w) = tape.value(image).dims4()?;
        let enc = &self.spec.encoder;
        if c != 3 || h != w || h % enc.overall_stride() != 0 {
            return Err(Error::config(format!(
                "input of {c}×{h}×{w} is not a square RGB image divisible by stride {}",
                enc.overall_stride()
            )));
        }
        let mut x = image;
        let mut features = Vec::with_capacity(enc.blocks());
        for b in 0..enc.blocks() {
            for j in 0..enc.convs_per_block {
                if j > 0 {
                    x = tape.relu(x);
                }
                x = nn::conv(tape, bind, &enc_prefix(b + 1, j + 1), x, enc.dilation[b])?;
            }
            features.push(x);
            x = tape.relu(x);
            if enc.downsample[b] {
                x = tape.max_pool2(x)?;
            }
        }
        Ok((features, x))
    }

    /// One decoding module: returns (Decⁱ, side map, attention).
    pub fn decoder_module_forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        bind: &mut Binding<T>,
        module: &DecoderModuleSpec,
        skip: Var,
        previous: Var,
        mode: Mode,
    ) -> Result<(Var, Var, Option<Var>)> {
        let p = dec_prefix(module.index);
        let (_, _, h, w) = tape.value(skip).dims4()?;
        let (_, _, ph, pw) = tape.value(previous).dims4()?;
        let previous = if (ph, pw) == (h, w) {
            previous
        } else if (2 * ph, 2 * pw) == (h, w) {
            tape.bilinear_upsample2x(previous)?
        } else {
            return Err(Error::config(format!("D{}: previous decoding map {ph}×{pw} is neither {h}×{w} nor half of it", module.index)));
        };
        let e = nn::batch_norm(tape, bind, &format!("{p}.en_bn"), skip, mode)?;
        let e = tape.relu(e);
        let joined = tape.concat_channels(&[e, previous])?;
        let fused = nn::conv(tape, bind, &format!("{p}.fuse"), joined, 1)?;
        let fused = tape.relu(fused);

        let (merged, attention) = match (module.placement, self.spec.context) {
            (Placement::None, _) => (fused, None),
            (placement, ContextMode::Attention) => {
                let out = match placement {
                    Placement::Global => {
                        picanet::global_picanet_forward(tape, bind, &format!("{p}.global"), fused, &self.spec.global, mode)?
                    }
                    _ => picanet::local_picanet_forward(tape, bind, &format!("{p}.local"), fused, &self.spec.local, mode)?,
                };
                (tape.concat_channels(&[fused, out.features])?, Some(out.attention))
            }
            (placement, pool) => {
                let pool = if pool == ContextMode::Max { PoolMode::Max } else { PoolMode::Avg };
                let footprint = self.footprint(placement, h, w);
                let pooled = tape.pooled_context(fused, pool, &footprint)?;
                (tape.concat_channels(&[fused, pooled])?, None)
            }
        };
        let dec = nn::conv(tape, bind, &format!("{p}.dec_conv"), merged, 1)?;
        let dec = nn::batch_norm(tape, bind, &format!("{p}.dec_bn"), dec, mode)?;
        let dec = tape.relu(dec);
        let side = nn::conv(tape, bind, &format!("{p}.side"), dec, 1)?;
        let side = tape.sigmoid(side);
        Ok((dec, side, attention))
    }

    /// Context footprint a pooling baseline uses in place of `placement`.
    pub fn footprint(&self, placement: Placement, h: usize, w: usize) -> Footprint {
        match placement {
            Placement::Global => {
                Footprint::Global(picanet::attention_positions(w, h, self.spec.global.attn_grid, self.spec.global.dilation))
            }
            _ => Footprint::Local { grid: self.spec.local.attn_grid, dilation: self.spec.local.attend_dilation },
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, bind: &mut Binding<T>, image: Var, mode: Mode) -> Result<NetOutput> {
        let (encoder, last) = self.encoder_forward(tape, bind, image)?;
        let mut previous = last;
        let mut side_maps = Vec::new();
        let mut attention = Vec::new();
        for module in self.spec.decoders() {
            let skip = encoder[module.index - 1];
            let (dec, side, attn) = self.decoder_module_forward(tape, bind, &module, skip, previous, mode)?;
            previous = dec;
            side_maps.push(side);
            attention.push(attn);
        }
        Ok(NetOutput { encoder, side_maps, attention })
    }

    /// Eval-mode saliency maps (N×1×S×S) for a stack of images, `chunk` at a time.
    pub fn predict<T: Float>(&self, params: &ParamRegistry<T>, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = images.dims4()?;
        let per = c * h * w;
        let mut out = Vec::with_capacity(n * h * w);
        for start in (0..n).step_by(chunk.max(1)) {
            let len = chunk.max(1).min(n - start);
            let part = Tensor::from_vec(&[len, c, h, w], images.data()[start * per..(start + len) * per].to_vec())?;
            let mut tape = Tape::new();
            let mut bind = params.bind(&mut tape);
            let x = tape.constant(part);
            let o = self.forward(&mut tape, &mut bind, x, Mode::Eval)?;
            tape.check_finite()?;
            out.extend_from_slice(tape.value(o.saliency()).data());
        }
        Tensor::from_vec(&[n, 1, h, w], out)
    }

    /// Eval-mode attention of every attending module, deepest first, tagged
    /// with the module index.
    pub fn attention_fields<T: Float>(
        &self,
        params: &ParamRegistry<T>,
        images: &Tensor<T>,
    ) -> Result<Vec<(usize, Placement, AttentionField<T>)>> {
        let mut tape = Tape::new();
        let mut bind = params.bind(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, &mut bind, x, Mode::Eval)?;
        tape.check_finite()?;
        let mut fields = Vec::new();
        for (module, attn) in self.spec.decoders().iter().zip(&out.attention) {
            let Some(a) = attn else { continue };
            let (grid, dilation) = match module.placement {
                Placement::Global => (self.spec.global.attn_grid, self.spec.global.dilation),
                _ => (self.spec.local.attn_grid, self.spec.local.attend_dilation),
            };
            fields.push((module.index, module.placement, AttentionField { weights: tape.value(*a).clone(), grid, dilation }));
        }
        Ok(fields)
    }

    /// Weighted sum of per-module mean BCE against the resized ground truth.
    pub fn loss<T: Float>(&self, tape: &mut Tape<T>, out: &NetOutput, gt: &Tensor<T>) -> Result<Var> {
        deep_supervised_loss(tape, &out.side_maps, gt, &self.spec.loss_weights)
    }
}

/// Nearest-neighbour resize of an N×1×S×S mask to `size`×`size`.
pub fn resize_nearest<T: Float>(mask: &Tensor<T>, size: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = mask.dims4()?;
    if (h, w) == (size, size) {
        return Ok(mask.clone());
    }
    let mut out = Vec::with_capacity(n * c * size * size);
    for plane in 0..n * c {
        let src = &mask.data()[plane * h * w..][..h * w];
        for y in 0..size {
            let sy = ((2 * y + 1) * h / (2 * size)).min(h - 1);
            for x in 0..size {
                let sx = ((2 * x + 1) * w / (2 * size)).min(w - 1);
                out.push(src[sy * w + sx]);
            }
        }
    }
    Tensor::from_vec(&[n, c, size, size], out)
}

/// `Σᵢ wᵢ · BCE(sideᵢ, resize(gt))`.
pub fn deep_supervised_loss<T: Float>(tape: &mut Tape<T>, side_maps: &[Var], gt: &Tensor<T>, weights: &[f64]) -> Result<Var> {
    if side_maps.len() != weights.len() || side_maps.is_empty() {
        return Err(Error::config(format!("{} side maps but {} loss weights", side_maps.len(), weights.len())));
    }
    if gt.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::data("ground-truth values must lie in [0, 1]"));
    }
    let mut total: Option<Var> = None;
    for (&side, &weight) in side_maps.iter().zip(weights) {
        let size = tape.shape(side)[2];
        let target = resize_nearest(gt, size)?;
        let bce = tape.bce_mean(side, &target)?;
        let term = tape.scale(bce, T::lit(weight));
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("non-empty"))
}
