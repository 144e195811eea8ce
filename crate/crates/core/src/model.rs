//! The full restoration network and its ablation variants.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndp::PriorMap;
use crate::ndpt::{ffn_hidden, BlockFlags, BlockShape, NdpMode, NdpSource, NdptStack, Trace};
use crate::nn::{pixel_shuffle, pixel_unshuffle, Conv, ConvNextV2Block, ConvSpec};
use crate::params::{join, ParamStore};
use crate::tensor::{crop, reflect_pad, ImageTensor};

/// Architecture switches used by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// No prior in attention or feed-forward.
    A,
    /// No prior in attention.
    B,
    /// No prior in feed-forward.
    C,
    /// Raw mixed features in place of the prior.
    D,
    /// Prior added to the block input instead of entering the sub-layers.
    E,
    /// No feature super-resolution branch; five reconstruction blocks.
    Cascaded,
    /// Super-resolution head present but unsupervised.
    NoSrBranch,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::A,
        Variant::B,
        Variant::C,
        Variant::D,
        Variant::E,
        Variant::Cascaded,
        Variant::NoSrBranch,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
            Variant::E => "e",
            Variant::Cascaded => "cascaded",
            Variant::NoSrBranch => "no_sr_branch",
        }
    }

    pub fn block_flags(&self) -> BlockFlags {
        let base = BlockFlags::default();
        match self {
            Variant::A => BlockFlags { ndp_in_attn: false, ndp_in_ffn: false, ..base },
            Variant::B => BlockFlags { ndp_in_attn: false, ..base },
            Variant::C => BlockFlags { ndp_in_ffn: false, ..base },
            Variant::D => BlockFlags { source: NdpSource::DirectFeature, ..base },
            Variant::E => BlockFlags { mode: NdpMode::BeforeBlock, ..base },
            Variant::Full | Variant::Cascaded | Variant::NoSrBranch => base,
        }
    }

    pub fn has_sr_branch(&self) -> bool {
        *self != Variant::Cascaded
    }

    /// Whether the super-resolution output contributes to the loss.
    pub fn supervises_sr(&self) -> bool {
        !matches!(self, Variant::Cascaded | Variant::NoSrBranch)
    }

    pub fn recon_blocks(&self) -> usize {
        if self.has_sr_branch() {
            3
        } else {
            5
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    pub heads: usize,
    pub shuffle: usize,
    pub expansion: f64,
    pub shared_mixer: bool,
    pub temperature_init: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            blocks: 15,
            heads: 8,
            shuffle: 8,
            expansion: 2.0,
            shared_mixer: true,
            temperature_init: 1.0,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Collects every violated constraint.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.channels == 0 {
            errs.push("channels must be at least 1".to_string());
        }
        if self.blocks == 0 {
            errs.push("blocks must be at least 1".to_string());
        }
        if self.shuffle == 0 {
            errs.push("shuffle must be at least 1".to_string());
        }
        if self.heads == 0 {
            errs.push("heads must be at least 1".to_string());
        } else if self.channels % self.heads != 0 {
            errs.push(format!("heads ({}) must divide channels ({})", self.heads, self.channels));
        }
        if !(self.expansion.is_finite() && self.expansion > 0.0) {
            errs.push(format!("expansion must be positive, got {}", self.expansion));
        } else if ffn_hidden(self.channels, self.expansion) == 0 {
            errs.push(format!("expansion {} leaves no hidden channels", self.expansion));
        }
        if !(self.temperature_init.is_finite() && self.temperature_init > 0.0) {
            errs.push(format!("temperature_init must be positive, got {}", self.temperature_init));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    /// `field: a != b` for every field that differs.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let (a, b) = (a.as_object().unwrap(), b.as_object().unwrap());
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: {v} != {}", b.get(k).map(|x| x.to_string()).unwrap_or_default()))
            .collect()
    }
}

/// Three ConvNeXt-v2 blocks in sequence, all outputs kept.
#[derive(Debug, Clone)]
pub struct Hrfr {
    blocks: [ConvNextV2Block; 3],
}

impl Hrfr {
    fn new(store: &mut ParamStore, path: &str, c: usize) -> Result<Self> {
        Ok(Self {
            blocks: [
                ConvNextV2Block::new(store, &join(path, "0"), c)?,
                ConvNextV2Block::new(store, &join(path, "1"), c)?,
                ConvNextV2Block::new(store, &join(path, "2"), c)?,
            ],
        })
    }

    pub fn forward(&self, x0: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let x1 = self.blocks[0].forward(x0)?;
        let x2 = self.blocks[1].forward(&x1)?;
        let x3 = self.blocks[2].forward(&x2)?;
        Ok((x1, x2, x3))
    }
}

/// Pixel-unshuffle by `s` followed by a pointwise `C s^2 -> C` projection.
#[derive(Debug, Clone)]
pub struct ShuffleDown {
    proj: Conv,
    factor: usize,
}

impl ShuffleDown {
    fn new(store: &mut ParamStore, path: &str, c: usize, s: usize) -> Result<Self> {
        Ok(Self { proj: Conv::new(store, path, ConvSpec::pointwise(c * s * s, c))?, factor: s })
    }

    pub fn forward(&self, x0: &Tensor) -> Result<Tensor> {
        self.proj.forward(&pixel_unshuffle(x0, self.factor)?)
    }
}

/// Pointwise `C -> C s^2`, pixel shuffle, then a 3x3 conv to RGB.
#[derive(Debug, Clone)]
pub struct FeaSr {
    up: Conv,
    to_rgb: Conv,
    factor: usize,
}

impl FeaSr {
    fn new(store: &mut ParamStore, path: &str, c: usize, s: usize) -> Result<Self> {
        Ok(Self {
            up: Conv::new(store, &join(path, "up"), ConvSpec::pointwise(c, c * s * s))?,
            to_rgb: Conv::new(store, &join(path, "to_rgb"), ConvSpec::dense(c, 3, 3))?,
            factor: s,
        })
    }

    /// Returns `(sr_features, sr_image)`.
    pub fn forward(&self, x_l: &Tensor) -> Result<(Tensor, Tensor)> {
        let feats = pixel_shuffle(&self.up.forward(x_l)?, self.factor)?;
        let image = self.to_rgb.forward(&feats)?;
        Ok((feats, image))
    }
}

/// Fusion 1x1, ConvNeXt-v2 blocks, 1x1, and a zero-initialized 3x3 to the residual.
#[derive(Debug, Clone)]
pub struct SrgRecon {
    fuse: Conv,
    blocks: Vec<ConvNextV2Block>,
    mid: Conv,
    out: Conv,
}

impl SrgRecon {
    fn new(store: &mut ParamStore, path: &str, c: usize, fused_inputs: usize, n_blocks: usize) -> Result<Self> {
        Ok(Self {
            fuse: Conv::new(store, &join(path, "fuse"), ConvSpec::pointwise(fused_inputs * c, c))?,
            blocks: (0..n_blocks)
                .map(|i| ConvNextV2Block::new(store, &join(path, &format!("blocks.{i}")), c))
                .collect::<Result<_>>()?,
            mid: Conv::new(store, &join(path, "mid"), ConvSpec::pointwise(c, c))?,
            out: Conv::zeroed(store, &join(path, "out"), ConvSpec::dense(c, 3, 3))?,
        })
    }

    /// `input + S` where `S` is computed from `x3` and, when present, the SR features.
    pub fn forward(&self, x3: &Tensor, sr_features: Option<&Tensor>, input: &Tensor) -> Result<Tensor> {
        let fused = match sr_features {
            Some(f) => self.fuse.forward(&Tensor::cat(&[x3, f], 1)?)?,
            None => self.fuse.forward(x3)?,
        };
        let mut y = fused;
        for b in &self.blocks {
            y = b.forward(&y)?;
        }
        let residual = self.out.forward(&self.mid.forward(&y)?)?;
        if residual.dims() != input.dims() {
            return Err(Error::ShapeMismatch {
                op: "srg_recon",
                expected: input.dims().to_vec(),
                actual: residual.dims().to_vec(),
            });
        }
        Ok((input + residual)?)
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub restored: ImageTensor,
    /// Absent for the cascaded variant.
    pub sr_image: Option<ImageTensor>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    embed: Conv,
    hrfr: Hrfr,
    down: ShuffleDown,
    ndpt: NdptStack,
    feasr: Option<FeaSr>,
    recon: SrgRecon,
}

/// Builds a model with deterministic initial parameters.
pub fn build_model(config: &ModelConfig, dtype: DType) -> Result<Model> {
    assemble(config, ParamStore::new(dtype, config.seed))
}

/// [`build_model`] without gradient tracking, for inference on large images.
pub fn build_inference_model(config: &ModelConfig, dtype: DType) -> Result<Model> {
    assemble(config, ParamStore::frozen(dtype, config.seed))
}

fn assemble(config: &ModelConfig, mut store: ParamStore) -> Result<Model> {
    config.validate()?;
    let c = config.channels;
    let s = config.shuffle;
    let v = config.variant;
    let embed = Conv::new(&mut store, "embed", ConvSpec::dense(3, c, 3))?;
    let hrfr = Hrfr::new(&mut store, "hrfr", c)?;
    let down = ShuffleDown::new(&mut store, "down_proj", c, s)?;
    let shape = BlockShape {
        channels: c,
        heads: config.heads,
        expansion: config.expansion,
        temperature_init: config.temperature_init,
    };
    let ndpt = NdptStack::new(
        &mut store,
        "ndpt",
        "mixer",
        config.blocks,
        shape,
        s,
        config.shared_mixer,
        v.block_flags(),
    )?;
    let feasr = if v.has_sr_branch() { Some(FeaSr::new(&mut store, "feasr", c, s)?) } else { None };
    let fused_inputs = if v.has_sr_branch() { 2 } else { 1 };
    let recon = SrgRecon::new(&mut store, "recon", c, fused_inputs, v.recon_blocks())?;
    Ok(Model { config: config.clone(), store, embed, hrfr, down, ndpt, feasr, recon })
}

/// [`build_model`] with `f32` parameters.
pub fn make_variant(config: &ModelConfig) -> Result<Model> {
    build_model(config, DType::F32)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// An untracked copy with the current parameter values.
    pub fn frozen(&self) -> Result<Model> {
        let copy = build_inference_model(&self.config, self.dtype())?;
        for (path, var) in self.store.iter() {
            copy.store.set(path, &var.as_tensor().copy()?)?;
        }
        Ok(copy)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    pub fn hrfr(&self) -> &Hrfr {
        &self.hrfr
    }

    pub fn shuffle_down(&self) -> &ShuffleDown {
        &self.down
    }

    pub fn ndpt(&self) -> &NdptStack {
        &self.ndpt
    }

    pub fn feasr(&self) -> Option<&FeaSr> {
        self.feasr.as_ref()
    }

    pub fn srg_recon(&self) -> &SrgRecon {
        &self.recon
    }

    pub fn forward(&self, image: &ImageTensor) -> Result<ModelOutput> {
        self.forward_traced(image, None)
    }

    /// Runs the network, reflect-padding the input up to a multiple of the
    /// shuffle factor and cropping both outputs back.
    pub fn forward_traced(&self, image: &ImageTensor, trace: Option<&mut Trace>) -> Result<ModelOutput> {
        let (_, ch, h, w) = image.dims4();
        if ch != 3 {
            return Err(Error::invalid("forward", format!("expected 3 input channels, got {ch}")));
        }
        let x = image.as_tensor().to_dtype(self.dtype())?;
        let s = self.config.shuffle;
        let (ph, pw) = (h.div_ceil(s) * s - h, w.div_ceil(s) * s - w);
        let x = reflect_pad(&x, 0, ph, 0, pw)?;

        let x0 = self.embed.forward(&x)?;
        let (x1, x2, x3) = self.hrfr.forward(&x0)?;
        let down = self.down.forward(&x0)?;
        let x_l = self.ndpt.forward_traced(&down, (&x1, &x2, &x3), trace)?;
        let (restored, sr_image) = match &self.feasr {
            Some(head) => {
                let (feats, sr) = head.forward(&x_l)?;
                (self.recon.forward(&x3, Some(&feats), &x)?, Some(sr))
            }
            None => (self.recon.forward(&x3, None, &x)?, None),
        };
        Ok(ModelOutput {
            restored: ImageTensor::new(crop(&restored, h, w)?)?,
            sr_image: sr_image.map(|t| crop(&t, h, w).and_then(ImageTensor::new)).transpose()?,
        })
    }

    /// The per-block guide maps for `image`, in block order.
    pub fn ndp_maps(&self, image: &ImageTensor) -> Result<Vec<PriorMap>> {
        let mut trace = Trace::default();
        self.forward_traced(image, Some(&mut trace))?;
        Ok(trace.priors)
    }
}
