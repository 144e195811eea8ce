//! Discrimination-prompted transformer blocks on the low-resolution grid.
//!
//! Attention is channel-transposed: per head, queries, keys and values are
//! `(C/heads) x (h*w)` matrices, queries and keys are L2-normalized along the
//! token axis, and the attention map is `(C/heads) x (C/heads)`.
//!
//! The attention sub-layer (NDPA) first lets the queries attend to keys and
//! values projected from the prior, then uses that result as the query of an
//! ordinary self-attention over the block's own keys and values. The
//! feed-forward sub-layer (NDPN) fuses the prior into a double gate.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::ndp::{compute_ndp, multiscale_mix, Mixer, PriorMap};
use crate::nn::{gelu, Conv, ConvSpec, LayerNorm};
use crate::params::{join, Init, ParamStore};
use crate::tensor::{dims4, ensure_same_shape};

const L2_EPS: f64 = 1e-12;

/// What the blocks are fed in place of the prior for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NdpSource {
    /// `exp(-|mixed - y| / 2)`.
    Prior,
    /// The raw mixer output.
    DirectFeature,
}

/// Where the guidance enters the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NdpMode {
    /// As keys/values in NDPA and as a fusion input in NDPN.
    Inside,
    /// Added to the block input; NDPA/NDPN then run unguided.
    BeforeBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockFlags {
    pub ndp_in_attn: bool,
    pub ndp_in_ffn: bool,
    pub source: NdpSource,
    pub mode: NdpMode,
}

impl Default for BlockFlags {
    fn default() -> Self {
        Self {
            ndp_in_attn: true,
            ndp_in_ffn: true,
            source: NdpSource::Prior,
            mode: NdpMode::Inside,
        }
    }
}

impl BlockFlags {
    pub fn needs_guide(&self) -> bool {
        self.mode == NdpMode::BeforeBlock || self.ndp_in_attn || self.ndp_in_ffn
    }

    fn attn_guided(&self) -> bool {
        self.mode == NdpMode::Inside && self.ndp_in_attn
    }

    fn ffn_guided(&self) -> bool {
        self.mode == NdpMode::Inside && self.ndp_in_ffn
    }
}

/// Optional instrumentation collected during a forward pass.
#[derive(Debug, Default)]
pub struct Trace {
    /// One guide map per block, in block order.
    pub priors: Vec<PriorMap>,
    /// Every softmax-normalized attention map, `(N, heads, d, d)`.
    pub attention_maps: Vec<Tensor>,
}

fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.maximum(L2_EPS * L2_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// `softmax(norm(q) norm(k)^T / alpha) v` for `(N, heads, d, tokens)` stacks.
/// Returns the output and the attention map.
pub fn transposed_attention_with_map(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    temperature: &Tensor,
) -> Result<(Tensor, Tensor)> {
    ensure_same_shape("transposed_attention", q, k)?;
    ensure_same_shape("transposed_attention", q, v)?;
    let heads = match *q.dims() {
        [_, h, _, _] => h,
        ref d => {
            return Err(Error::invalid(
                "transposed_attention",
                format!("expected (N, heads, d, tokens), got {d:?}"),
            ))
        }
    };
    if temperature.elem_count() != heads {
        return Err(Error::invalid(
            "transposed_attention",
            format!("{} temperatures for {heads} heads", temperature.elem_count()),
        ));
    }
    let qn = l2_normalize_rows(q)?;
    let kn = l2_normalize_rows(k)?;
    let logits = qn
        .matmul(&kn.transpose(2, 3)?.contiguous()?)?
        .broadcast_div(&temperature.reshape((1, heads, 1, 1))?)?;
    let attn = softmax_last_dim(&logits)?;
    let out = attn.matmul(&v.contiguous()?)?;
    Ok((out, attn))
}

pub fn transposed_attention(q: &Tensor, k: &Tensor, v: &Tensor, temperature: &Tensor) -> Result<Tensor> {
    Ok(transposed_attention_with_map(q, k, v, temperature)?.0)
}

fn to_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, c, h, w) = dims4("to_heads", x)?;
    Ok(x.contiguous()?.reshape((n, heads, c / heads, h * w))?)
}

fn from_heads(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, heads, d, _) = x.dims4()?;
    Ok(x.reshape((n, heads * d, h, w))?)
}

/// Discrimination-prompted attention.
#[derive(Debug, Clone)]
pub struct Ndpa {
    qkv: Conv,
    qkv_dw: Conv,
    ndp_kv: Option<(Conv, Conv)>,
    temperature: Tensor,
    project_out: Conv,
    heads: usize,
    channels: usize,
}

impl Ndpa {
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        channels: usize,
        heads: usize,
        guided: bool,
        temperature_init: f64,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::invalid("Ndpa", format!("{heads} heads do not divide {channels} channels")));
        }
        let ndp_kv = if guided {
            Some((
                Conv::new(store, &join(path, "ndp_kv"), ConvSpec::pointwise(channels, 2 * channels))?,
                Conv::new(store, &join(path, "ndp_kv_dw"), ConvSpec::depthwise(2 * channels, 3))?,
            ))
        } else {
            None
        };
        Ok(Self {
            qkv: Conv::new(store, &join(path, "qkv"), ConvSpec::pointwise(channels, 3 * channels))?,
            qkv_dw: Conv::new(store, &join(path, "qkv_dw"), ConvSpec::depthwise(3 * channels, 3))?,
            ndp_kv,
            temperature: store.create(&join(path, "temperature"), &[heads], Init::Const(temperature_init))?,
            project_out: Conv::zeroed(store, &join(path, "project_out"), ConvSpec::pointwise(channels, channels))?,
            heads,
            channels,
        })
    }

    pub fn is_guided(&self) -> bool {
        self.ndp_kv.is_some()
    }

    pub fn forward(&self, x: &Tensor, guide: Option<&Tensor>) -> Result<Tensor> {
        self.forward_traced(x, guide, None)
    }

    pub fn forward_traced(&self, x: &Tensor, guide: Option<&Tensor>, mut trace: Option<&mut Trace>) -> Result<Tensor> {
        let (_, c, h, w) = dims4("ndpa", x)?;
        if c != self.channels {
            return Err(Error::invalid("ndpa", format!("expected {} channels, got {c}", self.channels)));
        }
        let qkv = self.qkv_dw.forward(&self.qkv.forward(x)?)?;
        let q = to_heads(&qkv.narrow(1, 0, c)?, self.heads)?;
        let k = to_heads(&qkv.narrow(1, c, c)?, self.heads)?;
        let v = to_heads(&qkv.narrow(1, 2 * c, c)?, self.heads)?;

        let query = match (&self.ndp_kv, guide) {
            (Some((pw, dw)), Some(y)) => {
                ensure_same_shape("ndpa", x, y)?;
                let kv = dw.forward(&pw.forward(y)?)?;
                let k_ndp = to_heads(&kv.narrow(1, 0, c)?, self.heads)?;
                let v_ndp = to_heads(&kv.narrow(1, c, c)?, self.heads)?;
                let (inner, map) = transposed_attention_with_map(&q, &k_ndp, &v_ndp, &self.temperature)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.attention_maps.push(map);
                }
                inner
            }
            (None, None) => q,
            (Some(_), None) => return Err(Error::invalid("ndpa", "guided attention needs a prior")),
            (None, Some(_)) => return Err(Error::invalid("ndpa", "unguided attention was given a prior")),
        };
        let (out, map) = transposed_attention_with_map(&query, &k, &v, &self.temperature)?;
        if let Some(t) = trace {
            t.attention_maps.push(map);
        }
        self.project_out.forward(&from_heads(&out, h, w)?)
    }
}

/// Hidden width of the feed-forward network, `round(beta * C)`.
pub fn ffn_hidden(channels: usize, expansion: f64) -> usize {
    (expansion * channels as f64).round() as usize
}

/// Discrimination-prompted feed-forward network.
#[derive(Debug, Clone)]
pub struct Ndpn {
    project_in: Conv,
    dw: Conv,
    fusion: Option<Conv>,
    dw_mid: Conv,
    fusion_proj: Conv,
    project_out: Conv,
    hidden: usize,
}

impl Ndpn {
    pub fn new(store: &mut ParamStore, path: &str, channels: usize, expansion: f64, guided: bool) -> Result<Self> {
        let hidden = ffn_hidden(channels, expansion);
        if hidden == 0 {
            return Err(Error::invalid("Ndpn", format!("expansion {expansion} gives an empty hidden layer")));
        }
        let fusion = if guided {
            Some(Conv::new(store, &join(path, "fusion"), ConvSpec::pointwise(hidden + channels, hidden))?)
        } else {
            None
        };
        Ok(Self {
            project_in: Conv::new(store, &join(path, "project_in"), ConvSpec::pointwise(channels, 2 * hidden))?,
            dw: Conv::new(store, &join(path, "dw"), ConvSpec::depthwise(2 * hidden, 3))?,
            fusion,
            dw_mid: Conv::new(store, &join(path, "dw_mid"), ConvSpec::depthwise(hidden, 3))?,
            fusion_proj: Conv::new(store, &join(path, "fusion_proj"), ConvSpec::pointwise(hidden, hidden))?,
            project_out: Conv::zeroed(store, &join(path, "project_out"), ConvSpec::pointwise(hidden, channels))?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn is_guided(&self) -> bool {
        self.fusion.is_some()
    }

    /// `Z1, Z2 = split(dw(pw(x)))`, `F = pw([Z1, y])`, `G = F * gelu(Z2)`,
    /// `out = pw(dw(G) * pw(F))`. Unguided, `F = Z1`.
    pub fn forward(&self, x: &Tensor, guide: Option<&Tensor>) -> Result<Tensor> {
        let z = self.dw.forward(&self.project_in.forward(x)?)?;
        let z1 = z.narrow(1, 0, self.hidden)?;
        let z2 = z.narrow(1, self.hidden, self.hidden)?;
        let fused = match (&self.fusion, guide) {
            (Some(f), Some(y)) => {
                ensure_same_shape("ndpn", x, y)?;
                f.forward(&Tensor::cat(&[&z1, y], 1)?)?
            }
            (None, None) => z1.contiguous()?,
            (Some(_), None) => return Err(Error::invalid("ndpn", "guided network needs a prior")),
            (None, Some(_)) => return Err(Error::invalid("ndpn", "unguided network was given a prior")),
        };
        let gate = (&fused * gelu(&z2)?)?;
        let mixed = (self.dw_mid.forward(&gate)? * self.fusion_proj.forward(&fused)?)?;
        self.project_out.forward(&mixed)
    }
}

/// One discrimination-prompted transformer block:
/// `X' = NDPA(LN(X), Y) + X`, `X_next = NDPN(LN(X'), Y) + X'`.
#[derive(Debug, Clone)]
pub struct NdptBlock {
    norm1: LayerNorm,
    attn: Ndpa,
    norm2: LayerNorm,
    ffn: Ndpn,
    flags: BlockFlags,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockShape {
    pub channels: usize,
    pub heads: usize,
    pub expansion: f64,
    pub temperature_init: f64,
}

impl NdptBlock {
    pub fn new(store: &mut ParamStore, path: &str, shape: BlockShape, flags: BlockFlags) -> Result<Self> {
        let c = shape.channels;
        Ok(Self {
            norm1: LayerNorm::new(store, &join(path, "norm1"), c)?,
            attn: Ndpa::new(store, &join(path, "attn"), c, shape.heads, flags.attn_guided(), shape.temperature_init)?,
            norm2: LayerNorm::new(store, &join(path, "norm2"), c)?,
            ffn: Ndpn::new(store, &join(path, "ffn"), c, shape.expansion, flags.ffn_guided())?,
            flags,
        })
    }

    pub fn flags(&self) -> BlockFlags {
        self.flags
    }

    /// Runs the block given the mixed high-resolution feature for it.
    /// `mixed` is ignored when the flags use no guidance.
    pub fn forward_traced(&self, x: &Tensor, mixed: Option<&Tensor>, mut trace: Option<&mut Trace>) -> Result<Tensor> {
        let guide = if self.flags.needs_guide() {
            let mixed = mixed.ok_or_else(|| Error::invalid("ndpt_block", "block needs the mixed feature"))?;
            let g = match self.flags.source {
                NdpSource::Prior => compute_ndp(mixed, x)?.into_tensor(),
                NdpSource::DirectFeature => mixed.clone(),
            };
            if let Some(t) = trace.as_deref_mut() {
                t.priors.push(PriorMap::from_tensor(g.clone()));
            }
            Some(g)
        } else {
            None
        };
        let x = match (&guide, self.flags.mode) {
            (Some(g), NdpMode::BeforeBlock) => (x + g)?,
            _ => x.clone(),
        };
        let attn_guide = guide.as_ref().filter(|_| self.flags.attn_guided());
        let ffn_guide = guide.as_ref().filter(|_| self.flags.ffn_guided());

        let x = (self.attn.forward_traced(&self.norm1.forward(&x)?, attn_guide, trace)? + &x)?;
        let x = (self.ffn.forward(&self.norm2.forward(&x)?, ffn_guide)? + &x)?;
        Ok(x)
    }

    pub fn forward(&self, x: &Tensor, mixed: Option<&Tensor>) -> Result<Tensor> {
        self.forward_traced(x, mixed, None)
    }
}

/// Convenience for a single block fed directly from the high-resolution features.
pub fn ndptb_forward(
    block: &NdptBlock,
    x: &Tensor,
    hr_feats: (&Tensor, &Tensor, &Tensor),
    mixer: &Mixer,
) -> Result<Tensor> {
    let mixed = if block.flags().needs_guide() {
        Some(multiscale_mix(hr_feats.0, hr_feats.1, hr_feats.2, mixer)?)
    } else {
        None
    };
    block.forward(x, mixed.as_ref())
}

/// `L` blocks applied in sequence, each recomputing its guide from its own input.
#[derive(Debug, Clone)]
pub struct NdptStack {
    blocks: Vec<NdptBlock>,
    /// One shared mixer, or one per block.
    mixers: Vec<Mixer>,
}

impl NdptStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        mixer_path: &str,
        num_blocks: usize,
        shape: BlockShape,
        factor: usize,
        shared_mixer: bool,
        flags: BlockFlags,
    ) -> Result<Self> {
        let c = shape.channels;
        let mixers = if shared_mixer {
            vec![Mixer::factorized(store, mixer_path, c, factor)?]
        } else {
            (0..num_blocks)
                .map(|i| Mixer::strided(store, &join(mixer_path, &i.to_string()), c, factor))
                .collect::<Result<_>>()?
        };
        let blocks = (0..num_blocks)
            .map(|i| NdptBlock::new(store, &join(path, &i.to_string()), shape, flags))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, mixers })
    }

    pub fn blocks(&self) -> &[NdptBlock] {
        &self.blocks
    }

    pub fn mixers(&self) -> &[Mixer] {
        &self.mixers
    }

    pub fn forward_traced(
        &self,
        x_down: &Tensor,
        hr_feats: (&Tensor, &Tensor, &Tensor),
        mut trace: Option<&mut Trace>,
    ) -> Result<Tensor> {
        let needs_guide = self.blocks.first().is_some_and(|b| b.flags().needs_guide());
        // With one shared mixer the mixed feature is the same for every block.
        let shared = if needs_guide && self.mixers.len() == 1 {
            Some(multiscale_mix(hr_feats.0, hr_feats.1, hr_feats.2, &self.mixers[0])?)
        } else {
            None
        };
        let mut x = x_down.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let mixed = match (&shared, needs_guide) {
                (Some(m), _) => Some(m.clone()),
                (None, true) => Some(multiscale_mix(hr_feats.0, hr_feats.1, hr_feats.2, &self.mixers[i])?),
                (None, false) => None,
            };
            x = block.forward_traced(&x, mixed.as_ref(), trace.as_deref_mut())?;
        }
        Ok(x)
    }

    pub fn forward(&self, x_down: &Tensor, hr_feats: (&Tensor, &Tensor, &Tensor)) -> Result<Tensor> {
        self.forward_traced(x_down, hr_feats, None)
    }
}
