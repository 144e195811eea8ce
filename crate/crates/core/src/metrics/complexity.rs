//! Analytic parameter and FLOP accounting.
//!
//! FLOPs are `2 x MAC` for convolutions and matrix products; every
//! elementwise stage (normalization, activation, gating, residual add,
//! prior) counts one FLOP per element it produces. Bias adds are folded
//! into their convolution.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::ndpt::{ffn_hidden, NdpMode};
use crate::nn::{ConvNextV2Block, ConvSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv,
    MatMul,
    Elementwise,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRow {
    pub name: String,
    pub kind: OpKind,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Ledger {
    pub rows: Vec<LedgerRow>,
}

impl Ledger {
    pub fn total_flops(&self) -> u64 {
        self.rows.iter().map(|r| r.flops).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn flops_of(&self, kind: OpKind) -> u64 {
        self.rows.iter().filter(|r| r.kind == kind).map(|r| r.flops).sum()
    }

    /// FLOPs grouped by the first dotted segment of each row name.
    pub fn by_stage(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for r in &self.rows {
            let stage = r.name.split('.').next().unwrap_or_default().to_string();
            *out.entry(stage).or_insert(0) += r.flops;
        }
        out
    }

    /// Aligned-column text, one row per op plus a total.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:<11}  {:>16}  {:>10}", "layer", "kind", "flops", "params");
        for r in &self.rows {
            let kind = format!("{:?}", r.kind).to_lowercase();
            let _ = writeln!(s, "{:<width$}  {:<11}  {:>16}  {:>10}", r.name, kind, r.flops, r.params);
        }
        let _ = writeln!(s, "{:<width$}  {:<11}  {:>16}  {:>10}", "total", "", self.total_flops(), self.total_params());
        s
    }

    fn conv(&mut self, name: impl Into<String>, spec: ConvSpec, out_pixels: u64) {
        let macs = spec.macs_per_output_pixel() as u64 * out_pixels;
        self.rows.push(LedgerRow {
            name: name.into(),
            kind: OpKind::Conv,
            flops: 2 * macs,
            params: spec.num_params() as u64,
        });
    }

    fn elementwise(&mut self, name: impl Into<String>, elements: u64, params: u64) {
        self.rows.push(LedgerRow { name: name.into(), kind: OpKind::Elementwise, flops: elements, params });
    }

    fn matmul(&mut self, name: impl Into<String>, flops: u64, params: u64) {
        self.rows.push(LedgerRow { name: name.into(), kind: OpKind::MatMul, flops, params });
    }

    fn convnext(&mut self, prefix: &str, c: usize, pixels: u64) {
        let hid = c * ConvNextV2Block::EXPANSION;
        let (c64, h64) = (c as u64, hid as u64);
        self.conv(format!("{prefix}.dwconv"), ConvSpec::depthwise(c, ConvNextV2Block::KERNEL), pixels);
        self.elementwise(format!("{prefix}.norm"), c64 * pixels, 2 * c64);
        self.conv(format!("{prefix}.pwconv1"), ConvSpec::pointwise(c, hid), pixels);
        self.elementwise(format!("{prefix}.gelu"), h64 * pixels, 0);
        self.elementwise(format!("{prefix}.grn"), h64 * pixels, 2 * h64);
        self.conv(format!("{prefix}.pwconv2"), ConvSpec::pointwise(hid, c), pixels);
        self.elementwise(format!("{prefix}.residual"), c64 * pixels, 0);
    }

    /// One transposed attention over `heads` heads of `d x tokens` matrices.
    fn attention(&mut self, prefix: &str, c: usize, heads: usize, tokens: u64) {
        let d = (c / heads) as u64;
        let h = heads as u64;
        self.elementwise(format!("{prefix}.l2norm"), 2 * c as u64 * tokens, 0);
        self.matmul(format!("{prefix}.qk"), 2 * h * d * d * tokens, 0);
        self.elementwise(format!("{prefix}.softmax"), h * d * d, 0);
        self.matmul(format!("{prefix}.av"), 2 * h * d * d * tokens, 0);
    }
}

/// Per-layer FLOP and parameter ledger for an `H x W` input.
pub fn count_flops(config: &ModelConfig, h: usize, w: usize) -> Result<Ledger> {
    config.validate()?;
    let s = config.shuffle;
    if h % s != 0 || w % s != 0 {
        return Err(Error::NotDivisible {
            op: "count_flops",
            axis: if h % s != 0 { "height" } else { "width" },
            size: if h % s != 0 { h } else { w },
            factor: s,
        });
    }
    let c = config.channels;
    let c64 = c as u64;
    let hw = (h * w) as u64;
    let lr = hw / (s * s) as u64;
    let hid = ffn_hidden(c, config.expansion);
    let hid64 = hid as u64;
    let variant = config.variant;
    let flags = variant.block_flags();
    let attn_guided = flags.ndp_in_attn && flags.mode == NdpMode::Inside;
    let ffn_guided = flags.ndp_in_ffn && flags.mode == NdpMode::Inside;

    let mut l = Ledger::default();
    l.conv("embed", ConvSpec::dense(3, c, 3), hw);
    for i in 0..3 {
        l.convnext(&format!("hrfr.{i}"), c, hw);
    }
    l.conv("down_proj", ConvSpec::pointwise(c * s * s, c), lr);

    // Mixers always exist; they only run when the blocks consume a guide.
    let mixer_pixels = if flags.needs_guide() { lr } else { 0 };
    if config.shared_mixer {
        l.conv("mixer.dw", ConvSpec::depthwise_strided(3 * c, s), mixer_pixels);
        l.conv("mixer.pw", ConvSpec::pointwise(3 * c, c), mixer_pixels);
    }
    for b in 0..config.blocks {
        let p = format!("ndpt.{b}");
        if !config.shared_mixer {
            l.conv(format!("mixer.{b}"), ConvSpec::strided(3 * c, c, s), mixer_pixels);
        }
        if flags.needs_guide() {
            l.elementwise(format!("{p}.ndp"), c64 * lr, 0);
        }
        if flags.mode == NdpMode::BeforeBlock {
            l.elementwise(format!("{p}.ndp_add"), c64 * lr, 0);
        }
        l.elementwise(format!("{p}.norm1"), c64 * lr, 2 * c64);
        l.conv(format!("{p}.attn.qkv"), ConvSpec::pointwise(c, 3 * c), lr);
        l.conv(format!("{p}.attn.qkv_dw"), ConvSpec::depthwise(3 * c, 3), lr);
        l.rows.push(LedgerRow {
            name: format!("{p}.attn.temperature"),
            kind: OpKind::Elementwise,
            flops: 0,
            params: config.heads as u64,
        });
        if attn_guided {
            l.conv(format!("{p}.attn.ndp_kv"), ConvSpec::pointwise(c, 2 * c), lr);
            l.conv(format!("{p}.attn.ndp_kv_dw"), ConvSpec::depthwise(2 * c, 3), lr);
            l.attention(&format!("{p}.attn.inner"), c, config.heads, lr);
        }
        l.attention(&format!("{p}.attn.outer"), c, config.heads, lr);
        l.conv(format!("{p}.attn.project_out"), ConvSpec::pointwise(c, c), lr);
        l.elementwise(format!("{p}.residual1"), c64 * lr, 0);

        l.elementwise(format!("{p}.norm2"), c64 * lr, 2 * c64);
        l.conv(format!("{p}.ffn.project_in"), ConvSpec::pointwise(c, 2 * hid), lr);
        l.conv(format!("{p}.ffn.dw"), ConvSpec::depthwise(2 * hid, 3), lr);
        if ffn_guided {
            l.conv(format!("{p}.ffn.fusion"), ConvSpec::pointwise(hid + c, hid), lr);
        }
        l.elementwise(format!("{p}.ffn.gelu"), hid64 * lr, 0);
        l.elementwise(format!("{p}.ffn.gate1"), hid64 * lr, 0);
        l.conv(format!("{p}.ffn.dw_mid"), ConvSpec::depthwise(hid, 3), lr);
        l.conv(format!("{p}.ffn.fusion_proj"), ConvSpec::pointwise(hid, hid), lr);
        l.elementwise(format!("{p}.ffn.gate2"), hid64 * lr, 0);
        l.conv(format!("{p}.ffn.project_out"), ConvSpec::pointwise(hid, c), lr);
        l.elementwise(format!("{p}.residual2"), c64 * lr, 0);
    }

    let fused_inputs = if variant.has_sr_branch() {
        l.conv("feasr.up", ConvSpec::pointwise(c, c * s * s), lr);
        l.conv("feasr.to_rgb", ConvSpec::dense(c, 3, 3), hw);
        2
    } else {
        1
    };
    l.conv("recon.fuse", ConvSpec::pointwise(fused_inputs * c, c), hw);
    for i in 0..variant.recon_blocks() {
        l.convnext(&format!("recon.blocks.{i}"), c, hw);
    }
    l.conv("recon.mid", ConvSpec::pointwise(c, c), hw);
    l.conv("recon.out", ConvSpec::dense(c, 3, 3), hw);
    l.elementwise("recon.residual", 3 * hw, 0);
    Ok(l)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub total: usize,
    /// Counts per top-level stage.
    pub breakdown: BTreeMap<String, usize>,
}

impl ParamReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.breakdown {
            let _ = writeln!(s, "{k:<12} {v:>10}");
        }
        let _ = writeln!(s, "{:<12} {:>10}", "total", self.total);
        s
    }
}

/// Element count of every learnable array, with a per-stage breakdown.
pub fn count_params(model: &Model) -> ParamReport {
    ParamReport { total: model.params().num_elements(), breakdown: model.params().breakdown(1) }
}
