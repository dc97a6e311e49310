//! Cross-modality block and the two-branch backbone.

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::params::{Ctx, Manifest};
use crate::transformer::{tokens_to_grid, AttentionParams, BlockParams, FfnParams, NormParams, PatchEmbedParams};

/// Two-step attention: the guide attends to itself, then the target
/// queries the refined guide. An FFN follows on the target stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrossBlockParams {
    pub guide_norm: NormParams,
    pub guide_attn: AttentionParams,
    pub target_norm: NormParams,
    pub kv_norm: NormParams,
    pub cross_attn: AttentionParams,
    pub ffn_norm: NormParams,
    pub ffn: FfnParams,
}

impl CrossBlockParams {
    pub fn register(m: &mut Manifest, name: &str, dim: usize, heads: usize, hidden: usize) -> Self {
        m.scope(name, |m| Self {
            guide_norm: NormParams::register(m, "guide_norm", dim),
            guide_attn: AttentionParams::register(m, "guide_attn", dim, heads),
            target_norm: NormParams::register(m, "target_norm", dim),
            kv_norm: NormParams::register(m, "kv_norm", dim),
            cross_attn: AttentionParams::register(m, "cross_attn", dim, heads),
            ffn_norm: NormParams::register(m, "ffn_norm", dim),
            ffn: FfnParams::register(m, dim, hidden),
        })
    }

    /// ```text
    /// guide' = guide + SelfAttn(LN(guide))
    /// out    = target + CrossAttn(q = LN(target), kv = LN(guide'))
    /// out    = out + FFN(LN(out))
    /// ```
    pub fn forward(&self, ctx: &mut Ctx, target: Var, guide: Var) -> Result<Var> {
        let (ts, gs) = (ctx.tape.shape(target).to_vec(), ctx.tape.shape(guide).to_vec());
        if ts != gs {
            return shape_err(format!("cross block target {ts:?} vs guide {gs:?}"));
        }
        let g = self.guide_norm.forward(ctx, guide)?;
        let g = self.guide_attn.self_attention(ctx, g)?.out;
        let guide = ctx.tape.add(guide, g)?;

        let q = self.target_norm.forward(ctx, target)?;
        let kv = self.kv_norm.forward(ctx, guide)?;
        let c = self.cross_attn.cross_attention(ctx, q, kv)?.out;
        let out = ctx.tape.add(target, c)?;

        let n = self.ffn_norm.forward(ctx, out)?;
        let f = self.ffn.forward(ctx, n)?;
        ctx.tape.add(out, f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub image_embed: PatchEmbedParams,
    pub click_embed: PatchEmbedParams,
    pub first_group: Vec<BlockParams>,
    pub cross: Vec<CrossBlockParams>,
    pub second_group: Vec<BlockParams>,
}

/// Intermediate token streams of one backbone pass.
#[derive(Clone, Debug)]
pub struct BackboneTrace {
    pub image_embedded: Var,
    pub click_embedded: Var,
    pub image_first: Var,
    pub click_first: Var,
    pub image_cross: Var,
    pub click_cross: Var,
    pub fused: Var,
    pub tokens: Var,
    pub grid: Var,
}

impl BackboneParams {
    pub fn register(m: &mut Manifest, cfg: &ModelConfig) -> Self {
        let (d, h, f) = (cfg.dim, cfg.heads, cfg.ffn_hidden);
        m.scope("backbone", |m| Self {
            image_embed: PatchEmbedParams::register(m, "image_embed", d, cfg.patch_size, cfg.num_patches()),
            click_embed: PatchEmbedParams::register(m, "click_embed", d, cfg.patch_size, cfg.num_patches()),
            first_group: (0..cfg.shared_depth)
                .map(|i| BlockParams::register(m, &format!("first.{i}"), d, h, f))
                .collect(),
            cross: (0..cfg.cross_depth)
                .map(|i| CrossBlockParams::register(m, &format!("cross.{i}"), d, h, f))
                .collect(),
            second_group: (0..cfg.second_depth)
                .map(|i| BlockParams::register(m, &format!("second.{i}"), d, h, f))
                .collect(),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, cfg: &ModelConfig, image: Var, interaction: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, cfg, image, interaction)?.grid)
    }

    pub fn forward_traced(&self, ctx: &mut Ctx, cfg: &ModelConfig, image: Var, interaction: Var) -> Result<BackboneTrace> {
        let (is, cs) = (ctx.tape.shape(image).to_vec(), ctx.tape.shape(interaction).to_vec());
        if is != cs {
            return shape_err(format!("image {is:?} and interaction {cs:?} differ"));
        }
        let image_embedded = self.image_embed.forward(ctx, image)?;
        let click_embedded = self.click_embed.forward(ctx, interaction)?;

        let mut img = image_embedded;
        let mut clk = click_embedded;
        for block in &self.first_group {
            img = block.forward(ctx, img)?;
            if cfg.variant.clicks_use_first_group() {
                clk = block.forward(ctx, clk)?;
            }
        }
        let (image_first, click_first) = (img, clk);

        for block in &self.cross {
            if cfg.variant.image_guides() {
                clk = block.forward(ctx, clk, img)?;
            } else {
                img = block.forward(ctx, img, clk)?;
            }
        }
        let (image_cross, click_cross) = (img, clk);

        let fused = ctx.tape.add(img, clk)?;
        let mut x = fused;
        for block in &self.second_group {
            x = block.forward(ctx, x)?;
        }
        let p = cfg.patch_size;
        let grid = tokens_to_grid(ctx, x, is[1] / p, is[2] / p)?;
        Ok(BackboneTrace {
            image_embedded,
            click_embedded,
            image_first,
            click_first,
            image_cross,
            click_cross,
            fused,
            tokens: x,
            grid,
        })
    }
}
