//! Patch embedding, multi-head attention and the pre-norm transformer block.
//!
//! Token sequences are `[n_tokens, dim]` tensors. Linear weights are stored
//! input-major (`[in, out]`) so a projection is `x · w + b`.

use crate::autodiff::Var;
use crate::config::{INPUT_CHANNELS, LN_EPS};
use crate::error::{shape_err, Result};
use crate::params::{Ctx, Init, Manifest, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn register(m: &mut Manifest, name: &str, d_in: usize, d_out: usize) -> Self {
        m.scope(name, |m| Self {
            w: m.add("weight", &[d_in, d_out], Init::TruncNormal),
            b: m.add("bias", &[d_out], Init::Zeros),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        ctx.tape.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn register(m: &mut Manifest, name: &str, dim: usize) -> Self {
        m.scope(name, |m| Self {
            gamma: m.add("weight", &[dim], Init::Ones),
            beta: m.add("bias", &[dim], Init::Zeros),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Fused `dim -> 3·dim` query/key/value projection plus output projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub qkv: LinearParams,
    pub out: LinearParams,
    pub dim: usize,
    pub heads: usize,
}

/// Attention output together with the `[heads, n_q, n_kv]` weight matrix.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOut {
    pub out: Var,
    pub weights: Var,
}

impl AttentionParams {
    pub fn register(m: &mut Manifest, name: &str, dim: usize, heads: usize) -> Self {
        m.scope(name, |m| Self {
            qkv: LinearParams::register(m, "qkv", dim, 3 * dim),
            out: LinearParams::register(m, "proj", dim, dim),
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Self-attention: queries, keys and values all from `x`.
    pub fn self_attention(&self, ctx: &mut Ctx, x: Var) -> Result<AttentionOut> {
        let d = self.dim;
        let qkv = self.qkv.forward(ctx, x)?;
        let q = ctx.tape.narrow(qkv, 1, 0, d)?;
        let k = ctx.tape.narrow(qkv, 1, d, d)?;
        let v = ctx.tape.narrow(qkv, 1, 2 * d, d)?;
        self.attend(ctx, q, k, v)
    }

    /// Cross-attention: queries from `target`, keys and values from `guide`.
    pub fn cross_attention(&self, ctx: &mut Ctx, target: Var, guide: Var) -> Result<AttentionOut> {
        let d = self.dim;
        let (w, b) = (ctx.p(self.qkv.w), ctx.p(self.qkv.b));
        let wq = ctx.tape.narrow(w, 1, 0, d)?;
        let bq = ctx.tape.narrow(b, 0, 0, d)?;
        let wkv = ctx.tape.narrow(w, 1, d, 2 * d)?;
        let bkv = ctx.tape.narrow(b, 0, d, 2 * d)?;
        let q = ctx.tape.linear(target, wq, bq)?;
        let kv = ctx.tape.linear(guide, wkv, bkv)?;
        let k = ctx.tape.narrow(kv, 1, 0, d)?;
        let v = ctx.tape.narrow(kv, 1, d, d)?;
        self.attend(ctx, q, k, v)
    }

    /// Per head `softmax(q kᵀ / sqrt(head_dim)) v`, heads concatenated, then projected.
    fn attend(&self, ctx: &mut Ctx, q: Var, k: Var, v: Var) -> Result<AttentionOut> {
        let (h, hd) = (self.heads, self.head_dim());
        let nq = ctx.tape.shape(q)[0];
        let nk = ctx.tape.shape(k)[0];
        let t = &mut ctx.tape;
        let q = t.reshape(q, &[nq, h, hd])?;
        let q = t.permute(q, &[1, 0, 2])?;
        let kt = t.reshape(k, &[nk, h, hd])?;
        let kt = t.permute(kt, &[1, 2, 0])?;
        let v = t.reshape(v, &[nk, h, hd])?;
        let v = t.permute(v, &[1, 0, 2])?;
        let scores = t.matmul(q, kt)?;
        let scores = t.scale(scores, 1.0 / (hd as f64).sqrt());
        let weights = t.softmax(scores, 2)?;
        let mixed = t.matmul(weights, v)?;
        let mixed = t.permute(mixed, &[1, 0, 2])?;
        let mixed = t.reshape(mixed, &[nq, h * hd])?;
        let mixed = ctx.dropout(mixed);
        let out = self.out.forward(ctx, mixed)?;
        Ok(AttentionOut { out, weights })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FfnParams {
    pub fc_in: LinearParams,
    pub fc_out: LinearParams,
}

impl FfnParams {
    pub fn register(m: &mut Manifest, dim: usize, hidden: usize) -> Self {
        Self {
            fc_in: LinearParams::register(m, "ffn_in", dim, hidden),
            fc_out: LinearParams::register(m, "ffn_out", hidden, dim),
        }
    }

    /// `fc_out(dropout(relu(fc_in(x))))`
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc_in.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        let h = ctx.dropout(h);
        self.fc_out.forward(ctx, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub norm1: NormParams,
    pub attn: AttentionParams,
    pub norm2: NormParams,
    pub ffn: FfnParams,
}

impl BlockParams {
    pub fn register(m: &mut Manifest, name: &str, dim: usize, heads: usize, hidden: usize) -> Self {
        m.scope(name, |m| Self {
            norm1: NormParams::register(m, "norm1", dim),
            attn: AttentionParams::register(m, "attn", dim, heads),
            norm2: NormParams::register(m, "norm2", dim),
            ffn: FfnParams::register(m, dim, hidden),
        })
    }

    /// `x + attn(ln(x))`, then `+ ffn(ln(.))`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let n = self.norm1.forward(ctx, x)?;
        let a = self.attn.self_attention(ctx, n)?.out;
        let x = ctx.tape.add(x, a)?;
        let n = self.norm2.forward(ctx, x)?;
        let f = self.ffn.forward(ctx, n)?;
        ctx.tape.add(x, f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchEmbedParams {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub pos: ParamId,
    pub patch: usize,
}

impl PatchEmbedParams {
    pub fn register(m: &mut Manifest, name: &str, dim: usize, patch: usize, num_patches: usize) -> Self {
        m.scope(name, |m| Self {
            proj_w: m.add("proj.weight", &[dim, INPUT_CHANNELS, patch, patch], Init::TruncNormal),
            proj_b: m.add("proj.bias", &[dim], Init::Zeros),
            pos: m.add("pos_embed", &[num_patches, dim], Init::Zeros),
            patch,
        })
    }

    /// `[3, h, w]` image to `[(h/p)·(w/p), dim]` tokens with positions added.
    pub fn forward(&self, ctx: &mut Ctx, image: Var) -> Result<Var> {
        let s = ctx.tape.shape(image).to_vec();
        if s.len() != 3 || s[1] % self.patch != 0 || s[2] % self.patch != 0 {
            return shape_err(format!("image {s:?} not divisible into {p}x{p} patches", p = self.patch));
        }
        let (w, b, pos) = (ctx.p(self.proj_w), ctx.p(self.proj_b), ctx.p(self.pos));
        let t = &mut ctx.tape;
        let grid = t.conv2d(image, w, Some(b), self.patch, 0)?;
        let (dim, gh, gw) = {
            let g = t.shape(grid);
            (g[0], g[1], g[2])
        };
        if t.shape(pos) != [gh * gw, dim] {
            return shape_err(format!(
                "positional table {:?} for {} tokens of width {dim}",
                t.shape(pos),
                gh * gw
            ));
        }
        let flat = t.reshape(grid, &[dim, gh * gw])?;
        let tokens = t.transpose2d(flat)?;
        t.add(tokens, pos)
    }
}

/// `[n, dim]` tokens to a `[dim, h, w]` grid, row-major over patches.
pub fn tokens_to_grid(ctx: &mut Ctx, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    if s.len() != 2 || s[0] != h * w {
        return shape_err(format!("{s:?} tokens do not fill a {h}x{w} grid"));
    }
    let t = ctx.tape.transpose2d(x)?;
    ctx.tape.reshape(t, &[s[1], h, w])
}

/// `[dim, h, w]` grid to `[h·w, dim]` tokens.
pub fn grid_to_tokens(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    if s.len() != 3 {
        return shape_err(format!("expected a [c, h, w] grid, got {s:?}"));
    }
    let f = ctx.tape.reshape(x, &[s[0], s[1] * s[2]])?;
    ctx.tape.transpose2d(f)
}
