//! Pyramid neck over the single-stride backbone grid and the MLP decode head.

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::params::{Ctx, Init, Manifest, ParamId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeckLayerKind {
    /// 2x2 transposed conv, stride 2.
    Up,
    /// 2x2 conv, stride 2.
    Down,
    /// 1x1 conv.
    Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub kind: NeckLayerKind,
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvParams {
    pub fn register(m: &mut Manifest, name: &str, kind: NeckLayerKind, c_in: usize, c_out: usize) -> Self {
        let shape: Vec<usize> = match kind {
            NeckLayerKind::Up => vec![c_in, c_out, 2, 2],
            NeckLayerKind::Down => vec![c_out, c_in, 2, 2],
            NeckLayerKind::Point => vec![c_out, c_in],
        };
        m.scope(name, |m| Self {
            kind,
            w: m.add("weight", &shape, Init::TruncNormal),
            b: m.add("bias", &[c_out], Init::Zeros),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        match self.kind {
            NeckLayerKind::Up => ctx.tape.conv_transpose2d(x, w, Some(b), 2),
            NeckLayerKind::Down => ctx.tape.conv2d(x, w, Some(b), 2, 0),
            NeckLayerKind::Point => pointwise(ctx, x, w, b),
        }
    }
}

/// Per-pixel linear map `w[c_out, c_in]` over a `[c_in, h, w]` map.
pub fn pointwise(ctx: &mut Ctx, x: Var, w: Var, b: Var) -> Result<Var> {
    let s = ctx.tape.shape(x).to_vec();
    if s.len() != 3 {
        return shape_err(format!("pointwise layer expects [c, h, w], got {s:?}"));
    }
    let t = &mut ctx.tape;
    let flat = t.reshape(x, &[s[0], s[1] * s[2]])?;
    let y = t.matmul(w, flat)?;
    let y = t.add_channel(y, b)?;
    let c_out = t.shape(y)[0];
    t.reshape(y, &[c_out, s[1], s[2]])
}

/// Four levels at 4x, 2x, 1x and 0.5x the grid resolution, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct NeckParams {
    pub levels: [Vec<ConvParams>; 4],
}

impl NeckParams {
    pub fn register(m: &mut Manifest, cfg: &ModelConfig) -> Self {
        use NeckLayerKind::*;
        let d = cfg.dim;
        let c = cfg.neck_channels();
        let ladders: [Vec<(NeckLayerKind, usize, usize)>; 4] = [
            vec![(Up, d, d / 2), (Up, d / 2, d / 4), (Point, d / 4, c[0])],
            vec![(Up, d, d / 2), (Point, d / 2, c[1])],
            vec![(Point, d, c[2])],
            vec![(Down, d, 2 * d), (Point, 2 * d, c[3])],
        ];
        m.scope("neck", |m| {
            let mut i = 0;
            let levels = ladders.map(|ladder| {
                let level = m.scope(format!("level{i}"), |m| {
                    ladder
                        .iter()
                        .enumerate()
                        .map(|(j, &(kind, ci, co))| ConvParams::register(m, &j.to_string(), kind, ci, co))
                        .collect()
                });
                i += 1;
                level
            });
            Self { levels }
        })
    }

    /// GELU between consecutive layers of a level, none after the last.
    pub fn forward(&self, ctx: &mut Ctx, grid: Var) -> Result<[Var; 4]> {
        let s = ctx.tape.shape(grid).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return shape_err(format!("pyramid needs an even-sided [c, h, w] grid, got {s:?}"));
        }
        let mut out = [grid; 4];
        for (slot, level) in out.iter_mut().zip(&self.levels) {
            let mut x = grid;
            for (j, layer) in level.iter().enumerate() {
                if j > 0 {
                    x = ctx.tape.gelu(x);
                }
                x = layer.forward(ctx, x)?;
            }
            *slot = x;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub unify: [ConvParams; 4],
    pub fuse: ConvParams,
    pub predict: ConvParams,
}

impl HeadParams {
    pub fn register(m: &mut Manifest, cfg: &ModelConfig) -> Self {
        let c = cfg.neck_channels();
        let hc = cfg.head_channels();
        m.scope("head", |m| {
            let mut i = 0;
            let unify = c.map(|ci| {
                let p = ConvParams::register(m, &format!("unify{i}"), NeckLayerKind::Point, ci, hc);
                i += 1;
                p
            });
            Self {
                unify,
                fuse: ConvParams::register(m, "fuse", NeckLayerKind::Point, 4 * hc, hc),
                predict: ConvParams::register(m, "predict", NeckLayerKind::Point, hc, 1),
            }
        })
    }

    /// Unify channels, upsample every level to the finest one, concatenate
    /// and fuse, predict one channel, sigmoid, then upsample by `out_factor`.
    pub fn forward(&self, ctx: &mut Ctx, pyramid: &[Var; 4], out_factor: usize) -> Result<Var> {
        let fine = ctx.tape.shape(pyramid[0])[1];
        let mut parts = Vec::with_capacity(4);
        for (level, unify) in pyramid.iter().zip(&self.unify) {
            let u = unify.forward(ctx, *level)?;
            let side = ctx.tape.shape(u)[1];
            if side == 0 || fine % side != 0 {
                return shape_err(format!("pyramid level side {side} does not divide {fine}"));
            }
            parts.push(ctx.tape.upsample_bilinear(u, fine / side)?);
        }
        let cat = ctx.tape.concat0(&parts)?;
        let fused = self.fuse.forward(ctx, cat)?;
        let fused = ctx.tape.relu(fused);
        let logit = self.predict.forward(ctx, fused)?;
        let prob = ctx.tape.sigmoid(logit);
        ctx.tape.upsample_bilinear(prob, out_factor)
    }
}
