//! The full segmentation network and the [`Segmenter`] interface.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::clicks::{encode_interaction, InteractionState};
use crate::config::ModelConfig;
use crate::cross::{BackboneParams, BackboneTrace};
use crate::error::{shape_err, Result};
use crate::head::{HeadParams, NeckParams};
use crate::params::{Ctx, Manifest, ParamStore};
use crate::tensor::Tensor;

/// Anything that maps an image and an interaction state to a `[1, h, w]`
/// foreground probability map.
pub trait Segmenter: Send + Sync {
    fn predict(&self, image: &Tensor, state: &InteractionState) -> Result<Tensor>;
}

impl<T: Segmenter + ?Sized> Segmenter for &T {
    fn predict(&self, image: &Tensor, state: &InteractionState) -> Result<Tensor> {
        (**self).predict(image, state)
    }
}

impl<T: Segmenter + ?Sized> Segmenter for std::sync::Arc<T> {
    fn predict(&self, image: &Tensor, state: &InteractionState) -> Result<Tensor> {
        (**self).predict(image, state)
    }
}

/// Network layout: parameter manifest plus typed handles into it.
#[derive(Clone, Debug)]
pub struct IcmFormer {
    cfg: ModelConfig,
    manifest: Manifest,
    pub backbone: BackboneParams,
    pub neck: NeckParams,
    pub head: HeadParams,
}

impl IcmFormer {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut manifest = Manifest::new();
        let backbone = BackboneParams::register(&mut manifest, &cfg);
        let neck = NeckParams::register(&mut manifest, &cfg);
        let head = HeadParams::register(&mut manifest, &cfg);
        Ok(Self {
            cfg,
            manifest,
            backbone,
            neck,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        self.manifest.materialize(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn check_inputs(&self, ctx: &Ctx, image: Var, interaction: Var) -> Result<()> {
        let side = self.cfg.image_side;
        for v in [image, interaction] {
            if ctx.tape.shape(v) != [3, side, side] {
                return shape_err(format!(
                    "model input {:?}, expected [3, {side}, {side}]",
                    ctx.tape.shape(v)
                ));
            }
        }
        Ok(())
    }

    /// Backbone, neck and head: `[1, h, w]` probabilities.
    pub fn forward(&self, ctx: &mut Ctx, image: Var, interaction: Var) -> Result<Var> {
        Ok(self.forward_traced(ctx, image, interaction)?.1)
    }

    pub fn forward_traced(&self, ctx: &mut Ctx, image: Var, interaction: Var) -> Result<(BackboneTrace, Var)> {
        self.check_inputs(ctx, image, interaction)?;
        let trace = self.backbone.forward_traced(ctx, &self.cfg, image, interaction)?;
        let pyramid = self.neck.forward(ctx, trace.grid)?;
        let prob = self.head.forward(ctx, &pyramid, self.cfg.patch_size / 4)?;
        Ok((trace, prob))
    }

    /// Builds the model input for `state` and runs a tracked or untracked pass.
    pub fn forward_state(&self, ctx: &mut Ctx, image: &Tensor, state: &InteractionState) -> Result<Var> {
        let side = self.cfg.image_side;
        let inter = encode_interaction(state, side, side, self.cfg.click_radius())?;
        let img = ctx.tape.constant(image.clone());
        let inter = ctx.tape.constant(inter);
        self.forward(ctx, img, inter)
    }
}

/// Exact number of trainable scalars for `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    Ok(IcmFormer::new(cfg.clone())?.manifest().total_scalars())
}

/// A network bound to concrete parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: IcmFormer,
    pub params: ParamStore,
}

impl Model {
    pub fn new(net: IcmFormer, params: ParamStore) -> Result<Self> {
        params.validate(net.manifest())?;
        Ok(Self { net, params })
    }

    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let net = IcmFormer::new(cfg)?;
        let params = net.init_params(seed);
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }
}

impl Segmenter for Model {
    fn predict(&self, image: &Tensor, state: &InteractionState) -> Result<Tensor> {
        let mut ctx = Ctx::new(&self.params, false);
        let prob = self.net.forward_state(&mut ctx, image, state)?;
        Ok(ctx.tape.value(prob).clone())
    }
}
