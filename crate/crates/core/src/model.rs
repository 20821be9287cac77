//! The full reconstruction model: embedder followed by backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneCache, BackboneDims};
use crate::datastore::AvailabilityMask;
use crate::embedder::{EmbedCache, Embedder, EmbedderDims};
use crate::error::{Error, Result};
use crate::nn::{smooth_l1, smooth_l1_grad};
use crate::tensor::{ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Prompt pathway removed: `Z1 = Z0`.
    NoScp,
    /// Plain convolutional backbone of about the same size.
    NoGsao,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoScp => "no_scp",
            Variant::NoGsao => "no_gsao",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s.trim() {
            "full" => Ok(Variant::Full),
            "no_scp" => Ok(Variant::NoScp),
            "no_gsao" => Ok(Variant::NoGsao),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected full, no_scp or no_gsao)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub codebook_size: usize,
    pub template_size: usize,
    pub mixer_hidden: usize,
    /// Feed the availability mask to the prompt mixer next to the state vector.
    pub mixer_uses_mask: bool,
    pub stages: usize,
    pub channel_mult: usize,
    pub branch_kernels: Vec<usize>,
    pub garo_kernel: usize,
    pub out_channels: usize,
    pub se_reduction: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 32,
            codebook_size: 8,
            template_size: 16,
            mixer_hidden: 64,
            mixer_uses_mask: true,
            stages: 3,
            channel_mult: 2,
            branch_kernels: vec![3, 5, 7],
            garo_kernel: 3,
            out_channels: 3,
            se_reduction: 4,
            variant: Variant::Full,
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub embedder: Embedder,
    pub backbone: Backbone,
}

pub struct ForwardCache<T> {
    embed: EmbedCache<T>,
    backbone: BackboneCache<T>,
}

impl Model {
    pub fn new(config: &ModelConfig, n_vars: usize) -> Result<Model> {
        if config.out_channels == 0 {
            return Err(Error::Config("model needs at least one output channel".into()));
        }
        let embedder = Embedder::new(EmbedderDims {
            n_vars,
            channels: config.base_channels,
            codebook_size: config.codebook_size,
            template_size: config.template_size,
            mixer_hidden: config.mixer_hidden,
            mixer_uses_mask: config.mixer_uses_mask,
            prompting: config.variant != Variant::NoScp,
        })?;
        let backbone = Backbone::new(BackboneDims {
            in_channels: config.base_channels,
            stages: config.stages,
            channel_mult: config.channel_mult,
            branch_kernels: config.branch_kernels.clone(),
            garo_kernel: config.garo_kernel,
            out_channels: config.out_channels,
            se_reduction: config.se_reduction,
            geometry_aware: config.variant != Variant::NoGsao,
        })?;
        Ok(Model {
            config: config.clone(),
            embedder,
            backbone,
        })
    }

    /// Checks that an `h x w` grid fits both the encoder and the prompt templates.
    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        self.backbone.check_grid(h, w)?;
        let t = self.config.template_size;
        if self.config.variant != Variant::NoScp && (h < t || w < t) {
            return Err(Error::Shape(format!("grid {h}x{w} is smaller than the {t}x{t} prompt templates")));
        }
        Ok(())
    }

    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        self.embedder.init(&mut ps, &mut rng);
        self.backbone.init(&mut ps, &mut rng);
        ps
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x_s: &Tensor<T>, mask: &AvailabilityMask) -> Result<Tensor<T>> {
        Ok(self.forward_cached(ps, x_s, mask)?.0)
    }

    pub fn forward_cached<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x_s: &Tensor<T>,
        mask: &AvailabilityMask,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (_, h, w) = x_s.dims3();
        self.check_grid(h, w)?;
        let (z1, embed) = self.embedder.forward(ps, x_s, mask)?;
        let (y, backbone) = self.backbone.forward(ps, &z1)?;
        Ok((y, ForwardCache { embed, backbone }))
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &ForwardCache<T>, dy: &Tensor<T>, grads: &mut ParamStore<T>) {
        let dz1 = self.backbone.backward(ps, &cache.backbone, dy, grads);
        self.embedder.backward(ps, &cache.embed, &dz1, grads);
    }

    /// Smooth-L1 loss of one sample and its gradient, accumulated into `grads`
    /// after scaling by `weight`.
    pub fn accumulate_loss_grad<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x_s: &Tensor<T>,
        mask: &AvailabilityMask,
        target: &Tensor<T>,
        beta: T,
        weight: T,
        grads: &mut ParamStore<T>,
    ) -> Result<T> {
        let (pred, cache) = self.forward_cached(ps, x_s, mask)?;
        let loss = smooth_l1(&pred, target, beta)?;
        let mut dy = smooth_l1_grad(&pred, target, beta);
        dy.scale(weight);
        self.backward(ps, &cache, &dy, grads);
        Ok(loss)
    }

    pub fn loss_and_grad<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x_s: &Tensor<T>,
        mask: &AvailabilityMask,
        target: &Tensor<T>,
        beta: T,
    ) -> Result<(T, ParamStore<T>)> {
        let mut grads = ps.zeros_like();
        let loss = self.accumulate_loss_grad(ps, x_s, mask, target, beta, T::one(), &mut grads)?;
        Ok((loss, grads))
    }
}
