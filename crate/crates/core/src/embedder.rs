//! Adaptive observation embedder: the availability-aware adapter that maps any
//! variable subset to a fixed channel count, and the state-conditioned prompt
//! that is fused back into those features.

use rand::Rng;

use crate::datastore::AvailabilityMask;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, silu_vec, silu_vec_backward, softmax, softmax_backward,
    uniform_tensor, upsample_bilinear, upsample_bilinear_backward, Conv2d, ConvCache, Linear, ResBlock,
    ResBlockCache,
};
use crate::tensor::{ParamStore, Real, Tensor};

pub const UOA_WEIGHT: &str = "embedder.uoa.W";

/// `Z0[c] = Σ_{i∈S} W[i,c] · X_S[row(i)]`.
///
/// `x_s` holds one row per present variable, in universe order. `w` is the
/// `[N, C_b]` adapter matrix.
pub fn uoa_project<T: Real>(x_s: &Tensor<T>, mask: &AvailabilityMask, w: &Tensor<T>) -> Result<Tensor<T>> {
    let present = mask.present();
    if present.is_empty() {
        return Err(Error::Config("availability mask selects no variables".into()));
    }
    if w.shape().len() != 2 || w.shape()[0] != mask.bits().len() {
        return Err(Error::Shape(format!(
            "adapter matrix {:?} does not match a {}-variable universe",
            w.shape(),
            mask.bits().len()
        )));
    }
    if x_s.shape().len() != 3 || x_s.shape()[0] != present.len() {
        return Err(Error::Shape(format!(
            "mask selects {} variables but input has shape {:?}",
            present.len(),
            x_s.shape()
        )));
    }
    let (s, h, wd) = x_s.dims3();
    let cb = w.shape()[1];
    let n = h * wd;
    let rows: Vec<T> = present.iter().flat_map(|&i| w.data()[i * cb..(i + 1) * cb].iter().copied()).collect();
    let mut out = vec![T::zero(); cb * n];
    T::gemm(
        cb,
        s,
        n,
        T::one(),
        &rows,
        (1, cb as isize),
        x_s.data(),
        (n as isize, 1),
        T::zero(),
        &mut out,
        (n as isize, 1),
    );
    Tensor::from_vec(&[cb, h, wd], out)
}

/// Accumulates `d W` for [`uoa_project`]; rows of absent variables are untouched.
pub fn uoa_project_backward<T: Real>(x_s: &Tensor<T>, mask: &AvailabilityMask, dz: &Tensor<T>, dw: &mut Tensor<T>) {
    let (s, h, wd) = x_s.dims3();
    let n = h * wd;
    let cb = dz.shape()[0];
    let mut g = vec![T::zero(); s * cb];
    T::gemm(
        s,
        n,
        cb,
        T::one(),
        x_s.data(),
        (n as isize, 1),
        dz.data(),
        (1, n as isize),
        T::zero(),
        &mut g,
        (cb as isize, 1),
    );
    for (row, &i) in g.chunks(cb).zip(&mask.present()) {
        for (d, &v) in dw.data_mut()[i * cb..(i + 1) * cb].iter_mut().zip(row) {
            *d += v;
        }
    }
}

/// Ocean state vector: per-channel spatial mean of `Z0`.
pub fn scp_state<T: Real>(z0: &Tensor<T>) -> Vec<T> {
    global_avg_pool(z0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderDims {
    pub n_vars: usize,
    pub channels: usize,
    pub codebook_size: usize,
    pub template_size: usize,
    pub mixer_hidden: usize,
    pub mixer_uses_mask: bool,
    /// `false` drops the prompt pathway entirely (`Z1 = Z0`).
    pub prompting: bool,
}

#[derive(Clone, Debug)]
pub struct Embedder {
    pub dims: EmbedderDims,
    templates: Vec<String>,
    fc1: Linear,
    fc2: Linear,
    refine: Conv2d,
    q: ResBlock,
    proj: Conv2d,
}

pub struct MixCache<T> {
    input: Vec<T>,
    hidden: Vec<T>,
    alpha: Vec<T>,
}

pub struct PromptCache<T> {
    alpha: Vec<T>,
    refine: ConvCache<T>,
}

pub struct InteractCache<T> {
    q: ResBlockCache<T>,
    proj: ConvCache<T>,
}

pub struct EmbedCache<T> {
    x_s: Tensor<T>,
    mask: AvailabilityMask,
    hw: (usize, usize),
    scp: Option<(MixCache<T>, PromptCache<T>, InteractCache<T>)>,
}

impl Embedder {
    pub fn new(dims: EmbedderDims) -> Result<Embedder> {
        if dims.codebook_size < 2 {
            return Err(Error::Config("prompt codebook needs at least 2 templates".into()));
        }
        if dims.channels == 0 || dims.template_size == 0 || dims.mixer_hidden == 0 || dims.n_vars == 0 {
            return Err(Error::Config("embedder dimensions must be positive".into()));
        }
        let c = dims.channels;
        let mixer_in = c + if dims.mixer_uses_mask { dims.n_vars } else { 0 };
        Ok(Embedder {
            templates: (0..dims.codebook_size).map(|k| format!("embedder.scp.templates.{k}")).collect(),
            fc1: Linear::new("embedder.scp.mixer.fc1", mixer_in, dims.mixer_hidden),
            fc2: Linear::new("embedder.scp.mixer.fc2", dims.mixer_hidden, dims.codebook_size),
            refine: Conv2d::new("embedder.scp.refine", c, c, 3, 1),
            q: ResBlock::new("embedder.interact.q", 2 * c, c),
            proj: Conv2d::new("embedder.interact.proj", 2 * c, c, 3, 1),
            dims,
        })
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        let c = self.dims.channels;
        ps.register(UOA_WEIGHT, uniform_tensor(&[self.dims.n_vars, c], 1.0, rng));
        if !self.dims.prompting {
            return;
        }
        let t = self.dims.template_size;
        for name in &self.templates {
            ps.register(name, uniform_tensor(&[c, t, t], 1.0, rng));
        }
        self.fc1.init(ps, rng);
        self.fc2.init(ps, rng);
        self.refine.init(ps, rng);
        self.q.init(ps, rng);
        self.proj.init_scaled(ps, rng, 0.5);
    }

    /// Mixing weights `α = softmax(mixer(e ⊕ mask))` on the simplex.
    pub fn scp_mix<T: Real>(&self, ps: &ParamStore<T>, e: &[T], mask: &AvailabilityMask) -> Result<(Vec<T>, MixCache<T>)> {
        if e.len() != self.dims.channels {
            return Err(Error::Shape(format!(
                "state vector has length {}, expected {}",
                e.len(),
                self.dims.channels
            )));
        }
        let mut input = e.to_vec();
        if self.dims.mixer_uses_mask {
            if mask.bits().len() != self.dims.n_vars {
                return Err(Error::Shape("mask length does not match the universe".into()));
            }
            input.extend(mask.bits().iter().map(|&b| if b { T::one() } else { T::zero() }));
        }
        let hidden = self.fc1.forward(ps, &input)?;
        let logits = self.fc2.forward(ps, &silu_vec(&hidden))?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("prompt mixer produced non-finite logits".into()));
        }
        let alpha = softmax(&logits);
        Ok((
            alpha.clone(),
            MixCache {
                input,
                hidden,
                alpha,
            },
        ))
    }

    /// Convex combination of templates before upsampling and refinement.
    pub fn mix_templates<T: Real>(&self, ps: &ParamStore<T>, alpha: &[T]) -> Result<Tensor<T>> {
        if alpha.len() != self.templates.len() {
            return Err(Error::Shape(format!(
                "{} mixing weights for {} templates",
                alpha.len(),
                self.templates.len()
            )));
        }
        let total = alpha.iter().fold(0.0, |acc, a| acc + a.as_f64());
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!("mixing weights sum to {total}, not 1")));
        }
        let t = self.dims.template_size;
        let mut mixed = Tensor::zeros(&[self.dims.channels, t, t]);
        for (name, &a) in self.templates.iter().zip(alpha) {
            mixed.add_scaled(ps.get(name), a);
        }
        Ok(mixed)
    }

    /// `P = refine(upsample(Σ α_k P_k))` at `h x w`.
    pub fn scp_prompt<T: Real>(
        &self,
        ps: &ParamStore<T>,
        alpha: &[T],
        h: usize,
        w: usize,
    ) -> Result<(Tensor<T>, PromptCache<T>)> {
        let t = self.dims.template_size;
        if h < t || w < t {
            return Err(Error::Shape(format!("prompt size {h}x{w} is smaller than the {t}x{t} templates")));
        }
        let mixed = self.mix_templates(ps, alpha)?;
        let up = upsample_bilinear(&mixed, h, w);
        let (p, refine) = self.refine.forward(ps, &up)?;
        Ok((
            p,
            PromptCache {
                alpha: alpha.to_vec(),
                refine,
            },
        ))
    }

    /// `Z1 = Z0 + proj(Q([Z0 ; P]))`.
    pub fn prompt_interact<T: Real>(
        &self,
        ps: &ParamStore<T>,
        z0: &Tensor<T>,
        p: &Tensor<T>,
    ) -> Result<(Tensor<T>, InteractCache<T>)> {
        if z0.shape() != p.shape() {
            return Err(Error::Shape(format!("Z0 {:?} and prompt {:?} are misaligned", z0.shape(), p.shape())));
        }
        let cat = Tensor::concat_channels(z0, p)?;
        let (qo, q) = self.q.forward(ps, &cat)?;
        let (mut z1, proj) = self.proj.forward(ps, &qo)?;
        z1.add_assign(z0);
        Ok((z1, InteractCache { q, proj }))
    }

    /// Full embedder: adapter, then (unless prompting is disabled) state,
    /// mixer, prompt and interaction.
    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x_s: &Tensor<T>,
        mask: &AvailabilityMask,
    ) -> Result<(Tensor<T>, EmbedCache<T>)> {
        let z0 = uoa_project(x_s, mask, ps.get(UOA_WEIGHT))?;
        let (_, h, w) = z0.dims3();
        let mut cache = EmbedCache {
            x_s: x_s.clone(),
            mask: mask.clone(),
            hw: (h, w),
            scp: None,
        };
        if !self.dims.prompting {
            return Ok((z0, cache));
        }
        let e = scp_state(&z0);
        let (alpha, mix) = self.scp_mix(ps, &e, mask)?;
        let (p, prompt) = self.scp_prompt(ps, &alpha, h, w)?;
        let (z1, inter) = self.prompt_interact(ps, &z0, &p)?;
        cache.scp = Some((mix, prompt, inter));
        Ok((z1, cache))
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &EmbedCache<T>, dz1: &Tensor<T>, grads: &mut ParamStore<T>) {
        let c = self.dims.channels;
        let (h, w) = cache.hw;
        let mut dz0 = dz1.clone();
        if let Some((mix, prompt, inter)) = &cache.scp {
            let dq = self.proj.backward(ps, &inter.proj, dz1, grads);
            let dcat = self.q.backward(ps, &inter.q, &dq, grads);
            let (dz0_cat, dp) = dcat.split_channels(c);
            dz0.add_assign(&dz0_cat);

            let dup = self.refine.backward(ps, &prompt.refine, &dp, grads);
            let t = self.dims.template_size;
            let dmixed = upsample_bilinear_backward(&dup, t, t);
            let mut dalpha = Vec::with_capacity(self.templates.len());
            for (name, &a) in self.templates.iter().zip(&prompt.alpha) {
                let tmpl = ps.get(name);
                dalpha.push(tmpl.data().iter().zip(dmixed.data()).map(|(&p, &g)| p * g).sum::<T>());
                grads.slot(name, &[c, t, t]).add_scaled(&dmixed, a);
            }
            let dlogits = softmax_backward(&mix.alpha, &dalpha);
            let dact = self.fc2.backward(ps, &silu_vec(&mix.hidden), &dlogits, grads);
            let dhidden = silu_vec_backward(&mix.hidden, &dact);
            let dinput = self.fc1.backward(ps, &mix.input, &dhidden, grads);
            dz0.add_assign(&global_avg_pool_backward(&dinput[..c], h, w));
        }
        let dw = grads.slot(UOA_WEIGHT, &[self.dims.n_vars, c]);
        uoa_project_backward(&cache.x_s, &cache.mask, &dz0, dw);
    }
}
