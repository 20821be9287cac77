//! Encoder-decoder backbone built from deformable residual blocks (GARO) and a
//! selective-kernel bottleneck (SSDC), plus the plain-convolution counterpart
//! used for ablation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    deform_col2im, deform_im2col, global_avg_pool, global_avg_pool_backward, silu, silu_backward, silu_vec,
    silu_vec_backward, softmax, softmax_backward, upsample_bilinear, upsample_bilinear_backward, Conv2d,
    ConvCache, DeformCols, Linear, ResBlock, ResBlockCache,
};
use crate::tensor::{ParamStore, Real, Tensor};

/// Deformable residual block: `conv(sample(x, p0 + Δp)) + x` with
/// `Δp = offset(x)`.
#[derive(Clone, Debug)]
pub struct GaroBlock {
    pub offset: Conv2d,
    pub conv: Conv2d,
    pub kernel: usize,
}

pub struct GaroCache<T> {
    x: Tensor<T>,
    offset: ConvCache<T>,
    cols: DeformCols<T>,
}

impl GaroBlock {
    pub fn new(prefix: &str, channels: usize, kernel: usize) -> Self {
        GaroBlock {
            offset: Conv2d::new(&format!("{prefix}.offset"), channels, 2 * kernel * kernel, kernel, 1),
            conv: Conv2d::new(&format!("{prefix}.conv"), channels, channels, kernel, 1),
            kernel,
        }
    }

    /// Offsets start at zero, so the block begins as an ordinary convolution.
    pub fn init<T: Real, R: Rng + ?Sized>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        self.offset.init_zero(ps);
        self.conv.init_scaled(ps, rng, 0.5);
    }

    /// Offsets `[2k², H, W]` predicted for `x`.
    pub fn offsets<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.offset.forward(ps, x)?.0)
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, GaroCache<T>)> {
        let (off, offset) = self.offset.forward(ps, x)?;
        let cols = deform_im2col(x, &off, self.kernel)?;
        let (_, h, w) = x.dims3();
        let mut y = self.conv.apply_cols(ps, &cols.cols, (h, w))?;
        y.add_assign(x);
        Ok((
            y,
            GaroCache {
                x: x.clone(),
                offset,
                cols,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &GaroCache<T>,
        dy: &Tensor<T>,
        grads: &mut ParamStore<T>,
    ) -> Tensor<T> {
        let dcols = self.conv.backward_cols(ps, &cache.cols.cols, dy, grads);
        let (mut dx, doff) = deform_col2im(&cache.x, &cache.cols, &dcols, self.kernel);
        dx.add_assign(&self.offset.backward(ps, &cache.offset, &doff, grads));
        dx.add_assign(dy);
        dx
    }
}

/// Selective-kernel bottleneck: `Ψ(Σ_r ω_r · conv_r(x))`, `ω = softmax(SE(x))`.
#[derive(Clone, Debug)]
pub struct SsdcBlock {
    pub branches: Vec<Conv2d>,
    pub fc1: Linear,
    pub fc2: Linear,
    pub psi: ResBlock,
}

pub struct SsdcCache<T> {
    pooled: Vec<T>,
    hidden: Vec<T>,
    omega: Vec<T>,
    branch_out: Vec<Tensor<T>>,
    branch_caches: Vec<ConvCache<T>>,
    psi: ResBlockCache<T>,
    hw: (usize, usize),
}

impl SsdcBlock {
    pub fn new(prefix: &str, channels: usize, kernels: &[usize], reduction: usize) -> Self {
        let hidden = (channels / reduction.max(1)).max(4);
        SsdcBlock {
            branches: kernels
                .iter()
                .map(|&k| Conv2d::new(&format!("{prefix}.branch{k}"), channels, channels, k, 1))
                .collect(),
            fc1: Linear::new(&format!("{prefix}.se.fc1"), channels, hidden),
            fc2: Linear::new(&format!("{prefix}.se.fc2"), hidden, kernels.len()),
            psi: ResBlock::new(&format!("{prefix}.psi"), channels, channels),
        }
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        for b in &self.branches {
            b.init(ps, rng);
        }
        self.fc1.init(ps, rng);
        self.fc2.init(ps, rng);
        self.psi.conv1.init(ps, rng);
        self.psi.conv2.init_scaled(ps, rng, 0.5);
    }

    /// Branch attention weights for `x`.
    pub fn attention<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<T>> {
        let hidden = self.fc1.forward(ps, &global_avg_pool(x))?;
        Ok(softmax(&self.fc2.forward(ps, &silu_vec(&hidden))?))
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, SsdcCache<T>)> {
        let pooled = global_avg_pool(x);
        let hidden = self.fc1.forward(ps, &pooled)?;
        let omega = softmax(&self.fc2.forward(ps, &silu_vec(&hidden))?);
        self.forward_parts(ps, x, pooled, hidden, omega)
    }

    /// Forward with externally supplied branch weights (no gradient to the
    /// attention path).
    pub fn forward_with_weights<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>, omega: &[T]) -> Result<Tensor<T>> {
        if omega.len() != self.branches.len() {
            return Err(Error::Shape(format!(
                "{} branch weights for {} branches",
                omega.len(),
                self.branches.len()
            )));
        }
        Ok(self.forward_parts(ps, x, Vec::new(), Vec::new(), omega.to_vec())?.0)
    }

    fn forward_parts<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        pooled: Vec<T>,
        hidden: Vec<T>,
        omega: Vec<T>,
    ) -> Result<(Tensor<T>, SsdcCache<T>)> {
        let mut mixed = Tensor::zeros(x.shape());
        let mut branch_out = Vec::with_capacity(self.branches.len());
        let mut branch_caches = Vec::with_capacity(self.branches.len());
        for (conv, &wr) in self.branches.iter().zip(&omega) {
            let (y, c) = conv.forward(ps, x)?;
            mixed.add_scaled(&y, wr);
            branch_out.push(y);
            branch_caches.push(c);
        }
        let (out, psi) = self.psi.forward(ps, &mixed)?;
        let (_, h, w) = x.dims3();
        Ok((
            out,
            SsdcCache {
                pooled,
                hidden,
                omega,
                branch_out,
                branch_caches,
                psi,
                hw: (h, w),
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &SsdcCache<T>,
        dy: &Tensor<T>,
        grads: &mut ParamStore<T>,
    ) -> Tensor<T> {
        let dmixed = self.psi.backward(ps, &cache.psi, dy, grads);
        let mut dx: Option<Tensor<T>> = None;
        let mut domega = Vec::with_capacity(self.branches.len());
        for ((conv, c), (y, &wr)) in self
            .branches
            .iter()
            .zip(&cache.branch_caches)
            .zip(cache.branch_out.iter().zip(&cache.omega))
        {
            domega.push(y.data().iter().zip(dmixed.data()).map(|(&a, &g)| a * g).sum::<T>());
            let mut dbranch = dmixed.clone();
            dbranch.scale(wr);
            let d = conv.backward(ps, c, &dbranch, grads);
            match dx.as_mut() {
                Some(acc) => acc.add_assign(&d),
                None => dx = Some(d),
            }
        }
        let mut dx = dx.expect("at least one branch");
        let dlogits = softmax_backward(&cache.omega, &domega);
        let dact = self.fc2.backward(ps, &silu_vec(&cache.hidden), &dlogits, grads);
        let dhidden = silu_vec_backward(&cache.hidden, &dact);
        let dpooled = self.fc1.backward(ps, &cache.pooled, &dhidden, grads);
        dx.add_assign(&global_avg_pool_backward(&dpooled, cache.hw.0, cache.hw.1));
        dx
    }
}

/// Bottleneck of the plain variant: one 3×3 branch followed by `Ψ`.
#[derive(Clone, Debug)]
pub struct PlainCore {
    pub conv: Conv2d,
    pub psi: ResBlock,
}

pub struct PlainCoreCache<T> {
    conv: ConvCache<T>,
    psi: ResBlockCache<T>,
}

#[derive(Clone, Debug)]
enum Unit {
    Garo(GaroBlock),
    Plain(ResBlock),
}

enum UnitCache<T> {
    Garo(GaroCache<T>),
    Plain(ResBlockCache<T>),
}

impl Unit {
    fn init<T: Real, R: Rng + ?Sized>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        match self {
            Unit::Garo(g) => g.init(ps, rng),
            Unit::Plain(r) => {
                r.conv1.init(ps, rng);
                r.conv2.init_scaled(ps, rng, 0.5);
            }
        }
    }

    fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, UnitCache<T>)> {
        Ok(match self {
            Unit::Garo(g) => {
                let (y, c) = g.forward(ps, x)?;
                (y, UnitCache::Garo(c))
            }
            Unit::Plain(r) => {
                let (y, c) = r.forward(ps, x)?;
                (y, UnitCache::Plain(c))
            }
        })
    }

    fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &UnitCache<T>, dy: &Tensor<T>, grads: &mut ParamStore<T>) -> Tensor<T> {
        match (self, cache) {
            (Unit::Garo(g), UnitCache::Garo(c)) => g.backward(ps, c, dy, grads),
            (Unit::Plain(r), UnitCache::Plain(c)) => r.backward(ps, c, dy, grads),
            _ => unreachable!("cache built by the same unit"),
        }
    }
}

#[derive(Clone, Debug)]
enum Core {
    Ssdc(SsdcBlock),
    Plain(PlainCore),
}

enum CoreCache<T> {
    Ssdc(SsdcCache<T>),
    Plain(PlainCoreCache<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneDims {
    pub in_channels: usize,
    pub stages: usize,
    pub channel_mult: usize,
    pub branch_kernels: Vec<usize>,
    pub garo_kernel: usize,
    pub out_channels: usize,
    pub se_reduction: usize,
    /// `false` builds the plain-convolution counterpart.
    pub geometry_aware: bool,
}

impl BackboneDims {
    pub fn channels_at(&self, level: usize) -> usize {
        self.in_channels * self.channel_mult.pow(level as u32)
    }
}

/// Hidden width for a plain residual block with about as many parameters as
/// the GARO block it replaces.
fn plain_hidden(ch: usize, k: usize) -> usize {
    let garo = ch * 2 * k * k * k * k + 2 * k * k + ch * ch * k * k + ch;
    let per_hidden = 2 * ch * k * k + 1;
    ((garo - ch) as f64 / per_hidden as f64).round().max(1.0) as usize
}

/// Hidden width for the plain bottleneck's `Ψ` so that it absorbs the
/// parameters of the dropped branches and attention.
fn plain_core_hidden(ssdc: &SsdcBlock, ch: usize) -> usize {
    let conv_params = |c: &Conv2d| c.in_ch * c.out_ch * c.kernel * c.kernel + c.out_ch;
    let lin_params = |l: &Linear| l.in_dim * l.out_dim + l.out_dim;
    let ssdc_total: usize = ssdc.branches.iter().map(conv_params).sum::<usize>()
        + lin_params(&ssdc.fc1)
        + lin_params(&ssdc.fc2)
        + conv_params(&ssdc.psi.conv1)
        + conv_params(&ssdc.psi.conv2);
    let single = ch * ch * 9 + ch;
    let per_hidden = 2 * ch * 9 + 1;
    ((ssdc_total - single - ch) as f64 / per_hidden as f64).round().max(1.0) as usize
}

struct Stage {
    unit: Unit,
    down: Conv2d,
}

struct DecoderStage {
    fuse: Conv2d,
    unit: Unit,
}

pub struct Backbone {
    pub dims: BackboneDims,
    encoder: Vec<Stage>,
    core: Core,
    decoder: Vec<DecoderStage>,
    head: Conv2d,
}

struct EncCache<T> {
    unit: UnitCache<T>,
    skip_hw: (usize, usize),
    down: ConvCache<T>,
    down_pre: Tensor<T>,
}

struct DecCache<T> {
    in_hw: (usize, usize),
    fuse: ConvCache<T>,
    fuse_pre: Tensor<T>,
    unit: UnitCache<T>,
}

pub struct BackboneCache<T> {
    enc: Vec<EncCache<T>>,
    core: CoreCache<T>,
    dec: Vec<DecCache<T>>,
    head: ConvCache<T>,
}

impl Backbone {
    pub fn new(dims: BackboneDims) -> Result<Backbone> {
        if dims.stages == 0 || dims.channel_mult == 0 || dims.in_channels == 0 {
            return Err(Error::Config("backbone needs stages, channels and multiplier >= 1".into()));
        }
        if dims.garo_kernel % 2 == 0 || dims.branch_kernels.is_empty() || dims.branch_kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("kernel sizes must be odd and the branch set non-empty".into()));
        }
        let k = dims.garo_kernel;
        let make_unit = |prefix: &str, ch: usize| {
            if dims.geometry_aware {
                Unit::Garo(GaroBlock::new(&format!("{prefix}.garo"), ch, k))
            } else {
                Unit::Plain(ResBlock::new(&format!("{prefix}.plain"), ch, plain_hidden(ch, k)))
            }
        };
        let encoder = (0..dims.stages)
            .map(|i| {
                let ch = dims.channels_at(i);
                Stage {
                    unit: make_unit(&format!("gsao.enc{i}"), ch),
                    down: Conv2d::new(&format!("gsao.enc{i}.down"), ch, dims.channels_at(i + 1), 3, 2),
                }
            })
            .collect();
        let bottom = dims.channels_at(dims.stages);
        let ssdc = SsdcBlock::new("gsao.ssdc", bottom, &dims.branch_kernels, dims.se_reduction);
        let core = if dims.geometry_aware {
            Core::Ssdc(ssdc)
        } else {
            Core::Plain(PlainCore {
                conv: Conv2d::new("gsao.core.branch3", bottom, bottom, 3, 1),
                psi: ResBlock::new("gsao.core.psi", bottom, plain_core_hidden(&ssdc, bottom)),
            })
        };
        let decoder = (0..dims.stages)
            .rev()
            .map(|i| {
                let ch = dims.channels_at(i);
                DecoderStage {
                    fuse: Conv2d::new(&format!("gsao.dec{i}.fuse"), dims.channels_at(i + 1) + ch, ch, 3, 1),
                    unit: make_unit(&format!("gsao.dec{i}"), ch),
                }
            })
            .collect();
        Ok(Backbone {
            head: Conv2d::new("gsao.head", dims.in_channels, dims.out_channels, 1, 1),
            encoder,
            core,
            decoder,
            dims,
        })
    }

    pub fn init<T: Real, R: Rng + ?Sized>(&self, ps: &mut ParamStore<T>, rng: &mut R) {
        for s in &self.encoder {
            s.unit.init(ps, rng);
            s.down.init(ps, rng);
        }
        match &self.core {
            Core::Ssdc(b) => b.init(ps, rng),
            Core::Plain(p) => {
                p.conv.init(ps, rng);
                p.psi.conv1.init(ps, rng);
                p.psi.conv2.init_scaled(ps, rng, 0.5);
            }
        }
        for d in &self.decoder {
            d.fuse.init(ps, rng);
            d.unit.init(ps, rng);
        }
        self.head.init(ps, rng);
    }

    /// Rejects grids the encoder cannot halve `stages` times.
    pub fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.dims.stages;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "grid {h}x{w} must be divisible by 2^stages = {f} (stages = {})",
                self.dims.stages
            )));
        }
        Ok(())
    }

    pub fn garo_blocks(&self) -> Vec<&GaroBlock> {
        self.encoder
            .iter()
            .map(|s| &s.unit)
            .chain(self.decoder.iter().map(|d| &d.unit))
            .filter_map(|u| match u {
                Unit::Garo(g) => Some(g),
                Unit::Plain(_) => None,
            })
            .collect()
    }

    pub fn ssdc(&self) -> Option<&SsdcBlock> {
        match &self.core {
            Core::Ssdc(b) => Some(b),
            Core::Plain(_) => None,
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, z1: &Tensor<T>) -> Result<(Tensor<T>, BackboneCache<T>)> {
        let (c, h, w) = z1.dims3();
        if c != self.dims.in_channels {
            return Err(Error::Shape(format!(
                "backbone expects {} channels, got {c}",
                self.dims.in_channels
            )));
        }
        self.check_grid(h, w)?;
        let mut x = z1.clone();
        let mut skips = Vec::with_capacity(self.dims.stages);
        let mut enc = Vec::with_capacity(self.dims.stages);
        for s in &self.encoder {
            let (y, unit) = s.unit.forward(ps, &x)?;
            let (_, sh, sw) = y.dims3();
            let (down_pre, down) = s.down.forward(ps, &y)?;
            x = silu(&down_pre);
            skips.push(y);
            enc.push(EncCache {
                unit,
                skip_hw: (sh, sw),
                down,
                down_pre,
            });
        }
        let (mut x, core) = match &self.core {
            Core::Ssdc(b) => {
                let (y, c) = b.forward(ps, &x)?;
                (y, CoreCache::Ssdc(c))
            }
            Core::Plain(p) => {
                let (a, conv) = p.conv.forward(ps, &x)?;
                let (y, psi) = p.psi.forward(ps, &a)?;
                (y, CoreCache::Plain(PlainCoreCache { conv, psi }))
            }
        };
        let mut dec = Vec::with_capacity(self.dims.stages);
        for d in &self.decoder {
            let skip = skips.pop().expect("one skip per stage");
            let (_, ih, iw) = x.dims3();
            let (_, sh, sw) = skip.dims3();
            let up = upsample_bilinear(&x, sh, sw);
            let cat = Tensor::concat_channels(&up, &skip)?;
            let (fuse_pre, fuse) = d.fuse.forward(ps, &cat)?;
            let (y, unit) = d.unit.forward(ps, &silu(&fuse_pre))?;
            x = y;
            dec.push(DecCache {
                in_hw: (ih, iw),
                fuse,
                fuse_pre,
                unit,
            });
        }
        let (out, head) = self.head.forward(ps, &x)?;
        Ok((out, BackboneCache { enc, core, dec, head }))
    }

    /// Returns the gradient with respect to the backbone input.
    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &BackboneCache<T>,
        dy: &Tensor<T>,
        grads: &mut ParamStore<T>,
    ) -> Tensor<T> {
        let mut dx = self.head.backward(ps, &cache.head, dy, grads);
        let mut dskips = Vec::with_capacity(self.dims.stages);
        for (d, c) in self.decoder.iter().zip(&cache.dec).rev() {
            let dact = d.unit.backward(ps, &c.unit, &dx, grads);
            let dpre = silu_backward(&c.fuse_pre, &dact);
            let dcat = d.fuse.backward(ps, &c.fuse, &dpre, grads);
            let up_ch = dcat.shape()[0] - d.fuse.out_ch;
            let (dup, dskip) = dcat.split_channels(up_ch);
            dx = upsample_bilinear_backward(&dup, c.in_hw.0, c.in_hw.1);
            dskips.push(dskip);
        }
        dx = match (&self.core, &cache.core) {
            (Core::Ssdc(b), CoreCache::Ssdc(c)) => b.backward(ps, c, &dx, grads),
            (Core::Plain(p), CoreCache::Plain(c)) => {
                let da = p.psi.backward(ps, &c.psi, &dx, grads);
                p.conv.backward(ps, &c.conv, &da, grads)
            }
            _ => unreachable!("cache built by the same core"),
        };
        for (s, c) in self.encoder.iter().zip(&cache.enc).rev() {
            let dpre = silu_backward(&c.down_pre, &dx);
            let mut dy_unit = s.down.backward(ps, &c.down, &dpre, grads);
            let dskip = dskips.pop().expect("one skip per stage");
            debug_assert_eq!(dskip.shape()[1..], [c.skip_hw.0, c.skip_hw.1]);
            dy_unit.add_assign(&dskip);
            dx = s.unit.backward(ps, &c.unit, &dy_unit, grads);
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(geometry_aware: bool) -> BackboneDims {
        BackboneDims {
            in_channels: 4,
            stages: 3,
            channel_mult: 2,
            branch_kernels: vec![3, 5, 7],
            garo_kernel: 3,
            out_channels: 3,
            se_reduction: 4,
            geometry_aware,
        }
    }

    #[test]
    fn shapes_follow_stage_arithmetic() {
        let bb = Backbone::new(dims(true)).unwrap();
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        bb.init(&mut ps, &mut rng);
        let x = uniform_tensor(&[4, 32, 32], 1.0, &mut rng);
        let (y, cache) = bb.forward(&ps, &x).unwrap();
        assert_eq!(y.shape(), &[3, 32, 32]);
        match &cache.core {
            CoreCache::Ssdc(c) => assert_eq!(c.hw, (4, 4)),
            CoreCache::Plain(_) => unreachable!(),
        }
    }

    #[test]
    fn indivisible_grid_names_the_constraint() {
        let bb = Backbone::new(dims(true)).unwrap();
        let err = bb.check_grid(50, 64).unwrap_err().to_string();
        assert!(err.contains("divisible by 2^stages"), "{err}");
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let bb = Backbone::new(dims(true)).unwrap();
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        bb.init(&mut ps, &mut rng);
        ps.scale(0.0);
        let x = uniform_tensor(&[4, 16, 16], 1.0, &mut rng);
        let (y, _) = bb.forward(&ps, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plain_variant_has_about_the_same_size() {
        let count = |geo| {
            let bb = Backbone::new(dims(geo)).unwrap();
            let mut ps = ParamStore::<f64>::new();
            bb.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(2));
            ps.num_scalars() as f64
        };
        let (full, plain) = (count(true), count(false));
        assert!((full - plain).abs() / full < 0.05, "{full} vs {plain}");
    }

    #[test]
    fn zero_main_conv_makes_garo_the_identity() {
        let g = GaroBlock::new("g", 3, 3);
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        g.init(&mut ps, &mut rng);
        ps.get_mut("g.conv.weight").scale(0.0);
        ps.get_mut("g.conv.bias").scale(0.0);
        *ps.get_mut("g.offset.bias") = uniform_tensor(&[18], 0.7, &mut rng);
        let x = uniform_tensor(&[3, 6, 5], 1.0, &mut rng);
        assert_eq!(g.forward(&ps, &x).unwrap().0, x);
    }
}
