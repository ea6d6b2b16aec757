//! Full network assembly: configuration, parameter construction, the
//! forward pass and padded full-resolution inference.
//!
//! Layout, for an input of H×W and unshuffle factor f (H_s = H/f):
//!
//! * stem: pixel unshuffle by f, then a 3×3 conv 3f² → C at H_s.
//! * encoder level l = 1..4: blocks at width 2^(l−1)·C on H_s/2^(l−1),
//!   then a 2×2 stride-2 conv producing F_l with 2^l·C channels at H_s/2^l.
//! * bottleneck: one large-kernel block on F_4.
//! * decoder level l = 4..1: levels below 4 first upsample (1×1 conv to
//!   twice the channels, pixel shuffle ×2). The result is concatenated with
//!   the fused skip feature, reduced by a 1×1 conv to 2^l·C and refined by
//!   the level's blocks.
//! * heads on decoder levels 1..3: 3×3 conv to 3·(2f)² channels and pixel
//!   shuffle by 2f, giving residuals at H, H/2 and H/4 that are added to
//!   the (downsampled) input.

use mznet_tensor::{ConvSpec, Shape, Tape, Tensor, Var};

use crate::blocks::{AttentionSwitches, Ffsc, Msdab, Mslkb, NafBlock};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamInit, Params, Pooling};

/// Bottleneck kernel size: explicit, or derived from the training crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelSize {
    Auto,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub base_width: usize,
    pub unshuffle_factor: usize,
    pub encoder_blocks: [usize; 4],
    pub decoder_blocks: [usize; 4],
    /// Dilation set of the attention blocks at each level (1..4).
    pub dilations: [Vec<usize>; 4],
    pub mslkb_kernel: KernelSize,
    pub use_lka: bool,
    pub use_sca: bool,
    pub use_mdcm: bool,
    pub use_stripe: bool,
    pub use_square: bool,
    pub use_ffsc: bool,
    pub use_mslkb: bool,
    /// Channel attention inside the large-kernel convolution.
    pub use_mscm_sca: bool,
    /// Attention blocks in the encoder/decoder; `false` substitutes
    /// activation-free blocks of the same width.
    pub use_msdab: bool,
    pub deep_supervision_levels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = vec![1, 4, 7, 9];
        Self {
            base_width: 32,
            unshuffle_factor: 2,
            encoder_blocks: [4, 4, 6, 8],
            decoder_blocks: [4, 4, 6, 6],
            dilations: [d.clone(), d.clone(), d.clone(), d],
            mslkb_kernel: KernelSize::Auto,
            use_lka: true,
            use_sca: true,
            use_mdcm: true,
            use_stripe: true,
            use_square: true,
            use_ffsc: true,
            use_mslkb: true,
            use_mscm_sca: true,
            use_msdab: true,
            deep_supervision_levels: 3,
        }
    }
}

impl ModelConfig {
    /// Base width 8 with one block per level.
    pub fn tiny() -> Self {
        Self {
            base_width: 8,
            encoder_blocks: [1; 4],
            decoder_blocks: [1; 4],
            ..Self::default()
        }
    }

    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.unshuffle_factor * 16
    }

    pub fn msdab_count(&self) -> usize {
        self.encoder_blocks.iter().chain(&self.decoder_blocks).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.unshuffle_factor == 0 {
            return bad("unshuffle_factor must be at least 1".into());
        }
        if self.base_width == 0 || !self.base_width.is_multiple_of(2) {
            return bad(format!("base_width must be positive and even, got {}", self.base_width));
        }
        if self.encoder_blocks.iter().chain(&self.decoder_blocks).any(|&b| b == 0) {
            return bad("every level needs at least one block".into());
        }
        for (l, d) in self.dilations.iter().enumerate() {
            if d.is_empty() || d[0] == 0 || d.windows(2).any(|p| p[0] >= p[1]) {
                return bad(format!(
                    "dilations of level {} must be positive and strictly increasing",
                    l + 1
                ));
            }
        }
        if let KernelSize::Fixed(k) = self.mslkb_kernel {
            if k == 0 || k % 2 == 0 {
                return bad(format!("mslkb kernel must be odd, got {k}"));
            }
        }
        if !self.use_lka && !self.use_sca {
            return bad("use_lka and use_sca cannot both be off".into());
        }
        if !(1..=3).contains(&self.deep_supervision_levels) {
            return bad(format!(
                "deep_supervision_levels must be 1..=3, got {}",
                self.deep_supervision_levels
            ));
        }
        Ok(())
    }

    /// Copy with an `Auto` kernel resolved for the given training crop.
    pub fn with_crop(&self, crop_h: usize, crop_w: usize) -> Result<Self> {
        let mut c = self.clone();
        if c.mslkb_kernel == KernelSize::Auto {
            c.mslkb_kernel = KernelSize::Fixed(select_kernel_size(crop_h, crop_w, self)?);
        }
        Ok(c)
    }

    fn kernel(&self) -> Result<usize> {
        match self.mslkb_kernel {
            KernelSize::Fixed(k) => Ok(k),
            KernelSize::Auto => Err(Error::Config(
                "bottleneck kernel is `auto`; resolve it from the training crop first".into(),
            )),
        }
    }
}

/// Largest odd number not exceeding the bottleneck feature size of a crop.
pub fn select_kernel_size(crop_h: usize, crop_w: usize, config: &ModelConfig) -> Result<usize> {
    let m = config.size_multiple();
    if !crop_h.is_multiple_of(m) || !crop_w.is_multiple_of(m) {
        return Err(Error::Config(format!("crop {crop_h}x{crop_w} is not divisible by {m}")));
    }
    let b = crop_h.min(crop_w) / m;
    if b < 1 {
        return Err(Error::Config(format!("crop {crop_h}x{crop_w} leaves no bottleneck")));
    }
    Ok(if b % 2 == 1 { b } else { b - 1 })
}

/// Local-pooling window for test-time channel attention, in input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TlcSpec {
    pub window: (usize, usize),
}

/// Outputs of one forward pass.
pub struct ForwardOutput {
    /// Predictions at full, 1/2 and 1/4 scale (as many as supervised).
    pub preds: Vec<Var>,
    /// Encoder features F_1..F_4.
    pub encoder: Vec<Var>,
}

impl ForwardOutput {
    pub fn image(&self) -> &Var {
        &self.preds[0]
    }
}

/// A configured network and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

enum LevelBlock {
    Attention(Msdab),
    Naf(NafBlock),
}

impl LevelBlock {
    fn init(&self, prefix: &str, init: &mut ParamInit) -> Result<()> {
        match self {
            LevelBlock::Attention(b) => b.init(prefix, init),
            LevelBlock::Naf(b) => b.init(prefix, init),
        }
    }

    fn forward(&self, ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Var> {
        match self {
            LevelBlock::Attention(b) => b.forward(ctx, prefix, x),
            LevelBlock::Naf(b) => b.forward(ctx, prefix, x),
        }
    }

    fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        match self {
            LevelBlock::Attention(b) => b.macs(n, h, w),
            LevelBlock::Naf(b) => b.macs(n, h, w),
        }
    }
}

/// The resolved structure shared by `init`, `forward` and `macs`.
struct Layout<'a> {
    cfg: &'a ModelConfig,
    kernel: usize,
}

impl<'a> Layout<'a> {
    fn new(cfg: &'a ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let kernel = if cfg.use_mslkb { cfg.kernel()? } else { 1 };
        Ok(Self { cfg, kernel })
    }

    fn c(&self) -> usize {
        self.cfg.base_width
    }

    fn stem(&self) -> ConvSpec {
        let f = self.cfg.unshuffle_factor;
        ConvSpec::same(3 * f * f, self.c(), (3, 3))
    }

    fn block(&self, width: usize, level: usize) -> LevelBlock {
        if self.cfg.use_msdab {
            LevelBlock::Attention(Msdab {
                channels: width,
                dilations: self.cfg.dilations[level - 1].clone(),
                switches: AttentionSwitches {
                    use_lka: self.cfg.use_lka,
                    use_sca: self.cfg.use_sca,
                    use_mdcm: self.cfg.use_mdcm,
                },
            })
        } else {
            LevelBlock::Naf(NafBlock { channels: width })
        }
    }

    fn down(&self, level: usize) -> ConvSpec {
        let c = self.c() << (level - 1);
        ConvSpec::new(c, 2 * c, (2, 2)).with_stride((2, 2))
    }

    fn bottleneck(&self) -> Mslkb {
        Mslkb {
            channels: self.c() << 4,
            kernel: self.kernel,
            use_square: self.cfg.use_square,
            use_stripe: self.cfg.use_stripe,
            use_sca: self.cfg.use_mscm_sca,
        }
    }

    /// Decoder levels 1..3 upsample the deeper level's output.
    fn up(&self, level: usize) -> ConvSpec {
        let c = self.c() << (level + 1);
        ConvSpec::pointwise(c, 2 * c)
    }

    fn reduce(&self, level: usize) -> ConvSpec {
        let c = self.c() << level;
        ConvSpec::pointwise(2 * c, c)
    }

    fn ffsc(&self, level: usize) -> Ffsc {
        Ffsc {
            base_width: self.c(),
            level,
        }
    }

    fn head(&self, scale: usize) -> ConvSpec {
        let r = 2 * self.cfg.unshuffle_factor;
        ConvSpec::same(self.c() << (scale + 1), 3 * r * r, (3, 3))
    }

    fn init(&self, init: &mut ParamInit) -> Result<()> {
        let cfg = self.cfg;
        init.conv("stem.conv", &self.stem())?;
        for l in 1..=4 {
            let width = self.c() << (l - 1);
            for b in 0..cfg.encoder_blocks[l - 1] {
                self.block(width, l).init(&format!("enc{l}.block{b}"), init)?;
            }
            init.conv(&format!("enc{l}.down"), &self.down(l))?;
        }
        if cfg.use_mslkb {
            self.bottleneck().init("bottleneck", init)?;
        }
        for l in (1..=4).rev() {
            if l < 4 {
                init.conv(&format!("dec{l}.up"), &self.up(l))?;
            }
            if cfg.use_ffsc {
                self.ffsc(l).init(&format!("ffsc{l}"), init)?;
            }
            init.conv(&format!("dec{l}.reduce"), &self.reduce(l))?;
            for b in 0..cfg.decoder_blocks[l - 1] {
                self.block(self.c() << l, l).init(&format!("dec{l}.block{b}"), init)?;
            }
        }
        for s in 0..cfg.deep_supervision_levels {
            init.conv_zero(&format!("head{s}.conv"), &self.head(s))?;
        }
        Ok(())
    }

    fn forward(&self, ctx: &mut Ctx, image: &Var) -> Result<ForwardOutput> {
        let cfg = self.cfg;
        let s = image.shape();
        let m = cfg.size_multiple();
        if s.c != 3 || !s.h.is_multiple_of(m) || !s.w.is_multiple_of(m) || s.h == 0 || s.w == 0 {
            return Err(Error::Config(format!(
                "input {s} must have 3 channels and sides divisible by {m}"
            )));
        }
        let x = ctx.tape.pixel_unshuffle(image, cfg.unshuffle_factor)?;
        let mut h = ctx.conv("stem.conv", &x, &self.stem())?;
        let mut feats = Vec::with_capacity(4);
        for l in 1..=4 {
            let width = self.c() << (l - 1);
            for b in 0..cfg.encoder_blocks[l - 1] {
                h = self.block(width, l).forward(ctx, &format!("enc{l}.block{b}"), &h)?;
            }
            h = ctx.conv(&format!("enc{l}.down"), &h, &self.down(l))?;
            feats.push(h.clone());
        }
        let mut d = if cfg.use_mslkb {
            self.bottleneck().forward(ctx, "bottleneck", &feats[3])?
        } else {
            feats[3].clone()
        };
        let mut dec_out = vec![None; 4];
        for l in (1..=4).rev() {
            if l < 4 {
                let u = ctx.conv(&format!("dec{l}.up"), &d, &self.up(l))?;
                d = ctx.tape.pixel_shuffle(&u, 2)?;
            }
            let skip = if cfg.use_ffsc {
                self.ffsc(l).forward(ctx, &format!("ffsc{l}"), &feats)?
            } else {
                feats[l - 1].clone()
            };
            let cat = ctx.tape.concat(&[d, skip])?;
            d = ctx.conv(&format!("dec{l}.reduce"), &cat, &self.reduce(l))?;
            for b in 0..cfg.decoder_blocks[l - 1] {
                d = self
                    .block(self.c() << l, l)
                    .forward(ctx, &format!("dec{l}.block{b}"), &d)?;
            }
            dec_out[l - 1] = Some(d.clone());
        }
        let r = 2 * cfg.unshuffle_factor;
        let mut preds = Vec::with_capacity(cfg.deep_supervision_levels);
        for (sc, level_out) in dec_out.iter().take(cfg.deep_supervision_levels).enumerate() {
            let level_out = level_out.as_ref().expect("every decoder level ran");
            let res = ctx.conv(&format!("head{sc}.conv"), level_out, &self.head(sc))?;
            let res = ctx.tape.pixel_shuffle(&res, r)?;
            let base = if sc == 0 {
                image.clone()
            } else {
                ctx.tape.resize(image, s.h >> sc, s.w >> sc)?
            };
            preds.push(ctx.tape.add(&base, &res)?);
        }
        Ok(ForwardOutput { preds, encoder: feats })
    }

    /// Multiplies per named module for an n×3×h×w input.
    fn macs(&self, n: usize, h: usize, w: usize) -> Vec<(String, u64)> {
        let cfg = self.cfg;
        let f = cfg.unshuffle_factor;
        let (hs, ws) = (h / f, w / f);
        let mut rows = Vec::new();
        rows.push(("stem".to_string(), self.stem().macs(n, hs, ws)));
        for l in 1..=4 {
            let (lh, lw) = (hs >> (l - 1), ws >> (l - 1));
            let width = self.c() << (l - 1);
            let blocks: u64 = (0..cfg.encoder_blocks[l - 1])
                .map(|_| self.block(width, l).macs(n, lh, lw))
                .sum();
            rows.push((format!("enc{l}"), blocks + self.down(l).macs(n, lh / 2, lw / 2)));
        }
        let (bh, bw) = (hs >> 4, ws >> 4);
        let bottleneck = if cfg.use_mslkb {
            self.bottleneck().macs(n, bh, bw)
        } else {
            0
        };
        rows.push(("bottleneck".to_string(), bottleneck));
        for l in 1..=4 {
            let m = if cfg.use_ffsc {
                self.ffsc(l).macs(n, hs >> 1, ws >> 1)
            } else {
                0
            };
            rows.push((format!("ffsc{l}"), m));
        }
        for l in 1..=4 {
            let (lh, lw) = (hs >> l, ws >> l);
            let mut m = 0;
            if l < 4 {
                m += self.up(l).macs(n, lh / 2, lw / 2);
            }
            m += self.reduce(l).macs(n, lh, lw);
            m += (0..cfg.decoder_blocks[l - 1])
                .map(|_| self.block(self.c() << l, l).macs(n, lh, lw))
                .sum::<u64>();
            rows.push((format!("dec{l}"), m));
        }
        let mut heads = 0;
        for sc in 0..cfg.deep_supervision_levels {
            heads += self.head(sc).macs(n, hs >> (sc + 1), ws >> (sc + 1));
            if sc > 0 {
                heads += 6 * (n * 3 * (h >> sc) * (w >> sc)) as u64;
            }
        }
        rows.push(("heads".to_string(), heads));
        rows
    }
}

/// Module rows reported by [`module_macs`], in order.
pub fn module_name(path: &str) -> &str {
    let top = path.split('.').next().unwrap_or(path);
    if top.starts_with("head") {
        "heads"
    } else {
        top
    }
}

/// Analytic multiply count of one forward pass per module.
pub fn module_macs(config: &ModelConfig, n: usize, h: usize, w: usize) -> Result<Vec<(String, u64)>> {
    let m = config.size_multiple();
    if !h.is_multiple_of(m) || !w.is_multiple_of(m) || h == 0 || w == 0 {
        return Err(Error::Config(format!("resolution {h}x{w} is not divisible by {m}")));
    }
    Ok(Layout::new(config)?.macs(n, h, w))
}

impl Model {
    /// Builds a network with seeded initialization. Heads start at zero,
    /// so the fresh network returns its input unchanged.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let layout = Layout::new(config)?;
        let mut init = ParamInit::new(seed);
        layout.init(&mut init)?;
        Ok(Self {
            config: config.clone(),
            params: init.finish(),
        })
    }

    /// Wraps existing parameters, checking that they cover the layout.
    pub fn from_params(config: &ModelConfig, params: Params) -> Result<Self> {
        let reference = Self::build(config, 0)?;
        for (path, t) in reference.params.iter() {
            match params.get(path) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "parameter `{path}` has shape {}, expected {}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::MissingParam(path.to_string())),
            }
        }
        if params.len() != reference.params.len() {
            let extra = params
                .paths()
                .find(|p| !reference.params.contains(p))
                .unwrap_or_default();
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    /// Runs the network inside `ctx`, whose bound parameters must come
    /// from this model.
    pub fn forward(&self, ctx: &mut Ctx, image: &Var) -> Result<ForwardOutput> {
        Layout::new(&self.config)?.forward(ctx, image)
    }

    /// Untracked forward pass of a divisible input; returns the full-scale
    /// prediction.
    pub fn infer(&self, image: &Tensor, tlc: Option<TlcSpec>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.constants();
        let s = image.shape();
        let pooling = match tlc {
            None => Pooling::Global,
            Some(t) => Pooling::Local {
                window: t.window,
                image: (s.h, s.w),
            },
        };
        let mut ctx = Ctx::new(&mut tape, &bound).with_pooling(pooling);
        let out = self.forward(&mut ctx, &Var::constant(image.clone()))?;
        Ok(out.preds[0].to_tensor())
    }

    /// Inference on any input of at least 32×32: reflect-pad to the size
    /// multiple, run, crop back.
    pub fn infer_padded(&self, image: &Tensor, tlc: Option<TlcSpec>) -> Result<Tensor> {
        let s = image.shape();
        if s.h < 32 || s.w < 32 {
            return Err(Error::Config(format!("input {s} is smaller than 32x32")));
        }
        let m = self.config.size_multiple();
        let (ph, pw) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
        if (ph, pw) == (s.h, s.w) {
            return self.infer(image, tlc);
        }
        let padded = reflect_pad(image, ph, pw);
        let out = self.infer(&padded, tlc)?;
        Ok(crop(&out, 0, 0, s.h, s.w))
    }
}

/// Mirror index into 0..n without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

/// Extends `x` to `h`×`w` by reflection at the bottom and right edges.
pub fn reflect_pad(x: &Tensor, h: usize, w: usize) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, i, j| {
        x.at(n, c, reflect_index(i as isize, s.h), reflect_index(j as isize, s.w))
    })
}

/// The `h`×`w` window of `x` starting at (top, left).
pub fn crop(x: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |n, c, i, j| x.at(n, c, top + i, left + j))
}
