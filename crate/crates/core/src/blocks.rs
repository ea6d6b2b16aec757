//! Building blocks of the network.
//!
//! Each block is a small description (channel count, kernel choices,
//! switches) with three methods that must stay in agreement:
//! `init` registers parameters under a path prefix, `forward` evaluates
//! the block from those parameters, and `macs` counts the multiplies the
//! forward pass performs.

use mznet_tensor::{ConvSpec, Var};

use crate::error::{Error, Result};
use crate::params::{Ctx, ParamInit};

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn numel(n: usize, c: usize, h: usize, w: usize) -> u64 {
    (n * c * h * w) as u64
}

/// Multiplies of a channel layer norm on (n, c, h, w).
pub fn norm_macs(n: usize, c: usize, h: usize, w: usize) -> u64 {
    (n * h * w * (c + 2)) as u64 + 2 * numel(n, c, h, w)
}

fn conv_macs(spec: &ConvSpec, n: usize, h: usize, w: usize) -> u64 {
    let (ho, wo) = spec.output_hw(h, w).expect("conv geometry validated at build time");
    spec.macs(n, ho, wo)
}

fn require_even(block: &str, c: usize) -> Result<()> {
    if c == 0 || !c.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "{block} needs a positive even channel count, got {c}"
        )));
    }
    Ok(())
}

/// Simplified channel attention: `x ⊙ conv1×1(mean(x))`.
///
/// Under local pooling the mean is taken over a sliding window and the
/// product becomes elementwise.
#[derive(Clone, Copy, Debug)]
pub struct Sca {
    pub channels: usize,
}

impl Sca {
    fn spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.channels, self.channels)
    }

    pub fn init(&self, prefix: &str, init: &mut ParamInit) -> Result<()> {
        init.conv(&join(prefix, "conv"), &self.spec())
    }

    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Var> {
        let s = x.shape();
        match ctx.pool_window(s.h, s.w) {
            None => {
                let pooled = ctx.tape.global_avg_pool(x)?;
                let attn = ctx.conv(&join(prefix, "conv"), &pooled, &self.spec())?;
                Ok(ctx.tape.mul_channels(x, &attn)?)
            }
            Some((kh, kw)) => {
                let pooled = ctx.tape.local_avg_pool(x, kh, kw)?;
                let attn = ctx.conv(&join(prefix, "conv"), &pooled, &self.spec())?;
                Ok(ctx.tape.mul(x, &attn)?)
            }
        }
    }

    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        (n * self.channels) as u64 + self.spec().macs(n, 1, 1) + numel(n, self.channels, h, w)
    }
}

/// Large-kernel attention: `x ⊙ pw(dw7×7,d3(dw5×5(x)))`.
#[derive(Clone, Copy, Debug)]
pub struct Lka {
    pub channels: usize,
}

impl Lka {
    fn specs(&self) -> [(&'static str, ConvSpec); 3] {
        let c = self.channels;
        [
            ("dw5", ConvSpec::depthwise(c, (5, 5), 1).with_bias(true)),
            ("dw7", ConvSpec::depthwise(c, (7, 7), 3).with_bias(true)),
            ("pw", ConvSpec::pointwise(c, c)),
        ]
    }

    pub fn init(&self, prefix: &str, init: &mut ParamInit) -> Result<()> {
        for (name, spec) in self.specs() {
            init.conv(&join(prefix, name), &spec)?;
        }
        Ok(())
    }

    /// The attention map alone, before gating.
    pub fn attention(&self, ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Var> {
        let mut a = x.clone();
        for (name, spec) in self.specs() {
            a = ctx.conv(&join(prefix, name), &a, &spec)?;
        }
        Ok(a)
    }

    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Var> {
        let a = self.attention(ctx, prefix, x)?;
        Ok(ctx.tape.mul(x, &a)?)
    }

    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let convs: u64 = self.specs().iter().map(|(_, s)| conv_macs(s, n, h, w)).sum();
        convs + numel(n, self.channels, h, w)
    }
}

/// Dual attention: `fuse1×1(SCA(x) + LKA(x))`, either branch switchable.
#[derive(Clone, Copy, Debug)]
pub struct Dam {
    pub channels: usize,
    pub use_sca: bool,
    pub use_lka: bool,
}

impl Dam {
    fn fuse(&self) -> ConvSpec {
        ConvSpec::pointwise(self.channels, self.channels)
    }

    fn check(&self) -> Result<()> {
        if !self.use_sca && !self.use_lka {
            return Err(Error::Config("attention needs at least one of SCA and LKA".into()));
        }
        Ok(())
    }

    pub fn init(&self, prefix: &str, init: &mut ParamInit) -> Result<()> {
        self.check()?;
        let c = self.channels;
        if self.use_sca {
            Sca { channels: c }.init(&join(prefix, "sca"), init)?;
        }
        if self.use_lka {
            Lka { channels: c }.init(&join(prefix, "lka"), init)?;
        }
        init.conv(&join(prefix, "fuse"), &self.fuse())
    }

    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Var> {
        self.check()?;
        let c = self.channels;
        let mut parts = Vec::with_capacity(2);
        if self.use_sca {
            parts.push(Sca { channels: c }.forward(ctx, &join(prefix, "sca"), x)?);
        }
        if self.use_lka {
            parts.push(Lka { channels: c }.forward(ctx, &join(prefix, "lka"), x)?);
        }
        let sum = ctx.tape.add_all(&parts)?;
        ctx.conv(&join(prefix, "fuse"), &sum, &self.fuse())
    }

    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let c = self.channels;
        let mut m = conv_macs(&self.fuse(), n, h, w);
        if self.use_sca {
            m += Sca { channels: c }.macs(n, h, w);
        }
        if self.use_lka {
            m += Lka { channels: c }.macs(n, h, w);
        }
        m
    }
}

/// Sum of depthwise branches evaluated on the same input. Branch 0 alone
/// carries a bias, which acts as the single bias of the summed output.
#[derive(Clone, Debug)]
struct BranchSum {
    specs: Vec<ConvSpec>,
}

impl BranchSum {
    fn new(mut specs: Vec<ConvSpec>) -> Self {
        for (i, s) in specs.iter_mut().enumerate() {
            *s = s.with_bias(i == 0);
        }
        Self { specs }
    }

    fn init(&self, prefix: &str, init: &mut ParamInit) -> Result<()> {
        for (i, spec) in self.specs.iter().enumerate() {
            init.conv(&join(prefix, &format!("branch{i}")), spec)?;
        }
        Ok(())
    }

    fn branches(&self, ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Vec<Var>> {
        self.specs
            .iter()
            .enumerate()
            .map(|(i, spec)| ctx.conv(&join(prefix, &format!("branch{i}")), x, spec))
            .collect()
    }

    fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        self.specs.iter().map(|s| conv_macs(s, n, h, w)).sum()
    }
}

/// Multi-dilation convolution: Σ_i depthwise 3×3 with dilation d_i.
#[derive(Clone, Debug)]
pub struct Mdcm {
    pub channels: usize,
    pub dilations: Vec<usize>,
}

impl Mdcm {
    fn branches(&self) -> Result<BranchSum> {
        if self.dilations.is_empty() || self.dilations.windows(2).any(|p| p[0] >= p[1]) || self.dilations[0] == 0 {
            return Err(Error::Config(format!(
                "dilations must be positive and strictly increasing, got {:?}",
                self.dilations
            )));
        }
        Ok(BranchSum::new(
            self.dilations
                .iter()
                .map(|&d| ConvSpec::depthwise(self.channels, (3, 3), d))
                .collect(),
        ))
    }

    pub fn init(&self, prefix: &str, init: &mut ParamInit) -> Result<()> {
        self.branches()?.init(prefix, init)
    }

    /// Every branch output, in dilation order.
    pub fn branch_outputs(&self, ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Vec<Var>> {
        self.branches()?.branches(ctx, prefix, x)
    }

    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Var> {
        let parts = self.branch_outputs(ctx, prefix, x)?;
        Ok(ctx.tape.add_all(&parts)?)
    }

    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        self.branches().map_or(0, |b| b.macs(n, h, w))
    }
}

/// Multi-shape large-kernel convolution: depthwise K×K, K×1, 1×K and 1×1
/// branches summed, plus channel attention of the input.
#[derive(Clone, Copy, Debug)]
pub struct Mscm {
    pub channels: usize,
    pub kernel: usize,
    pub use_square: bool,
    pub use_stripe: bool,
    pub use_sca: bool,
}

impl Mscm {
    fn branches(&self) -> Result<BranchSum> {
        let k = self.kernel;
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "large-kernel size must be odd and positive, got {k}"
            )));
        }
        let c = self.channels;
        let mut specs = Vec::new();
        if self.use_square {
            specs.push(ConvSpec::depthwise(c, (k, k), 1));
        }
        if self.use_stripe {
            specs.push(ConvSpec::depthwise(c, (k, 1), 1));
            specs.push(ConvSpec::depthwise(c, (1, k), 1));
        }
        specs.push(ConvSpec::depthwise(c, (1, 1), 1));
        Ok(BranchSum::new(specs))
    }

    pub fn init(&self, prefix: &str, init: &mut ParamInit) -> Result<()> {
        self.branches()?.init(prefix, init)?;
        if self.use_sca {
            Sca {
                channels: self.channels,
            }
            .init(&join(prefix, "sca"), init)?;
        }
        Ok(())
    }

    /// Convolution branches in order (square, vertical, horizontal, point),
    /// omitting switched-off shapes.
    pub fn branch_outputs(&self, ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Vec<Var>> {
        self.branches()?.branches(ctx, prefix, x)
    }

    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Var> {
        let mut parts = self.branch_outputs(ctx, prefix, x)?;
        if self.use_sca {
            parts.push(
                Sca {
                    channels: self.channels,
                }
                .forward(ctx, &join(prefix, "sca"), x)?,
            );
        }
        Ok(ctx.tape.add_all(&parts)?)
    }

    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let mut m = self.branches().map_or(0, |b| b.macs(n, h, w));
        if self.use_sca {
            m += Sca {
                channels: self.channels,
            }
            .macs(n, h, w);
        }
        m
    }
}

/// Feed-forward tail shared by the residual blocks: expand ×2, SimpleGate,
/// project.
#[derive(Clone, Copy, Debug)]
struct Ffn {
    channels: usize,
}

impl Ffn {
    fn specs(&self) -> (ConvSpec, ConvSpec) {
        let c = self.channels;
        (ConvSpec::pointwise(c, 2 * c), ConvSpec::pointwise(c, c))
    }

    fn init(&self, prefix: &str, init: &mut ParamInit) -> Result<()> {
        let (e, p) = self.specs();
        init.conv(&join(prefix, "expand"), &e)?;
        init.conv(&join(prefix, "project"), &p)
    }

    fn forward(&self, ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Var> {
        let (e, p) = self.specs();
        let h = ctx.conv(&join(prefix, "expand"), x, &e)?;
        let g = ctx.tape.simple_gate(&h)?;
        ctx.conv(&join(prefix, "project"), &g, &p)
    }

    fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let (e, p) = self.specs();
        conv_macs(&e, n, h, w) + numel(n, self.channels, h, w) + conv_macs(&p, n, h, w)
    }
}

/// `y = x + body(LN(x)); out = y + FFN(LN(y))`.
fn residual_pair(
    ctx: &mut Ctx,
    prefix: &str,
    x: &Var,
    channels: usize,
    body: impl FnOnce(&mut Ctx, &Var) -> Result<Var>,
) -> Result<Var> {
    let n1 = ctx.norm(&join(prefix, "norm1"), x)?;
    let b = body(ctx, &n1)?;
    let y = ctx.tape.add(x, &b)?;
    let n2 = ctx.norm(&join(prefix, "norm2"), &y)?;
    let f = Ffn { channels }.forward(ctx, &join(prefix, "ffn"), &n2)?;
    Ok(ctx.tape.add(&y, &f)?)
}

fn residual_pair_init(
    prefix: &str,
    init: &mut ParamInit,
    channels: usize,
    body: impl FnOnce(&mut ParamInit) -> Result<()>,
) -> Result<()> {
    require_even("residual block", channels)?;
    init.norm(&join(prefix, "norm1"), channels)?;
    body(init)?;
    init.norm(&join(prefix, "norm2"), channels)?;
    Ffn { channels }.init(&join(prefix, "ffn"), init)
}

fn residual_pair_macs(n: usize, c: usize, h: usize, w: usize, body: u64) -> u64 {
    2 * norm_macs(n, c, h, w) + body + Ffn { channels: c }.macs(n, h, w)
}

/// Switches shared by the attention blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSwitches {
    pub use_lka: bool,
    pub use_sca: bool,
    pub use_mdcm: bool,
}

impl Default for AttentionSwitches {
    fn default() -> Self {
        Self {
            use_lka: true,
            use_sca: true,
            use_mdcm: true,
        }
    }
}

/// Multi-dilation attention block:
/// `y = x + DAM(MDCM(dw3×3(pw(LN x))))`, `out = y + FFN(LN y)`.
/// With MDCM switched off a single undilated 3×3 depthwise conv stands in.
#[derive(Clone, Debug)]
pub struct Msdab {
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub switches: AttentionSwitches,
}

impl Msdab {
    pub const FINAL_CONVS: [&'static str; 2] = ["dam.fuse", "ffn.project"];

    fn parts(&self) -> (ConvSpec, ConvSpec, Mdcm, Dam) {
        let c = self.channels;
        let dilations = if self.switches.use_mdcm {
            self.dilations.clone()
        } else {
            vec![1]
        };
        (
            ConvSpec::pointwise(c, c),
            ConvSpec::depthwise(c, (3, 3), 1).with_bias(true),
            Mdcm { channels: c, dilations },
            Dam {
                channels: c,
                use_sca: self.switches.use_sca,
                use_lka: self.switches.use_lka,
            },
        )
    }

    pub fn init(&self, prefix: &str, init: &mut ParamInit) -> Result<()> {
        let (pw, dw, mdcm, dam) = self.parts();
        residual_pair_init(prefix, init, self.channels, |init| {
            init.conv(&join(prefix, "pw"), &pw)?;
            init.conv(&join(prefix, "dw"), &dw)?;
            mdcm.init(&join(prefix, "mdcm"), init)?;
            dam.init(&join(prefix, "dam"), init)
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Var> {
        let (pw, dw, mdcm, dam) = self.parts();
        residual_pair(ctx, prefix, x, self.channels, |ctx, h| {
            let h = ctx.conv(&join(prefix, "pw"), h, &pw)?;
            let h = ctx.conv(&join(prefix, "dw"), &h, &dw)?;
            let h = mdcm.forward(ctx, &join(prefix, "mdcm"), &h)?;
            dam.forward(ctx, &join(prefix, "dam"), &h)
        })
    }

    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let (pw, dw, mdcm, dam) = self.parts();
        let body = conv_macs(&pw, n, h, w) + conv_macs(&dw, n, h, w) + mdcm.macs(n, h, w) + dam.macs(n, h, w);
        residual_pair_macs(n, self.channels, h, w, body)
    }
}

/// Large-kernel bottleneck block:
/// `y = x + pw_out(MSCM(dw3×3(pw_in(LN x))))`, `out = y + FFN(LN y)`.
#[derive(Clone, Copy, Debug)]
pub struct Mslkb {
    pub channels: usize,
    pub kernel: usize,
    pub use_square: bool,
    pub use_stripe: bool,
    pub use_sca: bool,
}

impl Mslkb {
    pub const FINAL_CONVS: [&'static str; 2] = ["pw_out", "ffn.project"];

    pub fn new(channels: usize, kernel: usize) -> Self {
        Self {
            channels,
            kernel,
            use_square: true,
            use_stripe: true,
            use_sca: true,
        }
    }

    fn parts(&self) -> (ConvSpec, ConvSpec, Mscm, ConvSpec) {
        let c = self.channels;
        (
            ConvSpec::pointwise(c, c),
            ConvSpec::depthwise(c, (3, 3), 1).with_bias(true),
            Mscm {
                channels: c,
                kernel: self.kernel,
                use_square: self.use_square,
                use_stripe: self.use_stripe,
                use_sca: self.use_sca,
            },
            ConvSpec::pointwise(c, c),
        )
    }

    pub fn init(&self, prefix: &str, init: &mut ParamInit) -> Result<()> {
        let (pw_in, dw, mscm, pw_out) = self.parts();
        residual_pair_init(prefix, init, self.channels, |init| {
            init.conv(&join(prefix, "pw_in"), &pw_in)?;
            init.conv(&join(prefix, "dw"), &dw)?;
            mscm.init(&join(prefix, "mscm"), init)?;
            init.conv(&join(prefix, "pw_out"), &pw_out)
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Var> {
        let (pw_in, dw, mscm, pw_out) = self.parts();
        residual_pair(ctx, prefix, x, self.channels, |ctx, h| {
            let h = ctx.conv(&join(prefix, "pw_in"), h, &pw_in)?;
            let h = ctx.conv(&join(prefix, "dw"), &h, &dw)?;
            let h = mscm.forward(ctx, &join(prefix, "mscm"), &h)?;
            ctx.conv(&join(prefix, "pw_out"), &h, &pw_out)
        })
    }

    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let (pw_in, dw, mscm, pw_out) = self.parts();
        let body =
            conv_macs(&pw_in, n, h, w) + conv_macs(&dw, n, h, w) + mscm.macs(n, h, w) + conv_macs(&pw_out, n, h, w);
        residual_pair_macs(n, self.channels, h, w, body)
    }
}

/// Activation-free block:
/// `y = x + conv3(SCA(SG(dw3×3(conv1 LN x))))`, `out = y + FFN(LN y)`.
#[derive(Clone, Copy, Debug)]
pub struct NafBlock {
    pub channels: usize,
}

impl NafBlock {
    pub const FINAL_CONVS: [&'static str; 2] = ["conv3", "ffn.project"];

    fn parts(&self) -> (ConvSpec, ConvSpec, Sca, ConvSpec) {
        let c = self.channels;
        (
            ConvSpec::pointwise(c, 2 * c),
            ConvSpec::depthwise(2 * c, (3, 3), 1).with_bias(true),
            Sca { channels: c },
            ConvSpec::pointwise(c, c),
        )
    }

    pub fn init(&self, prefix: &str, init: &mut ParamInit) -> Result<()> {
        let (c1, dw, sca, c3) = self.parts();
        residual_pair_init(prefix, init, self.channels, |init| {
            init.conv(&join(prefix, "conv1"), &c1)?;
            init.conv(&join(prefix, "dw"), &dw)?;
            sca.init(&join(prefix, "sca"), init)?;
            init.conv(&join(prefix, "conv3"), &c3)
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, x: &Var) -> Result<Var> {
        let (c1, dw, sca, c3) = self.parts();
        residual_pair(ctx, prefix, x, self.channels, |ctx, h| {
            let h = ctx.conv(&join(prefix, "conv1"), h, &c1)?;
            let h = ctx.conv(&join(prefix, "dw"), &h, &dw)?;
            let h = ctx.tape.simple_gate(&h)?;
            let h = sca.forward(ctx, &join(prefix, "sca"), &h)?;
            ctx.conv(&join(prefix, "conv3"), &h, &c3)
        })
    }

    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let (c1, dw, sca, c3) = self.parts();
        let body = conv_macs(&c1, n, h, w)
            + conv_macs(&dw, n, h, w)
            + numel(n, self.channels, h, w)
            + sca.macs(n, h, w)
            + conv_macs(&c3, n, h, w);
        residual_pair_macs(n, self.channels, h, w, body)
    }
}

/// Skip-connection fusion for decoder level `level` (1..=4): every encoder
/// feature resized to the level's resolution, concatenated, projected to
/// the level's width and refined by a [`NafBlock`].
#[derive(Clone, Copy, Debug)]
pub struct Ffsc {
    pub base_width: usize,
    pub level: usize,
}

impl Ffsc {
    pub fn width(&self) -> usize {
        self.base_width << self.level
    }

    /// Channels after concatenation: C·(2 + 4 + 8 + 16).
    pub fn fused_width(&self) -> usize {
        30 * self.base_width
    }

    fn reduce(&self) -> ConvSpec {
        ConvSpec::pointwise(self.fused_width(), self.width())
    }

    fn check_level(&self) -> Result<()> {
        if !(1..=4).contains(&self.level) {
            return Err(Error::Config(format!("fusion level must be 1..=4, got {}", self.level)));
        }
        Ok(())
    }

    pub fn init(&self, prefix: &str, init: &mut ParamInit) -> Result<()> {
        self.check_level()?;
        init.conv(&join(prefix, "reduce"), &self.reduce())?;
        NafBlock { channels: self.width() }.init(&join(prefix, "naf"), init)
    }

    /// The concatenated, resized encoder features before projection.
    pub fn gather(&self, ctx: &mut Ctx, feats: &[Var]) -> Result<Var> {
        self.check_level()?;
        if feats.len() != 4 {
            return Err(Error::Config(format!(
                "fusion needs 4 encoder features, got {}",
                feats.len()
            )));
        }
        let target = feats[self.level - 1].shape();
        let mut resized = Vec::with_capacity(4);
        for (k, f) in feats.iter().enumerate() {
            let s = f.shape();
            let want = self.base_width << (k + 1);
            if s.c != want || s.n != target.n {
                return Err(Error::Config(format!(
                    "encoder feature {} has shape {s}, expected {} channels and batch {}",
                    k + 1,
                    want,
                    target.n
                )));
            }
            resized.push(ctx.tape.resize(f, target.h, target.w)?);
        }
        Ok(ctx.tape.concat(&resized)?)
    }

    pub fn forward(&self, ctx: &mut Ctx, prefix: &str, feats: &[Var]) -> Result<Var> {
        let cat = self.gather(ctx, feats)?;
        let r = ctx.conv(&join(prefix, "reduce"), &cat, &self.reduce())?;
        NafBlock { channels: self.width() }.forward(ctx, &join(prefix, "naf"), &r)
    }

    /// Multiplies at batch `n` when level 1 features are `h1`×`w1`.
    pub fn macs(&self, n: usize, h1: usize, w1: usize) -> u64 {
        let (h, w) = (h1 >> (self.level - 1), w1 >> (self.level - 1));
        let mut m = 0;
        for k in 1..=4usize {
            if k != self.level {
                m += 6 * numel(n, self.base_width << k, h, w);
            }
        }
        m + conv_macs(&self.reduce(), n, h, w) + NafBlock { channels: self.width() }.macs(n, h, w)
    }
}
