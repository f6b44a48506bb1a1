//! Cycle-consistent adversarial training of the two generators against two
//! patch discriminators, at toy scale.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::featnet::{build_extractor, config_ints, FeatureExtractor, DEFAULT_CHANNEL_PLAN};
use crate::formats::{atomic_write, write_ntx1, NdArray, Ntx1Map, SeededWeightStream};
use crate::generator::{GeneratorConfig, GeneratorNet};
use crate::grid::Grid;
use crate::losses::{
    cycle_loss_on_tape, discriminator_loss_on_tape, generator_adversarial_on_tape, texture_loss_on_tape,
    total_objective_on_tape, LossWeights, ObjectiveTerms,
};
use crate::matchswap::{swap_pyramid, MatchOptions, ReferencePyramids, SwapResult};
use crate::metrics::{evaluate_pair, format_number};
use crate::nn::{Adam, ConvLayer, LayerVars, Network};
use crate::toy::{Domain, ToyCorpus, ToyDomainSpec};

pub use crate::toy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureMode {
    /// Matching and swapping at every pyramid level.
    Full,
    /// Matching and swapping at the finest level only.
    SingleScale,
    /// No texture maps at all.
    None,
}

impl TextureMode {
    pub fn name(self) -> &'static str {
        match self {
            TextureMode::Full => "full",
            TextureMode::SingleScale => "single_scale_texture",
            TextureMode::None => "no_texture",
        }
    }

    /// Pyramid levels (1-based) that receive texture maps.
    pub fn levels(self, pyramid_levels: usize) -> Vec<usize> {
        match self {
            TextureMode::Full => (1..=pyramid_levels).collect(),
            TextureMode::SingleScale => vec![1],
            TextureMode::None => vec![],
        }
    }
}

impl FromStr for TextureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TextureMode::Full),
            "single" | "single_scale_texture" => Ok(TextureMode::SingleScale),
            "none" | "no_texture" => Ok(TextureMode::None),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?} (expected full, single_scale_texture or no_texture)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_cyc: f64,
    pub lambda_tex: f64,
    pub seed: u64,
    pub mode: TextureMode,
    /// Extractor and generator widths per level, finest first.
    pub channel_plan: Vec<usize>,
    pub disc_channel_plan: Vec<usize>,
    pub image_size: usize,
    pub train_images: usize,
    pub val_pairs: usize,
    /// Opposite-domain references sampled per training image.
    pub refs_per_image: usize,
    pub blur_factor: f64,
    pub patch_size: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 1,
            lr0: 2e-4,
            lr_halving_period: 50,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_cyc: 10.0,
            lambda_tex: 1e-4,
            seed: 0,
            mode: TextureMode::Full,
            channel_plan: DEFAULT_CHANNEL_PLAN.to_vec(),
            disc_channel_plan: vec![16, 32, 64],
            image_size: 32,
            train_images: 64,
            val_pairs: 16,
            refs_per_image: 4,
            blur_factor: 2.0,
            patch_size: 3,
            checkpoint_every: 10,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_num(key, p.trim())).collect()
}

impl TrainConfig {
    /// Sets one `key = value` entry; unknown keys are rejected.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "lr0" => self.lr0 = parse_num(key, v)?,
            "lr_halving_period" => self.lr_halving_period = parse_num(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse_num(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse_num(key, v)?,
            "adam_eps" => self.adam_eps = parse_num(key, v)?,
            "lambda_cyc" => self.lambda_cyc = parse_num(key, v)?,
            "lambda_tex" => self.lambda_tex = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "mode" => self.mode = v.parse()?,
            "channel_plan" => self.channel_plan = parse_list(key, v)?,
            "disc_channel_plan" => self.disc_channel_plan = parse_list(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "train_images" => self.train_images = parse_num(key, v)?,
            "val_pairs" => self.val_pairs = parse_num(key, v)?,
            "refs_per_image" => self.refs_per_image = parse_num(key, v)?,
            "blur_factor" => self.blur_factor = parse_num(key, v)?,
            "patch_size" => self.patch_size = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text with `#` comments over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            c.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.lr_halving_period == 0 || self.checkpoint_every == 0 {
            return bad("batch_size, lr_halving_period and checkpoint_every must be ≥ 1".into());
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be finite and ≥ 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        LossWeights::new(self.lambda_cyc, self.lambda_tex)?;
        if self.channel_plan.is_empty() || self.channel_plan.contains(&0) {
            return bad(format!("invalid channel_plan {:?}", self.channel_plan));
        }
        if self.disc_channel_plan.is_empty() || self.disc_channel_plan.contains(&0) {
            return bad(format!("invalid disc_channel_plan {:?}", self.disc_channel_plan));
        }
        let f = 1 << (self.channel_plan.len() - 1);
        if !self.image_size.is_multiple_of(f) || (self.image_size >> (self.channel_plan.len() - 1)) < self.patch_size {
            return bad(format!(
                "image_size {} must be divisible by {f} and leave room for {}×{} patches at the coarsest level",
                self.image_size, self.patch_size, self.patch_size
            ));
        }
        if self.refs_per_image == 0 || self.refs_per_image > self.train_images {
            return bad(format!(
                "refs_per_image must lie in 1..={}, got {}",
                self.train_images, self.refs_per_image
            ));
        }
        if self.blur_factor < 1.0 || self.patch_size == 0 {
            return bad("blur_factor must be ≥ 1 and patch_size ≥ 1".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_cyc: self.lambda_cyc,
            lambda_tex: self.lambda_tex,
        }
    }

    pub fn corpus_spec(&self) -> ToyDomainSpec {
        ToyDomainSpec {
            image_size: self.image_size,
            train_per_domain: self.train_images,
            val_pairs: self.val_pairs,
            seed: self.seed,
            ..ToyDomainSpec::default()
        }
    }

    pub fn match_options(&self) -> MatchOptions {
        MatchOptions {
            patch_size: self.patch_size,
            ..MatchOptions::default()
        }
    }
}

/// `lr0 / 2^⌊epoch / period⌋` for a 0-based epoch.
pub fn learning_rate(config: &TrainConfig, epoch: usize) -> f64 {
    let halvings = (epoch / config.lr_halving_period).min(1074) as i32;
    config.lr0 * 0.5f64.powi(halvings)
}

/// Independent sub-seed for one consumer of the run seed.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    SeededWeightStream::new(seed ^ tag.wrapping_mul(0xA24B_AED4_963E_E407)).next_u64()
}

/// Patch discriminator: stride-2 3×3 convs with leaky ReLU, a 1×1 conv,
/// sigmoid, then the spatial mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    net: Network,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn seeded(seed: u64, in_channels: usize, widths: &[usize]) -> Result<Self> {
        let mut s = SeededWeightStream::new(seed);
        Self::build(in_channels, widths, |name, out, inp, k, stride, pad| {
            ConvLayer::seeded(name, &mut s, out, inp, k, stride, pad)
        })
    }

    pub fn zeros(in_channels: usize, widths: &[usize]) -> Result<Self> {
        Self::build(in_channels, widths, ConvLayer::zeros)
    }

    fn build(
        in_channels: usize,
        widths: &[usize],
        mut make: impl FnMut(String, usize, usize, usize, usize, usize) -> ConvLayer,
    ) -> Result<Self> {
        if in_channels == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid discriminator widths {widths:?}")));
        }
        let mut prev = in_channels;
        let mut layers: Vec<ConvLayer> = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = make(format!("conv{}", i + 1), w, prev, 3, 2, 1);
                prev = w;
                l
            })
            .collect();
        layers.push(make("score".into(), 1, prev, 1, 1, 0));
        Ok(Discriminator {
            net: Network::new(layers),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<LayerVars> {
        self.net.bind(tape, trainable)
    }

    /// Probability in (0, 1) that `image` is real, as a scalar node.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[LayerVars], image: Var) -> Result<Var> {
        let n = self.net.layers().len();
        let mut h = image;
        for i in 0..n - 1 {
            let c = self.net.conv(tape, vars, i, h)?;
            h = tape.leaky_relu(c, LEAKY_SLOPE);
        }
        let s = self.net.conv(tape, vars, n - 1, h)?;
        let p = tape.sigmoid(s);
        Ok(tape.mean(p))
    }

    pub fn forward(&self, image: &Grid) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let d = self.forward_on_tape(&mut tape, &vars, x)?;
        Ok(tape.value(d).as_slice()[0])
    }

    pub fn export(&self, prefix: &str, map: &mut Ntx1Map) {
        let mut cfg = vec![self.net.layer(0).in_channels() as f64];
        let n = self.net.layers().len();
        cfg.extend(self.net.layers()[..n - 1].iter().map(|l| l.out_channels() as f64));
        map.insert(format!("{prefix}.config"), NdArray::vector(cfg));
        self.net.export(prefix, map);
    }

    pub fn import(prefix: &str, map: &Ntx1Map) -> Result<Self> {
        let key = format!("{prefix}.config");
        let cfg = config_ints(&map.get(&key).ok_or(Error::MissingSection(key))?.data)?;
        let (&inp, widths) = cfg
            .split_first()
            .ok_or_else(|| Error::InvalidArgument(format!("{prefix}.config is empty")))?;
        let mut d = Self::zeros(inp, widths)?;
        d.net.import(prefix, map)?;
        Ok(d)
    }
}

/// Section prefixes in weight files.
pub const EXTRACTOR_PREFIX: &str = "extractor";
pub const GENERATOR_PREFIX: &str = "generator";
pub const INVERSE_PREFIX: &str = "inverse";
pub const DISC_X_PREFIX: &str = "disc_x";
pub const DISC_Y_PREFIX: &str = "disc_y";

/// Every network of the cycle: `g: X→Y`, `f: Y→X`, discriminators on X and Y.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub extractor: FeatureExtractor,
    pub g: GeneratorNet,
    pub f: GeneratorNet,
    pub d_x: Discriminator,
    pub d_y: Discriminator,
}

impl Models {
    pub fn seeded(config: &TrainConfig) -> Result<Self> {
        let plan = &config.channel_plan;
        let s = config.seed;
        Ok(Models {
            extractor: build_extractor(sub_seed(s, 1), plan.len(), plan)?,
            g: GeneratorNet::seeded(sub_seed(s, 2), GeneratorConfig::new(plan, 1))?,
            f: GeneratorNet::seeded(sub_seed(s, 3), GeneratorConfig::new(plan, 1))?,
            d_x: Discriminator::seeded(sub_seed(s, 4), 1, &config.disc_channel_plan)?,
            d_y: Discriminator::seeded(sub_seed(s, 5), 1, &config.disc_channel_plan)?,
        })
    }

    pub fn export(&self) -> Ntx1Map {
        let mut map = Ntx1Map::new();
        self.extractor.export(&mut map);
        self.g.export(GENERATOR_PREFIX, &mut map);
        self.f.export(INVERSE_PREFIX, &mut map);
        self.d_x.export(DISC_X_PREFIX, &mut map);
        self.d_y.export(DISC_Y_PREFIX, &mut map);
        map
    }

    pub fn import(map: &Ntx1Map) -> Result<Self> {
        Ok(Models {
            extractor: FeatureExtractor::import(map)?,
            g: GeneratorNet::import(GENERATOR_PREFIX, map)?,
            f: GeneratorNet::import(INVERSE_PREFIX, map)?,
            d_x: Discriminator::import(DISC_X_PREFIX, map)?,
            d_y: Discriminator::import(DISC_Y_PREFIX, map)?,
        })
    }
}

/// Texture map slots for a generator (index ℓ−1), as tape constants.
pub fn texture_slots(tape: &mut Tape, swaps: &[SwapResult], levels: usize) -> Vec<Option<Var>> {
    let mut slots = vec![None; levels];
    for s in swaps {
        if (1..=levels).contains(&s.level) {
            slots[s.level - 1] = Some(tape.constant(s.swapped.clone()));
        }
    }
    slots
}

/// One training example: an X image, a Y image and their texture swaps
/// (for `x` against Y references, for `y` against X references).
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub x: &'a Grid,
    pub y: &'a Grid,
    pub swaps_x: &'a [SwapResult],
    pub swaps_y: &'a [SwapResult],
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub adv_g: f64,
    pub adv_f: f64,
    pub cyc: f64,
    pub tex_g: f64,
    pub tex_f: f64,
    pub total: f64,
    /// Discriminator objectives (negated adversarial loss).
    pub d_x: f64,
    pub d_y: f64,
}

impl LossReport {
    fn add_scaled(&mut self, o: &LossReport, s: f64) {
        self.adv_g += o.adv_g * s;
        self.adv_f += o.adv_f * s;
        self.cyc += o.cyc * s;
        self.tex_g += o.tex_g * s;
        self.tex_f += o.tex_f * s;
        self.total += o.total * s;
        self.d_x += o.d_x * s;
        self.d_y += o.d_y * s;
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("adv_G", self.adv_g),
            ("adv_F", self.adv_f),
            ("cyc", self.cyc),
            ("tex_G", self.tex_g),
            ("tex_F", self.tex_f),
            ("total", self.total),
            ("D_X", self.d_x),
            ("D_Y", self.d_y),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("training loss term {name}")));
            }
        }
        Ok(())
    }
}

/// Models plus optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub models: Models,
    adam_g: Adam,
    adam_f: Adam,
    adam_dx: Adam,
    adam_dy: Adam,
    steps: u64,
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).as_slice()[0]
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let models = Models::seeded(&config)?;
        let adam = |n: &Network| Adam::new(n.param_count(), config.adam_beta1, config.adam_beta2, config.adam_eps);
        Ok(TrainState {
            adam_g: adam(models.g.network()),
            adam_f: adam(models.f.network()),
            adam_dx: adam(models.d_x.network()),
            adam_dy: adam(models.d_y.network()),
            models,
            config,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One discriminator step on D_X and D_Y, then one generator step on
    /// G and F, each with gradients averaged over `batch`.
    pub fn train_step(&mut self, batch: &[StepInput<'_>], lr: f64) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let inv = 1.0 / batch.len() as f64;
        let mut report = LossReport::default();

        let m = &self.models;
        let mut gdx = vec![0.0; m.d_x.network().param_count()];
        let mut gdy = vec![0.0; m.d_y.network().param_count()];
        for s in batch {
            let fake_y = m.g.generate(s.x, s.swaps_x)?;
            let fake_x = m.f.generate(s.y, s.swaps_y)?;
            let mut tape = Tape::new();
            let vx = m.d_x.bind(&mut tape, true);
            let vy = m.d_y.bind(&mut tape, true);
            let [rx, fx, ry, fy] = [s.x, &fake_x, s.y, &fake_y].map(|g| tape.constant(g.clone()));
            let (drx, dfx) = (m.d_x.forward_on_tape(&mut tape, &vx, rx)?, m.d_x.forward_on_tape(&mut tape, &vx, fx)?);
            let (dry, dfy) = (m.d_y.forward_on_tape(&mut tape, &vy, ry)?, m.d_y.forward_on_tape(&mut tape, &vy, fy)?);
            let lx = discriminator_loss_on_tape(&mut tape, drx, dfx)?;
            let ly = discriminator_loss_on_tape(&mut tape, dry, dfy)?;
            report.d_x += scalar(&tape, lx) * inv;
            report.d_y += scalar(&tape, ly) * inv;
            let both = tape.add(lx, ly)?;
            let grads = tape.backward(both)?;
            accumulate(&mut gdx, &m.d_x.network().flat_grads(&grads, &vx), inv);
            accumulate(&mut gdy, &m.d_y.network().flat_grads(&grads, &vy), inv);
        }
        if !(report.d_x.is_finite() && report.d_y.is_finite()) {
            report.check_finite()?;
        }
        self.adam_dx.step(self.models.d_x.network_mut().param_slices_mut(), &gdx, lr);
        self.adam_dy.step(self.models.d_y.network_mut().param_slices_mut(), &gdy, lr);

        let m = &self.models;
        let weights = self.config.weights();
        let mut gg = vec![0.0; m.g.network().param_count()];
        let mut gf = vec![0.0; m.f.network().param_count()];
        for s in batch {
            let (r, g_grad, f_grad) = generator_objective(m, s, &weights, true)?;
            report.add_scaled(&LossReport { d_x: 0.0, d_y: 0.0, ..r }, inv);
            let (g_grad, f_grad) = (g_grad.unwrap_or_default(), f_grad.unwrap_or_default());
            accumulate(&mut gg, &g_grad, inv);
            accumulate(&mut gf, &f_grad, inv);
        }
        report.check_finite()?;
        self.adam_g.step(self.models.g.network_mut().param_slices_mut(), &gg, lr);
        self.adam_f.step(self.models.f.network_mut().param_slices_mut(), &gf, lr);
        self.steps += 1;
        Ok(report)
    }
}

fn accumulate(acc: &mut [f64], g: &[f64], scale: f64) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += v * scale;
    }
}

type ObjectiveOutput = (LossReport, Option<Vec<f64>>, Option<Vec<f64>>);

/// Generator objective for one example; with `gradients`, also the flat
/// parameter gradients of G and F.
pub fn generator_objective(
    m: &Models,
    s: &StepInput<'_>,
    weights: &LossWeights,
    gradients: bool,
) -> Result<ObjectiveOutput> {
    let mut tape = Tape::new();
    let vars = CycleVars {
        g: m.g.bind(&mut tape, gradients),
        f: m.f.bind(&mut tape, gradients),
        d_x: m.d_x.bind(&mut tape, false),
        d_y: m.d_y.bind(&mut tape, false),
    };
    let (terms, _) = generator_terms_on_tape(&mut tape, m, &vars, s, None)?;
    let total = total_objective_on_tape(&mut tape, &terms, weights)?;
    let report = LossReport {
        adv_g: scalar(&tape, terms.adv_g),
        adv_f: scalar(&tape, terms.adv_f),
        cyc: scalar(&tape, terms.cyc),
        tex_g: scalar(&tape, terms.tex_g),
        tex_f: scalar(&tape, terms.tex_f),
        total: scalar(&tape, total),
        d_x: 0.0,
        d_y: 0.0,
    };
    if !gradients {
        return Ok((report, None, None));
    }
    report.check_finite()?;
    let grads = tape.backward(total)?;
    Ok((
        report,
        Some(m.g.network().flat_grads(&grads, &vars.g)),
        Some(m.f.network().flat_grads(&grads, &vars.f)),
    ))
}

/// Tape bindings of the four trained networks.
#[derive(Debug, Clone)]
pub struct CycleVars {
    pub g: Vec<LayerVars>,
    pub f: Vec<LayerVars>,
    pub d_x: Vec<LayerVars>,
    pub d_y: Vec<LayerVars>,
}

/// Records every generator-side term on `tape`; the extractor enters as a
/// constant. `inputs` optionally supplies the X and Y image nodes (for
/// pixel gradients); otherwise they are constants.
pub fn generator_terms_on_tape(
    tape: &mut Tape,
    m: &Models,
    vars: &CycleVars,
    s: &StepInput<'_>,
    inputs: Option<(Var, Var)>,
) -> Result<(ObjectiveTerms, (Var, Var))> {
    let levels = m.g.levels();
    let (gv, fv, dxv, dyv) = (&vars.g, &vars.f, &vars.d_x, &vars.d_y);
    let ev = m.extractor.bind(tape);
    let (x, y) = inputs.unwrap_or_else(|| (tape.constant(s.x.clone()), tape.constant(s.y.clone())));
    let tx = texture_slots(tape, s.swaps_x, levels);
    let ty = texture_slots(tape, s.swaps_y, levels);
    let none = vec![None; levels];
    let gx = m.g.forward_on_tape(tape, gv, x, &tx)?;
    let fy = m.f.forward_on_tape(tape, fv, y, &ty)?;
    let fgx = m.f.forward_on_tape(tape, fv, gx, &none)?;
    let gfy = m.g.forward_on_tape(tape, gv, fy, &none)?;
    let dg = m.d_y.forward_on_tape(tape, dyv, gx)?;
    let adv_g = generator_adversarial_on_tape(tape, dg);
    let df = m.d_x.forward_on_tape(tape, dxv, fy)?;
    let adv_f = generator_adversarial_on_tape(tape, df);
    let cyc = cycle_loss_on_tape(tape, x, fgx, y, gfy)?;
    let tex = |tape: &mut Tape, out: Var, swaps: &[SwapResult]| -> Result<Var> {
        if swaps.is_empty() {
            return Ok(tape.constant(Grid::scalar(0.0)));
        }
        let phi = m.extractor.extract_on_tape(tape, &ev, out)?;
        texture_loss_on_tape(tape, &phi, swaps)
    };
    let tex_g = tex(tape, gx, s.swaps_x)?;
    let tex_f = tex(tape, fy, s.swaps_y)?;
    Ok((
        ObjectiveTerms {
            adv_g,
            adv_f,
            cyc,
            tex_g,
            tex_f,
        },
        (x, y),
    ))
}

/// Which image a cached texture swap belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImageKey {
    Train(Domain, usize),
    Val(usize),
}

/// Memoized matching and swapping. Matching depends only on the fixed
/// extractor and fixed images, so cached results are exact.
#[derive(Debug)]
pub struct TextureCache {
    extractor: FeatureExtractor,
    levels: Vec<usize>,
    opts: MatchOptions,
    blur_factor: f64,
    refs_per_image: usize,
    seed: u64,
    ref_pyramids: HashMap<(Domain, usize), Arc<ReferencePyramids>>,
    swaps: HashMap<ImageKey, Arc<Vec<SwapResult>>>,
}

impl TextureCache {
    pub fn new(extractor: FeatureExtractor, config: &TrainConfig) -> Self {
        TextureCache {
            levels: config.mode.levels(extractor.levels()),
            extractor,
            opts: config.match_options(),
            blur_factor: config.blur_factor,
            refs_per_image: config.refs_per_image,
            seed: sub_seed(config.seed, 6),
            ref_pyramids: HashMap::new(),
            swaps: HashMap::new(),
        }
    }

    /// The fixed reference sample for `key`, drawn from the `pool_len`
    /// images of the opposite domain.
    pub fn reference_indices(&self, key: ImageKey, pool_len: usize) -> Vec<usize> {
        let tag = match key {
            ImageKey::Train(Domain::X, i) => (i as u64) << 2,
            ImageKey::Train(Domain::Y, i) => ((i as u64) << 2) | 1,
            ImageKey::Val(i) => ((i as u64) << 2) | 2,
        };
        let mut s = SeededWeightStream::new(self.seed ^ tag.wrapping_mul(0x9FB2_1C65_1E98_DF25));
        let mut idx: Vec<usize> = (0..pool_len).collect();
        let n = self.refs_per_image.min(pool_len);
        for i in 0..n {
            let j = i + s.next_below(pool_len - i);
            idx.swap(i, j);
        }
        idx.truncate(n);
        idx
    }

    /// Swaps of `image` against references from `ref_domain`'s pool.
    pub fn swaps(
        &mut self,
        key: ImageKey,
        image: &Grid,
        ref_domain: Domain,
        pool: &[Grid],
    ) -> Result<Arc<Vec<SwapResult>>> {
        if self.levels.is_empty() {
            return Ok(Arc::new(Vec::new()));
        }
        if let Some(s) = self.swaps.get(&key) {
            return Ok(s.clone());
        }
        let refs_idx = self.reference_indices(key, pool.len());
        let mut refs = Vec::with_capacity(refs_idx.len());
        for &r in &refs_idx {
            let entry = match self.ref_pyramids.get(&(ref_domain, r)) {
                Some(p) => p.clone(),
                None => {
                    let p = Arc::new(ReferencePyramids::new(&self.extractor, &pool[r], self.blur_factor)?);
                    self.ref_pyramids.insert((ref_domain, r), p.clone());
                    p
                }
            };
            refs.push(entry);
        }
        let input = self.extractor.extract_pyramid(image)?;
        let borrowed: Vec<&ReferencePyramids> = refs.iter().map(|r| r.as_ref()).collect();
        let result = Arc::new(swap_pyramid(&input, &borrowed, &self.levels, &self.opts)?);
        self.swaps.insert(key, result.clone());
        Ok(result)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossReport,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

pub const TRAIN_CSV_HEADER: &str = "epoch,lr,adv_G,adv_F,cyc,tex_G,tex_F,total,val_psnr,val_ssim";

impl EpochRow {
    pub fn to_csv(&self) -> String {
        let l = &self.losses;
        let mut s = format!("{},", self.epoch);
        for v in [
            self.lr,
            l.adv_g,
            l.adv_f,
            l.cyc,
            l.tex_g,
            l.tex_f,
            l.total,
            self.val_psnr,
            self.val_ssim,
        ] {
            let _ = write!(s, "{},", format_number(v));
        }
        s.pop();
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    pub models: Models,
    pub metrics_csv: PathBuf,
}

/// Mean validation PSNR and SSIM of `G` on the paired validation set.
pub fn validate(models: &Models, corpus: &ToyCorpus, cache: &mut TextureCache) -> Result<(f64, f64)> {
    let (mut p, mut s) = (0.0, 0.0);
    for (i, (x, y)) in corpus.val_x.iter().zip(&corpus.val_y).enumerate() {
        let swaps = cache.swaps(ImageKey::Val(i), x, Domain::Y, &corpus.y_train)?;
        let out = models.g.generate(x, &swaps)?;
        let row = evaluate_pair(format!("val{i}"), &out, y)?;
        p += row.psnr;
        s += row.ssim;
    }
    let n = corpus.val_x.len() as f64;
    Ok((p / n, s / n))
}

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(format!(".write_probe{}", std::process::id()));
    fs::write(&probe, b"").map_err(|e| Error::io(dir, e))?;
    let _ = fs::remove_file(&probe);
    Ok(())
}

/// Optional per-epoch callback, e.g. for progress output.
pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRow);

/// Full training run: checkpoints `epoch_NNNN.ntx1` at start and every
/// `checkpoint_every` epochs, `final.ntx1` at the end, and `metrics.csv`.
pub fn run_training(
    config: &TrainConfig,
    corpus: &ToyCorpus,
    out_dir: &Path,
    mut hook: Option<EpochHook<'_>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    ensure_writable(out_dir)?;
    let mut state = TrainState::new(config.clone())?;
    let mut cache = TextureCache::new(state.models.extractor.clone(), config);
    let metrics_csv = out_dir.join("metrics.csv");
    let mut csv = format!("{TRAIN_CSV_HEADER}\n");
    atomic_write(&metrics_csv, csv.as_bytes())?;
    write_ntx1(&state.models.export(), out_dir.join("epoch_0000.ntx1"))?;

    let (nx, ny) = (corpus.x_train.len(), corpus.y_train.len());
    let per_epoch = nx.max(ny);
    let mut order = SeededWeightStream::new(sub_seed(config.seed, 7));
    let mut rows = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = learning_rate(config, epoch);
        let px = permutation(&mut order, nx);
        let py = permutation(&mut order, ny);
        let mut sum = LossReport::default();
        let mut steps = 0usize;
        for start in (0..per_epoch).step_by(config.batch_size) {
            let end = (start + config.batch_size).min(per_epoch);
            let mut owned = Vec::with_capacity(end - start);
            for i in start..end {
                let (xi, yi) = (px[i % nx], py[i % ny]);
                let sx = cache.swaps(ImageKey::Train(Domain::X, xi), &corpus.x_train[xi], Domain::Y, &corpus.y_train)?;
                let sy = cache.swaps(ImageKey::Train(Domain::Y, yi), &corpus.y_train[yi], Domain::X, &corpus.x_train)?;
                owned.push((xi, yi, sx, sy));
            }
            let batch: Vec<StepInput<'_>> = owned
                .iter()
                .map(|(xi, yi, sx, sy)| StepInput {
                    x: &corpus.x_train[*xi],
                    y: &corpus.y_train[*yi],
                    swaps_x: sx,
                    swaps_y: sy,
                })
                .collect();
            let r = state.train_step(&batch, lr)?;
            sum.add_scaled(&r, 1.0);
            steps += 1;
        }
        let mut mean = LossReport::default();
        mean.add_scaled(&sum, 1.0 / steps as f64);
        let (val_psnr, val_ssim) = validate(&state.models, corpus, &mut cache)?;
        let row = EpochRow {
            epoch,
            lr,
            losses: mean,
            val_psnr,
            val_ssim,
        };
        csv.push_str(&row.to_csv());
        csv.push('\n');
        atomic_write(&metrics_csv, csv.as_bytes())?;
        if (epoch + 1) % config.checkpoint_every == 0 {
            write_ntx1(&state.models.export(), out_dir.join(format!("epoch_{:04}.ntx1", epoch + 1)))?;
        }
        if let Some(h) = hook.as_mut() {
            h(&row);
        }
        rows.push(row);
    }
    if config.epochs > 0 {
        write_ntx1(&state.models.export(), out_dir.join("final.ntx1"))?;
    }
    Ok(TrainOutcome {
        rows,
        models: state.models,
        metrics_csv,
    })
}

fn permutation(s: &mut SeededWeightStream, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, s.next_below(i + 1));
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            channel_plan: vec![4, 8],
            disc_channel_plan: vec![4, 8],
            image_size: 16,
            train_images: 6,
            val_pairs: 2,
            refs_per_image: 2,
            epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_closed_form() {
        let c = TrainConfig::default();
        for e in 0..100 {
            let expect = if e < 50 { 2e-4 } else { 1e-4 };
            assert_eq!(learning_rate(&c, e), expect);
        }
        assert_eq!(learning_rate(&c, 150), 2e-4 / 8.0);
    }

    #[test]
    fn config_parsing() {
        let c = TrainConfig::parse("# comment\nepochs = 3\nmode = no_texture # trailing\nchannel_plan = 4, 8\n\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.mode, TextureMode::None);
        assert_eq!(c.channel_plan, vec![4, 8]);
        assert!(matches!(TrainConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(TrainConfig::parse("epochs = x").is_err());
        assert!(TrainConfig::parse("epochs").is_err());
        assert!(TrainConfig::parse("epochs = 1\nepochs = 2").is_err());
        assert!(TrainConfig::parse("batch_size = 0").is_err());
        assert!(TrainConfig::parse("mode = sometimes").is_err());
        assert_eq!(TrainConfig::parse("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn models_round_trip_through_ntx1() {
        let m = Models::seeded(&small_config(1)).unwrap();
        let bytes = crate::formats::encode_ntx1(&m.export()).unwrap();
        let back = Models::import(&crate::formats::decode_ntx1(&bytes).unwrap()).unwrap();
        assert_eq!(back.g.config(), m.g.config());
        let x = Grid::filled(1, 16, 16, 0.5);
        let a = m.d_x.forward(&x).unwrap();
        assert!((back.d_x.forward(&x).unwrap() - a).abs() < 1e-5);
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn reference_sample_is_fixed_and_distinct() {
        let c = small_config(2);
        let fx = build_extractor(1, 2, &c.channel_plan).unwrap();
        let cache = TextureCache::new(fx, &c);
        let a = cache.reference_indices(ImageKey::Train(Domain::X, 3), 6);
        assert_eq!(a, cache.reference_indices(ImageKey::Train(Domain::X, 3), 6));
        assert_eq!(a.len(), 2);
        assert_ne!(a[0], a[1]);
    }

    fn run_steps(config: &TrainConfig, corpus: &ToyCorpus, n: usize, lr: f64) -> (TrainState, Vec<LossReport>) {
        let mut state = TrainState::new(config.clone()).unwrap();
        let mut cache = TextureCache::new(state.models.extractor.clone(), config);
        let mut out = vec![];
        for i in 0..n {
            let (xi, yi) = (i % corpus.x_train.len(), (i * 5 + 1) % corpus.y_train.len());
            let sx = cache.swaps(ImageKey::Train(Domain::X, xi), &corpus.x_train[xi], Domain::Y, &corpus.y_train).unwrap();
            let sy = cache.swaps(ImageKey::Train(Domain::Y, yi), &corpus.y_train[yi], Domain::X, &corpus.x_train).unwrap();
            let input = StepInput {
                x: &corpus.x_train[xi],
                y: &corpus.y_train[yi],
                swaps_x: &sx,
                swaps_y: &sy,
            };
            out.push(state.train_step(&[input], lr).unwrap());
        }
        (state, out)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let c = small_config(3);
        let corpus = c.corpus_spec().generate().unwrap();
        let before = Models::seeded(&c).unwrap();
        let (state, losses) = run_steps(&c, &corpus, 2, 0.0);
        assert_eq!(state.models, before);
        assert!(losses.iter().all(|l| l.total.is_finite() && l.cyc > 0.0));
        assert!(losses[0].tex_g > 0.0);
    }

    #[test]
    fn ten_steps_lower_the_objective_for_most_seeds() {
        let mut lowered = 0;
        for seed in 0..10 {
            let c = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let corpus = c.corpus_spec().generate().unwrap();
            let (_, l) = run_steps(&c, &corpus, 10, c.lr0);
            lowered += usize::from(l[9].total < l[0].total);
        }
        assert!(lowered >= 8, "only {lowered} of 10 seeds lowered the objective");
    }

    #[test]
    fn identical_runs_identical_losses() {
        let c = small_config(4);
        let corpus = c.corpus_spec().generate().unwrap();
        let (_, a) = run_steps(&c, &corpus, 3, 2e-4);
        let (_, b) = run_steps(&c, &corpus, 3, 2e-4);
        assert_eq!(a, b);
    }

    #[test]
    fn no_texture_mode_has_no_texture_terms() {
        let c = TrainConfig {
            mode: TextureMode::None,
            ..small_config(5)
        };
        let corpus = c.corpus_spec().generate().unwrap();
        let (_, l) = run_steps(&c, &corpus, 1, 2e-4);
        assert_eq!((l[0].tex_g, l[0].tex_f), (0.0, 0.0));
    }

    #[test]
    fn batches_average_gradients() {
        let c = TrainConfig {
            batch_size: 2,
            ..small_config(6)
        };
        let corpus = c.corpus_spec().generate().unwrap();
        let mut state = TrainState::new(c.clone()).unwrap();
        let none: Vec<SwapResult> = vec![];
        let inputs: Vec<StepInput<'_>> = (0..2)
            .map(|i| StepInput {
                x: &corpus.x_train[i],
                y: &corpus.y_train[i],
                swaps_x: &none,
                swaps_y: &none,
            })
            .collect();
        let r = state.train_step(&inputs, 1e-3).unwrap();
        assert!(r.total.is_finite());
        assert_eq!(state.steps(), 1);
        assert!(state.train_step(&[], 1e-3).is_err());
    }

    #[test]
    fn run_writes_outputs_and_ignores_pairs() {
        let c = TrainConfig {
            epochs: 2,
            checkpoint_every: 1,
            ..small_config(7)
        };
        let corpus = c.corpus_spec().generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&c, &corpus, dir.path(), None).unwrap();
        for f in ["epoch_0000.ntx1", "epoch_0001.ntx1", "epoch_0002.ntx1", "final.ntx1", "metrics.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().next().unwrap(), TRAIN_CSV_HEADER);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0.0002,"));

        // replacing the paired ground truth leaves training untouched
        let mut ablated = corpus.clone();
        for g in &mut ablated.val_y {
            *g = Grid::zeros(1, 16, 16);
        }
        let dir2 = tempfile::tempdir().unwrap();
        let out2 = run_training(&c, &ablated, dir2.path(), None).unwrap();
        for (a, b) in out.rows.iter().zip(&out2.rows) {
            assert_eq!(a.losses, b.losses);
        }
        assert_eq!(out.models, out2.models);
    }

    #[test]
    fn zero_epochs_writes_header_and_initial_checkpoint() {
        let c = TrainConfig {
            epochs: 0,
            ..small_config(8)
        };
        let corpus = c.corpus_spec().generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_training(&c, &corpus, dir.path(), None).unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("metrics.csv")).unwrap(),
            format!("{TRAIN_CSV_HEADER}\n")
        );
        assert!(dir.path().join("epoch_0000.ntx1").exists());
        assert!(!dir.path().join("final.ntx1").exists());
    }

    #[test]
    fn unwritable_output_rejected_before_compute() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        let c = small_config(9);
        let corpus = c.corpus_spec().generate().unwrap();
        assert!(matches!(
            run_training(&c, &corpus, &file.join("sub"), None),
            Err(Error::Io { .. })
        ));
    }
}
