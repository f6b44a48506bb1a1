//! The recursive multi-scale fusion generator.
//!
//! An encoder maps the image to a base code ξ at the coarsest pyramid
//! resolution. Stages then run coarsest level first: each concatenates the
//! level's texture map `T_ℓ`, applies a residual block, adds the skip and
//! upsamples to the next finer level (`nearest ×2 → conv3×3 → ReLU`). The
//! finest stage upsamples only in super-resolution mode. A linear 3×3 head
//! produces the image.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::featnet::config_ints;
use crate::formats::{NdArray, Ntx1Map, SeededWeightStream};
use crate::grid::{Grid, Shape};
use crate::matchswap::SwapResult;
use crate::nn::{ConvLayer, LayerVars, Network};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Feature widths per level, finest first; must equal the extractor's.
    pub channel_plan: Vec<usize>,
    /// 1 for same-size translation, 2 for super-resolution.
    pub scale_factor: usize,
}

impl GeneratorConfig {
    pub fn new(channel_plan: &[usize], scale_factor: usize) -> Self {
        GeneratorConfig {
            in_channels: 1,
            out_channels: 1,
            channel_plan: channel_plan.to_vec(),
            scale_factor,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("generator channel counts must be ≥ 1".into()));
        }
        if self.channel_plan.is_empty() || self.channel_plan.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid generator channel plan {:?}",
                self.channel_plan
            )));
        }
        if !matches!(self.scale_factor, 1 | 2) {
            return Err(Error::InvalidArgument(format!(
                "scale factor must be 1 or 2, got {}",
                self.scale_factor
            )));
        }
        Ok(())
    }

    fn to_values(&self) -> Vec<f64> {
        let mut v = vec![
            self.in_channels as f64,
            self.out_channels as f64,
            self.scale_factor as f64,
        ];
        v.extend(self.channel_plan.iter().map(|&c| c as f64));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNet {
    config: GeneratorConfig,
    net: Network,
    // layer indices
    encoder: Vec<usize>,
    /// Per level (index ℓ−1): residual convs and optional upsample conv.
    stages: Vec<StageLayers>,
    head: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct StageLayers {
    res1: usize,
    res2: usize,
    up: Option<usize>,
}

impl GeneratorNet {
    pub fn seeded(seed: u64, config: GeneratorConfig) -> Result<Self> {
        let mut stream = SeededWeightStream::new(seed);
        Self::build(config, |name, out, inp, stride| {
            ConvLayer::seeded(name, &mut stream, out, inp, 3, stride, 1)
        })
    }

    pub fn zeros(config: GeneratorConfig) -> Result<Self> {
        Self::build(config, |name, out, inp, stride| ConvLayer::zeros(name, out, inp, 3, stride, 1))
    }

    fn build(
        config: GeneratorConfig,
        mut make: impl FnMut(String, usize, usize, usize) -> ConvLayer,
    ) -> Result<Self> {
        config.validate()?;
        let plan = &config.channel_plan;
        let levels = plan.len();
        let mut layers = Vec::new();
        let mut encoder = Vec::new();
        if levels == 1 {
            encoder.push(layers.len());
            layers.push(make("enc1".into(), plan[0], config.in_channels, 1));
        } else {
            let mut prev = config.in_channels;
            for (i, &c) in plan.iter().enumerate().skip(1) {
                encoder.push(layers.len());
                layers.push(make(format!("enc{i}"), c, prev, 2));
                prev = c;
            }
        }
        let mut stages = vec![
            StageLayers {
                res1: 0,
                res2: 0,
                up: None
            };
            levels
        ];
        for l in (1..=levels).rev() {
            let c = plan[l - 1];
            let res1 = layers.len();
            layers.push(make(format!("stage{l}.res1"), c, 2 * c, 1));
            let res2 = layers.len();
            layers.push(make(format!("stage{l}.res2"), c, c, 1));
            let up = if l > 1 || config.scale_factor == 2 {
                let next = if l > 1 { plan[l - 2] } else { c };
                layers.push(make(format!("stage{l}.up"), next, c, 1));
                Some(layers.len() - 1)
            } else {
                None
            };
            stages[l - 1] = StageLayers { res1, res2, up };
        }
        let head = layers.len();
        layers.push(make("head".into(), config.out_channels, plan[0], 1));
        Ok(GeneratorNet {
            config,
            net: Network::new(layers),
            encoder,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn levels(&self) -> usize {
        self.config.channel_plan.len()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Expected `T_ℓ` shapes (finest first) for an input of `height × width`.
    pub fn texture_shapes(&self, height: usize, width: usize) -> Vec<Shape> {
        self.config
            .channel_plan
            .iter()
            .enumerate()
            .map(|(i, &c)| Shape::new(c, height >> i, width >> i))
            .collect()
    }

    /// Output size for an input of `height × width`.
    pub fn output_shape(&self, height: usize, width: usize) -> Shape {
        let s = self.config.scale_factor;
        Shape::new(self.config.out_channels, height * s, width * s)
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.channels != self.config.in_channels {
            return Err(Error::shape(
                "generate",
                format!("input {shape}"),
                format!("generator expecting {} channels", self.config.in_channels),
            ));
        }
        let f = 1usize << (self.levels() - 1);
        if !shape.height.is_multiple_of(f) || !shape.width.is_multiple_of(f) {
            return Err(Error::InvalidArgument(format!(
                "input {shape} not divisible by {f} for a {}-level generator",
                self.levels()
            )));
        }
        Ok(())
    }

    /// Translation using per-level swaps. Levels without a swap use a zero
    /// texture map.
    pub fn generate(&self, input: &Grid, swaps: &[SwapResult]) -> Result<Grid> {
        let mut textures: Vec<Option<&Grid>> = vec![None; self.levels()];
        for s in swaps {
            if s.level == 0 || s.level > self.levels() {
                return Err(Error::LevelMismatch {
                    level: s.level,
                    detail: format!("generator has {} levels", self.levels()),
                });
            }
            if textures[s.level - 1].replace(&s.swapped).is_some() {
                return Err(Error::LevelMismatch {
                    level: s.level,
                    detail: "more than one texture map supplied".into(),
                });
            }
        }
        self.generate_with_textures(input, &textures)
    }

    pub fn generate_without_texture(&self, input: &Grid) -> Result<Grid> {
        self.generate_with_textures(input, &vec![None; self.levels()])
    }

    /// Translation with explicit texture maps indexed by level − 1.
    pub fn generate_with_textures(&self, input: &Grid, textures: &[Option<&Grid>]) -> Result<Grid> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let t: Vec<Option<Var>> = textures
            .iter()
            .map(|t| t.map(|g| tape.constant(g.clone())))
            .collect();
        let out = self.forward_on_tape(&mut tape, &vars, x, &t)?;
        Ok(tape.value(out).clone())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<LayerVars> {
        self.net.bind(tape, trainable)
    }

    /// Differentiable forward pass. `textures[ℓ−1] = None` stands for a zero map.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[LayerVars],
        input: Var,
        textures: &[Option<Var>],
    ) -> Result<Var> {
        self.check_input(tape.shape(input))?;
        if textures.len() != self.levels() {
            return Err(Error::InvalidArgument(format!(
                "{} texture slots for a {}-level generator",
                textures.len(),
                self.levels()
            )));
        }
        let mut xi = input;
        for &i in &self.encoder {
            let y = self.net.conv(tape, vars, i, xi)?;
            xi = tape.relu(y);
        }
        for l in (1..=self.levels()).rev() {
            let st = self.stages[l - 1];
            let s = tape.shape(xi);
            let t = match textures[l - 1] {
                Some(t) => {
                    if tape.shape(t) != s {
                        return Err(Error::LevelMismatch {
                            level: l,
                            detail: format!("texture map {} but stage expects {s}", tape.shape(t)),
                        });
                    }
                    t
                }
                None => tape.constant(Grid::zeros(s.channels, s.height, s.width)),
            };
            let cat = tape.concat_channels(xi, t)?;
            let r = self.net.conv(tape, vars, st.res1, cat)?;
            let r = tape.relu(r);
            let r = self.net.conv(tape, vars, st.res2, r)?;
            xi = tape.add(r, xi)?;
            if let Some(up) = st.up {
                let u = tape.upsample_nearest2(xi);
                let u = self.net.conv(tape, vars, up, u)?;
                xi = tape.relu(u);
            }
        }
        self.net.conv(tape, vars, self.head, xi)
    }

    /// Writes the parameters plus a `<prefix>.config` section.
    pub fn export(&self, prefix: &str, map: &mut Ntx1Map) {
        map.insert(format!("{prefix}.config"), NdArray::vector(self.config.to_values()));
        self.net.export(prefix, map);
    }

    pub fn import(prefix: &str, map: &Ntx1Map) -> Result<Self> {
        let key = format!("{prefix}.config");
        let cfg = map.get(&key).ok_or(Error::MissingSection(key))?;
        let ints = config_ints(&cfg.data)?;
        if ints.len() < 4 {
            return Err(Error::InvalidArgument(format!("{prefix}.config is too short")));
        }
        let config = GeneratorConfig {
            in_channels: ints[0],
            out_channels: ints[1],
            scale_factor: ints[2],
            channel_plan: ints[3..].to_vec(),
        };
        let mut g = Self::zeros(config)?;
        g.net.import(prefix, map)?;
        Ok(g)
    }
}
