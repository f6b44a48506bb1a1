//! Objective terms: Gram texture loss, adversarial, cycle-consistency and
//! their weighted combination. Every term has a plain evaluation and a
//! differentiable tape version.

use crate::autograd::{gram_matrix, Tape, Var, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::featnet::FeaturePyramid;
use crate::grid::Grid;
use crate::matchswap::SwapResult;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_tex: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cyc: 10.0,
            lambda_tex: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_cyc: f64, lambda_tex: f64) -> Result<Self> {
        if !(lambda_cyc >= 0.0 && lambda_tex >= 0.0 && lambda_cyc.is_finite() && lambda_tex.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and ≥ 0 (cyc {lambda_cyc}, tex {lambda_tex})"
            )));
        }
        Ok(LossWeights { lambda_cyc, lambda_tex })
    }
}

/// Per-level texture normalizer `1 / (4·C²·(H·W)²)`.
pub fn level_normalizer(channels: usize, height: usize, width: usize) -> f64 {
    let c = channels as f64;
    let hw = (height * width) as f64;
    1.0 / (4.0 * c * c * hw * hw)
}

/// `Gr(F)_{ab} = Σ_{x,y} F_a(x,y)·F_b(x,y)` as a `1×C×C` grid.
pub fn gram(features: &Grid) -> Grid {
    gram_matrix(features)
}

fn weighted(features: &Grid, map: &Grid) -> Result<Grid> {
    if map.channels() != 1 || map.height() != features.height() || map.width() != features.width() {
        return Err(Error::shape("texture weighting", features.shape(), map.shape()));
    }
    let plane = features.height() * features.width();
    let m = map.as_slice();
    let data = features
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, v)| v * m[i % plane])
        .collect();
    Grid::from_vec(features.channels(), features.height(), features.width(), data)
}

fn check_level(output: &Grid, swap: &SwapResult) -> Result<()> {
    if output.shape() != swap.swapped.shape() {
        return Err(Error::LevelMismatch {
            level: swap.level,
            detail: format!(
                "output features {} vs texture map {}",
                output.shape(),
                swap.swapped.shape()
            ),
        });
    }
    Ok(())
}

fn level_of<'a, T>(levels: &'a [T], swap: &SwapResult) -> Result<&'a T> {
    if swap.level == 0 || swap.level > levels.len() {
        return Err(Error::LevelMismatch {
            level: swap.level,
            detail: format!("pyramid has {} levels", levels.len()),
        });
    }
    Ok(&levels[swap.level - 1])
}

/// `Σ_ℓ λ_ℓ·‖Gr(φ_ℓ ⊙ S_ℓ) − Gr(T_ℓ ⊙ S_ℓ)‖²_F` over the levels in `swaps`.
pub fn texture_loss(output: &FeaturePyramid, swaps: &[SwapResult]) -> Result<f64> {
    let mut total = 0.0;
    for s in swaps {
        let phi = level_of(output.levels(), s)?;
        check_level(phi, s)?;
        let a = gram(&weighted(phi, &s.weight_map)?);
        let b = gram(&weighted(&s.swapped, &s.weight_map)?);
        let d: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
        total += level_normalizer(phi.channels(), phi.height(), phi.width()) * d;
    }
    Ok(total)
}

/// Tape version of [`texture_loss`]; `output_levels` are finest first.
pub fn texture_loss_on_tape(tape: &mut Tape, output_levels: &[Var], swaps: &[SwapResult]) -> Result<Var> {
    let mut terms = Vec::with_capacity(swaps.len());
    for s in swaps {
        let phi = *level_of(output_levels, s)?;
        let shape = tape.shape(phi);
        check_level(tape.value(phi), s)?;
        let target = tape.constant(gram(&weighted(&s.swapped, &s.weight_map)?));
        let m = tape.constant(s.weight_map.clone());
        let w = tape.mul_map(phi, m)?;
        let g = tape.gram(w);
        let d = tape.sub(g, target)?;
        let sq = tape.sum_squares(d);
        terms.push(tape.scale(sq, level_normalizer(shape.channels, shape.height, shape.width)));
    }
    if terms.is_empty() {
        return Ok(tape.constant(Grid::scalar(0.0)));
    }
    tape.add_all(&terms)
}

/// `ln(d_real) + ln(1 − d_fake)` with the log floor applied.
pub fn adversarial_loss(d_real: f64, d_fake: f64) -> f64 {
    d_real.max(LOG_FLOOR).ln() + (1.0 - d_fake).max(LOG_FLOOR).ln()
}

/// Discriminator descent objective, the negated adversarial loss.
pub fn discriminator_loss_on_tape(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let a = tape.ln_guarded(d_real);
    let nf = tape.one_minus(d_fake);
    let b = tape.ln_guarded(nf);
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, -1.0))
}

/// Non-saturating generator term `−ln D(fake)`.
pub fn generator_adversarial_loss(d_fake: f64) -> f64 {
    -d_fake.max(LOG_FLOOR).ln()
}

pub fn generator_adversarial_on_tape(tape: &mut Tape, d_fake: Var) -> Var {
    let l = tape.ln_guarded(d_fake);
    tape.scale(l, -1.0)
}

/// `mean|F(G(x)) − x| + mean|G(F(y)) − y|`.
pub fn cycle_loss(x: &Grid, fgx: &Grid, y: &Grid, gfy: &Grid) -> Result<f64> {
    let term = |a: &Grid, b: &Grid| -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::shape("cycle_loss", a.shape(), b.shape()));
        }
        Ok(a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
    };
    Ok(term(fgx, x)? + term(gfy, y)?)
}

pub fn cycle_loss_on_tape(tape: &mut Tape, x: Var, fgx: Var, y: Var, gfy: Var) -> Result<Var> {
    let d1 = tape.sub(fgx, x)?;
    let a1 = tape.abs(d1);
    let m1 = tape.mean(a1);
    let d2 = tape.sub(gfy, y)?;
    let a2 = tape.abs(d2);
    let m2 = tape.mean(a2);
    tape.add(m1, m2)
}

/// `adv_G + adv_F + λ_cyc·cyc + λ_tex·(tex_G + tex_F)`.
pub fn total_objective(adv_g: f64, adv_f: f64, cyc: f64, tex_g: f64, tex_f: f64, w: &LossWeights) -> f64 {
    adv_g + adv_f + w.lambda_cyc * cyc + w.lambda_tex * (tex_g + tex_f)
}

/// Handles of every scalar term of the generator objective on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub adv_g: Var,
    pub adv_f: Var,
    pub cyc: Var,
    pub tex_g: Var,
    pub tex_f: Var,
}

pub fn total_objective_on_tape(tape: &mut Tape, t: &ObjectiveTerms, w: &LossWeights) -> Result<Var> {
    let cyc = tape.scale(t.cyc, w.lambda_cyc);
    let tex = tape.add(t.tex_g, t.tex_f)?;
    let tex = tape.scale(tex, w.lambda_tex);
    tape.add_all(&[t.adv_g, t.adv_f, cyc, tex])
}
