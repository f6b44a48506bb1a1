//! Finite-difference verification of every training loss term on a small
//! seeded instance.
//!
//! All four trained networks and both input images are packed into one flat
//! coordinate vector; each term is differentiated once on the tape and then
//! compared against central differences at a seeded coordinate sample that
//! touches every parameter tensor and both images. Coordinates whose
//! perturbation crosses a ReLU or |·| kink are replaced, since central
//! differences are meaningless there.

use std::fmt::Write as _;

use crate::autograd::{Fault, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::formats::SeededWeightStream;
use crate::grid::{Grid, Shape};
use crate::losses::{discriminator_loss_on_tape, total_objective_on_tape, LossWeights};
use crate::matchswap::{swap_pyramid, MatchOptions, ReferencePyramids, SwapResult};
use crate::nn::Network;
use crate::trainer::{generator_terms_on_tape, sub_seed, texture_slots, CycleVars, Models, StepInput, TrainConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const MAX_SIZE: usize = 16;
pub const DEFAULT_SIZE: usize = 8;
/// Coordinates sampled from each tensor before topping up to [`MIN_COORDS`].
const PER_TENSOR: usize = 4;
const MIN_COORDS: usize = 200;

/// Names of the checked terms, in report order.
pub const TERMS: [&str; 8] = ["tex_G", "tex_F", "adv_G", "adv_F", "disc_X", "disc_Y", "cyc", "total"];

#[derive(Debug, Clone, PartialEq)]
pub struct TermCheck {
    pub term: &'static str,
    pub report: GradCheckReport,
    /// Human-readable location of the worst coordinate.
    pub worst: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOutcome {
    pub size: usize,
    pub seed: u64,
    pub coordinates: usize,
    /// Candidates rejected because their perturbation crossed a kink.
    pub skipped: usize,
    /// Tensors none of whose coordinates could be perturbed without
    /// crossing a kink; their gradients are unverified at this instance.
    pub blocked: Vec<String>,
    pub terms: Vec<TermCheck>,
}

impl GradCheckOutcome {
    pub fn first_failure(&self) -> Option<&TermCheck> {
        self.terms.iter().find(|t| t.report.max_rel_error.is_nan() || t.report.max_rel_error >= TOLERANCE)
    }

    pub fn passed(&self) -> bool {
        self.first_failure().is_none()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# gradcheck size={} seed={} h={STEP:e} tolerance={TOLERANCE:e} coordinates={} skipped_at_kinks={}\n",
            self.size, self.seed, self.coordinates, self.skipped
        );
        s.push_str("term,max_rel_error,worst,analytic,numeric,status\n");
        for t in &self.terms {
            let ok = t.report.max_rel_error < TOLERANCE;
            let _ = writeln!(
                s,
                "{},{:.3e},{},{:.6e},{:.6e},{}",
                t.term,
                t.report.max_rel_error,
                t.worst,
                t.report.analytic,
                t.report.numeric,
                if ok { "PASS" } else { "FAIL" }
            );
        }
        if !self.blocked.is_empty() {
            let _ = writeln!(s, "# unverified (every coordinate straddles a kink): {}", self.blocked.join(" "));
        }
        let _ = writeln!(s, "result,{}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }

    /// `Err(Error::GradCheck)` naming the first failing term.
    pub fn into_result(self) -> Result<Self> {
        match self.first_failure() {
            None => Ok(self),
            Some(t) => Err(Error::GradCheck {
                term: t.term.to_string(),
                error: t.report.max_rel_error,
                tolerance: TOLERANCE,
            }),
        }
    }
}

/// The seeded toy instance: tiny models, two images and fixed texture swaps.
#[derive(Debug, Clone)]
pub struct Instance {
    pub models: Models,
    pub x: Grid,
    pub y: Grid,
    pub swaps_x: Vec<SwapResult>,
    pub swaps_y: Vec<SwapResult>,
    pub weights: LossWeights,
}

impl Instance {
    pub fn seeded(size: usize, seed: u64) -> Result<Self> {
        if !(DEFAULT_SIZE..=MAX_SIZE).contains(&size) || !size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "gradcheck size must be even and within {DEFAULT_SIZE}..={MAX_SIZE}, got {size}"
            )));
        }
        let config = TrainConfig {
            seed,
            channel_plan: vec![4, 8],
            disc_channel_plan: vec![4, 8],
            image_size: size,
            ..TrainConfig::default()
        };
        let mut models = Models::seeded(&config)?;
        // Nonzero biases so that bias gradients are exercised away from zero.
        let mut bs = SeededWeightStream::new(sub_seed(seed, 8));
        let nets: [&mut Network; 4] = [
            models.g.network_mut(),
            models.f.network_mut(),
            models.d_x.network_mut(),
            models.d_y.network_mut(),
        ];
        for net in nets {
            for l in net.layers_mut() {
                for b in &mut l.bias {
                    *b = 0.05 * bs.next_sample();
                }
            }
        }
        let mut s = SeededWeightStream::new(sub_seed(seed, 9));
        let mut image = || Grid::from_fn(1, size, size, |_, _, _| 0.1 + 0.8 * s.next_unit());
        let (x, y, ref_x, ref_y) = (image(), image(), image(), image());
        let opts = MatchOptions::default();
        let levels: Vec<usize> = (1..=models.extractor.levels()).collect();
        let swaps = |input: &Grid, reference: &Grid| -> Result<Vec<SwapResult>> {
            let pyr = models.extractor.extract_pyramid(input)?;
            let r = ReferencePyramids::new(&models.extractor, reference, config.blur_factor)?;
            swap_pyramid(&pyr, &[&r], &levels, &opts)
        };
        let swaps_x = swaps(&x, &ref_y)?;
        let swaps_y = swaps(&y, &ref_x)?;
        Ok(Instance {
            weights: config.weights(),
            models,
            x,
            y,
            swaps_x,
            swaps_y,
        })
    }

    fn networks(&self) -> [(&'static str, &Network); 4] {
        [
            ("generator", self.models.g.network()),
            ("inverse", self.models.f.network()),
            ("disc_x", self.models.d_x.network()),
            ("disc_y", self.models.d_y.network()),
        ]
    }

    /// Every coordinate: G, F, D_X, D_Y parameters, then X and Y pixels.
    pub fn flat(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for (_, n) in self.networks() {
            p.extend(n.flat_params());
        }
        p.extend_from_slice(self.x.as_slice());
        p.extend_from_slice(self.y.as_slice());
        p
    }

    /// Named contiguous ranges of [`Instance::flat`].
    pub fn tensors(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut off = 0;
        let mut push = |name: String, len: usize| {
            out.push((name, off..off + len));
            off += len;
        };
        for (prefix, n) in self.networks() {
            for l in n.layers() {
                push(format!("{prefix}.{}.weight", l.name), l.kernels.as_slice().len());
                push(format!("{prefix}.{}.bias", l.name), l.bias.len());
            }
        }
        push("x".into(), self.x.len());
        push("y".into(), self.y.len());
        out
    }

    fn with_flat(&self, p: &[f64]) -> Result<Instance> {
        let mut inst = self.clone();
        let mut off = 0;
        let nets: [&mut Network; 4] = [
            inst.models.g.network_mut(),
            inst.models.f.network_mut(),
            inst.models.d_x.network_mut(),
            inst.models.d_y.network_mut(),
        ];
        for net in nets {
            let n = net.param_count();
            net.set_flat_params(&p[off..off + n])?;
            off += n;
        }
        let img = |off: usize, s: Shape| Grid::from_parts(s, p[off..off + s.len()].to_vec());
        inst.x = img(off, self.x.shape());
        off += self.x.len();
        inst.y = img(off, self.y.shape());
        Ok(inst)
    }

    /// Records all terms with every network and both images as leaves.
    fn record(&self, tape: &mut Tape) -> Result<(CycleVars, (Var, Var), [Var; 8])> {
        let m = &self.models;
        let vars = CycleVars {
            g: m.g.bind(tape, true),
            f: m.f.bind(tape, true),
            d_x: m.d_x.bind(tape, true),
            d_y: m.d_y.bind(tape, true),
        };
        let x = tape.leaf(self.x.clone());
        let y = tape.leaf(self.y.clone());
        let step = StepInput {
            x: &self.x,
            y: &self.y,
            swaps_x: &self.swaps_x,
            swaps_y: &self.swaps_y,
        };
        let (terms, _) = generator_terms_on_tape(tape, m, &vars, &step, Some((x, y)))?;
        let total = total_objective_on_tape(tape, &terms, &self.weights)?;
        let levels = m.g.levels();
        let ty = texture_slots(tape, &self.swaps_y, levels);
        let tx = texture_slots(tape, &self.swaps_x, levels);
        let fy = m.f.forward_on_tape(tape, &vars.f, y, &ty)?;
        let gx = m.g.forward_on_tape(tape, &vars.g, x, &tx)?;
        let (rx, fx) = (
            m.d_x.forward_on_tape(tape, &vars.d_x, x)?,
            m.d_x.forward_on_tape(tape, &vars.d_x, fy)?,
        );
        let (ry, fk) = (
            m.d_y.forward_on_tape(tape, &vars.d_y, y)?,
            m.d_y.forward_on_tape(tape, &vars.d_y, gx)?,
        );
        let disc_x = discriminator_loss_on_tape(tape, rx, fx)?;
        let disc_y = discriminator_loss_on_tape(tape, ry, fk)?;
        Ok((
            vars,
            (x, y),
            [terms.tex_g, terms.tex_f, terms.adv_g, terms.adv_f, disc_x, disc_y, terms.cyc, total],
        ))
    }

    /// Term values and the kink pattern of the recorded graph.
    fn evaluate(&self) -> Result<([f64; 8], Vec<bool>)> {
        let mut tape = Tape::new();
        let (_, _, terms) = self.record(&mut tape)?;
        Ok((terms.map(|v| tape.value(v).as_slice()[0]), tape.kink_pattern()))
    }

    /// Analytic gradient of term `t` over [`Instance::flat`] coordinates.
    fn analytic(&self, t: usize, fault: Option<Fault>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        tape.inject_fault(fault);
        let (vars, (x, y), terms) = self.record(&mut tape)?;
        let grads = tape.backward(terms[t])?;
        let mut out = Vec::new();
        out.extend(self.models.g.network().flat_grads(&grads, &vars.g));
        out.extend(self.models.f.network().flat_grads(&grads, &vars.f));
        out.extend(self.models.d_x.network().flat_grads(&grads, &vars.d_x));
        out.extend(self.models.d_y.network().flat_grads(&grads, &vars.d_y));
        out.extend_from_slice(grads.wrt(x).as_slice());
        out.extend_from_slice(grads.wrt(y).as_slice());
        Ok(out)
    }

    /// Seeded candidate order: per tensor, a shuffled list of its
    /// coordinates; then a shuffled list of all coordinates.
    pub fn candidates(&self, seed: u64) -> (Vec<Vec<usize>>, Vec<usize>) {
        let mut s = SeededWeightStream::new(sub_seed(seed, 10));
        let mut shuffled = |mut v: Vec<usize>| {
            for i in (1..v.len()).rev() {
                let j = s.next_below(i + 1);
                v.swap(i, j);
            }
            v
        };
        let tensors = self.tensors();
        let per_tensor = tensors.iter().map(|(_, r)| shuffled(r.clone().collect())).collect();
        let total = tensors.last().map_or(0, |t| t.1.end);
        (per_tensor, shuffled((0..total).collect()))
    }

    fn locate(&self, i: usize) -> String {
        self.tensors()
            .into_iter()
            .find(|(_, r)| r.contains(&i))
            .map_or_else(|| format!("#{i}"), |(n, r)| format!("{n}[{}]", i - r.start))
    }
}

/// Relative error with a denominator floored at the round-off noise of a
/// central difference (`ε·|f| / h`) divided by the tolerance, so noise alone
/// cannot fail a coordinate whose gradient is below what `h` resolves.
fn relative_error(analytic: f64, numeric: f64, up: f64, down: f64) -> f64 {
    let noise = NOISE_SAFETY * f64::EPSILON * up.abs().max(down.abs()) / STEP;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(noise / TOLERANCE).max(1e-300)
}

/// Round-off of a long floating-point reduction, in units of `ε·|f|`.
const NOISE_SAFETY: f64 = 10.0;

/// Runs the full check. `fault` corrupts the analytic backward pass and
/// exists only as a negative control.
///
/// Coordinates whose `±h` perturbation moves any ReLU, |·| or log-guard
/// input across its kink are skipped: central differences are not defined
/// across a kink, and the replacement coordinate is drawn from the same
/// tensor.
pub fn run(size: usize, seed: u64, fault: Option<Fault>) -> Result<GradCheckOutcome> {
    let inst = Instance::seeded(size, seed)?;
    let (values, pattern) = inst.evaluate()?;
    for (name, v) in TERMS.iter().zip(values) {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("gradcheck term {name}")));
        }
    }
    let analytic = (0..TERMS.len())
        .map(|t| inst.analytic(t, fault))
        .collect::<Result<Vec<_>>>()?;
    let params = inst.flat();
    let mut reports = vec![
        GradCheckReport {
            max_rel_error: 0.0,
            worst_coordinate: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        };
        TERMS.len()
    ];
    let mut checked = vec![false; params.len()];
    let mut skipped = 0;
    let mut p = params.clone();
    // Ok(true) when coordinate i was checked, Ok(false) when it straddles a kink.
    let mut check = |i: usize, skipped: &mut usize| -> Result<bool> {
        if checked[i] {
            return Ok(false);
        }
        p[i] = params[i] + STEP;
        let (up, pu) = inst.with_flat(&p)?.evaluate()?;
        p[i] = params[i] - STEP;
        let (down, pd) = inst.with_flat(&p)?.evaluate()?;
        p[i] = params[i];
        if pu != pattern || pd != pattern {
            *skipped += 1;
            return Ok(false);
        }
        checked[i] = true;
        for (t, r) in reports.iter_mut().enumerate() {
            if !(up[t].is_finite() && down[t].is_finite()) {
                return Err(Error::NonFinite(format!("gradcheck term {} at coordinate {i}", TERMS[t])));
            }
            let numeric = (up[t] - down[t]) / (2.0 * STEP);
            let a = analytic[t][i];
            let err = relative_error(a, numeric, up[t], down[t]);
            if r.checked == 0 || err > r.max_rel_error {
                *r = GradCheckReport {
                    max_rel_error: err,
                    worst_coordinate: i,
                    analytic: a,
                    numeric,
                    checked: r.checked,
                };
            }
            r.checked += 1;
        }
        Ok(true)
    };
    let (per_tensor, all) = inst.candidates(seed);
    let mut count = 0;
    let mut blocked = vec![];
    for cands in &per_tensor {
        let mut valid = 0;
        for &i in cands {
            if valid == PER_TENSOR {
                break;
            }
            if check(i, &mut skipped)? {
                valid += 1;
                count += 1;
            }
        }
        if valid == 0 {
            blocked.push(tensor_name(&inst.locate(cands[0])));
        }
    }
    for &i in &all {
        if count >= MIN_COORDS {
            break;
        }
        if check(i, &mut skipped)? {
            count += 1;
        }
    }
    let terms = TERMS
        .iter()
        .zip(reports)
        .map(|(&term, report)| TermCheck {
            term,
            worst: inst.locate(report.worst_coordinate),
            report,
        })
        .collect();
    Ok(GradCheckOutcome {
        size,
        seed,
        coordinates: count,
        skipped,
        blocked,
        terms,
    })
}

fn tensor_name(location: &str) -> String {
    location.split('[').next().unwrap_or(location).to_string()
}
