//! Reverse-mode differentiation over [`Grid`] values.
//!
//! A [`Tape`] records every primitive in execution order together with its
//! forward value. [`Tape::backward`] walks the record once in reverse and
//! returns the adjoint of every node that depends on a differentiable leaf.
//! Subgradient convention: kinks (ReLU at 0, |x| at 0, the log guard) take
//! the derivative 0.

use crate::error::{Error, Result};
use crate::grid::{self, ConvGeometry, Grid, ResamplePlan, Shape};

/// Floor applied inside [`Tape::ln_guarded`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Resample(Var, Box<ResamplePlan>),
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulMap(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    LnGuarded(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Gram(Var),
    SumSquares(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Grid,
    requires_grad: bool,
}

/// Deliberate gradient corruption, used only to prove that gradient checks
/// can fail.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fault {
    ScaleKernelGrad(f64),
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    fault: Option<Fault>,
}

/// Adjoints produced by [`Tape::backward`], keyed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Grid>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Grid> {
        self.adjoints.get(var.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `var`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Grid {
        self.get(var).cloned().unwrap_or_else(|| {
            let s = self.shapes[var.0];
            Grid::zeros(s.channels, s.height, s.width)
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the tape can record a fresh forward pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn value(&self, var: Var) -> &Grid {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> Shape {
        self.nodes[var.0].value.shape()
    }

    /// A differentiable input (parameter or pixel array).
    pub fn leaf(&mut self, value: Grid) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Grid) -> Var {
        self.push(Op::Leaf, value, false)
    }

    fn push(&mut self, op: Op, value: Grid, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, op: Op, x: Var, value: Grid) -> Var {
        let rg = self.needs(&[x]);
        self.push(op, value, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    /// `kernels` holds an `out × in × (kh·kw)` grid, `bias` an `out × 1 × 1` grid.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let ks = self.shape(kernels);
        if ks.width != kh * kw {
            return Err(Error::shape(
                "conv2d kernels",
                ks,
                format!("{kh}x{kw} taps"),
            ));
        }
        let geom = ConvGeometry::from_dims(
            self.shape(input),
            ks.channels,
            ks.height,
            kh,
            kw,
            stride,
            padding,
        )?;
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.len() != ks.channels {
                return Err(Error::shape("conv2d bias", bs, format!("{} outputs", ks.channels)));
            }
        }
        let value = grid::conv_forward(
            self.value(input),
            self.value(kernels).as_slice(),
            bias.map(|b| self.value(b).as_slice()),
            &geom,
        );
        let mut deps = vec![input, kernels];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(
            Op::Conv {
                input,
                kernels,
                bias,
                geom,
            },
            value,
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.max(0.0));
        self.unary(Op::Relu(x), x, v)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.unary(Op::LeakyRelu(x, slope), x, v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.unary(Op::Sigmoid(x), x, v)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let v = self.value(x).avg_pool2();
        self.unary(Op::AvgPool2(x), x, v)
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let v = self.value(x).upsample_nearest2();
        self.unary(Op::Upsample2(x), x, v)
    }

    /// Bicubic resampling to an explicit size.
    pub fn resize_bicubic(&mut self, x: Var, out_height: usize, out_width: usize) -> Result<Var> {
        if out_height == 0 || out_width == 0 {
            return Err(Error::InvalidArgument("resample to an empty grid".into()));
        }
        let plan = ResamplePlan::new(self.shape(x), out_height, out_width);
        let v = plan.apply(self.value(x));
        Ok(self.unary(Op::Resample(x, Box::new(plan)), x, v))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = Grid::concat_channels(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Concat(a, b), v, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    /// Multiplies every channel of `a` by the single-channel map `m`.
    pub fn mul_map(&mut self, a: Var, m: Var) -> Result<Var> {
        let (sa, sm) = (self.shape(a), self.shape(m));
        if sm.channels != 1 || sa.height != sm.height || sa.width != sm.width {
            return Err(Error::shape("mul_map", sa, sm));
        }
        let map = self.value(m).as_slice();
        let n = sa.plane();
        let data = self
            .value(a)
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * map[i % n])
            .collect();
        let rg = self.needs(&[a, m]);
        Ok(self.push(Op::MulMap(a, m), Grid::from_parts(sa, data), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).scale(factor);
        self.unary(Op::Scale(x, factor), x, v)
    }

    pub fn offset(&mut self, x: Var, delta: f64) -> Var {
        let v = self.value(x).map(|v| v + delta);
        self.unary(Op::Offset(x), x, v)
    }

    /// `1 − x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.offset(neg, 1.0)
    }

    /// `ln(max(x, 1e-12))`, elementwise.
    pub fn ln_guarded(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.max(LOG_FLOOR).ln());
        self.unary(Op::LnGuarded(x), x, v)
    }

    /// Side of the kink for every ReLU, leaky-ReLU, |·| and log-guard
    /// input, in recording order. Two evaluations with equal patterns lie
    /// in one smooth piece of the recorded function.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match n.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => out.extend(self.value(x).as_slice().iter().map(|&v| v > 0.0)),
                Op::Abs(x) => out.extend(self.value(x).as_slice().iter().map(|&v| v >= 0.0)),
                Op::LnGuarded(x) => out.extend(self.value(x).as_slice().iter().map(|&v| v > LOG_FLOOR)),
                _ => {}
            }
        }
        out
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        self.unary(Op::Abs(x), x, v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Grid::scalar(self.value(x).sum());
        self.unary(Op::Sum(x), x, v)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let g = self.value(x);
        let v = Grid::scalar(g.sum() / g.len() as f64);
        self.unary(Op::Mean(x), x, v)
    }

    /// Channel Gram matrix `G[a][b] = Σ_p x[a,p]·x[b,p]`, stored as `1×C×C`.
    pub fn gram(&mut self, x: Var) -> Var {
        let v = gram_matrix(self.value(x));
        self.unary(Op::Gram(x), x, v)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = Grid::scalar(self.value(x).as_slice().iter().map(|v| v * v).sum());
        self.unary(Op::SumSquares(x), x, v)
    }

    /// Sums scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_all of no terms".into()))?;
        rest.iter().try_fold(*first, |acc, &t| self.add(acc, t))
    }

    /// Exact gradients of the scalar `loss` with respect to every node.
    ///
    /// A tape can be differentiated once; call [`Tape::clear`] and record a
    /// new forward pass before differentiating again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        let ls = self.shape(loss);
        if ls.len() != 1 {
            return Err(Error::NonScalarLoss(ls.to_string()));
        }
        self.consumed = true;
        let mut adj: Vec<Option<Grid>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Grid::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Grid, adj: &mut [Option<Grid>]) {
        let node = &self.nodes[i];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contribution: Grid| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => {
                    for (a, c) in acc.data_mut().iter_mut().zip(contribution.as_slice()) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        let gs = g.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                kernels,
                bias,
                geom,
            } => {
                if wants(*input) {
                    let k = self.value(*kernels).as_slice();
                    send(*input, grid::conv_backward_input(g, k, geom));
                }
                if wants(*kernels) || bias.is_some_and(wants) {
                    let (mut dk, db) = grid::conv_backward_params(g, self.value(*input), geom);
                    if let Some(Fault::ScaleKernelGrad(f)) = self.fault {
                        dk.iter_mut().for_each(|v| *v *= f);
                    }
                    send(*kernels, Grid::from_parts(self.shape(*kernels), dk));
                    if let Some(b) = bias {
                        send(*b, Grid::from_parts(self.shape(*b), db));
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                send(*x, xv.zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 }).unwrap());
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x);
                send(*x, xv.zip_map(g, |v, gv| if v > 0.0 { gv } else { slope * gv }).unwrap());
            }
            Op::Sigmoid(x) => {
                send(*x, node.value.zip_map(g, |s, gv| gv * s * (1.0 - s)).unwrap());
            }
            Op::AvgPool2(x) => send(*x, Grid::avg_pool2_backward(g, self.shape(*x))),
            Op::Upsample2(x) => send(*x, Grid::upsample_nearest2_backward(g)),
            Op::Resample(x, plan) => send(*x, plan.apply_transpose(g)),
            Op::Concat(a, b) => {
                let ca = self.shape(*a).channels;
                let cb = self.shape(*b).channels;
                send(*a, g.slice_channels(0, ca).unwrap());
                send(*b, g.slice_channels(ca, ca + cb).unwrap());
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv).unwrap());
                }
                if wants(*b) {
                    send(*b, g.zip_map(self.value(*a), |gv, av| gv * av).unwrap());
                }
            }
            Op::MulMap(a, m) => {
                let s = self.shape(*a);
                let n = s.plane();
                let mv = self.value(*m).as_slice();
                if wants(*a) {
                    let d = gs.iter().enumerate().map(|(i, &gv)| gv * mv[i % n]).collect();
                    send(*a, Grid::from_parts(s, d));
                }
                if wants(*m) {
                    let av = self.value(*a).as_slice();
                    let mut d = vec![0.0; n];
                    for (i, (&gv, &x)) in gs.iter().zip(av).enumerate() {
                        d[i % n] += gv * x;
                    }
                    send(*m, Grid::from_parts(self.shape(*m), d));
                }
            }
            Op::Scale(x, f) => send(*x, g.scale(*f)),
            Op::Offset(x) => send(*x, g.clone()),
            Op::LnGuarded(x) => {
                let xv = self.value(*x);
                send(*x, xv.zip_map(g, |v, gv| if v > LOG_FLOOR { gv / v } else { 0.0 }).unwrap());
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                send(*x, xv.zip_map(g, |v, gv| {
                    if v > 0.0 {
                        gv
                    } else if v < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                }).unwrap());
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                send(*x, Grid::filled(s.channels, s.height, s.width, gs[0]));
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                send(*x, Grid::filled(s.channels, s.height, s.width, gs[0] / s.len() as f64));
            }
            Op::Gram(x) => {
                let s = self.shape(*x);
                let c = s.channels;
                // dF = (g + gᵀ)·F
                let mut sym = vec![0.0; c * c];
                for a in 0..c {
                    for b in 0..c {
                        sym[a * c + b] = gs[a * c + b] + gs[b * c + a];
                    }
                }
                let mut d = vec![0.0; s.len()];
                grid::gemm(c, c, s.plane(), &sym, false, self.value(*x).as_slice(), false, &mut d, false);
                send(*x, Grid::from_parts(s, d));
            }
            Op::SumSquares(x) => send(*x, self.value(*x).scale(2.0 * gs[0])),
        }
    }
}

/// Channel Gram matrix of a feature grid, as a `1×C×C` grid.
pub fn gram_matrix(features: &Grid) -> Grid {
    let c = features.channels();
    let n = features.shape().plane();
    let f = features.as_slice();
    let mut out = vec![0.0; c * c];
    grid::gemm(c, n, c, f, false, f, true, &mut out, false);
    // exact symmetry regardless of summation order inside the kernel
    for a in 0..c {
        for b in a + 1..c {
            out[b * c + a] = out[a * c + b];
        }
    }
    Grid::from_parts(Shape::new(1, c, c), out)
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `f` at `params`.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-8)`. When
/// `coords` is given only those coordinates are perturbed.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("{} params", params.len()),
            format!("{} gradients", analytic.len()),
        ));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in coords {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p)?;
        p[i] = orig - h;
        let down = f(&p)?;
        p[i] = orig;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if report.checked == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coordinate = i;
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
