//! Convolution layers, the layered parameter container shared by every
//! model, and the ADAM optimizer.

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::formats::{NdArray, Ntx1Map, SeededWeightStream};
use crate::grid::{Grid, KernelBank, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub kernels: KernelBank,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    /// He-scaled kernels drawn from `stream`, zero bias.
    pub fn seeded(
        name: impl Into<String>,
        stream: &mut SeededWeightStream,
        out_channels: usize,
        in_channels: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * k * k;
        let data = stream.he_weights(out_channels * fan_in, fan_in);
        ConvLayer {
            name: name.into(),
            kernels: KernelBank::new(out_channels, in_channels, k, k, data)
                .expect("layer dimensions are positive"),
            bias: vec![0.0; out_channels],
            stride,
            padding,
        }
    }

    pub fn zeros(
        name: impl Into<String>,
        out_channels: usize,
        in_channels: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvLayer {
            name: name.into(),
            kernels: KernelBank::zeros(out_channels, in_channels, k, k),
            bias: vec![0.0; out_channels],
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Grid) -> Result<Grid> {
        x.conv2d(&self.kernels, &self.bias, self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.in_channels
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }

    pub fn zero(&mut self) {
        self.kernels.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        self.bias.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Tape handles of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub kernels: Var,
    pub bias: Var,
}

/// Ordered, named convolution layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Network {
    layers: Vec<ConvLayer>,
}

impl Network {
    pub fn new(layers: Vec<ConvLayer>) -> Self {
        Network { layers }
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn layer(&self, i: usize) -> &ConvLayer {
        &self.layers[i]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::param_count).sum()
    }

    /// Places every parameter on `tape`; `trainable = false` records them as
    /// constants so no parameter gradients are computed.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| {
                let k = l.kernels.to_grid();
                let b = Grid::from_parts(Shape::new(l.bias.len(), 1, 1), l.bias.clone());
                if trainable {
                    LayerVars {
                        kernels: tape.leaf(k),
                        bias: tape.leaf(b),
                    }
                } else {
                    LayerVars {
                        kernels: tape.constant(k),
                        bias: tape.constant(b),
                    }
                }
            })
            .collect()
    }

    /// Applies layer `i` on the tape.
    pub fn conv(&self, tape: &mut Tape, vars: &[LayerVars], i: usize, x: Var) -> Result<Var> {
        let l = &self.layers[i];
        tape.conv2d(
            x,
            vars[i].kernels,
            Some(vars[i].bias),
            l.kernels.kh,
            l.kernels.kw,
            l.stride,
            l.padding,
        )
    }

    /// Parameter gradients flattened in [`Network::flat_params`] order.
    pub fn flat_grads(&self, grads: &Gradients, vars: &[LayerVars]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for v in vars {
            out.extend_from_slice(grads.wrt(v.kernels).as_slice());
            out.extend_from_slice(grads.wrt(v.bias).as_slice());
        }
        out
    }

    /// Every parameter, layer by layer, kernels before bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.kernels.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                "set_flat_params",
                format!("{} params", self.param_count()),
                format!("{} values", flat.len()),
            ));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let k = l.kernels.as_mut_slice();
            k.copy_from_slice(&flat[off..off + k.len()]);
            off += k.len();
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Mutable parameter slices in [`Network::flat_params`] order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.kernels.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// Writes `<prefix>.<layer>.weight` and `<prefix>.<layer>.bias` sections.
    pub fn export(&self, prefix: &str, map: &mut Ntx1Map) {
        for l in &self.layers {
            map.insert(
                format!("{prefix}.{}.weight", l.name),
                NdArray::from_kernels(&l.kernels),
            );
            map.insert(format!("{prefix}.{}.bias", l.name), NdArray::vector(l.bias.clone()));
        }
    }

    /// Overwrites this network's parameters from `map`; every layer must be
    /// present with the same shape.
    pub fn import(&mut self, prefix: &str, map: &Ntx1Map) -> Result<()> {
        for l in &mut self.layers {
            let wk = format!("{prefix}.{}.weight", l.name);
            let bk = format!("{prefix}.{}.bias", l.name);
            let w = map.get(&wk).ok_or_else(|| Error::MissingSection(wk.clone()))?;
            let b = map.get(&bk).ok_or_else(|| Error::MissingSection(bk.clone()))?;
            let kernels = w.to_kernels()?;
            if kernels.dims() != l.kernels.dims() {
                return Err(Error::shape(
                    "weight import",
                    format!("{wk} {:?}", l.kernels.dims()),
                    format!("{:?}", kernels.dims()),
                ));
            }
            if b.data.len() != l.bias.len() {
                return Err(Error::shape(
                    "weight import",
                    format!("{bk} [{}]", l.bias.len()),
                    format!("{:?}", b.dims),
                ));
            }
            l.kernels = kernels;
            l.bias = b.data.clone();
        }
        Ok(())
    }
}

/// ADAM with bias correction, over a network's flattened parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One descent step on `params` given their gradient.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut i = 0;
        for slice in params {
            for p in slice.iter_mut() {
                let g = grads[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                i += 1;
            }
        }
        debug_assert_eq!(i, grads.len());
    }

    /// Single-slice convenience wrapper.
    pub fn step_slice(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step(vec![params], grads, lr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_matches_scalar_reference() {
        // f(p) = (p − 3)², reference loop written out independently
        let (b1, b2, eps, lr) = (0.5, 0.999, 1e-8, 0.1);
        let mut p = [0.0f64];
        let mut adam = Adam::new(1, b1, b2, eps);
        let (mut rp, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = 2.0 * (p[0] - 3.0);
            adam.step_slice(&mut p, &[g], lr);
            let rg = 2.0 * (rp - 3.0);
            m = b1 * m + (1.0 - b1) * rg;
            v = b2 * v + (1.0 - b2) * rg * rg;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            rp -= lr * mh / (vh.sqrt() + eps);
            assert!((p[0] - rp).abs() <= 1e-12, "step {t}: {} vs {rp}", p[0]);
        }
        assert!((p[0] - 3.0).abs() < 0.5);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut p = [1.5, -2.25, 0.0];
        let before = p;
        let mut adam = Adam::new(3, 0.5, 0.999, 1e-8);
        adam.step_slice(&mut p, &[0.3, -1.0, 2.0], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn export_import_round_trip() {
        let mut s = SeededWeightStream::new(1);
        let net = Network::new(vec![
            ConvLayer::seeded("a", &mut s, 2, 1, 3, 1, 1),
            ConvLayer::seeded("b", &mut s, 1, 2, 1, 1, 0),
        ]);
        let mut map = Ntx1Map::new();
        net.export("m", &mut map);
        assert_eq!(map.len(), 4);
        let mut other = Network::new(vec![
            ConvLayer::zeros("a", 2, 1, 3, 1, 1),
            ConvLayer::zeros("b", 1, 2, 1, 1, 0),
        ]);
        other.import("m", &map).unwrap();
        assert_eq!(other, net);

        let mut wrong = Network::new(vec![ConvLayer::zeros("a", 3, 1, 3, 1, 1)]);
        assert!(wrong.import("m", &map).is_err());
        assert!(matches!(other.import("x", &map), Err(Error::MissingSection(_))));
    }

    #[test]
    fn flat_params_round_trip() {
        let mut s = SeededWeightStream::new(2);
        let mut net = Network::new(vec![ConvLayer::seeded("a", &mut s, 2, 2, 3, 1, 1)]);
        let mut flat = net.flat_params();
        assert_eq!(flat.len(), 2 * 2 * 9 + 2);
        flat[0] += 1.0;
        net.set_flat_params(&flat).unwrap();
        assert_eq!(net.flat_params(), flat);
        assert!(net.set_flat_params(&flat[1..]).is_err());
    }
}
