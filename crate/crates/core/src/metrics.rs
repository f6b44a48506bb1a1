//! Image quality metrics, boxplot summaries and the CSV dialect shared by
//! every tabular output.
//!
//! Metric functions take single-channel grids already on the 0–255 scale;
//! [`to_8bit`] converts internal [0, 1] images exactly as PGM export does.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::formats::to_byte;
use crate::grid::Grid;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const HIST_BINS: usize = 256;

/// Quantizes an internal [0, 1] image to the 0–255 values an export holds.
pub fn to_8bit(g: &Grid) -> Grid {
    g.map(|v| to_byte(v) as f64)
}

fn same_dims(op: &'static str, a: &Grid, b: &Grid) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if a.channels() != 1 {
        return Err(Error::InvalidArgument(format!("{op} expects single-channel images, got {}", a.shape())));
    }
    Ok(())
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, ky: &[f64], kx: &[f64]) -> Vec<f64> {
    let (wy, wx) = (ky.len(), kx.len());
    let (oh, ow) = (h - wy + 1, w - wx + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..wx).map(|i| kx[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..wy).map(|i| ky[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Central `n` taps of the SSIM window, renormalized to sum to one.
fn cropped_window(n: usize) -> Vec<f64> {
    let full = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let k = &full[(SSIM_WINDOW - n) / 2..][..n];
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

/// Mean SSIM over every valid 11×11 Gaussian window (σ = 1.5). Images
/// smaller than the window use the central part of it, renormalized.
pub fn ssim(x: &Grid, y: &Grid) -> Result<f64> {
    same_dims("ssim", x, y)?;
    let (h, w) = (x.height(), x.width());
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let ky = cropped_window(SSIM_WINDOW.min(h));
    let kx = cropped_window(SSIM_WINDOW.min(w));
    let filt = |src: &[f64]| filter_valid(src, h, w, &ky, &kx);
    let xs = x.as_slice();
    let ys = y.as_slice();
    let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xs.iter().zip(ys).map(|(a, b)| a * b).collect();
    let (mx, my) = (filt(xs), filt(ys));
    let (sxx, syy, sxy) = (filt(&xx), filt(&yy), filt(&xy));
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let vx = sxx[i] - mx[i] * mx[i];
        let vy = syy[i] - my[i] * my[i];
        let cxy = sxy[i] - mx[i] * my[i];
        let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2);
        let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
        total += num / den;
    }
    Ok(total / n as f64)
}

/// Mean squared error.
pub fn mse(g: &Grid, t: &Grid) -> Result<f64> {
    same_dims("mse", g, t)?;
    let s: f64 = g.as_slice().iter().zip(t.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / g.len() as f64)
}

/// `20·log10(max_f / √MSE)`; `+∞` when the images are identical.
pub fn psnr(g: &Grid, t: &Grid, max_f: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(g, t)?, max_f))
}

pub fn psnr_from_mse(mse: f64, max_f: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (max_f / mse.sqrt()).log10()
    }
}

/// 256-bin intensity histogram; bin k covers [k, k+1), the last bin is closed.
pub fn histogram(g: &Grid) -> Vec<f64> {
    let mut h = vec![0.0; HIST_BINS];
    for &v in g.as_slice() {
        let b = if v.is_nan() { 0 } else { (v.floor().max(0.0) as usize).min(HIST_BINS - 1) };
        h[b] += 1.0;
    }
    h
}

/// Pearson correlation of the two intensity histograms.
pub fn histogram_correlation(a: &Grid, b: &Grid) -> f64 {
    pearson_or_equal(&histogram(a), &histogram(b))
}

fn pearson_or_equal(ha: &[f64], hb: &[f64]) -> f64 {
    let n = ha.len() as f64;
    let ma = ha.iter().sum::<f64>() / n;
    let mb = hb.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ha.iter().zip(hb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return if ha == hb { 1.0 } else { 0.0 };
    }
    if ha == hb {
        return 1.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub ssim: f64,
    pub mse: f64,
    pub psnr: f64,
    pub histcorr: f64,
}

/// All four metrics of an internal [0, 1] `output` against its `target`,
/// computed on the 8-bit exports.
pub fn evaluate_pair(id: impl Into<String>, output: &Grid, target: &Grid) -> Result<MetricRow> {
    let (o, t) = (to_8bit(output), to_8bit(target));
    let m = mse(&o, &t)?;
    Ok(MetricRow {
        id: id.into(),
        ssim: ssim(&o, &t)?,
        mse: m,
        psnr: psnr_from_mse(m, 255.0),
        histcorr: histogram_correlation(&o, &t),
    })
}

/// Boxplot quantities of one metric column.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Values outside `[Q1 − 1.5·IQR, Q3 + 1.5·IQR]`, ascending.
    pub outliers: Vec<f64>,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("cannot summarize an empty column".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&s, 0.25), quantile(&s, 0.5), quantile(&s, 0.75));
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    Ok(Summary {
        count: s.len(),
        mean: s.iter().sum::<f64>() / s.len() as f64,
        median,
        q1,
        q3,
        outliers: s.iter().copied().filter(|&v| v < lo || v > hi).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub ssim: Summary,
    pub mse: Summary,
    pub psnr: Summary,
    pub histcorr: Summary,
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>) -> Result<Self> {
        let col = |f: fn(&MetricRow) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
        Ok(MetricReport {
            ssim: summarize(&col(|r| r.ssim))?,
            mse: summarize(&col(|r| r.mse))?,
            psnr: summarize(&col(|r| r.psnr))?,
            histcorr: summarize(&col(|r| r.histcorr))?,
            rows,
        })
    }

    /// `id,ssim,mse,psnr,histcorr` rows followed by a `#`-prefixed summary block.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(EVAL_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&row_to_csv(r));
            out.push('\n');
        }
        out.push_str("# summary\n# metric,mean,median,q1,q3,outliers\n");
        for (name, s) in [
            ("ssim", &self.ssim),
            ("mse", &self.mse),
            ("psnr", &self.psnr),
            ("histcorr", &self.histcorr),
        ] {
            let outliers: Vec<String> = s.outliers.iter().map(|&v| format_number(v)).collect();
            let _ = writeln!(
                out,
                "# {name},{},{},{},{},{}",
                format_number(s.mean),
                format_number(s.median),
                format_number(s.q1),
                format_number(s.q3),
                csv_field(&outliers.join(";"))
            );
        }
        out
    }
}

pub const EVAL_HEADER: &str = "id,ssim,mse,psnr,histcorr";

pub fn row_to_csv(r: &MetricRow) -> String {
    format!(
        "{},{},{},{},{}",
        csv_field(&r.id),
        format_number(r.ssim),
        format_number(r.mse),
        format_number(r.psnr),
        format_number(r.histcorr)
    )
}

/// Number rounded to 9 significant digits, printed in shortest form;
/// infinities print as `inf` / `-inf`.
pub fn format_number(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    let s = format!("{rounded}");
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

/// RFC-4180 quoting when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
