//! Patch matching in feature space and texture swapping.
//!
//! Every valid k×k input patch `p` is scored against every reference patch
//! `q_j` taken from the blurred reference as `⟨p, q_j / (‖q_j‖ + ε)⟩`; the
//! best `j` (lowest index on ties) selects a patch of the *raw* reference
//! features, which is pasted at the input location. Overlapping pastes are
//! averaged.
//!
//! Scores are produced block by block as a matrix product between the
//! unrolled input patches and the normalized reference patches, so the
//! search is exact and its memory bounded by [`SCORE_BLOCK`].

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featnet::{FeatureExtractor, FeaturePyramid};
use crate::grid::{self, Grid, KernelBank};

/// Added to every patch norm before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// Reference patches scored per matrix product.
pub const SCORE_BLOCK: usize = 256;

/// Input rows handled per parallel task.
const ROW_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub source_level: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub channels: usize,
    /// Top-left `(y, x)` of each patch, row-major order.
    pub coords: Vec<(usize, usize)>,
    vectors: Vec<f64>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Length of one flattened patch, `C·k·k`.
    pub fn dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors[i * d..(i + 1) * d]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    /// Each patch divided by `‖q‖ + ε`.
    pub fn normalized(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = self.vectors.clone();
        for q in out.chunks_exact_mut(d) {
            let inv = 1.0 / (norm(q) + NORM_EPS);
            q.iter_mut().for_each(|v| *v *= inv);
        }
        out
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// All fully contained k×k patches at the given stride. Vectors flatten
/// channel-major, then row-major.
pub fn extract_patches(features: &Grid, patch_size: usize, stride: usize) -> Result<PatchSet> {
    let (c, h, w) = (features.channels(), features.height(), features.width());
    if patch_size == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be ≥ 1".into()));
    }
    if patch_size > h || patch_size > w {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} exceeds feature map {}",
            features.shape()
        )));
    }
    let coords: Vec<(usize, usize)> = (0..=h - patch_size)
        .step_by(stride)
        .flat_map(|y| (0..=w - patch_size).step_by(stride).map(move |x| (y, x)))
        .collect();
    let d = c * patch_size * patch_size;
    let mut vectors = Vec::with_capacity(coords.len() * d);
    for &(y, x) in &coords {
        for ch in 0..c {
            let plane = features.plane(ch);
            for dy in 0..patch_size {
                let row = (y + dy) * w + x;
                vectors.extend_from_slice(&plane[row..row + patch_size]);
            }
        }
    }
    Ok(PatchSet {
        source_level: 0,
        patch_size,
        stride,
        channels: c,
        coords,
        vectors,
    })
}

/// Score map of every reference patch over every valid input location: a
/// correlation of `input_features` with each normalized patch as a kernel.
/// Channel `j` of the result is `S_j`.
pub fn similarity_maps(input_features: &Grid, ref_patches: &PatchSet) -> Result<Grid> {
    if ref_patches.is_empty() {
        return Err(Error::InvalidArgument("empty reference patch set".into()));
    }
    if input_features.channels() != ref_patches.channels {
        return Err(Error::shape(
            "similarity_maps",
            input_features.shape(),
            format!("patches with {} channels", ref_patches.channels),
        ));
    }
    let k = ref_patches.patch_size;
    let bank = KernelBank::new(ref_patches.len(), ref_patches.channels, k, k, ref_patches.normalized())?;
    input_features.conv2d(&bank, &vec![0.0; ref_patches.len()], 1, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchOptions {
    pub patch_size: usize,
    /// Stride between reference patches.
    pub ref_stride: usize,
    /// Also divide each score by the input patch norm (plain cosine
    /// matching). Selection is unchanged up to rounding.
    pub normalize_input: bool,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            patch_size: 3,
            ref_stride: 1,
            normalize_input: false,
        }
    }
}

/// Chosen reference patch per valid input location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    pub height: usize,
    pub width: usize,
    pub indices: Vec<usize>,
}

impl IndexMap {
    pub fn at(&self, y: usize, x: usize) -> usize {
        self.indices[y * self.width + x]
    }

    pub fn to_grid(&self) -> Grid {
        Grid::from_parts(
            crate::grid::Shape::new(1, self.height, self.width),
            self.indices.iter().map(|&i| i as f64).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwapResult {
    /// Pyramid level the maps belong to (1-based).
    pub level: usize,
    /// Texture-swapped features, same shape as the input features.
    pub swapped: Grid,
    /// Cosine score of the chosen patch, overlap-averaged onto pixels.
    pub weight_map: Grid,
    pub index_map: IndexMap,
}

/// Features of one reference image: raw for swapping, blurred for matching.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub raw: &'a Grid,
    pub blur: &'a Grid,
}

/// Single-reference swap at level 1 with default options.
pub fn swap_features(
    input_features: &Grid,
    ref_raw: &Grid,
    ref_blur: &Grid,
    patch_size: usize,
) -> Result<SwapResult> {
    let opts = MatchOptions {
        patch_size,
        ..MatchOptions::default()
    };
    swap_features_pooled(
        input_features,
        &[Reference {
            raw: ref_raw,
            blur: ref_blur,
        }],
        1,
        &opts,
    )
}

/// Best match per input location over the pooled patches of all references.
pub fn swap_features_pooled(
    input_features: &Grid,
    refs: &[Reference<'_>],
    level: usize,
    opts: &MatchOptions,
) -> Result<SwapResult> {
    if refs.is_empty() {
        return Err(Error::InvalidArgument("no reference features to match against".into()));
    }
    let c = input_features.channels();
    for r in refs {
        if r.raw.shape() != r.blur.shape() {
            return Err(Error::shape("swap_features (raw vs blurred reference)", r.raw.shape(), r.blur.shape()));
        }
        if r.raw.channels() != c {
            return Err(Error::shape("swap_features (input vs reference)", input_features.shape(), r.raw.shape()));
        }
    }
    let k = opts.patch_size;
    let input = extract_patches(input_features, k, 1)?;
    let mut sources: Vec<(usize, usize, usize)> = Vec::new();
    let mut blur_vectors = Vec::new();
    for (ri, r) in refs.iter().enumerate() {
        let ps = extract_patches(r.blur, k, opts.ref_stride)?;
        sources.extend(ps.coords.iter().map(|&(y, x)| (ri, y, x)));
        blur_vectors.extend_from_slice(&ps.normalized());
    }
    let d = input.dim();
    let best = best_matches(input.vectors(), &blur_vectors, d, opts.normalize_input);

    let (h, w) = (input_features.height(), input_features.width());
    let (oh, ow) = (h - k + 1, w - k + 1);
    let plane = h * w;
    let mut acc = vec![0.0; c * plane];
    let mut weight = vec![0.0; plane];
    let mut count = vec![0u32; plane];
    let mut patch = vec![0.0; d];
    for (i, &(y, x)) in input.coords.iter().enumerate() {
        let (ri, ry, rx) = sources[best[i]];
        let raw = refs[ri].raw;
        let blur_q = &blur_vectors[best[i] * d..(best[i] + 1) * d];
        // blur_q is already divided by ‖q‖+ε
        let p = input.vector(i);
        let cos = (dot(p, blur_q) / (norm(p) + NORM_EPS)).clamp(-1.0, 1.0);
        copy_patch(raw, ry, rx, k, &mut patch);
        let mut n = 0;
        for ch in 0..c {
            for dy in 0..k {
                for dx in 0..k {
                    acc[ch * plane + (y + dy) * w + x + dx] += patch[n];
                    n += 1;
                }
            }
        }
        for dy in 0..k {
            for dx in 0..k {
                let at = (y + dy) * w + x + dx;
                weight[at] += cos;
                count[at] += 1;
            }
        }
    }
    for (i, v) in acc.iter_mut().enumerate() {
        let n = count[i % plane];
        if n > 0 {
            *v /= n as f64;
        }
    }
    for (v, &n) in weight.iter_mut().zip(&count) {
        if n > 0 {
            *v /= n as f64;
        }
    }
    Ok(SwapResult {
        level,
        swapped: Grid::from_vec(c, h, w, acc)?,
        weight_map: Grid::from_vec(1, h, w, weight)?,
        index_map: IndexMap {
            height: oh,
            width: ow,
            indices: best,
        },
    })
}

fn copy_patch(g: &Grid, y: usize, x: usize, k: usize, out: &mut [f64]) {
    let w = g.width();
    let mut n = 0;
    for ch in 0..g.channels() {
        let plane = g.plane(ch);
        for dy in 0..k {
            let row = (y + dy) * w + x;
            out[n..n + k].copy_from_slice(&plane[row..row + k]);
            n += k;
        }
    }
}

/// Argmax over reference rows for every input row, lowest index on ties.
/// `refs` holds already-normalized reference patches.
fn best_matches(inputs: &[f64], refs: &[f64], d: usize, normalize_input: bool) -> Vec<usize> {
    let ni = inputs.len() / d;
    let nr = refs.len() / d;
    let mut best = vec![0usize; ni];
    best.par_chunks_mut(ROW_CHUNK)
        .enumerate()
        .for_each(|(chunk, out)| {
            let start = chunk * ROW_CHUNK;
            let rows = out.len();
            let block_inputs = &inputs[start * d..(start + rows) * d];
            let inv_norms: Vec<f64> = if normalize_input {
                block_inputs
                    .chunks_exact(d)
                    .map(|p| 1.0 / (norm(p) + NORM_EPS))
                    .collect()
            } else {
                Vec::new()
            };
            let mut best_score = vec![f64::NEG_INFINITY; rows];
            let mut scores = vec![0.0; rows * SCORE_BLOCK];
            for j0 in (0..nr).step_by(SCORE_BLOCK) {
                let bn = SCORE_BLOCK.min(nr - j0);
                let s = &mut scores[..rows * bn];
                grid::gemm(rows, d, bn, block_inputs, false, &refs[j0 * d..(j0 + bn) * d], true, s, false);
                for r in 0..rows {
                    let row = &s[r * bn..(r + 1) * bn];
                    let scale = if normalize_input { inv_norms[r] } else { 1.0 };
                    for (jj, &v) in row.iter().enumerate() {
                        let v = v * scale;
                        if v > best_score[r] {
                            best_score[r] = v;
                            out[r] = j0 + jj;
                        }
                    }
                }
            }
        });
    best
}

/// Reference image blurred by bicubic down- then up-sampling by `factor`.
pub fn blurred_reference(image: &Grid, factor: f64) -> Result<Grid> {
    image.down_up(factor)
}

/// Feature pyramids of one reference image and of its blurred version.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePyramids {
    pub raw: FeaturePyramid,
    pub blur: FeaturePyramid,
}

impl ReferencePyramids {
    pub fn new(extractor: &FeatureExtractor, image: &Grid, blur_factor: f64) -> Result<Self> {
        Ok(ReferencePyramids {
            raw: extractor.extract_pyramid(image)?,
            blur: extractor.extract_pyramid(&blurred_reference(image, blur_factor)?)?,
        })
    }
}

/// Swaps every listed level (1-based) of `input` against the pooled references.
pub fn swap_pyramid(
    input: &FeaturePyramid,
    refs: &[&ReferencePyramids],
    levels: &[usize],
    opts: &MatchOptions,
) -> Result<Vec<SwapResult>> {
    levels
        .iter()
        .map(|&l| {
            if l == 0 || l > input.len() {
                return Err(Error::InvalidArgument(format!(
                    "level {l} outside pyramid of {} levels",
                    input.len()
                )));
            }
            let pooled: Vec<Reference<'_>> = refs
                .iter()
                .map(|r| Reference {
                    raw: r.raw.level(l),
                    blur: r.blur.level(l),
                })
                .collect();
            swap_features_pooled(input.level(l), &pooled, l, opts)
        })
        .collect()
}
