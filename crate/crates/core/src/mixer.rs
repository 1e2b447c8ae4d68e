//! Object-wise mixing: paste the pixels of half the classes present in one
//! image onto another.

use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simworld::Sample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixOptions {
    /// Whether class 0 counts as a class that can be selected.
    pub include_background: bool,
}

impl Default for MixOptions {
    fn default() -> Self {
        Self { include_background: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixResult {
    pub height: usize,
    pub width: usize,
    /// `height x width x 3`.
    pub mixed_rgb: Vec<f32>,
    /// True where the pixel came from source `i`.
    pub mask: Vec<bool>,
    /// Ascending.
    pub selected_classes: Vec<u8>,
    pub source_ids: (usize, usize),
}

fn distinct_classes(semantics: &[u8], opts: MixOptions) -> Vec<u8> {
    let mut seen = [false; 256];
    for &s in semantics {
        seen[s as usize] = true;
    }
    (0..=255u8).filter(|&c| seen[c as usize] && (opts.include_background || c != 0)).collect()
}

/// Uniformly random ⌈K/2⌉-subset of the eligible classes, ascending.
fn select_classes(semantics: &[u8], opts: MixOptions, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let classes = distinct_classes(semantics, opts);
    let k = classes.len().div_ceil(2);
    let mut picked: Vec<u8> = rand::seq::index::sample(rng, classes.len(), k).into_iter().map(|i| classes[i]).collect();
    picked.sort_unstable();
    picked
}

fn class_mask(semantics: &[u8], selected: &[u8]) -> Vec<bool> {
    let mut on = [false; 256];
    for &c in selected {
        on[c as usize] = true;
    }
    semantics.iter().map(|&s| on[s as usize]).collect()
}

fn check_pair(x_i: &Sample, x_j: &Sample) -> Result<()> {
    if (x_i.height, x_i.width) != (x_j.height, x_j.width) {
        return Err(Error::Shape(format!("cannot mix {}x{} with {}x{}", x_i.height, x_i.width, x_j.height, x_j.width)));
    }
    if x_i.semantics.is_empty() {
        return Err(Error::InvalidInput("empty semantic map".into()));
    }
    Ok(())
}

/// Mixes two samples given an explicit class selection.
pub fn classmix_with_classes(x_i: &Sample, x_j: &Sample, selected: &[u8], source_ids: (usize, usize)) -> Result<MixResult> {
    check_pair(x_i, x_j)?;
    let mask = class_mask(&x_i.semantics, selected);
    let mut mixed_rgb = x_j.rgb.clone();
    for (p, &m) in mask.iter().enumerate() {
        if m {
            mixed_rgb[3 * p..3 * p + 3].copy_from_slice(&x_i.rgb[3 * p..3 * p + 3]);
        }
    }
    let mut selected = selected.to_vec();
    selected.sort_unstable();
    selected.dedup();
    Ok(MixResult { height: x_i.height, width: x_i.width, mixed_rgb, mask, selected_classes: selected, source_ids })
}

/// `m ⊙ x_i + (1 − m) ⊙ x_j` with `m` covering a random half of the classes
/// present in `x_i`.
pub fn classmix(x_i: &Sample, x_j: &Sample, seed: u64) -> Result<MixResult> {
    classmix_opts(x_i, x_j, seed, MixOptions::default())
}

pub fn classmix_opts(x_i: &Sample, x_j: &Sample, seed: u64, opts: MixOptions) -> Result<MixResult> {
    check_pair(x_i, x_j)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selected = select_classes(&x_i.semantics, opts, &mut rng);
    classmix_with_classes(x_i, x_j, &selected, (0, 1))
}

/// Seeded uniform permutation of `0..n`.
pub fn partner_permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Mixes element `b` with element `perm(b)` for a seeded permutation.
pub fn mix_batch(batch: &[Sample], seed: u64) -> Result<Vec<MixResult>> {
    mix_batch_opts(batch, seed, MixOptions::default())
}

pub fn mix_batch_opts(batch: &[Sample], seed: u64, opts: MixOptions) -> Result<Vec<MixResult>> {
    if batch.len() < 2 {
        return Err(Error::InvalidInput(format!("mixing needs a batch of at least 2, got {}", batch.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perm = partner_permutation(batch.len(), &mut rng);
    batch
        .iter()
        .enumerate()
        .map(|(b, x_i)| {
            let x_j = &batch[perm[b]];
            check_pair(x_i, x_j)?;
            let selected = select_classes(&x_i.semantics, opts, &mut rng);
            classmix_with_classes(x_i, x_j, &selected, (b, perm[b]))
        })
        .collect()
}

/// Tensor-layout batch mixing used in training: `images` is `N x 3 x H x W`
/// and `semantics[b]` is the `H * W` class map of sample `b`. Draws from
/// `rng` exactly as [`mix_batch`] draws from its seeded generator.
pub(crate) fn mix_tensor_batch(images: &Tensor<f32>, semantics: &[&[u8]], opts: MixOptions, rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let n = images.batch();
    if n < 2 {
        return Err(Error::InvalidInput(format!("mixing needs a batch of at least 2, got {n}")));
    }
    let plane = images.plane();
    if semantics.len() != n || semantics.iter().any(|s| s.len() != plane) {
        return Err(Error::Shape("semantic maps do not match the image batch".into()));
    }
    let perm = partner_permutation(n, rng);
    let mut out = images.clone();
    for b in 0..n {
        let selected = select_classes(semantics[b], opts, rng);
        let mask = class_mask(semantics[b], &selected);
        let src_i = images.sample(b);
        let src_j = images.sample(perm[b]);
        let dst = out.sample_mut(b);
        for c in 0..3 {
            for p in 0..plane {
                let k = c * plane + p;
                dst[k] = if mask[p] { src_i[k] } else { src_j[k] };
            }
        }
    }
    Ok(out)
}

/// Writes the mixed image and its mask side by side.
pub fn write_debug_png(result: &MixResult, path: &Path) -> Result<()> {
    let (h, w) = (result.height as u32, result.width as u32);
    let mut img = RgbImage::new(2 * w, h);
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) as usize;
            let px = [0, 1, 2].map(|c| (result.mixed_rgb[3 * p + c].clamp(0.0, 1.0) * 255.0).round() as u8);
            img.put_pixel(x, y, image::Rgb(px));
            let m = if result.mask[p] { 255 } else { 0 };
            img.put_pixel(w + x, y, image::Rgb([m, m, m]));
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}
