//! Synthetic binary segmentation task with tunable boundary ambiguity,
//! labeled/unlabeled splitting, and weak/strong augmentation.
//!
//! Each image holds one to three wobbly ellipses. The ground truth is the
//! sharp indicator; the image is that indicator blurred by a Gaussian whose
//! width grows with `ambiguity`, plus a smooth intensity drift, a faint
//! texture and pixel noise.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use rand::Rng;

use crate::error::{ensure, Result};
use crate::grid::{Grid, LabelMap};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: u32,
    /// Intensities in `[0, 1]`.
    pub image: Grid<f64>,
    pub label: LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<SegSample>,
    /// Labels here are used for evaluation only.
    pub unlabeled: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

impl Dataset {
    pub fn n_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    /// True when the labeled pool is larger than half the unlabeled pool.
    pub fn labeled_heavy(&self) -> bool {
        2 * self.labeled.len() > self.unlabeled.len()
    }
}

/// Pixel offset rectangle `[y, y + h) x [x, x + w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Positional {
    FlipH,
    FlipV,
    /// Counter-clockwise quarter turns; square grids only.
    Rot90(u8),
    Translate { dx: i32, dy: i32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Intensity {
    Gamma(f64),
    GaussianNoise { sigma: f64, seed: u64 },
    CopyPaste { source_id: u32, rect: Rect },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentationSpec {
    pub positional: Vec<Positional>,
    pub intensity: Vec<Intensity>,
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self::default()
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = libm::ceil(3.0 * sigma) as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            libm::exp(-0.5 * d * d / (sigma * sigma))
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with edge clamping.
fn blur(src: &Grid<f64>, sigma: f64) -> Grid<f64> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (src.height as isize, src.width as isize);
    let mut tmp = Grid::filled(src.height, src.width, 0.0);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = k.iter().enumerate().map(|(i, kv)| kv * src.get(y as usize, (x + i as isize - r).clamp(0, w - 1) as usize)).sum();
            tmp.set(y as usize, x as usize, s);
        }
    }
    let mut out = Grid::filled(src.height, src.width, 0.0);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = k.iter().enumerate().map(|(i, kv)| kv * tmp.get((y + i as isize - r).clamp(0, h - 1) as usize, x as usize)).sum();
            out.set(y as usize, x as usize, s);
        }
    }
    out
}

fn generate_sample(seed: u64, id: u32, h: usize, w: usize, ambiguity: f64) -> SegSample {
    let mut r = rng::stream(seed);
    let size = h.min(w) as f64;
    let mut label = Grid::filled(h, w, 0u8);
    let blobs = r.gen_range(1..=3);
    for _ in 0..blobs {
        let cy = r.gen_range(0.2..0.8) * h as f64;
        let cx = r.gen_range(0.2..0.8) * w as f64;
        let ry = r.gen_range(0.1..0.25) * size;
        let rx = r.gen_range(0.1..0.25) * size;
        let angle = r.gen_range(0.0..PI);
        let wobble = r.gen_range(0.0..0.2);
        let lobes = r.gen_range(2..=4) as f64;
        let phase = r.gen_range(0.0..TAU);
        let (sa, ca) = libm::sincos(angle);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let u = (ca * dx + sa * dy) / rx;
                let v = (-sa * dx + ca * dy) / ry;
                let rho = libm::sqrt(u * u + v * v);
                let theta = libm::atan2(v, u);
                if rho < 1.0 + wobble * libm::sin(lobes * theta + phase) {
                    label.set(y, x, 1);
                }
            }
        }
    }
    let indicator = label.map(f64::from);
    let blurred = blur(&indicator, ambiguity * size / 8.0);
    let drift_amp = r.gen_range(-0.08..0.08);
    let drift_dir = r.gen_range(0.0..TAU);
    let (ds, dc) = libm::sincos(drift_dir);
    let tex_freq = r.gen_range(0.5..1.5);
    let tex_phase = r.gen_range(0.0..TAU);
    let mut image = Grid::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (ny, nx) = (y as f64 / h as f64 - 0.5, x as f64 / w as f64 - 0.5);
            let drift = drift_amp * 2.0 * (dc * nx + ds * ny);
            let texture = 0.03 * libm::sin(tex_freq * (x as f64 + 0.7 * y as f64) + tex_phase);
            let noise = 0.03 * rng::normal(&mut r);
            let v = 0.2 + 0.55 * blurred.get(y, x) + drift + texture + noise;
            image.set(y, x, v.clamp(0.0, 1.0));
        }
    }
    SegSample { id, image, label }
}

/// Generate `n` samples; sample `i` depends only on `(seed, i)`.
pub fn generate_dataset(seed: u64, n: usize, height: usize, width: usize, ambiguity: f64) -> Result<Vec<SegSample>> {
    ensure!((0.0..=1.0).contains(&ambiguity), "generate_dataset", "ambiguity {} outside [0, 1]", ambiguity);
    ensure!(height >= 4 && width >= 4, "generate_dataset", "image {}x{} too small", height, width);
    Ok((0..n).map(|i| generate_sample(rng::derive(seed, i as u64), i as u32, height, width, ambiguity)).collect())
}

/// Parameters of a generated train/test split.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub ambiguity: f64,
    pub labeled_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 0, n_train: 200, n_test: 50, height: 32, width: 32, ambiguity: 0.6, labeled_ratio: 0.05 }
    }
}

/// Train pool split into labeled/unlabeled plus an independent test set.
pub fn synthetic_dataset(cfg: &DataConfig) -> Result<Dataset> {
    let train = generate_dataset(rng::derive(cfg.seed, 0x7261_696e), cfg.n_train, cfg.height, cfg.width, cfg.ambiguity)?;
    let mut data = split(train, cfg.labeled_ratio, rng::derive(cfg.seed, 0x7370_6c74))?;
    data.test = generate_dataset(rng::derive(cfg.seed, 0x7465_7374), cfg.n_test, cfg.height, cfg.width, cfg.ambiguity)?;
    for s in &mut data.test {
        s.id += cfg.n_train as u32;
    }
    Ok(data)
}

/// Shuffle deterministically and take `floor(n * labeled_ratio)` labeled samples.
pub fn split(samples: Vec<SegSample>, labeled_ratio: f64, seed: u64) -> Result<Dataset> {
    ensure!(labeled_ratio > 0.0 && labeled_ratio < 1.0, "split", "labeled_ratio {} outside (0, 1)", labeled_ratio);
    let n_l = libm::floor(samples.len() as f64 * labeled_ratio) as usize;
    ensure!(n_l > 0, "split", "no labeled samples for n={} ratio={}", samples.len(), labeled_ratio);
    let order = rng::permutation(&mut rng::stream(seed), samples.len());
    let mut slots: Vec<Option<SegSample>> = samples.into_iter().map(Some).collect();
    let mut labeled = Vec::with_capacity(n_l);
    let mut unlabeled = Vec::with_capacity(slots.len() - n_l);
    for (rank, &i) in order.iter().enumerate() {
        let s = slots[i].take().expect("permutation visits each index once");
        if rank < n_l {
            labeled.push(s);
        } else {
            unlabeled.push(s);
        }
    }
    Ok(Dataset { labeled, unlabeled, test: Vec::new() })
}

fn positional_once<T: Copy>(op: Positional, g: &Grid<T>, fill: T) -> Grid<T> {
    let (h, w) = (g.height, g.width);
    match op {
        Positional::FlipH => {
            let mut out = g.clone();
            for y in 0..h {
                for x in 0..w {
                    out.set(y, x, g.get(y, w - 1 - x));
                }
            }
            out
        }
        Positional::FlipV => {
            let mut out = g.clone();
            for y in 0..h {
                for x in 0..w {
                    out.set(y, x, g.get(h - 1 - y, x));
                }
            }
            out
        }
        Positional::Rot90(k) => {
            let mut out = g.clone();
            for _ in 0..(k % 4) {
                let src = out.clone();
                let n = src.height;
                for y in 0..n {
                    for x in 0..n {
                        out.set(y, x, src.get(x, n - 1 - y));
                    }
                }
            }
            out
        }
        Positional::Translate { dx, dy } => {
            let mut out = Grid::filled(h, w, fill);
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = (y as i64 - dy as i64, x as i64 - dx as i64);
                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        out.set(y, x, g.get(sy as usize, sx as usize));
                    }
                }
            }
            out
        }
    }
}

/// Apply the positional sub-list of `spec` to any grid; vacated pixels take `fill`.
pub fn apply_positional<T: Copy>(spec: &AugmentationSpec, g: &Grid<T>, fill: T) -> Grid<T> {
    spec.positional.iter().fold(g.clone(), |acc, &op| positional_once(op, &acc, fill))
}

/// Positional transform of a label (or any per-pixel map). Copy-paste
/// regions take the donor's transformed values.
pub fn apply_positional_to_label<T: Copy>(spec: &AugmentationSpec, label: &Grid<T>, donor: Option<&Grid<T>>, fill: T) -> Grid<T> {
    let mut out = apply_positional(spec, label, fill);
    for op in &spec.intensity {
        if let Intensity::CopyPaste { rect, .. } = op {
            let donor = apply_positional(spec, donor.expect("copy-paste spec needs the donor map"), fill);
            paste(&mut out, &donor, *rect);
        }
    }
    out
}

fn paste<T: Copy>(dst: &mut Grid<T>, src: &Grid<T>, rect: Rect) {
    for y in rect.y..(rect.y + rect.h).min(dst.height) {
        for x in rect.x..(rect.x + rect.w).min(dst.width) {
            dst.set(y, x, src.get(y, x));
        }
    }
}

/// Apply a full spec to an image. Vacated pixels become 0.
pub fn apply_to_image(spec: &AugmentationSpec, image: &Grid<f64>, donor: Option<&Grid<f64>>) -> Grid<f64> {
    let mut out = apply_positional(spec, image, 0.0);
    for op in &spec.intensity {
        match *op {
            Intensity::Gamma(g) => out.data.iter_mut().for_each(|v| *v = libm::pow(v.max(0.0), g)),
            Intensity::GaussianNoise { sigma, seed } => {
                let mut r = rng::stream(seed);
                out.data.iter_mut().for_each(|v| *v = (*v + sigma * rng::normal(&mut r)).clamp(0.0, 1.0));
            }
            Intensity::CopyPaste { rect, .. } => {
                let donor = apply_positional(spec, donor.expect("copy-paste spec needs the donor image"), 0.0);
                paste(&mut out, &donor, rect);
            }
        }
    }
    out
}

/// Random flips and an integer translation of at most 10% of the height.
pub fn weak_augment(sample: &SegSample, rng: &mut Stream) -> (SegSample, AugmentationSpec) {
    let mut spec = AugmentationSpec::identity();
    if rng.gen_bool(0.5) {
        spec.positional.push(Positional::FlipH);
    }
    if rng.gen_bool(0.5) {
        spec.positional.push(Positional::FlipV);
    }
    let t = (sample.image.height / 10) as i32;
    let (dx, dy) = (rng.gen_range(-t..=t), rng.gen_range(-t..=t));
    if dx != 0 || dy != 0 {
        spec.positional.push(Positional::Translate { dx, dy });
    }
    let out = SegSample {
        id: sample.id,
        image: apply_positional(&spec, &sample.image, 0.0),
        label: apply_positional(&spec, &sample.label, 0),
    };
    (out, spec)
}

/// Random rectangle covering 10-40% of the grid.
fn random_rect(rng: &mut Stream, h: usize, w: usize) -> Rect {
    let area = rng.gen_range(0.1..0.4) * (h * w) as f64;
    let aspect = libm::exp(rng.gen_range(libm::log(0.5)..libm::log(2.0)));
    let rh = (libm::round(libm::sqrt(area * aspect)) as usize).clamp(1, h);
    let rw = (libm::round(area / rh as f64) as usize).clamp(1, w);
    let y = rng.gen_range(0..=h - rh);
    let x = rng.gen_range(0..=w - rw);
    Rect { y, x, h: rh, w: rw }
}

/// Strong view: positional transform, gamma in `[0.7, 1.4]`, Gaussian noise
/// with sigma in `[0, 0.05]`, then a pasted donor rectangle.
pub fn strong_augment(image: &Grid<f64>, donor: &SegSample, rng: &mut Stream) -> (Grid<f64>, AugmentationSpec) {
    let mut spec = AugmentationSpec::identity();
    if rng.gen_bool(0.5) {
        spec.positional.push(Positional::FlipH);
    }
    if image.height == image.width {
        let k = rng.gen_range(0..4u8);
        if k != 0 {
            spec.positional.push(Positional::Rot90(k));
        }
    }
    spec.intensity.push(Intensity::Gamma(rng.gen_range(0.7..1.4)));
    spec.intensity.push(Intensity::GaussianNoise { sigma: rng.gen_range(0.0..0.05), seed: rng.gen() });
    let rect = random_rect(rng, image.height, image.width);
    spec.intensity.push(Intensity::CopyPaste { source_id: donor.id, rect });
    let out = apply_to_image(&spec, image, Some(&donor.image));
    (out, spec)
}

/// Stack images into a `(B, 1, H, W)` tensor.
pub fn images_tensor<'a>(images: impl IntoIterator<Item = &'a Grid<f64>>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut dims = None;
    let mut n = 0;
    for g in images {
        match dims {
            None => dims = Some((g.height, g.width)),
            Some(d) => ensure!(d == (g.height, g.width), "images_tensor", "ragged image batch"),
        }
        data.extend_from_slice(&g.data);
        n += 1;
    }
    let (h, w) = dims.unwrap_or((0, 0));
    ensure!(n > 0, "images_tensor", "empty image batch");
    Tensor::new(vec![n, 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn threshold_dice(s: &SegSample) -> f64 {
        let pred: Vec<u8> = s.image.data.iter().map(|&v| (v > 0.5) as u8).collect();
        let inter = pred.iter().zip(&s.label.data).filter(|(a, b)| **a == 1 && **b == 1).count() as f64;
        let sum = (pred.iter().filter(|&&v| v == 1).count() + s.label.count_nonzero()) as f64;
        if sum == 0.0 { 1.0 } else { 2.0 * inter / sum }
    }

    #[test]
    fn sharp_images_threshold_to_their_labels() {
        for s in generate_dataset(11, 30, 24, 24, 0.0).unwrap() {
            assert!(threshold_dice(&s) > 0.99, "sample {} dice {}", s.id, threshold_dice(&s));
        }
    }

    #[test]
    fn ambiguity_degrades_threshold_dice() {
        let mean = |a: f64| {
            let d = generate_dataset(4, 50, 24, 24, a).unwrap();
            d.iter().map(threshold_dice).sum::<f64>() / d.len() as f64
        };
        assert!(mean(0.8) < mean(0.1));
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let a = generate_dataset(9, 5, 16, 16, 0.5).unwrap();
        assert_eq!(a, generate_dataset(9, 5, 16, 16, 0.5).unwrap());
        for s in &a {
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.label.data.iter().all(|&c| c < 2));
        }
        assert!(generate_dataset(9, 5, 16, 16, 1.5).is_err());
    }

    #[test]
    fn split_counts_and_partition() {
        let d = split(generate_dataset(1, 100, 8, 8, 0.2).unwrap(), 0.05, 3).unwrap();
        assert_eq!((d.n_labeled(), d.n_unlabeled()), (5, 95));
        let mut ids: Vec<u32> = d.labeled.iter().chain(&d.unlabeled).map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
        let again = split(generate_dataset(1, 100, 8, 8, 0.2).unwrap(), 0.05, 3).unwrap();
        assert_eq!(d, again);
        assert!(split(generate_dataset(1, 10, 8, 8, 0.2).unwrap(), 0.05, 3).is_err());
    }

    #[test]
    fn flip_is_an_involution_and_conserves_foreground() {
        let s = &generate_dataset(2, 1, 16, 16, 0.3).unwrap()[0];
        for op in [Positional::FlipH, Positional::FlipV] {
            let spec = AugmentationSpec { positional: vec![op], intensity: vec![] };
            let once = apply_positional(&spec, &s.label, 0);
            assert_eq!(once.count_nonzero(), s.label.count_nonzero());
            assert_eq!(apply_positional(&spec, &once, 0), s.label);
        }
    }

    #[test]
    fn identity_spec_leaves_everything_unchanged() {
        let s = &generate_dataset(2, 2, 16, 16, 0.3).unwrap();
        let spec = AugmentationSpec::identity();
        assert_eq!(apply_to_image(&spec, &s[0].image, None), s[0].image);
        assert_eq!(apply_positional_to_label(&spec, &s[0].label, None, 0), s[0].label);
    }

    #[test]
    fn translation_fills_background() {
        let mut g = Grid::filled(4, 4, 1u8);
        g.set(0, 0, 2);
        let spec = AugmentationSpec { positional: vec![Positional::Translate { dx: 2, dy: 0 }], intensity: vec![] };
        let t = apply_positional(&spec, &g, 0);
        for y in 0..4 {
            assert_eq!((t.get(y, 0), t.get(y, 1)), (0, 0));
        }
        assert_eq!(t.get(0, 2), 2);
    }

    #[test]
    fn intensity_only_spec_keeps_label() {
        let s = &generate_dataset(3, 1, 16, 16, 0.3).unwrap()[0];
        let spec = AugmentationSpec { positional: vec![], intensity: vec![Intensity::Gamma(1.3), Intensity::GaussianNoise { sigma: 0.05, seed: 1 }] };
        assert_eq!(apply_positional_to_label(&spec, &s.label, None, 0), s.label);
    }

    #[test]
    fn empty_paste_changes_nothing() {
        let d = generate_dataset(3, 2, 16, 16, 0.3).unwrap();
        let spec = AugmentationSpec { positional: vec![], intensity: vec![Intensity::CopyPaste { source_id: 1, rect: Rect { y: 3, x: 3, h: 0, w: 5 } }] };
        assert_eq!(apply_to_image(&spec, &d[0].image, Some(&d[1].image)), d[0].image);
    }

    #[test]
    fn copy_paste_label_semantics() {
        let d = generate_dataset(5, 2, 16, 16, 0.3).unwrap();
        let mut r = rng::stream(8);
        let (img, spec) = strong_augment(&d[0].image, &d[1], &mut r);
        let lab = apply_positional_to_label(&spec, &d[0].label, Some(&d[1].label), 0);
        let own = apply_positional(&spec, &d[0].label, 0);
        let donor = apply_positional(&spec, &d[1].label, 0);
        let donor_img = apply_positional(&spec, &d[1].image, 0.0);
        let rect = spec.intensity.iter().find_map(|i| if let Intensity::CopyPaste { rect, .. } = i { Some(*rect) } else { None }).unwrap();
        let frac = rect.area() as f64 / 256.0;
        assert!((0.08..=0.45).contains(&frac), "rect fraction {frac}");
        for y in 0..16 {
            for x in 0..16 {
                if rect.contains(y, x) {
                    assert_eq!(lab.get(y, x), donor.get(y, x));
                    assert_eq!(img.get(y, x), donor_img.get(y, x));
                } else {
                    assert_eq!(lab.get(y, x), own.get(y, x));
                }
            }
        }
        let classes = |g: &LabelMap| {
            let mut c: Vec<u8> = g.data.clone();
            c.sort_unstable();
            c.dedup();
            c
        };
        assert!(classes(&own).iter().all(|c| classes(&d[0].label).contains(c)));
    }

    #[test]
    fn weak_augment_moves_image_and_label_together() {
        let s = &generate_dataset(6, 1, 20, 20, 0.0).unwrap()[0];
        let mut r = rng::stream(1);
        for _ in 0..10 {
            let (a, spec) = weak_augment(s, &mut r);
            let shifted = apply_positional(&spec, &s.image, 0.0);
            assert_eq!(a.image, shifted);
            assert_eq!(a.label, apply_positional(&spec, &s.label, 0));
        }
    }

    proptest::proptest! {
        #[test]
        fn positional_pairing_is_preserved(seed in 0u64..500, fh in proptest::bool::ANY, k in 0u8..4, dx in -3i32..=3, dy in -3i32..=3) {
            let img = Grid::from_vec(12, 12, (0..144).map(|i| i as f64).collect()).unwrap();
            let lab = Grid::from_vec(12, 12, (0..144).map(|i| (i % 251) as u8).collect::<Vec<u8>>()).unwrap();
            let mut positional = vec![Positional::Rot90(k), Positional::Translate { dx, dy }];
            if fh { positional.insert(0, Positional::FlipH); }
            let _ = seed;
            let spec = AugmentationSpec { positional, intensity: vec![] };
            let ti = apply_positional(&spec, &img, -1.0);
            let tl = apply_positional(&spec, &lab, 255);
            for i in 0..144 {
                if ti.data[i] >= 0.0 {
                    proptest::prop_assert_eq!(tl.data[i], (ti.data[i] as usize % 251) as u8);
                } else {
                    proptest::prop_assert_eq!(tl.data[i], 255);
                }
            }
        }
    }
}
