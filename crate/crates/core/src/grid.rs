//! Per-image 2D grids (label maps, masks, confidences).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

pub type LabelMap = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        ensure!(data.len() == height * width, "Grid::from_vec", "{} values for a {}x{} grid", data.len(), height, width);
        Ok(Self { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl Grid<u8> {
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// One-hot `(B, C, H, W)` tensor of class ids, optionally weighted per pixel.
pub fn one_hot(labels: &[LabelMap], classes: usize, weights: Option<&[Grid<f64>]>) -> Result<Tensor> {
    ensure!(!labels.is_empty(), "one_hot", "empty label batch");
    let (h, w) = (labels[0].height, labels[0].width);
    let plane = h * w;
    let mut data = vec![0.0; labels.len() * classes * plane];
    for (b, lab) in labels.iter().enumerate() {
        ensure!(lab.height == h && lab.width == w, "one_hot", "label {} is {}x{}, expected {}x{}", b, lab.height, lab.width, h, w);
        let wgrid = weights.map(|ws| &ws[b]);
        for (p, &c) in lab.data.iter().enumerate() {
            ensure!((c as usize) < classes, "one_hot", "class id {} >= {}", c, classes);
            let wv = wgrid.map_or(1.0, |g| g.data[p]);
            data[(b * classes + c as usize) * plane + p] = wv;
        }
    }
    Tensor::new(vec![labels.len(), classes, h, w], data)
}

/// Broadcast per-pixel weights to every channel of a `(B, C, H, W)` tensor.
pub fn broadcast_channels(weights: &[Grid<f64>], classes: usize) -> Result<Tensor> {
    ensure!(!weights.is_empty(), "broadcast_channels", "empty batch");
    let (h, w) = (weights[0].height, weights[0].width);
    let mut data = Vec::with_capacity(weights.len() * classes * h * w);
    for g in weights {
        ensure!(g.height == h && g.width == w, "broadcast_channels", "ragged batch");
        for _ in 0..classes {
            data.extend_from_slice(&g.data);
        }
    }
    Tensor::new(vec![weights.len(), classes, h, w], data)
}

/// Split a `(B, C, H, W)` tensor into per-image, per-class grids: `out[b][c]`.
pub fn split_channels(t: &Tensor) -> Result<Vec<Vec<Grid<f64>>>> {
    let (n, c, h, w) = t.dims4()?;
    let plane = h * w;
    Ok((0..n)
        .map(|b| (0..c).map(|ch| Grid { height: h, width: w, data: t.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane].to_vec() }).collect())
        .collect())
}
