//! Dense feature grids, score grids and the small set of numeric helpers the
//! rest of the pipeline is built on. Everything here is `f64`; narrowing to
//! `f32` only happens in the dump format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named tap points of a segmentation network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayerId {
    C1,
    C2,
    C3,
    C4,
    C5,
    LH,
    O,
}

impl LayerId {
    pub const ALL: [LayerId; 7] = [
        LayerId::C1,
        LayerId::C2,
        LayerId::C3,
        LayerId::C4,
        LayerId::C5,
        LayerId::LH,
        LayerId::O,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerId::C1 => "C1",
            LayerId::C2 => "C2",
            LayerId::C3 => "C3",
            LayerId::C4 => "C4",
            LayerId::C5 => "C5",
            LayerId::LH => "LH",
            LayerId::O => "O",
        }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerId::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::config(format!("unknown layer name {s:?}")))
    }
}

/// A single feature vector; non-empty and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("feature vector must have dim >= 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("feature vector entries must be finite"));
        }
        Ok(FeatureVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Untagged `height x width x channels` grid: input images and the
/// activations between network layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let fm = FeatureMap::new(LayerId::C1, height, width, channels, data)?;
        Ok(Grid {
            height,
            width,
            channels,
            data: fm.data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Grid {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.width + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn tagged(self, layer: LayerId) -> FeatureMap {
        FeatureMap {
            layer,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data,
        }
    }
}

/// An `height x width x channels` grid, spatial-major with channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub layer: LayerId,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(
        layer: LayerId,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::contract(format!(
                "feature map dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::contract("feature map shape overflows"))?;
        if data.len() != expected {
            return Err(Error::contract(format!(
                "feature map data has {} entries, expected {expected}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("feature map entries must be finite"));
        }
        Ok(FeatureMap {
            layer,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(layer: LayerId, height: usize, width: usize, channels: usize) -> Self {
        FeatureMap {
            layer,
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.width + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixels(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Number of scalar entries (`height * width * channels`).
    pub fn size(&self) -> usize {
        self.data.len()
    }
}

/// A per-pixel scalar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract("score map dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::contract(format!(
                "score map data has {} entries, expected {}",
                data.len(),
                height * width
            )));
        }
        Ok(ScoreMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ScoreMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    pub fn same_shape(&self, other: &ScoreMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Elementwise product of two equally-shaped maps.
    pub fn product(&self, other: &ScoreMap) -> Result<ScoreMap> {
        if !self.same_shape(other) {
            return Err(Error::contract(format!(
                "score map shapes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(ScoreMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine similarity on raw slices. Returns 0 when either side has zero norm.
/// Callers guarantee equal lengths.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let mut uv = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for (a, b) in u.iter().zip(v) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return 0.0;
    }
    (uv / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0)
}

pub fn cosine_similarity(u: &FeatureVector, v: &FeatureVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::contract(format!(
            "cosine similarity of vectors with dims {} and {}",
            u.dim(),
            v.dim()
        )));
    }
    Ok(cosine(u.as_slice(), v.as_slice()))
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // a + (b - a) t keeps constant spans exact; clamp guards rounding overshoot.
    let v = a + (b - a) * t;
    v.max(a.min(b)).min(a.max(b))
}

/// Source coordinate and interpolation weight for corner-aligned sampling.
fn sample_axis(out_index: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    if in_len == 1 || out_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = out_index as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
    let lo = (pos.floor() as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, pos - lo as f64)
}

/// Corner-aligned bilinear resampling of one channel-last grid.
pub(crate) fn resize_channels(
    data: &[f64],
    in_h: usize,
    in_w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    if in_h == out_h && in_w == out_w {
        return data.to_vec();
    }
    let cols: Vec<_> = (0..out_w).map(|j| sample_axis(j, out_w, in_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    for i in 0..out_h {
        let (y0, y1, ty) = sample_axis(i, out_h, in_h);
        for &(x0, x1, tx) in &cols {
            for c in 0..channels {
                let at = |y: usize, x: usize| data[(y * in_w + x) * channels + c];
                let top = lerp(at(y0, x0), at(y0, x1), tx);
                let bottom = lerp(at(y1, x0), at(y1, x1), tx);
                out.push(lerp(top, bottom, ty));
            }
        }
    }
    out
}

pub fn bilinear_resize(map: &ScoreMap, out_h: usize, out_w: usize) -> Result<ScoreMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract("resize target must be at least 1x1"));
    }
    Ok(ScoreMap {
        height: out_h,
        width: out_w,
        data: resize_channels(&map.data, map.height, map.width, 1, out_h, out_w),
    })
}

/// Arithmetic mean and population standard deviation.
///
/// Values are summed in sorted order so the result does not depend on the
/// order of the input.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::contract("mean_std of an empty sequence"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // Shifting by the smallest value keeps constant inputs exact.
    let shift = sorted[0];
    let mean = shift + sorted.iter().map(|v| v - shift).sum::<f64>() / n;
    let mut sq: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
    sq.sort_by(f64::total_cmp);
    let var = sq.iter().sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}
