//! Keypoints ⇄ Gaussian heatmap stacks.
//!
//! Cell `(row, col)` of a heatmap sits at image pixel `(col·stride, row·stride)`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{write_file, Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_SIGMA: f64 = 2.0;
pub const DEFAULT_STRIDE: f64 = 4.0;
pub const DEFAULT_VIS_THRESHOLD: f64 = 0.3;

/// Visibility flag: not labeled.
pub const VIS_UNLABELED: u8 = 0;
/// Visibility flag: labeled but not visible.
pub const VIS_OCCLUDED: u8 = 1;
pub const VIS_VISIBLE: u8 = 2;

/// One animal instance: keypoint coordinates in pixels plus annotation metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub coords: Vec<[f64; 2]>,
    pub visibility: Vec<u8>,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub species: String,
    pub score: Option<Vec<f64>>,
}

impl KeypointSet {
    pub fn new(
        coords: Vec<[f64; 2]>,
        visibility: Vec<u8>,
        bbox: [f64; 4],
        species: impl Into<String>,
    ) -> Result<Self> {
        let kps = KeypointSet {
            coords,
            visibility,
            bbox,
            species: species.into(),
            score: None,
        };
        kps.validate()?;
        Ok(kps)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.visibility.len() != self.coords.len() {
            return Err(Error::Validation(format!(
                "{} coordinates but {} visibility flags",
                self.coords.len(),
                self.visibility.len()
            )));
        }
        if let Some(s) = &self.score {
            if s.len() != self.coords.len() {
                return Err(Error::Validation(
                    "score length differs from keypoint count".into(),
                ));
            }
        }
        if let Some(i) = self
            .coords
            .iter()
            .position(|c| !c[0].is_finite() || !c[1].is_finite())
        {
            return Err(Error::Validation(format!(
                "keypoint {i} has non-finite coordinates"
            )));
        }
        if let Some(i) = self.visibility.iter().position(|&v| v > 2) {
            return Err(Error::Validation(format!(
                "keypoint {i} has visibility {} outside {{0,1,2}}",
                self.visibility[i]
            )));
        }
        let [_, _, w, h] = self.bbox;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Validation(format!(
                "bbox extent must be positive, got {w}x{h}"
            )));
        }
        Ok(())
    }

    pub fn labeled_count(&self) -> usize {
        self.visibility.iter().filter(|&&v| v > 0).count()
    }

    pub fn bbox_area(&self) -> f64 {
        self.bbox[2] * self.bbox[3]
    }

    /// Mean per-keypoint confidence, or 1 when no scores are attached.
    pub fn instance_score(&self) -> f64 {
        match &self.score {
            Some(s) if !s.is_empty() => s.iter().sum::<f64>() / s.len() as f64,
            _ => 1.0,
        }
    }
}

/// Tight box over `coords`, padded by `pad` of each side, never thinner than one pixel.
pub fn bbox_around(coords: &[[f64; 2]], pad: f64) -> [f64; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for c in coords {
        x0 = x0.min(c[0]);
        y0 = y0.min(c[1]);
        x1 = x1.max(c[0]);
        y1 = y1.max(c[1]);
    }
    if !x0.is_finite() {
        return [0.0, 0.0, 1.0, 1.0];
    }
    let (w, h) = ((x1 - x0).max(1.0), (y1 - y0).max(1.0));
    [
        x0 - pad * w,
        y0 - pad * h,
        w * (1.0 + 2.0 * pad),
        h * (1.0 + 2.0 * pad),
    ]
}

/// `N × H' × W'` heatmaps; channel `i` belongs to keypoint `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapStack {
    pub values: Tensor,
    pub stride: f64,
}

impl HeatmapStack {
    pub fn new(values: Tensor, stride: f64) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Validation(format!(
                "heatmap stack must be rank 3, got {:?}",
                values.shape()
            )));
        }
        if !(stride > 0.0) {
            return Err(Error::Config(format!(
                "heatmap stride must be positive, got {stride}"
            )));
        }
        Ok(HeatmapStack { values, stride })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    pub fn channel(&self, i: usize) -> &[f64] {
        let (h, w) = self.resolution();
        &self.values.data()[i * h * w..(i + 1) * h * w]
    }
}

/// Result of [`encode`]: the stack and the indices of keypoints whose centre
/// falls outside the map (rendered anyway, tails truncated).
#[derive(Clone, Debug)]
pub struct Encoded {
    pub heatmaps: HeatmapStack,
    pub out_of_bounds: Vec<usize>,
}

pub fn encode(
    kps: &KeypointSet,
    resolution: (usize, usize),
    stride: f64,
    sigma: f64,
) -> Result<Encoded> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    if !(stride > 0.0) {
        return Err(Error::Config(format!(
            "stride must be positive, got {stride}"
        )));
    }
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::Config("heatmap resolution must be positive".into()));
    }
    let n = kps.len();
    let mut data = vec![0.0; n * h * w];
    let mut out_of_bounds = Vec::new();
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (i, (c, &v)) in kps.coords.iter().zip(&kps.visibility).enumerate() {
        if v == VIS_UNLABELED {
            continue;
        }
        let (u, vv) = (c[0] / stride, c[1] / stride);
        if u < -0.5 || u >= w as f64 - 0.5 || vv < -0.5 || vv >= h as f64 - 0.5 {
            out_of_bounds.push(i);
        }
        let plane = &mut data[i * h * w..(i + 1) * h * w];
        // Separable: exp(-(dx²+dy²)/2σ²) = exp(-dx²/2σ²)·exp(-dy²/2σ²).
        let gx: Vec<f64> = (0..w)
            .map(|x| (-(x as f64 - u).powi(2) * inv).exp())
            .collect();
        for y in 0..h {
            let gy = (-(y as f64 - vv).powi(2) * inv).exp();
            for x in 0..w {
                plane[y * w + x] = gy * gx[x];
            }
        }
    }
    Ok(Encoded {
        heatmaps: HeatmapStack::new(Tensor::from_parts(vec![n, h, w], data), stride)?,
        out_of_bounds,
    })
}

/// Argmax per channel with a quarter-cell shift toward the larger axis neighbour.
///
/// Ties resolve to the smallest row-major index. The shift is applied on an
/// axis only when both neighbours on that axis exist.
pub fn decode(hm: &HeatmapStack, vis_threshold: f64) -> KeypointSet {
    let (h, w) = hm.resolution();
    let n = hm.channels();
    let mut coords = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut visibility = Vec::with_capacity(n);
    for i in 0..n {
        let plane = hm.channel(i);
        let mut best = 0;
        for (idx, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = idx;
            }
        }
        let (row, col) = (best / w, best % w);
        let mut x = col as f64;
        let mut y = row as f64;
        if col > 0 && col + 1 < w {
            x += 0.25 * sign(plane[best + 1] - plane[best - 1]);
        }
        if row > 0 && row + 1 < h {
            y += 0.25 * sign(plane[best + w] - plane[best - w]);
        }
        let score = if plane[best].is_nan() {
            0.0
        } else {
            plane[best].clamp(0.0, 1.0)
        };
        coords.push([x * hm.stride, y * hm.stride]);
        visibility.push(if score >= vis_threshold {
            VIS_VISIBLE
        } else {
            VIS_OCCLUDED
        });
        scores.push(score);
    }
    let bbox = bbox_around(&coords, 0.0);
    KeypointSet {
        coords,
        visibility,
        bbox,
        species: String::new(),
        score: Some(scores),
    }
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Plain-text graymap (P2) of one channel, values clamped to [0,1] and scaled to 0–255.
pub fn channel_to_pgm(hm: &HeatmapStack, channel: usize) -> String {
    let (h, w) = hm.resolution();
    let mut s = format!("P2\n{w} {h}\n255\n");
    for row in hm.channel(channel).chunks(w) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    s
}

/// Write every channel as `<prefix>_<k>.pgm` under `dir`.
pub fn dump_pgm(hm: &HeatmapStack, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..hm.channels())
        .map(|k| {
            let path = dir.join(format!("{prefix}_{k:02}.pgm"));
            write_file(&path, channel_to_pgm(hm, k).as_bytes())?;
            Ok(path)
        })
        .collect()
}
