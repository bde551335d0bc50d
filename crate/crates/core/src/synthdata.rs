//! Procedural single-animal crops with exact keypoint labels.
//!
//! A pose is sampled by forward kinematics over a fixed skeleton, drawn as
//! coloured anti-aliased bones over a value-noise background, optionally
//! covered by one rectangular occluder, and written as P3 images plus a
//! COCO-style keypoint annotation file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{create_dir, read_file, write_file, Error, Result};
use crate::heatmap::{bbox_around, KeypointSet, VIS_OCCLUDED, VIS_UNLABELED, VIS_VISIBLE};
use crate::numerics::Tensor;
use crate::rng::Rng;

/// Skeleton offsets are authored for this canvas side; other canvases scale them.
pub const REFERENCE_CANVAS: usize = 64;
pub const DEFAULT_CANVAS: usize = 64;
pub const DEFAULT_OCCLUSION_PROB: f64 = 0.3;
pub const DEFAULT_SCALE_RANGE: (f64, f64) = (0.5, 0.9);
/// Minimum distance in pixels between any keypoint and the canvas border.
pub const PLACEMENT_MARGIN: f64 = 2.0;
/// Fraction of the tight keypoint box added to each bbox dimension.
pub const BBOX_PAD: f64 = 0.1;
const POSE_ATTEMPTS: usize = 64;

pub const ANNOTATION_FILE: &str = "annotations.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    pub name: String,
    pub keypoints: Vec<String>,
    /// Parent index per keypoint; `None` marks the root.
    pub parent: Vec<Option<usize>>,
    /// Offset from the parent in the parent's frame, pixels at unit scale.
    pub rest_offsets: Vec<[f64; 2]>,
    /// Joint rotation range relative to the parent, radians.
    pub angle_ranges: Vec<(f64, f64)>,
    pub limb_pairs: Vec<(usize, usize)>,
}

impl SkeletonSpec {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn root(&self) -> Option<usize> {
        self.parent.iter().position(Option::is_none)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let fail = |m: String| Err(Error::Validation(format!("skeleton {}: {m}", self.name)));
        if n == 0 {
            return fail("no keypoints".into());
        }
        if self.parent.len() != n || self.rest_offsets.len() != n || self.angle_ranges.len() != n {
            return fail("per-keypoint arrays differ in length".into());
        }
        if self.parent.iter().filter(|p| p.is_none()).count() != 1 {
            return fail("expected exactly one root".into());
        }
        for i in 0..n {
            let mut cur = i;
            let mut hops = 0;
            while let Some(p) = self.parent[cur] {
                if p >= n {
                    return fail(format!("keypoint {i} has parent {p} out of range"));
                }
                cur = p;
                hops += 1;
                if hops > n {
                    return fail(format!("cycle through keypoint {i}"));
                }
            }
        }
        for (i, &(lo, hi)) in self.angle_ranges.iter().enumerate() {
            if !(lo <= hi) {
                return fail(format!("angle range of keypoint {i} is empty"));
            }
        }
        for &(a, b) in &self.limb_pairs {
            if a >= n || b >= n || a == b {
                return fail(format!("invalid limb ({a}, {b})"));
            }
        }
        let rest = self.pose(&vec![0.0; n], 0.0, 1.0);
        for i in 0..n {
            for j in i + 1..n {
                if dist(rest[i], rest[j]) < 1.0 {
                    return fail(format!("rest keypoints {i} and {j} closer than one pixel"));
                }
            }
        }
        Ok(())
    }

    /// Order in which every parent precedes its children.
    fn topo_order(&self) -> Vec<usize> {
        let mut depth = vec![0usize; self.len()];
        for (i, d) in depth.iter_mut().enumerate() {
            let mut cur = i;
            while let Some(p) = self.parent[cur] {
                *d += 1;
                cur = p;
            }
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| (depth[i], i));
        order
    }

    /// Forward kinematics with the root at the origin facing `rotation`.
    pub fn pose(&self, angles: &[f64], rotation: f64, scale: f64) -> Vec<[f64; 2]> {
        let n = self.len();
        let mut pos = vec![[0.0; 2]; n];
        let mut heading = vec![0.0; n];
        for i in self.topo_order() {
            match self.parent[i] {
                None => heading[i] = rotation + angles[i],
                Some(p) => {
                    heading[i] = heading[p] + angles[i];
                    let (s, c) = heading[i].sin_cos();
                    let [ox, oy] = self.rest_offsets[i];
                    pos[i] = [
                        pos[p][0] + scale * (c * ox - s * oy),
                        pos[p][1] + scale * (s * ox + c * oy),
                    ];
                }
            }
        }
        pos
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Top-down quadruped with 17 keypoints, facing +x, left side at negative y.
///
/// | idx | name | parent |
/// |-----|------|--------|
/// | 0, 1 | left/right eye | nose |
/// | 2 | nose | neck |
/// | 3 | neck (root) | |
/// | 4 | tail root | neck |
/// | 5, 6, 7 | left shoulder, elbow, front paw | neck, 5, 6 |
/// | 8, 9, 10 | right shoulder, elbow, front paw | neck, 8, 9 |
/// | 11, 12, 13 | left hip, knee, back paw | tail root, 11, 12 |
/// | 14, 15, 16 | right hip, knee, back paw | tail root, 14, 15 |
pub fn builtin_quadruped() -> SkeletonSpec {
    let names = [
        "left_eye",
        "right_eye",
        "nose",
        "neck",
        "tail_root",
        "left_shoulder",
        "left_elbow",
        "left_front_paw",
        "right_shoulder",
        "right_elbow",
        "right_front_paw",
        "left_hip",
        "left_knee",
        "left_back_paw",
        "right_hip",
        "right_knee",
        "right_back_paw",
    ];
    let parent = [
        Some(2),
        Some(2),
        Some(3),
        None,
        Some(3),
        Some(3),
        Some(5),
        Some(6),
        Some(3),
        Some(8),
        Some(9),
        Some(4),
        Some(11),
        Some(12),
        Some(4),
        Some(14),
        Some(15),
    ];
    let offsets = [
        [-2.0, -4.5],
        [-2.0, 4.5],
        [12.0, 0.0],
        [0.0, 0.0],
        [-26.0, 0.0],
        [-3.0, -6.0],
        [2.0, -9.0],
        [4.0, -8.0],
        [-3.0, 6.0],
        [2.0, 9.0],
        [4.0, 8.0],
        [3.0, -6.0],
        [-2.0, -9.0],
        [-4.0, -8.0],
        [3.0, 6.0],
        [-2.0, 9.0],
        [-4.0, 8.0],
    ];
    let head = (-0.4, 0.4);
    let rigid = (0.0, 0.0);
    let limb = (-0.5, 0.5);
    let angles = [
        rigid,
        rigid,
        head,
        rigid,
        (-0.3, 0.3),
        rigid,
        limb,
        limb,
        rigid,
        limb,
        limb,
        rigid,
        limb,
        limb,
        rigid,
        limb,
        limb,
    ];
    SkeletonSpec {
        name: "quadruped".into(),
        keypoints: names.iter().map(|s| s.to_string()).collect(),
        parent: parent.to_vec(),
        rest_offsets: offsets.to_vec(),
        angle_ranges: angles.to_vec(),
        limb_pairs: vec![
            (2, 0),
            (2, 1),
            (3, 2),
            (3, 4),
            (3, 5),
            (5, 6),
            (6, 7),
            (3, 8),
            (8, 9),
            (9, 10),
            (4, 11),
            (11, 12),
            (12, 13),
            (4, 14),
            (14, 15),
            (15, 16),
        ],
    }
}

/// Sample joint angles and a global rotation, then translate so every
/// keypoint sits at least [`PLACEMENT_MARGIN`] pixels inside the canvas.
pub fn sample_pose(
    spec: &SkeletonSpec,
    scale: f64,
    canvas: (usize, usize),
    seed: u64,
) -> Result<KeypointSet> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!(
            "pose scale must be positive, got {scale}"
        )));
    }
    spec.validate()?;
    let mut rng = Rng::derive(seed, 0);
    let (w, h) = (canvas.0 as f64, canvas.1 as f64);
    let (room_x, room_y) = (
        w - 1.0 - 2.0 * PLACEMENT_MARGIN,
        h - 1.0 - 2.0 * PLACEMENT_MARGIN,
    );
    for _ in 0..POSE_ATTEMPTS {
        let angles: Vec<f64> = spec
            .angle_ranges
            .iter()
            .map(|&(lo, hi)| rng.uniform_in(lo, hi))
            .collect();
        let rotation = rng.uniform_in(0.0, std::f64::consts::TAU);
        let pts = spec.pose(&angles, rotation, scale);
        let (x0, x1) = extent(pts.iter().map(|p| p[0]));
        let (y0, y1) = extent(pts.iter().map(|p| p[1]));
        if x1 - x0 > room_x || y1 - y0 > room_y {
            continue;
        }
        let tx = PLACEMENT_MARGIN - x0 + rng.uniform() * (room_x - (x1 - x0));
        let ty = PLACEMENT_MARGIN - y0 + rng.uniform() * (room_y - (y1 - y0));
        let coords: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] + tx, p[1] + ty]).collect();
        let bbox = bbox_around(&coords, BBOX_PAD / 2.0);
        return KeypointSet::new(
            coords,
            vec![VIS_VISIBLE; spec.len()],
            bbox,
            spec.name.clone(),
        );
    }
    Err(Error::Generation(format!(
        "skeleton at scale {scale} does not fit a {}x{} canvas",
        canvas.0, canvas.1
    )))
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Axis-aligned occluding rectangle in pixel coordinates, inclusive of its edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub color: [f64; 3],
}

impl Occluder {
    pub fn covers(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x && p[0] <= self.x + self.w && p[1] >= self.y && p[1] <= self.y + self.h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub scale: f64,
    pub occluders: Vec<Occluder>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` with values in `[0, 1]`.
    pub image: Tensor,
    pub kps: KeypointSet,
    pub meta: SampleMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub canvas: (usize, usize),
    pub occlusion_prob: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            canvas: (DEFAULT_CANVAS, DEFAULT_CANVAS),
            occlusion_prob: DEFAULT_OCCLUSION_PROB,
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Base colour of bone `i` out of `n`: evenly spaced hues.
pub fn bone_color(i: usize, n: usize) -> [f64; 3] {
    hsv(i as f64 / n.max(1) as f64, 0.85, 0.95)
}

/// Smooth noise: random lattice every 8 pixels, bilinearly interpolated.
fn value_noise(w: usize, h: usize, rng: &mut Rng) -> Vec<f64> {
    const CELL: usize = 8;
    let (gw, gh) = (w / CELL + 2, h / CELL + 2);
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (gy, fy) = (y / CELL, (y % CELL) as f64 / CELL as f64);
        for x in 0..w {
            let (gx, fx) = (x / CELL, (x % CELL) as f64 / CELL as f64);
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(gx, gy) * (1.0 - fx) + at(gx + 1, gy) * fx;
            let bot = at(gx, gy + 1) * (1.0 - fx) + at(gx + 1, gy + 1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

/// Draw `kps` with the bones of `spec` over a fresh background.
pub fn render(
    kps: &KeypointSet,
    spec: &SkeletonSpec,
    seed: u64,
    opts: &RenderOptions,
) -> Result<Sample> {
    let (w, h) = opts.canvas;
    if w == 0 || h == 0 {
        return Err(Error::Config("canvas must be non-empty".into()));
    }
    if !(0.0..=1.0).contains(&opts.occlusion_prob) {
        return Err(Error::Config(format!(
            "occlusion probability {} outside [0, 1]",
            opts.occlusion_prob
        )));
    }
    if kps.len() != spec.len() {
        return Err(Error::Validation(format!(
            "{} keypoints for a {}-keypoint skeleton",
            kps.len(),
            spec.len()
        )));
    }
    let mut rng = Rng::derive(seed, 1);
    let plane = w * h;
    let mut img = vec![0.0; 3 * plane];
    for c in 0..3 {
        let base = rng.uniform_in(0.15, 0.35);
        let noise = value_noise(w, h, &mut rng);
        for (px, n) in img[c * plane..(c + 1) * plane].iter_mut().zip(noise) {
            *px = base + 0.08 * n;
        }
    }

    let unit = w.min(h) as f64 / REFERENCE_CANVAS as f64;
    let half_width = (1.1 * unit).max(0.75);
    let nbones = spec.limb_pairs.len();
    for (bi, &(a, b)) in spec.limb_pairs.iter().enumerate() {
        let base = bone_color(bi, nbones);
        let color = base.map(|c| (c + rng.uniform_in(-0.06, 0.06)).clamp(0.0, 1.0));
        let (pa, pb) = (kps.coords[a], kps.coords[b]);
        let reach = half_width + 1.0;
        let x0 = (pa[0].min(pb[0]) - reach).floor().max(0.0) as usize;
        let x1 = ((pa[0].max(pb[0]) + reach).ceil().max(0.0) as usize).min(w - 1);
        let y0 = (pa[1].min(pb[1]) - reach).floor().max(0.0) as usize;
        let y1 = ((pa[1].max(pb[1]) + reach).ceil().max(0.0) as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = segment_distance([x as f64, y as f64], pa, pb);
                let cover = (half_width + 0.5 - d).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for (c, col) in color.iter().enumerate() {
                        let px = &mut img[c * plane + y * w + x];
                        *px += cover * (col - *px);
                    }
                }
            }
        }
    }

    let mut kps = kps.clone();
    let mut occluders = Vec::new();
    if rng.uniform() < opts.occlusion_prob {
        let ow = rng.uniform_in(6.0, 16.0) * unit;
        let oh = rng.uniform_in(6.0, 16.0) * unit;
        let occ = Occluder {
            x: rng.uniform_in(0.0, (w as f64 - ow).max(0.0)),
            y: rng.uniform_in(0.0, (h as f64 - oh).max(0.0)),
            w: ow,
            h: oh,
            color: [rng.uniform(), rng.uniform(), rng.uniform()],
        };
        for y in 0..h {
            for x in 0..w {
                if occ.covers([x as f64, y as f64]) {
                    for c in 0..3 {
                        img[c * plane + y * w + x] = occ.color[c];
                    }
                }
            }
        }
        for (v, p) in kps.visibility.iter_mut().zip(&kps.coords) {
            if *v == VIS_VISIBLE && occ.covers(*p) {
                *v = VIS_OCCLUDED;
            }
        }
        occluders.push(occ);
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Sample {
        image: Tensor::from_parts(vec![3, h, w], img),
        kps,
        meta: SampleMeta {
            seed,
            scale: 0.0,
            occluders,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub render: RenderOptions,
    /// Skeleton scale as a fraction of the reference canvas, drawn uniformly.
    pub scale_range: (f64, f64),
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            render: RenderOptions::default(),
            scale_range: DEFAULT_SCALE_RANGE,
        }
    }
}

/// Seed of sample `index` in a split seeded with `split_seed`.
pub fn sample_seed(split_seed: u64, index: usize) -> u64 {
    (split_seed << 20) | index as u64
}

pub const MAX_SPLIT_SIZE: usize = 1 << 20;

/// One full sample: scale draw, pose, and rendering, all from `seed`.
pub fn generate_sample(spec: &SkeletonSpec, seed: u64, opts: &GenerateOptions) -> Result<Sample> {
    let (lo, hi) = opts.scale_range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::Config(format!("invalid scale range ({lo}, {hi})")));
    }
    let frac = Rng::derive(seed, 2).uniform_in(lo, hi);
    let (w, h) = opts.render.canvas;
    let scale = frac * w.min(h) as f64 / REFERENCE_CANVAS as f64;
    let kps = sample_pose(spec, scale, opts.render.canvas, seed)?;
    let mut sample = render(&kps, spec, seed, &opts.render)?;
    sample.meta.scale = scale;
    Ok(sample)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub file: String,
    pub seed: u64,
    pub scale: f64,
    pub occluders: Vec<Occluder>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub skeleton: String,
    pub split_seed: u64,
    pub count: usize,
    pub options: GenerateOptions,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    #[serde(default = "default_category")]
    pub category_id: u64,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
    /// Flat `x, y, v` triplets.
    pub keypoints: Vec<f64>,
    pub num_keypoints: usize,
    pub area: f64,
}

fn default_category() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    pub keypoints: Vec<String>,
    /// One-based keypoint index pairs.
    pub skeleton: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoFile {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoAnnotation {
    pub fn from_keypoints(id: u64, image_id: u64, kps: &KeypointSet) -> Self {
        let keypoints = kps
            .coords
            .iter()
            .zip(&kps.visibility)
            .flat_map(|(c, &v)| [c[0], c[1], v as f64])
            .collect();
        CocoAnnotation {
            id,
            image_id,
            category_id: 1,
            bbox: kps.bbox,
            keypoints,
            num_keypoints: kps.labeled_count(),
            area: kps.bbox_area(),
        }
    }

    pub fn to_keypoints(&self, species: &str) -> Result<KeypointSet> {
        let (coords, visibility) = parse_triplets(&self.keypoints)?;
        KeypointSet::new(coords, visibility, self.bbox, species)
    }
}

/// Split flat `x, y, v` triplets into coordinates and visibility flags.
pub fn parse_triplets(flat: &[f64]) -> Result<(Vec<[f64; 2]>, Vec<u8>)> {
    if !flat.len().is_multiple_of(3) {
        return Err(Error::Validation(format!(
            "keypoint list length {} is not a multiple of 3",
            flat.len()
        )));
    }
    let mut coords = Vec::with_capacity(flat.len() / 3);
    let mut vis = Vec::with_capacity(flat.len() / 3);
    for t in flat.chunks(3) {
        let v = t[2];
        if !(v == 0.0 || v == 1.0 || v == 2.0) {
            return Err(Error::Validation(format!(
                "visibility flag {v} not in {{0, 1, 2}}"
            )));
        }
        coords.push([t[0], t[1]]);
        vis.push(if v == 0.0 { VIS_UNLABELED } else { v as u8 });
    }
    Ok((coords, vis))
}

impl CocoFile {
    pub fn category(&self) -> Result<&CocoCategory> {
        self.categories
            .first()
            .ok_or_else(|| Error::Validation("annotation file has no categories".into()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &to_json_bytes(self)?)
    }

    /// Ground-truth instances grouped per image, in image order.
    pub fn instances(&self) -> Result<Vec<(u64, Vec<KeypointSet>)>> {
        let species = self.category().map(|c| c.name.clone()).unwrap_or_default();
        let mut out: Vec<(u64, Vec<KeypointSet>)> =
            self.images.iter().map(|im| (im.id, Vec::new())).collect();
        for ann in &self.annotations {
            let slot = out
                .iter_mut()
                .find(|(id, _)| *id == ann.image_id)
                .ok_or_else(|| {
                    Error::Validation(format!(
                        "annotation {} references unknown image {}",
                        ann.id, ann.image_id
                    ))
                })?;
            slot.1.push(ann.to_keypoints(&species)?);
        }
        Ok(out)
    }
}

pub(crate) fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json("serialize", e))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Plain-text P3 pixmap, 8 bits per channel.
pub fn encode_ppm(image: &Tensor) -> Result<String> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("encode_ppm", s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let mut out = format!("P3\n{w} {h}\n255\n");
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .flat_map(|x| (0..3).map(move |c| (c, x)))
            .map(|(c, x)| quantize(d[c * plane + y * w + x]).to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parse a P3 pixmap into `[3, H, W]` with values scaled to `[0, 1]`.
pub fn decode_ppm(text: &[u8]) -> Result<Tensor> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < text.len() && tokens.len() < 4 {
        match text[i] {
            b'#' => {
                while i < text.len() && text[i] != b'\n' {
                    i += 1;
                }
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < text.len() && !text[i].is_ascii_whitespace() {
                    i += 1;
                }
                tokens.push((start, &text[start..i]));
            }
        }
    }
    if tokens.len() < 4 {
        return Err(Error::format(text.len(), "truncated PPM header"));
    }
    if tokens[0].1 != b"P3" {
        return Err(Error::format(0, "expected P3 magic"));
    }
    let num = |(off, tok): (usize, &[u8])| -> Result<usize> {
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(off, "expected an unsigned integer"))
    };
    let (w, h, maxval) = (num(tokens[1])?, num(tokens[2])?, num(tokens[3])?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::format(
            tokens[1].0,
            format!("invalid PPM geometry {w}x{h} max {maxval}"),
        ));
    }
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    let mut k = 0;
    while i < text.len() {
        if text[i].is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < text.len() && !text[i].is_ascii_whitespace() {
            i += 1;
        }
        if k >= 3 * plane {
            return Err(Error::format(start, "trailing pixel data"));
        }
        let v = num((start, &text[start..i]))?;
        if v > maxval {
            return Err(Error::format(
                start,
                format!("sample {v} exceeds max {maxval}"),
            ));
        }
        let (pix, c) = (k / 3, k % 3);
        data[c * plane + pix] = v as f64 / maxval as f64;
        k += 1;
    }
    if k != 3 * plane {
        return Err(Error::format(
            text.len(),
            format!("expected {} samples, found {k}", 3 * plane),
        ));
    }
    Ok(Tensor::from_parts(vec![3, h, w], data))
}

pub fn image_file_name(id: u64) -> String {
    format!("{IMAGE_DIR}/{id:06}.ppm")
}

/// Write `n` samples, their annotations and a manifest under `out_dir`.
pub fn generate_split(
    spec: &SkeletonSpec,
    n: usize,
    seed: u64,
    out_dir: &Path,
    opts: &GenerateOptions,
) -> Result<SplitManifest> {
    if n >= MAX_SPLIT_SIZE {
        return Err(Error::Config(format!(
            "split size {n} exceeds {}",
            MAX_SPLIT_SIZE - 1
        )));
    }
    if seed >= 1 << 44 {
        return Err(Error::Config(format!(
            "split seed {seed} must be below 2^44"
        )));
    }
    spec.validate()?;
    create_dir(&out_dir.join(IMAGE_DIR))?;
    let (w, h) = opts.render.canvas;
    let mut coco = CocoFile {
        images: Vec::with_capacity(n),
        annotations: Vec::with_capacity(n),
        categories: vec![CocoCategory {
            id: 1,
            name: spec.name.clone(),
            keypoints: spec.keypoints.clone(),
            skeleton: spec
                .limb_pairs
                .iter()
                .map(|&(a, b)| [a + 1, b + 1])
                .collect(),
        }],
    };
    let mut manifest = SplitManifest {
        skeleton: spec.name.clone(),
        split_seed: seed,
        count: n,
        options: opts.clone(),
        samples: Vec::with_capacity(n),
    };
    for i in 0..n {
        let sseed = sample_seed(seed, i);
        let sample = generate_sample(spec, sseed, opts)?;
        let id = i as u64;
        let file = image_file_name(id);
        write_file(&out_dir.join(&file), encode_ppm(&sample.image)?.as_bytes())?;
        coco.images.push(CocoImage {
            id,
            file: file.clone(),
            width: w,
            height: h,
        });
        coco.annotations
            .push(CocoAnnotation::from_keypoints(id, id, &sample.kps));
        manifest.samples.push(ManifestEntry {
            id,
            file,
            seed: sseed,
            scale: sample.meta.scale,
            occluders: sample.meta.occluders,
        });
    }
    coco.save(&out_dir.join(ANNOTATION_FILE))?;
    write_file(&out_dir.join(MANIFEST_FILE), &to_json_bytes(&manifest)?)?;
    Ok(manifest)
}

/// A generated or COCO-style split loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub category: CocoCategory,
    pub image_ids: Vec<u64>,
    pub images: Vec<Tensor>,
    /// Exactly one instance per image.
    pub instances: Vec<KeypointSet>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let coco = CocoFile::load(&dir.join(ANNOTATION_FILE))?;
        let category = coco.category()?.clone();
        let grouped = coco.instances()?;
        let mut ds = Dataset {
            root: dir.to_path_buf(),
            category,
            image_ids: Vec::with_capacity(grouped.len()),
            images: Vec::with_capacity(grouped.len()),
            instances: Vec::with_capacity(grouped.len()),
        };
        for (image, (id, mut inst)) in coco.images.iter().zip(grouped) {
            if inst.len() != 1 {
                return Err(Error::Validation(format!(
                    "image {id} has {} instances; single-instance crops expected",
                    inst.len()
                )));
            }
            let path = dir.join(&image.file);
            let tensor = decode_ppm(&read_file(&path)?).map_err(|e| match e {
                Error::Format { offset, msg } => Error::Format {
                    offset,
                    msg: format!("{}: {msg}", path.display()),
                },
                other => other,
            })?;
            if tensor.shape() != [3, image.height, image.width] {
                return Err(Error::Validation(format!(
                    "{} is {:?}, annotation says {}x{}",
                    path.display(),
                    tensor.shape(),
                    image.width,
                    image.height
                )));
            }
            ds.image_ids.push(id);
            ds.images.push(tensor);
            ds.instances.push(inst.pop().expect("one instance"));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn canvas(&self) -> Option<(usize, usize)> {
        self.images.first().map(|t| (t.shape()[2], t.shape()[1]))
    }
}
