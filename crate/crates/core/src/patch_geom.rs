//! Patch-dataset geometry: ROI-to-canvas planning, aspect-preserving box
//! downsampling, centered zero padding, tissue-gated negative sampling and
//! patient-level splitting.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Side length of the square model input.
pub const CANVAS: usize = 512;
/// Negative patches must have strictly fewer zero pixels than this share.
pub const MAX_ZERO_FRACTION: f64 = 0.10;
pub const DEFAULT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    /// Row-major.
    pub pixels: Vec<u16>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, maxval: u16, pixels: Vec<u16>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Image(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            maxval,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, maxval: u16, value: u16) -> Self {
        Self {
            width,
            height,
            maxval,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u16) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn contains(&self, roi: &RoiBox) -> bool {
        roi.width >= 1
            && roi.height >= 1
            && roi.x + roi.width <= self.width
            && roi.y + roi.height <= self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoiBox {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl RoiBox {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    /// True when the two boxes share at least one pixel.
    pub fn overlaps(&self, other: &RoiBox) -> bool {
        self.x < other.x + other.width
            && other.x < self.x + self.width
            && self.y < other.y + other.height
            && other.y < self.y + self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub source: RoiBox,
    /// In (0, 1]; 1 means no resampling.
    pub scale: f64,
    pub scaled_width: usize,
    pub scaled_height: usize,
    pub pad_left: usize,
    pub pad_top: usize,
}

/// Half-up rounding of a non-negative value.
fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

pub fn plan_patch(roi: &RoiBox) -> Result<PatchPlan> {
    if roi.width == 0 || roi.height == 0 {
        return Err(Error::Geometry(format!(
            "degenerate ROI {}x{}",
            roi.width, roi.height
        )));
    }
    let longest = roi.width.max(roi.height);
    let (scale, scaled_width, scaled_height) = if longest <= CANVAS {
        (1.0, roi.width, roi.height)
    } else {
        let scale = CANVAS as f64 / longest as f64;
        let fit = |dim: usize| {
            if dim == longest {
                CANVAS
            } else {
                round_half_up(dim as f64 * scale).clamp(1, CANVAS)
            }
        };
        (scale, fit(roi.width), fit(roi.height))
    };
    Ok(PatchPlan {
        source: *roi,
        scale,
        scaled_width,
        scaled_height,
        pad_left: (CANVAS - scaled_width) / 2,
        pad_top: (CANVAS - scaled_height) / 2,
    })
}

/// Source-pixel weights for each destination pixel of a 1-D box
/// downsample from `src` to `dst` samples.
fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let start = j as f64 * ratio;
            let end = (j + 1) as f64 * ratio;
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(src);
            (first..last)
                .filter_map(|i| {
                    let overlap = (end.min((i + 1) as f64) - start.max(i as f64)) / ratio;
                    (overlap > 0.0).then_some((i, overlap))
                })
                .collect()
        })
        .collect()
}

/// Crops `plan.source`, box-downsamples it to the planned size and centers
/// it on a zero 512x512 canvas.
pub fn extract(image: &RasterImage, plan: &PatchPlan) -> Result<RasterImage> {
    let src = plan.source;
    if !image.contains(&src) {
        return Err(Error::Geometry(format!(
            "plan box {}x{}+{}+{} exceeds the {}x{} image",
            src.width, src.height, src.x, src.y, image.width, image.height
        )));
    }
    let consistent = plan.scaled_width >= 1
        && plan.scaled_height >= 1
        && plan.scaled_width <= src.width.min(CANVAS)
        && plan.scaled_height <= src.height.min(CANVAS)
        && plan.pad_left + plan.scaled_width <= CANVAS
        && plan.pad_top + plan.scaled_height <= CANVAS;
    if !consistent {
        return Err(Error::Geometry("patch plan is inconsistent with its source box".into()));
    }

    let mut canvas = RasterImage::filled(CANVAS, CANVAS, image.maxval, 0);
    if plan.scaled_width == src.width && plan.scaled_height == src.height {
        for row in 0..src.height {
            let from = (src.y + row) * image.width + src.x;
            let to = (plan.pad_top + row) * CANVAS + plan.pad_left;
            canvas.pixels[to..to + src.width].copy_from_slice(&image.pixels[from..from + src.width]);
        }
        return Ok(canvas);
    }

    let wx = box_weights(src.width, plan.scaled_width);
    let wy = box_weights(src.height, plan.scaled_height);
    // Horizontal pass into a float buffer, then vertical.
    let mut horizontal = vec![0.0f64; src.height * plan.scaled_width];
    for row in 0..src.height {
        let line = &image.pixels[(src.y + row) * image.width + src.x..][..src.width];
        for (j, weights) in wx.iter().enumerate() {
            horizontal[row * plan.scaled_width + j] =
                weights.iter().map(|&(i, w)| line[i] as f64 * w).sum();
        }
    }
    for (r, weights) in wy.iter().enumerate() {
        for c in 0..plan.scaled_width {
            let v: f64 = weights
                .iter()
                .map(|&(i, w)| horizontal[i * plan.scaled_width + c] * w)
                .sum();
            let v = v.round().clamp(0.0, image.maxval as f64) as u16;
            canvas.set(plan.pad_left + c, plan.pad_top + r, v);
        }
    }
    Ok(canvas)
}

pub fn zero_fraction(image: &RasterImage, roi: &RoiBox) -> Result<f64> {
    if !image.contains(roi) {
        return Err(Error::Geometry("box outside image".into()));
    }
    let zeros: usize = (roi.y..roi.y + roi.height)
        .map(|y| {
            image.pixels[y * image.width + roi.x..][..roi.width]
                .iter()
                .filter(|&&p| p == 0)
                .count()
        })
        .sum();
    Ok(zeros as f64 / (roi.width * roi.height) as f64)
}

/// Summed-area table of zero pixels for O(1) box queries.
struct ZeroIndex {
    stride: usize,
    table: Vec<u32>,
}

impl ZeroIndex {
    fn new(image: &RasterImage) -> Self {
        let stride = image.width + 1;
        let mut table = vec![0u32; stride * (image.height + 1)];
        for y in 0..image.height {
            let mut row = 0u32;
            for x in 0..image.width {
                row += (image.get(x, y) == 0) as u32;
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        Self { stride, table }
    }

    fn zeros(&self, b: &RoiBox) -> u32 {
        let at = |x: usize, y: usize| self.table[y * self.stride + x];
        at(b.x + b.width, b.y + b.height) + at(b.x, b.y)
            - at(b.x + b.width, b.y)
            - at(b.x, b.y + b.height)
    }
}

/// Rejection sampler for negative patches on one image.
pub struct NegativeSampler<'a> {
    image: &'a RasterImage,
    rois: &'a [RoiBox],
    index: ZeroIndex,
    pub attempts: usize,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(image: &'a RasterImage, rois: &'a [RoiBox]) -> Self {
        Self {
            image,
            rois,
            index: ZeroIndex::new(image),
            attempts: DEFAULT_ATTEMPTS,
        }
    }

    /// Draws a box whose size comes from `sizes`, lying inside the image,
    /// sharing no pixel with any ROI and holding < 10% zero pixels.
    pub fn sample<R: Rng>(&self, sizes: &[(usize, usize)], rng: &mut R) -> Result<RoiBox> {
        if sizes.is_empty() {
            return Err(Error::Geometry("empty size distribution".into()));
        }
        for _ in 0..self.attempts {
            let (w, h) = sizes[rng.gen_range(0..sizes.len())];
            if w == 0 || h == 0 || w > self.image.width || h > self.image.height {
                continue;
            }
            let candidate = RoiBox::new(
                rng.gen_range(0..=self.image.width - w),
                rng.gen_range(0..=self.image.height - h),
                w,
                h,
            );
            if self.rois.iter().any(|r| r.overlaps(&candidate)) {
                continue;
            }
            let zero_share = self.index.zeros(&candidate) as f64 / (w * h) as f64;
            if zero_share < MAX_ZERO_FRACTION {
                return Ok(candidate);
            }
        }
        Err(Error::NoValidPatch {
            attempts: self.attempts,
        })
    }
}

pub fn sample_negative(
    image: &RasterImage,
    rois: &[RoiBox],
    sizes: &[(usize, usize)],
    seed: u64,
) -> Result<RoiBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NegativeSampler::new(image, rois).sample(sizes, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self> {
        let f = Self {
            train,
            validation,
            test,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
            return Err(Error::Geometry(format!(
                "split fractions must all be positive, got {parts:?}"
            )));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Geometry(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn get(&self, split: Split) -> f64 {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }
}

impl Default for SplitFractions {
    /// Patch shares 55.6% / 18.9% / 25.5%.
    fn default() -> Self {
        Self {
            train: 0.556,
            validation: 0.189,
            test: 0.255,
        }
    }
}

/// Assigns every patient to exactly one split.
///
/// Patients are ordered by a seeded hash of their id and cut at the rounded
/// cumulative fractions, so split sizes track the targets exactly and the
/// assignment is reproducible from (ids, seed).
pub fn split_patients<S: AsRef<str>>(
    patient_ids: &[S],
    fractions: &SplitFractions,
    seed: u64,
) -> Result<BTreeMap<String, Split>> {
    fractions.validate()?;
    let mut keyed: Vec<(u64, &str)> = patient_ids
        .iter()
        .map(|id| (derive_seed(seed, id.as_ref()), id.as_ref()))
        .collect();
    keyed.sort_unstable();
    keyed.dedup_by(|a, b| a.1 == b.1);

    let n = keyed.len();
    let mut bounds = Vec::with_capacity(3);
    let mut cumulative = 0.0;
    for split in Split::ALL {
        cumulative += fractions.get(split);
        bounds.push((split, ((n as f64 * cumulative).round() as usize).min(n)));
    }
    bounds.last_mut().expect("three splits").1 = n;

    let mut out = BTreeMap::new();
    for (rank, (_, id)) in keyed.into_iter().enumerate() {
        let split = bounds
            .iter()
            .find(|(_, end)| rank < *end)
            .map(|(s, _)| *s)
            .expect("last bound covers all ranks");
        out.insert(id.to_string(), split);
    }
    Ok(out)
}
