//! Layer data model: masks, layer images, layer sets and the compositing
//! algebra that flattens a layer set into a single image.
//!
//! Images are stored planar (`C × H × W`, three channels) with values in
//! `[-1, 1]`. Masks are single-channel `H × W` grids in `[0, 1]`; conversion
//! to the diffusion range happens at the schedule/denoiser boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prompt carried by every background layer.
pub const BACKGROUND_PROMPT: &str = "the background";

/// Numerical slack allowed when checking mask sums.
pub const MASK_EPS: f32 = 1e-6;

pub const MIN_LAYERS: usize = 2;
pub const MAX_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMask {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl LayerMask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Invalid(format!(
                "mask value {v} at pixel ({}, {}) outside [0, 1]",
                i / width,
                i % width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1.0)
    }

    /// Builds a binary mask from a predicate over `(y, x)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(if f(y, x) { 1.0 } else { 0.0 });
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn check_binary(&self) -> Result<()> {
        match self
            .data
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0.0 && v != 1.0)
        {
            None => Ok(()),
            Some((i, &value)) => Err(Error::NonBinaryMask {
                y: i / self.width,
                x: i % self.width,
                value,
            }),
        }
    }

    /// Fraction of the grid covered by the mask.
    pub fn area_fraction(&self) -> f32 {
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }

    /// Mask values mapped to the diffusion range `[-1, 1]`.
    pub fn to_signed(&self) -> Vec<f32> {
        self.data.iter().map(|&m| 2.0 * m - 1.0).collect()
    }

    /// Inverse of [`LayerMask::to_signed`], clamping into `[0, 1]`.
    pub fn from_signed(height: usize, width: usize, signed: &[f32]) -> Result<Self> {
        let data = signed
            .iter()
            .map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
            .collect();
        Self::new(height, width, data)
    }

    /// Elementwise `self ∧ ¬other` for binary masks.
    pub fn subtract(&self, other: &LayerMask) -> Result<LayerMask> {
        same_dims(self.dims(), other.dims())?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| if a > 0.0 && b == 0.0 { a } else { 0.0 })
            .collect();
        Ok(LayerMask {
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Intersection-over-union of two binary masks. Two empty masks score 1.
    pub fn iou(&self, other: &LayerMask) -> Result<f32> {
        same_dims(self.dims(), other.dims())?;
        let (mut inter, mut union) = (0.0f32, 0.0f32);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += a.min(b);
            union += a.max(b);
        }
        Ok(if union == 0.0 { 1.0 } else { inter / union })
    }
}

/// Three-channel planar image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planar3 {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub type CompositeImage = Planar3;

impl Planar3 {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Replicates a single-channel mask into three identical planes.
    pub fn from_mask_replicated(mask: &LayerMask) -> Self {
        let mut data = Vec::with_capacity(3 * mask.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&mask.data);
        }
        Self {
            height: mask.height,
            width: mask.width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    /// Per-pixel channel mean.
    pub fn channel_mean(&self) -> Vec<f32> {
        let plane = self.height * self.width;
        (0..plane)
            .map(|i| (self.data[i] + self.data[plane + i] + self.data[2 * plane + i]) / 3.0)
            .collect()
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForegroundLayer {
    pub image: Planar3,
    pub mask: LayerMask,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSet {
    pub background_image: Planar3,
    pub background_mask: LayerMask,
    pub background_prompt: String,
    pub foregrounds: Vec<ForegroundLayer>,
    pub global_prompt: String,
}

impl LayerSet {
    /// Assembles a layer set, deriving the background mask from the
    /// foreground masks.
    pub fn from_foregrounds(
        background_image: Planar3,
        foregrounds: Vec<ForegroundLayer>,
        global_prompt: impl Into<String>,
    ) -> Result<Self> {
        let masks: Vec<&LayerMask> = foregrounds.iter().map(|f| &f.mask).collect();
        let (h, w) = background_image.dims();
        let background_mask = complement_of(&masks, h, w)?;
        Ok(Self {
            background_image,
            background_mask,
            background_prompt: BACKGROUND_PROMPT.to_string(),
            foregrounds,
            global_prompt: global_prompt.into(),
        })
    }

    pub fn num_layers(&self) -> usize {
        1 + self.foregrounds.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.background_image.dims()
    }

    /// Layer images with the background first.
    pub fn images(&self) -> Vec<&Planar3> {
        std::iter::once(&self.background_image)
            .chain(self.foregrounds.iter().map(|f| &f.image))
            .collect()
    }

    /// Layer masks with the background first.
    pub fn masks(&self) -> Vec<&LayerMask> {
        std::iter::once(&self.background_mask)
            .chain(self.foregrounds.iter().map(|f| &f.mask))
            .collect()
    }

    /// Layer prompts with the background first.
    pub fn layer_prompts(&self) -> Vec<String> {
        std::iter::once(self.background_prompt.clone())
            .chain(self.foregrounds.iter().map(|f| f.prompt.clone()))
            .collect()
    }

    /// Checks shapes, value ranges, mask binarity, pairwise disjointness of
    /// the foregrounds, the complement rule and the layer count.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_layers();
        if !(MIN_LAYERS..=MAX_LAYERS).contains(&n) {
            return Err(Error::InvalidLayerSet(format!(
                "layer count {n} outside [{MIN_LAYERS}, {MAX_LAYERS}]"
            )));
        }
        self.validate_structure()
    }

    /// Like [`LayerSet::validate`] but without the layer-count bound.
    pub fn validate_structure(&self) -> Result<()> {
        let dims = self.dims();
        for (i, img) in self.images().into_iter().enumerate() {
            same_dims(dims, img.dims())
                .map_err(|e| Error::InvalidLayerSet(format!("layer {i} image: {e}")))?;
            if !img.in_range() {
                return Err(Error::InvalidLayerSet(format!(
                    "layer {i} image has values outside [-1, 1]"
                )));
            }
        }
        for (i, m) in self.masks().into_iter().enumerate() {
            same_dims(dims, m.dims())
                .map_err(|e| Error::InvalidLayerSet(format!("layer {i} mask: {e}")))?;
            m.check_binary()?;
        }
        let fg: Vec<&LayerMask> = self.foregrounds.iter().map(|f| &f.mask).collect();
        for a in 0..fg.len() {
            for b in a + 1..fg.len() {
                if let Some(i) = fg[a]
                    .data
                    .iter()
                    .zip(&fg[b].data)
                    .position(|(&p, &q)| p * q != 0.0)
                {
                    return Err(Error::InvalidLayerSet(format!(
                        "foreground masks {} and {} overlap at pixel ({}, {})",
                        a + 1,
                        b + 1,
                        i / dims.1,
                        i % dims.1
                    )));
                }
            }
        }
        let expected = complement_of(&fg, dims.0, dims.1)?;
        if expected != self.background_mask {
            return Err(Error::InvalidLayerSet(
                "background mask is not the complement of the foreground masks".into(),
            ));
        }
        Ok(())
    }
}

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!(
            "expected {}x{}, got {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// Flattens a layer set: `I = m_b·B + Σ m_i·F_i` per pixel.
///
/// With `strict` set, all masks must be binary.
pub fn composite(layers: &LayerSet, strict: bool) -> Result<CompositeImage> {
    let (h, w) = layers.dims();
    for (i, img) in layers.images().into_iter().enumerate() {
        same_dims((h, w), img.dims())
            .map_err(|e| Error::Shape(format!("layer {i} image: {e}")))?;
    }
    for (i, m) in layers.masks().into_iter().enumerate() {
        same_dims((h, w), m.dims()).map_err(|e| Error::Shape(format!("layer {i} mask: {e}")))?;
        if strict {
            m.check_binary()?;
        }
    }
    let plane = h * w;
    let mut out = vec![0.0f32; 3 * plane];
    for (img, mask) in layers.images().into_iter().zip(layers.masks()) {
        for c in 0..3 {
            let src = &img.data[c * plane..(c + 1) * plane];
            let dst = &mut out[c * plane..(c + 1) * plane];
            for ((o, &v), &m) in dst.iter_mut().zip(src).zip(&mask.data) {
                if m != 0.0 {
                    *o += m * v;
                }
            }
        }
    }
    Planar3::new(h, w, out)
}

/// Background mask `1 − Σ m_i`. Fails if the foregrounds overlap by more
/// than [`MASK_EPS`] anywhere.
pub fn background_from_foregrounds(
    masks: &[LayerMask],
    height: usize,
    width: usize,
) -> Result<LayerMask> {
    let refs: Vec<&LayerMask> = masks.iter().collect();
    complement_of(&refs, height, width)
}

fn complement_of(masks: &[&LayerMask], height: usize, width: usize) -> Result<LayerMask> {
    let mut sum = vec![0.0f32; height * width];
    for m in masks {
        same_dims((height, width), m.dims())?;
        for (s, &v) in sum.iter_mut().zip(&m.data) {
            *s += v;
        }
    }
    let mut data = Vec::with_capacity(sum.len());
    for (i, s) in sum.into_iter().enumerate() {
        if s > 1.0 + MASK_EPS {
            return Err(Error::Overlap {
                y: i / width,
                x: i % width,
                sum: s,
            });
        }
        data.push((1.0 - s).clamp(0.0, 1.0));
    }
    Ok(LayerMask {
        height,
        width,
        data,
    })
}

/// Per pixel, assigns 1 to the layer with the highest score and 0 to all
/// others. Ties go to the lowest layer index.
pub fn binarize_scores(scores: &[Vec<f32>], height: usize, width: usize) -> Result<Vec<LayerMask>> {
    if scores.is_empty() {
        return Err(Error::Invalid("binarize needs at least one layer".into()));
    }
    let plane = height * width;
    if let Some(s) = scores.iter().find(|s| s.len() != plane) {
        return Err(Error::Shape(format!(
            "score map has {} values, expected {plane}",
            s.len()
        )));
    }
    let mut out = vec![vec![0.0f32; plane]; scores.len()];
    for p in 0..plane {
        let mut best = 0;
        for l in 1..scores.len() {
            if scores[l][p] > scores[best][p] {
                best = l;
            }
        }
        out[best][p] = 1.0;
    }
    Ok(out
        .into_iter()
        .map(|data| LayerMask {
            height,
            width,
            data,
        })
        .collect())
}

/// Binarizes decoded three-channel soft masks: channels are averaged, then
/// the per-pixel argmax layer wins.
pub fn binarize_masks(soft_masks: &[Planar3]) -> Result<Vec<LayerMask>> {
    let first = soft_masks
        .first()
        .ok_or_else(|| Error::Invalid("binarize needs at least one layer".into()))?;
    let (h, w) = first.dims();
    let mut scores = Vec::with_capacity(soft_masks.len());
    for m in soft_masks {
        same_dims((h, w), m.dims())?;
        scores.push(m.channel_mean());
    }
    binarize_scores(&scores, h, w)
}

/// Morphological max-filter with a square `kernel × kernel` window.
pub fn dilate_mask(mask: &LayerMask, kernel: usize) -> Result<LayerMask> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Invalid(format!(
            "dilation kernel must be odd and >= 1, got {kernel}"
        )));
    }
    mask.check_binary()?;
    let r = kernel / 2;
    let (h, w) = mask.dims();
    // separable: rows then columns
    let mut rows = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = (lo..=hi).map(|xx| mask.data[y * w + xx]).fold(0.0, f32::max);
        }
    }
    let mut data = vec![0.0f32; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            data[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).fold(0.0, f32::max);
        }
    }
    Ok(LayerMask {
        height: h,
        width: w,
        data,
    })
}
