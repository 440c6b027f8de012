//! Procedural multi-layer scenes (flat shapes over textured backgrounds) and
//! the on-disk dataset format: `manifest.jsonl` plus per-layer PNGs.

use std::fs;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layerspace::{
    dilate_mask, ForegroundLayer, LayerMask, LayerSet, Planar3, BACKGROUND_PROMPT, MAX_LAYERS,
    MIN_LAYERS,
};

pub const MIN_AREA: f32 = 0.01;
pub const MAX_AREA: f32 = 0.80;
/// Dilation applied to a foreground mask before cutting its image out of the
/// scene.
pub const CUTOUT_DILATION: usize = 5;
/// 8-bit value written outside the dilated cutout.
pub const FILL_U8: u8 = 128;

const ATTEMPTS_PER_SHRINK: usize = 100;
const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Plain,
    Gradient,
    Stripes,
    Checker,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Blue, Color::Green, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Blue => [40, 70, 220],
            Color::Green => [40, 180, 60],
            Color::Yellow => [235, 215, 40],
        }
    }

    /// Muted variant used for backgrounds.
    pub fn muted(self) -> [u8; 3] {
        self.rgb().map(|c| ((c as u16 + 2 * 110) / 3) as u8)
    }
}

impl Texture {
    pub const ALL: [Texture; 4] = [Texture::Plain, Texture::Gradient, Texture::Stripes, Texture::Checker];

    pub fn name(self) -> &'static str {
        match self {
            Texture::Plain => "plain",
            Texture::Gradient => "gradient",
            Texture::Stripes => "stripes",
            Texture::Checker => "checker",
        }
    }
}

/// Parses `"a {color} {shape}"`.
pub fn parse_layer_prompt(prompt: &str) -> Option<(Color, Shape)> {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    let (c, s) = match words.as_slice() {
        ["a", c, s] => (*c, *s),
        [c, s] => (*c, *s),
        _ => return None,
    };
    let color = Color::ALL.into_iter().find(|x| x.name() == c)?;
    let shape = Shape::ALL.into_iter().find(|x| x.name() == s)?;
    Some((color, shape))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForegroundSpec {
    pub shape: Shape,
    pub color: Color,
    /// Circumradius as a fraction of the canvas side.
    pub size: f32,
    /// Center in `[0, 1]²`.
    pub position: (f32, f32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_layers: usize,
    pub foregrounds: Vec<ForegroundSpec>,
    pub texture: Texture,
    pub background_color: Color,
}

fn size_range(num_foregrounds: usize) -> (f32, f32) {
    match num_foregrounds {
        1 => (0.15, 0.42),
        2 => (0.14, 0.30),
        _ => (0.12, 0.24),
    }
}

fn random_position<R: Rng + ?Sized>(size: f32, rng: &mut R) -> (f32, f32) {
    let lo = size.min(0.5);
    let hi = (1.0 - size).max(lo + f32::EPSILON);
    (rng.random_range(lo..hi), rng.random_range(lo..hi))
}

impl SceneSpec {
    /// Draws attributes and a first placement proposal from `seed`.
    pub fn random(seed: u64, num_layers: usize) -> Result<Self> {
        if !(MIN_LAYERS..=MAX_LAYERS).contains(&num_layers) {
            return Err(Error::Invalid(format!(
                "scene layer count {num_layers} outside [{MIN_LAYERS}, {MAX_LAYERS}]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = num_layers - 1;
        let (lo, hi) = size_range(k);
        let foregrounds = (0..k)
            .map(|_| {
                let size = rng.random_range(lo..hi);
                ForegroundSpec {
                    shape: *Shape::ALL.choose(&mut rng).expect("non-empty"),
                    color: *Color::ALL.choose(&mut rng).expect("non-empty"),
                    size,
                    position: random_position(size, &mut rng),
                }
            })
            .collect();
        Ok(Self {
            seed,
            num_layers,
            foregrounds,
            texture: *Texture::ALL.choose(&mut rng).expect("non-empty"),
            background_color: *Color::ALL.choose(&mut rng).expect("non-empty"),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_LAYERS..=MAX_LAYERS).contains(&self.num_layers) {
            return Err(Error::Invalid(format!(
                "scene layer count {} outside [{MIN_LAYERS}, {MAX_LAYERS}]",
                self.num_layers
            )));
        }
        if self.foregrounds.len() + 1 != self.num_layers {
            return Err(Error::Invalid(format!(
                "{} foregrounds for {} layers",
                self.foregrounds.len(),
                self.num_layers
            )));
        }
        for f in &self.foregrounds {
            if !(f.size > 0.0 && f.size <= 1.0) {
                return Err(Error::Invalid(format!("foreground size {} outside (0, 1]", f.size)));
            }
            let (x, y) = f.position;
            if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                return Err(Error::Invalid(format!("foreground position {:?} outside [0, 1]²", f.position)));
            }
        }
        Ok(())
    }
}

/// Layer prompts (background first) and the global prompt.
pub fn caption(spec: &SceneSpec) -> (String, Vec<String>) {
    let phrases: Vec<String> = spec
        .foregrounds
        .iter()
        .map(|f| format!("a {} {}", f.color.name(), f.shape.name()))
        .collect();
    let global = format!(
        "a {} {} background with {}",
        spec.background_color.name(),
        spec.texture.name(),
        phrases.join(" and ")
    );
    let mut layers = vec![BACKGROUND_PROMPT.to_string()];
    layers.extend(phrases);
    (global, layers)
}

fn polygon(center: (f32, f32), radius: f32, shape: Shape) -> Vec<(f32, f32)> {
    let pts: Vec<(f32, f32)> = match shape {
        Shape::Triangle => (0..3)
            .map(|i| {
                let a = -std::f32::consts::FRAC_PI_2 + i as f32 * 2.0 * std::f32::consts::PI / 3.0;
                (radius * a.cos(), radius * a.sin())
            })
            .collect(),
        Shape::Star => (0..10)
            .map(|i| {
                let r = if i % 2 == 0 { radius } else { radius * 0.45 };
                let a = -std::f32::consts::FRAC_PI_2 + i as f32 * std::f32::consts::PI / 5.0;
                (r * a.cos(), r * a.sin())
            })
            .collect(),
        _ => Vec::new(),
    };
    pts.into_iter().map(|(x, y)| (center.0 + x, center.1 + y)).collect()
}

fn inside_polygon(pts: &[(f32, f32)], x: f32, y: f32) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Binary mask of one shape at pixel centers.
pub fn rasterize(f: &ForegroundSpec, resolution: usize) -> LayerMask {
    let n = resolution as f32;
    let (cx, cy) = f.position;
    let r = f.size;
    let poly = polygon(f.position, r, f.shape);
    LayerMask::from_fn(resolution, resolution, |y, x| {
        let px = (x as f32 + 0.5) / n;
        let py = (y as f32 + 0.5) / n;
        match f.shape {
            Shape::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Square => {
                let half = r * std::f32::consts::FRAC_1_SQRT_2;
                (px - cx).abs() <= half && (py - cy).abs() <= half
            }
            Shape::Triangle | Shape::Star => inside_polygon(&poly, px, py),
        }
    })
}

fn disjoint(a: &LayerMask, b: &LayerMask) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| *x == 0.0 || *y == 0.0)
}

/// `u8 → [-1, 1]`.
pub fn u8_to_unit(u: u8) -> f32 {
    u as f32 / 127.5 - 1.0
}

/// `[-1, 1] → u8`, inverse of `u8_to_unit` on its image.
pub fn unit_to_u8(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn background_u8(spec: &SceneSpec, res: usize) -> Vec<[u8; 3]> {
    let base = spec.background_color.muted();
    let dark = base.map(|c| (c as f32 * 0.6) as u8);
    let band = (res / 8).max(1);
    let block = (res / 4).max(1);
    let mut px = Vec::with_capacity(res * res);
    for y in 0..res {
        for x in 0..res {
            let c = match spec.texture {
                Texture::Plain => base,
                Texture::Gradient => {
                    let t = x as f32 / (res.max(2) - 1) as f32;
                    let mut c = [0u8; 3];
                    for i in 0..3 {
                        c[i] = (dark[i] as f32 + t * (base[i] as f32 - dark[i] as f32)).round() as u8;
                    }
                    c
                }
                Texture::Stripes => {
                    if (y / band) % 2 == 0 {
                        base
                    } else {
                        dark
                    }
                }
                Texture::Checker => {
                    if (x / block + y / block) % 2 == 0 {
                        base
                    } else {
                        dark
                    }
                }
            };
            px.push(c);
        }
    }
    px
}

fn planar_from_u8(res: usize, px: &[[u8; 3]]) -> Planar3 {
    let plane = res * res;
    let mut data = vec![0f32; 3 * plane];
    for (p, c) in px.iter().enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = u8_to_unit(c[ch]);
        }
    }
    Planar3::new(res, res, data).expect("sized by construction")
}

/// A generated scene: the layer set plus its final placement.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub layers: LayerSet,
}

/// Places and renders a scene. Deterministic in `spec`.
pub fn generate_scene(spec: &SceneSpec, resolution: usize) -> Result<Scene> {
    spec.validate()?;
    if resolution < 8 {
        return Err(Error::Invalid(format!("resolution {resolution} too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_1a7e);
    let mut placed = spec.foregrounds.clone();
    let mut shrink = 1.0f32;
    let mut masks: Vec<LayerMask>;
    let mut attempt = 0;
    loop {
        masks = placed.iter().map(|f| rasterize(f, resolution)).collect::<Vec<_>>();
        let areas_ok = masks
            .iter()
            .all(|m| (MIN_AREA..=MAX_AREA).contains(&m.area_fraction()));
        let disjoint_ok = (0..masks.len())
            .all(|i| (i + 1..masks.len()).all(|j| disjoint(&masks[i], &masks[j])));
        if areas_ok && disjoint_ok {
            break;
        }
        attempt += 1;
        if attempt >= MAX_ATTEMPTS {
            return Err(Error::Invalid(format!(
                "could not place {} foregrounds for seed {} after {MAX_ATTEMPTS} attempts",
                placed.len(),
                spec.seed
            )));
        }
        if attempt % ATTEMPTS_PER_SHRINK == 0 {
            shrink *= 0.85;
        }
        for (f, orig) in placed.iter_mut().zip(&spec.foregrounds) {
            f.size = (orig.size * shrink).max(0.06);
            f.position = random_position(f.size, &mut rng);
        }
    }

    let mut order: Vec<usize> = (0..placed.len()).collect();
    order.sort_by(|&a, &b| {
        masks[b]
            .area_fraction()
            .partial_cmp(&masks[a].area_fraction())
            .expect("finite areas")
            .then(a.cmp(&b))
    });
    let placed: Vec<ForegroundSpec> = order.iter().map(|&i| placed[i].clone()).collect();
    let masks: Vec<LayerMask> = order.iter().map(|&i| masks[i].clone()).collect();
    let final_spec = SceneSpec {
        foregrounds: placed,
        ..spec.clone()
    };

    let res = resolution;
    let bg = background_u8(&final_spec, res);
    let mut scene = bg.clone();
    for (f, m) in final_spec.foregrounds.iter().zip(&masks) {
        let c = f.color.rgb();
        for (p, v) in m.data().iter().enumerate() {
            if *v == 1.0 {
                scene[p] = c;
            }
        }
    }
    let (global, prompts) = caption(&final_spec);
    let mut foregrounds = Vec::with_capacity(masks.len());
    for (m, prompt) in masks.iter().zip(prompts.iter().skip(1)) {
        let cut = dilate_mask(m, CUTOUT_DILATION)?;
        let px: Vec<[u8; 3]> = cut
            .data()
            .iter()
            .zip(&scene)
            .map(|(v, c)| if *v == 1.0 { *c } else { [FILL_U8; 3] })
            .collect();
        foregrounds.push(ForegroundLayer {
            image: planar_from_u8(res, &px),
            mask: m.clone(),
            prompt: prompt.clone(),
        });
    }
    let layers = LayerSet::from_foregrounds(planar_from_u8(res, &bg), foregrounds, global)?;
    layers.validate()?;
    Ok(Scene {
        spec: final_spec,
        layers,
    })
}

/// Probabilities of 2, 3 and 4 layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerMix(pub [f64; 3]);

impl Default for LayerMix {
    fn default() -> Self {
        Self([0.85, 0.12, 0.03])
    }
}

impl LayerMix {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!(
                "layer mix {:?} must be probabilities summing to 1",
                self.0
            )));
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.0.iter().enumerate() {
            acc += p;
            if u < acc {
                return i + MIN_LAYERS;
            }
        }
        self.0.iter().rposition(|p| *p > 0.0).unwrap_or(0) + MIN_LAYERS
    }
}

impl std::str::FromStr for LayerMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("layer mix {s:?}: {e}")))?;
        let arr: [f64; 3] = parts
            .try_into()
            .map_err(|_| Error::Invalid(format!("layer mix {s:?} needs three values")))?;
        let mix = LayerMix(arr);
        mix.validate()?;
        Ok(mix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num: usize,
    pub resolution: usize,
    pub layer_mix: LayerMix,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num: 5000,
            resolution: 32,
            layer_mix: LayerMix::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordLayer {
    pub prompt: String,
    pub image_path: String,
    pub mask_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub num_layers: usize,
    pub global_prompt: String,
    pub layers: Vec<RecordLayer>,
}

impl DatasetRecord {
    pub fn for_layers(id: &str, layers: &LayerSet) -> Self {
        let records = layers
            .layer_prompts()
            .into_iter()
            .enumerate()
            .map(|(n, prompt)| RecordLayer {
                prompt,
                image_path: format!("images/{id}_layer{n}.png"),
                mask_path: format!("masks/{id}_layer{n}.png"),
            })
            .collect();
        Self {
            id: id.to_string(),
            num_layers: layers.num_layers(),
            global_prompt: layers.global_prompt.clone(),
            layers: records,
        }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Dataset {
            id: self.id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(self.err("id must be a non-empty file-name-safe string"));
        }
        if !(MIN_LAYERS..=MAX_LAYERS).contains(&self.num_layers) {
            return Err(self.err(format!("num_layers {} outside [2, 4]", self.num_layers)));
        }
        if self.layers.len() != self.num_layers {
            return Err(self.err(format!(
                "num_layers is {} but {} layers listed",
                self.num_layers,
                self.layers.len()
            )));
        }
        if self.layers[0].prompt != BACKGROUND_PROMPT {
            return Err(self.err(format!(
                "layer 0 prompt is {:?}, expected {BACKGROUND_PROMPT:?}",
                self.layers[0].prompt
            )));
        }
        Ok(())
    }
}

/// Seed of the `index`-th scene of a dataset.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates `cfg.num` scenes with ids `000000`, `000001`, ….
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<(LayerSet, DatasetRecord)>> {
    cfg.layer_mix.validate()?;
    let mut out = Vec::with_capacity(cfg.num);
    for i in 0..cfg.num {
        let seed = scene_seed(cfg.seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = cfg.layer_mix.draw(&mut rng);
        let spec = SceneSpec::random(seed, l)?;
        let scene = generate_scene(&spec, cfg.resolution)?;
        let record = DatasetRecord::for_layers(&format!("{i:06}"), &scene.layers);
        out.push((scene.layers, record));
    }
    Ok(out)
}

fn planar_to_rgb(img: &Planar3) -> RgbImage {
    let (h, w) = img.dims();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = img.pixel(y as usize, x as usize);
        image::Rgb(p.map(unit_to_u8))
    })
}

fn mask_to_gray(mask: &LayerMask) -> GrayImage {
    let (h, w) = mask.dims();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask.get(y as usize, x as usize) >= 0.5 { 255 } else { 0 }])
    })
}

/// Writes the layer images and masks of one set under `root`.
pub fn write_layers(root: &Path, record: &DatasetRecord, layers: &LayerSet) -> Result<()> {
    record.validate()?;
    layers.validate().map_err(|e| record.err(e.to_string()))?;
    for ((entry, img), mask) in record.layers.iter().zip(layers.images()).zip(layers.masks()) {
        let ip = root.join(&entry.image_path);
        let mp = root.join(&entry.mask_path);
        for p in [&ip, &mp] {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        planar_to_rgb(img).save(&ip).map_err(|e| record.err(format!("{}: {e}", ip.display())))?;
        mask_to_gray(mask).save(&mp).map_err(|e| record.err(format!("{}: {e}", mp.display())))?;
    }
    Ok(())
}

/// Writes `root/manifest.jsonl` and all PNGs; returns the manifest path.
pub fn write_dataset(samples: &[(LayerSet, DatasetRecord)], root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let manifest = root.join("manifest.jsonl");
    let file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = BufWriter::new(file);
    for (layers, record) in samples {
        write_layers(root, record, layers)?;
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n").map_err(|e| Error::io(&manifest, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Reads the manifest records without touching the PNGs.
pub fn read_manifest(root: &Path) -> Result<Vec<DatasetRecord>> {
    let manifest = root.join("manifest.jsonl");
    let file = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            id: format!("line {}", n + 1),
            reason: format!("schema violation: {e}"),
        })?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

/// Loads and validates one record's layers.
pub fn read_record(root: &Path, record: &DatasetRecord) -> Result<LayerSet> {
    record.validate()?;
    let mut images = Vec::with_capacity(record.num_layers);
    let mut masks = Vec::with_capacity(record.num_layers);
    let mut dims = None;
    for entry in &record.layers {
        let ip = root.join(&entry.image_path);
        let mp = root.join(&entry.mask_path);
        let img = image::open(&ip)
            .map_err(|e| record.err(format!("{}: {e}", ip.display())))?
            .to_rgb8();
        let mask = image::open(&mp)
            .map_err(|e| record.err(format!("{}: {e}", mp.display())))?
            .to_luma8();
        let (w, h) = img.dimensions();
        if mask.dimensions() != (w, h) || dims.is_some_and(|d| d != (w, h)) {
            return Err(record.err(format!("{} has inconsistent dimensions", mp.display())));
        }
        dims = Some((w, h));
        let (w, h) = (w as usize, h as usize);
        let px: Vec<[u8; 3]> = img.pixels().map(|p| p.0).collect();
        images.push(planar_from_u8_rect(h, w, &px));
        let mut data = Vec::with_capacity(h * w);
        for (i, p) in mask.pixels().enumerate() {
            match p.0[0] {
                0 => data.push(0.0),
                255 => data.push(1.0),
                v => {
                    return Err(record.err(format!(
                        "{}: non-binary mask value {v} at ({}, {})",
                        mp.display(),
                        i / w,
                        i % w
                    )))
                }
            }
        }
        masks.push(LayerMask::new(h, w, data)?);
    }
    let mut images = images.into_iter();
    let mut masks = masks.into_iter();
    let background_image = images.next().expect("validated count");
    let background_mask = masks.next().expect("validated count");
    let foregrounds = images
        .zip(masks)
        .zip(record.layers.iter().skip(1))
        .map(|((image, mask), l)| ForegroundLayer {
            image,
            mask,
            prompt: l.prompt.clone(),
        })
        .collect();
    let set = LayerSet {
        background_image,
        background_mask,
        background_prompt: record.layers[0].prompt.clone(),
        foregrounds,
        global_prompt: record.global_prompt.clone(),
    };
    set.validate().map_err(|e| record.err(e.to_string()))?;
    Ok(set)
}

fn planar_from_u8_rect(h: usize, w: usize, px: &[[u8; 3]]) -> Planar3 {
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for (p, c) in px.iter().enumerate() {
        for ch in 0..3 {
            data[ch * plane + p] = u8_to_unit(c[ch]);
        }
    }
    Planar3::new(h, w, data).expect("sized by construction")
}

/// Reads every record and its layers.
pub fn read_dataset(root: &Path) -> Result<Vec<(LayerSet, DatasetRecord)>> {
    read_manifest(root)?
        .into_iter()
        .map(|r| Ok((read_record(root, &r)?, r)))
        .collect()
}
