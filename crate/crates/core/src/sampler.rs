//! Guided reverse process: deterministic DDIM with classifier-free guidance
//! against negative prompts and Self-Mask Guidance.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ensure_finite, Conditioning, LayerDiffModel, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::layerspace::{
    binarize_scores, ForegroundLayer, LayerMask, LayerSet, Planar3, MIN_LAYERS,
};
use crate::schedule::NoiseSchedule;
use crate::tensor::{latent_to_layers, mask_scores, randn};
use crate::textcond::{PromptBundle, PromptTexts};

/// Anything that predicts per-layer noise. Implemented by the trained model
/// and by test oracles.
pub trait NoisePredictor {
    fn dtype(&self) -> DType;
    fn device(&self) -> &Device;
    fn resolution(&self) -> usize;
    fn max_layers(&self) -> usize;
    fn encode(&self, batch: &[&PromptTexts]) -> Result<Conditioning>;
    /// `x`: `(B, L, 6, H, W)`; returns the same shape.
    fn predict_noise(&self, x: &Tensor, timesteps: &[Vec<usize>], cond: &Conditioning) -> Result<Tensor>;
}

impl NoisePredictor for LayerDiffModel {
    fn dtype(&self) -> DType {
        LayerDiffModel::dtype(self)
    }

    fn device(&self) -> &Device {
        LayerDiffModel::device(self)
    }

    fn resolution(&self) -> usize {
        self.config().resolution
    }

    fn max_layers(&self) -> usize {
        self.config().max_layers
    }

    fn encode(&self, batch: &[&PromptTexts]) -> Result<Conditioning> {
        LayerDiffModel::encode(self, batch)
    }

    fn predict_noise(&self, x: &Tensor, timesteps: &[Vec<usize>], cond: &Conditioning) -> Result<Tensor> {
        LayerDiffModel::predict_noise(self, x, timesteps, cond)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub smg_scale: f64,
    /// Gaussian blur kernel for SMG; `None` scales 31 px at 256² to the
    /// working resolution.
    pub blur_kernel: Option<usize>,
    pub blur_sigma: Option<f64>,
    pub seed: u64,
    /// Degrade inside the predicted mask instead of outside it.
    pub invert_smg_mask: bool,
    /// Keep per-step predicted clean data in the trace.
    pub record_x0: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 3.0,
            smg_scale: 3.0,
            blur_kernel: None,
            blur_sigma: None,
            seed: 0,
            invert_smg_mask: false,
            record_x0: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Invalid("guidance steps must be >= 1".into()));
        }
        if self.cfg_scale < 0.0 || self.smg_scale < 0.0 {
            return Err(Error::Invalid("guidance scales must be >= 0".into()));
        }
        if let Some(k) = self.blur_kernel {
            if k % 2 == 0 {
                return Err(Error::Invalid(format!("blur kernel must be odd, got {k}")));
            }
        }
        Ok(())
    }

    /// Blur kernel and sigma for a given resolution.
    pub fn blur_for(&self, resolution: usize) -> (usize, f64) {
        let scale = resolution as f64 / 256.0;
        let kernel = self.blur_kernel.unwrap_or_else(|| round_to_odd(31.0 * scale).max(3));
        let sigma = self.blur_sigma.unwrap_or(3.0 * scale);
        (kernel, sigma)
    }
}

/// Nearest odd integer (ties go up).
fn round_to_odd(x: f64) -> usize {
    let k = ((x - 1.0) / 2.0).round().max(0.0) as usize;
    2 * k + 1
}

/// `ε_u + w·(ε_c − ε_u)`, evaluated as `(1 − w)·ε_u + w·ε_c` so that `w = 0`
/// and `w = 1` reproduce their inputs exactly.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if eps_cond.dims() != eps_uncond.dims() {
        return Err(Error::Shape(format!(
            "cfg inputs differ: {:?} vs {:?}",
            eps_cond.dims(),
            eps_uncond.dims()
        )));
    }
    Ok((eps_uncond.affine(1.0 - w, 0.0)? + eps_cond.affine(w, 0.0)?)?)
}

/// `ε̂ + (1 + s)·(ε − ε̂)`, evaluated as `(1 + s)·ε − s·ε̂`.
pub fn smg_combine(eps_hat: &Tensor, eps: &Tensor, s: f64) -> Result<Tensor> {
    if eps_hat.dims() != eps.dims() {
        return Err(Error::Shape(format!(
            "smg inputs differ: {:?} vs {:?}",
            eps_hat.dims(),
            eps.dims()
        )));
    }
    Ok((eps.affine(1.0 + s, 0.0)? - eps_hat.affine(s, 0.0)?)?)
}

/// Separable Gaussian blur over the last two axes of `(N, C, H, W)`, with
/// edge-clamped borders.
pub fn gaussian_blur(x: &Tensor, kernel: usize, sigma: f64) -> Result<Tensor> {
    if kernel % 2 == 0 {
        return Err(Error::Invalid(format!("blur kernel must be odd, got {kernel}")));
    }
    if kernel == 1 || sigma <= 0.0 {
        return Ok(x.clone());
    }
    let dims = x.dims().to_vec();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let r = (kernel / 2) as isize;
    let mut weights: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|v| *v /= total);

    let data = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let plane = h * w;
    let mut out = vec![0f64; data.len()];
    let mut tmp = vec![0f64; plane];
    for (src, dst) in data.chunks(plane).zip(out.chunks_mut(plane)) {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (k, wt) in weights.iter().enumerate() {
                    let sx = (xx as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += wt * src[y * w + sx];
                }
                tmp[y * w + xx] = acc;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (k, wt) in weights.iter().enumerate() {
                    let sy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += wt * tmp[sy * w + xx];
                }
                dst[y * w + xx] = acc;
            }
        }
    }
    Ok(Tensor::from_vec(out, dims, x.device())?.to_dtype(x.dtype())?)
}

/// Per-layer masks as a `(L, 1, H, W)` tensor.
fn mask_tensor(masks: &[LayerMask], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = masks[0].dims();
    let data: Vec<f32> = masks.iter().flat_map(|m| m.data().iter().copied()).collect();
    Ok(Tensor::from_vec(data, (masks.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Self-mask degradation of `(L, 6, H, W)` latents: the predicted clean data
/// is blurred and re-noised to level `t`, then merged back as
/// `m⊙z_t + (1−m)⊙z̃` with each layer's own binary mask.
#[allow(clippy::too_many_arguments)]
pub fn smg_degrade(
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    masks: &[LayerMask],
    blur: (usize, f64),
    invert: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (l, _, h, w) = z_t.dims4()?;
    if masks.len() != l {
        return Err(Error::Shape(format!("{} masks for {l} layers", masks.len())));
    }
    for m in masks {
        if m.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "mask is {}x{}, latent is {h}x{w}",
                m.height(),
                m.width()
            )));
        }
        m.check_binary()?;
    }
    let x0 = schedule.predict_x0(z_t, t, eps_pred)?;
    let blurred = gaussian_blur(&x0, blur.0, blur.1)?;
    let fresh = randn(rng, z_t.dims(), z_t.dtype(), z_t.device())?;
    let renoised = schedule.q_sample(&blurred, t, &fresh)?;
    let mut m = mask_tensor(masks, z_t.dtype(), z_t.device())?;
    if invert {
        m = m.affine(-1.0, 1.0)?;
    }
    let keep = z_t.broadcast_mul(&m)?;
    let degrade = renoised.broadcast_mul(&m.affine(-1.0, 1.0)?)?;
    Ok((keep + degrade)?)
}

/// Binary per-layer masks from mask latents and their predicted noise.
pub fn extract_predicted_masks(
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
) -> Result<Vec<LayerMask>> {
    let x0 = schedule.predict_x0(z_t, t, eps_pred)?;
    masks_from_x0(&x0)
}

fn masks_from_x0(x0: &Tensor) -> Result<Vec<LayerMask>> {
    let (_, _, h, w) = x0.dims4()?;
    binarize_scores(&mask_scores(x0)?, h, w)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub t_prev: usize,
    /// Predicted clean data `(L, 6, H, W)`, flattened; only when requested.
    pub x0: Option<Vec<f32>>,
    pub masks: Vec<LayerMask>,
    pub cfg_norm: f64,
    pub smg_norm: f64,
    pub forward_passes: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SampleTrace {
    pub steps: Vec<TraceStep>,
}

impl SampleTrace {
    pub fn forward_passes(&self) -> usize {
        self.steps.iter().map(|s| s.forward_passes).sum()
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub layers: LayerSet,
    /// Final soft masks before binarization, in `[0, 1]`.
    pub soft_masks: Vec<LayerMask>,
    pub trace: SampleTrace,
    pub steps_run: usize,
}

/// Clean-data substitution applied inside every DDIM step.
#[derive(Debug, Clone)]
pub struct X0Replacement {
    /// Original clean latents `(L, 6, H, W)`.
    pub originals: Tensor,
    /// Layers whose image channels are overwritten at every step.
    pub image_layers: Vec<usize>,
    /// Layers whose mask channels are overwritten for the first
    /// `mask_steps` steps.
    pub mask_layers: Vec<usize>,
    pub mask_steps: usize,
}

/// A fully specified reverse run.
#[derive(Debug, Clone)]
pub struct SamplerJob {
    pub bundle: PromptBundle,
    /// Latents at `timesteps[0]`, `(L, 6, H, W)`.
    pub init: Tensor,
    /// Descending timesteps ending at 0.
    pub timesteps: Vec<usize>,
    pub replacement: Option<X0Replacement>,
}

fn norm(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt())
}

pub(crate) fn channel_selector(l: usize, layers: &[usize], channels: std::ops::Range<usize>, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; l * LATENT_CHANNELS];
    for &i in layers {
        for c in channels.clone() {
            data[i * LATENT_CHANNELS + c] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (l, LATENT_CHANNELS, 1, 1), device)?.to_dtype(dtype)?)
}

/// Runs the guided reverse process described by `job`.
pub fn run<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    job: &SamplerJob,
    gcfg: &GuidanceConfig,
) -> Result<SampleOutput> {
    gcfg.validate()?;
    let (l, c, h, _) = job.init.dims4()?;
    if c != LATENT_CHANNELS {
        return Err(Error::Shape(format!("expected {LATENT_CHANNELS} channels, got {c}")));
    }
    if l < MIN_LAYERS || l > model.max_layers() {
        return Err(Error::Invalid(format!(
            "layer count {l} outside [{MIN_LAYERS}, {}]",
            model.max_layers()
        )));
    }
    if job.bundle.num_layers() != l || job.bundle.negative.layers.len() != l {
        return Err(Error::Shape(format!(
            "prompt bundle has {} layers, latents have {l}",
            job.bundle.num_layers()
        )));
    }
    if job.timesteps.len() < 2
        || job.timesteps.last() != Some(&0)
        || job.timesteps.windows(2).any(|p| p[0] <= p[1])
    {
        return Err(Error::Invalid("timesteps must strictly decrease to 0".into()));
    }

    let dtype = model.dtype();
    let device = model.device().clone();
    let pos = model.encode(&[&job.bundle.positive])?;
    let neg = model.encode(&[&job.bundle.negative])?;
    let blur = gcfg.blur_for(h);
    let mut smg_rng = ChaCha8Rng::seed_from_u64(gcfg.seed);
    smg_rng.set_stream(1);

    let selectors = match &job.replacement {
        Some(r) => Some((
            channel_selector(l, &r.image_layers, 0..3, dtype, &device)?,
            channel_selector(l, &r.mask_layers, 3..6, dtype, &device)?,
            r,
        )),
        None => None,
    };

    let mut x = job.init.to_dtype(dtype)?;
    let mut trace = SampleTrace::default();
    for (step, pair) in job.timesteps.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let ts = vec![vec![t; l]];
        let xb = x.unsqueeze(0)?;
        let mut passes = 1;
        let eps_cond = model.predict_noise(&xb, &ts, &pos)?.squeeze(0)?.detach();
        let mut eps = eps_cond.clone();
        let mut cfg_norm = 0.0;
        if gcfg.cfg_scale != 1.0 {
            let eps_neg = model.predict_noise(&xb, &ts, &neg)?.squeeze(0)?.detach();
            passes += 1;
            cfg_norm = norm(&(&eps_cond - &eps_neg)?)?;
            eps = cfg_combine(&eps_cond, &eps_neg, gcfg.cfg_scale)?;
        }
        let mut smg_norm = 0.0;
        if gcfg.smg_scale != 0.0 {
            let masks = extract_predicted_masks(schedule, &x, &eps_cond, t)?;
            let degraded = smg_degrade(
                schedule,
                &x,
                &eps_cond,
                t,
                &masks,
                blur,
                gcfg.invert_smg_mask,
                &mut smg_rng,
            )?;
            let eps_hat = model
                .predict_noise(&degraded.unsqueeze(0)?, &ts, &pos)?
                .squeeze(0)?
                .detach();
            passes += 1;
            let delta = (&eps_cond - &eps_hat)?;
            smg_norm = norm(&delta)?;
            eps = (eps + delta.affine(gcfg.smg_scale, 0.0)?)?;
        }

        let mut x0 = schedule.predict_x0(&x, t, &eps)?;
        if let Some((img_sel, mask_sel, r)) = &selectors {
            let orig = r.originals.to_dtype(dtype)?;
            x0 = blend(&x0, &orig, img_sel)?;
            if step < r.mask_steps {
                x0 = blend(&x0, &orig, mask_sel)?;
            }
        }
        ensure_finite(&x0, &format!("predicted x0 at step {step} (t={t})"))?;
        trace.steps.push(TraceStep {
            t,
            t_prev,
            x0: if gcfg.record_x0 {
                Some(x0.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
            } else {
                None
            },
            masks: masks_from_x0(&x0)?,
            cfg_norm,
            smg_norm,
            forward_passes: passes,
        });
        x = schedule.ddim_recombine(&x0, &eps, t_prev)?;
        ensure_finite(&x, &format!("latents at step {step} (t={t} -> {t_prev})"))?;
    }
    let steps_run = job.timesteps.len() - 1;
    let pinned = match &job.replacement {
        Some(r) if r.mask_steps >= steps_run => r.mask_layers.clone(),
        _ => Vec::new(),
    };
    let (layers, soft_masks) = if pinned.is_empty() {
        assemble(&x, &job.bundle.positive)?
    } else {
        let originals = &job.replacement.as_ref().expect("pinned layers imply a replacement").originals;
        assemble_pinned(&x, &job.bundle.positive, originals, &pinned)?
    };
    Ok(SampleOutput {
        layers,
        soft_masks,
        trace,
        steps_run,
    })
}

/// `sel ? b : a` channel-wise, exact for 0/1 selectors.
pub(crate) fn blend(a: &Tensor, b: &Tensor, sel: &Tensor) -> Result<Tensor> {
    let keep = a.broadcast_mul(&sel.affine(-1.0, 1.0)?)?;
    let take = b.broadcast_mul(sel)?;
    Ok((keep + take)?)
}

/// Turns final `(L, 6, H, W)` latents into a layer set: images clamped,
/// masks channel-averaged and binarized across layers.
pub fn assemble(x: &Tensor, prompts: &PromptTexts) -> Result<(LayerSet, Vec<LayerMask>)> {
    let (_, _, h, w) = x.dims4()?;
    let (images, soft) = latent_to_layers(x)?;
    let binary = binarize_scores(&mask_scores(x)?, h, w)?;
    Ok((build_set(images, &binary, prompts)?, soft))
}

fn build_set(images: Vec<Planar3>, binary: &[LayerMask], prompts: &PromptTexts) -> Result<LayerSet> {
    let l = images.len();
    let mut images = images.into_iter();
    let background_image: Planar3 = images.next().expect("at least one layer");
    let foregrounds: Vec<ForegroundLayer> = images
        .zip(binary.iter().skip(1))
        .zip(prompts.layers.iter().skip(1))
        .map(|((image, mask), prompt)| ForegroundLayer {
            image,
            mask: mask.clone(),
            prompt: prompt.clone(),
        })
        .collect();
    debug_assert_eq!(foregrounds.len(), l - 1);
    let mut set = LayerSet::from_foregrounds(background_image, foregrounds, prompts.global.clone())?;
    set.background_prompt = prompts.layers[0].clone();
    Ok(set)
}

/// Like [`assemble`], but the `pinned` layers keep the binary masks encoded
/// in `originals`; the remaining layers split the leftover pixels by argmax.
pub fn assemble_pinned(x: &Tensor, prompts: &PromptTexts, originals: &Tensor, pinned: &[usize]) -> Result<(LayerSet, Vec<LayerMask>)> {
    let (l, _, h, w) = x.dims4()?;
    if originals.dims() != x.dims() {
        return Err(Error::Shape(format!("originals {:?} vs latents {:?}", originals.dims(), x.dims())));
    }
    let (images, soft) = latent_to_layers(x)?;
    let mut scores = mask_scores(x)?;
    let owned = mask_scores(originals)?;
    for &i in pinned {
        if i >= l {
            return Err(Error::Invalid(format!("pinned layer {i} out of range")));
        }
    }
    for p in 0..h * w {
        let owner = pinned.iter().copied().find(|&i| owned[i][p] > 0.5);
        for (i, row) in scores.iter_mut().enumerate() {
            let keep = match owner {
                Some(o) => i == o,
                None => !pinned.contains(&i),
            };
            if !keep {
                row[p] = f32::NEG_INFINITY;
            }
        }
    }
    let binary = binarize_scores(&scores, h, w)?;
    let set = build_set(images, &binary, prompts)?;
    Ok((set, soft))
}

/// Plain text-to-layers sampling from Gaussian noise.
pub fn sample<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    bundle: &PromptBundle,
    gcfg: &GuidanceConfig,
) -> Result<SampleOutput> {
    let l = bundle.num_layers();
    if l < MIN_LAYERS || l > model.max_layers() {
        return Err(Error::Invalid(format!(
            "layer count {l} outside [{MIN_LAYERS}, {}]",
            model.max_layers()
        )));
    }
    let r = model.resolution();
    let mut rng = ChaCha8Rng::seed_from_u64(gcfg.seed);
    let init = randn(&mut rng, &[l, LATENT_CHANNELS, r, r], model.dtype(), model.device())?;
    let job = SamplerJob {
        bundle: bundle.clone(),
        init,
        timesteps: schedule.ddim_timesteps(gcfg.steps)?,
        replacement: None,
    };
    run(model, schedule, &job, gcfg)
}

/// Mean over pixels of the gap between the two largest soft mask values.
pub fn mask_exclusivity(soft_masks: &[LayerMask]) -> Result<f64> {
    let first = soft_masks
        .first()
        .ok_or_else(|| Error::Invalid("no masks".into()))?;
    let n = first.data().len();
    if soft_masks.iter().any(|m| m.data().len() != n) {
        return Err(Error::Shape("soft masks differ in size".into()));
    }
    if soft_masks.len() == 1 {
        return Ok(first.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64);
    }
    let mut total = 0.0;
    for p in 0..n {
        let (mut top1, mut top2) = (f32::NEG_INFINITY, f32::NEG_INFINITY);
        for m in soft_masks {
            let v = m.data()[p];
            if v > top1 {
                top2 = top1;
                top1 = v;
            } else if v > top2 {
                top2 = v;
            }
        }
        total += (top1 - top2) as f64;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::layer_set_to_latent;
    use rand::Rng;

    fn max_abs(a: &Tensor, b: &Tensor) -> f32 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f32>().unwrap()
    }

    fn scalar(v: f32, n: usize) -> Tensor {
        Tensor::from_vec(vec![v; n], n, &Device::Cpu).unwrap()
    }

    #[test]
    fn cfg_combine_cases() {
        let c = scalar(2.0, 4);
        let u = scalar(1.0, 4);
        assert_eq!(max_abs(&cfg_combine(&c, &u, 0.0).unwrap(), &u), 0.0);
        assert_eq!(max_abs(&cfg_combine(&c, &u, 1.0).unwrap(), &c), 0.0);
        assert_eq!(max_abs(&cfg_combine(&c, &u, 3.0).unwrap(), &scalar(4.0, 4)), 0.0);
        assert!(cfg_combine(&c, &scalar(1.0, 3), 1.0).is_err());
    }

    #[test]
    fn cfg_endpoints_exact_on_random_inputs() {
        let c = Tensor::randn(0f32, 1.0, 64, &Device::Cpu).unwrap();
        let u = Tensor::randn(0f32, 1.0, 64, &Device::Cpu).unwrap();
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap().to_vec1::<f32>().unwrap(), c.to_vec1::<f32>().unwrap());
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap().to_vec1::<f32>().unwrap(), u.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn smg_combine_cases() {
        let hat = scalar(1.0, 3);
        let e = scalar(2.0, 3);
        assert_eq!(max_abs(&smg_combine(&hat, &e, 0.0).unwrap(), &e), 0.0);
        assert_eq!(max_abs(&smg_combine(&e, &e, 7.0).unwrap(), &e), 0.0);
        assert_eq!(max_abs(&smg_combine(&hat, &e, 3.0).unwrap(), &scalar(5.0, 3)), 0.0);
        assert!(smg_combine(&hat, &scalar(1.0, 2), 1.0).is_err());
    }

    #[test]
    fn blur_parameters_scale_with_resolution() {
        let g = GuidanceConfig::default();
        assert_eq!(g.blur_for(256), (31, 3.0));
        assert_eq!(g.blur_for(32), (3, 0.375));
        assert_eq!(round_to_odd(4.0), 5);
        assert_eq!(round_to_odd(3.875), 3);
    }

    #[test]
    fn blur_preserves_constants_and_matches_direct_sum() {
        let x = Tensor::full(0.7f32, (1, 2, 5, 6), &Device::Cpu).unwrap();
        let y = gaussian_blur(&x, 5, 1.0).unwrap();
        assert!(max_abs(&x, &y) < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f32> = (0..49).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(v.clone(), (1, 1, 7, 7), &Device::Cpu).unwrap();
        let y = gaussian_blur(&x, 3, 0.8).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let k: Vec<f64> = [-1.0f64, 0.0, 1.0].iter().map(|i| (-(i * i) / (2.0 * 0.64)).exp()).collect();
        let s: f64 = k.iter().sum();
        for yy in 0..7i32 {
            for xx in 0..7i32 {
                let mut acc = 0.0;
                for dy in -1..=1i32 {
                    for dx in -1..=1i32 {
                        let sy = (yy + dy).clamp(0, 6) as usize;
                        let sx = (xx + dx).clamp(0, 6) as usize;
                        acc += k[(dy + 1) as usize] * k[(dx + 1) as usize] / (s * s) * v[sy * 7 + sx] as f64;
                    }
                }
                assert!((y[(yy * 7 + xx) as usize] as f64 - acc).abs() < 1e-5);
            }
        }
    }

    fn setup() -> (NoiseSchedule, Tensor, Tensor, usize) {
        let s = NoiseSchedule::new(1000, 1e-4, 0.02).unwrap();
        let z = Tensor::randn(0f32, 1.0, (2, 6, 8, 8), &Device::Cpu).unwrap();
        let e = Tensor::randn(0f32, 1.0, (2, 6, 8, 8), &Device::Cpu).unwrap();
        (s, z, e, 500)
    }

    #[test]
    fn smg_degrade_full_and_empty_masks() {
        let (s, z, e, t) = setup();
        let ones = vec![LayerMask::ones(8, 8); 2];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = smg_degrade(&s, &z, &e, t, &ones, (3, 1.0), false, &mut rng).unwrap();
        assert_eq!(max_abs(&out, &z), 0.0);

        let zeros = vec![LayerMask::zeros(8, 8); 2];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = smg_degrade(&s, &z, &e, t, &zeros, (3, 1.0), false, &mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = s.predict_x0(&z, t, &e).unwrap();
        let fresh = randn(&mut rng, z.dims(), DType::F32, &Device::Cpu).unwrap();
        let want = s.q_sample(&gaussian_blur(&x0, 3, 1.0).unwrap(), t, &fresh).unwrap();
        assert_eq!(max_abs(&out, &want), 0.0);
    }

    #[test]
    fn smg_degrade_is_deterministic_and_checks_masks() {
        let (s, z, e, t) = setup();
        let masks = vec![
            LayerMask::from_fn(8, 8, |y, _| y < 4),
            LayerMask::from_fn(8, 8, |y, _| y >= 4),
        ];
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            smg_degrade(&s, &z, &e, t, &masks, (3, 1.0), false, &mut rng)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        assert_eq!(run(), run());
        let soft = vec![LayerMask::filled(8, 8, 0.5); 2];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(smg_degrade(&s, &z, &e, t, &soft, (3, 1.0), false, &mut rng).is_err());
    }

    #[test]
    fn extracted_masks_recover_truth_with_true_noise() {
        let s = NoiseSchedule::new(1000, 1e-4, 0.02).unwrap();
        let fg = LayerMask::from_fn(8, 8, |y, x| (2..6).contains(&y) && x < 5);
        let img = Planar3::filled(8, 8, [0.1, -0.2, 0.3]);
        let set = LayerSet::from_foregrounds(
            img.clone(),
            vec![ForegroundLayer { image: img, mask: fg.clone(), prompt: "p".into() }],
            "g",
        )
        .unwrap();
        let x0 = layer_set_to_latent(&set, DType::F32, &Device::Cpu).unwrap();
        let eps = Tensor::randn(0f32, 1.0, x0.dims(), &Device::Cpu).unwrap();
        let t = 400;
        let zt = s.q_sample(&x0, t, &eps).unwrap();
        let masks = extract_predicted_masks(&s, &zt, &eps, t).unwrap();
        assert_eq!(masks[1], fg);
        assert_eq!(masks[0], set.background_mask);
    }

    #[test]
    fn equal_predictions_go_to_background() {
        let s = NoiseSchedule::new(1000, 1e-4, 0.02).unwrap();
        let z = Tensor::zeros((3, 6, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let masks = extract_predicted_masks(&s, &z, &z, 10).unwrap();
        assert_eq!(masks[0], LayerMask::ones(4, 4));
        assert_eq!(masks[2], LayerMask::zeros(4, 4));
    }

    #[test]
    fn random_predictions_partition() {
        let (s, z, e, t) = setup();
        let masks = extract_predicted_masks(&s, &z, &e, t).unwrap();
        for p in 0..64 {
            let sum: f32 = masks.iter().map(|m| m.data()[p]).sum();
            assert_eq!(sum, 1.0);
        }
    }

    #[test]
    fn pinned_layers_keep_their_masks() {
        let (h, w) = (4, 4);
        let bg = LayerMask::from_fn(h, w, |y, _| y < 2);
        let fg_a = LayerMask::from_fn(h, w, |y, x| y >= 2 && x < 2);
        let fg_b = LayerMask::from_fn(h, w, |y, x| y >= 2 && x >= 2);
        let set = LayerSet::from_foregrounds(
            Planar3::filled(h, w, [0.0; 3]),
            vec![
                ForegroundLayer { image: Planar3::filled(h, w, [0.5; 3]), mask: fg_a, prompt: "a".into() },
                ForegroundLayer { image: Planar3::filled(h, w, [-0.5; 3]), mask: fg_b, prompt: "b".into() },
            ],
            "g",
        )
        .unwrap();
        assert_eq!(set.background_mask, bg);
        let originals = layer_set_to_latent(&set, DType::F32, &Device::Cpu).unwrap();
        // Latents where layer 1 claims every pixel with a large score.
        let mut v = vec![-1.0f32; 3 * 6 * h * w];
        for p in 0..h * w {
            for c in 3..6 {
                v[(6 + c) * h * w + p] = 5.0;
            }
        }
        let x = Tensor::from_vec(v, (3, 6, h, w), &Device::Cpu).unwrap();
        let prompts = PromptTexts::new("g", vec!["the background".into(), "a".into(), "b".into()]);
        let (plain, _) = assemble(&x, &prompts).unwrap();
        assert_eq!(plain.foregrounds[0].mask, LayerMask::ones(h, w));
        let (out, _) = assemble_pinned(&x, &prompts, &originals, &[0, 2]).unwrap();
        assert_eq!(out.background_mask, set.background_mask);
        assert_eq!(out.foregrounds[1].mask, set.foregrounds[1].mask);
        assert_eq!(out.foregrounds[0].mask, set.foregrounds[0].mask);
        out.validate().unwrap();
    }

    #[test]
    fn exclusivity_extremes() {
        let a = LayerMask::from_fn(4, 4, |y, _| y < 2);
        let b = LayerMask::from_fn(4, 4, |y, _| y >= 2);
        assert_eq!(mask_exclusivity(&[a, b]).unwrap(), 1.0);
        let u = LayerMask::filled(4, 4, 0.5);
        assert_eq!(mask_exclusivity(&[u.clone(), u]).unwrap(), 0.0);
    }
}
