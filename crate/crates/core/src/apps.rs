//! Layer editing recipes on top of the sampler: layer inpainting, layer
//! style transfer, sampling from mask priors and iterative generation.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::LATENT_CHANNELS;
use crate::error::{Error, Result};
use crate::layerspace::{
    background_from_foregrounds, composite, ForegroundLayer, LayerMask, LayerSet, Planar3,
    BACKGROUND_PROMPT, MAX_LAYERS, MIN_LAYERS,
};
use crate::sampler::{blend, channel_selector, run, GuidanceConfig, NoisePredictor, SampleOutput, SamplerJob, X0Replacement};
use crate::schedule::NoiseSchedule;
use crate::tensor::{layer_set_to_latent, randn};
use crate::textcond::{PromptBundle, PROMPT_SEPARATOR};

pub const DEFAULT_STRENGTH: f64 = 0.8;
pub const DEFAULT_MASK_FREEZE: usize = 1;

/// An edit of selected layers of an existing layer set.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub source: LayerSet,
    pub targets: Vec<usize>,
    /// Replacement prompts, one per target (inpainting).
    pub prompts: Vec<String>,
    /// Suffix appended to each target prompt (style transfer).
    pub style: String,
    pub strength: f64,
    /// Steps during which non-target masks stay pinned (inpainting).
    pub mask_freeze_steps: usize,
    /// Replaces the source's global prompt when set.
    pub global_prompt: Option<String>,
}

impl EditRequest {
    pub fn inpaint(source: LayerSet, targets: Vec<usize>, prompts: Vec<String>) -> Self {
        Self {
            source,
            targets,
            prompts,
            style: String::new(),
            strength: DEFAULT_STRENGTH,
            mask_freeze_steps: DEFAULT_MASK_FREEZE,
            global_prompt: None,
        }
    }

    pub fn style(source: LayerSet, targets: Vec<usize>, style: impl Into<String>, strength: f64) -> Self {
        Self {
            source,
            targets,
            prompts: Vec::new(),
            style: style.into(),
            strength,
            mask_freeze_steps: DEFAULT_MASK_FREEZE,
            global_prompt: None,
        }
    }

    pub fn with_global_prompt(mut self, global: impl Into<String>) -> Self {
        self.global_prompt = Some(global.into());
        self
    }

    fn validate(&self) -> Result<()> {
        self.source.validate()?;
        let l = self.source.num_layers();
        if self.targets.is_empty() {
            return Err(Error::Invalid("edit needs at least one target layer".into()));
        }
        for (i, &t) in self.targets.iter().enumerate() {
            if t >= l {
                return Err(Error::Invalid(format!("target layer {t} outside [0, {l})")));
            }
            if self.targets[..i].contains(&t) {
                return Err(Error::Invalid(format!("target layer {t} listed twice")));
            }
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(Error::Invalid(format!("strength {} outside (0, 1]", self.strength)));
        }
        Ok(())
    }

    fn non_targets(&self) -> Vec<usize> {
        (0..self.source.num_layers())
            .filter(|i| !self.targets.contains(i))
            .collect()
    }

    fn global(&self) -> String {
        self.global_prompt
            .clone()
            .unwrap_or_else(|| self.source.global_prompt.clone())
    }
}

fn mask_latent(masks: &[&LayerMask], dtype: candle_core::DType, device: &candle_core::Device) -> Result<Tensor> {
    let (h, w) = masks[0].dims();
    let mut data = Vec::with_capacity(masks.len() * LATENT_CHANNELS * h * w);
    for m in masks {
        data.extend(std::iter::repeat_n(0.0f32, 3 * h * w));
        let signed = m.to_signed();
        for _ in 0..3 {
            data.extend_from_slice(&signed);
        }
    }
    Ok(Tensor::from_vec(data, (masks.len(), LATENT_CHANNELS, h, w), device)?.to_dtype(dtype)?)
}

fn check_resolution<P: NoisePredictor + ?Sized>(model: &P, set: &LayerSet) -> Result<()> {
    let (h, w) = set.dims();
    let r = model.resolution();
    if (h, w) != (r, r) {
        return Err(Error::Shape(format!("layer set is {h}x{w}, model works at {r}x{r}")));
    }
    Ok(())
}

/// Regenerates the target layers while the other layers' clean images are
/// pinned at every step and their masks for the first `mask_freeze_steps`.
pub fn inpaint_layers<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    req: &EditRequest,
    gcfg: &GuidanceConfig,
) -> Result<SampleOutput> {
    inpaint_with_priors(model, schedule, req, gcfg, None)
}

/// Inpainting where each target's mask latent starts from a noised prior.
pub fn inpaint_with_priors<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    req: &EditRequest,
    gcfg: &GuidanceConfig,
    target_priors: Option<&[LayerMask]>,
) -> Result<SampleOutput> {
    req.validate()?;
    check_resolution(model, &req.source)?;
    let l = req.source.num_layers();
    if req.targets.len() == l {
        return Err(Error::Invalid(
            "inpainting every layer is plain sampling; leave at least one layer untouched".into(),
        ));
    }
    if req.prompts.len() != req.targets.len() {
        return Err(Error::Invalid(format!(
            "{} replacement prompts for {} targets",
            req.prompts.len(),
            req.targets.len()
        )));
    }
    let mut prompts = req.source.layer_prompts();
    for (&t, p) in req.targets.iter().zip(&req.prompts) {
        prompts[t] = p.clone();
    }
    let bundle = PromptBundle::new(req.global(), prompts)?;

    let dtype = model.dtype();
    let device = model.device().clone();
    let originals = layer_set_to_latent(&req.source, dtype, &device)?;
    let timesteps = schedule.ddim_timesteps(gcfg.steps)?;
    let t_start = timesteps[0];
    let mut rng = ChaCha8Rng::seed_from_u64(gcfg.seed);
    let eps = randn(&mut rng, originals.dims(), dtype, &device)?;
    let noised = schedule.q_sample(&originals, t_start, &eps)?;
    let target_sel = channel_selector(l, &req.targets, 0..LATENT_CHANNELS, dtype, &device)?;
    let mut init = blend(&noised, &eps, &target_sel)?;
    if let Some(priors) = target_priors {
        if priors.len() != req.targets.len() {
            return Err(Error::Invalid(format!(
                "{} mask priors for {} targets",
                priors.len(),
                req.targets.len()
            )));
        }
        let mut full: Vec<&LayerMask> = req.source.masks();
        for (&t, p) in req.targets.iter().zip(priors) {
            p.check_binary()?;
            full[t] = p;
        }
        let prior = schedule.q_sample(&mask_latent(&full, dtype, &device)?, t_start, &eps)?;
        let sel = channel_selector(l, &req.targets, 3..LATENT_CHANNELS, dtype, &device)?;
        init = blend(&init, &prior, &sel)?;
    }

    let keep = req.non_targets();
    let job = SamplerJob {
        bundle,
        init,
        timesteps,
        replacement: Some(X0Replacement {
            originals,
            image_layers: keep.clone(),
            mask_layers: keep,
            mask_steps: req.mask_freeze_steps,
        }),
    };
    run(model, schedule, &job, gcfg)
}

/// Partial re-noising of every layer followed by `floor(strength·steps)`
/// guided steps; non-target layers keep their clean images and masks.
pub fn style_transfer<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    req: &EditRequest,
    gcfg: &GuidanceConfig,
) -> Result<SampleOutput> {
    req.validate()?;
    check_resolution(model, &req.source)?;
    if req.style.trim().is_empty() {
        return Err(Error::Invalid("style suffix must not be empty".into()));
    }
    let n = (req.strength * gcfg.steps as f64).floor() as usize;
    if n == 0 {
        return Err(Error::Invalid(format!(
            "strength {} with {} steps runs no denoising step",
            req.strength, gcfg.steps
        )));
    }
    let full = schedule.ddim_timesteps(gcfg.steps)?;
    let timesteps = full[gcfg.steps - n..].to_vec();

    let mut prompts = req.source.layer_prompts();
    for &t in &req.targets {
        prompts[t] = format!("{}{PROMPT_SEPARATOR}{}", prompts[t], req.style.trim());
    }
    let bundle = PromptBundle::new(req.global(), prompts)?;

    let dtype = model.dtype();
    let device = model.device().clone();
    let originals = layer_set_to_latent(&req.source, dtype, &device)?;
    let mut rng = ChaCha8Rng::seed_from_u64(gcfg.seed);
    let eps = randn(&mut rng, originals.dims(), dtype, &device)?;
    let init = schedule.q_sample(&originals, timesteps[0], &eps)?;
    let keep = req.non_targets();
    let job = SamplerJob {
        bundle,
        init,
        timesteps,
        replacement: Some(X0Replacement {
            originals,
            image_layers: keep.clone(),
            mask_layers: keep,
            mask_steps: usize::MAX,
        }),
    };
    run(model, schedule, &job, gcfg)
}

/// Full prior list from foreground priors: the background prior is the
/// complement of their union.
pub fn complete_priors(foreground_priors: &[LayerMask]) -> Result<Vec<LayerMask>> {
    let first = foreground_priors
        .first()
        .ok_or_else(|| Error::Invalid("at least one foreground prior is required".into()))?;
    let (h, w) = first.dims();
    for p in foreground_priors {
        p.check_binary()?;
    }
    let mut out = vec![background_from_foregrounds(foreground_priors, h, w)?];
    out.extend(foreground_priors.iter().cloned());
    Ok(out)
}

fn check_partition(priors: &[LayerMask]) -> Result<()> {
    for p in priors {
        p.check_binary()?;
    }
    let (h, w) = priors[0].dims();
    let bg = background_from_foregrounds(&priors[1..], h, w)?;
    if bg != priors[0] {
        return Err(Error::InvalidLayerSet(
            "background prior must be the complement of the foreground priors".into(),
        ));
    }
    Ok(())
}

/// Sampling whose mask latents start from noised priors (background first).
pub fn sample_with_mask_priors<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    bundle: &PromptBundle,
    priors: &[LayerMask],
    gcfg: &GuidanceConfig,
) -> Result<SampleOutput> {
    let l = bundle.num_layers();
    if priors.len() != l {
        return Err(Error::Invalid(format!("{} priors for {l} layers", priors.len())));
    }
    check_partition(priors)?;
    let r = model.resolution();
    if priors[0].dims() != (r, r) {
        return Err(Error::Shape(format!(
            "priors are {}x{}, model works at {r}x{r}",
            priors[0].height(),
            priors[0].width()
        )));
    }
    let job = SamplerJob {
        bundle: bundle.clone(),
        init: prior_init(model, schedule, priors, gcfg)?,
        timesteps: schedule.ddim_timesteps(gcfg.steps)?,
        replacement: None,
    };
    run(model, schedule, &job, gcfg)
}

/// Initial latents for prior-guided sampling: image channels are the seeded
/// noise, mask channels `q_sample(prior, T, noise)`.
pub fn prior_init<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    priors: &[LayerMask],
    gcfg: &GuidanceConfig,
) -> Result<Tensor> {
    let dtype = model.dtype();
    let device = model.device().clone();
    let (h, w) = priors[0].dims();
    let l = priors.len();
    let mut rng = ChaCha8Rng::seed_from_u64(gcfg.seed);
    let eps = randn(&mut rng, &[l, LATENT_CHANNELS, h, w], dtype, &device)?;
    let refs: Vec<&LayerMask> = priors.iter().collect();
    let t = schedule.ddim_timesteps(gcfg.steps)?[0];
    let noised = schedule.q_sample(&mask_latent(&refs, dtype, &device)?, t, &eps)?;
    let all: Vec<usize> = (0..l).collect();
    let sel = channel_selector(l, &all, 3..LATENT_CHANNELS, dtype, &device)?;
    blend(&eps, &noised, &sel)
}

/// One step of iterative generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Addition {
    pub prompt: String,
    #[serde(default)]
    pub prior: Option<LayerMask>,
    /// Global prompt for this iteration; defaults to the running global
    /// prompt extended with `"and {prompt}"`.
    #[serde(default)]
    pub global_prompt: Option<String>,
}

/// Adds foregrounds one at a time: the current stack is flattened into a
/// background, a new foreground is inpainted over it, and the history of
/// foregrounds is kept so the result is a full layer set. Earlier
/// foregrounds stay on top where a later mask overlaps them.
pub fn iterative_generate<P: NoisePredictor + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    base: &LayerSet,
    additions: &[Addition],
    gcfg: &GuidanceConfig,
    strict: bool,
) -> Result<LayerSet> {
    base.validate()?;
    if base.num_layers() != MIN_LAYERS {
        return Err(Error::Invalid(format!(
            "iterative generation starts from a two-layer set, got {} layers",
            base.num_layers()
        )));
    }
    let total = base.num_layers() + additions.len();
    if strict && total > MAX_LAYERS {
        return Err(Error::Invalid(format!(
            "{} additions would give {total} layers, more than {MAX_LAYERS}",
            additions.len()
        )));
    }
    check_resolution(model, base)?;
    let (h, w) = base.dims();
    let mut current = base.clone();
    for (i, add) in additions.iter().enumerate() {
        let flat: Planar3 = composite(&current, false)?;
        let global = add.global_prompt.clone().unwrap_or_else(|| {
            format!("{} and {}", current.global_prompt, add.prompt)
        });
        let placeholder = match &add.prior {
            Some(p) => {
                p.check_binary()?;
                p.clone()
            }
            None => LayerMask::zeros(h, w),
        };
        let source = LayerSet::from_foregrounds(
            flat,
            vec![ForegroundLayer {
                image: Planar3::filled(h, w, [0.0; 3]),
                mask: placeholder,
                prompt: add.prompt.clone(),
            }],
            global.clone(),
        )?;
        let req = EditRequest::inpaint(source, vec![1], vec![add.prompt.clone()]).with_global_prompt(global.clone());
        let step_cfg = GuidanceConfig {
            seed: gcfg.seed.wrapping_add(i as u64),
            ..gcfg.clone()
        };
        let priors = add.prior.as_ref().map(std::slice::from_ref);
        let out = inpaint_with_priors(model, schedule, &req, &step_cfg, priors)?;
        let generated = out.layers.foregrounds.into_iter().next().expect("one foreground");

        let taken: Vec<LayerMask> = current.foregrounds.iter().map(|f| f.mask.clone()).collect();
        let mut mask = generated.mask;
        for m in &taken {
            mask = mask.subtract(m)?;
        }
        let mut foregrounds = current.foregrounds.clone();
        foregrounds.push(ForegroundLayer {
            image: generated.image,
            mask,
            prompt: add.prompt.clone(),
        });
        let mut next = LayerSet::from_foregrounds(base.background_image.clone(), foregrounds, global)?;
        next.background_prompt = BACKGROUND_PROMPT.to_string();
        current = next;
    }
    if strict {
        current.validate()?;
    } else {
        current.validate_structure()?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::Conditioning;
    use crate::textcond::PromptTexts;
    use candle_core::{DType, Device};

    /// Predicts the noise that would take a fixed clean latent to `x_t`.
    struct Oracle {
        x0: Tensor,
        schedule: NoiseSchedule,
        res: usize,
    }

    impl NoisePredictor for Oracle {
        fn dtype(&self) -> DType {
            DType::F32
        }
        fn device(&self) -> &Device {
            &Device::Cpu
        }
        fn resolution(&self) -> usize {
            self.res
        }
        fn max_layers(&self) -> usize {
            MAX_LAYERS
        }
        fn encode(&self, batch: &[&PromptTexts]) -> Result<Conditioning> {
            let l = batch[0].layers.len();
            Ok(Conditioning {
                global: Tensor::zeros((batch.len(), 1, 1), DType::F32, &Device::Cpu)?,
                layers: Tensor::zeros((batch.len(), l, 1, 1), DType::F32, &Device::Cpu)?,
            })
        }
        fn predict_noise(&self, x: &Tensor, timesteps: &[Vec<usize>], _: &Conditioning) -> Result<Tensor> {
            let t = timesteps[0][0];
            let ab = self.schedule.alpha_bar(t);
            let x0 = self.x0.unsqueeze(0)?;
            Ok(((x - x0.affine(ab.sqrt(), 0.0)?)?.affine(1.0 / (1.0 - ab).sqrt(), 0.0))?)
        }
    }

    fn scene(res: usize) -> LayerSet {
        let fg = LayerMask::from_fn(res, res, |y, x| y < res / 2 && x < res / 2);
        let mut img = Planar3::filled(res, res, [0.2, -0.4, 0.6]);
        img.set(0, 1, 1, 0.9);
        LayerSet::from_foregrounds(
            Planar3::filled(res, res, [-0.5, 0.1, 0.3]),
            vec![ForegroundLayer {
                image: img,
                mask: fg,
                prompt: "a red square".into(),
            }],
            "a blue plain background with a red square",
        )
        .unwrap()
    }

    fn oracle_for(set: &LayerSet) -> Oracle {
        let (h, _) = set.dims();
        Oracle {
            x0: layer_set_to_latent(set, DType::F32, &Device::Cpu).unwrap(),
            schedule: NoiseSchedule::new(1000, 1e-4, 0.02).unwrap(),
            res: h,
        }
    }

    fn gcfg(steps: usize) -> GuidanceConfig {
        GuidanceConfig {
            steps,
            cfg_scale: 1.0,
            smg_scale: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn inpaint_preserves_non_target_images() {
        let set = scene(8);
        // An oracle pulling toward different content exercises the pinning.
        let mut other = set.clone();
        other.background_image = Planar3::filled(8, 8, [0.9, 0.9, 0.9]);
        other.foregrounds[0].image = Planar3::filled(8, 8, [-0.9, 0.0, 0.9]);
        let oracle = oracle_for(&other);
        let s = oracle.schedule.clone();
        let g = GuidanceConfig { steps: 10, ..Default::default() };

        let req = EditRequest::inpaint(set.clone(), vec![1], vec!["a blue star".into()]);
        let out = inpaint_layers(&oracle, &s, &req, &g).unwrap();
        assert_eq!(out.layers.background_image, set.background_image);
        assert_eq!(out.layers.foregrounds[0].prompt, "a blue star");
        out.layers.validate().unwrap();

        let req = EditRequest::inpaint(set.clone(), vec![0], vec!["the background".into()]);
        let out = inpaint_layers(&oracle, &s, &req, &g).unwrap();
        assert_eq!(out.layers.foregrounds[0].image, set.foregrounds[0].image);
    }

    #[test]
    fn inpaint_full_freeze_keeps_masks() {
        let set = scene(8);
        let mut other = set.clone();
        other.foregrounds[0].mask = LayerMask::from_fn(8, 8, |y, _| y >= 6);
        other.background_mask = LayerMask::from_fn(8, 8, |y, _| y < 6);
        let oracle = oracle_for(&other);
        let s = oracle.schedule.clone();
        let mut req = EditRequest::inpaint(set.clone(), vec![1], vec!["a blue star".into()]);
        req.mask_freeze_steps = 10;
        let out = inpaint_layers(&oracle, &s, &req, &gcfg(10)).unwrap();
        assert_eq!(out.layers.background_mask, set.background_mask);
    }

    #[test]
    fn inpaint_rejects_all_targets() {
        let set = scene(8);
        let oracle = oracle_for(&set);
        let s = oracle.schedule.clone();
        let req = EditRequest::inpaint(set, vec![0, 1], vec!["x".into(), "y".into()]);
        assert!(inpaint_layers(&oracle, &s, &req, &gcfg(5)).is_err());
    }

    #[test]
    fn style_transfer_step_count_and_preservation() {
        let set = scene(8);
        let mut other = set.clone();
        other.background_image = Planar3::filled(8, 8, [0.9, 0.9, 0.9]);
        let oracle = oracle_for(&other);
        let s = oracle.schedule.clone();
        let req = EditRequest::style(set.clone(), vec![1], "neon style", 0.8);
        let out = style_transfer(&oracle, &s, &req, &GuidanceConfig::default()).unwrap();
        assert_eq!(out.steps_run, 40);
        assert_eq!(out.trace.steps.len(), 40);
        assert_eq!(out.trace.steps[0].t, 800);
        assert_eq!(out.layers.background_image, set.background_image);
        assert_eq!(out.layers.foregrounds[0].prompt, "a red square, neon style");

        let bad = EditRequest::style(set.clone(), vec![1], "neon", 1.5);
        assert!(style_transfer(&oracle, &s, &bad, &gcfg(10)).is_err());
        let empty = EditRequest::style(set, vec![1], " ", 0.5);
        assert!(style_transfer(&oracle, &s, &empty, &gcfg(10)).is_err());
    }

    #[test]
    fn full_strength_with_oracle_recovers_source() {
        let set = scene(8);
        let oracle = oracle_for(&set);
        let s = oracle.schedule.clone();
        let req = EditRequest::style(set.clone(), vec![1], "neon", 1.0);
        let out = style_transfer(&oracle, &s, &req, &gcfg(50)).unwrap();
        for (a, b) in out.layers.foregrounds[0].image.data().iter().zip(set.foregrounds[0].image.data()) {
            assert!((a - b).abs() <= 1e-3);
        }
        assert_eq!(out.layers.foregrounds[0].mask, set.foregrounds[0].mask);
    }

    #[test]
    fn complement_rule_for_priors() {
        let a = LayerMask::from_fn(4, 4, |y, _| y < 2);
        let b = LayerMask::from_fn(4, 4, |y, _| y >= 2);
        let full = complete_priors(&[a.clone(), b]).unwrap();
        assert_eq!(full[0], LayerMask::zeros(4, 4));
        assert!(check_partition(&[LayerMask::ones(4, 4), a]).is_err());
    }

    #[test]
    fn prior_init_decomposes() {
        let set = scene(8);
        let oracle = oracle_for(&set);
        let s = oracle.schedule.clone();
        let priors = complete_priors(&[LayerMask::from_fn(8, 8, |y, _| y < 3)]).unwrap();
        let g = gcfg(50);
        let with = prior_init(&oracle, &s, &priors, &g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
        let eps = randn(&mut rng, &[2, 6, 8, 8], DType::F32, &Device::Cpu).unwrap();
        let ab = s.alpha_bar(1000);
        let with = with.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let eps = eps.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for l in 0..2 {
            let signed = priors[l].to_signed();
            for c in 0..6 {
                for p in 0..64 {
                    let i = (l * 6 + c) * 64 + p;
                    let want = if c < 3 {
                        eps[i]
                    } else {
                        (ab.sqrt() * signed[p] as f64 + (1.0 - ab).sqrt() * eps[i] as f64) as f32
                    };
                    assert!((with[i] - want).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn prior_sampling_with_oracle() {
        let set = scene(8);
        let oracle = oracle_for(&set);
        let s = oracle.schedule.clone();
        let bundle = PromptBundle::new("g", vec!["the background".into(), "a red square".into()]).unwrap();
        let priors = complete_priors(&[LayerMask::from_fn(8, 8, |y, _| y < 3)]).unwrap();
        let out = sample_with_mask_priors(&oracle, &s, &bundle, &priors, &gcfg(20)).unwrap();
        out.layers.validate().unwrap();
        assert!(sample_with_mask_priors(&oracle, &s, &bundle, &priors[1..], &gcfg(20)).is_err());
    }

    #[test]
    fn iterative_generation() {
        let set = scene(8);
        let oracle = oracle_for(&set);
        let s = oracle.schedule.clone();
        let g = gcfg(10);
        let same = iterative_generate(&oracle, &s, &set, &[], &g, true).unwrap();
        assert_eq!(same, set);

        let adds = vec![
            Addition {
                prompt: "a green circle".into(),
                prior: Some(LayerMask::from_fn(8, 8, |y, x| y >= 5 && x >= 5)),
                global_prompt: None,
            },
            Addition {
                prompt: "a yellow star".into(),
                prior: None,
                global_prompt: Some("a scene".into()),
            },
        ];
        let one = iterative_generate(&oracle, &s, &set, &adds[..1], &g, true).unwrap();
        assert_eq!(one.num_layers(), 3);
        assert_eq!(one.foregrounds[0], set.foregrounds[0]);
        let two = iterative_generate(&oracle, &s, &set, &adds, &g, true).unwrap();
        assert_eq!(two.num_layers(), 4);
        two.validate().unwrap();
        assert_eq!(two.global_prompt, "a scene");
        let three = [adds.clone(), adds[..1].to_vec()].concat();
        assert!(iterative_generate(&oracle, &s, &set, &three, &g, true).is_err());
    }
}
