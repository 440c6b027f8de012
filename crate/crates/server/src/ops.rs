//! Blocking implementations of the service operations.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use candle_core::DType;
use layerdiff_api as api;
use layerdiff_core::apps::{self, Addition, EditRequest};
use layerdiff_core::denoiser::LayerDiffModel;
use layerdiff_core::export::{read_mask_png, write_layer_set, write_trace};
use layerdiff_core::harness::{
    self, read_loss_log, train_classifier, AttributeClassifier, ClassifierConfig, TrainConfig,
};
use layerdiff_core::layerspace::LayerSet;
use layerdiff_core::sampler::{self, mask_exclusivity, GuidanceConfig, SampleOutput};
use layerdiff_core::synthdata::{self, DatasetConfig, LayerMix};
use layerdiff_core::textcond::PromptBundle;
use layerdiff_core::{Error, Result};

/// Loaded checkpoints keyed by path.
#[derive(Default)]
pub struct ModelCache {
    models: Mutex<HashMap<PathBuf, Arc<LayerDiffModel>>>,
}

impl ModelCache {
    pub fn get(&self, path: &str) -> Result<Arc<LayerDiffModel>> {
        let path = required_path(path, "ckpt")?;
        if !path.exists() {
            return Err(Error::Invalid(format!("checkpoint {} does not exist", path.display())));
        }
        if let Some(m) = self.models.lock().expect("cache lock").get(&path) {
            return Ok(m.clone());
        }
        let model = Arc::new(LayerDiffModel::load(&path, DType::F32)?);
        self.models
            .lock()
            .expect("cache lock")
            .insert(path, model.clone());
        Ok(model)
    }

    /// Drops a cached checkpoint so the next request reloads it.
    pub fn evict(&self, path: &Path) {
        self.models.lock().expect("cache lock").remove(path);
    }
}

fn required_path(p: &str, what: &str) -> Result<PathBuf> {
    if p.trim().is_empty() {
        return Err(Error::Invalid(format!("{what} path is required")));
    }
    Ok(PathBuf::from(p))
}

pub fn guidance(g: &api::Guidance) -> GuidanceConfig {
    let d = GuidanceConfig::default();
    GuidanceConfig {
        steps: g.steps.unwrap_or(d.steps),
        cfg_scale: g.cfg_scale.unwrap_or(d.cfg_scale),
        smg_scale: g.smg_scale.unwrap_or(d.smg_scale),
        blur_kernel: g.blur_kernel.or(d.blur_kernel),
        blur_sigma: g.blur_sigma.or(d.blur_sigma),
        seed: g.seed.unwrap_or(d.seed),
        invert_smg_mask: g.invert_smg_mask.unwrap_or(d.invert_smg_mask),
        record_x0: false,
    }
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

fn layer_response(out: &Path, set: &LayerSet, sample: Option<&SampleOutput>) -> Result<api::LayerSetResponse> {
    let manifest = write_layer_set(out, "out", set)?;
    Ok(api::LayerSetResponse {
        out_dir: path_string(out),
        manifest: path_string(&manifest),
        global_prompt: set.global_prompt.clone(),
        prompts: set.layer_prompts(),
        mask_areas: set.masks().iter().map(|m| m.area_fraction()).collect(),
        mask_exclusivity: sample.map(|s| mask_exclusivity(&s.soft_masks)).transpose()?,
        steps_run: sample.map(|s| s.steps_run),
        forward_passes: sample.map(|s| s.trace.forward_passes()),
    })
}

fn load_source(src: &api::SourceRef) -> Result<LayerSet> {
    let dir = required_path(&src.dir, "source")?;
    let records = synthdata::read_manifest(&dir)?;
    let record = match &src.record {
        Some(id) => records
            .iter()
            .find(|r| &r.id == id)
            .ok_or_else(|| Error::Invalid(format!("record {id} not found in {}", dir.display())))?,
        None => records
            .first()
            .ok_or_else(|| Error::Invalid(format!("{} has no records", dir.display())))?,
    };
    synthdata::read_record(&dir, record)
}

pub fn make_data(req: &api::MakeDataRequest) -> Result<api::MakeDataResponse> {
    let out = required_path(&req.out, "out")?;
    let d = DatasetConfig::default();
    let cfg = DatasetConfig {
        num: req.num.unwrap_or(d.num),
        resolution: req.resolution.unwrap_or(d.resolution),
        layer_mix: req.layer_mix.map(LayerMix).unwrap_or(d.layer_mix),
        seed: req.seed.unwrap_or(d.seed),
    };
    let samples = synthdata::generate_dataset(&cfg)?;
    let manifest = synthdata::write_dataset(&samples, &out)?;
    let mut layer_counts = BTreeMap::new();
    for (set, _) in &samples {
        *layer_counts.entry(set.num_layers()).or_insert(0) += 1;
    }
    Ok(api::MakeDataResponse {
        manifest: path_string(&manifest),
        records: samples.len(),
        layer_counts,
    })
}

pub fn train(req: &api::TrainRequest, cache: &ModelCache) -> Result<api::TrainResponse> {
    let cfg: TrainConfig = serde_json::from_value(req.config.clone())
        .map_err(|e| Error::Invalid(format!("train config: {e}")))?;
    cfg.validate()?;
    let outcome = harness::train(&cfg)?;
    cache.evict(&outcome.checkpoint);
    let first = outcome.losses.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = outcome.losses.last().map(|r| r.loss).unwrap_or(f64::NAN);
    Ok(api::TrainResponse {
        checkpoint: path_string(&outcome.checkpoint),
        loss_log: path_string(&outcome.loss_log),
        steps: outcome.losses.len(),
        first_loss: first,
        final_loss: last,
    })
}

pub fn classifier(req: &api::ClassifierRequest) -> Result<api::ClassifierResponse> {
    let data = required_path(&req.data, "data")?;
    let out = required_path(&req.out, "out")?;
    let samples = synthdata::read_dataset(&data)?;
    let holdout = req.holdout.unwrap_or(0.2);
    if !(0.0..1.0).contains(&holdout) {
        return Err(Error::Invalid(format!("holdout {holdout} outside [0, 1)")));
    }
    let n_held = ((samples.len() as f64 * holdout).round() as usize).clamp(1, samples.len().max(1));
    if samples.len() < 2 {
        return Err(Error::Invalid("classifier training needs at least two records".into()));
    }
    let (train, held) = samples.split_at(samples.len() - n_held);
    let d = ClassifierConfig::default();
    let cfg = ClassifierConfig {
        resolution: samples[0].0.dims().0,
        epochs: req.epochs.unwrap_or(d.epochs),
        seed: req.seed.unwrap_or(d.seed),
        ..d
    };
    let (model, (color, shape)) = train_classifier(train, held, cfg)?;
    model.save(&out)?;
    Ok(api::ClassifierResponse {
        checkpoint: path_string(&out),
        color_accuracy: color,
        shape_accuracy: shape,
    })
}

pub fn sample(req: &api::SampleRequest, cache: &ModelCache) -> Result<api::LayerSetResponse> {
    let out = required_path(&req.out, "out")?;
    let model = cache.get(&req.ckpt)?;
    let schedule = model.schedule()?;
    let bundle = PromptBundle::new(req.global.clone(), req.layers.clone())?;
    let g = GuidanceConfig {
        record_x0: req.trace,
        ..guidance(&req.guidance)
    };
    let result = sampler::sample(model.as_ref(), &schedule, &bundle, &g)?;
    if req.trace {
        let (h, w) = result.layers.dims();
        write_trace(&out.join("trace"), &result.trace, h, w)?;
    }
    layer_response(&out, &result.layers, Some(&result))
}

pub fn inpaint(req: &api::InpaintRequest, cache: &ModelCache) -> Result<api::LayerSetResponse> {
    let out = required_path(&req.out, "out")?;
    let model = cache.get(&req.ckpt)?;
    let schedule = model.schedule()?;
    let mut edit = EditRequest::inpaint(load_source(&req.source)?, req.targets.clone(), req.prompts.clone());
    edit.global_prompt = req.global.clone();
    if let Some(k) = req.mask_freeze_steps {
        edit.mask_freeze_steps = k;
    }
    let result = apps::inpaint_layers(model.as_ref(), &schedule, &edit, &guidance(&req.guidance))?;
    layer_response(&out, &result.layers, Some(&result))
}

pub fn style(req: &api::StyleRequest, cache: &ModelCache) -> Result<api::LayerSetResponse> {
    let out = required_path(&req.out, "out")?;
    let model = cache.get(&req.ckpt)?;
    let schedule = model.schedule()?;
    let mut edit = EditRequest::style(
        load_source(&req.source)?,
        req.targets.clone(),
        req.style.clone(),
        req.strength.unwrap_or(apps::DEFAULT_STRENGTH),
    );
    edit.global_prompt = req.global.clone();
    let result = apps::style_transfer(model.as_ref(), &schedule, &edit, &guidance(&req.guidance))?;
    layer_response(&out, &result.layers, Some(&result))
}

pub fn priors(req: &api::PriorsRequest, cache: &ModelCache) -> Result<api::LayerSetResponse> {
    let out = required_path(&req.out, "out")?;
    let model = cache.get(&req.ckpt)?;
    let schedule = model.schedule()?;
    let bundle = PromptBundle::new(req.global.clone(), req.layers.clone())?;
    let fg = req
        .priors
        .iter()
        .map(|p| read_mask_png(Path::new(p)))
        .collect::<Result<Vec<_>>>()?;
    let full = apps::complete_priors(&fg)?;
    let result = apps::sample_with_mask_priors(model.as_ref(), &schedule, &bundle, &full, &guidance(&req.guidance))?;
    layer_response(&out, &result.layers, Some(&result))
}

pub fn iterate(req: &api::IterateRequest, cache: &ModelCache) -> Result<api::LayerSetResponse> {
    let out = required_path(&req.out, "out")?;
    let model = cache.get(&req.ckpt)?;
    let schedule = model.schedule()?;
    let base = load_source(&req.source)?;
    let additions = req
        .additions
        .iter()
        .map(|a| {
            Ok(Addition {
                prompt: a.prompt.clone(),
                prior: a.prior.as_deref().map(|p| read_mask_png(Path::new(p))).transpose()?,
                global_prompt: a.global.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = apps::iterative_generate(model.as_ref(), &schedule, &base, &additions, &guidance(&req.guidance), !req.lenient)?;
    layer_response(&out, &set, None)
}

pub fn eval(req: &api::EvalRequest, cache: &ModelCache) -> Result<api::EvalResponse> {
    let data = required_path(&req.data, "data")?;
    let model = cache.get(&req.ckpt)?;
    let schedule = model.schedule()?;
    let classifier_path = match &req.classifier {
        Some(p) => PathBuf::from(p),
        None => PathBuf::from(&req.ckpt).with_file_name("classifier.ckpt"),
    };
    if !classifier_path.exists() {
        return Err(Error::Checkpoint {
            path: classifier_path,
            reason: "classifier checkpoint missing; train one with the classifier operation".into(),
        });
    }
    let classifier = AttributeClassifier::load(&classifier_path)?;
    let records = synthdata::read_manifest(&data)?;
    let n = req.n.unwrap_or(256);
    let mut report = harness::evaluate(model.as_ref(), &schedule, &classifier, &records, n, &guidance(&req.guidance))?;
    if let Some(log) = &req.loss_log {
        report.loss_curve = read_loss_log(Path::new(log))?;
    }
    Ok(api::EvalResponse {
        mask_exclusivity: report.mask_exclusivity,
        prompt_alignment: report.prompt_alignment,
        shape_accuracy: report.shape_accuracy,
        samples: report.per_sample.len(),
        report: serde_json::to_value(&report)?,
    })
}
