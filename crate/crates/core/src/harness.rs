//! Training loop, attribute classifier and sample-quality metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::denoiser::{DenoiserConfig, LayerDiffModel, LATENT_CHANNELS};
use crate::error::{Error, Result};
use crate::layerspace::{LayerMask, LayerSet, Planar3};
use crate::nn::{Conv2d, Init, Linear, ParamStore};
use crate::sampler::{mask_exclusivity, sample, GuidanceConfig};
use crate::schedule::{draw_timesteps, NoiseSchedule, TimestepMode};
use crate::synthdata::{parse_layer_prompt, read_dataset, DatasetRecord};
use crate::tensor::{layer_set_to_latent, randn};
use crate::textcond::{drop_conditions, PromptBundle, PromptTexts, Vocabulary};

pub const CONFIG_VERSION: u32 = 1;
pub const CLASSIFIER_KIND: &str = "attribute-classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub cond_dropout: f64,
    /// Optimizer steps.
    pub total_steps: usize,
    pub seed: u64,
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// Write a checkpoint every this many optimizer steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Use at most this many dataset records.
    pub max_samples: Option<usize>,
    /// Network and noise schedule.
    pub denoiser: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            lr: 1e-5,
            warmup_steps: 500,
            weight_decay: 1e-2,
            batch_size: 32,
            grad_accum: 8,
            cond_dropout: 0.1,
            total_steps: 4000,
            seed: 0,
            dataset: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            checkpoint_every: 1000,
            max_samples: None,
            denoiser: DenoiserConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Invalid(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Invalid("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.total_steps == 0 {
            return Err(Error::Invalid(
                "batch_size, grad_accum and total_steps must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Invalid(format!("cond_dropout {} outside [0, 1]", self.cond_dropout)));
        }
        self.denoiser.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Linear warmup to `lr` over `warmup_steps`, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

struct TrainSample {
    latent: Tensor,
    texts: PromptTexts,
}

/// Stateful trainer; one call to [`Trainer::step`] is one optimizer step.
pub struct Trainer {
    config: TrainConfig,
    model: LayerDiffModel,
    schedule: NoiseSchedule,
    opt: AdamW,
    vars: Vec<Var>,
    data: Vec<TrainSample>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, samples: &[(LayerSet, DatasetRecord)]) -> Result<Self> {
        config.validate()?;
        let model = LayerDiffModel::init(config.denoiser.clone(), Vocabulary::default(), config.seed, DType::F32)?;
        Self::with_model(config, model, samples)
    }

    pub fn with_model(config: TrainConfig, model: LayerDiffModel, samples: &[(LayerSet, DatasetRecord)]) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::Invalid("training needs at least one sample".into()));
        }
        let res = model.config().resolution;
        let max_layers = model.config().max_layers;
        let mut data = Vec::with_capacity(samples.len());
        for (set, record) in samples {
            if set.dims() != (res, res) {
                return Err(Error::Dataset {
                    id: record.id.clone(),
                    reason: format!("resolution {:?} does not match the model's {res}", set.dims()),
                });
            }
            if set.num_layers() > max_layers {
                return Err(Error::Dataset {
                    id: record.id.clone(),
                    reason: format!("{} layers exceed the model's {max_layers}", set.num_layers()),
                });
            }
            data.push(TrainSample {
                latent: layer_set_to_latent(set, model.dtype(), model.device())?,
                texts: PromptTexts::new(set.global_prompt.clone(), set.layer_prompts()),
            });
        }
        let schedule = model.schedule()?;
        let vars = model.params().vars();
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: config.lr_at(0),
                weight_decay: config.weight_decay,
                ..Default::default()
            },
        )?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a11_0000);
        let mut t = Self {
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            config,
            model,
            schedule,
            opt,
            vars,
            data,
            rng,
            step: 0,
        };
        t.shuffle();
        Ok(t)
    }

    fn shuffle(&mut self) {
        let mut r = ChaCha8Rng::seed_from_u64(self.config.seed);
        r.set_stream(self.epoch);
        self.order = (0..self.data.len()).collect();
        self.order.shuffle(&mut r);
        self.cursor = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.shuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn model(&self) -> &LayerDiffModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Loss of one group of samples sharing a layer count.
    fn group_loss(&mut self, idx: &[usize]) -> Result<Tensor> {
        let l = self.data[idx[0]].latent.dim(0)?;
        let (h, w) = (self.model.config().resolution, self.model.config().resolution);
        let n = idx.len();
        let dtype = self.model.dtype();
        let device = self.model.device().clone();
        let x0 = Tensor::stack(&idx.iter().map(|&i| self.data[i].latent.clone()).collect::<Vec<_>>(), 0)?;
        let mut timesteps = Vec::with_capacity(n);
        let mut a = Vec::with_capacity(n * l);
        let mut b = Vec::with_capacity(n * l);
        let mut texts = Vec::with_capacity(n);
        for &i in idx {
            let (ts, _) = draw_timesteps(l, self.schedule.steps(), TimestepMode::Mixed, &mut self.rng)?;
            for &t in &ts.0 {
                let ab = self.schedule.alpha_bar(t);
                a.push(ab.sqrt() as f32);
                b.push((1.0 - ab).sqrt() as f32);
            }
            timesteps.push(ts.0);
            let (dropped, _) = drop_conditions(&self.data[i].texts, self.config.cond_dropout, &mut self.rng)?;
            texts.push(dropped);
        }
        let eps = randn(&mut self.rng, &[n, l, LATENT_CHANNELS, h, w], dtype, &device)?;
        let a = Tensor::from_vec(a, (n, l, 1, 1, 1), &device)?.to_dtype(dtype)?;
        let b = Tensor::from_vec(b, (n, l, 1, 1, 1), &device)?.to_dtype(dtype)?;
        let x_t = (x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?;
        let refs: Vec<&PromptTexts> = texts.iter().collect();
        let cond = self.model.encode(&refs)?;
        self.model.loss(&x_t, &timesteps, &cond, &eps)
    }

    /// One optimizer step over `grad_accum` micro-batches.
    pub fn step(&mut self) -> Result<LossRow> {
        let lr = self.config.lr_at(self.step);
        let total = (self.config.batch_size * self.config.grad_accum) as f64;
        let mut grads = GradStore::default();
        let mut loss_sum = 0.0;
        for _ in 0..self.config.grad_accum {
            let batch = self.next_batch();
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for i in batch {
                groups.entry(self.data[i].latent.dim(0)?).or_default().push(i);
            }
            for idx in groups.values() {
                let loss = self.group_loss(idx)?;
                let weight = idx.len() as f64 / total;
                let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss {value} at step {}",
                        self.step
                    )));
                }
                loss_sum += value * weight;
                let all = loss.affine(weight, 0.0)?.backward()?;
                let mut mine = GradStore::default();
                for v in &self.vars {
                    if let Some(g) = all.get(v.as_tensor()) {
                        mine.insert(v.as_tensor(), g.clone());
                    }
                }
                grads.extend(mine)?;
            }
        }
        self.opt.set_learning_rate(lr);
        self.opt.step(&grads)?;
        let row = LossRow {
            step: self.step,
            loss: loss_sum,
            lr,
        };
        self.step += 1;
        Ok(row)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub losses: Vec<LossRow>,
}

/// Reads the dataset, trains and writes `loss.csv`, periodic checkpoints and
/// `model.ckpt` under `out_dir`.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(config, |_| {})
}

pub fn train_with_progress(config: &TrainConfig, mut progress: impl FnMut(&LossRow)) -> Result<TrainOutcome> {
    config.validate()?;
    let mut samples = read_dataset(&config.dataset)?;
    if let Some(n) = config.max_samples {
        samples.truncate(n);
    }
    let mut trainer = Trainer::new(config.clone(), &samples)?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join("train_config.json"), serde_json::to_string_pretty(config)?)
        .map_err(|e| Error::io(out, e))?;
    let log_path = out.join("loss.csv");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "step,loss,lr").map_err(|e| Error::io(&log_path, e))?;
    let mut losses = Vec::with_capacity(config.total_steps);
    for _ in 0..config.total_steps {
        let row = trainer.step()?;
        writeln!(log, "{},{},{}", row.step, row.loss, row.lr).map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        progress(&row);
        losses.push(row);
        let done = trainer.steps_done();
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.total_steps {
            trainer.model().save(&out.join(format!("step_{done:06}.ckpt")))?;
        }
    }
    let checkpoint = out.join("model.ckpt");
    trainer.model().save(&checkpoint)?;
    Ok(TrainOutcome {
        checkpoint,
        loss_log: log_path,
        losses,
    })
}

/// Reads a `step,loss,lr` log.
pub fn read_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        let bad = || Error::Invalid(format!("{}:{}: malformed loss row {line:?}", path.display(), n + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        rows.push(LossRow {
            step: parts[0].parse().map_err(|_| bad())?,
            loss: parts[1].parse().map_err(|_| bad())?,
            lr: parts[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Mean loss over the last `window` rows.
pub fn smoothed_final_loss(rows: &[LossRow], window: usize) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let tail = &rows[rows.len().saturating_sub(window.max(1))..];
    Some(tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub resolution: usize,
    pub channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: 16,
            epochs: 6,
            batch_size: 64,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Small CNN predicting color and shape of a single cut-out foreground.
pub struct AttributeClassifier {
    config: ClassifierConfig,
    params: ParamStore,
    convs: Vec<Conv2d>,
    hidden: Linear,
    head: Linear,
}

const CLASSES: usize = 4;

impl AttributeClassifier {
    pub fn init(config: ClassifierConfig) -> Result<Self> {
        if config.resolution < 4 || config.resolution % 4 != 0 {
            return Err(Error::Invalid(format!(
                "classifier resolution {} must be a positive multiple of 4",
                config.resolution
            )));
        }
        let mut params = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels;
        let (convs, hidden, head) = {
            let mut init = Init::new(&mut params, &mut rng);
            let convs = vec![
                Conv2d::new(&mut init.pp("conv0"), 4, c, 3, 1)?,
                Conv2d::new(&mut init.pp("conv1"), c, 2 * c, 3, 2)?,
                Conv2d::new(&mut init.pp("conv2"), 2 * c, 2 * c, 3, 2)?,
            ];
            let side = config.resolution / 4;
            let hidden = Linear::new(&mut init.pp("hidden"), 2 * c * side * side, 64, true)?;
            let head = Linear::new(&mut init.pp("head"), 64, 2 * CLASSES, true)?;
            (convs, hidden, head)
        };
        Ok(Self {
            config,
            params,
            convs,
            hidden,
            head,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    /// `(N, 4, R, R)` inputs to `(N, 8)` logits: colors then shapes.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = candle_nn::ops::silu(&conv.forward(&h)?)?;
        }
        let h = h.flatten_from(1)?;
        let h = candle_nn::ops::silu(&self.hidden.forward(&h)?)?;
        self.head.forward(&h)
    }

    /// Predicted `(color, shape)` class indices.
    pub fn predict(&self, items: &[(&Planar3, &LayerMask)]) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(256) {
            let x = classifier_batch(chunk, self.config.resolution)?;
            let logits = self.forward(&x)?;
            let colors = logits.narrow(1, 0, CLASSES)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
            let shapes = logits.narrow(1, CLASSES, CLASSES)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
            out.extend(colors.into_iter().zip(shapes).map(|(c, s)| (c as usize, s as usize)));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            CLASSIFIER_KIND,
            serde_json::to_value(&self.config)?,
            serde_json::Value::Null,
            &self.params,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let loaded = checkpoint::load(path)?;
        if loaded.header.kind != CLASSIFIER_KIND {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("expected a {CLASSIFIER_KIND} checkpoint, found {}", loaded.header.kind),
            });
        }
        let config: ClassifierConfig = serde_json::from_value(loaded.header.config.clone())?;
        let model = Self::init(config)?;
        loaded.restore_into(&model.params)?;
        Ok(model)
    }
}

/// Classifier input: the square around the mask's bounding box (one pixel
/// of margin), resampled to `resolution`, with the image zeroed outside the
/// mask plus the signed mask. An empty mask uses the whole canvas.
pub fn classifier_batch(items: &[(&Planar3, &LayerMask)], resolution: usize) -> Result<Tensor> {
    let plane = resolution * resolution;
    let mut data = Vec::with_capacity(items.len() * 4 * plane);
    for (img, mask) in items {
        if img.dims() != mask.dims() {
            return Err(Error::Shape(format!(
                "classifier image {:?} and mask {:?} differ",
                img.dims(),
                mask.dims()
            )));
        }
        let (h, w) = mask.dims();
        let (y0, y1, x0, x1) = bounding_box(mask).unwrap_or((0, h, 0, w));
        let side = ((y1 - y0).max(x1 - x0) + 2) as f32;
        let (cy, cx) = ((y0 + y1) as f32 / 2.0, (x0 + x1) as f32 / 2.0);
        let step = side / resolution as f32;
        let coord = |c: f32, i: usize, n: usize| {
            let v = (c - side / 2.0 + (i as f32 + 0.5) * step).floor();
            (v >= 0.0 && (v as usize) < n).then_some(v as usize)
        };
        let src: Vec<Option<usize>> = (0..plane)
            .map(|p| match (coord(cy, p / resolution, h), coord(cx, p % resolution, w)) {
                (Some(y), Some(x)) => Some(y * w + x),
                _ => None,
            })
            .collect();
        let m = mask.data();
        for c in 0..3 {
            let channel = &img.data()[c * h * w..(c + 1) * h * w];
            data.extend(src.iter().map(|s| s.map_or(0.0, |i| channel[i] * m[i])));
        }
        data.extend(src.iter().map(|s| s.map_or(-1.0, |i| 2.0 * m[i] - 1.0)));
    }
    Ok(Tensor::from_vec(data, (items.len(), 4, resolution, resolution), &Device::Cpu)?)
}

/// `(y0, y1, x0, x1)` half-open bounds of the set pixels.
fn bounding_box(mask: &LayerMask) -> Option<(usize, usize, usize, usize)> {
    let (_, w) = mask.dims();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.data().iter().enumerate().filter(|(_, v)| **v > 0.5) {
        let (y, x) = (i / w, i % w);
        bounds = Some(match bounds {
            None => (y, y + 1, x, x + 1),
            Some((a, b, c, d)) => (a.min(y), b.max(y + 1), c.min(x), d.max(x + 1)),
        });
    }
    bounds
}

/// Foreground examples with their attribute labels.
pub fn labelled_foregrounds(samples: &[(LayerSet, DatasetRecord)]) -> Vec<(Planar3, LayerMask, usize, usize)> {
    let mut out = Vec::new();
    for (set, _) in samples {
        for fg in &set.foregrounds {
            if let Some((color, shape)) = parse_layer_prompt(&fg.prompt) {
                out.push((fg.image.clone(), fg.mask.clone(), color.index(), shape.index()));
            }
        }
    }
    out
}

/// Trains the classifier; returns it with its `(color, shape)` accuracy on
/// `held_out`.
pub fn train_classifier(
    train: &[(LayerSet, DatasetRecord)],
    held_out: &[(LayerSet, DatasetRecord)],
    config: ClassifierConfig,
) -> Result<(AttributeClassifier, (f64, f64))> {
    let model = AttributeClassifier::init(config.clone())?;
    let examples = labelled_foregrounds(train);
    if examples.is_empty() {
        return Err(Error::Invalid("no labelled foregrounds to train the classifier".into()));
    }
    let mut opt = AdamW::new(
        model.params.vars(),
        ParamsAdamW {
            lr: config.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let items: Vec<(&Planar3, &LayerMask)> = chunk.iter().map(|&i| (&examples[i].0, &examples[i].1)).collect();
            let x = classifier_batch(&items, config.resolution)?;
            let colors = Tensor::from_vec(chunk.iter().map(|&i| examples[i].2 as u32).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
            let shapes = Tensor::from_vec(chunk.iter().map(|&i| examples[i].3 as u32).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
            let logits = model.forward(&x)?;
            let loss = (candle_nn::loss::cross_entropy(&logits.narrow(1, 0, CLASSES)?, &colors)?
                + candle_nn::loss::cross_entropy(&logits.narrow(1, CLASSES, CLASSES)?, &shapes)?)?;
            opt.backward_step(&loss)?;
        }
    }
    let acc = classifier_accuracy(&model, held_out)?;
    Ok((model, acc))
}

/// `(color, shape)` accuracy on ground-truth foregrounds.
pub fn classifier_accuracy(model: &AttributeClassifier, samples: &[(LayerSet, DatasetRecord)]) -> Result<(f64, f64)> {
    let examples = labelled_foregrounds(samples);
    if examples.is_empty() {
        return Err(Error::Invalid("no labelled foregrounds to evaluate".into()));
    }
    let items: Vec<(&Planar3, &LayerMask)> = examples.iter().map(|e| (&e.0, &e.1)).collect();
    let preds = model.predict(&items)?;
    let n = examples.len() as f64;
    let color = preds.iter().zip(&examples).filter(|(p, e)| p.0 == e.2).count() as f64 / n;
    let shape = preds.iter().zip(&examples).filter(|(p, e)| p.1 == e.3).count() as f64 / n;
    Ok((color, shape))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub seed: u64,
    pub num_layers: usize,
    pub exclusivity: f64,
    pub color_correct: usize,
    pub shape_correct: usize,
    pub foregrounds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCountMetrics {
    pub num_layers: usize,
    pub samples: usize,
    pub mask_exclusivity: f64,
    pub color_accuracy: f64,
    pub shape_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub loss_curve: Vec<LossRow>,
    pub mask_exclusivity: f64,
    /// Color accuracy of the classifier on generated foregrounds.
    pub prompt_alignment: f64,
    pub shape_accuracy: f64,
    pub per_layer_count: Vec<LayerCountMetrics>,
    pub per_sample: Vec<SampleMetrics>,
}

fn summarize(samples: &[&SampleMetrics]) -> (f64, f64, f64) {
    let n = samples.len().max(1) as f64;
    let excl = samples.iter().map(|s| s.exclusivity).sum::<f64>() / n;
    let fg: usize = samples.iter().map(|s| s.foregrounds).sum();
    let fg = fg.max(1) as f64;
    let color = samples.iter().map(|s| s.color_correct).sum::<usize>() as f64 / fg;
    let shape = samples.iter().map(|s| s.shape_correct).sum::<usize>() as f64 / fg;
    (excl, color, shape)
}

impl MetricsReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>, loss_curve: Vec<LossRow>) -> Self {
        let all: Vec<&SampleMetrics> = per_sample.iter().collect();
        let (excl, color, shape) = summarize(&all);
        let mut by: BTreeMap<usize, Vec<&SampleMetrics>> = BTreeMap::new();
        for s in &per_sample {
            by.entry(s.num_layers).or_default().push(s);
        }
        let per_layer_count = by
            .into_iter()
            .map(|(l, v)| {
                let (e, c, s) = summarize(&v);
                LayerCountMetrics {
                    num_layers: l,
                    samples: v.len(),
                    mask_exclusivity: e,
                    color_accuracy: c,
                    shape_accuracy: s,
                }
            })
            .collect();
        Self {
            loss_curve,
            mask_exclusivity: excl,
            prompt_alignment: color,
            shape_accuracy: shape,
            per_layer_count,
            per_sample,
        }
    }
}

/// Metrics of one generated layer set.
pub fn score_sample(
    classifier: &AttributeClassifier,
    layers: &LayerSet,
    soft_masks: &[LayerMask],
    seed: u64,
) -> Result<SampleMetrics> {
    let mut color_correct = 0;
    let mut shape_correct = 0;
    let mut foregrounds = 0;
    let mut items = Vec::new();
    let mut labels = Vec::new();
    for fg in &layers.foregrounds {
        if let Some((c, s)) = parse_layer_prompt(&fg.prompt) {
            foregrounds += 1;
            items.push((&fg.image, &fg.mask));
            labels.push((c.index(), s.index()));
        }
    }
    if !items.is_empty() {
        for (p, l) in classifier.predict(&items)?.into_iter().zip(labels) {
            color_correct += usize::from(p.0 == l.0);
            shape_correct += usize::from(p.1 == l.1);
        }
    }
    Ok(SampleMetrics {
        seed,
        num_layers: layers.num_layers(),
        exclusivity: mask_exclusivity(soft_masks)?,
        color_correct,
        shape_correct,
        foregrounds,
    })
}

/// Samples `n` layer sets from the prompts of `records` (cycled) with seeds
/// `gcfg.seed + i` and scores them.
pub fn evaluate(
    model: &LayerDiffModel,
    schedule: &NoiseSchedule,
    classifier: &AttributeClassifier,
    records: &[DatasetRecord],
    n: usize,
    gcfg: &GuidanceConfig,
) -> Result<MetricsReport> {
    if records.is_empty() || n == 0 {
        return Err(Error::Invalid("evaluation needs prompts and n >= 1".into()));
    }
    let mut per_sample = Vec::with_capacity(n);
    for i in 0..n {
        let r = &records[i % records.len()];
        let bundle = PromptBundle::new(r.global_prompt.clone(), r.layers.iter().map(|l| l.prompt.clone()).collect())?;
        let seed = gcfg.seed.wrapping_add(i as u64);
        let g = GuidanceConfig { seed, ..gcfg.clone() };
        let out = sample(model, schedule, &bundle, &g)?;
        per_sample.push(score_sample(classifier, &out.layers, &out.soft_masks, seed)?);
    }
    Ok(MetricsReport::from_samples(per_sample, Vec::new()))
}
