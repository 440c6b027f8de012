//! JSON request and response bodies of the layerdiff HTTP service.
//!
//! Paths are interpreted by the server; clients send absolute paths.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const DEFAULT_ADDR: &str = "127.0.0.1:7878";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Validation,
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: ErrorKind,
    pub error: String,
}

/// Sampler settings; unset fields take the server defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Guidance {
    pub steps: Option<usize>,
    pub cfg_scale: Option<f64>,
    pub smg_scale: Option<f64>,
    pub seed: Option<u64>,
    pub blur_kernel: Option<usize>,
    pub blur_sigma: Option<f64>,
    pub invert_smg_mask: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MakeDataRequest {
    pub out: String,
    pub num: Option<usize>,
    pub resolution: Option<usize>,
    pub layer_mix: Option<[f64; 3]>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MakeDataResponse {
    pub manifest: String,
    pub records: usize,
    pub layer_counts: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    /// Training configuration JSON; missing keys take defaults.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub checkpoint: String,
    pub loss_log: String,
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierRequest {
    pub data: String,
    pub out: String,
    /// Fraction of records held out for the reported accuracy.
    pub holdout: Option<f64>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierResponse {
    pub checkpoint: String,
    pub color_accuracy: f64,
    pub shape_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleRequest {
    pub ckpt: String,
    pub global: String,
    pub layers: Vec<String>,
    pub guidance: Guidance,
    pub out: String,
    /// Also write per-step PNG grids under `out/trace`.
    pub trace: bool,
}

/// Where an edit's source layer set lives: a dataset directory and a record
/// id (the first record when unset).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceRef {
    pub dir: String,
    pub record: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InpaintRequest {
    pub ckpt: String,
    pub source: SourceRef,
    pub targets: Vec<usize>,
    pub prompts: Vec<String>,
    pub global: Option<String>,
    pub mask_freeze_steps: Option<usize>,
    pub guidance: Guidance,
    pub out: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleRequest {
    pub ckpt: String,
    pub source: SourceRef,
    pub targets: Vec<usize>,
    pub style: String,
    pub strength: Option<f64>,
    pub global: Option<String>,
    pub guidance: Guidance,
    pub out: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorsRequest {
    pub ckpt: String,
    pub global: String,
    pub layers: Vec<String>,
    /// Foreground prior PNGs (grayscale, 0 or 255), one per foreground layer.
    pub priors: Vec<String>,
    pub guidance: Guidance,
    pub out: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdditionSpec {
    pub prompt: String,
    pub prior: Option<String>,
    pub global: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterateRequest {
    pub ckpt: String,
    pub source: SourceRef,
    pub additions: Vec<AdditionSpec>,
    pub guidance: Guidance,
    pub out: String,
    /// Allow more than four layers.
    pub lenient: bool,
}

/// Summary of a generated or edited layer set written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSetResponse {
    pub out_dir: String,
    pub manifest: String,
    pub global_prompt: String,
    pub prompts: Vec<String>,
    pub mask_areas: Vec<f32>,
    pub mask_exclusivity: Option<f64>,
    pub steps_run: Option<usize>,
    pub forward_passes: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRequest {
    pub ckpt: String,
    pub data: String,
    pub n: Option<usize>,
    /// Defaults to `classifier.ckpt` beside the model checkpoint.
    pub classifier: Option<String>,
    /// Loss log to include in the report.
    pub loss_log: Option<String>,
    pub guidance: Guidance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResponse {
    /// The full metrics report.
    pub report: serde_json::Value,
    pub mask_exclusivity: f64,
    pub prompt_alignment: f64,
    pub shape_accuracy: f64,
    pub samples: usize,
}
