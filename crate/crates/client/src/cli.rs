//! `layerdiff` command line. Every subcommand builds a request from an
//! optional JSON config file, applies the flags on top and sends it to the
//! server. Exit codes: 0 success, 1 usage or validation error, 2 runtime
//! failure.

use std::ffi::OsString;
use std::path::Path;

use clap::{Args, CommandFactory, Parser, Subcommand};
use layerdiff_api as api;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::{Client, ClientError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "layerdiff", version, about = "Multi-layer composable image generation")]
pub struct Cli {
    /// Server address (host:port or URL).
    #[arg(long, global = true, env = "LAYERDIFF_SERVER", default_value = api::DEFAULT_ADDR)]
    pub server: String,

    /// JSON file with the request (for `train`, the training config); flags
    /// override its values.
    #[arg(long, global = true)]
    pub config: Option<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default)]
pub struct GuidanceArgs {
    /// DDIM steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Classifier-free guidance scale.
    #[arg(long)]
    pub cfg: Option<f64>,
    /// Self-mask guidance scale.
    #[arg(long)]
    pub smg: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub blur_kernel: Option<usize>,
    #[arg(long)]
    pub blur_sigma: Option<f64>,
    /// Degrade inside the predicted masks instead of outside.
    #[arg(long)]
    pub invert_smg_mask: bool,
}

#[derive(Args, Debug)]
pub struct SourceArgs {
    /// Dataset-format directory holding the layer set to edit.
    #[arg(long)]
    pub source: Option<String>,
    /// Record id inside the source (first record when omitted).
    #[arg(long)]
    pub record: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check that the server is up.
    Health,
    /// Generate a synthetic dataset.
    MakeData {
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        num: Option<usize>,
        /// Probabilities of 2, 3 and 4 layers, comma separated.
        #[arg(long)]
        layer_mix: Option<String>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        out: Option<String>,
        /// Optimizer steps.
        #[arg(long)]
        total_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the attribute classifier used by `eval`.
    TrainClassifier {
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        holdout: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a layer set from prompts.
    Sample {
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        global: Option<String>,
        /// Layer prompts, background first.
        #[arg(long, num_args = 1..)]
        layers: Vec<String>,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long)]
        out: Option<String>,
        /// Write per-step PNG grids under OUT/trace.
        #[arg(long)]
        trace: bool,
    },
    /// Regenerate selected layers of an existing layer set.
    Inpaint {
        #[arg(long)]
        ckpt: Option<String>,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long = "target-layer", num_args = 1..)]
        target_layers: Vec<usize>,
        /// Replacement prompt per target layer.
        #[arg(long = "prompt", num_args = 1..)]
        prompts: Vec<String>,
        #[arg(long)]
        global: Option<String>,
        /// Steps during which the other layers' masks stay fixed.
        #[arg(long)]
        mask_freeze: Option<usize>,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long)]
        out: Option<String>,
    },
    /// Restyle selected layers.
    Style {
        #[arg(long)]
        ckpt: Option<String>,
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long = "target-layer", num_args = 1..)]
        target_layers: Vec<usize>,
        #[arg(long)]
        style: Option<String>,
        #[arg(long)]
        strength: Option<f64>,
        #[arg(long)]
        global: Option<String>,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long)]
        out: Option<String>,
    },
    /// Generate with coarse foreground masks as starting points.
    Priors {
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        global: Option<String>,
        #[arg(long, num_args = 1..)]
        layers: Vec<String>,
        /// Foreground prior PNG per foreground layer.
        #[arg(long = "mask-prior", num_args = 1..)]
        mask_priors: Vec<String>,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long)]
        out: Option<String>,
    },
    /// Add foregrounds one at a time to a two-layer set.
    Iterate {
        #[arg(long)]
        ckpt: Option<String>,
        #[command(flatten)]
        source: SourceArgs,
        /// Prompt per added foreground.
        #[arg(long = "prompt", num_args = 1..)]
        prompts: Vec<String>,
        /// Prior PNG per added foreground; `-` for none.
        #[arg(long = "mask-prior", num_args = 1..)]
        mask_priors: Vec<String>,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long)]
        out: Option<String>,
        /// Allow more than four layers.
        #[arg(long)]
        lenient: bool,
    },
    /// Sample from dataset prompts and report metrics.
    Eval {
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        classifier: Option<String>,
        #[arg(long)]
        loss_log: Option<String>,
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
}

/// Errors surfaced by the CLI, with their exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Missing or malformed input; `usage` names the subcommand to print.
    Usage { message: String, usage: Option<String> },
    Client(ClientError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } => EXIT_VALIDATION,
            CliError::Client(e) if e.is_validation() => EXIT_VALIDATION,
            CliError::Client(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        CliError::Client(e)
    }
}

fn usage(message: impl Into<String>, sub: &str) -> CliError {
    CliError::Usage {
        message: message.into(),
        usage: Some(sub.to_string()),
    }
}

fn absolute(p: &str) -> String {
    std::path::absolute(Path::new(p))
        .map(|a| a.display().to_string())
        .unwrap_or_else(|_| p.to_string())
}

fn abs_opt(p: Option<String>) -> Option<String> {
    p.map(|s| absolute(&s))
}

fn load_config(path: Option<&str>) -> Result<Value, CliError> {
    let Some(path) = path else {
        return Ok(Value::Object(Default::default()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage {
        message: format!("cannot read config {path}: {e}"),
        usage: None,
    })?;
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage {
        message: format!("config {path} is not valid JSON: {e}"),
        usage: None,
    })?;
    if !v.is_object() {
        return Err(CliError::Usage {
            message: format!("config {path} must hold a JSON object"),
            usage: None,
        });
    }
    Ok(v)
}

fn from_config<T: DeserializeOwned>(config: &Value, sub: &str) -> Result<T, CliError> {
    serde_json::from_value(config.clone()).map_err(|e| usage(format!("config does not fit `{sub}`: {e}"), sub))
}

fn apply_guidance(g: &mut api::Guidance, a: GuidanceArgs) {
    g.steps = a.steps.or(g.steps);
    g.cfg_scale = a.cfg.or(g.cfg_scale);
    g.smg_scale = a.smg.or(g.smg_scale);
    g.seed = a.seed.or(g.seed);
    g.blur_kernel = a.blur_kernel.or(g.blur_kernel);
    g.blur_sigma = a.blur_sigma.or(g.blur_sigma);
    if a.invert_smg_mask {
        g.invert_smg_mask = Some(true);
    }
}

fn set_if<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_vec<T>(slot: &mut Vec<T>, v: Vec<T>) {
    if !v.is_empty() {
        *slot = v;
    }
}

fn require(value: &str, flag: &str, sub: &str) -> Result<(), CliError> {
    if value.trim().is_empty() {
        return Err(usage(format!("missing required --{flag}"), sub));
    }
    Ok(())
}

fn apply_source(src: &mut api::SourceRef, a: SourceArgs, sub: &str) -> Result<(), CliError> {
    set_if(&mut src.dir, a.source);
    if a.record.is_some() {
        src.record = a.record;
    }
    require(&src.dir, "source", sub)?;
    src.dir = absolute(&src.dir);
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("response types serialize")
}

/// Runs a parsed command and returns the server's JSON response.
pub async fn execute(cli: Cli) -> Result<Value, CliError> {
    let client = Client::new(&cli.server);
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Health => Ok(to_json(&client.health().await?)),
        Command::MakeData { out, num, layer_mix, resolution, seed } => {
            let sub = "make-data";
            let mut req: api::MakeDataRequest = from_config(&config, sub)?;
            set_if(&mut req.out, out);
            require(&req.out, "out", sub)?;
            req.out = absolute(&req.out);
            req.num = num.or(req.num);
            req.resolution = resolution.or(req.resolution);
            req.seed = seed.or(req.seed);
            if let Some(mix) = layer_mix {
                let parts: Vec<f64> = mix
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| usage(format!("--layer-mix {mix:?}: {e}"), sub))?;
                let arr: [f64; 3] = parts
                    .try_into()
                    .map_err(|_| usage(format!("--layer-mix {mix:?} needs three values"), sub))?;
                req.layer_mix = Some(arr);
            }
            Ok(to_json(&client.make_data(&req).await?))
        }
        Command::Train { dataset, out, total_steps, seed } => {
            let mut cfg = config;
            let obj = cfg.as_object_mut().expect("checked object");
            if let Some(d) = dataset {
                obj.insert("dataset".into(), Value::String(d));
            }
            if let Some(o) = out {
                obj.insert("out_dir".into(), Value::String(o));
            }
            if let Some(n) = total_steps {
                obj.insert("total_steps".into(), n.into());
            }
            if let Some(s) = seed {
                obj.insert("seed".into(), s.into());
            }
            for key in ["dataset", "out_dir"] {
                match obj.get(key).and_then(Value::as_str) {
                    Some(p) => {
                        let a = absolute(p);
                        obj.insert(key.into(), Value::String(a));
                    }
                    None => {
                        let flag = if key == "dataset" { "dataset" } else { "out" };
                        return Err(usage(format!("missing {key} (set it in --config or pass --{flag})"), "train"));
                    }
                }
            }
            Ok(to_json(&client.train(&api::TrainRequest { config: cfg }).await?))
        }
        Command::TrainClassifier { data, out, epochs, holdout, seed } => {
            let sub = "train-classifier";
            let mut req: api::ClassifierRequest = from_config(&config, sub)?;
            set_if(&mut req.data, data);
            set_if(&mut req.out, out);
            require(&req.data, "data", sub)?;
            require(&req.out, "out", sub)?;
            req.data = absolute(&req.data);
            req.out = absolute(&req.out);
            req.epochs = epochs.or(req.epochs);
            req.holdout = holdout.or(req.holdout);
            req.seed = seed.or(req.seed);
            Ok(to_json(&client.classifier(&req).await?))
        }
        Command::Sample { ckpt, global, layers, guidance, out, trace } => {
            let sub = "sample";
            let mut req: api::SampleRequest = from_config(&config, sub)?;
            set_if(&mut req.ckpt, ckpt);
            set_if(&mut req.global, global);
            set_vec(&mut req.layers, layers);
            set_if(&mut req.out, out);
            req.trace |= trace;
            apply_guidance(&mut req.guidance, guidance);
            require(&req.ckpt, "ckpt", sub)?;
            require(&req.out, "out", sub)?;
            if req.layers.len() < 2 {
                return Err(usage("--layers needs a background prompt and at least one foreground prompt", sub));
            }
            req.ckpt = absolute(&req.ckpt);
            req.out = absolute(&req.out);
            Ok(to_json(&client.sample(&req).await?))
        }
        Command::Inpaint { ckpt, source, target_layers, prompts, global, mask_freeze, guidance, out } => {
            let sub = "inpaint";
            let mut req: api::InpaintRequest = from_config(&config, sub)?;
            set_if(&mut req.ckpt, ckpt);
            apply_source(&mut req.source, source, sub)?;
            set_vec(&mut req.targets, target_layers);
            set_vec(&mut req.prompts, prompts);
            req.global = global.or(req.global);
            req.mask_freeze_steps = mask_freeze.or(req.mask_freeze_steps);
            set_if(&mut req.out, out);
            apply_guidance(&mut req.guidance, guidance);
            require(&req.ckpt, "ckpt", sub)?;
            require(&req.out, "out", sub)?;
            if req.targets.is_empty() {
                return Err(usage("missing --target-layer", sub));
            }
            req.ckpt = absolute(&req.ckpt);
            req.out = absolute(&req.out);
            Ok(to_json(&client.inpaint(&req).await?))
        }
        Command::Style { ckpt, source, target_layers, style, strength, global, guidance, out } => {
            let sub = "style";
            let mut req: api::StyleRequest = from_config(&config, sub)?;
            set_if(&mut req.ckpt, ckpt);
            apply_source(&mut req.source, source, sub)?;
            set_vec(&mut req.targets, target_layers);
            set_if(&mut req.style, style);
            req.strength = strength.or(req.strength);
            req.global = global.or(req.global);
            set_if(&mut req.out, out);
            apply_guidance(&mut req.guidance, guidance);
            require(&req.ckpt, "ckpt", sub)?;
            require(&req.out, "out", sub)?;
            require(&req.style, "style", sub)?;
            if req.targets.is_empty() {
                return Err(usage("missing --target-layer", sub));
            }
            req.ckpt = absolute(&req.ckpt);
            req.out = absolute(&req.out);
            Ok(to_json(&client.style(&req).await?))
        }
        Command::Priors { ckpt, global, layers, mask_priors, guidance, out } => {
            let sub = "priors";
            let mut req: api::PriorsRequest = from_config(&config, sub)?;
            set_if(&mut req.ckpt, ckpt);
            set_if(&mut req.global, global);
            set_vec(&mut req.layers, layers);
            set_vec(&mut req.priors, mask_priors);
            set_if(&mut req.out, out);
            apply_guidance(&mut req.guidance, guidance);
            require(&req.ckpt, "ckpt", sub)?;
            require(&req.out, "out", sub)?;
            if req.priors.is_empty() {
                return Err(usage("missing --mask-prior", sub));
            }
            req.ckpt = absolute(&req.ckpt);
            req.out = absolute(&req.out);
            req.priors = req.priors.iter().map(|p| absolute(p)).collect();
            Ok(to_json(&client.priors(&req).await?))
        }
        Command::Iterate { ckpt, source, prompts, mask_priors, guidance, out, lenient } => {
            let sub = "iterate";
            let mut req: api::IterateRequest = from_config(&config, sub)?;
            set_if(&mut req.ckpt, ckpt);
            apply_source(&mut req.source, source, sub)?;
            if !prompts.is_empty() {
                if !mask_priors.is_empty() && mask_priors.len() != prompts.len() {
                    return Err(usage("give one --mask-prior per --prompt (use - for none)", sub));
                }
                req.additions = prompts
                    .into_iter()
                    .enumerate()
                    .map(|(i, prompt)| api::AdditionSpec {
                        prompt,
                        prior: mask_priors.get(i).filter(|p| p.as_str() != "-").cloned(),
                        global: None,
                    })
                    .collect();
            }
            for a in &mut req.additions {
                a.prior = abs_opt(a.prior.take());
            }
            set_if(&mut req.out, out);
            req.lenient |= lenient;
            apply_guidance(&mut req.guidance, guidance);
            require(&req.ckpt, "ckpt", sub)?;
            require(&req.out, "out", sub)?;
            req.ckpt = absolute(&req.ckpt);
            req.out = absolute(&req.out);
            Ok(to_json(&client.iterate(&req).await?))
        }
        Command::Eval { ckpt, data, n, classifier, loss_log, guidance } => {
            let sub = "eval";
            let mut req: api::EvalRequest = from_config(&config, sub)?;
            set_if(&mut req.ckpt, ckpt);
            set_if(&mut req.data, data);
            req.n = n.or(req.n);
            req.classifier = classifier.or(req.classifier);
            req.loss_log = loss_log.or(req.loss_log);
            apply_guidance(&mut req.guidance, guidance);
            require(&req.ckpt, "ckpt", sub)?;
            require(&req.data, "data", sub)?;
            req.ckpt = absolute(&req.ckpt);
            req.data = absolute(&req.data);
            req.classifier = abs_opt(req.classifier);
            req.loss_log = abs_opt(req.loss_log);
            Ok(to_json(&client.eval(&req).await?))
        }
    }
}

fn print_usage(sub: &str) {
    let mut cmd = Cli::command();
    if let Some(s) = cmd.find_subcommand_mut(sub) {
        eprintln!("{}", s.render_usage());
    } else {
        eprintln!("{}", cmd.render_usage());
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let rt = match tokio::runtime::Builder::new_current_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return EXIT_RUNTIME;
        }
    };
    match rt.block_on(execute(cli)) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
            EXIT_OK
        }
        Err(e) => {
            let code = e.exit_code();
            match e {
                CliError::Usage { message, usage } => {
                    eprintln!("error: {message}");
                    if let Some(sub) = usage {
                        print_usage(&sub);
                    }
                }
                CliError::Client(c) => eprintln!("error: {c}"),
            }
            code
        }
    }
}
