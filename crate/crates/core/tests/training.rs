use candle_core::DType;
use layerdiff_core::denoiser::{DenoiserConfig, LayerDiffModel};
use layerdiff_core::harness::{train, train_classifier, ClassifierConfig, TrainConfig};
use layerdiff_core::sampler::{sample, GuidanceConfig};
use layerdiff_core::synthdata::{generate_dataset, write_dataset, DatasetConfig, LayerMix};
use layerdiff_core::textcond::PromptBundle;

fn tiny_run(dir: &std::path::Path, steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        warmup_steps: 10,
        batch_size: 2,
        grad_accum: 1,
        total_steps: steps,
        checkpoint_every: 0,
        seed: 5,
        dataset: dir.join("data"),
        out_dir: dir.join("run"),
        denoiser: DenoiserConfig::tiny(8, 8, 2),
        ..Default::default()
    }
}

#[test]
fn hundred_steps_reproduce_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(dir.path(), 100);
    let data = generate_dataset(&DatasetConfig {
        num: 12,
        resolution: 8,
        layer_mix: LayerMix([0.6, 0.3, 0.1]),
        seed: 4,
    })
    .unwrap();
    write_dataset(&data, &cfg.dataset).unwrap();
    let a = train(&cfg).unwrap();
    let b = train(&cfg).unwrap();
    assert_eq!(a.losses.len(), 100);
    assert!(a.losses.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
    let a_loss: Vec<u64> = a.losses.iter().map(|r| r.loss.to_bits()).collect();
    let b_loss: Vec<u64> = b.losses.iter().map(|r| r.loss.to_bits()).collect();
    assert_eq!(a_loss, b_loss);
    assert_eq!(a.losses[50].lr, 1e-3);
    assert!((a.losses[5].lr - 5e-4).abs() < 1e-15);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = LayerDiffModel::init(DenoiserConfig::tiny(8, 8, 2), Default::default(), 3, DType::F32).unwrap();
    model.perturb_all(0.02, 4).unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = LayerDiffModel::load(&path, DType::F32).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.params().len(), model.params().len());
    for (name, var) in model.params().iter() {
        let a: Vec<f32> = var.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = back.params().get(name).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let (a, b): (Vec<u32>, Vec<u32>) = (a.iter().map(|v| v.to_bits()).collect(), b.iter().map(|v| v.to_bits()).collect());
        assert_eq!(a, b, "{name}");
    }
    let bundle = PromptBundle::new("a red circle", vec!["the background".into(), "a red circle".into()]).unwrap();
    let g = GuidanceConfig {
        steps: 5,
        seed: 9,
        ..Default::default()
    };
    let s = model.schedule().unwrap();
    let x = sample(&model, &s, &bundle, &g).unwrap();
    let y = sample(&back, &back.schedule().unwrap(), &bundle, &g).unwrap();
    assert_eq!(x.layers, y.layers);
    assert_eq!(x.soft_masks, y.soft_masks);
}

#[test]
fn classifier_is_accurate_on_ground_truth() {
    let make = |num, seed| {
        generate_dataset(&DatasetConfig {
            num,
            resolution: 32,
            layer_mix: LayerMix::default(),
            seed,
        })
        .unwrap()
    };
    let train_set = make(1500, 21);
    let held_out = make(300, 22);
    let (_, (color, shape)) = train_classifier(&train_set, &held_out, ClassifierConfig::default()).unwrap();
    assert!(color >= 0.95, "color accuracy {color}");
    assert!(shape >= 0.95, "shape accuracy {shape}");
}

#[test]
fn guided_sampling_counts_forward_passes() {
    let model = LayerDiffModel::init(DenoiserConfig::tiny(8, 8, 2), Default::default(), 6, DType::F32).unwrap();
    let s = model.schedule().unwrap();
    let bundle = PromptBundle::new(
        "a red circle and a blue square",
        vec!["the background".into(), "a red circle".into(), "a blue square".into()],
    )
    .unwrap();
    for (cfg, smg, passes) in [(3.0, 3.0, 3), (1.0, 3.0, 2), (3.0, 0.0, 2), (1.0, 0.0, 1)] {
        for invert in [false, true] {
            let g = GuidanceConfig {
                steps: 4,
                cfg_scale: cfg,
                smg_scale: smg,
                invert_smg_mask: invert,
                ..Default::default()
            };
            let out = sample(&model, &s, &bundle, &g).unwrap();
            assert_eq!(out.steps_run, 4);
            assert_eq!(out.trace.forward_passes(), 4 * passes);
            out.layers.validate().unwrap();
        }
    }
}
