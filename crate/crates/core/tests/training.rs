use dyadsync::baselines::pearson;
use dyadsync::csmnet::{CsmConfig, CsmNet};
use dyadsync::pose::{Label, SyncClass};
use dyadsync::sttf::{HeadKind, ModelConfig, SttfModel};
use dyadsync::synth::{generate_dataset, generate_dyad_sequence, generate_sequences, SynthConfig};
use dyadsync::training::{argmax, evaluate_loss, fit, Example, Model, Target, TrainConfig};

fn tiny_tfn() -> ModelConfig {
    ModelConfig {
        frames: 81,
        joints: 17,
        joint_dim: 2,
        temporal_dim: 68,
        layers: 1,
        heads: 2,
        dropout: 0.0,
        head: HeadKind::Classify,
    }
}

fn csm_examples(net: &CsmNet, per_class: usize, seed: u64) -> Vec<Example<dyadsync::tensor::Tensor>> {
    let cfg = SynthConfig {
        seed,
        frames: 81,
        ..SynthConfig::default()
    };
    generate_sequences(&cfg, per_class)
        .unwrap()
        .iter()
        .map(|s| {
            let Some(Label::Class(c)) = s.label else { unreachable!() };
            Example {
                input: net.prepare(s).unwrap(),
                target: Target::Class(c.index()),
            }
        })
        .collect()
}

fn small_csm() -> CsmNet {
    CsmNet::new(
        CsmConfig {
            dropout: 0.0,
            ..CsmConfig::default()
        },
        4,
    )
    .unwrap()
}

#[test]
fn overfits_eight_samples() {
    let mut net = small_csm();
    let data: Vec<_> = csm_examples(&net, 3, 9).into_iter().take(8).collect();
    let cfg = TrainConfig {
        epochs: 300,
        batch_size: 8,
        lr0: 1e-2,
        decay: 1.0,
        val_fraction: 0.0,
        ..TrainConfig::default()
    };
    fit(&mut net, &data, &cfg).unwrap();
    let correct = data
        .iter()
        .filter(|e| Target::Class(argmax(&net.predict(&e.input).unwrap())) == e.target)
        .count();
    assert_eq!(correct, 8);
    assert!(evaluate_loss(&net, &data).unwrap() < 0.05);
}

#[test]
fn fit_is_deterministic() {
    let data = csm_examples(&small_csm(), 4, 1);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = CsmNet::new(CsmConfig::default(), 2).unwrap();
        let h = fit(&mut net, &data, &cfg).unwrap();
        (net.params, h.to_csv())
    };
    assert_eq!(run(), run());
}

#[test]
fn rejected_config_leaves_model_untouched() {
    let seqs = generate_sequences(
        &SynthConfig {
            frames: 81,
            ..SynthConfig::default()
        },
        2,
    )
    .unwrap();
    let data: Vec<_> = seqs
        .into_iter()
        .map(|s| {
            let Some(Label::Class(c)) = s.label else { unreachable!() };
            Example {
                input: s,
                target: Target::Class(c.index()),
            }
        })
        .collect();
    let mut model = SttfModel::new(tiny_tfn(), 0).unwrap();
    let before = model.params.clone();
    let loss = evaluate_loss(&model, &data).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 3,
        lr0: 0.0,
        ..TrainConfig::default()
    };
    assert!(fit(&mut model, &data, &cfg).is_err());
    assert_eq!(model.params, before);
    assert_eq!(evaluate_loss(&model, &data).unwrap(), loss);
}

#[test]
fn synthetic_dataset_is_reproducible() {
    let cfg = SynthConfig {
        seed: 3,
        ..SynthConfig::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_dataset(&cfg, 10, a.path()).unwrap();
    generate_dataset(&cfg, 10, b.path()).unwrap();
    assert_eq!(ma.len(), 30);
    for e in &ma {
        let read = |d: &std::path::Path| std::fs::read(d.join(&e.path)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }
    assert_eq!(
        std::fs::read(a.path().join("manifest.json")).unwrap(),
        std::fs::read(b.path().join("manifest.json")).unwrap()
    );
}

#[test]
fn unsync_partners_are_uncorrelated() {
    let mut total = 0.0;
    for seed in 0..100 {
        let cfg = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        let s = generate_dyad_sequence(&cfg, SyncClass::Unsync, 0).unwrap();
        let mut r = 0.0;
        for k in 0..s.joints() {
            for c in 0..2 {
                r += pearson(&s.trajectory(0, k, c), &s.trajectory(1, k, c));
            }
        }
        total += r / (2 * s.joints()) as f64;
    }
    assert!((total / 100.0).abs() < 0.1, "mean correlation {}", total / 100.0);
}
