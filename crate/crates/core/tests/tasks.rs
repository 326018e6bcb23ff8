use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redlab::model::LnStyle;
use redlab::tasks::{evaluate, evaluate_with, generate, Example, Split, SyntheticTask, TaskKind};
use redlab::{PeftModel, PeftSpec, TransformerConfig, TransformerModel};

fn task(kind: TaskKind, vocab: usize, classes: usize) -> SyntheticTask {
    SyntheticTask {
        name: kind,
        vocab_size: vocab,
        seq_len: 16,
        n_classes: classes,
        train_size: 4000,
        valid_size: 1000,
        test_size: 1000,
        seed: None,
    }
}

fn tasks() -> Vec<SyntheticTask> {
    vec![
        SyntheticTask::parity(16, 4000, 1000, 1000),
        task(TaskKind::Majority, 4, 4),
        task(TaskKind::CopyFirst, 4, 2),
    ]
}

#[test]
fn labels_follow_the_rules() {
    let data = generate(&SyntheticTask::parity(16, 200, 50, 50), 1).unwrap();
    for e in data.train.examples.iter().chain(&data.valid.examples) {
        assert_eq!(e.label, e.tokens.iter().filter(|&&t| t == 1).count() % 2);
    }
    let t = task(TaskKind::CopyFirst, 4, 2);
    let data = generate(&t, 1).unwrap();
    assert!(data
        .test
        .examples
        .iter()
        .all(|e| e.label == e.tokens[0] / 2));
}

#[test]
fn splits_are_balanced_within_five_percent() {
    for t in tasks() {
        let data = generate(&t, 5).unwrap();
        for split in [&data.train, &data.valid, &data.test] {
            let h = split.label_histogram(t.n_classes);
            let share = 1.0 / t.n_classes as f64;
            for &c in &h {
                let f = c as f64 / split.len() as f64;
                assert!((f - share).abs() <= 0.05 * share, "{:?}: {h:?}", t.name);
            }
        }
    }
}

#[test]
fn splits_are_disjoint_and_duplicate_free() {
    for t in tasks() {
        let data = generate(&t, 2).unwrap();
        let mut seen = HashSet::new();
        for e in data
            .train
            .examples
            .iter()
            .chain(&data.valid.examples)
            .chain(&data.test.examples)
        {
            assert!(
                seen.insert(e.tokens.clone()),
                "{:?} repeats {:?}",
                t.name,
                e.tokens
            );
        }
    }
}

#[test]
fn generation_is_a_pure_function_of_config_and_seed() {
    let t = SyntheticTask::parity(16, 300, 100, 100);
    assert_eq!(generate(&t, 4).unwrap(), generate(&t, 4).unwrap());
    assert_ne!(
        generate(&t, 4).unwrap().train,
        generate(&t, 5).unwrap().train
    );
    let pinned = SyntheticTask {
        seed: Some(4),
        ..t.clone()
    };
    assert_eq!(generate(&pinned, 99).unwrap(), generate(&t, 4).unwrap());
}

#[test]
fn matching_constant_predictor_scores_one() {
    let split = Split {
        examples: (0..10)
            .map(|i| Example {
                tokens: vec![i % 3, 1],
                label: 1,
            })
            .collect(),
    };
    let acc = evaluate_with(|b| Ok(vec![1; b.batch]), &split, 3).unwrap();
    assert_eq!(acc, 1.0);
}

/// A coin-flip predictor on 10,000 examples lies within the 3σ binomial band.
#[test]
fn random_predictor_scores_chance() {
    let data = generate(&SyntheticTask::parity(20, 10_000, 10, 10), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let acc = evaluate_with(
        |b| Ok((0..b.batch).map(|_| rng.gen_range(0..2)).collect()),
        &data.train,
        512,
    )
    .unwrap();
    let sigma = (0.25f64 / 10_000.0).sqrt();
    assert!((acc - 0.5).abs() <= 3.0 * sigma, "{acc}");
}

#[test]
fn frozen_model_is_at_chance_on_parity() {
    let cfg = TransformerConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        d_ff: None,
        vocab_size: 4,
        max_seq_len: 16,
        n_classes: 2,
        ln_style: LnStyle::PostLn,
        ln_eps: 1e-5,
    };
    let model = PeftModel::attach(
        TransformerModel::<f32>::init(cfg, 0).unwrap(),
        &PeftSpec::red(),
        0,
    )
    .unwrap();
    let data = generate(&SyntheticTask::parity(16, 10, 1000, 10), 0).unwrap();
    let acc = evaluate(&model, &data.valid, 256).unwrap();
    let sigma = (0.25f64 / 1000.0).sqrt();
    assert!((acc - 0.5).abs() <= 3.0 * sigma, "{acc}");
    assert_eq!(acc, evaluate(&model, &data.valid, 7).unwrap());
}

#[test]
fn csv_dump_has_header_and_one_row_per_example() {
    let data = generate(&SyntheticTask::parity(4, 5, 3, 3), 0).unwrap();
    let csv = data.train.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "label,t0,t1,t2,t3");
    assert_eq!(lines.len(), 6);
    let e = &data.train.examples[0];
    let expected: Vec<String> = std::iter::once(e.label)
        .chain(e.tokens.iter().copied())
        .map(|v| v.to_string())
        .collect();
    assert_eq!(lines[1], expected.join(","));
}
