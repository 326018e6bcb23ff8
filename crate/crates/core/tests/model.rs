use redlab::model::LnStyle;
use redlab::{Error, NoHooks, TokenBatch, TransformerConfig, TransformerModel};

fn config() -> TransformerConfig {
    TransformerConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: Some(32),
        vocab_size: 16,
        max_seq_len: 6,
        n_classes: 3,
        ln_style: LnStyle::PostLn,
        ln_eps: 1e-5,
    }
}

fn rows() -> Vec<Vec<usize>> {
    vec![
        vec![1, 2, 3, 4, 5, 6],
        vec![0, 0, 15, 7, 7, 1],
        vec![9, 8, 7, 6, 5, 4],
    ]
}

#[test]
fn same_seed_gives_bitwise_identical_parameters() {
    let a = TransformerModel::<f32>::init(config(), 7).unwrap();
    let b = TransformerModel::<f32>::init(config(), 7).unwrap();
    for (p, q) in a.params.iter().zip(b.params.iter()) {
        assert_eq!(p.name, q.name);
        let (x, y): (Vec<u32>, Vec<u32>) = (
            p.value.data().iter().map(|v| v.to_bits()).collect(),
            q.value.data().iter().map(|v| v.to_bits()).collect(),
        );
        assert_eq!(x, y, "{}", p.name);
    }
}

#[test]
fn different_seeds_differ() {
    let a = TransformerModel::<f32>::init(config(), 1).unwrap();
    let b = TransformerModel::<f32>::init(config(), 2).unwrap();
    assert!(a
        .params
        .iter()
        .zip(b.params.iter())
        .any(|(p, q)| p.value != q.value));
}

#[test]
fn parameter_count_matches_closed_form() {
    let (l, d, f, v, s, c) = (2, 8, 32, 16, 6, 3);
    let attention = 4 * (d * d + d);
    let norms = 2 * 2 * d;
    let ffn = d * f + f + f * d + d;
    let expected = v * d + s * d + l * (attention + norms + ffn) + d * c + c;
    let model = TransformerModel::<f64>::init(config(), 0).unwrap();
    assert_eq!(model.param_count(), expected);
    assert_eq!(model.param_count(), 1_947);
}

#[test]
fn dotted_names_and_shapes_are_stable() {
    let model = TransformerModel::<f64>::init(config(), 0).unwrap();
    let shape = |n: &str| model.params.get(n).unwrap().value.shape().to_vec();
    assert_eq!(shape("embed.token.weight"), vec![16, 8]);
    assert_eq!(shape("embed.position.weight"), vec![6, 8]);
    assert_eq!(shape("block.1.attn.w_q.weight"), vec![8, 8]);
    assert_eq!(shape("block.1.ffn.w_in.weight"), vec![8, 32]);
    assert_eq!(shape("block.1.ffn.w_in.bias"), vec![32]);
    assert_eq!(shape("block.0.ffn.w_out.weight"), vec![32, 8]);
    assert_eq!(shape("block.0.ln2.weight"), vec![8]);
    assert_eq!(shape("head.weight"), vec![8, 3]);
    assert!(model.params.get("block.2.ln1.bias").is_none());
}

#[test]
fn init_is_xavier_uniform_with_zero_biases_and_unit_gains() {
    let model = TransformerModel::<f64>::init(config(), 3).unwrap();
    for p in model.params.iter() {
        let data = p.value.data();
        if p.name.ends_with("ln1.weight") || p.name.ends_with("ln2.weight") {
            assert!(data.iter().all(|&v| v == 1.0), "{}", p.name);
        } else if p.name.ends_with(".bias") {
            assert!(data.iter().all(|&v| v == 0.0), "{}", p.name);
        } else {
            let s = p.value.shape();
            let bound = (6.0 / (s[0] + s[1]) as f64).sqrt();
            assert!(data.iter().all(|v| v.abs() <= bound), "{}", p.name);
            assert!(data.iter().any(|&v| v != 0.0), "{}", p.name);
        }
    }
}

#[test]
fn identical_rows_give_identical_logits() {
    let model = TransformerModel::<f64>::init(config(), 0).unwrap();
    let row = vec![3, 1, 4, 1, 5, 9];
    let batch = TokenBatch::from_rows(&[row.clone(), row.clone(), row]).unwrap();
    let logits = model.logits(&batch, &NoHooks).unwrap();
    let d = logits.data();
    assert_eq!(&d[0..3], &d[3..6]);
    assert_eq!(&d[0..3], &d[6..9]);
}

#[test]
fn permuting_the_batch_permutes_logits() {
    let model = TransformerModel::<f32>::init(config(), 5).unwrap();
    let r = rows();
    let fwd = model
        .logits(&TokenBatch::from_rows(&r).unwrap(), &NoHooks)
        .unwrap();
    let perm = [2, 0, 1];
    let permuted: Vec<Vec<usize>> = perm.iter().map(|&i| r[i].clone()).collect();
    let bwd = model
        .logits(&TokenBatch::from_rows(&permuted).unwrap(), &NoHooks)
        .unwrap();
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(&bwd.data()[k * 3..k * 3 + 3], &fwd.data()[i * 3..i * 3 + 3]);
    }
}

#[test]
fn forward_is_deterministic() {
    let model = TransformerModel::<f32>::init(config(), 5).unwrap();
    let batch = TokenBatch::from_rows(&rows()).unwrap();
    let a = model.logits(&batch, &NoHooks).unwrap();
    let b = model.logits(&batch, &NoHooks).unwrap();
    assert_eq!(a, b);
}

#[test]
fn token_out_of_vocabulary_is_rejected() {
    let model = TransformerModel::<f32>::init(config(), 0).unwrap();
    let batch = TokenBatch::from_rows(&[vec![1, 2, 16, 0, 0, 0]]).unwrap();
    assert!(matches!(
        model.logits(&batch, &NoHooks),
        Err(Error::TokenOutOfRange {
            token: 16,
            vocab: 16
        })
    ));
}

#[test]
fn sequence_longer_than_positions_is_rejected() {
    let model = TransformerModel::<f32>::init(config(), 0).unwrap();
    let batch = TokenBatch::from_rows(&[vec![1; 7]]).unwrap();
    assert!(matches!(
        model.logits(&batch, &NoHooks),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn masked_positions_do_not_influence_logits() {
    let model = TransformerModel::<f64>::init(config(), 2).unwrap();
    let mask = vec![true, true, true, true, false, false];
    let a = TokenBatch::new(vec![1, 2, 3, 4, 0, 0], 1, 6)
        .unwrap()
        .with_mask(mask.clone())
        .unwrap();
    let b = TokenBatch::new(vec![1, 2, 3, 4, 11, 9], 1, 6)
        .unwrap()
        .with_mask(mask)
        .unwrap();
    assert_eq!(
        model.logits(&a, &NoHooks).unwrap(),
        model.logits(&b, &NoHooks).unwrap()
    );
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = config();
    c.n_heads = 3;
    assert!(matches!(
        TransformerModel::<f32>::init(c, 0),
        Err(Error::Config(_))
    ));
    let mut c = config();
    c.d_model = 0;
    assert!(TransformerModel::<f32>::init(c, 0).is_err());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let json = r#"{"n_layers":1,"d_model":8,"n_heads":2,"vocab_size":4,"max_seq_len":4,"n_classes":2,"dropout":0.1}"#;
    assert!(serde_json::from_str::<TransformerConfig>(json).is_err());
    let ok =
        r#"{"n_layers":1,"d_model":8,"n_heads":2,"vocab_size":4,"max_seq_len":4,"n_classes":2}"#;
    let c: TransformerConfig = serde_json::from_str(ok).unwrap();
    assert_eq!(c.ffn_width(), 32);
}
