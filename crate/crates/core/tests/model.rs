use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sarcasm_core::encoders::Provider;
use sarcasm_core::layers::Dropout;
use sarcasm_core::model::{
    batch_loss, build_variant, cross_entropy, evaluate, predict, ModelConfig, ModelInput,
    ModelParams, SequenceInput, Variant,
};
use sarcasm_core::verify::{random_batch, random_tensor, small_model_config};
use sarcasm_core::CoreError;
use sarcasm_tensor::{Tape, Tensor};

fn batch(config: &ModelConfig, n: usize, seed: u64) -> Vec<ModelInput> {
    random_batch(&mut ChaCha8Rng::seed_from_u64(seed), config, n)
}

fn loss(params: &ModelParams, config: &ModelConfig, inputs: &[ModelInput]) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let out = batch_loss(&mut tape, &bound, config, &refs, &mut Dropout::disabled()).unwrap();
    tape.value(out.loss).item().unwrap()
}

fn zero_classifier(params: &mut ModelParams) {
    params.classifier.weight.data_mut().fill(0.0);
    params.classifier.bias.data_mut().fill(0.0);
}

#[test]
fn zero_classifier_is_undecided_and_picks_label_zero() {
    for variant in Variant::ALL {
        let config = small_model_config(variant);
        let mut params = build_variant(&config, 1).unwrap();
        zero_classifier(&mut params);
        for input in batch(&config, 3, 2) {
            let p = predict(&params, &config, &input).unwrap();
            assert_eq!(p.probs, [0.5, 0.5]);
            assert_eq!(p.label, 0);
        }
    }
}

#[test]
fn fused_width_follows_active_branches() {
    let expected = [
        ("full", 16),
        ("no_visual_attention", 16),
        ("no_tau_si", 8),
        ("no_tau_sc", 8),
    ];
    for (variant, (name, dim)) in Variant::ALL.into_iter().zip(expected) {
        assert_eq!(variant.name(), name);
        let config = small_model_config(variant);
        assert_eq!(config.fused_dim(), dim);
        let params = build_variant(&config, 3).unwrap();
        assert_eq!(params.classifier.weight.shape(), [2, dim]);
        let p = predict(&params, &config, &batch(&config, 1, 4)[0]).unwrap();
        assert_eq!(p.fused.len(), dim);
    }
}

#[test]
fn same_seed_same_parameters() {
    let config = small_model_config(Variant::Full);
    let a = build_variant(&config, 9).unwrap();
    assert_eq!(a, build_variant(&config, 9).unwrap());
    assert_ne!(a, build_variant(&config, 10).unwrap());
}

fn names(variant: Variant) -> Vec<String> {
    build_variant(&small_model_config(variant), 0)
        .unwrap()
        .named()
        .into_iter()
        .map(|(n, _)| n)
        .collect()
}

#[test]
fn ablations_remove_exactly_their_branch() {
    let full = names(Variant::Full);
    for n in [
        "coattention.bilinear",
        "visual.projection",
        "visual.attention.squeeze",
        "incongruity.mlp_in",
    ] {
        assert!(full.iter().any(|x| x == n), "{n}");
    }

    let no_sc = names(Variant::NoTauSc);
    assert!(!no_sc.iter().any(|n| n.starts_with("coattention")));
    assert!(no_sc.iter().any(|n| n == "visual.attention.squeeze"));

    let no_va = names(Variant::NoVisualAttention);
    assert!(no_va.iter().any(|n| n == "visual.projection"));
    assert!(!no_va.iter().any(|n| n.starts_with("visual.attention")));
    assert!(no_va.iter().any(|n| n == "coattention.bilinear"));

    let no_si = names(Variant::NoTauSi);
    assert!(!no_si
        .iter()
        .any(|n| n.starts_with("visual") || n.starts_with("incongruity")));
    assert!(no_si.iter().any(|n| n == "coattention.bilinear"));
}

#[test]
fn undecided_predictions_cost_ln_2() {
    let mut config = small_model_config(Variant::Full);
    config.l2 = 0.0;
    let mut params = build_variant(&config, 5).unwrap();
    zero_classifier(&mut params);
    let l = loss(&params, &config, &batch(&config, 4, 6));
    assert!((l - std::f64::consts::LN_2).abs() < 1e-12, "{l}");
}

/// Classifier that ignores its input and is certain of class 1.
fn certain(params: &mut ModelParams) {
    zero_classifier(params);
    params
        .classifier
        .bias
        .data_mut()
        .copy_from_slice(&[-40.0, 40.0]);
}

fn positives(config: &ModelConfig, n: usize) -> Vec<ModelInput> {
    let mut inputs = batch(config, n, 7);
    inputs.iter_mut().for_each(|i| i.label = Some(1));
    inputs
}

#[test]
fn confident_correct_predictions_hit_the_clamp_floor() {
    let mut config = small_model_config(Variant::Full);
    config.l2 = 0.0;
    let mut params = build_variant(&config, 6).unwrap();
    certain(&mut params);
    let l = loss(&params, &config, &positives(&config, 3));
    assert!((0.0..=1e-10).contains(&l), "{l}");
}

#[test]
fn penalty_matches_a_naive_sweep() {
    let mut config = small_model_config(Variant::Full);
    config.l2 = 0.01;
    let mut params = build_variant(&config, 7).unwrap();
    certain(&mut params);
    let mut sweep = 0.0;
    for (_, t) in params.named() {
        for v in t.data() {
            sweep += v * v;
        }
    }
    let inputs = positives(&config, 2);
    let l = loss(&params, &config, &inputs);
    assert!(
        (l - config.l2 * sweep).abs() <= 1e-10,
        "{l} vs {}",
        config.l2 * sweep
    );

    let mut bare = config.clone();
    bare.l2 = 0.0;
    let gap = l - loss(&params, &bare, &inputs);
    assert!((gap - config.l2 * sweep).abs() <= 1e-12 * sweep);
}

#[test]
fn shifting_both_logits_changes_nothing() {
    let config = small_model_config(Variant::Full);
    let mut params = build_variant(&config, 8).unwrap();
    let inputs = batch(&config, 3, 9);
    let before: Vec<[f64; 2]> = inputs
        .iter()
        .map(|i| predict(&params, &config, i).unwrap().probs)
        .collect();
    params
        .classifier
        .bias
        .data_mut()
        .iter_mut()
        .for_each(|b| *b += 3.7);
    for (input, p) in inputs.iter().zip(before) {
        let q = predict(&params, &config, input).unwrap().probs;
        assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
        assert!((q[0] + q[1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn evaluation_agrees_with_per_sample_predictions() {
    let config = small_model_config(Variant::Full);
    let params = build_variant(&config, 10).unwrap();
    let inputs = batch(&config, 6, 11);
    let eval = evaluate(&params, &config, &inputs).unwrap();
    let mut ce = 0.0;
    for (input, p) in inputs.iter().zip(&eval.predictions) {
        assert_eq!(p, &predict(&params, &config, input).unwrap());
        ce += cross_entropy(p.probs, input.label.unwrap());
    }
    let want = ce / 6.0 + config.l2 * params.sum_squares();
    assert!((eval.loss - want).abs() < 1e-12);
    assert!((eval.loss - loss(&params, &config, &inputs)).abs() < 1e-12);
    let m = eval.metrics.unwrap();
    assert_eq!(m.total(), 6);

    // unlabeled inputs still predict but are not scored
    let mut unlabeled = inputs.clone();
    unlabeled[0].label = None;
    let eval = evaluate(&params, &config, &unlabeled).unwrap();
    assert!(eval.loss.is_nan() && eval.metrics.is_none());
    assert_eq!(eval.predictions.len(), 6);
}

#[test]
fn missing_inputs_name_the_sample() {
    let config = small_model_config(Variant::Full);
    let params = build_variant(&config, 12).unwrap();
    let mut input = batch(&config, 1, 13).remove(0);
    input.id = "tweet-42".into();

    let mut no_regions = input.clone();
    no_regions.regions = None;
    let err = predict(&params, &config, &no_regions).unwrap_err();
    assert!(
        matches!(&err, CoreError::Data(m) if m.contains("tweet-42")),
        "{err}"
    );

    let mut no_caption = input.clone();
    no_caption.caption = None;
    assert!(
        matches!(predict(&params, &config, &no_caption), Err(CoreError::Data(m)) if m.contains("tweet-42"))
    );

    let mut wrong_shape = input.clone();
    wrong_shape.regions = Some(Tensor::zeros(vec![9, 6]));
    assert!(matches!(
        predict(&params, &config, &wrong_shape),
        Err(CoreError::Data(_))
    ));

    // the image-free variant does not need regions
    let no_si = small_model_config(Variant::NoTauSi);
    let params = build_variant(&no_si, 12).unwrap();
    assert!(predict(&params, &no_si, &no_regions).is_ok());
}

#[test]
fn labels_must_be_binary() {
    let config = small_model_config(Variant::NoTauSc);
    let params = build_variant(&config, 14).unwrap();
    let mut inputs = batch(&config, 2, 15);
    inputs[1].label = Some(2);
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let refs: Vec<&ModelInput> = inputs.iter().collect();
    let err = batch_loss(&mut tape, &bound, &config, &refs, &mut Dropout::disabled())
        .err()
        .unwrap();
    assert!(matches!(err, CoreError::Data(m) if m.contains("check-1")));
}

#[test]
fn configs_without_a_branch_are_rejected() {
    let mut config = small_model_config(Variant::Full);
    config.use_tau_si = false;
    config.use_tau_sc = false;
    assert!(matches!(
        build_variant(&config, 0),
        Err(CoreError::Config(_))
    ));
    let mut config = small_model_config(Variant::Full);
    config.regions = 5;
    assert!(matches!(config.validate(), Err(CoreError::Config(_))));
}

#[test]
fn precomputed_features_replace_the_encoder() {
    let mut config = small_model_config(Variant::Full);
    config.encoder.provider = Provider::File;
    let params = build_variant(&config, 16).unwrap();
    assert!(params.text_encoder.is_none() && params.caption_encoder.is_none());
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let input = ModelInput {
        id: "f".into(),
        text: SequenceInput::Features(random_tensor(&mut rng, vec![4, 8])),
        caption: Some(SequenceInput::Features(random_tensor(&mut rng, vec![3, 8]))),
        regions: Some(random_tensor(&mut rng, vec![4, 6])),
        label: Some(1),
    };
    let p = predict(&params, &config, &input).unwrap();
    assert!((p.probs[0] + p.probs[1] - 1.0).abs() < 1e-12);

    let mut wrong = input.clone();
    wrong.text = SequenceInput::Features(random_tensor(&mut rng, vec![5, 8]));
    assert!(matches!(
        predict(&params, &config, &wrong),
        Err(CoreError::Data(_))
    ));
}

#[test]
fn separate_caption_encoder_when_not_shared() {
    let mut config = small_model_config(Variant::Full);
    config.encoder.share_text_caption = false;
    let params = build_variant(&config, 18).unwrap();
    assert!(params.caption_encoder.is_some());
    assert!(params
        .named()
        .iter()
        .any(|(n, _)| n.starts_with("caption_encoder.")));
    let shared = build_variant(&small_model_config(Variant::Full), 18).unwrap();
    let text_tensors = shared
        .named()
        .iter()
        .filter(|(n, _)| n.starts_with("text_encoder."))
        .count();
    assert_eq!(params.num_tensors(), shared.num_tensors() + text_tensors);
}
