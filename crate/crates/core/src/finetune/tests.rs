use super::*;
use crate::model::ModelConfig;
use alloc::string::ToString;

fn config(hidden: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        hidden,
        heads: 2,
        ffn_hidden: 16,
        vocab_size: 12,
        type_vocab_size: 4,
        max_positions: 16,
        tag_layer: 1,
        layer_weighter: false,
        tag_head: true,
        tie_decoder: true,
        dropout: 0.0,
        layer_norm_eps: 1e-12,
    }
}

fn vocab() -> SubwordVocab {
    SubwordVocab::from_tokens(["de", "kat", "hond", "loopt", "##s", "##je", "zit"]).unwrap()
}

fn sent(pairs: &[(&str, &str)]) -> Sentence {
    Sentence::from_pairs(pairs.iter().copied()).unwrap()
}

fn splits() -> TaskSplits {
    let train = vec![
        sent(&[("de", "DET"), ("kat", "N"), ("loopt", "V")]),
        sent(&[("de", "DET"), ("hond", "N"), ("zit", "V")]),
        sent(&[("de", "DET"), ("katje", "N"), ("zit", "V")]),
        sent(&[("de", "DET"), ("honds", "N"), ("loopt", "V")]),
    ];
    let valid = vec![sent(&[("de", "DET"), ("kat", "N"), ("zit", "V")])];
    let test = vec![sent(&[("de", "DET"), ("hond", "N"), ("loopt", "V")])];
    TaskSplits::new(train, valid, test, Scheme::Plain).unwrap()
}

#[test]
fn head_has_affine_parameter_count() {
    let m = Model::<f64>::init(config(8), 1).unwrap();
    let before = m.params().total_elements();
    let c = attach_head(&m, 5, 0).unwrap();
    assert_eq!(c.head_param_count(), 8 * 5 + 5);
    assert_eq!(c.model.params().total_elements() - before, 8 * 5 + 5);
    assert!(attach_head(&m, 1, 0).is_err());
    // reattaching replaces rather than stacks
    let again = attach_head(&c.model, 3, 0).unwrap();
    assert_eq!(again.model.params().total_elements() - before, 8 * 3 + 3);
    assert_eq!(Classifier::from_model(again.model.clone()).unwrap().num_labels, 3);
}

#[test]
fn mismatched_hidden_size_names_shapes() {
    let small = Model::<f64>::init(config(8), 1).unwrap();
    let err = Model::<f64>::from_params(config(12), small.params().clone()).unwrap_err();
    let text = alloc::format!("{err}");
    assert!(text.contains("8") && text.contains("12"), "{text}");
}

#[test]
fn one_prediction_per_word() {
    let s = splits();
    let enc = encode_task(&vocab(), &s.train, 100).unwrap();
    // "katje" and "honds" split into two pieces each
    assert_eq!(enc.instances[2].input_ids.len(), 6);
    let c = attach_head(&Model::<f64>::init(config(8), 1).unwrap(), 3, 0).unwrap();
    let pred = predict(&c, &enc, 2, 100).unwrap();
    for (p, sentence) in pred.iter().zip(&s.train.sentences) {
        assert_eq!(p.len(), sentence.len());
    }
}

#[test]
fn truncation_limits_inputs_and_reports_dropped_words() {
    let s = splits();
    let enc = encode_task(&vocab(), &s.train, 4).unwrap();
    assert!(enc.instances.iter().all(|i| i.len() <= 4));
    // two subword slots: "de" plus the first piece of the noun survive
    assert_eq!(enc.truncated_words, 4);
    assert!(enc.kept.iter().all(|k| k == &[true, true, false]));
    assert!(enc.instances.iter().all(|i| *i.input_ids.last().unwrap() == SEP));
    let c = attach_head(&Model::<f64>::init(config(8), 1).unwrap(), 3, 0).unwrap();
    let scores = evaluate(&c, &s.train, &enc, 8, 4).unwrap();
    assert!(scores.accuracy >= 0.0 && scores.accuracy <= 1.0);
    assert!(encode_task(&vocab(), &s.train, 2).is_err());
}

#[test]
fn earliest_epoch_wins_ties() {
    assert_eq!(select_epoch(&[0.5, 0.7, 0.7, 0.6]), Some(1));
    assert_eq!(select_epoch(&[0.9, 0.9]), Some(0));
    assert_eq!(select_epoch(&[f64::NAN, 0.1]), Some(1));
    assert_eq!(select_epoch(&[]), None);
    assert_eq!(mean(&[0.5, 0.75, 1.0]), 0.75);
}

#[test]
fn config_validation() {
    assert!(FinetuneConfig::default().validate().is_ok());
    assert!(FinetuneConfig { seeds: vec![1, 1, 2], ..Default::default() }.validate().is_err());
    assert!(FinetuneConfig { seeds: vec![], ..Default::default() }.validate().is_err());
    assert!(FinetuneConfig { lr: 0.0, ..Default::default() }.validate().is_err());
}

#[test]
fn zero_epochs_leave_the_backbone_untouched() {
    let m = Model::<f64>::init(config(8), 4).unwrap();
    let cfg = FinetuneConfig { max_epochs: 0, ..Default::default() };
    let r = finetune(&m, &vocab(), &splits(), &cfg, |_| ControlFlow::Continue(())).unwrap();
    for run in &r.runs {
        assert_eq!(run.best_epoch, 0);
        let backbone = run.classifier.model.params().filtered(|n| n != HEAD_WEIGHT && n != HEAD_BIAS);
        assert_eq!(&backbone, m.params());
    }
}

#[test]
fn report_averages_seed_scores() {
    let m = Model::<f64>::init(config(8), 4).unwrap();
    let cfg = FinetuneConfig { max_epochs: 3, lr: 1e-2, batch_size: 2, ..Default::default() };
    let mut seen = Vec::new();
    let r = finetune(&m, &vocab(), &splits(), &cfg, |e| {
        seen.push((e.seed, e.epoch));
        ControlFlow::Continue(())
    })
    .unwrap();
    assert_eq!(seen.len(), 9);
    assert_eq!(r.runs.len(), 3);
    let accs: Vec<f64> = r.runs.iter().map(|x| x.test.accuracy).collect();
    assert!((r.mean_test_accuracy - (accs[0] + accs[1] + accs[2]) / 3.0).abs() < 1e-15);
    for run in &r.runs {
        assert_eq!(run.validation.len(), 4);
        let metric: Vec<f64> = run.validation.iter().map(|s| s.accuracy).collect();
        assert_eq!(Some(run.best_epoch), select_epoch(&metric));
    }
    assert_eq!(r.mean_test_f1, None);
    // training moved the backbone
    assert_ne!(
        r.runs[0].classifier.model.params().get("embeddings.token"),
        m.params().get("embeddings.token")
    );
}

#[test]
fn iob_task_reports_span_scores() {
    let train = vec![
        sent(&[("de", "O"), ("kat", "B-PER"), ("loopt", "O")]),
        sent(&[("hond", "B-LOC"), ("zit", "I-LOC")]),
    ];
    let s = TaskSplits::new(train.clone(), train.clone(), train, Scheme::Iob).unwrap();
    let m = Model::<f64>::init(config(8), 4).unwrap();
    let cfg = FinetuneConfig { max_epochs: 1, seeds: vec![7], selection_metric: SelectionMetric::SpanF1, ..Default::default() };
    let r = finetune(&m, &vocab(), &s, &cfg, |_| ControlFlow::Continue(())).unwrap();
    assert!(r.mean_test_f1.is_some());
    let bad = vec![sent(&[("de", "PER")])];
    assert!(TaskSplits::new(bad.clone(), bad.clone(), bad, Scheme::Iob).is_err());
    let unknown = TaskDataset::new(vec![sent(&[("de", "X")])], vec!["O".to_string(), "B-A".to_string()], Scheme::Iob);
    assert!(unknown.is_err());
}
