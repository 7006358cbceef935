use selfkd_core::eval::*;
use std::collections::BTreeMap;

use selfkd_core::model::{Modality, ModelConfig, OmniModelState};
use selfkd_core::train::Prompts;
use selfkd_core::synth::{DatasetKind, DatasetManifest, SynthConfig, TaskMix, TokenId, FEATURE_DIM};

fn manifest(n_eval: usize, mix: Option<TaskMix>) -> DatasetManifest {
    let mut c = SynthConfig::default();
    c.counts.vqa_eval = n_eval;
    c.counts.mmalign = 600;
    if let Some(m) = mix {
        c.task_mix = m;
    }
    DatasetManifest::build(21, &c).unwrap()
}

fn yesno_only() -> TaskMix {
    TaskMix { yesno: 1.0, color: 0.0, shape: 0.0, count: 0.0, caption: 0.0, mmalign: 0.0 }
}

fn tiny_model(m: &DatasetManifest, layers: usize) -> OmniModelState {
    OmniModelState::init(ModelConfig {
        vocab_size: m.vocab.len(),
        d_model: 16,
        n_layers: layers,
        n_heads: 2,
        max_seq_len: 48,
        vision_dim: FEATURE_DIM,
        audio_dim: m.config.audio_dim,
        k_frames: m.k_frames,
        init_scale: 0.2,
        init_seed: 4,
    })
    .unwrap()
}

#[test]
fn oracle_predictions_score_100() {
    let m = manifest(200, None);
    let data = m.generate(DatasetKind::VqaEval).unwrap();
    let answers: Vec<_> = data.iter().map(|s| s.answer.clone()).collect();
    let scores = score(&data, &answers).unwrap();
    assert!(scores.values().all(|s| s.accuracy == 100.0));
    assert_eq!(scores.values().map(|s| s.n).sum::<usize>(), 200);
}

#[test]
fn hand_scored_batch() {
    let m = manifest(20, None);
    let data = m.generate(DatasetKind::VqaEval).unwrap();
    // Corrupt every third prediction.
    let preds: Vec<Vec<TokenId>> = data
        .iter()
        .enumerate()
        .map(|(i, s)| if i % 3 == 0 { vec![m.vocab.eos()] } else { s.answer.clone() })
        .collect();
    let scores = score(&data, &preds).unwrap();
    for (task, sc) in &scores {
        let idx: Vec<usize> = (0..20).filter(|&i| data[i].task.name() == task).collect();
        let correct = idx.iter().filter(|&&i| i % 3 != 0).count();
        assert_eq!(sc.n, idx.len());
        assert!((sc.accuracy - 100.0 * correct as f64 / idx.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn constant_yes_on_balanced_yesno() {
    let m = manifest(2000, Some(yesno_only()));
    let data = m.generate(DatasetKind::VqaEval).unwrap();
    let yes = m.vocab.id("yes").unwrap();
    let preds = vec![vec![yes]; data.len()];
    let acc = score(&data, &preds).unwrap()["yesno"].accuracy;
    assert!((acc - 50.0).abs() < 3.0, "{acc}");
    let (n, gt, bias) = yes_ratio(&data, &preds, &m.vocab).unwrap();
    assert_eq!(n, 2000);
    assert_eq!(bias.predicted_yes, 1.0);
    // Echoing the ground truth reproduces the target rate.
    let echo: Vec<_> = data.iter().map(|s| s.answer.clone()).collect();
    let (_, _, b) = yes_ratio(&data, &echo, &m.vocab).unwrap();
    assert_eq!(b.predicted_yes, gt);
    assert!((gt - 0.5).abs() < 0.02);
}

#[test]
fn yes_ratio_hand_tally() {
    let m = manifest(50, Some(yesno_only()));
    let data = m.generate(DatasetKind::VqaEval).unwrap();
    let (yes, no) = (m.vocab.id("yes").unwrap(), m.vocab.id("no").unwrap());
    let preds: Vec<Vec<TokenId>> =
        (0..50).map(|i| if i % 5 == 0 { vec![] } else if i % 2 == 0 { vec![yes] } else { vec![no] }).collect();
    let (_, _, b) = yes_ratio(&data, &preds, &m.vocab).unwrap();
    // i even and not a multiple of 5: 2,4,6,8,12,... → 20 of 50.
    assert_eq!(b.predicted_yes, 20.0 / 50.0);
    assert_eq!(b.unparsed, 10);
}

#[test]
fn gap_arithmetic() {
    let t: BTreeMap<String, f64> = [("avg".to_string(), 70.04), ("x".to_string(), 84.81)].into();
    let a: BTreeMap<String, f64> = [("avg".to_string(), 7.84), ("x".to_string(), 5.36)].into();
    let g = compute_gap(&t, &a).unwrap();
    assert!((g.per_task["avg"] - 62.20).abs() < 1e-9);
    assert!((g.per_task["x"] - 79.45).abs() < 1e-9);
    let same = compute_gap(&t, &t).unwrap();
    assert!(same.per_task.values().all(|&v| v == 0.0) && same.average == 0.0);
    let b: BTreeMap<String, f64> = [("avg".to_string(), 1.0)].into();
    assert!(compute_gap(&t, &b).unwrap_err().to_string().contains("\"x\""));
}

#[test]
fn eval_result_gap_is_exact_difference() {
    let t: BTreeMap<String, TaskScore> =
        [("a".into(), TaskScore { n: 3, accuracy: 66.0 }), ("b".into(), TaskScore { n: 2, accuracy: 50.0 })].into();
    let a: BTreeMap<String, TaskScore> =
        [("a".into(), TaskScore { n: 3, accuracy: 33.0 }), ("b".into(), TaskScore { n: 2, accuracy: 0.0 })].into();
    let r = EvalResult::from_scores(&t, &a).unwrap();
    assert!(r.tasks.values().all(|x| x.gap == x.text - x.audio));
    assert_eq!(r.text_average, 58.0);
    assert_eq!(r.gap_average, 41.5);
}

#[test]
fn mmalign_balance_and_oracle() {
    let m = manifest(10, None);
    let data = m.generate(DatasetKind::Mmalign).unwrap();
    let a = m.vocab.id("a").unwrap();
    let r = mmalign_score(&data, &vec![vec![a]; data.len()]).unwrap();
    assert_eq!((r.n_relation, r.n_attribute), (300, 300));
    assert!((r.average - 50.0).abs() <= 3.0, "{r:?}");
    let oracle: Vec<_> = data.iter().map(|s| s.answer.clone()).collect();
    assert_eq!(mmalign_score(&data, &oracle).unwrap().average, 100.0);
    // The table rounds 64.665 to two decimals.
    assert!((mmalign_average(61.33, 68.00) - 64.67).abs() <= 0.005 + 1e-9);
}

#[test]
fn decoding_is_deterministic() {
    let m = manifest(30, None);
    let data = m.generate(DatasetKind::VqaEval).unwrap();
    let model = tiny_model(&m, 2);
    let p = Prompts::new(&m.vocab).unwrap();
    for modality in [Modality::Text, Modality::Audio] {
        assert_eq!(eval_accuracy(&model, &p, &data, modality).unwrap(), eval_accuracy(&model, &p, &data, modality).unwrap());
    }
}

#[test]
fn uniform_attention_profile_closed_form() {
    let m = manifest(4, None);
    let data = m.generate(DatasetKind::VqaEval).unwrap();
    let mut model = tiny_model(&m, 1);
    model.param_mut("h0.attn.qkv.w").unwrap().data_mut().fill(0.0);
    let p = Prompts::new(&m.vocab).unwrap();
    let prof = attention_profile(&model, &p, &data[..1], Modality::Text, 1, "uniform").unwrap();
    let s = &data[0];
    let (sys, vis, q) = (2usize, 16usize, s.question.len());
    let expected: f64 = (0..q).map(|k| vis as f64 / (sys + vis + k + 1) as f64).sum::<f64>() / q as f64;
    assert!((prof.value(0, Channel::QV) - expected).abs() < 1e-12);
}

#[test]
fn channels_partition_unit_mass_and_average_over_samples() {
    let m = manifest(6, None);
    let data = m.generate(DatasetKind::VqaEval).unwrap();
    let model = tiny_model(&m, 3);
    let p = Prompts::new(&m.vocab).unwrap();
    for modality in [Modality::Text, Modality::Audio] {
        let prof = attention_profile(&model, &p, &data, modality, 6, "t").unwrap();
        for l in 0..3 {
            let q: f64 = [Channel::QS, Channel::QV, Channel::QQ].iter().map(|&c| prof.value(l, c)).sum();
            let r: f64 = [Channel::RS, Channel::RV, Channel::RQ, Channel::RR].iter().map(|&c| prof.value(l, c)).sum();
            assert!((q - 1.0).abs() < 1e-4 && (r - 1.0).abs() < 1e-4);
        }
    }
    let both = attention_profile(&model, &p, &data[..2], Modality::Text, 2, "t").unwrap();
    let a = attention_profile(&model, &p, &data[..1], Modality::Text, 1, "t").unwrap();
    let b = attention_profile(&model, &p, &data[1..2], Modality::Text, 1, "t").unwrap();
    for l in 0..3 {
        for c in Channel::ALL {
            assert!((both.value(l, c) - (a.value(l, c) + b.value(l, c)) / 2.0).abs() < 1e-12);
        }
    }
    let csv = both.to_csv();
    assert_eq!(csv.lines().count(), 1 + 3 * Channel::ALL.len());
    assert_eq!(csv, attention_profile(&model, &p, &data[..2], Modality::Text, 2, "t").unwrap().to_csv());
}

#[test]
fn profile_distances() {
    let mk = |v: f64, layers: usize| AttentionProfile {
        modality: "text".into(),
        model_tag: "x".into(),
        n_samples: 1,
        head_aggregation: "mean".into(),
        response_positions: "teacher_forced".into(),
        layers: (0..layers).map(|l| [(Channel::QV, v + l as f64 * 0.01)].into()).collect(),
    };
    let a = mk(0.3, 4);
    assert_eq!(profile_distance(&a, &a, None).unwrap(), 0.0);
    assert!((profile_distance(&a, &mk(0.4, 4), None).unwrap() - 0.1).abs() < 1e-12);
    assert!(profile_distance(&a, &mk(0.4, 3), None).is_err());
    assert!(profile_distance(&a, &a, Some(2..9)).is_err());
}
