use selfkd_core::train::*;
use selfkd_core::autodiff::*;
use selfkd_core::tensor::*;
use selfkd_core::gradcheck::{check_gradients, DEFAULT_EPS};
use selfkd_core::model::{Bound, Modality, ModelConfig, OmniModelState, ParamGroup};
use selfkd_core::{Error, Result};
use selfkd_core::synth::{DatasetKind, DatasetManifest, Sample, SynthConfig, FEATURE_DIM};

struct Fixture {
    manifest: DatasetManifest,
    prompts: Prompts,
}

fn fixture() -> Fixture {
    let mut c = SynthConfig::default();
    c.counts.text_pretrain = 24;
    c.counts.caption_align = 24;
    c.counts.vqa_text = 24;
    c.counts.asr = 24;
    c.counts.vqa_audio_paired = 24;
    c.counts.vqa_eval = 24;
    c.counts.mmalign = 8;
    let manifest = DatasetManifest::build(3, &c).unwrap();
    let prompts = Prompts::new(&manifest.vocab).unwrap();
    Fixture { manifest, prompts }
}

fn model_config(f: &Fixture, d: usize, layers: usize, init_scale: f64) -> ModelConfig {
    ModelConfig {
        vocab_size: f.manifest.vocab.len(),
        d_model: d,
        n_layers: layers,
        n_heads: 2,
        max_seq_len: 48,
        vision_dim: FEATURE_DIM,
        audio_dim: f.manifest.config.audio_dim,
        k_frames: f.manifest.k_frames,
        init_scale,
        init_seed: 1,
    }
}

fn va_config(alpha: f64, mode: KdMode) -> StageConfig {
    StageConfig { alpha, kd_mode: mode, ..StageConfig::default_for(Stage::VisionAudioSft) }
}

#[test]
fn lr_schedule_endpoints() {
    assert_eq!(lr_schedule(0, 100, 3e-4, 0).unwrap(), 3e-4);
    assert!(lr_schedule(100, 100, 3e-4, 0).unwrap().abs() < 1e-12);
    assert!((lr_schedule(50, 100, 3e-4, 0).unwrap() - 1.5e-4).abs() < 1e-15);
    assert!(lr_schedule(0, 0, 1.0, 0).is_err());
    assert!(lr_schedule(101, 100, 1.0, 0).is_err());
    // Warmup ramps linearly, then decays from the peak.
    assert!((lr_schedule(1, 100, 1.0, 4).unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(lr_schedule(4, 100, 1.0, 4).unwrap(), 1.0);
}

#[test]
fn freeze_policy_per_stage() {
    use ParamGroup::*;
    assert_eq!(freeze_policy(Stage::VisionAudioSft), vec![AudioEncoder, AudioProjector]);
    assert_eq!(freeze_policy(Stage::VisionTextAlign), vec![VisionEncoder, VisionProjector]);
    assert!(!freeze_policy(Stage::VisionTextSft).iter().any(|g| matches!(g, AudioEncoder | AudioProjector)));
    assert_eq!(Stage::from_name("bogus"), None);
}

#[test]
fn stage_config_validation_names_fields() {
    let mut c = va_config(1.5, KdMode::TokenKl);
    let err = c.validate().unwrap_err();
    assert!(err.to_string().contains("stages.vision_audio_sft.alpha"), "{err}");
    c.alpha = 0.5;
    c.validate().unwrap();
    let mut t = StageConfig::default_for(Stage::VisionTextSft);
    t.alpha = 0.5;
    assert!(t.validate().is_err());
}

fn scalar(tape: &mut Tape, x: f64) -> Var {
    tape.constant(Tensor::scalar(x))
}

#[test]
fn combined_loss_endpoints_and_mixture() {
    let mut tape = Tape::new();
    let (kd, sft) = (scalar(&mut tape, 0.37), scalar(&mut tape, 1.91));
    for (alpha, expected) in [(0.0, 1.91), (1.0, 0.37), (0.75, 0.75 * 0.37 + 0.25 * 1.91)] {
        let l = loss_combined(&mut tape, kd, sft, alpha).unwrap();
        assert_eq!(tape.value(l).item(), expected);
    }
    assert!(loss_combined(&mut tape, kd, sft, -0.1).is_err());
    assert!(loss_combined(&mut tape, kd, sft, 1.01).is_err());
}

#[test]
fn sft_loss_analytic_cases() {
    let mut tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros(&[3, 7]));
    let l = loss_sft(&mut tape, uniform, &[0, 3, 6], &[true; 3]).unwrap();
    assert!((tape.value(l).item() - 7f64.ln()).abs() < 1e-12);

    let perfect = tape.constant(Tensor::from_fn(&[2, 5], |i| if i == 1 || i == 8 { 30.0 } else { 0.0 }));
    let l = loss_sft(&mut tape, perfect, &[1, 3], &[true; 2]).unwrap();
    assert!(tape.value(l).item() < 1e-4);

    // Two answer tokens with hand-computed log-probabilities.
    let logits = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 0.0, 0.5, 0.5, 3.0]).unwrap());
    let l = loss_sft(&mut tape, logits, &[1, 0], &[true, true]).unwrap();
    let lp1 = 2.0 - (1f64.exp() + 2f64.exp() + 1.0).ln();
    let lp2 = 0.5 - (2.0 * 0.5f64.exp() + 3f64.exp()).ln();
    assert!((tape.value(l).item() + (lp1 + lp2) / 2.0).abs() < 1e-12);

    assert!(loss_sft(&mut tape, logits, &[1, 0], &[false, false]).is_err());
}

#[test]
fn self_kd_loss_cases() {
    let mut tape = Tape::new();
    let z = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 1.0, 1.0, 0.0]).unwrap();
    let t = tape.constant(z.clone());
    let s = tape.param(z);
    for mode in [KdMode::TokenKl, KdMode::GtLogratio] {
        let l = loss_self_kd(&mut tape, t, s, &[2, 0], &[true, true], 1.0, mode).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12, "{mode:?}");
    }

    // Two classes: certain teacher vs uniform student gives ln 2.
    let t2 = tape.constant(Tensor::new(vec![1, 2], vec![50.0, -50.0]).unwrap());
    let s2 = tape.param(Tensor::zeros(&[1, 2]));
    let l = loss_self_kd(&mut tape, t2, s2, &[0], &[true], 1.0, KdMode::TokenKl).unwrap();
    assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-6);

    // Log-ratio summed by hand.
    let tv = [[1.0, 0.0, -1.0], [0.0, 2.0, 0.0]];
    let sv = [[0.0, 0.0, 0.0], [1.0, 0.0, 1.0]];
    let lse = |r: &[f64; 3]| r.iter().map(|x| x.exp()).sum::<f64>().ln();
    let manual = ((tv[0][0] - lse(&tv[0])) - (sv[0][0] - lse(&sv[0])) + (tv[1][1] - lse(&tv[1]))
        - (sv[1][1] - lse(&sv[1])))
        / 2.0;
    let t3 = tape.constant(Tensor::from_rows(&[tv[0].to_vec(), tv[1].to_vec()]).unwrap());
    let s3 = tape.param(Tensor::from_rows(&[sv[0].to_vec(), sv[1].to_vec()]).unwrap());
    let l = loss_self_kd(&mut tape, t3, s3, &[0, 1], &[true, true], 1.0, KdMode::GtLogratio).unwrap();
    assert!((tape.value(l).item() - manual).abs() < 1e-12);

    // Teacher side never gets gradient.
    tape.backward(l).unwrap();
    assert!(tape.grad(t3).is_none());

    assert!(loss_self_kd(&mut tape, t3, s3, &[0, 1], &[true], 1.0, KdMode::TokenKl).is_err());
    assert!(loss_self_kd(&mut tape, t3, s2, &[0], &[true], 1.0, KdMode::TokenKl).is_err());
}

/// L_total for a paired batch built from the given parameter vars.
fn total_loss(
    model: &OmniModelState,
    prompts: &Prompts,
    samples: &[&Sample],
    teacher: &Tensor,
    tape: &mut Tape,
    vars: &[Var],
    alpha: f64,
    mode: KdMode,
    temperature: f64,
) -> Result<Var> {
    let bound = Bound::from_vars(vars.to_vec());
    let fb = forced_forward(model, tape, &bound, prompts, samples, Modality::Audio, false)?;
    let sft = loss_sft(tape, fb.logits, &fb.targets, &fb.mask)?;
    let t = tape.constant(teacher.clone());
    let kd = loss_self_kd(tape, t, fb.logits, &fb.targets, &fb.mask, temperature, mode)?;
    loss_combined(tape, kd, sft, alpha)
}

#[test]
fn total_loss_matches_finite_differences() {
    let f = fixture();
    let model = OmniModelState::init(model_config(&f, 16, 2, 0.3)).unwrap();
    let data = f.manifest.generate(DatasetKind::VqaAudioPaired).unwrap();
    let samples: Vec<&Sample> = data.iter().take(2).collect();
    let teacher = teacher_logits(&model, &f.prompts, &samples).unwrap();
    let params: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    for (alpha, mode, temp) in [(0.5, KdMode::TokenKl, 2.0), (0.8, KdMode::GtLogratio, 1.0)] {
        let report = check_gradients(
            |tape, vars| total_loss(&model, &f.prompts, &samples, &teacher, tape, vars, alpha, mode, temp),
            &params,
            DEFAULT_EPS,
            7,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{mode:?}: {report:?}");
    }
}

fn grads_of(
    model: &OmniModelState,
    f: &Fixture,
    samples: &[&Sample],
    build: impl Fn(&mut Tape, &ForcedBatch, Var) -> Var,
) -> Vec<Option<Tensor>> {
    let teacher = teacher_logits(model, &f.prompts, samples).unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let fb = forced_forward(model, &mut tape, &bound, &f.prompts, samples, Modality::Audio, false).unwrap();
    let t = tape.constant(teacher);
    let loss = build(&mut tape, &fb, t);
    tape.backward(loss).unwrap();
    bound.vars().iter().map(|&v| tape.grad(v).cloned()).collect()
}

#[test]
fn alpha_endpoints_reduce_to_single_losses() {
    let f = fixture();
    let mut model = OmniModelState::init(model_config(&f, 16, 2, 0.3)).unwrap();
    model.set_trainable(&freeze_policy(Stage::VisionAudioSft));
    let data = f.manifest.generate(DatasetKind::VqaAudioPaired).unwrap();
    let samples: Vec<&Sample> = data.iter().take(3).collect();
    let kd = |tape: &mut Tape, fb: &ForcedBatch, t: Var| {
        loss_self_kd(tape, t, fb.logits, &fb.targets, &fb.mask, 1.0, KdMode::TokenKl).unwrap()
    };
    let sft = |tape: &mut Tape, fb: &ForcedBatch, _t: Var| loss_sft(tape, fb.logits, &fb.targets, &fb.mask).unwrap();
    let mixed = |alpha: f64| {
        move |tape: &mut Tape, fb: &ForcedBatch, t: Var| {
            let k = kd(tape, fb, t);
            let s = sft(tape, fb, t);
            loss_combined(tape, k, s, alpha).unwrap()
        }
    };
    for (alpha, pure) in [(0.0, grads_of(&model, &f, &samples, sft)), (1.0, grads_of(&model, &f, &samples, kd))] {
        let g = grads_of(&model, &f, &samples, mixed(alpha));
        for (a, b) in g.iter().zip(&pure) {
            match (a, b) {
                (Some(a), Some(b)) => assert!(a.max_abs_diff(b) <= 1e-10),
                (None, None) => {}
                _ => panic!("gradient presence differs"),
            }
        }
    }
}

#[test]
fn kd_vanishes_when_student_matches_teacher() {
    // With the audio path bypassed (student == teacher input), the loss is 0.
    let f = fixture();
    let model = OmniModelState::init(model_config(&f, 16, 2, 0.3)).unwrap();
    let data = f.manifest.generate(DatasetKind::VqaAudioPaired).unwrap();
    let samples: Vec<&Sample> = data.iter().take(4).collect();
    let teacher = teacher_logits(&model, &f.prompts, &samples).unwrap();
    let mut tape = Tape::new();
    let t = tape.constant(teacher.clone());
    let s = tape.param(teacher);
    let mask = vec![true; tape.value(s).rows()];
    let targets = vec![0; mask.len()];
    let l = loss_self_kd(&mut tape, t, s, &targets, &mask, 1.0, KdMode::TokenKl).unwrap();
    assert!(tape.value(l).item().abs() <= 1e-9);
}

fn small_run(alpha: f64, epochs: usize) -> (OmniModelState, OmniModelState, TrainLog) {
    let f = fixture();
    let base = OmniModelState::init(model_config(&f, 16, 2, 0.1)).unwrap();
    let data = f.manifest.generate(DatasetKind::VqaAudioPaired).unwrap();
    let mut model = base.clone();
    let cfg = StageConfig { epochs, batch_size: 8, base_lr: 1e-2, ..va_config(alpha, KdMode::TokenKl) };
    let log = run_stage(&mut model, &cfg, &f.prompts, &data, None).unwrap();
    (base, model, log)
}

#[test]
fn vision_audio_stage_only_moves_audio_groups() {
    let (base, trained, log) = small_run(0.75, 2);
    assert_eq!(log.steps.len(), 6);
    for g in ParamGroup::ALL {
        let same = base.group_checksum(g) == trained.group_checksum(g);
        let audio = matches!(g, ParamGroup::AudioEncoder | ParamGroup::AudioProjector);
        assert_eq!(same, !audio, "{g}");
    }
    for r in &log.steps {
        let kd = r.l_kd.unwrap();
        assert!((r.l_total - (0.75 * kd + 0.25 * r.l_sft)).abs() <= 1e-9);
    }
    assert_eq!(log.epochs.len(), 2);
}

#[test]
fn runs_are_deterministic_and_alpha_zero_is_sft() {
    let (_, a, la) = small_run(0.0, 1);
    let (_, b, lb) = small_run(0.0, 1);
    assert_eq!(a.trainable_checksum(), b.trainable_checksum());
    assert_eq!(la, lb);
    assert!(la.steps.iter().all(|r| r.l_kd.is_none() && r.l_total == r.l_sft));
    let csv = la.to_csv();
    assert!(csv.starts_with("step,lr,l_sft,l_kd,l_total,grad_norm\n"));
    assert_eq!(csv.lines().count(), la.steps.len() + 1);
}

#[test]
fn stage_rejects_mismatched_data() {
    let f = fixture();
    let mut model = OmniModelState::init(model_config(&f, 16, 2, 0.1)).unwrap();
    let asr = f.manifest.generate(DatasetKind::Asr).unwrap();
    let err = run_stage(&mut model, &va_config(0.0, KdMode::TokenKl), &f.prompts, &asr, None).unwrap_err();
    assert!(err.to_string().contains("has task asr"), "{err}");
    let text = f.manifest.generate(DatasetKind::VqaText).unwrap();
    assert!(run_stage(&mut model, &va_config(0.0, KdMode::TokenKl), &f.prompts, &text, None).is_err());
}

#[test]
fn non_finite_loss_aborts_with_last_good_state() {
    let f = fixture();
    let mut model = OmniModelState::init(model_config(&f, 16, 2, 0.1)).unwrap();
    model.param_mut("head.b").unwrap().data_mut()[0] = f64::NAN;
    let before = model.clone();
    let data = f.manifest.generate(DatasetKind::VqaText).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = StageConfig::default_for(Stage::VisionTextSft);
    let err = run_stage(&mut model, &cfg, &f.prompts, &data, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NanLoss { step: 0 }));
    assert!(dir.path().join("last_good.json").exists());
    assert_eq!(model.group_checksum(ParamGroup::Backbone), before.group_checksum(ParamGroup::Backbone));
}

#[test]
fn one_sample_overfits() {
    let f = fixture();
    let mut c = model_config(&f, 32, 2, 0.02);
    c.n_heads = 4;
    let mut model = OmniModelState::init(c).unwrap();
    let data = f.manifest.generate(DatasetKind::VqaText).unwrap();
    let one = vec![data[0].clone()];
    let cfg = StageConfig { epochs: 500, batch_size: 1, base_lr: 3e-3, ..StageConfig::default_for(Stage::VisionTextSft) };
    let log = run_stage(&mut model, &cfg, &f.prompts, &one, None).unwrap();
    let first = log.steps.iter().position(|r| r.l_total < 0.01);
    assert!(first.is_some(), "final loss {}", log.steps.last().unwrap().l_total);
}
