use proptest::prelude::*;

use selfkd_core::synth::{
    dataset_bytes, read_dataset, recompute_answer, write_dataset, DatasetCounts, DatasetKind, DatasetManifest,
    SynthConfig, MAX_ANSWER_TOKENS, MAX_QUESTION_TOKENS,
};

fn small(sigma: f64) -> SynthConfig {
    let mut c = SynthConfig::default();
    c.sigma = sigma;
    c.counts = DatasetCounts {
        text_pretrain: 8,
        caption_align: 8,
        vqa_text: 24,
        asr: 8,
        vqa_audio_paired: 24,
        vqa_eval: 24,
        mmalign: 12,
    };
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_sample_is_well_formed(seed in any::<u64>()) {
        let m = DatasetManifest::build(seed, &small(0.05)).unwrap();
        for kind in DatasetKind::ALL {
            let data = m.generate(kind).unwrap();
            prop_assert_eq!(data.len(), m.config.counts.get(kind));
            for s in &data {
                prop_assert_eq!(recompute_answer(s, &m.vocab), Some(s.answer.clone()));
                prop_assert!(s.question.len() <= MAX_QUESTION_TOKENS);
                prop_assert!(s.answer.len() <= MAX_ANSWER_TOKENS);
                prop_assert!(s.question.iter().chain(&s.answer).all(|&t| (t as usize) < m.vocab.len()));
                if let Some(a) = &s.audio {
                    prop_assert_eq!(a.n_frames(), m.k_frames * s.question.len());
                }
            }
        }
    }

    #[test]
    fn same_seed_same_bytes(seed in any::<u64>()) {
        let a = DatasetManifest::build(seed, &small(0.05)).unwrap();
        let b = DatasetManifest::build(seed, &small(0.05)).unwrap();
        prop_assert_eq!(a.compute_checksum(), b.compute_checksum());
        for kind in DatasetKind::ALL {
            prop_assert_eq!(dataset_bytes(&a.generate(kind).unwrap()), dataset_bytes(&b.generate(kind).unwrap()));
        }
    }

    #[test]
    fn noiseless_speech_decodes_exactly(seed in any::<u64>()) {
        let m = DatasetManifest::build(seed, &small(0.0)).unwrap();
        let table = m.acoustic_table();
        for s in m.generate(DatasetKind::VqaAudioPaired).unwrap() {
            prop_assert_eq!(table.decode_nearest(s.audio.as_ref().unwrap()), s.question);
        }
    }
}

#[test]
fn datasets_survive_a_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = DatasetManifest::build(9, &small(0.05)).unwrap();
    for kind in DatasetKind::ALL {
        let data = m.generate(kind).unwrap();
        let path = dir.path().join(kind.file_name());
        write_dataset(&path, &data).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), data, "{kind}");
    }
}
