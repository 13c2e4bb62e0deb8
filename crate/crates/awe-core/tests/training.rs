//! End-to-end trainer behavior: learning signal, determinism, checkpoint
//! round-trips and exact resume.

use awe_core::corpus::{synthesize_corpus, CorpusSplit, SynthConfig};
use awe_core::encoders::EncoderKind;
use awe_core::phonology::bundled_feature_table;
use awe_core::tensor::Mode;
use awe_core::trainer::{resume, train, Checkpoint, ObjectiveKind, RunConfig, TrainError};

fn tiny_corpus(seed: u64) -> CorpusSplit {
    let table = bundled_feature_table();
    let cfg = SynthConfig {
        n_word_types: 6,
        n_speakers: 3,
        segments_per_type: 10,
        noise_std: 0.25,
        speaker_shift_std: 0.2,
        duration_jitter: 0.6,
        seed,
        train_frac: 0.6,
        valid_frac: 0.2,
        ..SynthConfig::default()
    };
    synthesize_corpus(&cfg, &table).unwrap()
}

fn tiny_run(objective: ObjectiveKind, kind: EncoderKind, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(kind, objective, seed);
    cfg.bgru_hidden = 8;
    cfg.cnn_filters = vec![6, 8];
    cfg.cnn_widths = vec![3, 5];
    cfg.decoder_hidden = 8;
    cfg.decoder_embed = 6;
    cfg.epochs = 2;
    cfg.batch_size = 12;
    cfg.dropout = 0.1;
    cfg.log_timing = false;
    cfg
}

#[test]
fn all_objectives_and_encoders_train_with_finite_losses() {
    let table = bundled_feature_table();
    let corpus = tiny_corpus(3);
    for objective in [
        ObjectiveKind::PhoneDetect,
        ObjectiveKind::Word2Phones,
        ObjectiveKind::Siamese,
    ] {
        for kind in [EncoderKind::Bgru, EncoderKind::Cnn] {
            let cfg = tiny_run(objective, kind, 5);
            let out = train(&cfg, &corpus, &table, None).unwrap();
            assert_eq!(out.log.len(), 2);
            assert!(out.log.iter().all(|r| r.loss.is_finite()));
            assert!(out.log.iter().all(|r| r.val_map > 0.0));
        }
    }
}

#[test]
fn siamese_learning_signal_across_seed_majority() {
    // Epoch-2 train loss below epoch-1 in a majority of 5 seeds.
    let table = bundled_feature_table();
    let corpus = tiny_corpus(11);
    let mut wins = 0;
    for seed in 1..=5u64 {
        let cfg = tiny_run(ObjectiveKind::Siamese, EncoderKind::Bgru, seed);
        let out = train(&cfg, &corpus, &table, None).unwrap();
        if out.log[1].loss < out.log[0].loss {
            wins += 1;
        }
    }
    assert!(wins >= 3, "loss decreased in only {wins}/5 seeds");
}

#[test]
fn training_is_deterministic_given_seed() {
    let table = bundled_feature_table();
    let corpus = tiny_corpus(7);
    let cfg = tiny_run(ObjectiveKind::Siamese, EncoderKind::Bgru, 9);
    let a = train(&cfg, &corpus, &table, None).unwrap();
    let b = train(&cfg, &corpus, &table, None).unwrap();
    let ja = serde_json::to_string(&a.log).unwrap();
    let jb = serde_json::to_string(&b.log).unwrap();
    assert_eq!(ja, jb);
    assert_eq!(a.fingerprint, b.fingerprint);
}

#[test]
fn lr_schedule_is_non_increasing_and_best_dominates_log() {
    let table = bundled_feature_table();
    let corpus = tiny_corpus(13);
    let mut cfg = tiny_run(ObjectiveKind::PhoneDetect, EncoderKind::Bgru, 2);
    cfg.epochs = 6;
    cfg.plateau_patience = 2;
    let out = train(&cfg, &corpus, &table, None).unwrap();
    for w in out.log.windows(2) {
        assert!(w[1].lr <= w[0].lr);
    }
    for r in &out.log {
        let m = (cfg.lr / r.lr).log2().round() as i32;
        assert!(
            (r.lr - cfg.lr * cfg.plateau_factor.powi(m)).abs() < 1e-15,
            "lr {} is not lr0 * factor^m",
            r.lr
        );
    }
    let best_logged = out
        .log
        .iter()
        .map(|r| r.val_map)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(out.best.val_map >= best_logged);
}

#[test]
fn checkpoint_roundtrip_is_byte_identical_and_preserves_embeddings() {
    let table = bundled_feature_table();
    let corpus = tiny_corpus(17);
    let cfg = tiny_run(ObjectiveKind::Siamese, EncoderKind::Bgru, 21);
    let out = train(&cfg, &corpus, &table, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.awe1");
    let p2 = dir.path().join("b.awe1");
    out.best.save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    // Embeddings after reload match the pre-save model bitwise.
    let (store_a, enc_a) = awe_core::trainer::restore_encoder(&out.best).unwrap();
    let (store_b, enc_b) = awe_core::trainer::restore_encoder(&loaded).unwrap();
    let seg = &corpus.test[0];
    let ea = enc_a.embed(&store_a, &seg.frames, Mode::Eval).unwrap();
    let eb = enc_b.embed(&store_b, &seg.frames, Mode::Eval).unwrap();
    assert_eq!(ea, eb);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let table = bundled_feature_table();
    let corpus = tiny_corpus(19);
    let cfg = tiny_run(ObjectiveKind::PhoneDetect, EncoderKind::Cnn, 23);
    let out = train(&cfg, &corpus, &table, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.awe1");
    out.best.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
    match Checkpoint::load(&path) {
        Err(TrainError::Checkpoint(msg)) => {
            assert!(msg.contains("checksum") || msg.contains("payload"), "{msg}");
        }
        Err(other) => panic!("unexpected error kind: {other}"),
        Ok(_) => panic!("truncated checkpoint loaded"),
    }
}

#[test]
fn resume_reproduces_uninterrupted_trajectory() {
    let table = bundled_feature_table();
    let corpus = tiny_corpus(29);
    let mut cfg = tiny_run(ObjectiveKind::Siamese, EncoderKind::Bgru, 31);
    cfg.epochs = 4;

    let full = train(&cfg, &corpus, &table, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut cfg_half = cfg.clone();
    cfg_half.epochs = 2;
    train(&cfg_half, &corpus, &table, Some(dir.path())).unwrap();
    let last = Checkpoint::load(&dir.path().join("last.awe1")).unwrap();
    assert_eq!(last.epoch, 2);
    // Resume under the full epoch budget.
    let mut resumed_ckpt = last.clone();
    resumed_ckpt.config.epochs = 4;
    let resumed = resume(&resumed_ckpt, &corpus, &table, None).unwrap();

    assert_eq!(resumed.log.len(), 2);
    for (a, b) in full.log[2..].iter().zip(&resumed.log) {
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.loss, b.loss, "loss diverged at epoch {}", a.epoch);
        assert_eq!(a.val_map, b.val_map);
        assert_eq!(a.lr, b.lr);
    }
}
