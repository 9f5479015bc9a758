//! End to end through the public API: corpus, training, checkpoint, report.

use cvlm::config::RunConfig;
use cvlm::data::{build_vocab, encode_corpus};
use cvlm::eval::{evaluate, EvalOptions};
use cvlm::objective::ObjectiveMode;
use cvlm::synthetic;
use cvlm::trainer::{train, Checkpoint, TrainData, TrainOptions};

fn data() -> TrainData {
    let lines = synthetic::generate(120, 11);
    let vocab = build_vocab(&lines[..100], 500).unwrap();
    TrainData {
        train: encode_corpus(&lines[..100], &vocab, 30),
        valid: encode_corpus(&lines[100..], &vocab, 30),
        vocab,
    }
}

fn config(mode: ObjectiveMode) -> RunConfig {
    RunConfig {
        mode,
        latent_dim: 4,
        hidden_dim: 16,
        embed_dim: 16,
        batch_size: 16,
        epochs: 3,
        lr: 3e-3,
        dropout: 0.2,
        anneal_copula: true,
        deterministic: true,
        ..RunConfig::default()
    }
}

#[test]
fn every_mode_trains_and_reports_consistently() {
    let data = data();
    for mode in [ObjectiveMode::MeanField, ObjectiveMode::Copula, ObjectiveMode::FullCov] {
        let out = train(&config(mode), &data, TrainOptions::default()).unwrap();
        assert!(out.gate.as_ref().is_some_and(|g| g.passed), "{mode}");
        let train_rec: Vec<f64> = out.rows.iter().filter(|r| r.split == "train").map(|r| r.rec_nll).collect();
        assert!(train_rec.last() < train_rec.first(), "{mode}: {train_rec:?}");

        let back = Checkpoint::from_bytes(&out.last.to_bytes()).unwrap();
        assert_eq!(back, out.last);
        let opts = EvalOptions {
            mode,
            lambda: if mode == ObjectiveMode::MeanField { 0.0 } else { 0.4 },
            batch_size: 7,
            seed: 2,
            shared_noise: false,
        };
        let r = evaluate(&back.params, &back.vocab, &data.valid, &opts, 10, 30).unwrap();
        let t = &r.totals;
        assert_eq!(r.sentences_evaluated, 20);
        assert!((r.nll - (r.rec_nll + r.kl)).abs() < 1e-9);
        assert!((r.ppl - ((t.rec_nll + t.kl) / t.tokens as f64).exp()).abs() < 1e-9 * r.ppl);
        assert!(r.kl >= 0.0 && r.active_units <= 4);
        assert!((0.0..=1.0).contains(&r.distinct_ratio));
    }
}
