use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wav2prompt::baselines::EncoderLlm;
use wav2prompt::diffmath::{backprop, AdamConfig, Graph, ParamSet};
use wav2prompt::experiment::gradcheck::{tiny_encoder, tiny_lm, tiny_records};
use wav2prompt::synthdata::Record;
use wav2prompt::toyllm::{FrozenLM, Task, SOS};
use wav2prompt::training::*;

fn setup(seed: u64) -> (FrozenLM, PromptSystem, ParamSet, Vec<Record>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lm = tiny_lm(&mut rng).unwrap();
    let mut p = ParamSet::new();
    let sys = PromptSystem::Wav2Prompt(Wav2Prompt::register(&mut p, tiny_encoder(), lm.d_model(), &mut rng).unwrap());
    let recs = tiny_records(&mut rng, Task::Transcribe, 16);
    (lm, sys, p, recs)
}

#[test]
fn breakdown_recomposes_in_both_regimes() {
    for seed in 0..6 {
        let (lm, sys, p, recs) = setup(seed);
        let batch: Vec<&Record> = recs.iter().take(4).collect();
        let cfg = TrainConfig::default();
        for regime in [Regime::AsrTrain, Regime::FewShotFinetune] {
            let o = objective(&sys, &p, &lm, &batch, &cfg, regime).unwrap();
            let b = o.parts;
            let gamma = if regime == Regime::AsrTrain { 20.0 } else { 0.0 };
            assert!((b.total - (b.ce + gamma * b.mse + 0.05 * b.qua)).abs() < 1e-12);
            assert!((o.graph.value(o.loss).item() - b.total).abs() < 1e-12);
            if regime == Regime::FewShotFinetune {
                assert_eq!(b.mse, 0.0);
            }
        }
    }
}

#[test]
fn weights_zero_leave_cross_entropy() {
    let (lm, sys, p, recs) = setup(1);
    let batch: Vec<&Record> = recs.iter().take(3).collect();
    let cfg = TrainConfig { gamma: 0.0, mu: 0.0, ..Default::default() };
    let o = train_objective(&sys, &p, &lm, &batch, &cfg).unwrap();
    assert_eq!(o.graph.value(o.loss).item(), o.parts.ce);
    assert_eq!(o.parts.total, o.parts.ce);
}

#[test]
fn composition_arithmetic() {
    let b = LossBreakdown::compose(1.0, 0.1, 0.2, 20.0, 0.05);
    assert!((b.total - 3.01).abs() < 1e-12);
    let asr = LossBreakdown::compose(0.7, 0.3, 0.4, 20.0, 0.05);
    let ft = LossBreakdown::compose(0.7, 0.3, 0.4, 0.0, 0.05);
    assert!((asr.total - ft.total - 20.0 * 0.3).abs() < 1e-12);
}

#[test]
fn gradients_reach_only_prompt_parameters() {
    let (lm, sys, p, recs) = setup(2);
    let batch: Vec<&Record> = recs.iter().take(2).collect();
    let o = train_objective(&sys, &p, &lm, &batch, &TrainConfig::default()).unwrap();
    let grads = backprop(&o.graph, o.loss, &p).unwrap();
    assert_eq!(grads.len(), p.len());
    for (id, _) in grads.iter() {
        let name = p.param(id).name();
        assert!(name.starts_with("enc.") || name.starts_with("w2p."), "{name}");
    }
    assert!(backprop(&o.graph, o.loss, lm.params()).unwrap().is_empty());
}

#[test]
fn text_path_has_no_trainable_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lm = tiny_lm(&mut rng).unwrap();
    let mut g = Graph::new();
    let e = lm.embed_graph(&mut g, &[SOS, 14, 15, 5]).unwrap();
    let out = lm.forward_graph(&mut g, &[e]).unwrap();
    let loss = g.sum(out[0]);
    assert!(backprop(&g, loss, lm.params()).unwrap().is_empty());
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        seed: 5,
        optimizer: AdamConfig { lr: 1e-3, ..Default::default() },
        lr_floor: 1.0,
        val_samples: 4,
        ..Default::default()
    }
}

#[test]
fn overfit_loss_descends_and_lm_is_untouched() {
    let (lm, sys, p, recs) = setup(3);
    let before = lm.checksum().to_string();
    let out = run_training(&lm, &sys, p, &recs, &[], &quick_cfg(8), &mut |_| {}).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|h| h.loss.total).collect();
    assert_eq!(losses.len(), 8);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "{losses:?}");
    }
    assert_eq!(lm.params().checksum(), before);
}

#[test]
fn runs_are_deterministic_and_zero_epochs_is_identity() {
    let (lm, sys, p, recs) = setup(4);
    let (train, val) = recs.split_at(12);
    let a = run_training(&lm, &sys, p.clone(), train, val, &quick_cfg(2), &mut |_| {}).unwrap();
    let b = run_training(&lm, &sys, p.clone(), train, val, &quick_cfg(2), &mut |_| {}).unwrap();
    assert_eq!(serde_json::to_string(&a.history).unwrap(), serde_json::to_string(&b.history).unwrap());
    assert!(a.params.same_values(&b.params));
    let z = run_training(&lm, &sys, p.clone(), train, val, &quick_cfg(0), &mut |_| {}).unwrap();
    assert!(z.history.is_empty());
    assert!(z.params.same_values(&p));
}

#[test]
fn step_cap_and_encoder_llm_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lm = tiny_lm(&mut rng).unwrap();
    let mut p = ParamSet::new();
    let sys = PromptSystem::EncoderLlm(EncoderLlm::register(&mut p, tiny_encoder(), lm.d_model(), 8, &mut rng).unwrap());
    let recs = tiny_records(&mut rng, Task::Reverse, 8);
    let cfg = TrainConfig { max_steps: Some(3), batch_size: 2, ..quick_cfg(5) };
    let out = run_training(&lm, &sys, p, &recs, &[], &cfg, &mut |_| {}).unwrap();
    assert_eq!(out.history.iter().map(|h| h.steps).sum::<usize>(), 3);
    assert!(out.history.iter().all(|h| h.loss.mse == 0.0 && h.loss.qua == 0.0 && h.firing_drift.is_none()));
}
