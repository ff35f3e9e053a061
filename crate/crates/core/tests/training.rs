use hpst::event::Event;
use hpst::metrics::{evaluate, Predictor};
use hpst::model::{init_weights, HyperParams, ModelError, Prediction};
use hpst::synth::{generate_events, GenConfig};
use hpst::train::{adam_step, batch_gradients, train_events, OptimizerState, TrainConfig};

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        hyper: HyperParams {
            base_dim: 8,
            ..HyperParams::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn every_parameter_moves_after_one_step() {
    let config = small_config();
    let events = generate_events(4, &GenConfig::default()).unwrap();
    let batch: Vec<&Event> = events.iter().collect();
    let mut w = init_weights(&config.hyper, 0).unwrap();
    let before = w.clone();
    let (_, grads) = batch_gradients(&w, &batch, &config).unwrap();
    let mut state = OptimizerState::new(&w);
    adam_step(&mut w, &grads, &mut state, config.lr).unwrap();
    for (name, t) in &w.tensors {
        assert_ne!(t, &before.tensors[name], "{name} did not change");
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let events = generate_events(24, &GenConfig::default()).unwrap();
    let (train, val) = events.split_at(20);
    let config = TrainConfig {
        epochs: 3,
        ..small_config()
    };
    let mut seen = Vec::new();
    let a = train_events(train, val, &config, &mut |l| seen.push(l.epoch)).unwrap();
    let b = train_events(train, val, &config, &mut |_| {}).unwrap();
    assert_eq!(seen, vec![1, 2, 3]);
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.history, b.history);
    let first = a.history.first().unwrap().train_total;
    let last = a.history.last().unwrap().train_total;
    assert!(last < first, "{first} -> {last}");
    assert!(a.history.iter().all(|l| l.val_macro_auc.is_some()));
}

#[test]
fn thread_count_does_not_change_training() {
    let events = generate_events(12, &GenConfig::default()).unwrap();
    let config = small_config();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train_events(&events, &[], &config, &mut |_| {}).unwrap())
    };
    assert_eq!(run(1).weights, run(3).weights);
}

/// Reads the answer straight off the labels.
struct Oracle;

impl Predictor for Oracle {
    fn n_classes(&self) -> usize {
        6
    }

    fn predict(&self, event: &Event) -> Result<Prediction, ModelError> {
        let classes = event.sem_labels();
        Ok(Prediction {
            class_probs: classes
                .iter()
                .map(|&c| (0..6).map(|k| f64::from(k == c)).collect())
                .collect(),
            // shifted slots: the metric must not care which slot holds which prong
            slots: event.ins_labels().iter().map(|s| (s + 3) % 8).collect(),
            classes,
            n_view0: event.views[0].len(),
        })
    }
}

/// Scores drawn from a hash of the hit position, ignoring the labels.
struct Noise;

impl Predictor for Noise {
    fn n_classes(&self) -> usize {
        6
    }

    fn predict(&self, event: &Event) -> Result<Prediction, ModelError> {
        let mut probs = Vec::new();
        for (i, _) in event.hits().enumerate() {
            let row: Vec<f64> = (0..6u64)
                .map(|k| {
                    let mut z =
                        event.event_id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((i as u64) << 8 | k);
                    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
                    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
                    ((z ^ (z >> 31)) >> 11) as f64 / (1u64 << 53) as f64 + 1e-3
                })
                .collect();
            let s: f64 = row.iter().sum();
            probs.push(row.into_iter().map(|x| x / s).collect::<Vec<_>>());
        }
        let n = probs.len();
        Ok(Prediction {
            classes: vec![0; n],
            slots: vec![0; n],
            class_probs: probs,
            n_view0: event.views[0].len(),
        })
    }
}

#[test]
fn perfect_predictor_scores_one() {
    let events = generate_events(60, &GenConfig::default()).unwrap();
    let r = evaluate(&events, &Oracle, Vec::new()).unwrap();
    assert_eq!(r.macro_auc, 1.0);
    assert_eq!(r.segmentation_accuracy, 1.0);
    for h in &r.histograms {
        assert_eq!(h.efficiency[19], h.efficiency.iter().sum::<usize>());
        assert_eq!(h.purity[19], h.purity.iter().sum::<usize>());
    }
}

#[test]
fn random_scores_give_chance_auc() {
    let events = generate_events(60, &GenConfig::default()).unwrap();
    let r = evaluate(&events, &Noise, Vec::new()).unwrap();
    assert!(r.n_hits >= 2000, "{} hits", r.n_hits);
    assert!((r.macro_auc - 0.5).abs() <= 0.05, "auc {}", r.macro_auc);
    let again = evaluate(&events, &Noise, Vec::new()).unwrap();
    assert_eq!(
        serde_json::to_string(&r).unwrap(),
        serde_json::to_string(&again).unwrap()
    );
}
