use layerhet::checkpoint::{Checkpoint, OptimState};
use layerhet::codec::Codec;
use layerhet::data::{collate, gen_gui_dataset, gen_robot_dataset, mix_and_resample, TrainingStream, UnifiedSample};
use layerhet::env::{evaluate, robot_eval_env, ScriptedPolicy};
use layerhet::model::{param_specs, LayerHetModel, ModelConfig, TaskLabel, Topology};
use layerhet::scene::WorldParams;
use layerhet::train::{AdamW, TrainConfig, Trainer};

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        share_threshold: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 64,
        vocab_size: 256,
        patch_size: 8,
        image_side: 32,
    }
}

fn codec() -> Codec {
    Codec::new(256, 64).unwrap()
}

fn gui(n: usize) -> Vec<UnifiedSample> {
    gen_gui_dataset(0, n, &WorldParams::default()).unwrap()
}

fn trainer(model: LayerHetModel, data: Vec<UnifiedSample>, lr: f64, steps: u64) -> Trainer {
    let cfg = TrainConfig {
        steps,
        batch_size: 4,
        learning_rate: lr,
        ..TrainConfig::default()
    };
    Trainer::new(cfg, model, TrainingStream::single(data, 1).unwrap(), codec()).unwrap()
}

#[test]
fn adamw_matches_f64_reference() {
    let mut model = LayerHetModel::new(config(), Topology::Dense, 1).unwrap();
    let batch = collate(&gui(4).iter().collect::<Vec<_>>(), &codec(), config().n_patches()).unwrap();
    let adam = AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
    };
    let mut state = OptimState::zeros(model.params());
    let mut reference: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| {
            let n = p.value.numel();
            (p.value.data().iter().map(|&x| x as f64).collect(), vec![0.0; n], vec![0.0; n])
        })
        .collect();
    let lrs = [1e-3, 5e-4, 2e-3];
    for (t, &lr) in lrs.iter().enumerate() {
        model.compute_gradients(&batch).unwrap();
        for (p, (w, m, v)) in model.params().iter().zip(reference.iter_mut()) {
            let t = (t + 1) as i32;
            let decay = if p.value.shape().len() >= 2 { 0.01 } else { 0.0 };
            for j in 0..w.len() {
                let g = p.grad[j] as f64;
                m[j] = 0.9 * m[j] + 0.1 * g;
                v[j] = 0.999 * v[j] + 0.001 * g * g;
                let mh = m[j] / (1.0 - 0.9f64.powi(t));
                let vh = v[j] / (1.0 - 0.999f64.powi(t));
                w[j] -= lr * decay * w[j];
                w[j] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        adam.update(model.params_mut(), &mut state, lr);
    }
    let mut worst = 0.0f64;
    for (p, (w, _, _)) in model.params().iter().zip(&reference) {
        for (&a, &b) in p.value.data().iter().zip(w) {
            worst = worst.max((a as f64 - b).abs());
        }
    }
    assert!(worst < 1e-6, "max deviation {worst}");
}

#[test]
fn masked_targets_do_not_affect_gradients() {
    let cfg = config();
    let mut model = LayerHetModel::new(cfg.clone(), Topology::LayerHet, 2).unwrap();
    let batch = collate(&gui(3).iter().collect::<Vec<_>>(), &codec(), cfg.n_patches()).unwrap();
    model.compute_gradients(&batch).unwrap();
    let g1: Vec<Vec<f32>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let mut altered = batch.clone();
    for it in &mut altered.items {
        for (t, &m) in it.targets.iter_mut().zip(&it.mask) {
            if !m {
                *t = (*t + 17) % 256;
            }
        }
    }
    model.compute_gradients(&altered).unwrap();
    for (p, g) in model.params().iter().zip(&g1) {
        assert!(p.grad.iter().zip(g).all(|(a, b)| a.to_bits() == b.to_bits()), "{}", p.name);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let model = LayerHetModel::new(config(), Topology::LayerHet, 3).unwrap();
    let before = Checkpoint::from_model(&model, 0, String::new(), None).to_bytes();
    let mut t = trainer(model, gui(16), 0.0, 5);
    for _ in 0..5 {
        t.train_step().unwrap();
    }
    let after = Checkpoint::from_model(&t.model, 0, String::new(), None).to_bytes();
    assert_eq!(before, after);
}

#[test]
fn single_sample_overfits() {
    let model = LayerHetModel::new(config(), Topology::LayerHet, 4).unwrap();
    let data = gui(1);
    let mut t = trainer(model, data.clone(), 1e-2, 200);
    let mut last = f32::INFINITY;
    for _ in 0..200 {
        last = t.train_step().unwrap();
    }
    assert!(last < 0.05, "final loss {last}");
    let c = codec();
    let s = &data[0];
    let got = t.model.generate_action(&s.image, &s.prompt_tokens(&c).unwrap(), s.label, &c).unwrap();
    assert_eq!(got, s.action);
}

#[test]
fn training_is_deterministic() {
    let world = WorldParams::default();
    let g = gen_gui_dataset(1, 20, &world).unwrap();
    let r = gen_robot_dataset(1, 3, &world).unwrap();
    let run = || {
        let model = LayerHetModel::new(config(), Topology::LayerHet, 5).unwrap();
        let cfg = TrainConfig {
            steps: 8,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(cfg, model, mix_and_resample(&g, &r, 5, 3).unwrap(), codec()).unwrap();
        for _ in 0..8 {
            t.train_step().unwrap();
        }
        (t.checkpoint().to_bytes(), t.log_csv())
    };
    assert_eq!(run(), run());
}

#[test]
fn run_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let model = LayerHetModel::new(config(), Topology::Dense, 6).unwrap();
    let cfg = TrainConfig {
        steps: 4,
        batch_size: 2,
        checkpoint_every: 2,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, model, TrainingStream::single(gui(8), 0).unwrap(), codec()).unwrap();
    t.run(Some(dir.path())).unwrap();
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let fin = Checkpoint::load(&dir.path().join("final.bin")).unwrap();
    assert_eq!(fin.step, 4);
    assert!(dir.path().join("ckpt_2.bin").exists());
    let resumed = fin.model().unwrap();
    assert_eq!(
        Checkpoint::from_model(&resumed, 4, fin.base_hash.clone(), fin.optim.clone()).params,
        fin.params
    );
}

#[test]
fn checkpoint_round_trip_preserves_forward_bits() {
    let dir = tempfile::tempdir().unwrap();
    let model = LayerHetModel::new(config(), Topology::LayerHetHard, 7).unwrap();
    let path = dir.path().join("m.bin");
    Checkpoint::from_model(&model, 0, String::new(), None).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().model().unwrap();
    let s = &gui(1)[0];
    let c = codec();
    let tokens = s.prompt_tokens(&c).unwrap();
    let input = layerhet::model::SeqInput {
        image: &s.image,
        tokens: &tokens,
    };
    for label in TaskLabel::ALL {
        let (a, b) = (model.forward(input, label).unwrap(), back.forward(input, label).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn layer_het_adds_exactly_the_separated_tensors() {
    let cfg = config();
    let dense = param_specs(&cfg, Topology::Dense);
    let het = param_specs(&cfg, Topology::LayerHet);
    let split = cfg.n_layers - cfg.share_threshold;
    // 12 tensors per extra block copy, plus a final norm pair and a head.
    assert_eq!(het.len() - dense.len(), split * 12 + 3);
    let count = |s: &[(String, Vec<usize>)]| s.iter().map(|(_, sh)| sh.iter().product::<usize>()).sum::<usize>();
    assert_eq!(count(&het), cfg.param_count(Topology::LayerHet));
    assert_eq!(count(&dense), cfg.param_count(Topology::Dense));
    assert_eq!(
        count(&het) - count(&dense),
        split * cfg.block_param_count() + 2 * cfg.d_model + cfg.vocab_size * cfg.d_model
    );
}

#[test]
fn expert_reaches_the_goal() {
    let world = WorldParams::default();
    let mut policy = ScriptedPolicy { world: world.clone() };
    let report = evaluate(&mut policy, TaskLabel::Robot, 100, 3, &world).unwrap();
    assert_eq!(report.success_rate, 1.0);
    let env = robot_eval_env(3, 0, &world);
    assert!(env.scene().distance() >= world.robot_min_start_dist);
}
