use layerhet::codec::Codec;
use layerhet::data::{collate, gen_gui_dataset, gen_robot_dataset};
use layerhet::model::{branch_of, Batch, LayerHetModel, ModelConfig, Topology};
use layerhet::scene::WorldParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Directional derivative of every tensor along a random unit direction,
/// against a central difference.
#[test]
fn directional_derivatives_match() {
    let cfg = ModelConfig {
        n_layers: 3,
        share_threshold: 1,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 64,
        vocab_size: 256,
        patch_size: 8,
        image_side: 32,
    };
    let world = WorldParams::default();
    let codec = Codec::new(256, 64).unwrap();
    let mut model = LayerHetModel::new(cfg.clone(), Topology::LayerHet, 2).unwrap();
    let gui = gen_gui_dataset(1, 2, &world).unwrap();
    let rob = gen_robot_dataset(1, 1, &world).unwrap();
    let gb = collate(&gui.iter().collect::<Vec<_>>(), &codec, cfg.n_patches()).unwrap();
    let rb = collate(&rob[..2].iter().collect::<Vec<_>>(), &codec, cfg.n_patches()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for name in names {
        let batch: &Batch = if branch_of(&name) == Some("rob") { &rb } else { &gb };
        model.compute_gradients(batch).unwrap();
        let p = model.params().by_name(&name).unwrap();
        let orig = p.value.data().to_vec();
        let mut u: Vec<f64> = (0..orig.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= norm);
        let analytic: f64 = p.grad.iter().zip(&u).map(|(&g, &d)| g as f64 * d).sum();
        let h = 1e-3;
        let mut at = |s: f64| {
            let w = model.params_mut().by_name_mut(&name).unwrap().value.data_mut();
            for ((w, &o), &d) in w.iter_mut().zip(&orig).zip(&u) {
                *w = (o as f64 + s * d) as f32;
            }
            model.batch_loss(batch).unwrap() as f64
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        at(0.0);
        let err = (analytic - numeric).abs();
        assert!(
            err <= 1e-2 * analytic.abs().max(numeric.abs()) + 1e-3,
            "{name}: analytic {analytic:e} numeric {numeric:e}"
        );
    }
}
