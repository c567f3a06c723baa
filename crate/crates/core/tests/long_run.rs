use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sslab_core::data::{synth_dataset, SynthOptions};
use sslab_core::model::Model;
use sslab_core::ssm::{HiddenState, ModelConfig, SsmModel};
use sslab_core::tokenize::{positions_per_axis, sample_patches};
use sslab_core::train::{batch_seed, train_step, TrainConfig};
use sslab_core::optim::Adam;
use sslab_core::Error;

#[test]
fn state_stays_bounded_over_65536_random_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = SsmModel::init(ModelConfig::desk(), &mut rng).unwrap();
    let mut plan = m.step_plan();
    let mut state = HiddenState::zeros(&m.config);
    let mut peak = 0.0f64;
    for t in 0..65_536 {
        let x: Vec<f64> = (0..m.config.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = m.step(&mut plan, &x, &mut state, None).unwrap();
        assert!(y.iter().all(|v| v.is_finite()), "non-finite output at t={t}");
        if t % 4096 == 4095 {
            let h = state.blocks.iter().flat_map(|b| b.data()).fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(h.is_finite());
            peak = peak.max(h);
        }
    }
    // Decay keeps the state from drifting; a loose ceiling catches blow-up.
    assert!(peak < 1e3, "state magnitude {peak}");
}

#[test]
fn non_finite_parameters_abort_with_the_batch_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = ModelConfig {
        n_blocks: 1,
        d_model: 8,
        d_state: 2,
        ..ModelConfig::desk()
    };
    let mut m = Model::Ssm(SsmModel::init(cfg, &mut rng).unwrap());
    for (w, _) in m.params_mut().unwrap().values_and_grads_mut() {
        w.data_mut()[0] = f64::NAN;
    }
    let imgs = synth_dataset(&mut ChaCha8Rng::seed_from_u64(3), 4, &SynthOptions { side: 16, ..Default::default() });
    let tc = TrainConfig { t_i_max: 8, t_q: 8, batch: 2, ..TrainConfig::default() };
    let mut opt = Adam::new(tc.adam, m.params().unwrap());
    let err = train_step(&mut m, &mut opt, &tc, &imgs, 5).unwrap_err();
    let seed = format!("{:#018x}", batch_seed(tc.seed, 5));
    match err {
        Error::Numeric(msg) => assert!(msg.contains(&seed), "{msg}"),
        e => panic!("expected numeric error, got {e}"),
    }
}

#[test]
fn sampling_reaches_every_window() {
    let imgs = synth_dataset(&mut ChaCha8Rng::seed_from_u64(0), 1, &SynthOptions { side: 8, ..Default::default() });
    let n = positions_per_axis(8);
    let mut seen = vec![false; n * n];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for p in sample_patches(&imgs[0], 2000, &mut rng).unwrap() {
        seen[p.row0 * n + p.col0] = true;
        assert_eq!(p.pixels[0], imgs[0].get(p.row0, p.col0));
    }
    assert!(seen.iter().all(|&s| s));
}
