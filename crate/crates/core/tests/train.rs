mod common;

use geopeft::backbone::BackboneConfig;
use geopeft::data::synth::SyntheticConfig;
use geopeft::data::Split;
use geopeft::decoder::{DecoderConfig, DecoderKind};
use geopeft::diagnostics::parameter_memory_report;
use geopeft::model::{ModelConfig, PeftConfig};
use geopeft::params::ParamGroup;
use geopeft::peft::FreezePolicy;
use geopeft::train::experiments::{argmax_first, lr_search, mean_std, run_replicates, sample_learning_rates, welch_t, LrSearchConfig};
use geopeft::train::schedule::{simulate, PlateauConfig};
use geopeft::train::{build_model, history_csv, train, PreparedData, RunConfig, TrainError};

/// 32×32 tiles and a handful of samples keep each run well under a second.
fn small(policy: FreezePolicy, seed: u64, epochs: usize) -> (RunConfig, PreparedData) {
    small_with(policy, seed, epochs, SyntheticConfig::default())
}

fn small_with(policy: FreezePolicy, seed: u64, epochs: usize, base: SyntheticConfig) -> (RunConfig, PreparedData) {
    let mut cfg = common::run_config(policy, seed, epochs);
    cfg.model.backbone.image_size = (32, 32);
    let synth = SyntheticConfig { samples_per_region: 6, extent: (32, 32), seed: 3, ..base };
    let gen = geopeft::data::synth::generate(&synth).unwrap();
    (cfg, common::prepared(&synth, &gen))
}

#[test]
fn plateau_and_early_stop_trace() {
    // monotone degradation: best at epoch 0
    let metrics: Vec<f64> = (0..30).map(|i| 90.0 - i as f64).collect();
    let (lrs, stop) = simulate(1.0, PlateauConfig::default(), 15, &metrics);
    assert_eq!(stop, Some(15));
    let mut expected = vec![1.0; 5];
    expected.extend([0.5; 4]);
    expected.extend([0.25; 4]);
    expected.extend([0.125; 3]);
    assert_eq!(lrs, expected);

    // equal values are not improvements; a real improvement resets both counters
    let m = [1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0];
    let (lrs, stop) = simulate(0.1, PlateauConfig::default(), 15, &m);
    assert_eq!(stop, None);
    assert_eq!(lrs, vec![0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.05]);
}

#[test]
fn frozen_parameters_stay_bitwise_and_trainables_move() {
    for policy in [FreezePolicy::LinearProbe, FreezePolicy::Lora] {
        let (cfg, data) = small(policy, 1, 2);
        let (_, fresh) = build_model(&cfg).unwrap();
        let out = train(&cfg, &data).unwrap();
        let mut moved = false;
        for (id, p) in fresh.iter() {
            let after = out.store.value(id);
            if p.buffer {
                continue;
            }
            if p.trainable {
                moved |= after.data() != p.value.data();
            } else {
                assert!(
                    after.data().iter().zip(p.value.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
                    "{policy}: frozen {} changed",
                    p.name
                );
            }
        }
        assert!(moved, "{policy}: nothing trained");
    }
}

#[test]
fn runs_are_deterministic_per_seed() {
    let (cfg, data) = small(FreezePolicy::Lora, 7, 2);
    let a = train(&cfg, &data).unwrap().result;
    let b = train(&cfg, &data).unwrap().result;
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert_eq!(a.metrics[&Split::Test].confusion, b.metrics[&Split::Test].confusion);
    let mut other = cfg.clone();
    other.seed = 8;
    let c = train(&other, &data).unwrap().result;
    assert_ne!(history_csv(&a.history), history_csv(&c.history));
}

#[test]
fn non_finite_input_aborts_with_location() {
    let (mut cfg, mut data) = small(FreezePolicy::FullFineTune, 0, 1);
    cfg.batch_size = 2;
    let train_set = data.splits.get_mut(&Split::Train).unwrap();
    for s in train_set.iter_mut() {
        s.image[0] = f32::NAN;
    }
    match train(&cfg, &data) {
        Err(TrainError::NonFinite { epoch: 0, batch: 0, loss }) => assert!(loss.is_nan()),
        other => panic!("expected a non-finite error, got {:?}", other.map(|o| o.result.history)),
    }
}

#[test]
fn configuration_errors_are_reported() {
    let (cfg, data) = small(FreezePolicy::LinearProbe, 0, 1);
    let mut bad = cfg.clone();
    bad.model.decoder.num_classes = 3;
    assert!(matches!(train(&bad, &data), Err(TrainError::Config(_))));
    let mut bad = cfg.clone();
    bad.lr = 0.0;
    assert!(train(&bad, &data).is_err());
    let mut bad = cfg.clone();
    bad.input_bands = Some(vec!["B99".into()]);
    assert!(matches!(train(&bad, &data), Err(TrainError::Model(_))));
    // data prepared for all bands does not fit a band-subset run
    let mut bad = cfg.clone();
    bad.input_bands = Some(cfg.model.backbone.band_ids[..2].to_vec());
    assert!(matches!(train(&bad, &data), Err(TrainError::Config(_))));
    let mut empty = data.clone();
    empty.splits.remove(&Split::Val);
    assert!(matches!(train(&cfg, &empty), Err(TrainError::EmptySplit(Split::Val))));
}

#[test]
fn lr_search_samples_in_range_and_breaks_ties_first() {
    let s = LrSearchConfig::default();
    let lrs = sample_learning_rates(&s, 0);
    assert_eq!(lrs.len(), 16);
    assert!(lrs.iter().all(|&x| (1e-5..=1e-2).contains(&x)));
    assert_eq!(lrs, sample_learning_rates(&s, 0));
    assert_eq!(argmax_first(&[0.3, 0.9, 0.9, 0.1]), Some(1));
    assert_eq!(argmax_first(&[]), None);

    let (cfg, data) = small(FreezePolicy::LinearProbe, 0, 1);
    let r = lr_search(&cfg, &data, &LrSearchConfig { trials: 3, epochs: 1, ..s }).unwrap();
    assert_eq!(r.trials.len(), 3);
    let scores: Vec<f64> = r.trials.iter().map(|t| t.val_miou).collect();
    assert_eq!(Some(r.best_index), argmax_first(&scores));
    assert_eq!(r.best_lr, r.trials[r.best_index].lr);
}

#[test]
fn replicates_with_repeated_seed_have_zero_spread() {
    let (cfg, data) = small(FreezePolicy::LinearProbe, 0, 1);
    let rep = run_replicates(&cfg, &data, &[5, 5]).unwrap();
    let m = rep.miou(Split::Test).unwrap();
    assert_eq!((m.n, m.std), (2, 0.0));
    assert!(rep.to_csv().starts_with("metric,mean,std,n\n"));
    assert!(run_replicates(&cfg, &data, &[]).is_err());
}

#[test]
fn statistics_helpers() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [2.0, 4.0, 6.0, 8.0];
    // hand computation: means 2.5 and 5, variances 5/3 and 20/3
    let t = welch_t(&a, &b).unwrap();
    let expected = (2.5 - 5.0) / ((5.0 / 3.0) / 4.0 + (20.0 / 3.0) / 4.0f64).sqrt();
    assert!((t - expected).abs() < 1e-12);
    assert_eq!(welch_t(&[1.0], &b), None);
    assert_eq!(mean_std(&[3.0]).unwrap().std, 0.0);
}

fn report(backbone: BackboneConfig, peft: PeftConfig, policy: FreezePolicy) -> geopeft::diagnostics::MemoryReport {
    let cfg = ModelConfig { backbone, peft, policy, decoder: DecoderConfig::new(DecoderKind::Linear, 2) };
    parameter_memory_report(&cfg, 2).unwrap()
}

#[test]
fn memory_report_counts_attachments_and_optimizer_state() {
    let vpt = report(BackboneConfig::vit_b16(), PeftConfig::for_policy(FreezePolicy::Vpt), FreezePolicy::Vpt);
    assert_eq!(vpt.peft_params, 921_600);
    let lora = report(BackboneConfig::vit_l16(), PeftConfig::for_policy(FreezePolicy::Lora), FreezePolicy::Lora);
    assert_eq!(lora.peft_params, 5_505_024);
    assert_eq!(lora.encoder_params, 304_083_968);
    assert_eq!(lora.peft_percent_of_encoder, 1.81);

    let tiny = |p| report(common::tiny_backbone(&geopeft::backbone::PRITHVI_BANDS), PeftConfig::for_policy(p), p);
    let lp = tiny(FreezePolicy::LinearProbe);
    let ft = tiny(FreezePolicy::FullFineTune);
    // two moments per trainable scalar
    assert_eq!(ft.optimizer_state_elements, 2 * ft.trainable_params);
    assert!(lp.optimizer_state_elements < ft.optimizer_state_elements);
    assert_eq!(lp.trainable_params, lp.decoder_params);
    assert!(lp.activation_elements > 0);
}

#[test]
fn init_checkpoint_round_trips_through_training() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = small(FreezePolicy::Lora, 2, 1);
    let out = train(&cfg, &data).unwrap();
    geopeft::checkpoint::save(&out.store, dir.path(), None).unwrap();
    let mut again = cfg.clone();
    again.seed = 99;
    again.init_checkpoint = Some(dir.path().to_path_buf());
    let (_, store) = build_model(&again).unwrap();
    for (id, p) in out.store.iter() {
        assert_eq!(store.value(id).data(), p.value.data(), "{}", p.name);
    }
    assert!(store.has_group(ParamGroup::Lora));
}

#[test]
fn train_loss_falls_for_every_policy() {
    for policy in common::POLICIES {
        let (mut cfg, data) = small(policy, 0, 4);
        cfg.batch_size = 4;
        let h = train(&cfg, &data).unwrap().result.history;
        assert!(h.last().unwrap().train_loss < h[0].train_loss, "{policy}: {:?}", h.iter().map(|r| r.train_loss).collect::<Vec<_>>());
    }
}

#[test]
fn noiseless_train_split_is_fit() {
    let base = SyntheticConfig { noise: 0.0, ..Default::default() };
    let (mut cfg, data) = small_with(FreezePolicy::FullFineTune, 0, 30, base);
    cfg.batch_size = 2;
    let r = train(&cfg, &data).unwrap().result;
    assert!(r.miou(Split::Train).unwrap() >= 99.0, "{:?}", r.miou(Split::Train));
}

#[test]
fn single_trial_search_returns_its_rate() {
    let (cfg, data) = small(FreezePolicy::LinearProbe, 4, 1);
    let s = LrSearchConfig { trials: 1, epochs: 1, ..Default::default() };
    let r = lr_search(&cfg, &data, &s).unwrap();
    assert_eq!(r.best_lr, sample_learning_rates(&s, 4)[0]);
    assert_eq!(r, lr_search(&cfg, &data, &s).unwrap());
}

#[test]
fn search_is_competitive_with_a_grid() {
    let (mut cfg, data) = small(FreezePolicy::Lora, 0, 10);
    cfg.batch_size = 4;
    let search = LrSearchConfig { epochs: 10, ..Default::default() };
    let found = lr_search(&cfg, &data, &search).unwrap();
    let best_found = found.trials[found.best_index].val_miou;
    let grid = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2].map(|lr| {
        let mut c = cfg.clone();
        c.lr = lr;
        train(&c, &data).unwrap().result.best_val_miou
    });
    let best_grid = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(best_found >= best_grid - 2.0, "search {best_found} vs grid {grid:?}");
}
