use proptest::prelude::*;

use scd_core::config::TrainConfig;
use scd_core::data::{generate_dataset, stack_images, SceneSpec};
use scd_core::losses::{scd_loss, LossConfig, Targets};
use scd_core::model::{ModelConfig, ScdNet};
use scd_core::{Graph, Mode};

fn small(flags: (bool, bool, bool)) -> ModelConfig {
    ModelConfig {
        channels_shallow: 8,
        channels_deep: 16,
        channels_msa: 8,
        decoder_width: 8,
        depths: [1, 1, 1, 1],
        use_sam_branch: flags.0,
        use_gspm: flags.1,
        use_btam: flags.2,
        ..ModelConfig::default()
    }
}

#[test]
fn deep_gate_receives_gradient_and_prior_does_not() {
    let (net, store) = ScdNet::new::<f32>(small((true, true, true))).unwrap();
    let samples = generate_dataset(&SceneSpec { height: 32, width: 32, ..SceneSpec::default() }, 2).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let targets = Targets::from_samples(&refs).unwrap();
    let (a, b) = stack_images(&refs).unwrap();
    let g = Graph::new(&store, Mode::Train);
    let preds = net.forward(&g, g.input(a), g.input(b)).unwrap();
    let (loss, _) = scd_loss(&g, &preds, &targets, &LossConfig::default()).unwrap();
    let grads = g.backward(loss);
    let beta = store.find("fusion.dfg.beta_raw").unwrap();
    assert!(grads.param(beta).unwrap().data()[0] != 0.0);
    let prior: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("encoder.prior.")).collect();
    assert!(!prior.is_empty());
    assert!(prior.iter().all(|&id| grads.param(id).is_none()));
}

#[test]
fn every_ablation_configuration_is_well_formed() {
    let samples = generate_dataset(&SceneSpec { height: 32, width: 32, seed: 4, ..SceneSpec::default() }, 2).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let (a, b) = stack_images(&refs).unwrap();
    for flags in scd_core::train::ABLATION_ROWS {
        let (net, store) = ScdNet::new::<f32>(small(flags)).unwrap();
        assert_eq!(net.encoder.prior.is_some(), flags.0);
        let g = Graph::inference(&store);
        let p = net.forward(&g, g.input(a.clone()), g.input(b.clone())).unwrap();
        assert_eq!(g.shape(p.sem1_logits), [2, 5, 32, 32]);
        assert_eq!(g.shape(p.change_logits), [2, 1, 32, 32]);
        assert_eq!(g.shape(p.boundary_logits), [2, 1, 32, 32]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_text_round_trip(
        epochs in 1usize..50,
        batch in 1usize..32,
        lr in 1e-5f64..1.0,
        alpha in 0.0f64..=1.0,
        sam in any::<bool>(),
        btam in any::<bool>(),
        augment in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let text = format!(
            "epochs = {epochs}\nbatch_size = {batch}\nlearning_rate = {lr}\nalpha = {alpha}\nuse_sam_branch = {sam}\nuse_gspm = {sam}\nuse_btam = {btam}\naugment = {augment}\nseed = {seed}\n"
        );
        let cfg = TrainConfig::parse(&text).unwrap();
        prop_assert_eq!(cfg.optimizer.lr, lr);
        prop_assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
