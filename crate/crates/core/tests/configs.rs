use bimodal_core::config::{ConfigSources, RunConfig, RunPhase};

fn resolve(text: &str, phase: RunPhase) -> RunConfig {
    ConfigSources {
        file_text: Some(text.to_string()),
        ..Default::default()
    }
    .resolve(phase)
    .unwrap()
}

#[test]
fn shipped_desk_configs_match_defaults() {
    let mae = resolve(include_str!("../../../configs/desk-mae.toml"), RunPhase::Mae);
    assert_eq!(mae, RunConfig::desk(RunPhase::Mae));
    let mut want = RunConfig::desk(RunPhase::Contrastive);
    want.init_checkpoint = Some("runs/checkpoints/mae_export.ckpt".into());
    let con = resolve(include_str!("../../../configs/desk-contrastive.toml"), RunPhase::Contrastive);
    assert_eq!(con, want);
}

#[test]
fn shipped_full_scale_configs_match_published_values() {
    let mae = resolve(include_str!("../../../configs/full-mae.toml"), RunPhase::Mae);
    let want = RunConfig::full_scale(RunPhase::Mae);
    assert_eq!((mae.vision(), mae.mae()), (want.vision(), want.mae()));
    assert_eq!(mae.steps, None);
    assert_eq!((mae.learning_rate, mae.weight_decay, mae.batch_size), (1.5e-3, 0.5, 40960));
    assert_eq!((mae.warmup_steps, mae.epochs, mae.mask_ratio, mae.decoder_layers), (1000, 3, 0.75, 4));

    let mut want = RunConfig::full_scale(RunPhase::Contrastive);
    want.init_checkpoint = Some("runs/checkpoints/mae_export.ckpt".into());
    let con = resolve(include_str!("../../../configs/full-contrastive.toml"), RunPhase::Contrastive);
    assert_eq!(con, want);
    assert_eq!((con.learning_rate, con.weight_decay, con.batch_size), (1.2e-3, 0.2, 65600));
    assert_eq!((con.warmup_steps, con.epochs, con.number_of_multicrop), (2000, 32, 1));
    assert_eq!((con.vocab_size, con.max_len), (98_816, 76));
}

#[test]
fn epoch_override_replaces_default_step_budget() {
    let c = ConfigSources::default()
        .with_overrides(&["epochs=2".into()])
        .resolve(RunPhase::Mae)
        .unwrap();
    assert_eq!((c.epochs, c.steps), (2, None));
    let c = ConfigSources::default()
        .with_overrides(&["epochs=2".into(), "steps=7".into()])
        .resolve(RunPhase::Mae)
        .unwrap();
    assert_eq!(c.steps, Some(7));
}
