use slidedistill::config::Config;
use slidedistill::distill::{teacher_from_checkpoint, CheckpointBlob, Trainer};
use slidedistill::harness::{extract_store, pretrain_and_probe, smoke_config};
use slidedistill::pyramid::{generate_synthetic_pyramid, Corpus, SyntheticSpec};

fn small_config() -> Config {
    let mut c = smoke_config();
    c.data.patch_size = 32;
    c.data.coarse_size = Some(32);
    c.views.global_size = 16;
    c.views.local_size = 8;
    c.model.image_size = 16;
    c.model.patch_size = 4;
    c.model.embed_dim = 16;
    c.model.depth = 1;
    c.model.head_hidden = 16;
    c.model.head_bottleneck = 8;
    c.model.out_dim = 16;
    c.model.projector_hidden = 16;
    c.train.batch_size = 4;
    c.train.epochs = 2;
    c.train.warmup_epochs = 1;
    c.train.steps_per_epoch = 2;
    c.probe.epochs = 50;
    c
}

fn corpus(dir: &std::path::Path) -> Corpus {
    let spec = SyntheticSpec {
        num_slides: 4,
        level0_size: 128,
        tile_size: 32,
        ..Default::default()
    };
    generate_synthetic_pyramid(&spec, dir).unwrap();
    Corpus::load(dir, None).unwrap()
}

#[test]
fn pretrain_then_probe_on_a_small_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let cfg = small_config();
    assert!(cfg.model.head_batch_norm);
    let out = pretrain_and_probe(&cfg, &corpus, 3, 0.5).unwrap();
    assert_eq!(out.seed, 3);
    assert_eq!(out.steps, cfg.train.total_steps());
    assert!(out.final_loss.is_finite() && out.final_loss >= 0.0);
    for m in [&out.pretrained, &out.random_init] {
        assert!((0.0..=1.0).contains(&m.accuracy));
        assert_eq!(m.n_test + m.n_train, 4 * 16);
    }
}

#[test]
fn checkpointed_teacher_extracts_the_same_features() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let cfg = small_config();
    let mut trainer = Trainer::new(&cfg).unwrap();
    let total = trainer.total_steps();
    trainer.fit(&corpus, total, false, |_| Ok(())).unwrap();
    let blob = CheckpointBlob::decode(&trainer.checkpoint().unwrap().encode()).unwrap();
    let teacher = teacher_from_checkpoint(&cfg.model, &blob).unwrap();
    let direct = extract_store(&cfg, &trainer.pair.teacher, &corpus).unwrap();
    let restored = extract_store(&cfg, &teacher, &corpus).unwrap();
    assert_eq!(direct.to_bytes(), restored.to_bytes());
    let resumed = Trainer::resume(&cfg, &blob).unwrap();
    assert_eq!(resumed.checkpoint().unwrap().encode(), blob.encode());
}
