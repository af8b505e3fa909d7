use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::model::{init_pair, EncoderConfig, Precision};
use crate::pyramid::{generate_synthetic_pyramid, Corpus, SyntheticSpec};

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|j| rng.sample::<f64, _>(StandardNormal) + if j == 0 { shift } else { 0.0 }).collect())
        .collect()
}

fn no_early_stop() -> ProbeConfig {
    ProbeConfig {
        val_fraction: 0.0,
        epochs: 300,
        ..Default::default()
    }
}

#[test]
fn separable_features_are_classified_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut x = gaussian_rows(&mut rng, 40, 5, -4.0);
    x.extend(gaussian_rows(&mut rng, 40, 5, 4.0));
    for r in x.iter_mut() {
        r[0] += r[0].signum();
    }
    let y: Vec<usize> = (0..80).map(|i| usize::from(i >= 40)).collect();
    let (_, m) = linear_probe(&x, &y, &x, &y, 2, &no_early_stop()).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(m.auc, 1.0);
}

#[test]
fn shuffled_labels_sit_at_chance() {
    let mut aucs = Vec::new();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = gaussian_rows(&mut rng, 200, 6, 0.0);
        let mut y: Vec<usize> = (0..200).map(|i| i % 2).collect();
        y.shuffle(&mut rng);
        let (tx, vx) = x.split_at(100);
        let (ty, vy) = y.split_at(100);
        let cfg = ProbeConfig { seed, ..Default::default() };
        aucs.push(linear_probe(tx, ty, vx, vy, 2, &cfg).unwrap().1.auc);
    }
    let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    assert!((mean - 0.5).abs() <= 0.1, "mean AUC {mean}");
}

#[test]
fn duplicated_training_rows_leave_decision_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut x = gaussian_rows(&mut rng, 30, 4, -0.5);
    x.extend(gaussian_rows(&mut rng, 30, 4, 0.5));
    let y: Vec<usize> = (0..60).map(|i| usize::from(i >= 30)).collect();
    let (a, _) = fit_logistic(&x, &y, 2, &no_early_stop()).unwrap();
    let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
    let y2: Vec<usize> = y.iter().chain(&y).copied().collect();
    let (b, _) = fit_logistic(&x2, &y2, 2, &no_early_stop()).unwrap();
    for r in gaussian_rows(&mut rng, 20, 4, 0.0) {
        for (p, q) in a.logits(&r).iter().zip(b.logits(&r)) {
            assert!((p - q).abs() <= 1e-6);
        }
    }
}

#[test]
fn probe_rejects_single_class() {
    let x = vec![vec![0.0, 1.0]; 4];
    assert!(fit_logistic(&x, &[1, 1, 1, 1], 2, &no_early_stop()).is_err());
    assert!(fit_logistic(&x, &[0, 1, 0, 1], 1, &no_early_stop()).is_err());
}

#[test]
fn early_stopping_stops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = gaussian_rows(&mut rng, 100, 30, 0.0);
    let y: Vec<usize> = (0..100).map(|_| rng.gen_range(0..2)).collect();
    let cfg = ProbeConfig {
        epochs: 5000,
        val_fraction: 0.3,
        patience: 10,
        ..Default::default()
    };
    let (_, epochs) = fit_logistic(&x, &y, 2, &cfg).unwrap();
    assert!(epochs < 5000);
}

fn mil_model(dim: usize) -> GatedAttention {
    let st = Standardizer {
        mean: vec![0.0; dim],
        scale: vec![1.0; dim],
    };
    GatedAttention::new(dim, 6, 2, st, 3).unwrap()
}

#[test]
fn single_instance_gets_full_weight() {
    let m = mil_model(4);
    let inst = vec![0.3, -1.2, 0.7, 2.0];
    let p = m.pool(&[inst.clone()]).unwrap();
    assert_eq!(p.weights, vec![1.0]);
    assert_eq!(p.feature, inst);
}

#[test]
fn identical_instances_get_uniform_weights() {
    let m = mil_model(3);
    let p = m.pool(&vec![vec![0.5, 0.1, -0.4]; 5]).unwrap();
    assert!(p.weights.iter().all(|&w| w == 0.2));
}

#[test]
fn bag_score_ignores_instance_order() {
    let m = mil_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut bag = gaussian_rows(&mut rng, 9, 4, 0.0);
    let a = m.bag_logits(&bag).unwrap();
    for _ in 0..10 {
        bag.shuffle(&mut rng);
        assert_eq!(m.bag_logits(&bag).unwrap(), a);
    }
    let doubled: Vec<Vec<f64>> = bag.iter().chain(&bag).cloned().collect();
    for (x, y) in a.iter().zip(m.bag_logits(&doubled).unwrap()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(m.bag_logits(&[]).is_err());
}

fn toy_bags(rng: &mut ChaCha8Rng, n_bags: usize) -> (FeatureStore, Vec<(String, usize)>) {
    let mut store = FeatureStore::new(4);
    let mut labels = Vec::new();
    for b in 0..n_bags {
        let class = b % 2;
        let id = format!("bag{b}");
        for k in 0..6 {
            let mut r: Vec<f32> = (0..4).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            // Positive bags hold a couple of shifted instances.
            if class == 1 && k < 2 {
                r[1] += 4.0;
            }
            store
                .append(
                    &r,
                    RowSource {
                        source_id: id.clone(),
                        level: 0,
                        x: k,
                        y: 0,
                    },
                )
                .unwrap();
        }
        labels.push((id, class));
    }
    (store, labels)
}

#[test]
fn attention_mil_learns_witness_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (store, labels) = toy_bags(&mut rng, 100);
    let bags = BagDataset::from_store(&store, &labels).unwrap();
    assert_eq!(bags.len(), 100);
    let train = bags.subset(&(0..70).collect::<Vec<_>>());
    let test = bags.subset(&(70..100).collect::<Vec<_>>());
    let cfg = ProbeConfig {
        epochs: 100,
        mil_lr: 0.01,
        ..Default::default()
    };
    let (_, m) = attention_mil(&store, &train, &test, 2, &cfg).unwrap();
    assert!(m.accuracy >= 0.9, "{m:?}");
}

#[test]
fn bag_dataset_validation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (store, labels) = toy_bags(&mut rng, 2);
    let mut bags = BagDataset::from_store(&store, &labels).unwrap();
    assert!(bags.validate(store.len()).is_ok());
    bags.bags[0].clear();
    assert!(bags.validate(store.len()).is_err());
    assert!(BagDataset::from_store(&store, &labels[..1]).is_err());
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        variant: "toy".into(),
        image_size: 16,
        patch_size: 8,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        head_hidden: 8,
        head_bottleneck: 4,
        out_dim: 4,
        projector_hidden: 8,
        head_batch_norm: false,
        precision: Precision::F32,
    }
}

fn tiny_corpus(dir: &std::path::Path) -> Corpus {
    let spec = SyntheticSpec {
        num_slides: 3,
        level0_size: 64,
        tile_size: 16,
        ..Default::default()
    };
    let manifest = generate_synthetic_pyramid(&spec, dir).unwrap();
    assert_eq!(manifest.slides.len(), 3);
    Corpus::load(dir, None).unwrap()
}

#[test]
fn extraction_covers_every_patch_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let cfg = tiny_encoder();
    let params = init_pair(&cfg, 0).unwrap().teacher;
    let mut a = FeatureStore::new(8);
    let s = extract_features(&cfg, &params, &corpus, 0, 32, 1, &mut a).unwrap();
    assert_eq!(s.row_count, 3 * 4);
    assert_eq!(s.dim, 8);
    assert_eq!(a.source(5).source_id, "slide_0001");
    assert_eq!((a.source(5).x, a.source(5).y), (32, 0));
    let mut b = FeatureStore::new(8);
    extract_features(&cfg, &params, &corpus, 0, 32, 3, &mut b).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let mut wrong = FeatureStore::new(5);
    assert!(extract_features(&cfg, &params, &corpus, 0, 32, 1, &mut wrong).is_err());
}

#[test]
fn slide_split_keeps_slides_whole() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let cfg = tiny_encoder();
    let params = init_pair(&cfg, 0).unwrap().teacher;
    let mut store = FeatureStore::new(8);
    extract_features(&cfg, &params, &corpus, 1, 16, 1, &mut store).unwrap();
    let (train, test) = slide_split(&store, &corpus, 0.4, 0).unwrap();
    assert_eq!(train.len() + test.len(), store.len());
    for &i in &test {
        assert!(train.iter().all(|&j| store.source(j).source_id != store.source(i).source_id));
    }
    assert_eq!(row_labels(&store, &corpus).unwrap()[4], 1);
}

#[test]
fn support_sampling_draws_shots_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let s = labeled_patches(&corpus, 0, 16, 16, Some(3), 1).unwrap();
    assert_eq!(s.labels, vec![0, 0, 0, 1, 1, 1]);
    assert_eq!(s.images[0].width(), 16);
    assert_eq!(labeled_patches(&corpus, 0, 16, 16, Some(3), 1).unwrap().sources, s.sources);
    assert!(labeled_patches(&corpus, 0, 16, 16, Some(40), 1).is_err());
    assert_eq!(labeled_patches(&corpus, 0, 32, 16, None, 0).unwrap().len(), 12);
}

#[test]
fn fewshot_cache_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(&dir.path().join("corpus"));
    let model = tiny_encoder();
    let params = init_pair(&model, 0).unwrap().teacher;
    let support = labeled_patches(&corpus, 0, 16, 16, Some(2), 0).unwrap();
    let cfg = crate::adapter::AdapterConfig {
        rank: 2,
        epochs: 3,
        ..Default::default()
    };
    let fitted = FewShotModel::fit(&model, &params, &support, &cfg).unwrap();
    let out = dir.path().join("cache");
    fitted.save(&out, &support.sources).unwrap();
    let loaded = FewShotModel::load(&out).unwrap();
    let test = labeled_patches(&corpus, 0, 32, 16, None, 0).unwrap();
    let a = fitted.scores(&test.images).unwrap();
    let b = loaded.scores(&test.images).unwrap();
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert!((x - y).abs() < 1e-4, "{x} vs {y}");
    }
    let m = loaded.evaluate(&test).unwrap();
    assert_eq!(m.n_test, 12);
    assert_eq!(m.n_train, 4);
}
