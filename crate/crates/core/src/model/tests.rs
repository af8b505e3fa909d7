use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::raster::RgbImage;
use crate::views::MaskSpec;

fn toy_config() -> EncoderConfig {
    EncoderConfig {
        variant: "toy".into(),
        image_size: 16,
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        head_hidden: 12,
        head_bottleneck: 6,
        out_dim: 4,
        projector_hidden: 10,
        head_batch_norm: false,
        precision: Precision::F64,
    }
}

fn noise_image(side: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..side * side * 3).map(|_| rng.gen::<f32>()).collect();
    RgbImage::from_vec(side, side, data).unwrap()
}

fn vec_of(t: &Tensor) -> Vec<f64> {
    tensor_to_f64(t).unwrap()
}

#[test]
fn parameter_count_closed_form() {
    let c = toy_config();
    let s = init_pair(&c, 0).unwrap().student;
    let (d, p, n, hid) = (8, 4, 16, 16);
    let (h, bn, k) = (12, 6, 4);
    let embed = d * 3 * p * p + d + d + (1 + n) * d + d;
    let block = 4 * d + 4 * (d * d + d) + (hid * d + hid) + (d * hid + d);
    let head = (h * d + h) + (h * h + h) + (bn * h + bn) + k * bn;
    assert_eq!(s.num_elements(), embed + block + 2 * d + head);
}

#[test]
fn variants_have_published_shapes() {
    let t = EncoderConfig::variant("tiny").unwrap();
    assert_eq!((t.depth, t.embed_dim, t.heads), (6, 192, 3));
    let s = EncoderConfig::variant("small").unwrap();
    assert_eq!((s.depth, s.embed_dim, s.heads), (12, 384, 6));
    let b = EncoderConfig::variant("base").unwrap();
    assert_eq!((b.depth, b.embed_dim, b.heads), (12, 768, 12));
    assert!(EncoderConfig::variant("huge").is_err());
}

#[test]
fn teacher_starts_as_detached_copy() {
    let pair = init_pair(&toy_config(), 3).unwrap();
    assert_eq!(pair.max_divergence().unwrap(), 0.0);
    assert!(pair.teacher_is_detached());
    assert!(pair.student.tensors().iter().all(|t| t.is_variable()));
    assert!(pair.teacher.tensors().iter().all(|t| !t.is_variable()));
}

#[test]
fn init_is_seed_deterministic() {
    let a = init_pair(&toy_config(), 5).unwrap();
    let b = init_pair(&toy_config(), 5).unwrap();
    let c = init_pair(&toy_config(), 6).unwrap();
    assert_eq!(a.student.flatten_f64().unwrap(), b.student.flatten_f64().unwrap());
    assert_ne!(a.student.flatten_f64().unwrap(), c.student.flatten_f64().unwrap());
}

#[test]
fn token_sequence_at_full_resolution() {
    let cfg = EncoderConfig::variant("tiny").unwrap();
    let pair = init_pair(&cfg, 0).unwrap();
    let img = noise_image(224, 1);
    let batch = patchify(&[&img], cfg.patch_size, cfg.dtype()).unwrap();
    let out = encode_tokens(&cfg, &pair.student, &batch, None, None).unwrap();
    assert_eq!(out.dims(), &[1, 197, 192]);
}

#[test]
fn smaller_views_interpolate_positions() {
    let c = toy_config();
    let pair = init_pair(&c, 0).unwrap();
    let img = noise_image(8, 2);
    let batch = patchify(&[&img], c.patch_size, c.dtype()).unwrap();
    let e = encode(&c, &pair.student, &batch, None, None).unwrap();
    assert_eq!(e.dims(), &[1, 8]);
}

#[test]
fn empty_mask_is_identity() {
    let c = toy_config();
    let pair = init_pair(&c, 0).unwrap();
    let img = noise_image(16, 3);
    let batch = patchify(&[&img], c.patch_size, c.dtype()).unwrap();
    let spec = MaskSpec {
        token_mask: vec![false; 16],
        ratio: 0.0,
    };
    let m = mask_tensor(&[&spec], 16, c.dtype()).unwrap();
    let a = encode(&c, &pair.student, &batch, None, None).unwrap();
    let b = encode(&c, &pair.student, &batch, Some(&m), None).unwrap();
    assert_eq!(vec_of(&a), vec_of(&b));
}

#[test]
fn masking_changes_embedding() {
    let c = toy_config();
    let mut pair = init_pair(&c, 0).unwrap();
    let i = pair.student.position("encoder.mask_token").unwrap();
    pair.student
        .set(i, &Tensor::ones((1, 1, 8), DType::F64, &Device::Cpu).unwrap())
        .unwrap();
    let img = noise_image(16, 3);
    let batch = patchify(&[&img], c.patch_size, c.dtype()).unwrap();
    let mut token_mask = vec![false; 16];
    token_mask[..5].fill(true);
    let spec = MaskSpec { token_mask, ratio: 0.3 };
    let m = mask_tensor(&[&spec], 16, c.dtype()).unwrap();
    let a = encode(&c, &pair.student, &batch, None, None).unwrap();
    let b = encode(&c, &pair.student, &batch, Some(&m), None).unwrap();
    assert_ne!(vec_of(&a), vec_of(&b));
}

#[test]
fn project_prob_values() {
    let z = Tensor::zeros((1, 4), DType::F64, &Device::Cpu).unwrap();
    assert_eq!(vec_of(&project_prob_from_logits(&z, 0.1).unwrap()), vec![0.25; 4]);
    let z = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
    let p = vec_of(&project_prob_from_logits(&z, 1.0).unwrap());
    assert!((p[0] - 0.7310585786300049).abs() < 1e-12);
    assert!((p[1] - 0.2689414213699951).abs() < 1e-12);
    let shifted = vec_of(&project_prob_from_logits(&(z.clone() + 3.0).unwrap(), 1.0).unwrap());
    assert!((shifted[0] - p[0]).abs() < 1e-15);
    assert!(project_prob_from_logits(&z, 0.0).is_err());
}

#[test]
fn lower_temperature_sharpens() {
    let z = Tensor::new(&[[0.3f64, -0.2, 0.1, 0.0]], &Device::Cpu).unwrap();
    let mut prev = 0.0;
    for tau in [1.0, 0.5, 0.1, 0.04] {
        let top = vec_of(&project_prob_from_logits(&z, tau).unwrap())[0];
        assert!(top > prev);
        prev = top;
    }
}

#[test]
fn head_output_is_bounded() {
    let c = toy_config();
    let pair = init_pair(&c, 0).unwrap();
    let e = Tensor::new(&[[5.0f64, -3.0, 2.0, 0.0, 1.0, 9.0, -4.0, 0.5]], &Device::Cpu).unwrap();
    let z = vec_of(&head_logits(&pair.student, &e).unwrap());
    assert!(z.iter().all(|v| v.abs() <= 1.0 + 1e-12));
}

#[test]
fn tokens_are_permutation_covariant_without_positions() {
    let c = toy_config();
    let mut pair = init_pair(&c, 1).unwrap();
    let i = pair.student.position("encoder.pos_embed").unwrap();
    pair.student
        .set(i, &Tensor::zeros((1, 17, 8), DType::F64, &Device::Cpu).unwrap())
        .unwrap();
    let img = noise_image(16, 4);
    let batch = patchify(&[&img], c.patch_size, c.dtype()).unwrap();
    let perm: Vec<u32> = vec![3, 0, 7, 1, 2, 15, 4, 5, 6, 8, 9, 14, 10, 11, 13, 12];
    let idx = Tensor::new(perm.as_slice(), &Device::Cpu).unwrap();
    let shuffled = TokenBatch {
        tokens: batch.tokens.index_select(&idx, 1).unwrap(),
        grid: batch.grid,
    };
    let a = encode_tokens(&c, &pair.student, &batch, None, None).unwrap();
    let b = encode_tokens(&c, &pair.student, &shuffled, None, None).unwrap();
    let cls_a = vec_of(&a.narrow(1, 0, 1).unwrap());
    let cls_b = vec_of(&b.narrow(1, 0, 1).unwrap());
    for (x, y) in cls_a.iter().zip(&cls_b) {
        assert!((x - y).abs() < 1e-12);
    }
    let pa = a.narrow(1, 1, 16).unwrap().index_select(&idx, 1).unwrap();
    let pb = b.narrow(1, 1, 16).unwrap();
    for (x, y) in vec_of(&pa).iter().zip(&vec_of(&pb)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn gradients_never_reach_teacher() {
    let c = toy_config();
    let pair = init_pair(&c, 2).unwrap();
    let img = noise_image(16, 5);
    let batch = patchify(&[&img], c.patch_size, c.dtype()).unwrap();
    let t = project_prob(&pair.teacher, &encode(&c, &pair.teacher, &batch, None, None).unwrap(), 0.04).unwrap();
    let s = project_prob(&pair.student, &encode(&c, &pair.student, &batch, None, None).unwrap(), 0.1).unwrap();
    let loss = (t * s.log().unwrap()).unwrap().sum_all().unwrap().neg().unwrap();
    let grads = loss.backward().unwrap();
    assert!(pair.teacher.tensors().iter().all(|t| grads.get(t).is_none()));
    assert!(grads.get(pair.student.get("head.fc1.weight").unwrap()).is_some());
    assert!(pair.teacher_is_detached());
}

#[test]
fn patchify_rejects_indivisible_sizes() {
    let img = noise_image(10, 0);
    assert!(patchify(&[&img], 4, DType::F32).is_err());
}
