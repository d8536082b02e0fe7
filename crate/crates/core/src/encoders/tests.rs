use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Vocab;

fn tiny_vit(image_size: usize, patch: usize) -> ModelConfig {
    ModelConfig {
        image: ImageConfig::Vit(VitConfig {
            image_size,
            patch_size: patch,
            channels: 3,
            width: 16,
            depth: 1,
            heads: 2,
            embed_dim: 8,
        }),
        text: TextConfig {
            vocab_size: 20,
            context_length: 8,
            width: 16,
            depth: 1,
            heads: 2,
            embed_dim: 8,
        },
    }
}

fn tiny_conv() -> ModelConfig {
    ModelConfig {
        image: ImageConfig::Conv(ConvConfig {
            image_size: 8,
            channels: 3,
            stage_channels: vec![4, 6],
            kernel_sizes: vec![3, 1],
            pool: vec![true, false],
            embed_dim: 8,
        }),
        ..tiny_vit(8, 4)
    }
}

fn random_images(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 3 * size * size).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![n, 3, size, size], data).unwrap()
}

fn assert_unit(v: &[f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() <= 1e-9, "norm {norm}");
}

fn assert_all_unit(sets: &[EmbeddingSet]) {
    for s in sets {
        assert_unit(&s.pooled);
        s.valid_tokens().for_each(assert_unit);
    }
}

#[test]
fn zero_image_gives_unit_norm() {
    for config in [tiny_vit(8, 4), tiny_conv()] {
        let model = ClipModel::new(&config, 0).unwrap();
        let sets = model.embed_images(&Tensor::zeros(&[1, 3, 8, 8])).unwrap();
        assert!(sets[0].pooled.iter().all(|v| v.is_finite()));
        assert_all_unit(&sets);
        assert_eq!(sets, model.embed_images(&Tensor::zeros(&[1, 3, 8, 8])).unwrap());
    }
}

#[test]
fn vit_token_count_is_patch_count() {
    let model = ClipModel::new(&tiny_vit(4, 2), 0).unwrap();
    let sets = model.embed_images(&random_images(2, 4, 1)).unwrap();
    assert!(sets.iter().all(|s| s.token_count() == 4));
}

#[test]
fn conv_tokens_are_grid_cells_with_overlap_flag() {
    let model = ClipModel::new(&tiny_conv(), 0).unwrap();
    let mut g = Graph::new();
    let p = model.params().bind_frozen(&mut g);
    let out = model.encode_image(&mut g, &p, &random_images(2, 8, 1)).unwrap();
    assert!(out.overlapping_receptive_fields);
    let sets = out.embeddings.to_sets(&g);
    assert!(sets.iter().all(|s| s.token_count() == 16));
    assert_all_unit(&sets);
}

#[test]
fn batch_permutation_permutes_outputs() {
    for config in [tiny_vit(8, 4), tiny_conv()] {
        let model = ClipModel::new(&config, 3).unwrap();
        let images = random_images(3, 8, 2);
        let per = 3 * 8 * 8;
        let order = [2, 0, 1];
        let permuted: Vec<f64> = order
            .iter()
            .flat_map(|&i| images.data()[i * per..(i + 1) * per].to_vec())
            .collect();
        let permuted = Tensor::new(images.shape().to_vec(), permuted).unwrap();
        let a = model.embed_images(&images).unwrap();
        let b = model.embed_images(&permuted).unwrap();
        for (k, &i) in order.iter().enumerate() {
            for (x, y) in a[i].pooled.iter().zip(&b[k].pooled) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn wrong_resolution_is_shape_error() {
    let model = ClipModel::new(&tiny_vit(8, 4), 0).unwrap();
    let err = model.embed_images(&Tensor::zeros(&[1, 3, 4, 4])).unwrap_err();
    assert!(matches!(err, EncoderError::Tensor(TensorError::Shape { .. })));
}

fn vocab() -> Vocab {
    Vocab::from_words(["a", "red", "circle", "photo", "of"].map(String::from).to_vec()).unwrap()
}

#[test]
fn text_token_count_excludes_padding_and_specials() {
    let model = ClipModel::new(&tiny_vit(8, 4), 0).unwrap();
    let t = vocab().tokenize("a red circle", 8);
    let sets = model.embed_texts(&TokenBatch::from_tokenized(&[t])).unwrap();
    assert_eq!(sets[0].token_count(), 3);
    assert_all_unit(&sets);
}

#[test]
fn identical_captions_identical_embeddings() {
    let model = ClipModel::new(&tiny_vit(8, 4), 0).unwrap();
    let t = vocab().tokenize("a photo of a circle", 8);
    let sets = model.embed_texts(&TokenBatch::from_tokenized(&[t.clone(), t])).unwrap();
    assert_eq!(sets[0], sets[1]);
}

#[test]
fn padding_content_does_not_leak() {
    let model = ClipModel::new(&tiny_vit(8, 4), 5).unwrap();
    let t = vocab().tokenize("red circle", 8);
    let base = model.embed_texts(&TokenBatch::from_tokenized(std::slice::from_ref(&t))).unwrap();
    let mut other = t.clone();
    for (id, &valid) in other.ids.iter_mut().zip(&t.mask) {
        if !valid {
            *id = 7;
        }
    }
    let changed = model.embed_texts(&TokenBatch::from_tokenized(&[other])).unwrap();
    assert_eq!(base, changed);
    // dropping trailing padding altogether leaves the result unchanged too
    let short = vocab().tokenize("red circle", 5);
    let short = model.embed_texts(&TokenBatch::from_tokenized(&[short])).unwrap();
    for (x, y) in short[0].pooled.iter().zip(&base[0].pooled) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
}

#[test]
fn out_of_vocab_id_is_index_error() {
    let model = ClipModel::new(&tiny_vit(8, 4), 0).unwrap();
    let err = model.embed_texts(&TokenBatch::new(&[vec![1, 20, 2]])).unwrap_err();
    assert!(matches!(err, EncoderError::Tensor(TensorError::Index { index: 20, .. })));
}

#[test]
fn depth_one_and_twelve_are_unit_norm() {
    for depth in [1, 12] {
        let mut config = tiny_vit(8, 4);
        config.text.depth = depth;
        let model = ClipModel::new(&config, 0).unwrap();
        let t = vocab().tokenize("a red photo", 8);
        assert_all_unit(&model.embed_texts(&TokenBatch::from_tokenized(&[t])).unwrap());
    }
}

#[test]
fn text_parameter_count_matches_store_and_is_linear_in_depth() {
    let counts: Vec<usize> = (1..=4)
        .map(|depth| {
            let mut config = tiny_vit(8, 4);
            config.text.depth = depth;
            let model = ClipModel::new(&config, 0).unwrap();
            let store = model.params();
            let actual: usize = store
                .ids()
                .filter(|&id| store.name(id).starts_with("text."))
                .map(|id| store.get(id).numel())
                .sum();
            assert_eq!(actual, config.text.parameter_count());
            actual
        })
        .collect();
    let step = counts[1] - counts[0];
    assert!(counts.windows(2).all(|w| w[1] - w[0] == step && step > 0));
}

#[test]
fn fresh_temperature_and_clamp() {
    let mut model = ClipModel::new(&tiny_vit(8, 4), 0).unwrap();
    assert!((model.temperature() - 0.07).abs() < 1e-15);
    let id = model.log_tau_id();
    model.params_mut().set(id, Tensor::scalar(-20.0));
    model.clamp_temperature();
    assert!((model.temperature() - TAU_MIN).abs() < 1e-15);
    model.set_temperature(1e9);
    assert!((model.temperature() - TAU_MAX).abs() < 1e-9);
}

#[test]
fn invalid_configs_rejected() {
    let mut c = tiny_vit(8, 4);
    c.text.depth = 0;
    assert!(matches!(ClipModel::new(&c, 0), Err(EncoderError::Config(_))));
    let mut c = tiny_vit(8, 3);
    c.text.context_length = 1;
    assert!(ClipModel::new(&c, 0).is_err());
    let mut c = tiny_conv();
    if let ImageConfig::Conv(conv) = &mut c.image {
        conv.pool = vec![true, true];
        conv.image_size = 4;
    }
    assert!(ClipModel::new(&c, 0).is_err());
}

#[test]
fn model_config_toml_round_trip() {
    for c in [tiny_vit(8, 4), tiny_conv(), ModelConfig::default()] {
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), c);
    }
}
