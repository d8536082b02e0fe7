use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoders::{ImageConfig, ModelConfig, TextConfig, VitConfig};

fn tiny_model() -> (ClipModel, Vocab) {
    let config = ModelConfig {
        image: ImageConfig::Vit(VitConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            width: 16,
            depth: 1,
            heads: 2,
            embed_dim: 8,
        }),
        text: TextConfig {
            vocab_size: 64,
            context_length: 12,
            width: 16,
            depth: 1,
            heads: 2,
            embed_dim: 8,
        },
    };
    let vocab = Vocab::build(PromptSet::clip().fill("red circle").iter().map(String::as_str), 64);
    (ClipModel::new(&config, 1).unwrap(), vocab)
}

fn close_vec(a: &[f64], b: &[f64], tol: f64) {
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

#[test]
fn prompt_validation() {
    assert!(PromptSet::parse("a {label}\nno slot\n").is_err());
    assert!(PromptSet::parse("{label} and {label}").is_err());
    assert!(PromptSet::parse("\n\n").is_err());
    assert_eq!(PromptSet::clip().templates().len(), 80);
    assert_eq!(PromptSet::desk().templates().len(), 7);
    assert!(PromptSet::desk().templates().iter().all(|t| PromptSet::clip().templates().contains(t)));
}

#[test]
fn single_template_row_is_caption_embedding() {
    let (model, vocab) = tiny_model();
    let prompts = PromptSet::parse("a photo of a {label}.").unwrap();
    let c = build_classifier(&model, &vocab, &["red circle".into()], &prompts).unwrap();
    let t = vocab.tokenize("a photo of a red circle.", 12);
    let e = model.embed_texts(&TokenBatch::from_tokenized(&[t])).unwrap();
    close_vec(&c.rows()[0], &e[0].pooled, 1e-12);

    let twice = PromptSet::parse("a photo of a {label}.\na photo of a {label}.").unwrap();
    let c2 = build_classifier(&model, &vocab, &["red circle".into()], &twice).unwrap();
    close_vec(&c2.rows()[0], &c.rows()[0], 1e-12);
}

#[test]
fn template_order_invariance() {
    let (model, vocab) = tiny_model();
    let p = PromptSet::desk();
    let mut reversed = p.templates().to_vec();
    reversed.reverse();
    let names = vec!["red circle".to_string(), "blue square".to_string()];
    let a = build_classifier(&model, &vocab, &names, &p).unwrap();
    let b = build_classifier(&model, &vocab, &names, &PromptSet::new(reversed).unwrap()).unwrap();
    for (x, y) in a.rows().iter().zip(b.rows()) {
        close_vec(x, y, 1e-12);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn empty_class_name_rejected() {
    let (model, vocab) = tiny_model();
    assert!(build_classifier(&model, &vocab, &["  ".into()], &PromptSet::desk()).is_err());
}

#[test]
fn mean_normalize_closed_form() {
    let r = mean_normalize(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    close_vec(&r, &[0.5f64.sqrt(), 0.5f64.sqrt()], 1e-15);
}

#[test]
fn classify_fixtures() {
    let one = ClassifierMatrix::new(vec![vec![1.0, 0.0]]);
    assert_eq!(classify(&[vec![0.0, 1.0], vec![-1.0, 0.0]], &one), vec![0, 0]);
    let eye = ClassifierMatrix::new(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
    assert_eq!(classify(&[vec![0.0, 0.0, 1.0]], &eye), vec![2]);
    let tie = ClassifierMatrix::new(vec![vec![0.0, 1.0], vec![0.0, 1.0]]);
    assert_eq!(classify(&[vec![0.0, 1.0]], &tie), vec![0]);
}

#[test]
fn rescaling_keeps_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let c = ClassifierMatrix::new(rows);
    let x: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    assert_eq!(classify(&x, &c), classify(&x, &c.scaled(3.7)));
}

#[test]
fn accuracy_fixtures() {
    assert_eq!(top1_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    assert_eq!(top1_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
    assert_eq!(top1_accuracy(&[0, 1, 2, 0, 0, 0, 0, 0], &[0, 1, 2, 1, 1, 1, 1, 1]).unwrap(), 0.375);
    assert!(top1_accuracy(&[], &[]).is_err());
}

#[test]
fn random_classifier_is_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (k, per) = (8, 250);
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let c = ClassifierMatrix::new((0..k).map(|_| unit(&mut rng)).collect());
    let x: Vec<Vec<f64>> = (0..k * per).map(|_| unit(&mut rng)).collect();
    let labels: Vec<usize> = (0..k * per).map(|i| i % k).collect();
    let acc = top1_accuracy(&classify(&x, &c), &labels).unwrap();
    let p = 1.0 / k as f64;
    let sigma = (p * (1.0 - p) / (k * per) as f64).sqrt();
    assert!((acc - p).abs() <= 3.0 * sigma, "{acc}");
}

#[test]
fn report_counts_and_text() {
    let r = EvalReport::new(vec!["a".into(), "b".into()], &[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
    assert_eq!(r.accuracy, 0.75);
    assert_eq!(r.class_counts(0), (1, 2));
    assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
    assert!(r.to_string().starts_with("top1_accuracy=0.750000"));
}
