use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoders::{EmbeddingSet, Embeddings};
use crate::faults::{with_faults, Fault};

fn unit_vectors(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn sets(n: usize, tokens: usize, d: usize, rng: &mut impl Rng) -> Vec<EmbeddingSet> {
    (0..n)
        .map(|_| EmbeddingSet::new(unit_vectors(1, d, rng).remove(0), unit_vectors(tokens, d, rng)))
        .collect()
}

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
}

#[test]
fn info_nce_fixtures() {
    let v = vec![vec![0.6, 0.8]];
    assert_eq!(info_nce_value(&v, &v, 0.07).unwrap(), 0.0);
    let same = vec![vec![1.0, 0.0]; 5];
    close(info_nce_value(&same, &same, 0.3).unwrap(), 5f64.ln(), 1e-12);
    let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    close(info_nce_value(&e, &e, 1.0).unwrap(), (1.0 + (-1f64).exp()).ln(), 1e-12);
    close((1.0 + (-1f64).exp()).ln(), 0.31326, 1e-5);
    assert!(info_nce_value(&e, &e, 0.0).is_err());
    assert!(info_nce_value(&e, &e, -1.0).is_err());
}

#[test]
fn info_nce_high_temperature_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (unit_vectors(6, 4, &mut rng), unit_vectors(6, 4, &mut rng));
    close(info_nce_value(&a, &b, 1e6).unwrap(), 6f64.ln(), 1e-6);
}

#[test]
fn non_unit_inputs_rejected() {
    let a = vec![vec![2.0, 0.0]];
    assert!(matches!(info_nce_value(&a, &a, 1.0), Err(TensorError::Contract(_))));
}

#[test]
fn clip_matches_oracle_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (img, txt) = (sets(4, 2, 5, &mut rng), sets(4, 2, 5, &mut rng));
    let b = clip_breakdown(&img, &txt, 0.2).unwrap();
    let p = |s: &[EmbeddingSet]| s.iter().map(|e| e.pooled.clone()).collect::<Vec<_>>();
    let (li, lt, l) = oracle::clip(&p(&img), &p(&txt), 0.2);
    close(b.get(Term::ImageSide).unwrap(), li, 1e-10);
    close(b.get(Term::TextSide).unwrap(), lt, 1e-10);
    close(b.total, l, 1e-10);
    let sym = clip_breakdown(&img, &img, 0.2).unwrap();
    assert_eq!(sym.get(Term::ImageSide), sym.get(Term::TextSide));
    assert_eq!(clip_breakdown(&img[..1], &txt[..1], 0.2).unwrap().total, 0.0);
}

#[test]
fn clip_symmetry_fault_breaks_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (img, txt) = (sets(4, 1, 5, &mut rng), sets(4, 1, 5, &mut rng));
    let p = |s: &[EmbeddingSet]| s.iter().map(|e| e.pooled.clone()).collect::<Vec<_>>();
    let expected = oracle::clip(&p(&img), &p(&txt), 0.5).2;
    let broken = with_faults(&[Fault::ClipSymmetry], || clip_breakdown(&img, &txt, 0.5).unwrap().total);
    assert!((broken - expected).abs() > 1e-6);
}

#[test]
fn iss_fixtures_and_oracle() {
    let one = vec![vec![1.0, 0.0]];
    assert_eq!(iss_value(&one, &one, 0.1).unwrap(), 0.0);
    let same = vec![vec![0.0, 1.0]; 2];
    close(iss_value(&same, &same, 0.1).unwrap(), 3f64.ln(), 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (a, b) = (unit_vectors(3, 4, &mut rng), unit_vectors(3, 4, &mut rng));
        close(iss_value(&a, &b, 0.1).unwrap(), oracle::iss(&a, &b, 0.1), 1e-10);
    }
}

#[test]
fn filip_similarity_fixtures() {
    let img = EmbeddingSet::new(vec![1.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let txt = EmbeddingSet::new(vec![1.0, 0.0], vec![vec![1.0, 0.0]]);
    let m = filip_match(&img, &txt).unwrap();
    assert_eq!((m.image_to_text, m.text_to_image), (0.5, 1.0));
    let single = EmbeddingSet::new(vec![0.6, 0.8], vec![vec![0.6, 0.8]]);
    let m = filip_match(&single, &single).unwrap();
    close(m.image_to_text, 1.0, 1e-15);
    close(m.text_to_image, 1.0, 1e-15);
    let mut empty = single.clone();
    empty.mask = vec![false];
    assert!(matches!(filip_match(&empty, &single), Err(TensorError::Degenerate { .. })));
}

#[test]
fn filip_tiebreak_lowest_index_and_fault() {
    let img = EmbeddingSet::new(vec![1.0, 0.0], vec![vec![1.0, 0.0]]);
    let txt = EmbeddingSet::new(vec![1.0, 0.0], vec![vec![0.6, 0.8], vec![0.6, -0.8]]);
    assert_eq!(filip_match(&img, &txt).unwrap().image_matches, vec![0]);
    let broken = with_faults(&[Fault::FilipTiebreak], || filip_match(&img, &txt).unwrap());
    assert_eq!(broken.image_matches, vec![1]);
}

#[test]
fn filip_graph_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..30 {
        let n = rng.random_range(1..=3);
        let img: Vec<EmbeddingSet> = (0..n).map(|_| sets(1, rng.random_range(1..=3), 3, &mut rng).remove(0)).collect();
        let txt: Vec<EmbeddingSet> = (0..n).map(|_| sets(1, rng.random_range(1..=3), 3, &mut rng).remove(0)).collect();
        let mut config = LossConfig::for_variant(Variant::Filip);
        config.filip_token_fraction = 1.0;
        let b = evaluate(
            &LossInputs {
                image: img.clone(),
                text: txt.clone(),
                ..Default::default()
            },
            &config,
            0.3,
        )
        .unwrap();
        let toks = |s: &[EmbeddingSet]| s.iter().map(|e| e.tokens.clone()).collect::<Vec<_>>();
        let (_, _, l) = oracle::filip(&toks(&img), &toks(&txt), 0.3);
        close(b.total, l, 1e-10);
        close(b.get(Term::Fas).unwrap(), l, 1e-10);
    }
}

#[test]
fn single_token_filip_equals_clip_on_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = sets(4, 1, 6, &mut rng);
    let txt = sets(4, 1, 6, &mut rng);
    let config = LossConfig::for_variant(Variant::Filip);
    let fas = evaluate(
        &LossInputs {
            image: img.clone(),
            text: txt.clone(),
            ..Default::default()
        },
        &config,
        0.1,
    )
    .unwrap()
    .total;
    let as_pooled = |s: &[EmbeddingSet]| {
        s.iter()
            .map(|e| EmbeddingSet::new(e.tokens[0].clone(), e.tokens.clone()))
            .collect::<Vec<_>>()
    };
    let clip = clip_breakdown(&as_pooled(&img), &as_pooled(&txt), 0.1).unwrap().total;
    close(fas, clip, 1e-12);
}

#[test]
fn topk_selection() {
    assert_eq!(select_topk_tokens(&[0.3, 0.1, 0.2], 1.0), vec![0, 1, 2]);
    assert_eq!(select_topk_tokens(&[0.3, 0.9, 0.2, 0.5], 0.25), vec![1]);
    assert_eq!(select_topk_tokens(&[0.5, 0.5, 0.1, 0.5], 0.25), vec![0]);
    assert_eq!(select_topk_tokens(&[0.1, 0.4, 0.4, 0.9, 0.0], 0.5), vec![1, 2, 3]);
}

#[test]
fn token_fraction_changes_fas_but_keeps_it_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = LossInputs {
        image: sets(3, 4, 4, &mut rng),
        text: sets(3, 4, 4, &mut rng),
        ..Default::default()
    };
    let mut config = LossConfig::for_variant(Variant::Filip);
    let full = evaluate(&inputs, &config, 0.2).unwrap().total;
    config.filip_token_fraction = 0.25;
    let reduced = evaluate(&inputs, &config, 0.2).unwrap().total;
    assert!(reduced.is_finite() && full.is_finite());
    assert_ne!(full, reduced);
}

fn defilip_inputs(seed: u64) -> LossInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LossInputs {
        image: sets(4, 3, 5, &mut rng),
        text: sets(4, 2, 5, &mut rng),
        image_aug: Some(sets(4, 3, 5, &mut rng)),
        text_aug: Some(sets(4, 2, 5, &mut rng)),
        ssl_views: Some((unit_vectors(4, 5, &mut rng), unit_vectors(4, 5, &mut rng))),
        tss: Some(2.5),
        neighbors: Some(unit_vectors(4, 5, &mut rng)),
    }
}

#[test]
fn mvs_collapses_to_clip_and_is_mean_of_three() {
    let inputs = defilip_inputs(7);
    let mut config = LossConfig::for_variant(Variant::Declip);
    config.iss = false;
    config.tss = false;
    config.nns = false;
    let mut collapsed = inputs.clone();
    collapsed.image_aug = Some(inputs.image.clone());
    collapsed.text_aug = Some(inputs.text.clone());
    let b = evaluate(&collapsed, &config, 0.1).unwrap();
    close(b.get(Term::Mvs).unwrap(), b.get(Term::Clip).unwrap(), 1e-12);

    let b = evaluate(&inputs, &config, 0.1).unwrap();
    let c = |i: &[EmbeddingSet], t: &[EmbeddingSet]| clip_breakdown(i, t, 0.1).unwrap().total;
    let (ia, ta) = (inputs.image_aug.as_ref().unwrap(), inputs.text_aug.as_ref().unwrap());
    let expected = (c(ia, &inputs.text) + c(&inputs.image, ta) + c(ia, ta)) / 3.0;
    close(b.get(Term::Mvs).unwrap(), expected, 1e-12);
}

#[test]
fn composite_weights_and_identities() {
    let inputs = defilip_inputs(8);
    let de = LossConfig::for_variant(Variant::Declip);
    let b = declip_loss(&inputs, &de, 0.1).unwrap();
    close(b.reconstruct_total(&de.weights()), b.total, 1e-12);
    let g = |t| b.get(t).unwrap();
    let by_hand = 0.4 * g(Term::Clip) + 0.2 * (g(Term::Iss) + g(Term::Tss)) + 0.2 * g(Term::Mvs) + 0.2 * g(Term::Nns);
    close(b.total, by_hand, 1e-12);

    let dfc = LossConfig::for_variant(Variant::Defilip);
    let df = defilip_loss(&inputs, &dfc, 0.1).unwrap();
    close(df.total - b.total, 0.2 * df.get(Term::Fas).unwrap(), 1e-12);

    let mut zero = dfc.clone();
    zero.lambda = 0.0;
    assert_eq!(defilip_loss(&inputs, &zero, 0.1).unwrap().total, b.total);

    let clip = clip_breakdown(&inputs.image, &inputs.text, 0.1).unwrap().total;
    for v in [Variant::Clip, Variant::Slip, Variant::Declip, Variant::Defilip] {
        let mut c = LossConfig::for_variant(v);
        (c.alpha, c.beta, c.gamma, c.lambda, c.alpha_slip) = (0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(evaluate(&inputs, &c, 0.1).unwrap().total, clip, "{v}");
    }
}

#[test]
fn weight_invariant_violation_is_config_error() {
    let mut c = LossConfig::for_variant(Variant::Defilip);
    (c.alpha, c.beta, c.gamma) = (0.5, 0.3, 0.2);
    assert!(matches!(defilip_loss(&defilip_inputs(1), &c, 0.1), Err(LossError::Config(_))));
    let mut c = LossConfig::for_variant(Variant::Declip);
    c.beta = -0.1;
    assert!(c.validate().is_err());
    assert!(declip_loss(&defilip_inputs(1), &LossConfig::for_variant(Variant::Clip), 0.1).is_err());
}

#[test]
fn nns_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = unit_vectors(2, 4, &mut rng);
    let txt = unit_vectors(2, 4, &mut rng);
    let empty = NNQueue::new(8, 4);
    assert_eq!(nns_value(&img, &txt, &empty, 0, 0.1).unwrap(), (0.0, None));

    let mut q = NNQueue::new(8, 4);
    q.extend(unit_vectors(3, 4, &mut rng), 0);
    q.extend(txt.clone(), 0);
    let (v, idx) = nns_value(&img, &txt, &q, 1, 0.1).unwrap();
    assert_eq!(idx, Some(vec![3, 4]));
    close(v, oracle::clip(&img, &txt, 0.1).2, 1e-12);

    let mut q = NNQueue::new(8, 4);
    let stored = unit_vectors(8, 4, &mut rng);
    q.extend(stored.clone(), 0);
    let (_, idx) = nns_value(&img, &txt, &q, 1, 0.1).unwrap();
    let expected: Vec<usize> = txt.iter().map(|t| oracle::nearest(t, &stored)).collect();
    assert_eq!(idx.unwrap(), expected);
}

#[test]
fn permutation_leaves_losses_unchanged() {
    let inputs = defilip_inputs(10);
    let order = [2, 0, 3, 1];
    let perm = |v: &Vec<EmbeddingSet>| order.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let permv = |v: &Vec<Vec<f64>>| order.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
    let (a, b) = inputs.ssl_views.as_ref().unwrap();
    let permuted = LossInputs {
        image: perm(&inputs.image),
        text: perm(&inputs.text),
        image_aug: inputs.image_aug.as_ref().map(perm),
        text_aug: inputs.text_aug.as_ref().map(perm),
        ssl_views: Some((permv(a), permv(b))),
        tss: inputs.tss,
        neighbors: inputs.neighbors.as_ref().map(permv),
    };
    let c = LossConfig::for_variant(Variant::Defilip);
    let (x, y) = (evaluate(&inputs, &c, 0.1).unwrap(), evaluate(&permuted, &c, 0.1).unwrap());
    for ((t1, v1), (t2, v2)) in x.terms.iter().zip(&y.terms) {
        assert_eq!(t1, t2);
        close(*v1, *v2, 1e-12);
    }
}

#[test]
fn breakdown_line_format() {
    let b = LossBreakdown {
        total: 1.0,
        terms: vec![(Term::Clip, 0.5), (Term::Fas, 1.0 / 3.0)],
    };
    assert_eq!(b.format_fields(), "total=1.000000 L_CLIP=0.500000 L_FAS=0.333333");
}

#[test]
fn variant_parsing_lists_valid_names() {
    assert_eq!("defilip".parse::<Variant>().unwrap(), Variant::Defilip);
    let err = "clop".parse::<Variant>().unwrap_err();
    assert!(err.contains("clip, slip, filip, declip, defilip"));
}

#[test]
fn embeddings_from_sets_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = sets(2, 3, 4, &mut rng);
    let mut g = Graph::new();
    let e = Embeddings::from_sets(&mut g, &s).unwrap();
    assert_eq!(e.to_sets(&g), s);
}
