//! The self-check suite behind `clipbench verify`: gradient checks,
//! brute-force loss oracles, closed-form fixtures and algebraic identities.
//!
//! Every check is deterministic. Each fault in [`crate::faults`] breaks at
//! least one check.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{analyze, CorpusStats};
use crate::data::{generate_synthetic, Vocab};
use crate::encoders::{EmbeddingSet, Embeddings, ImageConfig, ModelConfig, TextConfig, VitConfig};
use crate::faults::{with_faults, Fault};
use crate::gradcheck::{check_contracted, check_gradients, GradCheckOptions, GradCheckReport};
use crate::params::ParamStore;
use crate::supervision::{
    clip_breakdown, declip_loss, defilip_loss, evaluate, filip_loss, filip_match, filip_similarity,
    info_nce_value, iss_value, nns_value, oracle, LossConfig, LossInputs, NNQueue, Term, Variant,
};
use crate::tensor::{Graph, Result as TensorResult, Tensor, TensorError, Var};
use crate::trainer::{adamw_step, build_objective, AdamState, PairSet, TrainConfig, TrainSettings, Trainer};

pub type CheckResult = Result<String, String>;

pub struct Check {
    pub name: &'static str,
    pub about: &'static str,
    pub run: fn() -> CheckResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn checks() -> Vec<Check> {
    vec![
        Check {
            name: "grad.primitives",
            about: "reverse-mode gradients of each primitive against central differences",
            run: grad_primitives,
        },
        Check {
            name: "grad.full_stack",
            about: "full-model loss gradients of every variant on a 4-pair batch",
            run: grad_full_stack,
        },
        Check {
            name: "oracle.info_nce",
            about: "InfoNCE and both CLIP directions against nested loops, 100 instances",
            run: oracle_info_nce,
        },
        Check {
            name: "oracle.filip",
            about: "token-wise max similarity, matches and FILIP loss against nested loops, 100 instances",
            run: oracle_filip,
        },
        Check {
            name: "oracle.iss",
            about: "image self-supervision loss against nested loops, 100 instances",
            run: oracle_iss,
        },
        Check {
            name: "oracle.nns",
            about: "neighbor retrieval and loss against a linear scan, 100 instances",
            run: oracle_nns,
        },
        Check {
            name: "fixtures.losses",
            about: "closed-form loss values",
            run: fixtures_losses,
        },
        Check {
            name: "identities.composition",
            about: "weighted totals, the fine-grained increment and the zero-weight collapse",
            run: identities_composition,
        },
        Check {
            name: "fixtures.optimizer",
            about: "learning-rate schedule and AdamW closed forms",
            run: fixtures_optimizer,
        },
        Check {
            name: "fixtures.corpus",
            about: "hand-computed corpus statistics and shard merging",
            run: fixtures_corpus,
        },
    ]
}

/// Runs the checks whose names start with any of `only` (all when empty),
/// with `faults` injected. A panicking check counts as failed.
pub fn run_checks(faults: &[Fault], only: &[String]) -> Vec<Outcome> {
    with_faults(faults, || {
        checks()
            .into_iter()
            .filter(|c| only.is_empty() || only.iter().any(|p| c.name.starts_with(p.as_str())))
            .map(|c| {
                let (passed, detail) = match catch_unwind(AssertUnwindSafe(c.run)) {
                    Ok(Ok(d)) => (true, d),
                    Ok(Err(d)) => (false, d),
                    Err(p) => (
                        false,
                        p.downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "panicked".into()),
                    ),
                };
                Outcome {
                    name: c.name,
                    passed,
                    detail,
                }
            })
            .collect()
    })
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{what}: {got} vs {want} (tol {tol:e})"))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("shape")
}

fn unit_vectors(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

fn sets(n: usize, max_tokens: usize, d: usize, rng: &mut impl Rng) -> Vec<EmbeddingSet> {
    (0..n)
        .map(|_| {
            let t = rng.random_range(1..=max_tokens);
            EmbeddingSet::new(unit_vectors(1, d, rng).remove(0), unit_vectors(t, d, rng))
        })
        .collect()
}

fn summarize(r: &GradCheckReport) -> String {
    format!(
        "{}/{} within tolerance ({} masked, {} adjudicated, max rel err {:.2e})",
        r.passed, r.checked, r.masked, r.adjudicated, r.max_rel_err
    )
}

fn grad_primitives() -> CheckResult {
    type Build = fn(&mut Graph, &[Var]) -> TensorResult<Var>;
    let primitives: [(&str, Build, [usize; 2]); 8] = [
        ("matmul", |g, v| {
            let w = g.reshape(v[1], &[4, 1])?;
            let w = g.concat0(&[w, w, w, w])?;
            let w = g.reshape(w, &[4, 4])?;
            g.matmul(v[0], w)
        }, [3, 4]),
        ("matmul_nt", |g, v| g.matmul_nt(v[0], v[0]), [3, 3]),
        ("gelu", |g, v| Ok(g.gelu(v[0])), [3, 4]),
        ("exp", |g, v| Ok(g.exp(v[0])), [3, 4]),
        ("softmax", |g, v| g.softmax(v[0], 1), [3, 4]),
        ("l2_normalize", |g, v| g.l2_normalize(v[0], 1), [3, 4]),
        ("layernorm", |g, v| g.layernorm(v[0], v[1], v[2]), [3, 4]),
        ("block_max_mean", |g, v| g.block_max_mean(v[0], &[0, 1, 3], &[0, 2, 4], false), [2, 2]),
    ];
    let opts = GradCheckOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut lines = Vec::new();
    for round in 0..5 {
        let inputs = [
            random_tensor(&[3, 4], &mut rng),
            random_tensor(&[4], &mut rng),
            random_tensor(&[4], &mut rng),
        ];
        for (name, build, shape) in primitives {
            let weights = random_tensor(&shape, &mut rng);
            let r = check_contracted(&inputs, &weights, opts, build).map_err(err)?;
            ensure(r.passed == r.checked, || format!("{name} (round {round}): {}", summarize(&r)))?;
            if round == 0 {
                lines.push(name);
            }
        }
        let r = check_gradients(&inputs[..1], opts, |g, v| g.cross_entropy(v[0], &[0, 3, 1])).map_err(err)?;
        ensure(r.passed == r.checked, || format!("cross_entropy (round {round}): {}", summarize(&r)))?;
    }
    Ok(format!("{} and cross_entropy exact to 1e-6 on 5 random draws", lines.join(", ")))
}

/// The small model the full-stack gradient check differentiates.
pub fn gradcheck_model() -> ModelConfig {
    ModelConfig {
        image: ImageConfig::Vit(VitConfig {
            image_size: 32,
            patch_size: 16,
            channels: 3,
            width: 8,
            depth: 1,
            heads: 2,
            embed_dim: 4,
        }),
        text: TextConfig {
            vocab_size: 64,
            context_length: 16,
            width: 8,
            depth: 1,
            heads: 2,
            embed_dim: 4,
        },
    }
}

/// Differentiates the full training objective of `variant` with respect to
/// every model parameter on one batch of four synthetic pairs. The neighbor
/// queue holds eight random texts from an earlier step so that every term
/// is active.
pub fn full_stack_gradients(variant: Variant, opts: GradCheckOptions) -> Result<GradCheckReport, String> {
    let records = generate_synthetic(4, 1, 1).map_err(err)?;
    let vocab = Vocab::build(records.iter().map(|r| r.caption.as_str()), 64);
    let data = PairSet::from_records(&records, 32).map_err(err)?;
    let settings = TrainSettings {
        model: gradcheck_model(),
        train: TrainConfig {
            batch_size: 4,
            epochs: 1,
            variant,
            ..TrainConfig::default()
        },
        loss: LossConfig::for_variant(variant),
        ..TrainSettings::default()
    };
    let mut trainer = Trainer::new(settings.clone(), vocab, data).map_err(err)?;
    let batch = trainer.prepare_next().map_err(err)?;
    let model = trainer.model().clone();
    let mut queue = NNQueue::new(16, 4);
    queue.extend(unit_vectors(8, 4, &mut ChaCha8Rng::seed_from_u64(5)), batch.step + 1);
    let inputs = model.params().tensors();
    check_gradients(&inputs, opts, |g, vars| {
        let p = model.params().bound_from(vars);
        build_objective(&model, g, &p, &batch, &settings.loss, &queue)
            .map(|b| b.objective.total)
            .map_err(|e| TensorError::Contract(e.to_string()))
    })
    .map_err(err)
}

/// Tolerance and required pass fraction of the full-stack check.
pub const FULL_STACK_TOLERANCE: f64 = 1e-4;
pub const FULL_STACK_PASS_FRACTION: f64 = 0.99;

fn grad_full_stack() -> CheckResult {
    let opts = GradCheckOptions {
        tolerance: FULL_STACK_TOLERANCE,
        ..GradCheckOptions::default()
    };
    let mut lines = Vec::new();
    for v in Variant::ALL {
        let r = full_stack_gradients(v, opts)?;
        ensure(r.checked > 0 && r.pass_fraction() >= FULL_STACK_PASS_FRACTION, || {
            format!("{v}: {}", summarize(&r))
        })?;
        lines.push(format!("{v} {:.2}%", 100.0 * r.pass_fraction()));
    }
    Ok(lines.join(", "))
}

fn pooled(s: &[EmbeddingSet]) -> Vec<Vec<f64>> {
    s.iter().map(|e| e.pooled.clone()).collect()
}

fn oracle_info_nce() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for k in 0..100 {
        let n = rng.random_range(1..=5);
        let d = rng.random_range(2..=6);
        let tau = rng.random_range(0.05..2.0);
        let (a, b) = (sets(n, 1, d, &mut rng), sets(n, 1, d, &mut rng));
        let (pa, pb) = (pooled(&a), pooled(&b));
        close(&format!("info_nce #{k}"), info_nce_value(&pa, &pb, tau).map_err(err)?, oracle::info_nce(&pa, &pb, tau), 1e-10)?;
        let got = clip_breakdown(&a, &b, tau).map_err(err)?;
        let (li, lt, l) = oracle::clip(&pa, &pb, tau);
        close(&format!("L_I #{k}"), got.get(Term::ImageSide).unwrap_or(f64::NAN), li, 1e-10)?;
        close(&format!("L_T #{k}"), got.get(Term::TextSide).unwrap_or(f64::NAN), lt, 1e-10)?;
        close(&format!("L_CLIP #{k}"), got.total, l, 1e-10)?;
    }
    Ok("100 instances within 1e-10".into())
}

/// Random token sets where some candidates repeat, so argmax ties occur.
fn tied_sets(n: usize, d: usize, rng: &mut impl Rng) -> Vec<EmbeddingSet> {
    sets(n, 3, d, rng)
        .into_iter()
        .map(|mut s| {
            if s.tokens.len() < 3 && rng.random_bool(0.5) {
                let dup = s.tokens[rng.random_range(0..s.tokens.len())].clone();
                s = EmbeddingSet::new(s.pooled, s.tokens.iter().cloned().chain([dup]).collect());
            }
            s
        })
        .collect()
}

fn oracle_filip() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut ties = 0;
    for k in 0..100 {
        let n = rng.random_range(1..=3);
        let tau = rng.random_range(0.05..1.0);
        let (img, txt) = (tied_sets(n, 3, &mut rng), tied_sets(n, 3, &mut rng));
        let toks = |s: &[EmbeddingSet]| s.iter().map(|e| e.tokens.clone()).collect::<Vec<_>>();
        let (ti, tt) = (toks(&img), toks(&txt));

        let mut g = Graph::new();
        let (ie, te) = (Embeddings::from_sets(&mut g, &img).map_err(err)?, Embeddings::from_sets(&mut g, &txt).map_err(err)?);
        let (i2t, t2i) = filip_similarity(&mut g, &ie, &te).map_err(err)?;
        let tau_v = g.constant(Tensor::scalar(tau));
        let loss = filip_loss(&mut g, &ie, &te, tau_v).map_err(err)?;
        for i in 0..n {
            for j in 0..n {
                let (want_it, picks_it) = oracle::token_max(&ti[i], &tt[j]);
                let (want_ti, picks_ti) = oracle::token_max(&tt[j], &ti[i]);
                close(&format!("image_to_text #{k} ({i},{j})"), g.value(i2t).data()[i * n + j], want_it, 1e-10)?;
                close(&format!("text_to_image #{k} ({j},{i})"), g.value(t2i).data()[j * n + i], want_ti, 1e-10)?;
                let m = filip_match(&img[i], &txt[j]).map_err(err)?;
                ensure(m.image_matches == picks_it && m.text_matches == picks_ti, || {
                    format!(
                        "token matches #{k} ({i},{j}): {:?}/{:?} vs lowest-index {:?}/{:?}",
                        m.image_matches, m.text_matches, picks_it, picks_ti
                    )
                })?;
                let tied = |q: &[Vec<f64>], keys: &[Vec<f64>]| {
                    q.iter().any(|v| {
                        let s: Vec<f64> = keys.iter().map(|kk| v.iter().zip(kk).map(|(a, b)| a * b).sum()).collect();
                        let best = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        s.iter().filter(|&&x| x == best).count() > 1
                    })
                };
                ties += usize::from(tied(&ti[i], &tt[j]) || tied(&tt[j], &ti[i]));
            }
        }
        let (li, lt, l) = oracle::filip(&ti, &tt, tau);
        close(&format!("FILIP L_I #{k}"), g.value(loss.image_side).item(), li, 1e-10)?;
        close(&format!("FILIP L_T #{k}"), g.value(loss.text_side).item(), lt, 1e-10)?;
        close(&format!("FILIP loss #{k}"), g.value(loss.mean).item(), l, 1e-10)?;
    }
    ensure(ties > 0, || "no tied instances were generated".into())?;
    Ok(format!("100 instances within 1e-10, {ties} pairs with tied maxima"))
}

fn oracle_iss() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for k in 0..100 {
        let n = rng.random_range(1..=5);
        let d = rng.random_range(2..=6);
        let tau = rng.random_range(0.05..1.0);
        let (a, b) = (unit_vectors(n, d, &mut rng), unit_vectors(n, d, &mut rng));
        close(&format!("iss #{k}"), iss_value(&a, &b, tau).map_err(err)?, oracle::iss(&a, &b, tau), 1e-10)?;
    }
    Ok("100 instances within 1e-10".into())
}

fn oracle_nns() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for k in 0..100 {
        let n = rng.random_range(1..=4);
        let d = rng.random_range(2..=5);
        let tau = rng.random_range(0.05..1.0);
        let (img, txt) = (unit_vectors(n, d, &mut rng), unit_vectors(n, d, &mut rng));
        let stored = unit_vectors(rng.random_range(1..=8), d, &mut rng);
        let mut q = NNQueue::new(16, d);
        q.extend(stored.clone(), 0);
        q.extend(unit_vectors(2, d, &mut rng), 1);
        let (v, idx) = nns_value(&img, &txt, &q, 1, tau).map_err(err)?;
        let want: Vec<usize> = txt.iter().map(|t| oracle::nearest(t, &stored)).collect();
        let got = idx.ok_or("no neighbors retrieved")?;
        ensure(got == want, || format!("neighbors #{k}: {got:?} vs {want:?}"))?;
        let neighbors: Vec<Vec<f64>> = want.iter().map(|&i| stored[i].clone()).collect();
        close(&format!("nns #{k}"), v, oracle::clip(&img, &neighbors, tau).2, 1e-10)?;
    }
    Ok("100 instances within 1e-10".into())
}

fn fixtures_losses() -> CheckResult {
    let v = vec![vec![0.6, 0.8]];
    close("info_nce N=1", info_nce_value(&v, &v, 0.07).map_err(err)?, 0.0, 0.0)?;
    let same = vec![vec![1.0, 0.0]; 5];
    close("uniform embeddings", info_nce_value(&same, &same, 0.3).map_err(err)?, 5f64.ln(), 1e-9)?;
    let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    close("orthonormal N=2", info_nce_value(&e, &e, 1.0).map_err(err)?, (1.0 + (-1f64).exp()).ln(), 1e-9)?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (a, b) = (unit_vectors(6, 4, &mut rng), unit_vectors(6, 4, &mut rng));
    close("tau=1e6 limit", info_nce_value(&a, &b, 1e6).map_err(err)?, 6f64.ln(), 1e-6)?;

    let (img, txt) = (sets(4, 1, 6, &mut rng), sets(4, 1, 6, &mut rng));
    let inputs = LossInputs {
        image: img.clone(),
        text: txt.clone(),
        ..Default::default()
    };
    let fas = evaluate(&inputs, &LossConfig::for_variant(Variant::Filip), 0.1).map_err(err)?.total;
    let as_pooled = |s: &[EmbeddingSet]| s.iter().map(|e| EmbeddingSet::new(e.tokens[0].clone(), e.tokens.clone())).collect::<Vec<_>>();
    let clip = clip_breakdown(&as_pooled(&img), &as_pooled(&txt), 0.1).map_err(err)?.total;
    close("single-token FILIP vs CLIP", fas, clip, 1e-12)?;

    let mut config = LossConfig::for_variant(Variant::Declip);
    (config.iss, config.tss, config.nns) = (false, false, false);
    let identity = LossInputs {
        image: sets(4, 2, 5, &mut rng),
        text: sets(4, 2, 5, &mut rng),
        ..Default::default()
    };
    let identity = LossInputs {
        image_aug: Some(identity.image.clone()),
        text_aug: Some(identity.text.clone()),
        ..identity
    };
    let b = evaluate(&identity, &config, 0.1).map_err(err)?;
    close(
        "identity-augmentation MVS",
        b.get(Term::Mvs).unwrap_or(f64::NAN),
        b.get(Term::Clip).unwrap_or(f64::NAN),
        1e-12,
    )?;
    Ok("6 fixtures".into())
}

fn composite_inputs(rng: &mut impl Rng) -> LossInputs {
    LossInputs {
        image: sets(4, 3, 5, rng),
        text: sets(4, 3, 5, rng),
        image_aug: Some(sets(4, 3, 5, rng)),
        text_aug: Some(sets(4, 3, 5, rng)),
        ssl_views: Some((unit_vectors(4, 5, rng), unit_vectors(4, 5, rng))),
        tss: Some(rng.random_range(0.5..4.0)),
        neighbors: Some(unit_vectors(4, 5, rng)),
    }
}

fn identities_composition() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for k in 0..20 {
        let inputs = composite_inputs(&mut rng);
        let tau = rng.random_range(0.05..1.0);
        let de = LossConfig::for_variant(Variant::Declip);
        let b = declip_loss(&inputs, &de, tau).map_err(err)?;
        close(&format!("declip reconstruction #{k}"), b.reconstruct_total(&de.weights()), b.total, 1e-12)?;
        let dfc = LossConfig::for_variant(Variant::Defilip);
        let df = defilip_loss(&inputs, &dfc, tau).map_err(err)?;
        close(
            &format!("defilip - declip #{k}"),
            df.total - b.total,
            dfc.lambda * df.get(Term::Fas).unwrap_or(f64::NAN),
            1e-12,
        )?;
        let clip = clip_breakdown(&inputs.image, &inputs.text, tau).map_err(err)?.total;
        for v in Variant::ALL {
            let mut c = LossConfig::for_variant(v);
            if !c.clip {
                continue;
            }
            (c.alpha, c.beta, c.gamma, c.lambda, c.alpha_slip) = (0.0, 0.0, 0.0, 0.0, 0.0);
            let total = evaluate(&inputs, &c, tau).map_err(err)?.total;
            ensure(total == clip, || format!("zero weights #{k}: {v} gives {total}, CLIP gives {clip}"))?;
        }
    }
    Ok("20 instances".into())
}

fn fixtures_optimizer() -> CheckResult {
    let s = TrainConfig::default().schedule(13);
    close("lr at step 0", s.lr_at(0), 1e-4, 0.0)?;
    close("lr after warmup", s.lr_at(s.warmup_steps), 1e-3, 1e-15)?;
    close("lr at the end", s.lr_at(s.total_steps), 0.0, 1e-12)?;

    let mut store = ParamStore::new();
    store.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).map_err(err)?, true);
    let before = store.get(store.ids().next().expect("one param")).clone();
    let grads = vec![Some(Tensor::new(vec![3], vec![0.3, -4.0, 1e-3]).map_err(err)?)];
    let mut state = AdamState::new(&store);
    let config = crate::trainer::AdamConfig {
        eps: 1e-14,
        weight_decay: 0.0,
        ..TrainConfig::default().adam()
    };
    adamw_step(&mut store, &grads, &mut state, 1e-3, &config).map_err(err)?;
    let after = store.tensors().remove(0);
    for ((x, y), g) in before.data().iter().zip(after.data()).zip(grads[0].as_ref().map(Tensor::data).unwrap_or(&[])) {
        close("first AdamW step", y - x, -1e-3 * g.signum(), 1e-12)?;
    }
    let zeros = vec![Some(Tensor::zeros(&[3]))];
    let decayed = crate::trainer::AdamConfig {
        weight_decay: 0.1,
        ..config
    };
    let mut state = AdamState::new(&store);
    adamw_step(&mut store, &zeros, &mut state, 1e-3, &decayed).map_err(err)?;
    for (x, y) in after.data().iter().zip(store.tensors()[0].data()) {
        close("decoupled decay", *y, x * (1.0 - 0.1 * 1e-3), 1e-15)?;
    }
    Ok("schedule endpoints, first step, decay".into())
}

fn fixtures_corpus() -> CheckResult {
    let r = analyze(["a b", "a b c d"]);
    ensure(r.examples == 2 && r.mean_length == 3.0 && r.english_ratio == 1.0 && r.unique_tokens == 4, || {
        format!("two-caption fixture: {r:?}")
    })?;
    close("two-caption std", r.std_length, 1.0, 0.0)?;
    close("non-ASCII ratio", analyze(["a ☃"]).english_ratio, 0.5, 0.0)?;
    let empty = analyze([]);
    ensure(empty.examples == 0 && empty.std_length == 0.0 && empty.unique_tokens == 0, || format!("empty corpus: {empty:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let words = ["red", "Blue", "☃", "42", "x", "circle"];
    let corpus: Vec<String> = (0..10_000)
        .map(|_| (0..rng.random_range(0..8)).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" "))
        .collect();
    let single = analyze(corpus.iter().map(String::as_str));
    let mut merged = CorpusStats::new();
    for shard in corpus.chunks(997) {
        let mut s = CorpusStats::new();
        shard.iter().for_each(|c| s.add(c));
        merged.merge(s);
    }
    let m = merged.report();
    ensure(
        m.examples == single.examples
            && m.mean_length == single.mean_length
            && m.std_length == single.std_length
            && (m.caption_english_ratio - single.caption_english_ratio).abs() <= 1e-12
            && m.english_ratio == single.english_ratio
            && m.unique_tokens == single.unique_tokens,
        || format!("shard merge {m:?} vs single pass {single:?}"),
    )?;
    Ok(format!("fixtures, and {} shards of a 10k-caption corpus merge to the single pass", corpus.len().div_ceil(997)))
}
