use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<R>(f: impl FnOnce(Python<'_>, &Bound<'_, PyDict>) -> R) -> R {
    Python::initialize();
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(pyclipbench::pyclipbench)(py);
        let globals = PyDict::new(py);
        globals.set_item("cb", module).unwrap();
        f(py, &globals)
    })
}

fn run(code: &std::ffi::CStr) {
    with_module(|py, g| {
        if let Err(e) = py.run(code, Some(g), None) {
            e.display(py);
            panic!("python raised");
        }
    })
}

#[test]
fn closed_forms_and_corpus() {
    run(c"
import math
assert cb.info_nce([[1.0, 0.0]], [[1.0, 0.0]], 0.5) == 0.0
e = [[1.0, 0.0], [0.0, 1.0]]
assert abs(cb.info_nce(e, e, 1.0) - math.log(1 + math.exp(-1))) < 1e-9
r = cb.corpus_stats(['a b', 'a b c d'])
assert r['caption_length_mean'] == 3.0 and r['caption_length_std'] == 1.0, r
s = cb.CorpusStats(); s.extend(['a b', 'a b c d'])
assert s.report() == r
");
}

#[test]
fn config_errors_map_to_python_exceptions() {
    run(c"
try:
    cb.Config(overrides={'train.variant': 'bogus'})
    raise SystemExit('accepted')
except ValueError as e:
    assert 'defilip' in str(e)
try:
    cb.Config(overrides={'train.epochs': [1]})
    raise SystemExit('accepted')
except ValueError:
    pass
try:
    cb.Config(path='/nonexistent/config.toml')
    raise SystemExit('accepted')
except OSError:
    pass
c = cb.Config(overrides={'train.epochs': 3, 'train.peak_lr': 0.002, 'train.variant': 'slip'})
assert c.variant == 'slip'
t = c.to_toml()
assert 'epochs = 3' in t and 'peak_lr = 0.002' in t
");
}

#[test]
fn trainer_steps_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("mid.ckpt");
    with_module(|py, g| {
        g.set_item("ckpt", ckpt.to_str().unwrap()).unwrap();
        let code = c"
over = {
    'model.image.patch_size': 16, 'model.image.width': 16, 'model.image.depth': 1,
    'model.image.heads': 2, 'model.image.embed_dim': 8,
    'model.text.width': 16, 'model.text.depth': 1, 'model.text.heads': 2,
    'model.text.embed_dim': 8, 'model.text.vocab_size': 64,
    'data.synthetic.classes': 2, 'data.synthetic.train_per_class': 4,
    'data.synthetic.val_per_class': 1, 'train.batch_size': 4, 'train.epochs': 2,
    'loss.queue_capacity': 8, 'train.variant': 'declip',
}
c = cb.Config(overrides=over)
t = cb.Trainer(c)
r = t.step()
assert r['step'] == 0 and set(r['terms']) >= {'L_CLIP', 'L_ISS', 'L_TSS', 'L_MVS', 'L_NNS'}, r
t.save(ckpt)
nxt = t.step()['log_line']
assert cb.Trainer.resume(ckpt, c).step()['log_line'] == nxt
assert t.step_count == 2 and t.total_steps == 4
assert 0.0 <= t.evaluate() <= 1.0
";
        if let Err(e) = py.run(code, Some(g), None) {
            e.display(py);
            panic!("python raised");
        }
    });
}
