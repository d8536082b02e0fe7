"""Smoke test for the pyclipbench extension.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/pyclipbench-*.whl
Then run:  python python/smoke_test.py
"""

import math
import sys
import tempfile
from pathlib import Path

import pyclipbench as cb

TINY = {
    "model.image.patch_size": 16,
    "model.image.width": 16,
    "model.image.depth": 1,
    "model.image.heads": 2,
    "model.image.embed_dim": 8,
    "model.text.width": 16,
    "model.text.depth": 1,
    "model.text.heads": 2,
    "model.text.embed_dim": 8,
    "model.text.vocab_size": 64,
    "data.synthetic.classes": 3,
    "data.synthetic.train_per_class": 8,
    "data.synthetic.val_per_class": 2,
    "train.batch_size": 8,
    "train.epochs": 2,
    "loss.queue_capacity": 16,
}


def check(cond, what):
    if not cond:
        raise AssertionError(what)
    print(f"ok  {what}")


def main():
    check(set(cb.VARIANTS) == {"clip", "slip", "filip", "declip", "defilip"}, "variants exported")

    # closed forms
    check(abs(cb.info_nce([[1.0, 0.0]], [[1.0, 0.0]], 0.5)) < 1e-12, "info_nce with one pair is zero")
    e = [[1.0, 0.0], [0.0, 1.0]]
    check(abs(cb.info_nce(e, e, 1.0) - math.log(1 + math.exp(-1))) < 1e-9, "orthonormal info_nce")

    # corpus statistics
    r = cb.corpus_stats(["a b", "a b c d"])
    check(r["caption_length_mean"] == 3.0 and r["caption_length_std"] == 1.0, "corpus fixture")
    left, right = cb.CorpusStats(), cb.CorpusStats()
    left.add("a b")
    right.extend(["a b c d"])
    left.merge(right)
    check(left.report() == r, "shard merge equals single pass")

    # oracle suite (cheap checks)
    results = cb.run_verify(["oracle", "fixtures"])
    check(results and all(passed for _, passed, _ in results), f"{len(results)} verify checks pass")

    # configuration errors surface as ValueError
    try:
        cb.Config(overrides={"train.variant": "bogus"})
        check(False, "unknown variant rejected")
    except ValueError as err:
        check("defilip" in str(err), "unknown variant rejected")

    with tempfile.TemporaryDirectory() as tmp:
        cfg = cb.Config(overrides={**TINY, "train.variant": "defilip", "out_dir": str(Path(tmp) / "run")})
        check(cfg.variant == "defilip" and "epochs = 2" in cfg.to_toml(), "config resolves")

        t = cb.Trainer(cfg)
        first = t.step()
        check(math.isfinite(first["loss"]) and "L_FAS" in first["terms"], "step reports DeFILIP terms")
        ckpt = str(Path(tmp) / "mid.ckpt")
        t.save(ckpt)
        expected = t.step()["log_line"]
        resumed = cb.Trainer.resume(ckpt, cfg)
        check(resumed.step()["log_line"] == expected, "resume reproduces the next step")

        acc = cb.Trainer(cfg).run()
        check(acc is not None and 0.0 <= acc <= 1.0, f"full run finishes (val top-1 {acc:.3f})")

        model = cb.Model.load(str(Path(tmp) / "run" / "final.ckpt"))
        emb = model.encode_text(["a photo of a red circle.", "blue triangle"])
        check(len(emb) == 2 and abs(sum(x * x for x in emb[0]) - 1.0) < 1e-9, "text embeddings are unit norm")
        check(model.parameter_count > 0 and model.temperature > 0, "model metadata")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
