"""Smoke test for the mmser_py extension module.

Build the module first:

    cargo build --release -p mmser-python --features extension-module

The script loads target/release/libmmser_py.so (or the path given as the
first argument), then exercises the alignment, metrics, gradient check,
corpus generation, training, inference and command-line entry points.
"""

import importlib.machinery
import importlib.util
import json
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_module(path=None):
    if path is None:
        for profile in ("release", "debug"):
            for name in ("libmmser_py.so", "libmmser_py.dylib", "mmser_py.dll"):
                candidate = ROOT / "target" / profile / name
                if candidate.exists():
                    path = candidate
                    break
            if path is not None:
                break
    if path is None:
        sys.exit("mmser_py library not found; build it with cargo first")
    loader = importlib.machinery.ExtensionFileLoader("mmser_py", str(path))
    spec = importlib.util.spec_from_loader("mmser_py", loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def main():
    m = load_module(sys.argv[1] if len(sys.argv) > 1 else None)

    labels, tasks = m.edit_script([5, 6, 9, 8], [5, 7, 8])
    assert labels == ["K", "C", "D", "K"], labels
    assert tasks == [(1, [7, 2])], tasks
    assert abs(m.word_error_rate([5, 6, 8], [5, 7, 8]) - 1 / 3) < 1e-12

    report = json.loads(m.classification_metrics([0, 0, 0, 0], [0, 0, 0, 1], 2))
    assert report["wa"] == 0.75 and report["ua"] == 0.5, report

    grads = dict(m.gradient_check(["d=8", "attention_heads=2"]))
    assert set(grads) >= {"l_er", "l_aed", "l_aec", "l_d", "l_g", "l_lcl", "total"}
    assert max(grads.values()) < 1e-4, grads

    try:
        m.gradient_check(["no_such_key=1"])
    except ValueError:
        pass
    else:
        raise AssertionError("unknown config key accepted")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        small = ["train_size=48", "valid_size=16", "test_size=16", "epochs=3"]
        m.gen_data(str(tmp / "corpus"), small)
        assert (tmp / "corpus" / "train.tsv").exists()
        assert (tmp / "corpus" / "vocab.txt").exists()

        model = m.Model.train(small)
        features = [[0.1 * (i + j) for j in range(16)] for i in range(10)]
        probs = model.predict(features, [10, 11, 12, 13])
        assert len(probs) == 4 and abs(sum(probs) - 1.0) < 1e-9, probs
        corrected = model.correct(features, [10, 11, 12, 13])
        assert all(isinstance(t, int) for t in corrected)

        ckpt = tmp / "model.m4sr"
        model.save(str(ckpt))
        again = m.Model.load(str(ckpt))
        assert again.predict(features, [10, 11, 12, 13]) == probs
        metrics = json.loads(again.evaluate(str(tmp / "corpus" / "test.tsv")))
        assert 0.0 <= metrics["wa"] <= 1.0

        assert m.run_cli(["--no-such-flag"]) == 2
        code = m.run_cli(["gen-data", "--set", "train_size=8", "--set", "valid_size=4",
                          "--set", "test_size=4", "--out", str(tmp / "cli")])
        assert code == 0 and (tmp / "cli" / "effective_config.toml").exists()

    print("python smoke test passed")


if __name__ == "__main__":
    main()
