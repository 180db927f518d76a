"""Smoke test for the psn extension module.

Build and stage the module first:

    cargo build --release -p psn-py
    cp target/release/libpsn.so python/psn.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import psn  # noqa: E402


def check_metrics():
    assert psn.auc([0.9, 0.8, 0.2, 0.1], [True, True, False, False]) == 1.0
    rows = psn.sweep([0.9, 0.6, 0.4, 0.7], [True, True, False, False], [0.65])
    assert rows == [(0.65, 0.5, 0.5, 0.5)], rows
    assert len(psn.sweep([0.3, 0.6], [False, True])) == 1001
    assert psn.top_k_accuracy([[0.9, 0.1], [0.1, 0.9]], 1) == 1.0
    assert psn.top_k_accuracy([[0.5, 0.5], [0.5, 0.5]], 1) == 0.0
    out = psn.preprocess([0.0, 1.0, 2.0, 3.0])
    assert all(math.isclose(a, b, abs_tol=1e-6) for a, b in zip(out, [-0.5, -1 / 6, 1 / 6, 0.5]))
    try:
        psn.auc([0.1, 0.2], [True, True])
    except ValueError:
        pass
    else:
        raise AssertionError("single-class input must raise")


def check_pipeline(tmp):
    config = os.path.join(tmp, "tiny.cfg")
    with open(config, "w") as f:
        f.write(
            "scenes = 2\nscene_height = 340\nscene_width = 340\ntarget_pairs = 60\n"
            f"pool = {tmp}/pool.pspl\nepochs = 1\nbatch_size = 8\neval_chunk = 16\n"
        )
    log, paths = psn.run("generate", config, patch_size=64)
    assert "train" in log and os.path.exists(paths[0])
    train, val, test = psn.pool_counts(paths[0])
    assert train > val > 0 and test > 0

    out = os.path.join(tmp, "run")
    log, paths = psn.run("train", config, patch_size=64, out=out)
    assert "epoch 1" in log
    model = psn.Model.load(out + ".ckpt")
    assert model.patch_size == 64 and model.parameter_count > 1_000_000
    flat = [0.0] * (64 * 64)
    ramp = [((i % 64) - 31.5) / 64 for i in range(64 * 64)]
    scores = model.score([flat, ramp], [flat, ramp])
    assert len(scores) == 2 and all(0.0 <= s <= 1.0 for s in scores)
    assert math.isclose(scores[0], model.score([flat], [flat])[0], rel_tol=1e-6)

    try:
        psn.run("generate", config, patch_size=63)
    except RuntimeError as e:
        assert "63" in str(e)
    else:
        raise AssertionError("patch size 63 must be rejected")


if __name__ == "__main__":
    check_metrics()
    with tempfile.TemporaryDirectory() as tmp:
        check_pipeline(tmp)
    print("smoke test passed")
