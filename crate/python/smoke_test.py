"""Smoke test for the `qnn` extension module.

Build and stage the module first:

    cargo build -p qnn-py --release --features extension-module
    cp target/release/libqnn.so python/qnn.so
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import qnn  # noqa: E402


def check_algebra():
    i, j, k = qnn.Quaternion(0, 1, 0, 0), qnn.Quaternion(0, 0, 1, 0), qnn.Quaternion(0, 0, 0, 1)
    assert i * j == k
    assert j * i == -k
    assert qnn.hamilton(i, i) == qnn.Quaternion(-1, 0, 0, 0)
    p, q = qnn.Quaternion(1, 2, -0.5, 3), qnn.Quaternion(-2, 0.25, 1, 4)
    assert math.isclose((p * q).norm(), p.norm() * q.norm(), rel_tol=1e-12)
    m = p.to_matrix()
    col = [sum(m[r][c] * q.to_list()[c] for c in range(4)) for r in range(4)]
    assert all(math.isclose(a, b, abs_tol=1e-12) for a, b in zip(col, (p * q).to_list()))
    assert math.isclose(p.normalize().norm(), 1.0, rel_tol=1e-12)


def check_encoder():
    rows = [[math.sin(0.3 * t + d) for d in range(12)] for t in range(5)]
    out = qnn.r2h_forward(rows, 16, activation="tanh", normalized=True, seed=3)
    assert len(out) == 5 and len(out[0]) == 16
    q = 4
    for row in out:
        for h in range(q):
            n = math.sqrt(sum(row[c * q + h] ** 2 for c in range(4)))
            assert abs(n - 1.0) < 1e-6, n


def check_config():
    cfg = qnn.ModelConfig(classes=2000)
    counts = qnn.count_params(cfg)
    lstm = qnn.ModelConfig(classes=2000, stack="lstm")
    ratio = qnn.count_params(lstm)["recurrent_weights"] / counts["recurrent_weights"]
    assert ratio == 4.0, ratio
    try:
        qnn.ModelConfig(hidden=7)
    except ValueError:
        pass
    else:
        raise AssertionError("invalid width accepted")


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        files = qnn.synth(tmp, seed=5, train=24, valid=8, test=8, classes=4, dim=12)
        utts = qnn.read_features(files["train"])
        assert len(utts) == 24 and utts[0]["dim"] == 12
        cfg = qnn.ModelConfig(
            input_dim=12, classes=4, r2h_size=16, hidden=16, depth=1,
            epochs=2, batch_size=8, dropout=0.0, seed=5,
        )
        out = os.path.join(tmp, "run")
        reports = qnn.train(cfg, files["train"], files["valid"], out)
        assert [r["epoch"] for r in reports] == [1, 2]
        assert reports[0]["config_digest"] == cfg.digest()
        ev = qnn.evaluate(os.path.join(out, "last.qnn"), files["valid"])
        assert ev["loss"] == reports[-1]["val_loss"], (ev, reports[-1])
        try:
            qnn.read_features(os.path.join(tmp, "missing.qfea"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file accepted")


def check_selfcheck():
    assert qnn.selfcheck(seed=7)["ok"]
    bad = qnn.selfcheck(seed=7, inject_fault="hamilton-sign")
    assert not bad["ok"] and bad["first_failure"][0].startswith("basis table")


if __name__ == "__main__":
    for check in (check_algebra, check_encoder, check_config, check_pipeline, check_selfcheck):
        check()
        print(f"ok  {check.__name__}")
