"""Smoke test for the dfdepth_py extension.

Build and install first:

    pip install --no-build-isolation ./crates/py
    python python/smoke_test.py
"""

import json
import math
import tempfile
from pathlib import Path

import numpy as np

import dfdepth_py as dd


def check_sample():
    cfg = dd.DomainConfig.target()
    s = dd.generate_sample(cfg, 3)
    h, w = cfg.image_size
    rgb = np.asarray(s.rgb, dtype=np.float32).reshape(h, w, 3)
    depth = np.asarray(s.depth).reshape(h, w)
    assert rgb.min() >= 0.0 and rgb.max() <= 1.0
    lo, hi = cfg.depth_range
    assert depth.min() >= lo - 1e-4 and depth.max() <= hi + 1e-4
    again = dd.generate_sample(cfg, 3)
    assert again.rgb == s.rgb, "generation must be deterministic"
    return s


def check_mixing(a):
    b = dd.generate_sample(dd.DomainConfig.ood(), 7)
    r = dd.classmix(a, b, 11)
    rgb_a = np.asarray(a.rgb).reshape(-1, 3)
    rgb_b = np.asarray(b.rgb).reshape(-1, 3)
    mixed = np.asarray(r["rgb"]).reshape(-1, 3)
    mask = np.asarray(r["mask"], dtype=bool)
    assert np.array_equal(mixed[mask], rgb_a[mask])
    assert np.array_equal(mixed[~mask], rgb_b[~mask])


def check_metrics():
    m = dd.depth_metrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert m["rel"] == 0.0 and m["delta1"] == 1.0
    loss = dd.depth_loss([1.0] * 4, [1.0] * 4, (1, 2, 2))
    assert abs(loss["total"] - 3 * math.log(0.5)) < 1e-12
    p = dd.depth_histogram([1.0, 2.0, 3.0])
    assert len(p) == dd.JSD_BINS and abs(sum(p) - 1.0) < 1e-12
    assert dd.jsd(p, p) == 0.0
    try:
        dd.depth_metrics([1.0], [0.0])
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")


def check_nets(tmp):
    net = dd.DepthNet.student(16, 16, seed=1)
    x = np.random.default_rng(0).random((2, 3, 16, 16), dtype=np.float32)
    y = np.asarray(net.predict(x.ravel().tolist(), 2)).reshape(2, 1, 16, 16)
    assert (y > 0).all() and (y <= 10.0).all()
    adv = np.asarray(net.attack(x.ravel().tolist(), 2, 4 / 255)).reshape(x.shape)
    assert np.abs(adv.astype(np.float64) - x.astype(np.float64)).max() <= 4 / 255
    path = tmp / "student.ckpt"
    net.save(path)
    back = dd.DepthNet.load(path)
    assert back.role == "student" and back.param_count == net.param_count
    assert back.predict(x.ravel().tolist(), 2) == y.ravel().tolist()
    stats = net.batch_stats(x.ravel().tolist(), 2)
    assert len(stats) > 0 and all(len(m) == len(v) for m, v in stats)


def check_experiment(tmp):
    cfg = json.loads(dd.Experiment().to_json())
    for d in ("domain_a", "domain_b"):
        cfg[d]["image_size"] = [16, 16]
    for n in ("teacher", "student"):
        cfg[n]["input_size"] = [16, 16]
    cfg["sizes"] = {"train_a": 6, "test_a": 4, "ood": 6}
    cfg["teacher_train"].update(epochs=1, batch_size=3)
    cfg["train"].update(epochs=1, batch_size=3)
    cfg["output_root"] = str(tmp / "runs")
    exp = dd.Experiment(json.dumps(cfg))
    exp.generate()
    runs = []
    for method in ("teacher_supervised", "kd_ood", "datafree_full"):
        rec = json.loads(exp.run(method, 0))
        assert rec["method"] == method and rec["metrics"]["delta1"] >= 0.0
        runs.append(str(tmp / "runs" / f"{method}-seed0"))
    report = json.loads(dd.make_report(runs, str(tmp / "report")))
    assert [r["method"] for r in report["rows"]] == ["teacher_supervised", "kd_ood", "datafree_full"]
    assert (tmp / "report" / "metrics.json").is_file()
    try:
        exp.run("nope")
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")
    assert set(dd.methods()) >= {"kd_ood", "random_noise_kd"}


def main():
    with tempfile.TemporaryDirectory() as d:
        tmp = Path(d)
        s = check_sample()
        check_mixing(s)
        check_metrics()
        check_nets(tmp)
        check_experiment(tmp)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
