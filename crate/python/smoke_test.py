"""Smoke test for the Python bindings.

Build and install first:  pip install --no-build-isolation -e crates/py
"""

import json
import math
import pathlib
import random
import tempfile

import sapsim

ROOT = pathlib.Path(__file__).resolve().parent.parent


def check_formats():
    assert sapsim.format_effect("ratio", 1.10, 1.03, 1.16) == "risk ratio=1.10, 95%CI: 1.03-1.16"
    assert sapsim.format_effect("difference", 0.05, 0.0275, 0.0725) == "5% (95%CI: 2.75-7.25%)"


def check_tmle():
    rng = random.Random(1)
    w, a, y = [], [], []
    for _ in range(400):
        x = rng.gauss(0, 1)
        t = float(rng.random() < 1 / (1 + math.exp(-0.5 * x)))
        w.append([x])
        a.append(t)
        y.append(float(rng.random() < 1 / (1 + math.exp(-(-0.5 + x + 0.8 * t)))))
    est = sapsim.tmle_ate(w, a, y)
    assert est["ci"][0] < est["psi"] < est["ci"][1]
    assert abs(est["ic_mean"]) < 1e-6
    return est


def check_study():
    cfg = json.loads((ROOT / "configs" / "trial_study.json").read_text())
    cfg["dataset"]["path"] = str(ROOT / "data" / "cluster.csv")
    cfg["generator"]["mechanism_file"] = str(ROOT / "data" / "mechanism.json")
    cfg["iterations"] = 100
    cfg["candidates"] = cfg["candidates"][:2]
    with tempfile.TemporaryDirectory() as tmp:
        path = pathlib.Path(tmp) / "study.json"
        path.write_text(json.dumps(cfg))
        sapsim.validate(str(path))
        out = sapsim.run_study(str(path), workers=2, out=str(pathlib.Path(tmp) / "out"))
        for name in ("iterations.csv", "metrics.json", "selection.json", "report.md", "manifest.json"):
            assert (pathlib.Path(tmp) / "out" / name).exists(), name
        again = sapsim.select(json.dumps(out["metrics"]), "trial")
        assert again["winner"] == out["selection"]["winner"]
        return out


def check_errors():
    try:
        sapsim.validate("/nonexistent/config.json")
    except ValueError:
        return
    raise AssertionError("missing config should raise ValueError")


if __name__ == "__main__":
    print(sapsim.version())
    check_formats()
    est = check_tmle()
    print(f"tmle_ate psi={est['psi']:.4f} se={est['se']:.4f}")
    out = check_study()
    print("study winner:", out["selection"]["winner"])
    check_errors()
    print("smoke test passed")
