"""Smoke test for the qrgmm Python module.

Build and install the extension first:

    pip install --no-build-isolation -e crates/py
    python python/smoke_test.py
"""

import math
import os
import tempfile

import qrgmm


def main():
    data = qrgmm.synth_sales(2000, categories=4, sellers=6, continuous=2, seed=3)
    assert len(data) == 2000
    assert data.field_names == ["category", "seller", "x0", "x1"]
    train, test = data.split(0.8, seed=1)
    assert train.n + test.n == data.n

    model = qrgmm.Model.fit(train, m=20)
    assert model.kind == "linear_qr" and model.m == 20
    x = {"category": "L1", "seller": "L2", "x0": 0.5, "x1": 0.25}

    q = model.quantiles(x)
    assert len(q) == 19 and q == sorted(q)

    a = model.sample(x, 10_000, seed=5)
    assert a == model.sample(x, 10_000, seed=5)
    assert a != model.sample(x, 10_000, seed=6)
    assert q[0] <= min(a) and max(a) <= q[-1]

    tau_hat = model.calibration(test)
    assert len(tau_hat) == 19
    assert max(abs(t - (j + 1) / 20) for j, t in enumerate(tau_hat)) < 0.1

    closed = model.risk_curve(x, 1.5, loss="default_probability")
    assert len(closed["r1"]) == 100
    assert closed["r1"] == closed["r3"]
    assert all(p <= n for p, n in zip(closed["r1"], closed["r1"][1:]))

    l_bar = closed["l_bar"]
    mc = model.risk_curve(x, 1.5, l_bar=l_bar, points=5, mc_k=200_000, seed=2)
    exact = model.risk_curve(x, 1.5, l_bar=l_bar, points=5)
    for est, se, ref in zip(mc["r2"], mc["se_r2"], exact["r2"]):
        assert abs(est - ref) <= 4 * se + 1e-12, (est, ref, se)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.json")
        assert model.save(path) == model.id
        again = qrgmm.Model.load(path)
        assert again.id == model.id
        assert again.quantiles(x) == q

    try:
        model.quantiles({**x, "seller": "L99"})
    except qrgmm.UnseenLevelError as e:
        assert "L99" in str(e)
    else:
        raise AssertionError("unseen level accepted")
    assert issubclass(qrgmm.UnseenLevelError, ValueError)

    fm = qrgmm.Model.fit(train, estimator="deepfm", m=20, seed=1, config='{"epochs": 5}')
    assert fm.kind == "deep_fm"
    assert all(math.isfinite(v) for v in fm.quantiles(x))

    print(f"qrgmm {qrgmm.__version__}: smoke test passed ({model!r})")


if __name__ == "__main__":
    main()
