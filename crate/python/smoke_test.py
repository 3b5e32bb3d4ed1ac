"""Smoke test for the pygmc extension.

Build and install first, e.g. `pip install ./crates/python --no-build-isolation`
or `maturin develop -m crates/python/Cargo.toml`, then run
`python python/smoke_test.py`.
"""

import math
import pathlib

import pygmc

CONFIGS = pathlib.Path(__file__).resolve().parent.parent / "configs"


def config(name):
    return str(CONFIGS / f"{name}.json")


def main():
    assert [h for h, _ in pygmc.output_sizes(config("vqa_table3"))] == [112, 56, 28, 14, 7]
    assert [h for h, _ in pygmc.output_sizes(config("clevr_table4"))] == [64, 32, 16, 8, 8]

    totals = [pygmc.flops(config("clevr_table4"), k)["conv_macs"] for k in (1, 6, 12)]
    assert (totals[1] - totals[0]) * 11 == (totals[2] - totals[0]) * 5, totals
    try:
        pygmc.flops(config("clevr_table4"), 13)
    except ValueError as e:
        assert "k exceeds cardinality" in str(e)
    else:
        raise AssertionError("k=13 accepted")

    g, fallback = pygmc.normalize_gates([2.0, -1.0, 2.0])
    assert g == [0.5, 0.0, 0.5] and not fallback
    g, fallback = pygmc.normalize_gates([-1.0, -2.0])
    assert g == [0.5, 0.5] and fallback
    assert pygmc.topk_select([0.25, 0.25, 0.5, 0.0], 2) == [0, 2]
    x = [1.0, 2.0, 3.0, 6.0]
    identity = len(x) * sum(v * v for v in x) / sum(x) ** 2 - 1
    assert math.isclose(pygmc.cv_squared(x), identity, abs_tol=1e-12)

    fwd, bwd = pygmc.verify_blocks(20, seed=0)
    assert fwd <= 1e-10 and bwd <= 1e-10, (fwd, bwd)
    fwd32, _ = pygmc.verify_blocks(20, seed=0, dtype="f32")
    assert fwd32 <= 1e-5

    checks = pygmc.gradient_suite()
    assert len(checks) == 13 and max(e for _, e in checks) <= 1e-4, checks

    run = pygmc.train(config("toy_small"), steps=20, seed=3, n_train=256, n_val=64)
    assert len(run["losses"]) == 20 and all(math.isfinite(v) for v in run["losses"])
    assert 0.0 <= run["val_accuracy"] <= 1.0
    assert sum(run["usage"][0]) == 2 * 64
    again = pygmc.train(config("toy_small"), steps=20, seed=3, n_train=256, n_val=64)
    assert again["losses"] == run["losses"]

    print("python smoke test passed")


if __name__ == "__main__":
    main()
