"""Smoke test for the flosslab Python extension.

Build and install first:

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/flosslab-*.whl

Then run ``python python/smoke_test.py``.
"""

import csv
import io
import math

import flosslab


def main():
    names = flosslab.presets()
    assert "fig1_targets" in names and "convergence_trace" in names, names

    defaults = dict(flosslab.preset_defaults("convergence_trace"))
    assert "n_units" in defaults, defaults

    lam = flosslab.lyapunov_spectrum("vanilla_tanh", 16, 1.5, 4, 500, transient=100, seed=7)
    assert len(lam) == 4 and all(math.isfinite(x) for x in lam), lam
    assert lam == flosslab.lyapunov_spectrum("vanilla_tanh", 16, 1.5, 4, 500, transient=100, seed=7)

    losses, exps = flosslab.floss("vanilla_tanh", 8, 1.0, 2, 5, t_floss=20, targets=[-0.5, -0.5], seed=1)
    assert len(losses) == 5 and len(exps) == 5

    tables = flosslab.run_preset(
        "convergence_trace",
        seed=0,
        overrides={"n_units": 6, "k": 2, "t_sim": 100, "t_transient": 10, "points": 3},
    )
    for name, text in tables.items():
        rows = list(csv.reader(io.StringIO(text)))
        assert len(rows) > 1, name

    for bad in (
        lambda: flosslab.run_preset("no_such_preset"),
        lambda: flosslab.run_preset("convergence_trace", overrides={"bogus": 1}),
        lambda: flosslab.run_preset("convergence_trace", overrides={"n_units": {"a": 1}}),
        lambda: flosslab.lyapunov_spectrum("gru", 4, 1.0, 1, 10),
    ):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")

    print(f"flosslab {flosslab.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
