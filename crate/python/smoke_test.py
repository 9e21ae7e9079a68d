"""Smoke test for the svr extension module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/svr-*.whl
"""

import math
import os
import sys
import tempfile

import svr


def write_dataset(sim, directory):
    obs = os.path.join(directory, "observations.csv")
    cov = os.path.join(directory, "covariates.csv")
    with open(obs, "w") as f:
        f.write("subject_id,group,time,value\n")
        for sid, g, ts, ys in zip(sim["subject_id"], sim["group"], sim["times"], sim["values"]):
            for t, y in zip(ts, ys):
                f.write(f"{sid},{g},{t!r},{y!r}\n")
    with open(cov, "w") as f:
        f.write("subject_id,x1,x2\n")
        for sid, x in zip(sim["subject_id"], sim["covariates"]):
            f.write(f"{sid},{x[1]!r},{x[2]!r}\n")
    return obs, cov


def main():
    g = svr.transition_matrix(3, 1.0)
    assert g == [[1.0, 1.0, 0.5], [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]], g
    w = svr.process_noise(2, 1.0)
    assert abs(w[0][0] - 1 / 3) < 1e-14 and abs(w[0][1] - 0.5) < 1e-14

    assert abs(svr.empirical_volatility([0.0, 1.0, 0.0], [0.0, 1.0, 2.0]) - 2 / 3) < 1e-15

    s = svr.summarize([2.5] * 150)
    assert s["mean"] == 2.5 and s["hpd_lo"] == 2.5 and s["hpd_hi"] == 2.5

    fitted, lam = svr.ncs_fit([0.2, 0.9, 1.3, 2.0, 3.1], [0.1, 1.9, 2.5, 4.1, 6.1])
    assert len(fitted) == 5 and lam > 0

    sim = svr.simulate_case(1, 7, 20)
    assert len(sim["subject_id"]) == 20
    assert all(math.isfinite(v) for v in sim["sigma2_u"])

    try:
        svr.transition_matrix(0, 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("order 0 must be rejected")

    with tempfile.TemporaryDirectory() as tmp:
        obs, cov = write_dataset(sim, tmp)
        out = os.path.join(tmp, "fit")
        table = svr.fit(obs, cov, out, iters=300, burnin=100, thin=2, seed=3)
        names = [row["parameter"] for row in table]
        assert "sigma2_eps" in names and "beta[2]" in names
        for name in ("draws.csv", "summary.csv", "trajectories.csv"):
            assert os.path.exists(os.path.join(out, name)), name
        sim_dir = os.path.join(tmp, "sim")
        svr.run_cli(["simulate", "--seed", "2", "--subjects", "10", "--out", sim_dir])
        assert os.path.exists(os.path.join(sim_dir, "rep_001", "observations.csv"))

    print("svr smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
