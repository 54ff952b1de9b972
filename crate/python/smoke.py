"""Smoke test for the bridgeflow Python bindings.

Build and install the extension first:

    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/bridgeflow_py-*.whl

then run ``python python/smoke.py``.
"""

import json
import math
import pathlib
import tempfile

import bridgeflow_py as bf


def check(cond, msg):
    if not cond:
        raise AssertionError(msg)
    print(f"ok  {msg}")


def main():
    sys = bf.LinearSystem.builtin("double_integrator")
    check(sys.is_controllable(), "double integrator is controllable")
    phi = sys.gramian(1.0)
    check(abs(phi[0][0] - 1.0 / 3.0) < 1e-12, "Gramian entry matches t^3/3")

    kernel = bf.BridgeKernel(sys)
    r, s, sigma = kernel.coefficients(0.0)
    check(abs(r[0][0] - 1.0) < 1e-12 and abs(s[0][0]) < 1e-12, "mean path starts at x")
    check(len(kernel.gain(0.5)) == sys.m, "gain has m rows")

    traj = kernel.bridges([[1.0, 0.0]] * 200, [[-1.0, 1.0]], seed=3, stride=100)
    end = traj.terminal()
    spread = max(abs(p[0] + 1.0) for p in end)
    check(spread < 0.05, f"bridges pin the endpoint (max miss {spread:.3g})")

    p0 = bf.GaussianMixture.gaussian([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]])
    p1 = bf.GaussianMixture(
        [0.5, 0.5],
        [[3.0, 0.0], [-3.0, 0.0]],
        [[[0.25, 0.0], [0.0, 0.25]]] * 2,
    )
    law = bf.MixtureLaw(kernel, p0, p1)
    w = law.responsibilities(0.5, [0.3, -0.2])
    check(abs(sum(w) - 1.0) < 1e-12, "responsibilities sum to one")

    x0 = p0.sample(500, 1)
    target = p1.sample(500, 2)
    run = law.rollout(x0, seed=4, stride=250)
    start, final = bf.mmd(x0, target), bf.mmd(run.terminal(), target)
    check(final < 0.25 * start, f"closed-form MMD falls from {start:.3f} to {final:.3f}")

    w2_start, _ = bf.w2(x0, target, subsample=None)
    w2_end, _ = bf.w2(run.terminal(), target, subsample=None)
    check(math.isfinite(w2_end) and w2_end < 0.5 * w2_start, f"W2 falls from {w2_start:.3f} to {w2_end:.3f}")

    xs, ys, dens = bf.kde2(run.terminal(), nodes=61)
    mass = sum(dens) * (xs[1] - xs[0]) * (ys[1] - ys[0])
    check(abs(mass - 1.0) < 0.02, f"KDE mass {mass:.4f}")

    learned = bf.LearnedLaw.train(kernel, p0.sample(300, 5), p1.sample(300, 6), seed=7, iterations=300)
    trace = learned.loss_trace
    check(len(trace) == 300 and sum(trace[-50:]) < sum(trace[:50]), "training loss falls")
    check(len(learned.feedback(0.2, [0.0, 0.0])) == sys.m, "learned feedback has m entries")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        params = tmp / "params.json"
        learned.save(params)
        again = bf.LearnedLaw.load(kernel, params)
        check(again.feedback(0.4, [1.0, 2.0]) == learned.feedback(0.4, [1.0, 2.0]), "parameters round trip")

        config = {
            "seed": 3,
            "system": {"name": "oscillator", "epsilon": 1.0},
            "p0": {"kind": "gaussian", "mean": [0.0, 0.0], "cov": [[1.0, 0.0], [0.0, 1.0]]},
            "p1": {"kind": "gaussian", "mean": [2.0, 1.0], "cov": [[0.3, 0.0], [0.0, 0.3]]},
            "law": {"kind": "closed_form"},
            "rollout": {"paths": 200, "stride": 100},
            "eval": {"max_times": 5, "w2": {"subsample": 64, "repeats": 2}},
        }
        cfg = tmp / "run.json"
        cfg.write_text(json.dumps(config))
        out = tmp / "out"
        bf.run("rollout", str(cfg), str(out))
        files = bf.run("eval", str(cfg), str(out))
        manifest = json.loads((out / "manifest.json").read_text())
        listed = {f["path"] for f in manifest["files"]}
        check(all(pathlib.Path(f).name in listed for f in files), "manifest lists the eval outputs")

    print("smoke: all checks passed")


if __name__ == "__main__":
    main()
