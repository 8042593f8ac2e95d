"""Build the extension module, import it, and exercise every binding.

Run from anywhere: python3 python/smoke_test.py
"""

import math
import os
import shutil
import subprocess
import sys
import sysconfig
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build_module(dest):
    subprocess.run(
        ["cargo", "build", "--release", "-p", "ufm-lab-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    libdir = os.path.join(ROOT, "target", "release")
    for name in ("libufm_lab_py.so", "libufm_lab_py.dylib", "ufm_lab_py.dll"):
        src = os.path.join(libdir, name)
        if os.path.exists(src):
            suffix = ".pyd" if name.endswith(".dll") else ".so"
            shutil.copy(src, os.path.join(dest, "ufm_lab" + suffix))
            return
    sys.exit("built library not found in " + libdir)


def close(a, b, tol):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    dest = tempfile.mkdtemp()
    build_module(dest)
    sys.path.insert(0, dest)
    import ufm_lab as u

    cfg = u.ProblemConfig(4, 3, 6, 0.1, 5e-3)
    assert cfg.num_samples() == 12
    assert cfg.regime_threshold() < 1.0
    a = cfg.logit_scale()
    p_t, p_n = cfg.class_probabilities()
    assert close(p_t + 3 * p_n, 1.0, 1e-12)

    w, h, b = u.global_minimizer(cfg)
    assert (len(w), len(w[0]), len(h[0])) == (6, 4, 12)
    gw, gh, gb = u.gradient(cfg, w, h, b)
    gnorm = math.sqrt(sum(x * x for m in (gw, gh) for r in m for x in r) + sum(x * x for x in gb))
    assert gnorm < 1e-8, gnorm
    assert close(u.loss(cfg, w, h, b), cfg.optimal_loss(), 1e-12)

    nc = u.nc_metrics(cfg, w, h, b)
    assert nc["nc1"] < 1e-8 and nc["nc2"] < 1e-8 and nc["nc3"] < 1e-8, nc

    s = u.spectra(cfg)
    assert close(s["kappa_classifier"], 4 * p_t, 1e-10)
    assert s["max_relative_deviation"] < 1e-6

    run = u.run_descent(u.ProblemConfig(3, 2, 4, 0.1, 5e-3), record_every=50)
    assert run["converged"] and run["trajectory"][-1]["loss_gap"] < 1e-10

    logits = [[3.0, 0.0, 0.0], [0.0, 2.0, 0.0], [1.0, 0.0, 0.5], [0.0, 0.0, 4.0]]
    labels = [0, 0, 2, 2]
    e, bins = u.ece(logits, labels, 10)
    assert 0.0 <= e <= 1.0 and sum(c for *_, c in bins) == 4
    t, before, after = u.fit_temperature(logits, labels)
    assert after <= before and t > 0
    assert close(u.prediction_entropy([[0.0, 0.0, 0.0]]), math.log(3), 1e-12)
    assert close(u.nuclear_norm([[3.0, 0.0], [0.0, -4.0]]), 7.0, 1e-12)
    assert all(ok for _, ok, _ in u.run_checks())

    try:
        u.ProblemConfig(5, 2, 3, 0.1, 5e-3)
    except ValueError:
        pass
    else:
        raise AssertionError("d < K accepted")

    print("python smoke test passed (a_delta = %.6f, python %s)" % (a, sysconfig.get_python_version()))


if __name__ == "__main__":
    main()
