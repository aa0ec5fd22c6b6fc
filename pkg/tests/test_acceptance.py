"""Acceptance criteria, one test each; every test records a PASS/FAIL line."""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from babfl import cli, oracles
from babfl.gaussian import DiagGaussian, kl_divergence, log_density, sample, w2_squared

BAYES_METHODS = ["RKLB", "WB", "EAA", "GAA", "AALV"]


def timed(fn, *args, **kwargs):
    t = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t


def suite_detail(results, seconds):
    worst = max(r.residual / r.tolerance for r in results)
    failed = sum(not r.passed for r in results)
    return f"{len(results) - failed}/{len(results)} cases, worst residual/tol {worst:.3g}, {seconds:.1f}s"


def test_barycenter_optimality(report):
    results, seconds = timed(oracles.barycenter_suite, n_instances=200, starts=10, tol=1e-6)
    ok = all(r.passed for r in results) and len(results) == 400 and seconds < 60
    assert report(1, ok, suite_detail(results, seconds))


def test_discrete_alpha_barycenter(report):
    results, seconds = timed(oracles.alpha_suite, n_instances=50, tol=1e-4, limit_tol=1e-5)
    alphas = {r.case.split("[")[0] for r in results}
    ok = all(r.passed for r in results) and seconds < 60 and len(results) == 250
    assert report(2, ok, suite_detail(results, seconds) + f" over {sorted(alphas)}")


def test_reparametrization_identity(report):
    results, seconds = timed(oracles.reparam_suite, n_instances=100, tol=1e-10, federated=True)
    federated = [r for r in results if r.case.startswith("federated")]
    ok = all(r.passed for r in results) and len(federated) == 2
    fed = ", ".join(f"{r.case}={r.residual:.1e}" for r in federated)
    assert report(3, ok, suite_detail(results, seconds) + f"; {fed}")


def test_dirac_limit(report):
    results, seconds = timed(oracles.dirac_suite)
    eps_cases = {eps: [r for r in results if f"eps={eps:g}" in r.case] for eps in (1e-6, 1e-8, 1e-10)}
    frozen = [r for r in results if r.case.startswith("frozen")]
    ok = all(r.passed for r in results) and all(eps_cases.values()) and len(frozen) == 4
    worst_frozen = max(r.residual for r in frozen)
    assert report(4, ok, suite_detail(results, seconds) + f"; frozen-variance max gap {worst_frozen:.1e}")


def test_gradient_correctness(report):
    results, seconds = timed(oracles.gradient_suite, n_nets=20, tol=1e-4)
    sizes = [int(r.case.split("params=")[1].split()[0]) for r in results]
    ok = all(r.passed for r in results) and max(sizes) <= 50 and seconds < 30
    assert report(5, ok, suite_detail(results, seconds) + f", max params {max(sizes)}")


def test_divergence_cross_checks(report):
    rng = np.random.default_rng(2024)
    n = 10**6
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 4))
        p = DiagGaussian(rng.uniform(-2, 2, d), rng.uniform(0.2, 3, d))
        q = DiagGaussian(rng.uniform(-2, 2, d), rng.uniform(0.2, 3, d))
        z = rng.standard_normal((n, d))
        # KL: Monte-Carlo of E_p[ln p - ln q]
        x = sample(p, z)
        lr = log_density(p, x) - log_density(q, x)
        worst = max(worst, abs(lr.mean() - kl_divergence(p, q)) / (lr.std() / math.sqrt(n)))
        # W2^2: cost of the comonotone coupling, which is optimal for product Gaussians
        cost = np.sum((sample(p, z) - sample(q, z)) ** 2, axis=1)
        se = cost.std() / math.sqrt(n)
        worst = max(worst, abs(cost.mean() - w2_squared(p, q)) / se)
    assert report(6, worst < 3, f"20 pairs, worst deviation {worst:.2f} standard errors (limit 3)")


def _run_defaults(tmp_path, *overrides):
    cfg = cli.resolve_config(None, [f"output_dir={tmp_path}", *overrides], env={})
    cli.cmd_run(cfg)
    return cfg


def _final_row(path):
    lines = Path(path).read_text().splitlines()
    header, last = lines[0].split(","), lines[-1].split(",")
    return dict(zip(header, last))


@pytest.mark.slow
def test_end_to_end_desk_scale(report, tmp_path):
    start = time.perf_counter()
    cfg = _run_defaults(tmp_path, "federation.method=" + ",".join(BAYES_METHODS))
    seconds = time.perf_counter() - start
    assert cfg["partition"]["n_clients"] == 10 and cfg["partition"]["alpha"] == 0.5
    assert cfg["model"]["n_bayesian_layers"] == 1 and cfg["federation"]["rounds"] == 20 and cfg["train"]["epochs"] == 5
    finals = {m: _final_row(tmp_path / f"{m}_nbl1_seed0.csv") for m in BAYES_METHODS}
    ok = seconds < 300
    parts = []
    for m, row in finals.items():
        acc, nll = float(row["accuracy"]), float(row["nll"])
        ok &= acc >= 0.90 and nll <= 0.5
        parts.append(f"{m} acc={acc:.3f} nll={nll:.3f}")
    assert report(7, ok, "; ".join(parts) + f"; {seconds:.1f}s")


@pytest.mark.slow
def test_bayesian_layers_calibration_trend(report, tmp_path):
    ece = {0: [], 3: []}
    for seed in range(5):
        for n, method in ((0, "FEDAVG"), (3, "RKLB")):
            out = tmp_path / f"s{seed}n{n}"
            _run_defaults(out, f"seed={seed}", "model.hidden=[32, 32, 32]", f"model.n_bayesian_layers={n}",
                          f"federation.method={method}")
            ece[n].append(float(_final_row(out / f"{method}_nbl{n}_seed{seed}.csv")["ece"]))
    m0, m3 = np.mean(ece[0]), np.mean(ece[3])
    detail = f"mean ECE n=3 {m3:.4f} vs n=0 {m0:.4f} over seeds 0-4"
    assert report(8, m3 <= m0, detail)


FASHION_DIR = Path(os.environ.get("BABFL_FASHION_DIR", "data/fashion"))
FASHION_FILES = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]


def _fashion_paths():
    found = []
    for name in FASHION_FILES:
        for candidate in (FASHION_DIR / name, FASHION_DIR / f"{name}.gz"):
            if candidate.exists():
                found.append(candidate)
                break
    return found if len(found) == 4 else None


@pytest.mark.slow
def test_fashion_mnist_sanity(report, tmp_path):
    paths = _fashion_paths()
    if paths is None:
        report(9, None, f"IDX files not found under {FASHION_DIR} (set BABFL_FASHION_DIR)")
        pytest.skip("FashionMNIST IDX files absent")
    keys = ["train_images", "train_labels", "test_images", "test_labels"]
    start = time.perf_counter()
    _run_defaults(tmp_path, "dataset.kind=idx", *[f"dataset.{k}={p}" for k, p in zip(keys, paths)],
                  "model.hidden=[128]", "federation.method=RKLB,WB", "train.batch_size=64", "eval.samples=8")
    seconds = time.perf_counter() - start
    accs = {m: float(_final_row(tmp_path / f"{m}_nbl1_seed0.csv")["accuracy"]) for m in ("RKLB", "WB")}
    ok = all(a >= 0.75 for a in accs.values()) and seconds < 1800
    assert report(9, ok, " ".join(f"{m} acc={a:.3f}" for m, a in accs.items()) + f"; {seconds:.0f}s")


@pytest.mark.slow
def test_determinism(report, tmp_path):
    methods = "federation.method=RKLB,WB,EAA,GAA,AALV"
    _run_defaults(tmp_path / "a", methods, "threads=1")
    _run_defaults(tmp_path / "b", methods, "threads=1")
    _run_defaults(tmp_path / "c", methods, "threads=4")
    names = sorted(p.name for p in (tmp_path / "a").glob("*_seed0.csv"))
    same = all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / d / f).read_bytes() for f in names for d in ("b", "c")
    )
    assert report(10, same and len(names) == 5, f"{len(names)} CSVs byte-identical across reruns and --threads 1/4: {same}")
