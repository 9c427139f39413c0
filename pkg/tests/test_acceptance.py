"""The eleven acceptance criteria, each at its stated tolerance.

Run ``pytest tests/test_acceptance.py`` and read the "acceptance criteria"
section of the terminal summary: one PASS/FAIL line per criterion, with the
measured quantities underneath.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from mgbp.backprojection import certify, ibp, invocation_counts, mgbp, unfold_schedule
from mgbp.cli import main
from mgbp.convnet import Activation, Conv, ConvNet, forward, layer_matrix, save_network, toy_network
from mgbp.freeze import effective_residual, explicit_fr, filter_spectrum, freeze, freeze_equivalence
from mgbp.metrics import multiscale_l1, psnr, ssim
from mgbp.resample import (
    ResampleSpec,
    bicubic_kernel,
    downscale,
    gaussian_kernel,
    identity_kernel,
    multi_level_downscale,
    operator_matrix,
    upscale,
)
from mgbp.tensor import BoundaryRule, save_tensor, vectorize, write_image
from oracles import centered_magnitude, dft2_naive, msl1_loop, psnr_formula, ssim_formula


def criterion(n, title):
    return pytest.mark.criterion(n, title)


def net_population(seed=2024, count=20, bias=True):
    """20 toy nets: 2-4 linear layers, conv/strided/transposed mix, ReLU or leaky-ReLU, 8..16 inputs."""
    rng = np.random.default_rng(seed)
    population = []
    for _ in range(count):
        net = toy_network(rng, n_linear=int(rng.integers(2, 5)),
                          activation=str(rng.choice(["relu", "leaky-relu"])), bias=bias)
        size = int(rng.integers(8, 17))
        population.append((net, rng.normal(size=(size, size, 1))))
    return population


@criterion(1, "freeze exactness: forward == frozen forward, F vec(u) + R == frozen(u)")
def test_freeze_exactness(record_property):
    start = time.perf_counter()
    worst_eq = worst_fr = 0.0
    kinds = set()
    rng = np.random.default_rng(7)
    for net, x in net_population():
        kinds |= {layer.kind for layer in net.layers if isinstance(layer, Conv)}
        ref = forward(net, x)
        rel = freeze_equivalence(net, x) / max(1.0, float(np.abs(ref).max()))
        worst_eq = max(worst_eq, rel)
        F, R = explicit_fr(net, x)
        system = freeze(net, x)
        for _ in range(10):
            u = rng.normal(size=x.shape)
            worst_fr = max(worst_fr, float(np.abs(F @ vectorize(u) + R - vectorize(system(u))).max()))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max rel |fwd-frozen|={worst_eq:.2e} max |Fu+R-frozen(u)|={worst_fr:.2e} "
                              f"time={elapsed:.1f}s")
    assert kinds == {"conv", "strided-conv", "transposed-conv"}
    assert worst_eq <= 1e-10
    assert worst_fr <= 1e-10
    assert elapsed < 60


@criterion(2, "zero bias gives an exactly zero residual")
def test_zero_bias_zero_residual(record_property):
    worst = 0.0
    for net, x in net_population(bias=False):
        system = freeze(net, x)
        _, R = explicit_fr(net, x)
        worst = max(worst, float(np.abs(effective_residual(system)).max()), float(np.abs(R).max()))
    record_property("detail", f"max ||R||_inf={worst}")
    assert worst == 0.0


@criterion(3, "classic IBP contraction with certified Gaussian/bicubic operators")
def test_ibp_contraction(record_property, capsys):
    start = time.perf_counter()
    code = main(["analyze", "--size", "16,16"])
    out = capsys.readouterr().out
    assert code == 0
    c = float(next(l for l in out.splitlines() if l.startswith("contraction_norm=")).split("=")[1])
    assert out.splitlines()[-1] == "certified"
    assert c < 1
    x = np.random.default_rng(3).random((8, 8, 1))
    _, trace = ibp(x, ResampleSpec.default(2), 30)
    errors, ratios = trace.errors(2), trace.ratios(2)
    elapsed = time.perf_counter() - start
    record_property("detail", f"c={c:.6f} max ratio={max(ratios):.6f} final/initial={errors[-1] / errors[0]:.3e} "
                              f"c^30={c ** 30:.3e} time={elapsed:.1f}s")
    assert len(ratios) == 30
    assert all(r <= c + 1e-9 for r in ratios)
    assert errors[-1] <= c**30 * errors[0]
    assert elapsed < 60


@criterion(4, "one-step exact convergence when DU = I")
def test_one_step_exact(record_property):
    spec = ResampleSpec.averaging(2)
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.random((8, 6, 2))
        _, trace = ibp(x, spec, 1, y0=rng.random((16, 12, 2)))
        assert trace.errors(2)[0] > 0
        worst = max(worst, trace.errors(2)[1])
    record_property("detail", f"max error after 1 step={worst:.2e}")
    assert worst <= 1e-13


@criterion(5, "MGBP with L=2 equals IBP")
def test_mgbp_ibp_equivalence(record_property):
    spec = ResampleSpec.default(2)
    worst = 0.0
    for mu in (1, 2, 3):
        for seed in range(5):
            x = np.random.default_rng(100 + seed).random((8, 8, 1))
            stack, _ = mgbp(x, spec, mu, 2)
            y, _ = ibp(x, spec, mu)
            worst = max(worst, float(np.abs(stack.level(2) - y).max()))
    record_property("detail", f"max |mgbp-ibp|={worst:.2e}")
    assert worst <= 1e-13


CERTIFIED_PAIRS = {
    "averaging": ResampleSpec.averaging(2),
    "decimation-bicubic": ResampleSpec(2, identity_kernel(), bicubic_kernel(2)),
    "gaussian-bicubic": ResampleSpec.default(2),
}


@criterion(6, "MGBP multi-level convergence (L=3, mu=2, 32x32)")
@pytest.mark.parametrize("name", list(CERTIFIED_PAIRS))
def test_mgbp_multilevel_convergence(record_property, name):
    spec = CERTIFIED_PAIRS[name]
    x = np.random.default_rng(6).random((32, 32, 1))
    c = certify(spec, (32, 32, 1))
    assert c < 1, "operators must be certified before the run"
    stack, trace = mgbp(x, spec, 2, 3)
    final = float(np.abs(x - multi_level_downscale(stack.level(3), spec, 2)).sum())
    per_level = [trace.level_errors()[k] for k in (2, 3)]
    bound = 1e-6 * float(np.abs(x).sum())
    record_property("detail", f"c={c:.4f} ||x-D^2 Y3||_1={final:.3e} (bound {bound:.3e}) "
                              f"per-level={[f'{e:.3e}' for e in per_level]}")
    assert final <= bound
    assert all(b <= a + 1e-9 for a, b in zip(per_level, per_level[1:]))


@criterion(7, "schedule law: unfold_schedule == instrumented trace, counts == mu^(k-j)")
def test_schedule_law(record_property):
    checked = 0
    for mu in range(4):
        for L in range(1, 5):
            log = []
            mgbp(np.zeros((1, 1, 1)), ResampleSpec.default(2), mu, L, log=log)
            assert [e for e in log if e[1] != "bp"] == unfold_schedule(mu, L)
            counts = invocation_counts(log)
            for k in range(2, L + 1):
                for j in range(1, k + 1):
                    assert counts[k].get(j, 0) == mu ** (k - j)
            checked += 1
    record_property("detail", f"{checked} (mu, L) pairs")
    assert checked == 16


def _layer(kind, seed):
    rng = np.random.default_rng(seed)
    return Conv(rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2), kind, 2)


@criterion(8, "operator matrices equal tensor-domain operations")
def test_operator_tensor_duality(record_property):
    rng = np.random.default_rng(8)
    resample_specs = {
        "gaussian-bicubic/replicate": ResampleSpec.default(2),
        "averaging/replicate": ResampleSpec.averaging(2),
        "gaussian-bicubic/reflect": ResampleSpec(2, gaussian_kernel(0.5), bicubic_kernel(2), BoundaryRule.REFLECT),
    }
    worst = {}
    for name, spec in resample_specs.items():
        D = operator_matrix(spec, "down", (8, 8, 2))
        U = operator_matrix(spec, "up", (4, 4, 2))
        err = 0.0
        for _ in range(10):
            y, x = rng.normal(size=(8, 8, 2)), rng.normal(size=(4, 4, 2))
            err = max(err, float(np.abs(D.apply(vectorize(y)) - vectorize(downscale(y, spec))).max()),
                      float(np.abs(U.apply(vectorize(x)) - vectorize(upscale(x, spec))).max()))
        worst[name] = err
    for kind, dims in (("strided-conv", (8, 8, 2)), ("transposed-conv", (4, 4, 2))):
        layer = _layer(kind, len(worst))
        W, b = layer_matrix(layer, dims)
        err = 0.0
        for _ in range(10):
            t = rng.normal(size=dims)
            err = max(err, float(np.abs(W.apply(vectorize(t)) + b - vectorize(forward(ConvNet((layer,), 2), t))).max()))
        worst[kind] = err
    record_property("detail", " ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    assert len(worst) == 5
    assert max(worst.values()) <= 1e-12


@criterion(9, "metrics match direct formulas; identical inputs give (inf, 1, 0)")
def test_metric_oracles(record_property):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        x, y = rng.random((2, 8, 8, 1))
        worst = max(worst, abs(psnr(x, y) - psnr_formula(x, y)), abs(ssim(x, y) - ssim_formula(x, y)))
        outputs = {(L, k): rng.random((2**k, 2**k, 1)) for L in (1, 2, 3) for k in range(1, L + 1)}
        targets = {k: rng.random((2**k, 2**k, 1)) for k in (1, 2, 3)}
        worst = max(worst, abs(multiscale_l1(outputs, targets) - msl1_loop(outputs, targets)))
    x = rng.random((8, 8, 1))
    same = (psnr(x, x), ssim(x, x), multiscale_l1({(1, 1): x}, {1: x}, levels=(1,)))
    record_property("detail", f"max deviation={worst:.1e} identical={same}")
    assert worst <= 1e-10
    assert same == (math.inf, 1.0, 0.0)


@criterion(10, "filter spectrum matches naive DFT and satisfies Parseval")
def test_spectrum(record_property):
    rng = np.random.default_rng(10)
    dft_err = parseval_err = 0.0
    for _ in range(10):
        f = rng.normal(size=(8, 8))
        mag = filter_spectrum(f)[:, :, 0]
        dft_err = max(dft_err, float(np.abs(mag - centered_magnitude(dft2_naive(f))).max()))
        energy = 64 * float((f**2).sum())
        parseval_err = max(parseval_err, abs(float((mag**2).sum()) - energy) / energy)
    record_property("detail", f"max |fft-naive|={dft_err:.1e} max Parseval rel={parseval_err:.1e}")
    assert dft_err <= 1e-10
    assert parseval_err <= 1e-8


def _commands(inputs: Path, out: Path):
    return [
        ["downscale", "--input", inputs / "y.png", "--output", out / "down.png", "--levels", "2"],
        ["upscale", "--input", inputs / "x.png", "--output", out / "bicubic.png", "--method", "bicubic"],
        ["upscale", "--input", inputs / "x.png", "--output", out / "ibp.mgt", "--method", "ibp", "--mu", "5",
         "--trace", out / "ibp.csv"],
        ["upscale", "--input", inputs / "x.png", "--output", out / "mgbp.png", "--levels", "3", "--mu", "2",
         "--trace", out / "mgbp.csv", "--require-certified"],
        ["analyze", "--size", "16,16", "--output", out / "ops"],
        ["toy-net", "--output", out / "net.json", "--seed", "4"],
        ["visualize", "--input", inputs / "y.png", "--net", inputs / "net.json", "--pixels", "1,1,0;8,9,0",
         "--output", out / "atlas", "--spectrum"],
        ["visualize", "--input", inputs / "y.png", "--seed", "3", "--pixels", "2,2,0", "--output", out / "atlas2"],
        ["metrics", "--input", inputs / "y.png", inputs / "z.png", "--output", out / "metrics.txt"],
        ["unfold", "--mu", "2", "--levels", "4", "--output", out / "schedule.txt"],
    ]


def _snapshot(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@criterion(11, "every CLI command is deterministic (bit-identical outputs)")
def test_cli_determinism(record_property, tmp_path, capsys):
    inputs = tmp_path / "in"
    inputs.mkdir()
    rng = np.random.default_rng(11)
    write_image(rng.random((8, 8, 1)), inputs / "x.png")
    write_image(rng.random((16, 16, 1)), inputs / "y.png")
    write_image(rng.random((16, 16, 1)), inputs / "z.png")
    save_network(toy_network(1), inputs / "net.json")
    snaps, stdouts = [], []
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        texts = []
        for argv in _commands(inputs, out):
            assert main([str(a) for a in argv]) == 0, argv
            texts.append(capsys.readouterr().out.replace(str(out), "<out>"))
        snaps.append(_snapshot(out))
        stdouts.append(texts)
    a, b = snaps
    record_property("detail", f"{len(_commands(inputs, tmp_path))} commands, {len(a)} files compared")
    assert len(a) > 20
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []
    assert stdouts[0] == stdouts[1]
