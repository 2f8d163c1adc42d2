import numpy as np
import pytest

from patchmine import autoencoder as ae
from patchmine import pipeline as pl
from patchmine import tensor as tc
from patchmine.synthetic import SyntheticSpec, render_dataset

SMALL_SPEC = SyntheticSpec(
    n_normal=20, n_abnormal=20, height=192, width=192, patch_size=64, region_min=96, region_max=144, seed=0
)


def small_config(**kw) -> pl.PipelineConfig:
    ae_kw = {"epochs": 2, "batch_size": 16}
    ae_kw.update(kw.pop("ae", {}))
    base = {"patch_size": 64, "train_patches": 9, "stride": 32}
    base.update(kw)
    return pl.PipelineConfig(ae=ae.TrainConfig(**ae_kw), **base)


def numeric_grad(f, arrays, idx_list, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. chosen entries of ``arrays``."""
    out = []
    for a, idx in idx_list:
        arr = arrays[a]
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def grad_check(build, shapes, rng, n_probe=8, scale=1.0):
    """Largest relative error between backprop and central differences.

    ``build(*tensors)`` returns a Tensor; it is contracted with a fixed random
    weight so every output entry contributes.
    """
    ts = [tc.Tensor(rng.normal(size=s) * scale, requires_grad=True) for s in shapes]
    out = build(*ts)
    w = rng.normal(size=out.shape)
    tc.backward(tc.tsum(tc.mul(out, w)))
    analytic, probes = [], []
    for k, t in enumerate(ts):
        for _ in range(n_probe):
            idx = tuple(int(rng.integers(0, n)) for n in t.shape)
            probes.append((k, idx))
            analytic.append(t.grad[idx])
    numeric = numeric_grad(lambda: float((build(*ts).data * w).sum()), [t.data for t in ts], probes)
    analytic = np.array(analytic)
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-6)
    return float(np.max(np.abs(numeric - analytic) / denom))


@pytest.fixture(scope="session")
def small_synthetic():
    return render_dataset(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_images(small_synthetic):
    return [s.to_labeled() for s in small_synthetic]


@pytest.fixture(scope="session")
def small_bundle(small_images):
    return pl.train_pipeline(small_images, small_config())


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
