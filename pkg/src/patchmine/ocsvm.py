"""One-class SVM with a Gaussian kernel, solved in the dual.

The dual is::

    min_l  1/2 sum_ij l_i l_j k(z_i, z_j)
    s.t.   0 <= l_i <= 1 / (nu T),  sum_i l_i = 1

with ``k(a, b) = exp(-|a - b|^2 / c)``.  The decision function is
``G(z) = sum_i l_i k(z_i, z) - rho``, positive inside the region covering
the training data.  Patch labels use the opposite sign: ``+1`` marks an
abnormal patch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_NU_GRID = (0.01, 0.05, 0.1, 0.2, 0.3, 0.5)
DEFAULT_C_FACTORS = (2.0**-3, 2.0**-1, 2.0, 2.0**3, 2.0**5)


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, kkt_residual: float, iterations: int):
        super().__init__(f"{message} (KKT residual {kkt_residual:.3e} after {iterations} pair updates)")
        self.kkt_residual = kkt_residual
        self.iterations = iterations


@dataclass(frozen=True)
class OcSvmConfig:
    nu: float
    c: float

    def __post_init__(self):
        if not 0.0 < self.nu <= 1.0:
            raise ValueError(f"nu must lie in (0, 1], got {self.nu}")
        if not self.c > 0.0:
            raise ValueError(f"kernel width c must be positive, got {self.c}")


@dataclass
class OcSvmModel:
    support_vectors: np.ndarray
    lambdas: np.ndarray
    rho: float
    config: OcSvmConfig
    n_train: int
    kkt_residual: float = 0.0
    iterations: int = 0
    support_index: np.ndarray | None = None

    @property
    def upper_bound(self) -> float:
        return 1.0 / (self.config.nu * self.n_train)

    def decision(self, z) -> np.ndarray | float:
        return decision(self, z)


def sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def rbf_kernel(a, b, c: float) -> np.ndarray:
    return np.exp(-sq_distances(a, b) / c)


def dual_objective(lambdas, gram) -> float:
    lam = np.asarray(lambdas, dtype=np.float64)
    return 0.5 * float(lam @ gram @ lam)


def solve_dual(
    gram: np.ndarray,
    upper: float,
    tol: float = 1e-6,
    max_iter: int = 1_000_000,
) -> tuple[np.ndarray, np.ndarray, int, float]:
    """Pairwise coordinate descent on the box-and-simplex constrained dual.

    Each step picks the maximal KKT-violating pair (smallest gradient among
    multipliers that can grow, largest among those that can shrink) and
    solves the two-variable subproblem exactly.  Returns
    ``(lambdas, gradient, pair_updates, final_gap)``.
    """
    T = gram.shape[0]
    n_full = int(np.floor(1.0 / upper + 1e-12))
    lam = np.zeros(T)
    lam[: min(n_full, T)] = upper
    if n_full < T:
        lam[n_full] = max(1.0 - n_full * upper, 0.0)
    grad = gram @ lam
    diag = np.diag(gram)
    # a multiplier counts as on a bound within this slack
    slack = 1e-12 * upper

    it = 0
    gap = np.inf
    while True:
        can_up = lam < upper - slack
        can_down = lam > slack
        i = int(np.argmin(np.where(can_up, grad, np.inf)))
        j = int(np.argmax(np.where(can_down, grad, -np.inf)))
        gap = grad[j] - grad[i]
        if gap < tol or not can_up[i] or not can_down[j]:
            break
        if it >= max_iter:
            raise ConvergenceError("one-class SVM dual did not converge", float(gap), it)
        eta = max(diag[i] + diag[j] - 2.0 * gram[i, j], 1e-12)
        step = gap / eta
        room_i, room_j = upper - lam[i], lam[j]
        if step >= room_i or step >= room_j:
            if room_i <= room_j:
                step = room_i
                lam[i] = upper
                lam[j] -= step
            else:
                step = room_j
                lam[i] += step
                lam[j] = 0.0
        else:
            lam[i] += step
            lam[j] -= step
        grad += step * (gram[:, i] - gram[:, j])
        it += 1
    lam = np.clip(lam, 0.0, upper)
    return lam, gram @ lam, it, float(max(gap, 0.0))


def _rho(lam: np.ndarray, grad: np.ndarray, upper: float) -> float:
    slack = 1e-9 * upper
    free = (lam > slack) & (lam < upper - slack)
    if free.any():
        return float(grad[free].mean())
    # no free multiplier: any value between the bound-active gradients is optimal
    at_upper = lam >= upper - slack
    at_zero = ~at_upper
    hi = grad[at_zero].min() if at_zero.any() else grad.max()
    lo = grad[at_upper].max() if at_upper.any() else grad.min()
    return float(0.5 * (hi + lo))


def fit(
    features,
    cfg: OcSvmConfig,
    tol: float = 1e-6,
    max_iter: int = 1_000_000,
    gram: np.ndarray | None = None,
) -> OcSvmModel:
    """Fit on true-normal (standardised) features ``(T, d)``.

    ``gram`` may be supplied to reuse a precomputed kernel matrix.
    """
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"features must be (T, d), got shape {z.shape}")
    T = len(z)
    if T < 2:
        raise ValueError(f"need at least 2 training vectors, got {T}")
    if cfg.nu * T < 1.0 - 1e-12:
        raise ValueError(f"infeasible: nu * T = {cfg.nu * T:.3g} < 1 (nu={cfg.nu}, T={T})")
    if gram is None:
        gram = rbf_kernel(z, z, cfg.c)
    upper = 1.0 / (cfg.nu * T)
    lam, grad, it, gap = solve_dual(gram, upper, tol, max_iter)
    rho = _rho(lam, grad, upper)
    sv = np.flatnonzero(lam > 0.0)
    return OcSvmModel(z[sv].copy(), lam[sv].copy(), rho, cfg, T, gap, it, sv)


def decision(model: OcSvmModel, z) -> np.ndarray | float:
    """``G(z) = sum_i l_i k(z_i, z) - rho`` for one vector or a ``(n, d)`` batch."""
    q = np.asarray(z, dtype=np.float64)
    single = q.ndim == 1
    q2 = q[None] if single else q
    if q2.ndim != 2 or q2.shape[1] != model.support_vectors.shape[1]:
        raise ValueError(
            f"query dimension {q.shape} does not match support vectors {model.support_vectors.shape[1]}"
        )
    g = rbf_kernel(q2, model.support_vectors, model.config.c) @ model.lambdas - model.rho
    return float(g[0]) if single else g


def labels_from_decision(g) -> np.ndarray | int:
    """``-sgn(G)`` with ``G == 0`` counted as normal: ``+1`` iff ``G < 0``."""
    g = np.asarray(g, dtype=np.float64)
    out = np.where(g < 0.0, 1, -1)
    return int(out) if out.ndim == 0 else out


def patch_label(model: OcSvmModel, z) -> np.ndarray | int:
    return labels_from_decision(decision(model, z))


# -- hyper-parameter selection ------------------------------------------------


def image_accuracy(patch_labels, patch_image, image_labels) -> float:
    """Fraction of images whose label equals the max over their patch labels."""
    patch_labels = np.asarray(patch_labels)
    patch_image = np.asarray(patch_image)
    image_labels = np.asarray(image_labels)
    pred = np.full(len(image_labels), -1)
    np.maximum.at(pred, patch_image, patch_labels)
    return float(np.mean(pred == image_labels))


def median_sq_distance(features) -> float:
    d = sq_distances(features, features)
    iu = np.triu_indices(len(d), k=1)
    med = float(np.median(d[iu])) if len(iu[0]) else 1.0
    return med if med > 0 else 1.0


@dataclass
class Selection:
    nu: float
    c: float
    accuracy: float
    model: OcSvmModel
    table: list[dict] = field(default_factory=list)


def select_hyperparameters(
    train_features,
    patch_features,
    patch_image,
    image_labels,
    nu_grid=DEFAULT_NU_GRID,
    c_grid=None,
    tol: float = 1e-6,
) -> Selection:
    """Grid search maximising image-level accuracy on the training images.

    For every ``(nu, c)`` the SVM is fitted on ``train_features`` (true-normal
    patches), every row of ``patch_features`` is labelled, and an image is
    predicted abnormal iff one of its patches is.  ``c_grid`` holds absolute
    kernel widths; by default the factors ``DEFAULT_C_FACTORS`` times the
    median pairwise squared distance of the training features.  Ties go to
    the smaller ``nu``, then the smaller ``c``.
    """
    z = np.asarray(train_features, dtype=np.float64)
    q = np.asarray(patch_features, dtype=np.float64)
    nus = sorted(float(v) for v in nu_grid)
    if c_grid is None:
        med = median_sq_distance(z)
        c_grid = [f * med for f in DEFAULT_C_FACTORS]
    cs = sorted(float(v) for v in c_grid)
    if not nus or not cs:
        raise ValueError("hyper-parameter grid is empty")

    d_train = sq_distances(z, z)
    d_query = sq_distances(q, z)
    best: Selection | None = None
    table = []
    for nu in nus:
        if nu * len(z) < 1.0 - 1e-12:
            log.warning("phase=svm skipping nu=%g: nu*T=%.3g < 1", nu, nu * len(z))
            continue
        for c in cs:
            cfg = OcSvmConfig(nu, c)
            model = fit(z, cfg, tol=tol, gram=np.exp(-d_train / c))
            g = np.exp(-d_query[:, model.support_index] / c) @ model.lambdas - model.rho
            acc = image_accuracy(labels_from_decision(g), patch_image, image_labels)
            table.append({"nu": nu, "c": c, "acc_img": acc, "n_sv": len(model.lambdas)})
            log.info("phase=svm nu=%g c=%.4g acc_img=%.4f n_sv=%d", nu, c, acc, len(model.lambdas))
            if best is None or acc > best.accuracy:
                best = Selection(nu, c, acc, model)
    if best is None:
        raise ValueError("no feasible (nu, c) cell: every nu has nu*T < 1")
    best.table = table
    return best
