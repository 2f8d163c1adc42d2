"""Independent reference computations shared by the test modules."""

import itertools
import math

import numpy as np


def simplex_grid(T: int, steps: int, upper: float) -> np.ndarray:
    """All points ``k / steps`` on the probability simplex with every entry <= upper."""
    pts = []
    for cut in itertools.combinations(range(steps + T - 1), T - 1):
        parts = np.diff((-1, *cut, steps + T - 1)) - 1
        pts.append(parts)
    g = np.array(pts, dtype=float) / steps
    return g[np.all(g <= upper + 1e-12, axis=1)]


def grid_dual_minimum(gram: np.ndarray, upper: float, steps: int) -> float:
    """Smallest ``1/2 l^T K l`` over a simplex grid inside the box."""
    g = simplex_grid(len(gram), steps, upper)
    return float(np.min(0.5 * np.einsum("ni,ij,nj->n", g, gram, g)))


def metrics_scalar(tp, fp, tn, fn):
    """Plain-arithmetic metric re-derivation; None marks an undefined value."""

    def div(a, b):
        return None if b == 0 else a / b

    total = tp + fp + tn + fn
    sens = div(tp, tp + fn)
    spec = div(tn, tn + fp)
    prec = div(tp, tp + fp)
    f1 = div(2 * tp, 2 * tp + fp + fn) if (sens is not None and prec is not None) else None
    if sens is not None and prec is not None and prec + sens == 0:
        f1 = None
    lrp = div(sens, 1 - spec) if sens is not None and spec is not None else None
    lrn = div(1 - sens, spec) if sens is not None and spec is not None else None
    dor = div(lrp, lrn) if lrp is not None and lrn is not None else None
    return {"acc": div(tp + tn, total), "f1": f1, "lr_pos": lrp, "lr_neg": lrn, "dor": dor,
            "sensitivity": sens, "specificity": spec}


def close(a, b, rel=1e-12):
    if a is None or b is None:
        return a is None and b is None
    return math.isclose(a, b, rel_tol=rel, abs_tol=1e-15)
