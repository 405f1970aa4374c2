"""Central finite-difference checking of hand-written backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def __bool__(self):
        return self.passed


def relative_error(analytic, numeric, floor=1e-12):
    """Largest absolute deviation, scaled by the larger gradient's magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(op, inputs, tolerance=1e-6, step=1e-5, seed=0, max_coords=None):
    """Compare ``op``'s backward against central differences in float64.

    Parameters
    ----------
    op : callable
        ``op(**inputs) -> (output, backward)`` where ``backward(grad_out)``
        returns a dict of gradients keyed like ``inputs``.
    inputs : dict of str -> ndarray
        Point at which to check. Converted to float64.
    tolerance : float
        Pass threshold on the max relative error.
    step : float
        Finite-difference step.
    seed : int
        Seed for the random projection ``r`` in the objective ``<op(x), r>``
        and for coordinate sampling.
    max_coords : int, optional
        Check at most this many randomly chosen entries of each input; the
        error is then measured on the checked entries only.
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    out, backward = op(**inputs)
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(np.shape(out))
    analytic = backward(proj)

    errors = {}
    for name, value in inputs.items():
        flat = value.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        else:
            coords = np.arange(flat.size)
        numeric = np.zeros(coords.size)
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(np.sum(op(**inputs)[0] * proj))
            flat[i] = orig - step
            f_minus = float(np.sum(op(**inputs)[0] * proj))
            flat[i] = orig
            numeric[j] = (f_plus - f_minus) / (2 * step)
        errors[name] = relative_error(np.asarray(analytic[name]).reshape(-1)[coords], numeric)
    return GradCheckReport(max(errors.values(), default=0.0), tolerance, errors)
