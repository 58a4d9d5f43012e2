"""Mean families for quasi-likelihood regression.

A family supplies the mean function applied to the linear predictor and its
first derivative, which must be strictly positive everywhere.  The identity
family gives linear regression, the exponential family covers Poisson and
log-link Gamma regression (the estimating equation depends only on the mean,
not the variance function), and the logistic family covers binary responses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# exp() is clamped here instead of overflowing to inf; Newton steps can
# overshoot and step-halving needs finite scores to recover.
ETA_MAX = 700.0

_KINDS = ("identity", "exp", "logistic")


def _check_finite(eta):
    arr = np.asarray(eta, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("linear predictor must be finite")
    return arr


@dataclass(frozen=True)
class LinkFamily:
    """One of the three supported mean families, selected by ``kind``."""

    kind: str
    name: str

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}")

    def mean(self, eta):
        """Mean response at linear predictor ``eta`` (scalar or array)."""
        arr = _check_finite(eta)
        if self.kind == "identity":
            out = arr.copy()
        elif self.kind == "exp":
            out = np.exp(np.minimum(arr, ETA_MAX))
        else:
            z = np.exp(-np.abs(arr))
            out = np.where(arr >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        return out if isinstance(eta, np.ndarray) else float(out)

    def mean_derivative(self, eta):
        """Derivative of the mean function; strictly positive for finite eta."""
        arr = _check_finite(eta)
        if self.kind == "identity":
            out = np.ones_like(arr)
        elif self.kind == "exp":
            out = np.exp(np.minimum(arr, ETA_MAX))
        else:
            # mu * (1 - mu) written symmetrically in exp(-|eta|) so neither
            # branch can overflow
            z = np.exp(-np.abs(arr))
            out = z / (1.0 + z) ** 2
        return out if isinstance(eta, np.ndarray) else float(out)

    def saturates(self, eta) -> bool:
        """True when the exp clamp would engage anywhere in ``eta``."""
        if self.kind != "exp":
            return False
        return bool(np.any(np.asarray(eta, dtype=np.float64) > ETA_MAX))


IDENTITY = LinkFamily("identity", "identity")
EXP = LinkFamily("exp", "exp")
LOGISTIC = LinkFamily("logistic", "logistic")

_BY_NAME = {f.name: f for f in (IDENTITY, EXP, LOGISTIC)}


def get_family(name: str) -> LinkFamily:
    """Resolve a CLI/config string to a family instance."""
    try:
        return _BY_NAME[name.lower()]
    except KeyError:
        raise ValueError(
            f"unknown family {name!r}; expected one of {sorted(_BY_NAME)}"
        ) from None
