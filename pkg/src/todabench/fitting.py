from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class LinearFit:
    coef: np.ndarray
    intercept: float
    r2: float
    n_samples: int

    @property
    def slope(self) -> float:
        return float(self.coef[0])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coef"] = [float(c) for c in self.coef]
        return d


def linear_fit(X, y) -> LinearFit:
    """Least squares ``y ~ intercept + X @ coef`` with coefficient of determination."""
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    design = np.column_stack([np.ones(len(y)), X])
    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    pred = design @ beta
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return LinearFit(coef=beta[1:], intercept=float(beta[0]), r2=r2, n_samples=len(y))
