"""Cox proportional-hazards modeling and rank-based evaluation.

The partial likelihood uses Efron's correction for tied event times (visit-grid
conversion times tie heavily), with analytic gradient and Hessian feeding a
Newton-Raphson fit. Evaluation is Harrell's concordance index plus a paired
bootstrap for comparing two risk scores on the same subjects.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import ConvergenceError
from .validation import check_matrix, check_survival_data, check_vector


@dataclass(frozen=True)
class SurvivalRecord:
    """Per-subject outcome: follow-up time, conversion indicator, covariates."""

    subject_id: str
    time_months: float
    event: bool
    x: np.ndarray

    def __post_init__(self):
        if not self.time_months > 0:
            raise ValueError(f"subject {self.subject_id}: time_months must be > 0")
        if not np.all(np.isfinite(self.x)):
            raise ValueError(f"subject {self.subject_id}: non-finite covariates")


def records_to_arrays(records: list[SurvivalRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack records into (X, time, event) arrays in record order."""
    if not records:
        raise ValueError("no records")
    dims = {len(r.x) for r in records}
    if len(dims) != 1:
        raise ValueError(f"covariate lengths differ across records: {sorted(dims)}")
    X = np.array([r.x for r in records], dtype=np.float64)
    time = np.array([r.time_months for r in records], dtype=np.float64)
    event = np.array([r.event for r in records], dtype=bool)
    return X, time, event


@dataclass
class CovariateSpec:
    """Ordered covariate names with standardization statistics from the training split.

    Continuous covariates are z-scored; binary and count covariates pass through
    (center 0, scale 1).
    """

    names: list[str]
    center: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("covariate names must be unique")
        if len(self.names) != len(self.center) or len(self.names) != len(self.scale):
            raise ValueError("names/center/scale lengths disagree")

    @classmethod
    def fit(cls, X, names: list[str], standardize: list[bool]) -> "CovariateSpec":
        X = check_matrix(X)
        if X.shape[1] != len(names) or len(names) != len(standardize):
            raise ValueError("column count, names, and standardize flags must align")
        center = np.zeros(X.shape[1])
        scale = np.ones(X.shape[1])
        for j, flag in enumerate(standardize):
            if not flag:
                continue
            sd = X[:, j].std()
            if sd == 0.0:
                raise ValueError(f"covariate {names[j]} has zero variance on the training split")
            center[j] = X[:, j].mean()
            scale[j] = sd
        return cls(list(names), center, scale)

    def transform(self, X) -> np.ndarray:
        X = check_matrix(X)
        if X.shape[1] != len(self.names):
            raise ValueError(f"X has {X.shape[1]} columns, spec has {len(self.names)}")
        return (X - self.center) / self.scale

    def to_dict(self) -> dict:
        return {"names": list(self.names),
                "center": [float(x) for x in self.center],
                "scale": [float(x) for x in self.scale]}

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateSpec":
        return cls(list(d["names"]), np.array(d["center"], dtype=np.float64),
                   np.array(d["scale"], dtype=np.float64))


# --- Efron partial likelihood -------------------------------------------------

def _efron_pass(beta, X, time, event, want_grad: bool, want_hess: bool):
    """One sweep over event times maintaining risk-set sums.

    Walks times in decreasing order so the risk set grows by accumulation;
    within each tied event group applies Efron's j/m downweighting.
    """
    n, p = X.shape
    eta = X @ beta
    shift = eta.max()  # the partial likelihood is invariant to this shift
    w = np.exp(eta - shift)
    order = np.argsort(-time, kind="stable")
    ts = time[order]

    nll = 0.0
    grad = np.zeros(p) if want_grad else None
    hess = np.zeros((p, p)) if want_hess else None
    s0 = 0.0
    s1 = np.zeros(p)
    s2 = np.zeros((p, p)) if want_hess else None

    pos = 0
    while pos < n:
        end = pos
        while end < n and ts[end] == ts[pos]:
            end += 1
        g_idx = order[pos:end]
        wg = w[g_idx]
        Xg = X[g_idx]
        s0 += wg.sum()
        if want_grad:
            s1 += wg @ Xg
        if want_hess:
            s2 += Xg.T @ (wg[:, None] * Xg)

        d_mask = event[g_idx]
        if d_mask.any():
            d_idx = g_idx[d_mask]
            wd = w[d_idx]
            Xd = X[d_idx]
            m = d_idx.size
            s0d = wd.sum()
            s1d = wd @ Xd
            s2d = Xd.T @ (wd[:, None] * Xd) if want_hess else None
            nll -= float((eta[d_idx] - shift).sum())
            if want_grad:
                grad -= Xd.sum(axis=0)
            for j in range(m):
                r = j / m
                phi = s0 - r * s0d
                nll += float(np.log(phi))
                if want_grad:
                    nu = (s1 - r * s1d) / phi
                    grad += nu
                    if want_hess:
                        hess += (s2 - r * s2d) / phi - np.outer(nu, nu)
        pos = end
    return nll, grad, hess


def cox_nll(beta, X, time, event) -> float:
    """Negative log Efron partial likelihood."""
    X, time, event = check_survival_data(X, time, event)
    beta = check_vector(beta, "beta", length=X.shape[1])
    nll, _, _ = _efron_pass(beta, X, time, event, want_grad=False, want_hess=False)
    return nll


def cox_grad_hess(beta, X, time, event) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and Hessian of the negative log partial likelihood at beta."""
    X, time, event = check_survival_data(X, time, event)
    beta = check_vector(beta, "beta", length=X.shape[1])
    _, grad, hess = _efron_pass(beta, X, time, event, want_grad=True, want_hess=True)
    return grad, hess


_SEPARATION_BOUND = 50.0


class CoxPH(BaseEstimator):
    """Cox proportional-hazards model fit by Newton-Raphson from beta = 0.

    Ties are handled with Efron's correction. ``predict`` returns the log
    relative hazard beta @ x; no baseline hazard is estimated since the
    concordance index depends on risk ordering only.

    Parameters
    ----------
    tol : float
        Convergence threshold on the gradient norm.
    max_iter : int
        Newton iteration cap.
    feature_names : list of str, optional
        Covariate names used in diagnostics and the text export.
    """

    def __init__(self, tol: float = 1e-8, max_iter: int = 100,
                 feature_names: list[str] | None = None):
        self.tol = tol
        self.max_iter = max_iter
        self.feature_names = feature_names

    def fit(self, X, time, event) -> "CoxPH":
        X, time, event = check_survival_data(X, time, event)
        n, p = X.shape
        if event.sum() < 2:
            raise ValueError("need at least 2 events to fit")
        names = list(self.feature_names) if self.feature_names is not None \
            else [f"x{j}" for j in range(p)]
        if len(names) != p:
            raise ValueError(f"{len(names)} feature names for {p} columns")
        for j in range(p):
            if np.ptp(X[:, j]) == 0.0:
                raise ValueError(f"covariate {names[j]} is constant; drop it before fitting")

        beta = np.zeros(p)
        nll, grad, hess = _efron_pass(beta, X, time, event, True, True)
        self.ridged_ = False
        converged = False
        it = 0
        for it in range(1, self.max_iter + 1):
            grad_norm = float(np.linalg.norm(grad))
            if grad_norm < self.tol:
                converged = True
                break
            direction = self._newton_direction(hess, grad, names)
            step = 1.0
            new_beta = beta - step * direction
            new_nll, _, _ = _efron_pass(new_beta, X, time, event, False, False)
            halvings = 0
            while new_nll >= nll and halvings < 40:
                step *= 0.5
                halvings += 1
                new_beta = beta - step * direction
                new_nll, _, _ = _efron_pass(new_beta, X, time, event, False, False)
            if new_nll >= nll:
                break  # no descent possible; gradient norm reported below
            beta = new_beta
            big = np.flatnonzero(np.abs(beta) > _SEPARATION_BOUND)
            if big.size:
                raise ConvergenceError(
                    f"monotone-likelihood separation suspected: |beta| > "
                    f"{_SEPARATION_BOUND} for covariate {names[big[0]]}")
            nll, grad, hess = _efron_pass(beta, X, time, event, True, True)
        grad_norm = float(np.linalg.norm(grad))
        if not converged:
            converged = grad_norm < self.tol

        self.coef_ = beta
        self.feature_names_ = names
        self.converged_ = converged
        self.n_iter_ = it
        self.final_grad_norm_ = grad_norm
        self.log_likelihood_ = -nll
        return self

    def _newton_direction(self, hess, grad, names):
        cond = np.linalg.cond(hess)
        if not np.isfinite(cond) or cond > 1e12:
            if not self.ridged_:
                warnings.warn("rank-deficient Hessian; adding 1e-8 ridge", RuntimeWarning)
            self.ridged_ = True
            hess = hess + 1e-8 * np.eye(hess.shape[0])
        try:
            direction = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            self.ridged_ = True
            direction = np.linalg.solve(hess + 1e-8 * np.eye(hess.shape[0]), grad)
        if not np.all(np.isfinite(direction)):
            raise ConvergenceError("non-finite Newton direction")
        return direction

    def predict(self, X) -> np.ndarray:
        """Log relative hazard beta @ x for each row; 1-D input gives a scalar."""
        beta = self.coef_
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            if X.shape[0] != beta.shape[0]:
                raise ValueError(f"x has length {X.shape[0]}, model has {beta.shape[0]}")
            return float(X @ beta)
        X = check_matrix(X)
        if X.shape[1] != beta.shape[0]:
            raise ValueError(f"X has {X.shape[1]} columns, model has {beta.shape[0]}")
        return X @ beta

    def export_text(self) -> str:
        """Text table of coefficients and fit diagnostics; floats round-trip exactly."""
        lines = ["covariate\tcoefficient"]
        for name, b in zip(self.feature_names_, self.coef_):
            lines.append(f"{name}\t{float(b)!r}")
        lines.append(f"# converged\t{self.converged_}")
        lines.append(f"# iterations\t{self.n_iter_}")
        lines.append(f"# final_grad_norm\t{self.final_grad_norm_!r}")
        lines.append(f"# log_partial_likelihood\t{self.log_likelihood_!r}")
        lines.append(f"# ridged\t{self.ridged_}")
        return "\n".join(lines) + "\n"


def coefficients_from_text(text: str) -> tuple[list[str], np.ndarray]:
    """Parse an ``export_text`` table back into (names, beta)."""
    names, coefs = [], []
    for line in text.splitlines()[1:]:
        if line.startswith("#") or not line.strip():
            continue
        name, value = line.split("\t")
        names.append(name)
        coefs.append(float(value))
    return names, np.array(coefs)


# --- evaluation ----------------------------------------------------------------

def concordance_index(risks, times, events) -> float:
    """Harrell's C-index for right-censored data.

    Permissible pairs order an event subject before any subject with a longer
    follow-up, or a censored subject at the same recorded time. Risk ties count
    one half.
    """
    risks = check_vector(risks, "risks")
    times = check_vector(times, "times", length=risks.shape[0])
    events = np.asarray(events, dtype=bool)
    if events.shape != times.shape:
        raise ValueError("events must align with times")
    concordant = 0
    tied = 0
    permissible = 0
    for i in np.flatnonzero(events):
        later = (times > times[i]) | ((times == times[i]) & ~events)
        count = int(later.sum())
        if count == 0:
            continue
        permissible += count
        concordant += int((risks[i] > risks[later]).sum())
        tied += int((risks[i] == risks[later]).sum())
    if permissible == 0:
        raise ValueError("no permissible pairs; C-index undefined")
    return (concordant + 0.5 * tied) / permissible


def bootstrap_cindex_diff(risks_a, risks_b, times, events, n_boot: int = 2000,
                          seed: int = 0) -> tuple[float, float]:
    """Paired bootstrap comparison of two risk scores on the same subjects.

    Returns (delta, p): delta is the full-sample C_a - C_b; p doubles the
    fraction of resamples whose delta falls on the other side of zero, clipped
    to [0, 1]. Degenerate resamples (no permissible pairs) are redrawn, capped
    at 10 * n_boot total attempts.
    """
    if n_boot < 100:
        raise ValueError("n_boot must be >= 100")
    risks_a = check_vector(risks_a, "risks_a")
    risks_b = check_vector(risks_b, "risks_b", length=risks_a.shape[0])
    times = check_vector(times, "times", length=risks_a.shape[0])
    events = np.asarray(events, dtype=bool)
    delta = concordance_index(risks_a, times, events) - \
        concordance_index(risks_b, times, events)
    sign = np.sign(delta)

    n = times.shape[0]
    flips = 0
    done = 0
    attempts = 0
    while done < n_boot:
        if attempts >= 10 * n_boot:
            raise ConvergenceError(
                f"exceeded {10 * n_boot} bootstrap attempts; data too degenerate")
        # stream keyed by (seed, attempt) so replicates are schedule-independent
        rng = np.random.default_rng([seed, attempts])
        attempts += 1
        idx = rng.integers(0, n, size=n)
        try:
            d = concordance_index(risks_a[idx], times[idx], events[idx]) - \
                concordance_index(risks_b[idx], times[idx], events[idx])
        except ValueError:
            continue
        done += 1
        if d * sign <= 0:
            flips += 1
    return delta, min(1.0, 2.0 * flips / n_boot)
