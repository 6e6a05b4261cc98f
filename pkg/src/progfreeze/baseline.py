"""IRDS prognostic baseline: degree-2 polynomial logistic regression on three expert grades."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cohort import Cohort
from .metrics import MetricsReport, aggregate, evaluate
from .splitter import FoldPlan

GRADE_CENTER = 2.5
GRADE_SCALE = 1.5


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (final gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


def expand(g1: float, g2: float, g3: float) -> np.ndarray:
    """Linear, square and pairwise-product terms of three (already scaled) inputs."""
    return np.array([g1, g2, g3, g1 * g1, g2 * g2, g3 * g3, g1 * g2, g1 * g3, g2 * g3])


def poly_features(g1, g2, g3, center: float = GRADE_CENTER, scale: float = GRADE_SCALE) -> np.ndarray:
    """Nine features from grades in 1..4 after ``(g - center) / scale``."""
    for g in (g1, g2, g3):
        if g is None or not 1 <= g <= 4:
            raise ValueError(f"IRDS grade out of range: {g}")
    return expand(*((np.array([g1, g2, g3], dtype=float) - center) / scale))


def design_matrix(grades, center: float = GRADE_CENTER, scale: float = GRADE_SCALE) -> np.ndarray:
    return np.stack([poly_features(*g, center=center, scale=scale) for g in grades])


def balanced_class_weights(y: np.ndarray) -> dict[int, float]:
    y = np.asarray(y).astype(int)
    n = len(y)
    return {c: n / (2.0 * int((y == c).sum())) for c in (0, 1)}


@dataclass
class LogRegModel:
    weights: np.ndarray
    intercept: float
    l2_lambda: float
    class_weights: dict[int, float]
    n_iter: int = 0
    grad_norm: float = 0.0

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights + self.intercept

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(X)))


def objective(theta: np.ndarray, X: np.ndarray, y: np.ndarray, sw: np.ndarray, lam: float):
    """Weighted NLL + (lam/2)|w|^2; ``theta`` is (intercept, w...). Returns loss, grad, hessian."""
    z = theta[0] + X @ theta[1:]
    loss = float(np.sum(sw * (np.logaddexp(0.0, z) - y * z)) + 0.5 * lam * theta[1:] @ theta[1:])
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    Xa = np.hstack([np.ones((len(X), 1)), X])
    r = sw * (p - y)
    grad = Xa.T @ r
    grad[1:] += lam * theta[1:]
    hess = (Xa * (sw * p * (1 - p))[:, None]).T @ Xa
    hess[1:, 1:] += lam * np.eye(X.shape[1])
    return loss, grad, hess


def fit(X: np.ndarray, y: np.ndarray, l2_lambda: float = 1.0,
        class_weights: dict[int, float] | None = None, tol: float = 1e-8,
        max_iter: int = 200) -> LogRegModel:
    """Damped Newton on the class-weighted, L2-penalized logistic loss (intercept unpenalized)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if l2_lambda < 0:
        raise ValueError("l2_lambda must be >= 0")
    if len(np.unique(y)) < 2:
        raise ValueError("both classes must be present")
    cw = class_weights or balanced_class_weights(y)
    sw = np.where(y == 1, cw[1], cw[0])
    theta = np.zeros(X.shape[1] + 1)
    loss, grad, hess = objective(theta, X, y, sw, l2_lambda)
    for it in range(1, max_iter + 1):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            return LogRegModel(theta[1:].copy(), float(theta[0]), l2_lambda, cw, it - 1, gnorm)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = theta - t * step
            c_loss, c_grad, c_hess = objective(cand, X, y, sw, l2_lambda)
            # near the optimum the loss change drowns in roundoff; a shrinking gradient suffices
            armijo = c_loss <= loss - 1e-4 * t * (grad @ step)
            if armijo or np.linalg.norm(c_grad) < gnorm or t < 1e-10:
                break
            t *= 0.5
        theta, loss, grad, hess = cand, c_loss, c_grad, c_hess
    gnorm = float(np.linalg.norm(grad))
    if gnorm <= tol:
        return LogRegModel(theta[1:].copy(), float(theta[0]), l2_lambda, cw, max_iter, gnorm)
    raise ConvergenceError("logistic regression did not converge", gnorm)


def model_loss(model: LogRegModel, X: np.ndarray, y: np.ndarray) -> float:
    sw = np.where(np.asarray(y) == 1, model.class_weights[1], model.class_weights[0])
    theta = np.concatenate([[model.intercept], model.weights])
    return objective(theta, np.asarray(X, float), np.asarray(y, float), sw, model.l2_lambda)[0]


@dataclass
class BaselineResult:
    rows: list[dict]
    reports: list[MetricsReport]
    n_excluded: int

    def summary(self) -> dict:
        return aggregate(self.reports)


def evaluate_baseline(cohort: Cohort, plan: FoldPlan, l2_lambda: float = 1.0,
                      center: float = GRADE_CENTER, scale: float = GRADE_SCALE,
                      threshold: float = 0.5) -> BaselineResult:
    """Fit on each fold's train patients and score the fold's test patients (BPD outcome).

    ``plan`` is normally built on ``cohort.with_target("irds")`` so that it is
    balanced on BPD among patients with complete grades. Any patient with a
    missing IRDS grade that is still in the plan is dropped here. Folds whose test set
    ends up single-class carry a ``single_class`` flag and NaN AUROC.
    """
    complete = {p.patient_id: p for p in cohort.patients if None not in p.irds_grades}
    n_excluded = len(cohort) - len(complete)
    rows, reports = [], []
    for f in plan.folds:
        tr = [complete[pid] for pid in f.train if pid in complete]
        te = [complete[pid] for pid in f.test_ids if pid in complete]
        Xtr = design_matrix([p.irds_grades for p in tr], center, scale)
        ytr = np.array([p.bpd_label for p in tr])
        model = fit(Xtr, ytr, l2_lambda)
        Xte = design_matrix([p.irds_grades for p in te], center, scale)
        scores = model.predict_proba(Xte)
        rep = evaluate(list(zip(scores.tolist(), [p.bpd_label for p in te])), threshold)
        reports.append(rep)
        row = {"config_id": "IRDS-PolyLogReg", "repeat": f.repeat, "fold": f.fold}
        row.update(rep.as_row())
        row["seed"] = plan.repeat_seeds[f.repeat]
        rows.append(row)
    return BaselineResult(rows, reports, n_excluded)
