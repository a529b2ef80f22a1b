"""Post-hoc multiclass calibration and selective-prediction metrics.

Four Platt-family rescalings of a logit vector z, all fitted by minimizing
negative log likelihood on a held-out validation set:

  temperature   softmax(z / T)
  bcts          softmax(z / T + b)       (temperature plus per-class bias)
  vector        softmax(w * z + b)       (diagonal affine)
  matrix        softmax(W z + b)         (full affine)

Temperature scaling cannot change the argmax, so plain accuracy is
untouched; the affine variants can reorder classes, which is why both the
pre- and post-calibration argmax accuracies are reported downstream.

Also here: expected calibration error over M equally spaced confidence
bins, reliability-diagram bins, confidence-threshold abstention, and
per-class precision/recall/F1 where an abstained item counts as a missed
detection.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import MarstagError


class CalibrationMethod(str, Enum):
    TEMPERATURE = "TEMPERATURE"
    BCTS = "BCTS"
    VECTOR = "VECTOR"
    MATRIX = "MATRIX"


@dataclass
class Calibrator:
    method: CalibrationMethod
    T: float | None = None
    b: np.ndarray | None = None
    w: np.ndarray | None = None
    W: np.ndarray | None = None
    # fit diagnostics (not persisted)
    converged: bool = True
    final_nll: float | None = None
    identity_nll: float | None = None


@dataclass(frozen=True)
class OptConfig:
    max_iters: int = 200
    tolerance: float = 1e-9
    step_init: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.tolerance <= 0:
            raise MarstagError("INVALID_PARAMS", "tolerance must be positive")


def softmax(z: np.ndarray) -> np.ndarray:
    """Max-shifted softmax of a single logit vector."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_rows(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    e = np.exp(Z - Z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _transform_rows(c: Calibrator, Z: np.ndarray) -> np.ndarray:
    k = Z.shape[1]
    if c.method is CalibrationMethod.TEMPERATURE:
        return Z / c.T
    if c.method is CalibrationMethod.BCTS:
        _check_len(c.b, k)
        return Z / c.T + c.b
    if c.method is CalibrationMethod.VECTOR:
        _check_len(c.w, k)
        _check_len(c.b, k)
        return Z * c.w + c.b
    if c.method is CalibrationMethod.MATRIX:
        if c.W.shape != (k, k):
            raise MarstagError("DIMENSION_MISMATCH", f"W {c.W.shape} vs K={k}")
        _check_len(c.b, k)
        return Z @ c.W.T + c.b
    raise MarstagError("INVALID_PARAMS", f"unknown method {c.method}")


def _check_len(vec, k):
    if vec is None or np.asarray(vec).shape != (k,):
        raise MarstagError("DIMENSION_MISMATCH", f"parameter length != K={k}")


def apply_calibrator(c: Calibrator, z: np.ndarray) -> np.ndarray:
    """Calibrated probability vector(s) for one logit vector or a stack."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return softmax(_transform_rows(c, z[None, :])[0])
    return apply_calibrator_rows(c, z)


def apply_calibrator_rows(c: Calibrator, Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    return softmax_rows(_transform_rows(c, Z))


def identity_calibrator(k: int, method: CalibrationMethod) -> Calibrator:
    if method is CalibrationMethod.TEMPERATURE:
        return Calibrator(method, T=1.0)
    if method is CalibrationMethod.BCTS:
        return Calibrator(method, T=1.0, b=np.zeros(k))
    if method is CalibrationMethod.VECTOR:
        return Calibrator(method, w=np.ones(k), b=np.zeros(k))
    return Calibrator(method, W=np.eye(k), b=np.zeros(k))


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log likelihood of the true labels, probabilities
    clamped at 1e-12 before the log."""
    P = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if P.ndim != 2 or y.shape != (P.shape[0],):
        raise MarstagError("SHAPE_MISMATCH", f"probs {P.shape} vs labels {y.shape}")
    picked = P[np.arange(P.shape[0]), y]
    return float(-np.log(np.clip(picked, 1e-12, None)).mean())


# Ridge strength on off-diagonal entries of the matrix-scaling transform;
# keeps the K^2 parameters tame on small validation sets.
MATRIX_OFFDIAG_RIDGE = 1e-4


def fit_calibrator(
    method: CalibrationMethod,
    logits_val: np.ndarray,
    labels_val: np.ndarray,
    cfg: OptConfig = OptConfig(),
) -> Calibrator:
    """Minimize validation NLL by gradient descent with backtracking line
    search, starting from the identity transform.

    Temperature is optimized as log T so it stays positive. Matrix scaling
    adds a small ridge on off-diagonal entries. The best parameters ever
    seen are returned; if the iteration budget runs out before the NLL
    change drops below tolerance, the result is flagged unconverged.
    """
    Z = np.asarray(logits_val, dtype=np.float64)
    y = np.asarray(labels_val)
    if Z.ndim != 2 or y.shape != (Z.shape[0],):
        raise MarstagError("SHAPE_MISMATCH", f"logits {Z.shape} vs labels {y.shape}")
    n, k = Z.shape
    if n < k:
        raise MarstagError(
            "DEGENERATE_VALIDATION", f"need at least K={k} samples, got {n}"
        )
    if len(np.unique(y)) < 2:
        raise MarstagError("DEGENERATE_VALIDATION", "validation set has a single class")
    method = CalibrationMethod(method)

    onehot_rows = np.arange(n)

    def objective_and_grad(theta: np.ndarray):
        F, pullback = _unpack(method, theta, Z, k)
        P = softmax_rows(F)
        data_nll = -np.log(np.clip(P[onehot_rows, y], 1e-12, None)).mean()
        G = P.copy()
        G[onehot_rows, y] -= 1.0
        G /= n
        grad, penalty = pullback(G)
        return data_nll + penalty, grad, data_nll

    theta = _identity_theta(method, k)
    f, g, data_nll = objective_and_grad(theta)
    identity_nll = data_nll
    best_theta, best_f, best_nll = theta.copy(), f, data_nll
    converged = True
    step = cfg.step_init
    for it in range(cfg.max_iters):
        gnorm2 = float(g @ g)
        if gnorm2 == 0.0:
            break
        step = min(step * 2.0, cfg.step_init * 1024)
        accepted = False
        while step > 1e-14:
            cand = theta - step * g
            fc, gc, nc = objective_and_grad(cand)
            if fc <= f - 1e-4 * step * gnorm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        drop = f - fc
        theta, f, g, data_nll = cand, fc, gc, nc
        if f < best_f:
            best_theta, best_f, best_nll = theta.copy(), f, data_nll
        if drop < cfg.tolerance:
            break
    else:
        converged = False

    cal = _pack(method, best_theta, k)
    cal.converged = converged
    cal.final_nll = best_nll
    cal.identity_nll = identity_nll
    return cal


def _identity_theta(method: CalibrationMethod, k: int) -> np.ndarray:
    if method is CalibrationMethod.TEMPERATURE:
        return np.zeros(1)  # log T
    if method is CalibrationMethod.BCTS:
        return np.zeros(1 + k)
    if method is CalibrationMethod.VECTOR:
        return np.concatenate([np.ones(k), np.zeros(k)])
    return np.concatenate([np.eye(k).ravel(), np.zeros(k)])


def _unpack(method: CalibrationMethod, theta: np.ndarray, Z: np.ndarray, k: int):
    """Transformed logits F plus a pullback mapping dNLL/dF to the parameter
    gradient (adding any penalty term)."""
    if method is CalibrationMethod.TEMPERATURE:
        inv_t = np.exp(-theta[0])
        F = Z * inv_t

        def pullback(G):
            return np.array([-(G * Z).sum() * inv_t]), 0.0

        return F, pullback
    if method is CalibrationMethod.BCTS:
        inv_t = np.exp(-theta[0])
        b = theta[1:]
        F = Z * inv_t + b

        def pullback(G):
            gu = -(G * Z).sum() * inv_t
            return np.concatenate([[gu], G.sum(axis=0)]), 0.0

        return F, pullback
    if method is CalibrationMethod.VECTOR:
        w, b = theta[:k], theta[k:]
        F = Z * w + b

        def pullback(G):
            return np.concatenate([(G * Z).sum(axis=0), G.sum(axis=0)]), 0.0

        return F, pullback
    W = theta[: k * k].reshape(k, k)
    b = theta[k * k :]
    F = Z @ W.T + b
    offdiag = ~np.eye(k, dtype=bool)

    def pullback(G):
        gW = G.T @ Z
        gW[offdiag] += 2.0 * MATRIX_OFFDIAG_RIDGE * W[offdiag]
        penalty = MATRIX_OFFDIAG_RIDGE * float((W[offdiag] ** 2).sum())
        return np.concatenate([gW.ravel(), G.sum(axis=0)]), penalty

    return F, pullback


def _pack(method: CalibrationMethod, theta: np.ndarray, k: int) -> Calibrator:
    if method is CalibrationMethod.TEMPERATURE:
        return Calibrator(method, T=float(np.exp(theta[0])))
    if method is CalibrationMethod.BCTS:
        return Calibrator(method, T=float(np.exp(theta[0])), b=theta[1:].copy())
    if method is CalibrationMethod.VECTOR:
        return Calibrator(method, w=theta[:k].copy(), b=theta[k:].copy())
    return Calibrator(
        method, W=theta[: k * k].reshape(k, k).copy(), b=theta[k * k :].copy()
    )


def save_calibrator(path, c: Calibrator) -> None:
    """Method line, then parameters in row-major decimal text."""
    fmt = "%.17g"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(c.method.value + "\n")
        if c.method is CalibrationMethod.TEMPERATURE:
            fh.write(fmt % c.T + "\n")
        elif c.method is CalibrationMethod.BCTS:
            fh.write(fmt % c.T + "\n")
            fh.write(" ".join(fmt % v for v in c.b) + "\n")
        elif c.method is CalibrationMethod.VECTOR:
            fh.write(" ".join(fmt % v for v in c.w) + "\n")
            fh.write(" ".join(fmt % v for v in c.b) + "\n")
        else:
            for row in c.W:
                fh.write(" ".join(fmt % v for v in row) + "\n")
            fh.write(" ".join(fmt % v for v in c.b) + "\n")


def load_calibrator(path) -> Calibrator:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    method = CalibrationMethod(lines[0])
    rows = [np.array([float(t) for t in ln.split()]) for ln in lines[1:]]
    if method is CalibrationMethod.TEMPERATURE:
        return Calibrator(method, T=float(rows[0][0]))
    if method is CalibrationMethod.BCTS:
        return Calibrator(method, T=float(rows[0][0]), b=rows[1])
    if method is CalibrationMethod.VECTOR:
        return Calibrator(method, w=rows[0], b=rows[1])
    return Calibrator(method, W=np.array(rows[:-1]), b=rows[-1])


# ---------------------------------------------------------------------------
# Binned calibration metrics
# ---------------------------------------------------------------------------

@dataclass
class ReliabilityBins:
    """Per-bin statistics over M equally spaced confidence bins on (0, 1].

    Bins are right-closed: bin m covers (m/M, (m+1)/M]. A confidence exactly
    on an edge belongs to the bin whose upper edge it is, so the binning is
    bit-reproducible. Empty bins report confidence = accuracy = 0.
    """

    m: int
    counts: np.ndarray
    confidences: np.ndarray
    accuracies: np.ndarray

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.m + 1)

    def ece(self) -> float:
        n = self.counts.sum()
        if n == 0:
            return 0.0
        weights = self.counts / n
        return float((weights * np.abs(self.accuracies - self.confidences)).sum())


def _bin_index(confidence: np.ndarray, m: int) -> np.ndarray:
    return np.clip(np.ceil(confidence * m).astype(int) - 1, 0, m - 1)


def reliability_bins(probs: np.ndarray, labels: np.ndarray, m: int) -> ReliabilityBins:
    """Count, mean confidence, and accuracy per confidence bin."""
    P = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if P.ndim != 2 or y.shape != (P.shape[0],) or m < 1 or P.shape[0] < 1:
        raise MarstagError("SHAPE_MISMATCH", f"probs {P.shape}, labels {y.shape}, M={m}")
    confidence = P.max(axis=1)
    correct = (P.argmax(axis=1) == y).astype(np.float64)
    idx = _bin_index(confidence, m)
    counts = np.bincount(idx, minlength=m).astype(np.float64)
    conf_sum = np.bincount(idx, weights=confidence, minlength=m)
    acc_sum = np.bincount(idx, weights=correct, minlength=m)
    nonzero = counts > 0
    confidences = np.zeros(m)
    accuracies = np.zeros(m)
    confidences[nonzero] = conf_sum[nonzero] / counts[nonzero]
    accuracies[nonzero] = acc_sum[nonzero] / counts[nonzero]
    return ReliabilityBins(m, counts, confidences, accuracies)


def ece(probs: np.ndarray, labels: np.ndarray, m: int) -> float:
    """Expected calibration error: the population-weighted mean absolute gap
    between per-bin accuracy and per-bin confidence."""
    return reliability_bins(probs, labels, m).ece()


def mce(probs: np.ndarray, labels: np.ndarray, m: int) -> float:
    """Maximum calibration error: the largest accuracy/confidence gap over
    the non-empty bins. Reported alongside ECE, not used for gating."""
    bins = reliability_bins(probs, labels, m)
    nonzero = bins.counts > 0
    if not nonzero.any():
        return 0.0
    return float(np.abs(bins.accuracies - bins.confidences)[nonzero].max())


# ---------------------------------------------------------------------------
# Confidence-threshold abstention
# ---------------------------------------------------------------------------

ABSTAIN = None  # threshold_predict sentinel


def threshold_predict(probs_row: np.ndarray, tau: float) -> int | None:
    """Class index of the top probability when it reaches tau, else None
    (abstain). Argmax ties break toward the lowest index."""
    row = np.asarray(probs_row, dtype=np.float64)
    top = int(row.argmax())
    return top if row[top] >= tau else ABSTAIN


@dataclass
class ThresholdReport:
    tau: float
    accuracy_at_tau: float
    abstention_rate: float
    n_total: int
    n_abstained: int
    all_abstained: bool = False


def abstention_report(
    probs: np.ndarray, labels: np.ndarray, tau: float
) -> ThresholdReport:
    """Accuracy over the non-abstained items plus the abstention rate."""
    P = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if P.ndim != 2 or y.shape != (P.shape[0],) or P.shape[0] < 1:
        raise MarstagError("SHAPE_MISMATCH", f"probs {P.shape} vs labels {y.shape}")
    confidence = P.max(axis=1)
    kept = confidence >= tau
    n = P.shape[0]
    n_abstained = int((~kept).sum())
    if kept.any():
        accuracy = float((P[kept].argmax(axis=1) == y[kept]).mean())
        all_abstained = False
    else:
        accuracy = 0.0
        all_abstained = True
    return ThresholdReport(
        tau=tau,
        accuracy_at_tau=accuracy,
        abstention_rate=n_abstained / n,
        n_total=n,
        n_abstained=n_abstained,
        all_abstained=all_abstained,
    )


# ---------------------------------------------------------------------------
# Per-class evaluation with abstention-as-miss
# ---------------------------------------------------------------------------

@dataclass
class ClassMetrics:
    class_id: str
    precision: float
    recall: float
    f1: float
    support: int
    group: str  # high (F1 > 0.6) | mid (0.2 <= F1 <= 0.6) | low (F1 < 0.2)
    defined: bool = True


def _f1_group(f1: float) -> str:
    if f1 > 0.6:
        return "high"
    if f1 >= 0.2:
        return "mid"
    return "low"


def per_class_metrics(
    preds: list[int | None], labels: np.ndarray, classes: list[str]
) -> list[ClassMetrics]:
    """Precision/recall/F1 per class. Abstained items are excluded from the
    precision denominator but their true class still counts them as missed
    detections in recall."""
    y = np.asarray(labels)
    if len(preds) != y.shape[0]:
        raise MarstagError("SHAPE_MISMATCH", f"{len(preds)} preds vs {y.shape[0]} labels")
    out: list[ClassMetrics] = []
    for k, class_id in enumerate(classes):
        tp = sum(1 for p, t in zip(preds, y) if p == k and t == k)
        fp = sum(1 for p, t in zip(preds, y) if p == k and t != k)
        support = int((y == k).sum())
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / support if support else 0.0
        f1 = (
            2 * precision * recall / (precision + recall)
            if (precision + recall) > 0
            else 0.0
        )
        defined = support > 0 or (tp + fp) > 0
        out.append(
            ClassMetrics(class_id, precision, recall, f1, support, _f1_group(f1), defined)
        )
    return out


def confusion_matrix(
    preds: list[int | None], labels: np.ndarray, classes: list[str]
) -> np.ndarray:
    """K x (K+1) counts: rows are true classes, the trailing column counts
    abstentions. Row sums equal per-class supports."""
    y = np.asarray(labels)
    if len(preds) != y.shape[0]:
        raise MarstagError("SHAPE_MISMATCH", f"{len(preds)} preds vs {y.shape[0]} labels")
    k = len(classes)
    mat = np.zeros((k, k + 1), dtype=int)
    for p, t in zip(preds, y):
        mat[t, k if p is ABSTAIN else p] += 1
    return mat
