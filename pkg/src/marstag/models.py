"""Lightweight classification heads over hand-crafted image features.

Feature vectors are a 32-bin intensity histogram plus edge-pixel fraction
plus mean/std intensity (35 values). On top of them sit a single-label
softmax head, a multi-label binary-relevance head trained on mean binary
cross-entropy, a classifier chain that feeds each class logit into the
next step together with a site-location one-hot, a most-common-class
baseline, and a two-stage hybrid that re-classifies a trigger class with a
finer-grained head.

All training is plain mini-batch SGD from zero-initialized parameters, so
a (data, seed, config) triple reproduces a model bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .catalogs import ClassCatalog
from .errors import MarstagError
from .landmarking import SalienceParams, canny_response

FEATURE_HISTOGRAM_BINS = 32
FEATURE_DIM = FEATURE_HISTOGRAM_BINS + 3
UNKNOWN_SITE = "<UNKNOWN>"

_FEATURE_CANNY = SalienceParams()


def extract_features(image: np.ndarray) -> np.ndarray:
    """Deterministic 35-value feature vector for a grayscale image."""
    image = np.asarray(image, dtype=np.float64)
    hist, _ = np.histogram(image, bins=FEATURE_HISTOGRAM_BINS, range=(0.0, 256.0))
    hist = hist.astype(np.float64)
    hist /= max(hist.sum(), 1.0)
    if min(image.shape) > 5:
        edges = canny_response(image, _FEATURE_CANNY)
        edge_fraction = float((edges > 0).mean())
    else:
        edge_fraction = 0.0
    return np.concatenate(
        [hist, [edge_fraction, image.mean() / 255.0, image.std() / 255.0]]
    )


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    l2: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1 or self.l2 < 0:
            raise MarstagError("INVALID_PARAMS", f"bad SGD config {self}")


@dataclass
class MostCommonBaseline:
    class_id: str

    def predict(self, _features=None) -> str:
        return self.class_id


def most_common_baseline(labels: list[str], catalog: ClassCatalog) -> MostCommonBaseline:
    """Constant predictor emitting the modal training class; ties break by
    catalog order."""
    if not labels:
        raise MarstagError("EMPTY_DATASET", "no training labels")
    counts: dict[str, int] = {}
    for y in labels:
        counts[y] = counts.get(y, 0) + 1
    best = max(counts, key=lambda c: (counts[c], -catalog.index(c)))
    return MostCommonBaseline(best)


# ---------------------------------------------------------------------------
# Single-label softmax head
# ---------------------------------------------------------------------------

@dataclass
class SoftmaxHead:
    weights: np.ndarray  # K x D
    bias: np.ndarray  # K
    classes: list[str]


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def ce_loss_and_grad(W, b, X, y_idx, l2=0.0):
    """Mean cross-entropy plus l2 * ||W||^2, with gradients in (W, b)."""
    n = X.shape[0]
    probs = _softmax_rows(X @ W.T + b)
    nll = -np.log(np.clip(probs[np.arange(n), y_idx], 1e-12, None)).mean()
    loss = nll + l2 * float((W * W).sum())
    g = probs.copy()
    g[np.arange(n), y_idx] -= 1.0
    g /= n
    return loss, g.T @ X + 2.0 * l2 * W, g.sum(axis=0)


def train_softmax(
    X: np.ndarray, labels: list[str], cfg: SgdConfig, classes: list[str] | None = None
) -> SoftmaxHead:
    """Fit a linear softmax head by mini-batch SGD from zero init."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != len(labels):
        raise MarstagError("DIMENSION_MISMATCH", f"features {X.shape} vs {len(labels)} labels")
    if classes is None:
        classes = sorted(set(labels))
    if len(set(labels)) < 2:
        raise MarstagError("SINGLE_CLASS", "need at least two distinct labels")
    index = {c: i for i, c in enumerate(classes)}
    try:
        y = np.array([index[l] for l in labels])
    except KeyError as exc:
        raise MarstagError("UNKNOWN_CLASS", f"label {exc} not in class list") from exc
    n, d = X.shape
    k = len(classes)
    W = np.zeros((k, d))
    b = np.zeros(k)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            _, gW, gb = ce_loss_and_grad(W, b, X[batch], y[batch], cfg.l2)
            W -= cfg.learning_rate * gW
            b -= cfg.learning_rate * gb
    return SoftmaxHead(W, b, list(classes))


def predict_logits(head: SoftmaxHead, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != head.weights.shape[1]:
        raise MarstagError(
            "DIMENSION_MISMATCH",
            f"feature dim {x.shape[-1]} vs head dim {head.weights.shape[1]}",
        )
    return x @ head.weights.T + head.bias


# ---------------------------------------------------------------------------
# Multi-label binary relevance
# ---------------------------------------------------------------------------

@dataclass
class MultiLabelHead:
    weights: np.ndarray  # N x D
    bias: np.ndarray  # N
    classes: list[str]


def multilabel_loss(targets: np.ndarray, probs: np.ndarray) -> float:
    """Mean binary cross-entropy across classes and items:
    -(1/(N n)) sum_i sum_j [y log p + (1 - y) log(1 - p)]."""
    y = np.asarray(targets, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if y.shape != p.shape:
        raise MarstagError("SHAPE_MISMATCH", f"targets {y.shape} vs probs {p.shape}")
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


def multilabel_grad_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d(multilabel_loss)/d(logits) = (sigmoid(z) - y) / (N n)."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise MarstagError("SHAPE_MISMATCH", f"logits {z.shape} vs targets {y.shape}")
    return (sigmoid(z) - y) / z.size


def sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def train_multilabel(
    X: np.ndarray, Y: np.ndarray, cfg: SgdConfig, classes: list[str] | None = None
) -> MultiLabelHead:
    """Fit independent per-class sigmoid heads by SGD on the mean BCE loss."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise MarstagError("SHAPE_MISMATCH", f"features {X.shape} vs targets {Y.shape}")
    n, d = X.shape
    n_classes = Y.shape[1]
    if classes is None:
        classes = [f"class_{j}" for j in range(n_classes)]
    if len(classes) != n_classes:
        raise MarstagError("SHAPE_MISMATCH", "class list does not match target width")
    W = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            Z = X[batch] @ W.T + b
            G = (sigmoid(Z) - Y[batch]) / (n_classes * len(batch))
            W -= cfg.learning_rate * (G.T @ X[batch] + 2.0 * cfg.l2 * W)
            b -= cfg.learning_rate * G.sum(axis=0)
    return MultiLabelHead(W, b, list(classes))


def predict_multilabel(head: MultiLabelHead, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != head.weights.shape[1]:
        raise MarstagError(
            "DIMENSION_MISMATCH",
            f"feature dim {x.shape[-1]} vs head dim {head.weights.shape[1]}",
        )
    return sigmoid(x @ head.weights.T + head.bias)


# ---------------------------------------------------------------------------
# Classifier chain with site-location feature
# ---------------------------------------------------------------------------

@dataclass
class ChainModel:
    classes: list[str]  # chain order
    step_weights: list[np.ndarray]  # step t: D + t + len(site_vocab) values
    site_vocab: list[str]  # includes UNKNOWN_SITE as the last entry
    feature_dim: int

    def __post_init__(self):
        s = len(self.site_vocab)
        for t, w in enumerate(self.step_weights):
            expect = self.feature_dim + t + s
            if w.shape != (expect,):
                raise MarstagError(
                    "SHAPE_MISMATCH",
                    f"chain step {t} expects {expect} weights, got {w.shape}",
                )


def site_one_hot(site: str, site_vocab: list[str], strict: bool = False) -> np.ndarray:
    onehot = np.zeros(len(site_vocab))
    if site in site_vocab:
        onehot[site_vocab.index(site)] = 1.0
    elif strict:
        raise MarstagError("UNKNOWN_SITE", f"site {site!r} not in vocabulary")
    else:
        onehot[site_vocab.index(UNKNOWN_SITE)] = 1.0
    return onehot


def predict_chain(
    model: ChainModel, x: np.ndarray, site: str, strict: bool = False
) -> np.ndarray:
    """Probabilities in chain order; each step's logit consumes the features,
    all previously computed logits, and the site one-hot."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.feature_dim,):
        raise MarstagError(
            "DIMENSION_MISMATCH", f"feature dim {x.shape} vs {model.feature_dim}"
        )
    onehot = site_one_hot(site, model.site_vocab, strict)
    d = model.feature_dim
    logits = np.zeros(len(model.classes))
    for t, w in enumerate(model.step_weights):
        # Three separate dot products keep the zero-chain-weight case exactly
        # equal to an independent per-class head.
        logit = (
            np.dot(w[:d], x)
            + np.dot(w[d : d + t], logits[:t])
            + np.dot(w[d + t :], onehot)
        )
        logits[t] = logit
    return sigmoid(logits)


def train_chain(
    X: np.ndarray,
    Y: np.ndarray,
    sites: list[str],
    cfg: SgdConfig,
    chain_classes: list[str],
    site_vocab: list[str] | None = None,
) -> ChainModel:
    """Train chain steps sequentially; each step sees the predicted logits of
    the already-trained earlier steps (same recurrence as inference)."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0] or Y.shape[1] != len(chain_classes):
        raise MarstagError("SHAPE_MISMATCH", f"features {X.shape} vs targets {Y.shape}")
    if site_vocab is None:
        site_vocab = sorted(set(sites)) + [UNKNOWN_SITE]
    elif UNKNOWN_SITE not in site_vocab:
        site_vocab = list(site_vocab) + [UNKNOWN_SITE]
    onehots = np.stack([site_one_hot(s, site_vocab) for s in sites])
    n, d = X.shape
    rng = np.random.default_rng(cfg.seed)
    prev_logits = np.zeros((n, 0))
    steps: list[np.ndarray] = []
    for t in range(len(chain_classes)):
        inputs = np.hstack([X, prev_logits, onehots])
        w = np.zeros(inputs.shape[1])
        y_t = Y[:, t]
        for _ in range(cfg.epochs):
            perm = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                batch = perm[start : start + cfg.batch_size]
                z = inputs[batch] @ w
                g = (sigmoid(z) - y_t[batch]) / len(batch)
                w -= cfg.learning_rate * (g @ inputs[batch] + 2.0 * cfg.l2 * w)
        steps.append(w)
        prev_logits = np.hstack([prev_logits, (inputs @ w)[:, None]])
    return ChainModel(list(chain_classes), steps, site_vocab, d)


# ---------------------------------------------------------------------------
# Hybrid two-stage classifier
# ---------------------------------------------------------------------------

@dataclass
class HybridClassifier:
    v2: SoftmaxHead
    v1: SoftmaxHead
    trigger_class_id: str

    def __post_init__(self):
        if self.trigger_class_id not in self.v2.classes:
            raise MarstagError(
                "UNKNOWN_CLASS", f"trigger {self.trigger_class_id!r} not in v2 classes"
            )
        if self.trigger_class_id in self.v1.classes:
            raise MarstagError(
                "UNKNOWN_CLASS", f"trigger {self.trigger_class_id!r} must not be in v1"
            )

    def reachable_classes(self) -> list[str]:
        out = [c for c in self.v2.classes if c != self.trigger_class_id]
        out.extend(c for c in self.v1.classes if c not in out)
        return out


def hybrid_classify(h: HybridClassifier, x: np.ndarray) -> tuple[str, np.ndarray]:
    """Classify with the newer head; when it lands on the trigger class,
    re-classify with the fine-grained older head and return its result."""
    probs2 = _softmax_rows(predict_logits(h.v2, x)[None, :])[0]
    top2 = int(probs2.argmax())
    if h.v2.classes[top2] != h.trigger_class_id:
        return h.v2.classes[top2], probs2
    probs1 = _softmax_rows(predict_logits(h.v1, x)[None, :])[0]
    return h.v1.classes[int(probs1.argmax())], probs1


# ---------------------------------------------------------------------------
# Persistence: versioned text format, 17 significant digits
# ---------------------------------------------------------------------------

_FMT = "%.17g"


def _fmt_row(values) -> str:
    return " ".join(_FMT % v for v in values)


def _parse_row(line: str) -> np.ndarray:
    return np.array([float(tok) for tok in line.split()], dtype=np.float64)


def save_model(path, model) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        _write_model(fh, model)


def _write_model(fh, model) -> None:
    if isinstance(model, SoftmaxHead):
        k, d = model.weights.shape
        fh.write(f"model softmax {k} {d}\n")
        fh.write("classes\t" + "\t".join(model.classes) + "\n")
        for i in range(k):
            fh.write(_fmt_row([model.bias[i], *model.weights[i]]) + "\n")
    elif isinstance(model, MultiLabelHead):
        n, d = model.weights.shape
        fh.write(f"model multilabel {n} {d}\n")
        fh.write("classes\t" + "\t".join(model.classes) + "\n")
        for i in range(n):
            fh.write(_fmt_row([model.bias[i], *model.weights[i]]) + "\n")
    elif isinstance(model, ChainModel):
        fh.write(
            f"model chain {len(model.classes)} {model.feature_dim} "
            f"{len(model.site_vocab)}\n"
        )
        fh.write("classes\t" + "\t".join(model.classes) + "\n")
        fh.write("sites\t" + "\t".join(model.site_vocab) + "\n")
        for w in model.step_weights:
            fh.write(_fmt_row(w) + "\n")
    elif isinstance(model, HybridClassifier):
        fh.write(f"model hybrid {model.trigger_class_id}\n")
        _write_model(fh, model.v2)
        _write_model(fh, model.v1)
    else:
        raise MarstagError("UNKNOWN_MODEL", f"cannot save {type(model).__name__}")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    model, rest = _read_model(lines)
    if rest:
        raise MarstagError("MALFORMED_ROW", "trailing content in model file")
    return model


def _read_model(lines: list[str]):
    if not lines:
        raise MarstagError("MALFORMED_ROW", "empty model file")
    header = lines[0].split()
    if header[:1] != ["model"]:
        raise MarstagError("MALFORMED_ROW", f"bad model header {lines[0]!r}")
    kind = header[1]
    if kind in ("softmax", "multilabel"):
        k, d = int(header[2]), int(header[3])
        classes = lines[1].split("\t")[1:]
        rows = [_parse_row(lines[2 + i]) for i in range(k)]
        bias = np.array([r[0] for r in rows])
        weights = np.array([r[1:] for r in rows])
        if weights.shape != (k, d):
            raise MarstagError("MALFORMED_ROW", "model row width mismatch")
        cls = SoftmaxHead if kind == "softmax" else MultiLabelHead
        return cls(weights, bias, classes), lines[2 + k :]
    if kind == "chain":
        n, d, s = int(header[2]), int(header[3]), int(header[4])
        classes = lines[1].split("\t")[1:]
        sites = lines[2].split("\t")[1:]
        steps = [_parse_row(lines[3 + t]) for t in range(n)]
        model = ChainModel(classes, steps, sites, d)
        if len(sites) != s:
            raise MarstagError("MALFORMED_ROW", "site vocabulary size mismatch")
        return model, lines[3 + n :]
    if kind == "hybrid":
        trigger = header[2]
        v2, rest = _read_model(lines[1:])
        v1, rest = _read_model(rest)
        return HybridClassifier(v2, v1, trigger), rest
    raise MarstagError("UNKNOWN_MODEL", f"unknown model kind {kind!r}")
