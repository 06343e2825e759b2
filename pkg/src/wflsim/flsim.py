"""Federated-learning statistical process.

The reference learner is multinomial logistic regression trained with
full-batch gradient steps: convex, deterministic and cheap, which keeps
descent monotone and makes every gradient checkable against finite
differences. Model parameters are one flat float64 vector of shape
``(d + 1) * L`` (weights then biases, class-major).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

AGG_PARTICIPATING = "participating"
AGG_LITERAL = "literal"


@dataclass
class Dataset:
    """Feature matrix (n, d) plus integer class labels in [0, L)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be 2-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class FLConfig:
    num_devices: int = 8
    local_iters: int = 5
    learning_rate: float = 0.3
    alpha: float = 0.2
    num_classes: int = 4
    aggregation_mode: str = AGG_PARTICIPATING
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.num_devices < 2:
            raise ValueError("need at least 2 devices")
        if self.local_iters < 1:
            raise ValueError("local_iters must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.aggregation_mode not in (AGG_PARTICIPATING, AGG_LITERAL):
            raise ValueError(f"unknown aggregation_mode {self.aggregation_mode!r}")


@dataclass
class StatState:
    """FL-statistics state: per-device arrays indexed by device id.

    ``local_loss``, ``grad_inner`` and ``sign_agree`` are zero for devices
    that did not participate in the round that produced this state;
    ``data_size`` and ``global_loss`` cover every device.
    """

    local_loss: np.ndarray
    grad_inner: np.ndarray
    sign_agree: np.ndarray
    data_size: np.ndarray
    global_loss: np.ndarray
    prev_accuracy: float
    selected_mask: np.ndarray = field(default=None)

    FEATURES_PER_DEVICE = 5

    def __post_init__(self):
        n = len(self.data_size)
        if self.selected_mask is None:
            self.selected_mask = np.zeros(n, dtype=bool)
        for name in ("local_loss", "grad_inner", "sign_agree", "global_loss"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length mismatch")

    def to_vector(self) -> np.ndarray:
        """Per-device blocks [F_n, inner, sign, |D_n|, l_n], device-major."""
        return np.stack(
            [self.local_loss, self.grad_inner, self.sign_agree,
             self.data_size.astype(np.float64), self.global_loss],
            axis=1,
        ).ravel()

    @classmethod
    def from_vector(cls, vec: np.ndarray, prev_accuracy: float,
                    selected_mask: np.ndarray | None = None) -> "StatState":
        m = np.asarray(vec, dtype=np.float64).reshape(-1, cls.FEATURES_PER_DEVICE)
        return cls(local_loss=m[:, 0].copy(), grad_inner=m[:, 1].copy(),
                   sign_agree=m[:, 2].copy(), data_size=m[:, 3].copy(),
                   global_loss=m[:, 4].copy(), prev_accuracy=prev_accuracy,
                   selected_mask=selected_mask)


# ---------------------------------------------------------------------------
# data


def synthetic_blobs(n_samples: int, n_features: int, n_classes: int,
                    seed: int, spread: float = 0.6,
                    center_scale: float = 2.0) -> Dataset:
    """Gaussian class blobs; the seed drives labels and sample noise.

    Class centers are equally spaced on a circle in the first two feature
    dimensions, so classes stay separable regardless of the seed.
    """
    if n_features < 2:
        raise ValueError("need at least 2 features")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centers = np.zeros((n_classes, n_features))
    centers[:, 0] = center_scale * np.cos(angles)
    centers[:, 1] = center_scale * np.sin(angles)
    labels = rng.integers(0, n_classes, size=n_samples)
    feats = centers[labels] + rng.normal(0.0, spread, size=(n_samples, n_features))
    return Dataset(feats, labels)


def load_dataset(path) -> Dataset:
    """Plain-text format: header line ``d L n`` then n rows of d floats + 1 label."""
    with open(path, "r", encoding="ascii") as fh:
        return _read_dataset(fh)


def _read_dataset(fh) -> Dataset:
    header = fh.readline().split()
    if len(header) != 3:
        raise ValueError("dataset header must be 'd L n'")
    d, num_classes, n = (int(v) for v in header)
    feats = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        row = fh.readline().split()
        if len(row) != d + 1:
            raise ValueError(f"row {i} has {len(row)} fields, expected {d + 1}")
        feats[i] = [float(v) for v in row[:d]]
        labels[i] = int(row[d])
    if labels.size and labels.max() >= num_classes:
        raise ValueError("label out of declared class range")
    return Dataset(feats, labels)


def save_dataset(ds: Dataset, path, num_classes: int | None = None) -> None:
    num_classes = int(ds.labels.max()) + 1 if num_classes is None else num_classes
    buf = io.StringIO()
    buf.write(f"{ds.dim} {num_classes} {len(ds)}\n")
    for x, y in zip(ds.features, ds.labels):
        buf.write(" ".join(repr(float(v)) for v in x) + f" {int(y)}\n")
    with open(path, "w", encoding="ascii") as fh:
        fh.write(buf.getvalue())


def partition_dirichlet(dataset: Dataset, num_devices: int, alpha: float,
                        seed: int) -> list[Dataset]:
    """Split a dataset across devices with Dirichlet(alpha) per-class shares.

    Partitions are disjoint and cover the input exactly. Devices that end up
    empty are repaired by moving one sample from the currently largest
    partition, so no device is degenerate at small scale.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if len(dataset) < num_devices:
        raise ValueError("fewer samples than devices")
    classes = np.unique(dataset.labels)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    device_indices: list[list[int]] = [[] for _ in range(num_devices)]
    for c in classes:
        idx = np.flatnonzero(dataset.labels == c)
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(num_devices, alpha))
        # largest-remainder rounding so counts sum exactly to len(idx)
        raw = props * len(idx)
        counts = np.floor(raw).astype(int)
        short = len(idx) - counts.sum()
        if short > 0:
            order = np.argsort(-(raw - counts))
            counts[order[:short]] += 1
        pos = 0
        for dev in range(num_devices):
            device_indices[dev].extend(idx[pos:pos + counts[dev]].tolist())
            pos += counts[dev]
    for dev in range(num_devices):
        while not device_indices[dev]:
            donor = max(range(num_devices), key=lambda d: len(device_indices[d]))
            device_indices[dev].append(device_indices[donor].pop())
    out = []
    for dev in range(num_devices):
        sel = np.sort(np.asarray(device_indices[dev], dtype=np.int64))
        out.append(Dataset(dataset.features[sel], dataset.labels[sel]))
    return out


# ---------------------------------------------------------------------------
# reference learner: multinomial logistic regression


def init_model(n_features: int, n_classes: int) -> np.ndarray:
    return np.zeros((n_features + 1) * n_classes)


def _unpack(params: np.ndarray, n_features: int, n_classes: int):
    w = params[: n_features * n_classes].reshape(n_features, n_classes)
    b = params[n_features * n_classes:]
    return w, b


def model_logits(params: np.ndarray, features: np.ndarray, n_classes: int) -> np.ndarray:
    w, b = _unpack(params, features.shape[1], n_classes)
    return features @ w + b


def loss_and_grad(params: np.ndarray, data: Dataset, n_classes: int,
                  weight_decay: float = 0.0):
    """Mean cross-entropy (plus optional L2 on weights) and its gradient."""
    n, d = data.features.shape
    logits = model_logits(params, data.features, n_classes)
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    probs = expl / expl.sum(axis=1, keepdims=True)
    logp = logits - np.log(expl.sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), data.labels].mean()
    dlogits = probs
    dlogits[np.arange(n), data.labels] -= 1.0
    dlogits /= n
    gw = data.features.T @ dlogits
    gb = dlogits.sum(axis=0)
    grad = np.concatenate([gw.ravel(), gb])
    if weight_decay:
        w, _ = _unpack(params, d, n_classes)
        loss += 0.5 * weight_decay * float(np.sum(w * w))
        grad[: d * n_classes] += weight_decay * w.ravel()
    return float(loss), grad


def local_train(global_params: np.ndarray, data: Dataset, cfg: FLConfig):
    """Run ``local_iters`` full-batch gradient steps from the global model.

    Returns the trained parameters, the final local loss, and the gradient at
    the final parameters.
    """
    if len(data) == 0:
        raise ValueError("empty local dataset")
    params = np.array(global_params, dtype=np.float64)
    for _ in range(cfg.local_iters):
        _, grad = loss_and_grad(params, data, cfg.num_classes, cfg.weight_decay)
        params = params - cfg.learning_rate * grad
    loss, grad = loss_and_grad(params, data, cfg.num_classes, cfg.weight_decay)
    if not np.isfinite(loss):
        raise FloatingPointError("local training diverged (non-finite loss)")
    return params, loss, grad


def aggregate(local_models: list[tuple[np.ndarray, int]], mode: str,
              total_mass: int | None = None) -> np.ndarray:
    """Combine local models weighted by data size.

    ``participating`` normalizes by the participating mass (standard FedAvg);
    ``literal`` divides by the full dataset size, which shrinks the model
    under partial participation and is kept for fidelity experiments.
    """
    if not local_models:
        raise ValueError("no local models to aggregate")
    sizes = np.array([float(s) for _, s in local_models])
    if mode == AGG_PARTICIPATING:
        denom = sizes.sum()
    elif mode == AGG_LITERAL:
        if total_mass is None:
            raise ValueError("literal aggregation needs total_mass")
        denom = float(total_mass)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    if denom <= 0:
        raise ValueError("zero total weight")
    out = np.zeros_like(local_models[0][0])
    for params, size in local_models:
        out += (float(size) / denom) * params
    return out


def evaluate(params: np.ndarray, test: Dataset, n_classes: int) -> float:
    """Argmax accuracy; ties break toward the lowest class index."""
    if len(test) == 0:
        raise ValueError("empty test set")
    preds = np.argmax(model_logits(params, test.features, n_classes), axis=1)
    return float(np.mean(preds == test.labels))


# ---------------------------------------------------------------------------
# statistical features


def sign_agreement(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of coordinates where the two vectors share a sign."""
    return float(np.mean(np.sign(a) == np.sign(b)))


def stat_features(global_params: np.ndarray, global_grad: np.ndarray,
                  local_outputs: dict[int, tuple[np.ndarray, float, np.ndarray]],
                  datasets: list[Dataset], n_classes: int,
                  prev_accuracy: float, weight_decay: float = 0.0) -> StatState:
    """Assemble the per-device statistics state after one training round.

    ``local_outputs`` maps a selected device index to its ``local_train``
    result. Non-selected devices contribute only data size and the loss of
    the current global model on their data.
    """
    n = len(datasets)
    local_loss = np.zeros(n)
    grad_inner = np.zeros(n)
    sign_agree = np.zeros(n)
    data_size = np.array([float(len(d)) for d in datasets])
    global_loss = np.zeros(n)
    selected = np.zeros(n, dtype=bool)
    for dev, ds in enumerate(datasets):
        global_loss[dev], _ = loss_and_grad(global_params, ds, n_classes, weight_decay)
    for dev, (params, loss, grad) in local_outputs.items():
        selected[dev] = True
        local_loss[dev] = loss
        grad_inner[dev] = float(np.dot(grad, global_grad))
        sign_agree[dev] = sign_agreement(params, global_params)
    return StatState(local_loss, grad_inner, sign_agree, data_size,
                     global_loss, prev_accuracy, selected)


def global_gradient(params: np.ndarray, datasets: list[Dataset],
                    n_classes: int, weight_decay: float = 0.0) -> np.ndarray:
    """Gradient of the size-weighted global loss over all devices."""
    total = sum(len(d) for d in datasets)
    grad = np.zeros_like(params)
    for ds in datasets:
        _, g = loss_and_grad(params, ds, n_classes, weight_decay)
        grad += (len(ds) / total) * g
    return grad


# ---------------------------------------------------------------------------
# update perturbations for the robustness experiments


def quantize_update(params: np.ndarray, bits: int) -> np.ndarray:
    """Uniform quantization to 2^bits levels spanning [min, max] of the vector.

    The grid includes both endpoints, which makes the operation idempotent:
    re-quantizing an already quantized vector returns it unchanged.
    """
    if bits < 1:
        raise ValueError("bits must be >= 1")
    v = np.asarray(params, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo or bits >= 52:
        return v.copy()
    levels = 2 ** bits
    step = (hi - lo) / (levels - 1)
    q = np.rint((v - lo) / step)
    return lo + q * step


def dp_noise(params: np.ndarray, clip_norm: float, epsilon: float,
             delta: float, rounds: int, rng: np.random.Generator) -> np.ndarray:
    """Clip an update to L2 norm <= clip_norm and add Gaussian-mechanism noise.

    Noise scale sigma = clip_norm * sqrt(2 * rounds * ln(1.25/delta)) / epsilon,
    i.e. Gaussian-mechanism composition over ``rounds`` releases.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not (0 < delta < 1):
        raise ValueError("delta must be in (0, 1)")
    if clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    v = np.asarray(params, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm > clip_norm:
        v = v * (clip_norm / norm)
    sigma = clip_norm * np.sqrt(2.0 * rounds * np.log(1.25 / delta)) / epsilon
    return v + rng.normal(0.0, sigma, size=v.shape)
