"""Training the dropout network with hand-written backpropagation and Adam.

Biases are held at zero throughout.  Every example in a mini-batch gets its
own dropout mask, and the mask is treated as a constant in the backward
pass.  As in the forward model, activations are multiplied by the mask with no
``1/q`` rescaling, so deterministic evaluation substitutes ``E[z] = q``.
"""
import gzip
import hashlib
import json
import os
import shutil
import struct
import urllib.request
from dataclasses import asdict, dataclass, field

import numpy as np

from .net_core import ACTIVATIONS, SpecError, WeightSet, init_iid_gaussian
from .rng import stream

__all__ = [
    "AdamState",
    "Dataset",
    "IdxError",
    "TrainConfig",
    "TrainReport",
    "TrainingDiverged",
    "adam_update",
    "evaluate",
    "fetch_data",
    "load_idx",
    "loss_and_grad",
    "train",
    "weight_drift",
    "write_idx",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    """Malformed IDX file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------- data

@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 2:
            raise ValueError("images must be a 2-d array (n, features)")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.split)


def _read(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(buf, magic, ndim):
    if len(buf) < 4:
        raise IdxError("truncated magic", 0)
    (m,) = struct.unpack_from(">I", buf, 0)
    if m != magic:
        raise IdxError(f"bad magic 0x{m:08x}, expected 0x{magic:08x}", 0)
    if len(buf) < 4 + 4 * ndim:
        raise IdxError("truncated dimension header", 4)
    dims = struct.unpack_from(">" + "I" * ndim, buf, 4)
    start = 4 + 4 * ndim
    need = int(np.prod(dims))
    if len(buf) - start < need:
        raise IdxError(f"truncated payload: {len(buf) - start} of {need} bytes", len(buf))
    if len(buf) - start > need:
        raise IdxError(f"{len(buf) - start - need} trailing bytes", start + need)
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(dims)


def load_idx(images_path, labels_path, split="train"):
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    img = _parse_idx(_read(images_path), IMAGE_MAGIC, 3)
    lab = _parse_idx(_read(labels_path), LABEL_MAGIC, 1)
    if img.shape[0] != lab.shape[0]:
        raise IdxError(f"count mismatch: {img.shape[0]} images vs {lab.shape[0]} labels", 4)
    if lab.size and lab.max() > 9:
        bad = int(np.argmax(lab > 9))
        raise IdxError(f"label {lab[bad]} outside 0..9", 8 + bad)
    return Dataset(img.reshape(img.shape[0], -1) / 255.0, lab.astype(np.int64), split)


def write_idx(path, array, kind):
    """Write ``uint8`` data as an IDX file; ``kind`` is ``"images"`` or ``"labels"``."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    magic, ndim = (IMAGE_MAGIC, 3) if kind == "images" else (LABEL_MAGIC, 1)
    if a.ndim != ndim:
        raise ValueError(f"{kind} need {ndim} dimensions")
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(struct.pack(">I" + "I" * ndim, magic, *a.shape))
        fh.write(a.tobytes())


def fetch_data(url, dest_dir, sha256=None, timeout=60):
    """Download ``url`` into ``dest_dir``, verifying an optional SHA-256 digest."""
    os.makedirs(dest_dir, exist_ok=True)
    target = os.path.join(dest_dir, os.path.basename(url.rstrip("/")))
    tmp = target + ".part"
    with urllib.request.urlopen(url, timeout=timeout) as resp, open(tmp, "wb") as fh:
        shutil.copyfileobj(resp, fh)
    with open(tmp, "rb") as fh:
        digest = hashlib.sha256(fh.read()).hexdigest()
    if sha256 is not None and digest != sha256.lower():
        os.remove(tmp)
        raise ValueError(f"checksum mismatch for {url}: {digest}")
    os.replace(tmp, target)
    return target


# ---------------------------------------------------------------- model

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.2
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


def _softmax(logits):
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _forward_batch(weights, act, x, masks):
    """Return pre-activations and masked activations for a batch."""
    phi = ACTIVATIONS[act][0]
    g, pre, post = x, [], [x]
    for nu, w in enumerate(weights):
        f = g @ w.T / np.sqrt(w.shape[1])
        pre.append(f)
        if nu < len(weights) - 1:
            g = masks[nu] * phi(f)
            post.append(g)
    return pre, post


def loss_and_grad(weights, activation, x, y, masks):
    """Mean softmax cross-entropy and its gradient with respect to each weight matrix.

    Parameters
    ----------
    weights : sequence of ndarray
        Raw weights, layer 1 first; the forward pass divides by sqrt(fan_in).
    activation : str
    x : ndarray, shape (B, d)
    y : ndarray of int, shape (B,)
    masks : sequence of ndarray
        One ``(B, h)`` mask (or scalar) per hidden layer.
    """
    dphi = ACTIVATIONS[activation][1]
    pre, post = _forward_batch(weights, activation, x, masks)
    logits = pre[-1]
    p = _softmax(logits)
    n = x.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(n), y]))
    delta = p
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = [None] * len(weights)
    for nu in range(len(weights) - 1, -1, -1):
        scale = np.sqrt(weights[nu].shape[1])
        grads[nu] = delta.T @ post[nu] / scale
        if nu:
            delta = (delta @ weights[nu]) / scale * masks[nu - 1] * dphi(pre[nu - 1])
    return loss, grads


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_update(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step; returns new parameters and state."""
    t = state.t + 1
    m = [beta1 * mi + (1 - beta1) * g for mi, g in zip(state.m, grads)]
    v = [beta2 * vi + (1 - beta2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps) for p, mi, vi in zip(params, m, v)]
    return new, AdamState(m, v, t)


def _batch_masks(spec, q, seed, step, n):
    return [stream(seed, "train-mask", step, nu).random((n, h)) < q
            for nu, h in enumerate(spec.hidden_widths, start=1)]


@dataclass
class TrainReport:
    config: TrainConfig
    initial: WeightSet
    final: WeightSet
    train_loss: list = field(default_factory=list)
    test_accuracy: list = field(default_factory=list)

    def to_json(self):
        return json.dumps({
            "config": asdict(self.config),
            "spec": self.final.spec.to_dict(),
            "epochs": [{"epoch": i + 1, "train_loss": l,
                        "test_accuracy": self.test_accuracy[i] if i < len(self.test_accuracy) else None}
                       for i, l in enumerate(self.train_loss)],
            "weight_drift": [float(d) for d in weight_drift(self.initial, self.final)],
        }, indent=1)


def train(spec, data, cfg, seed, test=None, initial=None):
    """Train with Adam on softmax cross-entropy.

    Parameters
    ----------
    spec : NetworkSpec
        ``bias_scheme`` must be ``"zero"`` and ``keep_rate`` must equal
        ``1 - cfg.dropout``.
    data, test : Dataset
    cfg : TrainConfig
    seed : int
        Seeds the initial weights and the dropout masks.
    initial : WeightSet, optional
        Starting weights (default: i.i.d. standard normal).

    Raises
    ------
    TrainingDiverged
        If the loss becomes non-finite.
    """
    if spec.bias_scheme != "zero":
        raise SpecError("training keeps biases at zero; use bias_scheme='zero'")
    q = 1.0 - cfg.dropout
    if not np.isclose(spec.keep_rate, q, rtol=0, atol=1e-12):
        raise SpecError(f"spec keep rate {spec.keep_rate} disagrees with dropout {cfg.dropout}")
    if data.images.shape[1] != spec.input_dim:
        raise ValueError(f"input dimension {data.images.shape[1]} != {spec.input_dim}")
    if data.labels.max() >= spec.output_dim:
        raise ValueError("labels exceed the output dimension")
    ws0 = initial if initial is not None else init_iid_gaussian(spec, seed)
    params = [np.array(w) for w in ws0.weights]
    state = AdamState.zeros_like(params)
    report = TrainReport(cfg, ws0, ws0)
    n, step = len(data), 0
    for epoch in range(cfg.epochs):
        order = stream(cfg.shuffle_seed, "epoch-shuffle", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            masks = _batch_masks(spec, q, seed, step, idx.size)
            loss, grads = loss_and_grad(params, spec.activation, data.images[idx], data.labels[idx], masks)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at epoch {epoch + 1}, step {step}")
            params, state = adam_update(params, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2,
                                        cfg.eps)
            total += loss * idx.size
            step += 1
        report.train_loss.append(total / n)
        report.final = ws0.replace(weights=params)
        if test is not None:
            report.test_accuracy.append(evaluate(report.final, test))
    return report


def evaluate(ws, data, mode="deterministic", n_passes=100, seed=0, batch=1000):
    """Classification accuracy.

    ``mode="deterministic"`` replaces each mask by its mean ``q``;
    ``mode="mc"`` averages the softmax outputs of ``n_passes`` dropout passes.
    """
    spec = ws.spec
    q = spec.keep_rate
    correct = 0
    for start in range(0, len(data), batch):
        x = data.images[start:start + batch]
        if mode == "deterministic":
            pre, _ = _forward_batch(ws.weights, spec.activation, x, [q] * spec.depth)
            probs = pre[-1]
        elif mode == "mc":
            probs = 0.0
            for k in range(n_passes):
                masks = [stream(seed, "eval-mask", start, k, nu).random((x.shape[0], h)) < q
                         for nu, h in enumerate(spec.hidden_widths, start=1)]
                pre, _ = _forward_batch(ws.weights, spec.activation, x, masks)
                probs = probs + _softmax(pre[-1])
        else:
            raise ValueError(f"unknown mode {mode!r}")
        correct += int(np.sum(np.argmax(probs, axis=1) == data.labels[start:start + batch]))
    return correct / len(data)


def _spectral_norm(d, tol, max_iter):
    if not np.any(d):
        return 0.0
    v = stream(0, "power-iteration").standard_normal(d.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = d @ v
        w = d.T @ u
        new = np.sqrt(np.linalg.norm(w))
        v = w / np.linalg.norm(w)
        if abs(new - sigma) <= tol * new:
            return float(np.linalg.norm(d @ v))
        sigma = new
    raise RuntimeError(f"power iteration did not converge in {max_iter} steps")


def weight_drift(ws0, ws_t, tol=1e-8, max_iter=10_000):
    """Per-layer ``||W(t) - W(0)||_op / sqrt(fan_in)`` via power iteration."""
    if len(ws0.weights) != len(ws_t.weights):
        raise ValueError("weight sets differ in depth")
    out = []
    for a, b in zip(ws0.weights, ws_t.weights):
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
        out.append(_spectral_norm(b - a, tol, max_iter) / np.sqrt(a.shape[1]))
    return np.array(out)
