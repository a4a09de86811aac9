"""Residual convolutional encoder with hand-written backprop and Adam.

Architecture (input ``1 x H x W``, default 80 x 360)::

    stem   conv3x3/2 (1->8) + ReLU
    b1     conv3x3/2 (8->16) + ReLU, conv3x3/1 (16->16), + conv1x1/2 shortcut, ReLU
    b2     conv3x3/2 (16->32) + ReLU, conv3x3/1 (32->32), + conv1x1/2 shortcut, ReLU
    pool   global average
    head   linear 32 -> 128, then L2 normalisation

Master weights and optimiser state are float64; training runs the
forward and backward passes in a configurable compute precision (float32
by default). Two objectives are provided: InfoNCE over
same-track positive pairs with in-batch negatives, and softmax
cross-entropy over track ids through a temporary linear classifier.
"""

from __future__ import annotations

import csv
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

EMBED_DIM = 128
INPUT_SHAPE = (80, 360)

_ARCH = (("b1", 8, 16), ("b2", 16, 32))


class ShapeError(ValueError):
    pass


class InsufficientBatchError(ValueError):
    pass


class LabelError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def param_shapes(embed_dim: int = EMBED_DIM) -> "OrderedDict[str, tuple]":
    shapes = OrderedDict()
    shapes["stem.w"] = (8, 1, 3, 3)
    shapes["stem.b"] = (8,)
    for name, cin, cout in _ARCH:
        shapes[f"{name}.conv1.w"] = (cout, cin, 3, 3)
        shapes[f"{name}.conv1.b"] = (cout,)
        shapes[f"{name}.conv2.w"] = (cout, cout, 3, 3)
        shapes[f"{name}.conv2.b"] = (cout,)
        shapes[f"{name}.proj.w"] = (cout, cin, 1, 1)
    shapes["head.w"] = (embed_dim, _ARCH[-1][2])
    shapes["head.b"] = (embed_dim,)
    return shapes


@dataclass(eq=False)
class EncoderParams:
    tensors: "OrderedDict[str, np.ndarray]"
    input_shape: Tuple[int, int] = INPUT_SHAPE

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def embed_dim(self) -> int:
        return self.tensors["head.b"].shape[0]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["head.w"].dtype

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(OrderedDict((k, v.astype(dtype)) for k, v in self.tensors.items()), self.input_shape)

    def copy(self) -> "EncoderParams":
        return EncoderParams(OrderedDict((k, v.copy()) for k, v in self.tensors.items()), self.input_shape)

    def equals(self, other: "EncoderParams") -> bool:
        return (
            self.input_shape == other.input_shape
            and list(self.tensors) == list(other.tensors)
            and all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)
        )


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(seed: int = 0, input_shape=INPUT_SHAPE, embed_dim: int = EMBED_DIM) -> EncoderParams:
    """He-uniform weights, zero biases; depends only on ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE4C0]))
    tensors = OrderedDict()
    for name, shape in param_shapes(embed_dim).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            tensors[name] = he_uniform(rng, shape, fan_in)
    return EncoderParams(tensors, tuple(input_shape))


# --- layers ---------------------------------------------------------------

def conv_forward(x, w, b, stride: int, pad: int):
    """2D cross-correlation via im2col.

    Activations use a channel-major (C, N, H, W) layout so that neither
    the patch matrix nor the output needs a transpose. w: (F, C, kh, kw).
    """
    c, n, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    out = (w.reshape(f, -1) @ cols).reshape(f, n, ho, wo)
    if b is not None:
        out += b[:, None, None, None]
    return out, (x.shape, cols, stride, pad, ho, wo)


def conv_backward(dout, w, cache, need_dx: bool = True):
    xshape, cols, stride, pad, ho, wo = cache
    c, n, h, wd = xshape
    f, _, kh, kw = w.shape
    d = dout.reshape(f, -1)
    dw = (d @ cols.T).reshape(w.shape)
    db = d.sum(axis=1)
    if not need_dx:
        return None, dw, db
    dcols = (w.reshape(f, -1).T @ d).reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    return dxp[:, :, pad : pad + h, pad : pad + wd], dw, db


def _as_batch(params: EncoderParams, images) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or tuple(x.shape[1:]) != tuple(params.input_shape):
        raise ShapeError(
            f"expected images of shape {tuple(params.input_shape)}, got {tuple(x.shape[-2:]) if x.ndim >= 2 else x.shape}"
        )
    dtype = params.dtype
    if x.dtype == np.uint8:
        x = x.astype(dtype) / dtype.type(255.0)
    return np.asarray(x, dtype=dtype)[None]


def _forward(params: EncoderParams, x: np.ndarray):
    p = params.tensors
    cache = {}
    z, cache["stem"] = conv_forward(x, p["stem.w"], p["stem.b"], 2, 1)
    h = np.maximum(z, 0.0)
    cache["stem.mask"] = z > 0
    for name, _, _ in _ARCH:
        z1, c1 = conv_forward(h, p[f"{name}.conv1.w"], p[f"{name}.conv1.b"], 2, 1)
        a1 = np.maximum(z1, 0.0)
        z2, c2 = conv_forward(a1, p[f"{name}.conv2.w"], p[f"{name}.conv2.b"], 1, 1)
        s, cs = conv_forward(h, p[f"{name}.proj.w"], None, 2, 0)
        pre = z2 + s
        h = np.maximum(pre, 0.0)
        cache[name] = (c1, z1 > 0, c2, cs, pre > 0)
    g = h.mean(axis=(2, 3)).T
    cache["pool"] = h.shape
    y = g @ p["head.w"].T + p["head.b"]
    norm = np.linalg.norm(y, axis=1, keepdims=True)
    degenerate = norm[:, 0] < 1e-12
    e = np.divide(y, norm, out=np.zeros_like(y), where=norm > 0)
    # a zero pre-activation has no direction; pin it to the first axis
    e[degenerate] = 0.0
    e[degenerate, 0] = 1.0
    cache["head"] = (g, e, norm, degenerate)
    return e, cache


def _backward(params: EncoderParams, cache, de: np.ndarray) -> Dict[str, np.ndarray]:
    p = params.tensors
    grads = {}
    g, e, norm, degenerate = cache["head"]
    dy = (de - e * np.sum(e * de, axis=1, keepdims=True)) / np.where(degenerate[:, None], 1.0, norm)
    dy[degenerate] = 0.0
    grads["head.w"] = dy.T @ g
    grads["head.b"] = dy.sum(axis=0)
    dg = dy @ p["head.w"]
    c, n, hh, ww = cache["pool"]
    dh = np.broadcast_to((dg.T / (hh * ww))[:, :, None, None], (c, n, hh, ww))
    for name, _, _ in reversed(_ARCH):
        c1, m1, c2, cs, mo = cache[name]
        dpre = dh * mo
        da1, grads[f"{name}.conv2.w"], grads[f"{name}.conv2.b"] = conv_backward(dpre, p[f"{name}.conv2.w"], c2)
        dz1 = da1 * m1
        dh1, grads[f"{name}.conv1.w"], grads[f"{name}.conv1.b"] = conv_backward(dz1, p[f"{name}.conv1.w"], c1)
        dh2, grads[f"{name}.proj.w"], _ = conv_backward(dpre, p[f"{name}.proj.w"], cs)
        dh = dh1 + dh2
    dz = dh * cache["stem.mask"]
    _, grads["stem.w"], grads["stem.b"] = conv_backward(dz, p["stem.w"], cache["stem"], need_dx=False)
    return {k: grads[k] for k in p}


def embed_batch(params: EncoderParams, images, chunk: int = 64) -> np.ndarray:
    """Embed a stack of images (N, H, W) -> (N, embed_dim), unit norm."""
    x = _as_batch(params, images)
    out = [_forward(params, x[i : i + chunk])[0] for i in range(0, len(x), chunk)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, params.embed_dim))


def forward(params: EncoderParams, image) -> np.ndarray:
    """Embed one Pole-Image (or raw pixel array) into a unit vector."""
    pixels = getattr(image, "pixels", image)
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ShapeError(f"expected a 2D image, got shape {pixels.shape}")
    return _forward(params, _as_batch(params, pixels))[0][0]


def loss_and_grads(params: EncoderParams, images, embedding_loss) -> Tuple[float, Dict[str, np.ndarray], object]:
    """Run forward, apply ``embedding_loss(e) -> (loss, de, extra)``, backprop."""
    x = _as_batch(params, images)
    e, cache = _forward(params, x)
    loss, de, extra = embedding_loss(e)
    return loss, _backward(params, cache, de), extra


# --- losses ---------------------------------------------------------------

def _log_softmax_rows(logits: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def infonce_loss(anchors: np.ndarray, positives: np.ndarray, temperature: float = 0.07):
    """One-directional InfoNCE.

    Anchor i is scored against all B positives; positive i is its match
    and the other B - 1 are negatives. Inputs are assumed unit-norm, so
    dot products are cosine similarities.

    Returns ``(loss, d_anchors, d_positives)``.
    """
    a = np.asarray(anchors, dtype=np.float64)
    p = np.asarray(positives, dtype=np.float64)
    if a.shape != p.shape:
        raise ShapeError(f"anchor shape {a.shape} != positive shape {p.shape}")
    b = a.shape[0]
    if b < 2:
        raise InsufficientBatchError(f"InfoNCE needs a batch of at least 2 pairs, got {b}")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    logits = (a @ p.T) / temperature
    logp = _log_softmax_rows(logits)
    loss = -np.mean(np.diag(logp))
    dlogits = (np.exp(logp) - np.eye(b)) / b
    da = dlogits @ p / temperature
    dp = dlogits.T @ a / temperature
    return float(loss), da, dp


def nt_xent_loss(z1: np.ndarray, z2: np.ndarray, temperature: float = 0.07):
    """Symmetric SimCLR-style NT-Xent over 2B views.

    Each view's candidates are the other 2B - 1 views; its partner view
    is the positive. Returns ``(loss, d_z1, d_z2)``.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    b = z1.shape[0]
    if b < 2:
        raise InsufficientBatchError(f"NT-Xent needs a batch of at least 2 pairs, got {b}")
    z = np.concatenate([z1, z2], axis=0)
    n = 2 * b
    logits = (z @ z.T) / temperature
    logits[np.arange(n), np.arange(n)] = -np.inf
    logp = _log_softmax_rows(logits)
    target = np.concatenate([np.arange(b, n), np.arange(b)])
    loss = -np.mean(logp[np.arange(n), target])
    prob = np.exp(logp)
    dlog = prob.copy()
    dlog[np.arange(n), target] -= 1.0
    dlog /= n
    dz = (dlog + dlog.T) @ z / temperature
    return float(loss), dz[:b], dz[b:]


def cross_entropy_loss(logits: np.ndarray, labels: Sequence[int]):
    """Mean softmax cross-entropy. Returns ``(loss, d_logits)``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None]
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if c < 2:
        raise LabelError(f"cross-entropy needs at least 2 classes, got {c}")
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise LabelError("labels must be one integer per row")
    if labels.min() < 0 or labels.max() >= c:
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise LabelError(f"label {int(bad)} outside [0, {c})")
    logp = _log_softmax_rows(logits)
    loss = -np.mean(logp[np.arange(n), labels])
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


# --- optimiser ------------------------------------------------------------

class Adam:
    def __init__(self, tensors: Dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = tensors
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        """In-place update of every tensor that has a gradient."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.tensors[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- training -------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    objective: str = "cl"
    temperature: float = 0.07
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: Optional[int] = None  # 64 images for SL, 32 pairs for CL
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rng_seed: int = 0
    bidirectional: bool = False
    compute_dtype: str = "float32"

    def __post_init__(self):
        if self.objective not in ("cl", "sl"):
            raise ValueError(f"objective must be 'cl' or 'sl', got {self.objective!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.compute_dtype not in ("float32", "float64"):
            raise ValueError("compute_dtype must be float32 or float64")

    @property
    def effective_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 32 if self.objective == "cl" else 64


@dataclass(eq=False)
class TrainResult:
    params: EncoderParams
    loss_history: List[float]
    initial_params: EncoderParams = field(repr=False, default=None)


def train(images, labels, cfg: TrainConfig = TrainConfig(), params: Optional[EncoderParams] = None,
          log=None) -> TrainResult:
    """Train the encoder on labelled Pole-Images.

    ``images`` is (N, H, W), uint8 (0..255) or float in [0, 1]; ``labels``
    are track ids. Returns the trained parameters and one mean loss per
    epoch. Bit-reproducible for a fixed ``cfg.rng_seed``.

    Master weights and Adam state stay float64; forward and backward run
    in ``cfg.compute_dtype``. A contrastive epoch visits every track with
    at least two observations once; a supervised epoch visits every image
    once.
    """
    labels = np.asarray(labels)
    if len(labels) != len(images):
        raise DatasetError(f"{len(images)} images but {len(labels)} labels")
    if params is None:
        params = init_params(cfg.rng_seed, input_shape=np.asarray(images).shape[1:])
    initial = params.copy()
    params = params.copy()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 0x7A17]))
    if cfg.objective == "cl":
        history = _train_cl(params, images, labels, cfg, rng, log)
    else:
        history = _train_sl(params, images, labels, cfg, rng, log)
    return TrainResult(params, history, initial)


def _cl_batches(keys: np.ndarray, b: int, rng) -> List[np.ndarray]:
    """Shuffle tracks and cut them into batches of ``b``; a lone leftover
    track joins the previous batch."""
    perm = rng.permutation(keys)
    chunks = [perm[i : i + b] for i in range(0, len(perm), b)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def _train_cl(params, images, labels, cfg, rng, log):
    groups: Dict[int, np.ndarray] = {}
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        if len(idx) >= 2:
            groups[int(lab)] = idx
    if len(groups) < 2:
        raise DatasetError("contrastive training needs at least 2 tracks with >= 2 observations")
    keys = np.array(sorted(groups))
    b = min(cfg.effective_batch_size, len(keys))
    opt = Adam(params.tensors, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    loss_fn = nt_xent_loss if cfg.bidirectional else infonce_loss

    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for picked in _cl_batches(keys, b, rng):
            nb = len(picked)
            pairs = np.array([rng.choice(groups[int(k)], size=2, replace=False) for k in picked])
            batch = np.concatenate([images[pairs[:, 0]], images[pairs[:, 1]]])

            def emb_loss(e, nb=nb):
                loss, da, dp = loss_fn(e[:nb], e[nb:], cfg.temperature)
                return loss, np.concatenate([da, dp]).astype(e.dtype), None

            loss, grads, _ = loss_and_grads(params.astype(cfg.compute_dtype), batch, emb_loss)
            opt.step({k: g.astype(np.float64) for k, g in grads.items()})
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} cl loss {history[-1]:.4f}")
    return history


def _train_sl(params, images, labels, cfg, rng, log):
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DatasetError("supervised training needs at least 2 track classes")
    y = np.searchsorted(classes, labels)
    crng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 0xC1A5]))
    head = {
        "cls.w": he_uniform(crng, (len(classes), params.embed_dim), params.embed_dim),
        "cls.b": np.zeros(len(classes)),
    }
    tensors = dict(params.tensors)
    tensors.update(head)
    opt = Adam(tensors, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    bs = cfg.effective_batch_size
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        losses = []
        for s in range(0, len(order), bs):
            idx = order[s : s + bs]

            def emb_loss(e, idx=idx):
                e64 = e.astype(np.float64)
                logits = e64 @ head["cls.w"].T + head["cls.b"]
                loss, dlogits = cross_entropy_loss(logits, y[idx])
                return loss, (dlogits @ head["cls.w"]).astype(e.dtype), (dlogits, e64)

            loss, grads, (dlogits, e) = loss_and_grads(params.astype(cfg.compute_dtype), images[idx], emb_loss)
            grads = {k: g.astype(np.float64) for k, g in grads.items()}
            grads["cls.w"] = dlogits.T @ e
            grads["cls.b"] = dlogits.sum(axis=0)
            opt.step(grads)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} sl loss {history[-1]:.4f}")
    return history


# --- checkpoint and loss-history files ------------------------------------

_CKPT_MAGIC = b"SPLE 1"


def save_checkpoint(params: EncoderParams, path) -> None:
    """Write ``SPLE 1`` followed by named little-endian float64 tensors."""
    tensors = OrderedDict()
    tensors["meta.input_shape"] = np.array(params.input_shape, dtype=np.float64)
    tensors.update(params.tensors)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + f" {len(tensors)}\n".encode())
        for name, arr in tensors.items():
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {arr.ndim} {dims}\n".encode())
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> EncoderParams:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    pos = data.find(b"\n")
    head = data[:pos].split()
    if len(head) != 3 or b" ".join(head[:2]) != _CKPT_MAGIC:
        raise ValueError(f"{path}: not an SPLE v1 checkpoint")
    tensors = OrderedDict()
    pos += 1
    for _ in range(int(head[2])):
        end = data.find(b"\n", pos)
        tok = data[pos:end].decode().split()
        name, ndim = tok[0], int(tok[1])
        shape = tuple(int(t) for t in tok[2 : 2 + ndim])
        count = int(np.prod(shape)) if shape else 1
        pos = end + 1
        if pos + 8 * count > len(data):
            raise ValueError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    meta = tensors.pop("meta.input_shape")
    expected = param_shapes(tensors["head.b"].shape[0])
    for name, shape in expected.items():
        if name not in tensors or tensors[name].shape != shape:
            raise ValueError(f"{path}: tensor {name} missing or mis-shaped")
    return EncoderParams(tensors, tuple(int(v) for v in meta))


def write_loss_csv(history: Sequence[float], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(history, start=1):
            w.writerow([i, repr(float(v))])
