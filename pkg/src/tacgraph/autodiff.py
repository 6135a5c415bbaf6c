"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

A Tape records one closure per primitive in forward order; backward replays
them in exact reverse order, accumulating gradients additively into each
Var's .grad. Inference uses a non-recording tape, which also disables
dropout. The primitive set is exactly what the network needs; everything is
2-D (rows of features), 1-D (per-row losses), or scalar.
"""
from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeMismatch(Exception):
    pass


class Var:
    """Value plus lazily allocated gradient buffer."""

    __slots__ = ("value", "grad", "requires")

    def __init__(self, value: np.ndarray, requires: bool = True):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires = requires

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Op recorder. record=False gives a free-running inference tape."""

    def __init__(self, training: bool = False, record: bool = True,
                 rng: Optional[np.random.Generator] = None):
        self.training = training
        self.record = record
        self.rng = rng
        self._ops: list[Callable[[], None]] = []

    def push(self, backward: Callable[[], None]) -> None:
        if self.record:
            self._ops.append(backward)

    def backward(self, loss: Var) -> None:
        if not self.record:
            raise RuntimeError("cannot backward a non-recording tape")
        if loss.value.shape != ():
            raise ShapeMismatch("backward expects a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for op in reversed(self._ops):
            op()
        self._ops.clear()


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


# --- primitives -----------------------------------------------------------------


def dense(t: Tape, w: Var, b: Var, x: Var) -> Var:
    _check(x.value.ndim == 2 and w.value.ndim == 2, "dense expects 2-D")
    _check(x.value.shape[1] == w.value.shape[0], "dense inner dim")
    _check(b.value.shape == (w.value.shape[1],), "dense bias dim")
    out = Var(x.value @ w.value + b.value)

    def back():
        g = out.grad
        if g is None:
            return
        if w.requires:
            w.ensure_grad()[...] += x.value.T @ g
        if b.requires:
            b.ensure_grad()[...] += g.sum(axis=0)
        if x.requires:
            x.ensure_grad()[...] += g @ w.value.T

    t.push(back)
    return out


def matmul_t(t: Tape, x: Var, table: Var) -> Var:
    """x @ table.T — logits of queries against embedding rows."""
    _check(x.value.shape[1] == table.value.shape[1], "matmul_t inner dim")
    out = Var(x.value @ table.value.T)

    def back():
        g = out.grad
        if g is None:
            return
        if x.requires:
            x.ensure_grad()[...] += g @ table.value
        if table.requires:
            table.ensure_grad()[...] += g.T @ x.value

    t.push(back)
    return out


def relu(t: Tape, x: Var) -> Var:
    out = Var(np.maximum(x.value, 0.0))

    def back():
        if out.grad is not None and x.requires:
            x.ensure_grad()[...] += out.grad * (x.value > 0)

    t.push(back)
    return out


def tanh(t: Tape, x: Var) -> Var:
    out = Var(np.tanh(x.value))

    def back():
        if out.grad is not None and x.requires:
            x.ensure_grad()[...] += out.grad * (1.0 - out.value ** 2)

    t.push(back)
    return out


def softplus(t: Tape, x: Var) -> Var:
    out = Var(np.logaddexp(0.0, x.value))

    def back():
        if out.grad is not None and x.requires:
            sig = 1.0 / (1.0 + np.exp(-x.value))
            x.ensure_grad()[...] += out.grad * sig

    t.push(back)
    return out


LN_EPS = 1e-5


def layernorm(t: Tape, x: Var, gamma: Var, beta: Var) -> Var:
    _check(x.value.ndim == 2, "layernorm expects 2-D")
    d = x.value.shape[1]
    _check(gamma.value.shape == (d,) and beta.value.shape == (d,),
           "layernorm affine dims")
    mu = x.value.mean(axis=1, keepdims=True)
    var = x.value.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x.value - mu) * inv
    out = Var(xhat * gamma.value + beta.value)

    def back():
        g = out.grad
        if g is None:
            return
        if gamma.requires:
            gamma.ensure_grad()[...] += (g * xhat).sum(axis=0)
        if beta.requires:
            beta.ensure_grad()[...] += g.sum(axis=0)
        if x.requires:
            gx_hat = g * gamma.value
            term1 = gx_hat
            term2 = gx_hat.mean(axis=1, keepdims=True)
            term3 = xhat * (gx_hat * xhat).mean(axis=1, keepdims=True)
            x.ensure_grad()[...] += inv * (term1 - term2 - term3)

    t.push(back)
    return out


def dropout(t: Tape, x: Var, p: float = 0.1) -> Var:
    if not t.training or p <= 0.0:
        return x
    if t.rng is None:
        raise RuntimeError("training tape needs an rng for dropout")
    mask = (t.rng.random(x.value.shape) >= p) / (1.0 - p)
    out = Var(x.value * mask)

    def back():
        if out.grad is not None and x.requires:
            x.ensure_grad()[...] += out.grad * mask

    t.push(back)
    return out


def add(t: Tape, a: Var, b: Var) -> Var:
    _check(a.value.shape == b.value.shape, "add shapes differ")
    out = Var(a.value + b.value)

    def back():
        if out.grad is None:
            return
        if a.requires:
            a.ensure_grad()[...] += out.grad
        if b.requires:
            b.ensure_grad()[...] += out.grad

    t.push(back)
    return out


def concat(t: Tape, xs: Sequence[Var], axis: int = 1) -> Var:
    out = Var(np.concatenate([x.value for x in xs], axis=axis))
    sizes = [x.value.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def back():
        g = out.grad
        if g is None:
            return
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if x.requires:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                x.ensure_grad()[...] += g[tuple(sl)]

    t.push(back)
    return out


def split(t: Tape, x: Var, sizes: Sequence[int], axis: int = 1) -> list[Var]:
    _check(sum(sizes) == x.value.shape[axis], "split sizes must cover axis")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        sl = [slice(None)] * x.value.ndim
        sl[axis] = slice(lo, hi)
        outs.append(Var(x.value[tuple(sl)].copy()))

    def back():
        if not x.requires:
            return
        gx = x.ensure_grad()
        for out, lo, hi in zip(outs, offsets[:-1], offsets[1:]):
            if out.grad is not None:
                sl = [slice(None)] * gx.ndim
                sl[axis] = slice(lo, hi)
                gx[tuple(sl)] += out.grad

    t.push(back)
    return outs


def gather(t: Tape, table: Var, ids: np.ndarray) -> Var:
    ids = np.asarray(ids, dtype=np.int64)
    out = Var(table.value[ids])

    def back():
        if out.grad is not None and table.requires:
            np.add.at(table.ensure_grad(), ids, out.grad)

    t.push(back)
    return out


def segment_sum(t: Tape, x: Var, seg: np.ndarray, num_segments: int) -> Var:
    _check(x.value.ndim == 2, "segment_sum expects 2-D")
    seg = np.asarray(seg, dtype=np.int64)
    acc = np.zeros((num_segments, x.value.shape[1]))
    np.add.at(acc, seg, x.value)
    out = Var(acc)

    def back():
        if out.grad is not None and x.requires:
            x.ensure_grad()[...] += out.grad[seg]

    t.push(back)
    return out


def scale_rows(t: Tape, x: Var, s: np.ndarray) -> Var:
    """Multiply each row by a constant scalar (shape (n,))."""
    s = np.asarray(s, dtype=np.float64)
    _check(s.shape == (x.value.shape[0],), "scale_rows scale shape")
    out = Var(x.value * s[:, None])

    def back():
        if out.grad is not None and x.requires:
            x.ensure_grad()[...] += out.grad * s[:, None]

    t.push(back)
    return out


def scale_by(t: Tape, x: Var, s: Var) -> Var:
    """Multiply a matrix by a learned scalar, shape (1, 1)."""
    _check(s.value.shape == (1, 1), "scale_by scalar shape")
    out = Var(x.value * s.value[0, 0])

    def back():
        g = out.grad
        if g is None:
            return
        if x.requires:
            x.ensure_grad()[...] += g * s.value[0, 0]
        if s.requires:
            s.ensure_grad()[...] += np.sum(g * x.value)

    t.push(back)
    return out


def mean_pool(t: Tape, x: Var) -> Var:
    """Mean over rows → (1, d)."""
    _check(x.value.ndim == 2 and x.value.shape[0] > 0, "mean_pool input")
    n = x.value.shape[0]
    out = Var(x.value.mean(axis=0, keepdims=True))

    def back():
        if out.grad is not None and x.requires:
            x.ensure_grad()[...] += out.grad / n

    t.push(back)
    return out


def unit_normalize(t: Tape, x: Var, eps: float = 1e-12) -> Var:
    """Row-wise x / max(‖x‖₂, eps)."""
    norms = np.maximum(np.linalg.norm(x.value, axis=-1, keepdims=True), eps)
    out = Var(x.value / norms)

    def back():
        g = out.grad
        if g is None or not x.requires:
            return
        dot = (g * out.value).sum(axis=-1, keepdims=True)
        x.ensure_grad()[...] += (g - out.value * dot) / norms

    t.push(back)
    return out


def cosine_loss(t: Tape, a: Var, b: Var) -> Var:
    """Per-row 1 − cos(aᵢ, bᵢ) → shape (n,)."""
    _check(a.value.shape == b.value.shape and a.value.ndim == 2,
           "cosine_loss shapes")
    na = np.maximum(np.linalg.norm(a.value, axis=1), 1e-12)
    nb = np.maximum(np.linalg.norm(b.value, axis=1), 1e-12)
    dot = (a.value * b.value).sum(axis=1)
    cos = dot / (na * nb)
    out = Var(1.0 - cos)

    def back():
        g = out.grad
        if g is None:
            return
        if a.requires:
            da = b.value / (na * nb)[:, None] - \
                a.value * (cos / na ** 2)[:, None]
            a.ensure_grad()[...] += -g[:, None] * da
        if b.requires:
            db = a.value / (na * nb)[:, None] - \
                b.value * (cos / nb ** 2)[:, None]
            b.ensure_grad()[...] += -g[:, None] * db

    t.push(back)
    return out


def log_softmax(t: Tape, x: Var) -> Var:
    _check(x.value.ndim == 2, "log_softmax expects 2-D")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = Var(shifted - lse)

    def back():
        g = out.grad
        if g is None or not x.requires:
            return
        p = np.exp(out.value)
        x.ensure_grad()[...] += g - p * g.sum(axis=1, keepdims=True)

    t.push(back)
    return out


def softmax_cross_entropy(t: Tape, logits: Var, targets: np.ndarray) -> Var:
    """Per-row −log softmax(logits)[target] → shape (n,)."""
    targets = np.asarray(targets, dtype=np.int64)
    _check(logits.value.ndim == 2 and targets.shape ==
           (logits.value.shape[0],), "softmax_cross_entropy shapes")
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(len(targets))
    out = Var(-logp[rows, targets])

    def back():
        g = out.grad
        if g is None or not logits.requires:
            return
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        logits.ensure_grad()[...] += p * g[:, None]

    t.push(back)
    return out


def sum_all(t: Tape, x: Var) -> Var:
    out = Var(np.asarray(x.value.sum()))

    def back():
        if out.grad is not None and x.requires:
            x.ensure_grad()[...] += out.grad

    t.push(back)
    return out


def mean_all(t: Tape, x: Var) -> Var:
    n = x.value.size
    _check(n > 0, "mean_all of empty tensor")
    out = Var(np.asarray(x.value.mean()))

    def back():
        if out.grad is not None and x.requires:
            x.ensure_grad()[...] += out.grad / n

    t.push(back)
    return out


def weighted_sum(t: Tape, xs: Sequence[Var], weights: Sequence[float]) -> Var:
    """Σ wᵢ·xᵢ over scalar Vars with constant weights."""
    _check(len(xs) == len(weights) and len(xs) > 0, "weighted_sum arity")
    for x in xs:
        _check(x.value.shape == (), "weighted_sum expects scalars")
    out = Var(np.asarray(sum(w * x.value for x, w in zip(xs, weights))))

    def back():
        if out.grad is None:
            return
        for x, w in zip(xs, weights):
            if x.requires:
                x.ensure_grad()[...] += w * out.grad

    t.push(back)
    return out


# --- verification ---------------------------------------------------------------


def grad_check(f: Callable[[], tuple[Var, Tape]], params: Sequence[Var],
               eps: float = 1e-5, max_coords: int = 40,
               rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between tape gradients and central differences.

    f builds the computation from scratch and returns (scalar loss, tape).
    Checks up to max_coords randomly chosen coordinates per parameter.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss, tape = f()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = f()[0].value
            flat[c] = orig - eps
            down = f()[0].value
            flat[c] = orig
            fd = (up - down) / (2 * eps)
            an = g.reshape(-1)[c]
            err = abs(an - fd) / max(1.0, abs(fd))
            worst = max(worst, float(err))
    for p in params:
        p.zero_grad()
    return worst


# --- optimizer ------------------------------------------------------------------


class Adam:
    """Adam with L2 penalty added to gradients before the moment updates."""

    def __init__(self, params: dict[str, Var], lr: float = 3e-4,
                 l2: float = 1e-5, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.l2 = lr, l2
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.value) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.value) for k, v in params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if self.l2:
                g = g + self.l2 * p.value
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.value -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"adam/t": np.array([self.t], dtype=np.int64)}
        for k in self.params:
            out[f"adam/m/{k}"] = self.m[k]
            out[f"adam/v/{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(tensors["adam/t"][0])
        for k in self.params:
            self.m[k] = tensors[f"adam/m/{k}"].astype(np.float64)
            self.v[k] = tensors[f"adam/v/{k}"].astype(np.float64)


# --- checkpoint container -------------------------------------------------------

_MAGIC = b"TGCK"
_VERSION = 1
_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4"),
           "<i8": np.dtype("<i8"), "<i4": np.dtype("<i4"),
           "<u8": np.dtype("<u8"), "|u1": np.dtype("|u1")}


def save_tensors(path: str, tensors: dict[str, np.ndarray],
                 meta: Optional[dict] = None) -> None:
    """Versioned binary container: magic, version, JSON index, raw LE data."""
    index = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        dt = arr.dtype.newbyteorder("<")
        key = dt.str
        if key not in _DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        index.append({"name": name, "dtype": key, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = json.dumps({"tensors": index, "meta": meta or {}},
                      sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a checkpoint file")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        head = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    tensors = {}
    for entry in head["tensors"]:
        dt = _DTYPES[entry["dtype"]]
        raw = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
    return tensors, head["meta"]
