"""Affine maps and two-layer perceptrons with hand-written gradients.

All forward functions accept a single vector ``(in,)`` or a batch ``(n, in)``.
Backward passes accumulate parameter gradients in place; callers zero them.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

CHECKPOINT_MAGIC = b"CZPM1"

ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "sigmoid": (
        lambda z: 1.0 / (1.0 + np.exp(-z)),
        lambda z, a: a * (1.0 - a),
    ),
    "softplus": (lambda z: np.logaddexp(0.0, z), lambda z, a: 1.0 / (1.0 + np.exp(-z))),
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
}


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


@dataclass
class AffineParams:
    W: np.ndarray
    b: np.ndarray
    gW: np.ndarray = field(init=False, repr=False)
    gb: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent affine shapes W{self.W.shape} b{self.b.shape}")
        self.gW = np.zeros_like(self.W)
        self.gb = np.zeros_like(self.b)

    @classmethod
    def init(cls, rng, n_in: int, n_out: int) -> "AffineParams":
        return cls(glorot(rng, n_out, n_in), np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def grads(self) -> dict[str, np.ndarray]:
        return {"W": self.gW, "b": self.gb}

    def zero_grad(self):
        self.gW[...] = 0.0
        self.gb[...] = 0.0


def affine_forward(p: AffineParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.n_in:
        raise ValueError(f"input dimension {x.shape[-1]} != {p.n_in}")
    return x @ p.W.T + p.b


def affine_backward(p: AffineParams, x, upstream) -> np.ndarray:
    """Accumulate dW = up^T x, db = sum(up); return up @ W."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape[-1] != p.n_out:
        raise ValueError(f"upstream dimension {upstream.shape[-1]} != {p.n_out}")
    x2 = x.reshape(-1, p.n_in)
    up2 = upstream.reshape(-1, p.n_out)
    p.gW += up2.T @ x2
    p.gb += up2.sum(axis=0)
    return upstream @ p.W


@dataclass
class Mlp2Params:
    layer1: AffineParams
    layer2: AffineParams
    activation: str = "tanh"

    def __post_init__(self):
        if self.layer1.n_out != self.layer2.n_in:
            raise ValueError("hidden widths of the two layers differ")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, rng, n_in: int, hidden: int, n_out: int, activation: str = "tanh") -> "Mlp2Params":
        return cls(AffineParams.init(rng, n_in, hidden), AffineParams.init(rng, hidden, n_out), activation)

    @property
    def n_in(self) -> int:
        return self.layer1.n_in

    @property
    def n_out(self) -> int:
        return self.layer2.n_out

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"layer1.{k}": v for k, v in self.layer1.tensors().items()}
        out.update({f"layer2.{k}": v for k, v in self.layer2.tensors().items()})
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {f"layer1.{k}": v for k, v in self.layer1.grads().items()}
        out.update({f"layer2.{k}": v for k, v in self.layer2.grads().items()})
        return out

    def zero_grad(self):
        self.layer1.zero_grad()
        self.layer2.zero_grad()


@dataclass
class Mlp2Cache:
    x: np.ndarray
    z: np.ndarray
    a: np.ndarray


def mlp2_forward(p: Mlp2Params, x, return_cache: bool = False):
    act, _ = ACTIVATIONS[p.activation]
    x = np.asarray(x, dtype=np.float64)
    z = affine_forward(p.layer1, x)
    a = act(z)
    y = affine_forward(p.layer2, a)
    if return_cache:
        return y, Mlp2Cache(x, z, a)
    return y


def mlp2_backward(p: Mlp2Params, cache: Mlp2Cache, upstream) -> np.ndarray:
    _, dact = ACTIVATIONS[p.activation]
    da = affine_backward(p.layer2, cache.a, upstream)
    dz = da * dact(cache.z, cache.a)
    return affine_backward(p.layer1, cache.x, dz)


def hinge(margin: float, s_pos, s_neg):
    """``max(0, margin - s_pos + s_neg)`` and its subgradients w.r.t. (s_pos, s_neg).

    At the kink (argument exactly 0) the inactive branch is used.
    """
    if np.any(np.asarray(margin) < 0):
        raise ValueError("margin must be nonnegative")
    arg = margin - np.asarray(s_pos, dtype=np.float64) + np.asarray(s_neg, dtype=np.float64)
    active = (arg > 0).astype(np.float64)
    value = arg * active
    if np.ndim(value) == 0:
        return float(value), -float(active), float(active)
    return value, -active, active


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float
    skipped: bool = False
    reason: str = ""

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.skipped and self.max_error < self.tol


def grad_check(
    f: Callable[[], float],
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
    kink_distance: Callable[[], float] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic ``grads`` against central differences of ``f``.

    ``params`` are perturbed in place and restored. ``grads`` must already
    hold the analytic gradient at the current point. Relative error per
    entry is ``|a - n| / max(|a|, |n|, floor)``; the report keeps the max
    per tensor. When ``kink_distance`` reports a hinge argument closer than
    ``2 * eps`` to zero, the probe is skipped and flagged.
    """
    if kink_distance is not None:
        dist = kink_distance()
        if dist <= 2 * eps:
            return GradCheckReport({}, tol, skipped=True, reason=f"hinge kink within {dist:.3g}")
    errors = {}
    for name, value in params.items():
        analytic = grads[name]
        numeric = np.zeros_like(value)
        it = np.nditer(value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = value[idx]
            value[idx] = old + eps
            fp = f()
            value[idx] = old - eps
            fm = f()
            value[idx] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective while probing {name}{idx}")
            numeric[idx] = (fp - fm) / (2 * eps)
        if not np.all(np.isfinite(analytic)):
            raise FloatingPointError(f"non-finite analytic gradient for {name}")
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        errors[name] = float(np.max(np.abs(analytic - numeric) / denom)) if value.size else 0.0
    return GradCheckReport(errors, tol)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """``CZPM1`` + u32 count, then per tensor: u32 name length, utf-8 name,
    u32 rank, u32 dims, little-endian f32 payload. Tensors are written in
    sorted name order."""
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a CZPM1 checkpoint")
    (count,) = struct.unpack_from("<I", raw, 5)
    pos = 9
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        out[name] = arr.astype(np.float64)
    return out
