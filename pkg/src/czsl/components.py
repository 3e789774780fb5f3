"""Visual, context and prior scorers producing unnormalized log-scores.

Scorers only hold parameters. Class vectors (one row per vocabulary class)
are passed in so the same scorer can rank any candidate subset; every
batched scoring routine computes against the full vocabulary first and
selects columns afterwards, so a class's score never depends on which other
classes are candidates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .datamodel import ZslInstance
from .diffprims import (
    AffineParams,
    Mlp2Params,
    affine_backward,
    affine_forward,
    mlp2_backward,
    mlp2_forward,
)

MEMBER_KINDS = ("sh", "sl", "tl", "th")
CONTEXT_ALIASES = {
    "th-union": "sh+th",
    "all": "sh+sl+tl",
    "image": "i",
}


class OracleFlagError(PermissionError):
    """A context model reading target-domain labels was requested without the oracle flag."""


def parse_context_model(name: str, oracle: bool = False) -> frozenset[str]:
    """``"sh+tl"`` -> ``{"sh", "tl"}``; ``"i"`` selects the masked-image model."""
    key = CONTEXT_ALIASES.get(name.strip().lower(), name.strip().lower())
    key = key.replace("∪", "+").replace(",", "+").replace("_", "")
    parts = frozenset(p for p in key.split("+") if p)
    if parts == {"i"}:
        return parts
    if not parts or not parts <= set(MEMBER_KINDS):
        raise ValueError(f"unknown context model {name!r}")
    if "th" in parts and not oracle:
        raise OracleFlagError(f"context model {name!r} reads target labels; oracle flag required")
    return parts


def context_model_name(parts: frozenset[str]) -> str:
    order = ("sh", "sl", "tl", "th", "i")
    return "+".join(p for p in order if p in parts)


@dataclass
class ContextInputs:
    """Per-instance sufficient statistics for the mean aggregator.

    ``h = (hsum + lsum @ W_C^T + nl * b_C) / (nh + nl)`` (zero when empty).
    """

    hsum: np.ndarray
    lsum: np.ndarray
    nh: np.ndarray
    nl: np.ndarray
    masked: np.ndarray | None = None

    def __len__(self):
        return self.hsum.shape[0]

    def take(self, idx) -> "ContextInputs":
        return ContextInputs(
            self.hsum[idx],
            self.lsum[idx],
            self.nh[idx],
            self.nl[idx],
            None if self.masked is None else self.masked[idx],
        )


class ContextEncoder:
    """The averaging aggregator h over a chosen context model."""

    def __init__(self, model: frozenset[str], d: int, d_visual: int, rng=None, oracle: bool = False):
        if "th" in model and not oracle:
            raise OracleFlagError("T_H context members require the oracle flag")
        self.model = frozenset(model)
        self.oracle = oracle
        self.d = d
        self.d_visual = d_visual
        rng = rng if rng is not None else np.random.default_rng(0)
        self.ctx_proj = AffineParams.init(rng, d_visual, d) if self.model & {"sl", "tl"} else None
        self.masked_proj = AffineParams.init(rng, d_visual, d) if self.model == {"i"} else None

    @property
    def is_image(self) -> bool:
        return self.model == {"i"}

    def params(self) -> dict[str, AffineParams]:
        out = {}
        if self.ctx_proj is not None:
            out["ctx_proj"] = self.ctx_proj
        if self.masked_proj is not None:
            out["masked_proj"] = self.masked_proj
        return out

    def encode(self, instances: Sequence[ZslInstance], class_vectors: np.ndarray) -> ContextInputs:
        n = len(instances)
        hsum = np.zeros((n, self.d))
        lsum = np.zeros((n, self.d_visual))
        nh = np.zeros(n)
        nl = np.zeros(n)
        masked = np.zeros((n, self.d_visual)) if self.is_image else None
        for k, inst in enumerate(instances):
            if self.is_image:
                feat = inst.masked_scene_feature
                if feat is None:
                    raise ValueError(f"{inst.instance_id}: context model I needs a masked scene feature")
                masked[k] = feat
                continue
            labels = []
            if "sh" in self.model:
                labels += inst.context_source_labels()
            if "th" in self.model:
                labels += inst.oracle_target_context_labels()
            if labels:
                hsum[k] = class_vectors[labels].sum(axis=0)
                nh[k] = len(labels)
            feats = []
            if "sl" in self.model:
                feats += inst.context_source_features()
            if "tl" in self.model:
                feats += inst.context_target_features()
            if feats:
                lsum[k] = np.sum(feats, axis=0)
                nl[k] = len(feats)
        return ContextInputs(hsum, lsum, nh, nl, masked)

    def forward(self, inputs: ContextInputs) -> np.ndarray:
        if self.is_image:
            return affine_forward(self.masked_proj, inputs.masked)
        total = inputs.nh + inputs.nl
        acc = inputs.hsum.copy()
        if self.ctx_proj is not None:
            acc += inputs.lsum @ self.ctx_proj.W.T + inputs.nl[:, None] * self.ctx_proj.b
        denom = np.where(total > 0, total, 1.0)
        return acc / denom[:, None]

    def backward(self, inputs: ContextInputs, upstream: np.ndarray) -> None:
        if self.is_image:
            affine_backward(self.masked_proj, inputs.masked, upstream)
            return
        if self.ctx_proj is None:
            return
        total = inputs.nh + inputs.nl
        scale = np.where(total > 0, 1.0 / np.where(total > 0, total, 1.0), 0.0)
        up = upstream * scale[:, None]
        self.ctx_proj.gW += up.T @ inputs.lsum
        self.ctx_proj.gb += (up * inputs.nl[:, None]).sum(axis=0)


def _zero_grads(modules):
    for m in modules:
        m.zero_grad()


def _collect(prefix: str, named: dict) -> dict[str, np.ndarray]:
    out = {}
    for key, mod in named.items():
        for name, arr in mod.tensors().items():
            out[f"{prefix}.{key}.{name}"] = arr
    return out


def _collect_grads(prefix: str, named: dict) -> dict[str, np.ndarray]:
    out = {}
    for key, mod in named.items():
        for name, arr in mod.grads().items():
            out[f"{prefix}.{key}.{name}"] = arr
    return out


def _cosine_rows(p: np.ndarray):
    """Row-normalize; returns (normalized rows, norms, zero-norm mask)."""
    norms = np.linalg.norm(p, axis=-1)
    bad = norms == 0
    safe = np.where(bad, 1.0, norms)
    pn = p / safe[..., None]
    return pn, norms, bad


def _normalize_rows(W: np.ndarray) -> np.ndarray:
    return W / np.linalg.norm(W, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# visual
# ---------------------------------------------------------------------------


class VisualScorer:
    """cos(W_V x + b_V, w_i)."""

    prefix = "visual"

    def __init__(self, d_visual: int, d: int, rng=None, normalize: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.proj = AffineParams.init(rng, d_visual, d)
        self.normalize = normalize
        self.degenerate = 0

    def modules(self):
        return {"proj": self.proj}

    def tensors(self):
        return _collect(self.prefix, self.modules())

    def grads(self):
        return _collect_grads(self.prefix, self.modules())

    def zero_grad(self):
        _zero_grads(self.modules().values())

    def project(self, features) -> np.ndarray:
        return affine_forward(self.proj, features)

    def logscore(self, feature, w) -> float:
        return float(self.scores(np.asarray(feature)[None, :], np.asarray(w)[None, :])[0, 0])

    def scores(self, features, class_vectors) -> np.ndarray:
        """(n, m) scores of n features against m class vectors."""
        p = self.project(np.atleast_2d(features))
        if not self.normalize:
            return p @ np.asarray(class_vectors).T
        pn, _, bad = _cosine_rows(p)
        out = np.clip(pn @ _normalize_rows(np.asarray(class_vectors)).T, -1.0, 1.0)
        if bad.any():
            self.degenerate += int(bad.sum())
            out[bad] = -1.0
        return out

    def pair_scores(self, features, targets):
        """Scores of features[k] against targets[k, j]; returns (scores, cache)."""
        p = self.project(features)
        if not self.normalize:
            return np.einsum("nd,nkd->nk", p, targets), (features, p, None, None, targets)
        pn, norms, bad = _cosine_rows(p)
        tn = _normalize_rows(targets)
        s = np.einsum("nd,nkd->nk", pn, tn)
        return s, (features, p, pn, np.where(bad, 1.0, norms), tn)

    def pair_backward(self, cache, ds) -> None:
        features, p, pn, norms, tn = cache
        if pn is None:
            dp = np.einsum("nk,nkd->nd", ds, tn)
        else:
            dpn = np.einsum("nk,nkd->nd", ds, tn)
            dp = (dpn - (dpn * pn).sum(axis=1, keepdims=True) * pn) / norms[:, None]
        affine_backward(self.proj, features, dp)


# ---------------------------------------------------------------------------
# context
# ---------------------------------------------------------------------------


class ContextScorer:
    """f_C(C, w) = MLP([h(C); w]) with a scalar output."""

    prefix = "context"

    def __init__(
        self,
        model,
        d: int,
        d_visual: int,
        hidden: int | None = None,
        rng=None,
        oracle: bool = False,
        activation: str = "tanh",
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        if isinstance(model, str):
            model = parse_context_model(model, oracle)
        self.encoder = ContextEncoder(model, d, d_visual, rng, oracle)
        self.scorer = Mlp2Params.init(rng, 2 * d, hidden or d, 1, activation)
        self.d = d

    @property
    def model(self) -> frozenset[str]:
        return self.encoder.model

    def modules(self):
        out = dict(self.encoder.params())
        out["scorer"] = self.scorer
        return out

    def tensors(self):
        return _collect(self.prefix, self.modules())

    def grads(self):
        return _collect_grads(self.prefix, self.modules())

    def zero_grad(self):
        _zero_grads(self.modules().values())

    def encode(self, instances, class_vectors) -> ContextInputs:
        return self.encoder.encode(instances, class_vectors)

    def aggregate_context(self, instance: ZslInstance, class_vectors) -> np.ndarray:
        return self.encoder.forward(self.encode([instance], class_vectors))[0]

    def logscore(self, instance: ZslInstance, w, class_vectors) -> float:
        h = self.aggregate_context(instance, class_vectors)
        return float(mlp2_forward(self.scorer, np.concatenate([h, w]))[0])

    def scores(self, inputs: ContextInputs, class_vectors) -> np.ndarray:
        """(n, m) context log-scores for every instance x class pair."""
        if self.scorer.activation != "tanh":
            h = self.encoder.forward(inputs)
            n, m = h.shape[0], class_vectors.shape[0]
            pairs = np.concatenate(
                [np.repeat(h, m, axis=0), np.tile(class_vectors, (n, 1))], axis=1
            )
            return mlp2_forward(self.scorer, pairs).reshape(n, m)
        h = self.encoder.forward(inputs)
        W1 = self.scorer.layer1.W
        pre_ctx = h @ W1[:, : self.d].T + self.scorer.layer1.b
        pre_cls = np.asarray(class_vectors) @ W1[:, self.d :].T
        return _kernels.context_scores(pre_ctx, pre_cls, self.scorer.layer2.W[0], self.scorer.layer2.b[0])

    def pair_scores(self, inputs: ContextInputs, targets):
        """Scores of instance k against targets[k, j]; returns (scores, cache)."""
        h = self.encoder.forward(inputs)
        n, k, d = targets.shape
        x = np.concatenate([np.repeat(h[:, None, :], k, axis=1), targets], axis=2).reshape(n * k, 2 * d)
        y, cache = mlp2_forward(self.scorer, x, return_cache=True)
        return y.reshape(n, k), (inputs, cache, n, k)

    def pair_backward(self, cache, ds) -> None:
        inputs, mcache, n, k = cache
        dx = mlp2_backward(self.scorer, mcache, ds.reshape(n * k, 1))
        dh = dx[:, : self.d].reshape(n, k, self.d).sum(axis=1)
        self.encoder.backward(inputs, dh)


# ---------------------------------------------------------------------------
# prior
# ---------------------------------------------------------------------------


class PriorScorer:
    """f_P(w): scalar MLP over the class vector."""

    prefix = "prior"

    def __init__(self, d: int, hidden: int | None = None, rng=None, activation: str = "tanh"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.net = Mlp2Params.init(rng, d, hidden or d, 1, activation)

    def modules(self):
        return {"net": self.net}

    def tensors(self):
        return _collect(self.prefix, self.modules())

    def grads(self):
        return _collect_grads(self.prefix, self.modules())

    def zero_grad(self):
        _zero_grads(self.modules().values())

    def logscore(self, w) -> float:
        return float(mlp2_forward(self.net, w)[0])

    def scores(self, class_vectors) -> np.ndarray:
        return mlp2_forward(self.net, np.atleast_2d(class_vectors))[:, 0]

    def pair_scores(self, vectors):
        y, cache = mlp2_forward(self.net, vectors, return_cache=True)
        return y[:, 0], cache

    def pair_backward(self, cache, ds) -> None:
        mlp2_backward(self.net, cache, ds[:, None])


# ---------------------------------------------------------------------------
# joint baseline
# ---------------------------------------------------------------------------


class JointScorer:
    """cos(MLP([h(C); W x + b]), w): context and appearance modeled jointly."""

    prefix = "joint"

    def __init__(
        self,
        model,
        d: int,
        d_visual: int,
        hidden: int | None = None,
        rng=None,
        oracle: bool = False,
        activation: str = "tanh",
        strip_context: bool = False,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        if isinstance(model, str):
            model = parse_context_model(model, oracle)
        self.encoder = ContextEncoder(model, d, d_visual, rng, oracle)
        self.proj = AffineParams.init(rng, d_visual, d)
        self.fuse = Mlp2Params.init(rng, 2 * d, hidden or d, d, activation)
        self.d = d
        self.strip_context = strip_context
        self.degenerate = 0

    @property
    def model(self) -> frozenset[str]:
        return self.encoder.model

    def modules(self):
        out = dict(self.encoder.params())
        out["proj"] = self.proj
        out["fuse"] = self.fuse
        return out

    def tensors(self):
        return _collect(self.prefix, self.modules())

    def grads(self):
        return _collect_grads(self.prefix, self.modules())

    def zero_grad(self):
        _zero_grads(self.modules().values())

    def encode(self, instances, class_vectors) -> ContextInputs:
        return self.encoder.encode(instances, class_vectors)

    def _embed(self, inputs: ContextInputs, features):
        h = self.encoder.forward(inputs)
        if self.strip_context:
            h = np.zeros_like(h)
        v = affine_forward(self.proj, features)
        z, cache = mlp2_forward(self.fuse, np.concatenate([h, v], axis=1), return_cache=True)
        return z, (inputs, features, cache)

    def scores(self, inputs: ContextInputs, features, class_vectors) -> np.ndarray:
        z, _ = self._embed(inputs, np.atleast_2d(features))
        zn, _, bad = _cosine_rows(z)
        out = np.clip(zn @ _normalize_rows(np.asarray(class_vectors)).T, -1.0, 1.0)
        if bad.any():
            self.degenerate += int(bad.sum())
            out[bad] = -1.0
        return out

    def pair_scores(self, inputs: ContextInputs, features, targets):
        z, ecache = self._embed(inputs, features)
        zn, norms, bad = _cosine_rows(z)
        tn = _normalize_rows(targets)
        return np.einsum("nd,nkd->nk", zn, tn), (ecache, zn, np.where(bad, 1.0, norms), tn)

    def pair_backward(self, cache, ds) -> None:
        (inputs, features, mcache), zn, norms, tn = cache
        dzn = np.einsum("nk,nkd->nd", ds, tn)
        dz = (dzn - (dzn * zn).sum(axis=1, keepdims=True) * zn) / norms[:, None]
        dx = mlp2_backward(self.fuse, mcache, dz)
        affine_backward(self.proj, features, dx[:, self.d :])
        if not self.strip_context:
            self.encoder.backward(inputs, dx[:, : self.d])


# ---------------------------------------------------------------------------
# bundle and score tables
# ---------------------------------------------------------------------------


@dataclass
class Scorers:
    """Trained components plus the class-vector matrix they score against.

    When ``joint`` is set its score occupies the visual slot of each triple.
    """

    class_vectors: np.ndarray
    visual: VisualScorer | None = None
    context: ContextScorer | None = None
    prior: PriorScorer | None = None
    joint: JointScorer | None = None

    def __post_init__(self):
        if self.visual is not None and self.joint is not None:
            raise ValueError("visual and joint scorers are mutually exclusive")

    def members(self):
        return [m for m in (self.visual, self.context, self.prior, self.joint) if m is not None]

    @property
    def active(self) -> tuple[bool, bool, bool]:
        """(context, visual, prior) slots that carry a score."""
        return (
            self.context is not None,
            self.visual is not None or self.joint is not None,
            self.prior is not None,
        )

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.members():
            out.update(m.tensors())
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        own = self.tensors()
        for name, arr in own.items():
            if name not in tensors:
                raise KeyError(f"checkpoint lacks tensor {name!r}")
            if tensors[name].shape != arr.shape:
                raise ValueError(f"{name}: checkpoint shape {tensors[name].shape} != {arr.shape}")
            arr[...] = tensors[name]


@dataclass
class ScoreTable:
    """Per-instance, per-candidate component log-scores.

    Missing components are ``None``; :meth:`combined` treats them as zero.
    ``true_col[k]`` is the column of instance k's true class (-1 if absent).
    """

    instance_ids: list[str]
    candidates: np.ndarray
    true_col: np.ndarray
    labels: np.ndarray
    context: np.ndarray | None = None
    visual: np.ndarray | None = None
    prior: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.instance_ids)

    @property
    def active(self) -> tuple[bool, bool, bool]:
        return (self.context is not None, self.visual is not None, self.prior is not None)

    def combined(self, alpha) -> np.ndarray:
        a_c, a_v, a_p = (float(a) for a in alpha)
        out = np.zeros((len(self), len(self.candidates)))
        # a zero exponent removes the component even where its log-score is -inf
        if a_c and self.context is not None:
            out += a_c * self.context
        if a_v and self.visual is not None:
            out += a_v * self.visual
        if a_p and self.prior is not None:
            out += a_p * self.prior[None, :]
        return out

    def restrict(self, classes) -> "ScoreTable":
        """Keep only the columns of ``classes`` (a subset of the candidates)."""
        classes = np.asarray(classes)
        pos = {int(c): j for j, c in enumerate(self.candidates)}
        cols = np.array([pos[int(c)] for c in classes], dtype=np.int64)
        rowmap = {int(c): j for j, c in enumerate(classes)}
        true_col = np.array([rowmap.get(int(lab), -1) for lab in self.labels], dtype=np.int64)
        return ScoreTable(
            list(self.instance_ids),
            classes.copy(),
            true_col,
            self.labels.copy(),
            None if self.context is None else self.context[:, cols],
            None if self.visual is None else self.visual[:, cols],
            None if self.prior is None else self.prior[cols],
        )

    def take(self, rows) -> "ScoreTable":
        rows = np.asarray(rows, dtype=np.int64)
        return ScoreTable(
            [self.instance_ids[r] for r in rows],
            self.candidates,
            self.true_col[rows],
            self.labels[rows],
            None if self.context is None else self.context[rows],
            None if self.visual is None else self.visual[rows],
            self.prior,
        )


def score_table(scorers: Scorers, instances: Sequence[ZslInstance], candidates) -> ScoreTable:
    """Dense component scores for ``instances`` x ``candidates``.

    The context aggregate is computed once per instance and reused across all
    candidates.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ValueError("candidate set is empty")
    cv = scorers.class_vectors
    labels = np.array([inst.label for inst in instances], dtype=np.int64)
    col = {int(c): j for j, c in enumerate(candidates)}
    true_col = np.array([col.get(int(lab), -1) for lab in labels], dtype=np.int64)
    table = ScoreTable([inst.instance_id for inst in instances], candidates, true_col, labels)
    if not instances:
        return table
    features = np.stack([inst.focus_feature for inst in instances])
    if scorers.context is not None:
        inputs = scorers.context.encode(instances, cv)
        table.context = scorers.context.scores(inputs, cv)[:, candidates]
    if scorers.visual is not None:
        table.visual = scorers.visual.scores(features, cv)[:, candidates]
    if scorers.joint is not None:
        inputs = scorers.joint.encode(instances, cv)
        table.visual = scorers.joint.scores(inputs, features, cv)[:, candidates]
    if scorers.prior is not None:
        table.prior = scorers.prior.scores(cv)[candidates]
    return table


def score_all_classes(scorers: Scorers, instance: ZslInstance, candidates) -> dict[int, tuple[float, float, float]]:
    """Map each candidate class to its (context, visual, prior) log-scores."""
    t = score_table(scorers, [instance], candidates)
    out = {}
    for j, c in enumerate(t.candidates):
        out[int(c)] = (
            0.0 if t.context is None else float(t.context[0, j]),
            0.0 if t.visual is None else float(t.visual[0, j]),
            0.0 if t.prior is None else float(t.prior[j]),
        )
    return out
