"""Negative sampling, max-margin ranking objectives and the training loop.

Each component is trained on its own objective with its own optimizer
state and random stream; no gradient ever crosses component boundaries.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .components import (
    ContextScorer,
    JointScorer,
    PriorScorer,
    Scorers,
    VisualScorer,
    parse_context_model,
)
from .datamodel import SceneDataset, make_instances

log = logging.getLogger(__name__)

COMPONENTS = ("prior", "visual", "context", "joint")
_COMPONENT_STREAM = {name: k for k, name in enumerate(COMPONENTS)}


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; ``tensors`` holds the last finite parameters."""

    def __init__(self, component: str, epoch: int, tensors: dict[str, np.ndarray]):
        super().__init__(f"{component} loss became non-finite in epoch {epoch}")
        self.component = component
        self.epoch = epoch
        self.tensors = tensors


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass
class EmpiricalPrior:
    """P*(i) over source classes seen in the training split."""

    classes: np.ndarray
    probs: np.ndarray
    uniform_classes: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.uniform_classes = np.asarray(self.uniform_classes, dtype=np.int64)
        if abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("prior probabilities must sum to 1")
        self.cdf = np.cumsum(self.probs)
        self.cdf[-1] = 1.0

    @classmethod
    def from_counts(cls, counts, uniform_classes=None) -> "EmpiricalPrior":
        """``counts`` maps class index -> count (dict or dense array)."""
        if not isinstance(counts, dict):
            counts = {i: int(c) for i, c in enumerate(np.asarray(counts)) if c > 0}
        classes = np.array(sorted(c for c, n in counts.items() if n > 0), dtype=np.int64)
        if classes.size == 0:
            raise ValueError("no class has a positive count")
        n = np.array([counts[c] for c in classes], dtype=np.float64)
        if uniform_classes is None:
            uniform_classes = classes
        return cls(classes, n / n.sum(), np.asarray(uniform_classes))

    @classmethod
    def from_dataset(cls, dataset: SceneDataset, partition: str = "train") -> "EmpiricalPrior":
        counts: dict[int, int] = {}
        mask = dataset.vocab.source_mask
        for scene in dataset.split_scenes(partition):
            for obj in scene.objects:
                if mask[obj.class_idx]:
                    counts[obj.class_idx] = counts.get(obj.class_idx, 0) + 1
        return cls.from_counts(counts, dataset.vocab.source)

    def as_dict(self) -> dict[int, float]:
        return {int(c): float(p) for c, p in zip(self.classes, self.probs)}


def _draw(dist: str, prior: EmpiricalPrior, size, rng) -> np.ndarray:
    if dist == "empirical":
        idx = np.searchsorted(prior.cdf, rng.random(size), side="right")
        return prior.classes[np.minimum(idx, len(prior.classes) - 1)]
    if dist == "uniform":
        return prior.uniform_classes[rng.integers(0, len(prior.uniform_classes), size=size)]
    raise ValueError(f"unknown negative distribution {dist!r}")


def sample_negative_batch(dist: str, prior: EmpiricalPrior, positives, k: int, rng) -> np.ndarray:
    """(n, k) negatives for n positives; draws equal to their positive are redrawn."""
    positives = np.asarray(positives, dtype=np.int64)
    support = prior.classes if dist == "empirical" else prior.uniform_classes
    if len(support) < 2:
        raise ValueError("negative sampling needs at least two classes in the support")
    if k < 1:
        raise ValueError("k must be >= 1")
    out = _draw(dist, prior, (len(positives), k), rng)
    clash = out == positives[:, None]
    while clash.any():
        out[clash] = _draw(dist, prior, int(clash.sum()), rng)
        clash = out == positives[:, None]
    return out


def sample_negatives(dist: str, prior: EmpiricalPrior, positive: int, k: int, rng) -> np.ndarray:
    return sample_negative_batch(dist, prior, [positive], k, rng)[0]


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------


def _pair_hinge(scores: np.ndarray, margin: float, stats: dict | None):
    """Mean hinge over (positive, negative) columns of ``scores[:, 0 | 1:]``.

    Returns the loss and d loss / d scores.
    """
    n, kp1 = scores.shape
    k = kp1 - 1
    arg = margin - scores[:, :1] + scores[:, 1:]
    active = (arg > 0).astype(np.float64)
    loss = float((arg * active).sum() / (n * k))
    ds = np.empty_like(scores)
    ds[:, 1:] = active / (n * k)
    ds[:, 0] = -active.sum(axis=1) / (n * k)
    if stats is not None:
        stats["kink_distance"] = float(np.abs(arg).min())
        stats["active_fraction"] = float(active.mean())
    return loss, ds


def _targets(class_vectors, positives, negatives) -> np.ndarray:
    idx = np.concatenate([np.asarray(positives)[:, None], np.asarray(negatives)], axis=1)
    return class_vectors[idx]


def loss_prior(scorer: PriorScorer, class_vectors, positives, negatives, margin: float, stats=None, backward: bool = True) -> float:
    """mean max(0, margin - f_P(w_i) + f_P(w_j)); grads accumulate into the prior net.

    Every objective takes ``backward=False`` to evaluate the loss without touching gradients.
    """
    t = _targets(class_vectors, positives, negatives)
    n, kp1, d = t.shape
    s, cache = scorer.pair_scores(t.reshape(n * kp1, d))
    loss, ds = _pair_hinge(s.reshape(n, kp1), margin, stats)
    if backward:
        scorer.pair_backward(cache, ds.reshape(-1))
    return loss


def loss_visual(scorer: VisualScorer, class_vectors, features, positives, negatives, margin: float, stats=None, backward: bool = True) -> float:
    s, cache = scorer.pair_scores(np.asarray(features), _targets(class_vectors, positives, negatives))
    loss, ds = _pair_hinge(s, margin, stats)
    if backward:
        scorer.pair_backward(cache, ds)
    return loss


def loss_context(scorer: ContextScorer, class_vectors, inputs, positives, negatives, margin: float, stats=None, backward: bool = True) -> float:
    s, cache = scorer.pair_scores(inputs, _targets(class_vectors, positives, negatives))
    loss, ds = _pair_hinge(s, margin, stats)
    if backward:
        scorer.pair_backward(cache, ds)
    return loss


def loss_joint(scorer: JointScorer, class_vectors, inputs, features, positives, negatives, margin: float, stats=None, backward: bool = True) -> float:
    s, cache = scorer.pair_scores(inputs, np.asarray(features), _targets(class_vectors, positives, negatives))
    loss, ds = _pair_hinge(s, margin, stats)
    if backward:
        scorer.pair_backward(cache, ds)
    return loss


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    margin_prior: float = 0.1
    margin_visual: float = 0.1
    margin_context: float = 0.1
    negatives_per_positive: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2_weight: float = 1e-5
    epochs: int = 20
    batch_size: int = 256
    seed: int = 0
    devise_mode: bool = False
    hidden: int = 0
    activation: str = "tanh"
    context_model: str = "sh"
    oracle: bool = False
    normalize_visual: bool = True

    def __post_init__(self):
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")
        if min(self.margin_prior, self.margin_visual, self.margin_context) < 0:
            raise ValueError("margins must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def replace(self, **changes) -> "TrainConfig":
        data = asdict(self)
        data.update(changes)
        return TrainConfig(**data)

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in pairs.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise KeyError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(types[key], raw)
        return cls(**kwargs)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(self).items())


def _coerce(type_name, raw):
    raw = str(raw).strip()
    if type_name in (bool, "bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name in (int, "int"):
        return int(raw)
    if type_name in (float, "float"):
        return float(raw)
    return raw


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# ---------------------------------------------------------------------------
# model construction and the loop
# ---------------------------------------------------------------------------


def component_rng(seed: int, component: str, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, _COMPONENT_STREAM[component], purpose])


def build_scorers(components: Sequence[str], class_vectors, d_visual: int, config: TrainConfig) -> Scorers:
    """Freshly initialized scorers; each draws from its own seeded stream."""
    components = list(components)
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown components {sorted(unknown)}")
    if "visual" in components and "joint" in components:
        raise ValueError("visual and joint components are mutually exclusive")
    d = class_vectors.shape[1]
    hidden = config.hidden or d
    out = Scorers(np.asarray(class_vectors, dtype=np.float64))
    if "prior" in components:
        out.prior = PriorScorer(d, hidden, component_rng(config.seed, "prior", 0), config.activation)
    if "visual" in components:
        out.visual = VisualScorer(d_visual, d, component_rng(config.seed, "visual", 0), config.normalize_visual)
    if "context" in components:
        model = parse_context_model(config.context_model, config.oracle)
        out.context = ContextScorer(
            model, d, d_visual, hidden, component_rng(config.seed, "context", 0), config.oracle, config.activation
        )
    if "joint" in components:
        model = parse_context_model(config.context_model, config.oracle)
        out.joint = JointScorer(
            model, d, d_visual, hidden, component_rng(config.seed, "joint", 0), config.oracle, config.activation
        )
    return out


@dataclass
class TrainResult:
    scorers: Scorers
    curves: list[tuple[int, str, float]]

    def curve(self, component: str) -> list[float]:
        return [loss for _, c, loss in self.curves if c == component]

    def write_csv(self, path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            fh.write("epoch,component,loss\n")
            for epoch, comp, loss in self.curves:
                fh.write(f"{epoch},{comp},{loss!r}\n")


def _snapshot(module) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in module.tensors().items()}


def _restore(module, snap) -> None:
    for k, v in module.tensors().items():
        v[...] = snap[k]


def _fit(name, module, n_items, step_fn, config: TrainConfig, curves):
    rng = component_rng(config.seed, name, 1)
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    params = module.tensors()
    for epoch in range(1, config.epochs + 1):
        good = _snapshot(module)
        order = rng.permutation(n_items)
        total = 0.0
        for start in range(0, n_items, config.batch_size):
            idx = order[start : start + config.batch_size]
            module.zero_grad()
            loss = step_fn(idx, rng)
            grads = module.grads()
            # the recorded curve is the ranking loss; the L2 term only enters the gradient
            if config.l2_weight:
                for key, p in params.items():
                    grads[key] += 2.0 * config.l2_weight * p
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                _restore(module, good)
                raise TrainingDiverged(name, epoch, good)
            opt.step(params, grads)
            total += loss * len(idx)
        mean = total / max(n_items, 1)
        curves.append((epoch, name, mean))
        log.debug("epoch %d %s loss %.6f", epoch, name, mean)


def train(
    components: Sequence[str],
    dataset: SceneDataset,
    class_vectors,
    config: TrainConfig,
    scorers: Scorers | None = None,
) -> TrainResult:
    """Optimize each selected component on its own ranking objective.

    Positives come from source-domain objects of the training split. Prior
    negatives are uniform over source classes; visual/context/joint
    negatives follow P* unless ``devise_mode`` (then uniform).
    """
    components = [c for c in COMPONENTS if c in set(components)]
    if config.devise_mode and "prior" in components:
        raise ValueError("DeViSE mode does not learn a prior component")
    class_vectors = np.asarray(class_vectors, dtype=np.float64)
    if scorers is None:
        scorers = build_scorers(components, class_vectors, dataset.d_visual, config)
    prior = EmpiricalPrior.from_dataset(dataset, "train")
    k = config.negatives_per_positive
    curves: list[tuple[int, str, float]] = []
    vis_dist = "uniform" if config.devise_mode else "empirical"

    if "prior" in components:
        mask = dataset.vocab.source_mask
        pos = np.array(
            [o.class_idx for s in dataset.split_scenes("train") for o in s.objects if mask[o.class_idx]],
            dtype=np.int64,
        )

        def prior_step(idx, rng):
            neg = sample_negative_batch("uniform", prior, pos[idx], k, rng)
            return loss_prior(scorers.prior, class_vectors, pos[idx], neg, config.margin_prior)

        _fit("prior", scorers.prior, len(pos), prior_step, config, curves)

    need_instances = {"visual", "context", "joint"} & set(components)
    if need_instances:
        instances = make_instances(dataset, "train", "source")
        labels = np.array([inst.label for inst in instances], dtype=np.int64)
        feats = np.stack([inst.focus_feature for inst in instances]) if instances else np.zeros((0, dataset.d_visual))

    if "visual" in components:

        def visual_step(idx, rng):
            neg = sample_negative_batch(vis_dist, prior, labels[idx], k, rng)
            return loss_visual(scorers.visual, class_vectors, feats[idx], labels[idx], neg, config.margin_visual)

        _fit("visual", scorers.visual, len(instances), visual_step, config, curves)

    if "context" in components:
        inputs = scorers.context.encode(instances, class_vectors)

        def context_step(idx, rng):
            neg = sample_negative_batch("empirical", prior, labels[idx], k, rng)
            return loss_context(
                scorers.context, class_vectors, inputs.take(idx), labels[idx], neg, config.margin_context
            )

        _fit("context", scorers.context, len(instances), context_step, config, curves)

    if "joint" in components:
        jinputs = scorers.joint.encode(instances, class_vectors)

        def joint_step(idx, rng):
            neg = sample_negative_batch(vis_dist, prior, labels[idx], k, rng)
            return loss_joint(
                scorers.joint, class_vectors, jinputs.take(idx), feats[idx], labels[idx], neg, config.margin_visual
            )

        _fit("joint", scorers.joint, len(instances), joint_step, config, curves)

    return TrainResult(scorers, curves)
