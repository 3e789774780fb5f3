"""Seeded synthetic scene worlds with known priors and theme structure.

Each class has a visual latent (what its region features look like) and a
semantic latent (visual latent plus a vector for its home theme and a
shift along a shared axis proportional to its standardized log-prior). Region
features are a fixed linear image of the visual latent; label embeddings
are noisy copies of the semantic latent. Scenes draw a theme, then objects
i.i.d. from that theme's class distribution, so the marginal class
distribution is exactly the configured Zipf prior. Which class gets which
Zipf rank is shuffled so class indices carry no frequency information.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from math import exp, lgamma, log
from pathlib import Path
from typing import Sequence

import numpy as np

from .datamodel import ClassVocab, ObjectInstance, Scene, SceneDataset, split_domains, split_images
from .embeddings import EmbeddingTable
from .oracles import CooccurrenceTable


@dataclass
class WorldSpec:
    n_classes: int = 50
    zipf_exponent: float = 1.1
    d: int = 16
    d_visual: int = 24
    n_themes: int = 4
    theme_concentration: float = 8.0
    visual_noise_sigma: float = 0.1
    embedding_noise_sigma: float = 0.05
    objects_per_scene_mean: float = 5.0
    n_scenes: int = 2000
    seed: int = 0
    theme_strength: float = 0.0
    frequency_strength: float = 0.0
    max_objects: int = 0
    ambiguity_pairs: list[tuple[int, int]] = field(default_factory=list)

    def validate(self) -> None:
        ints = ("n_classes", "d", "d_visual", "n_themes", "n_scenes")
        for name in ints:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_themes > self.n_classes:
            raise ValueError("n_themes must not exceed n_classes")
        for name in ("zipf_exponent", "theme_concentration", "visual_noise_sigma", "embedding_noise_sigma", "theme_strength",
                     "frequency_strength"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.objects_per_scene_mean < 2:
            raise ValueError("objects_per_scene_mean must be >= 2")
        if self.max_objects and self.max_objects < 2:
            raise ValueError("max_objects must be 0 (unbounded) or >= 2")


@dataclass
class WorldTruth:
    labels: list[str]
    prior: np.ndarray
    theme_prior: np.ndarray
    theme_class: np.ndarray
    home_theme: np.ndarray
    visual_latent: np.ndarray
    semantic_latent: np.ndarray
    theme_vectors: np.ndarray
    generator: np.ndarray
    k_values: np.ndarray
    k_probs: np.ndarray
    ambiguity_pairs: list[tuple[int, int]]

    def to_json(self) -> dict:
        out = {}
        for key, value in asdict(self).items():
            out[key] = value.tolist() if isinstance(value, np.ndarray) else value
        out["ambiguity_pairs"] = [list(p) for p in self.ambiguity_pairs]
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "WorldTruth":
        kw = dict(doc)
        for key in ("prior", "theme_prior", "theme_class", "visual_latent", "semantic_latent",
                    "theme_vectors", "generator", "k_probs"):
            kw[key] = np.asarray(kw[key], dtype=np.float64)
        kw["home_theme"] = np.asarray(kw["home_theme"], dtype=np.int64)
        kw["k_values"] = np.asarray(kw["k_values"], dtype=np.int64)
        kw["ambiguity_pairs"] = [tuple(p) for p in kw["ambiguity_pairs"]]
        return cls(**kw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "WorldTruth":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def zipf_prior(n: int, s: float) -> np.ndarray:
    p = np.arange(1, n + 1, dtype=np.float64) ** (-s)
    return p / p.sum()


def object_count_pmf(mean: float, max_objects: int = 0, tail: float = 1e-15):
    """K = 2 + Poisson(mean - 2), clipped at ``max_objects`` when set."""
    lam = mean - 2.0
    ks, ps = [], []
    k = 0
    while True:
        p = exp(-lam + k * log(lam) - lgamma(k + 1)) if lam > 0 else float(k == 0)
        total = 2 + k
        if max_objects and total >= max_objects:
            ks.append(max_objects)
            ps.append(max(0.0, 1.0 - sum(ps)))
            break
        ks.append(total)
        ps.append(p)
        if sum(ps) > 1.0 - tail and k > lam:
            break
        k += 1
    ps = np.array(ps)
    return np.array(ks, dtype=np.int64), ps / ps.sum()


def _round9(x: np.ndarray) -> np.ndarray:
    # embeddings are written with 9 significant digits; keep memory and disk identical
    return np.vectorize(lambda v: float(f"{v:.9g}"))(x) if x.size else x


def _labels(n: int) -> list[str]:
    width = max(3, len(str(n - 1)))
    return [f"c{i:0{width}d}" for i in range(n)]


def class_structure(spec: WorldSpec):
    """Per-class prior (Zipf over a shuffled frequency ranking) and home theme."""
    rng = np.random.default_rng([spec.seed, 0])
    prior = zipf_prior(spec.n_classes, spec.zipf_exponent)[rng.permutation(spec.n_classes)]
    home = rng.permutation(spec.n_classes) % spec.n_themes
    return prior, home


def generate(spec: WorldSpec):
    """Return ``(dataset, embeddings, truth)``. All classes start in the source domain."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 1])
    n, T, d, dv = spec.n_classes, spec.n_themes, spec.d, spec.d_visual
    labels = _labels(n)
    prior, home = class_structure(spec)
    member = 1.0 + spec.theme_concentration * (home[:, None] == np.arange(T)[None, :])
    theme_given_class = member / member.sum(axis=1, keepdims=True)
    joint = prior[:, None] * theme_given_class
    theme_prior = joint.sum(axis=0)
    theme_class = (joint / theme_prior[None, :]).T

    visual_latent = rng.normal(size=(n, d)) / np.sqrt(d)
    theme_vectors = rng.normal(size=(T, d)) / np.sqrt(d)
    generator = rng.normal(size=(dv, d)) / np.sqrt(d)
    emb_noise = rng.normal(size=(n, d))
    freq_axis = rng.normal(size=d)
    freq_axis /= np.linalg.norm(freq_axis)

    pairs = [tuple(int(x) for x in p) for p in spec.ambiguity_pairs]
    for a, b in pairs:
        if home[a] == home[b]:
            raise ValueError(f"ambiguity pair ({a}, {b}) shares home theme {home[a]}")
        visual_latent[b] = visual_latent[a]

    log_prior = np.log(prior)
    spread = log_prior.std()
    freq = (log_prior - log_prior.mean()) / spread if spread > 0 else np.zeros(n)
    semantic_latent = (
        visual_latent
        + spec.theme_strength * theme_vectors[home]
        + spec.frequency_strength * freq[:, None] * freq_axis[None, :]
    )
    vectors = _round9(semantic_latent + spec.embedding_noise_sigma * emb_noise)
    embeddings = EmbeddingTable(d, {lab: vectors[i].copy() for i, lab in enumerate(labels)})

    k_values, k_probs = object_count_pmf(spec.objects_per_scene_mean, spec.max_objects)
    lam = spec.objects_per_scene_mean - 2.0
    clean = visual_latent @ generator.T

    scenes = []
    counts = np.zeros(n, dtype=np.int64)
    width = len(str(max(spec.n_scenes - 1, 1)))
    for s in range(spec.n_scenes):
        t = rng.choice(T, p=theme_prior)
        k = 2 + int(rng.poisson(lam)) if lam > 0 else 2
        if spec.max_objects:
            k = min(k, spec.max_objects)
        classes = rng.choice(n, size=k, p=theme_class[t])
        feats = clean[classes] + spec.visual_noise_sigma * rng.normal(size=(k, dv))
        masked_noise = spec.visual_noise_sigma * rng.normal(size=(k, dv))
        boxes = np.column_stack(
            [rng.integers(0, 400, size=(k, 2)), rng.integers(8, 200, size=(k, 2))]
        ).astype(np.float64)
        total = feats.sum(axis=0)
        image_id = f"img{s:0{width}d}"
        objects = []
        for j, c in enumerate(classes):
            masked = (total - feats[j]) / (k - 1) + masked_noise[j]
            objects.append(
                ObjectInstance(f"{image_id}_{j}", int(c), tuple(boxes[j]), feats[j].copy(), masked)
            )
            counts[c] += 1
        scenes.append(Scene(image_id, objects))

    vocab = ClassVocab(labels, counts, np.ones(n, dtype=bool))
    dataset = SceneDataset(scenes, vocab, dv)
    truth = WorldTruth(
        labels=labels,
        prior=prior,
        theme_prior=theme_prior,
        theme_class=theme_class,
        home_theme=home,
        visual_latent=visual_latent,
        semantic_latent=semantic_latent,
        theme_vectors=theme_vectors,
        generator=generator,
        k_values=k_values,
        k_probs=k_probs,
        ambiguity_pairs=pairs,
    )
    return dataset, embeddings, truth


def pick_ambiguity_pairs(spec: WorldSpec, n_pairs: int) -> list[tuple[int, int]]:
    """Greedy pairing of classes with adjacent frequency ranks and different home themes."""
    prior, home = class_structure(spec)
    free = [int(c) for c in np.argsort(-prior, kind="stable")]
    out = []
    while len(out) < n_pairs and free:
        a = free.pop(0)
        partner = next((b for b in free if home[b] != home[a]), None)
        if partner is None:
            break
        free.remove(partner)
        out.append((a, partner))
    if len(out) < n_pairs:
        raise ValueError(f"could only form {len(out)} cross-theme pairs")
    return out


def planted_context_world(spec: WorldSpec, pairs: Sequence[tuple[int, int]] | int = ()):
    """Like :func:`generate`, with visually identical class pairs from different themes.

    ``pairs`` is an explicit list or a count of pairs to pick automatically.
    """
    if isinstance(pairs, int):
        pairs = pick_ambiguity_pairs(spec, pairs)
    planted = WorldSpec(**{**asdict(spec), "ambiguity_pairs": [tuple(p) for p in pairs]})
    return generate(planted)


def prepare(dataset: SceneDataset, p_sup: float, seed: int, ratios=(0.7, 0.1, 0.2)) -> SceneDataset:
    """Apply a seeded source/target split and train/val/test partition."""
    vocab = split_domains(dataset.vocab, p_sup, seed)
    partition = split_images(len(dataset.scenes), ratios, seed)
    return SceneDataset(dataset.scenes, vocab, dataset.d_visual, partition)


def expected_cooc_table(truth: WorldTruth, n_images: float = 1.0) -> CooccurrenceTable:
    """Presence co-occurrence table at its generator expectation over ``n_images``.

    Closed form per theme and object count k with class probabilities p:
    P(i present) = 1 - (1-p_i)^k; P(c and i present) by inclusion-exclusion;
    the diagonal is P(i at least twice) = 1 - (1-p)^k - k p (1-p)^(k-1).
    """
    n = len(truth.prior)
    marg = np.zeros(n)
    pairs = np.zeros((n, n))
    for t, pt in enumerate(truth.theme_prior):
        p = truth.theme_class[t]
        q = 1.0 - p
        both = 1.0 - p[:, None] - p[None, :]
        for k, pk in zip(truth.k_values, truth.k_probs):
            w = pt * pk
            marg += w * (1.0 - q**k)
            pair = 1.0 - q[:, None] ** k - q[None, :] ** k + both**k
            np.fill_diagonal(pair, 1.0 - q**k - k * p * q ** (k - 1))
            pairs += w * pair
    pairs = 0.5 * (pairs + pairs.T)
    return CooccurrenceTable(float(n_images), marg * n_images, pairs * n_images)
