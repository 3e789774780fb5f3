"""Scenes, class vocabularies, on-disk formats and domain/image splits."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embeddings import EmbeddingTable

BANK_MAGIC = b"CZFB1"
SPLIT_SECTIONS = ("source", "target", "train", "val", "test")
RETRIEVAL_MODES = ("target", "source", "generalized")


class DataFormatError(ValueError):
    pass


@dataclass
class ClassVocab:
    labels: list[str]
    counts: np.ndarray
    source_mask: np.ndarray

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise DataFormatError("class labels must be unique")
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.source_mask = np.asarray(self.source_mask, dtype=bool)
        if not len(self.counts) == len(self.source_mask) == len(self.labels):
            raise DataFormatError("labels, counts and source_mask lengths differ")
        self._index = {lab: i for i, lab in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def index(self, label: str) -> int:
        return self._index[label]

    @property
    def source(self) -> np.ndarray:
        return np.flatnonzero(self.source_mask)

    @property
    def target(self) -> np.ndarray:
        return np.flatnonzero(~self.source_mask)

    @property
    def p_sup(self) -> float:
        return float(self.source_mask.mean())

    def with_mask(self, source_mask) -> "ClassVocab":
        return ClassVocab(list(self.labels), self.counts.copy(), np.asarray(source_mask, dtype=bool))

    def check_embeddings(self, table: EmbeddingTable) -> None:
        missing = [lab for lab in self.labels if lab not in table]
        if missing:
            raise KeyError(f"{len(missing)} vocabulary label(s) lack embeddings: {missing[:5]}")


@dataclass
class ObjectInstance:
    object_id: str
    class_idx: int
    bbox: tuple[float, float, float, float]
    feature: np.ndarray
    masked_scene_feature: np.ndarray | None = None

    def __post_init__(self):
        x, y, w, h = self.bbox
        if not (w > 0 and h > 0):
            raise DataFormatError(f"object {self.object_id!r}: degenerate bbox {self.bbox}")


@dataclass
class Scene:
    image_id: str
    objects: list[ObjectInstance]
    masked_scene_feature: np.ndarray | None = None

    def __post_init__(self):
        if not self.objects:
            raise DataFormatError(f"scene {self.image_id!r} has no objects")
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise DataFormatError(f"scene {self.image_id!r}: duplicate object ids")

    def masked_feature(self, focus: int) -> np.ndarray | None:
        obj = self.objects[focus]
        if obj.masked_scene_feature is not None:
            return obj.masked_scene_feature
        return self.masked_scene_feature


@dataclass
class SceneDataset:
    scenes: list[Scene]
    vocab: ClassVocab
    d_visual: int
    partition: dict[str, list[int]] = field(default_factory=dict)

    @property
    def p_sup(self) -> float:
        return self.vocab.p_sup

    def split_scenes(self, name: str) -> list[Scene]:
        return [self.scenes[i] for i in self.partition[name]]

    def scene_index(self) -> dict[str, int]:
        return {s.image_id: i for i, s in enumerate(self.scenes)}


class ZslInstance:
    """One object to classify plus its visual context.

    Model-facing accessors never reveal the class of a target-domain context
    object; :meth:`oracle_context_labels` is the evaluation-only escape hatch.
    """

    __slots__ = ("scene", "focus", "_source_mask")

    def __init__(self, scene: Scene, focus: int, source_mask: np.ndarray):
        self.scene = scene
        self.focus = focus
        self._source_mask = source_mask

    def __repr__(self):
        return f"ZslInstance({self.instance_id!r})"

    @property
    def instance_id(self) -> str:
        return f"{self.scene.image_id}/{self.scene.objects[self.focus].object_id}"

    @property
    def label(self) -> int:
        """Ground-truth class of the focus object."""
        return self.scene.objects[self.focus].class_idx

    @property
    def focus_feature(self) -> np.ndarray:
        return self.scene.objects[self.focus].feature

    @property
    def masked_scene_feature(self) -> np.ndarray | None:
        return self.scene.masked_feature(self.focus)

    def _context(self):
        return [o for k, o in enumerate(self.scene.objects) if k != self.focus]

    @property
    def n_context(self) -> int:
        return len(self.scene.objects) - 1

    def context_source_labels(self) -> list[int]:
        return [o.class_idx for o in self._context() if self._source_mask[o.class_idx]]

    def context_source_features(self) -> list[np.ndarray]:
        return [o.feature for o in self._context() if self._source_mask[o.class_idx]]

    def context_target_features(self) -> list[np.ndarray]:
        return [o.feature for o in self._context() if not self._source_mask[o.class_idx]]

    def oracle_context_labels(self) -> list[int]:
        """All context classes, target domain included. Oracles only."""
        return [o.class_idx for o in self._context()]

    def oracle_target_context_labels(self) -> list[int]:
        return [o.class_idx for o in self._context() if not self._source_mask[o.class_idx]]


# ---------------------------------------------------------------------------
# feature bank
# ---------------------------------------------------------------------------


def write_feature_bank(path, ids: Sequence[str], features: np.ndarray) -> None:
    """Binary bank ``CZFB1`` + u32 rows + u32 dim + f32 rows, plus ``<path>.idx``."""
    features = np.asarray(features, dtype="<f4")
    rows, dim = features.shape
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<II", rows, dim))
        fh.write(features.tobytes(order="C"))
    with index_path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for row, oid in enumerate(ids):
            fh.write(f"{oid}\t{row}\n")


def index_path(bank_path) -> Path:
    bank_path = Path(bank_path)
    return bank_path.with_name(bank_path.name + ".idx")


def read_feature_bank(path) -> tuple[dict[str, int], np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:5] != BANK_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:5]!r}")
    rows, dim = struct.unpack_from("<II", raw, 5)
    payload = raw[13:]
    if len(payload) != rows * dim * 4:
        raise DataFormatError(f"{path}: payload holds {len(payload)} bytes, expected {rows * dim * 4}")
    features = np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(np.float64)
    index: dict[str, int] = {}
    with index_path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                oid, row = line.split("\t")
                index[oid] = int(row)
            except ValueError as exc:
                raise DataFormatError(f"{index_path(path)}:{lineno}: expected 'id<TAB>row'") from exc
            if not 0 <= index[oid] < rows:
                raise DataFormatError(f"{index_path(path)}:{lineno}: row {row} out of range")
    return index, features


# ---------------------------------------------------------------------------
# scene files
# ---------------------------------------------------------------------------


@dataclass
class IngestResult:
    scenes: list[Scene]
    labels: list[str]
    raw_counts: dict[str, int]
    d_visual: int
    dropped_classes: list[str]
    dropped_objects: int
    dropped_scenes: int

    def dataset(self, source_mask=None) -> SceneDataset:
        counts = np.array([self.raw_counts[lab] for lab in self.labels], dtype=np.int64)
        if source_mask is None:
            source_mask = np.ones(len(self.labels), dtype=bool)
        return SceneDataset(self.scenes, ClassVocab(list(self.labels), counts, source_mask), self.d_visual)


def _vector(value, where) -> np.ndarray:
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
        raise DataFormatError(f"{where}: feature must be a list of numbers")
    return np.array(value, dtype=np.float64)


def ingest_scenes(
    scene_file,
    feature_bank=None,
    min_count: int = 10,
    embeddings: EmbeddingTable | None = None,
) -> IngestResult:
    """Parse a line-delimited scene file and filter rare / unembedded classes.

    Classes with fewer than ``min_count`` instances, or without a vector in
    ``embeddings`` (when given), are dropped together with their objects;
    scenes left empty are removed. Surviving classes are ordered by label.
    """
    scene_file = Path(scene_file)
    bank_index, bank = (None, None)
    if feature_bank is not None:
        bank_index, bank = read_feature_bank(feature_bank)

    d_visual = None
    records = []
    with scene_file.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{scene_file}:{lineno}"
            try:
                rec = json.loads(line)
                image_id = str(rec["image_id"])
                objs = rec["objects"]
                if not isinstance(objs, list):
                    raise TypeError("'objects' must be a list")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataFormatError(f"{where}: malformed record ({exc})") from exc
            parsed = []
            for o in objs:
                try:
                    oid, label, bbox = str(o["object_id"]), str(o["class"]), o["bbox"]
                    if len(bbox) != 4:
                        raise ValueError("bbox must have 4 numbers")
                    bbox = tuple(float(v) for v in bbox)
                except (KeyError, TypeError, ValueError) as exc:
                    raise DataFormatError(f"{where}: malformed object ({exc})") from exc
                if "feature" in o:
                    feat = _vector(o["feature"], where)
                elif "feature_ref" in o:
                    if bank is None:
                        raise DataFormatError(f"{where}: feature_ref without a feature bank")
                    ref = str(o["feature_ref"])
                    if ref not in bank_index:
                        raise DataFormatError(f"{where}: dangling feature reference {ref!r}")
                    feat = bank[bank_index[ref]]
                else:
                    raise DataFormatError(f"{where}: object {oid!r} has no feature")
                if d_visual is None:
                    d_visual = len(feat)
                if len(feat) != d_visual:
                    raise DataFormatError(
                        f"{where}: feature dimension {len(feat)} != {d_visual}"
                    )
                masked = o.get("masked_scene_feature")
                if masked is not None:
                    masked = _vector(masked, where)
                    if len(masked) != d_visual:
                        raise DataFormatError(f"{where}: masked feature dimension mismatch")
                parsed.append((oid, label, bbox, feat, masked))
            scene_masked = rec.get("masked_scene_feature")
            if scene_masked is not None:
                scene_masked = _vector(scene_masked, where)
                if d_visual is not None and len(scene_masked) != d_visual:
                    raise DataFormatError(f"{where}: masked feature dimension mismatch")
            records.append((where, image_id, parsed, scene_masked))

    raw_counts: dict[str, int] = {}
    for _, _, parsed, _ in records:
        for _, label, *_ in parsed:
            raw_counts[label] = raw_counts.get(label, 0) + 1
    keep = {
        lab
        for lab, n in raw_counts.items()
        if n >= min_count and (embeddings is None or lab in embeddings)
    }
    labels = sorted(keep)
    index = {lab: i for i, lab in enumerate(labels)}

    scenes = []
    dropped_objects = dropped_scenes = 0
    for where, image_id, parsed, scene_masked in records:
        objects = []
        for oid, label, bbox, feat, masked in parsed:
            if label not in keep:
                dropped_objects += 1
                continue
            try:
                objects.append(ObjectInstance(oid, index[label], bbox, feat, masked))
            except DataFormatError as exc:
                raise DataFormatError(f"{where}: {exc}") from exc
        if not objects:
            dropped_scenes += 1
            continue
        try:
            scenes.append(Scene(image_id, objects, scene_masked))
        except DataFormatError as exc:
            raise DataFormatError(f"{where}: {exc}") from exc

    return IngestResult(
        scenes=scenes,
        labels=labels,
        raw_counts={lab: raw_counts[lab] for lab in labels},
        d_visual=d_visual or 0,
        dropped_classes=sorted(set(raw_counts) - keep),
        dropped_objects=dropped_objects,
        dropped_scenes=dropped_scenes,
    )


def _floats(vec) -> list[float]:
    return [float(v) for v in vec]


def write_scenes(path, scenes: Iterable[Scene], labels: Sequence[str]) -> None:
    """Inverse of :func:`ingest_scenes` with inline features (float64 repr, exact)."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for scene in scenes:
            objs = []
            for o in scene.objects:
                rec = {
                    "object_id": o.object_id,
                    "class": labels[o.class_idx],
                    "bbox": _floats(o.bbox),
                    "feature": _floats(o.feature),
                }
                if o.masked_scene_feature is not None:
                    rec["masked_scene_feature"] = _floats(o.masked_scene_feature)
                objs.append(rec)
            rec = {"image_id": scene.image_id, "objects": objs}
            if scene.masked_scene_feature is not None:
                rec["masked_scene_feature"] = _floats(scene.masked_scene_feature)
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# split files
# ---------------------------------------------------------------------------


def write_splits(path, vocab: ClassVocab, dataset: SceneDataset) -> None:
    sections = {
        "source": [vocab.labels[i] for i in vocab.source],
        "target": [vocab.labels[i] for i in vocab.target],
    }
    for name in ("train", "val", "test"):
        sections[name] = [dataset.scenes[i].image_id for i in dataset.partition.get(name, [])]
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for name in SPLIT_SECTIONS:
            fh.write(f"{name}:\n")
            for item in sections[name]:
                fh.write(item + "\n")


def read_splits(path) -> dict[str, list[str]]:
    sections: dict[str, list[str]] = {name: [] for name in SPLIT_SECTIONS}
    current = None
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            item = line.rstrip("\n")
            if not item:
                continue
            if item.endswith(":") and item[:-1] in SPLIT_SECTIONS:
                current = item[:-1]
                continue
            if current is None:
                raise DataFormatError(f"{path}:{lineno}: item before any section header")
            sections[current].append(item)
    return sections


def apply_splits(dataset: SceneDataset, sections: dict[str, list[str]]) -> SceneDataset:
    """Return a dataset whose source mask and image partition follow ``sections``."""
    vocab = dataset.vocab
    mask = np.zeros(len(vocab), dtype=bool)
    for lab in sections["source"]:
        if lab in vocab._index:
            mask[vocab.index(lab)] = True
    by_id = dataset.scene_index()
    partition = {}
    for name in ("train", "val", "test"):
        partition[name] = [by_id[i] for i in sections[name] if i in by_id]
    return SceneDataset(dataset.scenes, vocab.with_mask(mask), dataset.d_visual, partition)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_domains(
    vocab: ClassVocab, p_sup: float, seed: int, forced_source: Iterable[str] = ()
) -> ClassVocab:
    """Randomly mark ``round(p_sup * |O|)`` classes as source domain."""
    if not 0.0 < p_sup <= 1.0:
        raise ValueError(f"p_sup must be in (0, 1], got {p_sup}")
    n = len(vocab)
    n_source = _round_half_up(p_sup * n)
    forced = sorted({vocab.index(lab) for lab in forced_source})
    if len(forced) > n_source:
        raise ValueError(f"{len(forced)} forced-source classes exceed the source budget {n_source}")
    rng = np.random.default_rng(seed)
    forced_set = set(forced)
    rest = np.array([i for i in range(n) if i not in forced_set], dtype=np.int64)
    chosen = rng.permutation(rest)[: n_source - len(forced)]
    mask = np.zeros(n, dtype=bool)
    mask[forced] = True
    mask[chosen] = True
    return vocab.with_mask(mask)


def split_images(
    n_scenes: int, ratios: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0
) -> dict[str, list[int]]:
    """Partition scene indices into train/val/test.

    Sizes come from largest-remainder rounding of ``ratios * n_scenes`` so
    each is within one of the exact fraction; remainder ties favour the
    largest ratio.
    """
    if n_scenes <= 0:
        raise ValueError("cannot split an empty dataset")
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios <= 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    exact = ratios * n_scenes
    sizes = np.floor(exact).astype(int)
    order = sorted(range(3), key=lambda k: (-(exact[k] - sizes[k]), -ratios[k], k))
    for k in order[: n_scenes - sizes.sum()]:
        sizes[k] += 1
    perm = np.random.default_rng(seed).permutation(n_scenes)
    bounds = np.cumsum(sizes)
    return {
        "train": sorted(perm[: bounds[0]].tolist()),
        "val": sorted(perm[bounds[0] : bounds[1]].tolist()),
        "test": sorted(perm[bounds[1] :].tolist()),
    }


def make_instances(dataset: SceneDataset, partition: str, retrieval_domain: str = "target") -> list[ZslInstance]:
    """One instance per object whose class lies in the retrieval domain."""
    if retrieval_domain not in RETRIEVAL_MODES:
        raise ValueError(f"unknown retrieval domain {retrieval_domain!r}")
    mask = dataset.vocab.source_mask
    out = []
    for scene in dataset.split_scenes(partition):
        for k, obj in enumerate(scene.objects):
            src = mask[obj.class_idx]
            if retrieval_domain == "generalized" or (src == (retrieval_domain == "source")):
                out.append(ZslInstance(scene, k, mask))
    return out


def candidate_classes(vocab: ClassVocab, mode: str) -> np.ndarray:
    if mode == "target":
        return vocab.target
    if mode == "source":
        return vocab.source
    if mode == "generalized":
        return np.arange(len(vocab))
    raise ValueError(f"unknown retrieval mode {mode!r}")
