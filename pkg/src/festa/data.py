"""Synthetic three-task data, client partitioners, binary dataset files.

Classification is a 3-class Gaussian mixture whose means are separated far
enough that a linear rule exceeds 90% accuracy. The dense tasks share one
toy image model: a grid of patches with one axis-aligned rectangle of
shifted patches (or none), labelled with the per-patch mask respectively
the rectangle box plus an objectness bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import wire

CLS_DIM = 8
CLS_CLASSES = 3
CLS_SEP = 4.0  # pairwise distance between class means
PATCH_DIM = 8
GRID = 4  # grid x grid patches per toy image
FG_SHIFT = 2.0


@dataclass
class Sample:
    task: str
    features: np.ndarray  # (dim,) for classification, (patches, patch_dim) dense
    label: object  # int | (patches,) mask | (box[4], objectness int)


@dataclass
class PartitionPlan:
    assignments: dict[int, list[int]]  # client -> sample indices
    skew: list[tuple[float, ...]] | None = None  # per-client class proportions

    def shard(self, samples: list[Sample], client: int) -> list[Sample]:
        return [samples[i] for i in self.assignments[client]]


def _class_means() -> np.ndarray:
    means = np.zeros((CLS_CLASSES, CLS_DIM), dtype=np.float32)
    for k in range(CLS_CLASSES):
        means[k, k] = CLS_SEP / np.sqrt(2.0)
    return means


def gen_classification(n: int, seed: int) -> list[Sample]:
    if n < CLS_CLASSES:
        raise ValueError(f"need at least {CLS_CLASSES} samples")
    rng = np.random.default_rng(seed)
    means = _class_means()
    labels = rng.integers(0, CLS_CLASSES, size=n)
    feats = (rng.standard_normal((n, CLS_DIM)) + means[labels]).astype(np.float32)
    return [Sample("classification", feats[i], int(labels[i])) for i in range(n)]


def bayes_classify(features: np.ndarray) -> int:
    """Nearest-mean rule on the known mixture (the analytic reference)."""
    means = _class_means()
    return int(np.argmin(((features - means) ** 2).sum(axis=1)))


def _gen_image(rng: np.random.Generator, empty: bool):
    patches = rng.standard_normal((GRID * GRID, PATCH_DIM)).astype(np.float32)
    mask = np.zeros(GRID * GRID, dtype=np.float32)
    box = np.zeros(4, dtype=np.float32)
    if not empty:
        x0 = int(rng.integers(0, GRID))
        y0 = int(rng.integers(0, GRID))
        w = int(rng.integers(1, GRID - x0 + 1))
        h = int(rng.integers(1, GRID - y0 + 1))
        for yy in range(y0, y0 + h):
            for xx in range(x0, x0 + w):
                idx = yy * GRID + xx
                mask[idx] = 1.0
                patches[idx, : PATCH_DIM // 2] += FG_SHIFT
        box[:] = (x0, y0, w, h)
    return patches, mask, box


def gen_segmentation(n: int, seed: int) -> list[Sample]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        patches, mask, _ = _gen_image(rng, empty=False)
        out.append(Sample("segmentation", patches, mask))
    return out


def gen_detection(n: int, seed: int, empty_rate: float = 0.2) -> list[Sample]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        empty = bool(rng.random() < empty_rate)
        patches, _, box = _gen_image(rng, empty=empty)
        out.append(Sample("detection", patches, (box, 0 if empty else 1)))
    return out


def generate(task: str, n: int, seed: int) -> list[Sample]:
    if task == "classification":
        return gen_classification(n, seed)
    if task == "segmentation":
        return gen_segmentation(n, seed)
    if task == "detection":
        return gen_detection(n, seed)
    raise ValueError(f"unknown task kind {task!r}")


# Six client shares per class, echoing a hospital-style skew: two mixed
# clients, one client dominated ~90% by class 0, one class-0-only client,
# and two class-2-only clients. Rows are clients, columns class fractions.
DEFAULT_NONIID_6 = (
    (0.04, 0.33, 0.01),
    (0.06, 0.60, 0.10),
    (0.60, 0.07, 0.00),
    (0.30, 0.00, 0.00),
    (0.00, 0.00, 0.67),
    (0.00, 0.00, 0.22),
)


def partition_noniid(samples: list[Sample], client_specs, seed: int) -> PartitionPlan:
    """Deterministic label-skewed split: client_specs[c][k] is the share of
    class k's samples given to client c; shares are normalized per class."""
    specs = np.asarray(client_specs, dtype=np.float64)
    if specs.ndim != 2 or (specs < 0).any():
        raise ValueError("client specs must be a non-negative matrix")
    n_clients, n_classes = specs.shape
    by_class: dict[int, list[int]] = {k: [] for k in range(n_classes)}
    for i, s in enumerate(samples):
        if not isinstance(s.label, (int, np.integer)):
            raise ValueError("non-IID partition needs class-labelled samples")
        if not 0 <= s.label < n_classes:
            raise ValueError(f"label {s.label} outside spec with {n_classes} classes")
        by_class[int(s.label)].append(i)
    rng = np.random.default_rng(seed)
    plan = {c: [] for c in range(n_clients)}
    for k, idxs in by_class.items():
        if not idxs:
            continue
        total = specs[:, k].sum()
        if total <= 0:
            raise ValueError(f"infeasible spec: class {k} has samples but zero share")
        shares = specs[:, k] / total
        idxs = list(idxs)
        rng.shuffle(idxs)
        bounds = np.round(np.cumsum(shares) * len(idxs)).astype(int)
        lo = 0
        for c, hi in enumerate(bounds):
            plan[c].extend(idxs[lo:hi])
            lo = hi
    for c in plan:
        plan[c].sort()
    return PartitionPlan(plan, skew=[tuple(row) for row in specs])


def partition_iid(samples: list[Sample], n_clients: int, seed: int) -> PartitionPlan:
    if n_clients < 1:
        raise ValueError("need at least one client")
    rng = np.random.default_rng(seed)
    idxs = list(range(len(samples)))
    rng.shuffle(idxs)
    plan = {c: sorted(idxs[c::n_clients]) for c in range(n_clients)}
    return PartitionPlan(plan)


def class_histogram(samples: list[Sample], n_classes: int = CLS_CLASSES) -> np.ndarray:
    h = np.zeros(n_classes, dtype=int)
    for s in samples:
        h[int(s.label)] += 1
    return h


_TASK_CODE = {"classification": 0, "segmentation": 1, "detection": 2}
_TASK_NAME = {v: k for k, v in _TASK_CODE.items()}


def _label_tensor(s: Sample) -> np.ndarray:
    if s.task == "classification":
        return np.array([s.label], dtype=np.float32)
    if s.task == "segmentation":
        return s.label
    box, obj = s.label
    return np.concatenate([box, np.array([obj], dtype=np.float32)])


def _label_from_tensor(task: str, arr: np.ndarray):
    if task == "classification":
        return int(arr[0])
    if task == "segmentation":
        return arr
    return arr[:4].copy(), int(arr[4])


def dump_samples(path, samples: list[Sample]) -> None:
    """Flat binary dataset: task code u8, count u32 LE, then per sample the
    features and the label, each as a wire tensor payload."""
    if not samples:
        raise ValueError("refusing to dump an empty dataset")
    task = samples[0].task
    with open(path, "wb") as f:
        f.write(struct.pack("<BI", _TASK_CODE[task], len(samples)))
        for s in samples:
            if s.task != task:
                raise ValueError("mixed task kinds in one dataset file")
            f.write(wire.encode_tensor(s.features))
            f.write(wire.encode_tensor(_label_tensor(s)))


def load_samples(path) -> list[Sample]:
    with open(path, "rb") as f:
        data = f.read()
    code, n = struct.unpack_from("<BI", data, 0)
    task = _TASK_NAME[code]
    off = 5
    out = []
    for _ in range(n):
        feats, off = wire.decode_tensor_at(data, off)
        label, off = wire.decode_tensor_at(data, off)
        out.append(Sample(task, feats, _label_from_tensor(task, label)))
    if off != len(data):
        raise wire.MalformedFrame("trailing bytes after final sample")
    return out


class BatchStream:
    """Deterministic infinite batch iterator over one client's shard;
    reshuffles each epoch with its own generator."""

    def __init__(self, samples: list[Sample], batch: int, seed: int):
        if not samples:
            raise ValueError("empty shard")
        self.samples = samples
        self.batch = batch
        self.rng = np.random.default_rng(seed)
        self._order: list[int] = []
        self._pos = 0

    def next_batch(self) -> list[Sample]:
        out = []
        while len(out) < self.batch:
            if self._pos >= len(self._order):
                self._order = list(range(len(self.samples)))
                self.rng.shuffle(self._order)
                self._pos = 0
            out.append(self.samples[self._order[self._pos]])
            self._pos += 1
        return out

    def snapshot(self):
        """Cursor state for replaying a batch after an aborted round."""
        import copy

        return (copy.deepcopy(self.rng), list(self._order), self._pos)
