"""Paired source/target continual task streams.

A stream is an ordered list of class-incremental tasks for one domain. Source
streams expose labels to the trainer; target streams keep their labels in a
:class:`LabelVault` that only evaluation code may open.
"""
from __future__ import annotations

import bz2
import contextlib
import contextvars
import gzip
import hashlib
import json
import logging
import math
import os
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

SOURCE, TARGET = "source", "target"
DOMAIN_TAG = {SOURCE: 1, TARGET: 0}


class ConfigurationError(ValueError):
    pass


class DatasetUnavailable(FileNotFoundError):
    pass


class IntegrityError(RuntimeError):
    pass


class LabelLeakError(RuntimeError):
    """Raised when target training labels are requested inside a gradient step."""


# ---------------------------------------------------------------------------
# label hygiene

_GRADIENT_PHASE: contextvars.ContextVar[str | None] = contextvars.ContextVar(
    "clamp_gradient_phase", default=None)


@contextlib.contextmanager
def gradient_phase(name: str):
    """Mark a block as gradient-producing; target labels are sealed inside it."""
    token = _GRADIENT_PHASE.set(name)
    try:
        yield
    finally:
        _GRADIENT_PHASE.reset(token)


def current_gradient_phase() -> str | None:
    return _GRADIENT_PHASE.get()


class LabelVault:
    """Read-audited label store for the target domain."""

    def __init__(self, labels: np.ndarray):
        labels = np.asarray(labels, dtype=np.int64).copy()
        labels.setflags(write=False)
        self._labels = labels
        self.reads: list[tuple[str, str | None]] = []

    def __len__(self):
        return len(self._labels)

    def reveal(self, purpose: str = "eval") -> np.ndarray:
        phase = current_gradient_phase()
        self.reads.append((purpose, phase))
        if phase is not None:
            raise LabelLeakError(
                f"target labels requested for {purpose!r} during gradient phase {phase!r}")
        return self._labels


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class TaskSpec:
    task_index: int
    class_labels: tuple[int, ...]
    domain_role: str = SOURCE

    def __post_init__(self):
        if not self.class_labels:
            raise ConfigurationError("a task needs at least one class")
        if self.domain_role not in DOMAIN_TAG:
            raise ConfigurationError(f"unknown domain role {self.domain_role!r}")


@dataclass
class DomainBatch:
    inputs: torch.Tensor
    labels: torch.Tensor | None
    domain_tag: int
    indices: np.ndarray | None = None

    def __len__(self):
        return len(self.inputs)


@dataclass
class _TaskData:
    train_x: torch.Tensor
    train_y: np.ndarray | LabelVault
    test_x: torch.Tensor
    test_y: np.ndarray | LabelVault


@dataclass
class TaskStream:
    """Ordered class-incremental tasks of one domain.

    Tasks are addressed with 1-based ``k``. On a target stream :meth:`labels`
    refuses; :meth:`eval_labels` is the only way to the ground truth.
    """

    name: str
    domain_role: str
    tasks: list[TaskSpec]
    total_classes: int
    _data: list[_TaskData] = field(repr=False)

    def __post_init__(self):
        if len(self.tasks) != len(self._data):
            raise ConfigurationError("task specs and task data differ in length")
        shapes = {tuple(d.train_x.shape[1:]) for d in self._data}
        shapes |= {tuple(d.test_x.shape[1:]) for d in self._data if len(d.test_x)}
        if len(shapes) != 1:
            raise ConfigurationError(f"inputs of one stream must share a shape, got {shapes}")
        for spec, d in zip(self.tasks, self._data):
            if len(d.train_x) == 0:
                raise ConfigurationError(f"task {spec.task_index} of {self.name} is empty")
            if self.domain_role == TARGET and not isinstance(d.train_y, LabelVault):
                raise ConfigurationError("target labels must be vaulted")

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self._data[0].train_x.shape[1:])

    @property
    def domain_tag(self) -> int:
        return DOMAIN_TAG[self.domain_role]

    def _task(self, k: int) -> _TaskData:
        if not 1 <= k <= self.num_tasks:
            raise IndexError(f"task {k} outside 1..{self.num_tasks}")
        return self._data[k - 1]

    def task(self, k: int) -> TaskSpec:
        self._task(k)
        return self.tasks[k - 1]

    def sizes(self, split: str = "train") -> list[int]:
        return [len(self.inputs(k, split)) for k in range(1, self.num_tasks + 1)]

    def inputs(self, k: int, split: str = "train") -> torch.Tensor:
        d = self._task(k)
        return d.train_x if split == "train" else d.test_x

    def labels(self, k: int, split: str = "train") -> torch.Tensor:
        """Training-facing labels; refused on a target stream."""
        if self.domain_role == TARGET:
            raise LabelLeakError(f"{self.name} is a target stream; its labels are not for training")
        d = self._task(k)
        return torch.as_tensor(d.train_y if split == "train" else d.test_y)

    def eval_labels(self, k: int, split: str = "test") -> torch.Tensor:
        d = self._task(k)
        y = d.train_y if split == "train" else d.test_y
        if isinstance(y, LabelVault):
            y = y.reveal(f"eval:{self.name}:{k}:{split}")
        return torch.as_tensor(np.array(y))

    def vaults(self) -> list[LabelVault]:
        out = []
        for d in self._data:
            out += [y for y in (d.train_y, d.test_y) if isinstance(y, LabelVault)]
        return out

    def manifest(self) -> list[dict]:
        return [
            {"task_index": spec.task_index, "class_labels": list(spec.class_labels),
             "n_train": len(d.train_x), "n_test": len(d.test_x)}
            for spec, d in zip(self.tasks, self._data)
        ]

    def write_manifest(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.manifest(), indent=2))
        return path

    def subsample(self, n_per_task: int, seed: int = 0) -> "TaskStream":
        """Stream with at most ``n_per_task`` train/test samples in each task."""
        rng = np.random.default_rng(seed)
        data = []
        for d in self._data:
            parts = []
            for x, y in ((d.train_x, d.train_y), (d.test_x, d.test_y)):
                raw = y._labels if isinstance(y, LabelVault) else y
                idx = np.sort(rng.permutation(len(x))[:n_per_task])
                parts.append((x[idx], _wrap_labels(raw[idx], self.domain_role)))
            data.append(_TaskData(parts[0][0], parts[0][1], parts[1][0], parts[1][1]))
        return TaskStream(self.name, self.domain_role, list(self.tasks), self.total_classes, data)


def _wrap_labels(y: np.ndarray, role: str):
    y = np.asarray(y, dtype=np.int64)
    return LabelVault(y) if role == TARGET else y


# ---------------------------------------------------------------------------
# task splits

def split_tasks(class_ids: Sequence[int], split_sizes: Sequence[int],
                domain_role: str = SOURCE) -> list[TaskSpec]:
    """Contiguous, order-preserving partition of ``class_ids`` into tasks."""
    class_ids = list(class_ids)
    if any(s < 1 for s in split_sizes):
        raise ConfigurationError(f"split sizes must be >= 1, got {list(split_sizes)}")
    if sum(split_sizes) != len(class_ids):
        raise ConfigurationError(
            f"split sizes sum to {sum(split_sizes)} but there are {len(class_ids)} classes")
    if len(set(class_ids)) != len(class_ids):
        raise ConfigurationError("class ids must be distinct")
    specs, start = [], 0
    for k, size in enumerate(split_sizes, start=1):
        specs.append(TaskSpec(k, tuple(class_ids[start:start + size]), domain_role))
        start += size
    return specs


def build_stream(name: str, role: str, specs: Sequence[TaskSpec], total_classes: int,
                 train_x: torch.Tensor, train_y: np.ndarray,
                 test_x: torch.Tensor, test_y: np.ndarray) -> TaskStream:
    """Cut a labelled dataset into the tasks described by ``specs``."""
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    data = []
    for spec in specs:
        tr = np.isin(train_y, spec.class_labels)
        te = np.isin(test_y, spec.class_labels)
        data.append(_TaskData(train_x[torch.from_numpy(tr)], _wrap_labels(train_y[tr], role),
                              test_x[torch.from_numpy(te)], _wrap_labels(test_y[te], role)))
    specs = [TaskSpec(s.task_index, s.class_labels, role) for s in specs]
    return TaskStream(name, role, specs, total_classes, data)


def merge_tasks(stream: TaskStream) -> TaskStream:
    """Single-task view holding every class of ``stream`` (joint training)."""
    cols = [[], [], [], []]
    for d in stream._data:
        for i, y in enumerate((d.train_y, d.test_y)):
            raw = y._labels if isinstance(y, LabelVault) else y
            cols[2 * i + 1].append(raw)
        cols[0].append(d.train_x)
        cols[2].append(d.test_x)
    labels = tuple(c for spec in stream.tasks for c in spec.class_labels)
    spec = TaskSpec(1, labels, stream.domain_role)
    d = _TaskData(torch.cat(cols[0]), _wrap_labels(np.concatenate(cols[1]), stream.domain_role),
                  torch.cat(cols[2]), _wrap_labels(np.concatenate(cols[3]), stream.domain_role))
    return TaskStream(stream.name, stream.domain_role, [spec], stream.total_classes, [d])


# ---------------------------------------------------------------------------
# batching

def batch_indices(n: int, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    if n == 0:
        raise ValueError("cannot batch an empty task")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def iterate_batches(stream: TaskStream, k: int, batch_size: int,
                    shuffle_seed: int | None = 0, split: str = "train") -> Iterator[DomainBatch]:
    """One epoch over task ``k``; every sample appears exactly once.

    Target streams yield ``labels=None``.
    """
    x = stream.inputs(k, split)
    y = stream.labels(k, split) if stream.domain_role == SOURCE else None
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    for idx in batch_indices(len(x), batch_size, rng):
        t = torch.from_numpy(idx)
        yield DomainBatch(x[t], None if y is None else y[t], stream.domain_tag, idx)


# ---------------------------------------------------------------------------
# digit datasets

def default_data_dir() -> Path:
    return Path(os.environ.get("CLAMP_DATA_DIR", Path.home() / ".cache" / "clamp" / "data"))


MNIST_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"
MNIST_FILES = {
    # stem: (md5 of raw file, md5 of .gz)
    "train-images-idx3-ubyte": ("6bbc9ace898e44ae57da46a324031adb", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    "train-labels-idx1-ubyte": ("a25bea736e30d166cdddb491f175f624", "d53e105ee54ea40749a09fcbcd1e9432"),
    "t10k-images-idx3-ubyte": ("2646ac647ad5339dbf082846283269ea", "9fb629c4189551a2d022fa330f9573f3"),
    "t10k-labels-idx1-ubyte": ("27ae3e4e09519cfbb04c329615203637", "ec29112dd5afa0611ce80d1b7f02629c"),
}
USPS_URL = "https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/multiclass/"
USPS_FILES = {
    "usps.bz2": "ec16c51db3855ca6c91edd34d0e9b197",
    "usps.t.bz2": "8ea070ee2aca1ac39742fdd1ef5ed118",
}


def _md5(path: Path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _check(path: Path, expected: str | None, verify: bool):
    if verify and expected is not None and _md5(path) != expected:
        raise IntegrityError(f"checksum mismatch for {path} (expected md5 {expected})")


def _fetch(url: str, dest: Path):
    dest.parent.mkdir(parents=True, exist_ok=True)
    try:
        with urllib.request.urlopen(url, timeout=30) as resp, open(dest, "wb") as fh:
            fh.write(resp.read())
    except OSError as exc:
        if dest.exists():
            dest.unlink()
        raise DatasetUnavailable(f"could not download {url}: {exc}") from exc


def read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    magic = int.from_bytes(raw[0:4], "big")
    if magic >> 8 != 0x08:
        raise IntegrityError(f"{path} is not an unsigned-byte IDX file")
    ndim = magic & 0xFF
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    return np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def _mnist_file(root: Path, stem: str, download: bool, verify: bool) -> Path:
    raw_md5, gz_md5 = MNIST_FILES[stem]
    dotted = stem.replace("-idx", ".idx")  # some mirrors ship train-images.idx3-ubyte
    for name, md5 in ((stem, raw_md5), (dotted, raw_md5), (stem + ".gz", gz_md5)):
        if (root / name).exists():
            _check(root / name, md5, verify)
            return root / name
    if download:
        _fetch(MNIST_URL + stem + ".gz", root / (stem + ".gz"))
        _check(root / (stem + ".gz"), gz_md5, verify)
        return root / (stem + ".gz")
    raise DatasetUnavailable(
        f"MNIST file {stem} not found in {root}. Place the four IDX files (raw or .gz) "
        f"there, set CLAMP_DATA_DIR, or pass download=True to fetch from {MNIST_URL}.")


def load_mnist(data_dir: str | os.PathLike | None = None, download: bool = False,
               verify: bool = True):
    """(train_x uint8 N×28×28, train_y, test_x, test_y) from the IDX files."""
    root = Path(data_dir or default_data_dir()) / "mnist"
    arrays = [read_idx(_mnist_file(root, stem, download, verify)) for stem in
              ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")]
    return arrays[0], arrays[1].astype(np.int64), arrays[2], arrays[3].astype(np.int64)


def read_usps_libsvm(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Parse the bz2 libsvm USPS file: labels 1..10 -> 0..9, pixels [-1,1] -> [0,1]."""
    xs, ys = [], []
    with bz2.open(path, "rt") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            ys.append(int(float(parts[0])) - 1)
            row = np.full(256, -1.0, dtype=np.float32)
            for item in parts[1:]:
                i, v = item.split(":")
                row[int(i) - 1] = float(v)
            xs.append(row)
    x = (np.stack(xs).reshape(-1, 16, 16) + 1.0) / 2.0
    return np.clip(x, 0.0, 1.0).astype(np.float32), np.asarray(ys, dtype=np.int64)


def load_usps(data_dir: str | os.PathLike | None = None, download: bool = False,
              verify: bool = True):
    root = Path(data_dir or default_data_dir()) / "usps"
    out = []
    for name, md5 in USPS_FILES.items():
        path = root / name
        if not path.exists():
            if not download:
                raise DatasetUnavailable(
                    f"USPS file {name} not found in {root}. Download {USPS_URL}{name} "
                    f"into that directory, set CLAMP_DATA_DIR, or pass download=True.")
            _fetch(USPS_URL + name, path)
        _check(path, md5, verify)
        out.extend(read_usps_libsvm(path))
    return tuple(out)


def load_mnist_lowres(data_dir: str | os.PathLike | None = None, download: bool = False,
                      verify: bool = True):
    """MNIST area-downsampled to 16x16, USPS's native resolution.

    A stand-in second domain for pipeline checks when USPS is not available;
    results on it say nothing about MNIST/USPS accuracy.
    """
    trx, try_, tex, tey = load_mnist(data_dir, download, verify)

    def shrink(x):
        t = torch.from_numpy(np.array(x, dtype=np.float32)).unsqueeze(1) / 255.0
        return F.interpolate(t, size=(16, 16), mode="area").squeeze(1).numpy()

    return shrink(trx), try_, shrink(tex), tey


DIGIT_LOADERS = {"mnist": load_mnist, "usps": load_usps, "mnist_lowres": load_mnist_lowres}
MNIST_FAMILY = {"mnist", "mnist_lowres"}


def _to_images(x: np.ndarray, size: int) -> torch.Tensor:
    t = torch.from_numpy(np.array(x, dtype=np.float32))
    if t.max() > 1.0:
        t = t / 255.0
    t = t.unsqueeze(1)
    if t.shape[-1] != size or t.shape[-2] != size:
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t.clamp_(0.0, 1.0).contiguous()


def load_digit_pair(source_name: str, target_name: str, resize_to: int = 28,
                    split_sizes: Sequence[int] = (2, 2, 2, 2, 2),
                    data_dir: str | os.PathLike | None = None, download: bool = False,
                    class_perm_seed: int | None = None, verify: bool = True,
                    ) -> tuple[TaskStream, TaskStream]:
    """MNIST/USPS streams at a common resolution with identical class splits."""
    names = [source_name.lower(), target_name.lower()]
    for n in names:
        if n not in DIGIT_LOADERS:
            raise ConfigurationError(f"unknown digit dataset {n!r}; choose from {sorted(DIGIT_LOADERS)}")
    classes = list(range(10))
    if class_perm_seed is not None:
        classes = list(np.random.default_rng(class_perm_seed).permutation(10))
    specs = split_tasks(classes, split_sizes)
    cache: dict[str, tuple] = {}
    # two MNIST-derived domains would share images; give them disjoint halves
    shared = len(set(names) & MNIST_FAMILY) == 2
    streams = []
    for i, (name, role) in enumerate(zip(names, (SOURCE, TARGET))):
        if name not in cache:
            cache[name] = DIGIT_LOADERS[name](data_dir, download=download, verify=verify)
        trx, try_, tex, tey = cache[name]
        if shared:
            trx, try_, tex, tey = trx[i::2], try_[i::2], tex[i::2], tey[i::2]
        streams.append(build_stream(name, role, specs, 10, _to_images(trx, resize_to), try_,
                                    _to_images(tex, resize_to), tey))
    return streams[0], streams[1]


# ---------------------------------------------------------------------------
# image-folder datasets (Office-31, Office-Home, VisDA, DomainNet layouts)

IMAGE_EXTS = {".jpg", ".jpeg", ".png", ".bmp"}


def load_image_folder(root: str | os.PathLike, domain: str, class_names: Sequence[str],
                      resize_to: int, max_per_class: int | None = None) -> tuple[torch.Tensor, np.ndarray]:
    from PIL import Image

    base = Path(root) / domain
    if not base.is_dir():
        raise DatasetUnavailable(f"domain folder {base} not found")
    xs, ys = [], []
    for label, cname in enumerate(class_names):
        files = sorted(p for p in (base / cname).glob("*") if p.suffix.lower() in IMAGE_EXTS)
        for p in files[:max_per_class]:
            with Image.open(p) as im:
                im = im.convert("RGB").resize((resize_to, resize_to))
                xs.append(np.asarray(im, dtype=np.float32) / 255.0)
            ys.append(label)
    if not xs:
        raise DatasetUnavailable(f"no images under {base}")
    x = torch.from_numpy(np.stack(xs)).permute(0, 3, 1, 2).contiguous()
    return x, np.asarray(ys, dtype=np.int64)


def load_image_folder_pair(root: str | os.PathLike, source_domain: str, target_domain: str,
                           class_names: Sequence[str], split_sizes: Sequence[int],
                           resize_to: int = 224, test_fraction: float = 0.2, seed: int = 0,
                           max_per_class: int | None = None) -> tuple[TaskStream, TaskStream]:
    """Streams from ``root/<domain>/<class>/*`` trees; classes sorted alphabetically.

    These datasets have no canonical train/test split, so a seeded per-class
    hold-out of ``test_fraction`` is used.
    """
    class_names = sorted(class_names)
    specs = split_tasks(list(range(len(class_names))), split_sizes)
    streams = []
    for i, (domain, role) in enumerate(((source_domain, SOURCE), (target_domain, TARGET))):
        x, y = load_image_folder(root, domain, class_names, resize_to, max_per_class)
        rng = np.random.default_rng(seed + i)
        test = np.zeros(len(y), dtype=bool)
        for c in np.unique(y):
            idx = np.flatnonzero(y == c)
            n_test = int(round(test_fraction * len(idx)))
            test[rng.choice(idx, size=min(n_test, len(idx) - 1), replace=False)] = True
        tr, te = torch.from_numpy(~test), torch.from_numpy(test)
        streams.append(build_stream(domain, role, specs, len(class_names),
                                    x[tr], y[~test], x[te], y[test]))
    return streams[0], streams[1]


# ---------------------------------------------------------------------------
# synthetic Gaussian clusters

def rotation_matrix(angle_deg: float) -> np.ndarray:
    a = math.radians(angle_deg)
    return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])


@dataclass
class SyntheticPair:
    source: TaskStream
    target: TaskStream
    source_means: np.ndarray
    target_means: np.ndarray

    def __iter__(self):
        return iter((self.source, self.target))


def make_synthetic_pair(num_classes: int = 4, samples_per_class: int = 100,
                        rotation_deg: float = 0.0, offset: float | Sequence[float] = 0.0,
                        seed: int = 0, classes_per_task: int = 2,
                        test_per_class: int | None = None, radius: float = 3.0,
                        spread: float = 0.5) -> SyntheticPair:
    """Two 2-D Gaussian-cluster streams; the target is the source rotated then shifted.

    Class ``c`` has mean ``radius * (cos, sin)(2*pi*c/num_classes)``. Target
    samples are fresh draws around ``R @ mean + offset``, not transformed copies.
    """
    if num_classes < 2:
        raise ConfigurationError("need at least two classes")
    offset_v = np.broadcast_to(np.asarray(offset, dtype=np.float64), (2,)).copy()
    if not (math.isfinite(rotation_deg) and np.all(np.isfinite(offset_v))):
        raise ConfigurationError("domain shift parameters must be finite")
    test_per_class = test_per_class if test_per_class is not None else max(1, samples_per_class // 2)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    src_means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    tgt_means = src_means @ rotation_matrix(rotation_deg).T + offset_v

    sizes = [classes_per_task] * (num_classes // classes_per_task)
    if num_classes % classes_per_task:
        sizes.append(num_classes % classes_per_task)
    specs = split_tasks(list(range(num_classes)), sizes)
    ss = np.random.SeedSequence(seed)
    streams = []
    for role, means, child in zip((SOURCE, TARGET), (src_means, tgt_means), ss.spawn(2)):
        rng = np.random.default_rng(child)

        def draw(n):
            y = np.repeat(np.arange(num_classes), n)
            x = means[y] + spread * rng.standard_normal((len(y), 2))
            return torch.as_tensor(x, dtype=torch.float32), y

        (trx, try_), (tex, tey) = draw(samples_per_class), draw(test_per_class)
        streams.append(build_stream(f"synthetic-{role}", role, specs, num_classes,
                                    trx, try_, tex, tey))
    return SyntheticPair(streams[0], streams[1], src_means, tgt_means)
