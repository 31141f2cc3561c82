"""Synthetic non-IID client data and the FVD1 dataset file format."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

FVD_MAGIC = b"FVD1"
NOISE_STD = 0.3
MAX_ATTEMPTS = 100


class DatasetFormatError(ValueError):
    pass


class StarvationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SkewSpec:
    """Label skew (Dirichlet ``alpha``) and per-client affine intensity shift.

    With explicit ``scales``/``offsets`` those are used as-is; otherwise they
    are drawn from ``feature_shift``: scale in 1 +- fs, offset in +- fs/2.
    """

    alpha: float = 0.5
    feature_shift: float = 0.0
    scales: Optional[tuple[float, ...]] = None
    offsets: Optional[tuple[float, ...]] = None
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"dirichlet alpha must be > 0, got {self.alpha}")
        if not 0 <= self.feature_shift < 1:
            raise ValueError(f"feature_shift must be in [0, 1), got {self.feature_shift}")
        if self.scales is not None and any(s <= 0 for s in self.scales):
            raise ValueError("affine scales must be positive")

    def affine(self, num_clients: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if self.scales is not None or self.offsets is not None:
            s = np.asarray(self.scales if self.scales is not None else [1.0] * num_clients, dtype=np.float64)
            o = np.asarray(self.offsets if self.offsets is not None else [0.0] * num_clients, dtype=np.float64)
            if s.shape != (num_clients,) or o.shape != (num_clients,):
                raise ValueError(f"need {num_clients} scales and offsets")
            return s, o
        fs = self.feature_shift
        return 1.0 + rng.uniform(-fs, fs, num_clients), rng.uniform(-fs / 2, fs / 2, num_clients)


@dataclass
class ClientShard:
    client_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    provenance: dict = field(default_factory=dict)
    train_idx: Optional[np.ndarray] = None
    test_idx: Optional[np.ndarray] = None

    @property
    def n_train(self) -> int:
        return len(self.train_y)

    def class_histogram(self, num_classes: int) -> list[int]:
        y = np.concatenate([self.train_y, self.test_y])
        return np.bincount(y, minlength=num_classes).tolist()


def to_float(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _upsample(coarse: np.ndarray, size: int) -> np.ndarray:
    g = coarse.shape[0]
    src = np.linspace(0, g - 1, size)
    rows = np.stack([np.interp(src, np.arange(g), coarse[i]) for i in range(g)])
    return np.stack([np.interp(src, np.arange(g), rows[:, j]) for j in range(size)], axis=1)


def class_templates(num_classes: int, image_size: int, channels: int, rng: np.random.Generator,
                    grid: int = 4) -> np.ndarray:
    """Per-class smooth random patterns, each with zero mean and unit pixel std."""
    out = np.empty((num_classes, image_size, image_size, channels))
    for c in range(num_classes):
        for ch in range(channels):
            t = _upsample(rng.standard_normal((grid, grid)), image_size)
            out[c, :, :, ch] = (t - t.mean()) / (t.std() + 1e-12)
    return out


def _largest_remainder(props: np.ndarray, n: int) -> np.ndarray:
    raw = props * n
    counts = np.floor(raw).astype(np.int64)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def stratified_split(labels: np.ndarray, rng: np.random.Generator, test_frac: float = 0.2):
    """Index arrays (train, test); every class with >= 2 samples lands in both."""
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(test_frac * idx.size))
        if idx.size >= 2:
            n_test = min(max(n_test, 1), idx.size - 1)
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def generate_synthetic(num_clients: int, per_client_n: int, image_size: int, num_classes: int,
                       skew: SkewSpec, channels: int = 1, class_sep: float = 0.12,
                       min_per_class: int = 0) -> list[ClientShard]:
    """Template-plus-noise images with Dirichlet label mix and per-client intensity shift.

    ``class_sep`` is the pixel std of each class template; noise std is 0.3.
    A draw where some client has fewer than ``min_per_class`` samples of a
    class is rejected and redrawn.
    """
    if min(num_clients, per_client_n, image_size, num_classes, channels) <= 0:
        raise ValueError("all sizes must be positive")
    rng = np.random.default_rng(skew.seed)
    base = class_templates(1, image_size, channels, rng)[0]
    templates = class_templates(num_classes, image_size, channels, rng)
    for attempt in range(MAX_ATTEMPTS):
        props = rng.dirichlet(np.full(num_classes, skew.alpha), size=num_clients)
        counts = np.stack([_largest_remainder(p, per_client_n) for p in props])
        if counts.min() >= min_per_class:
            break
    else:
        raise StarvationError(f"no admissible label mix after {MAX_ATTEMPTS} draws (alpha={skew.alpha})")
    scales, offsets = skew.affine(num_clients, rng)
    shards = []
    for j in range(num_clients):
        y = np.repeat(np.arange(num_classes), counts[j])
        y = y[rng.permutation(y.size)]
        noise = rng.standard_normal((y.size, image_size, image_size, channels))
        x = 0.5 + 0.15 * base + class_sep * templates[y] + NOISE_STD * noise
        x = scales[j] * x + offsets[j]
        x = to_float(to_bytes(x))
        tr, te = stratified_split(y, rng)
        shards.append(ClientShard(
            j, x[tr], y[tr].astype(np.int64), x[te], y[te].astype(np.int64),
            provenance={"generator": "synthetic", "seed": skew.seed, "alpha": skew.alpha,
                        "scale": float(scales[j]), "offset": float(offsets[j]),
                        "draws": attempt + 1},
        ))
    return shards


def partition_dataset(images: np.ndarray, labels: np.ndarray, num_clients: int, skew: SkewSpec,
                      min_per_class: int = 0) -> list[ClientShard]:
    """Dirichlet label-skew split of an existing dataset, then 80/20 per client.

    Each class is divided across clients by proportions ~ Dir(alpha). Draws
    leaving some client empty (or below ``min_per_class`` of a class) are
    redrawn.
    """
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    if num_clients <= 0:
        raise ValueError("num_clients must be positive")
    if labels.size < num_clients * 2 * max(num_classes, 1):
        raise ValueError(f"{labels.size} samples is too few for {num_clients} clients x {num_classes} classes")
    rng = np.random.default_rng(skew.seed)
    by_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
    by_class = [idx[rng.permutation(idx.size)] for idx in by_class]
    for _ in range(MAX_ATTEMPTS):
        assign: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        counts = np.zeros((num_clients, num_classes), dtype=np.int64)
        for c, idx in enumerate(by_class):
            split = _largest_remainder(rng.dirichlet(np.full(num_clients, skew.alpha)), idx.size)
            counts[:, c] = split
            for j, part in enumerate(np.split(idx, np.cumsum(split)[:-1])):
                assign[j].append(part)
        if counts.sum(axis=1).min() > 0 and counts.min() >= min_per_class:
            break
    else:
        raise StarvationError(f"client starvation persisted after {MAX_ATTEMPTS} draws")
    shards = []
    for j in range(num_clients):
        idx = np.sort(np.concatenate(assign[j]))
        tr, te = stratified_split(labels[idx], rng)
        shards.append(ClientShard(
            j, images[idx[tr]], labels[idx[tr]], images[idx[te]], labels[idx[te]],
            provenance={"generator": "dirichlet_partition", "seed": skew.seed, "alpha": skew.alpha},
            train_idx=idx[tr], test_idx=idx[te],
        ))
    return shards


def reserve_holdout(shards: Sequence[ClientShard], frac: float = 0.1, seed: int = 0):
    """Move ~``frac`` of every client's test set (per class) into a pooled new-test set.

    A class with a single local test sample keeps it local. If rounding leaves
    some class out of the pool, one sample of it is taken from the client
    holding the most, so the pool can be scored whenever that is possible.
    """
    rng = np.random.default_rng([seed, 0xA11])
    picks = []
    for s in shards:
        take = {}
        for c in np.unique(s.test_y):
            idx = np.flatnonzero(s.test_y == c)
            k = min(int(round(frac * idx.size)), idx.size - 1)
            if k > 0:
                take[c] = rng.choice(idx, size=k, replace=False)
        picks.append(take)
    if frac > 0:
        classes = np.unique(np.concatenate([s.test_y for s in shards]))
        for c in classes:
            if any(c in t for t in picks):
                continue
            counts = [int(np.sum(s.test_y == c)) for s in shards]
            j = int(np.argmax(counts))
            if counts[j] >= 2:
                picks[j][c] = rng.choice(np.flatnonzero(shards[j].test_y == c), size=1)
    kept, hx, hy = [], [], []
    for s, take in zip(shards, picks):
        take = np.sort(np.concatenate(list(take.values()))) if take else np.zeros(0, dtype=np.int64)
        mask = np.ones(len(s.test_y), dtype=bool)
        mask[take] = False
        hx.append(s.test_x[take])
        hy.append(s.test_y[take])
        kept.append(replace(s, test_x=s.test_x[mask], test_y=s.test_y[mask],
                            test_idx=None if s.test_idx is None else s.test_idx[mask]))
    return kept, np.concatenate(hx), np.concatenate(hy)


# ---------------------------------------------------------------------------
# FVD1 files


def dataset_bytes(images: np.ndarray, labels: np.ndarray, num_classes: Optional[int] = None) -> bytes:
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[..., None]
    if images.dtype != np.uint8:
        images = to_bytes(images)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4:
        raise DatasetFormatError(f"images must be [n, h, w, ch], got shape {images.shape}")
    n, h, w, ch = images.shape
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    if labels.size and (labels.min() < 0 or labels.max() >= min(num_classes, 256)):
        raise DatasetFormatError("labels must fit in [0, num_classes) and a byte")
    parts = [FVD_MAGIC, struct.pack("<5I", n, h, w, ch, num_classes)]
    flat = images.reshape(n, h * w * ch)
    for i in range(n):
        parts.append(struct.pack("<B", int(labels[i])))
        parts.append(flat[i].tobytes())
    return b"".join(parts)


def save_dataset(path, images, labels, num_classes: Optional[int] = None) -> None:
    Path(path).write_bytes(dataset_bytes(images, labels, num_classes))


def parse_dataset(buf: bytes):
    """Returns (float images in [0,1] shaped [n,h,w,ch], int labels, num_classes)."""
    if len(buf) < 24:
        raise DatasetFormatError(f"file too short for header ({len(buf)} bytes) at byte offset 0")
    if buf[:4] != FVD_MAGIC:
        raise DatasetFormatError("bad magic at byte offset 0")
    n, h, w, ch, num_classes = struct.unpack_from("<5I", buf, 4)
    if n and (h == 0 or w == 0 or ch == 0):
        raise DatasetFormatError("zero image dimension at byte offset 8")
    rec = 1 + h * w * ch
    need = 24 + n * rec
    if len(buf) != need:
        raise DatasetFormatError(f"expected {need} bytes, found {len(buf)} (byte offset {min(len(buf), need)})")
    body = np.frombuffer(buf, dtype=np.uint8, offset=24).reshape(n, rec)
    labels = body[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        raise DatasetFormatError(f"label {labels[i]} out of range [0, {num_classes}) at byte offset {24 + i * rec}")
    pixels = body[:, 1:].reshape(n, h, w, ch)
    return to_float(pixels), labels, num_classes


def load_dataset(path):
    images, labels, _ = parse_dataset(Path(path).read_bytes())
    return images, labels


def shards_to_dataset(shards: Sequence[ClientShard]):
    """Concatenate shards into one array set plus a JSON-able assignment sidecar."""
    xs, ys, meta, off = [], [], [], 0
    for s in shards:
        ntr, nte = len(s.train_y), len(s.test_y)
        xs += [s.train_x, s.test_x]
        ys += [s.train_y, s.test_y]
        meta.append({"client_id": s.client_id,
                     "train": list(range(off, off + ntr)),
                     "test": list(range(off + ntr, off + ntr + nte)),
                     "provenance": s.provenance})
        off += ntr + nte
    return np.concatenate(xs), np.concatenate(ys), {"clients": meta}


def shards_from_sidecar(images: np.ndarray, labels: np.ndarray, sidecar: dict, path: str = "") -> list[ClientShard]:
    out = []
    for c in sidecar["clients"]:
        tr, te = np.asarray(c["train"], dtype=np.int64), np.asarray(c["test"], dtype=np.int64)
        prov = dict(c.get("provenance", {}), path=path)
        out.append(ClientShard(int(c["client_id"]), images[tr], labels[tr], images[te], labels[te],
                               provenance=prov, train_idx=tr, test_idx=te))
    return out


def sidecar_json(sidecar: dict) -> str:
    return json.dumps(sidecar, sort_keys=True, separators=(",", ":")) + "\n"


def skew_to_dict(skew: SkewSpec) -> dict:
    return asdict(skew)
