"""Datasets: IDX ingestion, a synthetic bimodal generator with known ground
truth, and weak-supervision pairing masks."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_UBYTE = 0x08
IDX_FLOAT = 0x0D
IDX_DOUBLE = 0x0E

_IDX_DTYPES = {
    IDX_UBYTE: (np.dtype(">u1"), 1),
    IDX_FLOAT: (np.dtype(">f4"), 4),
    IDX_DOUBLE: (np.dtype(">f8"), 8),
}


class IdxFormatError(ValueError):
    """Malformed IDX file."""


@dataclass
class MultimodalBatch:
    """Per-modality (B, dim) value arrays plus a (B, N) presence mask.

    Values of absent modalities are zeroed at construction.  Every row must
    keep at least one present modality unless ``allow_empty_rows`` (used only
    for the prior-fallback encode path).
    """

    values: dict
    presence: np.ndarray
    names: tuple = ()
    allow_empty_rows: bool = False

    def __post_init__(self):
        if not self.names:
            self.names = tuple(self.values)
        self.presence = np.asarray(self.presence, dtype=bool)
        n_rows = self.presence.shape[0]
        if self.presence.shape != (n_rows, len(self.names)):
            raise ValueError(
                f"presence shape {self.presence.shape} != ({n_rows}, {len(self.names)})"
            )
        if not self.allow_empty_rows and n_rows and not self.presence.any(axis=1).all():
            raise ValueError("every row needs at least one present modality")
        vals = {}
        for i, name in enumerate(self.names):
            v = np.asarray(self.values[name], dtype=np.float64)
            if v.shape[0] != n_rows:
                raise ValueError(
                    f"modality {name!r} has {v.shape[0]} rows, expected {n_rows}"
                )
            v = v.copy()
            v[~self.presence[:, i]] = 0.0
            vals[name] = v
        self.values = vals

    @property
    def n_rows(self):
        return self.presence.shape[0]

    def select(self, rows):
        return MultimodalBatch(
            values={n: self.values[n][rows] for n in self.names},
            presence=self.presence[rows],
            names=self.names,
            allow_empty_rows=self.allow_empty_rows,
        )

    def restrict(self, keep_names):
        """Mark only ``keep_names`` present (intersected with current presence)."""
        keep = np.array([n in keep_names for n in self.names])
        return MultimodalBatch(
            values=self.values,
            presence=self.presence & keep[None, :],
            names=self.names,
            allow_empty_rows=True,
        )

    def presence_patterns(self):
        """Iterate (pattern tuple, row index array) over distinct presence rows."""
        seen = {}
        for i, row in enumerate(self.presence):
            seen.setdefault(tuple(row), []).append(i)
        for pattern, rows in seen.items():
            yield pattern, np.array(rows)


@dataclass
class Dataset:
    train: MultimodalBatch
    eval: MultimodalBatch
    names: tuple
    prototypes: np.ndarray | None = None
    class_counts: np.ndarray | None = None


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    pattern_dim: int = 16
    flip_noise: float = 0.05
    samples_per_class: int = 250

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.pattern_dim < 8:
            raise ValueError("pattern_dim must be >= 8")
        if not 0.0 <= self.flip_noise <= 0.2:
            raise ValueError("flip_noise must lie in [0, 0.2]")


# IDX ---------------------------------------------------------------------


def load_idx(path, binarize=False, scale=True):
    """Parse a big-endian IDX file into a float64 array.

    Unsigned-byte payloads are scaled to [0, 1] unless ``scale`` is False
    (label files); ``binarize`` additionally thresholds at 0.5 (Bernoulli
    targets).  Float payloads are returned bit-exactly.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    zero1, zero2, dtype_code, rank = struct.unpack(">BBBB", raw[:4])
    if zero1 != 0 or zero2 != 0 or dtype_code not in _IDX_DTYPES:
        raise IdxFormatError(
            f"{path}: bad magic bytes {raw[:4].hex()} at offset 0"
        )
    header_end = 4 + 4 * rank
    if len(raw) < header_end:
        raise IdxFormatError(f"{path}: truncated dimension list at offset 4")
    dims = struct.unpack(f">{rank}I", raw[4:header_end])
    dtype, itemsize = _IDX_DTYPES[dtype_code]
    count = int(np.prod(dims)) if dims else 1
    expected = header_end + count * itemsize
    if len(raw) != expected:
        raise IdxFormatError(
            f"{path}: payload has {len(raw) - header_end} bytes at offset "
            f"{header_end}, expected {count * itemsize}"
        )
    data = np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)
    data = data.astype(np.float64)
    if dtype_code == IDX_UBYTE and scale:
        data = data / 255.0
        if binarize:
            data = (data >= 0.5).astype(np.float64)
    return data


def save_idx(path, array, dtype_code=IDX_DOUBLE):
    """Write an array as big-endian IDX; doubles round-trip bit-exactly."""
    array = np.asarray(array)
    dtype, _ = _IDX_DTYPES[dtype_code]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, dtype_code, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def one_hot(labels, num_classes, offset=0):
    labels = np.asarray(labels, dtype=np.int64) - offset
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(
            f"labels outside [0, {num_classes}) after offset {offset}"
        )
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def load_idx_pair(images_path, labels_path, num_classes=10, label_offset=0, limit=None):
    """MNIST-style (images, labels) IDX files -> fully paired Dataset split 80/20."""
    images = load_idx(images_path, binarize=True)
    labels_raw = load_idx(labels_path, scale=False)
    if images.ndim != 3:
        raise IdxFormatError(f"{images_path}: expected rank 3, got {images.ndim}")
    if labels_raw.ndim != 1:
        raise IdxFormatError(f"{labels_path}: expected rank 1, got {labels_raw.ndim}")
    if limit is not None:
        images = images[:limit]
        labels_raw = labels_raw[:limit]
    n = images.shape[0]
    flat = images.reshape(n, -1)
    labels = one_hot(labels_raw, num_classes, offset=label_offset)
    return _paired_dataset(flat, labels, names=("x1", "x2"))


def _paired_dataset(x1, x2, names, prototypes=None):
    n = x1.shape[0]
    split = int(round(n * 0.8))
    full = np.ones((n, 2), dtype=bool)
    labels = np.argmax(x2, axis=1)
    counts = np.bincount(labels, minlength=x2.shape[1])
    train = MultimodalBatch(
        values={names[0]: x1[:split], names[1]: x2[:split]},
        presence=full[:split],
        names=names,
    )
    ev = MultimodalBatch(
        values={names[0]: x1[split:], names[1]: x2[split:]},
        presence=full[split:],
        names=names,
    )
    return Dataset(train=train, eval=ev, names=names,
                   prototypes=prototypes, class_counts=counts)


# synthetic ----------------------------------------------------------------


def synth_bimodal(spec: SyntheticSpec, seed) -> Dataset:
    """Paired dataset: noisy binary prototype patterns + one-hot class labels.

    Deterministic per seed; the prototype sub-seed is split from the noise
    sub-seed so prototype identity is stable across noise reruns.
    """
    proto_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    proto_rng = np.random.default_rng(proto_ss)
    noise_rng = np.random.default_rng(noise_ss)

    k, p = spec.num_classes, spec.pattern_dim
    while True:
        prototypes = proto_rng.integers(0, 2, size=(k, p)).astype(np.float64)
        if len({tuple(row) for row in prototypes}) == k:
            break

    n = k * spec.samples_per_class
    classes = np.repeat(np.arange(k), spec.samples_per_class)
    flips = noise_rng.random((n, p)) < spec.flip_noise
    x1 = np.abs(prototypes[classes] - flips.astype(np.float64))
    x2 = one_hot(classes, k)

    perm = noise_rng.permutation(n)
    return _paired_dataset(x1[perm], x2[perm], names=("x1", "x2"),
                           prototypes=prototypes)


def pair_mask(batch: MultimodalBatch, matched_fraction, seed) -> MultimodalBatch:
    """Keep both modalities on a ``matched_fraction`` subset; split the rest
    evenly into modality-1-only and modality-2-only rows."""
    if not 0.0 < matched_fraction <= 1.0:
        raise ValueError(f"matched_fraction must lie in (0, 1], got {matched_fraction}")
    if len(batch.names) != 2:
        raise ValueError("pair_mask expects a bimodal batch")
    if not batch.presence.all():
        raise ValueError("pair_mask expects a fully paired batch")
    n = batch.n_rows
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_paired = int(round(matched_fraction * n))
    rest = n - n_paired
    n_first = rest - rest // 2

    presence = np.ones((n, 2), dtype=bool)
    presence[order[n_paired : n_paired + n_first], 1] = False
    presence[order[n_paired + n_first :], 0] = False
    return MultimodalBatch(values=batch.values, presence=presence, names=batch.names)
