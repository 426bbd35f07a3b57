"""Covariance datasets: binary sample files with a JSON index, a synthetic
class-structured SPD generator, stratified splits, and batching.

On-disk layout of a dataset directory:

    index.json   {"dim": n, "classes": C,
                  "samples": [{"path": "...", "label": k}, ...]}
    <sample>     magic "SPD1", uint32 LE n, then n*n float64 LE row-major

CSV import reads one file per sample: a header line with n, then n rows of
comma-separated reals.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import manifold
from .errors import ContractError, DataError
from .manifold import exp_map, sym_part

log = logging.getLogger("spdnas")

_MAGIC = b"SPD1"
# eigenvalues in (-1e-10, 1e-12] are lifted by adding LIFT*I; below that the
# sample is rejected
_REJECT_FLOOR = -1e-10
_LIFT_CEIL = 1e-12
_LIFT = 1e-10


def substream(seed: int, name: str) -> np.random.Generator:
    """A named, reproducible random stream derived from the master seed."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF,
                                zlib.crc32(name.encode("utf-8"))]))


@dataclass
class Sample:
    """One labelled SPD matrix."""

    matrix: np.ndarray
    label: int


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test fractions plus the shuffle seed."""

    fractions: tuple = (0.5, 0.25, 0.25)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f <= 0 for f in self.fractions):
            raise ContractError("split fractions must be three positive numbers")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ContractError(f"split fractions must sum to 1, got {self.fractions}")


class Splits(NamedTuple):
    train: list
    val: list
    test: list


# ---------------------------------------------------------------------------
# binary sample files

def write_sample(path: Path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[0]
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", n))
        f.write(np.ascontiguousarray(matrix, dtype="<f8").tobytes())


def read_sample(path: Path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: bad magic at byte 0 (expected 'SPD1')")
    if len(blob) < 8:
        raise DataError(f"{path}: truncated header at byte {len(blob)}")
    (n,) = struct.unpack_from("<I", blob, 4)
    need = 8 + 8 * n * n
    if len(blob) != need:
        raise DataError(
            f"{path}: expected {need} bytes for a {n}x{n} sample, got "
            f"{len(blob)} (offset {min(len(blob), need)})"
        )
    return np.frombuffer(blob, dtype="<f8", count=n * n, offset=8).reshape(n, n).copy()


def read_sample_csv(path: Path) -> np.ndarray:
    """CSV import: first line n, then n comma-separated rows."""
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    except OSError as e:
        raise DataError(f"{path}: {e}") from e
    try:
        n = int(lines[0].strip())
        rows = [[float(v) for v in ln.split(",")] for ln in lines[1:n + 1]]
    except (ValueError, IndexError) as e:
        raise DataError(f"{path}: malformed CSV sample: {e}") from e
    if len(rows) != n or any(len(r) != n for r in rows):
        raise DataError(f"{path}: expected {n} rows of {n} values")
    return np.array(rows, dtype=np.float64)


def _validate_sample(X: np.ndarray, origin: str) -> np.ndarray:
    """Symmetrize, then enforce the SPD loading contract.

    The smallest eigenvalue must exceed -1e-10; values at or below 1e-12
    are lifted by adding 1e-10 * I (logged), so downstream eigenvalue
    domains are safe after rectification.
    """
    X = sym_part(np.asarray(X, dtype=np.float64))
    lo = float(np.min(np.linalg.eigvalsh(X)))
    if lo <= _REJECT_FLOOR:
        raise DataError(f"{origin}: not SPD (min eigenvalue {lo:.3e})")
    if lo <= _LIFT_CEIL:
        log.info("%s: lifting spectrum by %.0e*I (min eigenvalue %.3e)",
                 origin, _LIFT, lo)
        X = X + _LIFT * np.eye(X.shape[0])
    return X


def load_dataset(directory, workers: int = 1) -> list[Sample]:
    """Load and validate every sample referenced by index.json.

    ``workers > 1`` parallelizes file loading across a thread pool; the
    returned order always matches the index.
    """
    directory = Path(directory)
    index_path = directory / "index.json"
    try:
        index = json.loads(index_path.read_text())
    except OSError as e:
        raise DataError(f"{index_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{index_path}: invalid JSON at byte {e.pos}") from e
    for key in ("dim", "classes", "samples"):
        if key not in index:
            raise DataError(f"{index_path}: missing key {key!r}")
    n, classes = index["dim"], index["classes"]

    def load_one(entry) -> Sample:
        path = directory / entry["path"]
        ext = path.suffix.lower()
        X = read_sample_csv(path) if ext == ".csv" else read_sample(path)
        if X.shape != (n, n):
            raise DataError(f"{path}: sample is {X.shape}, index says {n}x{n}")
        label = int(entry["label"])
        if not 0 <= label < classes:
            raise DataError(f"{path}: label {label} outside [0, {classes})")
        return Sample(_validate_sample(X, str(path)), label)

    if workers > 1 and len(index["samples"]) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(load_one, index["samples"]))
    else:
        samples = [load_one(e) for e in index["samples"]]
    seen = {s.label for s in samples}
    if samples and seen != set(range(classes)):
        raise DataError(
            f"{index_path}: labels must be contiguous from 0, got {sorted(seen)}"
        )
    return samples


def save_dataset(samples: Sequence[Sample], directory, classes: int | None = None) -> None:
    """Write samples and an index.json into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if classes is None:
        classes = max(s.label for s in samples) + 1
    entries = []
    width = len(str(max(len(samples) - 1, 1)))
    for i, s in enumerate(samples):
        name = f"sample_{i:0{width}d}.spd"
        write_sample(directory / name, s.matrix)
        entries.append({"path": name, "label": int(s.label)})
    index = {"dim": int(samples[0].matrix.shape[0]), "classes": int(classes),
             "samples": entries}
    (directory / "index.json").write_text(json.dumps(index, indent=1))


# ---------------------------------------------------------------------------
# synthetic generator

def synth_generate(classes: int, dim: int, per_class: int, sigma: float,
                   seed: int) -> list[Sample]:
    """Class-structured random SPD data.

    Each class gets a base point B_c = A_c A_c^T + I from a standard-normal
    draw; samples are exp_map(B_c, sigma * S) with S a symmetrized
    standard-normal matrix scaled by 1/dim.  Deterministic in the seed.
    """
    if classes < 2 or dim < 2 or per_class < 1:
        raise ContractError("synth_generate needs classes >= 2, dim >= 2, per_class >= 1")
    rng = substream(seed, "synth")
    samples = []
    for c in range(classes):
        A = rng.standard_normal((dim, dim))
        base = A @ A.T + np.eye(dim)
        for _ in range(per_class):
            S = sym_part(rng.standard_normal((dim, dim))) / dim
            X = exp_map(base, sigma * S) if sigma != 0.0 else base.copy()
            samples.append(Sample(X, c))
    return samples


# ---------------------------------------------------------------------------
# splits and batches

def split_dataset(samples: Sequence[Sample], spec: SplitSpec) -> Splits:
    """Stratified, seeded split; per-class counts match the fractions to
    within one sample and the three parts are disjoint and exhaustive."""
    rng = substream(spec.seed, "split")
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    parts: tuple[list, list, list] = ([], [], [])
    f_train, f_val, _ = spec.fractions
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        rng.shuffle(idx)
        m = len(idx)
        n_train = int(round(f_train * m))
        n_val = int(round(f_val * m))
        n_val = min(n_val, m - n_train)
        cuts = (idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:])
        for part, cut in zip(parts, cuts):
            part.extend(samples[i] for i in cut)
    return Splits(*parts)


def batches(samples: Sequence[Sample], batch_size: int,
            rng: np.random.Generator | None = None) -> list[list[Sample]]:
    """Split into batches, optionally shuffling first; the final short
    batch is kept."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if rng is not None:
        rng.shuffle(order)
    return [[samples[i] for i in order[lo:lo + batch_size]]
            for lo in range(0, len(samples), batch_size)]


def batch_arrays(batch: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.matrix for s in batch])
    y = np.array([s.label for s in batch], dtype=np.int64)
    return X, y


def nearest_neighbor_accuracy(train: Sequence[Sample], test: Sequence[Sample]) -> float:
    """1-NN classification under the affine-invariant distance (oracle for
    checking that generated data carries learnable class structure)."""
    train_stack = np.stack([s.matrix for s in train])
    train_labels = np.array([s.label for s in train])
    hits = 0
    for s in test:
        isq = manifold.spd_fn(s.matrix, "invsqrt")
        inner = sym_part(isq @ train_stack @ isq)
        lam = np.linalg.eigvalsh(inner)
        d = np.sum(np.log(lam) ** 2, axis=-1)
        hits += int(train_labels[int(np.argmin(d))] == s.label)
    return hits / len(test)
