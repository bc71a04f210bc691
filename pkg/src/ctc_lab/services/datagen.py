"""
Synthetic source/target pairs sharing a latent subspace, CSV ingestion and
the generic augmentation hook.
"""
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
import structlog

from ..core.errors import DataError, DimensionError, ParseError, RangeError
from ..models.config import SharedPatternSpec

logger = structlog.get_logger(__name__)

PathLike = Union[str, Path]


@dataclass
class Dataset:
    """One split of a labelled dataset."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"
    name: str = "dataset"
    # noiseless generating latent, for synthetic data only
    latent: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DimensionError(f"{self.name}: features must be 2-D")
        if self.labels.shape != (self.features.shape[0],):
            raise DimensionError(
                f"{self.name}: {self.labels.shape[0]} labels for {self.features.shape[0]} samples"
            )
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"{self.name}: features contain non-finite values")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"{self.name}: labels outside [0, {self.class_count})")

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass
class DatasetPair:
    train: Dataset
    test: Dataset

    @property
    def name(self) -> str:
        return self.train.name

    @property
    def class_count(self) -> int:
        return max(self.train.class_count, self.test.class_count)


def _draw_split(rng, n, latent_dims, noise_std, mixing):
    latents = [rng.standard_normal((n, d)) for d in latent_dims]
    clean = sum(z @ m.T for z, m in zip(latents, mixing))
    noise = rng.standard_normal(clean.shape) * noise_std
    return latents, clean + noise


def gen_shared_pair(spec: SharedPatternSpec) -> Tuple[DatasetPair, DatasetPair]:
    """Source and target datasets sharing the latent z.

    One orthonormal basis is split into a shared block A and private blocks
    B_s, B_t. Source samples are A z + B_s z_s + noise with labels from a
    random linear partition of (w z, z_s); target samples are A z + B_t z_t +
    noise with labels from a partition of z alone. Every draw comes from one
    generator seeded by spec.seed, in a fixed order.
    """
    rng = np.random.default_rng(spec.seed)
    s, ps, pt = spec.shared_dim, spec.source_private_dim, spec.target_private_dim
    basis, _ = np.linalg.qr(rng.standard_normal((spec.feature_dim, spec.latent_dim)))
    shared = basis[:, :s]
    source_private = basis[:, s:s + ps]
    target_private = basis[:, s + ps:s + ps + pt]
    source_partition = rng.standard_normal((spec.source_classes, s + ps))
    target_partition = rng.standard_normal((spec.target_classes, s))

    def source_split(n: int, split: str) -> Dataset:
        (z, zs), x = _draw_split(rng, n, (s, ps), spec.noise_std, (shared, source_private))
        label_input = np.hstack([spec.source_shared_weight * z, zs])
        labels = np.argmax(label_input @ source_partition.T, axis=1)
        return Dataset(x, labels, spec.source_classes, split, "source", latent=np.hstack([z, zs]))

    def target_split(n: int, split: str) -> Dataset:
        (z, zt), x = _draw_split(rng, n, (s, pt), spec.noise_std, (shared, target_private))
        labels = np.argmax(z @ target_partition.T, axis=1)
        return Dataset(x, labels, spec.target_classes, split, "target", latent=np.hstack([z, zt]))

    source = DatasetPair(source_split(spec.train_samples, "train"), source_split(spec.test_samples, "test"))
    target = DatasetPair(target_split(spec.train_samples, "train"), target_split(spec.test_samples, "test"))
    logger.info(
        "Generated shared-pattern pair",
        seed=spec.seed,
        feature_dim=spec.feature_dim,
        train_samples=spec.train_samples,
        test_samples=spec.test_samples,
    )
    return source, target


_PANDAS_LINE = re.compile(r"line (\d+)")


def load_matrix_csv(
    path: PathLike,
    split: str = "train",
    name: Optional[str] = None,
    class_count: Optional[int] = None,
) -> Dataset:
    """Read a `label,f0,f1,...` CSV into a Dataset.

    Raises:
        ParseError: with the 1-based file line of the first bad row
            (the header is line 1)
        DataError: if the file does not exist
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except pd.errors.EmptyDataError as exc:
        raise ParseError("file is empty", line=1, path=str(path)) from exc
    except pd.errors.ParserError as exc:
        match = _PANDAS_LINE.search(str(exc))
        raise ParseError("row has too many columns", line=int(match.group(1)) if match else None,
                         path=str(path)) from exc

    columns = list(frame.columns)
    expected = ["label"] + [f"f{i}" for i in range(len(columns) - 1)]
    if columns != expected or len(columns) < 2:
        raise ParseError(f"header must be label,f0,f1,... got {','.join(columns)}", line=1,
                         path=str(path))

    raw = frame.to_numpy(dtype=object)
    labels = np.empty(raw.shape[0], dtype=np.int64)
    features = np.empty((raw.shape[0], raw.shape[1] - 1))
    for row, cells in enumerate(raw):
        line = row + 2
        if any(cell is None or (isinstance(cell, float) and np.isnan(cell)) or cell == "" for cell in cells):
            raise ParseError("row has missing columns", line=line, path=str(path))
        try:
            label = float(cells[0])
            values = np.array([float(c) for c in cells[1:]])
        except ValueError as exc:
            raise ParseError(f"non-numeric cell ({exc})", line=line, path=str(path)) from exc
        if not np.isfinite(label) or label != int(label) or label < 0:
            raise ParseError(f"label {cells[0]!r} is not a class index", line=line, path=str(path))
        if class_count is not None and label >= class_count:
            raise ParseError(f"label {int(label)} outside [0, {class_count})", line=line, path=str(path))
        if not np.all(np.isfinite(values)):
            raise ParseError("non-finite feature", line=line, path=str(path))
        labels[row] = int(label)
        features[row] = values

    count = class_count if class_count is not None else (int(labels.max()) + 1 if labels.size else 1)
    dataset_name = name or path.stem.rsplit("_", 1)[0]
    return Dataset(features, labels, count, split, dataset_name)


def save_matrix_csv(dataset: Dataset, path: PathLike) -> Path:
    """Write `dataset` as `label,f0,...` with round-trip float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(dataset.features, columns=[f"f{i}" for i in range(dataset.feature_dim)])
    frame.insert(0, "label", dataset.labels)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return path


def load_pair(prefix: PathLike, class_count: Optional[int] = None) -> DatasetPair:
    """Load `<prefix>_train.csv` and `<prefix>_test.csv`."""
    prefix = Path(prefix)
    name = prefix.name
    train = load_matrix_csv(f"{prefix}_train.csv", "train", name, class_count)
    test = load_matrix_csv(f"{prefix}_test.csv", "test", name, class_count)
    count = max(train.class_count, test.class_count)
    train.class_count = test.class_count = count
    if train.feature_dim != test.feature_dim:
        raise DimensionError(f"{name}: train and test feature counts differ")
    return DatasetPair(train, test)


def save_pair(pair: DatasetPair, prefix: PathLike) -> Tuple[Path, Path]:
    return (
        save_matrix_csv(pair.train, f"{prefix}_train.csv"),
        save_matrix_csv(pair.test, f"{prefix}_test.csv"),
    )


def augment(batch: np.ndarray, strength: float, seed: int) -> np.ndarray:
    """Coordinate dropout at rate clamp(strength/10, 0, 0.5), then Gaussian noise of std strength."""
    if strength < 0:
        raise RangeError("augmentation strength must be nonnegative")
    batch = np.asarray(batch, dtype=np.float64)
    if strength == 0:
        return batch.copy()
    rng = np.random.default_rng(seed)
    rate = min(max(strength / 10.0, 0.0), 0.5)
    keep = rng.random(batch.shape) >= rate
    return batch * keep + rng.normal(0.0, strength, size=batch.shape)


def load_samples_csv(path: PathLike, header: bool = True) -> np.ndarray:
    """Read a purely numeric CSV (optionally with a header row) into a float64 matrix."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"sample file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False,
                            header=0 if header else None)
    except pd.errors.EmptyDataError as exc:
        raise ParseError("file is empty", line=1, path=str(path)) from exc
    except pd.errors.ParserError as exc:
        match = _PANDAS_LINE.search(str(exc))
        raise ParseError("row has too many columns", line=int(match.group(1)) if match else None,
                         path=str(path)) from exc
    first_line = 2 if header else 1
    matrix = np.empty(frame.shape)
    for row, cells in enumerate(frame.to_numpy(dtype=object)):
        try:
            matrix[row] = [float(cell) for cell in cells]
        except (TypeError, ValueError) as exc:
            raise ParseError("missing or non-numeric cell", line=row + first_line,
                             path=str(path)) from exc
    if not np.all(np.isfinite(matrix)):
        raise ParseError("non-finite value", path=str(path))
    return matrix
