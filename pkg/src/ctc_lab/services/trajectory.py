"""
Trajectory persistence: trajectory.csv for plotting, trajectory.json at full fidelity.
"""
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from pydantic import ValidationError

from ..core.errors import DataError, ParseError
from ..models.records import Trajectory

logger = structlog.get_logger(__name__)

CSV_NAME = "trajectory.csv"
JSON_NAME = "trajectory.json"
BASE_COLUMNS = ["epoch", "stage", "train_loss", "test_loss", "r_at_1", "nmi"]


def trajectory_columns(targets: List[str], datasets: List[str]) -> List[str]:
    return (
        BASE_COLUMNS
        + [f"probe_{t}" for t in targets]
        + [f"ixt_{d}" for d in datasets]
        + [f"ity_{d}" for d in datasets]
    )


def trajectory_frame(trajectory: Trajectory) -> pd.DataFrame:
    columns = trajectory_columns(trajectory.targets, trajectory.datasets)
    rows = []
    for record in trajectory.records:
        row = {
            "epoch": record.epoch,
            "stage": record.stage,
            "train_loss": record.train_loss,
            "test_loss": record.test_loss,
            "r_at_1": record.r_at_1,
            "nmi": record.nmi,
        }
        for target in trajectory.targets:
            row[f"probe_{target}"] = record.probe.get(target)
        for dataset in trajectory.datasets:
            ixt = record.ixt.get(dataset)
            ity = record.ity.get(dataset)
            row[f"ixt_{dataset}"] = ixt.value if ixt is not None else None
            row[f"ity_{dataset}"] = ity.value if ity is not None else None
        rows.append(row)
    frame = pd.DataFrame(rows, columns=columns)
    return frame.astype({"epoch": "Int64", "stage": "Int64"})


def emit_trajectory(trajectory: Trajectory, output_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """Write trajectory.csv and trajectory.json into `output_dir`."""
    output_dir = Path(output_dir)
    csv_path = output_dir / CSV_NAME
    json_path = output_dir / JSON_NAME
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        trajectory_frame(trajectory).to_csv(
            csv_path, index=False, float_format="%.17g", na_rep="", lineterminator="\n"
        )
        json_path.write_text(trajectory.json(indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write trajectory to {exc.filename or output_dir}: {exc.strerror}") from exc
    logger.info("Trajectory written", path=str(output_dir), records=len(trajectory.records))
    return csv_path, json_path


def load_trajectory(path: Union[str, Path]) -> Trajectory:
    """Read trajectory.json (or the JSON next to a trajectory.csv)."""
    path = Path(path)
    if path.suffix == ".csv":
        path = path.with_name(JSON_NAME)
    try:
        return Trajectory.parse_file(path)
    except FileNotFoundError as exc:
        raise DataError(f"trajectory file not found: {path}") from exc
    except ValidationError as exc:
        raise ParseError(f"invalid trajectory: {exc}", path=str(path)) from exc


def read_trajectory_csv(path: Union[str, Path]) -> pd.DataFrame:
    """Parse a trajectory.csv, validating columns and numeric cells.

    Raises:
        ParseError: naming the file line (header is line 1) of the first bad row
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"trajectory file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as exc:
        raise ParseError("file is empty", line=1, path=str(path)) from exc
    except pd.errors.ParserError as exc:
        raise ParseError(f"malformed CSV: {exc}", path=str(path)) from exc

    columns = list(frame.columns)
    if columns[:len(BASE_COLUMNS)] != BASE_COLUMNS:
        raise ParseError(f"header must start with {','.join(BASE_COLUMNS)}", line=1, path=str(path))
    for column in columns[len(BASE_COLUMNS):]:
        if not column.startswith(("probe_", "ixt_", "ity_")):
            raise ParseError(f"unexpected column {column!r}", line=1, path=str(path))

    parsed = {}
    for column in columns:
        values = np.full(len(frame), np.nan)
        for row, cell in enumerate(frame[column]):
            if isinstance(cell, float) or cell == "":
                if column in BASE_COLUMNS:
                    raise ParseError(f"missing value in column {column!r}", line=row + 2, path=str(path))
                continue
            try:
                values[row] = float(cell)
            except ValueError as exc:
                raise ParseError(f"non-numeric value {cell!r} in column {column!r}", line=row + 2,
                                 path=str(path)) from exc
        parsed[column] = values
    result = pd.DataFrame(parsed, columns=columns)
    return result.astype({"epoch": "int64", "stage": "int64"})
