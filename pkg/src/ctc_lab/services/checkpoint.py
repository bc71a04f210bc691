"""
Versioned binary checkpoints of backbone + head parameters.

Layout: magic ``CTCLAB01``, little-endian u32 header length, UTF-8 JSON
header (epoch, stage, whether the representation layer is rectified,
parameter names and shapes in storage order), then
every parameter as row-major little-endian float64.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import structlog

from ..core.errors import DataError, ParseError
from .numerics import Backbone, LinearHead, Params

logger = structlog.get_logger(__name__)

MAGIC = b"CTCLAB01"
_HEADER_LENGTH = struct.Struct("<I")
_FLOAT = np.dtype("<f8")


@dataclass
class Checkpoint:
    params: Params
    epoch: int
    stage: int
    rectify_reps: bool = False
    extra: Dict[str, Any] = field(default_factory=dict)

    def network(self) -> Tuple[Backbone, LinearHead]:
        """Rebuild the backbone and head the parameters came from."""
        layers = sorted(
            int(name.split(".")[1]) for name in self.params
            if name.startswith("backbone.") and name.endswith(".weight")
        )
        backbone = Backbone(
            weights=[self.params[f"backbone.{i}.weight"] for i in layers],
            biases=[self.params[f"backbone.{i}.bias"] for i in layers],
            activate_output=self.rectify_reps,
        )
        head = LinearHead(weight=self.params["head.weight"], bias=self.params["head.bias"])
        return backbone, head


def save_checkpoint(
    path: Union[str, Path],
    params: Params,
    epoch: int,
    stage: int,
    rectify_reps: bool = False,
    extra: Dict[str, Any] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "epoch": epoch,
        "stage": stage,
        "rectify_reps": rectify_reps,
        "parameters": [{"name": name, "shape": list(p.shape)} for name, p in params.items()],
        "extra": extra or {},
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(_HEADER_LENGTH.pack(len(encoded)))
        handle.write(encoded)
        for p in params.values():
            handle.write(np.ascontiguousarray(p, dtype=_FLOAT).tobytes())
    logger.debug("Checkpoint written", path=str(path), epoch=epoch, stage=stage)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint file not found: {path}")
    blob = path.read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise ParseError("not a CTC Lab checkpoint (bad magic)", path=str(path))
    offset = len(MAGIC)
    try:
        (length,) = _HEADER_LENGTH.unpack_from(blob, offset)
        offset += _HEADER_LENGTH.size
        header = json.loads(blob[offset:offset + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}", path=str(path)) from exc
    offset += length

    params: Params = {}
    for entry in header["parameters"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * _FLOAT.itemsize
        if end > len(blob):
            raise ParseError(f"checkpoint truncated in parameter {entry['name']}", path=str(path))
        params[entry["name"]] = np.frombuffer(blob, dtype=_FLOAT, count=count, offset=offset) \
            .reshape(shape).astype(np.float64)
        offset = end
    if offset != len(blob):
        raise ParseError(f"{len(blob) - offset} trailing bytes after parameters", path=str(path))
    return Checkpoint(params=params, epoch=header["epoch"], stage=header["stage"],
                      rectify_reps=bool(header.get("rectify_reps", False)),
                      extra=header.get("extra", {}))
