"""
Checkpoint Service - LVCK binary checkpoint files.

Layout (little-endian): b"LVCK", u16 version, u32 config length, UTF-8 JSON
config blob, u32 parameter count, then per parameter: u16 name length,
UTF-8 name, u8 dtype code (0 = f32, 1 = f64), u8 rank, rank x u32 dims,
raw data.
"""
import json
import math
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from models.checkpoint import Checkpoint
from schemas.network import PairModelConfig
from services import ndtensor as nd
from services.nets import PairModel
from utils.errors import CheckpointFormatError
from utils.logger import logger

MAGIC = b"LVCK"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blob = json.dumps(
        {
            "config": ckpt.config,
            "epoch": ckpt.epoch,
            "metric": None if math.isnan(ckpt.metric) else ckpt.metric,
            "extra": ckpt.extra,
        },
        sort_keys=True,
    ).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob, struct.pack("<I", len(ckpt.params))]
    for name, array in ckpt.params.items():
        array = np.asarray(array)
        code = _CODE_OF.get(array.dtype)
        if code is None:
            raise CheckpointFormatError(f"parameter {name} has unsupported dtype {array.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", code, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw = raw
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(f"{self.source}: truncated checkpoint at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(raw, source)
    magic = reader.take(4)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {magic!r}, expected 'LVCK'")
    version, blob_len = reader.unpack("<HI")
    if version != VERSION:
        raise CheckpointFormatError(f"{source}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(reader.take(blob_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{source}: corrupt config blob ({e})") from e

    (count,) = reader.unpack("<I")
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, rank = reader.unpack("<BB")
        if code not in DTYPE_CODES:
            raise CheckpointFormatError(f"{source}: parameter {name} has unknown dtype code {code}")
        dims = reader.unpack(f"<{rank}I")
        dtype = DTYPE_CODES[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(reader.take(n_bytes), dtype=dtype).reshape(dims)
        params[name] = data.astype(dtype.newbyteorder("="), copy=True)
    if reader.pos != len(raw):
        raise CheckpointFormatError(f"{source}: {len(raw) - reader.pos} trailing bytes after parameters")

    metric = meta.get("metric")
    return Checkpoint(
        config=meta["config"],
        params=params,
        epoch=int(meta["epoch"]),
        metric=math.nan if metric is None else float(metric),
        extra=meta.get("extra", {}),
    )


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(ckpt))
    logger.info(f"Checkpoint written: {path} (epoch {ckpt.epoch}, metric {ckpt.metric:.4f})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f"{path}: cannot read checkpoint ({e})") from e
    return decode_checkpoint(raw, str(path))


def checkpoint_from_model(
    model: PairModel,
    epoch: int,
    metric: float = math.nan,
    train_config: Optional[Dict[str, Any]] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Checkpoint:
    config: Dict[str, Any] = {"model": model.config.model_dump(mode="json")}
    if train_config is not None:
        config["train"] = train_config
    return Checkpoint(config=config, params=model.state_dict(), epoch=epoch, metric=metric, extra=dict(extra or {}))


def model_from_checkpoint(ckpt: Checkpoint) -> PairModel:
    """Rebuild a PairModel whose parameters are bit-identical to the checkpoint's."""
    config = PairModelConfig.model_validate(ckpt.config["model"])
    dtypes = {a.dtype for a in ckpt.params.values()}
    if len(dtypes) != 1:
        raise CheckpointFormatError(f"checkpoint mixes parameter dtypes {sorted(str(d) for d in dtypes)}")
    with nd.precision(str(dtypes.pop())):
        model = PairModel(config.model_copy(update={"freeze_backbone": False}))
    model.load_parameters(ckpt.params)
    if config.freeze_backbone:
        model.freeze_backbone()
    model.config = config
    return model
