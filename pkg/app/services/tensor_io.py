"""
tensor_io.py
NFTN binary tensor files used for checkpoints, datasets and sample dumps.

Layout: magic "NFTN" | version u32 | rank u32 | dims u32[rank] | payload f64 (all little-endian).
"""

from __future__ import annotations

import logging
import traceback
from pathlib import Path

import numpy as np
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from app.config import get_settings
from app.errors import DataFormatError

logger = logging.getLogger(__name__)

MAGIC = b"NFTN"
VERSION = 1
_U32 = np.dtype("<u4")
_F64 = np.dtype("<f8")


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype=np.float64)
    header = np.array([VERSION, arr.ndim, *arr.shape], dtype=_U32).tobytes()
    return MAGIC + header + np.ascontiguousarray(arr, dtype=_F64).tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise DataFormatError("not an NFTN tensor (bad magic)")
    version, rank = np.frombuffer(blob, dtype=_U32, count=2, offset=4)
    if version != VERSION:
        raise DataFormatError(f"unsupported NFTN version {int(version)}")
    header_end = 12 + 4 * int(rank)
    if len(blob) < header_end:
        raise DataFormatError("truncated NFTN header")
    dims = tuple(int(d) for d in np.frombuffer(blob, dtype=_U32, count=int(rank), offset=12))
    count = int(np.prod(dims)) if dims else 1
    if len(blob) != header_end + 8 * count:
        raise DataFormatError(
            f"NFTN payload holds {len(blob) - header_end} bytes, expected {8 * count}"
        )
    data = np.frombuffer(blob, dtype=_F64, count=count, offset=header_end)
    return data.astype(np.float64).reshape(dims)


# ── Retry helper ─────────────────────────────────────────────────────────────
@retry(
    retry=retry_if_exception_type(OSError),
    stop=stop_after_attempt(get_settings().IO_RETRY_ATTEMPTS),
    wait=wait_exponential(multiplier=0.1, min=0.1, max=2),
    reraise=True,
)
def _write_bytes(path: Path, blob: bytes) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(blob)
        tmp.replace(path)
    except OSError as exc:
        logger.error("❌ write failed for %s: %s\n%s", path, exc, traceback.format_exc())
        raise


def write_tensor(path: str | Path, array: np.ndarray) -> Path:
    path = Path(path)
    _write_bytes(path, encode_tensor(array))
    logger.debug("   wrote %s shape=%s", path, np.shape(array))
    return path


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        logger.error("❌ read failed for %s: %s", path, exc)
        raise
    return decode_tensor(blob)


def write_bytes(path: str | Path, blob: bytes) -> Path:
    """Retried write for non-tensor artifacts (manifests, images)."""
    path = Path(path)
    _write_bytes(path, blob)
    return path
