"""
File formats shared by every stage.

VTF1 tensor file: b"VTF1", u32 rank, rank x u32 extents, then the float64
payload, all little-endian and row-major.
"""
import csv
import json
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from app.errors import DataError

MAGIC = b"VTF1"
_HEADER = np.dtype("<u4")
_PAYLOAD = np.dtype("<f8")


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype=_PAYLOAD)
    header = np.array([array.ndim, *array.shape], dtype=_HEADER)
    return MAGIC + header.tobytes() + np.ascontiguousarray(array).tobytes()


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if blob[:4] != MAGIC:
        raise DataError(f"{source}: not a VTF1 file (magic {blob[:4]!r})")
    if len(blob) < 8:
        raise DataError(f"{source}: truncated header")
    rank = int(np.frombuffer(blob, dtype=_HEADER, count=1, offset=4)[0])
    offset = 8 + 4 * rank
    if len(blob) < offset:
        raise DataError(f"{source}: truncated extents for rank {rank}")
    shape = tuple(int(v) for v in np.frombuffer(blob, dtype=_HEADER, count=rank, offset=8))
    expected = int(np.prod(shape)) * _PAYLOAD.itemsize
    if len(blob) - offset != expected:
        raise DataError(f"{source}: payload has {len(blob) - offset} bytes, shape {shape} needs {expected}")
    return np.frombuffer(blob, dtype=_PAYLOAD, offset=offset).reshape(shape).astype(np.float64)


def save_tensor(path: Path, array: np.ndarray):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(array))


def load_tensor(path: Path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"Cannot read tensor file {path}: {exc}") from exc
    return decode_tensor(blob, source=str(path))


def write_json(path: Path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"Cannot read JSON file {path}: {exc}") from exc


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(value) for value in row])


def read_csv(path: Path) -> List[Dict[str, str]]:
    try:
        with Path(path).open(newline="") as handle:
            return list(csv.DictReader(handle))
    except OSError as exc:
        raise DataError(f"Cannot read CSV file {path}: {exc}") from exc


def _cell(value):
    # repr keeps full float64 precision so reruns compare byte-for-byte
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (bool, np.bool_)):
        return int(value)
    return value


def save_checkpoint(directory: Path, config: dict, params: Dict[str, np.ndarray]):
    """Write one VTF1 file per tensor plus a manifest naming them and the model config."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(params):
        filename = f"{name}.vtf"
        save_tensor(directory / filename, params[name])
        files[name] = filename
    write_json(directory / "manifest.json", {"format": "VTF1", "config": config, "tensors": files})


def load_checkpoint(directory: Path):
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    if manifest.get("format") != "VTF1" or "tensors" not in manifest:
        raise DataError(f"{directory}: checkpoint manifest is malformed")
    params = {name: load_tensor(directory / filename) for name, filename in manifest["tensors"].items()}
    return manifest["config"], params
