"""On-disk formats: checkpoints, trace files, CSV logs and run manifests.

Checkpoint = text manifest ``<path>`` plus blob ``<path>.bin``.

* The manifest's first line is ``AIDFLOW-CHECKPOINT <version>``; the rest is
  JSON with sorted keys (config, training state, tensor table, blob hash).
* The blob starts with ``AIDFLOWB`` and a little-endian uint32 version,
  followed by every tensor as little-endian float32 in table order.

Trace files are line-oriented text: a magic/version line, a JSON header, CSV
records and a ``#END records=<n>`` footer written on close.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError

CHECKPOINT_MAGIC = "AIDFLOW-CHECKPOINT"
BLOB_MAGIC = b"AIDFLOWB"
FORMAT_VERSION = 1
TRACE_MAGIC = "AIDFLOW-TRACE"


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    kind: str  # backbone | aid | lora
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    manifest: dict[str, Any] = field(default_factory=dict)
    state: dict[str, np.ndarray] = field(default_factory=dict)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k], dtype="<f4").tobytes())
        return h.hexdigest()


def _blob_bytes(arrays: list[tuple[str, np.ndarray]]) -> tuple[bytes, list[dict]]:
    buf = io.BytesIO()
    buf.write(BLOB_MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    table = []
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": buf.tell(), "nbytes": len(data)})
        buf.write(data)
    return buf.getvalue(), table


def checkpoint_bytes(ckpt: Checkpoint) -> tuple[bytes, bytes]:
    arrays = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    arrays += [(f"state/{k}", v) for k, v in ckpt.state.items()]
    blob, table = _blob_bytes(arrays)
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "model_config": ckpt.model_config.__dict__,
        "manifest": ckpt.manifest,
        "tensors": table,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "blob_size": len(blob),
    }
    text = f"{CHECKPOINT_MAGIC} {FORMAT_VERSION}\n" + json.dumps(doc, sort_keys=True, indent=1) + "\n"
    return text.encode(), blob


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    manifest, blob = checkpoint_bytes(ckpt)
    atomic_write(str(path) + ".bin", blob)
    atomic_write(path, manifest)
    return path


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> Checkpoint:
    path = Path(path)
    blob_path = Path(str(path) + ".bin")
    if not path.is_file():
        raise CheckpointError(f"checkpoint manifest not found: {path}")
    if not blob_path.is_file():
        raise CheckpointError(f"checkpoint blob not found: {blob_path}")
    text = path.read_text()
    first, _, body = text.partition("\n")
    parts = first.split()
    if len(parts) != 2 or parts[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint manifest (bad magic line)")
    if parts[1] != str(FORMAT_VERSION):
        raise CheckpointError(
            f"{path} has format version {parts[1]}; this build reads version {FORMAT_VERSION}. "
            "Migrate the file explicitly; it will not be reinterpreted."
        )
    try:
        doc = json.loads(body)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: manifest JSON is corrupted ({exc})") from None
    blob = blob_path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != doc.get("blob_sha256") or len(blob) != doc.get("blob_size"):
        raise CheckpointError(f"{blob_path}: content hash mismatch (truncated or modified file)")
    if blob[: len(BLOB_MAGIC)] != BLOB_MAGIC or struct.unpack("<I", blob[8:12])[0] != FORMAT_VERSION:
        raise CheckpointError(f"{blob_path}: bad blob header")
    if expect_kind is not None and doc["kind"] != expect_kind:
        raise CheckpointError(f"{path} holds a '{doc['kind']}' checkpoint, expected '{expect_kind}'")
    params, state = {}, {}
    for entry in doc["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(entry["shape"], dtype=np.int64)), offset=entry["offset"])
        arr = arr.reshape(entry["shape"]).astype(np.float32)
        kind, _, name = entry["name"].partition("/")
        (params if kind == "param" else state)[name] = arr
    return Checkpoint(doc["kind"], ModelConfig(**doc["model_config"]), params, doc["manifest"], state)


# ---------------------------------------------------------------------------
# trace files


class TraceWriter:
    """Append-only record file; the footer (and so validity) appears on close."""

    def __init__(self, path: str | Path, kind: str, columns: list[str], header: dict | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.columns = columns
        self.count = 0
        self._tmp = self.path.with_name(self.path.name + ".partial")
        self._fh = open(self._tmp, "w", newline="")
        self._fh.write(f"{TRACE_MAGIC} {FORMAT_VERSION} {kind}\n")
        self._fh.write(json.dumps({"columns": columns, **(header or {})}, sort_keys=True) + "\n")
        self._writer = csv.writer(self._fh, lineterminator="\n")

    def append(self, row: Iterable) -> None:
        self._writer.writerow([_fmt(v) for v in row])
        self.count += 1

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.write(f"#END records={self.count}\n")
        self._fh.close()
        os.replace(self._tmp, self.path)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self._fh.close()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_trace(path: str | Path) -> tuple[str, dict, list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"trace file not found: {path}")
    lines = path.read_text().splitlines()
    if len(lines) < 3:
        raise CheckpointError(f"{path}: truncated trace file")
    parts = lines[0].split()
    if len(parts) != 3 or parts[0] != TRACE_MAGIC:
        raise CheckpointError(f"{path}: not a trace file")
    if parts[1] != str(FORMAT_VERSION):
        raise CheckpointError(f"{path}: trace format version {parts[1]} unsupported (reader is {FORMAT_VERSION})")
    header = json.loads(lines[1])
    footer = lines[-1]
    if not footer.startswith("#END records="):
        raise CheckpointError(f"{path}: missing footer; file was not closed")
    body = list(csv.reader(lines[2:-1]))
    if int(footer.split("=", 1)[1]) != len(body):
        raise CheckpointError(f"{path}: footer count {footer} does not match {len(body)} records")
    return parts[2], header, body


# ---------------------------------------------------------------------------
# CSV logs and manifests


def write_csv(path: str | Path, columns: list[str], rows: Iterable[Iterable]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write(path, buf.getvalue().encode())


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_run_manifest(out_dir: str | Path, command: str, config: dict, seed: int, wall_time: float, extra: dict | None = None) -> Path:
    doc = {
        "format": f"{CHECKPOINT_MAGIC}-RUN {FORMAT_VERSION}",
        "command": command,
        "config": config,
        "seed": seed,
        "git_describe": git_describe(),
        "wall_time_s": wall_time,
        **(extra or {}),
    }
    path = Path(out_dir) / "run_manifest.json"
    atomic_write(path, (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode())
    return path


# ---------------------------------------------------------------------------
# dataset records


def write_dataset(path: str | Path, examples) -> None:
    """Flat record file: one example per row (color, count, tokens, placement, codes)."""
    buf = io.StringIO()
    buf.write(f"{TRACE_MAGIC} {FORMAT_VERSION} dataset\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["color", "count", "tokens", "placement", "codes"])
    for ex in examples:
        w.writerow(
            [
                ex.prompt.color,
                ex.prompt.count,
                " ".join(map(str, ex.prompt.tokens)),
                " ".join(map(str, ex.placement)),
                " ".join(map(str, ex.grid.codes.reshape(-1))),
            ]
        )
    buf.write(f"#END records={len(examples)}\n")
    atomic_write(path, buf.getvalue().encode())


def read_dataset(path: str | Path):
    from .toydata import Example, ToyGrid, ToyPrompt

    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(f"{TRACE_MAGIC} {FORMAT_VERSION} dataset"):
        raise CheckpointError(f"{path}: not a dataset file")
    rows = list(csv.reader(lines[2:-1]))
    if lines[-1] != f"#END records={len(rows)}":
        raise CheckpointError(f"{path}: footer does not match record count")
    out = []
    for color, count, toks, place, codes in rows:
        flat = np.array([int(v) for v in codes.split()], dtype=np.int64)
        g = int(round(len(flat) ** 0.5))
        out.append(
            Example(
                ToyPrompt(int(color), int(count), tuple(int(v) for v in toks.split())),
                ToyGrid(flat.reshape(g, g)),
                tuple(int(v) for v in place.split()),
            )
        )
    return out
