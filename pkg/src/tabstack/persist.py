"""Atomic file writes, seed derivation, checkpoint bookkeeping, OOF storage.

Every state file is written temp-then-rename so a kill mid-write never
leaves a torn file; the checkpoint carries a sha256 per model file so resume
can refuse corrupted state.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CorruptCheckpointError

CHECKPOINT_NAME = "checkpoint.json"
FORMAT_VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj) -> None:
    payload = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, payload.encode("utf-8"))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def derive_seed(root: int, *parts) -> int:
    """Counter-style seed derivation: stable, collision-resistant, < 2^32."""
    key = "|".join([str(root), *map(str, parts)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**32)


def save_oof(path_base, oof_repeats, coverage) -> None:
    """Write per-repeat OOF matrices as raw float64 plus a JSON header.

    path_base has no extension; .bin and .json are derived from it.
    """
    stack = np.stack(oof_repeats).astype(np.float64)
    cov = np.stack(coverage).astype(np.uint8)
    atomic_write_bytes(f"{path_base}.bin", stack.tobytes() + cov.tobytes())
    header = {
        "repeats": int(stack.shape[0]),
        "rows": int(stack.shape[1]),
        "out_dim": int(stack.shape[2]),
        "dtype": "float64",
    }
    atomic_write_json(f"{path_base}.json", header)


def load_oof(path_base):
    header = read_json(f"{path_base}.json")
    shape = (header["repeats"], header["rows"], header["out_dim"])
    n_pred = int(np.prod(shape))
    with open(f"{path_base}.bin", "rb") as fh:
        raw = fh.read()
    preds = np.frombuffer(raw[: n_pred * 8], dtype=np.float64).reshape(shape).copy()
    cov = (
        np.frombuffer(raw[n_pred * 8 :], dtype=np.uint8)
        .reshape(shape[0], shape[1])
        .astype(bool)
    )
    return [preds[i] for i in range(shape[0])], [cov[i] for i in range(shape[0])]


@dataclass
class CheckpointEntry:
    layer: int
    family: str
    repeat: int
    fold: int
    path: str  # relative to the run directory
    sha256: str
    seconds: float
    seed: int
    rows: int = 0  # training rows of the fit, for cost estimation on resume
    cols: int = 0


@dataclass
class Checkpoint:
    """Append-only record of completed fold fits plus run decisions.

    Decisions (layer budgets, skips, adaptive repeat counts, layer closes,
    completion) are replayed on resume so a resumed run makes the same
    choices the original made, independent of the new wall clock.
    """

    root_seed: int
    entries: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    elapsed: float = 0.0
    version: int = FORMAT_VERSION

    def key_set(self) -> set:
        return {(e.layer, e.family, e.repeat, e.fold) for e in self.entries}

    def has(self, layer: int, family: str, repeat: int, fold: int) -> bool:
        return (layer, family, repeat, fold) in self.key_set()

    def entry(self, layer: int, family: str, repeat: int, fold: int):
        for e in self.entries:
            if (e.layer, e.family, e.repeat, e.fold) == (layer, family, repeat, fold):
                return e
        return None

    def entries_for(self, layer: int, family: str) -> list:
        return [e for e in self.entries if e.layer == layer and e.family == family]

    def record(self, event: dict) -> None:
        self.decisions.append(event)

    def find_decision(self, event_name: str, **match):
        for d in self.decisions:
            if d.get("event") != event_name:
                continue
            if all(d.get(k) == v for k, v in match.items()):
                return d
        return None

    def save(self, run_dir) -> None:
        payload = {
            "version": self.version,
            "root_seed": self.root_seed,
            "elapsed": self.elapsed,
            "entries": [asdict(e) for e in self.entries],
            "decisions": self.decisions,
        }
        atomic_write_json(os.path.join(run_dir, CHECKPOINT_NAME), payload)

    @classmethod
    def load(cls, run_dir) -> "Checkpoint":
        path = os.path.join(run_dir, CHECKPOINT_NAME)
        if not os.path.exists(path):
            raise CorruptCheckpointError(f"no {CHECKPOINT_NAME} in {run_dir}")
        try:
            payload = read_json(path)
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CorruptCheckpointError(f"unreadable checkpoint: {exc}") from None
        if payload.get("version") != FORMAT_VERSION:
            raise CorruptCheckpointError(
                f"checkpoint version {payload.get('version')} unsupported"
            )
        return cls(
            root_seed=int(payload["root_seed"]),
            entries=[CheckpointEntry(**e) for e in payload["entries"]],
            decisions=list(payload["decisions"]),
            elapsed=float(payload["elapsed"]),
        )

    def verify_files(self, run_dir) -> None:
        """Hash-check every referenced model file; raise naming the first bad one."""
        for e in self.entries:
            full = os.path.join(run_dir, e.path)
            ident = f"layer={e.layer} family={e.family} repeat={e.repeat} fold={e.fold}"
            if not os.path.exists(full):
                raise CorruptCheckpointError(f"missing model file for {ident}: {e.path}")
            digest = sha256_file(full)
            if digest != e.sha256:
                raise CorruptCheckpointError(
                    f"hash mismatch for {ident}: {e.path} "
                    f"(expected {e.sha256[:12]}..., found {digest[:12]}...)"
                )
