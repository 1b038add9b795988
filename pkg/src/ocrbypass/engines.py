"""Black-box OCR backends behind one recognize interface.

Provides the deterministic simulated template-matching engine, subprocess and
HTTP adapters for external engines, an append-only query ledger (the
authoritative budget record), and a persistent response cache.
"""

from __future__ import annotations

import hashlib
import io
import json
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import requests
from PIL import Image

from .synthdoc import MARGIN, GlyphAtlas

__all__ = [
    "PHASES",
    "BackendError",
    "OcrBackendDescriptor",
    "LedgerEntry",
    "QueryLedger",
    "SimulatedEngineConfig",
    "SimulatedEngine",
    "SubprocessBackend",
    "HttpBackend",
    "ResponseCache",
    "simulated_recognize",
    "recognize",
    "cached_recognize",
    "image_hash",
]

PHASES = ("pretrain_prepass", "train", "eval")


class BackendError(RuntimeError):
    """Transport or protocol failure of an OCR backend (the query was still paid)."""

    def __init__(self, backend_id: str, message: str, status: int | None = None):
        super().__init__(f"[{backend_id}] {message}")
        self.backend_id = backend_id
        self.status = status


@dataclass(frozen=True)
class OcrBackendDescriptor:
    backend_id: str
    cost_per_query: float = 0.0

    def __post_init__(self) -> None:
        if self.cost_per_query < 0:
            raise ValueError("cost_per_query must be >= 0")


@dataclass(frozen=True)
class LedgerEntry:
    backend_id: str
    phase: str
    sample_id: str
    epoch: int
    cost: float


class QueryLedger:
    """Append-only record of every black-box query; the budget ground truth."""

    def __init__(self) -> None:
        self._entries: list[LedgerEntry] = []
        self._lock = threading.Lock()

    def append(self, backend_id: str, phase: str, sample_id: str, epoch: int, cost: float) -> None:
        if phase not in PHASES:
            raise ValueError(f"unknown ledger phase {phase!r}, expected one of {PHASES}")
        with self._lock:
            self._entries.append(LedgerEntry(backend_id, phase, sample_id, int(epoch), float(cost)))

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    def total_queries(self, phase: str | None = None) -> int:
        if phase is None:
            return len(self._entries)
        return sum(1 for e in self._entries if e.phase == phase)

    def total_cost(self, phase: str | None = None) -> float:
        return sum(e.cost for e in self._entries if phase is None or e.phase == phase)

    def queries_by_epoch(self, phase: str = "train") -> dict[int, int]:
        out: dict[int, int] = {}
        for e in self._entries:
            if e.phase == phase:
                out[e.epoch] = out.get(e.epoch, 0) + 1
        return out

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            fh.write("backend_id,phase,sample_id,epoch,cost\n")
            for e in self._entries:
                fh.write(f"{e.backend_id},{e.phase},{e.sample_id},{e.epoch},{e.cost}\n")


class OcrBackend(Protocol):
    descriptor: OcrBackendDescriptor

    def recognize_image(self, image: np.ndarray) -> str: ...


@dataclass(frozen=True)
class SimulatedEngineConfig:
    """Template-matching engine: binarize, cut fixed-width cells, match glyphs."""

    atlas: GlyphAtlas
    binarize_threshold: float = 0.5
    reject_distance: float = 0.18
    margin: int = MARGIN

    def __post_init__(self) -> None:
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ValueError("binarize_threshold must be in (0, 1)")
        if self.reject_distance < 0:
            raise ValueError("reject_distance must be >= 0")


def simulated_recognize(cfg: SimulatedEngineConfig, image: np.ndarray) -> str:
    """Deterministic template matcher standing in for a black-box OCR engine.

    Binarizes at the threshold, strips the margins, splits the interior into
    glyph-width cells (a trailing partial cell is ignored), and emits for each
    cell the alphabetically-first glyph of minimal normalized mismatch, or
    nothing when the best mismatch exceeds reject_distance.
    """
    atlas = cfg.atlas
    gh, gw, m = atlas.glyph_height, atlas.glyph_width, cfg.margin
    if image.shape[0] < gh:
        raise ValueError(f"image height {image.shape[0]} is below the glyph height {gh}")
    chars = sorted(atlas.glyphs)
    templates = np.stack([atlas.glyphs[c] for c in chars])  # (K, gh, gw)

    ink = image < cfg.binarize_threshold
    interior = ink[m : m + gh, m : max(m, image.shape[1] - m)]
    n_cells = interior.shape[1] // gw
    out = []
    for cell_idx in range(n_cells):
        cell = interior[:, cell_idx * gw : (cell_idx + 1) * gw]
        mismatch = np.mean(cell[None, :, :] != templates, axis=(1, 2))
        best = int(np.argmin(mismatch))  # argmin takes the first = alphabetical tie-break
        if mismatch[best] <= cfg.reject_distance:
            out.append(chars[best])
    return "".join(out)


class SimulatedEngine:
    """Local, free, deterministic OCR backend (pure function of config and pixels)."""

    def __init__(self, cfg: SimulatedEngineConfig, backend_id: str = "simulated",
                 cost_per_query: float = 0.0):
        self.cfg = cfg
        self.descriptor = OcrBackendDescriptor(backend_id=backend_id, cost_per_query=cost_per_query)

    def recognize_image(self, image: np.ndarray) -> str:
        return simulated_recognize(self.cfg, image)


def _png_bytes(image: np.ndarray) -> bytes:
    data = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data, mode="L").save(buf, format="PNG")
    return buf.getvalue()


class SubprocessBackend:
    """Adapter running an external OCR command on a temporary PNG.

    The command template contains an `{image}` placeholder; recognized text is
    the command's trimmed standard output.
    """

    def __init__(self, command_template: str, backend_id: str = "subprocess",
                 cost_per_query: float = 0.0, timeout: float = 30.0):
        self.command_template = command_template
        self.timeout = timeout
        self.descriptor = OcrBackendDescriptor(backend_id=backend_id, cost_per_query=cost_per_query)

    def recognize_image(self, image: np.ndarray) -> str:
        with tempfile.NamedTemporaryFile(suffix=".png", delete=True) as tmp:
            tmp.write(_png_bytes(image))
            tmp.flush()
            argv = [tok.replace("{image}", tmp.name) for tok in shlex.split(self.command_template)]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except subprocess.TimeoutExpired as exc:
                raise BackendError(self.descriptor.backend_id,
                                   f"command timed out after {self.timeout}s") from exc
            except OSError as exc:
                raise BackendError(self.descriptor.backend_id, f"failed to run command: {exc}") from exc
        if proc.returncode != 0:
            raise BackendError(self.descriptor.backend_id,
                               f"command exited with {proc.returncode}: {proc.stderr.strip()}")
        return proc.stdout.strip()


class HttpBackend:
    """Adapter posting raw PNG bytes to an endpoint returning {"text": ...}.

    At most max_in_flight requests run concurrently.
    """

    def __init__(self, endpoint: str, backend_id: str = "http", cost_per_query: float = 0.0,
                 timeout: float = 30.0, max_in_flight: int = 4):
        self.endpoint = endpoint
        self.timeout = timeout
        self.descriptor = OcrBackendDescriptor(backend_id=backend_id, cost_per_query=cost_per_query)
        self._slots = threading.Semaphore(max_in_flight)

    def recognize_image(self, image: np.ndarray) -> str:
        with self._slots:
            try:
                resp = requests.post(self.endpoint, data=_png_bytes(image),
                                     headers={"Content-Type": "image/png"}, timeout=self.timeout)
            except requests.RequestException as exc:
                raise BackendError(self.descriptor.backend_id, f"request failed: {exc}") from exc
        if not 200 <= resp.status_code < 300:
            raise BackendError(self.descriptor.backend_id,
                               f"endpoint returned status {resp.status_code}",
                               status=resp.status_code)
        try:
            return str(resp.json()["text"])
        except (ValueError, KeyError) as exc:
            raise BackendError(self.descriptor.backend_id,
                               f"response is not a JSON document with a 'text' field: {exc}") from exc


def recognize(backend: OcrBackend, image: np.ndarray, *, ledger: QueryLedger,
              phase: str, sample_id: str, epoch: int = 0) -> str:
    """Query a backend, always appending exactly one ledger entry.

    The entry is recorded before the call so that failed external queries are
    still charged (paid APIs bill attempts).
    """
    ledger.append(backend.descriptor.backend_id, phase, sample_id, epoch,
                  backend.descriptor.cost_per_query)
    return backend.recognize_image(image)


def image_hash(image: np.ndarray) -> str:
    """Collision-resistant key for an image: SHA-256 over shape and float64 bytes."""
    arr = np.ascontiguousarray(image, dtype=np.float64)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


class ResponseCache:
    """Persistent OCR response cache, stored as append-only JSON lines.

    Corrupt lines are skipped on load (a corrupt entry is a miss and gets
    rewritten). With path=None the cache lives in memory only.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._store: dict[tuple[str, str], str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open() as fh:
                for line in fh:
                    try:
                        row = json.loads(line)
                        self._store[(row["backend_id"], row["image_hash"])] = row["text"]
                    except (ValueError, KeyError, TypeError):
                        continue

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._store

    def get(self, backend_id: str, ihash: str) -> str | None:
        return self._store.get((backend_id, ihash))

    def put(self, backend_id: str, ihash: str, text: str) -> None:
        with self._lock:
            self._store[(backend_id, ihash)] = text
            if self.path is not None:
                with self.path.open("a") as fh:
                    fh.write(json.dumps({"backend_id": backend_id, "image_hash": ihash,
                                         "text": text}) + "\n")

    def __len__(self) -> int:
        return len(self._store)


def cached_recognize(backend: OcrBackend, image: np.ndarray, cache: ResponseCache, *,
                     ledger: QueryLedger, phase: str, sample_id: str, epoch: int = 0) -> str:
    """recognize through a cache: hits return stored text with no new ledger entry."""
    key = image_hash(image)
    hit = cache.get(backend.descriptor.backend_id, key)
    if hit is not None:
        return hit
    text = recognize(backend, image, ledger=ledger, phase=phase, sample_id=sample_id, epoch=epoch)
    cache.put(backend.descriptor.backend_id, key, text)
    return text
