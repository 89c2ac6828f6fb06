"""Patch scorers: ground-truth oracle, trained micro-net, and external command over PBAT files."""

from __future__ import annotations

import shlex
import subprocess
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import micronet
from .patch_grid import PatchRef, check_ref, extract_stack
from .raster import BinaryMask, Raster


class ScoringError(RuntimeError):
    pass


class ExternalScorerError(ScoringError):
    pass


@dataclass(frozen=True)
class PatchScore:
    top: int
    left: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"patch score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class ScorerConfig:
    """Which detector scores patches.

    kind="oracle" needs ``mask``; kind="micronet" needs ``checkpoint``;
    kind="external" needs ``command`` (a template with {in} and {out}) and
    optionally ``workdir``.
    """

    kind: str
    mask: BinaryMask | None = None
    checkpoint: str | None = None
    command: str | None = None
    workdir: str | None = None

    def __post_init__(self):
        required = {"oracle": "mask", "micronet": "checkpoint", "external": "command"}
        if self.kind not in required:
            raise ValueError(f"unknown scorer kind {self.kind!r}")
        populated = {name for name in ("mask", "checkpoint", "command")
                     if getattr(self, name) is not None}
        if populated != {required[self.kind]}:
            raise ValueError(
                f"scorer kind {self.kind!r} takes exactly the {required[self.kind]!r} parameter, "
                f"got {sorted(populated)}"
            )
        if self.workdir is not None and self.kind != "external":
            raise ValueError("workdir only applies to external scorers")


# ---------------------------------------------------------------- oracle


def oracle_score(mask: BinaryMask, ref: PatchRef) -> float:
    """Fraction of tampered pixels inside the patch extent."""
    check_ref(mask.height, mask.width, ref)
    p = ref.size
    inside = int(mask.labels[ref.top:ref.top + p, ref.left:ref.left + p].sum(dtype=np.int64))
    return inside / (p * p)


def _oracle_batch(mask: BinaryMask, refs: list[PatchRef]) -> np.ndarray:
    if not refs:
        return np.zeros(0)
    integral = np.zeros((mask.height + 1, mask.width + 1), dtype=np.int64)
    integral[1:, 1:] = mask.labels.astype(np.int64).cumsum(0).cumsum(1)
    for ref in refs:
        check_ref(mask.height, mask.width, ref)
    t = np.array([r.top for r in refs])
    lft = np.array([r.left for r in refs])
    s = np.array([r.size for r in refs])
    b, rt = t + s, lft + s
    counts = integral[b, rt] - integral[t, rt] - integral[b, lft] + integral[t, lft]
    return counts / (s * s)


# ---------------------------------------------------------------- PBAT protocol


def encode_request(patches: np.ndarray, patch_size: int, channels: int) -> bytes:
    header = f"PBAT 1 {len(patches)} {patch_size} {channels}\n".encode("ascii")
    return header + np.asarray(patches, dtype="<f4").tobytes()


def decode_request(blob: bytes) -> np.ndarray:
    """Parse a PBAT v1 request into an (N, P, P, C) float32 array."""
    nl = blob.find(b"\n")
    head = blob[:nl].split() if nl > 0 else []
    if len(head) != 5 or head[0] != b"PBAT" or head[1] != b"1":
        raise ExternalScorerError("not a PBAT v1 request")
    n, p, c = (int(v) for v in head[2:])
    payload = blob[nl + 1:]
    if len(payload) != 4 * n * p * p * c:
        raise ExternalScorerError("PBAT payload length does not match its header")
    return np.frombuffer(payload, dtype="<f4").reshape(n, p, p, c)


def encode_response(scores) -> bytes:
    return np.asarray(scores, dtype="<f4").tobytes()


def decode_response(blob: bytes, count: int) -> np.ndarray:
    if len(blob) != 4 * count:
        raise ExternalScorerError(
            f"external scorer returned {len(blob)} bytes, expected {4 * count} ({count} scores)"
        )
    scores = np.frombuffer(blob, dtype="<f4").astype(np.float64)
    bad = ~((scores >= 0.0) & (scores <= 1.0))
    if bad.any():
        k = int(np.argmax(bad))
        raise ExternalScorerError(f"external score {scores[k]} at index {k} is outside [0, 1]")
    return scores


_external_locks: dict[str, threading.Lock] = {}
_locks_guard = threading.Lock()


def _lock_for(cmd: str) -> threading.Lock:
    with _locks_guard:
        return _external_locks.setdefault(cmd, threading.Lock())


def external_roundtrip(patches, cmd: str, workdir: str | None = None) -> list[float]:
    """Score patches by running ``cmd`` once over a PBAT request file.

    ``cmd`` is a shell-style template; ``{in}`` and ``{out}`` are replaced by
    the request and response paths.
    """
    arrays = [p.pixels if isinstance(p, Raster) else np.asarray(p, dtype=np.float64) for p in patches]
    if arrays:
        shape = arrays[0].shape
        if any(a.shape != shape for a in arrays):
            raise ExternalScorerError("all patches in a batch must share size and channel count")
        if len(shape) != 3 or shape[0] != shape[1]:
            raise ExternalScorerError(f"patches must be square P x P x C, got {shape}")
        stack = np.stack(arrays)
        p, c = shape[0], shape[2]
    else:
        stack, p, c = np.zeros((0,)), 0, 0
    with _lock_for(cmd), tempfile.TemporaryDirectory(prefix="pbat-") as tmp:
        req = Path(tmp) / "request.pbat"
        resp = Path(tmp) / "response.f32"
        req.write_bytes(encode_request(stack, p, c))
        argv = [a.replace("{in}", str(req)).replace("{out}", str(resp)) for a in shlex.split(cmd)]
        try:
            proc = subprocess.run(argv, cwd=workdir, capture_output=True)
        except OSError as exc:
            raise ExternalScorerError(f"cannot run external scorer {argv[0]!r}: {exc}") from exc
        if proc.returncode != 0:
            raise ExternalScorerError(
                f"external scorer exited with status {proc.returncode}: "
                f"{proc.stderr.decode(errors='replace').strip()[:500]}"
            )
        if not resp.exists():
            raise ExternalScorerError("external scorer wrote no response file")
        return decode_response(resp.read_bytes(), len(arrays)).tolist()


# ---------------------------------------------------------------- dispatch


_ckpt_cache: dict[str, micronet.Checkpoint] = {}
_ckpt_guard = threading.Lock()


def _load_cached(path: str) -> micronet.NetParams:
    key = str(Path(path).resolve())
    with _ckpt_guard:
        if key not in _ckpt_cache:
            _ckpt_cache[key] = micronet.load_checkpoint(path)
        return _ckpt_cache[key].params


def _score_chunk(img: Raster, refs: list[PatchRef], scorer: ScorerConfig) -> np.ndarray:
    if scorer.kind == "oracle":
        if (scorer.mask.height, scorer.mask.width) != (img.height, img.width):
            raise ScoringError("oracle mask dimensions differ from the image")
        return _oracle_batch(scorer.mask, refs)
    stack = extract_stack(img, refs)
    if scorer.kind == "micronet":
        params = _load_cached(scorer.checkpoint)
        if stack.shape[1:] != (params.patch_size, params.patch_size, params.channels):
            raise ScoringError(
                f"checkpoint expects {params.patch_size}x{params.patch_size}x{params.channels} "
                f"patches, got {stack.shape[1:]}"
            )
        return micronet.predict_proba(params, stack)
    return np.asarray(external_roundtrip(list(stack), scorer.command, scorer.workdir))


def score_patches(img: Raster, refs: list[PatchRef], scorer: ScorerConfig,
                  workers: int = 1) -> list[PatchScore]:
    """One PatchScore per ref, in ref order.

    With ``workers > 1`` the refs are cut into contiguous chunks scored
    concurrently; external scorers run one invocation at a time per command.
    """
    refs = list(refs)
    if workers > 1 and len(refs) > 1 and scorer.kind != "oracle":
        chunks = [list(c) for c in np.array_split(np.arange(len(refs)), workers) if len(c)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda idx: _score_chunk(img, [refs[i] for i in idx], scorer), chunks))
        scores = np.concatenate(parts)
    else:
        scores = _score_chunk(img, refs, scorer)
    if len(scores) != len(refs):
        raise ScoringError(f"scorer returned {len(scores)} scores for {len(refs)} patches")
    return [PatchScore(r.top, r.left, float(s)) for r, s in zip(refs, scores)]
