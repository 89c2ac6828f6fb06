"""Splice synthetic squares into pristine hosts, plus a seedable toy blot generator."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .raster import BinaryMask, Raster, mask_from_rect, read_image, write_image, write_mask

MANIFEST_FORMAT = "synthloc-splice-manifest"
MANIFEST_VERSION = 1
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm")


class SpliceError(ValueError):
    pass


@dataclass(frozen=True)
class SpliceRecord:
    output_id: str
    host_id: str
    donor_id: str
    group: str
    top: int
    left: int
    side: int
    donor_top: int
    donor_left: int
    seed: int


@dataclass
class Manifest:
    seed: int
    records: list[SpliceRecord]
    group_counts: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "group_counts": dict(sorted(self.group_counts.items())),
            "records": [asdict(r) for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        if d.get("format") != MANIFEST_FORMAT or d.get("version") != MANIFEST_VERSION:
            raise SpliceError("unrecognized manifest format/version")
        records = [SpliceRecord(**r) for r in d["records"]]
        ids = [r.output_id for r in records]
        if len(set(ids)) != len(ids):
            raise SpliceError("manifest output ids are not unique")
        counts = {str(k): int(v) for k, v in d["group_counts"].items()}
        if sum(counts.values()) != len(records):
            raise SpliceError("manifest group counts do not sum to the record count")
        return cls(int(d["seed"]), records, counts)


def write_manifest(manifest: Manifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")


def read_manifest(path) -> Manifest:
    return Manifest.from_dict(json.loads(Path(path).read_text()))


def splice(host: Raster, donor: Raster, side: int, rng: np.random.Generator
           ) -> tuple[Raster, BinaryMask, tuple[int, int, int, int]]:
    """Paste a random side x side crop of ``donor`` at a random spot in ``host``.

    Returns the spliced image, its mask, and (top, left, donor_top, donor_left).
    """
    if side < 1 or side > min(host.height, host.width):
        raise SpliceError(f"splice side {side} does not fit in host {host.width}x{host.height}")
    if side > min(donor.height, donor.width):
        raise SpliceError(f"splice side {side} does not fit in donor {donor.width}x{donor.height}")
    if host.channels != donor.channels:
        raise SpliceError("host and donor channel counts differ")
    top = int(rng.integers(0, host.height - side + 1))
    left = int(rng.integers(0, host.width - side + 1))
    dtop = int(rng.integers(0, donor.height - side + 1))
    dleft = int(rng.integers(0, donor.width - side + 1))
    out = host.pixels.copy()
    out[top:top + side, left:left + side] = donor.pixels[dtop:dtop + side, dleft:dleft + side]
    mask = mask_from_rect(host.width, host.height, top, left, side)
    return Raster(out), mask, (top, left, dtop, dleft)


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise SpliceError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def plan_dataset(hosts: list[str], donors: dict[str, list[str]], n: int, side: int,
                 seed: int) -> Manifest:
    """Draw all host/donor choices and per-record seeds; placement is drawn later from each record seed."""
    if not hosts:
        raise SpliceError("empty host pool")
    if not donors or any(not pool for pool in donors.values()):
        raise SpliceError("every donor group needs at least one image")
    groups = sorted(donors)
    if n < 1 or n % len(groups):
        raise SpliceError(f"n={n} is not a positive multiple of the {len(groups)} donor groups")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    assignment = np.repeat(np.arange(len(groups)), n // len(groups))
    assignment = rng.permutation(assignment)

    host_order: list[int] = []
    while len(host_order) < n:
        host_order.extend(rng.permutation(len(hosts)).tolist())
    record_seeds = np.random.SeedSequence([seed, 1]).generate_state(n, dtype=np.uint32)

    records = []
    for k in range(n):
        group = groups[int(assignment[k])]
        pool = donors[group]
        donor = pool[int(rng.integers(0, len(pool)))]
        records.append(SpliceRecord(
            output_id=f"{k:05d}", host_id=hosts[host_order[k]], donor_id=donor, group=group,
            top=-1, left=-1, side=side, donor_top=-1, donor_left=-1, seed=int(record_seeds[k]),
        ))
    counts = {g: int(np.sum(assignment == i)) for i, g in enumerate(groups)}
    return Manifest(seed, records, counts)


def build_dataset(hosts_dir, donor_dirs: dict[str, str], n: int, seed: int, out_dir,
                  side: int = 64) -> Manifest:
    """Write ``n`` spliced images, masks and manifest.json under ``out_dir``.

    Hosts are drawn without replacement until the pool is exhausted, then
    the pool is reshuffled. Each donor group supplies exactly n / groups
    splices.
    """
    host_paths = list_images(hosts_dir)
    donor_paths = {g: list_images(d) for g, d in donor_dirs.items()}
    host_ids = [p.name for p in host_paths]
    donor_ids = {g: [p.name for p in ps] for g, ps in donor_paths.items()}
    plan = plan_dataset(host_ids, donor_ids, n, side, seed)

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    host_dir = Path(hosts_dir)
    records = []
    for rec in plan.records:
        host = read_image(host_dir / rec.host_id)
        donor = read_image(Path(donor_dirs[rec.group]) / rec.donor_id)
        img, mask, (top, left, dtop, dleft) = splice(host, donor, side, np.random.default_rng(rec.seed))
        write_image(img, out / "images" / f"{rec.output_id}.png")
        write_mask(mask, out / "masks" / f"{rec.output_id}.png")
        records.append(SpliceRecord(**{**asdict(rec), "top": top, "left": left,
                                       "donor_top": dtop, "donor_left": dleft}))
    manifest = Manifest(seed, records, plan.group_counts)
    write_manifest(manifest, out / "manifest.json")
    return manifest


# ---------------------------------------------------------------- toy blots


def _blot_layout(rng: np.random.Generator, size: int) -> np.ndarray:
    """Bright noisy background with dark, smooth horizontal bands in a few lanes."""
    rows = np.arange(size)[:, None].astype(float)
    cols = np.arange(size)[None, :].astype(float)
    img = np.full((size, size), rng.uniform(0.78, 0.9))
    img += rng.uniform(-0.04, 0.04) * (rows / size - 0.5)  # gentle illumination gradient
    n_lanes = int(rng.integers(3, 7))
    lane_w = size / n_lanes
    for lane in range(n_lanes):
        for _ in range(int(rng.integers(1, 4))):
            center_c = (lane + 0.5) * lane_w + rng.normal(0, lane_w * 0.05)
            half_w = lane_w * rng.uniform(0.3, 0.45)
            center_r = rng.uniform(0.08, 0.92) * size
            sigma_r = rng.uniform(0.012, 0.035) * size
            depth = rng.uniform(0.25, 0.6)
            prof_r = np.exp(-0.5 * ((rows - center_r) / sigma_r) ** 2)
            # smooth shoulders across the lane width
            prof_c = 1.0 / (1.0 + np.exp((np.abs(cols - center_c) - half_w) / (0.08 * lane_w)))
            img -= depth * prof_r * prof_c
    img += rng.normal(0.0, 0.015, size=(size, size))
    return img


def gen_toy_pair(seed: int, size: int = 256) -> tuple[Raster, Raster]:
    """Real-like and synthetic-like grayscale blots sharing one layout.

    The synthetic-like image is the same layout after a 2x nearest-neighbour
    down/up round trip plus a +-0.02 period-2 checkerboard residual.
    """
    if size < 4 or size % 4:
        raise SpliceError(f"toy image size must be a positive multiple of 4, got {size}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    base = _blot_layout(rng, size)
    real = np.clip(base, 0.0, 1.0)
    nn = np.repeat(np.repeat(base[::2, ::2], 2, axis=0), 2, axis=1)
    checker = 0.02 * np.where((np.add.outer(np.arange(size), np.arange(size)) % 2) == 0, 1.0, -1.0)
    synth = np.clip(nn + checker, 0.0, 1.0)
    return Raster(real), Raster(synth)


def pair_seed(seed: int, index: int) -> int:
    """Per-pair seed derived from the global seed and the pair index."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint32)[0])


def write_toy_dataset(n: int, seed: int, out_dir, size: int = 256) -> list[int]:
    """Write ``n`` pairs as real/<i>.png and synthetic/<i>.png; returns the pair seeds."""
    if n < 1:
        raise SpliceError("need at least one toy pair")
    out = Path(out_dir)
    (out / "real").mkdir(parents=True, exist_ok=True)
    (out / "synthetic").mkdir(parents=True, exist_ok=True)
    seeds = []
    for i in range(n):
        s = pair_seed(seed, i)
        real, synth = gen_toy_pair(s, size)
        write_image(real, out / "real" / f"{i:05d}.png")
        write_image(synth, out / "synthetic" / f"{i:05d}.png")
        seeds.append(s)
    return seeds


def is_writable_dir(path) -> bool:
    p = Path(path)
    while not p.exists():
        p = p.parent
    return p.is_dir() and os.access(p, os.W_OK)
