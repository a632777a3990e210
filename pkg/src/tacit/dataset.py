"""Sharded binary storage for maze pairs and shuffled epoch streaming.

Shard layout (all integers little-endian)::

    header   magic b"TACD" | version u16 | sample_count u32 | resolution u16
    record   size u16 | seed u64 | input res*res*3 u8 | target res*res*3 u8

Images are stored row-major as ``(res, res, 3)`` RGB bytes.
"""

from __future__ import annotations

import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from tacit.maze import PairSample, generate_pair
from tacit.rng import MASK64, mix_seed

log = logging.getLogger(__name__)

MAGIC = b"TACD"
VERSION = 1
HEADER = struct.Struct("<4sHIH")
RECORD_HEAD = struct.Struct("<HQ")
SHARD_PATTERN = "batch_{:05d}.tacd"

# Seeds with the top bit set are reserved for held-out evaluation pairs.
HELDOUT_BIT = 1 << 63


class DatasetError(Exception):
    pass


class BadMagicError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class MixedResolutionError(DatasetError, ValueError):
    pass


class CorruptShardError(DatasetError):
    def __init__(self, path, cause):
        super().__init__(f"{path}: {cause}")
        self.path = Path(path)


def record_bytes(resolution: int) -> int:
    return RECORD_HEAD.size + 2 * resolution * resolution * 3


def write_batch(samples: Sequence[PairSample], path: str | os.PathLike, resolution: int | None = None) -> None:
    """Write ``samples`` to one shard. ``resolution`` is only needed for empty shards."""
    resolutions = {s.input.shape[0] for s in samples}
    if len(resolutions) > 1:
        raise MixedResolutionError(f"samples mix resolutions {sorted(resolutions)}")
    res = resolutions.pop() if resolutions else (resolution or 0)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, len(samples), res))
        for s in samples:
            if s.input.shape != (res, res, 3) or s.target.shape != (res, res, 3):
                raise MixedResolutionError(f"sample seed={s.seed} has image shape {s.input.shape}")
            f.write(RECORD_HEAD.pack(s.size, s.seed & MASK64))
            f.write(np.ascontiguousarray(s.input, dtype=np.uint8).tobytes())
            f.write(np.ascontiguousarray(s.target, dtype=np.uint8).tobytes())
    os.replace(tmp, path)


def read_batch(path: str | os.PathLike) -> list[PairSample]:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        if not MAGIC.startswith(data[:4]):
            raise BadMagicError(f"{path}: not a TACD file")
        raise TruncatedFileError(f"{path}: header truncated ({len(data)} bytes)")
    magic, version, count, res = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    rec = record_bytes(res)
    expected = HEADER.size + count * rec
    if len(data) < expected:
        raise TruncatedFileError(f"{path}: {len(data)} bytes, header declares {expected}")
    if len(data) > expected:
        raise DatasetError(f"{path}: {len(data) - expected} trailing bytes")
    img = res * res * 3
    out = []
    buf = np.frombuffer(data, dtype=np.uint8)
    off = HEADER.size
    for _ in range(count):
        size, seed = RECORD_HEAD.unpack_from(data, off)
        off += RECORD_HEAD.size
        inp = buf[off : off + img].reshape(res, res, 3).copy()
        off += img
        tgt = buf[off : off + img].reshape(res, res, 3).copy()
        off += img
        out.append(PairSample(inp, tgt, size, seed))
    return out


def list_shards(shard_dir: str | os.PathLike) -> list[Path]:
    return sorted(Path(shard_dir).glob("batch_*.tacd"))


def sample_seed(base_seed: int, index: int) -> int:
    """Training-sample seed; never collides with the held-out range."""
    return mix_seed(base_seed, index) & ~HELDOUT_BIT


def heldout_seed(index: int) -> int:
    return HELDOUT_BIT | index


def heldout_pairs(count: int, sizes: Sequence[int], resolution: int) -> list[PairSample]:
    return [generate_pair(sizes[i % len(sizes)], heldout_seed(i), resolution) for i in range(count)]


def generate_dataset(
    out_dir: str | os.PathLike,
    count: int,
    sizes: Sequence[int],
    seed: int,
    resolution: int,
    shard_size: int = 10_000,
) -> list[Path]:
    """Generate ``count`` pairs into ``batch_%05d.tacd`` shards; returns shard paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for shard, start in enumerate(range(0, count, shard_size)):
        samples = [
            generate_pair(sizes[i % len(sizes)], sample_seed(seed, i), resolution)
            for i in range(start, min(count, start + shard_size))
        ]
        path = out / SHARD_PATTERN.format(shard)
        write_batch(samples, path)
        paths.append(path)
        log.info("wrote %s (%d samples)", path, len(samples))
    return paths


@dataclass
class EpochPlan:
    shard_order: list[Path]
    sample_seeds: list[int]

    @classmethod
    def make(cls, shards: Sequence[Path], epoch_index: int, base_seed: int) -> "EpochPlan":
        rng = np.random.default_rng([base_seed & MASK64, epoch_index])
        order = rng.permutation(len(shards))
        seeds = rng.integers(0, 2**63, size=len(shards), dtype=np.int64)
        return cls([shards[i] for i in order], [int(s) for s in seeds])


class EpochStream:
    """One shuffled pass over a shard directory.

    A shard stays resident from the moment its load is issued until every one
    of its samples has left in a yielded minibatch. The next shard is
    prefetched only while fewer than two shards are resident, so memory stays
    bounded by two shards (plus one partial minibatch when shards are smaller
    than ``batch_size``).
    """

    def __init__(self, shard_dir, batch_size: int, epoch_index: int, base_seed: int, workers: int = 1):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        shards = list_shards(shard_dir)
        if not shards:
            raise DatasetError(f"no shards in {shard_dir}")
        self.plan = EpochPlan.make(shards, epoch_index, base_seed)
        self.batch_size = batch_size
        self.workers = max(1, workers)
        self.peak_resident = 0
        self.peak_resident_samples = 0

    @staticmethod
    def _load(path: Path) -> list[PairSample]:
        try:
            return read_batch(path)
        except (DatasetError, OSError) as exc:
            raise CorruptShardError(path, exc) from exc

    def __iter__(self) -> Iterator[list[PairSample]]:
        order = self.plan.shard_order
        live: dict[int, int] = {}  # shard position -> samples not yet yielded (0 while loading)
        pending: list[tuple[int, PairSample]] = []
        futures = {}
        next_k = 0

        def prefetch(force: bool = False):
            nonlocal next_k
            if next_k < len(order) and not futures and (force or len(live) < 2):
                live[next_k] = 0
                futures[next_k] = pool.submit(self._load, order[next_k])
                next_k += 1
                self.peak_resident = max(self.peak_resident, len(live))

        def flush():
            batch = [s for _, s in pending]
            for k, _ in pending:
                live[k] -= 1
                if live[k] == 0:
                    del live[k]
            pending.clear()
            return batch

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            for k in range(len(order)):
                if k not in futures:
                    prefetch(force=True)
                samples = futures.pop(k).result()
                live[k] = len(samples)
                if not samples:
                    del live[k]
                self.peak_resident_samples = max(self.peak_resident_samples, sum(live.values()))
                perm = np.random.default_rng(self.plan.sample_seeds[k]).permutation(len(samples))
                for j in perm:
                    pending.append((k, samples[j]))
                    if len(pending) == self.batch_size:
                        yield flush()
                        prefetch()
                del samples
                prefetch()
            if pending:
                yield flush()


def iter_epoch(shard_dir, batch_size: int, epoch_index: int, base_seed: int, workers: int = 1) -> EpochStream:
    return EpochStream(shard_dir, batch_size, epoch_index, base_seed, workers)
