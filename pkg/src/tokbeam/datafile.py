"""Binary dataset files and their text manifest.

A dataset is a directory holding two files:

``samples.bin``
    ``b"TKBDS"`` magic, ``u16`` format version, then one record per sample.
    All integers/floats are little-endian. Record layout::

        id u64 | K u16 | N_T u16 | flags u8
        channel   2*K*N_T f64   (re, im interleaved, row-major)
        noise     K f64
        p_max     1 f64
        for each label bit set in flags (bit i <-> TASK_ORDER[i]):
            solver_version u16 | 2*K*N_T f64
        crc32 u32 over all preceding bytes of the record

``manifest.txt``
    UTF-8 ``key = value`` lines, see :class:`DatasetManifest`.
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import (DEFAULT_SPLIT, GENERATOR_VERSION, TASK_ORDER, CsiSample, TaskSpec,
                      split_counts, split_samples)
from .errors import DatasetError

FORMAT_VERSION = 1
MAGIC = b"TKBDS"
DATA_FILE = "samples.bin"
MANIFEST_FILE = "manifest.txt"

_HEADER = struct.Struct("<QHHB")
_LABEL_HEADER = struct.Struct("<H")
_CRC = struct.Struct("<I")


@dataclass
class DatasetManifest:
    seed: int
    counts: dict = field(default_factory=lambda: {"train": 0, "val": 0, "test": 0})
    split_ratio: tuple = DEFAULT_SPLIT
    task_specs: list = field(default_factory=list)
    error_level_db: float | None = None
    generator_version: str = GENERATOR_VERSION
    format_version: int = FORMAT_VERSION

    @property
    def record_count(self) -> int:
        return sum(self.counts.values())

    @classmethod
    def for_samples(cls, samples, seed, task_specs=(), ratio=DEFAULT_SPLIT, error_level_db=None):
        tr, va, te = split_counts(len(samples), ratio)
        return cls(seed=seed, counts={"train": tr, "val": va, "test": te},
                   split_ratio=tuple(ratio), task_specs=[str(t) for t in task_specs],
                   error_level_db=error_level_db)

    def to_text(self) -> str:
        lines = [
            f"format_version = {self.format_version}",
            f"generator_version = {self.generator_version}",
            f"seed = {self.seed}",
            f"record_count = {self.record_count}",
            f"count_train = {self.counts['train']}",
            f"count_val = {self.counts['val']}",
            f"count_test = {self.counts['test']}",
            "split_ratio = " + ",".join(repr(float(r)) for r in self.split_ratio),
            "task_specs = " + ";".join(str(t) for t in self.task_specs),
            "error_level_db = " + ("none" if self.error_level_db is None
                                   else repr(float(self.error_level_db))),
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        kv = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DatasetError(f"manifest line {lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            kv[key.strip()] = value.strip()
        try:
            version = int(kv["format_version"])
            if version != FORMAT_VERSION:
                raise DatasetError(f"unsupported dataset format version {version}")
            m = cls(
                seed=int(kv["seed"]),
                counts={s: int(kv[f"count_{s}"]) for s in ("train", "val", "test")},
                split_ratio=tuple(float(r) for r in kv["split_ratio"].split(",")),
                task_specs=[t for t in kv.get("task_specs", "").split(";") if t],
                error_level_db=(None if kv.get("error_level_db", "none") == "none"
                                else float(kv["error_level_db"])),
                generator_version=kv["generator_version"],
                format_version=version,
            )
        except KeyError as exc:
            raise DatasetError(f"manifest is missing key {exc.args[0]!r}") from None
        except ValueError as exc:
            raise DatasetError(f"manifest value error: {exc}") from None
        if "record_count" in kv and int(kv["record_count"]) != m.record_count:
            raise DatasetError("manifest record_count disagrees with split counts")
        return m

    def tasks(self) -> list[TaskSpec]:
        return [TaskSpec.parse(t) for t in self.task_specs]


def _encode_complex(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype=np.complex128)
    return a.view(np.float64).astype("<f8", copy=False).tobytes()


def encode_record(s: CsiSample) -> bytes:
    flags = 0
    blocks = []
    for bit, util in enumerate(TASK_ORDER):
        if util.value in s.labels:
            flags |= 1 << bit
            blocks.append(_LABEL_HEADER.pack(s.label_versions.get(util.value, 0)))
            blocks.append(_encode_complex(s.labels[util.value]))
    body = b"".join([
        _HEADER.pack(s.id, s.k_users, s.n_antennas, flags),
        _encode_complex(s.h),
        np.asarray(s.noise_power, dtype="<f8").tobytes(),
        struct.pack("<d", s.p_max),
        *blocks,
    ])
    return body + _CRC.pack(zlib.crc32(body))


def write_dataset(samples, manifest: DatasetManifest, path) -> None:
    if manifest.record_count != len(samples):
        raise DatasetError(
            f"manifest counts {manifest.record_count} records but {len(samples)} samples given")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tmp = path / (DATA_FILE + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<H", FORMAT_VERSION))
        for s in samples:
            f.write(encode_record(s))
    os.replace(tmp, path / DATA_FILE)
    (path / MANIFEST_FILE).write_text(manifest.to_text(), encoding="utf-8")


def _take(buf, pos, n, index):
    if pos + n > len(buf):
        raise DatasetError(f"record {index} is truncated")
    return buf[pos:pos + n], pos + n


def decode_records(buf: bytes) -> list[CsiSample]:
    if buf[:len(MAGIC)] != MAGIC:
        raise DatasetError("not a dataset file (bad magic)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<H", buf, pos)
    if version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {version}")
    pos += 2
    samples = []
    index = 0
    while pos < len(buf):
        start = pos
        raw, pos = _take(buf, pos, _HEADER.size, index)
        sid, k, n, flags = _HEADER.unpack(raw)
        if k == 0 or n == 0 or flags >> len(TASK_ORDER):
            raise DatasetError(f"record {index} has a corrupt header")
        size = 16 * k * n
        raw, pos = _take(buf, pos, size, index)
        h = np.frombuffer(raw, dtype="<f8").view(np.complex128).reshape(k, n).copy()
        raw, pos = _take(buf, pos, 8 * k, index)
        noise = np.frombuffer(raw, dtype="<f8").copy()
        raw, pos = _take(buf, pos, 8, index)
        (p_max,) = struct.unpack("<d", raw)
        labels, versions = {}, {}
        for bit, util in enumerate(TASK_ORDER):
            if flags & (1 << bit):
                raw, pos = _take(buf, pos, 2, index)
                versions[util.value] = _LABEL_HEADER.unpack(raw)[0]
                raw, pos = _take(buf, pos, size, index)
                labels[util.value] = np.frombuffer(raw, dtype="<f8").view(np.complex128).reshape(k, n).copy()
        raw, pos = _take(buf, pos, 4, index)
        if _CRC.unpack(raw)[0] != zlib.crc32(buf[start:pos - 4]):
            raise DatasetError(f"record {index} failed its checksum")
        try:
            samples.append(CsiSample(sid, h, noise, p_max, labels, versions))
        except ValueError as exc:
            raise DatasetError(f"record {index}: {exc}") from None
        index += 1
    return samples


def read_dataset(path):
    path = Path(path)
    try:
        manifest = DatasetManifest.from_text((path / MANIFEST_FILE).read_text(encoding="utf-8"))
        buf = (path / DATA_FILE).read_bytes()
    except FileNotFoundError as exc:
        raise DatasetError(f"missing dataset file: {exc.filename}") from None
    samples = decode_records(buf)
    if len(samples) != manifest.record_count:
        raise DatasetError(
            f"manifest declares {manifest.record_count} records, file holds {len(samples)}")
    return samples, manifest


def read_splits(path) -> tuple[dict, DatasetManifest]:
    samples, manifest = read_dataset(path)
    c = manifest.counts
    return split_samples(samples, (c["train"], c["val"], c["test"])), manifest
