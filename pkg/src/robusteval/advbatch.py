"""AdvBatch: the (original, adversarial, label, epsilon) artifact passed from
attacker to verifier, and its ADVX file format."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, replace

import numpy as np

from robusteval import binio
from robusteval import tensor as T
from robusteval.errors import ConfigError
from robusteval.tensor import FormatError

ADVX_MAGIC = b"ADVX"
ADVX_VERSION = 1


@dataclass
class AdvBatch:
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    epsilon: float
    attack: str = ""
    seed: int = 0

    def __post_init__(self):
        self.originals = np.asarray(self.originals, dtype=np.float32)
        self.adversarials = np.asarray(self.adversarials, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.originals.shape != self.adversarials.shape:
            raise ConfigError(f"shape mismatch {self.originals.shape} vs {self.adversarials.shape}")
        if len(self.labels) != len(self.originals):
            raise ConfigError("label count does not match sample count")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def name(self) -> str:
        return self.attack

    def clean(self) -> "AdvBatch":
        return replace(self, adversarials=self.originals.copy(), attack="none")


def save_advbatch(batch: AdvBatch, path) -> None:
    """ADVX: magic, u32 version, u32 N, f64 epsilon, attack name, u64 seed,
    then per sample u32 label, TNSR original, TNSR adversarial."""
    buf = io.BytesIO()
    buf.write(ADVX_MAGIC)
    binio.write_u32(buf, ADVX_VERSION)
    binio.write_u32(buf, len(batch))
    binio.write_f64(buf, batch.epsilon)
    binio.write_str(buf, batch.attack)
    binio.write_u64(buf, batch.seed % 2**64)
    for i in range(len(batch)):
        binio.write_u32(buf, int(batch.labels[i]))
        T.save_tensor(buf, batch.originals[i])
        T.save_tensor(buf, batch.adversarials[i])
    if hasattr(path, "write"):
        path.write(buf.getvalue())
    else:
        with open(os.fspath(path), "wb") as f:
            f.write(buf.getvalue())


def load_advbatch(path) -> AdvBatch:
    if hasattr(path, "read"):
        return _read_advbatch(path)
    with open(os.fspath(path), "rb") as f:
        return _read_advbatch(f)


def _read_advbatch(f) -> AdvBatch:
    binio.expect_magic(f, ADVX_MAGIC)
    pos = f.tell()
    version = binio.read_u32(f, "version")
    if version != ADVX_VERSION:
        raise FormatError(f"unsupported ADVX version {version}", pos)
    n = binio.read_u32(f, "sample count")
    eps = binio.read_f64(f, "epsilon")
    name = binio.read_str(f, "attack name")
    seed = binio.read_u64(f, "seed")
    labels, origs, advs = [], [], []
    for i in range(n):
        labels.append(binio.read_u32(f, f"label of sample {i}"))
        pos = f.tell()
        o = T.load_tensor(f)
        a = T.load_tensor(f)
        if o.shape != a.shape:
            raise FormatError(f"sample {i}: original {o.shape} vs adversarial {a.shape}", pos)
        if origs and o.shape != origs[0].shape:
            raise FormatError(f"sample {i}: shape {o.shape} differs from sample 0", pos)
        origs.append(o)
        advs.append(a)
    trailing = f.read(1)
    if trailing:
        raise FormatError("trailing bytes after last sample", f.tell() - 1)
    if n == 0:
        return AdvBatch(np.zeros((0, 1, 1, 3)), np.zeros((0, 1, 1, 3)), np.zeros(0), eps, name, seed)
    return AdvBatch(np.stack(origs), np.stack(advs), np.array(labels), eps, name, seed)
