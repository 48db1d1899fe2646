"""Standalone re-verification of saved attack artifacts.

Only deserialization and the model are shared with the attack code: bound
checks, the classification driver and the run seeding are re-implemented
here so a bug in the attack loop cannot hide in common code.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from robusteval import tensor as T
from robusteval.advbatch import AdvBatch, load_advbatch
from robusteval.errors import ConfigError
from robusteval.model import RandomnessPolicy

TOLERANCE = 2.0**-20


@dataclass
class SampleBound:
    index: int
    linf: float
    in_range: bool
    ok: bool
    linf_clean: float | None = None  # deviation from the re-loaded clean image
    note: str = ""


@dataclass
class BoundsReport:
    epsilon: float
    samples: list[SampleBound]

    @property
    def passed(self) -> bool:
        return all(s.ok for s in self.samples)

    @property
    def failures(self) -> list[int]:
        return [s.index for s in self.samples if not s.ok]

    def summary(self) -> str:
        worst = max((s.linf for s in self.samples), default=0.0)
        state = "PASS" if self.passed else f"FAIL samples {self.failures}"
        return f"bounds {state}: n={len(self.samples)} eps={self.epsilon:.9f} max_linf={worst:.9f}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "linf", "linf_clean", "in_range", "ok", "note"])
        for s in self.samples:
            clean = "" if s.linf_clean is None else repr(s.linf_clean)
            w.writerow([s.index, repr(s.linf), clean, int(s.in_range), int(s.ok), s.note])
        return buf.getvalue()


def _as_batch(batch) -> AdvBatch:
    return batch if isinstance(batch, AdvBatch) else load_advbatch(batch)


def _clean_lookup(clean) -> dict[bytes, np.ndarray]:
    images = np.asarray(getattr(clean, "images", clean), dtype=np.float32)
    return {hashlib.sha256(img.tobytes()).digest(): img for img in images}


def verify_bounds(batch, clean=None, tolerance: float = TOLERANCE) -> BoundsReport:
    """Per-sample l-inf deviation from the stored ORIGINAL and [0, 1] range
    check; a sample fails when its deviation exceeds ``epsilon + tolerance``.

    ``clean`` (a Dataset or image array, freshly loaded from disk) adds a
    second check: every stored original must occur in it bit-for-bit and the
    adversarial is also measured against that copy.
    """
    b = _as_batch(batch)
    eps = float(b.epsilon)
    lookup = _clean_lookup(clean) if clean is not None else None
    out = []
    for i in range(len(b)):
        orig = np.asarray(b.originals[i], dtype=np.float64)
        adv = np.asarray(b.adversarials[i], dtype=np.float64)
        linf = float(np.max(np.abs(adv - orig))) if adv.size else 0.0
        in_range = bool(adv.size == 0 or (adv.min() >= 0.0 and adv.max() <= 1.0))
        ok = in_range and linf <= eps + tolerance
        rec = SampleBound(i, linf, in_range, ok)
        if not in_range:
            rec.note = "outside [0,1]"
        elif not ok:
            rec.note = "exceeds epsilon"
        if lookup is not None:
            ref = lookup.get(hashlib.sha256(np.asarray(b.originals[i], dtype=np.float32).tobytes()).digest())
            if ref is None:
                rec.ok, rec.note = False, "original not found in clean dataset"
            else:
                rec.linf_clean = float(np.max(np.abs(adv - ref.astype(np.float64))))
                if rec.linf_clean > eps + tolerance:
                    rec.ok, rec.note = False, "exceeds epsilon against clean dataset"
        out.append(rec)
    return BoundsReport(eps, out)


@dataclass
class AccuracyReport:
    mean: float
    std: float
    accuracies: list[float]
    flip_rate: np.ndarray = field(default_factory=lambda: np.zeros(0))  # per sample: share of runs misclassified

    def summary(self) -> str:
        always = int(np.sum(self.flip_rate == 1.0))
        never = int(np.sum(self.flip_rate == 0.0))
        return (f"robust accuracy {100 * self.mean:.2f} +/- {100 * self.std:.2f} over {len(self.accuracies)} runs; "
                f"always wrong {always}, never wrong {never}, unstable {len(self.flip_rate) - always - never}")


def verify_accuracy(batch, model, runs: int = 10, seed: int = 0, mode: str = "fresh") -> AccuracyReport:
    """Robust accuracy over ``runs`` evaluations, one image at a time.

    Run ``r`` uses randomness seeded with ``seed + r``; every sample counts.
    Returns the mean, the sample standard deviation and per-sample error rates.
    """
    b = _as_batch(batch)
    if len(b) and int(b.labels.max()) >= model.num_classes:
        raise ConfigError(f"batch has label {int(b.labels.max())} but the model has {model.num_classes} classes")
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    dtype = np.dtype(model.dtype)
    wrong = np.zeros((runs, len(b)), dtype=bool)
    for r in range(runs):
        policy = RandomnessPolicy(mode, seed + r)
        for i in range(len(b)):
            z = model.logits(T.tensor(b.adversarials[i][None].astype(dtype)), policy).data[0]
            wrong[r, i] = int(np.argmax(z)) != int(b.labels[i])
    accs = [float(1.0 - w.mean()) if len(b) else 0.0 for w in wrong]
    std = float(np.std(accs, ddof=1)) if runs > 1 else 0.0
    return AccuracyReport(float(np.mean(accs)), std, accs, wrong.mean(axis=0))


def emit_perturbation_report(batch, model, seed: int = 0) -> str:
    """CSV, one row per sample: l-inf and l2 deviation, label, predictions on
    the original and the adversarial under one frozen draw, and the centered
    perturbation ``delta - mean(delta)`` as space-separated values in
    row-major (d, d, 3) order."""
    b = _as_batch(batch)
    policy = RandomnessPolicy.frozen(seed)
    dtype = np.dtype(model.dtype)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "linf", "l2", "label", "pred_before", "pred_after", "shape", "centered_delta"])
    for i in range(len(b)):
        delta = b.adversarials[i].astype(np.float64) - b.originals[i].astype(np.float64)
        before = int(np.argmax(model.logits(T.tensor(b.originals[i][None].astype(dtype)), policy).data[0]))
        after = int(np.argmax(model.logits(T.tensor(b.adversarials[i][None].astype(dtype)), policy).data[0]))
        centered = delta - delta.mean()
        w.writerow([
            i, repr(float(np.abs(delta).max(initial=0.0))), repr(float(np.sqrt((delta**2).sum()))),
            int(b.labels[i]), before, after, "x".join(map(str, delta.shape)),
            " ".join(f"{v:.9g}" for v in centered.ravel()),
        ])
    return buf.getvalue()
