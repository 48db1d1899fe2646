"""Small closed-form models that satisfy the attack-side model protocol."""

import numpy as np

from robusteval import tensor as T
from robusteval.model import DefenseModel, MultiResConfig


class LinearToy:
    """Logits ``W x + b`` on flattened inputs; optional additive input noise."""

    def __init__(self, W, b=None, noise: float = 0.0):
        self.W = T.tensor(np.asarray(W, dtype=np.float64))
        self.b = T.tensor(np.zeros(self.W.shape[0]) if b is None else np.asarray(b, dtype=np.float64))
        self.noise = noise
        self.num_classes = self.W.shape[0]
        self.dtype = np.dtype(np.float64)

    @property
    def stochastic(self):
        return self.noise > 0

    def logits(self, x, policy=None):
        if self.noise and policy is not None:
            x = T.add_noise(x, self.noise, policy.generator())
        return T.linear(T.reshape(x, (x.shape[0], -1)), self.W, self.b)

    def with_aggregation(self, aggregation):
        return self


def tiny_model(num_classes=3, d=8, seed=0, sigma=0.1, dtype=np.float64, **kw):
    cfg = MultiResConfig(d, (d, d // 2), sigma, sigma)
    return DefenseModel.init(num_classes, cfg, widths=(4, 5, 6), seed=seed, dtype=dtype, head_scale=1.0, **kw)


def cifar_bytes(labels, variant=10, seed=0, coarse=None):
    """Raw CIFAR records for ``labels`` plus the expected (N, 32, 32, 3) uint8 images."""
    rng = np.random.default_rng(seed)
    pix = rng.integers(0, 256, size=(len(labels), 3, 32, 32), dtype=np.uint8)
    rows = []
    for i, lab in enumerate(labels):
        head = [lab] if variant == 10 else [coarse[i] if coarse is not None else 0, lab]
        rows.append(bytes(head) + pix[i].tobytes())
    return b"".join(rows), pix.transpose(0, 2, 3, 1)


def stacked_attack(model, x, y, eps, stages=2, steps=10, seed=0):
    """The faulty multi-stage pattern: each stage is bounded against the previous
    stage's output, yet the batch records the true originals."""
    from robusteval import attacks as A

    cur = np.asarray(x, dtype=np.float32)
    for s in range(stages):
        cur = A.pgd(model, None, cur, y, A.AttackSpec(eps, steps=steps, seed=seed + s)).adversarials
    return A.AdvBatch(x, cur, y, eps, f"stacked{stages}", seed)
