"""The multi-resolution, intermediate-probe ensemble defense.

Pipeline for an input batch ``x`` (N, d, d, 3) with values in [0, 1]:

1. ``multires_stack``: for each resolution r, downscale to r x r, add
   N(0, sigma1^2), upscale back to d x d, add N(0, sigma2^2); concatenate the
   k copies along channels (no clipping).
2. ``forward_probes``: run the TinyNet backbone and apply one linear probe per
   selected layer, giving a logit matrix Z of shape (N, |I|, C).
3. Aggregate Z with ``crossmax`` (the defense) or ``aggregate_mean`` (the
   attack surrogate). Both share weights; only step 3 differs.
"""

from __future__ import annotations

import dataclasses
import io
import os
from dataclasses import dataclass, field

import numpy as np

from robusteval import binio
from robusteval import tensor as T
from robusteval.errors import ConfigError
from robusteval.tensor import FormatError, Tensor

AGGREGATIONS = ("crossmax", "mean")
POLICY_MODES = ("fresh", "frozen", "none")


@dataclass(frozen=True)
class MultiResConfig:
    d: int = 32
    resolutions: tuple[int, ...] = (32, 16, 8)
    sigma1: float = 0.1
    sigma2: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        if self.d < 1:
            raise ConfigError(f"native resolution must be positive, got {self.d}")
        if not self.resolutions:
            raise ConfigError("resolutions must be non-empty")
        for r in self.resolutions:
            if not 1 <= r <= self.d:
                raise ConfigError(f"resolution {r} outside [1, {self.d}]")
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ConfigError("noise standard deviations must be >= 0")

    @property
    def k(self) -> int:
        return len(self.resolutions)

    @property
    def channels(self) -> int:
        return 3 * self.k


class RandomnessPolicy:
    """Where the preprocessing noise comes from.

    ``fresh``  every forward pass draws new noise for every sample from a
               generator seeded once with ``seed``;
    ``frozen`` every forward pass replays the same draw (one draw shared by
               all samples in the batch, so results do not depend on batching);
    ``none``   no noise at all.
    """

    def __init__(self, mode: str = "fresh", seed: int = 0):
        if mode not in POLICY_MODES:
            raise ConfigError(f"unknown randomness mode {mode!r}")
        self.mode = mode
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)

    @classmethod
    def fresh(cls, seed: int = 0) -> "RandomnessPolicy":
        return cls("fresh", seed)

    @classmethod
    def frozen(cls, seed: int = 0) -> "RandomnessPolicy":
        return cls("frozen", seed)

    @classmethod
    def none(cls) -> "RandomnessPolicy":
        return cls("none", 0)

    def generator(self) -> np.random.Generator | None:
        """Generator to use for one forward pass."""
        if self.mode == "none":
            return None
        if self.mode == "frozen":
            return np.random.default_rng(self.seed)
        return self._rng

    @property
    def shared(self) -> bool:
        return self.mode == "frozen"

    def __repr__(self) -> str:
        return f"RandomnessPolicy({self.mode!r}, seed={self.seed})"


def _as_policy(policy) -> RandomnessPolicy:
    if policy is None:
        return RandomnessPolicy.none()
    return policy


def multires_stack(x: Tensor, cfg: MultiResConfig, policy: RandomnessPolicy | None = None) -> Tensor:
    """Stack noisy re-sampled copies of ``x`` along the channel axis.

    ``x`` is NHWC (N, d, d, 3) and the result is NHWC (N, d, d, 3k), block i
    holding the copy at ``cfg.resolutions[i]``.
    """
    if x.ndim != 4 or x.shape[1:] != (cfg.d, cfg.d, 3):
        raise T.DimensionError(f"expected (N, {cfg.d}, {cfg.d}, 3) input, got {x.shape}")
    policy = _as_policy(policy)
    rng = policy.generator()
    n = x.shape[0]
    xc = T.transpose(x, (0, 3, 1, 2))
    blocks = []
    for r in cfg.resolutions:
        low = T.resize_bilinear(xc, r)
        low = T.add_noise(low, cfg.sigma1, rng, (1, 3, r, r) if policy.shared else (n, 3, r, r))
        up = T.resize_bilinear(low, cfg.d)
        up = T.add_noise(up, cfg.sigma2, rng, (1, 3, cfg.d, cfg.d) if policy.shared else (n, 3, cfg.d, cfg.d))
        blocks.append(up)
    stacked = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=1)
    return T.transpose(stacked, (0, 2, 3, 1))


def crossmax(Z, k_sel: int = 2) -> Tensor:
    """CrossMax over the probe axis of ``Z`` (..., |I|, C).

    Subtract each row's max, then each column's max, sort every column in
    descending order and return row ``k_sel`` (0-based, so ``k_sel=2`` is the
    third-highest normalized score per class).
    """
    Z = Z if isinstance(Z, Tensor) else T.tensor(np.asarray(Z, dtype=np.float64))
    if Z.ndim < 2:
        raise T.DimensionError(f"crossmax needs a (|I|, C) matrix, got {Z.shape}")
    n_probes = Z.shape[-2]
    if not 0 <= k_sel < n_probes:
        raise ConfigError(f"k_sel={k_sel} needs at least {k_sel + 1} probes, have {n_probes}")
    Z = T.sort(crossmax_stages(Z)[1], axis=-2, descending=True)
    return T.take(Z, k_sel, axis=-2)


def crossmax_stages(Z) -> tuple[Tensor, Tensor]:
    """The two normalized matrices: after the row-max and after the column-max subtraction."""
    Z = Z if isinstance(Z, Tensor) else T.tensor(np.asarray(Z, dtype=np.float64))
    rows = T.sub(Z, T.amax(Z, axis=-1, keepdims=True))
    return rows, T.sub(rows, T.amax(rows, axis=-2, keepdims=True))


def aggregate_mean(Z) -> Tensor:
    """Per-class mean over the probe axis."""
    Z = Z if isinstance(Z, Tensor) else T.tensor(np.asarray(Z, dtype=np.float64))
    return T.mean(Z, axis=-2)


def _he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass
class DefenseModel:
    """TinyNet backbone with linear probes.

    Layers are indexed 0..B: layer i < B is block i (conv3x3 + ReLU, preceded
    by a 2x2 max-pool for i > 0) and its probe reads the global average of the
    ReLU output; layer B max-pools the last block and flattens, and its probe is
    the classifier head. ``probe_layers`` picks the rows of Z.
    """

    params: dict[str, Tensor]
    widths: tuple[int, ...]
    num_classes: int
    probe_layers: tuple[int, ...]
    aggregation: str = "crossmax"
    k_sel: int = 2
    preprocess: MultiResConfig = field(default_factory=MultiResConfig)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.probe_layers = tuple(sorted(int(i) for i in self.probe_layers))
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if not self.probe_layers:
            raise ConfigError("probe set must be non-empty")
        if len(set(self.probe_layers)) != len(self.probe_layers):
            raise ConfigError("duplicate probe layer")
        for i in self.probe_layers:
            if not 0 <= i <= self.n_blocks:
                raise ConfigError(f"probe layer {i} does not exist (layers 0..{self.n_blocks})")
        if self.aggregation == "crossmax" and not 0 <= self.k_sel < len(self.probe_layers):
            raise ConfigError(f"k_sel={self.k_sel} must be < |I|={len(self.probe_layers)}")
        if self.preprocess.d >> self.n_blocks < 1:
            raise ConfigError(f"d={self.preprocess.d} too small for {self.n_blocks} pooling stages")
        cin = self.preprocess.channels
        for b, width in enumerate(self.widths):
            w = self.params.get(f"conv{b}.w")
            if w is None or w.shape != (width, cin, 3, 3):
                raise ConfigError(f"conv{b} weight must have shape {(width, cin, 3, 3)}")
            cin = width
        for i in self.probe_layers:
            w = self.params.get(f"probe{i}.w")
            if w is None:
                raise ConfigError(f"missing weights for probe {i}")
            if w.shape != (self.num_classes, self.feature_width(i)):
                raise ConfigError(
                    f"probe {i} weight {w.shape} does not map width {self.feature_width(i)} to C={self.num_classes}"
                )

    @classmethod
    def init(
        cls,
        num_classes: int,
        preprocess: MultiResConfig | None = None,
        widths=(16, 32, 64),
        probe_layers=None,
        aggregation: str = "crossmax",
        k_sel: int = 2,
        seed: int = 0,
        dtype=np.float32,
        head_scale: float = 0.1,
    ) -> "DefenseModel":
        """Seeded He initialization. Probe heads are shrunk by ``head_scale`` so
        initial logits are near uniform."""
        preprocess = preprocess or MultiResConfig()
        widths = tuple(widths)
        if probe_layers is None:
            probe_layers = tuple(range(len(widths) + 1))
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        cin = preprocess.channels
        for b, w in enumerate(widths):
            params[f"conv{b}.w"] = T.tensor(_he_normal(rng, (w, cin, 3, 3), cin * 9, dtype), requires_grad=True)
            params[f"conv{b}.b"] = T.tensor(np.zeros(w, dtype), requires_grad=True)
            cin = w
        shell = object.__new__(cls)
        shell.widths, shell.preprocess = widths, preprocess
        for i in sorted(probe_layers):
            fan = cls.feature_width(shell, i)
            wt = rng.standard_normal((num_classes, fan)) * np.sqrt(1.0 / fan) * head_scale
            params[f"probe{i}.w"] = T.tensor(wt.astype(dtype), requires_grad=True)
            params[f"probe{i}.b"] = T.tensor(np.zeros(num_classes, dtype), requires_grad=True)
        return cls(params, widths, num_classes, tuple(probe_layers), aggregation, k_sel, preprocess)

    @property
    def n_blocks(self) -> int:
        return len(self.widths)

    @property
    def stochastic(self) -> bool:
        return self.preprocess.sigma1 > 0 or self.preprocess.sigma2 > 0

    @property
    def dtype(self):
        return self.params["conv0.w"].dtype

    def feature_width(self, layer: int) -> int:
        if layer < self.n_blocks:
            return self.widths[layer]
        side = self.preprocess.d >> self.n_blocks
        return self.widths[-1] * side * side

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_names(self) -> list[str]:
        """Declaration order, also the on-disk order."""
        names = []
        for b in range(self.n_blocks):
            names += [f"conv{b}.w", f"conv{b}.b"]
        for i in self.probe_layers:
            names += [f"probe{i}.w", f"probe{i}.b"]
        return names

    def with_aggregation(self, aggregation: str, k_sel: int | None = None) -> "DefenseModel":
        """Same weights (shared, not copied), different aggregation head."""
        return dataclasses.replace(self, aggregation=aggregation, k_sel=self.k_sel if k_sel is None else k_sel)

    def astype(self, dtype) -> "DefenseModel":
        params = {k: T.tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return dataclasses.replace(self, params=params)

    def clone(self) -> "DefenseModel":
        params = {k: T.tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return dataclasses.replace(self, params=params)

    def layer_features(self, x_multi: Tensor, upto: int | None = None) -> list[Tensor]:
        """Features f_i(x_multi) for layers 0..upto; block features are the
        (N, width, h, w) ReLU maps, the last layer is the flattened pool."""
        upto = self.n_blocks if upto is None else upto
        h = T.transpose(x_multi, (0, 3, 1, 2))
        feats = []
        for b in range(min(upto + 1, self.n_blocks)):
            if b > 0:
                h = T.maxpool2d(h, 2)
            h = T.relu(T.conv2d(h, self.params[f"conv{b}.w"], self.params[f"conv{b}.b"], padding=1))
            feats.append(h)
        if upto >= self.n_blocks:
            p = T.maxpool2d(h, 2)
            feats.append(T.reshape(p, (p.shape[0], -1)))
        return feats

    def probe(self, layer: int, feature: Tensor) -> Tensor:
        if layer < self.n_blocks:
            feature = T.mean(feature, axis=(2, 3))
        return T.linear(feature, self.params[f"probe{layer}.w"], self.params[f"probe{layer}.b"])

    def aggregate(self, Z: Tensor) -> Tensor:
        if self.aggregation == "mean":
            return aggregate_mean(Z)
        return crossmax(Z, self.k_sel)

    def logits(self, x, policy: RandomnessPolicy | None = None) -> Tensor:
        """Aggregated logits (N, C) for NHWC images."""
        return self.aggregate(self.probe_logits(x, policy))

    def probe_logits(self, x, policy: RandomnessPolicy | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else T.tensor(np.asarray(x, dtype=self.dtype))
        return forward_probes(self, multires_stack(x, self.preprocess, policy))

    def __call__(self, x, policy: RandomnessPolicy | None = None) -> Tensor:
        return self.logits(x, policy)


def forward_probes(model: DefenseModel, x_multi: Tensor) -> Tensor:
    """Logit matrix Z (N, |I|, C); row r is probe ``model.probe_layers[r]``."""
    expected = (model.preprocess.d, model.preprocess.d, model.preprocess.channels)
    if x_multi.ndim != 4 or x_multi.shape[1:] != expected:
        raise T.DimensionError(f"x_multi shape {x_multi.shape} does not match backbone input (N, *{expected})")
    feats = model.layer_features(x_multi, upto=max(model.probe_layers))
    rows = [model.probe(i, feats[i]) for i in model.probe_layers]
    n = x_multi.shape[0]
    rows = [T.reshape(r, (n, 1, model.num_classes)) for r in rows]
    return rows[0] if len(rows) == 1 else T.concat(rows, axis=1)


def predict(model: DefenseModel, x, policy: RandomnessPolicy | None = None):
    """Class labels and aggregated logits. ``x`` is (d, d, 3) or (N, d, d, 3).

    Ties go to the lowest class index (``np.argmax``)."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=model.dtype)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    z = model.logits(T.tensor(arr), policy).data
    labels = np.argmax(z, axis=1)
    if single:
        return int(labels[0]), z[0]
    return labels, z


# --- checkpoint -------------------------------------------------------------

EEEM_MAGIC = b"EEEM"
EEEM_VERSION = 1


def save_model(model: DefenseModel, path) -> None:
    """EEEM: magic, u32 version, MultiResConfig, layer descriptors, then the
    weight tensors (TNSR) in declaration order."""
    buf = io.BytesIO()
    buf.write(EEEM_MAGIC)
    binio.write_u32(buf, EEEM_VERSION)
    cfg = model.preprocess
    binio.write_u32(buf, cfg.d)
    binio.write_u32(buf, cfg.k)
    for r in cfg.resolutions:
        binio.write_u32(buf, r)
    binio.write_f64(buf, cfg.sigma1)
    binio.write_f64(buf, cfg.sigma2)
    binio.write_u32(buf, model.num_classes)
    binio.write_u32(buf, model.n_blocks)
    for w in model.widths:
        binio.write_u32(buf, w)
    binio.write_u32(buf, len(model.probe_layers))
    for i in model.probe_layers:
        binio.write_u32(buf, i)
    binio.write_str(buf, model.aggregation)
    binio.write_u32(buf, model.k_sel)
    names = model.param_names()
    binio.write_u32(buf, len(names))
    for name in names:
        T.save_tensor(buf, model.params[name].data)
    data = buf.getvalue()
    if hasattr(path, "write"):
        path.write(data)
    else:
        with open(os.fspath(path), "wb") as f:
            f.write(data)


def load_model(path) -> DefenseModel:
    if hasattr(path, "read"):
        return _read_model(path)
    with open(os.fspath(path), "rb") as f:
        return _read_model(f)


def _read_model(f) -> DefenseModel:
    binio.expect_magic(f, EEEM_MAGIC)
    pos = f.tell()
    version = binio.read_u32(f, "version")
    if version != EEEM_VERSION:
        raise FormatError(f"unsupported EEEM version {version}", pos)
    d = binio.read_u32(f, "d")
    k = binio.read_u32(f, "resolution count")
    resolutions = tuple(binio.read_u32(f, "resolution") for _ in range(k))
    sigma1 = binio.read_f64(f, "sigma1")
    sigma2 = binio.read_f64(f, "sigma2")
    num_classes = binio.read_u32(f, "num_classes")
    n_blocks = binio.read_u32(f, "block count")
    widths = tuple(binio.read_u32(f, "width") for _ in range(n_blocks))
    n_probes = binio.read_u32(f, "probe count")
    probe_layers = tuple(binio.read_u32(f, "probe layer") for _ in range(n_probes))
    aggregation = binio.read_str(f, "aggregation")
    k_sel = binio.read_u32(f, "k_sel")
    pos = f.tell()
    n_tensors = binio.read_u32(f, "tensor count")
    try:
        cfg = MultiResConfig(d, resolutions, sigma1, sigma2)
    except ConfigError as exc:
        raise FormatError(f"invalid preprocessing config: {exc}") from exc
    shell = object.__new__(DefenseModel)
    shell.widths, shell.probe_layers = widths, tuple(sorted(probe_layers))
    names = DefenseModel.param_names(shell)
    if n_tensors != len(names):
        raise FormatError(f"expected {len(names)} weight tensors, header says {n_tensors}", pos)
    params = {name: T.tensor(T.load_tensor(f), requires_grad=True) for name in names}
    try:
        return DefenseModel(params, widths, num_classes, probe_layers, aggregation, k_sel, cfg)
    except ConfigError as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}") from exc
