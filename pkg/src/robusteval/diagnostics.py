"""Gradient-masking diagnostics: 2-D loss-landscape slices and the binarized
attack unit test."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from robusteval import tensor as T
from robusteval.attacks import BOUND_TOL, make_loss, make_spec, run_attack
from robusteval.errors import BuildError, ConfigError
from robusteval.model import DefenseModel, RandomnessPolicy, multires_stack

logger = logging.getLogger(__name__)

ORTHO_TOL = 1e-6


# --- landscape --------------------------------------------------------------------

@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray  # (len(alphas), len(betas))
    mode: str
    d1: np.ndarray
    d2: np.ndarray
    d1_kind: str = "toward adversarial"
    d2_kind: str = "random orthogonal"

    def __post_init__(self):
        if self.losses.shape != (len(self.alphas), len(self.betas)):
            raise ConfigError(f"loss grid {self.losses.shape} does not match coordinates")


def parse_mode(mode) -> tuple[str, int]:
    """``fresh`` | ``frozen`` | ``avg:R`` (also ``averaged:R``) -> (kind, R)."""
    if isinstance(mode, tuple):
        kind, r = mode
    else:
        kind, _, r = str(mode).partition(":")
        r = int(r) if r else 1
    if kind in ("avg", "averaged"):
        if int(r) < 1:
            raise ConfigError("averaged mode needs R >= 1")
        return "averaged", int(r)
    if kind in ("fresh", "frozen"):
        return kind, 1
    raise ConfigError(f"unknown landscape mode {mode!r}")


def grid_coords(extent: float, n: int) -> np.ndarray:
    """``n`` symmetric points on [-extent, extent]; the middle one is exactly 0 for odd n."""
    if n < 1:
        raise ConfigError("grid needs at least one point")
    if n == 1:
        return np.zeros(1)
    half = (n - 1) / 2
    return extent * (np.arange(n) - half) / half


def orthogonal_direction(d1: np.ndarray, rng: np.random.Generator, max_tries: int = 16) -> np.ndarray:
    """Gaussian direction with the ``d1`` component removed, scaled so its
    l-inf norm equals that of ``d1``. Degenerate draws are resampled."""
    a = d1.astype(np.float64).ravel()
    for _ in range(max_tries):
        b = rng.standard_normal(a.shape)
        b -= (a @ b) / (a @ a) * a
        peak = np.abs(b).max()
        if peak == 0:
            continue
        b *= np.abs(a).max() / peak
        if abs(a @ b) <= ORTHO_TOL * np.linalg.norm(a) * np.linalg.norm(b):
            return b.reshape(d1.shape)
    raise ConfigError("could not draw a direction orthogonal to d1")


def landscape(model, x, y: int, d1, d2=None, extent: float = 8 / 255, n: int = 21, mode="fresh",
              seed: int = 0, loss: str = "cross_entropy", chunk: int = 256) -> LandscapeGrid:
    """Loss of ``model`` on ``x + a*d1 + b*d2`` over an n x n grid.

    ``d1`` (typically ``x_adv - x``) is rescaled to unit l-inf norm. Without
    ``d2`` a random direction orthogonal to ``d1`` is drawn from ``seed``.
    Modes: ``fresh`` gives every grid point its own noise draw, ``frozen``
    shares one seeded draw across the grid, ``avg:R`` averages R fresh draws
    per point.
    """
    kind, R = parse_mode(mode)
    x = np.asarray(x, dtype=np.float64)
    d1 = np.asarray(d1, dtype=np.float64)
    if d1.shape != x.shape:
        raise ConfigError(f"d1 shape {d1.shape} != x shape {x.shape}")
    peak = np.abs(d1).max()
    if peak == 0:
        raise ConfigError("d1 is zero")
    d1 = d1 / peak
    dir_rng, noise_seed = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    if d2 is None:
        d2 = orthogonal_direction(d1, dir_rng)
    else:
        d2 = np.asarray(d2, dtype=np.float64)
        d2 = d2 - (d1.ravel() @ d2.ravel()) / (d1.ravel() @ d1.ravel()) * d1
        d2 *= np.abs(d1).max() / np.abs(d2).max()
    alphas = grid_coords(extent, n)
    betas = grid_coords(extent, n)
    pts = x[None, None] + alphas[:, None, None, None, None] * d1 + betas[None, :, None, None, None] * d2
    pts = pts.reshape((n * n,) + x.shape)
    loss_fn = make_loss(loss)
    dtype = np.dtype(getattr(model, "dtype", np.float32))
    noise_seed = int(noise_seed.integers(2**63))
    if kind == "frozen":
        policy = RandomnessPolicy.frozen(noise_seed)
    else:
        policy = RandomnessPolicy.fresh(noise_seed)
    reps = R if kind == "averaged" else 1
    flat = np.zeros(len(pts))
    for r in range(reps):
        for s in range(0, len(pts), chunk):
            xs = T.tensor(pts[s:s + chunk].astype(dtype))
            z = model.logits(xs, policy)
            flat[s:s + chunk] += loss_fn(z, np.full(len(xs.data), y)).data
    losses = (flat / reps).reshape(n, n)
    label = kind if kind != "averaged" else f"avg:{R}"
    return LandscapeGrid(alphas, betas, losses, label, d1.astype(np.float32), d2.astype(np.float32))


def ruggedness(grid) -> float:
    """Mean absolute 5-point discrete Laplacian over interior grid points."""
    L = np.asarray(grid.losses if isinstance(grid, LandscapeGrid) else grid, dtype=np.float64)
    if min(L.shape) < 3:
        raise ConfigError("ruggedness needs at least a 3 x 3 grid")
    lap = L[:-2, 1:-1] + L[2:, 1:-1] + L[1:-1, :-2] + L[1:-1, 2:] - 4 * L[1:-1, 1:-1]
    return float(np.abs(lap).mean())


def grid_csv(grid: LandscapeGrid) -> str:
    """Row 1: ``alpha`` coordinates; row 2: ``beta`` coordinates; then one row
    of losses per alpha (columns follow beta)."""
    fmt = lambda v: repr(float(v))
    lines = [
        "alpha," + ",".join(map(fmt, grid.alphas)),
        "beta," + ",".join(map(fmt, grid.betas)),
    ]
    for i, row in enumerate(grid.losses):
        lines.append(f"{i}," + ",".join(map(fmt, row)))
    return "\n".join(lines) + "\n"


# --- binarized unit test -----------------------------------------------------------

VERDICT = RandomnessPolicy.none()


def probe_inputs(model: DefenseModel, x, policy: RandomnessPolicy | None = None) -> list[np.ndarray]:
    """Inputs of every probe head as (N, F) float64 arrays."""
    xm = multires_stack(T.tensor(np.asarray(x, dtype=model.dtype)), model.preprocess, policy or VERDICT)
    feats = model.layer_features(xm, max(model.probe_layers))
    out = []
    for layer in model.probe_layers:
        f = feats[layer]
        if layer < model.n_blocks:
            f = T.mean(f, axis=(2, 3))
        out.append(f.data.astype(np.float64))
    return out


@dataclass
class UnitTestModel:
    """Frozen backbone with noise-free preprocessing and, per input, its own
    set of 2-class probe heads.

    ``model_for(i)`` classifies ``inputs[i]`` as 0 and ``targets[i]`` (within
    ``epsilon``) as 1 under the verdict policy.
    """

    base: DefenseModel
    heads: list  # per input: {param name: array}
    inputs: np.ndarray
    targets: np.ndarray
    directions: np.ndarray
    epsilon: float
    flip_rates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return len(self.inputs)

    def model_for(self, i: int) -> DefenseModel:
        params = dict(self.base.params)
        params.update({k: T.tensor(v) for k, v in self.heads[i].items()})
        return replace(self.base, params=params)

    def classify(self, i: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.base.dtype)
        z = self.model_for(i).logits(T.tensor(x.reshape((-1,) + self.inputs.shape[1:])), VERDICT).data
        return z.argmax(axis=1)


def _direction(model: DefenseModel, x: np.ndarray) -> np.ndarray:
    """Input gradient of the summed class-1 minus class-0 probe margins."""
    xt = T.tensor(x.astype(model.dtype), requires_grad=True)
    Z = model.probe_logits(xt, VERDICT)
    T.sum(T.sub(T.take(Z, 1, axis=2), T.take(Z, 0, axis=2))).backward()
    return xt.grad.astype(np.float64)


def _active_margins(model: DefenseModel, x: np.ndarray) -> np.ndarray:
    """Class-1 minus class-0 logit of the last probe, evaluated in the model's dtype."""
    Z = model.probe_logits(T.tensor(x.astype(model.dtype)), VERDICT).data
    return (Z[:, -1, 1] - Z[:, -1, 0]).astype(np.float64)


def _ball_samples(x: np.ndarray, eps: float, k: int, rng) -> np.ndarray:
    u = rng.uniform(-eps, eps, size=(len(x), k) + x.shape[1:])
    return np.clip(x[:, None] + u, 0, 1).reshape((-1,) + x.shape[1:])


def _fit_head(pos: np.ndarray, neg: np.ndarray, epochs: int, lr: float):
    """Logistic regression (class 1 = pos) on standardized features, balanced
    classes, full-batch gradient descent. Returns (w, b) in raw feature units."""
    X = np.concatenate([pos, neg])
    t = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    weight = np.where(t == 1, 0.5 / len(pos), 0.5 / len(neg))
    # floor the scale: a feature that fires at the target only would otherwise get a ~1/sd weight
    mu, sd = X.mean(axis=0), np.maximum(X.std(axis=0), 1e-3 * X.std() + 1e-12)
    Xs = (X - mu) / sd
    w, b = np.zeros(X.shape[1]), 0.0
    for _ in range(epochs):
        p = 0.5 * (1 + np.tanh(0.5 * (Xs @ w + b)))
        r = weight * (p - t)
        w -= lr * (Xs.T @ r)
        b -= lr * r.sum()
    w_raw = w / sd
    return w_raw, b - mu @ w_raw


def _heads(layers, ws, bs, dtype) -> dict:
    out = {}
    for layer, w, b in zip(layers, ws, bs):
        out[f"probe{layer}.w"] = np.stack([-w / 2, w / 2]).astype(dtype)
        out[f"probe{layer}.b"] = np.array([-b / 2, b / 2], dtype=dtype)
    return out


PIN_FOR, PIN_AGAINST, ACTIVE = 1.0, 2.0, 3.0


def build_unit_test(model: DefenseModel, dataset, epsilon: float, seed: int = 0, epochs: int = 500,
                    lr: float = 1.0, negatives: int = 32, rounds: int = 3, check_samples: int = 1000,
                    max_flip_rate: float = 0.05) -> UnitTestModel:
    """Binarized unit test around every input of ``dataset`` (a Dataset or an
    image array; labels are ignored).

    The backbone is kept and preprocessing noise is switched off. Per input,
    the last probe head is replaced by a 2-class head fit by logistic
    regression on the pair (x -> 0, x + epsilon*sign(g_x) -> 1) plus
    ``negatives`` uniform ball samples (-> 0), then rescaled to margin -3 at x
    and +3 at the target (the feature difference replaces the fit when the fit
    cannot hold those margins in the model's precision). ``g_x`` starts as the input gradient of a randomly
    initialized head and is re-derived from the fitted head for ``rounds``
    rounds. The other probes become constant 2-class votes: ``k_sel`` of them
    with margin +1 for class 1, the rest with margin -2. CrossMax then flips
    once the active margin exceeds -1, before the mean of the probes does.

    Raises :class:`BuildError` if (a) an input is not class 0, (b) a target is
    not class 1, or (c) more than ``max_flip_rate`` of ``check_samples`` ball
    samples around an input are class 1.
    """
    n_probes = len(model.probe_layers)
    if n_probes < model.k_sel + 2:
        raise ConfigError(f"unit test needs at least k_sel + 2 = {model.k_sel + 2} probes, model has {n_probes}")
    x_all = np.asarray(getattr(dataset, "images", dataset), dtype=np.float64)
    pre = replace(model.preprocess, sigma1=0.0, sigma2=0.0)
    params = {k: T.tensor(v.data.copy()) for k, v in model.params.items() if k.startswith("conv")}
    init = DefenseModel.init(2, pre, model.widths, model.probe_layers, "crossmax", model.k_sel,
                             seed=seed, dtype=model.dtype, head_scale=1.0)
    params.update({k: T.tensor(v.data) for k, v in init.params.items() if k.startswith("probe")})
    base = DefenseModel(params, model.widths, 2, model.probe_layers, model.aggregation, model.k_sel, pre)
    layers = sorted(base.probe_layers)
    pinned = [PIN_FOR] * model.k_sel + [-PIN_AGAINST] * (n_probes - 1 - model.k_sel)
    ws_fixed = [np.zeros(base.feature_width(layer)) for layer in layers[:-1]]
    rng = np.random.default_rng(seed)
    heads, targets, directions = [], [], []
    for i in range(len(x_all)):
        x = x_all[i:i + 1]
        cur = base
        neg_x = np.concatenate([x, _ball_samples(x, epsilon, negatives, rng)])
        neg_f = probe_inputs(base, neg_x)[-1]
        for _ in range(max(rounds, 1)):
            direction = np.sign(_direction(cur, x))
            target = np.clip(x + epsilon * direction, 0, 1)
            pos_f = probe_inputs(base, target)[-1]
            w, _ = _fit_head(pos_f, neg_f, epochs, lr)
            # fall back to the feature difference when the fit misorders the pair or
            # is too ill-conditioned to keep its margins in the model's precision
            for w_try in (w, pos_f[0] - neg_f[0]):
                p, q = float(pos_f[0] @ w_try), float(neg_f[0] @ w_try)
                if p <= q:
                    continue
                w_act = w_try * 2.0 * ACTIVE / (p - q)
                b_act = -ACTIVE * (p + q) / (p - q)
                h = _heads(layers, ws_fixed + [w_act], pinned + [b_act], base.dtype)
                cur = replace(base, params={**base.params, **{k: T.tensor(v) for k, v in h.items()}})
                m_x, m_t = _active_margins(cur, np.concatenate([x, target]))
                if m_x < -PIN_AGAINST and m_t > PIN_AGAINST:
                    break
            else:
                raise BuildError("b", f"input {i}: final features do not separate the input from its target")
        heads.append(h)
        targets.append(target[0])
        directions.append(direction[0])
    ut = UnitTestModel(base, heads, x_all.astype(base.dtype), np.array(targets, dtype=base.dtype),
                       np.array(directions), float(epsilon))
    ut.flip_rates = check_unit_test(ut, check_samples, max_flip_rate, seed=seed + 1)
    return ut


def check_unit_test(ut: UnitTestModel, samples: int = 1000, max_flip_rate: float = 0.05, seed: int = 0) -> np.ndarray:
    """Verify conditions (a)-(c) for every input; returns the flip rates."""
    rng = np.random.default_rng(seed)
    rates = np.zeros(len(ut))
    for i in range(len(ut)):
        if ut.classify(i, ut.inputs[i])[0] != 0:
            raise BuildError("a", f"input {i} is not classified 0")
        dev = np.abs(ut.targets[i].astype(np.float64) - ut.inputs[i]).max()
        if dev > ut.epsilon + BOUND_TOL:
            raise BuildError("b", f"target {i} lies outside the epsilon ball ({dev:.6f})")
        if ut.classify(i, ut.targets[i])[0] != 1:
            raise BuildError("b", f"target {i} is not classified 1")
        ball = _ball_samples(ut.inputs[i][None].astype(np.float64), ut.epsilon, samples, rng)
        rates[i] = ut.classify(i, ball).mean()
        if rates[i] > max_flip_rate:
            raise BuildError("c", f"input {i}: {rates[i]:.3f} of random ball samples flip (max {max_flip_rate})")
    return rates


def preset_attack(attack: str, preset: str, epsilon, seed: int = 0, **overrides):
    """``attack_fn(model, x, y) -> x_adv`` for a named preset."""
    spec = make_spec(attack, preset, epsilon, seed, **overrides)

    def attack_fn(model, x, y):
        return run_attack(attack, model, x, y, spec).adversarials

    attack_fn.spec = spec
    return attack_fn


def run_unit_test(attack_fn, ut: UnitTestModel, epsilon: float | None = None) -> float:
    """Fraction of inputs for which ``attack_fn`` finds a class-1 example in
    the epsilon ball of the input's own binarized model (judged without
    preprocessing noise)."""
    eps = ut.epsilon if epsilon is None else float(epsilon)
    passed = 0
    for i in range(len(ut)):
        x = ut.inputs[i:i + 1].copy()
        x_adv = np.asarray(attack_fn(ut.model_for(i), x, np.zeros(1, dtype=np.int64)), dtype=np.float64)
        inside = np.abs(x_adv - ut.inputs[i:i + 1]).max() <= eps + BOUND_TOL and 0 <= x_adv.min() and x_adv.max() <= 1
        passed += bool(inside and ut.classify(i, x_adv)[0] == 1)
    return passed / max(len(ut), 1)
