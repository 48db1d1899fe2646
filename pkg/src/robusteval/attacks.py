"""Adaptive l-inf attacks: PGD and APGD with EoT gradients, transfer from the
mean-aggregation surrogate, hinge loss and a shrinking-radius schedule.

All attacks work on NHWC batches in [0, 1] and keep a hard invariant: after
every iteration each example is within ``radius`` of the ORIGINAL clean
image (never of a previous iterate) and inside [0, 1]. The final example is
always within ``epsilon``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from robusteval import tensor as T
from robusteval.errors import BoundViolation, ConfigError
from robusteval.model import RandomnessPolicy
from robusteval.advbatch import AdvBatch, load_advbatch, save_advbatch  # noqa: F401  (re-export)
from robusteval.tensor import Tensor

logger = logging.getLogger(__name__)

BOUND_TOL = 2.0**-20
LOSSES = ("cross_entropy", "hinge")
SURROGATES = ("none", "mean_aggregation")
LARGE_RADIUS_SCHEDULE = ((3.0, 0.3), (2.0, 0.3), (1.0, 0.4))


# --- losses -------------------------------------------------------------------

def _as_batch(logits) -> tuple[Tensor, bool]:
    logits = logits if isinstance(logits, Tensor) else T.tensor(np.asarray(logits, dtype=np.float64))
    if logits.ndim == 1:
        return T.reshape(logits, (1, -1)), True
    return logits, False


def loss_ce(logits, y) -> Tensor:
    """Softmax cross-entropy per sample (the attacker maximizes it)."""
    z, single = _as_batch(logits)
    out = T.cross_entropy(z, np.atleast_1d(y))
    return T.reshape(out, ()) if single else out


def loss_hinge(logits, y, kappa: float = 0.0) -> Tensor:
    """``min(max_{i != y} z_i - z_y, kappa)`` per sample.

    Positive once misclassified; clamping at ``kappa`` stops pushing a sample
    that is already wrong by margin ``kappa`` (gradient is exactly zero there).
    """
    if kappa < 0:
        raise ConfigError("kappa must be >= 0")
    z, single = _as_batch(logits)
    n, c = z.shape
    if c < 2:
        raise ConfigError("hinge loss needs at least 2 classes")
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    others = np.array([[j for j in range(c) if j != yi] for yi in y], dtype=np.intp)
    best_other = T.amax(T.gather(z, others, axis=1), axis=1)
    true = T.reshape(T.gather(z, y[:, None], axis=1), (n,))
    margin = T.sub(best_other, true)
    out = T.minimum(margin, kappa) if math.isfinite(kappa) else margin
    return T.reshape(out, ()) if single else out


def make_loss(name: str, kappa: float = 0.0):
    if name == "cross_entropy":
        return loss_ce
    if name == "hinge":
        return lambda z, y: loss_hinge(z, y, kappa)
    raise ConfigError(f"unknown loss {name!r}")


# --- spec and trace --------------------------------------------------------------

def parse_eps(value) -> float:
    """Accept ``8/255``-style fractions exactly, or plain numbers."""
    if isinstance(value, str):
        return float(Fraction(value.strip()))
    return float(value)


@dataclass
class AttackSpec:
    epsilon: float
    steps: int = 500
    step_size: float | None = None  # None: 2.5 * epsilon / steps
    eot_samples: int = 1
    loss: str = "cross_entropy"
    kappa: float = 0.0
    surrogate: str = "none"
    radius_schedule: tuple = ()
    random_start: bool = True
    early_stop: bool = False
    seed: int = 0
    name: str = "pgd"
    eot_chunk: int = 512

    def __post_init__(self):
        self.epsilon = parse_eps(self.epsilon)
        self.radius_schedule = tuple((float(m), float(f)) for m, f in self.radius_schedule)
        if not 0 <= self.epsilon <= 1:
            raise ConfigError(f"epsilon {self.epsilon} outside [0, 1]")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.eot_samples < 1:
            raise ConfigError("eot_samples must be >= 1")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.kappa < 0:
            raise ConfigError("kappa must be >= 0")
        if self.surrogate not in SURROGATES:
            raise ConfigError(f"unknown surrogate {self.surrogate!r}")
        if self.radius_schedule:
            mults = [m for m, _ in self.radius_schedule]
            fracs = [f for _, f in self.radius_schedule]
            if any(f <= 0 for f in fracs) or not math.isclose(sum(fracs), 1.0, abs_tol=1e-9):
                raise ConfigError(f"schedule fractions must be positive and sum to 1, got {fracs}")
            if any(b > a for a, b in zip(mults, mults[1:])):
                raise ConfigError(f"schedule multipliers must be non-increasing, got {mults}")
            if mults[-1] != 1.0:
                raise ConfigError(f"schedule must end at multiplier 1, got {mults[-1]}")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        return 2.5 * self.epsilon / max(self.steps, 1)


@dataclass
class AttackTrace:
    """Per-step record of one attack over a batch.

    ``loss``: target-model loss after each step (steps, N); ``objective``:
    EoT loss of the model actually attacked; ``best_objective``: running max
    of ``objective``; ``radius``: projection radius per step (steps,);
    ``grad_norm``: l1 norm of the EoT gradient (steps, N).
    """

    originals: np.ndarray
    labels: np.ndarray
    epsilon: float
    adversarials: np.ndarray
    success: np.ndarray
    loss: np.ndarray
    objective: np.ndarray
    best_objective: np.ndarray
    radius: np.ndarray
    grad_norm: np.ndarray
    name: str = "pgd"
    seed: int = 0

    def to_batch(self) -> AdvBatch:
        return AdvBatch(self.originals, self.adversarials, self.labels, self.epsilon, self.name, self.seed)


def check_bound(x_adv: np.ndarray, x_orig: np.ndarray, radius: float) -> None:
    """Hard stop if any example leaves the ball around its original or [0, 1]."""
    dev = np.abs(x_adv.astype(np.float64) - x_orig.astype(np.float64)).reshape(len(x_adv), -1).max(axis=1, initial=0.0)
    if np.any(dev > radius + BOUND_TOL):
        i = int(np.argmax(dev))
        raise BoundViolation(f"sample {i}: deviation {dev[i]:.9f} exceeds radius {radius:.9f}")
    if x_adv.size and (x_adv.min() < 0 or x_adv.max() > 1):
        raise BoundViolation("adversarial example outside [0, 1]")


def project(x: np.ndarray, x_orig: np.ndarray, radius: float) -> np.ndarray:
    """Clip to the radius ball around ``x_orig`` first, then to [0, 1]."""
    r = x_orig.dtype.type(radius)
    return np.clip(np.clip(x, x_orig - r, x_orig + r), 0, 1)


# --- gradients ------------------------------------------------------------------

def _model_dtype(model) -> np.dtype:
    return np.dtype(getattr(model, "dtype", np.float32))


def eot_grad(model, x: np.ndarray, y: np.ndarray, loss_fn, R: int = 1, policy=None, chunk: int = 512):
    """Mean over ``R`` independent randomness draws of the input gradient of
    ``loss_fn(model.logits(x), y)``.

    ``policy`` is a :class:`RandomnessPolicy` (an int is taken as a fresh seed).
    Draws are batched: the R copies of the batch go through the model together
    in chunks of at most ``chunk`` images, each copy with its own noise.
    Returns ``(grad, loss)`` where ``loss`` is the per-sample mean over draws.
    A model without randomness (or ``policy`` none) gets a single draw, since
    all R draws would coincide.
    """
    if R < 1:
        raise ConfigError("R must be >= 1")
    if policy is None or isinstance(policy, (int, np.integer)):
        policy = RandomnessPolicy.fresh(0 if policy is None else int(policy))
    if policy.mode == "none" or not getattr(model, "stochastic", True):
        R = 1
    dtype = _model_dtype(model)
    x = np.asarray(x, dtype=dtype)
    y = np.asarray(y)
    n = len(x)
    grad = np.zeros(x.shape, dtype=np.float64)
    losses = np.zeros(n, dtype=np.float64)
    copies = max(1, chunk // max(n, 1))
    for r0 in range(0, R, copies):
        reps = min(copies, R - r0)
        # more than one sample chunk only happens when n > chunk, i.e. reps == 1
        for s in range(0, n, chunk):
            xs_np, ys = x[s:s + chunk], y[s:s + chunk]
            m = len(xs_np)
            xs = T.tensor(np.tile(xs_np, (reps,) + (1,) * (x.ndim - 1)), requires_grad=True)
            l_each = loss_fn(model.logits(xs, policy), np.tile(ys, reps))
            T.sum(l_each).backward()
            grad[s:s + m] += xs.grad.reshape(reps, *xs_np.shape).sum(axis=0)
            losses[s:s + m] += l_each.data.reshape(reps, m).sum(axis=0)
    return grad / R, losses / R


def _forward_loss(model, x, y, loss_fn, policy, chunk=512):
    dtype = _model_dtype(model)
    out_l, out_p = [], []
    for s in range(0, len(x), chunk):
        z = model.logits(T.tensor(np.asarray(x[s:s + chunk], dtype=dtype)), policy)
        out_l.append(loss_fn(z, y[s:s + chunk]).data)
        out_p.append(z.data.argmax(axis=1))
    return np.concatenate(out_l).astype(np.float64), np.concatenate(out_p)


def resolve_surrogate(model_target, model_surrogate, spec: AttackSpec):
    if spec.surrogate == "none":
        return model_target
    if model_surrogate is not None:
        return model_surrogate
    if not hasattr(model_target, "with_aggregation"):
        raise ConfigError("mean-aggregation surrogate needs a model with with_aggregation()")
    return model_target.with_aggregation("mean")


def _seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _start(x0, spec, radius, rng):
    if spec.random_start and radius > 0:
        u = rng.uniform(-radius, radius, size=x0.shape).astype(x0.dtype)
        return project(x0 + u, x0, radius)
    return x0.copy()


# --- PGD ---------------------------------------------------------------------------

def pgd(model_target, model_surrogate, x, y, spec: AttackSpec) -> AttackTrace:
    """Sign-gradient ascent with projection onto the epsilon ball and [0, 1].

    Gradients come from ``eot_grad`` on the surrogate when
    ``spec.surrogate == 'mean_aggregation'`` (else the target); the recorded
    ``loss`` and the final success flag always use the target model under
    fresh randomness. With ``spec.radius_schedule`` the projection radius
    follows the schedule; the last segment uses epsilon.
    """
    attacked = resolve_surrogate(model_target, model_surrogate, spec)
    dtype = _model_dtype(model_target)
    x0 = np.asarray(x, dtype=dtype)
    y = np.asarray(y, dtype=np.int64)
    s_init, s_grad, s_eval = _seeds(spec.seed, 3)
    grad_policy = RandomnessPolicy.fresh(s_grad)
    eval_policy = RandomnessPolicy.fresh(s_eval)
    loss_fn = make_loss(spec.loss, spec.kappa)
    radii = radius_trace(spec)
    n = len(x0)
    x_adv = _start(x0, spec, radii[0] if spec.steps else spec.epsilon, np.random.default_rng(s_init))
    check_bound(x_adv, x0, radii[0] if spec.steps else spec.epsilon)
    rec = _Recorder(spec.steps, n)
    done = np.zeros(n, dtype=bool)
    alpha = dtype.type(spec.alpha)
    for t in range(spec.steps):
        active = ~done if spec.early_stop else np.ones(n, dtype=bool)
        if not active.any():
            rec.fill_rest(t, radii)
            break
        g, obj = eot_grad(attacked, x_adv[active], y[active], loss_fn, spec.eot_samples, grad_policy, spec.eot_chunk)
        step = x_adv[active] + alpha * np.sign(g).astype(dtype)
        x_adv[active] = project(step, x0[active], radii[t])
        check_bound(x_adv, x0, radii[t])
        tl, pred = _forward_loss(model_target, x_adv, y, loss_fn, eval_policy)
        if spec.early_stop:
            done |= pred != y
        rec.record(t, tl, obj, active, np.abs(g).reshape(len(g), -1).sum(axis=1), radii[t])
    if radii.size and radii[-1] != spec.epsilon:
        x_adv = project(x_adv, x0, spec.epsilon)
    check_bound(x_adv, x0, spec.epsilon)
    _, pred = _forward_loss(model_target, x_adv, y, loss_fn, eval_policy)
    return rec.trace(x0, y, spec, x_adv, pred != y)


class _Recorder:
    def __init__(self, steps, n):
        self.loss = np.full((steps, n), np.nan)
        self.objective = np.full((steps, n), np.nan)
        self.grad_norm = np.zeros((steps, n))
        self.radius = np.zeros(steps)

    def record(self, t, target_loss, objective, active, gnorm, radius):
        self.loss[t] = target_loss
        self.objective[t, active] = objective
        if t > 0:
            self.objective[t, ~active] = self.objective[t - 1, ~active]
        self.grad_norm[t, active] = gnorm
        self.radius[t] = radius

    def fill_rest(self, t, radii):
        self.loss[t:] = self.loss[t - 1]
        self.objective[t:] = self.objective[t - 1]
        self.radius[t:] = radii[t:]

    def trace(self, x0, y, spec, x_adv, success):
        obj = np.where(np.isnan(self.objective), -np.inf, self.objective)
        best = np.maximum.accumulate(obj, axis=0) if len(obj) else obj
        return AttackTrace(
            originals=x0, labels=y, epsilon=spec.epsilon, adversarials=x_adv, success=success,
            loss=self.loss, objective=self.objective, best_objective=best, radius=self.radius,
            grad_norm=self.grad_norm, name=spec.name, seed=spec.seed,
        )


def segment_lengths(spec: AttackSpec) -> list[tuple[float, int]]:
    """(radius, iterations) per schedule segment; the last absorbs rounding."""
    schedule = spec.radius_schedule or ((1.0, 1.0),)
    lengths = [math.ceil(f * spec.steps - 1e-9) for _, f in schedule[:-1]]
    lengths.append(spec.steps - sum(lengths))
    if lengths[-1] < 0:
        raise ConfigError(f"schedule does not fit into {spec.steps} steps")
    return [(m * spec.epsilon, k) for (m, _), k in zip(schedule, lengths)]


def radius_trace(spec: AttackSpec) -> np.ndarray:
    return np.concatenate([np.full(k, r) for r, k in segment_lengths(spec)] or [np.zeros(0)])


# --- APGD -------------------------------------------------------------------------

RHO = 0.75
CHECKPOINT_FIRST = 0.22
CHECKPOINT_MIN = 0.06
CHECKPOINT_DECREMENT = 0.03


def apgd(model_target, model_surrogate, x, y, spec: AttackSpec) -> AttackTrace:
    """Auto-PGD (l-inf) with EoT, optional surrogate and radius schedule.

    Each schedule segment is a full APGD run at its radius, warm-started from
    the best point of the previous segment re-projected around the original
    image. Within a segment: step size starts at 2 * radius, momentum 0.75,
    and at each checkpoint the step is halved (restarting from the best point)
    if the loss increased in at most ``RHO`` of the steps since the previous
    checkpoint, or if the best loss did not improve and the step was not
    reduced at the previous checkpoint. Returns the best point of the final
    segment, which uses radius epsilon.
    """
    attacked = resolve_surrogate(model_target, model_surrogate, spec)
    dtype = _model_dtype(model_target)
    x0 = np.asarray(x, dtype=dtype)
    y = np.asarray(y, dtype=np.int64)
    s_init, s_grad, s_eval = _seeds(spec.seed, 3)
    grad_policy = RandomnessPolicy.fresh(s_grad)
    eval_policy = RandomnessPolicy.fresh(s_eval)
    loss_fn = make_loss(spec.loss, spec.kappa)
    segments = segment_lengths(spec)
    n = len(x0)
    rec = _Recorder(spec.steps, n)
    x_cur = _start(x0, spec, segments[0][0], np.random.default_rng(s_init))
    t = 0
    for radius, iters in segments:
        x_cur = project(x_cur, x0, radius)
        check_bound(x_cur, x0, radius)
        if iters == 0:
            continue
        x_cur, t = _apgd_segment(attacked, model_target, x0, y, x_cur, radius, iters, t, spec,
                                 loss_fn, grad_policy, eval_policy, rec)
    x_cur = project(x_cur, x0, spec.epsilon)
    check_bound(x_cur, x0, spec.epsilon)
    _, pred = _forward_loss(model_target, x_cur, y, loss_fn, eval_policy)
    return rec.trace(x0, y, spec, x_cur, pred != y)


def _apgd_segment(attacked, target, x0, y, x_adv, radius, n_iter, t, spec, loss_fn, grad_policy, eval_policy, rec):
    dtype = x0.dtype.type
    n = len(x0)
    shape = (n,) + (1,) * (x0.ndim - 1)
    k = max(int(CHECKPOINT_FIRST * n_iter), 1)
    k_min = max(int(CHECKPOINT_MIN * n_iter), 1)
    k_decr = max(int(CHECKPOINT_DECREMENT * n_iter), 1)
    grad, loss = eot_grad(attacked, x_adv, y, loss_fn, spec.eot_samples, grad_policy, spec.eot_chunk)
    step = np.full(shape, 2.0 * radius)
    x_best, grad_best, loss_best = x_adv.copy(), grad.copy(), loss.copy()
    loss_prev_steps = [loss.copy()]
    loss_best_last_check = loss_best.copy()
    reduced_last_check = np.ones(n, dtype=bool)
    x_prev = x_adv.copy()
    since_check = 0
    for i in range(n_iter):
        a = 0.75 if i > 0 else 1.0
        momentum = x_adv - x_prev
        x_prev = x_adv.copy()
        z = project(x_adv + (step * np.sign(grad)).astype(x0.dtype), x0, radius)
        x_adv = project(x_adv + dtype(a) * (z - x_adv) + dtype(1 - a) * momentum, x0, radius)
        check_bound(x_adv, x0, radius)
        grad, loss = eot_grad(attacked, x_adv, y, loss_fn, spec.eot_samples, grad_policy, spec.eot_chunk)
        loss_prev_steps.append(loss.copy())
        better = loss > loss_best
        x_best[better], grad_best[better], loss_best[better] = x_adv[better], grad[better], loss[better]
        tl, _ = _forward_loss(target, x_adv, y, loss_fn, eval_policy)
        rec.record(t, tl, loss, np.ones(n, dtype=bool), np.abs(grad).reshape(n, -1).sum(axis=1), radius)
        t += 1
        since_check += 1
        if since_check == k:
            recent = np.stack(loss_prev_steps[-(k + 1):])
            increases = (recent[1:] > recent[:-1]).sum(axis=0)
            oscillating = increases <= k * RHO
            stalled = ~reduced_last_check & (loss_best_last_check >= loss_best)
            reduce = oscillating | stalled
            reduced_last_check = reduce
            loss_best_last_check = loss_best.copy()
            if reduce.any():
                step[reduce] /= 2.0
                x_adv[reduce] = x_best[reduce]
                grad[reduce] = grad_best[reduce]
            since_check = 0
            k = max(k - k_decr, k_min)
    return x_best, t


# --- presets ----------------------------------------------------------------------

PRESETS = ("plain", "transfer", "eot", "tricks")


def make_spec(attack: str, preset: str, epsilon, seed: int = 0, **overrides) -> AttackSpec:
    """Attack configurations used in the evaluation.

    PGD: ``plain`` 500 steps on the target; ``transfer`` adds the
    mean-aggregation surrogate; ``eot`` adds 100 EoT draws; ``tricks`` adds
    400 more steps (900) and the hinge loss with kappa 0.
    APGD (cross-entropy, 100 steps): ``plain``; ``transfer``; ``eot`` adds 100
    EoT draws; ``tricks`` adds the 3/2/1 x epsilon radius schedule and 1000
    total steps.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")
    base = dict(epsilon=epsilon, seed=seed, name=f"{attack}-{preset}")
    if attack == "pgd":
        base.update(steps=500)
        if preset in ("transfer", "eot", "tricks"):
            base.update(surrogate="mean_aggregation")
        if preset in ("eot", "tricks"):
            base.update(eot_samples=100)
        if preset == "tricks":
            base.update(steps=900, loss="hinge", kappa=0.0)
    elif attack == "apgd":
        base.update(steps=100)
        if preset in ("transfer", "eot", "tricks"):
            base.update(surrogate="mean_aggregation")
        if preset in ("eot", "tricks"):
            base.update(eot_samples=100)
        if preset == "tricks":
            base.update(steps=1000, radius_schedule=LARGE_RADIUS_SCHEDULE)
    else:
        raise ConfigError(f"unknown attack {attack!r}")
    base.update(overrides)
    return AttackSpec(**base)


def run_attack(attack: str, model_target, x, y, spec: AttackSpec, model_surrogate=None) -> AttackTrace:
    if attack == "pgd":
        return pgd(model_target, model_surrogate, x, y, spec)
    if attack == "apgd":
        return apgd(model_target, model_surrogate, x, y, spec)
    raise ConfigError(f"unknown attack {attack!r}")


# --- composition and evaluation --------------------------------------------------

def best_of_both(traces: list, model, policy: RandomnessPolicy | None = None) -> AdvBatch:
    """Per sample, the first trace (in the given order) whose final example the
    target misclassifies under ``policy``; the clean image if none does.
    Accepts AttackTrace or AdvBatch items."""
    if not traces:
        raise ConfigError("need at least one trace")
    ref = traces[0]
    for tr in traces[1:]:
        if tr.epsilon != ref.epsilon:
            raise ConfigError(f"epsilon mismatch: {tr.epsilon} vs {ref.epsilon}")
        if tr.originals.shape != ref.originals.shape or not np.array_equal(tr.originals, ref.originals):
            raise ConfigError("traces attack different originals")
        if not np.array_equal(tr.labels, ref.labels):
            raise ConfigError("traces use different labels")
    policy = policy or RandomnessPolicy.fresh(ref.seed)
    chosen = ref.originals.copy()
    open_ = np.ones(len(chosen), dtype=bool)
    for tr in traces:
        if not open_.any():
            break
        idx = np.flatnonzero(open_)
        z = model.logits(T.tensor(tr.adversarials[idx].astype(_model_dtype(model))), policy).data
        fooled = idx[z.argmax(axis=1) != tr.labels[idx]]
        chosen[fooled] = tr.adversarials[fooled]
        open_[fooled] = False
    name = "best_of_both(" + ",".join(tr.name for tr in traces) + ")"
    return AdvBatch(ref.originals, chosen, ref.labels, ref.epsilon, name, ref.seed)


@dataclass
class RobustResult:
    mean: float
    std: float
    accuracies: list[float] = field(default_factory=list)

    def __str__(self) -> str:
        return f"{100 * self.mean:.1f} ± {100 * self.std:.1f}"


def evaluate_robust(model, batch: AdvBatch, runs: int = 10, seed: int = 0, mode: str = "fresh",
                    chunk: int = 256) -> RobustResult:
    """Robust accuracy over ``runs`` randomized evaluations.

    Run ``r`` classifies every adversarial example under a policy seeded with
    ``seed + r`` (``mode`` fresh or frozen). Accuracy counts all samples,
    including ones the model already gets wrong on clean inputs. Reports the
    mean and the sample standard deviation across runs.
    """
    accs = []
    dtype = _model_dtype(model)
    for r in range(runs):
        policy = RandomnessPolicy(mode, seed + r)
        hits = 0
        for s in range(0, len(batch), chunk):
            xs = T.tensor(batch.adversarials[s:s + chunk].astype(dtype))
            pred = model.logits(xs, policy).data.argmax(axis=1)
            hits += int((pred == batch.labels[s:s + chunk]).sum())
        accs.append(hits / len(batch))
    std = float(np.std(accs, ddof=1)) if runs > 1 else 0.0
    return RobustResult(float(np.mean(accs)), std, accs)
