"""Parametric physics-informed training of network priors.

The trainable prior is w_theta wrapped in a boundary composition (see
priors); training minimizes a weighted sum of Monte-Carlo loss terms over
collocation points drawn uniformly on Omega x M:

    J = w_r J_r + w_b J_b + w_data J_data + w_sob J_sob

with J_r the mean squared strong-form residual |L(u_theta) - f|^2, J_b the
mean squared Dirichlet mismatch, J_data a mean squared data misfit, and
J_sob the mean squared spatial gradient of the residual (Sobolev term).
All derivatives of u_theta are exact; divergence-form diffusion is expanded
with the analytic derivatives of D.

Optimization runs Adam (bias-corrected, beta1=0.9, beta2=0.999, eps=1e-8)
with the learning rate multiplied by `decay` every 20 epochs, optionally
switching to L-BFGS (memory 10, backtracking Armijo line search) at epoch
`n_switch`.  Every epoch draws a fresh uniform batch.  When batch_size
splits the interior set, each epoch performs ceil(N_col/batch_size) Adam
updates; the boundary and data sets are small and enter every update whole.
L-BFGS always consumes the full batch so its line search sees a
deterministic objective.

Randomness is organized as named child streams of the config seed so that
network init, collocation sampling, and parameter sampling never share
state.  Identical config and seed reproduce the loss history bit for bit in
single-threaded mode.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, TrainingError, UnsupportedError
from .neural import DerivativeBundle
from .priors import Prior

__all__ = [
    "AdamState",
    "CollocationBatch",
    "EpochRecord",
    "LbfgsState",
    "TrainingConfig",
    "adam_step",
    "boundary_loss",
    "data_loss",
    "lbfgs_step",
    "network_seed",
    "residual_loss",
    "sample_collocation",
    "seed_stream",
    "sobolev_loss",
    "train",
    "write_loss_history",
]

log = logging.getLogger("enrichfem.training")

# named child streams of the run seed; constants are part of the on-disk
# reproducibility contract and must never be renumbered
_STREAMS = {"init": 0, "sampling": 1, "training": 2, "param_sample": 3}


def seed_stream(seed: int, name: str) -> np.random.SeedSequence:
    """Independent, reproducible child seed for one named purpose."""
    return np.random.SeedSequence(seed, spawn_key=(_STREAMS[name],))


def network_seed(seed: int) -> int:
    """Integer seed for MlpConfig derived from the 'init' stream."""
    return int(seed_stream(seed, "init").generate_state(1)[0])


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters of one training run.

    box is the parameter-space sampling box, shape (p, 2); None means the
    problem's own box.  batch_size 0 means full batch.  n_switch 0 means
    Adam throughout.
    """

    n_epochs: int
    n_col: int = 0
    n_bc: int = 0
    n_data: int = 0
    lr: float = 1e-3
    decay: float = 1.0
    n_switch: int = 0
    batch_size: int = 0
    w_r: float = 1.0
    w_b: float = 0.0
    w_data: float = 0.0
    w_sob: float = 0.0
    seed: int = 0
    box: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("w_r", "w_b", "w_data", "w_sob"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        for name in ("n_epochs", "n_col", "n_bc", "n_data", "n_switch",
                     "batch_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lr <= 0 or self.decay <= 0:
            raise ConfigError("lr and decay must be positive")
        if self.n_col == 0 and (self.w_r > 0 or self.w_sob > 0):
            raise ConfigError("N_col must be positive when w_r or w_sob is")
        if self.n_bc == 0 and self.w_b > 0:
            raise ConfigError("N_bc must be positive when w_b is")
        if self.n_data == 0 and self.w_data > 0:
            raise ConfigError("N_data must be positive when w_data is")
        if self.box is not None:
            box = np.asarray(self.box, dtype=float)
            if box.ndim != 2 or box.shape[1] != 2 or np.any(box[:, 0] > box[:, 1]):
                raise ConfigError("box must have shape (p, 2) with lo <= hi")
            object.__setattr__(self, "box", box)


@dataclass
class CollocationBatch:
    """One epoch's sample: interior pairs, boundary pairs, data triples."""

    x_col: np.ndarray
    mu_col: np.ndarray
    x_bc: np.ndarray
    mu_bc: np.ndarray
    x_data: np.ndarray
    mu_data: np.ndarray
    u_data: np.ndarray


def _uniform_in(box: np.ndarray, n: int, rng) -> np.ndarray:
    lo, hi = box[:, 0], box[:, 1]
    return lo + (hi - lo) * rng.uniform(size=(n, box.shape[0]))


def _interior_points(problem, n: int, rng) -> np.ndarray:
    dom = np.asarray(problem.domain, dtype=float)
    if problem.name != "annulus":
        return _uniform_in(dom, n, rng)
    # rejection from the bounding square, keeping phi_I > 0 and phi_E > 0
    kept = []
    have = 0
    while have < n:
        cand = _uniform_in(dom, max(64, 2 * (n - have)), rng)
        ok = (problem.level_set(cand) > 0) & (problem.level_set_outer(cand) > 0)
        cand = cand[ok]
        kept.append(cand)
        have += len(cand)
    return np.concatenate(kept)[:n]


def _boundary_points(problem, n: int, rng) -> np.ndarray:
    """Uniform samples of the Dirichlet-marked boundary."""
    if problem.name == "annulus":
        angle = rng.uniform(0.0, 2.0 * np.pi, size=n)
        return np.column_stack([np.cos(angle), np.sin(angle)])
    dom = np.asarray(problem.domain, dtype=float)
    if problem.dim == 1:
        side = rng.integers(0, 2, size=n)
        return np.where(side, dom[0, 1], dom[0, 0])[:, None]
    (x0, x1), (y0, y1) = dom
    side = rng.integers(0, 4, size=n)
    t = rng.uniform(size=n)
    pts = np.empty((n, 2))
    for s, (px, py) in enumerate(
        [(None, y0), (x1, None), (None, y1), (x0, None)]
    ):
        m = side == s
        if px is None:
            pts[m, 0] = x0 + t[m] * (x1 - x0)
            pts[m, 1] = py
        else:
            pts[m, 0] = px
            pts[m, 1] = y0 + t[m] * (y1 - y0)
    return pts


def sample_collocation(problem, box, n_col: int, n_bc: int, rng,
                       n_data: int = 0) -> CollocationBatch:
    """Draw one uniform i.i.d. batch on Omega x M.

    Data triples evaluate the problem's analytic solution at fresh interior
    samples; requesting them for a problem without one is a ConfigError.
    """
    box = np.asarray(box, dtype=float)
    d = problem.dim
    x_col = _interior_points(problem, n_col, rng) if n_col else np.zeros((0, d))
    mu_col = _uniform_in(box, n_col, rng)
    x_bc = _boundary_points(problem, n_bc, rng) if n_bc else np.zeros((0, d))
    mu_bc = _uniform_in(box, n_bc, rng)
    if n_data:
        if problem.solution is None:
            raise ConfigError(
                f"problem {problem.name} has no analytic solution to draw "
                "data from"
            )
        x_data = _interior_points(problem, n_data, rng)
        mu_data = _uniform_in(box, n_data, rng)
        u_data = np.asarray(problem.solution(x_data, mu_data), dtype=float)
    else:
        x_data = np.zeros((0, d))
        mu_data = _uniform_in(box, 0, rng)
        u_data = np.zeros(0)
    return CollocationBatch(x_col, mu_col, x_bc, mu_bc, x_data, mu_data, u_data)


def _peclet_values(problem, mu):
    """Per-point Peclet numbers, or None when Pe is identically 1."""
    if problem.peclet_of is None:
        return None
    return np.asarray(problem.peclet_of(np.asarray(mu, dtype=float)), dtype=float)


def _over_pe(values, pe):
    return values if pe is None else values / pe


def _residual_values(problem, x, mu, b: DerivativeBundle) -> np.ndarray:
    """Strong-form residual L(u_theta) - f at interior points."""
    r = -np.asarray(problem.source(x, mu), dtype=float)
    if problem.reaction is not None:
        r = r + problem.reaction(x, mu) * b.value
    if problem.convection is not None:
        r = r + b.gradient @ problem.convection
    pe = _peclet_values(problem, mu)
    if problem.diffusion is None:
        return r - _over_pe(b.laplacian_values(), pe)
    if b.hessian is None:
        raise UnsupportedError(
            "residual with variable diffusion needs the full Hessian, which "
            "this prior composition does not provide"
        )
    d = x.shape[1]
    tv = [[f.taylor(x, mu, 1) for f in row] for row in problem.diffusion]
    div = np.zeros(len(x))
    for a in range(d):
        for c in range(d):
            div += tv[a][c].grad[:, a] * b.gradient[:, c]
            div += tv[a][c].val * b.hessian[:, a, c]
    return r - _over_pe(div, pe)


def _residual_gradient_values(problem, x, mu, b: DerivativeBundle) -> np.ndarray:
    """Spatial gradient of the residual, shape (n, d); identity diffusion only."""
    if problem.diffusion is not None:
        raise UnsupportedError(
            "Sobolev residual gradient needs third derivatives of "
            "div(D grad u); only identity diffusion is supported"
        )
    sg = -problem.source.taylor(x, mu, 1).grad
    if problem.reaction is not None:
        rt = problem.reaction.taylor(x, mu, 1)
        sg = sg + rt.grad * b.value[:, None] + rt.val[:, None] * b.gradient
    if problem.convection is not None:
        sg = sg + np.einsum("ndc,c->nd", b.hessian, problem.convection)
    pe = _peclet_values(problem, mu)
    return sg - _over_pe(b.lap_gradient, pe[:, None] if pe is not None else None)


def residual_loss(prior: Prior, problem, batch: CollocationBatch) -> float:
    """Mean squared strong-form residual over the interior batch."""
    if len(batch.x_col) == 0:
        return 0.0
    b = prior.evaluate(batch.x_col, batch.mu_col, order=2)
    r = _residual_values(problem, batch.x_col, batch.mu_col, b)
    return float(np.mean(r**2))


def boundary_loss(prior: Prior, g, batch: CollocationBatch) -> float:
    """Mean squared Dirichlet mismatch |u_theta - g|^2 over boundary points."""
    if len(batch.x_bc) == 0:
        return 0.0
    u = prior(batch.x_bc, batch.mu_bc)
    gv = np.asarray(g(batch.x_bc, batch.mu_bc), dtype=float)
    return float(np.mean((u - gv) ** 2))


def data_loss(prior: Prior, batch: CollocationBatch) -> float:
    """Mean squared misfit against the data triples."""
    if len(batch.x_data) == 0:
        return 0.0
    u = prior(batch.x_data, batch.mu_data)
    return float(np.mean((u - batch.u_data) ** 2))


def sobolev_loss(prior: Prior, problem, batch: CollocationBatch) -> float:
    """Mean of |grad_x(L(u_theta) - f)|^2 over the interior batch."""
    if len(batch.x_col) == 0:
        return 0.0
    b = prior.evaluate(batch.x_col, batch.mu_col, order=3)
    sg = _residual_gradient_values(problem, batch.x_col, batch.mu_col, b)
    return float(np.sum(sg**2) / len(batch.x_col))


def _interior_evaluator(problem, x, mu, w_r, w_sob, stash):
    """Evaluator for the residual (+ Sobolev) terms on one interior chunk.

    Returns the weighted loss and its cotangent; raw term values land in
    `stash`.  The residual is affine in the bundle slots, so the cotangent
    is assembled from the same coefficient values that built the residual.
    """
    n = len(x)
    d = x.shape[1]
    pe = _peclet_values(problem, mu)
    reaction = problem.reaction(x, mu) if problem.reaction is not None else None
    diff_tv = (
        None
        if problem.diffusion is None
        else [[f.taylor(x, mu, 1) for f in row] for row in problem.diffusion]
    )

    def evaluator(b: DerivativeBundle):
        cv = np.zeros(n)
        cg = np.zeros((n, d))
        ch = None
        cl = np.zeros(n)
        ct = None
        loss = 0.0

        r = _residual_values(problem, x, mu, b)
        stash["J_r"] = float(np.mean(r**2))
        if w_r > 0:
            loss += w_r * stash["J_r"]
            rb = (2.0 * w_r / n) * r
            if reaction is not None:
                cv += rb * reaction
            if problem.convection is not None:
                cg += rb[:, None] * problem.convection
            if diff_tv is None:
                cl -= _over_pe(rb, pe)
            else:
                ch = np.zeros((n, d, d))
                rbp = _over_pe(rb, pe)
                for a in range(d):
                    for c in range(d):
                        ch[:, a, c] -= rbp * diff_tv[a][c].val
                        cg[:, c] -= rbp * diff_tv[a][c].grad[:, a]

        if w_sob > 0:
            sg = _residual_gradient_values(problem, x, mu, b)
            stash["J_sob"] = float(np.sum(sg**2) / n)
            loss += w_sob * stash["J_sob"]
            sb = (2.0 * w_sob / n) * sg
            if reaction is not None:
                rt = problem.reaction.taylor(x, mu, 1)
                cv += np.einsum("nd,nd->n", sb, rt.grad)
                cg += rt.val[:, None] * sb
            if problem.convection is not None:
                if ch is None:
                    ch = np.zeros((n, d, d))
                ch += sb[:, :, None] * problem.convection[None, None, :]
            ct = -_over_pe(sb, pe[:, None] if pe is not None else None)

        cot = DerivativeBundle(
            value=cv, gradient=cg, hessian=ch, laplacian=cl, lap_gradient=ct
        )
        return loss, cot

    return evaluator


def _pointwise_sq_evaluator(target):
    """Evaluator for mean |u - target|^2; cotangent touches the value only."""

    def evaluator(b: DerivativeBundle):
        res = b.value - target
        loss = float(np.mean(res**2))
        return loss, DerivativeBundle(value=(2.0 / len(res)) * res)

    return evaluator


@dataclass
class AdamState:
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_init(theta: np.ndarray) -> AdamState:
    theta = np.asarray(theta, dtype=float).copy()
    return AdamState(theta, np.zeros_like(theta), np.zeros_like(theta))


def adam_step(state: AdamState, grad: np.ndarray, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; mutates and returns state.theta."""
    state.step += 1
    state.m = 0.9 * state.m + 0.1 * grad
    state.v = 0.999 * state.v + 0.001 * grad * grad
    m_hat = state.m / (1.0 - 0.9**state.step)
    v_hat = state.v / (1.0 - 0.999**state.step)
    state.theta = state.theta - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    return state.theta


@dataclass
class LbfgsState:
    theta: np.ndarray
    memory: deque = field(default_factory=lambda: deque(maxlen=10))
    fallbacks: int = 0


def _two_loop(memory, g: np.ndarray) -> np.ndarray:
    """Implicit H.g with the stored curvature pairs."""
    q = g.copy()
    alphas = []
    for s, y in reversed(memory):
        a = (s @ q) / (y @ s)
        alphas.append(a)
        q -= a * y
    if memory:
        s, y = memory[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), a in zip(memory, reversed(alphas)):
        b = (y @ q) / (y @ s)
        q += (a - b) * s
    return q


_ARMIJO_C1 = 1e-4
_ARMIJO_SHRINK = 0.5
_ARMIJO_MAX = 25


def _armijo(evaluator, theta, f0, g0, p):
    """Backtracking line search; returns (accepted, f, g, t)."""
    slope = g0 @ p
    t = 1.0
    for _ in range(_ARMIJO_MAX):
        f_t, g_t = evaluator(theta + t * p)
        if f_t <= f0 + _ARMIJO_C1 * t * slope:
            return True, f_t, g_t, t
        t *= _ARMIJO_SHRINK
    return False, f0, g0, 0.0


def lbfgs_step(state: LbfgsState, evaluator):
    """One L-BFGS update with Armijo backtracking.

    evaluator(theta) -> (loss, grad).  The accepted loss never exceeds the
    starting one.  If the quasi-Newton direction fails the line search, a
    steepest-descent step is tried and the fallback is logged; if that fails
    too, the parameters stay put.  Returns (loss, moved).
    """
    f0, g0 = evaluator(state.theta)
    if not np.any(g0):
        return f0, False
    p = -_two_loop(state.memory, g0)
    ok = g0 @ p < 0
    if ok:
        ok, f_new, g_new, t = _armijo(evaluator, state.theta, f0, g0, p)
    if not ok and state.memory:
        state.fallbacks += 1
        log.warning("L-BFGS line search failed; steepest-descent fallback")
        p = -g0
        ok, f_new, g_new, t = _armijo(evaluator, state.theta, f0, g0, p)
    if not ok:
        state.fallbacks += 1
        log.warning("steepest-descent line search failed; keeping parameters")
        evaluator(state.theta)  # restore term stash at the resting point
        return f0, False
    s = t * p
    y = g_new - g0
    sy = s @ y
    if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
        state.memory.append((s, y))
    state.theta = state.theta + s
    return f_new, True


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    j_total: float
    j_r: float
    j_b: float
    j_data: float
    j_sob: float


def write_loss_history(history, path) -> None:
    """Loss history CSV: epoch, lr, J_total, J_r, J_b, J_data, J_sob."""
    with open(path, "w") as fh:
        fh.write("epoch,lr,J_total,J_r,J_b,J_data,J_sob\n")
        for r in history:
            fh.write(
                "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                % (r.epoch, r.lr, r.j_total, r.j_r, r.j_b, r.j_data, r.j_sob)
            )


def _check_finite(terms: dict, epoch: int) -> None:
    for name, value in terms.items():
        if not math.isfinite(value):
            raise TrainingError(
                f"loss term {name} became non-finite at epoch {epoch}"
            )


def _losses_and_grad(prior, problem, batch, sl, config, theta):
    """Weighted loss, raw term values, and parameter gradient at theta."""
    prior.network.unpack(theta)
    grad = np.zeros(theta.size)
    terms = {"J_r": 0.0, "J_b": 0.0, "J_data": 0.0, "J_sob": 0.0}
    total = 0.0
    if config.w_r > 0 or config.w_sob > 0:
        x = batch.x_col[sl]
        m = batch.mu_col[sl]
        stash = {}
        ev = _interior_evaluator(problem, x, m, config.w_r, config.w_sob, stash)
        order = 3 if config.w_sob > 0 else 2
        loss, g = prior.loss_gradient(x, m, ev, order=order)
        total += loss
        grad += g
        terms["J_r"] = stash.get("J_r", 0.0)
        terms["J_sob"] = stash.get("J_sob", 0.0)
    if config.w_b > 0:
        gv = np.asarray(problem.dirichlet(batch.x_bc, batch.mu_bc), dtype=float)
        loss, g = prior.loss_gradient(
            batch.x_bc, batch.mu_bc, _pointwise_sq_evaluator(gv), order=0
        )
        terms["J_b"] = loss
        total += config.w_b * loss
        grad += config.w_b * g
    if config.w_data > 0:
        loss, g = prior.loss_gradient(
            batch.x_data, batch.mu_data,
            _pointwise_sq_evaluator(batch.u_data), order=0,
        )
        terms["J_data"] = loss
        total += config.w_data * loss
        grad += config.w_data * g
    return total, terms, grad


def _interior_slices(n_col: int, batch_size: int):
    if batch_size <= 0 or batch_size >= n_col:
        return [slice(None)]
    return [slice(i, i + batch_size) for i in range(0, n_col, batch_size)]


def train(problem, prior: Prior, config: TrainingConfig):
    """Optimize a network prior for `problem`; the input prior is untouched.

    Returns (trained prior, list of per-epoch EpochRecord rows).  Epoch rows
    average over the updates of that epoch when the interior set is chunked.
    Aborts with TrainingError when any active loss term turns non-finite.
    """
    if prior.network is None:
        raise UnsupportedError("training requires a network prior")
    if config.w_sob > 0 and problem.diffusion is not None:
        raise UnsupportedError(
            "Sobolev training needs third derivatives of div(D grad u); "
            "only identity diffusion is supported"
        )
    box = config.box if config.box is not None else problem.param_box
    if np.asarray(box).shape[0] != problem.n_params:
        raise ConfigError(
            f"box rows ({np.asarray(box).shape[0]}) do not match problem "
            f"parameters ({problem.n_params})"
        )
    net = prior.network.copy()
    out = Prior(net, prior.composition, lift=prior.lift,
                problem_id=prior.problem_id)
    history = []
    if config.n_epochs == 0:
        return out, history

    rng = np.random.default_rng(seed_stream(config.seed, "sampling"))
    adam = adam_init(net.pack())
    lbfgs = None
    for epoch in range(config.n_epochs):
        lr = config.lr * config.decay ** (epoch // 20)
        batch = sample_collocation(
            problem, box, config.n_col, config.n_bc, rng, n_data=config.n_data
        )
        if config.n_switch > 0 and epoch >= config.n_switch:
            if lbfgs is None:
                lbfgs = LbfgsState(theta=adam.theta.copy())
            terms = {}

            def full_batch(theta, _terms=terms, _batch=batch):
                total, t, g = _losses_and_grad(
                    out, problem, _batch, slice(None), config, theta
                )
                _terms.update(t)
                return total, g

            j_total, _ = lbfgs_step(lbfgs, full_batch)
            _check_finite({**terms, "J_total": j_total}, epoch)
            history.append(EpochRecord(
                epoch, lr, j_total, terms["J_r"], terms["J_b"],
                terms["J_data"], terms["J_sob"],
            ))
            continue

        sums = np.zeros(5)  # J_total, J_r, J_b, J_data, J_sob
        slices = _interior_slices(config.n_col, config.batch_size)
        for sl in slices:
            j_total, terms, grad = _losses_and_grad(
                out, problem, batch, sl, config, adam.theta
            )
            _check_finite({**terms, "J_total": j_total}, epoch)
            sums += (j_total, terms["J_r"], terms["J_b"], terms["J_data"],
                     terms["J_sob"])
            adam_step(adam, grad, lr)
        sums /= len(slices)
        history.append(EpochRecord(epoch, lr, *sums))

    theta = lbfgs.theta if lbfgs is not None else adam.theta
    net.unpack(theta)
    return out, history
