"""Multi-fidelity trust-region optimization over the FOM / RB / kernel hierarchy.

Four variants share one code path:

``FomOpt``
    projected BFGS with Armijo backtracking on the full-order model.
``TrRbOpt``
    trust region on the reduced-basis model, membership tested for every
    backtracking candidate.
``RelaxedTrRbOpt``
    relaxed trust region, membership tested only at checkpoints.
``RelaxedTrRbMlOpt``
    as above, with the kernel surrogate answering most inner queries.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from mfopt.estimators import objective_bound_rb, relative_objective_bound
from mfopt.kernel import KernelModel, eval_output_ml, train
from mfopt.rb import RbModel

VARIANTS = ("FomOpt", "TrRbOpt", "RelaxedTrRbOpt", "RelaxedTrRbMlOpt")

# inner-loop exit reasons
CONVERGED = "converged"
TR_BOUNDARY = "tr_boundary"
STALLED_ON_RB = "stalled_on_rb"


@dataclass(frozen=True)
class TrConfig:
    tau: float = 1e-3
    tau_sub: float = 5e-4
    eps_L0: float = 0.1
    beta1: float = 0.95
    beta2: float = 0.95
    alpha0: float = 1e-3
    alpha_L0: float = 0.01
    kappa_bt: float = 0.5
    alpha_arm: float = 1e-6
    eps_cutoff: float = 1e-6
    l_check: int = 25
    l_warmup: int = 3
    max_outer: int = 50
    max_inner: int = 500
    max_backtrack: int = 30
    kernel_width: float = 0.01
    kernel_eta: float = 1e-12
    n_train: int = 10

    def __post_init__(self):
        for name in ("kappa_bt", "beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        for name in ("tau", "tau_sub", "eps_L0", "alpha0", "alpha_L0", "alpha_arm",
                     "eps_cutoff", "kernel_width"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.tau_sub > self.tau:
            raise ValueError("tau_sub must not exceed tau")
        if self.kernel_eta < 0:
            raise ValueError("kernel_eta must be nonnegative")
        for name in ("l_check", "max_outer", "max_inner", "max_backtrack", "n_train"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.l_warmup < 0:
            raise ValueError("l_warmup must be nonnegative")


@dataclass
class OuterState:
    i: int
    mu: np.ndarray
    eps_L: float
    alpha_L: float
    rb: RbModel
    ml: KernelModel | None = None
    fom_grad: np.ndarray | None = None
    shrinks: int = 0

    def shrink(self, cfg):
        self.eps_L *= cfg.beta1
        self.alpha_L *= cfg.beta2
        self.shrinks += 1


@dataclass
class RunRecord:
    variant: str
    mu0: np.ndarray
    history: list = field(default_factory=list)
    queries: list = field(default_factory=list)       # (fidelity, seconds)
    events: list = field(default_factory=list)
    inner_decay: list = field(default_factory=list)   # (outer i, l, fidelity, J before, J after)
    outer_decay: list = field(default_factory=list)   # (outer i, J^(i)(mu^(i)), J^(i+1)(mu^(i+1)))
    train_errors: list = field(default_factory=list)
    estimator_time: float = 0.0
    extension_time: float = 0.0
    training_time: float = 0.0
    outer_iters: int = 0
    mu: np.ndarray | None = None
    J: float = np.nan
    criticality: float = np.nan
    status: str = "running"
    total_time: float = 0.0

    def count(self, fidelity):
        return sum(1 for f, _ in self.queries if f == fidelity)

    def time(self, fidelity):
        return float(sum(t for f, t in self.queries if f == fidelity))

    @property
    def converged(self):
        return self.status == "converged"

    def decay_violations(self):
        """Accepted inner or outer steps that increased the stored model value."""
        bad = [d for d in self.inner_decay if d[4] > d[3]]
        bad += [d for d in self.outer_decay if d[2] > d[1]]
        return bad


# -- building blocks -----------------------------------------------------------

def project_box(mu, bounds):
    mu = np.asarray(mu, dtype=float)
    if not np.all(np.isfinite(mu)):
        raise ValueError("cannot project a non-finite parameter")
    return np.clip(mu, bounds[0], bounds[1])


def criticality(mu, g, bounds):
    """Projected-gradient stationarity measure ``|mu - P(mu - g)|``."""
    mu = np.asarray(mu, dtype=float)
    return float(np.linalg.norm(mu - project_box(mu - np.asarray(g, dtype=float), bounds)))


def bfgs_direction(H, g):
    g = np.asarray(g, dtype=float)
    d = -H @ g
    if not (-g @ H @ g < 0.0):
        d = -g
    nrm = np.linalg.norm(d)
    return d / nrm if nrm > 0.0 else np.zeros_like(g)


def bfgs_update(H, s, y):
    """Inverse-BFGS update; skipped when the curvature condition fails."""
    s, y = np.asarray(s, dtype=float), np.asarray(y, dtype=float)
    sy = s @ y
    if not sy > 1e-14 * np.linalg.norm(s) * np.linalg.norm(y):
        return H
    rho = 1.0 / sy
    V = np.eye(s.size) - rho * np.outer(s, y)
    return V @ H @ V.T + rho * np.outer(s, s)


@dataclass
class Evaluation:
    mu: np.ndarray
    J: float
    grad: np.ndarray
    fidelity: str
    u: object = None
    p: object = None


@dataclass(frozen=True)
class Accepted:
    mu: np.ndarray
    evaluation: Evaluation
    k: int


class NoProgress:
    pass


NO_PROGRESS = NoProgress()


def backtrack(evaluate, mu_l, J_l, d, alpha0, bounds, cfg, enforce_cutoff=True, admissible=None):
    """Projected Armijo backtracking along `d`.

    `evaluate(mu)` returns an :class:`Evaluation`; `admissible(evaluation)`
    optionally rejects candidates (trust-region membership).  Returns
    :class:`Accepted` or ``NO_PROGRESS``.
    """
    d = np.asarray(d, dtype=float)
    if not np.any(d):
        return NO_PROGRESS
    for k in range(cfg.max_backtrack):
        step = alpha0 * cfg.kappa_bt**k
        cand = project_box(mu_l + step * d, bounds)
        dist = float(np.linalg.norm(cand - mu_l))
        if dist == 0.0 or (enforce_cutoff and dist < cfg.eps_cutoff):
            return NO_PROGRESS
        e = evaluate(cand)
        if admissible is not None and not admissible(e):
            continue
        if J_l - e.J >= cfg.alpha_arm / step * dist**2:
            return Accepted(cand, e, k)
    return NO_PROGRESS


class Evaluator:
    """Timed, counted access to the three fidelities."""

    def __init__(self, fom, record):
        self.fom = fom
        self.record = record

    def _timed(self, fidelity, fn, *args):
        t = time.perf_counter()
        out = fn(*args)
        self.record.queries.append((fidelity, time.perf_counter() - t))
        return out

    def full(self, mu):
        J, g, u, p = self._timed("FOM", self.fom.eval_output, mu)
        return Evaluation(np.array(mu, dtype=float), J, g, "FOM", u, p)

    def reduced(self, rb, mu):
        J, g, u, p = self._timed("RB", rb.eval_output, mu)
        return Evaluation(np.array(mu, dtype=float), J, g, "RB", u, p)

    def learned(self, ml, rb, mu):
        J, g, _ = self._timed("ML", eval_output_ml, ml, rb, mu, False)
        return Evaluation(np.array(mu, dtype=float), J, g, "ML")

    def relative_bound(self, rb, e):
        t = time.perf_counter()
        delta = objective_bound_rb(rb, e.mu, e.u, e.p, self.fom.constants(e.mu))
        self.record.estimator_time += time.perf_counter() - t
        return relative_objective_bound(delta, e.J)

    def objective_bound(self, rb, e):
        t = time.perf_counter()
        delta = objective_bound_rb(rb, e.mu, e.u, e.p, self.fom.constants(e.mu))
        self.record.estimator_time += time.perf_counter() - t
        return delta


# -- inner loop ------------------------------------------------------------------

@dataclass
class InnerResult:
    mu: np.ndarray
    reason: str
    J_agc: float | None
    J_start: float
    steps: int
    ml: KernelModel | None


def inner_loop(state, cfg, ev, relaxed=True, use_ml=True, start=None):
    """Solve one trust-region sub-problem; returns :class:`InnerResult`.

    `start` may carry an RB evaluation at ``state.mu`` that was already
    computed with ``state.rb``.
    """
    rb, bounds, rec = state.rb, ev.fom.bounds, ev.record
    alpha0 = min(cfg.alpha0, state.alpha_L)
    mu_l = np.array(state.mu, dtype=float)
    rb.buffer.clear()
    ml = KernelModel.zero(rb, cfg.kernel_width, cfg.kernel_eta) if use_ml else None

    def train_ml(ml):
        if not rb.buffer.dirty:
            return ml
        t = time.perf_counter()
        ml = train(rb.buffer, rb, cfg.kernel_width, cfg.kernel_eta, previous=ml)
        rec.training_time += time.perf_counter() - t
        rec.train_errors.append(ml.train_error)
        return ml

    last_push = [None]

    def push(mu, u):
        # the same iterate can be re-evaluated (checkpoint, then fallback)
        if use_ml and (last_push[0] is None or np.any(last_push[0] != mu)):
            rb.push_training(mu, u)
            last_push[0] = np.array(mu)

    def rb_at(mu):
        e = ev.reduced(rb, mu)
        push(mu, e.u)
        return e

    if start is not None and start.fidelity == "RB":
        cur = start
        push(mu_l, cur.u)
    else:
        cur = rb_at(mu_l)
    J_start = cur.J
    H = np.eye(mu_l.size)
    d = bfgs_direction(H, cur.grad)
    l, ml_on, no_progress = 0, True, False
    J_agc, reason = None, CONVERGED
    if use_ml:
        ml = train_ml(ml)

    admissible = None
    if not relaxed:
        def admissible(e):
            return ev.relative_bound(rb, e) <= state.eps_L

    while l == 0 or criticality(mu_l, cur.grad, bounds) > cfg.tau_sub:
        if l >= cfg.max_inner:
            reason = TR_BOUNDARY
            rec.events.append(("inner_budget", state.i, l))
            break
        if relaxed and (l % cfg.l_check == 0 or no_progress):
            if cur.fidelity != "RB":
                cur = rb_at(mu_l)
                ml = train_ml(ml) if use_ml else ml
            if ev.relative_bound(rb, cur) > state.eps_L:
                reason = TR_BOUNDARY
                break
        no_progress = False
        fidelity = "ML" if (use_ml and ml_on and l > cfg.l_warmup) else "RB"
        if fidelity == "ML":
            base = ev.learned(ml, rb, mu_l)

            def evaluate(mu):
                return ev.learned(ml, rb, mu)
        else:
            base = cur if cur.fidelity == "RB" else rb_at(mu_l)

            def evaluate(mu):
                return ev.reduced(rb, mu)
        out = backtrack(evaluate, mu_l, base.J, d, alpha0, bounds, cfg,
                        enforce_cutoff=l > 0, admissible=admissible)
        if out is NO_PROGRESS:
            no_progress = True
            if fidelity == "RB":
                reason = STALLED_ON_RB
                break
            # retry from the same iterate with the reduced-basis model
            ml_on = False
            cur = rb_at(mu_l)
            ml = train_ml(ml)
            H = np.eye(mu_l.size)
            d = bfgs_direction(H, cur.grad)
            rec.events.append(("ml_fallback", state.i, l))
            continue
        e = out.evaluation
        rec.inner_decay.append((state.i, l, fidelity, base.J, e.J))
        if l == 0:
            J_agc = e.J
        H = bfgs_update(H, out.mu - mu_l, e.grad - base.grad)
        d = bfgs_direction(H, e.grad)
        if fidelity == "RB":
            push(out.mu, e.u)
        mu_l, cur = out.mu, e
        ml_on = True
        l += 1
        rec.history.append(dict(i=state.i, l=l, fidelity=fidelity, J=e.J,
                                criticality=criticality(mu_l, e.grad, bounds),
                                eps_L=state.eps_L, alpha_L=state.alpha_L))
        if use_ml:
            ml = train_ml(ml)
    return InnerResult(mu_l, reason, J_agc, J_start, l, ml)


# -- outer loop ------------------------------------------------------------------

def _extend(state, ev, mu):
    e = ev.full(mu)
    t = time.perf_counter()
    rb = state.rb.extend(mu, e.u, e.p)
    ev.record.extension_time += time.perf_counter() - t
    return rb, e


def outer_loop(fom, mu0, cfg, variant="RelaxedTrRbMlOpt"):
    if variant not in VARIANTS[1:]:
        raise ValueError(f"unknown trust-region variant {variant!r}")
    relaxed = variant != "TrRbOpt"
    use_ml = variant == "RelaxedTrRbMlOpt"
    mu0 = fom.check_parameter(mu0)
    rec = RunRecord(variant, mu0.copy())
    ev = Evaluator(fom, rec)
    t_start = time.perf_counter()
    bounds = fom.bounds

    state = OuterState(0, mu0.copy(), cfg.eps_L0, cfg.alpha_L0, RbModel.empty(fom, cfg.n_train))
    state.rb, e_h = _extend(state, ev, mu0)
    state.fom_grad, J_h = e_h.grad, e_h.J
    start = None
    while True:
        crit = criticality(state.mu, state.fom_grad, bounds)
        rec.history.append(dict(i=state.i, l=0, fidelity="FOM", J=J_h, criticality=crit,
                                eps_L=state.eps_L, alpha_L=state.alpha_L))
        if crit <= cfg.tau:
            rec.status = "converged"
            break
        if state.i >= cfg.max_outer:
            rec.status = "max_outer"
            break
        res = inner_loop(state, cfg, ev, relaxed=relaxed, use_ml=use_ml, start=start)
        start = None
        state.ml = res.ml
        rec.events.append(("inner_exit", state.i, res.reason, res.steps))
        if res.J_agc is None:
            rec.events.append(("reject", state.i, "no_agc"))
            state.shrink(cfg)
            state.i += 1
            continue
        mu_new = res.mu
        e = ev.reduced(state.rb, mu_new)
        delta = ev.objective_bound(state.rb, e)
        accepted = False
        if e.J + delta < res.J_agc:
            state.rb, e_h = _extend(state, ev, mu_new)
            accepted = True
            rec.events.append(("accept", state.i, "sufficient"))
        elif e.J - delta > res.J_agc:
            rec.events.append(("reject", state.i, "necessary"))
        else:
            state.rb, e_h = _extend(state, ev, mu_new)
            start = ev.reduced(state.rb, mu_new)
            accepted = start.J <= res.J_agc
            rec.events.append(("accept" if accepted else "reject", state.i, "easdc"))
        if accepted:
            if start is None:
                start = ev.reduced(state.rb, mu_new)
            rec.outer_decay.append((state.i, res.J_start, start.J))
            state.mu, state.fom_grad, J_h = mu_new, e_h.grad, e_h.J
        else:
            state.shrink(cfg)
            rec.events.append(("shrink", state.i, state.eps_L, state.alpha_L))
            # a rejected candidate leaves the iterate, so the stored start is stale
            start = None
        state.i += 1
    rec.outer_iters = state.i
    rec.mu, rec.J, rec.criticality = state.mu.copy(), J_h, crit
    rec.total_time = time.perf_counter() - t_start
    return rec


def fom_opt(fom, mu0, cfg):
    """Projected BFGS with Armijo backtracking on the full-order model."""
    mu = fom.check_parameter(mu0).copy()
    rec = RunRecord("FomOpt", mu.copy())
    ev = Evaluator(fom, rec)
    t_start = time.perf_counter()
    bounds = fom.bounds
    cur = ev.full(mu)
    H = np.eye(mu.size)
    d = bfgs_direction(H, cur.grad)
    it = 0
    while True:
        crit = criticality(mu, cur.grad, bounds)
        rec.history.append(dict(i=it, l=0, fidelity="FOM", J=cur.J, criticality=crit,
                                eps_L=np.nan, alpha_L=np.nan))
        if crit <= cfg.tau:
            rec.status = "converged"
            break
        if it >= cfg.max_inner:
            rec.status = "max_iter"
            break
        out = backtrack(ev.full, mu, cur.J, d, cfg.alpha0, bounds, cfg, enforce_cutoff=False)
        if out is NO_PROGRESS:
            rec.status = "stalled"
            break
        e = out.evaluation
        rec.inner_decay.append((it, 0, "FOM", cur.J, e.J))
        H = bfgs_update(H, out.mu - mu, e.grad - cur.grad)
        d = bfgs_direction(H, e.grad)
        mu, cur = out.mu, e
        it += 1
    rec.outer_iters = it
    rec.mu, rec.J, rec.criticality = mu.copy(), cur.J, crit
    rec.total_time = time.perf_counter() - t_start
    return rec


def run_variant(fom, variant, mu0, cfg=None):
    cfg = TrConfig() if cfg is None else cfg
    if variant == "FomOpt":
        return fom_opt(fom, mu0, cfg)
    return outer_loop(fom, mu0, cfg, variant)
