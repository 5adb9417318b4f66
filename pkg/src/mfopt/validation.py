"""Self-checks of the models and error bounds against high-fidelity oracles.

Every check returns a :class:`CheckResult`; :func:`validate` runs the whole
suite on one problem.
"""
from dataclasses import dataclass, field

import numpy as np

from mfopt.estimators import est_output_ml, est_output_rb
from mfopt.harness import build_problem, gradient_check
from mfopt.kernel import eval_output_ml, normalize, train
from mfopt.rb import RbModel, TrainingBuffer


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    stats: dict = field(default_factory=dict)

    def line(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def format(self):
        lines = [c.line() for c in self.checks]
        for c in self.checks:
            for key, (lo, med, hi) in c.stats.items():
                lines.append(f"    {c.name} {key}: min {lo:.3g}  median {med:.3g}  max {hi:.3g}")
        return "\n".join(lines)


def _summary(values):
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return (np.nan, np.nan, np.nan)
    return (float(v.min()), float(np.median(v)), float(v.max()))


def interior_points(fom, n, rng, margin=0.1):
    lo, hi = fom.bounds
    pad = margin * (hi - lo)
    return rng.uniform(lo + pad, hi - pad, size=(n, lo.size))


def check_gradient(fom, mus, rtol=1e-4):
    rows = gradient_check(fom, mus)
    worst = max(float(np.max(r["rel_error"])) for r in rows)
    return CheckResult("FOM gradient vs central differences", worst <= rtol,
                       f"max componentwise relative error {worst:.2e} (tol {rtol:g})")


def reproduction_errors(fom, mus, rb=None):
    """Extend at each parameter in turn; return per-parameter error data."""
    rb = RbModel.empty(fom) if rb is None else rb
    out = []
    for mu in mus:
        Jh, gh, uh, ph = fom.eval_output(mu)
        rb = rb.extend(mu, uh, ph)
        J, g, u, p = rb.eval_output(mu)
        bounds = est_output_rb(rb, mu, u, p, fom.constants(mu), J)
        out.append(dict(mu=np.asarray(mu), J_h=Jh, J_rb=J,
                        rel_J=abs(Jh - J) / max(1.0, abs(Jh)),
                        grad=float(np.max(np.abs(gh - g))),
                        delta_J=bounds.delta_J, delta_dJ=bounds.delta_dJ, n_rb=rb.n_rb))
    return rb, out


def orthonormality_defect(rb):
    G = rb.energy_r
    return float(np.max(np.abs(G - np.eye(rb.n_rb)), initial=0.0))


def check_reproduction(fom, mus, rb=None, j_tol=1e-8, g_tol=1e-6, bound_tol=1e-6, basis_fault=None):
    """Objective, gradient and objective bound at freshly added parameters.

    `basis_fault(rb)` may return a corrupted model to exercise the check.
    """
    rb = RbModel.empty(fom) if rb is None else rb
    errs = []
    ortho = 0.0
    for mu in mus:
        Jh, gh, uh, ph = fom.eval_output(mu)
        rb = rb.extend(mu, uh, ph)
        model = basis_fault(rb) if basis_fault is not None else rb
        ortho = max(ortho, orthonormality_defect(model))
        J, g, u, p = model.eval_output(mu)
        b = est_output_rb(model, mu, u, p, fom.constants(mu), J)
        errs.append((abs(Jh - J) / max(1.0, abs(Jh)), float(np.max(np.abs(gh - g))),
                     b.delta_J / max(1.0, abs(Jh)), float(np.max(b.delta_dJ))))
    e = np.array(errs)
    ok = (e[:, 0].max() <= j_tol and e[:, 1].max() <= g_tol and e[:, 2].max() <= bound_tol
          and ortho <= 1e-8)
    detail = (f"rel J error {e[:, 0].max():.1e}, grad error {e[:, 1].max():.1e}, "
              f"objective bound {e[:, 2].max():.1e}, gradient bound {e[:, 3].max():.1e}, "
              f"basis orthonormality defect {ortho:.1e}")
    return CheckResult("RB reproduction at extension parameters", bool(ok), detail)


def check_gradient_bound(rows, tol=1e-6):
    """Gradient bound at the extension parameters of :func:`reproduction_errors`.

    Roundoff in the stored trajectories leaves a primal residual near 1e-13
    relative, which the output weight amplifies through ``gamma_d``; the bound
    therefore stalls well above zero in double precision.
    """
    worst = max(float(np.max(r["delta_dJ"])) / max(1.0, abs(r["J_h"])) for r in rows)
    return CheckResult("RB gradient bound at extension parameters", worst <= tol,
                       f"max gradient bound / max(1, |J_h|) {worst:.1e} (tol {tol:g})")


def rb_domination(fom, rb, mus, sizes):
    """True errors and bounds over (parameter, truncated basis) pairs."""
    rows = []
    for mu in mus:
        Jh, gh, uh, ph = fom.eval_output(mu)
        for N in sizes:
            sub = RbModel(fom, rb.basis[:, :N])
            J, g, u, p = sub.eval_output(mu)
            b = est_output_rb(sub, mu, u, p, fom.constants(mu), J)
            e_pr = fom.s_norm(uh.steps - sub.reconstruct(u).steps)
            e_ad = fom.s_norm(ph.steps - sub.reconstruct(p).steps)
            rows.append(dict(mu=mu, N=N, e_pr=e_pr, e_ad=e_ad, e_J=abs(Jh - J),
                             e_dJ=np.abs(gh - g), bounds=b))
    return rows


def check_rb_estimators(fom, rb, mus, sizes):
    rows = rb_domination(fom, rb, mus, sizes)
    viol = 0
    eff = {"primal": [], "adjoint": [], "objective": [], "gradient": []}
    for r in rows:
        b = r["bounds"]
        checks = [(b.delta_pr, r["e_pr"], "primal"), (b.delta_ad, r["e_ad"], "adjoint"),
                  (b.delta_J, r["e_J"], "objective")]
        checks += [(bd, er, "gradient") for bd, er in zip(b.delta_dJ, r["e_dJ"])]
        for bound, err, key in checks:
            viol += int(bound < err)
            if err > 0:
                eff[key].append(bound / err)
    stats = {f"effectivity {k}": _summary(v) for k, v in eff.items()}
    return CheckResult("RB error bounds dominate true errors", viol == 0,
                       f"{viol} violations over {len(rows)} (mu, N) pairs", stats)


def local_kernel_model(rb, mu, n=10, radius=2e-3, seed=0, width=0.01, eta=1e-12):
    """Kernel model trained on `n` RB solutions scattered around `mu`."""
    rng = np.random.default_rng(seed)
    lo, hi = rb.fom.bounds
    buf = TrainingBuffer(n, rb.n_rb)
    for x in np.clip(mu + rng.uniform(-radius, radius, size=(n, mu.size)), lo, hi):
        buf.push(x, rb.solve_primal(x).values)
    return train(buf, rb, width, eta)


def ml_domination(fom, rb, mus, seed=0):
    rows = []
    for j, mu in enumerate(mus):
        km = local_kernel_model(rb, mu, seed=seed + j)
        J_ml, g_ml, u_ml = eval_output_ml(km, rb, mu)
        du_ml = km.predict_grad(mu)
        b = est_output_ml(rb, mu, u_ml, du_ml, fom.constants(mu))
        Jh, gh, uh, _ = fom.eval_output(mu)
        e_pr = fom.s_norm(uh.steps - rb.reconstruct(u_ml).steps)
        e_du = np.array([fom.s_norm(fom.solve_sensitivity(mu, uh, i).steps
                                    - rb.reconstruct(du_ml[i]).steps) for i in range(mu.size)])
        rows.append(dict(mu=mu, e_pr=e_pr, e_du=e_du, e_J=abs(Jh - J_ml),
                         e_dJ=np.abs(gh - g_ml), bounds=b))
    return rows


def check_ml_estimators(fom, rb, mus):
    rows = ml_domination(fom, rb, mus)
    viol = 0
    eff = {"primal": [], "sensitivity": [], "objective": [], "gradient": []}
    for r in rows:
        b = r["bounds"]
        checks = [(b.delta_pr, r["e_pr"], "primal"), (b.delta_J, r["e_J"], "objective")]
        checks += [(bd, er, "sensitivity") for bd, er in zip(b.delta_du, r["e_du"])]
        checks += [(bd, er, "gradient") for bd, er in zip(b.delta_dJ, r["e_dJ"])]
        for bound, err, key in checks:
            viol += int(bound < err)
            if err > 0:
                eff[key].append(bound / err)
    stats = {f"effectivity {k}": _summary(v) for k, v in eff.items()}
    return CheckResult("ML error bounds dominate true errors", viol == 0,
                       f"{viol} violations at {len(rows)} parameters", stats)


def residual_equality(rb, mus, seed=0):
    """Worst relative gap between offline/online and Riesz-based residual norms
    for random reduced trajectories."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for mu in mus:
        U = rng.standard_normal((rb.K + 1, rb.n_rb))
        U[0] = 0.0
        P = rng.standard_normal((rb.K + 1, rb.n_rb))
        P[-1] = 0.0
        dU = rng.standard_normal((rb.K + 1, rb.n_rb))
        dU[0] = 0.0
        pairs = [(rb.residual_pr_sq(mu, U), rb.residual_pr_sq(mu, U, exact=True)),
                 (rb.residual_ad_sq(mu, U, P), rb.residual_ad_sq(mu, U, P, exact=True)),
                 (rb.residual_sens_sq(mu, U, dU, 0), rb.residual_sens_sq(mu, U, dU, 0, exact=True))]
        for online, exact in pairs:
            a, b = np.sqrt(np.clip(online, 0, None)), np.sqrt(np.clip(exact, 0, None))
            worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(b, np.finfo(float).tiny))))
    return worst


def check_offline_online(rb, mus, rtol=1e-6):
    worst = residual_equality(rb, mus)
    return CheckResult("offline/online residual norms equal Riesz-based norms", worst <= rtol,
                       f"max relative gap {worst:.1e} (tol {rtol:g})")


def central_difference(km, mu, i, h=1e-6):
    """Central difference quotient ``(T(mu + h e_i) - T(mu - h e_i)) / 2h`` of
    the prediction.

    Coefficients of clustered centers are large and cancel, so subtracting
    two rounded predictions is useless.  The per-center kernel differences are
    formed in closed form instead,
    ``k(x + s) - k(x - s) = -2 k(x) exp(-w s^2) sinh(2 w s (x - c)_i)``,
    and summed in extended precision.
    """
    x, jac = normalize(mu, km.bounds)
    s = h * jac[i]
    diff = x[None, :] - km.centers
    k = np.exp(-km.width * np.sum(diff * diff, axis=1))
    w = -2.0 * k * np.exp(-km.width * s * s) * np.sinh(2.0 * km.width * s * diff[:, i]) / (2.0 * h)
    out = (w.astype(np.longdouble) @ km.coeffs.astype(np.longdouble)).reshape(km.K + 1, km.n_rb)
    out[0] = 0
    return out


def kernel_derivative_error(km, mus, h=1e-6):
    """Relative gap between analytic prediction derivatives and central
    differences of the prediction."""
    worst = 0.0
    for mu in mus:
        d = km.predict_grad(mu)
        for i in range(mu.size):
            gap = np.linalg.norm((central_difference(km, mu, i, h) - d[i].values).astype(float))
            ref = np.linalg.norm(d[i].values)
            worst = max(worst, float(gap / max(ref, np.finfo(float).tiny)))
    return worst


def spread_kernel_model(rb, n=10, seed=0, width=0.01, eta=1e-12):
    """Kernel model trained on `n` RB solutions at random parameters in the box."""
    rng = np.random.default_rng(seed)
    lo, hi = rb.fom.bounds
    buf = TrainingBuffer(n, rb.n_rb)
    for x in rng.uniform(lo, hi, size=(n, lo.size)):
        buf.push(x, rb.solve_primal(x).values)
    return train(buf, rb, width, eta)


def check_kernel(rb, mus, interp_tol=1e-6, deriv_tol=1e-5, seed=0):
    """Training-set interpolation and C1 consistency, for models trained on
    local clouds around `mus` and on points spread over the box."""
    rng = np.random.default_rng(seed)
    lo, hi = rb.fom.bounds
    models = []
    for j, mu in enumerate(mus):
        pts = np.clip(mu + rng.uniform(-2e-3, 2e-3, size=(5, mu.size)), lo, hi)
        models.append((local_kernel_model(rb, mu, seed=seed + j), pts))
        models.append((spread_kernel_model(rb, seed=seed + j), rng.uniform(lo, hi, size=(5, lo.size))))
    interp = max(km.train_error for km, _ in models)
    deriv = max(kernel_derivative_error(km, pts) for km, pts in models)
    return [CheckResult("kernel training-set interpolation", interp <= interp_tol,
                        f"max relative training error {interp:.1e} over {len(models)} models "
                        f"(tol {interp_tol:g})"),
            CheckResult("kernel derivatives vs central differences", deriv <= deriv_tol,
                        f"max relative gap {deriv:.1e} (tol {deriv_tol:g})")]


def corrupt_basis(rb, size=1e-3, seed=0):
    """Perturb the basis so that it is neither orthonormal nor spans the snapshots."""
    rng = np.random.default_rng(seed)
    Phi = rb.basis + size * rng.standard_normal(rb.basis.shape) * np.abs(rb.basis).max()
    return RbModel(rb.fom, Phi)


def validate(problem=None, config=None, fault=None, seed=0, progress=None):
    """Run every check on the reduced-size problem of `config`.

    ``fault="basis"`` corrupts the reduced basis before the reproduction check.
    """
    if problem is None:
        problem = build_problem(config, reduced=True)
    fom = problem.fom
    rng = np.random.default_rng(seed)
    say = progress or (lambda msg: None)
    checks = []

    say("gradient")
    checks.append(check_gradient(fom, interior_points(fom, 3, rng)))
    say("reproduction")
    ext = interior_points(fom, 3, rng)
    fault_fn = corrupt_basis if fault == "basis" else None
    checks.append(check_reproduction(fom, ext, basis_fault=fault_fn))
    rb, rows = reproduction_errors(fom, ext)
    checks.append(check_gradient_bound(rows))
    say("RB estimators")
    N = rb.n_rb
    sizes = sorted({max(1, N // 8), max(1, N // 4), max(1, N // 2), N})
    checks.append(check_rb_estimators(fom, rb, interior_points(fom, 5, rng), sizes))
    say("ML estimators")
    checks.append(check_ml_estimators(fom, rb, interior_points(fom, 3, rng)))
    say("offline/online")
    checks.append(check_offline_online(rb, interior_points(fom, 10, rng)))
    say("kernel")
    checks.extend(check_kernel(rb, interior_points(fom, 3, rng)))
    return ValidationReport(checks)
