"""Trajectory analysis: decay fits, subspace distances, and theorem-level checks.

Each check returns a CheckResult with the measured quantities and the
tolerances it was judged against, so CLI reports can serialize verdicts
without recomputation.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import block_data, frobenius
from .errors import (
    DimensionMismatch,
    GrassflowError,
    InsufficientSamples,
    NonPositiveValue,
)
from . import flow, oracle
from .integrate import FlowState, Trajectory, run_flow, sample_state

ALREADY_CONVERGED_GRAD = 1e-12
DEFECT_BOUND_REL_SLACK = 1e-6
DEFECT_BOUND_ATOL = 1e-12
ENERGY_STEP_SLACK = 1e-10
GAP_SAFETY_FACTOR = 10.0


@dataclass(frozen=True)
class DecayFit:
    """Least-squares exponential fit ``value ~ exp(intercept - rate * t)``."""

    rate: float
    intercept: float
    r_squared: float
    window: tuple

    @property
    def amplitude(self):
        """Fitted prefactor, i.e. the value extrapolated to t = 0."""
        return math.exp(self.intercept)


@dataclass
class CheckResult:
    """Pass/fail verdict with the numbers that produced it."""

    name: str
    passed: bool
    measured: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)

    def as_dict(self):
        def clean(value):
            if isinstance(value, (np.floating, np.integer)):
                return value.item()
            if isinstance(value, np.ndarray):
                return value.tolist()
            if isinstance(value, dict):
                return {k: clean(v) for k, v in value.items()}
            if isinstance(value, (list, tuple)):
                return [clean(v) for v in value]
            return value

        return {
            "name": self.name,
            "passed": bool(self.passed),
            "measured": clean(self.measured),
            "tolerances": clean(self.tolerances),
        }


def fit_exponential_decay(times, values, window=None):
    """Fit ``log(value)`` against ``t`` by ordinary least squares.

    The decay rate is the negated slope.  Needs at least five samples in
    the window; all of them must be positive.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape or t.ndim != 1:
        raise DimensionMismatch("times and values must be 1-D arrays of equal length")
    if window is None:
        window = (float(t[0]) if t.size else 0.0, float(t[-1]) if t.size else 0.0)
    lo, hi = float(window[0]), float(window[1])
    mask = (t >= lo) & (t <= hi)
    t = t[mask]
    v = v[mask]
    if t.size < 5:
        raise InsufficientSamples(
            f"need at least 5 samples in window [{lo:g}, {hi:g}], got {t.size}"
        )
    if np.any(v <= 1e-300):
        raise NonPositiveValue("log fit needs strictly positive values")
    y = np.log(v)
    tbar = float(np.mean(t))
    ybar = float(np.mean(y))
    dt = t - tbar
    denom = float(np.sum(dt * dt))
    if denom == 0.0:
        raise InsufficientSamples("all samples share one time; cannot fit a slope")
    slope = float(np.sum(dt * (y - ybar))) / denom
    intercept = ybar - slope * tbar
    residuals = y - (intercept + slope * t)
    ss_res = float(np.sum(residuals**2))
    ss_tot = float(np.sum((y - ybar) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else max(0.0, 1.0 - ss_res / ss_tot)
    return DecayFit(rate=-slope, intercept=intercept, r_squared=r2, window=(lo, hi))


def procrustes_align(block1, block2):
    """Orthogonal matrix Q minimizing ``|U1 Q - U2|`` in Frobenius norm."""
    U1 = block_data(block1)
    U2 = block_data(block2)
    if U1.shape != U2.shape:
        raise DimensionMismatch(f"blocks differ in shape: {U1.shape} vs {U2.shape}")
    P, _, W = oracle.svd_small(U1.T @ U2)
    return P @ W.T


def subspace_distance(block1, block2):
    """Rotation-invariant distance ``min_Q |U1 Q - U2|`` between blocks.

    Evaluated directly at the aligning rotation rather than through the
    singular-value closed form, which loses accuracy to cancellation near
    zero distance.
    """
    U1 = block_data(block1)
    U2 = block_data(block2)
    Q = procrustes_align(U1, U2)
    return frobenius(U1 @ Q - U2)


def projector_residuals(H, block):
    """Residuals of the stationary projector equations at a block.

    With ``Z = U U^T`` returns
    ``r_eq  = |H Z + Z H - 2 Z H Z| / (1 + |H|)`` and
    ``r_idem = |Z^2 - Z|``; both vanish exactly on orthonormal invariant
    subspaces.
    """
    if hasattr(H, "to_dense"):
        Hd = H.to_dense()
    else:
        Hd = np.asarray(H, dtype=float)
    if Hd.shape[0] > 512:
        raise GrassflowError("projector residuals are desk-scale only (n <= 512)")
    U = block_data(block)
    Z = U @ U.T
    HZ = Hd @ Z
    r_eq = frobenius(HZ + HZ.T - 2.0 * (Z @ HZ)) / (1.0 + frobenius(Hd))
    r_idem = frobenius(Z @ Z - Z)
    return r_eq, r_idem


def hessian_quotient(H, block, HU=None):
    """Curvature quotient of the energy along the current gradient direction.

    Returns ``<H g - g (U^T H U), g> / |g|^2`` for ``g`` the extended
    Grassmann gradient; reported as an informational lower-bound probe
    for the curvature constant, never asserted.
    """
    U = block_data(block)
    if HU is None:
        HU = H.apply(U)
    S = U.T @ HU
    g = HU - U @ S
    gn2 = float(np.sum(g * g))
    if gn2 <= 1e-300:
        return float("nan")
    Hg = H.apply(g)
    numerator = float(np.sum(g * Hg)) - float(np.trace(S @ (g.T @ g)))
    return numerator / gn2


@dataclass(frozen=True)
class EmpiricalConstants:
    """Observed negativity constant and gradient-decay fit of a run."""

    c0: float
    gamma: float
    K: float
    r_squared: float
    status: str


def empirical_constants(traj, window_fraction=0.5):
    """Estimate the negativity constant and gradient decay of a trajectory.

    ``c0`` is the running minimum of the per-sample negativity constant.
    The decay rate and prefactor come from a log-linear fit of the
    gradient norm over the trailing ``window_fraction`` of the time span
    (the transient is excluded).  A trajectory that starts converged is
    flagged with NaN rate and prefactor.
    """
    if len(traj.samples) < 10:
        raise InsufficientSamples(
            f"need at least 10 samples, got {len(traj.samples)}"
        )
    t = traj.times
    grads = traj.column("grad_norm")
    c0 = float(np.min(traj.column("c0_emp")))
    t_lo = t[0] + (1.0 - window_fraction) * (t[-1] - t[0])
    window = (float(t_lo), float(t[-1]))
    in_window = (t >= window[0]) & (t <= window[1])
    if float(np.max(grads[in_window])) <= ALREADY_CONVERGED_GRAD:
        return EmpiricalConstants(
            c0=c0, gamma=float("nan"), K=float("nan"),
            r_squared=float("nan"), status="already-converged",
        )
    keep = in_window & (grads > 1e-300)
    if int(np.sum(keep)) < 5:
        return EmpiricalConstants(
            c0=c0, gamma=float("nan"), K=float("nan"),
            r_squared=float("nan"), status="already-converged",
        )
    fit = fit_exponential_decay(t[keep], grads[keep], window=window)
    return EmpiricalConstants(
        c0=c0, gamma=fit.rate, K=fit.amplitude,
        r_squared=fit.r_squared, status="ok",
    )


def check_defect_bound(traj, rel_slack=DEFECT_BOUND_REL_SLACK, atol=DEFECT_BOUND_ATOL):
    """Verify the exponential envelope on the orthogonality defect.

    Passes when every sample satisfies
    ``defect(t) <= defect(0) * exp(-2 c0 t) * (1 + rel_slack) + atol``
    with ``c0`` the running minimum of the sampled negativity constant.
    Also reports the fitted defect decay rate and its ratio against
    ``2 c0`` (theory predicts a ratio of at least one).
    """
    t = traj.times
    defects = traj.column("defect")
    c0_min = float(np.min(traj.column("c0_emp")))
    defect0 = float(defects[0])
    bound = defect0 * np.exp(-2.0 * c0_min * t) * (1.0 + rel_slack) + atol
    excess = defects - bound
    worst = int(np.argmax(excess))
    passed = bool(np.all(excess <= 0.0))

    fit_rate = float("nan")
    ratio = float("nan")
    r2 = float("nan")
    keep = defects > max(atol * 1e-2, 1e-300)
    if int(np.sum(keep)) >= 5 and c0_min > 0:
        try:
            window = (float(t[keep][0]), float(t[keep][-1]))
            fit = fit_exponential_decay(t[keep], defects[keep], window=window)
            fit_rate = fit.rate
            r2 = fit.r_squared
            ratio = fit.rate / (2.0 * c0_min)
        except (InsufficientSamples, NonPositiveValue):
            pass

    return CheckResult(
        name="defect_bound",
        passed=passed,
        measured={
            "defect_initial": defect0,
            "defect_final": float(defects[-1]),
            "c0_min": c0_min,
            "worst_excess": float(excess[worst]),
            "worst_time": float(t[worst]),
            "fit_rate": fit_rate,
            "rate_ratio_vs_2c0": ratio,
            "fit_r_squared": r2,
        },
        tolerances={"rel_slack": rel_slack, "atol": atol},
    )


def check_defect_monotone(traj, step_slack=1e-10):
    """Verify the recorded defect never rises by more than ``step_slack``."""
    defects = traj.column("defect")
    rises = np.diff(defects)
    worst = float(np.max(rises)) if rises.size else 0.0
    return CheckResult(
        name="defect_monotone",
        passed=bool(worst <= step_slack),
        measured={"worst_rise": worst},
        tolerances={"step_slack": step_slack},
    )


def check_gram_corridor(traj, direction, tol=1e-8, limit_tol=1e-6):
    """Verify the Gram-eigenvalue corridor along a trajectory.

    For blocks started inside the unit ball (``direction='nondecreasing'``)
    every sorted Gram eigenvalue must stay within
    ``[min(1, sigma_min(0)) - tol, 1 + tol]`` and grow componentwise; the
    mirrored check applies to ``'nonincreasing'`` starts.  When sampling
    reaches ``t = 20 / c0`` all eigenvalues must sit within ``limit_tol``
    of one.
    """
    if direction not in ("nondecreasing", "nonincreasing", "stationary"):
        raise GrassflowError(f"unknown corridor direction '{direction}'")
    t = traj.times
    eigs = np.vstack([s.gram_eigs for s in traj.samples])
    c0 = float(np.min(traj.column("c0_emp")))
    measured = {"sigma_initial": eigs[0].copy(), "sigma_final": eigs[-1].copy()}
    ok = True

    if direction == "stationary":
        dev = float(np.max(np.abs(eigs - 1.0)))
        ok = dev <= tol
        measured["max_deviation_from_one"] = dev
    else:
        steps = np.diff(eigs, axis=0)
        if direction == "nondecreasing":
            worst_step = float(np.min(steps)) if steps.size else 0.0
            mono_ok = worst_step >= -tol
            lower = min(1.0, float(eigs[0, 0])) - tol
            range_ok = bool(np.all(eigs >= lower) and np.all(eigs <= 1.0 + tol))
            measured["worst_monotonicity_step"] = worst_step
            measured["corridor"] = (lower, 1.0 + tol)
        else:
            worst_step = float(np.max(steps)) if steps.size else 0.0
            mono_ok = worst_step <= tol
            upper = max(1.0, float(eigs[0, -1])) + tol
            range_ok = bool(np.all(eigs <= upper) and np.all(eigs >= 1.0 - tol))
            measured["worst_monotonicity_step"] = worst_step
            measured["corridor"] = (1.0 - tol, upper)
        ok = bool(mono_ok and range_ok)

    t_limit = 20.0 / c0 if c0 > 0 else float("inf")
    tail = t >= t_limit
    measured["limit_time"] = t_limit
    measured["limit_checked"] = bool(np.any(tail))
    if np.any(tail):
        limit_dev = float(np.max(np.abs(eigs[tail] - 1.0)))
        measured["limit_deviation"] = limit_dev
        ok = ok and limit_dev <= limit_tol
    return CheckResult(
        name="gram_corridor",
        passed=bool(ok),
        measured=measured,
        tolerances={"tol": tol, "limit_tol": limit_tol},
    )


def energy_gap_check(traj, oracle_eigs, step_slack=ENERGY_STEP_SLACK,
                     floor_slack=1e-10, safety=GAP_SAFETY_FACTOR):
    """Verify energy behavior against the minimum ``sum(lambda_i) / 2``.

    Passes when the energy never dips below the minimum (slack
    ``floor_slack``), never rises step to step beyond ``step_slack``
    relative slack, and the final gap sits under the composed
    two-exponential envelope evaluated with the run's own empirical
    constants, inflated by ``safety``.
    """
    N = traj.samples[0].gram_eigs.size
    lam = np.asarray(oracle_eigs.eigenvalues, dtype=float)
    e_star = 0.5 * float(np.sum(lam[:N]))
    lam1 = float(lam[0])
    t = traj.times
    energies = traj.column("energy")
    gaps = energies - e_star

    nonneg_ok = bool(np.min(gaps) >= -floor_slack)
    rises = np.diff(energies)
    allowed = step_slack * (1.0 + np.abs(energies[:-1]))
    mono_ok = bool(np.all(rises <= allowed)) if rises.size else True

    defect0 = float(traj.samples[0].defect)
    final_gap = float(gaps[-1])
    bound = None
    try:
        constants = empirical_constants(traj)
    except InsufficientSamples:
        constants = None
    if constants is not None and constants.status == "ok" and constants.c0 > 0:
        t_final = float(t[-1])
        bound = (
            lam1 * lam1 / (2.0 * constants.c0) * defect0
            * math.exp(-2.0 * constants.c0 * t_final)
            + (constants.K / constants.gamma) ** 2
            * math.exp(-2.0 * constants.gamma * t_final)
        )
        final_ok = final_gap <= safety * bound + floor_slack
    else:
        final_ok = final_gap <= floor_slack * (1.0 + abs(e_star))

    return CheckResult(
        name="energy_gap",
        passed=bool(nonneg_ok and mono_ok and final_ok),
        measured={
            "energy_minimum": e_star,
            "final_gap": final_gap,
            "min_gap": float(np.min(gaps)),
            "worst_rise": float(np.max(rises)) if rises.size else 0.0,
            "composed_bound": bound,
        },
        tolerances={
            "step_slack": step_slack,
            "floor_slack": floor_slack,
            "safety_factor": safety,
        },
    )


def expm_lower_bound_probe(n_trials=50, n=8, N=2, seed=1234,
                           times=(0.1, 1.0, 10.0), ks=(1, 2), tol=1e-9):
    """Probe the semigroup inner-product bound on random instances.

    Draws symmetric operators with a controlled mixed spectrum and
    starting blocks supported on the negative eigendirections (so the
    block Rayleigh product is nonpositive), then checks
    ``lambda_min(U0^T exp(-k H t) U0 - U0^T U0) >= -tol`` for every
    ``k`` and ``t``.
    """
    rng = np.random.default_rng(seed)
    failures = 0
    worst = math.inf
    for _ in range(n_trials):
        n_neg = N + 2
        lam = np.concatenate([
            -rng.uniform(0.5, 1.5, size=n_neg),
            rng.uniform(0.5, 1.5, size=n - n_neg),
        ])
        Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
        Hd = (Q * lam) @ Q.T
        Hd = (Hd + Hd.T) / 2.0
        W = Q[:, :n_neg]
        A = rng.standard_normal((n_neg, N))
        A /= np.linalg.norm(A, axis=0)
        U0 = W @ A
        G0 = U0.T @ U0
        for k in ks:
            for t in times:
                E = oracle.expm_sym(Hd, scale=-k * t)
                M = U0.T @ E @ U0 - G0
                lam_min = float(oracle.jacobi_eigenvalues((M + M.T) / 2.0)[0])
                worst = min(worst, lam_min)
                if lam_min < -tol:
                    failures += 1
    return CheckResult(
        name="expm_lower_bound",
        passed=failures == 0,
        measured={"trials": n_trials, "failures": failures, "worst_lambda_min": worst},
        tolerances={"tol": tol},
    )


def analytic_trajectory(H, U0, times):
    """Trajectory assembled from closed-form flow states at given times.

    The resulting object carries the same per-sample diagnostics as an
    integrated run, so every trajectory check applies to it.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise GrassflowError("need a nonempty 1-D array of sample times")
    if np.any(np.diff(times) <= 0):
        raise GrassflowError("sample times must be strictly increasing")
    samples = []
    last = None
    for t in times:
        Ut = oracle.analytic_flow_solution(H, U0, float(t))
        HUt = H.apply(Ut.data)
        samples.append(sample_state(float(t), Ut.data, HUt, dt_used=0.0))
        last = (float(t), Ut, HUt)
    t_last, U_last, HU_last = last
    final = FlowState(
        t=t_last,
        U=U_last,
        cached_HU=None,
        step_count=len(samples),
    )
    return Trajectory(
        samples=samples,
        final_state=final,
        stop_reason="t_max_reached",
        metadata={"source": "analytic"},
    )


@dataclass
class PerturbationReport:
    """Outcome of an injected-perturbation recovery experiment."""

    passed: bool
    recovered: bool
    admissibility_lost: bool
    defect_before: float
    defect_after: float
    ritz_match_error: float
    recovery_time: float | None
    decay_fit: DecayFit | None
    base: Trajectory
    perturbed: Trajectory


def perturb_and_recover(H, U0, config, t_inject, magnitude, seed, ritz_tol=1e-6):
    """Inject a seeded Gaussian kick mid-run and measure the recovery.

    Runs the flow twice: clean, and with a Frobenius-norm ``magnitude``
    perturbation added at the first recorded sample past ``t_inject``.
    Passes when the defect re-enters the configured tolerance before the
    horizon and the final Ritz values match the clean run to ``ritz_tol``
    (relative).  If the kick destroys admissibility the report flags that
    instead of asserting decay.  A zero magnitude reproduces the clean
    run bit for bit.
    """
    if not t_inject < config.t_max:
        raise GrassflowError("t_inject must lie before the time horizon")
    base = run_flow(H, U0, config)

    injection = {}

    def kick(state):
        U = state.U.data
        if magnitude != 0.0:
            rng = np.random.default_rng(seed)
            B = rng.standard_normal(U.shape)
            B *= magnitude / np.linalg.norm(B)
            U = U + B
        injection["defect_before"] = flow.ortho_defect(state.U)
        injection["defect_after"] = flow.ortho_defect(U)
        injection["admissible"] = flow.admissible_initial(H, U).ok
        injection["t"] = state.t
        if magnitude == 0.0:
            return state
        return FlowState(
            t=state.t,
            U=state.U.__class__(U),
            cached_HU=None,
            step_count=state.step_count,
        )

    perturbed = run_flow(H, U0, config, events=[(t_inject, kick)])

    t = perturbed.times
    defects = perturbed.column("defect")
    after = t > injection.get("t", t_inject)
    recovered = False
    recovery_time = None
    for ti, di in zip(t[after], defects[after]):
        if di <= config.defect_tol:
            recovered = True
            recovery_time = float(ti)
            break

    ritz_base = base.samples[-1].ritz_values
    ritz_pert = perturbed.samples[-1].ritz_values
    ritz_err = float(np.max(np.abs(ritz_pert - ritz_base) / (1.0 + np.abs(ritz_base))))

    fit = None
    if recovered:
        mask = after & (t <= recovery_time) & (defects > 1e-300)
        if int(np.sum(mask)) >= 5:
            try:
                fit = fit_exponential_decay(
                    t[mask], defects[mask],
                    window=(float(t[mask][0]), float(t[mask][-1])),
                )
            except (InsufficientSamples, NonPositiveValue):
                fit = None

    lost = not injection.get("admissible", True)
    passed = bool(not lost and recovered and ritz_err <= ritz_tol)
    return PerturbationReport(
        passed=passed,
        recovered=recovered,
        admissibility_lost=lost,
        defect_before=injection.get("defect_before", float("nan")),
        defect_after=injection.get("defect_after", float("nan")),
        ritz_match_error=ritz_err,
        recovery_time=recovery_time,
        decay_fit=fit,
        base=base,
        perturbed=perturbed,
    )
