"""Explicit time stepping for the block gradient flow dU/dt = -(HU - U U^T HU).

Fixed-step Euler and classical RK4, plus an adaptive RK4 based on step
doubling, with a driver that records per-sample diagnostics and applies
the combined gradient-and-defect stopping rule.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .blocks import FrameBlock, as_block
from .errors import GrassflowError, NonFiniteState, StepUnderflow
from .operators import KIND_MATRIX_FREE, gershgorin_lower_bound, gershgorin_upper_bound
from . import flow, oracle

SCHEMES = ("euler", "rk4", "rk4-adaptive")

STOP_GRAD_CONVERGED = "grad_converged"
STOP_DEFECT_AND_GRAD = "defect_and_grad_converged"
STOP_T_MAX = "t_max_reached"
STOP_UNDERFLOW = "step_underflow"
STOP_DIVERGED = "diverged"

ENERGY_STEP_SLACK = 1e-10
DIVERGENCE_FACTOR = 1e3
GAP_DEGENERACY_RTOL = 1e-8
GAP_METADATA_MAX_DIM = 512

# when enabled, run_flow revalidates cached operator products each step
DEBUG_VALIDATE_CACHE = False


@dataclass(frozen=True)
class FlowState:
    """Snapshot of the evolving block at one time."""

    t: float
    U: FrameBlock
    cached_HU: FrameBlock | None = None
    step_count: int = 0


@dataclass(frozen=True)
class SolverConfig:
    """Integrator choice, step control, tolerances, and stopping rules."""

    scheme: str = "rk4-adaptive"
    dt: float = 1e-3
    dt_min: float = 1e-12
    dt_max: float = 0.1
    safety: float = 0.9
    rtol: float = 1e-8
    grad_tol: float = 1e-8
    defect_tol: float = 1e-10
    t_max: float = 10.0
    record_every: int = 10
    seed: int = 0
    require_admissible: bool = True
    strict_admissibility: bool = True
    check_gap: bool = True

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise GrassflowError(f"unknown scheme '{self.scheme}' (choose from {SCHEMES})")
        if not (0.0 < self.dt_min <= self.dt <= self.dt_max):
            raise GrassflowError("need 0 < dt_min <= dt <= dt_max")
        if not (0.0 < self.safety <= 1.0):
            raise GrassflowError("safety factor must lie in (0, 1]")
        for name in ("rtol", "grad_tol", "defect_tol"):
            if getattr(self, name) <= 0.0:
                raise GrassflowError(f"{name} must be positive")
        if self.t_max < 0.0:
            raise GrassflowError("t_max must be nonnegative")
        if int(self.record_every) < 1:
            raise GrassflowError("record_every must be at least 1")


@dataclass(frozen=True)
class DiagnosticsRecord:
    """Per-sample scalars tracked along a trajectory."""

    t: float
    energy: float
    grad_norm: float
    defect: float
    gram_eigs: np.ndarray
    ritz_values: np.ndarray
    c0_emp: float
    dt_used: float


@dataclass
class Trajectory:
    """Recorded run: diagnostics samples, final state, and why it stopped."""

    samples: list
    final_state: FlowState
    stop_reason: str
    metadata: dict = field(default_factory=dict)

    @property
    def times(self):
        return np.array([s.t for s in self.samples])

    def column(self, name):
        """Stack one scalar field across samples."""
        return np.array([getattr(s, name) for s in self.samples])


def sample_state(t, U, HU, dt_used=0.0):
    """Build the diagnostics record for a block and its operator product."""
    U = as_block(U).data
    HU = as_block(HU).data
    N = U.shape[1]
    S = U.T @ HU
    S = (S + S.T) / 2.0
    G = U.T @ U
    G = (G + G.T) / 2.0
    ritz = oracle.jacobi_eigenvalues(S)
    gram_eigs = oracle.jacobi_eigenvalues(G)
    grad_norm = float(np.linalg.norm(HU - U @ (U.T @ HU)))
    return DiagnosticsRecord(
        t=float(t),
        energy=0.5 * float(np.sum(U * HU)),
        grad_norm=grad_norm,
        defect=float(np.linalg.norm(np.eye(N) - G)),
        gram_eigs=gram_eigs,
        ritz_values=ritz,
        c0_emp=float(-ritz[-1]),
        dt_used=float(dt_used),
    )


def _grad_raw(H, U, HU=None):
    if HU is None:
        HU = H.apply(U)
    return HU - U @ (U.T @ HU)


def _require_finite(U, dt):
    if not np.all(np.isfinite(U)):
        raise NonFiniteState(
            f"block became non-finite after a step of dt = {dt:g}; reduce the step"
        )


def _rk4_raw(H, U, dt, k1=None):
    if k1 is None:
        k1 = -_grad_raw(H, U)
    k2 = -_grad_raw(H, U + (0.5 * dt) * k1)
    k3 = -_grad_raw(H, U + (0.5 * dt) * k2)
    k4 = -_grad_raw(H, U + dt * k3)
    return U + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_euler(H, state, dt):
    """One explicit Euler step; the cached operator product is reused."""
    if dt < 0:
        raise GrassflowError("dt must be nonnegative")
    U = state.U.data
    HU = state.cached_HU.data if state.cached_HU is not None else None
    U1 = U - dt * _grad_raw(H, U, HU)
    _require_finite(U1, dt)
    return FlowState(
        t=state.t + dt,
        U=FrameBlock(U1),
        cached_HU=None,
        step_count=state.step_count + 1,
    )


def step_rk4(H, state, dt):
    """One classical four-stage Runge-Kutta step."""
    if dt < 0:
        raise GrassflowError("dt must be nonnegative")
    U = state.U.data
    HU = state.cached_HU.data if state.cached_HU is not None else None
    k1 = -_grad_raw(H, U, HU)
    U1 = _rk4_raw(H, U, dt, k1=k1)
    _require_finite(U1, dt)
    return FlowState(
        t=state.t + dt,
        U=FrameBlock(U1),
        cached_HU=None,
        step_count=state.step_count + 1,
    )


def _spectral_radius_estimate(H, seed=0, iterations=20):
    if H.kind == KIND_MATRIX_FREE:
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(H.dim)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iterations):
            w = H.apply(v)
            lam = float(np.linalg.norm(w))
            if lam == 0.0:
                return 0.0
            v = w / lam
        return lam
    return max(abs(gershgorin_upper_bound(H)), abs(gershgorin_lower_bound(H)))


def stability_dt_hint(H, dt_max=math.inf, seed=0):
    """Heuristic step-size bound for the explicit schemes.

    Returns ``1 / rho_hat`` where ``rho_hat`` is an estimate of the
    operator's spectral radius plus a bound on the Rayleigh-product norm
    (together they set the local Lipschitz scale of the flow).  For
    matrix-free operators the radius comes from 20 seeded power-iteration
    steps.  A zero operator yields ``dt_max``.
    """
    rho = _spectral_radius_estimate(H, seed=seed)
    rho_hat = 2.0 * rho
    if rho_hat == 0.0:
        return dt_max
    return min(1.0 / rho_hat, dt_max)


def step_rk4_adaptive(
    H,
    state,
    dt,
    rtol=1e-8,
    dt_min=1e-12,
    dt_max=math.inf,
    safety=0.9,
):
    """One step-doubling RK4 attempt.

    Compares a full step against two half steps; the relative difference
    ``|U_full - U_halves| / (1 + |U|)`` is the error estimate.  On
    acceptance the half-step result is propagated.  Returns
    ``(state, dt_next, accepted)``; a rejected attempt returns the input
    state unchanged.  Raises StepUnderflow when a rejection would need a
    step below ``dt_min``.
    """
    if dt <= 0:
        raise GrassflowError("dt must be positive")
    U = state.U.data
    HU = state.cached_HU.data if state.cached_HU is not None else None
    k1 = -_grad_raw(H, U, HU)
    try:
        U_full = _rk4_raw(H, U, dt, k1=k1)
        U_half = _rk4_raw(H, U, 0.5 * dt, k1=k1)
        U_two = _rk4_raw(H, U_half, 0.5 * dt)
        finite = bool(np.all(np.isfinite(U_full)) and np.all(np.isfinite(U_two)))
    except NonFiniteState:
        finite = False
    if not finite:
        # treat a blown-up trial like an oversized step
        dt_next = max(dt_min, 0.2 * safety * dt)
        if dt <= dt_min * (1.0 + 1e-12):
            rho = _spectral_radius_estimate(H)
            raise StepUnderflow(
                f"non-finite trial at dt_min = {dt_min:g}; "
                f"spectral radius estimate {rho:.3e}"
            )
        return state, dt_next, False

    err = float(np.linalg.norm(U_full - U_two)) / (1.0 + float(np.linalg.norm(U)))
    if err == 0.0:
        dt_next = dt_max
    else:
        dt_next_raw = safety * dt * (rtol / err) ** 0.2
        if err > rtol and dt_next_raw < dt_min:
            rho = _spectral_radius_estimate(H)
            raise StepUnderflow(
                f"needed dt = {dt_next_raw:.3e} below dt_min = {dt_min:g}; "
                f"spectral radius estimate {rho:.3e} (likely stiffness)"
            )
        dt_next = min(max(dt_next_raw, dt_min), dt_max)
    accepted = err <= rtol
    if not accepted:
        return state, dt_next, False
    new_state = FlowState(
        t=state.t + dt,
        U=FrameBlock(U_two),
        cached_HU=None,
        step_count=state.step_count + 1,
    )
    return new_state, dt_next, True


class _CountingOperator:
    """Thin pass-through that counts apply calls for work comparisons."""

    def __init__(self, inner):
        self._inner = inner
        self.applies = 0

    @property
    def dim(self):
        return self._inner.dim

    @property
    def kind(self):
        return self._inner.kind

    def apply(self, X):
        self.applies += 1
        return self._inner.apply(X)

    def __getattr__(self, name):
        return getattr(self._inner, name)


def run_flow(H, U0, config, events=()):
    """Integrate the flow from ``U0`` under ``config`` and record diagnostics.

    Stops when the gradient norm and the orthogonality defect both fall
    below their tolerances, when ``t_max`` is reached, when adaptive step
    control underflows, or when the energy guards trip.  A diagnostics
    record is emitted for the initial state, every ``record_every``-th
    accepted step, and the final state.  Deterministic for identical
    inputs.

    ``events`` is a sequence of ``(t_fire, fn)`` pairs; each ``fn`` maps a
    FlowState to a new FlowState and fires once, immediately after the
    first recorded sample whose time reaches ``t_fire``.  Convergence
    stopping is deferred while events are pending.
    """
    counting = _CountingOperator(H)
    block = as_block(U0)
    if block.n != H.dim:
        raise GrassflowError(
            f"initial block has {block.n} rows, operator dimension is {H.dim}"
        )

    if config.require_admissible:
        report = flow.admissible_initial(H, block, strict=config.strict_admissibility)
        if not report.ok:
            raise GrassflowError(f"initial block not admissible: {report.message}")

    metadata = {
        "scheme": config.scheme,
        "accepted_steps": 0,
        "rejected_steps": 0,
        "gradient_evals": 0,
    }
    if config.check_gap and H.dense_assemblable and H.dim <= GAP_METADATA_MAX_DIM:
        if block.width < H.dim:
            spectrum = oracle.spectrum_slice(H, block.width)
            gap = spectrum.gap
            lam1 = float(spectrum.eigenvalues[0])
            metadata["spectral_gap"] = gap
            metadata["degenerate_gap"] = bool(gap < GAP_DEGENERACY_RTOL * abs(lam1))
        else:
            metadata["spectral_gap"] = None
            metadata["degenerate_gap"] = False

    pending = sorted(
        [(float(t_fire), fn) for t_fire, fn in events], key=lambda item: item[0]
    )

    state = FlowState(t=0.0, U=block, cached_HU=None, step_count=0)
    U = state.U.data
    HU = counting.apply(U)
    energy_now = 0.5 * float(np.sum(U * HU))
    energy_start = energy_now
    defect_start = flow.ortho_defect(state.U)
    orthonormal_start = defect_start <= config.defect_tol

    samples = [sample_state(0.0, U, HU, dt_used=0.0)]
    last_recorded_t = 0.0

    def fire_events():
        nonlocal state, U, HU, energy_now, pending
        fired = False
        while pending and pending[0][0] <= state.t:
            _, fn = pending.pop(0)
            state = fn(state)
            fired = True
        if fired:
            U = state.U.data
            HU = counting.apply(U)
            energy_now = 0.5 * float(np.sum(U * HU))
        return fired

    fire_events()

    monotone_guard = (
        config.scheme == "rk4-adaptive" and config.rtol <= 1e-8 + 1e-24
    )
    dt_cand = config.dt
    last_dt = 0.0
    stop_reason = None
    guard_note = None
    t_edge = 1e-15 * max(1.0, config.t_max)

    while True:
        grad_norm = float(np.linalg.norm(HU - U @ (U.T @ HU)))
        defect = flow.ortho_defect(state.U)
        if grad_norm <= config.grad_tol and defect <= config.defect_tol and not pending:
            stop_reason = (
                STOP_GRAD_CONVERGED if orthonormal_start else STOP_DEFECT_AND_GRAD
            )
            break
        if state.t >= config.t_max - t_edge:
            stop_reason = STOP_T_MAX
            break

        if DEBUG_VALIDATE_CACHE and state.cached_HU is not None:
            fresh = counting.apply(U)
            rel = np.linalg.norm(state.cached_HU.data - fresh) / (
                1.0 + np.linalg.norm(fresh)
            )
            if rel > 1e-13:
                raise GrassflowError(f"stale cached operator product (rel {rel:.3e})")

        dt_eff = min(dt_cand, config.t_max - state.t)
        state = replace(state, cached_HU=FrameBlock(HU))
        if config.scheme == "rk4-adaptive":
            try:
                new_state, dt_cand, accepted = step_rk4_adaptive(
                    counting,
                    state,
                    dt_eff,
                    rtol=config.rtol,
                    dt_min=config.dt_min,
                    dt_max=config.dt_max,
                    safety=config.safety,
                )
            except StepUnderflow as exc:
                stop_reason = STOP_UNDERFLOW
                guard_note = str(exc)
                break
            if not accepted:
                metadata["rejected_steps"] += 1
                continue
        elif config.scheme == "rk4":
            new_state = step_rk4(counting, state, dt_eff)
        else:
            new_state = step_euler(counting, state, dt_eff)

        U_new = new_state.U.data
        HU_new = counting.apply(U_new)
        energy_new = 0.5 * float(np.sum(U_new * HU_new))

        scale0 = abs(energy_start) if energy_start != 0.0 else 1.0
        if energy_new > energy_start + DIVERGENCE_FACTOR * scale0:
            stop_reason = STOP_DIVERGED
            guard_note = (
                f"energy rose from {energy_start:.6e} to {energy_new:.6e}"
            )
            state, U, HU, energy_now = new_state, U_new, HU_new, energy_new
            break
        if monotone_guard and energy_new > energy_now + ENERGY_STEP_SLACK * (
            1.0 + abs(energy_now)
        ):
            stop_reason = STOP_DIVERGED
            guard_note = (
                f"energy increased by {energy_new - energy_now:.3e} in one "
                f"accepted step at t = {new_state.t:.6e}"
            )
            state, U, HU, energy_now = new_state, U_new, HU_new, energy_new
            break

        state, U, HU, energy_now = new_state, U_new, HU_new, energy_new
        last_dt = dt_eff
        metadata["accepted_steps"] += 1
        if metadata["accepted_steps"] % config.record_every == 0:
            samples.append(sample_state(state.t, U, HU, dt_used=dt_eff))
            last_recorded_t = state.t
            fire_events()

    if state.t > last_recorded_t:
        samples.append(sample_state(state.t, U, HU, dt_used=last_dt))
    metadata["gradient_evals"] = counting.applies
    if guard_note:
        metadata["guard"] = guard_note

    final = replace(state, cached_HU=FrameBlock(HU))
    return Trajectory(
        samples=samples,
        final_state=final,
        stop_reason=stop_reason,
        metadata=metadata,
    )
