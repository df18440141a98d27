"""WMMSE beamforming/power control and simple baselines.

The solver handles the K-pair interference channel with Nt transmit antennas
and single-antenna receivers, so U and W are scalars per user.  Nt = 1 power
control runs through the same code path.  Every routine accepts a leading
batch axis so that test sets and restarts are solved in one vectorized pass.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .graph import alloc_from_beams, weighted_sum_rate
from .scenario import ChannelRealization

DEFAULT_ITERS = 100
BISECTION_STEPS = 100
BISECTION_RTOL = 1e-12


class SolverDivergedError(RuntimeError):
    pass


@dataclass
class SolverReport:
    allocation: np.ndarray  # (K, 2Nt)
    trajectory: np.ndarray  # (iterations + 1,) weighted sum rate
    wall_time: float
    iterations: int
    extra: dict = field(default_factory=dict)

    @property
    def objective(self) -> float:
        return float(self.trajectory[-1])

    def to_dict(self) -> dict:
        return {
            "allocation": self.allocation.tolist(),
            "trajectory": self.trajectory.tolist(),
            "wall_time": self.wall_time,
            "iterations": self.iterations,
        }


# -- the V-update dual variable ---------------------------------------------

def _power_at(mu, lam, c2):
    return np.sum(c2 / (lam + mu[..., None]) ** 2, axis=-1)


def _newton_point(mu, lam, c2, pmax):
    """Newton step on phi(mu) = 1/||v(mu)|| - 1/sqrt(pmax).

    phi is increasing and concave, so from the infeasible side the step never
    passes the root; with one eigen-component phi is linear and the step is exact.
    """
    d = lam + mu[..., None]
    s2 = np.sum(c2 / d ** 2, axis=-1)
    s3 = np.sum(c2 / d ** 3, axis=-1)
    phi = 1.0 / np.sqrt(s2)
    dphi = s3 / s2 ** 1.5
    return mu - (phi - 1.0 / math.sqrt(pmax)) / dphi


def bisect_mu_batched(M: np.ndarray, b: np.ndarray, pmax: float):
    """Vectorized ``bisect_mu`` over leading axes of M (..., Nt, Nt) and b (..., Nt).

    Uses the eigendecomposition M = Q diag(lam) Q^H, where
    ``||(M + mu I)^-1 b||^2 = sum_i |q_i^H b|^2 / (lam_i + mu)^2`` is strictly
    decreasing in mu, so the constraint is bracketed on [0, ||b||/sqrt(pmax)]
    and solved on scalars.
    Each step tries a Newton point inside the bracket and falls back to the
    midpoint; a probe on the far side of the Newton point closes the bracket.
    """
    lam, Q = np.linalg.eigh(M)
    lam = np.maximum(lam, 0.0)
    c = np.einsum("...nm,...n->...m", Q.conj(), b)
    c2 = c.real ** 2 + c.imag ** 2
    shape = lam.shape[:-1]

    with np.errstate(divide="ignore", invalid="ignore"):
        p0 = np.where(c2 > 0, c2 / lam ** 2, 0.0).sum(axis=-1)
    active = p0 > pmax

    mu = np.zeros(shape)
    if np.any(active):
        lo = np.zeros(shape)
        # ||v(mu)|| <= ||b|| / mu, so this end is always feasible
        hi = np.where(active, np.sqrt(np.sum(c2, axis=-1) / pmax), 1.0)
        p_hi = _power_at(hi, lam, c2)
        for _ in range(BISECTION_STEPS):
            todo = active & (hi - lo > BISECTION_RTOL * hi) & (p_hi < pmax * (1.0 - BISECTION_RTOL))
            if not np.any(todo):
                break
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                nt = _newton_point(lo, lam, c2, pmax)
            inside = np.isfinite(nt) & (nt > lo) & (nt < hi)
            mid = np.where(inside, nt, 0.5 * (lo + hi))
            p_mid = _power_at(mid, lam, c2)
            over = p_mid > pmax
            # probe the other side of a Newton point to close the bracket
            probe = np.clip(mid + np.where(over, 0.5, -0.5) * BISECTION_RTOL * mid, lo, hi)
            p_probe = _power_at(probe, lam, c2)
            probe_over = p_probe > pmax
            up = todo & ~over
            down = todo & inside & over & ~probe_over
            lo = np.where(todo & over, mid, np.where(todo & inside & ~over & probe_over, probe, lo))
            hi = np.where(up, mid, np.where(down, probe, hi))
            p_hi = np.where(up, p_mid, np.where(down, p_probe, p_hi))
        # hi is on the feasible side of the constraint
        mu = np.where(active, hi, 0.0)

    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(c2 > 0, c / (lam + mu[..., None]), 0.0)
    v = np.einsum("...nm,...m->...n", Q, scale)
    return mu, v


def bisect_mu(M: np.ndarray, b: np.ndarray, pmax: float):
    """Smallest mu >= 0 with ``||(M + mu I)^-1 b||^2 <= pmax``; returns (mu, v)."""
    M = np.asarray(M, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if not np.any(b):
        return 0.0, np.zeros_like(b)
    mu, v = bisect_mu_batched(M[None], b[None], pmax)
    return float(mu[0]), v[0]


# -- WMMSE ------------------------------------------------------------------

def random_init(rng: np.random.Generator, shape, pmax: float) -> np.ndarray:
    """Beams with uniform direction on the complex sphere and power ~ U[0, pmax]."""
    z = rng.standard_normal(shape + (2,)).view(complex)[..., 0]
    z /= np.linalg.norm(z, axis=-1, keepdims=True)
    power = rng.uniform(0.0, pmax, size=shape[:-1])
    return np.sqrt(power)[..., None] * z


def half_power_init(shape, pmax: float) -> np.ndarray:
    """Real beams at half power on the first antenna (shared start with WCGCN)."""
    V = np.zeros(shape, dtype=complex)
    V[..., 0] = math.sqrt(0.5 * pmax)
    return V


def uw_update(H, V, noise):
    """Receive coefficients U and MSE weights W for the current beams."""
    K = H.shape[-2]
    idx = np.arange(K)
    r = np.einsum("...jkn,...jn->...jk", H.conj(), V)
    R = r.real ** 2 + r.imag ** 2
    direct = r[..., idx, idx]
    interference = np.sum(R * (1.0 - np.eye(K)), axis=-2)
    total = interference + R[..., idx, idx] + noise
    U = direct / total
    # W = (1 - U* h^H v)^-1, written without the cancellation
    W = total / (interference + noise)
    return U, W


def v_update(H, U, W, weights, pmax):
    K = H.shape[-2]
    idx = np.arange(K)
    coef = weights * (U.real ** 2 + U.imag ** 2) * W
    # M_k = sum_j coef_j h_kj h_kj^H ; H[..., k, j, :] = h_kj
    M = np.einsum("...j,...kjn,...kjm->...knm", coef, H, H.conj())
    b = (weights * U * W)[..., None] * H[..., idx, idx, :]
    _, V = bisect_mu_batched(M, b, pmax)
    return V


def wmmse_batch(H, weights, noise, pmax, V0, iters=DEFAULT_ITERS, track=True):
    """Run WMMSE on stacked instances; returns final beams and (..., iters+1) trajectory.

    With ``track=False`` only the final objective is evaluated (timing runs).
    """
    V = np.asarray(V0, dtype=complex)
    traj = [weighted_sum_rate(V, H, weights, noise)] if track else []
    for _ in range(iters):
        U, W = uw_update(H, V, noise)
        V = v_update(H, U, W, weights, pmax)
        if track:
            traj.append(weighted_sum_rate(V, H, weights, noise))
    if not track:
        traj.append(weighted_sum_rate(V, H, weights, noise))
    traj = np.stack(traj, axis=-1)
    if not (np.all(np.isfinite(V)) and np.all(np.isfinite(traj))):
        raise SolverDivergedError("WMMSE produced non-finite values")
    return V, traj


def wmmse_solve(chan: ChannelRealization, pmax: float = 1.0, iters: int = DEFAULT_ITERS,
                init=None, rng: np.random.Generator | None = None) -> SolverReport:
    """Single-instance WMMSE from a given (K, Nt) beam matrix or a random start."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    K, nt = chan.num_pairs, chan.num_tx_antennas
    if init is None or (isinstance(init, str) and init == "random"):
        rng = rng if rng is not None else np.random.default_rng()
        V0 = random_init(rng, (K, nt), pmax)
    else:
        V0 = np.asarray(init, dtype=complex).reshape(K, nt)
        if np.any(np.sum(np.abs(V0) ** 2, axis=-1) > pmax + 1e-9):
            raise ValueError("initial beams violate the power budget")
    t0 = time.perf_counter()
    V, traj = wmmse_batch(chan.H, chan.weights, chan.noise, pmax, V0, iters)
    return SolverReport(alloc_from_beams(V), traj, time.perf_counter() - t0, iters)


def best_of_restarts(chan: ChannelRealization, n_restarts: int, pmax: float = 1.0,
                     iters: int = DEFAULT_ITERS, rng: np.random.Generator | None = None) -> SolverReport:
    if n_restarts < 1:
        raise ValueError("n_restarts must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    K, nt = chan.num_pairs, chan.num_tx_antennas
    V0 = random_init(rng, (n_restarts, K, nt), pmax)
    t0 = time.perf_counter()
    V, traj = wmmse_batch(chan.H[None], chan.weights[None], chan.noise[None], pmax, V0, iters)
    best = int(np.argmax(traj[:, -1]))
    return SolverReport(alloc_from_beams(V[best]), traj[best], time.perf_counter() - t0, iters,
                        {"restart": best, "finals": traj[:, -1].tolist()})


def best_of_restarts_batch(H, weights, noise, pmax, n_restarts, iters, rng):
    """Best final objective per instance over random restarts, for stacked instances."""
    best_V = None
    best = None
    for _ in range(n_restarts):
        V0 = random_init(rng, H.shape[:-3] + (H.shape[-2], H.shape[-1]), pmax)
        V, traj = wmmse_batch(H, weights, noise, pmax, V0, iters)
        obj = traj[..., -1]
        if best is None:
            best, best_V = obj, V
        else:
            better = obj > best
            best = np.where(better, obj, best)
            best_V = np.where(better[..., None, None], V, best_V)
    return best_V, best


# -- Strongest --------------------------------------------------------------

def strongest_beams(H, pmax: float, proportion: float) -> np.ndarray:
    """Full-power matched filter on the ceil(rho K) strongest direct links."""
    if not 0 < proportion <= 1:
        raise ValueError("proportion must lie in (0, 1]")
    K = H.shape[-2]
    idx = np.arange(K)
    hkk = H[..., idx, idx, :]
    gain = np.linalg.norm(hkk, axis=-1)
    n_on = math.ceil(proportion * K - 1e-12)
    order = np.argsort(-gain, axis=-1, kind="stable")
    on = np.zeros(gain.shape, dtype=bool)
    np.put_along_axis(on, order[..., :n_on], True, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        mf = np.where(gain[..., None] > 0, hkk / gain[..., None], 0.0)
    return np.where(on[..., None], math.sqrt(pmax) * mf, 0.0)


def strongest_baseline(chan: ChannelRealization, proportion: float, pmax: float = 1.0) -> np.ndarray:
    return alloc_from_beams(strongest_beams(chan.H, pmax, proportion))
