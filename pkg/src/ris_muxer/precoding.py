"""Effective channel, weighted sum-rate, and the MMSE / WMMSE precoders.

Array conventions: ``C`` is (..., U, M), a precoder ``V`` is (..., M, U) and
phases ``psi`` are (..., H_ris, W_ris) or already flattened to (..., N).
Every routine accepts an optional leading batch of samples.

Gradients of real scalars with respect to complex arrays use the
convention ``df = Re tr(Xbar^H dX)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .channel import ChannelSet
from .seeding import make_rng

LN2 = np.log(2.0)


class PrecodingError(ValueError):
    pass


class BisectionBracketError(PrecodingError):
    def __init__(self, power_at_zero):
        self.power_at_zero = np.asarray(power_at_zero)
        super().__init__(f"no multiplier bracket found after 200 doublings; power at mu=0: {self.power_at_zero}")


@dataclass(frozen=True)
class LinkBudget:
    rho: float
    e_tr: float = 1.0

    def __post_init__(self):
        if not self.rho > 0 or not self.e_tr > 0:
            raise PrecodingError("rho and e_tr must be positive")

    @property
    def noise(self) -> float:
        return 1.0 / self.rho


def check_weights(alpha, users: int | None = None) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or (users is not None and alpha.size != users):
        raise PrecodingError(f"expected {users} user weights, got shape {alpha.shape}")
    if np.any(alpha < 0) or np.any(alpha > 1) or abs(alpha.sum() - 1.0) > 1e-9:
        raise PrecodingError(f"weights must lie in [0, 1] and sum to 1, got {alpha.tolist()}")
    return alpha


# -- channel ----------------------------------------------------------------

def phase_vector(psi) -> np.ndarray:
    """Flatten a phase field (..., H_ris, W_ris) row-major to (..., N)."""
    psi = np.asarray(psi, dtype=np.float64)
    return psi.reshape(psi.shape[:-2] + (-1,))


def effective_channel_arrays(G, D, H, psi_flat) -> np.ndarray:
    """``G diag(exp(j psi)) H + D`` for stacked ``G`` (..., U, N)."""
    phi = np.exp(1j * np.asarray(psi_flat, dtype=np.float64))
    return (G * phi[..., None, :]) @ H + D


def effective_channel(cs: ChannelSet, psi) -> np.ndarray:
    return effective_channel_arrays(cs.G, cs.D, cs.H, phase_vector(psi))


# -- rates ------------------------------------------------------------------

def _sinr_parts(C, V, rho):
    T = C @ V
    p = np.abs(T) ** 2
    s = np.diagonal(p, axis1=-2, axis2=-1)
    interference = p.sum(axis=-1) - s + 1.0 / rho
    return T, p, s, interference


def user_rates(C, V, rho) -> np.ndarray:
    """Per-user rates log2(1 + SINR_u), shape (..., U)."""
    _, _, s, i = _sinr_parts(C, V, rho)
    return np.log2(1.0 + s / i)


def wsr(C, V, alpha, rho) -> np.ndarray:
    return user_rates(C, V, rho) @ np.asarray(alpha, dtype=np.float64)


def wsr_backward(C, V, alpha, rho):
    """Per-sample WSR and its gradients with respect to ``C`` and ``V``."""
    alpha = np.asarray(alpha, dtype=np.float64)
    T, p, s, i = _sinr_parts(C, V, rho)
    value = np.log2(1.0 + s / i) @ alpha
    tot = i + s
    dp = (alpha * (1.0 / tot - 1.0 / i) / LN2)[..., :, None] * np.ones_like(p)
    u = p.shape[-1]
    diag = np.arange(u)
    dp[..., diag, diag] = alpha / (tot * LN2)
    Tbar = 2.0 * dp * T
    Cbar = Tbar @ np.conj(np.swapaxes(V, -1, -2))
    Vbar = np.conj(np.swapaxes(C, -1, -2)) @ Tbar
    return value, Cbar, Vbar


# -- MMSE -------------------------------------------------------------------

def _herm(x):
    return np.conj(np.swapaxes(x, -1, -2))


def _mmse_core(C, rho):
    m = C.shape[-1]
    A = _herm(C) @ C + np.eye(m) / rho
    Q = np.linalg.solve(A, _herm(C))
    return A, Q


def mmse_precoder(C, link: LinkBudget) -> np.ndarray:
    """Closed-form MMSE precoder ``beta (C^H C + I/rho)^-1 C^H`` at full power."""
    C = numerics.as_complex(C)
    _, Q = _mmse_core(C, link.rho)
    norm = np.linalg.norm(Q, axis=(-2, -1), keepdims=True)
    return np.sqrt(link.e_tr) * Q / norm


def mmse_beta(C, link: LinkBudget) -> np.ndarray:
    _, Q = _mmse_core(numerics.as_complex(C), link.rho)
    return np.sqrt(link.e_tr) / np.linalg.norm(Q, axis=(-2, -1))


def mmse_mse(C, V, beta, rho) -> np.ndarray:
    """``E||beta^-1 (C V x + n) - x||^2`` with unit-power symbols, noise variance 1/rho."""
    C = numerics.as_complex(C)
    u = C.shape[-2]
    beta = np.asarray(beta, dtype=np.float64)
    err = (C @ V) / beta[..., None, None] - np.eye(u)
    return np.linalg.norm(err, axis=(-2, -1)) ** 2 + u / (rho * beta ** 2)


def mmse_backward(C, link: LinkBudget, Vbar) -> np.ndarray:
    """Pull a gradient on the MMSE precoder back onto ``C``."""
    A, Q = _mmse_core(C, link.rho)
    n = np.linalg.norm(Q, axis=(-2, -1), keepdims=True)
    k = np.sqrt(link.e_tr)
    inner = np.real(np.sum(np.conj(Vbar) * Q, axis=(-2, -1), keepdims=True))
    Qbar = (k / n) * Vbar - (k / n ** 3) * inner * Q
    P = np.linalg.solve(A, Qbar)
    Abar = -P @ _herm(Q)
    return _herm(P) + C @ (Abar + _herm(Abar))


def phase_backward(G, H, psi_flat, Cbar) -> np.ndarray:
    """Gradient with respect to the phases given ``Cbar`` on ``G diag(phi) H + D``."""
    phi = np.exp(1j * psi_flat)
    phibar = np.sum(np.conj(G) * (Cbar @ np.conj(H.T)), axis=-2)
    return np.imag(phibar * np.conj(phi))


def mmse_wsr_and_grad(G, D, H, psi_flat, alpha, link: LinkBudget):
    """Per-sample WSR under MMSE precoding and d/dpsi (precoder differentiated)."""
    C = effective_channel_arrays(G, D, H, psi_flat)
    V = mmse_precoder(C, link)
    value, Cbar, Vbar = wsr_backward(C, V, alpha, link.rho)
    Cbar = Cbar + mmse_backward(C, link, Vbar)
    return value, phase_backward(G, H, psi_flat, Cbar)


def fixed_precoder_wsr_and_grad(G, D, H, psi_flat, V, alpha, link: LinkBudget):
    """Per-sample WSR with ``V`` held constant, and d/dpsi."""
    C = effective_channel_arrays(G, D, H, psi_flat)
    value, Cbar, _ = wsr_backward(C, V, alpha, link.rho)
    return value, phase_backward(G, H, psi_flat, Cbar)


# -- WMMSE ------------------------------------------------------------------

@dataclass
class WmmseInfo:
    wsr_trace: np.ndarray    # (iterations + 1, S), first row is the initial precoder
    power_trace: np.ndarray  # (iterations + 1, S)
    iterations: np.ndarray   # (S,) outer iterations run per sample
    mu: np.ndarray           # (S,) multiplier of the last update


def total_power(V) -> np.ndarray:
    return np.sum(np.abs(V) ** 2, axis=(-2, -1))


def _power_at(mu, lam, pw):
    with np.errstate(divide="ignore", over="ignore"):
        return np.sum(pw / (lam + mu[:, None]) ** 2, axis=-1)


def _power_constrained_solve(A0, B, e_tr):
    """Solve ``(A0 + mu I) V = B`` with the smallest mu >= 0 giving power <= e_tr."""
    lam, E = np.linalg.eigh(A0)
    lam = np.maximum(lam, 0.0)
    P = _herm(E) @ B
    pw = np.sum(np.abs(P) ** 2, axis=-1)
    tol = lam[:, -1:] * lam.shape[-1] * np.finfo(np.float64).eps
    pos = lam > tol
    inv0 = np.where(pos, 1.0 / np.where(pos, lam, 1.0), 0.0)
    with np.errstate(over="ignore"):
        power0 = np.sum(pw * inv0 ** 2, axis=-1)
    mu = np.zeros(lam.shape[0])
    need = power0 > e_tr
    if np.any(need):
        l_n, pw_n = lam[need], pw[need]
        hi = np.maximum(1e-300, 1e-12 * l_n[:, -1])
        found = _power_at(hi, l_n, pw_n) < e_tr
        for _ in range(200):
            if found.all():
                break
            hi = np.where(found, hi, 2.0 * hi)
            found = _power_at(hi, l_n, pw_n) < e_tr
        if not found.all():
            raise BisectionBracketError(power0[need][~found])
        lo = np.zeros_like(hi)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            over = _power_at(mid, l_n, pw_n) > e_tr
            lo = np.where(over, mid, lo)
            hi = np.where(over, hi, mid)
            if np.all(hi - lo <= 1e-15 * hi):
                break
        mu[need] = hi
    with np.errstate(divide="ignore"):
        # masked entries (unconstrained samples) may divide by a zero eigenvalue
        scale = np.where(need[:, None], 1.0 / (lam + mu[:, None]), inv0)
    return E @ (P * scale[..., None]), mu


def wmmse_precoder(C, alpha, link: LinkBudget, V_init=None, max_outer: int = 100, eps: float = 1e-4,
                   return_info: bool = False):
    """Iterative WMMSE precoder.

    Each outer iteration updates the receive scalars, the MSE weights and
    then the precoders (multiplier found by bisection so the power budget is
    met). A sample stops once the summed MSE weights change by at most
    ``eps``; all samples stop after ``max_outer`` iterations.
    """
    if max_outer < 1:
        raise PrecodingError("max_outer must be >= 1")
    if not eps > 0:
        raise PrecodingError("eps must be positive")
    C = numerics.as_complex(C)
    single = C.ndim == 2
    Cb = C.reshape((-1,) + C.shape[-2:])
    alpha = check_weights(alpha, Cb.shape[-2])
    if V_init is None:
        V = mmse_precoder(Cb, link)
    else:
        V = numerics.as_complex(V_init).reshape(Cb.shape[0], Cb.shape[-1], Cb.shape[-2]).copy()
        if np.any(total_power(V) > link.e_tr * (1 + 1e-9)):
            raise PrecodingError("initial precoder violates the power budget")
    S = Cb.shape[0]
    w_prev = np.zeros(S)
    active = np.ones(S, dtype=bool)
    iters = np.zeros(S, dtype=int)
    mu = np.zeros(S)
    wsr_tr = [wsr(Cb, V, alpha, link.rho)]
    pow_tr = [total_power(V)]
    for _ in range(max_outer):
        idx = np.flatnonzero(active)
        Ca, Va = Cb[idx], V[idx]
        T = Ca @ Va
        cv = np.diagonal(T, axis1=-2, axis2=-1)
        S_u = np.sum(np.abs(T) ** 2, axis=-1) + link.noise
        xi = cv / S_u
        w = S_u / (S_u - np.abs(cv) ** 2)
        A0 = _herm(Ca) @ (Ca * (alpha * w * np.abs(xi) ** 2)[..., None])
        B = _herm(Ca) * (alpha * w * xi)[:, None, :]
        V_new, mu_new = _power_constrained_solve(A0, B, link.e_tr)
        V[idx] = V_new
        mu[idx] = mu_new
        iters[idx] += 1
        wsum = w.sum(axis=-1)
        done = np.abs(wsum - w_prev[idx]) <= eps
        w_prev[idx] = wsum
        active[idx[done]] = False
        wsr_tr.append(wsr(Cb, V, alpha, link.rho))
        pow_tr.append(total_power(V))
        if not active.any():
            break
    out = V.reshape(C.shape[:-2] + (C.shape[-1], C.shape[-2]))
    if not return_info:
        return out
    info = WmmseInfo(np.array(wsr_tr), np.array(pow_tr), iters, mu)
    return out, info


# -- baselines --------------------------------------------------------------

def random_phase_baseline(seed: int, ris_shape, index: int = 0) -> np.ndarray:
    rng = make_rng(seed, "random-phase", index)
    return rng.uniform(0.0, 2.0 * np.pi, size=tuple(ris_shape))


def alternating_gradient_baseline(cs: ChannelSet, alpha, link: LinkBudget, steps: int, step_size: float,
                                  seed: int = 0, init=None) -> np.ndarray:
    """Gradient ascent on the phases of WSR(C(psi), MMSE(C(psi))).

    The precoder is recomputed at every step; phases are wrapped to
    [0, 2 pi) after each step and the best iterate is returned.
    """
    if steps < 1:
        raise PrecodingError("steps must be >= 1")
    alpha = check_weights(alpha, cs.users)
    psi = random_phase_baseline(seed, cs.ris_shape) if init is None else np.array(init, dtype=np.float64)
    psi = phase_vector(psi).copy()
    best_val, best = -np.inf, psi.copy()
    for _ in range(steps):
        val, grad = mmse_wsr_and_grad(cs.G, cs.D, cs.H, psi, alpha, link)
        if val > best_val:
            best_val, best = float(val), psi.copy()
        psi = np.mod(psi + step_size * grad, 2.0 * np.pi)
    val, _ = mmse_wsr_and_grad(cs.G, cs.D, cs.H, psi, alpha, link)
    if val > best_val:
        best = psi
    return best.reshape(cs.ris_shape)
