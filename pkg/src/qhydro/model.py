"""Physical model: system mode x bilinearly coupled to one harmonic bath mode y.

All quantities are in Hartree atomic units with hbar = 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PhysicalParams:
    """Hamiltonian constants.

    Parameters
    ----------
    m0 : float
        Mass of the system mode x.
    m : float
        Mass of the bath mode y.
    omega : float
        Bath angular frequency.
    c : float
        Bilinear coupling constant.
    hbar : float
        Reduced Planck constant, fixed at 1.
    """

    m0: float = 2000.0
    m: float = 2000.0
    omega: float = 0.004556
    c: float = 0.015
    hbar: float = 1.0

    def __post_init__(self):
        if not (self.m0 > 0 and self.m > 0 and self.omega > 0):
            raise ValueError("m0, m and omega must be positive")
        if self.hbar != 1.0:
            raise ValueError("hbar is fixed at 1 in atomic units")
        if not math.isfinite(self.c):
            raise ValueError("coupling constant must be finite")

    @property
    def k(self) -> float:
        """Bath stiffness m * omega**2."""
        return self.m * self.omega**2

    @property
    def alpha(self) -> float:
        """Bath ground-state exponent m * omega / hbar."""
        return self.m * self.omega / self.hbar

    @property
    def masses(self) -> tuple[float, float]:
        return (self.m0, self.m)


@dataclass(frozen=True)
class SuperpositionParams:
    """Two Gaussians at x = +/- a with width exponent beta."""

    a: float = 0.8
    beta: float = 4.5

    def __post_init__(self):
        if not (self.a > 0 and self.beta > 0):
            raise ValueError("a and beta must be positive")

    @property
    def norm(self) -> float:
        # Per-Gaussian factor N making the full 2-D state unit normalized:
        # 1 = (N^2 / 2) * sqrt(pi / (2 beta)) * 2 * (1 + exp(-2 beta a^2))
        overlap = math.exp(-2.0 * self.beta * self.a**2)
        return (math.pi / (2.0 * self.beta)) ** -0.25 / math.sqrt(1.0 + overlap)


@dataclass(frozen=True)
class CaseSelector:
    coupled: bool = False

    def coupling(self, params: PhysicalParams) -> float:
        return params.c if self.coupled else 0.0


UNCOUPLED = CaseSelector(False)
COUPLED = CaseSelector(True)


def potential(params: PhysicalParams, case: CaseSelector, x, y):
    """V(x, y) = k y^2 / 2 + c x y; broadcasts over array inputs."""
    c = case.coupling(params)
    return 0.5 * params.k * y * y + c * x * y


def potential_gradient(params: PhysicalParams, case: CaseSelector, x, y):
    """Classical force components (-dV/dx, -dV/dy)."""
    c = case.coupling(params)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return -c * y, -params.k * y - c * x


def bath_ground_state(params: PhysicalParams, y):
    alpha = params.alpha
    return (alpha / math.pi) ** 0.25 * np.exp(-0.5 * alpha * np.asarray(y) ** 2)


def initial_wavefunction(phys: PhysicalParams, sup: SuperpositionParams, x, y):
    """Amplitude R >= 0 and phase S of the initial superposition.

    The state is real, so S is identically zero.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = sup.norm
    system = (n / math.sqrt(2.0)) * (
        np.exp(-sup.beta * (x - sup.a) ** 2) + np.exp(-sup.beta * (x + sup.a) ** 2)
    )
    amp = system * bath_ground_state(phys, y)
    return amp, np.zeros_like(amp)


def initial_log_density(phys: PhysicalParams, sup: SuperpositionParams, x, y):
    """ln(rho) at t = 0 evaluated without underflow in the far wings."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    b, a = sup.beta, sup.a
    # ln(e^{-b(x-a)^2} + e^{-b(x+a)^2}) = -b(x^2+a^2) + ln(2 cosh(2abx))
    z = np.abs(2.0 * a * b * x)
    log_cosh2 = z + np.log1p(np.exp(-2.0 * z))
    log_system = math.log(sup.norm / math.sqrt(2.0)) - b * (x * x + a * a) + log_cosh2
    alpha = phys.alpha
    log_bath = 0.25 * math.log(alpha / math.pi) - 0.5 * alpha * y * y
    return 2.0 * (log_system + log_bath)


def valley_direction(params: PhysicalParams, case: CaseSelector = COUPLED) -> float:
    """Angle in degrees of the valley floor y*(x) = -(c/k) x.

    Raises
    ------
    ValueError
        If the case carries no coupling, where no valley exists.
    """
    c = case.coupling(params)
    if c == 0.0:
        raise ValueError("valley direction is undefined without coupling")
    return math.degrees(math.atan(-c / params.k))
