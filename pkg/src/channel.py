"""
Shadowed-Rician (SR) satellite-ground fading channel with additive Gaussian noise.

The SR law is evaluated for the channel power gain r; the transmitted tensor is
multiplied by the amplitude |h| = sqrt(r) and perturbed with white Gaussian
noise whose variance follows from the SNR under a unit-signal-power convention.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
from scipy import integrate

import src.params as params
from src.errors import (
    ConfigurationError,
    DegenerateChannelError,
    DomainError,
    NumericalFailureError,
)

logger = logging.getLogger(__name__)

Signal = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class ChannelParams:
    """SR fading parameters: scatter power b0, Nakagami shape m and LoS power omega."""

    b0: float = params.default_b0
    m: float = params.default_m
    omega: float = params.default_omega

    def __post_init__(self):
        if not self.b0 > 0:
            raise ConfigurationError(f"b0 must be > 0, got {self.b0}")
        if not self.m > 0:
            raise ConfigurationError(f"m must be > 0, got {self.m}")
        if not self.omega >= 0:
            raise ConfigurationError(f"omega must be >= 0, got {self.omega}")

    @property
    def mean_power(self) -> float:
        """E|h|^2 = 2 b0 + omega."""
        return 2 * self.b0 + self.omega


@dataclass(frozen=True)
class ChannelDraw:
    power_gain: float

    @property
    def amplitude(self) -> float:
        return math.sqrt(self.power_gain)


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float

    @property
    def sigma2(self) -> float:
        return snr_to_sigma2(self.snr_db)


def snr_to_sigma2(snr_db: float) -> float:
    """Per-element noise variance for a unit-power signal at the given SNR."""
    return 10.0 ** (-snr_db / 10.0)


def hyp1f1(a: float, b: float, z: float) -> float:
    """
    Confluent hypergeometric function of the first kind by its ascending series.

    Parameters
    ----------
    a, b : float
        Series parameters; b must not be a non-positive integer.
    z : float
        Finite argument.

    Returns
    -------
    float
        sum_k (a)_k z^k / ((b)_k k!), stopped once the next term is below
        1e-14 of the running sum.

    Raises
    ------
    DomainError
        If b is a non-positive integer or z is not finite.
    NumericalFailureError
        If the series has not converged within the term cap.
    """
    if b <= 0 and float(b).is_integer():
        raise DomainError(f"hyp1f1 undefined for non-positive integer b={b}")
    if not math.isfinite(z):
        raise DomainError(f"hyp1f1 requires a finite argument, got z={z}")

    term = 1.0
    total = 1.0
    for k in range(params.hyp1f1_max_terms):
        term *= (a + k) * z / ((b + k) * (k + 1))
        total += term
        if abs(term) <= params.hyp1f1_rel_tol * abs(total):
            return total
        if not math.isfinite(total):
            break
    raise NumericalFailureError(
        f"hyp1f1 did not converge within {params.hyp1f1_max_terms} terms "
        f"for a={a}, z={z}",
        details={"a": a, "z": z},
    )


def eval_pdf(channel: ChannelParams, r: float) -> float:
    """
    Probability density of the SR channel power gain at r.

    f(r) = (2 b0 m / (2 b0 m + omega))^m / (2 b0) * exp(-r / (2 b0))
           * 1F1(m, 1, omega r / (2 b0 (2 b0 m + omega)))
    """
    if r < 0:
        raise DomainError(f"SR density is defined for r >= 0, got r={r}")
    b0, m, omega = channel.b0, channel.m, channel.omega
    two_b0 = 2 * b0
    coefficient = (two_b0 * m / (two_b0 * m + omega)) ** m / two_b0
    z = omega * r / (two_b0 * (two_b0 * m + omega))
    return coefficient * math.exp(-r / two_b0) * hyp1f1(m, 1.0, z)


def integration_limit(channel: ChannelParams, tail: float = 1e-8) -> float:
    """
    Upper integration bound R beyond which the SR mass is below `tail`.

    Uses the Chernoff bound on the moment generating function of the gain,
    P(r > R) <= E[exp(s r)] exp(-s R) with s = 1 / (4 b0), where
    E[exp(s r)] = (1 - 2 b0 s)^(m-1) / (1 - 2 b0 s (1 + omega / (2 b0 m)))^m.
    """
    b0, m, omega = channel.b0, channel.m, channel.omega
    s = 1.0 / (4 * b0)
    denominator = 1 - 2 * b0 * s * (1 + omega / (2 * b0 * m))
    while denominator <= 0:
        s /= 2
        denominator = 1 - 2 * b0 * s * (1 + omega / (2 * b0 * m))
    log_mgf = (m - 1) * math.log(1 - 2 * b0 * s) - m * math.log(denominator)
    return (log_mgf - math.log(tail)) / s


def pdf_mass(channel: ChannelParams, upper: Optional[float] = None) -> float:
    """Integral of the SR density on [0, upper] by adaptive quadrature."""
    if upper is None:
        upper = integration_limit(channel)
    mass, _ = integrate.quad(
        lambda r: eval_pdf(channel, r),
        0.0,
        upper,
        points=[channel.mean_power],
        limit=400,
        epsabs=1e-12,
        epsrel=1e-10,
    )
    return mass


def cdf_table(
    channel: ChannelParams, n_points: int = 20001
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Numerically integrated SR cumulative distribution on [0, R].

    Returns
    -------
    (grid, cdf) : Tuple[np.ndarray, np.ndarray]
        Evaluation grid and cumulative mass (trapezoid-integrated).
    """
    upper = integration_limit(channel)
    logger.info(f"Tabulating SR cdf on [0, {upper:.3f}] with {n_points} points")
    grid = np.linspace(0.0, upper, n_points)
    density = np.array([eval_pdf(channel, r) for r in grid])
    cdf = integrate.cumulative_trapezoid(density, grid, initial=0.0)
    return grid, cdf


def sample_power_gains(channel: ChannelParams, seed: int, n: int) -> np.ndarray:
    """
    Draws n i.i.d. SR power gains.

    Scatter is complex Gaussian with per-axis variance b0, the LoS amplitude A
    has A^2 ~ Gamma(m, omega / m) and a uniform phase; the gain is
    |A exp(j phi) + Z|^2.
    """
    if n < 1:
        raise ConfigurationError(f"Number of draws must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    scatter = math.sqrt(channel.b0) * (
        rng.standard_normal(n) + 1j * rng.standard_normal(n)
    )
    los_amplitude = np.sqrt(rng.gamma(channel.m, channel.omega / channel.m, size=n))
    phase = rng.uniform(0.0, 2 * np.pi, size=n)
    return np.abs(los_amplitude * np.exp(1j * phase) + scatter) ** 2


def sample_gain(channel: ChannelParams, seed: int, n: int) -> List[ChannelDraw]:
    return [ChannelDraw(float(r)) for r in sample_power_gains(channel, seed, n)]


def apply_channel(
    y: Signal,
    draw: ChannelDraw,
    noise: NoiseSpec,
    seed: int,
    equalize: bool = True,
) -> Signal:
    """
    Passes a unit-power tensor through one block-fading realisation.

    Parameters
    ----------
    y : np.ndarray or torch.Tensor
        Transmitted tensor, normalised upstream to unit average power.
    draw : ChannelDraw
        Fading realisation; its amplitude multiplies the whole block.
    noise : NoiseSpec
        SNR of the link.
    seed : int
        Seed of the Gaussian noise.
    equalize : bool, optional
        Divide by h at the receiver (perfect CSI). The default is True.

    Returns
    -------
    Same type and shape as y: h y + n, optionally divided by h.

    Raises
    ------
    DegenerateChannelError
        If the amplitude is zero and equalization is requested.
    """
    h = draw.amplitude
    if equalize and h == 0:
        raise DegenerateChannelError("Cannot equalize a zero-amplitude channel draw")

    rng = np.random.default_rng(seed)
    n = rng.normal(0.0, math.sqrt(noise.sigma2), size=tuple(y.shape))
    if isinstance(y, torch.Tensor):
        n = torch.as_tensor(n, dtype=y.dtype, device=y.device)

    received = h * y + n
    if equalize:
        received = received / h
    return received
