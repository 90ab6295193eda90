"""Named experiment configurations matching the measured setups.

Background rates are not free knobs: they are solved from the target
zero-delay correlation. For a signal of rate ``S`` mixed with Poissonian
background ``B`` the HBT dip reaches ``g2(0) = 1 - rho^2`` with
``rho = S / (S + B)``, both for CW light and for full-period pulsed peaks.
"""
from __future__ import annotations

import math

from .params import (DetectorParams, EmitterParams, ExperimentConfig, InterferometerParams,
                     PumpParams)

TAU1_CW = 4.0
TAU1_PULSED = 4.04
GAMMA_STAR = 0.055
ALPHA_ZPL = 0.98
V_FACTOR = 0.95
DELTA_T = 40.3
R2, T2 = 0.5238, 0.4762
JITTER_PS = 163.0


def background_for_g2(g2_zero: float, signal_rate: float) -> float:
    """Background rate giving ``g2(0) = g2_zero`` on top of ``signal_rate``."""
    if not 0 <= g2_zero < 1:
        raise ValueError("g2_zero must lie in [0, 1)")
    if g2_zero == 0:
        return 0.0
    rho = math.sqrt(1.0 - g2_zero)
    return signal_rate * (1.0 / rho - 1.0)


def cw_signal_rate(tau1: float, s: float) -> float:
    """Steady-state photon rate of the renewal emitter, k_p / (1 + k_p tau1)."""
    kp = s / (2.0 * tau1)
    return kp / (1.0 + kp * tau1)


def pol_angle_for(v: float, alpha: float) -> float:
    """Relative polarisation angle giving ``alpha^2 cos^2(theta) = v``."""
    c2 = v / (alpha * alpha)
    if not 0 <= c2 <= 1:
        raise ValueError("v must not exceed alpha^2")
    return math.acos(math.sqrt(c2))


def cw_hbt(duration: float = 2.0e8, g2_zero: float = 0.03, tau1: float = TAU1_CW, s: float = 0.2,
           seed: int = 1) -> ExperimentConfig:
    bg = background_for_g2(g2_zero, cw_signal_rate(tau1, s))
    return ExperimentConfig(
        emitter=EmitterParams(tau1=tau1, gamma_star=GAMMA_STAR, background_rate=bg),
        pump=PumpParams(mode="cw", saturation_s=s, duration=duration),
        interferometer=InterferometerParams(delta_t=DELTA_T, r2=0.5, t2=0.5),
        detectors=(DetectorParams(jitter_sigma=JITTER_PS),) * 2,
        topology="HBT", seed=seed,
    )


def cw_hom(duration: float = 2.0e8, parallel: bool = True, g2_zero: float = 0.03,
           tau1: float = TAU1_CW, s: float = 0.2, seed: int = 2) -> ExperimentConfig:
    bg = background_for_g2(g2_zero, cw_signal_rate(tau1, s))
    return ExperimentConfig(
        emitter=EmitterParams(tau1=tau1, gamma_star=GAMMA_STAR, background_rate=bg),
        pump=PumpParams(mode="cw", saturation_s=s, duration=duration),
        interferometer=InterferometerParams(delta_t=DELTA_T, r2=R2, t2=T2, excess_loss=0.06,
                                            pol_angle=0.0 if parallel else math.pi / 2),
        detectors=(DetectorParams(jitter_sigma=JITTER_PS),) * 2,
        topology="HOM", seed=seed,
    )


def pulsed_hom(n_pulses: int = 10**6, parallel: bool = True, g2_zero: float = 0.0,
               v: float = V_FACTOR, alpha: float = ALPHA_ZPL, mode: str = "ensemble",
               rep_rate: float = 1000.0 / DELTA_T, seed: int = 3) -> ExperimentConfig:
    """Pulsed HOM; ``g2_zero`` sets Poissonian background per full period."""
    period = 1000.0 / rep_rate
    bg = background_for_g2(g2_zero, 1.0 / period)
    theta = pol_angle_for(v, alpha) if parallel else math.pi / 2
    return ExperimentConfig(
        emitter=EmitterParams(tau1=TAU1_PULSED, gamma_star=GAMMA_STAR, alpha_zpl=alpha, background_rate=bg),
        pump=PumpParams(mode="pulsed", rep_rate=rep_rate, n_pulses=n_pulses),
        interferometer=InterferometerParams(delta_t=DELTA_T, r2=R2, t2=T2, excess_loss=0.06, pol_angle=theta),
        detectors=(DetectorParams(jitter_sigma=JITTER_PS),) * 2,
        topology="HOM", mode=mode, seed=seed,
    )


PRESETS = {
    "cw-hbt": cw_hbt,
    "cw-hom-parallel": lambda **kw: cw_hom(parallel=True, **kw),
    "cw-hom-orthogonal": lambda **kw: cw_hom(parallel=False, **kw),
    "pulsed-hom-parallel": lambda **kw: pulsed_hom(parallel=True, **kw),
    "pulsed-hom-orthogonal": lambda **kw: pulsed_hom(parallel=False, **kw),
}


def get_preset(name: str, **kw) -> ExperimentConfig:
    try:
        return PRESETS[name](**kw)
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None
