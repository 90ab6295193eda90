"""Monte Carlo photon streams through HBT / HOM optics onto detectors.

Photon data is kept column-wise in :class:`PhotonStream` (numpy arrays)
rather than as lists of objects; indexing a stream yields a
:class:`PhotonEmission` for inspection.

The two-photon beam-splitter step uses the following exact
decomposition. For single-photon wave packets with exponential envelopes
``A(t)``, ``B(t)`` the marginal law of the *unordered* pair of click times is
``A(x)B(y) + A(y)B(x)``, independent of the interference term. So each
photon keeps the click time it was emitted with, and only the assignment of
the two clicks to output ports depends on interference.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import rng
from .params import (
    ConfigError,
    DetectorParams,
    EmitterParams,
    ExperimentConfig,
    InterferometerParams,
    PumpParams,
)

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class PhotonEmission:
    emit_time: float
    zpl: bool
    freq_offset: float
    phase_seed: int
    pulse_index: int | None
    excite_time: float
    uid: int


@dataclass(frozen=True)
class PhotonStream:
    """Column store of photons.

    ``emit_time`` is the click time of the photon if it were detected without
    jitter, ``excite_time`` the start of its wave packet (equal to
    ``emit_time`` for background light). ``freq_offset`` is in GHz.
    ``pulse_index`` is -1 for CW and background photons. ``uid`` is the
    photon's index in the emitted stream and keys all later random draws.
    """

    emit_time: np.ndarray
    excite_time: np.ndarray
    zpl: np.ndarray
    freq_offset: np.ndarray
    phase_seed: np.ndarray
    pulse_index: np.ndarray
    uid: np.ndarray

    def __len__(self) -> int:
        return len(self.emit_time)

    def __getitem__(self, i: int) -> PhotonEmission:
        pi = int(self.pulse_index[i])
        return PhotonEmission(
            emit_time=float(self.emit_time[i]),
            zpl=bool(self.zpl[i]),
            freq_offset=float(self.freq_offset[i]),
            phase_seed=int(self.phase_seed[i]),
            pulse_index=None if pi < 0 else pi,
            excite_time=float(self.excite_time[i]),
            uid=int(self.uid[i]),
        )

    def __iter__(self) -> Iterator[PhotonEmission]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> "PhotonStream":
        return PhotonStream(*(getattr(self, f)[idx] for f in _FIELDS))

    def shifted(self, dt: float) -> "PhotonStream":
        return PhotonStream(
            self.emit_time + dt, self.excite_time + dt, self.zpl, self.freq_offset,
            self.phase_seed, self.pulse_index, self.uid,
        )

    @classmethod
    def empty(cls) -> "PhotonStream":
        return cls(
            np.empty(0), np.empty(0), np.empty(0, bool), np.empty(0),
            np.empty(0, np.uint64), np.empty(0, np.int64), np.empty(0, np.int64),
        )

    @classmethod
    def from_photons(cls, photons: Sequence[PhotonEmission]) -> "PhotonStream":
        if not photons:
            return cls.empty()
        return cls(
            np.array([p.emit_time for p in photons], float),
            np.array([p.excite_time for p in photons], float),
            np.array([p.zpl for p in photons], bool),
            np.array([p.freq_offset for p in photons], float),
            np.array([p.phase_seed for p in photons], np.uint64),
            np.array([-1 if p.pulse_index is None else p.pulse_index for p in photons], np.int64),
            np.array([p.uid for p in photons], np.int64),
        )


_FIELDS = ("emit_time", "excite_time", "zpl", "freq_offset", "phase_seed", "pulse_index", "uid")


@dataclass
class Detections:
    """Detector output: parallel ``channel`` / ``timestamp`` (integer ps) arrays sorted by time."""

    channel: np.ndarray
    timestamp: np.ndarray
    counts: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.timestamp)

    def times(self, ch: int) -> np.ndarray:
        return self.timestamp[self.channel == ch]

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        return self.times(0), self.times(1)

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.empty(0, np.uint8), np.empty(0, np.int64), {})


# ---------------------------------------------------------------- emission

def _causal_keep(cand: np.ndarray, start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """keep[n] = cand[n] and max(end[j] for kept j < n) <= start[n].

    Solved by fixed-point iteration (exact for this causal system); falls
    back to a plain loop if a long dependency chain shows up.
    """
    keep = cand.copy()
    for _ in range(64):
        e = np.where(keep, end, -np.inf)
        prev = np.empty_like(e)
        if len(e):
            prev[0] = -np.inf
            prev[1:] = np.maximum.accumulate(e)[:-1]
        new = cand & (prev <= start)
        if np.array_equal(new, keep):
            return keep
        keep = new
    keep = np.zeros_like(cand)
    last = -np.inf
    for i in np.flatnonzero(cand):
        if last <= start[i]:
            keep[i] = True
            last = max(last, end[i])
    return keep


def _ou_offsets(times: np.ndarray, sigma_ghz: float, tau: float, z: np.ndarray) -> np.ndarray:
    """Exact Ornstein-Uhlenbeck samples at increasing ``times``."""
    out = np.empty_like(times)
    if len(times) == 0:
        return out
    x = sigma_ghz * z[0]
    out[0] = x
    decay = np.exp(-np.diff(times) / tau)
    kick = sigma_ghz * np.sqrt(1.0 - decay * decay) * z[1:]
    for i in range(1, len(times)):
        x = x * decay[i - 1] + kick[i - 1]
        out[i] = x
    return out


def _cw_renewal(pump: PumpParams, tau1: float, duration: float, seed: int):
    kp = pump.pump_rate(tau1)
    excite, emit = [], []
    t0 = 0.0
    b = 0
    while t0 < duration:
        g = rng.generator(seed, rng.EMIT, 0, b)
        wait = g.standard_exponential(rng.BLOCK) / kp
        life = g.standard_exponential(rng.BLOCK) * tau1
        cycle_end = t0 + np.cumsum(wait + life)
        exc = cycle_end - life
        excite.append(exc)
        emit.append(cycle_end)
        t0 = cycle_end[-1]
        b += 1
    excite = np.concatenate(excite) if excite else np.empty(0)
    emit = np.concatenate(emit) if emit else np.empty(0)
    m = emit < duration
    return excite[m], emit[m], np.full(int(m.sum()), -1, np.int64)


def _pulsed(pump: PumpParams, tau1: float, n_pulses: int, seed: int):
    period = pump.period
    trig = np.arange(n_pulses, dtype=float) * period
    excited = rng.uniform(seed, rng.EMIT, n_pulses, 1) < pump.p_excite
    delay = rng.exponential(seed, rng.EMIT, n_pulses, 2) * tau1
    emit = trig + delay
    # an emitter still excited at the next trigger cannot be re-excited
    keep = _causal_keep(excited, trig, emit)
    idx = np.flatnonzero(keep)
    return trig[idx], emit[idx], idx.astype(np.int64)


def simulate_emission(
    emitter: EmitterParams,
    pump: PumpParams,
    duration_or_pulses: float | int | None = None,
    seed: int = 0,
) -> PhotonStream:
    """Photon stream of a single emitter plus uncorrelated background.

    ``duration_or_pulses`` is a duration in ns (CW) or a pulse count (pulsed);
    ``None`` takes it from ``pump``.
    """
    if pump.mode == "cw":
        span = pump.duration if duration_or_pulses is None else float(duration_or_pulses)
        if not span > 0:
            raise ValueError("CW duration must be > 0")
        excite, emit, pidx = _cw_renewal(pump, emitter.tau1, span, seed)
    else:
        n = pump.n_pulses if duration_or_pulses is None else duration_or_pulses
        if int(n) != n or n <= 0:
            raise ValueError("pulse count must be a positive integer")
        n = int(n)
        span = n * pump.period
        excite, emit, pidx = _pulsed(pump, emitter.tau1, n, seed)

    n_em = len(emit)
    zpl = rng.uniform(seed, rng.EMIT, n_em, 3) < emitter.alpha_zpl
    if emitter.diffusion_sigma > 0:
        z = rng.normal(seed, rng.DIFFUSION, n_em)
        freq = _ou_offsets(emit, emitter.diffusion_sigma / 1000.0, emitter.diffusion_tau, z)
    else:
        freq = np.zeros(n_em)
    phase = rng.seeds64(seed, rng.PHASE_SEED, n_em)

    if emitter.background_rate > 0:
        g = rng.generator(seed, rng.BACKGROUND, 0)
        nb = int(g.poisson(emitter.background_rate * span))
        tb = np.sort(rng.uniform(seed, rng.BACKGROUND, nb, 1) * span)
        emit = np.concatenate([emit, tb])
        excite = np.concatenate([excite, tb])
        zpl = np.concatenate([zpl, np.zeros(nb, bool)])
        freq = np.concatenate([freq, np.zeros(nb)])
        phase = np.concatenate([phase, rng.seeds64(seed, rng.PHASE_SEED, nb, 1)])
        pidx = np.concatenate([pidx, np.full(nb, -1, np.int64)])
        order = np.argsort(emit, kind="stable")
        emit, excite, zpl, freq, phase, pidx = (a[order] for a in (emit, excite, zpl, freq, phase, pidx))

    return PhotonStream(emit, excite, zpl, freq, phase, pidx, np.arange(len(emit), dtype=np.int64))


def simulate_excitation_scan(
    detuning_ghz: np.ndarray,
    fwhm_mhz: float,
    peak_counts: float,
    background: float = 0.0,
    seed: int = 0,
) -> np.ndarray:
    """Poisson counts of a Lorentzian excitation line scanned over ``detuning_ghz``."""
    half = fwhm_mhz / 2000.0
    x = np.asarray(detuning_ghz, float)
    mean = background + peak_counts * half**2 / (x**2 + half**2)
    return rng.generator(seed, rng.EMIT, 99).poisson(mean).astype(float)


# ----------------------------------------------------------------- optics

def route_hom(
    photons: PhotonStream,
    ifo: InterferometerParams,
    seed: int = 0,
    n_total: int | None = None,
) -> tuple[PhotonStream, PhotonStream]:
    """Split at the PBS into the short arm A and the delayed long arm B.

    Each photon goes long with probability 1/2; survival through each arm is
    ``arm_transmission * (1 - excess_loss)``. ``n_total`` sizes the random
    streams (defaults to ``max(uid) + 1``).
    """
    n = len(photons)
    if n == 0:
        return PhotonStream.empty(), PhotonStream.empty()
    size = int(photons.uid.max()) + 1 if n_total is None else n_total
    uid = photons.uid
    long = rng.uniform(seed, rng.ROUTE, size)[uid] < 0.5
    surv = np.where(long, ifo.arm_transmissions[1], ifo.arm_transmissions[0]) * (1.0 - ifo.excess_loss)
    alive = rng.uniform(seed, rng.LOSS, size)[uid] < surv
    a = photons.take(np.flatnonzero(~long & alive))
    b = photons.take(np.flatnonzero(long & alive)).shifted(ifo.delta_t)
    return a, b


def pair_nearest(start_a: np.ndarray, start_b: np.ndarray, window: float) -> tuple[np.ndarray, np.ndarray]:
    """Pair arm-A with arm-B photons whose wave packets start within ``window``.

    Repeatedly takes adjacent (A, B) neighbours in start-time order whose gap
    is a local minimum, so the closest candidates are matched first.
    Returns index arrays into ``start_a`` and ``start_b``.
    """
    na = len(start_a)
    start = np.concatenate([start_a, start_b])
    arm = np.concatenate([np.zeros(na, bool), np.ones(len(start_b), bool)])
    alive = np.argsort(start, kind="stable")
    got_i, got_j = [], []
    while len(alive) > 1:
        s = start[alive]
        a = arm[alive]
        gap = np.diff(s)
        valid = (a[1:] != a[:-1]) & (gap <= window)
        if not valid.any():
            break
        g = np.where(valid, gap, np.inf)
        left = np.concatenate([[np.inf], g[:-1]])
        right = np.concatenate([g[1:], [np.inf]])
        pick = np.flatnonzero(valid & (g < left) & (g <= right))
        got_i.append(alive[pick])
        got_j.append(alive[pick + 1])
        mask = np.ones(len(alive), bool)
        mask[pick] = False
        mask[pick + 1] = False
        alive = alive[mask]
    if not got_i:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    i = np.concatenate(got_i)
    j = np.concatenate(got_j)
    ia = np.where(arm[i], j, i)
    ib = np.where(arm[i], i, j) - na
    order = np.argsort(ia, kind="stable")
    return ia[order], ib[order]


def outcome_probabilities(
    a: PhotonStream,
    b: PhotonStream,
    ifo: InterferometerParams,
    emitter: EmitterParams,
    mode: str = "ensemble",
) -> np.ndarray:
    """Conditional port-assignment probabilities for aligned photon pairs.

    Columns: (a->0 & b->1, a->1 & b->0, both->0, both->1), given the two click
    times. Photon a enters port a (to channel 0 with probability T), photon
    b enters port b (to channel 0 with probability R).
    """
    if mode not in ("ensemble", "trajectory"):
        raise ValueError(f"unknown interference mode {mode!r}")
    tau1 = emitter.tau1
    if not tau1 > 0:
        raise ValueError("degenerate wave packet: tau1 must be > 0")
    R, T = ifo.R, ifo.T
    x, y = a.emit_time, b.emit_time
    # both wave packets have started before either click -> full overlap term
    both = (x >= b.excite_time) & (y >= a.excite_time) & a.zpl & b.zpl
    sep = x - y
    dw = TWO_PI * (a.freq_offset - b.freq_offset)
    w = ifo.overlap_pol * both
    if mode == "ensemble":
        cos_phi = np.exp(-2.0 * emitter.gamma_star * np.abs(sep)) * np.cos(dw * sep)
    else:
        phi = dw * sep
        if emitter.gamma_star > 0:
            phi = phi + _wiener_difference(a, x, y, emitter.gamma_star) - _wiener_difference(b, x, y, emitter.gamma_star)
        cos_phi = np.cos(phi)
    p2 = both.astype(float)
    cross = 2.0 * R * T * w * cos_phi
    norm = 1.0 + p2
    p_cd = (T * T + R * R * p2 - cross) / norm
    p_dc = (T * T * p2 + R * R - cross) / norm
    p_cc = R * T * (1.0 + p2 + 2.0 * w * cos_phi) / norm
    p_dd = p_cc
    out = np.stack([p_cd, p_dc, p_cc, p_dd], axis=1)
    return np.clip(out, 0.0, None)


def _wiener_difference(p: PhotonStream, x: np.ndarray, y: np.ndarray, gamma: float) -> np.ndarray:
    """phi(x) - phi(y) for each photon's own Wiener phase path.

    The path starts at the wave-packet start with phi = 0 and has variance
    ``2 gamma t``; it is evaluated at the two click times using the
    photon's ``phase_seed``.
    """
    lo = np.minimum(x, y)
    hi = np.maximum(x, y)
    t0 = np.clip(lo - p.excite_time, 0.0, None)
    z0 = rng.keyed_normal(p.phase_seed, 0)
    z1 = rng.keyed_normal(p.phase_seed, 1)
    phi_lo = np.sqrt(2.0 * gamma * t0) * z0
    phi_hi = phi_lo + np.sqrt(2.0 * gamma * (hi - lo)) * z1
    return np.where(x >= y, phi_hi - phi_lo, phi_lo - phi_hi)


def interfere_pairs(
    a: PhotonStream,
    b: PhotonStream,
    ifo: InterferometerParams,
    emitter: EmitterParams,
    mode: str = "ensemble",
    seed: int = 0,
    u: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised two-photon beam splitter for aligned pairs ``a[i]``, ``b[i]``.

    Returns ``(channel_a, time_a, channel_b, time_b)``.
    """
    p = outcome_probabilities(a, b, ifo, emitter, mode)
    if u is None:
        u = rng.uniform(seed, rng.INTERFERE, len(a))
    cum = np.cumsum(p, axis=1)
    cum /= cum[:, -1:]
    k = (u[:, None] > cum[:, :-1]).sum(axis=1)
    ch_a = np.array([0, 1, 0, 1], np.uint8)[k]
    ch_b = np.array([1, 0, 0, 1], np.uint8)[k]
    return ch_a, a.emit_time.copy(), ch_b, b.emit_time.copy()


def interfere_pair(
    a: PhotonEmission,
    b: PhotonEmission,
    ifo: InterferometerParams,
    emitter: EmitterParams,
    mode: str = "ensemble",
    seed: int = 0,
    window: float | None = None,
) -> tuple[int, float, int, float]:
    """Single-pair version of :func:`interfere_pairs`.

    Photons whose wave packets start further apart than ``window``
    (default ``10 tau1``) are routed independently.
    """
    window = 10.0 * emitter.tau1 if window is None else window
    g = rng.generator(seed, rng.INTERFERE, 1)
    if abs(a.excite_time - b.excite_time) > window:
        ua, ub = g.random(2)
        return (int(ua >= ifo.T), a.emit_time, int(ub >= ifo.R), b.emit_time)
    sa = PhotonStream.from_photons([a])
    sb = PhotonStream.from_photons([b])
    ca, ta, cb, tb = interfere_pairs(sa, sb, ifo, emitter, mode, u=g.random(1))
    return int(ca[0]), float(ta[0]), int(cb[0]), float(tb[0])


def beam_splitter(
    arm_a: PhotonStream,
    arm_b: PhotonStream,
    ifo: InterferometerParams,
    emitter: EmitterParams,
    mode: str,
    seed: int,
    window: float,
    n_total: int,
) -> tuple[np.ndarray, np.ndarray, dict]:
    """All photons at the final splitter -> (channel, time) records sorted by time."""
    ia, ib = pair_nearest(arm_a.excite_time, arm_b.excite_time, window)
    ca, ta, cb, tb = interfere_pairs(arm_a.take(ia), arm_b.take(ib), ifo, emitter, mode, seed)

    single_a = np.ones(len(arm_a), bool)
    single_a[ia] = False
    single_b = np.ones(len(arm_b), bool)
    single_b[ib] = False
    us = rng.uniform(seed, rng.SINGLES, n_total) if n_total else np.empty(0)
    sa = arm_a.take(np.flatnonzero(single_a))
    sb = arm_b.take(np.flatnonzero(single_b))
    ch_sa = (us[sa.uid] >= ifo.T).astype(np.uint8)  # port a: channel 0 w.p. T
    ch_sb = (us[sb.uid] >= ifo.R).astype(np.uint8)  # port b: channel 0 w.p. R

    ch = np.concatenate([ca, cb, ch_sa, ch_sb])
    t = np.concatenate([ta, tb, sa.emit_time, sb.emit_time])
    order = np.argsort(t, kind="stable")
    stats = {"pairs": int(len(ia)), "singles": int(len(sa) + len(sb))}
    return ch[order], t[order], stats


def detect(
    channel: np.ndarray,
    time_ns: np.ndarray,
    det: DetectorParams | Sequence[DetectorParams],
    seed: int = 0,
) -> Detections:
    """Efficiency thinning, Gaussian jitter, dead time and 1 ps quantisation."""
    if isinstance(det, DetectorParams):
        det = (det, det)
    channel = np.asarray(channel, np.uint8)
    time_ns = np.asarray(time_ns, float)
    n = len(time_ns)
    if len(channel) != n:
        raise ValueError("channel and time arrays differ in length")
    if n == 0:
        return Detections.empty()
    eff = np.array([d.efficiency for d in det])[channel]
    jit = np.array([d.jitter_sigma for d in det])[channel]
    keep = rng.uniform(seed, rng.DETECT, n) < eff
    ps = time_ns * 1000.0
    if np.any(jit > 0):
        ps = ps + jit * rng.normal(seed, rng.JITTER, n)
    stamp = np.rint(ps).astype(np.int64)
    keep &= stamp >= 0
    ch = channel[keep]
    stamp = stamp[keep]
    order = np.lexsort((ch, stamp))
    ch, stamp = ch[order], stamp[order]

    out = np.ones(len(stamp), bool)
    for c, d in enumerate(det):
        if d.dead_time > 0:
            sel = np.flatnonzero(ch == c)
            dead_ps = d.dead_time * 1000.0
            ts = stamp[sel].astype(float)
            out[sel] = _causal_keep(np.ones(len(sel), bool), ts, ts + dead_ps)
    return Detections(ch[out], stamp[out])


# ------------------------------------------------------------ composition

def run_experiment(
    config: ExperimentConfig,
    topology: str | None = None,
    seed: int | None = None,
) -> Detections:
    """Emitter -> PBS/delay -> beam splitter -> detectors.

    HBT blocks the long arm. Deterministic for a fixed ``(config, seed)``.
    """
    topology = config.topology if topology is None else topology
    if topology not in ("HBT", "HOM"):
        raise ConfigError(f"unknown topology {topology!r}")
    seed = config.seed if seed is None else seed
    pump = config.pump
    if (pump.mode == "cw" and pump.duration == 0) or (pump.mode == "pulsed" and pump.n_pulses == 0):
        out = Detections.empty()
        out.counts = {"emitted": 0, "at_detectors": 0, "pairs": 0, "detected": [0, 0]}
        return out

    photons = simulate_emission(config.emitter, pump, None, seed)
    n = len(photons)
    arm_a, arm_b = route_hom(photons, config.interferometer, seed, n_total=n)
    if topology == "HBT":
        arm_b = PhotonStream.empty()
    ch, t, stats = beam_splitter(
        arm_a, arm_b, config.interferometer, config.emitter, config.mode, seed, config.window, n
    )
    out = detect(ch, t, config.detectors, seed)
    out.counts = {
        "emitted": n,
        "at_detectors": int(len(t)),
        "pairs": stats["pairs"],
        "detected": [int((out.channel == 0).sum()), int((out.channel == 1).sum())],
    }
    return out
