"""Monte Carlo photon streams from the three-level rate model.

Random numbers come from numpy's PCG64 bit generator (``numpy.random.Generator``)
and are only drawn as uniform doubles via ``Generator.random``; exponential
waiting times are formed here as ``-log1p(-u) / rate``.  PCG64 and the
``random`` double conversion are stable across numpy releases, so a given seed
reproduces the same stream on any platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .kinetics import RateModel, rates_at_power, steady_state

PS_PER_NS = 1000
_BLOCK = 1 << 18


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    """Independent child seeds for the stages of one pipeline run."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n)


@dataclass(frozen=True)
class DetectorModel:
    efficiency: float = 1.0
    jitter_sigma: float = 0.0
    dead_time: float = 0.0
    dark_rate: float = 0.0

    def __post_init__(self):
        if not 0 <= self.efficiency <= 1:
            raise ValueError("efficiency must be in [0, 1]")
        for name in ("jitter_sigma", "dead_time", "dark_rate"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")


# placeholder hardware figures; not taken from any measurement
DEFAULT_DETECTOR = DetectorModel(efficiency=0.1, jitter_sigma=0.2, dead_time=25.0, dark_rate=0.0)


@dataclass(frozen=True)
class PulsedExcitation:
    rep_period: float
    pulse_width: float = 0.032
    excitation_prob_per_pulse: float = 1.0

    def __post_init__(self):
        if not self.rep_period > 0:
            raise ValueError("rep_period must be > 0")
        if not 0 <= self.pulse_width < self.rep_period:
            raise ValueError("pulse_width must be in [0, rep_period)")
        if not 0 <= self.excitation_prob_per_pulse <= 1:
            raise ValueError("excitation_prob_per_pulse must be in [0, 1]")


@dataclass(frozen=True, eq=False)
class TimeTagStream:
    """Photon detections on two channels.

    ``timestamps`` are int64 picoseconds sorted globally; ``channels`` holds
    0/1 per tag.  ``duration`` is the acquisition length in picoseconds.
    """

    timestamps: np.ndarray
    channels: np.ndarray
    duration: int
    origin: dict = field(default_factory=dict)

    def __post_init__(self):
        ts = np.ascontiguousarray(self.timestamps, dtype=np.int64)
        ch = np.ascontiguousarray(self.channels, dtype=np.uint8)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "duration", int(self.duration))
        if ts.shape != ch.shape or ts.ndim != 1:
            raise ValueError("timestamps and channels must be 1-D arrays of equal length")
        if self.duration < 0:
            raise ValueError("duration must be >= 0")
        if ts.size:
            if ts[0] < 0 or ts[-1] > self.duration:
                raise ValueError("timestamps must lie in [0, duration]")
            if np.any(np.diff(ts) < 0):
                raise ValueError("timestamps must be sorted")
            if np.any(ch > 1):
                raise ValueError("channels must be 0 or 1")
            for c in (0, 1):
                t = ts[ch == c]
                if t.size > 1 and np.any(np.diff(t) <= 0):
                    raise ValueError(f"timestamps on channel {c} must be strictly increasing")

    def __len__(self):
        return self.timestamps.size

    def __eq__(self, other):
        if not isinstance(other, TimeTagStream):
            return NotImplemented
        return (self.duration == other.duration
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.channels, other.channels))

    @property
    def duration_ns(self) -> float:
        return self.duration / PS_PER_NS

    def channel(self, c: int) -> np.ndarray:
        """Picosecond timestamps of one channel."""
        return self.timestamps[self.channels == c]

    def counts(self) -> tuple[int, int]:
        n1 = int(np.count_nonzero(self.channels))
        return len(self) - n1, n1


@nb.njit(cache=True, nogil=True)
def _cw_kernel(u, state, t, duration, k12, k21, k23, k31, out, n_out):
    """Advance the chain through one block of uniforms.

    Returns (uniforms consumed, state, time, n_out, finished).  State 0 means
    the chain is trapped (k31 = 0) or never pumped (k12 = 0).
    """
    k2 = k21 + k23
    p_rad = k21 / k2
    i = 0
    n = u.size
    while i + 1 < n:
        if n_out == out.size:
            return i, state, t, n_out, False
        if state == 1:
            if k12 <= 0.0:
                return i, 0, t, n_out, True
            t += -math.log1p(-u[i]) / k12
            i += 1
            if t > duration:
                return i, state, t, n_out, True
            state = 2
        elif state == 2:
            t += -math.log1p(-u[i]) / k2
            if t > duration:
                return i + 1, state, t, n_out, True
            if u[i + 1] < p_rad:
                out[n_out] = t
                n_out += 1
                state = 1
            else:
                state = 3
            i += 2
        else:
            if k31 <= 0.0:
                return i, 0, t, n_out, True
            t += -math.log1p(-u[i]) / k31
            i += 1
            if t > duration:
                return i, state, t, n_out, True
            state = 1
    return i, state, t, n_out, False


def simulate_cw(model: RateModel, power: float, duration: float, seed=None) -> np.ndarray:
    """Radiative-decay times (ns) of a continuously pumped emitter.

    Exact next-event simulation of the three-level chain at the rates
    ``rates_at_power(model, power)``.  The initial level is drawn from the
    stationary populations so the output is a stationary point process.
    """
    if duration < 0:
        raise ValueError("duration must be >= 0")
    rates = rates_at_power(model, power)
    rng = make_rng(seed)
    if duration == 0 or rates.k12 == 0:
        return np.empty(0)
    if rates.k31 > 0:
        pops = steady_state(rates).as_array()
        state = int(np.searchsorted(np.cumsum(pops), rng.random(), side="right")) + 1
        state = min(state, 3)
    else:
        state = 1
    t = 0.0
    chunks = []
    expected = model.k21 * (steady_state(rates).p2 if rates.k31 > 0 else 1.0) * duration
    out = np.empty(int(min(expected * 1.05 + 1000, 5e7)))
    n_out = 0
    while True:
        u = rng.random(_BLOCK)
        pos = 0
        while True:
            used, state, t, n_out, done = _cw_kernel(u[pos:], state, t, float(duration),
                                                     rates.k12, rates.k21, rates.k23,
                                                     rates.k31, out, n_out)
            pos += used
            if done:
                break
            if n_out == out.size:
                chunks.append(out[:n_out].copy())
                n_out = 0
                continue
            break  # block exhausted
        if done:
            break
    chunks.append(out[:n_out])
    return np.concatenate(chunks)


@nb.njit(cache=True, nogil=True)
def _pulsed_kernel(u, n_pulses, rep, width, p_exc, k21, k23, k31, out):
    k2 = k21 + k23
    p_rad = k21 / k2
    state = 1
    t = 0.0
    n_out = 0
    i = 0
    for n in range(n_pulses):
        t_pulse = n * rep
        # relax until the pulse arrives; memorylessness lets us drop the overshoot
        while state != 1:
            if state == 2:
                dt = -math.log1p(-u[i]) / k2
                i += 1
                if t + dt > t_pulse:
                    break
                t += dt
                if u[i] < p_rad:
                    out[n_out] = t
                    n_out += 1
                    state = 1
                else:
                    state = 3
                i += 1
            else:
                if k31 <= 0.0:
                    break
                dt = -math.log1p(-u[i]) / k31
                i += 1
                if t + dt > t_pulse:
                    break
                t += dt
                state = 1
        t = t_pulse
        if state == 1:
            if u[i] < p_exc:
                state = 2
                t = t_pulse + width * u[i + 1]
            i += 2
    return n_out, i


def simulate_pulsed(model: RateModel, pulsed: PulsedExcitation, duration: float, seed=None):
    """Emission and sync times (ns) under periodic pulsed excitation.

    A pulse excites |1> -> |2> with ``excitation_prob_per_pulse`` at a time
    uniform within the pulse width.  Between pulses there is no pump; decay
    follows k21, k23 and the zero-power deshelving rate k31_0.
    """
    if duration < 0:
        raise ValueError("duration must be >= 0")
    rng = make_rng(seed)
    n_pulses = int(np.floor(duration / pulsed.rep_period)) + 1 if duration > 0 else 0
    syncs = np.arange(n_pulses) * pulsed.rep_period
    if n_pulses == 0:
        return np.empty(0), syncs
    # at most 2 uniforms per pulse for excitation and 2 per decay event, at most 2 decays per pulse
    u = rng.random(6 * n_pulses + 8)
    out = np.empty(n_pulses + 1)
    n_out, _ = _pulsed_kernel(u, n_pulses, pulsed.rep_period, pulsed.pulse_width,
                              pulsed.excitation_prob_per_pulse,
                              model.k21, model.k23, model.k31_0, out)
    em = out[:n_out]
    return em[em <= duration], syncs


@nb.njit(cache=True)
def _dead_time_filter(t, dead):
    keep = np.zeros(t.size, dtype=np.bool_)
    last = -np.inf
    for i in range(t.size):
        if t[i] - last >= dead:
            keep[i] = True
            last = t[i]
    return keep


def apply_detector(emissions, det: DetectorModel, duration: float, seed=None) -> np.ndarray:
    """Detected times (ns) of one detector looking at ``emissions``.

    Order of effects: efficiency thinning, Gaussian jitter, Poisson dark
    counts, re-sort, dead time (a tag closer than ``dead_time`` to the last
    kept tag is dropped).  Jittered tags falling outside [0, duration] are
    discarded.
    """
    rng = make_rng(seed)
    t = np.asarray(emissions, dtype=float)
    if det.efficiency < 1:
        t = t[rng.random(t.size) < det.efficiency]
    if det.jitter_sigma > 0:
        t = t + det.jitter_sigma * rng.standard_normal(t.size)
    if det.dark_rate > 0 and duration > 0:
        n_dark = rng.poisson(det.dark_rate * duration)
        t = np.concatenate([t, rng.random(n_dark) * duration])
    t = np.sort(t)
    t = t[(t >= 0) & (t <= duration)]
    if det.dead_time > 0 and t.size:
        t = t[_dead_time_filter(t, det.dead_time)]
    return t


def _to_ps(t_ns) -> np.ndarray:
    return np.rint(np.asarray(t_ns, dtype=float) * PS_PER_NS).astype(np.int64)


def _strictly_increasing(ts: np.ndarray) -> np.ndarray:
    """Resolve sub-picosecond collisions by nudging later tags forward."""
    if ts.size < 2 or np.all(np.diff(ts) > 0):
        return ts
    ts = ts.copy()
    for i in range(1, ts.size):
        if ts[i] <= ts[i - 1]:
            ts[i] = ts[i - 1] + 1
    return ts


def make_stream(ch0_ns, ch1_ns, duration: float, origin: dict | None = None) -> TimeTagStream:
    """Merge two per-detector time lists (ns) into a :class:`TimeTagStream`."""
    dur_ps = int(round(duration * PS_PER_NS))
    t0 = _strictly_increasing(np.minimum(_to_ps(np.sort(ch0_ns)), dur_ps))
    t1 = _strictly_increasing(np.minimum(_to_ps(np.sort(ch1_ns)), dur_ps))
    ts = np.concatenate([t0, t1])
    ch = np.concatenate([np.zeros(t0.size, np.uint8), np.ones(t1.size, np.uint8)])
    order = np.argsort(ts, kind="stable")
    return TimeTagStream(ts[order], ch[order], dur_ps, dict(origin or {}))


def split_hbt(detected, duration: float, seed=None, origin: dict | None = None) -> TimeTagStream:
    """Route each photon to channel 0 or 1 with probability 1/2."""
    rng = make_rng(seed)
    t = np.asarray(detected, dtype=float)
    to_one = rng.random(t.size) < 0.5
    return make_stream(t[~to_one], t[to_one], duration, origin)


def simulate_hbt(model: RateModel, power: float, duration: float, detector: DetectorModel,
                 seed=None) -> TimeTagStream:
    """CW emitter -> 50:50 beamsplitter -> two identical detectors.

    Each detector applies its own efficiency, jitter, dark counts and dead
    time, so dead time never suppresses cross-channel coincidences.
    """
    s_emit, s_split, s_d0, s_d1 = spawn_seeds(seed, 4)
    em = simulate_cw(model, power, duration, s_emit)
    rng = make_rng(s_split)
    to_one = rng.random(em.size) < 0.5
    d0 = apply_detector(em[~to_one], detector, duration, s_d0)
    d1 = apply_detector(em[to_one], detector, duration, s_d1)
    origin = {"model": model.as_dict(), "power_uW": power, "seed": _seed_repr(seed),
              "detector": {"efficiency": detector.efficiency,
                           "jitter_sigma_ns": detector.jitter_sigma,
                           "dead_time_ns": detector.dead_time,
                           "dark_rate_per_ns": detector.dark_rate}}
    return make_stream(d0, d1, duration, origin)


def _seed_repr(seed):
    if seed is None or isinstance(seed, (int, np.integer)):
        return None if seed is None else int(seed)
    if isinstance(seed, np.random.SeedSequence):
        return {"entropy": int(seed.entropy), "spawn_key": list(seed.spawn_key)}
    return str(seed)
