"""Monte Carlo photon streams from a pumped three-level emitter.

The Markov chain 1 -> 2 -> {1, 3}, 3 -> 1 restarts in level 1 after every
2 -> 1 emission, so emission times form a renewal process.  One
inter-emission interval consists of M >= 0 shelving excursions followed by
a successful emission, with M geometric (success probability
k21/(k21 + k23)).  Its duration is

    Gamma(M+1, k12) + Gamma(M+1, k21+k23) + Gamma(M, k31)

which is exactly the sum of the exponential dwell times the step-by-step
chain would draw.  Intervals are generated in vectorized chunks, each from
its own Philox substream keyed by (seed, chunk index), so output depends
only on the seed.

Detection: emitted photons are thinned with probability ``eta_detect``,
merged with Poisson background, routed to channel a with probability
``splitter_ratio``, jittered by a Gaussian IRF and stored as integer
picosecond ticks.  Equal ticks within a channel are merged (an implicit
one-tick dead time), so channels are strictly increasing.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .rate_model import RateCoefficients, deshelving_rate, steady_state

TICKS_PER_NS = 1000
DEFAULT_IRF_SIGMA = 0.35  # ns
CHUNK = 1 << 20

# spawn keys of the independent RNG substreams
_EMITTER, _BACKGROUND, _ROUTING, _JITTER = range(4)


@dataclass(frozen=True)
class SimConfig:
    rc: RateCoefficients
    power: float                 # uW
    duration: float              # s
    eta_detect: float = 1.0
    background_rate: float = 0.0  # cps at the detectors, both channels together
    irf_sigma: float = DEFAULT_IRF_SIGMA  # ns
    dead_time: float = 0.0       # ns
    splitter_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.rc.complete:
            raise ValueError("rate coefficients need sigma and c for simulation")
        for name in ("eta_detect", "splitter_ratio"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("power", "duration", "background_rate", "irf_sigma", "dead_time"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["rc"] = self.rc.as_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        data = dict(data)
        data["rc"] = RateCoefficients(**data["rc"])
        return cls(**data)


@dataclass
class TimestampStream:
    """Two-channel photon record in picosecond ticks."""

    channel_a: np.ndarray
    channel_b: np.ndarray
    duration_ticks: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channel_a = np.ascontiguousarray(self.channel_a, dtype=np.int64)
        self.channel_b = np.ascontiguousarray(self.channel_b, dtype=np.int64)
        self.duration_ticks = int(self.duration_ticks)

    @property
    def duration_ns(self) -> float:
        return self.duration_ticks / TICKS_PER_NS

    @property
    def duration_s(self) -> float:
        return self.duration_ticks * 1e-12

    @property
    def n_events(self) -> int:
        return self.channel_a.size + self.channel_b.size

    def channels(self):
        return self.channel_a, self.channel_b

    def validate(self):
        for ch in self.channels():
            if ch.size and (ch[0] < 0 or ch[-1] > self.duration_ticks):
                raise ValueError("event outside [0, duration]")
            if ch.size > 1 and np.any(np.diff(ch) <= 0):
                raise ValueError("channel is not strictly increasing")


def _substream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def _emission_chunk(rng, n, k12, k2, k31, p_emit):
    """n renewal intervals (us) and per-level dwell totals."""
    m = rng.geometric(p_emit, n) - 1
    t1 = rng.standard_exponential(n) / k12
    t2 = rng.standard_exponential(n) / k2
    t3 = np.zeros(n)
    shelved = np.flatnonzero(m)
    if shelved.size:
        ms = m[shelved].astype(float)
        t1[shelved] += rng.gamma(ms, 1.0 / k12)
        t2[shelved] += rng.gamma(ms, 1.0 / k2)
        t3[shelved] = rng.gamma(ms, 1.0 / k31)
    return t1, t2, t3


def _emission_times(cfg: SimConfig):
    """Detected emitter photon times in ns and time spent per level (ns)."""
    rc = cfg.rc
    k12 = rc.sigma * cfg.power
    duration_ns = cfg.duration * 1e9
    occupancy = np.zeros(3)
    if k12 == 0 or duration_ns == 0:
        occupancy[0] = duration_ns
        return np.empty(0), occupancy
    if cfg.eta_detect == 0:
        # nothing detectable: skip the chain, occupancy unknown
        return np.empty(0), np.full(3, np.nan)
    k2 = rc.k21 + rc.k23
    k31 = deshelving_rate(rc, cfg.power)
    p_emit = rc.k21 / k2

    pieces = []
    t0 = 0.0
    chunk = 0
    while t0 < duration_ns:
        rng = _substream(cfg.seed, _EMITTER, chunk)
        t1, t2, t3 = _emission_chunk(rng, CHUNK, k12, k2, k31, p_emit)
        intervals = (t1 + t2 + t3) * 1e3
        times = t0 + np.cumsum(intervals)
        inside = times <= duration_ns
        n_in = int(np.count_nonzero(inside))
        occupancy += 1e3 * np.array([t1[:n_in].sum(), t2[:n_in].sum(), t3[:n_in].sum()])
        keep = rng.random(CHUNK) < cfg.eta_detect
        pieces.append(times[inside & keep])
        t0 = times[-1]
        chunk += 1
    # the partially elapsed final interval counts as time in level 1
    occupancy[0] += max(duration_ns - occupancy.sum(), 0.0)
    return np.concatenate(pieces), occupancy


@numba.njit(cache=True)
def _dead_time_filter(ticks, dead):
    keep = np.ones(ticks.size, dtype=np.bool_)
    if ticks.size == 0:
        return keep
    last = ticks[0]
    for i in range(1, ticks.size):
        if ticks[i] - last >= dead:
            last = ticks[i]
        else:
            keep[i] = False
    return keep


def simulate(cfg: SimConfig) -> TimestampStream:
    """Generate a two-channel timestamp stream for one excitation power."""
    duration_ns = cfg.duration * 1e9
    duration_ticks = int(round(duration_ns * TICKS_PER_NS))
    emitted, occupancy = _emission_times(cfg)

    rng_bg = _substream(cfg.seed, _BACKGROUND)
    n_bg = rng_bg.poisson(cfg.background_rate * cfg.duration)
    background = rng_bg.random(n_bg) * duration_ns

    photons = np.concatenate([emitted, background])
    to_a = _substream(cfg.seed, _ROUTING).random(photons.size) < cfg.splitter_ratio
    if cfg.irf_sigma > 0:
        photons = photons + _substream(cfg.seed, _JITTER).normal(0.0, cfg.irf_sigma, photons.size)
    ticks = np.floor(photons * TICKS_PER_NS).astype(np.int64)
    inside = (ticks >= 0) & (ticks <= duration_ticks)

    dead = max(int(round(cfg.dead_time * TICKS_PER_NS)), 1)
    channels = []
    for mask in (to_a & inside, ~to_a & inside):
        ch = np.sort(ticks[mask])
        channels.append(ch[_dead_time_filter(ch, dead)])

    total_time = occupancy.sum()
    meta = {
        "config": cfg.to_dict(),
        "seed": int(cfg.seed),
        "power_uW": cfg.power,
        "n_emitted_detected": int(emitted.size),
        "n_background": int(n_bg),
        "occupancy": ((occupancy / total_time).tolist() if total_time > 0
                      else None if np.isnan(total_time) else [1.0, 0.0, 0.0]),
    }
    return TimestampStream(channels[0], channels[1], duration_ticks, meta)


def expected_count_rate(cfg: SimConfig) -> float:
    """Mean detected rate (cps) in the absence of dead-time losses."""
    n2 = steady_state(cfg.rc, cfg.power).n2
    return cfg.eta_detect * cfg.rc.k21 * n2 * 1e6 + cfg.background_rate


def duration_for_counts(cfg: SimConfig, n_detected: float) -> float:
    """Duration (s) whose expected number of detected photons is ``n_detected``."""
    rate = expected_count_rate(cfg)
    if rate <= 0:
        raise ValueError("configuration produces no detections")
    return n_detected / rate
