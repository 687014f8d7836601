"""Recurrent-event data generation for the event-stratified rate models.

Subjects carry four U(low, high) covariates.  Death and censoring times are
exponential with rates ``a_D`` and ``a_C`` (rate 0 disables them); censoring
is additionally truncated at the administrative horizon ``tau``.  Given the
current stratum ``s`` the next event is drawn either by inverting the
integrated hazard (multiplicative model) or by thinning a piecewise bound
(additive model).  After the B-th event the stratum-B rate is kept.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.optimize import brentq

from .dataset import Dataset, SubjectRecord


@dataclass(frozen=True)
class BaselineSpec:
    family: str = "weibull"
    shape: float = 2.5

    def __post_init__(self):
        if self.family not in ("weibull", "gompertz"):
            raise ValueError(f"unknown baseline family {self.family!r}")
        if not self.shape > 0:
            raise ValueError("baseline shape must be positive")

    @classmethod
    def parse(cls, text: str) -> "BaselineSpec":
        """Parse ``"weibull:2.5"`` or ``"gompertz:0.5"``."""
        family, _, shape = text.partition(":")
        return cls(family.strip(), float(shape) if shape else 2.5)

    def __str__(self):
        return f"{self.family}:{self.shape!r}"


def hazard(baseline: BaselineSpec, t):
    t = np.asarray(t, dtype=float)
    a = baseline.shape
    if baseline.family == "weibull":
        return a * t ** (a - 1)
    return np.exp(a * t)


def cumulative_hazard(baseline: BaselineSpec, t):
    t = np.asarray(t, dtype=float)
    a = baseline.shape
    if baseline.family == "weibull":
        return t ** a
    return np.expm1(a * t) / a


def inverse_cumulative_hazard(baseline: BaselineSpec, u):
    u = np.asarray(u, dtype=float)
    a = baseline.shape
    if baseline.family == "weibull":
        return u ** (1.0 / a)
    return np.log1p(a * u) / a


def make_beta0(b1: float, b2: float, b3: float, B: int = 5) -> np.ndarray:
    """Truth with rows (0,0,b1,b1,0,...), constant b2, b3*(1,...,B), zeros."""
    if B < 5:
        raise ValueError("the default coefficient pattern needs B >= 5")
    beta = np.zeros((4, B))
    beta[0, 2:4] = b1
    beta[1, :] = b2
    beta[2, :] = b3 * np.arange(1, B + 1)
    return beta


@dataclass(frozen=True)
class SimConfig:
    model: str = "mult"
    n: int = 100
    B: int = 5
    b1: float = 1.0
    b2: float = 0.5
    b3: float = 0.2
    baseline: BaselineSpec = field(default_factory=BaselineSpec)
    a_D: float = 0.1
    a_C: float = 0.1
    x_low: float = 0.0
    x_high: float = 1.0
    seed: int = 0
    tau: float = math.inf
    max_events: int = 100

    def __post_init__(self):
        if self.model not in ("mult", "add"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.a_D < 0 or self.a_C < 0:
            raise ValueError("death and censoring rates must be nonnegative")
        if self.a_D == 0 and self.a_C == 0 and not math.isfinite(self.tau):
            raise ValueError("follow-up is unbounded: set a death/censoring rate or a finite tau")
        if not self.x_high > self.x_low:
            raise ValueError("x_high must exceed x_low")
        if self.model == "add" and self.baseline.family == "weibull" and self.baseline.shape < 1:
            raise ValueError("thinning needs a bounded baseline hazard (Weibull shape >= 1)")

    @property
    def p(self) -> int:
        return 4

    @property
    def beta0(self) -> np.ndarray:
        return make_beta0(self.b1, self.b2, self.b3, self.B)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["baseline"] = str(self.baseline)
        return d

    def to_conf(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in d.items():
            if k not in types:
                continue
            if k == "baseline":
                kw[k] = v if isinstance(v, BaselineSpec) else BaselineSpec.parse(str(v))
            elif k == "model":
                kw[k] = str(v)
            elif k in ("n", "B", "seed", "max_events"):
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        return cls(**kw)


def read_conf(text: str) -> dict:
    """Flat ``key = value`` file (``#`` comments) to a dict of strings."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string("[root]\n" + text)
    return dict(cp["root"])


# ---------------------------------------------------------------------------
# event-time samplers


def inversion_event_times(x, beta0, baseline, rng, horizon, max_events):
    """Multiplicative-model events on ``(0, horizon]`` by sequential inversion."""
    B = beta0.shape[1]
    times = []
    t = 0.0
    lam_t = 0.0
    while len(times) < max_events:
        s = min(len(times), B - 1)
        lam_t = lam_t + rng.exponential() * math.exp(-float(x @ beta0[:, s]))
        t = float(inverse_cumulative_hazard(baseline, lam_t))
        if t > horizon:
            break
        times.append(t)
    return times


def thinning_event_times(x, beta0, baseline, rng, horizon, max_events, window=0.25):
    """Additive-model events by thinning; hazard ``max(0, alpha0(t) + x beta0(s))``.

    Returns ``(times, n_clamped)`` where ``n_clamped`` counts candidate points
    at which the raw additive hazard was negative.
    """
    B = beta0.shape[1]
    times = []
    clamped = 0
    t = 0.0
    while len(times) < max_events:
        lin = float(x @ beta0[:, min(len(times), B - 1)])
        hi = t + window
        # both baselines are monotone, so the window max sits at an end point
        bound = max(float(hazard(baseline, t)), float(hazard(baseline, hi))) + max(lin, 0.0)
        if bound <= 0:
            t = hi
            if t > horizon:
                break
            continue
        cand = t + rng.exponential() / bound
        if cand > hi:
            t = hi
            if t > horizon:
                break
            continue
        if cand > horizon:
            break
        raw = float(hazard(baseline, cand)) + lin
        if raw < 0:
            clamped += 1
        if rng.uniform() * bound <= max(raw, 0.0):
            times.append(cand)
        t = cand
    return times, clamped


def _subject(cfg: SimConfig, rng, sid: str):
    x = rng.uniform(cfg.x_low, cfg.x_high, cfg.p)
    D = rng.exponential() / cfg.a_D if cfg.a_D > 0 else math.inf
    C = rng.exponential() / cfg.a_C if cfg.a_C > 0 else math.inf
    C = min(C, cfg.tau)
    T = min(D, C)
    beta0 = cfg.beta0
    if cfg.model == "mult":
        times = inversion_event_times(x, beta0, cfg.baseline, rng, T, cfg.max_events)
        clamped = 0
    else:
        times, clamped = thinning_event_times(x, beta0, cfg.baseline, rng, T, cfg.max_events)
    return SubjectRecord(sid, T, D <= C, times, x), clamped


def simulate_subject_mult(cfg: SimConfig, rng, sid: str = "1") -> SubjectRecord:
    return _subject(replace(cfg, model="mult"), rng, sid)[0]


def simulate_subject_add(cfg: SimConfig, rng, sid: str = "1") -> SubjectRecord:
    return _subject(replace(cfg, model="add"), rng, sid)[0]


def subject_rngs(seed: int, n: int):
    """One independent generator per subject index, derived from ``seed``."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def simulate_dataset(cfg: SimConfig) -> Dataset:
    subjects = []
    clamped = 0
    for i, rng in enumerate(subject_rngs(cfg.seed, cfg.n)):
        rec, c = _subject(cfg, rng, str(i + 1))
        subjects.append(rec)
        clamped += c
    tau = cfg.tau if math.isfinite(cfg.tau) else None
    return Dataset(tuple(subjects), cfg.B, ("x1", "x2", "x3", "x4"), tau=tau,
                   info={"clamped": clamped, "config": cfg.to_dict()})


# ---------------------------------------------------------------------------
# calibration of death/censoring rates


@dataclass
class Calibration:
    a_D: float
    a_C: float
    p_obs: float
    target: float

    def to_conf(self) -> str:
        return f"a_D = {self.a_D!r}\na_C = {self.a_C!r}\np_obs = {self.p_obs!r}\ntarget = {self.target!r}\n"


def uncensored_event_time(cfg: SimConfig, reps: int, seed: int, k: int | None = None) -> np.ndarray:
    """Time of the k-th event (default B) for ``reps`` subjects without censoring."""
    k = cfg.B if k is None else k
    beta0 = cfg.beta0
    out = np.empty(reps)
    for i, rng in enumerate(subject_rngs(seed, reps)):
        x = rng.uniform(cfg.x_low, cfg.x_high, cfg.p)
        if cfg.model == "mult":
            times = inversion_event_times(x, beta0, cfg.baseline, rng, math.inf, k)
        else:
            times, _ = thinning_event_times(x, beta0, cfg.baseline, rng, math.inf, k)
        out[i] = times[-1] if len(times) == k else math.inf
    return out


def p_obs_curve(t_k: np.ndarray, rate: float, ratio: float, tau: float) -> float:
    """P(k-th event observed) when a_D = rate and a_C = ratio * rate.

    Conditions on the event-time sample and integrates out the exponential
    death and censoring times exactly, so it is monotone in ``rate``.
    """
    ok = t_k <= tau
    return float(np.mean(np.where(ok, np.exp(-rate * (1.0 + ratio) * np.where(ok, t_k, 0.0)), 0.0)))


def calibrate_rates(cfg: SimConfig, target_pobs: float, reps: int = 20_000, tol: float = 0.01,
                    ratio: float = 1.0, seed: int | None = None, bracket=(1e-6, 1e3)) -> Calibration:
    """Find a common death/censoring rate hitting ``target_pobs`` for the B-th event."""
    if not 0 < target_pobs < 1:
        raise ValueError("target p_obs must be in (0, 1)")
    seed = cfg.seed if seed is None else seed
    t_k = uncensored_event_time(cfg, reps, seed)
    lo, hi = bracket
    p_lo = p_obs_curve(t_k, lo, ratio, cfg.tau)
    p_hi = p_obs_curve(t_k, hi, ratio, cfg.tau)
    if not (p_hi <= target_pobs <= p_lo):
        raise ValueError(
            f"target p_obs {target_pobs} outside reachable range: p_obs({lo})={p_lo:.4f}, p_obs({hi})={p_hi:.4f}")
    # p_obs is monotone in the rate; root-find on the log scale
    gap = lambda u: p_obs_curve(t_k, math.exp(u), ratio, cfg.tau) - target_pobs
    rate = math.exp(brentq(gap, math.log(lo), math.log(hi), xtol=1e-12))
    achieved = p_obs_curve(t_k, rate, ratio, cfg.tau)
    if abs(achieved - target_pobs) > tol:
        raise ValueError(f"calibration reached p_obs={achieved:.4f}, not within {tol} of {target_pobs}")
    return Calibration(rate, ratio * rate, achieved, target_pobs)


def observed_fraction(data: Dataset, k: int | None = None) -> float:
    """Fraction of subjects with at least k (default B) observed events."""
    k = data.B if k is None else k
    return float(np.mean([len(s.event_times) >= k for s in data.subjects]))
