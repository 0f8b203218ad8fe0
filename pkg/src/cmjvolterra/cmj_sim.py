"""Exact simulation of the CMJ branching process with immigration.

Each individual lives for a lifetime drawn from the lifetime law and, while
alive, gives birth at the events of a Poisson process with rate lambda_n; at
each birth event a batch of children with size drawn from the offspring law
is born.  Independently, batches of immigrants arrive at rate zeta_n.  The
population Z(t) counts individuals alive at time t, i.e. those with
birth <= t < birth + lifetime.

Two samplers are provided.  ``simulate`` is event driven, keeps every mark
and is meant for single paths.  ``simulate_ensemble`` samples many replicas
generation by generation with vectorized numpy and only returns population
counts on a time grid; it is the workhorse for Monte Carlo.
"""
from __future__ import annotations

import csv
import heapq
import io
import itertools
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .distributions import ModelParams, SizeBiasedLaw
from .grid import GridFunction, fmt
from .rng import stream
from .volterra import ResolventKernel, ResolventWarning, integrate_to, solve_resolvent

DEFAULT_MAX_EVENTS = 10**7

DEATH, BIRTH, IMMIGRATION = 0, 1, 2


class SimulationOverflow(RuntimeError):
    """Raised when a path exceeds its event budget."""

    def __init__(self, time_reached: float, events: int):
        super().__init__(
            f"event cap of {events} exceeded at t={time_reached:.6g}; "
            "the process is probably supercritical, raise max_events to continue")
        self.time_reached = time_reached
        self.events = events


@dataclass
class Particle:
    birth_time: float
    lifetime: float
    origin: str  # "ancestor", "immigrant" or "offspring"
    parent: int = -1


@dataclass
class EventLog:
    birth_events: list = field(default_factory=list)
    immigration_events: list = field(default_factory=list)
    ancestor_lifetimes: np.ndarray = field(default_factory=lambda: np.empty(0))

    def particles(self) -> list[tuple[float, float]]:
        """(birth time, lifetime) of every individual in the log."""
        out = [(0.0, float(e)) for e in self.ancestor_lifetimes]
        for t, lives in itertools.chain(self.birth_events, self.immigration_events):
            out.extend((t, float(e)) for e in lives)
        return out

    def alive(self, t: float) -> int:
        return sum(1 for b, e in self.particles() if b <= t < b + e)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("kind", "time", "event", "lifetime"))
        for e in self.ancestor_lifetimes:
            w.writerow(("ancestor", fmt(0.0), -1, fmt(e)))
        for name, events in (("birth", self.birth_events), ("immigration", self.immigration_events)):
            for i, (t, lives) in enumerate(events):
                for e in lives:
                    w.writerow((name, fmt(t), i, fmt(e)))
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as f:
                f.write(text)
        return text

    def to_bytes(self) -> bytes:
        parts = [b"CMJLOG1\0", _pack_array(self.ancestor_lifetimes)]
        for events in (self.birth_events, self.immigration_events):
            times = np.array([t for t, _ in events], dtype=float)
            sizes = np.array([len(v) for _, v in events], dtype=np.int64)
            lives = np.concatenate([np.asarray(v, float) for _, v in events]) if events else np.empty(0)
            parts += [_pack_array(times), _pack_array(sizes, "<i8"), _pack_array(lives)]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EventLog":
        if not data.startswith(b"CMJLOG1\0"):
            raise ValueError("not an event log record")
        pos = 8
        anc, pos = _unpack_array(data, pos)
        lists = []
        for _ in range(2):
            times, pos = _unpack_array(data, pos)
            sizes, pos = _unpack_array(data, pos, "<i8")
            lives, pos = _unpack_array(data, pos)
            splits = np.split(lives, np.cumsum(sizes)[:-1]) if sizes.size else []
            lists.append([(float(t), v) for t, v in zip(times, splits)])
        return cls(lists[0], lists[1], anc)

    def __eq__(self, other):
        return isinstance(other, EventLog) and self.to_bytes() == other.to_bytes()


def _pack_array(a, dtype="<f8") -> bytes:
    a = np.ascontiguousarray(a, dtype=dtype)
    return struct.pack("<q", a.size) + a.tobytes()


def _unpack_array(data, pos, dtype="<f8"):
    (n,) = struct.unpack_from("<q", data, pos)
    pos += 8
    a = np.frombuffer(data, dtype=dtype, count=n, offset=pos).copy()
    return a, pos + 8 * n


@dataclass
class PopulationPath:
    jump_times: np.ndarray
    increments: np.ndarray
    initial_count: int

    def running(self) -> np.ndarray:
        return self.initial_count + np.cumsum(self.increments)

    def value(self, t):
        """Z(t), right-continuous."""
        k = np.searchsorted(self.jump_times, t, side="right")
        run = np.concatenate([[self.initial_count], self.running()])
        return run[k]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("time", "delta", "running_count"))
        w.writerow((fmt(0.0), 0, self.initial_count))
        for t, d, r in zip(self.jump_times, self.increments, self.running()):
            w.writerow((fmt(t), int(d), int(r)))
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as f:
                f.write(text)
        return text

    def to_bytes(self) -> bytes:
        return (b"CMJPATH1" + struct.pack("<q", self.initial_count)
                + _pack_array(self.jump_times) + _pack_array(self.increments, "<i8"))

    @classmethod
    def from_bytes(cls, data: bytes) -> "PopulationPath":
        if not data.startswith(b"CMJPATH1"):
            raise ValueError("not a population path record")
        (z0,) = struct.unpack_from("<q", data, 8)
        times, pos = _unpack_array(data, 16)
        inc, _ = _unpack_array(data, pos, "<i8")
        return cls(times, inc, int(z0))


def _ancestors(params, z0, rng, ancestor_lifetimes, size_biased):
    if ancestor_lifetimes is not None:
        lives = np.asarray(ancestor_lifetimes, dtype=float)
        if lives.shape[-1] != z0:
            raise ValueError("need one forced lifetime per ancestor")
        if np.any(lives < 0):
            raise ValueError("lifetimes must be nonnegative")
        return lives
    if size_biased:
        return SizeBiasedLaw(params.lifetime, params.beta, params.gamma_n).sample(rng, z0)
    return params.lifetime.sample(rng, z0)


def simulate(params: ModelParams, z0: int, T: float, rng: np.random.Generator,
             record: bool = False, ancestor_lifetimes=None, size_biased: bool = True,
             max_events: int = DEFAULT_MAX_EVENTS):
    """Simulate one path on [0, T].

    Ancestors (``z0`` of them, all born at time 0) get lifetimes from the
    damped size-biased law by default, from the plain lifetime law when
    ``size_biased`` is False, or the values in ``ancestor_lifetimes``.
    Returns ``(PopulationPath, EventLog or None)``.
    """
    if z0 < 0:
        raise ValueError("z0 must be nonnegative")
    law, lam, zeta = params.lifetime, params.lambda_n, params.zeta_n
    anc = _ancestors(params, z0, rng, ancestor_lifetimes, size_biased)
    heap: list = []
    seq = itertools.count()
    log = EventLog(ancestor_lifetimes=np.array(anc, dtype=float)) if record else None

    def add(birth, life):
        death = birth + life
        if death <= T:
            heapq.heappush(heap, (death, DEATH, next(seq), 0.0))
        if lam > 0:
            tb = birth + rng.exponential(1.0 / lam)
            if tb < death and tb <= T:
                heapq.heappush(heap, (tb, BIRTH, next(seq), death))

    for life in anc:
        add(0.0, float(life))
    if zeta > 0:
        te = rng.exponential(1.0 / zeta)
        if te <= T:
            heapq.heappush(heap, (te, IMMIGRATION, next(seq), 0.0))

    times: list[float] = []
    deltas: list[int] = []
    events = 0
    while heap:
        t, kind, _, death = heapq.heappop(heap)
        events += 1
        if events > max_events:
            raise SimulationOverflow(t, max_events)
        if kind == DEATH:
            times.append(t)
            deltas.append(-1)
            continue
        batch_law = params.offspring if kind == BIRTH else params.immigration
        k = int(batch_law.sample(rng))
        lives = law.sample(rng, k)
        times.append(t)
        deltas.append(k)
        if record:
            (log.birth_events if kind == BIRTH else log.immigration_events).append((t, lives))
        for life in lives:
            add(t, float(life))
        if kind == BIRTH:
            tb = t + rng.exponential(1.0 / lam)
            if tb < death and tb <= T:
                heapq.heappush(heap, (tb, BIRTH, next(seq), death))
        else:
            te = t + rng.exponential(1.0 / zeta)
            if te <= T:
                heapq.heappush(heap, (te, IMMIGRATION, next(seq), 0.0))

    path = PopulationPath(np.array(times, dtype=float), np.array(deltas, dtype=np.int64), int(z0))
    return path, log


@dataclass
class EnsembleResult:
    """Population counts Z(times[k]) for every replica (rows)."""

    times: np.ndarray
    counts: np.ndarray
    ancestor_lifetimes: np.ndarray | None = None
    events: np.ndarray | None = None


def _block(params, z0, T, times, size, rng, forced, size_biased, max_events,
           keep_ancestors):
    law, lam, zeta = params.lifetime, params.lambda_n, params.zeta_n
    K = times.size
    if forced is not None:
        anc = np.broadcast_to(np.asarray(forced, float), (size, z0)).copy()
    elif size_biased:
        anc = SizeBiasedLaw(law, params.beta, params.gamma_n).sample(rng, (size, z0))
    else:
        anc = law.sample(rng, (size, z0))
    rep = np.repeat(np.arange(size), z0)
    tau = np.zeros(rep.size)
    life = anc.reshape(-1).astype(float)
    if zeta > 0:
        ne = rng.poisson(zeta * T, size)
        erep = np.repeat(np.arange(size), ne)
        et = rng.random(erep.size) * T
        k = params.immigration.sample(rng, erep.size)
        rep = np.concatenate([rep, np.repeat(erep, k)])
        tau = np.concatenate([tau, np.repeat(et, k)])
        life = np.concatenate([life, law.sample(rng, int(k.sum()))])

    width = K + 1
    up = np.zeros(size * width, dtype=np.int64)
    down = np.zeros(size * width, dtype=np.int64)
    events = np.zeros(size, dtype=np.int64)
    while rep.size:
        s = np.searchsorted(times, tau, side="left")
        e = np.searchsorted(times, tau + life, side="left")
        live = s < e
        base = rep[live] * width
        up += np.bincount(base + s[live], minlength=size * width)
        down += np.bincount(base + e[live], minlength=size * width)
        if lam == 0:
            break
        window = np.clip(np.minimum(life, T - tau), 0.0, None)
        nb = rng.poisson(lam * window)
        events += np.bincount(rep, weights=nb + 1, minlength=size).astype(np.int64)
        if events.max() > max_events:
            raise SimulationOverflow(float(tau.max()), max_events)
        idx = np.repeat(np.arange(rep.size), nb)
        if idx.size == 0:
            break
        bt = tau[idx] + rng.random(idx.size) * window[idx]
        k = params.offspring.sample(rng, idx.size)
        rep = np.repeat(rep[idx], k)
        tau = np.repeat(bt, k)
        life = law.sample(rng, rep.size)
    counts = np.cumsum((up - down).reshape(size, width), axis=1)[:, :K]
    return counts, (anc if keep_ancestors else None), events


def simulate_ensemble(params: ModelParams, z0: int, T: float, times, replicas: int,
                      seed: int, ancestor_lifetimes=None, size_biased: bool = True,
                      block_size: int = 250, threads: int = 1,
                      max_events: int = DEFAULT_MAX_EVENTS,
                      keep_ancestors: bool = False, stream_offset: int = 0) -> EnsembleResult:
    """Population counts at ``times`` for ``replicas`` independent paths.

    Replicas are processed in blocks of ``block_size``; block b draws from
    stream(seed, stream_offset + b), so the output depends only on the seed
    and block size, never on ``threads``.  Birth events of an individual are
    sampled as a Poisson count on its reproductive window followed by uniform
    positions, which has the same law as sequential exponential gaps.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or np.any(times < 0) or np.any(times > T):
        raise ValueError("evaluation times must be sorted and lie in [0, T]")
    if replicas < 1:
        raise ValueError("need at least one replica")
    sizes = [min(block_size, replicas - b0) for b0 in range(0, replicas, block_size)]

    def run(b):
        return _block(params, z0, T, times, sizes[b], stream(seed, stream_offset + b),
                      ancestor_lifetimes, size_biased, max_events, keep_ancestors)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(b) for b in range(len(sizes))]
    counts = np.concatenate([p[0] for p in parts])
    anc = np.concatenate([p[1] for p in parts]) if keep_ancestors else None
    events = np.concatenate([p[2] for p in parts])
    return EnsembleResult(times, counts, anc, events)


def rescale(path: PopulationPath, n: int, gamma_n: float, beta: float,
            T: float, h: float) -> GridFunction:
    """exp(-beta t) Z(gamma_n t) / n on the grid 0, h, ..., T of rescaled time."""
    N = int(round(T / h)) + 1
    t = h * np.arange(N)
    return GridFunction(h, np.exp(-beta * t) * path.value(gamma_n * t) / n)


def conditional_mean(params: ModelParams, ancestor_lifetimes, T: float, h: float,
                     resolvent: ResolventKernel | None = None) -> GridFunction:
    """E[Z(t) | ancestor lifetimes] on the grid 0, h, ..., T (original time).

    Each ancestor contributes its own indicator plus int_0^{t ^ e} R(t - s) ds,
    where R is the undamped resolvent.  A fresh individual has mean number of
    living descendants (itself included) R(t) / (lambda m), which gives the
    immigration term zeta a int_0^t R / (lambda m).
    """
    N = int(round(T / h)) + 1
    if resolvent is None:
        # a finite horizon needs no decay, so supercritical models are fine here
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ResolventWarning)
            resolvent = solve_resolvent(params.lifetime, params.lambda_m, 0.0, params.gamma_n,
                                        h * (N - 1), h, lambda_n=params.lambda_n)
    elif (resolvent.h != h or len(resolvent.base) < N or resolvent.beta != 0
          or abs(resolvent.lambda_m - params.lambda_m) > 1e-14):
        raise ValueError("resolvent grid or parameters do not match the requested grid")
    right, left = resolvent.base.values, resolvent.left
    t = h * np.arange(N)
    lives = np.asarray(ancestor_lifetimes, dtype=float)
    Qt = integrate_to(right, left, h, t)
    mean = np.zeros(N)
    for e in lives:
        mean += (e > t) + Qt - integrate_to(right, left, h, t - np.minimum(t, e))
    if params.zeta_n > 0:
        a = params.immigration.mean
        if params.lambda_m > 0:
            mean += params.zeta_n * a * Qt / params.lambda_m
        else:
            law = params.lifetime
            mean += params.zeta_n * a * integrate_to(law.tail(t), law.tail_left(t), h, t)
    return GridFunction(h, mean)
