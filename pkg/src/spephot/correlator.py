"""Coincidence counting on time-tag streams.

All counting runs on integer picosecond timestamps, so results are exact and
independent of chunking.  Delays are ``t(channel 1) - t(channel 0)``; bins are
half-open ``[left, right)``.

Normalization: at lag ``t >= 0`` only channel-0 tags in ``[0, T - t]`` and
channel-1 tags in ``[t, T]`` can form a pair, so an uncorrelated pair of streams
puts on average ``n0(t) n1(t) / (T - t)`` coincidences per unit lag into the
histogram, with ``n0``, ``n1`` the observed tag counts in those windows (mirror
image for ``t < 0``).  A bin ``[l, r)`` is normalized by the integral of that
density over the bin.  For stationary streams this equals
``r0 r1 * integral_l^r (T - |t|) dt`` on average; conditioning on the counts
actually inside the overlap keeps Poisson errors honest at lags comparable to
``T``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .photonsim import PS_PER_NS, TimeTagStream


@dataclass(frozen=True, eq=False)
class G2Curve:
    """Normalized second-order correlation estimate.

    ``lags`` are bin centers in ns; ``edges`` the bin edges in ns (for
    point-sampled curves ``edges`` is ``None``).  ``norm`` records the channel
    rates (1/ns), duration (ns) and the per-bin normalization denominators.
    """

    lags: np.ndarray
    values: np.ndarray
    errors: np.ndarray
    scheme: str = "linear"
    edges: np.ndarray | None = None
    counts: np.ndarray | None = None
    norm: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("lags", "values", "errors"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.edges is not None:
            object.__setattr__(self, "edges", np.asarray(self.edges, dtype=float))
            if self.edges.size != self.lags.size + 1:
                raise ValueError("edges must have one more entry than lags")
        if self.counts is not None:
            object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))
        if not (self.lags.shape == self.values.shape == self.errors.shape):
            raise ValueError("lags, values and errors must have equal shape")
        if self.lags.size > 1 and np.any(np.diff(self.lags) <= 0):
            raise ValueError("lags must be strictly increasing")
        if np.any(self.errors < 0):
            raise ValueError("errors must be >= 0")
        if self.scheme not in ("linear", "log-lag", "start-stop", "sampled"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if "duration" in self.norm and not self.norm["duration"] > 0:
            raise ValueError("norm.duration must be > 0")

    def __eq__(self, other):
        if not isinstance(other, G2Curve):
            return NotImplemented

        def same(x, y):
            if x is None or y is None:
                return x is y
            return np.array_equal(x, y)

        return (self.scheme == other.scheme and same(self.lags, other.lags)
                and same(self.values, other.values) and same(self.errors, other.errors)
                and same(self.edges, other.edges) and same(self.counts, other.counts))

    def select(self, mask) -> "G2Curve":
        """Sub-curve of the bins where ``mask`` is true (edges dropped)."""
        mask = np.asarray(mask, dtype=bool)
        return G2Curve(self.lags[mask], self.values[mask], self.errors[mask],
                       scheme=self.scheme, edges=None,
                       counts=None if self.counts is None else self.counts[mask],
                       norm={k: v for k, v in self.norm.items() if np.isscalar(v)}
                       | {"bin_left": self.bin_left[mask], "bin_right": self.bin_right[mask]})

    @property
    def bin_left(self) -> np.ndarray:
        if self.edges is not None:
            return self.edges[:-1]
        return np.asarray(self.norm.get("bin_left", self.lags), dtype=float)

    @property
    def bin_right(self) -> np.ndarray:
        if self.edges is not None:
            return self.edges[1:]
        return np.asarray(self.norm.get("bin_right", self.lags), dtype=float)


@dataclass(frozen=True, eq=False)
class TcspcHistogram:
    edges: np.ndarray
    counts: np.ndarray
    sync_count: int

    def __post_init__(self):
        object.__setattr__(self, "edges", np.asarray(self.edges, dtype=float))
        counts = np.asarray(self.counts)
        # integer histograms stay exact; float counts (synthetic or background-corrected) pass through
        counts = counts.astype(np.int64) if counts.dtype.kind in "iub" else counts.astype(float)
        object.__setattr__(self, "counts", counts)
        if self.edges.size != self.counts.size + 1:
            raise ValueError("edges must have one more entry than counts")
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("edges must be increasing")
        if np.any(self.counts < 0):
            raise ValueError("counts must be >= 0")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def __eq__(self, other):
        if not isinstance(other, TcspcHistogram):
            return NotImplemented
        return (self.sync_count == other.sync_count and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.counts, other.counts))


@nb.njit(cache=True, nogil=True)
def _pair_histogram(t0, t1, lo, hi, max_lag, bin_ps, nbins):
    """Histogram delays t1 - t0 in [-max_lag, max_lag) for t0[lo:hi]."""
    hist = np.zeros(nbins, dtype=np.int64)
    n1 = t1.size
    if hi <= lo:
        return hist
    # first candidate partner for t0[lo]
    j0 = np.searchsorted(t1, t0[lo] - max_lag)
    for i in range(lo, hi):
        start = t0[i] - max_lag
        stop = t0[i] + max_lag
        while j0 < n1 and t1[j0] < start:
            j0 += 1
        j = j0
        while j < n1 and t1[j] < stop:
            hist[(t1[j] - start) // bin_ps] += 1
            j += 1
    return hist


@nb.njit(cache=True, nogil=True)
def _start_stop_histogram(t0, t1, max_lag, bin_ps, nbins):
    hist = np.zeros(nbins, dtype=np.int64)
    n1 = t1.size
    j = 0
    for i in range(t0.size):
        while j < n1 and t1[j] < t0[i]:
            j += 1
        if j == n1:
            break
        d = t1[j] - t0[i]
        if d < max_lag:
            hist[d // bin_ps] += 1
    return hist


@nb.njit(cache=True, nogil=True)
def _cumulative_pairs(t0, t1, edges):
    """F[k] = number of pairs with t1 - t0 < edges[k] (edges sorted)."""
    ne = edges.size
    ptr = np.zeros(ne, dtype=np.int64)
    total = np.zeros(ne, dtype=np.int64)
    n1 = t1.size
    for i in range(t0.size):
        for k in range(ne):
            target = t0[i] + edges[k]
            p = ptr[k]
            while p < n1 and t1[p] < target:
                p += 1
            ptr[k] = p
            total[k] += p
    return total


_NORM_NODES = 16
_FANO_MAX_WINDOWS = 1 << 20


class _SortedCounter:
    """Tag counts below / up to a time for one channel held in memory."""

    def __init__(self, t):
        self.t = t
        self.total = t.size

    def n_lt(self, x):
        return np.searchsorted(self.t, x, side="left")

    def n_le(self, x):
        return np.searchsorted(self.t, x, side="right")


class EdgeCounter:
    """Counts for one channel from its first and last tags only.

    ``head`` must hold every tag below ``head_limit`` and ``tail`` every tag
    above ``tail_limit``; queries are valid for ``x <= head_limit`` (``n_lt``)
    and ``x >= tail_limit`` (``n_le``).  This is all the lag normalization
    needs, so long files can be normalized without loading them.
    """

    def __init__(self, head, tail, total):
        self.head = np.asarray(head, dtype=np.int64)
        self.tail = np.asarray(tail, dtype=np.int64)
        self.total = int(total)

    def n_lt(self, x):
        return np.searchsorted(self.head, x, side="left")

    def n_le(self, x):
        return self.total - (self.tail.size - np.searchsorted(self.tail, x, side="right"))


def _overlap_denominators(c0, c1, left_ps, right_ps, duration_ps):
    """Expected uncorrelated coincidences per bin, conditioned on the tags that
    can pair at each lag.  Composite midpoint rule with ``_NORM_NODES`` nodes."""
    left = np.asarray(left_ps, float)
    width = np.asarray(right_ps, float) - left
    frac = (np.arange(_NORM_NODES) + 0.5) / _NORM_NODES
    tau = left[:, None] + width[:, None] * frac[None, :]
    a = np.abs(tau)
    span = duration_ps - a
    # t >= 0: t0 in [0, T - t], t1 in [t, T]; t < 0 swaps the windows
    pos = tau >= 0
    n0 = np.where(pos, c0.n_le(span), c0.total - c0.n_lt(a))
    n1 = np.where(pos, c1.total - c1.n_lt(a), c1.n_le(span))
    density = n0.astype(float) * n1 / span
    return density.mean(axis=1) * width


def _channel_times(stream: TimeTagStream):
    t0 = stream.channel(0)
    t1 = stream.channel(1)
    if t0.size == 0 or t1.size == 0:
        raise ValueError("both channels must contain tags")
    return t0, t1


def _normalize(counts, left_ps, right_ps, c0, c1, duration_ps):
    """g2 values and Poisson errors; empty bins get the error of one count."""
    denom = _overlap_denominators(c0, c1, left_ps, right_ps, duration_ps)
    values = counts / denom
    errors = np.sqrt(np.maximum(counts, 1)) / denom
    return values, errors, denom


def linear_curve(hist, half_bins, bin_ps, c0, c1, duration_ps, scheme="linear") -> G2Curve:
    """Normalize a symmetric (or start-stop) pair histogram into a G2Curve."""
    L = half_bins * bin_ps
    if scheme == "start-stop":
        left = np.arange(half_bins, dtype=np.int64) * bin_ps
    else:
        left = -L + np.arange(2 * half_bins, dtype=np.int64) * bin_ps
    right = left + bin_ps
    values, errors, denom = _normalize(hist, left, right, c0, c1, duration_ps)
    edges_ns = np.append(left, right[-1]) / PS_PER_NS
    T_ns = duration_ps / PS_PER_NS
    return G2Curve(
        lags=0.5 * (left + right) / PS_PER_NS, values=values, errors=errors,
        scheme=scheme, edges=edges_ns, counts=hist,
        norm={"r0": c0.total / T_ns, "r1": c1.total / T_ns, "duration": T_ns,
              "bin_width": bin_ps / PS_PER_NS, "denominators": denom},
    )


def lag_grid(bin_width: float, max_lag: float, duration_ps: int) -> tuple[int, int]:
    """Validated (bin_ps, half_bins) for a linear histogram."""
    if not bin_width > 0:
        raise ValueError("bin_width must be > 0")
    if not max_lag >= bin_width:
        raise ValueError("max_lag must be >= bin_width")
    if duration_ps <= 0 or max_lag >= duration_ps / PS_PER_NS / 2:
        raise ValueError("max_lag must be below half the acquisition duration")
    bin_ps = int(round(bin_width * PS_PER_NS))
    if bin_ps < 1:
        raise ValueError("bin_width below the 1 ps timestamp resolution")
    return bin_ps, int(round(max_lag * PS_PER_NS / bin_ps))


def _chunk_bounds(t0: np.ndarray, n_chunks: int) -> list[tuple[int, int]]:
    if n_chunks <= 1 or t0.size < 2:
        return [(0, t0.size)]
    # time chunks of equal length; each pair belongs to the chunk holding its channel-0 tag
    cuts = np.linspace(t0[0], t0[-1] + 1, n_chunks + 1).astype(np.int64)
    idx = np.searchsorted(t0, cuts)
    idx[0], idx[-1] = 0, t0.size
    return [(int(a), int(b)) for a, b in zip(idx[:-1], idx[1:])]


def cross_correlate(stream: TimeTagStream, bin_width: float, max_lag: float,
                    n_chunks: int = 1, workers: int | None = None,
                    start_stop: bool = False) -> G2Curve:
    """Normalized cross-correlation histogram between channels 0 and 1.

    Every pair with delay in ``[-max_lag, max_lag)`` is counted by a sorted
    sweep over both channels.  ``n_chunks > 1`` splits the channel-0 tags into
    time chunks processed on a thread pool; integer histograms are summed, so
    the result is bit-identical to the sequential one.

    ``start_stop=True`` gives the classic start-stop histogram (first channel-1
    tag after each channel-0 tag, positive lags only).  It is biased once lags
    approach the mean inter-arrival time and is meant only as a diagnostic.
    """
    bin_ps, half_bins = lag_grid(bin_width, max_lag, stream.duration)
    t0, t1 = _channel_times(stream)
    L = half_bins * bin_ps

    if start_stop:
        hist = _start_stop_histogram(t0, t1, L, bin_ps, half_bins)
        scheme = "start-stop"
    else:
        nbins = 2 * half_bins
        bounds = _chunk_bounds(t0, n_chunks)
        if len(bounds) == 1:
            hist = _pair_histogram(t0, t1, 0, t0.size, L, bin_ps, nbins)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(
                    lambda b: _pair_histogram(t0, t1, b[0], b[1], L, bin_ps, nbins), bounds))
            hist = np.sum(parts, axis=0, dtype=np.int64)
        scheme = "linear"
    return linear_curve(hist, half_bins, bin_ps, _SortedCounter(t0), _SortedCounter(t1),
                        stream.duration, scheme)


def split_blocks(stream: TimeTagStream, n_blocks: int) -> list[TimeTagStream]:
    """Cut a stream into ``n_blocks`` equal time windows, each restarted at zero."""
    if n_blocks < 1:
        raise ValueError("n_blocks must be >= 1")
    T = stream.duration
    cuts = np.array([k * T // n_blocks for k in range(n_blocks + 1)], dtype=np.int64)
    idx = np.searchsorted(stream.timestamps, cuts[1:-1], side="left")
    idx = np.concatenate([[0], idx, [len(stream)]])
    return [TimeTagStream(stream.timestamps[a:b] - lo, stream.channels[a:b], hi - lo)
            for a, b, lo, hi in zip(idx[:-1], idx[1:], cuts[:-1], cuts[1:])]


def block_correlate(stream: TimeTagStream, bin_width: float, max_lag: float, n_blocks: int,
                    workers: int | None = None) -> G2Curve:
    """Linear g2 pooled from independent time blocks.

    Each block is histogrammed and normalized on its own, then counts and
    denominators are summed.  The per-block arrays are kept in ``norm`` so that
    leave-one-block-out curves (:func:`drop_block`) can estimate errors that
    include slow intensity fluctuations, which correlate all lag bins.  Pairs
    straddling a block boundary are lost, a fraction of about
    ``max_lag * n_blocks / T``.
    """
    blocks = split_blocks(stream, n_blocks)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        curves = list(pool.map(lambda b: cross_correlate(b, bin_width, max_lag), blocks))
    counts = np.stack([c.counts for c in curves])
    denoms = np.stack([c.norm["denominators"] for c in curves])
    T_ns = stream.duration / PS_PER_NS
    n0, n1 = stream.counts()
    C, D = counts.sum(axis=0), denoms.sum(axis=0)
    ref = curves[0]
    return G2Curve(lags=ref.lags, values=C / D, errors=np.sqrt(np.maximum(C, 1)) / D,
                   scheme="linear", edges=ref.edges, counts=C,
                   norm={"r0": n0 / T_ns, "r1": n1 / T_ns, "duration": T_ns,
                         "bin_width": ref.norm["bin_width"], "denominators": D,
                         "n_blocks": n_blocks, "block_duration": T_ns / n_blocks,
                         "block_counts": counts, "block_denominators": denoms})


def drop_block(curve: G2Curve, k: int) -> G2Curve:
    """The pooled curve of :func:`block_correlate` without block ``k``."""
    if "block_counts" not in curve.norm:
        raise ValueError("curve carries no per-block data")
    counts = np.asarray(curve.norm["block_counts"])
    denoms = np.asarray(curve.norm["block_denominators"], dtype=float)
    C = curve.counts - counts[k]
    D = curve.norm["denominators"] - denoms[k]
    return G2Curve(lags=curve.lags, values=C / D, errors=np.sqrt(np.maximum(C, 1)) / D,
                   scheme=curve.scheme, edges=curve.edges, counts=C,
                   norm={"denominators": D, "bin_width": curve.norm["bin_width"],
                         "block_duration": curve.norm["block_duration"]})


def log_lag_edges(lag_min: float, lag_max: float, points_per_decade: int) -> np.ndarray:
    """Log-spaced positive bin edges in integer ps (duplicates removed)."""
    n = int(np.ceil(np.log10(lag_max / lag_min) * points_per_decade)) + 1
    e = np.rint(np.logspace(np.log10(lag_min), np.log10(lag_max), n) * PS_PER_NS).astype(np.int64)
    return np.unique(e)


def log_correlate(stream: TimeTagStream, decades=(1.0, 1e6), points_per_decade: int = 10,
                  both_signs: bool = True) -> G2Curve:
    """Correlation on logarithmically spaced lag bins.

    Pairs are counted exactly for every bin edge with one monotone pointer per
    edge, costing O(N * edges) irrespective of how many pairs fall inside the
    window, which is what makes lags of 1e6 ns and beyond affordable.
    ``both_signs`` also reports the mirrored negative-lag bins.
    """
    lag_min, lag_max = decades
    if not (lag_min >= 1.0 and lag_max > lag_min):
        raise ValueError("decades must satisfy 1 ns <= lag_min < lag_max")
    if stream.duration <= 0 or lag_max > stream.duration_ns / 10:
        raise ValueError("lag_max must not exceed duration / 10")
    if points_per_decade < 1:
        raise ValueError("points_per_decade must be >= 1")
    t0, t1 = _channel_times(stream)
    pos = log_lag_edges(lag_min, lag_max, points_per_decade)
    if both_signs:
        all_edges = np.concatenate([-pos[::-1], pos])
    else:
        all_edges = pos
    F = _cumulative_pairs(t0, t1, all_edges)
    counts = np.diff(F)
    left, right = all_edges[:-1], all_edges[1:]
    if both_signs:
        # drop the bin spanning (-lag_min, lag_min)
        keep = np.ones(left.size, dtype=bool)
        keep[pos.size - 1] = False
        counts, left, right = counts[keep], left[keep], right[keep]
    values, errors, denom = _normalize(counts, left, right, _SortedCounter(t0), _SortedCounter(t1),
                                         stream.duration)
    # wide bins: each tag's partner count inherits its channel's window Fano factor
    width = right - left
    fano = {w: window_fano(t0, w, stream.duration) + window_fano(t1, w, stream.duration) - 1.0
            for w in np.unique(width)}
    excess = np.array([fano[w] for w in width])
    errors = errors * np.sqrt(np.maximum(excess, 0.0))
    return G2Curve(
        lags=0.5 * (left + right) / PS_PER_NS, values=values, errors=errors,
        scheme="log-lag", edges=None, counts=counts,
        norm={"r0": t0.size / stream.duration_ns, "r1": t1.size / stream.duration_ns,
              "duration": stream.duration_ns, "bin_left": left / PS_PER_NS,
              "bin_right": right / PS_PER_NS, "denominators": denom, "variance_factor": excess},
    )


def window_fano(t_ps, width_ps: int, duration_ps: int) -> float:
    """Variance-to-mean ratio of tag counts in consecutive windows of one width.

    At most the first ``_FANO_MAX_WINDOWS`` windows are used.  Returns 1
    (Poisson) when fewer than 10 full windows fit or no tags fall in them.
    """
    n_win = min(int(duration_ps // width_ps), _FANO_MAX_WINDOWS)
    if n_win < 10:
        return 1.0
    t = np.asarray(t_ps)
    t = t[:np.searchsorted(t, n_win * width_ps)]
    c = np.bincount(t // width_ps, minlength=n_win)
    mean = c.mean()
    return float(c.var(ddof=1) / mean) if mean > 0 else 1.0


def intensity_trace(stream: TimeTagStream, bin: float):
    """Counts per time bin over both channels.

    Returns ``(bin_starts_ns, counts)``; the final bin may be partial.
    """
    if not bin > 0:
        raise ValueError("bin must be > 0")
    bin_ps = int(round(bin * PS_PER_NS))
    if bin_ps < 1:
        raise ValueError("bin below timestamp resolution")
    nbins = max(1, -(-stream.duration // bin_ps))
    idx = np.minimum(stream.timestamps // bin_ps, nbins - 1)
    counts = np.bincount(idx, minlength=nbins).astype(np.int64)
    return np.arange(nbins) * (bin_ps / PS_PER_NS), counts


def tcspc_histogram(emissions, syncs, bin: float, window: float) -> TcspcHistogram:
    """Histogram of delays between each photon and the preceding sync (ns)."""
    syncs = np.asarray(syncs, dtype=float)
    em = np.asarray(emissions, dtype=float)
    if syncs.size == 0:
        raise ValueError("no sync tags")
    if not (bin > 0 and window >= bin):
        raise ValueError("need bin > 0 and window >= bin")
    nbins = int(round(window / bin))
    edges = np.arange(nbins + 1) * bin
    idx = np.searchsorted(syncs, em, side="right") - 1
    ok = idx >= 0
    delays = em[ok] - syncs[idx[ok]]
    k = np.floor(delays / bin).astype(np.int64)
    k = k[(k >= 0) & (k < nbins)]
    counts = np.bincount(k, minlength=nbins).astype(np.int64)
    return TcspcHistogram(edges=edges, counts=counts, sync_count=int(syncs.size))
