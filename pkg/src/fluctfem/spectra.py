"""Structure factors from trajectories, reference spectra and error metric.

Mode indices are zero-based: index ``j`` has wavenumber ``k_j = 2 pi j / L``.
Only ``j = 0 .. N // 2`` are retained, ``N`` being the number of distinct
periodic nodes. The ``j = 0`` mode carries the mean and is excluded from
error metrics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

# batch length in units of the slowest mode's correlation time
BATCH_CORRELATION_TIMES = 50
MIN_RELIABLE_BATCHES = 10


def weighted_dft(values, weights, length: float) -> np.ndarray:
    """``U_j = L^{-1/2} sum_n u_n w_n exp(-2 pi i j n / N)`` over the last axis."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if values.shape[-1] != weights.shape[-1]:
        raise ValueError(f"{values.shape[-1]} values but {weights.shape[-1]} weights")
    return np.fft.fft(values * weights, axis=-1) / math.sqrt(length)


def wavenumbers(n_nodes_periodic: int, length: float) -> np.ndarray:
    return 2.0 * np.pi * np.arange(n_nodes_periodic // 2 + 1) / length


@dataclass
class SpectrumResult:
    k: np.ndarray
    values: np.ndarray
    errors: np.ndarray
    dx: float
    n_batches: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def kdx(self) -> np.ndarray:
        return self.k * self.dx

    @property
    def reliable(self) -> bool:
        return self.n_batches >= MIN_RELIABLE_BATCHES


@dataclass
class DynamicSpectrumResult:
    k: float
    tau: np.ndarray
    values: np.ndarray
    errors: np.ndarray
    n_batches: int = 0
    metadata: dict = field(default_factory=dict)


def batch_means(x, batch_len: int):
    """Mean and batch-means standard error along axis 0.

    Returns ``(mean, stderr, n_batches)``; the mean uses all samples, the
    error uses the ``n_batches`` complete batches (``nan`` if fewer than 2).
    """
    x = np.asarray(x)
    n = x.shape[0]
    batch_len = max(1, int(batch_len))
    mean = x.mean(axis=0)
    nb = n // batch_len
    if nb < 2:
        return mean, np.full(np.shape(mean), np.nan), nb
    bm = x[: nb * batch_len].reshape((nb, batch_len) + x.shape[1:]).mean(axis=1)
    return mean, bm.std(axis=0, ddof=1) / math.sqrt(nb), nb


def _lagged_products(x: np.ndarray, max_lag: int) -> np.ndarray:
    """``sum_t Re(x[t+l] conj(x[t]))`` for ``l = 0..max_lag`` via FFT."""
    n = len(x)
    nfft = 1 << (2 * n - 1).bit_length()
    X = np.fft.fft(x, nfft)
    return np.fft.ifft(X * np.conj(X))[: max_lag + 1].real


def autocorrelation_time(series) -> float:
    """Lag (in samples) where the normalized autocovariance first drops below 1/e."""
    x = np.asarray(series)
    n = len(x)
    if n < 4:
        return 0.0
    c = _lagged_products(x, n - 1) / (n - np.arange(n))
    if c[0] <= 0:
        return 0.0
    rho = c / c[0]
    below = np.nonzero(rho < math.exp(-1.0))[0]
    if len(below) == 0:
        return float(n)
    l = below[0]
    # linear interpolation between l-1 and l
    r0, r1 = rho[l - 1], rho[l]
    return float(l - 1 + (r0 - math.exp(-1.0)) / (r0 - r1))


class SpectrumAccumulator:
    """Streaming static/dynamic structure factor estimator.

    Feed states with ``update`` (or ``update_many``); the instance is itself
    an observer for :func:`fluctfem.integrator.run`. Squared mode amplitudes
    are summed in blocks of ``block`` samples, later grouped into batches of
    about ``BATCH_CORRELATION_TIMES`` correlation times of the slowest
    nonzero mode. Complex time series are kept for ``track`` mode indices.
    """

    def __init__(self, weights, length: float, dx: float, *, block: int = 16, track=()):
        self.weights = np.asarray(weights, dtype=float) / math.sqrt(length)
        self.length = float(length)
        self.dx = float(dx)
        self.n_nodes = len(self.weights)
        self.n_modes = self.n_nodes // 2 + 1
        self.block = int(block)
        self.track = sorted({1, *track} & set(range(self.n_modes)))
        self._blocks: list[np.ndarray] = []
        self._partial = np.zeros(self.n_modes)
        self._partial_count = 0
        self._total = np.zeros(self.n_modes)
        self._count = 0
        self._series = {m: [] for m in self.track}

    def __call__(self, u):
        self.update(u)

    def update(self, u) -> None:
        U = np.fft.rfft(np.asarray(u, dtype=float) * self.weights)
        self._ingest(U[None, :])

    def update_many(self, states, chunk: int = 4096) -> None:
        states = np.asarray(states, dtype=float)
        for start in range(0, len(states), chunk):
            self._ingest(np.fft.rfft(states[start : start + chunk] * self.weights, axis=1))

    def _ingest(self, U: np.ndarray) -> None:
        for m in self.track:
            self._series[m].append(U[:, m].copy())
        power = U.real**2 + U.imag**2
        self._total += power.sum(axis=0)
        self._count += len(power)
        i = 0
        if self._partial_count:
            take = min(self.block - self._partial_count, len(power))
            self._partial += power[:take].sum(axis=0)
            self._partial_count += take
            i = take
            if self._partial_count == self.block:
                self._blocks.append(self._partial / self.block)
                self._partial = np.zeros(self.n_modes)
                self._partial_count = 0
        nfull = (len(power) - i) // self.block
        if nfull:
            chunk = power[i : i + nfull * self.block].reshape(nfull, self.block, -1).mean(axis=1)
            self._blocks.extend(chunk)
            i += nfull * self.block
        if i < len(power):
            self._partial += power[i:].sum(axis=0)
            self._partial_count += len(power) - i

    @property
    def count(self) -> int:
        return self._count

    def series(self, mode: int) -> np.ndarray:
        if mode not in self._series:
            raise KeyError(f"mode {mode} was not tracked")
        parts = self._series[mode]
        return np.concatenate(parts) if parts else np.zeros(0, complex)

    def correlation_time(self) -> float:
        """Correlation time (samples) of the slowest nonzero mode."""
        if 1 not in self._series:
            return 0.0
        return autocorrelation_time(self.series(1))

    def batch_length(self) -> int:
        """Batch length in samples, a whole number of blocks."""
        tau = self.correlation_time()
        blocks = max(1, math.ceil(BATCH_CORRELATION_TIMES * tau / self.block))
        return blocks * self.block

    def static(self, metadata: dict | None = None) -> SpectrumResult:
        if self._count == 0:
            raise ValueError("no samples accumulated")
        mean = self._total / self._count
        per_batch = self.batch_length() // self.block
        if self._blocks:
            _, err, nb = batch_means(np.array(self._blocks), per_batch)
        else:
            err, nb = np.full(self.n_modes, np.nan), 0
        md = {"n_samples": self._count, "batch_length": per_batch * self.block}
        md.update(metadata or {})
        k = 2.0 * np.pi * np.arange(self.n_modes) / self.length
        return SpectrumResult(k, mean, err, self.dx, nb, md)

    def dynamic(self, mode: int, max_lag: int, lag_time: float, metadata: dict | None = None):
        """Lagged covariance ``<U_k(t) U_k*(t - tau)>`` for ``tau = l * lag_time``."""
        x = self.series(mode)
        return _dynamic_from_series(
            x, mode, max_lag, lag_time, self.length, self.batch_length(), metadata
        )


def _dynamic_from_series(x, mode, max_lag, lag_time, length, batch_len, metadata):
    n = len(x)
    if max_lag >= n:
        raise ValueError(f"max_lag={max_lag} exceeds the trajectory span of {n} samples")
    mean = _lagged_products(x, max_lag) / (n - np.arange(max_lag + 1))
    B = max(int(batch_len), 4 * (max_lag + 1))
    nb = n // B
    if nb >= 2:
        est = np.array(
            [
                _lagged_products(x[b * B : (b + 1) * B], max_lag) / (B - np.arange(max_lag + 1))
                for b in range(nb)
            ]
        )
        err = est.std(axis=0, ddof=1) / math.sqrt(nb)
    else:
        err = np.full(max_lag + 1, np.nan)
    md = {"n_samples": n, "batch_length": B}
    md.update(metadata or {})
    k = 2.0 * np.pi * mode / length
    return DynamicSpectrumResult(k, np.arange(max_lag + 1) * lag_time, mean, err, nb, md)


def _states_of(trajectory):
    states = getattr(trajectory, "states", trajectory)
    if states is None:
        raise ValueError("trajectory carries no stored states")
    return np.asarray(states, dtype=float)


def static_structure_factor(trajectory, weights, length: float, dx: float | None = None, *, block: int = 16):
    """Time average of ``|U_j|^2`` over the collected states of ``trajectory``.

    ``trajectory`` is a :class:`~fluctfem.integrator.Trajectory` or an array
    of shape ``(n_samples, N)`` holding the periodic node values.
    """
    states = _states_of(trajectory)
    if dx is None:
        dx = length / states.shape[1]
    acc = SpectrumAccumulator(weights, length, dx, block=block)
    acc.update_many(states)
    return acc.static()


def dynamic_structure_factor(
    trajectory, weights, length: float, k_index: int, max_lag: int, lag_time: float | None = None
) -> DynamicSpectrumResult:
    """Lagged covariance of mode ``k_index`` for lags ``0..max_lag`` samples."""
    states = _states_of(trajectory)
    if lag_time is None:
        lag_time = getattr(trajectory, "dt", 1.0) * getattr(trajectory, "thinning", 1)
    dx = length / states.shape[1]
    acc = SpectrumAccumulator(weights, length, dx, track=(k_index,))
    acc.update_many(states)
    return acc.dynamic(k_index, max_lag, lag_time)


def fit_decay_rate(tau, values, floor: float) -> tuple[float, float]:
    """Least-squares fit of ``log S = log A - rate * tau`` over the leading lags with ``S >= floor``.

    Returns ``(rate, A)``.
    """
    tau = np.asarray(tau, float)
    values = np.asarray(values, float)
    ok = values >= floor
    n = len(ok) if ok.all() else int(np.argmin(ok))
    if n < 2:
        raise ValueError("fewer than two lags above the fit floor")
    slope, intercept = np.polyfit(tau[:n], np.log(values[:n]), 1)
    return float(-slope), float(math.exp(intercept))


# reference spectra ---------------------------------------------------------


def theory_continuum(u0: float, k=None):
    """White-noise structure factor ``S = u0``."""
    return u0 if k is None else np.full(np.shape(k), float(u0))


def theory_fe_p1(u0: float, kdx, J: int = 1000):
    """Discrete p1 structure factor ``9 u0 / (2 + cos kdx)^2 * sum_j sinc^4(kdx/2 - pi j)``."""
    kdx = np.asarray(kdx, dtype=float)
    j = np.arange(-J, J + 1)
    x = kdx[..., None] / 2.0 - np.pi * j
    s = np.sum(np.sinc(x / np.pi) ** 4, axis=-1)
    out = 9.0 * u0 / (2.0 + np.cos(kdx)) ** 2 * s
    return float(out) if out.ndim == 0 else out


def theory_lorentzian(u0: float, k, k0: float):
    k = np.asarray(k, dtype=float)
    out = u0 / (1.0 + (k / k0) ** 2)
    return float(out) if out.ndim == 0 else out


def theory_dyn(u0: float, D: float, k: float, tau, k0: float | None = None):
    """``u0 exp(-D k^2 tau)``; with ``k0`` the fourth-order analogue."""
    tau = np.asarray(tau, dtype=float)
    if k0 is None:
        out = u0 * np.exp(-D * k**2 * tau)
    else:
        g = 1.0 + (k / k0) ** 2
        out = u0 / g * np.exp(-D * k**2 * g * tau)
    return float(out) if out.ndim == 0 else out


def error_metric(S_est, S_ref) -> float:
    """Mean relative absolute deviation; pass nonzero wavenumbers only."""
    S_est = np.asarray(S_est, dtype=float)
    S_ref = np.asarray(S_ref, dtype=float)
    if S_est.shape != S_ref.shape:
        raise ValueError("estimate and reference are on different grids")
    if np.any(S_ref == 0):
        raise ValueError("reference spectrum has a zero entry")
    return float(np.mean(np.abs(S_est - S_ref) / np.abs(S_ref)))


# CSV --------------------------------------------------------------------------

STATIC_HEADER = ["k", "kdx", "S", "S_err", "S_ref"]
DYNAMIC_HEADER = ["k", "tau", "Sdyn", "Sdyn_err", "Sdyn_ref"]


def _fmt(x) -> str:
    return repr(float(x))


def write_spectrum_csv(path, result: SpectrumResult, S_ref) -> None:
    S_ref = np.broadcast_to(np.asarray(S_ref, float), result.values.shape)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATIC_HEADER)
        for row in zip(result.k, result.kdx, result.values, result.errors, S_ref):
            w.writerow([_fmt(v) for v in row])


def write_dynamic_csv(path, result: DynamicSpectrumResult, S_ref) -> None:
    S_ref = np.broadcast_to(np.asarray(S_ref, float), result.values.shape)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DYNAMIC_HEADER)
        for tau, s, e, r in zip(result.tau, result.values, result.errors, S_ref):
            w.writerow([_fmt(result.k), _fmt(tau), _fmt(s), _fmt(e), _fmt(r)])


def read_csv_columns(path, header) -> dict:
    """Parse a spectrum CSV, checking the header exactly."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != list(header):
        raise ValueError(f"{path}: header {rows[0]} != {list(header)}")
    data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(header))
    return {name: data[:, i] for i, name in enumerate(header)}
