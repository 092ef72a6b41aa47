"""QPSK-OFDM baseband link: framing, channel + jammer + AWGN, sync, LS/ZF receiver."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

log = logging.getLogger(__name__)

MIN_ERRORS = 100
SYNC_THRESHOLD = 4.0
ERASURE_THRESHOLD = 1e-12


class SyncError(RuntimeError):
    """No preamble found in the received samples."""


@dataclass(frozen=True)
class OfdmParams:
    n_fft: int = 256
    n_active: int = 152
    cp_len: int = 32
    data_symbols: int = 20
    preamble_symbols: int = 1
    bits_per_symbol: int = 2
    sample_rate: float = 15e6
    bandwidth: float = 15e6
    # The FFT window starts this many samples inside the cyclic prefix.
    fft_backoff: int = 1

    def __post_init__(self):
        if self.n_active % 2 or self.n_active > self.n_fft - 1:
            raise ValueError("n_active must be even and at most n_fft - 1")
        if not 0 <= self.cp_len < self.n_fft:
            raise ValueError("cp_len must be in [0, n_fft)")
        if self.data_symbols < 1:
            raise ValueError("data_symbols must be >= 1")
        if self.bits_per_symbol != 2:
            raise ValueError("only QPSK (2 bits per symbol) is supported")
        if not 0 <= self.fft_backoff <= self.cp_len:
            raise ValueError("fft_backoff must lie within the cyclic prefix")
        if self.preamble_symbols != 1:
            raise ValueError("exactly one preamble symbol is supported")

    @property
    def spacing(self) -> float:
        return self.bandwidth / self.n_fft

    @property
    def symbol_len(self) -> int:
        return self.n_fft + self.cp_len

    @property
    def frame_len(self) -> int:
        return (self.preamble_symbols + self.data_symbols) * self.symbol_len

    @property
    def bits_per_frame(self) -> int:
        return self.data_symbols * self.n_active * self.bits_per_symbol

    @property
    def subcarriers(self) -> np.ndarray:
        """Signed indices of the active subcarriers, ascending in frequency."""
        half = self.n_active // 2
        return np.concatenate([np.arange(-half, 0), np.arange(1, half + 1)])

    @property
    def active_bins(self) -> np.ndarray:
        return self.subcarriers % self.n_fft

    def bin_frequencies(self) -> np.ndarray:
        """Baseband frequency of every FFT bin, in FFT order."""
        return np.fft.fftfreq(self.n_fft, d=1.0 / self.sample_rate)


@dataclass(frozen=True)
class Frame:
    bits: np.ndarray
    tx_samples: np.ndarray
    preamble_seed: int
    symbols: np.ndarray  # (data_symbols, n_active)


@dataclass(frozen=True)
class LinkCondition:
    """Per-link channel and impairment settings.

    ``h_des_k`` is the desired channel on every FFT bin (FFT order, length
    ``n_fft``); ``jam_rel_db`` is the jammer-to-signal power ratio at the
    transmitter ports. ``-inf`` disables the jammer and ``inf`` the noise.
    """

    h_des_k: np.ndarray
    h_und_jam: complex = 0.0
    jam_rel_db: float = float("-inf")
    snr_db: float = float("inf")
    sample_delay: int = 0
    jam_offset_hz: float | None = None  # None -> 2.5 subcarrier spacings

    def __post_init__(self):
        object.__setattr__(self, "h_des_k", np.asarray(self.h_des_k, complex))
        if self.sample_delay < 0:
            raise ValueError("sample_delay must be >= 0")
        if math.isnan(self.snr_db) or self.snr_db == float("-inf"):
            raise ValueError("snr_db must be finite or +inf")

    def jam_offset(self, params: OfdmParams) -> float:
        return 2.5 * params.spacing if self.jam_offset_hz is None else self.jam_offset_hz


@dataclass(frozen=True)
class BerReport:
    bits_total: int
    bits_error: int
    frames: int = 0
    frames_sync_failed: int = 0

    @property
    def ber(self) -> float:
        return self.bits_error / self.bits_total if self.bits_total else float("nan")

    @property
    def statistically_valid(self) -> bool:
        return self.bits_error >= MIN_ERRORS


@dataclass
class Demodulated:
    bits: np.ndarray
    channel_estimate: np.ndarray  # (n_active,)
    symbols: np.ndarray  # (data_symbols, n_active) equalized
    erased: np.ndarray  # (n_active,) bool


@dataclass
class LinkRun:
    report: BerReport
    constellation: list[tuple[int, np.ndarray]] = field(default_factory=list)


# -- mapping ----------------------------------------------------------------

def qpsk_map(bits) -> np.ndarray:
    """Gray QPSK, bits (b0, b1) -> ((1 - 2 b0) + 1j (1 - 2 b1)) / sqrt(2)."""
    b = np.asarray(bits, dtype=np.int8).reshape(-1, 2)
    return ((1 - 2 * b[:, 0]) + 1j * (1 - 2 * b[:, 1])) / np.sqrt(2)


def qpsk_demap(symbols) -> np.ndarray:
    s = np.asarray(symbols).reshape(-1)
    return np.column_stack([s.real < 0, s.imag < 0]).astype(np.uint8).reshape(-1)


def preamble_symbols(params: OfdmParams, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return qpsk_map(rng.integers(0, 2, 2 * params.n_active))


def _ofdm_symbols(freq: np.ndarray, params: OfdmParams) -> np.ndarray:
    """(S, n_active) active-carrier values -> (S, symbol_len) time samples with CP."""
    grid = np.zeros((len(freq), params.n_fft), complex)
    grid[:, params.active_bins] = freq
    body = np.fft.ifft(grid, axis=1, norm="ortho")
    return np.concatenate([body[:, params.n_fft - params.cp_len:], body], axis=1)


def preamble_waveform(params: OfdmParams, seed: int) -> np.ndarray:
    """Time-domain preamble body (cyclic prefix excluded)."""
    return _ofdm_symbols(preamble_symbols(params, seed)[None, :], params)[0, params.cp_len:]


def modulate_frame(bits, params: OfdmParams = OfdmParams(), preamble_seed: int = 0) -> Frame:
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.shape != (params.bits_per_frame,):
        raise ValueError(f"frame needs exactly {params.bits_per_frame} bits, got {bits.size}")
    data = qpsk_map(bits).reshape(params.data_symbols, params.n_active)
    freq = np.vstack([preamble_symbols(params, preamble_seed)[None, :], data])
    samples = _ofdm_symbols(freq, params).reshape(-1)
    return Frame(bits=bits, tx_samples=samples, preamble_seed=preamble_seed, symbols=data)


# -- channel ----------------------------------------------------------------

def impulse_response(h_des_k, params: OfdmParams) -> tuple[np.ndarray, float]:
    """Causal impulse response truncated to ``cp_len`` taps, and the discarded energy fraction."""
    h_des_k = np.asarray(h_des_k, complex)
    if h_des_k.shape != (params.n_fft,):
        raise ValueError(f"h_des_k must have length n_fft={params.n_fft}")
    taps = np.fft.ifft(h_des_k)
    total = float(np.sum(np.abs(taps) ** 2))
    kept = taps[:params.cp_len].copy()
    discarded = 1.0 - float(np.sum(np.abs(kept) ** 2)) / total if total > 0 else 0.0
    peak = np.abs(kept).max(initial=0.0)
    kept[np.abs(kept) <= 1e-13 * peak] = 0.0
    nz = np.flatnonzero(kept)
    kept = kept[:nz[-1] + 1] if nz.size else kept[:1]
    return kept, max(discarded, 0.0)


def apply_link(frame: Frame, cond: LinkCondition, rng: np.random.Generator,
               params: OfdmParams = OfdmParams()) -> np.ndarray:
    """Channel, narrowband jammer, delay and AWGN applied to one frame."""
    return _apply(frame, cond, _link_taps(cond, params), rng, params)


def _link_taps(cond: LinkCondition, params: OfdmParams) -> np.ndarray:
    taps, discarded = impulse_response(cond.h_des_k, params)
    if discarded > 0.01:
        log.warning("impulse response truncation discards %.2f%% of the energy "
                    "(cyclic prefix insufficient)", 100 * discarded)
    return taps


def _apply(frame, cond, taps, rng, params):
    tx = frame.tx_samples
    desired = np.convolve(tx, taps)
    out = np.concatenate([np.zeros(cond.sample_delay, complex), desired])
    n = np.arange(len(out))

    if cond.jam_rel_db != float("-inf"):
        port_power = np.mean(np.abs(tx) ** 2)
        amp = np.sqrt(port_power * 10 ** (cond.jam_rel_db / 10)) * abs(cond.h_und_jam)
        phase0 = rng.uniform(0, 2 * np.pi)
        out = out + amp * np.exp(1j * (2 * np.pi * cond.jam_offset(params) / params.sample_rate * n + phase0))

    if cond.snr_db != float("inf"):
        span = desired[:len(tx)]
        sig_power = np.mean(np.abs(span) ** 2)
        sigma2 = sig_power / 10 ** (cond.snr_db / 10)
        noise = rng.standard_normal((len(out), 2)) @ np.array([1.0, 1j])
        out = out + np.sqrt(sigma2 / 2) * noise
    return out


def excise_tone(rx: np.ndarray) -> np.ndarray:
    """Subtract the least-squares fit of the strongest complex sinusoid."""
    rx = np.asarray(rx, complex)
    n = np.arange(len(rx))
    nfft = 1 << int(np.ceil(np.log2(4 * len(rx))))
    k = int(np.argmax(np.abs(np.fft.fft(rx, nfft))))
    w0 = 2 * np.pi * k / nfft
    step = 2 * np.pi / nfft

    def neg_power(w):
        return -abs(np.dot(rx, np.exp(-1j * w * n)))

    w = minimize_scalar(neg_power, bounds=(w0 - step, w0 + step), method="bounded",
                        options={"xatol": 1e-10}).x
    tone = np.exp(1j * w * n)
    amp = np.dot(rx, tone.conj()) / len(rx)
    return rx - amp * tone


def synchronize(rx, params: OfdmParams = OfdmParams(), preamble_seed: int = 0, *,
                window: tuple[int, int] | None = None, threshold: float = SYNC_THRESHOLD,
                excise: bool = True) -> int:
    """Frame start by correlation against the known preamble body.

    The peak is searched over frame offsets in ``window`` (inclusive, default:
    every offset that leaves a full frame). The peak must exceed ``threshold``
    times the median correlation magnitude over all lags. With ``excise`` the
    dominant spectral line is removed before correlating, so a strong CW tone
    does not swamp the correlation.
    """
    rx = np.asarray(rx, complex)
    if len(rx) < params.frame_len:
        raise ValueError(f"need at least one frame ({params.frame_len} samples), got {len(rx)}")
    ref = preamble_waveform(params, preamble_seed)
    r = excise_tone(rx) if excise else rx
    mags = np.abs(np.correlate(r, ref, mode="valid"))
    last = len(rx) - params.frame_len
    lo, hi = window if window is not None else (0, last)
    lo, hi = max(0, lo), min(last, hi)
    if hi < lo:
        raise ValueError(f"empty search window ({lo}, {hi})")
    cand = mags[lo + params.cp_len:hi + params.cp_len + 1]
    k = int(np.argmax(cand))
    floor = float(np.median(mags))
    ratio = cand[k] / floor if floor > 0 else float("inf")
    if not ratio >= threshold:
        raise SyncError(f"correlation peak-to-median ratio {ratio:.2f} below {threshold}")
    return lo + k


def _decide_erased(bits, erased, params, rng):
    if erased.any():
        per_sym = bits.reshape(params.data_symbols, params.n_active, 2)
        per_sym[:, erased, :] = rng.integers(0, 2, size=(params.data_symbols, int(erased.sum()), 2))
    return bits


def demodulate(rx, offset: int, params: OfdmParams = OfdmParams(), preamble_seed: int = 0, *,
               channel=None, estimator: str = "preamble",
               erasure_rng: np.random.Generator | None = None) -> Demodulated:
    """CP removal, DFT, channel estimation, zero forcing and hard Gray demapping.

    ``channel`` (FFT order, length ``n_fft``) supplies genie channel knowledge
    instead of the preamble estimate. ``estimator="data_aided"`` refines the
    preamble estimate by averaging over the decided data symbols once.
    Subcarriers whose estimate falls below 1e-12 in magnitude are erased and
    their bits drawn from ``erasure_rng`` (default: seeded by ``preamble_seed``).
    """
    rx = np.asarray(rx, complex)
    n_sym = params.preamble_symbols + params.data_symbols
    if offset < 0 or offset + params.frame_len > len(rx):
        raise ValueError("not enough samples for one frame at this offset")
    starts = offset + np.arange(n_sym) * params.symbol_len + params.cp_len - params.fft_backoff
    blocks = rx[starts[:, None] + np.arange(params.n_fft)]
    Y = np.fft.fft(blocks, axis=1, norm="ortho")[:, params.active_bins]
    y_pre, y_data = Y[0], Y[1:]
    x_pre = preamble_symbols(params, preamble_seed)

    if channel is not None:
        channel = np.asarray(channel, complex)
        ramp = np.exp(-2j * np.pi * params.active_bins * params.fft_backoff / params.n_fft)
        h = channel[params.active_bins] * ramp
    else:
        h = y_pre / x_pre
    erased = np.abs(h) < ERASURE_THRESHOLD
    safe = np.where(erased, 1.0, h)
    eq = y_data / safe

    if estimator == "data_aided" and channel is None:
        decided = qpsk_map(qpsk_demap(eq)).reshape(eq.shape)
        h = (y_pre / x_pre + np.sum(y_data / decided, axis=0)) / n_sym
        erased = np.abs(h) < ERASURE_THRESHOLD
        safe = np.where(erased, 1.0, h)
        eq = y_data / safe
    elif estimator not in ("preamble", "data_aided"):
        raise ValueError(f"unknown estimator {estimator!r}")

    bits = qpsk_demap(eq)
    if erased.any():
        rng = erasure_rng if erasure_rng is not None else np.random.default_rng(preamble_seed)
        bits = _decide_erased(bits, erased, params, rng)
    return Demodulated(bits=bits, channel_estimate=h, symbols=eq, erased=erased)


def run_link(bits_target: int, params: OfdmParams, cond: LinkCondition, rng: np.random.Generator, *,
             preamble_seed: int = 0, constellation_frames: int = 0, estimator: str = "preamble",
             channel=None) -> LinkRun:
    """Transmit ``ceil(bits_target / bits_per_frame)`` frames and count bit errors.

    Frames that fail synchronization are kept in the count with bits decided
    pseudorandomly from ``rng`` and logged. Equalized symbols of the first
    ``constellation_frames`` synchronized frames are returned for plotting.
    """
    if bits_target < 1:
        raise ValueError("bits_target must be >= 1")
    n_frames = -(-bits_target // params.bits_per_frame)
    errors = 0
    failed = 0
    constellation = []
    taps = _link_taps(cond, params)
    for i in range(n_frames):
        bits = rng.integers(0, 2, params.bits_per_frame, dtype=np.uint8)
        frame = modulate_frame(bits, params, preamble_seed)
        rx = _apply(frame, cond, taps, rng, params)
        try:
            offset = synchronize(rx, params, preamble_seed)
        except SyncError as exc:
            failed += 1
            log.info("frame %d: sync failure (%s); bits decided pseudorandomly", i, exc)
            guess = rng.integers(0, 2, params.bits_per_frame, dtype=np.uint8)
            errors += int(np.count_nonzero(guess != bits))
            continue
        dem = demodulate(rx, offset, params, preamble_seed, channel=channel, estimator=estimator,
                         erasure_rng=rng)
        errors += int(np.count_nonzero(dem.bits != bits))
        if len(constellation) < constellation_frames:
            constellation.append((i, dem.symbols))
    report = BerReport(bits_total=n_frames * params.bits_per_frame, bits_error=errors,
                       frames=n_frames, frames_sync_failed=failed)
    return LinkRun(report, constellation)


def snr_db_for_ebn0(ebn0_db: float, params: OfdmParams = OfdmParams()) -> float:
    """Per-sample SNR giving ``ebn0_db`` on the active subcarriers."""
    return ebn0_db + 10 * np.log10(params.bits_per_symbol * params.n_active / params.n_fft)


def constellation_rows(frame_index: int, symbols: np.ndarray, params: OfdmParams = OfdmParams()):
    """Yield ``(frame, symbol, subcarrier, i, q)`` records."""
    k = params.subcarriers
    for s, row in enumerate(symbols):
        for j, z in enumerate(row):
            yield frame_index, s, int(k[j]), float(z.real), float(z.imag)


def export_iq(path, samples) -> None:
    """Write samples as interleaved little-endian float32 (I, Q) pairs."""
    np.asarray(samples, np.complex64).astype("<c8").tofile(path)


def load_iq(path) -> np.ndarray:
    return np.fromfile(path, dtype="<c8").astype(complex)
