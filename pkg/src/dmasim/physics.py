"""Mutual-coupling-aware ground-truth channel model of a single-feed DMA.

The receiver channel towards transmitter ``t`` is the coupled-dipole resolvent

    h_t(c, f) = d_t + w_r^T X (I - eta W X)^{-1} w_t,   X = diag(chi_{c_i, i}(f))

where ``W(f)`` is the cavity-mediated coupling between meta-atoms, ``chi`` the
per-element polarizability selected by each configuration bit, ``w_r`` the
meta-atom -> feed coupling and ``w_t`` the free-space transmitter illumination.
At ``eta = 0`` the map is affine in the configuration bits.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

C0 = 299_792_458.0
DEFAULT_BAND = (18.5e9, 20.0e9)
APERTURE_M = 0.15
# Peak loop gain rho(W X) over the probe set at unit coupling strength.
REFERENCE_LOOP_GAIN = 0.45
MAX_LOOP_GAIN = 0.9
MODEL_FORMAT = "dmasim-model"
MODEL_VERSION = 1

DmaConfiguration = np.ndarray


class ModelError(RuntimeError):
    """Model construction or evaluation failed."""


class BandError(ValueError):
    """A frequency lies outside the model's band."""


def as_config(bits, n_atoms: int | None = None) -> DmaConfiguration:
    """Validate ``bits`` and return it as a uint8 vector of 0/1 states."""
    arr = np.asarray(bits)
    if arr.ndim != 1:
        raise ValueError(f"configuration must be one-dimensional, got shape {arr.shape}")
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise ValueError("configuration entries must be exactly 0 or 1")
    if n_atoms is not None and arr.size != n_atoms:
        raise ValueError(f"configuration has {arr.size} bits, model has {n_atoms} meta-atoms")
    return arr.astype(np.uint8)


def config_to_str(config) -> str:
    return "".join("1" if b else "0" for b in as_config(config))


def config_from_str(text: str) -> DmaConfiguration:
    text = text.strip()
    if not text or set(text) - {"0", "1"}:
        raise ValueError(f"not a configuration bitstring: {text!r}")
    return np.frombuffer(text.encode(), dtype=np.uint8) - ord("0")


@dataclass(frozen=True)
class ChannelPair:
    h_des: complex
    h_und: complex

    @property
    def gains_db(self) -> tuple[float, float]:
        return gain_db(self.h_des), gain_db(self.h_und)


@dataclass(frozen=True)
class SpectrumSweep:
    frequencies: np.ndarray
    gains_des_db: np.ndarray
    gains_und_db: np.ndarray

    def __post_init__(self):
        n = len(self.frequencies)
        if len(self.gains_des_db) != n or len(self.gains_und_db) != n:
            raise ValueError("sweep arrays must share one length")
        if n > 1 and np.any(np.diff(self.frequencies) <= 0):
            raise ValueError("sweep frequencies must be strictly increasing")


@dataclass(frozen=True)
class FrequencyOperators:
    """All model operators evaluated at one frequency."""

    coupling: np.ndarray  # (N, N) complex symmetric, zero diagonal
    chi_off: np.ndarray  # (N,)
    chi_on: np.ndarray  # (N,)
    feed: np.ndarray  # (N,) meta-atom -> feed
    tx: np.ndarray  # (N, 2) transmitter -> meta-atom, columns (des, und)
    direct: np.ndarray  # (2,)


def gain_db(h) -> float:
    """Voltage gain ``20 log10 |h|``; ``h == 0`` maps to ``-inf``."""
    mag = abs(complex(h))
    if mag == 0.0:
        return float("-inf")
    return 20.0 * np.log10(mag)


def gains_db(h: np.ndarray) -> np.ndarray:
    """Vectorised :func:`gain_db`."""
    mag = np.abs(h)
    with np.errstate(divide="ignore"):
        return 20.0 * np.log10(mag)


def _lorentzian(res: np.ndarray, width, f: float) -> np.ndarray:
    return width / (res - f - 1j * width)


@dataclass(frozen=True, eq=False)
class PhysicsModel:
    """Synthetic DMA: meta-atom layout, cavity modes, polarizabilities, geometry.

    Instances are immutable; :meth:`operators` is a pure function of frequency.
    """

    seed: int
    n_atoms: int
    mc_strength: float
    band: tuple[float, float]
    positions: np.ndarray  # (N, 2) metres, aperture centred on the origin
    mode_freqs: np.ndarray  # (M,)
    mode_widths: np.ndarray  # (M,)
    mode_shapes: np.ndarray  # (M, N) real, residue weights included
    coupling_norm: float  # maps raw modal sum to unit-strength W
    coupling_scale: float  # safety rescale (<= 1) applied to keep rho(eta W X) <= 0.9
    res_off: np.ndarray  # (N,) Hz
    res_on: np.ndarray  # (N,) Hz
    linewidth: float  # Hz
    feed_gain: float
    feed_decay: float  # metres
    eps_r: float
    tx_positions: np.ndarray  # (2, 3) metres, rows (des, und)
    direct: np.ndarray = field(default_factory=lambda: np.zeros(2, complex))
    feed_position: np.ndarray = field(default_factory=lambda: np.zeros(2))  # (2,) metres
    feed_profile: str = "exponential"  # amplitude vs distance: exp(-r/l) or exp(-(r/l)^2)

    def __post_init__(self):
        for name in ("positions", "mode_freqs", "mode_widths", "mode_shapes", "res_off",
                     "res_on", "tx_positions", "direct", "feed_position"):
            getattr(self, name).setflags(write=False)

    def check_frequency(self, f: float) -> None:
        lo, hi = self.band
        if not lo <= f <= hi:
            raise BandError(f"frequency {f / 1e9:.6f} GHz outside model band "
                            f"[{lo / 1e9:.4f}, {hi / 1e9:.4f}] GHz")

    def coupling(self, f: float) -> np.ndarray:
        g = 1.0 / (self.mode_freqs - f - 1j * self.mode_widths)
        w = (self.mode_shapes.T * g) @ self.mode_shapes
        w = 0.5 * (w + w.T)  # exact symmetry, the product is symmetric only to rounding
        np.fill_diagonal(w, 0.0)
        return w * (self.coupling_norm * self.coupling_scale)

    def operators(self, f: float) -> FrequencyOperators:
        self.check_frequency(f)
        r = np.linalg.norm(self.positions - self.feed_position, axis=1)
        k_cav = 2 * np.pi * f * np.sqrt(self.eps_r) / C0
        u = r / self.feed_decay
        envelope = np.exp(-u * u) if self.feed_profile == "gaussian" else np.exp(-u)
        feed = self.feed_gain * envelope * np.exp(-1j * k_cav * r)
        atoms = np.column_stack([self.positions, np.zeros(self.n_atoms)])
        dist = np.linalg.norm(atoms[:, None, :] - self.tx_positions[None, :, :], axis=-1)
        k0 = 2 * np.pi * f / C0
        tx = (C0 / f) / (4 * np.pi * dist) * np.exp(-1j * k0 * dist)
        return FrequencyOperators(
            coupling=self.coupling(f),
            chi_off=_lorentzian(self.res_off, self.linewidth, f),
            chi_on=_lorentzian(self.res_on, self.linewidth, f),
            feed=feed,
            tx=tx,
            direct=np.asarray(self.direct, complex),
        )

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "seed": self.seed,
            "n_atoms": self.n_atoms,
            "mc_strength": self.mc_strength,
            "band_hz": list(self.band),
            "coupling_norm": self.coupling_norm,
            "coupling_scale": self.coupling_scale,
            "modes": {
                "freq_hz": self.mode_freqs.tolist(),
                "width_hz": self.mode_widths.tolist(),
                "shape": self.mode_shapes.tolist(),
            },
            "positions_m": self.positions.tolist(),
            "polarizability": {
                "res_off_hz": self.res_off.tolist(),
                "res_on_hz": self.res_on.tolist(),
                "linewidth_hz": self.linewidth,
            },
            "feed": {"gain": self.feed_gain, "decay_m": self.feed_decay, "eps_r": self.eps_r,
                     "position_m": self.feed_position.tolist(), "profile": self.feed_profile},
            "transmitters_m": {"des": self.tx_positions[0].tolist(),
                               "und": self.tx_positions[1].tolist()},
            "direct": [[z.real, z.imag] for z in np.asarray(self.direct, complex)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhysicsModel":
        if d.get("format") != MODEL_FORMAT:
            raise ModelError(f"not a {MODEL_FORMAT} document")
        if d.get("version") != MODEL_VERSION:
            raise ModelError(f"unsupported model version {d.get('version')}")
        try:
            return cls(
                seed=int(d["seed"]),
                n_atoms=int(d["n_atoms"]),
                mc_strength=float(d["mc_strength"]),
                band=tuple(float(x) for x in d["band_hz"]),
                positions=np.array(d["positions_m"], float).reshape(-1, 2),
                mode_freqs=np.array(d["modes"]["freq_hz"], float),
                mode_widths=np.array(d["modes"]["width_hz"], float),
                mode_shapes=np.array(d["modes"]["shape"], float).reshape(len(d["modes"]["freq_hz"]), -1),
                coupling_norm=float(d["coupling_norm"]),
                coupling_scale=float(d["coupling_scale"]),
                res_off=np.array(d["polarizability"]["res_off_hz"], float),
                res_on=np.array(d["polarizability"]["res_on_hz"], float),
                linewidth=float(d["polarizability"]["linewidth_hz"]),
                feed_gain=float(d["feed"]["gain"]),
                feed_decay=float(d["feed"]["decay_m"]),
                eps_r=float(d["feed"]["eps_r"]),
                tx_positions=np.array([d["transmitters_m"]["des"], d["transmitters_m"]["und"]], float),
                direct=np.array([complex(*z) for z in d["direct"]]),
                feed_position=np.array(d["feed"].get("position_m", [0.0, 0.0]), float),
                feed_profile=str(d["feed"].get("profile", "exponential")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"malformed model document: {exc}") from exc


@dataclass(frozen=True, eq=False)
class StaticModel:
    """Frequency-independent model with explicitly given operators.

    Useful for hand-built instances and closed-form checks.
    """

    coupling: np.ndarray
    chi_off: np.ndarray
    chi_on: np.ndarray
    feed: np.ndarray
    tx: np.ndarray
    mc_strength: float = 1.0
    direct: np.ndarray = field(default_factory=lambda: np.zeros(2, complex))
    band: tuple[float, float] = (0.0, float("inf"))

    @property
    def n_atoms(self) -> int:
        return len(self.feed)

    def check_frequency(self, f: float) -> None:
        lo, hi = self.band
        if not lo <= f <= hi:
            raise BandError(f"frequency {f} outside band {self.band}")

    def operators(self, f: float) -> FrequencyOperators:
        self.check_frequency(f)
        return FrequencyOperators(
            coupling=np.asarray(self.coupling, complex),
            chi_off=np.asarray(self.chi_off, complex),
            chi_on=np.asarray(self.chi_on, complex),
            feed=np.asarray(self.feed, complex),
            tx=np.asarray(self.tx, complex).reshape(self.n_atoms, 2),
            direct=np.asarray(self.direct, complex),
        )


def _min_spaced_positions(rng, n, aperture, spacing, keepout):
    half = aperture / 2
    pts = []
    attempts = 0
    while len(pts) < n:
        attempts += 1
        if attempts > 200_000:
            raise ModelError(f"cannot place {n} meta-atoms with {spacing * 1e3:.1f} mm spacing")
        p = rng.uniform(-half, half, 2)
        if np.hypot(*p) < keepout:
            continue
        if pts and np.min(np.hypot(*(np.asarray(pts) - p).T)) < spacing:
            continue
        pts.append(p)
    return np.asarray(pts)


def _tx_position(angle_deg: float, distance: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    return np.array([distance * np.sin(a), 0.0, distance * np.cos(a)])


def _probe_frequencies(band, mode_freqs, n_grid=32):
    lo, hi = band
    inside = mode_freqs[(mode_freqs >= lo) & (mode_freqs <= hi)]
    return np.unique(np.concatenate([np.linspace(lo, hi, n_grid), inside]))


def _probe_configs(rng, n):
    cfgs = rng.integers(0, 2, size=(2, n), dtype=np.uint8)
    cfgs[0] = 1
    return cfgs


def build_model(
    seed: int,
    n_atoms: int = 96,
    mc_strength: float = 1.0,
    band: Sequence[float] = DEFAULT_BAND,
    *,
    n_modes: int = 120,
    mode_width_range: tuple[float, float] = (2e6, 20e6),
    linewidth: float = 250e6,
    off_state_shift: float = 3.5e9,
    resonance_jitter: float = 150e6,
    feed_decay: float = 0.01,
    feed_gain: float = 30.0,
    feed_position: Sequence[float] = (0.0, 0.0),
    feed_profile: str = "exponential",
    eps_r: float = 3.0,
    des_angle_deg: float = -20.0,
    des_distance: float = 1.0,
    und_angle_deg: float = 30.0,
    und_distance: float = 1.2,
    direct: Sequence[complex] = (0.0, 0.0),
) -> PhysicsModel:
    """Synthesize a deterministic DMA ground truth.

    Cavity modes are random plane-wave superpositions sampled at the meta-atom
    positions, with residues proportional to their linewidth so every mode peaks
    at a comparable loop gain. ``W`` is normalized so that unit ``mc_strength``
    gives a peak loop gain of 0.45 over the probe set; stronger settings that
    would exceed 0.9 are rescaled and the factor is stored as ``coupling_scale``.
    """
    if n_atoms < 1:
        raise ValueError("n_atoms must be >= 1")
    if mc_strength < 0:
        raise ValueError("mc_strength must be >= 0")
    lo, hi = float(band[0]), float(band[1])
    if not 0 < lo < hi:
        raise ValueError(f"invalid band {band}")

    rng = np.random.default_rng(seed)
    spacing = min(8e-3, 0.5 * APERTURE_M / np.sqrt(n_atoms))
    positions = _min_spaced_positions(rng, n_atoms, APERTURE_M, spacing, keepout=spacing / 2)

    mode_freqs = rng.uniform(lo, hi, n_modes)
    kmin, kmax = mode_width_range
    mode_widths = np.exp(rng.uniform(np.log(kmin), np.log(kmax), n_modes))
    n_waves = 8
    k_mode = 2 * np.pi * mode_freqs * np.sqrt(eps_r) / C0
    angles = rng.uniform(0, 2 * np.pi, (n_modes, n_waves))
    phases = rng.uniform(0, 2 * np.pi, (n_modes, n_waves))
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    proj = np.einsum("mpk,nk->mpn", dirs, positions)
    shapes = np.cos(k_mode[:, None, None] * proj + phases[..., None]).sum(axis=1)
    shapes *= np.sqrt(2.0 / n_waves) / np.sqrt(n_atoms)
    shapes *= np.sqrt(mode_widths / kmax)[:, None]

    centre = 0.5 * (lo + hi)
    res_on = centre + rng.normal(0.0, resonance_jitter, n_atoms)
    res_off = centre + off_state_shift + rng.normal(0.0, resonance_jitter, n_atoms)

    model = PhysicsModel(
        seed=int(seed),
        n_atoms=int(n_atoms),
        mc_strength=float(mc_strength),
        band=(lo, hi),
        positions=positions,
        mode_freqs=mode_freqs,
        mode_widths=mode_widths,
        mode_shapes=shapes,
        coupling_norm=1.0,
        coupling_scale=1.0,
        res_off=res_off,
        res_on=res_on,
        linewidth=float(linewidth),
        feed_gain=float(feed_gain),
        feed_decay=float(feed_decay),
        eps_r=float(eps_r),
        tx_positions=np.array([_tx_position(des_angle_deg, des_distance),
                               _tx_position(und_angle_deg, und_distance)]),
        direct=np.asarray(direct, complex),
        feed_position=np.asarray(feed_position, float).reshape(2),
        feed_profile=feed_profile,
    )
    if n_atoms < 2:
        return model

    probe_f = _probe_frequencies((lo, hi), mode_freqs)
    probe_c = _probe_configs(rng, n_atoms)
    eigs = loop_eigenvalues(model, probe_f, probe_c)
    raw_peak = float(np.abs(eigs).max())
    if raw_peak == 0:
        return model
    norm = REFERENCE_LOOP_GAIN / raw_peak
    peak = mc_strength * REFERENCE_LOOP_GAIN
    scale = 1.0 if peak <= MAX_LOOP_GAIN else MAX_LOOP_GAIN / peak
    # I - eta W X is singular iff some eigenvalue of eta W X equals 1.
    for _ in range(5):
        distance = np.abs(1.0 - mc_strength * norm * scale * eigs).min(axis=1)
        if distance.min() > 1e-9:
            return _replace(model, coupling_norm=norm, coupling_scale=scale)
        scale *= 0.5
    bad = probe_f[int(np.argmin(distance)) // len(probe_c)]
    raise ModelError(f"resolvent singular at {bad / 1e9:.6f} GHz after rescaling")


def _replace(model: PhysicsModel, **changes) -> PhysicsModel:
    d = {k: getattr(model, k) for k in model.__dataclass_fields__}
    d.update(changes)
    return PhysicsModel(**d)


def loop_eigenvalues(model, freqs, configs) -> np.ndarray:
    """Eigenvalues of ``W X`` for every (frequency, configuration) pair.

    Returns an array of shape (len(freqs) * len(configs), N), frequency-major.
    """
    configs = np.asarray(configs, bool)
    out = []
    for f in freqs:
        ops = model.operators(f)
        X = np.where(configs, ops.chi_on, ops.chi_off)
        out.append(np.linalg.eigvals(ops.coupling[None, :, :] * X[:, None, :]))
    return np.concatenate(out)


def max_loop_gain(model, freqs, configs) -> float:
    """Largest spectral radius of ``W X`` over the given frequencies and configs."""
    return float(np.abs(loop_eigenvalues(model, freqs, configs)).max())


def _resolve(ops: FrequencyOperators, eta: float, configs: np.ndarray) -> np.ndarray:
    """Channels for a batch of configurations; returns (K, 2) complex."""
    X = np.where(configs.astype(bool), ops.chi_on, ops.chi_off)
    n = X.shape[1]
    if eta == 0.0:
        return (X * ops.feed) @ ops.tx + ops.direct
    A = np.eye(n) - eta * ops.coupling[None, :, :] * X[:, None, :]
    try:
        G = np.linalg.solve(A, np.broadcast_to(ops.tx, (len(X), n, 2)))
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(A)
        raise ModelError(f"singular resolvent (max condition number {np.max(cond):.3g})") from exc
    return np.einsum("n,kn,knt->kt", ops.feed, X, G) + ops.direct


def _resolve_one(ops: FrequencyOperators, eta: float, config: np.ndarray) -> np.ndarray:
    X = np.where(config.astype(bool), ops.chi_on, ops.chi_off)
    if eta == 0.0:
        return (X * ops.feed) @ ops.tx + ops.direct
    A = np.eye(len(X)) - eta * ops.coupling * X[None, :]
    try:
        G = np.linalg.solve(A, ops.tx)
    except np.linalg.LinAlgError as exc:
        raise ModelError(f"singular resolvent (condition number {np.linalg.cond(A):.3g})") from exc
    return (ops.feed * X) @ G + ops.direct


def channel(model, config, f: float) -> ChannelPair:
    """Desired and undesired channels for one configuration at frequency ``f``."""
    config = as_config(config, model.n_atoms)
    ops = model.operators(f)
    h = _resolve_one(ops, model.mc_strength, config)
    return ChannelPair(complex(h[0]), complex(h[1]))


def channels(model, configs, f: float, chunk: int = 256) -> np.ndarray:
    """Batch evaluation; ``configs`` is (K, N), result is (K, 2) complex."""
    configs = np.atleast_2d(np.asarray(configs, dtype=np.uint8))
    if configs.shape[1] != model.n_atoms:
        raise ValueError(f"configurations have {configs.shape[1]} bits, model has {model.n_atoms}")
    ops = model.operators(f)
    out = np.empty((len(configs), 2), complex)
    for i in range(0, len(configs), chunk):
        out[i:i + chunk] = _resolve(ops, model.mc_strength, configs[i:i + chunk])
    return out


def channel_response(model, config, freqs) -> np.ndarray:
    """Channels for one configuration over a frequency grid; (F, 2) complex."""
    config = as_config(config, model.n_atoms)
    freqs = np.asarray(freqs, float)
    out = np.empty((len(freqs), 2), complex)
    for i, f in enumerate(freqs):
        out[i] = _resolve_one(model.operators(f), model.mc_strength, config)
    return out


def sweep(model, config, grid) -> SpectrumSweep:
    grid = np.asarray(grid, float)
    if grid.size == 0:
        raise ValueError("frequency grid is empty")
    for f in (grid.min(), grid.max()):
        model.check_frequency(f)
    h = channel_response(model, config, grid)
    return SpectrumSweep(grid, gains_db(h[:, 0]), gains_db(h[:, 1]))


class ModelOracle:
    """Black-box channel oracle over a model, caching operators per frequency."""

    def __init__(self, model, cache_size: int = 8):
        self.model = model
        self._cache: OrderedDict[float, FrequencyOperators] = OrderedDict()
        self._cache_size = cache_size

    @property
    def n_atoms(self) -> int:
        return self.model.n_atoms

    @property
    def band(self):
        return self.model.band

    def _ops(self, f: float) -> FrequencyOperators:
        f = float(f)
        ops = self._cache.get(f)
        if ops is None:
            ops = self.model.operators(f)
            self._cache[f] = ops
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return ops

    def __call__(self, config, f: float) -> ChannelPair:
        h = _resolve_one(self._ops(f), self.model.mc_strength, np.asarray(config))
        return ChannelPair(complex(h[0]), complex(h[1]))

    def batch(self, configs, f: float) -> np.ndarray:
        configs = np.atleast_2d(np.asarray(configs, dtype=np.uint8))
        ops = self._ops(f)
        out = np.empty((len(configs), 2), complex)
        for i in range(0, len(configs), 256):
            out[i:i + 256] = _resolve(ops, self.model.mc_strength, configs[i:i + 256])
        return out


def save_model(model: PhysicsModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=1))


def load_model(path) -> PhysicsModel:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: invalid JSON ({exc})") from exc
    return PhysicsModel.from_dict(doc)
