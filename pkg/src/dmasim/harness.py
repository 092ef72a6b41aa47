"""Experiment runner: optimize strategies, sweep spectra, run jammed OFDM links.

Every stochastic task draws from its own generator, derived from the master
seed and a task key, so results do not depend on execution order or on the
number of worker threads.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from dmasim import __version__
from dmasim import ofdm, optimize, physics
from dmasim.optimize import CodebookEntry, Strategy
from dmasim.physics import BandError, ModelError

log = logging.getLogger(__name__)

OUTPUT_ENV = "DMASIM_OUTPUT_DIR"
MODEL_FILE = "model.json"
CODEBOOK_FILE = "codebook.csv"
TRACES_FILE = "traces.csv"
SPECTRUM_FILE = "spectrum.csv"
BER_FILE = "ber.csv"
MANIFEST_FILE = "manifest.json"

BER_FIELDS = ["freq_ghz", "strategy", "jam_rel_db", "bits_total", "bits_error", "ber", "valid"]
SPECTRUM_FIELDS = ["freq_hz", "gain_des_db", "gain_und_db", "strategy", "f_op_ghz"]
CONSTELLATION_FIELDS = ["strategy", "jam_rel_db", "frame", "symbol", "subcarrier", "i", "q"]

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_MODEL = 4
EXIT_SYNC = 5
EXIT_IO = 6


class ConfigError(ValueError):
    """Invalid scenario or configuration file."""


class MissingArtifactError(FileNotFoundError):
    """A prerequisite output of an earlier subcommand is absent."""


def _default_jam_grid():
    return [float(x) for x in range(-36, 31, 6)]


@dataclass
class Scenario:
    operating_freqs_ghz: list = field(default_factory=lambda: [18.75, 19.25, 19.75])
    strategies: list = field(default_factory=lambda: [s.value for s in Strategy])
    jam_rel_db_grid: list = field(default_factory=_default_jam_grid)
    snr_db: float = 25.0
    master_seed: int = 7
    n_atoms: int = 96
    mc_strength: float = 1.0
    band_ghz: list = field(default_factory=lambda: [18.5, 20.0])
    bits_target: int = 167_200
    samples: int = optimize.DEFAULT_SAMPLES
    max_sweeps: int = optimize.DEFAULT_SWEEPS
    spectrum_span_mhz: float = 250.0
    spectrum_points: int = 1001
    jam_offset_bins: float = 2.5
    constellation_frames: int = 1
    estimator: str = "preamble"
    workers: int = 1
    output_dir: str | None = None
    physics: dict = field(default_factory=dict)  # extra build_model keywords
    ofdm: dict = field(default_factory=dict)  # OfdmParams overrides

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.operating_freqs_ghz or not self.jam_rel_db_grid or not self.strategies:
            raise ConfigError("operating_freqs_ghz, strategies and jam_rel_db_grid must be non-empty")
        try:
            self.strategies = [Strategy(s).value for s in self.strategies]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if len(self.band_ghz) != 2 or not 0 < self.band_ghz[0] < self.band_ghz[1]:
            raise ConfigError(f"invalid band_ghz {self.band_ghz}")
        lo, hi = self.band_ghz
        for f in self.operating_freqs_ghz:
            if not lo <= f <= hi:
                raise ConfigError(f"operating frequency {f} GHz outside band [{lo}, {hi}] GHz")
        for name in ("n_atoms", "bits_target", "samples", "spectrum_points", "workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_sweeps < 0 or self.constellation_frames < 0:
            raise ConfigError("max_sweeps and constellation_frames must be >= 0")
        if self.mc_strength < 0:
            raise ConfigError("mc_strength must be >= 0")
        if np.isnan(self.snr_db) or self.snr_db == float("-inf"):
            raise ConfigError("snr_db must be finite or +inf")
        if self.estimator not in ("preamble", "data_aided"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        try:
            self.ofdm_params()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad ofdm overrides: {exc}") from exc
        unknown = set(self.physics) - _BUILD_KEYWORDS
        if unknown:
            raise ConfigError(f"unknown physics overrides {sorted(unknown)}")

    @property
    def band_hz(self) -> tuple[float, float]:
        return self.band_ghz[0] * 1e9, self.band_ghz[1] * 1e9

    def ofdm_params(self) -> ofdm.OfdmParams:
        return ofdm.OfdmParams(**self.ofdm)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


_BUILD_KEYWORDS = {
    "n_modes", "mode_width_range", "linewidth", "off_state_shift", "resonance_jitter",
    "feed_decay", "feed_gain", "feed_position", "feed_profile", "eps_r", "des_angle_deg",
    "des_distance", "und_angle_deg", "und_distance", "direct",
}


def load_scenario(path) -> Scenario:
    """Read a JSON config file; ``None`` gives the default scenario."""
    if path is None:
        return Scenario()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return Scenario.from_dict(data)


def resolve_output_dir(scn: Scenario, override: str | None = None) -> Path:
    """Command-line flag, then environment variable, then config, then ``./dmasim_out``."""
    out = override or os.environ.get(OUTPUT_ENV) or scn.output_dir or "dmasim_out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- seeding ----------------------------------------------------------------

def task_rng(master_seed: int, *key) -> np.random.Generator:
    """Generator for one task, independent of scheduling and of other tasks."""
    words = [zlib.crc32(str(k).encode()) for k in key]
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=words))


def _fkey(f_hz: float) -> str:
    return f"{f_hz / 1e3:.0f}kHz"


def _jkey(jam: float) -> str:
    return f"{jam:.6g}dB"


# -- stages -----------------------------------------------------------------

def build_scenario_model(scn: Scenario) -> physics.PhysicsModel:
    return physics.build_model(scn.master_seed, scn.n_atoms, scn.mc_strength, scn.band_hz,
                               **_physics_kwargs(scn))


def _physics_kwargs(scn):
    kw = dict(scn.physics)
    for k in ("mode_width_range", "feed_position"):
        if k in kw:
            kw[k] = tuple(kw[k])
    if "direct" in kw:
        # JSON has no complex type: each entry is a number or an [re, im] pair
        kw["direct"] = tuple(complex(*z) if isinstance(z, (list, tuple)) else complex(z) for z in kw["direct"])
    return kw


def load_or_build_model(scn: Scenario, out: Path) -> physics.PhysicsModel:
    path = out / MODEL_FILE
    if path.exists():
        model = physics.load_model(path)
        expected = (scn.master_seed, scn.n_atoms, scn.mc_strength, scn.band_hz)
        found = (model.seed, model.n_atoms, model.mc_strength, model.band)
        if found != expected:
            raise ConfigError(f"{path} was built for (seed, N, eta, band) = {found}, "
                              f"config asks for {expected}; use another output directory")
        log.info("reloaded model from %s", path)
        return model
    model = build_scenario_model(scn)
    physics.save_model(model, path)
    log.info("built model seed=%d N=%d eta=%g -> %s", model.seed, model.n_atoms, model.mc_strength, path)
    return model


def optimize_frequency(scn: Scenario, oracle, f_hz: float, strategies=None):
    """Run the requested strategies at one frequency. OPT, MAX and LIN share one sample set."""
    strategies = [Strategy(s) for s in (strategies or scn.strategies)]
    samples = None
    if any(s is not Strategy.RAND for s in strategies):
        samples = optimize.draw_samples(oracle, oracle.n_atoms, f_hz, scn.samples,
                                        task_rng(scn.master_seed, "samples", _fkey(f_hz)))
    results = {}
    for s in strategies:
        rng = task_rng(scn.master_seed, "strategy", s.value, _fkey(f_hz))
        results[s.value] = optimize.optimize_strategy(s, oracle, f_hz, rng, samples=samples,
                                                      k=scn.samples, max_sweeps=scn.max_sweeps)
    return results


def spectrum_grid(scn: Scenario, f_hz: float) -> np.ndarray:
    lo, hi = scn.band_hz
    half = scn.spectrum_span_mhz * 1e6
    grid = np.linspace(f_hz - half, f_hz + half, scn.spectrum_points)
    return grid[(grid >= lo) & (grid <= hi)]


def spectrum_rows(model, entry: CodebookEntry, grid):
    sw = physics.sweep(model, entry.config, grid)
    for f, gd, gu in zip(sw.frequencies, sw.gains_des_db, sw.gains_und_db):
        yield [_num(f), _num(gd), _num(gu), entry.strategy, _num(entry.f_op_hz / 1e9)]


def link_condition(scn: Scenario, model, config, f_hz: float, jam_rel_db: float) -> ofdm.LinkCondition:
    params = scn.ofdm_params()
    offset = scn.jam_offset_bins * params.spacing
    h_k = physics.channel_response(model, config, f_hz + params.bin_frequencies())[:, 0]
    h_jam = physics.channel(model, config, f_hz + offset).h_und
    return ofdm.LinkCondition(h_des_k=h_k, h_und_jam=h_jam, jam_rel_db=jam_rel_db, snr_db=scn.snr_db,
                              jam_offset_hz=offset)


def run_one_link(scn: Scenario, cond: ofdm.LinkCondition, strategy: str, f_hz: float,
                 jam_rel_db: float) -> ofdm.LinkRun:
    rng = task_rng(scn.master_seed, "link", strategy, _fkey(f_hz), _jkey(jam_rel_db))
    return ofdm.run_link(scn.bits_target, scn.ofdm_params(), cond, rng,
                         preamble_seed=scn.master_seed, constellation_frames=scn.constellation_frames,
                         estimator=scn.estimator)


# -- file helpers -----------------------------------------------------------

def _num(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def ber_row(f_hz: float, strategy: str, jam: float, rep: ofdm.BerReport):
    return [_num(f_hz / 1e9), strategy, _num(jam), rep.bits_total, rep.bits_error, _num(rep.ber),
            int(rep.statistically_valid)]


def constellation_records(strategy: str, jam: float, run: ofdm.LinkRun, params: ofdm.OfdmParams):
    for frame_idx, symbols in run.constellation:
        for fr, s, k, i, q in ofdm.constellation_rows(frame_idx, symbols, params):
            yield [strategy, _num(jam), fr, s, k, f"{i:.9g}", f"{q:.9g}"]


def constellation_path(out: Path, f_hz: float) -> Path:
    return out / f"constellation_{f_hz / 1e9:.4f}GHz.csv"


def read_codebook_or_fail(out: Path) -> list[CodebookEntry]:
    path = out / CODEBOOK_FILE
    if not path.exists() or not (out / MODEL_FILE).exists():
        raise MissingArtifactError(f"no codebook/model in {out}; run the 'optimize' subcommand first")
    return optimize.read_codebook(path)


def upsert_codebook(out: Path, new: CodebookEntry) -> None:
    path = out / CODEBOOK_FILE
    entries = optimize.read_codebook(path) if path.exists() else []
    entries = [e for e in entries
               if not (e.strategy == new.strategy and np.isclose(e.f_op_hz, new.f_op_hz, rtol=0, atol=1.0))]
    entries.append(new)
    entries.sort(key=lambda e: (e.f_op_hz, [s.value for s in Strategy].index(e.strategy)))
    optimize.write_codebook(path, entries)


def _require_entry(entries, strategy, f_hz):
    entry = optimize.lookup(entries, strategy, f_hz)
    if entry is None:
        raise MissingArtifactError(f"no codebook entry for {strategy} at {f_hz / 1e9:g} GHz; "
                                   f"run the 'optimize' subcommand first")
    return entry


# -- full experiment --------------------------------------------------------

@dataclass
class ExperimentOutput:
    output_dir: Path
    codebook: list
    ber_rows: list
    manifest: dict


def run_full_experiment(scn: Scenario, out: Path) -> ExperimentOutput:
    """All stages for every operating frequency; outputs go to ``out``.

    On failure the manifest is still written, with the stages completed so far.
    """
    manifest = {
        "tool": "dmasim",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scenario": scn.to_dict(),
        "seeds": {"master_seed": scn.master_seed, "model_seed": scn.master_seed,
                  "task_keys": "SeedSequence(master_seed, spawn_key=crc32 of task key parts)"},
        "stages_completed": [],
        "timings_s": {},
        "sync_failures": [],
        "status": "running",
    }
    params = scn.ofdm_params()
    freqs = [f * 1e9 for f in scn.operating_freqs_ghz]

    def stage(name, t0):
        manifest["stages_completed"].append(name)
        manifest["timings_s"][name] = round(time.perf_counter() - t0, 3)

    try:
        t0 = time.perf_counter()
        model = load_or_build_model(scn, out)
        manifest["model"] = {"file": MODEL_FILE, "coupling_scale": model.coupling_scale}
        stage("model", t0)

        t0 = time.perf_counter()
        oracle = physics.ModelOracle(model)
        entries, traces = [], []
        for f in freqs:
            results = optimize_frequency(scn, oracle, f)
            for s in scn.strategies:
                res = results[s]
                entries.append(CodebookEntry.from_result(res, f, oracle(res.config, f)))
                traces.append((f, res))
        optimize.write_codebook(out / CODEBOOK_FILE, entries)
        optimize.write_traces(out / TRACES_FILE, traces)
        stage("optimize", t0)

        t0 = time.perf_counter()
        rows = []
        for e in entries:
            rows.extend(spectrum_rows(model, e, spectrum_grid(scn, e.f_op_hz)))
        _write_csv(out / SPECTRUM_FILE, SPECTRUM_FIELDS, rows)
        stage("spectrum", t0)

        t0 = time.perf_counter()
        tasks = []
        for e in entries:
            for jam in scn.jam_rel_db_grid:
                tasks.append((e, float(jam)))

        def work(task):
            e, jam = task
            cond = link_condition(scn, model, e.config, e.f_op_hz, jam)
            return run_one_link(scn, cond, e.strategy, e.f_op_hz, jam)

        if scn.workers > 1:
            with ThreadPoolExecutor(max_workers=scn.workers) as pool:
                runs = list(pool.map(work, tasks))
        else:
            runs = [work(t) for t in tasks]

        ber_rows = []
        per_freq = {f: [] for f in freqs}
        for (e, jam), run in zip(tasks, runs):
            ber_rows.append(ber_row(e.f_op_hz, e.strategy, jam, run.report))
            per_freq[_match_freq(freqs, e.f_op_hz)].extend(constellation_records(e.strategy, jam, run, params))
            if run.report.frames_sync_failed:
                manifest["sync_failures"].append({"freq_ghz": e.f_op_hz / 1e9, "strategy": e.strategy,
                                                  "jam_rel_db": jam,
                                                  "frames": run.report.frames_sync_failed})
        _write_csv(out / BER_FILE, BER_FIELDS, ber_rows)
        if scn.constellation_frames:
            for f, recs in per_freq.items():
                _write_csv(constellation_path(out, f), CONSTELLATION_FIELDS, recs)
        stage("links", t0)
        manifest["status"] = "ok"
    except Exception as exc:
        manifest["status"] = "failed"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        with open(out / MANIFEST_FILE, "w") as fh:
            json.dump(manifest, fh, indent=2, default=str)
    return ExperimentOutput(out, entries, ber_rows, manifest)


def _match_freq(freqs, f):
    return min(freqs, key=lambda g: abs(g - f))


# -- subcommands ------------------------------------------------------------

def cmd_optimize(scn, out, args):
    f = args.f_op * 1e9
    _check_f(scn, f)
    model = load_or_build_model(scn, out)
    oracle = physics.ModelOracle(model)
    res = optimize_frequency(scn, oracle, f, [args.strategy])[Strategy(args.strategy).value]
    entry = CodebookEntry.from_result(res, f, oracle(res.config, f))
    upsert_codebook(out, entry)
    print(f"{entry.strategy} @ {args.f_op:g} GHz: cost {entry.cost_db:.2f} dB "
          f"(des {entry.gain_des_db:.2f} dB, und {entry.gain_und_db:.2f} dB, "
          f"{entry.oracle_calls} oracle calls)")
    return EXIT_OK


def cmd_sweep(scn, out, args):
    f = args.f_op * 1e9
    _check_f(scn, f)
    entry = _require_entry(read_codebook_or_fail(out), args.strategy, f)
    model = load_or_build_model(scn, out)
    path = out / f"spectrum_{entry.strategy}_{args.f_op:.4f}GHz.csv"
    rows = list(spectrum_rows(model, entry, spectrum_grid(scn, f)))
    _write_csv(path, SPECTRUM_FIELDS, rows)
    und = np.array([float(r[2]) for r in rows])
    fr = np.array([float(r[0]) for r in rows])
    print(f"wrote {path}; undesired minimum {und.min():.2f} dB at {fr[np.argmin(und)] / 1e9:.6f} GHz")
    return EXIT_OK


def cmd_run_link(scn, out, args):
    f = args.f_op * 1e9
    _check_f(scn, f)
    entry = _require_entry(read_codebook_or_fail(out), args.strategy, f)
    model = load_or_build_model(scn, out)
    cond = link_condition(scn, model, entry.config, f, args.jam_rel_db)
    run = run_one_link(scn, cond, entry.strategy, f, args.jam_rel_db)
    rep = run.report
    if rep.frames and rep.frames_sync_failed == rep.frames:
        raise ofdm.SyncError(f"synchronization failed on all {rep.frames} frames")
    tag = f"{entry.strategy}_{args.f_op:.4f}GHz_{args.jam_rel_db:+g}dB"
    _write_csv(out / f"ber_{tag}.csv", BER_FIELDS, [ber_row(f, entry.strategy, args.jam_rel_db, rep)])
    if run.constellation:
        _write_csv(out / f"constellation_{tag}.csv", CONSTELLATION_FIELDS,
                   constellation_records(entry.strategy, args.jam_rel_db, run, scn.ofdm_params()))
    print(f"{entry.strategy} @ {args.f_op:g} GHz, jam {args.jam_rel_db:+g} dB: "
          f"{rep.bits_error}/{rep.bits_total} errors, BER {rep.ber:.3e}"
          f"{'' if rep.statistically_valid else ' (fewer than 100 errors)'}"
          f", sync failures {rep.frames_sync_failed}")
    return EXIT_OK


def cmd_full(scn, out, args):
    res = run_full_experiment(scn, out)
    print(f"wrote {len(res.ber_rows)} BER rows and {len(res.codebook)} codebook entries to {out}")
    return EXIT_OK


def _check_f(scn, f):
    lo, hi = scn.band_hz
    if not lo <= f <= hi:
        raise ConfigError(f"f_op {f / 1e9:g} GHz outside band [{lo / 1e9:g}, {hi / 1e9:g}] GHz")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmasim", description=__doc__.splitlines()[0])
    p.add_argument("--output-dir", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
    p.add_argument("--workers", type=int, help="worker threads for link simulations")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, strategy=True, freq=True):
        sp.add_argument("config", nargs="?", help="JSON config file (default scenario if omitted)")
        if strategy:
            sp.add_argument("--strategy", required=True, choices=[s.value for s in Strategy])
        if freq:
            sp.add_argument("--f-op", type=float, required=True, help="operating frequency, GHz")

    sp = sub.add_parser("optimize", help="optimize one strategy and store it in the codebook")
    common(sp)
    sp.set_defaults(func=cmd_optimize)
    sp = sub.add_parser("sweep-spectrum", help="channel gains around f_op for a codebook entry")
    common(sp)
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("run-link", help="OFDM link with a jammer for a codebook entry")
    common(sp)
    sp.add_argument("--jam-rel-db", type=float, required=True, help="jammer-to-signal ratio, dB")
    sp.set_defaults(func=cmd_run_link)
    sp = sub.add_parser("full-experiment", help="every stage for the whole scenario")
    common(sp, strategy=False, freq=False)
    sp.set_defaults(func=cmd_full)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        scn = load_scenario(args.config)
        if args.seed is not None:
            scn.master_seed = args.seed
        if args.workers is not None:
            scn.workers = args.workers
        scn.validate()
        out = resolve_output_dir(scn, args.output_dir)
        return args.func(scn, out, args)
    except (ConfigError, BandError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except ofdm.SyncError as exc:
        print(f"sync failure: {exc}", file=sys.stderr)
        return EXIT_SYNC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
