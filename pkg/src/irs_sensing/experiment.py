"""Run the full sweep of schemes, SNR points and seeds and write the figure CSVs.

Output layout under the output directory::

    fig3_channel_gain.csv   received strength vs SNR, with and without IRS
    fig4_standalone.csv     accuracy per round, standalone, IRS on/off
    fig5_decoupled.csv      accuracy per round, decoupled, IRS on/off
    fig6_comparison.csv     final-round metrics per scheme (IRS on) vs SNR
    fig7_pd.csv             same rows as fig6; plotted as Pd vs SNR
    runs/*.csv              per-node round history of every run
    checkpoints/*.irsp      final parameters of every run
    series/*.csv            plot-ready x,y files from :func:`emit_plot_data`
"""

import csv
import logging
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import metrics
from .channel import GEOMETRIES, ChannelEnv, received_strength_db
from .collab import RUNNERS, ObservationTopology, RunSpec
from .config import ExperimentConfig
from .neuralnet import params_to_bytes
from .simgen import make_dataset

log = logging.getLogger(__name__)

FIG3 = "fig3_channel_gain.csv"
FIG3_COLUMNS = ["series", "snr_db", "seed_count", "received_db"]
FIGURES = {
    "fig4_standalone.csv": "standalone",
    "fig5_decoupled.csv": "decoupled",
}
FIG6 = "fig6_comparison.csv"
FIG7 = "fig7_pd.csv"


class PlotDataError(RuntimeError):
    pass


@dataclass(frozen=True)
class Cell:
    scheme: str
    irs: bool
    snr_db: float
    seed: int

    @property
    def label(self):
        return f"{self.scheme}_irs" if self.irs else f"{self.scheme}_no_irs"

    @property
    def stem(self):
        return f"{self.label}_snr{self.snr_db:g}_seed{self.seed}"


def _streams(seed):
    """Independent generators for geometry, topology, data and the gain sweep.

    The data stream does not depend on SNR or on the IRS switch, so curves
    that differ only in those settings share their random draws.
    """
    geo, topo, data, gain = np.random.SeedSequence(seed).spawn(4)
    return {"geometry": geo, "topology": topo, "data": data, "gain": gain}


def build_env(cfg: ExperimentConfig, seed, irs_enabled=True) -> ChannelEnv:
    ch = cfg.channel
    rng = np.random.default_rng(_streams(seed)["geometry"])
    make = GEOMETRIES[ch.geometry]
    env = make(cfg.spectrum.n_bands, ch.n_su, rng, irs=ch.irs, pathloss=ch.pathloss,
               shadowing=ch.shadowing, **ch.geometry_params)
    return env.with_irs(irs_enabled)


def build_topology(cfg: ExperimentConfig, seed) -> ObservationTopology:
    t = cfg.topology
    J, N = cfg.channel.n_su, cfg.spectrum.n_bands
    if t.kind == "full":
        return ObservationTopology.full(J, N)
    if t.kind == "masks":
        return ObservationTopology(np.array(t.masks))
    rng = np.random.default_rng(_streams(seed)["topology"])
    return ObservationTopology.contiguous_windows(J, N, rng, width=t.width)


def build_dataset(cfg: ExperimentConfig, seed, snr_db, irs_enabled):
    env = build_env(cfg, seed, irs_enabled)
    rng = np.random.default_rng(_streams(seed)["data"])
    return make_dataset(env, replace(cfg.spectrum, snr_db=snr_db), cfg.n_train, cfg.n_test, rng)


def run_cell(cfg: ExperimentConfig, cell: Cell):
    """Train one (scheme, IRS, SNR, seed) combination; returns history and checkpoint bytes."""
    ds = build_dataset(cfg, cell.seed, cell.snr_db, cell.irs)
    dtype = cfg.network.dtype
    spec = RunSpec(cfg.net_config(), cfg.training, build_topology(cfg, cell.seed),
                   ds.features("train", dtype), ds.train_labels, ds.train_su,
                   ds.features("test", dtype), ds.test_labels, ds.test_su, seed=cell.seed)
    result, history = RUNNERS[cell.scheme](spec)
    params = result if cell.scheme == "standalone" else result[0].params
    return history, params_to_bytes(params)


def _run_cell_star(args):
    return run_cell(*args)


def plan(cfg: ExperimentConfig):
    """All training cells in a fixed order."""
    cells = []
    for scheme in cfg.schemes:
        variants = [True, False] if scheme in cfg.no_irs_schemes else [True]
        for irs in variants:
            for snr in cfg.snr_list:
                for seed in cfg.seeds:
                    cells.append(Cell(scheme, irs, snr, seed))
    return cells


def channel_sweep(cfg: ExperimentConfig):
    """Seed-averaged received strength (dB over noise) per SNR, with and without IRS."""
    rows = []
    for irs, name in ((True, "with_irs"), (False, "without_irs")):
        for snr in cfg.snr_list:
            vals = []
            for seed in cfg.seeds:
                env = build_env(cfg, seed, irs)
                rng = np.random.default_rng(_streams(seed)["gain"])
                vals.append(received_strength_db(env, snr, rng, cfg.channel.gain_samples,
                                                 cfg.spectrum.pu_power))
            rows.append({"series": name, "snr_db": snr, "seed_count": len(vals),
                         "received_db": float(np.mean(vals))})
    return rows


# -- file output ------------------------------------------------------------------

def _atomic_write(path, write, binary=False):
    """Write through a temporary file in the same directory, then rename."""
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with (os.fdopen(fd, "wb") if binary else os.fdopen(fd, "w", newline="")) as f:
            write(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, columns, rows):
    def body(f):
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([metrics.fmt(r[c]) for c in columns])
    _atomic_write(path, body)


def write_bytes(path, data):
    _atomic_write(path, lambda f: f.write(data), binary=True)


def write_metrics(path, records):
    write_csv(path, metrics.CSV_COLUMNS, [asdict(r) for r in records])


def _history_csv(path, history):
    cols = ["round", "node", "scheme", "loss", "accuracy", "bytes_exchanged"]
    write_csv(path, cols, history.records)


def run_experiment(cfg: ExperimentConfig, out_dir=None, on_cell=None):
    """Run every cell and write all CSVs; returns the output directory.

    Output bytes depend only on ``cfg``: cells are independent, each seeded
    from its own seed, and results are written in plan order regardless of
    ``cfg.workers``. With one worker, ``on_cell(cell, seconds)`` is called
    after each cell finishes.
    """
    out = out_dir or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    cells = plan(cfg)
    t0 = time.perf_counter()
    log.info("running %d cells with %d worker(s)", len(cells), cfg.workers)
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_run_cell_star, [(cfg, c) for c in cells]))
    else:
        results = []
        for k, c in enumerate(cells, 1):
            t_cell = time.perf_counter()
            results.append(run_cell(cfg, c))
            if on_cell is not None:
                on_cell(c, time.perf_counter() - t_cell)
            log.info("[%d/%d] %s (%.0fs)", k, len(cells), c.stem, time.perf_counter() - t0)

    rows = []
    for cell, (history, blob) in zip(cells, results):
        _history_csv(os.path.join(out, "runs", cell.stem + ".csv"), history)
        write_bytes(os.path.join(out, "checkpoints", cell.stem + ".irsp"), blob)
        for ev in history.evaluations:
            rows.append({"scheme": cell.label, "base": cell.scheme, "irs": cell.irs,
                         "snr_db": cell.snr_db, **ev})

    write_csv(os.path.join(out, FIG3), FIG3_COLUMNS, channel_sweep(cfg))
    for name, scheme in FIGURES.items():
        sel = [r for r in rows if r["base"] == scheme]
        if sel:
            write_metrics(os.path.join(out, name), metrics.aggregate(sel))
    if len(cfg.schemes) > 1:
        last = cfg.training.rounds
        sel = [{**r, "scheme": r["base"]} for r in rows if r["irs"] and r["round"] == last]
        recs = metrics.aggregate(sel)
        write_metrics(os.path.join(out, FIG6), recs)
        write_metrics(os.path.join(out, FIG7), recs)
    emit_plot_data(out, os.path.join(out, "series"))
    log.info("done in %.0fs", time.perf_counter() - t0)
    return out


# -- plot series ------------------------------------------------------------------

def _series_name(*parts):
    return "__".join(str(p) for p in parts) + ".csv"


def _read_rows(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise PlotDataError(f"{path} has no data rows")
    return rows


def _num(s):
    return float(s) if s != "" else math.nan


def emit_plot_data(csv_dir, out_dir=None):
    """Reshape figure CSVs into one ``x,y`` file per curve, x ascending.

    Returns the list of written paths. Raises :class:`PlotDataError` when no
    figure CSV is present or one of them is empty.
    """
    out_dir = out_dir or os.path.join(csv_dir, "series")
    series = {}  # file name -> list of (x, y)

    def add(name, x, y):
        series.setdefault(name, []).append((x, y))

    found = False
    p = os.path.join(csv_dir, FIG3)
    if os.path.exists(p):
        found = True
        for r in _read_rows(p):
            add(_series_name("fig3", r["series"]), _num(r["snr_db"]), _num(r["received_db"]))
    for name in FIGURES:
        p = os.path.join(csv_dir, name)
        if os.path.exists(p):
            found = True
            stem = name[:-4]
            for r in _read_rows(p):
                add(_series_name(stem, r["scheme"], f"snr{_num(r['snr_db']):g}"),
                    int(r["round"]), _num(r["accuracy"]))
    for name, field in ((FIG6, "accuracy"), (FIG7, "pd")):
        p = os.path.join(csv_dir, name)
        if os.path.exists(p):
            found = True
            for r in _read_rows(p):
                add(_series_name(name[:-4], r["scheme"]), _num(r["snr_db"]), _num(r[field]))
    if not found:
        raise PlotDataError(f"no figure CSVs found in {csv_dir}")

    written = []
    for fname in sorted(series):
        pts = sorted(series[fname], key=lambda t: t[0])
        path = os.path.join(out_dir, fname)
        write_csv(path, ["x", "y"], [{"x": x, "y": y} for x, y in pts])
        written.append(path)
    return written
