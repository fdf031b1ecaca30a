"""Experiment grids: config parsing, per-run metric rows, aggregation."""
from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .evaluation import modularity_metric, nmi, pairwise_f1, ranking_metrics, to_deterministic
from .graph import Dataset, NoisyGraph, inject_noise, load_dataset, save_noisy_graph, synth_sbm
from .trainer import TrainConfig, normalize_variant, save_checkpoint, train

log = logging.getLogger(__name__)

ROW_FIELDS = (
    "dataset", "noise", "graph_seed", "seed", "variant",
    "f1", "nmi", "modularity", "prauc", "hits", "epochs", "wall_ms", "status",
)
METRICS = ("f1", "nmi", "modularity")
RANKING = ("prauc", "hits")
NOISE_LEVELS = {0.3: "I", 0.6: "II", 0.9: "III"}

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"n_clusters", "seed", "variant"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    """One dataset, a grid of noise ratios x noisy-graph seeds x trial seeds x variants."""

    name: str
    out_dir: Path
    edges: Path | None = None
    attributes: Path | None = None
    labels: Path | None = None
    sbm: dict = field(default_factory=dict)
    noise_ratios: tuple[float, ...] = (0.3,)
    graph_seeds: tuple[int, ...] = (0,)
    seeds: tuple[int, ...] = (0,)
    variants: tuple[str, ...] = ("metagc",)
    n_clusters: int | None = None
    train: dict = field(default_factory=dict)
    hits_frac: float = 0.1
    record_wall_time: bool = True

    def validate(self) -> None:
        if not self.seeds or not self.graph_seeds:
            raise ConfigError("at least one seed and one graph seed are required")
        if any(r < 0 for r in self.noise_ratios):
            raise ConfigError("noise ratios must be non-negative")
        if not self.sbm and not (self.edges and self.attributes and self.labels):
            raise ConfigError("give either edges/attributes/labels paths or sbm_* keys")
        unknown = set(self.train) - _TRAIN_KEYS
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        for v in self.variants:
            normalize_variant(v)

    def load(self) -> Dataset:
        if self.sbm:
            return synth_sbm(**self.sbm)
        return load_dataset(self.edges, self.attributes, self.labels)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


_SBM_TYPES = {
    "n_per_cluster": int, "k_clusters": int, "p_in": float, "p_out": float,
    "attr_dim": int, "attr_signal": float, "rng_seed": int,
}


def _typed_train_value(key: str, text: str):
    default = {f.name: f for f in fields(TrainConfig)}[key].default
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes")
    return type(default)(text)


def parse_spec(text: str, base_dir: Path | None = None) -> ExperimentSpec:
    """Parse the flat ``[experiment]`` key-value config format (see README)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    if "experiment" not in cp:
        raise ConfigError("config needs an [experiment] section")
    sec = dict(cp["experiment"])
    base = base_dir or Path(".")

    def path(key):
        return (base / sec.pop(key)) if key in sec else None

    try:
        spec = ExperimentSpec(
            name=sec.pop("name", "experiment"),
            out_dir=path("out") or Path("runs"),
            edges=path("edges"), attributes=path("attributes"), labels=path("labels"),
        )
        sbm = {k[4:]: _SBM_TYPES[k[4:]](sec.pop(k)) for k in list(sec) if k.startswith("sbm_")}
        spec.sbm = sbm
        if "noise_ratios" in sec:
            spec.noise_ratios = _floats(sec.pop("noise_ratios"))
        if "graph_seeds" in sec:
            spec.graph_seeds = _ints(sec.pop("graph_seeds"))
        if "seeds" in sec:
            spec.seeds = _ints(sec.pop("seeds"))
        if "variants" in sec:
            spec.variants = tuple(v.strip() for v in sec.pop("variants").split(",") if v.strip())
        if "n_clusters" in sec:
            spec.n_clusters = int(sec.pop("n_clusters"))
        if "hits_frac" in sec:
            spec.hits_frac = float(sec.pop("hits_frac"))
        if "record_wall_time" in sec:
            spec.record_wall_time = cp["experiment"].getboolean("record_wall_time")
            sec.pop("record_wall_time")
        for key in list(sec):
            if key in _TRAIN_KEYS:
                spec.train[key] = _typed_train_value(key, sec.pop(key))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    if sec:
        raise ConfigError(f"unknown config keys: {sorted(sec)}")
    spec.validate()
    return spec


def read_spec(path) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_spec(path.read_text(), path.parent)


# ------------------------------------------------------------------------ rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ROW_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in ROW_FIELDS})
    return buf.getvalue()


def read_rows(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = dict(raw)
            for k in ("noise", "f1", "nmi", "modularity", "prauc", "hits", "wall_ms"):
                row[k] = float(row[k]) if row.get(k) not in (None, "") else None
            for k in ("graph_seed", "seed", "epochs"):
                row[k] = int(row[k]) if row.get(k) not in (None, "") else None
            out.append(row)
    return out


def evaluate_run(report, dataset: Dataset, noisy: NoisyGraph, hits_frac: float) -> dict:
    """Clean-graph metrics for one trained model."""
    hard = to_deterministic(report.soft_assignment)
    row = {
        "f1": pairwise_f1(dataset.labels, hard),
        "nmi": nmi(dataset.labels, hard),
        "modularity": modularity_metric(hard, noisy.clean_graph),
        "prauc": None,
        "hits": None,
        "epochs": report.epochs_run,
    }
    if report.edge_weights is not None:
        rm = ranking_metrics(report.edge_weights, noisy.real_mask, hits_frac)
        row["prauc"], row["hits"] = rm.prauc, rm.hits_at_frac
    return row


def _run_one(spec: ExperimentSpec, dataset: Dataset, noisy: NoisyGraph, ratio, graph_seed, seed, variant) -> dict:
    variant = normalize_variant(variant)
    row = {
        "dataset": spec.name, "noise": ratio, "graph_seed": graph_seed,
        "seed": seed, "variant": variant.replace("_", "-"),
    }
    k = spec.n_clusters or dataset.n_classes
    config = TrainConfig(n_clusters=k, seed=seed, variant=variant, **spec.train)
    try:
        report = train(dataset.with_graph(noisy.graph), config)
        row.update(evaluate_run(report, dataset, noisy, spec.hits_frac))
        row["wall_ms"] = round(report.wall_ms, 1) if spec.record_wall_time else 0.0
        row["status"] = "ok"
        ck_dir = spec.out_dir / "checkpoints"
        ck_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(report, ck_dir / f"{_run_name(row)}.json")
    except Exception as exc:  # one failed run must not stop the grid
        log.exception("run %s failed", _run_name(row))
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
    return row


def _run_name(row) -> str:
    return f"{row['dataset']}_r{row['noise']}_g{row['graph_seed']}_s{row['seed']}_{row['variant']}"


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("METACLUST_THREADS", "1")))
    except ValueError:
        return 1


def run_grid(spec: ExperimentSpec, workers: int | None = None) -> list[dict]:
    """Run every (ratio, graph seed, trial seed, variant); rows come back in grid order."""
    spec.validate()
    dataset = spec.load()
    noisy_dir = spec.out_dir / "noisy"
    noisy_dir.mkdir(parents=True, exist_ok=True)
    jobs = []
    for ratio in spec.noise_ratios:
        for gs in spec.graph_seeds:
            noisy = inject_noise(dataset, ratio, gs)
            save_noisy_graph(noisy, noisy_dir / f"{spec.name}_r{ratio}_g{gs}.edges")
            for seed in spec.seeds:
                for variant in spec.variants:
                    jobs.append((noisy, ratio, gs, seed, variant))
    workers = workers or worker_count()
    if workers == 1:
        rows = [_run_one(spec, dataset, *job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda job: _run_one(spec, dataset, *job), jobs))
    write_rows(rows, spec.out_dir)
    return rows


def write_rows(rows: list[dict], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "results.csv").write_text(format_csv(rows))
    clean = [{k: row.get(k) for k in ROW_FIELDS} for row in rows]
    (out_dir / "results.json").write_text(json.dumps(clean, indent=1) + "\n")


# ---------------------------------------------------------------- aggregation


def aggregate(rows: list[dict], metrics=METRICS) -> list[dict]:
    """Mean and population std per (noise, variant) for each metric present."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        if row.get("status", "ok") != "ok":
            continue
        groups.setdefault((row["noise"], row["variant"]), []).append(row)
    out = []
    for (noise, variant), members in sorted(groups.items()):
        entry = {"noise": noise, "variant": variant, "runs": len(members)}
        for m in metrics:
            vals = [r[m] for r in members if r.get(m) is not None]
            if vals:
                entry[f"{m}_mean"] = float(np.mean(vals))
                entry[f"{m}_std"] = float(np.std(vals))
        out.append(entry)
    return out


def level_name(ratio: float) -> str:
    return NOISE_LEVELS.get(round(ratio, 6), f"{ratio:g}")


def format_table(summary: list[dict], metrics=METRICS) -> str:
    header = ["noise", "variant", "runs"] + [m for m in metrics]
    lines = ["  ".join(f"{h:>18}" if i > 2 else f"{h:>8}" for i, h in enumerate(header))]
    for entry in summary:
        cells = [f"{level_name(entry['noise']):>8}", f"{entry['variant']:>8}", f"{entry['runs']:>8}"]
        for m in metrics:
            if f"{m}_mean" in entry:
                cells.append(f"{entry[m + '_mean']:.3f}+-{entry[m + '_std']:.3f}".rjust(18))
            else:
                cells.append(f"{'-':>18}")
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def summary_csv(summary: list[dict], metrics) -> str:
    cols = ["noise", "variant", "runs"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for entry in summary:
        writer.writerow({c: _fmt(entry.get(c)) for c in cols})
    return buf.getvalue()


def report(run_dir) -> str:
    """Aggregate ``results.csv`` into summary CSVs and a plain-text table."""
    run_dir = Path(run_dir)
    rows = read_rows(run_dir / "results.csv")
    main = aggregate(rows, METRICS)
    ranking = [e for e in aggregate(rows, RANKING) if "prauc_mean" in e]
    (run_dir / "summary.csv").write_text(summary_csv(main, METRICS))
    text = format_table(main, METRICS)
    if ranking:
        (run_dir / "ranking_summary.csv").write_text(summary_csv(ranking, RANKING))
        text += "\n" + format_table(ranking, RANKING)
    (run_dir / "summary.txt").write_text(text)
    return text


def with_train(spec: ExperimentSpec, **overrides) -> ExperimentSpec:
    return replace(spec, train={**spec.train, **overrides})
