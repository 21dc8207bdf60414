"""Experiment runner and ablation harness.

Configs are TOML with four sections (all keys optional unless noted):

    [task]        proxy task settings; any ProxyConfig field, plus
                  geobank = "path" to use a stored stack as the geometry
                  background (its dims override the task geometry fields)
    [bank]        strategy = first_half|uniform|latter_half|explicit,
                  bank_size (default: all stack layers), explicit = [..]
    [grounding]   mode, top_k, position
    [run]         seeds = [..] (required, non-empty), out_dir, heatmaps = [..]

Reports are plain text and CSV, written under the run's output directory, and
are byte-identical across repeated runs of the same config. Wall-clock
timings go to a separate timings.txt, which is the one file excluded from
that guarantee.

Ablation axes sweep one knob of the base config each and emit one report row
per variant, ordered the way the corresponding results table orders them:

    bank_construction  first_half / uniform / latter_half at the base size
    bank_size          4 / 8 / 12 / 16 / all (clipped to the stack)
    compactness        top_k 1 / 2 / 3 / 4 / all
    allocation         uniform / global / token_adaptive
    position           input_fusion / decoder_fusion / pre_reasoning
"""

from __future__ import annotations

import dataclasses
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from . import geobank_io
from .bank import RawLayerStack, SELECTION_STRATEGIES, build_bank, select_layers
from .errors import ConfigError, GeogroundError
from .grounding import MODES, POSITIONS, ground_tokens
from .pipeline import HeadConfig, to_bank_params, to_grounding_head
from .proxy import ProxyConfig, TrainResult, generate_task, train

ABLATION_AXES = (
    "bank_construction",
    "bank_size",
    "compactness",
    "allocation",
    "position",
)

_TASK_FIELDS = {f.name: f.type for f in dataclasses.fields(ProxyConfig)}


@dataclass
class ExperimentConfig:
    task: ProxyConfig
    geobank_path: str | None
    bank_strategy: str
    bank_size: int
    bank_explicit: tuple[int, ...] | None
    head: HeadConfig
    seeds: tuple[int, ...]
    out_dir: str
    heatmaps: tuple[str, ...]

    def selection(self) -> tuple[int, ...]:
        return select_layers(
            self.task.num_layers,
            self.bank_strategy,
            self.bank_size,
            explicit=self.bank_explicit,
        )


def _expect(table, section, key, types, default):
    value = table.get(key, default)
    if value is default:
        return default
    if not isinstance(value, types):
        names = "/".join(t.__name__ for t in types)
        raise ConfigError(f"{section}.{key}: expected {names}, got {value!r}")
    return value


def load_config(path) -> ExperimentConfig:
    """Parse and validate a TOML experiment config."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data, base=Path(path).parent)


def config_from_dict(data: dict, base: "Path | None" = None) -> ExperimentConfig:
    for section in data:
        if section not in ("task", "bank", "grounding", "run"):
            raise ConfigError(f"unknown config section [{section}]")
    task_tbl = dict(data.get("task", {}))
    bank_tbl = dict(data.get("bank", {}))
    ground_tbl = dict(data.get("grounding", {}))
    run_tbl = dict(data.get("run", {}))

    geobank_path = task_tbl.pop("geobank", None)
    if geobank_path is not None:
        if not isinstance(geobank_path, str):
            raise ConfigError("task.geobank: expected a path string")
        p = Path(geobank_path)
        if base is not None and not p.is_absolute():
            p = base / p
        if not p.exists():
            raise ConfigError(f"task.geobank: file not found: {p}")
        stack = geobank_io.read_geobank(p)
        task_tbl.update(
            num_layers=stack.num_layers,
            num_frames=stack.num_frames,
            grid_h=stack.grid_h,
            grid_w=stack.grid_w,
            d_geo=stack.d_geo,
        )
        geobank_path = str(p)

    unknown = set(task_tbl) - set(_TASK_FIELDS)
    if unknown:
        raise ConfigError(f"task.{sorted(unknown)[0]}: unknown task field")
    for key in ("signal_layers", "pair_layers"):
        if key in task_tbl:
            if not isinstance(task_tbl[key], list):
                raise ConfigError(f"task.{key}: expected a list of integers")
            task_tbl[key] = tuple(int(v) for v in task_tbl[key])
    try:
        task = ProxyConfig(**task_tbl)
    except ConfigError as exc:
        raise ConfigError(f"task: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"task: {exc}") from exc

    strategy = _expect(bank_tbl, "bank", "strategy", (str,), "latter_half")
    if strategy not in SELECTION_STRATEGIES:
        raise ConfigError(
            f"bank.strategy: unknown strategy {strategy!r}; "
            f"expected one of {SELECTION_STRATEGIES}"
        )
    bank_size = _expect(bank_tbl, "bank", "bank_size", (int,), task.num_layers)
    explicit = bank_tbl.get("explicit")
    if explicit is not None:
        if not isinstance(explicit, list):
            raise ConfigError("bank.explicit: expected a list of integers")
        explicit = tuple(int(v) for v in explicit)
    if "merge" in bank_tbl:
        raise ConfigError("bank.merge: merge mode lives under [task] as task.merge")
    try:
        select_layers(task.num_layers, strategy, bank_size, explicit=explicit)
    except ConfigError as exc:
        raise ConfigError(f"bank: {exc}") from exc

    mode = _expect(ground_tbl, "grounding", "mode", (str,), "token_adaptive")
    if mode not in MODES:
        raise ConfigError(f"grounding.mode: unknown mode {mode!r}")
    top_k = _expect(ground_tbl, "grounding", "top_k", (int,), 2)
    position = _expect(
        ground_tbl, "grounding", "position", (str,), "pre_reasoning"
    )
    if position not in POSITIONS:
        raise ConfigError(f"grounding.position: unknown position {position!r}")
    try:
        head = HeadConfig(mode=mode, top_k=top_k, position=position)
    except ConfigError as exc:
        raise ConfigError(f"grounding: {exc}") from exc

    seeds = run_tbl.get("seeds")
    if (
        not isinstance(seeds, list)
        or not seeds
        or not all(isinstance(s, int) for s in seeds)
    ):
        raise ConfigError("run.seeds: required non-empty list of integers")
    out_dir = _expect(run_tbl, "run", "out_dir", (str,), "runs")
    heatmaps = run_tbl.get("heatmaps", ["avg_layer_index", "layer_histogram"])
    if not isinstance(heatmaps, list) or not all(
        isinstance(h, str) for h in heatmaps
    ):
        raise ConfigError("run.heatmaps: expected a list of heatmap kinds")
    for kind in heatmaps:
        if kind not in geobank_io.HEATMAP_KINDS:
            raise ConfigError(f"run.heatmaps: unknown kind {kind!r}")
    return ExperimentConfig(
        task=task,
        geobank_path=geobank_path,
        bank_strategy=strategy,
        bank_size=bank_size,
        bank_explicit=explicit,
        head=head,
        seeds=tuple(seeds),
        out_dir=out_dir,
        heatmaps=tuple(heatmaps),
    )


def _background(config: ExperimentConfig):
    if config.geobank_path is None:
        return None
    return geobank_io.read_geobank(config.geobank_path).features


def _train_job(args):
    cfg, head, seed, selection, background = args
    return train(cfg, head, seed, selection=selection, background=background)


def _run_all(jobs, threads: int):
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_train_job, jobs))
    return [_train_job(j) for j in jobs]


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


@dataclass
class ExperimentSummary:
    config: ExperimentConfig
    results: list[TrainResult]
    out_dir: Path

    def mean(self, getter) -> float:
        return float(np.mean([getter(r) for r in self.results]))

    def std(self, getter) -> float:
        return float(np.std([getter(r) for r in self.results]))


def run_experiment(config: ExperimentConfig, threads: int = 1) -> ExperimentSummary:
    """Train one variant over all seeds and write the report files."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    selection = config.selection()
    background = _background(config)
    t0 = time.perf_counter()
    jobs = [
        (config.task, config.head, seed, selection, background)
        for seed in config.seeds
    ]
    results = _run_all(jobs, threads)
    elapsed = time.perf_counter() - t0

    summary = ExperimentSummary(config=config, results=results, out_dir=out)
    _write_metrics(out / "metrics.txt", config, selection, results)
    _write_loss_curves(out / "loss_curves.csv", config.seeds, results)
    _write_routing_stats(out / "routing_stats.csv", selection, results)
    for kind in config.heatmaps:
        _write_heatmap(out, kind, config, selection, results[0])
    with open(out / "timings.txt", "w") as fh:
        fh.write(f"wall_seconds = {elapsed:.3f}\n")
        fh.write(f"runs = {len(results)}\n")
    return summary


def _write_metrics(path, config, selection, results):
    lines = ["# experiment metrics"]
    lines.append(f"mode = {config.head.mode}")
    lines.append(f"top_k = {config.head.top_k}")
    lines.append(f"position = {config.head.position}")
    lines.append(f"bank_strategy = {config.bank_strategy}")
    lines.append(f"bank_size = {config.bank_size}")
    lines.append(f"selection = {','.join(str(s) for s in selection)}")
    lines.append(f"seeds = {','.join(str(s) for s in config.seeds)}")
    lines.append("")

    def agg(name, getter):
        vals = [getter(r) for r in results]
        lines.append(f"{name} = {_fmt(np.mean(vals))}")
        lines.append(f"{name}_std = {_fmt(np.std(vals))}")

    agg("test_accuracy", lambda r: r.test_metrics.accuracy)
    agg("train_accuracy", lambda r: r.train_metrics.accuracy)
    agg("train_loss_final", lambda r: r.loss_curve[-1])
    agg("agreement", lambda r: r.test_metrics.agreement)
    agg("initial_test_accuracy", lambda r: r.initial_test_accuracy)
    flagged = any(r.test_metrics.degenerate_routing for r in results)
    lines.append(f"degenerate_routing = {_fmt(flagged)}")
    lines.append("")
    lines.append("[per_seed]")
    lines.append(
        "seed,test_accuracy,train_accuracy,train_loss_final,agreement,"
        "initial_test_accuracy,degenerate_routing"
    )
    for r in results:
        lines.append(
            ",".join(
                [
                    str(r.seed),
                    _fmt(r.test_metrics.accuracy),
                    _fmt(r.train_metrics.accuracy),
                    _fmt(r.loss_curve[-1]),
                    _fmt(r.test_metrics.agreement),
                    _fmt(r.initial_test_accuracy),
                    _fmt(r.test_metrics.degenerate_routing),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def _write_loss_curves(path, seeds, results):
    header = "step," + ",".join(f"seed_{s}" for s in seeds)
    rows = [header]
    for step in range(len(results[0].loss_curve)):
        rows.append(
            f"{step}," + ",".join(_fmt(r.loss_curve[step]) for r in results)
        )
    Path(path).write_text("\n".join(rows) + "\n")


def _write_routing_stats(path, selection, results):
    rows = ["bank_position,stack_layer,selection_frequency_mean,selection_count_total"]
    freq = np.mean([r.test_metrics.layer_frequency for r in results], axis=0)
    total = np.sum([r.test_metrics.layer_counts for r in results], axis=0)
    for pos, layer in enumerate(selection):
        rows.append(f"{pos},{layer},{_fmt(freq[pos])},{int(total[pos])}")
    Path(path).write_text("\n".join(rows) + "\n")


def _write_heatmap(out: Path, kind: str, config, selection, result: TrainResult):
    """Diagnostics from the first seed's trained model on test sample 0."""
    _, test_ds = generate_task(config.task, result.seed, _background(config))
    sample = test_ds.sample(0)
    raw = sample.raw
    raw_sel = RawLayerStack(
        layer_indices=tuple(selection),
        num_frames=raw.num_frames,
        grid_h=raw.grid_h,
        grid_w=raw.grid_w,
        features=raw.features[list(selection)],
    )
    bank = build_bank(
        raw_sel,
        to_bank_params(result.store.params, config.task.merge, config.task.ln_eps),
    )
    head = to_grounding_head(result.store.params, config.head)
    _, routing = ground_tokens(sample.tokens, bank, head)
    if kind == "avg_layer_index":
        grid = geobank_io.avg_layer_index_heatmap(
            routing,
            bank.layer_indices,
            bank.num_frames,
            bank.grid_h,
            bank.grid_w,
        )
    elif kind == "roi_similarity":
        grid = geobank_io.roi_similarity_heatmap(
            bank, layer=0, query_token=bank.num_tokens // 2
        )
    else:
        grid = geobank_io.layer_selection_histogram(routing, bank.num_layers)
    geobank_io.write_heatmap_csv(grid, out / f"heatmap_{kind}.csv")


@dataclass
class AblationRow:
    variant: str
    accuracies: list[float]  # per seed; empty when the row failed
    error: str | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies)) if self.accuracies else float("nan")


@dataclass
class AblationReport:
    axis: str
    seeds: tuple[int, ...]
    rows: list[AblationRow]
    incomplete: bool


def _ablation_variants(axis: str, config: ExperimentConfig):
    """(name, head, selection) per variant, in results-table row order."""
    task = config.task
    base_sel = config.selection()
    if axis == "allocation":
        return [
            (m, dataclasses.replace(config.head, mode=m), base_sel)
            for m in ("uniform", "global", "token_adaptive")
        ]
    if axis == "position":
        return [
            (p, dataclasses.replace(config.head, position=p), base_sel)
            for p in ("input_fusion", "decoder_fusion", "pre_reasoning")
        ]
    if axis == "compactness":
        n = len(base_sel)
        ks = [k for k in (1, 2, 3, 4) if k < n] + [n]
        return [
            (
                "all_layers" if k == n else f"top_{k}",
                dataclasses.replace(config.head, top_k=k),
                base_sel,
            )
            for k in ks
        ]
    if axis == "bank_construction":
        return [
            (
                strat,
                config.head,
                select_layers(task.num_layers, strat, config.bank_size),
            )
            for strat in ("first_half", "uniform", "latter_half")
        ]
    if axis == "bank_size":
        n = task.num_layers
        sizes = [s for s in (4, 8, 12, 16) if s < n] + [n]
        return [
            (
                "all_layers" if s == n else f"{s}_layers",
                config.head,
                select_layers(task.num_layers, config.bank_strategy, s),
            )
            for s in sizes
        ]
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def run_ablation(
    axis: str, config: ExperimentConfig, threads: int = 1
) -> AblationReport:
    """One training run per variant per seed; rows in table order."""
    variants = _ablation_variants(axis, config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    background = _background(config)
    rows: list[AblationRow] = []
    t0 = time.perf_counter()
    for name, head, selection in variants:
        jobs = [
            (config.task, head, seed, selection, background)
            for seed in config.seeds
        ]
        try:
            results = _run_all(jobs, threads)
            rows.append(
                AblationRow(
                    variant=name,
                    accuracies=[r.test_metrics.accuracy for r in results],
                )
            )
        except GeogroundError as exc:
            rows.append(AblationRow(variant=name, accuracies=[], error=str(exc)))
    elapsed = time.perf_counter() - t0
    report = AblationReport(
        axis=axis,
        seeds=config.seeds,
        rows=rows,
        incomplete=any(r.error is not None for r in rows),
    )
    _write_ablation(out, report)
    with open(out / "timings.txt", "w") as fh:
        fh.write(f"wall_seconds = {elapsed:.3f}\n")
        fh.write(f"runs = {len(variants) * len(config.seeds)}\n")
    return report


def _write_ablation(out: Path, report: AblationReport):
    csv_rows = [
        "variant,mean_accuracy,std_accuracy,"
        + ",".join(f"seed_{s}" for s in report.seeds)
        + ",status"
    ]
    for row in report.rows:
        if row.error is None:
            cells = [row.variant, _fmt(row.mean), _fmt(row.std)]
            cells += [_fmt(a) for a in row.accuracies]
            cells.append("ok")
        else:
            cells = [row.variant, "nan", "nan"]
            cells += [""] * len(report.seeds)
            cells.append(f"failed: {row.error}")
        csv_rows.append(",".join(cells))
    (out / f"ablation_{report.axis}.csv").write_text("\n".join(csv_rows) + "\n")

    width = max(len(r.variant) for r in report.rows)
    lines = [f"# ablation axis: {report.axis}"]
    lines.append(f"# seeds: {','.join(str(s) for s in report.seeds)}")
    if report.incomplete:
        lines.append("# INCOMPLETE: one or more variants failed")
    lines.append(f"{'variant'.ljust(width)}  mean_acc  std_acc")
    for row in report.rows:
        if row.error is None:
            lines.append(
                f"{row.variant.ljust(width)}  {row.mean:8.4f}  {row.std:7.4f}"
            )
        else:
            lines.append(f"{row.variant.ljust(width)}  failed: {row.error}")
    (out / f"ablation_{report.axis}.txt").write_text("\n".join(lines) + "\n")
