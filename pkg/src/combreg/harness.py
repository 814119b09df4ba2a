"""Leave-one-out experiments over the regularization x strategy grid, prediction, code export and reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import ContractError, Tensor
from .metrics import RECORD_FIELDS, MetricReport, evaluate
from .nets import ModelParams
from .postproc import BinaryVolume, postprocess, stack_slices
from .ranking import DEFAULT_TABLE, ThresholdTable, case_score, rank_methods
from .synth import DEFAULT_EXTENTS, DEFAULT_SPACING, STRATEGIES, Case, ConfigurationError, generate_dataset, load_dataset, write_vvol
from .train import (
    REGULARIZATIONS,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    hard_masks,
    make_slices,
    train_autoencoder,
    train_main,
)

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
BUNDLE_FORMAT = "combreg-bundle"
EVAL_MODES = ("global", "structure")
REG_NAMES = {"base": "BaseUNet", "shape": "ShapeReg", "adv": "AdvReg", "combined": "CombReg"}
STRATEGY_TAGS = {"individual": "INDIV", "global": "GLOB", "multi": "MULTI"}
FULL_GRID = tuple((r, s) for r in REGULARIZATIONS for s in STRATEGIES)
METRIC_COLUMNS = ("method", "regularization", "strategy", "case_id", "status") + RECORD_FIELDS[1:] + (
    "report_score",
    "case_score",
)
LEADERBOARD_COLUMNS = ("method", "mean", "median", "q1", "q3", "min", "max", "rank", "n", "n_failed")
AGGREGATE_METRICS = ("dice_pct", "sensitivity_pct", "specificity_pct", "hd_mm", "msd_mm", "ravd_pct")


def method_name(regularization: str, strategy: str) -> str:
    return f"{REG_NAMES[regularization]}-{STRATEGY_TAGS[strategy]}"


# ------------------------------------------------------------------ config
@dataclass
class ExperimentConfig:
    seed: int = 0
    n_cases: int = 12
    num_classes: int = 3
    extents: tuple[int, int, int] = DEFAULT_EXTENTS
    spacing_mm: tuple[float, float, float] = DEFAULT_SPACING
    grid: tuple[tuple[str, str], ...] = FULL_GRID
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    outdir: str | None = None
    data_dir: str | None = None  # load VVOL cases instead of generating
    parallel_folds: int = 1
    connectivity: int = 26
    closing_radius: int = 1
    eval_mode: str = "global"
    overlays: bool = False

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.grid = tuple((str(r), str(s)) for r, s in self.grid)
        if self.data_dir is None and self.n_cases < 2:
            raise ConfigurationError("leave-one-out needs at least 2 cases")
        if not self.grid:
            raise ConfigurationError("experiment grid is empty")
        if len(set(self.grid)) != len(self.grid):
            raise ConfigurationError("experiment grid has duplicate entries")
        for reg, strat in self.grid:
            if reg not in REGULARIZATIONS:
                raise ConfigurationError(f"unknown regularization {reg!r}")
            if strat not in STRATEGIES:
                raise ConfigurationError(f"unknown strategy {strat!r}")
        known = {f.name for f in fields(TrainConfig)} - {"strategy", "regularization", "seed"}
        unknown = set(self.train) - known
        if unknown:
            raise ConfigurationError(f"unknown training option(s): {sorted(unknown)}")
        if self.eval_mode not in EVAL_MODES:
            raise ConfigurationError(f"eval_mode must be one of {EVAL_MODES}")
        if self.parallel_folds < 1:
            raise ConfigurationError("parallel_folds must be >= 1")
        self.train_config(*self.grid[0])  # validates the overrides

    def train_config(self, regularization: str, strategy: str) -> TrainConfig:
        return TrainConfig(**self.train, seed=self.seed, strategy=strategy, regularization=regularization)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {sorted(unknown)}")
        d = dict(d)
        if "grid" in d:
            d["grid"] = tuple(tuple(pair) for pair in d["grid"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = [list(p) for p in self.grid]
        d["extents"] = list(self.extents)
        d["spacing_mm"] = list(self.spacing_mm)
        return d

    def load_cases(self) -> list[Case]:
        if self.data_dir is not None:
            cases = load_dataset(self.data_dir)
            if len(cases) < 2:
                raise ConfigurationError("leave-one-out needs at least 2 cases")
            return cases
        return generate_dataset(self.seed, self.n_cases, self.num_classes, self.extents, self.spacing_mm)


# ------------------------------------------------------------------ models
@dataclass
class ModelBundle:
    """Everything needed to predict with one trained method: C segmenters for individual, else one."""

    strategy: str
    regularization: str
    num_classes: int
    slice_extents: tuple[int, int]
    train_config: TrainConfig
    segmenters: list[ModelParams]
    autoencoders: list[ModelParams] = field(default_factory=list)
    discriminators: list[ModelParams] = field(default_factory=list)
    train_case_ids: list[str] = field(default_factory=list)
    logs: dict[str, TrainResult] = field(default_factory=dict)

    @property
    def structures(self) -> list[int]:
        """Structure index each segmenter serves; 0 means all at once."""
        return list(range(1, self.num_classes + 1)) if self.strategy == "individual" else [0]

    def save(self, directory: str | Path) -> list[str]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        written = {"segmenters": [], "autoencoders": [], "discriminators": []}
        for s, p in zip(self.structures, self.segmenters):
            written["segmenters"].append(f"unet_s{s}.ckpt")
            nets.save_checkpoint(p, d / written["segmenters"][-1], {"strategy": self.strategy, "structure": s})
        for s, p in zip(self.structures, self.autoencoders):
            written["autoencoders"].append(f"ae_s{s}.ckpt")
            nets.save_checkpoint(p, d / written["autoencoders"][-1], {"strategy": self.strategy, "structure": s})
        for s, p in zip(self.structures, self.discriminators):
            written["discriminators"].append(f"disc_s{s}.ckpt")
            nets.save_checkpoint(p, d / written["discriminators"][-1], {"strategy": self.strategy, "structure": s})
        manifest = {
            "format": BUNDLE_FORMAT,
            "version": 1,
            "strategy": self.strategy,
            "regularization": self.regularization,
            "num_classes": self.num_classes,
            "slice_extents": list(self.slice_extents),
            "train_config": asdict(self.train_config),
            "train_case_ids": self.train_case_ids,
            **written,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        for name, result in self.logs.items():
            (d / f"{name}_loss.tsv").write_text("\n".join(result.epoch_log()) + "\n")
            (d / f"{name}_batches.tsv").write_text(batch_log(result))
        return [str(d / f) for group in written.values() for f in group]

    @classmethod
    def load(cls, directory: str | Path) -> "ModelBundle":
        d = Path(directory)
        try:
            m = json.loads((d / "manifest.json").read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"{d} holds no model manifest") from None
        if m.get("format") != BUNDLE_FORMAT:
            raise ConfigurationError(f"{d} is not a model bundle")
        load = lambda names: [nets.load_checkpoint(d / n)[0] for n in names]  # noqa: E731
        return cls(
            strategy=m["strategy"],
            regularization=m["regularization"],
            num_classes=m["num_classes"],
            slice_extents=tuple(m["slice_extents"]),
            train_config=TrainConfig(**m["train_config"]),
            segmenters=load(m["segmenters"]),
            autoencoders=load(m["autoencoders"]),
            discriminators=load(m["discriminators"]),
            train_case_ids=m["train_case_ids"],
        )


def batch_log(result: TrainResult) -> str:
    """Tab-separated per-batch log including the case ids drawn into each batch."""
    out = ["epoch\tbatch\ttotal\tcase_ids"]
    for rec in result.history:
        out.append(f"{rec['epoch']}\t{rec['batch']}\t{rec['total']:.10g}\t{','.join(rec['case_ids'])}")
    return "\n".join(out) + "\n"


def _ae_key(cfg: TrainConfig, structure: int):
    return replace(cfg, regularization="shape"), structure


def train_bundle(cases: Sequence[Case], cfg: TrainConfig, ae_cache: dict | None = None) -> ModelBundle:
    """Train every network one method needs on ``cases``.

    ``ae_cache`` lets methods that share a strategy and training data reuse
    one auto-encoder; it is keyed by everything the auto-encoder depends on.
    """
    if not cases:
        raise ContractError("train_bundle needs at least one case")
    num_classes = cases[0].num_classes
    slice_extents = cases[0].image.shape[1:]
    for c in cases:
        if c.num_classes != num_classes or c.image.shape[1:] != slice_extents:
            raise ContractError(f"case {c.case_id} differs in class count or slice extents")
    bundle = ModelBundle(cfg.strategy, cfg.regularization, num_classes, tuple(slice_extents), cfg, [])
    bundle.train_case_ids = sorted(c.case_id for c in cases)
    for s in bundle.structures:
        data = make_slices(cases, cfg.strategy, structure=s or None)
        params_F = None
        if cfg.uses_shape:
            key = _ae_key(cfg, s)
            if ae_cache is not None and key in ae_cache:
                params_F = ae_cache[key]
            else:
                params_F = train_autoencoder(data, cfg, structure=s).params
                if ae_cache is not None:
                    ae_cache[key] = params_F
            bundle.autoencoders.append(params_F)
        result = train_main(data, cfg, params_F, structure=s)
        bundle.segmenters.append(result.params_S)
        if result.params_D is not None:
            bundle.discriminators.append(result.params_D)
        bundle.logs[f"unet_s{s}"] = result
    return bundle


# --------------------------------------------------------------- prediction
@dataclass
class Prediction:
    structures: dict[int, BinaryVolume]  # 1-based structure -> mask; empty for the global strategy
    global_mask: BinaryVolume

    def label_volume(self) -> np.ndarray:
        """Integer labels; later structures win where post-processed masks overlap."""
        out = np.zeros(self.global_mask.extents, dtype=np.uint8)
        if not self.structures:
            out[self.global_mask.mask] = 1
        for c, vol in sorted(self.structures.items()):
            out[vol.mask] = c
        return out


def slice_probabilities(params: ModelParams, image: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode head output for every axial slice: (D, K, H, W)."""
    out = []
    for start in range(0, image.shape[0], batch_size):
        x = Tensor(image[start : start + batch_size, None].astype(np.float64))
        out.append(nets.forward_seg(params, x, "eval").data)
    return np.concatenate(out)


def masks_from_probabilities(probs: np.ndarray, head: str) -> np.ndarray:
    """(D, K_fg, H, W) boolean foreground masks: argmax (multi) or > 0.5 (binary)."""
    return hard_masks(probs, head).astype(bool)


def union_masks(vols: Iterable[BinaryVolume], extents, spacing_mm) -> BinaryVolume:
    out = np.zeros(extents, dtype=bool)
    for v in vols:
        out |= v.mask
    return BinaryVolume(out, tuple(spacing_mm))


def predict(bundle: ModelBundle, case: Case, connectivity: int = 26, radius: int = 1) -> Prediction:
    """Slice-wise forward pass, binarization, then stack -> largest component -> closing per structure."""
    if tuple(case.image.shape[1:]) != tuple(bundle.slice_extents):
        raise ContractError(f"case slices {case.image.shape[1:]} do not match training extents {bundle.slice_extents}")
    if case.num_classes != bundle.num_classes:
        raise ContractError(f"case has {case.num_classes} structures, model was trained for {bundle.num_classes}")
    sp = case.spacing_mm
    structures: dict[int, BinaryVolume] = {}
    if bundle.strategy == "global":
        fg = masks_from_probabilities(slice_probabilities(bundle.segmenters[0], case.image), "binary")[:, 0]
        g = postprocess(stack_slices(list(fg), sp), connectivity, radius)
        return Prediction({}, g)
    if bundle.strategy == "multi":
        fg = masks_from_probabilities(slice_probabilities(bundle.segmenters[0], case.image), "multi")
        for c in range(1, bundle.num_classes + 1):
            structures[c] = postprocess(stack_slices(list(fg[:, c - 1]), sp), connectivity, radius)
    else:
        for c, params in zip(bundle.structures, bundle.segmenters):
            fg = masks_from_probabilities(slice_probabilities(params, case.image), "binary")[:, 0]
            structures[c] = postprocess(stack_slices(list(fg), sp), connectivity, radius)
    return Prediction(structures, union_masks(structures.values(), case.extents, sp))


def evaluate_prediction(pred: Prediction, case: Case) -> list[MetricReport]:
    """Per-structure reports (when the strategy separates structures) followed by the global report."""
    reports = []
    for c, vol in sorted(pred.structures.items()):
        reports.append(evaluate(case.labels == c, vol, case.spacing_mm, case.case_id, f"s{c}"))
    reports.append(evaluate(case.labels > 0, pred.global_mask, case.spacing_mm, case.case_id, "global"))
    return reports


def fold_score(reports: Sequence[MetricReport], eval_mode: str = "global", table: ThresholdTable = DEFAULT_TABLE) -> float:
    structure_reports = [r for r in reports if r.structure != "global"]
    if eval_mode == "structure" and structure_reports:
        return case_score(structure_reports, table)
    return case_score([r for r in reports if r.structure == "global"][0], table)


# ------------------------------------------------------------------ codes
def mask_codes(params_ae: ModelParams, masks: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Global-max-pooled encoder bottleneck for a (N, K, H, W) mask batch: (N, code_channels)."""
    out = []
    for start in range(0, len(masks), batch_size):
        code = nets.encode(params_ae, Tensor(np.asarray(masks[start : start + batch_size], dtype=np.float64)), "eval")
        out.append(ad.global_max_pool(code).data)
    if not out:
        return np.zeros((0, params_ae.config.code_channels))
    return np.concatenate(out)


def export_codes(params_ae: ModelParams, cases: Sequence[Case], structure: int | None = None) -> list[dict]:
    """One row per (case, structure, slice) where the structure is present in the slice.

    A multi-channel encoder sees the structure in its own channel and zeros
    elsewhere; a single-channel encoder sees the structure's binary mask.
    ``structure`` restricts the export to one structure.
    """
    k = params_ae.config.in_channels
    rows = []
    for case in cases:
        wanted = [structure] if structure else range(1, case.num_classes + 1)
        for c in wanted:
            m = case.labels == c
            present = np.flatnonzero(m.any(axis=(1, 2)))
            if not len(present):
                continue
            batch = np.zeros((len(present), k) + m.shape[1:])
            batch[:, c - 1 if k > 1 else 0] = m[present]
            codes = mask_codes(params_ae, batch)
            for z, code in zip(present, codes):
                rows.append({"case_id": case.case_id, "structure": f"s{c}", "slice": int(z), "code": code.tolist()})
    return rows


def write_codes_csv(rows: Sequence[dict], path: str | Path, code_channels: int | None = None) -> None:
    n = code_channels if code_channels is not None else (len(rows[0]["code"]) if rows else 0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "structure", "slice"] + [f"c{i}" for i in range(n)])
        for r in rows:
            w.writerow([r["case_id"], r["structure"], r["slice"]] + [repr(float(v)) for v in r["code"]])


# ---------------------------------------------------------------- LOOCV
@dataclass
class FoldResult:
    method: str
    regularization: str
    strategy: str
    case_id: str
    status: str = "ok"  # or "failed"
    reports: list[MetricReport] = field(default_factory=list)
    score: float | None = None
    checkpoints: list[str] = field(default_factory=list)
    seconds: float = 0.0
    train_case_ids: list[str] = field(default_factory=list)
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    folds: list[FoldResult]

    def methods(self) -> list[str]:
        return [method_name(r, s) for r, s in self.config.grid]

    def scores(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {m: {} for m in self.methods()}
        for f in self.folds:
            if f.ok:
                out[f.method][f.case_id] = f.score
        return out


def _ensure_writable(outdir: Path) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    if not os.access(outdir, os.W_OK):
        raise PermissionError(f"output directory {outdir} is not writable")


def _dump_overlay(outdir: Path, method: str, case: Case, pred: Prediction) -> None:
    base = outdir / "overlays" / method
    write_vvol(base / f"{case.case_id}_pred", pred.label_volume(), case.spacing_mm, case.num_classes, case.case_id, extra={"role": "prediction"})
    write_vvol(base / f"{case.case_id}_gt", case.labels, case.spacing_mm, case.num_classes, case.case_id, image=case.image, extra={"role": "ground_truth"})


def run_fold(config: ExperimentConfig, cases: Sequence[Case], held_out: int) -> list[FoldResult]:
    """All grid methods for one held-out case; auto-encoders are shared across methods of a strategy."""
    test = cases[held_out]
    train_cases = [c for i, c in enumerate(cases) if i != held_out]
    outdir = Path(config.outdir) if config.outdir else None
    ae_cache: dict = {}
    results = []
    for reg, strat in config.grid:
        name = method_name(reg, strat)
        res = FoldResult(name, reg, strat, test.case_id, train_case_ids=sorted(c.case_id for c in train_cases))
        t0 = time.perf_counter()
        try:
            bundle = train_bundle(train_cases, config.train_config(reg, strat), ae_cache)
            if test.case_id in bundle.train_case_ids:
                raise ContractError(f"held-out case {test.case_id} leaked into training")
            if outdir is not None:
                res.checkpoints = bundle.save(outdir / "checkpoints" / name / test.case_id)
            pred = predict(bundle, test, config.connectivity, config.closing_radius)
            res.reports = evaluate_prediction(pred, test)
            res.score = fold_score(res.reports, config.eval_mode)
            if outdir is not None and config.overlays:
                _dump_overlay(outdir, name, test, pred)
        except TrainingDiverged as exc:
            res.status = "failed"
            res.error = str(exc)
            logger.warning("fold %s / %s failed: %s", name, test.case_id, exc)
        res.seconds = time.perf_counter() - t0
        logger.info("fold %s / %s: score %s (%.1fs)", name, test.case_id, res.score, res.seconds)
        results.append(res)
    return results


def run_loocv(config: ExperimentConfig, cases: Sequence[Case] | None = None) -> ExperimentResult:
    """N folds per grid method; results ordered by grid position then case id."""
    if cases is None:
        cases = config.load_cases()
    cases = sorted(cases, key=lambda c: c.case_id)
    if len(cases) < 2:
        raise ConfigurationError("leave-one-out needs at least 2 cases")
    if len({c.case_id for c in cases}) != len(cases):
        raise ConfigurationError("case ids must be unique")
    if config.outdir:
        _ensure_writable(Path(config.outdir))
    if config.parallel_folds > 1:
        with ProcessPoolExecutor(max_workers=config.parallel_folds) as pool:
            per_fold = list(pool.map(run_fold, [config] * len(cases), [cases] * len(cases), range(len(cases))))
    else:
        per_fold = [run_fold(config, cases, i) for i in range(len(cases))]
    order = {m: i for i, m in enumerate(method_name(r, s) for r, s in config.grid)}
    folds = sorted((f for group in per_fold for f in group), key=lambda f: (order[f.method], f.case_id))
    return ExperimentResult(config, folds)


# ------------------------------------------------------------------ reports
def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return "NA" if math.isnan(v) else repr(v)
    return str(v)


def metric_rows(folds: Sequence[FoldResult], table: ThresholdTable = DEFAULT_TABLE) -> list[dict]:
    """One row per (fold, report); a failed fold contributes a single row without metrics."""
    rows = []
    for f in folds:
        head = {"method": f.method, "regularization": f.regularization, "strategy": f.strategy, "case_id": f.case_id, "status": f.status}
        if not f.ok:
            rows.append({**head, **{k: None for k in METRIC_COLUMNS if k not in head}, "structure": "global"})
            continue
        for r in f.reports:
            rec = r.to_record()
            rec.pop("case_id")
            rows.append({**head, **rec, "report_score": case_score(r, table), "case_score": f.score})
    return rows


def aggregate_rows(folds: Sequence[FoldResult]) -> list[dict]:
    """Mean and sample SD of each metric per (method, structure) over successful folds."""
    groups: dict[tuple[str, str], list[dict]] = {}
    failed: dict[str, int] = {}
    for row in metric_rows(folds):
        if row["status"] != "ok":
            failed[row["method"]] = failed.get(row["method"], 0) + 1
            continue
        groups.setdefault((row["method"], row["structure"]), []).append(row)
    out = []
    for (method, structure), rows in groups.items():
        agg = {"method": method, "structure": structure, "n": len(rows), "n_failed": failed.get(method, 0)}
        for m in AGGREGATE_METRICS:
            vals = [r[m] for r in rows if r[m] is not None]
            agg[f"{m}_mean"] = statistics.fmean(vals) if vals else None
            agg[f"{m}_sd"] = statistics.stdev(vals) if len(vals) > 1 else (0.0 if vals else None)
        out.append(agg)
    return out


def leaderboard(result_folds: Sequence[FoldResult], methods: Sequence[str] | None = None):
    """Score cards over the cases every method completed, plus per-method failure counts."""
    if methods is None:
        methods = list(dict.fromkeys(f.method for f in result_folds))
    scores: dict[str, dict[str, float]] = {m: {} for m in methods}
    failed = {m: 0 for m in methods}
    for f in result_folds:
        if f.ok:
            scores[f.method][f.case_id] = f.score
        else:
            failed[f.method] += 1
    common = set.intersection(*(set(s) for s in scores.values())) if scores else set()
    cards = rank_methods({m: {c: v for c, v in s.items() if c in common} for m, s in scores.items()})
    return cards, failed


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    path.write_text(buf.getvalue())


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    return v


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n")


def emit_reports(folds: Sequence[FoldResult], outdir: str | Path, methods: Sequence[str] | None = None) -> dict[str, Path]:
    """Write metrics.csv/json, leaderboard.csv/json, boxplot.json and spider.json; returns their paths."""
    out = Path(outdir)
    _ensure_writable(out)
    rows = metric_rows(folds)
    cards, failed = leaderboard(folds, methods)
    n_failed = sum(1 for f in folds if not f.ok)
    paths = {name: out / name for name in ("metrics.csv", "metrics.json", "leaderboard.csv", "leaderboard.json", "boxplot.json", "spider.json")}
    _write_csv(paths["metrics.csv"], METRIC_COLUMNS, rows)
    _write_json(
        paths["metrics.json"],
        {
            "schema_version": REPORT_SCHEMA_VERSION,
            "n_folds": len(folds),
            "n_failed": n_failed,
            "rows": rows,
            "aggregates": aggregate_rows(folds),
            "folds": [
                {
                    "method": f.method,
                    "case_id": f.case_id,
                    "status": f.status,
                    "error": f.error,
                    "score": f.score,
                    "seconds": f.seconds,
                    "checkpoints": f.checkpoints,
                    "notes": {r.structure: r.notes for r in f.reports if r.notes},
                }
                for f in folds
            ],
        },
    )
    board = [{**c.summary(), "n_failed": failed[c.method]} for c in cards]
    _write_csv(paths["leaderboard.csv"], LEADERBOARD_COLUMNS, board)
    _write_json(paths["leaderboard.json"], {"schema_version": REPORT_SCHEMA_VERSION, "n_failed": n_failed, "methods": board})
    _write_json(paths["boxplot.json"], {"schema_version": REPORT_SCHEMA_VERSION, "methods": [c.summary() for c in cards]})
    _write_json(
        paths["spider.json"],
        {"schema_version": REPORT_SCHEMA_VERSION, "methods": [{"method": c.method, "scores": c.scores} for c in cards]},
    )
    return paths


def read_metric_rows(path: str | Path) -> list[dict]:
    """Parse a metrics.csv written by :func:`emit_reports` back into typed rows."""
    text_cols = {"method", "regularization", "strategy", "case_id", "status", "structure"}
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            rows.append({k: (v if k in text_cols else (None if v == "NA" else float(v))) for k, v in raw.items()})
    return rows


def folds_from_rows(rows: Sequence[dict]) -> list[FoldResult]:
    """Rebuild fold results (reports and scores) from metrics.csv rows."""
    folds: dict[tuple[str, str], FoldResult] = {}
    for row in rows:
        key = (row["method"], row["case_id"])
        f = folds.get(key)
        if f is None:
            f = folds[key] = FoldResult(row["method"], row["regularization"], row["strategy"], row["case_id"], row["status"])
        if row["status"] != "ok":
            continue
        f.score = row["case_score"]
        f.reports.append(MetricReport.from_record({k: row[k] for k in RECORD_FIELDS}))
    return list(folds.values())
