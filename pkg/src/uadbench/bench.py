"""Experiment orchestration: config, data materialisation, the train/score/evaluate
matrix, caching and report emission.

Results directory layout (``out``)::

    data/<dataset_id>/<subject>/{image,mask,gt}.nii.gz   synthesised volumes
    data/splits/<dataset_id>/{train,validation,test}.txt
    cache/<key>.pt (+ .history.jsonl)                       trained checkpoints
    scores/<cell>/<dataset>/<subject>/scores_<scorer>.nii.gz signed score fields
    results/<cell>__<dataset>.json                          one EvalReport each
    manifest.json                                           completed cells
    report/<dataset>.csv, report/*.png                      tables and plots
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .data import (
    DatasetSplit,
    PhantomConfig,
    SliceBatch,
    extract_slices,
    generate_phantoms,
    make_split,
    normalize_volume,
    read_dataset,
    read_split,
    subsample_training,
    write_dataset,
    write_split,
)
from .errors import EmptyResults, InvalidConfig, UADError
from .metrics import EvalReport, ResidualHistograms, correlation_matrix, evaluate, greedy_best_dice
from .postproc import PostprocConfig, postprocess_scores
from .scoring import ScoreVolume, score_volume
from .zoo import MethodTag, SCORERS, TrainConfig, TrainedModel, admissible, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WORKERS_ENV = "UADBENCH_WORKERS"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class MethodSpec:
    tag: MethodTag
    scorers: tuple


@dataclass(frozen=True)
class TestSetSpec:
    name: str
    n_subjects: int = 20
    anomaly_rate: float = 1.0
    lesion_intensity_mode: str = "hyper"
    validation_subjects: int = 5


@dataclass(frozen=True)
class DataSpec:
    n_healthy: int = 60
    healthy_validation: float = 0.2
    volume_shape: tuple = (64, 64, 32)
    slice_size: int = 64
    test_sets: tuple = (TestSetSpec("lesion"),)


@dataclass(frozen=True)
class ScoringSpec:
    n_samples: int = 100
    n_iters: int = 500
    step_size: float = 5e-3
    fidelity: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    methods: tuple
    seed: int = 0
    out: str = "runs/default"
    data: DataSpec = DataSpec()
    channels: tuple = (32, 64, 128, 128)
    train: TrainConfig = TrainConfig()
    postproc: PostprocConfig = PostprocConfig()
    scoring: ScoringSpec = ScoringSpec()
    fractions: tuple = (1.0,)

    @property
    def cells(self):
        return [(m.tag, s, f) for m in self.methods for s in m.scorers for f in self.fractions]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed), train=replace(self.train, seed=int(seed)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = [{"tag": m.tag.value, "scorers": list(m.scorers)} for m in self.methods]
        return json.loads(json.dumps(d, default=_jsonable))


def _jsonable(o):
    if isinstance(o, MethodTag):
        return o.value
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def _build(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise InvalidConfig(f"{where} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise InvalidConfig(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidConfig(f"{where}: {exc}") from exc


TOP_LEVEL = {"schema_version", "seed", "out", "data", "model", "train", "postproc",
             "scoring", "methods", "fractions"}


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config mapping (as loaded from YAML)."""
    if not isinstance(raw, dict):
        raise InvalidConfig("config must be a mapping")
    unknown = sorted(set(raw) - TOP_LEVEL)
    if unknown:
        raise InvalidConfig(f"unknown top-level key(s): {', '.join(unknown)}")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise InvalidConfig(f"schema_version must be {SCHEMA_VERSION}")
    seed = int(raw.get("seed", 0))

    data_raw = dict(raw.get("data") or {})
    test_sets = tuple(_build(TestSetSpec, t, "data.test_sets[]") for t in data_raw.pop("test_sets", []) or [])
    data = _build(DataSpec, data_raw, "data")
    if test_sets:
        data = replace(data, test_sets=test_sets)
    names = [t.name for t in data.test_sets]
    if len(set(names)) != len(names) or "healthy" in names:
        raise InvalidConfig("test set names must be unique and not 'healthy'")
    for t in data.test_sets:
        if not 0 <= t.validation_subjects < t.n_subjects:
            raise InvalidConfig(f"test set {t.name!r} needs at least one test subject")

    model = dict(raw.get("model") or {})
    extra = sorted(set(model) - {"channels"})
    if extra:
        raise InvalidConfig(f"unknown key(s) in model: {', '.join(extra)}")
    channels = tuple(model.get("channels", (32, 64, 128, 128)))

    train_cfg = _build(TrainConfig, raw.get("train"), "train")
    train_cfg = replace(train_cfg, seed=seed)
    pp = _build(PostprocConfig, raw.get("postproc"), "postproc")
    scoring = _build(ScoringSpec, raw.get("scoring"), "scoring")

    methods = []
    for i, m in enumerate(raw.get("methods") or []):
        if not isinstance(m, dict) or set(m) - {"tag", "scorers"} or "tag" not in m:
            raise InvalidConfig(f"methods[{i}] needs exactly 'tag' and optional 'scorers'")
        try:
            tag = MethodTag(m["tag"])
        except ValueError as exc:
            raise InvalidConfig(f"unknown method tag {m['tag']!r}") from exc
        scorers = tuple(m.get("scorers") or ("reconstruction",))
        for s in scorers:
            if s not in SCORERS:
                raise InvalidConfig(f"unknown scorer {s!r}")
            if not admissible(tag, s):
                raise InvalidConfig(f"scorer {s!r} is not admissible for {tag.value}")
        methods.append(MethodSpec(tag, scorers))
    if not methods:
        raise InvalidConfig("at least one method is required")
    fractions = tuple(float(f) for f in raw.get("fractions", (1.0,)))
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise InvalidConfig("fractions must lie in (0, 1]")
    return ExperimentConfig(
        methods=tuple(methods),
        seed=seed,
        out=str(raw.get("out", "runs/default")),
        data=data,
        channels=channels,
        train=train_cfg,
        postproc=pp,
        scoring=scoring,
        fractions=fractions,
    )


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw)


# ---------------------------------------------------------------------------
# data


def _phantom_seed(seed, index):
    # independent streams for the healthy cohort and each test set
    return int(np.random.SeedSequence([int(seed), index]).generate_state(1)[0])


def synthesize(cfg: ExperimentConfig, out) -> Path:
    """Generate and write all phantom datasets and their splits."""
    root = Path(out) / "data"
    healthy = generate_phantoms(PhantomConfig(
        n_subjects=cfg.data.n_healthy, anomaly_rate=0.0, seed=_phantom_seed(cfg.seed, 0),
        volume_shape=tuple(cfg.data.volume_shape), dataset_id="healthy"))
    write_dataset(healthy, root)
    ids = [v.subject_id for v in healthy]
    split = make_split(ids, 1.0 - cfg.data.healthy_validation, cfg.data.healthy_validation, cfg.seed)
    write_split(split, root / "splits" / "healthy")
    for i, t in enumerate(cfg.data.test_sets, start=1):
        vols = generate_phantoms(PhantomConfig(
            n_subjects=t.n_subjects, anomaly_rate=t.anomaly_rate,
            lesion_intensity_mode=t.lesion_intensity_mode, seed=_phantom_seed(cfg.seed, i),
            volume_shape=tuple(cfg.data.volume_shape), dataset_id=t.name))
        write_dataset(vols, root)
        ids = [v.subject_id for v in vols]
        write_split(DatasetSplit([], ids[:t.validation_subjects], ids[t.validation_subjects:]),
                    root / "splits" / t.name)
    return root


def ensure_data(cfg, out) -> Path:
    root = Path(out) / "data"
    expected = ["healthy"] + [t.name for t in cfg.data.test_sets]
    if not all((root / "splits" / name / "test.txt").exists() for name in expected):
        synthesize(cfg, out)
    return root


def _load(root, dataset, subjects):
    return [normalize_volume(v) for v in read_dataset(Path(root) / dataset, subjects)]


def _slices(volumes, size):
    return SliceBatch.concat([extract_slices(v, size) for v in volumes])


def _content_hash(volumes):
    h = hashlib.sha256()
    for v in volumes:
        h.update(v.subject_id.encode())
        h.update(np.ascontiguousarray(v.intensities).tobytes())
        h.update(np.ascontiguousarray(v.brain_mask).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# matrix cells


def cell_name(tag, scorer, fraction):
    return f"{MethodTag(tag).value}-{scorer}-f{fraction:g}"


def approach_name(tag, scorer, fraction, cfg):
    name = f"{MethodTag(tag).value} / {scorer}"
    if len(cfg.fractions) > 1:
        name += f" @ {fraction:.0%}"
    return name


def cache_key(tag, cfg: ExperimentConfig, data_hash: str, fraction: float) -> str:
    spec = MethodTag(tag).bottleneck(cfg.train, cfg.data.slice_size, cfg.channels)
    blob = json.dumps({
        "spec": asdict(spec),
        "train": asdict(cfg.train),
        "data": data_hash,
        "fraction": fraction,
        "seed": cfg.seed,
        "tag": MethodTag(tag).value,
    }, sort_keys=True, default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def train_cell(cfg: ExperimentConfig, out, tag, fraction) -> Path:
    """Train (or reuse) the model for one (method, fraction); returns the checkpoint path."""
    root = ensure_data(cfg, out)
    split = subsample_training(read_split(root / "splits" / "healthy"), fraction)
    tr = _load(root, "healthy", split.train)
    va = _load(root, "healthy", split.validation)
    key = cache_key(tag, cfg, _content_hash(tr) + _content_hash(va), fraction)
    path = Path(out) / "cache" / f"{key}.pt"
    if path.exists():
        log.info("cache hit for %s (%s)", MethodTag(tag).value, key)
        return path
    size = cfg.data.slice_size
    model = train(tag, _slices(tr, size), _slices(va, size), cfg.train, input_size=size,
                  channels=cfg.channels)
    tmp = path.with_name(path.stem + ".partial.pt")
    model.save(tmp)
    tmp.with_suffix(".history.jsonl").replace(path.with_suffix(".history.jsonl"))
    tmp.replace(path)
    return path


def _score_kwargs(cfg, scorer):
    s = cfg.scoring
    kw = dict(seed=cfg.seed, lambda_kl=cfg.train.lambda_kl)
    if scorer == "mc":
        kw.update(n_samples=s.n_samples, dropout_rate=cfg.train.dropout_rate)
    if scorer == "restoration":
        kw.update(n_iters=s.n_iters, step_size=s.step_size, fidelity=s.fidelity)
    return kw


def score_cell(cfg, out, tag, scorer, fraction, checkpoint) -> list:
    """Write signed score volumes for every validation and test subject of each test set."""
    root = ensure_data(cfg, out)
    model = TrainedModel.load(checkpoint)
    written = []
    for t in cfg.data.test_sets:
        split = read_split(root / "splits" / t.name)
        for v in _load(root, t.name, split.validation + split.test):
            sv = score_volume(model, v, scorer, size=cfg.data.slice_size, **_score_kwargs(cfg, scorer))
            written.append(sv.save(Path(out) / "scores" / cell_name(tag, scorer, fraction) / t.name / v.subject_id))
    return written


def _read_scores(path):
    import nibabel as nib

    return np.asarray(nib.load(str(path)).dataobj, dtype=np.float32)


def evaluate_cell(cfg, out, tag, scorer, fraction) -> list:
    """EvalReport per test set; the operating point comes from the validation subjects."""
    root = ensure_data(cfg, out)
    cell = cell_name(tag, scorer, fraction)
    pp = cfg.postproc
    paths = []
    for t in cfg.data.test_sets:
        split = read_split(root / "splits" / t.name)

        def processed(subjects):
            vols = _load(root, t.name, subjects)
            scores = [postprocess_scores(
                _read_scores(Path(out) / "scores" / cell / t.name / v.subject_id / f"scores_{scorer}.nii.gz"),
                v.brain_mask, pp) for v in vols]
            return vols, scores

        op = pp.threshold
        if op is None and split.validation:
            vols, scores = processed(split.validation)
            op = greedy_best_dice(scores, [v.gt_mask for v in vols], pp)[1]
        vols, scores = processed(split.test)
        report, hists = evaluate(approach_name(tag, scorer, fraction, cfg), scores,
                                 [v.gt_mask for v in vols], [v.brain_mask for v in vols], pp,
                                 op_threshold=op)
        payload = {
            "cell": cell,
            "dataset": t.name,
            "method": MethodTag(tag).value,
            "scorer": scorer,
            "fraction": fraction,
            "n_train_subjects": len(subsample_training(read_split(root / "splits" / "healthy"), fraction).train),
            "report": report.to_dict(),
            "normal_hist": hists.normal_hist.tolist(),
            "anom_hist": hists.anom_hist.tolist(),
        }
        path = Path(out) / "results" / f"{cell}__{t.name}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=1, sort_keys=True, default=float))
        paths.append(path)
    return paths


def _run_cell(args):
    cfg, out, tag, scorer, fraction = args
    ckpt = train_cell(cfg, out, tag, fraction)
    score_cell(cfg, out, tag, scorer, fraction, ckpt)
    evaluate_cell(cfg, out, tag, scorer, fraction)
    return cell_name(tag, scorer, fraction)


def _write_manifest(out, cfg, completed, failed=None):
    manifest = {
        "config": cfg.to_dict(),
        "completed": sorted(completed),
        "pending": sorted(set(cell_name(*c) for c in cfg.cells) - set(completed)),
    }
    if failed:
        manifest["failed"] = failed
    path = Path(out) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError as exc:
        raise InvalidConfig(f"{WORKERS_ENV} must be an integer") from exc


def run_experiment(cfg: ExperimentConfig, out=None) -> Path:
    """Run the whole matrix, then emit the report.  Stops at the first failure
    and records what finished in ``manifest.json``."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ensure_data(cfg, out)
    # train each (method, fraction) once before fanning out over scorers
    seen = set()
    jobs = []
    for tag, scorer, fraction in cfg.cells:
        jobs.append((cfg, str(out), tag, scorer, fraction))
        seen.add((tag, fraction))
    completed = []
    n = workers()
    try:
        if n == 1:
            for job in jobs:
                completed.append(_run_cell(job))
                _write_manifest(out, cfg, completed)
        else:
            for tag, fraction in sorted(seen, key=lambda p: (p[0].value, p[1])):
                train_cell(cfg, out, tag, fraction)
            with ProcessPoolExecutor(max_workers=n) as pool:
                for name in pool.map(_run_cell, jobs):
                    completed.append(name)
                    _write_manifest(out, cfg, completed)
    except UADError as exc:
        _write_manifest(out, cfg, completed, {"category": exc.category, "message": str(exc)})
        raise
    _write_manifest(out, cfg, completed)
    emit_report(out)
    return out


# ---------------------------------------------------------------------------
# reporting


def load_results(out) -> list:
    paths = sorted((Path(out) / "results").glob("*.json"))
    return [json.loads(p.read_text()) for p in paths]


def _report_from(d) -> EvalReport:
    return EvalReport(**d)


def results_table(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EvalReport.COLUMNS)
    for r in rows:
        writer.writerow(_report_from(r["report"]).row())
    return buf.getvalue()


def emit_report(out) -> list:
    """Per-dataset CSV tables plus plots; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    results = load_results(out)
    if not results:
        raise EmptyResults(f"no completed results under {out}")
    report_dir = Path(out) / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    written = []
    datasets = sorted({r["dataset"] for r in results})
    for ds in datasets:
        rows = [r for r in results if r["dataset"] == ds]
        rows.sort(key=lambda r: (r["method"], r["scorer"], -r["fraction"]))
        csv_path = report_dir / f"{ds}.csv"
        csv_path.write_text(results_table(rows), encoding="utf-8")
        written.append(csv_path)

        names = [r["report"]["approach"] for r in rows]
        fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(rows) + 2), 4))
        ax.bar(range(len(rows)), [r["report"]["auprc"] for r in rows])
        ax.set_xticks(range(len(rows)), names, rotation=60, ha="right", fontsize=7)
        ax.set_ylabel("AUPRC")
        ax.set_title(ds)
        fig.tight_layout()
        written.append(_save(fig, report_dir / f"{ds}_auprc.png"))

        for r in rows:
            edges = np.linspace(0, 1, len(r["normal_hist"]) + 1)
            fig, ax = plt.subplots(figsize=(5, 3))
            ax.stairs(r["normal_hist"], edges, label="normal", color="tab:blue")
            ax.stairs(r["anom_hist"], edges, label="anomalous", color="tab:red")
            ax.set_xlabel("residual")
            ax.set_title(r["report"]["approach"], fontsize=8)
            ax.legend()
            fig.tight_layout()
            written.append(_save(fig, report_dir / f"{ds}_hist_{r['cell']}.png"))

        if len(rows) >= 3:
            reports = [_report_from(r["report"]) for r in rows]
            corr = correlation_matrix(reports)
            labels = ["AUPRC", "⌈DICE⌉", "ℓ1-RE_N", "ℓ1-RE_A", "χ²"]
            grid = report_dir / f"{ds}_correlation.csv"
            with grid.open("w") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow([""] + labels)
                for lab, line in zip(labels, corr):
                    w.writerow([lab] + [f"{v:.4f}" for v in line])
            written.append(grid)
            fig, ax = plt.subplots(figsize=(4.5, 4))
            im = ax.imshow(np.nan_to_num(corr), vmin=-1, vmax=1, cmap="coolwarm")
            ax.set_xticks(range(5), labels, rotation=45)
            ax.set_yticks(range(5), labels)
            fig.colorbar(im)
            fig.tight_layout()
            written.append(_save(fig, report_dir / f"{ds}_correlation.png"))

        fractions = sorted({r["fraction"] for r in rows})
        if len(fractions) > 1:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for key in sorted({(r["method"], r["scorer"]) for r in rows}):
                pts = sorted((r["n_train_subjects"], r["report"]["auprc"]) for r in rows
                             if (r["method"], r["scorer"]) == key)
                ax.plot(*zip(*pts), marker="o", label=" / ".join(key))
            ax.set_xlabel("training subjects")
            ax.set_ylabel("AUPRC")
            ax.legend(fontsize=7)
            fig.tight_layout()
            written.append(_save(fig, report_dir / f"{ds}_subjects.png"))
    return written


def _save(fig, path):
    import matplotlib.pyplot as plt

    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
