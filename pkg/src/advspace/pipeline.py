"""End-to-end experiment orchestration and the on-disk results bundle.

Each stage reads what earlier stages persisted and writes only its own files,
so stages can be re-run individually from the CLI. Every float is written with
``repr`` and every job draws from an rng keyed on (seed, dataset, model,
attack, trial), which makes deterministic-time bundles byte-identical.
"""
from __future__ import annotations

import csv
import json
import math
import platform
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .attacks import (KNOWN_ATTACKS, SLOTS, TRAJECTORY_HEADER, AttackConfig, craft, decode, resolve_attacks,
                      trajectory_rows)
from .config import ExperimentConfig, DatasetSource
from .data import ingest_csv, make_synthetic, train_test_split
from .evaluation import (SuccessFrontier, ThreatModel, area_to_oea, curve_from_budgets, defeat_budgets,
                         format_percent, min_budget_to_threshold, oea, rank_attacks, success_frontier, table_rows)
from .model import Dataset, accuracy, adversarially_train, init_net, load_checkpoint, pgd_accuracy, save_checkpoint, train
from .stats import (AreaTable, build_hypothesis_space, robust_delta, run_hypotheses, significance_filter,
                    sort_results, spearman)
from .surface import norm_name, parse_norm

MODELS = ("standard", "robust")


class MissingArtifactError(FileNotFoundError):
    """A stage needs output from an earlier stage that has not been produced."""


def derived_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _fmt(v: float) -> str:
    return repr(float(v))


def _writer(path: Path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def _read(path: Path) -> list[dict]:
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run the stage that produces it first")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def threat_models(cfg: ExperimentConfig) -> list[ThreatModel]:
    grid = np.linspace(0.0, 1.0, cfg.grid_points)
    return [ThreatModel(p, t, grid) for p in cfg.norms for t in cfg.thetas]


def curve_filename(tm: ThreatModel) -> str:
    return f"curves_{norm_name(tm.norm)}_{tm.theta:g}.csv"


# ---------------------------------------------------------------- data + models

@dataclass(frozen=True)
class PreparedData:
    name: str
    train: Dataset
    test: Dataset
    attack: Dataset
    scaler_json: str | None = None


def prepare_dataset(cfg: ExperimentConfig, index: int) -> PreparedData:
    src: DatasetSource = cfg.datasets[index]
    scaler = None
    if src.kind == "csv":
        loaded = ingest_csv(src.path, src.label_column)
        data, scaler = loaded.dataset, loaded.scaler.to_json()
    else:
        data = make_synthetic(src.synthetic)
    tr, te = train_test_split(data, cfg.test_fraction, derived_seed(cfg.seed, index))
    attack = te.subset(np.arange(min(cfg.attack_samples, len(te))))
    return PreparedData(src.name, tr, te, attack, scaler)


def model_path(out: Path, dataset: str, model: str) -> Path:
    return out / "models" / (f"{dataset}.json" if model == "standard" else f"{dataset}_robust.json")


def _initial_net(cfg: ExperimentConfig, data: PreparedData, index: int):
    sizes = [data.train.dim, *cfg.hidden, data.train.class_count]
    return init_net(sizes, derived_seed(cfg.seed, index, 0))


def stage_train(cfg: ExperimentConfig, out: Path) -> list[dict]:
    (out / "models").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(cfg.datasets)):
        data = prepare_dataset(cfg, i)
        tcfg = replace(cfg.train, seed=derived_seed(cfg.seed, i, 1, cfg.train.seed))
        net, history = train(_initial_net(cfg, data, i), data.train, tcfg)
        save_checkpoint(net, model_path(out, data.name, "standard"))
        if data.scaler_json is not None:
            (out / "models" / f"{data.name}_scaler.json").write_text(data.scaler_json)
        rows.append(_model_summary(cfg, data, "standard", net, history))
    return rows


def stage_advtrain(cfg: ExperimentConfig, out: Path) -> list[dict]:
    if cfg.advtrain is None:
        return []
    (out / "models").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(cfg.datasets)):
        data = prepare_dataset(cfg, i)
        acfg = replace(cfg.advtrain, seed=derived_seed(cfg.seed, i, 1, cfg.advtrain.seed))
        net, history = adversarially_train(_initial_net(cfg, data, i), data.train, acfg)
        save_checkpoint(net, model_path(out, data.name, "robust"))
        rows.append(_model_summary(cfg, data, "robust", net, history))
    return rows


def _model_summary(cfg, data: PreparedData, model: str, net, history) -> dict:
    eps = cfg.advtrain.rr_epsilon if cfg.advtrain is not None else cfg.rr_epsilon
    return {
        "dataset": data.name,
        "model": model,
        "train_loss": history[-1] if history else math.nan,
        "train_accuracy": accuracy(net, data.train.features, data.train.labels),
        "test_accuracy": accuracy(net, data.test.features, data.test.labels),
        "pgd_epsilon": eps,
        "pgd_accuracy": pgd_accuracy(net, data.test, eps, seed=derived_seed(cfg.seed, 7)),
    }


def write_model_summary(rows: list[dict], path: Path) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(["dataset", "model", "train_loss", "train_accuracy", "test_accuracy", "pgd_epsilon",
                    "pgd_accuracy"])
        for r in rows:
            w.writerow([r["dataset"], r["model"]] + [_fmt(r[k]) for k in
                       ("train_loss", "train_accuracy", "test_accuracy", "pgd_epsilon", "pgd_accuracy")])


# ---------------------------------------------------------------- attack stage

@dataclass
class JobResult:
    dataset: str
    model: str
    attack_id: int
    trial: int
    samples: int
    total_time: float = 0.0
    aborted: int = 0
    error: str = ""
    frontiers: dict | None = None
    record: object = None


def _attack_job(job) -> JobResult:
    (keys, dataset, model, net, x, y, config, trial, max_iters, time_mode, norms, keep) = job
    rng = np.random.default_rng(list(keys))
    try:
        rec = craft(net, x, y, config, max_iters, rng, time_mode, trial)
    except Exception as exc:  # recorded per attack id; the sweep carries on
        return JobResult(dataset, model, config.attack_id, trial, len(y), error=f"{type(exc).__name__}: {exc}")
    fronts = {p: success_frontier(rec, p) for p in norms}
    return JobResult(dataset, model, config.attack_id, trial, len(y), float(rec.elapsed[-1]),
                     int(rec.aborted.sum()), "", fronts, rec if keep else None)


def attack_configs(cfg: ExperimentConfig) -> list[AttackConfig]:
    steps = cfg.step_sizes
    return [replace(a, step_size=steps[a.norm]) for a in
            resolve_attacks(cfg.attacks, rr_epsilon=cfg.rr_epsilon, cw_tradeoff=cfg.cw_tradeoff)]


def _jobs(cfg: ExperimentConfig, out: Path):
    attacks = attack_configs(cfg)
    for di in range(len(cfg.datasets)):
        data = prepare_dataset(cfg, di)
        for mi, model in enumerate(MODELS):
            path = model_path(out, data.name, model)
            if model == "robust" and not cfg.robust:
                continue
            if not path.exists():
                raise MissingArtifactError(f"{path} not found; run the train/advtrain stage first")
            net = load_checkpoint(path)
            x, y = data.attack.features, data.attack.labels
            for a in attacks:
                for t in range(cfg.trials):
                    yield ((cfg.seed, di, mi, a.attack_id, t), data.name, model, net, x, y, a, t,
                           cfg.max_iters, cfg.time_mode, cfg.norms, cfg.save_trajectories)


FRONTIER_HEADER = ("dataset", "model", "attack_id", "trial", "norm", "sample", "distance", "time")
RUNS_HEADER = ("dataset", "model", "attack_id", "trial", "samples", "total_time", "aborted", "error")


def stage_attack(cfg: ExperimentConfig, out: Path) -> list[JobResult]:
    """Craft every (dataset, model, attack, trial) job and stream results through one writer."""
    out.mkdir(parents=True, exist_ok=True)
    for src in cfg.datasets:
        for model in MODELS[: 1 + cfg.robust]:
            if not model_path(out, src.name, model).exists():
                raise MissingArtifactError(f"{model_path(out, src.name, model)} not found; "
                                           "run the train/advtrain stage first")
    jobs = _jobs(cfg, out)
    executor = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    results = executor.map(_attack_job, jobs, chunksize=8) if executor else map(_attack_job, jobs)
    failures = []
    ffh, fw = _writer(out / "frontier.csv")
    rfh, rw = _writer(out / "runs.csv")
    tfh = tw = None
    if cfg.save_trajectories:
        tfh, tw = _writer(out / "trajectories.csv")
        tw.writerow(("dataset", "model") + TRAJECTORY_HEADER)
    try:
        fw.writerow(FRONTIER_HEADER)
        rw.writerow(RUNS_HEADER)
        for r in results:
            rw.writerow([r.dataset, r.model, r.attack_id, r.trial, r.samples, _fmt(r.total_time), r.aborted,
                         r.error])
            if r.error:
                failures.append(r)
                continue
            for p, front in r.frontiers.items():
                name = norm_name(p)
                for s, dist, tm in zip(front.sample, front.distance, front.time):
                    fw.writerow([r.dataset, r.model, r.attack_id, r.trial, name, int(s), _fmt(dist), _fmt(tm)])
            if tw is not None and r.record is not None:
                tw.writerows(trajectory_rows(r.record, (r.dataset, r.model)))
    finally:
        ffh.close()
        rfh.close()
        if tfh is not None:
            tfh.close()
        if executor is not None:
            executor.shutdown()
    return failures


# ---------------------------------------------------------------- loading persisted runs

@dataclass
class RunSet:
    """Per-(dataset, model) success frontiers loaded back from disk."""

    dataset: str
    model: str
    samples: int
    time_norm: float
    attacks: list[int]
    trials: list[int]
    frontiers: dict  # (attack_id, trial, norm) -> SuccessFrontier


def load_runs(out: Path) -> list[RunSet]:
    runs = _read(out / "runs.csv")
    groups: dict[tuple, dict] = {}
    for r in runs:
        key = (r["dataset"], r["model"])
        g = groups.setdefault(key, {"samples": int(r["samples"]), "time": 0.0, "ok": set()})
        if not r["error"]:
            g["time"] = max(g["time"], float(r["total_time"]))
            g["ok"].add((int(r["attack_id"]), int(r["trial"])))
    raw = defaultdict(lambda: ([], [], []))
    path = out / "frontier.csv"
    if not path.exists():
        raise MissingArtifactError(f"{path} not found; run the attack stage first")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for ds, model, aid, trial, norm, s, dist, tm in reader:
            bucket = raw[(ds, model, int(aid), int(trial), parse_norm(norm))]
            bucket[0].append(int(s))
            bucket[1].append(float(dist))
            bucket[2].append(float(tm))
    out_sets = []
    for (ds, model), g in groups.items():
        n = g["samples"]
        fronts = {}
        for (aid, trial) in g["ok"]:
            for p in (0.0, 2.0, np.inf):
                s, d, t = raw.get((ds, model, aid, trial, p), ([], [], []))
                fronts[(aid, trial, p)] = SuccessFrontier(n, np.array(s, dtype=np.int64), np.array(d), np.array(t))
        attacks = sorted({a for a, _ in g["ok"]})
        trials = sorted({t for _, t in g["ok"]})
        out_sets.append(RunSet(ds, model, n, g["time"] if g["time"] > 0 else 1.0, attacks, trials, fronts))
    return out_sets


# ---------------------------------------------------------------- evaluation stage

@dataclass
class ThreatResult:
    """Curves, areas and min-budgets for one (dataset, model, threat model)."""

    dataset: str
    model: str
    threat: ThreatModel
    attacks: list[int]
    trials: list[int]
    accuracy: np.ndarray      # (trials, attacks, grid)
    envelope: np.ndarray      # (trials, grid)
    areas: np.ndarray         # (trials, attacks)
    min_budgets: np.ndarray   # (trials, attacks)

    def median_curve(self, j: int) -> np.ndarray:
        return np.median(self.accuracy[:, j], axis=0)

    def median_envelope(self) -> np.ndarray:
        return np.median(self.envelope, axis=0)

    def median_areas(self) -> dict[int, float]:
        return dict(zip(self.attacks, np.median(self.areas, axis=0).tolist()))

    def median_min_budgets(self) -> dict[int, float]:
        return dict(zip(self.attacks, np.median(self.min_budgets, axis=0).tolist()))


def evaluate_threat(runs: RunSet, tm: ThreatModel, threshold: float = 0.01) -> ThreatResult:
    na, nt, ng = len(runs.attacks), len(runs.trials), tm.grid.size
    acc = np.zeros((nt, na, ng))
    env = np.zeros((nt, ng))
    areas = np.zeros((nt, na))
    mins = np.zeros((nt, na))
    for ti, trial in enumerate(runs.trials):
        curves = []
        for ai, aid in enumerate(runs.attacks):
            budgets = defeat_budgets(runs.frontiers[(aid, trial, tm.norm)], tm, runs.time_norm)
            curves.append(curve_from_budgets(budgets, tm.grid))
            acc[ti, ai] = curves[-1].accuracy
        envelope = oea(curves)
        env[ti] = envelope.accuracy
        for ai, c in enumerate(curves):
            areas[ti, ai] = area_to_oea(c, envelope)
            mins[ti, ai] = min_budget_to_threshold(c, threshold)
    return ThreatResult(runs.dataset, runs.model, tm, list(runs.attacks), list(runs.trials), acc, env, areas, mins)


def evaluate_all(cfg: ExperimentConfig, out: Path) -> list[ThreatResult]:
    results = []
    for runs in load_runs(out):
        for tm in threat_models(cfg):
            results.append(evaluate_threat(runs, tm, cfg.threshold))
    return results


AREAS_HEADER = ("dataset", "model", "norm", "theta", "attack_id", "trial", "area", "min_budget")


def stage_evaluate(cfg: ExperimentConfig, out: Path) -> list[ThreatResult]:
    results = evaluate_all(cfg, out)
    by_threat = defaultdict(list)
    for r in results:
        by_threat[curve_filename(r.threat)].append(r)
    for name, group in by_threat.items():
        attacks = sorted({a for r in group for a in r.attacks})
        fh, w = _writer(out / name)
        with fh:
            w.writerow(["dataset", "model", "budget"] + [str(a) for a in attacks] + ["OEA"])
            for r in group:
                cols = {a: r.median_curve(j) for j, a in enumerate(r.attacks)}
                envelope = r.median_envelope()
                for g, b in enumerate(r.threat.grid):
                    w.writerow([r.dataset, r.model, _fmt(b)]
                               + [_fmt(cols[a][g]) if a in cols else "" for a in attacks]
                               + [_fmt(envelope[g])])
    fh, w = _writer(out / "areas.csv")
    with fh:
        w.writerow(AREAS_HEADER)
        for r in results:
            for ti, trial in enumerate(r.trials):
                for ai, aid in enumerate(r.attacks):
                    w.writerow([r.dataset, r.model, norm_name(r.threat.norm), _fmt(r.threat.theta), aid, trial,
                                _fmt(r.areas[ti, ai]), _fmt(r.min_budgets[ti, ai])])
    return results


def load_areas(out: Path):
    """Median-over-trials area and min-budget per (dataset, model, threat name, attack id)."""
    acc = defaultdict(lambda: ([], []))
    for r in _read(out / "areas.csv"):
        threat = f"{r['norm']}+{float(r['theta']):g}"
        bucket = acc[(r["dataset"], r["model"], threat, int(r["attack_id"]))]
        bucket[0].append(float(r["area"]))
        bucket[1].append(float(r["min_budget"]))
    return {k: (float(np.median(a)), float(np.median(b))) for k, (a, b) in acc.items()}


# ---------------------------------------------------------------- ranking stage

RANKING_HEADER = ("dataset", "model", "threat", "rank", "attack_id", "alias", "loss", "saliency", "norm",
                  "optimizer", "rr", "cov", "budget", "change")


def _known_ids() -> dict[int, str]:
    return {AttackConfig(*comps).attack_id: name for name, comps in KNOWN_ATTACKS.items()}


def rank_segment(budgets: dict[int, float], norm: float):
    """Rank attacks sharing the threat model's norm against the best known attack among them."""
    seg = {a: b for a, b in budgets.items() if decode(a).norm == parse_norm(norm)}
    known = {a: n for a, n in _known_ids().items() if a in seg}
    reference = min((seg[a] for a in known), default=math.nan)
    ranked = rank_attacks(seg, reference if known else None)
    return ranked, known


def ranking_rows(dataset: str, model: str, threat: str, ranked, known) -> list[list]:
    rows = []
    for r in ranked:
        d = decode(r.attack_id).describe()
        rows.append([dataset, model, threat, r.rank, r.attack_id, known.get(r.attack_id, ""), d["loss"],
                     d["saliency"], d["norm"], d["optimizer"], d["rr"], d["cov"], _fmt(r.value),
                     format_percent(r.percent)])
    return rows


def stage_rank(cfg: ExperimentConfig, out: Path, threat: str | None = None) -> list[list]:
    areas = load_areas(out)
    contexts = sorted({k[:3] for k in areas}, key=lambda k: (k[0], MODELS.index(k[1]), k[2]))
    full, table = [], []
    for ds, model, tname in contexts:
        if threat is not None and tname != threat:
            continue
        budgets = {k[3]: v[1] for k, v in areas.items() if k[:3] == (ds, model, tname)}
        ranked, known = rank_segment(budgets, tname.split("+")[0])
        full += ranking_rows(ds, model, tname, ranked, known)
        table += ranking_rows(ds, model, tname, table_rows(ranked, known), known)
    if threat is None:
        for name, rows in (("ranking.csv", full), ("ranking_table.csv", table)):
            fh, w = _writer(out / name)
            with fh:
                w.writerow(RANKING_HEADER)
                w.writerows(rows)
    return table


def format_ranking_table(rows: list[list]) -> str:
    """Fixed-width rendering of condensed ranking rows (one block per context)."""
    header = ("Rank", "Attack", "Loss", "Saliency", "Norm", "Optimizer", "RR", "CoV", "Budget", "Change")
    lines, current = [], None
    for r in rows:
        ctx = tuple(r[:3])
        if ctx != current:
            current = ctx
            lines += ["", f"{ctx[0]} / {ctx[1]} / {ctx[2]}", "  ".join(f"{h:<10}" for h in header)]
        budget = float(r[12])
        cells = (r[3], r[5] or f"A{r[4]}", r[6], r[7], r[8], r[9], "yes" if r[10] else "no",
                 "yes" if r[11] else "no", "inf" if math.isinf(budget) else f"{budget:.2f}", r[13])
        lines.append("  ".join(f"{str(c):<10}" for c in cells))
    return "\n".join(lines).lstrip("\n") + "\n"


# ---------------------------------------------------------------- correlation stage

def _area_vectors(out: Path):
    """Per-trial area vectors keyed by (dataset, model, threat, trial)."""
    vec = defaultdict(dict)
    for r in _read(out / "areas.csv"):
        threat = f"{r['norm']}+{float(r['theta']):g}"
        vec[(r["dataset"], r["model"], threat, int(r["trial"]))][int(r["attack_id"])] = float(r["area"])
    return vec


def _rho(u: dict, v: dict) -> float:
    common = sorted(set(u) & set(v))
    if len(common) < 2:
        return math.nan
    return spearman([u[a] for a in common], [v[a] for a in common])


def _nanmedian(values) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(np.median(values)) if values else math.nan


def correlation_matrices(out: Path) -> dict[str, tuple[list, list, np.ndarray]]:
    vec = _area_vectors(out)
    datasets = list(dict.fromkeys(k[0] for k in vec))
    models = [m for m in MODELS if any(k[1] == m for k in vec)]
    threats = list(dict.fromkeys(k[2] for k in vec))
    trials = sorted({k[3] for k in vec})

    def matrix(labels, pick):
        m = np.full((len(labels), len(labels)), math.nan)
        for i, a in enumerate(labels):
            for j, b in enumerate(labels):
                m[i, j] = _nanmedian(pick(a, b))
        return m

    def by_threat(a, b):
        return [_rho(vec[(d, m, a, t)], vec[(d, m, b, t)]) for d in datasets for m in models for t in trials
                if (d, m, a, t) in vec and (d, m, b, t) in vec]

    def by_dataset(a, b):
        return [_rho(vec[(a, m, th, t)], vec[(b, m, th, t)]) for m in models for th in threats for t in trials
                if (a, m, th, t) in vec and (b, m, th, t) in vec]

    out_m = {"threat": (threats, threats, matrix(threats, by_threat)),
             "dataset": (datasets, datasets, matrix(datasets, by_dataset))}
    if "robust" in models:
        robust = np.full((len(threats), len(datasets)), math.nan)
        for i, th in enumerate(threats):
            for j, d in enumerate(datasets):
                robust[i, j] = _nanmedian([_rho(vec[(d, "standard", th, t)], vec[(d, "robust", th, t)])
                                           for t in trials
                                           if (d, "standard", th, t) in vec and (d, "robust", th, t) in vec])
        out_m["robust"] = (threats, datasets, robust)
    return out_m


def _write_matrix(path: Path, rows, cols, m: np.ndarray, corner: str) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow([corner] + list(cols))
        for label, row in zip(rows, m):
            w.writerow([label] + [_fmt(v) for v in row])


def stage_correlate(cfg: ExperimentConfig, out: Path) -> dict:
    mats = correlation_matrices(out)
    corners = {"threat": "threat", "dataset": "dataset", "robust": "threat"}
    for axis, (rows, cols, m) in mats.items():
        _write_matrix(out / f"spearman_{axis}.csv", rows, cols, m, corners[axis])
    return mats


# ---------------------------------------------------------------- hypothesis stage

HYPOTHESIS_HEADER = ("slot", "h1", "h2", "condition", "p_value", "effect_size", "n_pairs", "flag", "significant")
DELTA_HEADER = ("slot", "h1", "h2", "condition", "effect_nonrobust", "effect_robust", "delta", "p_robust")


def area_table(out: Path, model: str) -> AreaTable:
    table = AreaTable()
    for (ds, m, threat, aid), (area, _) in load_areas(out).items():
        if m == model:
            table.add(ds, threat, aid, area)
    return table


def hypothesis_results(cfg: ExperimentConfig, out: Path, model: str):
    table = area_table(out, model)
    space = build_hypothesis_space(datasets=table.datasets(), threat_models=table.threats())
    results = sort_results(run_hypotheses(table, space))
    significant, threshold = significance_filter(results, cfg.alpha)
    return results, {r.hypothesis.key for r in significant}, threshold


def _write_hypotheses(path: Path, results, significant, delta=None) -> None:
    fh, w = _writer(path)
    with fh:
        w.writerow(HYPOTHESIS_HEADER + (("delta",) if delta is not None else ()))
        for r in results:
            row = list(r.hypothesis.key) + [_fmt(r.p_value), _fmt(r.effect_size), r.n_pairs, r.flag,
                                            int(r.hypothesis.key in significant)]
            if delta is not None:
                row.append(_fmt(delta[r.hypothesis.key]) if r.hypothesis.key in delta else "")
            w.writerow(row)


def stage_hypotheses(cfg: ExperimentConfig, out: Path) -> dict:
    areas = load_areas(out)
    models = [m for m in MODELS if any(k[1] == m for k in areas)]
    produced, marks = {}, {}
    for model in models:
        results, significant, threshold = hypothesis_results(cfg, out, model)
        produced[model], marks[model] = (results, threshold), significant
    if "standard" in produced:
        _write_hypotheses(out / "hypotheses.csv", produced["standard"][0], marks["standard"])
    if "standard" in produced and "robust" in produced:
        rows = robust_delta(produced["standard"][0], produced["robust"][0])
        delta = {d.hypothesis.key: d.delta for d in rows}
        _write_hypotheses(out / "hypotheses_robust.csv", produced["robust"][0], marks["robust"], delta)
        fh, w = _writer(out / "robust_delta.csv")
        with fh:
            w.writerow(DELTA_HEADER)
            for d in rows:
                w.writerow(list(d.hypothesis.key) + [_fmt(d.effect_nonrobust), _fmt(d.effect_robust),
                                                     _fmt(d.delta), _fmt(d.p_robust)])
        produced["delta"] = rows
    return produced


# ---------------------------------------------------------------- report stage

def stage_report(cfg: ExperimentConfig, out: Path) -> list[Path]:
    """Plot-ready tables: tidy curves for notable attacks and heatmap matrices."""
    report = out / "report"
    report.mkdir(exist_ok=True)
    written = []
    known = _known_ids()
    path = report / "curves.csv"
    fh, w = _writer(path)
    with fh:
        w.writerow(["dataset", "model", "threat", "series", "budget", "accuracy"])
        for r in evaluate_all(cfg, out):
            areas = r.median_areas()
            best = min(areas, key=lambda a: (areas[a], a))
            series = [(known[a] if a in known else f"A{a}", r.median_curve(r.attacks.index(a)))
                      for a in sorted(set(known) & set(r.attacks) | {best})]
            series.append(("OEA", r.median_envelope()))
            for name, curve in series:
                for b, a in zip(r.threat.grid, curve):
                    w.writerow([r.dataset, r.model, r.threat.name, name, _fmt(b), _fmt(a)])
    written.append(path)
    for axis, (rows, cols, m) in correlation_matrices(out).items():
        path = report / f"heatmap_spearman_{axis}.csv"
        _write_matrix(path, rows, cols, m, "threat" if axis != "dataset" else "dataset")
        written.append(path)
    for name in ("hypotheses.csv", "hypotheses_robust.csv"):
        if not (out / name).exists():
            continue
        rows = [r for r in _read(out / name) if r["condition"] == "always"]
        for slot in SLOTS:
            sub = [r for r in rows if r["slot"] == slot]
            values = list(dict.fromkeys([r["h1"] for r in sub] + [r["h2"] for r in sub]))
            if not values:
                continue
            m = np.full((len(values), len(values)), math.nan)
            for r in sub:
                m[values.index(r["h1"]), values.index(r["h2"])] = float(r["effect_size"])
            path = report / f"heatmap_effect_{name[:-4]}_{slot}.csv"
            _write_matrix(path, values, values, m, "h1\\h2")
            written.append(path)
    return written


# ---------------------------------------------------------------- manifest + driver

def write_manifest(cfg: ExperimentConfig, out: Path, failures=(), models=()) -> dict:
    manifest = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "versions": {"advspace": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "failures": [{"dataset": f.dataset, "model": f.model, "attack_id": f.attack_id, "trial": f.trial,
                      "error": f.error} for f in failures],
        "models": list(models),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def run_experiment(cfg: ExperimentConfig, out=None, log=None) -> Path:
    """Train, attack, evaluate, rank, correlate and test hypotheses; returns the bundle directory."""
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    say = log or (lambda msg: None)
    say("training models")
    summary = stage_train(cfg, out) + stage_advtrain(cfg, out)
    write_model_summary(summary, out / "models.csv")
    say(f"crafting {len(attack_configs(cfg))} attacks x {cfg.trials} trials")
    failures = stage_attack(cfg, out)
    say("evaluating curves")
    stage_evaluate(cfg, out)
    stage_rank(cfg, out)
    stage_correlate(cfg, out)
    say("testing hypotheses")
    stage_hypotheses(cfg, out)
    stage_report(cfg, out)
    write_manifest(cfg, out, failures, [f"{r['dataset']}/{r['model']}" for r in summary])
    return out
