"""Grid sweeps over budgets, algorithms and tuning axes, with CSV output.

The long-form table has one row per (epsilon, algorithm, cap, clip_norm,
rr_epochs, dpsgd_epochs, seed). The summary keeps, for every (epsilon,
algorithm), the tuning setting with the lowest mean relative AUC loss over
seeds (highest mean AUC when no baseline is known).
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import logging
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import RunConfig, SweepGrid, derive_seeds, parse_model_config
from .errors import HybridDPError
from .metrics import aggregate, format_mean_std, relative_auc_loss
from .privacy import PrivacyBudget
from .train import TrainConfig, UserLevelConfig, train

logger = logging.getLogger(__name__)

KEY_COLUMNS = ["epsilon", "algorithm", "cap", "clip_norm", "rr_epochs", "dpsgd_epochs"]
LONG_COLUMNS = KEY_COLUMNS + ["seed", "auc", "rel_loss", "error"]
SUMMARY_COLUMNS = KEY_COLUMNS + ["n_seeds", "mean_auc", "std_auc", "mean_rel_loss",
                                 "std_rel_loss", "rel_loss_pm"]
BASELINE_COLUMNS = ["seed", "auc"]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_table(rows: Iterable[dict], path: str | Path, columns: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: _cell(r.get(c)) for c in columns})


def _parse_cell(s: str):
    if s == "":
        return None
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def read_table(path: str | Path) -> list[dict]:
    """Comma-delimited table with a header row; numeric cells become int/float, empty cells None."""
    with open(path, encoding="utf-8", newline="") as fh:
        return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def grid_rows(grid: SweepGrid) -> list[dict]:
    axes = [
        ("epsilon", grid.epsilons),
        ("algorithm", grid.algorithms),
        ("cap", grid.caps or (None,)),
        ("clip_norm", grid.clip_norms or (None,)),
        ("rr_epochs", grid.rr_epochs or (None,)),
        ("dpsgd_epochs", grid.dpsgd_epochs or (None,)),
        ("seed", grid.seeds),
    ]
    names = [a for a, _ in axes]
    return [dict(zip(names, combo)) for combo in itertools.product(*(v for _, v in axes))]


def row_config(base: TrainConfig, row: dict, root_seed: int, max_cap: int | None) -> TrainConfig:
    """The TrainConfig of one grid row; unset axes fall back to ``base``."""
    dpsgd = base.dpsgd
    if row.get("clip_norm") is not None:
        dpsgd = dataclasses.replace(dpsgd, clip_norm=float(row["clip_norm"]))
    if row.get("dpsgd_epochs") is not None:
        dpsgd = dataclasses.replace(dpsgd, epochs=float(row["dpsgd_epochs"]), steps=None)
    label_dp = base.label_dp
    if row.get("rr_epochs") is not None:
        label_dp = dataclasses.replace(label_dp, epochs=int(row["rr_epochs"]))
    user_level = base.user_level
    if row.get("cap") is not None:
        cap_rr = user_level.cap_rr if user_level else 1
        user_level = UserLevelConfig(cap_rr=cap_rr, cap_dpsgd=int(row["cap"]), max_cap=max_cap)
    return dataclasses.replace(
        base,
        algorithm=row["algorithm"],
        budget=PrivacyBudget(float(row["epsilon"]), base.budget.delta),
        dpsgd=dpsgd,
        label_dp=label_dp,
        user_level=user_level,
        seeds=derive_seeds(root_seed, row["seed"]),
    )


_WORKER: dict = {}


def _init_worker(train_set, test_set, model_doc, base, root_seed, max_cap):
    _WORKER.update(train_set=train_set, test_set=test_set, model_doc=model_doc, base=base,
                   root_seed=root_seed, max_cap=max_cap)


def _run_row(row: dict) -> dict:
    w = _WORKER
    out = dict(row)
    try:
        cfg = row_config(w["base"], row, w["root_seed"], w["max_cap"])
        mc = parse_model_config(w["model_doc"], w["train_set"].schema, cfg.seeds.init)
        _, report = train(w["train_set"], cfg, mc, w["test_set"])
        out["auc"] = report.test_auc
        out["clip_norm"] = cfg.dpsgd.clip_norm
        out["rr_epochs"] = cfg.label_dp.epochs
        out["dpsgd_epochs"] = cfg.dpsgd.epochs
    except (HybridDPError, ArithmeticError, ValueError) as exc:
        out["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
    return out


def _map_rows(rows, parallelism, init_args):
    if parallelism <= 1:
        _init_worker(*init_args)
        return [_run_row(r) for r in rows]
    with ProcessPoolExecutor(max_workers=parallelism, initializer=_init_worker,
                             initargs=init_args) as pool:
        return list(pool.map(_run_row, rows))


def summarize(rows: Iterable[dict]) -> list[dict]:
    """Best tuning setting per (epsilon, algorithm); a pure function of the long table."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in rows:
        if r.get("error") or r.get("auc") is None:
            continue
        groups[tuple(r.get(c) for c in KEY_COLUMNS)].append(r)
    best: dict[tuple, tuple[float, dict]] = {}
    for key, rs in groups.items():
        aucs = [r["auc"] for r in rs]
        rels = [r["rel_loss"] for r in rs if r.get("rel_loss") is not None]
        m_auc, s_auc = aggregate(aucs)
        entry = dict(zip(KEY_COLUMNS, key), n_seeds=len(rs), mean_auc=m_auc, std_auc=s_auc)
        if len(rels) == len(rs):
            entry["mean_rel_loss"], entry["std_rel_loss"] = aggregate(rels)
            entry["rel_loss_pm"] = format_mean_std(rels)
            score = entry["mean_rel_loss"]
        else:
            score = -m_auc
        pick = key[:2]
        if pick not in best or score < best[pick][0]:
            best[pick] = (score, entry)
    return [best[k][1] for k in best]


def run_sweep(run: RunConfig, out_dir: Path, parallelism: int = 1,
              root_seed: int | None = None) -> tuple[list[dict], list[dict]]:
    """Run the cross product, write results.csv / summary.csv / baseline.csv into ``out_dir``."""
    grid = run.sweep or SweepGrid()
    root = run.seed if root_seed is None else root_seed
    train_set, test_set = run.load_data()
    max_cap = max(grid.caps) if grid.caps else None
    init_args = (train_set, test_set, run.model, run.train, root, max_cap)
    out_dir.mkdir(parents=True, exist_ok=True)

    auc_np = grid.baseline_auc if grid.baseline_auc is not None else run.baseline_auc
    baseline_rows = []
    if auc_np is None:
        base_rows = [dict(epsilon=0.0, algorithm="nonprivate", seed=s) for s in grid.seeds]
        baseline_rows = _map_rows(base_rows, parallelism, init_args)
        ok = [r["auc"] for r in baseline_rows if not r.get("error")]
        auc_np = float(np.mean(ok)) if ok else None
    write_table(baseline_rows, out_dir / "baseline.csv", BASELINE_COLUMNS + ["error"])

    rows = _map_rows(grid_rows(grid), parallelism, init_args)
    for r in rows:
        if r.get("auc") is not None and auc_np is not None and auc_np < 1:
            r["rel_loss"] = relative_auc_loss(r["auc"], auc_np)
        if r.get("error"):
            logger.warning("row failed: %s", r["error"])
    write_table(rows, out_dir / "results.csv", LONG_COLUMNS)
    summary = summarize(read_table(out_dir / "results.csv"))
    write_table(summary, out_dir / "summary.csv", SUMMARY_COLUMNS)
    return rows, summary


def all_failed(rows: Sequence[dict]) -> bool:
    return bool(rows) and all(r.get("error") for r in rows)

