"""Run configuration documents (YAML or JSON) and their conversion to typed configs."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .data import (Dataset, FeatureSchema, SyntheticSpec, generate_synthetic, load_delimited,
                   split_train_test)
from .errors import ConfigurationError
from .model import RECIPES, ModelConfig
from .optim import OptimizerSpec
from .privacy import DEFAULT_DELTA, PrivacyBudget
from .train import (DpSgdConfig, LabelDpConfig, NonPrivateConfig, Seeds, TrainConfig,
                    UserLevelConfig)

OUT_DIR_ENV = "HYBRIDDP_OUT_DIR"
DEFAULT_EPSILONS = (1, 3, 5, 10, 20, 30, 50)


def read_document(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}".replace("\n", " ")) from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return doc


def _build(cls, doc: dict | None, where: str, **overrides):
    doc = dict(doc or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    doc.update(overrides)
    for k, v in doc.items():
        if isinstance(v, list):
            doc[k] = tuple(v)
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def _optimizer(doc, where) -> OptimizerSpec | None:
    if doc is None:
        return None
    return _build(OptimizerSpec, doc, where, hyper=dict(doc.get("hyper", {})))


def _phase(cls, doc, where):
    doc = dict(doc or {})
    opt = _optimizer(doc.pop("optimizer", None), f"{where}.optimizer")
    return _build(cls, doc, where, **({"optimizer": opt} if opt else {}))


def parse_train_config(doc: dict | None) -> TrainConfig:
    doc = dict(doc or {})
    known = {"algorithm", "epsilon", "delta", "label_dp", "dpsgd", "nonprivate", "user_level", "seeds"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError(f"train: unknown keys {sorted(unknown)}")
    ul = doc.get("user_level")
    return TrainConfig(
        algorithm=doc.get("algorithm", "hybrid"),
        budget=PrivacyBudget(float(doc.get("epsilon", 5.0)), float(doc.get("delta", DEFAULT_DELTA))),
        label_dp=_phase(LabelDpConfig, doc.get("label_dp"), "train.label_dp"),
        dpsgd=_phase(DpSgdConfig, doc.get("dpsgd"), "train.dpsgd"),
        nonprivate=_phase(NonPrivateConfig, doc.get("nonprivate"), "train.nonprivate"),
        user_level=None if ul is None else _build(UserLevelConfig, ul, "train.user_level"),
        seeds=_build(Seeds, doc.get("seeds"), "train.seeds"),
    )


def derive_seeds(root: int, key: int) -> Seeds:
    """Independent per-run seeds from a (root seed, key) counter pair."""
    state = np.random.SeedSequence([int(root), int(key)]).generate_state(4)
    return Seeds(*(int(x) for x in state))


def parse_model_config(doc: dict | None, schema: FeatureSchema, seed: int) -> ModelConfig:
    doc = dict(doc or {})
    recipe = doc.pop("recipe", None)
    scale = doc.pop("scale", 1.0)
    if recipe is not None:
        if recipe not in RECIPES:
            raise ConfigurationError(f"model.recipe: unknown recipe {recipe!r}; known: {sorted(RECIPES)}")
        if doc:
            raise ConfigurationError("model: recipe cannot be combined with explicit sizes")
        return ModelConfig.from_recipe(schema, recipe, scale, seed)
    allowed = {"embedding_dims", "ns_hidden", "s_hidden", "common_hidden"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigurationError(f"model: unknown keys {sorted(unknown)}")
    for k in ("ns_hidden", "s_hidden", "common_hidden"):
        if k in doc:
            doc[k] = tuple(doc[k])
    if isinstance(doc.get("embedding_dims"), list):
        doc["embedding_dims"] = tuple(doc["embedding_dims"])
    return ModelConfig.from_schema(schema, seed=seed, **doc)


def synthetic_spec(doc: dict) -> SyntheticSpec:
    return _build(SyntheticSpec, doc, "dataset.synthetic")


def load_dataset(doc: dict | None, base_dir: Path) -> Dataset:
    doc = doc or {}
    sources = [k for k in ("synthetic", "delimited") if k in doc]
    if len(sources) != 1:
        raise ConfigurationError("dataset: give exactly one of 'synthetic' or 'delimited'")
    if sources[0] == "synthetic":
        return generate_synthetic(synthetic_spec(doc["synthetic"]))
    d = dict(doc["delimited"])
    if "path" not in d:
        raise ConfigurationError("dataset.delimited: 'path' is required")
    path = (base_dir / d["path"]) if not Path(d["path"]).is_absolute() else Path(d["path"])
    if not path.is_file():
        raise ConfigurationError(f"dataset file not found: {path}")
    if "schema" in d:
        schema_doc = d["schema"]
    elif "schema_path" in d:
        sp = base_dir / d["schema_path"]
        schema_doc = read_document(sp)
        schema_doc = schema_doc.get("schema", schema_doc)
    else:
        raise ConfigurationError("dataset.delimited: 'schema' or 'schema_path' is required")
    schema = FeatureSchema.from_dict(schema_doc)
    vocabs = {}
    for name, vp in (d.get("vocabularies") or {}).items():
        vp = base_dir / vp
        if not vp.is_file():
            raise ConfigurationError(f"vocabulary file not found: {vp}")
        vocabs[name] = vp
    return load_delimited(path, schema, d.get("column_map"), d.get("delimiter", ","),
                          d.get("header", True), vocabs)


@dataclass
class SweepGrid:
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS
    algorithms: tuple[str, ...] = ("rr_only", "dpsgd_only", "hybrid")
    seeds: tuple[int, ...] = (0, 1, 2)
    clip_norms: tuple[float, ...] | None = None
    rr_epochs: tuple[int, ...] | None = None
    dpsgd_epochs: tuple[float, ...] | None = None
    caps: tuple[int, ...] | None = None
    baseline_auc: float | None = None


@dataclass
class RunConfig:
    dataset: dict
    train: TrainConfig
    model: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)
    baseline_auc: float | None = None
    output_dir: str | None = None
    seed: int = 0
    sweep: SweepGrid | None = None
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)

    def resolve_output_dir(self, flag: str | None) -> Path:
        """--out flag, then the config's output_dir, then the environment, then ./out."""
        if flag:
            return Path(flag)
        if self.output_dir:
            p = Path(self.output_dir)
            return p if p.is_absolute() else self.base_dir / p
        return Path(os.environ.get(OUT_DIR_ENV) or "out")

    def load_data(self) -> tuple[Dataset, Dataset]:
        ds = load_dataset(self.dataset, self.base_dir)
        s = dict(self.split)
        unknown = set(s) - {"test_fraction", "mode", "seed"}
        if unknown:
            raise ConfigurationError(f"split: unknown keys {sorted(unknown)}")
        return split_train_test(ds, float(s.get("test_fraction", 0.2)),
                                s.get("mode", "random"), int(s.get("seed", 0)))


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    doc = read_document(path)
    known = {"dataset", "model", "train", "split", "metrics", "output_dir", "seed", "sweep"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError(f"unknown top-level keys {sorted(unknown)}")
    if "dataset" not in doc:
        raise ConfigurationError("config needs a 'dataset' section")
    metrics = doc.get("metrics") or {}
    unknown = set(metrics) - {"baseline_auc"}
    if unknown:
        raise ConfigurationError(f"metrics: unknown keys {sorted(unknown)}")
    sweep = doc.get("sweep")
    if sweep is not None:
        sweep = _build(SweepGrid, sweep, "sweep")
    return RunConfig(
        dataset=doc["dataset"],
        train=parse_train_config(doc.get("train")),
        model=doc.get("model") or {},
        split=doc.get("split") or {},
        baseline_auc=metrics.get("baseline_auc"),
        output_dir=doc.get("output_dir"),
        seed=int(doc.get("seed", 0)),
        sweep=sweep,
        base_dir=path.parent,
        raw=doc,
    )


def dump_document(doc: Any) -> str:
    return yaml.safe_dump(doc, sort_keys=False)
