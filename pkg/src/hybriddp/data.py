"""Datasets with a non-sensitive / sensitive feature split.

A :class:`Dataset` stores features column-wise as numpy arrays: one int64
matrix of categorical token indices and one float64 matrix of numeric values,
both ordered as the categorical / numeric fields appear in the schema. Index 0
of every categorical vocabulary is the shared out-of-vocabulary bucket.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, SchemaError

logger = logging.getLogger(__name__)

FieldKind = Literal["categorical", "integer", "float"]
Encoding = Literal["hash", "vocab", "index"]


@dataclass(frozen=True)
class FieldSpec:
    """One input column.

    ``encoding`` only matters for categorical fields: ``hash`` maps strings by a
    stable hash, ``vocab`` looks tokens up in a vocabulary file and ``index``
    expects the token to already be an integer index.
    """

    name: str
    kind: FieldKind = "categorical"
    sensitive: bool = False
    vocab_size: int | None = None
    encoding: Encoding = "hash"

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple[FieldSpec, ...]
    label_field: str = "label"
    user_id_field: str | None = None
    order_field: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in schema: {names}")
        if not any(not f.sensitive for f in self.fields):
            raise SchemaError("schema needs at least one non-sensitive field")
        for f in self.fields:
            if f.kind not in ("categorical", "integer", "float"):
                raise SchemaError(f"field {f.name!r}: unknown kind {f.kind!r}")
            if f.is_categorical and (f.vocab_size is None or f.vocab_size < 1):
                raise SchemaError(f"field {f.name!r}: categorical fields need vocab_size >= 1")
            if f.encoding not in ("hash", "vocab", "index"):
                raise SchemaError(f"field {f.name!r}: unknown encoding {f.encoding!r}")

    @property
    def categorical_fields(self) -> tuple[FieldSpec, ...]:
        return tuple(f for f in self.fields if f.is_categorical)

    @property
    def numeric_fields(self) -> tuple[FieldSpec, ...]:
        return tuple(f for f in self.fields if not f.is_categorical)

    def columns(self, sensitive: bool) -> tuple[np.ndarray, np.ndarray]:
        """Column positions (into the cat and num matrices) of one side of the split."""
        cat = [i for i, f in enumerate(self.categorical_fields) if f.sensitive == sensitive]
        num = [i for i, f in enumerate(self.numeric_fields) if f.sensitive == sensitive]
        return np.asarray(cat, dtype=np.intp), np.asarray(num, dtype=np.intp)

    def to_dict(self) -> dict:
        return {
            "fields": [
                {k: v for k, v in vars(f).items() if v is not None} for f in self.fields
            ],
            "label_field": self.label_field,
            "user_id_field": self.user_id_field,
            "order_field": self.order_field,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> FeatureSchema:
        try:
            fields = tuple(FieldSpec(**f) for f in doc["fields"])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema document: {exc}") from exc
        return cls(
            fields=fields,
            label_field=doc.get("label_field", "label"),
            user_id_field=doc.get("user_id_field"),
            order_field=doc.get("order_field"),
        )


@dataclass(frozen=True)
class Example:
    user_id: object | None
    cat_values: tuple[int, ...]
    num_values: tuple[float, ...]
    label: int


class FeatureBlock(NamedTuple):
    """Categorical indices ``(n, n_cat)`` and numeric values ``(n, n_num)``."""

    cat: np.ndarray
    num: np.ndarray

    def take(self, idx) -> FeatureBlock:
        return FeatureBlock(self.cat[idx], self.num[idx])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column store. Training code reads it only through
    :meth:`nonsensitive_features`, :meth:`sensitive_features` and
    :meth:`get_labels`."""

    schema: FeatureSchema
    cat: np.ndarray
    num: np.ndarray
    labels: np.ndarray
    user_ids: np.ndarray | None = None
    order: np.ndarray | None = None
    skipped_rows: int = 0

    def __post_init__(self):
        n = len(self.labels)
        cat = np.asarray(self.cat, dtype=np.int64).reshape(n, len(self.schema.categorical_fields))
        num = np.asarray(self.num, dtype=np.float64).reshape(n, len(self.schema.numeric_fields))
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.size and not np.all((labels == 0) | (labels == 1)):
            raise SchemaError("labels must be 0 or 1")
        vocab = np.array([f.vocab_size for f in self.schema.categorical_fields], dtype=np.int64)
        if cat.size and (np.any(cat < 0) or np.any(cat >= vocab)):
            raise SchemaError("categorical index out of vocabulary bounds")
        object.__setattr__(self, "cat", _frozen(cat))
        object.__setattr__(self, "num", _frozen(num))
        object.__setattr__(self, "labels", _frozen(labels))
        for name in ("user_ids", "order"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr)
                if len(arr) != n:
                    raise SchemaError(f"{name} has length {len(arr)}, expected {n}")
                object.__setattr__(self, name, _frozen(arr))

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Example:
        return Example(
            user_id=None if self.user_ids is None else self.user_ids[i].item(),
            cat_values=tuple(int(v) for v in self.cat[i]),
            num_values=tuple(float(v) for v in self.num[i]),
            label=int(self.labels[i]),
        )

    @classmethod
    def from_examples(cls, schema: FeatureSchema, examples: Sequence[Example]) -> Dataset:
        n_cat, n_num = len(schema.categorical_fields), len(schema.numeric_fields)
        for e in examples:
            if len(e.cat_values) != n_cat or len(e.num_values) != n_num:
                raise SchemaError("example does not match the schema's field counts")
        users = [e.user_id for e in examples]
        return cls(
            schema=schema,
            cat=np.array([e.cat_values for e in examples], dtype=np.int64).reshape(len(examples), n_cat),
            num=np.array([e.num_values for e in examples], dtype=np.float64).reshape(len(examples), n_num),
            labels=np.array([e.label for e in examples], dtype=np.int64),
            user_ids=None if all(u is None for u in users) else np.array(users),
        )

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(
            schema=self.schema,
            cat=self.cat[idx],
            num=self.num[idx],
            labels=self.labels[idx],
            user_ids=None if self.user_ids is None else self.user_ids[idx],
            order=None if self.order is None else self.order[idx],
        )

    def nonsensitive_features(self) -> FeatureBlock:
        c, n = self.schema.columns(sensitive=False)
        return FeatureBlock(self.cat[:, c], self.num[:, n])

    def sensitive_features(self) -> FeatureBlock:
        c, n = self.schema.columns(sensitive=True)
        return FeatureBlock(self.cat[:, c], self.num[:, n])

    def get_labels(self) -> np.ndarray:
        return self.labels


def log_transform(x):
    """ln(1 + max(x, 0)); negative counts collapse to 0."""
    return np.log1p(np.maximum(np.asarray(x, dtype=np.float64), 0.0))


def hash_token(token: str, vocab_size: int) -> int:
    """Stable string -> index in ``[1, vocab_size)``; 0 for empty tokens or a 1-slot vocab."""
    if vocab_size <= 1 or token == "":
        return 0
    h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    return 1 + h % (vocab_size - 1)


def load_vocabulary(path: str | Path) -> dict[str, int]:
    """One token per line; line i (0-based) maps to index i + 1."""
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\r\n") for line in fh]
    return {tok: i + 1 for i, tok in enumerate(tokens)}


class _Encoder:
    def __init__(self, spec: FieldSpec, vocab: dict[str, int] | None):
        self.spec = spec
        self.vocab = vocab
        if spec.encoding == "vocab" and vocab is None:
            raise SchemaError(f"field {spec.name!r} uses vocab encoding but no vocabulary was given")

    def __call__(self, token: str) -> int:
        v = self.spec.vocab_size
        token = token.strip()
        if self.spec.encoding == "hash":
            return hash_token(token, v)
        if self.spec.encoding == "vocab":
            idx = self.vocab.get(token, 0)
        else:
            try:
                idx = int(token)
            except ValueError:
                return 0
        return idx if 0 <= idx < v else 0


def load_delimited(
    path: str | Path,
    schema: FeatureSchema,
    column_map: dict[str, str | int] | None = None,
    delimiter: str = ",",
    header: bool = True,
    vocabularies: dict[str, str | Path | dict[str, int]] | None = None,
) -> Dataset:
    """Read a delimited UTF-8 file into a :class:`Dataset`.

    ``column_map`` maps schema names (features, label, user id, order) to a
    header name or a 0-based column index; unmapped names default to
    themselves. Rows that fail to parse are skipped and counted in
    ``Dataset.skipped_rows``.
    """
    if len(delimiter) != 1:
        raise ConfigurationError(f"delimiter must be a single character, got {delimiter!r}")
    path = Path(path)
    column_map = dict(column_map or {})
    vocabularies = dict(vocabularies or {})

    wanted = [f.name for f in schema.fields] + [schema.label_field]
    wanted += [n for n in (schema.user_id_field, schema.order_field) if n is not None]

    try:
        # undecodable bytes become U+FFFD so a bad row cannot abort the whole load
        fh = open(path, encoding="utf-8", errors="replace", newline="")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc

    with fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            head = next(reader, None) if header else None
        except csv.Error as exc:
            raise SchemaError(f"cannot parse the header row of {path}: {exc}") from exc
        positions: dict[str, int] = {}
        for name in wanted:
            col = column_map.get(name, name)
            if isinstance(col, int):
                positions[name] = col
            elif head is not None and col in head:
                positions[name] = head.index(col)
            else:
                raise SchemaError(f"missing column {col!r} for field {name!r}")

        encoders = []
        for f in schema.categorical_fields:
            vocab = vocabularies.get(f.name)
            if vocab is not None and not isinstance(vocab, dict):
                vocab = load_vocabulary(vocab)
            encoders.append(_Encoder(f, vocab))
        numeric = schema.numeric_fields
        width = max(positions.values()) + 1

        cats, nums, labels, users, order = [], [], [], [], []
        skipped = 0
        while True:
            try:
                row = next(reader)
            except StopIteration:
                break
            except csv.Error:
                skipped += 1
                continue
            if not row:
                continue
            try:
                if len(row) < width:
                    raise ValueError("short row")
                label = int(row[positions[schema.label_field]])
                if label not in (0, 1):
                    raise ValueError("label not in {0,1}")
                num_row = []
                for f in numeric:
                    raw = row[positions[f.name]]
                    if f.kind == "integer":
                        num_row.append(float(log_transform(int(raw))))
                    else:
                        x = float(raw)
                        if not math.isfinite(x):
                            raise ValueError("non-finite value")
                        num_row.append(x)
                o = int(row[positions[schema.order_field]]) if schema.order_field else None
            except ValueError:
                skipped += 1
                continue
            cats.append([enc(row[positions[enc.spec.name]]) for enc in encoders])
            nums.append(num_row)
            labels.append(label)
            if schema.user_id_field:
                users.append(row[positions[schema.user_id_field]])
            if o is not None:
                order.append(o)

    if skipped:
        logger.warning("skipped %d malformed rows in %s", skipped, path)
    return Dataset(
        schema=schema,
        cat=np.array(cats, dtype=np.int64).reshape(len(labels), len(encoders)),
        num=np.array(nums, dtype=np.float64).reshape(len(labels), len(numeric)),
        labels=np.array(labels, dtype=np.int64),
        user_ids=np.array(users) if schema.user_id_field else None,
        order=np.array(order, dtype=np.int64) if schema.order_field else None,
        skipped_rows=skipped,
    )


def write_delimited(dataset: Dataset, path: str | Path, delimiter: str = ",") -> None:
    """Write ``dataset`` with a header row.

    Categorical values are written as indices, so the output reloads losslessly
    under ``encoding="index"``. Integer fields are stored post-transform and would
    be transformed twice on reload; only float numeric fields round-trip.
    """
    schema = dataset.schema
    header = []
    if schema.user_id_field:
        header.append(schema.user_id_field)
    if schema.order_field:
        header.append(schema.order_field)
    header += [f.name for f in schema.categorical_fields]
    header += [f.name for f in schema.numeric_fields]
    header.append(schema.label_field)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        for i in range(len(dataset)):
            row: list = []
            if schema.user_id_field:
                row.append(dataset.user_ids[i])
            if schema.order_field:
                row.append(int(dataset.order[i]))
            row += [int(v) for v in dataset.cat[i]]
            row += [repr(float(v)) for v in dataset.num[i]]
            row.append(int(dataset.labels[i]))
            w.writerow(row)


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for :func:`generate_synthetic`.

    Labels are Bernoulli(sigmoid(bias + ns_weight * phi_ns + s_weight * phi_s)),
    where each phi is a sum of hidden per-token effects normalised by the
    number of fields, then flipped with probability ``label_noise``.
    """

    n_examples: int = 50_000
    n_users: int = 5_000
    ns_vocab_sizes: tuple[int, ...] = (2000, 1000, 500, 200)
    s_vocab_sizes: tuple[int, ...] = (10, 10)
    sensitive_signal_weight: float = 1.5
    nonsensitive_signal_weight: float = 2.0
    label_noise: float = 0.0
    bias: float = -1.0
    user_skew: float = 1.1
    token_skew: float = 0.8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ns_vocab_sizes", tuple(self.ns_vocab_sizes))
        object.__setattr__(self, "s_vocab_sizes", tuple(self.s_vocab_sizes))
        if self.n_examples < 1 or not 1 <= self.n_users <= self.n_examples:
            raise ConfigurationError("need 1 <= n_users <= n_examples")
        if not self.ns_vocab_sizes:
            raise ConfigurationError("need at least one non-sensitive field")
        if any(v < 1 for v in self.ns_vocab_sizes + self.s_vocab_sizes):
            raise ConfigurationError("vocab sizes must be >= 1")
        for name in ("sensitive_signal_weight", "nonsensitive_signal_weight", "bias"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"{name} must be finite")
        if self.sensitive_signal_weight < 0 or self.nonsensitive_signal_weight < 0:
            raise ConfigurationError("signal weights must be >= 0")
        if not 0 <= self.label_noise < 0.5:
            raise ConfigurationError("label_noise must lie in [0, 0.5)")

    def schema(self) -> FeatureSchema:
        fields = [FieldSpec(f"ns{i}", "categorical", False, v, "index")
                  for i, v in enumerate(self.ns_vocab_sizes)]
        fields += [FieldSpec(f"s{i}", "categorical", True, v, "index")
                   for i, v in enumerate(self.s_vocab_sizes)]
        return FeatureSchema(tuple(fields), "label", "user_id", "ts")


def _zipf_probs(n: int, skew: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** skew
    return w / w.sum()


def _draw_field(rng: np.random.Generator, vocab: int, n: int, skew: float):
    """Token indices in [1, vocab) plus a hidden standard-normal effect per token."""
    effects = np.zeros(vocab)
    if vocab == 1:
        return np.zeros(n, dtype=np.int64), effects
    effects[1:] = rng.standard_normal(vocab - 1)
    tokens = 1 + rng.choice(vocab - 1, size=n, p=_zipf_probs(vocab - 1, skew))
    return tokens, effects


def _signal(rng, vocabs: Iterable[int], n: int, skew: float):
    cols, phi = [], np.zeros(n)
    vocabs = list(vocabs)
    for v in vocabs:
        tokens, effects = _draw_field(rng, v, n, skew)
        cols.append(tokens)
        phi += effects[tokens]
    if vocabs:
        phi /= math.sqrt(len(vocabs))
    return cols, phi


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Draw a synthetic dataset; bit-identical for a fixed ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    n, u = spec.n_examples, spec.n_users

    # every user gets one example, the rest follow a Zipf-like popularity law
    extra = rng.choice(u, size=n - u, p=_zipf_probs(u, spec.user_skew))
    users = np.concatenate([np.arange(u), extra])
    rng.shuffle(users)

    ns_cols, phi_ns = _signal(rng, spec.ns_vocab_sizes, n, spec.token_skew)
    s_cols, phi_s = _signal(rng, spec.s_vocab_sizes, n, spec.token_skew)
    logit = spec.bias + spec.nonsensitive_signal_weight * phi_ns + spec.sensitive_signal_weight * phi_s
    labels = (rng.random(n) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int64)
    flips = rng.random(n) < spec.label_noise
    labels = np.where(flips, 1 - labels, labels)

    return Dataset(
        schema=spec.schema(),
        cat=np.stack(ns_cols + s_cols, axis=1),
        num=np.zeros((n, 0)),
        labels=labels,
        user_ids=np.array([f"u{k}" for k in users]),
        order=np.arange(n, dtype=np.int64),
    )


def split_train_test(
    dataset: Dataset,
    test_fraction: float,
    mode: Literal["random", "chronological"] = "random",
    seed: int = 0,
) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ConfigurationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    if mode == "random":
        perm = np.random.default_rng(seed).permutation(n)
        test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    elif mode == "chronological":
        if dataset.order is None:
            raise ConfigurationError("chronological split needs an order column (schema.order_field)")
        ranked = np.argsort(dataset.order, kind="stable")
        train_idx, test_idx = ranked[: n - n_test], ranked[n - n_test:]
    else:
        raise ConfigurationError(f"unknown split mode {mode!r}")
    return dataset.subset(train_idx), dataset.subset(test_idx)


def cap_examples_per_user(dataset: Dataset, k: int, seed: int = 0) -> Dataset:
    """Exactly ``k`` examples per user, drawn with replacement from that user's rows.

    Users appear in order of their first occurrence in ``dataset``.
    """
    if k < 1:
        raise ConfigurationError(f"example cap must be >= 1, got {k}")
    if dataset.user_ids is None:
        raise ConfigurationError("capping examples per user needs user ids")
    _, first, inverse, counts = np.unique(
        dataset.user_ids, return_index=True, return_inverse=True, return_counts=True
    )
    by_user = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    users = np.argsort(first, kind="stable")
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, counts[users][:, None], size=(len(users), k))
    picks = by_user[starts[users][:, None] + offsets]
    return dataset.subset(picks.ravel())

