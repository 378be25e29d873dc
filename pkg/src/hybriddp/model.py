"""Two-tower binary classifier with hand-written backprop.

The model is ``f_c(g_ns(x_ns) ++ h_s(x_s))``: per-field embeddings and numeric
inputs feed a non-sensitive tower ``g`` and a sensitive tower ``h`` (ReLU MLPs,
possibly with no hidden layers), whose outputs are concatenated and passed to a
common ReLU MLP ending in one logit. The truncated model replaces ``h``'s output
by zeros.

All trainable values live in one flat float64 vector. Ordering: embedding tables
in categorical-field order, then the non-sensitive tower, the sensitive tower
and the common tower, each layer as weight (``(fan_in, fan_out)`` row-major)
followed by bias.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Literal, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .data import Example, FeatureBlock, FeatureSchema
from .errors import ConfigurationError, NumericError, ShapeError

Scope = Literal["full", "truncated"]
Partition = Literal["ns", "s", "c"]

# Appendix recipes; hidden sizes are multiplied by a scale factor for desk runs.
RECIPES = {
    "criteo_attribution": {"embedding_dims": 8, "common_hidden": (128, 64)},
    "criteo_pctr": {"embedding_dims": None, "common_hidden": (598, 598, 598, 598)},
}


def embed_dim(vocab_size: int) -> int:
    """Embedding width heuristic ``int(2 * V**0.25)``, at least 1."""
    if vocab_size < 1:
        raise ConfigurationError(f"vocab_size must be >= 1, got {vocab_size}")
    # 2 * V**0.25 is an integer only for perfect fourth powers; take those exactly
    r = math.isqrt(math.isqrt(vocab_size))
    if r ** 4 == vocab_size:
        return 2 * r
    return max(1, int(2 * vocab_size ** 0.25))


@dataclass(frozen=True)
class ModelConfig:
    cat_vocab_sizes: tuple[int, ...]
    cat_sensitive: tuple[bool, ...]
    num_sensitive: tuple[bool, ...] = ()
    embedding_dims: tuple[int, ...] | int | None = None
    ns_hidden: tuple[int, ...] = ()
    s_hidden: tuple[int, ...] = ()
    common_hidden: tuple[int, ...] = (32, 16)
    seed: int = 0

    def __post_init__(self):
        for name in ("cat_vocab_sizes", "cat_sensitive", "num_sensitive",
                     "ns_hidden", "s_hidden", "common_hidden"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if len(self.cat_vocab_sizes) != len(self.cat_sensitive):
            raise ConfigurationError("cat_vocab_sizes and cat_sensitive differ in length")
        dims = self.embedding_dims
        if dims is None:
            dims = tuple(embed_dim(v) for v in self.cat_vocab_sizes)
        elif isinstance(dims, int):
            dims = (dims,) * len(self.cat_vocab_sizes)
        dims = tuple(int(d) for d in dims)
        if len(dims) != len(self.cat_vocab_sizes) or any(d < 1 for d in dims):
            raise ConfigurationError("need one positive embedding dim per categorical field")
        object.__setattr__(self, "embedding_dims", dims)
        if any(h < 1 for h in self.ns_hidden + self.s_hidden + self.common_hidden):
            raise ConfigurationError("hidden sizes must be >= 1")
        if self.ns_input_dim == 0:
            raise ConfigurationError("the non-sensitive tower has no inputs")

    @classmethod
    def from_schema(cls, schema: FeatureSchema, **kwargs) -> ModelConfig:
        cats = schema.categorical_fields
        return cls(
            cat_vocab_sizes=tuple(f.vocab_size for f in cats),
            cat_sensitive=tuple(f.sensitive for f in cats),
            num_sensitive=tuple(f.sensitive for f in schema.numeric_fields),
            **kwargs,
        )

    @classmethod
    def from_recipe(cls, schema: FeatureSchema, recipe: str, scale: float = 1.0, seed: int = 0):
        r = RECIPES[recipe]
        hidden = tuple(max(1, math.ceil(h * scale)) for h in r["common_hidden"])
        return cls.from_schema(schema, embedding_dims=r["embedding_dims"],
                               common_hidden=hidden, seed=seed)

    def _input_dim(self, sensitive: bool) -> int:
        emb = sum(d for d, s in zip(self.embedding_dims, self.cat_sensitive) if s == sensitive)
        return emb + sum(1 for s in self.num_sensitive if s == sensitive)

    @property
    def ns_input_dim(self) -> int:
        return self._input_dim(False)

    @property
    def s_input_dim(self) -> int:
        return self._input_dim(True)

    @property
    def d_ns(self) -> int:
        return self.ns_hidden[-1] if self.ns_hidden else self.ns_input_dim

    @property
    def d_s(self) -> int:
        if self.s_input_dim == 0:
            return 0
        return self.s_hidden[-1] if self.s_hidden else self.s_input_dim

    def to_dict(self) -> dict:
        return asdict(self)


class Block(NamedTuple):
    name: str
    shape: tuple[int, ...]
    partition: Partition
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _dense_shapes(fan_in: int, hidden: Sequence[int], out: int | None = None):
    sizes = list(hidden) + ([out] if out is not None else [])
    shapes = []
    for h in sizes:
        shapes.append((fan_in, h))
        fan_in = h
    return shapes


class Layout:
    """Block structure of the flat parameter vector for one config."""

    def __init__(self, config: ModelConfig):
        self.config = config
        blocks: list[Block] = []
        off = 0

        def add(name, shape, part):
            nonlocal off
            blocks.append(Block(name, tuple(shape), part, off))
            off += blocks[-1].size

        for j, (v, d, s) in enumerate(zip(config.cat_vocab_sizes, config.embedding_dims,
                                          config.cat_sensitive)):
            add(f"emb{j}", (v, d), "s" if s else "ns")
        self.towers: dict[str, list[tuple[str, str]]] = {"ns": [], "s": [], "c": []}
        specs = [
            ("ns", _dense_shapes(config.ns_input_dim, config.ns_hidden)),
            ("s", _dense_shapes(config.s_input_dim, config.s_hidden) if config.s_input_dim else []),
            ("c", _dense_shapes(config.d_ns + config.d_s, config.common_hidden, 1)),
        ]
        for part, shapes in specs:
            for i, shape in enumerate(shapes):
                add(f"{part}.W{i}", shape, part)
                add(f"{part}.b{i}", (shape[1],), part)
                self.towers[part].append((f"{part}.W{i}", f"{part}.b{i}"))
        self.blocks = blocks
        self.by_name = {b.name: b for b in blocks}
        self.size = off
        part = np.empty(off, dtype="<U2")
        for b in blocks:
            part[b.offset:b.offset + b.size] = b.partition
        self._partition = part
        self._scope_idx = {
            "full": np.arange(off),
            "truncated": np.flatnonzero(part != "s"),
        }

    def partition_indices(self, partition: Partition) -> np.ndarray:
        return np.flatnonzero(self._partition == partition)

    def scope_indices(self, scope: Scope) -> np.ndarray:
        try:
            return self._scope_idx[scope]
        except KeyError:
            raise ConfigurationError(f"unknown scope {scope!r}") from None

    def slice(self, name: str) -> slice:
        b = self.by_name[name]
        return slice(b.offset, b.offset + b.size)


_LAYOUTS: dict[ModelConfig, Layout] = {}


def layout_for(config: ModelConfig) -> Layout:
    lay = _LAYOUTS.get(config)
    if lay is None:
        lay = _LAYOUTS[config] = Layout(config)
    return lay


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Config plus flat parameter vector (read-only; updates build a new object)."""

    config: ModelConfig
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.shape != (self.layout.size,):
            raise ShapeError(f"expected {self.layout.size} parameters, got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def layout(self) -> Layout:
        return layout_for(self.config)

    def __getitem__(self, name: str) -> np.ndarray:
        b = self.layout.by_name[name]
        return self.values[b.offset:b.offset + b.size].reshape(b.shape)

    def partition(self, part: Partition) -> np.ndarray:
        return self.values[self.layout.partition_indices(part)]

    def replace_scope(self, scope: Scope, scoped_values: np.ndarray) -> ModelParams:
        v = self.values.copy()
        v[self.layout.scope_indices(scope)] = scoped_values
        return ModelParams(self.config, v)

    @property
    def w_ns(self) -> np.ndarray:
        return self.partition("ns")

    @property
    def w_s(self) -> np.ndarray:
        return self.partition("s")

    @property
    def w_c(self) -> np.ndarray:
        return self.partition("c")


@dataclass(frozen=True)
class GradVector:
    values: np.ndarray
    scope: Scope


def init_params(config: ModelConfig) -> ModelParams:
    """Fan-in uniform weights (variance 1/fan_in), U(-0.05, 0.05) embeddings, zero biases."""
    lay = layout_for(config)
    rng = np.random.default_rng(config.seed)
    v = np.zeros(lay.size)
    for b in lay.blocks:
        sl = slice(b.offset, b.offset + b.size)
        if b.name.startswith("emb"):
            v[sl] = rng.uniform(-0.05, 0.05, b.size)
        elif ".W" in b.name:
            limit = math.sqrt(3.0 / b.shape[0])
            v[sl] = rng.uniform(-limit, limit, b.size)
    return ModelParams(config, v)


# --------------------------------------------------------------------------
# forward / backward on batches

def _check_finite(x: np.ndarray, what: str, layer: int):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}", layer=layer)


class _Cache(NamedTuple):
    # dense layer name -> (input activations, pre-activation)
    dense: dict[str, tuple[np.ndarray, np.ndarray]]
    # side -> list of (field position, token indices), numeric width
    emb_inputs: dict[str, tuple[list[tuple[int, np.ndarray]], int]]
    truncated: bool


def _tower_input(params: ModelParams, block: FeatureBlock, sensitive: bool):
    cfg = params.config
    fields = [j for j, s in enumerate(cfg.cat_sensitive) if s == sensitive]
    if block.cat.shape[1] != len(fields):
        raise ShapeError(f"expected {len(fields)} categorical columns, got {block.cat.shape[1]}")
    parts = [params[f"emb{j}"][block.cat[:, k]] for k, j in enumerate(fields)]
    parts.append(np.asarray(block.num, dtype=np.float64))
    return np.concatenate(parts, axis=1), list(zip(fields, block.cat.T)), block.num.shape[1]


def _mlp(params, x, layers, cache, layer_no, relu_last):
    for i, (wn, bn) in enumerate(layers):
        with np.errstate(invalid="ignore", over="ignore"):
            z = x @ params[wn] + params[bn]
        _check_finite(z, "activation", layer_no)
        cache[wn] = (x, z)
        layer_no += 1
        x = np.maximum(z, 0.0) if (relu_last or i < len(layers) - 1) else z
    return x, layer_no


def forward_batch(params: ModelParams, ns: FeatureBlock, s: FeatureBlock | None,
                  truncated: bool = False) -> tuple[np.ndarray, _Cache]:
    """Logits for a batch plus the cache :func:`backward_batch` needs."""
    cfg, lay = params.config, params.layout
    dense: dict = {}
    emb_inputs: dict = {}
    x_ns, fields, n_num = _tower_input(params, ns, sensitive=False)
    emb_inputs["ns"] = (fields, n_num)
    g, layer = _mlp(params, x_ns, lay.towers["ns"], dense, 0, relu_last=True)
    n = len(x_ns)
    if cfg.d_s == 0:
        h = np.zeros((n, 0))
    elif truncated:
        h = np.zeros((n, cfg.d_s))
    else:
        if s is None:
            raise ShapeError("full forward pass needs sensitive features")
        x_s, fields, n_num = _tower_input(params, s, sensitive=True)
        emb_inputs["s"] = (fields, n_num)
        h, layer = _mlp(params, x_s, lay.towers["s"], dense, layer, relu_last=True)
    layer = len(lay.towers["ns"]) + len(lay.towers["s"])
    out, _ = _mlp(params, np.concatenate([g, h], axis=1), lay.towers["c"], dense, layer,
                  relu_last=False)
    return out[:, 0], _Cache(dense, emb_inputs, truncated)


def _backprop(params: ModelParams, cache: _Cache, dlogit: np.ndarray):
    """Per-example gradient pieces.

    Returns ``dense`` as name -> (activation a, output grad delta), giving the
    weight gradient ``outer(a_i, delta_i)`` and bias gradient ``delta_i`` of each
    example, and ``emb`` as name -> (token indices, row gradients).
    """
    cfg, lay = params.config, params.layout
    dense: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    emb: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def back(layers, delta, relu_last):
        for i in reversed(range(len(layers))):
            wn, _ = layers[i]
            x, z = cache.dense[wn]
            if relu_last or i < len(layers) - 1:
                delta = delta * (z > 0)
            dense[wn] = (x, delta)
            delta = delta @ params[wn].T
        return delta

    d_in = back(lay.towers["c"], np.asarray(dlogit, dtype=np.float64)[:, None], relu_last=False)
    _check_finite(d_in, "gradient", len(lay.towers["ns"]) + len(lay.towers["s"]))
    sides = [("ns", d_in[:, :cfg.d_ns])]
    if not cache.truncated and cfg.d_s > 0:
        sides.append(("s", d_in[:, cfg.d_ns:]))
    for part, d_out in sides:
        d_x = back(lay.towers[part], d_out, relu_last=True)
        fields, _ = cache.emb_inputs[part]
        col = 0
        for j, idx in fields:
            d = cfg.embedding_dims[j]
            emb[f"emb{j}"] = (idx, d_x[:, col:col + d])
            col += d
    return dense, emb


def backward_batch(params: ModelParams, cache: _Cache, dlogit: np.ndarray, scope: Scope) -> np.ndarray:
    """Materialised per-example gradients, shape ``(batch, scope size)``."""
    lay = params.layout
    dense, emb = _backprop(params, cache, dlogit)
    n = len(dlogit)
    out = np.zeros((n, lay.size))
    for name, (x, delta) in dense.items():
        bname = name.replace(".W", ".b")
        out[:, lay.slice(name)] = np.einsum("bi,bo->bio", x, delta).reshape(n, -1)
        out[:, lay.slice(bname)] = delta
    rows = np.arange(n)
    for name, (idx, g) in emb.items():
        blk = lay.by_name[name]
        dim = blk.shape[1]
        for k in range(dim):
            out[rows, blk.offset + idx * dim + k] = g[:, k]
    return out[:, lay.scope_indices(scope)]


def grad_norms(params: ModelParams, cache: _Cache, dlogit: np.ndarray) -> np.ndarray:
    """Per-example L2 gradient norms without materialising the gradients."""
    dense, emb = _backprop(params, cache, dlogit)
    sq = np.zeros(len(dlogit))
    for x, delta in dense.values():
        d2 = np.einsum("bo,bo->b", delta, delta)
        sq += np.einsum("bi,bi->b", x, x) * d2 + d2
    for _, g in emb.values():
        sq += np.einsum("bd,bd->b", g, g)
    return np.sqrt(sq)


def weighted_grad_sum(params: ModelParams, cache: _Cache, dlogit: np.ndarray,
                      weights: np.ndarray, scope: Scope) -> np.ndarray:
    """``sum_i weights[i] * grad_i`` restricted to ``scope``, accumulated in batch order."""
    lay = params.layout
    dense, emb = _backprop(params, cache, dlogit)
    total = np.zeros(lay.size)
    w = np.asarray(weights, dtype=np.float64)
    for name, (x, delta) in dense.items():
        wd = delta * w[:, None]
        total[lay.slice(name)] = (x.T @ wd).ravel()
        total[lay.slice(name.replace(".W", ".b"))] = wd.sum(axis=0)
    for name, (idx, g) in emb.items():
        blk = lay.by_name[name]
        table = np.zeros(blk.shape)
        np.add.at(table, idx, g * w[:, None])
        total[lay.slice(name)] = table.ravel()
    return total[lay.scope_indices(scope)]


def clipped_grad_sum(params: ModelParams, cache: _Cache, dlogit: np.ndarray,
                     clip_norm: float, scope: Scope) -> tuple[np.ndarray, np.ndarray]:
    """Sum of per-example gradients each rescaled to norm at most ``clip_norm``.

    Returns the sum and the unclipped per-example norms.
    """
    norms = grad_norms(params, cache, dlogit)
    with np.errstate(divide="ignore"):
        factors = np.minimum(1.0, clip_norm / norms)
    factors[norms == 0] = 1.0
    return weighted_grad_sum(params, cache, dlogit, factors, scope), norms


# --------------------------------------------------------------------------
# loss

def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def bce_loss(logit, target):
    """Binary cross entropy on logits; ``target`` may be fractional."""
    t = np.asarray(target, dtype=np.float64)
    out = t * softplus(-np.asarray(logit, dtype=np.float64)) + (1.0 - t) * softplus(logit)
    return float(out) if out.ndim == 0 else out


def bce_dlogit(logit, target):
    return expit(logit) - target


# --------------------------------------------------------------------------
# single-example API

def _split_example(config: ModelConfig, example: Example) -> tuple[FeatureBlock, FeatureBlock]:
    cat = np.asarray(example.cat_values, dtype=np.int64)
    num = np.asarray(example.num_values, dtype=np.float64)
    if cat.shape != (len(config.cat_sensitive),) or num.shape != (len(config.num_sensitive),):
        raise ShapeError("example does not match the model's field counts")
    cs, ns_ = np.asarray(config.cat_sensitive, bool), np.asarray(config.num_sensitive, bool)
    if np.any(cat < 0) or np.any(cat >= np.asarray(config.cat_vocab_sizes)):
        raise ShapeError("categorical index out of vocabulary bounds")
    return (FeatureBlock(cat[~cs][None, :], num[~ns_][None, :]),
            FeatureBlock(cat[cs][None, :], num[ns_][None, :]))


def forward_full(params: ModelParams, example: Example) -> float:
    ns, s = _split_example(params.config, example)
    return float(forward_batch(params, ns, s)[0][0])


def forward_truncated(params: ModelParams, example: Example) -> float:
    ns, _ = _split_example(params.config, example)
    return float(forward_batch(params, ns, None, truncated=True)[0][0])


def per_example_grad(params: ModelParams, example: Example, target: float,
                     scope: Scope = "full") -> GradVector:
    """Exact gradient of ``bce_loss(forward(params, example), target)`` over ``scope``."""
    ns, s = _split_example(params.config, example)
    truncated = scope == "truncated"
    logits, cache = forward_batch(params, ns, None if truncated else s, truncated=truncated)
    g = backward_batch(params, cache, bce_dlogit(logits, target), scope)[0]
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    return GradVector(g, scope)


def predict(params: ModelParams, ns: FeatureBlock, s: FeatureBlock | None,
            truncated: bool = False, batch_size: int = 8192) -> np.ndarray:
    """Logits over a whole feature set, evaluated in fixed-size chunks."""
    n = len(ns.cat)
    out = np.empty(n)
    for lo in range(0, n, batch_size):
        sl = slice(lo, lo + batch_size)
        out[sl] = forward_batch(params, ns.take(sl), None if truncated else s.take(sl),
                                truncated=truncated)[0]
    return out


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: ModelParams, path: str | Path, extra: dict | None = None) -> None:
    """JSON document: config echo, block layout, flat values (repr-exact floats)."""
    doc = {
        "config": params.config.to_dict(),
        "layout": [[b.name, list(b.shape), b.partition] for b in params.layout.blocks],
        "values": params.values.tolist(),
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    cfg = doc["config"]
    cfg["embedding_dims"] = tuple(cfg["embedding_dims"])
    return ModelParams(ModelConfig(**cfg), np.asarray(doc["values"], dtype=np.float64))
