import numpy as np
import pytest

from hybriddp.data import Dataset, FeatureSchema, FieldSpec, SyntheticSpec, generate_synthetic
from hybriddp.model import ModelConfig, init_params


def tiny_schema() -> FeatureSchema:
    return FeatureSchema(
        fields=(
            FieldSpec("a", "categorical", False, 7, "index"),
            FieldSpec("b", "categorical", False, 5, "index"),
            FieldSpec("x", "float", False),
            FieldSpec("s", "categorical", True, 4, "index"),
            FieldSpec("y", "float", True),
        ),
        user_id_field="user",
        order_field="ts",
    )


def random_dataset(schema: FeatureSchema, n: int, seed: int = 0, n_users: int = 10) -> Dataset:
    rng = np.random.default_rng(seed)
    cats = schema.categorical_fields
    cat = np.stack([rng.integers(0, f.vocab_size, n) for f in cats], axis=1)
    num = rng.normal(size=(n, len(schema.numeric_fields)))
    return Dataset(schema, cat, num, rng.integers(0, 2, n),
                   user_ids=np.array([f"u{k}" for k in rng.integers(0, n_users, n)]),
                   order=np.arange(n))


def tiny_config(seed: int = 0, **kw) -> ModelConfig:
    kw.setdefault("embedding_dims", 2)
    kw.setdefault("ns_hidden", (3,))
    kw.setdefault("s_hidden", (2,))
    kw.setdefault("common_hidden", (4,))
    return ModelConfig.from_schema(tiny_schema(), seed=seed, **kw)


@pytest.fixture
def schema():
    return tiny_schema()


@pytest.fixture
def dataset(schema):
    return random_dataset(schema, 64)


@pytest.fixture
def params():
    p = init_params(tiny_config())
    # nonzero biases so every block carries signal in gradient checks
    rng = np.random.default_rng(99)
    return type(p)(p.config, p.values + rng.normal(0, 0.1, p.values.shape))


@pytest.fixture(scope="session")
def small_synthetic():
    return generate_synthetic(SyntheticSpec(n_examples=4000, n_users=400, seed=5))


# --------------------------------------------------------------------------
# dataset access instrumentation

class AccessLog:
    def __init__(self):
        self.events = []
        self.in_mechanism = False
        self.depth = 0


class InstrumentedDataset(Dataset):
    """Records every read of a column store field, and who asked for it."""

    def __getattribute__(self, name):
        if name in ("cat", "num", "labels", "user_ids", "sensitive_features",
                    "nonsensitive_features", "get_labels"):
            log = object.__getattribute__(self, "__dict__").get("_log")
            if log is not None and not log.depth:
                log.events.append((name, log.in_mechanism))
        return object.__getattribute__(self, name)

    def _guarded(self, name):
        log = self.__dict__["_log"]
        log.depth += 1
        try:
            return getattr(Dataset, name)(self)
        finally:
            log.depth -= 1

    def nonsensitive_features(self):
        return self._guarded("nonsensitive_features")

    def sensitive_features(self):
        return self._guarded("sensitive_features")

    def get_labels(self):
        return self._guarded("get_labels")


def instrument(ds):
    inst = InstrumentedDataset(ds.schema, ds.cat, ds.num, ds.labels, ds.user_ids, ds.order)
    log = AccessLog()
    object.__setattr__(inst, "_log", log)
    return inst, log


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}: {detail}")
