"""Training algorithms: Hybrid (RR phase then DP-SGD phase), its two
single-phase special cases, and non-private training."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Literal, NamedTuple

import numpy as np
from scipy.special import expit

from .data import Dataset, FeatureBlock, cap_examples_per_user
from .errors import ConfigurationError
from .metrics import auc, relative_auc_loss
from .model import (GradVector, ModelConfig, ModelParams, Scope, bce_loss, clipped_grad_sum,
                    forward_batch, init_params, predict, weighted_grad_sum)
from .optim import OptimizerSpec, apply_update, lr_at
from .privacy import (DEFAULT_DELTA, PrivacyBudget, add_noise, calibrate_sigma, counter_rng,
                      debias_coefficients, dpsgd_epsilon, keep_probability, poisson_sample,
                      randomized_response, split_budget, user_level_calibrate)

logger = logging.getLogger(__name__)

Algorithm = Literal["hybrid", "rr_only", "dpsgd_only", "nonprivate"]
ALGORITHMS = ("hybrid", "rr_only", "dpsgd_only", "nonprivate")


@dataclass(frozen=True)
class LabelDpConfig:
    epochs: int = 3
    batch_size: int = 512
    optimizer: OptimizerSpec = OptimizerSpec("rmsprop", 1e-3)


@dataclass(frozen=True)
class DpSgdConfig:
    epochs: float = 1.0
    steps: int | None = None
    expected_batch: int = 1024
    clip_norm: float = 1.0
    optimizer: OptimizerSpec = OptimizerSpec("adam", 1e-3)


@dataclass(frozen=True)
class NonPrivateConfig:
    epochs: int = 5
    batch_size: int = 512
    optimizer: OptimizerSpec = OptimizerSpec("rmsprop", 1e-3)


@dataclass(frozen=True)
class UserLevelConfig:
    """Per-phase example caps. ``max_cap`` fixes the DP-SGD step count to one
    epoch over the dataset capped at that value (default: the larger phase cap)."""

    cap_rr: int = 1
    cap_dpsgd: int = 1
    max_cap: int | None = None

    def __post_init__(self):
        if min(self.cap_rr, self.cap_dpsgd, self.max_cap or 1) < 1:
            raise ConfigurationError("example caps must be >= 1")


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    rr: int = 1
    noise: int = 2
    init: int = 3


@dataclass(frozen=True)
class TrainConfig:
    algorithm: Algorithm = "hybrid"
    budget: PrivacyBudget = PrivacyBudget(5.0, DEFAULT_DELTA)
    label_dp: LabelDpConfig = LabelDpConfig()
    dpsgd: DpSgdConfig = DpSgdConfig()
    nonprivate: NonPrivateConfig = NonPrivateConfig()
    user_level: UserLevelConfig | None = None
    seeds: Seeds = Seeds()

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}; pick one of {ALGORITHMS}")
        if self.algorithm != "nonprivate":
            self.budget.check()
            if not self.budget.epsilon > 0:
                raise ConfigurationError(f"{self.algorithm} needs epsilon > 0")
            if self.algorithm != "rr_only" and not 0 < self.budget.delta < 1:
                raise ConfigurationError("DP-SGD needs 0 < delta < 1")


@dataclass(frozen=True)
class LedgerEntry:
    mechanism: str
    epsilon: float
    delta: float
    params: dict = field(default_factory=dict)


class PrivacyLedger:
    """Per-phase privacy spend, composed by summing epsilons and deltas."""

    def __init__(self):
        self.entries: list[LedgerEntry] = []

    def record(self, mechanism: str, epsilon: float, delta: float, **params) -> None:
        self.entries.append(LedgerEntry(mechanism, epsilon, delta, params))

    def total(self) -> PrivacyBudget:
        return PrivacyBudget(sum(e.epsilon for e in self.entries),
                             sum(e.delta for e in self.entries))

    def as_tuples(self) -> list[tuple[str, float, float]]:
        return [(e.mechanism, e.epsilon, e.delta) for e in self.entries]

    def to_list(self) -> list[dict]:
        return [asdict(e) for e in self.entries]


@dataclass
class TrainReport:
    algorithm: str
    test_auc: float | None
    relative_auc_loss_pct: float | None
    eval_scope: Scope
    ledger: list[dict]
    total_epsilon: float
    total_delta: float
    phase_steps: dict
    n_train: int
    n_test: int
    seeds: dict
    wall_clock_s: float

    def to_dict(self) -> dict:
        return asdict(self)


class LabelDpRelease(NamedTuple):
    """Output of the randomized-response mechanism: non-sensitive features and noisy labels."""

    features: FeatureBlock
    noisy_labels: np.ndarray


def release_noisy_labels(dataset: Dataset, eps1: float, seed) -> LabelDpRelease:
    """The only point where the label-DP phase touches the private dataset."""
    features = dataset.nonsensitive_features()
    noisy = randomized_response(dataset.get_labels(), eps1, np.random.default_rng(seed))
    return LabelDpRelease(FeatureBlock(features.cat.copy(), features.num.copy()), noisy)


# --------------------------------------------------------------------------

def _minibatch_train(params: ModelParams, ns: FeatureBlock, s: FeatureBlock | None,
                     c0: np.ndarray, c1: np.ndarray, scope: Scope, epochs: int,
                     batch_size: int, opt: OptimizerSpec, shuffle_seed: int,
                     history: list | None) -> tuple[ModelParams, int]:
    """Shuffled mini-batch training on the per-example objective ``c0*l(z,0) + c1*l(z,1)``."""
    n = len(c0)
    if n == 0 or epochs < 1:
        return params, 0
    truncated = scope == "truncated"
    steps_per_epoch = math.ceil(n / batch_size)
    schedule = opt.schedule_for(epochs * steps_per_epoch)
    state = opt.build(scope, len(params.layout.scope_indices(scope)))
    t = 0
    for epoch in range(epochs):
        perm = counter_rng(shuffle_seed, epoch).permutation(n)
        for lo in range(0, n, batch_size):
            b = perm[lo:lo + batch_size]
            logits, cache = forward_batch(params, ns.take(b), None if truncated else s.take(b),
                                          truncated=truncated)
            sig = expit(logits)
            dlogit = c0[b] * sig + c1[b] * (sig - 1.0)
            if history is not None:
                history.append(float(np.mean(c0[b] * bce_loss(logits, 0.0) + c1[b] * bce_loss(logits, 1.0))))
            g = weighted_grad_sum(params, cache, dlogit, np.full(len(b), 1.0 / len(b)), scope)
            params, state = apply_update(params, GradVector(g, scope), state, lr_at(schedule, t))
            t += 1
    return params, t


def run_label_dp_phase(train_set: Dataset, params: ModelParams, config: TrainConfig, eps1: float,
                       ledger: PrivacyLedger | None = None, history: list | None = None,
                       steps_out: dict | None = None) -> ModelParams:
    """Randomize labels once with eps1, then train the truncated model on the debiased loss."""
    if not eps1 > 0:
        raise ConfigurationError(
            f"the label-DP phase needs eps1 > 0 (got {eps1}); use algorithm dpsgd_only "
            "to spend the whole budget on DP-SGD")
    cfg = config.label_dp
    release = release_noisy_labels(train_set, eps1, config.seeds.rr)
    c0, c1 = debias_coefficients(eps1, release.noisy_labels)
    params, steps = _minibatch_train(params, release.features, None, c0, c1, "truncated",
                                     cfg.epochs, cfg.batch_size, cfg.optimizer,
                                     config.seeds.data, history)
    if ledger is not None:
        ledger.record("randomized_response", eps1, 0.0, keep_probability=keep_probability(eps1),
                      epochs=cfg.epochs, n=len(c0))
    if steps_out is not None:
        steps_out["label_dp"] = steps
    return params


def run_nonprivate_phase(train_set: Dataset, params: ModelParams, config: TrainConfig,
                         scope: Scope = "full", history: list | None = None,
                         steps_out: dict | None = None) -> ModelParams:
    """Plain mini-batch training on true labels, of the full or the truncated model."""
    cfg = config.nonprivate
    y = train_set.get_labels().astype(np.float64)
    ns = train_set.nonsensitive_features()
    s = train_set.sensitive_features() if scope == "full" else None
    params, steps = _minibatch_train(params, ns, s, 1.0 - y, y, scope, cfg.epochs,
                                     cfg.batch_size, cfg.optimizer, config.seeds.data, history)
    if steps_out is not None:
        steps_out["nonprivate"] = steps
    return params


def dpsgd_schedule(n: int, cfg: DpSgdConfig, steps: int | None = None) -> tuple[float, int]:
    """Sampling rate and step count for a DP-SGD phase over ``n`` examples."""
    q = min(1.0, cfg.expected_batch / n)
    if steps is None:
        steps = cfg.steps if cfg.steps is not None else math.ceil(cfg.epochs * n / (q * n))
    return q, max(1, int(steps))


def run_dpsgd_phase(train_set: Dataset, params: ModelParams, config: TrainConfig, eps2: float,
                    delta: float, ledger: PrivacyLedger | None = None, history: list | None = None,
                    steps: int | None = None, sigma_override: float | None = None,
                    steps_out: dict | None = None, ledger_budget: PrivacyBudget | None = None,
                    ) -> ModelParams:
    """DP-SGD on the full model with Poisson batches and a calibrated noise multiplier.

    ``sigma_override`` skips calibration (the ledger then records whatever the
    accountant reports for that sigma). ``ledger_budget`` replaces the recorded
    (eps, delta), for user-level runs where the calibrated target is an
    example-level image of the recorded user-level budget.
    """
    if not eps2 > 0 and sigma_override is None:
        raise ConfigurationError(f"the DP-SGD phase needs eps2 > 0, got {eps2}")
    cfg = config.dpsgd
    n = len(train_set)
    q, T = dpsgd_schedule(n, cfg, steps)
    batch = q * n
    if sigma_override is None:
        sigma = calibrate_sigma(eps2, delta, q, T)
    else:
        sigma = sigma_override
    spent = dpsgd_epsilon(q, sigma, T, delta) if sigma > 0 else None

    ns = train_set.nonsensitive_features()
    s = train_set.sensitive_features()
    y = train_set.get_labels().astype(np.float64)
    schedule = cfg.optimizer.schedule_for(T)
    state = cfg.optimizer.build("full", params.layout.size)
    for t in range(T):
        rng = counter_rng(config.seeds.noise, t)
        idx = poisson_sample(n, q, rng)
        if len(idx):
            logits, cache = forward_batch(params, ns.take(idx), s.take(idx))
            grad_sum, _ = clipped_grad_sum(params, cache, expit(logits) - y[idx], cfg.clip_norm, "full")
            if history is not None:
                history.append(float(np.mean(bce_loss(logits, y[idx]))))
        else:
            grad_sum = np.zeros(params.layout.size)
        g = add_noise(grad_sum, cfg.clip_norm, sigma, batch, rng)
        params, state = apply_update(params, GradVector(g, "full"), state, lr_at(schedule, t))

    if ledger is not None:
        accounted = spent.epsilon if spent is not None else math.inf
        if ledger_budget is not None:
            rec_eps, rec_delta = ledger_budget.epsilon, ledger_budget.delta
        elif sigma_override is None:
            rec_eps, rec_delta = eps2, delta
        else:
            rec_eps, rec_delta = accounted, delta
        ledger.record("dp_sgd", rec_eps, rec_delta, sigma=sigma, q=q, steps=T,
                      clip_norm=cfg.clip_norm, accountant_epsilon=accounted,
                      accountant_order=spent.order if spent is not None else None,
                      example_level_epsilon=eps2, example_level_delta=delta)
    if steps_out is not None:
        steps_out["dp_sgd"] = T
    return params


# --------------------------------------------------------------------------

def _cap_seed(config: TrainConfig, cap: int) -> list[int]:
    return [config.seeds.data, 7919, cap]


def train(train_set: Dataset, config: TrainConfig, model_config: ModelConfig | None = None,
          test_set: Dataset | None = None, auc_np: float | None = None,
          ) -> tuple[ModelParams, TrainReport]:
    """Run one algorithm end to end and evaluate on ``test_set`` if given."""
    start = time.perf_counter()
    if model_config is None:
        model_config = ModelConfig.from_schema(train_set.schema, seed=config.seeds.init)
    params = init_params(model_config)
    ledger = PrivacyLedger()
    steps: dict = {}
    eps, delta = config.budget.epsilon, config.budget.delta
    ul = config.user_level
    alg = config.algorithm

    def rr_phase(p, eps1):
        data = train_set
        if ul is not None:
            data = cap_examples_per_user(train_set, ul.cap_rr, _cap_seed(config, ul.cap_rr))
            ex = user_level_calibrate(PrivacyBudget(eps1, 0.0), ul.cap_rr)
            p = run_label_dp_phase(data, p, config, ex.epsilon, None, steps_out=steps)
            ledger.record("randomized_response", eps1, 0.0, cap=ul.cap_rr,
                          example_level_epsilon=ex.epsilon,
                          keep_probability=keep_probability(ex.epsilon),
                          epochs=config.label_dp.epochs, n=len(data))
            return p
        return run_label_dp_phase(data, p, config, eps1, ledger, steps_out=steps)

    def dp_phase(p, eps2):
        if ul is None:
            return run_dpsgd_phase(train_set, p, config, eps2, delta, ledger, steps_out=steps)
        data = cap_examples_per_user(train_set, ul.cap_dpsgd, _cap_seed(config, ul.cap_dpsgd))
        n_users = len(np.unique(train_set.user_ids))
        max_cap = ul.max_cap or max(ul.cap_rr, ul.cap_dpsgd)
        fixed = math.ceil(n_users * max_cap / config.dpsgd.expected_batch)
        ex = user_level_calibrate(PrivacyBudget(eps2, delta), ul.cap_dpsgd)
        return run_dpsgd_phase(data, p, config, ex.epsilon, ex.delta, ledger, steps=fixed,
                               steps_out=steps, ledger_budget=PrivacyBudget(eps2, delta))

    if alg == "hybrid":
        split = split_budget(eps, delta)
        params = rr_phase(params, split.eps1)
        params = dp_phase(params, split.eps2)
    elif alg == "rr_only":
        params = rr_phase(params, eps)
    elif alg == "dpsgd_only":
        params = dp_phase(params, eps)
    else:
        params = run_nonprivate_phase(train_set, params, config, "full", steps_out=steps)

    eval_scope: Scope = "truncated" if alg == "rr_only" else "full"
    test_auc = rel = None
    if test_set is not None:
        logits = predict(params, test_set.nonsensitive_features(),
                         test_set.sensitive_features(), truncated=eval_scope == "truncated")
        test_auc = auc(logits, test_set.get_labels())
        if auc_np is not None:
            rel = relative_auc_loss(test_auc, auc_np)

    total = ledger.total()
    report = TrainReport(
        algorithm=alg,
        test_auc=test_auc,
        relative_auc_loss_pct=rel,
        eval_scope=eval_scope,
        ledger=ledger.to_list(),
        total_epsilon=total.epsilon,
        total_delta=total.delta,
        phase_steps=steps,
        n_train=len(train_set),
        n_test=0 if test_set is None else len(test_set),
        seeds=asdict(config.seeds),
        wall_clock_s=time.perf_counter() - start,
    )
    logger.info("%s eps=%s auc=%s", alg, eps, test_auc)
    return params, report
