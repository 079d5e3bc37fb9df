"""Optimizer, learning-rate schedule, single training runs and the grid search.

Randomness is keyed entirely to the run seed. Each job derives separate
generators from ``SeedSequence([seed, purpose])``:

====== ===========================================
purpose stream
====== ===========================================
0       encoder initialisation
1       proxy initialisation (SoftTriple / ProxyNCA)
2       minibatch shuffling
3       triplet sampling
====== ===========================================

Fold splits come from :func:`~tripledml.data.stratified_kfold` keyed to the
same seed. Because the encoder stream does not depend on the loss, a
TripleEntropy run with ``beta=1`` starts from exactly the same weights as
a cross-entropy run.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autograd import Tensor
from .data import TextDataset, stratified_kfold
from .encoder import EncoderModel, Vocabulary, encode, make_batch, token_views_for_dml, tokenize
from .errors import ConfigError, ContractError, NumericError
from .losses import (
    ContrastiveParams,
    ProxyNcaParams,
    SoftTripleParams,
    TripleEntropyParams,
    TripletParams,
    contrastive_loss_batch,
    multinomial_cross_entropy,
    normalize_rows,
    one_hot,
    proxy_nca_loss_batch,
    sample_triplets,
    soft_triple_loss,
    soft_triple_similarities,
    triple_entropy_loss,
    triplet_loss_batch,
)
from .reporting import RunRecord, RunReport

log = logging.getLogger(__name__)

FINETUNE_LR = 1e-5
# from-scratch encoder: the fine-tuning rate of a pretrained model barely moves it;
# picked by tuning the CE baseline only
DESK_LR = 0.1
PROTOCOL_SEEDS = (2, 16, 128, 2048)

# -- optimizer ----------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW moment buffers and hyperparameters."""

    base_lr: float = FINETUNE_LR
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float):
    """One AdamW update in place.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` is applied before the
    bias-corrected adaptive-moment step.
    """
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise NumericError(f"non-finite gradient for {name!r} ({bad} entries) at step {state.step}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= lr * state.weight_decay * p.data
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# -- schedule -----------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    """Linear warmup from 0 to ``base_lr`` over the first ``warmup_fraction`` of steps, then linear decay to 0."""

    total_steps: int
    warmup_fraction: float = 0.06
    base_lr: float = FINETUNE_LR

    def __post_init__(self):
        if self.total_steps < 1:
            raise ContractError("schedule needs at least one step")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ContractError(f"warmup fraction {self.warmup_fraction} outside [0, 1]")

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_fraction * self.total_steps)


def lr_at(step: int, schedule: Schedule) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps}]")
    warm = schedule.warmup_steps
    if step <= warm:
        return schedule.base_lr * (step / warm) if warm else schedule.base_lr
    return schedule.base_lr * ((schedule.total_steps - step) / (schedule.total_steps - warm))


# -- configurations -------------------------------------------------------------

LOSSES = ("ce", "contrastive", "triplet", "proxynca", "softtriple", "tripleentropy")
LOSS_FIELDS = {
    "ce": (),
    "contrastive": ("margin",),
    "triplet": ("alpha",),
    "proxynca": (),
    "softtriple": ("k", "gamma", "lam", "delta"),
    "tripleentropy": ("k", "gamma", "lam", "delta", "beta"),
}
LOSS_DEFAULTS = {"k": 10, "gamma": 0.1, "lam": 4.0, "delta": 0.1, "beta": 0.5, "margin": 1.0, "alpha": 0.2}


@dataclass(frozen=True)
class LossConfig:
    """Which objective to train with and its loss-specific hyperparameters.

    Fields that do not belong to ``loss`` must stay ``None``.
    """

    loss: str = "ce"
    k: int | None = None
    gamma: float | None = None
    lam: float | None = None
    delta: float | None = None
    beta: float | None = None
    margin: float | None = None
    alpha: float | None = None

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; choose from {LOSSES}")
        allowed = LOSS_FIELDS[self.loss]
        for name in LOSS_DEFAULTS:
            value = getattr(self, name)
            if value is not None and name not in allowed:
                raise ConfigError(f"--{'lambda' if name == 'lam' else name} does not apply to loss {self.loss!r}")
            if value is None and name in allowed:
                object.__setattr__(self, name, LOSS_DEFAULTS[name])
        if self.beta is not None and not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.k is not None:
            if int(self.k) != self.k or self.k < 1:
                raise ConfigError(f"k must be a positive integer, got {self.k}")
            object.__setattr__(self, "k", int(self.k))

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**{k: v for k, v in d.items() if k in {f.name for f in fields(cls)}})

    def label(self) -> str:
        parts = [self.loss] + [f"{n}={getattr(self, n)}" for n in LOSS_FIELDS[self.loss]]
        return " ".join(parts)


@dataclass(frozen=True)
class HyperGrid:
    k: tuple = (10, 100, 1000)
    gamma: tuple = (0.01, 0.03, 0.05, 0.07, 0.1)
    lam: tuple = (1, 3, 3.3, 4, 6, 8, 10)
    delta: tuple = (0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 1)
    beta: tuple = (0.1, 0.3, 0.5, 0.7, 0.9)

    @property
    def size(self) -> int:
        return len(self.k) * len(self.gamma) * len(self.lam) * len(self.delta) * len(self.beta)

    def configs(self) -> list[LossConfig]:
        """TripleEntropy configs in lexicographic (k, gamma, lambda, delta, beta) order."""
        combos = itertools.product(sorted(self.k), sorted(self.gamma), sorted(self.lam), sorted(self.delta), sorted(self.beta))
        return [LossConfig("tripleentropy", k=k, gamma=float(g), lam=float(l), delta=float(d), beta=float(b))
                for k, g, l, d, b in combos]


FULL_GRID = HyperGrid()
DESK_GRID = HyperGrid(k=(10,), gamma=(0.1,), lam=(4,), delta=(0.1,), beta=(0.1, 0.5, 0.9))
GRID_PRESETS = {"paper-full": FULL_GRID, "desk-small": DESK_GRID}


@dataclass(frozen=True)
class TrainSettings:
    dim: int = 64
    epochs: int = 10
    batch_size: int = 64
    lr: float = DESK_LR
    weight_decay: float = 0.01
    warmup_fraction: float = 0.06
    patience: int = 3
    pooling: str = "mean"
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.dim < 1:
            raise ConfigError("epochs, batch size and dim must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate and weight decay must be >= 0")


@dataclass(frozen=True)
class ExperimentPlan:
    configs: tuple[LossConfig, ...]
    seeds: tuple[int, ...] = PROTOCOL_SEEDS
    fold_count: int = 5
    settings: TrainSettings = TrainSettings()

    def __post_init__(self):
        if not self.configs:
            raise ConfigError("experiment plan has no configurations")
        if len(set(self.configs)) != len(self.configs):
            raise ConfigError("duplicate configurations in plan")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError("seeds must be a non-empty list of distinct values")
        if self.fold_count < 2:
            raise ConfigError("need at least 2 folds")

    @classmethod
    def from_grid(cls, grid: HyperGrid, **kw) -> "ExperimentPlan":
        return cls(configs=tuple(grid.configs()), **kw)

    def jobs(self) -> list[tuple[LossConfig, int, int]]:
        return [(c, s, f) for c in self.configs for s in self.seeds for f in range(self.fold_count)]


# -- a single run ---------------------------------------------------------------


def _rng(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), purpose]))


@dataclass
class TrainResult:
    val_accuracy: float
    model: EncoderModel
    vocab: Vocabulary
    loss_params: dict[str, Tensor]
    epochs_trained: int
    losses: list[float]
    val_history: list[float]
    centroids: np.ndarray | None = None

    def predictor(self, config: LossConfig) -> "Predictor":
        return Predictor(config, self.model, self.loss_params, self.centroids)


class _Objective:
    """Builds the training loss for one configuration and owns any proxy weights."""

    def __init__(self, config: LossConfig, num_classes: int, dim: int, seed: int):
        self.config = config
        self.num_classes = num_classes
        proxy_rng = _rng(seed, 1)
        self.params: dict[str, Tensor] = {}
        self.soft_triple: SoftTripleParams | None = None
        self.proxy_nca: ProxyNcaParams | None = None
        if config.loss in ("softtriple", "tripleentropy"):
            self.soft_triple = SoftTripleParams.init(num_classes, config.k, dim, proxy_rng,
                                                     gamma=config.gamma, lam=config.lam, delta=config.delta)
            self.params["proxies"] = self.soft_triple.weights
        elif config.loss == "proxynca":
            self.proxy_nca = ProxyNcaParams.init(num_classes, dim, proxy_rng)
            self.params["proxies"] = self.proxy_nca.proxies
        self.triplet_rng = _rng(seed, 3)

    def __call__(self, batch, model: EncoderModel) -> Tensor:
        cfg = self.config
        tokens, pooled, probs = encode(batch, model)
        if cfg.loss == "ce":
            return multinomial_cross_entropy(probs, one_hot(batch.labels, self.num_classes))
        if cfg.loss == "tripleentropy":
            flat, flat_labels = token_views_for_dml(tokens, batch.pad_mask, batch.labels)
            params = TripleEntropyParams(cfg.beta, self.soft_triple)
            return triple_entropy_loss(probs, one_hot(batch.labels, self.num_classes), flat, flat_labels, params)
        if cfg.loss == "softtriple":
            flat, flat_labels = token_views_for_dml(tokens, batch.pad_mask, batch.labels)
            return soft_triple_loss(flat, flat_labels, self.soft_triple)
        if cfg.loss == "proxynca":
            return proxy_nca_loss_batch(pooled, batch.labels, self.proxy_nca)
        if cfg.loss == "contrastive":
            return contrastive_loss_batch(pooled, batch.labels, ContrastiveParams(cfg.margin))
        # triplet
        a, p, n = sample_triplets(batch.labels, self.triplet_rng)
        if a.size == 0:
            return (pooled * 0.0).sum()
        return triplet_loss_batch(pooled.gather_rows(a), pooled.gather_rows(p), pooled.gather_rows(n),
                                  TripletParams(cfg.alpha))


def _batches(indices: np.ndarray, size: int) -> Iterable[np.ndarray]:
    for start in range(0, len(indices), size):
        yield indices[start:start + size]


class Predictor:
    """Turns a trained encoder (plus any loss parameters) into class predictions.

    Losses with a classifier path use the head's argmax. The pure metric
    losses classify the pooled embedding: by nearest normalized proxy
    (ProxyNCA), highest relaxed similarity (SoftTriple) or nearest class
    centroid of the training embeddings (contrastive, triplet).
    """

    def __init__(self, config: LossConfig, model: EncoderModel, loss_params: dict[str, Tensor],
                 centroids: np.ndarray | None = None):
        self.config = config
        self.model = model
        self.loss_params = loss_params
        self.centroids = centroids

    def __call__(self, batch) -> np.ndarray:
        _, pooled, probs = encode(batch, self.model)
        loss = self.config.loss
        if loss in ("ce", "tripleentropy"):
            return np.argmax(probs.data, axis=1)
        if loss == "softtriple":
            c = self.config
            params = SoftTripleParams(self.loss_params["proxies"], gamma=c.gamma, lam=c.lam, delta=c.delta)
            return np.argmax(soft_triple_similarities(pooled, params).data, axis=1)
        if loss == "proxynca":
            x = normalize_rows(pooled).data
            p = normalize_rows(self.loss_params["proxies"]).data
            return np.argmax(x @ p.T, axis=1)
        d = ((pooled.data[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d, axis=1)


def _pooled_centroids(model, seqs, labels, idx, pad_id, num_classes, batch_size) -> np.ndarray:
    sums = np.zeros((num_classes, model.dim))
    counts = np.zeros(num_classes)
    for chunk in _batches(idx, batch_size):
        batch = make_batch([seqs[i] for i in chunk], labels[chunk], pad_id)
        _, pooled, _ = encode(batch, model)
        np.add.at(sums, batch.labels, pooled.data)
        np.add.at(counts, batch.labels, 1.0)
    return sums / np.maximum(counts, 1.0)[:, None]


def _accuracy(predict, seqs, labels, idx, pad_id, batch_size) -> float:
    correct = 0
    for chunk in _batches(idx, batch_size):
        batch = make_batch([seqs[i] for i in chunk], labels[chunk], pad_id)
        correct += int(np.sum(predict(batch) == batch.labels))
    return correct / len(idx)


def train_one(
    config: LossConfig,
    seed: int,
    train_idx,
    val_idx,
    ds: TextDataset,
    epochs: int | None = None,
    settings: TrainSettings = TrainSettings(),
) -> TrainResult:
    """Train on ``train_idx`` and report argmax accuracy on ``val_idx``.

    Validation runs after every epoch; training stops after
    ``settings.patience`` evaluations without improvement and the best
    epoch's weights are returned.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if np.intersect1d(train_idx, val_idx).size:
        raise ContractError("train and validation indices overlap")
    if train_idx.size == 0 or val_idx.size == 0:
        raise ContractError("empty train or validation split")
    epochs = settings.epochs if epochs is None else epochs
    records = ds.records
    vocab = Vocabulary.build(t for i in train_idx for t in (records[i].text, records[i].text2) if t is not None)
    seqs = [tokenize(r.text, vocab, r.text2) for r in records]
    labels = ds.labels

    model = EncoderModel.init(len(vocab), ds.num_classes, settings.dim, _rng(seed, 0), pooling=settings.pooling)
    objective = _Objective(config, ds.num_classes, settings.dim, seed)
    params = {**model.parameters(), **objective.params}
    state = OptimizerState(base_lr=settings.lr, weight_decay=settings.weight_decay)
    steps_per_epoch = math.ceil(train_idx.size / settings.batch_size)
    schedule = Schedule(epochs * steps_per_epoch, settings.warmup_fraction, settings.lr)
    shuffle_rng = _rng(seed, 2)

    losses: list[float] = []
    val_history: list[float] = []
    best_acc, best_state, stale, step = -1.0, None, 0, 0
    for epoch in range(epochs):
        order = shuffle_rng.permutation(train_idx)
        for chunk in _batches(order, settings.batch_size):
            batch = make_batch([seqs[i] for i in chunk], labels[chunk], vocab.pad_id)
            loss = objective(batch, model)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"loss became {value} at step {step} (epoch {epoch}) for config {config.label()} seed {seed}")
            for p in params.values():
                p.grad = None
            loss.backward()
            grads = {name: p.grad for name, p in params.items() if p.grad is not None}
            try:
                optimizer_step(params, grads, state, lr_at(step, schedule))
            except NumericError as exc:
                raise NumericError(f"{exc}; config {config.label()} seed {seed}") from exc
            losses.append(value)
            step += 1
        centroids = None
        if config.loss in ("contrastive", "triplet"):
            centroids = _pooled_centroids(model, seqs, labels, train_idx, vocab.pad_id, ds.num_classes,
                                          settings.eval_batch_size)
        predictor = Predictor(config, model, objective.params, centroids)
        acc = _accuracy(predictor, seqs, labels, val_idx, vocab.pad_id, settings.eval_batch_size)
        val_history.append(acc)
        if acc > best_acc:
            best_acc, stale = acc, 0
            best_state = {name: p.data.copy() for name, p in params.items()}
        else:
            stale += 1
            if stale >= settings.patience:
                break
    for name, p in params.items():
        p.data = best_state[name]
        p.grad = None
    centroids = None
    if config.loss in ("contrastive", "triplet"):
        centroids = _pooled_centroids(model, seqs, labels, train_idx, vocab.pad_id, ds.num_classes,
                                      settings.eval_batch_size)
    return TrainResult(best_acc, model, vocab, objective.params, len(val_history), losses, val_history, centroids)


def evaluate_accuracy(predictor: Predictor, ds: TextDataset, vocab: Vocabulary, indices=None,
                      batch_size: int = 256) -> float:
    """Argmax accuracy of ``predictor`` on ``ds`` (or the rows in ``indices``)."""
    idx = np.arange(len(ds)) if indices is None else np.asarray(indices, dtype=np.int64)
    seqs = [tokenize(r.text, vocab, r.text2) for r in ds.records]
    return _accuracy(predictor, seqs, ds.labels, idx, vocab.pad_id, batch_size)


# -- grid execution -------------------------------------------------------------


def _job_key(config: LossConfig, seed: int, fold: int) -> str:
    return json.dumps([config.as_dict(), seed, fold], sort_keys=True)


def _run_job(args) -> RunRecord:
    config, seed, fold, ds, fold_count, settings, dataset_name = args
    split = stratified_kfold(ds, fold_count, seed)
    train_idx, val_idx = split[fold]
    start = time.perf_counter()
    result = train_one(config, seed, train_idx, val_idx, ds, settings=settings)
    return RunRecord(
        dataset=dataset_name,
        config=config.as_dict(),
        seed=seed,
        fold=fold,
        val_accuracy=result.val_accuracy,
        epochs_trained=result.epochs_trained,
        wall_time=time.perf_counter() - start,
    )


def run_grid(
    plan: ExperimentPlan,
    ds: TextDataset,
    jobs: int = 1,
    results_path=None,
    resume: bool = False,
    dataset_name: str | None = None,
    max_new_jobs: int | None = None,
) -> RunReport:
    """Train every (config, seed, fold) triple once and aggregate.

    With ``results_path`` each finished run is appended as one JSON line;
    ``resume=True`` skips runs already present there. ``max_new_jobs`` stops
    early after that many fresh runs (used to simulate interruption); the
    returned report then only covers what has finished.
    """
    name = dataset_name or str(ds.provenance.get("source", "dataset"))
    done: dict[str, RunRecord] = {}
    sink = None
    if results_path is not None:
        results_path = Path(results_path)
        if resume and results_path.exists():
            for line in results_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    rec = RunRecord.from_dict(json.loads(line))
                    done[_job_key(LossConfig.from_dict(rec.config), rec.seed, rec.fold)] = rec
        elif results_path.exists():
            results_path.unlink()
        results_path.parent.mkdir(parents=True, exist_ok=True)
        sink = results_path.open("a", encoding="utf-8")

    pending = [(c, s, f) for c, s, f in plan.jobs() if _job_key(c, s, f) not in done]
    if max_new_jobs is not None:
        pending = pending[:max_new_jobs]
    log.info("%d runs planned, %d already done, %d to run", len(plan.jobs()), len(done), len(pending))
    args = [(c, s, f, ds, plan.fold_count, plan.settings, name) for c, s, f in pending]

    def record(rec: RunRecord) -> None:
        done[_job_key(LossConfig.from_dict(rec.config), rec.seed, rec.fold)] = rec
        if sink is not None:
            sink.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")
            sink.flush()

    try:
        if jobs <= 1 or len(args) <= 1:
            for a in args:
                record(_run_job(a))
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(_run_job, a) for a in args]
                for fut in as_completed(futures):
                    record(fut.result())
    finally:
        if sink is not None:
            sink.close()

    ordered = [done[k] for k in (_job_key(c, s, f) for c, s, f in plan.jobs()) if k in done]
    metadata = {
        "dataset": name,
        "n_sentences": len(ds),
        "seeds": list(plan.seeds),
        "fold_count": plan.fold_count,
        "settings": asdict(plan.settings),
        "provenance": {k: v for k, v in ds.provenance.items()},
    }
    return RunReport(records=ordered, metadata=metadata, dataset_sizes={name: len(ds)})


def with_settings(plan: ExperimentPlan, **changes) -> ExperimentPlan:
    return replace(plan, settings=replace(plan.settings, **changes))
