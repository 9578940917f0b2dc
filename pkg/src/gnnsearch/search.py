"""Search strategies, the shared-parameter store, and derivation.

Four strategies produce one reward per episode:

- ``graphnas``: controller-sampled architectures; with sharing enabled,
  children start from store copies, train a few epochs, and merge back
  when the shaped reward is positive.
- ``random``: uniform architectures, each trained from scratch.
- ``nas-like``: controller, but every child trained from scratch for
  the full epoch budget (no store).
- ``enas-like``: controller plus store, zero child optimizer steps; the
  reward comes from evaluating store copies directly.

Passing a surrogate ``reward_table`` (keyed by the encoded architecture)
bypasses all child training, which makes controller behavior cheap to
study and fully deterministic.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .arch import ActionSpace, ArchDescription, default_space, encode, random_arch
from .autodiff import Tensor
from .controller import Baseline, Controller, Episode, reinforce_step, shape_reward
from .errors import ConfigError, ParameterError, ShapeError, TrainingError
from .gnn import (
    ChildModel,
    LayerParams,
    TrainHyperparams,
    build_model,
    evaluate,
    init_layer_params,
    layer_signatures,
    train_child,
)
from .graphs import LabeledDataset

STRATEGIES = ("graphnas", "random", "nas-like", "enas-like")


@dataclass(frozen=True)
class ShareKey:
    """What must coincide for two layers to share trained weights."""

    layer_index: int
    attention: str
    aggregation: str
    in_dim: int
    heads: int
    hidden: int


class SharedParamStore:
    """Snapshots of trained layer weights, keyed by layer signature.

    Lookups never mutate the store; only ``merge_if_positive`` writes.
    Residual projections are not stored: the key cannot see the skip
    source dimension, so their shapes are not reproducible from it.
    """

    def __init__(self):
        self.entries: dict[ShareKey, dict] = {}
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self.entries)

    def layer_params(self, layer_index, attention, aggregation, in_dim, heads, hidden, rng) -> LayerParams:
        key = ShareKey(layer_index, attention, aggregation, in_dim, heads, hidden)
        return fetch_copy(self, key, rng)


def fetch_copy(store: SharedParamStore, key: ShareKey, rng: np.random.Generator) -> LayerParams:
    """A private copy of the stored entry, or a fresh draw on a miss."""
    stored = store.entries.get(key)
    if stored is None:
        store.misses += 1
        return init_layer_params(rng, key.attention, key.aggregation, key.in_dim, key.heads, key.hidden)
    store.hits += 1
    tensors = {name: Tensor(value.copy(), requires_grad=True) for name, value in stored.items()}
    return LayerParams(key.attention, key.aggregation, key.in_dim, key.heads, key.hidden, tensors)


def merge_if_positive(store: SharedParamStore, key: ShareKey, params: LayerParams, shaped_reward: float) -> bool:
    """Overwrite the store entry when the shaped reward is strictly positive."""
    if params.attention != key.attention or params.aggregation != key.aggregation:
        raise ParameterError(f"params kinds do not match key {key}")
    if (params.in_dim, params.heads, params.hidden) != (key.in_dim, key.heads, key.hidden):
        raise ShapeError(f"params dims do not match key {key}")
    if shaped_reward <= 0.0:
        return False
    store.entries[key] = {
        name: tensor.data.copy() for name, tensor in params.named().items() if name != "w_res"
    }
    return True


def save_store(store: SharedParamStore, path) -> None:
    arrays = {}
    for key, entry in store.entries.items():
        prefix = "|".join(
            str(part) for part in (key.layer_index, key.attention, key.aggregation, key.in_dim, key.heads, key.hidden)
        )
        for name, value in entry.items():
            arrays[f"{prefix}::{name}"] = value
    np.savez(path, **arrays)


def load_store(path) -> SharedParamStore:
    store = SharedParamStore()
    with np.load(path) as bundle:
        for full_name in bundle.files:
            prefix, name = full_name.split("::")
            layer, attention, aggregation, in_dim, heads, hidden = prefix.split("|")
            key = ShareKey(int(layer), attention, aggregation, int(in_dim), int(heads), int(hidden))
            store.entries.setdefault(key, {})[name] = bundle[full_name].astype(np.float64)
    return store


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SearchConfig:
    """Knobs for one search run.

    The defaults follow the single-graph recipe: no parameter sharing,
    every child trained from scratch for up to ``child_epochs``. The
    multi-graph recipe enables sharing with short child runs and an
    exploration warm-up (e.g. child_epochs=5, exploration_epochs=20).
    """

    strategy: str = "graphnas"
    episodes: int = 1000
    layer_count: int = 2
    skip_enabled: bool = False
    param_sharing: bool = False
    child_epochs: int = 200
    exploration_epochs: int = 0
    derive_samples: int = 20
    derive_train_epochs: int = 5
    top_k: int = 5
    seed: int = 0
    batch_size: int = 1
    workers: int = 1
    controller_hidden: int = 100
    controller_lr: float = 0.0035
    temperature: float = 5.0
    logit_clip: float = 2.5
    entropy_weight: float = 0.0001
    baseline_decay: float = 0.95
    hp: TrainHyperparams = field(default_factory=TrainHyperparams)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: {self.strategy!r} not in {STRATEGIES}")
        positives = (
            ("layer_count", self.layer_count),
            ("child_epochs", self.child_epochs),
            ("derive_samples", self.derive_samples),
            ("derive_train_epochs", self.derive_train_epochs),
            ("top_k", self.top_k),
            ("batch_size", self.batch_size),
            ("workers", self.workers),
            ("controller_hidden", self.controller_hidden),
        )
        for name, value in positives:
            if value < 1:
                raise ConfigError(f"{name}: must be at least 1, got {value}")
        if self.episodes < 0:
            raise ConfigError(f"episodes: must be non-negative, got {self.episodes}")
        if self.exploration_epochs < 0:
            raise ConfigError("exploration_epochs: must be non-negative")
        if self.exploration_epochs > 0 and not (self.strategy == "graphnas" and self.param_sharing):
            raise ConfigError(
                "exploration_epochs: exploration only applies to the graphnas strategy with sharing"
            )
        if self.controller_lr <= 0 or self.temperature <= 0 or self.logit_clip <= 0:
            raise ConfigError("controller_lr, temperature, logit_clip: must be positive")
        if self.entropy_weight < 0:
            raise ConfigError("entropy_weight: must be non-negative")
        if not 0.0 <= self.baseline_decay < 1.0:
            raise ConfigError("baseline_decay: must lie in [0, 1)")

    def uses_controller(self) -> bool:
        return self.strategy != "random"

    def uses_store(self) -> bool:
        return (self.strategy == "graphnas" and self.param_sharing) or self.strategy == "enas-like"


# ---------------------------------------------------------------------------
# episode records


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    arch: str           # encoded with ';' between layers
    raw_reward: float
    shaped_reward: float
    baseline_value: float
    wall_ms: float

    def to_line(self) -> str:
        # Wall time sits in its own final column so the rest of the line
        # is byte-reproducible under a fixed seed.
        return (
            f"{self.episode}\t{self.arch}\t{self.raw_reward:.10g}"
            f"\t{self.shaped_reward:.10g}\t{self.baseline_value:.10g}\t{self.wall_ms:.3f}"
        )

    @classmethod
    def from_line(cls, line: str) -> "EpisodeRecord":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 6:
            raise ParameterError(f"log line has {len(parts)} columns, expected 6")
        return cls(
            episode=int(parts[0]),
            arch=parts[1],
            raw_reward=float(parts[2]),
            shaped_reward=float(parts[3]),
            baseline_value=float(parts[4]),
            wall_ms=float(parts[5]),
        )


@dataclass
class SearchLog:
    records: list
    config: SearchConfig
    space: ActionSpace
    controller: Controller | None
    store: SharedParamStore | None
    baseline: Baseline
    child_opt_steps: int = 0

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def top_k_report(log, k: int) -> list:
    """The k best (arch, raw reward) pairs; ties keep episode order."""
    if k < 1:
        raise ParameterError("k must be at least 1")
    records = list(log)
    ranked = sorted(records, key=lambda r: -r.raw_reward)
    return [(r.arch, r.raw_reward) for r in ranked[:k]]


# ---------------------------------------------------------------------------
# child evaluation per strategy


def _shared_hp(config: SearchConfig, epochs: int, seed: int) -> TrainHyperparams:
    # Shared-weight training runs short and regularizer-free; the stored
    # weights see many architectures, dropout and L2 would just fight that.
    return TrainHyperparams(
        lr=config.hp.lr, l2_lambda=0.0, dropout=0.0,
        max_epochs=epochs, patience=epochs, seed=seed,
    )


def _scratch_hp(config: SearchConfig, max_epochs: int, seed: int) -> TrainHyperparams:
    return replace(
        config.hp,
        max_epochs=max_epochs,
        patience=min(config.hp.patience, max_epochs),
        seed=seed,
    )


class _ChildRunner:
    """Builds, trains, and scores children for one search run."""

    def __init__(self, config: SearchConfig, dataset: LabeledDataset, store: SharedParamStore | None):
        self.config = config
        self.dataset = dataset
        self.store = store
        self.opt_steps = 0

    def _build(self, arch: ArchDescription, rng, with_store: bool) -> ChildModel:
        return build_model(
            arch,
            self.dataset.feature_dim,
            self.dataset.class_count,
            rng,
            store=self.store if with_store else None,
        )

    def reward(self, arch: ArchDescription, rng: np.random.Generator):
        """Returns (raw_reward, trained_model_or_None). Divergence gives 0."""
        config = self.config
        seed = int(rng.integers(2**31))
        try:
            if config.strategy == "enas-like":
                model = self._build(arch, rng, with_store=True)
                return evaluate(model, self.dataset, "val"), model
            if config.strategy == "graphnas" and config.param_sharing:
                model = self._build(arch, rng, with_store=True)
                result = train_child(model, self.dataset, _shared_hp(config, config.child_epochs, seed))
            elif config.strategy == "graphnas":
                model = self._build(arch, rng, with_store=False)
                result = train_child(model, self.dataset, _scratch_hp(config, config.child_epochs, seed))
            else:  # random, nas-like: from scratch, full budget
                model = self._build(arch, rng, with_store=False)
                result = train_child(model, self.dataset, _scratch_hp(config, config.hp.max_epochs, seed))
            self.opt_steps += result.opt_steps
            return result.best_val_metric, result.model
        except TrainingError:
            return 0.0, None

    def merge(self, model: ChildModel, shaped_reward: float) -> None:
        if self.store is None or model is None:
            return
        signatures = layer_signatures(model.arch, self.dataset.feature_dim, self.dataset.class_count)
        for sig, params in zip(signatures, model.layers):
            merge_if_positive(self.store, ShareKey(**sig), params, shaped_reward)


# ---------------------------------------------------------------------------
# the main loops


def exploration_phase(
    store: SharedParamStore,
    space: ActionSpace,
    dataset: LabeledDataset,
    config: SearchConfig,
    rng: np.random.Generator,
    baseline: Baseline,
) -> int:
    """Warm the store with uniformly sampled architectures.

    The controller is never consulted, so its parameters stay
    bit-identical. Rewards still feed the shared baseline. Returns the
    number of merged rounds.
    """
    runner = _ChildRunner(config, dataset, store)
    merged = 0
    for _ in range(config.exploration_epochs):
        arch = random_arch(space, rng)
        raw, model = runner.reward(arch, rng)
        shaped = shape_reward(raw, baseline, 0.0, config.entropy_weight)
        if model is not None:
            runner.merge(model, shaped)
            if shaped > 0.0:
                merged += 1
    return merged


def search(
    config: SearchConfig,
    dataset: LabeledDataset | None = None,
    space: ActionSpace | None = None,
    reward_table: dict | None = None,
    record_sink=None,
) -> SearchLog:
    """Run one search; returns the log plus the trained controller/store.

    Exactly one reward source is used: a dataset (real child training)
    or a surrogate ``reward_table`` mapping encoded architectures to
    rewards. ``record_sink``, when given, receives each EpisodeRecord as
    it is produced.
    """
    if (dataset is None) == (reward_table is None):
        raise ConfigError("search needs exactly one of dataset or reward_table")
    if reward_table is not None and config.exploration_epochs > 0:
        raise ConfigError("exploration_epochs: exploration has no effect with a surrogate reward table")
    if space is None:
        space = default_space(config.layer_count, config.skip_enabled)
    if space.layer_count != config.layer_count or space.skip_enabled != config.skip_enabled:
        raise ConfigError("space: layer_count/skip_enabled disagree with the config")

    rng = np.random.default_rng(config.seed)
    controller = None
    opt_state = None
    if config.uses_controller():
        controller = Controller(
            space,
            rng=rng,
            hidden_size=config.controller_hidden,
            temperature=config.temperature,
            logit_clip=config.logit_clip,
        )
        opt_state = ad.AdamState.init(controller.parameters(), lr=config.controller_lr)
    store = SharedParamStore() if config.uses_store() else None
    baseline = Baseline(decay=config.baseline_decay)
    runner = _ChildRunner(config, dataset, store) if dataset is not None else None

    if config.exploration_epochs > 0 and store is not None:
        exploration_phase(store, space, dataset, config, rng, baseline)

    records = []
    batch: list[Episode] = []
    for index in range(config.episodes):
        started = time.perf_counter()
        if controller is None:
            episode = None
            arch = random_arch(space, rng)
            entropy = 0.0
        else:
            episode = controller.sample(rng)
            arch = episode.arch
            entropy = episode.entropy_sum

        if reward_table is not None:
            key = encode(arch, sep=";")
            if key not in reward_table:
                raise ConfigError(f"reward_table: no entry for architecture {key!r}")
            raw, model = float(reward_table[key]), None
        else:
            raw, model = runner.reward(arch, rng)

        shaped = shape_reward(raw, baseline, entropy, config.entropy_weight)
        if runner is not None and model is not None:
            runner.merge(model, shaped)
        if episode is not None:
            episode.reward = raw
            episode.shaped_reward = shaped
            batch.append(episode)
            if len(batch) == config.batch_size:
                reinforce_step(controller, batch, opt_state)
                batch = []

        record = EpisodeRecord(
            episode=index,
            arch=encode(arch, sep=";"),
            raw_reward=raw,
            shaped_reward=shaped,
            baseline_value=baseline.value,
            wall_ms=(time.perf_counter() - started) * 1000.0,
        )
        records.append(record)
        if record_sink is not None:
            record_sink(record)

    return SearchLog(
        records=records,
        config=config,
        space=space,
        controller=controller,
        store=store,
        baseline=baseline,
        child_opt_steps=runner.opt_steps if runner is not None else 0,
    )


# ---------------------------------------------------------------------------
# derivation


@dataclass
class DeriveResult:
    arch: ArchDescription
    candidate_scores: list
    trained: object  # TrainedResult of the winner, retrained from scratch


def _minibatch_metric(model: ChildModel, dataset: LabeledDataset, rng: np.random.Generator, size: int = 64) -> float:
    """Validation metric on a seeded node minibatch (pooled over graphs)."""
    pool = []
    for g, mask in enumerate(dataset.masks):
        pool.extend((g, int(node)) for node in mask.val)
    if not pool:
        raise ParameterError("no validation nodes to score against")
    chosen = [pool[i] for i in rng.choice(len(pool), size=min(size, len(pool)), replace=False)]
    hits = 0
    tp = fp = fn = 0
    from .gnn import forward  # local import keeps module load light

    by_graph: dict[int, list] = {}
    for g, node in chosen:
        by_graph.setdefault(g, []).append(node)
    for g, nodes in sorted(by_graph.items()):
        idx = np.array(sorted(nodes), dtype=np.int64)
        logits = forward(model, dataset.graphs[g], training=False).data
        labels = dataset.labels[g]
        if dataset.task_kind == "single":
            hits += int(np.sum(np.argmax(logits[idx], axis=1) == labels[idx]))
        else:
            pred = logits[idx] > 0.0
            actual = labels[idx].astype(bool)
            tp += int(np.sum(pred & actual))
            fp += int(np.sum(pred & ~actual))
            fn += int(np.sum(~pred & actual))
    if dataset.task_kind == "single":
        return hits / len(chosen)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def derive(
    controller: Controller,
    store: SharedParamStore | None,
    dataset: LabeledDataset,
    config: SearchConfig,
    rng: np.random.Generator | None = None,
) -> DeriveResult:
    """Sample candidates, cheap-score them, retrain the best from scratch.

    Each candidate starts from store copies (when a store exists), takes
    ``derive_train_epochs`` epochs, and is scored on one seeded
    validation minibatch. Score ties keep the earliest sample. The
    winner retrains from scratch under the full hyperparameters.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed + 1)
    candidates = [controller.sample(rng) for _ in range(config.derive_samples)]
    jobs = []
    for episode in candidates:
        jobs.append((episode.arch, int(rng.integers(2**31)), rng.integers(2**31)))

    def score_one(job):
        arch, child_seed, batch_seed = job
        local_rng = np.random.default_rng(child_seed)
        model = build_model(arch, dataset.feature_dim, dataset.class_count, local_rng, store=store)
        try:
            train_child(model, dataset, _shared_hp(config, config.derive_train_epochs, child_seed))
        except TrainingError:
            return -np.inf
        return _minibatch_metric(model, dataset, np.random.default_rng(batch_seed))

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            scores = list(pool.map(score_one, jobs))
    else:
        scores = [score_one(job) for job in jobs]

    winner = int(np.argmax(np.asarray(scores)))  # first index wins ties
    best_arch = candidates[winner].arch
    final_seed = int(rng.integers(2**31))
    model = build_model(best_arch, dataset.feature_dim, dataset.class_count, np.random.default_rng(final_seed))
    trained = train_child(model, dataset, replace(config.hp, seed=final_seed))
    return DeriveResult(arch=best_arch, candidate_scores=scores, trained=trained)
