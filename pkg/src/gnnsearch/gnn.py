"""Child models: layer parameters, message passing, training, metrics.

A layer transforms node features per head, scores every directed edge
with the chosen attention function, normalizes scores over each
in-neighborhood (self-loop included), aggregates the weighted messages,
merges heads (concatenation on hidden layers, average on the last one),
applies an optional residual, then the activation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .arch import ArchDescription
from .autodiff import Tensor
from .errors import ParameterError, ShapeError, TrainingError
from .graphs import Graph, LabeledDataset

LEAKY_SLOPE = 0.2


@dataclass
class TrainHyperparams:
    lr: float = 0.005
    l2_lambda: float = 0.0005
    dropout: float = 0.6
    max_epochs: int = 200
    patience: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ParameterError("lr must be positive")
        if self.l2_lambda < 0:
            raise ParameterError("l2_lambda must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout must lie in [0, 1)")
        if self.max_epochs < 1:
            raise ParameterError("max_epochs must be at least 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ParameterError("patience must lie in [0, max_epochs]")


# Deterministic parameter ordering within a layer.
_PARAM_ORDER = ("w_t", "a_l", "a_r", "w_l", "w_r", "w_a", "mlp_w1", "mlp_w2", "w_res")


class LayerParams:
    """The tensors one layer owns; which exist depends on the kinds."""

    def __init__(self, attention: str, aggregation: str, in_dim: int, heads: int, hidden: int, tensors: dict):
        self.attention = attention
        self.aggregation = aggregation
        self.in_dim = in_dim
        self.heads = heads
        self.hidden = hidden
        self.tensors = tensors
        expected = (in_dim, heads * hidden)
        if tensors["w_t"].shape != expected:
            raise ShapeError(f"w_t shape {tensors['w_t'].shape} != {expected}")

    def named(self) -> dict:
        return {name: self.tensors[name] for name in _PARAM_ORDER if name in self.tensors}

    def ordered(self) -> list:
        return list(self.named().values())


def init_layer_params(
    rng: np.random.Generator,
    attention: str,
    aggregation: str,
    in_dim: int,
    heads: int,
    hidden: int,
) -> LayerParams:
    """Fresh Glorot-initialized tensors for one layer (no residual)."""
    tensors = {"w_t": ad.glorot(rng, in_dim, heads * hidden)}
    k, d = heads, hidden
    if attention in ("gat", "sym-gat"):
        tensors["a_l"] = ad.glorot(rng, d, 1, shape=(k, d))
        tensors["a_r"] = ad.glorot(rng, d, 1, shape=(k, d))
    elif attention == "cos":
        tensors["w_l"] = ad.glorot(rng, d, d, shape=(k, d, d))
        tensors["w_r"] = ad.glorot(rng, d, d, shape=(k, d, d))
    elif attention == "linear":
        tensors["a_l"] = ad.glorot(rng, d, 1, shape=(k, d))
    elif attention == "gene-linear":
        tensors["w_l"] = ad.glorot(rng, d, d, shape=(k, d, d))
        tensors["w_r"] = ad.glorot(rng, d, d, shape=(k, d, d))
        tensors["w_a"] = ad.glorot(rng, d, 1, shape=(k, d))
    elif attention not in ("const", "gcn"):
        raise ParameterError(f"unknown attention kind {attention!r}")
    if aggregation == "mlp":
        tensors["mlp_w1"] = ad.glorot(rng, d, d, shape=(k, d, d))
        tensors["mlp_w2"] = ad.glorot(rng, d, d, shape=(k, d, d))
    elif aggregation not in ("sum", "mean-pooling", "max-pooling"):
        raise ParameterError(f"unknown aggregation kind {aggregation!r}")
    return LayerParams(attention, aggregation, in_dim, heads, hidden, tensors)


@dataclass
class ChildModel:
    arch: ArchDescription
    in_dim: int
    out_classes: int
    layers: list
    layer_dims: list  # (in_dim, out_dim) actually used by each layer

    def parameters(self) -> list:
        out = []
        for layer in self.layers:
            out.extend(layer.ordered())
        return out

    def named_parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, tensor in layer.named().items():
                out[f"layer{i}.{name}"] = tensor
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def snapshot(self) -> list:
        return [{name: t.data.copy() for name, t in layer.named().items()} for layer in self.layers]

    def restore(self, snapshot: list) -> None:
        for layer, stored in zip(self.layers, snapshot):
            for name, value in stored.items():
                layer.tensors[name].data = value.copy()


def _layer_plan(arch: ArchDescription, in_dim: int, out_classes: int) -> list:
    """Effective (input dim, head width, output dim, skip source dim) per layer."""
    resolved = arch.resolved()
    dims = [in_dim]
    plan = []
    for i, layer in enumerate(resolved):
        last = i == len(resolved) - 1
        width = out_classes if last else layer.hidden
        base_out = width if last else layer.heads * width
        skip_dim = None
        out_dim = base_out
        if layer.skip_from is not None:
            skip_dim = dims[layer.skip_from]
            # concat would change the class-count output, so the last
            # layer always merges additively.
            if layer.merge == "concat" and not last:
                out_dim = base_out + skip_dim
        plan.append((dims[i], width, base_out, out_dim, skip_dim, last))
        dims.append(out_dim)
    return plan


def layer_signatures(arch: ArchDescription, in_dim: int, out_classes: int) -> list:
    """The sharing signature of every layer: position, kinds, and dims.

    Two layers with equal signatures have interchangeable-shaped
    shareable parameters; anything here differing keeps them apart.
    """
    resolved = arch.resolved()
    plan = _layer_plan(arch, in_dim, out_classes)
    return [
        {
            "layer_index": i,
            "attention": layer.attention,
            "aggregation": layer.aggregation,
            "in_dim": d_in,
            "heads": layer.heads,
            "hidden": width,
        }
        for i, (layer, (d_in, width, _base, _out, _skip, _last)) in enumerate(zip(resolved, plan))
    ]


def build_model(
    arch: ArchDescription,
    in_dim: int,
    out_classes: int,
    rng: np.random.Generator,
    store=None,
) -> ChildModel:
    """Materialize parameters for an architecture.

    With a store, each layer's shareable tensors come from
    ``store.layer_params`` (a copy of the stored entry, or a fresh
    draw on a miss). Residual projections are never shared because the
    share key cannot see the skip source dimension.
    """
    if in_dim < 1 or out_classes < 1:
        raise ParameterError("in_dim and out_classes must be positive")
    resolved = arch.resolved()
    plan = _layer_plan(arch, in_dim, out_classes)
    layers = []
    for i, (layer, (d_in, width, base_out, _out, skip_dim, last)) in enumerate(zip(resolved, plan)):
        if store is not None:
            params = store.layer_params(
                layer_index=i,
                attention=layer.attention,
                aggregation=layer.aggregation,
                in_dim=d_in,
                heads=layer.heads,
                hidden=width,
                rng=rng,
            )
        else:
            params = init_layer_params(rng, layer.attention, layer.aggregation, d_in, layer.heads, width)
        needs_projection = (
            layer.skip_from is not None
            and (layer.merge == "add" or last)
            and skip_dim != base_out
        )
        if needs_projection:
            params.tensors["w_res"] = ad.glorot(rng, skip_dim, base_out)
        layers.append(params)
    return ChildModel(
        arch=arch,
        in_dim=in_dim,
        out_classes=out_classes,
        layers=layers,
        layer_dims=[(p[0], p[3]) for p in plan],
    )


# ---------------------------------------------------------------------------
# attention scoring


def _edge_scores(kind: str, z: Tensor, graph: Graph, params: LayerParams) -> Tensor:
    """Scores for every directed edge, [E, heads]. The destination is the
    node doing the aggregating (index i in the usual e_ij notation)."""
    src, dst = graph.src, graph.dst
    e_count, k = graph.edge_count, z.shape[1]
    t = params.tensors
    if kind == "const":
        return Tensor(np.ones((e_count, k)))
    if kind == "gcn":
        deg = graph.degrees.astype(np.float64)
        vals = 1.0 / np.sqrt(deg[dst] * deg[src])
        return Tensor(np.broadcast_to(vals[:, None], (e_count, k)).copy())
    if kind in ("gat", "sym-gat"):
        s_l = ad.reduce_sum(ad.mul(z, t["a_l"]), axis=-1)
        s_r = ad.reduce_sum(ad.mul(z, t["a_r"]), axis=-1)
        forward_scores = ad.leaky_relu(
            ad.add(ad.gather_rows(s_l, dst), ad.gather_rows(s_r, src)), LEAKY_SLOPE
        )
        if kind == "gat":
            return forward_scores
        reverse_scores = ad.leaky_relu(
            ad.add(ad.gather_rows(s_l, src), ad.gather_rows(s_r, dst)), LEAKY_SLOPE
        )
        return ad.add(forward_scores, reverse_scores)
    if kind == "cos":
        left = ad.head_matmul(z, t["w_l"])
        right = ad.head_matmul(z, t["w_r"])
        return ad.reduce_sum(ad.mul(ad.gather_rows(left, dst), ad.gather_rows(right, src)), axis=-1)
    if kind == "linear":
        s = ad.reduce_sum(ad.mul(z, t["a_l"]), axis=-1)
        return ad.tanh(ad.gather_rows(s, src))
    if kind == "gene-linear":
        left = ad.head_matmul(z, t["w_l"])
        right = ad.head_matmul(z, t["w_r"])
        hidden = ad.tanh(ad.add(ad.gather_rows(left, dst), ad.gather_rows(right, src)))
        return ad.reduce_sum(ad.mul(hidden, t["w_a"]), axis=-1)
    raise ParameterError(f"unknown attention kind {kind!r}")


def attention_score(kind: str, h_i, h_j, d_i: float, d_j: float, params: LayerParams | None = None) -> Tensor:
    """Score one ordered pair on a two-node stub graph; returns [heads].

    ``h_i`` is the aggregating node, ``h_j`` the neighbor, both given as
    per-head transformed features [heads, width] (or [width] for one head).
    """
    h_i = np.asarray(h_i, dtype=np.float64)
    h_j = np.asarray(h_j, dtype=np.float64)
    if h_i.ndim == 1:
        h_i, h_j = h_i[None, :], h_j[None, :]
    z = Tensor(np.stack([h_i, h_j]))
    stub = Graph(
        node_count=2,
        edges=np.array([[1, 0]], dtype=np.int64),
        features=np.zeros((2, 1)),
        degrees=np.array([int(d_i), int(d_j)], dtype=np.int64),
    )
    if params is None:
        if kind not in ("const", "gcn"):
            raise ParameterError(f"attention kind {kind!r} needs parameters")
        params = LayerParams(kind, "sum", 1, h_i.shape[0], h_i.shape[1], {"w_t": Tensor(np.zeros((1, h_i.shape[0] * h_i.shape[1])))})
    scores = _edge_scores(kind, z, stub, params)
    return ad.reshape(scores, (h_i.shape[0],))


def _aggregate(kind: str, messages: Tensor, dst, n_nodes: int, params: LayerParams) -> Tensor:
    if kind == "sum":
        return ad.segment_sum(messages, dst, n_nodes)
    if kind == "mean-pooling":
        return ad.segment_mean(messages, dst, n_nodes)
    if kind == "max-pooling":
        return ad.segment_max(messages, dst, n_nodes)
    if kind == "mlp":
        t = params.tensors
        inner = ad.relu(ad.head_matmul(messages, t["mlp_w1"]))
        return ad.segment_sum(ad.head_matmul(inner, t["mlp_w2"]), dst, n_nodes)
    raise ParameterError(f"unknown aggregation kind {kind!r}")


def forward(
    model: ChildModel,
    graph: Graph,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_p: float = 0.0,
) -> Tensor:
    """Run the whole model; returns [node_count, out_classes]."""
    if graph.feature_dim != model.in_dim:
        raise ShapeError(f"graph features {graph.feature_dim}-d, model expects {model.in_dim}")
    resolved = model.arch.resolved()
    plan = _layer_plan(model.arch, model.in_dim, model.out_classes)
    outputs = [Tensor(graph.features)]
    n = graph.node_count
    for layer, params, (d_in, width, base_out, _out, skip_dim, last) in zip(resolved, model.layers, plan):
        x = ad.dropout(outputs[-1], dropout_p, rng, training)
        z = ad.reshape(ad.matmul(x, params.tensors["w_t"]), (n, layer.heads, width))
        scores = _edge_scores(layer.attention, z, graph, params)
        alpha = ad.segment_softmax(scores, graph.dst, n)
        alpha = ad.dropout(alpha, dropout_p, rng, training)
        messages = ad.mul(ad.reshape(alpha, (graph.edge_count, layer.heads, 1)), ad.gather_rows(z, graph.src))
        agg = _aggregate(layer.aggregation, messages, graph.dst, n, params)
        if last:
            combined = ad.mul(ad.reduce_sum(agg, axis=1), Tensor(1.0 / layer.heads))
        else:
            combined = ad.reshape(agg, (n, layer.heads * width))
        if layer.skip_from is not None:
            source = outputs[layer.skip_from]
            if layer.merge == "concat" and not last:
                combined = ad.concat([combined, source], axis=1)
            else:
                if "w_res" in params.tensors:
                    source = ad.matmul(source, params.tensors["w_res"])
                combined = ad.add(combined, source)
        outputs.append(ad.activation(layer.activation, combined))
    return outputs[-1]


# ---------------------------------------------------------------------------
# metrics, evaluation, training


def micro_f1(predicted: np.ndarray, actual: np.ndarray) -> float:
    predicted = predicted.astype(bool)
    actual = actual.astype(bool)
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0  # nothing to find and nothing predicted
    return 2.0 * tp / denom


def evaluate(model: ChildModel, dataset: LabeledDataset, mask_kind: str) -> float:
    """Metric pooled over every graph with nodes in the given split:
    accuracy for single-label tasks, micro-F1 for multi-label."""
    hits = 0
    total = 0
    tp = fp = fn = 0
    found = False
    for graph, labels, mask in zip(dataset.graphs, dataset.labels, dataset.masks):
        idx = mask.of(mask_kind)
        if idx.size == 0:
            continue
        found = True
        logits = forward(model, graph, training=False).data
        if dataset.task_kind == "single":
            pred = np.argmax(logits[idx], axis=1)
            hits += int(np.sum(pred == labels[idx]))
            total += idx.size
        else:
            pred = logits[idx] > 0.0  # sigmoid threshold 0.5
            actual = labels[idx].astype(bool)
            tp += int(np.sum(pred & actual))
            fp += int(np.sum(pred & ~actual))
            fn += int(np.sum(~pred & actual))
    if not found:
        raise ParameterError(f"no graph has nodes in the {mask_kind!r} split")
    if dataset.task_kind == "single":
        return hits / total
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


@dataclass
class TrainedResult:
    best_val_metric: float
    test_metric: float
    epochs_ran: int
    best_epoch: int
    seconds_per_epoch: float
    opt_steps: int
    model: ChildModel


def train_child(model: ChildModel, dataset: LabeledDataset, hp: TrainHyperparams) -> TrainedResult:
    """Adam on the training loss with validation-metric early stopping.

    Tracks the best validation epoch, stops after ``patience``
    consecutive non-improving epochs (or at ``max_epochs``), restores
    the best parameters, and reports the test metric with them.
    """
    params = model.parameters()
    state = ad.AdamState.init(params, hp.lr)
    rng = np.random.default_rng(hp.seed)
    train_graphs = [
        (graph, labels, mask.train)
        for graph, labels, mask in zip(dataset.graphs, dataset.labels, dataset.masks)
        if mask.train.size
    ]
    if not train_graphs:
        raise ParameterError("no graph has training nodes")

    best_metric = -np.inf
    best_snapshot = None
    best_epoch = -1
    stale = 0
    epochs_ran = 0
    epoch_seconds = []
    for epoch in range(hp.max_epochs):
        started = time.perf_counter()
        for graph, labels, train_idx in train_graphs:
            logits = forward(model, graph, training=True, rng=rng, dropout_p=hp.dropout)
            objective = ad.loss(
                dataset.task_kind, logits, labels, train_idx,
                l2_lambda=hp.l2_lambda, l2_params=params,
            )
            if not np.isfinite(objective.data):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", epoch)
            ad.zero_grads(params)
            objective.backward()
            ad.adam_step(state, params, [p.grad for p in params])
        epochs_ran = epoch + 1
        val_metric = evaluate(model, dataset, "val")
        epoch_seconds.append(time.perf_counter() - started)
        if val_metric > best_metric:
            best_metric = val_metric
            best_snapshot = model.snapshot()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > hp.patience:
                break
    model.restore(best_snapshot)
    test_metric = evaluate(model, dataset, "test")
    if len(epoch_seconds) > 1:
        sec = float(np.median(epoch_seconds[1:]))  # first epoch pays warm-up costs
    else:
        sec = float(epoch_seconds[0])
    return TrainedResult(
        best_val_metric=float(best_metric),
        test_metric=float(test_metric),
        epochs_ran=epochs_ran,
        best_epoch=best_epoch,
        seconds_per_epoch=sec,
        opt_steps=state.step,
        model=model,
    )
