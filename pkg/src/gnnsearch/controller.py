"""Recurrent architecture sampler and its policy-gradient update.

A single-layer LSTM (hidden size 100) emits one token per slot. Each
slot position owns an output projection sized to its option count and
an embedding table that feeds the sampled token back in as the next
input. Logits are softened by a temperature then squashed to
``clip * tanh(logits / temperature)``, which bounds every logit and
caps how deterministic the policy can become.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .arch import ActionSpace, ArchDescription, arch_from_tokens, slot_specs
from .autodiff import Tensor
from .errors import ParameterError, ShapeError

INIT_BOUND = 0.1
CHECKPOINT_VERSION = 1

_GATES = ("i", "f", "g", "o")


@dataclass
class Episode:
    """One sampled architecture and the bookkeeping REINFORCE needs."""

    arch: ArchDescription
    tokens: tuple
    log_prob_sum: float
    entropy_sum: float
    reward: float | None = None
    shaped_reward: float | None = None
    log_prob_node: Tensor | None = None

    def __post_init__(self):
        if self.log_prob_sum > 1e-12:
            raise ParameterError(f"log_prob_sum must be <= 0, got {self.log_prob_sum}")
        if self.entropy_sum < -1e-12:
            raise ParameterError(f"entropy_sum must be >= 0, got {self.entropy_sum}")


class Controller:
    """LSTM policy over the slot sequence of an action space."""

    def __init__(
        self,
        space: ActionSpace,
        rng: np.random.Generator,
        hidden_size: int = 100,
        temperature: float = 5.0,
        logit_clip: float = 2.5,
    ):
        if hidden_size < 1:
            raise ParameterError("hidden_size must be positive")
        if temperature <= 0 or logit_clip <= 0:
            raise ParameterError("temperature and logit_clip must be positive")
        self.space = space
        self.slots = slot_specs(space)
        self.hidden_size = hidden_size
        self.temperature = temperature
        self.logit_clip = logit_clip
        h = hidden_size
        self._params: dict[str, Tensor] = {}
        for gate in _GATES:
            self._params[f"w_x{gate}"] = ad.uniform_param(rng, (h, h), INIT_BOUND)
            self._params[f"w_h{gate}"] = ad.uniform_param(rng, (h, h), INIT_BOUND)
            self._params[f"b_{gate}"] = ad.uniform_param(rng, (1, h), INIT_BOUND)
        self._params["start"] = ad.uniform_param(rng, (1, h), INIT_BOUND)
        for s, slot in enumerate(self.slots):
            n = len(slot.options)
            self._params[f"slot{s}.proj_w"] = ad.uniform_param(rng, (h, n), INIT_BOUND)
            self._params[f"slot{s}.proj_b"] = ad.uniform_param(rng, (1, n), INIT_BOUND)
            self._params[f"slot{s}.emb"] = ad.uniform_param(rng, (n, h), INIT_BOUND)

    def parameters(self) -> list:
        return list(self._params.values())

    def named_parameters(self) -> dict:
        return dict(self._params)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self._params):
            digest.update(name.encode())
            digest.update(self._params[name].data.tobytes())
        return digest.hexdigest()

    # -- differentiable path ------------------------------------------------

    def _step(self, x: Tensor, h: Tensor, c: Tensor):
        p = self._params
        gates = {}
        for gate in _GATES:
            pre = ad.add(ad.add(ad.matmul(x, p[f"w_x{gate}"]), ad.matmul(h, p[f"w_h{gate}"])), p[f"b_{gate}"])
            gates[gate] = ad.tanh(pre) if gate == "g" else ad.sigmoid(pre)
        c_next = ad.add(ad.mul(gates["f"], c), ad.mul(gates["i"], gates["g"]))
        h_next = ad.mul(gates["o"], ad.tanh(c_next))
        return h_next, c_next

    def _slot_logits(self, h: Tensor, s: int) -> Tensor:
        raw = ad.add(ad.matmul(h, self._params[f"slot{s}.proj_w"]), self._params[f"slot{s}.proj_b"])
        scaled = ad.mul(raw, Tensor(1.0 / self.temperature))
        return ad.mul(ad.tanh(scaled), Tensor(self.logit_clip))

    def _walk(self, pick_token):
        """Run the slot sequence; pick_token(slot_index, probs) chooses.

        Returns (tokens, log_prob_node, entropy_sum).
        """
        h = Tensor(np.zeros((1, self.hidden_size)))
        c = Tensor(np.zeros((1, self.hidden_size)))
        x = self._params["start"]
        log_prob_total = None
        entropy_total = 0.0
        tokens = []
        for s, slot in enumerate(self.slots):
            h, c = self._step(x, h, c)
            adjusted = self._slot_logits(h, s)
            # Logits are bounded by the clip, so plain softmax is safe.
            weights = np.exp(adjusted.data[0])
            probs = weights / weights.sum()
            token = pick_token(s, probs)
            tokens.append(token)
            entropy_total += float(-np.sum(probs * np.log(probs)))
            onehot = np.zeros((1, len(slot.options)))
            onehot[0, token] = 1.0
            picked = ad.reduce_sum(ad.mul(adjusted, Tensor(onehot)))
            log_norm = ad.log(ad.reduce_sum(ad.exp(adjusted)))
            term = ad.sub(picked, log_norm)
            log_prob_total = term if log_prob_total is None else ad.add(log_prob_total, term)
            x = ad.gather_rows(self._params[f"slot{s}.emb"], [token])
        return tokens, log_prob_total, entropy_total

    def sample(self, rng: np.random.Generator) -> Episode:
        """Draw one architecture; records log-prob (with graph) and entropy."""

        def pick(_s, probs):
            u = rng.random()
            token = int(np.searchsorted(np.cumsum(probs), u, side="right"))
            return min(token, probs.size - 1)

        tokens, log_prob_node, entropy = self._walk(pick)
        return Episode(
            arch=arch_from_tokens(self.space, tokens),
            tokens=tuple(tokens),
            log_prob_sum=float(log_prob_node.data),
            entropy_sum=entropy,
            log_prob_node=log_prob_node,
        )

    def teacher_force(self, tokens) -> tuple:
        """Log-prob (with graph) and entropy of a fixed token sequence."""
        tokens = list(tokens)
        if len(tokens) != len(self.slots):
            raise ShapeError(f"{len(tokens)} tokens but the space has {len(self.slots)} slots")
        for s, (slot, token) in enumerate(zip(self.slots, tokens)):
            if not 0 <= token < len(slot.options):
                raise ParameterError(f"slot {s}: token {token} out of range")
        _, log_prob_node, entropy = self._walk(lambda s, _p: tokens[s])
        return log_prob_node, entropy

    def arch_log_prob(self, arch_tokens) -> float:
        node, _ = self.teacher_force(arch_tokens)
        return float(node.data)

    # -- vectorized sampling (no gradients) ---------------------------------

    def _np_step(self, x: np.ndarray, h: np.ndarray, c: np.ndarray):
        p = self._params

        def lin(gate):
            return x @ p[f"w_x{gate}"].data + h @ p[f"w_h{gate}"].data + p[f"b_{gate}"].data

        i = _np_sigmoid(lin("i"))
        f = _np_sigmoid(lin("f"))
        g = np.tanh(lin("g"))
        o = _np_sigmoid(lin("o"))
        c_next = f * c + i * g
        return o * np.tanh(c_next), c_next

    def _np_probs(self, h: np.ndarray, s: int) -> np.ndarray:
        p = self._params
        raw = h @ p[f"slot{s}.proj_w"].data + p[f"slot{s}.proj_b"].data
        adjusted = self.logit_clip * np.tanh(raw / self.temperature)
        weights = np.exp(adjusted)
        return weights / weights.sum(axis=1, keepdims=True)

    def sample_tokens_batch(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Sample many token sequences at once; rows are independent draws."""
        if count < 1:
            raise ParameterError("count must be positive")
        h = np.zeros((count, self.hidden_size))
        c = np.zeros((count, self.hidden_size))
        x = np.repeat(self._params["start"].data, count, axis=0)
        tokens = np.empty((count, len(self.slots)), dtype=np.int64)
        for s, _slot in enumerate(self.slots):
            h, c = self._np_step(x, h, c)
            probs = self._np_probs(h, s)
            cumulative = np.cumsum(probs, axis=1)
            cumulative[:, -1] = 1.1  # guard against rounding at the top end
            chosen = (cumulative > rng.random((count, 1))).argmax(axis=1)
            tokens[:, s] = chosen
            x = self._params[f"slot{s}.emb"].data[chosen]
        return tokens

    def log_prob_batch(self, tokens: np.ndarray) -> np.ndarray:
        """Joint log-probability of each row of token sequences."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != len(self.slots):
            raise ShapeError(f"tokens shape {tokens.shape} does not match {len(self.slots)} slots")
        count = tokens.shape[0]
        h = np.zeros((count, self.hidden_size))
        c = np.zeros((count, self.hidden_size))
        x = np.repeat(self._params["start"].data, count, axis=0)
        total = np.zeros(count)
        for s, _slot in enumerate(self.slots):
            h, c = self._np_step(x, h, c)
            probs = self._np_probs(h, s)
            total += np.log(probs[np.arange(count), tokens[:, s]])
            x = self._params[f"slot{s}.emb"].data[tokens[:, s]]
        return total


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# reward shaping and the policy-gradient step


@dataclass
class Baseline:
    """Exponential moving average of the augmented reward."""

    decay: float = 0.95
    value: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ParameterError("decay must lie in [0, 1)")


def shape_reward(raw: float, baseline: Baseline, entropy_sum: float, entropy_weight: float = 1e-4) -> float:
    """Entropy-augmented, baseline-centered reward.

    The first call seeds the baseline with the augmented reward and
    subtracts nothing; afterwards the old baseline is subtracted before
    the moving average absorbs the new value.
    """
    augmented = raw + entropy_weight * entropy_sum
    if not baseline.initialized:
        baseline.value = augmented
        baseline.initialized = True
        return augmented
    shaped = augmented - baseline.value
    baseline.value = baseline.decay * baseline.value + (1.0 - baseline.decay) * augmented
    return shaped


def reinforce_step(controller: Controller, episodes: list, state: ad.AdamState) -> None:
    """One ascent step on mean(shaped_reward * log_prob_sum).

    Implemented as Adam descent on the negation. Episodes must carry
    their live log-prob nodes (i.e. come from ``Controller.sample``).
    """
    if not episodes:
        raise ParameterError("reinforce_step needs at least one episode")
    params = controller.parameters()
    objective = None
    for episode in episodes:
        if episode.shaped_reward is None or episode.log_prob_node is None:
            raise ParameterError("episode is missing shaped_reward or its log-prob node")
        term = ad.mul(episode.log_prob_node, Tensor(-episode.shaped_reward / len(episodes)))
        objective = term if objective is None else ad.add(objective, term)
    ad.zero_grads(params)
    objective.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    ad.adam_step(state, params, grads)


# ---------------------------------------------------------------------------
# checkpointing


def save_controller(controller: Controller, path) -> None:
    """Write parameters plus enough metadata to rebuild the controller."""
    space = controller.space
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "hidden_size": controller.hidden_size,
        "temperature": controller.temperature,
        "logit_clip": controller.logit_clip,
        "space": {
            "sampling": list(space.sampling),
            "attention": list(space.attention),
            "aggregation": list(space.aggregation),
            "activation": list(space.activation),
            "heads": list(space.heads),
            "hidden": list(space.hidden),
            "layer_count": space.layer_count,
            "skip_enabled": space.skip_enabled,
        },
    }
    arrays = {name.replace(".", "__"): t.data for name, t in controller.named_parameters().items()}
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_controller(path) -> Controller:
    with np.load(path) as bundle:
        meta = json.loads(bytes(bundle["__meta__"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ParameterError(
                f"checkpoint format {meta.get('format_version')!r} is not version {CHECKPOINT_VERSION}"
            )
        space = ActionSpace(
            sampling=tuple(meta["space"]["sampling"]),
            attention=tuple(meta["space"]["attention"]),
            aggregation=tuple(meta["space"]["aggregation"]),
            activation=tuple(meta["space"]["activation"]),
            heads=tuple(meta["space"]["heads"]),
            hidden=tuple(meta["space"]["hidden"]),
            layer_count=meta["space"]["layer_count"],
            skip_enabled=meta["space"]["skip_enabled"],
        )
        controller = Controller(
            space,
            rng=np.random.default_rng(0),
            hidden_size=meta["hidden_size"],
            temperature=meta["temperature"],
            logit_clip=meta["logit_clip"],
        )
        for name, tensor in controller.named_parameters().items():
            stored = bundle[name.replace(".", "__")]
            if stored.shape != tensor.data.shape:
                raise ShapeError(f"checkpoint entry {name}: shape {stored.shape} != {tensor.data.shape}")
            tensor.data = stored.astype(np.float64)
    return controller
