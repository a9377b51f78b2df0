"""Planner architecture: visual input module, sub-chain decoder bank, accumulator.

The main model runs one independent transformer decoder per sub-chain
(endpoints plus one intermediate action), then fuses all per-decoder
logits through a per-class accumulator MLP into the final sequence
logits. Baselines (single-decoder, autoregressive, state-supervised)
live here too so experiments share the visual front end.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .corpus import PlanInstance
from .engine import (
    AttentionParams,
    EngineError,
    LayerNorm,
    Linear,
    MLP3,
    Parameter,
    Tensor,
    add,
    concat,
    expand,
    mean,
    multi_head_attention,
    relu,
    reshape,
    slice_axis,
    take,
    transpose,
    xavier_uniform,
)
from .engine import conv1d as conv1d_op

TIME_LAYER_KINDS = ("mlp", "avgpool", "linear", "conv1d")
VARIANTS = ("decoupled", "no_decouple", "autoregressive", "state_supervised")


@dataclass
class PlannerConfig:
    """Architecture hyperparameters; defaults are the desk-scale preset."""
    horizon: int
    n_actions: int
    feature_dim: int = 64
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 1
    memory_size: int = 32
    feedforward_dim: int | None = None  # None -> 4 * d_model
    time_layer: str = "mlp"
    decouple: bool = True
    gamma: float = 1.5
    goal_on_action_slot: bool = True

    def __post_init__(self):
        if self.horizon < 3:
            raise EngineError("horizon must be at least 3")
        if self.d_model % self.n_heads != 0:
            raise EngineError("d_model must be divisible by n_heads")
        if self.memory_size < 1:
            raise EngineError("memory_size must be positive")
        if self.time_layer not in TIME_LAYER_KINDS:
            raise EngineError(f"unknown time layer {self.time_layer!r}")
        if self.feedforward_dim is None:
            self.feedforward_dim = 4 * self.d_model

    @property
    def classifier_hidden(self) -> int:
        return self.d_model // 2

    @property
    def n_decoders(self) -> int:
        return max(1, self.horizon - 2) if self.decouple else 1

    @property
    def has_accumulator(self) -> bool:
        return self.decouple and self.horizon >= 4

    @classmethod
    def full_scale(cls, horizon: int, n_actions: int, feature_dim: int = 64,
                   **kw) -> "PlannerConfig":
        """The large preset: 1024-d model, 16 heads, 128-slot memories."""
        return cls(horizon=horizon, n_actions=n_actions, feature_dim=feature_dim,
                   d_model=1024, n_heads=16, memory_size=128, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        return cls(**d)


def subchain_positions(horizon: int) -> list[tuple[int, int, int]]:
    """1-based position triples (1, t, T) for t = 2 .. T-1."""
    return [(1, t, horizon) for t in range(2, horizon)]


@dataclass
class PlannerOutput:
    per_decoder: list  # one (B, T, n_a) logits tensor per decoder
    final: Tensor      # (B, T, n_a)


@dataclass
class Batch:
    v_start: Tensor      # (B, 3, feature_dim)
    v_goal: Tensor       # (B, 3, feature_dim)
    actions: np.ndarray  # (B, T) int64

    @property
    def size(self) -> int:
        return self.actions.shape[0]


def make_batch(instances: list[PlanInstance]) -> Batch:
    return Batch(
        v_start=Tensor(np.stack([i.v_start for i in instances])),
        v_goal=Tensor(np.stack([i.v_goal for i in instances])),
        actions=np.stack([i.actions for i in instances]).astype(np.int64),
    )


# ---------------------------------------------------------------------------
# visual input module
# ---------------------------------------------------------------------------

class VisualInput:
    """Fuses the 3 frames of an observation along time, then projects to d_model.

    The time layer is shared between start and goal observations. ``mlp``
    applies the [3 -> 6 -> 1] network per feature coordinate; the other
    kinds are the ablation substitutes on the same axis.
    """

    def __init__(self, config: PlannerConfig, rng: np.random.Generator):
        self.kind = config.time_layer
        self.proj = Linear(config.feature_dim, config.d_model, "visual.proj", rng)
        if self.kind == "mlp":
            self.time = MLP3(3, 6, 1, "visual.time_mlp", rng)
        elif self.kind == "linear":
            self.time = Linear(3, 1, "visual.time_linear", rng)
        elif self.kind == "conv1d":
            f = config.feature_dim
            self.kernel = Parameter(xavier_uniform((f, f, 3), rng),
                                    "visual.time_conv.kernel")
            self.kbias = Parameter(np.zeros(f), "visual.time_conv.bias")

    def fuse_time(self, obs: Tensor) -> Tensor:
        """(B, 3, F) -> (B, F): collapse the frame axis."""
        b, _, f = obs.shape
        if self.kind == "avgpool":
            return mean(obs, axis=1)
        if self.kind == "conv1d":
            x = transpose(obs, (0, 2, 1))            # (B, F, 3)
            y = conv1d_op(x, self.kernel)            # (B, F, 1)
            return add(reshape(y, (b, f)), self.kbias)
        x = transpose(obs, (0, 2, 1))                # (B, F, 3)
        y = self.time(x)                             # (B, F, 1)
        return reshape(y, (b, f))

    def __call__(self, obs: Tensor) -> Tensor:
        return self.proj(self.fuse_time(obs))

    def parameters(self):
        out = list(self.proj.parameters())
        if self.kind in ("mlp", "linear"):
            out += self.time.parameters()
        elif self.kind == "conv1d":
            out += [self.kernel, self.kbias]
        return out


def encode_visual(visual: VisualInput, v_start: Tensor, v_goal: Tensor):
    """Shared-front-end encodings of both observations."""
    return visual(v_start), visual(v_goal)


# ---------------------------------------------------------------------------
# sub-chain decoder
# ---------------------------------------------------------------------------

class DecoderLayer:
    """Pre-norm transformer layer: self-attention, memory cross-attention, FFN."""

    def __init__(self, config: PlannerConfig, name: str, rng: np.random.Generator):
        d = config.d_model
        self.n_heads = config.n_heads
        self.ln1 = LayerNorm(d, f"{name}.ln1")
        self.self_attn = AttentionParams(d, f"{name}.self", rng)
        self.ln2 = LayerNorm(d, f"{name}.ln2")
        self.cross_attn = AttentionParams(d, f"{name}.cross", rng)
        self.ln3 = LayerNorm(d, f"{name}.ln3")
        self.ffn = MLP3(d, config.feedforward_dim, d, f"{name}.ffn", rng)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        h = self.ln1(x)
        x = add(x, multi_head_attention(h, h, h, self.n_heads, self.self_attn))
        h = self.ln2(x)
        x = add(x, multi_head_attention(h, memory, memory, self.n_heads,
                                        self.cross_attn))
        h = self.ln3(x)
        return add(x, self.ffn(h))

    def parameters(self):
        return (self.ln1.parameters() + self.self_attn.parameters()
                + self.ln2.parameters() + self.cross_attn.parameters()
                + self.ln3.parameters() + self.ffn.parameters())


class SubChainDecoder:
    """One non-autoregressive decoder with its own queries and memory.

    Decoder ``index`` (1-based) supervises the sub-chain (a_1, a_{index+1},
    a_T). No parameters are shared across decoders.
    """

    def __init__(self, config: PlannerConfig, index: int, rng: np.random.Generator):
        d = config.d_model
        t = config.horizon
        name = f"dec{index}"
        self.index = index
        self.config = config
        self.query = Parameter(xavier_uniform((t + 1, d), rng), f"{name}.query")
        self.memory = Parameter(
            rng.normal(0.0, 1.0, (config.memory_size, d)) / np.sqrt(d),
            f"{name}.memory")
        self.layers = [DecoderLayer(config, f"{name}.layer{k}", rng)
                       for k in range(config.n_layers)]
        self.ln_out = LayerNorm(d, f"{name}.ln_out")
        self.classifier = MLP3(d, config.classifier_hidden, config.n_actions,
                               f"{name}.cls", rng)
        # query slots carrying the T action positions (one slot is context)
        if config.goal_on_action_slot:
            self.action_slots = list(range(1, t + 1))
        else:
            self.action_slots = list(range(0, t))

    def build_queries(self, f_start: Tensor, f_goal: Tensor) -> Tensor:
        """Attach visual features to the first and last query slots."""
        b = f_start.shape[0]
        t1, d = self.query.shape
        q = expand(self.query, (b, t1, d))
        head = add(slice_axis(q, 1, 0, 1), reshape(f_start, (b, 1, d)))
        tail = add(slice_axis(q, 1, t1 - 1, t1), reshape(f_goal, (b, 1, d)))
        return concat([head, slice_axis(q, 1, 1, t1 - 1), tail], axis=1)

    def hidden(self, f_start: Tensor, f_goal: Tensor) -> Tensor:
        """(B, T+1, d) normalized hidden states over all query slots."""
        x = self.build_queries(f_start, f_goal)
        for layer in self.layers:
            x = layer(x, self.memory)
        return self.ln_out(x)

    def logits_from_hidden(self, h: Tensor) -> Tensor:
        lo = self.action_slots[0]                    # slots are contiguous
        slots = slice_axis(h, 1, lo, lo + len(self.action_slots))
        return self.classifier(slots)                # (B, T, n_a)

    def forward(self, f_start: Tensor, f_goal: Tensor) -> Tensor:
        return self.logits_from_hidden(self.hidden(f_start, f_goal))

    def parameters(self):
        out = [self.query, self.memory]
        for layer in self.layers:
            out += layer.parameters()
        return out + self.ln_out.parameters() + self.classifier.parameters()


class Accumulator:
    """Per-class MLP fusing the stacked decoder logits into final logits.

    Input width T(T-2), hidden 3T(T-2), output T, applied independently to
    every action class.
    """

    def __init__(self, config: PlannerConfig, rng: np.random.Generator):
        t = config.horizon
        width = t * (t - 2)
        self.widths = (width, 3 * width, t)
        self.mlp = MLP3(width, 3 * width, t, "acc", rng)

    def __call__(self, logit_bank: list[Tensor]) -> Tensor:
        stacked = concat(logit_bank, axis=1)         # (B, T(T-2), n_a)
        x = transpose(stacked, (0, 2, 1))            # (B, n_a, T(T-2))
        y = self.mlp(x)                              # (B, n_a, T)
        return transpose(y, (0, 2, 1))

    def parameters(self):
        return self.mlp.parameters()


def accumulate(logit_bank: list[Tensor], accumulator: Accumulator) -> Tensor:
    if len(logit_bank) != accumulator.widths[0] // accumulator.widths[2]:
        raise EngineError(
            f"accumulator expects {accumulator.widths[0] // accumulator.widths[2]} "
            f"decoders, got {len(logit_bank)}")
    return accumulator(logit_bank)


# ---------------------------------------------------------------------------
# full models
# ---------------------------------------------------------------------------

class Planner:
    """Decoder bank + accumulator (or the single-decoder degenerate forms)."""

    variant = "decoupled"

    def __init__(self, config: PlannerConfig, seed: int = 0):
        rng = np.random.default_rng([seed, 0x6d6f64])
        self.config = config
        self.visual = VisualInput(config, rng)
        self.decoders = [SubChainDecoder(config, i + 1, rng)
                         for i in range(config.n_decoders)]
        self.accumulator = Accumulator(config, rng) if config.has_accumulator else None
        _check_unique_names(self.parameters())

    def forward(self, batch: Batch) -> PlannerOutput:
        f_start, f_goal = encode_visual(self.visual, batch.v_start, batch.v_goal)
        bank = [dec.forward(f_start, f_goal) for dec in self.decoders]
        if self.accumulator is not None:
            final = accumulate(bank, self.accumulator)
        else:
            final = bank[0]
        return PlannerOutput(per_decoder=bank, final=final)

    def parameters(self):
        out = list(self.visual.parameters())
        for dec in self.decoders:
            out += dec.parameters()
        if self.accumulator is not None:
            out += self.accumulator.parameters()
        return out


class StateSupervised(Planner):
    """Single-decoder model plus a head regressing interior latent states.

    The auxiliary head reads the decoder hidden state at the interior
    action slots and predicts the synthetic state vector after each of
    the first T-1 actions.
    """

    variant = "state_supervised"

    def __init__(self, config: PlannerConfig, seed: int = 0):
        super().__init__(config, seed)
        rng = np.random.default_rng([seed, 0x737461])
        self.state_head = Linear(config.d_model, config.feature_dim,
                                 "state_head", rng)
        _check_unique_names(self.parameters())

    def forward_with_states(self, batch: Batch):
        f_start, f_goal = encode_visual(self.visual, batch.v_start, batch.v_goal)
        dec = self.decoders[0]
        h = dec.hidden(f_start, f_goal)
        logits = dec.logits_from_hidden(h)
        lo = dec.action_slots[0]                            # slots of a_1..a_{T-1}
        interior = slice_axis(h, 1, lo, lo + len(dec.action_slots) - 1)
        states = self.state_head(interior)                  # (B, T-1, feature_dim)
        return PlannerOutput(per_decoder=[logits], final=logits), states

    def forward(self, batch: Batch) -> PlannerOutput:
        output, _ = self.forward_with_states(batch)
        return output

    def parameters(self):
        out = super().parameters()
        if hasattr(self, "state_head"):
            out += self.state_head.parameters()
        return out


class Autoregressive:
    """Left-to-right baseline: a recurrent trunk fed the previous action.

    The goal enters only through the initial hidden state, so its
    influence must survive every recurrence step; prediction errors
    compound from left to right through the fed-back action embedding.
    """

    variant = "autoregressive"

    def __init__(self, config: PlannerConfig, seed: int = 0):
        rng = np.random.default_rng([seed, 0x6172])
        d = config.d_model
        self.config = config
        self.visual = VisualInput(config, rng)
        # row n_actions is the start-of-sequence token
        self.embed = Parameter(xavier_uniform((config.n_actions + 1, d), rng),
                               "ar.embed")
        self.init_start = Linear(d, d, "ar.init_start", rng)
        self.init_goal = Linear(d, d, "ar.init_goal", rng)
        self.recur_h = Linear(d, d, "ar.recur_h", rng)
        self.recur_a = Linear(d, d, "ar.recur_a", rng)
        self.classifier = MLP3(d, config.classifier_hidden, config.n_actions,
                               "ar.cls", rng)
        _check_unique_names(self.parameters())

    def _initial_state(self, batch: Batch) -> Tensor:
        f_start, f_goal = encode_visual(self.visual, batch.v_start, batch.v_goal)
        return relu(add(self.init_start(f_start), self.init_goal(f_goal)))

    def _step(self, h: Tensor, prev_tokens: np.ndarray) -> tuple[Tensor, Tensor]:
        e = take(self.embed, prev_tokens.tolist(), axis=0)
        h = relu(add(self.recur_h(h), self.recur_a(e)))
        return h, self.classifier(h)

    def forward(self, batch: Batch) -> PlannerOutput:
        """Teacher-forced logits: step t conditions on the true a_{t-1}."""
        b, t = batch.actions.shape
        h = self._initial_state(batch)
        prev = np.full(b, self.config.n_actions, dtype=np.int64)
        steps = []
        for step in range(t):
            h, logits = self._step(h, prev)
            steps.append(reshape(logits, (b, 1, self.config.n_actions)))
            prev = batch.actions[:, step]
        final = concat(steps, axis=1)
        return PlannerOutput(per_decoder=[final], final=final)

    def predict_sequential(self, batch: Batch) -> np.ndarray:
        """Closed-loop decoding: each step feeds back its own argmax."""
        b, t = batch.actions.shape
        h = self._initial_state(batch)
        prev = np.full(b, self.config.n_actions, dtype=np.int64)
        out = np.zeros((b, t), dtype=np.int64)
        for step in range(t):
            h, logits = self._step(h, prev)
            prev = np.argmax(logits.data, axis=-1)
            out[:, step] = prev
        return out

    def parameters(self):
        return (self.visual.parameters() + [self.embed]
                + self.init_start.parameters() + self.init_goal.parameters()
                + self.recur_h.parameters() + self.recur_a.parameters()
                + self.classifier.parameters())


def build_model(variant: str, config: PlannerConfig, seed: int = 0):
    """Factory over the model variants; raises on unknown names."""
    variant = variant.replace("-", "_")
    if variant == "decoupled":
        if not config.decouple:
            config = PlannerConfig(**{**config.to_dict(), "decouple": True})
        return Planner(config, seed)
    if variant in ("no_decouple", "subchain"):
        cfg = PlannerConfig(**{**config.to_dict(), "decouple": False})
        return Planner(cfg, seed)
    if variant == "state_supervised":
        cfg = PlannerConfig(**{**config.to_dict(), "decouple": False})
        return StateSupervised(cfg, seed)
    if variant == "autoregressive":
        return Autoregressive(config, seed)
    raise EngineError(f"unknown variant {variant!r}")


def predict(model, batch: Batch) -> np.ndarray:
    """Per-timestep argmax over final logits; ties go to the smaller index."""
    if isinstance(model, Autoregressive):
        return model.predict_sequential(batch)
    return np.argmax(model.forward(batch).final.data, axis=-1)


def _check_unique_names(params) -> None:
    names = [p.name for p in params]
    if len(names) != len(set(names)):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise EngineError(f"duplicate parameter names: {dupes}")
