"""Synthetic instructional corpus: task grammars, videos, windows, splits.

A task grammar is a DAG over a subset of the global action vocabulary;
videos are sampled topological walks through it. Each action boundary gets
a 3-frame observation block built as a temporal ramp between the latent
states on either side, so that frame order carries information a plain
frame average destroys. The on-disk dataset format doubles as the
ingestion format for externally computed features.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np


class CorpusError(Exception):
    pass


class DatasetError(CorpusError):
    """Raised on malformed, truncated, or checksum-failing dataset files."""


# Ramp weights across the 3 frames of an observation block: frame 0 sits on
# the pre-action state, frame 2 on the post-action state plus the hint.
_FRAME_WEIGHTS = np.array([0.0, 0.5, 1.0], dtype=np.float64)

_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TaskGrammar:
    """Precedence DAG over a task's action subset.

    ``edges`` hold (earlier, later) pairs of global action indices;
    ``swap_pairs`` are the incomparable pairs, whose order is free.
    """
    task_id: int
    actions: tuple[int, ...]
    edges: frozenset[tuple[int, int]]
    swap_pairs: frozenset[tuple[int, int]]

    def __post_init__(self):
        order = _topological_order(self.actions, self.edges)
        if order is None:
            raise CorpusError(f"grammar for task {self.task_id} is cyclic")

    def is_valid_order(self, seq) -> bool:
        """True if ``seq`` is a topological order of the restriction to its actions."""
        seq = list(seq)
        present = set(seq)
        if len(present) != len(seq) or not present <= set(self.actions):
            return False
        pos = {a: i for i, a in enumerate(seq)}
        return all(pos[a] < pos[b] for a, b in self.edges
                   if a in present and b in present)

    def legal_orders(self, actions=None) -> list[tuple[int, ...]]:
        """Enumerate every legal order of ``actions`` (full subset by default).

        Brute force; intended for grammars of at most ~8 actions in tests.
        """
        pool = tuple(actions) if actions is not None else self.actions
        if len(pool) > 10:
            raise CorpusError("legal_orders is for small grammars only")
        out = []
        edges = [(a, b) for a, b in self.edges if a in pool and b in pool]

        def extend(prefix, remaining):
            if not remaining:
                out.append(tuple(prefix))
                return
            for a in sorted(remaining):
                if all(b not in remaining for b, c in edges if c == a):
                    extend(prefix + [a], remaining - {a})

        extend([], set(pool))
        return out


@dataclass
class PlanVideo:
    """One sampled instructional video with latent states and observations.

    ``states`` is (n+1, feature_dim): state i is the world after i actions
    (nuisance coordinates stay zero). ``observations`` is (n+1, 3,
    feature_dim): block i straddles boundary i.
    """
    task_id: int
    video_id: int
    actions: np.ndarray
    states: np.ndarray
    observations: np.ndarray


@dataclass(eq=False)
class PlanInstance:
    """One planning problem: start/goal blocks and the T-step ground truth."""
    v_start: np.ndarray
    v_goal: np.ndarray
    actions: np.ndarray
    task_id: int
    video_id: int
    offset: int

    @property
    def horizon(self) -> int:
        return len(self.actions)

    def __eq__(self, other):
        return (isinstance(other, PlanInstance)
                and self.task_id == other.task_id
                and self.video_id == other.video_id
                and self.offset == other.offset
                and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.v_start, other.v_start)
                and np.array_equal(self.v_goal, other.v_goal))


@dataclass(eq=False)
class DatasetSplit:
    train: list[PlanInstance]
    test: list[PlanInstance]
    seed: int
    ratio: float
    feature_dim: int
    n_actions: int
    horizon: int

    def __eq__(self, other):
        return (isinstance(other, DatasetSplit)
                and self.seed == other.seed and self.ratio == other.ratio
                and self.feature_dim == other.feature_dim
                and self.n_actions == other.n_actions
                and self.horizon == other.horizon
                and self.train == other.train and self.test == other.test)


@dataclass
class CorpusConfig:
    """Knobs for the synthetic corpus.

    Defaults mirror a mid-size instructional dataset: 18 tasks over a
    105-action vocabulary, videos of 8-12 steps, 64-d observations of
    which 16 coordinates are pure nuisance.
    """
    n_tasks: int = 18
    n_actions: int = 105
    actions_per_task: int = 14
    edge_density: float = 0.4
    zipf_exponent: float = 1.0
    n_videos: int = 2000
    video_len_min: int = 8
    video_len_max: int = 12
    feature_dim: int = 64
    nuisance_dim: int = 16
    noise_sigma: float = 0.1
    block_shift_sigma: float = 1.5
    embed_scale: float = 0.5
    hint_scale: float = 0.5
    context_scale: float = 0.5

    @property
    def signal_dim(self) -> int:
        return self.feature_dim - self.nuisance_dim

    def validate(self) -> None:
        if self.actions_per_task > self.n_actions:
            raise CorpusError("actions_per_task exceeds vocabulary size")
        if not 0.0 <= self.edge_density <= 1.0:
            raise CorpusError("edge_density must be in [0, 1]")
        if self.video_len_max > self.actions_per_task:
            raise CorpusError("video length exceeds per-task action pool")
        if self.nuisance_dim >= self.feature_dim:
            raise CorpusError("nuisance_dim must leave room for signal")


# ---------------------------------------------------------------------------
# grammar generation
# ---------------------------------------------------------------------------

def zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = (np.arange(1, n + 1, dtype=np.float64)) ** (-exponent)
    return w / w.sum()


def generate_grammar(config: CorpusConfig, seed: int) -> list[TaskGrammar]:
    """Sample one precedence DAG per task, deterministic in ``seed``.

    Task action subsets are drawn with Zipfian global frequency, so a
    positive exponent yields the imbalanced action histogram the focal
    loss study needs.
    """
    config.validate()
    rng = np.random.default_rng([seed, 0x67726d])
    weights = zipf_weights(config.n_actions, config.zipf_exponent)
    grammars = []
    for task_id in range(config.n_tasks):
        subset = rng.choice(config.n_actions, size=config.actions_per_task,
                            replace=False, p=weights)
        base = rng.permutation(subset)
        edges = set()
        for i in range(len(base)):
            for j in range(i + 1, len(base)):
                if rng.random() < config.edge_density:
                    edges.add((int(base[i]), int(base[j])))
        grammars.append(TaskGrammar(
            task_id=task_id,
            actions=tuple(int(a) for a in subset),
            edges=frozenset(edges),
            swap_pairs=frozenset(_incomparable_pairs(subset, edges)),
        ))
    return grammars


def _topological_order(actions, edges):
    actions = list(actions)
    succ = {a: [] for a in actions}
    indeg = {a: 0 for a in actions}
    for a, b in edges:
        succ[a].append(b)
        indeg[b] += 1
    ready = [a for a in actions if indeg[a] == 0]
    order = []
    while ready:
        a = ready.pop()
        order.append(a)
        for b in succ[a]:
            indeg[b] -= 1
            if indeg[b] == 0:
                ready.append(b)
    return order if len(order) == len(actions) else None


def _incomparable_pairs(actions, edges):
    actions = [int(a) for a in actions]
    reach = {a: {a} for a in actions}
    # transitive closure by repeated expansion; subsets are small
    changed = True
    while changed:
        changed = False
        for a, b in edges:
            new = reach[b] - reach[a]
            if new:
                reach[a] |= new
                changed = True
    pairs = set()
    for i, a in enumerate(actions):
        for b in actions[i + 1:]:
            if b not in reach[a] and a not in reach[b]:
                pairs.add((min(a, b), max(a, b)))
    return pairs


# ---------------------------------------------------------------------------
# video sampling and observation synthesis
# ---------------------------------------------------------------------------

class EmbeddingBank:
    """Fixed random vectors tying actions and tasks to the latent state space."""

    def __init__(self, config: CorpusConfig, seed: int):
        rng = np.random.default_rng([seed, 0x656d62])
        d = config.signal_dim
        self.action = rng.normal(0.0, config.embed_scale,
                                 (config.n_actions, d))
        self.hint = rng.normal(0.0, config.hint_scale,
                               (config.n_actions, d))
        self.context = rng.normal(0.0, config.context_scale,
                                  (config.n_tasks, d))


def sample_video(grammar: TaskGrammar, length: int, rng: np.random.Generator,
                 config: CorpusConfig, bank: EmbeddingBank,
                 video_id: int = 0) -> PlanVideo:
    """Walk a random topological order without replacement for ``length`` steps.

    Latent state i is the task context plus the running sum of the
    embeddings of the first i actions. Observations are left unset here;
    call ``synthesize_observations`` to fill them.
    """
    if length > len(grammar.actions):
        raise CorpusError(
            f"cannot sample {length} actions from a pool of {len(grammar.actions)}")
    succ = {a: [] for a in grammar.actions}
    indeg = {a: 0 for a in grammar.actions}
    for a, b in grammar.edges:
        succ[a].append(b)
        indeg[b] += 1
    avail = sorted(a for a in grammar.actions if indeg[a] == 0)
    seq = []
    for _ in range(length):
        pick = avail.pop(int(rng.integers(len(avail))))
        seq.append(pick)
        for b in sorted(succ[pick]):
            indeg[b] -= 1
            if indeg[b] == 0:
                avail.append(b)
        avail.sort()
    actions = np.array(seq, dtype=np.int64)

    states = np.zeros((length + 1, config.feature_dim), dtype=np.float64)
    cur = bank.context[grammar.task_id].copy()
    states[0, :config.signal_dim] = cur
    for i, a in enumerate(actions, start=1):
        cur = cur + bank.action[a]
        states[i, :config.signal_dim] = cur

    return PlanVideo(task_id=grammar.task_id, video_id=video_id,
                     actions=actions, states=states.astype(np.float32),
                     observations=None)


def synthesize_observations(video: PlanVideo, noise_sigma: float,
                            nuisance_dim: int, rng: np.random.Generator,
                            config: CorpusConfig, bank: EmbeddingBank) -> PlanVideo:
    """Fill ``video.observations`` with ramp-encoded 3-frame blocks.

    Block i ramps from state(i-1) to state(i) plus a hint of the action
    that follows boundary i; averaging the frames erases the ramp
    direction by construction. Each block also gets one shared random
    shift across its 3 frames (viewpoint/background drift between
    boundaries); it cancels in any within-block frame difference but
    makes raw features incomparable across blocks.
    """
    n = len(video.actions)
    sig = config.signal_dim
    obs = np.zeros((n + 1, 3, config.feature_dim), dtype=np.float64)
    states = video.states.astype(np.float64)
    for i in range(n + 1):
        s_from = states[max(i - 1, 0), :sig]
        s_to = states[i, :sig].copy()
        if i < n:
            s_to += bank.hint[video.actions[i]]
        for j, w in enumerate(_FRAME_WEIGHTS):
            obs[i, j, :sig] = (1.0 - w) * s_from + w * s_to
    if config.block_shift_sigma > 0:
        shifts = rng.normal(0.0, config.block_shift_sigma, (n + 1, 1, sig))
        obs[:, :, :sig] += shifts
    if noise_sigma > 0:
        obs[:, :, :sig] += rng.normal(0.0, noise_sigma, obs[:, :, :sig].shape)
    if nuisance_dim > 0:
        obs[:, :, sig:sig + nuisance_dim] = rng.normal(
            0.0, 1.0, (n + 1, 3, nuisance_dim))
    video.observations = obs.astype(np.float32)
    return video


def generate_corpus(config: CorpusConfig, seed: int) -> tuple[list[TaskGrammar], list[PlanVideo]]:
    """Grammars plus fully synthesized videos, deterministic in ``seed``.

    Every video draws from its own generator keyed by (seed, video id),
    so results do not depend on evaluation order or parallelism.
    """
    grammars = generate_grammar(config, seed)
    bank = EmbeddingBank(config, seed)
    videos = []
    for vid in range(config.n_videos):
        rng = np.random.default_rng([seed, 1, vid])
        grammar = grammars[int(rng.integers(config.n_tasks))]
        length = int(rng.integers(config.video_len_min, config.video_len_max + 1))
        video = sample_video(grammar, length, rng, config, bank, video_id=vid)
        synthesize_observations(video, config.noise_sigma, config.nuisance_dim,
                                rng, config, bank)
        videos.append(video)
    return grammars, videos


# ---------------------------------------------------------------------------
# windowing and splitting
# ---------------------------------------------------------------------------

def window_instances(video: PlanVideo, horizon: int) -> list[PlanInstance]:
    """Sliding-window plans: one instance per window start."""
    if horizon < 2:
        raise CorpusError("horizon must be at least 2")
    n = len(video.actions)
    out = []
    for k in range(n - horizon + 1):
        out.append(PlanInstance(
            v_start=video.observations[k],
            v_goal=video.observations[k + horizon],
            actions=video.actions[k:k + horizon].copy(),
            task_id=video.task_id,
            video_id=video.video_id,
            offset=k,
        ))
    return out


def split_dataset(instances: list[PlanInstance], ratio: float, seed: int,
                  feature_dim: int, n_actions: int, horizon: int) -> DatasetSplit:
    """Shuffle by seed and partition at the sample level."""
    if not instances:
        raise CorpusError("cannot split an empty instance list")
    if not 0.0 < ratio < 1.0:
        raise CorpusError("split ratio must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(instances))
    n_train = int(round(ratio * len(instances)))
    shuffled = [instances[i] for i in order]
    return DatasetSplit(train=shuffled[:n_train], test=shuffled[n_train:],
                        seed=seed, ratio=ratio, feature_dim=feature_dim,
                        n_actions=n_actions, horizon=horizon)


def build_split(config: CorpusConfig, horizon: int, seed: int,
                ratio: float = 0.7) -> tuple[DatasetSplit, list[PlanVideo]]:
    """Corpus generation, windowing, and splitting in one call."""
    _, videos = generate_corpus(config, seed)
    instances = []
    for v in videos:
        instances.extend(window_instances(v, horizon))
    split = split_dataset(instances, ratio, seed, config.feature_dim,
                          config.n_actions, horizon)
    return split, videos


def intermediate_states(videos: list[PlanVideo], instance: PlanInstance) -> np.ndarray:
    """Ground-truth latent states at the window's interior boundaries.

    Returns (T-1, feature_dim); used by the state-supervised baseline.
    """
    by_id = videos if isinstance(videos, dict) else {v.video_id: v for v in videos}
    video = by_id[instance.video_id]
    k, t = instance.offset, instance.horizon
    return video.states[k + 1:k + t]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _pack_instance(inst: PlanInstance, feature_dim: int) -> bytes:
    t = inst.horizon
    head = struct.pack(f"<4I{t}I", inst.task_id, inst.video_id, inst.offset, t,
                       *(int(a) for a in inst.actions))
    payload = np.concatenate([
        np.ascontiguousarray(inst.v_start, dtype="<f4").reshape(-1),
        np.ascontiguousarray(inst.v_goal, dtype="<f4").reshape(-1),
    ])
    if payload.size != 6 * feature_dim:
        raise DatasetError(f"observation payload has {payload.size} floats, "
                           f"expected {6 * feature_dim}")
    return head + payload.tobytes()


def _unpack_instances(raw: bytes, count: int, feature_dim: int,
                      pos: int) -> tuple[list[PlanInstance], int]:
    out = []
    for _ in range(count):
        task_id, video_id, offset, t = struct.unpack_from("<4I", raw, pos)
        pos += 16
        actions = np.array(struct.unpack_from(f"<{t}I", raw, pos), dtype=np.int64)
        pos += 4 * t
        floats = np.frombuffer(raw, dtype="<f4", count=6 * feature_dim, offset=pos)
        pos += 24 * feature_dim
        out.append(PlanInstance(
            v_start=floats[:3 * feature_dim].reshape(3, feature_dim).copy(),
            v_goal=floats[3 * feature_dim:].reshape(3, feature_dim).copy(),
            actions=actions, task_id=task_id, video_id=video_id, offset=offset))
    return out, pos


def save_dataset(split: DatasetSplit, path: str) -> None:
    """Write ``meta.json`` + ``instances.bin`` (train block then test block)."""
    os.makedirs(path, exist_ok=True)
    body = bytearray()
    for inst in split.train:
        body += _pack_instance(inst, split.feature_dim)
    for inst in split.test:
        body += _pack_instance(inst, split.feature_dim)
    body = bytes(body)
    meta = {
        "format_version": _FORMAT_VERSION,
        "feature_dim": split.feature_dim,
        "n_actions": split.n_actions,
        "horizon": split.horizon,
        "n_train": len(split.train),
        "n_test": len(split.test),
        "split_seed": split.seed,
        "split_ratio": split.ratio,
        "instances_sha256": hashlib.sha256(body).hexdigest(),
    }
    _atomic_write(os.path.join(path, "instances.bin"), body)
    _atomic_write(os.path.join(path, "meta.json"),
                  json.dumps(meta, indent=2, sort_keys=True).encode() + b"\n")


def load_dataset(path: str) -> DatasetSplit:
    """Read a dataset directory; checksum failures return nothing partial."""
    try:
        with open(os.path.join(path, "meta.json")) as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise DatasetError(f"{path}: missing meta.json") from exc
    if meta.get("format_version") != _FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format version "
                           f"{meta.get('format_version')!r}")
    with open(os.path.join(path, "instances.bin"), "rb") as fh:
        raw = fh.read()
    digest = hashlib.sha256(raw).hexdigest()
    if digest != meta["instances_sha256"]:
        raise DatasetError(f"{path}: instances.bin checksum mismatch")
    feature_dim = meta["feature_dim"]
    try:
        train, pos = _unpack_instances(raw, meta["n_train"], feature_dim, 0)
        test, pos = _unpack_instances(raw, meta["n_test"], feature_dim, pos)
    except struct.error as exc:
        raise DatasetError(f"{path}: truncated instances.bin") from exc
    if pos != len(raw):
        raise DatasetError(f"{path}: {len(raw) - pos} trailing bytes")
    return DatasetSplit(train=train, test=test, seed=meta["split_seed"],
                        ratio=meta["split_ratio"], feature_dim=feature_dim,
                        n_actions=meta["n_actions"], horizon=meta["horizon"])


def _atomic_write(path: str, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def config_to_dict(config: CorpusConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(d: dict) -> CorpusConfig:
    return CorpusConfig(**d)
