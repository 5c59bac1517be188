"""Synthetic referring tasks and a rollout loop for the linear include/exclude policy.

Scenes are rows of "person" candidates with a colour and a size, placed in
distinct canvas columns so left-to-right order is unambiguous and no two boxes
overlap. The scene description travels in ``image_ref`` (it plays the role of
the image), so tasks read back from JSONL featurize the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Box
from .grammar import (
    Action,
    Answer,
    BoxHint,
    LabeledBox,
    ReferringTask,
    ThinkTrace,
    serialize_response,
)
from .grpo import GrpoConfig, TokenLogProbs
from .metrics import PredictionRecord
from .policy import ToyPolicyParams, include_prob, token_logprobs
from .reward import RewardBreakdown, RewardConfig, reward_response

COLORS = ("red", "green", "blue", "yellow", "white")
SIZES = ("small", "large")
POSITIONS = ("leftmost", "rightmost")
CATEGORY = "person"
CANVAS = 1000

FEATURE_NAMES = (
    "bias",
    "color_match",
    "color_mismatch",
    "size_match",
    "size_mismatch",
    "position_match",
    "position_mismatch",
    "position_rank",
)
FEATURE_DIM = len(FEATURE_NAMES)


@dataclass(frozen=True)
class SyntheticSpec:
    n_tasks: int = 200
    min_candidates: int = 2
    max_candidates: int = 6
    colors: tuple[str, ...] = COLORS
    sizes: tuple[str, ...] = SIZES
    positions: tuple[str, ...] = POSITIONS
    min_predicates: int = 1
    max_predicates: int = 2
    rejection_fraction: float = 0.1
    seed: int = 0
    grid_cols: int = 8
    grid_rows: int = 4

    def __post_init__(self) -> None:
        if self.n_tasks < 0:
            raise ValueError("n_tasks must be >= 0")
        if not 0.0 <= self.rejection_fraction < 1.0:
            raise ValueError(f"rejection_fraction must lie in [0, 1), got {self.rejection_fraction}")
        if not 1 <= self.min_candidates <= self.max_candidates:
            raise ValueError("need 1 <= min_candidates <= max_candidates")
        if not 1 <= self.min_predicates <= self.max_predicates <= 3:
            raise ValueError("need 1 <= min_predicates <= max_predicates <= 3")
        if not self.colors or not self.sizes or not self.positions:
            raise ValueError("attribute vocabularies must be nonempty")
        if self.grid_cols < 1 or self.grid_rows < 1:
            raise ValueError("canvas grid must have at least one cell")
        if self.max_candidates > self.grid_cols:
            raise ValueError(
                f"{self.max_candidates} candidates cannot occupy distinct columns of a "
                f"{self.grid_cols}-column canvas"
            )


@dataclass(frozen=True)
class Scene:
    colors: tuple[str, ...]
    sizes: tuple[str, ...]

    def encode(self, prefix: str) -> str:
        return prefix + "#" + ",".join(f"{c}-{s}" for c, s in zip(self.colors, self.sizes))

    @classmethod
    def decode(cls, image_ref: str) -> "Scene":
        _, sep, body = image_ref.partition("#")
        if not sep:
            raise ValueError(f"image_ref {image_ref!r} carries no synthetic scene")
        pairs = [item.split("-") for item in body.split(",")] if body else []
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))


@dataclass(frozen=True)
class Query:
    color: Optional[str] = None
    size: Optional[str] = None
    position: Optional[str] = None

    def render(self, category: str = CATEGORY) -> str:
        words = [w for w in (self.position, self.size, self.color) if w]
        return "the " + " ".join(words + [category])

    @property
    def arity(self) -> int:
        return sum(w is not None for w in (self.color, self.size, self.position))


def parse_query(expression: str, spec: SyntheticSpec = SyntheticSpec()) -> Query:
    words = expression.split()
    kw = {}
    for w in words:
        if w in spec.colors:
            kw["color"] = w
        elif w in spec.sizes:
            kw["size"] = w
        elif w in spec.positions:
            kw["position"] = w
    return Query(**kw)


def _x_order(hints: Sequence[BoxHint]) -> list[int]:
    """Candidate indices sorted left to right by box centre."""
    return sorted(range(len(hints)), key=lambda i: hints[i].box.x0 + hints[i].box.x1)


def _attr_ok(scene: Scene, i: int, q: Query) -> bool:
    return (q.color is None or scene.colors[i] == q.color) and (
        q.size is None or scene.sizes[i] == q.size
    )


def _extreme(scene: Scene, hints: Sequence[BoxHint], q: Query) -> Optional[int]:
    eligible = [i for i in _x_order(hints) if _attr_ok(scene, i, q)]
    if not eligible:
        return None
    return eligible[0] if q.position == "leftmost" else eligible[-1]


def satisfying(scene: Scene, hints: Sequence[BoxHint], q: Query) -> list[int]:
    """1-based ordinals of candidates satisfying every predicate of ``q``."""
    if q.position is None:
        return [i + 1 for i in range(len(hints)) if _attr_ok(scene, i, q)]
    i = _extreme(scene, hints, q)
    return [] if i is None else [i + 1]


def _sample_box(rng: np.random.Generator, col: int, row: int, size: str, spec: SyntheticSpec) -> Box:
    cw = CANVAS // spec.grid_cols
    ch = CANVAS // spec.grid_rows
    if size == "large":
        w = int(rng.integers(int(cw * 0.6), int(cw * 0.9) + 1))
        h = int(rng.integers(int(ch * 0.6), int(ch * 0.9) + 1))
    else:
        w = int(rng.integers(max(2, int(cw * 0.25)), int(cw * 0.45) + 1))
        h = int(rng.integers(max(2, int(ch * 0.25)), int(ch * 0.45) + 1))
    x0 = col * cw + int(rng.integers(0, cw - w + 1))
    y0 = row * ch + int(rng.integers(0, ch - h + 1))
    return Box(x0, y0, x0 + w, y0 + h)


def _sample_query(rng: np.random.Generator, scene: Scene, spec: SyntheticSpec, anchor: Optional[int]) -> Query:
    """Random query; attribute values come from candidate ``anchor`` when given."""
    k = int(rng.integers(spec.min_predicates, spec.max_predicates + 1))
    kinds = [str(x) for x in rng.choice(["color", "size", "position"], size=k, replace=False)]
    kw = {}
    for kind in kinds:
        if kind == "position":
            kw["position"] = str(rng.choice(spec.positions))
        elif anchor is not None:
            kw[kind] = scene.colors[anchor] if kind == "color" else scene.sizes[anchor]
        else:
            vocab = spec.colors if kind == "color" else spec.sizes
            kw[kind] = str(rng.choice(vocab))
    return Query(**kw)


def generate_tasks(spec: SyntheticSpec) -> list[ReferringTask]:
    """Deterministic synthetic benchmark; exactly ``round(n * rejection_fraction)`` rejection tasks."""
    rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    n_rej = int(round(spec.n_tasks * spec.rejection_fraction))
    rejection_ids = set(int(i) for i in rng.permutation(spec.n_tasks)[:n_rej])
    tasks = []
    for idx in range(spec.n_tasks):
        for _attempt in range(1000):
            task = _draw_task(rng, spec, idx, idx in rejection_ids)
            if task is not None:
                tasks.append(task)
                break
        else:
            raise ValueError(f"could not draw task {idx} under {spec}")
    return tasks


def _draw_task(rng: np.random.Generator, spec: SyntheticSpec, idx: int, rejection: bool) -> Optional[ReferringTask]:
    n = int(rng.integers(spec.min_candidates, spec.max_candidates + 1))
    cols = rng.choice(spec.grid_cols, size=n, replace=False)
    scene = Scene(
        tuple(str(c) for c in rng.choice(spec.colors, size=n)),
        tuple(str(s) for s in rng.choice(spec.sizes, size=n)),
    )
    hints = tuple(
        BoxHint(
            f"{CATEGORY} {k + 1}",
            _sample_box(rng, int(cols[k]), int(rng.integers(spec.grid_rows)), scene.sizes[k], spec),
        )
        for k in range(n)
    )
    anchor = None if rejection else int(rng.integers(n))
    q = _sample_query(rng, scene, spec, anchor)
    if rejection and q.color is None and q.size is None:
        return None  # a bare position query is always satisfiable
    gt = satisfying(scene, hints, q)
    if bool(gt) == rejection:
        return None
    subset = "rejection" if rejection else ("position" if q.position else "attribute")
    task_id = f"synth-{spec.seed}-{idx:05d}"
    return ReferringTask(
        task_id=task_id,
        image_ref=scene.encode(f"synth://{spec.seed}/{idx}"),
        expression=q.render(),
        category=CATEGORY,
        hints=hints,
        gt=tuple(gt),
        subset=subset,
    )


def featurize(task: ReferringTask, ordinal: int, spec: SyntheticSpec = SyntheticSpec()) -> np.ndarray:
    """Feature vector of candidate ``ordinal`` under the task's expression; see ``FEATURE_NAMES``."""
    if not 1 <= ordinal <= len(task.hints):
        raise ValueError(f"ordinal {ordinal} out of range for task {task.task_id}")
    return feature_matrix(task, spec)[ordinal - 1]


def feature_matrix(task: ReferringTask, spec: SyntheticSpec = SyntheticSpec()) -> np.ndarray:
    scene = Scene.decode(task.image_ref)
    q = parse_query(task.expression, spec)
    n = len(task.hints)
    phi = np.zeros((n, FEATURE_DIM))
    phi[:, 0] = 1.0
    order = _x_order(task.hints)
    if q.position == "rightmost":
        order = order[::-1]
    rank = {i: r for r, i in enumerate(order)}
    extreme = _extreme(scene, task.hints, q) if q.position else None
    for i in range(n):
        if q.color is not None:
            hit = scene.colors[i] == q.color
            phi[i, 1 if hit else 2] = 1.0
        if q.size is not None:
            hit = scene.sizes[i] == q.size
            phi[i, 3 if hit else 4] = 1.0
        if q.position is not None:
            phi[i, 5 if i == extreme else 6] = 1.0
            phi[i, 7] = rank[i] / max(n - 1, 1)
    return phi


def policy_logprob(
    params: ToyPolicyParams,
    task: ReferringTask,
    selection: Sequence[int],
    temperature: float = 1.0,
    spec: SyntheticSpec = SyntheticSpec(),
) -> np.ndarray:
    if len(selection) != len(task.hints):
        raise ValueError(f"selection has {len(selection)} bits for {len(task.hints)} hints")
    return token_logprobs(params.weights, feature_matrix(task, spec), np.asarray(selection), temperature)


@dataclass(frozen=True)
class Rollout:
    raw: str
    tokens: tuple[int, ...]
    logprobs: TokenLogProbs
    reward: RewardBreakdown


def _ordinal_word(k: int) -> str:
    suffix = "th" if 10 <= k % 100 <= 20 else {1: "st", 2: "nd", 3: "rd"}.get(k % 10, "th")
    return f"{k}{suffix}"


def build_trace(task: ReferringTask, selection: Sequence[int]) -> ThinkTrace:
    scene = Scene.decode(task.image_ref)
    q = parse_query(task.expression)
    wanted = [w for w in (q.color, q.size) if w]
    step = f"Check each {task.category} for: {', '.join(wanted) or 'any appearance'}"
    if q.position:
        step += f"; then keep the {q.position} one"
    rank = {i: r for r, i in enumerate(_x_order(task.hints), start=1)}
    actions = tuple(
        Action(
            k,
            "match" if bit else "no-match",
            f"{scene.colors[k - 1]}, {scene.sizes[k - 1]}, {_ordinal_word(rank[k - 1])} from left",
        )
        for k, bit in enumerate(selection, start=1)
    )
    picked = [task.hints[k].label for k, bit in enumerate(selection) if bit]
    summary = f"Selected {', '.join(picked)}" if picked else f"No {task.category} matches the expression"
    return ThinkTrace((step,), actions, summary)


def render_selection(task: ReferringTask, selection: Sequence[int]) -> str:
    """Serialize a selection as a full response; boxes are verbatim hint copies."""
    answer = Answer.of(
        LabeledBox(task.hints[k].label, task.hints[k].box) for k, bit in enumerate(selection) if bit
    )
    return serialize_response(build_trace(task, selection), answer, task)


@dataclass
class ToyEnv:
    """Training tasks plus cached feature matrices; the ``env`` consumed by ``grpo.train``."""

    train_tasks: list[ReferringTask]
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)
    reward_cfg: RewardConfig = field(default_factory=RewardConfig)
    _features: dict = field(default_factory=dict, repr=False)

    def features(self, task_id: str) -> np.ndarray:
        return self._features[task_id]

    def __post_init__(self) -> None:
        for t in self.train_tasks:
            self._features[t.task_id] = feature_matrix(t, self.spec)

    def register(self, tasks: Sequence[ReferringTask]) -> None:
        for t in tasks:
            self._features.setdefault(t.task_id, feature_matrix(t, self.spec))

    def rollout(
        self,
        params: ToyPolicyParams,
        task: ReferringTask,
        cfg: GrpoConfig,
        rng: np.random.Generator,
        ref_params: Optional[ToyPolicyParams] = None,
        selection: Optional[Sequence[int]] = None,
    ) -> Rollout:
        return rollout(
            params, task, cfg, rng, ref_params, selection, self.reward_cfg, self.spec,
            features=self._features.get(task.task_id),
        )


def rollout(
    params: ToyPolicyParams,
    task: ReferringTask,
    cfg: GrpoConfig,
    rng: np.random.Generator,
    ref_params: Optional[ToyPolicyParams] = None,
    selection: Optional[Sequence[int]] = None,
    reward_cfg: RewardConfig = RewardConfig(),
    spec: SyntheticSpec = SyntheticSpec(),
    features: Optional[np.ndarray] = None,
) -> Rollout:
    """Sample (or force) a selection, emit it as text and score the text.

    The reward sees only the serialized response, never the selection itself.
    """
    phi = feature_matrix(task, spec) if features is None else features
    if selection is None:
        p = include_prob(params.weights, phi, cfg.temperature)
        tokens = (rng.random(len(p)) < p).astype(int)
    else:
        tokens = np.asarray(selection, dtype=int)
        if tokens.shape != (len(task.hints),):
            raise ValueError(f"selection has {tokens.size} bits for {len(task.hints)} hints")
    current = token_logprobs(params.weights, phi, tokens, cfg.temperature)
    ref = current if ref_params is None else token_logprobs(ref_params.weights, phi, tokens, cfg.temperature)
    raw = render_selection(task, tokens)
    return Rollout(
        raw=raw,
        tokens=tuple(int(t) for t in tokens),
        logprobs=TokenLogProbs(current, current, ref),
        reward=reward_response(task, raw, reward_cfg),
    )


def greedy_selection(params: ToyPolicyParams, task: ReferringTask, spec: SyntheticSpec = SyntheticSpec()) -> list[int]:
    """Include a candidate iff its include-probability exceeds one half."""
    p = include_prob(params.weights, feature_matrix(task, spec))
    return [int(v > 0.5) for v in p]


def greedy_predictions(
    params: ToyPolicyParams, tasks: Sequence[ReferringTask], spec: SyntheticSpec = SyntheticSpec()
) -> list[PredictionRecord]:
    return [
        PredictionRecord.from_response(t.task_id, render_selection(t, greedy_selection(params, t, spec)))
        for t in tasks
    ]


def oracle_weights() -> np.ndarray:
    """Hand-set weights that include exactly the candidates matching every asked predicate."""
    w = np.zeros(FEATURE_DIM)
    w[0] = 1.0
    w[[2, 4, 6]] = -4.0
    return w
