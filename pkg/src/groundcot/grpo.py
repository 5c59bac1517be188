"""Group Relative Policy Optimization.

Rewards within a group are standardised into advantages, every token of a
response shares its response's advantage, and the per-token clipped surrogate
minus a KL penalty toward a frozen reference policy is averaged over tokens
and then over the group.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from .policy import ToyPolicyParams, token_logprob_grads, token_logprobs

log = logging.getLogger(__name__)

KL_FORMS = ("printed", "reverse")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TokenLogProbs:
    """Per-token log-probs of one sampled response under current, old and reference policies."""

    current: np.ndarray
    old: np.ndarray
    ref: np.ndarray

    def __post_init__(self) -> None:
        arrs = []
        for name in ("current", "old", "ref"):
            a = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} log-probs must be finite")
            if np.any(a > 0):
                raise ValueError(f"{name} log-probs must be <= 0")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
            arrs.append(a)
        if not (len(arrs[0]) == len(arrs[1]) == len(arrs[2]) >= 1):
            raise ValueError(f"log-prob lists need equal length >= 1, got {[len(a) for a in arrs]}")

    def __len__(self) -> int:
        return len(self.current)

    def with_current(self, current: np.ndarray) -> "TokenLogProbs":
        return TokenLogProbs(current, self.old, self.ref)


@dataclass(frozen=True)
class Response:
    raw: str
    logprobs: TokenLogProbs
    reward: float
    tokens: tuple[int, ...] = ()


@dataclass(frozen=True)
class RolloutGroup:
    task_id: str
    responses: tuple[Response, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "responses", tuple(self.responses))
        if len(self.responses) < 2:
            raise ValueError(f"group {self.task_id} needs at least 2 responses")
        if not all(math.isfinite(r.reward) for r in self.responses):
            raise ValueError(f"group {self.task_id} has a non-finite reward")

    @property
    def rewards(self) -> list[float]:
        return [r.reward for r in self.responses]


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    kl_beta: float = 0.04
    temperature: float = 1.0
    learning_rate: float = 0.05
    std_floor: float = 0.0
    seed: int = 0
    batch_size: int = 16
    inner_steps: int = 1
    kl_form: str = "printed"
    max_grad_norm: Optional[float] = 1.0

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be > 0")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.std_floor < 0:
            raise ValueError("std_floor must be >= 0")
        if self.batch_size < 1 or self.inner_steps < 1:
            raise ValueError("batch_size and inner_steps must be >= 1")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be > 0")
        if self.kl_form not in KL_FORMS:
            raise ValueError(f"kl_form must be one of {KL_FORMS}")


def normalize_advantages(rewards: Sequence[float], std_floor: float = 0.0) -> np.ndarray:
    """``(r - mean) / std`` with the population std; all zeros when the spread is degenerate.

    Centering is done in exact rational arithmetic, so shifting every reward by
    an exactly representable constant leaves the output bit-identical.
    """
    if len(rewards) < 2:
        raise ValueError("advantage normalization needs at least 2 rewards")
    if not all(math.isfinite(r) for r in rewards):
        raise ValueError("rewards must be finite")
    exact = [Fraction(r) for r in rewards]
    mean = sum(exact) / len(exact)
    dev = [r - mean for r in exact]
    scale = max(abs(d) for d in dev)
    if scale == 0:
        return np.zeros(len(rewards))
    # rescale before leaving exact arithmetic so tiny spreads do not underflow
    unit = [d / scale for d in dev]
    unit_std = math.sqrt(sum(u * u for u in unit) / len(unit))
    if float(scale) * unit_std <= std_floor:
        return np.zeros(len(rewards))
    return np.array([float(u) / unit_std for u in unit])


def importance_ratio(logp_current, logp_old):
    # only the difference is exponentiated; a ratio beyond float range saturates to inf
    with np.errstate(over="ignore"):
        return np.exp(np.subtract(logp_current, logp_old))


def kl_term(logp_current, logp_ref, form: str = "printed"):
    """``x - log x - 1`` per token, ``x = pi/pi_ref`` (or ``pi_ref/pi`` for ``form="reverse"``)."""
    d = np.subtract(logp_current, logp_ref)
    if form == "reverse":
        d = -d
    elif form != "printed":
        raise ValueError(f"unknown KL form {form!r}")
    # expm1(d) - d avoids cancellation near x = 1
    return np.maximum(np.expm1(d) - d, 0.0)


def _surrogate(rho: np.ndarray, adv: float, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-token ``min(rho A, clip(rho) A)`` and a mask of tokens taking the unclipped branch."""
    unclipped = rho * adv
    clipped = np.clip(rho, 1.0 - eps, 1.0 + eps) * adv
    use_unclipped = unclipped <= clipped
    return np.where(use_unclipped, unclipped, clipped), use_unclipped


@dataclass(frozen=True)
class GroupStats:
    objective: float
    mean_kl: float
    clip_fraction: float


def group_stats(group: RolloutGroup, cfg: GrpoConfig) -> GroupStats:
    adv = normalize_advantages(group.rewards, cfg.std_floor)
    per_resp = []
    kls = []
    n_clipped = n_tokens = 0
    for a, resp in zip(adv, group.responses):
        lp = resp.logprobs
        rho = importance_ratio(lp.current, lp.old)
        surr, _ = _surrogate(rho, a, cfg.clip_eps)
        kl = kl_term(lp.current, lp.ref, cfg.kl_form)
        per_resp.append(np.mean(surr - cfg.kl_beta * kl))
        kls.append(np.mean(kl))
        n_clipped += int(np.count_nonzero(np.abs(rho - 1.0) > cfg.clip_eps))
        n_tokens += len(lp)
    return GroupStats(float(np.mean(per_resp)), float(np.mean(kls)), n_clipped / n_tokens)


def grpo_objective(group: RolloutGroup, cfg: GrpoConfig) -> float:
    return group_stats(group, cfg).objective


def _logp_grad_wrt_current(
    logprobs: TokenLogProbs, adv: float, cfg: GrpoConfig
) -> np.ndarray:
    """d(per-token objective term) / d(logp_current)."""
    rho = importance_ratio(logprobs.current, logprobs.old)
    _, use_unclipped = _surrogate(rho, adv, cfg.clip_eps)
    d_surr = np.where(use_unclipped, rho * adv, 0.0)
    d = logprobs.current - logprobs.ref
    if cfg.kl_form == "printed":
        d_kl = np.expm1(d)
    else:
        d_kl = -np.expm1(-d)
    return d_surr - cfg.kl_beta * d_kl


class FeatureSource(Protocol):
    def features(self, task_id: str) -> np.ndarray: ...


def _features_for(env_context, task_id: str) -> np.ndarray:
    if isinstance(env_context, Mapping):
        return env_context[task_id]
    return env_context.features(task_id)


def refresh_current(
    params: ToyPolicyParams, group: RolloutGroup, features: np.ndarray, temperature: float
) -> RolloutGroup:
    """Recompute each response's current-policy log-probs from ``params``."""
    responses = tuple(
        Response(
            r.raw,
            r.logprobs.with_current(token_logprobs(params.weights, features, np.array(r.tokens), temperature)),
            r.reward,
            r.tokens,
        )
        for r in group.responses
    )
    return RolloutGroup(group.task_id, responses)


def grpo_gradient(
    params: ToyPolicyParams,
    groups: Sequence[RolloutGroup],
    cfg: GrpoConfig,
    env_context: Mapping[str, np.ndarray] | FeatureSource,
) -> np.ndarray:
    """Analytic gradient of the summed group objectives with respect to the policy weights.

    Current-policy log-probs are recomputed from ``params``; old and reference
    log-probs are held fixed. At the clip boundary the unclipped branch is used.
    """
    w = params.weights
    grad = np.zeros_like(w)
    for group in groups:
        feats = np.asarray(_features_for(env_context, group.task_id), dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != w.shape[0]:
            raise ValueError(
                f"task {group.task_id}: features of shape {feats.shape} do not match "
                f"{w.shape[0]} policy weights"
            )
        adv = normalize_advantages(group.rewards, cfg.std_floor)
        g_group = np.zeros_like(w)
        for a, resp in zip(adv, group.responses):
            tokens = np.array(resp.tokens)
            current = token_logprobs(w, feats, tokens, cfg.temperature)
            coef = _logp_grad_wrt_current(resp.logprobs.with_current(current), a, cfg)
            rows = token_logprob_grads(w, feats, tokens, cfg.temperature)
            g_group += coef @ rows / len(tokens)
        grad += g_group / len(group.responses)
    return grad


def toy_objective(
    params: ToyPolicyParams,
    groups: Sequence[RolloutGroup],
    cfg: GrpoConfig,
    env_context: Mapping[str, np.ndarray] | FeatureSource,
) -> float:
    """Summed group objective as a function of the policy weights; the function ``grpo_gradient`` differentiates."""
    total = 0.0
    for group in groups:
        feats = np.asarray(_features_for(env_context, group.task_id), dtype=np.float64)
        total += grpo_objective(refresh_current(params, group, feats, cfg.temperature), cfg)
    return total


# -- training -----------------------------------------------------------------


class RolloutEnv(Protocol):
    train_tasks: Sequence

    def features(self, task_id: str) -> np.ndarray: ...

    def rollout(self, params, task, cfg, rng, ref_params=None, selection=None): ...


@dataclass
class TrainResult:
    params: ToyPolicyParams
    init_params: ToyPolicyParams
    log: list[dict] = field(default_factory=list)


def rollout_rng(seed: int, iteration: int, task_index: int, rollout_index: int) -> np.random.Generator:
    """Independent stream per (iteration, task, rollout), so workers can sample in any order."""
    return np.random.default_rng([seed, 1, iteration, task_index, rollout_index])


def batch_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0, iteration])


def train(
    env: RolloutEnv,
    policy_init: ToyPolicyParams,
    cfg: GrpoConfig,
    iterations: int,
) -> TrainResult:
    """Run GRPO on ``env`` for ``iterations`` steps; the reference policy is ``policy_init``.

    Each iteration samples ``cfg.batch_size`` tasks, rolls out ``cfg.group_size``
    responses per task under a snapshot of the current weights, then takes
    ``cfg.inner_steps`` gradient-ascent steps on the summed group objective.
    Gradients whose norm exceeds ``cfg.max_grad_norm`` are rescaled to it.
    Non-finite rollouts, objectives or gradients raise ``TrainingError``.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    tasks = list(env.train_tasks)
    if not tasks:
        raise ValueError("environment has no training tasks")
    ref = policy_init
    params = policy_init
    result = TrainResult(params, policy_init)
    batch = min(cfg.batch_size, len(tasks))

    for it in range(iterations):
        old = params
        picked = batch_rng(cfg.seed, it).choice(len(tasks), size=batch, replace=False)
        groups = []
        rewards = []
        for ti in sorted(int(i) for i in picked):
            task = tasks[ti]
            responses = []
            try:
                for g in range(cfg.group_size):
                    ro = env.rollout(old, task, cfg, rollout_rng(cfg.seed, it, ti, g), ref_params=ref)
                    responses.append(Response(ro.raw, ro.logprobs, ro.reward.total, ro.tokens))
                    rewards.append(ro.reward.total)
                groups.append(RolloutGroup(task.task_id, responses))
            except (ValueError, FloatingPointError) as exc:
                raise TrainingError(f"iteration {it}: rollout failed on task {task.task_id}: {exc}") from exc

        stats = [group_stats(gr, cfg) for gr in groups]
        grad_norms = []
        clip_fracs = [float(np.mean([s.clip_fraction for s in stats]))]
        objective = float(np.mean([s.objective for s in stats]))
        for gr, s in zip(groups, stats):
            if not math.isfinite(s.objective):
                raise TrainingError(f"iteration {it}: non-finite objective on task {gr.task_id}")

        for step in range(cfg.inner_steps):
            if step:
                clip_fracs.append(_clip_fraction(params, groups, cfg, env))
            grad = grpo_gradient(params, groups, cfg, env)
            if not np.all(np.isfinite(grad)):
                bad = _first_bad_group(params, groups, cfg, env)
                raise TrainingError(f"iteration {it}: non-finite gradient on task {bad}")
            norm = float(np.linalg.norm(grad))
            grad_norms.append(norm)
            if cfg.max_grad_norm is not None and norm > cfg.max_grad_norm:
                grad = grad * (cfg.max_grad_norm / norm)
            new_w = params.weights + cfg.learning_rate * grad
            if not np.all(np.isfinite(new_w)):
                raise TrainingError(f"iteration {it}: parameters diverged")
            params = ToyPolicyParams(new_w)

        entry = {
            "iter": it,
            "mean_reward": float(np.mean(rewards)),
            "objective": objective,
            "mean_kl": float(np.mean([s.mean_kl for s in stats])),
            "clip_fraction": float(np.mean(clip_fracs)),
            "grad_norm": grad_norms[0],
        }
        result.log.append(entry)
        log.debug("iter %d reward %.4f kl %.4g", it, entry["mean_reward"], entry["mean_kl"])

    result.params = params
    return result


def _clip_fraction(params, groups, cfg, env) -> float:
    """Mean fraction of tokens whose ratio to the rollout snapshot lies outside the clip range."""
    fracs = []
    for gr in groups:
        fresh = refresh_current(params, gr, env.features(gr.task_id), cfg.temperature)
        fracs.append(group_stats(fresh, cfg).clip_fraction)
    return float(np.mean(fracs))


def _first_bad_group(params, groups, cfg, env) -> Optional[str]:
    for gr in groups:
        if not np.all(np.isfinite(grpo_gradient(params, [gr], cfg, env))):
            return gr.task_id
    return None
