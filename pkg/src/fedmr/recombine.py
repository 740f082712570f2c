"""Layer-wise model recombination.

The server holds K trained models. For every layer group it draws an
independent uniform permutation of the K slots and builds recombined model
``j`` by taking group ``g`` from input model ``permutations[g][j]``. Blocks are
moved by reference, never copied, so every output block is bitwise one of the
input blocks at the same position.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyPopulationError,
    InvalidGranularityError,
    PlanShapeError,
    ShapeMismatchError,
)
from .model import LayeredModel, ModelList, check_same_arch, sq_distance_sum, sum_models

PER_LAYER = "layer"


def segment_groups(n_layers: int, x: float) -> list[range]:
    """Split ``n_layers`` into ``ceil(1/x)`` contiguous, balanced segments.

    The first ``n_layers % S`` segments get one extra layer. When there are more
    segments than layers every layer becomes its own group.
    """
    if not (0.0 < x <= 1.0) or math.isnan(x):
        raise InvalidGranularityError(f"granularity must lie in (0, 1], got {x}")
    if n_layers < 1:
        raise InvalidGranularityError("model has no layers")
    # 1e-9 guard: 1/(1/3) evaluates to 3.0000000000000004
    n_seg = max(1, math.ceil(1.0 / x - 1e-9))
    return _balanced(n_layers, n_seg)


def _balanced(n_layers: int, n_seg: int) -> list[range]:
    if n_seg >= n_layers:
        return [range(i, i + 1) for i in range(n_layers)]
    base, extra = divmod(n_layers, n_seg)
    out = []
    start = 0
    for s in range(n_seg):
        size = base + (1 if s < extra else 0)
        out.append(range(start, start + size))
        start += size
    return out


@dataclass(frozen=True, eq=False)
class RecombinationPlan:
    """One permutation of ``[0, K)`` per layer group.

    ``granularity`` is ``"layer"`` (one group per layer block) or an integer
    segment count, split by the balanced rule of :func:`segment_groups`.
    """

    granularity: str | int
    permutations: np.ndarray

    def __post_init__(self):
        perms = np.array(self.permutations, dtype=np.int64, ndmin=2)
        if perms.ndim != 2:
            raise PlanShapeError("permutations must be a 2-D array")
        K = perms.shape[1]
        for g, p in enumerate(perms):
            if not np.array_equal(np.sort(p), np.arange(K)):
                raise PlanShapeError(f"group {g}: not a permutation of [0, {K})")
        if self.granularity != PER_LAYER and not (
            isinstance(self.granularity, (int, np.integer)) and self.granularity >= 1
        ):
            raise PlanShapeError(f"bad granularity {self.granularity!r}")
        perms.flags.writeable = False
        object.__setattr__(self, "permutations", perms)

    @property
    def K(self) -> int:
        return self.permutations.shape[1]

    @property
    def n_groups(self) -> int:
        return self.permutations.shape[0]

    def groups(self, n_layers: int) -> list[range]:
        if self.granularity == PER_LAYER:
            return [range(i, i + 1) for i in range(n_layers)]
        return _balanced(n_layers, int(self.granularity))

    def compose(self, then: "RecombinationPlan") -> "RecombinationPlan":
        """Plan equal to applying ``self`` and then ``then``."""
        if self.granularity != then.granularity or self.permutations.shape != then.permutations.shape:
            raise PlanShapeError("plans differ in shape or granularity")
        perms = np.take_along_axis(self.permutations, then.permutations, axis=1)
        return RecombinationPlan(self.granularity, perms)

    def to_json(self) -> str:
        return json.dumps(
            {"granularity": self.granularity, "permutations": self.permutations.tolist()}
        )

    @classmethod
    def from_json(cls, text: str) -> "RecombinationPlan":
        doc = json.loads(text)
        return cls(doc["granularity"], np.asarray(doc["permutations"], dtype=np.int64))


def n_groups_for(n_layers: int, granularity: float | None) -> tuple[str | int, int]:
    """(plan granularity, group count) for a model with ``n_layers`` blocks.

    ``granularity=None`` means per-layer; a float ``x`` in (0, 1] means segments.
    """
    if granularity is None:
        return PER_LAYER, n_layers
    groups = segment_groups(n_layers, granularity)
    if len(groups) == n_layers:
        return PER_LAYER, n_layers
    return len(groups), len(groups)


def sample_plan(
    K: int,
    n_groups: int,
    seed,
    granularity: str | int = PER_LAYER,
) -> RecombinationPlan:
    """Independent uniform permutations (Fisher-Yates via numpy) per group."""
    if K < 1:
        raise EmptyPopulationError("cannot shuffle an empty model list")
    if n_groups < 1:
        raise PlanShapeError("need at least one layer group")
    rng = np.random.default_rng(seed)
    perms = np.stack([rng.permutation(K) for _ in range(n_groups)])
    return RecombinationPlan(granularity, perms)


def plan_for(models: ModelList, granularity: float | None, seed) -> RecombinationPlan:
    gran, n = n_groups_for(models[0].n_layers, granularity)
    return sample_plan(len(models), n, seed, gran)


def recombine(models: ModelList, plan: RecombinationPlan) -> list[LayeredModel]:
    check_same_arch(models)
    K = len(models)
    n_layers = models[0].n_layers
    groups = plan.groups(n_layers)
    if plan.K != K or plan.n_groups != len(groups):
        raise PlanShapeError(
            f"plan is {plan.n_groups}x{plan.K}, models need {len(groups)}x{K}"
        )
    out_layers: list[list] = [[None] * n_layers for _ in range(K)]
    for g, span in enumerate(groups):
        perm = plan.permutations[g]
        for j in range(K):
            src = models[perm[j]].layers
            for i in span:
                out_layers[j][i] = src[i]
    arch = models[0].arch_id
    return [LayeredModel(arch, tuple(layers)) for layers in out_layers]


@dataclass(frozen=True)
class Lemma1Report:
    sum_gap: float
    sqdist_gap: float

    def passed(self, sum_tol: float = 1e-9, sqdist_tol: float = 1e-12) -> bool:
        return self.sum_gap <= sum_tol and self.sqdist_gap <= sqdist_tol


def check_lemma1(before: ModelList, after: ModelList, x: LayeredModel) -> Lemma1Report:
    """Gaps in the two conservation identities of recombination.

    ``sum_gap`` is the max-abs elementwise difference of the model sums;
    ``sqdist_gap`` is the relative difference of ``sum ||m - x||^2``.
    """
    if len(before) != len(after):
        raise ShapeMismatchError(f"list lengths differ: {len(before)} vs {len(after)}")
    check_same_arch(list(before) + list(after) + [x])
    s_before = sum_models(before).flatten()
    s_after = sum_models(after).flatten()
    sum_gap = float(np.max(np.abs(s_before - s_after))) if s_before.size else 0.0
    d_before = sq_distance_sum(before, x)
    d_after = sq_distance_sum(after, x)
    return Lemma1Report(sum_gap, abs(d_before - d_after) / max(1.0, d_before))


def block_multiset(models: ModelList) -> list[tuple[int, str]]:
    """Sorted (layer_index, digest) pairs over all blocks of all models."""
    return sorted((b.layer_index, b.digest()) for m in models for b in m.layers)


__all__ = [
    "PER_LAYER",
    "RecombinationPlan",
    "Lemma1Report",
    "segment_groups",
    "n_groups_for",
    "sample_plan",
    "plan_for",
    "recombine",
    "check_lemma1",
    "block_multiset",
]
