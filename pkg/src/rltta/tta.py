"""Test-time stage: rank the bank for an image, apply the top-k
augmentations and average the classifier's fake probabilities."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import augment


@dataclass(frozen=True)
class TTAConfig:
    k: int = 3
    include_original: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


def select_top_k(scores, k: int) -> list[int]:
    """Indices of the k largest scores, descending; ties go to the lower index."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if not 1 <= k <= s.size:
        raise ValueError(f"k={k} outside [1, {s.size}]")
    order = np.lexsort((np.arange(s.size), -s))
    return [int(i) for i in order[:k]]


def fuse(probabilities) -> float:
    return float(np.mean(probabilities))


@dataclass
class TTAResult:
    score: float
    actions: list
    action_scores: np.ndarray


def classify_with_tta(model, agent, image, config: TTAConfig = TTAConfig(), bank=None) -> TTAResult:
    """Fused fake probability of ``image`` over its top-k augmentations."""
    bank = bank or augment.default_bank()
    if config.k > len(bank):
        raise ValueError(f"k={config.k} exceeds bank size {len(bank)}")
    scores = np.asarray(agent.action_scores(model.feature_map(image)), dtype=np.float64)
    chosen = select_top_k(scores, config.k)
    views = [augment.apply(bank[a], image) for a in chosen]
    if config.include_original:
        views.append(np.asarray(image))
    probs = model.probas(np.stack(views))
    return TTAResult(fuse(probs), chosen, scores)


def ranked_probas(model, agent, image, k_max: int, bank=None):
    """``(ranked actions, their view probabilities, original probability)``
    for the ``k_max`` best-ranked actions; the top-k fused score for any
    ``k <= k_max`` is the mean of the first k probabilities (plus the
    original's, when it is included)."""
    bank = bank or augment.default_bank()
    scores = np.asarray(agent.action_scores(model.feature_map(image)), dtype=np.float64)
    chosen = select_top_k(scores, k_max)
    views = np.stack([augment.apply(bank[a], image) for a in chosen] + [np.asarray(image)])
    probs = model.probas(views)
    return chosen, probs[:-1], float(probs[-1])


def audit_record(image_id, result: TTAResult, label, bank=None) -> str:
    bank = bank or augment.default_bank()
    return json.dumps({
        "image_id": image_id,
        "actions": [bank[a].op for a in result.actions],
        "action_scores": {bank[i].op: round(float(v), 8) for i, v in enumerate(result.action_scores)},
        "fused_score": round(result.score, 10),
        "label": int(label),
    }, sort_keys=True)
