"""Ensemble prediction over modes x noise draws and the entropy-based
uncertainty decomposition."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad
from .train import ModeSet


@dataclass(frozen=True)
class EnsembleConfig:
    L: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")


@dataclass
class PredictiveBundle:
    member_logits: np.ndarray  # (M*L, n, C), member index = m*L + l
    member_probs: np.ndarray
    mean_probs: np.ndarray

    @property
    def n_members(self) -> int:
        return self.member_probs.shape[0]


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def bundle_from_probs(member_probs) -> PredictiveBundle:
    member_probs = np.asarray(member_probs, dtype=np.float64)
    if member_probs.ndim != 3 or member_probs.shape[0] < 1:
        raise ValueError("member_probs must have shape (members, n, classes)")
    mean = member_probs[0].copy()
    for p in member_probs[1:]:
        mean += p
    mean /= member_probs.shape[0]
    return PredictiveBundle(np.log(np.maximum(member_probs, 1e-300)), member_probs, mean)


def predict(modes: ModeSet | list, x, cfg: EnsembleConfig) -> PredictiveBundle:
    """Average the softmax of every (mode, draw) member.

    Draw ``l`` of mode ``m`` takes its BNL noise from a generator seeded with
    ``(cfg.seed, m, l)``; members are summed in a fixed order.
    """
    networks = modes.modes if isinstance(modes, ModeSet) else list(modes)
    if not networks:
        raise ValueError("empty ModeSet")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != networks[0].spec.input_dim:
        raise ValueError(f"input shape {x.shape} does not match input_dim {networks[0].spec.input_dim}")
    logits = []
    with no_grad():
        for m, net in enumerate(networks):
            for l in range(cfg.L):
                rng = np.random.default_rng([cfg.seed, m, l])
                logits.append(net.forward(x, mode="eval", rng=rng).data)
    member_logits = np.stack(logits)
    member_probs = _softmax(member_logits)
    mean = member_probs[0].copy()
    for p in member_probs[1:]:
        mean += p
    mean /= member_probs.shape[0]
    return PredictiveBundle(member_logits, member_probs, mean)


def entropy(probs) -> float:
    """Shannon entropy in nats, with 0 log 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probabilities must be non-negative")
    if abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("probabilities must sum to 1")
    return float(_entropy_rows(p[None, :])[0])


def _entropy_rows(p: np.ndarray) -> np.ndarray:
    safe = np.where(p > 0, p, 1.0)
    return -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=-1)


def mutual_information(bundle: PredictiveBundle) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample (total, aleatoric, epistemic) uncertainty.

    total = H(mean prediction); aleatoric = mean member entropy;
    epistemic = total - aleatoric (the mutual information).
    """
    total = _entropy_rows(bundle.mean_probs)
    aleatoric = np.mean(_entropy_rows(bundle.member_probs), axis=0)
    return total, aleatoric, total - aleatoric


def export_logits_csv(bundle: PredictiveBundle, path) -> None:
    """Rows ``sample_id,member_id,logit_0..logit_{C-1}``."""
    k, n, c = bundle.member_logits.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "member_id"] + [f"logit_{j}" for j in range(c)])
        for i in range(n):
            for m in range(k):
                w.writerow([i, m] + [repr(float(v)) for v in bundle.member_logits[m, i]])
