"""Gradient-variance measurement and the training-stability protocol."""

from __future__ import annotations

import dataclasses
import json
import statistics
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .layers import Linear, Norm, VILinear
from .model import ArchSpec, Checkpoint, build, convert_to_abnn
from .train import SGD, TrainConfig, cross_entropy, pretrain

DESIGNATED = {"single": "weights", "vi": "vi_mu", "abnn": "norm"}
STABILITY_METRICS = ("acc", "ece", "aupr", "auroc", "fpr95")


class PooledVariance:
    """Population variance of a stream of arrays, merged chunk by chunk."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64).ravel()
        n = values.size
        if n == 0:
            return
        mu = float(values.mean())
        m2 = float(np.sum((values - mu) ** 2))
        total = self.count + n
        delta = mu - self.mean
        self.m2 += m2 + delta * delta * self.count * n / total
        self.mean += delta * n / total
        self.count = total

    @property
    def variance(self) -> float:
        return self.m2 / self.count if self.count else float("nan")


@dataclass
class GradVarReport:
    kind: str
    designated_group: str
    variances: dict[str, float]
    entries: dict[str, int]
    n_steps: int
    batch_size: int
    seed: int
    protocol: dict = field(default_factory=dict)

    @property
    def variance(self) -> float:
        return self.variances[self.designated_group]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _grad_groups(net) -> dict[str, list[ad.Tensor]]:
    groups: dict[str, list[ad.Tensor]] = {}
    for layer in net.layers:
        if isinstance(layer, VILinear):
            groups.setdefault("vi_mu", []).append(layer.w_mu)
            groups.setdefault("vi_sigma", []).append(layer.w_rho)
        elif isinstance(layer, Linear):
            groups.setdefault("weights", []).append(layer.weight)
        elif isinstance(layer, Norm):
            groups.setdefault("norm", []).extend([layer.gamma, layer.beta])
    return groups


def gradient_variance(
    kind: str,
    dataset: Dataset,
    spec: ArchSpec,
    n_steps: int,
    seed: int,
    batch_size: int = 128,
    alpha: float = 0.01,
    vi_sigma_init: float = 0.01,
    along_trajectory: bool = False,
    lr: float = 0.01,
    checkpoint: Checkpoint | None = None,
) -> GradVarReport:
    """Pool every gradient entry of each parameter group over ``n_steps``
    mini-batches and report the population variance.

    All kinds share the initialization (or ``checkpoint``) and the batch
    sequence; only the stochastic layers differ. Parameters stay fixed
    unless ``along_trajectory`` is set.
    """
    if kind not in DESIGNATED:
        raise ValueError(f"unknown network kind {kind!r}")
    if kind == "vi":
        net = build(spec, seed, variational=True, vi_sigma_init=vi_sigma_init)
    else:
        net = build(spec, seed)
    if checkpoint is not None:
        src = checkpoint.network
        for dst_layer, src_layer in zip(net.layers, src.layers):
            if isinstance(dst_layer, VILinear):
                dst_layer.w_mu.data = src_layer.weight.data.copy()
            elif isinstance(dst_layer, Linear):
                dst_layer.weight.data = src_layer.weight.data.copy()
            elif isinstance(dst_layer, Norm):
                for name in ("gamma", "beta"):
                    getattr(dst_layer, name).data = getattr(src_layer, name).data.copy()
                dst_layer.running_mean = src_layer.running_mean.copy()
                dst_layer.running_var = src_layer.running_var.copy()
    if kind == "abnn":
        net = convert_to_abnn(net, alpha)
        net.set_noise_seeds(seed)
    groups = _grad_groups(net)
    pools = {g: PooledVariance() for g in groups}
    batch_rng = np.random.default_rng([seed, 2])
    noise_rng = np.random.default_rng([seed, 3])
    opt = None
    if along_trajectory:
        opt = SGD(net.trainable_parameters(), TrainConfig(lr=lr, momentum=0.0, weight_decay=0.0))
    x, y = dataset.train.x, dataset.train.y
    order = batch_rng.permutation(len(y))
    pos = 0
    for step in range(n_steps):
        if pos + batch_size > len(y):
            order = batch_rng.permutation(len(y))
            pos = 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        net.zero_grad()
        loss = cross_entropy(net.forward(x[idx], mode="train", rng=noise_rng), y[idx])
        ad.backward(loss)
        for g, tensors in groups.items():
            for t in tensors:
                if t.grad is None or not np.all(np.isfinite(t.grad)):
                    raise FloatingPointError(f"non-finite gradient in group {g!r} at step {step}")
                pools[g].update(t.grad)
        if opt is not None:
            opt.step(0)
    return GradVarReport(
        kind=kind,
        designated_group=DESIGNATED[kind],
        variances={g: p.variance for g, p in pools.items()},
        entries={g: int(np.sum([t.data.size for t in groups[g]])) for g in groups},
        n_steps=n_steps,
        batch_size=batch_size,
        seed=seed,
        protocol={"alpha": alpha, "vi_sigma_init": vi_sigma_init, "along_trajectory": along_trajectory,
                  "lr": lr if along_trajectory else 0.0, "from_checkpoint": checkpoint is not None,
                  "norm_stats": "batch"},
    )


def gradient_variance_suite(cfg, dataset: Dataset, checkpoint: Checkpoint | None = None) -> dict:
    """Run every network kind at every seed of ``cfg.gradvar``.

    Each kind is measured where its own training starts: the single network
    and the VI network at a fresh initialization, the ABNN at a pre-trained
    checkpoint (``checkpoint``, or one pre-trained per seed from
    ``cfg.pretrain``). With ``abnn_start="init"`` every kind uses the
    initialization.
    """
    gv = cfg.gradvar
    runs = []
    for seed in gv.seeds:
        start = None
        if gv.abnn_start == "checkpoint":
            start = checkpoint or pretrain(cfg.arch, dataset, replace(cfg.pretrain, seed=seed))
        for kind in DESIGNATED:
            rep = gradient_variance(
                kind, dataset, cfg.arch, gv.n_steps, seed, gv.batch_size,
                alpha=gv.alpha, vi_sigma_init=gv.vi_sigma_init, along_trajectory=gv.along_trajectory,
                lr=gv.lr, checkpoint=start if kind == "abnn" else None,
            )
            runs.append(rep.to_dict())
    by_seed: dict[int, dict[str, float]] = {}
    for r in runs:
        by_seed.setdefault(r["seed"], {})[r["kind"]] = r["variances"][r["designated_group"]]
    ordering = {str(s): bool(v["abnn"] < v["vi"]) for s, v in by_seed.items()}
    return {
        "abnn_start": gv.abnn_start,
        "runs": runs,
        "abnn_below_vi": ordering,
        "wins": sum(ordering.values()),
        "n_seeds": len(ordering),
    }


# -- stability ------------------------------------------------------------

PROTOCOLS = ("single", "one-ckpt-multi-abnn", "multi-ckpt-abnn")


@dataclass
class StabilityReport:
    protocol: str
    R: int
    seeds: list[int]
    std: dict[str, float]
    runs: list[dict]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n"


def stability_protocol(protocol: str, R: int, base_config, seeds=None, jobs: int = 1) -> StabilityReport:
    """Repeat a training protocol ``R`` times and report the sample standard
    deviation of each metric.

    single: R pre-trained networks; one-ckpt-multi-abnn: one pre-trained
    network, R ABNN fine-tunings; multi-ckpt-abnn: R pre-trained networks,
    one ABNN fine-tuning each. Run ``r`` uses seed ``seeds[r]``.
    """
    from .pipeline import build_dataset, evaluate, run_finetune, run_pretrain

    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if R < 3:
        raise ValueError("R must be >= 3")
    seeds = list(range(R)) if seeds is None else list(seeds)
    if len(seeds) != R:
        raise ValueError("need one seed per run")
    cfg = base_config
    dataset = build_dataset(cfg.dataset)
    shared = run_pretrain(cfg, dataset) if protocol == "one-ckpt-multi-abnn" else None
    runs = []
    for r, s in enumerate(seeds):
        try:
            if protocol == "single":
                ckpt = run_pretrain(cfg.with_pretrain(seed=s), dataset)
                report = evaluate([ckpt.network], dataset, ece_bins=cfg.ece_bins)
            else:
                ckpt = shared if shared is not None else run_pretrain(cfg.with_pretrain(seed=s), dataset)
                modes = run_finetune(cfg.with_finetune(seed=s), ckpt, dataset, jobs)
                report = evaluate(modes, dataset, cfg.ensemble, cfg.ece_bins)
        except RuntimeError as exc:
            raise RuntimeError(f"stability run {r} failed: {exc}") from exc
        runs.append({k: getattr(report, k) for k in STABILITY_METRICS})
    # statistics.stdev is exact for equal values, where np.std leaves rounding residue
    std = {k: float(statistics.stdev(run[k] for run in runs)) for k in STABILITY_METRICS}
    return StabilityReport(protocol, R, seeds, std, runs)
