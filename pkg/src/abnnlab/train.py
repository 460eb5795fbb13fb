"""Losses, momentum SGD, pre-training and ABNN fine-tuning."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .model import ABNN, DETERMINISTIC, ArchSpec, Checkpoint, Network, build, convert_to_abnn

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = ()
    gamma_lr: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")


@dataclass(frozen=True)
class RandomPrior:
    """Per-class binary loss weights, fixed for one mode's fine-tuning."""

    eta: tuple[int, ...]
    bernoulli_p: float
    seed: int

    @classmethod
    def sample(cls, num_classes: int, p: float, seed: int) -> RandomPrior:
        if not 0 <= p <= 1:
            raise ValueError("bernoulli_p must lie in [0, 1]")
        rng = np.random.default_rng(seed)
        eta = (rng.random(num_classes) < p).astype(int)
        return cls(tuple(int(e) for e in eta), float(p), int(seed))

    @classmethod
    def off(cls, num_classes: int) -> RandomPrior:
        return cls((0,) * num_classes, 0.0, 0)

    def weights(self) -> np.ndarray:
        return np.asarray(self.eta, dtype=np.float64)


@dataclass
class ModeSet:
    """M networks sharing one architecture, with the prior each was tuned with."""

    modes: list[Network]
    priors: list[RandomPrior] = field(default_factory=list)

    def __post_init__(self):
        if not self.modes:
            raise ValueError("a ModeSet needs at least one mode")
        spec = self.modes[0].spec
        if any(m.spec != spec for m in self.modes):
            raise ValueError("all modes must share one architecture")

    def __len__(self) -> int:
        return len(self.modes)

    @property
    def spec(self) -> ArchSpec:
        return self.modes[0].spec


# -- losses ---------------------------------------------------------------


def _check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes})")
    return labels


def per_sample_ce(logits: Tensor, labels) -> Tensor:
    labels = _check_labels(labels, logits.shape[1])
    return -ad.pick(ad.log_softmax(logits, axis=1), labels)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return ad.mean(per_sample_ce(logits, labels))


def map_loss(net: Network, x, y, **forward_kwargs) -> Tensor:
    """Mean cross-entropy. The Gaussian weight prior is applied as decoupled
    weight decay in ``SGD.step``, not here."""
    return cross_entropy(net.forward(x, **forward_kwargs), y)


def random_prior_term(logits: Tensor, labels, prior: RandomPrior) -> Tensor:
    labels = _check_labels(labels, logits.shape[1])
    eta = Tensor(prior.weights()[labels])
    return ad.mean(eta * per_sample_ce(logits, labels))


def random_prior_loss(net: Network, x, y, prior: RandomPrior, **forward_kwargs) -> Tensor:
    """Mean over the batch of ``eta[y] * CE``."""
    return random_prior_term(net.forward(x, **forward_kwargs), y, prior)


def total_loss(logits: Tensor, labels, prior: RandomPrior) -> Tensor:
    """Cross-entropy plus the random-prior perturbation on one forward pass."""
    ce = per_sample_ce(logits, labels)
    eta = Tensor(prior.weights()[np.asarray(labels, dtype=np.int64)])
    return ad.mean(ce) + ad.mean(eta * ce)


# -- optimizer ------------------------------------------------------------


class SGD:
    """Momentum SGD with decoupled weight decay and a multistep schedule.

    ``v <- momentum * v + g``; ``w <- w - lr * v - lr * weight_decay * w``.
    """

    def __init__(self, params: list[Tensor], config: TrainConfig):
        self.params = params
        self.config = config
        self.velocity = [np.zeros_like(p.data) for p in params]

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.config.milestones if epoch >= m)
        return self.config.lr * self.config.gamma_lr**passed

    def step(self, epoch: int) -> None:
        c = self.config
        lr = self.lr_at(epoch)
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"missing gradient for trainable parameter {i} {p.shape}")
        for p, v in zip(self.params, self.velocity):
            v *= c.momentum
            v += p.grad
            p.data = p.data - lr * v - lr * c.weight_decay * p.data

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(net: Network, optimizer: SGD, epoch: int) -> None:
    optimizer.step(epoch)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        # a lone trailing sample cannot feed batch statistics
        if len(idx) >= 2 or n == 1:
            yield idx


class _DivergenceGuard:
    """Abort on a non-finite loss, or on an epoch loss above ``10 x`` the
    first batch loss (and above chance level ``ln C``) three epochs running."""

    def __init__(self, label: str, chance: float):
        self.label = label
        self.chance = chance
        self.initial: float | None = None
        self.strikes = 0

    def batch(self, value: float, epoch: int) -> None:
        if not np.isfinite(value):
            raise TrainingDivergedError(f"{self.label}: non-finite loss at epoch {epoch}")
        if self.initial is None:
            self.initial = value

    def epoch(self, value: float, epoch: int) -> None:
        if self.initial is not None and value > max(10.0 * self.initial, self.chance):
            self.strikes += 1
            if self.strikes >= 3:
                raise TrainingDivergedError(
                    f"{self.label}: loss above 10x its initial value for 3 epochs (epoch {epoch})"
                )
        else:
            self.strikes = 0


def _fit(
    net: Network,
    dataset: Dataset,
    config: TrainConfig,
    rng: np.random.Generator,
    prior: RandomPrior | None,
    mode: str,
    label: str,
) -> list[float]:
    opt = SGD(net.trainable_parameters(), config)
    guard = _DivergenceGuard(label, float(np.log(net.spec.num_classes)))
    x, y = dataset.train.x, dataset.train.y
    curve = []
    for epoch in range(config.epochs):
        losses, sizes = [], []
        for idx in _batches(len(y), config.batch_size, rng):
            opt.zero_grad()
            logits = net.forward(x[idx], mode=mode, rng=rng)
            loss = cross_entropy(logits, y[idx]) if prior is None else total_loss(logits, y[idx], prior)
            guard.batch(loss.item(), epoch)
            ad.backward(loss)
            opt.step(epoch)
            losses.append(loss.item())
            sizes.append(len(idx))
        epoch_loss = float(np.average(losses, weights=sizes))
        guard.batch(epoch_loss, epoch)
        guard.epoch(epoch_loss, epoch)
        curve.append(epoch_loss)
        log.debug("%s epoch %d loss %.6f", label, epoch, epoch_loss)
    return curve


def pretrain(spec: ArchSpec, dataset: Dataset, config: TrainConfig) -> Checkpoint:
    """Train a deterministic network with the MAP objective."""
    net = build(spec, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    curve = _fit(net, dataset, config, rng, None, "train", "pretrain")
    meta = {"stage": "pretrain", "epochs": config.epochs, "lr": config.lr, "loss_curve": curve}
    return Checkpoint(net, meta)


def mode_seed(seed: int, mode_index: int) -> int:
    return int(np.random.SeedSequence([seed, 7919, mode_index]).generate_state(1)[0])


def _finetune_one(args) -> tuple[Network, list[float]]:
    net, dataset, config, prior, m, stat_mode = args
    rng = np.random.default_rng([mode_seed(config.seed, m), 1])
    curve = _fit(net, dataset, config, rng, prior, stat_mode, f"mode {m}")
    return net, curve


def finetune_abnn(
    ckpt: Checkpoint | Network,
    dataset: Dataset,
    config: TrainConfig,
    M: int,
    prior_p: float = 0.5,
    alpha: float = 0.01,
    train_all: bool = False,
    update_running_stats: bool = False,
    jobs: int = 1,
) -> ModeSet:
    """Convert once, clone ``M`` times and fine-tune each clone with its own
    random prior, data order and BNL noise stream.

    Running statistics stay frozen (eval-mode batch norm) unless
    ``update_running_stats`` is set.
    """
    net = ckpt.network if isinstance(ckpt, Checkpoint) else ckpt
    if M < 1:
        raise ValueError("M must be >= 1")
    if net.form != DETERMINISTIC:
        raise ValueError("fine-tuning starts from a deterministic checkpoint")
    base = convert_to_abnn(net, alpha, train_all)
    stat_mode = "train" if update_running_stats else "eval"
    jobs_args = []
    priors = []
    for m in range(M):
        seed = mode_seed(config.seed, m)
        prior = RandomPrior.sample(net.spec.num_classes, prior_p, seed)
        mode = base.clone()
        mode.set_noise_seeds(seed)
        priors.append(prior)
        jobs_args.append((mode, dataset, config, prior, m, stat_mode))
    if jobs > 1 and M > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, M)) as pool:
            results = list(pool.map(_finetune_one, jobs_args))
    else:
        results = [_finetune_one(a) for a in jobs_args]
    modes = []
    for m, (mode, curve) in enumerate(results):
        mode.form = ABNN
        modes.append(mode)
        log.info("mode %d fine-tuned, final loss %s", m, curve[-1] if curve else None)
    return ModeSet(modes, priors)
