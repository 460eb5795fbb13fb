"""Layers for bias-free MLPs with normalization.

The Bayesian normalization layer (``BNL``) standardizes its input exactly
like the deterministic ``Norm`` and then scales by ``gamma * (1 + alpha*eps)``
with ``eps`` drawn from a standard normal once per forward call and shared by
every sample of the batch.
"""

from __future__ import annotations

import enum
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

Mode = Literal["train", "eval"]


class NormKind(str, enum.Enum):
    BATCH = "batch"
    LAYER = "layer"
    # Instance norm over 2-D activations reduces over features per sample,
    # which is exactly layer norm.
    INSTANCE = "instance"


class BatchTooSmallError(ValueError):
    pass


class Linear:
    """``y = x @ W.T`` with ``W`` of shape (out, in); no bias."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        bound = np.sqrt(6.0 / in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(out_features, in_features)), True)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight}

    def forward(self, x: Tensor, **_) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear: input shape {x.shape} vs weight shape {self.weight.shape}")
        return ad.matmul(x, ad.transpose(self.weight))


class VILinear:
    """Reparametrized Gaussian-weight linear layer, ``W = W_mu + E * W_sigma``.

    ``W_sigma = softplus(w_rho)`` so the standard deviation is positive by
    construction.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        sigma_init: float = 0.01,
        noise_seed: int = 0,
    ):
        bound = np.sqrt(6.0 / in_features)
        self.w_mu = Tensor(rng.uniform(-bound, bound, size=(out_features, in_features)), True)
        rho = np.log(np.expm1(sigma_init))
        self.w_rho = Tensor(np.full((out_features, in_features), rho), True)
        self.noise_seed = noise_seed
        self.calls = 0

    @property
    def in_features(self) -> int:
        return self.w_mu.shape[1]

    @property
    def out_features(self) -> int:
        return self.w_mu.shape[0]

    @property
    def w_sigma(self) -> np.ndarray:
        return np.logaddexp(0.0, self.w_rho.data)

    def parameters(self) -> dict[str, Tensor]:
        return {"w_mu": self.w_mu, "w_rho": self.w_rho}

    def sample_noise(self, rng: np.random.Generator | None = None) -> np.ndarray:
        if rng is None:
            rng = np.random.default_rng([self.noise_seed, self.calls])
            self.calls += 1
        return rng.standard_normal(self.w_mu.shape)

    def forward(self, x: Tensor, rng: np.random.Generator | None = None, noise=None, **_) -> Tensor:
        if noise is None:
            noise = self.sample_noise(rng)
        return vi_linear_forward(x, self, noise)


def vi_linear_forward(x: Tensor, layer: VILinear, noise: np.ndarray) -> Tensor:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != layer.w_mu.shape:
        raise ShapeError(f"vi_linear: noise shape {noise.shape} vs weight shape {layer.w_mu.shape}")
    if x.shape[-1] != layer.in_features:
        raise ShapeError(f"vi_linear: input shape {x.shape} vs weight shape {layer.w_mu.shape}")
    weight = layer.w_mu + Tensor(noise) * ad.softplus(layer.w_rho)
    return ad.matmul(x, ad.transpose(weight))


class Activation:
    _FUNCS = {"relu": ad.relu, "gelu": ad.gelu, "tanh": ad.tanh}

    def __init__(self, name: str):
        if name not in self._FUNCS:
            raise ValueError(f"unknown activation {name!r}")
        self.name = name

    def parameters(self) -> dict[str, Tensor]:
        return {}

    def forward(self, x: Tensor, **_) -> Tensor:
        return self._FUNCS[self.name](x)


class Norm:
    """Batch, layer or instance normalization with affine ``gamma``/``beta``."""

    def __init__(
        self,
        features: int,
        kind: NormKind | str,
        eps_stability: float = 1e-5,
        momentum: float = 0.1,
    ):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if eps_stability < 0.0:
            raise ValueError("eps_stability must be non-negative")
        self.kind = NormKind(kind)
        self.gamma = Tensor(np.ones(features), True)
        self.beta = Tensor(np.zeros(features), True)
        self.eps_stability = eps_stability
        self.momentum = momentum
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)

    @property
    def features(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x: Tensor, mode: Mode = "eval", **_) -> Tensor:
        return norm_forward(x, self, mode)


def _standardize(x: Tensor, p: Norm, mode: Mode) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] != p.features:
        raise ShapeError(f"norm: input shape {x.shape} vs {p.features} features")
    if p.kind is NormKind.BATCH:
        if mode == "eval":
            mu = Tensor(p.running_mean)
            sigma = Tensor(np.sqrt(p.running_var + p.eps_stability))
            return (x - mu) / sigma
        if x.shape[0] < 2:
            raise BatchTooSmallError("batch too small for batch statistics")
        mu = ad.mean(x, axis=0)
        v = ad.var(x, axis=0)
        m = p.momentum
        p.running_mean = (1.0 - m) * p.running_mean + m * mu.data
        p.running_var = (1.0 - m) * p.running_var + m * v.data
        return (x - mu) / ad.sqrt(v + p.eps_stability)
    mu = ad.mean(x, axis=1, keepdims=True)
    v = ad.var(x, axis=1, keepdims=True)
    return (x - mu) / ad.sqrt(v + p.eps_stability)


def norm_forward(x: Tensor, p: Norm, mode: Mode = "eval") -> Tensor:
    """``(x - mean) / std * gamma + beta`` with statistics chosen by ``p.kind``.

    Batch kind in train mode uses batch statistics and updates the running
    estimates; in eval mode it uses the running estimates.
    """
    return _standardize(x, p, mode) * p.gamma + p.beta


class BNL(Norm):
    """Normalization whose scale is perturbed by Gaussian noise."""

    def __init__(
        self,
        features: int,
        kind: NormKind | str,
        alpha: float = 0.01,
        eps_stability: float = 1e-5,
        momentum: float = 0.1,
        noise_seed: int = 0,
    ):
        super().__init__(features, kind, eps_stability, momentum)
        if not np.isfinite(alpha) or alpha < 0:
            raise ValueError("alpha must be finite and non-negative")
        self.alpha = float(alpha)
        self.noise_seed = noise_seed
        self.calls = 0

    @classmethod
    def from_norm(cls, norm: Norm, alpha: float = 0.01, noise_seed: int = 0) -> BNL:
        layer = cls(norm.features, norm.kind, alpha, norm.eps_stability, norm.momentum, noise_seed)
        layer.gamma = Tensor(norm.gamma.data.copy(), True)
        layer.beta = Tensor(norm.beta.data.copy(), True)
        layer.running_mean = norm.running_mean.copy()
        layer.running_var = norm.running_var.copy()
        return layer

    def sample_epsilon(self, rng: np.random.Generator | None = None) -> np.ndarray:
        """Draw one noise vector; without ``rng`` the draw is keyed by
        (noise_seed, call index) so it can be replayed."""
        if rng is None:
            rng = np.random.default_rng([self.noise_seed, self.calls])
            self.calls += 1
        return rng.standard_normal(self.features)

    def forward(
        self,
        x: Tensor,
        mode: Mode = "eval",
        rng: np.random.Generator | None = None,
        epsilon: np.ndarray | None = None,
        **_,
    ) -> Tensor:
        if epsilon is None:
            epsilon = self.sample_epsilon(rng)
        return bnl_forward(x, self, epsilon, mode)


def bnl_forward(x: Tensor, p: BNL, epsilon: np.ndarray, mode: Mode = "eval") -> Tensor:
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if epsilon.shape != (p.features,):
        raise ShapeError(f"bnl: epsilon shape {epsilon.shape} vs {p.features} features")
    # eps is a constant for differentiation; at eps == 0 the scale is gamma * 1.0,
    # which keeps the result bit-identical to norm_forward.
    scale = p.gamma * Tensor(1.0 + p.alpha * epsilon)
    return _standardize(x, p, mode) * scale + p.beta
