"""MLP assembly, deterministic-to-ABNN conversion and checkpoint files.

Checkpoint layout (little-endian)::

    b"ABNN" | u32 version | u32 header_len | header (UTF-8 JSON) |
    float64 blob | u32 CRC32 of everything before it
"""

from __future__ import annotations

import copy
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Tensor, no_grad
from .layers import BNL, Activation, Linear, Norm, NormKind, VILinear

FORMAT_VERSION = 1
MAGIC = b"ABNN"

DETERMINISTIC = "deterministic"
ABNN = "abnn"

GROUPS = ("linear_weights", "norm_gamma", "norm_beta", "vi_sigma")


@dataclass(frozen=True)
class HiddenSpec:
    width: int
    norm: NormKind | None = NormKind.BATCH
    activation: str = "relu"


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    hidden: tuple[HiddenSpec, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for h in self.hidden:
            if h.width < 1:
                raise ValueError("hidden widths must be >= 1")
            if h.activation not in ("relu", "gelu", "tanh"):
                raise ValueError(f"unknown activation {h.activation!r}")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": [
                {"width": h.width, "norm": None if h.norm is None else NormKind(h.norm).value,
                 "activation": h.activation}
                for h in self.hidden
            ],
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ArchSpec:
        hidden = tuple(
            HiddenSpec(h["width"], None if h.get("norm") is None else NormKind(h["norm"]),
                       h.get("activation", "relu"))
            for h in d["hidden"]
        )
        return cls(d["input_dim"], hidden, d["num_classes"])


class Network:
    """Ordered layer stack with named parameter groups."""

    def __init__(self, spec: ArchSpec, layers: list, form: str = DETERMINISTIC, seed: int = 0):
        self.spec = spec
        self.layers = layers
        self.form = form
        self.seed = seed
        self.trainable_mask = {g: True for g in GROUPS}

    def forward(
        self,
        x,
        mode: str = "eval",
        rng: np.random.Generator | None = None,
        epsilons: list[np.ndarray] | None = None,
    ) -> Tensor:
        """Logits for ``x``.

        ``rng`` supplies the noise of every stochastic layer, in layer order.
        ``epsilons`` pins the BNL noise explicitly (one vector per BNL).
        """
        h = x if isinstance(x, Tensor) else Tensor(x)
        bnl_index = 0
        for layer in self.layers:
            if isinstance(layer, BNL) and epsilons is not None:
                h = layer.forward(h, mode=mode, epsilon=epsilons[bnl_index])
                bnl_index += 1
            else:
                h = layer.forward(h, mode=mode, rng=rng)
        return h

    __call__ = forward

    def predict_logits(self, x, **kwargs) -> np.ndarray:
        with no_grad():
            return self.forward(x, **kwargs).data

    def norm_layers(self) -> list[Norm]:
        return [layer for layer in self.layers if isinstance(layer, Norm)]

    def bnl_layers(self) -> list[BNL]:
        return [layer for layer in self.layers if isinstance(layer, BNL)]

    def named_parameters(self) -> Iterator[tuple[str, int, str, Tensor]]:
        """Yield (group, layer_index, name, tensor) for every parameter."""
        for i, layer in enumerate(self.layers):
            for name, t in layer.parameters().items():
                yield _group_of(layer, name), i, name, t

    @property
    def param_groups(self) -> dict[str, list[Tensor]]:
        groups: dict[str, list[Tensor]] = {}
        for group, _, _, t in self.named_parameters():
            groups.setdefault(group, []).append(t)
        return groups

    def parameters(self) -> list[Tensor]:
        return [t for _, _, _, t in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [t for g, _, _, t in self.named_parameters() if self.trainable_mask[g]]

    def num_parameters(self, trainable_only: bool = False) -> int:
        params = self.trainable_parameters() if trainable_only else self.parameters()
        return int(np.sum([t.data.size for t in params]))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def clone(self) -> Network:
        return copy.deepcopy(self)

    def set_alpha(self, alpha: float) -> None:
        for layer in self.bnl_layers():
            layer.alpha = float(alpha)

    def set_noise_seeds(self, seed: int) -> None:
        for j, layer in enumerate(self.bnl_layers()):
            layer.noise_seed = int(np.random.SeedSequence([seed, j]).generate_state(1)[0])
            layer.calls = 0


def _group_of(layer, name: str) -> str:
    if isinstance(layer, Norm):
        return "norm_gamma" if name == "gamma" else "norm_beta"
    if isinstance(layer, VILinear):
        return "linear_weights" if name == "w_mu" else "vi_sigma"
    return "linear_weights"


def build(spec: ArchSpec, seed: int, variational: bool = False, vi_sigma_init: float = 0.01) -> Network:
    """Deterministic MLP: [Linear -> Norm -> activation]* -> Linear.

    He-uniform weights from ``seed``; gamma = 1, beta = 0. With
    ``variational`` the linear layers are Gaussian-weight ``VILinear``
    layers whose means get the same initialization.
    """
    if not isinstance(spec, ArchSpec):
        raise TypeError("spec must be an ArchSpec")
    rng = np.random.default_rng(seed)
    layers: list = []
    fan_in = spec.input_dim

    def linear(n_in, n_out, k):
        if variational:
            return VILinear(n_in, n_out, rng, vi_sigma_init, noise_seed=_derive(seed, 1000 + k))
        return Linear(n_in, n_out, rng)

    for k, h in enumerate(spec.hidden):
        layers.append(linear(fan_in, h.width, k))
        if h.norm is not None:
            layers.append(Norm(h.width, h.norm))
        layers.append(Activation(h.activation))
        fan_in = h.width
    layers.append(linear(fan_in, spec.num_classes, len(spec.hidden)))
    return Network(spec, layers, DETERMINISTIC, seed)


def _derive(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


class ConversionError(ValueError):
    pass


def convert_to_abnn(net: Network, alpha: float = 0.01, train_all: bool = False) -> Network:
    """Replace every normalization layer with a BNL carrying the same
    gamma, beta and running statistics; only norm groups stay trainable."""
    if net.form != DETERMINISTIC:
        raise ConversionError("network is already an ABNN")
    if not net.norm_layers():
        raise ConversionError("ABNN requires normalization layers")
    out = net.clone()
    j = 0
    for i, layer in enumerate(out.layers):
        if isinstance(layer, Norm):
            out.layers[i] = BNL.from_norm(layer, alpha, noise_seed=_derive(net.seed, j))
            j += 1
    out.form = ABNN
    out.trainable_mask = {g: train_all or g in ("norm_gamma", "norm_beta") for g in GROUPS}
    return out


# -- checkpoints ----------------------------------------------------------


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    """Truncated or structurally malformed file."""


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    network: Network
    metadata: dict = field(default_factory=dict)

    @property
    def rng_seed(self) -> int:
        return self.network.seed


def _layer_records(net: Network) -> list[dict]:
    records = []
    for layer in net.layers:
        if isinstance(layer, BNL):
            records.append({"type": "bnl", "alpha": layer.alpha, "noise_seed": layer.noise_seed,
                            "calls": layer.calls, "kind": layer.kind.value,
                            "eps_stability": layer.eps_stability, "momentum": layer.momentum})
        elif isinstance(layer, Norm):
            records.append({"type": "norm", "kind": layer.kind.value,
                            "eps_stability": layer.eps_stability, "momentum": layer.momentum})
        elif isinstance(layer, VILinear):
            records.append({"type": "vi_linear", "noise_seed": layer.noise_seed, "calls": layer.calls})
        elif isinstance(layer, Linear):
            records.append({"type": "linear"})
        else:
            records.append({"type": "activation", "name": layer.name})
    return records


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    net = ckpt.network
    arrays: list[np.ndarray] = []
    entries = []
    offset = 0
    for i, layer in enumerate(net.layers):
        items = [(n, t.data) for n, t in layer.parameters().items()]
        if isinstance(layer, Norm):
            items += list(layer.buffers().items())
        for name, arr in items:
            entries.append({"layer": i, "name": name, "offset": offset, "shape": list(arr.shape)})
            arrays.append(np.ascontiguousarray(arr, dtype="<f8").reshape(-1))
            offset += arr.size
    blob = np.concatenate(arrays).tobytes() if arrays else b""
    header = {
        "spec": net.spec.to_dict(),
        "form": net.form,
        "rng_seed": int(net.seed),
        "layers": _layer_records(net),
        "tensors": entries,
        "trainable_mask": net.trainable_mask,
        "blob_floats": offset,
        "metadata": ckpt.metadata,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + blob
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < 12:
        raise CheckpointIntegrityError("file too short for a checkpoint preamble")
    if raw[:4] != MAGIC:
        raise CheckpointIntegrityError("bad magic bytes")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if len(raw) < 12 + hlen + 4:
        raise CheckpointIntegrityError("truncated checkpoint header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"unreadable header: {exc}") from None
    n_floats = header["blob_floats"]
    expected = 12 + hlen + 8 * n_floats + 4
    if len(raw) != expected:
        raise CheckpointIntegrityError(f"checkpoint has {len(raw)} bytes, expected {expected}")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointChecksumError("CRC32 mismatch")
    blob = np.frombuffer(raw[12 + hlen:-4], dtype="<f8").astype(np.float64)

    spec = ArchSpec.from_dict(header["spec"])
    layers: list = []
    dummy = np.random.default_rng(0)
    widths = [spec.input_dim] + [h.width for h in spec.hidden] + [spec.num_classes]
    lin = 0
    for rec in header["layers"]:
        t = rec["type"]
        if t in ("linear", "vi_linear"):
            n_in, n_out = widths[lin], widths[lin + 1]
            lin += 1
            if t == "linear":
                layers.append(Linear(n_in, n_out, dummy))
            else:
                layer = VILinear(n_in, n_out, dummy, noise_seed=rec["noise_seed"])
                layer.calls = rec["calls"]
                layers.append(layer)
        elif t == "norm":
            layers.append(Norm(widths[lin], rec["kind"], rec["eps_stability"], rec["momentum"]))
        elif t == "bnl":
            layer = BNL(widths[lin], rec["kind"], rec["alpha"], rec["eps_stability"],
                        rec["momentum"], rec["noise_seed"])
            layer.calls = rec["calls"]
            layers.append(layer)
        else:
            layers.append(Activation(rec["name"]))
    for e in header["tensors"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = blob[e["offset"]:e["offset"] + size].reshape(e["shape"]).copy()
        layer = layers[e["layer"]]
        if e["name"] in ("running_mean", "running_var"):
            setattr(layer, e["name"], arr)
        else:
            getattr(layer, e["name"]).data = arr
    net = Network(spec, layers, header["form"], header["rng_seed"])
    net.trainable_mask = dict(header["trainable_mask"])
    return Checkpoint(net, header["metadata"])


def save(ckpt: Checkpoint | Network, path) -> None:
    if isinstance(ckpt, Network):
        ckpt = Checkpoint(ckpt)
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())
