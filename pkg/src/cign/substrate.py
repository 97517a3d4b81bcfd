"""Small differentiable compute layer used by every network in the package.

Tensors are ``torch.Tensor`` objects in NCHW layout. Only the fixed layer set
needed by the tree networks is supported: conv2d, maxpool, relu,
fully_connected, dropout and flatten. Gradients come from torch autograd and
the optimizer is plain SGD with momentum and tag-dependent L2 decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import torch
import torch.nn.functional as F


class ConfigurationError(ValueError):
    """Invalid layer, shape or optimizer configuration."""


class NonFiniteError(FloatingPointError):
    """A tensor picked up NaN or Inf values."""


LAYER_KINDS = ("conv2d", "maxpool", "relu", "fully_connected", "dropout", "flatten")
TAGS = ("F", "H")

INIT_STD = 0.1


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 0
    filters: int = 0
    stride: int = 1
    padding: str = "same"
    units: int = 0
    p: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (self.kernel < 1 or self.filters < 1):
            raise ConfigurationError("conv2d needs kernel >= 1 and filters >= 1")
        if self.kind in ("conv2d", "maxpool"):
            if self.stride < 1:
                raise ConfigurationError(f"{self.kind} stride must be >= 1")
            if self.padding not in ("same", "valid"):
                raise ConfigurationError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.kind == "maxpool" and self.kernel < 1:
            raise ConfigurationError("maxpool needs kernel >= 1")
        if self.kind == "fully_connected" and self.units < 1:
            raise ConfigurationError("fully_connected needs units >= 1")
        if self.kind == "dropout" and not 0.0 <= self.p < 1.0:
            raise ConfigurationError(f"drop probability must be in [0, 1), got {self.p}")

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "conv2d":
            out.update(kernel=self.kernel, filters=self.filters, stride=self.stride, padding=self.padding)
        elif self.kind == "maxpool":
            out.update(kernel=self.kernel, stride=self.stride, padding=self.padding)
        elif self.kind == "fully_connected":
            out.update(units=self.units)
        elif self.kind == "dropout":
            out.update(p=self.p)
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        return cls(**d)


def conv2d(kernel: int, filters: int, stride: int = 1, padding: str = "same") -> LayerSpec:
    return LayerSpec("conv2d", kernel=kernel, filters=filters, stride=stride, padding=padding)


def maxpool(kernel: int = 2, stride: int = 2, padding: str = "valid") -> LayerSpec:
    return LayerSpec("maxpool", kernel=kernel, stride=stride, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def fully_connected(units: int) -> LayerSpec:
    return LayerSpec("fully_connected", units=units)


def dropout(p: float) -> LayerSpec:
    return LayerSpec("dropout", p=p)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def output_shape(layer: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape; ``in_shape`` excludes the batch axis."""
    if layer.kind in ("relu", "dropout"):
        return tuple(in_shape)
    if layer.kind == "flatten":
        return (math.prod(in_shape),)
    if layer.kind == "fully_connected":
        if len(in_shape) != 1:
            raise ConfigurationError(f"fully_connected expects a flat input, got shape {in_shape}")
        return (layer.units,)
    if len(in_shape) != 3:
        raise ConfigurationError(f"{layer.kind} expects a (C, H, W) input, got shape {in_shape}")
    c, h, w = in_shape
    k, s = layer.kernel, layer.stride
    if layer.padding == "same":
        oh, ow = math.ceil(h / s), math.ceil(w / s)
    else:
        if h < k or w < k:
            raise ConfigurationError(f"{layer.kind} kernel {k} larger than input {h}x{w}")
        oh, ow = (h - k) // s + 1, (w - k) // s + 1
    return (layer.filters if layer.kind == "conv2d" else c, oh, ow)


def parameter_shapes(layer: LayerSpec, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    if layer.kind == "conv2d":
        return {
            "weight": (layer.filters, in_shape[0], layer.kernel, layer.kernel),
            "bias": (layer.filters,),
        }
    if layer.kind == "fully_connected":
        output_shape(layer, in_shape)
        return {"weight": (layer.units, in_shape[0]), "bias": (layer.units,)}
    return {}


@dataclass
class Parameter:
    value: torch.Tensor
    tag: str
    decay: bool = True
    grad: torch.Tensor | None = None
    momentum: torch.Tensor | None = None

    def __post_init__(self) -> None:
        if self.tag not in TAGS:
            raise ConfigurationError(f"parameter tag must be one of {TAGS}, got {self.tag!r}")
        if self.momentum is None:
            self.momentum = torch.zeros_like(self.value)

    @property
    def size(self) -> int:
        return self.value.numel()


@dataclass
class ParameterSet:
    """Named parameters, each tagged as a classification (F) or router (H) weight."""

    params: dict[str, Parameter] = field(default_factory=dict)

    def add(self, name: str, param: Parameter) -> None:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        self.params[name] = param

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def values(self):
        return self.params.values()

    def count(self, tag: str | None = None, prefix: str | None = None) -> int:
        return sum(
            p.size
            for name, p in self.params.items()
            if (tag is None or p.tag == tag) and (prefix is None or name.startswith(prefix))
        )

    def tensors(self) -> list[torch.Tensor]:
        return [p.value for p in self.params.values()]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, "torch.Tensor"]:
        return {name: p.value.detach().clone() for name, p in self.params.items()}

    def load_arrays(self, arrays: Mapping[str, object]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ConfigurationError(
                f"parameter names do not match: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        with torch.no_grad():
            for name, p in self.params.items():
                src = torch.as_tensor(arrays[name], dtype=p.value.dtype)
                if tuple(src.shape) != tuple(p.value.shape):
                    raise ConfigurationError(
                        f"shape mismatch for {name}: {tuple(src.shape)} vs {tuple(p.value.shape)}"
                    )
                p.value.copy_(src)
                p.momentum.zero_()


def init_layer_params(
    layer: LayerSpec,
    in_shape: tuple[int, ...],
    prefix: str,
    tag: str,
    params: ParameterSet,
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> tuple[int, ...]:
    """Create the layer's parameters in ``params`` and return its output shape.

    Weights are drawn from a normal truncated at two standard deviations
    (std 0.1), biases start at zero and are excluded from weight decay.
    """
    out = output_shape(layer, in_shape)
    for pname, shape in parameter_shapes(layer, in_shape).items():
        t = torch.empty(shape, dtype=dtype)
        if pname == "weight":
            torch.nn.init.trunc_normal_(
                t, mean=0.0, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator
            )
            decay = True
        else:
            t.zero_()
            decay = False
        t.requires_grad_(True)
        params.add(f"{prefix}.{pname}", Parameter(t, tag=tag, decay=decay))
    return out


def _same_pad(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def forward_layer(
    layer: LayerSpec,
    x: torch.Tensor,
    params: ParameterSet | None = None,
    prefix: str = "",
    mode: str = "train",
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Apply one layer to a batch ``x`` (batch axis first)."""
    if mode not in ("train", "eval"):
        raise ConfigurationError(f"mode must be 'train' or 'eval', got {mode!r}")
    kind = layer.kind
    if kind == "relu":
        return torch.relu(x)
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if kind == "dropout":
        if mode == "eval" or layer.p == 0.0:
            return x
        keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= layer.p
        return x * keep.to(x.dtype) / (1.0 - layer.p)
    if kind == "fully_connected":
        w, b = params[f"{prefix}.weight"].value, params[f"{prefix}.bias"].value
        if x.dim() != 2 or x.shape[1] != w.shape[1]:
            raise ConfigurationError(
                f"fully_connected {prefix!r} expects (N, {w.shape[1]}), got {tuple(x.shape)}"
            )
        return F.linear(x, w, b)
    if x.dim() != 4:
        raise ConfigurationError(f"{kind} {prefix!r} expects (N, C, H, W), got {tuple(x.shape)}")
    k, s = layer.kernel, layer.stride
    if layer.padding == "same":
        ph = _same_pad(x.shape[2], k, s)
        pw = _same_pad(x.shape[3], k, s)
        if any(ph + pw):
            fill = 0.0 if kind == "conv2d" else float("-inf")
            x = F.pad(x, (pw[0], pw[1], ph[0], ph[1]), value=fill)
    if kind == "maxpool":
        return F.max_pool2d(x, kernel_size=k, stride=s)
    w, b = params[f"{prefix}.weight"].value, params[f"{prefix}.bias"].value
    if x.shape[1] != w.shape[1]:
        raise ConfigurationError(f"conv2d {prefix!r} expects {w.shape[1]} channels, got {x.shape[1]}")
    return F.conv2d(x, w, b, stride=s)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return t


def backward(loss: torch.Tensor, params: ParameterSet) -> None:
    """Fill every parameter's gradient slot with d(loss)/d(param).

    Parameters the loss does not reach get an exact zero gradient.
    """
    if loss.dim() != 0:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    tensors = params.tensors()
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    else:
        grads = [None] * len(tensors)
    for p, g in zip(params.values(), grads):
        p.grad = torch.zeros_like(p.value) if g is None else g.detach()


def sgd_step(
    params: ParameterSet,
    lr: float,
    momentum: float = 0.9,
    weight_decay_by_tag: Mapping[str, float] | None = None,
) -> None:
    """v <- momentum*v + grad + 2*lambda*w ; w <- w - lr*v ; clears gradients."""
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    decay = dict(weight_decay_by_tag or {})
    with torch.no_grad():
        for name, p in params.items():
            if p.grad is None:
                raise ValueError(f"gradient for {name!r} not populated; call backward first")
            g = p.grad
            lam = decay.get(p.tag, 0.0)
            if p.decay and lam:
                g = g + 2.0 * lam * p.value
            p.momentum.mul_(momentum).add_(g)
            p.value.sub_(lr * p.momentum)
            p.grad = None
