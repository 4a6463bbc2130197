"""Adaptive vision transformer: ViT backbone with ensemble adapters and FWT layers.

Block layout (pre-norm)::

    x = x + E1(Attn(LN(x)))     E1, E2: ensemble adapter modules
    x = x + E2(MLP(LN(x)))
    x = FWT(x)                   train-time only

Linear weights are stored as ``(in, out)`` so a layer is ``x @ W + b``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .tensor import Tensor

PARAM_GROUPS = ("backbone", "adapters", "fwt", "head")


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_hidden: int = 128
    head_hidden: int = 32
    adapter_in: int = 64
    adapter_bottleneck: int = 8
    ensemble_size: int = 2
    fwt_enabled: bool = True
    # softplus(-3) ~ 0.05; at D=64 the paper preset's 0.3/0.5 noise swamps the features
    fwt_init_alpha: float = -3.0
    fwt_init_beta: float = -3.0
    num_classes: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.adapter_in != self.embed_dim:
            raise ConfigError(f"adapter_in ({self.adapter_in}) must equal embed_dim ({self.embed_dim})")
        if self.ensemble_size < 0:
            raise ConfigError("ensemble_size must be >= 0 (0 disables adapters)")
        if self.ensemble_size and not 0 < self.adapter_bottleneck < self.adapter_in:
            raise ConfigError(
                f"adapter_bottleneck must satisfy 0 < m < n, got m={self.adapter_bottleneck}, n={self.adapter_in}"
            )
        if self.num_classes != 2:
            raise ConfigError("num_classes is fixed at 2 (live/spoof)")
        for name in ("channels", "depth", "mlp_hidden", "head_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @classmethod
    def paper(cls, **overrides) -> ModelConfig:
        """ViT-Base/16 at 224px with n=768, m=64, K=2 and a 512-2 head."""
        base = dict(image_size=224, channels=3, patch_size=16, embed_dim=768, depth=12, heads=12,
                    mlp_hidden=3072, head_hidden=512, adapter_in=768, adapter_bottleneck=64,
                    ensemble_size=2, fwt_enabled=True, fwt_init_alpha=0.3, fwt_init_beta=0.5)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> ModelConfig:
        return cls(**overrides)

    @classmethod
    def preset(cls, name: str, **overrides) -> ModelConfig:
        if name == "paper":
            return cls.paper(**overrides)
        if name == "desk":
            return cls.desk(**overrides)
        raise ConfigError(f"unknown preset {name!r} (expected 'desk' or 'paper')")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# -- building blocks ---------------------------------------------------------

class Parameter(Tensor):
    """A leaf tensor owned by a module; ``requires_grad`` is its trainable flag."""

    __slots__ = ()

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None


class Module:
    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, init: str = "uniform",
                 std: float = 0.0):
        if init == "uniform":
            bound = 1.0 / math.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        elif init == "normal":
            w = rng.normal(0.0, std, size=(n_in, n_out))
        elif init == "zeros":
            w = np.zeros((n_in, n_out))
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out))

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(b, n, 3, h, d // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(d // h))
        out = (T.softmax(scores, axis=-1) @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Adapter(Module):
    """Bottleneck residual adapter ``h + up(gelu(down(h)))``.

    ``up`` starts at exactly zero, so a fresh adapter is the identity map.
    """

    def __init__(self, n: int, m: int, rng: np.random.Generator, down_std: float = 1e-3):
        self.down = Linear(n, m, rng, init="normal", std=down_std)
        self.up = Linear(m, n, rng, init="zeros")

    def forward(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.down.weight.shape[0]:
            raise DimensionError(f"adapter expects trailing dim {self.down.weight.shape[0]}, got {h.shape}")
        return h + self.branch(h)

    def branch(self, h: Tensor) -> Tensor:
        """The bottleneck path ``up(gelu(down(h)))`` without the skip connection."""
        return self.up(T.gelu(self.down(h)))


class EnsembleAdapter(Module):
    """K parallel adapters on the same input sharing one skip connection.

    The module output is ``h + sum_k branch_k(h)``: the ensemble is taken over
    the bottleneck paths, so a fresh module is exactly the identity for any K.
    The per-adapter outputs ``h + branch_k(h)`` are cached for the cosine loss.
    """

    def __init__(self, n: int, m: int, k: int, rng: np.random.Generator):
        if k < 1:
            raise ConfigError("an ensemble adapter module needs K >= 1")
        self.adapters = [Adapter(n, m, rng) for _ in range(k)]
        self.last_outputs: list[Tensor] = []

    def forward(self, h: Tensor, cache: bool = False) -> Tensor:
        if h.shape[-1] != self.adapters[0].down.weight.shape[0]:
            raise DimensionError(f"adapter expects trailing dim {self.adapters[0].down.weight.shape[0]}, "
                                 f"got {h.shape}")
        branches = [a.branch(h) for a in self.adapters]
        total = h + branches[0]
        self.last_outputs = [total] + [h + b for b in branches[1:]] if cache else []
        for b in branches[1:]:
            total = total + b
        return total


class FwtLayer(Module):
    """Feature-wise transformation with learned sampling scales.

    Per sample, ``alpha = softplus(w_alpha) * eps_a`` and
    ``beta = softplus(w_beta) * eps_b`` with standard-normal ``eps`` drawn once
    and shared by every token; the output is ``x + alpha * x + beta``.
    """

    def __init__(self, dim: int, init_alpha: float, init_beta: float):
        self.w_alpha = Parameter(np.full(dim, init_alpha))
        self.w_beta = Parameter(np.full(dim, init_beta))
        self.active = False
        self.last_noise: tuple[np.ndarray, np.ndarray] | None = None

    def sample_noise(self, batch: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        d = self.w_alpha.shape[0]
        return rng.standard_normal((batch, d)), rng.standard_normal((batch, d))

    def forward(self, x: Tensor, rng: np.random.Generator | None = None,
                noise: tuple[np.ndarray, np.ndarray] | None = None) -> Tensor:
        if not self.active:
            return x
        b, d = x.shape[0], x.shape[-1]
        if noise is None:
            if rng is None:
                raise UsageError("an active FWT layer needs an rng or explicit noise")
            noise = self.sample_noise(b, rng)
        eps_a, eps_b = noise
        self.last_noise = (eps_a, eps_b)
        bshape = (b,) + (1,) * (x.ndim - 2) + (d,)
        alpha = T.softplus(self.w_alpha) * Tensor(np.reshape(eps_a, bshape))
        beta = T.softplus(self.w_beta) * Tensor(np.reshape(eps_b, bshape))
        return x + alpha * x + beta


class Block(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, cfg.heads, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = Mlp(d, cfg.mlp_hidden, rng)
        k = cfg.ensemble_size
        self.adapters1 = EnsembleAdapter(cfg.adapter_in, cfg.adapter_bottleneck, k, rng) if k else None
        self.adapters2 = EnsembleAdapter(cfg.adapter_in, cfg.adapter_bottleneck, k, rng) if k else None
        self.fwt = FwtLayer(d, cfg.fwt_init_alpha, cfg.fwt_init_beta) if cfg.fwt_enabled else None

    def forward(self, x: Tensor, train: bool = False, bypass: bool = False,
                rng: np.random.Generator | None = None, noise=None) -> Tensor:
        a = self.attn(self.norm1(x))
        if self.adapters1 is not None and not bypass:
            a = self.adapters1(a, cache=train)
        x = x + a
        m = self.mlp(self.norm2(x))
        if self.adapters2 is not None and not bypass:
            m = self.adapters2(m, cache=train)
        x = x + m
        if train and self.fwt is not None:
            x = self.fwt(x, rng=rng, noise=noise)
        return x


class Head(Module):
    def __init__(self, dim: int, hidden: int, n_out: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, n_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


# -- patches -----------------------------------------------------------------

def patchify(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Split images into flattened non-overlapping patches.

    Accepts ``(C, H, W)`` or ``(B, C, H, W)``. Patches are ordered
    left-to-right then top-to-bottom; each is flattened in (channel, row,
    column) order, giving ``(..., num_patches, patch_size**2 * channels)``.
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4:
        raise DimensionError(f"patchify expects (C,H,W) or (B,C,H,W), got {images.shape}")
    b, c, h, w = images.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} is not divisible by patch_size {p}")
    if c != cfg.channels or h != cfg.image_size or w != cfg.image_size:
        raise DimensionError(
            f"images of shape {(c, h, w)} do not match config ({cfg.channels}, {cfg.image_size}, {cfg.image_size})"
        )
    out = images.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    out = out.reshape(b, (h // p) * (w // p), c * p * p)
    return out[0] if single else out


# -- the model -----------------------------------------------------------------

class FreezePolicy(str, Enum):
    HEAD_ONLY = "head_only"
    ADAPTERS_AND_FWT = "adapters_and_fwt"
    LAST_K_LAYERS = "last_k_layers"
    FULL = "full"


def param_group(name: str) -> str:
    """Map a parameter name to one of ``PARAM_GROUPS``."""
    if name.startswith("head."):
        return "head"
    if ".adapters" in name:
        return "adapters"
    if ".fwt." in name:
        return "fwt"
    return "backbone"


class AdaptiveViT(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        from .rng import stream

        self.cfg = cfg
        rng = stream(seed, "init")
        d = cfg.embed_dim
        self.patch_embed = Linear(cfg.patch_dim, d, rng)
        self.cls_token = Parameter(rng.normal(0.0, 0.02, size=(1, 1, d)))
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, size=(1, cfg.num_tokens, d)))
        self.blocks = [Block(cfg, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(d)
        self.head = Head(d, cfg.head_hidden, cfg.num_classes, rng)
        self.ablated: set[int] = set()
        self.freeze_policy: FreezePolicy = FreezePolicy.FULL

    # -- structure -----------------------------------------------------------
    def ensemble_modules(self) -> list[EnsembleAdapter]:
        mods = []
        for blk in self.blocks:
            mods += [e for e in (blk.adapters1, blk.adapters2) if e is not None]
        return mods

    def fwt_layers(self) -> list[FwtLayer]:
        return [blk.fwt for blk in self.blocks if blk.fwt is not None]

    def set_fwt_active(self, flag: bool) -> None:
        for layer in self.fwt_layers():
            layer.active = bool(flag)

    def adapter_outputs(self) -> list[list[Tensor]]:
        """Per-adapter outputs cached by the most recent train-mode forward."""
        return [e.last_outputs for e in self.ensemble_modules() if e.last_outputs]

    def fwt_noise(self) -> list:
        return [blk.fwt.last_noise if blk.fwt is not None else None for blk in self.blocks]

    def param_dict(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    # -- forward ---------------------------------------------------------------
    def forward(self, images, mode: str = "eval", rng: np.random.Generator | None = None,
                fwt_noise: list | None = None) -> Tensor:
        """Return ``(batch, 2)`` logits; index 1 is the live class."""
        if mode not in ("train", "eval"):
            raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
        data = images.data if isinstance(images, Tensor) else np.asarray(images)
        if data.ndim == 3:
            data = data[None]
        patches = Tensor(patchify(data, self.cfg))
        b = patches.shape[0]
        d = self.cfg.embed_dim
        x = self.patch_embed(patches)
        cls = T.broadcast_to(self.cls_token, (b, 1, d))
        x = T.concat([cls, x], axis=1) + self.pos_embed
        train = mode == "train"
        if not train:
            for e in self.ensemble_modules():
                e.last_outputs = []
        for i, blk in enumerate(self.blocks):
            noise = fwt_noise[i] if fwt_noise is not None else None
            x = blk(x, train=train, bypass=i in self.ablated, rng=rng, noise=noise)
        return self.head(self.norm(x[:, 0, :]))



# -- parameter accounting ----------------------------------------------------

def count_params(cfg: ModelConfig, include=PARAM_GROUPS) -> int:
    """Closed-form parameter count of the selected groups."""
    if isinstance(include, str):
        include = (include,)
    bad = set(include) - set(PARAM_GROUPS)
    if bad:
        raise UsageError(f"unknown parameter groups {sorted(bad)}")
    d, L = cfg.embed_dim, cfg.depth
    n, m, k = cfg.adapter_in, cfg.adapter_bottleneck, cfg.ensemble_size
    per_block = 4 * d + (3 * d * d + 3 * d) + (d * d + d) + (2 * d * cfg.mlp_hidden + cfg.mlp_hidden + d)
    sizes = {
        "backbone": cfg.patch_dim * d + d + d + cfg.num_tokens * d + L * per_block + 2 * d,
        "adapters": 2 * L * k * (2 * n * m + m + n),
        "fwt": 2 * d * L if cfg.fwt_enabled else 0,
        "head": d * cfg.head_hidden + cfg.head_hidden + cfg.head_hidden * cfg.num_classes + cfg.num_classes,
    }
    return sum(sizes[g] for g in include)


def count_model_params(model: AdaptiveViT, include=PARAM_GROUPS, trainable_only: bool = False) -> int:
    """Direct enumeration of the model's parameter arrays."""
    if isinstance(include, str):
        include = (include,)
    return sum(p.size for name, p in model.named_parameters()
               if param_group(name) in include and (p.trainable or not trainable_only))


def params_report_csv(cfg: ModelConfig) -> str:
    lines = ["group,count"]
    lines += [f"{g},{count_params(cfg, (g,))}" for g in PARAM_GROUPS]
    lines.append(f"total,{count_params(cfg)}")
    return "\n".join(lines) + "\n"


# -- freezing and ablation -----------------------------------------------------

def apply_freeze_policy(model: AdaptiveViT, policy, k: int | None = None) -> None:
    """Set per-parameter trainable flags.

    ``head_only``: the MLP head. ``adapters_and_fwt``: adapters, FWT and head.
    ``last_k_layers``: every parameter of the last ``k`` blocks and the head.
    ``full``: everything.
    """
    policy = FreezePolicy(policy)
    depth = model.cfg.depth
    if policy is FreezePolicy.LAST_K_LAYERS:
        if k is None or not 0 <= k <= depth:
            raise ConfigError(f"last_k_layers needs 0 <= k <= depth ({depth}), got {k}")
        trainable_blocks = {f"blocks.{i}." for i in range(depth - k, depth)}
    for name, p in model.named_parameters():
        group = param_group(name)
        if policy is FreezePolicy.FULL:
            flag = True
        elif policy is FreezePolicy.HEAD_ONLY:
            flag = group == "head"
        elif policy is FreezePolicy.ADAPTERS_AND_FWT:
            flag = group in ("adapters", "fwt", "head")
        else:
            flag = group == "head" or any(name.startswith(b) for b in trainable_blocks)
        p.trainable = flag
    model.freeze_policy = policy


def ablate_adapters(model: AdaptiveViT, first_layer: int, last_layer: int) -> None:
    """Bypass both ensemble adapter modules in blocks ``first..last`` (1-based, inclusive)."""
    depth = model.cfg.depth
    if first_layer > last_layer:
        raise UsageError(f"inverted ablation range [{first_layer}, {last_layer}]")
    if first_layer < 1 or last_layer > depth:
        raise UsageError(f"ablation range [{first_layer}, {last_layer}] outside 1..{depth}")
    model.ablated = set(range(first_layer - 1, last_layer))


def restore_adapters(model: AdaptiveViT) -> None:
    model.ablated = set()
