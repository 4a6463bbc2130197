"""End-to-end gradient check of the adaptive ViT objective.

Builds a model in 64-bit mode, evaluates L_ce + L_cos on one balanced batch
with FWT active (its Gaussian noise drawn once and then held fixed), and
compares backprop gradients with central differences on a random sample of
entries from every parameter tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import DomainSpec, generate_domain, sample_batch
from .losses import balanced_ce, cosine_diversity
from .model import PARAM_GROUPS, AdaptiveViT, FreezePolicy, ModelConfig, apply_freeze_policy, param_group
from .rng import stream


@dataclass
class GroupResult:
    group: str
    max_rel_err: float = 0.0
    checked: int = 0
    worst: str = ""
    failures: list[str] = field(default_factory=list)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _batch(cfg: ModelConfig, seed: int, per_domain: int):
    specs = [DomainSpec("gc-a", noise_std=0.02, artifact="moire"),
             DomainSpec("gc-b", noise_std=0.02, artifact="frame", brightness=0.8)]
    sources = [generate_domain(s, per_domain, seed, image_size=cfg.image_size, channels=cfg.channels,
                               dtype=np.float64) for s in specs]
    target = generate_domain(DomainSpec("gc-t", artifact="cast", color_shift=(0.05, 0, 0)), per_domain, seed,
                             image_size=cfg.image_size, channels=cfg.channels, dtype=np.float64)
    return sample_batch(sources, target, 2, stream(seed, "gradcheck-batch"), flip=True)


def build_problem(cfg: ModelConfig, seed: int = 0, perturb: float = 0.02, per_domain: int = 2):
    """Return ``(model, loss_fn)`` where ``loss_fn()`` rebuilds the scalar objective.

    ``perturb`` adds Gaussian noise of that std to adapter weights and FWT
    parameters so that every group has non-trivial gradients (a fresh
    adapter has zero up-projection, which zeroes its down-projection grads).
    """
    model = AdaptiveViT(cfg, seed=seed)
    if perturb:
        rng = stream(seed, "gradcheck-perturb")
        for name, p in model.named_parameters():
            if param_group(name) in ("adapters", "fwt"):
                p.data = p.data + rng.normal(0.0, perturb, size=p.shape).astype(p.data.dtype)
    apply_freeze_policy(model, FreezePolicy.FULL)
    model.set_fwt_active(True)
    batch = _batch(cfg, seed, per_domain)
    model(batch.images, mode="train", rng=stream(seed, "gradcheck-fwt"))
    noise = model.fwt_noise()

    def loss_fn() -> T.Tensor:
        logits = model(batch.images, mode="train", fwt_noise=noise)
        probs = T.softmax(logits, axis=-1)[:, 1]
        ce, _ = balanced_ce(probs, batch.labels, batch.domain_ids)
        return ce + cosine_diversity(model.adapter_outputs())

    return model, loss_fn


def check_gradients(model: AdaptiveViT, loss_fn, samples_per_tensor: int = 6, step: float = 1e-5,
                    tol: float = 1e-4, seed: int = 0) -> dict[str, GroupResult]:
    """Compare analytic and central-difference gradients, grouped by parameter group."""
    params = model.param_dict()
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    results = {g: GroupResult(g) for g in PARAM_GROUPS}
    rng = stream(seed, "gradcheck-entries")
    with T.no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            k = min(samples_per_tensor, flat.size)
            picks = rng.choice(flat.size, size=k, replace=False)
            res = results[param_group(name)]
            for i in picks:
                orig = flat[i]
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                err = relative_error(float(analytic[name].reshape(-1)[i]), numeric)
                res.checked += 1
                if err > res.max_rel_err:
                    res.max_rel_err, res.worst = err, f"{name}[{i}]"
                if err > tol:
                    res.failures.append(f"{name}[{i}] rel_err={err:.3e}")
    return results


def run_gradcheck(cfg: ModelConfig | None = None, seed: int = 0, tol: float = 1e-4,
                  samples_per_tensor: int = 6, perturb: float = 0.02) -> dict[str, GroupResult]:
    """Full check in 64-bit precision; restores the previous precision afterwards."""
    cfg = cfg or ModelConfig.desk()
    with T.precision("f64"):
        model, loss_fn = build_problem(replace(cfg), seed=seed, perturb=perturb)
        return check_gradients(model, loss_fn, samples_per_tensor=samples_per_tensor, tol=tol, seed=seed)
