"""Three-stage protocol: pre-train the head, fine-tune adapters/FWT, test.

Also holds checkpoint I/O, the last-eight-checkpoint stability statistic and
the leave-one-domain-out runner.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import DomainDataset, FewShotSplit, few_shot_split, sample_batch
from .errors import ConfigError, FormatError, UsageError
from .losses import LossBreakdown, balanced_ce, combine, cosine_diversity, stage_loss
from .metrics import EvalReport, evaluate
from .model import AdaptiveViT, FreezePolicy, ModelConfig, apply_freeze_policy
from .optim import Adam, AdamState
from .rng import stream
from .serialization import FLAG_TRAINABLE, Record, load_records, save_records

log = logging.getLogger(__name__)

STABILITY_WINDOW = 8


@dataclass
class StageConfig:
    pretrain_iters: int = 100
    finetune_iters: int = 1500
    checkpoint_every: int = 0  # 0: largest divisor of finetune_iters not above finetune_iters / 16
    lr: float = 1e-4
    weight_decay: float = 1e-6
    batch_per_domain: int = 8
    seed: int = 0
    cos_weight: float = 1.0
    flip: bool = True
    eval_batch: int = 128

    def __post_init__(self):
        if self.checkpoint_every == 0 and self.finetune_iters > 0:
            n = self.finetune_iters
            self.checkpoint_every = max(d for d in range(1, max(1, n // 16) + 1) if n % d == 0)
        self.validate()

    def validate(self) -> None:
        if self.pretrain_iters <= 0 or self.finetune_iters <= 0:
            raise ConfigError("pretrain_iters and finetune_iters must be positive")
        if self.checkpoint_every <= 0 or self.finetune_iters % self.checkpoint_every:
            raise ConfigError(f"checkpoint_every ({self.checkpoint_every}) must divide "
                              f"finetune_iters ({self.finetune_iters})")
        if self.batch_per_domain <= 0 or self.batch_per_domain % 2:
            raise ConfigError(f"batch_per_domain must be a positive even number, got {self.batch_per_domain}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")

    @classmethod
    def paper(cls, **overrides) -> StageConfig:
        base = dict(pretrain_iters=100, finetune_iters=4000, checkpoint_every=250)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> StageConfig:
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown stage config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CheckpointEval:
    iteration: int
    path: str | None
    report: EvalReport


@dataclass
class RunRecord:
    log: list[tuple[int, str, LossBreakdown]] = field(default_factory=list)
    checkpoints: list[CheckpointEval] = field(default_factory=list)

    def extend(self, other: RunRecord) -> RunRecord:
        self.log += other.log
        self.checkpoints += other.checkpoints
        return self

    def stability(self, window: int = STABILITY_WINDOW) -> tuple[float, float]:
        """Mean and (population) std of AUC over exactly the last ``window`` checkpoints."""
        if len(self.checkpoints) < window:
            raise UsageError(f"stability needs {window} checkpoints, run has {len(self.checkpoints)}")
        aucs = np.array([c.report.auc for c in self.checkpoints[-window:]])
        return float(aucs.mean()), float(aucs.std())

    def best(self) -> CheckpointEval:
        if not self.checkpoints:
            raise UsageError("run has no checkpoints")
        return max(self.checkpoints, key=lambda c: (c.report.auc, -c.iteration))

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "stage", "ce", "cos", "total"])
        for it, stage, lb in self.log:
            w.writerow([it, stage, repr(lb.ce), repr(lb.cos), repr(lb.total)])
        return buf.getvalue()


# -- evaluation ------------------------------------------------------------------

def predict_scores(model: AdaptiveViT, images: np.ndarray, batch: int = 128) -> np.ndarray:
    """Live probability per image, from a deterministic (FWT-free) forward."""
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch):
            logits = model(images[start:start + batch], mode="eval")
            out.append(T.softmax(logits, axis=-1).data[:, 1].astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def test(model: AdaptiveViT, eval_set: DomainDataset, batch: int = 128,
         fpr_targets=(0.01,), hter_threshold: float | None = None) -> EvalReport:
    """Score ``eval_set`` in test mode (FWT removed) and compute metrics."""
    if len(eval_set) == 0:
        raise UsageError("empty evaluation set")
    scores = predict_scores(model, eval_set.images, batch)
    return evaluate(scores, eval_set.labels.astype(np.int64), fpr_targets, hter_threshold)


# -- training stages -----------------------------------------------------------------

def _train_step(model: AdaptiveViT, opt: Adam, batch, stage: str, cfg: StageConfig,
                fwt_rng: np.random.Generator) -> LossBreakdown:
    opt.zero_grad()
    logits = model(batch.images, mode="train", rng=fwt_rng)
    probs = T.softmax(logits, axis=-1)[:, 1]
    ce, per_domain = balanced_ce(probs, batch.labels, batch.domain_ids)
    use_cos = stage == "finetune" and cfg.cos_weight != 0
    cos = cosine_diversity(model.adapter_outputs()) if use_cos else T.Tensor(0.0)
    total = combine(stage, ce, cos, cfg.cos_weight)
    total.backward()
    opt.step()
    return stage_loss(stage, ce.item(), cos.item(), cfg.cos_weight, per_domain)


def _shots_for(shots) -> DomainDataset | None:
    if shots is None:
        return None
    return shots.shots if isinstance(shots, FewShotSplit) else shots


def pretrain(model: AdaptiveViT, sources: list[DomainDataset], shots, cfg: StageConfig,
             rng_tag: str = "") -> RunRecord:
    """Train the MLP head alone on L_ce with the backbone frozen and FWT off."""
    apply_freeze_policy(model, FreezePolicy.HEAD_ONLY)
    model.set_fwt_active(False)
    opt = Adam(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    data_rng = stream(cfg.seed, "pretrain-batches", rng_tag)
    fwt_rng = stream(cfg.seed, "pretrain-fwt", rng_tag)
    record = RunRecord()
    shot_ds = _shots_for(shots)
    for it in range(1, cfg.pretrain_iters + 1):
        batch = sample_batch(sources, shot_ds, cfg.batch_per_domain, data_rng, flip=cfg.flip)
        record.log.append((it, "pretrain", _train_step(model, opt, batch, "pretrain", cfg, fwt_rng)))
    return record


def finetune(model: AdaptiveViT, sources: list[DomainDataset], shots, cfg: StageConfig,
             eval_set: DomainDataset | None = None, out_dir=None,
             policy: FreezePolicy = FreezePolicy.ADAPTERS_AND_FWT, rng_tag: str = "") -> RunRecord:
    """Fine-tune under ``policy`` on L_ce + L_cos with FWT active.

    Every ``checkpoint_every`` iterations the model is evaluated on
    ``eval_set`` in test mode and, when ``out_dir`` is given, saved.
    A fresh Adam state is used for this stage.
    """
    apply_freeze_policy(model, policy)
    model.set_fwt_active(True)
    opt = Adam(model.named_parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    data_rng = stream(cfg.seed, "finetune-batches", rng_tag)
    fwt_rng = stream(cfg.seed, "finetune-fwt", rng_tag)
    record = RunRecord()
    shot_ds = _shots_for(shots)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    for it in range(1, cfg.finetune_iters + 1):
        batch = sample_batch(sources, shot_ds, cfg.batch_per_domain, data_rng, flip=cfg.flip)
        record.log.append((it, "finetune", _train_step(model, opt, batch, "finetune", cfg, fwt_rng)))
        if it % cfg.checkpoint_every == 0:
            path = None
            if out_dir is not None:
                path = str(out_dir / f"ckpt_{it:06d}.avit")
                save_checkpoint(model, path, opt.state)
            if eval_set is not None:
                report = test(model, eval_set, cfg.eval_batch)
                record.checkpoints.append(CheckpointEval(it, path, report))
                log.debug("iter %d: %s", it, report.summary())
            elif path is not None:
                record.checkpoints.append(CheckpointEval(it, path, None))
    model.set_fwt_active(False)
    return record


# -- checkpoints -----------------------------------------------------------------------

def _json_record(name: str, obj) -> Record:
    return Record(name, np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8))


def save_checkpoint(model: AdaptiveViT, path, adam: AdamState | None = None) -> None:
    """Write parameters (with trainable flags), config, model state and Adam state."""
    records = [Record(name, p.data, FLAG_TRAINABLE if p.trainable else 0)
               for name, p in model.named_parameters()]
    records.append(_json_record("__meta__/config", model.cfg.to_dict()))
    records.append(_json_record("__meta__/state", {
        "freeze_policy": model.freeze_policy.value,
        "ablated": sorted(model.ablated),
        "fwt_active": [layer.active for layer in model.fwt_layers()],
    }))
    if adam is not None:
        records.append(Record("__adam__/step", np.array(adam.step, dtype=np.int64)))
        records.append(Record("__adam__/hparams", np.array(
            [adam.lr, adam.weight_decay, adam.beta1, adam.beta2, adam.eps], dtype=np.float64)))
        for name in adam.m:
            records.append(Record(f"__adam__/m/{name}", adam.m[name]))
            records.append(Record(f"__adam__/v/{name}", adam.v[name]))
    save_records(path, records)


def _read_json(rec: Record):
    try:
        return json.loads(rec.values.tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"record {rec.name!r} is not valid JSON") from exc


def load_checkpoint(path, model: AdaptiveViT | None = None) -> tuple[AdaptiveViT, AdamState | None]:
    """Restore a checkpoint, into ``model`` if given (names and shapes must match)."""
    records = {r.name: r for r in load_records(path)}
    if "__meta__/config" not in records:
        raise FormatError(f"{path}: missing __meta__/config record")
    cfg = ModelConfig.from_dict(_read_json(records["__meta__/config"]))
    if model is None:
        model = AdaptiveViT(cfg)
    params = model.param_dict()
    stored = {n for n in records if not n.startswith("__")}
    for name in sorted(set(params) | stored):
        if name not in stored:
            raise FormatError(f"{path}: checkpoint lacks parameter {name!r}")
        if name not in params:
            raise FormatError(f"{path}: unexpected parameter {name!r} for this model config")
        if records[name].values.shape != params[name].shape:
            raise FormatError(f"{path}: parameter {name!r} has shape {records[name].values.shape}, "
                              f"model expects {params[name].shape}")
    for name, p in params.items():
        rec = records[name]
        p.data = np.array(rec.values, dtype=T.get_dtype())
        p.trainable = rec.trainable
    if "__meta__/state" in records:
        state = _read_json(records["__meta__/state"])
        model.freeze_policy = FreezePolicy(state.get("freeze_policy", "full"))
        model.ablated = set(state.get("ablated", []))
        for layer, flag in zip(model.fwt_layers(), state.get("fwt_active", [])):
            layer.active = bool(flag)
    adam = None
    if "__adam__/step" in records:
        lr, wd, b1, b2, eps = records["__adam__/hparams"].values.tolist()
        adam = AdamState(lr=lr, weight_decay=wd, beta1=b1, beta2=b2, eps=eps,
                         step=int(records["__adam__/step"].values))
        for name, rec in records.items():
            if name.startswith("__adam__/m/"):
                key = name[len("__adam__/m/"):]
                adam.m[key] = rec.values.copy()
                adam.v[key] = records[f"__adam__/v/{key}"].values.copy()
    return model, adam


def import_backbone(model: AdaptiveViT, path) -> list[str]:
    """Copy backbone weights from a checkpoint, ignoring adapters, FWT and head.

    Returns the imported parameter names.
    """
    from .model import param_group

    records = {r.name: r for r in load_records(path) if not r.name.startswith("__")}
    params = model.param_dict()
    imported = []
    for name, p in params.items():
        if param_group(name) != "backbone":
            continue
        if name not in records:
            raise FormatError(f"{path}: backbone parameter {name!r} missing")
        if records[name].values.shape != p.shape:
            raise FormatError(f"{path}: backbone parameter {name!r} has shape "
                              f"{records[name].values.shape}, model expects {p.shape}")
        p.data = np.array(records[name].values, dtype=T.get_dtype())
        imported.append(name)
    return imported


def checkpoint_param_count(path) -> int:
    return sum(r.values.size for r in load_records(path) if not r.name.startswith("__"))


# -- leave-one-out protocol ---------------------------------------------------------------

VARIANTS = {
    "vit_full": dict(ensemble_size=0, fwt_enabled=False, policy=FreezePolicy.FULL, cos=False),
    "vit_adapter": dict(ensemble_size=1, fwt_enabled=False, policy=FreezePolicy.ADAPTERS_AND_FWT, cos=False),
    "vit_adapter_fwt": dict(ensemble_size=1, fwt_enabled=True, policy=FreezePolicy.ADAPTERS_AND_FWT, cos=False),
    "vit_ensemble_adapter_fwt": dict(ensemble_size=2, fwt_enabled=True,
                                     policy=FreezePolicy.ADAPTERS_AND_FWT, cos=True),
}

REPORT_COLUMNS = ["target", "variant", "seed", "HTER", "AUC", "TPR@FPR1", "stability_mean", "stability_std",
                  "shots", "best_iter", "best_HTER", "best_AUC", "best_TPR@FPR1"]


def variant_config(base: ModelConfig, variant: str) -> tuple[ModelConfig, FreezePolicy]:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    v = VARIANTS[variant]
    cfg = replace(base, ensemble_size=v["ensemble_size"], fwt_enabled=v["fwt_enabled"])
    return cfg, v["policy"]


@dataclass
class TargetResult:
    target: str
    variant: str
    seed: int
    shots: int
    record: RunRecord
    final: EvalReport
    stability: tuple[float, float]

    def row(self) -> dict:
        best = self.record.best()
        return {
            "target": self.target, "variant": self.variant, "seed": self.seed,
            "HTER": self.final.hter, "AUC": self.final.auc, "TPR@FPR1": self.final.tpr_at_fpr[0.01],
            "stability_mean": self.stability[0], "stability_std": self.stability[1],
            "shots": self.shots, "best_iter": best.iteration, "best_HTER": best.report.hter,
            "best_AUC": best.report.auc, "best_TPR@FPR1": best.report.tpr_at_fpr[0.01],
        }


def run_target(datasets: list[DomainDataset], target_index: int, k_shot: int, model_cfg: ModelConfig,
               stage_cfg: StageConfig, variant: str, out_dir=None, precision: str | None = None) -> TargetResult:
    """Pretrain + finetune with one held-out target domain, evaluating on its remainder."""
    if precision is not None:
        T.set_precision(precision)
    cfg, policy = variant_config(model_cfg, variant)
    stage = stage_cfg if VARIANTS[variant]["cos"] else replace(stage_cfg, cos_weight=0.0)
    target = datasets[target_index]
    sources = [d for i, d in enumerate(datasets) if i != target_index]
    split = few_shot_split(target, k_shot, stage.seed)
    model = AdaptiveViT(cfg, seed=stage.seed)
    tag = target.domain_id
    record = pretrain(model, sources, split, stage, rng_tag=tag)
    run_dir = Path(out_dir) / f"{variant}_{tag}_k{k_shot}_s{stage.seed}" if out_dir is not None else None
    record.extend(finetune(model, sources, split, stage, eval_set=split.remainder, out_dir=run_dir,
                           policy=policy, rng_tag=tag))
    if run_dir is not None:
        (run_dir / "train_log.csv").write_text(record.log_csv())
    final = record.checkpoints[-1].report
    return TargetResult(tag, variant, stage.seed, k_shot, record, final, record.stability())


def leave_one_out(datasets: list[DomainDataset], k_shot: int, model_cfg: ModelConfig,
                  stage_cfg: StageConfig, variant: str, out_dir=None, jobs: int = 1) -> list[TargetResult]:
    """Hold out each domain in turn; train on the rest plus its few-shot split."""
    if len(datasets) < 2:
        raise UsageError("leave-one-out needs at least 2 domains")
    args = [(datasets, i, k_shot, model_cfg, stage_cfg, variant, out_dir) for i in range(len(datasets))]
    if jobs <= 1:
        return [run_target(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_target, *a, precision=T.precision_name()) for a in args]
        return [f.result() for f in futures]


def report_csv(results: list[TargetResult]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in results:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
    return buf.getvalue()
