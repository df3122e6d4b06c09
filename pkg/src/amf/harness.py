"""Training workflows: source-task pretraining, transfer, fine-tuning, and
the monitors (per-mode top-1, policy assignment accuracy, mean weighting).
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MixtureDataset, batches
from .errors import ConfigError, RunError, UsageError
from .models import (
    AMFModel,
    Model,
    SingleModel,
    checkpoint_save,
    init_model,
    transfer_init,
)
from .optim import OptimizerState, ParamGroup, ScheduleSpec, build_groups, sgd_step

MONITOR_HEADER = ("epoch,train_loss,val_top1_mode0,val_top1_mode1,"
                  "mean_h_branch0,mean_h_branch1,assign_acc_mode0,assign_acc_mode1")


@dataclass
class TrainConfig:
    arch: str = "amf"
    n: int = 2
    d: int = 64
    num_classes: int = 16
    in_channels: int = 1
    image_hw: int = 16
    schedules: dict = field(default_factory=dict)  # group name -> ScheduleSpec
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    seed_init: int = 0
    seed_data: int = 0
    layer_scale: float | None = 0.4

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class EvalReport:
    top1_overall: float
    top1_per_mode: dict
    loss: float
    assignment_overall: float | None = None
    assignment_per_mode: dict | None = None
    branch_matching: tuple | None = None  # branch index assigned to each mode id


@dataclass
class MonitorRecord:
    epoch: int
    train_loss: float
    val_top1_overall: float
    val_top1_mode: dict
    mean_h: list | None  # per branch (gated arch only)
    assign_acc_mode: dict | None


@dataclass
class MonitorTrace:
    records: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def best_val_top1(self) -> float:
        return max(r.val_top1_overall for r in self.records)


def assignment_accuracy(h: np.ndarray, modes: np.ndarray) -> tuple[dict, float, tuple]:
    """Per-mode assignment accuracy under the best branch-to-mode matching.

    A sample is assigned to branch argmax h (ties -> lowest index). The
    branch-mode correspondence is the bijection maximizing overall accuracy;
    it is returned so callers can report it.
    """
    h = np.asarray(h)
    modes = np.asarray(modes)
    n = h.shape[1]
    mode_ids = sorted(set(int(m) for m in modes))
    if n != len(mode_ids):
        raise UsageError(f"branch count {n} != mode count {len(mode_ids)}")
    assigned = h.argmax(axis=1)
    best = None
    for perm in itertools.permutations(range(n)):
        # perm[k] = branch matched to mode_ids[k]
        correct = 0
        for k, m in enumerate(mode_ids):
            correct += int(((modes == m) & (assigned == perm[k])).sum())
        acc = correct / len(modes)
        if best is None or acc > best[0]:
            best = (acc, perm)
    overall, perm = best
    per_mode = {}
    for k, m in enumerate(mode_ids):
        mask = modes == m
        per_mode[m] = float((assigned[mask] == perm[k]).mean())
    return per_mode, overall, perm


def _forward_split(model: Model, split, batch_size: int = 64):
    """Deterministic unshuffled forward over a split; yields per-batch results."""
    for images, labels, modes in batches(split, batch_size, epoch_seed=0, shuffle=False):
        res = model.forward(Tensor(images.astype(ad.DEFAULT_DTYPE)))
        yield res, labels, modes


def evaluate(model: Model, split, batch_size: int = 64) -> EvalReport:
    """Top-1 and loss over a split; adds assignment metrics for the gated arch."""
    if not split:
        raise UsageError("empty split")
    preds, labels_all, modes_all, losses, hs = [], [], [], [], []
    for res, labels, modes in _forward_split(model, split, batch_size):
        preds.append(res.probs.data.argmax(axis=1))
        labels_all.append(labels)
        modes_all.append(modes)
        losses.append(float(ad.cross_entropy(res.logits, labels).data) * len(labels))
        if res.weights is not None:
            hs.append(res.weights.data)
    preds = np.concatenate(preds)
    labels_all = np.concatenate(labels_all)
    modes_all = np.concatenate(modes_all)
    correct = preds == labels_all
    per_mode = {int(m): float(correct[modes_all == m].mean()) for m in sorted(set(modes_all.tolist()))}
    report = EvalReport(
        top1_overall=float(correct.mean()),
        top1_per_mode=per_mode,
        loss=sum(losses) / len(labels_all),
    )
    if hs and isinstance(model, AMFModel):
        h = np.concatenate(hs)
        if model.n == len(set(modes_all.tolist())):
            am, overall, perm = assignment_accuracy(h, modes_all)
            report.assignment_per_mode = am
            report.assignment_overall = overall
            report.branch_matching = perm
    return report


def weighting_trace(model: Model, split, batch_size: int = 64) -> list[float]:
    """Arithmetic mean of the per-sample policy weights, per branch."""
    if not isinstance(model, AMFModel):
        raise UsageError("weighting trace requires the gated architecture")
    hs = [res.weights.data for res, _, _ in _forward_split(model, split, batch_size)]
    return np.concatenate(hs).mean(axis=0).tolist()


def export_latents(model: Model, split, path: str, batch_size: int = 64) -> None:
    """CSV of fused pre-classifier features plus label and mode, one row per sample."""
    width = model.params["classifier.w"].shape[0]
    lines = [",".join([f"f{i}" for i in range(width)] + ["label", "mode"])]
    for res, labels, modes in _forward_split(model, split, batch_size):
        for row, lab, mode in zip(res.fused.data, labels, modes):
            lines.append(",".join(f"{v:.6g}" for v in row) + f",{lab},{mode}")
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6g}"


def monitor_csv(trace: MonitorTrace) -> str:
    lines = [MONITOR_HEADER]
    for r in trace.records:
        h = r.mean_h if r.mean_h is not None else [None, None]
        aa = r.assign_acc_mode if r.assign_acc_mode is not None else {0: None, 1: None}
        lines.append(",".join([
            str(r.epoch), _fmt(r.train_loss),
            _fmt(r.val_top1_mode.get(0)), _fmt(r.val_top1_mode.get(1)),
            _fmt(h[0]), _fmt(h[1] if len(h) > 1 else None),
            _fmt(aa.get(0)), _fmt(aa.get(1)),
        ]))
    return "\n".join(lines) + "\n"


def _train_epochs(model: Model, groups: list[ParamGroup], train_split, val_split,
                  epochs: int, batch_size: int, seed_data: int,
                  trace: MonitorTrace | None = None) -> tuple[float, dict]:
    """Shared epoch loop; returns (best val top-1, best parameter snapshot)."""
    state = OptimizerState(model)
    best_top1, best_params = -1.0, None
    saturated_epochs = 0
    for epoch in range(epochs):
        state.epoch = epoch
        losses = []
        for images, labels, _ in batches(train_split, batch_size, epoch_seed=seed_data * 1_000_003 + epoch):
            res = model.forward(Tensor(images.astype(ad.DEFAULT_DTYPE)))
            loss = ad.cross_entropy(res.logits, labels)
            if not np.isfinite(loss.data):
                raise RunError(f"non-finite loss at epoch {epoch}")
            model.zero_grads()
            loss.backward()
            sgd_step(model, state, groups)
            losses.append(float(loss.data) * len(labels))
        train_loss = sum(losses) / len(train_split)

        report = evaluate(model, val_split, batch_size)
        if report.top1_overall > best_top1:
            best_top1 = report.top1_overall
            best_params = {k: t.data.copy() for k, t in model.params.items()}

        if trace is not None:
            mean_h = weighting_trace(model, val_split, batch_size) if isinstance(model, AMFModel) else None
            trace.records.append(MonitorRecord(
                epoch=epoch, train_loss=train_loss,
                val_top1_overall=report.top1_overall,
                val_top1_mode=report.top1_per_mode,
                mean_h=mean_h, assign_acc_mode=report.assignment_per_mode,
            ))
            # dead-policy watch: one branch hogging all weight at chance accuracy
            if mean_h is not None and report.assignment_overall is not None:
                chance = 1.0 / len(mean_h)
                if max(mean_h) > 0.99 and report.assignment_overall <= 0.5 + 1e-9:
                    saturated_epochs += 1
                else:
                    saturated_epochs = 0
                if saturated_epochs == 20:
                    trace.warnings.append(f"dead policy network suspected at epoch {epoch}")
    return best_top1, best_params


@dataclass
class PretrainConfig:
    epochs: int = 40
    batch_size: int = 32
    backbone_lr: float = 0.05
    policy_lr: float = 0.05
    momentum: float = 0.9
    seed_init: int = 0
    seed_data: int = 0
    d: int = 64


class PolicyPretrainModel(Model):
    """Policy backbone plus a throwaway classification head, for pretraining."""

    arch = "policy_pretrain"

    def __init__(self, num_classes: int, in_channels: int = 1, image_hw: int = 16, seed: int = 0):
        super().__init__(1, 4, num_classes, in_channels, image_hw)
        from .models import _gaussian, _he_std, _zeros  # shared initializers

        flat = 4 * (image_hw // 2) * (image_hw // 2)
        self.params["policy.conv.w"] = _gaussian((4, in_channels, 3, 3), _he_std(in_channels * 9), seed * 1000 + 800)
        self.params["policy.conv.b"] = _zeros((4,))
        self._init_classifier(flat, seed * 1000 + 901)

    def forward(self, x: Tensor):
        from .models import ForwardResult

        h = ad.maxpool2(ad.relu(ad.conv2d(x, self.params["policy.conv.w"], self.params["policy.conv.b"])))
        fused = ad.flatten(h)
        logits, probs = self._classify(fused)
        return ForwardResult(probs=probs, logits=logits, fused=fused)


def pretrain(config: PretrainConfig, source: MixtureDataset,
             report: dict | None = None) -> dict[str, np.ndarray]:
    """Train one branch extractor and one policy backbone on the source task.

    Returns a checkpoint-style parameter dict with the classification heads
    stripped (names ``branch1.*`` and ``policy.conv.*``). When ``report`` is
    given, best source val top-1 values are stored under ``backbone_val`` and
    ``policy_val``.
    """
    spec = source.spec
    backbone = SingleModel(config.d, spec.num_classes, spec.channels, spec.image_hw, seed=config.seed_init)
    groups = build_groups(
        backbone,
        {"backbone": ScheduleSpec(config.backbone_lr), "classifier": ScheduleSpec(config.backbone_lr)},
        momentum=config.momentum,
    )
    backbone_val, _ = _train_epochs(backbone, groups, source.train, source.val,
                                    config.epochs, config.batch_size, config.seed_data)

    policy = PolicyPretrainModel(spec.num_classes, spec.channels, spec.image_hw, seed=config.seed_init)
    pgroups = [ParamGroup("all", list(policy.params), ScheduleSpec(config.policy_lr), config.momentum)]
    policy_val, _ = _train_epochs(policy, pgroups, source.train, source.val,
                                  config.epochs, config.batch_size, config.seed_data + 1)
    if report is not None:
        report["backbone_val"] = backbone_val
        report["policy_val"] = policy_val

    ckpt = {k: t.data.copy() for k, t in backbone.params.items() if not k.startswith("classifier.")}
    ckpt.update({k: t.data.copy() for k, t in policy.params.items() if k.startswith("policy.conv.")})
    return ckpt


def transfer_map_for(model: Model) -> dict[str, str]:
    """Default mapping from a pretrain checkpoint into each architecture."""
    mapping = {}
    for i in range(1, model.n + 1):
        mapping[f"branch{i}."] = "branch1."
    if isinstance(model, AMFModel):
        mapping["policy.conv."] = "policy.conv."
    return mapping


def train(config: TrainConfig, target: MixtureDataset,
          pretrained: dict[str, np.ndarray] | None = None
          ) -> tuple[Model, MonitorTrace, dict[str, np.ndarray]]:
    """Full fine-tuning run; returns (final model, trace, best-val checkpoint)."""
    model = init_model(config.arch, config.seed_init, config.num_classes, config.n,
                       config.d, config.in_channels, config.image_hw)
    if pretrained is not None:
        transfer_init(model, pretrained, transfer_map_for(model))
    groups = build_groups(model, config.schedules, config.momentum,
                          layer_scale_factor=config.layer_scale)
    trace = MonitorTrace()
    _, best_params = _train_epochs(model, groups, target.train, target.val,
                                   config.epochs, config.batch_size, config.seed_data, trace)
    return model, trace, best_params


def save_run_artifacts(trace: MonitorTrace, best_params: dict, out_dir: str, name: str) -> tuple[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{name}_monitor.csv")
    tmp = csv_path + ".tmp"
    with open(tmp, "w") as f:
        f.write(monitor_csv(trace))
    os.replace(tmp, csv_path)
    ckpt_path = os.path.join(out_dir, f"{name}_best.ckpt")
    checkpoint_save(best_params, ckpt_path)
    return csv_path, ckpt_path
