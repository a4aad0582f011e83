"""Supervised single-task training and whole-network evaluation."""

from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from . import tensor as T
from .errors import ConfigurationError, TrainingDivergence
from .losses import depth_loss, norm_loss, seg_loss
from .metrics import (MetricReport, count_eps_normals, depth_metrics,
                      normal_metrics, seg_metrics)
from .nets import (DepthHead, MultiHead, NormalHead, SegHead, depth_decode,
                   forward, init_state, one_hot_supervision)
from .optim import SGD, OptimizerConfig, desk_profile


def head_task(head) -> str:
    if isinstance(head, SegHead):
        return "seg"
    if isinstance(head, DepthHead):
        return "depth"
    if isinstance(head, NormalHead):
        return "norm"
    raise ConfigurationError(f"no task for head {head!r}")


def batch_ranges(count: int, batch_size: int):
    """Fixed-order index chunks; the last one may be short."""
    return [range(s, min(s + batch_size, count))
            for s in range(0, count, batch_size)]


@dataclass
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    seed: int = 0
    optim: OptimizerConfig = field(default_factory=desk_profile)

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")
        self.optim.validate()
        return self


def stack_images(samples) -> T.Tensor:
    return T.constant(np.stack([s.image for s in samples]))


def supervised_loss(spec, state, samples) -> T.Tensor:
    """Ground-truth loss of a single-head network on a sample batch.

    Parameter regularization is not part of this value; the optimizer
    applies it as weight decay.
    """
    task = head_task(spec.head)
    pred, _ = forward(spec, state, stack_images(samples))
    if task == "seg":
        labels = np.stack([s.seg for s in samples])
        return seg_loss(T.softmax_channels(pred), labels)
    mask = np.stack([s.mask for s in samples])
    if task == "depth":
        gt = np.stack([s.depth for s in samples])
        return depth_loss(gt, depth_decode(pred, spec.head), mask)
    gt = np.stack([s.normal for s in samples])
    return norm_loss(gt, pred, mask)


def train_teacher(spec, train_view, config: TrainConfig, state=None):
    """Train one task network against full ground truth.

    Returns (state, curve) with curve[e] the mean loss of epoch e.  With
    epochs=0 this is exactly initialization.  A non-finite loss aborts
    with TrainingDivergence carrying the curve so far.
    """
    config.validate()
    if spec.head is None or isinstance(spec.head, MultiHead):
        raise ConfigurationError("teacher training expects a single-task head")
    task = head_task(spec.head)
    if state is None:
        state = init_state(spec, config.seed, labels=("teacher", task))
    count = len(train_view)
    curve = []
    if config.epochs == 0:
        return state, curve
    if count == 0:
        raise ConfigurationError("training needs at least one sample")
    chunks = batch_ranges(count, config.batch_size)
    opt_cfg = config.optim
    if opt_cfg.poly_power > 0 and opt_cfg.total_steps == 0:
        opt_cfg = replace(opt_cfg, total_steps=config.epochs * len(chunks))
    opt = SGD(state.trainable_items(), opt_cfg)
    for epoch in range(config.epochs):
        order = rng.stream(config.seed, "teacher", task, "batches", epoch).permutation(count)
        epoch_losses = []
        for chunk in chunks:
            samples = [train_view.sample(int(order[i])) for i in chunk]
            loss = supervised_loss(spec, state, samples)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergence(
                    f"{task} training loss became {value} in epoch {epoch}",
                    report={"task": task, "epoch": epoch, "last_loss": value,
                            "curve": curve})
            T.backward(loss)
            opt.step()
            opt.zero_grad()
            epoch_losses.append(value)
        curve.append(float(np.mean(epoch_losses)))
    return state, curve


# ---------------------------------------------------------------------------
# evaluation

def eval_heads(spec) -> dict:
    """Task label -> head for every prediction the network makes."""
    if isinstance(spec.head, MultiHead):
        return {br.task: br.head for br in spec.head.branches}
    if spec.head is None:
        raise ConfigurationError("network has no head to evaluate")
    return {head_task(spec.head): spec.head}


def collect_predictions(spec, state, eval_view, batch_size: int = 8):
    """Decoded predictions plus ground truth over a full-sample view.

    Returns (columns, gt): columns maps each task label to its decoded
    prediction stack (class labels for segmentation, metric depth, raw
    normal field); gt holds the reference arrays and validity mask.
    """
    heads = eval_heads(spec)
    pred_parts = {k: [] for k in heads}
    gt_parts = {"seg": [], "depth": [], "normal": [], "mask": []}
    for chunk in batch_ranges(len(eval_view), batch_size):
        samples = [eval_view.sample(i) for i in chunk]
        out, _ = forward(spec, state, stack_images(samples))
        outs = out if isinstance(out, dict) else {next(iter(heads)): out}
        for label, head in heads.items():
            logits = outs[label]
            if isinstance(head, SegHead):
                pred_parts[label].append(one_hot_supervision(logits))
            elif isinstance(head, DepthHead):
                pred_parts[label].append(depth_decode(logits, head).data[:, 0])
            else:
                pred_parts[label].append(logits.data)
        for s in samples:
            gt_parts["seg"].append(s.seg)
            gt_parts["depth"].append(s.depth)
            gt_parts["normal"].append(s.normal)
            gt_parts["mask"].append(s.mask)
    columns = {k: np.concatenate(v) for k, v in pred_parts.items()}
    gt = {k: np.stack(v) for k, v in gt_parts.items()}
    return columns, gt


def evaluate(spec, state, eval_view, batch_size: int = 8) -> MetricReport:
    """Metric report for every head the network carries; absent tasks stay None."""
    heads = eval_heads(spec)
    columns, gt = collect_predictions(spec, state, eval_view, batch_size)
    report = MetricReport()
    for label, head in heads.items():
        pred = columns[label]
        if isinstance(head, SegHead):
            report.miou, report.pixel_acc = seg_metrics(pred, gt["seg"], head.classes)
        elif isinstance(head, DepthHead):
            (report.abs_rel, report.sqr_rel, report.delta1, report.delta2,
             report.delta3) = depth_metrics(pred, gt["depth"], gt["mask"])
        else:
            (report.angle_mean, report.angle_median, report.within_1125,
             report.within_225, report.within_30) = normal_metrics(
                pred, gt["normal"], gt["mask"])
            report.eps_normalized = count_eps_normals(pred, gt["mask"])
    return report.validate()
