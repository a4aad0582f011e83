"""Block-wise knowledge amalgamation.

A compact student learns from frozen single-task teachers using
unlabeled images only.  Per block, the student's features are projected
through per-task channel codings and grafted into each teacher's
network, which is resumed from that block to produce predictions; the
loss compares those against the teacher's own full-forward outputs.
After all blocks are trained, each task branches out of the student at
the block whose loss was lowest, teacher tails are transplanted behind
the branch codings, and the assembled multi-head network is fine-tuned
(still against teacher outputs, never ground truth).

Two extensions: a third teacher can join the per-block loss directly
(offline), or an already-amalgamated two-task student can itself serve
as a frozen teacher while a new task is learned (online).
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng
from . import tensor as T
from .errors import ConfigurationError, DataError, TrainingDivergence
from .losses import EPS, depth_loss, feature_l2_loss, norm_loss, seg_loss
from .metrics import (MetricReport, count_eps_normals, depth_metrics,
                      normal_metrics, seg_metrics)
from .nets import (Branch, ChannelCoding, ModelState, MultiHead, NetworkSpec,
                   channel_code, count_params, depth_decode, forward,
                   forward_from, init_coding, init_state, one_hot_supervision,
                   param_specs, run_trunk)
from .optim import SGD, desk_profile
from .training import batch_ranges, evaluate, head_task

# loss terms always compose in this order, so a zero-weighted trailing
# task leaves the leading terms' float arithmetic untouched
TASK_ORDER = ("depth", "seg", "norm")


# ---------------------------------------------------------------------------
# domain types

@dataclass
class AmalgamationConfig:
    """Loss weights lam1/lam2/lam3 apply to depth/seg/norm terms in the
    offline losses, and to the norm/grafted-pair split in the online one."""

    lam1: float = 1.0
    lam2: float = 1.0
    lam3: float = 1.0
    loss_mode: str = "graft"      # "graft" | "feat-l2"
    epochs_per_block: int = 2
    fine_tune_epochs: int = 4
    batch_size: int = 8
    seed: int = 0
    optim: object = field(default_factory=desk_profile)

    def validate(self) -> "AmalgamationConfig":
        lams = (self.lam1, self.lam2, self.lam3)
        if any(l < 0 for l in lams):
            raise ConfigurationError(f"loss weights must be >= 0, got {lams}")
        if all(l == 0 for l in lams):
            raise ConfigurationError("at least one loss weight must be positive")
        if self.loss_mode not in ("graft", "feat-l2"):
            raise ConfigurationError(f"unknown loss mode {self.loss_mode!r}")
        if self.epochs_per_block < 1:
            raise ConfigurationError("epochs_per_block must be >= 1")
        if self.fine_tune_epochs < 0:
            raise ConfigurationError("fine_tune_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        self.optim.validate()
        return self

    def weights(self) -> dict:
        return {"depth": self.lam1, "seg": self.lam2, "norm": self.lam3}


@dataclass
class BlockLossTable:
    """Per-task end-of-block losses, one entry per block 1..N."""

    losses: dict

    def add(self, block_losses: dict):
        for task, v in block_losses.items():
            self.losses.setdefault(task, []).append(float(v))

    def validate(self, n_blocks: int) -> "BlockLossTable":
        for task, row in self.losses.items():
            if len(row) != n_blocks:
                raise ConfigurationError(
                    f"loss table for {task} covers {len(row)} of {n_blocks} blocks")
            if not np.isfinite(row).all():
                raise DataError(f"loss table for {task} contains non-finite entries")
        return self

    def to_dict(self) -> dict:
        return {task: list(row) for task, row in self.losses.items()}

    def text_table(self, plan=None) -> str:
        n = max(len(r) for r in self.losses.values())
        lines = ["block     " + "".join(f"{i:>10d}" for i in range(1, n + 1))]
        for task in sorted(self.losses):
            cells = []
            for i, v in enumerate(self.losses[task], start=1):
                mark = "*" if plan is not None and plan.points.get(task) == i else " "
                cells.append(f"{v:>9.5f}{mark}")
            lines.append(f"L_{task:<8}" + "".join(cells))
        return "\n".join(lines)


@dataclass
class BranchOutPlan:
    """Chosen branch block per task, plus the student decoder blocks that
    fall after the last branch and are therefore dropped."""

    points: dict
    removed_blocks: tuple = ()

    def validate(self, n_blocks: int) -> "BranchOutPlan":
        half = n_blocks // 2
        if not self.points:
            raise ConfigurationError("a branch-out plan needs at least one task")
        for task, p in self.points.items():
            if not half < p <= n_blocks:
                raise ConfigurationError(
                    f"branch point for {task} must lie in ({half}, {n_blocks}], got {p}")
        expected = tuple(range(max(self.points.values()) + 1, n_blocks + 1))
        if tuple(self.removed_blocks) != expected:
            raise ConfigurationError(
                f"removed blocks {self.removed_blocks} do not follow the last "
                f"branch point (expected {expected})")
        return self

    @property
    def last_branch(self) -> int:
        return max(self.points.values())

    def to_dict(self) -> dict:
        d = {f"p_{task}": p for task, p in sorted(self.points.items())}
        d["removed_blocks"] = list(self.removed_blocks)
        return d


@dataclass
class BlockwiseStudent:
    """Trunk under block-wise training plus every per-block coding learned
    along the way, keyed by (task, block)."""

    spec: NetworkSpec
    state: ModelState
    codings: dict


@dataclass
class AmalgamationReport:
    table: BlockLossTable
    plan: BranchOutPlan
    teacher_params: dict
    student_params: int
    metrics: object = None           # MetricReport or None
    fine_tune_curve: list = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)
    wall_time: float = 0.0           # informational; kept out of to_dict
    target_spec: object = field(default=None, repr=False)
    target_state: object = field(default=None, repr=False)

    def validate(self) -> "AmalgamationReport":
        total = sum(self.teacher_params.values())
        if not self.student_params < total:
            raise ConfigurationError(
                f"assembled student has {self.student_params} parameters, not fewer "
                f"than the {total} of its teachers")
        return self

    def to_dict(self) -> dict:
        return {
            "config": dict(self.config_echo),
            "loss_table": self.table.to_dict(),
            "plan": self.plan.to_dict(),
            "params": {"student": self.student_params,
                       "teachers": dict(self.teacher_params),
                       "teacher_total": sum(self.teacher_params.values())},
            "fine_tune_curve": list(self.fine_tune_curve),
            "metrics": self.metrics.to_dict() if self.metrics is not None else None,
        }

    def text_report(self) -> str:
        parts = [self.table.text_table(self.plan),
                 "branch out: " + ", ".join(
                     f"{task} at block {p}" for task, p in sorted(self.plan.points.items())),
                 f"params: student {self.student_params} vs teachers "
                 f"{sum(self.teacher_params.values())}"]
        if self.metrics is not None:
            parts.append(self.metrics.text_block())
        return "\n".join(parts)


# ---------------------------------------------------------------------------
# shared machinery

def _teacher_map(student_spec, teachers) -> dict:
    """Canonically ordered task -> (spec, state), validated against the
    student's architecture."""
    found = {}
    for tspec, tstate in teachers:
        task = head_task(tspec.head)
        if task in found:
            raise ConfigurationError(f"two teachers both predict {task}")
        if not tspec.same_structure(student_spec):
            raise ConfigurationError(
                f"{task} teacher does not share the student architecture: "
                f"{tspec.widths} vs {student_spec.widths}")
        found[task] = (tspec, tstate)
    return {task: found[task] for task in TASK_ORDER if task in found}


def _require_frozen(tmap):
    for task, (_, tstate) in tmap.items():
        if any(t.requires_grad for t in tstate.params.values()):
            raise ConfigurationError(
                f"{task} teacher has trainable parameters; teachers stay frozen")


def _freeze_copies(tmap) -> dict:
    return {task: (tspec, tstate.copy(trainable=False))
            for task, (tspec, tstate) in tmap.items()}


def _unit_field(m: np.ndarray) -> np.ndarray:
    # same eps rule as the loss-side normalizer
    return m / np.sqrt((m * m).sum(axis=1, keepdims=True) + EPS * EPS)


def teacher_supervision(tmap, images: T.Tensor) -> dict:
    """Each teacher's own full-forward prediction, decoded into a target:
    hard labels for seg, metric depth for depth, unit normals for norm."""
    sup = {}
    for task, (tspec, tstate) in tmap.items():
        pred, _ = forward(tspec, tstate, images)
        if task == "seg":
            sup[task] = one_hot_supervision(pred)
        elif task == "depth":
            sup[task] = depth_decode(pred, tspec.head).data
        else:
            sup[task] = _unit_field(pred.data)
    return sup


def _graft_loss(task: str, head, logits: T.Tensor, target) -> T.Tensor:
    if task == "seg":
        return seg_loss(T.softmax_channels(logits), target)
    if task == "depth":
        mask = np.ones((target.shape[0], 1) + target.shape[2:])
        return depth_loss(target, depth_decode(logits, head), mask)
    return norm_loss(target, logits)


def _weighted_sum(per_task: dict, weights: dict) -> T.Tensor:
    total = None
    for task in TASK_ORDER:
        if task not in per_task:
            continue
        term = per_task[task] * weights[task]
        total = term if total is None else total + term
    return total


def _coding_items(label: str, coding: ChannelCoding):
    return [(f"{label}.coding.{name}", t)
            for name, t in (("w1", coding.w1), ("b1", coding.b1),
                            ("w2", coding.w2), ("b2", coding.b2))]


def _block_optimizer(state: ModelState, n: int, codings: dict, config) -> SGD:
    state.set_trainable(False)
    state.set_trainable(True, prefix=f"block{n}.")
    params = state.trainable_items()
    for label, coding in codings.items():
        params.extend(_coding_items(label, coding))
    return SGD(params, config.optim)


def _schedule(config, steps_per_epoch: int, epochs: int):
    if config.optim.poly_power > 0 and config.optim.total_steps == 0:
        return replace(config, optim=replace(
            config.optim, total_steps=steps_per_epoch * epochs))
    return config


def _diverged(value: float, where: dict):
    if not np.isfinite(value):
        raise TrainingDivergence(
            f"loss became {value} during {where.get('phase', 'training')}",
            report=dict(where, last_loss=value))


# ---------------------------------------------------------------------------
# block-wise training

def train_block(n: int, student, teachers, codings: dict, data, config) -> dict:
    """Train student block n and the per-task codings by grafting.

    For each batch the student runs to F_u^n; each teacher resumes from
    block n on the coding-projected features, and its output is scored
    against the teacher's own full-forward prediction.  Only block-n
    parameters and the codings move.  Returns the final epoch's mean
    per-task losses (the block's row in the loss table).
    """
    config.validate()
    spec, state = student
    if not 1 <= n <= spec.n_blocks:
        raise ConfigurationError(f"block {n} outside 1..{spec.n_blocks}")
    tmap = _teacher_map(spec, teachers)
    _require_frozen(tmap)
    if set(codings) != set(tmap):
        raise ConfigurationError(
            f"codings cover {sorted(codings)} but teachers cover {sorted(tmap)}")
    want = spec.widths[n - 1]
    for task, coding in codings.items():
        if coding.channels != want:
            raise ConfigurationError(
                f"{task} coding carries {coding.channels} channels, block {n} "
                f"features carry {want}")

    chunks = batch_ranges(data.count, config.batch_size)
    cfg = _schedule(config, len(chunks), config.epochs_per_block)
    opt = _block_optimizer(state, n, codings, cfg)
    weights = cfg.weights()
    means = {}
    for epoch in range(cfg.epochs_per_block):
        order = rng.stream(cfg.seed, "amalgamate", "batches", n, epoch).permutation(data.count)
        sums = {task: 0.0 for task in tmap}
        for chunk in chunks:
            images = T.constant(data.images([int(order[i]) for i in chunk]))
            sup = teacher_supervision(tmap, images)
            f_u = run_trunk(spec, state, images, upto=n)[-1]
            per_task = {}
            for task, (tspec, tstate) in tmap.items():
                grafted = forward_from(tspec, tstate, n, channel_code(codings[task], f_u))
                per_task[task] = _graft_loss(task, tspec.head, grafted, sup[task])
            total = _weighted_sum(per_task, weights)
            _diverged(total.item(), {"phase": "train_block", "block": n, "epoch": epoch})
            T.backward(total)
            opt.step()
            opt.zero_grad()
            for task in tmap:
                sums[task] += per_task[task].item()
        means = {task: sums[task] / len(chunks) for task in tmap}
    return means


def train_block_featmode(n: int, student, teachers, codings: dict, data, config) -> dict:
    """Same contract as train_block with the feature-space alternative:
    the codings chase the teachers' own block-n features under L2."""
    config.validate()
    spec, state = student
    if not 1 <= n <= spec.n_blocks:
        raise ConfigurationError(f"block {n} outside 1..{spec.n_blocks}")
    tmap = _teacher_map(spec, teachers)
    _require_frozen(tmap)
    if set(tmap) != {"depth", "seg"}:
        raise ConfigurationError(
            "feature-space training is defined for the depth+seg teacher pair")
    if set(codings) != set(tmap):
        raise ConfigurationError("codings must cover exactly the teacher tasks")

    chunks = batch_ranges(data.count, config.batch_size)
    cfg = _schedule(config, len(chunks), config.epochs_per_block)
    opt = _block_optimizer(state, n, codings, cfg)
    means = {}
    for epoch in range(cfg.epochs_per_block):
        order = rng.stream(cfg.seed, "amalgamate", "batches", n, epoch).permutation(data.count)
        sums = {"depth": 0.0, "seg": 0.0}
        for chunk in chunks:
            images = T.constant(data.images([int(order[i]) for i in chunk]))
            f_u = run_trunk(spec, state, images, upto=n)[-1]
            refs, projs = {}, {}
            for task, (tspec, tstate) in tmap.items():
                refs[task] = run_trunk(tspec, tstate, images, upto=n)[-1]
                projs[task] = channel_code(codings[task], f_u)
            total = feature_l2_loss(projs["depth"], refs["depth"],
                                    projs["seg"], refs["seg"], cfg.lam1, cfg.lam2)
            _diverged(total.item(), {"phase": "train_block_featmode",
                                     "block": n, "epoch": epoch})
            T.backward(total)
            opt.step()
            opt.zero_grad()
            for task in sums:
                diff = projs[task].data - refs[task].data
                sums[task] += float((diff * diff).sum())
        means = {task: sums[task] / len(chunks) for task in sums}
    return means


# ---------------------------------------------------------------------------
# branch-out and assembly

def select_branch_out(table: BlockLossTable, n_blocks: int) -> BranchOutPlan:
    """Per-task argmin over the decoder half (N/2, N]; ties take the larger
    block, which leaves a smaller assembled network."""
    table.validate(n_blocks)
    half = n_blocks // 2
    points = {}
    for task, row in table.losses.items():
        best = None
        for i in range(half + 1, n_blocks + 1):
            if best is None or row[i - 1] <= row[best - 1]:
                best = i
        points[task] = best
    removed = tuple(range(max(points.values()) + 1, n_blocks + 1))
    return BranchOutPlan(points, removed).validate(n_blocks)


def assemble_target(student: BlockwiseStudent, teachers, plan: BranchOutPlan):
    """Compose the multi-head target: student trunk through the last branch
    point, then per task the branch coding followed by that teacher's
    decoder tail and head.  Returns (spec, state) with everything trainable.
    """
    tmap = _teacher_map(student.spec, teachers)
    n_blocks = student.spec.n_blocks
    plan.validate(n_blocks)
    if set(plan.points) != set(tmap):
        raise ConfigurationError(
            f"plan covers {sorted(plan.points)} but teachers cover {sorted(tmap)}")
    branches = tuple(Branch(task, plan.points[task], tmap[task][0].head)
                     for task in TASK_ORDER if task in tmap)
    spec = NetworkSpec(student.spec.widths, student.spec.convs_per_block,
                       student.spec.in_channels, MultiHead(branches)).validate()
    params = {}
    for key, shape in param_specs(spec):
        if key.startswith("block"):
            src = student.state.require(key)
        else:
            task, rest = key.split(".", 1)
            if rest.startswith("coding."):
                coding = student.codings.get((task, plan.points[task]))
                if coding is None:
                    raise ConfigurationError(
                        f"no trained {task} coding at block {plan.points[task]}")
                src = getattr(coding, rest.split(".", 1)[1])
            else:
                src = tmap[task][1].require(rest)
        if src.data.shape != shape:
            raise ConfigurationError(
                f"assembly source for {key} has shape {src.data.shape}, wants {shape}")
        params[key] = T.Tensor(src.data.copy(), requires_grad=True)
    state = ModelState(params)
    count_params(spec, state)
    return spec, state


def fine_tune(target, teachers, data, config, eval_view=None):
    """Joint training of the assembled network against teacher outputs.

    Every target parameter is trainable; teachers stay frozen and still
    provide all supervision.  Returns (per-epoch loss curve, evaluation
    on the held-out view or None).
    """
    config.validate()
    spec, state = target
    tmap = _teacher_map(spec, teachers)
    _require_frozen(tmap)
    heads = {br.task: br.head for br in spec.head.branches}
    if set(heads) != set(tmap):
        raise ConfigurationError(
            f"target predicts {sorted(heads)} but teachers cover {sorted(tmap)}")
    state.set_trainable(True)
    weights = config.weights()
    chunks = batch_ranges(data.count, config.batch_size)
    cfg = _schedule(config, len(chunks), config.fine_tune_epochs)
    curve = []
    if cfg.fine_tune_epochs > 0:
        opt = SGD(state.trainable_items(), cfg.optim)
        for epoch in range(cfg.fine_tune_epochs):
            order = rng.stream(cfg.seed, "fine-tune", "batches", epoch).permutation(data.count)
            batch_losses = []
            for chunk in chunks:
                images = T.constant(data.images([int(order[i]) for i in chunk]))
                sup = teacher_supervision(tmap, images)
                preds, _ = forward(spec, state, images)
                per_task = {task: _graft_loss(task, heads[task], preds[task], sup[task])
                            for task in tmap}
                total = _weighted_sum(per_task, weights)
                _diverged(total.item(), {"phase": "fine_tune", "epoch": epoch,
                                         "curve": curve})
                T.backward(total)
                opt.step()
                opt.zero_grad()
                batch_losses.append(total.item())
            curve.append(float(np.mean(batch_losses)))
    report = evaluate(spec, state, eval_view) if eval_view is not None else None
    return curve, report


# ---------------------------------------------------------------------------
# whole-pipeline drivers

def _trunk_spec(student_spec) -> NetworkSpec:
    return NetworkSpec(student_spec.widths, student_spec.convs_per_block,
                       student_spec.in_channels, None).validate()


def _blockwise(student_spec, tmap, data, config) -> tuple:
    trunk = _trunk_spec(student_spec)
    state = init_state(trunk, config.seed, labels=("student",))
    student = BlockwiseStudent(trunk, state, {})
    table = BlockLossTable({task: [] for task in tmap})
    trainer = train_block if config.loss_mode == "graft" else train_block_featmode
    for n in range(1, trunk.n_blocks + 1):
        codings = {task: init_coding(trunk.widths[n - 1], config.seed,
                                     "coding", task, n)
                   for task in tmap}
        losses = trainer(n, (trunk, state), list(tmap.values()), codings, data, config)
        table.add(losses)
        for task, coding in codings.items():
            student.codings[(task, n)] = coding
    return student, table


def _amalgamate(student_spec, teachers, data, config, eval_view):
    t0 = time.perf_counter()
    tmap = _freeze_copies(_teacher_map(student_spec, teachers))
    teacher_list = list(tmap.values())
    student, table = _blockwise(student_spec, tmap, data, config)
    plan = select_branch_out(table, student.spec.n_blocks)
    target_spec, target_state = assemble_target(student, teacher_list, plan)
    curve, metrics = fine_tune((target_spec, target_state), teacher_list,
                               data, config, eval_view)
    report = AmalgamationReport(
        table=table, plan=plan,
        teacher_params={task: count_params(tspec, tstate)
                        for task, (tspec, tstate) in tmap.items()},
        student_params=count_params(target_spec, target_state),
        metrics=metrics, fine_tune_curve=curve,
        config_echo=_config_echo(config),
        wall_time=time.perf_counter() - t0,
        target_spec=target_spec, target_state=target_state)
    return report.validate()


def _config_echo(config) -> dict:
    return {"loss_mode": config.loss_mode, "seed": config.seed,
            "lam1": config.lam1, "lam2": config.lam2, "lam3": config.lam3,
            "epochs_per_block": config.epochs_per_block,
            "fine_tune_epochs": config.fine_tune_epochs,
            "batch_size": config.batch_size}


def amalgamate_two(student_spec, segnet, depthnet, data, config,
                   eval_view=None) -> AmalgamationReport:
    """Full two-teacher pipeline: block-wise training 1..N, branch-out
    selection, assembly, fine-tuning.  `data` carries images only."""
    config.validate()
    if head_task(segnet[0].head) != "seg" or head_task(depthnet[0].head) != "depth":
        raise ConfigurationError("amalgamate_two expects (segnet, depthnet) in that order")
    return _amalgamate(student_spec, [depthnet, segnet], data, config, eval_view)


def amalgamate_offline3(student_spec, segnet, depthnet, normnet, data, config,
                        eval_view=None) -> AmalgamationReport:
    """Three teachers in one per-block loss; the third coding channel feeds
    the normal-prediction teacher, weighted by lam3."""
    config.validate()
    if config.loss_mode != "graft":
        raise ConfigurationError(
            "the feature-space alternative is defined for the two-teacher scheme")
    kinds = (head_task(segnet[0].head), head_task(depthnet[0].head),
             head_task(normnet[0].head))
    if kinds != ("seg", "depth", "norm"):
        raise ConfigurationError(
            f"amalgamate_offline3 expects (segnet, depthnet, normnet), got {kinds}")
    return _amalgamate(student_spec, [depthnet, segnet, normnet], data, config, eval_view)


# ---------------------------------------------------------------------------
# online extension: a trained two-task student becomes a frozen teacher

@dataclass
class OnlineStudent:
    """Three-task composite: a fresh trunk feeding the frozen two-task
    network through the U coding and the frozen norm teacher through the
    M coding, each attached at its selected block."""

    trunk_spec: NetworkSpec
    trunk_state: ModelState
    u_coding: ChannelCoding
    m_coding: ChannelCoding
    attach_u: int
    attach_m: int
    target2: tuple
    normnet: tuple

    def predict(self, images: T.Tensor) -> dict:
        feats = run_trunk(self.trunk_spec, self.trunk_state, images,
                          upto=max(self.attach_u, self.attach_m))
        preds = dict(forward_from(self.target2[0], self.target2[1], self.attach_u,
                                  channel_code(self.u_coding, feats[self.attach_u - 1])))
        preds["norm"] = forward_from(self.normnet[0], self.normnet[1], self.attach_m,
                                     channel_code(self.m_coding, feats[self.attach_m - 1]))
        return preds

    def own_param_count(self) -> int:
        last = max(self.attach_u, self.attach_m)
        trunk = sum(t.data.size for key, t in self.trunk_state.params.items()
                    if int(key.split(".")[0][len("block"):]) <= last)
        return trunk + self.u_coding.param_count() + self.m_coding.param_count()


def _target2_supervision(spec2, frozen2, heads2, specn, frozenn, images):
    preds2, _ = forward(spec2, frozen2, images)
    mpred, _ = forward(specn, frozenn, images)
    return {"seg": one_hot_supervision(preds2["seg"]),
            "depth": depth_decode(preds2["depth"], heads2["depth"]).data,
            "norm": _unit_field(mpred.data)}


def _online_losses(student3, n, u, m, sup, images, heads2, config):
    """(L_norm, L_depth, L_seg, L_u2, total) for one batch at block n."""
    spec2, frozen2 = student3.target2
    specn, frozenn = student3.normnet
    f_u3 = run_trunk(student3.trunk_spec, student3.trunk_state, images, upto=n)[-1]
    t2hat = forward_from(spec2, frozen2, n, channel_code(u, f_u3))
    l_depth = _graft_loss("depth", heads2["depth"], t2hat["depth"], sup["depth"])
    l_seg = _graft_loss("seg", heads2["seg"], t2hat["seg"], sup["seg"])
    l_u2 = _weighted_sum({"depth": l_depth, "seg": l_seg},
                         {"depth": config.lam1, "seg": config.lam2})
    mhat = forward_from(specn, frozenn, n, channel_code(m, f_u3))
    l_norm = _graft_loss("norm", specn.head, mhat, sup["norm"])
    total = l_norm * config.lam1 + l_u2 * config.lam2
    return l_norm, l_depth, l_seg, l_u2, total


def amalgamate_online(target2, normnet, data, config, eval_view=None):
    """Learn a third task while treating the two-task network as a frozen
    teacher reached through the U coding.  Per block the new trunk's
    features project into both frozen nets; the loss is
    lam1 * L_norm + lam2 * L_u2, with L_u2 the grafted two-task loss
    against the two-task network's own predictions.  Returns
    (OnlineStudent, AmalgamationReport).
    """
    config.validate()
    if config.loss_mode != "graft":
        raise ConfigurationError("online amalgamation grafts; there is no feature mode")
    t0 = time.perf_counter()
    spec2, state2 = target2
    specn, staten = normnet
    if not isinstance(spec2.head, MultiHead):
        raise ConfigurationError("the online path starts from a multi-head two-task network")
    if head_task(specn.head) != "norm":
        raise ConfigurationError("the incoming teacher must predict surface normals")
    if not spec2.same_structure(specn):
        raise ConfigurationError(
            f"two-task network and norm teacher disagree structurally: "
            f"{spec2.widths} vs {specn.widths}")
    heads2 = {br.task: br.head for br in spec2.head.branches}
    if set(heads2) != {"seg", "depth"}:
        raise ConfigurationError(f"two-task network must predict seg+depth, has {sorted(heads2)}")

    frozen2 = state2.copy(trainable=False)
    frozenn = staten.copy(trainable=False)
    trunk = _trunk_spec(specn)
    state3 = init_state(trunk, config.seed, labels=("student3",))
    student3 = OnlineStudent(trunk, state3, None, None, 0, 0,
                             (spec2, frozen2), (specn, frozenn))

    chunks = batch_ranges(data.count, config.batch_size)
    cfg = _schedule(config, len(chunks), config.epochs_per_block)
    table = BlockLossTable({"norm": [], "u2": [], "depth": [], "seg": []})
    codings = {}
    for n in range(1, trunk.n_blocks + 1):
        u = init_coding(trunk.widths[n - 1], cfg.seed, "coding", "u", n)
        m = init_coding(trunk.widths[n - 1], cfg.seed, "coding", "m", n)
        opt = _block_optimizer(state3, n, {"u": u, "m": m}, cfg)
        means = {}
        for epoch in range(cfg.epochs_per_block):
            order = rng.stream(cfg.seed, "amalgamate", "batches", n, epoch).permutation(data.count)
            sums = {"norm": 0.0, "u2": 0.0, "depth": 0.0, "seg": 0.0}
            for chunk in chunks:
                images = T.constant(data.images([int(order[i]) for i in chunk]))
                sup = _target2_supervision(spec2, frozen2, heads2, specn, frozenn, images)
                l_norm, l_depth, l_seg, l_u2, total = _online_losses(
                    student3, n, u, m, sup, images, heads2, cfg)
                _diverged(total.item(), {"phase": "online", "block": n, "epoch": epoch})
                T.backward(total)
                opt.step()
                opt.zero_grad()
                for name, t in (("norm", l_norm), ("u2", l_u2),
                                ("depth", l_depth), ("seg", l_seg)):
                    sums[name] += t.item()
            means = {name: sums[name] / len(chunks) for name in sums}
        table.add(means)
        codings[("u", n)] = u
        codings[("m", n)] = m

    selection = select_branch_out(
        BlockLossTable({"norm": table.losses["norm"], "u2": table.losses["u2"]}),
        trunk.n_blocks)
    student3.attach_m = selection.points["norm"]
    student3.attach_u = selection.points["u2"]
    student3.m_coding = codings[("m", student3.attach_m)]
    student3.u_coding = codings[("u", student3.attach_u)]
    plan = BranchOutPlan(dict(selection.points), selection.removed_blocks)

    curve = _online_fine_tune(student3, heads2, data, cfg)
    metrics = _evaluate_online(student3, heads2, eval_view) if eval_view is not None else None
    # the composite keeps both donor networks whole, so the strict
    # smaller-than-teachers check of the offline assembly does not apply;
    # the report carries the added cost (trunk + codings) alongside
    report = AmalgamationReport(
        table=table, plan=plan,
        teacher_params={"target2": count_params(spec2, state2),
                        "norm": count_params(specn, staten)},
        student_params=student3.own_param_count(),
        metrics=metrics, fine_tune_curve=curve,
        config_echo=_config_echo(config),
        wall_time=time.perf_counter() - t0)
    return student3, report


def _online_fine_tune(student3, heads2, data, config):
    """Joint tuning of the retained trunk and the two selected codings;
    both attached networks stay frozen throughout."""
    last = max(student3.attach_u, student3.attach_m)
    state3 = student3.trunk_state
    state3.set_trainable(False)
    for n in range(1, last + 1):
        state3.set_trainable(True, prefix=f"block{n}.")
    params = state3.trainable_items()
    params.extend(_coding_items("u", student3.u_coding))
    params.extend(_coding_items("m", student3.m_coding))
    chunks = batch_ranges(data.count, config.batch_size)
    cfg = _schedule(config, len(chunks), config.fine_tune_epochs)
    curve = []
    if cfg.fine_tune_epochs == 0:
        return curve
    opt = SGD(params, cfg.optim)
    spec2, frozen2 = student3.target2
    specn, frozenn = student3.normnet
    for epoch in range(cfg.fine_tune_epochs):
        order = rng.stream(cfg.seed, "fine-tune", "batches", epoch).permutation(data.count)
        batch_losses = []
        for chunk in chunks:
            images = T.constant(data.images([int(order[i]) for i in chunk]))
            sup = _target2_supervision(spec2, frozen2, heads2, specn, frozenn, images)
            preds = student3.predict(images)
            l_depth = _graft_loss("depth", heads2["depth"], preds["depth"], sup["depth"])
            l_seg = _graft_loss("seg", heads2["seg"], preds["seg"], sup["seg"])
            l_u2 = _weighted_sum({"depth": l_depth, "seg": l_seg},
                                 {"depth": cfg.lam1, "seg": cfg.lam2})
            l_norm = _graft_loss("norm", specn.head, preds["norm"], sup["norm"])
            total = l_norm * cfg.lam1 + l_u2 * cfg.lam2
            _diverged(total.item(), {"phase": "online fine_tune", "epoch": epoch,
                                     "curve": curve})
            T.backward(total)
            opt.step()
            opt.zero_grad()
            batch_losses.append(total.item())
        curve.append(float(np.mean(batch_losses)))
    return curve


def _evaluate_online(student3, heads2, eval_view, batch_size: int = 8) -> MetricReport:
    seg_head = heads2["seg"]
    depth_head = heads2["depth"]
    preds = {"seg": [], "depth": [], "norm": []}
    gt = {"seg": [], "depth": [], "normal": [], "mask": []}
    for chunk in batch_ranges(len(eval_view), batch_size):
        samples = [eval_view.sample(i) for i in chunk]
        images = T.constant(np.stack([s.image for s in samples]))
        out = student3.predict(images)
        preds["seg"].append(one_hot_supervision(out["seg"]))
        preds["depth"].append(depth_decode(out["depth"], depth_head).data[:, 0])
        preds["norm"].append(out["norm"].data)
        for s in samples:
            gt["seg"].append(s.seg)
            gt["depth"].append(s.depth)
            gt["normal"].append(s.normal)
            gt["mask"].append(s.mask)
    pooled = {k: np.concatenate(v) for k, v in preds.items()}
    refs = {k: np.stack(v) for k, v in gt.items()}
    report = MetricReport()
    report.miou, report.pixel_acc = seg_metrics(pooled["seg"], refs["seg"], seg_head.classes)
    (report.abs_rel, report.sqr_rel, report.delta1, report.delta2,
     report.delta3) = depth_metrics(pooled["depth"], refs["depth"], refs["mask"])
    (report.angle_mean, report.angle_median, report.within_1125,
     report.within_225, report.within_30) = normal_metrics(
        pooled["norm"], refs["normal"], refs["mask"])
    report.eps_normalized = count_eps_normals(pooled["norm"], refs["mask"])
    return report.validate()
