"""Encoder-decoder networks with per-block feature capture and injection.

A network is N blocks (N even): blocks 1..N/2 are encoder blocks (convs,
then 2x2 max pool), blocks N/2+1..N are decoder blocks (convs, then 2x
nearest upsample). Every conv is 3x3, pad 1, followed by relu, so all
feature maps inside a block share one resolution. A head is a single 3x3
conv producing raw per-pixel outputs: class logits, depth-bin logits, or
normal components.

``forward`` returns the prediction together with each block's terminal
feature map; ``forward_from`` resumes computation at block n+1 from an
injected feature tensor. Multi-head networks add task branches that leave
the shared trunk at a chosen block through a channel-coding adapter and
continue with their own copies of the remaining decoder blocks.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import rng
from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class SegHead:
    classes: int


@dataclass(frozen=True)
class DepthHead:
    bins: int
    bin_len: float

    def __post_init__(self):
        if self.bins < 2 or self.bin_len <= 0:
            raise ConfigurationError(
                f"depth head needs >= 2 bins of positive length, got {self.bins}, {self.bin_len}")


@dataclass(frozen=True)
class NormalHead:
    pass


@dataclass(frozen=True)
class Branch:
    """One task-specific stream of a multi-head network.

    `entry` is the trunk block whose features the branch consumes through
    its coding adapter; the branch then owns private copies of blocks
    entry+1..N and its head.
    """
    task: str
    entry: int
    head: object


@dataclass(frozen=True)
class MultiHead:
    branches: tuple


def head_channels(head) -> int:
    if isinstance(head, SegHead):
        return head.classes
    if isinstance(head, DepthHead):
        return head.bins
    if isinstance(head, NormalHead):
        return 3
    raise ConfigurationError(f"unknown head kind: {head!r}")


@dataclass(frozen=True)
class NetworkSpec:
    widths: tuple
    convs_per_block: int = 2
    in_channels: int = 3
    head: object = None

    @property
    def n_blocks(self) -> int:
        return len(self.widths)

    @property
    def trunk_len(self) -> int:
        if isinstance(self.head, MultiHead):
            return max(b.entry for b in self.head.branches)
        return self.n_blocks

    def block_in(self, n: int) -> int:
        return self.in_channels if n == 1 else self.widths[n - 2]

    def is_encoder(self, n: int) -> bool:
        return n <= self.n_blocks // 2

    def feature_hw(self, n: int, h: int, w: int):
        """Spatial size of block n's terminal (post pool/upsample) features."""
        half = self.n_blocks // 2
        s = 2 ** n if n <= half else 2 ** (self.n_blocks - n)
        return h // s, w // s

    def validate(self) -> "NetworkSpec":
        n = self.n_blocks
        if n == 0:
            if self.head is not None:
                raise ConfigurationError("headless empty spec is the only valid empty spec")
            return self
        if n % 2:
            raise ConfigurationError(f"block count must be even, got {n}")
        if any(w < 1 for w in self.widths):
            raise ConfigurationError(f"block widths must be positive, got {self.widths}")
        if self.convs_per_block not in (2, 3):
            raise ConfigurationError(
                f"blocks hold 2 or 3 conv layers, got {self.convs_per_block}")
        if self.in_channels < 1:
            raise ConfigurationError(f"in_channels must be positive, got {self.in_channels}")
        # decoder block k consumes features shaped like encoder block N-k's
        # output, so interior widths must mirror: width[k-1] == width[N-k+1-1]
        for k in range(n // 2 + 1, n + 1):
            if self.block_in(k) != self.widths[n - k]:
                raise ConfigurationError(
                    f"decoder block {k} takes {self.block_in(k)} channels but mirrors "
                    f"encoder block {n + 1 - k} with width {self.widths[n - k]}")
        if isinstance(self.head, MultiHead):
            tasks = [b.task for b in self.head.branches]
            if len(set(tasks)) != len(tasks) or not tasks:
                raise ConfigurationError(f"branch tasks must be unique and nonempty: {tasks}")
            for b in self.head.branches:
                if not n // 2 < b.entry <= n:
                    raise ConfigurationError(
                        f"branch '{b.task}' enters at block {b.entry}, outside ({n // 2}, {n}]")
                if isinstance(b.head, MultiHead):
                    raise ConfigurationError("branches cannot nest multi-head specs")
                head_channels(b.head)
        elif self.head is not None:
            head_channels(self.head)
        return self

    def same_structure(self, other: "NetworkSpec") -> bool:
        """Equal topology ignoring the head (the shared-architecture rule)."""
        return (self.widths == other.widths
                and self.convs_per_block == other.convs_per_block
                and self.in_channels == other.in_channels)


CODING_REDUCTION = 4


def coding_hidden(channels: int, r: int = CODING_REDUCTION) -> int:
    return max(1, channels // r)


def coding_param_count(channels: int, r: int = CODING_REDUCTION) -> int:
    h = coding_hidden(channels, r)
    return 2 * channels * h + h + channels


def param_specs(spec: NetworkSpec):
    """Yield (key, shape) for every parameter, in canonical order.

    Canonical order is the forward-execution order: trunk blocks, then
    (for multi-head specs) each branch's coding, tail blocks, and head.
    This single generator drives initialization, counting, and the
    checkpoint manifest, so they can never disagree.
    """
    spec.validate()

    def block_entries(prefix, n):
        for j in range(1, spec.convs_per_block + 1):
            cin = spec.block_in(n) if j == 1 else spec.widths[n - 1]
            yield f"{prefix}block{n}.conv{j}.w", (spec.widths[n - 1], cin, 3, 3)
            yield f"{prefix}block{n}.conv{j}.b", (1, spec.widths[n - 1], 1, 1)

    for n in range(1, spec.trunk_len + 1):
        yield from block_entries("", n)
    if isinstance(spec.head, MultiHead):
        for b in spec.head.branches:
            c = spec.widths[b.entry - 1]
            h = coding_hidden(c)
            yield f"{b.task}.coding.w1", (h, c, 1, 1)
            yield f"{b.task}.coding.b1", (1, h, 1, 1)
            yield f"{b.task}.coding.w2", (c, h, 1, 1)
            yield f"{b.task}.coding.b2", (1, c, 1, 1)
            for n in range(b.entry + 1, spec.n_blocks + 1):
                yield from block_entries(f"{b.task}.", n)
            yield f"{b.task}.head.w", (head_channels(b.head), spec.widths[-1], 3, 3)
            yield f"{b.task}.head.b", (1, head_channels(b.head), 1, 1)
    elif spec.head is not None:
        yield "head.w", (head_channels(spec.head), spec.widths[-1], 3, 3)
        yield "head.b", (1, head_channels(spec.head), 1, 1)


class ModelState:
    """Parameter map keyed by dotted names, plus a training step counter."""

    def __init__(self, params: dict, step: int = 0):
        self.params = params
        self.step = step

    def require(self, key: str) -> Tensor:
        try:
            return self.params[key]
        except KeyError:
            raise ConfigurationError(f"model state is missing parameter '{key}'") from None

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def set_trainable(self, flag: bool, prefix: str = "") -> None:
        for key, t in self.params.items():
            if key.startswith(prefix):
                t.requires_grad = flag
                t.grad = None

    def trainable_items(self):
        return [(k, t) for k, t in self.params.items() if t.requires_grad]

    def sha256(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.params):
            h.update(key.encode())
            h.update(self.params[key].data.tobytes())
        return h.hexdigest()

    def copy(self, trainable=None) -> "ModelState":
        out = {}
        for key, t in self.params.items():
            flag = t.requires_grad if trainable is None else trainable
            out[key] = Tensor(t.data.copy(), requires_grad=flag)
        return ModelState(out, step=self.step)


def _he_uniform(shape, fan_in: int, gen) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return gen.uniform(-bound, bound, size=shape)


def init_state(spec: NetworkSpec, seed: int, trainable: bool = True,
               labels=()) -> ModelState:
    """Fan-in-scaled uniform init for weights, zeros for biases.

    Each parameter draws from its own named stream (optionally prefixed by
    `labels`, e.g. the teacher task), so the initialization of one
    component never depends on which other components exist.
    """
    params = {}
    for key, shape in param_specs(spec):
        if key.endswith(".b") or key.endswith(".b1") or key.endswith(".b2"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = _he_uniform(shape, fan_in, rng.stream(seed, "init", *labels, key))
        params[key] = Tensor(data, requires_grad=trainable)
    return ModelState(params)


# ---------------------------------------------------------------------------
# channel coding

@dataclass
class ChannelCoding:
    """Global pool + two FC layers emitting per-channel scales in (0, 1)."""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    r: int = CODING_REDUCTION

    @property
    def channels(self) -> int:
        return self.w1.shape[1]

    def params(self) -> dict:
        return {"coding.w1": self.w1, "coding.b1": self.b1,
                "coding.w2": self.w2, "coding.b2": self.b2}

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params().values())


def init_coding(channels: int, seed: int, *labels, trainable: bool = True) -> ChannelCoding:
    h = coding_hidden(channels)
    w1 = _he_uniform((h, channels, 1, 1), channels, rng.stream(seed, "init", *labels, "w1"))
    w2 = _he_uniform((channels, h, 1, 1), h, rng.stream(seed, "init", *labels, "w2"))
    return ChannelCoding(
        Tensor(w1, requires_grad=trainable),
        Tensor(np.zeros((1, h, 1, 1)), requires_grad=trainable),
        Tensor(w2, requires_grad=trainable),
        Tensor(np.zeros((1, channels, 1, 1)), requires_grad=trainable))


def coding_from_state(state: ModelState, prefix: str) -> ChannelCoding:
    return ChannelCoding(state.require(prefix + "coding.w1"), state.require(prefix + "coding.b1"),
                         state.require(prefix + "coding.w2"), state.require(prefix + "coding.b2"))


def channel_code(coding: ChannelCoding, f_u: Tensor) -> Tensor:
    """Scale each channel of f_u by its learned gate; shape is preserved."""
    if f_u.shape[1] != coding.channels:
        raise DimensionError(
            f"coding expects {coding.channels} channels, features have {f_u.shape[1]}")
    z = T.global_avg_pool(f_u)
    z = T.relu(T.dense(z, coding.w1, coding.b1))
    s = T.sigmoid(T.dense(z, coding.w2, coding.b2))
    return T.channel_scale(f_u, s)


# ---------------------------------------------------------------------------
# forward execution

def _run_block(spec: NetworkSpec, state: ModelState, prefix: str, n: int, x: Tensor) -> Tensor:
    for j in range(1, spec.convs_per_block + 1):
        w = state.require(f"{prefix}block{n}.conv{j}.w")
        b = state.require(f"{prefix}block{n}.conv{j}.b")
        x = T.relu(T.conv2d(x, w, b, stride=1, pad=1))
    return T.maxpool2x2(x)[0] if spec.is_encoder(n) else T.upsample2x(x)


def _run_head(state: ModelState, prefix: str, x: Tensor) -> Tensor:
    return T.conv2d(x, state.require(prefix + "head.w"), state.require(prefix + "head.b"),
                    stride=1, pad=1)


def _run_branch(spec, state, branch: Branch, feat: Tensor) -> Tensor:
    x = channel_code(coding_from_state(state, branch.task + "."), feat)
    for n in range(branch.entry + 1, spec.n_blocks + 1):
        x = _run_block(spec, state, branch.task + ".", n, x)
    return _run_head(state, branch.task + ".", x)


def run_trunk(spec: NetworkSpec, state: ModelState, image: Tensor, upto=None):
    """Run trunk blocks 1..upto and return their terminal feature maps."""
    half = spec.n_blocks // 2
    b, c, h, w = image.shape
    if c != spec.in_channels:
        raise DimensionError(f"expected {spec.in_channels}-channel input, got {c}")
    if h % (1 << half) or w % (1 << half):
        raise DimensionError(
            f"input {h}x{w} not divisible by 2^{half} for {half} pooling stages")
    feats = []
    x = image
    for n in range(1, (spec.trunk_len if upto is None else upto) + 1):
        x = _run_block(spec, state, "", n, x)
        feats.append(x)
    return feats


def forward(spec: NetworkSpec, state: ModelState, image: Tensor):
    """Full forward pass.

    Returns (prediction, [F^1 .. F^trunk_len]) where F^n is block n's
    terminal feature map. Multi-head specs return a task -> prediction dict.
    """
    feats = run_trunk(spec, state, image)
    if isinstance(spec.head, MultiHead):
        preds = {br.task: _run_branch(spec, state, br, feats[br.entry - 1])
                 for br in spec.head.branches}
        return preds, feats
    if spec.head is None:
        raise ConfigurationError("spec has no head to predict with")
    return _run_head(state, "", feats[-1]), feats


def forward_from(spec: NetworkSpec, state: ModelState, block_n: int, injected: Tensor):
    """Resume at block block_n+1 as if F^block_n were `injected`.

    Blocks 1..block_n never execute. For multi-head specs each branch
    resumes consistently: a branch entered at p > block_n sees the
    recomputed trunk features; a branch entered at p <= block_n receives
    the injection directly in its own tail (its private copy of block
    block_n is the one being replaced), skipping the entry coding that
    sits upstream of the injection point.
    """
    n_total = spec.n_blocks
    if not 1 <= block_n <= n_total:
        raise DimensionError(f"block {block_n} outside 1..{n_total}")
    want = spec.widths[block_n - 1]
    if injected.shape[1] != want:
        raise DimensionError(
            f"block {block_n} features have {want} channels, injected tensor has "
            f"{injected.shape[1]}")
    half = n_total // 2
    if block_n < half:
        remaining = half - block_n
        if injected.shape[2] % (1 << remaining) or injected.shape[3] % (1 << remaining):
            raise DimensionError(
                f"block {block_n} injection of {injected.shape[2]}x{injected.shape[3]} "
                f"cannot pass {remaining} remaining pooling stages")

    if not isinstance(spec.head, MultiHead):
        x = injected
        for n in range(block_n + 1, n_total + 1):
            x = _run_block(spec, state, "", n, x)
        return _run_head(state, "", x)

    feats = {block_n: injected}
    x = injected
    for n in range(block_n + 1, spec.trunk_len + 1):
        x = _run_block(spec, state, "", n, x)
        feats[n] = x
    preds = {}
    for br in spec.head.branches:
        if br.entry >= block_n:
            preds[br.task] = _run_branch(spec, state, br, feats[br.entry])
        else:
            y = injected
            for n in range(block_n + 1, n_total + 1):
                y = _run_block(spec, state, br.task + ".", n, y)
            preds[br.task] = _run_head(state, br.task + ".", y)
    return preds


# ---------------------------------------------------------------------------
# prediction decoding and bookkeeping

def depth_decode(logits: Tensor, cfg: DepthHead) -> Tensor:
    """Expected depth under the per-pixel bin distribution.

    Bins are indexed 1..N_d, so bin b contributes depth b*l and the
    decodable range is (0, N_d*l); the minimum representable depth is l.
    """
    if logits.shape[1] != cfg.bins:
        raise DimensionError(f"depth head has {cfg.bins} bins, logits carry {logits.shape[1]}")
    p = T.softmax_channels(logits)
    centers = (np.arange(1, cfg.bins + 1) * cfg.bin_len).reshape(1, cfg.bins, 1, 1)
    return T.sum_axes(T.mul(p, T.constant(centers)), (1,))


def one_hot_supervision(seg_probs) -> np.ndarray:
    """Per-pixel argmax class map; ties resolve to the lowest class index."""
    probs = seg_probs.data if isinstance(seg_probs, Tensor) else np.asarray(seg_probs)
    return probs.argmax(axis=1)


def count_params(spec, state: ModelState) -> int:
    """Exact scalar-parameter count, cross-checked against the spec layout."""
    if spec is not None:
        expected = dict(param_specs(spec))
        got = {k: t.shape for k, t in state.params.items()}
        if expected != got:
            missing = sorted(set(expected) - set(got))
            extra = sorted(set(got) - set(expected))
            raise ConfigurationError(
                f"state does not match spec: missing {missing[:3]}, unexpected {extra[:3]}")
    return state.param_count()


# ---------------------------------------------------------------------------
# serialization helpers (dict form used by checkpoints and configs)

def _head_to_dict(head):
    if head is None:
        return None
    if isinstance(head, SegHead):
        return {"kind": "seg", "classes": head.classes}
    if isinstance(head, DepthHead):
        return {"kind": "depth", "bins": head.bins, "bin_len": head.bin_len}
    if isinstance(head, NormalHead):
        return {"kind": "normal"}
    if isinstance(head, MultiHead):
        return {"kind": "multi",
                "branches": [{"task": b.task, "entry": b.entry, "head": _head_to_dict(b.head)}
                             for b in head.branches]}
    raise ConfigurationError(f"unknown head kind: {head!r}")


def _head_from_dict(d):
    if d is None:
        return None
    kind = d.get("kind")
    if kind == "seg":
        return SegHead(classes=int(d["classes"]))
    if kind == "depth":
        return DepthHead(bins=int(d["bins"]), bin_len=float(d["bin_len"]))
    if kind == "normal":
        return NormalHead()
    if kind == "multi":
        return MultiHead(tuple(
            Branch(task=b["task"], entry=int(b["entry"]), head=_head_from_dict(b["head"]))
            for b in d["branches"]))
    raise ConfigurationError(f"unknown head kind in manifest: {kind!r}")


def spec_to_dict(spec: NetworkSpec) -> dict:
    return {"widths": list(spec.widths), "convs_per_block": spec.convs_per_block,
            "in_channels": spec.in_channels, "head": _head_to_dict(spec.head)}


def spec_from_dict(d: dict) -> NetworkSpec:
    return NetworkSpec(
        widths=tuple(int(w) for w in d["widths"]),
        convs_per_block=int(d["convs_per_block"]),
        in_channels=int(d["in_channels"]),
        head=_head_from_dict(d["head"])).validate()
