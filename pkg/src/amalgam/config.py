"""Run configuration.

One flat namespace of dotted keys covers every knob: scene generation,
data split sizes, network architecture, teacher training, and the
amalgamation schedule.  Values come from DEFAULTS, then a config file of
`key = value` lines, then command-line flags of the same dotted name,
later sources winning.  The flat shape keeps experiment configs
diff-able.
"""

from .errors import ConfigurationError
from .nets import DepthHead, NetworkSpec, NormalHead, SegHead
from .optim import desk_profile, reference_profile
from .scenegen import FullView, ImagesOnlyView, SceneConfig, SceneDataset
from .training import TrainConfig
from .amalgamation import AmalgamationConfig

DEFAULTS = {
    "seed": 0,
    "out": "runs",
    # scene generation
    "scene.h": 64,
    "scene.w": 64,
    "scene.classes": 5,
    "scene.min_prims": 2,
    "scene.max_prims": 6,
    "scene.near": 2.0,
    "scene.far": 10.0,
    "scene.seed": 0,
    # data split: train stream is indices [0, train), eval follows it
    "data.train": 400,
    "data.eval": 100,
    # architecture shared by every network in a run
    "net.widths": "16,32,16,8",
    "net.convs": 2,
    "net.depth_bins": 16,
    "net.depth_bin_len": 0.625,
    # teacher training
    "teacher.epochs": 24,
    "teacher.batch_size": 8,
    # optimizer profile for every training phase: desk | reference
    "optim.profile": "desk",
    # amalgamation schedule
    "amalgamate.lam1": 1.0,
    "amalgamate.lam2": 1.0,
    "amalgamate.lam3": 1.0,
    "amalgamate.loss_mode": "graft",
    "amalgamate.epochs_per_block": 2,
    "amalgamate.fine_tune_epochs": 4,
    "amalgamate.batch_size": 8,
    # evaluation / probing
    "eval.batch_size": 8,
    "probe.count": 2,
}


def convert(key: str, raw):
    """Cast a raw string to the type of the key's default."""
    if key not in DEFAULTS:
        raise ConfigurationError(f"unknown configuration key {key!r}")
    want = DEFAULTS[key]
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(want, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(want, int):
            return int(raw)
        if isinstance(want, float):
            return float(raw)
    except ValueError as e:
        raise ConfigurationError(
            f"{key} wants a {type(want).__name__}, got {raw!r}") from e
    return raw


def parse_config_file(path) -> dict:
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigurationError(
                    f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
            key, _, raw = stripped.partition("=")
            values[key.strip()] = convert(key.strip(), raw.strip())
    return values


def resolve(config_path=None, overrides=None) -> dict:
    values = dict(DEFAULTS)
    if config_path is not None:
        values.update(parse_config_file(config_path))
    for key, raw in (overrides or {}).items():
        values[key] = convert(key, raw)
    return values


# ---------------------------------------------------------------------------
# builders

def scene_config(values) -> SceneConfig:
    return SceneConfig(h=values["scene.h"], w=values["scene.w"],
                       classes=values["scene.classes"],
                       min_prims=values["scene.min_prims"],
                       max_prims=values["scene.max_prims"],
                       near=values["scene.near"], far=values["scene.far"],
                       seed=values["scene.seed"]).validate()


def widths(values) -> tuple:
    try:
        parsed = tuple(int(w) for w in str(values["net.widths"]).split(","))
    except ValueError as e:
        raise ConfigurationError(f"net.widths must be comma-separated ints: {e}") from e
    return parsed


def head_for(values, task):
    if task == "seg":
        return SegHead(values["scene.classes"])
    if task == "depth":
        bins, l = values["net.depth_bins"], values["net.depth_bin_len"]
        if bins * l < values["scene.far"]:
            raise ConfigurationError(
                f"depth head tops out at {bins * l}, below the far plane "
                f"{values['scene.far']}")
        return DepthHead(bins, l)
    if task in ("norm", "normal"):
        return NormalHead()
    raise ConfigurationError(f"unknown task {task!r}")


def network_spec(values, task=None) -> NetworkSpec:
    head = None if task is None else head_for(values, task)
    return NetworkSpec(widths(values), values["net.convs"], 3, head).validate()


def optimizer_profile(values):
    name = values["optim.profile"]
    if name == "desk":
        return desk_profile()
    if name == "reference":
        return reference_profile()
    raise ConfigurationError(f"unknown optimizer profile {name!r}")


def train_config(values) -> TrainConfig:
    return TrainConfig(epochs=values["teacher.epochs"],
                       batch_size=values["teacher.batch_size"],
                       seed=values["seed"],
                       optim=optimizer_profile(values)).validate()


def amalgamation_config(values) -> AmalgamationConfig:
    return AmalgamationConfig(
        lam1=values["amalgamate.lam1"], lam2=values["amalgamate.lam2"],
        lam3=values["amalgamate.lam3"], loss_mode=values["amalgamate.loss_mode"],
        epochs_per_block=values["amalgamate.epochs_per_block"],
        fine_tune_epochs=values["amalgamate.fine_tune_epochs"],
        batch_size=values["amalgamate.batch_size"], seed=values["seed"],
        optim=optimizer_profile(values)).validate()


def data_views(values):
    """(images-only train view, full train view, full eval view)."""
    ds = SceneDataset(scene_config(values))
    train_n, eval_n = values["data.train"], values["data.eval"]
    if train_n < 1 or eval_n < 1:
        raise ConfigurationError("data.train and data.eval must be positive")
    train_idx = range(train_n)
    eval_idx = range(train_n, train_n + eval_n)
    return (ImagesOnlyView(ds, train_idx), FullView(ds, train_idx),
            FullView(ds, eval_idx))
