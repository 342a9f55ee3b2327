"""Declarative pipeline configuration.

A config is a YAML document validated against a strict schema. All problems
are collected and reported together, each prefixed with the line it came
from. Dotted ``--set`` overrides are applied to the raw tree before
validation, so an override is checked exactly like a hand-written key.
"""
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator, model_validator

from .checkpoint import ALL_TAGS
from .data.types import ResizeSpec
from .errors import ConfigError
from .schedule import PRESETS, LrPolicy

SCHEMA_VERSION = 1
SEED_ENV = "DIRECT_PRETRAIN_SEED"
PHASE_REF = "phase:"

BnMode = Literal["train", "affine", "fixed", "sync"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _resolve(value, info: ValidationInfo, must_exist=True):
    ctx = info.context or {}
    p = Path(os.path.expanduser(value))
    if not p.is_absolute():
        p = Path(ctx.get("base_dir", ".")) / p
    p = p.resolve()
    if must_exist and ctx.get("check_paths", True) and not p.exists():
        raise ValueError(f"path does not exist: {p}")
    return str(p)


class ResizeConfig(_Strict):
    strategy: Literal["imagenet_style", "stitcher_style", "keep_ratio", "multi_scale_keep_ratio"]
    base_size: int = Field(448, gt=0)
    alpha_range: Tuple[float, float] = (0.8, 1.2)
    divide_factor: int = Field(2, gt=0)
    max_long: int = Field(1333, gt=0)
    max_short: int = Field(800, gt=0)
    short_edge_choices: Tuple[int, ...] = (640, 672, 704, 736, 768, 800)

    @field_validator("alpha_range")
    @classmethod
    def _alpha(cls, v):
        if not 0 < v[0] <= v[1]:
            raise ValueError(f"alpha_range must satisfy 0 < lo <= hi, got {list(v)}")
        return v

    def to_spec(self):
        return ResizeSpec(**self.model_dump())


class LrConfig(_Strict):
    base_lr: float = Field(0.02, gt=0)
    base_batch: int = Field(2, gt=0)
    warmup_iters: int = Field(500, ge=0)
    warmup_start_fraction: float = Field(1.0 / 3.0, gt=0, le=1)
    milestones: Tuple[int, ...] = ()
    decay_factor: float = Field(0.1, gt=0, le=1)

    @field_validator("milestones")
    @classmethod
    def _increasing(cls, v):
        if any(m <= 0 for m in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError(f"milestones must be positive and strictly increasing, got {list(v)}")
        return v

    def to_policy(self):
        return LrPolicy(self.base_lr, self.base_batch, 1.0, self.warmup_iters, self.warmup_start_fraction,
                        self.milestones, self.decay_factor)


class ScheduleConfig(_Strict):
    preset: Literal["P1x", "P2x", "P3x", "P4x", "1x", "2x"]
    epochs: Optional[int] = Field(None, ge=0)
    max_iters: Optional[int] = Field(None, ge=0)


class LoadConfig(_Strict):
    checkpoint: str
    parts: Tuple[str, ...] = ("all",)
    strict: bool = True

    @field_validator("parts")
    @classmethod
    def _parts(cls, v):
        allowed = set(ALL_TAGS) | {"all"}
        bad = [p for p in v if p not in allowed]
        if bad:
            raise ValueError(f"unknown part tags {bad}; allowed: all, {', '.join(ALL_TAGS)}")
        if not v:
            raise ValueError("parts must not be empty")
        return v

    @field_validator("checkpoint")
    @classmethod
    def _ckpt(cls, v, info: ValidationInfo):
        if v.startswith(PHASE_REF):
            return v
        return _resolve(v, info)


class PhaseConfig(_Strict):
    name: str
    phase: Literal["pretrain", "finetune"]
    resize: ResizeConfig
    total_batch: int = Field(gt=0)
    bn_mode: BnMode
    lr: LrConfig = LrConfig()
    schedule: ScheduleConfig
    load: Optional[LoadConfig] = None
    num_workers: int = Field(1, gt=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    grad_clip: Optional[float] = Field(10.0, gt=0)

    @model_validator(mode="after")
    def _pairing(self):
        kind = PRESETS[self.schedule.preset][1]
        if kind != self.phase:
            raise ValueError(f"schedule preset {self.schedule.preset!r} is a {kind} preset, "
                             f"but phase {self.name!r} is a {self.phase} phase")
        if self.phase == "pretrain":
            if self.bn_mode not in ("train", "sync"):
                raise ValueError(f"pretrain phase {self.name!r} needs bn_mode train or sync, got {self.bn_mode!r}")
            if self.lr.milestones:
                raise ValueError(f"pretrain phase {self.name!r} runs at constant LR; remove lr.milestones")
        if self.total_batch % self.num_workers:
            raise ValueError(f"total_batch {self.total_batch} is not divisible by num_workers {self.num_workers}")
        return self


class DatasetConfig(_Strict):
    train: str
    val: Optional[str] = None
    annotation_file: str = "annotations.json"
    image_dir: str = "images"

    @field_validator("train", "val")
    @classmethod
    def _exists(cls, v, info: ValidationInfo):
        return None if v is None else _resolve(v, info)


class ModelConfig(_Strict):
    width: int = Field(16, gt=0)
    neck_channels: int = Field(32, gt=0)
    anchor_sizes: Tuple[int, ...] = (8, 16, 32, 64)
    rpn_batch: int = Field(128, gt=0)
    roi_batch: int = Field(32, gt=0)
    score_thresh: float = Field(0.05, ge=0, le=1)
    detections_per_img: int = Field(100, gt=0)


class PlannerConfig(_Strict):
    target_memory: Union[str, float]
    batches: Tuple[int, ...] = (2, 4, 8, 16)
    resolutions: Tuple[int, ...] = (224, 320, 448, 640)
    records: Optional[str] = None

    @field_validator("records")
    @classmethod
    def _exists(cls, v, info: ValidationInfo):
        return None if v is None else _resolve(v, info)

    @field_validator("target_memory")
    @classmethod
    def _memory(cls, v):
        from .planner import parse_memory

        try:
            parse_memory(v)
        except (ValueError, IndexError) as e:
            raise ValueError(f"cannot parse memory size {v!r}: {e}") from None
        return v


class EvaluatorConfig(_Strict):
    iou_type: Literal["bbox", "segm"] = "bbox"
    interpolation: Literal["all_point", "coco101"] = "all_point"
    max_dets: int = Field(100, gt=0)
    resize: Optional[ResizeConfig] = None


class PipelineConfig(_Strict):
    version: Literal[1]
    seed: int
    output_root: str
    dataset: DatasetConfig
    phases: List[PhaseConfig] = Field(default_factory=list)
    model: ModelConfig = ModelConfig()
    planner: Optional[PlannerConfig] = None
    evaluator: EvaluatorConfig = EvaluatorConfig()

    @field_validator("output_root")
    @classmethod
    def _out(cls, v, info: ValidationInfo):
        return _resolve(v, info, must_exist=False)

    @field_validator("phases")
    @classmethod
    def _ordering(cls, phases):
        problems = []
        names = [p.name for p in phases]
        for n in sorted({n for n in names if names.count(n) > 1}):
            problems.append(f"duplicate phase name {n!r}")
        seen_finetune = None
        for i, p in enumerate(phases):
            if p.phase == "finetune" and seen_finetune is None:
                seen_finetune = p.name
            if p.phase == "pretrain" and seen_finetune is not None:
                problems.append(f"phase ordering: pretrain phase {p.name!r} comes after finetune phase "
                                f"{seen_finetune!r}; pretrain must precede finetune")
            if p.load is not None and p.load.checkpoint.startswith(PHASE_REF):
                ref = p.load.checkpoint[len(PHASE_REF):]
                if ref not in names[:i]:
                    problems.append(f"phase {p.name!r} loads from {ref!r}, which is not an earlier phase")
        if problems:
            raise ValueError("; ".join(problems))
        return phases

    def phase(self, name_or_kind):
        for p in self.phases:
            if p.name == name_or_kind:
                return p
        for p in self.phases:
            if p.phase == name_or_kind:
                return p
        raise ConfigError(f"no phase named {name_or_kind!r}; phases: {[p.name for p in self.phases]}")

    def eval_resize(self):
        if self.evaluator.resize is not None:
            return self.evaluator.resize.to_spec()
        fts = [p for p in self.phases if p.phase == "finetune"]
        if fts:
            return fts[-1].resize.to_spec()
        return ResizeSpec("keep_ratio")

    def checkpoint_path(self, phase_name):
        return Path(self.output_root) / phase_name / f"{phase_name}.ckpt"


# line lookup -------------------------------------------------------------


def _line_index(text):
    """Map key paths to 1-based line numbers using the YAML node marks."""
    index = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return index

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (k.value,)
                index[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                p = path + (i,)
                index[p] = v.start_mark.line + 1
                walk(v, p)

    if root is not None:
        index[()] = root.start_mark.line + 1
        walk(root, ())
    return index


def _fmt_loc(loc):
    out = ""
    for part in loc:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


def _line_for(loc, index):
    loc = tuple(loc)
    while loc:
        if loc in index:
            return index[loc]
        loc = loc[:-1]
    return index.get(())


def _describe(errors, index, overridden):
    out = []
    for e in errors:
        # drop pydantic's union/model-type tags from the location
        loc = tuple(p for p in e["loc"] if isinstance(p, int) or not str(p).startswith(("function-", "str", "float")))
        line = _line_for(loc, index)
        where = "override" if _touches(loc, overridden) else (f"line {line}" if line else "config")
        msg = e["msg"].removeprefix("Value error, ")
        if e["type"] == "extra_forbidden":
            msg = "unknown key"
        elif e["type"] == "missing":
            msg = "required key is missing"
        got = e.get("input")
        suffix = f" (got {got!r})" if e["type"] in ("literal_error", "int_parsing", "float_parsing") else ""
        out.append(f"{where}: {_fmt_loc(loc)}: {msg}{suffix}")
    return out


def _touches(loc, overridden):
    return any(tuple(loc[: len(o)]) == o for o in overridden)


# overrides ---------------------------------------------------------------


def _step(node, key, dotted):
    if isinstance(node, list):
        if key.lstrip("-").isdigit():
            i = int(key)
            if not -len(node) <= i < len(node):
                raise ConfigError(f"override {dotted!r}: index {i} out of range")
            return i
        for i, item in enumerate(node):
            if isinstance(item, dict) and item.get("name") == key:
                return i
        raise ConfigError(f"override {dotted!r}: no list item named {key!r}")
    if isinstance(node, dict):
        return key
    raise ConfigError(f"override {dotted!r}: cannot descend into a {type(node).__name__}")


def apply_overrides(doc, overrides):
    """Apply ``a.b.c=value`` overrides to a raw config tree in place.

    List items are addressed by index or by their ``name`` key. Values are
    parsed as YAML scalars/flow collections. Returns the normalised key
    paths touched.
    """
    touched = []
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        dotted, raw = item.split("=", 1)
        keys = [k for k in dotted.strip().split(".") if k]
        if not keys:
            raise ConfigError(f"override {item!r} has an empty key path")
        try:
            value = yaml.safe_load(raw) if raw.strip() else None
        except yaml.YAMLError as e:
            raise ConfigError(f"override {item!r}: cannot parse value: {e}") from None
        node, path = doc, []
        for k in keys[:-1]:
            k = _step(node, k, dotted)
            path.append(k)
            if isinstance(node, dict) and not isinstance(node.get(k), (dict, list)):
                node[k] = {}
            node = node[k]
        last = _step(node, keys[-1], dotted)
        node[last] = value
        touched.append(tuple(path + [last]))
    return touched


# entry points ------------------------------------------------------------


def validate_config(document, overrides=(), base_dir=None, check_paths=True, env=None) -> PipelineConfig:
    """Parse and validate a config given as YAML text, a dict or a file path.

    Relative paths resolve against ``base_dir`` (the config file's folder
    when a path is given). ``DIRECT_PRETRAIN_SEED`` in ``env`` overrides the
    seed. Raises :class:`ConfigError` listing every violation.
    """
    env = os.environ if env is None else env
    text = None
    if isinstance(document, Path) or (isinstance(document, str) and "\n" not in document
                                      and document.endswith((".yaml", ".yml"))):
        path = Path(document)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        base_dir = base_dir or path.parent
    elif isinstance(document, str):
        text = document
    if text is not None:
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            where = f"line {mark.line + 1}" if mark else "config"
            raise ConfigError(f"{where}: invalid YAML: {getattr(e, 'problem', e)}") from None
        index = _line_index(text)
    else:
        import copy

        doc = copy.deepcopy(dict(document))
        index = {}
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be a mapping")
    overridden = apply_overrides(doc, overrides)
    if env.get(SEED_ENV, "").strip():
        try:
            doc["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from None
        overridden.append(("seed",))
    ctx = {"base_dir": str(base_dir or "."), "check_paths": check_paths}
    try:
        return PipelineConfig.model_validate(doc, context=ctx)
    except ValidationError as e:
        raise ConfigError(_describe(e.errors(), index, overridden)) from None


def emit(config: PipelineConfig) -> str:
    """YAML text that validates back to an equal config."""
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)


EXAMPLE_CONFIG = """\
version: 1
seed: 0
output_root: runs
dataset:
  train: data/train
  val: data/val
phases:
  - name: pretrain
    phase: pretrain
    resize: {strategy: imagenet_style, base_size: 64}
    total_batch: 32
    bn_mode: train
    lr: {base_lr: 0.005, base_batch: 2, warmup_iters: 20}
    schedule: {preset: P1x, epochs: 3}
  - name: finetune
    phase: finetune
    resize: {strategy: keep_ratio, max_long: 160, max_short: 128}
    total_batch: 8
    bn_mode: fixed
    lr: {base_lr: 0.005, base_batch: 2, warmup_iters: 20}
    schedule: {preset: 1x, epochs: 3}
    load: {checkpoint: "phase:pretrain", parts: [all]}
evaluator:
  iou_type: bbox
"""


def to_train_config(cfg: PipelineConfig, phase: PhaseConfig, load_override=None):
    """Build a harness ``TrainConfig`` for one phase of a validated config."""
    from .harness.train import LoadSpec, TrainConfig

    load = None
    src = load_override if load_override is not None else phase.load
    if src is not None:
        ckpt = src.checkpoint
        if ckpt.startswith(PHASE_REF):
            ckpt = str(cfg.checkpoint_path(ckpt[len(PHASE_REF):]))
        load = LoadSpec(ckpt, tuple(src.parts), src.strict)
    return TrainConfig(
        phase=phase.phase,
        resize=phase.resize.to_spec(),
        total_batch=phase.total_batch,
        bn_mode=phase.bn_mode,
        lr=phase.lr.to_policy(),
        preset=phase.schedule.preset,
        epochs=phase.schedule.epochs,
        max_iters=phase.schedule.max_iters,
        load=load,
        seed=cfg.seed,
        output_dir=str(Path(cfg.output_root) / phase.name),
        name=phase.name,
        num_workers=phase.num_workers,
        momentum=phase.momentum,
        weight_decay=phase.weight_decay,
        grad_clip=phase.grad_clip,
        model=cfg.model.model_dump(mode="python"),
    )


__all__ = [
    "EXAMPLE_CONFIG",
    "PipelineConfig",
    "PhaseConfig",
    "apply_overrides",
    "emit",
    "to_train_config",
    "validate_config",
]
