"""Run configuration: one JSON file with sections model / mtl / train /
finetune, validated exhaustively (every violation is reported, not just
the first).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import SchemaError
from .losses import LABEL_SOURCES, AuxTaskSpec, MultiTaskConfig
from .model import HEAD_KINDS, ExtractorConfig, X_VECTOR_FRAME_LAYERS
from .training import FINETUNE_MODES, FineTuneConfig, SpeakerHeadOptions, TrainConfig

TRAIN_REQUIRED = ("iterations", "batch_size", "chunk_frames", "lr", "momentum",
                  "seed", "validation_every")
FINETUNE_REQUIRED = ("mode", "total_iterations", "freeze_iterations", "label_set",
                     "lambda_age")


@dataclass
class RunConfig:
    model: ExtractorConfig
    speaker_head: SpeakerHeadOptions
    mtl: MultiTaskConfig
    train: TrainConfig | None
    finetune: FineTuneConfig | None
    raw: dict


class _Checker:
    def __init__(self):
        self.problems: list[str] = []

    def fail(self, field: str, message: str):
        self.problems.append(f"{field}: {message}")

    def number(self, obj, section, key, *, required=False, minimum=None,
               exclusive_minimum=None, maximum=None, integer=False, default=None):
        field = f"{section}.{key}"
        if key not in obj:
            if required:
                self.fail(field, "required field is missing")
            return default
        value = obj[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(field, f"must be a number, got {type(value).__name__}")
            return default
        if integer and not isinstance(value, int):
            self.fail(field, "must be an integer")
            return default
        if minimum is not None and value < minimum:
            self.fail(field, f"must be >= {minimum}, got {value}")
            return default
        if exclusive_minimum is not None and value <= exclusive_minimum:
            self.fail(field, f"must be > {exclusive_minimum}, got {value}")
            return default
        if maximum is not None and value > maximum:
            self.fail(field, f"must be <= {maximum}, got {value}")
            return default
        return value

    def choice(self, obj, section, key, choices, *, required=False, default=None):
        field = f"{section}.{key}"
        if key not in obj:
            if required:
                self.fail(field, "required field is missing")
            return default
        value = obj[key]
        if value not in choices:
            self.fail(field, f"must be one of {list(choices)}, got {value!r}")
            return default
        return value

    def boolean(self, obj, section, key, default=False):
        field = f"{section}.{key}"
        if key not in obj:
            return default
        value = obj[key]
        if not isinstance(value, bool):
            self.fail(field, f"must be a boolean, got {type(value).__name__}")
            return default
        return value


def _parse_model(obj, check: _Checker):
    section = "model"
    input_dim = check.number(obj, section, "input_dim", integer=True,
                             exclusive_minimum=0, default=30)
    embedding_dim = check.number(obj, section, "embedding_dim", integer=True,
                                 exclusive_minimum=0, default=256)
    slope = check.number(obj, section, "leaky_relu_slope", minimum=0.0, default=0.01)
    layers = X_VECTOR_FRAME_LAYERS
    if "frame_layers" in obj:
        raw_layers = obj["frame_layers"]
        parsed = []
        ok = True
        if not isinstance(raw_layers, list) or not raw_layers:
            check.fail("model.frame_layers", "must be a non-empty list of [context, dim] pairs")
            ok = False
        else:
            for i, entry in enumerate(raw_layers):
                if (not isinstance(entry, list) or len(entry) != 2
                        or not isinstance(entry[0], list)
                        or not isinstance(entry[1], int)):
                    check.fail(f"model.frame_layers[{i}]", "must be [list-of-offsets, dim]")
                    ok = False
                    continue
                parsed.append((tuple(int(c) for c in entry[0]), entry[1]))
        if ok:
            layers = tuple(parsed)

    head_obj = obj.get("speaker_head", {})
    if not isinstance(head_obj, dict):
        check.fail("model.speaker_head", "must be an object")
        head_obj = {}
    kind = check.choice(head_obj, "model.speaker_head", "kind", HEAD_KINDS, default="mlp_ce")
    margin = check.number(head_obj, "model.speaker_head", "margin", minimum=0.0, default=0.2)
    scale = check.number(head_obj, "model.speaker_head", "scale", exclusive_minimum=0.0, default=30.0)
    label_source = check.choice(head_obj, "model.speaker_head", "label_source",
                                LABEL_SOURCES, default="speaker")
    if check.problems:
        return None, None
    try:
        extractor = ExtractorConfig(
            input_dim=input_dim, frame_layers=layers,
            embedding_dim=embedding_dim, leaky_relu_slope=slope,
        )
    except Exception as exc:
        check.fail("model.frame_layers", str(exc))
        return None, None
    head = SpeakerHeadOptions(kind=kind, margin=margin, scale=scale, label_source=label_source)
    return extractor, head


def _parse_mtl(obj, check: _Checker):
    tasks = []
    raw_tasks = obj.get("tasks", [])
    if not isinstance(raw_tasks, list):
        check.fail("mtl.tasks", "must be a list")
        raw_tasks = []
    for i, entry in enumerate(raw_tasks):
        section = f"mtl.tasks[{i}]"
        if not isinstance(entry, dict):
            check.fail(section, "must be an object")
            continue
        name = entry.get("task_name")
        if not isinstance(name, str) or not name:
            check.fail(f"{section}.task_name", "required non-empty string")
            name = f"task{i}"
        if name == "speaker":
            check.fail(f"{section}.task_name",
                       "the speaker task is implicit; do not list it")
            continue
        source = check.choice(entry, section, "label_source", LABEL_SOURCES, required=True)
        weight = check.number(entry, section, "lambda", required=True, minimum=0.0)
        kind = check.choice(entry, section, "kind", HEAD_KINDS, default="mlp_ce")
        shuffle = check.boolean(entry, section, "shuffle", default=False)
        n_bins = check.number(entry, section, "n_bins", integer=True,
                              exclusive_minimum=0, default=10)
        margin = check.number(entry, section, "margin", minimum=0.0, default=0.2)
        scale = check.number(entry, section, "scale", exclusive_minimum=0.0, default=30.0)
        if source is None or weight is None:
            continue
        tasks.append(AuxTaskSpec(
            task_name=name, label_source=source, weight=weight, kind=kind,
            shuffle=shuffle, n_bins=n_bins, margin=margin, scale=scale,
        ))
    shuffle_speaker = check.boolean(obj, "mtl", "shuffle_speaker", default=False)
    names = [t.task_name for t in tasks]
    if len(set(names)) != len(names):
        check.fail("mtl.tasks", f"duplicate task names {names}")
        return None
    if check.problems:
        return None
    return MultiTaskConfig(tasks=tuple(tasks), shuffle_speaker=shuffle_speaker)


def _parse_train(obj, mtl, check: _Checker):
    for key in TRAIN_REQUIRED:
        if key not in obj:
            check.fail(f"train.{key}", "required field is missing")
    iterations = check.number(obj, "train", "iterations", integer=True, exclusive_minimum=0, default=1)
    batch_size = check.number(obj, "train", "batch_size", integer=True, exclusive_minimum=0, default=1)
    chunk_frames = check.number(obj, "train", "chunk_frames", integer=True, exclusive_minimum=0, default=350)
    lr = check.number(obj, "train", "lr", exclusive_minimum=0.0, default=0.2)
    momentum = check.number(obj, "train", "momentum", minimum=0.0, default=0.5)
    seed = check.number(obj, "train", "seed", integer=True, minimum=0, default=0)
    validation_every = check.number(obj, "train", "validation_every", integer=True,
                                    exclusive_minimum=0, default=500)
    grad_clip = check.number(obj, "train", "grad_clip", exclusive_minimum=0.0, default=None)
    if check.problems:
        return None
    return TrainConfig(
        iterations=iterations, batch_size=batch_size, chunk_frames=chunk_frames,
        lr=lr, momentum=momentum, seed=seed, validation_every=validation_every,
        mtl=mtl, grad_clip=grad_clip,
    )


def _parse_finetune(obj, train: TrainConfig | None, check: _Checker):
    for key in FINETUNE_REQUIRED:
        if key not in obj:
            check.fail(f"finetune.{key}", "required field is missing")
    mode = check.choice(obj, "finetune", "mode", FINETUNE_MODES, default="last_linear")
    total = check.number(obj, "finetune", "total_iterations", integer=True,
                         exclusive_minimum=0, default=5000)
    freeze = check.number(obj, "finetune", "freeze_iterations", integer=True,
                          minimum=0, default=1000)
    label_set = check.choice(obj, "finetune", "label_set", ("speaker", "speaker+age"),
                             default="speaker")
    lambda_age = check.number(obj, "finetune", "lambda_age", minimum=0.0, default=0.05)
    # lr / momentum / batch_size / chunk_frames inherit from train unless overridden
    inherit = train if train is not None else TrainConfig(
        iterations=1, batch_size=500, chunk_frames=350, lr=0.2, momentum=0.5,
        seed=0, validation_every=500,
    )
    lr = check.number(obj, "finetune", "lr", exclusive_minimum=0.0, default=inherit.lr)
    momentum = check.number(obj, "finetune", "momentum", minimum=0.0, default=inherit.momentum)
    batch_size = check.number(obj, "finetune", "batch_size", integer=True,
                              exclusive_minimum=0, default=inherit.batch_size)
    chunk_frames = check.number(obj, "finetune", "chunk_frames", integer=True,
                                exclusive_minimum=0, default=inherit.chunk_frames)
    seed = check.number(obj, "finetune", "seed", integer=True, minimum=0, default=inherit.seed)
    validation_every = check.number(obj, "finetune", "validation_every", integer=True,
                                    exclusive_minimum=0, default=inherit.validation_every)
    age_bins = check.number(obj, "finetune", "age_bins", integer=True,
                            exclusive_minimum=0, default=10)
    if freeze is not None and total is not None and freeze >= total:
        check.fail("finetune.freeze_iterations",
                   f"must be < total_iterations ({total}), got {freeze}")
    if check.problems:
        return None
    return FineTuneConfig(
        mode=mode, total_iterations=total, freeze_iterations=freeze,
        label_set=label_set, lr=lr, momentum=momentum, batch_size=batch_size,
        chunk_frames=chunk_frames, lambda_age=lambda_age, seed=seed,
        validation_every=validation_every, age_bins=age_bins,
    )


def parse_config(raw: dict, require: tuple[str, ...] = ()) -> RunConfig:
    """Validate and parse a config dict; raises SchemaError listing every
    violation."""
    check = _Checker()
    if not isinstance(raw, dict):
        raise SchemaError("config: top level must be a JSON object")
    known = {"model", "mtl", "train", "finetune"}
    for key in raw:
        if key not in known:
            check.fail(key, "unknown section")
    for section in require:
        if section not in raw:
            check.fail(section, "required section is missing")

    model_obj = raw.get("model", {})
    mtl_obj = raw.get("mtl", {})
    for name, obj in (("model", model_obj), ("mtl", mtl_obj)):
        if not isinstance(obj, dict):
            check.fail(name, "must be an object")
    extractor, speaker_head = _parse_model(model_obj if isinstance(model_obj, dict) else {}, check)
    mtl = _parse_mtl(mtl_obj if isinstance(mtl_obj, dict) else {}, check)

    train = None
    if "train" in raw:
        if not isinstance(raw["train"], dict):
            check.fail("train", "must be an object")
        else:
            train = _parse_train(raw["train"], mtl, check)
    finetune = None
    if "finetune" in raw:
        if not isinstance(raw["finetune"], dict):
            check.fail("finetune", "must be an object")
        else:
            finetune = _parse_finetune(raw["finetune"], train, check)

    if check.problems:
        raise SchemaError(check.problems)
    return RunConfig(
        model=extractor, speaker_head=speaker_head, mtl=mtl,
        train=train, finetune=finetune, raw=raw,
    )


def load_config(path, require: tuple[str, ...] = ()) -> RunConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config file {path}: invalid JSON: {exc}") from None
    return parse_config(raw, require=require)
