"""SGD training loop, validation, checkpointing, and the two-stage
fine-tuning protocol (frozen warmup, then last-linear or full adaptation).

The update rule is classical momentum: v <- momentum*v - lr*g;
theta <- theta + v. Updates are restricted by a mask over parameter tags;
masked-out parameters and their velocities are left bit-identical.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch

from . import dataio
from .dataio import AgeBinner, LabelVocab, Manifest, UtteranceRecord, bin_age
from .errors import DataError, NumericsError
from .losses import AuxTaskSpec, Batch, MultiTaskConfig, batch_loss, cross_entropy
from .model import (
    Checkpoint,
    ExtractorConfig,
    MultiTaskModel,
    TaskHeadSpec,
    build_model,
    checkpoint_from_model,
    tagged_parameters,
)
from .seeding import derive_seed

FINETUNE_MODES = ("last_linear", "full")


@dataclass(frozen=True)
class SpeakerHeadOptions:
    kind: str = "mlp_ce"
    margin: float = 0.2
    scale: float = 30.0
    # "Only Age"/"Only Gender" style ablations replace the speaker head's
    # label stream while keeping the weight-1 primary slot.
    label_source: str = "speaker"


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 50000
    batch_size: int = 500
    chunk_frames: int = 350
    lr: float = 0.2
    momentum: float = 0.5
    seed: int = 0
    validation_every: int = 500
    mtl: MultiTaskConfig = field(default_factory=MultiTaskConfig)
    grad_clip: float | None = None  # off by default; divergence aborts instead

    def __post_init__(self):
        for name in ("iterations", "batch_size", "chunk_frames", "lr", "validation_every"):
            if getattr(self, name) <= 0:
                raise DataError(f"train config: {name} must be positive")
        if self.momentum < 0:
            raise DataError("train config: momentum must be >= 0")


@dataclass(frozen=True)
class FineTuneConfig:
    mode: str = "last_linear"
    total_iterations: int = 5000
    freeze_iterations: int = 1000
    label_set: str = "speaker"
    lr: float = 0.2
    momentum: float = 0.5
    batch_size: int = 500
    chunk_frames: int = 350
    lambda_age: float = 0.05
    seed: int = 0
    validation_every: int = 500
    age_bins: int = 10

    def __post_init__(self):
        if self.mode not in FINETUNE_MODES:
            raise DataError(f"fine-tune mode must be one of {FINETUNE_MODES}, got {self.mode!r}")
        if self.label_set not in ("speaker", "speaker+age"):
            raise DataError(f"label_set must be 'speaker' or 'speaker+age', got {self.label_set!r}")
        if not (0 <= self.freeze_iterations < self.total_iterations):
            raise DataError("freeze_iterations must be < total_iterations")


# ---------------------------------------------------------------------------
# Label spaces and per-utterance label tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelSpace:
    """Everything needed to map attribute values to class indices."""

    speaker: LabelVocab
    binner: AgeBinner | None = None
    nationality: LabelVocab | None = None
    gender: LabelVocab | None = None

    def source_size(self, source: str) -> int:
        if source == "speaker":
            return self.speaker.size
        if source == "age_bin":
            return self.binner.n_bins
        if source == "nationality":
            return self.nationality.size
        if source == "gender":
            return self.gender.size
        raise DataError(f"unknown label source {source!r}")


def build_label_space(manifest: Manifest, mtl: MultiTaskConfig,
                      speaker_head: SpeakerHeadOptions = SpeakerHeadOptions()) -> LabelSpace:
    """Build vocabularies and the age binner from a training manifest."""
    sources = {t.label_source for t in mtl.tasks} | {speaker_head.label_source}
    binner = nationality = gender = None
    if "age_bin" in sources:
        n_bins = 10
        for task in mtl.tasks:
            if task.label_source == "age_bin":
                n_bins = task.n_bins
        ages = [r.attributes["age"] for r in manifest.records if "age" in r.attributes]
        if not ages:
            raise DataError("an age task is configured but no record has an age attribute")
        binner = dataio.make_age_binner(ages, n_bins=n_bins)
    if "nationality" in sources:
        nationality = dataio.build_nationality_vocab(manifest)
        if nationality.size < 2:
            raise DataError("nationality task needs at least 2 classes in the training set")
    if "gender" in sources:
        gender = dataio.build_gender_vocab(manifest)
        if gender.size < 2:
            raise DataError("gender task needs at least 2 classes in the training set")
    return LabelSpace(
        speaker=dataio.build_speaker_vocab(manifest),
        binner=binner,
        nationality=nationality,
        gender=gender,
    )


def _encode_source(record: UtteranceRecord, source: str, space: LabelSpace):
    """Class index for one record under one label source, or None."""
    if source == "speaker":
        return space.speaker.encode(record.speaker_id)
    if source == "age_bin":
        age = record.attributes.get("age")
        return None if age is None else bin_age(space.binner, float(age))
    if source == "nationality":
        value = record.attributes.get("nationality")
        idx = space.nationality.encode(value) if value is not None else None
        if idx is None:
            # unseen or missing nationality pools into UNK when it exists
            idx = space.nationality.encode(dataio.UNK_LABEL)
        return idx
    if source == "gender":
        value = record.attributes.get("gender")
        return None if value is None else space.gender.encode(value)
    raise DataError(f"unknown label source {source!r}")


def build_label_tables(manifest: Manifest, mtl: MultiTaskConfig, space: LabelSpace,
                       seed: int,
                       speaker_head: SpeakerHeadOptions = SpeakerHeadOptions()) -> dict:
    """Per-task (labels, valid) arrays aligned with manifest order.

    Shuffle controls permute the valid labels among the valid positions,
    destroying the label/utterance association while preserving the label
    multiset and coverage pattern.
    """
    tables: dict = {}
    tasks = [("speaker", speaker_head.label_source, mtl.shuffle_speaker)]
    tasks += [(t.task_name, t.label_source, t.shuffle) for t in mtl.tasks]
    for task_name, source, shuffle in tasks:
        labels = np.zeros(len(manifest), dtype=np.int64)
        valid = np.zeros(len(manifest), dtype=bool)
        for i, rec in enumerate(manifest.records):
            idx = _encode_source(rec, source, space)
            if idx is not None:
                labels[i] = idx
                valid[i] = True
        if shuffle and valid.any():
            pos = np.flatnonzero(valid)
            permuted = dataio.shuffle_labels(
                labels[pos].tolist(), derive_seed(seed, "shuffle", task_name)
            )
            labels[pos] = permuted
        tables[task_name] = (labels, valid)
    return tables


def head_specs_from_config(mtl: MultiTaskConfig, space: LabelSpace,
                           speaker_head: SpeakerHeadOptions = SpeakerHeadOptions()) -> list[TaskHeadSpec]:
    specs = [
        TaskHeadSpec(
            task_name="speaker",
            kind=speaker_head.kind,
            n_classes=space.source_size(speaker_head.label_source),
            margin=speaker_head.margin,
            scale=speaker_head.scale,
        )
    ]
    for task in mtl.tasks:
        specs.append(
            TaskHeadSpec(
                task_name=task.task_name,
                kind=task.kind,
                n_classes=space.source_size(task.label_source),
                margin=task.margin,
                scale=task.scale,
            )
        )
    return specs


# ---------------------------------------------------------------------------
# Feature access and batch sampling
# ---------------------------------------------------------------------------


class FeatureStore:
    """Reads FEAT1 files with a small LRU cache. Callable on records and
    safe to share across reader threads."""

    def __init__(self, cache_size: int = 512):
        self.cache_size = cache_size
        self._cache: OrderedDict[str, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()

    def __call__(self, record: UtteranceRecord) -> np.ndarray:
        path = record.feature_path
        if not path:
            raise DataError(f"utterance {record.utt_id!r} has no feature_path")
        with self._lock:
            if path in self._cache:
                self._cache.move_to_end(path)
                return self._cache[path]
        feats = dataio.read_features(path)
        with self._lock:
            self._cache[path] = feats
            if len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return feats


class InMemoryFeatures:
    """Feature provider backed by a dict keyed on utt_id (for synthetic
    corpora and tests)."""

    def __init__(self, by_utt: dict):
        self.by_utt = dict(by_utt)

    def __call__(self, record: UtteranceRecord) -> np.ndarray:
        try:
            return self.by_utt[record.utt_id]
        except KeyError as exc:
            raise DataError(f"no features for utterance {record.utt_id!r}") from exc


def wrap_rows(feats: np.ndarray, length: int) -> np.ndarray:
    """First `length` rows, cycling back to the start when the matrix is
    shorter (wrap padding)."""
    n = feats.shape[0]
    if n < 1:
        raise DataError("cannot wrap an empty feature matrix")
    if n == length:
        return feats
    return feats[np.arange(length) % n]


def sample_batch(manifest: Manifest, batch_size: int, chunk_frames: int,
                 rng: np.random.Generator, features, tables: dict) -> Batch:
    """Sample feature chunks uniformly with replacement.

    Utterances longer than chunk_frames contribute a uniformly placed
    window; shorter ones are wrap-padded. Only utterances with a valid
    primary (speaker-slot) label are eligible.
    """
    _, primary_valid = tables["speaker"]
    eligible = np.flatnonzero(primary_valid)
    if eligible.size == 0:
        raise DataError("no utterance carries a primary label; nothing to sample")
    picks = eligible[rng.integers(0, eligible.size, size=batch_size)]
    chunks = []
    for pos in picks:
        feats = np.asarray(features(manifest.records[pos]), dtype=np.float32)
        n = feats.shape[0]
        if n > chunk_frames:
            off = int(rng.integers(0, n - chunk_frames + 1))
            chunk = feats[off:off + chunk_frames]
        else:
            chunk = wrap_rows(feats, chunk_frames)
        chunks.append(chunk)
    stacked = torch.from_numpy(np.stack(chunks).astype(np.float32, copy=False))
    labels = {
        task: (
            torch.from_numpy(lab[picks].copy()),
            torch.from_numpy(val[picks].copy()),
        )
        for task, (lab, val) in tables.items()
    }
    utt_ids = tuple(manifest.records[pos].utt_id for pos in picks)
    return Batch(features=stacked, labels=labels, utt_ids=utt_ids)


# ---------------------------------------------------------------------------
# Masked momentum SGD
# ---------------------------------------------------------------------------


def sgd_step(theta: torch.Tensor, velocity: torch.Tensor, grad: torch.Tensor,
             lr: float, momentum: float) -> tuple[torch.Tensor, torch.Tensor]:
    """One momentum update: v' = momentum*v - lr*g; theta' = theta + v'."""
    new_v = momentum * velocity - lr * grad
    return theta + new_v, new_v


class MaskedSGD:
    """Momentum SGD over tagged parameters with a per-step trainable mask."""

    def __init__(self, params: dict[str, torch.nn.Parameter], lr: float, momentum: float):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {tag: torch.zeros_like(p) for tag, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, mask=None, grad_clip: float | None = None):
        """Apply the update to masked-in tags only. Non-finite gradients
        abort before any parameter is touched."""
        tags = [t for t in self.params if mask is None or t in mask]
        grads = {}
        for tag in tags:
            p = self.params[tag]
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise NumericsError(f"non-finite gradient for parameter {tag!r}")
            grads[tag] = g
        if grad_clip is not None:
            norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
            if norm > grad_clip:
                scale = grad_clip / float(norm)
                grads = {tag: g * scale for tag, g in grads.items()}
        with torch.no_grad():
            for tag in tags:
                new_p, new_v = sgd_step(
                    self.params[tag], self.velocity[tag], grads[tag], self.lr, self.momentum
                )
                self.params[tag].copy_(new_p)
                self.velocity[tag].copy_(new_v)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def evaluate_manifest(model: MultiTaskModel, manifest: Manifest, tables: dict,
                      features) -> dict:
    """Per-task accuracy and mean loss over whole utterances."""
    model.eval()
    min_frames = model.extractor.config.min_frames
    stats = {task: {"correct": 0, "loss": 0.0, "n": 0} for task in tables}
    with torch.no_grad():
        for i, rec in enumerate(manifest.records):
            feats = np.asarray(features(rec), dtype=np.float32)
            if feats.shape[0] < min_frames:
                feats = wrap_rows(feats, min_frames)
            emb = model(torch.from_numpy(feats).unsqueeze(0))
            for task, (lab, val) in tables.items():
                if not val[i]:
                    continue
                label = torch.tensor([lab[i]])
                train_logits = model.head_logits(task, emb, labels=label)
                eval_logits = model.head_logits(task, emb)
                loss = float(cross_entropy(train_logits, label).mean())
                stats[task]["loss"] += loss
                stats[task]["correct"] += int(eval_logits.argmax(dim=-1).item() == int(lab[i]))
                stats[task]["n"] += 1
    out = {}
    for task, s in stats.items():
        n = s["n"]
        out[task] = {
            "acc": (s["correct"] / n) if n else None,
            "loss": (s["loss"] / n) if n else None,
            "n": n,
        }
    return out


def split_validation(manifest: Manifest, seed: int, frac: float = 0.02) -> tuple[Manifest, Manifest]:
    """Hold out a small validation set, split by utterance."""
    n = len(manifest)
    n_valid = max(1, int(round(frac * n)))
    if n_valid >= n:
        raise DataError(f"manifest too small to hold out validation ({n} utterances)")
    rng = np.random.default_rng(derive_seed(seed, "valid-split"))
    valid_pos = set(rng.choice(n, size=n_valid, replace=False).tolist())
    train_recs = tuple(r for i, r in enumerate(manifest.records) if i not in valid_pos)
    valid_recs = tuple(r for i, r in enumerate(manifest.records) if i in valid_pos)
    return (
        Manifest(train_recs, provenance=manifest.provenance + " [train]"),
        Manifest(valid_recs, provenance=manifest.provenance + " [validation]"),
    )


# ---------------------------------------------------------------------------
# Training / fine-tuning loops
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint | None
    log: list[dict]
    space: LabelSpace
    diverged: bool = False
    # fine-tuning: model state right after the frozen warmup phase ends
    warmup: Checkpoint | None = None

    @property
    def summary(self) -> dict:
        val_entries = [e for e in self.log if "validation" in e]
        last_val = val_entries[-1]["validation"] if val_entries else None
        return {
            "iterations": self.final.iteration,
            "diverged": self.diverged,
            "final_validation": last_val,
            "best_iteration": self.best.iteration if self.best else None,
            "best_validation_speaker_acc": self.best.meta.get("val_speaker_acc") if self.best else None,
        }


def _run_loop(model, optimizer, manifest, tables, features, mtl, *,
              iterations, batch_size, chunk_frames, rng, mask_for,
              validation_every, valid_manifest, valid_tables, grad_clip,
              start_iteration=0, log_sink=None, snapshot_after=None):
    log: list[dict] = []
    best: Checkpoint | None = None
    snapshot: Checkpoint | None = None
    best_acc = -1.0
    diverged = False

    def emit(entry):
        log.append(entry)
        if log_sink is not None:
            log_sink(entry)

    it = start_iteration
    for local_it in range(1, iterations + 1):
        it = start_iteration + local_it
        batch = sample_batch(manifest, batch_size, chunk_frames, rng, features, tables)
        model.train()
        try:
            total, report = batch_loss(model, batch, mtl)
            optimizer.zero_grad()
            total.backward()
            optimizer.step(mask=mask_for(local_it), grad_clip=grad_clip)
        except NumericsError as exc:
            emit({"iter": it, "error": str(exc)})
            diverged = True
            break
        emit(report.to_json_obj(it))
        if local_it == snapshot_after:
            snapshot = checkpoint_from_model(model, iteration=it)
        if valid_manifest is not None and local_it % validation_every == 0:
            val = evaluate_manifest(model, valid_manifest, valid_tables, features)
            emit({"iter": it, "validation": val})
            acc = val.get("speaker", {}).get("acc")
            if acc is not None and acc > best_acc:
                best_acc = acc
                best = checkpoint_from_model(
                    model, iteration=it, meta={"val_speaker_acc": acc}
                )
    return log, best, diverged, it, snapshot


def train(config: TrainConfig, extractor_config: ExtractorConfig, manifest: Manifest,
          valid_manifest: Manifest | None = None, features=None,
          speaker_head: SpeakerHeadOptions = SpeakerHeadOptions(),
          log_sink=None) -> TrainResult:
    """Train a multi-task model from scratch.

    Vocabularies are built from the training side only. When no validation
    manifest is given, 2% of the training utterances (at least one) are
    held out, split by utterance. Divergence aborts the loop and keeps the
    last good parameters.
    """
    if config.chunk_frames < extractor_config.min_frames:
        raise DataError(
            f"chunk_frames={config.chunk_frames} is below the extractor minimum "
            f"context of {extractor_config.min_frames} frames"
        )
    if features is None:
        features = FeatureStore()
    if valid_manifest is None:
        manifest, valid_manifest = split_validation(manifest, config.seed)

    space = build_label_space(manifest, config.mtl, speaker_head)
    tables = build_label_tables(manifest, config.mtl, space, config.seed, speaker_head)
    valid_tables = build_label_tables(valid_manifest, config.mtl, space, config.seed, speaker_head)
    specs = head_specs_from_config(config.mtl, space, speaker_head)
    model = build_model(extractor_config, specs, seed=config.seed)
    optimizer = MaskedSGD(tagged_parameters(model), config.lr, config.momentum)
    rng = np.random.default_rng(derive_seed(config.seed, "batches"))

    log, best, diverged, it, _ = _run_loop(
        model, optimizer, manifest, tables, features, config.mtl,
        iterations=config.iterations, batch_size=config.batch_size,
        chunk_frames=config.chunk_frames, rng=rng, mask_for=lambda i: None,
        validation_every=config.validation_every, valid_manifest=valid_manifest,
        valid_tables=valid_tables, grad_clip=config.grad_clip, log_sink=log_sink,
    )
    final = checkpoint_from_model(model, iteration=it, meta={"seed": config.seed, "diverged": diverged})
    return TrainResult(final=final, best=best, log=log, space=space, diverged=diverged)


def finetune_masks(model: MultiTaskModel, mode: str, freeze_iterations: int):
    """Per-iteration trainable mask for the two-phase fine-tuning."""
    tags = list(tagged_parameters(model))
    head_tags = {t for t in tags if not t.startswith("extractor/")}
    if mode == "last_linear":
        after = head_tags | {t for t in tags if t.startswith("extractor/last_linear")}
    else:
        after = set(tags)

    def mask_for(iteration: int):
        return head_tags if iteration <= freeze_iterations else after

    return mask_for


def finetune(checkpoint: Checkpoint, config: FineTuneConfig, manifest: Manifest,
             valid_manifest: Manifest | None = None, features=None,
             speaker_head: SpeakerHeadOptions | None = None,
             log_sink=None) -> TrainResult:
    """Adapt a trained extractor to a new label set.

    All heads are initialized fresh for the target label space. For the
    first freeze_iterations only head parameters move; afterwards the mask
    widens to the last linear layer or the whole extractor. Velocities are
    not reset at the phase switch.
    """
    if features is None:
        features = FeatureStore()
    if valid_manifest is None:
        manifest, valid_manifest = split_validation(manifest, config.seed)

    if speaker_head is None:
        src = next(h for h in checkpoint.config["heads"] if h["task_name"] == "speaker")
        speaker_head = SpeakerHeadOptions(
            kind=src["kind"], margin=src.get("margin", 0.2), scale=src.get("scale", 30.0)
        )
    if config.label_set == "speaker+age":
        mtl = MultiTaskConfig(tasks=(AuxTaskSpec(
            task_name="age", label_source="age_bin", weight=config.lambda_age,
            n_bins=config.age_bins,
        ),))
    else:
        mtl = MultiTaskConfig()

    space = build_label_space(manifest, mtl, speaker_head)
    tables = build_label_tables(manifest, mtl, space, config.seed, speaker_head)
    valid_tables = build_label_tables(valid_manifest, mtl, space, config.seed, speaker_head)
    specs = head_specs_from_config(mtl, space, speaker_head)

    extractor_config = ExtractorConfig.from_dict(checkpoint.config["extractor"])
    if config.chunk_frames < extractor_config.min_frames:
        raise DataError("chunk_frames below extractor minimum context")
    model = build_model(extractor_config, specs, seed=config.seed)
    extractor_params = {
        tag: arr for tag, arr in checkpoint.params.items() if tag.startswith("extractor/")
    }
    tags = tagged_parameters(model)
    with torch.no_grad():
        for tag, arr in extractor_params.items():
            tags[tag].copy_(torch.as_tensor(np.asarray(arr), dtype=tags[tag].dtype))

    optimizer = MaskedSGD(tags, config.lr, config.momentum)
    rng = np.random.default_rng(derive_seed(config.seed, "batches"))
    mask_for = finetune_masks(model, config.mode, config.freeze_iterations)

    log, best, diverged, it, warmup = _run_loop(
        model, optimizer, manifest, tables, features, mtl,
        iterations=config.total_iterations, batch_size=config.batch_size,
        chunk_frames=config.chunk_frames, rng=rng, mask_for=mask_for,
        validation_every=config.validation_every, valid_manifest=valid_manifest,
        valid_tables=valid_tables, grad_clip=None,
        start_iteration=checkpoint.iteration, log_sink=log_sink,
        snapshot_after=config.freeze_iterations,
    )
    final = checkpoint_from_model(
        model, iteration=it,
        meta={"seed": config.seed, "diverged": diverged, "finetune_mode": config.mode},
    )
    return TrainResult(final=final, best=best, log=log, space=space,
                       diverged=diverged, warmup=warmup)
