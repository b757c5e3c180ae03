"""Per-task losses and their weighted multi-task combination.

The combined objective is the speaker loss plus a weighted sum of the
auxiliary task losses: total = L_speaker + sum_m lambda_m * L_m. Each
task's loss is the mean over the batch examples that carry a label for
that task; unlabeled examples contribute nothing to that task and are
excluded from its accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DataError, NumericsError
from .model import MultiTaskModel

LABEL_SOURCES = ("age_bin", "nationality", "gender", "speaker")


@dataclass(frozen=True)
class AuxTaskSpec:
    """One auxiliary task: where its labels come from and how much its
    loss weighs relative to the speaker loss."""

    task_name: str
    label_source: str
    weight: float
    kind: str = "mlp_ce"
    shuffle: bool = False  # random-label control: permute labels across utterances
    n_bins: int = 10  # only used by the age_bin label source
    margin: float = 0.2
    scale: float = 30.0

    def __post_init__(self):
        if self.weight < 0:
            raise DataError(f"task {self.task_name!r}: lambda must be >= 0, got {self.weight}")
        if self.task_name == "speaker":
            raise DataError("the speaker task is implicit; do not list it as auxiliary")
        if self.label_source not in LABEL_SOURCES:
            raise DataError(
                f"task {self.task_name!r}: unknown label_source {self.label_source!r}"
            )


@dataclass(frozen=True)
class MultiTaskConfig:
    tasks: tuple[AuxTaskSpec, ...] = ()
    shuffle_speaker: bool = False  # control run with permuted speaker labels

    def __post_init__(self):
        names = [t.task_name for t in self.tasks]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate auxiliary task names: {names}")

    def weight_of(self, task_name: str) -> float:
        if task_name == "speaker":
            return 1.0
        for task in self.tasks:
            if task.task_name == task_name:
                return task.weight
        raise DataError(f"no weight configured for task {task_name!r}")


@dataclass(frozen=True)
class TaskLoss:
    raw: float
    weighted: float
    accuracy: float | None
    n_examples: int


@dataclass(frozen=True)
class LossReport:
    total: float
    per_task: dict[str, TaskLoss]

    def to_json_obj(self, iteration: int) -> dict:
        return {
            "iter": iteration,
            "total": self.total,
            "tasks": {
                name: {
                    "raw": tl.raw,
                    "weighted": tl.weighted,
                    "acc": tl.accuracy,
                    "n": tl.n_examples,
                }
                for name, tl in self.per_task.items()
            },
        }


@dataclass
class Batch:
    """Fixed-length feature chunks with per-task labels.

    labels maps task name to (class index tensor, validity mask); an
    invalid entry means the utterance has no label for that task.
    """

    features: torch.Tensor  # (B, T, D)
    labels: dict[str, tuple[torch.Tensor, torch.Tensor]]
    utt_ids: tuple[str, ...] = ()


def _as_float_tensor(values) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values
    return torch.as_tensor(values, dtype=torch.float64)


def cross_entropy(logits, labels) -> torch.Tensor:
    """-log softmax(logits)[label], per example, via max-shifted
    log-sum-exp. Accepts (K,) + scalar or (B, K) + (B,)."""
    logits = _as_float_tensor(logits)
    if not torch.isfinite(logits).all():
        raise NumericsError("cross_entropy: non-finite logits")
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if labels.min() < 0 or labels.max() >= logits.shape[-1]:
        raise DataError(
            f"label out of range for {logits.shape[-1]} classes: {labels.tolist()}"
        )
    lse = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(-1, labels.unsqueeze(-1)).squeeze(-1)
    return lse - picked


def cosface_loss(cos, labels, margin: float = 0.2, scale: float = 30.0) -> torch.Tensor:
    """Cross entropy over the margin-adjusted, scaled cosine logits."""
    cos = _as_float_tensor(cos)
    if cos.abs().max() > 1.0 + 1e-6:
        raise DataError(f"cosine values must lie in [-1, 1], max abs was {cos.abs().max():.8f}")
    cos = torch.clamp(cos, -1.0, 1.0)
    labels_t = torch.as_tensor(labels, dtype=torch.long, device=cos.device)
    if labels_t.min() < 0 or labels_t.max() >= cos.shape[-1]:
        raise DataError("cosface label out of range")
    onehot = torch.nn.functional.one_hot(
        labels_t if labels_t.dim() else labels_t.unsqueeze(0), num_classes=cos.shape[-1]
    )
    if not labels_t.dim():
        onehot = onehot.squeeze(0)
    logits = scale * (cos - margin * onehot.to(cos.dtype))
    return cross_entropy(logits, labels_t)


def combine_losses(speaker_loss, aux) -> torch.Tensor | float:
    """speaker_loss + sum(lambda_m * loss_m). Zero-weight terms are
    skipped outright so an all-zero configuration returns the speaker
    loss unchanged (and contributes no gradient graph)."""
    total = speaker_loss
    for loss, weight in aux:
        if weight < 0:
            raise DataError(f"loss weight must be >= 0, got {weight}")
        if weight != 0:
            total = total + weight * loss
    return total


def batch_loss(model: MultiTaskModel, batch: Batch, mtl: MultiTaskConfig) -> tuple[torch.Tensor, LossReport]:
    """Forward the batch through every head and combine the task losses.

    Returns the differentiable total plus a plain-float report. Tasks with
    zero labeled examples in the batch report raw loss 0 with n=0.
    """
    features = torch.as_tensor(batch.features)
    if features.shape[0] < 1:
        raise DataError("batch is empty")
    spk_labels, spk_valid = batch.labels["speaker"]
    if not bool(spk_valid.all()):
        raise DataError("every utterance in a batch must have a speaker label")

    emb = model(features)
    per_task: dict[str, TaskLoss] = {}
    aux_terms = []
    speaker_term = None

    for name in model.heads:
        weight = mtl.weight_of(name)
        labels, valid = batch.labels[name]
        idx = valid.nonzero(as_tuple=True)[0]
        n = int(idx.numel())
        if n == 0:
            per_task[name] = TaskLoss(raw=0.0, weighted=0.0, accuracy=None, n_examples=0)
            continue
        sub_emb = emb[idx]
        sub_labels = labels[idx]
        train_logits = model.head_logits(name, sub_emb, labels=sub_labels)
        raw = cross_entropy(train_logits, sub_labels).mean()
        if not torch.isfinite(raw):
            raise NumericsError(f"task {name!r}: non-finite loss")
        with torch.no_grad():
            eval_logits = model.head_logits(name, sub_emb)
            acc = float((eval_logits.argmax(dim=-1) == sub_labels).double().mean())
        if name == "speaker":
            speaker_term = raw
        else:
            aux_terms.append((raw, weight))
        raw_value = float(raw.detach())
        per_task[name] = TaskLoss(
            raw=raw_value, weighted=weight * raw_value, accuracy=acc, n_examples=n
        )

    total = combine_losses(speaker_term, aux_terms)
    return total, LossReport(total=float(total.detach()), per_task=per_task)
