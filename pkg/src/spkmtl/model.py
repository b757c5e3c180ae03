"""The embedding extractor and task heads.

The extractor is an x-vector style TDNN: five temporal-context layers,
mean+stddev statistics pooling, and an affine projection to a 256-dim
embedding. The embedding is the affine output taken before any
nonlinearity. Task heads consume the embedding: "mlp_ce" heads are
two-hidden-layer MLPs producing plain logits, "cosface" heads are a
single normalized affine producing scaled cosine logits with an additive
target-class margin.

Parameters are tagged "<owner>/<layer>.<kind>" where owner is "extractor"
or a task name; the embedding projection is tagged "extractor/last_linear"
so fine-tuning can address it directly.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataio import feat1_decode, feat1_encode
from .errors import DataError
from .seeding import derive_seed

VARIANCE_FLOOR = 1e-10
NORM_FLOOR = 1e-8

# (context offsets, output dim) per frame layer, following the original
# x-vector recipe; the embedding layer size is what this system changes.
X_VECTOR_FRAME_LAYERS = (
    ((-2, -1, 0, 1, 2), 512),
    ((-2, 0, 2), 512),
    ((-3, 0, 3), 512),
    ((0,), 512),
    ((0,), 1500),
)

HEAD_KINDS = ("mlp_ce", "cosface")


def _context_to_conv(context: tuple[int, ...]) -> tuple[int, int]:
    """Map symmetric evenly spaced context offsets to (kernel, dilation)."""
    ctx = tuple(int(c) for c in context)
    if len(ctx) == 1:
        if ctx[0] != 0:
            raise DataError(f"single-offset context must be (0,), got {ctx}")
        return 1, 1
    steps = {ctx[i + 1] - ctx[i] for i in range(len(ctx) - 1)}
    if len(steps) != 1:
        raise DataError(f"context offsets must be evenly spaced, got {ctx}")
    dilation = steps.pop()
    if dilation <= 0 or ctx[0] != -ctx[-1]:
        raise DataError(f"context offsets must be symmetric around 0, got {ctx}")
    return len(ctx), dilation


@dataclass(frozen=True)
class ExtractorConfig:
    input_dim: int = 30
    frame_layers: tuple = X_VECTOR_FRAME_LAYERS
    embedding_dim: int = 256
    leaky_relu_slope: float = 0.01

    def __post_init__(self):
        for context, dim in self.frame_layers:
            _context_to_conv(tuple(context))
            if dim < 1:
                raise DataError(f"frame layer dim must be >= 1, got {dim}")

    @property
    def min_frames(self) -> int:
        """Smallest input length the TDNN stack can consume."""
        total = 0
        for context, _ in self.frame_layers:
            kernel, dilation = _context_to_conv(tuple(context))
            total += (kernel - 1) * dilation
        return total + 1

    @property
    def pooled_dim(self) -> int:
        return 2 * self.frame_layers[-1][1]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "frame_layers": [[list(ctx), dim] for ctx, dim in self.frame_layers],
            "embedding_dim": self.embedding_dim,
            "leaky_relu_slope": self.leaky_relu_slope,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ExtractorConfig":
        return cls(
            input_dim=int(obj["input_dim"]),
            frame_layers=tuple((tuple(ctx), int(dim)) for ctx, dim in obj["frame_layers"]),
            embedding_dim=int(obj["embedding_dim"]),
            leaky_relu_slope=float(obj["leaky_relu_slope"]),
        )


@dataclass(frozen=True)
class TaskHeadSpec:
    task_name: str
    kind: str
    n_classes: int
    margin: float = 0.2
    scale: float = 30.0

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise DataError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")
        if self.n_classes < 2:
            raise DataError(f"head {self.task_name!r}: n_classes must be >= 2")
        if self.margin < 0:
            raise DataError(f"head {self.task_name!r}: margin must be >= 0")
        if self.scale <= 0:
            raise DataError(f"head {self.task_name!r}: scale must be > 0")

    def to_dict(self) -> dict:
        return {
            "task_name": self.task_name,
            "kind": self.kind,
            "n_classes": self.n_classes,
            "margin": self.margin,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TaskHeadSpec":
        return cls(
            task_name=obj["task_name"],
            kind=obj["kind"],
            n_classes=int(obj["n_classes"]),
            margin=float(obj.get("margin", 0.2)),
            scale=float(obj.get("scale", 30.0)),
        )


def stats_pool(frames: torch.Tensor) -> torch.Tensor:
    """Mean + stddev over time: (..., T, D) -> (..., 2D).

    Values are sorted along time before reduction so the summation order
    is canonical, making the pooling bitwise invariant to any permutation
    of the frames. The standard deviation is the population form with the
    variance floored at 1e-10.
    """
    if frames.shape[-2] < 1:
        raise DataError("stats_pool needs at least one frame")
    ordered = torch.sort(frames, dim=-2).values
    mean = ordered.mean(dim=-2)
    var = ((ordered - mean.unsqueeze(-2)) ** 2).mean(dim=-2)
    std = torch.sqrt(torch.clamp(var, min=VARIANCE_FLOOR))
    return torch.cat([mean, std], dim=-1)


class TdnnExtractor(nn.Module):
    """Frame-level TDNN stack + statistics pooling + embedding affine."""

    def __init__(self, config: ExtractorConfig):
        super().__init__()
        self.config = config
        convs = []
        in_dim = config.input_dim
        for context, out_dim in config.frame_layers:
            kernel, dilation = _context_to_conv(tuple(context))
            convs.append(nn.Conv1d(in_dim, out_dim, kernel, dilation=dilation))
            in_dim = out_dim
        self.convs = nn.ModuleList(convs)
        self.last_linear = nn.Linear(config.pooled_dim, config.embedding_dim)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(B, T, D_in) -> (B, embedding_dim), embedding pre-nonlinearity."""
        if features.dim() != 3:
            raise DataError(f"expected (batch, frames, dim) input, got shape {tuple(features.shape)}")
        if features.shape[1] < self.config.min_frames:
            raise DataError(
                f"input has {features.shape[1]} frames but the TDNN stack "
                f"needs at least {self.config.min_frames}"
            )
        x = features.transpose(1, 2)  # (B, D, T) for conv1d
        for conv in self.convs:
            x = torch.nn.functional.leaky_relu(conv(x), self.config.leaky_relu_slope)
        pooled = stats_pool(x.transpose(1, 2))
        return self.last_linear(pooled)


class MlpHead(nn.Module):
    """Two hidden layers (embedding-sized) with Leaky ReLU, then a
    projection to the class logits."""

    def __init__(self, spec: TaskHeadSpec, embedding_dim: int, slope: float = 0.01):
        super().__init__()
        self.spec = spec
        self.slope = slope
        self.linear0 = nn.Linear(embedding_dim, embedding_dim)
        self.linear1 = nn.Linear(embedding_dim, embedding_dim)
        self.linear2 = nn.Linear(embedding_dim, spec.n_classes)

    def forward(self, emb: torch.Tensor, labels=None) -> torch.Tensor:
        lrelu = torch.nn.functional.leaky_relu
        h = lrelu(self.linear0(emb), self.slope)
        h = lrelu(self.linear1(h), self.slope)
        return self.linear2(h)


def cosface_logits(weight: torch.Tensor, emb: torch.Tensor, labels=None,
                   margin: float = 0.2, scale: float = 30.0) -> torch.Tensor:
    """Scaled cosine logits with an additive margin on the target class.

    Weight rows and embeddings are L2-normalized with a 1e-8 norm floor.
    With labels (training form) the target-class cosine is reduced by
    margin before scaling; without labels (inference) the logits are just
    scale * cosine.
    """
    w = weight / torch.clamp(weight.norm(dim=-1, keepdim=True), min=NORM_FLOOR)
    e = emb / torch.clamp(emb.norm(dim=-1, keepdim=True), min=NORM_FLOOR)
    cos = torch.clamp(e @ w.T, -1.0, 1.0)
    if labels is None:
        return scale * cos
    labels = torch.as_tensor(labels, dtype=torch.long, device=cos.device)
    squeeze = False
    if cos.dim() == 1:
        cos, labels, squeeze = cos.unsqueeze(0), labels.reshape(1), True
    if labels.min() < 0 or labels.max() >= cos.shape[-1]:
        raise DataError("cosface label out of range")
    onehot = torch.nn.functional.one_hot(labels, num_classes=cos.shape[-1])
    logits = scale * (cos - margin * onehot.to(cos.dtype))
    return logits.squeeze(0) if squeeze else logits


class CosfaceHead(nn.Module):
    """Single affine matrix producing margin-penalized cosine logits."""

    def __init__(self, spec: TaskHeadSpec, embedding_dim: int):
        super().__init__()
        self.spec = spec
        self.weight = nn.Parameter(torch.empty(spec.n_classes, embedding_dim))

    def forward(self, emb: torch.Tensor, labels=None) -> torch.Tensor:
        return cosface_logits(self.weight, emb, labels, self.spec.margin, self.spec.scale)


class MultiTaskModel(nn.Module):
    """Shared extractor plus one head per task; "speaker" is always the
    first head."""

    def __init__(self, extractor_config: ExtractorConfig, head_specs: list[TaskHeadSpec]):
        super().__init__()
        names = [spec.task_name for spec in head_specs]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate task names in head specs: {names}")
        if "speaker" not in names:
            raise DataError("a speaker head is required")
        self.extractor = TdnnExtractor(extractor_config)
        heads = {}
        for spec in head_specs:
            if spec.kind == "cosface":
                heads[spec.task_name] = CosfaceHead(spec, extractor_config.embedding_dim)
            else:
                heads[spec.task_name] = MlpHead(
                    spec, extractor_config.embedding_dim, extractor_config.leaky_relu_slope
                )
        self.heads = nn.ModuleDict(heads)
        self.head_specs = {spec.task_name: spec for spec in head_specs}

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.extractor(features)

    def head_logits(self, task: str, emb: torch.Tensor, labels=None) -> torch.Tensor:
        return self.heads[task](emb, labels)

    def config_dict(self) -> dict:
        return {
            "extractor": self.extractor.config.to_dict(),
            "heads": [self.head_specs[name].to_dict() for name in self.heads],
        }


def tagged_parameters(model: MultiTaskModel) -> dict[str, nn.Parameter]:
    """Ordered tag -> parameter map partitioning every learnable value.

    Extractor tags: extractor/frame{i}.{weight,bias} and
    extractor/last_linear.{weight,bias}. Head tags: <task>/weight for
    cosface, <task>/linear{j}.{weight,bias} for MLP heads.
    """
    tags: dict[str, nn.Parameter] = {}
    for i, conv in enumerate(model.extractor.convs):
        tags[f"extractor/frame{i}.weight"] = conv.weight
        tags[f"extractor/frame{i}.bias"] = conv.bias
    tags["extractor/last_linear.weight"] = model.extractor.last_linear.weight
    tags["extractor/last_linear.bias"] = model.extractor.last_linear.bias
    for name, head in model.heads.items():
        if isinstance(head, CosfaceHead):
            tags[f"{name}/weight"] = head.weight
        else:
            for j, layer in enumerate((head.linear0, head.linear1, head.linear2)):
                tags[f"{name}/linear{j}.weight"] = layer.weight
                tags[f"{name}/linear{j}.bias"] = layer.bias
    return tags


def init_parameters(model: MultiTaskModel, seed: int) -> None:
    """Seed-controlled init: weights uniform in +/- 1/sqrt(fan_in), biases
    zero. Each component (extractor, every head) draws from its own
    derived stream, so adding or removing a head never shifts the others.
    """
    components = [("extractor", model.extractor)]
    components += [(name, head) for name, head in model.heads.items()]
    for name, module in components:
        gen = torch.Generator().manual_seed(derive_seed(seed, "init", name))
        for pname, param in module.named_parameters():
            with torch.no_grad():
                if pname.endswith("bias"):
                    param.zero_()
                else:
                    fan_in = int(np.prod(param.shape[1:]))
                    bound = 1.0 / np.sqrt(fan_in)
                    values = torch.empty(
                        param.shape, dtype=torch.float32
                    ).uniform_(-bound, bound, generator=gen)
                    param.copy_(values.to(param.dtype))


def build_model(extractor_config: ExtractorConfig, head_specs: list[TaskHeadSpec],
                seed: int = 0) -> MultiTaskModel:
    model = MultiTaskModel(extractor_config, head_specs)
    init_parameters(model, seed)
    return model


def extract_embedding(model: MultiTaskModel, features) -> np.ndarray:
    """Embedding for one utterance: (T, D) features -> (embedding_dim,)."""
    feats = torch.as_tensor(np.asarray(features), dtype=torch.float32)
    if feats.dim() != 2:
        raise DataError(f"expected (frames, dim) features, got shape {tuple(feats.shape)}")
    model.eval()
    with torch.no_grad():
        emb = model(feats.unsqueeze(0))[0]
    out = emb.cpu().numpy().astype(np.float32)
    if not np.isfinite(out).all():
        raise DataError("embedding contains non-finite values")
    return out


# ---------------------------------------------------------------------------
# Checkpoints: a ZIP of FEAT1-encoded parameter tensors plus config.json
# and meta.json.
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    iteration: int = 0
    meta: dict = field(default_factory=dict)

    def build_model(self) -> MultiTaskModel:
        extractor_cfg = ExtractorConfig.from_dict(self.config["extractor"])
        specs = [TaskHeadSpec.from_dict(h) for h in self.config["heads"]]
        model = MultiTaskModel(extractor_cfg, specs)
        load_into_model(model, self.params)
        return model


def checkpoint_from_model(model: MultiTaskModel, iteration: int = 0, meta: dict | None = None) -> Checkpoint:
    params = {
        tag: p.detach().cpu().numpy().astype(np.float32, copy=True)
        for tag, p in tagged_parameters(model).items()
    }
    return Checkpoint(config=model.config_dict(), params=params,
                      iteration=iteration, meta=dict(meta or {}))


def load_into_model(model: MultiTaskModel, params: dict[str, np.ndarray]) -> None:
    tags = tagged_parameters(model)
    missing = sorted(set(tags) - set(params))
    extra = sorted(set(params) - set(tags))
    if missing or extra:
        raise DataError(f"checkpoint/model tag mismatch: missing={missing}, extra={extra}")
    with torch.no_grad():
        for tag, param in tags.items():
            arr = np.asarray(params[tag])
            if tuple(arr.shape) != tuple(param.shape):
                raise DataError(
                    f"parameter {tag!r}: checkpoint shape {arr.shape} != model shape "
                    f"{tuple(param.shape)}"
                )
            param.copy_(torch.as_tensor(arr, dtype=param.dtype))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "iteration": ckpt.iteration,
        "shapes": {tag: list(arr.shape) for tag, arr in ckpt.params.items()},
        **ckpt.meta,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        def add(name, data):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)

        add("config.json", json.dumps(ckpt.config, sort_keys=True, indent=2))
        add("meta.json", json.dumps(meta, sort_keys=True, indent=2))
        for tag, arr in sorted(ckpt.params.items()):
            arr = np.asarray(arr, dtype=np.float32)
            flat = arr.reshape(arr.shape[0], -1) if arr.ndim >= 2 else arr.reshape(1, -1)
            add(f"params/{tag}.feat1", feat1_encode(flat))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    with zipfile.ZipFile(path, "r") as zf:
        names = set(zf.namelist())
        for required in ("config.json", "meta.json"):
            if required not in names:
                raise DataError(f"{path}: checkpoint is missing {required}")
        config = json.loads(zf.read("config.json"))
        meta = json.loads(zf.read("meta.json"))
        shapes = meta.get("shapes", {})
        params: dict[str, np.ndarray] = {}
        for name in sorted(names):
            if not (name.startswith("params/") and name.endswith(".feat1")):
                continue
            tag = name[len("params/"):-len(".feat1")]
            flat = feat1_decode(zf.read(name), where=f"{path}:{name}")
            if tag not in shapes:
                raise DataError(f"{path}: parameter {tag!r} missing from meta.json shapes")
            params[tag] = flat.reshape(shapes[tag])
        missing = sorted(set(shapes) - set(params))
        if missing:
            raise DataError(f"{path}: parameters listed in meta.json but absent: {missing}")
    iteration = int(meta.get("iteration", 0))
    extra = {k: v for k, v in meta.items() if k not in ("iteration", "shapes")}
    return Checkpoint(config=config, params=params, iteration=iteration, meta=extra)
