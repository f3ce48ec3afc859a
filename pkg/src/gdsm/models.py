"""Backbones, prediction heads, stream pathways, training and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import (
    DivergedLoss,
    EmptyDataset,
    FileMissing,
    NonFiniteOutput,
    ShapeMismatch,
    UntrainedSource,
)
from .extraction import N_PATCH_TYPES, PATCH_SIZE, ExtractedPatch, Plane

log = logging.getLogger(__name__)

GLOBAL_INPUT = 109
STREAMS = ("local_axial", "local_coronal", "local_sagittal", "global", "correction")
LOCAL_STREAMS = STREAMS[:3]


def local_stream(plane: Plane) -> str:
    return f"local_{Plane(plane).label}"


@dataclass
class BackboneSpec:
    name: str = "tiny"
    input_shape: tuple[int, int, int] = (PATCH_SIZE, PATCH_SIZE, 1)
    trainable_layer_count: int | None = None  # None: all layers
    warm_start: str | None = None
    widths: tuple[int, ...] = (8, 16, 32)

    @classmethod
    def for_stream(cls, stream: str, **kw) -> "BackboneSpec":
        size = PATCH_SIZE if stream.startswith("local") else GLOBAL_INPUT
        return cls(input_shape=(size, size, 1), **kw)


@dataclass
class HeadSpec:
    hidden: tuple[int, ...] = (64, 32, 16)
    zero_init: bool = False


class TinyBackbone(nn.Module):
    """Three stride-2 3x3 conv blocks; ``layers`` is flat so tails can be frozen."""

    def __init__(self, widths: Sequence[int] = (8, 16, 32), in_channels: int = 1):
        super().__init__()
        mods: list[nn.Module] = []
        c = in_channels
        for w in widths:
            mods += [nn.Conv2d(c, w, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            c = w
        self.layers = nn.Sequential(*mods)
        self.feature_dim = c

    def forward(self, x):
        return self.layers(x)


class ChannelReplicator(nn.Module):
    """Feeds single-channel slices to backbones that expect ``channels`` inputs."""

    def __init__(self, backbone: nn.Module, channels: int):
        super().__init__()
        self.backbone = backbone
        self.channels = channels
        self.layers = getattr(backbone, "layers", nn.Sequential(backbone))
        self.feature_dim = backbone.feature_dim

    def forward(self, x):
        return self.backbone(x.expand(-1, self.channels, -1, -1))


BACKBONES: dict[str, Callable[[BackboneSpec], nn.Module]] = {
    "tiny": lambda spec: TinyBackbone(spec.widths, in_channels=1),
}


def register_backbone(name: str, factory: Callable[[BackboneSpec], nn.Module]) -> None:
    """Register a full-scale backbone factory.

    The returned module must expose ``feature_dim`` and a flat ``layers``
    sequence; wrap multi-channel networks with :class:`ChannelReplicator`.
    """
    BACKBONES[name] = factory


def _make_head(in_width: int, spec: HeadSpec) -> nn.Sequential:
    mods: list[nn.Module] = []
    c = in_width
    for h in spec.hidden:
        mods += [nn.Linear(c, h), nn.ReLU()]
        c = h
    mods.append(nn.Linear(c, 1))
    return nn.Sequential(*mods)


def aux_width(stream: str, c1: int = 0) -> int:
    if stream in LOCAL_STREAMS:
        return 2 + N_PATCH_TYPES
    if stream == "global":
        return 2 + 3
    return c1


class PathwayModel(nn.Module):
    """Backbone -> global average pooling -> concat(aux) -> fully connected head.

    Predictions are ``head(...) * target_scale + target_offset`` in years. The
    affine target buffers are fitted from the training targets on first
    training and default to the identity.
    """

    def __init__(self, stream: str, backbone: nn.Module, head_spec: HeadSpec,
                 backbone_spec: BackboneSpec, c1: int = 0, seed: int = 0):
        super().__init__()
        if stream not in STREAMS:
            raise ValueError(f"unknown stream {stream!r}")
        self.stream = stream
        self.backbone = backbone
        self.backbone_spec = backbone_spec
        self.head_spec = head_spec
        self.c1 = c1
        self.seed = seed
        self.feature_dim = backbone.feature_dim
        self.aux_width = aux_width(stream, c1)
        self.head = _make_head(self.feature_dim + self.aux_width, head_spec)
        self.register_buffer("target_offset", torch.zeros(()))
        self.register_buffer("target_scale", torch.ones(()))
        self.register_buffer("fitted", torch.zeros((), dtype=torch.bool))
        self.register_buffer("trained", torch.zeros((), dtype=torch.bool))

    @property
    def head_input_width(self) -> int:
        return self.head[0].in_features

    @property
    def input_size(self) -> tuple[int, int]:
        return tuple(self.backbone_spec.input_shape[:2])

    def features(self, images):
        return self.backbone(images).mean(dim=(2, 3))

    def forward(self, images, aux):
        if self.stream == "correction":
            aux = (aux - self.target_offset) / self.target_scale
        z = torch.cat([self.features(images), aux], dim=1)
        return self.head(z).squeeze(1) * self.target_scale + self.target_offset


def _init_weights(model: PathwayModel, seed: int, zero_head: bool, modules: Sequence[nn.Module]) -> None:
    """He-uniform over fan-in for hidden layers, 1/sqrt(fan_in) uniform for the output layer."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for mod in modules:
            if not isinstance(mod, (nn.Conv2d, nn.Linear)):
                continue
            fan_in = mod.weight[0].numel()
            last = mod is model.head[-1]
            bound = 1.0 / math.sqrt(fan_in) if last else math.sqrt(6.0 / fan_in)
            mod.weight.copy_(torch.empty_like(mod.weight).uniform_(-bound, bound, generator=gen))
            mod.bias.zero_()
        if zero_head:
            for mod in model.head:
                if isinstance(mod, nn.Linear):
                    mod.weight.zero_()
                    mod.bias.zero_()


def build_pathway(stream: str, backbone_spec: BackboneSpec | None = None,
                  head_spec: HeadSpec | None = None, seed: int = 0) -> PathwayModel:
    backbone_spec = backbone_spec or BackboneSpec.for_stream(stream)
    head_spec = head_spec or HeadSpec()
    want = PATCH_SIZE if stream in LOCAL_STREAMS else GLOBAL_INPUT
    h, w = backbone_spec.input_shape[:2]
    if stream in LOCAL_STREAMS and (h, w) != (want, want):
        raise ShapeMismatch(f"{stream} needs {want}x{want} input, backbone takes {h}x{w}")
    if stream not in LOCAL_STREAMS and (h < want or w < want):
        raise ShapeMismatch(f"{stream} needs at least {want}x{want} input, backbone takes {h}x{w}")
    if backbone_spec.name not in BACKBONES:
        raise KeyError(f"unknown backbone {backbone_spec.name!r}")
    backbone = BACKBONES[backbone_spec.name](backbone_spec)
    model = PathwayModel(stream, backbone, head_spec, backbone_spec, seed=seed)
    _init_weights(model, seed, head_spec.zero_init, list(model.modules()))
    if backbone_spec.warm_start:
        state = torch.load(backbone_spec.warm_start, map_location="cpu", weights_only=True)
        model.backbone.load_state_dict(state)
    _apply_trainable(model.backbone, backbone_spec.trainable_layer_count)
    return model


def _apply_trainable(backbone: nn.Module, tail: int | None) -> None:
    layers = list(backbone.layers)
    n_frozen = 0 if tail is None else max(len(layers) - tail, 0)
    for i, layer in enumerate(layers):
        for p in layer.parameters():
            p.requires_grad_(i >= n_frozen)


def build_correction_model(trained_global: PathwayModel, c1: int, tail_trainable: int = 4,
                           seed: int = 0) -> PathwayModel:
    """Copy the trained global backbone, freeze all but its last layers, attach an age-vector head."""
    if trained_global.stream != "global" or not bool(trained_global.trained):
        raise UntrainedSource("correction needs a trained global model")
    if c1 < 1:
        raise ValueError("c1 must be >= 1")
    backbone = copy.deepcopy(trained_global.backbone)
    spec = copy.deepcopy(trained_global.backbone_spec)
    spec.trainable_layer_count = tail_trainable
    head_spec = copy.deepcopy(trained_global.head_spec)
    model = PathwayModel("correction", backbone, head_spec, spec, c1=c1, seed=seed)
    model = model.to(next(trained_global.parameters()).dtype)
    _init_weights(model, seed, head_spec.zero_init, list(model.head.modules()))
    _apply_trainable(model.backbone, tail_trainable)
    return model


# ---------------------------------------------------------------- encoding


def _fit_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = image.shape
    H, W = size
    if h > H or w > W:
        raise ShapeMismatch(f"patch {h}x{w} larger than backbone input {H}x{W}")
    if (h, w) == (H, W):
        return image
    out = np.zeros((H, W), dtype=np.float32)
    top, left = (H - h) // 2, (W - w) // 2
    out[top : top + h, left : left + w] = image
    return out


def _check_stream(model: PathwayModel, patch: ExtractedPatch) -> None:
    if model.stream in LOCAL_STREAMS:
        ok = patch.stream == "local" and local_stream(patch.plane) == model.stream
    else:
        ok = patch.stream == "global"
    if not ok:
        raise ShapeMismatch(f"{patch.stream}/{patch.plane.label} patch fed to {model.stream} model")


def aux_vector(model: PathwayModel, patch: ExtractedPatch, age_vector=None) -> np.ndarray:
    if model.stream == "correction":
        if age_vector is None or len(age_vector) != model.c1:
            raise ShapeMismatch(f"correction model needs an age vector of length {model.c1}")
        return np.asarray(age_vector, dtype=np.float32)
    slice_norm = patch.slice_index / max(patch.axis_length - 1, 1)
    n_types = N_PATCH_TYPES if model.stream in LOCAL_STREAMS else 3
    onehot = np.zeros(n_types, dtype=np.float32)
    onehot[patch.encoded_label] = 1.0
    return np.concatenate([[patch.gender, slice_norm], onehot]).astype(np.float32)


def encode(model: PathwayModel, patches: Sequence[ExtractedPatch],
           age_vectors: Mapping[str, np.ndarray] | None = None):
    """Stack patches into (images, aux, targets) tensors for ``model``."""
    n = len(patches)
    H, W = model.input_size
    images = np.empty((n, 1, H, W), dtype=np.float32)
    aux = np.empty((n, model.aux_width), dtype=np.float32)
    targets = np.empty(n, dtype=np.float32)
    for i, p in enumerate(patches):
        _check_stream(model, p)
        images[i, 0] = _fit_image(p.image, (H, W))
        aux[i] = aux_vector(model, p, None if age_vectors is None else age_vectors[p.subject_id])
        targets[i] = p.target_age
    dtype = next(model.parameters()).dtype
    return (torch.from_numpy(images).to(dtype), torch.from_numpy(aux).to(dtype),
            torch.from_numpy(targets).to(dtype))


def predict_tensors(model: PathwayModel, images, aux, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(images[i : i + batch_size], aux[i : i + batch_size]))
    preds = torch.cat(out).double().numpy() if out else np.empty(0)
    if not np.all(np.isfinite(preds)):
        raise NonFiniteOutput(f"{model.stream} model produced non-finite predictions")
    return preds


def predict_batch(model: PathwayModel, patches: Sequence[ExtractedPatch], age_vectors=None) -> np.ndarray:
    images, aux, _ = encode(model, patches, age_vectors)
    return predict_tensors(model, images, aux)


def predict(model: PathwayModel, patch: ExtractedPatch, age_vector=None) -> float:
    """Evaluation-mode age prediction (years) for one patch."""
    vectors = None if age_vector is None else {patch.subject_id: age_vector}
    return float(predict_batch(model, [patch], vectors)[0])


# ---------------------------------------------------------------- training


@dataclass
class TrainingConfig:
    learning_rate: float = 0.001
    lr_factor: float = 0.5
    lr_patience: int = 2  # epochs without improvement before halving
    epochs: int = 40
    batch_size: int = 32
    patience: int = 3
    seed: int = 0


@dataclass
class TrainingHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_json(self) -> dict:
        return asdict(self)


def train(model: PathwayModel, train_patches: Sequence[ExtractedPatch],
          val_patches: Sequence[ExtractedPatch], config: TrainingConfig | None = None,
          age_vectors: Mapping[str, np.ndarray] | None = None) -> tuple[PathwayModel, TrainingHistory]:
    """Adam on the MAE loss with plateau LR halving and early stopping.

    Validation MAE is monitored (training MAE when no validation patches are
    given); the best-epoch weights are restored before returning.
    """
    if len(train_patches) == 0:
        raise EmptyDataset(f"no training patches for {model.stream}")
    config = config or TrainingConfig()
    data = encode(model, train_patches, age_vectors)
    val = encode(model, val_patches, age_vectors) if len(val_patches) else None
    return train_tensors(model, data, val, config)


def train_tensors(model: PathwayModel, data, val, config: TrainingConfig):
    images, aux, targets = data
    if not torch.all(torch.isfinite(targets)):
        raise EmptyDataset("training targets must be finite")
    torch.manual_seed(config.seed)
    if not bool(model.fitted):
        with torch.no_grad():
            model.target_offset.fill_(float(targets.mean()))
            model.target_scale.fill_(max(float(targets.std(unbiased=False)), 1.0))
            model.fitted.fill_(True)

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, factor=config.lr_factor, patience=max(config.lr_patience - 1, 0))
    loss_fn = nn.L1Loss()
    gen = torch.Generator().manual_seed(config.seed)
    history = TrainingHistory()
    best_loss, best_state, stale = math.inf, None, 0
    n = len(targets)

    for epoch in range(config.epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            opt.zero_grad()
            loss = loss_fn(model(images[idx], aux[idx]), targets[idx])
            if not torch.isfinite(loss):
                raise DivergedLoss(f"{model.stream}: non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        train_mae = total / n
        if val is not None:
            preds = predict_tensors(model, val[0], val[1])
            monitor = float(np.mean(np.abs(preds - val[2].double().numpy())))
        else:
            monitor = train_mae
        lr = opt.param_groups[0]["lr"]
        history.epochs.append({"epoch": epoch, "train_mae": train_mae,
                               "val_mae": monitor if val is not None else None, "lr": lr})
        log.info("%s epoch %d train %.3f monitor %.3f lr %.2g", model.stream, epoch, train_mae, monitor, lr)
        sched.step(monitor)
        if monitor < best_loss:
            best_loss, stale = monitor, 0
            history.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= config.patience:
                history.stopped_early = True
                break

    model.load_state_dict(best_state)
    with torch.no_grad():
        model.trained.fill_(True)
    model.eval()
    return model, history


# ---------------------------------------------------------------- checkpoints


def parameter_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_model(model: PathwayModel, bundle_dir, history: TrainingHistory | None = None,
               config_hash: str = "") -> Path:
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    name = model.stream
    torch.save(model.state_dict(), bundle_dir / f"{name}.pt")
    spec = {
        "stream": model.stream,
        "backbone": asdict(model.backbone_spec),
        "head": asdict(model.head_spec),
        "c1": model.c1,
        "init": {"scheme": "he_uniform_fan_in", "seed": model.seed},
        "config_hash": config_hash,
        "weights_sha256": parameter_digest(model),
    }
    (bundle_dir / f"{name}.spec.json").write_text(json.dumps(spec, indent=2) + "\n")
    if history is not None:
        (bundle_dir / f"{name}.history.json").write_text(json.dumps(history.to_json(), indent=2) + "\n")
    return bundle_dir / f"{name}.pt"


def read_spec(bundle_dir, stream: str) -> dict:
    path = Path(bundle_dir) / f"{stream}.spec.json"
    if not path.exists():
        raise FileMissing(f"no {stream} checkpoint in {bundle_dir}")
    return json.loads(path.read_text())


def load_model(bundle_dir, stream: str) -> PathwayModel:
    spec = read_spec(bundle_dir, stream)
    b = spec["backbone"]
    backbone_spec = BackboneSpec(
        name=b["name"], input_shape=tuple(b["input_shape"]),
        trainable_layer_count=b["trainable_layer_count"], warm_start=None, widths=tuple(b["widths"]),
    )
    head_spec = HeadSpec(hidden=tuple(spec["head"]["hidden"]), zero_init=spec["head"]["zero_init"])
    backbone = BACKBONES[backbone_spec.name](backbone_spec)
    model = PathwayModel(stream, backbone, head_spec, backbone_spec, c1=spec["c1"], seed=spec["init"]["seed"])
    state = torch.load(Path(bundle_dir) / f"{stream}.pt", map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model
