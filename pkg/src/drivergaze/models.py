"""ImageNet backbones adapted to 7-way gaze heads.

Four torchvision families are supported out of the box. AlexNet, VGG16 and
ResNet50 end in fully connected layers and are locked to their native input
size; SqueezeNet (and the small ``tiny`` network used for desk-scale runs)
ends in a 1x1 conv followed by global average pooling, so it can be switched
to variable-resolution inference. Head surgery swaps the 1000-way output for
a 7-way one, He-initializes only the new parameters, and leaves every other
weight untouched.

Backbone internals stay opaque behind a small registry entry (builder, head
replacement, forward-with-feature-maps), so adding a fifth family does not
touch any other module.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .preprocess import IMAGENET_CHANNEL_MEANS, NetworkInput
from .types import GazeZone, ZoneDistribution, ZONE_COUNT, ZONE_LABELS

CHECKPOINT_FORMAT_VERSION = 1

FULLY_CONNECTED = "fully_connected"
CONV_GAP = "conv_gap"


class WeightLoadError(RuntimeError):
    """Pretrained weights missing, corrupt, or shaped for a different graph."""


class ResolutionError(ValueError):
    """Input resolution incompatible with the model."""


class HeadKindError(ValueError):
    """Operation requires a GAP-headed (fully convolutional) model."""


@dataclass(frozen=True)
class FamilyInfo:
    """Everything the toolkit needs to know about one backbone family."""

    name: str
    native_input: int
    head_kind: str
    build: Callable[[], nn.Module]
    replace_head: Callable[[nn.Module, int, torch.Generator], list[str]]
    forward_with_maps: Callable[[nn.Module, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


def _he_init(layer: nn.Module, generator: torch.Generator) -> None:
    nn.init.kaiming_normal_(layer.weight, nonlinearity="relu", generator=generator)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)


def _replace_classifier_linear(net: nn.Module, num_classes: int, generator: torch.Generator) -> list[str]:
    old = net.classifier[6]
    new = nn.Linear(old.in_features, num_classes)
    _he_init(new, generator)
    net.classifier[6] = new
    return ["classifier.6.weight", "classifier.6.bias"]


def _replace_fc(net: nn.Module, num_classes: int, generator: torch.Generator) -> list[str]:
    new = nn.Linear(net.fc.in_features, num_classes)
    _he_init(new, generator)
    net.fc = new
    return ["fc.weight", "fc.bias"]


def _replace_squeezenet_conv(net: nn.Module, num_classes: int, generator: torch.Generator) -> list[str]:
    old = net.classifier[1]
    new = nn.Conv2d(old.in_channels, num_classes, kernel_size=1)
    _he_init(new, generator)
    net.classifier[1] = new
    return ["classifier.1.weight", "classifier.1.bias"]


def _alexnet_forward(net: nn.Module, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    maps = net.features(x)
    pooled = torch.flatten(net.avgpool(maps), 1)
    return net.classifier(pooled), maps


def _vgg_forward(net: nn.Module, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    maps = net.features(x)
    pooled = torch.flatten(net.avgpool(maps), 1)
    return net.classifier(pooled), maps


def _resnet_forward(net: nn.Module, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    x = net.maxpool(net.relu(net.bn1(net.conv1(x))))
    x = net.layer4(net.layer3(net.layer2(net.layer1(x))))
    pooled = torch.flatten(net.avgpool(x), 1)
    return net.fc(pooled), x


def _squeezenet_forward(net: nn.Module, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    # Dropout is identity here (inference path); maps are the activations the
    # global average pool sees, so their spatial mean IS the logit.
    feats = net.features(x)
    maps = torch.relu(net.classifier[1](feats))
    logits = maps.mean(dim=(2, 3))
    return logits, maps


class TinyConvGap(nn.Module):
    """Small fully convolutional classifier for CPU-scale experiments.

    Same head shape as SqueezeNet (1x1 conv -> ReLU -> GAP -> softmax), three
    strided conv blocks of features. Good enough to learn synthetic gaze
    patterns in a few epochs on a laptop CPU.
    """

    def __init__(self, num_classes: int = 1000, width: int = 24):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, kernel_size=3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, 2 * width, kernel_size=3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * width, 2 * width, kernel_size=3, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.classifier = nn.Sequential(
            nn.Conv2d(2 * width, num_classes, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d((1, 1)),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.classifier(self.features(x)), 1)


def _replace_tiny_conv(net: nn.Module, num_classes: int, generator: torch.Generator) -> list[str]:
    old = net.classifier[0]
    new = nn.Conv2d(old.in_channels, num_classes, kernel_size=1)
    _he_init(new, generator)
    net.classifier[0] = new
    return ["classifier.0.weight", "classifier.0.bias"]


def _tiny_forward(net: nn.Module, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    feats = net.features(x)
    maps = torch.relu(net.classifier[0](feats))
    logits = maps.mean(dim=(2, 3))
    return logits, maps


def _build_alexnet() -> nn.Module:
    from torchvision.models import alexnet

    return alexnet(weights=None)


def _build_vgg16() -> nn.Module:
    from torchvision.models import vgg16

    return vgg16(weights=None)


def _build_resnet50() -> nn.Module:
    from torchvision.models import resnet50

    return resnet50(weights=None)


def _build_squeezenet() -> nn.Module:
    from torchvision.models import squeezenet1_0

    return squeezenet1_0(weights=None)


_FAMILIES: dict[str, FamilyInfo] = {}


def register_family(info: FamilyInfo) -> None:
    _FAMILIES[info.name] = info


def family_names() -> list[str]:
    return list(_FAMILIES)


def family_info(name: str) -> FamilyInfo:
    key = name.lower()
    if key not in _FAMILIES:
        raise ValueError(f"unknown backbone family {name!r}; valid: {', '.join(_FAMILIES)}")
    return _FAMILIES[key]


register_family(FamilyInfo("alexnet", 227, FULLY_CONNECTED, _build_alexnet, _replace_classifier_linear, _alexnet_forward))
register_family(FamilyInfo("vgg16", 224, FULLY_CONNECTED, _build_vgg16, _replace_classifier_linear, _vgg_forward))
register_family(FamilyInfo("resnet50", 224, FULLY_CONNECTED, _build_resnet50, _replace_fc, _resnet_forward))
register_family(FamilyInfo("squeezenet", 224, CONV_GAP, _build_squeezenet, _replace_squeezenet_conv, _squeezenet_forward))
register_family(FamilyInfo("tiny", 224, CONV_GAP, TinyConvGap, _replace_tiny_conv, _tiny_forward))

# The four production families (report order).
STANDARD_FAMILIES = ("alexnet", "resnet50", "vgg16", "squeezenet")


@dataclass(frozen=True)
class BackboneSpec:
    """Which backbone to adapt and where its pretrained weights live.

    ``weights`` is a locator: a local state-dict path, ``"torchvision"`` to
    pull the published ImageNet weights (needs network access), or None for a
    freshly initialized graph (useful for tests and architecture checks).
    """

    family: str
    weights: str | None = None
    checksum: str | None = None  # sha256 of the weights file, verified on load

    def __post_init__(self):
        object.__setattr__(self, "family", self.family.lower())
        family_info(self.family)

    @property
    def info(self) -> FamilyInfo:
        return _FAMILIES[self.family]

    @property
    def native_input(self) -> int:
        return self.info.native_input

    @property
    def head_kind(self) -> str:
        return self.info.head_kind

    @property
    def channel_means(self) -> tuple[float, float, float]:
        # All supported families were pretrained on ImageNet.
        return IMAGENET_CHANNEL_MEANS


@dataclass
class ForwardResult:
    """One inference: probabilities, raw logits and the final conv activations."""

    distribution: ZoneDistribution
    logits: np.ndarray
    feature_maps: np.ndarray  # (channels, h, w); the class maps for conv_gap heads

    @property
    def predicted(self) -> GazeZone:
        from .types import argmax_zone

        return argmax_zone(self.distribution)


class GazeModel:
    """An adapted backbone plus the metadata evaluation and CAM code need."""

    def __init__(
        self,
        net: nn.Module,
        spec: BackboneSpec,
        head_param_names: list[str],
        accepts_variable_resolution: bool = False,
    ):
        if accepts_variable_resolution and spec.head_kind != CONV_GAP:
            raise HeadKindError("only conv_gap heads can accept variable resolution")
        self.net = net
        self.spec = spec
        self.head_param_names = list(head_param_names)
        self.accepts_variable_resolution = accepts_variable_resolution
        self.zone_order = ZONE_LABELS
        self.num_classes = ZONE_COUNT

    @property
    def head_kind(self) -> str:
        return self.spec.head_kind

    def head_parameters(self) -> list[tuple[str, nn.Parameter]]:
        named = dict(self.net.named_parameters())
        return [(name, named[name]) for name in self.head_param_names]

    def backbone_parameters(self) -> list[tuple[str, nn.Parameter]]:
        head = set(self.head_param_names)
        return [(n, p) for n, p in self.net.named_parameters() if n not in head]

    def to_batch(self, inputs: "NetworkInput | np.ndarray | list[NetworkInput]") -> torch.Tensor:
        """Stack NetworkInputs (HxWx3 float32) into an NCHW float tensor."""
        if isinstance(inputs, NetworkInput):
            inputs = [inputs]
        if isinstance(inputs, np.ndarray):
            arr = inputs[None] if inputs.ndim == 3 else inputs
        else:
            arr = np.stack([inp.pixels for inp in inputs])
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float()

    def _check_resolution(self, x: torch.Tensor) -> None:
        h, w = int(x.shape[-2]), int(x.shape[-1])
        if self.accepts_variable_resolution:
            return
        native = self.spec.native_input
        if (h, w) != (native, native):
            raise ResolutionError(
                f"{self.spec.family} expects {native}x{native} input, got {h}x{w}; "
                "conv_gap models can be converted with make_variable_resolution()"
            )

    def forward(self, inp: "NetworkInput | np.ndarray") -> ForwardResult:
        """Inference on one patch. Deterministic; safe to call concurrently."""
        x = self.to_batch(inp)
        self._check_resolution(x)
        was_training = self.net.training
        self.net.eval()
        try:
            with torch.no_grad():
                logits, maps = self.spec.info.forward_with_maps(self.net, x)
        finally:
            if was_training:
                self.net.train()
        logits_np = logits[0].numpy().astype(np.float64)
        probs = softmax(logits_np)
        return ForwardResult(
            distribution=ZoneDistribution(probs),
            logits=logits_np,
            feature_maps=maps[0].numpy(),
        )

    def forward_batch(self, x: torch.Tensor) -> torch.Tensor:
        """Raw logits for an NCHW batch (training/eval loops)."""
        self._check_resolution(x)
        return self.net(x)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _load_pretrained(net: nn.Module, spec: BackboneSpec) -> None:
    if spec.weights is None:
        return
    if spec.weights == "torchvision":
        try:
            from torchvision.models import get_model

            pretrained = get_model(spec.family if spec.family != "squeezenet" else "squeezenet1_0", weights="DEFAULT")
        except Exception as exc:
            raise WeightLoadError(
                "could not fetch published torchvision weights (network access required); "
                "pass a local state-dict path instead"
            ) from exc
        net.load_state_dict(pretrained.state_dict())
        return
    path = Path(spec.weights)
    if not path.exists():
        raise WeightLoadError(f"weights file not found: {path}")
    if spec.checksum is not None:
        actual = _sha256(path)
        if actual != spec.checksum:
            raise WeightLoadError(f"weights checksum mismatch for {path}: expected {spec.checksum}, got {actual}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    except WeightLoadError:
        raise
    except Exception as exc:
        raise WeightLoadError(f"failed to load weights from {path}: {exc}") from exc


def adapt_head(spec: BackboneSpec, seed: int = 0) -> GazeModel:
    """Build the backbone, load its weights, and graft a 7-way head onto it.

    Only the new head parameters are (He-)initialized; everything upstream
    keeps the loaded values bit for bit. The same seed reproduces the same
    head initialization exactly.
    """
    info = spec.info
    net = info.build()
    _load_pretrained(net, spec)
    generator = torch.Generator().manual_seed(seed)
    head_names = info.replace_head(net, ZONE_COUNT, generator)
    net.eval()
    return GazeModel(net, spec, head_names, accepts_variable_resolution=False)


def make_variable_resolution(model: GazeModel) -> GazeModel:
    """Allow non-native square inputs (224/448/625...) on GAP-headed models.

    The global average pool absorbs whatever spatial extent the conv stack
    produces, so no weights change; outputs at the native size are identical
    to the unconverted model.
    """
    if model.head_kind != CONV_GAP:
        raise HeadKindError(
            f"{model.spec.family} ends in fully connected layers whose input size is fixed; "
            "only conv_gap (global-average-pooled) heads support variable resolution"
        )
    return GazeModel(
        model.net,
        model.spec,
        model.head_param_names,
        accepts_variable_resolution=True,
    )


def he_fan_in(param: torch.Tensor) -> int:
    """Fan-in the He formula uses for a weight tensor (Linear or ConvNd)."""
    shape = param.shape
    fan = shape[1]
    for s in shape[2:]:
        fan *= s
    return int(fan)


def save_checkpoint(
    model: GazeModel,
    path: str | Path,
    *,
    train_config: dict | None = None,
) -> None:
    """Versioned checkpoint: parameters + spec + config fingerprint + zone order."""
    config_fingerprint = None
    if train_config is not None:
        import json

        config_fingerprint = hashlib.sha256(json.dumps(train_config, sort_keys=True).encode()).hexdigest()
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "family": model.spec.family,
        "weights_locator": model.spec.weights,
        "head_param_names": model.head_param_names,
        "accepts_variable_resolution": model.accepts_variable_resolution,
        "zone_order": list(ZONE_LABELS),
        "train_config": train_config,
        "train_config_fingerprint": config_fingerprint,
        "state_dict": model.net.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> GazeModel:
    path = Path(path)
    if not path.exists():
        raise WeightLoadError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise WeightLoadError(f"{path}: unsupported checkpoint format {version!r}")
    if tuple(payload["zone_order"]) != ZONE_LABELS:
        raise WeightLoadError(
            f"{path}: checkpoint zone order {payload['zone_order']} does not match this build; refusing to load"
        )
    spec = BackboneSpec(family=payload["family"], weights=payload.get("weights_locator"))
    info = spec.info
    net = info.build()
    # Structural surgery only; the saved state dict overwrites the init.
    generator = torch.Generator().manual_seed(0)
    head_names = info.replace_head(net, ZONE_COUNT, generator)
    try:
        net.load_state_dict(payload["state_dict"])
    except Exception as exc:
        raise WeightLoadError(f"{path}: state dict does not fit {spec.family}: {exc}") from exc
    net.eval()
    return GazeModel(
        net,
        spec,
        payload.get("head_param_names", head_names),
        accepts_variable_resolution=bool(payload.get("accepts_variable_resolution", False)),
    )


def checkpoint_train_config(path: str | Path) -> dict | None:
    """Read back the config snapshot stored in a checkpoint, if any."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    return payload.get("train_config")
