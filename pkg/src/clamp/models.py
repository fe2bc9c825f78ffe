"""Base network (feature extractor, classifier, domain classifier) and assessors."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn

from .data import ConfigurationError

BACKBONES = ("lenet_plus", "resnet34_plus", "resnet50_plus", "mlp_plus")


# ---------------------------------------------------------------------------
# gradient reversal

class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad.neg() * ctx.coeff, None


def grl_apply(features: torch.Tensor, coeff: float = 1.0) -> torch.Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``-coeff``."""
    return _GradReverse.apply(features, coeff)


def grl_gradient(upstream: torch.Tensor, coeff: float = 1.0) -> torch.Tensor:
    return upstream.neg() * coeff


# ---------------------------------------------------------------------------
# base network

class LeNetPlus(nn.Module):
    """LeNet-5 trunk plus one extra linear layer of ``out_dim`` units."""

    def __init__(self, in_channels: int = 1, image_size: int = 28, out_dim: int = 100):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, 6, 5), nn.MaxPool2d(2), nn.ReLU(),
            nn.Conv2d(6, 16, 5), nn.MaxPool2d(2), nn.ReLU(),
        )
        side = ((image_size - 4) // 2 - 4) // 2
        self.fc = nn.Sequential(
            nn.Flatten(),
            nn.Linear(16 * side * side, 120), nn.ReLU(),
            nn.Linear(120, 84), nn.ReLU(),
            nn.Linear(84, out_dim), nn.ReLU(),
        )
        self.out_dim = out_dim

    def forward(self, x):
        return self.fc(self.conv(x))


class ResNetPlus(nn.Module):
    """Torchvision ResNet trunk (randomly initialised) plus one linear layer."""

    def __init__(self, depth: int, out_dim: int):
        super().__init__()
        import torchvision

        trunk = {34: torchvision.models.resnet34, 50: torchvision.models.resnet50,
                 18: torchvision.models.resnet18}[depth](weights=None)
        width = trunk.fc.in_features
        trunk.fc = nn.Identity()
        self.trunk = trunk
        self.proj = nn.Sequential(nn.Linear(width, out_dim), nn.ReLU())
        self.out_dim = out_dim

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return self.proj(self.trunk(x))


class MLPPlus(nn.Module):
    def __init__(self, in_dim: int, out_dim: int = 32, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Flatten(), nn.Linear(in_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, out_dim), nn.ReLU())
        self.out_dim = out_dim

    def forward(self, x):
        return self.net(x)


class BaseNet(nn.Module):
    """``feature`` (theta), ``classifier`` (phi) and ``domain`` (psi).

    The softmax head is the classifier's final linear layer followed by softmax.
    """

    def __init__(self, feature: nn.Module, num_classes: int, domain_hidden: int | None = None):
        super().__init__()
        dim = feature.out_dim
        self.feature = feature
        self.classifier = nn.Linear(dim, num_classes)
        hidden = domain_hidden or dim
        self.domain = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))
        self.num_classes = num_classes

    @property
    def feature_dim(self) -> int:
        return self.feature.out_dim

    def forward(self, x):
        return self.classifier(self.feature(x))

    def domain_score(self, features: torch.Tensor, reverse: bool = False, coeff: float = 1.0):
        if reverse:
            features = grl_apply(features, coeff)
        return torch.sigmoid(self.domain(features)).squeeze(-1)

    def theta_phi(self):
        return list(self.feature.parameters()) + list(self.classifier.parameters())

    def theta_psi(self):
        return list(self.feature.parameters()) + list(self.domain.parameters())


@dataclass
class ModelBundle:
    net: BaseNet
    prev_snapshot: BaseNet | None = None
    backbone: str = "lenet_plus"
    version: int = 0          # bumped by every optimizer step on net
    history: list = field(default_factory=list)

    def prev_logits(self, x: torch.Tensor) -> torch.Tensor:
        if self.prev_snapshot is None:
            raise RuntimeError("no previous-task snapshot yet")
        with torch.no_grad():
            return self.prev_snapshot(x)


def build_base(backbone: str = "lenet_plus", num_classes: int = 10,
               input_shape: tuple[int, ...] = (1, 28, 28), seed: int | None = 0,
               feature_dim: int | None = None, domain_hidden: int | None = None) -> ModelBundle:
    if num_classes < 2:
        raise ConfigurationError("need at least two classes")
    if backbone not in BACKBONES:
        raise ConfigurationError(f"unknown backbone {backbone!r}; choose from {BACKBONES}")
    if seed is not None:
        torch.manual_seed(seed)
    if backbone == "lenet_plus":
        feat = LeNetPlus(input_shape[0], input_shape[-1], feature_dim or 100)
    elif backbone == "resnet34_plus":
        feat = ResNetPlus(34, feature_dim or 512)
    elif backbone == "resnet50_plus":
        feat = ResNetPlus(50, feature_dim or 1000)
    else:
        in_dim = 1
        for s in input_shape:
            in_dim *= s
        feat = MLPPlus(in_dim, feature_dim or 32)
    return ModelBundle(BaseNet(feat, num_classes, domain_hidden), backbone=backbone)


def snapshot_previous(bundle: ModelBundle) -> None:
    """Replace the frozen previous-task copy with the current network."""
    snap = copy.deepcopy(bundle.net)
    snap.eval()
    for p in snap.parameters():
        p.requires_grad_(False)
    bundle.prev_snapshot = snap


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# assessors

class MetaWeights(NamedTuple):
    alpha: torch.Tensor
    beta: torch.Tensor
    gamma: torch.Tensor

    @classmethod
    def split(cls, w: torch.Tensor) -> "MetaWeights":
        return cls(w[:, 0], w[:, 1], w[:, 2])


class Assessor(nn.Module):
    """Per-sample feature stage, two-layer LSTM over the batch order, sigmoid head of 3.

    The batch is treated as one sequence; the recurrent state carries over
    between calls (detached) until :meth:`reset_hidden`.
    """

    def __init__(self, stage: nn.Module, stage_dim: int, recurrent_width: int = 64,
                 head_width: int = 64, input_kind: str = "image", input_shape=None):
        super().__init__()
        self.stage = stage
        self.lstm = nn.LSTM(stage_dim, recurrent_width, num_layers=2)
        self.head = nn.Sequential(nn.Linear(recurrent_width, head_width), nn.ReLU(),
                                  nn.Linear(head_width, 3))
        nn.init.zeros_(self.head[-1].bias)
        self.input_kind = input_kind
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.hidden: tuple[torch.Tensor, torch.Tensor] | None = None

    def reset_hidden(self):
        self.hidden = None

    def forward(self, x: torch.Tensor, advance: bool = True) -> torch.Tensor:
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"assessor expects inputs of shape {self.input_shape}, got {tuple(x.shape[1:])}")
        z = self.stage(x).unsqueeze(1)            # (seq=N, batch=1, d)
        out, hidden = self.lstm(z, self.hidden)
        if advance:
            self.hidden = (hidden[0].detach(), hidden[1].detach())
        return torch.sigmoid(self.head(out.squeeze(1)))


class ConstantAssessor(nn.Module):
    """Stand-in when meta-weighting is disabled: every weight is ``value``."""

    def __init__(self, value: float = 1.0):
        super().__init__()
        self.value = value
        self.hidden = None

    def reset_hidden(self):
        pass

    def forward(self, x, advance: bool = True):
        return torch.full((len(x), 3), self.value, dtype=x.dtype)


def build_assessor(input_kind: str = "image", input_shape: tuple[int, ...] = (1, 28, 28),
                   recurrent_width: int = 64, hidden_width: int = 256, head_width: int = 64,
                   feature_stage: str = "mlp", seed: int | None = None) -> Assessor:
    """Digit layout: MLP 2x256 -> LSTM 2x64 -> Linear 64 -> Linear 3 -> sigmoid."""
    if recurrent_width < 1:
        raise ConfigurationError("recurrent_width must be >= 1")
    if input_kind not in ("image", "vector"):
        raise ConfigurationError(f"unknown assessor input kind {input_kind!r}")
    if seed is not None:
        torch.manual_seed(seed)
    in_dim = 1
    for s in input_shape:
        in_dim *= s
    if feature_stage == "resnet18":
        stage = ResNetPlus(18, hidden_width)
    elif feature_stage == "mlp":
        stage = nn.Sequential(nn.Flatten(), nn.Linear(in_dim, hidden_width), nn.ReLU(),
                              nn.Linear(hidden_width, hidden_width), nn.ReLU())
    else:
        raise ConfigurationError(f"unknown assessor feature stage {feature_stage!r}")
    return Assessor(stage, hidden_width, recurrent_width, head_width, input_kind, input_shape)


def assessor_forward(state: nn.Module, inputs: torch.Tensor, advance: bool = True) -> torch.Tensor:
    """(N, 3) weights in (0, 1) for an ordered batch; columns are alpha, beta, gamma."""
    return state(inputs, advance=advance)
