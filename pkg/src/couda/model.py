"""Two peer networks, a shared discriminator and a shared noise co-adaptation layer."""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, ShapeError, Tensor

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2
ACTIVATIONS = ("relu", "leaky_relu")
FINAL_ACTIVATIONS = ("none", "softmax", "sigmoid")


def stream(seed: int, name: str) -> np.random.Generator:
    """Named, reproducible sub-stream of a single integer seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    final_activation: str = "none"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ConfigError(f"MlpSpec needs at least one layer, got widths {widths}")
        if any(w <= 0 for w in widths):
            raise ConfigError(f"MlpSpec widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.final_activation not in FINAL_ACTIVATIONS:
            raise ConfigError(f"unknown final activation {self.final_activation!r}")


class Mlp:
    """Stack of affine layers; hidden activation between layers, final at the end."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        widths = spec.layer_widths
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros((1, fan_out)), requires_grad=True))

    @property
    def in_width(self) -> int:
        return self.spec.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.spec.layer_widths[-1]

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.{i}.weight", w
            yield f"{prefix}.{i}.bias", b

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.in_width:
            raise ShapeError(f"mlp: input shape {x.shape} does not match width {self.in_width}")
        ones = Tensor(np.ones((x.shape[0], 1)))
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            # bias enters through a ones column: broadcasting stays scalar-only
            h = h @ w + ones @ b
            if i < last:
                if self.spec.activation == "relu":
                    h = ad.relu(h)
                else:
                    h = ad.leaky_relu(h, LEAKY_SLOPE)
        if self.spec.final_activation == "softmax":
            h = ad.softmax(h)
        elif self.spec.final_activation == "sigmoid":
            h = ad.sigmoid(h)
        return h


class PeerNetwork:
    def __init__(self, extractor: Mlp, classifier: Mlp):
        if extractor.out_width != classifier.in_width:
            raise ShapeError(
                f"peer: extractor width {extractor.out_width} != classifier input {classifier.in_width}"
            )
        self.extractor = extractor
        self.classifier = classifier

    @property
    def n_classes(self) -> int:
        return self.classifier.out_width

    def named_parameters(self, prefix: str):
        yield from self.extractor.named_parameters(f"{prefix}.extractor")
        yield from self.classifier.named_parameters(f"{prefix}.classifier")

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        f = self.extractor(x)
        return f, self.classifier(f)


def forward_peer(peer: PeerNetwork, x) -> tuple[Tensor, Tensor]:
    return peer(x)


class Discriminator(Mlp):
    """Three fully connected layers, leaky ReLU hidden, sigmoid output."""

    def __init__(self, widths: tuple[int, ...], rng: np.random.Generator | None = None):
        if len(widths) != 4:
            raise ConfigError(f"discriminator needs 3 layers (4 widths), got {widths}")
        super().__init__(MlpSpec(widths, "leaky_relu", "sigmoid"), rng)


def discriminate(disc: Discriminator, f) -> Tensor:
    """Domain prediction per row, shape (n, 1)."""
    return disc(f)


class NoiseCoAdaptationLayer:
    """Feature-conditioned noise transition: K softmax heads over K noisy labels.

    ``weight[k, m]`` is the d-vector scoring true label k becoming noisy label m.
    """

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        k = bias.shape[0]
        if bias.shape != (k, k) or weight.ndim != 3 or weight.shape[:2] != (k, k):
            raise ShapeError(f"noise layer: weight {weight.shape} / bias {bias.shape} inconsistent")
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    @property
    def n_classes(self) -> int:
        return self.bias.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[2]

    def named_parameters(self, prefix: str = "noise"):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias

    def transitions(self, f) -> Tensor:
        """Per-row flattened K x K transition matrices, shape (n, K*K)."""
        f = ad.as_tensor(f)
        k, d = self.n_classes, self.feature_dim
        if f.data.ndim != 2 or f.shape[1] != d:
            raise ShapeError(f"noise_transition: features {f.shape} do not match width {d}")
        n = f.shape[0]
        w = ad.transpose(ad.reshape(self.weight, (k * k, d)))
        logits = f @ w + Tensor(np.ones((n, 1))) @ ad.reshape(self.bias, (1, k * k))
        rows = ad.softmax(ad.reshape(logits, (n * k, k)))
        return ad.reshape(rows, (n, k * k))


def init_noise_layer(eps: float, n_classes: int, feature_dim: int) -> NoiseCoAdaptationLayer:
    """Zero weights; biases are log-probabilities of a uniform-noise transition."""
    if not 0.0 < eps < 1.0:
        raise ConfigError(f"init_noise_layer: eps must lie in (0, 1), got {eps}")
    if n_classes < 2:
        raise ConfigError(f"init_noise_layer: need K >= 2, got {n_classes}")
    if eps > (n_classes - 1) / n_classes:
        # the initial transition then prefers every wrong label over the right one
        log.warning(
            "init_noise_layer: eps=%g with K=%d gives diagonal %.3g below off-diagonal %.3g; "
            "the classifier tends to learn permuted labels (use eps < %.3g)",
            eps, n_classes, 1 - eps, eps / (n_classes - 1), (n_classes - 1) / n_classes,
        )
    probs = np.full((n_classes, n_classes), eps / (n_classes - 1))
    np.fill_diagonal(probs, 1.0 - eps)
    return NoiseCoAdaptationLayer(np.zeros((n_classes, n_classes, feature_dim)), np.log(probs))


def noise_transition(layer: NoiseCoAdaptationLayer, f) -> np.ndarray:
    """K x K row-stochastic matrix for a single feature vector."""
    f = np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float64).reshape(1, -1)
    with ad.no_grad():
        t = layer.transitions(f)
    k = layer.n_classes
    return t.data.reshape(k, k)


def _expand_matrix(k: int) -> np.ndarray:
    e = np.zeros((k, k * k))
    for i in range(k):
        e[i, i * k : (i + 1) * k] = 1.0
    return e


def _collect_matrix(k: int) -> np.ndarray:
    s = np.zeros((k * k, k))
    for i in range(k):
        s[i * k : (i + 1) * k, :] = np.eye(k)
    return s


def noisy_prediction(y_hat, transition) -> Tensor:
    """z_hat[m] = sum_k T[k, m] * y_hat[k], row by row.

    ``transition`` is either one K x K matrix shared by all rows or the
    (n, K*K) output of ``NoiseCoAdaptationLayer.transitions``.
    """
    y_hat = ad.as_tensor(y_hat)
    transition = ad.as_tensor(transition)
    if y_hat.data.ndim == 1:
        y_hat = ad.reshape(y_hat, (1, y_hat.shape[0]))
    n, k = y_hat.shape
    if transition.shape == (k, k):
        transition = Tensor(np.ones((n, 1))) @ ad.reshape(transition, (1, k * k))
    if transition.shape != (n, k * k):
        raise ShapeError(f"noisy_prediction: transition {transition.shape} vs predictions {y_hat.shape}")
    if np.any(np.abs(y_hat.data.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("noisy_prediction: prediction rows must sum to 1")
    if np.any(np.abs(transition.data.reshape(n * k, k).sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("noisy_prediction: transition rows must sum to 1")
    spread = y_hat @ Tensor(_expand_matrix(k))
    return (spread * transition) @ Tensor(_collect_matrix(k))


@dataclass(frozen=True)
class Architecture:
    in_dim: int
    n_classes: int
    extractor_widths: tuple[int, ...] = (32, 16)
    disc_hidden: tuple[int, int] = (16, 16)

    @property
    def feature_dim(self) -> int:
        return self.extractor_widths[-1]

    def as_dict(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "n_classes": self.n_classes,
            "extractor_widths": list(self.extractor_widths),
            "disc_hidden": list(self.disc_hidden),
        }


@dataclass
class CollaborativeModel:
    arch: Architecture
    peers: tuple[PeerNetwork, PeerNetwork]
    discriminator: Discriminator
    noise_layer: NoiseCoAdaptationLayer
    eps_init: float = 0.8
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.arch.n_classes

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for i, peer in enumerate(self.peers):
            out.extend(peer.named_parameters(f"peer{i + 1}"))
        out.extend(self.discriminator.named_parameters("discriminator"))
        out.extend(self.noise_layer.named_parameters("noise"))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def group(self, name: str) -> list[Tensor]:
        """Parameters whose name starts with ``name`` (e.g. 'peer1.extractor')."""
        return [p for n, p in self.named_parameters() if n.startswith(name)]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}


def build_model(arch: Architecture, seed: int, eps_init: float = 0.8) -> CollaborativeModel:
    ext_widths = (arch.in_dim, *arch.extractor_widths)
    peers = []
    for tag in ("peer1", "peer2"):
        rng = stream(seed, f"init-{tag}")
        extractor = Mlp(MlpSpec(ext_widths, "relu", "none"), rng)
        classifier = Mlp(MlpSpec((arch.feature_dim, arch.n_classes), "relu", "softmax"), rng)
        peers.append(PeerNetwork(extractor, classifier))
    disc = Discriminator((arch.feature_dim, *arch.disc_hidden, 1), stream(seed, "init-discriminator"))
    noise = init_noise_layer(eps_init, arch.n_classes, arch.feature_dim)
    return CollaborativeModel(arch, (peers[0], peers[1]), disc, noise, eps_init)
