"""Joint training of the collaborative model with Adam, ensemble inference, checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, ShapeError, Tensor
from .data import DatasetBundle
from .model import Architecture, CollaborativeModel, build_model, discriminate, noisy_prediction, stream
from .objectives import (
    DIVERSITY_METRICS,
    DOMAIN_LOSS_KINDS,
    WEIGHT_METRICS,
    LossBundle,
    diversity_loss,
    domain_loss_terms,
    focal_loss,
    one_hot,
    route_discriminator_gradients,
    total_objective,
    transfer_weight,
)

log = logging.getLogger(__name__)

ENSEMBLES = ("average", "maximum")
CURVE_COLUMNS = ("step", "domain_loss", "classification_loss", "diversity_loss", "mean_lambda")
CHECKPOINT_HEADER = "# couda-checkpoint v1"

# component rows: overrides applied on top of the run config
COMPONENTS = {
    "full": {},
    "source_only": dict(alpha=0.0, eta=0.0, transfer_weighting=False),
    "no_tw": dict(transfer_weighting=False),
    "no_div": dict(eta=0.0),
    "no_ncl": dict(use_noise_layer=False),
}


class NumericalError(RuntimeError):
    def __init__(self, step: int, losses: list[str]):
        super().__init__(f"non-finite loss at step {step}: {', '.join(losses)}")
        self.step = step
        self.losses = losses


@dataclass
class TrainConfig:
    alpha: float = 0.1
    eta: float = 0.01
    gamma: float = 2.0
    eps_init: float = 0.8
    learning_rate: float = 1e-3
    batch_size: int = 16
    steps: int = 2000
    seed: int = 0
    weight_metric: str = "cosine"
    diversity_metric: str = "js"
    domain_loss_kind: str = "least_squares"
    ensemble: str = "average"
    log_every: int = 50
    # ablation switches: lambda fixed at 1, and the noise layer replaced by identity
    transfer_weighting: bool = True
    use_noise_layer: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.alpha < 0 or self.eta < 0 or self.gamma < 0:
            raise ConfigError("alpha, eta and gamma must be >= 0")
        if not 0 < self.eps_init < 1:
            raise ConfigError(f"eps_init must lie in (0, 1), got {self.eps_init}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.steps < 1 or self.log_every < 1:
            raise ConfigError("batch_size, steps and log_every must be >= 1")
        for name, value, options in (
            ("weight_metric", self.weight_metric, WEIGHT_METRICS),
            ("diversity_metric", self.diversity_metric, DIVERSITY_METRICS),
            ("domain_loss_kind", self.domain_loss_kind, DOMAIN_LOSS_KINDS),
            ("ensemble", self.ensemble, ENSEMBLES),
        ):
            if value not in options:
                raise ConfigError(f"unknown {name} {value!r}; valid: {', '.join(options)}")


class AdamState:
    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads.get(p)
            if g is None:
                g = np.zeros(p.shape)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class CurveLog:
    rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def append(self, step: int, values: dict) -> None:
        self.rows.append(
            (step, values["domain_loss"], values["classification_loss"], values["diversity_loss"], values["mean_lambda"])
        )

    def column(self, name: str) -> np.ndarray:
        return np.array([r[CURVE_COLUMNS.index(name)] for r in self.rows])

    def to_csv(self) -> str:
        lines = [",".join(CURVE_COLUMNS)]
        for step, *vals in self.rows:
            lines.append(f"{step}," + ",".join(repr(float(v)) for v in vals))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CurveLog":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[0].split(",")) != CURVE_COLUMNS:
            raise ValueError(f"{path}: unexpected curve header {lines[0]!r}")
        rows = []
        for line in lines[1:]:
            cells = line.split(",")
            rows.append((int(cells[0]), *(float(c) for c in cells[1:])))
        return cls(rows)


def compute_losses(
    model: CollaborativeModel,
    xs: np.ndarray,
    zs: np.ndarray,
    xt: np.ndarray,
    cfg: TrainConfig,
    reverse_gradient: bool = True,
    lambdas: tuple[np.ndarray, np.ndarray] | None = None,
) -> LossBundle:
    """Build every loss term on the active tape for one source/target batch pair.

    With ``reverse_gradient=False`` the domain term is built without the
    reversal layer (used to check the routing against a plain graph).
    ``lambdas`` pins the per-sample weights, e.g. while finite differencing.
    """
    k = model.n_classes
    feats_s, feats_t, pred_s, pred_t = [], [], [], []
    for peer in model.peers:
        fs, ys = peer(xs)
        ft, yt = peer(xt)
        feats_s.append(fs)
        feats_t.append(ft)
        pred_s.append(ys)
        pred_t.append(yt)

    if lambdas is not None:
        lam_s, lam_t = lambdas
    elif cfg.transfer_weighting:
        lam_s = transfer_weight(pred_s[0].data, pred_s[1].data, cfg.weight_metric)
        lam_t = transfer_weight(pred_t[0].data, pred_t[1].data, cfg.weight_metric)
    else:
        lam_s, lam_t = np.ones(xs.shape[0]), np.ones(xt.shape[0])

    def disc_outputs(feats):
        if cfg.alpha > 0 and reverse_gradient:
            feats = [ad.grad_reverse(f, cfg.alpha) for f in feats]
        return [discriminate(model.discriminator, f) for f in feats]

    if cfg.alpha > 0:
        domain = domain_loss_terms(disc_outputs(feats_s), disc_outputs(feats_t), lam_s, lam_t, cfg.domain_loss_kind)
    else:
        with ad.no_grad():
            domain = domain_loss_terms(disc_outputs(feats_s), disc_outputs(feats_t), lam_s, lam_t, cfg.domain_loss_kind)

    if cfg.use_noise_layer:
        z_hats = [noisy_prediction(ys, model.noise_layer.transitions(fs)) for fs, ys in zip(feats_s, pred_s)]
    else:
        z_hats = pred_s
    classification = focal_loss(z_hats, one_hot(zs, k), cfg.gamma)

    diversity = diversity_loss(
        ad.concat([pred_s[0], pred_t[0]], axis=0),
        ad.concat([pred_s[1], pred_t[1]], axis=0),
        cfg.diversity_metric,
    )
    total = total_objective(domain, classification, diversity, cfg.alpha, cfg.eta)
    return LossBundle(domain, classification, diversity, total, lam_s, lam_t)


def _check_finite(step: int, values: dict) -> None:
    bad = [name for name, v in values.items() if not math.isfinite(v)]
    if bad:
        raise NumericalError(step, bad)


def train(
    model: CollaborativeModel,
    bundle: DatasetBundle,
    cfg: TrainConfig,
    dry_run: bool = False,
) -> tuple[CollaborativeModel, CurveLog]:
    """Run ``cfg.steps`` joint updates; ``dry_run`` only evaluates and logs the first batch."""
    if model.n_classes != bundle.n_classes:
        raise ShapeError(f"model has K={model.n_classes} but bundle has K={bundle.n_classes}")
    if model.arch.in_dim != bundle.dim:
        raise ShapeError(f"model input width {model.arch.in_dim} != bundle dim {bundle.dim}")
    if model.eps_init != cfg.eps_init:
        raise ConfigError(f"model noise layer was built with eps={model.eps_init}, config says {cfg.eps_init}")
    params = model.parameters()
    disc_params = model.group("discriminator")
    opt = AdamState(params, cfg.learning_rate)
    rng = stream(cfg.seed, "batching")
    n_s, n_t = bundle.source_x.shape[0], bundle.target_x.shape[0]
    curves = CurveLog()
    window: dict[str, float] = {}

    for step in range(1, cfg.steps + 1):
        idx_s = rng.integers(0, n_s, cfg.batch_size)
        idx_t = rng.integers(0, n_t, cfg.batch_size)
        with ad.new_tape():
            losses = compute_losses(model, bundle.source_x[idx_s], bundle.source_z[idx_s], bundle.target_x[idx_t], cfg)
            values = losses.values()
            _check_finite(step, values)
            if dry_run:
                curves.append(step, values)
                break
            grads = ad.backward(losses.total, params)
            route_discriminator_gradients(grads, disc_params, cfg.alpha)
        opt.step(grads)
        for name, v in values.items():
            window[name] = window.get(name, 0.0) + v
        if step % cfg.log_every == 0:
            # each logged row is the mean over the steps since the previous row
            means = {name: v / cfg.log_every for name, v in window.items()}
            curves.append(step, means)
            log.debug("step %d %s", step, means)
            window = {}
    return model, curves


def ensemble_predict(y1: np.ndarray, y2: np.ndarray, ensemble: str = "average") -> np.ndarray:
    if ensemble == "average":
        return (y1 + y2) / 2.0
    if ensemble == "maximum":
        m = np.maximum(y1, y2)
        return m / m.sum(axis=1, keepdims=True)
    raise ConfigError(f"unknown ensemble {ensemble!r}; valid: {', '.join(ENSEMBLES)}")


def infer(model: CollaborativeModel, x, ensemble: str = "average") -> tuple[np.ndarray, np.ndarray]:
    """Ensemble class probabilities and argmax labels; the noise layer is not used."""
    x = np.asarray(x, dtype=np.float64)
    with ad.no_grad():
        y1 = model.peers[0](x)[1].data
        y2 = model.peers[1](x)[1].data
    probs = ensemble_predict(y1, y2, ensemble)
    return probs, probs.argmax(axis=1)


def _arch_line(model: CollaborativeModel) -> str:
    a = model.arch
    widths = ",".join(str(w) for w in a.extractor_widths)
    disc = ",".join(str(w) for w in a.disc_hidden)
    return f"arch in_dim={a.in_dim} n_classes={a.n_classes} extractor_widths={widths} disc_hidden={disc} eps_init={model.eps_init!r}"


def save_checkpoint(model: CollaborativeModel, path) -> None:
    lines = [CHECKPOINT_HEADER, _arch_line(model)]
    for name, p in model.named_parameters():
        shape = "x".join(str(s) for s in p.shape)
        lines.append(f"param {name} {shape}")
        lines.append(",".join(repr(float(v)) for v in p.data.ravel()))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_arch(line: str) -> tuple[Architecture, float]:
    fields = dict(part.split("=", 1) for part in line.split()[1:])
    arch = Architecture(
        in_dim=int(fields["in_dim"]),
        n_classes=int(fields["n_classes"]),
        extractor_widths=tuple(int(w) for w in fields["extractor_widths"].split(",")),
        disc_hidden=tuple(int(w) for w in fields["disc_hidden"].split(",")),
    )
    return arch, float(fields["eps_init"])


def _read_checkpoint(path) -> tuple[Architecture, float, dict[str, np.ndarray]]:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a couda checkpoint")
    try:
        arch, eps = _parse_arch(lines[1])
    except (KeyError, ValueError, IndexError):
        raise ValueError(f"{path}: malformed architecture line") from None
    tensors: dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines) and lines[i]:
        head = lines[i].split()
        if len(head) != 3 or head[0] != "param" or i + 1 >= len(lines):
            raise ValueError(f"{path}: line {i + 1}: malformed parameter header")
        shape = tuple(int(s) for s in head[2].split("x"))
        values = np.array([float(v) for v in lines[i + 1].split(",")], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise ValueError(f"{path}: line {i + 2}: {head[1]} expects {int(np.prod(shape))} values")
        tensors[head[1]] = values.reshape(shape)
        i += 2
    return arch, eps, tensors


def load_checkpoint(model: CollaborativeModel, path) -> CollaborativeModel:
    """Copy parameters from ``path`` into ``model``; architectures must match exactly."""
    arch, _, tensors = _read_checkpoint(path)
    if arch != model.arch:
        raise ShapeError(f"checkpoint architecture {arch.as_dict()} does not match model {model.arch.as_dict()}")
    named = dict(model.named_parameters())
    if set(named) != set(tensors):
        raise ShapeError("checkpoint parameter names do not match the model")
    for name, p in named.items():
        if tensors[name].shape != p.shape:
            raise ShapeError(f"{name}: checkpoint shape {tensors[name].shape} vs model {p.shape}")
        p.data = tensors[name].copy()
    return model


def model_from_checkpoint(path) -> CollaborativeModel:
    arch, eps, _ = _read_checkpoint(path)
    return load_checkpoint(build_model(arch, seed=0, eps_init=eps), path)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
