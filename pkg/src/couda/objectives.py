"""Loss terms of the collaborative objective and their composition.

All probability inputs are row-per-sample 2-D tensors.  Transfer weights are
computed on plain arrays and enter the graph as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, ShapeError, Tensor
from .model import discriminate

WEIGHT_METRICS = ("cosine", "l1", "l2")
DIVERSITY_METRICS = ("js", "kl", "l1", "l2", "cos")
DOMAIN_LOSS_KINDS = ("least_squares", "gan")

_NORM_TOL = 1e-6


def _check_choice(kind: str, value: str, options) -> None:
    if value not in options:
        raise ConfigError(f"unknown {kind} {value!r}; valid: {', '.join(options)}")


def _check_rows(name: str, p: np.ndarray) -> None:
    if p.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D probability rows, got shape {p.shape}")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > _NORM_TOL) or np.any(p < -_NORM_TOL):
        raise ValueError(f"{name}: rows must be probability distributions")


def transfer_weight(y1, y2, metric: str = "cosine") -> np.ndarray:
    """Per-row transferability weight from two peers' predictions.

    Accepts single rows or (n, K) batches and returns a float or an (n,) array.
    Disagreeing peers get larger weights; agreement gives exactly 1.
    """
    _check_choice("weight metric", metric, WEIGHT_METRICS)
    a = np.asarray(y1.data if isinstance(y1, Tensor) else y1, dtype=np.float64)
    b = np.asarray(y2.data if isinstance(y2, Tensor) else y2, dtype=np.float64)
    single = a.ndim == 1
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.shape != b.shape:
        raise ShapeError(f"transfer_weight: shape mismatch {a.shape} vs {b.shape}")
    if metric == "cosine":
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        if np.any(na == 0) or np.any(nb == 0):
            raise ValueError("transfer_weight: zero-norm prediction row")
        cos = np.einsum("ij,ij->i", a, b) / (na * nb)
        lam = 2.0 - np.clip(cos, -1.0, 1.0)
    elif metric == "l1":
        lam = 1.0 + np.abs(a - b).sum(axis=1)
    else:
        lam = 1.0 + np.sqrt(((a - b) ** 2).sum(axis=1))
    return float(lam[0]) if single else lam


def _disc_outputs(d) -> Tensor:
    d = ad.as_tensor(d)
    if d.data.ndim == 1:
        d = ad.reshape(d, (d.shape[0], 1))
    return d


def _weighted_mean(values: Tensor, weights: np.ndarray) -> Tensor:
    n = values.shape[0]
    return ad.sum(values * Tensor(np.asarray(weights, dtype=np.float64).reshape(n, 1))) * (1.0 / n)


def domain_loss_terms(d_source: list, d_target: list, lam_s, lam_t, kind: str = "least_squares") -> Tensor:
    """Domain loss from per-peer discriminator outputs.

    ``d_source[tau]`` / ``d_target[tau]`` hold D(P_tau(x)) for each peer.
    Source is labelled 0 and target 1.
    """
    _check_choice("domain loss kind", kind, DOMAIN_LOSS_KINDS)
    total = None
    for ds, dt in zip(d_source, d_target):
        ds, dt = _disc_outputs(ds), _disc_outputs(dt)
        if ds.shape[0] == 0 or dt.shape[0] == 0:
            raise ValueError("domain_loss: empty source or target batch")
        if len(lam_s) != ds.shape[0] or len(lam_t) != dt.shape[0]:
            raise ShapeError("domain_loss: weights do not align with batch rows")
        if kind == "least_squares":
            src = ad.power(ds, 2.0)
            tgt = ad.power(dt - 1.0, 2.0)
        else:
            src = -ad.log(1.0 - ds)
            tgt = -ad.log(dt)
        term = _weighted_mean(src, lam_s) + _weighted_mean(tgt, lam_t)
        total = term if total is None else total + term
    return total


def domain_loss(model, source_x, target_x, lam_s, lam_t, kind: str = "least_squares", grl_coeff: float | None = None) -> Tensor:
    """Domain loss through the model; with ``grl_coeff`` the features pass a gradient reversal."""
    d_source, d_target = [], []
    for peer in model.peers:
        fs, ft = peer.extractor(source_x), peer.extractor(target_x)
        if grl_coeff is not None:
            fs, ft = ad.grad_reverse(fs, grl_coeff), ad.grad_reverse(ft, grl_coeff)
        d_source.append(discriminate(model.discriminator, fs))
        d_target.append(discriminate(model.discriminator, ft))
    return domain_loss_terms(d_source, d_target, lam_s, lam_t, kind)


def _check_one_hot(z: np.ndarray) -> None:
    if z.ndim != 2 or not np.all((z == 0) | (z == 1)) or not np.all(z.sum(axis=1) == 1):
        raise ValueError("focal_loss: labels must be one-hot rows")


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def focal_loss(z_hats: list, z, gamma: float = 2.0) -> Tensor:
    """Focal loss summed over peers, averaged over samples."""
    if gamma < 0:
        raise ConfigError(f"focal_loss: gamma must be >= 0, got {gamma}")
    z = np.asarray(z, dtype=np.float64)
    _check_one_hot(z)
    labels = Tensor(z)
    n = z.shape[0]
    total = None
    for zh in z_hats:
        zh = ad.as_tensor(zh)
        if zh.shape != z.shape:
            raise ShapeError(f"focal_loss: shape mismatch {zh.shape} vs {z.shape}")
        _check_rows("focal_loss", zh.data)
        term = ad.sum(labels * ad.power(1.0 - zh, gamma) * ad.log(zh))
        total = term if total is None else total + term
    return total * (-1.0 / n)


def _kl_rows(p: Tensor, q: Tensor) -> Tensor:
    # sum_i p_i (log p_i - log q_i); clamped logs make 0 * log 0 vanish
    return ad.sum(p * (ad.log(p) - ad.log(q)))


def diversity_loss(y1, y2, metric: str = "js") -> Tensor:
    """Batch-averaged divergence between the peers' predictions."""
    _check_choice("diversity metric", metric, DIVERSITY_METRICS)
    y1, y2 = ad.as_tensor(y1), ad.as_tensor(y2)
    if y1.shape != y2.shape:
        raise ShapeError(f"diversity_loss: shape mismatch {y1.shape} vs {y2.shape}")
    _check_rows("diversity_loss", y1.data)
    _check_rows("diversity_loss", y2.data)
    n = y1.shape[0]
    if metric == "js":
        mix = (y1 + y2) * 0.5
        total = _kl_rows(y1, mix) + _kl_rows(y2, mix)
    elif metric == "kl":
        total = _kl_rows(y1, y2)
    elif metric == "l1":
        # |a| = sqrt(a^2) is not differentiable at 0; use a smooth floor
        total = ad.sum(ad.power(ad.power(y1 - y2, 2.0) + 1e-12, 0.5))
    elif metric == "l2":
        sq = ad.sum(ad.power(y1 - y2, 2.0), axis=1)
        total = ad.sum(ad.power(sq + 1e-12, 0.5))
    else:
        dot = ad.sum(y1 * y2, axis=1)
        n1 = ad.power(ad.sum(y1 * y1, axis=1), 0.5)
        n2 = ad.power(ad.sum(y2 * y2, axis=1), 0.5)
        total = ad.sum(1.0 - dot * ad.power(n1 * n2, -1.0))
    return total * (1.0 / n)


@dataclass
class LossBundle:
    domain: Tensor | None
    classification: Tensor
    diversity: Tensor | None
    total: Tensor
    lambda_source: np.ndarray
    lambda_target: np.ndarray

    def values(self) -> dict[str, float]:
        return {
            "domain_loss": self.domain.item() if self.domain is not None else 0.0,
            "classification_loss": self.classification.item(),
            "diversity_loss": self.diversity.item() if self.diversity is not None else 0.0,
            "total": self.total.item(),
            "mean_lambda": float(np.mean(np.concatenate([self.lambda_source, self.lambda_target]))),
        }


def total_objective(domain, classification, diversity, alpha: float, eta: float) -> Tensor:
    """Scalar minimised by extractors, classifiers and the noise layer.

    ``domain`` must already be built with ``grad_reverse(f, alpha)`` between
    extractor and discriminator: the reversal supplies the ``-alpha`` on the
    extractor side, so the domain term enters here with coefficient one.
    The discriminator's gradient on this term is rescaled by ``alpha``
    afterwards (see ``route_discriminator_gradients``).
    """
    if alpha < 0 or eta < 0:
        raise ConfigError(f"alpha and eta must be >= 0, got alpha={alpha}, eta={eta}")
    total = classification
    if domain is not None and alpha > 0:
        total = total + domain
    if diversity is not None and eta > 0:
        total = total - diversity * eta
    return total


def objective_value(domain, classification, diversity, alpha: float, eta: float) -> Tensor:
    """Plain minimax value ``-alpha*L_d + L_c - eta*L_div`` (domain built without reversal)."""
    if alpha < 0 or eta < 0:
        raise ConfigError(f"alpha and eta must be >= 0, got alpha={alpha}, eta={eta}")
    return classification - domain * alpha - diversity * eta


def route_discriminator_gradients(grads: dict, disc_params, alpha: float) -> None:
    """Scale discriminator gradients so it descends ``alpha * L_d``."""
    for p in disc_params:
        if p in grads:
            grads[p] = grads[p] * alpha
            p.grad = grads[p]


def js_upper_bound() -> float:
    return 2.0 * math.log(2.0)
