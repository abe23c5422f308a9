"""IQA training losses and the tunable restoration losses driven by a frozen critic."""
from __future__ import annotations

from typing import Mapping, Optional

import torch

from .aggregate import MDIQA, ratio_vector

NIN_EPS = 1e-8


def _as_tensor(x, ref=None):
    if torch.is_tensor(x):
        return x
    dtype = ref.dtype if ref is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def mse_loss(pred, label, mask=None):
    pred = _as_tensor(pred)
    label = _as_tensor(label, pred).to(pred.dtype)
    if pred.shape != label.shape:
        raise ValueError(f"pred/label shapes differ: {tuple(pred.shape)} vs {tuple(label.shape)}")
    if mask is None:
        mask = torch.ones_like(pred, dtype=torch.bool)
    mask = _as_tensor(mask).to(torch.bool)
    if not mask.any():
        raise ValueError("mse_loss: every entry is masked")
    d = (pred - label)[mask]
    return (d * d).mean()


def _nin_normalize(v):
    v = v - v.mean()
    # a floor rather than an additive guard keeps the map exactly scale-free above eps
    return v / v.norm().clamp_min(NIN_EPS)


def nin_loss(pred, label):
    """Squared distance between mean-centred, L2-normalized pred and label vectors."""
    pred = _as_tensor(pred)
    label = _as_tensor(label, pred).to(pred.dtype)
    if pred.ndim != 1 or pred.shape != label.shape:
        raise ValueError("nin_loss expects two 1-D batches of equal length")
    if pred.numel() < 2:
        raise ValueError(f"nin_loss needs a batch of at least 2, got {pred.numel()}")
    d = _nin_normalize(pred) - _nin_normalize(label)
    return (d * d).sum()


def hybrid_iqa_loss(pred, label, mask=None, alpha_nin=1.0):
    pred = _as_tensor(pred)
    label = _as_tensor(label, pred).to(pred.dtype)
    if mask is None:
        mask = torch.ones_like(pred, dtype=torch.bool)
    mask = _as_tensor(mask).to(torch.bool)
    loss = mse_loss(pred, label, mask)
    p, y = pred[mask], label[mask]
    # a constant label batch carries no ranking signal
    if alpha_nin and p.numel() >= 2 and not torch.all(y == y[0]):
        loss = loss + alpha_nin * nin_loss(p, y)
    return loss


def apply_override(w, override: Optional[Mapping[str, float]], names):
    """Scale the weight of each named dimension by its ratio; others unchanged.

    ``w`` is a (n,) or (B, n) tensor, or a ``{name: weight}`` dict.
    """
    if isinstance(w, Mapping):
        lam = ratio_vector(override, list(w), torch.float64)
        return {k: float(v) * float(l) for (k, v), l in zip(w.items(), lam)}
    return w * ratio_vector(override, names, w.dtype).to(w.device)


def _check_frozen(model):
    if any(p.requires_grad for p in model.parameters()):
        raise ValueError("critic must be frozen (call aggregate.freeze first)")
    if model.training:
        raise ValueError("critic must be in inference mode")


def nr_loss(restored, model: MDIQA, override=None):
    """Negative batch-mean overall score of the restored images."""
    if restored.shape[0] == 0:
        raise ValueError("nr_loss: empty batch")
    _check_frozen(model)
    out = model(restored, override=override)
    return -out.overall.mean()


def fr_loss(restored, reference, model: MDIQA, override=None, return_terms=False):
    """Weighted L1 distance between per-dimension features of restored and reference.

    Weights come from the reference image, then the override is applied.
    With ``return_terms`` also returns the (n,) per-dimension contributions,
    which sum to the loss.
    """
    if restored.shape != reference.shape:
        raise ValueError(f"shape mismatch: {tuple(restored.shape)} vs {tuple(reference.shape)}")
    if restored.shape[0] == 0:
        raise ValueError("fr_loss: empty batch")
    _check_frozen(model)
    with torch.no_grad():
        _, g_ref = model.dims(reference)
        w = apply_override(model.predict_weights(reference), override, model.names)
    _, g_res = model.dims(restored)
    return fr_from_features(g_res, g_ref, w, return_terms)


def fr_from_features(g_res, g_ref, w, return_terms=False):
    l1 = (g_res - g_ref).abs().mean(dim=-1)  # (B, n)
    terms = (w * l1).mean(dim=0)
    loss = terms.sum()
    return (loss, terms) if return_terms else loss
