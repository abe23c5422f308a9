"""Toy restorer trained with L1 plus the tunable critic losses, and the ratio sweep."""
from __future__ import annotations

import csv
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
from torch import nn
from scipy import ndimage

from .aggregate import MDIQA, freeze
from .backbone import kaiming_init
from .config import RunConfig
from .data import DistortionSpec, augment, distort, luminance, make_clean_image, write_image
from .losses import fr_loss, nr_loss
from .train import Checkpoint, param_hash


class RecipeError(ValueError):
    pass


class ToyRestorer(nn.Module):
    """Residual conv net; the last conv starts at zero so the net starts as the identity."""

    def __init__(self, width: int = 16, depth: int = 8):
        super().__init__()
        layers = [nn.Conv2d(3, width, 3, padding=1), nn.GELU()]
        for _ in range(depth - 2):
            layers += [nn.Conv2d(width, width, 3, padding=1), nn.GELU()]
        layers.append(nn.Conv2d(width, 3, 3, padding=1))
        self.body = nn.Sequential(*layers)
        kaiming_init(self.body)
        nn.init.zeros_(self.body[-1].weight)
        nn.init.zeros_(self.body[-1].bias)

    def forward(self, x):
        return x + self.body(x)


@dataclass
class RestorationRun:
    lambda_org: float = 1.0
    lambda_nr: float = 0.0
    lambda_fr: float = 0.0
    override: Dict[str, float] = field(default_factory=dict)
    degradation: Sequence[DistortionSpec] = (DistortionSpec("blur", 0.4), DistortionSpec("noise", 0.4))
    steps: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    crop: int = 64
    size: int = 96
    width: int = 16
    depth: int = 8
    n_train: int = 96
    n_val: int = 16
    val_every: int = 100
    # L1-only warm-up standing in for a pretrained restorer; shared by every run
    pretrain_steps: int = 300
    pretrain_lr: float = 1e-3
    seed: int = 0

    def validate(self):
        if self.lambda_nr and self.lambda_fr:
            raise RecipeError("a run uses either the NR or the FR critic loss, not both")
        for k in ("lambda_org", "lambda_nr", "lambda_fr"):
            if getattr(self, k) < 0:
                raise RecipeError(f"{k} must be non-negative")
        for k, v in self.override.items():
            if not v > 0:
                raise RecipeError(f"ratio for {k} must be positive")
        return self

    @property
    def variant(self):
        return "nr" if self.lambda_nr else "fr" if self.lambda_fr else "org"

    def to_dict(self):
        return {
            "lambda_org": self.lambda_org, "lambda_nr": self.lambda_nr, "lambda_fr": self.lambda_fr,
            "override": dict(self.override),
            "degradation": [{"kind": s.kind, "severity": s.severity} for s in self.degradation],
            "steps": self.steps, "batch_size": self.batch_size, "lr": self.lr, "crop": self.crop,
            "size": self.size, "width": self.width, "depth": self.depth, "n_train": self.n_train,
            "n_val": self.n_val, "val_every": self.val_every,
            "pretrain_steps": self.pretrain_steps, "pretrain_lr": self.pretrain_lr, "seed": self.seed,
        }


def run_from_config(cfg: RunConfig, variant: Optional[str] = None,
                    override: Optional[Mapping[str, float]] = None) -> RestorationRun:
    """Build a run from the config's restore plan; ``variant`` is ``nr``, ``fr`` or ``org``."""
    p = cfg.restore
    variant = variant or p.variant
    if variant not in ("nr", "fr", "org"):
        raise RecipeError(f"unknown variant {variant!r}")
    return RestorationRun(
        lambda_org=cfg.loss.lambda_org,
        lambda_nr=cfg.loss.lambda_nr if variant == "nr" else 0.0,
        lambda_fr=cfg.loss.lambda_fr if variant == "fr" else 0.0,
        override=dict(cfg.ratios if override is None else override),
        degradation=(DistortionSpec("blur", p.blur), DistortionSpec("noise", p.noise)),
        steps=p.iterations, batch_size=p.batch_size, lr=p.lr, crop=p.crop, size=cfg.data.size,
        width=p.restorer_width, depth=p.restorer_depth, n_train=p.n_train, n_val=p.n_val,
        val_every=p.val_every, pretrain_steps=p.pretrain_steps, pretrain_lr=p.pretrain_lr,
        seed=p.seed,
    ).validate()


def degrade(clean, specs: Sequence[DistortionSpec], seed: int) -> np.ndarray:
    return distort(clean, specs, seed)


def make_pairs(n: int, size: int, specs, seed: int, offset: int = 0):
    """``(degraded, clean)`` float32 arrays of shape (n, 3, size, size)."""
    clean, bad = [], []
    for i in range(n):
        s = (int(seed) * 7919 + offset + i) % 2**31
        c = make_clean_image(size, s)
        clean.append(c)
        bad.append(degrade(c, specs, s))
    return np.stack(bad), np.stack(clean)


# --- pixel-statistic proxies, independent of the critic ---------------------------------

def sharpness_proxy(images) -> float:
    """Mean squared gradient magnitude of luminance."""
    vals = []
    for im in np.asarray(images, dtype=np.float64):
        gy, gx = np.gradient(luminance(im))
        vals.append(np.mean(gx ** 2 + gy ** 2))
    return float(np.mean(vals))


def noisiness_proxy(images) -> float:
    """Mean squared residual after a 3x3 box smoothing of luminance."""
    vals = []
    for im in np.asarray(images, dtype=np.float64):
        y = luminance(im)
        vals.append(np.mean((y - ndimage.uniform_filter(y, 3, mode="reflect")) ** 2))
    return float(np.mean(vals))


@dataclass
class RestoreResult:
    restorer: ToyRestorer
    metrics: dict
    log: List[dict]
    outputs: np.ndarray  # validation outputs, clipped to [0, 1]

    def checkpoint(self, run: RestorationRun) -> Checkpoint:
        return Checkpoint(config={"restoration_run": run.to_dict()},
                          params=OrderedDict(self.restorer.state_dict()), stage="restorer",
                          step=run.steps, seeds={"seed": run.seed}, extra={"metrics": self.metrics})


def critic_readout(critic: MDIQA, images, batch_size=32):
    dtype = next(critic.parameters()).dtype
    ds, ov = [], []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out = critic(torch.as_tensor(images[i:i + batch_size], dtype=dtype))
            ds.append(out.dim_scores.double().numpy())
            ov.append(out.overall.double().numpy())
    ds, ov = np.concatenate(ds), np.concatenate(ov)
    return {"overall": float(ov.mean()), "dims": dict(zip(critic.names, ds.mean(0).tolist()))}


def evaluate_outputs(critic, outputs, clean):
    m = critic_readout(critic, outputs)
    m["sharpness_proxy"] = sharpness_proxy(outputs)
    m["noisiness_proxy"] = noisiness_proxy(outputs)
    m["l1"] = float(np.abs(outputs - clean).mean())
    return m


def make_run_data(run: RestorationRun):
    return (make_pairs(run.n_train, run.size, run.degradation, run.seed),
            make_pairs(run.n_val, run.size, run.degradation, run.seed, offset=10**6))


def _pair_batch(rng, bad, clean, batch_size, crop):
    idx = rng.integers(0, len(bad), size=batch_size)
    seeds = rng.integers(0, 2**31 - 1, size=batch_size)
    # same seed -> same crop window and flip for input and target
    xb = np.stack([augment(bad[i], crop, int(s)) for i, s in zip(idx, seeds)])
    yb = np.stack([augment(clean[i], crop, int(s)) for i, s in zip(idx, seeds)])
    return torch.from_numpy(xb), torch.from_numpy(yb)


def pretrain_restorer(run: RestorationRun, data=None) -> "OrderedDict[str, torch.Tensor]":
    """L1-only warm-up from the identity init; returns the restorer state dict."""
    tr_bad, tr_clean = (data or make_run_data(run))[0]
    torch.manual_seed(run.seed)
    net = ToyRestorer(run.width, run.depth)
    if run.pretrain_steps:
        opt = torch.optim.Adam(net.parameters(), lr=run.pretrain_lr)
        rng = np.random.default_rng(np.random.SeedSequence([int(run.seed), 27182]))
        for _ in range(run.pretrain_steps):
            xb, yb = _pair_batch(rng, tr_bad, tr_clean, run.batch_size, run.crop)
            loss = (net(xb) - yb).abs().mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return OrderedDict((k, v.detach().clone()) for k, v in net.state_dict().items())


def train_restorer(run: RestorationRun, critic: MDIQA,
                   on_log: Optional[Callable[[dict], None]] = None,
                   data=None, init=None) -> RestoreResult:
    """Optimize ``lambda_org*L1 + lambda_nr*L_NR + lambda_fr*L_FR`` with a frozen critic.

    The restorer starts from ``init`` (a state dict) or, when absent, from
    :func:`pretrain_restorer`. The critic scores the clamped output, the same
    image that is written to disk.
    """
    run.validate()
    freeze(critic)
    for name in run.override:
        if name not in critic.names:
            raise RecipeError(f"unknown dimension {name!r} in ratio override")
    before = param_hash(list(critic.parameters()))
    if data is None:
        data = make_run_data(run)
    (tr_bad, tr_clean), (va_bad, va_clean) = data
    if init is None:
        init = pretrain_restorer(run, data)
    net = ToyRestorer(run.width, run.depth)
    net.load_state_dict(init)
    opt = torch.optim.Adam(net.parameters(), lr=run.lr)
    rng = np.random.default_rng(np.random.SeedSequence([int(run.seed), 31337]))
    log = []

    def validate(step):
        net.eval()
        with torch.no_grad():
            out = net(torch.from_numpy(va_bad)).clamp(0, 1).numpy()
        net.train()
        rec = {"step": step, **critic_readout(critic, out)}
        log.append(rec)
        if on_log:
            on_log(rec)
        return out

    net.train()
    for step in range(1, run.steps + 1):
        xb, yb = _pair_batch(rng, tr_bad, tr_clean, run.batch_size, run.crop)
        out = net(xb)
        terms = {"l1": (out - yb).abs().mean()}
        loss = run.lambda_org * terms["l1"]
        seen = out.clamp(0, 1)
        if run.lambda_nr:
            terms["nr"] = nr_loss(seen, critic, run.override)
            loss = loss + run.lambda_nr * terms["nr"]
        if run.lambda_fr:
            terms["fr"] = fr_loss(seen, yb, critic, run.override)
            loss = loss + run.lambda_fr * terms["fr"]
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        rec = {"step": step, "loss": float(loss.detach()), "lr": run.lr,
               **{k: float(v.detach()) for k, v in terms.items()}}
        log.append(rec)
        if on_log:
            on_log(rec)
        if run.val_every and step % run.val_every == 0 and step != run.steps:
            validate(step)
    outputs = validate(run.steps)
    if param_hash(list(critic.parameters())) != before:
        raise RuntimeError("critic parameters changed during restoration training")
    metrics = evaluate_outputs(critic, outputs, va_clean)
    metrics["variant"] = run.variant
    metrics["override"] = dict(run.override)
    return RestoreResult(net, metrics, log, outputs)


def baseline_metrics(critic, run: RestorationRun):
    """Critic readout and proxies of the unrestored validation inputs and their clean targets."""
    va_bad, va_clean = make_pairs(run.n_val, run.size, run.degradation, run.seed, offset=10**6)
    return {"degraded": evaluate_outputs(critic, va_bad, va_clean),
            "clean": evaluate_outputs(critic, va_clean, va_clean)}


# --- ratio sweep -------------------------------------------------------------------------------

def sweep_ratio(base: RestorationRun, dim: str, ratios: Sequence[float], critic: MDIQA,
                on_log: Optional[Callable[[dict], None]] = None) -> List[dict]:
    """One restorer per ratio on ``dim`` with every other setting shared."""
    if dim not in critic.names:
        raise RecipeError(f"unknown dimension {dim!r}; known: {list(critic.names)}")
    ratios = [float(r) for r in ratios]
    if not ratios or ratios[0] != 1.0 or any(b < a for a, b in zip(ratios, ratios[1:])):
        raise RecipeError(f"ratios must be ascending and start at 1.0, got {ratios}")
    if base.variant == "org":
        raise RecipeError("sweeping a ratio needs the NR or FR critic loss enabled")
    data = make_run_data(base)
    init = pretrain_restorer(base, data)
    rows = []
    for r in ratios:
        override = dict(base.override)
        if r == 1.0:
            override.pop(dim, None)
        else:
            override[dim] = r
        res = train_restorer(replace(base, override=override), critic, on_log=on_log, data=data,
                             init=init)
        m = res.metrics
        row = {"type": base.variant.upper(), "dim": dim, "ratio": r,
               f"critic_{dim}": m["dims"][dim], "critic_overall": m["overall"],
               "sharpness_proxy": m["sharpness_proxy"], "noisiness_proxy": m["noisiness_proxy"],
               "l1": m["l1"]}
        for n, v in m["dims"].items():
            row.setdefault(f"critic_{n}", v)
        rows.append(row)
    return rows


def write_sweep_csv(rows: List[dict], path) -> str:
    keys = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: f"{v:.6f}" if isinstance(v, float) else v for k, v in r.items()})
    return str(path)


def save_outputs(outputs, out_dir, prefix="restored") -> List[str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, im in enumerate(outputs):
        p = out_dir / f"{prefix}_{i:03d}.png"
        write_image(p, np.clip(im, 0, 1))
        paths.append(str(p))
    return paths
