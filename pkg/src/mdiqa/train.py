"""Two-stage MDIQA training and the checkpoint container."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .aggregate import MDIQA
from .config import RunConfig, StagePlan, config_from_dict
from .data import augment, epoch_order
from .losses import hybrid_iqa_loss
from .registry import ModelConfig

log = logging.getLogger(__name__)

MAGIC = b"MDIQACK\x00"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


class StageError(RuntimeError):
    pass


def set_deterministic(flag: Optional[bool] = None):
    if flag is None:
        flag = os.environ.get("MDIQA_DETERMINISTIC", "") == "1"
    if flag:
        torch.use_deterministic_algorithms(True)


@dataclass
class Checkpoint:
    config: dict
    params: "OrderedDict[str, torch.Tensor]"
    stage: str
    step: int = 0
    optimizer: Dict[str, dict] = field(default_factory=dict)
    scheduler: Dict[str, dict] = field(default_factory=dict)
    seeds: Dict[str, int] = field(default_factory=dict)
    history: List[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def run_config(self) -> RunConfig:
        return config_from_dict(self.config)

    def build_model(self) -> MDIQA:
        if self.stage not in ("one", "two"):
            raise StageError(f"checkpoint holds a {self.stage!r} model, not MDIQA")
        model = MDIQA(ModelConfig.from_dict(self.config["model"]))
        model.load_state_dict(self.params)
        model.inject = self.stage == "two" and model.cfg.use_semantic_features
        return model


# --- serialization ---------------------------------------------------------------------

def _encode_optimizer(name, sd, tensors):
    state = []
    for pid in sorted(sd["state"]):
        entry = {}
        # sorted so a loaded-then-saved checkpoint reproduces the same bytes
        for k, v in sorted(sd["state"][pid].items()):
            if torch.is_tensor(v):
                key = f"optim/{name}/{pid}/{k}"
                tensors[key] = v
                entry[k] = {"__tensor__": key}
            else:
                entry[k] = v
        state.append([pid, entry])
    return {"state": state, "param_groups": sd["param_groups"]}


def _decode_optimizer(enc, tensors):
    state = {}
    for pid, entry in enc["state"]:
        state[int(pid)] = {k: tensors[v["__tensor__"]] if isinstance(v, dict) and "__tensor__" in v
                           else v for k, v in entry.items()}
    return {"state": state, "param_groups": enc["param_groups"]}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for k, v in ckpt.params.items():
        tensors[f"param/{k}"] = v
    optim = {n: _encode_optimizer(n, sd, tensors) for n, sd in sorted(ckpt.optimizer.items())}
    index, chunks, offset = [], [], 0
    for k, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        b = arr.tobytes()
        index.append({"name": k, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""),
                      "offset": offset, "nbytes": len(b)})
        chunks.append(b)
        offset += len(b)
    header = {
        "version": VERSION,
        "stage": ckpt.stage,
        "step": int(ckpt.step),
        "config": ckpt.config,
        "seeds": ckpt.seeds,
        "history": [float(h) for h in ckpt.history],
        "extra": ckpt.extra,
        "optimizer": optim,
        "scheduler": {k: ckpt.scheduler[k] for k in sorted(ckpt.scheduler)},
        "tensors": index,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", VERSION, len(hb)) + hb + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32 or not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an MDIQA checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted or modified)")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {VERSION}")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    data = body[start + hlen:]
    tensors = OrderedDict()
    for e in header["tensors"]:
        arr = np.frombuffer(data, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        t = torch.from_numpy(arr.copy()).reshape(e["shape"])
        tensors[e["name"]] = t.to(getattr(torch, e["dtype"]))
    params = OrderedDict((k[len("param/"):], v) for k, v in tensors.items() if k.startswith("param/"))
    optim = {n: _decode_optimizer(enc, tensors) for n, enc in header["optimizer"].items()}
    return Checkpoint(config=header["config"], params=params, stage=header["stage"],
                      step=header["step"], optimizer=optim, scheduler=header["scheduler"],
                      seeds=header["seeds"], history=header["history"], extra=header["extra"])


# --- helpers ---------------------------------------------------------------------------------

def param_hash(params: Sequence[torch.Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def group_hashes(model: MDIQA) -> Dict[str, str]:
    return {k: param_hash(v) for k, v in model.param_groups().items()}


def _set_trainable(model: MDIQA, trainable: Sequence[str]):
    groups = model.param_groups()
    model.requires_grad_(False)
    for g in trainable:
        for p in groups[g]:
            p.requires_grad_(True)


def _batches(n, batch_size, epoch, seed):
    order = epoch_order(n, epoch, seed)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _augmented(x, idx, crop, seed, epoch):
    return torch.from_numpy(np.stack([
        augment(x[i], crop, seed=((int(seed) * 1000003 + int(epoch)) * 1000003 + int(i)) % 2**31)
        for i in idx]))


def _cosine(opt, plan: StagePlan, total_steps):
    return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, total_steps),
                                                      eta_min=plan.lr_min)


def _adamw(params, plan):
    return torch.optim.AdamW(params, lr=plan.lr, weight_decay=plan.weight_decay)


def _resume(ckpt, optimizers, schedulers):
    for k, o in optimizers.items():
        if k in ckpt.optimizer:
            o.load_state_dict(ckpt.optimizer[k])
    for k, s in schedulers.items():
        if k in ckpt.scheduler:
            s.load_state_dict(ckpt.scheduler[k])


# --- stage one -----------------------------------------------------------------------------

def train_stage1(data, cfg: RunConfig, on_log: Optional[Callable[[dict], None]] = None,
                 resume: Optional[Checkpoint] = None, max_steps: Optional[int] = None) -> Checkpoint:
    """Backbones + heads on per-dimension labels, no semantic injection.

    ``data`` is ``(images, dim_labels, dim_mask, ...)`` arrays in registry order.
    Technical and aesthetic branches each get their own optimizer and cosine
    schedule so they can run for different epoch counts.
    """
    set_deterministic()
    x, y, m = data[0], data[1], data[2]
    if not np.any(m):
        raise StageError("dataset has no dimension labels at all")
    plan = cfg.stage1
    seed = cfg.seed
    torch.manual_seed(seed)
    model = MDIQA(cfg.model)
    model.inject = False
    if resume is not None:
        if resume.stage != "one":
            raise StageError(f"cannot resume stage one from a stage {resume.stage!r} checkpoint")
        model.load_state_dict(resume.params)
    _set_trainable(model, plan.trainable)
    n = len(x)
    steps_per_epoch = -(-n // plan.batch_size)
    epochs = {"technical": plan.epochs, "aesthetic": plan.aesthetic_epochs
              if plan.aesthetic_epochs is not None else plan.epochs}
    optimizers, schedulers, dims_of = {}, {}, {}
    for branch in model.backbones:
        names = model.branch_dims(branch)
        dims_of[branch] = [model.names.index(d) for d in names]
        params = [p for p in model.backbones[branch].parameters() if p.requires_grad]
        for d in names:
            params += [p for p in model.heads[d].csam.parameters() if p.requires_grad]
            params += [p for p in model.heads[d].regressor.parameters() if p.requires_grad]
        optimizers[branch] = _adamw(params, plan)
        schedulers[branch] = _cosine(optimizers[branch], plan, epochs[branch] * steps_per_epoch)
    step, history = 0, []
    if resume is not None:
        _resume(resume, optimizers, schedulers)
        step, history = resume.step, list(resume.history)
    yt = torch.from_numpy(np.asarray(y, dtype=np.float32))
    mt = torch.from_numpy(np.asarray(m, dtype=bool))
    model.train()
    total = max(epochs.values()) * steps_per_epoch
    while step < total and (max_steps is None or step < max_steps):
        epoch, k = divmod(step, steps_per_epoch)
        idx = list(_batches(n, plan.batch_size, epoch, seed))[k]
        active = [b for b in model.backbones if epoch < epochs[b]]
        xb = _augmented(x, idx, plan.crop, seed, epoch)
        scores, _ = model.dims(xb, branches=active)
        loss = scores.new_zeros(())
        for b in active:
            for j in dims_of[b]:
                mj = mt[idx, j]
                if mj.any():
                    loss = loss + hybrid_iqa_loss(scores[:, j], yt[idx, j], mj, cfg.loss.alpha_nin)
        for b in active:
            optimizers[b].zero_grad(set_to_none=True)
        loss.backward()
        lr = optimizers[active[0]].param_groups[0]["lr"]
        for b in active:
            optimizers[b].step()
            schedulers[b].step()
        history.append(loss.item())
        step += 1
        rec = {"step": step, "loss": loss.item(), "lr": lr, "stage": 1, "epoch": epoch}
        if on_log:
            on_log(rec)
    return Checkpoint(
        config=cfg.to_dict(), params=OrderedDict(model.state_dict()), stage="one", step=step,
        optimizer={k: o.state_dict() for k, o in optimizers.items()},
        scheduler={k: s.state_dict() for k, s in schedulers.items()},
        seeds={"seed": seed}, history=history,
    )


# --- stage two ---------------------------------------------------------------------------

def stage_two_trainable(cfg: RunConfig) -> List[str]:
    groups = list(cfg.stage2.trainable)
    if not cfg.model.finetune_regressor and "heads.regressor" in groups:
        groups.remove("heads.regressor")
    if not cfg.model.use_weight_branch and "weight_branch" in groups:
        groups.remove("weight_branch")
    if not cfg.model.use_semantic_features and "heads.injection" in groups:
        groups.remove("heads.injection")
    return groups


def train_stage2(data, ckpt: Checkpoint, cfg: Optional[RunConfig] = None,
                 on_log: Optional[Callable[[dict], None]] = None,
                 max_steps: Optional[int] = None) -> Checkpoint:
    """Weight branch, fusion, injection and (optionally) regressors on overall labels.

    ``ckpt`` is either a finished stage-one checkpoint or a partial stage-two
    checkpoint to resume from.
    """
    set_deterministic()
    if ckpt.stage not in ("one", "two"):
        raise StageError(f"stage two needs a stage-one checkpoint, got stage {ckpt.stage!r}")
    cfg = cfg or ckpt.run_config()
    if cfg.model.to_dict() != ckpt.config["model"]:
        raise StageError("model configuration differs from the checkpoint's")
    x, o, om = data[0], data[3], data[4]
    if not np.any(om):
        raise StageError("dataset has no overall labels")
    plan = cfg.stage2
    seed = cfg.seed
    torch.manual_seed(seed + 2)
    model = MDIQA(cfg.model)
    model.load_state_dict(ckpt.params)
    model.inject = cfg.model.use_semantic_features
    trainable = stage_two_trainable(cfg)
    _set_trainable(model, trainable)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = _adamw(params, plan)
    n = len(x)
    steps_per_epoch = -(-n // plan.batch_size)
    total = plan.epochs * steps_per_epoch
    sched = _cosine(opt, plan, total)
    step, history = 0, []
    if ckpt.stage == "two":
        _resume(ckpt, {"stage2": opt}, {"stage2": sched})
        step, history = ckpt.step, list(ckpt.history)
    ot = torch.from_numpy(np.asarray(o, dtype=np.float32))
    omt = torch.from_numpy(np.asarray(om, dtype=bool))
    model.train()
    while step < total and (max_steps is None or step < max_steps):
        epoch, k = divmod(step, steps_per_epoch)
        idx = list(_batches(n, plan.batch_size, epoch, seed))[k]
        if not omt[idx].any():
            step += 1
            continue
        xb = _augmented(x, idx, plan.crop, seed + 1, epoch)
        out = model(xb)
        loss = hybrid_iqa_loss(out.overall, ot[idx], omt[idx], cfg.loss.alpha_nin)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        lr = opt.param_groups[0]["lr"]
        opt.step()
        sched.step()
        history.append(loss.item())
        step += 1
        if on_log:
            on_log({"step": step, "loss": loss.item(), "lr": lr, "stage": 2, "epoch": epoch})
    done = step >= total
    return Checkpoint(
        config=cfg.to_dict(), params=OrderedDict(model.state_dict()), stage="two", step=step,
        optimizer={"stage2": opt.state_dict()}, scheduler={"stage2": sched.state_dict()},
        seeds={"seed": seed}, history=history,
        extra={"trainable": trainable, "complete": done,
               "stage_one_history": ckpt.history if ckpt.stage == "one"
               else ckpt.extra.get("stage_one_history", [])},
    )


# --- inference helpers ----------------------------------------------------------------------

def predictor(model: MDIQA, batch_size: int = 64):
    """``images (N,3,H,W) -> (dim_scores (N,n), overall (N,))`` numpy, inference mode."""
    dtype = next(model.parameters()).dtype

    def run(images):
        model.eval()
        ds, ov = [], []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                xb = torch.as_tensor(np.asarray(images[i:i + batch_size]), dtype=dtype)
                out = model(xb)
                ds.append(out.dim_scores.double().numpy())
                ov.append(out.overall.double().numpy())
        return np.concatenate(ds), np.concatenate(ov)

    return run
