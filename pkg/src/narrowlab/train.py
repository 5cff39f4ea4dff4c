"""Two-phase training, the Adam update, and checkpoint I/O."""
from __future__ import annotations

import csv
import hashlib
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import ModelConfig, TrainConfig
from .denoiser import ConditioningMode, Denoiser
from .encoders import Encoders
from .numerics import Parameter, Tensor, make_rng
from .schedule import NoiseSchedule, add_noise
from .scoring import select_features


class CheckpointError(ValueError):
    pass


@dataclass
class TrainingSet:
    """Encoder outputs cached once; the encoders never change during training."""
    z0: np.ndarray
    f_ct: np.ndarray
    f_ci: np.ndarray
    target_index: np.ndarray

    def __len__(self):
        return len(self.z0)

    @classmethod
    def build(cls, images: np.ndarray, captions, encoders: Encoders) -> "TrainingSet":
        captions = list(captions)
        return cls(encoders.image_to_model(images), encoders.encode_text(captions),
                   encoders.encode_image(images), np.array([c.target_index for c in captions]))


def mse(pred, eps) -> Tensor:
    pred = nx.as_tensor(pred)
    if pred.shape != np.shape(eps):
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {np.shape(eps)}")
    diff = nx.sub(pred, eps)
    return nx.mean(nx.mul(diff, diff))


def training_loss(model: Denoiser, z0, eps, t, f_ct, mode: str, sched: NoiseSchedule,
                  f_ci=None, gamma_num: float = 1.0, target_index=2) -> Tensor:
    """Mean squared error between the true and predicted noise over all latent elements."""
    z0, eps = np.asarray(z0), np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"training_loss: shape mismatch {z0.shape} vs {eps.shape}")
    t = np.broadcast_to(np.asarray(t), (z0.shape[0],))
    zt = add_noise(z0, eps, t, sched)
    if mode == "text_only":
        cond = ConditioningMode("text_only")
    elif mode == "text_and_image":
        B, h, w, c = zt.shape
        sel = select_features(f_ci, f_ct, zt.reshape(B, h * w, c), sched.alpha_bar[t],
                              gamma_num, model.scoring_weights())
        cond = ConditioningMode("text_and_image", sel)
    else:
        raise ValueError(f"training mode must be text_only or text_and_image, got {mode!r}")
    pred, _ = model.denoise(zt, t, f_ct, cond, target_index)
    return mse(pred, eps)


class Adam:
    def __init__(self, params: list[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}
        self.n = 0

    def step(self) -> None:
        self.n += 1
        c1 = 1.0 - self.b1 ** self.n
        c2 = 1.0 - self.b2 ** self.n
        for p in self.params:
            g = p.grad
            m = self.m[p.name] = self.b1 * self.m[p.name] + (1 - self.b1) * g
            v = self.v[p.name] = self.b2 * self.v[p.name] + (1 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class StepLog:
    step: int
    phase: int
    loss: float
    gamma_num: float
    t: int


def _with_dropout(f_ct: np.ndarray, null: Parameter, drop: np.ndarray):
    if not drop.any():
        return Tensor(f_ct)
    d = drop.astype(np.float64)[:, None, None]
    return nx.add(Tensor(f_ct * (1.0 - d)), nx.mul(null, d))


def train_step(data: TrainingSet, idx: np.ndarray, phase: int, opt: Adam, model: Denoiser,
               rng: np.random.Generator, sched: NoiseSchedule, cfg: TrainConfig) -> StepLog:
    B = len(idx)
    z0 = data.z0[idx]
    t = rng.integers(1, sched.T + 1, size=B)
    eps = rng.standard_normal(z0.shape)
    drop = rng.random(B) < cfg.text_dropout
    f_ct = _with_dropout(data.f_ct[idx], model.params["null_text"], drop)
    if phase == 0:
        gamma = 1.0
        loss = training_loss(model, z0, eps, t, f_ct, "text_only", sched,
                             target_index=data.target_index[idx])
    else:
        gamma = float(rng.uniform(cfg.gamma_low, cfg.gamma_high))
        loss = training_loss(model, z0, eps, t, f_ct, "text_and_image", sched,
                             f_ci=data.f_ci[idx], gamma_num=gamma, target_index=data.target_index[idx])
    nx.backward(loss, opt.params)
    opt.step()
    return StepLog(opt.n, phase, float(loss.data), gamma, int(np.round(t.mean())))


def frozen_checksum(model: Denoiser) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        p = model.params[name]
        if not p.trainable:
            h.update(name.encode())
            h.update(p.data.tobytes())
    return h.hexdigest()


@dataclass
class TrainResult:
    logs: list[StepLog] = field(default_factory=list)
    seconds: float = 0.0
    frozen_before: str = ""
    frozen_after: str = ""

    @property
    def losses(self) -> np.ndarray:
        return np.array([l.loss for l in self.logs])


def train(model: Denoiser, data: TrainingSet, cfg: TrainConfig, sched: NoiseSchedule,
          log_path=None, progress=None) -> TrainResult:
    """Run ``cfg.steps`` updates of the requested phase on ``model`` in place."""
    if cfg.phase == 1 and not model.backbone_ready:
        raise RuntimeError("phase 1 needs a pretrained backbone checkpoint")
    params = model.set_phase(cfg.phase)
    opt = Adam(params, lr=cfg.lr)
    rng = make_rng(cfg.seed)
    res = TrainResult(frozen_before=frozen_checksum(model))
    t0 = time.perf_counter()
    writer = None
    fh = open(log_path, "w", newline="") if log_path else None
    try:
        if fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "phase", "loss", "gamma_num", "t"])
        for _ in range(cfg.steps):
            idx = rng.choice(len(data), size=min(cfg.batch_size, len(data)), replace=False)
            log = train_step(data, idx, cfg.phase, opt, model, rng, sched, cfg)
            res.logs.append(log)
            if writer and log.step % cfg.log_every == 0:
                writer.writerow([log.step, log.phase, f"{log.loss:.8g}", f"{log.gamma_num:.6f}", log.t])
            if progress:
                progress(log)
    finally:
        if fh:
            fh.close()
    res.seconds = time.perf_counter() - t0
    res.frozen_after = frozen_checksum(model)
    model.freeze()
    if cfg.phase == 0:
        model.backbone_ready = True
    return res


def smoothed(x: np.ndarray, window: int = 50) -> np.ndarray:
    if len(x) < window:
        return np.array([x.mean()])
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[window:] - c[:-window]) / window


# --------------------------------------------------------------- checkpoints

MAGIC = "NLCK1"


def checkpoint_bytes(model: Denoiser) -> bytes:
    names = sorted(model.params)
    lines = [MAGIC, f"config {model.cfg.to_json()}",
             f"backbone {int(model.backbone_ready)}", f"tensors {len(names)}"]
    payload = io.BytesIO()
    for name in names:
        buf = io.BytesIO()
        nx.dump_tensor(model.params[name].data, buf)
        blob = buf.getvalue()
        shape = "x".join(map(str, model.params[name].shape)) or "scalar"
        lines.append(f"{name} {shape} {hashlib.sha256(blob).hexdigest()}")
        payload.write(blob)
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("ascii") + payload.getvalue()


def save_checkpoint(model: Denoiser, path) -> str:
    blob = checkpoint_bytes(model)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> Denoiser:
    fh = io.BytesIO(Path(path).read_bytes())
    if fh.readline().decode().strip() != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    cfg = ModelConfig.from_json(fh.readline().decode().split(" ", 1)[1])
    backbone = fh.readline().decode().split()[1] == "1"
    count = int(fh.readline().decode().split()[1])
    table = [fh.readline().decode().split() for _ in range(count)]
    if fh.readline().decode().strip() != "end":
        raise CheckpointError(f"{path}: malformed manifest")
    params = {}
    for name, shape, digest in table:
        start = fh.tell()
        arr = nx.load_tensor(fh)
        blob = fh.getvalue()[start:fh.tell()]
        if arr is None or hashlib.sha256(blob).hexdigest() != digest:
            raise CheckpointError(f"checkpoint tensor {name!r} failed its hash check")
        params[name] = Parameter(name, arr.copy(), trainable=False)
    model = Denoiser(cfg, params)
    expected = set(Denoiser(cfg).params)
    if set(params) != expected:
        raise CheckpointError(f"checkpoint parameter names differ from config: "
                              f"{sorted(set(params) ^ expected)}")
    model.backbone_ready = backbone
    return model


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
