"""Adaptive mask guidance: the per-step two-branch sampling loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import AttentionRecord, aggregate_records
from .config import GuidanceConfig
from .denoiser import ConditioningMode, Denoiser
from .schedule import LatentState, NoiseSchedule, ddim_step, inference_timesteps
from .scoring import select_features


@dataclass
class InfluenceScope:
    grid: np.ndarray          # (B, R, R), entries in [0, 1]
    gamma_scope: float
    mode: str
    degenerate: np.ndarray    # (B,) True where every kept cell was zero

    @property
    def kept(self) -> int:
        return n_kept(self.grid.shape[-1] * self.grid.shape[-2], self.gamma_scope)


def n_kept(cells: int, gamma_scope: float) -> int:
    # guard against products like 0.3 * 100 = 30.000000000000004
    return max(1, math.ceil(gamma_scope * cells - 1e-9))


def influence_scope(M, gamma_scope: float, mode: str = "maxnorm") -> InfluenceScope:
    """Keep the top ceil(gamma * R^2) cells of M (row-major ties), then normalise."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 2:
        M = M[None]
    if np.any(M < 0):
        raise ValueError("influence_scope: attention map must be nonnegative")
    if mode not in ("maxnorm", "binary"):
        raise ValueError(f"unknown mask mode {mode!r}")
    B, R1, R2 = M.shape
    flat = M.reshape(B, -1)
    k = n_kept(R1 * R2, gamma_scope)
    keep = np.argsort(-flat, axis=-1, kind="stable")[:, :k]
    rows = np.arange(B)[:, None]
    kept = np.zeros_like(flat)
    kept[rows, keep] = flat[rows, keep]
    top = kept.max(axis=-1)
    degenerate = top <= 0
    out = np.zeros_like(flat)
    if mode == "binary":
        out[rows, keep] = 1.0
        out[degenerate] = 0.0
    else:
        safe = np.where(degenerate, 1.0, top)[:, None]
        out = np.where(degenerate[:, None], 0.0, kept / safe)
    return InfluenceScope(out.reshape(B, R1, R2), gamma_scope, mode, degenerate)


def combine_guidance(eps_u, eps_t, eps_ti, omega_t: float, omega_i: float) -> np.ndarray:
    """Three-branch guidance in coefficient form.

    Equals eps_u + w_t (eps_t - eps_u) + w_i (eps_ti - eps_t); the weighted-sum
    form makes w_i = 0 collapse bit-exactly onto plain CFG and w_t = w_i = 1
    onto eps_ti.
    """
    return (1.0 - omega_t) * eps_u + (omega_t - omega_i) * eps_t + omega_i * eps_ti


def cfg_epsilon(eps_u, eps_t, omega_t: float) -> np.ndarray:
    return (1.0 - omega_t) * eps_u + omega_t * eps_t


@dataclass
class StepTrace:
    t: int
    M: np.ndarray
    scope: InfluenceScope
    records: list[AttentionRecord]
    selected: np.ndarray  # (B, n_sel) indices


@dataclass
class Trace:
    steps: list[StepTrace] = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    @property
    def final_scope(self) -> np.ndarray:
        return self.steps[-1].scope.grid


def gated_latent(z: np.ndarray, scope: np.ndarray) -> np.ndarray:
    """z (B, h, w, c) times the scope resized to (h, w), flattened to (B, h*w, c)."""
    B, h, w, c = z.shape
    g = nx.resize_grid(scope, (h, w))
    return (z * g[..., None]).reshape(B, h * w, c)


def guided_step(state: LatentState, f_ct, f_ci, config: GuidanceConfig, model: Denoiser,
                sched: NoiseSchedule, t_prev: int, target_index=None):
    """One adaptive-mask-guidance step; returns (state', scope, T2I records, selection)."""
    if t_prev >= state.t:
        raise ValueError(f"guided_step: t_prev {t_prev} must be below t {state.t}")
    tgt = config.target_index if target_index is None else target_index
    z, t = state.z, state.t
    eps_t, recs = model.denoise(z, t, f_ct, ConditioningMode("text_only"), tgt)
    R = model.cfg.mask_grid
    M = aggregate_records(recs, R)
    scope = influence_scope(M, config.gamma_scope, config.mask_mode)
    sel = select_features(f_ci, f_ct, gated_latent(z, scope.grid), sched.alpha_bar[t],
                          config.gamma_num, model.scoring_weights(), config.fusion)
    eps_ti, _ = model.denoise(z, t, f_ct, ConditioningMode("text_and_image_masked", sel, scope.grid), tgt)
    eps_u, _ = model.denoise(z, t, None, ConditioningMode("uncond"), tgt)
    eps = combine_guidance(eps_u.data, eps_t.data, eps_ti.data, config.omega_t, config.omega_i)
    new = ddim_step(state, eps, t_prev, sched)
    return new, scope, recs, StepTrace(t, M, scope, recs, sel.indices)


def cfg_step(state: LatentState, f_ct, omega_t: float, model: Denoiser, sched: NoiseSchedule,
             t_prev: int, target_index=2) -> LatentState:
    """Plain text-only classifier-free guidance step (no visual condition)."""
    eps_t, _ = model.denoise(state.z, state.t, f_ct, ConditioningMode("text_only"), target_index)
    eps_u, _ = model.denoise(state.z, state.t, None, ConditioningMode("uncond"), target_index)
    return ddim_step(state, cfg_epsilon(eps_u.data, eps_t.data, omega_t), t_prev, sched)


def initial_noise(seed: int, keys, shape) -> np.ndarray:
    """One standard-normal latent per key, independent of batch composition."""
    out = []
    for k in keys:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, int(k)])))
        out.append(rng.standard_normal(shape))
    return np.stack(out)


def sample(f_ct, f_ci, config: GuidanceConfig, model: Denoiser, sched: NoiseSchedule,
           keys=None, target_index=None, z_T=None) -> tuple[np.ndarray, Trace]:
    """Run the full guided trajectory in latent space; returns (z_0, trace)."""
    f_ct = np.asarray(f_ct)
    B = f_ct.shape[0]
    cfg = model.cfg
    keys = range(B) if keys is None else keys
    if z_T is None:
        z_T = initial_noise(config.seed, keys, (cfg.latent_size, cfg.latent_size, cfg.latent_channels))
    ts = inference_timesteps(sched.T, config.steps)
    state = LatentState(z_T, ts[0])
    trace = Trace()
    for t_prev in ts[1:]:
        state, _, _, st = guided_step(state, f_ct, f_ci, config, model, sched, t_prev, target_index)
        trace.steps.append(st)
    return state.z, trace


def customize(captions, subject_images, config: GuidanceConfig, model: Denoiser, encoders,
              sched: NoiseSchedule, keys=None) -> tuple[np.ndarray, Trace]:
    """Generate images (B, H, W, 3) for TokenSequence captions and subject images."""
    captions = list(captions)
    target = np.array([c.target_index for c in captions])
    f_ct = encoders.encode_text(captions)
    f_ci = encoders.encode_image(np.asarray(subject_images))
    if f_ci.ndim == 2:
        f_ci = f_ci[None]
    z0, trace = sample(f_ct, f_ci, config, model, sched, keys, target)
    return np.clip(encoders.model_to_image(z0), 0.0, 1.0), trace


def text_only_sample(f_ct, config: GuidanceConfig, model: Denoiser, sched: NoiseSchedule,
                     keys=None, target_index=2) -> np.ndarray:
    B = np.asarray(f_ct).shape[0]
    cfg = model.cfg
    keys = range(B) if keys is None else keys
    z = initial_noise(config.seed, keys, (cfg.latent_size, cfg.latent_size, cfg.latent_channels))
    ts = inference_timesteps(sched.T, config.steps)
    state = LatentState(z, ts[0])
    for t_prev in ts[1:]:
        state = cfg_step(state, f_ct, config.omega_t, model, sched, t_prev, target_index)
    return state.z


# ------------------------------------------------------------------ trace I/O

TRACE_FILES = ("maps.rct", "scopes.rct", "records.rct", "selected.rct")


def write_trace(trace: Trace, out_dir) -> None:
    """One RCT1 tensor per step in each stream; ``trace.index`` lists the steps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    handles = {name: open(out / name, "wb") for name in TRACE_FILES}
    try:
        lines = ["step t kept degenerate blocks"]
        for k, st in enumerate(trace.steps):
            nx.dump_tensor(st.M, handles["maps.rct"])
            nx.dump_tensor(st.scope.grid, handles["scopes.rct"])
            nx.dump_tensor(st.selected.astype(np.float64), handles["selected.rct"])
            for rec in st.records:
                nx.dump_tensor(rec.map, handles["records.rct"])
            lines.append(f"{k} {st.t} {st.scope.kept} {int(st.scope.degenerate.any())} {len(st.records)}")
        (out / "trace.index").write_text("\n".join(lines) + "\n", encoding="utf-8")
    finally:
        for fh in handles.values():
            fh.close()


@dataclass
class TraceOnDisk:
    t: list[int]
    maps: list[np.ndarray]
    scopes: list[np.ndarray]
    selected: list[np.ndarray]
    records: list[list[np.ndarray]]


def read_trace(in_dir) -> TraceOnDisk:
    d = Path(in_dir)
    rows = [ln.split() for ln in (d / "trace.index").read_text(encoding="utf-8").splitlines()[1:] if ln]
    recs = nx.load_tensor_stream(d / "records.rct")
    per_step, pos = [], 0
    for r in rows:
        n = int(r[4])
        per_step.append(recs[pos:pos + n])
        pos += n
    return TraceOnDisk([int(r[1]) for r in rows], nx.load_tensor_stream(d / "maps.rct"),
                       nx.load_tensor_stream(d / "scopes.rct"),
                       [a.astype(np.int64) for a in nx.load_tensor_stream(d / "selected.rct")], per_step)
