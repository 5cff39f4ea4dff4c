"""Adaptive scoring: context pooling, twin score nets, timestep fusion, Top-K."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

GAMMA_NUM_RANGE = (0.3, 1.0)


@dataclass
class ScoreNet:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def __call__(self, x) -> Tensor:
        h = nx.gelu(nx.add(nx.matmul(x, self.W1), self.b1))
        return nx.add(nx.matmul(h, self.W2), self.b2)


@dataclass
class ScoringWeights:
    W_a_t: Tensor  # c_t x 1
    W_a_v: Tensor  # c x 1
    textual: ScoreNet
    visual: ScoreNet


@dataclass
class SelectedFeatures:
    rows: Tensor          # (B, n_sel, c_i)
    indices: np.ndarray   # (B, n_sel), ascending per row
    gamma_num: float


def pool_contexts(f_ct, z_flat, w: ScoringWeights) -> tuple[Tensor, Tensor]:
    """Softmax-weighted pooling over the number axis; returns (B,1,c_t), (B,1,c)."""
    f_ct, z_flat = nx.as_tensor(f_ct), nx.as_tensor(z_flat)
    a_t = nx.softmax(nx.matmul(f_ct, w.W_a_t), axis=-2)
    a_v = nx.softmax(nx.matmul(z_flat, w.W_a_v), axis=-2)
    return nx.matmul(nx.transpose(a_t), f_ct), nx.matmul(nx.transpose(a_v), z_flat)


def _with_context(f_ci: Tensor, ctx: Tensor) -> Tensor:
    B, n, _ = f_ci.shape
    rep = nx.broadcast_to(ctx, (B, n, ctx.shape[-1]))
    return nx.concat([f_ci, rep], axis=-1)


def predict_scores(f_ci, c_text, c_vis, w: ScoringWeights) -> tuple[Tensor, Tensor]:
    f_ci = nx.as_tensor(f_ci)
    return w.textual(_with_context(f_ci, c_text)), w.visual(_with_context(f_ci, c_vis))


def fuse_scores(s_text, s_vis, alpha_bar, mode: str = "timestep") -> Tensor:
    """Blend the two raw scores by sqrt(alpha_bar) and softmax over features."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    if np.any(ab < 0) or np.any(ab > 1):
        raise ValueError(f"alpha_bar must lie in [0, 1], got {alpha_bar}")
    if mode == "timestep":
        k = np.sqrt(ab).reshape(-1, 1, 1) if ab.ndim else np.sqrt(ab)
        fused = nx.add(nx.mul(s_text, 1.0 - k), nx.mul(s_vis, k))
    elif mode == "textual":
        fused = s_text
    elif mode == "visual":
        fused = s_vis
    elif mode == "average":
        fused = nx.mul(nx.add(s_text, s_vis), 0.5)
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return nx.softmax(fused, axis=-2)


def n_selected(n: int, gamma_num: float) -> int:
    if gamma_num <= 0:
        raise ValueError(f"gamma_num must be positive, got {gamma_num}")
    return max(1, min(n, int(math.floor(gamma_num * n + 0.5))))


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k positions along the last axis; ties favour the lower index; sorted ascending."""
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def modulate_and_select(f_ci, S, gamma_num: float) -> SelectedFeatures:
    f_ci, S = nx.as_tensor(f_ci), nx.as_tensor(S)
    k = n_selected(f_ci.shape[-2], gamma_num)
    modulated = nx.mul(f_ci, nx.add(S, 1.0))
    idx = topk_indices(S.data[..., 0], k)
    return SelectedFeatures(nx.gather_rows(modulated, idx), idx, gamma_num)


def select_features(f_ci, f_ct, z_flat, alpha_bar, gamma_num: float, w: ScoringWeights,
                    fusion: str = "timestep") -> SelectedFeatures:
    """Full scoring path: pool, score, fuse, modulate and keep the Top-K rows."""
    f_ci = nx.as_tensor(f_ci)
    if fusion == "none":
        B, n, _ = f_ci.shape
        return SelectedFeatures(f_ci, np.tile(np.arange(n), (B, 1)), 1.0)
    c_text, c_vis = pool_contexts(f_ct, z_flat, w)
    s_text, s_vis = predict_scores(f_ci, c_text, c_vis, w)
    return modulate_and_select(f_ci, fuse_scores(s_text, s_vis, alpha_bar, fusion), gamma_num)


def sample_training_gamma(rng: np.random.Generator) -> float:
    return float(rng.uniform(*GAMMA_NUM_RANGE))
