"""Toy UNet epsilon-predictor with cross-attention at several resolutions."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nx
from .attention import (AttentionBlockWeights, AttentionRecord, dual_cross_attention,
                        masked_dual_cross_attention, textual_cross_attention)
from .config import ModelConfig
from .numerics import Parameter, Tensor, make_rng
from .scoring import ScoreNet, ScoringWeights, SelectedFeatures

MODES = ("uncond", "text_only", "text_and_image", "text_and_image_masked")


@dataclass
class ConditioningMode:
    tag: str
    features: Optional[object] = None  # SelectedFeatures or (B, n, c_i) rows
    scope: Optional[np.ndarray] = None  # (B, R, R)

    def __post_init__(self):
        if self.tag not in MODES:
            raise ValueError(f"unknown conditioning mode {self.tag!r}")
        needs_feats = self.tag.startswith("text_and_image")
        if needs_feats != (self.features is not None):
            raise ValueError(f"mode {self.tag!r}: image features must be "
                             f"{'given' if needs_feats else 'absent'}")
        needs_scope = self.tag == "text_and_image_masked"
        if needs_scope != (self.scope is not None):
            raise ValueError(f"mode {self.tag!r}: influence scope must be "
                             f"{'given' if needs_scope else 'absent'}")

    @property
    def rows(self):
        f = self.features
        return f.rows if isinstance(f, SelectedFeatures) else f


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def is_phase1_param(name: str) -> bool:
    return name.startswith("scoring.") or name.endswith(".W_Ki") or name.endswith(".W_Vi")


class Denoiser:
    """Holds the named parameter table and runs the forward pass."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Parameter] | None = None):
        self.cfg = cfg
        self.attn_blocks = self._attention_layout()
        self.params = params if params is not None else self._init_params()
        self.backbone_ready = False

    # ------------------------------------------------------------ structure
    def _stages(self):
        """Yield (prefix, resolution, has_attention) for every residual unit, in order."""
        cfg = self.cfg
        units = []
        for li, r in enumerate(cfg.ladder):
            for j in range(cfg.blocks_per_stage):
                units.append((f"down.{li}.{j}", r, r in cfg.attn_resolutions))
        for li in reversed(range(len(cfg.ladder) - 1)):
            r = cfg.ladder[li]
            for j in range(cfg.blocks_per_stage):
                units.append((f"up.{li}.{j}", r, r in cfg.attn_resolutions))
        return units

    def _attention_layout(self):
        return [(p, r) for p, r, a in self._stages() if a]

    def _init_params(self) -> dict[str, Parameter]:
        cfg = self.cfg
        rng = make_rng(cfg.init_seed)
        C, c, ct, ci, d, te = (cfg.channels, cfg.latent_channels, cfg.text_dim,
                               cfg.image_dim, cfg.attn_dim, cfg.temb_dim)
        p: dict[str, np.ndarray] = {}

        def normal(shape, std):
            return rng.normal(0.0, std, shape)

        p["temb.W1"] = normal((te, te), te ** -0.5)
        p["temb.b1"] = np.zeros(te)
        p["temb.W2"] = normal((te, te), te ** -0.5)
        p["temb.b2"] = np.zeros(te)
        p["in.w"] = normal((3, 3, c, C), (9 * c) ** -0.5)
        for prefix, r, has_attn in self._stages():
            p[f"{prefix}.conv1"] = normal((3, 3, C, C), (9 * C) ** -0.5)
            p[f"{prefix}.conv2"] = normal((3, 3, C, C), 0.3 * (9 * C) ** -0.5)
            p[f"{prefix}.mod"] = normal((te, 2 * C), 0.1 * te ** -0.5)
            p[f"{prefix}.mod_b"] = np.zeros(2 * C)
            if has_attn:
                p[f"{prefix}.pos"] = normal((r * r, C), 0.5)
                p[f"{prefix}.W_Q"] = normal((C, d), C ** -0.5)
                p[f"{prefix}.W_K"] = normal((ct, d), ct ** -0.5)
                p[f"{prefix}.W_V"] = normal((ct, C), 0.5 * ct ** -0.5)
                p[f"{prefix}.W_Ki"] = normal((ci, d), ci ** -0.5)
                p[f"{prefix}.W_Vi"] = normal((ci, C), 0.1 * ci ** -0.5)
        for li in range(len(cfg.ladder) - 1):
            p[f"up.{li}.merge"] = normal((3, 3, 2 * C, C), (18 * C) ** -0.5)
        p["out.w"] = normal((3, 3, C, c), 0.3 * (9 * C) ** -0.5)
        p["null_text"] = normal((cfg.n_tokens, ct), 1.0)
        h = cfg.score_hidden
        p["scoring.W_a_t"] = normal((ct, 1), ct ** -0.5)
        p["scoring.W_a_v"] = normal((c, 1), c ** -0.5)
        for tag, width in (("text", ci + ct), ("vis", ci + c)):
            p[f"scoring.{tag}.W1"] = normal((width, h), width ** -0.5)
            p[f"scoring.{tag}.b1"] = np.zeros(h)
            p[f"scoring.{tag}.W2"] = normal((h, 1), h ** -0.5)
            p[f"scoring.{tag}.b2"] = np.zeros(1)
        return {k: Parameter(k, v, trainable=False) for k, v in p.items()}

    # ------------------------------------------------------------- access
    def set_phase(self, phase: int) -> list[Parameter]:
        """Mark the phase's trainable set and return it."""
        if phase not in (0, 1):
            raise ValueError(f"phase must be 0 or 1, got {phase}")
        out = []
        for name, p in self.params.items():
            flag = is_phase1_param(name) if phase == 1 else not is_phase1_param(name)
            p.set_trainable(flag)
            if flag:
                out.append(p)
        return out

    def freeze(self) -> None:
        for p in self.params.values():
            p.set_trainable(False)

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def block_weights(self, prefix: str) -> AttentionBlockWeights:
        g = self.params
        return AttentionBlockWeights(g[f"{prefix}.W_Q"], g[f"{prefix}.W_K"], g[f"{prefix}.W_V"],
                                     g[f"{prefix}.W_Ki"], g[f"{prefix}.W_Vi"])

    def scoring_weights(self) -> ScoringWeights:
        g = self.params

        def net(tag):
            return ScoreNet(g[f"scoring.{tag}.W1"], g[f"scoring.{tag}.b1"],
                            g[f"scoring.{tag}.W2"], g[f"scoring.{tag}.b2"])

        return ScoringWeights(g["scoring.W_a_t"], g["scoring.W_a_v"], net("text"), net("vis"))

    @property
    def n_attention_blocks(self) -> int:
        return len(self.attn_blocks)

    # ------------------------------------------------------------ forward
    def _res(self, x, temb, prefix):
        g = self.params
        h = nx.conv3x3(nx.silu(nx.layer_norm(x)), g[f"{prefix}.conv1"])
        ss = nx.add(nx.matmul(temb, g[f"{prefix}.mod"]), g[f"{prefix}.mod_b"])
        B, C = ss.shape[0], self.cfg.channels
        ss = nx.reshape(ss, (B, 1, 1, 2 * C))
        h = nx.add(nx.mul(h, nx.add(nx.slice_last(ss, 0, C), 1.0)), nx.slice_last(ss, C, 2 * C))
        h = nx.conv3x3(nx.silu(nx.layer_norm(h)), g[f"{prefix}.conv2"])
        return nx.add(x, h)

    def _attn(self, x, f_ct, mode: ConditioningMode, prefix, block_id, target_index):
        B, H, W, C = x.shape
        # positional term lets queries address subject patches by location
        f_i = nx.add(nx.reshape(nx.layer_norm(x), (B, H * W, C)), self.params[f"{prefix}.pos"])
        w = self.block_weights(prefix)
        if mode.tag in ("uncond", "text_only"):
            out, rec = textual_cross_attention(f_i, f_ct, w, target_index, (H, W), block_id)
        elif mode.tag == "text_and_image":
            out, rec = dual_cross_attention(f_i, f_ct, mode.rows, w, target_index, (H, W), block_id)
        else:
            out, rec = masked_dual_cross_attention(f_i, f_ct, mode.rows, w, mode.scope,
                                                   target_index, (H, W), block_id)
        return nx.add(x, nx.reshape(out, (B, H, W, C))), rec

    def denoise(self, z, t, f_ct, mode: ConditioningMode,
                target_index=2) -> tuple[Tensor, list[AttentionRecord]]:
        """Predict the noise in ``z`` (B, h, w, c) at timesteps ``t``; one record per attention block."""
        cfg = self.cfg
        z = nx.as_tensor(z)
        if z.ndim != 4 or z.shape[1:] != (cfg.latent_size, cfg.latent_size, cfg.latent_channels):
            raise ValueError(f"denoise: latent shape {z.shape} does not match config")
        B = z.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        g = self.params
        if mode.tag == "uncond":
            f_ct = nx.broadcast_to(g["null_text"], (B, cfg.n_tokens, cfg.text_dim))
        else:
            f_ct = nx.as_tensor(f_ct)
        temb = Tensor(timestep_embedding(t, cfg.temb_dim))
        temb = nx.silu(nx.add(nx.matmul(temb, g["temb.W1"]), g["temb.b1"]))
        temb = nx.add(nx.matmul(temb, g["temb.W2"]), g["temb.b2"])

        recs: list[AttentionRecord] = []
        x = nx.conv3x3(z, g["in.w"])
        skips = []
        for li, r in enumerate(cfg.ladder):
            for j in range(cfg.blocks_per_stage):
                prefix = f"down.{li}.{j}"
                x = self._res(x, temb, prefix)
                if r in cfg.attn_resolutions:
                    x, rec = self._attn(x, f_ct, mode, prefix, len(recs), target_index)
                    recs.append(rec)
            if li < len(cfg.ladder) - 1:
                skips.append(x)
                x = nx.resize(x, (cfg.ladder[li + 1],) * 2)
        for li in reversed(range(len(cfg.ladder) - 1)):
            r = cfg.ladder[li]
            x = nx.resize(x, (r, r))
            x = nx.conv3x3(nx.concat([x, skips[li]], axis=-1), g[f"up.{li}.merge"])
            for j in range(cfg.blocks_per_stage):
                prefix = f"up.{li}.{j}"
                x = self._res(x, temb, prefix)
                if r in cfg.attn_resolutions:
                    x, rec = self._attn(x, f_ct, mode, prefix, len(recs), target_index)
                    recs.append(rec)
        eps = nx.conv3x3(nx.silu(nx.layer_norm(x)), g["out.w"])
        return eps, recs

