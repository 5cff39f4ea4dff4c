"""Frozen toy encoders: text, image patches, and an invertible latent codec."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .numerics import gelu, make_rng


class Vocabulary:
    def __init__(self, names: list[str]):
        if len(set(names)) != len(names):
            raise ValueError("vocabulary names must be unique")
        self.names = list(names)
        self.index = {n: i for i, n in enumerate(names)}

    def __len__(self):
        return len(self.names)

    def encode(self, words: list[str]) -> list[int]:
        try:
            return [self.index[w] for w in words]
        except KeyError as e:
            raise KeyError(f"token {e.args[0]!r} not in vocabulary") from None

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.names) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    target_index: int

    def __post_init__(self):
        if not 0 <= self.target_index < len(self.tokens):
            raise ValueError(f"target_index {self.target_index} outside sequence of {len(self.tokens)}")

    @property
    def target_token(self) -> int:
        return self.tokens[self.target_index]


def tokenize(caption: str, vocab: Vocabulary, n_tokens: int, target: str | None = None,
             target_index: int | None = None) -> TokenSequence:
    """Map a space-separated caption to a padded TokenSequence."""
    words = caption.split()
    if len(words) > n_tokens:
        raise ValueError(f"caption has {len(words)} tokens, limit is {n_tokens}")
    if target is not None:
        if target not in words:
            raise LookupError(f"target token {target!r} not in caption {caption!r}")
        target_index = words.index(target)
    ids = vocab.encode(words) + [vocab.index["<pad>"]] * (n_tokens - len(words))
    return TokenSequence(tuple(ids), 2 if target_index is None else target_index)


def space_to_depth(img: np.ndarray, f: int = 2) -> np.ndarray:
    *lead, H, W, C = img.shape
    x = img.reshape(*lead, H // f, f, W // f, f, C)
    x = np.moveaxis(x, -4, -3)  # (..., h, w, f, f, C)
    return x.reshape(*lead, H // f, W // f, f * f * C)


def depth_to_space(z: np.ndarray, f: int = 2) -> np.ndarray:
    *lead, h, w, D = z.shape
    C = D // (f * f)
    x = z.reshape(*lead, h, w, f, f, C)
    x = np.moveaxis(x, -3, -4)
    return x.reshape(*lead, h * f, w * f, C)


class Encoders:
    """All frozen encoders, deterministically initialised from ``encoder_seed``."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = make_rng(cfg.encoder_seed)
        ct, ci, nt = cfg.text_dim, cfg.image_dim, cfg.n_tokens
        # text: embedding + positions, token-mixing MLP, channel MLP
        self.tok_emb = rng.normal(0, 1.0, (cfg.vocab_size, ct))
        self.tok_pos = rng.normal(0, 0.3, (nt, ct))
        self.mix1 = rng.normal(0, nt ** -0.5, (2 * nt, nt))
        self.mix2 = rng.normal(0, (2 * nt) ** -0.5, (nt, 2 * nt)) * 0.5
        self.tch1 = rng.normal(0, ct ** -0.5, (ct, 2 * ct))
        self.tch2 = rng.normal(0, (2 * ct) ** -0.5, (2 * ct, ct)) * 0.5
        # image: patch embedding + positions, per-patch MLP
        pd = cfg.patch * cfg.patch * 3
        self.patch_w = rng.normal(0, pd ** -0.5, (pd, ci)) * 2.0
        self.patch_pos = rng.normal(0, 0.3, (cfg.n_patches, ci))
        self.ich1 = rng.normal(0, ci ** -0.5, (ci, 2 * ci))
        self.ich2 = rng.normal(0, (2 * ci) ** -0.5, (2 * ci, ci)) * 0.5
        # latent codec: orthogonal 1x1 map after 2x space-to-depth
        q, r = np.linalg.qr(rng.normal(size=(cfg.latent_channels, cfg.latent_channels)))
        self.codec = q * np.sign(np.diag(r))
        self.codec_inv = np.linalg.inv(self.codec)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.tok_emb, self.tok_pos, self.mix1, self.mix2, self.tch1, self.tch2,
                  self.patch_w, self.patch_pos, self.ich1, self.ich2, self.codec):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    # ---- text
    def encode_text(self, seqs) -> np.ndarray:
        """TokenSequence or list of them -> (n_t, c_t) or (B, n_t, c_t)."""
        single = isinstance(seqs, TokenSequence)
        seqs = [seqs] if single else list(seqs)
        ids = np.array([s.tokens for s in seqs])
        if ids.shape[1] != self.cfg.n_tokens:
            raise ValueError(f"expected {self.cfg.n_tokens} tokens, got {ids.shape[1]}")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise IndexError("token index outside vocabulary")
        x = self.tok_emb[ids] + self.tok_pos
        x = x + self.mix2 @ gelu(self.mix1 @ x).data
        x = x + gelu(x @ self.tch1).data @ self.tch2
        return x[0] if single else x

    # ---- image
    def patches(self, img: np.ndarray) -> np.ndarray:
        p = self.cfg.patch
        *lead, H, W, C = img.shape
        x = img.reshape(*lead, H // p, p, W // p, p, C)
        x = np.moveaxis(x, -4, -3)
        return x.reshape(*lead, (H // p) * (W // p), p * p * C)

    def encode_image(self, img: np.ndarray, positional: bool = True) -> np.ndarray:
        """(H, W, 3) or (B, H, W, 3) image in [0, 1] -> (n_i, c_i) features."""
        img = np.asarray(img, dtype=np.float64)
        s = self.cfg.image_size
        if img.shape[-3:] != (s, s, 3):
            raise ValueError(f"encode_image: expected (..., {s}, {s}, 3), got {img.shape}")
        x = self.patches(2.0 * img - 1.0) @ self.patch_w
        if positional:
            x = x + self.patch_pos
        return x + gelu(x @ self.ich1).data @ self.ich2

    # ---- latent codec
    def encode_latent(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        s = self.cfg.image_size
        if img.shape[-3:] != (s, s, 3):
            raise ValueError(f"encode_latent: expected (..., {s}, {s}, 3), got {img.shape}")
        return space_to_depth(img) @ self.codec

    def decode_latent(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        h, c = self.cfg.latent_size, self.cfg.latent_channels
        if z.shape[-3:] != (h, h, c):
            raise ValueError(f"decode_latent: expected (..., {h}, {h}, {c}), got {z.shape}")
        return depth_to_space(z @ self.codec_inv)

    # model space is the centred image [-1, 1] pushed through the codec
    def image_to_model(self, img):
        return self.encode_latent(2.0 * np.asarray(img, dtype=np.float64) - 1.0)

    def model_to_image(self, z):
        return (self.decode_latent(z) + 1.0) / 2.0
