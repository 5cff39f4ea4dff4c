"""Toy similarity/controllability metrics and the ablation harness."""
from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import data as D
from . import numerics as nx
from .config import GuidanceConfig
from .denoiser import Denoiser
from .encoders import Encoders, TokenSequence, Vocabulary
from .guidance import customize
from .schedule import NoiseSchedule


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    num = (a * b).sum(-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return num / np.maximum(den, 1e-12)


def pixel_mask(mask: np.ndarray, size: int) -> np.ndarray:
    """Bring an (R, R) scope or (H, W) mask to a boolean (size, size) pixel mask."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape[-1] != size:
        m = nx.resize_grid((m > 0).astype(np.float64), (size, size))
        return m >= 0.5
    return m > 0


def masked_embedding(img: np.ndarray, mask: np.ndarray, encoders: Encoders) -> np.ndarray:
    """Mean patch feature of the masked image, weighted by per-patch mask coverage."""
    s = encoders.cfg.image_size
    m = pixel_mask(mask, s)
    if not m.any():
        raise ValueError("subject_similarity: empty mask")
    feats = encoders.encode_image(np.asarray(img) * m[..., None], positional=False)
    w = encoders.patches(np.repeat(m[..., None].astype(np.float64), 3, axis=-1)).mean(-1)
    return (w[:, None] * feats).sum(0) / w.sum()


def subject_similarity(generated: np.ndarray, gen_mask: np.ndarray, reference: np.ndarray,
                       ref_mask: np.ndarray, encoders: Encoders) -> float:
    return float(cosine(masked_embedding(generated, gen_mask, encoders),
                        masked_embedding(reference, ref_mask, encoders)))


class Controllability:
    """Caption/image agreement through a linear map fitted once on training scenes."""

    def __init__(self, encoders: Encoders, vocab: Vocabulary | None = None, seed: int = 7,
                 n: int = 1024, ridge: float = 1e-2):
        self.encoders = encoders
        self.vocab = vocab or D.default_vocabulary()
        self.pad = self.vocab.index["<pad>"]
        items = D.generate_corpus(seed, n)
        X = self.image_embedding(np.stack([it.image for it in items]))
        Y = self.text_embedding([it.caption for it in items])
        A = X.T @ X + ridge * np.eye(X.shape[1])
        self.map = np.linalg.solve(A, X.T @ Y)

    def image_embedding(self, images: np.ndarray) -> np.ndarray:
        f = self.encoders.encode_image(np.asarray(images), positional=False)
        emb = np.concatenate([f.mean(-2), np.ones(f.shape[:-2] + (1,))], axis=-1)
        return emb

    def text_embedding(self, captions) -> np.ndarray:
        single = isinstance(captions, TokenSequence)
        caps = [captions] if single else list(captions)
        f = self.encoders.encode_text(caps)
        keep = (np.array([c.tokens for c in caps]) != self.pad)[..., None]
        emb = (f * keep).sum(1) / keep.sum(1)
        return emb[0] if single else emb

    def __call__(self, images: np.ndarray, captions) -> np.ndarray:
        return cosine(self.image_embedding(images) @ self.map, self.text_embedding(captions))


def text_controllability(image: np.ndarray, caption: TokenSequence, metric: Controllability) -> float:
    return float(metric(np.asarray(image)[None], [caption])[0])


# ------------------------------------------------------------------ ablation


@dataclass
class EvalCase:
    key: int
    subject: np.ndarray        # (H, W, 3)
    subject_mask: np.ndarray   # (H, W) bool
    words: list[str]           # prompt to generate from
    target: str                # real word narrowed into the subject


def make_suite(seed: int, n: int) -> list[EvalCase]:
    """Held-out subjects paired with prompts that move them to a new background."""
    rng = nx.make_rng(seed)
    cases = []
    backgrounds = list(D.BACKGROUNDS)
    for k in range(n):
        spec = D.random_spec(rng, held_out=True)
        item = D.render_scene(spec)
        bg = backgrounds[(backgrounds.index(spec.background) + 1 + rng.integers(len(backgrounds) - 1))
                         % len(backgrounds)]
        words = ["a", spec.color, spec.category, "on", bg]
        cases.append(EvalCase(k, item.image, item.mask, words, spec.category))
    return cases


def write_suite(cases: list[EvalCase], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cases.tsv", "w", encoding="utf-8") as fh:
        fh.write("key\tsubject\tcaption\ttarget\n")
        for c in cases:
            stem = f"{c.key:04d}"
            D.write_ppm(out / f"{stem}.ppm", c.subject)
            D.write_pgm(out / f"{stem}.mask.pgm", c.subject_mask.astype(np.float64))
            fh.write(f"{c.key}\t{stem}\t{' '.join(c.words)}\t{c.target}\n")


def read_suite(in_dir) -> list[EvalCase]:
    d = Path(in_dir)
    cases = []
    with open(d / "cases.tsv", encoding="utf-8") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            cases.append(EvalCase(int(row["key"]), D.read_ppm(d / f"{row['subject']}.ppm"),
                                  D.read_pgm(d / f"{row['subject']}.mask.pgm") > 0.5,
                                  row["caption"].split(), row["target"]))
    return cases


def case_caption(case: EvalCase, vocab: Vocabulary, swap: str = "") -> TokenSequence:
    words = list(case.words)
    ti = words.index(case.target)
    if swap:
        words[ti] = swap
    return D.caption_tokens(words, vocab, ti)


METRIC_COLUMNS = ("similarity", "controllability", "combined", "seconds")


def evaluate_config(config: GuidanceConfig, suite: list[EvalCase], model: Denoiser,
                    encoders: Encoders, sched: NoiseSchedule, metric: Controllability,
                    vocab: Vocabulary | None = None) -> dict:
    """Generate every suite case under ``config``; per-case and mean metrics."""
    vocab = vocab or D.default_vocabulary()
    t0 = time.perf_counter()
    caps = [case_caption(c, vocab, config.swap_target) for c in suite]
    # controllability is always judged against the unswapped prompt
    plain = [case_caption(c, vocab) for c in suite]
    images, trace = customize(caps, np.stack([c.subject for c in suite]), config, model,
                              encoders, sched, keys=[c.key for c in suite])
    scopes = trace.final_scope
    sims = np.array([
        subject_similarity(images[i], scopes[i], c.subject, c.subject_mask, encoders)
        if scopes[i].any() else 0.0
        for i, c in enumerate(suite)])
    ctrl = metric(images, plain)
    return {"similarity": sims, "controllability": ctrl, "images": images, "trace": trace,
            "seconds": time.perf_counter() - t0}


def run_ablation(grid: list[GuidanceConfig], suite: list[EvalCase], model: Denoiser,
                 encoders: Encoders, sched: NoiseSchedule, metric: Controllability | None = None,
                 vocab: Vocabulary | None = None) -> list[dict]:
    """One row per config: config fields plus mean similarity/controllability and runtime."""
    if not grid or not suite:
        raise ValueError("run_ablation: grid and suite must be nonempty")
    metric = metric or Controllability(encoders, vocab)
    rows = []
    for config in sorted(grid, key=lambda c: tuple(map(str, c.key()))):
        r = evaluate_config(config, suite, model, encoders, sched, metric, vocab)
        sim, ctrl = float(r["similarity"].mean()), float(r["controllability"].mean())
        row = dataclasses.asdict(config)
        row.update(similarity=sim, controllability=ctrl, combined=(sim + ctrl) / 2,
                   seconds=r["seconds"])
        rows.append(row)
    return rows


def sweep_trend(knob, metric) -> float:
    """Spearman rank correlation between a swept knob and a metric; 0 when undefined."""
    knob, metric = np.asarray(knob, dtype=np.float64), np.asarray(metric, dtype=np.float64)
    if np.ptp(knob) == 0 or np.ptp(metric) == 0:
        return 0.0
    return float(spearmanr(knob, metric).statistic)


def write_results(rows: list[dict], path) -> None:
    cols = [f.name for f in dataclasses.fields(GuidanceConfig)] + list(METRIC_COLUMNS)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in cols})


def read_grid(path) -> list[GuidanceConfig]:
    """CSV whose header names GuidanceConfig fields; missing columns keep defaults."""
    types = {f.name: f.type for f in dataclasses.fields(GuidanceConfig)}
    out = []
    with open(path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for k, v in row.items():
                if k not in types:
                    raise KeyError(f"unknown grid column {k!r}")
                if v is None or v == "":
                    continue
                kind = types[k]
                kw[k] = int(v) if kind == "int" else float(v) if kind == "float" else v
            out.append(GuidanceConfig(**kw))
    return out
