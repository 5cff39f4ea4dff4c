"""Command-line entry point: corpus generation, training, customization, inspection, ablation."""
from __future__ import annotations

import argparse
import dataclasses
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data as D
from . import evaluate as E
from .config import GuidanceConfig, TrainConfig, parse_kv, train_config_from_kv
from .denoiser import Denoiser
from .encoders import Encoders, tokenize
from .guidance import customize, read_trace, write_trace
from .schedule import make_schedule
from .train import (CheckpointError, TrainingSet, checkpoint_hash, load_checkpoint,
                    save_checkpoint, train)


class CliError(Exception):
    def __init__(self, code: str, detail: str, status: int = 1):
        super().__init__(detail)
        self.code, self.detail, self.status = code, detail, status


class _Help(argparse.HelpFormatter):
    """Append real defaults; flags that only override a config show theirs in brackets."""

    def _get_help_string(self, action):
        h = action.help or ""
        if action.default not in (None, argparse.SUPPRESS) and action.option_strings:
            h += f" (default: {action.default})"
        return h


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        code = "unknown-flag" if "unrecognized arguments" in message else "usage"
        raise CliError(code, message, 2)


GUIDANCE_FLAGS = {  # flag -> GuidanceConfig field
    "gamma_scope": "gamma_scope", "gamma_num": "gamma_num", "omega_t": "omega_t",
    "omega_i": "omega_i", "steps": "steps", "seed": "seed", "mask_mode": "mask_mode",
    "fusion": "fusion",
}
TRAIN_FLAGS = ("steps", "lr", "batch_size", "seed")


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("missing-file", f"{what} {p} does not exist", 3)
    return p


def _read_config(path) -> dict[str, str]:
    if path is None:
        return {}
    try:
        return parse_kv(_need_file(path, "config").read_text(encoding="utf-8"))
    except ValueError as e:
        raise CliError("config-invalid", str(e), 4) from None


def _load(path) -> Denoiser:
    try:
        return load_checkpoint(_need_file(path, "checkpoint"))
    except CheckpointError as e:
        raise CliError("checkpoint-invalid", str(e), 5) from None


def guidance_from(args, file_kv: dict[str, str]) -> GuidanceConfig:
    """Defaults, then the config file, then explicit flags."""
    types = {f.name: f.type for f in dataclasses.fields(GuidanceConfig)}
    kw = {}
    for k, v in file_kv.items():
        if k not in types:
            raise CliError("config-invalid", f"unknown guidance key {k!r}", 4)
        kw[k] = int(v) if types[k] == "int" else float(v) if types[k] == "float" else v
    for flag, name in GUIDANCE_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            kw[name] = value
    try:
        return GuidanceConfig(**kw)
    except (TypeError, ValueError) as e:
        raise CliError("config-invalid", str(e), 4) from None


# ------------------------------------------------------------------ commands


def cmd_gen_corpus(args) -> None:
    if args.n < 1:
        raise CliError("config-invalid", "--n must be >= 1", 4)
    D.write_corpus(D.generate_corpus(args.seed, args.n), args.out, args.seed)
    print(f"wrote {args.n} items to {args.out}")


def cmd_gen_suite(args) -> None:
    E.write_suite(E.make_suite(args.seed, args.n), args.out)
    print(f"wrote {args.n} cases to {args.out}")


def cmd_train(args) -> None:
    try:
        cfg = train_config_from_kv(_read_config(args.config))
    except (KeyError, ValueError) as e:
        raise CliError("config-invalid", str(e), 4) from None
    cfg.phase = args.phase
    for name in TRAIN_FLAGS:
        if getattr(args, name) is not None:
            setattr(cfg, name, getattr(args, name))
    if args.init:
        cfg.init = args.init
    try:
        items = D.read_corpus(_need_file(args.corpus, "corpus"))
    except FileNotFoundError as e:
        raise CliError("missing-file", str(e), 3) from None
    if cfg.init:
        model = _load(cfg.init)
        if model.cfg != cfg.model and args.config:
            print("note: model dims come from the --init checkpoint", file=sys.stderr)
    elif cfg.phase == 1:
        raise CliError("backbone-missing", "phase 1 needs --init with a phase-0 checkpoint", 4)
    else:
        model = Denoiser(cfg.model)
    if cfg.phase == 1 and not model.backbone_ready:
        raise CliError("backbone-missing", f"{cfg.init} holds no trained backbone", 4)
    enc = Encoders(model.cfg)
    images = np.stack([it.image for it in items])
    data = TrainingSet.build(images, [it.caption for it in items], enc)
    log = args.log or str(Path(args.out).with_suffix(".log.csv"))
    res = train(model, data, cfg, make_schedule(), log_path=log)
    digest = save_checkpoint(model, args.out)
    print(f"phase {cfg.phase}: {cfg.steps} steps in {res.seconds:.1f}s, "
          f"final loss {res.losses[-50:].mean():.5f}, checkpoint {digest[:16]}")


def cmd_customize(args) -> None:
    model = _load(args.ckpt)
    config = guidance_from(args, _read_config(args.config))
    subject = D.read_ppm(_need_file(args.subject, "subject image"))
    vocab = D.default_vocabulary()
    try:
        caption = tokenize(args.caption, vocab, model.cfg.n_tokens, target=args.target_token)
    except LookupError as e:
        raise CliError("target-token-missing", str(e), 2) from None
    except (KeyError, ValueError) as e:
        raise CliError("caption-invalid", str(e).strip("'\""), 4) from None
    enc = Encoders(model.cfg)
    if subject.shape != (model.cfg.image_size, model.cfg.image_size, 3):
        raise CliError("config-invalid", f"subject image shape {subject.shape} does not match model", 4)
    images, trace = customize([caption], subject[None], config, model, enc, make_schedule())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.write_ppm(out / "image.ppm", images[0])
    write_trace(trace, out)
    lines = [f"{k} = {v}" for k, v in dataclasses.asdict(config).items()]
    lines += [f"caption = {args.caption}", f"target_token = {args.target_token}",
              f"checkpoint = {checkpoint_hash(args.ckpt)}"]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {out / 'image.ppm'} and a {len(trace)}-step trace")


def mask_panel(M: np.ndarray, scope: np.ndarray, size: int) -> np.ndarray:
    """Attention map (rescaled to [0, 1]) beside the influence scope, nearest-upsampled."""
    M = np.asarray(M, dtype=np.float64)
    span = M.max() - M.min()
    Mn = (M - M.min()) / span if span > 0 else np.zeros_like(M)
    f = max(1, size // M.shape[-1])
    up = [np.kron(a, np.ones((f, f))) for a in (Mn, np.asarray(scope))]
    gap = np.ones((up[0].shape[0], 1))
    panel = np.concatenate([up[0], gap, up[1]], axis=1)
    return np.repeat(panel[..., None], 3, axis=-1)


def cmd_inspect_masks(args) -> None:
    d = _need_file(args.trace, "trace directory")
    if not (d / "trace.index").exists():
        raise CliError("missing-file", f"{d} has no trace.index", 3)
    tr = read_trace(d)
    if not 0 <= args.step < len(tr.t):
        raise CliError("config-invalid", f"--step must be in [0, {len(tr.t) - 1}]", 4)
    M, scope = tr.maps[args.step][0], tr.scopes[args.step][0]
    D.write_ppm(args.out, mask_panel(M, scope, 32))
    kept = int((scope > 0).sum())
    print(f"step {args.step} (t={tr.t[args.step]}): {kept} scope cells kept")


def _ablate_chunk(ckpt, grid, suite_dir):
    model = load_checkpoint(ckpt)
    enc = Encoders(model.cfg)
    return E.run_ablation(grid, E.read_suite(suite_dir), model, enc, make_schedule())


def cmd_ablate(args) -> None:
    _need_file(args.ckpt, "checkpoint")
    suite_dir = _need_file(args.suite, "suite directory")
    try:
        grid = E.read_grid(_need_file(args.grid, "grid"))
    except (KeyError, ValueError, TypeError) as e:
        raise CliError("config-invalid", str(e), 4) from None
    if not grid:
        raise CliError("config-invalid", "grid has no rows", 4)
    if args.jobs <= 1:
        rows = _ablate_chunk(args.ckpt, grid, suite_dir)
    else:
        chunks = [grid[i::args.jobs] for i in range(args.jobs) if grid[i::args.jobs]]
        with ProcessPoolExecutor(len(chunks)) as ex:
            parts = ex.map(_ablate_chunk, [args.ckpt] * len(chunks), chunks, [suite_dir] * len(chunks))
            rows = [r for part in parts for r in part]
    rows.sort(key=lambda r: tuple(str(r[f.name]) for f in dataclasses.fields(GuidanceConfig)))
    E.write_results(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    g = GuidanceConfig()
    t = TrainConfig()
    p = _Parser(prog="narrowlab", description=__doc__,
                formatter_class=_Help)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        return sub.add_parser(name, help=help_, formatter_class=_Help)

    c = cmd("gen-corpus", "render a procedural training corpus")
    c.add_argument("--seed", type=int, default=0, help="corpus seed")
    c.add_argument("--n", type=int, default=512, help="number of items")
    c.add_argument("--out", required=True, help="output directory")
    c.set_defaults(func=cmd_gen_corpus)

    c = cmd("gen-suite", "render held-out evaluation cases")
    c.add_argument("--seed", type=int, default=11, help="suite seed")
    c.add_argument("--n", type=int, default=10, help="number of cases")
    c.add_argument("--out", required=True, help="output directory")
    c.set_defaults(func=cmd_gen_suite)

    c = cmd("train", "run phase 0 (backbone) or phase 1 (scoring + visual projections)")
    c.add_argument("--phase", type=int, choices=(0, 1), required=True, help="training phase")
    c.add_argument("--config", default=None, help="flat key = value config file [none]")
    c.add_argument("--corpus", required=True, help="corpus directory")
    c.add_argument("--out", required=True, help="checkpoint path")
    c.add_argument("--init", default=None, help="starting checkpoint, required for phase 1 [none]")
    c.add_argument("--steps", type=int, default=None, help=f"update steps [{t.steps}]")
    c.add_argument("--lr", type=float, default=None, help=f"Adam learning rate [{t.lr}]")
    c.add_argument("--batch-size", type=int, default=None, help=f"batch size [{t.batch_size}]")
    c.add_argument("--seed", type=int, default=None, help=f"training seed [{t.seed}]")
    c.add_argument("--log", default=None, help="loss CSV path [<out>.log.csv]")
    c.set_defaults(func=cmd_train)

    c = cmd("customize", "generate an image of the subject under a caption")
    c.add_argument("--ckpt", required=True, help="phase-1 checkpoint")
    c.add_argument("--subject", required=True, help="subject image (PPM)")
    c.add_argument("--caption", required=True, help="space-separated caption")
    c.add_argument("--target-token", required=True, help="real word narrowed to the subject")
    c.add_argument("--config", default=None, help="flat key = value guidance config [none]")
    c.add_argument("--gamma-scope", type=float, default=None, help=f"scope ratio [{g.gamma_scope}]")
    c.add_argument("--gamma-num", type=float, default=None, help=f"feature ratio [{g.gamma_num}]")
    c.add_argument("--omega-t", type=float, default=None, help=f"text guidance weight [{g.omega_t}]")
    c.add_argument("--omega-i", type=float, default=None, help=f"image guidance weight [{g.omega_i}]")
    c.add_argument("--steps", type=int, default=None, help=f"DDIM steps [{g.steps}]")
    c.add_argument("--seed", type=int, default=None, help=f"noise seed [{g.seed}]")
    c.add_argument("--mask-mode", choices=("maxnorm", "binary"), default=None,
                   help=f"scope normalisation [{g.mask_mode}]")
    c.add_argument("--fusion", choices=("timestep", "textual", "visual", "average", "none"),
                   default=None, help=f"score fusion [{g.fusion}]")
    c.add_argument("--out", required=True, help="output directory")
    c.set_defaults(func=cmd_customize)

    c = cmd("inspect-masks", "render the attention map and scope of one trace step")
    c.add_argument("--trace", required=True, help="customize output directory")
    c.add_argument("--step", type=int, default=0, help="step index")
    c.add_argument("--out", required=True, help="output PPM")
    c.set_defaults(func=cmd_inspect_masks)

    c = cmd("ablate", "evaluate a grid of guidance configs on a suite")
    c.add_argument("--ckpt", required=True, help="phase-1 checkpoint")
    c.add_argument("--grid", required=True, help="CSV of guidance configs")
    c.add_argument("--suite", required=True, help="suite directory (see gen-suite)")
    c.add_argument("--out", required=True, help="results CSV")
    c.add_argument("--jobs", type=int, default=1, help="worker processes")
    c.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except CliError as e:
        print(f"error: {e.code}: {e.detail}", file=sys.stderr)
        return e.status
    except (ValueError, OSError) as e:
        print(f"error: runtime: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
