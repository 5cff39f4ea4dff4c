"""Train the phase-0 backbone and the phase-1 visual branch on the toy corpus.

    python3 scripts/train_models.py --out runs/default
"""
import argparse
from pathlib import Path

import numpy as np

from narrowlab import data as D
from narrowlab.config import ModelConfig, TrainConfig
from narrowlab.denoiser import Denoiser
from narrowlab.encoders import Encoders
from narrowlab.schedule import make_schedule
from narrowlab.train import TrainingSet, save_checkpoint, smoothed, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--corpus-seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=512)
    ap.add_argument("--phase0-steps", type=int, default=3000)
    ap.add_argument("--phase1-steps", type=int, default=2000)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cfg, sched = ModelConfig(), make_schedule()
    enc = Encoders(cfg)
    imgs, caps, _ = D.stack(D.generate_corpus(args.corpus_seed, args.n))
    data = TrainingSet.build(imgs, caps, enc)
    model = Denoiser(cfg)
    for phase, steps, lr in ((0, args.phase0_steps, 2e-3), (1, args.phase1_steps, 1e-3)):
        res = train(model, data, TrainConfig(phase=phase, steps=steps, batch_size=16, lr=lr), sched,
                    log_path=out / f"phase{phase}.log.csv")
        save_checkpoint(model, out / f"phase{phase}.ckpt")
        s = smoothed(res.losses, 50)
        deciles = np.round(s[:: max(1, len(s) // 10)], 4).tolist()
        print(f"phase {phase}: {res.seconds:.0f}s, smoothed loss by decile {deciles}, "
              f"drop {1 - s[-1] / s[0]:.1%}, frozen unchanged {res.frozen_before == res.frozen_after}")


if __name__ == "__main__":
    main()
