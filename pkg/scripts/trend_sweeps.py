"""Seed-averaged sweeps on the held-out suite with a trained phase-1 checkpoint.

Reports three comparisons: full guidance vs no visual condition, the scope-ratio
sweep, and every score-fusion variant. Results go to stdout and a CSV.

    python3 scripts/trend_sweeps.py --ckpt runs/default/phase1.ckpt --seeds 5
"""
import argparse
import csv

import numpy as np

from narrowlab import evaluate as E
from narrowlab.config import GuidanceConfig
from narrowlab.encoders import Encoders
from narrowlab.schedule import make_schedule
from narrowlab.train import load_checkpoint


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--suite-seed", type=int, default=11)
    ap.add_argument("--cases", type=int, default=10)
    ap.add_argument("--out", default="trend_sweeps.csv")
    args = ap.parse_args()

    model = load_checkpoint(args.ckpt)
    enc, sched = Encoders(model.cfg), make_schedule()
    suite, metric = E.make_suite(args.suite_seed, args.cases), E.Controllability(enc)
    variants = [("default", {}), ("omega_i=0", {"omega_i": 0.0})]
    variants += [(f"gamma_scope={g}", {"gamma_scope": g}) for g in (0.1, 0.25, 0.5)]
    variants += [(f"fusion={f}", {"fusion": f}) for f in ("textual", "visual", "average", "none")]

    rows = []
    for name, kw in variants:
        sims, ctrls = [], []
        for s in range(args.seeds):
            r = E.evaluate_config(GuidanceConfig(seed=s, **kw), suite, model, enc, sched, metric)
            sims.append(r["similarity"].mean())
            ctrls.append(r["controllability"].mean())
        sim, ctrl = float(np.mean(sims)), float(np.mean(ctrls))
        rows.append({"variant": name, "similarity": sim, "controllability": ctrl,
                     "combined": (sim + ctrl) / 2})
        print(f"{name:20s} similarity {sim:.4f} controllability {ctrl:.4f} combined {(sim + ctrl) / 2:.4f}")

    g = [r for r in rows if r["variant"].startswith("gamma_scope")]
    knob = [0.1, 0.25, 0.5]
    print(f"scope sweep rank correlation: similarity {E.sweep_trend(knob, [r['similarity'] for r in g]):+.2f}, "
          f"controllability {E.sweep_trend(knob, [r['controllability'] for r in g]):+.2f}")
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
