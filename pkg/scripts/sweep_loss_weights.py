"""Sweep the head weight (beta = gamma) of the desk preset.

Prints validation MAE/CC, the static-class linear-probe OA on codes and the
100-sample few-shot OA against raw series for each value. This is the sweep
used to pick the desk preset: reconstruction has to stay under 0.02 while the
probe gains on the unsupervised run.

    python scripts/sweep_loss_weights.py --betas 0,5,10,20 --epochs 20
"""

import argparse
import csv
import sys
import time
from dataclasses import replace

from esdnet.evalkit import evaluate_model, extract_features, few_shot_curve
from esdnet.model import ModelConfig
from esdnet.synthdata import DatasetConfig, generate_dataset
from esdnet.training import DESK_PRESET, train


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--betas", default="0,5,10,20")
    ap.add_argument("--epochs", type=int, default=DESK_PRESET.epochs)
    ap.add_argument("--head-lr-scale", type=float, default=DESK_PRESET.head_lr_scale)
    ap.add_argument("--n-res", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    tr, va = generate_dataset(DatasetConfig(seed=args.seed))
    raw = (extract_features(tr, None, "raw"), extract_features(va, None, "raw"))
    mcfg = ModelConfig(n_res=args.n_res, seed=args.seed)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["beta", "MAE", "CC", "OA", "esd@100", "raw@100", "seconds"])
    for beta in (float(b) for b in args.betas.split(",")):
        tcfg = replace(DESK_PRESET, beta=beta, gamma=beta, epochs=args.epochs,
                       head_lr_scale=args.head_lr_scale, seed=args.seed)
        t0 = time.perf_counter()
        model = train(tr, tcfg, mcfg)[0]
        secs = time.perf_counter() - t0
        mae, _, cc, oa = evaluate_model(model, tr, va, "static_class")
        esd = (extract_features(tr, model, "codes"), extract_features(va, model, "codes"))
        fs = few_shot_curve({"esd": esd, "raw": raw}, tr.static_class, va.static_class, [100], repeats=5)
        w.writerow([beta, f"{mae:.4f}", f"{cc:.4f}", f"{100 * oa:.2f}", f"{100 * fs['esd'][0]:.2f}",
                    f"{100 * fs['raw'][0]:.2f}", f"{secs:.0f}"])
        sys.stdout.flush()


if __name__ == "__main__":
    main()
