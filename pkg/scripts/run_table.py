"""Four-protocol comparison on the synthetic transfer scenario.

Prints mean UAR (± std over repetitions) for in-domain LOSO training,
out-of-domain training, and fine-tuning with and without the distance
loss. Optionally writes the trial and aggregate rows.

    python scripts/run_table.py --repetitions 10 --seeds 0 1 2
"""

import argparse
import dataclasses

import numpy as np

from siamese_transfer.cli import default_synth_configs, emit_results
from siamese_transfer.data_pipeline import synth_generate
from siamese_transfer.protocols import ExperimentConfig, ExperimentResult, run_experiment, run_idt

ORDER = ("idt", "oodt", "finetune", "finetune_dl")
LABELS = {"idt": "IDT", "oodt": "OODT", "finetune": "FineTune", "finetune_dl": "FineTune + DL"}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--repetitions", type=int, default=10)
    ap.add_argument("--adopted", type=int, default=2, help="adopted target speakers")
    ap.add_argument("--frozen", type=int, default=0)
    ap.add_argument("--out", help="write trials/aggregates for the first seed here")
    args = ap.parse_args()

    cfgs = default_synth_configs()
    source, target = synth_generate(cfgs["source"]), synth_generate(cfgs["target"])
    per_seed = {p: [] for p in ORDER}
    for seed in args.seeds:
        cfg = ExperimentConfig(protocols=ORDER[1:], frozen_layers=(args.frozen,),
                               adopted_speaker_counts=(args.adopted,),
                               repetitions=args.repetitions, master_seed=seed)
        res = run_experiment(cfg, target, source)
        idt = run_idt(target, cfg)
        merged = ExperimentResult(res.trials + idt.trials, res.config)
        for p in ORDER:
            per_seed[p].append(merged.mean_uar(p))
        if args.out and seed == args.seeds[0]:
            emit_results(merged, ("csv", "json"), args.out, dataclasses.asdict(cfg))

    print(f"k = {args.adopted}, frozen = {args.frozen}, {args.repetitions} repetitions, "
          f"seeds {args.seeds}")
    print(f"{'protocol':<15} {'UAR %':>8} {'± seeds':>8}")
    for p in ORDER:
        vals = 100 * np.array(per_seed[p])
        spread = vals.std(ddof=1) if vals.size > 1 else 0.0
        print(f"{LABELS[p]:<15} {vals.mean():>8.1f} {spread:>8.1f}")
    gain = 100 * (np.mean(per_seed["finetune_dl"]) - np.mean(per_seed["oodt"]))
    print(f"FineTune + DL over OODT: {gain:+.1f} points")


if __name__ == "__main__":
    main()
