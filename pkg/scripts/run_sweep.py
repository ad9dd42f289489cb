"""Sweep frozen extractor layers against the number of adopted speakers.

Prints one grid per fine-tuning mode (rows: frozen layers, columns:
adopted speakers), mean UAR in percent over repetitions.

    python scripts/run_sweep.py --speakers 2 5 10 15 20 --repetitions 5
"""

import argparse

from siamese_transfer.cli import default_synth_configs, emit_results
from siamese_transfer.data_pipeline import synth_generate
from siamese_transfer.protocols import FINETUNE_PROTOCOLS, ExperimentConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--speakers", type=int, nargs="+", default=[2, 5, 10, 15, 20])
    ap.add_argument("--frozen", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--repetitions", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--parallel", type=int, default=1)
    ap.add_argument("--out", help="write trials/aggregates here")
    args = ap.parse_args()

    cfgs = default_synth_configs()
    source, target = synth_generate(cfgs["source"]), synth_generate(cfgs["target"])
    cfg = ExperimentConfig(protocols=("oodt", *FINETUNE_PROTOCOLS),
                           frozen_layers=tuple(args.frozen),
                           adopted_speaker_counts=tuple(args.speakers),
                           repetitions=args.repetitions, master_seed=args.seed,
                           parallel=args.parallel)
    res = run_experiment(cfg, target, source)
    if args.out:
        emit_results(res, ("csv", "json"), args.out)

    cells = {(a.protocol, a.frozen_layers, a.adopted_speakers): a.uar_mean for a in res.aggregates()}
    head = "".join(f"{k:>7}" for k in args.speakers)
    oodt = [cells.get(("oodt", 0, k)) for k in args.speakers]
    print(f"{'OODT':<14}" + "".join(f"{100 * v:>7.1f}" if v is not None else f"{'-':>7}"
                                    for v in oodt))
    for protocol in FINETUNE_PROTOCOLS:
        print(f"\n{protocol} (rows: frozen layers, columns: adopted speakers)")
        print(f"{'':<14}{head}")
        for f in args.frozen:
            row = [cells.get((protocol, f, k)) for k in args.speakers]
            print(f"{'frozen ' + str(f):<14}" + "".join(
                f"{100 * v:>7.1f}" if v is not None else f"{'-':>7}" for v in row))


if __name__ == "__main__":
    main()
