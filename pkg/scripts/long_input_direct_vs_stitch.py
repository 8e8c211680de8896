"""Compare one-pass inference with oracle-stitched 5 s segments on long held-out recordings.

Trains the toy model first unless ``--checkpoint`` is given.
"""
import argparse

import numpy as np

from ftrnn.metrics import eval_si_sdr
from ftrnn.model import load_checkpoint, separate
from ftrnn.stitch import separate_stitched
from ftrnn.toy import long_toy_set, toy_overfit


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint")
    ap.add_argument("--lengths", type=float, nargs="+", default=[4.0, 12.0, 24.0, 48.0])
    ap.add_argument("--recordings", type=int, default=3)
    ap.add_argument("--segment-s", type=float, default=5.0)
    ap.add_argument("--overlap", type=float, default=0.2)
    args = ap.parse_args()

    model = load_checkpoint(args.checkpoint) if args.checkpoint else toy_overfit().model
    rate = model.config.sample_rate
    print(f"{'length_s':>8} {'unprocessed':>11} {'direct':>8} {'stitched':>8}")
    for length in args.lengths:
        rows = []
        for mixture, refs in long_toy_set(args.recordings, seed=11, length_s=length):
            unp = eval_si_sdr(refs, np.stack([mixture] * len(refs)))[0]
            direct = eval_si_sdr(refs, separate(model, mixture))[0]
            est, _, _ = separate_stitched(lambda x: separate(model, x), mixture, refs, args.segment_s,
                                          args.overlap, rate)
            rows.append((unp, direct, eval_si_sdr(refs, est)[0]))
        u, d, s = np.mean(rows, axis=0)
        print(f"{length:8.0f} {u:11.2f} {d:8.2f} {s:8.2f}", flush=True)


if __name__ == "__main__":
    main()
