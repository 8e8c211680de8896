"""Train the tiny model on 20 toy mixtures and report the SI-SDR gain on the training set."""
import argparse
import json
from dataclasses import replace

from ftrnn.model import save_checkpoint
from ftrnn.toy import TOY_TRAIN, toy_overfit


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=TOY_TRAIN.max_steps)
    ap.add_argument("--lr", type=float, default=TOY_TRAIN.lr)
    ap.add_argument("--batch-size", type=int, default=TOY_TRAIN.batch_size)
    ap.add_argument("--mixtures", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0, help="data seed")
    ap.add_argument("--save", help="write the trained model to this checkpoint path")
    args = ap.parse_args()

    cfg = replace(TOY_TRAIN, max_steps=args.steps, lr=args.lr, batch_size=args.batch_size)
    res = toy_overfit(args.mixtures, data_seed=args.seed, train_cfg=cfg,
                      log=lambda line: print(line, flush=True) if line.startswith("{") else None)
    print(json.dumps({"unprocessed_si_sdr": round(res.unprocessed_si_sdr, 3),
                      "trained_si_sdr": round(res.trained_si_sdr, 3),
                      "improvement_db": round(res.improvement, 3),
                      "steps": res.steps, "wall_s": round(res.wall_s, 1)}))
    if args.save:
        save_checkpoint(res.model, args.save)


if __name__ == "__main__":
    main()
