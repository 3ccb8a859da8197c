"""Overfit the tiny UNet on one 32^3 phantom and print the per-epoch curve."""

import argparse

from phantom_generalization import TINY, phantom_cases

from sparsevox.network import TrainConfig, predict, signal_dice, train

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=6, help="phantom seed")
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--every", type=int, default=10)
    a = ap.parse_args()

    (t, lab), = phantom_cases([a.seed])
    print(f"{len(t)} sites, {int(lab.sum())} signal")

    def show(rec):
        if rec["epoch"] % a.every == 0 or rec["epoch"] == 1:
            print(f"epoch {rec['epoch']:4d}  loss {rec['loss']:.5f}  batch dice {rec['dice']:.4f}  "
                  f"{rec['seconds']:.3f}s")

    ckpt, _ = train([(t, lab)], TrainConfig(lr=a.lr, epochs=a.epochs, batch_size=1), TINY, on_epoch=show)
    print(f"inference dice {signal_dice(predict(ckpt, t), lab):.4f}")
