"""Train the tiny UNet on 20 phantoms and score pooled signal Dice on 5 held-out ones."""

import argparse
import json
import time

from sparsevox.metrics import aggregate, confusion, dice
from sparsevox.network import TrainConfig, UNetConfig, predict, train
from sparsevox.sparse_tensor import QuantizationPolicy, from_voxels, quantize
from sparsevox.sparsify import HuRange, apply_range
from sparsevox.volume_io import generate_phantom, kidney_phantom_spec

TINY = UNetConfig(widths=(8, 16), encoder_blocks=(1, 1), decoder_blocks=(1, 1), stem_channels=8)


def phantom_cases(seeds, dims=(32, 32, 32)):
    out = []
    for s in seeds:
        vs = apply_range(generate_phantom(kidney_phantom_spec(dims, seed=s)), HuRange(-30, 350))
        out.append(quantize(from_voxels(vs), QuantizationPolicy(3), vs.labels))
    return out


def run(n_train=20, n_test=5, epochs=60, lr=3e-3, batch_size=2, seed=0, base_seed=1000):
    train_set = phantom_cases(range(base_seed, base_seed + n_train))
    test_set = phantom_cases(range(base_seed + n_train, base_seed + n_train + n_test))
    t0 = time.perf_counter()
    ckpt, hist = train(train_set, TrainConfig(lr=lr, epochs=epochs, batch_size=batch_size, seed=seed), TINY)
    counts = [confusion(predict(ckpt, t), lab) for t, lab in test_set]
    rep = aggregate(counts, [dice(c) for c in counts])
    return {"pooled_dice": rep.dice, "mean_case_dice": rep.mean_case_dice, "train_seconds": time.perf_counter() - t0,
            "final_loss": hist[-1]["loss"], "train_dice": hist[-1]["dice"]}


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--batch-size", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    print(json.dumps(run(epochs=a.epochs, lr=a.lr, batch_size=a.batch_size, seed=a.seed), indent=1))
