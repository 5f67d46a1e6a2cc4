"""Train every frame-selection policy briefly on one small set.

The learned miner competes against its own ablations (attention only,
cosine only, and so on) and against the fixed alternatives: keep all
frames, resample to a fixed length, keep a random subset, keep the tail.
Three epochs on 8 clips is nowhere near convergence; the point is the
harness, and how differently the policies spend the same frame budget.
"""

import logging
import warnings

from akmnet.data import SynthSpec, synth_generate
from akmnet.evaluate import evaluate_fold
from akmnet.model import build_model
from akmnet.rng import RngStream
from akmnet.train import TrainConfig, train
from akmnet.variants import make_variant

logging.getLogger("akmnet.selection").setLevel(logging.ERROR)

VARIANTS = ("s123", "s12", "s13", "s23",
            "va-all", "va-norm16", "va-norm32", "va-random", "va-last10")


def main():
    dataset = synth_generate(SynthSpec(seed=21), n_clips=8, n_subjects=4)

    print(f"{'variant':>12} {'acc':>5} {'kept/clip':>9}")
    for name in VARIANTS:
        model = build_model(policy=make_variant(name), seed=17)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")   # va-random clamps short clips
            train(model, dataset.clips,
                  TrainConfig(epochs=3, batch_size=8, seed=17))
            fold = evaluate_fold(model, dataset.clips, 4,
                                 rng=RngStream(17).child(f"eval-{name}"))
        kept = sum(r.n_selected for r in fold.records) / len(fold.records)
        print(f"{name:>12} {fold.accuracy:>5.2f} {kept:>9.1f}")


if __name__ == "__main__":
    main()
