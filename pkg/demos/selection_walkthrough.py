"""Walk one clip through the key-frame mining layer, printing every stage.

Shows the per-frame attention weights, the cosine scores against the
attention-weighted aggregate, the mean threshold with the resulting gate,
and the two selection losses. A second pass uses a constant clip to force
the fallback path (no score clears the mean, so the earliest best frame is
kept alone).
"""

import numpy as np

from akmnet import tensor as T
from akmnet.rng import RngStream
from akmnet.selection import RoutingAudit, init_akm_params, mine


def describe(feats, params, title):
    print(f"\n=== {title} ===")
    t_len = feats.shape[0]
    key, sel, losses = mine(T.Tensor(feats, requires_grad=True), params)
    beta = sel.beta.data
    mean = beta.mean()
    print(f"frames: {t_len}   threshold (mean beta): {mean:+.4f}")
    print(f"{'frame':>5} {'alpha':>8} {'beta':>8}  kept")
    for t in range(t_len):
        mark = "*" if (t + 1) in sel.indices else ""
        print(f"{t + 1:>5} {sel.alpha.data[t]:>8.4f} {beta[t]:>+8.4f}  {mark}")
    print(f"selected {len(sel.indices)}/{t_len}: {sel.indices}"
          f"{'   (fallback)' if sel.fallback else ''}")
    print(f"sparsity loss {float(losses.sparsity.data):.4f}   "
          f"margin loss {float(losses.margin.data):.4f}   "
          f"combined {float(losses.combined.data):.4f}")
    return key, losses


def main():
    rng = RngStream(7)
    channels = 6
    params = init_akm_params(channels, rng.child("akm"))

    feats = rng.normal((8, channels, 2, 2))
    key, losses = describe(feats, params, "random 8-frame clip")

    # flat clip: every cosine equals every other, nothing beats the mean
    flat = np.broadcast_to(feats[0], (5,) + feats[0].shape).copy()
    describe(flat, params, "constant 5-frame clip (fallback)")

    # every backward through the gather re-checks the straight-through
    # routing bit for bit; the audit counters prove the check ran
    before_passes, _ = RoutingAudit.snapshot()
    T.add(T.sum_(key.features), losses.combined).backward()
    after_passes, violations = RoutingAudit.snapshot()
    print(f"\nrouting audits: {after_passes - before_passes} new pass(es), "
          f"{violations} violation(s) total")


if __name__ == "__main__":
    main()
