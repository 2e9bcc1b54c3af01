"""Compress a small synthetic MoE with REAM and the pruning baselines.

Run: python3 demos/quickstart.py
"""

import logging

import numpy as np

from ream import (
    MixtureRatio,
    RedundancyPlan,
    baseline_config,
    build_mixture,
    compress_model,
    domain_generators,
    domain_tokens,
    fidelity,
    synth_model,
)

logging.disable(logging.WARNING)


def main():
    seed = 0
    plan = RedundancyPlan(base_experts=8, clones_per_base=2, noise_scale=0.02, permute_hidden=True)
    model = synth_model(32, 64, 4, 16, 2, plan, seed)
    gens = domain_generators(model.d_model, seed)
    calib = build_mixture(MixtureRatio(0.0, 0.3, 0.7), 2048, seed, gens)
    held = np.concatenate([domain_tokens(gens, d, 256, seed + 1) for d in ("general", "math", "code")])

    print(f"{'method':8s} {'experts':>7s} {'pre-logit mse':>14s} {'explained':>10s}")
    for name in ("freq", "reap", "hcsmoe", "ream"):
        compressed, report = compress_model(model, calib, baseline_config(name, 8))
        fid = fidelity(model, compressed, held)
        print(f"{name:8s} {compressed.num_experts:7d} {fid.pre_logit_mse:14.4e} {fid.explained:10.4f}")
    print()
    print("REAM plan for layer 0:")
    print(report.layers[0].plan.dump())


if __name__ == "__main__":
    main()
