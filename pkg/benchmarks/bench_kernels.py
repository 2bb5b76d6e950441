"""Time the numba kernels against their numpy twins on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both variants are imported directly, so the LAMBDAFLOW_NUMBA switch does not
matter here. Each row also checks that the two variants agree.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from lambdaflow import kernels as k
from lambdaflow import simworld as sw


def _cases(rng):
    scores = rng.normal(size=(32, 4, 48, 48))
    vis = np.tril(np.ones((48, 48), dtype=bool))
    probs = k.masked_softmax_fwd_np(scores, vis)
    grad = rng.normal(size=probs.shape)
    x = rng.normal(size=(32, 48, 64))
    xhat, inv = k.layernorm_fwd_np(x, 1e-6)
    gx = rng.normal(size=x.shape)
    stamps = np.sort(rng.uniform(0, 100, size=5000))
    ticks = np.arange(0, 100, 1 / 30)
    task = sw.default_task(sw.FORK_REACH)
    params = sw.draw_episodes(task, 200, np.random.default_rng(0))
    return {
        "masked softmax fwd": (k.masked_softmax_fwd_nb, k.masked_softmax_fwd_np, (scores, vis)),
        "softmax bwd": (k.softmax_bwd_nb, k.softmax_bwd_np, (probs, grad)),
        "layernorm fwd": (k.layernorm_fwd_nb, k.layernorm_fwd_np, (x, 1e-6)),
        "layernorm bwd": (k.layernorm_bwd_nb, k.layernorm_bwd_np, (xhat, inv, gx)),
        "gelu": (k.gelu_nb, k.gelu_np, (x,)),
        "visibility (T=30, w=6)": (k.visibility_nb, k.visibility_np, (2, 5, 25, 6, True)),
        "nearest timestamp": (k.nearest_indices_nb, k.nearest_indices_np, (stamps, ticks)),
        "expert simulation x200": (lambda: sw.simulate_expert(task, params, use_numba=True),
                                   lambda: sw.simulate_expert(task, params, use_numba=False), ()),
    }


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-10, atol=1e-12)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':26s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  agree")
    for name, (fast, ref, inputs) in _cases(rng).items():
        fast(*inputs)  # compile outside the timed region
        agree = _same(fast(*inputs), ref(*inputs))
        t_nb = min(timeit.repeat(lambda: fast(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_np = min(timeit.repeat(lambda: ref(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:26s} {t_nb:10.3f} {t_np:10.3f} {t_np / t_nb:7.1f}x  {'yes' if agree else 'NO'}")


if __name__ == "__main__":
    main()
