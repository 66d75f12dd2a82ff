"""Compare the compiled and numpy kernel backends on batched log-prob, gradient and sampling.

    python benchmarks/bench_kernels.py [--batch 4096] [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from ccalab.kernels import compiled_impl, python_impl
from ccalab.model import TabularARModel
from ccalab.space import SequenceSpace

SPACES = (SequenceSpace(3, 2, 3), SequenceSpace(4, 3, 4), SequenceSpace(8, 4, 8))


def bench(space, batch, repeat):
    rng = np.random.default_rng(0)
    model = TabularARModel.random(space, rng)
    conds = rng.integers(0, space.num_conditions, size=batch).astype(np.int64)
    tokens = rng.integers(0, space.vocab_size, size=(batch, space.seq_len)).astype(np.int64)
    weights = rng.standard_normal(batch)
    u = rng.random((batch, space.seq_len))
    out = np.zeros_like(model.logits)
    args = (model.logits, model.offsets, space.vocab_size)
    ops = {
        "log_prob": lambda k: k.batch_log_prob(*args, conds, tokens),
        "grad": lambda k: k.batch_grad(*args, conds, tokens, weights, out),
        "sample": lambda k: k.batch_sample(*args, conds, u),
    }
    rows = []
    for name, op in ops.items():
        t_py = min(timeit.repeat(lambda: op(python_impl), number=1, repeat=repeat))
        t_c = min(timeit.repeat(lambda: op(compiled_impl), number=1, repeat=repeat)) if compiled_impl else float("nan")
        rows.append((name, t_py, t_c))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=4096)
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    if compiled_impl is None:
        print("compiled kernels not built; only the numpy backend is timed")
    print(f"{'space (V,N,C)':<14} {'kernel':<9} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for space in SPACES:
        for name, t_py, t_c in bench(space, args.batch, args.repeat):
            tag = f"({space.vocab_size},{space.seq_len},{space.num_conditions})"
            print(f"{tag:<14} {name:<9} {1e3 * t_py:>10.3f} {1e3 * t_c:>10.3f} {t_py / t_c:>7.1f}x")


if __name__ == "__main__":
    main()
