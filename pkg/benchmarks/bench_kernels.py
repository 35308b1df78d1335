"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--n 200000] [--repeat 5]

Each row is the best of ``repeat`` runs; outputs of the two backends are
checked for exact agreement before timing.
"""
import argparse
import timeit

import numpy as np

from causalpo import kernels
from causalpo.outcome_model import OutcomeModel
from causalpo.policy import random_policy
from causalpo.textspace import Vocab


def cases(n, rng):
    vocab = Vocab(8, 16)
    policy = random_policy(vocab, rng, order=2, scale=1.0)
    texts = policy.sample(rng, n)
    coef = rng.standard_normal(n)
    ghat = OutcomeModel(vocab, rng.standard_normal(vocab.feature_dim(2)), 2, 0.0)
    seed = int(rng.integers(2**31))
    return {
        "log_prob_batch": lambda: policy.log_prob_batch(texts),
        "score_sum": lambda: policy.score_sum(texts, coef),
        "sample": lambda: policy.sample(np.random.default_rng(seed), n),
        "linear_score": lambda: ghat.predict(texts),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=200_000, help="texts per call")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; timing the fallback only")
    rng = np.random.default_rng(0)
    fns = cases(args.n, rng)
    timings = {}
    outputs = {}
    for backend in backends:
        kernels.use_backend(backend)
        for name, fn in fns.items():
            outputs[backend, name] = fn()
            timings[backend, name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
    print(f"n={args.n}, best of {args.repeat}")
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in backends) + ("     speedup  same" if len(backends) > 1 else ""))
    for name in fns:
        row = f"{name:<16}" + "".join(f"{timings[b, name] * 1e3:>10.2f}ms" for b in backends)
        if len(backends) > 1:
            same = np.array_equal(outputs["cython", name], outputs["python", name])
            row += f"{timings['python', name] / timings['cython', name]:>11.1f}x  {'yes' if same else 'NO'}"
        print(row)


if __name__ == "__main__":
    main()
