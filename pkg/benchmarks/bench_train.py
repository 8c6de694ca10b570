"""Training throughput of the compiled kernel against the numpy fallback.

    python benchmarks/bench_train.py --users 1000 --items 1000 --dim 100 --epochs 3

Every backend trains the same synthetic graph from the same seed; the script
reports triplets per second and the largest difference between the learned
tables, which should sit at rounding level in deterministic mode.
"""
import argparse
import os
import time

import numpy as np

from ecfkg import Hyperparams, backend, train
from ecfkg.ingest import SyntheticConfig, generate_synthetic


def run(kg, hp, name, repeats):
    best = float("inf")
    model = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        model, _ = train(kg, hp, backend=name)
        best = min(best, time.perf_counter() - t0)
    return model, best


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--users", type=int, default=1000)
    p.add_argument("--items", type=int, default=1000)
    p.add_argument("--purchases", type=int, default=20, help="purchases per user")
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--repeats", type=int, default=3, help="best-of-N timing")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="threads for the fast-mode rows")
    args = p.parse_args(argv)

    cfg = SyntheticConfig(num_users=args.users, num_items=args.items,
                          purchases_per_user=args.purchases, num_words=256, num_brands=64)
    kg, _ = generate_synthetic(cfg)
    n = len(kg) * args.epochs
    print(f"graph: {kg}")
    print(f"dim={args.dim} epochs={args.epochs} batch={args.batch} triplets/run={n}\n")

    rows = []
    models = {}
    for name in backend.available():
        hp = Hyperparams(dim=args.dim, epochs=args.epochs, batch_size=args.batch)
        models[name], secs = run(kg, hp, name, args.repeats)
        rows.append((name, "deterministic", 1, secs))
        if args.threads > 1 or name == "cython":
            fast = Hyperparams(dim=args.dim, epochs=args.epochs, batch_size=args.batch,
                               mode="fast", threads=args.threads)
            _, secs = run(kg, fast, name, args.repeats)
            rows.append((name, "fast", args.threads, secs))

    base = next(s for b, m, _, s in rows if b == "python" and m == "deterministic")
    print(f"{'backend':<8} {'mode':<14} {'threads':>7} {'seconds':>9} {'triplets/s':>12} {'speedup':>8}")
    for name, mode, threads, secs in rows:
        print(f"{name:<8} {mode:<14} {threads:>7} {secs:>9.3f} {n / secs:>12,.0f} {base / secs:>7.1f}x")
    if len(models) == 2:
        diff = np.max(np.abs(models["cython"].E - models["python"].E))
        print(f"\nmax |E_cython - E_python| after training: {diff:.2e}")


if __name__ == "__main__":
    main()
