#!/usr/bin/env python3
"""Independent NumPy re-implementation of the reservoir pipeline.

This exists to separate "property of the method" from "bug in the Rust
implementation": it rebuilds the same architecture from scratch — sparse
recurrence scaled to spectral radius 0.95, dense uniform input weights with
gain, uniform bias, tanh update, washout, ridge readout, closed-loop
feedback — on training/evaluation series produced by the `echostate` CLI,
but with independently drawn reservoirs and NumPy's own linear algebra.

If the closed loop behaves the same way here as in the Rust sweep (for
example, escaping to a spurious attractor at small sampling intervals), the
behavior is a property of the method at that scale, not an implementation
artifact.

Usage:
    echostate generate --system lorenz --si 0.02 --count 5000 --seed 1 --out train.csv
    echostate generate --system lorenz --si 0.02 --count 6000 --seed 2 --out eval.csv
    python3 tools/esn_crosscheck.py --train train.csv --eval eval.csv --reservoirs 6

The evaluation file must be k_buffer + steps long: the first k_buffer
samples are teacher-forced as warmup, the rest are the real continuation the
closed loop is compared against.
"""

import argparse
import csv

import numpy as np


def load_series(path):
    with open(path) as f:
        rows = list(csv.reader(f))[1:]
    return np.array([[float(v) for v in r[1:4]] for r in rows])


def build_reservoir(rng, n, connectivity, spectral_radius, input_weight_range, bias_range):
    nnz = int(round(connectivity * n * n))
    w = np.zeros((n, n))
    pos = rng.choice(n * n, size=nnz, replace=False)
    w.flat[pos] = rng.uniform(-1, 1, size=nnz)
    w *= spectral_radius / max(abs(np.linalg.eigvals(w)))
    w_in = rng.uniform(-input_weight_range, input_weight_range, size=(n, 3))
    b = rng.uniform(-bias_range, bias_range, size=n)
    return w, w_in, b


def run_one(train, eval_series, args, seed):
    rng = np.random.default_rng(seed)
    w, w_in, b = build_reservoir(
        rng, args.n_nodes, args.connectivity, args.spectral_radius,
        args.input_weight_range, args.bias_range,
    )

    def step(x, u):
        return np.tanh(w @ x + args.gain * (w_in @ u) + b)

    x = np.zeros(args.n_nodes)
    states, targets = [], []
    for idx in range(len(train) - 1):
        x = step(x, train[idx])
        if idx >= args.k_buffer:
            states.append(x.copy())
            targets.append(train[idx + 1])
    s, y = np.array(states), np.array(targets)
    w_out = np.linalg.solve(
        s.T @ s + args.ridge_alpha * np.eye(args.n_nodes), s.T @ y
    )

    steps = len(eval_series) - args.k_buffer
    x = np.zeros(args.n_nodes)
    for u in eval_series[:args.k_buffer]:
        x = step(x, u)
    out = []
    yv = x @ w_out
    for _ in range(steps):
        out.append(yv)
        x = step(x, yv)
        yv = x @ w_out
    auto = np.array(out)
    real = eval_series[args.k_buffer:]

    # Occupation-density L1 on a real-covering grid with 5% margin,
    # mirroring the Rust metric (without smoothing, which only matters in
    # nearly empty cells).
    lo, hi = real.min(axis=0), real.max(axis=0)
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    bins = [np.linspace(lo[d], hi[d], args.resolution + 1) for d in range(3)]
    hist_real, _ = np.histogramdd(real, bins=bins)
    hist_auto, _ = np.histogramdd(np.clip(auto, lo, hi - 1e-12), bins=bins)
    l1 = np.abs(hist_real / len(real) - hist_auto / len(auto)).sum()
    tail = auto[-min(1000, len(auto)):]
    return l1, tail


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument('--train', required=True, help='training series CSV from `echostate generate`')
    parser.add_argument('--eval', dest='eval_path', required=True,
                        help='evaluation series CSV (k_buffer warmup + real continuation)')
    parser.add_argument('--reservoirs', type=int, default=6, help='independent reservoir draws')
    parser.add_argument('--n-nodes', type=int, default=500)
    parser.add_argument('--gain', type=float, default=0.2)
    parser.add_argument('--connectivity', type=float, default=0.02)
    parser.add_argument('--spectral-radius', type=float, default=0.95)
    parser.add_argument('--input-weight-range', type=float, default=1.0)
    parser.add_argument('--bias-range', type=float, default=0.3)
    parser.add_argument('--ridge-alpha', type=float, default=0.01)
    parser.add_argument('--k-buffer', type=int, default=1000)
    parser.add_argument('--resolution', type=int, default=20)
    args = parser.parse_args()

    train = load_series(args.train)
    eval_series = load_series(args.eval_path)
    print(f"train {train.shape}, eval {eval_series.shape} "
          f"({args.k_buffer} warmup + {len(eval_series) - args.k_buffer} compared)")
    for seed in range(args.reservoirs):
        l1, tail = run_one(train, eval_series, args, seed)
        print(f"reservoir {seed}: L1={l1:.3f}  "
              f"tail mean=({tail[:, 0].mean():7.2f}, {tail[:, 1].mean():7.2f}, {tail[:, 2].mean():7.2f})  "
              f"tail std=({tail[:, 0].std():6.2f}, {tail[:, 1].std():6.2f}, {tail[:, 2].std():6.2f})")


if __name__ == '__main__':
    main()
