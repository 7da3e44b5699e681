"""Compiled vs numpy kernel timings, plus one end-to-end training epoch per backend.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]
"""
import argparse
import json
import time
import timeit

import numpy as np

from tsimta import kernels


def _cases(rng):
    # shapes seen in a batch of 16 patients with ~20 events, d_model 32
    x = rng.normal(size=(16 * 21, 21))
    mask = (rng.random(x.shape) < 0.7).astype(np.uint8)
    mask[:, 0] = 1
    y, _ = kernels._pykernels.softmax_masked_fwd(x, mask)
    gy = rng.normal(size=x.shape)
    h = rng.normal(size=(16 * 21, 32))
    gamma, beta = rng.normal(size=32), rng.normal(size=32)
    _, xhat, rstd = kernels._pykernels.layer_norm_fwd(h, gamma, beta, 1e-5)
    t = np.sort(np.floor(rng.uniform(-90, 365, size=(16, 21))), axis=1)
    valid = (rng.random((16, 21)) < 0.8).astype(np.uint8)
    scores = np.round(rng.normal(size=600), 2)
    return {
        "softmax_masked_fwd": (x, mask),
        "softmax_masked_bwd": (y, gy),
        "layer_norm_fwd": (h, gamma, beta, 1e-5),
        "layer_norm_bwd": (rng.normal(size=h.shape), xhat, rstd, gamma),
        "causal_time_grid": (t, valid),
        "midrank": (scores,),
    }


def bench_kernels(repeat):
    cases = _cases(np.random.default_rng(0))
    out = {}
    for name, args in cases.items():
        row = {}
        for backend in kernels.available_backends():
            fn = getattr(kernels._BACKENDS[backend], name)
            n, _ = timeit.Timer(lambda: fn(*args)).autorange()
            best = min(timeit.repeat(lambda: fn(*args), number=n, repeat=repeat)) / n
            row[backend] = best * 1e6
        out[name] = row
    return out


def bench_epoch():
    from tsimta.synthgen import SynthConfig, generate
    from tsimta.training import RunConfig, split_cohort, preprocess_fold, train_variant

    records, _ = generate(SynthConfig(n_patients=200, seed=5))
    cfg = RunConfig(epochs=1)
    split = split_cohort(records, cfg.k_folds, cfg.seed)
    stats, train, _ = preprocess_fold(split, 0)
    out = {}
    for backend in kernels.available_backends():
        kernels.set_backend(backend)
        t0 = time.perf_counter()
        train_variant(cfg, train, stats, 0)
        out[backend] = time.perf_counter() - t0
    kernels.set_backend("compiled" if "compiled" in kernels.available_backends() else "python")
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args()
    if "compiled" not in kernels.available_backends():
        print("compiled backend not built; timing the numpy fallback only")
    res = {"kernels_us": bench_kernels(args.repeat), "epoch_s": bench_epoch()}
    backends = kernels.available_backends()
    print(f"{'kernel':<22}" + "".join(f"{b + ' (us)':>16}" for b in backends) + f"{'speedup':>10}")
    for name, row in res["kernels_us"].items():
        sp = row["python"] / row["compiled"] if "compiled" in row else float("nan")
        print(f"{name:<22}" + "".join(f"{row[b]:>16.1f}" for b in backends) + f"{sp:>10.2f}")
    ep = res["epoch_s"]
    print("one ConcatSA epoch, ~130 patients: " + ", ".join(f"{b} {ep[b]:.2f}s" for b in backends))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(res, fh, indent=1, sort_keys=True)


if __name__ == "__main__":
    main()
