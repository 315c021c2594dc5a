"""Times the numba-compiled kernels against their pure-numpy twins.

Both flavours are imported directly from ``scoredrive.backend``, so this
runs regardless of the SCOREDRIVE_NUMBA flag. Workloads mirror the hot
paths: batched training passes, single-input planning passes, and the
sequential bicycle integration.

Usage: python benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import time

import numpy as np

from scoredrive import backend, nets


def time_fn(fn, args, repeats, warmup=3):
    for _ in range(warmup):
        fn(*args)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_case(name, np_fn, nb_fn, args, repeats):
    t_np = time_fn(np_fn, args, repeats)
    if nb_fn is None:
        print(f"{name:28s} numpy {t_np * 1e6:9.1f} us   numba unavailable")
        return
    t_nb = time_fn(nb_fn, args, repeats)
    print(
        f"{name:28s} numpy {t_np * 1e6:9.1f} us   numba {t_nb * 1e6:9.1f} us   "
        f"speedup {t_np / t_nb:5.2f}x"
    )


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    spec = nets.NetworkSpec(input_dim=89, hidden=(256, 256), output_dim=48)
    params = nets.init_params(spec, rng)
    dims = spec.dims

    print(f"numba available: {backend.HAS_NUMBA}, package uses numba: {backend.USE_NUMBA}\n")

    for batch, label in ((256, "training batch"), (1, "planning call")):
        x = np.ascontiguousarray(rng.normal(size=(batch, spec.input_dim)))
        up = np.ascontiguousarray(rng.normal(size=(batch, spec.output_dim)))
        acts = np.empty((batch, backend.n_units(dims)))
        bench_case(
            f"mlp forward ({label})",
            backend.mlp_forward_np,
            backend.mlp_forward_nb,
            (dims, params, x, 0, 1.0),
            args.repeats,
        )
        backend.mlp_forward_acts_np(dims, params, x, 0, 1.0, acts)
        bench_case(
            f"mlp reverse ({label})",
            backend.mlp_vjp_from_acts_np,
            backend.mlp_vjp_from_acts_nb,
            (dims, params, acts, up, 0, 1.0),
            args.repeats,
        )

    accels = rng.uniform(-4, 4, size=16)
    steers = rng.uniform(-0.5, 0.5, size=16)
    rollout_args = (0.0, 0.0, 0.0, 10.0, accels, steers, 0.5, 3.0, 15.0)

    def rollout_np_many(*a):
        for _ in range(100):
            backend.bicycle_rollout_np(*a)

    def rollout_nb_many(*a):
        for _ in range(100):
            backend.bicycle_rollout_nb(*a)

    bench_case(
        "bicycle rollout (x100)",
        rollout_np_many,
        rollout_nb_many if backend.HAS_NUMBA else None,
        rollout_args,
        args.repeats,
    )


if __name__ == "__main__":
    main()
