"""Compare the compiled kernel extension against the numpy fallback.

Shapes mirror the training hot path: (batch * seq, hidden) activations
for GELU/layer norm, (batch * heads * seq, seq) attention rows for the
softmaxes, and full parameter vectors for Adam.

Run from the repository root:

    python benchmarks/bench_kernels.py [--repeats 200]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from nextbasket import _kernels  # noqa: E402


def time_call(fn, args, repeats):
    fn(*args)  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - start) / repeats


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    args = parser.parse_args(argv)

    if "compiled" not in _kernels.available_backends():
        print("compiled kernels are not built; run `python setup.py build_ext --inplace`")
        return 1

    rng = np.random.default_rng(0)
    act = rng.normal(size=(32 * 64, 256))          # ffn activations
    act_grad = rng.normal(size=act.shape)
    attn = rng.normal(size=(32 * 2 * 64, 64))      # attention score rows
    attn_grad = rng.normal(size=attn.shape)
    gain, bias = rng.normal(size=256), rng.normal(size=256)
    hidden = rng.normal(size=(32 * 64, 256))
    params = rng.normal(size=500_000)
    grads = rng.normal(size=params.size)

    numpy_k = _kernels.get_backend("numpy")
    compiled_k = _kernels.get_backend("compiled")
    ln_state = {k.NAME: k.layer_norm_fwd(hidden, gain, bias, 1e-12)
                for k in (numpy_k, compiled_k)}
    attn_probs = {k.NAME: k.softmax_fwd(attn) for k in (numpy_k, compiled_k)}

    cases = [
        ("gelu_fwd", lambda k: k.gelu_fwd(act)),
        ("gelu_bwd", lambda k: k.gelu_bwd(act, act_grad)),
        ("softmax_fwd", lambda k: k.softmax_fwd(attn)),
        ("softmax_bwd", lambda k: k.softmax_bwd(attn_probs[k.NAME], attn_grad)),
        ("log_softmax_fwd", lambda k: k.log_softmax_fwd(attn)),
        ("layer_norm_fwd", lambda k: k.layer_norm_fwd(hidden, gain, bias, 1e-12)),
        ("layer_norm_bwd", lambda k: k.layer_norm_bwd(
            ln_state[k.NAME][1], ln_state[k.NAME][2], gain, act_grad)),
        ("adam_update", lambda k: k.adam_update(
            params.copy(), grads, np.zeros_like(params), np.zeros_like(params),
            1e-3, 0.9, 0.999, 1e-8, 1)),
    ]

    print(f"{'kernel':<16} {'numpy (us)':>12} {'compiled (us)':>14} {'speedup':>9}")
    for name, call in cases:
        t_numpy = time_call(lambda: call(numpy_k), (), args.repeats)
        t_compiled = time_call(lambda: call(compiled_k), (), args.repeats)
        print(f"{name:<16} {t_numpy * 1e6:>12.1f} {t_compiled * 1e6:>14.1f} "
              f"{t_numpy / t_compiled:>8.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
