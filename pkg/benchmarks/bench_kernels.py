"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 32] [--width 32]

Shapes follow a ConvNet on 16x16 RGB blob-digits. Each kernel is also
checked for bit-identical output before it is timed. The last block times a
full forward+backward ConvNet step under each backend in a subprocess, since
the backend is chosen once at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedvirt import _kernels as K

STEP = """
import time
import numpy as np
from fedvirt import tensor as T
from fedvirt.losses import cross_entropy
from fedvirt.models import convnet_init, predict_logits
p = convnet_init(3, 4, {width}, 16, seed=0)
x = np.random.default_rng(0).uniform(size=({batch}, 3, 16, 16))
y = np.arange({batch}) % 4
def step():
    leaves = p.tensors(requires_grad=True)
    loss = cross_entropy(predict_logits(p, T.Tensor(x), leaves), y).value
    T.backward(loss, list(leaves.values()))
step()
best = float("inf")
for _ in range({repeat}):
    t = time.perf_counter(); step(); best = min(best, time.perf_counter() - t)
print(best)
"""


def best_of(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(batch, width):
    rng = np.random.default_rng(0)
    cases = []
    for c, side in ((3, 16), (width, 8), (width, 4)):
        x = rng.standard_normal((batch, c, side, side))
        cols = K.im2col_numpy(x, 3, 3, 1, 1)
        g = rng.standard_normal((batch, c, side // 2, side // 2))
        tag = f"{c}x{side}x{side}"
        cases += [
            (f"im2col   {tag}", lambda x=x: K.im2col_numba(x, 3, 3, 1, 1), lambda x=x: K.im2col_numpy(x, 3, 3, 1, 1)),
            (f"col2im   {tag}", lambda c_=cols, s=x.shape: K.col2im_numba(c_, s, 3, 3, 1, 1),
             lambda c_=cols, s=x.shape: K.col2im_numpy(c_, s, 3, 3, 1, 1)),
            (f"avgpool  {tag}", lambda x=x: K.avgpool_numba(x, 2), lambda x=x: K.avgpool_numpy(x, 2)),
            (f"unpool   {tag}", lambda g=g, s=x.shape: K.avgunpool_numba(g, 2, s),
             lambda g=g, s=x.shape: K.avgunpool_numpy(g, 2, s)),
        ]
    return cases


def step_time(backend, batch, width, repeat):
    env = dict(os.environ, FEDVIRT_KERNELS=backend)
    code = STEP.format(batch=batch, width=width, repeat=repeat)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--width", type=int, default=32)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not available (or FEDVIRT_KERNELS=numpy); nothing to compare")
        return 1
    print(f"{'kernel':<24}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fast, slow in kernel_cases(args.batch, args.width):
        assert fast().tobytes() == slow().tobytes(), f"{name}: backends disagree"
        tf, ts = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<24}{1e3 * tf:>10.3f}{1e3 * ts:>10.3f}{ts / tf:>8.2f}x")
    tf = step_time("numba", args.batch, args.width, args.repeat)
    ts = step_time("numpy", args.batch, args.width, args.repeat)
    print(f"{'convnet fwd+bwd step':<24}{1e3 * tf:>10.3f}{1e3 * ts:>10.3f}{ts / tf:>8.2f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
