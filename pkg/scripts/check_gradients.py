#!/usr/bin/env python3
"""Gradient spot-check: compare every primitive's backward pass against the
central finite-difference oracle on random small instances and print the
worst per-coordinate error found for each.

    python scripts/check_gradients.py [--instances 20] [--eps 1e-5]
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from cbamnet import ops  # noqa: E402
from cbamnet.attention import cbam_forward, init_cbam  # noqa: E402
from cbamnet.tensor import Tensor, backward, finite_diff_grad  # noqa: E402


def leaf(rng, shape):
    return Tensor(rng.normal(0.0, 0.7, shape), requires_grad=True)


def project(t, seed=123):
    proj = Tensor(np.random.default_rng(seed).normal(size=t.data.shape))
    return ops.total_sum(ops.mul(t, proj))


def cases(rng):
    labels = np.array([0, 2, 1])
    weights = np.array([1.3, 0.7, 1.0])
    yield "conv2d", [leaf(rng, (2, 4, 4, 2)), leaf(rng, (3, 3, 2, 3)), leaf(rng, (3,))], \
        lambda ps: project(ops.conv2d(ps[0], ps[1], ps[2]))
    yield "affine", [leaf(rng, (3, 4)), leaf(rng, (4, 2)), leaf(rng, (2,))], \
        lambda ps: project(ops.affine(*ps))
    yield "batch_norm", [leaf(rng, (4, 3)), leaf(rng, (3,)), leaf(rng, (3,))], \
        lambda ps: project(ops.batch_norm(ps[0], ps[1], ps[2], ops.BatchNormState(3), "train"))
    yield "relu", [leaf(rng, (3, 4))], lambda ps: project(ops.relu(ps[0]))
    yield "sigmoid", [leaf(rng, (3, 4))], lambda ps: project(ops.sigmoid(ps[0]))
    yield "softmax", [leaf(rng, (3, 4))], lambda ps: project(ops.softmax(ps[0]))
    for mode in ("global_avg", "global_max", "channel_avg", "channel_max"):
        yield f"pool[{mode}]", [leaf(rng, (2, 3, 3, 3))], \
            lambda ps, m=mode: project(ops.pool(ps[0], m), 7)
    yield "avg_pool2d", [leaf(rng, (2, 4, 4, 2))], \
        lambda ps: project(ops.avg_pool2d(ps[0]), 9)
    yield "max_pool2d", [leaf(rng, (2, 5, 5, 2))], \
        lambda ps: project(ops.max_pool2d(ps[0]), 9)
    yield "concat_channels", [leaf(rng, (2, 3, 3, 2)), leaf(rng, (2, 3, 3, 3))], \
        lambda ps: project(ops.concat_channels(list(ps)), 11)
    yield "broadcast_mul", [leaf(rng, (2, 3, 3, 4)), leaf(rng, (2, 1, 1, 4))], \
        lambda ps: project(ops.broadcast_mul(ps[0], ps[1]), 12)
    yield "dropout", [leaf(rng, (4, 5))], \
        lambda ps: project(ops.dropout(ps[0], 0.4, "train", np.random.default_rng(99)), 13)
    yield "cross_entropy", [leaf(rng, (3, 3))], \
        lambda ps: ops.weighted_cross_entropy(ops.softmax(ps[0]), labels, weights)

    f = leaf(rng, (1, 3, 3, 4))
    block = init_cbam(4, ratio=2, rng=rng)
    yield "cbam_block", [f, block.channel.w1, block.channel.w2,
                         block.spatial.kernel, block.spatial.bias], \
        lambda ps: project(cbam_forward(f, block), 17)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--instances", type=int, default=20)
    parser.add_argument("--eps", type=float, default=1e-5)
    args = parser.parse_args()

    failures = 0
    names_seen = {}
    for i in range(args.instances):
        rng = np.random.default_rng(1000 + i)
        for name, params, build in cases(rng):
            for p in params:
                p.clear_grad()
            loss = build(params)
            backward(loss)
            numeric = finite_diff_grad(lambda ps: build(ps).item(), params, eps=args.eps)
            worst = -np.inf
            ok = True
            for p, n in zip(params, numeric):
                a = p.grad if p.grad is not None else np.zeros_like(p.data)
                err = np.abs(a - n)
                tol = 1e-4 + 1e-3 * np.abs(n)
                worst = max(worst, float((err - tol).max()))
                ok = ok and bool(np.all(err <= tol))
            prev = names_seen.get(name, (-np.inf, True))
            names_seen[name] = (max(prev[0], worst), prev[1] and ok)
            if not ok:
                failures += 1

    width = max(len(n) for n in names_seen)
    for name, (worst, ok) in names_seen.items():
        status = "ok " if ok else "FAIL"
        print(f"{status} {name:<{width}}  worst (err - tol): {worst:+.3e}")
    print(f"\n{len(names_seen)} primitives x {args.instances} instances, "
          f"{failures} failing instance(s)")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
