"""Finite-difference verification of analytic gradients.

Central differences at 64-bit precision against every differentiable op and
a miniature end-to-end prior network. Used by the test suite and by the
`dap gradcheck` subcommand.
"""

from __future__ import annotations

import numpy as np

from . import nn, tensor
from .tensor import Rng, Tape, Tensor, backward

FD_STEP = 1e-5


def numeric_grad(fn, x: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of scalar fn() w.r.t. every element of x."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def analytic_grad(fn, x: Tensor) -> np.ndarray:
    x.zero_grad()
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    return np.zeros_like(x.data) if x.grad is None else x.grad.copy()


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = max(np.abs(n).max(), np.abs(a).max(), 1e-12)
    return float(np.abs(a - n).max() / denom)


def check(fn, params, h: float = FD_STEP) -> float:
    """Max relative error between analytic and numeric grads over `params`.

    fn must rebuild the graph (and the scalar loss) on every call.
    """
    worst = 0.0
    for p in params:
        analytic = analytic_grad(fn, p)
        numeric = numeric_grad(lambda: fn().item(), p, h=h)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _away_from_kinks(rng: Rng, shape, margin: float = 0.05) -> np.ndarray:
    """Random values with |x| >= margin, so kinked ops are locally smooth."""
    x = rng.normal_array(shape)
    x = np.where(np.abs(x) < margin, np.sign(x) * margin + np.where(x == 0, margin, 0.0), x)
    return x


def op_suites(seed: int = 2024) -> list[tuple[str, float]]:
    """(name, max relative error) for every differentiable op, at 64-bit."""
    rng = Rng(seed)
    results = []

    x = Tensor(rng.normal_array((1, 3, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal_array((4, 3, 3, 3)) * 0.5, requires_grad=True)
    b = Tensor(rng.normal_array((4,)) * 0.1, requires_grad=True)
    t = Tensor(rng.normal_array((1, 4, 6, 6)))
    for d in (1, 2):
        err = check(lambda d=d: tensor.mse(tensor.conv2d(x, w, b, dilation=d), t), [x, w, b])
        results.append((f"conv2d_dilation{d}", err))

    xp = Tensor(_away_from_kinks(rng, (1, 2, 6, 6)), requires_grad=True)
    tp = Tensor(rng.normal_array((1, 2, 3, 3)))
    results.append(("maxpool2", check(lambda: tensor.mse(tensor.maxpool2(xp), tp), [xp])))

    xu = Tensor(rng.normal_array((1, 2, 3, 4)), requires_grad=True)
    tu = Tensor(rng.normal_array((1, 2, 6, 8)))
    results.append(("upsample_bilinear2",
                    check(lambda: tensor.mse(tensor.upsample_bilinear2(xu), tu), [xu])))

    xa = Tensor(rng.normal_array((1, 2, 4, 4)), requires_grad=True)
    xb = Tensor(rng.normal_array((1, 3, 4, 4)), requires_grad=True)
    tc = Tensor(rng.normal_array((1, 5, 4, 4)))
    results.append(("concat_channels",
                    check(lambda: tensor.mse(tensor.concat_channels(xa, xb), tc), [xa, xb])))

    xl = Tensor(_away_from_kinks(rng, (2, 3, 4, 4)), requires_grad=True)
    tl = Tensor(rng.normal_array((2, 3, 4, 4)))
    results.append(("leaky_relu",
                    check(lambda: tensor.mse(tensor.leaky_relu(xl, 0.2), tl), [xl])))

    xs = Tensor(rng.normal_array((2, 2, 3, 3)), requires_grad=True)
    ts = Tensor(rng.uniform_array((2, 2, 3, 3)))
    results.append(("sigmoid", check(lambda: tensor.mse(tensor.sigmoid(xs), ts), [xs])))

    p = Tensor(rng.normal_array((1, 2, 4, 4)), requires_grad=True)
    q = Tensor(rng.normal_array((1, 2, 4, 4)), requires_grad=True)
    results.append(("mse", check(lambda: tensor.mse(p, q), [p, q])))

    m = Tensor((rng.uniform_array((1, 2, 4, 4)) > 0.5).astype(np.float64))
    results.append(("masked_mse", check(lambda: tensor.masked_mse(p, q, m), [p, q])))

    results.append(("add_mul_mean", check(
        lambda: tensor.mean(p * q + p * 0.5 - q), [p, q])))

    mask1 = Tensor(rng.uniform_array((1, 1, 4, 4)), requires_grad=True)
    results.append(("broadcast_mul", check(
        lambda: tensor.mse(tensor.mul(mask1, p), q), [mask1, p])))

    xm = Tensor(_away_from_kinks(rng, (1, 2, 5, 5), margin=0.2), requires_grad=True)
    tm = Tensor(rng.normal_array((1, 1, 5, 5)))
    results.append(("channel_magnitude",
                    check(lambda: tensor.mse(tensor.channel_magnitude(xm), tm), [xm])))

    return results


def end_to_end(seed: int = 7) -> float:
    """Gradient error of a miniature U-Net (width 1/7, 2x8x8 latent) at 64-bit."""
    rng = Rng(seed)
    spec = nn.UNetSpec(in_channels=2, out_channels=1, width_scale=1.0 / 7.0,
                       variant=nn.DilatedExpDense())
    net = nn.build_unet(spec, Rng(tensor.derive_seed(seed, 1)), dtype=np.float64)
    z = Tensor(rng.uniform_array((1, 2, 8, 8)) * 0.1)
    target = Tensor(rng.normal_array((1, 1, 8, 8)))

    def loss_fn():
        return tensor.mse(nn.forward(net, z), target)

    return check(loss_fn, net.parameters())


def run_all(verbose: bool = True) -> bool:
    """Run every suite; True iff all pass their tolerances."""
    ok = True
    for name, err in op_suites():
        passed = err < 1e-4
        ok &= passed
        if verbose:
            print(f"gradcheck {name:<20} rel_err={err:.3e}  {'pass' if passed else 'FAIL'}")
    e2e = end_to_end()
    passed = e2e < 1e-3
    ok &= passed
    if verbose:
        print(f"gradcheck {'end_to_end_unet':<20} rel_err={e2e:.3e}  {'pass' if passed else 'FAIL'}")
    return ok
