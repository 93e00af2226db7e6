"""Central finite-difference checks of every differentiable op and of the full model."""

from __future__ import annotations

import dataclasses
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import functional as F
from .losses import asymmetric_loss, bce_with_logits
from .model import ModelConfig, build_model, forward_full
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-8


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, step: float = STEP,
                 coords: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """d fn / d arr by central differences, perturbing ``arr`` in place.

    Only ``coords`` are evaluated when given; other entries are left as nan.
    """
    out = np.full(arr.shape, np.nan) if coords is not None else np.zeros(arr.shape)
    for idx in (coords if coords is not None else np.ndindex(arr.shape)):
        orig = arr[idx]
        arr[idx] = orig + step
        fp = fn()
        arr[idx] = orig - step
        fm = fn()
        arr[idx] = orig
        out[idx] = (fp - fm) / (2.0 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    """max |a - n| / max(|a|, |n|) over entries where |a| + |n| >= floor."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = ~np.isnan(n) & (np.abs(a) + np.abs(n) >= floor)
    if not keep.any():
        return 0.0
    a, n = a[keep], n[keep]
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), np.abs(n))))


def check(build: Callable[[List[Tensor]], Tensor], inputs: List[Tensor], step: float = STEP,
          max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Worst relative error over all inputs of the scalar function ``build(inputs)``.

    With ``max_coords`` only that many random entries per input are differenced.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    build(inputs).backward()
    worst = 0.0
    for t in inputs:
        coords = None
        if max_coords is not None and t.size > max_coords:
            flat = (rng or np.random.default_rng(0)).choice(t.size, size=max_coords, replace=False)
            coords = [np.unravel_index(i, t.shape) for i in flat]
        num = numeric_grad(lambda: build(inputs).item(), t.data, step, coords)
        ana = t.grad if t.grad is not None else np.zeros(t.shape)
        worst = max(worst, relative_error(ana, num))
    return worst


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * Tensor(w)).sum()


def op_checks(seed: int = 0) -> Dict[str, float]:
    """Worst relative error per op on random float64 inputs."""
    rng = np.random.default_rng(seed)
    r = lambda *shape: rng.normal(size=shape)  # noqa: E731
    res: Dict[str, float] = {}

    for k, stride, pad in [(1, 1, 0), (3, 1, 1), (5, 1, 2), (3, 2, 1), (3, 2, 0), (5, 2, 2)]:
        x, w, b = r(2, 3, 7, 7), r(4, 3, k, k), r(4)
        ho = F.conv_output_size(7, k, stride, pad)
        g = r(2, 4, ho, ho)
        res[f"conv2d k{k} s{stride} p{pad}"] = check(
            lambda t, s=stride, p=pad, g=g: _weighted_sum(F.conv2d(t[0], t[1], t[2], s, p), g),
            [Tensor(x), Tensor(w), Tensor(b)])

    for shape in [(4, 3, 3, 3), (6, 5)]:
        c = shape[1]
        g = r(*shape)
        x = r(*shape) * 2 + 1
        res[f"batch_norm train {len(shape)}d"] = check(
            lambda t, g=g: _weighted_sum(F.batch_norm(t[0], t[1], t[2], None, F.TRAIN), g),
            [Tensor(x), Tensor(r(c) + 1.5), Tensor(r(c))])
        st = F.BatchNormState(c)
        st.running_mean[:] = r(c)
        st.running_var[:] = rng.uniform(0.5, 2.0, c)
        res[f"batch_norm eval {len(shape)}d"] = check(
            lambda t, g=g, st=st: _weighted_sum(F.batch_norm(t[0], t[1], t[2], st, F.EVAL), g),
            [Tensor(x), Tensor(r(c) + 1.5), Tensor(r(c))])

    x = r(3, 5)
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    g = r(3, 5)
    res["relu"] = check(lambda t: _weighted_sum(F.relu(t[0]), g), [Tensor(x)])
    res["silu"] = check(lambda t: _weighted_sum(F.silu(t[0]), g), [Tensor(r(3, 5) * 3)])
    res["sigmoid"] = check(lambda t: _weighted_sum(F.sigmoid(t[0]), g), [Tensor(r(3, 5) * 3)])
    res["linear"] = check(lambda t: _weighted_sum(F.linear(t[0], t[1], t[2]), r(3, 4) * 0 + g[:, :4]),
                          [Tensor(r(3, 6)), Tensor(r(4, 6)), Tensor(r(4))])
    res["add"] = check(lambda t: _weighted_sum(F.add(t[0], t[1]), g), [Tensor(r(3, 5)), Tensor(r(3, 5))])
    res["mul"] = check(lambda t: (t[0] * t[1]).sum(), [Tensor(r(3, 5)), Tensor(r(3, 5))])
    gp = r(2, 3)
    res["global_avg_pool"] = check(lambda t: _weighted_sum(F.global_avg_pool(t[0]), gp), [Tensor(r(2, 3, 4, 5))])
    res["dropout"] = check(
        lambda t: _weighted_sum(F.dropout(t[0], 0.3, F.TRAIN, np.random.default_rng(7)), g), [Tensor(r(3, 5))])

    y = (rng.random((4, 6)) < 0.4).astype(float)
    logits = r(4, 6) * 2
    res["bce_with_logits"] = check(lambda t: bce_with_logits(t[0], y), [Tensor(logits)])
    # ASL is elementwise then averaged. Each element is checked as its own scalar loss: in a
    # batched mean, flat elements (gradient ~ q^gamma) drown in the roundoff of the others.
    for label, gp, gn, shift in (("asymmetric_loss", 1.0, 4.0, 0.05), ("asymmetric_loss no shift", 2.0, 3.0, 0.0)):
        worst = 0.0
        for i, j in np.ndindex(logits.shape):
            z = logits[i:i + 1, j:j + 1].copy()
            if shift and abs(1.0 / (1.0 + np.exp(-z[0, 0])) - shift) < 1e-3:
                z += 0.1  # off the clipping kink
            yy = y[i:i + 1, j:j + 1]
            worst = max(worst, check(lambda t, yy=yy, gp=gp, gn=gn, sh=shift: asymmetric_loss(t[0], yy, gp, gn, sh),
                                     [Tensor(z)]))
        res[label] = worst
    moderate = rng.uniform(-1.0, 2.0, size=(4, 6))
    res["asymmetric_loss batched"] = check(lambda t: asymmetric_loss(t[0], y, 1.0, 4.0, 0.05), [Tensor(moderate)])
    return res


def model_check(config: Optional[ModelConfig] = None, batch: int = 4, seed: int = 0,
                max_coords: int = 4, loss: str = "bce",
                groups: Optional[Sequence[str]] = None) -> Dict[str, float]:
    """Finite differences of a train-mode loss w.r.t. every trainable parameter tensor and the input.

    Dropout masks are redrawn from the same seed on every evaluation so the
    function being differenced is fixed. Up to ``max_coords`` entries per tensor.
    ``groups`` restricts the check (the input is included only when unrestricted).
    """
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    model = build_model(config, rng)
    # break the symmetry of freshly initialized BN/bias so every path carries signal
    for p in model.trainable_params():
        p.data += 0.1 * rng.normal(size=p.shape)
    if model.momentum is not None:
        for e, t in zip(model.momentum.params(), model.expansion.params()):
            e.data[...] = t.data + 0.05 * rng.normal(size=t.shape)
    x = Tensor(rng.normal(size=(batch, config.input_channels, *config.input_size)))
    y = (rng.random((batch, config.num_classes)) < 0.3).astype(float)

    def objective() -> Tensor:
        logits = forward_full(model, x, F.TRAIN, np.random.default_rng(seed + 1))
        if loss == "asl":
            return asymmetric_loss(logits, y, 1.0, 4.0, 0.0)
        return bce_with_logits(logits, y)

    model.zero_grad()
    x.requires_grad = True
    objective().backward()
    out: Dict[str, float] = {}
    wanted = [g for g in model.groups() if g != "momentum" and (groups is None or g in groups)]
    named = [(f"{g}.{i}:{p.name}", p) for g in wanted for i, p in enumerate(model.groups()[g].params)]
    if groups is None:
        named.append(("input", x))
    for name, p in named:
        coords = None
        if p.size > max_coords:
            flat = rng.choice(p.size, size=max_coords, replace=False)
            coords = [np.unravel_index(i, p.shape) for i in flat]
        num = numeric_grad(lambda: objective().item(), p.data, STEP, coords)
        ana = p.grad if p.grad is not None else np.zeros(p.shape)
        out[name] = relative_error(ana, num)
    return out


def run_all(seed: int = 0, config: Optional[ModelConfig] = None, max_coords: int = 4) -> Dict[str, float]:
    res = op_checks(seed)
    per_param = model_check(config, seed=seed, max_coords=max_coords)
    res["full model (worst parameter)"] = max(per_param.values())
    stop = dataclasses.replace(config or ModelConfig(), stop_gradient_momentum=True)
    # the cut path is invisible to the analytic gradient, so only groups downstream of x1 compare
    downstream = ("expansion", "fusion", "head")
    res["full model, stop-gradient momentum"] = max(
        model_check(stop, seed=seed, groups=downstream, max_coords=max_coords).values())
    return res
