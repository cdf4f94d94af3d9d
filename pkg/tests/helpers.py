"""Shared test utilities: finite-difference checks and naive loop oracles.

The oracles deliberately avoid the library's vectorized code paths: they
re-implement the math with explicit Python loops over elements so the
fast implementations have something independent to agree with.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from slotflow.config import (
    ComparatorConfig,
    DecoderConfig,
    EncoderConfig,
    GroupingConfig,
    ModelConfig,
)


def micro_model_config(clip_len: int = 4) -> ModelConfig:
    """A tiny but complete model: 32x64 input, two stages, d=16."""
    return ModelConfig(
        clip_len=clip_len,
        encoder=EncoderConfig(
            patch_size=4,
            stage_channels=[8, 16],
            stage_depths=[1, 1],
            stage_heads=[2, 2],
            window_size=4,
            temporal_heads=2,
            input_hw=(32, 64),
        ),
        comparator=ComparatorConfig(heads=2, depth=1),
        grouping=GroupingConfig(num_iterations=2),
        decoder=DecoderConfig(stage_depths=[1, 1], stage_heads=[2, 2], window_size=4),
    )


def finite_diff_param_check(
    module: torch.nn.Module,
    loss_fn,
    *,
    eps: float = 1e-5,
    rtol: float = 1e-4,
    coords_per_param: int = 4,
    seed: int = 0,
) -> float:
    """Compare analytic parameter gradients against central differences.

    ``loss_fn()`` must return a scalar recomputed from the module's current
    parameters. Checks up to ``coords_per_param`` random coordinates of
    every parameter tensor at float64. Returns the worst relative error.
    """
    rng = np.random.default_rng(seed)
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for name, param in module.named_parameters():
        assert param.grad is not None, f"no gradient reached parameter {name}"
        flat = param.detach().reshape(-1)
        n = flat.numel()
        idxs = range(n) if n <= coords_per_param else rng.choice(n, coords_per_param, replace=False)
        grad_flat = param.grad.reshape(-1)
        for idx in idxs:
            idx = int(idx)
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
                up = float(loss_fn())
                flat[idx] = orig - eps
                down = float(loss_fn())
                flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = float(grad_flat[idx])
            denom = max(abs(fd), abs(an))
            err = abs(fd - an) if denom < 1e-7 else abs(fd - an) / denom
            assert err <= rtol, (
                f"gradient mismatch at {name}[{idx}]: analytic {an:.3e} vs central {fd:.3e} (rel {err:.2e})"
            )
            worst = max(worst, err)
    return worst


def slot_step_loop_oracle(router, slots: torch.Tensor, features: torch.Tensor) -> np.ndarray:
    """Scalar re-implementation of one routing iteration for a batch of one.

    Mirrors: layer-norm slots -> q/k/v projections -> scaled dot products
    -> softmax over slots -> renormalize over pixels -> value aggregation
    -> GRU update -> residual MLP. Everything below is explicit loops.
    """

    def layer_norm(vec, weight, bias, eps=1e-5):
        mean = sum(vec) / len(vec)
        var = sum((x - mean) ** 2 for x in vec) / len(vec)
        return [(x - mean) / math.sqrt(var + eps) * w + b for x, w, b in zip(vec, weight, bias)]

    def linear(vec, weight, bias=None):
        out = []
        for row in range(len(weight)):
            acc = sum(weight[row][c] * vec[c] for c in range(len(vec)))
            out.append(acc + (bias[row] if bias is not None else 0.0))
        return out

    def sigmoid(x):
        return 1.0 / (1.0 + math.exp(-x))

    S = slots[0].detach().numpy().tolist()  # (2, d)
    F = features[0].detach().numpy().tolist()  # (P, d)
    d = len(S[0])
    P = len(F)
    p = {k: v.detach().numpy().tolist() for k, v in router.named_parameters()}

    normed_slots = [layer_norm(s, p["norm_slots.weight"], p["norm_slots.bias"]) for s in S]
    q = [linear(s, p["to_q.weight"]) for s in normed_slots]
    k = [linear(f, p["to_k.weight"]) for f in F]
    v = [linear(f, p["to_v.weight"]) for f in F]

    logits = [[sum(q[s][c] * k[u][c] for c in range(d)) / math.sqrt(d) for u in range(P)] for s in range(2)]
    slot_attn = [[0.0] * P for _ in range(2)]
    for u in range(P):
        mx = max(logits[0][u], logits[1][u])
        e0, e1 = math.exp(logits[0][u] - mx), math.exp(logits[1][u] - mx)
        slot_attn[0][u] = e0 / (e0 + e1)
        slot_attn[1][u] = e1 / (e0 + e1)
    read = [[0.0] * P for _ in range(2)]
    for s in range(2):
        total = sum(slot_attn[s][u] + router.cfg.eps for u in range(P))
        for u in range(P):
            read[s][u] = (slot_attn[s][u] + router.cfg.eps) / total
    update = [[sum(read[s][u] * v[u][c] for u in range(P)) for c in range(d)] for s in range(2)]

    # GRUCell: r/z/n gates from stacked weight_ih (3d x d) and weight_hh
    w_ih, w_hh = p["gru.weight_ih"], p["gru.weight_hh"]
    b_ih, b_hh = p["gru.bias_ih"], p["gru.bias_hh"]
    new_slots = []
    for s in range(2):
        gi = linear(update[s], w_ih, b_ih)
        gh = linear(S[s], w_hh, b_hh)
        out = []
        for c in range(d):
            r = sigmoid(gi[c] + gh[c])
            z = sigmoid(gi[d + c] + gh[d + c])
            n = math.tanh(gi[2 * d + c] + r * gh[2 * d + c])
            out.append((1 - z) * n + z * S[s][c])
        new_slots.append(out)

    if router.cfg.use_mlp:
        for s in range(2):
            normed = layer_norm(new_slots[s], p["norm_mlp.weight"], p["norm_mlp.bias"])
            hidden = [max(0.0, h) for h in linear(normed, p["mlp.0.weight"], p["mlp.0.bias"])]
            res = linear(hidden, p["mlp.2.weight"], p["mlp.2.bias"])
            new_slots[s] = [a + b for a, b in zip(new_slots[s], res)]
    return np.array(new_slots)


def window_mean_loop_oracle(x: torch.Tensor, v_weight, v_bias, proj_weight, proj_bias,
                            window: tuple[int, int]) -> torch.Tensor:
    """Window-wise mean of value projections, computed with index loops."""
    B, H, W, C = x.shape
    wh, ww = window
    out = torch.zeros_like(x)
    for b in range(B):
        for wy in range(H // wh):
            for wx in range(W // ww):
                vals = []
                for dy in range(wh):
                    for dx in range(ww):
                        token = x[b, wy * wh + dy, wx * ww + dx]
                        vals.append(v_weight @ token + v_bias)
                mean_v = torch.stack(vals).mean(dim=0)
                res = proj_weight @ mean_v + proj_bias
                for dy in range(wh):
                    for dx in range(ww):
                        out[b, wy * wh + dy, wx * ww + dx] = res
    return out


def recon_loop_oracle(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean per-pixel Euclidean norm, scalar loops; arrays (3, H, W)."""
    _, H, W = pred.shape
    total = 0.0
    for y in range(H):
        for x in range(W):
            sq = sum((pred[c, y, x] - target[c, y, x]) ** 2 for c in range(3))
            total += math.sqrt(sq)
    return total / (H * W)


def consistency_loop_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of squared differences over slots and pixels / (2 * |pixels|)."""
    S, H, W = a.shape
    total = 0.0
    for s in range(S):
        for y in range(H):
            for x in range(W):
                total += (a[s, y, x] - b[s, y, x]) ** 2
    return total / (2 * H * W)


def entropy_loop_oracle(alphas: np.ndarray, floor: float = 1e-8) -> float:
    S, H, W = alphas.shape
    total = 0.0
    for s in range(S):
        for y in range(H):
            for x in range(W):
                a = alphas[s, y, x]
                total += -a * math.log(min(max(a, floor), 1.0))
    return total / (2 * H * W)


def compose_loop_oracle(layers: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """Per-pixel scalar compositing; layers (2, 3, H, W), alphas (2, 1, H, W)."""
    _, C, H, W = layers.shape
    out = np.zeros((C, H, W))
    for c in range(C):
        for y in range(H):
            for x in range(W):
                out[c, y, x] = sum(alphas[s, 0, y, x] * layers[s, c, y, x] for s in range(2))
    return out


def colorize_reference(field: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Per-pixel scalar re-evaluation of the 55-entry wheel rendering."""
    from slotflow.dataio import _color_wheel

    wheel = _color_wheel()
    ncols = len(wheel)
    H, W = field.shape[:2]
    rad_all = np.sqrt((np.asarray(field, dtype=np.float64) ** 2).sum(-1))
    scale = (rad_all.max() if max_mag is None else max_mag) + 1e-8
    out = np.zeros((H, W, 3))
    for y in range(H):
        for x in range(W):
            u, v = field[y, x, 0] / scale, field[y, x, 1] / scale
            rad = math.hypot(u, v)
            angle = math.atan2(-v, -u) / math.pi
            fk = (angle + 1.0) / 2.0 * (ncols - 1)
            k0 = int(math.floor(fk))
            k1 = (k0 + 1) % ncols
            f = fk - k0
            for c in range(3):
                col = (1 - f) * wheel[k0][c] + f * wheel[k1][c]
                out[y, x, c] = 1 - rad * (1 - col) if rad <= 1 else col * 0.75
    return out


def propagate_loop_oracle(f_src: np.ndarray, mask_grid: np.ndarray, f_tgt: np.ndarray,
                          topk: int, temperature: float, radius: int) -> np.ndarray:
    """Brute-force affinity propagation on grid-resolution masks."""
    h, w, d = f_src.shape
    out = np.zeros((h, w))
    for ty in range(h):
        for tx in range(w):
            cands = []
            for sy in range(h):
                for sx in range(w):
                    if abs(sy - ty) <= radius and abs(sx - tx) <= radius:
                        sim = float(np.dot(f_tgt[ty, tx], f_src[sy, sx]))
                        cands.append((sim, sy, sx))
            cands.sort(key=lambda c: -c[0])
            chosen = cands[: min(topk, len(cands))]
            mx = max(c[0] for c in chosen)
            weights = [math.exp((c[0] - mx) / temperature) for c in chosen]
            total = sum(weights)
            out[ty, tx] = sum(
                wgt / total * mask_grid[sy, sx] for wgt, (_, sy, sx) in zip(weights, chosen)
            )
    return out
