"""Central finite-difference check of LSTR gradients."""
from __future__ import annotations

import numpy as np

from .grad import ALL
from .lstr import Batch, ModelConfig, init_model, loss_and_grads

# 1,795 parameters
TOY_CONFIG = ModelConfig(feature_dim=3, embed_dim=8, heads=2, latent_tokens=2, encoder_layers=1,
                         decoder_layers=1, ff_dim=8, long_slots=4, work_slots=3)


def random_batch(cfg: ModelConfig, rng: np.random.Generator, size: int = 3) -> Batch:
    """Random features with partially filled memories (one sample has empty long memory)."""
    long_mask = np.zeros((size, cfg.long_slots), dtype=bool)
    work_mask = np.zeros((size, cfg.work_slots), dtype=bool)
    for i in range(size):
        long_mask[i, : (0 if i == 0 else int(rng.integers(1, cfg.long_slots + 1)))] = True
        work_mask[i, : int(rng.integers(1, cfg.work_slots + 1))] = True
    return Batch(
        rng.normal(size=(size, cfg.long_slots, cfg.input_dim)) * long_mask[..., None],
        long_mask,
        rng.normal(size=(size, cfg.work_slots, cfg.input_dim)) * work_mask[..., None],
        work_mask,
        rng.integers(0, cfg.classes, size=size),
    )


def check_gradients(seed: int, cfg: ModelConfig = TOY_CONFIG, n_coords: int = 140,
                    step: float = 1e-4, min_grad: float = 1e-8) -> dict:
    """Compare autodiff with central differences on ``n_coords`` random coordinates.

    Returns ``{"max_rel_error", "checked", "params"}``; relative error is
    ``|a - n| / max(|a|, |n|)`` over coordinates with ``|a| > min_grad``.
    """
    rng = np.random.default_rng(seed)
    params = init_model(cfg, seed)
    # non-trivial norms and biases so their gradients are exercised
    params = params.replace({
        n: v + rng.normal(scale=0.1, size=v.shape) for n, v in params.items() if v.ndim == 1
    })
    batch = random_batch(cfg, rng)
    _, grads = loss_and_grads(params, cfg, batch, ALL)

    coords = [(n, i) for n in params for i in range(params[n].size)]
    picks = rng.choice(len(coords), size=min(n_coords, len(coords)), replace=False)
    worst, checked = 0.0, 0
    for k in sorted(picks):
        name, i = coords[k]
        analytic = grads[name].flat[i]
        if abs(analytic) <= min_grad:
            continue
        base = params[name]
        vals = []
        for sign in (1.0, -1.0):
            bumped = base.copy()
            bumped.flat[i] += sign * step
            vals.append(loss_and_grads(params.replace({name: bumped}), cfg, batch, ALL)[0])
        numeric = (vals[0] - vals[1]) / (2 * step)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
        checked += 1
    return {"max_rel_error": float(worst), "checked": checked, "params": params.count()}
