"""Seeded synthetic FFN layers so the whole pipeline runs without model checkpoints."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .containers import Activation, ActivationBatch, FfnWeights
from .tensor_io import save_activation_batch, save_ffn_weights, write_tensors


def mixing_matrix(rng: np.random.Generator, d: int, decay: float = 0.85) -> np.ndarray:
    """Random rotation with geometrically decaying column scales."""
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * decay ** np.arange(d)


def correlated_tokens(rng: np.random.Generator, n: int, direction: np.ndarray,
                      mixing: np.ndarray, offset: float = 2.0) -> np.ndarray:
    """Tokens ``offset * direction + mixing @ z`` with ``z`` standard normal (``d x n``)."""
    return offset * direction[:, None] + mixing @ rng.standard_normal((mixing.shape[1], n))


def synthetic_layer(rng: np.random.Generator, d: int, D: int, n_calib: int, n_eval: int,
                    activation="reglu", active_fraction: float = 0.1,
                    gate_rank: int | None = None):
    """Random gated FFN whose gate fires on roughly ``active_fraction`` of tokens.

    Every token carries a common positive component along a unit direction
    ``v``; a negative multiple of ``v`` added to each gate row then shifts all
    gate pre-activations down until the requested fraction stays positive.
    ``gate_rank`` (optional) makes the gate approximately low rank.
    """
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    mix = rng.standard_normal((d, d))
    L = mixing_matrix(rng, d)
    X_cal = correlated_tokens(rng, n_calib, v, L)
    X_eval = correlated_tokens(rng, n_eval, v, L) if n_eval else np.zeros((d, 0))

    if gate_rank:
        base = rng.standard_normal((D, gate_rank)) @ rng.standard_normal((gate_rank, d)) / d
        base += 0.05 * rng.standard_normal((D, d)) / np.sqrt(d)
    else:
        base = rng.standard_normal((D, d)) / np.sqrt(d)
    base = base @ (np.eye(d) + 0.1 * mix / np.sqrt(d))
    pre = base @ X_cal
    along = v @ X_cal
    shift = np.quantile(pre, 1.0 - active_fraction) / np.mean(along)
    gate = base - shift * v[None, :]

    up = rng.standard_normal((D, d)) / np.sqrt(d)
    down = rng.standard_normal((d, D)) / np.sqrt(D)
    w = FfnWeights(gate, up, down, Activation.parse(activation))
    return w, ActivationBatch(X_cal), X_eval


def write_fixture(root, d: int = 64, D: int = 256, n_calib: int = 512, n_eval: int = 32,
                  layers: int = 1, seed: int = 0, activation="reglu",
                  active_fraction: float = 0.1) -> dict[str, Path]:
    """Write ``weights/``, ``calib/`` and ``eval/`` containers under ``root``.

    A single layer is stored flat; several layers go into ``layer_NNN``
    subdirectories of each container.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    paths = {k: root / k for k in ("weights", "calib", "eval")}
    for layer in range(layers):
        w, cal, X_eval = synthetic_layer(rng, d, D, n_calib, n_eval, activation, active_fraction)
        sub = Path(f"layer_{layer:03d}") if layers > 1 else Path()
        save_ffn_weights(w, paths["weights"] / sub)
        save_activation_batch(cal, paths["calib"] / sub)
        if n_eval:
            save_activation_batch(ActivationBatch(X_eval), paths["eval"] / sub)
        else:
            write_tensors(paths["eval"] / sub, {})
    return paths
