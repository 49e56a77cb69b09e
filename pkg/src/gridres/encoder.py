"""Temporal feature encoder for PV/load observations.

Builds the per-slot input matrix (current values plus the forecast horizon,
one row per device) and compresses it into a 16-dimensional characteristic
vector with an embedding layer, a two-layer GRU and a rectified linear head.
Inputs are normalized by device capacity before the embedding so MW-scale
differences between devices do not dominate training.
"""

from __future__ import annotations

import numpy as np

from .dataio import ForecastTable, SeriesSet
from . import diffkit as dk

VECTOR_DIM = 16


def build_window(series: SeriesSet, forecasts: ForecastTable, day: int, t: int,
                 horizon: int) -> np.ndarray:
    """Input matrix for slot ``t``: rows are PV devices then loads in id
    order, column 0 the current actual, columns 1..T-1 the forecasts.

    Columns whose target slot falls past the end of the day hold the last
    in-day value.
    """
    n_slots = series.pv.shape[2]
    if not 0 <= t < n_slots:
        raise IndexError(f"slot {t} out of range 0..{n_slots - 1}")
    rows = series.pv.shape[0] + series.load.shape[0]
    window = np.empty((rows, horizon))
    window[: series.pv.shape[0], 0] = series.pv[:, day, t]
    window[series.pv.shape[0]:, 0] = series.load[:, day, t]
    for j in range(1, horizon):
        lead = min(j, n_slots - 1 - t)
        if lead == 0:
            # Already at the final slot: hold the current actual.
            window[:, j] = window[:, 0]
        else:
            window[: series.pv.shape[0], j] = forecasts.pv[:, day, t, lead - 1]
            window[series.pv.shape[0]:, j] = forecasts.load[:, day, t, lead - 1]
    return window


class GruEncoder:
    """Embedding -> two GRU layers -> linear + ReLU head, all float64.

    One shared instance produces the characteristic vector for every agent;
    its parameters are updated through the actors' gradient paths.
    """

    def __init__(self, in_dim: int, capacities: np.ndarray,
                 rng: np.random.Generator, embed: int = 32, hidden: int = 32,
                 layers: int = 2, out_dim: int = VECTOR_DIM):
        if capacities.shape != (in_dim,):
            raise dk.ShapeError(f"capacities {capacities.shape} vs in_dim {in_dim}")
        self.in_dim = in_dim
        self.hidden = hidden
        self.layers = layers
        self.out_dim = out_dim
        self.capacities = capacities.astype(float)
        self.params: dict[str, np.ndarray] = {
            "emb/W": dk.uniform_init(rng, (in_dim, embed)),
            "emb/b": np.zeros(embed),
        }
        for layer in range(layers):
            in_size = embed if layer == 0 else hidden
            self.params.update(dk.gru_init(rng, in_size, hidden, prefix=f"l{layer}/"))
        self.params["head/W"] = dk.uniform_init(rng, (hidden, out_dim))
        self.params["head/b"] = np.zeros(out_dim)

    def forward(self, windows: np.ndarray):
        """Encode a batch of (rows, T) windows; returns (v, cache).

        ``windows`` may also be a single (rows, T) matrix.
        """
        single = windows.ndim == 2
        if single:
            windows = windows[None]
        batch, rows, horizon = windows.shape
        if rows != self.in_dim:
            raise dk.ShapeError(f"window rows {rows} vs encoder input {self.in_dim}")
        x_norm = windows / self.capacities[None, :, None]
        h = [np.zeros((batch, self.hidden)) for _ in range(self.layers)]
        steps = []
        for t in range(horizon):
            col = x_norm[:, :, t]
            emb_pre, emb_cache = dk.dense_forward(col, self.params["emb/W"],
                                                  self.params["emb/b"])
            inp, relu_cache = dk.relu_forward(emb_pre)
            cell_caches = []
            for layer in range(self.layers):
                h_new, cache = dk.gru_cell_forward(self.params, inp, h[layer],
                                                   prefix=f"l{layer}/")
                cell_caches.append(cache)
                h[layer] = h_new
                inp = h_new
            steps.append((emb_cache, relu_cache, cell_caches))
        head_pre, head_cache = dk.dense_forward(h[-1], self.params["head/W"],
                                                self.params["head/b"])
        v, head_relu = dk.relu_forward(head_pre)
        cache = (steps, head_cache, head_relu, batch, horizon, single)
        return (v[0] if single else v), cache

    def encode(self, window: np.ndarray) -> np.ndarray:
        v, _ = self.forward(window)
        return v

    def backward(self, cache, grad_v: np.ndarray) -> dict[str, np.ndarray]:
        """Backpropagate through time; returns parameter gradients."""
        steps, head_cache, head_relu, batch, horizon, single = cache
        if single:
            grad_v = grad_v[None]
        grads: dict[str, np.ndarray] = {}
        d_head_pre = dk.relu_backward(head_relu, grad_v)
        dh_last, dW, db = dk.dense_backward(head_cache, d_head_pre)
        dk.accumulate(grads, {"head/W": dW, "head/b": db})

        # dh[layer] is the gradient flowing into that layer's hidden state.
        dh = [np.zeros((batch, self.hidden)) for _ in range(self.layers)]
        dh[-1] = dh_last
        for t in reversed(range(horizon)):
            emb_cache, relu_cache, cell_caches = steps[t]
            d_inp = np.zeros((batch, self.hidden))
            for layer in reversed(range(self.layers)):
                dx, dh_prev, cell_grads = dk.gru_cell_backward(
                    self.params, cell_caches[layer], dh[layer],
                    prefix=f"l{layer}/")
                dk.accumulate(grads, cell_grads)
                dh[layer] = dh_prev
                if layer > 0:
                    dh[layer - 1] = dh[layer - 1] + dx
                else:
                    d_inp = dx
            d_emb_pre = dk.relu_backward(relu_cache, d_inp)
            _, dW, db = dk.dense_backward(emb_cache, d_emb_pre)
            dk.accumulate(grads, {"emb/W": dW, "emb/b": db})
        return grads
