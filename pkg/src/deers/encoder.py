"""GRU state encoder.

Per step, with row-vector inputs ``x`` (embedding) and ``h`` (previous state)::

    z  = sigmoid(x Wz^T + h Uz^T)
    r  = sigmoid(x Wr^T + h Ur^T)
    hh = tanh(x W^T + (r * h) U^T)
    h' = (1 - z) * h + z * hh

No biases.  ``h0`` is zero and the final hidden state is the encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from deers.session import DualState

GATES = ("Wz", "Uz", "Wr", "Ur", "W", "U")


@dataclass(frozen=True)
class EncoderParameters:
    Wz: np.ndarray
    Uz: np.ndarray
    Wr: np.ndarray
    Ur: np.ndarray
    W: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        h, d = self.Wz.shape
        for name in ("Wz", "Wr", "W"):
            if getattr(self, name).shape != (h, d):
                raise ValueError(f"{name} must be {(h, d)}, got {getattr(self, name).shape}")
        for name in ("Uz", "Ur", "U"):
            if getattr(self, name).shape != (h, h):
                raise ValueError(f"{name} must be {(h, h)}, got {getattr(self, name).shape}")

    @property
    def hidden_dim(self) -> int:
        return self.Wz.shape[0]

    @property
    def input_dim(self) -> int:
        return self.Wz.shape[1]

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str) -> "EncoderParameters":
        return cls(*(arrays[f"{prefix}.{g}"] for g in GATES))


def gru_forward(p: EncoderParameters, X: np.ndarray):
    """Encode a batch of windows ``X`` of shape (B, N, d); returns (h_N, cache)."""
    B, N, d = X.shape
    if d != p.input_dim:
        raise ValueError(f"window embeddings have dim {d}, encoder expects {p.input_dim}")
    # input projections for every step in one product each
    xz = X @ p.Wz.T
    xr = X @ p.Wr.T
    xh = X @ p.W.T
    h = np.zeros((B, p.hidden_dim))
    steps = []
    for n in range(N):
        z = expit(xz[:, n] + h @ p.Uz.T)
        r = expit(xr[:, n] + h @ p.Ur.T)
        rh = r * h
        hh = np.tanh(xh[:, n] + rh @ p.U.T)
        steps.append((h, z, r, rh, hh))
        h = (1.0 - z) * h + z * hh
    return h, (X, steps)


def gru_backward(p: EncoderParameters, cache, dh: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate ``dL/dh_N`` through time; returns gradients keyed by gate name."""
    X, steps = cache
    grads = {g: np.zeros_like(getattr(p, g)) for g in GATES}
    dax_z = np.empty(X.shape[:2] + (p.hidden_dim,))
    dax_r = np.empty_like(dax_z)
    dax_h = np.empty_like(dax_z)
    for n in range(len(steps) - 1, -1, -1):
        h_prev, z, r, rh, hh = steps[n]
        da_h = dh * z * (1.0 - hh * hh)
        da_z = dh * (hh - h_prev) * z * (1.0 - z)
        d_rh = da_h @ p.U
        da_r = d_rh * h_prev * r * (1.0 - r)
        grads["U"] += da_h.T @ rh
        grads["Uz"] += da_z.T @ h_prev
        grads["Ur"] += da_r.T @ h_prev
        dax_z[:, n], dax_r[:, n], dax_h[:, n] = da_z, da_r, da_h
        dh = dh * (1.0 - z) + d_rh * r + da_z @ p.Uz + da_r @ p.Ur
    flat_x = X.reshape(-1, X.shape[2])
    grads["Wz"] = dax_z.reshape(-1, p.hidden_dim).T @ flat_x
    grads["Wr"] = dax_r.reshape(-1, p.hidden_dim).T @ flat_x
    grads["W"] = dax_h.reshape(-1, p.hidden_dim).T @ flat_x
    return grads


def encode_gru(params: EncoderParameters, window, catalog) -> np.ndarray:
    """Final hidden state for one item window (padding items embed to zero)."""
    X = catalog.embeddings[catalog.rows(list(window))][None]
    h, _ = gru_forward(params, X)
    return h[0]


def state_vector(state: DualState, params: tuple[EncoderParameters, EncoderParameters], catalog):
    """Encode both windows, each with its own encoder."""
    pos_params, neg_params = params
    return encode_gru(pos_params, state.positive, catalog), encode_gru(neg_params, state.negative, catalog)
