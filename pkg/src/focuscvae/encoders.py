"""Shared bidirectional GRU encoders and the Gaussian latent machinery.

Post and response run through the *same* stacked bidirectional GRU (one
parameter set).  The pooled encodings feed two affine heads: recognition
(post + response, training only) and prior (post only), each emitting mean
and log-variance of a diagonal Gaussian over the latent z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GRUCellWeights, Tensor, gru_cell
from .errors import DimensionError, PhaseError, ValidationError


@dataclass
class AffineWeights:
    W: Tensor
    b: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}


def affine(x: Tensor, w: AffineWeights) -> Tensor:
    return ad.bias_add(ad.matmul(x, w.W), w.b)


@dataclass
class EncoderWeights:
    """Stacked bidirectional layers as (forward, backward) cell pairs."""

    layers: list[tuple[GRUCellWeights, GRUCellWeights]]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (fwd, bwd) in enumerate(self.layers):
            out.update(fwd.named(f"{prefix}.l{i}.fwd"))
            out.update(bwd.named(f"{prefix}.l{i}.bwd"))
        return out


def init_gru_cell(rng: np.random.Generator, d_in: int, d_h: int, scale: float) -> GRUCellWeights:
    u = lambda *shape: Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)
    return GRUCellWeights(
        W_u=u(d_in, d_h), U_u=u(d_h, d_h), b_u=u(d_h),
        W_r=u(d_in, d_h), U_r=u(d_h, d_h), b_r=u(d_h),
        W_h=u(d_in, d_h), U_h=u(d_h, d_h), b_h=u(d_h),
    )


def init_encoder_weights(rng: np.random.Generator, d_in: int, d_h: int,
                         n_layers: int = 2, scale: float = 0.08) -> EncoderWeights:
    if d_h % 2:
        raise DimensionError(f"bidirectional d_h must be even, got {d_h}")
    units = d_h // 2
    layers = []
    width = d_in
    for _ in range(n_layers):
        layers.append((init_gru_cell(rng, width, units, scale),
                       init_gru_cell(rng, width, units, scale)))
        width = d_h  # next layer consumes the concatenated directions
    return EncoderWeights(layers)


@dataclass
class EncoderOutputs:
    states_flat: Tensor   # [B*T, d_h] row-major over (batch, position)
    pooled: Tensor        # [B, d_h] masked mean over positions
    batch: int
    length: int

    def state_rows(self) -> np.ndarray:
        """States as a [B, T, d_h] array view for diagnostics."""
        return self.states_flat.data.reshape(self.batch, self.length, -1)


def _masked_carry(h_new: Tensor, h_prev: Tensor, mask_col: np.ndarray) -> Tensor:
    # PAD steps keep the previous state so padding never leaks into it
    keep = Tensor(mask_col)
    drop = Tensor(1.0 - mask_col)
    return ad.add(ad.scale_rows(h_new, keep), ad.scale_rows(h_prev, drop))


def _run_direction(inputs: list[Tensor], mask: np.ndarray, cell: GRUCellWeights,
                   units: int, reverse: bool) -> list[Tensor]:
    b = mask.shape[0]
    order = range(len(inputs) - 1, -1, -1) if reverse else range(len(inputs))
    h = Tensor(np.zeros((b, units)))
    states: dict[int, Tensor] = {}
    for t in order:
        h = _masked_carry(gru_cell(inputs[t], h, cell), h, mask[:, t:t + 1].astype(np.float64))
        states[t] = h
    return [states[t] for t in range(len(inputs))]


def encode(token_ids, mask, emb_table: Tensor, weights: EncoderWeights) -> EncoderOutputs:
    """Run the stacked bidirectional encoder over a padded batch.

    Accepts [B, T] (or a single [T] sequence) of token ids with a boolean
    mask.  Position i of the output concatenates the forward state after
    reading tokens 1..i with the backward state after reading T..i; the
    pooled vector is the mean over unmasked positions.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    m = np.asarray(mask, dtype=bool)
    if ids.ndim == 1:
        ids, m = ids.reshape(1, -1), m.reshape(1, -1)
    if ids.shape != m.shape:
        raise DimensionError(f"ids shape {ids.shape} does not match mask shape {m.shape}")
    b, t = ids.shape
    if t == 0 or not m.any(axis=1).all():
        raise ValidationError("every sequence needs at least one unmasked token")

    units = weights.layers[0][0].U_u.shape[0]
    inputs = [ad.embedding(emb_table, ids[:, i]) for i in range(t)]
    outputs = inputs
    for fwd_cell, bwd_cell in weights.layers:
        fwd = _run_direction(outputs, m, fwd_cell, units, reverse=False)
        bwd = _run_direction(outputs, m, bwd_cell, units, reverse=True)
        outputs = [ad.concat([f, k], axis=1) for f, k in zip(fwd, bwd)]

    d_h = 2 * units
    flat = ad.reshape(ad.concat(outputs, axis=1), (b * t, d_h))
    counts = m.sum(axis=1, keepdims=True).astype(np.float64)
    acc = None
    for i, state in enumerate(outputs):
        masked = ad.scale_rows(state, Tensor(m[:, i:i + 1].astype(np.float64)))
        acc = masked if acc is None else ad.add(acc, masked)
    pooled = ad.scale_rows(acc, Tensor(1.0 / counts))
    return EncoderOutputs(flat, pooled, b, t)


# ---------------------------------------------------------------------------
# latent heads


@dataclass
class GaussianParams:
    mu: Tensor       # [B, d_z]
    log_var: Tensor  # [B, d_z], clamped


@dataclass
class LatentSample:
    z: Tensor
    eps: np.ndarray
    source: str  # "recognition" | "prior"


def _gaussian_head(x: Tensor, w: AffineWeights, d_z: int,
                   clamp_lo: float, clamp_hi: float) -> GaussianParams:
    out = affine(x, w)
    if out.shape[1] != 2 * d_z:
        raise DimensionError(f"gaussian head emits {out.shape[1]} columns, expected {2 * d_z}")
    mu = ad.narrow(out, 1, 0, d_z)
    log_var = ad.clamp(ad.narrow(out, 1, d_z, d_z), clamp_lo, clamp_hi)
    return GaussianParams(mu, log_var)


def recognition(pooled_post: Tensor, pooled_resp: Tensor | None, w: AffineWeights,
                d_z: int, clamp_lo: float = -10.0, clamp_hi: float = 10.0) -> GaussianParams:
    """q(z | x, y) from the concatenated pooled encodings. Training only."""
    if pooled_resp is None:
        raise PhaseError("recognition needs a response encoding; use the prior at inference")
    return _gaussian_head(ad.concat([pooled_post, pooled_resp], axis=1), w, d_z, clamp_lo, clamp_hi)


def prior(pooled_post: Tensor, w: AffineWeights, d_z: int,
          clamp_lo: float = -10.0, clamp_hi: float = 10.0) -> GaussianParams:
    """p(z | x) from the pooled post encoding alone."""
    return _gaussian_head(pooled_post, w, d_z, clamp_lo, clamp_hi)


def sample(params: GaussianParams, rng: np.random.Generator | None = None,
           eps: np.ndarray | None = None, source: str = "recognition") -> LatentSample:
    """Reparameterized draw z = mu + exp(log_var / 2) * eps."""
    if eps is None:
        if rng is None:
            raise ValidationError("sample needs either an rng or a frozen eps")
        eps = rng.standard_normal(params.mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != params.mu.shape:
        raise DimensionError(f"eps shape {eps.shape} does not match mu shape {params.mu.shape}")
    std = ad.exp(ad.mul(params.log_var, 0.5))
    z = ad.add(params.mu, ad.mul(std, Tensor(eps)))
    return LatentSample(z, eps, source)


def kl_divergence(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) per row for diagonal Gaussians, closed form. Returns [B, 1]."""
    if q.mu.shape != p.mu.shape or q.log_var.shape != p.log_var.shape:
        raise DimensionError(
            f"KL needs matching shapes, got mu {q.mu.shape} vs {p.mu.shape}")
    dlv = ad.add(p.log_var, ad.neg(q.log_var))
    ratio = ad.exp(ad.add(q.log_var, ad.neg(p.log_var)))
    dmu = ad.add(q.mu, ad.neg(p.mu))
    quad = ad.mul(ad.mul(dmu, dmu), ad.exp(ad.neg(p.log_var)))
    per_dim = ad.add(ad.add(ad.mul(dlv, 0.5), ad.mul(ad.add(ratio, quad), 0.5)), -0.5)
    return ad.sum_cols(per_dim)
