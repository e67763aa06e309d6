"""Latent-conditioned focus distribution and focus-guided coverage attention.

The focus head scores each post position from its encoder state and the
sampled z, then normalizes over real (non-PAD) positions.  The resulting
distribution is appended to the encoder states as one extra column, and the
decoder's attention reads those augmented states.  A coverage vector keeps
the running sum of attention weights per position; variants that use it feed
the coverage-weighted state summary back into the attention energies.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import uses_coverage_term
from .errors import DimensionError, SequencingError, ValidationError


@dataclass
class FocusWeights:
    W_f: Tensor  # [d_h, d_att]
    U_f: Tensor  # [d_z, d_att]
    v_f: Tensor  # [d_att, 1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W_f": self.W_f, f"{prefix}.U_f": self.U_f, f"{prefix}.v_f": self.v_f}


@dataclass
class AttentionWeights:
    W_a: Tensor          # [d_states, d_att]
    U_a: Tensor          # [d_h, d_att]
    v_a: Tensor          # [d_att, 1]
    V_a: Tensor | None   # [d_states, d_att] when the coverage term is active

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.W_a": self.W_a, f"{prefix}.U_a": self.U_a, f"{prefix}.v_a": self.v_a}
        if self.V_a is not None:
            out[f"{prefix}.V_a"] = self.V_a
        return out


def focus_generate(states_flat: Tensor, post_mask: np.ndarray, z: Tensor,
                   w: FocusWeights) -> Tensor:
    """Per-position focus probabilities [B, T]; PAD positions exactly 0."""
    mask = np.asarray(post_mask, dtype=bool)
    b, t = mask.shape
    if states_flat.shape[0] != b * t:
        raise DimensionError(
            f"states rows {states_flat.shape[0]} do not match mask {mask.shape}")
    scores = ad.matmul(ad.tanh(ad.add(ad.matmul(states_flat, w.W_f),
                                      ad.repeat_rows(ad.matmul(z, w.U_f), t))), w.v_f)
    return ad.softmax(ad.reshape(scores, (b, t)), mask)


def augment_with_focus(states_flat: Tensor, focus: Tensor) -> Tensor:
    """Append the focus value of each position as one extra state column."""
    n = states_flat.shape[0]
    return ad.concat([states_flat, ad.reshape(focus, (n, 1))], axis=1)


@dataclass
class CoverageVector:
    """Running Σ_t α_t per post position, plus the step it is current for."""

    d: Tensor  # [B, T]
    step: int

    @classmethod
    def fresh(cls, batch: int, length: int) -> "CoverageVector":
        return cls(Tensor(np.zeros((batch, length))), 0)


@dataclass
class AttentionSetup:
    """Per-decode precomputation: state projections that are constant in t."""

    base: Tensor            # [B*T, d_att] = W_a applied to the attended states
    attended_flat: Tensor   # states the coverage summary is built from
    context_flat: Tensor    # states summed into the decoder context
    post_mask: np.ndarray   # [B, T]
    weights: AttentionWeights
    use_coverage: bool

    @property
    def length(self) -> int:
        return self.post_mask.shape[1]


def build_attention(states_flat: Tensor, aug_flat: Tensor | None, post_mask: np.ndarray,
                    w: AttentionWeights, variant: str,
                    context_uses_augmented: bool = False) -> AttentionSetup:
    attended = aug_flat if aug_flat is not None else states_flat
    use_cov = uses_coverage_term(variant)
    if use_cov and w.V_a is None:
        raise ValidationError(f"variant {variant!r} needs coverage weights V_a")
    context_src = attended if context_uses_augmented else states_flat
    return AttentionSetup(
        base=ad.matmul(attended, w.W_a),
        attended_flat=attended,
        context_flat=context_src,
        post_mask=np.asarray(post_mask, dtype=bool),
        weights=w,
        use_coverage=use_cov,
    )


def attend_step(setup: AttentionSetup, s_prev: Tensor, coverage: CoverageVector,
                t: int, update_mask: np.ndarray | None = None
                ) -> tuple[Tensor, Tensor, CoverageVector]:
    """One attention read at decode step t (1-based).

    Returns (alpha [B, T], context [B, d_h], updated coverage).  Rows where
    update_mask is 0 keep their coverage unchanged, which is how padded or
    already-finished sequences sit out a batched step.
    """
    if coverage.step != t - 1:
        raise SequencingError(f"coverage is current for step {coverage.step}, cannot attend at step {t}")
    b, length = setup.post_mask.shape
    energy = ad.add(setup.base, ad.repeat_rows(ad.matmul(s_prev, setup.weights.U_a), length))
    if setup.use_coverage:
        summary = ad.sum_groups(
            ad.scale_rows(setup.attended_flat, ad.reshape(coverage.d, (b * length, 1))), length)
        energy = ad.add(energy, ad.repeat_rows(ad.matmul(summary, setup.weights.V_a), length))
    scores = ad.reshape(ad.matmul(ad.tanh(energy), setup.weights.v_a), (b, length))
    alpha = ad.softmax(scores, setup.post_mask)
    context = ad.sum_groups(
        ad.scale_rows(setup.context_flat, ad.reshape(alpha, (b * length, 1))), length)
    increment = alpha if update_mask is None else ad.scale_rows(
        alpha, Tensor(np.asarray(update_mask, dtype=np.float64).reshape(b, 1)))
    return alpha, context, CoverageVector(ad.add(coverage.d, increment), t)


# ---------------------------------------------------------------------------
# alignment diagnostics (plain numpy; nothing here needs gradients)


@dataclass
class AlignmentRecord:
    focus: np.ndarray             # [T] focus distribution over post positions
    coverage_over_len: np.ndarray  # [T] accumulated attention / decode length
    distance: float               # L2 between the two
    focus_argmax: int
    coverage_argmax: int

    def write_csv(self, path, tokens: list[str]) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["position", "token", "focus", "coverage_over_len"])
            for i, tok in enumerate(tokens):
                writer.writerow([i, tok, repr(float(self.focus[i])),
                                 repr(float(self.coverage_over_len[i]))])


def coverage_report(coverage: np.ndarray, resp_len: int, focus: np.ndarray,
                    mask: np.ndarray | None = None) -> AlignmentRecord:
    """Compare accumulated attention (normalized by decode length) with focus."""
    coverage = np.asarray(coverage, dtype=np.float64)
    focus = np.asarray(focus, dtype=np.float64)
    if coverage.shape != focus.shape:
        raise DimensionError(f"coverage {coverage.shape} vs focus {focus.shape}")
    if resp_len < 1:
        raise ValidationError(f"resp_len must be positive, got {resp_len}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        coverage, focus = coverage[m], focus[m]
    over_len = coverage / float(resp_len)
    diff = over_len - focus
    return AlignmentRecord(
        focus=focus,
        coverage_over_len=over_len,
        distance=float(np.sqrt(np.sum(diff * diff))),
        focus_argmax=int(np.argmax(focus)),
        coverage_argmax=int(np.argmax(over_len)),
    )
