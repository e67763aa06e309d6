"""Model assembly: parameters for each variant and the end-to-end passes.

Variants build only the parameters they use:

  s2s           plain attentive encoder-decoder; no latent, no focus
  foc           latent z, focus column appended to the encoder states
  foccoverage   foc plus the coverage feedback term in the attention
  focconstrain  foccoverage (the focus alignment penalty lives in training)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig, uses_coverage_term, uses_latent
from .corpus import Batch
from .decoder import (DecoderWeights, GenerationResult, decode_train, greedy_decode,
                      init_decoder_weights, initial_states)
from .encoders import (AffineWeights, EncoderOutputs, GaussianParams, LatentSample,
                       encode, init_encoder_weights, kl_divergence, prior, recognition, sample)
from .errors import DimensionError, ValidationError
from .focus import (AttentionSetup, AttentionWeights, CoverageVector, FocusWeights,
                    augment_with_focus, build_attention, focus_generate)

# init gains that break the flat-softmax start (see FocusCVAE.__init__)
FOCUS_SCORE_GAIN = 6.0
ATTN_FOCUS_GAIN = 6.0


@dataclass
class BowWeights:
    """One-hidden-layer tanh net from [z; pooled post] to vocab logits."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W1": self.W1, f"{prefix}.b1": self.b1,
                f"{prefix}.W2": self.W2, f"{prefix}.b2": self.b2}


@dataclass
class ForwardPass:
    """Everything the loss terms need from one teacher-forced pass."""

    logits_flat: Tensor            # [B*T, V]
    coverage: CoverageVector
    alphas: list[Tensor]           # per-step attention rows, [B, Tx] each
    focus: Tensor | None           # [B, Tx]
    q: GaussianParams | None
    p: GaussianParams | None
    latent: LatentSample | None
    post_enc: EncoderOutputs


class FocusCVAE:
    """Owns the parameter set and wires encoders, focus, attention, decoder."""

    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        scale = cfg.effective_init_scale
        d_h, d_z, vocab = cfg.d_h, cfg.d_z, cfg.vocab_size
        d_emb = d_z  # embedding width tied to the latent size
        latent = uses_latent(cfg.variant)

        u = lambda *shape: Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)
        self.embedding = u(vocab, d_emb)
        self.encoder = init_encoder_weights(rng, d_emb, d_h, n_layers=2, scale=scale)

        if latent:
            self.recognition = AffineWeights(u(2 * d_h, 2 * d_z), u(2 * d_z))
            self.prior = AffineWeights(u(d_h, 2 * d_z), u(2 * d_z))
            self.focus = FocusWeights(W_f=u(d_h, d_h), U_f=u(d_z, d_h), v_f=u(d_h, 1))
            # a flat focus is a fixed point of the alignment penalty (flat
            # matches flat attention for free), so start the scorer wide
            # enough that its softmax is peaked from step one
            self.focus.v_f.data *= FOCUS_SCORE_GAIN
            self.bow = BowWeights(W1=u(d_z + d_h, d_h), b1=u(d_h), W2=u(d_h, vocab), b2=u(vocab))
        else:
            self.recognition = self.prior = self.focus = self.bow = None

        d_states = d_h + 1 if latent else d_h
        self.attention = AttentionWeights(
            W_a=u(d_states, d_h), U_a=u(d_h, d_h), v_a=u(d_h, 1),
            V_a=u(d_states, d_h) if uses_coverage_term(cfg.variant) else None)
        if latent:
            # the focus value is a single input among d_h+1; its score weights
            # start larger so attention feels the focus from the first steps
            self.attention.W_a.data[-1] *= ATTN_FOCUS_GAIN

        d_cond = d_h + (d_z if latent and cfg.s0_uses_latent else 0)
        d_ctx = d_states if cfg.context_uses_augmented else d_h
        self.decoder = init_decoder_weights(rng, d_emb, d_h, d_cond, d_ctx, vocab, scale)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {"embedding.weight": self.embedding}
        out.update(self.encoder.named("encoder"))
        if self.recognition is not None:
            out.update(self.recognition.named("recognition"))
            out.update(self.prior.named("prior"))
            out.update(self.focus.named("focus"))
            out.update(self.bow.named("bow"))
        out.update(self.attention.named("attention"))
        out.update(self.decoder.named("decoder"))
        return out

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    @classmethod
    def from_arrays(cls, cfg: TrainConfig, arrays: dict[str, np.ndarray]) -> "FocusCVAE":
        """Rebuild a model and overwrite its parameters from named arrays."""
        model = cls(cfg, np.random.default_rng(0))
        params = model.named_parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ValidationError(f"parameter names do not match (missing {missing}, extra {extra})")
        for name, p in params.items():
            if p.data.shape != arrays[name].shape:
                raise DimensionError(
                    f"{name}: stored shape {arrays[name].shape} vs model shape {p.data.shape}")
            p.data = np.asarray(arrays[name], dtype=np.float64).copy()
        return model

    # -- forward pieces -----------------------------------------------------

    def encode_sequences(self, ids: np.ndarray, mask: np.ndarray) -> EncoderOutputs:
        return encode(ids, mask, self.embedding, self.encoder)

    def latent_posterior(self, post_enc: EncoderOutputs, resp_enc: EncoderOutputs
                         ) -> tuple[GaussianParams, GaussianParams]:
        cfg = self.cfg
        q = recognition(post_enc.pooled, resp_enc.pooled, self.recognition, cfg.d_z,
                        cfg.log_var_min, cfg.log_var_max)
        p = prior(post_enc.pooled, self.prior, cfg.d_z, cfg.log_var_min, cfg.log_var_max)
        return q, p

    def _conditioning(self, post_enc: EncoderOutputs, z: Tensor | None) -> Tensor:
        if z is not None and self.cfg.s0_uses_latent:
            return ad.concat([post_enc.pooled, z], axis=1)
        return post_enc.pooled

    def _focus_and_setup(self, post_enc: EncoderOutputs, post_mask: np.ndarray,
                         z: Tensor | None) -> tuple[Tensor | None, AttentionSetup]:
        if z is None:
            setup = build_attention(post_enc.states_flat, None, post_mask,
                                    self.attention, self.cfg.variant,
                                    self.cfg.context_uses_augmented)
            return None, setup
        f = focus_generate(post_enc.states_flat, post_mask, z, self.focus)
        aug = augment_with_focus(post_enc.states_flat, f)
        setup = build_attention(post_enc.states_flat, aug, post_mask,
                                self.attention, self.cfg.variant,
                                self.cfg.context_uses_augmented)
        return f, setup

    def forward_train(self, batch: Batch, eps: np.ndarray | None) -> ForwardPass:
        """Teacher-forced pass with the recognition network providing z."""
        post_enc = self.encode_sequences(batch.post_ids, batch.post_mask)
        if uses_latent(self.cfg.variant):
            resp_enc = self.encode_sequences(batch.resp_ids, batch.resp_mask)
            q, p = self.latent_posterior(post_enc, resp_enc)
            lat = sample(q, eps=eps, source="recognition")
            z = lat.z
        else:
            q = p = lat = z = None
        f, setup = self._focus_and_setup(post_enc, batch.post_mask, z)
        init = initial_states(self._conditioning(post_enc, z), self.decoder)
        logits_flat, coverage, alphas = decode_train(
            batch.resp_ids, batch.resp_mask, setup, self.embedding, self.decoder, init)
        return ForwardPass(logits_flat, coverage, alphas, f, q, p, lat, post_enc)

    def bow_logits(self, z: Tensor, post_enc: EncoderOutputs) -> Tensor:
        h = ad.tanh(ad.bias_add(ad.matmul(ad.concat([z, post_enc.pooled], axis=1),
                                          self.bow.W1), self.bow.b1))
        return ad.bias_add(ad.matmul(h, self.bow.W2), self.bow.b2)

    # -- generation ---------------------------------------------------------

    def generate_rows(self, post_ids: np.ndarray, post_mask: np.ndarray,
                      eps_rows: np.ndarray | None, max_len: int) -> list[GenerationResult]:
        """Greedy-decode one batch of rows; z comes from the prior (row i uses
        eps_rows[i]).  For s2s eps_rows must be None."""
        post_enc = self.encode_sequences(post_ids, post_mask)
        if uses_latent(self.cfg.variant):
            if eps_rows is None:
                raise ValidationError("latent variants need one eps row per generation")
            p = prior(post_enc.pooled, self.prior, self.cfg.d_z,
                      self.cfg.log_var_min, self.cfg.log_var_max)
            lat = sample(p, eps=eps_rows, source="prior")
            z, z_source = lat.z, "prior"
        else:
            if eps_rows is not None:
                raise ValidationError("s2s takes no latent draws")
            z, z_source = None, "none"
        f, setup = self._focus_and_setup(post_enc, post_mask, z)
        init = initial_states(self._conditioning(post_enc, z), self.decoder)
        focus_rows = f.data if f is not None else None
        return greedy_decode(setup, self.embedding, self.decoder, init, max_len,
                             focus_rows, z_source)

    def generate(self, post: np.ndarray, n_samples: int, rng: np.random.Generator,
                 max_len: int) -> list[GenerationResult]:
        """n greedy samples for a single post, one prior draw each."""
        if n_samples < 1:
            raise ValidationError("n_samples must be positive")
        post = np.asarray(post, dtype=np.int64).reshape(1, -1)
        ids = np.repeat(post, n_samples, axis=0)
        mask = np.ones_like(ids, dtype=bool)
        eps = None
        if uses_latent(self.cfg.variant):
            eps = rng.standard_normal((n_samples, self.cfg.d_z))
        return self.generate_rows(ids, mask, eps, max_len)
