"""Loss terms, schedules, the optimizer, checkpoints, and the loop."""

import math
from pathlib import Path

import numpy as np
import pytest

from focuscvae import training as tr
from focuscvae.autodiff import Tape, Tensor
from focuscvae.config import TrainConfig
from focuscvae.corpus import EOS_ID, PostResponsePair, collate, generate_synthetic, to_pairs
from focuscvae.errors import (CompatibilityError, ConfigError, IntegrityError,
                              NumericalError, ValidationError, VersionError)
from focuscvae.model import FocusCVAE

# independently derived anchors
LN_4 = 1.3862943611198906
LN_50 = 3.912023005428146
HALF_SQRT_HALF = 0.7071067811865476


def micro_cfg(variant="focconstrain", **over):
    base = dict(variant=variant, vocab_size=7, d_h=4, d_z=4, batch_size=2,
                init_scale=0.3, seed=5, total_steps=8, warmup_steps=3,
                kl_anneal_steps=4, checkpoint_interval=4)
    base.update(over)
    return TrainConfig(**base)


def micro_model(variant="focconstrain", seed=5, **over):
    cfg = micro_cfg(variant, seed=seed, **over)
    return FocusCVAE(cfg, np.random.default_rng([seed, 0]))


class TestSchedules:
    def test_anneal_ramps_linearly_then_saturates(self):
        assert tr.kl_anneal(0, 500) == 0.0
        assert tr.kl_anneal(250, 500) == 0.5
        assert tr.kl_anneal(500, 500) == 1.0
        assert tr.kl_anneal(10_000, 500) == 1.0

    def test_anneal_is_nondecreasing(self):
        vals = [tr.kl_anneal(s, 37) for s in range(120)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_anneal_validates(self):
        with pytest.raises(ConfigError):
            tr.kl_anneal(5, 0)
        with pytest.raises(ConfigError):
            tr.kl_anneal(-1, 10)

    def test_lr_known_points(self):
        assert tr.lr_schedule(4000, 8000, 0.0008) == 0.0004
        assert tr.lr_schedule(8000, 8000, 0.0008) == 0.0008
        assert tr.lr_schedule(32000, 8000, 0.0008) == pytest.approx(0.0004, abs=1e-18)

    def test_lr_continuous_at_warmup_boundary(self):
        for warmup, peak in ((200, 0.002), (7, 0.5), (1000, 1e-3)):
            ramp = tr.lr_schedule(warmup, warmup, peak)
            decay = peak * math.sqrt(warmup / (warmup + 1))
            assert ramp == peak
            assert tr.lr_schedule(warmup + 1, warmup, peak) == decay

    def test_lr_is_one_based(self):
        with pytest.raises(ConfigError):
            tr.lr_schedule(0, 10, 0.1)


class TestSeqLoss:
    def test_uniform_logits_cost_log_vocab(self):
        logits = Tensor(np.zeros((6, 4)))
        gold = np.array([0, 1, 2, 3, 0, 1])
        mask = np.ones(6, dtype=bool)
        assert tr.seq_loss(logits, gold, mask).item() == pytest.approx(LN_4, abs=1e-12)

    def test_masked_positions_cost_nothing(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(4, 5))
        poisoned = logits.copy()
        poisoned[2] = 1e6  # masked row, must not matter
        mask = np.array([True, True, False, True])
        gold = np.array([1, 2, 3, 4])
        a = tr.seq_loss(Tensor(logits), gold, mask).item()
        b = tr.seq_loss(Tensor(poisoned), gold, mask).item()
        assert a == b

    def test_perfect_prediction_drives_loss_down(self):
        logits = np.full((3, 4), -30.0)
        gold = np.array([1, 2, 0])
        logits[np.arange(3), gold] = 30.0
        val = tr.seq_loss(Tensor(logits), gold, np.ones(3, dtype=bool)).item()
        assert val < 1e-9

    def test_rejects_empty_mask_and_bad_ids(self):
        logits = Tensor(np.zeros((2, 4)))
        with pytest.raises(ValidationError):
            tr.seq_loss(logits, np.array([0, 1]), np.zeros(2, dtype=bool))
        with pytest.raises(ValidationError):
            tr.seq_loss(logits, np.array([0, 9]), np.ones(2, dtype=bool))


class TestFocusLoss:
    def test_frozen_single_row(self):
        cov = Tensor(np.array([[1.2, 0.8]]))
        focus = Tensor(np.array([[0.1, 0.9]]))
        val = tr.focus_loss(cov, np.array([2]), focus).item()
        assert val == pytest.approx(HALF_SQRT_HALF, abs=1e-12)

    def test_batch_mean_of_row_norms(self):
        cov = Tensor(np.array([[1.2, 0.8], [3.0, 0.0]]))
        focus = Tensor(np.array([[0.1, 0.9], [1.0, 0.0]]))
        val = tr.focus_loss(cov, np.array([2, 3]), focus).item()
        assert val == pytest.approx(HALF_SQRT_HALF / 2, abs=1e-12)

    def test_zero_when_coverage_matches_focus(self):
        focus = np.array([[0.25, 0.75], [0.5, 0.5]])
        cov = Tensor(focus * np.array([[4.0], [2.0]]))
        val = tr.focus_loss(cov, np.array([4, 2]), Tensor(focus.copy())).item()
        assert val == 0.0

    def test_gradient_flows_into_both_sides(self):
        cov = Tensor(np.array([[1.2, 0.8]]), requires_grad=True)
        focus = Tensor(np.array([[0.1, 0.9]]), requires_grad=True)
        with Tape() as tape:
            loss = tr.focus_loss(cov, np.array([2]), focus)
        tape.backward(loss)
        assert cov.grad is not None and np.abs(cov.grad).max() > 0
        assert focus.grad is not None and np.abs(focus.grad).max() > 0
        np.testing.assert_allclose(cov.grad * 2.0, -focus.grad, atol=1e-12)

    def test_validates_lengths_and_shapes(self):
        cov = Tensor(np.ones((1, 2)))
        with pytest.raises(ValidationError):
            tr.focus_loss(cov, np.array([0]), Tensor(np.ones((1, 2))))
        with pytest.raises(ValidationError):
            tr.focus_loss(cov, np.array([2]), Tensor(np.ones((1, 3))))


class TestBowLoss:
    def test_uniform_logits_cost_log_vocab(self):
        logits = Tensor(np.zeros((2, 50)))
        resp = np.array([[5, 6, EOS_ID], [7, EOS_ID, 0]])
        mask = np.array([[True, True, True], [True, True, False]])
        assert tr.bow_loss(logits, resp, mask).item() == pytest.approx(LN_50, abs=1e-12)

    def test_eos_and_pad_tokens_are_not_scored(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(1, 6))
        lsm = logits - np.log(np.exp(logits).sum())
        resp = np.array([[4, EOS_ID, 0]])
        mask = np.array([[True, True, False]])
        val = tr.bow_loss(Tensor(logits.copy()), resp, mask).item()
        assert val == pytest.approx(-lsm[0, 4], abs=1e-12)

    def test_all_structural_tokens_mean_zero_loss(self):
        resp = np.array([[EOS_ID, 0]])
        mask = np.array([[True, False]])
        assert tr.bow_loss(Tensor(np.zeros((1, 6))), resp, mask).item() == 0.0

    def test_row_count_must_match(self):
        with pytest.raises(ValidationError):
            tr.bow_loss(Tensor(np.zeros((3, 6))), np.array([[4, EOS_ID]]),
                        np.ones((1, 2), dtype=bool))


def random_micro_batch(rng, vocab=7):
    pairs = []
    for _ in range(2):
        post = rng.integers(3, vocab, size=int(rng.integers(2, 5))).astype(np.int64)
        resp = np.concatenate([rng.integers(3, vocab, size=int(rng.integers(1, 5))),
                               [EOS_ID]]).astype(np.int64)
        pairs.append(PostResponsePair(post, resp))
    return collate(pairs)


class TestTotalLoss:
    def test_breakdown_sums_to_total(self):
        rng = np.random.default_rng(17)
        for variant in ("s2s", "foc", "foccoverage", "focconstrain"):
            model = micro_model(variant)
            for _ in range(10):
                batch = random_micro_batch(rng)
                eps = (rng.standard_normal((1, batch.size, 4))
                       if variant != "s2s" else None)
                gamma = float(rng.uniform(0, 1))
                total, b = tr.total_loss(model, batch, eps, gamma)
                recon = b.l_seq + b.l_foc + b.gamma * b.l_kl + b.l_bow
                assert abs(b.total - recon) < 1e-9
                assert total.item() == b.total

    def test_gated_terms_are_exact_zeros(self):
        rng = np.random.default_rng(23)
        batch = random_micro_batch(rng)
        _, b = tr.total_loss(micro_model("s2s"), batch, None, 0.7)
        assert b.l_kl == 0.0 and b.l_bow == 0.0 and b.l_foc == 0.0
        eps = rng.standard_normal((1, batch.size, 4))
        _, b = tr.total_loss(micro_model("foc"), batch, eps, 0.7)
        assert b.l_foc == 0.0 and b.l_kl > 0.0
        _, b = tr.total_loss(micro_model("foccoverage"), batch, eps, 0.7)
        assert b.l_foc == 0.0
        _, b = tr.total_loss(micro_model("focconstrain"), batch, eps, 0.7)
        assert b.l_foc > 0.0

    def test_kl_term_never_negative(self):
        rng = np.random.default_rng(29)
        model = micro_model()
        for _ in range(20):
            batch = random_micro_batch(rng)
            eps = rng.standard_normal((1, batch.size, 4))
            _, b = tr.total_loss(model, batch, eps, 1.0)
            assert b.l_kl >= -1e-9

    def test_latent_variants_require_eps(self):
        batch = random_micro_batch(np.random.default_rng(0))
        with pytest.raises(ValidationError):
            tr.total_loss(micro_model("foc"), batch, None, 1.0)

    def test_multi_sample_averages(self):
        rng = np.random.default_rng(31)
        model = micro_model(n_latent_samples=3)
        batch = random_micro_batch(rng)
        eps = rng.standard_normal((3, batch.size, 4))
        _, b3 = tr.total_loss(model, batch, eps, 1.0)
        singles = [tr.total_loss(model, batch, eps[k:k + 1], 1.0)[1] for k in range(3)]
        assert b3.l_seq == pytest.approx(np.mean([s.l_seq for s in singles]), abs=1e-12)
        assert b3.l_kl == pytest.approx(singles[0].l_kl, abs=1e-15)


class TestAdam:
    def test_two_steps_match_hand_computation(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = tr.Adam({"p": p})
        m = v = np.zeros(2)
        theta = np.array([1.0, -2.0])
        for t, g in ((1, np.array([0.5, -1.0])), (2, np.array([-0.25, 2.0]))):
            p.grad = g.copy()
            opt.step(lr=0.1)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh, vh = m / (1 - 0.9 ** t), v / (1 - 0.999 ** t)
            theta = theta - 0.1 * mh / (np.sqrt(vh) + 1e-8)
            np.testing.assert_allclose(p.data, theta, atol=1e-15)

    def test_missing_grad_still_decays_moments(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = tr.Adam({"p": p})
        p.grad = np.ones(2)
        opt.step(0.1)
        p.grad = None
        opt.step(0.1)
        assert opt.t == 2
        np.testing.assert_allclose(opt.m["p"], 0.9 * 0.1 * np.ones(2), atol=1e-15)


class TestClipping:
    def test_scales_down_to_the_cap(self):
        a = Tensor(np.zeros(3), requires_grad=True)
        b = Tensor(np.zeros(4), requires_grad=True)
        a.grad = np.full(3, 3.0)
        b.grad = np.full(4, 4.0)
        params = {"a": a, "b": b}
        before = math.sqrt(27 + 64)
        norm = tr.clip_gradients(params, 5.0)
        assert norm == pytest.approx(before)
        after = math.sqrt(float(np.sum(a.grad ** 2) + np.sum(b.grad ** 2)))
        assert after == pytest.approx(5.0, abs=1e-12)

    def test_small_gradients_untouched(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([0.3, 0.4])
        tr.clip_gradients({"a": a}, 5.0)
        np.testing.assert_array_equal(a.grad, [0.3, 0.4])

    def test_zero_cap_disables(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([300.0, 400.0])
        norm = tr.clip_gradients({"a": a}, 0.0)
        assert norm == pytest.approx(500.0)
        np.testing.assert_array_equal(a.grad, [300.0, 400.0])


class TestCheckpoint:
    def state(self, tmp_path, cfg=None):
        cfg = cfg or micro_cfg()
        model = FocusCVAE(cfg, np.random.default_rng(1))
        adam = tr.Adam(model.named_parameters())
        return tr.checkpoint_from(model, adam, step=4, meta={"max_train_resp_len": 6})

    def test_roundtrip_preserves_everything(self, tmp_path):
        st = self.state(tmp_path)
        path = tmp_path / "c.bin"
        tr.save_checkpoint(path, st)
        back = tr.load_checkpoint(path)
        assert back.config == st.config and back.step == 4 and back.adam_t == 0
        assert back.meta == st.meta
        assert set(back.params) == set(st.params)
        for k in st.params:
            np.testing.assert_array_equal(back.params[k], st.params[k])
            np.testing.assert_array_equal(back.adam_m[k], st.adam_m[k])

    def test_resave_is_byte_identical(self, tmp_path):
        st = self.state(tmp_path)
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        tr.save_checkpoint(a, st)
        tr.save_checkpoint(b, tr.load_checkpoint(a))
        assert a.read_bytes() == b.read_bytes()

    def test_corruption_is_detected(self, tmp_path):
        st = self.state(tmp_path)
        path = tmp_path / "c.bin"
        tr.save_checkpoint(path, st)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError):
            tr.load_checkpoint(path)

    def test_wrong_magic_and_version(self, tmp_path):
        st = self.state(tmp_path)
        path = tmp_path / "c.bin"
        tr.save_checkpoint(path, st)
        blob = bytearray(path.read_bytes())

        other = tmp_path / "junk.bin"
        other.write_bytes(b"JUNK" + bytes(blob[4:]))
        with pytest.raises(IntegrityError):
            tr.load_checkpoint(other)

        blob[4:8] = (99).to_bytes(4, "little")
        body = bytes(blob[:-32])
        import hashlib
        (tmp_path / "v99.bin").write_bytes(body + hashlib.sha256(body).digest())
        with pytest.raises(VersionError):
            tr.load_checkpoint(tmp_path / "v99.bin")

    def test_restore_rebuilds_a_working_model(self, tmp_path):
        st = self.state(tmp_path)
        model, adam = tr.restore_model(st)
        for k, p in model.named_parameters().items():
            np.testing.assert_array_equal(p.data, st.params[k])
        assert adam.t == st.adam_t


def tiny_corpus():
    records, vocab = generate_synthetic(seed=7, n_pairs=40)
    return to_pairs(records, vocab), vocab


class TestTrainLoop:
    def test_reruns_are_byte_identical(self, tmp_path):
        pairs, vocab = tiny_corpus()
        cfg = micro_cfg(vocab_size=len(vocab), d_h=8, d_z=4, batch_size=4)
        tr.train(cfg, pairs, out_dir=tmp_path / "a")
        tr.train(cfg, pairs, out_dir=tmp_path / "b")
        assert ((tmp_path / "a" / "loss_log.csv").read_bytes()
                == (tmp_path / "b" / "loss_log.csv").read_bytes())

    def test_log_layout(self, tmp_path):
        pairs, vocab = tiny_corpus()
        cfg = micro_cfg(vocab_size=len(vocab), d_h=8, d_z=4, batch_size=4)
        res = tr.train(cfg, pairs, out_dir=tmp_path)
        lines = (tmp_path / "loss_log.csv").read_text().splitlines()
        assert lines[0] == "step,l_seq,l_foc,l_kl,l_bow,gamma,lr,total"
        assert len(lines) == cfg.total_steps + 1
        first = lines[1].split(",")
        assert first[0] == "0" and float(first[5]) == 0.0  # gamma starts at zero
        assert res.rows == lines[1:]

    def test_resume_matches_uninterrupted(self, tmp_path):
        pairs, vocab = tiny_corpus()
        full_cfg = micro_cfg(vocab_size=len(vocab), d_h=8, d_z=4, batch_size=4,
                             total_steps=8, checkpoint_interval=4)
        full = tr.train(full_cfg, pairs, out_dir=None)

        head_cfg = micro_cfg(vocab_size=len(vocab), d_h=8, d_z=4, batch_size=4,
                             total_steps=4, checkpoint_interval=4)
        tr.train(head_cfg, pairs, out_dir=tmp_path)
        st = tr.load_checkpoint(tmp_path / "checkpoint.bin")
        assert st.step == 4
        resumed = tr.train(full_cfg, pairs, out_dir=None, resume=st)
        assert resumed.rows == full.rows[4:]
        for k, p in resumed.model.named_parameters().items():
            np.testing.assert_array_equal(p.data, full.model.named_parameters()[k].data)

    def test_resume_rejects_different_model_config(self, tmp_path):
        pairs, vocab = tiny_corpus()
        cfg = micro_cfg(vocab_size=len(vocab), d_h=8, d_z=4, batch_size=4,
                        total_steps=4, checkpoint_interval=4)
        tr.train(cfg, pairs, out_dir=tmp_path)
        st = tr.load_checkpoint(tmp_path / "checkpoint.bin")
        other = micro_cfg(vocab_size=len(vocab), d_h=8, d_z=4, batch_size=4,
                          total_steps=8, checkpoint_interval=4, seed=99)
        with pytest.raises(CompatibilityError):
            tr.train(other, pairs, out_dir=None, resume=st)

    def test_resume_rejects_exhausted_budget(self, tmp_path):
        pairs, vocab = tiny_corpus()
        cfg = micro_cfg(vocab_size=len(vocab), d_h=8, d_z=4, batch_size=4,
                        total_steps=4, checkpoint_interval=4)
        tr.train(cfg, pairs, out_dir=tmp_path)
        st = tr.load_checkpoint(tmp_path / "checkpoint.bin")
        with pytest.raises(ValidationError):
            tr.train(cfg, pairs, out_dir=None, resume=st)

    def test_vocab_overflow_is_rejected(self):
        pairs, vocab = tiny_corpus()
        cfg = micro_cfg(vocab_size=8)
        with pytest.raises(CompatibilityError):
            tr.train(cfg, pairs, out_dir=None)

    def test_non_finite_loss_aborts_with_the_term_named(self, tmp_path):
        pairs, vocab = tiny_corpus()
        cfg = micro_cfg(vocab_size=len(vocab), d_h=8, d_z=4, batch_size=4,
                        total_steps=4, checkpoint_interval=4)
        tr.train(cfg, pairs, out_dir=tmp_path)
        st = tr.load_checkpoint(tmp_path / "checkpoint.bin")
        st.params["embedding.weight"][0, 0] = np.nan
        longer = micro_cfg(vocab_size=len(vocab), d_h=8, d_z=4, batch_size=4,
                           total_steps=8, checkpoint_interval=4)
        with pytest.raises(NumericalError, match="l_"):
            tr.train(longer, pairs, out_dir=None, resume=st)

    def test_checkpoint_written_at_interval_and_end(self, tmp_path):
        pairs, vocab = tiny_corpus()
        cfg = micro_cfg(vocab_size=len(vocab), d_h=8, d_z=4, batch_size=4,
                        total_steps=6, checkpoint_interval=4)
        res = tr.train(cfg, pairs, out_dir=tmp_path)
        st = tr.load_checkpoint(tmp_path / "checkpoint.bin")
        assert st.step == 6  # final save wins, interval saves happened on the way
        assert res.final_state.step == 6
        assert st.meta["max_train_resp_len"] == max(len(p.response) for p in pairs)


class TestMicroGradcheck:
    def test_smallest_variant_passes(self):
        rep = tr.micro_gradcheck("s2s", seed=1)
        assert rep.passed and rep.max_rel_err < 1e-4
        assert "pass" in rep.format().lower()
