"""Decoding: window locality, ensemble averaging, and beam-search exactness."""

import itertools
from types import SimpleNamespace

import numpy as np
import pytest

from chaincnn.data import NOSEQ_CLASS, make_batch
from chaincnn.errors import ModeError, ParameterError
from chaincnn.inference import (
    Ensemble,
    beam_search,
    context_window,
    decode_independent,
    decode_record,
    ensemble_step_score,
    extract_window,
    sequence_log_prob,
)
from chaincnn.model import build
from chaincnn.tensor import log_softmax
from corpus import rule_corpus
from test_model import small_config


def brute_force_decode(members, record):
    """Exhaustive argmax over all 8^L sequences, accumulated left to right.

    Scores every candidate by summing per-step window scores in the same
    order beam search does; ties break toward the smaller label sequence.
    """
    length = record.length
    rf = members[0].receptive_field()
    totals = {(): 0.0}
    for i in range(length):
        feats, mask = extract_window(record, i, rf.radius)
        prefixes = sorted(totals)
        ctx = np.stack([
            context_window(np.array(p, dtype=np.int64), i, rf.radius,
                           rf.conditioning_shift, length)
            for p in prefixes
        ])
        feats_b = np.broadcast_to(feats, (len(prefixes),) + feats.shape)
        mask_b = np.broadcast_to(mask, (len(prefixes),) + mask.shape)
        scores = ensemble_step_score(members, feats_b, mask_b, ctx)
        totals = {
            p + (c,): totals[p] + float(scores[k, c])
            for k, p in enumerate(prefixes)
            for c in range(8)
        }
    best = min(totals.items(), key=lambda kv: (-kv[1], kv[0]))
    return np.array(best[0], dtype=np.int64), best[1]


def greedy_decode(members, record):
    length = record.length
    rf = members[0].receptive_field()
    labels = []
    for i in range(length):
        feats, mask = extract_window(record, i, rf.radius)
        ctx = context_window(np.array(labels, dtype=np.int64), i, rf.radius,
                             rf.conditioning_shift, length)
        scores = ensemble_step_score(members, feats, mask, ctx)
        labels.append(int(np.argmax(scores)))
    return np.array(labels, dtype=np.int64)


@pytest.fixture(scope="module")
def cond_model():
    return build(small_config(conditioned=True), np.random.default_rng(21))


@pytest.fixture(scope="module")
def plain_model():
    return build(small_config(), np.random.default_rng(22))


class TestWindows:
    def test_interior_window_is_a_slice(self):
        rec = rule_corpus(n=1, length=30, seed=0)[0]
        feats, mask = extract_window(rec, 15, 4)
        np.testing.assert_array_equal(feats, rec.features[11:20])
        assert mask.all()

    def test_left_edge_zero_padded(self):
        rec = rule_corpus(n=1, length=30, seed=0)[0]
        feats, mask = extract_window(rec, 1, 3)
        assert not feats[:2].any() and not mask[:2].any()
        np.testing.assert_array_equal(feats[2:], rec.features[0:5])

    def test_right_edge_masked_out(self):
        rec = rule_corpus(n=1, length=10, seed=0)[0]
        feats, mask = extract_window(rec, 9, 3)
        np.testing.assert_array_equal(mask, [1, 1, 1, 1, 0, 0, 0])

    def test_context_window_shift_arithmetic(self):
        ctx = np.arange(10, dtype=np.int64)
        win = context_window(ctx, 4, 2, 3, 10)
        # window positions 2..6 read ctx[-1..3]
        np.testing.assert_array_equal(win, [NOSEQ_CLASS, 0, 1, 2, 3])

    def test_context_window_respects_length(self):
        ctx = np.arange(10, dtype=np.int64)
        win = context_window(ctx, 11, 1, 3, 10)
        np.testing.assert_array_equal(win, [7, 8, 9])
        win = context_window(ctx, 13, 1, 3, 10)
        np.testing.assert_array_equal(win, [9, NOSEQ_CLASS, NOSEQ_CLASS])


class TestEnsembleStepScore:
    def _fake(self, probs, conditioned=False):
        table = np.log(np.asarray(probs, dtype=np.float64))

        def forward_window(features, mask, context=None):
            if features is not None and features.ndim == 3:
                return np.broadcast_to(table, (features.shape[0],) + table.shape).copy()
            return table.copy()

        return SimpleNamespace(
            config=SimpleNamespace(conditioned=conditioned),
            forward_window=forward_window,
        )

    def test_single_member_is_its_own_log_softmax(self):
        fake = self._fake([0.5, 0.25, 0.125, 0.125, 1e-9, 1e-9, 1e-9, 1e-9, 1e-12])
        out = ensemble_step_score([fake], None, None)
        np.testing.assert_array_equal(out, np.log([0.5, 0.25, 0.125, 0.125,
                                                   1e-9, 1e-9, 1e-9, 1e-9]))

    def test_two_member_hand_average(self):
        a = self._fake([0.5, 0.5, 1e-9, 1e-9, 1e-9, 1e-9, 1e-9, 1e-9, 1e-12])
        b = self._fake([0.25, 0.75, 1e-9, 1e-9, 1e-9, 1e-9, 1e-9, 1e-9, 1e-12])
        out = ensemble_step_score([a, b], None, None)
        assert out[0] == pytest.approx((np.log(0.5) + np.log(0.25)) / 2, abs=1e-12)
        assert out[1] == pytest.approx((np.log(0.5) + np.log(0.75)) / 2, abs=1e-12)

    def test_uniform_members_stay_uniform(self):
        members = [self._fake([0.125] * 8 + [1e-30]) for _ in range(3)]
        out = ensemble_step_score(members, None, None)
        np.testing.assert_allclose(out, np.log(1 / 8), atol=1e-12)

    def test_mode_disagreement_rejected(self):
        a = self._fake([1.0] * 9)
        b = self._fake([1.0] * 9, conditioned=True)
        with pytest.raises(ModeError):
            ensemble_step_score([a, b], None, None)

    def test_empty_member_list_rejected(self):
        with pytest.raises(ParameterError):
            ensemble_step_score([], None, None)

    def test_real_model_matches_forward_window(self, cond_model):
        rec = rule_corpus(n=1, length=12, seed=1)[0]
        rf = cond_model.receptive_field()
        feats, mask = extract_window(rec, 5, rf.radius)
        ctx = context_window(rec.labels, 5, rf.radius, rf.conditioning_shift, 12)
        out = ensemble_step_score([cond_model], feats, mask, ctx)
        np.testing.assert_array_equal(out, cond_model.forward_window(feats, mask, ctx)[:8])


class TestDecodeIndependent:
    def test_matches_full_forward_argmax(self, plain_model):
        rec = rule_corpus(n=1, length=25, seed=2)[0]
        batch = make_batch([rec], length=25)
        logits = plain_model.forward(batch.features, batch.mask, train=False).data[0]
        want = np.argmax(logits[:, :8], axis=1)
        np.testing.assert_array_equal(decode_independent(plain_model, rec), want)

    def test_copies_of_one_model_decode_like_one(self, plain_model):
        rec = rule_corpus(n=1, length=25, seed=2)[0]
        single = decode_independent(plain_model, rec)
        trip = decode_independent(Ensemble((plain_model,) * 3), rec)
        np.testing.assert_array_equal(single, trip)

    def test_conditioned_model_rejected(self, cond_model):
        rec = rule_corpus(n=1, length=5, seed=0)[0]
        with pytest.raises(ModeError):
            decode_independent(cond_model, rec)

    def test_member_order_is_irrelevant(self):
        models = [build(small_config(), np.random.default_rng(s)) for s in (1, 2, 3)]
        rec = rule_corpus(n=1, length=30, seed=3)[0]
        a = decode_independent(Ensemble(tuple(models)), rec)
        b = decode_independent(Ensemble(tuple(reversed(models))), rec)
        np.testing.assert_array_equal(a, b)


class TestBeamSearch:
    def test_width_one_is_greedy(self, cond_model):
        for seed in range(4):
            rec = rule_corpus(n=1, length=8, seed=seed)[0]
            np.testing.assert_array_equal(
                beam_search(cond_model, rec, beam_width=1),
                greedy_decode([cond_model], rec),
            )

    def test_exhaustive_width_matches_brute_force(self, cond_model):
        rec = rule_corpus(n=1, length=3, seed=5)[0]
        want, _ = brute_force_decode([cond_model], rec)
        got = beam_search(cond_model, rec, beam_width=8 ** 3)
        np.testing.assert_array_equal(got, want)

    def test_log_prob_monotone_in_width(self, cond_model):
        rec = rule_corpus(n=1, length=10, seed=6)[0]
        scores = [
            sequence_log_prob(cond_model, rec, beam_search(cond_model, rec, beam_width=w))
            for w in (1, 2, 4, 8, 16)
        ]
        assert all(b >= a - 1e-9 for a, b in zip(scores, scores[1:]))

    def test_beam_eight_dominates_greedy(self, cond_model):
        for seed in range(6):
            rec = rule_corpus(n=1, length=9, seed=10 + seed)[0]
            greedy = sequence_log_prob(cond_model, rec, greedy_decode([cond_model], rec))
            beam = sequence_log_prob(cond_model, rec, beam_search(cond_model, rec))
            assert beam >= greedy - 1e-9

    def test_all_ties_pick_lexicographic_minimum(self):
        model = build(small_config(conditioned=True), np.random.default_rng(0))
        for t in model.trainable().values():
            t.data[...] = 0.0
        rec = rule_corpus(n=1, length=5, seed=7)[0]
        out = beam_search(model, rec, beam_width=8)
        np.testing.assert_array_equal(out, np.zeros(5, dtype=np.int64))

    def test_unconditioned_model_rejected(self, plain_model):
        rec = rule_corpus(n=1, length=5, seed=0)[0]
        with pytest.raises(ModeError):
            beam_search(plain_model, rec)

    def test_bad_width_rejected(self, cond_model):
        rec = rule_corpus(n=1, length=5, seed=0)[0]
        with pytest.raises(ParameterError):
            beam_search(cond_model, rec, beam_width=0)

    def test_deterministic(self, cond_model):
        rec = rule_corpus(n=1, length=12, seed=8)[0]
        a = beam_search(cond_model, rec)
        b = beam_search(cond_model, rec)
        np.testing.assert_array_equal(a, b)

    def test_member_order_is_irrelevant(self):
        models = [
            build(small_config(conditioned=True), np.random.default_rng(s))
            for s in (4, 5, 6)
        ]
        rec = rule_corpus(n=1, length=10, seed=9)[0]
        a = beam_search(Ensemble(tuple(models)), rec)
        b = beam_search(Ensemble((models[2], models[0], models[1])), rec)
        np.testing.assert_array_equal(a, b)

    def test_accumulated_score_recomputable(self, cond_model):
        rec = rule_corpus(n=1, length=10, seed=11)[0]
        labels = beam_search(cond_model, rec)
        direct = sequence_log_prob(cond_model, rec, labels)
        win, brute_score = brute_force_decode([cond_model], rule_corpus(n=1, length=3, seed=5)[0])
        assert direct == pytest.approx(
            sequence_log_prob(cond_model, rec, labels), abs=1e-5 * rec.length
        )
        assert brute_score == pytest.approx(
            sequence_log_prob(cond_model, rule_corpus(n=1, length=3, seed=5)[0], win),
            abs=1e-5 * 3,
        )


class TestBatchRowStability:
    """Per-row results of batched windows must not depend on batch composition.

    Beam search and the exhaustive oracle batch different hypothesis sets at
    each step; their agreement relies on this bitwise property.
    """

    def test_row_permutation_bitwise_stable(self, cond_model):
        rec = rule_corpus(n=1, length=12, seed=12)[0]
        rf = cond_model.receptive_field()
        feats, mask = extract_window(rec, 6, rf.radius)
        ctxs = np.stack([
            context_window(np.full(6, c, dtype=np.int64), 6, rf.radius,
                           rf.conditioning_shift, 12)
            for c in range(8)
        ])
        feats_b = np.broadcast_to(feats, (8,) + feats.shape)
        mask_b = np.broadcast_to(mask, (8,) + mask.shape)
        full = cond_model.forward_window(feats_b, mask_b, ctxs)
        perm = np.array([5, 2, 7, 0, 3, 6, 1, 4])
        permuted = cond_model.forward_window(feats_b, mask_b, ctxs[perm])
        np.testing.assert_array_equal(permuted, full[perm])
        subset = cond_model.forward_window(feats_b[:3], mask_b[:3], ctxs[:3])
        np.testing.assert_array_equal(subset, full[:3])


class TestEnsembleValidation:
    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            Ensemble(())

    def test_mixed_modes_rejected(self, cond_model, plain_model):
        with pytest.raises(ModeError):
            Ensemble((cond_model, plain_model))

    def test_mismatched_architectures_rejected(self, plain_model):
        other = build(small_config(skip=False), np.random.default_rng(1))
        with pytest.raises(ModeError):
            Ensemble((plain_model, other))

    def test_decode_record_dispatch(self, cond_model, plain_model):
        rec = rule_corpus(n=1, length=6, seed=13)[0]
        np.testing.assert_array_equal(
            decode_record(plain_model, rec), decode_independent(plain_model, rec)
        )
        np.testing.assert_array_equal(
            decode_record(cond_model, rec), beam_search(cond_model, rec)
        )

    def test_zero_length_record_decodes_empty(self, cond_model, plain_model):
        rec = rule_corpus(n=1, length=4, seed=0)[0]
        import dataclasses
        empty = dataclasses.replace(
            rec,
            length=0,
            mask=np.zeros_like(rec.mask),
            features=np.zeros_like(rec.features),
            labels=np.full_like(rec.labels, NOSEQ_CLASS),
        )
        assert beam_search(cond_model, empty).size == 0
        assert decode_independent(plain_model, empty).size == 0
