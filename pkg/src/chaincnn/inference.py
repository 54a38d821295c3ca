"""Decoding: independent argmax, width-8 beam search, and log-prob ensembles.

Beam scoring evaluates the receptive-field window around each position via
``Model.forward_window`` instead of re-running the full forward per step;
the two are equivalent because nothing outside the window can reach the
center logit. Ensembles average the members' log probabilities per class.
"""

from dataclasses import dataclass

import numpy as np

from .data import NOSEQ_CLASS, ProteinRecord
from .errors import ModeError, ParameterError
from .model import Model

NUM_REAL_CLASSES = 8
DEFAULT_BEAM_WIDTH = 8


@dataclass(frozen=True)
class Ensemble:
    """Independently trained models decoded jointly; configs must agree."""

    members: tuple[Model, ...]

    def __post_init__(self):
        if not self.members:
            raise ParameterError("an ensemble needs at least one member")
        first = self.members[0].config
        for m in self.members[1:]:
            if m.config.conditioned != first.conditioned:
                raise ModeError("ensemble members disagree on conditioning mode")
            if m.config != first:
                raise ModeError("ensemble members must share one architecture")

    @property
    def conditioned(self) -> bool:
        return self.members[0].config.conditioned


def _members(model_or_ensemble) -> tuple[Model, ...]:
    if isinstance(model_or_ensemble, Ensemble):
        return model_or_ensemble.members
    return (model_or_ensemble,)


def extract_window(record: ProteinRecord, center: int, radius: int):
    """Feature/mask window of width 2*radius+1 centered on ``center``.

    Positions outside the padded buffer read as zero features with zero mask,
    indistinguishable from stored padding.
    """
    width = 2 * radius + 1
    nf = record.features.shape[1]
    feats = np.zeros((width, nf), dtype=np.float32)
    mask = np.zeros(width, dtype=np.float32)
    lo = center - radius
    a = max(lo, 0)
    b = min(center + radius + 1, record.features.shape[0])
    if a < b:
        feats[a - lo : b - lo] = record.features[a:b]
        mask[a - lo : b - lo] = record.mask[a:b]
    return feats, mask


def context_window(context: np.ndarray, center: int, radius: int, shift: int, length: int) -> np.ndarray:
    """Label indices feeding the conditioning channels of one window.

    Window position j carries context[j - shift]; entries before the first
    position or past ``length`` read as the no-seq label, matching padding.
    """
    positions = np.arange(center - radius, center + radius + 1) - shift
    out = np.full(positions.shape, NOSEQ_CLASS, dtype=np.int64)
    valid = (positions >= 0) & (positions < length)
    out[valid] = np.asarray(context, dtype=np.int64)[positions[valid]]
    return out


def _mean_over_members(scores: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean that is bitwise invariant to member order.

    Values are sorted per element before summing so the reduction order is
    canonical regardless of how the ensemble was assembled.
    """
    if len(scores) == 1:
        return scores[0]
    stacked = np.sort(np.stack(scores), axis=0)
    return stacked.sum(axis=0) / len(scores)


def ensemble_step_score(members, features, mask, context=None) -> np.ndarray:
    """Per-class averaged log probabilities over the 8 structure classes.

    ``features``/``mask`` may be a single window or a batch of windows;
    returns (8,) or (batch, 8) float64 accordingly.
    """
    members = tuple(members)
    if not members:
        raise ParameterError("no models to score with")
    conditioned = members[0].config.conditioned
    if any(m.config.conditioned != conditioned for m in members):
        raise ModeError("ensemble members disagree on conditioning mode")
    scores = [m.forward_window(features, mask, context) for m in members]
    return _mean_over_members(scores)[..., :NUM_REAL_CLASSES]


def decode_independent(model_or_ensemble, record: ProteinRecord) -> np.ndarray:
    """Argmax of (ensemble-averaged) log probabilities per masked-in position."""
    from .data import make_batch
    from .tensor import log_softmax

    members = _members(model_or_ensemble)
    if any(m.config.conditioned for m in members):
        raise ModeError("independent decoding needs unconditioned models")
    if record.length == 0:
        return np.zeros(0, dtype=np.int64)
    batch = make_batch([record], length=record.length)
    scores = [
        log_softmax(m.forward(batch.features, batch.mask, train=False).data[0])
        for m in members
    ]
    mean = _mean_over_members(scores)
    return np.argmax(mean[:, :NUM_REAL_CLASSES], axis=1).astype(np.int64)


def _best_first(candidates):
    """Sort hypotheses by higher log_prob, then lexicographically smaller labels."""
    return sorted(candidates, key=lambda c: (-c[0], c[1]))


def beam_search(model_or_ensemble, record: ProteinRecord, beam_width: int = DEFAULT_BEAM_WIDTH) -> np.ndarray:
    """Left-to-right beam decode over the 8 structure classes.

    Each step extends every live hypothesis by all 8 classes, scores the
    extensions by accumulated float64 log probability, and keeps the best
    ``beam_width``. Ties break toward the lexicographically smaller label
    sequence. Returns the labels of the best complete hypothesis.
    """
    members = _members(model_or_ensemble)
    if not all(m.config.conditioned for m in members):
        raise ModeError("beam search needs next-step conditioned models")
    if beam_width < 1:
        raise ParameterError(f"beam width must be >= 1, got {beam_width}")
    if record.length == 0:
        return np.zeros(0, dtype=np.int64)

    rf = members[0].receptive_field()
    length = record.length
    beam = [(0.0, ())]  # (accumulated log_prob, labels so far)
    for i in range(length):
        feats, mask = extract_window(record, i, rf.radius)
        feats_b = np.broadcast_to(feats, (len(beam),) + feats.shape)
        mask_b = np.broadcast_to(mask, (len(beam),) + mask.shape)
        ctx_b = np.stack([
            context_window(np.array(labels, dtype=np.int64), i, rf.radius,
                           rf.conditioning_shift, length)
            for _, labels in beam
        ])
        scores = ensemble_step_score(members, feats_b, mask_b, ctx_b)
        candidates = [
            (log_prob + float(scores[h, c]), labels + (c,))
            for h, (log_prob, labels) in enumerate(beam)
            for c in range(NUM_REAL_CLASSES)
        ]
        beam = _best_first(candidates)[:beam_width]
    best = _best_first(beam)[0]
    return np.array(best[1], dtype=np.int64)


def sequence_log_prob(model_or_ensemble, record: ProteinRecord, labels) -> float:
    """Accumulated log probability of a complete label sequence.

    Teacher-forces ``labels`` through the conditioning channels step by step,
    summing per-position scores left to right in float64. Useful for checking
    beam results against independently rescored hypotheses.
    """
    members = _members(model_or_ensemble)
    rf = members[0].receptive_field()
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != record.length:
        raise ParameterError(
            f"sequence covers {labels.shape[0]} of {record.length} positions"
        )
    total = 0.0
    for i in range(record.length):
        feats, mask = extract_window(record, i, rf.radius)
        ctx = context_window(labels, i, rf.radius, rf.conditioning_shift, record.length)
        scores = ensemble_step_score(members, feats, mask, ctx)
        total += float(scores[labels[i]])
    return total


def decode_record(model_or_ensemble, record: ProteinRecord, beam_width: int = DEFAULT_BEAM_WIDTH) -> np.ndarray:
    """Dispatch: beam search for conditioned models, independent argmax otherwise."""
    members = _members(model_or_ensemble)
    if members[0].config.conditioned:
        return beam_search(model_or_ensemble, record, beam_width)
    return decode_independent(model_or_ensemble, record)
