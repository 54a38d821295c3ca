"""Deterministic training loop: Adam with stepped learning-rate decay,
scheduled sampling for conditioned models, max-norm projection on the
fully connected layers, early stopping on validation Q8, and binary
checkpoint persistence.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

import chaincnn.tensor as T
from .data import Conditioning, DatasetSplit, make_batch
from .errors import CheckpointError, NonFiniteError, ParameterError
from .inference import beam_search, context_window, extract_window
from .metrics import q8 as metrics_q8
from .model import Model

CHECKPOINT_MAGIC = b"CCNN"
CHECKPOINT_VERSION = 1
RERANK_BEAM_WIDTH = 8
RERANK_SNAPSHOTS = 3

# (lr_init, lr_decay_factor, lr_decay_every) per architecture family
FC_SCHEDULE = (4e-4, 0.5, 35000)
CONV_SCHEDULE = (3.357e-4, 0.4, 200000)


def schedule_for(kind: str):
    return FC_SCHEDULE if kind == "fully_connected" else CONV_SCHEDULE


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float
    lr_decay_factor: float
    lr_decay_every: int
    max_iterations: int
    batch_size: int = 50
    sampling_rate_init: float = 0.4
    sampling_rate_increment: float = 0.1
    sampling_rate_every: int = 750000
    eval_every: int = 1000
    patience: int = 10
    seed: int = 0
    log_every: int = 100
    # optional early exit once validation Q8 reaches a target (None = off)
    target_q8: float | None = None

    def validate(self) -> None:
        if self.lr_init <= 0:
            raise ParameterError(f"lr_init must be positive, got {self.lr_init}")
        if not 0 < self.lr_decay_factor < 1:
            raise ParameterError(
                f"lr_decay_factor must lie in (0, 1), got {self.lr_decay_factor}"
            )
        for name in ("lr_decay_every", "max_iterations", "batch_size",
                     "eval_every", "sampling_rate_every", "log_every"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.patience < 0:
            raise ParameterError(f"patience must be >= 0, got {self.patience}")
        if not 0.0 <= self.sampling_rate_init <= 1.0:
            raise ParameterError(
                f"sampling_rate_init must lie in [0, 1], got {self.sampling_rate_init}"
            )
        if self.sampling_rate_increment < 0:
            raise ParameterError(
                f"sampling_rate_increment must be >= 0, got {self.sampling_rate_increment}"
            )
        if self.target_q8 is not None and not 0.0 < self.target_q8 <= 1.0:
            raise ParameterError(f"target_q8 must lie in (0, 1], got {self.target_q8}")


def lr_at(step: int, config: TrainConfig) -> float:
    """Stepped exponential decay: lr_init * factor^(step // every)."""
    if step < 0:
        raise ParameterError(f"step must be >= 0, got {step}")
    return config.lr_init * config.lr_decay_factor ** (step // config.lr_decay_every)


def sampling_rate_at(step: int, config: TrainConfig) -> float:
    """Stepped sampling-rate ramp, clamped to [0, 1]."""
    if step < 0:
        raise ParameterError(f"step must be >= 0, got {step}")
    rate = config.sampling_rate_init + config.sampling_rate_increment * (
        step // config.sampling_rate_every
    )
    return min(1.0, max(0.0, rate))


def scheduled_sampling_pass(model, records, rate: float, rng) -> list[np.ndarray]:
    """Mix ground-truth labels with the model's own samples at ``rate``.

    Walks each sequence left to right; at position i the model scores the
    receptive-field window using the already-mixed context, a label is drawn
    from the renormalized 8-class softmax, and the context entry becomes the
    draw with probability ``rate``, else the ground truth. Returns one mixed
    context per record. ``rate`` 0 short-circuits to the ground truth without
    evaluating the model.
    """
    if not 0.0 <= rate <= 1.0:
        raise ParameterError(f"sampling rate must lie in [0, 1], got {rate}")
    contexts = []
    for r in records:
        if r.labels is None:
            raise ParameterError(f"record {r.id} has no labels to sample against")
        contexts.append(r.labels[: r.length].copy())
    if rate == 0.0:
        return contexts
    rf = model.receptive_field()
    max_len = max((r.length for r in records), default=0)
    for i in range(max_len):
        rows = [k for k, r in enumerate(records) if i < r.length]
        feats, masks, ctxs = [], [], []
        for k in rows:
            f, m = extract_window(records[k], i, rf.radius)
            feats.append(f)
            masks.append(m)
            ctxs.append(context_window(contexts[k], i, rf.radius,
                                       rf.conditioning_shift, records[k].length))
        scores = model.forward_window(np.stack(feats), np.stack(masks), np.stack(ctxs))
        s8 = scores[:, :8]
        probs = np.exp(s8 - s8.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        cdf = np.cumsum(probs, axis=1)
        cdf[:, -1] = 1.0
        draws = (rng.random(len(rows))[:, None] > cdf).sum(axis=1)
        mix = rng.random(len(rows)) < rate
        for j, k in enumerate(rows):
            if mix[j]:
                contexts[k][i] = draws[j]
    return contexts


def evaluate_q8(model, records, batch_size: int = 50) -> float:
    """Per-position argmax Q8 in infer mode.

    Conditioned models are scored teacher-forced (ground-truth conditioning
    channels), which is the cheap next-step accuracy used for early stopping;
    unconditioned models this is exactly independent decoding.
    """
    if not records:
        raise ParameterError("cannot evaluate over zero records")
    conditioning = None
    if model.config.conditioned:
        conditioning = Conditioning(model.receptive_field().conditioning_shift)
    correct = 0
    total = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        length = max(r.length for r in chunk)
        if length == 0:
            continue
        batch = make_batch(chunk, conditioning=conditioning, length=length)
        logits = model.forward(batch.features, batch.mask, train=False).data
        pred = logits[..., :8].argmax(axis=2)
        hits = batch.mask > 0
        correct += int(np.count_nonzero((pred == batch.labels) & hits))
        total += int(np.count_nonzero(hits))
    if total == 0:
        raise ParameterError("no masked-in residues to evaluate")
    return correct / total


def beam_q8(model, records, beam_width: int = RERANK_BEAM_WIDTH) -> float:
    """Validation Q8 under full beam-search decoding."""
    preds = [beam_search(model, r, beam_width) for r in records]
    return metrics_q8(preds, records)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Snapshot of every named tensor plus optimizer moments.

    ``tensors`` maps tensor names to float32 arrays; Adam moments ride along
    under ``adam.m.<param>`` / ``adam.v.<param>``. ``best_validation_q8`` is
    the metric that selected this snapshot.
    """

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0
    best_validation_q8: float = float("nan")
    version: int = CHECKPOINT_VERSION


def checkpoint_from_model(model, adam=None, iteration: int = 0,
                          best_validation_q8: float = float("nan")) -> Checkpoint:
    tensors = {name: t.data.copy() for name, t in model.named_tensors().items()}
    if adam is not None:
        for name, m in adam.first_moment.items():
            tensors[f"adam.m.{name}"] = m.copy()
        for name, v in adam.second_moment.items():
            tensors[f"adam.v.{name}"] = v.copy()
    return Checkpoint(tensors, iteration, best_validation_q8)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary format: magic, version, tensor count, named float32 tensors
    (sorted by name), then the iteration counter and best validation Q8.
    All integers little-endian.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", ckpt.version, len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} is {arr.dtype}, only float32 is storable")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", 0, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f4", copy=False).tobytes())
    chunks.append(struct.pack("<Qd", ckpt.iteration, ckpt.best_validation_q8))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise CheckpointError(f"{path}: truncated reading {what} at byte {offset}")
        chunk = data[offset : offset + n]
        offset += n
        return chunk

    magic = take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        dtype_code, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
        if dtype_code != 0:
            raise CheckpointError(f"{path}: unknown dtype code {dtype_code} for {name!r}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"dims of {name!r}"))
        n_items = 1
        for d in dims:
            n_items *= d
        payload = take(4 * n_items, f"payload of {name!r}")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    iteration, best = struct.unpack("<Qd", take(16, "trailer"))
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return Checkpoint(tensors, int(iteration), float(best))


def bind_checkpoint(ckpt: Checkpoint, model, adam=None) -> None:
    """Copy checkpoint values into a built model (and optimizer) in place.

    The checkpoint's tensor names must match the model's exactly; Adam
    moments are restored when ``adam`` is given, with its step counter set
    to the checkpoint iteration.
    """
    stored = {n for n in ckpt.tensors if not n.startswith(("adam.m.", "adam.v."))}
    expected = model.named_tensors()
    if stored != set(expected):
        missing = sorted(set(expected) - stored)
        surplus = sorted(stored - set(expected))
        raise CheckpointError(
            f"parameter names do not match the model: missing {missing}, unexpected {surplus}"
        )
    for name, tensor in expected.items():
        arr = ckpt.tensors[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {arr.shape}, model expects {tensor.data.shape}"
            )
        np.copyto(tensor.data, arr)
    if adam is not None:
        for name, buf in adam.first_moment.items():
            for prefix, store in (("adam.m.", adam.first_moment),
                                  ("adam.v.", adam.second_moment)):
                key = prefix + name
                if key not in ckpt.tensors:
                    raise CheckpointError(f"checkpoint carries no {key!r}")
                np.copyto(store[name], ckpt.tensors[key])
        adam.step = ckpt.iteration


# ---------------------------------------------------------------------------
# the loop


def train(model: Model, data: DatasetSplit, config: TrainConfig, log=None) -> Checkpoint:
    """Run the training loop and return the best checkpoint by validation Q8.

    Early stopping evaluates every ``eval_every`` steps (teacher-forced
    next-step Q8 for conditioned models) and stops after more than
    ``patience`` consecutive non-improving evaluations. For conditioned
    models the final pick re-scores the last three improving snapshots with
    full beam-search Q8 on the validation set. The model is left holding the
    returned checkpoint's weights.
    """
    config.validate()
    if not data.train:
        raise ParameterError("no training records")
    if not data.validation:
        raise ParameterError("no validation records for early stopping")
    rng = np.random.default_rng(config.seed)
    params = model.trainable()
    adam = T.AdamState.for_params(params)
    conditioned = model.config.conditioned
    conditioning = None
    if conditioned:
        conditioning = Conditioning(model.receptive_field().conditioning_shift)

    snapshots: list[Checkpoint] = []
    best = float("-inf")
    stale_evals = 0
    for step in range(config.max_iterations):
        idx = rng.integers(0, len(data.train), size=config.batch_size)
        records = [data.train[i] for i in idx]
        length = max(r.length for r in records)
        rate = sampling_rate_at(step, config) if conditioned else 0.0
        context = None
        if conditioned:
            context = scheduled_sampling_pass(model, records, rate, rng)
        batch = make_batch(records, conditioning=conditioning,
                           context_labels=context, length=length)
        for t in params.values():
            t.grad = None
        logits = model.forward(batch.features, batch.mask, train=True, rng=rng)
        loss = T.softmax_cross_entropy(logits, batch.labels, batch.mask)
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            ids = ",".join(r.id for r in records[:8])
            raise NonFiniteError(f"non-finite loss at step {step} (batch {ids}, ...)")
        loss.backward()
        lr = lr_at(step, config)
        try:
            T.adam_update(params, adam, lr)
        except NonFiniteError as err:
            ids = ",".join(r.id for r in records[:8])
            raise NonFiniteError(f"step {step} (batch {ids}, ...): {err}") from err
        for lp in model.dense_layers():
            lp.weights.data = T.max_norm_project(lp.weights.data, model.config.fc_max_norm)

        iteration = step + 1
        if log is not None and iteration % config.log_every == 0:
            log(f"iter={iteration} loss={loss_value:.6f} lr={lr:.6e} rate={rate:.3f}")
        if iteration % config.eval_every == 0 or iteration == config.max_iterations:
            val_q8 = evaluate_q8(model, data.validation, config.batch_size)
            if val_q8 > best:
                best = val_q8
                stale_evals = 0
                snapshots.append(checkpoint_from_model(model, adam, iteration, val_q8))
                del snapshots[:-RERANK_SNAPSHOTS]
            else:
                stale_evals += 1
            if log is not None:
                log(f"iter={iteration} val_q8={val_q8:.6f} best={best:.6f}")
            if config.target_q8 is not None and best >= config.target_q8:
                break
            if stale_evals > config.patience:
                break

    winner = snapshots[-1]
    if conditioned and data.validation:
        ranked = []
        for cand in snapshots:
            bind_checkpoint(cand, model)
            score = beam_q8(model, data.validation)
            ranked.append((score, cand.best_validation_q8, -cand.iteration, cand))
            if log is not None:
                log(f"rerank iter={cand.iteration} beam_q8={score:.6f}")
        score, _, _, winner = max(ranked, key=lambda r: r[:3])
        winner = Checkpoint(winner.tensors, winner.iteration, score)
    bind_checkpoint(winner, model)
    return winner
