"""Command-line entry point: train, eval, predict, and the ablation ladder.

Configs are flat UTF-8 ``key = value`` files (``#`` starts a comment). Every
key is validated against a fixed schema and unknown keys are rejected.
``--set KEY=VALUE`` flags override file values. Exit codes: 0 success,
1 usage or config error, 2 data error, 3 numerical failure.

A data directory holds the training corpus as ``corpus.npy`` (raw source
matrix) or ``corpus.txt`` (native text format), plus an optional
``test.npy``/``test.txt`` holdout. Training writes ``<out>.cfg`` next to the
checkpoint so eval/predict can rebuild the architecture.
"""

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .data import (
    DatasetSplit,
    PssmStats,
    apply_pssm_stats,
    compute_pssm_stats,
    labels_to_string,
    load_native,
    load_npy,
    records_from_matrix,
    split_records,
)
from .errors import (
    ChainCnnError,
    ConfigError,
    DataFormatError,
    NonFiniteError,
    UsageError,
)
from .inference import Ensemble, beam_search, decode_independent
from .metrics import confusion_matrix, q8, render_report
from .model import BlockSpec, ModelConfig, ablation_model_config, build
from .training import (
    TrainConfig,
    bind_checkpoint,
    load_checkpoint,
    save_checkpoint,
    schedule_for,
    train,
)

SEED_ENV_VAR = "CHAINCNN_SEED"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    training: TrainConfig
    data_dir: str | None = None
    n_validation: int = 256


# ---------------------------------------------------------------------------
# config parsing: flat key=value with a closed schema

_MODEL_KEYS = frozenset({
    "kind", "fc_window", "fc_layers", "fc_width", "blocks", "skip_connections",
    "skip_projection_depth", "conditioned", "dropout_rate", "fc_max_norm",
})
_TRAIN_KEYS = frozenset({
    "lr_init", "lr_decay_factor", "lr_decay_every", "max_iterations",
    "batch_size", "sampling_rate_init", "sampling_rate_increment",
    "sampling_rate_every", "eval_every", "patience", "seed", "log_every",
    "target_q8",
})
_DATA_KEYS = frozenset({"data", "n_validation"})
_ALL_KEYS = _MODEL_KEYS | _TRAIN_KEYS | _DATA_KEYS


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _parse_conv(text: str) -> tuple[int, int]:
    parts = text.strip().split("x")
    if len(parts) != 2:
        raise ConfigError(f"cannot parse convolution {text.strip()!r}, expected WIDTHxDEPTH")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError as err:
        raise ConfigError(f"cannot parse convolution {text.strip()!r}: {err}") from err


def _parse_blocks(text: str, projection_depth: int) -> tuple[BlockSpec, ...]:
    text = text.strip()
    if not text or text == "none":
        return ()
    blocks = []
    for part in text.split("|"):
        single = None
        if "+" in part:
            part, single_text = part.split("+", 1)
            single = _parse_conv(single_text)
        multi = tuple(_parse_conv(p) for p in part.split(",") if p.strip())
        blocks.append(BlockSpec(multi_scale=multi, single_scale=single,
                                skip_projection_depth=projection_depth))
    return tuple(blocks)


def _render_blocks(blocks: tuple[BlockSpec, ...]) -> str:
    parts = []
    for b in blocks:
        text = ",".join(f"{w}x{d}" for w, d in b.multi_scale)
        if b.single_scale is not None:
            text += "+{}x{}".format(*b.single_scale)
        parts.append(text)
    return " | ".join(parts) if parts else "none"


def _convert(values: dict[str, str], key: str, kind, default):
    if key not in values:
        return default
    raw = values[key]
    if kind is bool:
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as err:
        raise ConfigError(f"key {key!r}: {err}") from err


def _require(values: dict[str, str], key: str, kind):
    if key not in values:
        raise ConfigError(f"missing required key {key!r}")
    return _convert(values, key, kind, None)


def build_run_config(values: dict[str, str], seed_override: int | None = None) -> RunConfig:
    unknown = sorted(set(values) - _ALL_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")
    kind = _require(values, "kind", str)
    projection_depth = _convert(values, "skip_projection_depth", int, 96)
    model = ModelConfig(
        kind=kind,
        fc_window=_require(values, "fc_window", int),
        fc_layers=_require(values, "fc_layers", int),
        fc_width=_convert(values, "fc_width", int, 455),
        blocks=_parse_blocks(values.get("blocks", ""), projection_depth),
        skip_connections=_convert(values, "skip_connections", bool, False),
        conditioned=_convert(values, "conditioned", bool, False),
        dropout_rate=_convert(values, "dropout_rate", float, 0.4),
        fc_max_norm=_convert(values, "fc_max_norm", float, 0.150),
    )
    model.validate()
    if seed_override is not None:
        seed = seed_override
    elif "seed" in values:
        seed = _convert(values, "seed", int, 0)
    elif os.environ.get(SEED_ENV_VAR):
        try:
            seed = int(os.environ[SEED_ENV_VAR])
        except ValueError as err:
            raise ConfigError(f"{SEED_ENV_VAR}: {err}") from err
    else:
        seed = 0
    lr_init, lr_factor, lr_every = schedule_for(kind)
    target_raw = values.get("target_q8", "none")
    training = TrainConfig(
        lr_init=_convert(values, "lr_init", float, lr_init),
        lr_decay_factor=_convert(values, "lr_decay_factor", float, lr_factor),
        lr_decay_every=_convert(values, "lr_decay_every", int, lr_every),
        max_iterations=_require(values, "max_iterations", int),
        batch_size=_convert(values, "batch_size", int, 50),
        sampling_rate_init=_convert(values, "sampling_rate_init", float, 0.4),
        sampling_rate_increment=_convert(values, "sampling_rate_increment", float, 0.1),
        sampling_rate_every=_convert(values, "sampling_rate_every", int, 750000),
        eval_every=_convert(values, "eval_every", int, 1000),
        patience=_convert(values, "patience", int, 10),
        seed=seed,
        log_every=_convert(values, "log_every", int, 100),
        target_q8=None if target_raw == "none" else _convert(values, "target_q8", float, None),
    )
    training.validate()
    return RunConfig(
        model=model,
        training=training,
        data_dir=values.get("data") or None,
        n_validation=_convert(values, "n_validation", int, 256),
    )


def render_config(run: RunConfig) -> str:
    """Serialize a RunConfig so that re-parsing yields an equal config."""
    m, t = run.model, run.training
    lines = [
        f"kind = {m.kind}",
        f"fc_window = {m.fc_window}",
        f"fc_layers = {m.fc_layers}",
        f"fc_width = {m.fc_width}",
        f"blocks = {_render_blocks(m.blocks)}",
        f"skip_connections = {str(m.skip_connections).lower()}",
        f"skip_projection_depth = {m.blocks[0].skip_projection_depth if m.blocks else 96}",
        f"conditioned = {str(m.conditioned).lower()}",
        f"dropout_rate = {m.dropout_rate!r}",
        f"fc_max_norm = {m.fc_max_norm!r}",
        f"lr_init = {t.lr_init!r}",
        f"lr_decay_factor = {t.lr_decay_factor!r}",
        f"lr_decay_every = {t.lr_decay_every}",
        f"max_iterations = {t.max_iterations}",
        f"batch_size = {t.batch_size}",
        f"sampling_rate_init = {t.sampling_rate_init!r}",
        f"sampling_rate_increment = {t.sampling_rate_increment!r}",
        f"sampling_rate_every = {t.sampling_rate_every}",
        f"eval_every = {t.eval_every}",
        f"patience = {t.patience}",
        f"seed = {t.seed}",
        f"log_every = {t.log_every}",
        f"target_q8 = {'none' if t.target_q8 is None else repr(t.target_q8)}",
        f"n_validation = {run.n_validation}",
    ]
    if run.data_dir:
        lines.append(f"data = {run.data_dir}")
    return "\n".join(lines) + "\n"


def shipped_config_names() -> list[str]:
    root = resources.files("chaincnn") / "configs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def read_config_source(name: str) -> tuple[str, str]:
    """Resolve a --config argument to (text, source label).

    Accepts a filesystem path or the bare name of a shipped config
    (``ablation_row1`` .. ``ablation_row9``, ``chained``).
    """
    if os.path.exists(name):
        with open(name, "r", encoding="utf-8") as fh:
            return fh.read(), name
    base = name if name.endswith(".cfg") else name + ".cfg"
    candidate = resources.files("chaincnn") / "configs" / base
    if candidate.is_file():
        return candidate.read_text(encoding="utf-8"), f"chaincnn:{base}"
    raise ConfigError(
        f"no config file {name!r}; shipped configs: {', '.join(shipped_config_names())}"
    )


def load_run_config(name: str, sets, seed_override: int | None = None) -> RunConfig:
    text, source = read_config_source(name)
    values = parse_config_text(text, source)
    for item in sets:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"--set: unknown key {key!r}")
        values[key] = value
    return build_run_config(values, seed_override)


# ---------------------------------------------------------------------------
# data plumbing


def _corpus_file(data_dir: str, stem: str) -> str | None:
    for ext in (".npy", ".txt"):
        path = os.path.join(data_dir, stem + ext)
        if os.path.exists(path):
            return path
    return None


def _read_records(path: str):
    if path.endswith(".npy"):
        return records_from_matrix(load_npy(path))
    return load_native(path)


def load_records(data_dir: str):
    if not os.path.isdir(data_dir):
        raise DataFormatError(f"data directory {data_dir!r} does not exist")
    corpus_path = _corpus_file(data_dir, "corpus")
    if corpus_path is None:
        raise DataFormatError(f"no corpus.npy or corpus.txt in {data_dir!r}")
    test_path = _corpus_file(data_dir, "test")
    return _read_records(corpus_path), (_read_records(test_path) if test_path else [])


def _storage_rounded(stats: PssmStats) -> PssmStats:
    # round to checkpoint precision up front so training and later
    # evaluation normalize features bit-identically
    return PssmStats(
        mean=stats.mean.astype(np.float32).astype(np.float64),
        std=stats.std.astype(np.float32).astype(np.float64),
    )


def prepare_split(run: RunConfig, data_dir: str):
    records, test = load_records(data_dir)
    split = split_records(records, n_val=run.n_validation, seed=run.training.seed, test=test)
    stats = _storage_rounded(compute_pssm_stats(split.train))
    split = DatasetSplit(
        train=apply_pssm_stats(split.train, stats),
        validation=apply_pssm_stats(split.validation, stats),
        test=apply_pssm_stats(split.test, stats),
        seed=split.seed,
    )
    return split, stats


def _model_stats(model) -> PssmStats:
    return PssmStats(
        mean=model.buffers["input_norm.pssm_mean"].data.astype(np.float64),
        std=model.buffers["input_norm.pssm_std"].data.astype(np.float64),
    )


def _load_ensemble(paths) -> tuple[Ensemble, RunConfig]:
    models = []
    first_run = None
    for path in paths:
        sidecar = path + ".cfg"
        if not os.path.exists(sidecar):
            raise ConfigError(f"missing config sidecar {sidecar!r}")
        run = load_run_config(sidecar, [])
        model = build(run.model, np.random.default_rng(0))
        bind_checkpoint(load_checkpoint(path), model)
        models.append(model)
        if first_run is None:
            first_run = run
    return Ensemble(tuple(models)), first_run


def _decode_all(ensemble: Ensemble, records, beam_width: int, threads: int):
    if threads < 1:
        raise UsageError(f"--threads must be >= 1, got {threads}")
    if ensemble.conditioned:
        decode = lambda r: beam_search(ensemble, r, beam_width)
    else:
        decode = lambda r: decode_independent(ensemble, r)
    if threads == 1 or len(records) < 2:
        return [decode(r) for r in records]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(decode, records))


# ---------------------------------------------------------------------------
# commands


def _train_and_save(run: RunConfig, data_dir: str | None, out_path: str) -> int:
    if data_dir is None:
        raise UsageError("no data directory: pass --data or set 'data =' in the config")
    split, stats = prepare_split(run, data_dir)
    model = build(run.model, np.random.default_rng(run.training.seed))
    model.buffers["input_norm.pssm_mean"].data[...] = stats.mean.astype(np.float32)
    model.buffers["input_norm.pssm_std"].data[...] = stats.std.astype(np.float32)
    ckpt = train(model, split, run.training, log=print)
    save_checkpoint(ckpt, out_path)
    with open(out_path + ".cfg", "w", encoding="utf-8") as fh:
        fh.write(render_config(dataclasses.replace(run, data_dir=data_dir)))
    print(f"wrote {out_path} (iteration {ckpt.iteration}), "
          f"best validation q8 {ckpt.best_validation_q8:.6f}")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config, args.set, args.seed)
    return _train_and_save(run, args.data or run.data_dir, args.out)


def cmd_eval(args) -> int:
    ensemble, run = _load_ensemble(args.ckpt)
    data_dir = args.data or run.data_dir
    if data_dir is None:
        raise UsageError("no data directory: pass --data or set 'data =' in the config")
    records, test = load_records(data_dir)
    if args.split == "test":
        if not test:
            raise DataFormatError(f"no test.npy or test.txt in {data_dir!r}")
        chosen = test
    else:
        chosen = split_records(records, n_val=run.n_validation,
                               seed=run.training.seed).validation
    chosen = apply_pssm_stats(chosen, _model_stats(ensemble.members[0]))
    preds = _decode_all(ensemble, chosen, args.beam_width, args.threads)
    report = render_report(q8(preds, chosen), confusion_matrix(preds, chosen),
                           digits=None if args.raw else 3)
    print(report, end="")
    return 0


def cmd_predict(args) -> int:
    ensemble, _ = _load_ensemble(args.ckpt)
    records = load_native(args.input)
    records = apply_pssm_stats(records, _model_stats(ensemble.members[0]))
    preds = _decode_all(ensemble, records, args.beam_width, args.threads)
    with open(args.output, "w", encoding="utf-8") as fh:
        for record, pred in zip(records, preds):
            fh.write(f"{record.id}\t{labels_to_string(pred)}\n")
    print(f"wrote {len(records)} predictions to {args.output}")
    return 0


def cmd_ablate(args) -> int:
    model_config = ablation_model_config(args.row)
    lr_init, lr_factor, lr_every = schedule_for(model_config.kind)
    run = RunConfig(
        model=model_config,
        training=TrainConfig(lr_init=lr_init, lr_decay_factor=lr_factor,
                             lr_decay_every=lr_every, max_iterations=1000000),
        data_dir=args.data,
    )
    values = parse_config_text(render_config(run), f"<ablation row {args.row}>")
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"--set: unknown key {key!r}")
        values[key] = value
    run = build_run_config(values, args.seed)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, f"row{args.row}.ckpt")
    return _train_and_save(run, run.data_dir, out_path)


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chaincnn",
        description="Eight-class protein secondary structure prediction with "
                    "multi-scale convolutional and next-step conditioned models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True,
                   help="config path or a shipped config name (see README)")
    p.add_argument("--data", help="directory with corpus.npy/corpus.txt")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--seed", type=int, help=f"overrides config and ${SEED_ENV_VAR}")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")

    p = sub.add_parser("eval", help="evaluate checkpoints on a data split")
    p.add_argument("--ckpt", nargs="+", required=True,
                   help="one checkpoint, or several to form an ensemble")
    p.add_argument("--data", help="directory with corpus and optional test files")
    p.add_argument("--split", choices=("validation", "test"), default="validation")
    p.add_argument("--beam-width", type=int, default=8,
                   help="beam width for conditioned models")
    p.add_argument("--threads", type=int, default=1,
                   help="parallel decoding threads")
    p.add_argument("--raw", action="store_true",
                   help="print raw doubles instead of 3-decimal rounding")

    p = sub.add_parser("predict", help="predict structure strings for a fixture file")
    p.add_argument("--ckpt", nargs="+", required=True)
    p.add_argument("--input", required=True, help="native-format fixture file")
    p.add_argument("--output", required=True, help="destination for id<TAB>letters lines")
    p.add_argument("--beam-width", type=int, default=8)
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("ablate", help="train one row of the ablation ladder")
    p.add_argument("--row", type=int, required=True, help="ladder row, 1..9")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    return parser


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on usage errors and --help
        return 0 if exc.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](args)
    except NonFiniteError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (ConfigError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except DataFormatError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ChainCnnError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
