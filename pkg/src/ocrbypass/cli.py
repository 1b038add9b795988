"""Command-line experiment harness: dataset generation through report rendering.

One subcommand per pipeline stage (generate / pretrain / prune / train / eval /
report) so the expensive pre-pass and pretraining are shared across budget-sweep
runs. Settings come from an optional TOML config file ([data], [model], [train],
[budget], [backend] sections) with command-line flags taking precedence.

Exit codes: 0 success, 2 missing prerequisite artifact, 3 configuration error,
4 backend failure, 5 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import statistics
import sys
from pathlib import Path
from typing import Any, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
import torch

from .engines import (BackendError, HttpBackend, QueryLedger, ResponseCache,
                      SimulatedEngine, SimulatedEngineConfig, SubprocessBackend)
from .neural import Alphabet, Approximator, Preprocessor, load_checkpoint, save_checkpoint
from .selection import STRATEGY_KINDS, BudgetPolicy, SelectionStrategy
from .synthdoc import GlyphAtlas, generate_dataset, load_dataset, load_words
from .trainer import (DEFAULT_ALPHABET, DEFAULT_JITTER_SIGMAS, TrainConfig,
                      pretrain_approximator, run_experiment, validate)

__all__ = ["main", "load_config", "resolve_config", "build_backend", "ConfigError",
           "MissingArtifactError", "dataset_fingerprint", "code_fingerprint",
           "experiment_manifest"]

EXIT_OK = 0
EXIT_MISSING_PREREQUISITE = 2
EXIT_CONFIG = 3
EXIT_BACKEND = 4
EXIT_NUMERIC = 5


class ConfigError(ValueError):
    """Invalid configuration; `keys` names every offending entry."""

    def __init__(self, keys: Sequence[str]):
        self.keys = list(keys)
        super().__init__("invalid configuration: " + "; ".join(self.keys))


class MissingArtifactError(FileNotFoundError):
    """A prerequisite artifact (dataset, checkpoint, summary) is absent."""


# ---------------------------------------------------------------------------
# Configuration: TOML sections, then CLI overrides.
# ---------------------------------------------------------------------------

# section -> key -> (type, default). Every TrainConfig field is addressable.
_SCHEMA: dict[str, dict[str, tuple[type | tuple[type, ...], Any]]] = {
    "data": {
        "manifest": (str, None),
        "out_dir": (str, None),
        "prune_fraction": ((int, float), 0.0),
        "val_subsample": (int, None),
    },
    "model": {
        "alphabet": (str, DEFAULT_ALPHABET.characters),
    },
    "train": {
        "epochs": (int, TrainConfig.epochs),
        "pretrain_epochs": (int, TrainConfig.pretrain_epochs),
        "lr_pretrain": ((int, float), TrainConfig.lr_pretrain),
        "lr_approximator": ((int, float), TrainConfig.lr_approximator),
        "lr_preprocessor": ((int, float), TrainConfig.lr_preprocessor),
        "weight_decay": ((int, float), TrainConfig.weight_decay),
        "beta": ((int, float), TrainConfig.beta),
        "jitter_sigmas": (list, list(DEFAULT_JITTER_SIGMAS)),
        "batch_size": (int, TrainConfig.batch_size),
        "seed": (int, TrainConfig.seed),
    },
    "budget": {
        "budget_percent": ((int, float), 100.0),
        "min_per_batch": (int, 1),
        "strategy": (str, "uniform_cer"),
    },
    "backend": {
        "kind": (str, "simulated"),
        "cost_per_query": ((int, float), 0.0),
        "cache": (str, None),
        "timeout": ((int, float), 30.0),
    },
}


def load_config(path: str | Path | None) -> dict:
    """Parse the TOML file (or return {}); unknown sections/keys are errors."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"unparseable TOML in {p}: {exc}"]) from exc
    errors = []
    for section, entries in raw.items():
        if section not in _SCHEMA:
            errors.append(f"[{section}] unknown section")
            continue
        if not isinstance(entries, dict):
            errors.append(f"[{section}] must be a table")
            continue
        for key, value in entries.items():
            if key not in _SCHEMA[section]:
                errors.append(f"[{section}] {key}: unknown key")
                continue
            want, _ = _SCHEMA[section][key]
            if isinstance(value, bool) or not isinstance(value, want):
                errors.append(f"[{section}] {key}: expected "
                              f"{getattr(want, '__name__', want)}, got {value!r}")
    if errors:
        raise ConfigError(errors)
    return raw


def resolve_config(file_config: dict, overrides: dict[str, dict[str, Any]]) -> dict:
    """Defaults <- TOML <- CLI overrides, returning the full nested snapshot."""
    resolved: dict[str, dict[str, Any]] = {}
    for section, entries in _SCHEMA.items():
        resolved[section] = {}
        for key, (_, default) in entries.items():
            value = file_config.get(section, {}).get(key, default)
            override = overrides.get(section, {}).get(key)
            if override is not None:
                value = override
            resolved[section][key] = value
    return resolved


def train_config_from(resolved: dict) -> TrainConfig:
    """Build the TrainConfig (and its policy/strategy); ValueErrors become ConfigError."""
    train, budget = resolved["train"], resolved["budget"]
    try:
        return TrainConfig(
            epochs=train["epochs"],
            pretrain_epochs=train["pretrain_epochs"],
            lr_pretrain=float(train["lr_pretrain"]),
            lr_approximator=float(train["lr_approximator"]),
            lr_preprocessor=float(train["lr_preprocessor"]),
            weight_decay=float(train["weight_decay"]),
            beta=float(train["beta"]),
            jitter_sigmas=tuple(float(s) for s in train["jitter_sigmas"]),
            batch_size=train["batch_size"],
            budget=BudgetPolicy(budget_percent=float(budget["budget_percent"]),
                                min_per_batch=budget["min_per_batch"]),
            strategy=SelectionStrategy(budget["strategy"]),
            seed=train["seed"],
        )
    except ValueError as exc:
        raise ConfigError([str(exc)]) from exc


def build_backend(resolved: dict) -> tuple[Any, ResponseCache]:
    """Construct the OCR backend named by [backend] kind, plus its response cache."""
    section = resolved["backend"]
    kind = section["kind"]
    cost = float(section["cost_per_query"])
    timeout = float(section["timeout"])
    if kind == "simulated":
        backend = SimulatedEngine(SimulatedEngineConfig(atlas=GlyphAtlas.load_default()),
                                  cost_per_query=cost)
    elif kind.startswith("subprocess:"):
        template = kind[len("subprocess:"):]
        if not template:
            raise ConfigError(["[backend] kind: subprocess template is empty"])
        backend = SubprocessBackend(template, cost_per_query=cost, timeout=timeout)
    elif kind.startswith("http:"):
        endpoint = kind[len("http:"):]
        if not endpoint:
            raise ConfigError(["[backend] kind: http endpoint is empty"])
        if "://" not in endpoint:
            endpoint = "http://" + endpoint
        backend = HttpBackend(endpoint, cost_per_query=cost, timeout=timeout)
    else:
        raise ConfigError([f"[backend] kind: {kind!r} is not simulated, "
                           f"subprocess:<template>, or http:<url>"])
    cache = ResponseCache(section["cache"]) if section["cache"] else ResponseCache()
    return backend, cache


# ---------------------------------------------------------------------------
# Fingerprints and the experiment manifest.
# ---------------------------------------------------------------------------


def dataset_fingerprint(manifest_path: str | Path) -> str:
    """sha256 of the dataset manifest bytes: stable iff the dataset is."""
    return hashlib.sha256(Path(manifest_path).read_bytes()).hexdigest()


def code_fingerprint() -> str:
    """sha256 over this package's source files, so runs record what ran them."""
    digest = hashlib.sha256()
    for src in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(src.name.encode())
        digest.update(src.read_bytes())
    return digest.hexdigest()


def experiment_manifest(resolved: dict, manifest_path: str | Path,
                        out_dir: str | Path, extra: dict | None = None) -> dict:
    """Everything needed to rerun this experiment bit-identically."""
    snapshot = json.dumps(resolved, sort_keys=True)
    data_print = dataset_fingerprint(manifest_path)
    manifest = {
        "experiment_id": hashlib.sha256((snapshot + data_print).encode()).hexdigest()[:12],
        "config": resolved,
        "dataset_fingerprint": data_print,
        "code_fingerprint": code_fingerprint(),
        "outputs": {
            "summary": str(Path(out_dir) / "summary.json"),
            "epochs": str(Path(out_dir) / "epochs.jsonl"),
            "checkpoint_best": str(Path(out_dir) / "checkpoint_best.npz"),
            "checkpoint_last": str(Path(out_dir) / "checkpoint_last.npz"),
        },
    }
    if extra:
        manifest.update(extra)
    return manifest


def _require(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise MissingArtifactError(f"missing {what}: no path configured")
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"missing {what}: {p}")
    return p


def _load_split(manifest: Path, split: str):
    strips = [s for s in load_dataset(manifest) if s.split == split]
    if not strips:
        raise MissingArtifactError(f"missing split {split!r} in {manifest}")
    return strips


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    out = Path(args.out)
    atlas = GlyphAtlas.load_default()
    generate_dataset(out, load_words(), atlas,
                     (args.train, args.validation, args.test),
                     strips_per_document=args.strips_per_document, seed=args.seed)
    fingerprint = dataset_fingerprint(out / "manifest.jsonl")
    print(f"dataset: {out} ({args.train}/{args.validation}/{args.test} strips)")
    print(f"fingerprint: {fingerprint}")
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    resolved = resolve_config(load_config(args.config), _overrides(args))
    config = train_config_from(resolved)
    manifest = _require(resolved["data"]["manifest"], "dataset manifest")
    backend, cache = build_backend(resolved)
    alphabet = Alphabet(resolved["model"]["alphabet"])
    train_strips = _load_split(manifest, "train")

    # Mirror run_experiment's model construction so an artifact-reusing run is
    # bit-identical to one that pretrains inline with the same settings.
    torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    g = Preprocessor()
    f = Approximator(alphabet.size)
    ledger = QueryLedger()
    pretrain_approximator(f, train_strips, backend, config.pretrain_epochs,
                          alphabet=alphabet, cache=cache, ledger=ledger,
                          lr=config.lr_pretrain, weight_decay=config.weight_decay,
                          batch_size=config.batch_size, seed=config.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, preprocessor=g, approximator=f, opt_g=None, opt_f=None,
                    epoch=-1, alphabet=alphabet)
    print(f"pretrained approximator: {out} "
          f"({config.pretrain_epochs} epochs on {len(train_strips)} strips, "
          f"{ledger.total_queries('pretrain_prepass')} pre-pass queries)")
    return EXIT_OK


def cmd_prune(args: argparse.Namespace) -> int:
    from .pruning import prune as prune_ranked
    from .pruning import rank_documents, write_prune_report
    from .selection import initialize_history
    from .synthdoc import documents_from_strips
    from .trainer import prepass

    resolved = resolve_config(load_config(args.config), _overrides(args))
    manifest = _require(resolved["data"]["manifest"], "dataset manifest")
    backend, cache = build_backend(resolved)
    train_strips = _load_split(manifest, "train")
    fraction = float(resolved["data"]["prune_fraction"])

    ledger = QueryLedger()
    prepass(train_strips, backend, cache, ledger)
    history = initialize_history(train_strips, backend, cache)
    ranked = rank_documents(documents_from_strips(train_strips), history)
    kept = prune_ranked(ranked, fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_prune_report(out / "prune_report.csv", ranked, kept)
    kept_strips = sum(r.strip_count for r in kept)
    total_strips = sum(r.strip_count for r in ranked)
    print(f"pruned {len(ranked) - len(kept)}/{len(ranked)} documents "
          f"({total_strips - kept_strips}/{total_strips} strips) at fraction {fraction}")
    print(f"report: {out / 'prune_report.csv'}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    resolved = resolve_config(load_config(args.config), _overrides(args))
    config = train_config_from(resolved)
    manifest = _require(resolved["data"]["manifest"], "dataset manifest")
    pretrained = _require(args.pretrained, "pretraining checkpoint (run `ocrbypass "
                          "pretrain` first, then pass --pretrained)")
    backend, cache = build_backend(resolved)
    alphabet = Alphabet(resolved["model"]["alphabet"])
    out = Path(args.out or resolved["data"]["out_dir"] or "runs/experiment")
    out.mkdir(parents=True, exist_ok=True)

    manifest_doc = experiment_manifest(resolved, manifest, out,
                                       extra={"pretrained_from": str(pretrained)})
    (out / "manifest.json").write_text(json.dumps(manifest_doc, indent=2, sort_keys=True) + "\n")

    summary = run_experiment(
        config,
        train_strips=_load_split(manifest, "train"),
        validation_strips=_load_split(manifest, "validation"),
        test_strips=_load_split(manifest, "test"),
        backend=backend,
        out_dir=out,
        prune_fraction=float(resolved["data"]["prune_fraction"]),
        val_subsample=resolved["data"]["val_subsample"],
        cache=cache,
        alphabet=alphabet,
        pretrained=pretrained,
    )
    print(f"experiment {manifest_doc['experiment_id']}: "
          f"test word accuracy {summary['test_word_accuracy']:.4f} "
          f"(best epoch {summary['best_epoch']}, "
          f"{summary['queries']['train']} train queries)")
    print(f"summary: {out / 'summary.json'}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    resolved = resolve_config(load_config(args.config), _overrides(args))
    manifest = _require(resolved["data"]["manifest"], "dataset manifest")
    checkpoint = _require(args.checkpoint, "checkpoint")
    backend, _ = build_backend(resolved)
    loaded = load_checkpoint(checkpoint)
    strips = _load_split(manifest, args.split)
    ledger = QueryLedger()
    word_acc, approx_acc = validate(loaded["preprocessor"], loaded["approximator"],
                                    backend, strips, alphabet=loaded["alphabet"],
                                    ledger=ledger, epoch=loaded["epoch"],
                                    subsample=resolved["data"]["val_subsample"])
    result = {"checkpoint": str(checkpoint), "split": args.split,
              "word_accuracy": word_acc, "approximation_accuracy": approx_acc,
              "queries": ledger.total_queries("eval")}
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


def _load_summaries(run_paths: Sequence[str]) -> list[dict]:
    summaries = []
    for raw in run_paths:
        p = Path(raw)
        if p.is_dir():
            p = p / "summary.json"
        if not p.exists():
            raise MissingArtifactError(f"missing experiment summary: {p}")
        summaries.append(json.loads(p.read_text()))
    return summaries


def _median_rows(summaries: list[dict], key_of) -> list[tuple]:
    groups: dict[Any, list[dict]] = {}
    for s in summaries:
        groups.setdefault(key_of(s), []).append(s)
    rows = []
    for key in sorted(groups):
        accs = [s["test_word_accuracy"] for s in groups[key]]
        queries = [s["queries"]["train"] for s in groups[key]]
        rows.append((key, len(accs), statistics.median(accs), min(accs), max(accs),
                     int(statistics.median(queries))))
    return rows


def _sweep_figure(rows: list[tuple], xlabel: str, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r[0] for r in rows]
    med = [100 * r[2] for r in rows]
    lo = [100 * r[3] for r in rows]
    hi = [100 * r[4] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(xs, med, marker="o", label="median")
    ax.fill_between(xs, lo, hi, alpha=0.2, label="min-max")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("test word accuracy (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _format_table(header: tuple, rows: list[tuple]) -> str:
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join("---" for _ in header) + "|"]
    for key, n, med, lo, hi, queries in rows:
        lines.append(f"| {key:g} | {n} | {100 * med:.2f} | {100 * lo:.2f} | "
                     f"{100 * hi:.2f} | {queries} |")
    return "\n".join(lines)


def cmd_report(args: argparse.Namespace) -> int:
    summaries = _load_summaries(args.runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    budget_rows = _median_rows(
        [s for s in summaries if s["prune_fraction"] == 0.0],
        lambda s: s["config"]["budget_percent"])
    prune_rows = _median_rows(
        [s for s in summaries if s["config"]["budget_percent"] == 100.0],
        lambda s: s["prune_fraction"])

    header = ("x", "runs", "median acc %", "min %", "max %", "median train queries")
    parts = [f"# Experiment report ({len(summaries)} runs)"]
    if budget_rows:
        parts += ["", "## Accuracy vs. query budget (prune, 0%)",
                  _format_table(("budget %",) + header[1:], budget_rows)]
        if len(budget_rows) > 1:
            _sweep_figure(budget_rows, "query budget (%)", out / "budget_sweep.png")
            parts.append(f"\n![budget sweep](budget_sweep.png)")
    if prune_rows:
        parts += ["", "## Accuracy vs. prune fraction (100% budget)",
                  _format_table(("prune fraction",) + header[1:], prune_rows)]
        if len(prune_rows) > 1:
            _sweep_figure(prune_rows, "prune fraction", out / "prune_sweep.png")
            parts.append(f"\n![prune sweep](prune_sweep.png)")
    report = "\n".join(parts) + "\n"
    (out / "report.md").write_text(report)
    print(report)
    print(f"report: {out / 'report.md'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and dispatch.
# ---------------------------------------------------------------------------


def _overrides(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    """Map CLI flags onto their config-schema slots (None = not given)."""
    get = lambda name: getattr(args, name, None)
    return {
        "data": {
            "manifest": get("manifest"),
            "out_dir": get("out"),
            "prune_fraction": get("prune_fraction"),
            "val_subsample": get("val_subsample"),
        },
        "train": {
            "epochs": get("epochs"),
            "pretrain_epochs": get("pretrain_epochs"),
            "lr_pretrain": get("lr_pretrain"),
            "lr_approximator": get("lr_approximator"),
            "lr_preprocessor": get("lr_preprocessor"),
            "weight_decay": get("weight_decay"),
            "beta": get("beta"),
            "batch_size": get("batch_size"),
            "seed": get("seed"),
        },
        "budget": {
            "budget_percent": get("budget"),
            "min_per_batch": get("min_per_batch"),
            "strategy": get("strategy"),
        },
        "backend": {
            "kind": get("backend"),
            "cache": get("cache"),
        },
    }


def _add_config_flags(p: argparse.ArgumentParser, *, budget_flags: bool = True) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--manifest", help="dataset manifest.jsonl")
    p.add_argument("--backend", help="simulated | subprocess:<template> | http:<url>")
    p.add_argument("--cache", help="OCR response cache file (JSONL)")
    p.add_argument("--seed", type=int, help="experiment seed")
    p.add_argument("--epochs", type=int)
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    p.add_argument("--lr-pretrain", dest="lr_pretrain", type=float)
    p.add_argument("--lr-approximator", dest="lr_approximator", type=float)
    p.add_argument("--lr-preprocessor", dest="lr_preprocessor", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--val-subsample", dest="val_subsample", type=int)
    p.add_argument("--prune-fraction", dest="prune_fraction", type=float)
    if budget_flags:
        p.add_argument("--budget", type=float, help="query budget percent")
        p.add_argument("--min-per-batch", dest="min_per_batch", type=int)
        p.add_argument("--strategy", choices=STRATEGY_KINDS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocrbypass",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a degraded synthetic strip dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--validation", type=int, default=300)
    p.add_argument("--test", type=int, default=300)
    p.add_argument("--strips-per-document", dest="strips_per_document", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="pre-pass + CTC-fit the approximator")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output checkpoint (.npz)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("prune", help="rank documents by mean CER and write the prune report")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("train", help="budgeted preprocessor training run")
    _add_config_flags(p)
    p.add_argument("--pretrained", help="pretraining checkpoint from `ocrbypass pretrain`")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="aggregate run summaries into tables and figures")
    p.add_argument("runs", nargs="+", help="run directories or summary.json files")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_PREREQUISITE
    except ConfigError as exc:
        print("error: invalid configuration", file=sys.stderr)
        for key in exc.keys:
            print(f"  - {key}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"error: backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except FloatingPointError as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
