"""Alternating budgeted training of the preprocessor and the OCR approximator.

Each minibatch alternates two updates. First the approximator f is fitted to
the black-box engine on jittered preprocessed images (the budgeted, query-
spending step); then the preprocessor g is updated through frozen f against
the ground-truth labels plus a whitening term that pulls g's output toward an
all-white image. Sample selection decides which preprocessed images are worth
the OCR queries.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .engines import (OcrBackend, QueryLedger, ResponseCache, cached_recognize, image_hash,
                      recognize)
from .metrics import word_accuracy
from .neural import (AdamW, Alphabet, Approximator, Preprocessor, ctc_loss_batch,
                     flatten_tensors, greedy_decode, load_checkpoint, save_checkpoint,
                     unflatten_into)
from .pruning import keep_strips, prune, rank_documents, write_prune_report
from .selection import (BudgetPolicy, CerHistory, SelectionStrategy, compute_k,
                        initialize_history, record_epoch_cers)
from .synthdoc import TextStrip, documents_from_strips

__all__ = [
    "DEFAULT_JITTER_SIGMAS",
    "DEFAULT_ALPHABET",
    "TrainConfig",
    "EpochReport",
    "prepass",
    "pretrain_approximator",
    "train_epoch",
    "validate",
    "run_experiment",
]

DEFAULT_JITTER_SIGMAS = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05)

# Matches the shipped glyph atlas (sorted); column 0 of the logits is the blank.
DEFAULT_ALPHABET = Alphabet("0123456789abcdefghijklmnopqrstuvwxyz")

# Fixed stream tags so the shuffle, jitter and selection RNGs stay decoupled.
_SHUFFLE_STREAM, _JITTER_STREAM, _SELECT_STREAM, _PRETRAIN_STREAM = 0, 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the alternating training loop.

    The learning-rate/decay/beta/sigma defaults are the reference operating
    point; batch_size, epochs and budget are experiment-level choices.
    """

    epochs: int = 50
    pretrain_epochs: int = 50
    lr_pretrain: float = 5e-3
    lr_approximator: float = 1e-4
    lr_preprocessor: float = 5e-5
    weight_decay: float = 5e-4
    beta: float = 1.0
    jitter_sigmas: tuple[float, ...] = DEFAULT_JITTER_SIGMAS
    batch_size: int = 32
    budget: BudgetPolicy = BudgetPolicy(budget_percent=100.0)
    strategy: SelectionStrategy = SelectionStrategy("uniform_cer")
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.lr_pretrain <= 0 or self.lr_approximator <= 0 or self.lr_preprocessor <= 0:
            raise ValueError("learning rates must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not self.jitter_sigmas or any(s < 0 for s in self.jitter_sigmas):
            raise ValueError("jitter_sigmas must be nonempty with all values >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "pretrain_epochs": self.pretrain_epochs,
            "lr_pretrain": self.lr_pretrain,
            "lr_approximator": self.lr_approximator,
            "lr_preprocessor": self.lr_preprocessor,
            "weight_decay": self.weight_decay,
            "beta": self.beta,
            "jitter_sigmas": list(self.jitter_sigmas),
            "batch_size": self.batch_size,
            "budget_percent": self.budget.budget_percent,
            "min_per_batch": self.budget.min_per_batch,
            "strategy": self.strategy.kind,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class EpochReport:
    """Per-epoch training record; queries_this_epoch is a ledger-exact delta."""

    epoch: int
    train_loss_f: float
    train_loss_g: float
    validation_word_accuracy: float
    approximation_accuracy: float
    queries_this_epoch: int
    wall_time_seconds: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss_f": self.train_loss_f,
            "train_loss_g": self.train_loss_g,
            "validation_word_accuracy": self.validation_word_accuracy,
            "approximation_accuracy": self.approximation_accuracy,
            "queries_this_epoch": self.queries_this_epoch,
            "wall_time_seconds": self.wall_time_seconds,
        }


# ---------------------------------------------------------------------------
# Batch assembly.
# ---------------------------------------------------------------------------


def _batch_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    """Stack variable-width strips into (B, 1, H, W_max), right-padded with white."""
    height = images[0].shape[0]
    w_max = max(im.shape[1] for im in images)
    out = torch.ones((len(images), 1, height, w_max), dtype=torch.float32)
    for i, im in enumerate(images):
        if im.shape[0] != height:
            raise ValueError("all strips in a batch must share one height")
        out[i, 0, :, : im.shape[1]] = torch.from_numpy(np.asarray(im, dtype=np.float32))
    return out


def _encode_batch(texts: Sequence[str], alphabet: Alphabet) -> tuple[torch.Tensor, torch.Tensor]:
    """Labels as a 0-padded (B, L_max) index tensor plus true lengths."""
    encoded = [alphabet.encode(t) for t in texts]
    l_max = max((len(e) for e in encoded), default=0)
    targets = torch.zeros((len(texts), l_max), dtype=torch.long)
    for i, e in enumerate(encoded):
        targets[i, : len(e)] = torch.tensor(e, dtype=torch.long)
    lengths = torch.tensor([len(e) for e in encoded], dtype=torch.long)
    return targets, lengths


def _fit_target(text: str, alphabet: Alphabet, timesteps: int) -> str:
    """Make an OCR output usable as a CTC target for a T-frame prediction.

    Characters outside the alphabet are dropped, and the text is truncated
    until its minimum alignment length (length + adjacent repeats) fits. The
    simulated engine never triggers either path; external engines might.
    """
    text = "".join(ch for ch in text if ch in alphabet.characters)
    while text and len(text) + sum(a == b for a, b in zip(text, text[1:])) > timesteps:
        text = text[:-1]
    return text


def _subsample_indices(n: int, size: int | None) -> list[int]:
    """Deterministic evenly spaced subsample (all indices when size is None)."""
    if size is None or size >= n:
        return list(range(n))
    if size < 1:
        raise ValueError("subsample size must be >= 1")
    return [i * n // size for i in range(size)]


# ---------------------------------------------------------------------------
# Pretraining (cold start).
# ---------------------------------------------------------------------------


def prepass(strips: Sequence[TextStrip], backend: OcrBackend, cache: ResponseCache,
            ledger: QueryLedger) -> None:
    """Query the engine once per strip, retaining outputs in the cache.

    These pretrain_prepass queries are the only engine reads needed for CER
    history seeding, document ranking, and approximator pretraining; repeated
    calls are free thanks to the cache.
    """
    for strip in strips:
        cached_recognize(backend, strip.image, cache, ledger=ledger,
                         phase="pretrain_prepass", sample_id=strip.sample_id, epoch=0)


def pretrain_approximator(f: Approximator, strips: Sequence[TextStrip], backend: OcrBackend,
                          epochs: int, *, alphabet: Alphabet, cache: ResponseCache,
                          ledger: QueryLedger, lr: float = 5e-3, weight_decay: float = 5e-4,
                          batch_size: int = 32, seed: int = 0) -> Approximator:
    """Fit f to the engine's outputs on the raw strips before budgeted training.

    Runs the pre-pass (a no-op if already cached), then trains f with CTC
    against the OCR outputs. epochs=0 leaves f untouched but still performs
    the pre-pass, which the CER history and pruning depend on.
    """
    prepass(strips, backend, cache, ledger)
    backend_id = backend.descriptor.backend_id
    ocr_texts = []
    for strip in strips:
        text = cache.get(backend_id, image_hash(strip.image))
        if text is None:
            raise ValueError(f"missing pre-pass OCR output for sample {strip.sample_id!r}")
        ocr_texts.append(text)
    if epochs == 0:
        return f
    opt = AdamW(list(f.named_parameters()), lr=lr, weight_decay=weight_decay)
    params = [p for _, p in f.named_parameters()]
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, _PRETRAIN_STREAM, epoch])
        order = rng.permutation(len(strips))
        for start in range(0, len(strips), batch_size):
            idx = order[start : start + batch_size]
            batch = [strips[i] for i in idx]
            x = _batch_tensor([s.image for s in batch])
            timesteps = x.shape[-1] // 4
            texts = [_fit_target(ocr_texts[i], alphabet, timesteps) for i in idx]
            targets, lengths = _encode_batch(texts, alphabet)
            loss = ctc_loss_batch(f(x), targets, lengths).mean()
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite pretraining loss in epoch {epoch}")
            grads = torch.autograd.grad(loss, params)
            opt.step(grads)
    return f


# ---------------------------------------------------------------------------
# Budgeted epoch loop.
# ---------------------------------------------------------------------------


def train_epoch(g: Preprocessor, f: Approximator, strips: Sequence[TextStrip],
                backend: OcrBackend, config: TrainConfig, history: CerHistory,
                ledger: QueryLedger, epoch: int, *, alphabet: Alphabet = DEFAULT_ALPHABET,
                opt_f: AdamW, opt_g: AdamW, validation_strips: Sequence[TextStrip] = (),
                val_subsample: int | None = None,
                jitter_log: list[float] | None = None) -> EpochReport:
    """One pass over the training strips with alternating f/g updates.

    Per minibatch: preprocess everything through g; pick the query plan and
    the samples that spend it; per selected sample and repeat, jitter the
    preprocessed image with per-pixel Gaussian noise (sigma drawn uniformly
    from jitter_sigmas), query the engine on the jittered image, and sum
    CTC(f(jittered), OCR(jittered)); step f on that sum; then step g on
    mean[CTC(f(g(x)), ground truth) + beta * MSE(g(x), all-white)] with f
    frozen (asserted bit-identical); finally decode f's batch predictions
    and write this epoch's CERs into the history. With a 0% budget the
    query/f-update stage is skipped entirely.
    """
    t0 = time.perf_counter()
    shuffle_rng = np.random.default_rng([config.seed, _SHUFFLE_STREAM, epoch])
    jitter_rng = np.random.default_rng([config.seed, _JITTER_STREAM, epoch])
    select_rng = np.random.default_rng([config.seed, _SELECT_STREAM, epoch])
    order = shuffle_rng.permutation(len(strips))
    queries_before = ledger.total_queries("train")
    params_f = [p for _, p in f.named_parameters()]
    params_g = [p for _, p in g.named_parameters()]

    loss_f_total = 0.0
    loss_f_queries = 0
    loss_g_batches: list[float] = []
    for start in range(0, len(strips), config.batch_size):
        batch = [strips[i] for i in order[start : start + config.batch_size]]
        ids = [s.sample_id for s in batch]
        x = _batch_tensor([s.image for s in batch])
        timesteps = x.shape[-1] // 4
        with torch.no_grad():
            gx = g(x)

        plan = compute_k(config.budget, len(batch))
        if plan.total_queries:
            history.cers(ids, before_epoch=epoch)  # staleness contract
            chosen = config.strategy.select(ids, history, plan.k_select, select_rng)
            jobs = [i for i in chosen for _ in range(plan.jitter_repeats)]
            if plan.extra_queries:
                jobs.extend(config.strategy.select(ids, history, plan.extra_queries, select_rng))
            jittered_images: list[np.ndarray] = []
            ocr_texts: list[str] = []
            for i in jobs:
                sigma = float(jitter_rng.choice(config.jitter_sigmas))
                if jitter_log is not None:
                    jitter_log.append(sigma)
                noise = jitter_rng.normal(0.0, sigma, size=gx[i, 0].shape)
                jittered = np.clip(gx[i, 0].numpy().astype(np.float64) + noise, 0.0, 1.0)
                jittered_images.append(jittered)
                ocr_texts.append(recognize(backend, jittered, ledger=ledger, phase="train",
                                           sample_id=ids[i], epoch=epoch))
            xj = _batch_tensor(jittered_images)
            texts = [_fit_target(t, alphabet, timesteps) for t in ocr_texts]
            targets, lengths = _encode_batch(texts, alphabet)
            loss_f = ctc_loss_batch(f(xj), targets, lengths).sum()
            if not math.isfinite(loss_f.item()):
                raise FloatingPointError(f"non-finite approximator loss in epoch {epoch}, "
                                         f"batch starting at {start}")
            opt_f.step(torch.autograd.grad(loss_f, params_f))
            loss_f_total += loss_f.item()
            loss_f_queries += len(jobs)

        phi_before = flatten_tensors(params_f)
        gx_live = g(x)
        log_probs = f(gx_live)
        targets_gt, lengths_gt = _encode_batch([s.text for s in batch], alphabet)
        loss_g = ctc_loss_batch(log_probs, targets_gt, lengths_gt).mean()
        if config.beta != 0.0:
            loss_g = loss_g + config.beta * ((gx_live - 1.0) ** 2).mean()
        if not math.isfinite(loss_g.item()):
            raise FloatingPointError(f"non-finite preprocessor loss in epoch {epoch}, "
                                     f"batch starting at {start}")
        opt_g.step(torch.autograd.grad(loss_g, params_g))
        if not torch.equal(phi_before, flatten_tensors(params_f)):
            raise AssertionError("approximator weights changed during the preprocessor update")
        loss_g_batches.append(loss_g.item())

        decoded = [greedy_decode(log_probs[i], alphabet) for i in range(len(batch))]
        record_epoch_cers(history, ids, decoded, [s.text for s in batch], epoch)

    if len(validation_strips):
        val_acc, approx_acc = validate(g, f, backend, validation_strips, alphabet=alphabet,
                                       ledger=ledger, epoch=epoch, subsample=val_subsample)
    else:
        val_acc, approx_acc = float("nan"), float("nan")
    queries_epoch = ledger.total_queries("train") - queries_before
    return EpochReport(
        epoch=epoch,
        train_loss_f=loss_f_total / loss_f_queries if loss_f_queries else 0.0,
        train_loss_g=sum(loss_g_batches) / len(loss_g_batches) if loss_g_batches else 0.0,
        validation_word_accuracy=val_acc,
        approximation_accuracy=approx_acc,
        queries_this_epoch=queries_epoch,
        wall_time_seconds=time.perf_counter() - t0,
    )


def validate(g: Preprocessor, f: Approximator, backend: OcrBackend,
             strips: Sequence[TextStrip], *, alphabet: Alphabet = DEFAULT_ALPHABET,
             ledger: QueryLedger, epoch: int, subsample: int | None = None) -> tuple[float, float]:
    """Word accuracy of engine-on-preprocessed strips, and f's agreement with it.

    Each evaluated strip costs exactly one eval-phase query; the approximation
    accuracy (exact-match rate of f's decodes against the engine outputs)
    reuses those same queries. The optional subsample is deterministic and
    evenly spaced.
    """
    if not len(strips):
        raise ValueError("validation requires at least one strip")
    chosen = [strips[i] for i in _subsample_indices(len(strips), subsample)]
    ocr_out: list[str] = []
    f_out: list[str] = []
    truths: list[str] = []
    with torch.no_grad():
        for strip in chosen:
            x = _batch_tensor([strip.image])
            gx = g(x)
            text = recognize(backend, gx[0, 0].numpy().astype(np.float64), ledger=ledger,
                             phase="eval", sample_id=strip.sample_id, epoch=epoch)
            ocr_out.append(text)
            f_out.append(greedy_decode(f(gx)[0], alphabet))
            truths.append(strip.text)
    return word_accuracy(ocr_out, truths), word_accuracy(f_out, ocr_out)


# ---------------------------------------------------------------------------
# End-to-end experiment.
# ---------------------------------------------------------------------------


def _planned_train_queries(config: TrainConfig, n_strips: int) -> int:
    """Exact train-phase entitlement: the per-batch plans summed over all epochs."""
    per_epoch = 0
    for start in range(0, n_strips, config.batch_size):
        size = min(config.batch_size, n_strips - start)
        per_epoch += compute_k(config.budget, size).total_queries
    return per_epoch * config.epochs


def run_experiment(config: TrainConfig, *, train_strips: Sequence[TextStrip],
                   validation_strips: Sequence[TextStrip], test_strips: Sequence[TextStrip],
                   backend: OcrBackend, out_dir: str | Path, prune_fraction: float = 0.0,
                   val_subsample: int | None = None, cache: ResponseCache | None = None,
                   alphabet: Alphabet = DEFAULT_ALPHABET,
                   pretrained: str | Path | None = None) -> dict:
    """Full pipeline: pre-pass, prune, pretrain, budgeted epochs, test evaluation.

    Writes epoch reports (epochs.jsonl, flushed per epoch), the best/last
    checkpoints, prune report, CER history, query ledger, and a final
    summary.json whose contents are a pure function of (config, dataset,
    prune_fraction) apart from the wall_time_seconds field. Returns the
    summary dict.

    `pretrained` points at a checkpoint whose approximator replaces the
    in-run pretraining fit, so one pretrained f can be shared across a
    budget sweep; the pre-pass still runs (a cache no-op when warm) since
    the CER history and pruning depend on it.
    """
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    g = Preprocessor()
    f = Approximator(alphabet.size)
    ledger = QueryLedger()
    cache = cache if cache is not None else ResponseCache()

    # Pre-pass on every training strip: the single per-strip engine read that
    # seeds the CER history, the document ranking, and pretraining targets.
    prepass(train_strips, backend, cache, ledger)
    history = initialize_history(train_strips, backend, cache)
    ranked = rank_documents(documents_from_strips(train_strips), history)
    kept_docs = prune(ranked, prune_fraction)
    kept = keep_strips(train_strips, kept_docs)
    write_prune_report(out / "prune_report.csv", ranked, kept_docs)

    if pretrained is not None:
        pretrain_approximator(f, kept, backend, 0, alphabet=alphabet,
                              cache=cache, ledger=ledger)
        loaded = load_checkpoint(pretrained)
        donor = loaded["approximator"]
        if donor.descriptor != f.descriptor:
            raise ValueError(f"pretrained checkpoint {pretrained} has descriptor "
                             f"{donor.descriptor}, expected {f.descriptor}")
        unflatten_into(flatten_tensors(list(donor.parameters())), list(f.parameters()))
    else:
        pretrain_approximator(f, kept, backend, config.pretrain_epochs, alphabet=alphabet,
                              cache=cache, ledger=ledger, lr=config.lr_pretrain,
                              weight_decay=config.weight_decay, batch_size=config.batch_size,
                              seed=config.seed)

    opt_f = AdamW(list(f.named_parameters()), lr=config.lr_approximator,
                  weight_decay=config.weight_decay)
    opt_g = AdamW(list(g.named_parameters()), lr=config.lr_preprocessor,
                  weight_decay=config.weight_decay)

    best_acc, best_epoch = -1.0, -1
    reports: list[EpochReport] = []
    reports_path = out / "epochs.jsonl"
    best_path = out / "checkpoint_best.npz"
    last_path = out / "checkpoint_last.npz"
    with reports_path.open("w") as fh:
        for epoch in range(config.epochs):
            report = train_epoch(g, f, kept, backend, config, history, ledger, epoch,
                                 alphabet=alphabet, opt_f=opt_f, opt_g=opt_g,
                                 validation_strips=validation_strips,
                                 val_subsample=val_subsample)
            reports.append(report)
            fh.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            if report.validation_word_accuracy > best_acc:
                best_acc, best_epoch = report.validation_word_accuracy, epoch
                save_checkpoint(best_path, preprocessor=g, approximator=f, opt_g=opt_g,
                                opt_f=opt_f, epoch=epoch, alphabet=alphabet)
    save_checkpoint(last_path, preprocessor=g, approximator=f, opt_g=opt_g, opt_f=opt_f,
                    epoch=config.epochs - 1, alphabet=alphabet)
    if config.epochs == 0:
        best_acc, _ = validate(g, f, backend, validation_strips, alphabet=alphabet,
                               ledger=ledger, epoch=0, subsample=val_subsample)
        best_epoch = -1
        save_checkpoint(best_path, preprocessor=g, approximator=f, opt_g=opt_g,
                        opt_f=opt_f, epoch=-1, alphabet=alphabet)

    # Evaluate the best checkpoint on the held-out test split.
    best = load_checkpoint(best_path)
    test_acc, test_approx = validate(best["preprocessor"], best["approximator"], backend,
                                     test_strips, alphabet=alphabet, ledger=ledger,
                                     epoch=config.epochs)

    # Budget accounting: epoch deltas, ledger total, and the computed plans
    # must agree exactly.
    planned = _planned_train_queries(config, len(kept))
    from_reports = sum(r.queries_this_epoch for r in reports)
    from_ledger = ledger.total_queries("train")
    if not from_reports == from_ledger == planned:
        raise AssertionError(f"budget accounting mismatch: reports={from_reports}, "
                             f"ledger={from_ledger}, planned={planned}")

    history.to_csv(out / "cer_history.csv")
    ledger.to_csv(out / "ledger.csv")
    summary = {
        "config": config.to_dict(),
        "pretrained_from": None if pretrained is None else str(pretrained),
        "prune_fraction": prune_fraction,
        "dataset": {
            "train_strips": len(train_strips),
            "kept_strips": len(kept),
            "documents": len(ranked),
            "kept_documents": len(kept_docs),
            "validation_strips": len(validation_strips),
            "test_strips": len(test_strips),
            "validation_subsample": val_subsample,
        },
        "best_epoch": best_epoch,
        "best_validation_word_accuracy": best_acc,
        "test_word_accuracy": test_acc,
        "test_approximation_accuracy": test_approx,
        "queries": {
            "pretrain_prepass": ledger.total_queries("pretrain_prepass"),
            "train": from_ledger,
            "train_planned": planned,
            "eval": ledger.total_queries("eval"),
        },
        "total_cost": ledger.total_cost(),
        "wall_time_seconds": time.perf_counter() - t0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
