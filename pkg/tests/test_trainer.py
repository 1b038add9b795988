"""The alternating training loop: budgets, jitter, frozen-phi, determinism.

Everything runs on a miniature dataset (tens of strips, 2-3 epochs) so the
full-pipeline contracts stay cheap to check; the shipped-benchmark trends
live in the acceptance suite.
"""

import csv
import json

import numpy as np
import pytest
import torch

from ocrbypass.engines import (
    QueryLedger,
    ResponseCache,
    SimulatedEngine,
    SimulatedEngineConfig,
)
from ocrbypass.neural import AdamW, Alphabet, Approximator, Preprocessor, load_checkpoint
from ocrbypass.selection import BudgetPolicy, CerHistory, SelectionStrategy, initialize_history
from ocrbypass.synthdoc import DegradationRanges, GlyphAtlas, generate_dataset, load_words
from ocrbypass.trainer import (
    DEFAULT_ALPHABET,
    TrainConfig,
    _batch_tensor,
    _encode_batch,
    _fit_target,
    _subsample_indices,
    prepass,
    pretrain_approximator,
    run_experiment,
    train_epoch,
    validate,
)

ATLAS = GlyphAtlas.load_default()
ENGINE = SimulatedEngine(SimulatedEngineConfig(atlas=ATLAS))


@pytest.fixture(scope="module")
def tiny():
    """50/10/10 strips in 10 train documents, plus a warm shared cache."""
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        words = [w for w in load_words() if len(w) <= 5][:40]
        strips = generate_dataset(tmp, words, ATLAS, counts=(50, 10, 10),
                                  strips_per_document=5, seed=11)
        split = {name: [s for s in strips if s.split == name]
                 for name in ("train", "validation", "test")}
        cache = ResponseCache()
        prepass(split["train"], ENGINE, cache, QueryLedger())
        yield split, cache


def tiny_config(**overrides):
    defaults = dict(epochs=2, pretrain_epochs=2, lr_pretrain=5e-3,
                    lr_approximator=2e-3, lr_preprocessor=2e-3, batch_size=10,
                    budget=BudgetPolicy(100.0), strategy=SelectionStrategy("uniform_cer"),
                    seed=0)
    defaults.update(overrides)
    return TrainConfig(**defaults)


def fresh_models(seed=0):
    torch.manual_seed(seed)
    return Preprocessor(), Approximator(DEFAULT_ALPHABET.size)


def make_optimizers(g, f, config):
    return (AdamW(list(f.named_parameters()), lr=config.lr_approximator,
                  weight_decay=config.weight_decay),
            AdamW(list(g.named_parameters()), lr=config.lr_preprocessor,
                  weight_decay=config.weight_decay))


# --- small helpers -----------------------------------------------------------


def test_fit_target_truncates_to_the_alignment_budget():
    ab = Alphabet("abc")
    assert _fit_target("abc", ab, 8) == "abc"
    assert _fit_target("a!b?c", ab, 8) == "abc"  # foreign characters dropped
    assert _fit_target("abcabc", ab, 3) == "abc"
    # "aaaa" needs blanks between repeats: length 2 costs 3 frames.
    assert _fit_target("aaaa", ab, 3) == "aa"
    assert _fit_target("", ab, 4) == ""
    assert _fit_target("xyz", Alphabet("ab"), 4) == ""


def test_subsample_is_deterministic_and_evenly_spaced():
    assert _subsample_indices(10, None) == list(range(10))
    assert _subsample_indices(4, 9) == [0, 1, 2, 3]
    assert _subsample_indices(10, 3) == [0, 3, 6]
    assert _subsample_indices(10, 3) == _subsample_indices(10, 3)
    with pytest.raises(ValueError):
        _subsample_indices(10, 0)


def test_batch_tensor_right_pads_with_white():
    a = np.zeros((4, 6))
    b = np.full((4, 2), 0.5)
    batch = _batch_tensor([a, b])
    assert batch.shape == (2, 1, 4, 6)
    assert torch.all(batch[1, 0, :, 2:] == 1.0)
    assert torch.all(batch[1, 0, :, :2] == 0.5)
    with pytest.raises(ValueError, match="height"):
        _batch_tensor([a, np.ones((6, 2))])


def test_encode_batch_zero_pads_labels():
    targets, lengths = _encode_batch(["ab", "a", ""], Alphabet("ab"))
    assert targets.tolist() == [[1, 2], [1, 0], [0, 0]]
    assert lengths.tolist() == [2, 1, 0]


# --- pre-pass and pretraining -------------------------------------------------


def test_prepass_charges_once_per_strip_then_never_again(tiny):
    split, _ = tiny
    cache = ResponseCache()
    ledger = QueryLedger()
    prepass(split["train"], ENGINE, cache, ledger)
    assert ledger.total_queries("pretrain_prepass") == len(split["train"])
    prepass(split["train"], ENGINE, cache, ledger)
    assert ledger.total_queries("pretrain_prepass") == len(split["train"])


def test_pretrain_zero_epochs_leaves_f_untouched_but_runs_the_prepass(tiny):
    split, _ = tiny
    _, f = fresh_models()
    before = [p.clone() for p in f.parameters()]
    cache = ResponseCache()
    ledger = QueryLedger()
    pretrain_approximator(f, split["train"], ENGINE, 0, alphabet=DEFAULT_ALPHABET,
                          cache=cache, ledger=ledger)
    assert all(torch.equal(a, b) for a, b in zip(before, f.parameters()))
    assert ledger.total_queries("pretrain_prepass") == len(split["train"])
    assert len(cache) == len(split["train"])


def test_pretrain_updates_f_and_charges_no_training_queries(tiny):
    split, cache = tiny
    _, f = fresh_models()
    before = [p.clone() for p in f.parameters()]
    ledger = QueryLedger()
    pretrain_approximator(f, split["train"], ENGINE, 2, alphabet=DEFAULT_ALPHABET,
                          cache=cache, ledger=ledger, batch_size=10, seed=0)
    assert not all(torch.equal(a, b) for a, b in zip(before, f.parameters()))
    assert ledger.total_queries("train") == 0
    assert ledger.total_queries("pretrain_prepass") == 0  # cache was already warm


# --- train_epoch contracts -----------------------------------------------------


def run_one_epoch(split, cache, config, jitter_log=None, epoch=0):
    g, f = fresh_models(config.seed)
    history = initialize_history(split["train"], ENGINE, cache)
    ledger = QueryLedger()
    opt_f, opt_g = make_optimizers(g, f, config)
    report = train_epoch(g, f, split["train"], ENGINE, config, history, ledger, epoch,
                         opt_f=opt_f, opt_g=opt_g, validation_strips=split["validation"],
                         jitter_log=jitter_log)
    return g, f, ledger, report


def test_zero_budget_freezes_phi_and_issues_no_queries(tiny):
    split, cache = tiny
    config = tiny_config(budget=BudgetPolicy(0.0))
    g, f, ledger, report = run_one_epoch(split, cache, config)
    assert report.queries_this_epoch == 0
    assert ledger.total_queries("train") == 0
    assert report.train_loss_f == 0.0
    _, f_ref = fresh_models(config.seed)
    assert all(torch.equal(a, b) for a, b in zip(f_ref.parameters(), f.parameters()))
    # g still trained against the frozen approximator
    g_ref, _ = fresh_models(config.seed)
    assert not all(torch.equal(a, b) for a, b in zip(g_ref.parameters(), g.parameters()))


def test_full_budget_queries_twice_per_strip_and_updates_phi(tiny):
    split, cache = tiny
    config = tiny_config()
    g, f, ledger, report = run_one_epoch(split, cache, config)
    assert report.queries_this_epoch == 2 * len(split["train"])
    assert ledger.total_queries("train") == report.queries_this_epoch
    assert ledger.queries_by_epoch("train") == {0: 2 * len(split["train"])}
    _, f_ref = fresh_models(config.seed)
    assert not all(torch.equal(a, b) for a, b in zip(f_ref.parameters(), f.parameters()))


def test_fifty_percent_budget_is_one_query_per_strip(tiny):
    split, cache = tiny
    config = tiny_config(budget=BudgetPolicy(50.0))
    *_, report = run_one_epoch(split, cache, config)
    assert report.queries_this_epoch == len(split["train"])


def test_jitter_sigmas_are_drawn_uniformly(tiny):
    split, cache = tiny
    config = tiny_config(epochs=1)
    sigmas: list[float] = []
    for epoch in range(3):
        run_one_epoch(split, cache, config, jitter_log=sigmas, epoch=epoch)
    counts = {s: sigmas.count(s) for s in config.jitter_sigmas}
    n = len(sigmas)
    assert n == 3 * 2 * len(split["train"])
    expected = n / len(config.jitter_sigmas)
    bound = 3 * np.sqrt(n * (1 / 6) * (5 / 6))
    assert all(abs(c - expected) <= bound for c in counts.values()), counts


def test_phi_freeze_assertion_catches_sabotage(tiny):
    split, cache = tiny

    class Leaky(AdamW):
        """Optimizer that illegally nudges the approximator during its step."""

        def __init__(self, named_params, lr, victim):
            super().__init__(named_params, lr)
            self.victim = victim

        def step(self, grads):
            super().step(grads)
            with torch.no_grad():
                self.victim.proj.weight.add_(1e-4)

    config = tiny_config(budget=BudgetPolicy(0.0))
    g, f = fresh_models()
    history = initialize_history(split["train"], ENGINE, cache)
    opt_f = AdamW(list(f.named_parameters()), lr=config.lr_approximator)
    opt_g = Leaky(list(g.named_parameters()), config.lr_preprocessor, victim=f)
    with pytest.raises(AssertionError, match="approximator weights changed"):
        train_epoch(g, f, split["train"], ENGINE, config, history,
                    QueryLedger(), 0, opt_f=opt_f, opt_g=opt_g)


def test_epoch_requires_stale_cer_values(tiny):
    split, cache = tiny
    config = tiny_config()
    g, f = fresh_models()
    history = CerHistory()
    for s in split["train"]:
        history.set(s.sample_id, 0.5, epoch=0)  # stamped in the current epoch
    opt_f, opt_g = make_optimizers(g, f, config)
    with pytest.raises(ValueError, match="needs an older value"):
        train_epoch(g, f, split["train"], ENGINE, config, history,
                    QueryLedger(), 0, opt_f=opt_f, opt_g=opt_g)


# --- validate ------------------------------------------------------------------


def test_identity_preprocessor_scores_perfectly_on_clean_strips():
    from ocrbypass.synthdoc import TextStrip, render_clean

    strips = [TextStrip(sample_id=f"s-{i}", image=render_clean(w, ATLAS), text=w,
                        document_id="d", split="validation")
              for i, w in enumerate(["cat", "dog", "sun", "mix"])]
    g, f = fresh_models()
    ledger = QueryLedger()
    word_acc, _ = validate(g, f, ENGINE, strips, ledger=ledger, epoch=0)
    assert word_acc == 1.0
    assert ledger.total_queries("eval") == len(strips)


def test_validate_subsample_costs_exactly_that_many_queries(tiny):
    split, _ = tiny
    g, f = fresh_models()
    ledger = QueryLedger()
    validate(g, f, ENGINE, split["validation"], ledger=ledger, epoch=0, subsample=4)
    assert ledger.total_queries("eval") == 4
    with pytest.raises(ValueError):
        validate(g, f, ENGINE, [], ledger=ledger, epoch=0)


# --- run_experiment ------------------------------------------------------------


def summarize(split, cache, out_dir, config, **kwargs):
    return run_experiment(config, train_strips=split["train"],
                          validation_strips=split["validation"],
                          test_strips=split["test"], backend=ENGINE,
                          out_dir=out_dir, cache=cache, **kwargs)


@pytest.fixture(scope="module")
def full_run(tiny, tmp_path_factory):
    split, cache = tiny
    out = tmp_path_factory.mktemp("run")
    summary = summarize(split, cache, out, tiny_config())
    return split, cache, out, summary


def test_budget_accounting_is_exact_across_reports_ledger_and_plans(full_run):
    split, _, out, summary = full_run
    # 50 strips, batch 10, budget 100% -> 20 per batch, 5 batches, 2 epochs.
    assert summary["queries"]["train"] == summary["queries"]["train_planned"] == 200
    rows = [json.loads(line) for line in (out / "epochs.jsonl").read_text().splitlines()]
    assert sum(r["queries_this_epoch"] for r in rows) == 200
    with (out / "ledger.csv").open() as fh:
        entries = [row for row in csv.DictReader(fh)]
    assert sum(1 for e in entries if e["phase"] == "train") == 200


def test_best_checkpoint_tracks_the_validation_peak(full_run):
    _, _, out, summary = full_run
    rows = [json.loads(line) for line in (out / "epochs.jsonl").read_text().splitlines()]
    accs = [r["validation_word_accuracy"] for r in rows]
    assert summary["best_epoch"] == int(np.argmax(accs))
    assert summary["best_validation_word_accuracy"] == max(accs)
    best = load_checkpoint(out / "checkpoint_best.npz")
    assert best["epoch"] == summary["best_epoch"]


def test_summary_records_dataset_and_artifacts_exist(full_run):
    _, _, out, summary = full_run
    assert summary["dataset"] == {
        "train_strips": 50, "kept_strips": 50, "documents": 10, "kept_documents": 10,
        "validation_strips": 10, "test_strips": 10, "validation_subsample": None,
    }
    assert summary["pretrained_from"] is None
    assert summary["prune_fraction"] == 0.0
    for name in ("summary.json", "epochs.jsonl", "checkpoint_best.npz",
                 "checkpoint_last.npz", "ledger.csv", "cer_history.csv",
                 "prune_report.csv"):
        assert (out / name).exists(), name
    # eval queries: validation every epoch plus the final test pass
    assert summary["queries"]["eval"] == 2 * 10 + 10


def test_rerun_with_identical_inputs_is_byte_identical(tiny, tmp_path):
    split, cache = tiny
    config = tiny_config(budget=BudgetPolicy(8.0), seed=3)
    a = summarize(split, cache, tmp_path / "a", config)
    b = summarize(split, cache, tmp_path / "b", config)
    sa = json.loads((tmp_path / "a" / "summary.json").read_text())
    sb = json.loads((tmp_path / "b" / "summary.json").read_text())
    del sa["wall_time_seconds"], sb["wall_time_seconds"]
    assert sa == sb
    assert a["test_word_accuracy"] == b["test_word_accuracy"]
    ra = [json.loads(line) for line in (tmp_path / "a" / "epochs.jsonl").read_text().splitlines()]
    rb = [json.loads(line) for line in (tmp_path / "b" / "epochs.jsonl").read_text().splitlines()]
    for row_a, row_b in zip(ra, rb):
        del row_a["wall_time_seconds"], row_b["wall_time_seconds"]
    assert ra == rb


def test_zero_epoch_run_just_evaluates_the_pretrained_models(tiny, tmp_path):
    split, cache = tiny
    summary = summarize(split, cache, tmp_path, tiny_config(epochs=0))
    assert summary["best_epoch"] == -1
    assert summary["queries"]["train"] == 0
    assert (tmp_path / "checkpoint_best.npz").exists()
    assert 0.0 <= summary["test_word_accuracy"] <= 1.0


def test_pruning_removes_documents_and_their_queries(tiny, tmp_path):
    split, cache = tiny
    config = tiny_config(seed=1)
    summary = summarize(split, cache, tmp_path, config, prune_fraction=0.3)
    # floor(0.3 * 10 documents) = 3 pruned -> 35 strips kept.
    assert summary["dataset"]["kept_documents"] == 7
    assert summary["dataset"]["kept_strips"] == 35
    assert summary["queries"]["train"] == 2 * 35 * config.epochs

    with (tmp_path / "prune_report.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    pruned_docs = {r["document_id"] for r in rows if r["kept"] == "0"}
    assert len(pruned_docs) == 3
    pruned_strips = {s.sample_id for s in split["train"] if s.document_id in pruned_docs}
    with (tmp_path / "ledger.csv").open() as fh:
        train_ids = {r["sample_id"] for r in csv.DictReader(fh) if r["phase"] == "train"}
    assert not train_ids & pruned_strips


def test_pretrained_artifact_reproduces_the_inline_trajectory(tiny, tmp_path):
    from ocrbypass.neural import save_checkpoint
    from ocrbypass.trainer import pretrain_approximator as pretrain

    split, cache = tiny
    config = tiny_config(seed=5)

    # Build the artifact exactly as run_experiment would pretrain inline.
    torch.set_num_threads(1)
    torch.manual_seed(config.seed)
    g = Preprocessor()
    f = Approximator(DEFAULT_ALPHABET.size)
    pretrain(f, split["train"], ENGINE, config.pretrain_epochs, alphabet=DEFAULT_ALPHABET,
             cache=cache, ledger=QueryLedger(), lr=config.lr_pretrain,
             weight_decay=config.weight_decay, batch_size=config.batch_size,
             seed=config.seed)
    artifact = tmp_path / "pretrained.npz"
    save_checkpoint(artifact, preprocessor=g, approximator=f, opt_g=None, opt_f=None,
                    epoch=-1, alphabet=DEFAULT_ALPHABET)

    inline = summarize(split, cache, tmp_path / "inline", config)
    reused = summarize(split, cache, tmp_path / "reused", config, pretrained=artifact)
    assert reused["pretrained_from"] == str(artifact)

    last_a = load_checkpoint(tmp_path / "inline" / "checkpoint_last.npz")
    last_b = load_checkpoint(tmp_path / "reused" / "checkpoint_last.npz")
    for key in ("preprocessor", "approximator"):
        for pa, pb in zip(last_a[key].parameters(), last_b[key].parameters()):
            assert torch.equal(pa, pb)
    assert inline["test_word_accuracy"] == reused["test_word_accuracy"]


def test_pretrained_artifact_must_match_the_architecture(tiny, tmp_path):
    from ocrbypass.neural import save_checkpoint

    split, cache = tiny
    artifact = tmp_path / "wrong.npz"
    save_checkpoint(artifact, preprocessor=Preprocessor(),
                    approximator=Approximator(DEFAULT_ALPHABET.size, hidden=16),
                    opt_g=None, opt_f=None, epoch=-1, alphabet=DEFAULT_ALPHABET)
    with pytest.raises(ValueError, match="descriptor"):
        summarize(split, cache, tmp_path / "out", tiny_config(), pretrained=artifact)
