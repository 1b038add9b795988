"""Document-level pruning by mean pre-pass CER.

Documents whose strips the OCR engine already reads well (low mean CER)
contribute the least training signal per query, so a fixed fraction of the
lowest-mean-CER documents is dropped before training. Every strip of a kept
document stays; every strip of a pruned document goes and never generates a
training query.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .selection import CerHistory
from .synthdoc import SynthDocument, TextStrip

__all__ = ["DocumentRank", "rank_documents", "prune", "keep_strips", "write_prune_report"]


@dataclass(frozen=True)
class DocumentRank:
    """One document's position in the pruning order."""

    document_id: str
    mean_cer: float
    strip_count: int


def rank_documents(documents: Sequence[SynthDocument], history: CerHistory) -> list[DocumentRank]:
    """Rank documents by descending mean pre-pass CER of their strips.

    Ties break by ascending document_id so the ranking is total and
    deterministic. Every strip must already have a stored CER (the pre-pass
    seeds it); a missing one is an invalid state named after the strip.
    """
    ranks = []
    for doc in documents:
        if not doc.strip_ids:
            raise ValueError(f"document {doc.document_id!r} has no strips")
        total = 0.0
        for sid in doc.strip_ids:
            if sid not in history:
                raise ValueError(f"cannot rank document {doc.document_id!r}: "
                                 f"no stored CER for strip {sid!r}")
            total += history.cer_of(sid)
        ranks.append(DocumentRank(doc.document_id, total / len(doc.strip_ids),
                                  len(doc.strip_ids)))
    ranks.sort(key=lambda r: (-r.mean_cer, r.document_id))
    return ranks


def prune(ranked: Sequence[DocumentRank], prune_fraction: float) -> list[DocumentRank]:
    """Keep all but the floor(prune_fraction * len) lowest-ranked documents.

    The ranking puts low mean CER last, so the tail is removed. fraction=0 is
    the identity; the fraction must leave at least one document.
    """
    if not 0.0 <= prune_fraction < 1.0:
        raise ValueError("prune_fraction must be in [0, 1)")
    n_prune = int(prune_fraction * len(ranked))
    if n_prune >= len(ranked):
        raise ValueError("pruning would remove every document")
    return list(ranked[:len(ranked) - n_prune])


def keep_strips(strips: Sequence[TextStrip], kept: Sequence[DocumentRank]) -> list[TextStrip]:
    """Strips belonging to kept documents, preserving the original strip order."""
    kept_ids = {r.document_id for r in kept}
    return [s for s in strips if s.document_id in kept_ids]


def write_prune_report(path: str | Path, ranked: Sequence[DocumentRank],
                       kept: Sequence[DocumentRank]) -> None:
    """CSV of the full ranking: document_id,mean_cer,kept (ranking order)."""
    kept_ids = {r.document_id for r in kept}
    with Path(path).open("w") as fh:
        fh.write("document_id,mean_cer,kept\n")
        for r in ranked:
            fh.write(f"{r.document_id},{r.mean_cer},{int(r.document_id in kept_ids)}\n")
