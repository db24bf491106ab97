"""
Error metrics: alignment, WER/CER/PER, per-phoneme scores, confusion matrices
and paired significance tests.
"""

import logging
import math
from collections import defaultdict
from typing import Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata

from app.models.schemas import (
    CategoryRow,
    ConfusionMatrix,
    EditKind,
    EditOp,
    EditScript,
    ErrorLevel,
    PhonemeCounts,
    PhonemeInventory,
    PhonemeReportRow,
    PhonemeScore,
    PhonemeTally,
)
from app.services.ipa_service import category, segment
from app.utils.errors import ValidationError
from app.utils.helpers import nfc

logger = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 25
ZERO_DIFF_TOL = 1e-12


def align(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> EditScript:
    """Unit-cost Levenshtein alignment.

    Backtrace from the end prefers match, then substitute, delete, insert.
    """
    n, m = len(ref), len(hyp)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    dist[0] = list(range(m + 1))
    for i in range(1, n + 1):
        r = ref[i - 1]
        row, prev = dist[i], dist[i - 1]
        for j in range(1, m + 1):
            cost = 0 if r == hyp[j - 1] else 1
            row[j] = min(prev[j - 1] + cost, prev[j] + 1, row[j - 1] + 1)

    ops: List[EditOp] = []
    i, j = n, m
    while i > 0 or j > 0:
        here = dist[i][j]
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and here == dist[i - 1][j - 1]:
            ops.append(EditOp(kind=EditKind.MATCH, ref=ref[i - 1], hyp=hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and ref[i - 1] != hyp[j - 1] and here == dist[i - 1][j - 1] + 1:
            ops.append(EditOp(kind=EditKind.SUBSTITUTE, ref=ref[i - 1], hyp=hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and here == dist[i - 1][j] + 1:
            ops.append(EditOp(kind=EditKind.DELETE, ref=ref[i - 1]))
            i -= 1
        else:
            ops.append(EditOp(kind=EditKind.INSERT, hyp=hyp[j - 1]))
            j -= 1
    ops.reverse()
    return EditScript(ops=ops)


def tokenize(level: ErrorLevel, text: str, inv: Optional[PhonemeInventory] = None) -> List[str]:
    """Split text into scoring units; phoneme level drops word separators."""
    level = ErrorLevel(level)
    text = " ".join(nfc(text).split())
    if level == ErrorLevel.WORD:
        return text.split()
    if level == ErrorLevel.CHAR:
        return list(text)
    if inv is None:
        raise ValidationError("inv", None, "phoneme level requires an inventory")
    return [inv.surfaces[i] for i in segment(text, inv) if i != inv.separator_index]


def error_rate(level: ErrorLevel, ref: str, hyp: str, inv: Optional[PhonemeInventory] = None) -> float:
    """edit_distance / max(1, |ref tokens|); may exceed 1."""
    ref_tokens = tokenize(level, ref, inv)
    hyp_tokens = tokenize(level, hyp, inv)
    return align(ref_tokens, hyp_tokens).distance / max(1, len(ref_tokens))


def corpus_error_rate(
    level: ErrorLevel, pairs: Iterable[Tuple[str, str]], inv: Optional[PhonemeInventory] = None
) -> Tuple[int, int, float]:
    """Micro-averaged rate: total edits over total reference tokens."""
    edits = 0
    ref_total = 0
    for ref, hyp in pairs:
        ref_tokens = tokenize(level, ref, inv)
        edits += align(ref_tokens, tokenize(level, hyp, inv)).distance
        ref_total += len(ref_tokens)
    return edits, ref_total, edits / max(1, ref_total)


def utterance_error_rates(
    level: ErrorLevel, pairs: Iterable[Tuple[str, str]], inv: Optional[PhonemeInventory] = None
) -> List[float]:
    return [error_rate(level, ref, hyp, inv) for ref, hyp in pairs]


def tally(scripts: Iterable[EditScript]) -> PhonemeTally:
    """Accumulate N/S/I/D; a substitution charges S to the reference and S_hyp to the hypothesis."""
    counters: Dict[str, Dict[str, int]] = defaultdict(lambda: {"N": 0, "S": 0, "I": 0, "D": 0, "S_hyp": 0})
    for script in scripts:
        for op in script.ops:
            if op.kind == EditKind.MATCH:
                counters[op.ref]["N"] += 1
            elif op.kind == EditKind.SUBSTITUTE:
                counters[op.ref]["S"] += 1
                counters[op.hyp]["S_hyp"] += 1
            elif op.kind == EditKind.DELETE:
                counters[op.ref]["D"] += 1
            else:
                counters[op.hyp]["I"] += 1
    return PhonemeTally(counts={k: PhonemeCounts(**v) for k, v in counters.items()})


def merge(left: PhonemeTally, right: PhonemeTally) -> PhonemeTally:
    """Sum two tallies key by key."""
    merged: Dict[str, PhonemeCounts] = {}
    for key in set(left.counts) | set(right.counts):
        a = left.counts.get(key, PhonemeCounts())
        b = right.counts.get(key, PhonemeCounts())
        merged[key] = PhonemeCounts(
            N=a.N + b.N,
            S=a.S + b.S,
            I=a.I + b.I,
            D=a.D + b.D,
            S_hyp=a.hyp_substitutions + b.hyp_substitutions,
        )
    return PhonemeTally(counts=dict(sorted(merged.items())))


def score_counts(counts: PhonemeCounts) -> Tuple[float, float, float]:
    """(precision, recall, F1); zero denominators give zero scores."""
    hyp_support = counts.hyp_support
    ref_support = counts.ref_support
    precision = counts.N / hyp_support if hyp_support else 0.0
    recall = counts.N / ref_support if ref_support else 0.0
    f1 = 2 * counts.N / (hyp_support + ref_support) if counts.N else 0.0
    return precision, recall, f1


def phoneme_scores(phoneme_tally: PhonemeTally) -> Dict[str, PhonemeScore]:
    scores = {}
    for surface, counts in phoneme_tally.counts.items():
        precision, recall, f1 = score_counts(counts)
        scores[surface] = PhonemeScore(surface=surface, precision=precision, recall=recall, f1=f1)
    return scores


def confusion(scripts: Iterable[EditScript], labels: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    """Reference-by-hypothesis counts over matches and substitutions."""
    scripts = list(scripts)
    if labels is None:
        seen = set()
        for script in scripts:
            for op in script.ops:
                seen.update(t for t in (op.ref, op.hyp) if t is not None)
        labels = sorted(seen)
    labels = list(labels)
    position = {label: i for i, label in enumerate(labels)}
    size = len(labels)

    counts = np.zeros((size, size), dtype=np.int64)
    insertions = np.zeros(size, dtype=np.int64)
    deletions = np.zeros(size, dtype=np.int64)
    for script in scripts:
        for op in script.ops:
            if op.kind in (EditKind.MATCH, EditKind.SUBSTITUTE):
                counts[position[op.ref], position[op.hyp]] += 1
            elif op.kind == EditKind.DELETE:
                deletions[position[op.ref]] += 1
            else:
                insertions[position[op.hyp]] += 1
    return ConfusionMatrix(labels=labels, counts=counts, insertions=insertions, deletions=deletions)


def confusion_frame(matrix: ConfusionMatrix, normalized: bool = False) -> pd.DataFrame:
    values = matrix.row_normalized() if normalized else matrix.counts
    return pd.DataFrame(values, index=pd.Index(matrix.labels, name="ref"), columns=matrix.labels)


def _exact_p_value(ranks: np.ndarray, w_plus: float) -> float:
    """Two-sided exact p-value from the sign-flip distribution of W+.

    Average ranks are multiples of 1/2, so doubled ranks are integers and the
    2^n sign assignments collapse into a count vector over doubled sums.
    """
    doubled = np.rint(ranks * 2).astype(np.int64)
    total = int(doubled.sum())
    dist = np.zeros(total + 1, dtype=np.float64)
    dist[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[: total + 1 - r]
        dist = dist + shifted
    dist /= dist.sum()

    observed = int(round(w_plus * 2))
    lower = dist[: observed + 1].sum()
    upper = dist[observed:].sum()
    return float(min(1.0, 2.0 * min(lower, upper)))


def _normal_p_value(ranks: np.ndarray, w_plus: float) -> float:
    """Normal approximation with tie and continuity corrections."""
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts**3 - tie_counts)) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(z)))


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], method: str = "auto") -> float:
    """Two-sided paired Wilcoxon signed-rank p-value.

    Zero differences are dropped and ties share average ranks. ``method`` is
    ``auto`` (exact up to 25 non-zero pairs), ``exact`` or ``approx``.
    """
    if len(a) != len(b) or len(a) == 0:
        raise ValidationError("samples", (len(a), len(b)), "paired samples must be non-empty and equal length")
    diffs = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    diffs = diffs[np.abs(diffs) > ZERO_DIFF_TOL]
    if diffs.size == 0:
        return 1.0

    ranks = rankdata(np.abs(diffs))
    w_plus = float(ranks[diffs > 0].sum())
    if method == "exact" or (method == "auto" and diffs.size <= EXACT_WILCOXON_MAX_N):
        return _exact_p_value(ranks, w_plus)
    return _normal_p_value(ranks, w_plus)


def format_p_value(p: float) -> str:
    return "<1e-3" if p < 1e-3 else f"{p:.3f}"


def pairwise_wilcoxon(rates: Mapping[str, Sequence[float]]) -> pd.DataFrame:
    """Symmetric matrix of p-values between every pair of systems."""
    names = list(rates)
    values = np.ones((len(names), len(names)))
    for i, left in enumerate(names):
        for j in range(i + 1, len(names)):
            p = wilcoxon_signed_rank(rates[left], rates[names[j]])
            values[i, j] = values[j, i] = p
    return pd.DataFrame(values, index=pd.Index(names, name="model"), columns=names)


def report_rows(
    phoneme_tally: PhonemeTally,
    inv: PhonemeInventory,
    train_freq: Optional[Mapping[str, int]] = None,
) -> List[PhonemeReportRow]:
    """Per-phoneme report rows in inventory order (phonemes absent from the tally get zero counts)."""
    train_freq = train_freq or {}
    rows = []
    surfaces = [s for i, s in enumerate(inv.surfaces) if not inv.is_special(i)]
    extra = sorted(set(phoneme_tally.counts) - set(surfaces))
    for surface in surfaces + extra:
        counts = phoneme_tally.counts.get(surface, PhonemeCounts())
        precision, recall, f1 = score_counts(counts)
        index = inv.index.get(surface)
        rows.append(
            PhonemeReportRow(
                surface=surface,
                complexity=inv.phonemes[index].complexity if index is not None else 1,
                N=counts.N,
                S=counts.S,
                I=counts.I,
                D=counts.D,
                S_hyp=counts.hyp_substitutions,
                precision=precision,
                recall=recall,
                f1=f1,
                train_freq=int(train_freq.get(surface, 0)),
                test_freq=counts.ref_support,
            )
        )
    return rows


def complexity_table(rows: Sequence[PhonemeReportRow], inv: PhonemeInventory) -> Tuple[List[CategoryRow], float]:
    """Category-averaged F1 and Pearson r between complexity and category mean F1."""
    from app.services.analysis_service import pearson_r

    groups: Dict[str, List[PhonemeReportRow]] = defaultdict(list)
    for row in rows:
        if row.N + row.S + row.D == 0:
            continue
        groups[category(row.surface, inv)].append(row)

    table = [
        CategoryRow(
            category=label,
            complexity=members[0].complexity,
            mean_f1=float(np.mean([m.f1 for m in members])),
            n_phonemes=len(members),
        )
        for label, members in groups.items()
    ]
    table.sort(key=lambda r: (r.complexity, r.category))

    if len(table) < 2:
        return table, float("nan")
    r = pearson_r([row.complexity for row in table], [row.mean_f1 for row in table])
    return table, r
