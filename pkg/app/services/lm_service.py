"""
Word-level n-gram language models.

Models are stored in ARPA backoff form: every seen n-gram carries its
(interpolated) log10 probability, every context carries a log10 backoff
weight, and unseen n-grams back off to shorter contexts.
"""

import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from app.models.schemas import Smoothing
from app.utils.errors import EmptyCorpus, ParseError, ValidationError
from app.utils.logger import log_pipeline_event

logger = logging.getLogger(__name__)

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
NEVER = -99.0
ABSOLUTE_DISCOUNT = 0.75

NGram = Tuple[str, ...]
State = Tuple[str, ...]


@dataclass
class NGramModel:
    """Backoff n-gram model with log10 probabilities."""

    order: int
    probs: Dict[NGram, float] = field(default_factory=dict)
    backoffs: Dict[NGram, float] = field(default_factory=dict)
    smoothing: Optional[Smoothing] = None

    def __post_init__(self):
        if self.order < 1:
            raise ValidationError("order", self.order, "must be >= 1")

    @property
    def vocab(self) -> List[str]:
        """Words the model predicts, excluding boundary and unknown markers."""
        return sorted(g[0] for g in self.probs if len(g) == 1 and g[0] not in (BOS, EOS, UNK))

    def __contains__(self, word: str) -> bool:
        return (word,) in self.probs and word not in (BOS, EOS, UNK)

    def counts(self) -> Dict[int, int]:
        result = Counter(len(g) for g in self.probs)
        return {m: result.get(m, 0) for m in range(1, self.order + 1)}

    def begin_state(self, bos: bool = True) -> State:
        return (BOS,) if bos and self.order > 1 else ()

    def _lookup(self, context: State, word: str) -> Tuple[float, int, bool]:
        oov = (word,) not in self.probs
        if oov:
            if (UNK,) not in self.probs:
                return NEVER, 0, True
            word = UNK
        context = context[-(self.order - 1) :] if self.order > 1 else ()
        backoff = 0.0
        for start in range(len(context) + 1):
            history = context[start:]
            gram = history + (word,)
            prob = self.probs.get(gram)
            if prob is not None:
                return backoff + prob, len(gram), oov
            backoff += self.backoffs.get(history, 0.0)
        # unreachable: the unigram is always present here
        return NEVER, 0, oov

    def score_word(self, state: State, word: str) -> Tuple[float, State]:
        """log10 p(word | state) and the state after reading it."""
        prob, _, oov = self._lookup(state, word)
        token = UNK if oov else word
        new_state = (state + (token,))[-(self.order - 1) :] if self.order > 1 else ()
        return prob, new_state

    def full_scores(self, words: Sequence[str], bos: bool = True, eos: bool = True) -> Iterator[Tuple[float, int, bool]]:
        """Per-token (log10 prob, matched n-gram length, oov flag), like kenlm's full_scores."""
        state = self.begin_state(bos)
        tokens = list(words) + ([EOS] if eos else [])
        for word in tokens:
            prob, length, oov = self._lookup(state, word)
            yield prob, length, oov
            _, state = self.score_word(state, word)

    def score(self, words: Union[str, Sequence[str]], bos: bool = True, eos: bool = False) -> float:
        """Total log10 probability of a word sequence."""
        if isinstance(words, str):
            words = words.split()
        return float(sum(prob for prob, _, _ in self.full_scores(words, bos=bos, eos=eos)))

    def conditional(self, context: Sequence[str], word: str) -> float:
        return self._lookup(tuple(context), word)[0]


def _collect_counts(transcripts: Iterable[Sequence[str]], order: int) -> List[Counter]:
    raw = [Counter() for _ in range(order + 1)]
    sentences = 0
    for words in transcripts:
        if isinstance(words, str):
            words = words.split()
        words = list(words)
        if not words:
            continue
        sentences += 1
        tokens = [BOS] + words + [EOS]
        for i in range(1, len(tokens)):
            for m in range(1, order + 1):
                start = i - m + 1
                if start < 0:
                    break
                raw[m][tuple(tokens[start : i + 1])] += 1
    if sentences == 0:
        raise EmptyCorpus("transcripts")
    return raw


def _continuation_counts(raw: List[Counter], order: int) -> List[Counter]:
    """Kneser-Ney adjusted counts: distinct left extensions below the top order."""
    adjusted = [Counter() for _ in range(order + 1)]
    adjusted[order] = Counter(raw[order])
    for m in range(order - 1, 0, -1):
        for gram, count in raw[m].items():
            if gram[0] == BOS:
                adjusted[m][gram] = count
        for gram in raw[m + 1]:
            suffix = gram[1:]
            if suffix[0] != BOS:
                adjusted[m][suffix] += 1
    return adjusted


def _discounts(counts: Counter, modified: bool) -> Tuple[float, float, float]:
    if modified:
        n = Counter(min(c, 4) for c in counts.values())
        n1, n2, n3, n4 = n[1], n[2], n[3], n[4]
        if n1 and n2 and n3 and n4:
            y = n1 / (n1 + 2 * n2)
            d = (1 - 2 * y * n2 / n1, 2 - 3 * y * n3 / n2, 3 - 4 * y * n4 / n3)
            if all(0.0 < dk <= k + 1 for k, dk in enumerate(d)):
                return d
        logger.debug("Count-of-counts too sparse for modified discounts, using absolute discounting")
    return (ABSOLUTE_DISCOUNT,) * 3


def _discount(count: int, d: Tuple[float, float, float]) -> float:
    return d[min(count, 3) - 1]


def _train_interpolated(raw: List[Counter], order: int, smoothing: Smoothing) -> NGramModel:
    kneser_ney = smoothing == Smoothing.KNESER_NEY
    adjusted = _continuation_counts(raw, order) if kneser_ney else raw
    model = NGramModel(order=order, smoothing=smoothing)

    predicted = {g[0] for g in raw[1]} | {EOS, UNK}
    uniform = 1.0 / len(predicted)

    for m in range(1, order + 1):
        counts = adjusted[m]
        d = _discounts(counts, kneser_ney)
        by_context: Dict[NGram, List[Tuple[str, int]]] = defaultdict(list)
        for gram, count in counts.items():
            by_context[gram[:-1]].append((gram[-1], count))
        if m == 1:
            for word in predicted:
                if (word,) not in counts:
                    by_context[()].append((word, 0))

        for history, continuations in by_context.items():
            total = sum(c for _, c in continuations)
            gamma = sum(_discount(c, d) for _, c in continuations if c > 0) / total
            for word, count in continuations:
                lower = uniform if m == 1 else 10 ** model.conditional(history[1:], word)
                prob = max(count - _discount(count, d), 0.0) / total if count > 0 else 0.0
                model.probs[history + (word,)] = math.log10(prob + gamma * lower)
            if m > 1:
                model.backoffs[history] = math.log10(gamma)

    model.probs[(BOS,)] = NEVER
    return model


def _train_mle(raw: List[Counter], order: int) -> NGramModel:
    model = NGramModel(order=order, smoothing=Smoothing.MLE)
    for m in range(1, order + 1):
        totals: Counter = Counter()
        for gram, count in raw[m].items():
            totals[gram[:-1]] += count
        for gram, count in raw[m].items():
            model.probs[gram] = math.log10(count / totals[gram[:-1]])
    model.probs.setdefault((UNK,), NEVER)
    model.probs[(BOS,)] = NEVER
    return model


def train_ngram(
    transcripts: Iterable[Union[str, Sequence[str]]],
    order: int = 3,
    smoothing: Smoothing = Smoothing.KNESER_NEY,
) -> NGramModel:
    """Train a word n-gram model; each transcript is a word sequence or a space-separated string."""
    if order < 1:
        raise ValidationError("order", order, "must be >= 1")
    smoothing = Smoothing(smoothing)
    raw = _collect_counts(transcripts, order)
    if smoothing == Smoothing.MLE:
        model = _train_mle(raw, order)
    else:
        model = _train_interpolated(raw, order, smoothing)
    log_pipeline_event("lm", "trained", {"order": order, "smoothing": smoothing.value, "ngrams": model.counts()})
    return model


def _format_gram(gram: NGram) -> str:
    return " ".join(gram)


def export_arpa(model: NGramModel, path: Union[str, Path]) -> None:
    counts = model.counts()
    lines = ["\\data\\"]
    lines.extend(f"ngram {m}={counts[m]}" for m in range(1, model.order + 1))
    for m in range(1, model.order + 1):
        lines.append("")
        lines.append(f"\\{m}-grams:")
        for gram in sorted(g for g in model.probs if len(g) == m):
            entry = f"{model.probs[gram]:.10f}\t{_format_gram(gram)}"
            if gram in model.backoffs:
                entry += f"\t{model.backoffs[gram]:.10f}"
            lines.append(entry)
    lines.append("")
    lines.append("\\end\\")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info(f"Wrote ARPA model of order {model.order} to {path}")


_NGRAM_COUNT = re.compile(r"^ngram\s+(\d+)\s*=\s*(\d+)$")
_SECTION = re.compile(r"^\\(\d+)-grams:$")


def import_arpa(path: Union[str, Path]) -> NGramModel:
    source = str(path)
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read ARPA file: {exc}", source=source)

    pos = 0
    while pos < len(lines) and lines[pos].strip() != "\\data\\":
        if lines[pos].strip():
            raise ParseError("expected \\data\\ header", line=pos + 1, source=source)
        pos += 1
    if pos == len(lines):
        raise ParseError("missing \\data\\ header", line=len(lines), source=source)
    pos += 1

    declared: Dict[int, int] = {}
    while pos < len(lines) and lines[pos].strip() and not lines[pos].startswith("\\"):
        match = _NGRAM_COUNT.match(lines[pos].strip())
        if not match:
            raise ParseError(f"malformed count line: {lines[pos]!r}", line=pos + 1, source=source)
        declared[int(match.group(1))] = int(match.group(2))
        pos += 1
    if not declared:
        raise ParseError("no n-gram counts declared", line=pos + 1, source=source)

    order = max(declared)
    model = NGramModel(order=order)
    seen: Counter = Counter()
    current: Optional[int] = None
    ended = False

    for pos in range(pos, len(lines)):
        text = lines[pos].strip()
        if not text:
            continue
        if text == "\\end\\":
            ended = True
            break
        section = _SECTION.match(text)
        if section:
            current = int(section.group(1))
            if current not in declared:
                raise ParseError(f"undeclared section {text}", line=pos + 1, source=source)
            continue
        if current is None:
            raise ParseError(f"entry outside an n-gram section: {text!r}", line=pos + 1, source=source)
        parts = text.split()
        if len(parts) not in (current + 1, current + 2):
            raise ParseError(f"expected {current}-gram entry, got {text!r}", line=pos + 1, source=source)
        try:
            prob = float(parts[0])
            backoff = float(parts[-1]) if len(parts) == current + 2 else None
        except ValueError:
            raise ParseError(f"non-numeric value in {text!r}", line=pos + 1, source=source)
        gram = tuple(parts[1 : current + 1])
        model.probs[gram] = prob
        if backoff is not None:
            model.backoffs[gram] = backoff
        seen[current] += 1

    if not ended:
        raise ParseError("missing \\end\\ marker (truncated file?)", line=len(lines), source=source)
    for m, expected in declared.items():
        if seen[m] != expected:
            raise ParseError(f"declared {expected} {m}-grams, found {seen[m]}", source=source)

    logger.info(f"Loaded ARPA model of order {order} from {path}")
    return model
