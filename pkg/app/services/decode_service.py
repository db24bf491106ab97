"""
CTC decoding: logit containers, greedy best path, prefix beam search with
word-level n-gram shallow fusion, and the CTC forward algorithm.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax, logsumexp

from app.models.schemas import Hypothesis, PhonemeInventory
from app.services.lm_service import NGramModel, State
from app.utils.errors import InvalidLogits, ParseError, ShapeError, ValidationError
from app.utils.logger import LoggerMixin

logger = logging.getLogger(__name__)

LOGITS_MAGIC = b"CTL1"
ROW_TOLERANCE = 1e-4
LN10 = math.log(10.0)
NEG_INF = -math.inf

DEFAULT_ALPHA = 0.3
DEFAULT_BETA = 0.3
DEFAULT_BEAM = 10
DEFAULT_OOV_PENALTY = -10.0


def write_logits(path: Union[str, Path], logits: np.ndarray) -> None:
    """Write a T x V matrix as CTL1: magic, u32 T, u32 V, float32 row-major values."""
    matrix = np.asarray(logits)
    if matrix.ndim != 2:
        raise ShapeError("T x V matrix", matrix.shape, "logit matrix")
    T, V = matrix.shape
    with open(path, "wb") as fh:
        fh.write(LOGITS_MAGIC)
        fh.write(np.array([T, V], dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_logits(path: Union[str, Path], raw: bool = False, vocab_size: Optional[int] = None) -> np.ndarray:
    """Read a CTL1 file; rows must be log-softmax unless ``raw`` asks for normalization."""
    data = Path(path).read_bytes()
    if data[:4] != LOGITS_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}, expected {LOGITS_MAGIC!r}", source=str(path))
    if len(data) < 12:
        raise ParseError("truncated CTL1 header", source=str(path))
    T, V = (int(v) for v in np.frombuffer(data, dtype="<u4", count=2, offset=4))
    expected = 12 + 4 * T * V
    if len(data) != expected:
        raise ParseError(f"CTL1 payload has {len(data)} bytes, expected {expected}", source=str(path))
    if vocab_size is not None and V != vocab_size:
        raise ShapeError(vocab_size, V)
    matrix = np.frombuffer(data, dtype="<f4", offset=12).reshape(T, V).astype(np.float32)
    return validate_logits(matrix, raw=raw)


def validate_logits(matrix: np.ndarray, raw: bool = False) -> np.ndarray:
    if np.isnan(matrix).any():
        raise InvalidLogits("matrix contains NaN")
    if raw:
        return log_softmax(matrix.astype(np.float64), axis=1).astype(np.float32)
    if matrix.shape[0]:
        sums = np.exp(matrix.astype(np.float64)).sum(axis=1)
        bad = np.nonzero(np.abs(sums - 1.0) > ROW_TOLERANCE)[0]
        if bad.size:
            raise InvalidLogits(f"row {int(bad[0])} exponentials sum to {sums[bad[0]]:.6f}, not 1")
    return matrix


def _check(logits: np.ndarray, inv: PhonemeInventory) -> np.ndarray:
    matrix = np.asarray(logits, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeError("T x V matrix", matrix.shape, "logit matrix")
    if matrix.shape[1] != len(inv):
        raise ShapeError(len(inv), matrix.shape[1])
    if np.isnan(matrix).any():
        raise InvalidLogits("matrix contains NaN")
    return matrix


def collapse(path: Sequence[int], blank: int) -> List[int]:
    """CTC many-to-one map: merge repeats, then drop blanks."""
    out: List[int] = []
    previous = None
    for token in path:
        if token != previous and token != blank:
            out.append(int(token))
        previous = token
    return out


def greedy_decode(logits: np.ndarray, inv: PhonemeInventory) -> List[int]:
    matrix = _check(logits, inv)
    return collapse(np.argmax(matrix, axis=1).tolist(), inv.blank_index)


def ctc_log_likelihood(logits: np.ndarray, labels: Sequence[int], blank: int) -> float:
    """Natural-log marginal probability of ``labels`` under CTC (forward algorithm)."""
    matrix = np.asarray(logits, dtype=np.float64)
    T = matrix.shape[0]
    extended = [blank]
    for label in labels:
        extended.extend([int(label), blank])
    S = len(extended)
    if T == 0:
        return 0.0 if not labels else NEG_INF

    alpha = np.full(S, NEG_INF)
    alpha[0] = matrix[0, blank]
    if S > 1:
        alpha[1] = matrix[0, extended[1]]
    for t in range(1, T):
        previous = alpha
        alpha = np.full(S, NEG_INF)
        for s in range(S):
            terms = [previous[s]]
            if s >= 1:
                terms.append(previous[s - 1])
            if s >= 2 and extended[s] != blank and extended[s] != extended[s - 2]:
                terms.append(previous[s - 2])
            alpha[s] = logsumexp(terms) + matrix[t, extended[s]]
    tail = [alpha[S - 1]] + ([alpha[S - 2]] if S > 1 else [])
    return float(logsumexp(tail))


@dataclass
class _Beam:
    blank: float = NEG_INF
    non_blank: float = NEG_INF
    lm: float = 0.0
    words: int = 0
    state: State = ()
    pending: Tuple[int, ...] = ()

    @property
    def ctc(self) -> float:
        return float(np.logaddexp(self.blank, self.non_blank))


class _Fusion:
    """Word-level LM scoring of separator-delimited phoneme runs."""

    def __init__(self, inv: PhonemeInventory, lm: Optional[NGramModel], oov_penalty: float):
        self.inv = inv
        self.lm = lm
        self.oov_penalty = oov_penalty

    def start(self) -> _Beam:
        return _Beam(state=self.lm.begin_state() if self.lm is not None else ())

    def close_word(self, beam: _Beam) -> Tuple[float, int, State]:
        """LM increment (natural log), word increment and next state when the pending word closes."""
        if self.lm is None or not beam.pending:
            return 0.0, 0, beam.state
        word = "".join(self.inv.surfaces[i] for i in beam.pending)
        prob, state = self.lm.score_word(beam.state, word)
        if word not in self.lm:
            prob = self.oov_penalty
        return prob * LN10, 1, state

    def extend(self, parent: _Beam, token: int) -> _Beam:
        if token == self.inv.separator_index:
            lm, words, state = self.close_word(parent)
            return _Beam(lm=parent.lm + lm, words=parent.words + words, state=state)
        return _Beam(lm=parent.lm, words=parent.words, state=parent.state, pending=parent.pending + (token,))


def _total(beam: _Beam, alpha: float, beta: float, fused: bool) -> float:
    if not fused:
        return beam.ctc
    return beam.ctc + alpha * beam.lm + beta * beam.words


def beam_search(
    logits: np.ndarray,
    inv: PhonemeInventory,
    lm: Optional[NGramModel] = None,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    beam: int = DEFAULT_BEAM,
    nbest: int = 1,
    oov_penalty: float = DEFAULT_OOV_PENALTY,
    prune_logp: Optional[float] = None,
) -> List[Hypothesis]:
    """CTC prefix beam search maximizing ctc + alpha * lm + beta * words.

    Without an LM the score is the plain CTC prefix probability.
    Hypotheses are ordered by descending score, then ascending token tuple.
    """
    if beam < 1:
        raise ValidationError("beam", beam, "must be >= 1")
    if nbest < 1:
        raise ValidationError("nbest", nbest, "must be >= 1")
    matrix = _check(logits, inv)
    blank = inv.blank_index
    fused = lm is not None
    fusion = _Fusion(inv, lm, oov_penalty)

    root = fusion.start()
    root.blank = 0.0
    beams: Dict[Tuple[int, ...], _Beam] = {(): root}

    for t in range(matrix.shape[0]):
        row = matrix[t]
        candidates = [c for c in range(len(row)) if c != blank]
        if prune_logp is not None:
            candidates = [c for c in candidates if row[c] >= prune_logp]
        following: Dict[Tuple[int, ...], _Beam] = {}

        def slot(prefix: Tuple[int, ...], parent: _Beam, token: Optional[int]) -> _Beam:
            existing = following.get(prefix)
            if existing is None:
                if token is None:
                    existing = _Beam(lm=parent.lm, words=parent.words, state=parent.state, pending=parent.pending)
                else:
                    existing = fusion.extend(parent, token)
                following[prefix] = existing
            return existing

        for prefix, current in beams.items():
            total = current.ctc
            stay = slot(prefix, current, None)
            stay.blank = np.logaddexp(stay.blank, total + row[blank])
            for c in candidates:
                if prefix and prefix[-1] == c:
                    stay.non_blank = np.logaddexp(stay.non_blank, current.non_blank + row[c])
                    grown = slot(prefix + (c,), current, c)
                    grown.non_blank = np.logaddexp(grown.non_blank, current.blank + row[c])
                else:
                    grown = slot(prefix + (c,), current, c)
                    grown.non_blank = np.logaddexp(grown.non_blank, total + row[c])

        ranked = sorted(following.items(), key=lambda item: (-_total(item[1], alpha, beta, fused), item[0]))
        beams = dict(ranked[:beam])

    finals = []
    for prefix, current in beams.items():
        lm_inc, word_inc, _ = fusion.close_word(current)
        closed = _Beam(
            blank=current.blank, non_blank=current.non_blank, lm=current.lm + lm_inc, words=current.words + word_inc
        )
        finals.append((prefix, closed))
    finals.sort(key=lambda item: (-_total(item[1], alpha, beta, fused), item[0]))

    return [
        Hypothesis(
            tokens=prefix,
            score=_total(b, alpha, beta, fused),
            ctc=b.ctc,
            lm=b.lm,
            words=b.words,
        )
        for prefix, b in finals[:nbest]
        if b.ctc > NEG_INF
    ]


def beam_decode(
    logits: np.ndarray,
    inv: PhonemeInventory,
    lm: Optional[NGramModel] = None,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    beam: int = DEFAULT_BEAM,
    **kwargs,
) -> List[int]:
    hypotheses = beam_search(logits, inv, lm=lm, alpha=alpha, beta=beta, beam=beam, **kwargs)
    return list(hypotheses[0].tokens) if hypotheses else []


@dataclass
class DecodeService(LoggerMixin):
    """Decodes CTL1 files with one inventory, language model and search configuration."""

    inv: PhonemeInventory
    lm: Optional[NGramModel] = None
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    beam: int = DEFAULT_BEAM
    nbest: int = 1
    greedy: bool = False
    raw: bool = False

    def decode(self, logits: np.ndarray) -> List[Hypothesis]:
        if self.greedy:
            tokens = greedy_decode(logits, self.inv)
            return [Hypothesis(tokens=tuple(tokens), score=0.0, ctc=0.0)]
        return beam_search(
            logits, self.inv, lm=self.lm, alpha=self.alpha, beta=self.beta, beam=self.beam, nbest=self.nbest
        )

    def decode_file(self, job: Tuple[str, Path]) -> Tuple[str, List[Hypothesis]]:
        """Decode one ``(utterance id, logits path)`` pair; picklable for worker processes."""
        utt_id, path = job
        hypotheses = self.decode(read_logits(path, raw=self.raw, vocab_size=len(self.inv)))
        self.logger.debug(f"Decoded {utt_id} into {len(hypotheses)} hypotheses")
        return utt_id, hypotheses
