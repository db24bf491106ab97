"""Pydantic models and schemas for the IPA ASR toolkit."""

from enum import Enum
from functools import cached_property
from typing import Any, Dict, FrozenSet, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class Direction(str, Enum):
    """Transliteration direction."""

    CYR_TO_IPA = "cyr_to_ipa"
    IPA_TO_CYR = "ipa_to_cyr"


class ErrorLevel(str, Enum):
    """Granularity of an error rate."""

    WORD = "word"
    CHAR = "char"
    PHONEME = "phoneme"


class EditKind(str, Enum):
    """Edit operation kind."""

    MATCH = "match"
    SUBSTITUTE = "substitute"
    INSERT = "insert"
    DELETE = "delete"


class Smoothing(str, Enum):
    """N-gram smoothing policy."""

    KNESER_NEY = "kneser_ney"
    ABSOLUTE = "absolute"
    MLE = "mle"


class RemapMode(str, Enum):
    """Output-layer initialization mode."""

    AVG = "avg"
    CPY1 = "cpy1"
    RANDOM = "random"


class Split(str, Enum):
    """Corpus split label."""

    TRAIN = "train"
    VAL = "val"
    TEST = "test"


# Phonemes and inventories
class Phoneme(BaseModel):
    """A phoneme surface split into its base segment and trailing diacritics."""

    model_config = ConfigDict(frozen=True)

    surface: str = Field(..., min_length=1, description="NFC surface form")
    base: str = Field(..., description="Surface with recognized diacritics removed")
    diacritics: Tuple[str, ...] = Field(default=(), description="Recognized diacritics in original order")

    @property
    def complexity(self) -> int:
        return 1 + len(self.diacritics)

    @property
    def is_composite(self) -> bool:
        return bool(self.diacritics)


class PhonemeInventory(BaseModel):
    """Ordered phoneme vocabulary of one language; order defines vocabulary indices."""

    model_config = ConfigDict(frozen=True)

    language: str = Field(default="und", description="Language identifier")
    phonemes: Tuple[Phoneme, ...] = Field(..., description="Entries in index order")
    blank_index: int = Field(..., ge=0, description="Index of the CTC blank")
    separator_index: int = Field(..., ge=0, description="Index of the word separator")
    unk_index: Optional[int] = Field(None, ge=0, description="Index of the unknown token")
    special_indices: FrozenSet[int] = Field(default=frozenset(), description="Reserved token indices")
    recognized_diacritics: Tuple[str, ...] = Field(..., description="Diacritic marks counted by complexity")
    vowels: FrozenSet[str] = Field(default=frozenset(), description="Vowel base letters")

    def __len__(self) -> int:
        return len(self.phonemes)

    @cached_property
    def surfaces(self) -> List[str]:
        return [p.surface for p in self.phonemes]

    @cached_property
    def index(self) -> Dict[str, int]:
        """Surface to vocabulary index."""
        return {p.surface: i for i, p in enumerate(self.phonemes)}

    @cached_property
    def matchable(self) -> Dict[str, int]:
        """Surfaces that may occur inside transcripts (all non-special entries)."""
        return {p.surface: i for i, p in enumerate(self.phonemes) if i not in self.special_indices}

    @cached_property
    def max_surface_length(self) -> int:
        return max((len(s) for s in self.matchable), default=0)

    def is_special(self, index: int) -> bool:
        return index in self.special_indices


class TransliterationTable(BaseModel):
    """Cyrillic (or romanized) to IPA mapping pairs."""

    model_config = ConfigDict(frozen=True)

    pairs: Tuple[Tuple[str, str], ...] = Field(..., description="(source, ipa) pairs in file order")
    preferred: Tuple[bool, ...] = Field(..., description="Preferred-source flag per pair")

    @cached_property
    def forward(self) -> Dict[str, str]:
        return {src: ipa for src, ipa in self.pairs}

    @cached_property
    def backward(self) -> Dict[str, str]:
        """IPA to preferred source; single-source targets need no flag."""
        result: Dict[str, str] = {}
        for (src, ipa), flag in zip(self.pairs, self.preferred):
            if flag or ipa not in result:
                result[ipa] = src
        return result


# Alignment and scoring
class EditOp(BaseModel):
    """One step of an edit script."""

    model_config = ConfigDict(frozen=True)

    kind: EditKind
    ref: Optional[Any] = None
    hyp: Optional[Any] = None


class EditScript(BaseModel):
    """Levenshtein edit script between a reference and a hypothesis."""

    ops: List[EditOp] = Field(default_factory=list)

    @property
    def distance(self) -> int:
        return sum(1 for op in self.ops if op.kind != EditKind.MATCH)

    @property
    def ref_tokens(self) -> List[str]:
        return [op.ref for op in self.ops if op.kind != EditKind.INSERT]

    @property
    def hyp_tokens(self) -> List[str]:
        return [op.hyp for op in self.ops if op.kind != EditKind.DELETE]


class PhonemeCounts(BaseModel):
    """Per-phoneme edit counters; S is reference-side, S_hyp hypothesis-side."""

    N: int = Field(0, ge=0, description="True positives")
    S: int = Field(0, ge=0, description="Substitutions with the phoneme as reference")
    I: int = Field(0, ge=0, description="Insertions of the phoneme")  # noqa: E741
    D: int = Field(0, ge=0, description="Deletions of the phoneme")
    S_hyp: Optional[int] = Field(None, ge=0, description="Substitutions with the phoneme as hypothesis")

    @property
    def hyp_substitutions(self) -> int:
        return self.S if self.S_hyp is None else self.S_hyp

    @property
    def ref_support(self) -> int:
        return self.N + self.S + self.D

    @property
    def hyp_support(self) -> int:
        return self.N + self.hyp_substitutions + self.I


class PhonemeTally(BaseModel):
    """Counters keyed by phoneme surface."""

    counts: Dict[str, PhonemeCounts] = Field(default_factory=dict)

    @property
    def total_edits(self) -> int:
        return sum(c.S + c.I + c.D for c in self.counts.values())


class PhonemeScore(BaseModel):
    surface: str
    precision: float
    recall: float
    f1: float


class ConfusionMatrix(BaseModel):
    """Reference-by-hypothesis counts with insertion and deletion marginals."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    labels: List[str]
    counts: np.ndarray = Field(..., description="len(labels) x len(labels) integer matrix")
    insertions: np.ndarray = Field(..., description="Per-label hypothesis-side insertions")
    deletions: np.ndarray = Field(..., description="Per-label reference-side deletions")

    def row_normalized(self) -> np.ndarray:
        sums = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, sums, out=np.zeros(self.counts.shape, dtype=float), where=sums > 0)


class PhonemeReportRow(BaseModel):
    """One row of the per-phoneme scoring report."""

    surface: str
    complexity: int
    N: int
    S: int
    I: int  # noqa: E741
    D: int
    S_hyp: int
    precision: float
    recall: float
    f1: float
    train_freq: int = 0
    test_freq: int = 0


class ErrorRateSummary(BaseModel):
    level: ErrorLevel
    edits: int
    ref_tokens: int
    rate: float


class CategoryRow(BaseModel):
    """Complexity category aggregate."""

    category: str
    complexity: int
    mean_f1: float
    n_phonemes: int


class WorstPhoneme(BaseModel):
    surface: str
    f1: float
    test_freq: int


# Decoding
class Hypothesis(BaseModel):
    """A decoded prefix with its fused score components."""

    tokens: Tuple[int, ...]
    score: float = Field(..., description="ctc + alpha * lm + beta * words")
    ctc: float = Field(..., description="Natural-log CTC prefix probability")
    lm: float = Field(0.0, description="Natural-log LM score of completed words")
    words: int = Field(0, description="Number of completed words")


# Frequency analysis
class FreqF1Point(BaseModel):
    """Per-phoneme F1 against training frequency."""

    surface: str
    base: str
    complexity: int = 1
    train_freq: int = Field(..., ge=0)
    test_freq: int = Field(0, ge=0)
    f1: float = Field(..., ge=0.0, le=1.0)

    @property
    def x(self) -> Optional[float]:
        return float(np.log10(self.train_freq)) if self.train_freq >= 1 else None


class SigmoidFit(BaseModel):
    """Logistic F1 curve f(x) = L / (1 + exp(-k (x - x0)))."""

    L: float
    k: float
    x0: float
    covariance: Optional[List[List[float]]] = Field(None, description="3x3 parameter covariance")
    r2: float = float("nan")
    n_points: int = 0
    converged: bool = False
    iterations: int = 0
    sse: float = 0.0

    @property
    def params(self) -> np.ndarray:
        return np.array([self.L, self.k, self.x0], dtype=float)

    @property
    def standard_errors(self) -> Tuple[float, float, float]:
        if self.covariance is None:
            return (float("nan"),) * 3
        diag = np.clip(np.diag(np.asarray(self.covariance)), 0.0, None)
        se = np.sqrt(diag)
        return float(se[0]), float(se[1]), float(se[2])


class MatchedPair(BaseModel):
    low: str
    high: str
    base: str
    low_f1: float
    high_f1: float
    low_train_freq: int
    high_train_freq: int


class LowSupportReport(BaseModel):
    """Low-support phonemes paired with same-base high-support phonemes."""

    pairs: List[MatchedPair] = Field(default_factory=list)
    unmatched: List[str] = Field(default_factory=list)
    spearman: float = float("nan")
    n_low: int = 0
    n_low_good: int = Field(0, description="Low-support phonemes with F1 above the good-performance threshold")


# Corpus
class AnnotationInterval(BaseModel):
    tier_name: str
    t_start: float = Field(..., ge=0.0)
    t_end: float = Field(..., ge=0.0)
    text: str = ""


class UtteranceRecord(BaseModel):
    """One manifest line."""

    id: str
    ipa: str
    cyrillic: Optional[str] = None
    split: Split
    duration_s: float = Field(..., gt=0.0)
    source_file: str
    logits_path: Optional[str] = None
    tier: Optional[str] = None
    subset: Optional[str] = None


class RejectRecord(BaseModel):
    id: str
    source: str
    raw: str
    reason: str


class CorpusSummaryRow(BaseModel):
    """Split-wise dataset statistics."""

    split: str
    sentences: int
    minutes: float
    unique_words: int
    unique_phonemes: int
    composites: int
    composite_pct: float


# Configuration models
class IngestConfig(BaseModel):
    """Flat ingest configuration, read from TOML and overridden by flags."""

    language: str = "und"
    tier_pattern: str = Field(".*", description="Regex selecting transcript tiers")
    strip_chars: str = Field('.,;:!?"«»()[]{}…—–-', description="Characters removed during normalization")
    split_seed: int = 0
    val_ratio: float = Field(0.05, ge=0.0, lt=1.0)
    test_pattern: str = Field("test", description="Regex on source file name selecting the test split")


class RunConfig(BaseModel):
    """Decode and report parameters shared by the pipeline stages."""

    language: str = "und"
    inventory: Optional[str] = None
    manifest: Optional[str] = None
    outputs: Optional[str] = None
    report_dir: Optional[str] = None
    alpha: float = 0.3
    beta: float = 0.3
    beam: int = Field(10, ge=1)
    order: int = Field(3, ge=1)
    nbest: int = Field(1, ge=1)
    seed: int = 0
    jobs: int = Field(1, ge=1)


# HTTP request/response models
class SegmentRequest(BaseModel):
    text: str = Field(..., description="IPA text to segment")


class SegmentResponse(BaseModel):
    indices: List[int]
    surfaces: List[str]


class ErrorRateRequest(BaseModel):
    level: ErrorLevel = ErrorLevel.PHONEME
    ref: str
    hyp: str


class ErrorRateResponse(BaseModel):
    level: ErrorLevel
    rate: float


class TransliterateRequest(BaseModel):
    text: str
    direction: Direction = Direction.CYR_TO_IPA
    strict: bool = False


class TransliterateResponse(BaseModel):
    text: str


class PhonemeScoreRequest(BaseModel):
    n: int = Field(..., ge=0)
    s: int = Field(..., ge=0)
    i: int = Field(..., ge=0)
    d: int = Field(..., ge=0)


class PhonemeScoreResponse(BaseModel):
    precision: float
    recall: float
    f1: float


class HealthResponse(BaseModel):
    status: str
    version: str
    inventory_size: Optional[int] = None
