"""
Vocabulary construction and output-layer remapping.

A pretrained CTC head W (d x |V_old|), b (|V_old|) is carried over to a
language-specific vocabulary by composing each new phoneme out of old
symbols and averaging (avg), copying the base symbol (cpy1), or drawing
fresh random weights (random).
"""

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.models.schemas import Phoneme, PhonemeInventory, RemapMode
from app.services.ipa_service import DEFAULT_DIACRITICS, decompose, format_inventory, parse_inventory, split_phonemes
from app.utils.errors import (
    IndexOutOfRange,
    NonFiniteWeights,
    NormalizationError,
    ParseError,
    ShapeError,
    UndecomposablePhoneme,
)
from app.utils.helpers import is_nfc
from app.utils.logger import log_pipeline_event

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"WGT1"
RANDOM_INIT_STD = 0.02

# wav2vec2 tokenizer order
PAD, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, WORD_SEPARATOR = "<pad>", "<s>", "</s>", "<unk>", "|"


@dataclass(frozen=True)
class WeightBundle:
    """Output layer weights; column i of W and entry i of b belong to vocab index i."""

    W: np.ndarray
    b: np.ndarray
    vocab: PhonemeInventory

    def __post_init__(self):
        if self.W.ndim != 2:
            raise ShapeError("d x V matrix", self.W.shape, "weight matrix")
        if self.W.shape[1] != len(self.vocab):
            raise ShapeError(len(self.vocab), self.W.shape[1], "weight columns")
        if self.b.shape != (len(self.vocab),):
            raise ShapeError((len(self.vocab),), self.b.shape, "bias length")
        if not np.isfinite(self.W).all():
            raise NonFiniteWeights("W")
        if not np.isfinite(self.b).all():
            raise NonFiniteWeights("b")

    @property
    def d(self) -> int:
        return int(self.W.shape[0])


@dataclass(frozen=True)
class CompositionMap:
    """Old-vocabulary component indices for every new-vocabulary entry."""

    new: PhonemeInventory
    old: PhonemeInventory
    components: Tuple[Tuple[int, ...], ...]

    def surfaces(self, index: int) -> List[str]:
        return [self.old.surfaces[j] for j in self.components[index]]


def build_vocab(
    transcripts: Iterable[str],
    diacritics: Sequence[str] = DEFAULT_DIACRITICS,
    language: str = "und",
) -> PhonemeInventory:
    """Inventory of every phoneme in the transcripts, frequency-descending, behind the five specials."""
    counts: Counter = Counter()
    for lineno, text in enumerate(transcripts, start=1):
        if not is_nfc(text):
            raise NormalizationError(text, lineno)
        counts.update(split_phonemes(text, diacritics))

    specials = [PAD, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN, WORD_SEPARATOR]
    for token in specials:
        counts.pop(token, None)
    ordered = sorted(counts, key=lambda s: (-counts[s], s))

    entries = [Phoneme(surface=s, base=s, diacritics=()) for s in specials]
    entries.extend(decompose(s, diacritics) for s in ordered)
    inv = PhonemeInventory(
        language=language,
        phonemes=tuple(entries),
        blank_index=0,
        separator_index=4,
        unk_index=3,
        special_indices=frozenset(range(len(specials))),
        recognized_diacritics=tuple(diacritics),
    )
    log_pipeline_event("vocab", "built", {"language": language, "phonemes": len(ordered), "size": len(inv)})
    return inv


def _shortest_decomposition(surface: str, pieces: dict) -> Tuple[Optional[List[str]], str]:
    """Fewest-piece split of ``surface``; ties go to the longest leftmost piece.

    Returns (pieces, "") on success, or (None, failing suffix).
    """
    n = len(surface)
    longest = max((len(p) for p in pieces), default=0)
    cost = [None] * (n + 1)
    choice = [0] * (n + 1)
    cost[n] = 0
    for j in range(n - 1, -1, -1):
        for length in range(min(longest, n - j), 0, -1):
            rest = cost[j + length]
            if rest is None or surface[j : j + length] not in pieces:
                continue
            if cost[j] is None or rest + 1 < cost[j]:
                cost[j] = rest + 1
                choice[j] = length

    if cost[0] is not None:
        parts, j = [], 0
        while j < n:
            parts.append(surface[j : j + choice[j]])
            j += choice[j]
        return parts, ""

    reachable = {0}
    for j in range(n + 1):
        if j in reachable:
            for length in range(1, min(longest, n - j) + 1):
                if surface[j : j + length] in pieces:
                    reachable.add(j + length)
    return None, surface[max(reachable) :]


def derive_composition(new: PhonemeInventory, old: PhonemeInventory) -> CompositionMap:
    """Map each new entry to old components: specials by role, phonemes by shortest decomposition."""
    pieces = old.matchable
    components: List[Tuple[int, ...]] = []
    roles = {
        new.blank_index: old.blank_index,
        new.separator_index: old.separator_index,
    }
    if new.unk_index is not None and old.unk_index is not None:
        roles[new.unk_index] = old.unk_index

    for i, p in enumerate(new.phonemes):
        if i in roles:
            components.append((roles[i],))
        elif new.is_special(i):
            if p.surface not in old.index:
                raise UndecomposablePhoneme(p.surface, p.surface)
            components.append((old.index[p.surface],))
        elif p.surface in pieces:
            components.append((pieces[p.surface],))
        else:
            parts, suffix = _shortest_decomposition(p.surface, pieces)
            if parts is None:
                raise UndecomposablePhoneme(p.surface, suffix)
            components.append(tuple(pieces[s] for s in parts))

    composite = sum(1 for c in components if len(c) > 1)
    logger.info(f"Composition map: {len(components)} entries, {composite} composed of several symbols")
    return CompositionMap(new=new, old=old, components=tuple(components))


def remap(old: WeightBundle, cmap: CompositionMap, mode: RemapMode = RemapMode.AVG, seed: int = 0) -> WeightBundle:
    """Initialize the new output layer from the old one; ``old`` is never modified."""
    mode = RemapMode(mode)
    size = old.W.shape[1]
    for comps in cmap.components:
        for j in comps:
            if not 0 <= j < size:
                raise IndexOutOfRange(j, size)

    V = len(cmap.new)
    dtype = old.W.dtype
    if mode == RemapMode.RANDOM:
        rng = np.random.default_rng(seed)
        W = rng.normal(0.0, RANDOM_INIT_STD, size=(old.d, V)).astype(dtype)
        b = rng.normal(0.0, RANDOM_INIT_STD, size=V).astype(old.b.dtype)
    else:
        W = np.empty((old.d, V), dtype=dtype)
        b = np.empty(V, dtype=old.b.dtype)
        for i, comps in enumerate(cmap.components):
            idx = list(comps)
            if mode == RemapMode.AVG:
                W[:, i] = old.W[:, idx].mean(axis=1)
                b[i] = old.b[idx].mean()
            else:
                W[:, i] = old.W[:, idx[0]]
                b[i] = old.b[idx[0]]

    log_pipeline_event("remap", "remapped", {"mode": mode.value, "d": old.d, "old": size, "new": V})
    return WeightBundle(W=W, b=b, vocab=cmap.new)


def composition_table(cmap: CompositionMap) -> pd.DataFrame:
    rows = []
    for i, comps in enumerate(cmap.components):
        rows.append(
            {
                "index": i,
                "surface": cmap.new.surfaces[i],
                "components": " + ".join(cmap.surfaces(i)),
                "k": len(comps),
            }
        )
    return pd.DataFrame(rows, columns=["index", "surface", "components", "k"])


def write_weights(bundle: WeightBundle, path: Union[str, Path]) -> None:
    """WGT1: magic, u32 d, u32 V, f32 W column-major, f32 b, u32 length + UTF-8 inventory text."""
    inventory = format_inventory(bundle.vocab).encode("utf-8")
    d, V = bundle.W.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(np.array([d, V], dtype="<u4").tobytes())
        fh.write(np.asarray(bundle.W, dtype="<f4").tobytes(order="F"))
        fh.write(np.asarray(bundle.b, dtype="<f4").tobytes())
        fh.write(np.array([len(inventory)], dtype="<u4").tobytes())
        fh.write(inventory)


def read_weights(path: Union[str, Path]) -> WeightBundle:
    source = str(path)
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}, expected {WEIGHTS_MAGIC!r}", source=source)
    if len(data) < 12:
        raise ParseError("truncated WGT1 header", source=source)
    d, V = (int(v) for v in np.frombuffer(data, dtype="<u4", count=2, offset=4))
    offset = 12
    w_end = offset + 4 * d * V
    b_end = w_end + 4 * V
    if len(data) < b_end + 4:
        raise ParseError("truncated WGT1 payload", source=source)
    W = np.frombuffer(data, dtype="<f4", count=d * V, offset=offset).reshape((d, V), order="F").astype(np.float32)
    b = np.frombuffer(data, dtype="<f4", count=V, offset=w_end).astype(np.float32)
    (length,) = np.frombuffer(data, dtype="<u4", count=1, offset=b_end)
    blob = data[b_end + 4 :]
    if len(blob) != int(length):
        raise ParseError(f"inventory blob has {len(blob)} bytes, expected {int(length)}", source=source)
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"inventory blob is not UTF-8: {exc}", source=source)
    vocab = parse_inventory(text, source=source)
    return WeightBundle(W=W, b=b, vocab=vocab)
