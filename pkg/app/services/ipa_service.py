"""
IPA phoneme handling: inventories, segmentation, complexity and transliteration.
"""

import csv
import logging
import unicodedata
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd

from app.models.schemas import Direction, Phoneme, PhonemeInventory, TransliterationTable
from app.utils.errors import (
    DuplicatePhoneme,
    MissingSpecialToken,
    NormalizationError,
    ParseError,
    SegmentationError,
)
from app.utils.helpers import is_nfc, nfc

logger = logging.getLogger(__name__)

# labialization, palatalization, pharyngealization, ejective, length
DEFAULT_DIACRITICS: Tuple[str, ...] = ("ʷ", "ʲ", "ˤ", "ʼ", "ː")

IPA_VOWELS = frozenset("aeiouyæøœɶɑɒɐəɘɵɞɜɛɔʌɤɯɨʉɪʏʊɚɝɿ")

TIE_BARS = ("͡", "͜")

ENTRY_DIRECTIVES = ("!blank", "!sep", "!unk", "!special")


def decompose(surface: str, diacritics: Sequence[str] = DEFAULT_DIACRITICS) -> Phoneme:
    """Split a surface into its base segment and recognized diacritics.

    The first character always belongs to the base, so a bare diacritic
    symbol (as found in pretrained vocabularies) is its own base.
    """
    marks = set(diacritics)
    base_chars = [surface[0]] if surface else []
    found: List[str] = []
    for ch in surface[1:]:
        if ch in marks:
            found.append(ch)
        else:
            base_chars.append(ch)
    return Phoneme(surface=surface, base="".join(base_chars), diacritics=tuple(found))


def complexity(p: Union[Phoneme, str], diacritics: Sequence[str] = DEFAULT_DIACRITICS) -> int:
    """Articulatory complexity: 1 for the base segment plus one per diacritic."""
    if isinstance(p, str):
        p = decompose(p, diacritics)
    return p.complexity


def category(p: Union[Phoneme, str], inv: PhonemeInventory) -> str:
    """Complexity category label such as ``C``, ``Vː`` or ``Cʼʷ``."""
    if isinstance(p, str):
        p = decompose(p, inv.recognized_diacritics)
    vowels = inv.vowels or IPA_VOWELS
    head = p.base[:1]
    cls = "V" if head in vowels else "C"
    return cls + "".join(p.diacritics)


def parse_inventory(text: str, language: str = "und", source: Optional[str] = None) -> PhonemeInventory:
    """Build an inventory from inventory-file text."""
    lines = text.splitlines()
    diacritics = list(DEFAULT_DIACRITICS)
    vowels: List[str] = []

    # Diacritics must be known before any surface is decomposed
    for line in lines:
        parts = line.split()
        if parts and parts[0] == "!diacritic":
            for mark in parts[1:]:
                if mark not in diacritics:
                    diacritics.append(mark)
        elif parts and parts[0] == "!vowels":
            vowels.extend(parts[1:])
        elif parts and parts[0] == "!language" and len(parts) > 1:
            language = parts[1]

    entries: List[Phoneme] = []
    seen = {}
    roles = {"!blank": None, "!sep": None, "!unk": None}
    specials = set()

    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not is_nfc(line):
            raise NormalizationError(line, lineno)

        parts = line.split()
        directive = parts[0] if parts[0].startswith("!") else None
        if directive is not None and directive not in ENTRY_DIRECTIVES:
            if directive not in ("!diacritic", "!vowels", "!language"):
                raise ParseError(f"unknown directive {directive}", line=lineno, source=source)
            continue

        if directive is not None:
            if len(parts) != 2:
                raise ParseError(f"{directive} takes exactly one surface", line=lineno, source=source)
            surface = parts[1]
        else:
            if len(parts) != 1:
                raise ParseError(f"expected one phoneme per line, got {line!r}", line=lineno, source=source)
            surface = parts[0]

        if surface in seen:
            raise DuplicatePhoneme(surface, lineno)
        index = len(entries)
        seen[surface] = index

        if directive is not None:
            specials.add(index)
            if directive in roles:
                if roles[directive] is not None:
                    raise ParseError(f"repeated {directive} directive", line=lineno, source=source)
                roles[directive] = index
            entries.append(Phoneme(surface=surface, base=surface, diacritics=()))
        else:
            entries.append(decompose(surface, diacritics))

    if roles["!blank"] is None:
        raise MissingSpecialToken("blank")
    if roles["!sep"] is None:
        raise MissingSpecialToken("separator")

    return PhonemeInventory(
        language=language,
        phonemes=tuple(entries),
        blank_index=roles["!blank"],
        separator_index=roles["!sep"],
        unk_index=roles["!unk"],
        special_indices=frozenset(specials),
        recognized_diacritics=tuple(diacritics),
        vowels=frozenset(vowels),
    )


def load_inventory(path: Union[str, Path]) -> PhonemeInventory:
    """Load and validate an inventory file; indices follow line order."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise ParseError(f"not valid UTF-8: {e}", source=str(path)) from e
    inv = parse_inventory(text, language=path.stem, source=str(path))
    logger.debug(f"Loaded inventory {path.name}: {len(inv)} entries")
    return inv


def format_inventory(inv: PhonemeInventory) -> str:
    """Serialize an inventory in the format read by parse_inventory."""
    lines = [f"# {inv.language} phoneme inventory", f"!language {inv.language}"]
    extra = [d for d in inv.recognized_diacritics if d not in DEFAULT_DIACRITICS]
    if extra:
        lines.append("!diacritic " + " ".join(extra))
    if inv.vowels:
        lines.append("!vowels " + " ".join(sorted(inv.vowels)))

    for i, p in enumerate(inv.phonemes):
        if i == inv.blank_index:
            lines.append(f"!blank {p.surface}")
        elif i == inv.separator_index:
            lines.append(f"!sep {p.surface}")
        elif i == inv.unk_index:
            lines.append(f"!unk {p.surface}")
        elif i in inv.special_indices:
            lines.append(f"!special {p.surface}")
        else:
            lines.append(p.surface)
    return "\n".join(lines) + "\n"


def write_inventory(inv: PhonemeInventory, path: Union[str, Path]) -> None:
    """Write an inventory file (inverse of load_inventory)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_inventory(inv), encoding="utf-8")


def _grapheme_at(text: str, pos: int) -> str:
    end = pos + 1
    while end < len(text) and unicodedata.combining(text[end]):
        end += 1
    return text[pos:end]


def segment(text: str, inv: PhonemeInventory) -> List[int]:
    """Greedy longest-match segmentation; each whitespace character yields a separator."""
    if not is_nfc(text):
        raise NormalizationError(text)

    table = inv.matchable
    longest = inv.max_surface_length
    result: List[int] = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            result.append(inv.separator_index)
            pos += 1
            continue
        for length in range(min(longest, len(text) - pos), 0, -1):
            index = table.get(text[pos : pos + length])
            if index is not None:
                result.append(index)
                pos += length
                break
        else:
            offset = len(text[:pos].encode("utf-8"))
            raise SegmentationError(text, offset, _grapheme_at(text, pos))
    return result


def render(indices: Iterable[int], inv: PhonemeInventory) -> str:
    """Inverse of segment: separators become single spaces, blanks are dropped."""
    out = []
    for i in indices:
        if i == inv.separator_index:
            out.append(" ")
        elif i != inv.blank_index:
            out.append(inv.phonemes[i].surface)
    return "".join(out)


def split_phonemes(text: str, diacritics: Sequence[str] = DEFAULT_DIACRITICS) -> List[str]:
    """Split IPA text into phoneme surfaces without an inventory.

    A unit is a base character with its combining marks, optionally joined by
    a tie bar to a second letter, followed by any run of recognized diacritics.
    Whitespace is skipped.
    """
    marks = set(diacritics)
    units: List[str] = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        start = pos
        pos += 1
        while pos < n:
            ch = text[pos]
            if ch in TIE_BARS:
                pos += 1
                if pos < n and not text[pos].isspace():
                    pos += 1
            elif unicodedata.combining(ch):
                pos += 1
            else:
                break
        while pos < n and text[pos] in marks:
            pos += 1
        units.append(text[start:pos])
    return units


def make_transliteration_table(rows: Sequence[Tuple[str, str, bool]], source: Optional[str] = None) -> TransliterationTable:
    """Validate (source, ipa, preferred) rows into a table."""
    seen_sources = {}
    by_target = {}
    for lineno, (src, ipa, flag) in enumerate(rows, start=2):
        src, ipa = nfc(src), nfc(ipa)
        if not src or not ipa:
            raise ParseError("empty transliteration entry", line=lineno, source=source)
        if src in seen_sources:
            raise ParseError(f"duplicate source string {src!r}", line=lineno, source=source)
        seen_sources[src] = lineno
        by_target.setdefault(ipa, []).append(bool(flag))

    for ipa, flags in by_target.items():
        if len(flags) > 1 and sum(flags) != 1:
            raise ParseError(f"target {ipa!r} has {len(flags)} sources and {sum(flags)} preferred", source=source)

    return TransliterationTable(
        pairs=tuple((nfc(s), nfc(i)) for s, i, _ in rows),
        preferred=tuple(bool(f) for _, _, f in rows),
    )


def load_transliteration_table(path: Union[str, Path]) -> TransliterationTable:
    """Read a TSV with columns cyrillic, ipa, preferred (0/1)."""
    path = Path(path)
    try:
        frame = pd.read_csv(
            path, sep="\t", dtype=str, keep_default_na=False, quoting=csv.QUOTE_NONE, encoding="utf-8", comment=None
        )
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise ParseError(f"unreadable transliteration table: {e}", source=str(path)) from e

    missing = {"cyrillic", "ipa", "preferred"} - set(frame.columns)
    if missing:
        raise ParseError(f"missing columns {sorted(missing)}", line=1, source=str(path))

    rows = []
    for offset, record in enumerate(frame.itertuples(index=False), start=2):
        flag = record.preferred.strip()
        if flag not in ("0", "1", ""):
            raise ParseError(f"preferred must be 0 or 1, got {flag!r}", line=offset, source=str(path))
        rows.append((record.cyrillic, record.ipa, flag == "1"))
    return make_transliteration_table(rows, source=str(path))


def transliterate(text: str, table: TransliterationTable, direction: Direction, strict: bool = False) -> str:
    """Greedy longest-match replacement; unmatched characters pass through unless strict."""
    mapping = table.forward if Direction(direction) == Direction.CYR_TO_IPA else table.backward
    longest = max((len(k) for k in mapping), default=0)
    text = nfc(text)

    out: List[str] = []
    pos = 0
    while pos < len(text):
        for length in range(min(longest, len(text) - pos), 0, -1):
            target = mapping.get(text[pos : pos + length])
            if target is not None:
                out.append(target)
                pos += length
                break
        else:
            ch = text[pos]
            if strict and not ch.isspace():
                raise SegmentationError(text, len(text[:pos].encode("utf-8")), _grapheme_at(text, pos))
            out.append(ch)
            pos += 1
    return "".join(out)
