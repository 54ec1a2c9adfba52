"""Deterministic rule-based sentence segmentation.

Sentences are the unit of work everywhere downstream: each one becomes a
search query and, in the staged pipeline, an extraction unit. The splitter
is purely rule-based (terminal punctuation, an abbreviation list, newline
and list-item boundaries) so that identical input always yields identical
segmentation, with no model or locale dependence.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from itertools import accumulate
from pathlib import Path
from typing import Iterable, Optional

TERMINALS = ".!?"
# Closers that may sit between a terminal mark and the whitespace that ends
# a sentence:  He said "stop."  /  ...in 1215.)
_TRAILING_CLOSERS = "\"'”’)]}"
_LIST_ITEM = re.compile(r"^\s*(?:[-*•]\s+|\d+[.)]\s+|#{1,6}\s)")
_FENCE = re.compile(r"^\s*```")

DEFAULT_MAX_SENTENCE_CHARS = 400


@dataclass(frozen=True)
class Sentence:
    """One sentence of a response.

    ``byte_span`` is a (start, end) offset pair into the UTF-8 encoding of
    the source text; decoding that slice and trimming whitespace gives back
    ``text`` exactly.
    """

    text: str
    index: int
    byte_span: tuple[int, int]


def load_abbreviations(path: Optional[str | Path] = None) -> frozenset[str]:
    """Load the abbreviation list (one token per line, UTF-8).

    Without a path, the packaged default list is used. Matching is
    case-sensitive: "No." marks a numbering abbreviation while a sentence
    ending in the word "no." must still terminate.
    """
    if path is None:
        raw = resources.files("factpipe.prompts").joinpath("abbreviations.txt").read_text("utf-8")
    else:
        raw = Path(path).read_text("utf-8")
    return frozenset(line.strip() for line in raw.splitlines() if line.strip())


_DEFAULT_ABBREVIATIONS: Optional[frozenset[str]] = None


def _default_abbreviations() -> frozenset[str]:
    global _DEFAULT_ABBREVIATIONS
    if _DEFAULT_ABBREVIATIONS is None:
        _DEFAULT_ABBREVIATIONS = load_abbreviations()
    return _DEFAULT_ABBREVIATIONS


def split_sentences(
    response_text: str,
    abbreviations: Optional[Iterable[str]] = None,
    max_len: int = DEFAULT_MAX_SENTENCE_CHARS,
) -> list[Sentence]:
    """Segment ``response_text`` into ordered, non-overlapping sentences.

    Empty or whitespace-only input yields an empty list. List-item lines and
    headings are their own units; fenced code blocks are split on blank lines
    into pseudo-sentences; sentences longer than ``max_len`` characters are
    hard-split at the nearest whitespace at or before the limit.
    """
    if not response_text or not response_text.strip():
        return []
    abbrevs = frozenset(abbreviations) if abbreviations is not None else _default_abbreviations()

    char_ranges: list[tuple[int, int]] = []
    for start, end, is_prose in _block_ranges(response_text):
        pieces = _split_prose(response_text, start, end, abbrevs) if is_prose else [(start, end)]
        for s, e in pieces:
            char_ranges.extend(_enforce_max_len(response_text, s, e, max_len))

    # Byte offset of each character, computed once for the whole source.
    cum = [0] + list(accumulate(len(ch.encode("utf-8")) for ch in response_text))

    sentences: list[Sentence] = []
    for s, e in char_ranges:
        s, e = _trim(response_text, s, e)
        if s >= e:
            continue
        sentences.append(
            Sentence(text=response_text[s:e], index=len(sentences), byte_span=(cum[s], cum[e]))
        )
    return sentences


def sentence_texts(sentences: list[Sentence]) -> list[str]:
    return [s.text for s in sentences]


# --- block detection ------------------------------------------------------


def _iter_lines(text: str):
    """Yield (start, end) character ranges of each line, newline excluded."""
    pos = 0
    for line in text.splitlines(keepends=True):
        yield pos, pos + len(line.rstrip("\r\n"))
        pos += len(line)


def _block_ranges(text: str) -> list[tuple[int, int, bool]]:
    """Group lines into (start, end, is_prose) units.

    Prose paragraphs go through the sentence splitter; list items, headings,
    and blank-line-separated code paragraphs are one unit each.
    """
    blocks: list[tuple[int, int, bool]] = []
    prose: Optional[list[int]] = None
    para: Optional[list[int]] = None  # open code paragraph inside a fence
    in_fence = False

    def flush_prose():
        nonlocal prose
        if prose is not None:
            blocks.append((prose[0], prose[1], True))
            prose = None

    def flush_para():
        nonlocal para
        if para is not None:
            blocks.append((para[0], para[1], False))
            para = None

    for ls, le in _iter_lines(text):
        line = text[ls:le]
        blank = not line.strip()
        if in_fence:
            if blank:
                flush_para()
            else:
                para = [ls, le] if para is None else [para[0], le]
                if _FENCE.match(line):
                    in_fence = False
                    flush_para()
            continue
        if _FENCE.match(line):
            flush_prose()
            in_fence = True
            para = [ls, le]
            continue
        if blank:
            flush_prose()
        elif _LIST_ITEM.match(line):
            flush_prose()
            blocks.append((ls, le, False))
        else:
            prose = [ls, le] if prose is None else [prose[0], le]
    flush_prose()
    flush_para()
    return blocks


# --- prose splitting ------------------------------------------------------


def _split_prose(
    text: str, start: int, end: int, abbrevs: frozenset[str]
) -> list[tuple[int, int]]:
    """Split one prose range on terminal punctuation, honoring abbreviations."""
    ranges: list[tuple[int, int]] = []
    seg_start = start
    i = start
    while i < end:
        if text[i] in TERMINALS:
            j = i
            while j + 1 < end and text[j + 1] in TERMINALS:
                j += 1
            k = j + 1
            while k < end and text[k] in _TRAILING_CLOSERS:
                k += 1
            at_boundary = k >= end or text[k].isspace()
            if at_boundary and not _ends_with_abbreviation(text, seg_start, j, abbrevs):
                ranges.append((seg_start, k))
                seg_start = k
                i = k
                continue
            i = j + 1
        else:
            i += 1
    if seg_start < end:
        ranges.append((seg_start, end))
    return ranges


def _ends_with_abbreviation(text: str, start: int, dot_pos: int, abbrevs: frozenset[str]) -> bool:
    """True when the token ending at ``dot_pos`` (inclusive) is a known
    abbreviation, in which case its period does not terminate the sentence."""
    if text[dot_pos] != ".":
        return False
    t = dot_pos
    while t > start and not text[t - 1].isspace():
        t -= 1
    token = text[t : dot_pos + 1].lstrip("\"'“‘([{")
    return token in abbrevs


# --- post-processing ------------------------------------------------------


def _enforce_max_len(text: str, start: int, end: int, max_len: int) -> list[tuple[int, int]]:
    """Hard-split over-long ranges at the nearest whitespace at or before the
    limit so downstream search queries stay within API bounds."""
    s, e = _trim(text, start, end)
    if e - s <= max_len:
        return [(start, end)]
    pieces: list[tuple[int, int]] = []
    while e - s > max_len:
        cut = -1
        for p in range(s + max_len, s, -1):
            if text[p].isspace():
                cut = p
                break
        if cut <= s:
            cut = s + max_len
        pieces.append((s, cut))
        s, _ = _trim(text, cut, e)
    pieces.append((s, e))
    return pieces


def _trim(text: str, start: int, end: int) -> tuple[int, int]:
    while start < end and text[start].isspace():
        start += 1
    while end > start and text[end - 1].isspace():
        end -= 1
    return start, end
