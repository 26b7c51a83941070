"""DER/WER/SER scoring with case-ending and no-diacritic flags.

A letter position errs when its predicted class differs from gold; a word
errs when any counted position in it errs; a sentence errs when any word
errs. The primary setting counts case endings and no-diacritic positions
(both flags true) and all corpus scores are micro-averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ManifestError
from .textproc import label_from_diacritized

class AlignmentError(ValueError):
    """Prediction and gold disagree on the underlying (stripped) text."""


@dataclass(frozen=True)
class MetricFlags:
    include_case_endings: bool = True
    include_no_diacritic: bool = True


PRIMARY_FLAGS = MetricFlags(True, True)


@dataclass
class Tallies:
    positions: int = 0
    position_errors: int = 0
    words: int = 0
    word_errors: int = 0
    sentences: int = 0
    sentence_errors: int = 0

    def merge(self, other: "Tallies") -> "Tallies":
        return Tallies(*(getattr(self, f) + getattr(other, f)
                         for f in ("positions", "position_errors", "words",
                                   "word_errors", "sentences", "sentence_errors")))


@dataclass
class ScoreReport:
    der: float
    wer: float
    ser: float
    positions: int
    words: int
    sentences: int

    def as_lines(self) -> str:
        return (f"der={self.der:.4f}\nwer={self.wer:.4f}\nser={self.ser:.4f}\n"
                f"positions={self.positions}\nwords={self.words}\n"
                f"sentences={self.sentences}\n")


def score_pair(pred: str, gold: str, flags: MetricFlags = PRIMARY_FLAGS) -> Tallies:
    """Per-sentence tallies for one (prediction, gold) pair."""
    pl = label_from_diacritized(pred)
    gl = label_from_diacritized(gold)
    if pl.raw != gl.raw:
        first = next((i for i, (a, b) in enumerate(zip(pl.raw, gl.raw)) if a != b),
                     min(len(pl.raw), len(gl.raw)))
        raise AlignmentError(f"base text mismatch at offset {first}")

    case_endings = gl.case_ending_positions()
    # map letter index -> word index
    word_of = {}
    for wi, (start, end) in enumerate(gl.word_boundaries):
        for li, pos in enumerate(gl.letter_positions):
            if start <= pos < end:
                word_of[li] = wi

    t = Tallies(sentences=1, words=len(gl.word_boundaries))
    word_err = [False] * len(gl.word_boundaries)
    for li, (pc, gc) in enumerate(zip(pl.labels, gl.labels)):
        if not flags.include_case_endings and li in case_endings:
            continue
        if not flags.include_no_diacritic and gc == 0:
            continue
        t.positions += 1
        if pc != gc:
            t.position_errors += 1
            if li in word_of:
                word_err[word_of[li]] = True
    t.word_errors = sum(word_err)
    t.sentence_errors = 1 if t.word_errors > 0 else 0
    return t


def brute_force_reference(pred: str, gold: str,
                          flags: MetricFlags = PRIMARY_FLAGS) -> Tallies:
    """Deliberately naive re-implementation used as a test oracle: walks
    both strings character by character, no shared helpers beyond the mark
    tables."""
    from .textproc import ARABIC_LETTERS, DIACRITICS, class_of_marks

    def parse(text):
        letters = []  # (raw_offset_of_letter, class_id)
        raw = []
        i = 0
        while i < len(text):
            c = text[i]
            if c in ARABIC_LETTERS:
                marks = ""
                j = i + 1
                while j < len(text) and text[j] in DIACRITICS:
                    marks += text[j]
                    j += 1
                letters.append((len(raw), class_of_marks(marks)))
                raw.append(c)
                i = j
            else:
                raw.append(c)
                i += 1
        return "".join(raw), letters

    raw_p, letters_p = parse(pred)
    raw_g, letters_g = parse(gold)
    if raw_p != raw_g:
        first = next((i for i, (a, b) in enumerate(zip(raw_p, raw_g)) if a != b),
                     min(len(raw_p), len(raw_g)))
        raise AlignmentError(f"base text mismatch at offset {first}")

    # word spans over raw, whitespace-delimited with >=1 Arabic letter
    spans = []
    start = None
    for i, c in enumerate(raw_g + " "):
        if c.isspace():
            if start is not None:
                span = (start, i)
                if any(raw_g[k] in ARABIC_LETTERS for k in range(*span)):
                    spans.append(span)
                start = None
        elif start is None:
            start = i

    t = Tallies(sentences=1, words=len(spans))
    any_word_err = 0
    for span in spans:
        word_has_err = False
        letters_in_span = [(off, gc) for off, gc in letters_g
                           if span[0] <= off < span[1]]
        last_off = letters_in_span[-1][0] if letters_in_span else None
        for (off, gc), (_, pc) in zip(letters_g, letters_p):
            if not (span[0] <= off < span[1]):
                continue
            if not flags.include_case_endings and off == last_off:
                continue
            if not flags.include_no_diacritic and gc == 0:
                continue
            t.positions += 1
            if pc != gc:
                t.position_errors += 1
                word_has_err = True
        if word_has_err:
            any_word_err += 1
    t.word_errors = any_word_err
    t.sentence_errors = 1 if any_word_err else 0
    return t


def report_from_tallies(t: Tallies) -> ScoreReport:
    return ScoreReport(
        der=t.position_errors / t.positions if t.positions else 0.0,
        wer=t.word_errors / t.words if t.words else 0.0,
        ser=t.sentence_errors / t.sentences if t.sentences else 0.0,
        positions=t.positions, words=t.words, sentences=t.sentences)


def evaluate_corpus(pred_by_id: dict[str, str], gold_by_id: dict[str, str],
                    flags: MetricFlags = PRIMARY_FLAGS) -> ScoreReport:
    """Micro-averaged corpus scores; ids must align exactly."""
    missing = sorted(set(gold_by_id) - set(pred_by_id))
    extra = sorted(set(pred_by_id) - set(gold_by_id))
    if missing or extra:
        raise ManifestError(f"manifest id mismatch: missing={missing} "
                            f"extra={extra}")
    total = Tallies()
    for sid in sorted(gold_by_id):
        total = total.merge(score_pair(pred_by_id[sid], gold_by_id[sid], flags))
    return report_from_tallies(total)
