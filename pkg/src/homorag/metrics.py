"""Text-generation metrics: BLEU-4, ROUGE-L, and entity-level BLEU.

Tokenization is frozen and versioned so scores are comparable across runs:
lowercase, then split into word characters and individual punctuation marks.
Entity-level BLEU ("E-BLEU (lexicon)") runs BLEU over the sequences of
lexicon entities extracted from each side by greedy longest match, so it is
invariant to non-entity wording.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

TOKENIZER_VERSION = "lower-wordpunct/1"
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
BLEU_EPSILON = 1e-9

METRIC_NAMES = ("bleu4", "rouge_l", "e_bleu2", "e_bleu4")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu_core(candidate: Sequence[str], reference: Sequence[str], max_n: int) -> float:
    """BLEU over token sequences: geometric mean of modified n-gram
    precisions up to max_n with brevity penalty; zero counts are smoothed to
    BLEU_EPSILON. The order is clipped to the shorter sequence length so an
    exact copy scores 1.0 even when both sides are shorter than max_n."""
    c, r = len(candidate), len(reference)
    if c == 0 or r == 0:
        return 0.0
    max_n = max(1, min(max_n, c, r))
    log_sum = 0.0
    for n in range(1, max_n + 1):
        total = max(0, c - n + 1)
        if total == 0:
            precision = BLEU_EPSILON
        else:
            cand_counts = _ngrams(candidate, n)
            ref_counts = _ngrams(reference, n)
            matches = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
            precision = matches / total if matches > 0 else BLEU_EPSILON
        log_sum += math.log(precision)
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_sum / max_n)


def bleu4(candidate: str, reference: str) -> float:
    return bleu_core(tokenize(candidate), tokenize(reference), 4)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based F-measure with equal precision/recall weighting."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2.0 * precision * recall / (precision + recall)


class EntityLexicon:
    """Entity surface forms for entity-level scoring.

    Forms are matched case-insensitively by greedy longest match over
    tokenized text; each match is emitted as a single entity token.
    """

    def __init__(self, forms: Iterable[str]):
        self._forms: dict[tuple[str, ...], str] = {}
        for form in forms:
            canonical = " ".join(tokenize(form))
            if not canonical:
                raise ValueError(f"empty lexicon entry {form!r}")
            self._forms[tuple(canonical.split())] = canonical
        self.max_len = max((len(k) for k in self._forms), default=0)

    def __len__(self) -> int:
        return len(self._forms)

    def __contains__(self, key: tuple[str, ...]) -> bool:
        return key in self._forms

    def canonical(self, key: tuple[str, ...]) -> str:
        return self._forms[key]

    def forms(self) -> list[str]:
        return sorted(self._forms.values())

    def merged(self, other: "EntityLexicon") -> "EntityLexicon":
        return EntityLexicon(self.forms() + other.forms())

    @classmethod
    def from_file(cls, path: str | Path) -> "EntityLexicon":
        forms = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    forms.append(line)
        return cls(forms)

    @classmethod
    def from_go_terms(cls, go_terms: dict) -> "EntityLexicon":
        return cls(term.name for term in go_terms.values())


def extract_entities(text: str, lexicon: EntityLexicon) -> list[str]:
    """Greedy longest-match scan; matched forms appear in text order."""
    tokens = tokenize(text)
    entities: list[str] = []
    i = 0
    while i < len(tokens):
        matched = False
        for span in range(min(lexicon.max_len, len(tokens) - i), 0, -1):
            key = tuple(tokens[i: i + span])
            if key in lexicon:
                entities.append(lexicon.canonical(key))
                i += span
                matched = True
                break
        if not matched:
            i += 1
    return entities


def e_bleu(candidate: str, reference: str, lexicon: EntityLexicon, n: int) -> float:
    """BLEU with max order n over extracted entity sequences."""
    if n not in (2, 4):
        raise ValueError(f"entity BLEU order must be 2 or 4, got {n}")
    cand_entities = extract_entities(candidate, lexicon)
    ref_entities = extract_entities(reference, lexicon)
    if not cand_entities:
        return 0.0
    return bleu_core(cand_entities, ref_entities, n)


@dataclass(frozen=True)
class RecordScores:
    bleu4: float
    rouge_l: float
    e_bleu2: float
    e_bleu4: float
    ref_entities_empty: bool

    def to_dict(self) -> dict:
        return {
            "bleu4": self.bleu4,
            "rouge_l": self.rouge_l,
            "e_bleu2": self.e_bleu2,
            "e_bleu4": self.e_bleu4,
            "ref_entities_empty": self.ref_entities_empty,
        }


def score_record(candidate: str, reference: str, lexicon: EntityLexicon) -> RecordScores:
    return RecordScores(
        bleu4=bleu4(candidate, reference),
        rouge_l=rouge_l(candidate, reference),
        e_bleu2=e_bleu(candidate, reference, lexicon, 2),
        e_bleu4=e_bleu(candidate, reference, lexicon, 4),
        ref_entities_empty=not extract_entities(reference, lexicon),
    )


@dataclass(frozen=True)
class MetricRow:
    task: str
    n_records: int
    n_entity_empty: int
    means: dict  # metric name -> mean in [0, 1]

    def display(self) -> dict:
        return {name: round(self.means[name] * 100.0, 1) for name in METRIC_NAMES}


def aggregate(records: Sequence[dict], grouping: str = "task") -> list[MetricRow]:
    """Mean per metric per group. Entity-empty references are excluded from
    the entity-level means (and counted); sums use math.fsum so results do
    not depend on record order."""
    if not records:
        raise ValueError("no records to aggregate")
    groups: dict[str, list[dict]] = {}
    for rec in records:
        groups.setdefault(rec[grouping], []).append(rec)
    rows = []
    for group in sorted(groups):
        recs = groups[group]
        scores = [r["scores"] for r in recs]
        entity_ok = [s for s in scores if not s.ref_entities_empty]
        means = {
            "bleu4": math.fsum(s.bleu4 for s in scores) / len(scores),
            "rouge_l": math.fsum(s.rouge_l for s in scores) / len(scores),
            "e_bleu2": (
                math.fsum(s.e_bleu2 for s in entity_ok) / len(entity_ok) if entity_ok else 0.0
            ),
            "e_bleu4": (
                math.fsum(s.e_bleu4 for s in entity_ok) / len(entity_ok) if entity_ok else 0.0
            ),
        }
        rows.append(
            MetricRow(
                task=group,
                n_records=len(recs),
                n_entity_empty=len(scores) - len(entity_ok),
                means=means,
            )
        )
    return rows


def render_table(rows: Sequence[MetricRow]) -> str:
    """Aligned text table, scores x100 at one decimal."""
    headers = ["task", "n", "entity_empty", "E-BLEU2", "E-BLEU4", "BLEU4", "ROUGE-L"]
    body = []
    for row in rows:
        d = row.display()
        body.append([
            row.task,
            str(row.n_records),
            str(row.n_entity_empty),
            f"{d['e_bleu2']:.1f}",
            f"{d['e_bleu4']:.1f}",
            f"{d['bleu4']:.1f}",
            f"{d['rouge_l']:.1f}",
        ])
    widths = [max(len(headers[i]), *(len(r[i]) for r in body)) for i in range(len(headers))]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
        "  ".join("-" * w for w in widths),
    ]
    for r in body:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(headers))))
    return "\n".join(lines)


def rows_to_jsonl(rows: Sequence[MetricRow]) -> str:
    out = []
    for row in rows:
        payload = {
            "task": row.task,
            "n_records": row.n_records,
            "n_entity_empty": row.n_entity_empty,
            "metric_style": "E-BLEU (lexicon)",
            "tokenizer": TOKENIZER_VERSION,
            **row.display(),
        }
        out.append(json.dumps(payload, sort_keys=True))
    return "\n".join(out) + "\n"
