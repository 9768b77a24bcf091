#!/usr/bin/env python3
"""Regenerate the frozen mock-embedding fixture.

The mock embedder is a deterministic signed hash projection (see
homorag.gateway.mock_hash_embedding). This script recomputes the vectors for
the case-study snippet values and freezes them into
tests/fixtures/embeddings_frozen.json so tests can detect any drift in the
projection.
"""

import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from homorag.annotations import build_index  # noqa: E402
from homorag.gateway import DEFAULT_MOCK_DIM, mock_hash_embedding  # noqa: E402

FIXTURES = ROOT / "tests" / "fixtures"


def main():
    index = build_index(FIXTURES / "swissprot_mini.dat", FIXTURES / "go_mini.obo")
    texts = []
    for accession in ("Q55C17", "Q3ZCD7", "Q9N5Y2"):
        for snippet in index.lookup(accession).snippets:
            if snippet.value not in texts:
                texts.append(snippet.value)
    payload = {
        "dim": DEFAULT_MOCK_DIM,
        "projection": "signed crc32 bag of lowercase word tokens, L2-normalized",
        "vectors": {text: mock_hash_embedding(text, DEFAULT_MOCK_DIM) for text in texts},
    }
    out = FIXTURES / "embeddings_frozen.json"
    out.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"froze {len(texts)} vectors (dim {DEFAULT_MOCK_DIM}) -> {out}")


if __name__ == "__main__":
    main()
