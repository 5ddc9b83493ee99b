"""Regenerate the shipped lexicon subset.

Needs the ``cmudict`` and ``wordfreq`` packages, which are build-time only:

    pip install cmudict wordfreq
    python scripts/build_lexicon.py --size 20000
"""
import argparse
import re
from pathlib import Path

import cmudict
import wordfreq

WORD_RE = re.compile(r"^[a-z']+$")
OUT = Path(__file__).resolve().parents[1] / "src" / "phonemlm" / "data" / "lexicon.dict"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=20000)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()

    prons = cmudict.dict()
    rows = []
    for word in wordfreq.top_n_list("en", args.size * 3):
        if not WORD_RE.match(word) or word not in prons:
            continue
        rows.append((word, prons[word][0]))
        if len(rows) == args.size:
            break

    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(";;; CMUdict subset: first pronunciation of the most frequent English words\n")
        fh.write(";;; entries are in descending corpus-frequency order\n")
        for word, phones in rows:
            fh.write(f"{word.upper()}  {' '.join(phones)}\n")
    print(f"wrote {len(rows)} entries to {args.out}")


if __name__ == "__main__":
    main()
