"""Regenerate the bundled request corpus (``servescale/data/corpus.jsonl``).

Two task families with distinct vocabularies and output lengths: grade-school
word problems (short worked answers) and programming requests (longer code).
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from servescale.taskcluster import CorpusRecord, write_corpus

NAMES = ["Ava", "Ben", "Chloe", "Dev", "Elena", "Farid", "Grace", "Hiro", "Ines", "Jonah"]
ITEMS = ["apples", "marbles", "stickers", "pencils", "cookies", "books", "coins", "tickets"]
MATH = [
    "{a} has {x} {i}. {b} gives {a} {y} more {i} and then {a} eats {z}. How many {i} does {a} have left?",
    "A store sells {i} at {x} dollars each. {a} buys {y} of them and pays with a {z} dollar bill. How much change does {a} get?",
    "{a} reads {x} pages a day. How many days will it take {a} to finish a book with {y} pages if {a} already read {z} pages?",
    "There are {x} students in a class. {y} of them bring {i} and each brings {z}. How many {i} are there in total?",
    "{a} saves {x} dollars each week. After {y} weeks {a} spends {z} dollars on {i}. How much money is left?",
    "A train travels {x} miles per hour for {y} hours and then {z} more miles. What is the total distance?",
]
LANGS = ["Python", "Rust", "Go", "TypeScript", "Java", "C++"]
TOPICS = ["a binary search tree", "an LRU cache", "a rate limiter", "a JSON parser", "a thread pool",
          "a trie for autocomplete", "a priority queue", "a CSV reader", "an HTTP retry wrapper", "a matrix multiply"]
CODE = [
    "Write a {lang} implementation of {t} with unit tests and explain the complexity of each method.",
    "Implement {t} in {lang}. Include error handling, docstrings and an example main function.",
    "Refactor the following {lang} class into {t} that is safe for concurrent use and add benchmarks.",
    "Create a {lang} module exposing {t}; provide the public API, the implementation and test cases.",
    "Debug this {lang} code for {t}: the function returns wrong results for empty input. Rewrite it correctly.",
]


def build(n_per_task: int, seed: int) -> list[CorpusRecord]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_per_task):
        a, b = rng.choice(NAMES, 2, replace=False)
        x, y, z = (int(v) for v in rng.integers(2, 90, 3))
        text = MATH[rng.integers(len(MATH))].format(a=a, b=b, i=rng.choice(ITEMS), x=x, y=y, z=z)
        out.append(CorpusRecord(text, int(max(40, rng.normal(300, 60))), "gsm8k"))
        text = CODE[rng.integers(len(CODE))].format(lang=rng.choice(LANGS), t=rng.choice(TOPICS))
        out.append(CorpusRecord(text, int(max(100, rng.normal(700, 120))), "code"))
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=120, help="records per task")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path,
                    default=Path(__file__).resolve().parents[1] / "src/servescale/data/corpus.jsonl")
    args = ap.parse_args()
    write_corpus(build(args.n, args.seed), args.out)
    print(f"wrote {2 * args.n} records to {args.out}")


if __name__ == "__main__":
    main()
