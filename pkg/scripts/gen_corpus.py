"""Generate the shipped toy corpora (deterministic).

Three plain-text files sharing a sentence grammar:

  tiny_corpus.txt  -- base language-modeling corpus; its content words come
                      from a generated syllabic lexicon large enough that a
                      desk-scale model must spend real capacity on spelling
  task_a.txt       -- adaptation task A (animal words)
  task_b.txt       -- adaptation task B (mineral words)

Sentences usually repeat their subject noun in a closing clause, so the
model also has to carry a word across the line (a long-range copy).

Run from the repo root:  python scripts/gen_corpus.py
"""

import random
from pathlib import Path

OUT_DIR = Path(__file__).resolve().parent.parent / "src" / "qeft" / "data"

VERB_BASE = [
    "follows", "watches", "crosses", "guards", "circles", "remembers",
    "finds", "passes", "shelters", "wakes", "greets", "leaves",
]
TAIL_BASE = [
    "at dawn", "at dusk", "in the rain", "near the old gate",
    "under the moon", "by the sea", "after the storm", "along the road",
]

ADJ_A = ["amber", "silver", "russet", "speckled", "swift", "shy"]
NOUN_A = ["otter", "falcon", "heron", "beaver", "marten", "osprey",
          "weasel", "lynx", "plover", "stoat"]
VERB_A = ["stalks", "trails", "chases", "startles"]

ADJ_B = ["veined", "polished", "rough", "glassy", "banded", "chipped"]
NOUN_B = ["quartz", "basalt", "garnet", "copper", "marble", "flint",
          "cobalt", "jasper", "gypsum", "shale"]
VERB_B = ["outlasts", "scratches", "colors", "anchors"]


def syllabic_lexicon(rng, n_words):
    onset = list("bcdfghjklmnprstvwz")
    vowel = list("aeiou")
    coda = ["", "", "n", "r", "s", "l"]
    lex = set()
    while len(lex) < n_words:
        lex.add("".join(rng.choice(onset) + rng.choice(vowel)
                        + rng.choice(coda)
                        for _ in range(rng.randint(2, 3))))
    return sorted(lex)


def lexicon_sentence(rng, lex, verbs, tails):
    w1, w2 = rng.choice(lex), rng.choice(lex)
    v, t = rng.choice(verbs), rng.choice(tails)
    roll = rng.random()
    if roll < 0.45:
        return f"the {w1} {v} the {w2} {t}, and the {w1} rests.\n"
    if roll < 0.75:
        return f"the {w1} {v} the {w2} {t}.\n"
    return f"when the {w1} {v} the {w2}, the {w1} is quiet.\n"


def task_sentence(rng, adjs, nouns, verbs, tails):
    a1, a2 = rng.choice(adjs), rng.choice(adjs)
    n1, n2 = rng.choice(nouns), rng.choice(nouns)
    v, t = rng.choice(verbs), rng.choice(tails)
    roll = rng.random()
    if roll < 0.45:
        return f"the {a1} {n1} {v} the {a2} {n2} {t}, and the {n1} rests.\n"
    if roll < 0.75:
        return f"the {a1} {n1} {v} the {a2} {n2} {t}.\n"
    return f"when the {a1} {n1} {v} the {n2}, the {n1} is quiet.\n"


def main():
    OUT_DIR.mkdir(parents=True, exist_ok=True)

    rng = random.Random(1311)
    lex = syllabic_lexicon(rng, 1500)
    path = OUT_DIR / "tiny_corpus.txt"
    with open(path, "w") as fh:
        for _ in range(5000):
            fh.write(lexicon_sentence(rng, lex, VERB_BASE, TAIL_BASE))
    print(f"wrote {path} ({path.stat().st_size} bytes)")

    for name, seed, adjs, nouns, verbs in (
            ("task_a.txt", 27182, ADJ_A, NOUN_A, VERB_BASE + VERB_A),
            ("task_b.txt", 31415, ADJ_B, NOUN_B, VERB_BASE + VERB_B)):
        rng = random.Random(seed)
        path = OUT_DIR / name
        with open(path, "w") as fh:
            for _ in range(700):
                fh.write(task_sentence(rng, adjs, nouns, verbs, TAIL_BASE))
        print(f"wrote {path} ({path.stat().st_size} bytes)")


if __name__ == "__main__":
    main()
