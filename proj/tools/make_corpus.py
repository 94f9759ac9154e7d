#!/usr/bin/env python3
"""Writes data/corpus.txt: deterministic English-like text from a small grammar.

One document per line. Usage: make_corpus.py [out_path] [target_bytes]
"""
import random
import sys

NOUNS = """farmer miller river village king queen soldier horse dog cat bird child mother father
teacher doctor sailor ship storm mountain forest garden house road bridge letter book window door
lamp table city market merchant baker smith wolf fox sheep field winter summer morning evening
night friend stranger brother sister captain priest judge servant girl boy man woman traveller
student clerk widow neighbour cottage castle church school well mill stone tree apple bread
coat hat boat harbour island valley hill lake meadow orchard""".split()
VERBS_T = """saw found loved feared helped followed watched carried built painted opened closed
visited crossed remembered forgot kept sold bought wrote read met called left heard""".split()
VERBS_I = """slept laughed waited rested wandered smiled sang cried listened returned worked
prayed hesitated arrived departed""".split()
ADJS = """old young small great quiet dark bright cold warm tired happy poor rich kind proud
gentle strange silent busy lonely green white red grey long narrow wide heavy""".split()
ADVS = """slowly quickly quietly often never always gladly suddenly carefully softly""".split()
PREPS = """near under beside behind across through above below toward into""".split()
TIMES = """in the morning|at night|in winter|after the storm|before dawn|on sunday|every day|
at last|long ago|that evening""".replace("\n", "").split("|")
NAMES = """john mary thomas anne william elizabeth george margaret henry alice robert jane""".split()


def noun_phrase(r):
    if r.random() < 0.15:
        return r.choice(NAMES)
    det = r.choice(["the", "the", "a", "his", "her", "their", "that", "every"])
    words = [det]
    if r.random() < 0.5:
        words.append(r.choice(ADJS))
    words.append(r.choice(NOUNS))
    if r.random() < 0.2:
        words += ["of", "the", r.choice(NOUNS)]
    return " ".join(words)


def clause(r):
    subject = noun_phrase(r)
    if r.random() < 0.6:
        parts = [subject, r.choice(VERBS_T), noun_phrase(r)]
    else:
        parts = [subject, r.choice(VERBS_I)]
    if r.random() < 0.3:
        parts.append(r.choice(ADVS))
    if r.random() < 0.35:
        parts += [r.choice(PREPS), noun_phrase(r)]
    return " ".join(parts)


def sentence(r):
    x = r.random()
    if x < 0.15:
        s = r.choice(TIMES) + " , " + clause(r)
    elif x < 0.35:
        s = clause(r) + r.choice([" and ", " but ", " , so "]) + clause(r)
    elif x < 0.45:
        s = clause(r) + " because " + clause(r)
    elif x < 0.5:
        return '" ' + clause(r) + ' ? " asked ' + noun_phrase(r) + " ."
    else:
        s = clause(r)
    return s + " ."


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "data/corpus.txt"
    target = int(sys.argv[2]) if len(sys.argv) > 2 else 200_000
    r = random.Random(20201006)
    size = 0
    with open(out, "w") as f:
        while size < target:
            doc = " ".join(sentence(r) for _ in range(r.randint(2, 6)))
            f.write(doc + "\n")
            size += len(doc) + 1


if __name__ == "__main__":
    main()
