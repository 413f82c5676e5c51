#!/usr/bin/env python3
"""Generate the bundled byte-level training corpus.

The text is produced by a small stochastic grammar (short village stories
with recurring characters, counting sentences and dialogue), so it is free
of any third-party copyright and fully reproducible from the seed.

    python3 scripts/make_corpus.py --seed 1234 --bytes 1100000 -o data/corpus.txt
"""

import argparse
import random

NAMES = [
    ("Anna", "she", "her"), ("Tom", "he", "his"), ("Mara", "she", "her"),
    ("Oskar", "he", "his"), ("Lena", "she", "her"), ("Paul", "he", "his"),
    ("Ida", "she", "her"), ("Jonas", "he", "his"), ("Clara", "she", "her"),
    ("Felix", "he", "his"), ("Greta", "she", "her"), ("Hugo", "he", "his"),
    ("Nora", "she", "her"), ("Emil", "he", "his"), ("Rosa", "she", "her"),
    ("Victor", "he", "his"), ("Elsa", "she", "her"), ("Bruno", "he", "his"),
]
PLACES = [
    "the mill", "the river", "the market", "the old bridge", "the forest",
    "the harbor", "the bakery", "the school", "the hill", "the orchard",
    "the station", "the library", "the garden", "the farm", "the church",
]
OBJECTS = [
    ("apple", "apples"), ("basket", "baskets"), ("letter", "letters"),
    ("lamp", "lamps"), ("coin", "coins"), ("book", "books"), ("loaf", "loaves"),
    ("key", "keys"), ("stone", "stones"), ("cup", "cups"), ("rope", "ropes"),
    ("candle", "candles"), ("fish", "fish"), ("egg", "eggs"), ("map", "maps"),
]
ADJECTIVES = [
    "small", "old", "red", "heavy", "bright", "quiet", "warm", "broken",
    "new", "green", "tall", "cold", "strange", "golden", "wooden",
]
WEATHER = [
    "The sun was shining over the valley.", "It had rained all night.",
    "A cold wind came down from the hills.", "The morning was grey and still.",
    "Snow covered the roofs of the village.", "The air was warm and heavy.",
]
MOVES = ["walked to", "ran to", "went to", "hurried to", "came back from", "looked around"]
FEELINGS = ["happy", "tired", "worried", "hungry", "curious", "angry", "calm", "sad"]
NUMBERS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight",
           "nine", "ten", "eleven", "twelve"]
TIMES = ["In the morning", "At noon", "In the evening", "Later that day",
         "The next day", "Before dawn", "After supper"]
SAYINGS = [
    "We should go home before dark", "I have never seen anything like this",
    "Please give me a hand", "Where did you find it", "It is later than you think",
    "Tomorrow will be a better day", "Do not tell anyone", "I knew it all along",
]


def article(word):
    return ("an " if word[0] in "aeiou" else "a ") + word


class Story:
    def __init__(self, rng):
        self.rng = rng
        self.cast = rng.sample(NAMES, 2)
        self.place = rng.choice(PLACES)

    def who(self):
        return self.rng.choice(self.cast)

    def sentence(self):
        r = self.rng
        a, b = self.cast
        kind = r.randrange(9)
        if kind == 0:
            n, pron, _ = self.who()
            self.place = r.choice(PLACES)
            return f"{r.choice(TIMES)}, {n} {r.choice(MOVES)} {self.place}."
        if kind == 1:
            n, pron, poss = self.who()
            obj = r.choice(OBJECTS)
            return f"{n} found {article(r.choice(ADJECTIVES) + ' ' + obj[0])} near {self.place}, and {pron} put it in {poss} bag."
        if kind == 2:
            x, y = r.randrange(0, 7), r.randrange(0, 6)
            obj = r.choice(OBJECTS)
            nx = obj[0] if x == 1 else obj[1]
            ny = obj[0] if y == 1 else obj[1]
            nz = obj[0] if x + y == 1 else obj[1]
            return (f"{a[0]} had {NUMBERS[x]} {nx} and {b[0]} had {NUMBERS[y]} {ny}, "
                    f"so together they had {NUMBERS[x + y]} {nz}.")
        if kind == 3:
            n, pron, _ = self.who()
            return f"{n} felt {r.choice(FEELINGS)}, because {pron} was far from {self.place}."
        if kind == 4:
            speaker, listener = (a, b) if r.random() < 0.5 else (b, a)
            return f"\"{r.choice(SAYINGS)}, {listener[0]},\" said {speaker[0]}."
        if kind == 5:
            return r.choice(WEATHER)
        if kind == 6:
            n, pron, poss = self.who()
            obj = r.choice(OBJECTS)
            return f"{n} gave {poss} {r.choice(ADJECTIVES)} {obj[0]} to {b[0] if n == a[0] else a[0]}."
        if kind == 7:
            k = r.randrange(1, 13)
            obj = r.choice(OBJECTS)
            word = obj[0] if k == 1 else obj[1]
            return f"At {self.place} there were {NUMBERS[k]} {word}, and {a[0]} counted them twice."
        n, pron, _ = self.who()
        return f"{n} and {b[0] if n == a[0] else a[0]} stayed at {self.place} until it was dark."

    def paragraph(self):
        a, b = self.cast
        lines = [f"This is a story about {a[0]} and {b[0]}."]
        for _ in range(self.rng.randrange(4, 10)):
            lines.append(self.sentence())
        return " ".join(lines)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=1234)
    ap.add_argument("--bytes", type=int, default=1_100_000)
    ap.add_argument("-o", "--output", required=True)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    out, total = [], 0
    while total < args.bytes:
        p = Story(rng).paragraph() + "\n\n"
        out.append(p)
        total += len(p)
    with open(args.output, "w", encoding="ascii") as f:
        f.write("".join(out))


if __name__ == "__main__":
    main()
