"""Pinned 10-item metric suite with hand-computed EM/F1.

F1 per item (tokens after normalization):
  m01 "paris france" vs "paris": p=1/2, r=1 -> 2/3
  m06 "new york city" vs "new york": p=2/3, r=1 -> 4/5
  m08 "blue red" vs "red green blue": p=1, r=2/3 -> 4/5
  m10 "yes yes" vs "yes": clipped overlap 1, p=1/2, r=1 -> 2/3
"""

from fractions import Fraction

from cfdprompt.evaluation import QueryRecord

# (id, prediction, golds, EM, F1)
ITEMS = [
    ("m01", "Paris France", ["Paris"], 0, Fraction(2, 3)),
    ("m02", "The Eiffel Tower!", ["eiffel tower"], 1, Fraction(1)),
    ("m03", "dog", ["cat"], 0, Fraction(0)),
    ("m04", "Steve Hillage", ["steve hillage"], 1, Fraction(1)),
    ("m05", "a dog", ["the dog"], 1, Fraction(1)),
    ("m06", "New York City", ["New York"], 0, Fraction(4, 5)),
    ("m07", "1961", ["1962", "1961"], 1, Fraction(1)),
    ("m08", "blue red", ["red green blue"], 0, Fraction(4, 5)),
    ("m09", "", ["yes"], 0, Fraction(0)),
    ("m10", "yes yes", ["yes"], 0, Fraction(2, 3)),
]
EM = Fraction(sum(i[3] for i in ITEMS), len(ITEMS))        # 2/5
F1 = sum((i[4] for i in ITEMS), Fraction(0)) / len(ITEMS)  # 52/75


def records():
    return [QueryRecord(i, f"question {i}", [f"Context for {i}."], golds) for i, _, golds, _, _ in ITEMS]


def predictions():
    return {i: pred for i, pred, _, _, _ in ITEMS}
