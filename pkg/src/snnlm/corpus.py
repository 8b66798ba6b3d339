"""Deterministic English-like toy corpus.

Sentences come from a small phrase grammar over a fixed word list, so the
text has realistic byte statistics (spaces, capitals, punctuation, common
words) while being generated entirely from a seed.
"""

from __future__ import annotations

from .tensor import Rng

DETERMINERS = ["the", "a", "this", "that", "every", "some", "no", "one", "his", "her", "their", "our"]
ADJECTIVES = [
    "old", "young", "quiet", "bright", "dark", "small", "great", "little", "cold", "warm", "green",
    "grey", "strange", "gentle", "proud", "tired", "early", "last", "simple", "heavy", "silver", "wild",
]
NOUNS = [
    "king", "river", "house", "garden", "ship", "window", "city", "forest", "letter", "road", "horse",
    "friend", "mother", "father", "child", "village", "morning", "night", "stone", "bell", "tower",
    "field", "sea", "door", "fire", "book", "wind", "voice", "hand", "heart", "captain", "soldier",
    "servant", "lady", "doctor", "teacher", "market", "bridge", "mountain", "winter", "summer",
]
VERBS = [
    "saw", "found", "watched", "heard", "followed", "loved", "remembered", "crossed", "opened", "left",
    "carried", "kept", "built", "called", "held", "knew", "wanted", "reached", "passed", "lost",
]
INTRANSITIVE = ["slept", "waited", "laughed", "wept", "listened", "smiled", "wandered", "returned", "spoke", "rested"]
ADVERBS = ["slowly", "again", "at last", "in silence", "without a word", "once more", "by chance", "at dawn", "softly"]
PREPOSITIONS = ["near", "beyond", "under", "across", "beside", "behind", "towards", "through", "over"]
CONNECTIVES = ["and", "but", "so", "while", "because", "when", "though"]
NAMES = ["John", "Mary", "Thomas", "Anne", "Henry", "Alice", "Robert", "Jane", "Edward", "Clara"]
SPEECH = ["said", "asked", "replied", "whispered", "cried"]


class _Picker:
    def __init__(self, rng: Rng):
        self.rng = rng

    def pick(self, words: list[str]) -> str:
        return words[int(self.rng.integers(len(words), 1)[0])]

    def chance(self, p: float) -> bool:
        return bool(self.rng.uniform(1)[0] < p)


def _noun_phrase(pk: _Picker) -> str:
    if pk.chance(0.15):
        return pk.pick(NAMES)
    words = [pk.pick(DETERMINERS)]
    if pk.chance(0.45):
        words.append(pk.pick(ADJECTIVES))
    words.append(pk.pick(NOUNS))
    if pk.chance(0.15):
        words += ["of", "the", pk.pick(NOUNS)]
    return " ".join(words)


def _clause(pk: _Picker) -> str:
    subject = _noun_phrase(pk)
    if pk.chance(0.3):
        parts = [subject, pk.pick(INTRANSITIVE)]
    else:
        parts = [subject, pk.pick(VERBS), _noun_phrase(pk)]
    if pk.chance(0.35):
        parts += [pk.pick(PREPOSITIONS), _noun_phrase(pk)]
    if pk.chance(0.25):
        parts.append(pk.pick(ADVERBS))
    return " ".join(parts)


def _sentence(pk: _Picker) -> str:
    body = _clause(pk)
    if pk.chance(0.3):
        body += (", " if pk.chance(0.5) else " ") + pk.pick(CONNECTIVES) + " " + _clause(pk)
    if pk.chance(0.12):
        speaker = pk.pick(NAMES)
        end = "?" if pk.chance(0.3) else ","
        return f'"{body[0].upper()}{body[1:]}{end}" {pk.pick(SPEECH)} {speaker}.'
    end = "!" if pk.chance(0.05) else "."
    return body[0].upper() + body[1:] + end


def synthetic_corpus(n_bytes: int = 100_000, seed: int = 0) -> str:
    """About ``n_bytes`` of text in paragraphs of 3 to 7 sentences (exactly ``n_bytes`` long)."""
    if n_bytes < 1:
        raise ValueError("n_bytes must be positive")
    pk = _Picker(Rng(seed))
    paragraphs: list[str] = []
    size = 0
    while size < n_bytes:
        n = 3 + int(pk.rng.integers(5, 1)[0])
        para = " ".join(_sentence(pk) for _ in range(n))
        paragraphs.append(para)
        size += len(para) + 2
    return "\n\n".join(paragraphs)[:n_bytes]
