"""Fixed word-level toy vocabulary. Option letters occupy ids 0-3 so that
candidate token ids are stable across runs."""

WORDS = [
    "A", "B", "C", "D",
    "answer", "question", "the", "is", "what", "color", "of",
    "sky", "grass", "sun", "sea",
    "red", "blue", "green", "yellow",
    "one", "two", "three", "four",
    "plus", "equals", "number",
    "(", ")", ".", ",", "?", "<pad>",
]

WORD_TO_ID = {w: i for i, w in enumerate(WORDS)}
VOCAB_SIZE = len(WORDS)
OPTION_IDS = [WORD_TO_ID[w] for w in ("A", "B", "C", "D")]


def encode(words: list[str]) -> list[int]:
    try:
        return [WORD_TO_ID[w] for w in words]
    except KeyError as exc:
        raise ValueError(f"word {exc} not in the toy vocabulary") from exc


def decode(ids: list[int]) -> str:
    return " ".join(WORDS[i] for i in ids)
