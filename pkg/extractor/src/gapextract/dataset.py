"""Synthetic paired QA items: a text question plus pseudo audio features for
the same words. Audio features are deterministic functions of (item, seed):
each word yields two frames, the word embedding plus a modality offset and
frame noise, mimicking a speech encoder's coarse word-rate output."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .model import ToyLM
from .vocab import OPTION_IDS, WORD_TO_ID, encode

FRAMES_PER_WORD = 2

_TEMPLATES = [
    (["what", "is", "the", "color", "of", "sky", "?"], ["blue", "red", "green", "yellow"]),
    (["what", "is", "the", "color", "of", "grass", "?"], ["green", "blue", "red", "yellow"]),
    (["what", "is", "the", "color", "of", "sun", "?"], ["yellow", "green", "blue", "red"]),
    (["one", "plus", "one", "equals", "what", "number", "?"], ["two", "one", "three", "four"]),
    (["one", "plus", "two", "equals", "what", "number", "?"], ["three", "two", "four", "one"]),
    (["two", "plus", "two", "equals", "what", "number", "?"], ["four", "two", "three", "one"]),
]


@dataclass
class Item:
    item_id: str
    question_words: list[str]
    option_words: list[str]  # answers in A, B, C, D slot order
    correct_option: int
    subject_label: int  # 0 = colors, 1 = arithmetic


def make_items(n: int, seed: int) -> list[Item]:
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        t_idx = int(rng.integers(len(_TEMPLATES)))
        words, answers = _TEMPLATES[t_idx]
        correct = int(rng.integers(4))
        slots = list(answers[1:])
        rng.shuffle(slots)
        slots.insert(correct, answers[0])
        items.append(
            Item(
                item_id=f"item{i:03d}",
                question_words=list(words),
                option_words=slots,
                correct_option=correct,
                subject_label=0 if t_idx < 3 else 1,
            )
        )
    return items


def option_block_ids(item: Item) -> list[int]:
    ids: list[int] = []
    for letter_id, word in zip(OPTION_IDS, item.option_words):
        ids.extend([WORD_TO_ID["("], letter_id, WORD_TO_ID[")"], WORD_TO_ID[word]])
    ids.append(WORD_TO_ID["answer"])
    return ids


def text_prompt_ids(item: Item) -> tuple[list[int], tuple[int, int]]:
    """Token ids plus the question span (text modality)."""
    q = encode(item.question_words)
    return q + option_block_ids(item), (0, len(q))


def audio_features(item: Item, model: ToyLM, seed: int) -> np.ndarray:
    """Pseudo speech frames for the question words, (F, D)."""
    # zlib.crc32 is stable across processes, unlike the builtin hash
    rng = np.random.default_rng((seed, zlib.crc32(item.item_id.encode())))
    offset = np.zeros(model.dim)
    offset[0] = 0.8  # constant modality shift
    frames = []
    for wid in encode(item.question_words):
        base = model.embed[wid]
        for _ in range(FRAMES_PER_WORD):
            frames.append(base + offset + 0.15 * rng.standard_normal(model.dim))
    return np.stack(frames)


def speech_prompt(item: Item, model: ToyLM, seed: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Input embeddings plus the question (audio) span (speech modality)."""
    audio = audio_features(item, model, seed)
    tail = model.input_embeddings(option_block_ids(item))
    return np.concatenate([audio, tail]), (0, audio.shape[0])
