"""WordPiece and character-level tokenization into fixed-length id triplets."""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)

# maximum sequence length per dataset
MAX_LEN = {"all_data": 512, "weibo": 400, "mediaeval": 20, "synthetic": 32}
TOKENIZER_MODE = {"all_data": "wordpiece", "weibo": "char_level", "mediaeval": "wordpiece", "synthetic": "wordpiece"}

MAX_WORD_CHARS = 100


@dataclass(frozen=True)
class TokenizedText:
    input_ids: np.ndarray
    input_mask: np.ndarray
    segment_ids: np.ndarray

    @property
    def max_len(self) -> int:
        return len(self.input_ids)

    @property
    def length(self) -> int:
        return int(self.input_mask.sum())


class TokenVocab(Protocol):
    pad_id: int
    unk_id: int
    cls_id: int
    sep_id: int

    def pieces(self, text: str, mode: str) -> list[str]: ...

    def convert(self, pieces: list[str]) -> list[int]: ...


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def _is_cjk(cp: int) -> bool:
    return (
        0x4E00 <= cp <= 0x9FFF
        or 0x3400 <= cp <= 0x4DBF
        or 0x20000 <= cp <= 0x2A6DF
        or 0x2A700 <= cp <= 0x2CEAF
        or 0xF900 <= cp <= 0xFAFF
        or 0x2F800 <= cp <= 0x2FA1F
    )


def basic_tokenize(text: str, lower: bool = True) -> list[str]:
    """Whitespace/punctuation split in the style of BERT's uncased tokenizer.

    CJK ideographs become single-character words.
    """
    chars = []
    for ch in text:
        cp = ord(ch)
        if cp == 0 or cp == 0xFFFD or (unicodedata.category(ch).startswith("C") and ch not in "\t\n\r"):
            continue
        if _is_cjk(cp):
            chars.append(f" {ch} ")
        elif ch.isspace():
            chars.append(" ")
        else:
            chars.append(ch)
    words = []
    for word in "".join(chars).split():
        if lower:
            word = unicodedata.normalize("NFD", word.lower())
            word = "".join(c for c in word if unicodedata.category(c) != "Mn")
        current = []
        for ch in word:
            if _is_punctuation(ch):
                if current:
                    words.append("".join(current))
                    current = []
                words.append(ch)
            else:
                current.append(ch)
        if current:
            words.append("".join(current))
    return words


def wordpiece(word: str, vocab: dict[str, int], unk: str = UNK) -> list[str]:
    """Greedy longest-match-first split of one word into vocabulary pieces."""
    if len(word) > MAX_WORD_CHARS:
        return [unk]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            sub = word[start:end]
            if start > 0:
                sub = "##" + sub
            if sub in vocab:
                found = sub
                break
            end -= 1
        if found is None:
            return [unk]
        pieces.append(found)
        start = end
    return pieces


class Vocabulary:
    """Token inventory with BERT-style special tokens.

    Can be read from a ``vocab.txt`` file (one token per line, id = line
    number) or built from a corpus as a word + character inventory.
    """

    def __init__(self, tokens: Iterable[str], lower: bool = True):
        self.tokens = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        missing = [t for t in (PAD, UNK, CLS, SEP) if t not in self.token_to_id]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")
        self.lower = lower
        self.pad_id = self.token_to_id[PAD]
        self.unk_id = self.token_to_id[UNK]
        self.cls_id = self.token_to_id[CLS]
        self.sep_id = self.token_to_id[SEP]

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_file(cls, path: str | Path, lower: bool = True) -> Vocabulary:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines, lower=lower)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def build(cls, texts: Iterable[str], mode: str = "wordpiece", lower: bool = True) -> Vocabulary:
        words: set[str] = set()
        chars: set[str] = set()
        for text in texts:
            if mode == "char_level":
                chars.update(_char_pieces(text, lower))
            else:
                for w in basic_tokenize(text, lower):
                    words.add(w)
                    chars.update(w)
        inventory = set(words) | chars
        if mode != "char_level":
            inventory |= {"##" + c for c in chars}
        return cls(list(SPECIAL_TOKENS) + sorted(inventory - set(SPECIAL_TOKENS)), lower=lower)

    def pieces(self, text: str, mode: str) -> list[str]:
        if mode == "char_level":
            return _char_pieces(text, self.lower)
        if mode != "wordpiece":
            raise ValueError(f"unknown tokenizer mode {mode!r}")
        out: list[str] = []
        for word in basic_tokenize(text, self.lower):
            out.extend(wordpiece(word, self.token_to_id))
        return out

    def convert(self, pieces: list[str]) -> list[int]:
        return [self.token_to_id.get(p, self.unk_id) for p in pieces]

    def decode(self, ids: Iterable[int], mode: str = "wordpiece") -> str:
        specials = {self.pad_id, self.cls_id, self.sep_id}
        toks = [self.tokens[i] for i in ids if i not in specials]
        if mode == "char_level":
            return "".join(toks)
        text = ""
        for tok in toks:
            if tok.startswith("##"):
                text += tok[2:]
            else:
                text += (" " if text else "") + tok
        return text


def _char_pieces(text: str, lower: bool) -> list[str]:
    if lower:
        text = text.lower()
    return [ch for ch in text if not ch.isspace() and unicodedata.category(ch)[0] != "C"]


def tokenize_text(text: str, max_len: int, mode: str, vocab: TokenVocab) -> TokenizedText:
    """Tokenize ``text`` into ``[CLS] body [SEP] [PAD]...`` of length ``max_len``.

    The body is truncated to ``max_len - 2`` pieces, keeping the head.
    """
    if max_len < 3:
        raise ValueError(f"max_len must be >= 3, got {max_len}")
    body = vocab.convert(vocab.pieces(text, mode))[: max_len - 2]
    ids = [vocab.cls_id, *body, vocab.sep_id]
    n = len(ids)
    input_ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    input_ids[:n] = ids
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:n] = 1
    return TokenizedText(input_ids, mask, np.zeros(max_len, dtype=np.int64))
