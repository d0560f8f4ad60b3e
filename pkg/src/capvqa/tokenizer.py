"""Whitespace tokenizer with a file-backed vocabulary.

The synthetic dataset builds its vocabulary at generation time; any external
tokenizer can be swapped in as long as it produces ``[CLS] w_1..w_l [SEP]``
id sequences with the same special-token layout.
"""

from __future__ import annotations

from pathlib import Path

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)


class Tokenizer:
    def __init__(self, tokens: list[str]):
        if list(tokens[: len(SPECIAL_TOKENS)]) != list(SPECIAL_TOKENS):
            raise ValueError(
                f"vocabulary must start with the special tokens {SPECIAL_TOKENS}"
            )
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def n_special(self) -> int:
        return len(SPECIAL_TOKENS)

    @classmethod
    def build(cls, texts: list[str]) -> "Tokenizer":
        words = sorted({w for text in texts for w in text.split()})
        return cls(list(SPECIAL_TOKENS) + words)

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        lines = Path(path).read_text().splitlines()
        return cls([ln for ln in lines if ln])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    def encode(self, text: str, max_len: int | None = None) -> list[int]:
        """Encode as [CLS] words [SEP]; words beyond max_len-2 are truncated."""
        words = text.split()
        if not words:
            raise ValueError("cannot encode an empty question")
        if max_len is not None:
            words = words[: max_len - 2]
        ids = [self.cls_id]
        ids.extend(self.index.get(w, self.unk_id) for w in words)
        ids.append(self.sep_id)
        return ids

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)
