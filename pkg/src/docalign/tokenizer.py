"""Byte-pair vocabulary over OCR words, backed by the ``tokenizers`` library."""

from __future__ import annotations

import string
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

from tokenizers import Tokenizer, models, pre_tokenizers, trainers

PAD, UNK, BOS, EOS = "[PAD]", "[UNK]", "[BOS]", "[EOS]"
SPECIAL_TOKENS = [PAD, UNK, BOS, EOS]
DEFAULT_ALPHABET = list(string.ascii_lowercase + string.digits)


class WordTokenizer:
    """Subword tokenizer that keeps track of which word each token came from.

    Ids 0-3 are reserved for ``[PAD]``, ``[UNK]``, ``[BOS]`` and ``[EOS]``.
    """

    def __init__(self, backend: Tokenizer):
        self._tok = backend
        self.pad_id = self._require(PAD)
        self.unk_id = self._require(UNK)
        self.bos_id = self._require(BOS)
        self.eos_id = self._require(EOS)

    def _require(self, token: str) -> int:
        idx = self._tok.token_to_id(token)
        if idx is None:
            raise ValueError(f"tokenizer is missing special token {token}")
        return idx

    @classmethod
    def train(
        cls,
        words: Iterable[str],
        vocab_size: int = 512,
        alphabet: Sequence[str] = DEFAULT_ALPHABET,
    ) -> "WordTokenizer":
        tok = Tokenizer(models.BPE(unk_token=UNK))
        tok.pre_tokenizer = pre_tokenizers.WhitespaceSplit()
        trainer = trainers.BpeTrainer(
            vocab_size=vocab_size,
            special_tokens=SPECIAL_TOKENS,
            initial_alphabet=list(alphabet),
            show_progress=False,
        )
        # sorted input keeps merges independent of corpus iteration order
        tok.train_from_iterator(sorted(words), trainer)
        return cls(tok)

    @classmethod
    def from_str(cls, payload: str) -> "WordTokenizer":
        return cls(Tokenizer.from_str(payload))

    @classmethod
    def load(cls, path) -> "WordTokenizer":
        return cls(Tokenizer.from_file(str(path)))

    def to_str(self) -> str:
        return self._tok.to_str()

    def save(self, path) -> None:
        Path(path).write_text(self.to_str(), encoding="utf-8")

    @property
    def vocab_size(self) -> int:
        return self._tok.get_vocab_size()

    def id_to_token(self, idx: int) -> str:
        return self._tok.id_to_token(int(idx))

    def encode_words(self, words: Sequence[str]) -> List[List[Tuple[int, Tuple[int, int]]]]:
        """Tokenize each word; returns per-word lists of ``(id, char_span)``."""
        out: List[List[Tuple[int, Tuple[int, int]]]] = [[] for _ in words]
        if not words:
            return out
        enc = self._tok.encode(list(words), is_pretokenized=True, add_special_tokens=False)
        for idx, wid, span in zip(enc.ids, enc.word_ids, enc.offsets):
            out[wid].append((idx, tuple(span)))
        return out
