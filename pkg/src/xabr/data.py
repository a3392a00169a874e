"""Corpus handling: byte tokenizer, JSONL ingestion, length filtering,
train/val splitting, dynamic-padding collation, and a synthetic
arithmetic task generator."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError

BOS = 256
EOS = 257
PAD = 258
IGNORE = -1

SEPARATOR = "\n#"


class ByteTokenizer:
    """Byte-level tokenizer: 256 raw bytes plus BOS/EOS/PAD specials.
    Round-trips any byte string exactly."""

    vocab_size = 259
    bos_id = BOS
    eos_id = EOS
    pad_id = PAD

    def tokenize(self, text: str | bytes) -> list[int]:
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return [BOS, *raw, EOS]

    def detokenize_bytes(self, ids) -> bytes:
        return bytes(int(t) for t in ids if 0 <= int(t) < 256)

    def detokenize(self, ids) -> str:
        return self.detokenize_bytes(ids).decode("utf-8", errors="replace")


@dataclass
class Example:
    prompt: str
    response: str

    def __post_init__(self):
        if not self.prompt.strip() or not self.response.strip():
            raise DataError("example prompt and response must be non-empty")


@dataclass
class TokenBatch:
    """Dynamically padded batch: ids and pad_mask are [B, L]; labels carry
    the next-token shift with -1 on prompt, separator and pad positions."""

    ids: np.ndarray
    pad_mask: np.ndarray
    labels: np.ndarray

    @property
    def n_target_tokens(self) -> int:
        return int((self.labels != IGNORE).sum())


def load_jsonl(path) -> list[Example]:
    """Parse one JSON object per line with string fields 'prompt' and
    'response'; blank lines are skipped, unknown fields ignored."""
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected an object per line")
            for key in ("prompt", "response"):
                if key not in obj or not isinstance(obj[key], str):
                    raise DataError(
                        f"{path}:{lineno}: missing or non-string field {key!r}")
            examples.append(Example(prompt=obj["prompt"], response=obj["response"]))
    return examples


def save_jsonl(examples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"prompt": ex.prompt, "response": ex.response}) + "\n")


def full_token_ids(ex: Example, tokenizer: ByteTokenizer) -> tuple[list[int], int]:
    """Tokenize prompt + separator + response as one sequence. Returns
    (ids, index where the response starts)."""
    prompt_part = (ex.prompt + SEPARATOR).encode("utf-8")
    response_part = ex.response.encode("utf-8")
    ids = [BOS, *prompt_part, *response_part, EOS]
    return ids, 1 + len(prompt_part)


def prompt_token_ids(prompt: str, tokenizer: ByteTokenizer) -> list[int]:
    """Tokenize a bare prompt for generation: BOS, prompt bytes, and the
    separator, so the model continues straight into a response."""
    return [BOS, *(prompt + SEPARATOR).encode("utf-8")]


def filter_by_length(examples, tokenizer: ByteTokenizer,
                     max_tokens: int) -> tuple[list[Example], int]:
    """Keep examples whose full tokenized length is <= max_tokens
    (inclusive). Returns (kept, dropped_count), order preserved."""
    if max_tokens < 2:
        raise ValueError("max_tokens must be >= 2")
    kept = [ex for ex in examples
            if len(full_token_ids(ex, tokenizer)[0]) <= max_tokens]
    return kept, len(examples) - len(kept)


def split_train_val(examples, val_fraction: float, seed: int):
    """Seeded shuffle, then the first ceil(N * val_fraction) go to val."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    if len(examples) < 2:
        raise ValueError("need at least 2 examples to split")
    order = np.random.default_rng(seed).permutation(len(examples))
    n_val = int(np.ceil(len(examples) * val_fraction))
    val = [examples[i] for i in order[:n_val]]
    train = [examples[i] for i in order[n_val:]]
    return train, val


def collate(examples, tokenizer: ByteTokenizer,
            max_len: int | None = None) -> TokenBatch:
    """Pad each batch only to its own maximum length; labels are the
    shifted ids with -1 wherever the target token belongs to the prompt,
    the separator, or padding.

    Rows longer than ``max_len`` keep their last ``max_len`` tokens: the
    response sits at the tail, so truncation costs prompt context, not
    supervision.
    """
    if not examples:
        raise ValueError("cannot collate an empty batch")
    tokenized = [full_token_ids(ex, tokenizer) for ex in examples]
    if max_len is not None:
        if max_len < 2:
            raise ValueError("max_len must be >= 2")
        trimmed = []
        for seq, resp_start in tokenized:
            cut = max(0, len(seq) - max_len)
            trimmed.append((seq[cut:], max(0, resp_start - cut)))
        tokenized = trimmed
    width = max(len(ids) for ids, _ in tokenized)
    batch = len(tokenized)

    ids = np.full((batch, width), PAD, dtype=np.int64)
    pad_mask = np.ones((batch, width), dtype=bool)
    labels = np.full((batch, width), IGNORE, dtype=np.int64)
    for row, (seq, resp_start) in enumerate(tokenized):
        n = len(seq)
        ids[row, :n] = seq
        pad_mask[row, :n] = False
        for t in range(n - 1):
            if t + 1 >= resp_start:  # train on response tokens and the EOS
                labels[row, t] = seq[t + 1]
    return TokenBatch(ids=ids, pad_mask=pad_mask, labels=labels)


SUM_PROMPT = "sum of {a} and {b}"
SUM_RESPONSE = "{a} + {b} = {c}. The answer is {c}."
REM_PROMPT = "find the remainder by dividing {a} by {b}"
REM_RESPONSE = "{a} = {q}*{b} + {r}. The remainder is {r}."


def make_sum_example(a: int, b: int) -> Example:
    return Example(prompt=SUM_PROMPT.format(a=a, b=b),
                   response=SUM_RESPONSE.format(a=a, b=b, c=a + b))


def make_rem_example(a: int, b: int) -> Example:
    q, r = divmod(a, b)
    return Example(prompt=REM_PROMPT.format(a=a, b=b),
                   response=REM_RESPONSE.format(a=a, b=b, q=q, r=r))


def gen_synthetic(n: int, seed: int,
                  task_mix: dict[str, float] | None = None) -> list[Example]:
    """Seeded corpus of templated arithmetic tasks with worked answers:
    sums of a, b in [0, 99] and remainders with divisors in [2, 9]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mix = dict(task_mix) if task_mix else {"sum": 0.5, "rem": 0.5}
    unknown = set(mix) - {"sum", "rem"}
    if unknown:
        raise ValueError(f"unknown tasks in mix: {sorted(unknown)}")
    total = sum(mix.values())
    if total <= 0:
        raise ValueError("task mix weights must sum to a positive value")
    names = sorted(mix)
    weights = np.array([mix[k] / total for k in names])

    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        task = names[int(rng.choice(len(names), p=weights))]
        if task == "sum":
            out.append(make_sum_example(int(rng.integers(0, 100)),
                                        int(rng.integers(0, 100))))
        else:
            out.append(make_rem_example(int(rng.integers(0, 100)),
                                        int(rng.integers(2, 10))))
    return out
