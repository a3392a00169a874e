"""Model comparison harness.

Trains and evaluates four variants on a shared corpus split:

* ``donor-only``: the pretrained donor stack, frozen, evaluated as-is
* ``receiver-scratch``: a receiver-sized stack trained from random init
* ``receiver-finetuned``: a receiver-sized stack first pretrained on a
  disjoint synthetic corpus, then fine-tuned on the task corpus
* ``combined``: frozen donor + bridges + trainable receiver

All variants share the tokenizer and the validation split. The report is
a markdown table of val loss and perplexity plus greedy sample
generations; a JSON sidecar holds the same numbers machine-readably.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .combined import CombinedModel, GenerationParams, generate_tokens
from .config import RunConfig
from .data import (ByteTokenizer, Example, gen_synthetic, prompt_token_ids,
                   split_train_val)
from .training import TrainConfig, eval_perplexity, train
from .transformer import TransformerStack

SAMPLE_QUERIES = ("sum of 5 and 5", "find the remainder by dividing 7 by 4")

VARIANTS = ("donor-only", "receiver-scratch", "receiver-finetuned", "combined")


@dataclass
class VariantResult:
    name: str
    val_loss: float
    perplexity: float
    generations: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "val_loss": self.val_loss,
                "perplexity": self.perplexity, "generations": self.generations}


_INT = re.compile(r"-?\d+")


def extract_final_integer(text: str) -> int | None:
    """Last integer in a generated response, or None."""
    hits = _INT.findall(text)
    return int(hits[-1]) if hits else None


def reference_answer(ex: Example) -> int | None:
    return extract_final_integer(ex.response)


def generate_response(model, prompt: str, tokenizer: ByteTokenizer,
                      max_new_tokens: int = 48) -> str:
    """Greedy completion of a prompt, decoded to text."""
    ids = prompt_token_ids(prompt, tokenizer)
    params = GenerationParams(max_new_tokens=max_new_tokens, temperature=0.0)
    out = generate_tokens(model, ids, params)
    return tokenizer.detokenize(out)


def exact_answer_accuracy(model, examples, tokenizer: ByteTokenizer,
                          max_new_tokens: int = 48) -> float:
    """Fraction of examples whose greedy completion ends with the
    reference answer."""
    if not examples:
        raise ValueError("accuracy needs at least one example")
    hits = 0
    for ex in examples:
        want = reference_answer(ex)
        got = extract_final_integer(
            generate_response(model, ex.prompt, tokenizer, max_new_tokens))
        if want is not None and got == want:
            hits += 1
    return hits / len(examples)


def _sample_generations(model, tokenizer) -> dict[str, str]:
    return {q: generate_response(model, q, tokenizer) for q in SAMPLE_QUERIES}


def _eval_variant(name, model, val_set, tokenizer, cfg) -> VariantResult:
    stats = eval_perplexity(model, val_set, tokenizer, cfg.train.batch_size)
    return VariantResult(name=name, val_loss=stats["loss"],
                         perplexity=stats["perplexity"],
                         generations=_sample_generations(model, tokenizer))


def compare_models(corpus, cfg: RunConfig, donor: TransformerStack,
                   variants=VARIANTS, log=None) -> list[VariantResult]:
    """Run the comparison. ``donor`` must already be pretrained; it is
    evaluated frozen and reused (frozen) inside the combined variant.
    """
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants requested: {sorted(unknown)}")
    tokenizer = ByteTokenizer()
    train_set, val_set = split_train_val(corpus, cfg.train.val_fraction,
                                         cfg.train.seed)
    # train() splits internally with the same seed, so reuse the full
    # corpus there and keep val_set for the shared evaluation.
    results = []
    for name in variants:
        if log:
            log(f"variant {name}")
        if name == "donor-only":
            donor.freeze("all")
            model = donor
        elif name == "receiver-scratch":
            model = TransformerStack(cfg.receiver, seed=cfg.train.seed + 11)
            train(model, corpus, cfg.train, tokenizer, log=log)
        elif name == "receiver-finetuned":
            model = TransformerStack(cfg.receiver, seed=cfg.train.seed + 12)
            pre_corpus = gen_synthetic(max(len(corpus), 256),
                                       seed=cfg.train.seed + 13)
            train(model, pre_corpus, cfg.train, tokenizer, log=log)
            train(model, corpus, cfg.train, tokenizer, log=log)
        elif name == "combined":
            receiver = TransformerStack(cfg.receiver, seed=cfg.train.seed + 14)
            model = CombinedModel(donor, receiver, cfg.bridge,
                                  vocab_out=tokenizer.vocab_size,
                                  seed=cfg.train.seed + 15)
            train(model, corpus, cfg.train, tokenizer, log=log)
        results.append(_eval_variant(name, model, val_set, tokenizer, cfg))
    return results


def render_report(results: list[VariantResult]) -> str:
    lines = ["# Model comparison", "",
             "| variant | val loss | perplexity |",
             "|---|---|---|"]
    for r in results:
        lines.append(f"| {r.name} | {r.val_loss:.4f} | {r.perplexity:.2f} |")
    lines.append("")
    lines.append("## Sample generations")
    for r in results:
        lines.append("")
        lines.append(f"### {r.name}")
        for query, response in r.generations.items():
            lines.append(f"- `{query}` -> `{response.strip()}`")
    lines.append("")
    return "\n".join(lines)


def write_report(path: str, results: list[VariantResult]) -> None:
    """Write the markdown report and a .json sidecar next to it."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(render_report(results))
    sidecar = path + ".json"
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump([r.to_dict() for r in results], f, indent=2)


def pretrain_donor(cfg: RunConfig, corpus, tokenizer=None, log=None):
    """Train a donor-sized stack from scratch on the corpus and freeze it."""
    tokenizer = tokenizer or ByteTokenizer()
    donor = TransformerStack(cfg.donor, seed=cfg.train.seed + 1)
    pre_cfg = cfg.train
    state = train(donor, corpus, pre_cfg, tokenizer, log=log)
    donor.freeze("all")
    return donor, state
