"""Command-line surface.

Subcommands: gen-data, pretrain-donor, train, eval, generate, compare,
gradcheck. Errors map to exit codes: 2 for config/schema problems, 3 for
data problems, 4 for checkpoint format problems.
"""

from __future__ import annotations

import argparse
import json
import sys

from .checkpoint import load_checkpoint, save_checkpoint
from .combined import CombinedModel, GenerationParams, generate_tokens
from .compare import compare_models, pretrain_donor, render_report, write_report
from .config import load_config
from .data import (ByteTokenizer, gen_synthetic, load_jsonl, prompt_token_ids,
                   save_jsonl)
from .errors import CheckpointFormatError, ConfigError, DataError
from .gradcheck import SUITE_MODULES, run_suite
from .training import eval_perplexity, train
from .transformer import TransformerStack


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_stack_checkpoint(path: str) -> TransformerStack:
    model, _ = load_checkpoint(path)
    if not isinstance(model, TransformerStack):
        raise ConfigError(f"{path} holds a combined model, expected a plain stack")
    return model


def cmd_gen_data(args) -> int:
    examples = gen_synthetic(args.n, args.seed)
    save_jsonl(examples, args.out)
    _log(f"wrote {len(examples)} examples to {args.out}")
    return 0


def cmd_pretrain_donor(args) -> int:
    cfg = load_config(args.config)
    corpus = load_jsonl(args.data)
    donor, state = pretrain_donor(cfg, corpus, log=_log)
    save_checkpoint(args.out, donor, step=state.step)
    _log(f"saved donor checkpoint to {args.out} "
         f"(best val loss {state.best_val_loss:.4f})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    corpus = load_jsonl(args.data)
    donor = _load_stack_checkpoint(args.donor_ckpt)
    donor.freeze("all")
    tokenizer = ByteTokenizer()
    receiver = TransformerStack(cfg.receiver, seed=cfg.train.seed + 2)
    model = CombinedModel(donor, receiver, cfg.bridge,
                          vocab_out=tokenizer.vocab_size,
                          seed=cfg.train.seed + 3)
    state = train(model, corpus, cfg.train, tokenizer, log=_log)
    save_checkpoint(args.out, model, step=state.step)
    _log(f"saved combined checkpoint to {args.out} "
         f"(best val loss {state.best_val_loss:.4f})")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    corpus = load_jsonl(args.data)
    stats = eval_perplexity(model, corpus)
    print(json.dumps(stats))
    return 0


def cmd_generate(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    tokenizer = ByteTokenizer()
    ids = prompt_token_ids(args.prompt, tokenizer)
    params = GenerationParams(max_new_tokens=args.max_new,
                              temperature=args.temperature, seed=args.seed)
    out = generate_tokens(model, ids, params)
    print(tokenizer.detokenize(out))
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    corpus = load_jsonl(args.data)
    _log("pretraining donor for the comparison")
    donor, _ = pretrain_donor(cfg, corpus, log=_log)
    results = compare_models(corpus, cfg, donor, log=_log)
    write_report(args.out_report, results)
    print(render_report(results))
    _log(f"wrote {args.out_report} and {args.out_report}.json")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.module)
    for name, err in results:
        print(f"{name}: max rel error {err:.3e} OK")
    print(f"{len(results)} gradient checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xabr",
        description="Frozen-donor transformer with gated cross-attention "
                    "bridges into a small trainable receiver.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic arithmetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-donor", help="train a donor stack from scratch")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain_donor)

    p = sub.add_parser("train", help="train bridges + receiver against a frozen donor")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--donor-ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="loss and perplexity of a checkpoint on a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="complete a prompt from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("compare", help="train and compare the model variants")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out-report", required=True)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--module", choices=SUITE_MODULES, default=None)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return 2
    except DataError as exc:
        _log(f"data error: {exc}")
        return 3
    except CheckpointFormatError as exc:
        _log(f"checkpoint error: {exc}")
        return 4
    except (ValueError, FileNotFoundError) as exc:
        _log(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
