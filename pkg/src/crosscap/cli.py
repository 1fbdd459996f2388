"""Command-line entry point.

One executable with subcommands covering the whole workflow: corpus
generation, training, caption/retrieval evaluation, the alpha ablation
sweep, the independence verification experiment, attention export, and
the gradient check.

Configuration comes from an optional JSON file with "model", "train",
and "data" sections plus per-field override flags (--train-alpha,
--model-d-m, ...).  Flags win over file values.  Exit codes: 0 on
success, 1 on runtime failure (a JSON error object goes to stderr), 2
on bad usage.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import data as D
from . import train as TR
from .gradcheck import format_report, run_grad_check
from .metrics import mean_row_entropy
from .model import ModelConfig, load_checkpoint


class CliError(Exception):
    """Anticipated runtime failure; rendered as a JSON error object."""


@dataclasses.dataclass
class DataParams:
    """Corpus-generation knobs (the config file's "data" section)."""

    n: int = 480
    seed: int = 0
    rho: float = 1.0
    n_topics: int = 6
    n_feat: int = 16
    confusion: float = 0.3
    decoys: int = 1

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise CliError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)


_SECTIONS = {"model": ModelConfig, "train": TR.TrainConfig,
             "data": DataParams}


def load_config_file(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise CliError(f"{path}: config must be a JSON object")
    unknown = set(payload) - set(_SECTIONS)
    if unknown:
        raise CliError(f"{path}: unknown config sections: "
                       f"{sorted(unknown)}")
    return payload


def _parse_like(raw, default):
    """Coerce a flag string to the type of a dataclass default."""
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise CliError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return json.loads(raw)
    return raw


def _add_override_flags(parser, section):
    cls = _SECTIONS[section]
    group = parser.add_argument_group(f"{section} config overrides")
    for f in dataclasses.fields(cls):
        flag = f"--{section}-{f.name.replace('_', '-')}"
        group.add_argument(flag, dest=f"{section}__{f.name}",
                           default=None, metavar="V",
                           help=f"override {section}.{f.name}")


def _resolve_section(args, section, defaults=None, overrides=None):
    """Defaults, then file section, then flags; returns the validated
    config object.  ``defaults`` sit below the file (derived values),
    ``overrides`` above it (plain flags like gen-data --n)."""
    cls = _SECTIONS[section]
    merged = dict(defaults or {})
    config_path = getattr(args, "config", None)
    if config_path:
        merged.update(load_config_file(config_path).get(section, {}))
    merged.update(overrides or {})
    for f in dataclasses.fields(cls):
        raw = getattr(args, f"{section}__{f.name}", None)
        if raw is not None:
            merged[f.name] = _parse_like(raw, f.default)
    try:
        return cls.from_dict(merged)
    except (ValueError, TypeError) as exc:
        raise CliError(f"bad {section} config: {exc}") from exc


def _load_corpus(path):
    try:
        return D.load_corpus(path)
    except FileNotFoundError as exc:
        raise CliError(f"corpus file not found: {path}") from exc


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint not found: {path}") from exc


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")


def _int_list(raw):
    try:
        return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise CliError(f"expected comma-separated integers, got {raw!r}") \
            from exc


def _float_list(raw):
    try:
        return [float(x) for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise CliError(f"expected comma-separated numbers, got {raw!r}") \
            from exc


# -- subcommands ------------------------------------------------------------


def cmd_gen_data(args):
    file_overrides = {}
    flag_map = {"n": args.n, "seed": args.seed, "rho": args.rho,
                "n_topics": args.topics, "confusion": args.confusion,
                "n_feat": args.n_feat, "decoys": args.decoys}
    for key, val in flag_map.items():
        if val is not None:
            file_overrides[key] = val
    params = _resolve_section(args, "data", overrides=file_overrides)
    topics = D.make_topics(params.n_topics, n_feat=params.n_feat,
                           seed=params.seed)
    corpus = D.generate_corpus(params.n, seed=params.seed, rho=params.rho,
                               topics=topics, confusion=params.confusion,
                               decoys=params.decoys)
    D.save_corpus(corpus, args.out)
    if args.topics_out:
        D.save_topics(topics, args.topics_out)
    print(f"wrote {len(corpus)} instances to {args.out} "
          f"(rho={params.rho}, topics={params.n_topics}, "
          f"vocab={len(corpus.vocab)})")
    return 0


def cmd_train(args):
    cfg = _resolve_section(args, "train")
    train_c = _load_corpus(args.train)
    eval_c = _load_corpus(args.eval)
    model_config = None
    config_path = getattr(args, "config", None)
    has_model_flags = any(
        getattr(args, f"model__{f.name}", None) is not None
        for f in dataclasses.fields(ModelConfig))
    if (config_path and "model" in load_config_file(config_path)) \
            or has_model_flags:
        defaults = {
            "n_feat": int(train_c.instances[0].music.shape[1]),
            "vocab_size": len(train_c.vocab),
            "tau": cfg.tau,
        }
        model_config = _resolve_section(args, "model",
                                           defaults=defaults)
    result = TR.train(cfg, train_c, eval_c, model_config=model_config,
                      out_dir=args.out_dir)
    final_epoch = result.runlog.epochs()[-1]
    print(f"trained {cfg.epochs} epochs; best epoch {result.best_epoch} "
          f"(score {result.best_score:.4f}); artifacts in {args.out_dir}")
    print(f"final epoch: {json.dumps(final_epoch, sort_keys=True)}")
    return 0


def cmd_eval_caption(args):
    model = _load_model(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    report, pairs = TR.evaluate_captions(model, corpus, limit=args.limit,
                                         max_len=args.max_len)
    payload = {
        "kind": "caption_eval",
        "config": {
            "checkpoint": args.checkpoint,
            "corpus": args.corpus,
            "limit": args.limit,
            "max_len": args.max_len,
            "model": model.config.to_dict(),
        },
        "n_pairs": len(pairs),
        "metrics": report.to_dict(),
    }
    if args.out:
        _write_json(args.out, payload)
    print(json.dumps(payload["metrics"], sort_keys=True))
    return 0


def cmd_eval_retrieval(args):
    model = _load_model(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    k_list = _int_list(args.k)
    try:
        result = TR.evaluate_retrieval(model, corpus, k_list=k_list,
                                       query_field=args.query_field)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    payload = {
        "kind": "retrieval_eval",
        "config": {
            "checkpoint": args.checkpoint,
            "corpus": args.corpus,
            "k": k_list,
            "query_field": args.query_field,
            "model": model.config.to_dict(),
        },
        "n_queries": len(corpus),
        "precision": {str(k): result.precision[k] for k in k_list},
        "recall": {str(k): result.recall[k] for k in k_list},
    }
    if args.out:
        _write_json(args.out, payload)
    print(json.dumps({"precision": payload["precision"],
                      "recall": payload["recall"]}, sort_keys=True))
    return 0


def cmd_sweep_alpha(args):
    cfg = _resolve_section(args, "train")
    alphas = _float_list(args.alphas) if args.alphas \
        else list(TR.DEFAULT_ALPHAS)
    seeds = _int_list(args.seeds)
    rows = TR.sweep_alpha(alphas, cfg, seeds=tuple(seeds),
                          n_instances=args.n_instances,
                          n_topics=args.n_topics, n_eval=args.n_eval,
                          data_seed=args.data_seed, jobs=args.jobs,
                          confusion=args.confusion, decoys=args.decoys)
    run_config = {
        "train": cfg.to_dict(),
        "alphas": alphas,
        "seeds": seeds,
        "n_instances": args.n_instances,
        "n_topics": args.n_topics,
        "n_eval": args.n_eval,
        "data_seed": args.data_seed,
        "confusion": args.confusion,
        "decoys": args.decoys,
    }
    TR.sweep_rows_to_csv(rows, args.out, config=run_config)
    for alpha, mean in TR.seed_mean(rows, "rougeL").items():
        print(f"alpha={alpha:g}: seed-mean rougeL={mean:.4f}")
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_verify_ib(args):
    cfg = _resolve_section(args, "train")
    report = TR.verify_independence(cfg, n_instances=args.n_instances,
                                    n_topics=args.n_topics,
                                    n_eval=args.n_eval,
                                    data_seed=args.data_seed,
                                    confusion=args.confusion,
                                    decoys=args.decoys)
    payload = {"kind": "independence_report", **report}
    if args.out:
        _write_json(args.out, payload)
    for name, run in report["runs"].items():
        print(f"{name}: trailing MI bound {run['mi_bound_trailing']:+.4f}"
              f" nats, p@1 {run['p_at_1']:.4f}"
              f" (chance {run['chance_p_at_1']:.4f})")
    checks = report["checks"]
    verdict = all(v for k, v in checks.items() if isinstance(v, bool))
    print(f"checks: {json.dumps(checks, sort_keys=True)}")
    print("verdict: " + ("pass" if verdict else "FAIL"))
    return 0 if verdict else 1


def cmd_export_attention(args):
    model = _load_model(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    if not 0 <= args.index < len(corpus):
        raise CliError(f"index {args.index} outside corpus of "
                       f"{len(corpus)} instances")
    inst = corpus.instances[args.index]
    export = model.export_attention(inst.music, inst.lyrics)
    words = [corpus.vocab.id_to_word[t] for t in export.lyric_tokens]
    config = {
        "checkpoint": args.checkpoint,
        "corpus": args.corpus,
        "index": args.index,
        "music_topic": inst.music_topic,
        "lyric_topic": inst.lyric_topic,
    }
    with open(args.out, "w", encoding="utf-8", newline="") as f:
        f.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        cols = ",".join(f"m{j:03d}" for j in export.music_frames)
        f.write("lyric_token," + cols + "\n")
        for word, row in zip(words, export.attn):
            f.write(word + "," + ",".join(f"{v:.8e}" for v in row) + "\n")
    print(f"wrote {export.attn.shape[0]}x{export.attn.shape[1]} attention"
          f" matrix to {args.out}"
          f" (mean row entropy {mean_row_entropy(export.attn):.4f})")
    return 0


def cmd_grad_check(args):
    report = run_grad_check(tol=args.tol, h=args.h, dims=args.dims,
                            seed=args.seed)
    print(format_report(report))
    if args.out:
        _write_json(args.out, {"kind": "gradcheck_report",
                               "config": {"dims": args.dims,
                                          "tol": args.tol, "h": args.h,
                                          "seed": args.seed},
                               **report.to_dict()})
    if not report.passed:
        raise CliError(f"gradient check failed: max rel error "
                       f"{report.max_rel_error:.3e} >= tol {report.tol:g}")
    return 0


# -- parser -----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="crosscap",
        description="Alignment-augmented music captioning workbench.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--topics", type=int, default=None)
    p.add_argument("--confusion", type=float, default=None)
    p.add_argument("--decoys", type=int, default=None)
    p.add_argument("--n-feat", type=int, default=None)
    p.add_argument("--topics-out", default=None,
                   help="also save the topic specs as JSON")
    _add_override_flags(p, "data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on generated corpora")
    p.add_argument("--config", default=None)
    p.add_argument("--train", required=True, help="training corpus file")
    p.add_argument("--eval", required=True, help="eval corpus file")
    p.add_argument("--out-dir", required=True)
    _add_override_flags(p, "train")
    _add_override_flags(p, "model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-caption", help="caption metrics vs references")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--max-len", type=int, default=24)
    p.set_defaults(func=cmd_eval_caption)

    p = sub.add_parser("eval-retrieval", help="cross-modal retrieval eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", default="5,10,20,30")
    p.add_argument("--query-field", choices=("caption", "lyrics"),
                   default="caption")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval_retrieval)

    p = sub.add_parser("sweep-alpha", help="train/eval over an alpha grid")
    p.add_argument("--config", default=None)
    p.add_argument("--alphas", default=None,
                   help="comma-separated; default "
                        + ",".join(f"{a:g}" for a in TR.DEFAULT_ALPHAS))
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--n-instances", type=int, default=480)
    p.add_argument("--n-topics", type=int, default=6)
    p.add_argument("--n-eval", type=int, default=120)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--confusion", type=float, default=0.5)
    p.add_argument("--decoys", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_override_flags(p, "train")
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("verify-ib",
                       help="independent vs matched pairing experiment")
    p.add_argument("--config", default=None)
    p.add_argument("--n-instances", type=int, default=2000)
    p.add_argument("--n-topics", type=int, default=10)
    p.add_argument("--n-eval", type=int, default=300)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--confusion", type=float, default=0.3)
    p.add_argument("--decoys", type=int, default=0)
    p.add_argument("--out", default=None)
    _add_override_flags(p, "train")
    p.set_defaults(func=cmd_verify_ib)

    p = sub.add_parser("export-attention",
                       help="dump one instance's fusion attention as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("grad-check",
                       help="finite-difference audit of all gradients")
    p.add_argument("--dims", type=int, default=8)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        json.dump({"error": str(exc), "type": "CliError"}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    except (OSError, ValueError, KeyError) as exc:
        json.dump({"error": str(exc), "type": type(exc).__name__},
                  sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
