"""``diffclip`` command-line entry point.

Subcommands: gen-data, train, eval, audit, attn-map. Failures print a single
``ERROR <code>: <message>`` line: 2 missing file, 3 bad config, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as runcfg
from .attnmap import export as export_attention
from .audit import audit_shape
from .data import Corpus, DatasetError, TokenizeError, build_corpus, class_names, manifest_hash
from .encoders import ModelConfigError, ModelWeights
from .evaluate import (ClipModel, ProbeHyper, class_prompts, linear_probe, probe_split,
                       retrieval_recall, write_report, zero_shot_classify)
from .train import NumericalError, train
from .tensor import NonFiniteError

EXIT_MISSING = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4

TASKS = ("zeroshot", "retrieval", "probe", "fewshot")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _print_resolved(**items) -> None:
    for k, v in items.items():
        print(f"{k}={v}")


def _fresh_path(path: Path, overwrite: bool) -> None:
    if path.exists() and not overwrite:
        raise CliError(EXIT_CONFIG, f"{path} exists; pass --overwrite to replace it")


def cmd_gen_data(args) -> int:
    fractions = tuple(float(x) for x in args.fractions.split(","))
    _print_resolved(n=args.n, seed=args.seed, out=args.out, fractions=args.fractions)
    out = Path(args.out)
    _fresh_path(out / "manifest.tsv", args.overwrite)
    build_corpus(out, args.n, fractions, args.seed)
    print(f"manifest_sha256={manifest_hash(out)}")
    return 0


def cmd_train(args) -> int:
    overrides = runcfg.parse_overrides(args.overrides)
    if args.variant:
        overrides["variant"] = args.variant
    cfg = runcfg.resolve(args.config, overrides)
    sys.stdout.write(runcfg.dump(cfg))
    if not (Path(cfg.dataset) / "manifest.tsv").exists():
        raise FileNotFoundError(f"dataset {cfg.dataset} has no manifest.tsv")
    _fresh_path(cfg.checkpoint_path, args.overwrite)
    result = train(cfg, progress=lambda e, l: print(f"epoch={e} loss={l:.6f}", flush=True))
    print(f"checkpoint={result.checkpoint}")
    print(f"metrics={result.metrics}")
    print(f"final_loss={result.final_loss!r}")
    return 0


def evaluate_task(model, corpus: Corpus, task: str, split: str = "test",
                  shots=(1, 5), ks=(1, 5)) -> dict[str, object]:
    """Metrics for one evaluation task on an in-memory corpus."""
    if task == "zeroshot":
        idx = corpus.indices(split)
        res = zero_shot_classify(model, corpus.images[idx], class_prompts(class_names()),
                                 corpus.labels(idx))
        return {"task": task, "split": split, "num_images": len(idx), "num_classes": 20,
                "zeroshot_accuracy": res.accuracy}
    if task == "retrieval":
        idx = corpus.indices(split)
        out = {"task": task, "split": split, "num_pairs": len(idx)}
        out.update(retrieval_recall(model, corpus.images[idx], corpus.captions(idx), ks))
        return out
    if task in ("probe", "fewshot"):
        idx = corpus.indices(None)
        feats = model.encode_images(corpus.images[idx])
        labels = corpus.labels(idx)
        tr, te = probe_split(labels)
        out = {"task": task, "num_train": len(tr), "num_test": len(te)}
        if task == "probe":
            out["probe_accuracy"] = linear_probe(feats[tr], labels[tr], feats[te], labels[te])
        else:
            for k in shots:
                out[f"fewshot_{k}_accuracy"] = linear_probe(
                    feats[tr], labels[tr], feats[te], labels[te], shots=k, hyper=ProbeHyper())
        return out
    raise CliError(EXIT_CONFIG, f"unknown task {task!r}; choose from {', '.join(TASKS)}")


def cmd_eval(args) -> int:
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval_{args.task}.txt")
    _print_resolved(checkpoint=args.checkpoint, dataset=args.dataset, task=args.task,
                    split=args.split, out=out)
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    corpus = Corpus(args.dataset)
    model = ClipModel(ModelWeights.load(args.checkpoint), corpus.vocab)
    metrics = evaluate_task(model, corpus, args.task, args.split)
    write_report(out, metrics)
    for k, v in metrics.items():
        print(f"{k}={v}")
    return 0


def cmd_audit(args) -> int:
    _print_resolved(shape=args.shape, lambda_per_head=args.per_head, towers=args.towers)
    res = audit_shape(args.shape, lambda_per_head=args.per_head, towers=args.towers)
    report = {"shape": args.shape, **res.as_dict()}
    for k, v in report.items():
        print(f"{k}={v}")
    print(f"overhead={res.percent:.5f}%")
    if args.out:
        write_report(args.out, report)
    return 0


def cmd_attn_map(args) -> int:
    _print_resolved(checkpoint=args.checkpoint, dataset=args.dataset, image_id=args.image_id,
                    query=args.query, out=args.out)
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} not found")
    corpus = Corpus(args.dataset)
    if not 0 <= args.image_id < len(corpus):
        raise CliError(EXIT_CONFIG, f"image id {args.image_id} outside 0..{len(corpus) - 1}")
    model = ModelWeights.load(args.checkpoint)
    image = corpus.images[args.image_id]
    pgm, csv, heat = export_attention(model, image, args.query, corpus.vocab, args.out)
    peak = np.unravel_index(int(np.argmax(heat)), heat.shape)
    print(f"pgm={pgm}")
    print(f"csv={csv}")
    print(f"peak_patch={peak[0]},{peak[1]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffclip", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic shapes corpus")
    g.add_argument("--n", type=int, default=4000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--fractions", default="0.8,0.1,0.1")
    g.add_argument("--overwrite", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--config")
    t.add_argument("--variant", choices=["clip", "diffclip", "diffclip-star", "diffclip-dagger",
                                         "diffclip_star", "diffclip_dagger"])
    t.add_argument("--overwrite", action="store_true")
    t.add_argument("overrides", nargs="*", help="key=value overrides")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--task", required=True, choices=TASKS)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit", help="count extra parameters of differential attention")
    a.add_argument("--shape", default="b16", choices=["toy", "b16"])
    a.add_argument("--per-head", action="store_true", help="one lambda set per head")
    a.add_argument("--towers", default="both", choices=["both", "vision"])
    a.add_argument("--out")
    a.set_defaults(func=cmd_audit)

    m = sub.add_parser("attn-map", help="export a query-conditioned attention heatmap")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--dataset", required=True)
    m.add_argument("--image-id", type=int, required=True)
    m.add_argument("--query", required=True)
    m.add_argument("--out", required=True, help="output prefix; .pgm and .csv are appended")
    m.set_defaults(func=cmd_attn_map)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except FileNotFoundError as exc:
        code, msg = EXIT_MISSING, str(exc)
    except (NumericalError, NonFiniteError, OverflowError, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except (runcfg.ConfigError, ModelConfigError, DatasetError, TokenizeError, ValueError) as exc:
        code, msg = EXIT_CONFIG, str(exc)
    print(f"ERROR {code}: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
