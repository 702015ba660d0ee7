"""Command-line entry point.

Configuration precedence for ``train`` (lowest first): ``--config`` file (JSON or ``key = value`` lines),
``EDGEKIT_<KEY>`` environment variables, ``--set key=value`` overrides.
Every failure exits nonzero with one line ``edgekit: error[<kind>]: <reason>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence


from . import __version__
from .conllu import ConlluError, Treebank, read_treebank
from .edge_model import StaleSupportError, encode_gold_edges, precompute_support
from .inference import (
    MissingArtifactError,
    Parser,
    load_index,
    load_summary,
    save_index,
    save_summary,
)
from .training import Checkpoint, TrainConfig, TrainingError, train

ENV_PREFIX = "EDGEKIT_"
log = logging.getLogger("edgekit")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# ---------------------------------------------------------------------------
# config


def _coerce(field: dataclasses.Field, raw: str):
    target = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", str(field.type))
    if raw.lower() in ("none", "null") and "None" in target:
        return None
    if target.startswith("bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise CliError("config", f"{field.name}: expected a boolean, got {raw!r}")
    try:
        if target.startswith("int"):
            return int(raw)
        if target.startswith("float"):
            return float(raw)
    except ValueError:
        raise CliError("config", f"{field.name}: cannot parse {raw!r} as {target}") from None
    return raw


def _read_config_text(text: str, path: str, fields: dict) -> dict:
    """JSON object, or ``key = value`` lines (``#`` comments allowed)."""
    if text.lstrip().startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise CliError("config", f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("config", f"{path}:{lineno}: expected key = value")
        key, raw = (x.strip() for x in line.split("=", 1))
        if key not in fields:
            raise CliError("config", f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(fields[key], raw.strip('"'))
    return values


def resolve_config(path: str | None, overrides: Sequence[str], environ=os.environ) -> TrainConfig:
    """Merge file < environment < overrides into a TrainConfig."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise CliError("io", f"cannot read config {path}: {e.strerror}") from None
        values.update(_read_config_text(text, path, fields))
        unknown = set(values) - set(fields)
        if unknown:
            raise CliError("config", f"{path}: unknown keys {sorted(unknown)}")
    for name, f in fields.items():
        raw = environ.get(ENV_PREFIX + name.upper())
        if raw is not None:
            values[name] = _coerce(f, raw)
    for item in overrides:
        if "=" not in item:
            raise CliError("config", f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in fields:
            raise CliError("config", f"unknown config key {key!r}")
        values[key] = _coerce(fields[key], raw.strip())
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as e:
        raise CliError("config", str(e)) from None


# ---------------------------------------------------------------------------
# helpers


def _exists(path: str | None, what: str) -> str | None:
    if path is not None and not Path(path).exists():
        raise CliError("io", f"{what} not found: {path}")
    return path


def _treebank(path: str, what: str, annotated: bool = True) -> Treebank:
    _exists(path, what)
    return read_treebank(path, require_annotation=annotated)


def _checkpoint(path: str) -> Checkpoint:
    _exists(path, "checkpoint")
    return Checkpoint.load(path)


def _artifacts(prefix: str | None):
    """Load ``<prefix>.summary`` / ``<prefix>.index`` when present."""
    if prefix is None:
        return None, None
    s, i = Path(prefix + ".summary"), Path(prefix + ".index")
    if not s.exists() and not i.exists():
        raise CliError("missing-artifact", f"no artifacts at {prefix}.summary/.index; run `edgekit precompute`")
    return (load_summary(s) if s.exists() else None), (load_index(i) if i.exists() else None)


def _default_mode(mode: str | None, *artifacts) -> str:
    if mode:
        return mode
    return "fast" if any(a is not None for a in artifacts) else "weight"


def _write(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, args.set)
    tr = _treebank(args.train, "training treebank")
    dv = _treebank(args.dev, "dev treebank")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def report(rec):
        log.info("epoch %(epoch)d  loss %(loss).4f  dev %(dev_score).2f", rec)

    ck = train(tr, dv, cfg, log_path=out / "train.log.jsonl", on_epoch=report)
    ck.save(out / "model.ckpt")
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "task": cfg.task, "best_epoch": ck.epoch,
                      "dev_score": ck.dev_score}))
    return 0


def cmd_precompute(args) -> int:
    ck = _checkpoint(args.checkpoint)
    tr = _treebank(args.train, "training treebank")
    if not set(tr.labels) <= set(ck.model.labels):
        raise CliError("data", f"training labels {sorted(set(tr.labels) - set(ck.model.labels))} "
                               "unknown to the checkpoint vocabulary")
    summary, index = precompute_support(ck.model, tr, args.kind, args.batch_size)
    prefix = args.out or str(Path(args.checkpoint).with_suffix(""))
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    save_summary(summary, prefix + ".summary")
    save_index(index, prefix + ".index")
    print(json.dumps({"summary": prefix + ".summary", "index": prefix + ".index", "kind": summary.kind,
                      "edges": len(index), "param_hash": summary.param_hash}))
    return 0


def _parser(args) -> Parser:
    edge = _checkpoint(args.checkpoint)
    if edge.config.task != "edge":
        raise CliError("model", f"{args.checkpoint} is a {edge.config.task}-task checkpoint, need an edge model")
    es, ei = _artifacts(args.artifacts)
    label = ls = li = None
    if getattr(args, "label_checkpoint", None):
        label = _checkpoint(args.label_checkpoint).model
        ls, li = _artifacts(args.label_artifacts)
    mode = _default_mode(getattr(args, "mode", None), es, ei, ls, li)
    return Parser(edge.model, label, edge_summary=es, edge_index=ei, label_summary=ls, label_index=li,
                  mode=mode, decoder=getattr(args, "decoder", "greedy"),
                  single_root=getattr(args, "single_root", False))


def cmd_parse(args) -> int:
    parser = _parser(args)
    tb = _treebank(args.input, "input treebank", annotated=False)
    out = parser.parse_treebank(tb, args.batch_size) if len(tb) else tb
    from .conllu import write_conllu

    _write(args.output, write_conllu(out))
    return 0


def cmd_explain(args) -> int:
    parser = _parser(args)
    tb = _treebank(args.input, "input treebank")
    index = parser.edge_index
    if index is None:
        raise CliError("missing-artifact", "explain needs an explain index; run `edgekit precompute`")
    edges = [(k, t.head, t.index) for k, s in enumerate(tb.sentences) for t in s.tokens]
    lines = []
    if edges:
        rats = parser.explain(tb.sentences, edges, args.k, "edge", args.batch_size)
        for r in rats:
            s = tb.sentences[r.sentence]
            lines.append(json.dumps({
                "query": {"sentence": s.sent_id or str(r.sentence), "head_form": s.form_at(r.head),
                          "dep_form": s.form_at(r.dep), "j": r.head, "i": r.dep},
                "neighbors": [{
                    "train_sentence_id": index.sent_ids[index.sent_idx[n.support_id]],
                    "j": int(index.heads[n.support_id]), "i": int(index.deps[n.support_id]),
                    "head_form": index.head_forms[n.support_id], "dep_form": index.dep_forms[n.support_id],
                    "gold_label": index.labels[index.label_ids[n.support_id]],
                    "similarity": n.similarity,
                } for n in r.neighbors],
            }, ensure_ascii=False))
    _write(args.output, "".join(line + "\n" for line in lines))
    return 0


def _finish(reports, args, failed: bool) -> int:
    from .evaluation import emit_report

    if args.out:
        emit_report(reports, args.out, args.stem)
    for r in reports:
        print(json.dumps(r.to_json()))
    return 1 if failed else 0


def cmd_evaluate(args) -> int:
    from .evaluation import attachment_scores, mean_scores

    gold = _treebank(args.gold, "gold treebank")
    reports = [attachment_scores(_treebank(p, "prediction"), gold, args.exclude_punct, name=Path(p).name)
               for p in args.pred]
    if len(reports) > 1:
        reports.append(mean_scores(reports))
    final = reports[-1]
    failed = (args.min_uas is not None and final.uas < args.min_uas) or \
             (args.min_las is not None and final.las < args.min_las)
    return _finish(reports, args, failed)


def cmd_subclass(args) -> int:
    from .evaluation import identical_subclass_test, mean_scores

    tr = _treebank(args.train, "training treebank")
    dv = _treebank(args.dev, "dev treebank")
    reports = []
    for path in args.checkpoint:
        ck = _checkpoint(path)
        if ck.label_supervision:
            raise CliError("model", f"{path} was trained with label supervision; the subclass test needs an "
                                    "edge-task checkpoint")
        summary, index = precompute_support(ck.model, tr, args.kind, args.batch_size)
        mode = "fast" if ck.config.scoring == "instance" or args.instance_inference else "weight"
        parser = Parser(ck.model, edge_summary=summary, edge_index=index, mode=mode)
        reports.append(identical_subclass_test(parser, dv, summary.kind, args.batch_size, name=Path(path).name))
    if len(reports) > 1:
        reports.append(mean_scores(reports))
    failed = args.min_las is not None and reports[-1].las < args.min_las
    return _finish(reports, args, failed)


def cmd_hubness(args) -> int:
    from .evaluation import hubness

    ck = _checkpoint(args.checkpoint)
    tr = _treebank(args.train, "training treebank")
    queries = _treebank(args.queries, "query treebank")
    _, index = precompute_support(ck.model, tr, args.kind, args.batch_size)
    kind = args.kind or ck.model.cfg.similarity
    q = encode_gold_edges(ck.model, queries.sentences, args.batch_size)
    rep = hubness(index, q, kind, args.k, args.top, name=f"hubness-{kind}")
    ok = rep.conserved()
    print(f"conservation: sum N_{rep.k} = {int(rep.counts.sum())}, k x queries = "
          f"{min(rep.k, len(index)) * rep.n_queries}: {'ok' if ok else 'VIOLATED'}", file=sys.stderr)
    if not ok:
        raise CliError("internal", "hubness conservation violated")
    return _finish([rep], args, False)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="edgekit",
        description="Instance-based dependency parsing with explainable and fast inference.",
        epilog="Config precedence for train: --config file < EDGEKIT_<KEY> environment < --set key=value.",
    )
    p.add_argument("--version", action="version", version=f"edgekit {__version__}")
    p.add_argument("--threads", type=int, default=int(os.environ.get(ENV_PREFIX + "THREADS", "0")) or None,
                   help="BLAS threads (1 gives bit-reproducible runs)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    t = sub.add_parser("train", help="train an edge or label model")
    t.add_argument("--train", required=True)
    t.add_argument("--dev", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--config")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("precompute", help="build the support summary and explain index")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--train", required=True)
    c.add_argument("--kind", choices=("dot", "cos"))
    c.add_argument("--out", help="artifact prefix (default: checkpoint path without suffix)")
    c.set_defaults(func=cmd_precompute)

    def model_args(sp, labels: bool):
        sp.add_argument("--checkpoint", required=True, help="edge-task checkpoint")
        sp.add_argument("--artifacts", help="edge artifact prefix from precompute")
        if labels:
            sp.add_argument("--label-checkpoint")
            sp.add_argument("--label-artifacts")

    r = sub.add_parser("parse", help="parse a CoNLL-U file")
    model_args(r, True)
    r.add_argument("--input", required=True)
    r.add_argument("--output", default="-")
    r.add_argument("--mode", choices=("fast", "explainable", "weight"))
    r.add_argument("--decoder", choices=("greedy", "cle"), default="greedy")
    r.add_argument("--single-root", action="store_true")
    r.set_defaults(func=cmd_parse)

    e = sub.add_parser("explain", help="nearest training edges for each edge in the input")
    model_args(e, False)
    e.add_argument("--input", required=True)
    e.add_argument("--output", default="-")
    e.add_argument("-k", "--k", type=int, default=5)
    e.set_defaults(func=cmd_explain, mode="explainable")

    v = sub.add_parser("evaluate", aliases=["eval"], help="UAS/LAS against gold")
    v.add_argument("--gold", required=True)
    v.add_argument("--pred", required=True, nargs="+", help="one or more predictions (scores are averaged)")
    v.add_argument("--exclude-punct", action="store_true")
    v.add_argument("--min-uas", type=float)
    v.add_argument("--min-las", type=float)
    v.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("subclass", help="identical subclass test")
    s.add_argument("--checkpoint", required=True, nargs="+")
    s.add_argument("--train", required=True)
    s.add_argument("--dev", required=True)
    s.add_argument("--kind", choices=("dot", "cos"))
    s.add_argument("--instance-inference", action="store_true",
                   help="parse weight-trained models with instance scoring")
    s.add_argument("--min-las", type=float)
    s.set_defaults(func=cmd_subclass)

    h = sub.add_parser("hubness", help="k-occurrence of training edges")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--train", required=True)
    h.add_argument("--queries", required=True, help="treebank whose gold edges are the queries")
    h.add_argument("--kind", choices=("dot", "cos"))
    h.add_argument("-k", "--k", type=int, default=10)
    h.add_argument("--top", type=int, default=100)
    h.set_defaults(func=cmd_hubness)

    for sp in (t, c, r, e, v, s, h):
        sp.add_argument("--batch-size", type=int, default=64)
    for sp in (v, s, h):
        sp.add_argument("--out", help="report directory")
        sp.add_argument("--stem", default="report")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except CliError as e:
        kind, msg = e.kind, str(e)
    except ConlluError as e:
        kind, msg = "data", str(e)
    except (MissingArtifactError, StaleSupportError) as e:
        kind, msg = "missing-artifact" if isinstance(e, MissingArtifactError) else "stale", str(e)
    except TrainingError as e:
        kind, msg = "training", str(e)
    except (ValueError, KeyError) as e:
        kind, msg = "data", str(e).strip("'\"")
    except OSError as e:
        kind, msg = "io", f"{e.filename}: {e.strerror}" if e.filename else str(e)
    print(f"edgekit: error[{kind}]: {' '.join(msg.split())}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
