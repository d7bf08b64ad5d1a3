"""Command-line interface.

Every artifact-producing command writes its outputs plus one
``manifest.json`` into ``--out``. ``privrep replay MANIFEST --out DIR``
reruns a command from its manifest; outputs are byte-identical.

Exit codes: 0 success, 2 schema/parse error, 3 invalid parameters,
4 training divergence.
"""

import argparse
import datetime
import hashlib
import json
import logging
import math
import os
import sys
from importlib import metadata

from . import kernels
from .audit import (
    PrivacyReport, ProbeConfig, evaluate_attacker, export_representations, fairness_audit,
    train_attacker,
)
from .data import SyntheticConfig, generate_synthetic, load_corpus, write_corpus
from .dp import PrivacyParams
from .errors import ParameterError, PrivrepError, SchemaError
from .experiments import EPSILON_GRID, MU_GRID, ExperimentConfig, format_rows, sweep
from .model import ModelBundle
from .pipeline import (
    privatize_batch, read_labels, read_reps, read_user_masks, server_classify_batch,
    write_labels, write_predictions, write_reps,
)
from .training import TrainConfig, train_robust, train_standard, write_metrics

logger = logging.getLogger("privrep")

MANIFEST = "manifest.json"
INPUT_ARGS = ("corpus", "bundle", "reps", "labels", "mask_file", "init_from")
NOT_CONFIG = {"command", "out", "config", "func", "verbose"}


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _floats(text):
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _names(text):
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _privacy(args, required=True):
    eps = getattr(args, "epsilon", None)
    if eps is None:
        if required:
            raise ParameterError("--epsilon is required")
        return None
    return PrivacyParams(eps, args.mu)


def _load_bundle(path):
    return ModelBundle.load(path)


def _out(args, name):
    return os.path.join(args.out, name)


# --- commands -------------------------------------------------------------

def cmd_synth_data(args):
    cfg = SyntheticConfig(n=args.n, num_classes=args.num_classes, rho=args.rho, skew=args.skew,
                          doc_length=args.doc_length,
                          minority_topic_purity=args.minority_topic_purity,
                          num_entities=args.num_entities, seed=args.seed)
    corpus, records = generate_synthetic(cfg)
    write_corpus(_out(args, "corpus.jsonl"), records)
    with open(_out(args, "synthetic.json"), "w", encoding="utf-8") as fh:
        json.dump(corpus.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(records)} records")
    return ["corpus.jsonl", "synthetic.json"]


def _corpus(args, vocabulary=None):
    return load_corpus(args.corpus, attributes=args.attributes, entities=args.entities or (),
                       seed=args.seed, vocab_cap=args.vocab_cap, vocabulary=vocabulary)


def cmd_train(args):
    corpus = _corpus(args)
    privacy = None
    if args.robust:
        privacy = _privacy(args, required=False) or PrivacyParams.non_private(args.mu)
    elif args.epsilon is not None:
        raise ParameterError("--epsilon only applies with --robust")
    init = _load_bundle(args.init_from) if args.init_from else None
    if init is not None and init.vocabulary != corpus.vocabulary:
        raise SchemaError("--init-from bundle was trained on a different vocabulary")
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      privacy=privacy, seed=args.seed, embed_dim=args.embed_dim,
                      rep_dim=args.rep_dim, rep_dropout=args.rep_dropout,
                      train_word_dropout=args.train_word_dropout,
                      dataset_id=os.path.basename(args.corpus), init_from=init)
    bundle = train_robust(corpus, cfg) if args.robust else train_standard(corpus, cfg)
    bundle.save(_out(args, "model.ckpt"))
    write_metrics(_out(args, "metrics.jsonl"), bundle.metadata["history"])
    for row in bundle.metadata["history"]:
        print(json.dumps(row, sort_keys=True))
    return ["model.ckpt", "metrics.jsonl"]


def cmd_privatize(args):
    params = _privacy(args)
    bundle = _load_bundle(args.bundle)
    corpus = _corpus(args, vocabulary=bundle.vocabulary)
    docs = corpus.documents if args.split == "all" else corpus.split(args.split)
    masks = read_user_masks(args.mask_file) if args.mask_file else None
    outputs = []
    for view in range(args.views):
        name = "reps.jsonl" if view == 0 else f"reps.view{view}.jsonl"
        write_reps(_out(args, name), privatize_batch(docs, bundle.extractor, params, args.seed,
                                                     view, masks))
        outputs.append(name)
    write_labels(_out(args, "labels.jsonl"), docs, corpus.split_of)
    if masks:
        print("warning: user-specified masks; the dropout amplification bound assumes random masks",
              file=sys.stderr)
    print(f"privatized {len(docs)} records x {args.views} view(s); "
          f"epsilon={params.epsilon} mu={params.mu} epsilon_effective={params.epsilon_effective:.6f}")
    return outputs + ["labels.jsonl"]


def cmd_classify(args):
    bundle = _load_bundle(args.bundle)
    preds = server_classify_batch(read_reps(args.reps[0]), bundle.head)
    write_predictions(_out(args, "predictions.jsonl"), preds)
    print(f"classified {len(preds)} records")
    return ["predictions.jsonl"]


def cmd_attack(args):
    if not args.attribute and not args.entity:
        raise ParameterError("give at least one --attribute or --entity")
    if args.epsilon is None:
        raise ParameterError("--epsilon is required (use 'inf' for non-private representations)")
    labels = read_labels(args.labels)
    views = [read_reps(p) for p in args.reps]
    eps = views[0][0].epsilon if views and views[0] else None
    if eps is not None and not (eps == args.epsilon or (math.isinf(eps) and math.isinf(args.epsilon))):
        raise ParameterError(f"--epsilon {args.epsilon} does not match the file's epsilon {eps}")

    def part(reps, split):
        return [r for r in reps if labels.get(r.record_id, {}).get("split") == split]

    train_views = [part(v, "train") for v in views]
    dev, test = part(views[0], "dev"), part(views[0], "test")
    results = {}
    for name in list(args.attribute or []) + list(args.entity or []):
        y = {rid: row["attributes"][name] for rid, row in labels.items()
             if name in row["attributes"]}
        probe = train_attacker(train_views, y, name, dev,
                               ProbeConfig(epochs=args.epochs, learning_rate=args.lr,
                                           seed=args.seed))
        results[name] = evaluate_attacker(probe, test, y)
    first = views[0][0] if views[0] else None
    report = PrivacyReport.build(
        {a: results[a] for a in args.attribute or []}, {e: results[e] for e in args.entity or []},
        epsilon=None if first is None else first.epsilon, mu=None if first is None else first.mu,
        epsilon_effective=None if first is None else first.epsilon_effective,
        user_masks=any(r.mask_source == "user" for r in views[0]))
    with open(_out(args, "privacy_report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(report.table())
    return ["privacy_report.json"]


def cmd_fairness(args):
    if args.epsilon is None and not args.non_private:
        raise ParameterError("give --epsilon (privatized inference) or --non-private")
    params = None if args.non_private else _privacy(args)
    bundle = _load_bundle(args.bundle)
    corpus = _corpus(args, vocabulary=bundle.vocabulary)
    docs = corpus.split(args.split) if args.split != "all" else corpus.documents
    report = fairness_audit(bundle, docs, params, args.seed)
    with open(_out(args, "fairness_report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.export:
        reps = privatize_batch(docs, bundle.extractor, params, args.seed) if params else None
        if reps is None:
            from .pipeline import non_private_representations, wrap_non_private
            reps = wrap_non_private(docs, non_private_representations(bundle, docs))
        var = args.export
        export_representations(_out(args, "representations.jsonl"), reps,
                               {d.record_id: d.subgroups.get(var) for d in docs})
    print(report.table())
    return ["fairness_report.json"] + (["representations.jsonl"] if args.export else [])


def cmd_sweep(args):
    if (args.epsilon_grid is None) == (args.mu_grid is None):
        raise ParameterError("give exactly one of --epsilon-grid or --mu-grid")
    corpus = _corpus(args)
    cfg = ExperimentConfig(epochs=args.epochs, robust_epochs=args.robust_epochs,
                           learning_rate=args.lr, rep_dim=args.rep_dim, views=args.views)
    kind = "epsilon" if args.epsilon_grid is not None else "mu"
    grid = args.epsilon_grid if kind == "epsilon" else args.mu_grid
    rows = sweep(corpus, kind, grid, args.seed, args.fixed_epsilon, cfg)
    table = format_rows(rows)
    with open(_out(args, "sweep.tsv"), "w", encoding="utf-8") as fh:
        fh.write(table)
    sys.stdout.write(table)
    return ["sweep.tsv"]


def cmd_replay(args):
    with open(args.manifest, encoding="utf-8") as fh:
        manifest = json.load(fh)
    for path, digest in manifest.get("inputs", {}).items():
        if not os.path.exists(path):
            raise SchemaError(f"manifest input {path} is missing")
        if _digest(path) != digest:
            raise SchemaError(f"manifest input {path} changed since the recorded run")
    argv = [manifest["command"], "--out", args.out]
    parser = build_parser()
    sub = _subparsers(parser)[manifest["command"]]
    for action in sub._actions:
        if action.dest not in manifest["config"] or action.dest in NOT_CONFIG:
            continue
        value = manifest["config"][action.dest]
        if value is None or value is False:
            continue
        flag = action.option_strings[-1]
        if value is True:
            argv.append(flag)
        elif isinstance(value, list):
            if action.type in (_floats, _names):
                argv += [flag, ",".join(_fmt(v) for v in value)]
            else:
                for v in value:
                    argv += [flag, _fmt(v)]
        else:
            argv += [flag, _fmt(value)]
    return main(argv)


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


# --- parser ---------------------------------------------------------------

def _add_corpus(p, required=True):
    p.add_argument("--corpus", required=required, help="line-delimited JSON corpus")
    p.add_argument("--attributes", type=_names, default=None,
                   help="comma-separated private attributes (default: all in the file)")
    p.add_argument("--entities", type=_names, default=None,
                   help="comma-separated binary entity-presence attributes")
    p.add_argument("--vocab-cap", type=int, default=10_000)


def _add_privacy(p):
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--mu", type=float, default=0.0)


def build_parser():
    parser = argparse.ArgumentParser(prog="privrep", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text, out=True):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        if out:
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--config", help="flat key=value file; command-line flags win")
            p.add_argument("--seed", type=int, default=0)
        return p

    p = command("synth-data", cmd_synth_data, "generate a synthetic corpus")
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--rho", type=float, default=0.9)
    p.add_argument("--skew", type=float, default=0.5)
    p.add_argument("--doc-length", type=int, default=12)
    p.add_argument("--minority-topic-purity", type=float, default=None)
    p.add_argument("--num-entities", type=int, default=0)

    p = command("train", cmd_train, "train a split model (standard or robust)")
    _add_corpus(p)
    _add_privacy(p)
    p.add_argument("--robust", action="store_true")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--rep-dim", type=int, default=64)
    p.add_argument("--rep-dropout", type=float, default=0.0)
    p.add_argument("--train-word-dropout", action="store_true")
    p.add_argument("--init-from", default=None, help="warm-start from this model bundle")

    p = command("privatize", cmd_privatize, "client side: privatize documents")
    _add_corpus(p)
    _add_privacy(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", choices=["all", "train", "dev", "test"], default="all")
    p.add_argument("--views", type=int, default=1, help="independent noise draws to emit")
    p.add_argument("--mask-file", default=None)

    p = command("classify", cmd_classify, "server side: classify privatized representations")
    p.add_argument("--reps", action="append", required=True)
    p.add_argument("--bundle", required=True)

    p = command("attack", cmd_attack, "train attribute-inference probes")
    p.add_argument("--reps", action="append", required=True,
                   help="privatized representations; repeat for extra noise views")
    p.add_argument("--labels", required=True)
    p.add_argument("--attribute", action="append")
    p.add_argument("--entity", action="append")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.01)

    p = command("fairness", cmd_fairness, "subgroup accuracy audit")
    _add_corpus(p)
    _add_privacy(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--non-private", action="store_true")
    p.add_argument("--split", choices=["all", "train", "dev", "test"], default="test")
    p.add_argument("--export", default=None, metavar="VARIABLE",
                   help="also export representations tagged with this subgroup variable")

    p = command("sweep", cmd_sweep, "privacy/utility sweep over an epsilon or mu grid")
    _add_corpus(p)
    p.add_argument("--epsilon-grid", type=_floats, default=None)
    p.add_argument("--mu-grid", type=_floats, default=None)
    p.add_argument("--fixed-epsilon", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--robust-epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--rep-dim", type=int, default=64)
    p.add_argument("--views", type=int, default=None,
                   help="training noise views for the probe (default: one per probe epoch)")

    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.set_defaults(func=cmd_replay)
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def read_config(path):
    """Flat ``key=value`` lines; ``#`` comments. Sections or dotted keys are rejected."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") or "=" not in line:
                raise SchemaError(f"{path}:{lineno}: expected flat key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key or "." in key or "[" in key or value.startswith(("{", "[")):
                raise SchemaError(f"{path}:{lineno}: nested configuration is not supported")
            out[key.replace("-", "_")] = value
    return out


def _apply_config(sub, args, argv):
    """Fill values from ``--config`` for flags not given on the command line."""
    cfg = read_config(args.config)
    given = {a.dest for a in sub._actions for s in a.option_strings
             if any(x == s or x.startswith(s + "=") for x in argv)}
    actions = {a.dest: a for a in sub._actions}
    for key, raw in cfg.items():
        if key not in actions or key in NOT_CONFIG:
            raise ParameterError(f"unknown configuration key {key!r}")
        if key in given:
            continue
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(action, argparse._AppendAction):
            value = _names(raw)
        else:
            try:
                value = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ParameterError(f"bad value for {key}: {exc}") from None
        setattr(args, key, value)


def _write_manifest(args, outputs, started):
    config = {k: v for k, v in sorted(vars(args).items()) if k not in NOT_CONFIG}
    inputs = {}
    for key in INPUT_ARGS:
        value = config.get(key)
        for path in (value if isinstance(value, list) else [value]):
            if path:
                path = os.path.abspath(path)
                inputs[path] = _digest(path)
    for key in INPUT_ARGS:
        value = config.get(key)
        if isinstance(value, list):
            config[key] = [os.path.abspath(p) for p in value]
        elif value:
            config[key] = os.path.abspath(value)
    manifest = {
        "command": args.command, "config": config, "seed": getattr(args, "seed", None),
        "version": _version(), "kernel_backend": kernels.BACKEND, "inputs": inputs,
        "outputs": outputs, "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(_out(args, MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    raise TypeError(type(x))


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            return args.func(args)
        if args.config:
            _apply_config(_subparsers(parser)[args.command], args, argv)
        os.makedirs(args.out, exist_ok=True)
        started = datetime.datetime.now(datetime.timezone.utc).isoformat()
        outputs = args.func(args)
        _write_manifest(args, outputs, started)
    except PrivrepError as exc:
        print(f"privrep: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"privrep: error: {exc}", file=sys.stderr)
        return SchemaError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
