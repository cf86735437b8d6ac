"""Command-line interface: one subcommand per pipeline stage plus ``serve``.

Every command writes ``command.json`` next to its output with the resolved
arguments, seed and checksums of inputs and outputs. Module errors exit with
status 1 and a JSON error line on stderr; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import builder, data, evaluator, retrieval, synthetic, trainer
from .scorer import ScorerParams, encode_states
from .tree import TreeIndex

log = logging.getLogger("tdm")

COMMAND_MANIFEST = "command.json"


class CommandError(Exception):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _files_digest(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for q in sorted(p.rglob("*")):
                if q.is_file() and q.name != COMMAND_MANIFEST:
                    out[str(q.relative_to(p.parent))] = _sha256(q)
        elif p.exists():
            out[p.name] = _sha256(p)
    return out


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise CommandError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise CommandError(f"{what} not found: {p}")
    return p


def write_manifest(directory: Path, command: str, args: dict, inputs, outputs) -> None:
    manifest = {
        "command": command,
        "args": args,
        "inputs": _files_digest(inputs),
        "outputs": _files_digest(outputs),
    }
    directory.mkdir(parents=True, exist_ok=True)
    (directory / COMMAND_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _echo(ns: argparse.Namespace) -> dict:
    """Resolved arguments, with paths reduced to file names so manifests don't depend on locations."""
    out = {}
    for k, v in sorted(vars(ns).items()):
        if k in ("func",):
            continue
        if isinstance(v, str) and ("/" in v or "\\" in v):
            v = Path(v).name
        out[k] = v
    return out


def _save_events(events, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in events:
            f.write(f"{e.user_id}\t{e.item_id}\t{e.category_id}\t{e.behavior_type.value}\t{e.timestamp}\n")


def _load_corpus(path) -> data.Corpus:
    return data.Corpus.load(_require(path, "corpus file"))


def _load_tree(path) -> TreeIndex:
    return TreeIndex.load(_require(path, "tree file"))


def _load_params(path) -> ScorerParams:
    return ScorerParams.load(_require(path, "params file"))


# -- commands --------------------------------------------------------------------


def cmd_synth(ns) -> None:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    if ns.kind == "movielens":
        synthetic.movielens_like(out, n_users=ns.users, n_items=ns.items, seed=ns.seed)
        outputs = [out / "ratings.csv", out / "movies.csv"]
    else:
        pc = synthetic.planted_clusters(
            n_items=ns.items, n_clusters=ns.clusters, n_users=ns.users, seed=ns.seed, scramble_categories=ns.scramble
        )
        _save_events(pc.events, out / "behavior.tsv")
        outputs = [out / "behavior.tsv"]
    write_manifest(out, "synth", _echo(ns), [], outputs)


def cmd_ingest(ns) -> None:
    src = _require(ns.input, "input file")
    cats = None
    if ns.movies:
        cats = data.load_item_categories(_require(ns.movies, "movies file"), seed=ns.seed)
    corpus, events = data.ingest(src, ns.format, min_rating=ns.min_rating, item_categories=cats)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus.save(out / "corpus.tsv")
    _save_events(sorted(events, key=lambda e: (e.user_id, e.timestamp, e.item_id)), out / "events.tsv")
    write_manifest(out, "ingest", _echo(ns), [src] + ([Path(ns.movies)] if ns.movies else []), [out / "corpus.tsv", out / "events.tsv"])
    print(f"{len(corpus)} items, {len(events)} events")


def cmd_split(ns) -> None:
    src = _require(ns.events, "events file")
    _, events = data.ingest(src, "tabular_behavior")
    sp = data.split(events, ns.n_test, ns.n_validation, seed=ns.seed, min_interactions=ns.min_interactions)
    out = Path(ns.out)
    sp.save(out)
    write_manifest(out, "split", _echo(ns), [src], [out / "events.jsonl", out / "users.jsonl"])
    print(f"train {len(sp.train_users)}, validation {len(sp.validation_users)}, test {len(sp.test_users)} users")


def cmd_init_tree(ns) -> None:
    corpus = _load_corpus(ns.corpus)
    tree = builder.init_category_tree(corpus, seed=ns.seed)
    out = Path(ns.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tree.save(out)
    write_manifest(out.parent, "init-tree", _echo(ns), [Path(ns.corpus)], [out])
    print(f"tree with {tree.n_nodes} nodes, {tree.max_level} levels")


def _train_config(ns) -> trainer.TrainConfig:
    values = {}
    if ns.config:
        values.update(trainer.TrainConfig.from_file(_require(ns.config, "config file")).to_dict())
    for item in ns.set or []:
        if "=" not in item:
            raise CommandError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return trainer.TrainConfig.from_mapping(values)


def cmd_train(ns) -> None:
    corpus = _load_corpus(ns.corpus)
    sp = data.DatasetSplit.load(_require(ns.split, "split directory"))
    tree = _load_tree(ns.tree) if ns.tree else None
    cfg = _train_config(ns)
    out = Path(ns.out)
    params, tree, rounds = trainer.joint_train(corpus, sp, cfg, out_dir=out, initial_tree=tree)
    params.save(out / "params.bin")
    tree.save(out / "tree.bin")
    inputs = [Path(ns.corpus), Path(ns.split)] + ([Path(ns.tree)] if ns.tree else [])
    write_manifest(out, "train", {**_echo(ns), "config": cfg.to_dict()}, inputs, [out / "params.bin", out / "tree.bin"])
    for r in rounds:
        print(f"round {r.report.round}: train loss {r.report.train_loss[-1]:.5f}, test loss {r.report.test_loss:.5f}")


def cmd_learn_tree(ns) -> None:
    corpus = _load_corpus(ns.corpus)
    if ns.embeddings:
        emb = builder.load_embeddings_text(_require(ns.embeddings, "embeddings file"))
        inputs = [Path(ns.embeddings)]
    else:
        tree = _load_tree(ns.tree)
        params = _load_params(ns.params)
        emb = builder.leaf_embeddings(tree, params.weights["emb"])
        inputs = [Path(ns.tree), Path(ns.params)]
    diag = builder.BuildDiagnostics()
    new = builder.learn_tree(corpus, emb, seed=ns.seed, options=builder.KMeansOptions(rebalance=ns.rebalance), diagnostics=diag)
    out = Path(ns.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    new.save(out)
    write_manifest(out.parent, "learn-tree", {**_echo(ns), "degenerate_splits": diag.degenerate_splits}, inputs + [Path(ns.corpus)], [out])
    print(f"learnt tree with {new.n_nodes} nodes ({diag.degenerate_splits} degenerate splits)")


def _read_states(path: Path) -> list[data.UserState]:
    states = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                states.append(data.UserState.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise CommandError(f"{path}:{n}: bad user state record") from exc
    return states


def cmd_retrieve(ns) -> None:
    tree, params = _load_tree(ns.tree), _load_params(ns.params)
    if ns.states:
        src = _require(ns.states, "user state file")
        states = _read_states(src)
    else:
        src = _require(ns.split, "split directory")
        sp = data.DatasetSplit.load(src)
        known = [sp.known(u) for u in sp.eval_users(ns.which)]
        states = [
            data.build_user_state(h, h[-1].timestamp, params.config.n_windows, ns.max_behaviors, user_id=h[0].user_id)
            for h in known
        ]
    if ns.mode == "tdm":
        results = retrieval.retrieve_tdm_many(tree, params, states, ns.k, ns.beam_width)
    elif ns.mode == "hs":
        results = retrieval.retrieve_hs_many(tree, params, states, ns.k, ns.beam_width)
    else:
        results = [retrieval.retrieve_bruteforce(tree, params, s, ns.k) for s in states]
    out = Path(ns.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for st, res in zip(states, results):
            for rank, (item, score) in enumerate(res.items, 1):
                f.write(f"{st.user_id}\t{item}\t{score!r}\t{rank}\n")
    stats = out.with_name(out.name + ".stats.json")
    scored = [r.nodes_scored for r in results]
    stats.write_text(
        json.dumps(
            {"users": len(results), "nodes_scored": scored, "truncated": any(r.truncated for r in results)},
            sort_keys=True,
        )
        + "\n"
    )
    write_manifest(out.parent, "retrieve", _echo(ns), [Path(ns.tree), Path(ns.params), src], [out, stats])


def cmd_evaluate(ns) -> None:
    sp = data.DatasetSplit.load(_require(ns.split, "split directory"))
    inputs = [Path(ns.split)]
    if ns.baseline == "popularity":
        ret, name = evaluator.PopularityRetriever(sp), "popularity"
    elif ns.baseline == "cooccurrence":
        ret, name = evaluator.CooccurrenceRetriever(sp, ns.n_neighbors), "cooccurrence"
    else:
        tree, params = _load_tree(ns.tree), _load_params(ns.params)
        ret = evaluator.TreeRetriever(tree, params, ns.max_behaviors, mode=ns.mode)
        name = f"tdm-{params.config.variant}" + ("-hs" if ns.mode == "hs" else "")
        inputs += [Path(ns.tree), Path(ns.params)]
    report = evaluator.evaluate(ret, sp, ns.M, ns.filters, which=ns.which, oversample=ns.oversample, config={"method": name})
    out = Path(ns.out)
    report.write(out, name)
    write_manifest(out, "evaluate", _echo(ns), inputs, [out / "report.jsonl", out / "report.txt"])
    print(report.to_table(name), end="")


def cmd_serve(ns) -> None:
    from .service import RetrievalService, make_server

    svc = RetrievalService(_load_tree(ns.tree), _load_params(ns.params), ns.max_behaviors, ns.event_log)
    server = make_server(svc, ns.host, ns.port)
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdm", description="Tree-based deep retrieval pipeline")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic behavior log")
    s.add_argument("kind", choices=["movielens", "planted"])
    s.add_argument("--out", required=True)
    s.add_argument("--users", type=int, default=6040)
    s.add_argument("--items", type=int, default=3706)
    s.add_argument("--clusters", type=int, default=64)
    s.add_argument("--scramble", action="store_true", help="planted: categories carry no cluster information")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="parse a raw log into corpus.tsv and events.tsv")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=["movielens_ratings", "tabular_behavior"], default="movielens_ratings")
    s.add_argument("--movies", help="MovieLens movies.csv for genre categories")
    s.add_argument("--min-rating", type=float, default=4.0)
    s.add_argument("--seed", type=int, default=0, help="seed for picking one genre per movie")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("split", help="user-level train/validation/test split")
    s.add_argument("--events", required=True, help="events.tsv from ingest")
    s.add_argument("--n-test", type=int, required=True)
    s.add_argument("--n-validation", type=int, required=True)
    s.add_argument("--min-interactions", type=int, default=data.DEFAULT_MIN_INTERACTIONS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("init-tree", help="category-based initial tree")
    s.add_argument("--corpus", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_tree)

    s = sub.add_parser("train", help="train the scorer (and alternate with tree learning)")
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--tree", help="initial tree (default: category tree)")
    s.add_argument("--config", help="key=value or JSON config file")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("learn-tree", help="rebuild the tree from leaf embeddings")
    s.add_argument("--corpus", required=True)
    s.add_argument("--tree")
    s.add_argument("--params")
    s.add_argument("--embeddings", help="text file 'item<TAB>v1,...,vd' instead of --tree/--params")
    s.add_argument("--rebalance", choices=["margin", "random"], default="margin")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_learn_tree)

    s = sub.add_parser("retrieve", help="batch retrieval for user states")
    s.add_argument("--tree", required=True)
    s.add_argument("--params", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--states", help="JSON lines of user states")
    src.add_argument("--split", help="use the known half of each evaluation user in this split")
    s.add_argument("--which", choices=["test", "validation"], default="test")
    s.add_argument("--max-behaviors", type=int, default=data.DEFAULT_MAX_BEHAVIORS)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--beam-width", type=int)
    s.add_argument("--mode", choices=["tdm", "hs", "bruteforce"], default="tdm")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("evaluate", help="Precision/Recall/F-measure/Novelty at M")
    s.add_argument("--split", required=True)
    s.add_argument("--tree")
    s.add_argument("--params")
    s.add_argument("--baseline", choices=["popularity", "cooccurrence"])
    s.add_argument("--n-neighbors", type=int, default=50)
    s.add_argument("--mode", choices=["tdm", "hs"], default="tdm")
    s.add_argument("--M", type=int, default=10)
    s.add_argument("--filters", nargs="+", choices=evaluator.FILTER_MODES, default=list(evaluator.FILTER_MODES))
    s.add_argument("--which", choices=["test", "validation"], default="test")
    s.add_argument("--oversample", type=int, default=4)
    s.add_argument("--max-behaviors", type=int, default=data.DEFAULT_MAX_BEHAVIORS)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("serve", help="run the retrieval service")
    s.add_argument("--tree", required=True)
    s.add_argument("--params", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8080)
    s.add_argument("--max-behaviors", type=int, default=data.DEFAULT_MAX_BEHAVIORS)
    s.add_argument("--event-log", help="append-only state log, replayed on start")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        ns.func(ns)
    except (CommandError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "command": ns.command}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
