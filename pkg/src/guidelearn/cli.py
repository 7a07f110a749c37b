"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from guidelearn.agents.backends import BackendError, ContentError, RemoteChatBackend, ScriptedBackend
from guidelearn.agents.embeddings import HashedEmbedder, RemoteEmbedder
from guidelearn.agents.templates import TemplateError
from guidelearn.core import TaskSpec, load_task, validate_task
from guidelearn.engine import AuditLog, Backends, active_select, predict, train
from guidelearn.store import GuidelineStore, StoreFormatError, load, save, score
from guidelearn.synthlab import (
    SyntheticAgents,
    demo_world,
    experiment_hyper,
    load_world,
    run_experiment,
    synthetic_task,
)
from guidelearn.tasks.event import EventRecord, load_event_dataset
from guidelearn.tasks.metrics import classification_prf, role_level_eval
from guidelearn.tasks.relation import DataError, load_instances, load_relation_dataset, read_jsonl

log = logging.getLogger("guidelearn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_BACKEND = 0, 1, 2, 3

HYPER_FLAGS = {
    "epochs": int, "top_k": int, "retrieval_threshold": float, "sc_trials": int,
    "sc_temperature": float, "discard_threshold": float, "min_evidence": int,
    "selection_budget": int, "dup_threshold": float, "reply_retries": int,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    task: str | None = None
    store: str | None = None
    backend: str = "remote"
    embedding: str = "hashed"
    endpoint: str | None = None
    model: str | None = None
    embedding_endpoint: str | None = None
    embedding_model: str | None = None
    embedding_dim: int = 256
    api_key_env: str = "LLM_API_KEY"
    seed: int = 0
    parallelism: int = 1
    output_dir: str = "guidelearn-out"
    on_error: str = "abort"
    hyper: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        values: dict[str, Any] = {}
        if getattr(args, "config", None):
            with open(args.config, encoding="utf-8") as fh:
                values = yaml.safe_load(fh) or {}
            if not isinstance(values, dict):
                raise DataError(f"{args.config}: config must be a mapping")
        names = {f.name for f in fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        hyper = dict(values.pop("hyper", {}) or {})
        for name in names - {"hyper"}:
            v = getattr(args, name, None)
            if v is not None:
                values[name] = v
        for name in HYPER_FLAGS:
            v = getattr(args, name, None)
            if v is not None:
                hyper[name] = v
        cfg = cls(**values, hyper=hyper)
        cfg.check()
        return cfg

    def check(self) -> None:
        kind = self.backend.split(":", 1)[0]
        if kind not in ("remote", "scripted", "synthetic"):
            raise UsageError(f"unknown backend {self.backend!r}")
        if kind in ("scripted", "synthetic") and not self.backend.partition(":")[2]:
            raise UsageError(f"backend {kind} needs a path: {kind}:<file>")
        if kind == "remote" and not (self.endpoint and self.model):
            raise UsageError("remote backend needs --endpoint and --model")
        if self.embedding not in ("hashed", "remote"):
            raise UsageError(f"unknown embedding {self.embedding!r}")
        if self.embedding == "remote" and not (self.embedding_endpoint and self.embedding_model):
            raise UsageError("remote embedding needs --embedding-endpoint and --embedding-model")
        if kind != "synthetic" and not self.task:
            raise UsageError("--task is required unless the backend is synthetic")
        if self.parallelism < 1:
            raise UsageError("--parallelism must be >= 1")

    def echo(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def build(cfg: RunConfig) -> tuple[TaskSpec, Backends]:
    kind, _, ref = cfg.backend.partition(":")
    if kind == "synthetic":
        world = demo_world() if ref == "demo" else load_world(ref)
        task = load_task(cfg.task) if cfg.task else synthetic_task(world)
        backends = SyntheticAgents(world).backends(cfg.seed, cfg.parallelism)
    else:
        task = load_task(cfg.task)
        if kind == "scripted":
            chat = ScriptedBackend.from_file(ref)
        else:
            chat = RemoteChatBackend(cfg.endpoint, cfg.model, api_key_env=cfg.api_key_env,
                                     max_parallel=cfg.parallelism)
        if cfg.embedding == "remote":
            embedder = RemoteEmbedder(cfg.embedding_endpoint, cfg.embedding_model, cfg.embedding_dim,
                                      api_key_env=cfg.api_key_env)
        else:
            embedder = HashedEmbedder(cfg.embedding_dim)
        backends = Backends(reasoner=chat, embedder=embedder, seed=cfg.seed, parallelism=cfg.parallelism)
    try:
        task.hyper = task.hyper.replace(**cfg.hyper)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    defects = validate_task(task)
    if defects:
        raise DataError("invalid task: " + "; ".join(d.message for d in defects))
    return task, backends


def open_store(cfg: RunConfig, task: TaskSpec, backends: Backends) -> tuple[GuidelineStore, Path]:
    path = Path(cfg.store) if cfg.store else Path(cfg.output_dir) / "store.jsonl"
    dim = backends.embedder.dimension
    if path.exists():
        store = load(path)
        if store.dimension != dim:
            raise DataError(f"store {path} has embedding dimension {store.dimension}, "
                            f"but the embedding provider has dimension {dim}")
    else:
        store = GuidelineStore(dim, task.task_id)
    return store, path


def _dataset_kind(task: TaskSpec) -> str:
    return {"re": "re", "trigger": "trigger"}.get(task.kind, "generic")


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {path}")
    return p


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")


def _fresh(path: Path) -> Path:
    if path.exists():
        path.unlink()
    return path


def write_manifest(out: Path, command: str, config: dict[str, Any], outputs: list[Path]) -> None:
    digests = {}
    for p in outputs:
        key = p.relative_to(out).as_posix() if p.is_relative_to(out) else str(p)
        digests[key] = hashlib.sha256(p.read_bytes()).hexdigest()
    manifest = {"command": command, "config": config, "outputs": digests}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _outcome_record(o) -> dict[str, Any]:
    rec = {"id": o.instance_id, "answer": o.answer, "distribution": o.distribution,
           "references": o.references, "retrieved": o.retrieved}
    if o.error:
        rec["error"] = o.error
    return rec


# -- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = RunConfig.from_args(args)
    data_path = _need_file(args.dataset, "dataset")
    task, backends = build(cfg)
    dataset = load_instances(data_path, _dataset_kind(task))
    store, store_path = open_store(cfg, task, backends)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with AuditLog(_fresh(out / "audit.jsonl")) as audit:
        store, reports = train(dataset, store, task, backends, audit=audit, on_error=cfg.on_error)
    save(store, store_path)
    _write_jsonl(out / "epoch_reports.jsonl", [r.to_dict() for r in reports])
    write_manifest(out, "train", cfg.echo(), [store_path, out / "epoch_reports.jsonl", out / "audit.jsonl"])
    for r in reports:
        print(f"epoch {r.epoch}: {r.n_correct}/{r.n_instances} correct, +{r.rules_added} rules, "
              f"{r.rules_merged} merged, {r.rules_pruned} pruned")
    print(f"store: {len(store)} guidelines -> {store_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = RunConfig.from_args(args)
    data_path = _need_file(args.dataset, "dataset")
    task, backends = build(cfg)
    dataset = load_instances(data_path, _dataset_kind(task))
    store, _ = open_store(cfg, task, backends)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with AuditLog(_fresh(out / "audit.jsonl")) as audit:
        outcomes = predict(dataset, store, task, backends, audit=audit)
    _write_jsonl(out / "predictions.jsonl", [_outcome_record(o) for o in outcomes])
    write_manifest(out, "predict", cfg.echo(), [out / "predictions.jsonl", out / "audit.jsonl"])
    failed = [o.instance_id for o in outcomes if not o.ok]
    print(f"{len(outcomes) - len(failed)} predictions written to {out / 'predictions.jsonl'}")
    if failed:
        print(f"{len(failed)} instances failed: {', '.join(failed[:10])}", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


def cmd_select(args) -> int:
    if args.budget is not None and args.budget < 1:
        raise UsageError("--budget must be positive")
    cfg = RunConfig.from_args(args)
    pool_path = _need_file(args.pool, "pool")
    task, backends = build(cfg)
    pool = load_instances(pool_path, _dataset_kind(task))
    budget = args.budget or task.hyper.selection_budget
    if budget > len(pool):
        raise DataError(f"budget {budget} exceeds pool size {len(pool)}")
    store, _ = open_store(cfg, task, backends)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with AuditLog(_fresh(out / "audit.jsonl")) as audit:
        sel = active_select(pool, budget, store, task, backends, audit=audit)
    _write_jsonl(out / "confidence_table.jsonl", sel.table)
    (out / "selected.json").write_text(json.dumps(sel.selected, indent=2) + "\n", encoding="utf-8")
    write_manifest(out, "select", cfg.echo(),
                   [out / "selected.json", out / "confidence_table.jsonl", out / "audit.jsonl"])
    print(f"selected {len(sel.selected)} of {len(pool)} -> {out / 'selected.json'}")
    if sel.failed:
        print(f"{len(sel.failed)} pool instances failed and were excluded", file=sys.stderr)
    return EXIT_OK


def _load_predictions(path: Path, key: str) -> dict[str, Any]:
    preds = {}
    for lineno, rec in read_jsonl(path):
        if "id" not in rec or key not in rec:
            raise DataError(f"{path}:{lineno}: prediction record needs 'id' and '{key}'")
        preds[str(rec["id"])] = rec[key]
    return preds


def cmd_eval(args) -> int:
    gold_path = _need_file(args.gold, "gold file")
    pred_path = _need_file(args.pred, "predictions file")
    if args.task_kind == "re":
        gold_recs = load_relation_dataset(gold_path)
        preds = _load_predictions(pred_path, "answer")
        unknown = sorted(set(preds) - {r.id for r in gold_recs})
        if unknown:
            raise DataError(f"predictions for unknown ids: {unknown[:5]}")
        classes = list(dict.fromkeys(r.label for r in gold_recs if r.label is not None))
        negative = None if args.score_other else args.negative
        report = classification_prf({r.id: r.label for r in gold_recs if r.label is not None},
                                    preds, negative=negative, classes=sorted(classes))
        summary = report["micro"]
    else:
        docs = load_event_dataset(gold_path)
        raw = _load_predictions(pred_path, "records")
        gold = {d.id: [e.as_tuple() for e in d.gold_events] for d in docs}
        pred = {}
        for doc_id, recs in raw.items():
            try:
                pred[doc_id] = [EventRecord(str(r["event_type"]), {k: str(v) for k, v in (r.get("roles") or {}).items()
                                                                   if v not in (None, "", "-")}).as_tuple() for r in recs]
            except (KeyError, TypeError, AttributeError) as exc:
                raise DataError(f"{pred_path}: bad records for {doc_id} ({exc})") from exc
        try:
            report = role_level_eval(gold, pred)
        except KeyError as exc:
            raise DataError(str(exc)) from exc
        summary = report["overall"]["all"]
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"P={summary['precision']:.4f} R={summary['recall']:.4f} F1={summary['f1']:.4f}")
    if args.task_kind == "ee":
        for split in ("single", "multi"):
            s = report["overall"][split]
            print(f"  {split}: P={s['precision']:.4f} R={s['recall']:.4f} F1={s['f1']:.4f}")
    return EXIT_OK


def cmd_guidelines(args) -> int:
    path = _need_file(args.store, "store")
    store = load(path)
    if args.action == "list":
        print("id\tscore\tretrieved\thit\twrong\ttext")
        for g in store:
            text = g.text if len(g.text) <= 60 else g.text[:57] + "..."
            print(f"{g.id}\t{score(g):.3f}\t{g.n_retrieve}\t{g.n_hit}\t{g.n_wrong}\t{text}")
    elif args.action == "show":
        if args.id is None:
            raise UsageError("show needs a guideline id")
        if args.id not in store.entries:
            raise DataError(f"no guideline with id {args.id}")
        g = store[args.id]
        print(json.dumps({"id": g.id, "text": g.text, "score": score(g), "n_retrieve": g.n_retrieve,
                          "n_hit": g.n_hit, "n_wrong": g.n_wrong, "created_epoch": g.created_epoch},
                         indent=2, ensure_ascii=False))
    else:
        removed = store.prune(args.threshold, args.min_evidence)
        save(store, path)
        for gid in removed:
            print(gid)
        print(f"removed {len(removed)}, {len(store)} remain", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args) -> int:
    world = demo_world() if args.world == "demo" else load_world(_need_file(args.world, "world file"))
    probs = {k: getattr(args, k) for k in ("p0", "p1") if getattr(args, k) is not None}
    if probs:
        world = dataclasses.replace(world, **probs)
    overrides = {k: getattr(args, k) for k in ("epochs", "sc_trials", "discard_threshold") if getattr(args, k) is not None}
    result = run_experiment(world, args.train, args.test, experiment_hyper(**overrides),
                            noise=args.noise, seed=args.seed)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = out / "experiment.json"
    report.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out, "simulate", {"world": args.world, "train": args.train, "test": args.test,
                                     "noise": args.noise, "seed": args.seed, **overrides}, [report])
    print(f"baseline accuracy: {result.baseline_accuracy:.3f}")
    print(f"trained accuracy:  {result.trained_accuracy:.3f}")
    print(f"lift: {100 * result.lift:+.1f} points ({result.coverage:.0%} of test instances retrieved a guideline)")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with run options; flags override it")
    p.add_argument("--task", help="task spec file")
    p.add_argument("--store", help="guideline store file (created if missing)")
    p.add_argument("--backend", help="remote | scripted:<fixture.jsonl> | synthetic:<world.yaml|demo>")
    p.add_argument("--embedding", choices=["hashed", "remote"])
    p.add_argument("--endpoint", help="chat-completion URL for the remote backend")
    p.add_argument("--model")
    p.add_argument("--embedding-endpoint", dest="embedding_endpoint")
    p.add_argument("--embedding-model", dest="embedding_model")
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    p.add_argument("--api-key-env", dest="api_key_env", help="environment variable holding the credential")
    p.add_argument("--seed", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    for name, typ in HYPER_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)


def make_parser() -> argparse.ArgumentParser:
    # no prefix matching: a partial flag must never be mistaken for --api-key-env
    parser = _Parser(prog="guidelearn", allow_abbrev=False,
                     description="Learn and apply guidelines for in-context extraction.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub_kw = {"allow_abbrev": False}

    p = sub.add_parser("train", **sub_kw, help="learn guidelines from a labeled dataset")
    p.add_argument("dataset")
    p.add_argument("--on-error", dest="on_error", choices=["abort", "skip"])
    _run_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", **sub_kw, help="predict with the current guidelines")
    p.add_argument("dataset")
    _run_options(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("select", **sub_kw, help="pick the least confident pool instances for annotation")
    p.add_argument("pool")
    p.add_argument("--budget", type=int)
    _run_options(p)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", **sub_kw, help="score predictions against gold")
    p.add_argument("gold")
    p.add_argument("pred")
    p.add_argument("--task-kind", dest="task_kind", choices=["re", "ee"], required=True)
    p.add_argument("--negative", default="Other", help="negative relation class (re)")
    p.add_argument("--score-other", dest="score_other", action="store_true",
                   help="give the negative class positive credit too")
    p.add_argument("--output-dir", dest="output_dir", default="guidelearn-out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("guidelines", **sub_kw, help="inspect or prune a store")
    p.add_argument("store")
    p.add_argument("action", choices=["list", "show", "prune"])
    p.add_argument("id", nargs="?", type=int)
    p.add_argument("--threshold", type=float, default=0.0)
    p.add_argument("--min-evidence", dest="min_evidence", type=int, default=1)
    p.set_defaults(func=cmd_guidelines)

    p = sub.add_parser("simulate", **sub_kw, help="run the synthetic baseline-vs-trained experiment")
    p.add_argument("world", help="world file, or 'demo' for the built-in world")
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=200)
    p.add_argument("--epochs", type=int)
    p.add_argument("--sc-trials", dest="sc_trials", type=int)
    p.add_argument("--discard-threshold", dest="discard_threshold", type=float)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--p0", type=float)
    p.add_argument("--p1", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", dest="output_dir", default="guidelearn-out")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"guidelearn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BackendError, ContentError) as exc:
        print(f"guidelearn: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (DataError, StoreFormatError, TemplateError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"guidelearn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
