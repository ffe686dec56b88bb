"""Command line: ``mdprag {index,synthesize,infer,report,oracle-check,fixture}``."""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from . import metrics
from .config import RunConfig, load_config, write_manifest
from .core import QAInstance
from .fixtures import random_fixtures, write_demo
from .gateway import DEFAULT_INSTRUCTION, BudgetExceeded, EndpointUnreachable, ModelGateway, ScriptMiss
from .inference import InferenceMode, InferenceResult, run_batch
from .retriever import MalformedCorpusLine, SearchIndex, build_index, read_corpus
from .search import MINIMAL, BudgetExhausted, SearchLog, enumerate_all, policy_from_name, synthesize
from .synthesis import all_node_pairs, build_preference_pairs, sentence_wise_pairs, to_imitation_example

logger = logging.getLogger("mdprag")

# model-side failures that discard one question instead of aborting the run
_MODEL_ERRORS = (ScriptMiss, EndpointUnreachable, BudgetExceeded)


class CommandError(Exception):
    pass


def read_questions(path: str | Path) -> list[QAInstance]:
    with open(path, encoding="utf-8") as fh:
        return [QAInstance.from_json(json.loads(line)) for line in fh if line.strip()]


def _config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "corpus": args.corpus,
        "index": args.index,
        "dataset": args.dataset,
        "output": args.output,
        "k": args.k,
        "max_depth": args.max_depth,
        "max_expansions": args.max_expansions,
        "max_model_calls": args.max_model_calls,
        "k1": args.k1,
        "b": args.b,
        "generation_seed": args.seed,
        "sample_seed": args.sample_seed,
        "scripted": args.scripted,
    }
    return load_config(args.config, overrides)


def _require(value: str | None, what: str) -> str:
    if not value:
        raise CommandError(f"no {what} configured")
    if not Path(value).exists():
        raise CommandError(f"{what} not found: {value}")
    return value


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _index_path(cfg: RunConfig) -> Path:
    return Path(cfg.index) if cfg.index else _out_dir(cfg) / "index.bm25"


# -- commands -----------------------------------------------------------------


def cmd_index(args: argparse.Namespace, cfg: RunConfig) -> int:
    corpus = _require(cfg.corpus, "corpus")
    try:
        index = build_index(read_corpus(corpus, strict=not args.lenient), cfg.bm25)
    except MalformedCorpusLine as exc:
        raise CommandError(f"{corpus}: {exc}") from exc
    path = _index_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    index.save(path)
    write_manifest(path.with_suffix(".manifest.json"), "index", cfg, [path], doc_count=index.doc_count)
    print(f"indexed {index.doc_count} documents, avg_doc_length {index.avg_doc_length:.4f} -> {path}")
    return 0


def _load_index(cfg: RunConfig) -> SearchIndex:
    return SearchIndex.load(_require(str(_index_path(cfg)), "index"))


def _sample(questions: list[QAInstance], size: int | None, seed: int) -> list[QAInstance]:
    if size is None or size >= len(questions):
        return questions
    keep = sorted(random.Random(seed).sample(range(len(questions)), size))
    return [questions[i] for i in keep]


def cmd_synthesize(args: argparse.Namespace, cfg: RunConfig) -> int:
    index = _load_index(cfg)
    questions = _sample(read_questions(_require(cfg.dataset, "dataset")), args.sample_size, cfg.sample_seed)
    gateway = cfg.gateway()
    out = _out_dir(cfg)
    stage = args.stage
    name = "stage1" if stage == "imitation" else "stage2"
    data_path = out / f"{name}.jsonl"
    traj_path = out / f"{name}.trajectories.jsonl"
    log_path = out / f"{name}.search_log.jsonl"
    ckpt_path = out / f"{name}.checkpoint.jsonl"

    done: dict[str, str] = {}
    if args.resume and ckpt_path.exists():
        for line in ckpt_path.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            done[rec["id"]] = rec["status"]
    mode = "a" if done else "w"
    policy = policy_from_name(args.policy, cfg.generation_seed) if stage == "imitation" else MINIMAL
    search_kw = dict(k=cfg.k, instruction=DEFAULT_INSTRUCTION, max_doc_chars=cfg.max_doc_chars, seed=cfg.generation_seed)

    interrupted = False
    with open(data_path, mode, encoding="utf-8") as data, open(traj_path, mode, encoding="utf-8") as trajs, open(
        log_path, mode, encoding="utf-8"
    ) as logs, open(ckpt_path, mode, encoding="utf-8") as ckpt:
        try:
            for q in questions:
                if q.id in done:
                    continue
                status, records, traj, log = _synthesize_one(q, gateway, index, cfg, stage, policy, args.pairs_from, search_kw)
                for rec in records:
                    data.write(json.dumps(rec, ensure_ascii=False) + "\n")
                if traj is not None:
                    trajs.write(json.dumps(traj.to_json(), ensure_ascii=False) + "\n")
                logs.write(json.dumps(log.to_json(), ensure_ascii=False) + "\n")
                for fh in (data, trajs, logs):
                    fh.flush()
                ckpt.write(json.dumps({"id": q.id, "status": status, "records": len(records)}) + "\n")
                ckpt.flush()
                done[q.id] = status
                if status != "kept":
                    logger.info("discarded %s (%s)", q.id, status)
        except KeyboardInterrupt:
            interrupted = True
    if interrupted:
        print(f"interrupted after {len(done)} questions; rerun with --resume to continue", file=sys.stderr)
        return 130

    statuses = list(done.values())
    n_records = sum(1 for _ in open(data_path, encoding="utf-8"))
    counts = {
        "questions": len(questions),
        "kept": statuses.count("kept"),
        "discarded": len(statuses) - statuses.count("kept"),
        "discarded_queue_empty": statuses.count("queue_empty"),
        "discarded_budget_exhausted": statuses.count("budget_exhausted"),
        "discarded_model_error": statuses.count("model_error"),
        "records": n_records,
    }
    write_manifest(
        out / f"{name}.manifest.json",
        f"synthesize --stage {stage}",
        cfg,
        [data_path, traj_path, log_path],
        counts=counts,
        policy=policy.name,
        pairs_from=args.pairs_from if stage == "preference" else None,
        sample_size=args.sample_size,
    )
    print(f"{stage}: kept {counts['kept']}/{len(questions)} questions, {n_records} records -> {data_path}")
    return 0


def _synthesize_one(q, gateway, index, cfg, stage, policy, pairs_from, kw):
    log = SearchLog(q.id, policy.name)
    if stage == "preference" and pairs_from != "optimal":
        try:
            candidates = enumerate_all(q, gateway, index, cfg.budget, log=log, **kw)
        except BudgetExhausted as exc:
            log.outcome = "budget_exhausted"
            logger.warning("enumeration failed for %s: %s", q.id, exc)
            return "budget_exhausted", [], None, log
        except _MODEL_ERRORS as exc:
            log.outcome = "model_error"
            logger.warning("model failure on %s: %s", q.id, exc)
            return "model_error", [], None, log
        fn = all_node_pairs if pairs_from == "all-nodes" else sentence_wise_pairs
        pairs = fn(candidates, DEFAULT_INSTRUCTION, cfg.max_doc_chars)
        log.outcome = "found" if pairs else "queue_empty"
        return log.outcome if not pairs else "kept", [p.to_json() for p in pairs], None, log

    try:
        traj = synthesize(q, gateway, index, cfg.budget, policy=policy, log=log, **kw)
    except _MODEL_ERRORS as exc:
        log.outcome = "model_error"
        logger.warning("model failure on %s: %s", q.id, exc)
        return "model_error", [], None, log
    if traj is None:
        return log.outcome, [], None, log
    if stage == "imitation":
        records = [to_imitation_example(traj, DEFAULT_INSTRUCTION, cfg.max_doc_chars).to_json()]
    else:
        records = [p.to_json() for p in build_preference_pairs(q, traj, DEFAULT_INSTRUCTION, cfg.max_doc_chars)]
    return "kept", records, traj, log


_MODES = {m.value: m for m in InferenceMode}


def cmd_infer(args: argparse.Namespace, cfg: RunConfig) -> int:
    index = _load_index(cfg)
    questions = _sample(read_questions(_require(cfg.dataset, "dataset")), args.sample_size, cfg.sample_seed)
    gateway = cfg.gateway()
    mode = _MODES[args.mode]
    results = run_batch(
        questions,
        gateway,
        index,
        jobs=args.jobs,
        mode=mode,
        budget=cfg.budget,
        k=cfg.k,
        role=args.role,
        max_doc_chars=cfg.max_doc_chars,
        seed=cfg.generation_seed,
    )
    out = _out_dir(cfg)
    path = out / f"results.{mode.value}.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
    failed = sum(r.failed for r in results)
    write_manifest(
        out / f"results.{mode.value}.manifest.json",
        f"infer --mode {mode.value}",
        cfg,
        [path],
        mode=mode.value,
        role=args.role,
        counts={"questions": len(results), "failed": failed},
    )
    em = sum(r.correct for r in results) / len(results) if results else 0.0
    print(f"{mode.value}: {len(results)} questions, EM {em:.3f}, {failed} failed -> {path}")
    return 0


def load_results(path: str | Path, golds: dict[str, QAInstance] | None = None) -> list[InferenceResult]:
    golds = golds or {}
    with open(path, encoding="utf-8") as fh:
        return [
            InferenceResult.from_json(obj, golds.get(obj["question_id"]))
            for obj in map(json.loads, filter(str.strip, fh))
        ]


def build_report(
    results: Sequence[InferenceResult],
    golds: dict[str, QAInstance],
    parametric: Sequence[InferenceResult] | None = None,
) -> dict[str, Any]:
    def gold(r: InferenceResult) -> list[str]:
        return list(golds[r.question_id].gold_answers)

    judged = [(r, metrics.exact_match(r.final_answer, gold(r))) for r in results]
    report: dict[str, Any] = {
        "n": len(results),
        "failed": sum(r.failed for r in results),
        "em": sum(ok for _, ok in judged) / len(judged),
        "f1": sum(metrics.token_f1(r.final_answer, gold(r)) for r in results) / len(results),
        "retrieval": metrics.to_json(metrics.retrieval_stats(judged)),
        "decomposition": metrics.to_json(metrics.decomposition_stats(results)),
    }
    if parametric is not None:
        needs = {r.question_id: not metrics.exact_match(r.final_answer, gold(r)) for r in parametric}
        records = [
            metrics.BoundaryRecord(needs[r.question_id], r.n_retrievals >= 1) for r in results if r.question_id in needs
        ]
        report["boundary"] = metrics.to_json(metrics.boundary_metrics(records))
    return report


def format_report(report: dict[str, Any]) -> str:
    ret = report["retrieval"]

    def num(v):
        return "-" if v is None else f"{v:.3f}"

    lines = [
        f"questions           {report['n']} ({report['failed']} failed)",
        f"EM                  {report['em']:.3f}",
        f"F1                  {report['f1']:.3f}",
        f"avg retrievals      all {num(ret['avg_retrievals_all'])}  correct {num(ret['avg_retrievals_correct'])}"
        f"  incorrect {num(ret['avg_retrievals_incorrect'])}",
        f"avg seconds / item  {ret['avg_seconds_per_item']:.4f}",
    ]
    dec = report["decomposition"]
    lines.append("subqueries          " + "  ".join(f"{k}:{v}" for k, v in dec["subquery_histogram"].items()))
    lines.append("retrievals          " + "  ".join(f"{k}:{v}" for k, v in dec["retrieval_histogram"].items()))
    lines.append(f"WH-words / subquery {dec['avg_wh_words']:.3f}   and/or / subquery {dec['avg_conjunctions']:.3f}")
    if "boundary" in report:
        bd = report["boundary"]
        c = bd["confusion"]
        lines.append(
            f"boundary            F1 {bd['f1']:.3f}  Acc {bd['accuracy']:.3f}  BalAcc {bd['balanced_accuracy']:.3f}"
            f"  MCC {bd['mcc']:.3f}  (tp {c['tp']} fp {c['fp']} tn {c['tn']} fn {c['fn']})"
        )
    return "\n".join(lines)


def cmd_report(args: argparse.Namespace, cfg: RunConfig) -> int:
    golds = {q.id: q for q in read_questions(_require(cfg.dataset, "dataset"))}
    results = load_results(_require(args.results, "results file"), golds)
    if not results:
        raise CommandError(f"no results in {args.results}")
    parametric = load_results(_require(args.parametric, "parametric results"), golds) if args.parametric else None
    report = build_report(results, golds, parametric)
    out = _out_dir(cfg)
    path = Path(args.report) if args.report else out / (Path(args.results).stem + ".report.json")
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    inputs = [Path(args.results)] + ([Path(args.parametric)] if args.parametric else [])
    write_manifest(path.with_suffix(".manifest.json"), "report", cfg, [path], inputs=[str(p) for p in inputs])
    print(format_report(report))
    print(f"-> {path}")
    return 0


def oracle_check(count: int, seed: int, max_steps: int = 4) -> dict[str, Any]:
    """Compare best-first search against exhaustive enumeration on random
    scripted fixtures."""
    from .search import SearchBudget

    mismatches = []
    found = 0
    for fx in random_fixtures(seed, count, max_steps):
        budget = SearchBudget(max_depth=fx.max_depth)
        gw = ModelGateway.single(fx.model)
        traj = synthesize(fx.plan.question, gw, fx.index, budget, fx.k)
        every = enumerate_all(fx.plan.question, ModelGateway.single(fx.model), fx.index, budget, fx.k)
        best = min((t.retrieval_count for t in every if t.correct), default=None)
        got = traj.retrieval_count if traj is not None else None
        found += got is not None
        if got != best:
            mismatches.append({"id": fx.plan.question.id, "search": got, "oracle": best})
    return {"fixtures": count, "with_correct": found, "mismatches": mismatches}


def cmd_oracle_check(args: argparse.Namespace, cfg: RunConfig | None) -> int:
    start = time.perf_counter()
    result = oracle_check(args.count, args.seed)
    result["seconds"] = round(time.perf_counter() - start, 3)
    print(json.dumps(result, indent=2))
    return 1 if result["mismatches"] else 0


def cmd_fixture(args: argparse.Namespace, cfg: RunConfig | None) -> int:
    paths = write_demo(args.out_dir, k=args.k or 3, max_depth=args.max_depth or 8)
    for name, p in paths.items():
        print(f"{name:10s} {p}")
    return 0


# -- parser -------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--corpus")
    p.add_argument("--index")
    p.add_argument("--dataset")
    p.add_argument("--output")
    p.add_argument("--scripted", help="scripted-model fixture for both roles")
    p.add_argument("--k", type=int, help="documents per retrieval")
    p.add_argument("--max-depth", type=int)
    p.add_argument("--max-expansions", type=int)
    p.add_argument("--max-model-calls", type=int)
    p.add_argument("--k1", type=float)
    p.add_argument("--b", type=float)
    p.add_argument("--seed", type=int, help="generation seed")
    p.add_argument("--sample-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdprag", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build a BM25 snapshot from a TSV corpus")
    _common(p)
    p.add_argument("--lenient", action="store_true", help="skip malformed lines instead of failing")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("synthesize", help="emit Stage-I or Stage-II training data")
    _common(p)
    p.add_argument("--stage", choices=("imitation", "preference"), required=True)
    p.add_argument("--policy", choices=("minimal", "most", "random"), default="minimal")
    p.add_argument("--pairs-from", choices=("optimal", "all-nodes", "sentence-wise"), default="optimal")
    p.add_argument("--sample-size", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("infer", help="run inference over the dataset")
    _common(p)
    p.add_argument("--mode", choices=tuple(_MODES), default="adaptive")
    p.add_argument("--role", default="target", help="model role to run")
    p.add_argument("--sample-size", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="score a results file")
    _common(p)
    p.add_argument("--results", required=True)
    p.add_argument("--parametric", help="parametric-only results for boundary metrics")
    p.add_argument("--report", help="report JSON path")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("oracle-check", help="best-first search vs exhaustive enumeration on random fixtures")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_check, no_config=True)

    p = sub.add_parser("fixture", help="write the bundled scripted fixture")
    p.add_argument("out_dir")
    p.add_argument("--k", type=int)
    p.add_argument("--max-depth", type=int)
    p.set_defaults(func=cmd_fixture, no_config=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None if getattr(args, "no_config", False) else _config(args)
        return args.func(args, cfg)
    except (CommandError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
