"""``threadloom`` command-line entry point.

Exit codes: 0 success, 1 domain/IO error, 2 usage error.  Data goes to files
(or stdout where noted); diagnostics go to stderr as ``key=value`` log lines.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import detection_config, load_config, pipeline_config, topic_config
from .corpus import Corpus, load_assignments, load_corpus, write_assignments
from .disentangle import calibrate_threshold, detect_stream, threshold_grid
from .errors import ThreadloomError
from .evalharness import latency_compare, pairwise_f1
from .interleave import InterleaveConfig, build_dataset, write_dataset
from .lm_core import NgramModel, NgramScorer, train_ngram
from .pipeline import PipelineState, process_message, respond_next, run_batch
from .priority import load_weights
from .remote_lm import EndpointConfig, RemoteScorer

logger = logging.getLogger("threadloom")


class _KeyValueFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        msg = record.getMessage()
        if "=" not in msg.split(" ", 1)[0]:
            msg = f'msg="{msg}"'
        return f"level={record.levelname.lower()} logger={record.name} {msg}"


def _setup_logging(verbose: int) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KeyValueFormatter())
    root = logging.getLogger("threadloom")
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING)
    root.propagate = False


def _write_json(obj, path: str | Path | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- arguments

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")


def _add_scorer(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scorer", choices=["ngram", "remote"], help="language-model backend")
    p.add_argument("--lm", help="n-gram model JSON (trained on the input when omitted)")
    p.add_argument("--endpoint", help="base URL of a completion API (remote scorer)")
    p.add_argument("--model", help="model name sent to the remote endpoint")


def _add_detection(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threshold", type=float, help="new-thread perplexity threshold")
    p.add_argument("--max-len", type=int, help="messages per thread before topic compression")
    p.add_argument("--conditional", action="store_true", default=None,
                   help="score only the candidate message's tokens given the thread")
    p.add_argument("--speaker-prefix", action="store_true", default=None,
                   help="prefix 'speaker: ' to each message when scoring")


def _add_priority(p: argparse.ArgumentParser) -> None:
    p.add_argument("--weights", help="keyword weight table (JSON object)")
    p.add_argument("--alpha", type=float, help="priority gained per second of waiting")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="threadloom", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"threadloom {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>")
    sub.required = True

    p = sub.add_parser("train-lm", help="train the reference n-gram model")
    p.add_argument("--corpus", required=True, help="message JSONL")
    p.add_argument("--order", type=int)
    p.add_argument("--k", type=float, help="add-k smoothing constant")
    p.add_argument("--out", required=True, help="model JSON to write")
    _add_common(p)

    p = sub.add_parser("interleave", help="build instruction-format training pairs")
    p.add_argument("--input", required=True, help="thread-labelled message JSONL")
    p.add_argument("--output", required=True, help="dataset JSONL to write")
    p.add_argument("--min-group", type=int)
    p.add_argument("--max-group", type=int)
    _add_common(p)

    p = sub.add_parser("calibrate-threshold", help="grid-search the new-thread threshold")
    p.add_argument("--input", required=True, help="thread-labelled stream JSONL")
    p.add_argument("--grid", default="2:200:log", help="lo:hi:log|lin[:n] (default %(default)s)")
    p.add_argument("--refine", type=int, default=1, help="refinement rounds (default %(default)s)")
    p.add_argument("--report", help="JSON report path (default stdout)")
    _add_scorer(p)
    _add_detection(p)
    _add_common(p)

    p = sub.add_parser("detect", help="assign each message of a stream to a thread")
    p.add_argument("--input", required=True, help="message stream JSONL, in arrival order")
    p.add_argument("--output", required=True, help="assignments JSONL to write")
    p.add_argument("--state", help="also write a pipeline state snapshot for `respond`")
    _add_scorer(p)
    _add_detection(p)
    _add_priority(p)
    _add_common(p)

    p = sub.add_parser("respond", help="generate a reply for the most urgent thread(s)")
    p.add_argument("--state", required=True, help="state snapshot (updated in place)")
    p.add_argument("--last-n", type=int, help="messages per prompt")
    p.add_argument("--max-tokens", type=int, help="tokens to generate")
    p.add_argument("--temperature", type=float)
    p.add_argument("--count", type=int, default=1, help="threads to answer; 0 drains the queue")
    p.add_argument("--output", help="responses JSONL (default stdout)")
    _add_scorer(p)
    _add_priority(p)
    _add_common(p)

    p = sub.add_parser("run", help="detect, prioritise and respond over a whole stream")
    p.add_argument("--input", required=True, help="message stream JSONL")
    p.add_argument("--out-dir", required=True, help="directory for all outputs")
    p.add_argument("--last-n", type=int)
    p.add_argument("--max-tokens", type=int)
    _add_scorer(p)
    _add_detection(p)
    _add_priority(p)
    _add_common(p)

    p = sub.add_parser("eval", help="score assignments against gold thread labels")
    p.add_argument("--pred", required=True, help="assignments JSONL")
    p.add_argument("--gold", required=True, help="labelled message JSONL")
    p.add_argument("--report", help="JSON report path (default stdout)")
    _add_common(p)

    p = sub.add_parser("bench", help="compare scoring latency with generation latency")
    p.add_argument("--samples", required=True, help="message JSONL whose texts are benchmark samples")
    p.add_argument("--max-tokens", type=int, default=64)
    p.add_argument("--report", help="JSON report path (default stdout)")
    _add_scorer(p)
    _add_common(p)
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "seed": get("seed"),
        "lm.scorer": get("scorer"),
        "lm.model": get("lm"),
        "lm.order": get("order"),
        "lm.k": get("k"),
        "remote.endpoint": get("endpoint"),
        "remote.model": get("model"),
        "detection.threshold": get("threshold"),
        "detection.max_len": get("max_len"),
        "detection.conditional": get("conditional"),
        "detection.speaker_prefix": get("speaker_prefix"),
        "priority.weights": get("weights"),
        "priority.alpha": get("alpha"),
        "generation.last_n": get("last_n"),
        "generation.max_tokens": get("max_tokens"),
        "generation.temperature": get("temperature"),
        "interleave.min_group": get("min_group"),
        "interleave.max_group": get("max_group"),
    }


def _make_scorer(cfg: dict, texts=None, cache: bool = True):
    lm = cfg["lm"]
    if lm["scorer"] == "remote":
        r = cfg["remote"]
        if not r["endpoint"] or not r["model"]:
            raise ThreadloomError("remote scorer needs --endpoint and --model")
        return RemoteScorer(
            EndpointConfig.from_env(
                r["endpoint"], r["model"],
                timeout_ms=int(r["timeout_ms"]), max_retries=int(r["max_retries"]),
                temperature=float(cfg["generation"]["temperature"]),
            )
        )
    if lm["model"]:
        model = NgramModel.load(lm["model"])
    elif texts:
        logger.info("event=train_lm source=input order=%d k=%g", lm["order"], lm["k"])
        model = train_ngram(texts, int(lm["order"]), float(lm["k"]))
    else:
        raise ThreadloomError("n-gram scorer needs --lm (or an input to train on)")
    return NgramScorer(model, seed=int(cfg["seed"]), cache_size=65536 if cache else 0)


# ---------------------------------------------------------------- commands

def cmd_train_lm(args, cfg) -> None:
    corpus = load_corpus(args.corpus)
    model = train_ngram(corpus.texts(), int(cfg["lm"]["order"]), float(cfg["lm"]["k"]))
    model.save(args.out)
    logger.info("event=train_lm texts=%d vocab=%d out=%s", len(corpus), model.vocab_size, args.out)


def cmd_interleave(args, cfg) -> None:
    corpus = load_corpus(args.input)
    icfg = InterleaveConfig(
        seed=int(cfg["seed"]),
        min_group=int(cfg["interleave"]["min_group"]),
        max_group=int(cfg["interleave"]["max_group"]),
    )
    pairs = build_dataset(corpus, icfg)
    write_dataset(pairs, args.output)
    logger.info("event=interleave threads=%d pairs=%d out=%s",
                len({m.gold_thread for m in corpus}), len(pairs), args.output)


def cmd_calibrate(args, cfg) -> None:
    corpus = load_corpus(args.input, sort=False)
    scorer = _make_scorer(cfg, corpus.texts())
    grid = threshold_grid(args.grid)
    best, curve = calibrate_threshold(
        corpus, grid, scorer, detection_config(cfg), topic_config(cfg), refine=args.refine
    )
    _write_json({"threshold": best, "curve": [{"threshold": t, "accuracy": a} for t, a in curve]}, args.report)


def cmd_detect(args, cfg) -> None:
    corpus = load_corpus(args.input, sort=False)
    scorer = _make_scorer(cfg, corpus.texts())
    if args.state:
        pcfg = pipeline_config(cfg)
        state = PipelineState(pcfg, scorer, load_weights(cfg["priority"]["weights"]))
        if not corpus.is_sorted():
            detect_stream(corpus, pcfg.detection, scorer, pcfg.topic)  # raises with the offending id
        records = [process_message(state, m)[0] for m in corpus]
        state.save(args.state)
    else:
        _, records = detect_stream(corpus, detection_config(cfg), scorer, topic_config(cfg))
    write_assignments(records, args.output)
    logger.info("event=detect messages=%d threads=%d out=%s",
                len(records), len({r.predicted_thread for r in records}), args.output)


def cmd_respond(args, cfg) -> None:
    pcfg = pipeline_config(cfg)
    with open(args.state, encoding="utf-8") as fh:
        raw = json.load(fh)
    if args.alpha is None and "alpha" in raw:
        # keep the alpha the queue keys were computed with
        cfg["priority"]["alpha"] = raw["alpha"]
        pcfg = pipeline_config(cfg)
    texts = [row["text"] for row in raw.get("messages", [])]
    scorer = _make_scorer(cfg, texts)
    state = PipelineState.from_json(raw, pcfg, scorer, load_weights(cfg["priority"]["weights"]))
    n = len(state.queue) if args.count == 0 else min(args.count, len(state.queue))
    events = [respond_next(state, scorer) for _ in range(n)]
    lines = "".join(json.dumps(e.to_json(), ensure_ascii=False) + "\n" for e in events)
    if args.output:
        Path(args.output).write_text(lines, encoding="utf-8")
    else:
        sys.stdout.write(lines)
    state.save(args.state)
    logger.info("event=respond answered=%d remaining=%d", n, len(state.queue))


def cmd_run(args, cfg) -> None:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(args.input, sort=False)
    pcfg = pipeline_config(cfg)
    scorer = _make_scorer(cfg, corpus.texts())
    result = run_batch(corpus, pcfg, scorer, scorer, load_weights(cfg["priority"]["weights"]))
    write_assignments(result.assignments, out / "assignments.jsonl")
    with open(out / "responses.jsonl", "w", encoding="utf-8") as fh:
        for r in result.responses:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
    _write_json(result.metrics, out / "metrics.json")
    _write_json(cfg, out / "config.json")
    result.state.save(out / "state.json")
    _write_json(result.timing, out / "timing.json")
    logger.info("event=run messages=%d threads=%d responses=%d detect_seconds=%.4f respond_seconds=%.4f",
                result.metrics["messages"], result.metrics["threads"], result.metrics["responses"],
                result.timing["detect_seconds"], result.timing["respond_seconds"])


def cmd_eval(args, cfg) -> None:
    gold = load_corpus(args.gold).gold_labels()
    pred = {r.message_id: r.predicted_thread for r in load_assignments(args.pred)}
    metrics = pairwise_f1(pred, gold)
    _write_json(metrics.to_json(), args.report)


def cmd_bench(args, cfg) -> None:
    corpus = load_corpus(args.samples)
    scorer = _make_scorer(cfg, corpus.texts(), cache=False)  # time real scoring, not cache hits
    report = latency_compare(scorer, scorer, corpus.texts(), args.max_tokens)
    _write_json(report.to_json(), args.report)
    logger.info("event=bench samples=%d speed_ratio=%.3f", report.n_samples, report.speed_ratio)


COMMANDS = {
    "train-lm": cmd_train_lm,
    "interleave": cmd_interleave,
    "calibrate-threshold": cmd_calibrate,
    "detect": cmd_detect,
    "respond": cmd_respond,
    "run": cmd_run,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    try:
        cfg = load_config(args.config, _overrides(args))
        COMMANDS[args.command](args, cfg)
    except (ThreadloomError, ValueError, OSError, KeyError) as exc:
        logger.error("event=error command=%s error=%s", args.command, str(exc).replace("\n", " "))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
