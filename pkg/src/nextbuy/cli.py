"""Command-line entry point.

Every stage reads and writes files in a working directory (``--workdir``),
so the stages chain without extra flags::

    nextbuy generate-data && nextbuy ingest && nextbuy features && nextbuy train-ae \\
        && nextbuy encode && nextbuy train-seqnbt && nextbuy evaluate

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .autoencoder import ae_load, ae_save, train_autoencoder
from .config import RunConfig, load_config
from .datamodel import Dataset, generate_corpus, parse_transactions, preprocess, stats
from .errors import DataError, NextBuyError, NumericError
from .evaluation import format_table
from .experiment import corpus_id, evaluate_length, make_samples, prepare_corpus, run_sweep, split_transactions
from .features import fit_features
from .recommend import decode_prediction, predict_amount, rank_sics, write_merchants
from .seqmodel import SeqTrainConfig, predict_next, seq_load, seq_save, train_seqnbt
from .serving.pipeline import (
    PipelineConfig,
    ScoringService,
    event_to_line,
    online_from_offline,
    parse_event_line,
    publish_catalog,
    serve,
    simulate_events,
    synthetic_merchants,
)
from .serving.stores import OfflineFeatureStore

log = logging.getLogger("nextbuy")

FILES = {
    "raw": "transactions.csv",
    "clean": "clean.csv",
    "merchants": "merchants.csv",
    "offline": "offline.jsonl",
    "ae": "ae.nbt",
    "seq": "seq.nbt",
    "online": "online.json",
    "insights": "insights.jsonl",
    "report": "report.csv",
    "sweep": "sweep.csv",
    "events": "events.txt",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _path(args, name: str, override: str | None = None) -> Path:
    return Path(override) if override else Path(args.workdir) / FILES[name]


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def _load_dataset(path: Path) -> Dataset:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_transactions(fh)
    except FileNotFoundError:
        raise DataError(f"transactions file {path} not found") from None


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} {path} not found; run the earlier pipeline stage first")
    return path


def _pipeline_config(args, cfg: RunConfig) -> PipelineConfig:
    p = cfg.pipeline
    return replace(
        p,
        ae_model=p.ae_model or str(_path(args, "ae")),
        seq_model=p.seq_model or str(_path(args, "seq")),
        offline_store=p.offline_store or str(_path(args, "offline")),
        online_snapshot=p.online_snapshot or str(_path(args, "online")),
        insights=p.insights or str(_path(args, "insights")),
        merchants=p.merchants or str(_path(args, "merchants")),
    )


# ---- subcommands ---------------------------------------------------------------------


def cmd_generate_data(args, cfg: RunConfig) -> int:
    syn = cfg.synthetic
    if args.users:
        syn = replace(syn, n_users=args.users)
    corpus = generate_corpus(syn)
    out = _path(args, "raw", args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        corpus.dataset.to_csv(fh)
    with open(_path(args, "merchants"), "w", encoding="utf-8") as fh:
        write_merchants(synthetic_merchants(corpus), fh)
    _emit({"transactions": str(out), "stats": stats(corpus.dataset).__dict__})
    return 0


def cmd_ingest(args, cfg: RunConfig) -> int:
    raw = _load_dataset(_path(args, "raw", args.input))
    clean = preprocess(raw, args.min_txns, args.min_categories)
    with open(_path(args, "clean", args.out), "w", encoding="utf-8") as fh:
        clean.to_csv(fh)
    _emit({"rejected_rows": raw.n_rejected, "before": stats(raw).__dict__, "after": stats(clean).__dict__})
    return 0


def cmd_features(args, cfg: RunConfig) -> int:
    ds = _load_dataset(_path(args, "clean", args.input))
    features = fit_features(split_transactions(ds), ds)
    with OfflineFeatureStore(_path(args, "offline")) as store:
        store.put_features(features)
        publish_catalog(store, ds)
    _emit({"sics": len(features.table), "users": len(features.aggregates.users), "corpus_id": corpus_id(ds)})
    return 0


def cmd_train_ae(args, cfg: RunConfig) -> int:
    ds = _load_dataset(_path(args, "clean", args.input))
    with OfflineFeatureStore(_require(_path(args, "offline"), "offline store")) as store:
        features = store.load_features()
    ae_cfg = cfg.autoencoder if args.epochs is None else replace(cfg.autoencoder, epochs=args.epochs)
    model, history = train_autoencoder(features.inputs_for(split_transactions(ds)), ae_cfg)
    ae_save(model, str(_path(args, "ae", args.out)))
    _emit({"epochs": len(history), "initial_loss": history[0], "final_loss": history[-1]})
    return 0


def cmd_encode(args, cfg: RunConfig) -> int:
    ds = _load_dataset(_path(args, "clean", args.input))
    ae = ae_load(str(_require(_path(args, "ae"), "autoencoder model")))
    with OfflineFeatureStore(_require(_path(args, "offline"), "offline store")) as store:
        prepared = prepare_corpus(ds, features=store.load_features(), autoencoder=ae)
        store.put_encodings(prepared.encodings)
        online = online_from_offline(store, prepared.features, cfg.pipeline.L)
    online.save(_path(args, "online"))
    _emit({"encoded": len(prepared.encodings), "users_online": len(online.buffers)})
    return 0


def _prepared(args):
    ds = _load_dataset(_path(args, "clean", args.input))
    ae = ae_load(str(_require(_path(args, "ae"), "autoencoder model")))
    with OfflineFeatureStore(_require(_path(args, "offline"), "offline store")) as store:
        features = store.load_features()
    return prepare_corpus(ds, features=features, autoencoder=ae)


def _seq_cfg(args, cfg: RunConfig) -> SeqTrainConfig:
    overrides = {}
    if getattr(args, "L", None) is not None:
        overrides["L"] = args.L
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    return replace(cfg.seqnbt, **overrides)


def cmd_train_seqnbt(args, cfg: RunConfig) -> int:
    prepared = _prepared(args)
    seq_cfg = _seq_cfg(args, cfg)
    train, val, test = make_samples(prepared.histories, seq_cfg.L, seq_cfg.stride)
    if not train:
        raise DataError(f"no training windows for L={seq_cfg.L}")
    model, history = train_seqnbt(train, seq_cfg)
    seq_save(model, str(_path(args, "seq", args.out)))
    _emit({"L": seq_cfg.L, "train": len(train), "validation": len(val), "test": len(test),
           "initial_loss": history[0], "final_loss": history[-1]})
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    prepared = _prepared(args)
    model = seq_load(str(_require(_path(args, "seq"), "sequence model")))
    seq_cfg = _seq_cfg(args, cfg)
    result = evaluate_length(prepared, seq_cfg, cfg.K_values, model=model)
    _path(args, "report", args.report).write_text(result.report.to_records(), encoding="utf-8")
    print(format_table([result.report]), end="")
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    prepared = _prepared(args)
    L_values = tuple(args.L_values) if args.L_values else cfg.L_values
    result = run_sweep(prepared, L_values, cfg.K_values, _seq_cfg(args, cfg))
    records = "".join(
        r.to_records() if i == 0 else r.to_records().split("\n", 1)[1] for i, r in enumerate(result.reports)
    )
    _path(args, "sweep", args.report).write_text(records, encoding="utf-8")
    print(format_table(result.reports), end="")
    if result.reports:
        print(f"best L by seqnbt MAP@1: {result.best_L()}")
    if result.skipped:
        print(f"skipped L values (not enough history): {result.skipped}")
    return 0


def cmd_predict(args, cfg: RunConfig) -> int:
    pcfg = _pipeline_config(args, cfg)
    service = ScoringService.from_config(replace(pcfg, insights=None))
    user = args.card_id
    if service.stores.online.history_len(user) < pcfg.L:
        raise DataError(f"{user} has fewer than L={pcfg.L} encoded transactions")
    enc = predict_next(service.models.seqnbt, service.stores.online.window(user)[-pcfg.L:])
    feats, emb = decode_prediction(enc, service.models.autoencoder, service.models.features.norm)
    ranking = rank_sics(emb, service.models.features.table, args.top_k or pcfg.top_k_sics)
    _emit({"card_id": user, "predicted_amount": predict_amount(feats),
           "sics": [{"sic": s.sic, "score": s.score} for s in ranking]})
    return 0


def _forward(lines, url: str, sink) -> int:
    import httpx

    n_errors = 0
    with httpx.Client(base_url=url, timeout=30.0) as client:
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                parsed = parse_event_line(line, lineno)
            except DataError as exc:
                rec = {"event_id": lineno, "decision": "error", "reason": str(exc)}
            else:
                item, event_id = parsed.item, parsed.event_id
                # line numbers stay local; only record-supplied ids reach the server's duplicate check
                sent_id = event_id if parsed.explicit else None
                if hasattr(item, "latitude"):
                    body = {"card_id": item.card_id, "latitude": item.latitude, "longitude": item.longitude,
                            "timestamp": item.timestamp.isoformat(), "event_id": sent_id}
                    route = "/events"
                else:
                    body = {**item.__dict__, "date": item.date.isoformat(), "event_id": sent_id}
                    route = "/transactions"
                try:
                    resp = client.post(route, json=body)
                except httpx.TransportError as exc:
                    raise NextBuyError(f"cannot reach scoring service at {url}: {exc}") from None
                if resp.status_code == 503:
                    raise NextBuyError(f"scoring service unavailable: {resp.json().get('detail')}")
                if resp.status_code != 200:
                    rec = {"event_id": event_id, "decision": "error", "reason": str(resp.json().get("detail"))}
                else:
                    out = resp.json()
                    rec = {"event_id": event_id, "decision": out["decision"]}
                    if out.get("offer") is not None:
                        rec["offer"] = out["offer"]
                    else:
                        rec["reason"] = out.get("reason")
            n_errors += rec["decision"] == "error"
            sink.write(json.dumps(rec, sort_keys=True) + "\n")
    return n_errors


def cmd_serve(args, cfg: RunConfig) -> int:
    source = sys.stdin if args.events in (None, "-") else open(args.events, encoding="utf-8")
    sink = sys.stdout if args.out in (None, "-") else open(args.out, "w", encoding="utf-8")
    try:
        if args.url:
            _forward(source, args.url, sink)
            return 0
        pcfg = _pipeline_config(args, cfg)
        service = ScoringService.from_config(pcfg)
        summary = serve(source, service, sink)
        if args.save_snapshot:
            service.save_snapshot()
        print(f"events={summary.n_lines} offers={summary.n_offers} errors={summary.n_errors} "
              f"mean_latency_ms={summary.mean_latency_ms:.3f}", file=sys.stderr)
    finally:
        if source is not sys.stdin:
            source.close()
        if sink is not sys.stdout:
            sink.close()
    return 0


def cmd_simulate_events(args, cfg: RunConfig) -> int:
    ds = _load_dataset(_path(args, "clean", args.input))
    events = simulate_events(ds.users, args.n, cfg.synthetic.seed, center=tuple(args.center))
    out = _path(args, "events", args.out)
    out.write_text("".join(event_to_line(e) + "\n" for e in events), encoding="utf-8")
    _emit({"events": len(events), "path": str(out)})
    return 0


def cmd_api(args, cfg: RunConfig) -> int:
    import uvicorn

    from .serving.api import create_app

    service = ScoringService.from_config(_pipeline_config(args, cfg))
    uvicorn.run(create_app(service), host=args.host, port=args.port, log_level="info" if args.verbose else "warning")
    return 0


# ---- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # Subcommands repeat the global flags; suppressed defaults keep them from
        # overwriting values given before the subcommand name.
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = _Parser(add_help=False)
        g.add_argument("--config", default=d(None), help="YAML run configuration")
        g.add_argument("--seed", type=int, default=d(None), help="seed for data generation and both models")
        g.add_argument("--verbose", action="store_true", default=d(False))
        g.add_argument("--workdir", default=d("."), help="directory holding pipeline files (default: .)")
        return g

    common = global_flags(suppress=True)
    p = _Parser(prog="nextbuy", description="Next-purchase prediction and location-triggered offers.",
                parents=[global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=fn)
        return sp

    sp = add("generate-data", cmd_generate_data, "write a synthetic transaction corpus and merchant catalog")
    sp.add_argument("--out")
    sp.add_argument("--users", type=int)

    sp = add("ingest", cmd_ingest, "validate raw transactions and apply the activity filter")
    sp.add_argument("--input")
    sp.add_argument("--out")
    sp.add_argument("--min-txns", type=int, default=10)
    sp.add_argument("--min-categories", type=int, default=5)

    sp = add("features", cmd_features, "fit aggregates, normalizer and SIC embeddings into the offline store")
    sp.add_argument("--input")

    sp = add("train-ae", cmd_train_ae, "train the transaction autoencoder")
    sp.add_argument("--input")
    sp.add_argument("--out")
    sp.add_argument("--epochs", type=int)

    sp = add("encode", cmd_encode, "encode every transaction into the offline store and warm the online store")
    sp.add_argument("--input")

    for name, fn, help_ in (
        ("train-seqnbt", cmd_train_seqnbt, "train the sequence model"),
        ("evaluate", cmd_evaluate, "evaluate the sequence model against reference rankers"),
        ("sweep", cmd_sweep, "train and evaluate across sequence lengths"),
    ):
        sp = add(name, fn, help_)
        sp.add_argument("--input")
        sp.add_argument("--epochs", type=int)
        if name == "sweep":
            sp.add_argument("--L-values", dest="L_values", type=int, nargs="+")
        else:
            sp.add_argument("--L", type=int)
        if name == "train-seqnbt":
            sp.add_argument("--out")
        else:
            sp.add_argument("--report")

    sp = add("predict", cmd_predict, "rank likely next SICs for one card")
    sp.add_argument("card_id")
    sp.add_argument("--top-k", type=int)

    sp = add("serve", cmd_serve, "score a line-delimited event stream")
    sp.add_argument("--events", help="input stream (default: stdin)")
    sp.add_argument("--out", help="output stream (default: stdout)")
    sp.add_argument("--url", help="forward events to a running API server instead of scoring in-process")
    sp.add_argument("--save-snapshot", action="store_true", help="write the online store snapshot afterwards")

    sp = add("simulate-events", cmd_simulate_events, "write a synthetic location event stream")
    sp.add_argument("--input")
    sp.add_argument("--out")
    sp.add_argument("-n", type=int, default=1000)
    sp.add_argument("--center", type=float, nargs=2, default=(40.7128, -74.0060), metavar=("LAT", "LON"))

    sp = add("api", cmd_api, "run the HTTP scoring service")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        Path(args.workdir).mkdir(parents=True, exist_ok=True)
        return args.func(args, cfg)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except NextBuyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
