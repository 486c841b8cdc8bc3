"""Operator entry point: ingest -> preprocess -> vocab -> train -> eval ->
index -> serve -> query.

Exit codes: 0 success, 1 usage error, 2 data/model error.  Diagnostics go
to stderr, machine-readable output to stdout.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys

from . import corpus, retrieval, service
from .corpus import PairRecord, Vocabulary
from .inference import beam_search_titles
from .model import ModelConfig
from .training import TrainConfig, encode_pair, save_checkpoint, train, validate

COMMANDS = ["ingest", "preprocess", "vocab", "train", "eval", "index", "serve", "query"]


def _err(msg: str):
    print(f"error: {msg}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codeask",
        description="Mine Q&A dumps, train a title generator with copy/coverage, "
        "index snippet embeddings, and serve recommendations.",
    )
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")

    p = sub.add_parser("ingest", help="extract raw (code, title) pairs from a dump XML")
    p.add_argument("--dump", required=True, help="posts XML file, optionally gzipped")
    p.add_argument("--tag", default="", help="keep only questions with this tag")
    p.add_argument("--out", required=True, help="raw pairs JSON-lines output")

    p = sub.add_parser("preprocess", help="tokenize, normalize, filter, deduplicate")
    p.add_argument("--in", dest="inp", required=True, help="raw pairs JSON-lines")
    p.add_argument("--out", required=True, help="corpus JSON-lines output")

    p = sub.add_parser("vocab", help="build a vocabulary from a corpus")
    p.add_argument("--in", dest="inp", required=True, help="corpus JSON-lines")
    p.add_argument("--side", choices=["code", "title"], required=True)
    p.add_argument("--max-size", type=int, default=50000)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--out", required=True, help="vocabulary file")

    p = sub.add_parser("train", help="train the model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--code-vocab", required=True)
    p.add_argument("--title-vocab", required=True)
    p.add_argument("--config", help="JSON file of hyperparameter overrides")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model directory to create")
    p.add_argument(
        "--no-split", action="store_true",
        help="use the whole corpus for both training and validation",
    )

    p = sub.add_parser("eval", help="validation perplexity and beam exact-match rate")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--beam", type=int, default=5)

    p = sub.add_parser("index", help="build the snippet-embedding index")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="index file")

    p = sub.add_parser("serve", help="run the recommendation HTTP service")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--index", required=True, help="index file")
    p.add_argument("--addr", default="127.0.0.1:8080")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--webui", default=None, help="directory of built webui assets")

    p = sub.add_parser("query", help="one-shot query against trained artifacts")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--index", required=True, help="index file")
    p.add_argument("--code-file", help="snippet file; stdin when omitted")
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--k", type=int, default=5)

    return parser


def _load_model_dir(model_dir: str):
    from .training import load_checkpoint

    params, config = load_checkpoint(os.path.join(model_dir, service.MODEL_FILE))
    code_vocab = Vocabulary.load(os.path.join(model_dir, service.CODE_VOCAB_FILE))
    title_vocab = Vocabulary.load(os.path.join(model_dir, service.TITLE_VOCAB_FILE))
    return params, config, code_vocab, title_vocab


def cmd_ingest(args) -> int:
    warnings = {}
    count = 0
    with corpus.open_dump(args.dump) as stream, open(args.out, "w", encoding="utf-8") as out:
        for post in corpus.parse_posts_stream(stream, warnings):
            ext = corpus.extract_pair(post, args.tag)
            if ext is None:
                continue
            code_text, title_text, score, post_id = ext
            out.write(
                json.dumps(
                    {
                        "post_id": post_id,
                        "title": title_text,
                        "code": code_text,
                        "score": score,
                        "tag": args.tag,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
            count += 1
    print(
        f"ingested {count} raw pairs ({warnings.get('malformed_rows', 0)} malformed rows skipped)",
        file=sys.stderr,
    )
    return 0


def cmd_preprocess(args) -> int:
    best: dict = {}
    order: list = []
    with open(args.inp, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            code = corpus.preprocess_code(raw["code"])
            title = corpus.tokenize(raw["title"], mode="title")
            if not corpus.filter_pair(code, title, raw["score"]):
                continue
            rec = PairRecord(
                post_id=raw["post_id"],
                url=f"https://stackoverflow.com/questions/{raw['post_id']}",
                code_tokens=code,
                title_tokens=title,
                score=raw["score"],
                language_tag=raw.get("tag", ""),
            )
            key = (tuple(code), tuple(title))
            if key not in best:
                best[key] = rec
                order.append(key)
            elif rec.score > best[key].score:
                best[key] = rec
    corpus.write_pairs((best[k] for k in order), args.out)
    print(f"kept {len(order)} pairs", file=sys.stderr)
    return 0


def cmd_vocab(args) -> int:
    pairs = corpus.read_pairs(args.inp)
    vocab = corpus.build_vocab(pairs, args.side, args.max_size, args.min_count)
    vocab.save(args.out)
    print(f"{args.side} vocabulary: {len(vocab)} tokens", file=sys.stderr)
    return 0


def _train_configs(args, code_vocab, title_vocab):
    overrides = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            overrides = json.load(fh)
    mkeys = {"emb_dim", "enc_hidden", "dec_hidden", "coverage_weight", "dropout_rate"}
    mcfg = dict(emb_dim=64, enc_hidden=64, dec_hidden=64)
    tcfg = {}
    for k, v in overrides.items():
        (mcfg if k in mkeys else tcfg)[k] = v
    config = ModelConfig(
        code_vocab_size=len(code_vocab), title_vocab_size=len(title_vocab), **mcfg
    )
    tconfig = TrainConfig(seed=args.seed, **tcfg)
    return config, tconfig


def cmd_train(args) -> int:
    pairs = corpus.read_pairs(args.corpus)
    if not pairs:
        _err("empty corpus")
        return 2
    code_vocab = Vocabulary.load(args.code_vocab)
    title_vocab = Vocabulary.load(args.title_vocab)
    config, tconfig = _train_configs(args, code_vocab, title_vocab)

    if args.no_split:
        train_pairs = valid_pairs = pairs
    else:
        train_pairs = [p for p in pairs if corpus.split_of(p.post_id) == "train"]
        valid_pairs = [p for p in pairs if corpus.split_of(p.post_id) == "valid"]
        if not train_pairs or not valid_pairs:
            _err("train/valid split produced an empty set; try --no-split")
            return 2
    enc_train = [encode_pair(p, code_vocab, title_vocab) for p in train_pairs]
    enc_valid = [encode_pair(p, code_vocab, title_vocab) for p in valid_pairs]

    os.makedirs(args.out, exist_ok=True)
    params, metrics = train(
        enc_train, enc_valid, config, tconfig,
        metrics_path=os.path.join(args.out, "metrics.jsonl"),
        log=lambda msg: print(msg, file=sys.stderr),
    )
    save_checkpoint(params, config, os.path.join(args.out, service.MODEL_FILE))
    shutil.copyfile(args.code_vocab, os.path.join(args.out, service.CODE_VOCAB_FILE))
    shutil.copyfile(args.title_vocab, os.path.join(args.out, service.TITLE_VOCAB_FILE))
    best = min(m["valid_ppl"] for m in metrics)
    print(json.dumps({"epochs": len(metrics), "best_valid_ppl": best}))
    return 0


def cmd_eval(args) -> int:
    params, config, code_vocab, title_vocab = _load_model_dir(args.model)
    pairs = corpus.read_pairs(args.corpus)
    if not pairs:
        _err("empty corpus")
        return 2
    encoded = [encode_pair(p, code_vocab, title_vocab) for p in pairs]
    ppl = validate(encoded, params, config)
    exact = 0
    for rec, enc in zip(pairs, encoded):
        results = beam_search_titles(
            enc.code_ids, enc.src_ext_ids, enc.ext, title_vocab, params, config,
            beam=args.beam, k=1,
        )
        if results and results[0][0] == rec.title_tokens:
            exact += 1
    print(
        json.dumps(
            {"perplexity": ppl, "exact_match": exact / len(pairs), "pairs": len(pairs)}
        )
    )
    return 0


def cmd_index(args) -> int:
    params, config, code_vocab, title_vocab = _load_model_dir(args.model)
    pairs = corpus.read_pairs(args.corpus)
    if not pairs:
        _err("empty corpus")
        return 2
    encoded_codes = [[code_vocab.lookup(t) for t in p.code_tokens] for p in pairs]
    meta = [
        {"post_id": p.post_id, "title": " ".join(p.title_tokens), "url": p.url}
        for p in pairs
    ]
    emb, lsh = retrieval.build_index(
        encoded_codes, meta, params, config, seed=args.seed
    )
    retrieval.save_index(emb, lsh, args.out)
    print(f"indexed {emb.C.shape[0]} snippets", file=sys.stderr)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    state = service.load_artifacts(args.model, args.index, beam=args.beam, k=args.k)
    app = service.create_app(state, webui_dir=args.webui)
    host, _, port = args.addr.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="warning")
    return 0


def cmd_query(args) -> int:
    state = service.load_artifacts(args.model, args.index, beam=args.beam, k=args.k)
    if args.code_file:
        with open(args.code_file, encoding="utf-8") as fh:
            code = fh.read()
    else:
        code = sys.stdin.read()
    status, body = service.handle_query(state, code)
    sys.stdout.write(body)
    sys.stdout.flush()
    return 0 if status == 200 else 2


HANDLERS = {
    "ingest": cmd_ingest,
    "preprocess": cmd_preprocess,
    "vocab": cmd_vocab,
    "train": cmd_train,
    "eval": cmd_eval,
    "index": cmd_index,
    "serve": cmd_serve,
    "query": cmd_query,
}


def run(argv) -> int:
    parser = build_parser()
    argv = list(argv)
    if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
        _err(f"unknown command: {argv[0]}")
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return HANDLERS[args.command](args)
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        _err(str(exc))
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
