import os
import sys
from types import SimpleNamespace

import numpy as np
import pytest

from codeask import retrieval
from codeask.corpus import PairRecord, build_vocab, write_pairs
from codeask.model import ModelConfig
from codeask.training import TrainConfig, encode_pair, save_checkpoint, train

FILLERS = ["req", "resp", "data", "conn", "node", "item", "path", "base", "text", "line"]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance verdict lines where capture cannot swallow them."""
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance.VERDICTS:
            terminalreporter.write_line(line)


def make_toy_corpus(n: int = 20) -> list[PairRecord]:
    """Synthetic pairs whose titles each contain one source-only identifier,
    so reproducing them requires the copy path."""
    pairs = []
    for i in range(n):
        ident = f"handler_{i:02d}"
        fa, fb = FILLERS[i % 10], FILLERS[(i + 3) % 10]
        code = [
            "def", ident, "(", fa, ",", fb, ")", ":",
            "return", fa, ".", "get", "(", fb, ")", "+", "NUMBER",
        ]
        title = ["how", "to", "use", ident, "in", "python", "?"]
        pairs.append(
            PairRecord(
                post_id=i + 1,
                url=f"https://stackoverflow.com/questions/{i + 1}",
                code_tokens=code,
                title_tokens=title,
                score=2,
                language_tag="python",
            )
        )
    return pairs


@pytest.fixture(scope="session")
def toy_model():
    """Overfit model on the 20-pair copy corpus; shared across the session."""
    pairs = make_toy_corpus()
    code_vocab = build_vocab(pairs, "code", 1000, 1)
    # min_count=2 keeps the per-pair identifiers out of the title vocabulary,
    # forcing the copy mechanism to produce them
    title_vocab = build_vocab(pairs, "title", 1000, 2)
    config = ModelConfig(
        emb_dim=32, enc_hidden=32, dec_hidden=32,
        code_vocab_size=len(code_vocab), title_vocab_size=len(title_vocab),
        dropout_rate=0.0,
    )
    encoded = [encode_pair(p, code_vocab, title_vocab) for p in pairs]
    tconfig = TrainConfig(batch_size=4, epochs=250, seed=1, early_stop_patience=300)
    params, metrics = train(encoded, encoded, config, tconfig)
    return SimpleNamespace(
        pairs=pairs,
        code_vocab=code_vocab,
        title_vocab=title_vocab,
        config=config,
        params=params,
        metrics=metrics,
        encoded=encoded,
        tconfig=tconfig,
    )


@pytest.fixture(scope="session")
def toy_artifacts(toy_model, tmp_path_factory):
    """Toy model written out as on-disk artifacts: model dir, corpus, index."""
    root = tmp_path_factory.mktemp("artifacts")
    model_dir = root / "model"
    model_dir.mkdir()
    save_checkpoint(toy_model.params, toy_model.config, str(model_dir / "model.bin"))
    toy_model.code_vocab.save(str(model_dir / "code_vocab.txt"))
    toy_model.title_vocab.save(str(model_dir / "title_vocab.txt"))

    corpus_path = root / "corpus.jsonl"
    write_pairs(toy_model.pairs, str(corpus_path))

    codes = [e.code_ids for e in toy_model.encoded]
    meta = [
        {"post_id": p.post_id, "title": " ".join(p.title_tokens), "url": p.url}
        for p in toy_model.pairs
    ]
    emb, lsh = retrieval.build_index(
        codes, meta, toy_model.params, toy_model.config, seed=7
    )
    index_path = root / "index.bin"
    retrieval.save_index(emb, lsh, str(index_path))
    return SimpleNamespace(
        model_dir=str(model_dir),
        corpus_path=str(corpus_path),
        index_path=str(index_path),
        emb=emb,
        lsh=lsh,
    )
