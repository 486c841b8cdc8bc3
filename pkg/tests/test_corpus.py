import io
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codeask import corpus
from codeask.corpus import (
    BOS_ID,
    END_ID,
    PAD_ID,
    SPECIALS,
    UNK_ID,
    PairRecord,
    RawPost,
    Vocabulary,
    build_vocab,
    encode_with_extended_vocab,
    extract_pair,
    filter_pair,
    mask_string_literals,
    normalize_code,
    parse_posts_stream,
    preprocess_code,
    tokenize,
)


def row(post_id, post_type="1", score=3, title="How to do x?", body="<code>x=1</code>", tags="<python>", **extra):
    attrs = {
        "Id": str(post_id),
        "PostTypeId": post_type,
        "Score": str(score),
        "Title": title,
        "Body": body,
        "Tags": tags,
    }
    attrs.update(extra)
    for k in [k for k, v in attrs.items() if v is None]:
        del attrs[k]
    from xml.sax.saxutils import quoteattr

    inner = " ".join(f"{k}={quoteattr(v)}" for k, v in attrs.items())
    return f"  <row {inner} />"


def dump_doc(rows):
    return ("<posts>\n" + "\n".join(rows) + "\n</posts>").encode("utf-8")


class TestParsePostsStream:
    def test_empty_document(self):
        warnings = {}
        posts = list(parse_posts_stream(b"<posts></posts>", warnings))
        assert posts == []
        assert warnings["malformed_rows"] == 0

    def test_three_row_fixture(self):
        doc = dump_doc([row(1), row(2, post_type="2", title=None), row(3)])
        posts = list(parse_posts_stream(doc))
        assert [p.post_id for p in posts] == [1, 3]
        assert all(p.post_type == "question" for p in posts)

    def test_missing_body_is_warned(self):
        doc = dump_doc([row(1, body=None)])
        warnings = {}
        assert list(parse_posts_stream(doc, warnings)) == []
        assert warnings["malformed_rows"] == 1

    def test_truncated_stream_raises_after_complete_rows(self):
        doc = dump_doc([row(1), row(2)])
        truncated = doc[: -len(b"</posts>")]
        seen = []
        with pytest.raises(Exception):
            for post in parse_posts_stream(truncated):
                seen.append(post.post_id)
        assert seen == [1, 2]

    def test_gzip_detection(self, tmp_path):
        import gzip

        doc = dump_doc([row(1), row(2)])
        plain = tmp_path / "posts.xml"
        plain.write_bytes(doc)
        gz = tmp_path / "posts.xml.gz"
        gz.write_bytes(gzip.compress(doc))
        for path in (plain, gz):
            with corpus.open_dump(str(path)) as fh:
                assert len(list(parse_posts_stream(fh))) == 2

    def test_streaming_bounded_memory(self):
        # 100k rows through a generator-backed stream; holding the full
        # document in one bytes object is fine, the parser must not build
        # a full tree (ET.iterparse with elem.clear()).
        import tracemalloc

        def gen():
            yield b"<posts>"
            for i in range(100_000):
                yield row(i + 1).encode() + b"\n"
            yield b"</posts>"

        class Stream(io.RawIOBase):
            def __init__(self):
                self.chunks = gen()
                self.buf = b""

            def readable(self):
                return True

            def readinto(self, b):
                while not self.buf:
                    try:
                        self.buf = next(self.chunks)
                    except StopIteration:
                        return 0
                n = min(len(b), len(self.buf))
                b[:n] = self.buf[:n]
                self.buf = self.buf[n:]
                return n

        tracemalloc.start()
        count = 0
        for _ in parse_posts_stream(io.BufferedReader(Stream())):
            count += 1
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        assert count == 100_000
        assert peak < 32 * 1024 * 1024


class TestExtractPair:
    def test_single_block(self):
        post = RawPost(1, "question", 3, "how to assign?", "<p>hi</p><code>x=1\n</code>", ["python"])
        code, title, score, pid = extract_pair(post)
        assert (code, title, score, pid) == ("x=1", "how to assign?", 3, 1)

    def test_no_code_block(self):
        post = RawPost(1, "question", 3, "t?", "<p>no code</p>", [])
        assert extract_pair(post) is None

    def test_two_blocks_newline_joined(self):
        post = RawPost(1, "question", 3, "t?", "<code>a</code> then <code>b</code>", [])
        code, *_ = extract_pair(post)
        assert code == "a\nb"

    def test_tag_filter(self):
        post = RawPost(1, "question", 3, "t?", "<code>a</code>", ["java"])
        assert extract_pair(post, "python") is None
        assert extract_pair(post, "java") is not None

    def test_empty_title(self):
        post = RawPost(1, "question", 3, "  ", "<code>a</code>", [])
        assert extract_pair(post) is None

    def test_html_entities_decoded(self):
        post = RawPost(1, "question", 3, "t?", "<code>a &lt; b &amp;&amp; c</code>", [])
        code, *_ = extract_pair(post)
        assert code == "a < b && c"


class TestTokenize:
    def test_empty(self):
        assert tokenize("", mode="title") == []

    def test_title_lowercase_and_punct(self):
        assert tokenize("How to sort a list?", mode="title") == ["how", "to", "sort", "a", "list", "?"]

    def test_code_keeps_case(self):
        assert tokenize("df.head()", mode="code") == ["df", ".", "head", "(", ")"]
        assert tokenize("MyClass.DO_IT", mode="code") == ["MyClass", ".", "DO_IT"]

    def test_snake_case_whole(self):
        assert tokenize("get_client_ip(request)", mode="code") == ["get_client_ip", "(", "request", ")"]

    @given(st.text(alphabet=st.characters(max_codepoint=0x2FF), max_size=60))
    @settings(max_examples=200, deadline=None)
    def test_title_idempotent_on_rejoin(self, text):
        once = tokenize(text, mode="title")
        again = tokenize(" ".join(once), mode="title")
        assert once == again

    def test_no_empty_or_spaced_tokens(self):
        toks = tokenize("a  +\tb\n 'c d'", mode="code")
        assert all(t and not any(c.isspace() for c in t) for t in toks)


class TestNormalizeCode:
    def test_number(self):
        assert normalize_code(["x", "=", "42"]) == ["x", "=", "NUMBER"]

    def test_string(self):
        assert normalize_code(["print", "(", '"hello"', ")"]) == ["print", "(", "STRING", ")"]

    def test_identity(self):
        assert normalize_code(["a", "+", "b"]) == ["a", "+", "b"]

    def test_float_and_hex(self):
        assert normalize_code(["3.14", "0xFF"]) == ["NUMBER", "NUMBER"]

    def test_mask_string_literals(self):
        masked = mask_string_literals("f('a b', \"c\\\"d\")")
        assert "'" not in masked and '"' not in masked
        assert preprocess_code("f('a b', 3)") == ["f", "(", "STRING", ",", "NUMBER", ")"]


class TestFilterPair:
    def test_accept(self):
        code = ["tok"] * 20
        title = ["how", "to", "parse", "json", "in", "python", "?"]
        assert filter_pair(code, title, 3)

    def test_short_title(self):
        assert not filter_pair(["t"] * 20, ["how", "to", "x"], 3)

    def test_long_code(self):
        assert not filter_pair(["t"] * 130, ["how", "to", "x", "?"], 3)

    def test_score(self):
        title = ["how", "to", "x", "?"]
        assert not filter_pair(["t"] * 20, title, 0)
        assert filter_pair(["t"] * 20, title, 1)

    def test_interrogative_required(self):
        assert not filter_pair(["t"] * 20, ["sort", "a", "list", "fast"], 3)
        assert filter_pair(["t"] * 20, ["which", "sort", "is", "fast"], 3)


class TestVocabulary:
    def test_empty_corpus_only_specials(self):
        vocab = build_vocab([], "code", 100)
        assert len(vocab) == 6
        assert vocab.token_of == SPECIALS

    def _pairs(self, counts):
        toks = [t for t, c in counts.items() for _ in range(c)]
        return [PairRecord(1, "u", toks, ["how", "?"], 1, "")]

    def test_count_ordering(self):
        vocab = build_vocab(self._pairs({"a": 3, "b": 1}), "code", 100, 1)
        assert vocab.id_of["a"] < vocab.id_of["b"]

    def test_truncation(self):
        vocab = build_vocab(self._pairs({"a": 3, "b": 1}), "code", 7, 1)
        assert "a" in vocab and "b" not in vocab

    def test_tie_break_lexicographic(self):
        vocab = build_vocab(self._pairs({"zz": 2, "aa": 2}), "code", 100, 1)
        assert vocab.id_of["aa"] < vocab.id_of["zz"]

    def test_round_trip_bijection(self):
        vocab = build_vocab(self._pairs({"a": 3, "b": 2, "c": 1}), "code", 100, 1)
        for tok, idx in vocab.id_of.items():
            assert vocab.token(idx) == tok
        for idx in range(len(vocab)):
            assert vocab.id_of[vocab.token(idx)] == idx

    def test_save_load_round_trip(self, tmp_path):
        vocab = build_vocab(self._pairs({"a": 3, "b": 2}), "code", 100, 1)
        path = tmp_path / "v.txt"
        vocab.save(str(path))
        loaded = Vocabulary.load(str(path))
        assert loaded.token_of == vocab.token_of
        assert loaded.counts == vocab.counts
        # file format: line number - 1 = id, specials first with count 0
        lines = path.read_text().splitlines()
        assert lines[0] == "PAD\t0"
        assert lines[6].split("\t")[0] == vocab.token(6)


class TestExtendedVocab:
    def setup_method(self):
        pairs = [PairRecord(1, "u", ["a", "b"], ["how", "?"], 1, "")]
        self.vocab = build_vocab(pairs, "code", 100, 1)

    def test_no_oov(self):
        base, ext_ids, ext = encode_with_extended_vocab(["a", "b", "a"], self.vocab)
        assert base == ext_ids
        assert len(ext) == 0

    def test_fresh_ids_in_order(self):
        V = len(self.vocab)
        base, ext_ids, ext = encode_with_extended_vocab(["foo", "bar", "foo"], self.vocab)
        assert base == [UNK_ID] * 3
        assert ext_ids == [V, V + 1, V]
        assert ext.oov_tokens == ["foo", "bar"]

    def test_copyable_identifier(self):
        V = len(self.vocab)
        _, ext_ids, ext = encode_with_extended_vocab(["get_client_ip", "a"], self.vocab)
        assert ext_ids[0] == V
        assert ext.token(V) == "get_client_ip"

    @given(st.lists(st.sampled_from(["a", "b", "foo", "bar", "baz"]), min_size=1, max_size=12))
    @settings(max_examples=100, deadline=None)
    def test_decode_reproduces_sequence(self, seq):
        base, ext_ids, ext = encode_with_extended_vocab(seq, self.vocab)
        assert len(base) == len(ext_ids) == len(seq)
        V = len(self.vocab)
        for b, e in zip(base, ext_ids):
            assert (e < V) == (b != UNK_ID)
        assert [ext.token(i) for i in ext_ids] == seq


class TestPipeline:
    def test_mine_pairs_all_filtered(self):
        body = "<code>" + " ".join(["def", "f", "(", "x", ")", ":"] * 4) + "</code>"
        rows = [
            row(1, body=body, title="How to frobnicate a widget?"),
            row(2, body=body, title="How to frobnicate a widget?"),  # dup, lower id kept
            row(3, body="<code>x</code>", title="How to do it faster now?"),  # short code
        ]
        posts = list(parse_posts_stream(dump_doc(rows)))
        pairs = list(corpus.mine_pairs(posts, "python"))
        assert len(pairs) == 1
        assert pairs[0].post_id == 1
        for p in pairs:
            assert filter_pair(p.code_tokens, p.title_tokens, p.score)

    def test_dedup_keeps_highest_score(self):
        body = "<code>" + " ".join(["def", "f", "(", "x", ")", ":"] * 4) + "</code>"
        rows = [
            row(1, score=1, body=body, title="How to frobnicate a widget?"),
            row(2, score=9, body=body, title="How to frobnicate a widget?"),
        ]
        pairs = list(corpus.mine_pairs(parse_posts_stream(dump_doc(rows)), "python"))
        assert len(pairs) == 1 and pairs[0].score == 9

    def test_split_deterministic(self):
        assert corpus.split_of(89) == "train"
        assert corpus.split_of(190) == "valid"
        assert corpus.split_of(92) == "valid"
        assert corpus.split_of(97) == "test"

    def test_pair_record_json_round_trip(self):
        rec = PairRecord(5, "https://stackoverflow.com/questions/5", ["a", "."], ["how", "?"], 2, "python")
        line = rec.to_json()
        keys = list(json.loads(line).keys())
        assert keys == ["post_id", "url", "code", "title", "score", "tag"]
        assert PairRecord.from_json(line) == rec
