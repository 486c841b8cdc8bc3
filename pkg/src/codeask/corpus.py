"""Mining pipeline: stream-parse Q&A dump XML, extract <code>/title pairs,
tokenize and normalize, filter, and build vocabularies."""

from __future__ import annotations

import gzip
import html
import io
import json
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

PAD, BOS, END, UNK = "PAD", "BOS", "END", "UNK"
NUMBER, STRING = "NUMBER", "STRING"
SPECIALS = [PAD, BOS, END, UNK, NUMBER, STRING]
PAD_ID, BOS_ID, END_ID, UNK_ID = 0, 1, 2, 3

INTERROGATIVES = {"how", "what", "why", "which", "when", "where", "who"}

MIN_CODE_LEN, MAX_CODE_LEN = 16, 128
MIN_TITLE_LEN, MAX_TITLE_LEN = 4, 16


@dataclass
class RawPost:
    post_id: int
    post_type: str  # "question" or "other"
    score: int
    title: str
    body_html: str
    tags: list[str]


@dataclass
class PairRecord:
    post_id: int
    url: str
    code_tokens: list[str]
    title_tokens: list[str]
    score: int
    language_tag: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "post_id": self.post_id,
                "url": self.url,
                "code": self.code_tokens,
                "title": self.title_tokens,
                "score": self.score,
                "tag": self.language_tag,
            },
            ensure_ascii=False,
        )

    @staticmethod
    def from_json(line: str) -> "PairRecord":
        d = json.loads(line)
        return PairRecord(
            post_id=d["post_id"],
            url=d["url"],
            code_tokens=list(d["code"]),
            title_tokens=list(d["title"]),
            score=d["score"],
            language_tag=d["tag"],
        )


# ---------------------------------------------------------------------------
# dump parsing

_TAG_ANGLE_RE = re.compile(r"<([^<>]+)>")


def _parse_tags(raw: str) -> list[str]:
    if not raw:
        return []
    angle = _TAG_ANGLE_RE.findall(raw)
    if angle:
        return angle
    return [t for t in raw.split("|") if t]


def open_dump(path: str):
    """Open a dump file, transparently decompressing gzip (by magic bytes)."""
    fh = open(path, "rb")
    magic = fh.read(2)
    fh.seek(0)
    if magic == b"\x1f\x8b":
        return gzip.open(fh, "rb")
    return fh


def parse_posts_stream(stream, warnings: Optional[dict] = None) -> Iterator[RawPost]:
    """Yield one RawPost per well-formed question row, streaming.

    Rows missing required attributes are skipped and counted in
    ``warnings["malformed_rows"]``.  A truncated/ill-formed document raises
    after the complete rows have been yielded.
    """
    if isinstance(stream, (bytes, bytearray)):
        stream = io.BytesIO(stream)
    if warnings is None:
        warnings = {}
    warnings.setdefault("malformed_rows", 0)
    for _, elem in ET.iterparse(stream, events=("end",)):
        if elem.tag != "row":
            continue
        a = elem.attrib
        try:
            post_id = int(a["Id"])
            post_type = "question" if a["PostTypeId"] == "1" else "other"
            if post_type == "question":
                post = RawPost(
                    post_id=post_id,
                    post_type=post_type,
                    score=int(a["Score"]),
                    title=a.get("Title", ""),
                    body_html=a["Body"],
                    tags=_parse_tags(a.get("Tags", "")),
                )
            else:
                post = None
        except (KeyError, ValueError):
            warnings["malformed_rows"] += 1
            post = None
        elem.clear()
        if post is not None:
            yield post


_CODE_BLOCK_RE = re.compile(r"<code>(.*?)</code>", re.DOTALL | re.IGNORECASE)


def extract_pair(post: RawPost, tag_filter: str = ""):
    """Pull (code_text, title_text, score, post_id) out of a question row.

    Concatenates all <code> blocks newline-joined, in document order.
    Returns None when there is no code block, the title is empty, or the
    tag filter does not match.
    """
    if post.post_type != "question":
        return None
    if tag_filter and tag_filter not in post.tags:
        return None
    if not post.title.strip():
        return None
    blocks = [html.unescape(b).strip("\n") for b in _CODE_BLOCK_RE.findall(post.body_html)]
    blocks = [b for b in blocks if b.strip()]
    if not blocks:
        return None
    return "\n".join(blocks), post.title, post.score, post.post_id


# ---------------------------------------------------------------------------
# tokenization / normalization

_WORD_RE = re.compile(r"[A-Za-z0-9_]+|[^A-Za-z0-9_\s]")

_STRING_LITERAL_RE = re.compile(
    r"\"(?:\\.|[^\"\\\n])*\"" r"|'(?:\\.|[^'\\\n])*'"
)

_NUMBER_RE = re.compile(r"^(?:[0-9]+(?:\.[0-9]+)?|0[xX][0-9a-fA-F]+)$")
_QUOTED_RE = re.compile(r"^(\"(?:\\.|[^\"\\])*\"|'(?:\\.|[^'\\])*')$")


def tokenize(text: str, mode: str = "code") -> list[str]:
    """Whitespace split, then split off each punctuation character.

    Identifiers (incl. snake_case) stay whole.  Titles are lowercased,
    code is not.
    """
    if mode not in ("code", "title"):
        raise ValueError(f"unknown tokenize mode {mode!r}")
    if mode == "title":
        text = text.lower()
    tokens = []
    for chunk in text.split():
        tokens.extend(_WORD_RE.findall(chunk))
    return tokens


def mask_string_literals(text: str) -> str:
    """Replace quoted string literals with the STRING marker, pre-tokenization.

    Quoted strings can contain whitespace and would shatter under the
    tokenizer, so masking has to happen on raw text.
    """
    return _STRING_LITERAL_RE.sub(f" {STRING} ", text)


def normalize_code(tokens: list[str]) -> list[str]:
    out = []
    for tok in tokens:
        if _NUMBER_RE.match(tok):
            out.append(NUMBER)
        elif _QUOTED_RE.match(tok):
            out.append(STRING)
        else:
            out.append(tok)
    return out


def preprocess_code(text: str) -> list[str]:
    """Raw code text -> masked, tokenized, normalized token sequence."""
    return normalize_code(tokenize(mask_string_literals(text), mode="code"))


def filter_pair(code: list[str], title: list[str], score: int) -> bool:
    if score < 1:
        return False
    if not MIN_CODE_LEN <= len(code) <= MAX_CODE_LEN:
        return False
    if not MIN_TITLE_LEN <= len(title) <= MAX_TITLE_LEN:
        return False
    return any(t.lower() in INTERROGATIVES for t in title)


# ---------------------------------------------------------------------------
# full pipeline helpers


def mine_pairs(posts: Iterable[RawPost], tag_filter: str = "") -> Iterator[PairRecord]:
    """RawPost stream -> filtered, deduplicated PairRecords.

    Duplicate (code, title) token sequences keep the highest-score instance
    (first seen wins ties).
    """
    best: dict = {}
    order: list = []
    for post in posts:
        ext = extract_pair(post, tag_filter)
        if ext is None:
            continue
        code_text, title_text, score, post_id = ext
        code = preprocess_code(code_text)
        title = tokenize(title_text, mode="title")
        if not filter_pair(code, title, score):
            continue
        rec = PairRecord(
            post_id=post_id,
            url=f"https://stackoverflow.com/questions/{post_id}",
            code_tokens=code,
            title_tokens=title,
            score=score,
            language_tag=tag_filter,
        )
        key = (tuple(code), tuple(title))
        if key not in best:
            best[key] = rec
            order.append(key)
        elif rec.score > best[key].score:
            best[key] = rec
    for key in order:
        yield best[key]


def split_of(post_id: int) -> str:
    """Deterministic 90/5/5 split keyed on post_id."""
    m = post_id % 100
    if m < 90:
        return "train"
    if m < 95:
        return "valid"
    return "test"


def read_pairs(path: str) -> list[PairRecord]:
    with open(path, encoding="utf-8") as fh:
        return [PairRecord.from_json(line) for line in fh if line.strip()]


def write_pairs(pairs: Iterable[PairRecord], path: str):
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(p.to_json() + "\n")


# ---------------------------------------------------------------------------
# vocabularies


class Vocabulary:
    """token<->id bijection with the six specials at ids 0..5."""

    def __init__(self):
        self.id_of: dict[str, int] = {}
        self.token_of: list[str] = []
        self.counts: dict[str, int] = {}
        for tok in SPECIALS:
            self.id_of[tok] = len(self.token_of)
            self.token_of.append(tok)
            self.counts[tok] = 0

    def __len__(self):
        return len(self.token_of)

    def __contains__(self, token):
        return token in self.id_of

    def lookup(self, token: str) -> int:
        return self.id_of.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self.token_of[idx]

    def _add(self, token: str, count: int):
        self.id_of[token] = len(self.token_of)
        self.token_of.append(token)
        self.counts[token] = count

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.token_of:
                fh.write(f"{tok}\t{self.counts[tok]}\n")

    @staticmethod
    def load(path: str) -> "Vocabulary":
        vocab = Vocabulary()
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                tok, count = line.rstrip("\n").split("\t")
                if i < len(SPECIALS):
                    if tok != SPECIALS[i]:
                        raise ValueError(
                            f"vocabulary file line {i + 1}: expected special "
                            f"{SPECIALS[i]!r}, found {tok!r}"
                        )
                    continue
                vocab._add(tok, int(count))
        return vocab


def build_vocab(
    pairs: Iterable[PairRecord], side: str, max_size: int, min_count: int = 1
) -> Vocabulary:
    if side not in ("code", "title"):
        raise ValueError(f"unknown vocab side {side!r}")
    if max_size <= len(SPECIALS):
        raise ValueError(f"max_size {max_size} leaves no room beyond specials")
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts: dict[str, int] = {}
    for pair in pairs:
        toks = pair.code_tokens if side == "code" else pair.title_tokens
        for tok in toks:
            if tok in SPECIALS:
                continue
            counts[tok] = counts.get(tok, 0) + 1
    vocab = Vocabulary()
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    for tok, count in ranked:
        if count < min_count or len(vocab) >= max_size:
            break
        vocab._add(tok, count)
    return vocab


@dataclass
class ExtendedVocab:
    """Per-example copy targets: source tokens absent from the base vocab."""

    base: Vocabulary
    oov_tokens: list[str] = field(default_factory=list)
    oov_id_of: dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.oov_tokens)

    def total_size(self) -> int:
        return len(self.base) + len(self.oov_tokens)

    def token(self, ext_id: int) -> str:
        base_size = len(self.base)
        if ext_id < base_size:
            return self.base.token(ext_id)
        if ext_id < base_size + len(self.oov_tokens):
            return self.oov_tokens[ext_id - base_size]
        raise IndexError(f"extended id {ext_id} out of range")


def encode_with_extended_vocab(seq: list[str], vocab: Vocabulary):
    """Returns (base_ids, ext_ids, ext): UNK-backed ids plus fresh copy ids."""
    ext = ExtendedVocab(base=vocab)
    base_ids, ext_ids = [], []
    base_size = len(vocab)
    for tok in seq:
        if tok in vocab:
            idx = vocab.id_of[tok]
            base_ids.append(idx)
            ext_ids.append(idx)
        else:
            base_ids.append(UNK_ID)
            if tok not in ext.oov_id_of:
                ext.oov_id_of[tok] = base_size + len(ext.oov_tokens)
                ext.oov_tokens.append(tok)
            ext_ids.append(ext.oov_id_of[tok])
    return base_ids, ext_ids, ext


def encode_title_ext_ids(title: list[str], title_vocab: Vocabulary, ext: ExtendedVocab):
    """Title tokens -> extended ids: title vocab first, then the source's
    copy ids, else UNK."""
    ids = []
    for tok in title:
        if tok in title_vocab:
            ids.append(title_vocab.id_of[tok])
        elif tok in ext.oov_id_of:
            ids.append(ext.oov_id_of[tok])
        else:
            ids.append(UNK_ID)
    return ids
