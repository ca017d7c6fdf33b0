"""Caption tokenization, rule-based POS tagging, phrase grouping and the text encoder.

Phrases follow the pattern ``ARTICLE? ADJ* NOUN``. Words are embedded, run
through a bidirectional LSTM (word features ``e`` and sentence feature
``e_bar``), and each phrase span of ``e`` rows is summarized by a second,
unidirectional LSTM.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .errors import EmptySentenceError, ShapeError
from .ndcore import ops

ARTICLE, ADJ, NOUN, VERB, PREP, OTHER = "ARTICLE", "ADJ", "NOUN", "VERB", "PREP", "OTHER"
TAGS = (ARTICLE, ADJ, NOUN, VERB, PREP, OTHER)

CLOSED_CLASS = {
    **{w: ARTICLE for w in ("a", "an", "the")},
    **{w: PREP for w in (
        "on", "in", "of", "at", "with", "to", "from", "by", "over", "under", "above", "below",
        "behind", "near", "next", "beside", "into", "onto", "across", "between", "around",
        "inside", "through", "along", "against",
    )},
}

PAD, UNK = "<pad>", "<unk>"

_PUNCT = re.compile(r"[^\w\s']|_")


def tokenize(text):
    """Whitespace split with punctuation stripped and lowercased."""
    tokens = _PUNCT.sub(" ", text).lower().split()
    tokens = [t.strip("'") for t in tokens]
    tokens = [t for t in tokens if t]
    if not tokens:
        raise EmptySentenceError(f"no tokens in {text!r}")
    return tokens


def load_lexicon(path=None):
    """Read a ``word<TAB>TAG`` lexicon; defaults to the bundled one."""
    if path is None:
        text = resources.files("rpattn").joinpath("lexicon.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    lex = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        word, _, tag = line.partition("\t")
        tag = tag.strip().upper()
        if tag not in TAGS:
            raise ValueError(f"lexicon line {lineno}: unknown tag {tag!r}")
        lex[word.strip().lower()] = tag
    return lex


_DEFAULT_LEXICON = None


def default_lexicon():
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = load_lexicon()
    return _DEFAULT_LEXICON


def pos_tag(tokens, lexicon=None):
    """Tag each token: closed-class table first, then the lexicon, else OTHER."""
    lexicon = default_lexicon() if lexicon is None else lexicon
    return [(t, CLOSED_CLASS.get(t) or lexicon.get(t, OTHER)) for t in tokens]


def group_phrases(tagged):
    """Greedy left-to-right ARTICLE? ADJ* NOUN matching; returns half-open spans.

    An article or adjective opens a candidate, adjectives extend it, and the
    next noun closes it. Anything else abandons the candidate.
    """
    tags = [t for _, t in tagged] if tagged and isinstance(tagged[0], tuple) else list(tagged)
    spans = []
    start = None
    for i, tag in enumerate(tags):
        if tag == ARTICLE:
            start = i
        elif tag == ADJ:
            if start is None:
                start = i
        elif tag == NOUN:
            spans.append((i if start is None else start, i + 1))
            start = None
        else:
            start = None
    return spans


def phrase_grammar_ok(tags, span):
    """True if ``tags[span]`` is ARTICLE? ADJ* NOUN."""
    s, e = span
    seg = list(tags[s:e])
    if not seg or seg[-1] != NOUN:
        return False
    body = seg[:-1]
    if body and body[0] == ARTICLE:
        body = body[1:]
    return all(t == ADJ for t in body)


@dataclass
class TaggedSentence:
    tokens: list  # (surface, tag) pairs
    phrase_spans: list = field(default_factory=list)

    @property
    def words(self):
        return [w for w, _ in self.tokens]

    @property
    def tags(self):
        return [t for _, t in self.tokens]

    def phrases(self):
        return [" ".join(self.words[s:e]) for s, e in self.phrase_spans]


def parse(text, lexicon=None):
    tagged = pos_tag(tokenize(text), lexicon)
    return TaggedSentence(tagged, group_phrases(tagged))


def from_pretagged(pairs):
    """Build a TaggedSentence from ``[[surface, TAG], ...]`` (or its JSON text)."""
    if isinstance(pairs, (str, bytes)):
        pairs = json.loads(pairs)
    tagged = []
    for i, pair in enumerate(pairs):
        if len(pair) != 2 or pair[1] not in TAGS:
            raise ValueError(f"pre-tagged entry {i} is not [surface, TAG]: {pair!r}")
        tagged.append((str(pair[0]).lower(), pair[1]))
    if not tagged:
        raise EmptySentenceError("empty pre-tagged sentence")
    return TaggedSentence(tagged, group_phrases(tagged))


class Vocab:
    def __init__(self, words):
        self.itos = [PAD, UNK] + sorted(set(words) - {PAD, UNK})
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def ids(self, tokens):
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in tokens]

    @classmethod
    def from_lexicon(cls, lexicon=None):
        lexicon = default_lexicon() if lexicon is None else lexicon
        return cls(list(lexicon) + list(CLOSED_CLASS) + ["and"])


@dataclass
class TextBatch:
    ids: np.ndarray        # (M, T) int, PAD-filled
    mask: np.ndarray       # (M, T) bool
    spans: list            # per sentence list of (start, end)

    @property
    def size(self):
        return self.ids.shape[0]


def make_batch(sentences, vocab):
    """Pad a list of TaggedSentences into a TextBatch."""
    if not sentences:
        raise EmptySentenceError("empty batch")
    lengths = [len(s.tokens) for s in sentences]
    if min(lengths) == 0:
        raise EmptySentenceError("sentence with no tokens")
    t_max = max(lengths)
    ids = np.zeros((len(sentences), t_max), dtype=np.int64)
    mask = np.zeros((len(sentences), t_max), dtype=bool)
    for i, s in enumerate(sentences):
        ids[i, :lengths[i]] = vocab.ids(s.words)
        mask[i, :lengths[i]] = True
    return TextBatch(ids, mask, [list(s.phrase_spans) for s in sentences])


@dataclass
class TextEncoding:
    """Batched encoder output. Padded rows of ``words``/``phrases`` are zero."""

    words: nd.Tensor        # (M, T, D)
    word_mask: np.ndarray   # (M, T)
    sentence: nd.Tensor     # (M, D)
    phrases: nd.Tensor      # (M, P, D), P >= 1
    phrase_mask: np.ndarray  # (M, P)

    @property
    def phrase_counts(self):
        return self.phrase_mask.sum(axis=1)

    def select(self, idx):
        idx = np.asarray(idx)
        return TextEncoding(self.words[idx], self.word_mask[idx], self.sentence[idx],
                            self.phrases[idx], self.phrase_mask[idx])

    def detach(self):
        return TextEncoding(self.words.detach(), self.word_mask, self.sentence.detach(),
                            self.phrases.detach(), self.phrase_mask)


def _gather_rows(rows, index, valid):
    """rows (N, D) -> (..., D) picking ``index``; invalid slots become exact zeros."""
    zero = nd.Tensor(np.zeros((1, rows.shape[1]), dtype=rows.dtype))
    table = ops.concat([rows, zero], axis=0)
    index = np.where(valid, index, rows.shape[0])
    return table[index]


def encode_phrases_mean(e, spans):
    """Mean of the ``e`` rows in each span; (0, D) when there are no spans."""
    e = nd.as_tensor(e)
    if not spans:
        return nd.Tensor(np.zeros((0, e.shape[-1]), dtype=e.dtype))
    return ops.stack([e[s:t].mean(axis=0) for s, t in spans], axis=0)


class TextEncoder(nd.Module):
    """Word embedding + bi-LSTM sentence encoder + phrase LSTM.

    ``dim`` is the common semantic size D (each LSTM direction gets D/2).
    ``phrase_mode="mean"`` swaps the phrase LSTM for span averaging.
    """

    def __init__(self, vocab, dim=32, emb_dim=32, rng=None, phrase_mode="lstm"):
        if dim % 2:
            raise ShapeError("semantic dimension must be even", (dim,))
        rng = rng or nd.RngStream(0)
        self.vocab = vocab
        self.dim = dim
        self.phrase_mode = phrase_mode
        self.embed = nd.param(rng.normal((len(vocab), emb_dim), 1.0 / np.sqrt(emb_dim)))
        self.fwd = nd.LSTMCell(emb_dim, dim // 2, rng)
        self.bwd = nd.LSTMCell(emb_dim, dim // 2, rng)
        self.phrase = nd.LSTMCell(dim, dim, rng)

    # batched path used by training
    def __call__(self, batch: TextBatch) -> TextEncoding:
        m, t_len = batch.ids.shape
        emb = self.embed[batch.ids]
        f_out, f_last = nd.run_lstm(self.fwd, emb, batch.mask)
        b_out, b_first = nd.run_lstm(self.bwd, emb, batch.mask, reverse=True)
        keep = batch.mask[..., None].astype(emb.dtype)
        words = ops.concat([f_out, b_out], axis=2) * keep
        sentence = ops.concat([f_last, b_first], axis=1)
        phrases, pmask = self._phrases(words, batch.spans, t_len)
        return TextEncoding(words, batch.mask, sentence, phrases, pmask)

    def _phrases(self, words, spans, t_len):
        m, d = words.shape[0], words.shape[2]
        counts = [len(s) for s in spans]
        p_max = max(1, max(counts))
        pmask = np.zeros((m, p_max), dtype=bool)
        for i, c in enumerate(counts):
            pmask[i, :c] = True
        flat_spans = [(i, s, e) for i, sp in enumerate(spans) for s, e in sp]
        if not flat_spans:
            return nd.Tensor(np.zeros((m, p_max, d), dtype=words.dtype)), pmask
        for i, s, e in flat_spans:
            if not 0 <= s < e <= t_len:
                raise ShapeError(f"phrase span {(s, e)} outside sentence of length {t_len}")
        rows = words.reshape(m * t_len, d)
        if self.phrase_mode == "mean":
            vecs = ops.stack([rows[i * t_len + s:i * t_len + e].mean(axis=0) for i, s, e in flat_spans], axis=0)
        else:
            l_max = max(e - s for _, s, e in flat_spans)
            idx = np.zeros((len(flat_spans), l_max), dtype=np.int64)
            smask = np.zeros((len(flat_spans), l_max), dtype=bool)
            for k, (i, s, e) in enumerate(flat_spans):
                idx[k, :e - s] = np.arange(i * t_len + s, i * t_len + e)
                smask[k, :e - s] = True
            _, vecs = nd.run_lstm(self.phrase, rows[idx], smask)
        sel = np.zeros((m, p_max), dtype=np.int64)
        k = 0
        for i, c in enumerate(counts):
            sel[i, :c] = np.arange(k, k + c)
            k += c
        return _gather_rows(vecs, sel, pmask), pmask

    # single-sentence helpers
    def encode_words(self, tokens):
        """(e: T x D, e_bar: D) for one token list."""
        if len(tokens) == 0:
            raise EmptySentenceError("cannot encode an empty sentence")
        ts = TaggedSentence([(t, OTHER) for t in tokens], [])
        enc = self(make_batch([ts], self.vocab))
        return enc.words[0], enc.sentence[0]

    def encode_phrases(self, e, spans):
        """Phrase features (T' x D) for spans over one sentence's ``e`` rows."""
        e = nd.as_tensor(e)
        if not spans:
            return nd.Tensor(np.zeros((0, self.dim), dtype=e.dtype))
        p, _ = self._phrases(e.reshape(1, *e.shape), [list(spans)], e.shape[0])
        return p[0]

    def encode(self, sentences):
        return self(make_batch(sentences, self.vocab))
