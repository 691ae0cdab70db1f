"""Blank-infilling corruption: span sampling, [MASK]/[gMASK] samples, packing.

A corrupted sample is laid out as two parts::

    part A: x_corrupt  (original tokens, each span replaced by one placeholder)
    part B: for each span in permutation order: [SOP] s_0 s_1 ... s_{l-1}

Every part-B position predicts the next span token, and the last token of a
span predicts [EOP]. Part A carries no loss.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD, MASK, GMASK, SOP, EOP, UNK = range(6)
NUM_RESERVED = 6
RESERVED_NAMES = ("[PAD]", "[MASK]", "[gMASK]", "[SOP]", "[EOP]", "[UNK]")

SHORT_MASK = "short-mask"
GMASK_KIND = "gmask"
NO_CORRUPTION = "none"


class ContractError(ValueError):
    """Inputs violate a documented precondition."""


@dataclass(frozen=True)
class CorruptionConfig:
    mask_prob: float = 0.15
    average_block_length: float = 3.0
    gmask_prob: float = 0.7
    min_gmask_ratio: float = 0.2
    aggregated_samples_per_sequence: int = 4
    short_window: int = 512
    seq_length: int = 2048
    short_seq_prob: float = 0.02
    single_span_prob: float = 0.02

    def __post_init__(self):
        if not 0.0 <= self.mask_prob < 1.0:
            raise ContractError(f"mask_prob must be in [0, 1), got {self.mask_prob}")
        if not 0.0 < self.min_gmask_ratio < 1.0:
            raise ContractError("min_gmask_ratio must be in (0, 1)")
        if not 0.0 <= self.gmask_prob <= 1.0:
            raise ContractError("gmask_prob must be in [0, 1]")
        if self.average_block_length <= 0:
            raise ContractError("average_block_length must be positive")
        if self.aggregated_samples_per_sequence * self.short_window != self.seq_length:
            raise ContractError(
                "aggregated_samples_per_sequence * short_window must equal seq_length"
            )

    @property
    def truncated_mean_span(self) -> float:
        """Mean of Poisson(lambda) conditioned on a draw >= 1."""
        lam = self.average_block_length
        return lam / -math.expm1(-lam)


@dataclass(frozen=True)
class SpanSet:
    spans: tuple[tuple[int, int], ...]
    permutation: tuple[int, ...]
    degenerate: bool = False

    def __post_init__(self):
        if sorted(self.permutation) != list(range(len(self.spans))):
            raise ContractError("permutation must be a permutation of span indices")

    def __len__(self):
        return len(self.spans)

    @property
    def total_length(self) -> int:
        return sum(n for _, n in self.spans)


@dataclass
class CorruptedSample:
    input_tokens: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    positions: np.ndarray
    kind: str
    span_map: np.ndarray
    context_length: int
    spans: SpanSet
    original_tokens: np.ndarray = field(repr=False)
    _mask: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.input_tokens)

    @property
    def attention_mask(self) -> np.ndarray:
        if self._mask is None:
            self._mask = build_attention_mask(self)
        return self._mask

    @property
    def placeholder_positions(self) -> list[int]:
        """Index in x_corrupt of each span's placeholder (original span order)."""
        out, removed = [], 0
        for k, (start, n) in enumerate(self.spans.spans):
            out.append(start - removed + k)
            removed += n
        return out

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "tokens": self.original_tokens.tolist(),
            "spans": [list(s) for s in self.spans.spans],
            "permutation": list(self.spans.permutation),
            "positions": self.positions.tolist(),
            "targets": self.targets[self.target_mask].tolist(),
        }


# -- span sampling ----------------------------------------------------------


def _draw_span_length(lam: float, rng: np.random.Generator) -> int:
    # zero draws are redrawn: Poisson conditioned on >= 1
    while True:
        n = int(rng.poisson(lam))
        if n > 0:
            return n


def _place_spans(lengths: Sequence[int], length: int, rng) -> list[tuple[int, int]] | None:
    """Uniformly place spans with at least one unmasked token between neighbours."""
    m = len(lengths)
    free = length - sum(lengths) - (m - 1)
    if free < 0:
        return None
    # choose which of the (free + m) slots hold spans: uniform over gap compositions
    slots = np.sort(rng.choice(free + m, size=m, replace=False))
    spans, cursor = [], 0
    for k, (slot, n) in enumerate(zip(slots, lengths)):
        gap = int(slot) - k  # free tokens preceding this span in slot order
        start = gap + cursor
        spans.append((start, n))
        cursor += n + 1
    return spans


def sample_spans(length: int, cfg: CorruptionConfig, rng: np.random.Generator) -> SpanSet:
    """Draw Poisson-length spans until roughly ``mask_prob * length`` tokens are covered.

    Drawing stops once the uncovered budget is less than half a mean span, so
    the expected coverage lands on the budget instead of overshooting it.
    """
    if length < 8:
        raise ContractError(f"sample_spans needs length >= 8, got {length}")
    budget = cfg.mask_prob * length
    if budget <= 0:
        return SpanSet((), ())
    half_mean = 0.5 * cfg.truncated_mean_span
    lengths: list[int] = []
    total = 0
    while not lengths or total < budget - half_mean:
        n = _draw_span_length(cfg.average_block_length, rng)
        lengths.append(n)
        total += n
    if cfg.single_span_prob > 0 and rng.random() < cfg.single_span_prob:
        lengths = [total]
    lengths = [lengths[i] for i in rng.permutation(len(lengths))]
    placed = _place_spans(lengths, length, rng)
    if placed is None:
        n = max(1, min(math.ceil(budget), length - 1))
        start = int(rng.integers(0, length - n + 1))
        return SpanSet(((start, n),), (0,), degenerate=True)
    perm = tuple(int(i) for i in rng.permutation(len(placed)))
    return SpanSet(tuple(placed), perm)


# -- sample construction ----------------------------------------------------


def _validate_spans(spans: SpanSet, length: int):
    prev_end = -1
    for start, n in spans.spans:
        if n < 1:
            raise ContractError(f"span length must be >= 1, got {n}")
        if start < 0 or start + n > length:
            raise ContractError(f"span ({start}, {n}) outside sequence of {length}")
        if start < prev_end:
            raise ContractError("spans overlap or are not sorted by start")
        prev_end = start + n


def _build(tokens, spans: SpanSet, kind: str, placeholder: int) -> CorruptedSample:
    tokens = np.asarray(tokens, dtype=np.int64)
    _validate_spans(spans, len(tokens))

    x_corrupt: list[int] = []
    cursor = 0
    for start, n in spans.spans:
        x_corrupt.extend(tokens[cursor:start])
        x_corrupt.append(placeholder)
        cursor = start + n
    x_corrupt.extend(tokens[cursor:])
    ctx = len(x_corrupt)

    inputs = list(x_corrupt)
    targets = [-1] * ctx
    span_map = [(-1, -1)] * ctx
    for idx in spans.permutation:
        start, n = spans.spans[idx]
        body = tokens[start:start + n].tolist()
        inputs.extend([SOP] + body)
        targets.extend(body + [EOP])
        span_map.extend((idx, off) for off in range(n + 1))

    sample = CorruptedSample(
        input_tokens=np.array(inputs, dtype=np.int64),
        targets=np.array(targets, dtype=np.int64),
        target_mask=np.array(targets) >= 0,
        positions=np.zeros(len(inputs), dtype=np.int64),
        kind=kind if len(spans) else NO_CORRUPTION,
        span_map=np.array(span_map, dtype=np.int64).reshape(-1, 2),
        context_length=ctx,
        spans=spans,
        original_tokens=tokens,
    )
    sample.positions = assign_position_ids(sample)
    return sample


def corrupt_mask(tokens, spans: SpanSet) -> CorruptedSample:
    """Replace each span by one [MASK] and append the spans in permutation order."""
    return _build(tokens, spans, SHORT_MASK, MASK)


def corrupt_gmask(tokens, cfg: CorruptionConfig, rng: np.random.Generator) -> CorruptedSample:
    """Keep a prefix as context and mask the suffix with a single [gMASK]."""
    n = len(tokens)
    if n < 2:
        raise ContractError("corrupt_gmask needs at least 2 tokens")
    lo = min(max(1, math.ceil(cfg.min_gmask_ratio * n)), n - 1)
    masked = int(rng.integers(lo, n))  # uniform on [lo, n-1]
    spans = SpanSet(((n - masked, masked),), (0,))
    return _build(tokens, spans, GMASK_KIND, GMASK)


def reconstruct(sample: CorruptedSample) -> np.ndarray:
    """Undo the corruption: splice span targets back into x_corrupt."""
    ctx = sample.input_tokens[: sample.context_length]
    bodies: dict[int, list[int]] = {}
    for i in range(sample.context_length, len(sample)):
        idx, off = sample.span_map[i]
        bodies.setdefault(int(idx), [])
        if sample.targets[i] != EOP:
            bodies[int(idx)].append(int(sample.targets[i]))
    holes = dict(zip(sample.placeholder_positions, range(len(sample.spans))))
    out: list[int] = []
    for i, tok in enumerate(ctx):
        if i in holes:
            out.extend(bodies[holes[i]])
        else:
            out.append(int(tok))
    return np.array(out, dtype=np.int64)


# -- visibility -------------------------------------------------------------


def build_attention_mask(sample: CorruptedSample) -> np.ndarray:
    """Boolean ``[L, L]`` matrix; entry ``(i, j)`` means row i may attend to j."""
    L = len(sample)
    ctx = sample.context_length
    mask = np.zeros((L, L), dtype=bool)
    mask[:, :ctx] = True
    start = ctx
    for idx in sample.spans.permutation:
        n = sample.spans.spans[idx][1] + 1
        end = start + n
        mask[start:end, ctx:start] = True  # permutation-earlier spans
        mask[start:end, start:end] = np.tril(np.ones((n, n), dtype=bool))
        start = end
    return mask


def conditioning_set(sample: CorruptedSample, i: int) -> set[tuple[int, int]] | None:
    """Part-B tokens, as (span, offset), that the prediction at token ``i`` conditions on.

    Part-B token at (span a, offset o) predicts s_{a,o}; it conditions on
    x_corrupt, every span earlier than a in the permutation, and s_{a,<o}
    (which, as inputs, are the [SOP] marker and tokens up to offset o).
    A context token conditions on x_corrupt only, signalled by ``None``.
    """
    span_i, off_i = (int(v) for v in sample.span_map[i])
    if span_i < 0:
        return None
    order = list(sample.spans.permutation)
    earlier = order[: order.index(span_i)]
    cond = {(s, o) for s in earlier for o in range(sample.spans.spans[s][1] + 1)}
    cond |= {(span_i, o) for o in range(off_i + 1)}
    return cond


def brute_force_visibility(sample: CorruptedSample, i: int, j: int) -> bool:
    """Is token ``j`` in the conditioning set of the prediction made at token ``i``?"""
    return _visible(conditioning_set(sample, i), sample.span_map[j])


def _visible(cond, entry) -> bool:
    span_j, off_j = int(entry[0]), int(entry[1])
    if span_j < 0:
        return True  # x_corrupt is always conditioned on
    return cond is not None and (span_j, off_j) in cond


def brute_force_mask(sample: CorruptedSample) -> np.ndarray:
    """Visibility matrix evaluated token pair by token pair from the conditioning sets."""
    L = len(sample)
    entries = sample.span_map.tolist()
    out = np.zeros((L, L), dtype=bool)
    for i in range(L):
        cond = conditioning_set(sample, i)
        out[i] = [_visible(cond, e) for e in entries]
    return out


# -- positions --------------------------------------------------------------


def assign_position_ids(sample: CorruptedSample) -> np.ndarray:
    """1-D positional ids.

    Context tokens get 0..s-1. Under [MASK], every part-B token of a span
    carries the index of that span's placeholder. Under [gMASK], part B
    continues from the placeholder: placeholder, placeholder+1, ...
    """
    ctx = sample.context_length
    pos = np.empty(len(sample), dtype=np.int64)
    pos[:ctx] = np.arange(ctx)
    anchors = sample.placeholder_positions
    for i in range(ctx, len(sample)):
        idx, off = sample.span_map[i]
        pos[i] = anchors[idx] + (off if sample.kind == GMASK_KIND else 0)
    return pos


# -- packing ----------------------------------------------------------------


@dataclass
class PackedSequence:
    input_tokens: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    positions: np.ndarray
    segment_ids: np.ndarray
    attention_mask: np.ndarray
    kinds: tuple[str, ...]

    def __len__(self):
        return len(self.input_tokens)


def _pad_block(n: int) -> np.ndarray:
    # padding attends only to itself so no softmax row is empty
    return np.eye(n, dtype=bool)


def pack_samples(samples: Sequence[CorruptedSample], cfg: CorruptionConfig,
                 window: int | None = None) -> PackedSequence:
    """Concatenate samples into one ``seq_length`` window with block-diagonal attention.

    Each sample is padded to ``window`` (default ``short_window``).
    """
    if len(samples) != cfg.aggregated_samples_per_sequence:
        raise ContractError(
            f"expected {cfg.aggregated_samples_per_sequence} samples, got {len(samples)}"
        )
    window = cfg.short_window if window is None else window
    L = window * len(samples)
    tokens = np.full(L, PAD, dtype=np.int64)
    targets = np.full(L, -1, dtype=np.int64)
    tmask = np.zeros(L, dtype=bool)
    positions = np.zeros(L, dtype=np.int64)
    segments = np.full(L, -1, dtype=np.int64)
    attn = np.zeros((L, L), dtype=bool)
    for k, s in enumerate(samples):
        n = len(s)
        if n > window:
            raise ContractError(f"sample of length {n} overflows window {window}")
        o = k * window
        tokens[o:o + n] = s.input_tokens
        targets[o:o + n] = s.targets
        tmask[o:o + n] = s.target_mask
        positions[o:o + n] = s.positions
        segments[o:o + n] = k
        attn[o:o + n, o:o + n] = s.attention_mask
        attn[o + n:o + window, o + n:o + window] = _pad_block(window - n)
    return PackedSequence(tokens, targets, tmask, positions, segments, attn,
                          tuple(s.kind for s in samples))


def single_sequence(sample: CorruptedSample, length: int) -> PackedSequence:
    """Place one (usually [gMASK]) sample in a window of ``length``."""
    cfg = CorruptionConfig(aggregated_samples_per_sequence=1, short_window=length,
                           seq_length=length)
    return pack_samples([sample], cfg)


# -- sample stream ----------------------------------------------------------


def draw_kind(cfg: CorruptionConfig, rng: np.random.Generator) -> str:
    return GMASK_KIND if rng.random() < cfg.gmask_prob else SHORT_MASK


def _window_length(full: int, cfg: CorruptionConfig, rng, minimum: int) -> int:
    if cfg.short_seq_prob > 0 and rng.random() < cfg.short_seq_prob and full > minimum:
        return int(rng.integers(minimum, full + 1))
    return full


def make_short_sample(tokens, cfg: CorruptionConfig, rng) -> CorruptedSample:
    """[MASK]-corrupt a prefix of ``tokens`` so the result fits ``short_window``."""
    # x_corrupt + part B is L + 2m long; start from a length that usually fits
    raw = max(8, int(cfg.short_window / (1.0 + 2.0 * cfg.mask_prob)))
    raw = min(raw, len(tokens))
    raw = _window_length(raw, cfg, rng, minimum=min(8, raw))
    while True:
        spans = sample_spans(raw, cfg, rng)
        sample = corrupt_mask(tokens[:raw], spans)
        if len(sample) <= cfg.short_window:
            return sample
        raw -= len(sample) - cfg.short_window


def make_gmask_sample(tokens, cfg: CorruptionConfig, rng, window: int | None = None):
    window = cfg.seq_length if window is None else window
    raw = min(window - 2, len(tokens))  # [gMASK] and [SOP] add two tokens
    raw = _window_length(raw, cfg, rng, minimum=2)
    return corrupt_gmask(tokens[:raw], cfg, rng)


class TokenSource:
    """Endless token stream: documents concatenated in order, read in chunks."""

    def __init__(self, documents: Sequence[Sequence[int]]):
        flat = [t for doc in documents for t in doc]
        if len(flat) < 8:
            raise ContractError("corpus has fewer than 8 tokens")
        self.tokens = np.asarray(flat, dtype=np.int64)
        self.cursor = 0

    def take(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        filled = 0
        while filled < n:
            chunk = self.tokens[self.cursor:self.cursor + n - filled]
            out[filled:filled + len(chunk)] = chunk
            filled += len(chunk)
            self.cursor = (self.cursor + len(chunk)) % len(self.tokens)
        return out


def next_sequence(source: TokenSource, cfg: CorruptionConfig, rng) -> PackedSequence:
    """One training window: a [gMASK] sample, or several packed [MASK] samples."""
    if draw_kind(cfg, rng) == GMASK_KIND:
        sample = make_gmask_sample(source.take(cfg.seq_length - 2), cfg, rng)
        return single_sequence(sample, cfg.seq_length)
    samples = [make_short_sample(source.take(cfg.short_window), cfg, rng)
               for _ in range(cfg.aggregated_samples_per_sequence)]
    return pack_samples(samples, cfg)


# -- toy tokenizer / corpus -------------------------------------------------


class ToyTokenizer:
    """Whitespace tokenizer with a frequency-capped vocabulary and reserved ids."""

    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        self.index = {w: i + NUM_RESERVED for i, w in enumerate(self.words)}

    @classmethod
    def fit(cls, lines: Iterable[str], vocab_size: int) -> "ToyTokenizer":
        if vocab_size <= NUM_RESERVED:
            raise ContractError(f"vocab_size must exceed {NUM_RESERVED}")
        counts = Counter(w for line in lines for w in line.split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([w for w, _ in ranked[: vocab_size - NUM_RESERVED]])

    @property
    def vocab_size(self) -> int:
        return NUM_RESERVED + len(self.words)

    def encode(self, line: str) -> list[int]:
        return [self.index.get(w, UNK) for w in line.split()]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            out.append(RESERVED_NAMES[i] if i < NUM_RESERVED else self.words[i - NUM_RESERVED])
        return " ".join(out)


def read_corpus(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def synthetic_corpus(n_docs: int, rng: np.random.Generator, n_words: int = 48,
                     doc_length: int = 64) -> list[str]:
    """Documents drawn from a sparse first-order Markov chain over ``n_words`` words.

    Each word has three likely successors, so there is structure to learn.
    """
    words = [f"w{i:03d}" for i in range(n_words)]
    succ = rng.integers(0, n_words, size=(n_words, 3))
    docs = []
    for _ in range(n_docs):
        cur = int(rng.integers(n_words))
        out = [words[cur]]
        for _ in range(doc_length - 1):
            if rng.random() < 0.9:
                cur = int(succ[cur, rng.integers(3)])
            else:
                cur = int(rng.integers(n_words))
            out.append(words[cur])
        docs.append(" ".join(out))
    return docs


def dump_samples(samples: Iterable[CorruptedSample], fh) -> int:
    n = 0
    for s in samples:
        fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")
        n += 1
    return n


def replay_record(record: dict) -> CorruptedSample:
    """Rebuild a sample from a dump record (inverse of ``to_record``)."""
    spans = SpanSet(tuple(tuple(s) for s in record["spans"]), tuple(record["permutation"]))
    tokens = record["tokens"]
    if record["kind"] == GMASK_KIND:
        return _build(tokens, spans, GMASK_KIND, GMASK)
    return corrupt_mask(tokens, spans)
