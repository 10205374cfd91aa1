"""Architecture layout strings: parsing, validation, derived dimensions.

Grammar (case sensitive, no whitespace):

    layout  := "L" int "H" int
             | "B" spec ("-" spec)* "H" int ("D" int)?
    spec    := int | int "x" int

``L12H768`` is a plain 12-layer stack (one block, no pooling, no decoder).
``B6-3x2-3x2H768D2`` is a three-block funnel whose second and third blocks
each hold 3 unique parameter sets reused 2x consecutively, with a 2-layer
decoder.  Hidden size must be a multiple of 64 because the attention head
width is fixed at 64.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

HEAD_DIM = 64
FFN_MULTIPLIER = 4


class LayoutError(ValueError):
    """Malformed or invalid layout string; carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


@dataclass(frozen=True)
class BlockSpec:
    """One encoder block: ``unique_layers`` parameter sets, each reused ``repeat`` times."""

    unique_layers: int
    repeat: int = 1

    def __post_init__(self):
        if self.unique_layers < 1 or self.repeat < 1:
            raise LayoutError(f"block {self.unique_layers}x{self.repeat} must be >= 1x1")

    @property
    def total_layers(self) -> int:
        return self.unique_layers * self.repeat

    def param_set_for_layer(self, t: int) -> int:
        """Layer ``t`` (0-based within the block) uses parameter set t // repeat.

        Consecutive grouping: a 3x2 block runs sets 0,0,1,1,2,2.
        """
        return t // self.repeat


@dataclass(frozen=True)
class LayoutSpec:
    """Parsed layout plus all derived dimensions.

    Every layout built from a string uses the fixed 64-wide attention
    heads; ``head_dim`` can only differ for programmatically constructed
    specs (tiny test models, scaled-down generators).
    """

    blocks: tuple[BlockSpec, ...]
    hidden: int
    decoder_layers: int = 0
    pooled: bool = True  # False for plain L-form layouts
    head_dim: int = HEAD_DIM
    # derived
    heads: int = field(init=False)
    ffn_inner: int = field(init=False)
    embed_dim: int = field(init=False)

    def __post_init__(self):
        if not self.blocks:
            raise LayoutError("layout needs at least one block")
        if self.hidden % self.head_dim != 0:
            raise LayoutError(f"hidden size {self.hidden} not divisible by {self.head_dim}")
        if self.decoder_layers < 0:
            raise LayoutError("decoder layer count must be >= 0")
        object.__setattr__(self, "heads", self.hidden // self.head_dim)
        object.__setattr__(self, "ffn_inner", FFN_MULTIPLIER * self.hidden)
        object.__setattr__(self, "embed_dim", self.hidden)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def total_encoder_layers(self) -> int:
        return sum(b.total_layers for b in self.blocks)

    @property
    def unique_encoder_layers(self) -> int:
        return sum(b.unique_layers for b in self.blocks)

    def block_length(self, m: int, seq_len: int) -> int:
        """Sequence length inside block ``m`` (0-based) for input length ``seq_len``."""
        return seq_len // (2 ** m)


_INT_RE = re.compile(r"\d+")


def _read_int(s: str, pos: int, what: str) -> tuple[int, int]:
    m = _INT_RE.match(s, pos)
    if m is None:
        raise LayoutError(f"expected {what} in {s!r}", pos)
    return int(m.group()), m.end()


def parse_layout(s: str) -> LayoutSpec:
    """Parse a layout string, reporting the byte offset of the first bad character."""
    if not s:
        raise LayoutError("empty layout string", 0)
    if s[0] == "L":
        layers, pos = _read_int(s, 1, "layer count")
        if pos >= len(s) or s[pos] != "H":
            raise LayoutError(f"expected 'H<hidden>' in {s!r}", pos)
        hidden, pos = _read_int(s, pos + 1, "hidden size")
        if pos != len(s):
            raise LayoutError(f"trailing characters in {s!r}", pos)
        return LayoutSpec(blocks=(BlockSpec(layers),), hidden=hidden,
                          decoder_layers=0, pooled=False)
    if s[0] != "B":
        raise LayoutError(f"layout must start with 'L' or 'B', got {s[0]!r}", 0)

    pos = 1
    blocks: list[BlockSpec] = []
    while True:
        unique, pos = _read_int(s, pos, "block layer count")
        repeat = 1
        if pos < len(s) and s[pos] == "x":
            repeat, pos = _read_int(s, pos + 1, "tying multiplier")
        blocks.append(BlockSpec(unique, repeat))
        if pos < len(s) and s[pos] == "-":
            pos += 1
            continue
        break
    if pos >= len(s) or s[pos] != "H":
        raise LayoutError(f"expected 'H<hidden>' in {s!r}", pos)
    hidden, pos = _read_int(s, pos + 1, "hidden size")
    decoder = 0
    if pos < len(s):
        if s[pos] != "D":
            raise LayoutError(f"unexpected character {s[pos]!r} in {s!r}", pos)
        decoder, pos = _read_int(s, pos + 1, "decoder depth")
    if pos != len(s):
        raise LayoutError(f"trailing characters in {s!r}", pos)
    return LayoutSpec(blocks=tuple(blocks), hidden=hidden, decoder_layers=decoder)


def format_layout(spec: LayoutSpec) -> str:
    """Inverse of parse_layout: parse(format(x)) == x for every valid spec."""
    if not spec.pooled:
        return f"L{spec.blocks[0].unique_layers}H{spec.hidden}"
    parts = []
    for b in spec.blocks:
        parts.append(str(b.unique_layers) if b.repeat == 1 else f"{b.unique_layers}x{b.repeat}")
    s = "B" + "-".join(parts) + f"H{spec.hidden}"
    if spec.decoder_layers:
        s += f"D{spec.decoder_layers}"
    return s
