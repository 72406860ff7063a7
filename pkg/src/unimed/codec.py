"""Unified discrete-token format for class, box and mask annotations.

Id layout of a vocabulary (all ranges contiguous, in this order):

    specials   PAD, BOS, EOS, NO_OBJECT, SEP
    mask       MASK_ZERO, MASK_ONE
    coords     one id per coordinate bin, ``coord_base + b``
    text       class-name subwords, sorted

Box wire order is ``y_min, x_min, y_max, x_max`` (top-left corner first),
one bin table shared by both axes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPECIALS = ("<pad>", "<bos>", "<eos>", "<no_object>", "<sep>")
MASK_TOKENS = ("<mask_0>", "<mask_1>")
KINDS = ("classification", "detection", "segmentation")
MAX_NGRAM = 4
VOCAB_FORMAT = "unimed-vocab v1"


class CodecError(ValueError):
    pass


class ConfigurationError(CodecError):
    pass


class VocabularyError(CodecError):
    pass


class RangeError(CodecError):
    pass


class ValidationError(CodecError):
    pass


@dataclass(frozen=True)
class UnifiedVocabulary:
    text_tokens: dict[str, int]
    class_names: tuple[str, ...]
    bins: int = 1000

    # fixed special ids
    pad: int = 0
    bos: int = 1
    eos: int = 2
    no_object: int = 3
    sep: int = 4
    mask_zero: int = 5
    mask_one: int = 6

    @property
    def special_tokens(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(SPECIALS)}

    @property
    def coord_base(self) -> int:
        return len(SPECIALS) + len(MASK_TOKENS)

    @property
    def text_base(self) -> int:
        return self.coord_base + self.bins

    @property
    def coord_tokens(self) -> range:
        return range(self.coord_base, self.coord_base + self.bins)

    @property
    def total_size(self) -> int:
        return self.text_base + len(self.text_tokens)

    def __len__(self) -> int:
        return self.total_size

    def coord_id(self, b: int) -> int:
        if not 0 <= b < self.bins:
            raise RangeError(f"bin {b} outside [0, {self.bins})")
        return self.coord_base + b

    def is_coord(self, i: int) -> bool:
        return self.coord_base <= i < self.text_base

    def is_text(self, i: int) -> bool:
        return self.text_base <= i < self.total_size

    def is_mask(self, i: int) -> bool:
        return i in (self.mask_zero, self.mask_one)

    def id_to_token(self, i: int) -> str:
        if 0 <= i < len(SPECIALS):
            return SPECIALS[i]
        if self.is_mask(i):
            return MASK_TOKENS[i - self.mask_zero]
        if self.is_coord(i):
            return f"<bin_{i - self.coord_base}>"
        if self.is_text(i):
            return self._inverse_text[i]
        raise VocabularyError(f"id {i} outside vocabulary of size {self.total_size}")

    @property
    def _inverse_text(self) -> dict[int, str]:
        inv = self.__dict__.get("_inv_cache")
        if inv is None:
            inv = {v: k for k, v in self.text_tokens.items()}
            object.__setattr__(self, "_inv_cache", inv)
        return inv

    def tokenize(self, word: str) -> list[int]:
        """Greedy longest-match split of ``word`` into subword ids."""
        ids = []
        pos = 0
        while pos < len(word):
            for n in range(min(MAX_NGRAM, len(word) - pos), 0, -1):
                piece = word[pos : pos + n]
                if piece in self.text_tokens:
                    ids.append(self.text_tokens[piece])
                    pos += n
                    break
            else:
                raise VocabularyError(f"character {word[pos]!r} of {word!r} not in vocabulary")
        return ids

    def class_ids(self, name: str) -> list[int]:
        if name not in self.class_names:
            raise VocabularyError(f"unknown class name {name!r}")
        return self.tokenize(name)

    def detokenize(self, ids: Iterable[int]) -> str:
        return "".join(self._inverse_text[i] for i in ids)

    def max_class_len(self) -> int:
        return max(len(self.tokenize(c)) for c in self.class_names)

    def max_target_len(self) -> int:
        """Longest per-query target: four coords, class subwords, EOS."""
        return 4 + self.max_class_len() + 1

    # -- file format -----------------------------------------------------

    def dumps(self) -> str:
        lines = [f"# {VOCAB_FORMAT} bins={self.bins}"]
        for name in self.class_names:
            lines.append(f"class\t{json.dumps(name)}")
        for i, name in enumerate(SPECIALS):
            lines.append(f"{i}\tspecial\t{name}")
        for i, name in enumerate(MASK_TOKENS):
            lines.append(f"{self.mask_zero + i}\tmask\t{name}")
        lines.append(f"{self.coord_base}-{self.text_base - 1}\tcoord\t{self.bins}")
        for tok, i in sorted(self.text_tokens.items(), key=lambda kv: kv[1]):
            lines.append(f"{i}\ttext\t{json.dumps(tok)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "UnifiedVocabulary":
        lines = text.splitlines()
        if not lines or not lines[0].startswith(f"# {VOCAB_FORMAT} "):
            raise VocabularyError("missing or unsupported vocabulary header")
        bins = int(lines[0].split("bins=")[1])
        classes: list[str] = []
        text: dict[str, int] = {}
        for line in lines[1:]:
            parts = line.split("\t")
            if parts[0] == "class":
                classes.append(json.loads(parts[1]))
            elif parts[1] == "text":
                text[json.loads(parts[2])] = int(parts[0])
            elif parts[1] == "special" and SPECIALS[int(parts[0])] != parts[2]:
                raise VocabularyError(f"special id mismatch on line {line!r}")
        vocab = cls(text_tokens=text, class_names=tuple(classes), bins=bins)
        if sorted(text.values()) != list(range(vocab.text_base, vocab.total_size)):
            raise VocabularyError("text ids are not contiguous after the coordinate range")
        return vocab

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "UnifiedVocabulary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()


def char_ngrams(word: str, max_n: int = MAX_NGRAM) -> set[str]:
    return {word[i : i + n] for n in range(1, max_n + 1) for i in range(len(word) - n + 1)}


def build_vocabulary(class_corpus: Sequence[str], bins: int = 1000) -> UnifiedVocabulary:
    """Build the token space for a list of class names.

    The subword table holds every character n-gram (n <= 4) of every name,
    sorted so that the same corpus always yields the same ids.
    """
    names = list(dict.fromkeys(class_corpus))
    if not names or any(not n for n in names):
        raise ConfigurationError("class corpus must be a non-empty list of non-empty names")
    if bins < 1:
        raise ConfigurationError("bins must be positive")
    subwords = sorted(set().union(*(char_ngrams(n) for n in names)))
    base = len(SPECIALS) + len(MASK_TOKENS) + bins
    return UnifiedVocabulary(
        text_tokens={s: base + i for i, s in enumerate(subwords)},
        class_names=tuple(names),
        bins=bins,
    )


def quantize_coord(v: float, extent: float, bins: int = 1000) -> int:
    if extent <= 0:
        raise RangeError(f"extent must be positive, got {extent}")
    if not 0 <= v <= extent:
        raise RangeError(f"coordinate {v} outside [0, {extent}]")
    return min(int(math.floor(v / extent * bins)), bins - 1)


def dequantize_coord(b: int, extent: float, bins: int = 1000) -> float:
    if not 0 <= b < bins:
        raise RangeError(f"bin {b} outside [0, {bins})")
    return (b + 0.5) / bins * extent


# -- records and sequences ------------------------------------------------


@dataclass
class AnnotationRecord:
    image_id: str
    classes: list[str] = field(default_factory=list)
    boxes: list[tuple[float, float, float, float]] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    present_kinds: frozenset[str] = frozenset()

    def validate(self, image_size: tuple[int, int]) -> None:
        h, w = image_size
        unknown = set(self.present_kinds) - set(KINDS)
        if unknown:
            raise ValidationError(f"unknown annotation kinds {sorted(unknown)}")
        if "detection" in self.present_kinds:
            if len(self.boxes) != len(self.classes):
                raise ValidationError("boxes and classes are not index-aligned")
            for box in self.boxes:
                x0, y0, x1, y1 = box
                if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                    raise RangeError(f"malformed box {box} for image {w}x{h}")
        elif self.boxes:
            raise ValidationError("boxes present but detection not in present_kinds")
        if "segmentation" in self.present_kinds:
            if len(self.masks) != len(self.classes):
                raise ValidationError("masks and classes are not index-aligned")
            for m in self.masks:
                if m.shape != (h, w):
                    raise ValidationError(f"mask shape {m.shape} != image {(h, w)}")
        elif self.masks:
            raise ValidationError("masks present but segmentation not in present_kinds")

    def restricted(self, kinds: Iterable[str]) -> "AnnotationRecord":
        """Copy of this record keeping only annotation ``kinds``."""
        keep = frozenset(kinds) & self.present_kinds
        return AnnotationRecord(
            image_id=self.image_id,
            classes=list(self.classes) if keep else [],
            boxes=list(self.boxes) if "detection" in keep else [],
            masks=[m.copy() for m in self.masks] if "segmentation" in keep else [],
            present_kinds=keep,
        )


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    kind: str  # "class" | "box+class" | "mask_grid"


def _class_kind(rec: AnnotationRecord) -> str:
    return "box+class" if "detection" in rec.present_kinds else "class"


def box_tokens(box: Sequence[float], vocab: UnifiedVocabulary, image_size: tuple[int, int]) -> list[int]:
    h, w = image_size
    x0, y0, x1, y1 = box
    return [
        vocab.coord_id(quantize_coord(y0, h, vocab.bins)),
        vocab.coord_id(quantize_coord(x0, w, vocab.bins)),
        vocab.coord_id(quantize_coord(y1, h, vocab.bins)),
        vocab.coord_id(quantize_coord(x1, w, vocab.bins)),
    ]


def encode_annotation(
    rec: AnnotationRecord,
    vocab: UnifiedVocabulary,
    image_size: tuple[int, int],
    grid: int = 16,
) -> list[TokenSequence]:
    rec.validate(image_size)
    out = []
    kind = _class_kind(rec)
    for i, name in enumerate(rec.classes):
        body = vocab.class_ids(name)
        if kind == "box+class":
            body = box_tokens(rec.boxes[i], vocab, image_size) + body
        out.append(TokenSequence((vocab.bos, *body, vocab.eos), kind))
        if "segmentation" in rec.present_kinds:
            out.append(encode_mask_patches(rec.masks[i], grid, vocab))
    return out


# -- mask patches ---------------------------------------------------------


def _as_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.dtype != bool and not np.isin(mask, (0, 1)).all():
        raise ValidationError("mask is not binary")
    return mask.astype(bool)


def block_majority(mask: np.ndarray, grid: int) -> np.ndarray:
    """Downsample an HxW binary mask to GxG: a cell is on when >= 50% foreground.

    H and W are zero-padded up to multiples of G first.
    """
    mask = _as_binary(mask)
    h, w = mask.shape
    ph, pw = -(-h // grid), -(-w // grid)
    padded = np.zeros((ph * grid, pw * grid), dtype=np.int64)
    padded[:h, :w] = mask
    counts = padded.reshape(grid, ph, grid, pw).sum(axis=(1, 3))
    return 2 * counts >= ph * pw


def encode_mask_patches(mask: np.ndarray, grid: int, vocab: UnifiedVocabulary) -> TokenSequence:
    cells = block_majority(mask, grid).ravel()
    body = np.where(cells, vocab.mask_one, vocab.mask_zero).tolist()
    return TokenSequence((vocab.bos, *body, vocab.eos), "mask_grid")


def paint_cells(cells: np.ndarray, h: int, w: int) -> np.ndarray:
    grid = cells.shape[0]
    ph, pw = -(-h // grid), -(-w // grid)
    full = np.repeat(np.repeat(cells, ph, axis=0), pw, axis=1)
    return full[:h, :w].copy()


def decode_mask_patches(seq: TokenSequence | Sequence[int], grid: int, h: int, w: int, vocab: UnifiedVocabulary) -> np.ndarray:
    ids = list(seq.ids if isinstance(seq, TokenSequence) else seq)
    if ids and ids[0] == vocab.bos:
        ids = ids[1:]
    if ids and ids[-1] == vocab.eos:
        ids = ids[:-1]
    if len(ids) != grid * grid or not all(vocab.is_mask(i) for i in ids):
        raise ValidationError(f"expected {grid * grid} mask tokens")
    cells = (np.asarray(ids) == vocab.mask_one).reshape(grid, grid)
    return paint_cells(cells, h, w)


# -- parsing --------------------------------------------------------------


@dataclass
class ParseReport:
    bos_seen: int = 0
    objects: int = 0
    masks: int = 0
    no_object: int = 0
    empty: int = 0
    dropped: int = 0

    @property
    def errors(self) -> int:
        return self.dropped

    def balanced(self) -> bool:
        return self.bos_seen == self.objects + self.masks + self.no_object + self.empty + self.dropped


@dataclass
class ParsedObject:
    name: str
    box: tuple[float, float, float, float] | None
    mask: np.ndarray | None = None


def parse_fragment(body: Sequence[int], vocab: UnifiedVocabulary) -> tuple[str, object]:
    """Classify the tokens between BOS and EOS.

    Returns one of ("empty", None), ("mask", cells-list), ("object",
    (coord bins or None, class name)), ("bad", reason).
    """
    if not body:
        return "empty", None
    if vocab.is_mask(body[0]):
        if all(vocab.is_mask(i) for i in body):
            return "mask", list(body)
        return "bad", "mixed mask tokens"
    coords = None
    rest = list(body)
    if vocab.is_coord(rest[0]):
        if len(rest) < 5 or not all(vocab.is_coord(i) for i in rest[:4]):
            return "bad", "truncated box"
        coords = [i - vocab.coord_base for i in rest[:4]]
        rest = rest[4:]
        if coords[0] >= coords[2] + 1 or coords[1] >= coords[3] + 1:
            return "bad", "inverted box"
    if not rest or not all(vocab.is_text(i) for i in rest):
        return "bad", "class tokens expected"
    name = vocab.detokenize(rest)
    if name not in vocab.class_names:
        return "bad", f"unknown class {name!r}"
    return "object", (coords, name)


def iter_fragments(ids: Sequence[int], vocab: UnifiedVocabulary):
    """Yield (body, terminated_cleanly) for each BOS-started fragment.

    A fragment runs to the first EOS; a new BOS or the end of the stream
    before EOS terminates it uncleanly. Tokens outside fragments are ignored.
    """
    body = None
    for tok in ids:
        if tok == vocab.bos:
            if body is not None:
                yield body, False
            body = []
        elif body is None:
            continue
        elif tok == vocab.eos:
            yield body, True
            body = None
        else:
            body.append(tok)
    if body is not None:
        yield body, False


def decode_prediction(
    seqs: Iterable[TokenSequence | Sequence[int]],
    vocab: UnifiedVocabulary,
    image_size: tuple[int, int],
    grid: int = 16,
    image_id: str = "",
) -> tuple[AnnotationRecord, ParseReport]:
    """Parse token streams back into a record. Never raises on bad input.

    A mask-grid fragment attaches to the most recent object; objects are
    returned in stream order.
    """
    h, w = image_size
    report = ParseReport()
    objects: list[ParsedObject] = []
    for seq in seqs:
        ids = seq.ids if isinstance(seq, TokenSequence) else seq
        for body, clean in iter_fragments(ids, vocab):
            report.bos_seen += 1
            if body and body[0] == vocab.no_object:
                report.no_object += 1
                continue
            if not clean:
                report.dropped += 1
                continue
            kind, payload = parse_fragment(body, vocab)
            if kind == "empty":
                report.empty += 1
            elif kind == "object":
                coords, name = payload
                box = None
                if coords is not None:
                    yb0, xb0, yb1, xb1 = coords
                    box = (
                        dequantize_coord(xb0, w, vocab.bins),
                        dequantize_coord(yb0, h, vocab.bins),
                        dequantize_coord(xb1, w, vocab.bins),
                        dequantize_coord(yb1, h, vocab.bins),
                    )
                objects.append(ParsedObject(name, box))
                report.objects += 1
            elif kind == "mask" and len(payload) == grid * grid and objects and objects[-1].mask is None:
                cells = (np.asarray(payload) == vocab.mask_one).reshape(grid, grid)
                objects[-1].mask = paint_cells(cells, h, w)
                report.masks += 1
            else:
                report.dropped += 1
    return objects_to_record(objects, image_id), report


def objects_to_record(objects: Sequence[ParsedObject], image_id: str = "") -> AnnotationRecord:
    kinds = set()
    if objects:
        kinds.add("classification")
    if objects and all(o.box is not None for o in objects):
        kinds.add("detection")
    if objects and all(o.mask is not None for o in objects):
        kinds.add("segmentation")
    return AnnotationRecord(
        image_id=image_id,
        classes=[o.name for o in objects],
        boxes=[o.box for o in objects] if "detection" in kinds else [],
        masks=[o.mask for o in objects] if "segmentation" in kinds else [],
        present_kinds=frozenset(kinds),
    )


# -- manifest format ------------------------------------------------------


def record_to_line(rec: AnnotationRecord, image_path: str = "", mask_path: str = "") -> str:
    """One manifest line. Keys sorted, compact separators, so output is byte-stable."""
    payload = {
        "boxes": [list(b) for b in rec.boxes],
        "classes": list(rec.classes),
        "image": image_path,
        "image_id": rec.image_id,
        "mask_file": mask_path,
        "present_kinds": sorted(rec.present_kinds),
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def line_to_record(line: str, masks: Sequence[np.ndarray] = ()) -> tuple[AnnotationRecord, str, str]:
    d = json.loads(line)
    rec = AnnotationRecord(
        image_id=d["image_id"],
        classes=list(d["classes"]),
        boxes=[tuple(b) for b in d["boxes"]],
        masks=list(masks),
        present_kinds=frozenset(d["present_kinds"]),
    )
    return rec, d["image"], d["mask_file"]
