"""Visual encoder, text encoder and the two-output query decoder."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .codec import UnifiedVocabulary

TASK_IDS = {"classification": 0, "detection": 1, "segmentation": 2}


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 0
    image_size: int = 64
    in_channels: int = 3
    d: int = 64
    levels: int = 3
    encoder_depth: int = 1
    heads: int = 4
    ffn: int = 128
    decoder_layers: int = 3
    num_queries: int = 10
    n_max: int = 16
    text_layers: int = 1
    max_seq_len: int = 10
    sem_hidden: int = 128

    def validate(self) -> None:
        counts = ("d", "levels", "encoder_depth", "heads", "ffn", "decoder_layers", "num_queries", "n_max", "sem_hidden")
        bad = [k for k in counts if getattr(self, k) < 1]
        if self.max_seq_len < 2:
            bad.append("max_seq_len")
        if self.d % self.heads:
            bad.append("heads")
        if self.image_size % (2 ** (self.levels + 1)):
            bad.append("image_size")
        if self.vocab_size < 1:
            bad.append("vocab_size")
        if bad:
            raise ModelError(f"invalid model config fields: {', '.join(bad)}")


# -- attention ------------------------------------------------------------


def attention(q: Tensor, k: Tensor, v: Tensor, allowed: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention. ``allowed`` is boolean, True where a key may be read."""
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if allowed is not None:
        scores = scores.masked_fill(~allowed, float("-inf"))
    weights = scores.softmax(dim=-1)
    return weights @ v, weights


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x: Tensor, memory: Tensor, allowed: Tensor | None = None) -> tuple[Tensor, Tensor]:
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        if allowed is not None and allowed.dim() == 3:
            allowed = allowed[:, None]
        ctx, w = attention(q, k, v, allowed)
        b, _, n, _ = ctx.shape
        return self.out(ctx.transpose(1, 2).reshape(b, n, -1)), w


class FeedForward(nn.Sequential):
    def __init__(self, d: int, hidden: int):
        super().__init__(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))


class EncoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ffn)

    def forward(self, x: Tensor, allowed: Tensor | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, allowed)[0]
        return x + self.ffn(self.norm2(x))


def sincos_2d(h: int, w: int, d: int) -> Tensor:
    """Fixed 2-D sine/cosine position code, (h, w, d)."""
    quarter = d // 4
    freq = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys = torch.arange(h, dtype=torch.float64)[:, None] * freq
    xs = torch.arange(w, dtype=torch.float64)[:, None] * freq
    pe = torch.zeros(h, w, d, dtype=torch.float64)
    pe[..., 0:quarter] = ys.sin()[:, None, :]
    pe[..., quarter : 2 * quarter] = ys.cos()[:, None, :]
    pe[..., 2 * quarter : 3 * quarter] = xs.sin()[None, :, :]
    pe[..., 3 * quarter : 4 * quarter] = xs.cos()[None, :, :]
    return pe


# -- encoders -------------------------------------------------------------


class VisualEncoder(nn.Module):
    """Strided patch-merging transformer. Level ``l`` (1-based) has stride 2**(l+1)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d
        self.stem = nn.Conv2d(cfg.in_channels, d, kernel_size=4, stride=4)
        side = cfg.image_size // 4
        self.register_buffer("pos", sincos_2d(side, side, d).float(), persistent=False)
        self.merges = nn.ModuleList(nn.Sequential(nn.LayerNorm(4 * d), nn.Linear(4 * d, d)) for _ in range(cfg.levels - 1))
        self.stages = nn.ModuleList(
            nn.ModuleList(EncoderBlock(d, cfg.heads, cfg.ffn) for _ in range(cfg.encoder_depth)) for _ in range(cfg.levels)
        )
        self.norms = nn.ModuleList(nn.LayerNorm(d) for _ in range(cfg.levels))

    def forward(self, images: Tensor) -> list[Tensor]:
        """images (B, C, H, W) -> [V_1..V_L], each (B, h_l, w_l, d)."""
        if not torch.isfinite(images).all():
            raise ModelError("non-finite image input")
        x = self.stem(images).permute(0, 2, 3, 1)
        x = x + self.pos.to(x.dtype)
        out = []
        for level, blocks in enumerate(self.stages):
            if level > 0:
                b, h, w, d = x.shape
                x = x.view(b, h // 2, 2, w // 2, 2, d).permute(0, 1, 3, 2, 4, 5).reshape(b, h // 2, w // 2, 4 * d)
                x = self.merges[level - 1](x)
            b, h, w, d = x.shape
            seq = x.reshape(b, h * w, d)
            for blk in blocks:
                seq = blk(seq)
            x = seq.view(b, h, w, d)
            out.append(self.norms[level](x))
        return out


class TextEncoder(nn.Module):
    """Causal transformer over subword ids; one d-dim vector per token."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_max = cfg.n_max
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d)
        self.pos = nn.Parameter(torch.randn(cfg.n_max, cfg.d) * 0.02)
        self.blocks = nn.ModuleList(EncoderBlock(cfg.d, cfg.heads, cfg.ffn) for _ in range(cfg.text_layers))
        self.norm = nn.LayerNorm(cfg.d)

    def forward(self, ids: Tensor) -> Tensor:
        """ids (B, n) -> (B, n, d). Position i only reads positions <= i."""
        n = ids.shape[1]
        x = self.embed(ids) + self.pos[:n]
        causal = torch.ones(n, n, dtype=torch.bool, device=ids.device).tril()
        for blk in self.blocks:
            x = blk(x, causal)
        return self.norm(x)


# -- decoder --------------------------------------------------------------


class DecoderLayer(nn.Module):
    """Masked cross-attention to one feature level, then self-attention over all queries."""

    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        self.norm_cross = nn.LayerNorm(d)
        self.cross = MultiHeadAttention(d, heads)
        self.norm_self = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ffn)

    def forward(
        self,
        queries: Tensor,
        memory: Tensor,
        cross_allowed: Tensor | None = None,
        self_allowed: Tensor | None = None,
    ) -> tuple[Tensor, Tensor]:
        upd, w_cross = self.cross(self.norm_cross(queries), memory, cross_allowed)
        x = queries + upd
        h = self.norm_self(x)
        x = x + self.self_attn(h, h, self_allowed)[0]
        x = x + self.ffn(self.norm_ffn(x))
        return x, w_cross


def with_fallback(allowed: Tensor) -> Tensor:
    """Rows that forbid every key are opened up entirely."""
    empty = ~allowed.any(dim=-1, keepdim=True)
    return allowed | empty


class PixelHead(nn.Module):
    """Mask logits as inner products of projected queries with pixel features (bilinear)."""

    def __init__(self, d: int):
        super().__init__()
        self.embed = nn.Linear(d, d, bias=False)

    def forward(self, queries: Tensor, pixel_features: Tensor) -> Tensor:
        """queries (B, m, d), pixel_features (B, h, w, d) -> (B, m, h, w)."""
        return torch.einsum("bqd,bhwd->bqhw", self.embed(queries), pixel_features)


class SemanticHead(nn.Module):
    """Per-query autoregressive micro-decoder over the unified vocabulary."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.sem_hidden
        self.max_len = cfg.max_seq_len
        self.tok = nn.Embedding(cfg.vocab_size, h)
        self.pos = nn.Parameter(torch.randn(cfg.max_seq_len, h) * 0.02)
        self.task = nn.Embedding(len(TASK_IDS), h)
        self.cond = nn.Linear(cfg.d, h)
        self.init = nn.Linear(cfg.d, h)
        self.cell = nn.GRUCell(h, h)
        self.out = nn.Linear(h, cfg.vocab_size)

    def _start(self, states: Tensor, task_ids: Tensor) -> tuple[Tensor, Tensor]:
        return torch.tanh(self.init(states)), self.cond(states) + self.task(task_ids)

    def teacher_forced(self, states: Tensor, task_ids: Tensor, inputs: Tensor) -> Tensor:
        """states (N, d), task_ids (N,), inputs (N, T) starting with BOS -> logits (N, T, V)."""
        if inputs.shape[1] > self.max_len:
            raise ModelError(f"teacher sequence length {inputs.shape[1]} exceeds max_seq_len {self.max_len}")
        hid, ctx = self._start(states, task_ids)
        emb = self.tok(inputs)
        logits = []
        for t in range(inputs.shape[1]):
            hid = self.cell(emb[:, t] + self.pos[t] + ctx, hid)
            logits.append(self.out(hid))
        return torch.stack(logits, dim=1)

    @torch.no_grad()
    def greedy(self, states: Tensor, task_ids: Tensor, bos: int, stop: Sequence[int]) -> tuple[Tensor, Tensor]:
        """Greedy decoding for max_len steps. Returns (tokens (N, S), logits (N, S, V)).

        Tokens after the first stop token are set to the first stop id so
        downstream parsing sees a clean terminator.
        """
        n = states.shape[0]
        hid, ctx = self._start(states, task_ids)
        prev = torch.full((n,), bos, dtype=torch.long, device=states.device)
        done = torch.zeros(n, dtype=torch.bool, device=states.device)
        stop_t = torch.tensor(list(stop), device=states.device)
        toks, logits = [], []
        for t in range(self.max_len):
            hid = self.cell(self.tok(prev) + self.pos[t] + ctx, hid)
            lg = self.out(hid)
            nxt = lg.argmax(dim=-1)
            nxt = torch.where(done, stop_t[0].expand_as(nxt), nxt)
            toks.append(nxt)
            logits.append(lg)
            done = done | torch.isin(nxt, stop_t)
            prev = nxt
        return torch.stack(toks, 1), torch.stack(logits, 1)


@dataclass
class DecoderOutput:
    pixel: Tensor | None  # O_p (B, m, H/4, W/4) mask logits
    semantic_logits: Tensor | None  # O_s (B, m+n, S, V)
    semantic_tokens: Tensor | None  # greedy tokens (B, m+n, S)
    query_states: Tensor  # (B, n+m, d), text queries first
    n_text: int
    cross_weights: list[Tensor] = field(default_factory=list)
    cross_allowed: list[Tensor | None] = field(default_factory=list)
    features: list[Tensor] = field(default_factory=list)

    @property
    def general_states(self) -> Tensor:
        return self.query_states[:, self.n_text :]


class UniMedModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d
        self.visual = VisualEncoder(cfg)
        self.text = TextEncoder(cfg)
        self.pixel_proj = nn.ModuleList(nn.Linear(d, d) for _ in range(cfg.levels))
        self.level_embed = nn.Parameter(torch.randn(cfg.levels, d) * 0.02)
        self.queries = nn.Parameter(torch.randn(cfg.num_queries, d))
        self.layers = nn.ModuleList(DecoderLayer(d, cfg.heads, cfg.ffn) for _ in range(cfg.decoder_layers))
        self.query_norm = nn.LayerNorm(d)
        self.pixel_head = PixelHead(d)
        self.semantic = SemanticHead(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return self.queries.dtype

    def prepare_images(self, images: np.ndarray | Tensor) -> Tensor:
        """uint8 (B, H, W, C) or (H, W, C) -> normalized float (B, C, H, W)."""
        x = images if isinstance(images, Tensor) else torch.from_numpy(np.array(images))
        if x.dim() == 3:
            x = x[None]
        x = x.to(self.dtype).permute(0, 3, 1, 2)
        return (x / 255.0 - 0.5) / 0.25

    def pixel_features(self, feats: list[Tensor]) -> Tensor:
        """Finest level, with coarser levels projected and upsampled into it."""
        fine = self.pixel_proj[0](feats[0])
        h, w = fine.shape[1:3]
        for proj, f in zip(self.pixel_proj[1:], feats[1:]):
            up = proj(f).permute(0, 3, 1, 2)
            up = F.interpolate(up, size=(h, w), mode="nearest")
            fine = fine + up.permute(0, 2, 3, 1)
        return fine

    def level_order(self) -> list[int]:
        """Feature level read by each decoder layer, coarse to fine, cycling."""
        L = self.cfg.levels
        return [L - 1 - (k % L) for k in range(self.cfg.decoder_layers)]

    def cross_mask(self, mask_logits: Tensor, size: tuple[int, int], n_text: int) -> Tensor:
        """(B, m, h, w) logits -> (B, n+m, h'*w') allowed; text rows unrestricted."""
        resized = F.interpolate(mask_logits.detach(), size=size, mode="bilinear", align_corners=False)
        general = (resized.sigmoid() > 0.5).flatten(2)
        b, _, p = general.shape
        text = torch.ones(b, n_text, p, dtype=torch.bool, device=general.device)
        return with_fallback(torch.cat([text, general], dim=1))

    def decode(
        self,
        images: Tensor,
        text_ids: Tensor | None = None,
        text_pad: Tensor | None = None,
        keep_attention: bool = False,
    ) -> DecoderOutput:
        """Run encoders and all decoder layers; heads for semantics are applied separately.

        ``text_ids`` (B, n) are right-padded; ``text_pad`` (B, n) marks padding.
        """
        feats = self.visual(images)
        pix = self.pixel_features(feats)
        b = images.shape[0]
        x = self.queries[None].expand(b, -1, -1)
        n = 0
        self_allowed = None
        if text_ids is not None and text_ids.shape[1] > 0:
            n = text_ids.shape[1]
            qt = self.text(text_ids)
            x = torch.cat([qt, x], dim=1)
            if text_pad is not None and text_pad.any():
                keys = torch.cat([~text_pad, torch.ones(b, self.cfg.num_queries, dtype=torch.bool)], dim=1)
                self_allowed = keys[:, None, :].expand(b, x.shape[1], -1)
        out = DecoderOutput(None, None, None, x, n, features=feats if keep_attention else [])
        mask_logits = None
        for k, (layer, level) in enumerate(zip(self.layers, self.level_order())):
            f = feats[level]
            hw = f.shape[1:3]
            memory = f.reshape(b, -1, f.shape[-1]) + self.level_embed[level]
            allowed = None if mask_logits is None else self.cross_mask(mask_logits, hw, n)
            x, w = layer(x, memory, allowed, self_allowed)
            mask_logits = self.pixel_head(self.query_norm(x[:, n:]), pix)
            if keep_attention:
                out.cross_weights.append(w)
                out.cross_allowed.append(allowed)
        out.pixel = mask_logits
        out.query_states = self.query_norm(x)
        return out

    def forward(self, images: Tensor, task_spec, text_ids: Tensor | None = None, vocab: UnifiedVocabulary | None = None) -> DecoderOutput:
        """Run the paths ``task_spec`` asks for (duck-typed: .task, .referring, .outputs)."""
        if task_spec.referring and (text_ids is None or text_ids.shape[1] == 0):
            raise ModelError("referring task requires text input")
        out = self.decode(images, text_ids if task_spec.referring else None)
        if "pixel" not in task_spec.outputs:
            out.pixel = None
        if "semantic" in task_spec.outputs:
            if vocab is None:
                raise ModelError("semantic output needs the vocabulary for decoding")
            b, q, d = out.query_states.shape
            tasks = torch.full((b * q,), TASK_IDS[task_spec.task], dtype=torch.long)
            toks, logits = self.semantic.greedy(out.query_states.reshape(b * q, d), tasks, vocab.bos, (vocab.eos, vocab.no_object))
            out.semantic_tokens = toks.view(b, q, -1)
            out.semantic_logits = logits.view(b, q, *logits.shape[1:])
        return out


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(model: UniMedModel, vocab: UnifiedVocabulary, path: str | Path) -> None:
    torch.save(
        {
            "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
            "config": asdict(model.cfg),
            "vocab_hash": vocab.digest(),
        },
        path,
    )


def load_checkpoint(path: str | Path, vocab: UnifiedVocabulary) -> UniMedModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob["vocab_hash"] != vocab.digest():
        raise ModelError("checkpoint was trained against a different vocabulary")
    model = UniMedModel(ModelConfig(**blob["config"]))
    dtype = next(iter(blob["params"].values())).dtype
    model.to(dtype)
    model.load_state_dict(blob["params"])
    return model


def param_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
