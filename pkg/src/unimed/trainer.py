"""Joint training on labeled and unlabeled images."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .codec import AnnotationRecord, ConfigurationError, UnifiedVocabulary, box_tokens
from .losses import (
    backbone_correspondence,
    contrastive_loss,
    dense_contrastive_loss,
    hungarian_match,
    pairwise_mask_cost,
    pixel_loss,
    semantic_loss,
)
from .model import TASK_IDS, UniMedModel
from .synth import ManifestEntry, two_views
from .tasks import pad_prompts, prompt_ids

IGNORE = -100


class TrainingError(RuntimeError):
    pass


class StateError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    lam: float = 0.1
    ratio: str = "1:1"
    steps: int = 200
    batch_size: int = 8
    unlabeled_batch_size: int = 8
    seed: int = 0
    temperature: float = 0.2
    queue_size: int = 256
    momentum: float = 0.99
    no_object_weight: float = 0.1
    dice_eps: float = 1.0
    dense_weight: float = 1.0
    proj_dim: int = 64
    referring_prob: float = 0.25
    linear_decay: bool = True
    grad_clip: float = 0.0  # off by default; global-norm clipping couples the supervised and contrastive step sizes
    cost_class: float = 1.0
    cost_l1: float = 5.0
    cost_mask: float = 1.0
    tasks: tuple[str, ...] = ("classification", "detection", "segmentation")


@dataclass
class LossReport:
    L_s: float
    L_p: float
    L_c: float
    L_dc: float
    L_total: float
    lam: float
    matched_pairs: list[tuple[int, str, int, int]] = field(default_factory=list)

    def identity_gap(self) -> float:
        return abs(self.L_total - ((self.L_s + self.L_p) + self.lam * (self.L_c + self.L_dc)))

    def to_line(self, step: int) -> str:
        d = {"step": step, **asdict(self)}
        d["lambda"] = d.pop("lam")
        d["matched_pairs"] = [list(p) for p in self.matched_pairs]
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


# -- momentum encoder ---------------------------------------------------------


@dataclass
class MomentumEncoderState:
    shadow: dict[str, Tensor]
    momentum: float

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise StateError(f"momentum {self.momentum} outside [0, 1]")


@torch.no_grad()
def ema_update(online: dict[str, Tensor], state: MomentumEncoderState) -> MomentumEncoderState:
    """shadow <- mu * shadow + (1 - mu) * online, in place, for every parameter."""
    if online.keys() != state.shadow.keys():
        raise StateError("online and shadow parameter names differ")
    for name, src in online.items():
        dst = state.shadow[name]
        if dst.shape != src.shape:
            raise StateError(f"shape mismatch for {name}: {tuple(dst.shape)} vs {tuple(src.shape)}")
    mu = state.momentum
    for name, src in online.items():
        state.shadow[name].mul_(mu).add_(src.detach(), alpha=1.0 - mu)
    return state


class ContrastiveHeads(nn.Module):
    """Global and dense projection heads; discarded when exporting the model."""

    def __init__(self, d: int, proj: int):
        super().__init__()
        self.global_proj = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, proj))
        self.dense_proj = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, proj))

    def forward(self, feat: Tensor) -> tuple[Tensor, Tensor]:
        """feat (B, h, w, d) -> global (B, proj), dense (B, h*w, proj)."""
        flat = feat.flatten(1, 2)
        return self.global_proj(flat.mean(1)), self.dense_proj(flat)


# -- dual loader sampling -------------------------------------------------------


def parse_ratio(ratio: str | float | Fraction | tuple[int, int]) -> tuple[Fraction, Fraction]:
    if isinstance(ratio, tuple):
        a, b = Fraction(ratio[0]), Fraction(ratio[1])
    elif isinstance(ratio, str) and ":" in ratio:
        left, right = ratio.split(":")
        a, b = Fraction(left), Fraction(right)
    else:
        a, b = Fraction(ratio), Fraction(1)
    if a < 0 or b < 0 or a + b == 0:
        raise ConfigurationError(f"invalid sampling ratio {ratio!r}")
    return a, b


def draw_schedule(ratio, n_draws: int) -> list[str]:
    """Deterministic L/U draw order whose running labeled count stays within one batch of target."""
    a, b = parse_ratio(ratio)
    out, labeled = [], 0
    for t in range(1, n_draws + 1):
        if labeled * (a + b) < t * a:
            out.append("L")
            labeled += 1
        else:
            out.append("U")
    return out


def dual_sample(labeled: Sequence, unlabeled: Sequence, ratio) -> Iterator[tuple[object, list]]:
    """One epoch over ``labeled``: yields (labeled batch, unlabeled batches drawn since it).

    The unlabeled loader cycles. Unlabeled draws that precede the first
    labeled draw are attached to it.
    """
    a, b = parse_ratio(ratio)
    if b > 0 and not unlabeled:
        raise ConfigurationError("unlabeled loader is empty but the ratio requests unlabeled batches")
    if a > 0 and not labeled:
        raise ConfigurationError("labeled loader is empty but the ratio requests labeled batches")
    if a == 0:
        raise ConfigurationError("an epoch needs labeled draws")
    li = ui = 0
    count_l = 0
    t = 0
    current = None
    pending: list = []
    while True:
        t += 1
        if count_l * (a + b) < t * a:
            if current is not None:
                yield current, pending
                pending = []
            if li == len(labeled):
                return
            current = labeled[li]
            li += 1
            count_l += 1
        else:
            pending.append(unlabeled[ui % len(unlabeled)])
            ui += 1


# -- batches ------------------------------------------------------------------


@dataclass
class Target:
    task: str
    seqs: list[list[int]]
    masks: Tensor | None  # (n, H, W) at image resolution


@dataclass
class LabeledSample:
    image: np.ndarray
    record: AnnotationRecord
    prompt: list[str] | None = None


def object_targets(
    record: AnnotationRecord,
    task: str,
    vocab: UnifiedVocabulary,
    image_size: tuple[int, int],
    keep: Sequence[str] | None = None,
) -> Target:
    idx = [i for i, c in enumerate(record.classes) if keep is None or c in keep]
    if task == "classification":
        # image-level label: the largest object (records are area-sorted)
        idx = idx[:1]
    seqs, masks = [], []
    for i in idx:
        body = vocab.class_ids(record.classes[i])
        if task == "detection":
            body = box_tokens(record.boxes[i], vocab, image_size) + body
        seqs.append(body + [vocab.eos])
        if task == "segmentation":
            masks.append(torch.from_numpy(np.asarray(record.masks[i], dtype=bool)))
    mt = torch.stack(masks) if masks else (torch.zeros(0, *image_size, dtype=torch.bool) if task == "segmentation" else None)
    return Target(task, seqs, mt)


class JointTrainer:
    """Owns the optimizer, momentum encoder, negative queues and metrics log."""

    def __init__(self, model: UniMedModel, vocab: UnifiedVocabulary, cfg: TrainConfig, log_path: str | Path | None = None):
        self.model = model
        self.vocab = vocab
        self.cfg = cfg
        dtype = model.dtype
        self.heads = ContrastiveHeads(model.cfg.d, cfg.proj_dim).to(dtype)
        self.momentum_net = nn.ModuleDict({"visual": copy.deepcopy(model.visual), "heads": copy.deepcopy(self.heads)})
        for p in self.momentum_net.parameters():
            p.requires_grad_(False)
        self.ema = MomentumEncoderState(dict(self.momentum_net.named_parameters()), cfg.momentum)
        gen = torch.Generator().manual_seed(cfg.seed)
        self.queue = F.normalize(torch.randn(cfg.queue_size, cfg.proj_dim, generator=gen, dtype=torch.float64), dim=1).to(dtype)
        self.dense_queue = F.normalize(torch.randn(cfg.queue_size, cfg.proj_dim, generator=gen, dtype=torch.float64), dim=1).to(dtype)
        self.queue_ptr = 0
        self.opt = torch.optim.AdamW(
            list(model.parameters()) + list(self.heads.parameters()), lr=cfg.lr, weight_decay=cfg.weight_decay
        )
        total = max(cfg.steps, 1)
        self.sched = torch.optim.lr_scheduler.LambdaLR(
            self.opt, (lambda s: max(0.0, 1.0 - s / total)) if cfg.linear_decay else (lambda s: 1.0)
        )
        self.prompt_rng = np.random.default_rng([cfg.seed, 1])
        self.aug_rng = np.random.default_rng([cfg.seed, 2])
        self.shuffle_rng = np.random.default_rng([cfg.seed, 3])
        self.unlabeled_rng = np.random.default_rng([cfg.seed, 4])
        self.step_index = 0
        self.log_path = Path(log_path) if log_path else None
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text("")

    # -- online parameters mirrored by the momentum encoder
    def online_params(self) -> dict[str, Tensor]:
        out = {f"visual.{k}": v for k, v in self.model.visual.named_parameters()}
        out.update({f"heads.{k}": v for k, v in self.heads.named_parameters()})
        return out

    # -- supervised -------------------------------------------------------------

    def sample_prompt(self, record: AnnotationRecord) -> list[str] | None:
        if self.cfg.referring_prob <= 0 or self.prompt_rng.random() >= self.cfg.referring_prob:
            return None
        names = list(self.vocab.class_names)
        present = sorted(set(record.classes))
        chosen = set()
        if present and self.prompt_rng.random() < 0.75:
            k = int(self.prompt_rng.integers(1, len(present) + 1))
            chosen.update(self.prompt_rng.choice(present, size=k, replace=False).tolist())
        extra = int(self.prompt_rng.integers(0 if chosen else 1, 3))
        chosen.update(self.prompt_rng.choice(names, size=extra, replace=False).tolist())
        return [n for n in names if n in chosen]

    def make_samples(self, entries: Sequence[ManifestEntry]) -> list[LabeledSample]:
        return [LabeledSample(e.image, e.record, self.sample_prompt(e.record)) for e in entries]

    def supervised_losses(self, samples: Sequence[LabeledSample]) -> tuple[Tensor, Tensor, list]:
        model, vocab, cfg = self.model, self.vocab, self.cfg
        images = model.prepare_images(np.stack([s.image for s in samples]))
        text = None
        pad = None
        if any(s.prompt for s in samples):
            ids = [prompt_ids(s.prompt, vocab, model.cfg.n_max)[0] if s.prompt else [] for s in samples]
            text, pad = pad_prompts(ids, vocab)
        out = model.decode(images, text, pad)
        states = out.general_states
        m = states.shape[1]
        # mask logits are scored at image resolution, exactly as inference upsamples them
        full = F.interpolate(out.pixel, size=images.shape[-2:], mode="bilinear", align_corners=False)

        groups = []  # (b, Target)
        for b, s in enumerate(samples):
            for task in cfg.tasks:
                if task in s.record.present_kinds:
                    groups.append((b, object_targets(s.record, task, vocab, s.image.shape[:2], s.prompt)))

        # pass 1: costs for every (query, object) pair, no grad
        rows_state, rows_task, rows_in, rows_tgt, owners = [], [], [], [], []
        for g, (b, tgt) in enumerate(groups):
            for j, seq in enumerate(tgt.seqs):
                for i in range(m):
                    rows_state.append((b, i))
                    rows_task.append(TASK_IDS[tgt.task])
                    rows_in.append([vocab.bos] + seq[:-1])
                    rows_tgt.append(seq)
                    owners.append((g, i, j))
        pairs: list = []
        matched = {g: [] for g in range(len(groups))}
        if rows_state:
            with torch.no_grad():
                logits = self._teacher(states, rows_state, rows_task, rows_in)
                tgt_t = _pad(rows_tgt, IGNORE)
                ce = F.cross_entropy(logits.transpose(1, 2), tgt_t, ignore_index=IGNORE, reduction="none")
                valid = (tgt_t != IGNORE).to(ce.dtype)
                mean_ce = (ce * valid).sum(1) / valid.sum(1)
                l1 = self._coord_l1(logits, tgt_t)
            for g, (b, tgt) in enumerate(groups):
                n = len(tgt.seqs)
                if n == 0:
                    continue
                sel = [k for k, o in enumerate(owners) if o[0] == g]
                cost = cfg.cost_class * mean_ce[sel].view(n, m).T
                if tgt.task == "detection":
                    cost = cost + cfg.cost_l1 * l1[sel].view(n, m).T
                if tgt.task == "segmentation":
                    with torch.no_grad():
                        cost = cost + cfg.cost_mask * pairwise_mask_cost(full[b].detach(), tgt.masks, cfg.dice_eps)
                matched[g] = hungarian_match(cost)
                pairs.extend((b, tgt.task, i, j) for i, j in matched[g])

        # pass 2: loss on matched rows and NO_OBJECT rows, with grad
        m_state, m_task, m_in, m_tgt = [], [], [], []
        u_state, u_task = [], []
        mask_logits, mask_tgts = [], []
        for g, (b, tgt) in enumerate(groups):
            hit = {i for i, _ in matched[g]}
            for i, j in matched[g]:
                m_state.append((b, i))
                m_task.append(TASK_IDS[tgt.task])
                m_in.append([vocab.bos] + tgt.seqs[j][:-1])
                m_tgt.append(tgt.seqs[j])
                if tgt.task == "segmentation":
                    mask_logits.append(full[b, i])
                    mask_tgts.append(tgt.masks[j])
            for i in range(m):
                if i not in hit:
                    u_state.append((b, i))
                    u_task.append(TASK_IDS[tgt.task])
        dtype = states.dtype
        empty = states.new_zeros(0, 1, len(vocab))
        m_logits = self._teacher(states, m_state, m_task, m_in) if m_state else empty
        m_targets = _pad(m_tgt, IGNORE) if m_tgt else torch.zeros(0, 1, dtype=torch.long)
        u_logits = self._teacher(states, u_state, u_task, [[vocab.bos]] * len(u_state))[:, 0] if u_state else empty[:, 0]
        l_s = semantic_loss(m_logits, m_targets, u_logits, vocab.no_object, cfg.no_object_weight, IGNORE)
        if mask_logits:
            l_p = pixel_loss(torch.stack(mask_logits), torch.stack(mask_tgts).to(dtype), cfg.dice_eps)
        else:
            l_p = states.new_zeros(()) + 0.0 * out.pixel.sum()
        return l_s, l_p, pairs

    def _teacher(self, states: Tensor, where, tasks, inputs) -> Tensor:
        idx_b = torch.tensor([w[0] for w in where])
        idx_q = torch.tensor([w[1] for w in where])
        return self.model.semantic.teacher_forced(
            states[idx_b, idx_q], torch.tensor(tasks, dtype=torch.long), _pad(inputs, self.vocab.pad)
        )

    def _coord_l1(self, logits: Tensor, targets: Tensor) -> Tensor:
        """Sum over the four box steps of |expected bin - target bin| / bins (zero for non-box rows)."""
        v = self.vocab
        lo, hi = v.coord_base, v.text_base
        if logits.shape[1] < 4:
            return logits.new_zeros(logits.shape[0])
        probs = logits[:, :4, lo:hi].softmax(-1)
        expected = (probs * torch.arange(v.bins, dtype=logits.dtype)).sum(-1)
        tgt = targets[:, :4]
        is_coord = (tgt >= lo) & (tgt < hi)
        diff = (expected - (tgt - lo).to(logits.dtype)).abs() / v.bins
        return (diff * is_coord).sum(1)

    # -- unsupervised -------------------------------------------------------------

    def unsupervised_losses(self, images: Sequence[np.ndarray], seeds: Sequence[int] | None = None):
        """Global and dense contrast between two views; returns (L_c, L_dc, keys)."""
        if seeds is None:
            seeds = self.aug_rng.integers(0, 2**32, size=len(images)).tolist()
        v1, v2 = [], []
        for img, sd in zip(images, seeds):
            a, b, _, _ = two_views(img, int(sd))
            v1.append(a)
            v2.append(b)
        x1 = self.model.prepare_images(np.stack(v1))
        x2 = self.model.prepare_images(np.stack(v2))
        f1 = self.model.visual(x1)[-1]
        q_g, q_d = self.heads(f1)
        with torch.no_grad():
            f2 = self.momentum_net["visual"](x2)[-1]
            k_g, k_d = self.momentum_net["heads"](f2)
            match = backbone_correspondence(f1.detach().flatten(1, 2), f2.flatten(1, 2))
        l_c = contrastive_loss(q_g, k_g, self.queue, self.cfg.temperature)
        l_dc = self.cfg.dense_weight * dense_contrastive_loss(q_d, k_d, match, self.dense_queue, self.cfg.temperature)
        return l_c, l_dc, (k_g, k_d)

    @torch.no_grad()
    def _enqueue(self, keys) -> None:
        k_g, k_d = keys
        g = F.normalize(k_g, dim=1)
        dpool = F.normalize(F.normalize(k_d, dim=-1).mean(1), dim=1)
        for row_g, row_d in zip(g, dpool):
            self.queue[self.queue_ptr] = row_g
            self.dense_queue[self.queue_ptr] = row_d
            self.queue_ptr = (self.queue_ptr + 1) % self.cfg.queue_size

    # -- the step -----------------------------------------------------------------

    def compute_losses(self, labeled: Sequence[LabeledSample], unlabeled: Sequence[np.ndarray] | None, lam: float):
        l_s, l_p, pairs = self.supervised_losses(labeled)
        keys = None
        zero = l_s.new_zeros(())
        l_c = l_dc = zero
        if unlabeled:
            if lam > 0:
                l_c, l_dc, keys = self.unsupervised_losses(unlabeled)
            else:
                with torch.no_grad():
                    l_c, l_dc, keys = self.unsupervised_losses(unlabeled)
        # assembled in float64 so the logged identity holds exactly
        total = l_s.double() + l_p.double()
        if lam > 0:
            total = total + lam * (l_c.double() + l_dc.double())
        return total, (l_s, l_p, l_c, l_dc), pairs, keys

    def train_step(self, labeled: Sequence[LabeledSample], unlabeled: Sequence[np.ndarray] | None = None, lam: float | None = None) -> LossReport:
        lam = self.cfg.lam if lam is None else lam
        self.model.train()
        self.opt.zero_grad(set_to_none=True)
        total, parts, pairs, keys = self.compute_losses(labeled, unlabeled, lam)
        values = [float(p.detach()) for p in parts]
        if not all(math.isfinite(v) for v in values + [float(total.detach())]):
            names = ("L_s", "L_p", "L_c", "L_dc")
            dump = ", ".join(f"{n}={v!r}" for n, v in zip(names, values))
            raise TrainingError(f"non-finite loss at step {self.step_index}: {dump}, L_total={float(total.detach())!r}")
        total.backward()
        if self.cfg.grad_clip > 0:
            nn.utils.clip_grad_norm_([p for g in self.opt.param_groups for p in g["params"]], self.cfg.grad_clip)
        self.opt.step()
        self.sched.step()
        ema_update(self.online_params(), self.ema)
        if keys is not None:
            self._enqueue(keys)
        report = LossReport(*values, L_total=float(total.detach()), lam=lam, matched_pairs=pairs)
        if self.log_path:
            with self.log_path.open("a") as fh:
                fh.write(report.to_line(self.step_index) + "\n")
        self.step_index += 1
        return report

    # -- loops --------------------------------------------------------------------

    def batches(self, items: Sequence, size: int, rng: np.random.Generator | None = None) -> list[list]:
        order = (rng or self.shuffle_rng).permutation(len(items))
        return [[items[k] for k in order[i : i + size]] for i in range(0, len(items), size)]

    def fit(
        self,
        labeled: Sequence[ManifestEntry],
        unlabeled: Sequence[ManifestEntry] = (),
        steps: int | None = None,
        callback=None,
    ) -> list[LossReport]:
        steps = self.cfg.steps if steps is None else steps
        labeled = [e for e in labeled if set(self.cfg.tasks) & set(e.record.present_kinds)]
        if not labeled:
            raise ConfigurationError("no labeled samples carry any of the training tasks")
        a, b = parse_ratio(self.cfg.ratio)
        use_unlabeled = bool(unlabeled) and b > 0
        ratio = self.cfg.ratio if use_unlabeled else "1:0"
        reports = []
        while len(reports) < steps:
            lb = self.batches(labeled, self.cfg.batch_size)
            ub = self.batches([e.image for e in unlabeled], self.cfg.unlabeled_batch_size, self.unlabeled_rng) if use_unlabeled else []
            for lab, unl in dual_sample(lb, ub, ratio):
                imgs = [img for batch in unl for img in batch] or None
                reports.append(self.train_step(self.make_samples(lab), imgs))
                if callback:
                    callback(self, reports[-1])
                if len(reports) >= steps:
                    break
        return reports


def _pad(seqs: Sequence[Sequence[int]], value: int) -> Tensor:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return torch.from_numpy(out)


def read_metrics_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
