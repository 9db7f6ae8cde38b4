"""Teacher-forced training, gradient checking and checkpoints for the toy decoder."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .container import read_records, write_records
from .errors import CheckpointError, NonFiniteGradient
from .forest import ID_INDEX, build_identifier_matrix
from .lexer import Vocabulary
from .model import (
    DTYPE,
    ModelConfig,
    ModelParams,
    decode_batch,
    embed_identifiers,
    embed_symbols,
    encode_grid,
    greedy_decode_ids,
    head_logits,
)

log = logging.getLogger(__name__)


@dataclass
class Batch:
    """Padded teacher-forcing tensors for ``B`` expressions of up to ``T`` tokens.

    Step ``s`` reads ``sym_in[:, s]`` / ``id_in[:, s]`` and predicts the symbol
    and position of token ``s + 1``; the final valid step predicts ``[eos]``.
    """

    planes: torch.Tensor  # [B, H, W, G]
    sym_in: torch.Tensor  # [B, L]
    sym_tgt: torch.Tensor  # [B, L]
    sym_mask: torch.Tensor  # [B, L]
    id_in: torch.Tensor  # [B, L, width]
    n_tgt: torch.Tensor  # [B, L]
    r_tgt: torch.Tensor  # [B, L]
    pos_mask: torch.Tensor  # [B, L]
    entity: torch.Tensor  # [B, L]
    targets: list = field(default_factory=list)  # token id lists, for ExpRate

    def __len__(self):
        return self.planes.shape[0]


def make_batch(samples: Sequence, vocab: Vocabulary, max_nesting: int = 3) -> Batch:
    b = len(samples)
    L = max(len(s.latex) for s in samples) + 1
    width = max_nesting + 3
    pad = vocab.pad_id
    sym_in = torch.full((b, L), pad, dtype=torch.long)
    sym_tgt = torch.full((b, L), pad, dtype=torch.long)
    sym_mask = torch.zeros(b, L, dtype=DTYPE)
    n_tgt = torch.zeros(b, L, dtype=torch.long)
    r_tgt = torch.full((b, L), ID_INDEX["[pad]"], dtype=torch.long)
    pos_mask = torch.zeros(b, L, dtype=DTYPE)
    blank_row = ["[sos]", "[eos]"] + ["[pad]"] * (width - 2)
    id_in = torch.full((b, L, width), ID_INDEX["[pad]"], dtype=torch.long)
    ent_of = np.ones(len(vocab))
    for t in vocab.omega:
        ent_of[vocab.id_of(t)] = 0.0
    entity = torch.ones(b, L, dtype=DTYPE)
    for i, s in enumerate(samples):
        ids = list(s.latex.ids)
        T = len(ids)
        sym_in[i, : T + 1] = torch.tensor([vocab.sos_id, *ids])
        sym_tgt[i, : T + 1] = torch.tensor([*ids, vocab.eos_id])
        sym_mask[i, : T + 1] = 1.0
        n_tgt[i, :T] = torch.tensor(s.targets.y_n)
        r_tgt[i, :T] = torch.tensor(s.targets.y_r_index)
        pos_mask[i, :T] = 1.0
        rows = [blank_row] + [list(r) for r in build_identifier_matrix(s.identifiers, max_nesting).cells]
        id_in[i, : T + 1] = torch.tensor([[ID_INDEX[c] for c in r] for r in rows])
        entity[i, :T] = torch.from_numpy(ent_of[ids])
    planes = torch.from_numpy(np.stack([s.grid for s in samples]))
    return Batch(planes, sym_in, sym_tgt, sym_mask, id_in, n_tgt, r_tgt, pos_mask, entity,
                 [list(s.latex.ids) for s in samples])


def _masked_nll(logits, target, mask):
    logp = torch.log_softmax(logits, dim=-1).gather(-1, target[..., None])[..., 0]
    per_seq = -(logp * mask).sum(dim=1) / mask.sum(dim=1).clamp_min(1.0)
    return per_seq.mean()


def batch_loss(params: ModelParams, batch: Batch, lambda1=1.0, lambda2=1.0):
    """Returns ``(total, L_rec, L_pos)``; the position stream is skipped when ``lambda2 == 0``."""
    feats = encode_grid(batch.planes, params)
    b, h, w, c = feats.shape
    mem = feats.reshape(b, h * w, c)
    sym = embed_symbols(batch.sym_in, params)
    if lambda2 == 0:
        f_sym, _ = decode_batch(mem, (h, w), sym, batch.entity, params)
        l_rec = _masked_nll(head_logits(f_sym, params, "c"), batch.sym_tgt, batch.sym_mask)
        return lambda1 * l_rec, l_rec, torch.zeros((), dtype=DTYPE)
    pos = embed_identifiers(batch.id_in, params)
    both, _ = decode_batch(mem, (h, w), torch.cat([sym, pos]), batch.entity.repeat(2, 1), params)
    f_sym, f_pos = both[:b], both[b:]
    l_rec = _masked_nll(head_logits(f_sym, params, "c"), batch.sym_tgt, batch.sym_mask)
    l_pos = _masked_nll(head_logits(f_pos, params, "n"), batch.n_tgt, batch.pos_mask) + _masked_nll(
        head_logits(f_pos, params, "r"), batch.r_tgt, batch.pos_mask
    )
    return lambda1 * l_rec + lambda2 * l_pos, l_rec, l_pos


def analytic_gradients(params: ModelParams, batch: Batch, lambda1=1.0, lambda2=1.0):
    work = params.clone(requires_grad=True)
    total, _, _ = batch_loss(work, batch, lambda1, lambda2)
    names = work.names()
    grads = torch.autograd.grad(total, [work[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        g = torch.zeros_like(work[n]) if g is None else g
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {n}")
        out[n] = g.detach()
    return total.item(), out


def grad_check(
    params: ModelParams,
    batch: Batch,
    epsilon: float = 1e-5,
    lambda1: float = 1.0,
    lambda2: float = 1.0,
    max_per_tensor: int | None = None,
    seed: int = 0,
    report: dict | None = None,
) -> float:
    """Max relative error between autograd and central finite differences.

    ``max_per_tensor`` limits the number of checked entries per tensor
    (sampled with ``seed``); ``None`` checks every entry.  If ``report`` is a
    dict it receives the per-tensor maxima.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    _, grads = analytic_gradients(params, batch, lambda1, lambda2)
    work = params.clone()
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name in work.names():
            tensor = work[name]
            flat = tensor.view(-1)
            idx = np.arange(flat.numel())
            if max_per_tensor is not None and flat.numel() > max_per_tensor:
                idx = np.sort(rng.choice(flat.numel(), size=max_per_tensor, replace=False))
            g_a = grads[name].reshape(-1)
            tensor_worst = 0.0
            for j in idx:
                orig = float(flat[j])
                flat[j] = orig + epsilon
                up = float(batch_loss(work, batch, lambda1, lambda2)[0])
                flat[j] = orig - epsilon
                down = float(batch_loss(work, batch, lambda1, lambda2)[0])
                flat[j] = orig
                g_fd = (up - down) / (2 * epsilon)
                if not np.isfinite(g_fd):
                    raise NonFiniteGradient(f"non-finite finite difference for {name}[{j}]")
                ga = float(g_a[j])
                err = abs(ga - g_fd) / max(1e-8, abs(ga) + abs(g_fd))
                tensor_worst = max(tensor_worst, err)
            if report is not None:
                report[name] = tensor_worst
            worst = max(worst, tensor_worst)
    return worst


# -- training loop ----------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 2000
    lr: float = 3e-3
    lambda1: float = 1.0
    lambda2: float = 1.0
    seed: int = 42
    channels: int = 32
    heads: int = 4
    layers: int = 3
    max_nesting: int = 3
    eval_every: int = 10
    stop_on_fit: bool = True
    clip_norm: float | None = 1.0
    per_head_iac: bool = False


@dataclass
class TrainResult:
    params: ModelParams
    losses: list = field(default_factory=list)  # (epoch, total, rec, pos)
    exprates: list = field(default_factory=list)  # (epoch, exprate)
    epochs_to_fit: int | None = None


def exprate_of(params: ModelParams, batch: Batch, vocab: Vocabulary) -> float:
    max_len = max(len(t) for t in batch.targets) + 3
    preds = greedy_decode_ids(batch.planes, params, max_len, vocab.sos_id, vocab.eos_id)
    hits = sum(p == t for p, t in zip(preds, batch.targets))
    return hits / len(batch)


def train(samples: Sequence, vocab: Vocabulary, cfg: TrainConfig | None = None,
          params: ModelParams | None = None) -> TrainResult:
    """Full-batch Adam on rendered samples; stops at training ExpRate 1.0 when ``stop_on_fit``."""
    cfg = cfg or TrainConfig()
    batch = make_batch(samples, vocab, cfg.max_nesting)
    if params is None:
        mcfg = ModelConfig.for_vocab(
            vocab,
            glyph_channels=batch.planes.shape[-1],
            channels=cfg.channels,
            heads=cfg.heads,
            layers=cfg.layers,
            max_nesting=cfg.max_nesting,
            per_head_iac=cfg.per_head_iac,
        )
        params = ModelParams.init(mcfg, seed=cfg.seed)
    work = params.clone(requires_grad=True)
    tensors = [work[n] for n in work.names()]
    opt = torch.optim.Adam(tensors, lr=cfg.lr)
    result = TrainResult(work)
    for epoch in range(1, cfg.epochs + 1):
        opt.zero_grad()
        total, l_rec, l_pos = batch_loss(work, batch, cfg.lambda1, cfg.lambda2)
        total.backward()
        if cfg.clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(tensors, cfg.clip_norm)
        opt.step()
        result.losses.append((epoch, total.item(), l_rec.item(), l_pos.item()))
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            rate = exprate_of(work, batch, vocab)
            result.exprates.append((epoch, rate))
            log.info("epoch %d loss %.6f exprate %.4f", epoch, total.item(), rate)
            if rate == 1.0 and result.epochs_to_fit is None:
                result.epochs_to_fit = epoch
                if cfg.stop_on_fit:
                    break
    result.params = work.clone()
    return result


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    i = np.arange(1, len(v) + 1)
    lo = np.maximum(0, i - window)
    return (c[i] - c[lo]) / (i - lo)


def write_loss_csv(path, result: TrainResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "l_rec", "l_pos", "exprate"])
        rates = dict(result.exprates)
        for epoch, total, rec, pos in result.losses:
            rate = f"{rates[epoch]:.6f}" if epoch in rates else ""
            w.writerow([epoch, f"{total:.10f}", f"{rec:.10f}", f"{pos:.10f}", rate])


def read_loss_csv(path) -> tuple[list[tuple[int, float]], list[tuple[int, float]]]:
    """``(losses, exprates)`` as ``(epoch, value)`` pairs from :func:`write_loss_csv` output."""
    losses, rates = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            losses.append((int(row["epoch"]), float(row["loss"])))
            if row["exprate"]:
                rates.append((int(row["epoch"]), float(row["exprate"])))
    return losses, rates


# -- checkpoints -----------------------------------------------------------

def omega_hash(vocab: Vocabulary) -> str:
    return hashlib.sha256("\n".join(sorted(vocab.omega)).encode("utf-8")).hexdigest()


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path, params: ModelParams, vocab: Vocabulary, seed: int, extra: dict | None = None) -> None:
    write_records(path, {k: v.detach().numpy() for k, v in params.tensors.items()})
    meta = {
        "C": params.config.channels,
        "heads": params.config.heads,
        "U": params.config.max_nesting,
        "omega_hash": omega_hash(vocab),
        "omega": sorted(vocab.omega),
        "seed": seed,
        "config": params.config.to_dict(),
    }
    meta.update(extra or {})
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path, vocab: Vocabulary | None = None) -> tuple[ModelParams, dict]:
    side = sidecar_path(path)
    if not side.exists():
        raise CheckpointError(f"missing hyperparameter sidecar {side}")
    meta = json.loads(side.read_text(encoding="utf-8"))
    if vocab is not None and meta.get("omega_hash") != omega_hash(vocab):
        raise CheckpointError("checkpoint was trained with a different structure set")
    config = ModelConfig.from_dict(meta["config"])
    tensors = {k: torch.from_numpy(v) for k, v in read_records(path).items()}
    return ModelParams(config, tensors), meta
