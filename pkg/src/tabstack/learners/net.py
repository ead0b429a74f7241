"""Feedforward tabular network with categorical embeddings and a linear skip.

Architecture: each categorical column (>= 4 observed levels) gets an
embedding table; numeric features pass through an affine "numeric embedding";
the concatenated vector v feeds a 3-layer ReLU branch and, in parallel, a
single linear map straight to the output. Output = branch(v) + skip(v).
"""

from __future__ import annotations

import math
import time

import numpy as np
import torch
from torch import nn

from ..errors import ModelUnavailableError
from .base import BaseLearner, time_left

EMBED_DIM_CAP = 100
EMBED_MIN_LEVELS = 4
NUMERIC_EMBED_RANGE = (32, 2056)
HIDDEN_BASE = (256, 128)
HIDDEN_CAP = 1024


def embedding_dim(k: int) -> int:
    """min(100, ceil(1.6 * k^0.56)) for cardinality k >= 4."""
    if k < EMBED_MIN_LEVELS:
        raise ValueError(f"embeddings need at least {EMBED_MIN_LEVELS} levels, got {k}")
    return min(EMBED_DIM_CAP, math.ceil(1.6 * k**0.56))


def numeric_embed_width(d_num: int, d_cat: int) -> int:
    """Affine-embedding width for the numeric block.

    Grows with the numeric feature count and with the numeric share of all
    features; clamped to [32, 2056].
    """
    if d_num == 0:
        return 0
    frac = d_num / (d_num + d_cat)
    w = round(4.0 * math.sqrt(d_num) * (0.5 + frac))
    lo, hi = NUMERIC_EMBED_RANGE
    return int(min(max(w, lo), hi))


def hidden_sizes(num_classes: int) -> tuple:
    scale = max(1, math.ceil(num_classes / 10)) if num_classes else 1
    return tuple(min(h * scale, HIDDEN_CAP) for h in HIDDEN_BASE)


class NetConfig:
    """Shape and optimization settings, reconstructable from the sidecar."""

    def __init__(
        self,
        cat_cardinalities,
        cat_embed_dims,
        numeric_dim: int,
        numeric_embed: int,
        hidden,
        out_dim: int,
        dropout: float = 0.1,
        lr: float = 3e-4,
        weight_decay: float = 1e-6,
        batch_size: int = 256,
        max_epochs: int = 300,
        patience: int = 20,
        bn_momentum: float = 0.1,
    ):
        self.cat_cardinalities = list(cat_cardinalities)
        self.cat_embed_dims = list(cat_embed_dims)
        self.numeric_dim = numeric_dim
        self.numeric_embed = numeric_embed
        self.hidden = tuple(hidden)
        self.out_dim = out_dim
        self.dropout = dropout
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.bn_momentum = bn_momentum

    @classmethod
    def from_features(cls, fm, out_dim: int, num_classes: int = 0, **overrides):
        cards = [c.code_size for c in fm.cat_info]
        dims = [embedding_dim(c.observed_k) for c in fm.cat_info]
        d_num = fm.numeric.shape[1]
        cfg = cls(
            cat_cardinalities=cards,
            cat_embed_dims=dims,
            numeric_dim=d_num,
            numeric_embed=numeric_embed_width(d_num, len(cards)),
            hidden=hidden_sizes(num_classes),
            out_dim=out_dim,
        )
        for k, v in overrides.items():
            if not hasattr(cfg, k):
                raise TypeError(f"unknown NetConfig field {k!r}")
            setattr(cfg, k, v)
        return cfg

    def to_dict(self) -> dict:
        return dict(self.__dict__, hidden=list(self.hidden))

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)

    @property
    def concat_width(self) -> int:
        return sum(self.cat_embed_dims) + (self.numeric_embed if self.numeric_dim else 0)


class TabularNetModule(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.embeddings = nn.ModuleList(
            [
                nn.Embedding(card, dim)
                for card, dim in zip(cfg.cat_cardinalities, cfg.cat_embed_dims)
            ]
        )
        # No activation here: keeps the skip path affine in numeric inputs.
        self.numeric_embed = (
            nn.Linear(cfg.numeric_dim, cfg.numeric_embed) if cfg.numeric_dim else None
        )
        h1, h2 = cfg.hidden
        w = cfg.concat_width
        self.branch = nn.Sequential(
            nn.Linear(w, h1),
            nn.BatchNorm1d(h1, momentum=cfg.bn_momentum),
            nn.ReLU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(h1, h2),
            nn.BatchNorm1d(h2, momentum=cfg.bn_momentum),
            nn.ReLU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(h2, cfg.out_dim),
        )
        self.skip = nn.Linear(w, cfg.out_dim)

    def concat_vector(self, x_num, x_cat) -> torch.Tensor:
        parts = [emb(x_cat[:, i]) for i, emb in enumerate(self.embeddings)]
        if self.numeric_embed is not None:
            parts.append(self.numeric_embed(x_num))
        return torch.cat(parts, dim=1)

    def forward(self, x_num, x_cat):
        v = self.concat_vector(x_num, x_cat)
        return self.branch(v) + self.skip(v)


def _tensors(fm, dtype):
    x_num = torch.as_tensor(np.ascontiguousarray(fm.numeric), dtype=dtype)
    x_cat = torch.as_tensor(np.ascontiguousarray(fm.categorical), dtype=torch.long)
    return x_num, x_cat


class TabularNetLearner(BaseLearner):
    """AdamW-trained net with epoch-level early stopping on holdout loss.

    Regression standardizes targets and minimizes L1; classification
    minimizes cross-entropy. A non-finite training loss aborts the epoch
    loop with the best checkpoint retained.
    """

    family = "tabular_net"

    def __init__(
        self,
        problem=None,
        seed: int = 0,
        max_epochs: int = 300,
        patience: int = 20,
        lr: float = 3e-4,
        weight_decay: float = 1e-6,
        dropout: float = 0.1,
        batch_size: int = 256,
        hidden=None,
        float64: bool = False,
    ):
        super().__init__(problem=problem, seed=seed)
        self.max_epochs = max_epochs
        self.patience = patience
        self.lr = lr
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.batch_size = batch_size
        self.hidden = hidden
        self.float64 = float64

    @property
    def _dtype(self):
        return torch.float64 if self.float64 else torch.float32

    def _holdout_loss(self, module, x_num, x_cat, y_t) -> float:
        module.eval()
        with torch.no_grad():
            out = module(x_num, x_cat)
            if self.problem.is_classification:
                return float(nn.functional.cross_entropy(out, y_t))
            return float(nn.functional.l1_loss(out[:, 0], y_t))

    def _fit(self, fm, y, holdout, time_allowance):
        if holdout is None:
            raise ValueError(f"{self.family} requires a holdout for early stopping")
        t0 = time.monotonic()
        torch.manual_seed(self.seed)

        overrides = {
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "dropout": self.dropout,
            "batch_size": self.batch_size,
        }
        if self.hidden is not None:
            overrides["hidden"] = tuple(self.hidden)
        cfg = NetConfig.from_features(
            fm,
            out_dim=self.out_dim,
            num_classes=self.problem.num_classes,
            **overrides,
        )
        self.config_ = cfg

        if self.problem.is_classification:
            y_t = torch.as_tensor(y, dtype=torch.long)
            loss_fn = nn.CrossEntropyLoss()
            self.y_center_, self.y_scale_ = 0.0, 1.0
        else:
            center = float(np.mean(y))
            scale = float(np.std(y))
            self.y_center_, self.y_scale_ = center, (scale if scale > 0 else 1.0)
            y_t = torch.as_tensor(
                (y - self.y_center_) / self.y_scale_, dtype=self._dtype
            )
            loss_fn = nn.L1Loss()

        x_num, x_cat = _tensors(fm, self._dtype)
        hx_num, hx_cat = _tensors(holdout[0], self._dtype)
        hy = np.asarray(holdout[1])
        hy_t = (
            torch.as_tensor(hy, dtype=torch.long)
            if self.problem.is_classification
            else torch.as_tensor(
                (hy.astype(np.float64) - self.y_center_) / self.y_scale_,
                dtype=self._dtype,
            )
        )

        module = TabularNetModule(cfg).to(self._dtype)
        opt = torch.optim.AdamW(
            module.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
        )
        n = fm.n_rows
        batch = min(cfg.batch_size, n)
        generator = torch.Generator().manual_seed(self.seed)

        best_loss = float("inf")
        best_state = None
        best_epoch = -1
        curve = []
        epochs_run = 0
        for epoch in range(cfg.max_epochs):
            if epoch > 0 and time_left(t0, time_allowance) <= 0:
                break
            module.train()
            order = torch.randperm(n, generator=generator)
            aborted = False
            for start in range(0, n, batch):
                idx = order[start : start + batch]
                if len(idx) < 2 and n > 1:
                    continue  # BatchNorm needs > 1 row in training mode
                opt.zero_grad()
                out = module(x_num[idx], x_cat[idx])
                if self.problem.is_classification:
                    loss = loss_fn(out, y_t[idx])
                else:
                    loss = loss_fn(out[:, 0], y_t[idx])
                if not torch.isfinite(loss):
                    aborted = True
                    break
                loss.backward()
                opt.step()
            epochs_run += 1
            if aborted:
                break
            h_loss = self._holdout_loss(module, hx_num, hx_cat, hy_t)
            curve.append(h_loss)
            if h_loss < best_loss:
                best_loss = h_loss
                best_epoch = epoch
                best_state = {
                    k: v.detach().clone() for k, v in module.state_dict().items()
                }
            elif epoch - best_epoch >= cfg.patience:
                break

        if epochs_run == 0:
            raise ModelUnavailableError(f"{self.family}: no epoch completed in allowance")
        if best_state is None:
            # never reached a finite holdout evaluation
            raise ModelUnavailableError(f"{self.family}: training diverged immediately")
        module.load_state_dict(best_state)
        module.eval()
        self.module_ = module
        self.holdout_curve_ = curve
        self.best_epoch_ = best_epoch
        self.holdout_loss_ = best_loss

    def _predict(self, fm):
        x_num, x_cat = _tensors(fm, self._dtype)
        self.module_.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, fm.n_rows, 4096):
                out = self.module_(x_num[start : start + 4096], x_cat[start : start + 4096])
                if self.problem.is_classification:
                    out = torch.softmax(out, dim=1)
                outs.append(out.to(torch.float64).numpy())
        pred = np.vstack(outs)
        if not self.problem.is_classification:
            pred = pred * self.y_scale_ + self.y_center_
        return pred

    # pickling torch modules directly is fine at this scale; keep default
    # save/load from the base class.

    def parameter_norm(self) -> float:
        with torch.no_grad():
            total = sum(float((p**2).sum()) for p in self.module_.parameters())
        return math.sqrt(total)
