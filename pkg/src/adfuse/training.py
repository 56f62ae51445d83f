"""Contrastive fine-tuning of feature adapters with online hard-negative mining.

The adapter (plus the learnable logit scale and, optionally, a small text
head) is the only thing trained; encoder features stay frozen in their banks.
Per step: adapt the image-side features, pick the most confusable negative
texts from a freshly sampled candidate pool, build one score row per sample
(positive first), and take an Adam step on cross-entropy plus a feature
anchoring term that keeps adapted features close to the raw image features.

Hard-negative scoring strategies:
  full        score candidates with the current text features; with the
              identity text adapter this reads the cached bank and never
              recomputes anything (the efficiency point of caching text
              features once).
  memory_bank score against a sparsely refreshed cache of adapted text
              features (entries overwritten when recomputed; full refresh
              every ``bank_refresh_period`` steps).
  momentum    score through a momentum-tracked copy of the text head,
              updated as theta_k <- m * theta_k + (1 - m) * theta_q after
              every step.

With the identity text adapter all three coincide by construction.
"""
from __future__ import annotations

import copy
import zlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .adapters import (
    AttentionAdapterParams,
    ResidualMlp,
    attention_backward_cached,
    attention_forward_cached,
    init_params,
    init_text_head,
    mlp_backward_cached,
    mlp_forward_cached,
    normalized_head_backward,
    normalized_head_forward,
)
from .banks import FeatureBank
from .manifest import PairRow
from .retrieval import EvalProtocol, Metrics, build_candidates, evaluate
from .sampling import SamplingError, sample_excluding as _sample_excluding

LOGIT_SCALE_INIT = float(np.log(1.0 / 0.07))
LOGIT_SCALE_MAX = float(np.log(100.0))

INPUT_MODES = {
    "I": (),
    "I+ST": ("scene_text",),
    "I+K": ("brand",),
    "I+ST+K": ("scene_text", "brand"),
}

_BANK_KEY = {"scene_text": "scene_text", "brand": "brand"}
_ROW_FIELD = {"scene_text": "scene_text_id", "brand": "brand_id"}


class TrainingError(Exception):
    pass


class ConfigError(TrainingError):
    pass


class DataError(TrainingError):
    pass


class DivergenceError(TrainingError):
    pass


@dataclass
class TrainConfig:
    loss_mode: str = "asymmetric"  # asymmetric | symmetric (square, HNM off)
    hnm: str = "full"  # none | full | memory_bank | momentum
    n_cand: int = 1000
    n_hard: int = 8
    batch_size: int | None = None  # 4 with HNM, 8 without
    lr: float = 1e-4
    weight_decay: float = 1e-4
    reg_coeff: float = 5.0
    max_epochs: int = 10
    momentum_m: float = 0.999
    bank_refresh_period: int | None = None  # steps; default once per epoch
    seed: int = 0
    adapter_kind: str = "attention"  # attention | mlp
    heads: int = 8
    inputs: str = "I+ST+K"  # I | I+ST | I+K | I+ST+K
    text_adapter: str | None = None  # identity | mlp; defaults by adapter kind
    patience: int = 1
    log_hnm: bool = False  # record per-step selections (with the scoring feature) for replay

    def resolved(self) -> "TrainConfig":
        cfg = copy.copy(self)
        if cfg.loss_mode not in ("asymmetric", "symmetric"):
            raise ConfigError(f"unknown loss_mode {cfg.loss_mode!r}")
        if cfg.hnm not in ("none", "full", "memory_bank", "momentum"):
            raise ConfigError(f"unknown hnm strategy {cfg.hnm!r}")
        if cfg.loss_mode == "symmetric" and cfg.hnm != "none":
            raise ConfigError("symmetric loss requires square score matrices (hnm none)")
        if cfg.inputs not in INPUT_MODES:
            raise ConfigError(f"unknown inputs mode {cfg.inputs!r}")
        if cfg.adapter_kind not in ("attention", "mlp"):
            raise ConfigError(f"unknown adapter kind {cfg.adapter_kind!r}")
        if cfg.n_hard < 2:
            raise ConfigError("n_hard must be >= 2")
        if cfg.n_cand < cfg.n_hard - 1:
            raise ConfigError("n_cand must be >= n_hard - 1")
        if not 0.0 < cfg.momentum_m <= 1.0:
            raise ConfigError("momentum_m must be in (0, 1]")
        if cfg.batch_size is None:
            cfg.batch_size = 4 if cfg.hnm != "none" else 8
        if cfg.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if cfg.text_adapter is None:
            cfg.text_adapter = "mlp" if cfg.adapter_kind == "mlp" else "identity"
        if cfg.text_adapter not in ("identity", "mlp"):
            raise ConfigError(f"unknown text_adapter {cfg.text_adapter!r}")
        if cfg.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        return cfg


# ---------------------------------------------------------------------------
# loss pieces
# ---------------------------------------------------------------------------


def _softmax_ce(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over rows; returns (loss, dlogits)."""
    m = logits.max(axis=-1, keepdims=True)
    z = np.exp(logits - m)
    total = z.sum(axis=-1, keepdims=True)
    n = logits.shape[0]
    idx = np.arange(n)
    lse = np.log(total[:, 0]) + m[:, 0]
    loss = float((lse - logits[idx, targets]).mean())
    dlogits = z / total
    dlogits[idx, targets] -= 1.0
    dlogits /= n
    return loss, dlogits


def contrastive_loss(scores: np.ndarray, logit_scale: float, mode: str):
    """Cross-entropy over logit-scaled cosine scores.

    asymmetric: the positive sits in column 0 of every row.
    symmetric: square matrices only, positives on the diagonal; the loss is
    the mean of the row-wise and column-wise cross-entropies, as in
    contrastive image-text pretraining.
    Returns (loss, dloss/dscores, dloss/dlogit_scale).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise DivergenceError("non-finite scores in contrastive loss")
    scale = float(np.exp(logit_scale))
    logits = scale * scores
    if mode == "asymmetric":
        targets = np.zeros(scores.shape[0], dtype=np.intp)
        loss, dlogits = _softmax_ce(logits, targets)
    elif mode == "symmetric":
        if scores.shape[0] != scores.shape[1]:
            raise TrainingError(f"symmetric loss needs a square matrix, got {scores.shape}")
        diag = np.arange(scores.shape[0], dtype=np.intp)
        loss_r, dl_r = _softmax_ce(logits, diag)
        loss_c, dl_c = _softmax_ce(logits.T, diag)
        loss = 0.5 * (loss_r + loss_c)
        dlogits = 0.5 * (dl_r + dl_c.T)
    else:
        raise TrainingError(f"unknown loss mode {mode!r}")
    dscores = scale * dlogits
    dlogit_scale = scale * float((dlogits * scores).sum())
    return loss, dscores, dlogit_scale


def regularizer(adapted: np.ndarray, original: np.ndarray, reg_coeff: float):
    """Anchoring term: -coeff * mean(adapted . original); grads w.r.t. adapted."""
    adapted = np.asarray(adapted, dtype=np.float64)
    original = np.asarray(original, dtype=np.float64)
    if adapted.shape != original.shape:
        raise TrainingError(f"shape mismatch {adapted.shape} vs {original.shape}")
    n = adapted.shape[0]
    term = -reg_coeff * float((adapted * original).sum(axis=-1).mean())
    grads = (-reg_coeff / n) * original
    return term, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_tensors(cls, tensors: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in tensors.items()},
            v={k: np.zeros_like(v) for k, v in tensors.items()},
        )


def adam_step(
    tensors: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    skip_decay: frozenset[str] = frozenset(),
) -> None:
    """In-place Adam update; weight decay enters as an additive L2 gradient term."""
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name in sorted(tensors):
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {name}")
        theta = tensors[name]
        if weight_decay and name not in skip_decay:
            g = g + weight_decay * theta
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# hard negatives
# ---------------------------------------------------------------------------


def sample_excluding(n_total: int, excluded_rows: Sequence[int], n_cand: int, rng) -> np.ndarray:
    """Uniform sample (no replacement) of row indices outside ``excluded_rows``."""
    try:
        return _sample_excluding(n_total, excluded_rows, n_cand, rng)
    except SamplingError as exc:
        raise DataError(str(exc)) from exc


class TextPath:
    """Serves label-text features under the current / cached / momentum views.

    With no head (identity text adapter) every view is the raw bank and
    nothing is ever recomputed; ``recompute_count`` must stay at zero.
    """

    def __init__(self, bank: FeatureBank, head: ResidualMlp | None, strategy: str):
        self.bank = bank
        self.head = head
        self.recompute_count = 0
        self._base = bank.vectors.astype(np.float64)
        self.momentum_head = copy.deepcopy(head) if (head and strategy == "momentum") else None
        self.cache = self._apply_all(head) if (head and strategy == "memory_bank") else None

    def _apply(self, head: ResidualMlp | None, rows: np.ndarray) -> np.ndarray:
        base = self._base[rows]
        if head is None:
            return base
        self.recompute_count += len(rows)
        feats, _ = normalized_head_forward(head, base)
        return feats

    def _apply_all(self, head: ResidualMlp | None) -> np.ndarray:
        if head is None:
            return self._base
        self.recompute_count += len(self._base)
        feats, _ = normalized_head_forward(head, self._base)
        return feats

    def current(self, rows: np.ndarray) -> np.ndarray:
        return self._apply(self.head, rows)

    def current_cached(self, rows: np.ndarray):
        """(feats, cache) for gradient flow through the head; cache None if identity."""
        base = self._base[rows]
        if self.head is None:
            return base, None
        self.recompute_count += len(rows)
        return normalized_head_forward(self.head, base)

    def scoring(self, strategy: str, rows: np.ndarray) -> np.ndarray:
        if self.head is None or strategy == "full":
            return self.current(rows)
        if strategy == "memory_bank":
            return self.cache[rows]
        if strategy == "momentum":
            return self._apply(self.momentum_head, rows)
        raise TrainingError(f"unknown hnm strategy {strategy!r}")

    def overwrite_cache(self, rows: np.ndarray, feats: np.ndarray) -> None:
        if self.cache is not None and self.head is not None:
            self.cache[rows] = feats

    def refresh_cache(self) -> None:
        if self.cache is not None:
            self.cache = self._apply_all(self.head)

    def momentum_update(self, m: float) -> None:
        if self.momentum_head is None or self.head is None:
            return
        for name, q in self.head.tensors("h").items():
            k = self.momentum_head.tensors("h")[name]
            k *= m
            k += (1.0 - m) * q


def select_hard_negatives(
    strategy: str,
    image_feat: np.ndarray,
    candidate_rows: np.ndarray,
    text_path: TextPath,
    n_hard: int,
) -> list[str]:
    """Top n_hard-1 candidates by dot product; ties broken by ascending id."""
    feats = text_path.scoring(strategy, candidate_rows)
    scores = feats @ np.asarray(image_feat, dtype=np.float64)
    ids = [text_path.bank.ids[int(r)] for r in candidate_rows]
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in order[: n_hard - 1]]


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


@dataclass
class HistoryRow:
    epoch: int
    step: int | None
    loss: float | None
    reg_term: float | None
    val_accuracy: float | None


@dataclass
class TrainResult:
    params: object
    logit_scale: float
    text_head: ResidualMlp | None
    history: list[HistoryRow]
    zero_shot: Metrics | None
    best_val: Metrics | None
    best_epoch: int | None
    counters: dict[str, int]
    hnm_log: list[dict]
    config: dict


def _image_step_rng(seed: int, epoch: int, step: int, image_id: str):
    entropy = [seed, epoch, step, zlib.crc32(image_id.encode("utf-8"))]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def branch_feats(inputs_mode: str, banks: dict[str, FeatureBank], rows: Sequence[PairRow]):
    """(image batch, extra-branch batches) in the fixed modality order."""
    img = np.stack([banks["image"].get(r.image_id) for r in rows]).astype(np.float64)
    extras = []
    for extra in INPUT_MODES[inputs_mode]:
        bank = banks[_BANK_KEY[extra]]
        extras.append(
            np.stack([bank.get(getattr(r, _ROW_FIELD[extra])) for r in rows]).astype(np.float64)
        )
    return img, extras


def adapt_batch(params, inputs_mode: str, banks, rows: Sequence[PairRow]):
    """Forward the adapter over manifest rows; returns (adapted, cache, raw image feats)."""
    img, extras = branch_feats(inputs_mode, banks, rows)
    if isinstance(params, AttentionAdapterParams):
        x = np.concatenate([img[:, None, :]] + [e[:, None, :] for e in extras], axis=1)
        adapted, cache = attention_forward_cached(params, x)
        return adapted, ("attention", cache), img
    has_scene = "scene_text" in INPUT_MODES[inputs_mode]
    scene = extras[0] if has_scene else None
    others = extras[1:] if has_scene else extras
    adapted, cache = mlp_forward_cached(params, img, scene, others)
    return adapted, ("mlp", cache), img


def adapt_image_features(params, inputs_mode: str, banks, rows: Sequence[PairRow]) -> dict[str, np.ndarray]:
    """Adapted feature per unique image id (first manifest row wins)."""
    seen: dict[str, PairRow] = {}
    for r in rows:
        seen.setdefault(r.image_id, r)
    ordered = [seen[i] for i in sorted(seen)]
    feats: dict[str, np.ndarray] = {}
    for start in range(0, len(ordered), 256):
        chunk = ordered[start : start + 256]
        adapted, _, _ = adapt_batch(params, inputs_mode, banks, chunk)
        for r, v in zip(chunk, adapted):
            feats[r.image_id] = v
    return feats


def adapt_text_features(head: ResidualMlp | None, label_bank: FeatureBank, ids: Sequence[str]) -> dict[str, np.ndarray]:
    """Label-text features through the optional learnable head."""
    unique = sorted(set(ids))
    base = label_bank.get_many(unique).astype(np.float64)
    if head is None:
        return dict(zip(unique, base))
    feats, _ = normalized_head_forward(head, base)
    return dict(zip(unique, feats))


class Trainer:
    def __init__(
        self,
        config: TrainConfig,
        banks: dict[str, FeatureBank],
        rows: Sequence[PairRow],
        val_protocol: EvalProtocol | None = None,
    ):
        self.cfg = config.resolved()
        self.extras = INPUT_MODES[self.cfg.inputs]
        for key in ("image", "label_text", *(_BANK_KEY[e] for e in self.extras)):
            if key not in banks:
                raise DataError(f"missing {key!r} bank for inputs {self.cfg.inputs}")
        self.banks = banks
        dims = {k: b.dim for k, b in banks.items() if len(b)}
        if len(set(dims.values())) > 1:
            raise DataError(f"banks disagree on dimension: {dims}")
        self.dim = banks["image"].dim

        self.train_rows = [r for r in rows if r.split == "train"]
        self.val_rows = [r for r in rows if r.split == "val"]
        if not self.train_rows:
            raise DataError("no train rows in manifest")
        self._check_resolvable(self.train_rows)
        if val_protocol is not None and self.val_rows:
            self._check_resolvable(self.val_rows)

        label_bank = banks["label_text"]
        self.own_rows: dict[str, list[int]] = {}
        train_text_rows = set()
        for r in self.train_rows:
            row_idx = label_bank.row(r.label_text_id)
            self.own_rows.setdefault(r.image_id, []).append(row_idx)
            train_text_rows.add(row_idx)
        # negatives are drawn from training texts only; the bank may hold more
        self.pool_rows = np.array(sorted(train_text_rows), dtype=np.intp)
        self.pool_pos_of_row = {int(r): i for i, r in enumerate(self.pool_rows)}

        n_input = 1 + len(self.extras)
        self.params = init_params(
            self.cfg.adapter_kind,
            self.dim,
            heads=self.cfg.heads,
            n_input=n_input,
            seed=self.cfg.seed,
        )
        if self.cfg.text_adapter == "mlp":
            if self.cfg.adapter_kind == "mlp":
                self.text_head = self.params.g_txt  # shared with the adapter branch
                self.head_prefix = "g_txt"
                self.head_standalone = False
            else:
                self.text_head = init_text_head(self.dim, seed=self.cfg.seed + 1)
                self.head_prefix = "text_head"
                self.head_standalone = True
        else:
            self.text_head = None
            self.head_prefix = None
            self.head_standalone = False

        self.text_path = TextPath(label_bank, self.text_head, self.cfg.hnm)
        self.logit_scale = np.array(LOGIT_SCALE_INIT)

        self.trainables: dict[str, np.ndarray] = dict(self.params.tensors())
        if self.head_standalone:
            self.trainables.update(self.text_head.tensors(self.head_prefix))
        self.trainables["logit_scale"] = self.logit_scale
        self.adam = AdamState.for_tensors(self.trainables)

        self.val_protocol = val_protocol
        self.val_sets = (
            build_candidates(val_protocol, self.val_rows)
            if (val_protocol is not None and self.val_rows)
            else None
        )
        self.counters = {"text_recomputes": 0}
        self.hnm_log: list[dict] = []

    # -- data plumbing ------------------------------------------------------

    def _check_resolvable(self, rows: Sequence[PairRow]) -> None:
        for r in rows:
            if r.image_id not in self.banks["image"]:
                raise DataError(f"image id {r.image_id!r} not in image bank")
            if r.label_text_id not in self.banks["label_text"]:
                raise DataError(f"label text id {r.label_text_id!r} not in label bank")
            for extra in self.extras:
                rid = getattr(r, _ROW_FIELD[extra])
                if rid is None:
                    raise DataError(
                        f"row for image {r.image_id!r} missing {_ROW_FIELD[extra]} "
                        f"required by inputs {self.cfg.inputs}"
                    )
                if rid not in self.banks[_BANK_KEY[extra]]:
                    raise DataError(f"{extra} id {rid!r} not in its bank")

    def _branch_feats(self, rows: Sequence[PairRow]):
        return branch_feats(self.cfg.inputs, self.banks, rows)

    def _adapt(self, rows: Sequence[PairRow]):
        """Forward the adapter; returns (adapted, cache, raw_image_feats)."""
        return adapt_batch(self.params, self.cfg.inputs, self.banks, rows)

    def _adapt_backward(self, cache, gout: np.ndarray) -> dict[str, np.ndarray]:
        kind, inner = cache
        if kind == "attention":
            grads, _ = attention_backward_cached(self.params, inner, gout)
            return grads
        return mlp_backward_cached(self.params, inner, gout)

    # -- evaluation ---------------------------------------------------------

    def _adapted_image_map(self, rows: Sequence[PairRow]) -> dict[str, np.ndarray]:
        return adapt_image_features(self.params, self.cfg.inputs, self.banks, rows)

    def _text_feat_map(self, ids: Sequence[str]) -> dict[str, np.ndarray]:
        unique = sorted(set(ids))
        rows = np.array([self.banks["label_text"].row(t) for t in unique], dtype=np.intp)
        feats = self.text_path.current(rows)
        return dict(zip(unique, feats))

    def validate(self) -> Metrics | None:
        if not self.val_sets:
            return None
        image_feats = self._adapted_image_map(self.val_rows)
        needed = [t for cs in self.val_sets for t in cs.positives + cs.negatives]
        text_feats = self._text_feat_map(needed)
        return evaluate(image_feats, text_feats, self.val_sets)

    def zero_shot(self) -> Metrics | None:
        """Identity baseline on the validation sets (raw banks, no adapter)."""
        if not self.val_sets:
            return None
        return evaluate(self.banks["image"], self.banks["label_text"], self.val_sets)

    # -- training -----------------------------------------------------------

    def _select_batch_negatives(self, rows, adapted, epoch, step):
        neg_ids: list[list[str]] = []
        for r, img_feat in zip(rows, adapted):
            rng = _image_step_rng(self.cfg.seed, epoch, step, r.image_id)
            own = [
                self.pool_pos_of_row[rw]
                for rw in self.own_rows.get(r.image_id, [])
                if rw in self.pool_pos_of_row
            ]
            pool_idx = sample_excluding(len(self.pool_rows), own, self.cfg.n_cand, rng)
            candidate_rows = self.pool_rows[pool_idx]
            selected = select_hard_negatives(
                self.cfg.hnm, img_feat, candidate_rows, self.text_path, self.cfg.n_hard
            )
            neg_ids.append(selected)
            if self.cfg.log_hnm:
                self.hnm_log.append(
                    {
                        "epoch": epoch,
                        "step": step,
                        "image_id": r.image_id,
                        "selected": selected,
                        "feature": [float(v) for v in img_feat],
                    }
                )
        return neg_ids

    def _step(self, rows: Sequence[PairRow], epoch: int, step: int):
        adapted, cache, raw_img = self._adapt(rows)
        label_bank = self.banks["label_text"]
        if self.cfg.hnm != "none":
            neg_ids = self._select_batch_negatives(rows, adapted, epoch, step)
            text_ids = [[r.label_text_id, *negs] for r, negs in zip(rows, neg_ids)]
        else:
            positives = [r.label_text_id for r in rows]
            if self.cfg.loss_mode == "symmetric":
                text_ids = [positives] * len(rows)  # shared columns, diagonal positives
            else:
                text_ids = [
                    [positives[i]] + positives[:i] + positives[i + 1 :]
                    for i in range(len(rows))
                ]
        flat_ids = [t for row_ids in text_ids for t in row_ids]
        flat_rows = np.array([label_bank.row(t) for t in flat_ids], dtype=np.intp)
        flat_feats, head_cache = self.text_path.current_cached(flat_rows)
        n_col = len(text_ids[0])
        t_feats = flat_feats.reshape(len(rows), n_col, self.dim)

        scores = np.einsum("bd,bnd->bn", adapted, t_feats)
        loss, dscores, dlogit_scale = contrastive_loss(
            scores, float(self.logit_scale), self.cfg.loss_mode
        )
        reg_term, dadapted = regularizer(adapted, raw_img, self.cfg.reg_coeff)
        total = loss + reg_term
        if not np.isfinite(total):
            raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}")

        dadapted = dadapted + np.einsum("bn,bnd->bd", dscores, t_feats)
        grads = self._adapt_backward(cache, dadapted)
        if self.text_head is not None:
            dt = np.einsum("bn,bd->bnd", dscores, adapted).reshape(-1, self.dim)
            head_grads, _ = normalized_head_backward(
                self.text_head, head_cache, dt, self.head_prefix
            )
            for name, g in head_grads.items():
                if name in grads:
                    grads[name] = grads[name] + g
                else:
                    grads[name] = g
        grads["logit_scale"] = np.asarray(dlogit_scale)
        for name in self.trainables:
            if name not in grads:
                grads[name] = np.zeros_like(self.trainables[name])

        adam_step(
            self.trainables,
            grads,
            self.adam,
            lr=self.cfg.lr,
            weight_decay=self.cfg.weight_decay,
            skip_decay=frozenset({"logit_scale"}),
        )
        if self.logit_scale > LOGIT_SCALE_MAX:
            self.logit_scale[()] = LOGIT_SCALE_MAX
        self.text_path.momentum_update(self.cfg.momentum_m)
        # sparse memory-bank update: entries just recomputed get overwritten
        if self.text_path.cache is not None:
            fresh, _ = self.text_path.current_cached(flat_rows)
            self.text_path.overwrite_cache(flat_rows, fresh)
        return loss, reg_term

    def run(self) -> TrainResult:
        cfg = self.cfg
        history: list[HistoryRow] = []
        steps_per_epoch = max(1, (len(self.train_rows) + cfg.batch_size - 1) // cfg.batch_size)
        refresh_period = cfg.bank_refresh_period or steps_per_epoch
        zero_shot = self.zero_shot()

        best_acc = -np.inf
        best_epoch = None
        best_val = None
        best_snapshot = None
        bad_epochs = 0
        global_step = 0

        for epoch in range(cfg.max_epochs):
            order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0x5E]))
            order = order_rng.permutation(len(self.train_rows))
            for step in range(steps_per_epoch):
                idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
                rows = [self.train_rows[int(i)] for i in idx]
                loss, reg_term = self._step(rows, epoch, step)
                history.append(HistoryRow(epoch, step, loss, reg_term, None))
                global_step += 1
                if self.text_path.cache is not None and global_step % refresh_period == 0:
                    self.text_path.refresh_cache()
            val = self.validate()
            history.append(
                HistoryRow(epoch, None, None, None, val.accuracy if val else None)
            )
            if val is None:
                continue
            if val.accuracy > best_acc:
                best_acc = val.accuracy
                best_epoch = epoch
                best_val = val
                best_snapshot = {k: v.copy() for k, v in self.trainables.items()}
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    break

        if best_snapshot is not None:
            for name, value in best_snapshot.items():
                self.trainables[name][...] = value
        self.counters["text_recomputes"] = self.text_path.recompute_count
        return TrainResult(
            params=self.params,
            logit_scale=float(self.logit_scale),
            text_head=self.text_head if self.head_standalone else None,
            history=history,
            zero_shot=zero_shot,
            best_val=best_val,
            best_epoch=best_epoch,
            counters=dict(self.counters),
            hnm_log=self.hnm_log,
            config=asdict(cfg),
        )


def train(
    config: TrainConfig,
    banks: dict[str, FeatureBank],
    rows: Sequence[PairRow],
    val_protocol: EvalProtocol | None = None,
) -> TrainResult:
    return Trainer(config, banks, rows, val_protocol).run()
