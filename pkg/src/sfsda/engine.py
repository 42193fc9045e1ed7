"""Two-stage training: supervised source pretraining, then source-free
target adaptation of the encoder under a frozen classifier.

Owns all cross-batch state: pseudo-labels, the entropy-ranked reliable
sample set, the per-sample EMA prediction store, and checkpointing.
Pseudo-labels and the reliable set refresh once per epoch; the EMA store
updates once per epoch from weak-view predictions.
"""

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .backbone import (
    AdaptableClassifier,
    EncoderConfig,
    MixSpec,
    lambda_hat,
    mix_patches,
)
from .data import ConfigError, DatasetSplit, ShiftConfig, make_batches
from .losses import (
    LossWeights,
    base_loss,
    mixup_ce_loss,
    mixup_contrastive_loss,
    pr_loss,
    pwc_loss,
    total_loss,
)


@dataclass
class RunConfig:
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    lr_encoder: float = 0.001
    lr_classifier: float = 0.01  # pretraining only; frozen afterwards
    momentum: float = 0.9
    epochs_pretrain: int = 30
    epochs_adapt: int = 8
    batch_size: int = 64
    mix_batch_size: int = 16
    top_k: int = 2
    beta_params: tuple = (1.0, 1.0)
    augment_ops: int = 2
    augment_magnitude: float = 9.0
    seed: int = 0

    def validate(self):
        if self.lr_encoder <= 0 or self.lr_classifier <= 0:
            raise ConfigError("learning rates must be positive")
        self.shift.validate()
        self.weights.validate()


def argmax_first(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax with ties broken by the lowest class index."""
    return np.argmax(probs, axis=1)


class PredictionStore:
    """Per-sample EMA of weak-view predictions, updated once per epoch.

    Rows start at the uniform distribution (the zero-information prior)
    and stay on the simplex because every update is a convex combination.
    """

    def __init__(self, ids, num_classes: int, alpha: float = 0.7):
        self.alpha = alpha
        self.num_classes = num_classes
        self.epoch = 0
        uniform = np.full(num_classes, 1.0 / num_classes)
        self.ema = {int(i): uniform.copy() for i in ids}

    def update(self, ids, probs: np.ndarray):
        for i, p in zip(ids, probs):
            i = int(i)
            if i not in self.ema:
                raise KeyError(f"unknown sample id {i}")
            self.ema[i] = self.alpha * self.ema[i] + (1 - self.alpha) * np.asarray(p, dtype=float)

    def rows(self, ids) -> np.ndarray:
        return np.stack([self.ema[int(i)] for i in ids])


@dataclass
class ReliableEntry:
    sample: object
    label: int
    provenance: str  # "ground-truth" | "high-confidence"


@dataclass
class ReliableSet:
    entries: list
    top_k: int


@dataclass
class MixedBatch:
    images: torch.Tensor  # (B, C, H, W)
    component_images: torch.Tensor  # (2B, C, H, W)
    pairing: list  # (2k, 2k + 1) into component rows
    component_labels: np.ndarray  # (2B,)
    lambdas: torch.Tensor  # (B, m)
    specs: list


def _forward_in_batches(model, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Eval-mode class probabilities for a stack of images."""
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(images), chunk):
            batch = torch.from_numpy(images[start : start + chunk]).float()
            out.append(model(batch).probs.numpy())
    return np.concatenate(out) if out else np.zeros((0, model.cfg.num_classes))


def pseudo_label(model: AdaptableClassifier, samples) -> dict:
    """Map sample id -> (argmax class, prediction entropy), from the
    weak (unaugmented) view in eval mode."""
    if not samples:
        return {}
    images = np.stack([s.image for s in samples])
    probs = _forward_in_batches(model, images)
    labels = argmax_first(probs)
    ent = -np.sum(probs * np.log(np.clip(probs, 1e-12, None)), axis=1)
    return {s.id: (int(c), float(e)) for s, c, e in zip(samples, labels, ent)}


def build_reliable_set(pseudo: dict, split: DatasetSplit, top_k: int) -> ReliableSet:
    """Ground-truth labeled target samples plus the top_k lowest-entropy
    pseudo-labeled samples per class (fewer when a class is scarce)."""
    entries = [ReliableEntry(s, int(s.label), "ground-truth") for s in split.target_labeled]
    by_class = {}
    for s in split.target_unlabeled:
        cls, ent = pseudo[s.id]
        by_class.setdefault(cls, []).append((ent, s.id, s))
    for cls in sorted(by_class):
        for ent, _, s in sorted(by_class[cls])[:top_k]:
            entries.append(ReliableEntry(s, cls, "high-confidence"))
    return ReliableSet(entries=entries, top_k=top_k)


def assemble_mixed_batch(
    reliable: ReliableSet,
    batch_size: int,
    rng: np.random.Generator,
    patch_size: int,
    beta_params=(1.0, 1.0),
) -> MixedBatch:
    """Sample distinct component pairs from the reliable set and build
    patch-mixed images with Beta-distributed per-patch coefficients."""
    entries = reliable.entries
    if len(entries) < 2:
        raise ConfigError("reliable set must contain at least 2 samples")
    beta, gamma = beta_params
    images, comps, pairing, labels, lambdas, specs = [], [], [], [], [], []
    sample_t = [torch.from_numpy(e.sample.image).float() for e in entries]
    h = sample_t[0].shape[1]
    m = (h // patch_size) * (sample_t[0].shape[2] // patch_size)
    for k in range(batch_size):
        i, j = rng.choice(len(entries), size=2, replace=False)
        lam = torch.from_numpy(rng.beta(beta, gamma, size=m)).float()
        spec = MixSpec(i=int(i), j=int(j), lambdas=lam, beta_params=(beta, gamma))
        images.append(mix_patches(sample_t[i], sample_t[j], lam, patch_size))
        comps.extend([sample_t[i], sample_t[j]])
        pairing.append((2 * k, 2 * k + 1))
        labels.extend([entries[i].label, entries[j].label])
        lambdas.append(lam)
        specs.append(spec)
    return MixedBatch(
        images=torch.stack(images),
        component_images=torch.stack(comps),
        pairing=pairing,
        component_labels=np.array(labels),
        lambdas=torch.stack(lambdas),
        specs=specs,
    )


def evaluate(model: AdaptableClassifier, samples, truth: dict) -> dict:
    """Top-1 accuracy (overall and per class) against a truth map."""
    images = np.stack([s.image for s in samples])
    preds = argmax_first(_forward_in_batches(model, images))
    labels = np.array([truth[s.id] for s in samples])
    num_classes = model.cfg.num_classes
    confusion = np.zeros((num_classes, num_classes), dtype=int)
    for t, p in zip(labels, preds):
        confusion[t, p] += 1
    per_class = {}
    for c in range(num_classes):
        total = int(confusion[c].sum())
        per_class[c] = float(confusion[c, c] / total) if total else None
    return {
        "accuracy": float(np.trace(confusion) / confusion.sum()),
        "per_class": per_class,
        "confusion": confusion,
    }


def pretrain_source(split: DatasetSplit, cfg: RunConfig, val_fraction: float = 0.2):
    """Train encoder and classifier jointly with cross-entropy on the
    source split.  Returns (model, source validation accuracy)."""
    cfg.validate()
    if not split.source:
        raise ConfigError("source split is empty")
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    model = AdaptableClassifier(cfg.encoder)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(split.source))
    n_val = max(1, int(len(order) * val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    images = np.stack([s.image for s in split.source])
    labels = np.array([s.label for s in split.source])

    opt = torch.optim.SGD(
        [
            {"params": model.encoder.parameters(), "lr": cfg.lr_encoder},
            {"params": model.classifier.parameters(), "lr": cfg.lr_classifier},
        ],
        momentum=cfg.momentum,
    )
    ce = torch.nn.CrossEntropyLoss()
    for epoch in range(cfg.epochs_pretrain):
        model.train()
        perm = rng.permutation(train_idx)
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            x = torch.from_numpy(images[idx]).float()
            y = torch.from_numpy(labels[idx]).long()
            loss = ce(model(x).logits, y)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite pretraining loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()

    val_probs = _forward_in_batches(model, images[val_idx])
    val_acc = float((argmax_first(val_probs) == labels[val_idx]).mean())
    return model, val_acc


def adapt_target(
    split: DatasetSplit,
    model: AdaptableClassifier,
    cfg: RunConfig,
    metrics_path: Optional[str] = None,
) -> tuple:
    """Source-free adaptation of the encoder on the target domain.

    Per epoch: refresh pseudo-labels and the reliable set, run batches
    combining all four objectives, then update the EMA store from
    end-of-epoch weak-view predictions.  The classifier never changes.
    Returns (model, list of per-epoch metric records).
    """
    cfg.validate()
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed + 1)
    model.freeze_classifier()
    opt = torch.optim.SGD(
        [p for p in model.encoder.parameters() if p.requires_grad],
        lr=cfg.lr_encoder,
        momentum=cfg.momentum,
    )
    store = PredictionStore(
        [s.id for s in split.target_unlabeled], split.num_classes, alpha=cfg.weights.alpha
    )
    w = cfg.weights
    patch = cfg.encoder.patch_size
    metrics = []
    lines = []

    for epoch in range(cfg.epochs_adapt):
        pseudo = pseudo_label(model, split.target_unlabeled)
        reliable = build_reliable_set(pseudo, split, cfg.top_k)
        rng = np.random.default_rng(cfg.seed * 7919 + epoch)
        sums = {"base": 0.0, "pwc": 0.0, "rmc": 0.0, "pr": 0.0, "all": 0.0}
        steps = 0
        model.train()
        for lab, unl in make_batches(
            split, cfg.batch_size, rng, cfg.augment_ops, cfg.augment_magnitude
        ):
            out_w = model(torch.from_numpy(unl.weak).float())
            out_s = model(torch.from_numpy(unl.strong).float())
            pseudo_batch = argmax_first(out_w.probs.detach().numpy())

            l_base = base_loss(
                model(torch.from_numpy(lab.images).float()).probs,
                lab.labels,
                out_w.probs,
                pseudo_batch,
            )

            probs2 = torch.cat([out_w.probs, out_s.probs])
            cats2 = np.concatenate([pseudo_batch, pseudo_batch])
            l_pwc = (
                pwc_loss(probs2, cats2, w.tau)
                if w.lambda_pwc > 0
                else probs2.sum() * 0.0
            )

            ema_rows = torch.from_numpy(store.rows(unl.ids)).to(out_w.probs.dtype)
            l_pr = pr_loss(out_w.probs, ema_rows) if w.lambda_pr > 0 else out_w.probs.sum() * 0.0

            if w.lambda_rmc > 0:
                mixed = assemble_mixed_batch(
                    reliable, cfg.mix_batch_size, rng, patch, cfg.beta_params
                )
                out_mix = model(mixed.images)
                out_comp = model(mixed.component_images)
                lam_hat = torch.stack(
                    [
                        lambda_hat(
                            mixed.lambdas[k],
                            out_mix.attention[k].detach(),
                            out_mix.attention[k].detach(),
                        )
                        for k in range(mixed.images.shape[0])
                    ]
                ).to(out_mix.probs.dtype)
                y_i = mixed.component_labels[0::2]
                y_j = mixed.component_labels[1::2]
                l_rmc = mixup_ce_loss(out_mix.probs, y_i, y_j, lam_hat) + mixup_contrastive_loss(
                    out_mix.probs,
                    out_comp.probs,
                    mixed.pairing,
                    lam_hat,
                    mixed.component_labels,
                    w.tau,
                )
            else:
                l_rmc = out_w.probs.sum() * 0.0

            l_all = total_loss(l_base, l_pwc, l_rmc, l_pr, w)
            opt.zero_grad()
            l_all.backward()
            opt.step()

            for key, val in (
                ("base", l_base),
                ("pwc", l_pwc),
                ("rmc", l_rmc),
                ("pr", l_pr),
                ("all", l_all),
            ):
                sums[key] += float(val)
            steps += 1

        # end-of-epoch weak-view predictions feed the EMA store
        images = np.stack([s.image for s in split.target_unlabeled])
        probs = _forward_in_batches(model, images)
        store.update([s.id for s in split.target_unlabeled], probs)
        store.epoch = epoch + 1

        acc = evaluate(model, split.target_unlabeled, split.unlabeled_truth)["accuracy"]
        record = {
            "epoch": epoch,
            "loss_base": sums["base"] / max(steps, 1),
            "loss_pwc": sums["pwc"] / max(steps, 1),
            "loss_rmc": sums["rmc"] / max(steps, 1),
            "loss_pr": sums["pr"] / max(steps, 1),
            "loss_all": sums["all"] / max(steps, 1),
            "target_acc": acc,
        }
        metrics.append(record)
        lines.append(json.dumps(record, sort_keys=True))

    if metrics_path:
        with open(metrics_path, "w") as f:
            f.write("\n".join(lines) + ("\n" if lines else ""))
    return model, metrics
