"""Downstream verification: segmentation training, ranking metrics, ablations.

A small encoder-decoder maps an image to a per-pixel anomaly logit and is
trained with binary cross-entropy on synthesized pairs plus the real
reference-split anomalies. Pixel and image scores are ranked with AUROC
(tie-averaged rank statistic), average precision (area under the
precision-recall step function), and F1-max (exact sweep over every unique
score). Background fidelity is the mean absolute difference outside the
dilated target mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numerics as nm
from .attention_edit import dilate_mask
from .numerics import DTYPE, Tape, Tensor


# ---------------------------------------------------------------------------
# segmenter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SegmenterConfig:
    in_channels: int = 3
    channels: tuple = (16, 32, 64)   # three encoder stages, mirrored decoder
    groups: int = 8


class Segmenter:
    """Encoder-decoder with three downsampling stages and skip connections."""

    def __init__(self, config: SegmenterConfig = SegmenterConfig(), seed: int = 0):
        from .denoiser import Conv, GroupNorm
        rng = np.random.default_rng(seed)
        c0, c1, c2 = config.channels
        cin = config.in_channels
        g = config.groups
        self.config = config
        self.stem = Conv(rng, cin, c0)
        self.enc0 = Conv(rng, c0, c0)
        self.down0 = Conv(rng, c0, c1, stride=2)       # 32 -> 16
        self.enc1 = Conv(rng, c1, c1)
        self.down1 = Conv(rng, c1, c2, stride=2)       # 16 -> 8
        self.enc2 = Conv(rng, c2, c2)
        self.down2 = Conv(rng, c2, c2, stride=2)       # 8 -> 4
        self.mid = Conv(rng, c2, c2)
        self.up2 = Conv(rng, c2, c2)
        self.dec2 = Conv(rng, c2 + c2, c2)
        self.up1 = Conv(rng, c2, c1)
        self.dec1 = Conv(rng, c1 + c1, c1)
        self.up0 = Conv(rng, c1, c0)
        self.dec0 = Conv(rng, c0 + c0, c0)
        self.norms = [GroupNorm(c, g) for c in
                      (c0, c0, c1, c2, c2, c2, c1, c0)]
        self.head = Conv(rng, c0, 1, k=1)

    def __call__(self, x: Tensor) -> Tensor:
        n = self.norms
        h = nm.silu(n[0](self.stem(x)))
        s0 = nm.silu(n[1](self.enc0(h)))
        h = self.down0(s0)
        s1 = nm.silu(n[2](self.enc1(h)))
        h = self.down1(s1)
        s2 = nm.silu(n[3](self.enc2(h)))
        h = self.down2(s2)
        h = nm.silu(n[4](self.mid(h)))
        h = self.up2(nm.upsample_nearest2x(h))
        h = nm.silu(n[5](self.dec2(nm.concat([h, s2], axis=3))))
        h = self.up1(nm.upsample_nearest2x(h))
        h = nm.silu(n[6](self.dec1(nm.concat([h, s1], axis=3))))
        h = self.up0(nm.upsample_nearest2x(h))
        h = nm.silu(n[7](self.dec0(nm.concat([h, s0], axis=3))))
        return self.head(h)

    def params(self) -> dict[str, Tensor]:
        out = {}
        mods = [("stem", self.stem), ("enc0", self.enc0), ("down0", self.down0),
                ("enc1", self.enc1), ("down1", self.down1), ("enc2", self.enc2),
                ("down2", self.down2), ("mid", self.mid), ("up2", self.up2),
                ("dec2", self.dec2), ("up1", self.up1), ("dec1", self.dec1),
                ("up0", self.up0), ("dec0", self.dec0), ("head", self.head)]
        for name, mod in mods:
            out.update(mod.params(name))
        for i, norm in enumerate(self.norms):
            out.update(norm.params(f"norm{i}"))
        return out

    def set_trainable(self, flag: bool):
        for p in self.params().values():
            p.requires_grad = flag

    def scores(self, images: np.ndarray, batch: int = 32) -> np.ndarray:
        """Per-pixel anomaly probabilities for a stack of images."""
        images = np.asarray(images, dtype=DTYPE)
        out = []
        for i in range(0, len(images), batch):
            logits = self(Tensor(images[i:i + batch])).data[..., 0]
            out.append(1.0 / (1.0 + np.exp(-logits)))
        return np.concatenate(out, axis=0).astype(DTYPE)


def train_segmenter(pairs, epochs: int, seed: int, *, lr: float = 2e-3,
                    batch_size: int = 16, min_pairs: int = 50,
                    config: SegmenterConfig = SegmenterConfig(),
                    progress=None) -> Segmenter:
    """Binary cross-entropy training on (image, mask) pairs; seeded and exact.

    ``min_pairs`` guards the standard protocol; capacity checks on tiny sets
    pass a smaller floor explicitly.
    """
    if len(pairs) < min_pairs:
        raise ValueError(f"need at least {min_pairs} training pairs, got {len(pairs)}")
    images = np.stack([np.asarray(img, dtype=DTYPE) for img, _ in pairs])
    masks = np.stack([np.asarray(m, dtype=DTYPE) for _, m in pairs])[..., None]
    pos = float(masks.sum())
    neg = float(masks.size - masks.sum())
    if pos == 0 or neg == 0:
        raise ValueError(f"degenerate labels: {int(pos)} positive / {int(neg)} negative pixels")

    model = Segmenter(config, seed=seed)
    model.set_trainable(True)
    params = model.params()
    state = nm.AdamState.for_params(params, lr=lr)
    rng = np.random.default_rng(seed + 1)
    n = len(pairs)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            with Tape() as tape:
                logits = model(Tensor(images[idx]))
                loss = nm.bce_with_logits(logits, Tensor(masks[idx]))
            grads = nm.backward(tape, loss)
            named = {name: grads.get(p, Tensor(np.zeros_like(p.data)))
                     for name, p in params.items()}
            nm.adam_step(params, named, state)
            total += float(loss.data) * len(idx)
        losses.append(total / n)
        if progress is not None:
            progress(epoch, losses[-1])
    model.set_trainable(False)
    model.train_losses = losses
    return model


# ---------------------------------------------------------------------------
# ranking metrics
# ---------------------------------------------------------------------------

def _check_binary(labels: np.ndarray):
    pos = int((labels == 1).sum())
    neg = int((labels == 0).sum())
    if pos == 0 or neg == 0:
        raise ValueError(f"need both classes: {pos} positive, {neg} negative")
    return pos, neg


def _tie_averaged_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank statistic with ties averaged (Mann-Whitney)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pos, neg = _check_binary(labels)
    ranks = _tie_averaged_ranks(scores)
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - pos * (pos + 1) / 2.0) / (pos * neg))


def _pr_curve(scores: np.ndarray, labels: np.ndarray):
    """TP/FP counts at every unique score threshold, descending."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    lab = labels[order]
    tp = np.cumsum(lab == 1)
    fp = np.cumsum(lab == 0)
    # keep only the last index of each tie group (threshold = that score)
    last = np.nonzero(np.diff(s, append=-np.inf))[0]
    return tp[last].astype(np.float64), fp[last].astype(np.float64)


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the precision-recall step function over exact thresholds."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pos, _ = _check_binary(labels)
    tp, fp = _pr_curve(scores, labels)
    precision = tp / (tp + fp)
    recall = tp / pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev) * precision).sum())


def f1_max(scores: np.ndarray, labels: np.ndarray) -> float:
    """Best F1 over all unique score values as thresholds (exact sweep)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pos, _ = _check_binary(labels)
    tp, fp = _pr_curve(scores, labels)
    fn = pos - tp
    f1 = 2.0 * tp / np.maximum(2.0 * tp + fp + fn, 1e-12)
    return float(f1.max())


def pixel_metrics(scores: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    return {
        "auroc": auroc(scores, labels),
        "ap": average_precision(scores, labels),
        "f1max": f1_max(scores, labels),
    }


def image_metrics(image_scores: np.ndarray, image_labels: np.ndarray) -> dict[str, float]:
    """Same metrics at image level; the image score is the max pixel score."""
    image_scores = np.asarray(image_scores, dtype=np.float64).reshape(-1)
    if np.all(image_scores == image_scores[0]):
        raise ValueError("degenerate image scores: all identical")
    return pixel_metrics(image_scores, image_labels)


def background_fidelity(generated: np.ndarray, normal_recon: np.ndarray,
                        target_mask: np.ndarray, dilation: int = 3) -> float:
    """Mean absolute difference outside the dilated target mask."""
    generated = np.asarray(generated, dtype=np.float64)
    normal_recon = np.asarray(normal_recon, dtype=np.float64)
    if generated.shape != normal_recon.shape:
        raise ValueError("image shapes differ")
    outside = dilate_mask(target_mask, dilation) == 0
    if not outside.any():
        raise ValueError("dilated mask covers the whole image")
    diff = np.abs(generated - normal_recon).mean(axis=-1)
    return float(diff[outside].mean())


def masked_change_ratio(generated: np.ndarray, normal_recon: np.ndarray,
                        target_mask: np.ndarray, dilation: int = 3
                        ) -> tuple[float, float]:
    """(mean |difference| inside mask, outside dilated mask)."""
    diff = np.abs(np.asarray(generated, np.float64)
                  - np.asarray(normal_recon, np.float64)).mean(axis=-1)
    inside = np.asarray(target_mask) == 1
    outside = dilate_mask(target_mask, dilation) == 0
    if not inside.any() or not outside.any():
        raise ValueError("mask leaves no inside or outside pixels")
    return float(diff[inside].mean()), float(diff[outside].mean())


# ---------------------------------------------------------------------------
# scoring a test split
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-(class, defect) and aggregate metric rows plus fidelity statistics."""

    rows: list = field(default_factory=list)       # dicts with class/defect/metrics
    background: dict = field(default_factory=dict)
    ablation: list = field(default_factory=list)

    METRICS = ("pixel_auroc", "pixel_ap", "pixel_f1max",
               "image_auroc", "image_ap", "image_f1max")

    def add_row(self, cls: str, defect: str, values: dict):
        for key in self.METRICS:
            v = values.get(key)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"metric {key}={v} outside [0, 1]")
        self.rows.append({"class": cls, "defect": defect, **values})

    def aggregate(self) -> Optional[dict]:
        for row in self.rows:
            if row["class"] == "all":
                return row
        return None


def evaluate_segmenter(segmenter: Segmenter, manifest, *,
                       batch: int = 32) -> MetricReport:
    """Score the held-out test split per (class, defect) and in aggregate."""
    report = MetricReport()
    all_pixel_scores, all_pixel_labels = [], []
    all_img_scores, all_img_labels = [], []
    per_class_good = {}
    for cls in sorted({r.cls for r in manifest.records}):
        good = manifest.select(split="test", cls=cls, defect="good")
        imgs = np.stack([manifest.load_image(r) for r in good])
        scores = segmenter.scores(imgs, batch=batch)
        per_class_good[cls] = scores
        all_pixel_scores.append(scores.reshape(-1))
        all_pixel_labels.append(np.zeros(scores.size, dtype=np.uint8))
        all_img_scores.append(scores.reshape(len(good), -1).max(axis=1))
        all_img_labels.append(np.zeros(len(good), dtype=np.uint8))

    pairs = sorted({(r.cls, r.defect) for r in manifest.records if r.defect != "good"})
    for cls, defect in pairs:
        recs = manifest.select(split="test", cls=cls, defect=defect)
        imgs = np.stack([manifest.load_image(r) for r in recs])
        masks = np.stack([manifest.load_mask(r) for r in recs])
        scores = segmenter.scores(imgs, batch=batch)
        good_scores = per_class_good[cls]
        pix_scores = np.concatenate([scores.reshape(-1), good_scores.reshape(-1)])
        pix_labels = np.concatenate([masks.reshape(-1),
                                     np.zeros(good_scores.size, dtype=np.uint8)])
        img_scores = np.concatenate([scores.reshape(len(recs), -1).max(axis=1),
                                     good_scores.reshape(len(good_scores), -1).max(axis=1)])
        img_labels = np.concatenate([np.ones(len(recs), dtype=np.uint8),
                                     np.zeros(len(good_scores), dtype=np.uint8)])
        pix = pixel_metrics(pix_scores, pix_labels)
        img = image_metrics(img_scores, img_labels)
        report.add_row(cls, defect, {
            "pixel_auroc": pix["auroc"], "pixel_ap": pix["ap"],
            "pixel_f1max": pix["f1max"], "image_auroc": img["auroc"],
            "image_ap": img["ap"], "image_f1max": img["f1max"],
        })
        all_pixel_scores.append(scores.reshape(-1))
        all_pixel_labels.append(masks.reshape(-1))
        all_img_scores.append(scores.reshape(len(recs), -1).max(axis=1))
        all_img_labels.append(np.ones(len(recs), dtype=np.uint8))

    pix = pixel_metrics(np.concatenate(all_pixel_scores), np.concatenate(all_pixel_labels))
    img = image_metrics(np.concatenate(all_img_scores), np.concatenate(all_img_labels))
    report.add_row("all", "all", {
        "pixel_auroc": pix["auroc"], "pixel_ap": pix["ap"],
        "pixel_f1max": pix["f1max"], "image_auroc": img["auroc"],
        "image_ap": img["ap"], "image_f1max": img["f1max"],
    })
    return report


def segmenter_training_pairs(records, manifest=None, include_reference: bool = True):
    """(image, mask) pairs from generation records plus the reference split."""
    pairs = [(rec.image, rec.mask) for rec in records]
    if include_reference and manifest is not None:
        for r in manifest.select(split="reference"):
            pairs.append((manifest.load_image(r), manifest.load_mask(r)))
    return pairs


def run_ablation(manifest, configurations: dict, seed: int, *, model, sched,
                 count: int = 100, epochs: int = 12, out_dir=None,
                 ago_cache=None, progress=None) -> list[dict]:
    """Generate, train, and score one batch per configuration with shared seeds.

    ``configurations`` maps a name to {"dae": bool, "ago": bool}; the four
    standard arms (grafting only, +enhancement, +optimization, full) must all
    be present so the orderings are comparable.
    """
    required = {("triag", False, False), ("triag+dae", True, False),
                ("triag+ago", False, True), ("full", True, True)}
    have = {(name, bool(c.get("dae")), bool(c.get("ago")))
            for name, c in configurations.items()}
    if not required <= have:
        missing = sorted(n for n, _, _ in required - have)
        raise ValueError(f"ablation grid incomplete, missing {missing}")

    from .pipeline import generate_batch  # deferred: pipeline imports this module

    table = []
    for name in sorted(configurations):
        cfg = configurations[name]
        records, failures = generate_batch(
            manifest, count, seed=seed, model=model, sched=sched,
            use_dae=bool(cfg.get("dae")), use_ago=bool(cfg.get("ago")),
            out_dir=None if out_dir is None else f"{out_dir}/{name}",
            ago_cache=ago_cache, progress=progress)
        if len(failures) > 0.1 * count:
            raise RuntimeError(f"configuration {name}: {len(failures)} of {count} failed")
        pairs = segmenter_training_pairs(records, manifest)
        seg = train_segmenter(pairs, epochs=epochs, seed=seed)
        report = evaluate_segmenter(seg, manifest)
        agg = report.aggregate()
        table.append({"config": name, "dae": bool(cfg.get("dae")),
                      "ago": bool(cfg.get("ago")),
                      "pixel_auroc": agg["pixel_auroc"],
                      "pixel_ap": agg["pixel_ap"],
                      "pixel_f1max": agg["pixel_f1max"]})
    return table
