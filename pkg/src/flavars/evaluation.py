"""Downstream protocols over frozen encoders: KNN, zero-shot and a dense probe."""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from flavars.datapipe.records import Dataset, SampleRecord
from flavars.datapipe.selection import SplitSpec
from flavars.datapipe.vocab import Vocabulary, tokenize
from flavars.encoders import images_to_tensor
from flavars.errors import ConfigurationError, DataError

SEG_DEVIATION = "linear per-patch probe with bilinear upsampling in place of a UperNet decoder"


@dataclass
class EmbeddingIndex:
    matrix: np.ndarray  # [N, d]
    labels: list[int]
    ids: list[str]

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if not (len(self.matrix) == len(self.labels) == len(self.ids)):
            raise DataError("EmbeddingIndex matrix, labels and ids differ in length")

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class KnnConfig:
    k: int = 5
    metric: str = "euclidean"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError("k must be >= 1")
        if self.metric != "euclidean":
            raise ConfigurationError(f"unsupported metric {self.metric!r}")


@dataclass
class MetricReport:
    protocol: str
    metric: str
    value: float
    per_class: dict[str, float | None]
    split_fingerprint: str
    config_fingerprint: str
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "protocol": self.protocol,
            "metric": self.metric,
            "value": self.value,
            "per_class": self.per_class,
            "split_fingerprint": self.split_fingerprint,
            "config_fingerprint": self.config_fingerprint,
        }
        if self.notes:
            out["notes"] = self.notes
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


def _image_encoder(encoder):
    return encoder.encode_image if hasattr(encoder, "encode_image") else encoder


@torch.no_grad()
def embed_images(encoder, images, batch_size: int = 64) -> np.ndarray:
    encode = _image_encoder(encoder)
    arr = np.asarray(images)
    rows = []
    for start in range(0, len(arr), batch_size):
        x = images_to_tensor(arr[start : start + batch_size])
        rows.append(encode(x).pooled.double().numpy())
    return np.concatenate(rows) if rows else np.zeros((0, 0))


def embed_dataset(encoder, images, labels: Sequence[int] | None = None, ids: Sequence[str] | None = None) -> EmbeddingIndex:
    """Row i is the pooled embedding of image i."""
    matrix = embed_images(encoder, images)
    n = len(matrix)
    return EmbeddingIndex(matrix, list(labels) if labels is not None else [0] * n, list(ids) if ids is not None else [str(i) for i in range(n)])


# ---------------------------------------------------------------------------
# KNN and zero-shot
# ---------------------------------------------------------------------------


def knn_classify(index: EmbeddingIndex, query, config: KnnConfig = KnnConfig()) -> int:
    """Majority vote of the k nearest rows.

    Distance ties go to the smaller id; vote ties go to the tied class whose
    member is nearest.
    """
    n = len(index)
    if n == 0:
        raise DataError("empty KNN index")
    if config.k > n:
        raise ConfigurationError(f"k={config.k} exceeds index size {n}")
    q = np.asarray(query, dtype=np.float64)
    dists = ((index.matrix - q[None, :]) ** 2).sum(1)
    order = sorted(range(n), key=lambda i: (dists[i], index.ids[i]))[: config.k]
    votes = Counter(index.labels[i] for i in order)
    best = max(votes.values())
    tied = {label for label, count in votes.items() if count == best}
    for i in order:
        if index.labels[i] in tied:
            return index.labels[i]
    raise AssertionError("unreachable")


def zero_shot_classify(image_embedding, class_embeddings) -> int:
    """Index of the class embedding with the highest cosine similarity (ties: lowest index)."""
    x = np.asarray(image_embedding, dtype=np.float64)
    c = np.atleast_2d(np.asarray(class_embeddings, dtype=np.float64))
    if c.shape[0] < 1:
        raise DataError("need at least one class embedding")
    xn = np.linalg.norm(x)
    cn = np.linalg.norm(c, axis=1)
    if xn == 0 or np.any(cn == 0):
        raise DataError("zero-norm embedding")
    sims = (c @ x) / (cn * xn)
    return int(np.argmax(sims))


def expand_prompt(class_name: str) -> str:
    name = class_name.strip()
    if not name:
        raise DataError("empty class name")
    return f"a satellite photo of {name.lower()}."


@torch.no_grad()
def embed_prompts(model, vocab: Vocabulary, class_names: Sequence[str]) -> np.ndarray:
    seqs = [tokenize(expand_prompt(c), vocab, model.cfg.text.max_len) for c in class_names]
    ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
    pad = torch.tensor([s.pad_mask for s in seqs], dtype=torch.bool)
    return model.encode_text(ids, pad).pooled.double().numpy()


# ---------------------------------------------------------------------------
# segmentation probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegProbeConfig:
    epochs: int = 200
    learning_rate: float = 0.05
    seed: int = 0


class SegProbe(nn.Module):
    """Linear classifier per patch token; logits are bilinearly upsampled to pixels."""

    def __init__(self, width: int, num_classes: int, grid: int, image_size: int):
        super().__init__()
        self.linear = nn.Linear(width, num_classes)
        self.grid = grid
        self.image_size = image_size

    def forward(self, patch_states: torch.Tensor) -> torch.Tensor:
        b = patch_states.shape[0]
        logits = self.linear(patch_states)  # [B, N, C]
        logits = logits.transpose(1, 2).reshape(b, -1, self.grid, self.grid)
        return F.interpolate(logits, size=(self.image_size, self.image_size), mode="bilinear", align_corners=False)


def _vision_of(encoder):
    return encoder.vision if hasattr(encoder, "vision") else encoder


@torch.no_grad()
def patch_states(encoder, images, batch_size: int = 64) -> torch.Tensor:
    vision = _vision_of(encoder)
    arr = np.asarray(images)
    out = [vision(images_to_tensor(arr[s : s + batch_size])).token_states[:, 1:] for s in range(0, len(arr), batch_size)]
    return torch.cat(out)


def train_seg_probe(encoder, images, label_maps, num_classes: int, config: SegProbeConfig = SegProbeConfig()) -> SegProbe:
    """Fit the probe by full-batch Adam with the encoder frozen (features computed under no_grad)."""
    vision = _vision_of(encoder)
    vcfg = vision.cfg
    targets = torch.as_tensor(np.asarray(label_maps), dtype=torch.long)
    if targets.shape[1:] != (vcfg.image_size, vcfg.image_size):
        raise DataError(f"label maps {tuple(targets.shape[1:])} do not match image size {vcfg.image_size}")
    if targets.numel() and (int(targets.min()) < 0 or int(targets.max()) >= num_classes):
        raise DataError(f"label values outside [0, {num_classes})")
    feats = patch_states(encoder, images)
    gen = torch.Generator().manual_seed(config.seed)
    probe = SegProbe(vcfg.width, num_classes, vcfg.grid_size, vcfg.image_size)
    with torch.no_grad():
        probe.linear.weight.normal_(0.0, 0.01, generator=gen)
        probe.linear.bias.zero_()
    opt = torch.optim.Adam(probe.parameters(), lr=config.learning_rate, foreach=False)
    for _ in range(config.epochs):
        opt.zero_grad(set_to_none=True)
        loss = F.cross_entropy(probe(feats), targets)
        loss.backward()
        opt.step()
    return probe


@torch.no_grad()
def predict_seg(encoder, probe: SegProbe, images) -> np.ndarray:
    return probe(patch_states(encoder, images)).argmax(1).numpy()


def confusion_matrix(pred, target, num_classes: int) -> np.ndarray:
    p = np.asarray(pred).reshape(-1).astype(np.int64)
    t = np.asarray(target).reshape(-1).astype(np.int64)
    if np.asarray(pred).shape != np.asarray(target).shape:
        raise DataError(f"prediction shape {np.asarray(pred).shape} != target shape {np.asarray(target).shape}")
    for name, arr in (("prediction", p), ("target", t)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DataError(f"{name} values outside [0, {num_classes})")
    return np.bincount(t * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


def compute_miou(pred_maps, target_maps, num_classes: int, split_fingerprint: str = "", config_fingerprint: str = "") -> MetricReport:
    """Dataset-level IoU per class from one accumulated confusion matrix.

    Classes absent from both prediction and target are excluded from the mean.
    """
    cm = confusion_matrix(pred_maps, target_maps, num_classes)
    tp = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - tp
    per_class: dict[str, float | None] = {}
    ious = []
    for c in range(num_classes):
        if union[c] == 0:
            per_class[str(c)] = None
        else:
            iou = float(tp[c] / union[c])
            per_class[str(c)] = iou
            ious.append(iou)
    value = float(np.mean(ious)) if ious else 1.0
    return MetricReport("seg", "miou", value, per_class, split_fingerprint, config_fingerprint)


# ---------------------------------------------------------------------------
# split-level evaluation
# ---------------------------------------------------------------------------


def quadrant_label(lat: float, lon: float) -> int:
    return (0 if lat >= 0 else 2) + (0 if lon >= 0 else 1)


def class_names_of(records: Sequence[SampleRecord]) -> list[str]:
    missing = [r.id for r in records if r.label is None]
    if missing:
        raise DataError(f"records without a class label: {missing[:5]}")
    return sorted({r.label for r in records})


def _accuracy_report(protocol, preds, truths, names, split_fp, config_fp, notes=None) -> MetricReport:
    preds, truths = np.asarray(preds), np.asarray(truths)
    per_class = {}
    for c, name in enumerate(names):
        sel = truths == c
        per_class[name] = float((preds[sel] == c).mean()) if sel.any() else None
    value = float((preds == truths).mean()) if len(truths) else 0.0
    return MetricReport(protocol, "accuracy", value, per_class, split_fp, config_fp, notes or {})


@torch.no_grad()
def _location_index(model, records, labels) -> EmbeddingIndex:
    coords = torch.tensor([[r.coord.lat, r.coord.lon] for r in records], dtype=torch.float32)
    return EmbeddingIndex(model.encode_location(coords).double().numpy(), labels, [r.id for r in records])


PROTOCOLS = ("knn", "zeroshot", "seg", "locknn")


def evaluate_split(
    protocol: str,
    model,
    dataset: Dataset,
    split: SplitSpec,
    vocab: Vocabulary | None = None,
    knn: KnnConfig = KnnConfig(),
    probe: SegProbeConfig = SegProbeConfig(),
    config_fingerprint: str = "",
) -> MetricReport:
    """Fit on the train split where the protocol needs it and report on test."""
    if protocol not in PROTOCOLS:
        raise ConfigurationError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    train = dataset.subset(split.train)
    test = dataset.subset(split.test)
    split_fp = split.fingerprint
    model.eval()

    if protocol == "seg":
        if any(r.mask is None for r in train + test):
            raise DataError("segmentation needs a label map on every record")
        num_classes = 1 + max(int(r.mask.max()) for r in dataset.records)
        seg_probe = train_seg_probe(model, [r.image for r in train], [r.mask for r in train], num_classes, probe)
        pred = predict_seg(model, seg_probe, [r.image for r in test])
        report = compute_miou(pred, np.stack([r.mask for r in test]), num_classes, split_fp, config_fingerprint)
        report.notes = {"deviation": SEG_DEVIATION}
        return report

    if protocol == "locknn":
        names = ["ne", "nw", "se", "sw"]
        train_labels = [quadrant_label(r.coord.lat, r.coord.lon) for r in train]
        test_labels = [quadrant_label(r.coord.lat, r.coord.lon) for r in test]
        index = _location_index(model, train, train_labels)
        queries = _location_index(model, test, test_labels).matrix
        preds = [knn_classify(index, q, knn) for q in queries]
        return _accuracy_report("locknn", preds, test_labels, names, split_fp, config_fingerprint, {"k": knn.k})

    names = class_names_of(dataset.records)
    lookup = {n: i for i, n in enumerate(names)}
    test_labels = [lookup[r.label] for r in test]
    if protocol == "knn":
        index = embed_dataset(model, np.stack([r.image for r in train]), [lookup[r.label] for r in train], [r.id for r in train])
        queries = embed_images(model, np.stack([r.image for r in test]))
        preds = [knn_classify(index, q, knn) for q in queries]
        return _accuracy_report("knn", preds, test_labels, names, split_fp, config_fingerprint, {"k": knn.k})

    if vocab is None:
        raise ConfigurationError("zero-shot evaluation needs the training vocabulary")
    class_emb = embed_prompts(model, vocab, names)
    queries = embed_images(model, np.stack([r.image for r in test]))
    preds = [zero_shot_classify(q, class_emb) for q in queries]
    prompts = {n: expand_prompt(n) for n in names}
    return _accuracy_report("zeroshot", preds, test_labels, names, split_fp, config_fingerprint, {"prompts": prompts})


def checksum_parameters(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
