"""Pooled-feature extraction from an image directory tree.

The tree follows the domain/class/image layout: ``input_root`` contains one
directory per class, each holding image files. Class indices are a pure
function of the sorted class-directory names, images are processed in
sorted-path order, and each image becomes one 2048-dim row: resize shorter
side to 256, center-crop 224, ImageNet channel normalization, then the
pooled output of a 50-layer residual backbone with its classifier removed.
"""

from __future__ import annotations

import datetime
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision import models, transforms

from . import bncf
from .errors import ClassMapError, FormatError, NoImagesError, WeightsError

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".webp", ".gif", ".tif", ".tiff"}
FEATURE_DIM = 2048

PREPROCESSING = "resize shorter side to 256, center-crop 224x224, ImageNet mean/std normalization"

_TRANSFORM = transforms.Compose(
    [
        transforms.Resize(256),
        transforms.CenterCrop(224),
        transforms.ToTensor(),
        transforms.Normalize(mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225]),
    ]
)


@dataclass
class ExtractionJob:
    input_root: Path
    domain: str
    output_path: Path
    class_map: dict[str, int] | None = None  # default: from sorted directory names
    batch_size: int = 32
    device: str = "cpu"
    weights: str = "pretrained"  # pretrained | random | path to a .pth state dict
    seed: int = 0  # random-init backbone seed

    def __post_init__(self):
        self.input_root = Path(self.input_root)
        self.output_path = Path(self.output_path)


@dataclass
class VerifyReport:
    n: int
    dim: int
    k: int
    domain: str
    has_labels: bool
    per_class_counts: list[int] = field(default_factory=list)

    def summary(self) -> str:
        lines = [
            f"rows {self.n}, dim {self.dim}, classes {self.k}, domain {self.domain!r}, "
            f"labels {'yes' if self.has_labels else 'no'}, all values finite"
        ]
        if self.has_labels:
            present = sum(1 for c in self.per_class_counts if c > 0)
            lines.append(f"classes present: {present}/{self.k}; per-class counts {self.per_class_counts}")
        return "\n".join(lines)


def build_backbone(weights: str = "pretrained", seed: int = 0, device: str = "cpu") -> torch.nn.Module:
    """ResNet-50 with the classifier head replaced by identity.

    ``weights``: "pretrained" loads the standard ImageNet weights (needs the
    torchvision download cache or network), "random" builds a seeded random
    initialization (for tests and smoke runs only; features are meaningless),
    anything else is treated as a path to a state-dict file.
    """
    if weights == "pretrained":
        try:
            model = models.resnet50(weights=models.ResNet50_Weights.IMAGENET1K_V1)
            provenance = "torchvision resnet50 IMAGENET1K_V1"
        except Exception as exc:
            raise WeightsError(
                "could not load pretrained weights (no network/cache?); "
                "pass --weights PATH to a local state dict, or --weights random for a smoke run"
            ) from exc
    elif weights == "random":
        torch.manual_seed(seed)
        model = models.resnet50(weights=None)
        provenance = f"random initialization (seed {seed}); features are not meaningful"
    else:
        path = Path(weights)
        if not path.exists():
            raise WeightsError(f"weights file {path} does not exist")
        model = models.resnet50(weights=None)
        state = torch.load(path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        provenance = f"state dict from {path}"
    model.fc = torch.nn.Identity()  # pooled 2048-dim features come out directly
    model.eval()
    model.to(device)
    model.provenance = provenance
    return model


def discover_classes(input_root: Path) -> dict[str, int]:
    """Class name -> index from the lexicographically sorted directory names."""
    dirs = sorted(p.name for p in Path(input_root).iterdir() if p.is_dir())
    if not dirs:
        raise NoImagesError(f"{input_root} contains no class directories")
    return {name: i for i, name in enumerate(dirs)}


def list_images(input_root: Path, class_map: dict[str, int]) -> list[tuple[Path, int]]:
    """(path, class index) pairs in sorted-path order; unknown class dirs are errors."""
    pairs = []
    for class_dir in sorted(Path(input_root).iterdir(), key=lambda p: p.name):
        if not class_dir.is_dir():
            continue
        if class_dir.name not in class_map:
            raise ClassMapError(
                f"class directory {class_dir.name!r} is not in the class map "
                f"({len(class_map)} known classes)"
            )
        label = class_map[class_dir.name]
        for path in sorted(class_dir.iterdir(), key=lambda p: str(p)):
            if path.suffix.lower() in IMAGE_EXTENSIONS and path.is_file():
                pairs.append((path, label))
    return pairs


def extract(job: ExtractionJob, backbone: torch.nn.Module | None = None) -> VerifyReport:
    """Extract the whole tree into ``job.output_path`` plus a .meta.json sidecar.

    Unreadable images are skipped with a warning and listed in the sidecar;
    an empty result is an error. Row order equals sorted path order.
    """
    class_map = job.class_map or discover_classes(job.input_root)
    k = len(class_map)
    pairs = list_images(job.input_root, class_map)
    if backbone is None:
        backbone = build_backbone(job.weights, job.seed, job.device)
    rows: list[np.ndarray] = []
    labels: list[int] = []
    skipped: list[str] = []
    batch_tensors: list[torch.Tensor] = []
    batch_labels: list[int] = []

    def flush():
        if not batch_tensors:
            return
        with torch.no_grad():
            out = backbone(torch.stack(batch_tensors).to(job.device))
        rows.append(out.cpu().double().numpy())
        labels.extend(batch_labels)
        batch_tensors.clear()
        batch_labels.clear()

    for path, label in pairs:
        try:
            with Image.open(path) as img:
                tensor = _TRANSFORM(img.convert("RGB"))
        except Exception as exc:
            print(f"warning: skipping unreadable image {path}: {exc}", file=sys.stderr)
            skipped.append(str(path))
            continue
        batch_tensors.append(tensor)
        batch_labels.append(label)
        if len(batch_tensors) >= job.batch_size:
            flush()
    flush()
    if not rows:
        raise NoImagesError(f"no readable images under {job.input_root}")
    features = np.vstack(rows)
    if features.shape[1] != FEATURE_DIM:
        raise FormatError(f"backbone produced {features.shape[1]}-dim features, expected {FEATURE_DIM}")
    label_arr = np.asarray(labels, dtype=np.int64)
    bncf.write(job.output_path, features, label_arr, k, job.domain)
    sidecar = {
        "backbone": "resnet50",
        "weights": getattr(backbone, "provenance", str(job.weights)),
        "preprocessing": PREPROCESSING,
        "date": datetime.date.today().isoformat(),
        "domain": job.domain,
        "class_map": class_map,
        "images": int(label_arr.size),
        "skipped": skipped,
    }
    Path(str(job.output_path) + ".meta.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return verify(job.output_path)


def verify(path) -> VerifyReport:
    """Re-read a BNCF file and check header sanity, finiteness, and labels."""
    features, labels, k, domain = bncf.read(path)
    finite_rows = np.isfinite(features).all(axis=1)
    if not finite_rows.all():
        raise FormatError(f"{path}: non-finite feature values at row {int(np.argmin(finite_rows))}")
    counts = []
    if labels is not None:
        if labels.min() < 0 or labels.max() >= k:
            raise FormatError(f"{path}: label {int(labels.max())} out of range for k={k}")
        counts = np.bincount(labels, minlength=k).tolist()
    return VerifyReport(
        n=features.shape[0],
        dim=features.shape[1],
        k=k,
        domain=domain,
        has_labels=labels is not None,
        per_class_counts=counts,
    )
