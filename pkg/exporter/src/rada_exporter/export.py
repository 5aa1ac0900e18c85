"""Export jobs: encode image folders and class prompts into RDA1 files.

A dataset directory holds one subdirectory per class; the class list (and
its order, which fixes the label indices) defaults to the sorted
subdirectory names. Embeddings are encoded in float32, upcast to float64,
and written normalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import format as rda
from .format import ExportError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif")
DEFAULT_TEMPLATE = "a photo of a {}"


@dataclass
class ExportJob:
    dataset: Path
    output: Path
    class_names: list[str] = field(default_factory=list)
    template: str = DEFAULT_TEMPLATE
    split: str = "base-test"
    embeddings_name: str = "embeddings.rda"
    classes_name: str = "classes.rda"
    view_count: int = 0
    view_seed: int = 0

    def __post_init__(self):
        self.dataset = Path(self.dataset)
        self.output = Path(self.output)


def discover_classes(dataset: Path) -> list[str]:
    if not dataset.is_dir():
        raise ExportError(f"dataset directory {dataset} does not exist")
    names = sorted(p.name for p in dataset.iterdir() if p.is_dir())
    if len(names) < 2:
        raise ExportError(f"need at least two class directories under {dataset}")
    return names


def _class_images(dataset: Path, name: str) -> list[Path]:
    folder = dataset / name
    if not folder.is_dir():
        raise ExportError(f"missing class directory {folder}")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ExportError(f"class directory {folder} holds no images")
    return files


def _augment(image: Image.Image, rng: np.random.Generator) -> Image.Image:
    """Image-space view: random resized crop plus optional horizontal flip."""
    w, h = image.size
    scale = 0.6 + 0.4 * rng.random()
    cw, ch = max(1, int(w * scale)), max(1, int(h * scale))
    x0 = int(rng.integers(0, w - cw + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    view = image.crop((x0, y0, x0 + cw, y0 + ch)).resize((w, h), Image.BILINEAR)
    if rng.random() < 0.5:
        view = view.transpose(Image.FLIP_LEFT_RIGHT)
    return view


def export(job: ExportJob, encoder) -> dict[str, Path]:
    """Encode one dataset split plus its class matrix; returns written paths."""
    names = job.class_names or discover_classes(job.dataset)
    if len(set(names)) != len(names):
        raise ExportError("duplicate class names")

    features: list[np.ndarray] = []
    labels: list[int] = []
    image_paths: list[Path] = []
    for index, name in enumerate(names):
        for path in _class_images(job.dataset, name):
            with Image.open(path) as img:
                features.append(np.asarray(encoder.encode_image(img), dtype=np.float64))
            labels.append(index)
            image_paths.append(path)
    matrix = np.stack(features)
    matrix /= np.linalg.norm(matrix, axis=1, keepdims=True)  # exact unit rows after upcast

    class_rows = np.stack(
        [np.asarray(encoder.encode_text(job.template.format(name)), dtype=np.float64)
         for name in names]
    )
    class_rows /= np.linalg.norm(class_rows, axis=1, keepdims=True)

    job.output.mkdir(parents=True, exist_ok=True)
    written = {}
    emb_path = job.output / job.embeddings_name
    rda.write(rda.encode_embeddings(matrix, np.asarray(labels), job.split, True), emb_path)
    written["embeddings"] = emb_path
    cls_path = job.output / job.classes_name
    rda.write(rda.encode_classes(class_rows, list(names), False, True), cls_path)
    written["classes"] = cls_path

    if job.view_count:
        rng = np.random.default_rng(job.view_seed)
        views_dir = job.output / "views"
        views_dir.mkdir(exist_ok=True)
        for i, path in enumerate(image_paths):
            with Image.open(path) as img:
                rows = [np.asarray(encoder.encode_image(img), dtype=np.float64)]
                for _ in range(job.view_count):
                    rows.append(
                        np.asarray(encoder.encode_image(_augment(img, rng)), dtype=np.float64)
                    )
            batch = np.stack(rows)
            batch /= np.linalg.norm(batch, axis=1, keepdims=True)
            view_path = views_dir / f"views_{i:05d}.rda"
            rda.write(
                rda.encode_embeddings(
                    batch, np.full(len(rows), labels[i]), "ttt-stream", True
                ),
                view_path,
            )
        written["views"] = views_dir
    return written


def zero_shot_accuracy(features: np.ndarray, labels: np.ndarray, class_rows: np.ndarray) -> float:
    """In-framework reference evaluation for round-trip fidelity checks."""
    logits = features @ class_rows.T
    return float((logits.argmax(axis=1) == labels).mean() * 100.0)


def export_bundle(
    train_dir: Path,
    test_dir: Path,
    new_dir: Path,
    output: Path,
    encoder,
    template: str = DEFAULT_TEMPLATE,
    new_template: str | None = None,
) -> dict[str, Path]:
    """Full base-to-new layout consumable by the downstream CLI in one call.

    Base and new class-name sets must be disjoint (directory names are the
    labels). Class matrices are encoded from the prompt template.
    """
    base_names = discover_classes(Path(train_dir))
    if discover_classes(Path(test_dir)) != base_names:
        raise ExportError("train and test directories disagree on class names")
    new_names = discover_classes(Path(new_dir))
    overlap = set(base_names) & set(new_names)
    if overlap:
        raise ExportError(f"base and new class names overlap: {sorted(overlap)}")

    output = Path(output)
    written = {}
    jobs = (
        ("base_train", train_dir, base_names, "base-train", "base_train.rda", "base_classes.rda"),
        ("base_test", test_dir, base_names, "base-test", "base_test.rda", "base_classes.rda"),
        ("new_test", new_dir, new_names, "new-test", "new_test.rda", "new_classes.rda"),
    )
    for key, dataset, names, split, emb_name, cls_name in jobs:
        job = ExportJob(
            dataset=Path(dataset),
            output=output,
            class_names=names,
            template=new_template if key == "new_test" and new_template else template,
            split=split,
            embeddings_name=emb_name,
            classes_name=cls_name,
        )
        written[key] = export(job, encoder)["embeddings"]
    return written
