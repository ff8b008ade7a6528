"""Dataset ingestion (synthetic, CIFAR-10 binary, image folders) and lossless image I/O."""
from __future__ import annotations

import logging
import tarfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from PIL import Image

from .errors import InputError, MissingArtifactError
from .utils import create_retry_session, data_root, ensure_directory
from .vit import ImageSample

LOGGER = logging.getLogger("megatron.datasets")

DATASET_KINDS = ("synthetic", "cifar10", "image_folder")
CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
CIFAR10_DIRNAME = "cifar-10-batches-bin"
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{index}.bin" for index in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR10_NAMES = (
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
)
DEFAULT_DATA_DIR = Path("data")
LABELS_FILE = "labels.csv"
MANIFEST_FILE = "manifest.jsonl"
IMAGES_DIR = "images"
# channel count -> Pillow mode
PNG_MODES = {1: "L", 3: "RGB"}


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    path: str = ""
    classes: Tuple[int, ...] = (0, 1)
    train_size: int = 2000
    test_size: int = 400
    image_size: int = 32
    seed: int = 0
    noise: float = 0.1
    download: bool = False
    channels: int = 3

    def __post_init__(self) -> None:
        if self.channels not in PNG_MODES:
            raise InputError(f"dataset.channels deve ser um de {sorted(PNG_MODES)}")
        if self.kind == "cifar10" and self.channels != 3:
            raise InputError("CIFAR-10 exige channels=3")
        if self.kind not in DATASET_KINDS:
            raise InputError(f"dataset.kind deve ser um de {DATASET_KINDS}")
        if len(self.classes) < 2:
            raise InputError("São necessárias pelo menos duas classes")
        if self.train_size < 1 or self.test_size < 1:
            raise InputError("train_size e test_size devem ser >= 1")

    def resolved_path(self) -> Path:
        root = data_root()
        if not self.path:
            return root if root is not None else DEFAULT_DATA_DIR
        raw = Path(self.path).expanduser()
        if root is not None and not raw.is_absolute():
            return root / raw
        return raw


@dataclass
class Split:
    train: List[ImageSample]
    test: List[ImageSample]
    class_names: List[str] = field(default_factory=list)

    def by_id(self) -> Dict[str, ImageSample]:
        return {sample.sample_id: sample for sample in [*self.train, *self.test]}


# Image I/O ---------------------------------------------------------------------

def quantize(pixels: torch.Tensor) -> torch.Tensor:
    """Snap to the 8-bit grid so PNG round-trips are exact."""

    return torch.round(pixels * 255.0) / 255.0


def to_png_image(pixels: torch.Tensor) -> Image.Image:
    array = np.rint(pixels.detach().cpu().double().clamp(0, 1).numpy() * 255.0).astype(np.uint8)
    if array.shape[0] == 1:
        return Image.fromarray(array[0])
    return Image.fromarray(np.ascontiguousarray(np.transpose(array, (1, 2, 0))))


def save_png(pixels: torch.Tensor, path: Path) -> None:
    ensure_directory(path.parent)
    to_png_image(pixels).save(path, format="PNG")


def load_png(path: Path, image_size: Optional[int] = None, channels: Optional[int] = None) -> torch.Tensor:
    """(channels, H, W) tensor in [0, 1]; ``channels`` defaults to 1 for greyscale files, else 3."""

    with Image.open(path) as handle:
        if channels is None:
            channels = 1 if handle.mode in ("L", "I;16", "1") else 3
        if channels not in PNG_MODES:
            raise InputError(f"Número de canais {channels} não suportado")
        image = handle.convert(PNG_MODES[channels])
        if image_size is not None and image.size != (image_size, image_size):
            image = image.resize((image_size, image_size), Image.BILINEAR)
        array = np.asarray(image, dtype=np.uint8).reshape(image.size[1], image.size[0], channels)
    return torch.from_numpy(np.transpose(array, (2, 0, 1)).astype(np.float32) / 255.0)


# Loaders -----------------------------------------------------------------------

def make_blobs(
    n_samples: int,
    *,
    n_classes: int = 2,
    image_size: int = 32,
    channels: int = 3,
    seed: int = 0,
    noise: float = 0.1,
    prefix: str = "syn",
) -> List[ImageSample]:
    """Seeded synthetic images: a class-coloured square on a noisy grey background.

    Classes differ in blob colour and quadrant, so any reasonable classifier
    separates them.
    """

    rng = np.random.default_rng(seed)
    palette = rng.uniform(0.15, 0.85, size=(n_classes, channels))
    side = max(2, image_size // 3)
    samples: List[ImageSample] = []
    for index in range(n_samples):
        label = index % n_classes
        image = np.full((channels, image_size, image_size), 0.5) + rng.normal(0.0, noise, (channels, image_size, image_size))
        quadrant = label % 4
        top = (image_size // 2 - side) // 2 + (image_size // 2) * (quadrant // 2)
        left = (image_size // 2 - side) // 2 + (image_size // 2) * (quadrant % 2)
        jitter = rng.integers(-1, 2, size=2)
        top = int(np.clip(top + jitter[0], 0, image_size - side))
        left = int(np.clip(left + jitter[1], 0, image_size - side))
        image[:, top : top + side, left : left + side] = palette[label][:, None, None]
        pixels = quantize(torch.from_numpy(np.clip(image, 0.0, 1.0)).float())
        samples.append(ImageSample(pixels=pixels, label=label, sample_id=f"{prefix}-{index:05d}"))
    return samples


def _read_cifar_file(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise MissingArtifactError(f"Arquivo CIFAR-10 {path} não encontrado", artifact=str(path))
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, 3073)
    return raw[:, 1:].reshape(-1, 3, 32, 32), raw[:, 0].astype(np.int64)


def _select(
    images: np.ndarray,
    labels: np.ndarray,
    classes: Sequence[int],
    limit: int,
    rng: np.random.Generator,
    prefix: str,
) -> List[ImageSample]:
    remap = {original: new for new, original in enumerate(classes)}
    keep = np.flatnonzero(np.isin(labels, list(classes)))
    if len(keep) < limit:
        raise InputError(f"Apenas {len(keep)} imagens disponíveis, {limit} solicitadas")
    chosen = np.sort(rng.choice(keep, size=limit, replace=False))
    return [
        ImageSample(
            pixels=torch.from_numpy(images[index].astype(np.float32) / 255.0),
            label=remap[int(labels[index])],
            sample_id=f"{prefix}-{position:05d}",
        )
        for position, index in enumerate(chosen)
    ]


def load_cifar10(spec: DatasetSpec) -> Split:
    base = spec.resolved_path()
    if base.name != CIFAR10_DIRNAME and (base / CIFAR10_DIRNAME).exists():
        base = base / CIFAR10_DIRNAME
    if not (base / CIFAR10_TEST_FILE).exists():
        if not spec.download:
            raise MissingArtifactError(
                f"CIFAR-10 não encontrado em {base}. Use 'fetch-data' ou defina {CIFAR10_DIRNAME} em MEGATRON_DATA_DIR.",
                artifact=str(base),
            )
        base = fetch_cifar10(base.parent if base.name == CIFAR10_DIRNAME else base)
    if spec.image_size != 32:
        raise InputError("CIFAR-10 exige image_size=32")
    parts = [_read_cifar_file(base / name) for name in CIFAR10_TRAIN_FILES]
    train_images = np.concatenate([images for images, _ in parts])
    train_labels = np.concatenate([labels for _, labels in parts])
    test_images, test_labels = _read_cifar_file(base / CIFAR10_TEST_FILE)
    rng = np.random.default_rng(spec.seed)
    train = _select(train_images, train_labels, spec.classes, spec.train_size, rng, "train")
    test = _select(test_images, test_labels, spec.classes, spec.test_size, rng, "test")
    names = [CIFAR10_NAMES[index] for index in spec.classes]
    LOGGER.info("CIFAR-10 carregado de %s: %s treino / %s teste (%s)", base, len(train), len(test), names)
    return Split(train=train, test=test, class_names=names)


def load_image_folder(spec: DatasetSpec) -> Split:
    """Directory of images plus ``labels.csv`` (columns: file, label[, split])."""

    base = spec.resolved_path()
    labels_path = base / LABELS_FILE
    if not labels_path.exists():
        raise MissingArtifactError(f"Manifesto {labels_path} não encontrado", artifact=str(labels_path))
    frame = pd.read_csv(labels_path)
    missing = {"file", "label"} - set(frame.columns)
    if missing:
        raise InputError(f"{labels_path} sem colunas {sorted(missing)}")
    frame = frame[frame["label"].isin(list(spec.classes))].reset_index(drop=True)
    remap = {original: new for new, original in enumerate(spec.classes)}
    rng = np.random.default_rng(spec.seed)
    if "split" in frame.columns:
        train_rows = frame[frame["split"] == "train"]
        test_rows = frame[frame["split"] == "test"]
    else:
        order = rng.permutation(len(frame))
        test_rows = frame.iloc[np.sort(order[: spec.test_size])]
        train_rows = frame.iloc[np.sort(order[spec.test_size :])]
    train_rows = train_rows.iloc[: spec.train_size]
    test_rows = test_rows.iloc[: spec.test_size]

    def build(rows: pd.DataFrame, prefix: str) -> List[ImageSample]:
        return [
            ImageSample(
                pixels=load_png(base / str(row.file), spec.image_size, spec.channels),
                label=remap[int(row.label)],
                sample_id=f"{prefix}-{position:05d}",
            )
            for position, row in enumerate(rows.itertuples(index=False))
        ]

    split = Split(train=build(train_rows, "train"), test=build(test_rows, "test"), class_names=[str(c) for c in spec.classes])
    LOGGER.info("Pasta de imagens %s: %s treino / %s teste", base, len(split.train), len(split.test))
    return split


def load_dataset(spec: DatasetSpec) -> Split:
    if spec.kind == "synthetic":
        n_classes = len(spec.classes)
        train = make_blobs(spec.train_size, n_classes=n_classes, image_size=spec.image_size, channels=spec.channels, seed=spec.seed, noise=spec.noise, prefix="train")
        test = make_blobs(spec.test_size, n_classes=n_classes, image_size=spec.image_size, channels=spec.channels, seed=spec.seed + 1, noise=spec.noise, prefix="test")
        return Split(train=train, test=test, class_names=[f"classe-{c}" for c in spec.classes])
    if spec.kind == "cifar10":
        return load_cifar10(spec)
    return load_image_folder(spec)


def _checked_members(tar: tarfile.TarFile, target_dir: Path) -> List[tarfile.TarInfo]:
    """Archive members, refusing links, devices and paths that leave ``target_dir``."""

    root = target_dir.resolve()
    members = tar.getmembers()
    for member in members:
        destination = (root / member.name).resolve()
        if destination != root and root not in destination.parents:
            raise InputError(f"Arquivo {member.name} do pacote sai de {target_dir}")
        if not (member.isfile() or member.isdir()):
            raise InputError(f"Membro {member.name} do pacote não é arquivo nem diretório")
    return members


def fetch_cifar10(target_dir: Path, url: str = CIFAR10_URL, timeout: int = 60) -> Path:
    """Download and unpack the CIFAR-10 binary archive into ``target_dir``."""

    ensure_directory(target_dir)
    extracted = target_dir / CIFAR10_DIRNAME
    if (extracted / CIFAR10_TEST_FILE).exists():
        LOGGER.info("CIFAR-10 já presente em %s", extracted)
        return extracted
    archive = target_dir / "cifar-10-binary.tar.gz"
    session = create_retry_session()
    LOGGER.info("Baixando CIFAR-10 de %s", url)
    with session.get(url, stream=True, timeout=timeout) as response:
        if response.status_code >= 400:
            raise MissingArtifactError(f"Erro {response.status_code} ao baixar {url}", artifact=url)
        with archive.open("wb") as handle:
            for chunk in response.iter_content(chunk_size=1024 * 64):
                if chunk:
                    handle.write(chunk)
    with tarfile.open(archive, "r:gz") as tar:
        members = _checked_members(tar, target_dir)
        if hasattr(tarfile, "data_filter"):
            tar.extractall(target_dir, members=members, filter="data")
        else:  # pragma: no cover - Python sem filtros de extração
            tar.extractall(target_dir, members=members)
    LOGGER.info("CIFAR-10 extraído em %s", extracted)
    return extracted


# Dataset directories -----------------------------------------------------------

def write_dataset_dir(
    samples: Sequence[ImageSample],
    directory: Path,
    extra: Optional[Dict[str, Dict[str, Any]]] = None,
) -> Path:
    """One PNG per sample plus a line-delimited JSON manifest.

    ``extra`` maps sample ids to additional manifest columns.
    """

    images_dir = directory / IMAGES_DIR
    ensure_directory(images_dir)
    extra = extra or {}
    rows: List[Dict[str, Any]] = []
    for sample in samples:
        filename = f"{sample.sample_id}.png"
        save_png(sample.pixels, images_dir / filename)
        row: Dict[str, Any] = {
            "sample_id": sample.sample_id,
            "label": int(sample.label),
            "file": f"{IMAGES_DIR}/{filename}",
            "is_poisoned": sample.sample_id in extra,
        }
        row.update(extra.get(sample.sample_id, {}))
        rows.append(row)
    frame = pd.DataFrame(rows)
    manifest = directory / MANIFEST_FILE
    frame.to_json(manifest, orient="records", lines=True, double_precision=15, force_ascii=False)
    LOGGER.info("Dataset com %s amostras salvo em %s", len(rows), directory)
    return manifest


def read_dataset_dir(directory: Path) -> Tuple[List[ImageSample], pd.DataFrame]:
    manifest = directory / MANIFEST_FILE
    if not manifest.exists():
        raise MissingArtifactError(f"Manifesto {manifest} não encontrado", artifact=str(manifest))
    frame = pd.read_json(manifest, orient="records", lines=True, dtype=False)
    samples = [
        ImageSample(pixels=load_png(directory / str(row.file)), label=int(row.label), sample_id=str(row.sample_id))
        for row in frame.itertuples(index=False)
    ]
    return samples, frame


__all__ = [
    "CIFAR10_URL",
    "DATASET_KINDS",
    "DatasetSpec",
    "MANIFEST_FILE",
    "PNG_MODES",
    "Split",
    "fetch_cifar10",
    "load_cifar10",
    "load_dataset",
    "load_image_folder",
    "load_png",
    "make_blobs",
    "quantize",
    "read_dataset_dir",
    "save_png",
    "to_png_image",
    "write_dataset_dir",
]
