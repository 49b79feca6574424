import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .backends import load_backend
from .blt0 import write_atomic, write_tensor
from .errors import EmptyCategoryList, ExportError, UnreadableImage
from .templates import PLACEHOLDER, TEMPLATES

log = logging.getLogger(__name__)

MANIFEST = "manifest.tsv"


@dataclass
class ExportJob:
    images: Path
    categories: object  # path to a one-per-line file, or a list of names
    model: str
    out: Path
    templates: tuple = field(default=TEMPLATES)
    visual: str = "hidden"
    allow_download: bool = False


def read_categories(source):
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise ExportError(f"cannot read category list {path}: {e}") from e
    else:
        path, lines = None, list(source)
    names = [l.strip() for l in lines]
    names = [n for n in names if n and not n.startswith("#")]
    if not names:
        raise EmptyCategoryList(path)
    bad = [n for n in names if "\t" in n]
    if bad:
        raise ExportError(f"category names may not contain tabs: {bad!r}")
    if len(set(names)) != len(names):
        raise ExportError("duplicate category names")
    return names


def list_images(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise UnreadableImage(directory, "not a directory")
    files = sorted(p for p in directory.iterdir() if p.is_file() and not p.name.startswith("."))
    stems = [p.stem for p in files]
    if len(set(stems)) != len(stems):
        raise ExportError(f"image ids (file stems) in {directory} are not unique")
    return files


def open_image(path):
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except (OSError, UnidentifiedImageError) as e:
        raise UnreadableImage(path, str(e)) from e


def template_mean(backend, category, templates=TEMPLATES):
    prompts = [t.replace(PLACEHOLDER, category) for t in templates]
    return np.asarray(backend.encode_text(prompts), dtype=np.float64).mean(axis=0)


def export_embeddings(job, backend=None):
    """Writes one BLT0 file per image and per category plus the manifest.

    Returns the manifest path. Images are keyed by file stem.
    """
    categories = read_categories(job.categories)
    images = list_images(job.images)
    backend = backend or load_backend(job.model, visual=job.visual, allow_download=job.allow_download)
    out = Path(job.out)
    lines = ["# kind\tkey\tfile"]
    widths = {}

    def check_width(kind, d):
        if widths.setdefault(kind, d) != d:
            raise ExportError(f"{kind} features changed width from {widths[kind]} to {d}")

    for path in images:
        grid = np.asarray(backend.encode_image(open_image(path)))
        if grid.ndim != 3:
            raise ExportError(f"{path}: expected an (h, w, d) token grid, got {grid.shape}")
        check_width("image", grid.shape[2])
        rel = f"images/{path.stem}.blt0"
        write_tensor(out / rel, grid)
        lines.append(f"image\t{path.stem}\t{rel}")
        log.info("image %s -> %s", path.name, grid.shape)
    for i, name in enumerate(categories):
        row = template_mean(backend, name, job.templates)
        check_width("text", row.shape[0])
        rel = f"text/{i:04d}.blt0"
        write_tensor(out / rel, row[None, :])
        lines.append(f"text\t{name}\t{rel}")
    manifest = out / MANIFEST
    write_atomic(manifest, ("\n".join(lines) + "\n").encode("utf-8"))
    return manifest


def read_manifest(path):
    """Returns ``[(kind, key, file)]``, skipping blanks and comments."""
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        kind, key, file = line.rstrip("\r").split("\t")
        rows.append((kind, key, file))
    return rows
