"""Dataset manifest: object images, object texts and their pairing."""

import json
import logging
from collections import Counter
from pathlib import Path
from typing import List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ..errors import ManifestError

logger = logging.getLogger(__name__)


class ImageEntry(BaseModel):
    id: str
    path: str
    category: str
    label: Optional[str] = Field(default=None, description="Object class name, defaults to the id")

    @property
    def name(self) -> str:
        return self.label or self.id


class TextEntry(BaseModel):
    id: str
    label: str
    category: str


class PairEntry(BaseModel):
    image_id: str
    text_id: str


class DatasetManifest(BaseModel):
    """Images and texts; pairs default to the full cross product."""

    images: List[ImageEntry] = Field(default_factory=list)
    texts: List[TextEntry] = Field(default_factory=list)
    pairs_override: Optional[List[PairEntry]] = Field(default=None, alias="pairs")
    root: Optional[Path] = Field(default=None, exclude=True)

    model_config = ConfigDict(populate_by_name=True)

    def image_path(self, entry: ImageEntry) -> Path:
        path = Path(entry.path)
        if path.is_absolute() or self.root is None:
            return path
        return self.root / path

    def check(self, verify_files: bool = True) -> None:
        """Raise ManifestError naming the first problem found."""
        if not self.images or not self.texts:
            raise ManifestError("empty manifest")
        for kind, ids in (("image", [e.id for e in self.images]), ("text", [e.id for e in self.texts])):
            duplicates = sorted(i for i, n in Counter(ids).items() if n > 1)
            if duplicates:
                raise ManifestError(f"duplicate {kind} id: {duplicates[0]}")
        if self.pairs_override is not None:
            image_ids = {e.id for e in self.images}
            text_ids = {e.id for e in self.texts}
            for pair in self.pairs_override:
                if pair.image_id not in image_ids:
                    raise ManifestError(f"pair references unknown image id: {pair.image_id}")
                if pair.text_id not in text_ids:
                    raise ManifestError(f"pair references unknown text id: {pair.text_id}")
        if verify_files:
            for entry in self.images:
                path = self.image_path(entry)
                if not path.is_file():
                    raise ManifestError(f"missing image file for {entry.id}: {path}")

    def pairs(self) -> List[Tuple[ImageEntry, TextEntry]]:
        if self.pairs_override is not None:
            images = {e.id: e for e in self.images}
            texts = {e.id: e for e in self.texts}
            return [(images[p.image_id], texts[p.text_id]) for p in self.pairs_override]
        return [(image, text) for image in self.images for text in self.texts]

    def categories(self) -> Tuple[List[str], List[str]]:
        """Image and text categories in first-seen order."""
        image_cats = list(dict.fromkeys(e.category for e in self.images))
        text_cats = list(dict.fromkeys(e.category for e in self.texts))
        return image_cats, text_cats


def load_manifest(path: Union[str, Path], verify_files: bool = True) -> DatasetManifest:
    """Load and validate a JSON manifest; relative image paths resolve against its directory."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ManifestError(f"manifest not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed manifest {path}: {e}") from e

    if not isinstance(raw, dict):
        raise ManifestError(f"malformed manifest {path}: expected an object with images and texts")
    try:
        manifest = DatasetManifest.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ManifestError(f"malformed entry at {location}: {first['msg']}") from e

    manifest.root = path.parent
    manifest.check(verify_files=verify_files)
    logger.info(
        f"Loaded manifest {path}: {len(manifest.images)} images, {len(manifest.texts)} texts, "
        f"{len(manifest.pairs())} pairs"
    )
    return manifest
