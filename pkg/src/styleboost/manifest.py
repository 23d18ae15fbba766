"""Dataset manifests: one JSON record per line, paths relative to the file.

Two record kinds share the format. Plain dataset entries carry
(image_path, split, seed, provenance); augmentation entries additionally
carry t0 and guide_index (and, in augmentation manifests, index and prompt).
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import IntegrityError


@dataclass
class ManifestEntry:
    image_path: str
    split: str            # train | test
    seed: int
    provenance: str       # source | style | self_aug | cross_aug
    t0: float | None = None
    guide_index: int | None = None

    def __post_init__(self):
        if self.provenance in ("self_aug", "cross_aug"):
            if self.t0 is None or self.guide_index is None:
                raise IntegrityError(
                    f"{self.provenance} entry must carry t0 and guide_index")
        else:
            if self.t0 is not None or self.guide_index is not None:
                raise IntegrityError(
                    f"{self.provenance} entry must not carry t0/guide_index")


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def paths(self):
        return [str(Path(self.root) / e.image_path) for e in self.entries]

    def seeds(self):
        return [e.seed for e in self.entries]

    def subset(self, provenance=None, split=None):
        kept = [e for e in self.entries
                if (provenance is None or e.provenance == provenance)
                and (split is None or e.split == split)]
        return DatasetManifest(self.root, kept)

    def check_unique_paths(self):
        paths = self.paths()
        if len(set(paths)) != len(paths):
            dupes = sorted({p for p in paths if paths.count(p) > 1})
            raise IntegrityError(f"duplicate image paths: {dupes[:5]}")

    def save(self, path):
        path = Path(path)
        with open(path, "w") as fh:
            for e in self.entries:
                rec = {k: v for k, v in asdict(e).items() if v is not None}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        entries = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                entries.append(ManifestEntry(**json.loads(line)))
        return cls(root=path.parent, entries=entries)


def merge_manifests(root, manifests):
    """Disjoint union relative to a common root; duplicate paths are an error."""
    root = Path(root)
    entries = []
    for m in manifests:
        for e in m.entries:
            abs_path = (Path(m.root) / e.image_path).resolve()
            rel = abs_path.relative_to(root.resolve())
            entries.append(ManifestEntry(str(rel), e.split, e.seed,
                                         e.provenance, e.t0, e.guide_index))
    merged = DatasetManifest(root, entries)
    merged.check_unique_paths()
    return merged
