"""Synthetic dataset generation and the three-stage annotation pipeline.

The pipeline mirrors a model-in-the-loop labeling flow: an object captioner
describes a tight crop of the masked object, a validator gates the caption,
a context captioner localizes the object in the full image, and a merger
fuses both texts into one fine-grained expression. Annotator clients are
pluggable; deterministic local mocks serve tests and an HTTP adapter serves
real endpoints.
"""

from __future__ import annotations

import base64
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from .regionops import BBox, derive_crop, mask_to_bbox
from .training import TrainingSample

# Pixel normalization between raw [0,1] RGB and encoder input space.
NORM_MEAN = 0.5
NORM_STD = 0.5

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.86, 0.08, 0.24),
    "green": (0.13, 0.55, 0.13),
    "blue": (0.12, 0.29, 0.85),
    "yellow": (0.93, 0.84, 0.08),
    "purple": (0.58, 0.00, 0.83),
    "orange": (1.00, 0.55, 0.00),
    "cyan": (0.00, 0.81, 0.82),
    "magenta": (0.92, 0.08, 0.92),
}
SIZES = {"small": 0.13, "medium": 0.19, "large": 0.25}
ROW_WORDS = ("upper", "middle", "lower")
COL_WORDS = ("left", "center", "right")
BACKGROUNDS = {
    "charcoal": (0.17, 0.17, 0.18),
    "slate": (0.40, 0.45, 0.50),
    "ivory": (0.93, 0.92, 0.88),
    "olive": (0.35, 0.37, 0.14),
    "navy": (0.05, 0.07, 0.30),
    "sand": (0.80, 0.72, 0.58),
}

VALIDATOR_VERDICTS = ("consistent", "inconsistent", "invalid")
DATASET_META_VERSION = 1


def normalize_pixels(raw: torch.Tensor) -> torch.Tensor:
    return (raw - NORM_MEAN) / NORM_STD


def denormalize_pixels(pixels: torch.Tensor) -> torch.Tensor:
    return (pixels * NORM_STD + NORM_MEAN).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# Run-length encoding: runs of positive pixels as (start, length) pairs over
# row-major order, preceded by the mask dimensions.
# ---------------------------------------------------------------------------


def encode_rle(mask) -> dict:
    arr = np.asarray(mask.detach().cpu() if isinstance(mask, torch.Tensor) else mask)
    if arr.ndim != 2:
        raise ValueError("mask must be 2-D (H, W)")
    h, w = arr.shape
    flat = (arr.reshape(-1) > 0).astype(np.int8)
    padded = np.concatenate([[0], flat, [0]])
    changes = np.flatnonzero(np.diff(padded))
    starts, ends = changes[::2], changes[1::2]
    runs = [[int(s), int(e - s)] for s, e in zip(starts, ends)]
    return {"height": h, "width": w, "runs": runs}


def decode_rle(rle: dict) -> np.ndarray:
    h, w = int(rle["height"]), int(rle["width"])
    if h < 1 or w < 1:
        raise ValueError(f"invalid RLE dimensions {h}x{w}")
    flat = np.zeros(h * w, dtype=np.float32)
    for start, length in rle["runs"]:
        if start < 0 or length < 1 or start + length > h * w:
            raise ValueError(f"RLE run ({start}, {length}) out of range for {h}x{w}")
        flat[start : start + length] = 1.0
    return flat.reshape(h, w)


# ---------------------------------------------------------------------------
# Synthetic scenes: 1-3 solid shapes on a plain background, with templated
# captions whose wording round-trips the drawn attributes.
# ---------------------------------------------------------------------------


def _paint(canvas: np.ndarray, region: np.ndarray, color: tuple) -> None:
    for c in range(3):
        canvas[c][region] = color[c]


def _shape_region(shape: str, cy: float, cx: float, radius: float, res: int) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    if shape == "square":
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= radius
    if shape == "triangle":
        inside_rows = (yy >= cy - radius) & (yy <= cy + radius)
        return inside_rows & (np.abs(xx - cx) <= (yy - cy + radius) / 2.0)
    raise ValueError(f"unknown shape {shape!r}")


def _place(rng: np.random.Generator, row_idx: int, col_idx: int, size_word: str, res: int):
    cell = res / 3.0
    cy = (row_idx + 0.5) * cell + rng.uniform(-cell / 4, cell / 4)
    cx = (col_idx + 0.5) * cell + rng.uniform(-cell / 4, cell / 4)
    radius = max(2.0, SIZES[size_word] * res * rng.uniform(0.85, 1.15))
    return cy, cx, radius


def long_caption_text(size: str, color: str, shape: str, row: str, col: str, bg: str) -> str:
    return f"a {size} {color} {shape} in the {row} {col} on {bg} background"


def parse_long_caption(caption: str) -> dict:
    """Recover the attribute words from a templated long caption."""
    tokens = caption.split()
    found = {}
    for key, vocab in (
        ("size", SIZES),
        ("color", COLORS),
        ("shape", SHAPES),
        ("row", ROW_WORDS),
        ("col", COL_WORDS),
        ("background", BACKGROUNDS),
    ):
        matches = [t for t in tokens if t in vocab]
        if len(matches) != 1:
            raise ValueError(f"caption does not contain exactly one {key} word: {caption!r}")
        found[key] = matches[0]
    return found


def generate_synthetic_dataset(
    n: int,
    seed: int,
    resolution: int = 32,
    enlarge: float = 1.5,
) -> list[TrainingSample]:
    """Deterministic scenes of 1-3 colored shapes; the mask selects one shape.

    Attribute combinations for the masked shape are drawn without replacement
    in permutation blocks, so any run of up to 648 consecutive samples carries
    distinct long captions. Global captions list every shape as a fused
    color-shape compound ("a red-circle") in sorted order, which keeps
    distinct captions distinguishable under order-free token pooling.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    combos = [
        (shape, color, size, ri, ci)
        for shape in SHAPES
        for color in COLORS
        for size in SIZES
        for ri in range(3)
        for ci in range(3)
    ]
    order: list[int] = []
    while len(order) < n:
        order.extend(rng.permutation(len(combos)).tolist())

    samples: list[TrainingSample] = []
    seen: set[tuple[str, bytes]] = set()
    for i in range(n):
        shape, color, size, row_idx, col_idx = combos[order[i]]
        bg = list(BACKGROUNDS)[int(rng.integers(len(BACKGROUNDS)))]
        for _attempt in range(8):
            canvas = np.empty((3, resolution, resolution), dtype=np.float32)
            for c in range(3):
                canvas[c].fill(BACKGROUNDS[bg][c])

            n_extras = int(rng.integers(0, 3))
            cells = [(r, c) for r in range(3) for c in range(3) if (r, c) != (row_idx, col_idx)]
            extra_cells = [cells[j] for j in rng.choice(len(cells), size=n_extras, replace=False)]
            extras = []
            for er, ec in extra_cells:
                e_shape = SHAPES[int(rng.integers(len(SHAPES)))]
                e_color = list(COLORS)[int(rng.integers(len(COLORS)))]
                e_size = list(SIZES)[int(rng.integers(len(SIZES)))]
                cy, cx, rad = _place(rng, er, ec, e_size, resolution)
                _paint(canvas, _shape_region(e_shape, cy, cx, rad, resolution), COLORS[e_color])
                extras.append((e_color, e_shape))

            # Masked shape drawn last so the mask is exactly its visible pixels.
            cy, cx, rad = _place(rng, row_idx, col_idx, size, resolution)
            region = _shape_region(shape, cy, cx, rad, resolution)
            _paint(canvas, region, COLORS[color])
            mask = region.astype(np.float32)

            long_caption = long_caption_text(size, color, shape, ROW_WORDS[row_idx], COL_WORDS[col_idx], bg)
            key = (long_caption, mask.tobytes())
            if key not in seen:
                break
        seen.add(key)

        compounds = sorted([f"a {color}-{shape}"] + [f"a {c}-{s}" for c, s in extras])
        if len(compounds) == 1:
            listing = compounds[0]
        else:
            listing = ", ".join(compounds[:-1]) + " and " + compounds[-1]
        samples.append(
            TrainingSample.build(
                normalize_pixels(torch.from_numpy(canvas)),
                torch.from_numpy(mask),
                long_caption=long_caption,
                short_caption=f"a {color} {shape}",
                global_caption=f"a {bg} scene showing {listing}",
                enlarge=enlarge,
                crop_size=resolution,
            )
        )
    return samples


def save_dataset(samples: Sequence[TrainingSample], out_dir, enlarge: float = 1.5) -> None:
    """Write a dataset directory: images.npy, samples.jsonl (RLE masks), meta.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = np.stack([s.pixels.numpy().astype(np.float32) for s in samples])
    np.save(out / "images.npy", images)
    with open(out / "samples.jsonl", "w") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "mask": encode_rle(s.mask),
                        "long_caption": s.long_caption,
                        "short_caption": s.short_caption,
                        "global_caption": s.global_caption,
                    }
                )
                + "\n"
            )
    meta = {
        "version": DATASET_META_VERSION,
        "count": len(samples),
        "resolution": int(images.shape[-1]),
        "enlarge": enlarge,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_dataset(data_dir) -> list[TrainingSample]:
    src = Path(data_dir)
    meta = json.loads((src / "meta.json").read_text())
    if meta.get("version") != DATASET_META_VERSION:
        raise ValueError(f"unsupported dataset version {meta.get('version')!r}")
    images = np.load(src / "images.npy")
    samples = []
    with open(src / "samples.jsonl") as fh:
        for i, line in enumerate(fh):
            row = json.loads(line)
            samples.append(
                TrainingSample.build(
                    torch.from_numpy(images[i]),
                    torch.from_numpy(decode_rle(row["mask"])),
                    long_caption=row["long_caption"],
                    short_caption=row["short_caption"],
                    global_caption=row["global_caption"],
                    enlarge=meta["enlarge"],
                    crop_size=meta["resolution"],
                )
            )
    if len(samples) != meta["count"]:
        raise ValueError(f"expected {meta['count']} samples, found {len(samples)}")
    return samples


def save_png(raw_pixels: torch.Tensor, path) -> None:
    arr = (raw_pixels.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def load_png(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1))


def export_manifest(samples: Sequence[TrainingSample], out_dir) -> Path:
    """Write PNG images plus a manifest.jsonl for the annotation pipeline."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for i, s in enumerate(samples):
            ref = out / "images" / f"{i:05d}.png"
            save_png(denormalize_pixels(s.pixels), ref)
            fh.write(
                json.dumps(
                    {"image_ref": str(ref), "mask": encode_rle(s.mask), "global_caption": s.global_caption}
                )
                + "\n"
            )
    return manifest


# ---------------------------------------------------------------------------
# Annotator clients and the pipeline.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Annotator:
    """A named annotation client; `fn` must be deterministic for fixed inputs."""

    name: str
    fn: Callable[..., str]

    def __call__(self, *args):
        return self.fn(*args)


@dataclass(frozen=True)
class AnnotatorSuite:
    object_captioner: Annotator
    validator: Annotator
    context_captioner: Annotator
    merger: Annotator

    def client_ids(self) -> dict:
        return {
            "object_captioner": self.object_captioner.name,
            "validator": self.validator.name,
            "context_captioner": self.context_captioner.name,
            "merger": self.merger.name,
        }


def _nearest_color_word(rgb: np.ndarray) -> str:
    names = list(COLORS)
    dists = [float(np.sum((rgb - np.array(COLORS[n])) ** 2)) for n in names]
    return names[int(np.argmin(dists))]


def mock_suite(validator_fn: Callable[[str, torch.Tensor], str] | None = None) -> AnnotatorSuite:
    """Deterministic local annotators for tests and offline runs."""

    def object_caption(crop_pixels: torch.Tensor, crop_mask: torch.Tensor) -> str:
        region = crop_mask.numpy() > 0
        mean_rgb = crop_pixels.numpy()[:, region].mean(axis=1)
        return f"a {_nearest_color_word(mean_rgb)} object covering {int(region.sum())} pixels"

    def context_caption(pixels: torch.Tensor, bbox: BBox) -> str:
        return (
            f"the object spans rows {bbox.row_min}-{bbox.row_max} and "
            f"columns {bbox.col_min}-{bbox.col_max} of the image"
        )

    def merge(object_caption_text: str, context_caption_text: str) -> str:
        return f"{object_caption_text}, {context_caption_text}"

    return AnnotatorSuite(
        object_captioner=Annotator("mock-object-captioner/1", object_caption),
        validator=Annotator("mock-validator/1", validator_fn or (lambda caption, pixels: "consistent")),
        context_captioner=Annotator("mock-context-captioner/1", context_caption),
        merger=Annotator("mock-merger/1", merge),
    )


def _default_transport(url: str, payload: dict, timeout: float):
    import requests

    response = requests.post(url, json=payload, timeout=timeout)
    response.raise_for_status()
    return response.json()


class RemoteAnnotator:
    """HTTP adapter for a captioning endpoint, with retry and backoff.

    Tensors are shipped as base64 float32 blobs, boxes as coordinate lists.
    The endpoint must answer {"text": ...}. Retries use exponential backoff
    and the final failure propagates to mark the record as failed.
    """

    def __init__(self, name: str, url: str, retries: int = 3, backoff: float = 0.5,
                 timeout: float = 30.0, transport=None):
        self.name = name
        self.url = url
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.transport = transport or _default_transport

    @staticmethod
    def _serialize(value):
        if isinstance(value, torch.Tensor):
            arr = value.detach().cpu().numpy().astype(np.float32)
            return {
                "shape": list(arr.shape),
                "data": base64.b64encode(arr.tobytes()).decode("ascii"),
            }
        if isinstance(value, BBox):
            return [value.row_min, value.col_min, value.row_max, value.col_max]
        return value

    def __call__(self, *args) -> str:
        payload = {"inputs": [self._serialize(a) for a in args]}
        last_error = None
        for attempt in range(self.retries):
            try:
                return str(self.transport(self.url, payload, self.timeout)["text"])
            except Exception as exc:  # noqa: BLE001 - any transport failure retries
                last_error = exc
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * (2 ** attempt))
        raise RuntimeError(f"{self.name} failed after {self.retries} attempts: {last_error}")


@dataclass
class LongGritRecord:
    """One pipeline output: texts from each stage plus the validation verdict."""

    image_ref: str
    mask: dict
    bbox: list
    object_caption: str = ""
    context_caption: str = ""
    merged_caption: str = ""
    verdict: str = "failed"
    failed_stage: str | None = None
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "LongGritRecord":
        return cls(**json.loads(line))


def record_content(record_dict: dict) -> dict:
    """A record as a comparable dict, with wall-clock timestamps removed."""
    out = dict(record_dict)
    prov = dict(out.get("provenance", {}))
    prov.pop("started", None)
    prov.pop("finished", None)
    out["provenance"] = prov
    return out


def annotate_sample(
    pixels: torch.Tensor,
    mask: torch.Tensor,
    suite: AnnotatorSuite,
    image_ref: str = "",
) -> LongGritRecord:
    """Run the three annotation stages over one (image, mask) pair.

    The validator gates stage one: captions judged inconsistent or invalid
    stop the pipeline for this sample and leave the merged caption empty.
    A client exception marks the record failed with the failing stage; it
    never propagates.
    """
    bbox = mask_to_bbox(mask)  # empty masks are rejected before any client runs
    record = LongGritRecord(
        image_ref=image_ref,
        mask=encode_rle(mask),
        bbox=[bbox.row_min, bbox.col_min, bbox.row_max, bbox.col_max],
        provenance={
            "clients": suite.client_ids(),
            "started": datetime.now(timezone.utc).isoformat(),
        },
    )
    stage = "object_caption"
    try:
        crop_px, crop_mask = derive_crop(pixels, mask, enlarge=1.0)
        record.object_caption = str(suite.object_captioner(crop_px, crop_mask))

        stage = "validation"
        verdict = str(suite.validator(record.object_caption, pixels))
        if verdict not in VALIDATOR_VERDICTS:
            raise ValueError(f"validator returned unknown verdict {verdict!r}")
        record.verdict = verdict
        if verdict == "consistent":
            stage = "context_caption"
            record.context_caption = str(suite.context_captioner(pixels, bbox))
            stage = "merge"
            record.merged_caption = str(suite.merger(record.object_caption, record.context_caption))
    except Exception:  # noqa: BLE001 - failures become records, the pipeline continues
        record.verdict = "failed"
        record.failed_stage = stage
        record.merged_caption = ""
    record.provenance["finished"] = datetime.now(timezone.utc).isoformat()
    return record


@dataclass(frozen=True)
class ManifestEntry:
    image_ref: str
    mask: dict
    global_caption: str = ""


@dataclass
class PipelineStats:
    accepted: int = 0
    rejected: int = 0
    failed: int = 0
    wall_time: float = 0.0


def load_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            row = json.loads(line)
            if "image_ref" not in row or "mask" not in row:
                raise ValueError(f"manifest line {i}: missing image_ref or mask")
            decode_rle(row["mask"])  # validate up front, before any output is written
            entries.append(ManifestEntry(row["image_ref"], row["mask"], row.get("global_caption", "")))
    return entries


def run_pipeline(
    manifest_path,
    suite: AnnotatorSuite,
    output_path,
    concurrency: int = 1,
    image_loader: Callable[[str], torch.Tensor] = load_png,
) -> PipelineStats:
    """Annotate every manifest entry and write records in manifest order.

    Records land in one JSONL file; run statistics are returned and written
    next to it. With deterministic clients the output is independent of the
    concurrency level (timestamps aside).
    """
    entries = load_manifest(manifest_path)
    started = time.perf_counter()

    def work(entry: ManifestEntry) -> LongGritRecord:
        stage = "load"
        try:
            pixels = image_loader(entry.image_ref)
            mask = torch.from_numpy(decode_rle(entry.mask))
        except Exception:  # noqa: BLE001
            record = LongGritRecord(image_ref=entry.image_ref, mask=entry.mask, bbox=[0, 0, 0, 0])
            record.failed_stage = stage
            return record
        return annotate_sample(pixels, mask, suite, image_ref=entry.image_ref)

    if concurrency <= 1:
        records = [work(e) for e in entries]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            records = list(pool.map(work, entries))

    stats = PipelineStats(wall_time=time.perf_counter() - started)
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w") as fh:
        for record in records:
            if record.verdict == "consistent":
                stats.accepted += 1
            elif record.verdict == "failed":
                stats.failed += 1
            else:
                stats.rejected += 1
            fh.write(record.to_json() + "\n")
    Path(str(output_path) + ".stats.json").write_text(json.dumps(asdict(stats)) + "\n")
    return stats


def dataset_from_records(
    records_path,
    resolution: int,
    enlarge: float = 1.5,
    image_loader: Callable[[str], torch.Tensor] = load_png,
    manifest_path=None,
) -> list[TrainingSample]:
    """Build training samples from accepted pipeline records only.

    Records whose verdict is anything other than consistent are skipped: the
    validation gate is the sole admission criterion. Whole-image captions
    come from the manifest when provided, otherwise the merged caption
    stands in.
    """
    globals_by_ref: dict[str, str] = {}
    if manifest_path is not None:
        for entry in load_manifest(manifest_path):
            if entry.global_caption:
                globals_by_ref[entry.image_ref] = entry.global_caption

    samples = []
    with open(records_path) as fh:
        for line in fh:
            if not line.strip():
                continue
            record = LongGritRecord.from_json(line)
            if record.verdict != "consistent" or not record.merged_caption:
                continue
            raw = image_loader(record.image_ref)
            if raw.shape[-1] != resolution:
                from .regionops import resize_image, resize_mask

                mask = resize_mask(torch.from_numpy(decode_rle(record.mask)), resolution)
                raw = resize_image(raw, resolution)
            else:
                mask = torch.from_numpy(decode_rle(record.mask))
            samples.append(
                TrainingSample.build(
                    normalize_pixels(raw),
                    mask,
                    long_caption=record.merged_caption,
                    short_caption=record.object_caption,
                    global_caption=globals_by_ref.get(record.image_ref, record.merged_caption),
                    enlarge=enlarge,
                    crop_size=resolution,
                )
            )
    return samples
