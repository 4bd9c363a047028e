"""Video records: synthetic generation, file I/O and graph assembly.

On-disk dataset layout (one directory)::

    meta.json          {"num_classes", "mode", "d", "class_names"}
    proposals.ndjson   {"video_id", "frame", "box": [x1, y1, x2, y2], "feature": [...], "source_id"}
    labels.ndjson      {"video_id", "label": int} or {"video_id", "multi_hot": [0/1, ...]}
    globals.ndjson     {"video_id", "feature": [...]}           (optional)

``proposals.bin`` may replace ``proposals.ndjson``; its layout is described
in :func:`write_proposals_bin`.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from regiongraph.graphs import (AffinityTransforms, build_back_graph, build_front_graph,
                                build_similarity_graph, canonical_order)
from regiongraph.model import VideoGraphInput
from regiongraph.regions import BoundingBox, FeatureVolume, RegionProposal, roi_align

log = logging.getLogger(__name__)

CLASS_NAMES = ("approach", "recede", "cyclic-swap", "static")
PROPOSALS_MAGIC = b"RGPB"
PROPOSALS_VERSION = 1


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass
class VideoRecord:
    video_id: str
    proposals: list[RegionProposal]
    label: int | np.ndarray
    global_feature: np.ndarray | None = None
    volume: FeatureVolume | None = None

    def __post_init__(self):
        if not self.proposals:
            raise DataError(f"video {self.video_id!r} has no proposals")

    @property
    def d(self) -> int:
        return self.proposals[0].feature.shape[0]

    @property
    def num_frames(self) -> int:
        return max(p.frame for p in self.proposals) + 1

    def target(self):
        return self.label if np.ndim(self.label) else int(self.label)


def assemble(record: VideoRecord, transforms: AffinityTransforms | None = None) -> VideoGraphInput:
    """Build the graph input for one record in canonical node order.

    Without ``transforms`` the similarity graph is left unset; the model then
    computes it from its own parameters.
    """
    order = canonical_order(record.proposals)
    props = [record.proposals[i] for i in order]
    x = np.stack([p.feature for p in props])
    if record.global_feature is not None:
        glob = np.asarray(record.global_feature, dtype=np.float64)
    elif record.volume is not None:
        glob = record.volume.global_feature()
    else:
        glob = x.mean(axis=0)
    return VideoGraphInput(
        node_features=x,
        g_sim=None if transforms is None else build_similarity_graph(x, transforms),
        g_front=build_front_graph(props),
        g_back=build_back_graph(props),
        global_feature=glob,
        frames=np.array([p.frame for p in props]),
    )


def split_clips(record: VideoRecord, clips: int) -> list[VideoRecord]:
    """Cut a video into ``clips`` contiguous frame windows (frames re-based to 0)."""
    if clips < 1:
        raise ValueError("clips must be >= 1")
    if clips == 1:
        return [record]
    t = record.num_frames
    bounds = np.linspace(0, t, clips + 1).round().astype(int)
    out = []
    for k, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        hi = max(hi, lo + 1)
        props = [RegionProposal(p.frame - lo, p.box, p.feature, p.source_id)
                 for p in record.proposals if lo <= p.frame < hi]
        if not props:
            continue
        out.append(VideoRecord(f"{record.video_id}#clip{k}", props, record.label,
                               record.global_feature, None))
    return out


# --------------------------------------------------------------------------
# synthetic relational dataset


@dataclass
class SynthSpec:
    num_videos: int = 200
    frames: int = 16
    proposals_per_frame: int = 10
    d: int = 512
    num_classes: int = 4
    noise_std: float = 0.1
    seed: int = 0
    # seed for the appearance vocabulary; keep it fixed across train/test splits
    vocab_seed: int = 1234
    map_size: float = 32.0
    actor_size: float = 8.0
    # probability that the actor pair follows its class's preferred appearance pairing
    pair_cue: float = 0.7
    # probability that approach/recede actors actually touch (contactless motion leaves no IoU link)
    contact_rate: float = 0.7
    # place each video's trajectories at a random offset
    randomize_region: bool = True
    render_volume: bool = False
    mode: str = "single"

    def __post_init__(self):
        if min(self.num_videos, self.frames, self.d) < 1:
            raise ValueError("num_videos, frames and d must be positive")
        if self.proposals_per_frame < 2:
            raise ValueError("need at least the two actor proposals per frame")
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"the synthetic task has exactly {len(CLASS_NAMES)} classes")
        if self.frames < 4:
            # fewer frames would move actors more than a box width per frame and break track links
            raise ValueError("the synthetic task needs at least 4 frames")


ACTOR_KINDS = 4
DISTRACTOR_KINDS = 8
# per class: actor-kind pairs with identical per-kind marginals, so only their co-occurrence is informative
PREFERRED_PAIRS = (
    ((0, 1), (2, 3)),
    ((0, 2), (1, 3)),
    ((0, 3), (1, 2)),
    ((0, 0), (1, 1), (2, 2), (3, 3)),
)


def _vocabulary(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(spec.vocab_seed)
    kinds = rng.normal(size=(ACTOR_KINDS + DISTRACTOR_KINDS, spec.d))
    kinds /= np.linalg.norm(kinds, axis=1, keepdims=True)
    kinds *= np.sqrt(spec.d)
    return kinds[:ACTOR_KINDS], kinds[ACTOR_KINDS:]


def actor_separation(label: int, frames: int, far: float, near: float) -> np.ndarray:
    """Signed horizontal offset of actor 1 relative to actor 0 per frame."""
    s = np.linspace(0.0, 1.0, frames)
    if label == 0:  # approach, then stay in contact
        return far - (far - near) * np.minimum(1.0, 2.0 * s)
    if label == 1:  # recede from contact
        return far - (far - near) * np.minimum(1.0, 2.0 * (1.0 - s))
    if label == 2:  # pass through each other and swap sides
        return far * (1.0 - 2.0 * s)
    return np.full(frames, far)


def _box(cx: float, cy: float, w: float, h: float, size: float) -> BoundingBox:
    x1 = min(max(cx - w / 2, 0.0), size - w)
    y1 = min(max(cy - h / 2, 0.0), size - h)
    return BoundingBox(x1, y1, x1 + w, y1 + h)


def synth_generate(spec: SynthSpec) -> list[VideoRecord]:
    """Generate labelled videos whose class lives only in the actors' relative motion.

    Each video holds two actor tracks and ``proposals_per_frame - 2``
    distractor tracks.  Node features are the track's appearance embedding
    plus per-frame noise; they carry no position or time.  Labels are
    balanced (video i has class ``i % 4``) and each generated video is
    re-labelled from its raw trajectories by :func:`classify_trajectories`
    as a consistency check.
    """
    actor_kinds, distractor_kinds = _vocabulary(spec)
    rng = np.random.default_rng(spec.seed)
    records = []
    for v in range(spec.num_videos):
        label = v % spec.num_classes
        record = _synth_video(spec, v, label, rng, actor_kinds, distractor_kinds)
        if classify_trajectories(record) != label:
            raise AssertionError(f"synthetic video {record.video_id} fails the trajectory rule")
        if spec.mode == "multi":
            record.label = np.eye(spec.num_classes)[label]
        records.append(record)
    return records


def _synth_video(spec: SynthSpec, v: int, label: int, rng: np.random.Generator,
                 actor_kinds: np.ndarray, distractor_kinds: np.ndarray) -> VideoRecord:
    size, a, T = spec.map_size, spec.actor_size, spec.frames
    vid = f"v{v:05d}"
    far = 2.5 * a
    near = 0.25 * a if rng.random() < spec.contact_rate else 1.3 * a
    sep = actor_separation(label, T, far, near)

    if spec.randomize_region:
        cx = rng.uniform(far / 2 + a / 2, size - far / 2 - a / 2)
        cy = rng.uniform(a / 2, size - a / 2)
    else:
        cx, cy = size / 2, size / 2
    jitter = rng.normal(0.0, 0.15, (2, T, 2))
    flip = rng.random() < 0.5
    centers = np.empty((2, T, 2))
    centers[0, :, 0] = cx - sep / 2
    centers[1, :, 0] = cx + sep / 2
    centers[:, :, 1] = cy
    centers += jitter
    if flip:
        centers = centers[::-1].copy()

    if rng.random() < spec.pair_cue:
        options = PREFERRED_PAIRS[label]
        pair = options[rng.integers(len(options))]
    else:
        pair = tuple(rng.integers(ACTOR_KINDS, size=2))
    if rng.random() < 0.5:
        pair = pair[::-1]

    tracks = []
    for k in range(2):
        ident = actor_kinds[pair[k]] + rng.normal(0.0, 0.3, spec.d)
        tracks.append((f"{vid}/actor{k}", ident, [_box(*centers[k, t], a, a, size) for t in range(T)]))
    for k in range(spec.proposals_per_frame - 2):
        ident = distractor_kinds[rng.integers(DISTRACTOR_KINDS)] + rng.normal(0.0, 0.3, spec.d)
        w, h = rng.uniform(0.5 * a, 1.25 * a, 2)
        start = rng.uniform([w / 2, h / 2], [size - w / 2, size - h / 2])
        steps = np.cumsum(rng.normal(0.0, 0.4, (T, 2)), axis=0)
        steps -= steps[0]
        boxes = [_box(*(start + steps[t]), w, h, size) for t in range(T)]
        tracks.append((f"{vid}/distractor{k}", ident, boxes))

    proposals = []
    for t in range(T):
        for source_id, ident, boxes in tracks:
            feat = ident + rng.normal(0.0, spec.noise_std, spec.d)
            proposals.append(RegionProposal(t, boxes[t], feat, source_id))

    volume = None
    if spec.render_volume:
        volume = render_volume(proposals, T, int(size), spec.d, rng, spec.noise_std)
        proposals = [RegionProposal(p.frame, p.box, roi_align(volume, p.frame, p.box), p.source_id)
                     for p in proposals]
    return VideoRecord(vid, proposals, label, None, volume)


def render_volume(proposals: Sequence[RegionProposal], frames: int, size: int, d: int,
                  rng: np.random.Generator, noise_std: float) -> FeatureVolume:
    """Paint each proposal's feature over its box cells (overlaps average)."""
    acc = np.zeros((frames, size, size, d))
    count = np.zeros((frames, size, size, 1))
    for p in proposals:
        b = p.box
        ys = slice(int(np.floor(b.y1)), int(np.ceil(b.y2)))
        xs = slice(int(np.floor(b.x1)), int(np.ceil(b.x2)))
        acc[p.frame, ys, xs] += p.feature
        count[p.frame, ys, xs] += 1
    data = np.divide(acc, count, out=np.zeros_like(acc), where=count > 0)
    data += rng.normal(0.0, noise_std, data.shape)
    return FeatureVolume(data)


def actor_centers(record: VideoRecord) -> np.ndarray:
    """(2, T, 2) actor box centers, from the ``/actor0`` and ``/actor1`` source ids."""
    t = record.num_frames
    out = np.full((2, t, 2), np.nan)
    for p in record.proposals:
        for k in (0, 1):
            if p.source_id.endswith(f"/actor{k}"):
                b = p.box
                out[k, p.frame] = ((b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2)
    if np.isnan(out).any():
        raise DataError(f"video {record.video_id!r}: actor tracks incomplete")
    return out


def classify_trajectories(record: VideoRecord) -> int:
    """Rule-based label from raw actor boxes, independent of the generator's code path."""
    c = actor_centers(record)
    dx = c[1, :, 0] - c[0, :, 0]
    if np.sign(dx[0]) != np.sign(dx[-1]):
        return 2
    dist = np.abs(dx)
    first, last = dist[: max(1, len(dist) // 4)].mean(), dist[-max(1, len(dist) // 4):].mean()
    if first - last > 1.0:
        return 0
    if last - first > 1.0:
        return 1
    return 3


# --------------------------------------------------------------------------
# file I/O


def _label_json(record: VideoRecord) -> dict:
    if np.ndim(record.label):
        return {"video_id": record.video_id, "multi_hot": [int(v) for v in record.label]}
    return {"video_id": record.video_id, "label": int(record.label)}


def save_dataset(records: Sequence[VideoRecord], path: str | Path, fmt: str = "ndjson",
                 meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if fmt == "ndjson":
        with open(path / "proposals.ndjson", "w") as fh:
            for r in records:
                for p in r.proposals:
                    fh.write(json.dumps({"video_id": r.video_id, "frame": p.frame,
                                         "box": p.box.as_list(), "feature": p.feature.tolist(),
                                         "source_id": p.source_id}) + "\n")
    elif fmt == "bin":
        write_proposals_bin(records, path / "proposals.bin")
    else:
        raise ValueError(f"unknown format {fmt!r}")
    with open(path / "labels.ndjson", "w") as fh:
        for r in records:
            fh.write(json.dumps(_label_json(r)) + "\n")
    globs = [r for r in records if r.global_feature is not None or r.volume is not None]
    if globs:
        with open(path / "globals.ndjson", "w") as fh:
            for r in globs:
                g = r.global_feature if r.global_feature is not None else r.volume.global_feature()
                fh.write(json.dumps({"video_id": r.video_id, "feature": np.asarray(g).tolist()}) + "\n")
    if meta is not None:
        (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def write_proposals_bin(records: Sequence[VideoRecord], path: str | Path) -> None:
    """Packed little-endian proposals.

    Header: magic ``b"RGPB"``, version ``u16``, d ``u32``, proposal count ``u64``.
    Then per proposal: video id (``u16`` byte length + UTF-8), frame ``u32``,
    box ``4 x f64``, source id (``u16`` length + UTF-8), feature ``d x f64``.
    """
    props = [(r.video_id, p) for r in records for p in r.proposals]
    d = props[0][1].feature.shape[0] if props else 0
    with open(path, "wb") as fh:
        fh.write(PROPOSALS_MAGIC + struct.pack("<HIQ", PROPOSALS_VERSION, d, len(props)))
        for vid, p in props:
            vb, sb = vid.encode(), p.source_id.encode()
            fh.write(struct.pack("<H", len(vb)) + vb)
            fh.write(struct.pack("<I4d", p.frame, *p.box.as_list()))
            fh.write(struct.pack("<H", len(sb)) + sb)
            fh.write(p.feature.astype("<f8").tobytes())


def _read_proposals_bin(path: Path) -> Iterable[tuple[str, dict]]:
    raw = path.read_bytes()
    if raw[:4] != PROPOSALS_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    version, d, count = struct.unpack_from("<HIQ", raw, 4)
    if version != PROPOSALS_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<HIQ")
    try:
        for k in range(count):
            (n,) = struct.unpack_from("<H", raw, off)
            off += 2
            vid = raw[off:off + n].decode()
            off += n
            frame, *box = struct.unpack_from("<I4d", raw, off)
            off += struct.calcsize("<I4d")
            (n,) = struct.unpack_from("<H", raw, off)
            off += 2
            sid = raw[off:off + n].decode()
            off += n
            feat = np.frombuffer(raw, dtype="<f8", count=d, offset=off).astype(np.float64)
            off += 8 * d
            yield f"record {k}", {"video_id": vid, "frame": frame, "box": box,
                                  "feature": feat, "source_id": sid}
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated at byte {off}") from exc
    if off != len(raw):
        raise DataError(f"{path}: {len(raw) - off} trailing bytes")


def _read_ndjson(path: Path) -> Iterable[tuple[str, dict]]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(row, dict):
                raise DataError(f"{path}:{lineno}: expected an object")
            yield f"{path}:{lineno}", row


def load_dataset(path: str | Path, fmt: str = "ndjson") -> list[VideoRecord]:
    """Load and validate a dataset directory; records come back sorted by video id."""
    path = Path(path)
    if fmt not in ("ndjson", "bin"):
        raise ValueError(f"unknown format {fmt!r}")
    prop_file = path / ("proposals.ndjson" if fmt == "ndjson" else "proposals.bin")
    if not prop_file.exists():
        raise FileNotFoundError(prop_file)
    rows = _read_ndjson(prop_file) if fmt == "ndjson" else _read_proposals_bin(prop_file)

    grouped: dict[str, list[RegionProposal]] = {}
    d_seen: tuple[int, str] | None = None
    for locus, row in rows:
        try:
            vid = str(row["video_id"])
            feat = np.asarray(row["feature"], dtype=np.float64)
            prop = RegionProposal(int(row["frame"]), BoundingBox(*map(float, row["box"])), feat,
                                  str(row.get("source_id", "")))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{locus}: malformed proposal ({exc})") from exc
        if d_seen is None:
            d_seen = (feat.shape[0], locus)
        elif feat.shape[0] != d_seen[0]:
            raise DataError(f"{locus}: video {vid!r} has feature width {feat.shape[0]}, "
                            f"expected {d_seen[0]} (from {d_seen[1]})")
        grouped.setdefault(vid, []).append(prop)

    if not grouped:
        log.warning("dataset %s is empty", path)
        return []

    labels: dict[str, int | np.ndarray] = {}
    label_file = path / "labels.ndjson"
    if not label_file.exists():
        raise DataError(f"{path}: missing labels.ndjson")
    for locus, row in _read_ndjson(label_file):
        try:
            vid = str(row["video_id"])
            if "multi_hot" in row:
                labels[vid] = np.asarray(row["multi_hot"], dtype=np.float64)
            else:
                labels[vid] = int(row["label"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{locus}: malformed label ({exc})") from exc

    globs: dict[str, np.ndarray] = {}
    glob_file = path / "globals.ndjson"
    if glob_file.exists():
        for locus, row in _read_ndjson(glob_file):
            g = np.asarray(row["feature"], dtype=np.float64)
            if g.shape != (d_seen[0],):
                raise DataError(f"{locus}: global feature width {g.shape[0]}, expected {d_seen[0]}")
            globs[str(row["video_id"])] = g

    records = []
    for vid in sorted(grouped):
        if vid not in labels:
            raise DataError(f"video {vid!r} has proposals but no label")
        records.append(VideoRecord(vid, grouped[vid], labels[vid], globs.get(vid)))
    return records


def load_meta(path: str | Path) -> dict:
    meta_file = Path(path) / "meta.json"
    return json.loads(meta_file.read_text()) if meta_file.exists() else {}


def dataset_meta(spec: SynthSpec) -> dict:
    return {"num_classes": spec.num_classes, "mode": spec.mode, "d": spec.d,
            "class_names": list(CLASS_NAMES)}
