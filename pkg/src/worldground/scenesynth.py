"""Synthetic driving-scene generator.

Scenes are 96x96 front-camera views: sky above a fixed horizon, a three-lane
road below it, and colored obstacles (cars, trucks, people, signs, cyclists)
standing on the ground plane. Geometry is a plain pinhole camera, so screen
size and vertical position encode metric depth, and the depth channel is
rendered exactly (infinite depth on sky pixels).

Each sample carries one command naming exactly one object. Commands come from
a closed template grammar over the checked-in vocabulary; a symbolic evaluator
parses any generated command back into predicates and is run on every sample
before it is accepted, so solvability is checked, not hoped for.

All randomness flows through the counter-based Rng, one stream per sample, so
regeneration is reproducible across hosts and immune to retry-count drift.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensorio, vocab
from .rng import Rng


class SceneError(ValueError):
    """Invalid scene data or unsatisfiable generation constraints."""


class CommandError(ValueError):
    """Command tokens that do not parse under the template grammar."""


class _Retry(Exception):
    # internal: reject this draw and try again on the same stream
    pass


# ---------------------------------------------------------------------------
# palette and geometry constants

KINDS = ("car", "truck", "person", "sign", "cyclist")
COLORS = ("red", "green", "blue", "yellow", "orange", "purple", "cyan", "pink")
LANES = ("left", "center", "right")
TAGS = ("plain", "long-text", "multi-agent", "ambiguous")

COLOR_RGB = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.13, 0.65, 0.20),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.92, 0.85, 0.12),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.55, 0.20, 0.70),
    "cyan": (0.10, 0.80, 0.85),
    "pink": (0.95, 0.35, 0.65),
}

# metric width/height per kind, meters
KIND_SIZE = {
    "car": (1.9, 1.5),
    "truck": (2.5, 3.0),
    "person": (0.65, 1.75),
    "sign": (0.85, 1.05),
    "cyclist": (0.85, 1.8),
}

SKY_RGB = (0.62, 0.78, 0.94)
ROAD_RGB = (0.30, 0.30, 0.32)
MARKING_RGB = (0.72, 0.72, 0.70)

HORIZON = 32          # first road row, for a 96px image; scales with size
FOCAL = 90.0          # px per (meter / meter-of-depth)
GROUND_K = 240.0      # ground depth at row r is GROUND_K / (r - HORIZON + 2)
DEPTH_MIN = 4.0
DEPTH_MAX = 45.0
MIN_AREA = 1.5e-3     # normalized box area floor, with margin over the 1e-3 contract

SHADE_FLOOR = 0.75    # farthest objects keep 75% brightness


def _kind_depth_max(kind: str) -> float:
    w, h = KIND_SIZE[kind]
    # keep normalized area >= MIN_AREA: (FOCAL^2 w h / d^2) / 96^2 >= MIN_AREA
    return min(DEPTH_MAX, (FOCAL / 96.0) * math.sqrt(w * h / MIN_AREA))


def ground_row(depth: float, size: int = 96) -> float:
    scale = size / 96.0
    return scale * (HORIZON - 2) + scale * GROUND_K / depth


def ground_depth(row: int, size: int = 96) -> float:
    scale = size / 96.0
    return min(80.0, GROUND_K * scale / max(row - scale * (HORIZON - 2), 1e-6))


# ---------------------------------------------------------------------------
# data types


@dataclass
class SceneObject:
    kind: str
    color: str
    box: tuple          # (x1, y1, x2, y2) normalized to [0, 1]
    depth: float        # meters to the camera
    lane: str

    def validate(self, size: int = 96) -> None:
        if self.kind not in KINDS:
            raise SceneError(f"unknown kind {self.kind!r}")
        if self.color not in COLORS:
            raise SceneError(f"unknown color {self.color!r}")
        if self.lane not in LANES:
            raise SceneError(f"unknown lane {self.lane!r}")
        x1, y1, x2, y2 = self.box
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise SceneError(f"degenerate box {self.box}")
        if (x2 - x1) * (y2 - y1) < 1e-3:
            raise SceneError(f"box area below 1e-3: {self.box}")
        if not (1.0 <= self.depth <= 80.0):
            raise SceneError(f"depth {self.depth} outside [1, 80]")
        if lane_of(0.5 * (x1 + x2)) != self.lane:
            raise SceneError(f"lane {self.lane!r} disagrees with box center {0.5 * (x1 + x2):.3f}")


def lane_of(cx: float) -> str:
    return LANES[min(2, int(cx * 3.0))]


@dataclass
class SceneSample:
    image: np.ndarray       # float32 [3, H, W], values in [0, 1]
    depth: np.ndarray       # float32 [H, W], meters; +inf on sky
    objects: list
    command: list           # token ids, <= 50
    target_index: int
    gt_mask: np.ndarray     # uint8 [H, W], the target's box footprint
    split_tags: set

    def command_text(self) -> str:
        return " ".join(vocab.decode(self.command))

    def validate(self) -> None:
        if self.image.ndim != 3:
            raise SceneError(f"image: expected 3 dims, got {self.image.ndim}")
        if self.depth.ndim != 2 or self.gt_mask.ndim != 2:
            raise SceneError("depth and gt_mask must be 2-d")
        size = self.image.shape[1]
        if self.image.shape != (3, size, size) or self.depth.shape != (size, size):
            raise SceneError(f"inconsistent raster shapes {self.image.shape} / {self.depth.shape}")
        if not self.objects:
            raise SceneError("scene has no objects")
        if not 0 <= self.target_index < len(self.objects):
            raise SceneError(f"target_index {self.target_index} out of range")
        if len(self.command) > vocab.MAX_TOKENS:
            raise SceneError(f"command has {len(self.command)} tokens, limit {vocab.MAX_TOKENS}")
        if not self.command:
            raise SceneError("empty command")
        for obj in self.objects:
            obj.validate(size)
        if not self.split_tags or not self.split_tags <= set(TAGS):
            raise SceneError(f"bad split tags {self.split_tags}")
        want = np.zeros((size, size), dtype=np.uint8)
        x0, y0, x1, y1 = box_to_pixels(self.objects[self.target_index].box, size)
        want[y0:y1, x0:x1] = 1
        if not np.array_equal(want, self.gt_mask):
            raise SceneError("gt_mask does not match the target box footprint")


@dataclass
class SynthConfig:
    image_size: int = 96
    min_objects: int = 3
    max_objects: int = 7
    multi_agent_min: int = 16
    max_overlap: float = 0.30       # pairwise box IoU cap
    tag_fractions: tuple = (("plain", 0.55), ("ambiguous", 0.15),
                            ("multi-agent", 0.15), ("long-text", 0.15))
    force_tag: str = ""             # set per-sample by generate_dataset
    relclause_prob: float = 0.2     # ambiguous samples: behind/ahead-of wording share
    long_text_min: int = 24
    max_scene_tries: int = 30
    max_place_tries: int = 80

    def validate(self) -> None:
        if self.image_size < 32 or self.image_size % 8:
            raise SceneError("image_size must be a multiple of 8, >= 32")
        if not 1 <= self.min_objects <= self.max_objects:
            raise SceneError("need 1 <= min_objects <= max_objects")
        if not 0.0 < self.max_overlap < 1.0:
            raise SceneError("max_overlap must sit in (0, 1)")
        total = sum(f for _, f in self.tag_fractions)
        if abs(total - 1.0) > 1e-9:
            raise SceneError(f"tag fractions sum to {total}, expected 1")
        if self.force_tag and self.force_tag not in TAGS:
            raise SceneError(f"unknown tag {self.force_tag!r}")
        if self.multi_agent_min > 19:
            raise SceneError("multi-agent placement supports at most 19 objects")


# ---------------------------------------------------------------------------
# rasterization


def box_to_pixels(box, size: int):
    x1, y1, x2, y2 = box
    x0 = int(round(x1 * size))
    y0 = int(round(y1 * size))
    x1p = int(round(x2 * size))
    y1p = int(round(y2 * size))
    return x0, y0, max(x1p, x0 + 1), max(y1p, y0 + 1)


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    area = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area - inter)


def render(objects, size: int = 96):
    """Paint image and depth rasters. Far-to-near painter's order, so the
    nearest object wins every contested pixel and depth is min over cover."""
    img = np.zeros((3, size, size), dtype=np.float32)
    dep = np.full((size, size), np.inf, dtype=np.float32)
    horizon = int(HORIZON * size / 96)

    img[:, :horizon, :] = np.asarray(SKY_RGB, dtype=np.float32)[:, None, None]
    rows = np.arange(horizon, size)
    t = (rows - horizon) / max(size - horizon - 1, 1)
    for c in range(3):
        img[c, horizon:, :] = (ROAD_RGB[c] + 0.06 * t)[:, None]
    for r in rows:
        dep[r, :] = ground_depth(int(r), size)
    # dashed lane separators, 6px period
    for xm in (size // 3, 2 * size // 3):
        for r in rows:
            if (r // 3) % 2 == 0:
                img[:, r, xm - 1 : xm + 1] = np.asarray(MARKING_RGB, dtype=np.float32)[:, None]

    for obj in sorted(objects, key=lambda o: -o.depth):
        x0, y0, x1, y1 = box_to_pixels(obj.box, size)
        shade = 1.0 - (1.0 - SHADE_FLOOR) * min(obj.depth, 60.0) / 60.0
        rgb = np.asarray(COLOR_RGB[obj.color], dtype=np.float32) * shade
        img[:, y0:y1, x0:x1] = rgb[:, None, None]
        # 1px darker rim gives objects visible structure
        edge = (rgb * 0.55)[:, None, None]
        img[:, y0, x0:x1] = edge[:, 0]
        img[:, y1 - 1, x0:x1] = edge[:, 0]
        img[:, y0:y1, x0] = edge[:, 0]
        img[:, y0:y1, x1 - 1] = edge[:, 0]
        dep[y0:y1, x0:x1] = np.minimum(dep[y0:y1, x0:x1], np.float32(obj.depth))
    return img, dep


def detect_objects(image: np.ndarray):
    """Heuristic detector: nearest-palette-color match with a fitted brightness
    scale, then flood-fill connected components per color. Returns
    (box, color) pairs sorted by area, largest first. No kind estimate."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise SceneError("image: expected 3 dims with a leading channel axis")
    size = image.shape[1]
    px = image.reshape(3, -1).T  # [HW, 3]
    labels = np.full(px.shape[0], -1, dtype=np.int64)
    best = np.full(px.shape[0], 0.18 ** 2, dtype=np.float64)  # residual gate
    for ci, name in enumerate(COLORS):
        c = np.asarray(COLOR_RGB[name])
        s = np.clip(px @ c / (c @ c), SHADE_FLOOR * 0.7, 1.05)
        resid = ((px - s[:, None] * c) ** 2).sum(axis=1)
        hit = resid < best
        labels[hit] = ci
        best[hit] = resid[hit]
    lab2 = labels.reshape(size, size)

    boxes = []
    seen = np.zeros((size, size), dtype=bool)
    for r in range(size):
        for q in range(size):
            if seen[r, q] or lab2[r, q] < 0:
                continue
            ci = lab2[r, q]
            stack = [(r, q)]
            seen[r, q] = True
            rmin = rmax = r
            qmin = qmax = q
            count = 0
            while stack:
                rr, qq = stack.pop()
                count += 1
                rmin, rmax = min(rmin, rr), max(rmax, rr)
                qmin, qmax = min(qmin, qq), max(qmax, qq)
                for dr, dq in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    nr, nq = rr + dr, qq + dq
                    if 0 <= nr < size and 0 <= nq < size and not seen[nr, nq] \
                            and lab2[nr, nq] == ci:
                        seen[nr, nq] = True
                        stack.append((nr, nq))
            if count < 4:
                continue
            box = (qmin / size, rmin / size, (qmax + 1) / size, (rmax + 1) / size)
            boxes.append((count, box, COLORS[ci]))
    boxes.sort(key=lambda t: (-t[0], t[1]))
    return [(b, c) for _, b, c in boxes]


# ---------------------------------------------------------------------------
# command grammar

VERBS = ("follow", "approach", "pass", "watch")
STOP_WORDS = ("while", "before", "as", "past")

DISTRACTORS = tuple(clause.split() for clause in (
    "while the traffic light stays steady",
    "while the road remains clear",
    "before the next turn",
    "as the engine hums along quietly",
    "past the quiet junction by the hill",
    "while the weather holds calm today",
    "as dust drifts over the warm asphalt",
    "before the slow bend near the old bridge",
    "while morning fog lifts off the fields",
    "as the radio plays a gentle tune",
    "while rain taps on the glass",
    "as the evening sun dips toward the trees",
    "past the long line of traffic cones",
    "before the usual exit ramp",
    "while a light breeze moves the dry grass",
    "as the wipers sweep the wet glass",
))

KEYWORD_PHRASES = {
    "low-visibility": ("low", "visibility"),
    "crowded": ("crowded", "scene"),
    "intersection": ("intersection",),
    "occlusion": ("heavy", "occlusion"),
}


@dataclass
class Predicates:
    color: str
    kind: str
    lane: str = ""            # empty = no lane clause
    rel: str = ""             # "", "nearest", "farthest"
    ref: tuple = ()           # (direction, color, kind) for behind/ahead-of


def compose_command(pred: Predicates, verb: str = "follow") -> list:
    toks = [verb, "the"]
    if pred.rel:
        toks.append(pred.rel)
    toks += [pred.color, pred.kind]
    if pred.lane:
        toks += ["in", "the", pred.lane, "lane"]
    if pred.ref:
        direction, c2, k2 = pred.ref
        toks += ["behind", "the", c2, k2] if direction == "behind" else \
                ["ahead", "of", "the", c2, k2]
    return vocab.encode(toks)


def parse_command(command) -> Predicates:
    """Parse token ids back into predicates. Distractor clauses and anything
    after the separator are ignored; a malformed head raises CommandError."""
    words = vocab.decode(command)
    if "[sep]" in words:
        words = words[: words.index("[sep]")]
    for stop in STOP_WORDS:
        if stop in words:
            words = words[: words.index(stop)]
    if "the" not in words:
        raise CommandError(f"no determiner in {' '.join(words)!r}")
    i = words.index("the") + 1
    rel = ""
    if i < len(words) and words[i] in ("nearest", "farthest"):
        rel = words[i]
        i += 1
    if i + 1 >= len(words) or words[i] not in COLORS or words[i + 1] not in KINDS:
        raise CommandError(f"expected color+kind at token {i} of {' '.join(words)!r}")
    pred = Predicates(color=words[i], kind=words[i + 1], rel=rel)
    i += 2
    while i < len(words):
        rest = words[i:]
        if rest[:2] == ["in", "the"] and len(rest) >= 4 and rest[2] in LANES and rest[3] == "lane":
            pred.lane = rest[2]
            i += 4
        elif rest[0] == "behind" and len(rest) >= 4 and rest[1] == "the" \
                and rest[2] in COLORS and rest[3] in KINDS:
            pred.ref = ("behind", rest[2], rest[3])
            i += 4
        elif rest[:3] == ["ahead", "of", "the"] and len(rest) >= 5 \
                and rest[3] in COLORS and rest[4] in KINDS:
            pred.ref = ("ahead", rest[3], rest[4])
            i += 5
        else:
            raise CommandError(f"unparsed trailing tokens {' '.join(rest)!r}")
    return pred


def satisfiers(objects, pred: Predicates) -> list:
    """Indices of objects satisfying every predicate. The generator only
    accepts samples where this returns exactly the target."""
    idx = [i for i, o in enumerate(objects) if o.color == pred.color and o.kind == pred.kind]
    if pred.lane:
        idx = [i for i in idx if objects[i].lane == pred.lane]
    if pred.rel and idx:
        pick = min if pred.rel == "nearest" else max
        idx = [pick(idx, key=lambda i: objects[i].depth)]
    if pred.ref:
        direction, c2, k2 = pred.ref
        refs = [o for o in objects if o.color == c2 and o.kind == k2]
        if len(refs) != 1:
            return []
        rd = refs[0].depth
        idx = [i for i in idx if (objects[i].depth > rd) == (direction == "behind")]
    return idx


def evaluate_command(command, objects) -> list:
    return satisfiers(objects, parse_command(command))


def has_occlusion(objects, min_iou: float = 0.05) -> bool:
    for a in range(len(objects)):
        for b in range(a + 1, len(objects)):
            if box_iou(objects[a].box, objects[b].box) > min_iou:
                return True
    return False


def scene_keywords(objects, split_tags) -> list:
    """Deterministic context keywords for the separator-append augmentation.
    Occluded or ambiguous scenes lead with the low-visibility phrase."""
    keys = []
    if has_occlusion(objects) or "ambiguous" in split_tags:
        keys.append("low-visibility")
    if has_occlusion(objects, min_iou=0.18):
        keys.append("occlusion")
    if len(objects) >= 10:
        keys.append("crowded")
    if len(objects) >= 14:
        keys.append("intersection")
    return keys


def augment_command(command, mode: str, rng: Rng, prob: float = 0.3, keywords=()) -> list:
    """Training-time command rewrite. With probability 1-prob the command is
    returned unchanged; otherwise `mode` applies:

      keyword   append [sep] + context keyword phrases
      longtext  pad with distractor clauses up to the long-command regime
      ambiguity drop the most specific optional clause, if any
    """
    if mode not in ("keyword", "longtext", "ambiguity"):
        raise CommandError(f"unknown augmentation mode {mode!r}")
    if rng.next_float() >= prob:
        return list(command)
    out = list(command)
    if mode == "keyword":
        phrases = [KEYWORD_PHRASES[k] for k in keywords if k in KEYWORD_PHRASES]
        if not phrases:
            return out
        out = out + [vocab.SEP]
        for ph in phrases:
            out += vocab.encode(ph)
    elif mode == "longtext":
        order = rng.permutation(len(DISTRACTORS))
        for j in order:
            if len(out) >= 24:
                break
            out += vocab.encode(DISTRACTORS[j])
    else:
        pred = parse_command(out)
        if pred.lane:
            pred.lane = ""
        elif pred.rel:
            pred.rel = ""
        verb = vocab.decode(out[:1])[0]
        out = compose_command(pred, verb=verb if verb in VERBS else "follow")
    return out[: vocab.MAX_TOKENS]


# ---------------------------------------------------------------------------
# scene construction


def _place_free(rng: Rng, cfg: SynthConfig, n: int, forbidden_pairs=frozenset(),
                preplaced=()):
    objects = list(preplaced)
    for _ in range(n - len(objects)):
        for attempt in range(cfg.max_place_tries):
            kind = rng.choice(KINDS)
            color = rng.choice(COLORS)
            if (kind, color) in forbidden_pairs:
                continue
            lane = rng.choice(LANES)
            obj = _make_object(rng, cfg, kind, color, lane,
                               DEPTH_MIN, _kind_depth_max(kind))
            if obj is not None and _placement_ok(obj, objects, cfg):
                objects.append(obj)
                break
        else:
            raise _Retry
    return objects


def _make_object(rng: Rng, cfg: SynthConfig, kind, color, lane, dlo, dhi,
                 jitter: float = 7.0):
    size = cfg.image_size
    scale = size / 96.0
    depth = rng.uniform(dlo, dhi)
    w_m, h_m = KIND_SIZE[kind]
    w = max(2, int(round(scale * FOCAL * w_m / depth)))
    h = max(2, int(round(scale * FOCAL * h_m / depth)))
    r = int(round(ground_row(depth, size)))
    if r > size - 1:
        return None
    y0 = r - h
    if y0 < 0:
        return None
    centers = {"left": size / 6, "center": size / 2, "right": 5 * size / 6}
    cx = centers[lane] + rng.uniform(-jitter, jitter) * scale
    x0 = int(round(cx - w / 2.0))
    x0 = max(0, min(size - w, x0))
    box = (x0 / size, y0 / size, (x0 + w) / size, r / size)
    if lane_of(0.5 * (box[0] + box[2])) != lane:
        return None
    obj = SceneObject(kind=kind, color=color, box=box, depth=depth, lane=lane)
    try:
        obj.validate(size)
    except SceneError:
        return None
    return obj


def _covered_fraction(far_box, near_box) -> float:
    ix = max(0.0, min(far_box[2], near_box[2]) - max(far_box[0], near_box[0]))
    iy = max(0.0, min(far_box[3], near_box[3]) - max(far_box[1], near_box[1]))
    area = (far_box[2] - far_box[0]) * (far_box[3] - far_box[1])
    return ix * iy / area


def _placement_ok(obj, others, cfg) -> bool:
    margin = 2.0 / cfg.image_size
    for o in others:
        if box_iou(obj.box, o.box) > cfg.max_overlap:
            return False
        if abs(obj.depth - o.depth) < 0.25:
            return False
        far, near = (obj, o) if obj.depth > o.depth else (o, obj)
        if _covered_fraction(far.box, near.box) > 0.30:
            return False
        if obj.color == o.color:
            # same-color components must stay pixel-separated or the
            # color-quantizing detector cannot tell them apart
            ix = min(obj.box[2], o.box[2]) - max(obj.box[0], o.box[0])
            iy = min(obj.box[3], o.box[3]) - max(obj.box[1], o.box[1])
            if ix > -margin and iy > -margin:
                return False
    return True


# wide kinds become occluding walls when drawn close; keep them out of
# the near bands of the traffic lattice
_LATTICE_DEPTH_FLOOR = {"truck": 13.0, "car": 9.0}


def _place_multi_agent(rng: Rng, cfg: SynthConfig, n: int):
    # lane x depth-band lattice: 3 * 8 = 24 slots for up to 18 objects,
    # so a handful of infeasible slots can be skipped
    n_bands = 8
    ratio = 42.0 / 7.0
    bands = [(7.0 * ratio ** (i / n_bands), 7.0 * ratio ** ((i + 1) / n_bands))
             for i in range(n_bands)]
    slots = [(lane, bi) for lane in LANES for bi in range(n_bands)]
    rng.shuffle(slots)
    objects = []
    for lane, bi in slots:
        if len(objects) >= n:
            break
        dlo, dhi = bands[bi]
        for attempt in range(cfg.max_place_tries):
            kind = rng.choice(KINDS)
            if _kind_depth_max(kind) < dhi:
                continue
            if _LATTICE_DEPTH_FLOOR.get(kind, 0.0) > dlo:
                continue
            color = rng.choice(COLORS)
            # alternate lean keeps adjacent bands from stacking in x
            obj = _make_object(rng, cfg, kind, color, lane, dlo, dhi, jitter=2.0)
            if obj is None:
                continue
            lean = -5.0 if bi % 2 == 0 else 5.0
            size = cfg.image_size
            x0, y0, x1, y1 = box_to_pixels(obj.box, size)
            w = x1 - x0
            x0 = max(0, min(size - w, int(round(x0 + lean * size / 96.0))))
            box = (x0 / size, y0 / size, (x0 + w) / size, y1 / size)
            if lane_of(0.5 * (box[0] + box[2])) != lane:
                box = obj.box
            cand = dataclasses.replace(obj, box=box)
            if _placement_ok(cand, objects, cfg):
                objects.append(cand)
                break
    if len(objects) < n:
        raise _Retry
    return objects


def _plant_ambiguous_pair(rng: Rng, cfg: SynthConfig):
    # lanes drawn independently: without a lane clause in the command, the
    # pair is ambiguous as long as kind and color match
    for attempt in range(cfg.max_place_tries):
        kind = rng.choice(KINDS)
        color = rng.choice(COLORS)
        dmax = _kind_depth_max(kind)
        d1 = rng.uniform(DEPTH_MIN, dmax / 1.7)
        near = _make_object(rng, cfg, kind, color, rng.choice(LANES), d1, d1)
        d2 = d1 * rng.uniform(1.6, min(2.2, dmax / d1))
        far = _make_object(rng, cfg, kind, color, rng.choice(LANES), d2, d2)
        if near is None or far is None:
            continue
        if _placement_ok(near, [far], cfg):
            return near, far
    raise _Retry


def _pick_command(rng: Rng, cfg: SynthConfig, objects, target: int, tag: str):
    """Build predicates that single out `target`, adjusting the target to an
    extremal same-attribute object when depth wording is the only way out.
    Returns (predicates, target_index)."""
    tgt = objects[target]
    same = [i for i, o in enumerate(objects)
            if o.color == tgt.color and o.kind == tgt.kind]

    if tag == "ambiguous":
        # must stay ambiguous without the depth clause
        by_d = sorted(same, key=lambda i: objects[i].depth)
        if rng.next_float() < cfg.relclause_prob:
            ref = _viable_reference(objects, by_d)
            if ref is not None:
                direction, c2, k2, idx = ref
                pred = Predicates(color=tgt.color, kind=tgt.kind,
                                  ref=(direction, c2, k2))
                if rng.next_float() < 0.5 and len({objects[i].lane for i in same}) == 1:
                    pred.lane = tgt.lane
                return pred, idx
        want_near = rng.next_float() < 0.5
        idx = by_d[0] if want_near else by_d[-1]
        pred = Predicates(color=tgt.color, kind=tgt.kind,
                          rel="nearest" if want_near else "farthest")
        if rng.next_float() < 0.5 and len({objects[i].lane for i in same}) == 1:
            pred.lane = objects[idx].lane
        return pred, idx

    if len(same) == 1:
        pred = Predicates(color=tgt.color, kind=tgt.kind)
        if rng.next_float() < 0.4:
            pred.lane = tgt.lane
        return pred, target

    in_lane = [i for i in same if objects[i].lane == tgt.lane]
    if len(in_lane) == 1 and rng.next_float() < 0.7:
        return Predicates(color=tgt.color, kind=tgt.kind, lane=tgt.lane), target

    by_d = sorted(same, key=lambda i: objects[i].depth)
    want_near = rng.next_float() < 0.5
    idx = by_d[0] if want_near else by_d[-1]
    return Predicates(color=tgt.color, kind=tgt.kind,
                      rel="nearest" if want_near else "farthest"), idx


def _viable_reference(objects, members):
    """A reference object usable for behind/ahead-of wording: unique in its
    (color, kind) and splitting the member set so exactly one lies on one side."""
    depths = [objects[i].depth for i in members]
    for j, ref in enumerate(objects):
        if j in members:
            continue
        twins = [o for o in objects if o.color == ref.color and o.kind == ref.kind]
        if len(twins) != 1:
            continue
        behind = [i for i in members if objects[i].depth > ref.depth]
        ahead = [i for i in members if objects[i].depth < ref.depth]
        if len(behind) == 1:
            return "behind", ref.color, ref.kind, behind[0]
        if len(ahead) == 1:
            return "ahead", ref.color, ref.kind, ahead[0]
    return None


def _build_scene(rng: Rng, cfg: SynthConfig, tag: str) -> SceneSample:
    size = cfg.image_size
    if tag == "multi-agent":
        n = cfg.multi_agent_min + rng.next_below(3)
        objects = _place_multi_agent(rng, cfg, n)
    elif tag == "ambiguous":
        near, far = _plant_ambiguous_pair(rng, cfg)
        n = max(cfg.min_objects, 3) + rng.next_below(max(1, cfg.max_objects - cfg.min_objects + 1))
        n = min(n, cfg.max_objects)
        objects = _place_free(rng, cfg, max(n, 3),
                              forbidden_pairs=frozenset({(near.kind, near.color)}),
                              preplaced=(near, far))
    else:
        n = cfg.min_objects + rng.next_below(cfg.max_objects - cfg.min_objects + 1)
        objects = _place_free(rng, cfg, n)

    rng.shuffle(objects)
    target = rng.next_below(len(objects))
    if tag == "ambiguous":
        # target must come from the planted pair: the only (kind, color) with twins
        pair = [i for i, o in enumerate(objects)
                if sum(1 for q in objects
                       if q.kind == o.kind and q.color == o.color) >= 2]
        target = rng.choice(pair)

    pred, target = _pick_command(rng, cfg, objects, target, tag)
    verb = rng.choice(VERBS)
    command = compose_command(pred, verb=verb)
    if evaluate_command(command, objects) != [target]:
        raise _Retry
    if tag == "ambiguous":
        relax = dataclasses.replace(pred, rel="", ref=())
        if len(satisfiers(objects, relax)) < 2:
            raise _Retry

    if tag == "long-text":
        order = rng.permutation(len(DISTRACTORS))
        for j in order:
            if len(command) >= cfg.long_text_min:
                break
            command = command + vocab.encode(DISTRACTORS[j])
        command = command[: vocab.MAX_TOKENS]

    image, depth = render(objects, size)
    mask = np.zeros((size, size), dtype=np.uint8)
    x0, y0, x1, y1 = box_to_pixels(objects[target].box, size)
    mask[y0:y1, x0:x1] = 1
    sample = SceneSample(image=image, depth=depth, objects=objects, command=command,
                         target_index=target, gt_mask=mask, split_tags={tag})
    sample.validate()
    return sample


def generate_scene(seed: int, cfg: SynthConfig) -> SceneSample:
    """Deterministic scene from (seed, cfg). Retries burn draws from the same
    stream, so the result is a pure function of the arguments."""
    cfg.validate()
    rng = Rng(seed)
    if cfg.force_tag:
        tag = cfg.force_tag
    else:
        u = rng.next_float()
        acc = 0.0
        tag = cfg.tag_fractions[-1][0]
        for name, frac in cfg.tag_fractions:
            acc += frac
            if u < acc:
                tag = name
                break
    for attempt in range(cfg.max_scene_tries):
        try:
            return _build_scene(rng, cfg, tag)
        except _Retry:
            continue
    raise SceneError(f"could not build a '{tag}' scene for seed {seed} "
                     f"within {cfg.max_scene_tries} attempts; constraints too tight")


# ---------------------------------------------------------------------------
# sample serialization


def write_sample(path, sample: SceneSample) -> None:
    sample.validate()
    meta = {
        "version": 1,
        "target_index": sample.target_index,
        "split_tags": sorted(sample.split_tags),
        "command_text": sample.command_text(),
        "objects": [
            {"kind": o.kind, "color": o.color, "box": list(o.box),
             "depth": o.depth, "lane": o.lane}
            for o in sample.objects
        ],
    }
    entries = {
        "image": sample.image.astype(np.float32),
        "depth": sample.depth.astype(np.float32),
        "gt_mask": sample.gt_mask.astype(np.uint8),
        "command": np.asarray(sample.command, dtype=np.uint8),
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"),
                              dtype=np.uint8).copy(),
    }
    tensorio.write_container(path, entries)


def read_sample(path) -> SceneSample:
    entries = tensorio.read_container(path)
    for key in ("image", "depth", "gt_mask", "command", "meta"):
        if key not in entries:
            raise tensorio.FormatError(f"sample file missing {key!r} entry")
    image = entries["image"]
    if image.ndim != 3:
        raise SceneError(f"image: expected 3 dims, got {image.ndim}")
    meta = json.loads(entries["meta"].tobytes().decode("utf-8"))
    objects = [SceneObject(kind=o["kind"], color=o["color"], box=tuple(o["box"]),
                           depth=o["depth"], lane=o["lane"]) for o in meta["objects"]]
    sample = SceneSample(
        image=image.astype(np.float32),
        depth=entries["depth"].astype(np.float32),
        objects=objects,
        command=[int(t) for t in entries["command"]],
        target_index=int(meta["target_index"]),
        gt_mask=entries["gt_mask"].astype(np.uint8),
        split_tags=set(meta["split_tags"]),
    )
    sample.validate()
    return sample


# ---------------------------------------------------------------------------
# dataset builder


def _tag_schedule(n: int, cfg: SynthConfig, rng: Rng) -> list:
    counts = {}
    acc = 0
    for name, frac in cfg.tag_fractions:
        counts[name] = int(math.floor(frac * n))
        acc += counts[name]
    order = sorted(cfg.tag_fractions, key=lambda nf: -nf[1])
    i = 0
    while acc < n:
        counts[order[i % len(order)][0]] += 1
        acc += 1
        i += 1
    tags = [name for name, _ in cfg.tag_fractions for _ in range(counts[name])]
    return rng.shuffle(tags)


SPLITS = ("train", "val", "test")


def generate_dataset(n_train: int, n_val: int, n_test: int, cfg: SynthConfig,
                     seed: int, out_dir) -> dict:
    """Write manifest.json + samples/<split>/<id>.wgnd. Fully deterministic:
    the same arguments produce byte-identical trees."""
    cfg.validate()
    counts = {"train": n_train, "val": n_val, "test": n_test}
    manifest = {"format_version": 1, "seed": seed,
                "config": dataclasses.asdict(cfg), "splits": {}}
    manifest["config"]["tag_fractions"] = [list(nf) for nf in cfg.tag_fractions]
    for si, split in enumerate(SPLITS):
        n = counts[split]
        os.makedirs(os.path.join(out_dir, "samples", split), exist_ok=True)
        tags = _tag_schedule(n, cfg, Rng(seed, stream=(si + 1) * 1000003))
        files = []
        tag_counts = {t: 0 for t in TAGS}
        for i in range(n):
            sample_seed = Rng(seed, stream=(si << 32) | i).next_u64()
            sample = generate_scene(sample_seed, dataclasses.replace(cfg, force_tag=tags[i]))
            name = f"{split}_{i:06d}.wgnd"
            write_sample(os.path.join(out_dir, "samples", split, name), sample)
            files.append(name)
            tag_counts[tags[i]] += 1
        manifest["splits"][split] = {"count": n, "files": files, "tag_counts": tag_counts}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return manifest


def load_split(data_dir, split: str) -> list:
    with open(os.path.join(data_dir, "manifest.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if split not in manifest["splits"]:
        raise SceneError(f"split {split!r} not in manifest")
    out = []
    for name in manifest["splits"][split]["files"]:
        out.append(read_sample(os.path.join(data_dir, "samples", split, name)))
    return out
