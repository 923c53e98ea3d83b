"""Annotation and prediction file handling for the three tasks.

Formats (line-oriented, canonical numeric precision of 3 decimals):

* actions: CSV with header ``clip_id,labels``; labels joined by ``;``
* grounding: JSON Lines ``{"video_id", "sentence", "start_s", "end_s"}``
* pose: JSON Lines ``{"image_id", "animal_class", "bbox": [x, y, h, w],
  "keypoints": [{"name", "x", "y", "visible"} x 23]}``

Parsers collect one diagnostic per bad line without aborting (strict mode
aborts on the first); serializers validate first and emit canonical bytes, so
parse(serialize(records)) is an identity on valid records and
serialize(parse(data)) is an identity on canonical files. A value is valid
only when it is exactly representable at 3 decimals, which is what makes the
round-trip laws exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, StratificationError, ValidationError
from .metrics import Interval

KEYPOINT_NAMES = (
    "head", "eye_left", "eye_right",
    "mouth_1", "mouth_2", "mouth_3", "mouth_4",
    "shoulder_left", "shoulder_right",
    "elbow_left", "elbow_right",
    "wrist_left", "wrist_right",
    "mid_torso",
    "hip_left", "hip_right",
    "knee_left", "knee_right",
    "ankle_left", "ankle_right",
    "tail_1", "tail_2", "tail_3",
)

ANIMAL_CLASSES = ("mammal", "amphibian", "reptile", "bird", "fish")


def is_canonical_number(v: float) -> bool:
    """True when ``v`` is finite and exactly representable at 3 decimals."""
    try:
        f = float(v)
    except (TypeError, ValueError):
        return False
    return np.isfinite(f) and f == round(f, 3)


def _fmt(v: float) -> str:
    return f"{float(v):.3f}"


@dataclass(frozen=True)
class ActionClipRecord:
    clip_id: str
    labels: frozenset[str]

    def validate(self, vocabulary: set[str] | None = None) -> None:
        if not self.clip_id:
            raise ValidationError("clip_id must be non-empty")
        if not self.labels:
            raise ValidationError(f"{self.clip_id}: needs at least one label")
        if any(not lab or ";" in lab or "," in lab for lab in self.labels):
            raise ValidationError(f"{self.clip_id}: labels must be non-empty and "
                                  "free of ';' and ','")
        if vocabulary is not None:
            unknown = sorted(self.labels - set(vocabulary))
            if unknown:
                raise ValidationError(f"{self.clip_id}: labels {unknown} outside "
                                      "the declared vocabulary")


@dataclass(frozen=True)
class GroundingRecord:
    video_id: str
    sentence: str
    span: Interval

    def validate(self) -> None:
        if not self.video_id:
            raise ValidationError("video_id must be non-empty")
        if not self.sentence:
            raise ValidationError(f"{self.video_id}: sentence must be non-empty")
        for v in (self.span.start, self.span.end):
            if not is_canonical_number(v):
                raise ValidationError(f"{self.video_id}: time {v!r} is not a "
                                      "3-decimal value")


@dataclass(frozen=True)
class PoseRecord:
    image_id: str
    animal_class: str
    bbox: tuple[float, float, float, float]  # x, y, height, width
    keypoints: tuple[tuple[str, float, float, bool], ...]

    def validate(self, image_size: tuple[float, float] | None = None) -> None:
        if not self.image_id:
            raise ValidationError("image_id must be non-empty")
        if self.animal_class not in ANIMAL_CLASSES:
            raise ValidationError(f"{self.image_id}: unknown animal class "
                                  f"{self.animal_class!r}")
        if len(self.bbox) != 4 or not all(is_canonical_number(v) for v in self.bbox):
            raise ValidationError(f"{self.image_id}: bbox must be four 3-decimal "
                                  "values")
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValidationError(f"{self.image_id}: bbox extents must be positive")
        names = tuple(kp[0] for kp in self.keypoints)
        if names != KEYPOINT_NAMES:
            missing = [n for n in KEYPOINT_NAMES if n not in names]
            raise ValidationError(
                f"{self.image_id}: keypoints must be exactly the canonical 23 in "
                f"order; missing or misordered: {missing or list(names)}")
        for name, x, y, visible in self.keypoints:
            if not (is_canonical_number(x) and is_canonical_number(y)):
                raise ValidationError(f"{self.image_id}: {name} coordinates must "
                                      "be 3-decimal values")
            if not isinstance(visible, bool):
                raise ValidationError(f"{self.image_id}: {name} visibility must "
                                      "be boolean")
            if visible and image_size is not None:
                height, width = image_size
                if not (0 <= x <= width and 0 <= y <= height):
                    raise ValidationError(f"{self.image_id}: visible {name} at "
                                          f"({x}, {y}) outside {width}x{height}")

    def arrays(self):
        """(pred-style keypoint array, visibility array, (height, width))."""
        pts = np.array([[x, y] for _, x, y, _ in self.keypoints])
        vis = np.array([v for _, _, _, v in self.keypoints], dtype=bool)
        return pts, vis, (self.bbox[2], self.bbox[3])


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _decode(data) -> str:
    if isinstance(data, bytes):
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ValidationError(f"file is not UTF-8: {exc}") from exc
    return data


def _data_lines(text: str, skip_header: bool = False):
    lines = text.split("\n")
    start = 0
    if skip_header and lines and lines[0].strip():
        start = 1
    for no, line in enumerate(lines[start:], start=start + 1):
        if line.strip():
            yield no, line


Diagnostics = list[tuple[int, str]]


def _run_parse(text, skip_header, parse_line, strict) -> tuple[list, Diagnostics]:
    records, diagnostics = [], []
    seen_ids: set[str] = set()
    for no, line in _data_lines(_decode(text), skip_header=skip_header):
        try:
            rec, rec_id = parse_line(line)
            if rec_id in seen_ids:
                raise ValidationError(f"duplicate id {rec_id!r}")
            seen_ids.add(rec_id)
            records.append(rec)
        except (ValidationError, InputError, ValueError, KeyError, TypeError) as exc:
            if strict:
                raise ValidationError(f"line {no}: {exc}") from exc
            diagnostics.append((no, str(exc)))
    return records, diagnostics


def parse_actions(data, vocabulary=None, strict: bool = False
                  ) -> tuple[list[ActionClipRecord], Diagnostics]:
    def line_parser(line: str):
        parts = line.rstrip("\n").split(",")
        if len(parts) != 2:
            raise ValidationError(f"expected 'clip_id,labels', got {line.strip()!r}")
        clip_id, labels_field = parts[0].strip(), parts[1].strip()
        labels = frozenset(l.strip() for l in labels_field.split(";") if l.strip())
        rec = ActionClipRecord(clip_id=clip_id, labels=labels)
        rec.validate(vocabulary=vocabulary)
        return rec, clip_id

    return _run_parse(data, True, line_parser, strict)


def parse_grounding(data, strict: bool = False
                    ) -> tuple[list[GroundingRecord], Diagnostics]:
    def line_parser(line: str):
        obj = json.loads(line)
        start, end = float(obj["start_s"]), float(obj["end_s"])
        if not (is_canonical_number(start) and is_canonical_number(end)):
            raise ValidationError("times must be 3-decimal values")
        if not 0 <= start < end:
            raise ValidationError(f"span [{start}, {end}] needs 0 <= start < end")
        rec = GroundingRecord(video_id=str(obj["video_id"]),
                              sentence=str(obj["sentence"]),
                              span=Interval(start, end))
        rec.validate()
        return rec, rec.video_id

    return _run_parse(data, False, line_parser, strict)


def parse_pose(data, image_size=None, strict: bool = False
               ) -> tuple[list[PoseRecord], Diagnostics]:
    def line_parser(line: str):
        obj = json.loads(line)
        kps = tuple((str(kp["name"]), float(kp["x"]), float(kp["y"]),
                     bool(kp["visible"])) for kp in obj["keypoints"])
        rec = PoseRecord(image_id=str(obj["image_id"]),
                         animal_class=str(obj["animal_class"]),
                         bbox=tuple(float(v) for v in obj["bbox"]),
                         keypoints=kps)
        rec.validate(image_size=image_size)
        return rec, rec.image_id

    return _run_parse(data, False, line_parser, strict)


# ---------------------------------------------------------------------------
# serialization (canonical form)
# ---------------------------------------------------------------------------


def serialize_actions(records, vocabulary=None) -> bytes:
    for rec in records:
        rec.validate(vocabulary=vocabulary)
    lines = ["clip_id,labels"]
    for rec in records:
        lines.append(f"{rec.clip_id},{';'.join(sorted(rec.labels))}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def serialize_grounding(records) -> bytes:
    for rec in records:
        rec.validate()
    lines = []
    for rec in records:
        lines.append('{"video_id": %s, "sentence": %s, "start_s": %s, "end_s": %s}'
                     % (json.dumps(rec.video_id), json.dumps(rec.sentence),
                        _fmt(rec.span.start), _fmt(rec.span.end)))
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def serialize_pose(records) -> bytes:
    for rec in records:
        rec.validate()
    lines = []
    for rec in records:
        kps = ", ".join(
            '{"name": %s, "x": %s, "y": %s, "visible": %s}'
            % (json.dumps(name), _fmt(x), _fmt(y), "true" if vis else "false")
            for name, x, y, vis in rec.keypoints)
        bbox = ", ".join(_fmt(v) for v in rec.bbox)
        lines.append('{"image_id": %s, "animal_class": %s, "bbox": [%s], '
                     '"keypoints": [%s]}'
                     % (json.dumps(rec.image_id), json.dumps(rec.animal_class),
                        bbox, kps))
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


# ---------------------------------------------------------------------------
# stratified splitting
# ---------------------------------------------------------------------------


@dataclass
class SplitAssignment:
    tags: list[str]  # "train" / "test" aligned with the input records
    ratio: float
    seed: int

    def train_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.tags) if t == "train"]

    def test_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.tags) if t == "test"]


def stratified_split(records: list[ActionClipRecord], ratio: float = 0.8,
                     seed: int = 0) -> SplitAssignment:
    """Iterative multi-label stratification.

    Repeatedly take the label with the fewest unassigned records and deal its
    records to whichever split still wants that label most, breaking ties by
    remaining global capacity and then by a seeded draw. Every class with at
    least 2 records keeps at least one test record.
    """
    if not 0 < ratio < 1:
        raise InputError(f"ratio must be in (0, 1), got {ratio}")
    if not records:
        raise InputError("cannot split zero records")
    counts: dict[str, int] = {}
    for rec in records:
        for lab in rec.labels:
            counts[lab] = counts.get(lab, 0) + 1
    thin = sorted(lab for lab, n in counts.items() if n < 2)
    if thin:
        raise StratificationError(f"classes with fewer than 2 records: {thin}")

    rng = np.random.default_rng(seed)
    n = len(records)
    # per-label demands; the test side keeps at least one of every label
    want = {"train": {}, "test": {}}
    for lab, cnt in counts.items():
        test_quota = max(1, int(np.floor((1 - ratio) * cnt + 0.5)))
        want["test"][lab] = test_quota
        want["train"][lab] = cnt - test_quota
    capacity = {"train": ratio * n, "test": (1 - ratio) * n}

    unassigned: dict[str, set[int]] = {lab: set() for lab in counts}
    for idx, rec in enumerate(records):
        for lab in rec.labels:
            unassigned[lab].add(idx)
    tags: list[str | None] = [None] * n

    def assign(idx: int, side: str) -> None:
        tags[idx] = side
        capacity[side] -= 1
        for lab in records[idx].labels:
            want[side][lab] -= 1
            unassigned[lab].discard(idx)

    while any(unassigned.values()):
        lab = min((l for l in unassigned if unassigned[l]),
                  key=lambda l: (len(unassigned[l]), l))
        for idx in sorted(unassigned[lab]):
            d_train, d_test = want["train"][lab], want["test"][lab]
            if d_train > d_test:
                side = "train"
            elif d_test > d_train:
                side = "test"
            elif capacity["train"] > capacity["test"]:
                side = "train"
            elif capacity["test"] > capacity["train"]:
                side = "test"
            else:
                side = "train" if rng.integers(2) == 0 else "test"
            assign(idx, side)
    leftovers = [i for i, t in enumerate(tags) if t is None]
    for idx in leftovers:  # records whose labels were all satisfied early
        side = "train" if capacity["train"] >= capacity["test"] else "test"
        assign(idx, side)
    _repair(records, tags, counts, ratio)
    return SplitAssignment(tags=list(tags), ratio=ratio, seed=seed)


def _repair(records, tags, counts, ratio) -> None:
    """Greedy local moves until every class's train share is within one
    record of the ratio (multi-label dealing alone cannot guarantee that)."""
    train_of = {lab: 0 for lab in counts}
    for rec, tag in zip(records, tags):
        if tag == "train":
            for lab in rec.labels:
                train_of[lab] += 1

    def violation(lab, train_count):
        gap = abs(train_count - ratio * counts[lab])
        return max(0.0, gap - 1.0)

    def total():
        return sum(violation(lab, train_of[lab]) for lab in counts)

    for _ in range(10 * len(records)):
        current = total()
        if current < 1e-12:
            break
        best_gain, best_idx = 0.0, None
        for idx, rec in enumerate(records):
            delta = -1 if tags[idx] == "train" else 1
            if delta == 1 and any(counts[lab] - (train_of[lab] + 1) < 1
                                  for lab in rec.labels):
                continue  # flipping would leave a class with no test records
            changed = sum(
                violation(lab, train_of[lab] + delta) - violation(lab, train_of[lab])
                for lab in rec.labels)
            if changed < best_gain - 1e-12:
                best_gain, best_idx = changed, idx
        if best_idx is None:
            break
        delta = -1 if tags[best_idx] == "train" else 1
        tags[best_idx] = "train" if delta == 1 else "test"
        for lab in records[best_idx].labels:
            train_of[lab] += delta
