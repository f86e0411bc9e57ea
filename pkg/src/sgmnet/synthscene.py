"""Procedural scene classes built from co-occurring motifs and spatial arrangement rules.

A scene class is a set of motifs (what co-occurs) plus rules that bind pairs of
motifs geometrically (where they sit relative to each other).  Two classes that
share motifs but differ in one rule have the same colour statistics and only
differ in layout, which is the case a pooled-feature metric cannot see.

On disk a dataset is a directory of 64×64 P6 images plus ``index.tsv`` with
lines ``relative-path<TAB>class-id<TAB>split<TAB>pixel-digest``; the digest
is a 16-hex-digit SHA-256 prefix of the raw pixels and is checked on load.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write_text
from .imageio import ImageFormatError, read_pnm, write_ppm

MOTIF_KINDS = ("stripe", "blob-cluster", "grid-of-squares", "wavy-band", "texture-field")
BAND_KINDS = ("stripe", "wavy-band")
RULE_KINDS = ("adjacent-on", "parallel-to", "surrounds", "scattered-near", "independent")
SPLITS = ("train", "val", "test")
INDEX_NAME = "index.tsv"


class ManifestError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class MotifSpec:
    kind: str
    color: tuple[int, int, int]
    jitter: int = 10
    size: tuple[int, int] = (4, 6)
    count: tuple[int, int] = (1, 1)

    def validate(self) -> None:
        if self.kind not in MOTIF_KINDS:
            raise ManifestError(f"unknown motif kind {self.kind!r}")
        if not all(0 <= c <= 255 for c in self.color):
            raise ManifestError(f"motif colour out of range: {self.color}")
        for lo, hi in (self.size, self.count):
            if lo < 1 or hi < lo:
                raise ManifestError(f"empty or invalid range ({lo}, {hi}) in {self.kind} motif")


@dataclass(frozen=True)
class ArrangementRule:
    """Places motif ``target`` relative to motif ``anchor``."""

    kind: str
    anchor: int = 0
    target: int = 1
    offset: float = 0.0
    angle: float = 0.0


@dataclass(frozen=True)
class SceneClassSpec:
    class_id: int
    motifs: tuple[MotifSpec, ...]
    rules: tuple[ArrangementRule, ...]
    noise: int = 8
    background: tuple[int, int, int] = (90, 110, 80)
    # False: every image of the class replays one random stream
    varied: bool = True

    def validate(self) -> None:
        if len(self.motifs) < 2:
            raise ManifestError(f"class {self.class_id}: needs at least 2 motifs")
        for m in self.motifs:
            m.validate()
        targets = set()
        for r in self.rules:
            if r.kind not in RULE_KINDS:
                raise ManifestError(f"class {self.class_id}: unknown arrangement rule {r.kind!r}")
            for idx in (r.anchor, r.target):
                if not 0 <= idx < len(self.motifs):
                    raise ManifestError(f"class {self.class_id}: rule {r.kind} references missing motif {idx}")
            if r.anchor == r.target:
                raise ManifestError(f"class {self.class_id}: rule {r.kind} binds motif {r.anchor} to itself")
            if r.target in targets:
                raise ManifestError(f"class {self.class_id}: motif {r.target} is placed by two rules")
            if self.motifs[r.target].kind in BAND_KINDS and r.kind in ("surrounds", "scattered-near"):
                raise ManifestError(f"class {self.class_id}: band motif cannot be placed by {r.kind}")
            targets.add(r.target)
        if not 0 <= self.noise <= 255:
            raise ManifestError(f"class {self.class_id}: noise {self.noise} out of range")


@dataclass
class DatasetManifest:
    classes: list[SceneClassSpec]
    splits: dict[str, list[int]]
    images_per_class: int = 60
    seed: int = 0
    image_size: int = 64

    def validate(self) -> None:
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate class ids")
        for c in self.classes:
            c.validate()
        seen: dict[int, str] = {}
        for split, members in self.splits.items():
            if split not in SPLITS:
                raise ManifestError(f"unknown split {split!r}")
            for cid in members:
                if cid not in ids:
                    raise ManifestError(f"split {split} lists unknown class {cid}")
                if cid in seen:
                    raise ManifestError(f"class {cid} appears in both {seen[cid]} and {split}")
                seen[cid] = split
        if self.images_per_class < 1:
            raise ManifestError("images_per_class must be positive")
        if self.image_size != 64:
            raise ManifestError("only 64×64 images are supported")

    def class_by_id(self, cid: int) -> SceneClassSpec:
        for c in self.classes:
            if c.class_id == cid:
                return c
        raise KeyError(cid)

    def split_of(self, cid: int) -> str | None:
        for split, members in self.splits.items():
            if cid in members:
                return split
        return None


# -- manifest text format ------------------------------------------------------------
#
#   seed = 0
#   images_per_class = 60
#   split.train = 0,1,2
#   class.0.background = 90,110,80
#   class.0.noise = 8
#   class.0.motif.0 = stripe color=200,200,190 jitter=10 size=5-7 count=1-1
#   class.0.rule.0 = adjacent-on anchor=0 target=1 offset=0 angle=0

def _rng_pair(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition("-")
    return int(lo), int(hi or lo)


def _triple(text: str) -> tuple[int, int, int]:
    vals = tuple(int(v) for v in text.split(","))
    if len(vals) != 3:
        raise ManifestError(f"expected r,g,b triple, got {text!r}")
    return vals  # type: ignore[return-value]


def _kv(tokens: list[str]) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ManifestError(f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def manifest_to_text(man: DatasetManifest) -> str:
    lines = [f"seed = {man.seed}", f"image_size = {man.image_size}",
             f"images_per_class = {man.images_per_class}"]
    for split in SPLITS:
        if split in man.splits:
            lines.append(f"split.{split} = {','.join(str(c) for c in man.splits[split])}")
    for c in man.classes:
        p = f"class.{c.class_id}"
        lines.append(f"{p}.background = {','.join(map(str, c.background))}")
        lines.append(f"{p}.noise = {c.noise}")
        lines.append(f"{p}.varied = {str(c.varied).lower()}")
        for i, m in enumerate(c.motifs):
            lines.append(f"{p}.motif.{i} = {m.kind} color={','.join(map(str, m.color))} jitter={m.jitter} "
                         f"size={m.size[0]}-{m.size[1]} count={m.count[0]}-{m.count[1]}")
        for i, r in enumerate(c.rules):
            lines.append(f"{p}.rule.{i} = {r.kind} anchor={r.anchor} target={r.target} "
                         f"offset={r.offset:g} angle={r.angle:g}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> DatasetManifest:
    top: dict[str, str] = {}
    per_class: dict[int, dict] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ManifestError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("class."):
            parts = key.split(".")
            try:
                cid = int(parts[1])
            except (IndexError, ValueError):
                raise ManifestError(f"line {lineno}: bad class key {key!r}") from None
            entry = per_class.setdefault(cid, {"motifs": {}, "rules": {}})
            field_name = parts[2] if len(parts) > 2 else ""
            try:
                if field_name == "motif":
                    kind, *rest = value.split()
                    kv = _kv(rest)
                    entry["motifs"][int(parts[3])] = MotifSpec(
                        kind=kind, color=_triple(kv["color"]), jitter=int(kv.get("jitter", 10)),
                        size=_rng_pair(kv.get("size", "4-6")), count=_rng_pair(kv.get("count", "1")))
                elif field_name == "rule":
                    kind, *rest = value.split()
                    kv = _kv(rest)
                    entry["rules"][int(parts[3])] = ArrangementRule(
                        kind=kind, anchor=int(kv.get("anchor", 0)), target=int(kv.get("target", 1)),
                        offset=float(kv.get("offset", 0)), angle=float(kv.get("angle", 0)))
                elif field_name == "background":
                    entry["background"] = _triple(value)
                elif field_name == "noise":
                    entry["noise"] = int(value)
                elif field_name == "varied":
                    entry["varied"] = value.lower() in ("1", "true", "yes")
                else:
                    raise ManifestError(f"line {lineno}: unknown class field {key!r}")
            except (KeyError, ValueError) as exc:
                if isinstance(exc, ManifestError):
                    raise
                raise ManifestError(f"line {lineno}: {exc}") from None
        else:
            top[key] = value
    classes = []
    for cid in sorted(per_class):
        e = per_class[cid]
        classes.append(SceneClassSpec(
            class_id=cid,
            motifs=tuple(e["motifs"][i] for i in sorted(e["motifs"])),
            rules=tuple(e["rules"][i] for i in sorted(e["rules"])),
            noise=e.get("noise", 8), background=e.get("background", (90, 110, 80)),
            varied=e.get("varied", True)))
    try:
        splits = {k.split(".", 1)[1]: [int(v) for v in val.split(",") if v.strip()]
                  for k, val in top.items() if k.startswith("split.")}
        man = DatasetManifest(classes=classes, splits=splits,
                              images_per_class=int(top.get("images_per_class", 60)),
                              seed=int(top.get("seed", 0)), image_size=int(top.get("image_size", 64)))
    except ValueError as exc:
        raise ManifestError(str(exc)) from None
    man.validate()
    return man


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return parse_manifest(path.read_text())


# -- arrangement pairs ------------------------------------------------------------------

def make_arrangement_pair(motifs, rule_a: ArrangementRule, rule_b: ArrangementRule,
                          class_ids: tuple[int, int], background=(90, 110, 80), noise: int = 8,
                          extra_rules: tuple[ArrangementRule, ...] = ()) -> tuple[SceneClassSpec, SceneClassSpec]:
    """Two classes with the same motif set whose layouts differ only in one rule."""
    if rule_a == rule_b:
        raise ValueError("arrangement pair needs two distinct rules")
    motifs = tuple(motifs)
    pair = tuple(SceneClassSpec(class_id=cid, motifs=motifs, rules=(rule,) + tuple(extra_rules),
                                noise=noise, background=background)
                 for cid, rule in zip(class_ids, (rule_a, rule_b)))
    for spec in pair:
        spec.validate()
    return pair  # type: ignore[return-value]


def default_manifest(seed: int = 0, images_per_class: int = 60) -> DatasetManifest:
    """24 classes: 12 train / 6 val / 6 test.  Every val and test class belongs to an
    arrangement pair; the train split holds four pairs plus four single classes."""
    M = MotifSpec
    R = ArrangementRule
    classes: list[SceneClassSpec] = []

    def pair(ids, motifs, ra, rb, bg, extra=()):
        classes.extend(make_arrangement_pair(motifs, ra, rb, ids, background=bg, extra_rules=extra))

    def single(cid, motifs, rules, bg):
        spec = SceneClassSpec(class_id=cid, motifs=tuple(motifs), rules=tuple(rules), background=bg)
        spec.validate()
        classes.append(spec)

    # train
    pair((0, 1), [M("stripe", (190, 190, 180), size=(6, 8)), M("grid-of-squares", (200, 40, 40), size=(3, 4), count=(5, 7))],
         R("adjacent-on"), R("scattered-near", offset=4), (70, 100, 60))
    pair((2, 3), [M("wavy-band", (40, 80, 200), size=(6, 8)), M("blob-cluster", (30, 140, 40), size=(2, 3), count=(4, 6))],
         R("adjacent-on"), R("independent"), (150, 130, 90))
    pair((4, 5), [M("stripe", (60, 60, 60), size=(5, 7)), M("stripe", (230, 220, 60), size=(3, 4))],
         R("parallel-to", offset=8), R("parallel-to", offset=8, angle=90), (120, 150, 110))
    pair((6, 7), [M("texture-field", (170, 90, 40), size=(12, 16)), M("blob-cluster", (240, 240, 240), size=(2, 3), count=(5, 7))],
         R("surrounds", offset=3), R("scattered-near", offset=10), (60, 90, 70))
    single(8, [M("blob-cluster", (20, 60, 140), size=(6, 9), count=(2, 3)), M("grid-of-squares", (160, 160, 170), size=(2, 3), count=(6, 9))],
           [R("surrounds", offset=2)], (80, 120, 60))
    single(9, [M("texture-field", (50, 120, 50), size=(14, 18), count=(1, 2)), M("stripe", (140, 110, 80), size=(3, 5))],
           [R("independent")], (110, 140, 80))
    single(10, [M("wavy-band", (220, 200, 150), size=(5, 7)), M("grid-of-squares", (100, 40, 30), size=(3, 4), count=(4, 6))],
           [R("parallel-to", offset=10)], (50, 70, 50))
    single(11, [M("grid-of-squares", (180, 80, 60), size=(4, 5), count=(8, 12)), M("blob-cluster", (40, 110, 40), size=(2, 4), count=(3, 5))],
           [R("scattered-near", offset=6)], (150, 150, 140))
    # val
    pair((12, 13), [M("stripe", (210, 210, 210), size=(6, 8)), M("blob-cluster", (200, 120, 30), size=(2, 3), count=(5, 7))],
         R("adjacent-on"), R("independent"), (90, 80, 60))
    pair((14, 15), [M("wavy-band", (30, 60, 160), size=(6, 8)), M("stripe", (150, 150, 140), size=(3, 4))],
         R("parallel-to", offset=9), R("parallel-to", offset=9, angle=90), (70, 120, 60))
    pair((16, 17), [M("blob-cluster", (100, 40, 120), size=(6, 8), count=(1, 1)), M("grid-of-squares", (230, 230, 100), size=(3, 3), count=(6, 8))],
         R("surrounds", offset=2), R("independent"), (120, 110, 100))
    # test
    pair((18, 19), [M("stripe", (170, 170, 160), size=(6, 8)), M("grid-of-squares", (230, 230, 230), size=(3, 4), count=(5, 7))],
         R("adjacent-on"), R("scattered-near", offset=6), (60, 110, 60))
    pair((20, 21), [M("wavy-band", (50, 90, 180), size=(6, 8)), M("blob-cluster", (60, 150, 60), size=(3, 4), count=(4, 6))],
         R("adjacent-on"), R("independent"), (170, 150, 110))
    pair((22, 23), [M("texture-field", (120, 60, 40), size=(12, 16)), M("grid-of-squares", (220, 60, 60), size=(3, 4), count=(5, 7))],
         R("surrounds", offset=3), R("scattered-near", offset=10), (80, 130, 90))
    classes.sort(key=lambda c: c.class_id)
    man = DatasetManifest(classes=classes,
                          splits={"train": list(range(12)), "val": list(range(12, 18)), "test": list(range(18, 24))},
                          images_per_class=images_per_class, seed=seed)
    man.validate()
    return man


# -- rendering ---------------------------------------------------------------------------

_YY, _XX = np.mgrid[0:64, 0:64].astype(np.float64) + 0.5


@dataclass
class _Placed:
    center: np.ndarray
    theta: float
    half_extent: float
    mask: np.ndarray = field(repr=False)


def _band_mask(center, theta, width, wavy=False, length=None):
    t = np.array([np.cos(theta), np.sin(theta)])
    dx, dy = _XX - center[0], _YY - center[1]
    along = dx * t[0] + dy * t[1]
    across = -dx * t[1] + dy * t[0]
    if wavy:
        across = across - 3.0 * np.sin(along * 2 * np.pi / 16.0)
    m = np.abs(across) <= width / 2
    if length is not None:
        m &= np.abs(along) <= length / 2
    return m


def _element_mask(kind, center, size):
    dx, dy = _XX - center[0], _YY - center[1]
    if kind == "blob-cluster":
        return dx * dx + dy * dy <= size * size
    half = size / 2
    return (np.abs(dx) <= half) & (np.abs(dy) <= half)


def _element_radius(kind, size):
    return float(size) if kind == "blob-cluster" else size / 2 * 1.4142


def _inside(center, r, margin=1.0):
    return margin + r <= center[0] <= 64 - margin - r and margin + r <= center[1] <= 64 - margin - r


class _Painter:
    def __init__(self, spec: SceneClassSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.occupied = np.zeros((64, 64), dtype=bool)
        bg = np.asarray(spec.background, dtype=np.float64)
        self.canvas = np.broadcast_to(bg, (64, 64, 3)).copy()

    def color(self, motif: MotifSpec) -> np.ndarray:
        j = motif.jitter
        base = np.asarray(motif.color, dtype=np.float64)
        return np.clip(base + self.rng.integers(-j, j + 1, 3), 0, 255)

    def paint(self, mask, color, kind):
        if kind == "texture-field":
            checker = ((np.floor(_XX / 2) + np.floor(_YY / 2)) % 2).astype(bool)
            dark = color * 0.55
            self.canvas[mask & checker] = color
            self.canvas[mask & ~checker] = dark
        else:
            self.canvas[mask] = color
        self.occupied |= mask

    def try_place(self, kind, size, propose, tries=40):
        """Draw candidate centres from ``propose`` until one fits inside and does not overlap."""
        r = _element_radius(kind, size)
        last = None
        for _ in range(tries):
            c = np.asarray(propose(), dtype=np.float64)
            last = c
            if not _inside(c, r):
                continue
            m = _element_mask(kind, c, size)
            if not (m & self.occupied).any():
                return c, m
        c = np.clip(last, r + 1, 63 - r)
        return c, _element_mask(kind, c, size)


def _render_anchor(p: _Painter, motif: MotifSpec) -> _Placed:
    rng = p.rng
    size = int(rng.integers(motif.size[0], motif.size[1] + 1))
    count = int(rng.integers(motif.count[0], motif.count[1] + 1))
    center = rng.uniform(22, 42, 2)
    theta = float(rng.uniform(0, np.pi))
    color = p.color(motif)
    if motif.kind in BAND_KINDS:
        mask = _band_mask(center, theta, size, wavy=motif.kind == "wavy-band")
        p.paint(mask, color, motif.kind)
        return _Placed(center, theta, size / 2, mask)
    total = np.zeros((64, 64), dtype=bool)
    spread = size * (1.2 if count > 1 else 0)
    for i in range(count):
        if motif.kind == "grid-of-squares":
            cols = int(np.ceil(np.sqrt(count)))
            off = (np.array([i % cols, i // cols]) - (cols - 1) / 2) * (size + 2)
            c = center + off
            m = _element_mask(motif.kind, c, size)
        else:
            c, m = p.try_place(motif.kind, size, lambda: center + rng.uniform(-spread, spread, 2))
        p.paint(m, color, motif.kind)
        total |= m
    ys, xs = np.nonzero(total)
    half = float(np.sqrt(((xs + 0.5 - center[0]) ** 2 + (ys + 0.5 - center[1]) ** 2).max())) if len(xs) else size
    return _Placed(center, theta, half, total)


def _render_target(p: _Painter, motif: MotifSpec, rule: ArrangementRule, anchor: _Placed) -> _Placed:
    rng = p.rng
    size = int(rng.integers(motif.size[0], motif.size[1] + 1))
    count = int(rng.integers(motif.count[0], motif.count[1] + 1))
    color = p.color(motif)
    t = np.array([np.cos(anchor.theta), np.sin(anchor.theta)])
    n = np.array([-t[1], t[0]])
    theta_b = anchor.theta + np.deg2rad(rule.angle)
    tb = np.array([np.cos(theta_b), np.sin(theta_b)])
    nb = np.array([-tb[1], tb[0]])
    r_b = _element_radius(motif.kind, size)

    if motif.kind in BAND_KINDS:
        if rule.kind == "independent":
            center, theta = rng.uniform(12, 52, 2), float(rng.uniform(0, np.pi))
        else:
            side = rng.choice([-1.0, 1.0])
            dist = anchor.half_extent + size / 2 + 1 + rule.offset
            center, theta = anchor.center + side * dist * n, float(theta_b)
        mask = _band_mask(center, theta, size, wavy=motif.kind == "wavy-band")
        mask &= ~p.occupied
        p.paint(mask, color, motif.kind)
        return _Placed(center, theta, size / 2, mask)

    total = np.zeros((64, 64), dtype=bool)
    phase = rng.uniform(0, 2 * np.pi)
    for i in range(count):
        if rule.kind == "adjacent-on":
            dist = anchor.half_extent + r_b + 1 + rule.offset

            def propose():
                return anchor.center + rng.uniform(-24, 24) * t + rng.choice([-1.0, 1.0]) * dist * n
        elif rule.kind == "parallel-to":
            dist = anchor.half_extent + r_b + 1 + rule.offset
            side = 1.0 if i % 2 == 0 else -1.0

            def propose():
                return anchor.center + side * dist * nb + rng.uniform(-22, 22) * tb
        elif rule.kind == "surrounds":
            radius = anchor.half_extent + r_b + 1 + rule.offset
            ang = phase + 2 * np.pi * i / count

            def propose():
                a = ang + rng.uniform(-0.15, 0.15)
                return anchor.center + radius * np.array([np.cos(a), np.sin(a)])
        elif rule.kind == "scattered-near":
            inner = anchor.half_extent + r_b + 1 + rule.offset
            outer = inner + 12

            def propose():
                a = rng.uniform(0, 2 * np.pi)
                rad = rng.uniform(inner, outer)
                return anchor.center + rad * np.array([np.cos(a), np.sin(a)])
        else:
            def propose():
                return rng.uniform(r_b + 1, 63 - r_b, 2)
        c, m = p.try_place(motif.kind, size, propose)
        p.paint(m, color, motif.kind)
        total |= m
    return _Placed(anchor.center, float(theta_b), r_b, total)


def image_rng(seed: int, class_id: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, class_id, index]))


def render_image(spec: SceneClassSpec, seed: int, index: int) -> np.ndarray:
    """Render one 64×64×3 uint8 image; fully determined by (spec, seed, index)."""
    rng = image_rng(seed, spec.class_id, index if spec.varied else 0)
    p = _Painter(spec, rng)
    placed: dict[int, _Placed] = {}
    by_target = {r.target: r for r in spec.rules}
    order = [i for i in range(len(spec.motifs)) if i not in by_target]
    pending = [i for i in range(len(spec.motifs)) if i in by_target]
    while pending:
        progressed = False
        for i in list(pending):
            if by_target[i].anchor in placed or by_target[i].anchor in order:
                order.append(i)
                pending.remove(i)
                progressed = True
        if not progressed:
            raise ManifestError(f"class {spec.class_id}: circular arrangement rules")
    for i in order:
        motif = spec.motifs[i]
        if i in by_target:
            placed[i] = _render_target(p, motif, by_target[i], placed[by_target[i].anchor])
        else:
            placed[i] = _render_anchor(p, motif)
    img = p.canvas
    if spec.noise:
        img = img + rng.integers(-spec.noise, spec.noise + 1, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# -- dataset IO ----------------------------------------------------------------------------

def _image_relpath(cid: int, idx: int) -> str:
    return f"c{cid:03d}/img{idx:04d}.ppm"


def _render_job(args):
    spec, seed, idx, out = args
    img = render_image(spec, seed, idx)
    write_ppm(Path(out) / _image_relpath(spec.class_id, idx), img)
    return hashlib.sha256(img.tobytes()).hexdigest()[:16]


def generate_dataset(man: DatasetManifest, out_dir, workers: int = 1) -> Path:
    """Render every image of ``man`` into ``out_dir`` and write the index last."""
    man.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, man.seed, idx, str(out)) for spec in man.classes
            if man.split_of(spec.class_id) is not None for idx in range(man.images_per_class)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            digests = list(ex.map(_render_job, jobs, chunksize=16))
    else:
        digests = [_render_job(j) for j in jobs]
    lines = [f"{_image_relpath(spec.class_id, idx)}\t{spec.class_id}\t{man.split_of(spec.class_id)}\t{d}"
             for (spec, _, idx, _), d in zip(jobs, digests)]
    atomic_write_text(out / "manifest.txt", manifest_to_text(man))
    atomic_write_text(out / INDEX_NAME, "\n".join(lines) + "\n")
    return out


@dataclass
class SplitView:
    """Images of one split grouped by class id."""

    name: str
    images: np.ndarray  # (n, 3, 64, 64) float32 in [0, 1]
    labels: np.ndarray  # global class ids
    paths: list[str] = field(default_factory=list)

    @property
    def class_ids(self) -> list[int]:
        return sorted(set(int(c) for c in self.labels))

    def indices_by_class(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.labels == c) for c in self.class_ids}

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Dataset:
    root: Path
    splits: dict[str, SplitView]

    def __getitem__(self, split: str) -> SplitView:
        return self.splits[split]


def load_image(path) -> np.ndarray:
    """PPM file -> (3, 64, 64) float32 in [0, 1]."""
    img = read_pnm(path)
    if img.ndim != 3 or img.shape != (64, 64, 3):
        raise DataError(f"{path}: expected a 64×64 RGB image, got {img.shape}")
    return (img.astype(np.float32) / 255.0).transpose(2, 0, 1).copy()


def load_dataset(path) -> Dataset:
    root = Path(path)
    index = root / INDEX_NAME
    if not index.is_file():
        raise DataError(f"dataset index missing: {index}")
    grouped: dict[str, tuple[list, list, list]] = {}
    for lineno, line in enumerate(index.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise DataError(f"{index}:{lineno}: malformed index line")
        rel, cid, split = parts[0], int(parts[1]), parts[2]
        try:
            raw = read_pnm(root / rel)
        except (OSError, ImageFormatError) as exc:
            raise DataError(f"{root / rel}: {exc}") from exc
        if raw.shape != (64, 64, 3):
            raise DataError(f"{root / rel}: expected 64×64 RGB, got {raw.shape}")
        if len(parts) > 3 and hashlib.sha256(raw.tobytes()).hexdigest()[:16] != parts[3]:
            raise DataError(f"{root / rel}: checksum mismatch")
        imgs, labels, paths = grouped.setdefault(split, ([], [], []))
        imgs.append((raw.astype(np.float32) / 255.0).transpose(2, 0, 1))
        labels.append(cid)
        paths.append(rel)
    owner: dict[int, str] = {}
    for split, (_, labels, _) in grouped.items():
        for cid in set(labels):
            if cid in owner and owner[cid] != split:
                raise DataError(f"class {cid} appears in splits {owner[cid]} and {split}")
            owner[cid] = split
    views = {s: SplitView(s, np.stack(i).astype(np.float32), np.asarray(l, dtype=np.int64), p)
             for s, (i, l, p) in grouped.items()}
    return Dataset(root, views)


def color_histogram(img: np.ndarray, bins: int = 16) -> np.ndarray:
    """Per-channel normalised histogram of a uint8 H×W×3 image, concatenated (3·bins,)."""
    out = [np.bincount(img[..., c].reshape(-1).astype(np.int64) * bins // 256, minlength=bins) for c in range(3)]
    h = np.concatenate(out).astype(np.float64)
    return h / h.sum() * 3


def with_noise(spec: SceneClassSpec, noise: int) -> SceneClassSpec:
    return dataclasses.replace(spec, noise=noise)


def manifest_digest(man: DatasetManifest) -> str:
    return hashlib.sha256(manifest_to_text(man).encode()).hexdigest()


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
