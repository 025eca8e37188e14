"""Procedural image/prompt datasets with paraphrase augmentation.

Scenes are attribute-controlled 32x32 renders: a value-noise background in
the modality palette, filled ellipses with exact-color rims for findings,
and a gray instrument bar with a specular stripe. Backgrounds are quantized
to even channel values while overlay markers use odd ones, so tests can
count overlay pixels exactly.

Prompts come from a small grammar whose content words are fully determined
by the scene attributes; the paraphraser swaps verb/noun synonyms, flips
imperative to passive, and optionally prefixes politeness, leaving linker
and qualifier words untouched so paraphrases of distinct templates never
collide.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError
from .rng import Stream, derive_seed

FINDINGS = ("polyp", "clean", "instrument")
MODALITIES = ("endo", "xray")
HUE_CLASSES = ("warm", "cool", "dark")

VERBS = ("generate", "create", "produce")
NOUNS = ("image", "picture", "photo")
QUALITIES = ("", "clear", "detailed")
LINKERS = ("containing", "showing", "with")
# template id encodes (quality, mention modality, mention hue, linker)
N_TEMPLATES = len(QUALITIES) * 2 * 2 * len(LINKERS)  # 36

ENDO_RIM = (97, 31, 31)
XRAY_BLOB = (235, 235, 239)
INSTRUMENT_STRIPE = (225, 225, 231)

_PALETTES = {
    ("endo", "warm"): (182, 92, 82),
    ("endo", "cool"): (150, 72, 92),
    ("endo", "dark"): (122, 62, 62),
    ("xray", "warm"): (112, 112, 118),
    ("xray", "cool"): (92, 96, 106),
    ("xray", "dark"): (62, 62, 72),
}


@dataclass(frozen=True)
class SceneAttributes:
    finding: str
    count: int
    modality: str
    hue_class: str

    def __post_init__(self):
        if self.finding not in FINDINGS:
            raise ConfigError(f"unknown finding {self.finding!r}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.hue_class not in HUE_CLASSES:
            raise ConfigError(f"unknown hue class {self.hue_class!r}")
        if not 0 <= self.count <= 3:
            raise ConfigError(f"count {self.count} outside 0..3")
        if self.finding == "clean" and self.count != 0:
            raise ConfigError("clean scenes must have count 0")
        if self.finding != "clean" and self.count < 1:
            raise ConfigError(f"{self.finding} scenes need count >= 1")

    def key(self) -> str:
        return f"{self.finding}-{self.count}-{self.modality}-{self.hue_class}"


def all_attribute_combos(modality: str | None = None) -> list[SceneAttributes]:
    combos = []
    for mod in MODALITIES if modality is None else (modality,):
        for hue in HUE_CLASSES:
            combos.append(SceneAttributes("clean", 0, mod, hue))
            for finding in ("polyp", "instrument"):
                for count in (1, 2, 3):
                    combos.append(SceneAttributes(finding, count, mod, hue))
    return combos


@dataclass
class PromptRecord:
    id: str
    text: str
    attributes: SceneAttributes
    origin: str = "original"            # original | paraphrase
    parent_id: str | None = None


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray                  # (H, W, 3) uint8
    attributes: SceneAttributes
    prompt_ids: list[str] = field(default_factory=list)


@dataclass
class DatasetManifest:
    images: list[ImageSample]
    prompts: list[PromptRecord]
    train_ids: list[str]
    validation_ids: list[str]
    root_seed: int
    augmentation: str = "none"

    def image_by_id(self) -> dict[str, ImageSample]:
        return {im.id: im for im in self.images}

    def prompt_by_id(self) -> dict[str, PromptRecord]:
        return {p.id: p for p in self.prompts}

    def train_images(self) -> list[ImageSample]:
        byid = self.image_by_id()
        return [byid[i] for i in self.train_ids]

    def validation_images(self) -> list[ImageSample]:
        byid = self.image_by_id()
        return [byid[i] for i in self.validation_ids]


# ----------------------------------------------------------------- rendering


def _value_noise(stream: Stream, size: int, cells: int) -> np.ndarray:
    grid = stream.uniform((cells + 1, cells + 1))
    t = np.arange(size) * cells / size
    i0 = t.astype(int)
    fr = t - i0
    g00 = grid[np.ix_(i0, i0)]
    g01 = grid[np.ix_(i0, i0 + 1)]
    g10 = grid[np.ix_(i0 + 1, i0)]
    g11 = grid[np.ix_(i0 + 1, i0 + 1)]
    fy, fx = fr[:, None], fr[None, :]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def _paint_ellipse(px: np.ndarray, cy, cx, ry, rx, fill, rim=None):
    h, w = px.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    if rim is not None:
        px[d <= 1.0] = rim
        px[d <= 0.55] = fill
    else:
        px[d <= 1.0] = fill


def render_scene(attrs: SceneAttributes, seed: int, size: int = 32) -> ImageSample:
    stream = Stream(seed, "scene", attrs.key())
    base = np.array(_PALETTES[(attrs.modality, attrs.hue_class)], dtype=np.float64)
    noise = 0.6 * _value_noise(stream, size, 4) + 0.4 * _value_noise(stream, size, 8)
    px = base[None, None, :] * (0.65 + 0.55 * noise[:, :, None])
    px = np.clip(px, 0, 254).astype(np.uint8)
    px &= 0xFE  # background even-valued; overlays below use odd channels

    if attrs.finding == "polyp":
        for _ in range(attrs.count):
            cy = 5 + stream.uniform() * (size - 10)
            cx = 5 + stream.uniform() * (size - 10)
            ry = 2.5 + stream.uniform() * 3.5
            rx = 2.5 + stream.uniform() * 3.5
            if attrs.modality == "endo":
                fill = np.clip(base * 1.35, 0, 254).astype(np.uint8) & 0xFE
                _paint_ellipse(px, cy, cx, ry, rx, fill, rim=np.array(ENDO_RIM, np.uint8))
            else:
                _paint_ellipse(px, cy, cx, ry, rx, np.array(XRAY_BLOB, np.uint8))
    elif attrs.finding == "instrument":
        for _ in range(attrs.count):
            y0 = int(2 + stream.uniform() * (size - 12))
            x0 = int(2 + stream.uniform() * (size // 2))
            length = int(size * 0.55)
            px[y0:y0 + 5, x0:x0 + length] = (88, 88, 94)
            px[y0 + 2, x0:x0 + length] = INSTRUMENT_STRIPE

    img_id = f"img-{attrs.key()}-{seed & 0xFFFFFFFF:08x}"
    return ImageSample(id=img_id, pixels=px, attributes=attrs)


def count_marker_pixels(pixels: np.ndarray, marker: tuple[int, int, int]) -> int:
    return int(np.all(pixels == np.array(marker, dtype=np.uint8), axis=2).sum())


# ------------------------------------------------------------------- prompts


def _object_phrase(attrs: SceneAttributes) -> str:
    words = {1: "", 2: "two ", 3: "three "}
    if attrs.finding == "polyp":
        return {1: "a polyp", 2: "two polyps", 3: "three polyps"}[attrs.count]
    if attrs.finding == "instrument":
        return words[attrs.count] + "biopsy forceps"
    return "no findings"


def _modality_word(modality: str) -> str:
    return "endoscopy" if modality == "endo" else "radiography"


def render_prompt(attrs: SceneAttributes, template_id: int) -> PromptRecord:
    if not 0 <= template_id < N_TEMPLATES:
        raise ConfigError(f"unknown template {template_id}")
    quality = QUALITIES[template_id // 12]
    mention_mod = (template_id % 12) // 6
    mention_hue = (template_id % 6) // 3
    linker = LINKERS[template_id % 3]
    adjectives = " ".join(w for w in (
        quality,
        f"{attrs.hue_class}-toned" if mention_hue else "",
        _modality_word(attrs.modality) if mention_mod else "",
    ) if w)
    noun_phrase = (adjectives + " " if adjectives else "") + "image"
    article = "an" if noun_phrase[0] in "aeiou" else "a"
    text = f"generate {article} {noun_phrase} {linker} {_object_phrase(attrs)}"
    return PromptRecord(id=f"pr-{attrs.key()}-t{template_id:02d}", text=text, attributes=attrs)


def paraphrase(prompt: PromptRecord, k: int, seed: int) -> list[PromptRecord]:
    """Deterministic rule-based rewrites; attributes and linker words are
    preserved, so outputs of distinct base prompts stay distinct."""
    if k < 1:
        raise ContractError(f"k={k} must be >= 1")
    tokens = prompt.text.split()
    if tokens[0] not in VERBS:
        raise ContractError(f"cannot paraphrase non-imperative text: {prompt.text!r}")
    noun_pos = next((i for i, t in enumerate(tokens) if t in NOUNS), None)
    if noun_pos is None:
        raise ContractError(f"no known noun in {prompt.text!r}")

    variants: list[str] = []
    for verb in VERBS:
        for noun in NOUNS:
            body = tokens[1:]
            body[noun_pos - 1] = noun
            body[0] = "an" if body[1][0] in "aeiou" else "a"
            for passive in (False, True):
                if passive:
                    text = " ".join(body) + f" should be {verb}d"
                else:
                    text = f"{verb} " + " ".join(body)
                for polite in (False, True):
                    out = ("please " + text) if polite else text
                    if out != prompt.text and out not in variants:
                        variants.append(out)

    if k > len(variants):
        warnings.warn(f"paraphrase capacity {len(variants)} < k={k}; capping")
        k = len(variants)
    order = Stream(seed, "paraphrase", prompt.id).permutation(len(variants))
    return [
        PromptRecord(id=f"{prompt.id}-r{i:02d}", text=variants[order[i]],
                     attributes=prompt.attributes, origin="paraphrase",
                     parent_id=prompt.id)
        for i in range(k)
    ]


# ------------------------------------------------------------------ datasets


def build_dataset(n_images: int, seed: int, image_size: int = 32,
                  n_prompts: int = 50, modality: str | None = None) -> DatasetManifest:
    """Attribute-matched image/prompt corpus: a few attribute combos, ~10
    prompts each, every image linked to 7..14 prompts sharing its attributes."""
    if n_images < 20:
        raise ConfigError(f"n_images {n_images} < 20")
    stream = Stream(seed, "dataset")
    combos = all_attribute_combos(modality)
    n_combos = max(3, min(len(combos), round(n_prompts / 10)))
    chosen = [combos[i] for i in stream.choice(len(combos), n_combos)]
    per_combo = max(7, -(-n_prompts // n_combos))

    prompts: list[PromptRecord] = []
    combo_prompts: dict[str, list[str]] = {}
    for attrs in chosen:
        tids = sorted(stream.choice(N_TEMPLATES, per_combo))
        recs = [render_prompt(attrs, int(t)) for t in tids]
        prompts += recs
        combo_prompts[attrs.key()] = [r.id for r in recs]

    images: list[ImageSample] = []
    for i in range(n_images):
        attrs = chosen[i % n_combos]
        img = render_scene(attrs, derive_seed(seed, "img", i), size=image_size)
        img.id = f"img-{i:05d}"
        pool = combo_prompts[attrs.key()]
        n_links = stream.randint(7, min(14, len(pool)) + 1)
        img.prompt_ids = [pool[j] for j in sorted(stream.choice(len(pool), n_links))]
        images.append(img)

    return DatasetManifest(images=images, prompts=prompts,
                           train_ids=[im.id for im in images], validation_ids=[],
                           root_seed=seed)


def split_holdout(manifest: DatasetManifest, fraction: float = 0.10,
                  seed: int = 0) -> DatasetManifest:
    """Image-level split; prompts linked only to held-out images become
    validation-exclusive by construction."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"holdout fraction {fraction} outside (0,1)")
    ids = [im.id for im in manifest.images]
    k = round(fraction * len(ids))
    order = Stream(seed, "holdout").permutation(len(ids))
    val = sorted(ids[i] for i in order[:k])
    train = sorted(set(ids) - set(val))
    return DatasetManifest(images=manifest.images, prompts=manifest.prompts,
                           train_ids=train, validation_ids=val,
                           root_seed=manifest.root_seed,
                           augmentation=manifest.augmentation)


def validation_exclusive_prompts(manifest: DatasetManifest) -> list[str]:
    val = set(manifest.validation_ids)
    linked_train: set[str] = set()
    linked_val: set[str] = set()
    for im in manifest.images:
        dst = linked_val if im.id in val else linked_train
        dst.update(im.prompt_ids)
    return sorted(linked_val - linked_train)


def augment(manifest: DatasetManifest, strategy: str, fraction: float = 1.0,
            seed: int = 0, k: int = 3) -> DatasetManifest:
    """Apply one paraphrase strategy; pairing follows parents."""
    if strategy not in ("add", "substitute", "replace"):
        raise ConfigError(f"unknown strategy {strategy!r}")
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"fraction {fraction} outside [0,1]")
    originals = [p for p in manifest.prompts if p.origin == "original"]
    paras: dict[str, list[PromptRecord]] = {
        p.id: paraphrase(p, k, derive_seed(seed, "aug", p.id)) for p in originals
    }

    images = [ImageSample(im.id, im.pixels, im.attributes, list(im.prompt_ids))
              for im in manifest.images]

    if strategy == "add":
        prompts = list(originals) + [r for recs in paras.values() for r in recs]
        for im in images:
            extra = [r.id for pid in im.prompt_ids if pid in paras for r in paras[pid]]
            im.prompt_ids = im.prompt_ids + extra
    elif strategy == "substitute":
        n_swap = int(fraction * len(originals))
        order = Stream(seed, "substitute").permutation(len(originals))
        swapped = {originals[i].id for i in order[:n_swap]}
        prompts = []
        repl: dict[str, str] = {}
        for p in originals:
            if p.id in swapped:
                r = paras[p.id][0]
                prompts.append(r)
                repl[p.id] = r.id
            else:
                prompts.append(p)
        for im in images:
            im.prompt_ids = [repl.get(pid, pid) for pid in im.prompt_ids]
    else:  # replace
        prompts = [r for recs in paras.values() for r in recs]
        for im in images:
            im.prompt_ids = [r.id for pid in im.prompt_ids if pid in paras for r in paras[pid]]

    return DatasetManifest(images=images, prompts=prompts,
                           train_ids=list(manifest.train_ids),
                           validation_ids=list(manifest.validation_ids),
                           root_seed=manifest.root_seed, augmentation=strategy)


# ---------------------------------------------------------------- persistence


def _attrs_to_dict(a: SceneAttributes) -> dict:
    return asdict(a)


def _attrs_from_dict(d: dict) -> SceneAttributes:
    return SceneAttributes(**d)


def save_manifest(manifest: DatasetManifest, root: str | Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "prompts.jsonl", "w") as f:
        for p in manifest.prompts:
            f.write(json.dumps({"id": p.id, "text": p.text,
                                "attrs": _attrs_to_dict(p.attributes),
                                "origin": p.origin, "parent_id": p.parent_id}) + "\n")
    with open(root / "images.jsonl", "w") as f:
        for im in manifest.images:
            fname = f"images/{im.id}.png"
            Image.fromarray(im.pixels).save(root / fname)
            f.write(json.dumps({"id": im.id, "file": fname,
                                "attrs": _attrs_to_dict(im.attributes),
                                "prompt_ids": im.prompt_ids}) + "\n")
    (root / "split.json").write_text(json.dumps({
        "train": manifest.train_ids, "validation": manifest.validation_ids,
        "root_seed": manifest.root_seed, "augmentation": manifest.augmentation,
    }, indent=2))


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    prompts = []
    for line in (root / "prompts.jsonl").read_text().splitlines():
        d = json.loads(line)
        prompts.append(PromptRecord(id=d["id"], text=d["text"],
                                    attributes=_attrs_from_dict(d["attrs"]),
                                    origin=d["origin"], parent_id=d["parent_id"]))
    images = []
    for line in (root / "images.jsonl").read_text().splitlines():
        d = json.loads(line)
        px = np.asarray(Image.open(root / d["file"]).convert("RGB"), dtype=np.uint8)
        images.append(ImageSample(id=d["id"], pixels=px,
                                  attributes=_attrs_from_dict(d["attrs"]),
                                  prompt_ids=d["prompt_ids"]))
    split = json.loads((root / "split.json").read_text())
    return DatasetManifest(images=images, prompts=prompts,
                           train_ids=split["train"], validation_ids=split["validation"],
                           root_seed=split["root_seed"], augmentation=split["augmentation"])
