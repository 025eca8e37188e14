"""Expert-rating protocol backend: task construction with blinded model
labels, rating validation, append-only persistence, and de-anonymized export.

Tasks alternate original (even index) and rephrased (odd index) prompts. Each
task shows reference real images and three sets labeled A/B/C; the label-to-
model permutation is seeded per task and stored separately from the served
payload, so nothing a rater receives identifies a model. Ratings append to a
JSONL log with a monotone version; the latest (task, annotator) record wins.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ContractError
from .rng import Stream, derive_seed
from .synthdata import ImageSample, PromptRecord, paraphrase

ASPECTS = (
    "clinical_realism",
    "prompt_faithfulness",
    "detectability",
    "color_contrast",
    "intra_set_diversity",
    "confidence_of_use",
)
ASPECT_LABELS = {
    "clinical_realism": "Clinical Realism",
    "prompt_faithfulness": "Prompt Faithfulness",
    "detectability": "Detectability of Abnormality",
    "color_contrast": "Color and Contrast",
    "intra_set_diversity": "Intra-set Diversity",
    "confidence_of_use": "Confidence of Use (Clinical)",
}
SET_LABELS = ("A", "B", "C")
RANK_KEYS = ("A", "B", "C", "real")
N_TASKS = 40
IMAGES_PER_SET = 10
DEFAULT_REFERENCE_COUNT = 4


@dataclass
class AnnotationTask:
    id: str
    index: int
    prompt_id: str
    prompt_text: str
    prompt_kind: str                      # original | rephrased
    reference_images: list[str]
    sets: dict[str, list[str]]            # label -> image ids

    def public_payload(self) -> dict:
        return asdict(self)


class ValidationFailure(ContractError):
    def __init__(self, errors: list[dict]):
        self.errors = errors
        super().__init__(f"invalid rating: {errors}")


def validate_rating(payload: dict) -> list[dict]:
    """Field-level validation errors ([] when the record is acceptable)."""
    errors: list[dict] = []
    task_id = payload.get("task_id")
    if not isinstance(task_id, str) or not task_id:
        errors.append({"field": "task_id", "error": "missing task id"})
    if not isinstance(payload.get("annotator_id", "expert-1"), str):
        errors.append({"field": "annotator_id", "error": "must be a string"})
    scores = payload.get("scores")
    if not isinstance(scores, dict) or set(scores) != set(SET_LABELS):
        errors.append({"field": "scores", "error": f"need scores for sets {SET_LABELS}"})
    else:
        for label in SET_LABELS:
            entry = scores[label]
            if not isinstance(entry, dict) or set(entry) != set(ASPECTS):
                errors.append({"field": f"scores.{label}",
                               "error": f"need the six aspects {ASPECTS}"})
                continue
            for aspect in ASPECTS:
                v = entry[aspect]
                if not isinstance(v, int) or isinstance(v, bool) or not 0 <= v <= 10:
                    errors.append({"field": f"scores.{label}.{aspect}",
                                   "error": "score must be an integer in 0..10"})
    prefs = payload.get("global_preference")
    if not isinstance(prefs, dict) or set(prefs) != set(RANK_KEYS):
        errors.append({"field": "global_preference",
                       "error": f"need ranks for {RANK_KEYS}"})
    else:
        vals = [prefs[k] for k in RANK_KEYS]
        if any(not isinstance(v, int) or isinstance(v, bool) for v in vals) \
                or sorted(vals) != [1, 2, 3, 4]:
            errors.append({"field": "global_preference",
                           "error": "ranks must be a permutation of 1..4"})
    return errors


class AnnotationStore:
    """Filesystem-backed task and rating store.

    Layout under data_dir: tasks.json (public), permutations.json (private
    label->model map per task), ratings.jsonl (append-only, versioned),
    images/ (PNG payloads).
    """

    def __init__(self, data_dir: str | Path):
        self.root = Path(data_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "images").mkdir(exist_ok=True)
        self._write_lock = threading.Lock()
        self._tasks: dict[str, AnnotationTask] = {}
        self._perms: dict[str, dict[str, str]] = {}
        self._load()

    # ------------------------------------------------------------- plumbing

    def _load(self) -> None:
        tasks_file = self.root / "tasks.json"
        if tasks_file.exists():
            for d in json.loads(tasks_file.read_text()):
                self._tasks[d["id"]] = AnnotationTask(**d)
        perm_file = self.root / "permutations.json"
        if perm_file.exists():
            self._perms = json.loads(perm_file.read_text())

    def _persist_tasks(self) -> None:
        (self.root / "tasks.json").write_text(
            json.dumps([t.public_payload() for t in self._tasks.values()], indent=2))
        (self.root / "permutations.json").write_text(json.dumps(self._perms, indent=2))

    def image_path(self, image_id: str) -> Path:
        return self.root / "images" / f"{image_id}.png"

    def store_image(self, image_id: str, pixels: np.ndarray) -> None:
        Image.fromarray(pixels).save(self.image_path(image_id))

    # ---------------------------------------------------------------- tasks

    def build_tasks(self, originals: list[PromptRecord],
                    model_sets: dict[str, dict[str, list[ImageSample]]],
                    reference_images: dict[str, list[ImageSample]],
                    seed: int, n_tasks: int = N_TASKS,
                    images_per_set: int = IMAGES_PER_SET,
                    rephrasings: dict[str, PromptRecord] | None = None,
                    refs_per_task: int = DEFAULT_REFERENCE_COUNT) -> list[AnnotationTask]:
        """Alternate original/rephrased prompts; blind each task with its own
        seeded label permutation.

        model_sets maps model id -> {prompt_id: images}; prompt ids must cover
        the originals and their eval rephrasings (parent id + '-r00').
        `rephrasings` supplies the exact rephrased records the generation run
        used (keyed by parent id) so task text matches the served images;
        without it a seeded rephrase is derived here.
        """
        if len(model_sets) != 3:
            raise ConfigError(f"exactly 3 models required, got {len(model_sets)}")
        n_pairs = n_tasks // 2
        if len(originals) < n_pairs:
            raise ConfigError(f"need >= {n_pairs} original prompts, got {len(originals)}")
        model_ids = sorted(model_sets)
        tasks: list[AnnotationTask] = []
        for j in range(n_pairs):
            orig = originals[j]
            if rephrasings is not None and orig.id in rephrasings:
                reph = rephrasings[orig.id]
            else:
                reph = paraphrase(orig, 1, derive_seed(seed, "task-rephrase", orig.id))[0]
            for parity, rec in ((0, orig), (1, reph)):
                index = 2 * j + parity
                kind = "original" if parity == 0 else "rephrased"
                lookup = orig.id if parity == 0 else rec.id
                order = Stream(seed, "blind", index).permutation(3)
                perm = {SET_LABELS[i]: model_ids[order[i]] for i in range(3)}
                sets: dict[str, list[str]] = {}
                for label in SET_LABELS:
                    imgs = model_sets[perm[label]].get(lookup, [])
                    if len(imgs) < images_per_set:
                        raise ConfigError(
                            f"model {perm[label]!r} has {len(imgs)} images for "
                            f"{lookup!r}, need {images_per_set}")
                    ids = []
                    for im in imgs[:images_per_set]:
                        blind_id = f"t{index:02d}-{label}-{len(ids):02d}"
                        self.store_image(blind_id, im.pixels)
                        ids.append(blind_id)
                    sets[label] = ids
                refs = []
                for im in reference_images.get(orig.id, [])[:refs_per_task]:
                    ref_id = f"t{index:02d}-ref-{len(refs):02d}"
                    self.store_image(ref_id, im.pixels)
                    refs.append(ref_id)
                task = AnnotationTask(id=f"task-{index:02d}", index=index,
                                      prompt_id=rec.id, prompt_text=rec.text,
                                      prompt_kind=kind, reference_images=refs,
                                      sets=sets)
                tasks.append(task)
                self._tasks[task.id] = task
                self._perms[task.id] = perm
        self._persist_tasks()
        return tasks

    def tasks(self) -> list[AnnotationTask]:
        return sorted(self._tasks.values(), key=lambda t: t.index)

    def task(self, task_id: str) -> AnnotationTask | None:
        return self._tasks.get(task_id)

    # -------------------------------------------------------------- ratings

    def submit_rating(self, payload: dict) -> dict:
        errors = validate_rating(payload)
        if errors:
            raise ValidationFailure(errors)
        if payload["task_id"] not in self._tasks:
            raise KeyError(payload["task_id"])
        record = dict(payload)
        record.setdefault("annotator_id", "expert-1")
        with self._write_lock:
            record["version"] = self._next_version()
            line = json.dumps(record)
            with open(self.root / "ratings.jsonl", "a") as f:
                f.write(line + "\n")
                f.flush()
                os.fsync(f.fileno())
        return {"stored_id": f"{record['task_id']}:{record['annotator_id']}:v{record['version']}",
                "version": record["version"]}

    def _next_version(self) -> int:
        return len(self._raw_ratings()) + 1

    def _raw_ratings(self) -> list[dict]:
        path = self.root / "ratings.jsonl"
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]

    def latest_ratings(self, annotator: str | None = None) -> list[dict]:
        """Latest version per (task, annotator)."""
        latest: dict[tuple[str, str], dict] = {}
        for r in self._raw_ratings():
            if annotator and r.get("annotator_id") != annotator:
                continue
            latest[(r["task_id"], r.get("annotator_id", "expert-1"))] = r
        return sorted(latest.values(), key=lambda r: r["version"])

    # --------------------------------------------------------------- export

    def export_rows(self, annotator: str | None = None) -> list[dict]:
        """De-anonymized rows: one per (rating, model) plus a real-rank row."""
        rows = []
        for r in self.latest_ratings(annotator):
            task = self._tasks.get(r["task_id"])
            perm = self._perms.get(r["task_id"], {})
            kind = task.prompt_kind if task else ""
            for label in SET_LABELS:
                row = {"task_id": r["task_id"], "prompt_kind": kind,
                       "model_id": perm.get(label, label)}
                row.update({a: r["scores"][label][a] for a in ASPECTS})
                row["rank"] = r["global_preference"][label]
                rows.append(row)
            real_row = {"task_id": r["task_id"], "prompt_kind": kind,
                        "model_id": "real"}
            real_row.update({a: "" for a in ASPECTS})
            real_row["rank"] = r["global_preference"]["real"]
            rows.append(real_row)
        return rows

    def export_csv(self, annotator: str | None = None) -> str:
        header = ["task_id", "prompt_kind", "model_id", *ASPECTS, "rank"]
        lines = [",".join(header)]
        for row in self.export_rows(annotator):
            lines.append(",".join(str(row[h]) for h in header))
        return "\n".join(lines) + "\n"

    def export_summary(self, annotator: str | None = None) -> dict:
        """Per-model per-aspect means over completed ratings."""
        sums: dict[str, dict[str, list[float]]] = {}
        for row in self.export_rows(annotator):
            if row["model_id"] == "real":
                continue
            bucket = sums.setdefault(row["model_id"], {a: [] for a in ASPECTS})
            for a in ASPECTS:
                bucket[a].append(float(row[a]))
        return {model: {a: float(np.mean(v)) if v else None for a, v in aspects.items()}
                for model, aspects in sums.items()}
