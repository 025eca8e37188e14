import {
  ASPECTS,
  RANK_KEYS,
  RatingDraft,
  RatingRecord,
  SET_LABELS,
  SetLabel,
} from "./types.js";

export interface FieldError {
  field: string;
  error: string;
}

export function isValidScore(v: unknown): v is number {
  return typeof v === "number" && Number.isInteger(v) && v >= 0 && v <= 10;
}

/** Client-side rules: a strict subset of the service's checks, so any draft
 * this accepts can never be rejected for bounds or permutation reasons. */
export function validateDraft(draft: RatingDraft): FieldError[] {
  const errors: FieldError[] = [];
  for (const label of SET_LABELS) {
    const entry = draft.scores[label] ?? {};
    for (const aspect of ASPECTS) {
      const v = entry[aspect];
      if (v === undefined) {
        errors.push({ field: `scores.${label}.${aspect}`, error: "missing" });
      } else if (!isValidScore(v)) {
        errors.push({
          field: `scores.${label}.${aspect}`,
          error: "score must be an integer in 0..10",
        });
      }
    }
  }
  const ranking = draft.ranking ?? [];
  const unique = new Set(ranking);
  if (
    ranking.length !== RANK_KEYS.length ||
    unique.size !== RANK_KEYS.length ||
    RANK_KEYS.some(k => !unique.has(k))
  ) {
    errors.push({
      field: "global_preference",
      error: "ranking must order each of A, B, C, real exactly once",
    });
  }
  return errors;
}

export function isComplete(draft: RatingDraft): boolean {
  return validateDraft(draft).length === 0;
}

/** Convert a complete draft into the wire format the service expects. */
export function toRecord(draft: RatingDraft): RatingRecord {
  const errors = validateDraft(draft);
  if (errors.length > 0) {
    throw new Error(`draft incomplete: ${errors.map(e => e.field).join(", ")}`);
  }
  const scores = {} as RatingRecord["scores"];
  for (const label of SET_LABELS) {
    scores[label] = { ...(draft.scores[label] as Record<string, number>) } as never;
  }
  const global_preference = {} as RatingRecord["global_preference"];
  draft.ranking.forEach((key, i) => {
    global_preference[key] = i + 1;
  });
  return {
    task_id: draft.task_id,
    annotator_id: draft.annotator_id,
    scores,
    global_preference,
  };
}

export function emptyDraft(taskId: string, annotator = "expert-1"): RatingDraft {
  const scores = {} as RatingDraft["scores"];
  for (const label of SET_LABELS) {
    scores[label as SetLabel] = {};
  }
  return {
    task_id: taskId,
    annotator_id: annotator,
    scores,
    ranking: [...RANK_KEYS],
  };
}
