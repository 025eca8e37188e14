export const SET_LABELS = ["A", "B", "C"] as const;
export type SetLabel = (typeof SET_LABELS)[number];

export const RANK_KEYS = ["A", "B", "C", "real"] as const;
export type RankKey = (typeof RANK_KEYS)[number];

export const ASPECTS = [
  "clinical_realism",
  "prompt_faithfulness",
  "detectability",
  "color_contrast",
  "intra_set_diversity",
  "confidence_of_use",
] as const;
export type Aspect = (typeof ASPECTS)[number];

// the six aspect labels shown to the expert, verbatim from the protocol
export const ASPECT_LABELS: Record<Aspect, string> = {
  clinical_realism: "Clinical Realism",
  prompt_faithfulness: "Prompt Faithfulness",
  detectability: "Detectability of Abnormality",
  color_contrast: "Color and Contrast",
  intra_set_diversity: "Intra-set Diversity",
  confidence_of_use: "Confidence of Use (Clinical)",
};

export interface TaskPayload {
  id: string;
  index: number;
  prompt_id: string;
  prompt_text: string;
  prompt_kind: "original" | "rephrased";
  reference_images: string[];
  sets: Record<SetLabel, string[]>;
}

export type ScoreDraft = Record<SetLabel, Partial<Record<Aspect, number>>>;

export interface RatingDraft {
  task_id: string;
  annotator_id: string;
  scores: ScoreDraft;
  // order[i] is the candidate at rank i+1 (1 = best)
  ranking: RankKey[];
}

export interface RatingRecord {
  task_id: string;
  annotator_id: string;
  scores: Record<SetLabel, Record<Aspect, number>>;
  global_preference: Record<RankKey, number>;
}
