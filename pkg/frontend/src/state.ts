import { RatingDraft, TaskPayload } from "./types.js";
import { emptyDraft } from "./validation.js";

const DRAFT_PREFIX = "medsynth-draft:";

/** Session over the ordered task list: current position, per-task drafts
 * (restored from localStorage across reloads), and submission marks. */
export class SessionState {
  tasks: TaskPayload[];
  current = 0;
  submitted = new Set<string>();
  private drafts = new Map<string, RatingDraft>();
  private storage: Storage | null;

  constructor(tasks: TaskPayload[], storage: Storage | null = defaultStorage()) {
    this.tasks = [...tasks].sort((a, b) => a.index - b.index);
    this.storage = storage;
  }

  get currentTask(): TaskPayload | undefined {
    return this.tasks[this.current];
  }

  draftFor(taskId: string): RatingDraft {
    let draft = this.drafts.get(taskId);
    if (!draft) {
      draft = this.restore(taskId) ?? emptyDraft(taskId);
      this.drafts.set(taskId, draft);
    }
    return draft;
  }

  saveDraft(draft: RatingDraft): void {
    this.drafts.set(draft.task_id, draft);
    this.storage?.setItem(DRAFT_PREFIX + draft.task_id, JSON.stringify(draft));
  }

  private restore(taskId: string): RatingDraft | null {
    const raw = this.storage?.getItem(DRAFT_PREFIX + taskId);
    if (!raw) return null;
    try {
      return JSON.parse(raw) as RatingDraft;
    } catch {
      return null;
    }
  }

  markSubmitted(taskId: string): void {
    this.submitted.add(taskId);
    this.storage?.removeItem(DRAFT_PREFIX + taskId);
  }

  advance(): boolean {
    if (this.current + 1 < this.tasks.length) {
      this.current += 1;
      return true;
    }
    return false;
  }

  back(): boolean {
    if (this.current > 0) {
      this.current -= 1;
      return true;
    }
    return false;
  }
}

function defaultStorage(): Storage | null {
  try {
    return typeof localStorage === "undefined" ? null : localStorage;
  } catch {
    return null;
  }
}
