import { RatingRecord, TaskPayload } from "./types.js";

export interface SubmitOk {
  stored_id: string;
  version: number;
}

export interface SubmitRejected {
  status: 422;
  errors: { field: string; error: string }[];
}

export async function fetchTasks(base = ""): Promise<TaskPayload[]> {
  const resp = await fetch(`${base}/tasks`);
  if (!resp.ok) throw new Error(`GET /tasks failed: ${resp.status}`);
  return resp.json();
}

export async function fetchTask(id: string, base = ""): Promise<TaskPayload> {
  const resp = await fetch(`${base}/tasks/${id}`);
  if (!resp.ok) throw new Error(`GET /tasks/${id} failed: ${resp.status}`);
  return resp.json();
}

export function imageUrl(imageId: string, base = ""): string {
  return `${base}/images/${imageId}`;
}

export async function submitRating(
  record: RatingRecord,
  base = "",
): Promise<SubmitOk | SubmitRejected> {
  const resp = await fetch(`${base}/ratings`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(record),
  });
  if (resp.status === 422) {
    const body = await resp.json();
    return { status: 422, errors: body.errors ?? [] };
  }
  if (!resp.ok) throw new Error(`POST /ratings failed: ${resp.status}`);
  return resp.json();
}
