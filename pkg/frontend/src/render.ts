import { imageUrl } from "./api.js";
import { RankOrder } from "./rank.js";
import {
  ASPECTS,
  ASPECT_LABELS,
  Aspect,
  RatingDraft,
  SET_LABELS,
  SetLabel,
  TaskPayload,
} from "./types.js";
import { isComplete, validateDraft } from "./validation.js";

export interface ViewHooks {
  onDraftChanged: (draft: RatingDraft) => void;
  onSubmit: (draft: RatingDraft) => void;
  onBack: () => void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  doc: Document,
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = doc.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function imageGrid(doc: Document, ids: string[], cls: string): HTMLElement {
  const grid = el(doc, "div", `grid ${cls}`);
  for (const id of ids) {
    const img = el(doc, "img", "thumb");
    img.src = imageUrl(id);
    img.alt = id;
    grid.appendChild(img);
  }
  return grid;
}

function stepper(
  doc: Document,
  label: SetLabel,
  aspect: Aspect,
  value: number | undefined,
  onChange: (v: number | undefined) => void,
): HTMLElement {
  const row = el(doc, "div", "stepper-row");
  row.appendChild(el(doc, "label", "aspect-label", ASPECT_LABELS[aspect]));
  const input = el(doc, "input") as HTMLInputElement;
  input.type = "number";
  input.min = "0";
  input.max = "10";
  input.step = "1";
  input.dataset.set = label;
  input.dataset.aspect = aspect;
  if (value !== undefined) input.value = String(value);

  const apply = (raw: string) => {
    if (raw === "") {
      onChange(undefined);
      return;
    }
    const v = Number(raw);
    // integer steppers: the discrete 0-10 scale, clamped before any network call
    if (!Number.isInteger(v)) {
      input.value = "";
      onChange(undefined);
      return;
    }
    const clamped = Math.min(10, Math.max(0, v));
    input.value = String(clamped);
    onChange(clamped);
  };
  input.addEventListener("change", () => apply(input.value));

  const minus = el(doc, "button", "step-btn", "−");
  minus.type = "button";
  minus.addEventListener("click", () => apply(String(Math.max(0, Number(input.value || "0") - 1))));
  const plus = el(doc, "button", "step-btn", "+");
  plus.type = "button";
  plus.addEventListener("click", () => apply(String(Math.min(10, Number(input.value || "-1") + 1))));

  row.appendChild(minus);
  row.appendChild(input);
  row.appendChild(plus);
  return row;
}

function rankWidget(doc: Document, draft: RatingDraft, onChange: () => void): HTMLElement {
  const box = el(doc, "div", "rank-widget");
  box.appendChild(el(doc, "h3", undefined, "Global Preference (1 = best)"));
  const list = el(doc, "ol", "rank-list");
  const order = new RankOrder(draft.ranking);

  const redraw = () => {
    draft.ranking = order.list;
    list.textContent = "";
    order.list.forEach((key, i) => {
      const item = el(doc, "li", "rank-item");
      item.draggable = true;
      item.dataset.key = key;
      item.appendChild(el(doc, "span", "rank-pos", `${i + 1}.`));
      item.appendChild(el(doc, "span", "rank-name", key === "real" ? "Real images" : `Set ${key}`));
      const up = el(doc, "button", "rank-btn", "↑");
      up.type = "button";
      up.addEventListener("click", () => {
        order.moveUp(key);
        redraw();
        onChange();
      });
      const down = el(doc, "button", "rank-btn", "↓");
      down.type = "button";
      down.addEventListener("click", () => {
        order.moveDown(key);
        redraw();
        onChange();
      });
      item.appendChild(up);
      item.appendChild(down);
      item.addEventListener("dragstart", ev => {
        ev.dataTransfer?.setData("text/plain", String(i));
      });
      item.addEventListener("dragover", ev => ev.preventDefault());
      item.addEventListener("drop", ev => {
        ev.preventDefault();
        const from = Number(ev.dataTransfer?.getData("text/plain"));
        if (!Number.isNaN(from)) {
          order.move(from, i);
          redraw();
          onChange();
        }
      });
      list.appendChild(item);
    });
  };
  redraw();
  box.appendChild(list);
  return box;
}

/** Render one task: reference images first, then sets A/B/C as 10-image
 * grids with the six aspect steppers each, then the rank widget and the
 * gated submit button. */
export function renderTask(
  doc: Document,
  container: HTMLElement,
  task: TaskPayload,
  draft: RatingDraft,
  hooks: ViewHooks,
): void {
  container.textContent = "";
  const head = el(doc, "div", "task-head");
  head.appendChild(el(doc, "h2", undefined, `Task ${task.index + 1}`));
  head.appendChild(el(doc, "p", `prompt-kind kind-${task.prompt_kind}`, task.prompt_kind));
  head.appendChild(el(doc, "p", "prompt-text", task.prompt_text));
  container.appendChild(head);

  const refBox = el(doc, "section", "reference");
  refBox.appendChild(el(doc, "h3", undefined, "Reference real images"));
  refBox.appendChild(imageGrid(doc, task.reference_images, "reference-grid"));
  container.appendChild(refBox);

  const submit = el(doc, "button", "submit-btn", "Submit rating") as HTMLButtonElement;
  submit.type = "button";
  const status = el(doc, "p", "status");

  const refresh = () => {
    const complete = isComplete(draft);
    submit.disabled = !complete;
    submit.classList.toggle("incomplete", !complete);
    if (!complete) {
      const missing = validateDraft(draft).length;
      status.textContent = `${missing} field(s) missing or invalid`;
    } else {
      status.textContent = "ready to submit";
    }
    hooks.onDraftChanged(draft);
  };

  for (const label of SET_LABELS) {
    const section = el(doc, "section", `model-set set-${label}`);
    section.appendChild(el(doc, "h3", undefined, `Set ${label}`));
    section.appendChild(imageGrid(doc, task.sets[label], "set-grid"));
    const form = el(doc, "div", "aspect-form");
    for (const aspect of ASPECTS) {
      form.appendChild(
        stepper(doc, label, aspect, draft.scores[label]?.[aspect], v => {
          if (v === undefined) {
            delete draft.scores[label][aspect];
          } else {
            draft.scores[label][aspect] = v;
          }
          refresh();
        }),
      );
    }
    section.appendChild(form);
    container.appendChild(section);
  }

  container.appendChild(rankWidget(doc, draft, refresh));

  const nav = el(doc, "div", "nav");
  const back = el(doc, "button", "back-btn", "← Back") as HTMLButtonElement;
  back.type = "button";
  back.addEventListener("click", () => hooks.onBack());
  submit.addEventListener("click", () => {
    if (isComplete(draft)) hooks.onSubmit(draft);
  });
  nav.appendChild(back);
  nav.appendChild(submit);
  nav.appendChild(status);
  container.appendChild(nav);
  refresh();
}

export function renderError(doc: Document, container: HTMLElement, message: string,
                            onRetry: () => void): void {
  const banner = el(doc, "div", "error-banner");
  banner.appendChild(el(doc, "p", undefined, message));
  const retry = el(doc, "button", "retry-btn", "Retry");
  retry.type = "button";
  retry.addEventListener("click", () => {
    banner.remove();
    onRetry();
  });
  banner.appendChild(retry);
  container.prepend(banner);
}

export function renderFieldErrors(doc: Document, container: HTMLElement,
                                  errors: { field: string; error: string }[]): void {
  container.querySelectorAll(".field-errors").forEach(n => n.remove());
  const box = el(doc, "ul", "field-errors");
  for (const e of errors) {
    box.appendChild(el(doc, "li", undefined, `${e.field}: ${e.error}`));
  }
  container.prepend(box);
}
