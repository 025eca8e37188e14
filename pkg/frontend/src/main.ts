import { fetchTasks, submitRating } from "./api.js";
import { renderError, renderFieldErrors, renderTask } from "./render.js";
import { SessionState } from "./state.js";
import { toRecord } from "./validation.js";

async function boot(): Promise<void> {
  const container = document.getElementById("app");
  if (!container) throw new Error("missing #app container");

  let session: SessionState;
  try {
    session = new SessionState(await fetchTasks());
  } catch (err) {
    renderError(document, container, `Could not load tasks: ${err}`, () => void boot());
    return;
  }
  if (session.tasks.length === 0) {
    container.textContent = "No tasks available.";
    return;
  }

  const show = () => {
    const task = session.currentTask;
    if (!task) {
      container.textContent = "All tasks submitted. Thank you.";
      return;
    }
    const draft = session.draftFor(task.id);
    renderTask(document, container, task, draft, {
      onDraftChanged: d => session.saveDraft(d),
      onSubmit: async d => {
        let result;
        try {
          result = await submitRating(toRecord(d));
        } catch (err) {
          // network failure: draft stays in local storage, offer resubmit
          renderError(document, container, `Submit failed: ${err}. Your draft is saved.`,
                      () => show());
          return;
        }
        if ("status" in result && result.status === 422) {
          renderFieldErrors(document, container, result.errors);
          return;
        }
        session.markSubmitted(task.id);
        session.advance();
        show();
      },
      onBack: () => {
        session.back();
        show();
      },
    });
  };
  show();
}

document.addEventListener("DOMContentLoaded", () => void boot());
