"""HTTP facade over the annotation store.

Endpoints (JSON unless noted):
    GET  /tasks            blinded task list
    GET  /tasks/{id}       one task payload (image URLs under /images/)
    GET  /images/{id}      PNG bytes
    POST /ratings          rating record; 200 with stored id, 422 on invalid
    GET  /export           de-anonymized CSV (optional ?annotator=)
    GET  /export/summary   per-model per-aspect means

A static single-page UI is served from `ui_dir` when one is built.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse, PlainTextResponse
from fastapi.staticfiles import StaticFiles

from .annotation import AnnotationStore, ValidationFailure


def make_app(store: AnnotationStore, ui_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="annotation-service")

    @app.get("/tasks")
    def list_tasks():
        return [t.public_payload() for t in store.tasks()]

    @app.get("/tasks/{task_id}")
    def get_task(task_id: str):
        task = store.task(task_id)
        if task is None:
            return JSONResponse({"error": "unknown task"}, status_code=404)
        payload = task.public_payload()
        payload["image_base"] = "/images/"
        return payload

    @app.get("/images/{image_id}")
    def get_image(image_id: str):
        path = store.image_path(image_id)
        if not path.exists():
            return JSONResponse({"error": "unknown image"}, status_code=404)
        return FileResponse(path, media_type="image/png")

    @app.post("/ratings")
    async def post_rating(request: Request):
        payload = await request.json()
        try:
            stored = store.submit_rating(payload)
        except ValidationFailure as e:
            return JSONResponse({"errors": e.errors}, status_code=422)
        except KeyError:
            return JSONResponse({"error": "unknown task"}, status_code=404)
        return stored

    @app.get("/export")
    def export(annotator: str | None = None):
        return PlainTextResponse(store.export_csv(annotator), media_type="text/csv")

    @app.get("/export/summary")
    def export_summary(annotator: str | None = None):
        return store.export_summary(annotator)

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app


def serve(store: AnnotationStore, addr: str = "127.0.0.1:8800",
          ui_dir: str | Path | None = None) -> None:
    import uvicorn

    host, _, port = addr.rpartition(":")
    uvicorn.run(make_app(store, ui_dir), host=host or "127.0.0.1", port=int(port))
