"""FastAPI application wrapping the core package.

Every route is a thin binding from a request model to its handler; domain
errors map to HTTP 400 with the error message, schema violations surface as
FastAPI's standard 422 responses.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import PromptError
from . import handlers, schemas


def create_app() -> FastAPI:
    app = FastAPI(
        title="attnprompt",
        version=__version__,
        description="Train and evaluate attention-steering visual prompts.",
    )

    @app.exception_handler(PromptError)
    async def _prompt_error(_: Request, exc: PromptError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return handlers.service_version()

    @app.post("/synth-data", response_model=schemas.SynthDataResponse)
    def synth_data(req: schemas.SynthDataRequest):
        return handlers.handle_synth_data(req)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        return handlers.handle_train(req)

    @app.post("/eval/gain", response_model=schemas.GainResponse)
    def eval_gain(req: schemas.GainRequest):
        return handlers.handle_eval_gain(req)

    @app.post("/eval/hits", response_model=schemas.HitsResponse)
    def eval_hits(req: schemas.HitsRequest):
        return handlers.handle_eval_hits(req)

    @app.post("/eval/keypoints", response_model=schemas.KeypointsResponse)
    def eval_keypoints(req: schemas.KeypointsRequest):
        return handlers.handle_eval_keypoints(req)

    @app.post("/baseline", response_model=schemas.BaselineResponse)
    def baseline(req: schemas.BaselineRequest):
        return handlers.handle_baseline(req)

    @app.post("/render", response_model=schemas.RenderResponse)
    def render(req: schemas.RenderRequest):
        return handlers.handle_render(req)

    return app


app = create_app()
