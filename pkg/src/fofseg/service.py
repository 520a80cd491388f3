"""HTTP service wrapping the segmentation engine.

Sessions hold the online per-video state; clients stream frames one at a
time (PPM and .flo payloads, base64 in JSON) and get masks, posterior
maps and diagnostics back. Stateless endpoints expose the motion
library, the synthetic scene generator and the metrics scorer, so a thin
client can drive everything over HTTP.
"""

from __future__ import annotations

import base64
import threading
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__, flowio
from .metrics import score_frame, score_video
from .orientation import CameraIntrinsics, build_library
from .pipeline import (
    ConfigError,
    PipelineConfig,
    PipelineState,
    downscale_color,
    downscale_flow,
    downscale_mask,
    format_diagnostics,
    parse_config,
    process_frame,
)
from .synth import InvalidSceneError, flow_from_scene, parse_scene, render_frames

app = FastAPI(title="fofseg", version=__version__)

_sessions: dict[str, "_Session"] = {}
_sessions_lock = threading.Lock()


class _Session:
    def __init__(self, state: PipelineState, max_dim: int | None):
        self.state = state
        self.max_dim = max_dim
        self.lock = threading.Lock()


def _b64decode(data: str, what: str) -> bytes:
    try:
        return base64.b64decode(data, validate=True)
    except Exception as exc:
        raise HTTPException(status_code=422, detail=f"bad base64 in {what}: {exc}") from exc


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


class HealthResponse(BaseModel):
    status: str
    version: str


class SessionCreateRequest(BaseModel):
    mode: str = "fused"
    config_text: str = ""
    seed: int | None = None
    max_dim: int | None = Field(default=None, ge=8)


class SessionCreateResponse(BaseModel):
    session_id: str
    mode: str


class ComponentModel(BaseModel):
    label: int
    hypothesis: tuple[float, float, float] | None
    variance: float | None
    pixel_count: int


class ScoreModel(BaseModel):
    precision: float
    recall: float
    f_measure: float
    tp: int
    fp: int
    fn: int


class FrameRequest(BaseModel):
    frame_ppm: str
    flow_flo: str
    gt_pgm: str | None = None
    include_float: bool = False


class FrameResponse(BaseModel):
    frame_index: int
    width: int
    height: int
    mask_pgm: str
    posterior_pgm: str
    posterior_f32: str | None = None
    chosen_alpha: float
    num_components: int
    all_zero_motion: bool
    components: list[ComponentModel]
    diagnostics: str
    score: ScoreModel | None = None


class LibraryDumpRequest(BaseModel):
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    focal_length: float | None = Field(default=None, gt=0)


class LibraryDumpResponse(BaseModel):
    hypotheses: list[tuple[float, float, float]]
    fof_pgm: list[str]


class SynthRequest(BaseModel):
    spec_text: str


class FilePayload(BaseModel):
    name: str
    data: str


class SynthResponse(BaseModel):
    files: list[FilePayload]


class EvalPair(BaseModel):
    name: str
    pred_pgm: str
    gt_pgm: str


class EvalRequest(BaseModel):
    pairs: list[EvalPair]


class EvalFrameScore(BaseModel):
    name: str
    precision: float
    recall: float
    f_measure: float


class EvalResponse(BaseModel):
    per_frame: list[EvalFrameScore]
    mean_f: float


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


@app.post("/sessions", response_model=SessionCreateResponse)
def create_session(req: SessionCreateRequest) -> SessionCreateResponse:
    try:
        config = parse_config(req.config_text)
    except ConfigError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    if req.seed is not None:
        config.sampler.rng_seed = req.seed
    try:
        state = PipelineState(config=config, mode=req.mode)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    session_id = uuid.uuid4().hex
    with _sessions_lock:
        _sessions[session_id] = _Session(state, req.max_dim)
    return SessionCreateResponse(session_id=session_id, mode=req.mode)


def _get_session(session_id: str) -> _Session:
    with _sessions_lock:
        session = _sessions.get(session_id)
    if session is None:
        raise HTTPException(status_code=404, detail=f"no session {session_id}")
    return session


@app.post("/sessions/{session_id}/frames", response_model=FrameResponse)
def push_frame(session_id: str, req: FrameRequest) -> FrameResponse:
    session = _get_session(session_id)
    try:
        frame = flowio.decode_image(_b64decode(req.frame_ppm, "frame_ppm"))
        flow = flowio.decode_flo(_b64decode(req.flow_flo, "flow_flo"))
        gt = flowio.decode_mask(_b64decode(req.gt_pgm, "gt_pgm")) if req.gt_pgm else None
    except flowio.FlowIOError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    if session.max_dim is not None:
        frame = downscale_color(frame, session.max_dim)
        flow = downscale_flow(flow, session.max_dim)
        if gt is not None:
            gt = downscale_mask(gt, session.max_dim)

    with session.lock:
        try:
            out = process_frame(session.state, frame, flow)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    score = None
    if gt is not None:
        if gt.shape != out.mask.shape:
            raise HTTPException(status_code=422, detail="ground truth dimensions differ")
        s = score_frame(out.mask, np.where(gt > 0, 1, 0))
        score = ScoreModel(
            precision=s.precision, recall=s.recall, f_measure=s.f_measure,
            tp=s.tp, fp=s.fp, fn=s.fn,
        )

    h, w = out.mask.shape
    return FrameResponse(
        frame_index=out.frame_index,
        width=w,
        height=h,
        mask_pgm=_b64(flowio.encode_mask(out.mask)),
        posterior_pgm=_b64(flowio.encode_probability_map(out.posterior)),
        posterior_f32=_b64(flowio.encode_float_grid(out.posterior)) if req.include_float else None,
        chosen_alpha=out.result.chosen_alpha,
        num_components=out.result.num_components,
        all_zero_motion=out.result.all_zero_motion,
        components=[
            ComponentModel(
                label=c.label, hypothesis=c.hypothesis, variance=c.variance,
                pixel_count=c.pixel_count,
            )
            for c in out.result.components
        ],
        diagnostics=format_diagnostics(out),
        score=score,
    )


@app.delete("/sessions/{session_id}")
def delete_session(session_id: str) -> dict:
    with _sessions_lock:
        if _sessions.pop(session_id, None) is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id}")
    return {"deleted": session_id}


@app.post("/library/dump", response_model=LibraryDumpResponse)
def library_dump(req: LibraryDumpRequest) -> LibraryDumpResponse:
    intr = CameraIntrinsics.default(req.width, req.height, req.focal_length)
    library = build_library(intr, req.width, req.height)
    images = []
    for fld in library.fields:
        # quantize (-pi, pi] onto 0..255 for visual inspection
        q = np.floor((fld.angle + np.pi) / (2.0 * np.pi) * 255.0 + 0.5)
        q = np.clip(q, 0, 255).astype(np.uint8)
        q[~fld.valid] = 0
        images.append(_b64(flowio.encode_mask(q)))
    return LibraryDumpResponse(
        hypotheses=[tuple(float(x) for x in hyp) for hyp in library.hypotheses],
        fof_pgm=images,
    )


@app.post("/synth", response_model=SynthResponse)
def synth_scene(req: SynthRequest) -> SynthResponse:
    try:
        spec = parse_scene(req.spec_text)
        frames = render_frames(spec)
    except InvalidSceneError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    files = []
    for i, frame in enumerate(frames):
        flow, gt = flow_from_scene(spec, i)
        files.append(FilePayload(name=f"frame_{i:04d}.ppm", data=_b64(flowio.encode_image(frame))))
        files.append(FilePayload(name=f"flow_{i:04d}.flo", data=_b64(flowio.encode_flo(flow))))
        files.append(FilePayload(name=f"gt_{i:04d}.pgm", data=_b64(flowio.encode_mask(gt))))
    return SynthResponse(files=files)


@app.post("/eval", response_model=EvalResponse)
def eval_masks(req: EvalRequest) -> EvalResponse:
    if not req.pairs:
        raise HTTPException(status_code=422, detail="no mask pairs supplied")
    per_frame = []
    scores = []
    for pair in req.pairs:
        try:
            pred = flowio.decode_mask(_b64decode(pair.pred_pgm, pair.name))
            gt = flowio.decode_mask(_b64decode(pair.gt_pgm, pair.name))
        except flowio.FlowIOError as exc:
            raise HTTPException(status_code=422, detail=f"{pair.name}: {exc}") from exc
        if pred.shape != gt.shape:
            raise HTTPException(
                status_code=422, detail=f"{pair.name}: pred/gt dimensions differ"
            )
        s = score_frame(np.where(pred > 0, 1, 0), np.where(gt > 0, 1, 0))
        scores.append(s)
        per_frame.append(
            EvalFrameScore(
                name=pair.name, precision=s.precision, recall=s.recall, f_measure=s.f_measure
            )
        )
    return EvalResponse(per_frame=per_frame, mean_f=score_video(scores))
