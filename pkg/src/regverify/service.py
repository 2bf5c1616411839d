"""HTTP layer for the operator review console.

Versioned JSON API under /v1 plus PNG rendering for the image assets.
Raw float grids stay server-side; clients only ever see 8-bit renderings
with a window/level applied, and heatmaps as alpha-blended color overlays.
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel, Field

from .dataset import DatasetManifest, load_pair
from .errors import (
    DependencyError,
    InvalidInputError,
    ProtocolError,
    ShortageError,
)
from .explain import ConformalCalibration, grad_cam, predict_set
from .geometry import RegistrationLabel
from .metrics import categorize
from .model import VerifierNet, predict_batch
from .study import (
    EventLog,
    ReviewService,
    StudyCase,
    StudyCondition,
    StudyPool,
    SurveyResponse,
    asset_case_id,
    export_csv_tables,
)


def build_study_pool(
    manifest: DatasetManifest,
    model: VerifierNet,
    calibration: ConformalCalibration,
    specimens: list[str],
    pool_dir: Path,
) -> StudyPool:
    """Score every sample of the given specimens and freeze the results.

    Writes heatmap float grids alongside a pool.json index; the service
    renders client PNGs from these at request time.
    """
    pool_dir = Path(pool_dir)
    (pool_dir / "heatmaps").mkdir(parents=True, exist_ok=True)
    records = [r for r in manifest.samples if r.specimen_id in set(specimens)]
    if not records:
        raise DependencyError([f"samples for specimens {specimens} in {manifest.root}"])
    pairs = [load_pair(manifest.root, r) for r in records]
    outputs = predict_batch(model, pairs)
    cases: dict[str, StudyCase] = {}
    for rec, pair, out in zip(records, pairs, outputs):
        case_id = f"{rec.specimen_id}/{rec.projection_id}/{rec.sample_id}"
        token = case_id.replace("/", "~")
        pset = predict_set(out.probability_pair, calibration)
        heatmap = grad_cam(model, pair)
        heatmap_rel = f"heatmaps/{token}.f32"
        (pool_dir / heatmap_rel).write_bytes(
            np.ascontiguousarray(heatmap.upsampled, dtype="<f4").tobytes()
        )
        cases[case_id] = StudyCase(
            case_id=case_id,
            xray_path=rec.xray_path,
            drr_path=rec.drr_path,
            heatmap_path=heatmap_rel,
            ai_prediction=out.predicted_label,
            ai_probability=out.probability_accept,
            set_labels=tuple(l.value for l in pset.labels),
            set_certain=pset.certain,
            set_fallback=pset.fallback,
            actual=rec.label,
            category=categorize(out.predicted_label, rec.label),
        )
    pool = StudyPool(
        cases=cases,
        data_root=str(manifest.root),
        pool_dir=str(pool_dir),
        image_dims=(manifest.geometry.image_height_px, manifest.geometry.image_width_px),
    )
    pool.save(pool_dir / "pool.json")
    return pool


def window_level_to_png(image: np.ndarray, window: float = 1.0, level: float = 0.5) -> bytes:
    """Map the intensity window [level - w/2, level + w/2] onto 8-bit gray."""
    lo = level - window / 2.0
    scaled = np.clip((image - lo) / window, 0.0, 1.0)
    buf = io.BytesIO()
    Image.fromarray((scaled * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def heatmap_to_png(grid: np.ndarray) -> bytes:
    """Color-mapped heatmap with alpha proportional to importance."""
    import matplotlib

    matplotlib.use("Agg")

    rgba = matplotlib.colormaps["jet"](np.clip(grid, 0.0, 1.0))
    rgba[..., 3] = np.clip(grid, 0.0, 1.0) * 0.8
    buf = io.BytesIO()
    Image.fromarray((rgba * 255).astype(np.uint8), mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()


class CreateSessionRequest(BaseModel):
    participant: str = Field(min_length=1)
    seed: int = 0


class DecisionRequest(BaseModel):
    case_id: str
    decision: str  # ACCEPT | REJECT
    client_latency_ms: float | None = None


class SurveyRequest(BaseModel):
    condition: str
    tlx: dict[str, int]
    ai_items: dict[str, int] = Field(default_factory=dict)
    free_text: str = ""


def create_app(
    service: ReviewService,
    frontend_dir: Path | None = None,
) -> FastAPI:
    app = FastAPI(title="regverify review service", version="1")
    pool = service.pool
    data_root = Path(pool.data_root)
    pool_dir = Path(pool.pool_dir) if pool.pool_dir else None

    def _not_found(msg: str):
        return HTTPException(status_code=404, detail=msg)

    @app.post("/v1/sessions")
    def create_session(req: CreateSessionRequest):
        try:
            session = service.create_session(req.participant, req.seed)
        except ShortageError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except InvalidInputError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {
            "session_id": session.session_id,
            "participant": session.participant,
            "condition_order": [c.value for c in session.condition_order],
            "cases_per_condition": {
                c.value: len(ids) for c, ids in session.case_lists.items()
            },
            "status": session.status(),
        }

    @app.get("/v1/sessions/{session_id}/next")
    def next_case(session_id: str):
        try:
            return service.next_case(session_id)
        except KeyError as exc:
            raise _not_found(str(exc))

    @app.post("/v1/sessions/{session_id}/decisions")
    def submit_decision(session_id: str, req: DecisionRequest):
        try:
            decision = RegistrationLabel(req.decision)
        except ValueError:
            raise HTTPException(status_code=422, detail=f"invalid decision {req.decision!r}")
        try:
            record = service.submit_decision(
                session_id, req.case_id, decision, req.client_latency_ms
            )
        except KeyError as exc:
            raise _not_found(str(exc))
        except ProtocolError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return {"status": "recorded", "case_id": record.case_id, "latency_ms": record.latency_ms}

    @app.post("/v1/sessions/{session_id}/surveys")
    def submit_survey(session_id: str, req: SurveyRequest):
        try:
            condition = StudyCondition(req.condition)
        except ValueError:
            raise HTTPException(status_code=422, detail=f"unknown condition {req.condition!r}")
        response = SurveyResponse(
            session_id=session_id,
            condition=condition,
            tlx=req.tlx,
            ai_items=req.ai_items,
            free_text=req.free_text,
        )
        try:
            service.submit_survey(session_id, response)
        except KeyError as exc:
            raise _not_found(str(exc))
        except ProtocolError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except InvalidInputError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"status": "recorded", "condition": condition.value}

    @app.get("/v1/sessions/{session_id}")
    def session_info(session_id: str):
        try:
            session = service.get_session(session_id)
        except KeyError as exc:
            raise _not_found(str(exc))
        current = session.current_condition()
        return {
            "session_id": session.session_id,
            "participant": session.participant,
            "condition_order": [c.value for c in session.condition_order],
            "current_condition": current.value if current else None,
            "status": session.status(),
        }

    @app.get("/v1/export")
    def export(
        format: str = Query("json", pattern="^(csv|json)$"),
        table: str = Query("decisions", pattern="^(decisions|surveys|conditions)$"),
    ):
        export_dict = service.export_results()
        if format == "json":
            return export_dict
        tables = export_csv_tables(export_dict)
        return Response(content=tables[table], media_type="text/csv")

    @app.get("/v1/assets/{token}/{name}")
    def asset(token: str, name: str):
        case = service.pool.cases.get(asset_case_id(token))
        if case is None:
            raise _not_found(f"unknown case {token!r}")
        dims = pool.image_dims
        if name == "xray.png":
            img = np.frombuffer((data_root / case.xray_path).read_bytes(), "<f4")
            return Response(window_level_to_png(img.reshape(dims)), media_type="image/png")
        if name == "drr.png":
            img = np.frombuffer((data_root / case.drr_path).read_bytes(), "<f4")
            return Response(window_level_to_png(img.reshape(dims)), media_type="image/png")
        if name == "heatmap.png":
            if case.heatmap_path is None or pool_dir is None:
                raise _not_found("no heatmap for this case")
            grid = np.frombuffer((pool_dir / case.heatmap_path).read_bytes(), "<f4")
            return Response(heatmap_to_png(grid.reshape(dims)), media_type="image/png")
        raise _not_found(f"unknown asset {name!r}")

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True), name="frontend")

    return app


def load_review_service(
    pool_path: Path,
    sessions_dir: Path,
    share_cases: bool = False,
    cases_per_category: int = 3,
    clock=None,
) -> ReviewService:
    pool = StudyPool.load(pool_path)
    kwargs = {}
    if clock is not None:
        kwargs["clock"] = clock
    return ReviewService(
        pool,
        EventLog(sessions_dir),
        cases_per_category=cases_per_category,
        share_cases_across_conditions=share_cases,
        **kwargs,
    )
