"""HTTP service: the /api/v1 surface over the occasion service.

Uploads are multipart (two image parts plus one JSON metadata part).
Every error response uses the closed-code envelope from ``errors``;
FastAPI's own validation errors are rewritten into it so no declared
error case surfaces in a different shape.
"""
from __future__ import annotations

import io
import json
import logging
import time

from fastapi import Depends, FastAPI, File, Form, Request, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from PIL import Image

from .. import analysis, fooddb, storage
from ..model import IllegalTransition, LifecycleState, UnknownPrediction
from ..storage import NotFound, OccasionRecord, Store, StoreUnavailable, VersionConflict
from . import errors
from .config import ServerConfig
from .errors import ApiError, PayloadTooLarge, ValidationFailed
from .service import OccasionService

request_logger = logging.getLogger("foodstudy.server.requests")

API_PREFIX = "/api/v1"


def _to_api_error(exc: Exception) -> ApiError:
    if isinstance(exc, ApiError):
        return exc
    if isinstance(exc, ValidationFailed):
        return ApiError(422, errors.VALIDATION_FAILED, str(exc), {"violations": exc.violations})
    if isinstance(exc, UnknownPrediction):
        return ApiError(422, errors.VALIDATION_FAILED, str(exc), None)
    if isinstance(exc, IllegalTransition):
        return ApiError(409, errors.ILLEGAL_TRANSITION, str(exc), None)
    if isinstance(exc, VersionConflict):
        return ApiError(
            409, errors.VERSION_CONFLICT, str(exc), {"stored_version": exc.stored_version}
        )
    if isinstance(exc, NotFound):
        return ApiError(404, errors.NOT_FOUND, str(exc), None)
    if isinstance(exc, PayloadTooLarge):
        return ApiError(
            413, errors.PAYLOAD_TOO_LARGE, str(exc),
            {"field": exc.field, "limit": exc.limit},
        )
    if isinstance(exc, analysis.SidecarMissing):
        return ApiError(422, errors.SIDECAR_MISSING, str(exc), None)
    if isinstance(exc, analysis.SidecarInvalid):
        return ApiError(422, errors.VALIDATION_FAILED, str(exc), None)
    if isinstance(exc, StoreUnavailable):
        return ApiError(503, errors.STORE_UNAVAILABLE, str(exc), None)
    raise exc


def _blob_urls(content_hash: str) -> dict:
    return {
        "url": f"{API_PREFIX}/blobs/{content_hash}",
        "preview_url": f"{API_PREFIX}/blobs/{content_hash}/preview",
    }


def _image_payload(capture) -> dict | None:
    if capture is None:
        return None
    data = capture.to_dict()
    data.update(_blob_urls(capture.content_hash))
    return data


def _detail_payload(record: OccasionRecord) -> dict:
    occ = record.occasion
    return {
        "occasion_id": occ.occasion_id,
        "participant_id": occ.participant_id,
        "study_id": occ.study_id,
        "state": occ.state.value,
        "version": occ.version,
        "finalized": occ.state is LifecycleState.FINALIZED,
        "finalized_by": record.finalized_by,
        "before": _image_payload(occ.before),
        "after": _image_payload(occ.after),
        "metadata": occ.metadata.to_dict(),
        "participant_confirmed": [c.to_dict() for c in record.confirmed],
        "review": None if record.review is None else record.review.to_dict(),
        "researcher_annotations": [a.to_dict() for a in record.annotations],
        "energy_estimate": None if record.estimate is None else record.estimate.to_dict(),
    }


def create_app(
    config: ServerConfig,
    store: Store | None = None,
    food_db: fooddb.FoodDatabase | None = None,
) -> FastAPI:
    store = store if store is not None else Store(config.data_dir)
    if food_db is None:
        if config.food_list_path is not None:
            food_db = fooddb.load_food_list(config.food_list_path)
        else:
            food_db = fooddb.FoodDatabase([])
    service = OccasionService(
        store=store,
        food_db=food_db,
        analyzer=config.analyzer,
        synchronous_analysis=config.synchronous_analysis,
        max_image_bytes=config.max_image_bytes,
    )

    app = FastAPI(title="foodstudy", openapi_url=None, docs_url=None, redoc_url=None)
    app.state.config = config
    app.state.store = store
    app.state.service = service

    # -- auth -----------------------------------------------------------

    open_mode = config.participant_token is None and config.researcher_token is None

    def _bearer(request: Request) -> str | None:
        header = request.headers.get("authorization", "")
        if header.lower().startswith("bearer "):
            return header[7:].strip()
        return None

    def require_participant(request: Request) -> None:
        if open_mode:
            return
        token = _bearer(request)
        if token is None:
            raise ApiError(401, errors.UNAUTHORIZED, "missing bearer token", None)
        if token not in (config.participant_token, config.researcher_token):
            raise ApiError(403, errors.FORBIDDEN, "token not valid for this operation", None)

    def require_researcher(request: Request) -> None:
        if open_mode:
            return
        token = _bearer(request)
        if token is None:
            raise ApiError(401, errors.UNAUTHORIZED, "missing bearer token", None)
        if token != config.researcher_token:
            raise ApiError(403, errors.FORBIDDEN, "researcher token required", None)

    # -- error envelope and request log ----------------------------------

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content=exc.to_dict())

    for exc_type in (
        ValidationFailed, UnknownPrediction, IllegalTransition, VersionConflict,
        NotFound, PayloadTooLarge, analysis.SidecarMissing, analysis.SidecarInvalid,
        StoreUnavailable,
    ):
        @app.exception_handler(exc_type)
        async def handle_domain_error(request: Request, exc: Exception):
            api = _to_api_error(exc)
            return JSONResponse(status_code=api.status, content=api.to_dict())

    @app.exception_handler(RequestValidationError)
    async def handle_request_validation(request: Request, exc: RequestValidationError):
        fields = []
        for err in exc.errors():
            loc = [str(part) for part in err.get("loc", ()) if part != "body"]
            fields.append(".".join(loc) or "body")
        api = ApiError(422, errors.VALIDATION_FAILED, "request validation failed",
                       {"violations": fields})
        return JSONResponse(status_code=api.status, content=api.to_dict())

    @app.middleware("http")
    async def log_requests(request: Request, call_next):
        started = time.monotonic()
        response = await call_next(request)
        request_logger.info(json.dumps({
            "method": request.method,
            "path": request.url.path,
            "status": response.status_code,
            "duration_ms": round((time.monotonic() - started) * 1000, 2),
        }))
        return response

    # -- endpoints -------------------------------------------------------

    @app.get(API_PREFIX + "/health")
    def health():
        return {"status": "ok"}

    @app.post(API_PREFIX + "/occasions", status_code=201)
    async def upload_occasion(
        request: Request,
        participant_id: str = Form(""),
        study_id: str = Form(""),
        idempotency_key: str = Form(""),
        before: UploadFile | None = File(None),
        after: UploadFile | None = File(None),
        metadata: UploadFile | None = File(None),
        _auth: None = Depends(require_participant),
    ):
        before_bytes = await before.read() if before is not None else None
        after_bytes = await after.read() if after is not None else None
        if metadata is None:
            raise ValidationFailed(["metadata"])
        try:
            metadata_data = json.loads(await metadata.read())
        except (json.JSONDecodeError, UnicodeDecodeError):
            raise ValidationFailed(["metadata"]) from None
        if not isinstance(metadata_data, dict):
            raise ValidationFailed(["metadata"])
        response, replayed = service.create_occasion(
            participant_id=participant_id,
            study_id=study_id,
            before_bytes=before_bytes,
            after_bytes=after_bytes,
            metadata_data=metadata_data,
            idempotency_key=idempotency_key or None,
        )
        if replayed:
            response = dict(response)
            response["replayed"] = True
            return JSONResponse(status_code=200, content=response)
        return response

    @app.get(API_PREFIX + "/occasions/{occasion_id}/preliminary")
    def preliminary_results(occasion_id: str, _auth: None = Depends(require_participant)):
        return service.preliminary(occasion_id)

    @app.post(API_PREFIX + "/occasions/{occasion_id}/review")
    async def participant_review(
        occasion_id: str, request: Request, _auth: None = Depends(require_participant)
    ):
        try:
            body = json.loads(await request.body())
        except json.JSONDecodeError:
            raise ValidationFailed(["body"]) from None
        record = service.submit_review(occasion_id, body)
        return {
            "occasion_id": occasion_id,
            "state": record.occasion.state.value,
            "version": record.occasion.version,
            "confirmed": [c.to_dict() for c in record.confirmed],
        }

    @app.get(API_PREFIX + "/occasions/{occasion_id}")
    def occasion_detail(occasion_id: str, _auth: None = Depends(require_participant)):
        return _detail_payload(service.detail(occasion_id))

    @app.put(API_PREFIX + "/occasions/{occasion_id}/annotations")
    async def put_annotations(
        occasion_id: str, request: Request, _auth: None = Depends(require_researcher)
    ):
        try:
            body = json.loads(await request.body())
        except json.JSONDecodeError:
            raise ValidationFailed(["body"]) from None
        if not isinstance(body, dict):
            raise ValidationFailed(["body"])
        expected_version = body.get("expected_version")
        if not isinstance(expected_version, int):
            raise ValidationFailed(["expected_version"])
        annotations = body.get("annotations")
        if not isinstance(annotations, list):
            raise ValidationFailed(["annotations"])
        record = service.save_annotations(
            occasion_id=occasion_id,
            expected_version=expected_version,
            initials=str(body.get("initials") or ""),
            annotations_data=annotations,
        )
        return {
            "occasion_id": occasion_id,
            "version": record.occasion.version,
            "annotations": [a.to_dict() for a in record.annotations],
        }

    @app.delete(API_PREFIX + "/occasions/{occasion_id}/annotations/{annotation_id}")
    def delete_annotation(
        occasion_id: str,
        annotation_id: str,
        expected_version: int,
        initials: str | None = None,
        _auth: None = Depends(require_researcher),
    ):
        record = service.delete_annotation(
            occasion_id=occasion_id,
            annotation_id=annotation_id,
            expected_version=expected_version,
            initials=initials,
        )
        return {"occasion_id": occasion_id, "version": record.occasion.version}

    @app.post(API_PREFIX + "/occasions/{occasion_id}/finalize")
    async def finalize(
        occasion_id: str, request: Request, _auth: None = Depends(require_researcher)
    ):
        try:
            body = json.loads(await request.body())
        except json.JSONDecodeError:
            raise ValidationFailed(["body"]) from None
        expected_version = body.get("expected_version")
        if not isinstance(expected_version, int):
            raise ValidationFailed(["expected_version"])
        record = service.finalize(
            occasion_id=occasion_id,
            expected_version=expected_version,
            initials=str(body.get("initials") or ""),
        )
        return {
            "occasion_id": occasion_id,
            "state": record.occasion.state.value,
            "version": record.occasion.version,
        }

    @app.get(API_PREFIX + "/foods")
    def search_foods(
        query: str = "",
        limit: int | None = None,
        _auth: None = Depends(require_participant),
    ):
        effective = config.search_limit_default if limit is None else limit
        items = service.search_foods(query, effective)
        return {"results": [i.to_dict() for i in items]}

    @app.get(API_PREFIX + "/foodlist")
    def food_list(_auth: None = Depends(require_participant)):
        return service.food_list()

    @app.get(API_PREFIX + "/participants/{participant_id}/occasions")
    def list_participant_occasions(
        participant_id: str, _auth: None = Depends(require_participant)
    ):
        summaries = service.list_for_participant(participant_id)
        return {
            "occasions": [
                {
                    "occasion_id": s.occasion_id,
                    "participant_id": s.participant_id,
                    "study_id": s.study_id,
                    "state": s.state.value,
                    "version": s.version,
                    "captured_at": s.captured_at.isoformat().replace("+00:00", "Z"),
                    "before_hash": s.before_hash,
                    "after_hash": s.after_hash,
                    "before_thumbnail_url": f"{API_PREFIX}/blobs/{s.before_hash}/preview",
                    "after_thumbnail_url": (
                        None if s.after_hash is None
                        else f"{API_PREFIX}/blobs/{s.after_hash}/preview"
                    ),
                }
                for s in summaries
            ]
        }

    @app.get(API_PREFIX + "/studies/{study_id}/export")
    def export(
        study_id: str, format: str = "json", _auth: None = Depends(require_researcher)
    ):
        if format == "json":
            content = service.export_json(study_id)
            return Response(
                content=content,
                media_type="application/json",
                headers={"Content-Disposition": f'attachment; filename="{study_id}.json"'},
            )
        if format == "csv":
            content = service.export_csv(study_id)
            return Response(
                content=content,
                media_type="text/csv",
                headers={"Content-Disposition": f'attachment; filename="{study_id}.csv"'},
            )
        raise ValidationFailed(["format"])

    @app.get(API_PREFIX + "/blobs/{content_hash}")
    def get_blob(content_hash: str, _auth: None = Depends(require_participant)):
        ref = store.get_blob_ref(content_hash)
        return Response(content=store.get_blob(content_hash), media_type=ref.media_type)

    @app.get(API_PREFIX + "/blobs/{content_hash}/preview")
    def get_blob_preview(
        content_hash: str, max_px: int = 200, _auth: None = Depends(require_participant)
    ):
        """Scaled-on-demand thumbnail; previews are never precomputed."""
        ref = store.get_blob_ref(content_hash)
        data = store.get_blob(content_hash)
        with Image.open(io.BytesIO(data)) as img:
            fmt = img.format or "PNG"
            img.thumbnail((max(1, max_px), max(1, max_px)))
            buf = io.BytesIO()
            img.save(buf, format=fmt)
        return Response(content=buf.getvalue(), media_type=ref.media_type)

    if config.ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=config.ui_dir, html=True), name="ui")

    return app
