"""HTTP front end for Healthfuse.

Request and response bodies use the canonical envelope encoding (sorted keys,
no whitespace); anything else is rejected with 400. Sessions come from a
two-round SCRAM exchange on ``POST /sessions`` and are presented as
``Authorization: Bearer <token>``.
"""

from __future__ import annotations

from typing import Any, Optional

from fastapi import FastAPI, File, Request, UploadFile
from fastapi.responses import Response

from .. import envelope
from ..errors import SwarmError
from ..model import DataCategory
from .records import MAX_RECORD_SIZE
from .service import Healthfuse

MEDIA_TYPE = "application/json"

STATUS = {
    "UNAUTHENTICATED": 401,
    "PROOF_MISMATCH": 401,
    "NONCE_MISMATCH": 401,
    "NOT_OWNER": 403,
    "NO_CONSENT": 403,
    "UNKNOWN_STAFF": 403,
    "LENGTH_OVERFLOW": 413,
    "STORE_UNAVAILABLE": 503,
    "ADAPTER_UNREACHABLE": 503,
}


def _status_for(code: str) -> int:
    if code in STATUS:
        return STATUS[code]
    if code.startswith("UNKNOWN_"):
        return 404
    if code.startswith("MALFORMED") or code in {"ENCODING", "EMPTY_CATEGORIES", "BAD_LAUNCH_FIELDS"}:
        return 400
    return 500


def reply(doc: Any, status: int = 200) -> Response:
    return Response(envelope.encode(doc), status_code=status, media_type=MEDIA_TYPE)


def create_app(service: Healthfuse) -> FastAPI:
    app = FastAPI(title="Healthfuse")
    app.state.service = service

    @app.exception_handler(SwarmError)
    def _swarm_error(_request: Request, exc: SwarmError) -> Response:
        return reply({"error": exc.code, "detail": exc.detail}, _status_for(exc.code))

    async def body(request: Request) -> dict:
        doc = envelope.decode(await request.body())
        if not isinstance(doc, dict):
            raise SwarmError("ENCODING", "body must be an object")
        return doc

    def principal(request: Request) -> str:
        auth = request.headers.get("authorization", "")
        if not auth.startswith("Bearer "):
            raise SwarmError("UNAUTHENTICATED", "missing bearer token")
        return service.principal(auth[len("Bearer "):])

    def need(doc: dict, key: str, kind: type = str) -> Any:
        value = doc.get(key)
        if not isinstance(value, kind):
            raise SwarmError("MALFORMED_MESSAGE", f"{key} must be {kind.__name__}")
        return value

    @app.post("/sessions")
    async def sessions(request: Request) -> Response:
        doc = await body(request)
        if "clientFirst" in doc:
            attempt, server_first = service.session_begin(need(doc, "clientFirst"))
            return reply({"attempt": attempt, "serverFirst": server_first})
        server_final, token = service.session_finish(need(doc, "attempt"), need(doc, "clientFinal"))
        return reply({"serverFinal": server_final, "token": token}, 201)

    @app.post("/consents")
    async def grant(request: Request) -> Response:
        subject = principal(request)
        doc = await body(request)
        try:
            cats = [DataCategory(c) for c in need(doc, "categories", list)]
        except ValueError as exc:
            raise SwarmError("UNKNOWN_CATEGORY", str(exc)) from None
        token = service.grant_consent(subject, need(doc, "purpose"), cats)
        return reply({"token": token}, 201)

    @app.delete("/consents/{token}")
    def revoke(token: str, request: Request) -> Response:
        service.revoke_consent(principal(request), token)
        return Response(status_code=204)

    @app.post("/insurance-requests")
    async def request_insurance(request: Request) -> Response:
        subject = principal(request)
        doc = await body(request)
        token = doc.get("consentToken", "")
        if not isinstance(token, str):
            raise SwarmError("MALFORMED_MESSAGE", "consentToken must be str")
        iid = service.request_insurance(subject, need(doc, "insuranceType"), token, wait=False)
        return reply({"instanceId": iid}, 202)

    @app.get("/insurance-requests/{instance_id}")
    def insurance_status(instance_id: str, request: Request) -> Response:
        return reply(service.insurance_status(principal(request), instance_id))

    @app.post("/records")
    def upload(request: Request, file: UploadFile = File(...)) -> Response:
        subject = principal(request)
        content = file.file.read(MAX_RECORD_SIZE + 1)
        rid = service.upload_record(subject, file.filename or "record", content)
        return reply({"recordId": rid}, 201)

    @app.get("/records/{record_id}")
    def download(record_id: str, request: Request) -> Response:
        content = service.download_record(principal(request), record_id)
        return Response(content, media_type="application/octet-stream")

    @app.delete("/records/{record_id}")
    def delete(record_id: str, request: Request) -> Response:
        service.delete_record(principal(request), record_id)
        return Response(status_code=204)

    @app.get("/gdpr/access-log")
    def access_log(request: Request) -> Response:
        rows = service.access_log(principal(request))
        return reply({"accesses": [r.to_envelope() for r in rows]})

    @app.post("/gdpr/erasure")
    def erasure(request: Request) -> Response:
        report = service.erase(principal(request))
        return reply(report.to_envelope(), 200 if report.success else 500)

    @app.post("/support-tickets")
    async def open_ticket(request: Request) -> Response:
        subject = principal(request)
        doc = await body(request)
        tid = service.open_support_ticket(subject, need(doc, "description"), need(doc, "consentToken"))
        return reply({"ticketId": tid}, 201)

    @app.get("/support-tickets/{ticket_id}")
    def view_ticket(ticket_id: str, request: Request) -> Response:
        return reply(service.support_view(principal(request), ticket_id))

    return app


def serve(service: Optional[Healthfuse] = None, host: str = "127.0.0.1", port: int = 8080) -> None:
    import uvicorn

    uvicorn.run(create_app(service or Healthfuse.in_process()), host=host, port=port)
