"""Thin HTTP wrapper over the server API used by the food-record client.

Transport failures raise NetworkError; non-2xx responses raise
ServerApiError carrying the server's error envelope verbatim.
"""
from __future__ import annotations

import httpx


class ClientError(Exception):
    pass


class NetworkError(ClientError):
    """Could not complete the HTTP exchange (connect/read/write failure)."""


class ServerApiError(ClientError):
    def __init__(self, status: int, code: str, message: str, details=None):
        super().__init__(f"{code} ({status}): {message}")
        self.status = status
        self.code = code
        self.message = message
        self.details = details


class ServerClient:
    def __init__(
        self,
        base_url: str,
        token: str | None = None,
        timeout: float = 15.0,
        transport: httpx.BaseTransport | None = None,
    ):
        headers = {}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._http = httpx.Client(
            base_url=base_url.rstrip("/"),
            headers=headers,
            timeout=timeout,
            transport=transport,
        )

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> ServerClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _request(self, method: str, path: str, **kwargs) -> httpx.Response:
        try:
            response = self._http.request(method, path, **kwargs)
        except httpx.TransportError as exc:
            raise NetworkError(str(exc)) from exc
        if response.status_code >= 400:
            try:
                envelope = response.json()["error"]
                raise ServerApiError(
                    status=envelope.get("status", response.status_code),
                    code=envelope.get("code", "UNKNOWN"),
                    message=envelope.get("message", ""),
                    details=envelope.get("details"),
                )
            except (ValueError, KeyError):
                raise ServerApiError(
                    status=response.status_code, code="UNKNOWN", message=response.text
                ) from None
        return response

    def health(self) -> dict:
        return self._request("GET", "/api/v1/health").json()

    def upload_occasion(
        self,
        participant_id: str,
        study_id: str,
        before: tuple[str, bytes, str],
        after: tuple[str, bytes, str],
        metadata: dict,
        idempotency_key: str | None = None,
    ) -> dict:
        import json

        files = {
            "before": before,
            "after": after,
            "metadata": ("metadata.json", json.dumps(metadata).encode(), "application/json"),
        }
        data = {"participant_id": participant_id, "study_id": study_id}
        if idempotency_key:
            data["idempotency_key"] = idempotency_key
        return self._request("POST", "/api/v1/occasions", data=data, files=files).json()

    def preliminary(self, occasion_id: str) -> dict:
        return self._request("GET", f"/api/v1/occasions/{occasion_id}/preliminary").json()

    def submit_review(self, occasion_id: str, review: dict) -> dict:
        return self._request("POST", f"/api/v1/occasions/{occasion_id}/review", json=review).json()

    def occasion_detail(self, occasion_id: str) -> dict:
        return self._request("GET", f"/api/v1/occasions/{occasion_id}").json()

    def list_occasions(self, participant_id: str) -> dict:
        return self._request("GET", f"/api/v1/participants/{participant_id}/occasions").json()

    def food_list(self) -> dict:
        return self._request("GET", "/api/v1/foodlist").json()

    def search_foods(self, query: str, limit: int | None = None) -> dict:
        params = {"query": query}
        if limit is not None:
            params["limit"] = limit
        return self._request("GET", "/api/v1/foods", params=params).json()

    def save_annotations(
        self, occasion_id: str, expected_version: int, initials: str, annotations: list[dict]
    ) -> dict:
        return self._request(
            "PUT",
            f"/api/v1/occasions/{occasion_id}/annotations",
            json={
                "expected_version": expected_version,
                "initials": initials,
                "annotations": annotations,
            },
        ).json()

    def delete_annotation(
        self,
        occasion_id: str,
        annotation_id: str,
        expected_version: int,
        initials: str | None = None,
    ) -> dict:
        params = {"expected_version": expected_version}
        if initials:
            params["initials"] = initials
        return self._request(
            "DELETE",
            f"/api/v1/occasions/{occasion_id}/annotations/{annotation_id}",
            params=params,
        ).json()

    def finalize(self, occasion_id: str, expected_version: int, initials: str) -> dict:
        return self._request(
            "POST",
            f"/api/v1/occasions/{occasion_id}/finalize",
            json={"expected_version": expected_version, "initials": initials},
        ).json()

    def export(self, study_id: str, format: str = "json") -> bytes:
        return self._request(
            "GET", f"/api/v1/studies/{study_id}/export", params={"format": format}
        ).content
