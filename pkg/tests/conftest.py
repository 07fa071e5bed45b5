"""Shared fixtures: sample images, food lists, app factories, live server."""
from __future__ import annotations

import io
import json
import socket
import threading
import time
from types import SimpleNamespace

import pytest
import uvicorn
from fastapi.testclient import TestClient
from PIL import Image

from foodstudy.analysis import AnalyzerKind
from foodstudy.server import ServerConfig, create_app

SAMPLE_FOOD_CSV = """code,name,energy_kcal_per_100g
58100100,potato,93
58100200,potato wedges,160
58100300,roast potato,150
11100000,milk,61
63107010,juice,45
64100100,juice,54
56205000,plain rice,
"""

VALID_METADATA = {
    "captured_at": "2021-05-01T12:30:00Z",
    "gps": {"latitude": 40.42, "longitude": -86.91},
    "camera_pose_angle": 45.0,
    "exif": {"Make": "TestCam"},
    "fiducial_marker_present": True,
    "fiducial_scale_mm_per_px": 0.5,
}


def make_png(width: int, height: int, color=(180, 90, 40)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", (width, height), color).save(buf, format="PNG")
    return buf.getvalue()


def make_jpeg(width: int, height: int, color=(60, 160, 90)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", (width, height), color).save(buf, format="JPEG")
    return buf.getvalue()


def upload_files(before: bytes, after: bytes, metadata: dict) -> dict:
    return {
        "before": ("before.png", before, "image/png"),
        "after": ("after.png", after, "image/png"),
        "metadata": ("metadata.json", json.dumps(metadata).encode(), "application/json"),
    }


def upload_occasion(client, participant="p1", study="s1", width=200, height=100,
                    metadata=None, before=None, after=None, idempotency_key=None):
    data = {"participant_id": participant, "study_id": study}
    if idempotency_key:
        data["idempotency_key"] = idempotency_key
    return client.post(
        "/api/v1/occasions",
        data=data,
        files=upload_files(
            before if before is not None else make_png(width, height),
            after if after is not None else make_png(width, height, (12, 12, 12)),
            metadata if metadata is not None else VALID_METADATA,
        ),
    )


@pytest.fixture
def food_csv_path(tmp_path):
    path = tmp_path / "foods.csv"
    path.write_text(SAMPLE_FOOD_CSV, encoding="utf-8")
    return path


@pytest.fixture
def make_app(tmp_path, food_csv_path):
    """Factory for a fully wired app on a fresh store."""
    counter = iter(range(1000))

    def _make(
        analyzer_kind: str = "grid",
        synchronous_analysis: bool = True,
        participant_token: str | None = None,
        researcher_token: str | None = None,
        max_image_bytes: int = 20 * 1024 * 1024,
    ):
        data_dir = tmp_path / f"data{next(counter)}"
        config = ServerConfig(
            data_dir=data_dir,
            food_list_path=food_csv_path,
            analyzer_kind=AnalyzerKind(analyzer_kind),
            synchronous_analysis=synchronous_analysis,
            participant_token=participant_token,
            researcher_token=researcher_token,
            max_image_bytes=max_image_bytes,
        )
        app = create_app(config)
        return SimpleNamespace(
            app=app,
            config=config,
            store=app.state.store,
            service=app.state.service,
            client=TestClient(app),
        )

    return _make


class LiveServer:
    """uvicorn in a daemon thread on an ephemeral port."""

    def __init__(self, app):
        sock = socket.socket()
        sock.bind(("127.0.0.1", 0))
        self.port = sock.getsockname()[1]
        sock.close()
        self._server = uvicorn.Server(
            uvicorn.Config(app, host="127.0.0.1", port=self.port, log_level="error")
        )
        self._thread = threading.Thread(target=self._server.run, daemon=True)

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def start(self) -> "LiveServer":
        self._thread.start()
        deadline = time.monotonic() + 10
        while not self._server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("server did not start within 10s")
            time.sleep(0.02)
        return self

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10)


@pytest.fixture
def live_server(make_app):
    started: list[LiveServer] = []

    def _start(**kwargs):
        bundle = make_app(**kwargs)
        server = LiveServer(bundle.app).start()
        bundle.base_url = server.base_url
        started.append(server)
        return bundle

    yield _start
    for server in started:
        server.stop()
