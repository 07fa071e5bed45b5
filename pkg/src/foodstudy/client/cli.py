"""Command-line food-record client.

Commands: capture, sync, review, status, foods. Exit codes: 0 ok,
2 validation, 3 timeout, 4 network failure, 5 server-reported error.
"""
from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import click

from .. import analysis
from ..jsonutil import parse_rfc3339, to_rfc3339
from ..model import CaptureMetadata, validate_metadata
from .api import NetworkError, ServerApiError, ServerClient
from .ops import AnswersExhausted, Prompter, assemble_review, sync_drafts
from .state import Draft, SessionStore

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_TIMEOUT = 3
EXIT_NETWORK = 4
EXIT_SERVER = 5

# metadata field -> CLI flag, for readable validation messages
_FIELD_FLAGS = {
    "captured_at": "--time",
    "gps.latitude": "--lat",
    "gps.longitude": "--lon",
    "camera_pose_angle": "--pose-angle",
    "fiducial_marker_present": "--fiducial-marker",
    "fiducial_scale_mm_per_px": "--fiducial-scale",
    "exif": "--exif",
}


@dataclass
class CliContext:
    server: str
    token: str | None
    store: SessionStore
    participant: str | None
    study: str | None

    def client(self) -> ServerClient:
        return ServerClient(self.server, token=self.token)


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
@click.option("--server", envvar="FOODREC_SERVER", default="http://127.0.0.1:8065",
              show_default=True, help="server base URL")
@click.option("--token", envvar="FOODREC_TOKEN", default=None, help="participant bearer token")
@click.option("--state-dir", envvar="FOODREC_STATE_DIR", default="~/.foodrec",
              show_default=True, help="directory for the local session state")
@click.option("--participant", envvar="FOODREC_PARTICIPANT", default=None, help="participant id")
@click.option("--study", envvar="FOODREC_STUDY", default=None, help="study id")
@click.pass_context
def main(ctx, server, token, state_dir, participant, study):
    """Food-record client: capture eating-occasion image pairs, sync them
    to the study server, and run the participant review loop."""
    ctx.obj = CliContext(
        server=server,
        token=token,
        store=SessionStore(state_dir),
        participant=participant,
        study=study,
    )


def _require_ids(ctx: CliContext, state) -> tuple[str, str]:
    participant = ctx.participant or state.participant_id
    study = ctx.study or state.study_id
    if not participant:
        _fail(EXIT_VALIDATION, "participant id required (--participant or FOODREC_PARTICIPANT)")
    if not study:
        _fail(EXIT_VALIDATION, "study id required (--study or FOODREC_STUDY)")
    return participant, study


def _build_metadata(
    before_path: Path,
    time_: str | None,
    lat: float | None,
    lon: float | None,
    pose_angle: float | None,
    fiducial_marker: bool,
    fiducial_scale: float | None,
    exif_entries: tuple[str, ...],
    metadata_file: str | None,
) -> dict:
    """Assemble the capture metadata dict, never fabricating fields.

    Absent flags produce absent fields. The one exception: a missing
    --time falls back to the before image's mtime, with a notice.
    """
    base: dict = {}
    if metadata_file:
        try:
            base = json.loads(Path(metadata_file).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            _fail(EXIT_VALIDATION, f"cannot read metadata file: {exc}")
        if not isinstance(base, dict):
            _fail(EXIT_VALIDATION, "metadata file must contain a JSON object")

    if time_ is not None:
        base["captured_at"] = time_
    elif "captured_at" not in base:
        mtime = datetime.fromtimestamp(before_path.stat().st_mtime, tz=timezone.utc)
        base["captured_at"] = to_rfc3339(mtime)
        click.echo(
            f"notice: --time not given; using before-image mtime {base['captured_at']}",
            err=True,
        )

    if (lat is None) != (lon is None):
        _fail(EXIT_VALIDATION, "bad metadata: gps requires both --lat and --lon")
    if lat is not None:
        base["gps"] = {"latitude": lat, "longitude": lon}
    if pose_angle is not None:
        base["camera_pose_angle"] = pose_angle
    if fiducial_marker or fiducial_scale is not None:
        base["fiducial_marker_present"] = True
    if fiducial_scale is not None:
        base["fiducial_scale_mm_per_px"] = fiducial_scale
    if exif_entries:
        exif = dict(base.get("exif") or {})
        for entry in exif_entries:
            if "=" not in entry:
                _fail(EXIT_VALIDATION, f"bad metadata: --exif needs key=value, got {entry!r}")
            key, value = entry.split("=", 1)
            exif[key] = value
        base["exif"] = exif
    return base


def _validate_metadata_dict(metadata: dict) -> None:
    try:
        parsed = CaptureMetadata.from_dict(metadata)
    except (KeyError, TypeError, ValueError) as exc:
        _fail(EXIT_VALIDATION, f"bad metadata: {exc}")
        return
    violations = validate_metadata(parsed)
    if violations:
        names = ", ".join(
            f"{v} ({_FIELD_FLAGS[v]})" if v in _FIELD_FLAGS else v for v in violations
        )
        _fail(EXIT_VALIDATION, f"bad metadata: {names}")


@main.command()
@click.argument("before_path", type=click.Path(path_type=Path))
@click.argument("after_path", type=click.Path(path_type=Path))
@click.option("--time", "time_", default=None,
              help="capture timestamp, RFC 3339 (defaults to before-image mtime)")
@click.option("--lat", type=float, default=None, help="GPS latitude in degrees")
@click.option("--lon", type=float, default=None, help="GPS longitude in degrees")
@click.option("--pose-angle", type=float, default=None, help="camera angle from horizontal")
@click.option("--fiducial-marker", is_flag=True, help="fiducial marker present in the scene")
@click.option("--fiducial-scale", type=float, default=None,
              help="fiducial scale in mm per pixel (implies --fiducial-marker)")
@click.option("--exif", "exif_entries", multiple=True, help="EXIF entry as key=value")
@click.option("--metadata", "metadata_file", default=None,
              help="JSON metadata file; individual flags override its fields")
@click.pass_obj
def capture(ctx: CliContext, before_path: Path, after_path: Path, time_, lat, lon,
            pose_angle, fiducial_marker, fiducial_scale, exif_entries, metadata_file):
    """Queue a before/after image pair with its metadata for upload."""
    for label, path in (("before", before_path), ("after", after_path)):
        if not path.is_file():
            _fail(EXIT_VALIDATION, f"file not found: {path} ({label} image)")
        try:
            analysis.probe_image(path.read_bytes())
        except analysis.DecodeError as exc:
            _fail(EXIT_VALIDATION, f"{label} image: {exc}")

    metadata = _build_metadata(
        before_path, time_, lat, lon, pose_angle,
        fiducial_marker, fiducial_scale, exif_entries, metadata_file,
    )
    _validate_metadata_dict(metadata)

    with ctx.store.locked() as state:
        participant, study = _require_ids(ctx, state)
        state.participant_id = participant
        state.study_id = study
        draft = Draft.new(
            participant_id=participant,
            study_id=study,
            before_path=str(before_path.resolve()),
            after_path=str(after_path.resolve()),
            metadata=metadata,
            created_at=to_rfc3339(datetime.now(timezone.utc)),
        )
        state.drafts.append(draft)
    click.echo(f"queued {draft.draft_id} ({before_path.name} / {after_path.name})")


@main.command()
@click.pass_obj
def sync(ctx: CliContext):
    """Upload every queued draft; failures leave drafts queued for retry."""
    with ctx.store.locked() as state:
        if not state.drafts:
            click.echo("nothing to sync")
            return
        with ctx.client() as client:
            results = sync_drafts(state, client)

    network_failure = server_rejection = False
    for result in results:
        if result["status"] == "uploaded":
            note = " (already on server)" if result.get("replayed") else ""
            click.echo(f"{result['draft_id']}: uploaded as {result['occasion_id']}{note}")
        elif result["status"] == "network_error":
            network_failure = True
            click.echo(f"{result['draft_id']}: network failure, still queued ({result['error']})", err=True)
        else:
            server_rejection = True
            click.echo(f"{result['draft_id']}: rejected by server ({result['error']})", err=True)
    if network_failure:
        sys.exit(EXIT_NETWORK)
    if server_rejection:
        sys.exit(EXIT_SERVER)


def _refresh_food_list(state, client) -> list[dict]:
    data = client.food_list()
    state.food_list = data
    return data["items"]


@main.command()
@click.argument("occasion_id")
@click.option("--answers", "answers_file", default=None,
              help="scripted answers file (one prompt response per line)")
@click.option("--timeout", "timeout_s", type=float, default=60.0, show_default=True,
              help="polling window in seconds for analysis results")
@click.option("--poll-interval", type=float, default=1.0, show_default=True)
@click.pass_obj
def review(ctx: CliContext, occasion_id, answers_file, timeout_s, poll_interval):
    """Review the analysis results for an occasion and submit verdicts."""
    try:
        with ctx.client() as client:
            deadline = time.monotonic() + timeout_s
            while True:
                data = client.preliminary(occasion_id)
                if data["status"] == "ready":
                    break
                if time.monotonic() >= deadline:
                    _fail(EXIT_TIMEOUT, f"occasion {occasion_id} not analyzed within {timeout_s:.0f}s")
                time.sleep(poll_interval)

            with ctx.store.locked() as state:
                food_items = _refresh_food_list(state, client)

            predictions = data["predictions"]
            click.echo(f"{len(predictions)} predicted food(s) for occasion {occasion_id}")
            prompter = (
                Prompter.from_answers_file(answers_file, echo=click.echo)
                if answers_file
                else Prompter(echo=click.echo)
            )
            review_payload = assemble_review(predictions, prompter, food_items, echo=click.echo)
            result = client.submit_review(occasion_id, review_payload)
    except NetworkError as exc:
        _fail(EXIT_NETWORK, f"network failure: {exc}")
        return
    except ServerApiError as exc:
        _fail(EXIT_SERVER, str(exc))
        return
    except AnswersExhausted as exc:
        _fail(EXIT_VALIDATION, str(exc))
        return

    click.echo(f"review submitted; occasion state is now {result['state']}")
    for food in result["confirmed"]:
        pin = food["pin"]
        click.echo(f"  confirmed: {food['label']!r} at ({pin['x_px']},{pin['y_px']})")


@main.command()
@click.pass_obj
def status(ctx: CliContext):
    """List local drafts and server-side occasions with lifecycle states."""
    state = ctx.store.load()
    server_states: dict[str, str] = {}
    degraded = False
    participant = ctx.participant or state.participant_id
    if participant:
        try:
            with ctx.client() as client:
                listing = client.list_occasions(participant)
            server_states = {o["occasion_id"]: o["state"] for o in listing["occasions"]}
        except NetworkError as exc:
            degraded = True
            click.echo(f"warning: server unreachable ({exc}); local view only", err=True)
        except ServerApiError as exc:
            degraded = True
            click.echo(f"warning: server error ({exc}); local view only", err=True)

    rows = [("KIND", "ID", "STATE")]
    for draft in state.drafts:
        rows.append(("draft", draft.draft_id, "queued"))
    for upload in state.uploads:
        remote = server_states.get(upload.occasion_id, "unknown" if degraded else "missing")
        rows.append(("occasion", upload.occasion_id, remote))
    for occasion_id, remote_state in server_states.items():
        if not any(u.occasion_id == occasion_id for u in state.uploads):
            rows.append(("occasion", occasion_id, remote_state))

    if len(rows) == 1:
        click.echo("no drafts or occasions")
        return
    width_kind = max(len(r[0]) for r in rows)
    width_id = max(len(r[1]) for r in rows)
    for kind, ident, st in rows:
        click.echo(f"{kind:<{width_kind}}  {ident:<{width_id}}  {st}")


@main.command()
@click.option("--refresh", is_flag=True, help="fetch the list from the server first")
@click.pass_obj
def foods(ctx: CliContext, refresh):
    """Print the cached pre-loaded food list (code, name, energy)."""
    with ctx.store.locked() as state:
        if refresh or state.food_list is None:
            try:
                with ctx.client() as client:
                    _refresh_food_list(state, client)
            except NetworkError as exc:
                _fail(EXIT_NETWORK, f"network failure: {exc}")
            except ServerApiError as exc:
                _fail(EXIT_SERVER, str(exc))
        cached = state.food_list

    items = cached.get("items", []) if cached else []
    if not items:
        click.echo("food list is empty")
        return
    click.echo(f"# list hash {cached['hash']}")
    for item in items:
        energy = item.get("energy_kcal_per_100g")
        energy_text = "" if energy is None else f"  {energy} kcal/100g"
        click.echo(f"{item['code']}  {item['name']}{energy_text}")


if __name__ == "__main__":
    main()
