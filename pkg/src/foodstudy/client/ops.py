"""Client operations shared by the CLI commands and the test harness."""
from __future__ import annotations

import mimetypes
from pathlib import Path

from ..jsonutil import to_rfc3339, utc_now
from .api import NetworkError, ServerApiError, ServerClient
from .state import Draft, SessionState, UploadedOccasion


class AnswersExhausted(Exception):
    """Scripted answers file ran out before the prompts did."""


class Prompter:
    """Line-based prompt source: interactive stdin or a scripted answers file."""

    def __init__(self, answers: list[str] | None = None, echo=print):
        self._answers = None if answers is None else list(answers)
        self._echo = echo

    def ask(self, prompt: str) -> str:
        if self._answers is None:
            return input(prompt)
        if not self._answers:
            raise AnswersExhausted(f"no scripted answer left for prompt: {prompt!r}")
        answer = self._answers.pop(0)
        self._echo(f"{prompt}{answer}")
        return answer

    @classmethod
    def from_answers_file(cls, path: Path | str, echo=print) -> Prompter:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(answers=lines, echo=echo)


def _guess_media(path: str) -> str:
    guessed, _ = mimetypes.guess_type(path)
    return guessed or "application/octet-stream"


def sync_drafts(state: SessionState, client: ServerClient) -> list[dict]:
    """Upload every queued draft exactly once; failures keep drafts queued.

    Each draft carries a stable idempotency key, so a retry after a lost
    response cannot create a duplicate occasion on the server. Returns a
    per-draft result list in queue order.
    """
    results = []
    remaining: list[Draft] = []
    for draft in state.drafts:
        try:
            before_bytes = Path(draft.before_path).read_bytes()
            after_bytes = Path(draft.after_path).read_bytes()
        except OSError as exc:
            results.append({"draft_id": draft.draft_id, "status": "missing_file", "error": str(exc)})
            remaining.append(draft)
            continue
        try:
            response = client.upload_occasion(
                participant_id=draft.participant_id,
                study_id=draft.study_id,
                before=(Path(draft.before_path).name, before_bytes, _guess_media(draft.before_path)),
                after=(Path(draft.after_path).name, after_bytes, _guess_media(draft.after_path)),
                metadata=draft.metadata,
                idempotency_key=draft.idempotency_key,
            )
        except NetworkError as exc:
            results.append({"draft_id": draft.draft_id, "status": "network_error", "error": str(exc)})
            remaining.append(draft)
            continue
        except ServerApiError as exc:
            results.append({
                "draft_id": draft.draft_id,
                "status": "rejected",
                "error": str(exc),
                "code": exc.code,
            })
            remaining.append(draft)
            continue
        occasion_id = response["occasion_id"]
        state.uploads.append(
            UploadedOccasion(
                draft_id=draft.draft_id,
                occasion_id=occasion_id,
                uploaded_at=to_rfc3339(utc_now()),
            )
        )
        results.append({
            "draft_id": draft.draft_id,
            "status": "uploaded",
            "occasion_id": occasion_id,
            "replayed": bool(response.get("replayed", False)),
        })
    state.drafts = remaining
    return results


def _resolve_menu_entry(entry: str, food_items: list[dict]) -> str:
    """A number picks from the food menu; anything else is a free-text label."""
    text = entry.strip()
    if text.isdigit() and food_items:
        index = int(text)
        if 1 <= index <= len(food_items):
            return food_items[index - 1]["name"]
    return text


def format_food_menu(food_items: list[dict]) -> list[str]:
    return [
        f"  {i + 1}. {item['name']} ({item['code']})"
        for i, item in enumerate(food_items)
    ]


def assemble_review(
    predictions: list[dict],
    prompter: Prompter,
    food_items: list[dict],
    echo=print,
) -> dict:
    """Interactive confirm/relabel/remove pass plus the add-food loop.

    Returns the review payload ready for submission. Prediction pins are
    printed as coordinates; the web UI is the visual surface.
    """
    verdicts = []
    menu_shown = False
    for i, pred in enumerate(predictions):
        pin = pred["pin"]
        echo(
            f"[{i + 1}/{len(predictions)}] {pred['label']!r} "
            f"at ({pin['x_px']},{pin['y_px']}) confidence {pred['confidence']}"
        )
        while True:
            choice = prompter.ask("  [c]onfirm / [r]elabel / [x] remove: ").strip().lower()
            if choice in ("c", "r", "x"):
                break
            echo("  please answer c, r, or x")
        if choice == "c":
            verdicts.append({"prediction_id": pred["prediction_id"], "verdict": "confirmed"})
        elif choice == "x":
            verdicts.append({"prediction_id": pred["prediction_id"], "verdict": "removed"})
        else:
            if not menu_shown and food_items:
                echo("food list:")
                for line in format_food_menu(food_items):
                    echo(line)
                menu_shown = True
            entry = prompter.ask("  new label (number from the list or free text): ")
            verdicts.append({
                "prediction_id": pred["prediction_id"],
                "verdict": "relabeled",
                "new_label": _resolve_menu_entry(entry, food_items),
            })

    additions = []
    while True:
        more = prompter.ask("add a food the analysis missed? [y/N]: ").strip().lower()
        if more not in ("y", "yes"):
            break
        if not menu_shown and food_items:
            echo("food list:")
            for line in format_food_menu(food_items):
                echo(line)
            menu_shown = True
        label = _resolve_menu_entry(
            prompter.ask("  label (number from the list or free text): "), food_items
        )
        while True:
            raw = prompter.ask("  pin as x,y: ").strip()
            try:
                x_str, y_str = raw.split(",", 1)
                x, y = int(x_str.strip()), int(y_str.strip())
                break
            except ValueError:
                echo("  expected two integers like 120,80")
        additions.append({"label": label, "pin": {"x_px": x, "y_px": y}})

    return {
        "verdicts": verdicts,
        "additions": additions,
        "submitted_at": to_rfc3339(utc_now()),
    }
