"""Server configuration: one JSON file plus environment overrides.

Environment variables (prefix FOODSTUDY_) override file values, which
override defaults. Tokens are static bearer tokens, one per role; when
both are unset the server runs open (no auth), which is only sensible
for local development and tests.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..analysis import AnalyzerKind, AnalyzerRef

_ENV_PREFIX = "FOODSTUDY_"


class ConfigError(Exception):
    pass


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8065
    data_dir: Path = field(default_factory=lambda: Path("./foodstudy-data"))
    food_list_path: Path | None = None
    participant_token: str | None = None
    researcher_token: str | None = None
    analyzer_id: str = "stub-1"
    analyzer_kind: AnalyzerKind = AnalyzerKind.GRID_STUB
    synchronous_analysis: bool = True
    max_image_bytes: int = 20 * 1024 * 1024   # per image part
    search_limit_default: int = 25
    ui_dir: Path | None = None                # static assets for the researcher web UI

    @property
    def analyzer(self) -> AnalyzerRef:
        return AnalyzerRef(analyzer_id=self.analyzer_id, kind=self.analyzer_kind)

    @classmethod
    def load(cls, config_path: Path | str | None = None, env: dict | None = None) -> ServerConfig:
        """Defaults <- config file <- environment, in increasing precedence."""
        values: dict = {}
        if config_path is not None:
            try:
                values = json.loads(Path(config_path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
            if not isinstance(values, dict):
                raise ConfigError("config file must contain a JSON object")

        env = os.environ if env is None else env
        for key in (
            "host", "port", "data_dir", "food_list_path", "participant_token",
            "researcher_token", "analyzer_id", "analyzer_kind",
            "synchronous_analysis", "max_image_bytes", "search_limit_default", "ui_dir",
        ):
            env_value = env.get(_ENV_PREFIX + key.upper())
            if env_value is not None:
                values[key] = env_value

        cfg = cls()
        try:
            if "host" in values:
                cfg.host = str(values["host"])
            if "port" in values:
                cfg.port = int(values["port"])
            if "data_dir" in values:
                cfg.data_dir = Path(values["data_dir"])
            if "food_list_path" in values and values["food_list_path"]:
                cfg.food_list_path = Path(values["food_list_path"])
            if "participant_token" in values:
                cfg.participant_token = values["participant_token"] or None
            if "researcher_token" in values:
                cfg.researcher_token = values["researcher_token"] or None
            if "analyzer_id" in values:
                cfg.analyzer_id = str(values["analyzer_id"])
            if "analyzer_kind" in values:
                cfg.analyzer_kind = AnalyzerKind(str(values["analyzer_kind"]))
            if "synchronous_analysis" in values:
                raw = values["synchronous_analysis"]
                cfg.synchronous_analysis = (
                    raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
                )
            if "max_image_bytes" in values:
                cfg.max_image_bytes = int(values["max_image_bytes"])
            if "search_limit_default" in values:
                cfg.search_limit_default = int(values["search_limit_default"])
            if "ui_dir" in values and values["ui_dir"]:
                cfg.ui_dir = Path(values["ui_dir"])
        except ValueError as exc:
            raise ConfigError(f"bad config value: {exc}") from exc
        return cfg
