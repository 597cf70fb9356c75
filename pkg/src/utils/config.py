import configparser
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, Optional, get_type_hints

from dotenv import load_dotenv

from .errors import ConfigError

load_dotenv()

MS = 1_000_000
SECOND = 1_000_000_000

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class Config:
    # Logging
    STREAM_LOG = os.getenv("STREAM_LOG", "info")

    # Artifacts
    STREAM_OUT_DIR = os.getenv("STREAM_OUT_DIR", "./data/artifacts")
    STREAM_SCENARIO_DIR = os.getenv("STREAM_SCENARIO_DIR")

    # Stream defaults
    STREAM_NAME = "cam"
    RTP_CLOCK_RATE = 90_000
    DEFAULT_FPS = 30.0

    @classmethod
    def validate(cls):
        if cls.STREAM_LOG.lower() not in LOG_LEVELS:
            raise ConfigError(
                f"STREAM_LOG must be one of {sorted(LOG_LEVELS)}, got {cls.STREAM_LOG!r}"
            )
        return True

    @classmethod
    def configure_logging(cls, level: Optional[str] = None):
        cls.validate()
        name = (level or cls.STREAM_LOG).lower()
        root = logging.getLogger("src")
        root.setLevel(LOG_LEVELS.get(name, logging.INFO))
        if not root.handlers:
            handler = logging.StreamHandler()
            handler.setFormatter(
                logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
            )
            root.addHandler(handler)
        return root


@dataclass(frozen=True)
class SenderSettings:
    host: str = "sender"
    fps: float = 30.0
    gop_length: int = 30
    idr_size: int = 20_000
    p_size: int = 4_000
    seed: int = 1
    ssrc: int = 0x1A2B3C4D
    preroll_ssrc: int = 0x1A2B3C4E
    payload_type: int = 96
    max_payload: int = 1200
    rtp_ts_base: int = 0
    rtp_port: int = 5008
    control_port: int = 5006
    ring_seconds: float = 15.0
    encode_delay_ms: float = 0.0
    payload_delay_ms: float = 0.0
    clock_offset_ms: float = 0.0
    start_at_ms: float = 500.0
    preroll_at_s: Optional[float] = None
    source_file: Optional[str] = None

    def validate(self):
        _require(self.fps > 0, "[sender] fps must be > 0")
        _require(self.gop_length >= 1, "[sender] gop_length must be >= 1")
        _require(self.idr_size >= 2, "[sender] idr_size must be >= 2")
        _require(self.p_size >= 2, "[sender] p_size must be >= 2")
        _require(self.max_payload >= 3, "[sender] max_payload must be >= 3")
        _require(self.ssrc != self.preroll_ssrc, "[sender] preroll_ssrc must differ from ssrc")
        _require(self.ring_seconds > 0, "[sender] ring_seconds must be > 0")
        for name in ("encode_delay_ms", "payload_delay_ms", "start_at_ms"):
            _require(getattr(self, name) >= 0, f"[sender] {name} must be >= 0")


@dataclass(frozen=True)
class ServerSettings:
    host: str = "server"
    control_port: int = 8554
    ingest_port: int = 5000
    session_timeout_ms: float = 2000.0
    forward_delay_ms: float = 0.0
    expire_interval_ms: float = 250.0

    def validate(self):
        _require(self.session_timeout_ms > 0, "[server] session_timeout_ms must be > 0")
        _require(self.forward_delay_ms >= 0, "[server] forward_delay_ms must be >= 0")
        _require(self.expire_interval_ms > 0, "[server] expire_interval_ms must be > 0")


@dataclass(frozen=True)
class ReceiverSettings:
    host: str = "receiver"
    rtp_port: int = 5004
    control_port: int = 5005
    stream: str = "cam"
    target_latency_ms: float = 150.0
    depayload_delay_ms: float = 0.0
    decode_delay_ms: float = 0.0
    clock_offset_ms: float = 0.0
    keepalive_interval_ms: float = 500.0
    rtp_silence_timeout_ms: float = 100.0
    ping_interval_ms: float = 20.0
    retry_backoff_ms: float = 50.0
    request_timeout_ms: float = 200.0
    recovery_cap_ms: float = 10_000.0

    def validate(self, session_timeout_ms: float):
        _require(self.target_latency_ms > 0, "[receiver] target_latency_ms must be > 0")
        _require(
            0 < self.keepalive_interval_ms < session_timeout_ms,
            "[receiver] keepalive_interval_ms must be > 0 and < [server] session_timeout_ms",
        )
        _require(self.rtp_silence_timeout_ms > 0, "[receiver] rtp_silence_timeout_ms must be > 0")
        _require(self.ping_interval_ms > 0, "[receiver] ping_interval_ms must be > 0")
        _require(self.retry_backoff_ms > 0, "[receiver] retry_backoff_ms must be > 0")
        _require(self.request_timeout_ms > 0, "[receiver] request_timeout_ms must be > 0")
        _require(self.recovery_cap_ms > 0, "[receiver] recovery_cap_ms must be > 0")


@dataclass(frozen=True)
class NetworkSettings:
    profile: str = "fog"
    one_way_ms: float = 25.0
    jitter_ms: float = 1.0
    loss_rate: float = 0.0
    control_one_way_ms: float = 3.0
    control_jitter_ms: float = 0.0
    control_loss_rate: float = 0.0
    seed: int = 1
    sync_k: int = 8
    sync_interval_s: float = 10.0

    def validate(self):
        _require(self.one_way_ms >= 0, "[network] one_way_ms must be >= 0")
        _require(self.jitter_ms >= 0, "[network] jitter_ms must be >= 0")
        _require(0.0 <= self.loss_rate <= 1.0, "[network] loss_rate must be in [0, 1]")
        _require(self.control_one_way_ms >= 0, "[network] control_one_way_ms must be >= 0")
        _require(self.control_jitter_ms >= 0, "[network] control_jitter_ms must be >= 0")
        _require(
            0.0 <= self.control_loss_rate <= 1.0, "[network] control_loss_rate must be in [0, 1]"
        )
        _require(self.sync_k >= 1, "[network] sync_k must be >= 1")
        _require(self.sync_interval_s > 0, "[network] sync_interval_s must be > 0")


@dataclass(frozen=True)
class HandoverSettings:
    count: int = 0
    first_at_s: float = 5.0
    interval_s: float = 3.0
    outage_min_ms: float = 100.0
    outage_max_ms: float = 250.0
    seed: int = 1

    def validate(self):
        _require(self.count >= 0, "[handover] count must be >= 0")
        _require(
            0 <= self.outage_min_ms <= self.outage_max_ms,
            "[handover] outage_min_ms must be <= outage_max_ms",
        )
        if self.count > 1:
            _require(
                self.interval_s * 1000 > self.outage_max_ms,
                "[handover] interval_s must exceed outage_max_ms (events may not overlap)",
            )


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "fog"
    duration_s: float = 60.0
    sender: SenderSettings = field(default_factory=SenderSettings)
    server: ServerSettings = field(default_factory=ServerSettings)
    receiver: ReceiverSettings = field(default_factory=ReceiverSettings)
    network: NetworkSettings = field(default_factory=NetworkSettings)
    handover: HandoverSettings = field(default_factory=HandoverSettings)

    def validate(self):
        _require(self.duration_s > 0, "duration_s must be > 0")
        self.sender.validate()
        self.server.validate()
        self.receiver.validate(self.server.session_timeout_ms)
        self.network.validate()
        self.handover.validate()
        return self

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(
            self,
            sender=replace(self.sender, seed=seed),
            network=replace(self.network, seed=seed),
            handover=replace(self.handover, seed=seed),
        )

    def with_duration(self, duration_s: float) -> "ScenarioConfig":
        return replace(self, duration_s=duration_s)


SECTIONS = {
    "sender": SenderSettings,
    "server": ServerSettings,
    "receiver": ReceiverSettings,
    "network": NetworkSettings,
    "handover": HandoverSettings,
}

# keys a standalone role cannot run without
ROLE_REQUIRED_KEYS = {
    "sender": {"sender": ("host",), "server": ("host", "ingest_port")},
    "server": {"server": ("host", "control_port", "ingest_port")},
    "receiver": {
        "receiver": ("host", "rtp_port", "control_port"),
        "server": ("host", "control_port"),
    },
}


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


def _convert(section: str, key: str, raw: str, hint):
    text = raw.strip()
    optional = getattr(hint, "__args__", None)
    if optional and type(None) in optional:
        if text.lower() in ("", "none"):
            return None
        hint = next(arg for arg in optional if arg is not type(None))
    try:
        if hint is bool:
            return text.lower() in ("1", "true", "yes", "on")
        if hint is int:
            return int(text, 0)
        if hint is float:
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from e


def _apply_section(settings, section: str, values: Dict[str, str]):
    hints = get_type_hints(type(settings))
    known = {f.name for f in fields(settings)}
    updates = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key [{section}] {key}")
        updates[key] = _convert(section, key, raw, hints[key])
    return replace(settings, **updates)


def parse_config_text(text: str, base: Optional[ScenarioConfig] = None,
                      required: Optional[Dict[str, Iterable[str]]] = None) -> ScenarioConfig:
    """Parse flat ``key = value`` text with role sections on top of ``base``."""
    parser = configparser.ConfigParser(interpolation=None, default_section="scenario")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unparsable config: {e}") from e

    for section, keys in (required or {}).items():
        for key in keys:
            if not parser.has_section(section) or key not in parser[section]:
                raise ConfigError(f"missing key [{section}] {key}")

    scenario = base or ScenarioConfig()
    top = dict(parser.defaults())
    if "name" in top:
        scenario = replace(scenario, name=top.pop("name").strip())
    if "duration_s" in top:
        scenario = replace(scenario, duration_s=_convert("scenario", "duration_s",
                                                         top.pop("duration_s"), float))
    if top:
        raise ConfigError(f"unknown top-level keys: {sorted(top)}")

    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        values = {k: v for k, v in parser[section].items() if k not in parser.defaults()}
        current = getattr(scenario, section)
        scenario = replace(scenario, **{section: _apply_section(current, section, values)})
    return scenario.validate()


def load_config_file(path, base: Optional[ScenarioConfig] = None,
                     role: Optional[str] = None) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file() and Config.STREAM_SCENARIO_DIR:
        candidate = Path(Config.STREAM_SCENARIO_DIR) / path
        if candidate.is_file():
            path = candidate
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    required = ROLE_REQUIRED_KEYS.get(role) if role else None
    return parse_config_text(path.read_text(), base=base, required=required)
