"""Text grammar of the CTRL/1.0 control protocol (an RTSP subset).

    SETUP cam CTRL/1.0\\r\\n
    CSeq: 1\\r\\n
    Transport: client_port=5004\\r\\n
    \\r\\n
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional

from src.utils.errors import MalformedMessage

PROTOCOL = "CTRL/1.0"
CRLF = "\r\n"

REASONS = {
    200: "OK",
    400: "Bad Request",
    404: "Stream Not Found",
    454: "Session Not Found",
    455: "Method Not Valid In This State",
    500: "Internal Error",
}


class MessageKind(str, Enum):
    REQUEST = "Request"
    RESPONSE = "Response"


class Method(str, Enum):
    OPTIONS = "OPTIONS"
    SETUP = "SETUP"
    PLAY = "PLAY"
    TEARDOWN = "TEARDOWN"
    PING = "PING"


@dataclass(frozen=True)
class Transport:
    client_rtp_port: int


@dataclass(frozen=True)
class ControlMessage:
    kind: MessageKind
    cseq: int
    method: Optional[Method] = None
    stream: str = ""
    status: Optional[int] = None
    reason: str = ""
    session_id: Optional[str] = None
    transport: Optional[Transport] = None
    timeout_ms: Optional[int] = None
    # clock-sync probe timestamps carried by PING (ns, sender-local clocks)
    t0: Optional[int] = None
    t1: Optional[int] = None
    t2: Optional[int] = None
    body: Optional[str] = None

    @classmethod
    def request(cls, method: Method, cseq: int, stream: str = "", **fields) -> "ControlMessage":
        return cls(kind=MessageKind.REQUEST, cseq=cseq, method=Method(method),
                   stream=stream or "*", **fields)

    @classmethod
    def response(cls, status: int, cseq: int, **fields) -> "ControlMessage":
        fields.setdefault("reason", REASONS.get(status, "Unknown"))
        return cls(kind=MessageKind.RESPONSE, cseq=cseq, status=status, **fields)

    def reply(self, status: int, **fields) -> "ControlMessage":
        return ControlMessage.response(status, self.cseq, **fields)

    @property
    def is_request(self) -> bool:
        return self.kind is MessageKind.REQUEST

    @property
    def ok(self) -> bool:
        return self.status == 200

    def validate(self):
        if self.cseq is None or self.cseq < 0:
            raise MalformedMessage("CSeq missing")
        if self.is_request:
            if self.method is None:
                raise MalformedMessage("request without method")
            if not self.stream or any(c.isspace() for c in self.stream):
                raise MalformedMessage(f"bad stream name {self.stream!r}")
        else:
            if self.status is None or not 100 <= self.status <= 999:
                raise MalformedMessage(f"bad status {self.status!r}")
        return self


def render_message(msg: ControlMessage) -> bytes:
    msg.validate()
    if msg.is_request:
        lines = [f"{msg.method.value} {msg.stream} {PROTOCOL}"]
    else:
        lines = [f"{PROTOCOL} {msg.status} {msg.reason}".rstrip()]
    lines.append(f"CSeq: {msg.cseq}")
    if msg.session_id is not None:
        lines.append(f"Session: {msg.session_id}")
    if msg.transport is not None:
        lines.append(f"Transport: client_port={msg.transport.client_rtp_port}")
    if msg.timeout_ms is not None:
        lines.append(f"Timeout-Ms: {msg.timeout_ms}")
    for name in ("t0", "t1", "t2"):
        value = getattr(msg, name)
        if value is not None:
            lines.append(f"{name.upper()}: {value}")
    body = (msg.body or "").encode("utf-8")
    if msg.body is not None:
        lines.append(f"Content-Length: {len(body)}")
    return (CRLF.join(lines) + CRLF + CRLF).encode("utf-8") + body


def _int_header(headers: Dict[str, str], name: str) -> Optional[int]:
    if name not in headers:
        return None
    try:
        return int(headers[name])
    except ValueError as e:
        raise MalformedMessage(f"bad {name} header: {headers[name]!r}") from e


def _parse_transport(value: str) -> Transport:
    for part in value.split(";"):
        key, _, port = part.strip().partition("=")
        if key == "client_port":
            try:
                return Transport(int(port.split("-")[0]))
            except ValueError as e:
                raise MalformedMessage(f"bad client_port in {value!r}") from e
    raise MalformedMessage(f"Transport without client_port: {value!r}")


def parse_message(data: bytes) -> ControlMessage:
    try:
        text = bytes(data).decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedMessage("control message is not UTF-8") from e
    head, sep, body = text.partition(CRLF + CRLF)
    if not sep:
        raise MalformedMessage("control message is not terminated by a blank line")
    lines = head.split(CRLF)
    first = lines[0].strip()
    if not first:
        raise MalformedMessage("missing first line")

    headers: Dict[str, str] = {}
    for line in lines[1:]:
        name, colon, value = line.partition(":")
        if not colon:
            raise MalformedMessage(f"bad header line {line!r}")
        headers[name.strip().lower()] = value.strip()

    cseq = _int_header(headers, "cseq")
    if cseq is None:
        raise MalformedMessage("CSeq missing")

    length = _int_header(headers, "content-length")
    fields = dict(
        cseq=cseq,
        session_id=headers.get("session"),
        transport=_parse_transport(headers["transport"]) if "transport" in headers else None,
        timeout_ms=_int_header(headers, "timeout-ms"),
        t0=_int_header(headers, "t0"),
        t1=_int_header(headers, "t1"),
        t2=_int_header(headers, "t2"),
        body=body[:length] if length is not None else None,
    )

    parts = first.split(" ", 2)
    if parts[0] == PROTOCOL:
        if len(parts) < 2:
            raise MalformedMessage(f"bad status line {first!r}")
        try:
            status = int(parts[1])
        except ValueError as e:
            raise MalformedMessage(f"bad status code in {first!r}") from e
        reason = parts[2] if len(parts) > 2 else ""
        return ControlMessage(kind=MessageKind.RESPONSE, status=status, reason=reason,
                              **fields).validate()

    if len(parts) != 3 or parts[2] != PROTOCOL:
        raise MalformedMessage(f"bad request line {first!r}")
    try:
        method = Method(parts[0])
    except ValueError as e:
        raise MalformedMessage(f"unknown method {parts[0]!r}") from e
    return ControlMessage(kind=MessageKind.REQUEST, method=method, stream=parts[1],
                          **fields).validate()
