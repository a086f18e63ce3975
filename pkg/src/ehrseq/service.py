"""HTTP scoring service: POST /score, GET /health, GET /psi.

The service loads a scorer artifact (and, for the replacement scheme, an
encoder checkpoint plus vocabulary), scores one application per request and
appends a query-log record to a JSONL file before responding. Loaded
artifacts are immutable, so concurrent requests need no locking beyond the
log writer, which serializes appends and flushes in order.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import logging
import threading
import time
from dataclasses import asdict, dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Sequence
from urllib.parse import parse_qs, urlparse

import numpy as np

from .container import artifact_hash
from .corpus import GENDERS, ApplicationRecord, Vocabulary
from .encoder import load_checkpoint
from .icd import InvalidCodeError, normalize_code
from .scoring import (
    EmbeddingSource,
    SchemaError,
    ScorerArtifact,
    assemble_features,
    load_scorer,
    psi,
    ridge_predict,
)

logger = logging.getLogger(__name__)


class ServiceError(Exception):
    """Request-level failure carrying the HTTP status to report."""

    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@dataclass
class QueryLogRecord:
    timestamp: str  # UTC, millisecond precision
    app_id: str
    payload_sha256: str
    score: float
    model_hash: str
    latency_ms: float


def _payload_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def parse_score_request(payload) -> ApplicationRecord:
    """Validate a /score body field by field; raises 400-level errors."""
    if not isinstance(payload, dict):
        raise ServiceError(400, "body: expected a JSON object")
    app_id = payload.get("app_id")
    if not isinstance(app_id, str) or not app_id:
        raise ServiceError(400, "app_id: expected a non-empty string")
    gender = payload.get("gender")
    if gender not in GENDERS:
        raise ServiceError(400, f"gender: expected one of {list(GENDERS)}")
    age = payload.get("age")
    if not isinstance(age, int) or isinstance(age, bool) or not (0 <= age <= 130):
        raise ServiceError(400, "age: expected an integer in [0, 130]")
    anamnesis = payload.get("anamnesis", [])
    if not isinstance(anamnesis, list) or not all(isinstance(c, str) for c in anamnesis):
        raise ServiceError(400, "anamnesis: expected a list of strings")
    codes = []
    for i, raw in enumerate(anamnesis):
        try:
            codes.append(normalize_code(raw))
        except InvalidCodeError as exc:
            raise ServiceError(400, f"anamnesis[{i}]: {exc}") from exc
    policy = payload.get("policy", {})
    if not isinstance(policy, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in policy.items()
    ):
        raise ServiceError(400, "policy: expected a string-to-string map")
    return ApplicationRecord(app_id=app_id, month=0, gender=gender, age_years=age,
                             anamnesis=codes, policy=dict(policy), claim=0)


class ScoringService:
    """Scoring logic behind the HTTP handler; usable directly in tests."""

    def __init__(
        self,
        artifact: ScorerArtifact,
        artifact_sha256: str,
        embedding_source: EmbeddingSource | None = None,
        log_path: str | Path | None = None,
    ):
        if artifact.schema.scheme == "replacement" and embedding_source is None:
            raise ValueError("replacement-scheme scorer needs an embedding source")
        self.artifact = artifact
        self.artifact_sha256 = artifact_sha256
        self.embedding_source = embedding_source
        self._log_lock = threading.Lock()
        self._logged_scores: list[float] = []
        self._log_file = open(log_path, "a", encoding="utf-8") if log_path else None

    @classmethod
    def from_files(
        cls,
        scorer_path: str | Path,
        encoder_path: str | Path | None = None,
        vocab_path: str | Path | None = None,
        log_path: str | Path | None = None,
    ) -> "ScoringService":
        artifact = load_scorer(scorer_path)
        source = None
        if artifact.schema.scheme == "replacement":
            if encoder_path is None or vocab_path is None:
                raise ValueError(
                    "replacement-scheme scorer needs --encoder and --vocab artifacts"
                )
            vocab = Vocabulary.load(vocab_path)
            model = load_checkpoint(encoder_path, expected_vocab_sha256=vocab.sha256())
            strategy = artifact.meta.get("embedding_strategy") or "mean"
            if artifact.group_table is None:
                raise ValueError("replacement-scheme scorer artifact lacks a group table")
            source = EmbeddingSource(model, vocab, artifact.group_table, strategy=strategy)
        return cls(artifact, artifact_hash(scorer_path), source, log_path)

    # -- endpoints ---------------------------------------------------------

    def health(self) -> dict:
        out = {
            "status": "ok",
            "scheme": self.artifact.schema.scheme,
            "scorer_sha256": self.artifact_sha256,
            "schema_sha256": self.artifact.schema.sha256(),
        }
        if self.embedding_source is not None:
            out["encoder_sha256"] = self.embedding_source.model.params_sha256()
        return out

    def score_payload(self, payload) -> dict:
        """Validate, score and log one request; returns the response body."""
        t0 = time.perf_counter()
        record = parse_score_request(payload)
        try:
            X, _ = assemble_features([record], self.artifact.schema.scheme,
                                     schema=self.artifact.schema,
                                     embedding_source=self.embedding_source)
            score = float(ridge_predict(self.artifact.model, X, self.artifact.schema)[0])
        except SchemaError as exc:
            raise ServiceError(422, str(exc)) from exc
        latency_ms = (time.perf_counter() - t0) * 1000.0
        self._append_log(QueryLogRecord(
            timestamp=dt.datetime.now(dt.timezone.utc).isoformat(timespec="milliseconds"),
            app_id=record.app_id,
            payload_sha256=_payload_hash(payload),
            score=score,
            model_hash=self.artifact_sha256,
            latency_ms=round(latency_ms, 3),
        ))
        return {"app_id": record.app_id, "score": score, "model_hash": self.artifact_sha256}

    def psi_over_window(self, window: int | None = None) -> dict:
        """PSI of the last ``window`` logged scores against the reference sample."""
        if window is not None and window < 1:
            raise ServiceError(400, "window: expected a positive integer")
        with self._log_lock:
            scores = list(self._logged_scores)
        if window is not None:
            scores = scores[-window:]
        if not scores:
            raise ServiceError(400, "no scored requests in the window")
        value = psi(self.artifact.reference_scores, np.asarray(scores))
        return {"psi": value, "window_size": len(scores),
                "reference_size": int(self.artifact.reference_scores.shape[0])}

    # -- log writer ----------------------------------------------------------

    def _append_log(self, rec: QueryLogRecord) -> None:
        line = json.dumps(asdict(rec), sort_keys=True)
        with self._log_lock:
            self._logged_scores.append(rec.score)
            if self._log_file is not None:
                self._log_file.write(line + "\n")
                self._log_file.flush()

    def close(self) -> None:
        with self._log_lock:
            if self._log_file is not None:
                self._log_file.close()
                self._log_file = None


def read_query_log(path: str | Path) -> list[QueryLogRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(QueryLogRecord(**json.loads(line)))
    return records


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    @property
    def service(self) -> ScoringService:
        return self.server.service  # type: ignore[attr-defined]

    def log_message(self, fmt, *args):  # default stderr chatter off
        logger.debug("%s %s", self.address_string(), fmt % args)

    def _send_json(self, status: int, body: dict) -> None:
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        url = urlparse(self.path)
        try:
            if url.path == "/health":
                self._send_json(200, self.service.health())
            elif url.path == "/psi":
                params = parse_qs(url.query)
                window = None
                if "window" in params:
                    try:
                        window = int(params["window"][0])
                    except ValueError:
                        raise ServiceError(400, "window: expected a positive integer")
                self._send_json(200, self.service.psi_over_window(window))
            else:
                self._send_json(404, {"error": f"unknown path {url.path}"})
        except ServiceError as exc:
            self._send_json(exc.status, {"error": exc.message})
        except Exception as exc:
            logger.exception("GET %s failed", self.path)
            self._send_json(500, {"error": str(exc)})

    def do_POST(self):
        url = urlparse(self.path)
        if url.path != "/score":
            self._send_json(404, {"error": f"unknown path {url.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", 0))
            if length <= 0:
                raise ServiceError(400, "body: empty request body")
            raw = self.rfile.read(length)
            try:
                payload = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ServiceError(400, f"body: invalid JSON ({exc.msg})") from exc
            self._send_json(200, self.service.score_payload(payload))
        except ServiceError as exc:
            self._send_json(exc.status, {"error": exc.message})
        except Exception as exc:
            logger.exception("POST /score failed")
            self._send_json(500, {"error": str(exc)})


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 128  # survive bursts of concurrent connections


def make_server(service: ScoringService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    """Build (but do not start) the HTTP server; port 0 picks a free port."""
    server = _Server((host, port), _Handler)
    server.service = service  # type: ignore[attr-defined]
    return server


def serve(
    scorer_path: str | Path,
    host: str = "127.0.0.1",
    port: int = 8080,
    encoder_path: str | Path | None = None,
    vocab_path: str | Path | None = None,
    log_path: str | Path | None = None,
) -> None:
    """Run the scoring service until interrupted."""
    service = ScoringService.from_files(scorer_path, encoder_path, vocab_path, log_path)
    server = make_server(service, host, port)
    logger.info("scoring service on %s:%d", *server.server_address)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        service.close()
