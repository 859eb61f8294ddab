"""Tag-conditioned caption instructions and a JSON-over-HTTP caption client.

Wire contract::

    POST <endpoint>   {"image": "<base64 PNG>", "prompt": "<instruction>"}
    200               {"caption": "<text>"}

Tag detection itself is external: tags come from a constant list or from
per-record sidecar files (``hr/NNNNNN.tags``, comma separated).
"""

from __future__ import annotations

import base64
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import requests

from .dataset import read_manifest, read_manifest_header, write_manifest
from .imaging import encode_png, load_image

logger = logging.getLogger(__name__)

__all__ = [
    "ENDPOINT_ENV",
    "MAX_TAGS",
    "INSTRUCTION_TEMPLATE",
    "CaptionError",
    "CaptionTimeoutError",
    "CaptionHTTPError",
    "MalformedResponseError",
    "TagList",
    "CaptionResult",
    "build_instruction",
    "fetch_caption",
    "annotate_manifest",
    "AnnotationSummary",
]

ENDPOINT_ENV = "DEGPROMPT_CAPTION_ENDPOINT"
MAX_TAGS = 20
INSTRUCTION_TEMPLATE = (
    "Describe this image in one detailed sentence. The image contains: {tags}. "
    "Focus on these subjects and their visual attributes."
)


class CaptionError(Exception):
    pass


class CaptionTimeoutError(CaptionError):
    pass


class CaptionHTTPError(CaptionError):
    def __init__(self, status, message=""):
        self.status = status
        super().__init__(f"caption endpoint returned HTTP {status} {message}".strip())


class MalformedResponseError(CaptionError):
    pass


class TagList(tuple):
    """Lower-cased, de-duplicated tags in first-seen order."""

    def __new__(cls, tags=()):
        seen = []
        for t in tags:
            t = str(t).strip().lower()
            if t and t not in seen:
                seen.append(t)
        return super().__new__(cls, seen)


@dataclass(frozen=True)
class CaptionResult:
    caption: str
    model_id: str
    latency_ms: float
    attempts: int = 1


def build_instruction(tags, template=INSTRUCTION_TEMPLATE, max_tags=MAX_TAGS):
    """Fill the instruction template with at most ``max_tags`` tags."""
    tags = TagList(tags)
    if not tags:
        raise ValueError("at least one tag is needed to build an instruction")
    return template.format(tags=", ".join(tags[:max_tags]))


def _image_b64(image):
    path = Path(image)
    data = path.read_bytes()
    if not data.startswith(b"\x89PNG"):
        data = encode_png(load_image(path))
    return base64.b64encode(data).decode("ascii")


def fetch_caption(endpoint, image, instruction, timeout=10.0, retries=2, backoff=0.5,
                  session=None):
    """POST one caption request; retry transient failures with exponential backoff.

    Timeouts, connection errors and 5xx responses are transient and are
    retried ``retries`` times (sleeping ``backoff * 2**k``). 4xx responses
    and malformed bodies fail immediately.
    """
    payload = {"image": _image_b64(image), "prompt": instruction}
    http = session or requests
    last = None
    for attempt in range(retries + 1):
        if attempt:
            time.sleep(backoff * 2 ** (attempt - 1))
            logger.info("retrying caption request for %s (retry %d)", image, attempt)
        start = time.perf_counter()
        try:
            resp = http.post(endpoint, json=payload, timeout=timeout)
        except requests.Timeout as exc:
            last = CaptionTimeoutError(f"caption request timed out after {timeout}s")
            last.__cause__ = exc
            continue
        except requests.ConnectionError as exc:
            last = CaptionTimeoutError(f"cannot reach caption endpoint {endpoint}: {exc}")
            last.__cause__ = exc
            continue
        latency = (time.perf_counter() - start) * 1000.0
        if resp.status_code >= 500:
            last = CaptionHTTPError(resp.status_code)
            continue
        if not 200 <= resp.status_code < 300:
            raise CaptionHTTPError(resp.status_code)
        try:
            body = resp.json()
        except ValueError as exc:
            raise MalformedResponseError("response is not JSON") from exc
        caption = body.get("caption") if isinstance(body, dict) else None
        if not isinstance(caption, str) or not caption:
            raise MalformedResponseError("response lacks a non-empty 'caption' string")
        return CaptionResult(caption, str(body.get("model_id", "")), latency, attempt + 1)
    raise last


@dataclass
class AnnotationSummary:
    annotated: int
    skipped: int
    failed: int

    @property
    def warnings(self):
        return self.failed


def _tags_for(record, root, tag_source):
    if tag_source == "sidecar":
        side = (Path(root) / record.hr_path).with_suffix(".tags")
        if not side.is_file():
            raise FileNotFoundError(f"missing tag sidecar {side}")
        return TagList(side.read_text(encoding="utf-8").split(","))
    return TagList(tag_source)


def annotate_manifest(manifest, endpoint=None, tag_source=("object",), timeout=10.0,
                      retries=2, backoff=0.5, max_concurrency=4, template=INSTRUCTION_TEMPLATE):
    """Attach a caption to every record that lacks one, then rewrite the manifest.

    ``tag_source`` is a constant tag list or ``"sidecar"``. Failed records
    keep ``caption: null`` and are counted in the returned summary; they
    do not abort the batch. Records that already have a caption are left
    untouched, so re-running is idempotent.
    """
    endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
    if not endpoint:
        raise ValueError(f"no caption endpoint given and ${ENDPOINT_ENV} is unset")
    manifest = Path(manifest)
    root = manifest.parent
    header = read_manifest_header(manifest)
    records = read_manifest(manifest)
    todo = [i for i, r in enumerate(records) if r.caption is None]

    def work(i):
        r = records[i]
        try:
            instruction = build_instruction(_tags_for(r, root, tag_source), template)
            return fetch_caption(endpoint, root / r.lr_path, instruction, timeout, retries, backoff).caption
        except (CaptionError, OSError, ValueError) as exc:
            logger.warning("record %d: caption failed: %s", r.id, exc)
            return None

    with ThreadPoolExecutor(max_workers=max(1, max_concurrency)) as pool:
        captions = list(pool.map(work, todo))
    failed = 0
    for i, cap in zip(todo, captions):
        if cap is None:
            failed += 1
        else:
            records[i] = records[i].with_caption(cap)
    header = {k: v for k, v in header.items() if k not in ("kind", "schema_version")}
    write_manifest(records, manifest, header)
    return AnnotationSummary(len(todo) - failed, len(records) - len(todo), failed)
