"""
Chat-completion vision-language models as volume estimation baselines.

Each test item is sent to a chat-completion endpoint with one of three fixed
prompts, the answer is parsed into a volume and the results are collected into
a PredictionSet that can be evaluated like the predictions of the fusion
model. Transports are pluggable: a live OpenAI-compatible client, a recorder
that writes every exchange to a tape, and a replayer that answers from a tape
without network access.
"""

import base64
import hashlib
import io
import json
import logging
import math
import os
import re
import threading
import time
import warnings
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from stereovol.exceptions import (
    MissingContextError,
    NonPositiveVolumeError,
    TransportError,
    UnparseableResponseError,
)
from stereovol.models import PredictionRecord, PredictionSet, StereoSample
from stereovol.utils import verify_range, verify_set

logger = logging.getLogger(__name__)

VLM_MODES = ["single_no_context", "single_with_context", "stereo"]

ENDPOINT_ENV = "STEREOVOL_VLM_ENDPOINT"
API_KEY_ENV = "STEREOVOL_VLM_API_KEY"
MODEL_ENV = "STEREOVOL_VLM_MODEL"
DEFAULT_MODEL = "gpt-5"

SINGLE_NO_CONTEXT_PROMPT = (
    "Answer with ONLY a single floating-point number (milliliters). "
    "No units, no extra text.\n"
    "Estimate the object's volume in milliliters from the image.\n"
    "Return ONLY a single floating-point number (milliliters), no units, no "
    "words, no punctuation, no JSON, no code fences."
)

SINGLE_WITH_CONTEXT_PROMPT = (
    "Answer with ONLY a single floating-point number (milliliters). "
    "No units, no extra text.\n"
    "Given this is an image of {context_text}, estimate its volume in "
    "milliliters.\n"
    "Return ONLY a single floating-point number (milliliters), no units, no "
    "words, no punctuation, no JSON, no code fences."
)

STEREO_PROMPT = (
    "You are given TWO images of the SAME object, captured from different "
    "viewpoints.\n"
    "Use both images jointly (stereo cues, parallax, shape consistency) to "
    "estimate the object's volume in milliliters.\n"
    "Assume similar scale and camera distance; modest viewpoint change is "
    "present.\n"
    "RESPONSE FORMAT (STRICT JSON, one object, no code fences, no extra text):\n"
    "{\n"
    '  "volume_ml": <float>,\n'
    '  "explanation": "<2-4 concise sentences on the visual cues you used>"\n'
    "}\n"
    "Rules:\n"
    "- Return ONLY the JSON object above (no markdown, no reasoning sections, "
    "no additional keys).\n"
    '- "volume_ml" MUST be a single floating-point number (no units, no '
    "commas).\n"
    "Return ONLY the final JSON object; do not include chain-of-thought or "
    "extra text."
)

STEREO_KEYS = {"volume_ml", "explanation"}

_FLOAT = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?")


def render_vlm_prompt(mode: str, context_text: Optional[str] = None) -> str:
    """The fixed prompt of a query mode.

    ``context_text`` is required by "single_with_context" and ignored by the
    other modes.
    """
    verify_set("mode", mode, VLM_MODES)
    if mode == "single_with_context":
        if not context_text:
            raise MissingContextError(
                "The single_with_context mode needs a context text"
            )
        return SINGLE_WITH_CONTEXT_PROMPT.replace("{context_text}", context_text)
    if mode == "stereo":
        return STEREO_PROMPT
    return SINGLE_NO_CONTEXT_PROMPT


def context_for_class(class_label: str) -> str:
    """Context text naming a class with its indefinite article."""
    name = class_label.replace("_", " ").strip()
    article = "an" if name[:1].lower() in "aeiou" else "a"
    return f"{article} {name}"


def _positive(volume, response):
    if not math.isfinite(volume):
        raise UnparseableResponseError(f"Volume in {response!r} is not finite")
    if not volume > 0:
        raise NonPositiveVolumeError(f"Response {response!r} gives volume {volume}")
    return volume


def parse_vlm_volume(response: str, mode: str) -> float:
    """Volume in mL from a model answer

    Arguments:
    ----------

        response: str
            Raw answer text.

        mode: str
            Query mode. Single-image answers must be one bare number, stereo
            answers one JSON object with a numeric "volume_ml" and an optional
            "explanation".

    Returns:
    --------

        float
            The volume, > 0.
    """
    verify_set("mode", mode, VLM_MODES)
    text = response.strip()
    if mode != "stereo":
        if not _FLOAT.fullmatch(text):
            raise UnparseableResponseError(
                f"Expected a single number, got {response!r}"
            )
        return _positive(float(text), response)

    try:
        payload = json.loads(text)
    except json.JSONDecodeError as err:
        raise UnparseableResponseError(
            f"Expected a JSON object, got {response!r}"
        ) from err
    if not isinstance(payload, dict) or "volume_ml" not in payload:
        raise UnparseableResponseError(f"No 'volume_ml' in {response!r}")
    if set(payload) - STEREO_KEYS:
        raise UnparseableResponseError(
            f"Unexpected keys {sorted(set(payload) - STEREO_KEYS)} in {response!r}"
        )
    volume = payload["volume_ml"]
    if isinstance(volume, bool) or not isinstance(volume, (int, float)):
        raise UnparseableResponseError(
            f"'volume_ml' must be a number, got {volume!r}"
        )
    return _positive(float(volume), response)


def image_data_url(image) -> str:
    """Base64 data URL of an image path or an H x W x 3 array in [0, 1]."""
    if isinstance(image, np.ndarray):
        buffer = io.BytesIO()
        pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
        Image.fromarray(pixels).save(buffer, format="PNG")
        data, mime = buffer.getvalue(), "image/png"
    else:
        data = Path(image).read_bytes()
        suffix = Path(image).suffix.lower().lstrip(".")
        mime = "image/jpeg" if suffix in ("jpg", "jpeg") else f"image/{suffix or 'png'}"
    return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


@dataclass(frozen=True)
class VlmQuery:
    """One request: a prompt and one image, or two for stereo."""

    item_id: str
    mode: str
    images: tuple
    prompt: str
    context_text: Optional[str] = None

    def __post_init__(self):
        verify_set("mode", self.mode, VLM_MODES)
        expected = 2 if self.mode == "stereo" else 1
        if len(self.images) != expected:
            raise ValueError(
                f"Mode '{self.mode}' takes {expected} images, got {len(self.images)}"
            )
        if (self.context_text is not None) != (self.mode == "single_with_context"):
            raise MissingContextError(
                "Context text is given exactly in the single_with_context mode"
            )

    @property
    def key(self) -> str:
        """Tape key: digest of the prompt and of every image."""
        sha = hashlib.sha256(self.prompt.encode("utf-8"))
        for image in self.images:
            sha.update(hashlib.sha256(image.encode("ascii")).digest())
        return sha.hexdigest()


def build_query(
    sample: StereoSample, mode: str, context_text: Optional[str] = None
) -> VlmQuery:
    """Query for one sample; single-image modes use the left image."""
    if mode == "single_with_context" and context_text is None:
        context_text = context_for_class(sample.class_label)
    if mode != "single_with_context":
        context_text = None
    images = (sample.left_image, sample.right_image)
    if mode != "stereo":
        images = images[:1]
    return VlmQuery(
        item_id=sample.item_id,
        mode=mode,
        images=tuple(image_data_url(image) for image in images),
        prompt=render_vlm_prompt(mode, context_text),
        context_text=context_text,
    )


class ChatTransport(ABC):
    """Sends one query to a chat-completion model and returns its text."""

    model = "unknown"
    temperature: Optional[float] = None

    @abstractmethod
    def complete(self, query: VlmQuery) -> str:
        """Answer text; raises TransportError when the request fails."""


class OpenAIChatTransport(ChatTransport):
    """OpenAI-compatible chat-completion endpoint.

    Endpoint, key and model default to the STEREOVOL_VLM_ENDPOINT,
    STEREOVOL_VLM_API_KEY and STEREOVOL_VLM_MODEL environment variables.
    """

    def __init__(
        self,
        model: Optional[str] = None,
        base_url: Optional[str] = None,
        api_key: Optional[str] = None,
        temperature: Optional[float] = None,
        timeout: float = 120.0,
        client=None,
    ):
        self.model = model or os.environ.get(MODEL_ENV, DEFAULT_MODEL)
        self.temperature = temperature
        if client is None:
            try:
                import openai
            except ImportError as err:
                raise TransportError(
                    "The OpenAI transport needs the 'vlm' extra "
                    "(pip install stereovol[vlm])"
                ) from err
            client = openai.OpenAI(
                base_url=base_url or os.environ.get(ENDPOINT_ENV),
                api_key=api_key or os.environ.get(API_KEY_ENV),
                timeout=timeout,
                max_retries=0,
            )
        self._client = client

    def complete(self, query):
        content = [{"type": "text", "text": query.prompt}] + [
            {"type": "image_url", "image_url": {"url": url}} for url in query.images
        ]
        kwargs = {}
        if self.temperature is not None:
            kwargs["temperature"] = self.temperature
        try:
            response = self._client.chat.completions.create(
                model=self.model,
                messages=[{"role": "user", "content": content}],
                **kwargs,
            )
        except Exception as err:
            raise TransportError(f"Chat completion failed: {err}") from err
        text = response.choices[0].message.content
        if text is None:
            raise TransportError("Chat completion returned no text")
        return text


class ReplayTransport(ChatTransport):
    """Answers queries from a tape written by RecordingTransport."""

    def __init__(self, path):
        self.path = Path(path)
        self._responses: Dict[str, str] = {}
        with open(self.path, encoding="utf-8") as file:
            for line in file:
                if line.strip():
                    record = json.loads(line)
                    self._responses[record["key"]] = record["response"]
                    self.model = record.get("model", self.model)

    def __len__(self):
        return len(self._responses)

    def complete(self, query):
        try:
            return self._responses[query.key]
        except KeyError as err:
            raise TransportError(
                f"No recorded response for item '{query.item_id}' in {self.path}"
            ) from err


class RecordingTransport(ChatTransport):
    """Forwards queries to another transport and appends each exchange to a tape."""

    def __init__(self, inner: ChatTransport, path):
        self.inner = inner
        self.model = inner.model
        self.temperature = inner.temperature
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def complete(self, query):
        response = self.inner.complete(query)
        record = {
            "key": query.key,
            "item_id": query.item_id,
            "mode": query.mode,
            "model": self.model,
            "response": response,
        }
        with self._lock, open(self.path, "a", encoding="utf-8") as file:
            file.write(json.dumps(record, sort_keys=True) + "\n")
        return response


@dataclass
class VlmRunResult:
    """Parsed predictions of a VLM run and what went wrong on the way."""

    predictions: PredictionSet
    mode: str
    model: str
    temperature: Optional[float]
    attempts: Dict[str, int] = field(default_factory=dict)
    missing: Dict[str, str] = field(default_factory=dict)  # item id -> reason

    @property
    def total_attempts(self):
        return sum(self.attempts.values())

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "model": self.model,
            "temperature": self.temperature,
            "n_items": len(self.predictions) + len(self.missing),
            "n_predicted": len(self.predictions),
            "n_missing": len(self.missing),
            "total_attempts": self.total_attempts,
            "missing": dict(sorted(self.missing.items())),
        }


def complete_with_retries(
    transport: ChatTransport,
    query: VlmQuery,
    max_attempts: int = 3,
    backoff_s: float = 1.0,
    max_backoff_s: float = 30.0,
    sleep: Callable[[float], None] = time.sleep,
):
    """Answer text and number of attempts, retrying transport failures.

    The wait before attempt k + 1 is ``backoff_s * 2**(k - 1)``, at most
    ``max_backoff_s``.
    """
    verify_range("max_attempts", max_attempts, 1, 100)
    for attempt in range(1, max_attempts + 1):
        try:
            return transport.complete(query), attempt
        except TransportError as err:
            if attempt == max_attempts:
                raise
            delay = min(max_backoff_s, backoff_s * 2 ** (attempt - 1))
            logger.warning(
                "Attempt %d for item '%s' failed (%s), retrying in %.1f s",
                attempt,
                query.item_id,
                err,
                delay,
            )
            sleep(delay)


def run_vlm_baseline(
    samples: Sequence[StereoSample],
    mode: str,
    transport: ChatTransport,
    max_workers: int = 4,
    max_attempts: int = 3,
    backoff_s: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
    context_texts: Optional[Dict[str, str]] = None,
) -> VlmRunResult:
    """Query a chat-completion model for every sample

    Arguments:
    ----------

        samples: list
            Test samples. Single-image modes send the left image.

        mode: str
            One of "single_no_context", "single_with_context" and "stereo".

        transport: ChatTransport
            Live, recording or replaying transport.

        max_workers: int
            Concurrent requests.

        max_attempts, backoff_s: int, float
            Retry policy for transport failures, see ``complete_with_retries``.

        sleep: callable
            Wait function used between retries.

        context_texts: dict
            Item id -> context text for "single_with_context". Items without
            an entry use their class name.

    Returns:
    --------

        VlmRunResult
            Predictions ordered by item id. Items whose answer cannot be
            parsed, or whose requests keep failing, are left out and listed
            in ``missing``.
    """
    verify_set("mode", mode, VLM_MODES)
    verify_range("max_workers", max_workers, 1, 256)
    context_texts = context_texts or {}
    queries = {
        s.item_id: build_query(s, mode, context_texts.get(s.item_id)) for s in samples
    }
    by_id = {s.item_id: s for s in samples}

    def run(item_id):
        try:
            return complete_with_retries(
                transport, queries[item_id], max_attempts, backoff_s, sleep=sleep
            )
        except TransportError as err:
            return err, max_attempts

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        answers = dict(zip(sorted(queries), pool.map(run, sorted(queries))))

    result_records: List[PredictionRecord] = []
    attempts, missing = {}, {}
    for item_id in sorted(answers):
        answer, attempts[item_id] = answers[item_id]
        if isinstance(answer, TransportError):
            missing[item_id] = f"transport: {answer}"
            continue
        try:
            volume = parse_vlm_volume(answer, mode)
        except (UnparseableResponseError, NonPositiveVolumeError) as err:
            missing[item_id] = f"parse: {err}"
            continue
        sample = by_id[item_id]
        result_records.append(
            PredictionRecord(
                item_id=item_id,
                class_label=sample.class_label,
                volume_est=volume,
                volume_gt=sample.volume_gt,
                prompt=queries[item_id].prompt,
                food_code=sample.food_code,
            )
        )

    if missing:
        warnings.warn(
            f"{len(missing)} of {len(answers)} items have no usable answer and "
            "are excluded from the metrics",
            stacklevel=2,
        )
    logger.info(
        "VLM baseline %s: %d predictions, %d missing, %d attempts",
        mode,
        len(result_records),
        len(missing),
        sum(attempts.values()),
    )
    return VlmRunResult(
        predictions=PredictionSet(tuple(result_records), method=f"vlm_{mode}"),
        mode=mode,
        model=transport.model,
        temperature=transport.temperature,
        attempts=attempts,
        missing=missing,
    )
