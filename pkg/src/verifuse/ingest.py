"""Corpus ingestion: manifest loading, image fetching, cleaning and splitting.

Label encoding used throughout the package: ``fake`` is the positive class (1),
``real`` is the negative class (0).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import re
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

DATASETS = ("all_data", "weibo", "mediaeval", "synthetic")
LABELS = ("fake", "real")
LABEL_TO_INT = {"fake": 1, "real": 0}

# column name in the CSV -> NewsRecord field
SCHEMAS: dict[str, dict[str, str]] = {
    "all_data": {"id": "id", "title": "title", "text": "body", "image_url": "image_ref", "label": "label"},
    "weibo": {"id": "id", "title": "title", "text": "body", "image_url": "image_ref", "label": "label"},
    "synthetic": {"id": "id", "title": "title", "text": "body", "image_url": "image_ref", "label": "label"},
    "mediaeval": {"post_id": "id", "post_text": "body", "image_id": "image_ref", "label": "label"},
}

SPLIT_RATIOS = (0.7, 0.1, 0.2)
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".gif", ".bmp", ".webp")


class ManifestError(ValueError):
    """Raised when a manifest file cannot be read as a whole."""


@dataclass(frozen=True)
class NewsRecord:
    id: str
    title: str | None
    body: str | None
    image_ref: str | None
    label: str | None
    dataset: str
    text: str | None = None
    defects: tuple[str, ...] = ()

    @property
    def y(self) -> int:
        return LABEL_TO_INT[self.label]

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("defects")
        return d

    @classmethod
    def from_json(cls, d: dict) -> NewsRecord:
        return cls(**d)


@dataclass(frozen=True)
class FetchFailed:
    """Result of a fetch that could not produce a decodable image."""

    image_ref: str
    reason: str

    def __bool__(self) -> bool:
        return False


@dataclass(frozen=True)
class SplitManifest:
    seed: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    ratios: tuple[float, float, float] = SPLIT_RATIOS

    def ids(self, split: str) -> tuple[str, ...]:
        return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[split]

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "train_ids": list(self.train_ids),
            "val_ids": list(self.val_ids),
            "test_ids": list(self.test_ids),
        }
        return json.dumps(payload, indent=1, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> SplitManifest:
        d = json.loads(text)
        return cls(
            seed=int(d["seed"]),
            ratios=tuple(d["ratios"]),
            train_ids=tuple(d["train_ids"]),
            val_ids=tuple(d["val_ids"]),
            test_ids=tuple(d["test_ids"]),
        )


# ---------------------------------------------------------------------------
# Manifest loading
# ---------------------------------------------------------------------------


def _normalize_label(raw: str | None) -> str | None:
    if raw is None:
        return None
    value = raw.strip().lower()
    return value if value in LABELS else None


def _blank_to_none(value: str | None) -> str | None:
    if value is None or not value.strip():
        return None
    return value


def load_manifest(path: str | Path, dataset: str) -> list[NewsRecord]:
    """Read a per-dataset CSV manifest into raw, uncleaned records.

    Rows with missing values, a bad field count or an unknown label are kept
    but carry a ``defects`` note (with the CSV line number) so that
    :func:`clean_dataset` drops them. Structural problems with the file
    itself raise :class:`ManifestError`.
    """
    if dataset not in SCHEMAS:
        raise ManifestError(f"unknown dataset {dataset!r}; expected one of {DATASETS}")
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    schema = SCHEMAS[dataset]

    try:
        raw = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestError(f"{path}: not valid UTF-8 ({exc})") from exc

    reader = csv.DictReader(io.StringIO(raw, newline=""), strict=True)
    try:
        header = reader.fieldnames
    except csv.Error as exc:
        raise ManifestError(f"{path}: malformed CSV header: {exc}") from exc
    if header is None:
        raise ManifestError(f"{path}: empty file, expected header {list(schema)}")
    missing = [col for col in schema if col not in header]
    if missing:
        raise ManifestError(f"{path}: missing required column(s) {missing}; header is {header}")

    records: list[NewsRecord] = []
    try:
        for row in reader:
            line = reader.line_num
            defects = []
            if None in row:
                defects.append(f"line {line}: {len(row[None])} extra field(s)")
            values = {schema[col]: row.get(col) for col in schema}
            if any(v is None for v in values.values()):
                defects.append(f"line {line}: too few fields")
            for fld in ("body", "image_ref", "label") + (("title",) if "title" in schema.values() else ()):
                if _blank_to_none(values.get(fld)) is None:
                    defects.append(f"line {line}: null {fld}")
            label = _normalize_label(values.get("label"))
            if values.get("label") and label is None:
                defects.append(f"line {line}: invalid label {values['label']!r}")
            record_id = (values.get("id") or "").strip() or None
            if record_id is None:
                defects.append(f"line {line}: null id")
            records.append(
                NewsRecord(
                    id=record_id or f"<line {line}>",
                    title=_blank_to_none(values.get("title")) if "title" in schema.values() else "",
                    body=_blank_to_none(values.get("body")),
                    image_ref=_blank_to_none(values.get("image_ref")),
                    label=label,
                    dataset=dataset,
                    defects=tuple(defects),
                )
            )
    except csv.Error as exc:
        raise ManifestError(f"{path}: malformed CSV near line {reader.line_num}: {exc}") from exc

    for rec in records:
        for note in rec.defects:
            logger.warning("%s: %s", path.name, note)
    return records


# ---------------------------------------------------------------------------
# Image fetching
# ---------------------------------------------------------------------------


def _is_url(ref: str) -> bool:
    return ref.startswith(("http://", "https://"))


def _image_ext(data: bytes) -> str | None:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.verify()
            fmt = im.format
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError):
        return None
    return {"JPEG": ".jpg", "PNG": ".png"}.get(fmt or "", f".{(fmt or 'img').lower()}")


def _http_get(url: str, timeout: float) -> bytes:
    req = urllib.request.Request(url, headers={"User-Agent": "verifuse/0.1"})
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        status = getattr(resp, "status", 200)
        if status != 200:
            raise urllib.error.HTTPError(url, status, "non-200 response", resp.headers, None)
        return resp.read()


def resolve_local_ref(ref: str, base_dir: Path | None) -> Path | None:
    """Find a local file for ``ref``, trying image extensions for bare ids."""
    candidates = [Path(ref)]
    if base_dir is not None and not Path(ref).is_absolute():
        candidates.insert(0, base_dir / ref)
    for cand in list(candidates):
        if not cand.suffix:
            candidates.extend(cand.with_suffix(ext) for ext in IMAGE_EXTENSIONS)
    for cand in candidates:
        if cand.is_file():
            return cand
    return None


def cached_image_path(cache_dir: Path, record_id: str) -> Path | None:
    img_dir = Path(cache_dir) / "images"
    for ext in IMAGE_EXTENSIONS + (".img",):
        p = img_dir / f"{_safe_name(record_id)}{ext}"
        if p.is_file():
            return p
    return None


def _safe_name(record_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", record_id)


def fetch_image(
    image_ref: str,
    timeout_s: float = 10.0,
    retries: int = 2,
    *,
    record_id: str | None = None,
    cache_dir: str | Path | None = None,
    base_dir: str | Path | None = None,
    http_get: Callable[[str, float], bytes] = _http_get,
    backoff_s: float = 0.5,
) -> bytes | FetchFailed:
    """Return decodable image bytes for ``image_ref`` or a :class:`FetchFailed`.

    When ``cache_dir`` and ``record_id`` are given the bytes are stored as
    ``<cache_dir>/images/<id>.<ext>`` and later calls are served from disk
    without touching ``http_get``.
    """
    if not image_ref:
        raise ValueError("image_ref must be non-empty")
    if cache_dir is not None and record_id is not None:
        hit = cached_image_path(Path(cache_dir), record_id)
        if hit is not None:
            return hit.read_bytes()

    if _is_url(image_ref):
        data = None
        last_err = "unknown"
        for attempt in range(retries + 1):
            try:
                data = http_get(image_ref, timeout_s)
                break
            except Exception as exc:  # network errors come in many shapes
                last_err = f"{type(exc).__name__}: {exc}"
                if attempt < retries:
                    time.sleep(backoff_s * (2**attempt))
        if data is None:
            return FetchFailed(image_ref, last_err)
    else:
        local = resolve_local_ref(image_ref, Path(base_dir) if base_dir else None)
        if local is None:
            return FetchFailed(image_ref, "file not found")
        data = local.read_bytes()

    ext = _image_ext(data)
    if ext is None:
        return FetchFailed(image_ref, "payload is not a decodable image")
    if cache_dir is not None and record_id is not None:
        img_dir = Path(cache_dir) / "images"
        img_dir.mkdir(parents=True, exist_ok=True)
        target = img_dir / f"{_safe_name(record_id)}{ext}"
        tmp = target.with_suffix(target.suffix + ".part")
        tmp.write_bytes(data)
        tmp.replace(target)
    return data


def fetch_all(
    records: Sequence[NewsRecord],
    cache_dir: str | Path,
    *,
    base_dir: str | Path | None = None,
    workers: int = 8,
    timeout_s: float = 10.0,
    retries: int = 2,
    http_get: Callable[[str, float], bytes] = _http_get,
) -> set[str]:
    """Fetch every record's image into the cache; return ids that failed."""

    def one(rec: NewsRecord) -> tuple[str, bool]:
        if rec.image_ref is None:
            return rec.id, False
        res = fetch_image(
            rec.image_ref,
            timeout_s,
            retries,
            record_id=rec.id,
            cache_dir=cache_dir,
            base_dir=base_dir,
            http_get=http_get,
        )
        if isinstance(res, FetchFailed):
            logger.info("fetch failed for %s: %s", rec.id, res.reason)
            return rec.id, False
        return rec.id, True

    todo = [r for r in records if not r.defects]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(one, todo))
    return {rid for rid, ok in results if not ok}


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------

_URL_RE = re.compile(r"https?://\S*")
_MENTION_RE = re.compile(r"@\w+")
_EMOJI_RE = re.compile(
    "["
    "\U0001F600-\U0001F64F"  # emoticons
    "\U0001F300-\U0001F5FF"  # misc symbols and pictographs
    "\U0001F680-\U0001F6FF"  # transport and map
    "\U0001F900-\U0001F9FF"  # supplemental symbols and pictographs
    "\U0001F1E6-\U0001F1FF"  # regional indicator (flags)
    "]"
)
_WS_RE = re.compile(r"\s+")


def clean_tweet_text(text: str) -> str:
    """Strip hyperlinks, @-mentions and emoji, then normalise whitespace."""
    text = _URL_RE.sub(" ", text)
    text = _MENTION_RE.sub(" ", text)
    text = _EMOJI_RE.sub(" ", text)
    return _WS_RE.sub(" ", text).strip()


def clean_dataset(
    records: Iterable[NewsRecord], fetch_failed: Iterable[str] = ()
) -> list[NewsRecord]:
    """Drop unusable rows and fill in the joined ``text`` field.

    A row is dropped if it has any defect from loading, a null required
    attribute, an id listed in ``fetch_failed``, or empty text after tweet
    cleaning. Input order is preserved.
    """
    failed = set(fetch_failed)
    out = []
    for rec in records:
        if rec.defects or rec.id in failed:
            continue
        if rec.body is None or rec.image_ref is None or rec.label not in LABELS:
            continue
        if rec.dataset == "mediaeval":
            text = clean_tweet_text(rec.body)
            title = ""
        else:
            if rec.title is None:
                continue
            title = rec.title
            text = f"{rec.title} {rec.body}"
        if not text.strip():
            continue
        out.append(replace(rec, title=title, text=text, defects=()))
    return out


# ---------------------------------------------------------------------------
# Splitting and persistence
# ---------------------------------------------------------------------------


def split_sizes(n: int) -> tuple[int, int, int]:
    n_test = (2 * n) // 10
    n_val = n // 10
    return n - n_val - n_test, n_val, n_test


def split_dataset(records: Sequence[NewsRecord], seed: int) -> SplitManifest:
    """Seeded shuffle, then floor(0.2n) test, floor(0.1n) val, rest train."""
    n = len(records)
    if n < 10:
        raise ValueError(f"need at least 10 records to split 7:1:2, got {n}")
    ids = [r.id for r in records]
    if len(set(ids)) != n:
        raise ValueError("record ids are not unique")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    _, n_val, n_test = split_sizes(n)
    return SplitManifest(
        seed=seed,
        test_ids=tuple(shuffled[:n_test]),
        val_ids=tuple(shuffled[n_test : n_test + n_val]),
        train_ids=tuple(shuffled[n_test + n_val :]),
    )


def write_corpus(records: Iterable[NewsRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def read_corpus(path: str | Path) -> list[NewsRecord]:
    with open(path, encoding="utf-8") as fh:
        return [NewsRecord.from_json(json.loads(line)) for line in fh if line.strip()]
