"""Line-delimited JSON records, class mappings and calibration-model files.

Infinite values are written as the strings ``"inf"`` / ``"-inf"`` so every
file stays strict JSON.
"""

from __future__ import annotations

import json
import math
import os
from typing import Iterable, Iterator, Mapping, Optional

import numpy as np

from .pipeline import CalibrationModel, TwoStepPrediction
from .records import DetectionRecord, GroundTruthObject, MatchedSample

INF_TOKEN = "inf"
NEG_INF_TOKEN = "-inf"


class DataError(ValueError):
    """Input file content violates the record schema."""


def encode_float(v: float):
    v = float(v)
    if math.isinf(v):
        return INF_TOKEN if v > 0 else NEG_INF_TOKEN
    if math.isnan(v):
        raise ValueError("NaN cannot be serialized")
    return v


def decode_float(v) -> float:
    if v == INF_TOKEN:
        return math.inf
    if v == NEG_INF_TOKEN:
        return -math.inf
    return float(v)


def encode_list(values) -> list:
    return [encode_float(v) for v in np.ravel(values)]


def decode_list(values) -> list[float]:
    return [decode_float(v) for v in values]


def dumps_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=False, separators=(",", ":"))


def read_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object per line")
            yield lineno, obj


def write_jsonl(path, rows: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(dumps_line(row))
            fh.write("\n")
            n += 1
    return n


def _optional(obj, key):
    v = obj.get(key)
    return None if v is None else decode_list(v)


def detection_from_dict(obj: dict) -> DetectionRecord:
    for key in ("image_id", "box", "probs"):
        if key not in obj:
            raise ValueError(f"missing required field {key!r}")
    return DetectionRecord(
        image_id=obj["image_id"],
        box=decode_list(obj["box"]),
        probs=[float(p) for p in obj["probs"]],
        confidence=float(obj.get("confidence", 1.0)),
        sigma=_optional(obj, "sigma"),
        q_lo=_optional(obj, "q_lo"),
        q_hi=_optional(obj, "q_hi"),
        image_width=obj.get("image_width"),
        image_height=obj.get("image_height"),
    )


def detection_to_dict(rec: DetectionRecord) -> dict:
    d = {
        "image_id": rec.image_id,
        "box": encode_list(rec.box),
        "probs": encode_list(rec.probs),
        "confidence": rec.confidence,
    }
    for key in ("sigma", "q_lo", "q_hi"):
        v = getattr(rec, key)
        if v is not None:
            d[key] = encode_list(v)
    for key in ("image_width", "image_height"):
        v = getattr(rec, key)
        if v is not None:
            d[key] = float(v)
    return d


def truth_from_dict(obj: dict, class_mapping: Optional[Mapping] = None) -> GroundTruthObject:
    for key in ("image_id", "box", "label"):
        if key not in obj:
            raise ValueError(f"missing required field {key!r}")
    label = obj["label"]
    if class_mapping is not None:
        if str(label) not in class_mapping:
            raise ValueError(f"label {label!r} is not in the class mapping")
        label = class_mapping[str(label)]
    elif isinstance(label, str):
        raise ValueError(f"string label {label!r} needs a class mapping")
    if isinstance(label, float) and not label.is_integer():
        raise ValueError(f"label must be an integer class id, got {label!r}")
    return GroundTruthObject(obj["image_id"], decode_list(obj["box"]), int(label))


def truth_to_dict(obj: GroundTruthObject) -> dict:
    return {"image_id": obj.image_id, "box": encode_list(obj.box), "label": obj.label}


def _load(path, parse, lenient: bool, stats: Optional[dict]):
    records, dropped = [], 0
    for lineno, obj in read_jsonl(path):
        try:
            records.append(parse(obj))
        except (ValueError, TypeError) as exc:
            if not lenient:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            dropped += 1
    if stats is not None:
        stats["dropped"] = dropped
    return records


def load_detections(path, lenient: bool = False, stats: Optional[dict] = None) -> list[DetectionRecord]:
    """Read one detection per line; ``lenient`` drops invalid lines and
    reports their count in ``stats['dropped']``."""
    return _load(path, detection_from_dict, lenient, stats)


def load_truth(
    path, class_mapping: Optional[Mapping] = None, lenient: bool = False, stats: Optional[dict] = None
) -> list[GroundTruthObject]:
    return _load(path, lambda o: truth_from_dict(o, class_mapping), lenient, stats)


def save_detections(path, records: Iterable[DetectionRecord]) -> int:
    return write_jsonl(path, (detection_to_dict(r) for r in records))


def save_truth(path, records: Iterable[GroundTruthObject]) -> int:
    return write_jsonl(path, (truth_to_dict(r) for r in records))


def load_class_mapping(path) -> dict[str, int]:
    """JSON object mapping source label names to class ids, e.g.
    ``{"person": 0, "rider": 0, "car": 1}``."""
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: malformed JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise DataError(f"{path}: class mapping must be a JSON object")
    mapping = {}
    for name, cid in raw.items():
        if not isinstance(cid, int) or isinstance(cid, bool) or cid < 0:
            raise DataError(f"{path}: class id for {name!r} must be a non-negative integer")
        mapping[str(name)] = cid
    return mapping


# -- matched samples -----------------------------------------------------------


def matched_to_dict(s: MatchedSample) -> dict:
    return {
        "image_id": s.image_id,
        "iou": s.iou,
        "prediction_index": s.prediction_index,
        "truth_index": s.truth_index,
        "prediction": detection_to_dict(s.prediction),
        "truth": truth_to_dict(s.truth),
    }


def matched_from_dict(obj: dict) -> MatchedSample:
    for key in ("prediction", "truth"):
        if key not in obj:
            raise ValueError(f"missing required field {key!r}")
    pred = detection_from_dict(obj["prediction"])
    truth = truth_from_dict(obj["truth"])
    return MatchedSample(
        image_id=obj.get("image_id", truth.image_id),
        prediction=pred,
        truth=truth,
        iou=float(obj.get("iou", math.nan)),
        truth_index=int(obj.get("truth_index", -1)),
        prediction_index=int(obj.get("prediction_index", -1)),
    )


def save_matched(path, samples: Iterable[MatchedSample]) -> int:
    return write_jsonl(path, (matched_to_dict(s) for s in samples))


def load_matched(path, lenient: bool = False, stats: Optional[dict] = None) -> list[MatchedSample]:
    return _load(path, matched_from_dict, lenient, stats)


# -- calibration model --------------------------------------------------------------


def dumps_model(model: CalibrationModel) -> str:
    return json.dumps(model.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def loads_model(text: str) -> CalibrationModel:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed model file ({exc.msg})") from None
    try:
        return CalibrationModel.from_dict(d)
    except (KeyError, TypeError) as exc:
        raise DataError(f"incomplete model file: {exc}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None


def save_model(model: CalibrationModel, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_model(model))
    os.replace(tmp, path)


def load_model(path) -> CalibrationModel:
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read())


# -- predictions ---------------------------------------------------------------------


def prediction_rows(records, out: TwoStepPrediction, truths=None) -> Iterator[dict]:
    """One output row per detection: the detection itself plus its label
    set, selected quantiles and interval bounds."""
    for i, rec in enumerate(records):
        row = detection_to_dict(rec)
        row["label_set"] = [int(j) for j in np.flatnonzero(out.label_mask[i])]
        row["selected_quantiles"] = encode_list(out.selected_quantiles[i])
        row["lo"] = encode_list(out.lo[i])
        row["hi"] = encode_list(out.hi[i])
        row["sidedness"] = out.sidedness.value
        if truths is not None:
            row["truth"] = truth_to_dict(truths[i])
        yield row


def load_predictions(path) -> list[dict]:
    """Prediction rows with decoded bounds under ``lo``/``hi`` and the
    detection itself under ``detection``."""
    rows = []
    for lineno, obj in read_jsonl(path):
        try:
            rows.append(
                {
                    "detection": detection_from_dict(obj),
                    "label_set": [int(j) for j in obj["label_set"]],
                    "lo": decode_list(obj["lo"]),
                    "hi": decode_list(obj["hi"]),
                    "selected_quantiles": decode_list(obj["selected_quantiles"]),
                    "sidedness": obj.get("sidedness", "two_sided"),
                }
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: invalid prediction row ({exc})") from None
    return rows
