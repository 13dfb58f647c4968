import configparser
import json
import math
import pathlib

import numpy as np

from common.structs import (
    Distribution,
    DistributionError,
    TriangleError,
)

GRID_TOLERANCE = 1e-9


class ParserError(TriangleError, ValueError):
    def __init__(self, message: str, dump=None):
        super().__init__(message)
        self.dump = dump


def distribution_csv(text: str, source: str = "<csv>") -> Distribution:
    lines = [line.strip() for line in text.splitlines()]
    if not lines or lines[0].replace(" ", "") != "a,b,c,p":
        raise ParserError(f"{source}: line 1: expected header 'a,b,c,p'", dump=lines[:1])
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        fields = line.split(",")
        if len(fields) != 4:
            raise ParserError(f"{source}: line {lineno}: expected 4 fields, got {len(fields)}", dump=line)
        try:
            a, b, c = (int(field) for field in fields[:3])
            p = float(fields[3])
        except ValueError:
            raise ParserError(f"{source}: line {lineno}: malformed row", dump=line)
        rows.append((a, b, c, p))
    cardinality = round(len(rows) ** (1 / 3))
    if cardinality < 1 or cardinality ** 3 != len(rows):
        raise ParserError(f"{source}: {len(rows)} rows is not a cube of the outcome cardinality")
    tensor = np.full((cardinality,) * 3, math.nan)
    for a, b, c, p in rows:
        if not all(0 <= x < cardinality for x in (a, b, c)):
            raise ParserError(f"{source}: outcome ({a},{b},{c}) out of range for cardinality {cardinality}")
        tensor[a, b, c] = p
    if np.isnan(tensor).any():
        raise ParserError(f"{source}: duplicate or missing outcomes")
    try:
        return Distribution.from_tensor(tensor)
    except DistributionError as exc:
        raise ParserError(f"{source}: {exc.message}")


def distribution_json(text: str, source: str = "<json>") -> Distribution:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParserError(f"{source}: malformed JSON at line {exc.lineno} column {exc.colno} (offset {exc.pos})")
    try:
        return Distribution(int(data["cardinality"]), np.array(data["probs"], dtype=float))
    except (KeyError, TypeError) as exc:
        raise ParserError(f"{source}: missing or invalid field {exc}")
    except DistributionError as exc:
        raise ParserError(f"{source}: {exc.message}")


def read_distribution(path: pathlib.Path) -> Distribution:
    path = pathlib.Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        return distribution_json(text, str(path))
    return distribution_csv(text, str(path))


def grid(token: str) -> list[float]:
    # "start:stop:step" (stop included when it lands on a step multiple) or "x1,x2,..."
    token = token.strip()
    if ":" in token:
        parts = token.split(":")
        if len(parts) != 3:
            raise ParserError(f"Malformed grid '{token}': expected start:stop:step")
        try:
            start, stop, step = (float(part) for part in parts)
        except ValueError:
            raise ParserError(f"Malformed grid '{token}': non-numeric bound")
        if step <= 0 or stop < start:
            raise ParserError(f"Malformed grid '{token}': needs step > 0 and stop >= start")
        count = math.floor((stop - start) / step + GRID_TOLERANCE)
        values = [start + i * step for i in range(count + 1)]
        if abs(start + count * step - stop) < GRID_TOLERANCE:
            values[-1] = stop
        return [round(value, 12) for value in values]
    try:
        values = [float(part) for part in token.split(",") if part.strip()]
    except ValueError:
        raise ParserError(f"Malformed grid '{token}': non-numeric entry")
    if not values:
        raise ParserError("Empty grid")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ParserError(f"Grid '{token}' is not strictly increasing")
    return values


def config_file(text: str, source: str = "<config>") -> dict[str, str]:
    # Plain key=value lines; configparser needs a section header
    parser = configparser.RawConfigParser(delimiters=("=",), comment_prefixes=("#", ";"), strict=True)
    parser.optionxform = lambda option: option.strip().lstrip("-")
    try:
        parser.read_string("[run]\n" + text, source=source)
    except configparser.Error as exc:
        raise ParserError(f"{source}: {exc}")
    return dict(parser.items("run"))


def sweep_csv(text: str, source: str = "<sweep>") -> list[tuple[float, float, float, str]]:
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines or lines[0] != "param,raw_distance,smoothed_distance,model_file":
        raise ParserError(f"{source}: line 1: expected sweep header")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 4:
            raise ParserError(f"{source}: line {lineno}: expected 4 fields", dump=line)
        try:
            rows.append((float(fields[0]), float(fields[1]), float(fields[2]), fields[3]))
        except ValueError:
            raise ParserError(f"{source}: line {lineno}: malformed row", dump=line)
    return rows
