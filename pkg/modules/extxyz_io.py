# modules/extxyz_io.py

"""
Extended XYZ Module

Reader and canonical writer for extxyz: an atom-count line, a comment line of
key=value pairs (Lattice, Properties, energy, pbc, charge, stress, ...) and one
line per atom laid out as the Properties key declares.
"""

import logging
import shlex
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.atomic_graph import AtomicStructure
from modules.elements import atomic_number, symbol
from modules.errors import DataError, GeometryError, ParseError
from modules.file_utils import atomic_write_text

LOG = logging.getLogger(__name__)

DEFAULT_PROPERTIES = "species:S:1:pos:R:3"
_RESERVED = {"Lattice", "Properties", "energy", "pbc", "charge", "total_charge", "stress"}
_VOIGT_FROM_MATRIX = [(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)]


# ==============================================================================
# COMMENT LINE
# ==============================================================================

def parse_comment(line: str, line_no: int) -> Dict[str, str]:
    try:
        tokens = shlex.split(line)
    except ValueError as e:
        raise ParseError(f"line {line_no}: cannot tokenize comment line: {e}")
    pairs: Dict[str, str] = {}
    for token in tokens:
        if "=" in token:
            key, value = token.split("=", 1)
            pairs[key.strip()] = value.strip()
        else:
            pairs[token] = "T"
    return pairs


def parse_properties(text: str, line_no: int) -> List[Tuple[str, str, int]]:
    parts = text.split(":")
    if len(parts) % 3:
        raise ParseError(f"line {line_no}: Properties '{text}' is not a list of name:type:count triples")
    columns = []
    for i in range(0, len(parts), 3):
        name, kind, count = parts[i], parts[i + 1].upper(), parts[i + 2]
        if kind not in ("S", "R", "I", "L") or not count.isdigit():
            raise ParseError(f"line {line_no}: bad Properties column '{name}:{kind}:{count}'")
        columns.append((name, kind, int(count)))
    return columns


def _floats(text: str, count: int, key: str, line_no: int) -> np.ndarray:
    try:
        values = np.array([float(v) for v in text.replace(",", " ").split()])
    except ValueError:
        raise ParseError(f"line {line_no}: {key}='{text}' is not numeric")
    if values.size != count:
        raise ParseError(f"line {line_no}: {key} needs {count} values, got {values.size}")
    return values


def _parse_pbc(text: str, line_no: int) -> Tuple[bool, bool, bool]:
    flags = text.split()
    if len(flags) == 1:
        flags = flags * 3
    if len(flags) != 3:
        raise ParseError(f"line {line_no}: pbc='{text}' needs 3 flags")
    out = []
    for flag in flags:
        if flag.upper() in ("T", "TRUE", "1"):
            out.append(True)
        elif flag.upper() in ("F", "FALSE", "0"):
            out.append(False)
        else:
            raise ParseError(f"line {line_no}: bad pbc flag '{flag}'")
    return tuple(out)


def _info_value(text: str) -> Any:
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


# ==============================================================================
# READ
# ==============================================================================

def _parse_frame(lines: List[str], start: int, frame_index: int) -> Tuple[AtomicStructure, int]:
    count_line = lines[start].strip()
    try:
        n_atoms = int(count_line)
    except ValueError:
        raise ParseError(f"line {start + 1}: expected an atom count, got '{count_line}'")
    if n_atoms < 1:
        raise ParseError(f"line {start + 1}: atom count must be positive, got {n_atoms}")
    if start + 2 + n_atoms > len(lines):
        raise ParseError(f"frame {frame_index} is truncated: expected {n_atoms} atom lines after line {start + 2}")

    comment_no = start + 2
    pairs = parse_comment(lines[start + 1], comment_no)
    columns = parse_properties(pairs.get("Properties", DEFAULT_PROPERTIES), comment_no)
    width = sum(count for _, _, count in columns)

    cell = None
    if "Lattice" in pairs:
        cell = _floats(pairs["Lattice"], 9, "Lattice", comment_no).reshape(3, 3)
    if "pbc" in pairs:
        pbc = _parse_pbc(pairs["pbc"], comment_no)
    else:
        pbc = (cell is not None,) * 3

    data: Dict[str, List[Any]] = {name: [] for name, _, _ in columns}
    for row in range(n_atoms):
        line_no = start + 3 + row
        fields = lines[line_no - 1].split()
        if len(fields) != width:
            raise ParseError(f"line {line_no}: expected {width} columns per Properties, got {len(fields)}")
        offset = 0
        for name, kind, count in columns:
            chunk = fields[offset:offset + count]
            offset += count
            try:
                if kind == "R":
                    data[name].append([float(v) for v in chunk])
                elif kind == "I":
                    data[name].append([int(v) for v in chunk])
                else:
                    data[name].append(chunk)
            except ValueError:
                raise ParseError(f"line {line_no}: column '{name}' has non-numeric value {chunk}")

    if "pos" not in data:
        raise ParseError(f"line {comment_no}: Properties declares no 'pos' column")
    if "species" in data:
        try:
            species = [atomic_number(v[0]) for v in data["species"]]
        except DataError as e:
            raise ParseError(f"frame {frame_index}: {e}")
    elif "Z" in data:
        species = [int(v[0]) for v in data["Z"]]
    else:
        raise ParseError(f"line {comment_no}: Properties declares neither 'species' nor 'Z'")

    forces = np.array(data["forces"]) if "forces" in data else None
    energy = _floats(pairs["energy"], 1, "energy", comment_no)[0] if "energy" in pairs else None
    charge_key = "charge" if "charge" in pairs else ("total_charge" if "total_charge" in pairs else None)
    total_charge = None
    if charge_key:
        try:
            total_charge = int(float(pairs[charge_key]))
        except ValueError:
            raise ParseError(f"line {comment_no}: {charge_key}='{pairs[charge_key]}' is not numeric")

    stress = None
    if "stress" in pairs:
        values = pairs["stress"].split()
        if len(values) == 9:
            matrix = _floats(pairs["stress"], 9, "stress", comment_no).reshape(3, 3)
            stress = np.array([matrix[i, j] for i, j in _VOIGT_FROM_MATRIX])
        else:
            stress = _floats(pairs["stress"], 6, "stress", comment_no)

    info = {key: _info_value(value) for key, value in pairs.items() if key not in _RESERVED}
    try:
        structure = AtomicStructure(positions=np.array(data["pos"]), species=np.array(species), cell=cell, pbc=pbc,
                                    total_charge=total_charge, energy=energy, forces=forces, stress=stress, info=info)
    except (DataError, GeometryError) as e:
        raise ParseError(f"frame {frame_index} (line {start + 1}): {e}")
    return structure, start + 2 + n_atoms


def parse_extxyz_text(text: str) -> List[AtomicStructure]:
    lines = text.splitlines()
    frames = []
    cursor = 0
    while cursor < len(lines):
        if not lines[cursor].strip():
            cursor += 1
            continue
        structure, cursor = _parse_frame(lines, cursor, len(frames))
        frames.append(structure)
    return frames


def parse_extxyz(path: str) -> List[AtomicStructure]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError:
        raise ParseError(f"extxyz file not found: {path}")
    frames = parse_extxyz_text(text)
    LOG.info(f"✅ Parsed {len(frames)} frames from {path}")
    return frames


# ==============================================================================
# WRITE
# ==============================================================================

def _fmt(value: float) -> str:
    return f"{float(value):.17g}"


def _quote(value: Any) -> str:
    text = str(value)
    if any(ch.isspace() for ch in text) or not text:
        return '"' + text.replace('"', '\\"') + '"'
    return text


def format_frame(s: AtomicStructure) -> str:
    properties = DEFAULT_PROPERTIES + (":forces:R:3" if s.forces is not None else "")
    pairs = []
    if s.cell is not None:
        pairs.append('Lattice="' + " ".join(_fmt(v) for v in s.cell.reshape(-1)) + '"')
    pairs.append(f"Properties={properties}")
    if s.energy is not None:
        pairs.append(f"energy={_fmt(s.energy)}")
    if s.stress is not None:
        pairs.append('stress="' + " ".join(_fmt(v) for v in s.stress) + '"')
    if s.total_charge is not None:
        pairs.append(f"charge={int(s.total_charge)}")
    pairs.append('pbc="' + " ".join("T" if p else "F" for p in s.pbc) + '"')
    for key, value in s.info.items():
        pairs.append(f"{key}={_quote(value)}")

    lines = [str(s.n_atoms), " ".join(pairs)]
    for i in range(s.n_atoms):
        fields = [symbol(int(s.species[i]))] + [_fmt(v) for v in s.positions[i]]
        if s.forces is not None:
            fields += [_fmt(v) for v in s.forces[i]]
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def write_extxyz(path: str, structures: Sequence[AtomicStructure]) -> int:
    """Canonical extxyz, written atomically; returns the frame count."""
    atomic_write_text(path, "".join(format_frame(s) for s in structures))
    LOG.info(f"✅ Wrote {len(structures)} frames to {path}")
    return len(structures)
