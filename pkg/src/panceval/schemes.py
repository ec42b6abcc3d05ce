"""Label schemes and the harmonization recipe file."""

from __future__ import annotations

import sys
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SOURCES = ("PANORAMA", "TS", "derived", "background", "AMOS")
REF8_CODES = frozenset({0, 38, 39, 40, 41, 42, 43, 44})
PANCREAS_CODE = 44
AORTA_CODE = 40
ARTERIES_CODE = 43


class RecipeError(ValueError):
    """Malformed scheme or recipe definition."""


@dataclass(frozen=True)
class SchemeEntry:
    code: int
    name: str
    source: str


@dataclass(frozen=True)
class LabelScheme:
    name: str
    entries: tuple[SchemeEntry, ...]

    def __post_init__(self) -> None:
        codes = [e.code for e in self.entries]
        if len(set(codes)) != len(codes):
            raise RecipeError(f"scheme {self.name}: duplicate codes")
        if any(c < 0 for c in codes):
            raise RecipeError(f"scheme {self.name}: negative code")
        if 0 not in codes:
            raise RecipeError(f"scheme {self.name}: code 0 (background) missing")
        if self.by_code[0].name.lower() != "background":
            raise RecipeError(f"scheme {self.name}: code 0 must be named background")
        for e in self.entries:
            if e.source not in SOURCES:
                raise RecipeError(f"scheme {self.name}: unknown source {e.source!r}")

    @property
    def codes(self) -> tuple[int, ...]:
        return tuple(e.code for e in self.entries)

    @property
    def max_code(self) -> int:
        return max(self.codes)

    @property
    def by_code(self) -> dict[int, SchemeEntry]:
        return {e.code: e for e in self.entries}

    def code_of(self, name: str) -> int:
        for e in self.entries:
            if e.name == name:
                return e.code
        raise KeyError(f"{name!r} not in scheme {self.name}")


@dataclass(frozen=True)
class Recipe:
    """Parsed harmonization recipe.

    ``panorama_to_ref8`` and ``ts_to_all45`` are code-to-code tables keyed by
    source code. ``aorta_ts_code`` is the TS_117 code used as the aorta mask.
    """

    version: str
    ts_version: str
    schemes: Mapping[str, LabelScheme]
    panorama_to_ref8: Mapping[int, int]
    ts_to_all45: Mapping[int, int]
    aorta_ts_code: int
    arteries_code: int
    aorta_code: int
    body_code: int

    def scheme(self, name: str) -> LabelScheme:
        try:
            return self.schemes[name]
        except KeyError:
            raise KeyError(f"unknown scheme {name!r}; known: {sorted(self.schemes)}") from None


def _entries(name: str, raw: list[dict]) -> tuple[SchemeEntry, ...]:
    try:
        return tuple(SchemeEntry(int(e["code"]), str(e["name"]), str(e["source"])) for e in raw)
    except (KeyError, TypeError) as exc:
        raise RecipeError(f"scheme {name}: malformed entry ({exc})") from None


def parse_recipe(doc: Mapping) -> Recipe:
    raw_schemes = doc.get("schemes", {})
    schemes: dict[str, LabelScheme] = {}
    # schemes that list only codes borrow entries from ALL_45
    for name, body in raw_schemes.items():
        if "entries" in body:
            schemes[name] = LabelScheme(name, _entries(name, body["entries"]))
    for name, body in raw_schemes.items():
        if "entries" in body:
            continue
        parent = schemes.get(body.get("inherit", "ALL_45"))
        if parent is None:
            raise RecipeError(f"scheme {name}: no parent scheme to inherit entries from")
        lookup = parent.by_code
        try:
            entries = tuple(lookup[int(c)] for c in body["codes"])
        except KeyError as exc:
            raise RecipeError(f"scheme {name}: code {exc} not in parent scheme") from None
        schemes[name] = LabelScheme(name, entries)
    for required in ("ALL_45", "REF_8", "PANORAMA", "TS_117"):
        if required not in schemes:
            raise RecipeError(f"recipe lacks scheme {required}")

    ts = schemes["TS_117"]
    all45 = schemes["ALL_45"]
    ref8 = schemes["REF_8"]
    pano = schemes["PANORAMA"]

    panorama_to_ref8 = {int(k): int(v) for k, v in doc["panorama_to_ref8"].items()}
    missing = set(pano.codes) - set(panorama_to_ref8)
    if missing:
        raise RecipeError(f"panorama_to_ref8 does not cover PANORAMA codes {sorted(missing)}")
    stray = set(panorama_to_ref8.values()) - set(ref8.codes)
    if stray:
        raise RecipeError(f"panorama_to_ref8 targets codes outside REF_8: {sorted(stray)}")

    names = {e.name: e.code for e in ts.entries if e.code != 0}
    table = doc["ts_to_all45"]
    unknown = set(table) - set(names)
    if unknown:
        raise RecipeError(f"ts_to_all45 names unknown TS structures: {sorted(unknown)}")
    uncovered = set(names) - set(table)
    if uncovered:
        raise RecipeError(f"ts_to_all45 leaves TS structures unmapped: {sorted(uncovered)}")
    ts_to_all45 = {0: 0}
    for struct, target in table.items():
        target = int(target)
        if all45.by_code.get(target) is None or all45.by_code[target].source != "TS":
            raise RecipeError(f"ts_to_all45: {struct} -> {target} is not a TS-derived ALL_45 code")
        ts_to_all45[names[struct]] = target

    mo = doc["aorta_mask_out"]
    try:
        aorta_ts_code = names[mo["mask_name"]]
    except KeyError:
        raise RecipeError(f"aorta_mask_out: unknown TS structure {mo.get('mask_name')!r}") from None
    return Recipe(
        version=str(doc.get("recipe_version", "unversioned")),
        ts_version=str(doc.get("ts_version", "unknown")),
        schemes=schemes,
        panorama_to_ref8=panorama_to_ref8,
        ts_to_all45=ts_to_all45,
        aorta_ts_code=aorta_ts_code,
        arteries_code=int(mo["victim_code"]),
        aorta_code=int(mo["replacement"]),
        body_code=int(doc.get("body_region", {}).get("code", 1)),
    )


def load_recipe(path: str | Path | None = None) -> Recipe:
    """Load a recipe file; ``None`` loads the bundled default."""
    if path is None:
        return default_recipe()
    with open(path, "rb") as fh:
        return parse_recipe(tomllib.load(fh))


@lru_cache(maxsize=1)
def default_recipe() -> Recipe:
    text = resources.files("panceval").joinpath("data/recipe_v1.toml").read_text(encoding="utf-8")
    return parse_recipe(tomllib.loads(text))


def get_scheme(name: str) -> LabelScheme:
    return default_recipe().scheme(name)
