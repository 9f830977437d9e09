"""The eleven degradation classes and their primitive decomposition."""
from __future__ import annotations

import enum

PRIMITIVES = ("haze", "low", "rain", "snow")

_ROMAN = ("I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "XI")


class DegradationType(str, enum.Enum):
    HAZE = "haze"
    LOW = "low"
    RAIN = "rain"
    SNOW = "snow"
    HAZE_LOW = "haze+low"
    HAZE_RAIN = "haze+rain"
    HAZE_SNOW = "haze+snow"
    LOW_RAIN = "low+rain"
    LOW_SNOW = "low+snow"
    HAZE_LOW_RAIN = "haze+low+rain"
    HAZE_LOW_SNOW = "haze+low+snow"

    @property
    def label(self) -> str:
        return self.value

    @property
    def index(self) -> int:
        return _ORDER.index(self)

    @property
    def roman_index(self) -> str:
        return _ROMAN[self.index]

    @property
    def primitives(self) -> frozenset[str]:
        return frozenset(self.value.split("+"))

    @property
    def prompt_text(self) -> str:
        # single low-light class is spelled out in the prompt; composites keep "low"
        if self is DegradationType.LOW:
            return "low light"
        return " + ".join(self.value.split("+"))

    @classmethod
    def parse(cls, label: str | "DegradationType") -> "DegradationType":
        if isinstance(label, DegradationType):
            return label
        key = label.strip().lower().replace(" ", "")
        if key == "lowlight":
            key = "low"
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown degradation type {label!r}") from None

    @classmethod
    def from_index(cls, i: int) -> "DegradationType":
        return _ORDER[i]


_ORDER = tuple(DegradationType)
ALL_TYPES = _ORDER
NUM_TYPES = len(_ORDER)
