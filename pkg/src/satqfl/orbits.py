"""TLE ingestion and two-body propagation in an Earth-centred inertial frame.

Positions are in km. Times are timezone-aware UTC datetimes at the API
surface; the vectorised helpers take float seconds since J2000.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np

MU_EARTH = 398600.4418  # km^3 / s^2
EARTH_RADIUS = 6378.137  # km
EARTH_ROTATION = 7.2921159e-5  # rad / s
GMST_J2000 = 4.894961  # rad
J2000 = datetime(2000, 1, 1, 12, 0, 0, tzinfo=timezone.utc)

KEPLER_TOL = 1e-12
KEPLER_MAX_ITER = 50


class TleError(ValueError):
    pass


class ChecksumError(TleError):
    def __init__(self, line_no: int):
        super().__init__(f"checksum mismatch on line {line_no}")
        self.line_no = line_no


class MalformedLine(TleError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class NonConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TleRecord:
    name: str
    catalog_number: int
    epoch: datetime
    inclination: float
    raan: float
    eccentricity: float
    arg_perigee: float
    mean_anomaly: float
    mean_motion: float
    line1_checksum: int
    line2_checksum: int
    # line 1 fields kept verbatim so formatting reproduces the source lines
    classification: str = "U"
    intl_designator: str = ""
    ndot: str = " .00000000"
    nddot: str = " 00000+0"
    bstar: str = " 00000+0"
    ephemeris_type: str = "0"
    element_set: int = 999
    rev_number: int = 0


@dataclass(frozen=True)
class OrbitalElements:
    semi_major_axis: float
    eccentricity: float
    inclination: float
    raan: float
    arg_perigee: float
    mean_anomaly_at_epoch: float
    epoch: datetime

    @property
    def mean_motion(self) -> float:
        """rad / s"""
        return math.sqrt(MU_EARTH / self.semi_major_axis**3)

    @property
    def period(self) -> float:
        return 2 * math.pi / self.mean_motion


@dataclass(frozen=True, eq=False)
class EciState:
    position: np.ndarray
    time: datetime
    velocity: np.ndarray | None = None


@dataclass(frozen=True)
class GroundStation:
    name: str
    latitude: float
    longitude: float
    altitude: float = 0.0

    def __post_init__(self):
        if abs(self.latitude) > 90 or abs(self.longitude) > 180:
            raise ValueError(f"station {self.name}: latitude/longitude out of range")


# ---------------------------------------------------------------------------
# TLE text format


def checksum(line: str) -> int:
    total = 0
    for ch in line[:68]:
        if ch.isdigit():
            total += int(ch)
        elif ch == "-":
            total += 1
    return total % 10


def _field(line: str, start: int, end: int, line_no: int, what: str, conv):
    # 1-indexed inclusive columns, as in the format description
    raw = line[start - 1 : end]
    try:
        return conv(raw)
    except ValueError:
        raise MalformedLine(line_no, f"bad {what} field {raw!r}") from None


def _parse_epoch(raw: str) -> datetime:
    year = int(raw[:2])
    year += 2000 if year < 57 else 1900
    day = float(raw[2:])
    micros = round((day - 1.0) * 86400e6)
    return datetime(year, 1, 1, tzinfo=timezone.utc) + timedelta(microseconds=micros)


def _format_epoch(epoch: datetime) -> str:
    start = datetime(epoch.year, 1, 1, tzinfo=timezone.utc)
    delta = epoch - start
    micros = (delta.days * 86400 + delta.seconds) * 1_000_000 + delta.microseconds
    day = 1.0 + micros / 86400e6
    return f"{epoch.year % 100:02d}{day:012.8f}"


def parse_tle(text: str) -> list[TleRecord]:
    """Parse name/line1/line2 triples. Blank lines are ignored."""
    lines = [(i + 1, ln.rstrip("\r\n")) for i, ln in enumerate(text.splitlines())]
    lines = [(no, ln) for no, ln in lines if ln.strip()]
    if len(lines) % 3:
        raise MalformedLine(lines[-1][0], "input is not a sequence of name/line1/line2 triples")
    records = []
    for k in range(0, len(lines), 3):
        (_, name), (n1, l1), (n2, l2) = lines[k : k + 3]
        records.append(_parse_triple(name.strip(), n1, l1.rstrip(), n2, l2.rstrip()))
    return records


def _parse_triple(name: str, n1: int, l1: str, n2: int, l2: str) -> TleRecord:
    for no, ln, tag in ((n1, l1, "1"), (n2, l2, "2")):
        if len(ln) != 69:
            raise MalformedLine(no, f"expected 69 characters, got {len(ln)}")
        if ln[0] != tag:
            raise MalformedLine(no, f"expected line number {tag}")
        if not ln[68].isdigit():
            raise MalformedLine(no, "checksum is not a digit")
        if checksum(ln) != int(ln[68]):
            raise ChecksumError(no)
    cat1 = _field(l1, 3, 7, n1, "catalog number", int)
    cat2 = _field(l2, 3, 7, n2, "catalog number", int)
    if cat1 != cat2:
        raise MalformedLine(n2, "catalog number differs from line 1")
    rec = TleRecord(
        name=name,
        catalog_number=cat1,
        epoch=_field(l1, 19, 32, n1, "epoch", _parse_epoch),
        inclination=_field(l2, 9, 16, n2, "inclination", float),
        raan=_field(l2, 18, 25, n2, "RAAN", float),
        eccentricity=_field(l2, 27, 33, n2, "eccentricity", lambda s: float("0." + s.strip())),
        arg_perigee=_field(l2, 35, 42, n2, "argument of perigee", float),
        mean_anomaly=_field(l2, 44, 51, n2, "mean anomaly", float),
        mean_motion=_field(l2, 53, 63, n2, "mean motion", float),
        line1_checksum=int(l1[68]),
        line2_checksum=int(l2[68]),
        classification=l1[7],
        intl_designator=l1[9:17],
        ndot=l1[33:43],
        nddot=l1[44:52],
        bstar=l1[53:61],
        ephemeris_type=l1[62],
        element_set=_field(l1, 65, 68, n1, "element set", int),
        rev_number=_field(l2, 64, 68, n2, "revolution number", int),
    )
    if not 0 <= rec.eccentricity < 1:
        raise MalformedLine(n2, "eccentricity outside [0, 1)")
    if not 0 < rec.mean_motion < 20:
        raise MalformedLine(n2, "mean motion outside (0, 20) rev/day")
    if not 0 <= rec.inclination <= 180:
        raise MalformedLine(n2, "inclination outside [0, 180]")
    return rec


def format_tle(rec: TleRecord) -> str:
    """Render a record back to its three-line text form (checksums recomputed)."""
    body1 = (
        f"1 {rec.catalog_number:05d}{rec.classification} {rec.intl_designator:<8s} "
        f"{_format_epoch(rec.epoch)} {rec.ndot:>10s} {rec.nddot:>8s} {rec.bstar:>8s} "
        f"{rec.ephemeris_type} {rec.element_set:4d}"
    )
    ecc = f"{round(rec.eccentricity * 1e7):07d}"
    body2 = (
        f"2 {rec.catalog_number:05d} {rec.inclination:8.4f} {rec.raan:8.4f} {ecc} "
        f"{rec.arg_perigee:8.4f} {rec.mean_anomaly:8.4f} {rec.mean_motion:11.8f}{rec.rev_number:5d}"
    )
    return f"{rec.name}\n{body1}{checksum(body1)}\n{body2}{checksum(body2)}\n"


def format_tles(records) -> str:
    return "".join(format_tle(r) for r in records)


def synthetic_shell(
    n: int,
    epoch: datetime,
    *,
    planes: int = 10,
    inclination: float = 53.0,
    mean_motion: float = 15.06,
    first_catalog: int = 90001,
    name_prefix: str = "SHELL",
    phasing: int = 1,
) -> list[TleRecord]:
    """Walker-delta style shell of near-circular orbits, as valid TLE records."""
    per_plane = math.ceil(n / planes)
    records = []
    for k in range(n):
        p, s = divmod(k, per_plane)
        raan = (360.0 * p / planes) % 360.0
        ma = (360.0 * s / per_plane + 360.0 * phasing * p / (planes * per_plane)) % 360.0
        cat = first_catalog + k
        draft = TleRecord(
            name=f"{name_prefix}-{k + 1:03d}",
            catalog_number=cat,
            epoch=epoch,
            inclination=inclination,
            raan=round(raan, 4),
            eccentricity=0.0001,
            arg_perigee=90.0,
            mean_anomaly=round(ma, 4),
            mean_motion=mean_motion,
            line1_checksum=0,
            line2_checksum=0,
            intl_designator=f"25{k // 26 + 1:03d}{chr(65 + k % 26)}",
        )
        # a round trip through the text form canonicalises floats and checksums
        records.append(parse_tle(format_tle(draft))[0])
    return records


# ---------------------------------------------------------------------------
# propagation


def seconds_since_j2000(t: datetime) -> float:
    return (t - J2000).total_seconds()


def from_seconds(s: float) -> datetime:
    return J2000 + timedelta(seconds=float(s))


def elements_from_tle(rec: TleRecord) -> OrbitalElements:
    period = 86400.0 / rec.mean_motion
    a = (MU_EARTH * (period / (2 * math.pi)) ** 2) ** (1 / 3)
    return OrbitalElements(
        semi_major_axis=a,
        eccentricity=rec.eccentricity,
        inclination=math.radians(rec.inclination),
        raan=math.radians(rec.raan),
        arg_perigee=math.radians(rec.arg_perigee),
        mean_anomaly_at_epoch=math.radians(rec.mean_anomaly),
        epoch=rec.epoch,
    )


def solve_kepler(mean_anomaly, e: float):
    """Eccentric anomaly E with E - e sin E = M, elementwise on arrays."""
    if not 0 <= e < 1:
        raise ValueError(f"elliptic orbits only, got e={e}")
    M = np.asarray(mean_anomaly, dtype=float)
    E = np.where(e < 0.8, M, np.pi * np.ones_like(M))
    for _ in range(KEPLER_MAX_ITER):
        step = (E - e * np.sin(E) - M) / (1 - e * np.cos(E))
        E = E - step
        if np.all(np.abs(step) < KEPLER_TOL):
            return E if E.ndim else float(E)
    raise NonConvergence(f"Kepler solver did not converge for e={e}")


def _rotation(el: OrbitalElements) -> np.ndarray:
    cO, sO = math.cos(el.raan), math.sin(el.raan)
    ci, si = math.cos(el.inclination), math.sin(el.inclination)
    cw, sw = math.cos(el.arg_perigee), math.sin(el.arg_perigee)
    return np.array(
        [
            [cO * cw - sO * sw * ci, -cO * sw - sO * cw * ci, sO * si],
            [sO * cw + cO * sw * ci, -sO * sw + cO * cw * ci, -cO * si],
            [sw * si, cw * si, ci],
        ]
    )


def propagate_many(el: OrbitalElements, t_seconds) -> tuple[np.ndarray, np.ndarray]:
    """Positions and velocities (km, km/s) at seconds since J2000; shape (T, 3)."""
    t = np.atleast_1d(np.asarray(t_seconds, dtype=float))
    n = el.mean_motion
    dt = t - seconds_since_j2000(el.epoch)
    M = np.mod(el.mean_anomaly_at_epoch + n * dt, 2 * np.pi)
    e, a = el.eccentricity, el.semi_major_axis
    E = np.atleast_1d(solve_kepler(M, e))
    cosE, sinE = np.cos(E), np.sin(E)
    root = math.sqrt(1 - e * e)
    r_pf = np.stack([a * (cosE - e), a * root * sinE, np.zeros_like(E)], axis=-1)
    vfac = n * a / (1 - e * cosE)
    v_pf = np.stack([-vfac * sinE, vfac * root * cosE, np.zeros_like(E)], axis=-1)
    R = _rotation(el)
    return r_pf @ R.T, v_pf @ R.T


def propagate(el: OrbitalElements, t: datetime) -> EciState:
    pos, vel = propagate_many(el, seconds_since_j2000(t))
    return EciState(pos[0], t, vel[0])


def gmst(t_seconds):
    return GMST_J2000 + EARTH_ROTATION * np.asarray(t_seconds, dtype=float)


def station_positions(gs: GroundStation, t_seconds) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t_seconds, dtype=float))
    return station_at_angle(gs, gmst(t))


def station_at_angle(gs: GroundStation, sidereal_angle) -> np.ndarray:
    """Station position for a given Greenwich sidereal angle (rad)."""
    lat = math.radians(gs.latitude)
    ang = np.atleast_1d(np.asarray(sidereal_angle, dtype=float)) + math.radians(gs.longitude)
    r = EARTH_RADIUS + gs.altitude
    return np.stack(
        [r * math.cos(lat) * np.cos(ang), r * math.cos(lat) * np.sin(ang), np.full_like(ang, r * math.sin(lat))],
        axis=-1,
    )


def station_eci(gs: GroundStation, t: datetime) -> EciState:
    return EciState(station_positions(gs, seconds_since_j2000(t))[0], t)


def specific_energy(position, velocity) -> np.ndarray:
    r = np.linalg.norm(position, axis=-1)
    v = np.linalg.norm(velocity, axis=-1)
    return v * v / 2 - MU_EARTH / r


def time_grid(start: datetime, duration_s: float, sample_s: float) -> list[datetime]:
    count = int(round(duration_s / sample_s)) + 1
    return [start + timedelta(seconds=k * sample_s) for k in range(count)]
