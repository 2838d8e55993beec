"""Value types, run configuration, initial laws and the noise contract.

Every random draw in the package goes through :class:`NoiseStream`, a
counter-based Philox stream keyed by ``(seed, replica_index)``.  One Philox
block (four 64-bit words) is consumed per planar draw, so the counter advances
by exactly one per Gaussian pair and a replica can be replayed from any
counter value without touching other replicas.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Sequence

import numpy as np

_U53 = 2.0**-53
_MASK64 = (1 << 64) - 1

GAUSSIAN_METHOD = "box-muller/philox4x64-10, one block per pair"


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` names the offending entry."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class NoiseStream:
    """Explicitly advanced, splittable stream of uniforms and Gaussians.

    Identical ``(seed, replica_index, counter)`` always yields identical draws.
    """

    __slots__ = ("seed", "replica_index", "counter", "_bitgen")

    def __init__(self, seed: int, replica_index: int = 0, counter: int = 0):
        if counter < 0:
            raise ValueError("counter must be nonnegative")
        self.seed = int(seed)
        self.replica_index = int(replica_index)
        self.counter = int(counter)
        self._bitgen = np.random.Philox(
            key=[self.seed & _MASK64, self.replica_index & _MASK64],
            counter=[self.counter & _MASK64, self.counter >> 64, 0, 0],
        )

    def __repr__(self) -> str:
        return (
            f"NoiseStream(seed={self.seed}, replica_index={self.replica_index}, "
            f"counter={self.counter})"
        )

    def copy(self) -> "NoiseStream":
        return NoiseStream(self.seed, self.replica_index, self.counter)

    def _blocks(self, n: int) -> np.ndarray:
        raw = self._bitgen.random_raw(4 * n).reshape(n, 4)
        self.counter += n
        return raw

    def uniform_pairs(self, n: int) -> np.ndarray:
        """``(n, 2)`` uniforms on [0, 1), one block each."""
        raw = self._blocks(n)
        return (raw[:, :2] >> np.uint64(11)).astype(np.float64) * _U53

    def gaussian_pairs(self, n: int) -> np.ndarray:
        """``(n, 2)`` independent standard normals (Box-Muller, one block each)."""
        u = self.uniform_pairs(n)
        # 1 - u lies in (0, 1], keeps the log finite
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        out = np.empty((n, 2))
        out[:, 0] = radius * np.cos(angle)
        out[:, 1] = radius * np.sin(angle)
        return out

    def uniforms(self, n: int) -> np.ndarray:
        return self.uniform_pairs(n)[:, 0]


def gaussian_pair(noise: NoiseStream) -> np.ndarray:
    """One standard planar Gaussian draw; advances ``noise.counter`` by one."""
    return noise.gaussian_pairs(1)[0]


# --------------------------------------------------------------------------
# initial laws


@dataclass(frozen=True)
class InitialLaw:
    """Tagged initial distribution.

    ``kind`` is one of ``standard_gaussian``, ``uniform_disk``, ``point_cloud``
    and ``product_of``.  A product law draws the first ``n - n // 2`` particles
    from ``first`` and the rest from ``second``.
    """

    kind: str = "standard_gaussian"
    radius: float = 1.0
    points: tuple[tuple[float, float], ...] = ()
    first: "InitialLaw | None" = None
    second: "InitialLaw | None" = None

    KINDS = ("standard_gaussian", "uniform_disk", "point_cloud", "product_of")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(
                f"unknown law {self.kind!r}; expected one of {', '.join(self.KINDS)}",
                "initial_law.kind",
            )
        if self.kind == "uniform_disk" and not self.radius > 0:
            raise ConfigError("radius must be positive", "initial_law.radius")
        if self.kind == "point_cloud":
            pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
            if not np.all(np.isfinite(pts)):
                raise ConfigError("points must be finite", "initial_law.points")
        if self.kind == "product_of" and (self.first is None or self.second is None):
            raise ConfigError("product_of needs 'first' and 'second'", "initial_law")

    @classmethod
    def standard_gaussian(cls) -> "InitialLaw":
        return cls("standard_gaussian")

    @classmethod
    def uniform_disk(cls, radius: float = 1.0) -> "InitialLaw":
        return cls("uniform_disk", radius=float(radius))

    @classmethod
    def point_cloud(cls, points: Sequence[Sequence[float]]) -> "InitialLaw":
        return cls("point_cloud", points=tuple((float(x), float(y)) for x, y in points))

    @classmethod
    def product_of(cls, first: "InitialLaw", second: "InitialLaw") -> "InitialLaw":
        return cls("product_of", first=first, second=second)

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "standard_gaussian":
            return {"kind": self.kind}
        if self.kind == "uniform_disk":
            return {"kind": self.kind, "radius": self.radius}
        if self.kind == "point_cloud":
            return {"kind": self.kind, "points": [list(p) for p in self.points]}
        return {"kind": self.kind, "first": self.first.to_dict(), "second": self.second.to_dict()}

    @classmethod
    def from_dict(cls, doc: Any, where: str = "initial_law") -> "InitialLaw":
        if not isinstance(doc, dict) or "kind" not in doc:
            raise ConfigError("expected an object with a 'kind' entry", where)
        allowed = {
            "standard_gaussian": {"kind"},
            "uniform_disk": {"kind", "radius"},
            "point_cloud": {"kind", "points"},
            "product_of": {"kind", "first", "second"},
        }.get(doc["kind"])
        if allowed is None:
            raise ConfigError(f"unknown law {doc['kind']!r}", f"{where}.kind")
        extra = set(doc) - allowed
        if extra:
            raise ConfigError(f"unknown field(s) {sorted(extra)}", where)
        kind = doc["kind"]
        if kind == "uniform_disk":
            return cls.uniform_disk(doc.get("radius", 1.0))
        if kind == "point_cloud":
            try:
                return cls.point_cloud(doc["points"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad points ({exc})", f"{where}.points") from None
        if kind == "product_of":
            return cls.product_of(
                cls.from_dict(doc.get("first"), f"{where}.first"),
                cls.from_dict(doc.get("second"), f"{where}.second"),
            )
        return cls.standard_gaussian()


def sample_initial(law: InitialLaw, n: int, noise: NoiseStream) -> np.ndarray:
    """Draw ``n`` i.i.d. planar positions from ``law`` as an ``(n, 2)`` array."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if law.kind == "point_cloud":
        pts = np.asarray(law.points, dtype=float).reshape(-1, 2)
        if len(pts) != n:
            raise ConfigError(
                f"point_cloud has {len(pts)} points but {n} particles were requested",
                "initial_law.points",
            )
        return pts.copy()
    if law.kind == "standard_gaussian":
        return noise.gaussian_pairs(n)
    if law.kind == "uniform_disk":
        u = noise.uniform_pairs(n)
        r = law.radius * np.sqrt(u[:, 0])
        theta = 2.0 * np.pi * u[:, 1]
        return np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    n_first = n - n // 2
    head = sample_initial(law.first, n_first, noise)
    if n_first == n:
        return head
    return np.vstack([head, sample_initial(law.second, n - n_first, noise)])


# --------------------------------------------------------------------------
# run configuration

EXPERIMENT_KINDS = (
    "system",
    "pair_cubed",
    "cluster",
    "angular",
    "regimes",
)


@dataclass(frozen=True)
class SimParams:
    """All scalar parameters of one run.

    The first nine fields are the model parameters; the remaining ones are
    experiment extensions (all optional) used by the runner and presets.
    """

    n_particles: int = 2
    chi: float = 2.0 * math.pi
    epsilon: float = 0.0
    ell: float | None = None
    dt: float = 1e-3
    horizon: float = 1.0
    seed: int = 0
    initial_law: InitialLaw = field(default_factory=InitialLaw.standard_gaussian)
    replicas: int = 1
    # extensions
    experiment: str = "system"
    experiment_name: str = "run"
    record_every: int = 1
    alpha: float | None = None
    chi_sweep: tuple[float, ...] = ()
    epsilon_sweep: tuple[float, ...] = ()
    pair_start: tuple[float, float] = (1.0, 0.0)
    freeze_radius: float | None = None
    merge_threshold: float | None = None
    triple_threshold: float | None = None
    moment_times: tuple[float, ...] = ()

    def __post_init__(self):
        if not (isinstance(self.n_particles, (int, np.integer)) and self.n_particles >= 2):
            raise ConfigError("must be an integer >= 2", "n_particles")
        # chi = 0 (pure diffusion) is admitted as a degenerate case
        if not (isinstance(self.chi, (int, float)) and math.isfinite(self.chi) and self.chi >= 0):
            raise ConfigError("must be a nonnegative finite real", "chi")
        for name in ("dt", "horizon"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError("must be a positive finite real", name)
        if not (isinstance(self.epsilon, (int, float)) and 0.0 <= self.epsilon <= 1.0):
            raise ConfigError("must lie in [0, 1]", "epsilon")
        if self.ell is not None and not self.ell > 0:
            raise ConfigError("must be positive when given", "ell")
        if self.dt > self.horizon:
            raise ConfigError("dt must not exceed horizon", "dt")
        if not (isinstance(self.seed, (int, np.integer)) and -(2**63) <= self.seed < 2**64):
            raise ConfigError("must be a 64-bit integer", "seed")
        if not (isinstance(self.replicas, (int, np.integer)) and self.replicas >= 1):
            raise ConfigError("must be an integer >= 1", "replicas")
        if self.experiment not in EXPERIMENT_KINDS:
            raise ConfigError(
                f"unknown experiment {self.experiment!r}; expected one of {', '.join(EXPERIMENT_KINDS)}",
                "experiment",
            )
        if not self.experiment_name or "/" in self.experiment_name:
            raise ConfigError("must be a nonempty name without '/'", "experiment_name")
        if not (isinstance(self.record_every, (int, np.integer)) and self.record_every >= 1):
            raise ConfigError("must be an integer >= 1", "record_every")
        if self.alpha is not None:
            self._check_alpha()
        for name in ("freeze_radius", "merge_threshold", "triple_threshold"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ConfigError("must be nonnegative when given", name)
        if any(not 0.0 <= e <= 1.0 for e in self.epsilon_sweep):
            raise ConfigError("entries must lie in [0, 1]", "epsilon_sweep")
        if any(not c > 0 for c in self.chi_sweep):
            raise ConfigError("entries must be positive", "chi_sweep")
        if any(not 0.0 <= t <= self.horizon for t in self.moment_times):
            raise ConfigError("entries must lie in [0, horizon]", "moment_times")

    def _check_alpha(self):
        n, a = self.n_particles, self.alpha
        lower = (n - 1) * self.chi / (2.0 * math.pi * n)
        if not lower < a < 1.0:
            raise ConfigError(
                f"alpha={a} must lie in ((N-1)chi/(2 pi N), 1) = ({lower:.6g}, 1) "
                "for the pair moment bound",
                "alpha",
            )

    @property
    def n_steps(self) -> int:
        return max(1, math.ceil(self.horizon / self.dt - 1e-9))

    def replace(self, **changes) -> "SimParams":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return SimParams(**d)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["initial_law"] = self.initial_law.to_dict()
        for name in ("chi_sweep", "epsilon_sweep", "pair_start", "moment_times"):
            d[name] = list(d[name])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, doc: Any) -> "SimParams":
        if not isinstance(doc, dict):
            raise ConfigError("top-level config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown field(s): {', '.join(unknown)}", unknown[0])
        kw = dict(doc)
        if "initial_law" in kw:
            kw["initial_law"] = InitialLaw.from_dict(kw["initial_law"])
        for name in ("chi_sweep", "epsilon_sweep", "moment_times"):
            if name in kw:
                if not isinstance(kw[name], list):
                    raise ConfigError("must be a list of numbers", name)
                kw[name] = tuple(float(v) for v in kw[name])
        if "pair_start" in kw:
            ps = kw["pair_start"]
            if not (isinstance(ps, list) and len(ps) == 2):
                raise ConfigError("must be a list [x, y]", "pair_start")
            kw["pair_start"] = (float(ps[0]), float(ps[1]))
        for name in ("n_particles", "seed", "replicas", "record_every"):
            if name in kw and (isinstance(kw[name], bool) or not isinstance(kw[name], int)):
                raise ConfigError("must be an integer", name)
        for name in ("chi", "epsilon", "dt", "horizon"):
            if name in kw and (isinstance(kw[name], bool) or not isinstance(kw[name], (int, float))):
                raise ConfigError("must be a number", name)
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "SimParams":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        return cls.from_dict(doc)
