"""Dataset generation and ingestion, train/holdout splitting, chain persistence."""

import csv
import json
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import ChecksumError, ConfigError, DataError, FormatVersionError
from .models import ObservationSet, logistic

SOURCES = ("synthetic-case-1", "synthetic-case-2", "synthetic-case-3", "movielens-csv", "mice-csv")


@dataclass
class DatasetSpec:
    source: str = "synthetic-case-1"
    m: int = 100
    n: int = 60
    rank: int = 10
    k: int = 10
    train_rate: float = 0.4
    holdout_rate: float = 0.4
    seed: int = 0
    path: str = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"unknown dataset source {self.source!r}; expected one of {SOURCES}")
        for name in ("train_rate", "holdout_rate"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if self.train_rate + self.holdout_rate > 1:
            raise ConfigError("train_rate + holdout_rate exceeds 1")
        if self.source.endswith("-csv") and not self.path:
            raise ConfigError(f"{self.source} needs a path")


# ---------------------------------------------------------------------------
# synthetic cases
# ---------------------------------------------------------------------------

def _full_grid(X, values=None):
    m, n = X.shape
    ii, jj = np.divmod(np.arange(m * n), n)
    return ObservationSet(m, n, ii, jj, X.ravel() if values is None else values.ravel())


def gen_case1(m, n, r, rng):
    """``X = A B^T`` with standard normal factors; observations are exact entries."""
    X = rng.standard_normal((m, r)) @ rng.standard_normal((n, r)).T
    return X, _full_grid(X)


def gen_case2(m, n, r, rng):
    """Positive ``X = A B^T`` with ``A ~ Exp(1)`` and ``B ~ Uniform[0, 1]``."""
    X = rng.exponential(1.0, (m, r)) @ rng.uniform(0.0, 1.0, (n, r)).T
    return X, _full_grid(X)


def binomial_observations(X, k, rng):
    """``y ~ Bin(k, logistic(X))`` entrywise."""
    return rng.binomial(k, logistic(X)).astype(float)


def gen_case3(m, n, r, k, rng):
    """Gaussian ``X = A B^T``; every entry gets a Binomial count ``y ~ Bin(k, logistic(X))``.

    The returned template holds all ``m*n`` counts; :func:`split` picks the
    observed subset.
    """
    X = rng.standard_normal((m, r)) @ rng.standard_normal((n, r)).T
    return X, _full_grid(X, binomial_observations(X, k, rng))


def split(indices, train_rate, holdout_rate, rng):
    """Disjoint uniform train/holdout subsets of ``floor(rate * N)`` indices each.

    ``indices`` is an array of candidate positions or an integer ``N``
    (meaning ``arange(N)``).
    """
    idx = np.arange(indices) if np.isscalar(indices) else np.asarray(indices)
    if not (0 < train_rate <= 1 and 0 <= holdout_rate <= 1):
        raise ConfigError("rates must lie in (0, 1]")
    if train_rate + holdout_rate > 1 + 1e-12:
        raise ConfigError("train_rate + holdout_rate exceeds 1")
    N = len(idx)
    n_tr = int(np.floor(train_rate * N + 1e-9))
    n_ho = int(np.floor(holdout_rate * N + 1e-9))
    perm = rng.permutation(N)
    return idx[perm[:n_tr]], idx[perm[n_tr:n_tr + n_ho]]


def assign_roles(template, train_idx, holdout_idx):
    """Subset of ``template`` (positions into its entry arrays) with roles set."""
    sel = np.concatenate([train_idx, holdout_idx]).astype(np.int64)
    role = np.r_[np.ones(len(train_idx), bool), np.zeros(len(holdout_idx), bool)]
    return ObservationSet(template.m, template.n, template.rows[sel], template.cols[sel],
                          template.values[sel], role, dict(template.meta))


def resplit(obs, train_rate, holdout_rate, rng):
    tr, ho = split(len(obs), train_rate, holdout_rate, rng)
    return assign_roles(obs, tr, ho)


def build_dataset(spec):
    """Materialise a :class:`DatasetSpec`; returns ``(ObservationSet, truth or None)``."""
    rng = np.random.default_rng(spec.seed)
    if spec.source == "synthetic-case-1":
        truth, template = gen_case1(spec.m, spec.n, spec.rank, rng)
    elif spec.source == "synthetic-case-2":
        truth, template = gen_case2(spec.m, spec.n, spec.rank, rng)
    elif spec.source == "synthetic-case-3":
        truth, template = gen_case3(spec.m, spec.n, spec.rank, spec.k, rng)
    elif spec.source == "movielens-csv":
        truth, template = None, load_movielens(spec.path)
    else:
        truth, template = None, load_mice(spec.path)
    return resplit(template, spec.train_rate, spec.holdout_rate, rng), truth


# ---------------------------------------------------------------------------
# real data
# ---------------------------------------------------------------------------

MOVIELENS_HEADER = ["userId", "movieId", "rating", "timestamp"]


def load_movielens(path, sidecar=None):
    """Parse a MovieLens ``ratings.csv`` into an ObservationSet.

    Ratings are doubled to integers in ``[0, 10]``.  User and movie ids are
    remapped to contiguous indices in order of first appearance after
    sorting; ``n`` counts distinct *rated* movies.  Repeated (user, movie)
    pairs keep the last rating.  The id maps are stored in ``meta`` and, if
    ``sidecar`` is given, written there as JSON.
    """
    users, movies, ratings = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MOVIELENS_HEADER:
            raise DataError(f"{path}: expected header {','.join(MOVIELENS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            try:
                u, mv, rt = int(row[0]), int(row[1]), float(row[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            doubled = 2.0 * rt
            if doubled != round(doubled) or not 0 <= doubled <= 10:
                raise DataError(f"{path}:{lineno}: rating {row[2]} is not a half-step in [0, 5]")
            users.append(u)
            movies.append(mv)
            ratings.append(doubled)
    users = np.array(users, dtype=np.int64)
    movies = np.array(movies, dtype=np.int64)
    ratings = np.array(ratings)
    user_ids, ui = np.unique(users, return_inverse=True)
    movie_ids, mi = np.unique(movies, return_inverse=True)
    m, n = len(user_ids), len(movie_ids)
    if m == 0:
        raise DataError(f"{path}: no ratings")
    # last occurrence wins for repeated pairs
    flat = ui * n + mi
    rev_first = np.unique(flat[::-1], return_index=True)[1]
    keep = np.sort(len(flat) - 1 - rev_first)
    n_dup = len(flat) - len(keep)
    if n_dup:
        warnings.warn(f"{path}: {n_dup} duplicate (user, movie) ratings; kept the last of each")
    meta = {"user_ids": user_ids.tolist(), "movie_ids": movie_ids.tolist(), "n_duplicates": int(n_dup),
            "source": os.fspath(path)}
    obs = ObservationSet(m, n, ui[keep], mi[keep], ratings[keep], meta=meta)
    if sidecar is not None:
        with open(sidecar, "w") as fh:
            json.dump({"user_ids": meta["user_ids"], "movie_ids": meta["movie_ids"]}, fh)
    return obs


MICE_NON_PROTEIN = ("MouseID", "Genotype", "Treatment", "Behavior", "class")
MICE_N_PROTEINS = 77


def load_mice(path):
    """Parse the UCI mice protein expression CSV into a specimens x proteins grid.

    Identifier/class columns are dropped; empty cells become unobserved.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        protein_cols = [c for c, h in enumerate(header) if h not in MICE_NON_PROTEIN]
        if len(protein_cols) != MICE_N_PROTEINS:
            raise DataError(f"{path}: expected {MICE_N_PROTEINS} protein columns, found {len(protein_cols)}")
        rows, cols, vals = [], [], []
        i = 0
        for lineno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            for j, c in enumerate(protein_cols):
                cell = row[c].strip()
                if cell == "":
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {header[c]!r} holds non-numeric {cell!r}") from None
                if not np.isfinite(v):
                    raise DataError(f"{path}:{lineno}: column {header[c]!r} is not finite")
                rows.append(i)
                cols.append(j)
                vals.append(v)
            i += 1
    if i == 0:
        raise DataError(f"{path}: no data rows")
    meta = {"proteins": [header[c] for c in protein_cols], "source": os.fspath(path)}
    return ObservationSet(i, MICE_N_PROTEINS, rows, cols, vals, meta=meta)


# ---------------------------------------------------------------------------
# observation files
# ---------------------------------------------------------------------------

def write_observations(path, obs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "y", "role"])
        for i, j, y, t in zip(obs.rows, obs.cols, obs.values, obs.is_train):
            w.writerow([int(i), int(j), format(float(y), ".17g"), "train" if t else "holdout"])


def read_observations(path, m, n):
    try:
        table = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding="utf-8")
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    table = np.atleast_1d(table)
    roles = np.asarray(table["role"])
    if not np.all(np.isin(roles, ["train", "holdout"])):
        raise DataError(f"{path}: role must be 'train' or 'holdout'")
    return ObservationSet(m, n, table["i"], table["j"], table["y"], roles == "train")


def write_matrix_csv(path, X):
    np.savetxt(path, X, delimiter=",", fmt="%.17g")


# ---------------------------------------------------------------------------
# chain persistence
# ---------------------------------------------------------------------------

FORMAT_VERSION = "stiefel-mc-chain/1"
MANIFEST = "manifest.json"
TRACE = "trace.csv"
FACTORS = "factors.bin"
PARTIAL_MARKER = "PARTIAL"


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


class _DigestFile:
    def __init__(self, path, mode):
        self.fh = open(path, mode)
        self.nbytes = 0
        self.digest = kernels.FNV_OFFSET

    def write(self, data):
        if isinstance(data, str):
            data = data.encode()
        self.fh.write(data)
        self.nbytes += len(data)
        self.digest = kernels.fnv1a64(data, self.digest)

    def close(self):
        self.fh.close()

    def info(self, name):
        return {"name": name, "bytes": self.nbytes, "fnv1a64": f"{self.digest:016x}"}


class ChainWriter:
    """Sink writing a chain directory: manifest JSON, scalar trace CSV and a raw
    little-endian float64 factor file (one record per snapshot, blocks in the
    order given by the manifest layout, each row-major)."""

    def __init__(self, directory, extra_meta=None):
        self.dir = os.fspath(directory)
        self.extra = dict(extra_meta or {})
        self.columns = None
        self.n_records = 0
        self.n_snapshots = 0

    def _path(self, name):
        return os.path.join(self.dir, name)

    def open(self, meta):
        os.makedirs(self.dir, exist_ok=True)
        for name in (PARTIAL_MARKER,):
            if os.path.exists(self._path(name)):
                os.remove(self._path(name))
        self.meta = dict(meta)
        self.trace = _DigestFile(self._path(TRACE), "wb")
        self.factors = _DigestFile(self._path(FACTORS), "wb")
        self._write_manifest("running")

    def _columns_for(self, rec):
        cols = ["iteration", "log_posterior", "log_likelihood", "gamma", "tau"]
        if rec.s is not None:
            cols += [f"s_{l + 1}" for l in range(len(rec.s))]
        for b in rec.accepted:
            cols += [f"accept_{b}", f"prob_{b}", f"eps_{b}"]
        return cols + ["n_reorth", "n_diverged", "wall_time"]

    def record(self, rec):
        if self.columns is None:
            self.columns = self._columns_for(rec)
            self.blocks = list(rec.accepted)
            self.trace.write(",".join(self.columns) + "\n")
        vals = [rec.iteration, rec.log_posterior, rec.log_likelihood, rec.gamma, rec.tau]
        if rec.s is not None:
            vals += list(rec.s)
        for b in self.blocks:
            vals += [rec.accepted[b], rec.accept_prob[b], rec.step_size[b]]
        vals += [rec.n_reorth, rec.n_diverged, rec.wall_time]
        self.trace.write(",".join(_fmt(v) for v in vals) + "\n")
        self.n_records += 1

    def snapshot(self, iteration, arrays):
        buf = np.concatenate([np.asarray(arrays[name], dtype="<f8").ravel() for name, _ in self.meta["layout"]])
        self.factors.write(np.append(np.float64(iteration), buf).astype("<f8").tobytes())
        self.n_snapshots += 1

    def _write_manifest(self, status, summary=None):
        layout = [{"name": name, "shape": list(shape)} for name, shape in self.meta["layout"]]
        manifest = {
            "format_version": FORMAT_VERSION,
            "status": status,
            **{k: v for k, v in self.meta.items() if k != "layout"},
            **self.extra,
            "n_records": self.n_records,
            "n_snapshots": self.n_snapshots,
            "layout": {"dtype": "<f8", "order": "row-major", "leading": "iteration",
                       "blocks": layout,
                       "record_floats": 1 + sum(int(np.prod(b["shape"])) for b in layout)},
            "files": {},
        }
        if status != "running":
            manifest["files"] = {"trace": self.trace.info(TRACE), "factors": self.factors.info(FACTORS)}
        if summary is not None:
            manifest["summary"] = {
                "n_kept": summary.n_kept, "empty": summary.empty,
                "acceptance": summary.acceptance, "step_size": summary.step_size,
                "n_reorth": summary.n_reorth, "n_diverged": summary.n_diverged,
                "wall_time": summary.wall_time,
            }
        tmp = self._path(MANIFEST + ".tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=2, default=_json_default)
        os.replace(tmp, self._path(MANIFEST))

    def close(self, summary):
        self.trace.close()
        self.factors.close()
        self._write_manifest("complete", summary)

    def abort(self, exc):
        for f in (self.trace, self.factors):
            try:
                f.close()
            except Exception:
                pass
        with open(self._path(PARTIAL_MARKER), "w") as fh:
            fh.write(f"{type(exc).__name__}: {exc}\n")
        try:
            self._write_manifest("partial")
        except Exception:
            pass


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


@dataclass
class ChainData:
    manifest: dict
    trace: dict
    snapshot_iterations: np.ndarray
    blocks: dict = field(default_factory=dict)

    @property
    def n_snapshots(self):
        return len(self.snapshot_iterations)

    def snapshot(self, k):
        return {name: arr[k] for name, arr in self.blocks.items()}


def _verify(path, info):
    if not os.path.exists(path):
        raise ChecksumError(f"{os.path.basename(path)}: missing")
    data = np.fromfile(path, dtype=np.uint8)
    if len(data) != info["bytes"]:
        raise ChecksumError(f"{os.path.basename(path)}: {len(data)} bytes, manifest says {info['bytes']}")
    digest = f"{kernels.fnv1a64(data):016x}"
    if digest != info["fnv1a64"]:
        raise ChecksumError(f"{os.path.basename(path)}: digest {digest} != manifest {info['fnv1a64']}")
    return data


def read_manifest(directory):
    path = os.path.join(os.fspath(directory), MANIFEST)
    if not os.path.exists(path):
        raise DataError(f"{directory}: no {MANIFEST}")
    with open(path) as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported chain format version {version!r} (this reader handles {FORMAT_VERSION})")
    return manifest


def read_chain(directory, allow_partial=False):
    """Load and verify a chain directory written by :class:`ChainWriter`."""
    directory = os.fspath(directory)
    manifest = read_manifest(directory)
    if manifest["status"] != "complete" and not allow_partial:
        raise DataError(f"{directory}: chain status is {manifest['status']!r}")
    files = manifest["files"]
    raw_trace = _verify(os.path.join(directory, TRACE), files["trace"]).tobytes().decode()
    lines = raw_trace.splitlines()
    trace = {}
    if lines:
        header = lines[0].split(",")
        body = [ln.split(",") for ln in lines[1:]]
        if len(body) != manifest["n_records"]:
            raise DataError(f"{TRACE}: {len(body)} records, manifest says {manifest['n_records']}")
        for c, name in enumerate(header):
            col = [row[c] for row in body]
            trace[name] = np.array([float(v) if v != "" else np.nan for v in col])
    raw = _verify(os.path.join(directory, FACTORS), files["factors"])
    layout = manifest["layout"]
    width = layout["record_floats"]
    flat = raw.view("<f8")
    if len(flat) != width * manifest["n_snapshots"]:
        raise DataError(f"{FACTORS}: size does not match {manifest['n_snapshots']} records")
    table = flat.reshape(manifest["n_snapshots"], width)
    blocks = {}
    offset = 1
    for b in layout["blocks"]:
        size = int(np.prod(b["shape"]))
        blocks[b["name"]] = table[:, offset:offset + size].reshape((-1, *b["shape"]))
        offset += size
    return ChainData(manifest, trace, table[:, 0].astype(np.int64), blocks)
