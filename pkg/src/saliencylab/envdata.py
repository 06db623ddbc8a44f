"""Synthetic multi-environment datasets with known ground-truth importance.

Each generator plants a causal signal (core features / shape channel) that
predicts the target in every environment, plus spurious features whose
association with the target has per-environment strength rho and is reversed
in the held-out test environment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BundleFormatError, BundleVersionError, GraphInputError

BUNDLE_MAGIC = "SLBUNDLE"
BUNDLE_VERSION = 1


@dataclass
class EnvironmentDataset:
    env_id: str
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise GraphInputError(
                f"env {self.env_id}: {self.x.shape[0]} samples vs "
                f"{self.y.shape[0]} targets")

    def __len__(self):
        return self.x.shape[0]


@dataclass
class DatasetBundle:
    train_envs: list
    test_env: EnvironmentDataset
    true_importance: np.ndarray
    task: str                     # "classification" or "regression"
    n_classes: int = 2

    def __post_init__(self):
        if len(self.train_envs) < 2:
            raise GraphInputError("bundle needs at least two training environments")
        ids = [e.env_id for e in self.all_envs()]
        if len(set(ids)) != len(ids):
            raise GraphInputError(f"duplicate env ids: {ids}")
        shape = self.feature_shape()
        for e in self.all_envs():
            if e.x.shape[1:] != shape:
                raise GraphInputError(
                    f"env {e.env_id} feature shape {e.x.shape[1:]} != {shape}")
        if self.true_importance.size != int(np.prod(shape)):
            raise GraphInputError("true_importance length != feature count")

    def feature_shape(self):
        return self.train_envs[0].x.shape[1:]

    def all_envs(self):
        return list(self.train_envs) + [self.test_env]


@dataclass(frozen=True)
class GeneratorConfig:
    kind: str = "tabular_cls"     # tabular_cls | tiny_image_cls | tabular_reg
    d_core: int = 5
    d_spur: int = 5
    d_noise: int = 10
    rho_train: tuple = (0.95, 0.9, 0.8)
    rho_test: float = -0.9
    samples_per_env: int = 2000
    teacher_seed: int = 0
    sigma: float = 0.4            # spurious-feature noise scale
    label_margin: float = 0.3     # tabular_cls: min |teacher score|/std at the boundary
    label_sigma: float = 0.1      # tabular_reg: target noise
    n_classes: int = 2            # tiny_image_cls
    image_size: int = 16

    def __post_init__(self):
        if self.kind not in ("tabular_cls", "tiny_image_cls", "tabular_reg"):
            raise GraphInputError(f"unknown generator kind {self.kind!r}")
        if self.d_core < 1:
            raise GraphInputError("d_core must be >= 1")
        if len(self.rho_train) < 2:
            raise GraphInputError("need at least two training environments")
        if any(not 0 < r <= 1 for r in self.rho_train):
            raise GraphInputError("train rho values must lie in (0, 1]")
        if not -1 <= self.rho_test <= 0:
            raise GraphInputError("test rho must lie in [-1, 0]")
        if self.samples_per_env < 1:
            raise GraphInputError("samples_per_env must be >= 1")
        if self.kind == "tiny_image_cls" and self.image_size < 8:
            raise GraphInputError("image_size must be >= 8")


# Core features concentrate around per-class prototypes of this amplitude
# along the teacher's principal direction, so the causal signal is both the
# *cheapest* route to the label in sensitivity terms (a predictor reaches a
# given margin with smaller input gradients through core features than
# through anything else) and nearly shared by same-label samples.
CORE_STD = 4.0

# Within-class scatter of the core features around their prototype.
CORE_JITTER = 0.75

# Gain of the teacher's first layer relative to the core amplitude.  Small
# values keep tanh in its gently-curved range, so the causal relationship is
# close to (but not exactly) linear and a low-curvature predictor can fit it.
TEACHER_GAIN = 0.25


class _Teacher:
    """Fixed random two-layer map from core features to a scalar score."""

    def __init__(self, d_core, seed, width=8):
        rng = np.random.default_rng(seed)
        self.w1 = rng.standard_normal((d_core, width)) * (
            TEACHER_GAIN / (CORE_STD * np.sqrt(d_core)))
        self.w2 = rng.standard_normal((width,))
        # principal direction: the raw map's gradient at the origin
        grad0 = self.w1 @ self.w2
        self.direction = grad0 / np.linalg.norm(grad0)
        # center/scale from a large reference draw so classes balance
        ref = self.raw(self.sample_core(50000, rng))
        self.offset = float(np.median(ref))
        self.scale = float(np.std(ref))

    def sample_core(self, n, rng, drive=None):
        """Core features: a scalar drive along the principal direction plus
        isotropic within-class jitter."""
        if drive is None:
            drive = rng.standard_normal(n)
        return (CORE_STD * drive[:, None] * self.direction
                + CORE_JITTER * rng.standard_normal((n, self.w1.shape[0])))

    def raw(self, core):
        return np.tanh(core @ self.w1) @ self.w2

    def score(self, core):
        return (self.raw(core) - self.offset) / self.scale


def _gen_tabular_env(config, teacher, rho, n, rng, regression):
    if regression:
        core = teacher.sample_core(n, rng)
        y = teacher.score(core) + config.label_sigma * rng.standard_normal(n)
        y_drive = y
    else:
        core = np.empty((n, config.d_core))
        y_sign = np.empty(n)
        filled = 0
        while filled < n:           # rejection keeps a margin off the boundary
            m = 2 * (n - filled) + 8
            drive = np.sign(rng.standard_normal(m))   # balanced class prototypes
            cand = teacher.sample_core(m, rng, drive=drive)
            s = teacher.score(cand)
            keep = np.abs(s) >= config.label_margin
            take = min(int(keep.sum()), n - filled)
            core[filled:filled + take] = cand[keep][:take]
            y_sign[filled:filled + take] = np.sign(s[keep][:take])
            filled += take
        y = ((y_sign + 1) // 2).astype(np.int64)
        y_drive = y_sign
    spur = y_drive[:, None] * rho + config.sigma * rng.standard_normal((n, config.d_spur))
    noise = rng.standard_normal((n, config.d_noise))
    x = np.concatenate([core, spur, noise], axis=1)
    return x, y


def _class_masks(k, size, seed):
    """k distinct binary shape masks on a size x size canvas."""
    rng = np.random.default_rng(seed)
    masks = []
    yy, xx = np.mgrid[0:size, 0:size]
    margin = max(2, size // 4)
    for c in range(k):
        cy, cx = rng.integers(margin, size - margin, size=2)
        r = rng.integers(2, 4)
        if c % 2 == 0:
            m = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r ** 2
        else:
            m = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        masks.append(m.astype(np.float64))
    return masks


def _gen_image_env(config, masks, texture, rho, n, rng):
    size, k = config.image_size, config.n_classes
    y = rng.integers(0, k, size=n)
    shape_ch = np.stack([masks[c] for c in y]) + 0.3 * rng.standard_normal((n, size, size))
    agree = rng.random(n) < (1.0 + rho) / 2.0
    sign = np.where(agree, 1.0, -1.0) * np.where(y == 0, 1.0, -1.0)
    tex_ch = sign[:, None, None] * texture + 0.3 * rng.standard_normal((n, size, size))
    x = np.stack([shape_ch, tex_ch], axis=1)
    return x, y.astype(np.int64)


def generate(config: GeneratorConfig, seed: int) -> DatasetBundle:
    """Deterministic bundle for (config, seed)."""
    rng = np.random.default_rng(seed)
    n = config.samples_per_env
    if config.kind == "tiny_image_cls":
        size = config.image_size
        masks = _class_masks(config.n_classes, size, config.teacher_seed)
        tex_rng = np.random.default_rng(config.teacher_seed + 1)
        texture = np.sign(tex_rng.standard_normal((size, size)))
        envs = []
        for i, rho in enumerate(config.rho_train):
            x, y = _gen_image_env(config, masks, texture, rho, n, rng)
            envs.append(EnvironmentDataset(env_id=f"train{i}", x=x, y=y))
        xt, yt = _gen_image_env(config, masks, texture, config.rho_test, n, rng)
        test = EnvironmentDataset(env_id="test", x=xt, y=yt)
        importance = np.zeros((2, size, size))
        importance[0] = np.maximum.reduce(masks)
        return DatasetBundle(train_envs=envs, test_env=test,
                             true_importance=importance.reshape(-1),
                             task="classification", n_classes=config.n_classes)

    regression = config.kind == "tabular_reg"
    teacher = _Teacher(config.d_core, config.teacher_seed)
    envs = []
    for i, rho in enumerate(config.rho_train):
        x, y = _gen_tabular_env(config, teacher, rho, n, rng, regression)
        envs.append(EnvironmentDataset(env_id=f"train{i}", x=x, y=y))
    xt, yt = _gen_tabular_env(config, teacher, config.rho_test, n, rng, regression)
    test = EnvironmentDataset(env_id="test", x=xt, y=yt)
    importance = np.concatenate([np.ones(config.d_core),
                                 np.zeros(config.d_spur + config.d_noise)])
    return DatasetBundle(train_envs=envs, test_env=test,
                         true_importance=importance,
                         task="regression" if regression else "classification",
                         n_classes=1 if regression else 2)


def split_train_val(env: EnvironmentDataset, fraction=0.8, seed=0):
    """Seeded shuffle, then a disjoint, exhaustive split per environment."""
    if not 0 < fraction < 1:
        raise GraphInputError("fraction must lie strictly between 0 and 1")
    if len(env) == 0:
        raise GraphInputError(f"env {env.env_id} is empty")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(env))
    cut = int(round(fraction * len(env)))
    tr, va = order[:cut], order[cut:]
    return (EnvironmentDataset(env.env_id, env.x[tr], env.y[tr]),
            EnvironmentDataset(env.env_id, env.x[va], env.y[va]))


def rotations(bundle: DatasetBundle):
    """Every environment takes one turn as the held-out test set."""
    envs = bundle.all_envs()
    out = []
    for i, test in enumerate(envs):
        train = [e for j, e in enumerate(envs) if j != i]
        out.append(DatasetBundle(train_envs=train, test_env=test,
                                 true_importance=bundle.true_importance,
                                 task=bundle.task, n_classes=bundle.n_classes))
    return out


# -- bundle files --------------------------------------------------------------
#
# Self-describing layout: ASCII header, then raw little-endian float64 data.
#   SLBUNDLE 1
#   task classification
#   n_classes 2
#   feature_shape 20
#   true_importance v0 v1 ...
#   env train0 train <n samples>
#   ...
#   env test test <n samples>
#   DATA
# After the DATA line: for each env in header order, the samples
# (n * prod(feature_shape) doubles, row-major) followed by the targets
# (n doubles; class ids stored as doubles).

def save_bundle(bundle: DatasetBundle, path):
    shape = bundle.feature_shape()
    lines = [f"{BUNDLE_MAGIC} {BUNDLE_VERSION}",
             f"task {bundle.task}",
             f"n_classes {bundle.n_classes}",
             "feature_shape " + " ".join(str(s) for s in shape),
             "true_importance " + " ".join(repr(float(v)) for v in bundle.true_importance)]
    for e in bundle.train_envs:
        lines.append(f"env {e.env_id} train {len(e)}")
    lines.append(f"env {bundle.test_env.env_id} test {len(bundle.test_env)}")
    lines.append("DATA\n")
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode("ascii"))
        for e in bundle.all_envs():
            fh.write(e.x.astype("<f8").tobytes())
            fh.write(e.y.astype("<f8").tobytes())


def load_bundle(path) -> DatasetBundle:
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = blob.find(b"DATA\n")
    if marker < 0:
        raise BundleFormatError(f"{path}: missing DATA marker")
    header = blob[:marker].decode("ascii").splitlines()
    if not header or not header[0].startswith(BUNDLE_MAGIC):
        raise BundleFormatError(f"{path}: not a bundle file")
    version = int(header[0].split()[1])
    if version != BUNDLE_VERSION:
        raise BundleVersionError(f"{path}: unsupported bundle version {version}")
    fields = {}
    env_meta = []
    for lineno, line in enumerate(header[1:], start=2):
        key, *rest = line.split()
        if key == "env":
            if len(rest) != 3 or rest[1] not in ("train", "test"):
                raise BundleFormatError(f"{path}: bad env line {lineno}: {line!r}")
            env_meta.append((rest[0], rest[1], int(rest[2])))
        else:
            fields[key] = rest
    try:
        task = fields["task"][0]
        n_classes = int(fields["n_classes"][0])
        shape = tuple(int(s) for s in fields["feature_shape"])
        importance = np.array([float(v) for v in fields["true_importance"]])
    except (KeyError, ValueError, IndexError) as exc:
        raise BundleFormatError(f"{path}: bad header field: {exc}") from None

    offset = marker + 5
    feat = int(np.prod(shape))
    train, test = [], None
    for env_id, role, count in env_meta:
        nbytes = count * (feat + 1) * 8
        if offset + nbytes > len(blob):
            raise BundleFormatError(f"{path}: truncated env {env_id}", offset=offset)
        x = np.frombuffer(blob, dtype="<f8", count=count * feat,
                          offset=offset).reshape((count,) + shape).copy()
        offset += count * feat * 8
        y = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).copy()
        offset += count * 8
        if task == "classification":
            y = y.astype(np.int64)
        env = EnvironmentDataset(env_id=env_id, x=x, y=y)
        if role == "train":
            train.append(env)
        else:
            test = env
    if test is None:
        raise BundleFormatError(f"{path}: no test environment declared")
    return DatasetBundle(train_envs=train, test_env=test,
                         true_importance=importance, task=task, n_classes=n_classes)
