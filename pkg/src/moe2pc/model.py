"""Model configurations, weights, and the forward passes (plain fixed-point, float, secure)."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .fixed import DEFAULT, FixedConfig, decode, encode, fixed_matmul, ring_add
from .protocols.attention import attention_fixed, attention_float, secure_attention
from .protocols.linear import secure_matmul_pt
from .protocols.moe import ExpertWeights, moe_fixed, moe_float, naive_dense_moe, secure_sparse_moe
from .protocols.nonlinear import layernorm_fixed, layernorm_float, secure_layernorm
from .sharing import ArithShare, Party

WEIGHT_RANGE = 0.1
FORMAT = "moe2pc-weights"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class MalformedWeights(ValueError):
    pass


class DimMismatch(MalformedWeights):
    pass


@dataclass(frozen=True)
class ModelConfig:
    name: str = "toy-moe-8e"
    d_model: int = 64
    d_ff: int = 128
    num_heads: int = 4
    num_layers: int = 2
    n_experts: int = 8
    k_experts: int = 1
    seq_len: int = 8

    def __post_init__(self):
        if self.n_experts < 1:
            raise ConfigError("n_experts must be at least 1")
        if self.k_experts != 1:
            raise ConfigError("only k_experts = 1 is supported")
        if self.d_model % self.num_heads:
            raise ConfigError("d_model must be divisible by num_heads")
        for f in ("d_model", "d_ff", "num_heads", "num_layers", "seq_len"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads


_PRESETS = {
    "toy-moe": dict(d_model=64, d_ff=128, num_heads=4, num_layers=2),
    "tiny-moe": dict(d_model=16, d_ff=32, num_heads=4, num_layers=2),
}


def config_by_name(name: str, **overrides) -> ModelConfig:
    """'toy-moe-8e' style names: preset family plus expert count."""
    m = re.fullmatch(r"([a-z]+-moe)-(\d+)e", name)
    if not m or m.group(1) not in _PRESETS:
        raise ConfigError(f"unknown model config {name!r}; expected e.g. toy-moe-8e or tiny-moe-4e")
    kw = dict(_PRESETS[m.group(1)], n_experts=int(m.group(2)))
    kw.update(overrides)
    return ModelConfig(name=name, **kw)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    gate: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    experts: list = field(default_factory=list)


@dataclass
class WeightStore:
    config: ModelConfig
    seed: int
    layers: list
    fixed: FixedConfig = DEFAULT

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat name -> ring tensor view, in a fixed order."""
        out = {}
        for i, lw in enumerate(self.layers):
            for f in fields(LayerWeights):
                if f.name == "experts":
                    continue
                out[f"layers.{i}.{f.name}"] = getattr(lw, f.name)
            for j, e in enumerate(lw.experts):
                for nm in ("W1", "V", "W2"):
                    out[f"layers.{i}.experts.{j}.{nm}"] = getattr(e, nm)
        return out

    def real(self, arr) -> np.ndarray:
        return decode(arr, self.fixed)


def _layer_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, n, E = cfg.d_model, cfg.d_ff, cfg.n_experts
    return {
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "ln1_g": (d,), "ln1_b": (d,), "gate": (d, E), "ln2_g": (d,), "ln2_b": (d,),
        "W1": (d, n), "V": (d, n), "W2": (n, d),
    }


def gen_weights(cfg: ModelConfig, seed: int, fixed: FixedConfig = DEFAULT) -> WeightStore:
    """Uniform [-0.1, 0.1] values, fixed-point encoded; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    shapes = _layer_shapes(cfg)

    def draw(name):
        return encode(rng.uniform(-WEIGHT_RANGE, WEIGHT_RANGE, shapes[name]), fixed)

    layers = []
    for _ in range(cfg.num_layers):
        base = {f.name: draw(f.name) for f in fields(LayerWeights) if f.name != "experts"}
        experts = [ExpertWeights(draw("W1"), draw("V"), draw("W2")) for _ in range(cfg.n_experts)]
        layers.append(LayerWeights(**base, experts=experts))
    return WeightStore(cfg, seed, layers, fixed)


# -- serialisation -------------------------------------------------------------

def _blob_name(tensor: str) -> str:
    return tensor + ".bin"


def save_weights(store: WeightStore, path) -> Path:
    """Write ``manifest.txt`` plus one little-endian u64 blob per tensor into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = store.config
    lines = [f"format={FORMAT}", f"version={FORMAT_VERSION}"]
    lines += [f"{f.name}={getattr(cfg, f.name)}" for f in fields(ModelConfig)]
    lines += [f"seed={store.seed}", f"scale={store.fixed.scale_s}", f"ell={store.fixed.ell}"]
    for name, arr in store.tensors().items():
        blob = _blob_name(name)
        (path / blob).write_bytes(np.ascontiguousarray(arr, dtype="<u8").tobytes())
        lines.append(f"tensor.{name}={blob} {'x'.join(str(s) for s in arr.shape)}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def _parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MalformedWeights(f"manifest line {ln}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _read_header(path: Path):
    try:
        meta = _parse_manifest((path / "manifest.txt").read_text())
    except UnicodeDecodeError as err:
        raise MalformedWeights(f"manifest is not text: {err}") from None
    if meta.get("format") != FORMAT or meta.get("version") != str(FORMAT_VERSION):
        raise MalformedWeights("not a weights manifest (format/version)")
    try:
        kw = {}
        for f in fields(ModelConfig):
            raw = meta[f.name]
            kw[f.name] = raw if f.name == "name" else int(raw)
        cfg = ModelConfig(**kw)
        fixed = FixedConfig(int(meta["ell"]), int(meta["scale"]))
        seed = int(meta["seed"])
    except (KeyError, ValueError) as err:
        raise MalformedWeights(f"bad manifest header: {err}") from None
    return meta, cfg, fixed, seed


def read_config(path) -> tuple[ModelConfig, FixedConfig]:
    """Config and ring parameters from a manifest, without touching the blobs."""
    _, cfg, fixed, _ = _read_header(Path(path))
    return cfg, fixed


def load_weights(path) -> WeightStore:
    path = Path(path)
    meta, cfg, fixed, seed = _read_header(path)
    shapes = _layer_shapes(cfg)

    def read(name, expected):
        entry = meta.get(f"tensor.{name}")
        if entry is None:
            raise MalformedWeights(f"manifest lacks tensor {name}")
        try:
            blob, dims = entry.split()
            shape = tuple(int(s) for s in dims.split("x"))
        except ValueError:
            raise MalformedWeights(f"bad tensor entry for {name}: {entry!r}") from None
        if shape != expected:
            raise DimMismatch(f"{name}: manifest dims {shape} do not match config {expected}")
        raw = (path / blob).read_bytes()
        want = int(np.prod(shape)) * 8
        if len(raw) != want:
            raise MalformedWeights(f"{blob}: {len(raw)} bytes, expected {want}")
        return fixed.reduce(np.frombuffer(raw, dtype="<u8").astype(np.uint64).reshape(shape))

    layers = []
    for i in range(cfg.num_layers):
        base = {f.name: read(f"layers.{i}.{f.name}", shapes[f.name]) for f in fields(LayerWeights) if f.name != "experts"}
        experts = [ExpertWeights(*(read(f"layers.{i}.experts.{j}.{nm}", shapes[nm]) for nm in ("W1", "V", "W2")))
                   for j in range(cfg.n_experts)]
        layers.append(LayerWeights(**base, experts=experts))
    return WeightStore(cfg, seed, layers, fixed)


# -- forward passes -------------------------------------------------------------

def _check_tokens(cfg: ModelConfig, shape):
    if len(shape) != 2 or shape[1] != cfg.d_model:
        raise DimMismatch(f"tokens must be T x {cfg.d_model}, got {tuple(shape)}")


def plain_forward(cfg: ModelConfig, store: WeightStore, tokens, gate_scaling: bool = False) -> np.ndarray:
    """Ring-exact plaintext forward with the secure path's truncation points."""
    fx = store.fixed
    x = fx.reduce(tokens)
    _check_tokens(cfg, x.shape)
    for lw in store.layers:
        a = attention_fixed(x, lw.wq, lw.wk, lw.wv, cfg.num_heads, fx)
        h = layernorm_fixed(ring_add(x, fixed_matmul(a, lw.wo, fx), fx), store.real(lw.ln1_g), store.real(lw.ln1_b), fx)
        g = fixed_matmul(h, lw.gate, fx)
        y = moe_fixed(h, g, lw.experts, gate_scaling, fx)
        x = layernorm_fixed(ring_add(h, y, fx), store.real(lw.ln2_g), store.real(lw.ln2_b), fx)
    return x


def float_forward(cfg: ModelConfig, store: WeightStore, tokens, gate_scaling: bool = False) -> np.ndarray:
    """Double-precision shadow of :func:`plain_forward` (same approximations, no rounding)."""
    r = store.real
    x = np.asarray(tokens, dtype=float)
    _check_tokens(cfg, x.shape)
    for lw in store.layers:
        a = attention_float(x, r(lw.wq), r(lw.wk), r(lw.wv), cfg.num_heads)
        h = layernorm_float(x + a @ r(lw.wo), r(lw.ln1_g), r(lw.ln1_b))
        g = h @ r(lw.gate)
        experts = [ExpertWeights(r(e.W1), r(e.V), r(e.W2)) for e in lw.experts]
        x = layernorm_float(h + moe_float(h, g, experts, gate_scaling), r(lw.ln2_g), r(lw.ln2_b))
    return x


MOE_PROTOCOLS = {"secmoe": secure_sparse_moe, "dense": naive_dense_moe}


def secure_forward(p: Party, cfg: ModelConfig, store: WeightStore | None, x: ArithShare,
                   protocol: str = "secmoe", gate_scaling: bool = False) -> ArithShare:
    """Both parties call this; only the server passes ``store``."""
    moe_fn = MOE_PROTOCOLS[protocol]
    _check_tokens(cfg, x.shape)
    d, E = cfg.d_model, cfg.n_experts
    for i in range(cfg.num_layers):
        lw = store.layers[i] if store is not None else None
        real = store.real if store is not None else (lambda a: None)
        w = (lambda name: getattr(lw, name)) if lw is not None else (lambda name: None)
        with p.section(f"layer{i}"):
            a = secure_attention(p, x, w("wq"), w("wk"), w("wv"), heads=cfg.num_heads)
            with p.section("attn/out"):
                o = secure_matmul_pt(p, a, w("wo"), n=d)
            h = secure_layernorm(p, x + o, real(w("ln1_g")), real(w("ln1_b")))
            with p.section("gate"):
                g = secure_matmul_pt(p, h, w("gate"), n=E)
            y = moe_fn(p, h, g, lw.experts if lw is not None else None, n_experts=E, d_ff=cfg.d_ff,
                       gate_scaling=gate_scaling)
            x = secure_layernorm(p, h + y, real(w("ln2_g")), real(w("ln2_b")))
    return x
