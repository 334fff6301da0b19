"""Model assembly, configuration, ablation variants, parameter accounting and
checkpoints.

Checkpoint directory layout::

    manifest.txt   JSON: format version, config, feature info, parameter
                   name/shape table, frozen branch weights, fingerprints
    params.bin     float64 LE, parameters concatenated in manifest order
    cache.*        candidate cache (see ``maya.decoder``)
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import FeatureInfo
from .decoder import CandidateCache, Decoder, build_candidate_cache, decoder_forward_infer, decoder_forward_train
from .encoder import Encoder, EncoderOutput, encoder_forward
from .layers import Linear, Module, hidden_width
from .tensor import ContractError, Tensor, no_grad, softmax
from .tokenizer import FeatureTokenizer

FORMAT_VERSION = 1

ABLATIONS = ("mha_hidden_size", "mha_head_dim", "mha_free", "no_Wb", "no_decoder", "iail_no_labels",
             "no_tokenizer_act")


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    # encoder
    num_layers: int = 3
    hidden_size: int = 64
    num_heads: int = 4
    num_branch: int = 3
    intermediate_factor: float = 1.0
    dropout: float = 0.1
    add_act: bool = True
    if_bias: bool = True
    act_type: str = "relu"
    # decoder
    num_decoder_layers: int = 2
    decoder_intermediate_factor: float = 1.0
    decoder_dropout: float = 0.1
    decoder_if_bias: bool = True
    decoder_act_type: str = "relu"
    qk_shared_weights: bool = False
    # training
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    max_epochs: int = 200
    patience: int = 16
    # ablation switches
    use_decoder: bool = True
    iail_use_labels: bool = True
    branch_weights_enabled: bool = True
    mask_self: bool = True
    value_projection: bool = True
    ema_momentum: float = 0.9
    branch_softmax_temp: float = 1.0
    invert_branch_scores: bool = False
    aux_loss_coef: float = 0.0
    # task
    task: str = "regression"
    num_classes: int = 0

    def problems(self) -> List[str]:
        out = []
        if self.num_heads < 1 or self.hidden_size % self.num_heads:
            out.append(f"hidden_size {self.hidden_size} must be divisible by num_heads {self.num_heads}")
        if self.num_branch < 1:
            out.append("num_branch must be >= 1")
        if self.num_layers < 1:
            out.append("num_layers must be >= 1")
        if self.use_decoder and self.num_decoder_layers < 1:
            out.append("num_decoder_layers must be >= 1 when use_decoder")
        for name in ("intermediate_factor", "decoder_intermediate_factor"):
            if round(getattr(self, name) * self.hidden_size) < 1:
                out.append(f"{name} * hidden_size must round to >= 1")
        for name in ("dropout", "decoder_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                out.append(f"{name} must lie in [0, 1)")
        if self.act_type not in ("relu", "prelu"):
            out.append(f"act_type must be relu or prelu, got {self.act_type!r}")
        if self.decoder_act_type not in ("relu", "prelu"):
            out.append(f"decoder_act_type must be relu or prelu, got {self.decoder_act_type!r}")
        if not 0.0 <= self.ema_momentum < 1.0:
            out.append("ema_momentum must lie in [0, 1)")
        if self.branch_softmax_temp <= 0:
            out.append("branch_softmax_temp must be > 0")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.use_decoder and self.mask_self and self.batch_size < 2:
            out.append("batch_size must be >= 2 with a self-masked decoder")
        if self.learning_rate < 0 or self.weight_decay < 0:
            out.append("learning_rate and weight_decay must be >= 0")
        if self.task not in ("binary", "multiclass", "regression"):
            out.append(f"unknown task {self.task!r}")
        if self.task == "multiclass" and self.num_classes < 2:
            out.append("multiclass needs num_classes >= 2")
        return out

    def validate(self) -> "ModelConfig":
        errs = self.problems()
        if errs:
            raise ConfigError("invalid config: " + "; ".join(errs))
        return self

    @property
    def out_dim(self) -> int:
        if self.task == "regression":
            return 1
        return 2 if self.task == "binary" else self.num_classes

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # flat key = value text --------------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str, overrides: Sequence[str] = ()) -> "ModelConfig":
        pairs = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {lineno}: expected key = value")
            pairs.append(tuple(s.strip() for s in line.split("=", 1)))
        for ov in overrides:
            if "=" not in ov:
                raise ConfigError(f"override {ov!r} is not key=value")
            pairs.append(tuple(s.strip() for s in ov.split("=", 1)))
        return cls().with_values(dict(pairs))

    def with_values(self, values: Dict[str, str]) -> "ModelConfig":
        types = {f.name: f.type for f in fields(self)}
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        changes = {k: _parse(k, v, types[k]) for k, v in values.items()}
        return self.replace(**changes)

    @classmethod
    def read(cls, path, overrides: Sequence[str] = ()) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), overrides)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(key: str, value: str, typ) -> object:
    name = typ if isinstance(typ, str) else typ.__name__
    try:
        if name == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return low in ("true", "1")
        if name == "int":
            return int(value)
        if name == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {name}") from None


# ---------------------------------------------------------------------------
# ablations and parameter accounting


def make_ablation(config: ModelConfig, variant: str) -> ModelConfig:
    """Derive one ablation configuration from a base configuration."""
    if variant in ("mha_hidden_size", "mha_head_dim"):
        heads = config.num_branch * config.num_heads
        if variant == "mha_hidden_size":
            head_dim = math.ceil(config.hidden_size / heads)
        else:
            head_dim = config.hidden_size // config.num_heads
        return config.replace(num_branch=1, num_heads=heads, hidden_size=heads * head_dim)
    if variant == "mha_free":
        return config.replace(num_branch=1)
    if variant == "no_Wb":
        return config.replace(branch_weights_enabled=False)
    if variant == "no_decoder":
        return config.replace(use_decoder=False)
    if variant == "iail_no_labels":
        return config.replace(iail_use_labels=False)
    if variant == "no_tokenizer_act":
        return config.replace(add_act=False)
    raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {ABLATIONS}")


def encoder_weight_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Shapes of the encoder weight matrices a built model will have
    (biases and LayerNorm excluded), without allocating them."""
    d = config.hidden_size
    h = hidden_width(config.intermediate_factor, d)
    out = []
    n = config.num_branch
    for i in range(config.num_layers):
        out += [(f"encoder.blocks.{i}.attn.{m}.weight", (n, d, d)) for m in "qkvo"]
        out += [(f"encoder.blocks.{i}.ffn.up.weight", (d, h)), (f"encoder.blocks.{i}.ffn.gate.weight", (d, h)),
                (f"encoder.blocks.{i}.ffn.down.weight", (h, d))]
    return out


def count_encoder_params(config: ModelConfig) -> Dict[str, float]:
    """Closed-form encoder counts (attention and FFN weight matrices only) and
    the exact count of the weight matrices the model would hold."""
    d2 = config.hidden_size ** 2
    p_attn = config.num_branch * 4 * d2
    p_ffn = 3 * config.intermediate_factor * d2
    total = config.num_layers * (p_attn + p_ffn)
    exact = sum(int(np.prod(s)) for _, s in encoder_weight_shapes(config))
    return {"P_attn": p_attn, "P_ffn": p_ffn, "P_total": total, "exact": exact}


def param_ratio(variant_config: ModelConfig, base_config: ModelConfig) -> float:
    return count_encoder_params(variant_config)["P_total"] / count_encoder_params(base_config)["P_total"]


# ---------------------------------------------------------------------------
# the model


@dataclass
class Prediction:
    logits: np.ndarray
    proba: Optional[np.ndarray] = None  # classification
    label: Optional[np.ndarray] = None  # classification
    value: Optional[np.ndarray] = None  # regression, original units


class Model(Module):
    """Tokenizer, encoder, optional decoder and a single linear predictor."""

    def __init__(self, config: ModelConfig, info: FeatureInfo, seed: int = 0) -> None:
        super().__init__()
        config = config.replace(task=info.task, num_classes=info.num_classes if info.task != "regression" else 0)
        config.validate()
        self.config = config
        self.info = info
        self.seed = seed
        rng = np.random.default_rng(seed)
        d = config.hidden_size
        act = config.act_type if config.add_act else "none"
        self.tokenizer = self.add_child("tokenizer", FeatureTokenizer(rng, info.n_num, info.cat_cardinalities, d, act))
        self.encoder = self.add_child("encoder", Encoder(
            rng, d, config.num_layers, config.num_heads, config.num_branch, config.intermediate_factor,
            config.if_bias, config.dropout, config.ema_momentum, config.branch_weights_enabled,
            config.branch_softmax_temp, config.invert_branch_scores))
        self.decoder: Optional[Decoder] = None
        if config.use_decoder:
            self.decoder = self.add_child("decoder", Decoder(
                rng, d, config.num_decoder_layers, info.task, config.num_classes,
                config.decoder_intermediate_factor, config.decoder_if_bias, config.decoder_act_type,
                config.qk_shared_weights, config.decoder_dropout, config.iail_use_labels, config.mask_self,
                config.value_projection))
        self.predictor = self.add_child("predictor", Linear(rng, d, config.out_dim, True))
        for name, p in self.named_parameters():
            p.name = name
        self.training = True
        self.dropout_rng = np.random.default_rng([seed, 1])
        self.target_mean = 0.0
        self.target_std = 1.0
        self.data_fingerprint = ""

    @property
    def loss_kind(self) -> str:
        return "mse" if self.config.task == "regression" else "ce"

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def predict_head(self, z: Tensor) -> Tensor:
        return self.predictor(z)

    def encode(self, x_num, x_cat, *, capture_maps: bool = False) -> EncoderOutput:
        tokens = self.tokenizer(x_num, x_cat)
        rng = self.dropout_rng if self.training else None
        return encoder_forward(tokens, self.encoder, training=self.training, rng=rng, capture_maps=capture_maps)

    def encode_eval(self, x_num, x_cat) -> np.ndarray:
        """Encoder output with dropout off and no tape, for the candidate cache."""
        was = self.training
        self.training = False
        try:
            with no_grad():
                return self.encode(x_num, x_cat).z_hat.data
        finally:
            self.training = was

    def build_summary(self) -> Dict[str, int]:
        """Parameter counts per top-level module."""
        out: Dict[str, int] = {}
        for name, p in self.named_parameters():
            top = name.split(".", 1)[0]
            out[top] = out.get(top, 0) + p.data.size
        out["total"] = sum(out.values())
        return out

    def branch_weights(self) -> np.ndarray:
        return np.stack([s.current for s in self.encoder.weight_states])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        for s in self.encoder.weight_states:
            h.update(s.weights.tobytes())
        h.update(self.data_fingerprint.encode())
        return h.hexdigest()[:16]

    def state(self) -> Dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        for i, s in enumerate(self.encoder.weight_states):
            out[f"__wb{i}"] = s.weights.copy()
        return out

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data[...] = state[name]
        for i, s in enumerate(self.encoder.weight_states):
            s.weights = state[f"__wb{i}"].copy()

    def build_cache(self, x_num, x_cat, labels, batch_size: int = 1024) -> CandidateCache:
        if self.decoder is None:
            raise ContractError("model has no decoder")
        return build_candidate_cache(self.encode_eval, self.decoder.lel, x_num, x_cat, labels,
                                     self.fingerprint(), batch_size)


def build(config: ModelConfig, info: FeatureInfo, seed: int = 0) -> Model:
    return Model(config, info, seed)


@dataclass
class TrainOutput:
    logits: Tensor
    branch_cls: List[List[np.ndarray]]
    z_hat: Tensor
    encoder: EncoderOutput = field(repr=False, default=None)  # type: ignore[assignment]


def forward_train(model: Model, x_num, x_cat, labels) -> TrainOutput:
    """Tokenize, encode, decode against the batch itself, predict."""
    enc = model.encode(x_num, x_cat)
    z = enc.z_hat
    if model.decoder is not None:
        rng = model.dropout_rng if model.training else None
        z = decoder_forward_train(enc.z_hat, labels, model.decoder, training=model.training, rng=rng)
    return TrainOutput(model.predictor(z), enc.branch_cls, enc.z_hat, enc)


def forward_infer(model: Model, x_num, x_cat, cache: Optional[CandidateCache] = None,
                  chunk: int = 1024) -> Prediction:
    """Deterministic prediction; the decoder attends over the training cache."""
    if model.training:
        raise ContractError("forward_infer needs eval mode")
    if model.decoder is not None:
        if cache is None:
            raise ContractError("a candidate cache is required when the model has a decoder")
        cache.check(model.fingerprint())
    x_num = np.asarray(x_num, dtype=np.float64)
    x_cat = np.asarray(x_cat)
    n = x_num.shape[0] if x_num.ndim == 2 and x_num.shape[1] else x_cat.shape[0]
    logits = []
    with no_grad():
        for s in range(0, n, chunk):
            z = model.encode(x_num[s:s + chunk], x_cat[s:s + chunk]).z_hat
            if model.decoder is not None:
                z = Tensor(decoder_forward_infer(z.data, cache, model.decoder))
            logits.append(model.predictor(z).data)
    z = np.concatenate(logits, axis=0) if logits else np.zeros((0, model.config.out_dim))
    if model.config.task == "regression":
        return Prediction(z, value=z[:, 0] * model.target_std + model.target_mean)
    with no_grad():
        proba = softmax(Tensor(z), axis=-1).data if len(z) else z
    return Prediction(z, proba=proba, label=proba.argmax(axis=1) if len(z) else np.zeros(0, dtype=int))


# ---------------------------------------------------------------------------
# checkpoints


def save(model: Model, path, cache: Optional[CandidateCache] = None) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    named = list(model.named_parameters())
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "features": {"n_num": model.info.n_num, "cat_cardinalities": list(model.info.cat_cardinalities),
                     "task": model.info.task, "num_classes": model.info.num_classes},
        "seed": model.seed,
        "params": [[name, list(p.shape)] for name, p in named],
        "n_values": int(sum(p.data.size for _, p in named)),
        "branch_weights": [s.weights.tolist() for s in model.encoder.weight_states],
        "target_mean": model.target_mean,
        "target_std": model.target_std,
        "data_fingerprint": model.data_fingerprint,
    }
    (d / "manifest.txt").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    with open(d / "params.bin", "wb") as fh:
        for _, p in named:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    if cache is not None:
        cache.save(d)


def load(path, expect: Optional[ModelConfig] = None) -> Model:
    d = Path(path)
    try:
        manifest = json.loads((d / "manifest.txt").read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise CheckpointError(f"cannot read manifest in {d}: {e}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"format_version {manifest.get('format_version')} != {FORMAT_VERSION}")
    try:
        config = ModelConfig(**manifest["config"])
    except TypeError as e:
        raise CheckpointError(f"config: {e}") from None
    if expect is not None:
        want = expect.replace(task=config.task, num_classes=config.num_classes).to_dict()
        for key, value in config.to_dict().items():
            if want[key] != value:
                raise CheckpointError(f"config field {key!r}: checkpoint has {value!r}, expected {want[key]!r}")
    f = manifest["features"]
    model = Model(config, FeatureInfo(f["n_num"], f["cat_cardinalities"], f["task"], f["num_classes"]),
                  manifest["seed"])
    blob = np.fromfile(d / "params.bin", dtype="<f8")
    if blob.size != manifest["n_values"]:
        raise CheckpointError(f"params.bin holds {blob.size} values, manifest lists {manifest['n_values']}")
    named = dict(model.named_parameters())
    if [n for n, _ in manifest["params"]] != list(named):
        raise CheckpointError("parameter table does not match the configured architecture")
    pos = 0
    for name, shape in manifest["params"]:
        p = named[name]
        if list(p.shape) != shape:
            raise CheckpointError(f"parameter {name!r}: shape {shape} != {list(p.shape)}")
        size = p.data.size
        p.data[...] = blob[pos:pos + size].reshape(p.shape)
        pos += size
    for s, w in zip(model.encoder.weight_states, manifest["branch_weights"]):
        s.weights = np.array(w, dtype=np.float64)
    model.target_mean = manifest["target_mean"]
    model.target_std = manifest["target_std"]
    model.data_fingerprint = manifest["data_fingerprint"]
    return model.eval()
