"""Backbone registry and the GAP + dense(2, softmax) crack classifier.

The feature extractors are the stock ``keras.applications`` definitions with
their original top layers removed. A :class:`ClassifierModel` exposes, besides
class probabilities, the pre-pool feature maps and the dense-layer weights that
the attention maps are built from.
"""

from __future__ import annotations

import dataclasses
import datetime
import enum
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any

import keras
import numpy as np

from crackscan import CLASS_NAMES, CRACK
from crackscan.errors import ArtifactError, PreprocessMismatchError, RegistryError, WeightsUnavailableError
from crackscan.preprocess import PreprocessMode, default_constants, preprocess

log = logging.getLogger(__name__)

WEIGHTS_FILE = "weights.weights.h5"
METADATA_FILE = "metadata.json"
WEIGHTS_DIR_ENV = "CRACKSCAN_WEIGHTS_DIR"


class Optimizer(str, enum.Enum):
    SGD = "SGD"
    ADAM = "ADAM"


class Regime(str, enum.Enum):
    TRANSFER = "TRANSFER"
    SCRATCH = "SCRATCH"

    @classmethod
    def parse(cls, value: "Regime | str") -> "Regime":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise RegistryError(f"unknown regime {value!r}; expected transfer or scratch") from None


@dataclasses.dataclass(frozen=True)
class BackboneSpec:
    name: str
    params_millions: float  # full reference model, original top included
    depth: int
    preprocess: PreprocessMode
    optimizer: Optimizer
    default_lr: float
    keras_name: str

    @property
    def constructor(self):
        return getattr(keras.applications, self.keras_name)


def _spec(name, params, depth, mode, lr, keras_name=None):
    opt = Optimizer.SGD if name in ("VGG16", "VGG19") else Optimizer.ADAM
    return BackboneSpec(name, params, depth, mode, opt, lr, keras_name or name)


_B, _S, _D = PreprocessMode.BGR_CENTERED, PreprocessMode.SYMMETRIC_UNIT, PreprocessMode.UNIT_IMAGENET_NORM

REGISTRY: dict[str, BackboneSpec] = {
    s.name: s
    for s in (
        _spec("VGG16", 138.4, 16, _B, 1e-4),
        _spec("VGG19", 143.7, 19, _B, 1e-4),
        _spec("InceptionResNetV2", 55.9, 449, _S, 1e-4),
        _spec("MobileNetV3Small", 2.9, 66, _S, 1e-4),
        _spec("MobileNetV3Large", 5.4, 217, _S, 1e-4),
        _spec("DenseNet121", 8.1, 242, _D, 1e-4),
        _spec("DenseNet169", 14.3, 338, _D, 1e-4),
        _spec("DenseNet201", 20.2, 402, _D, 1e-4),
        _spec("ResNet50V2", 25.6, 103, _S, 8.5e-5),
        _spec("ResNet101V2", 44.7, 205, _S, 8.5e-5),
        _spec("Xception", 22.9, 81, _S, 1e-3),
    )
}
REGISTRY_ORDER = list(REGISTRY)

_ALIASES = {"resnet50": "ResNet50V2", "resnet101": "ResNet101V2"}

# Learning rates used per (regime, case_id), in REGISTRY_ORDER.
_LR_COLUMNS = {
    (Regime.TRANSFER, 0): (1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 8.5e-5, 8.5e-5, 1e-3),
    (Regime.TRANSFER, 1): (1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 8.5e-5, 8.5e-5, 1e-3),
    (Regime.TRANSFER, 2): (1e-4, 1e-4, 1e-4, 8.5e-4, 8.5e-4, 1e-4, 1e-4, 1e-4, 8.5e-5, 8.5e-5, 1e-3),
    (Regime.TRANSFER, 3): (1e-4, 1e-4, 1e-4, 8.5e-4, 8.5e-4, 1e-4, 1e-4, 1e-4, 8.5e-5, 8.5e-5, 1e-3),
    (Regime.TRANSFER, 4): (1e-4, 1e-4, 1e-4, 8.5e-4, 8.5e-4, 1e-4, 1e-4, 1e-4, 8.5e-5, 8.5e-5, 1e-3),
    (Regime.TRANSFER, 5): (1e-4, 1e-4, 1e-4, 8.5e-4, 8.5e-4, 1e-4, 1e-4, 1e-4, 8.5e-5, 8.5e-5, 1e-3),
    (Regime.SCRATCH, 0): (1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-5, 8.5e-5, 8.5e-5, 8.5e-5),
    (Regime.SCRATCH, 1): (1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-5, 1e-5, 8.5e-5, 8.5e-5, 8.5e-5),
    (Regime.SCRATCH, 2): (1e-4, 1e-4, 1e-4, 1e-4, 1e-3, 1e-4, 1e-3, 1e-4, 8.5e-5, 8.5e-5, 1e-3),
    (Regime.SCRATCH, 3): (1e-4, 1e-4, 1e-4, 8.5e-4, 8.5e-4, 1e-4, 1e-4, 1e-4, 8.5e-5, 8.5e-5, 1e-3),
    (Regime.SCRATCH, 4): (1e-4, 1e-4, 1e-4, 8.5e-4, 8.5e-4, 1e-4, 1e-4, 1e-4, 8.5e-5, 8.5e-5, 1e-3),
    (Regime.SCRATCH, 5): (1e-4, 1e-4, 1e-4, 8.5e-4, 8.5e-4, 1e-4, 1e-4, 1e-4, 8.5e-5, 8.5e-5, 1e-3),
}


def get_spec(name: str | BackboneSpec) -> BackboneSpec:
    if isinstance(name, BackboneSpec):
        return name
    key = {n.lower(): n for n in REGISTRY}.get(name.lower()) or _ALIASES.get(name.lower())
    if key is None:
        raise RegistryError(f"unknown backbone {name!r}; known: {', '.join(REGISTRY_ORDER)}")
    return REGISTRY[key]


def default_learning_rate(name: str, regime: Regime | str | None = None, case_id: int | None = None) -> float:
    """Per-run learning rate from the published result tables, else the backbone default."""
    spec = get_spec(name)
    if regime is None or case_id is None:
        return spec.default_lr
    column = _LR_COLUMNS.get((Regime.parse(regime), int(case_id)))
    if column is None:
        return spec.default_lr
    return column[REGISTRY_ORDER.index(spec.name)]


@dataclasses.dataclass
class Prediction:
    probs: np.ndarray  # (N, 2) in [NoCrack, Crack] order
    labels: np.ndarray  # (N,)
    feature_maps: np.ndarray  # (N, h, w, C)
    head_weights: np.ndarray  # (C, 2) in [NoCrack, Crack] order
    head_bias: np.ndarray  # (2,)


def labels_from_probs(probs: np.ndarray) -> np.ndarray:
    """Argmax over [NoCrack, Crack]; ties go to Crack."""
    probs = np.asarray(probs)
    return (probs[..., CRACK] >= probs[..., 1 - CRACK]).astype(np.int64)


def _backbone(spec: BackboneSpec, weights: str | None, input_size: int) -> keras.Model:
    kwargs: dict[str, Any] = dict(include_top=False, weights=weights, input_shape=(input_size, input_size, 3))
    if spec.name.startswith("MobileNetV3"):
        kwargs["include_preprocessing"] = False
    try:
        return spec.constructor(**kwargs)
    except Exception as exc:
        if weights is None:
            raise
        raise WeightsUnavailableError(
            f"pretrained ImageNet weights for {spec.name} could not be loaded ({exc}); "
            f"place them in ~/.keras/models or point {WEIGHTS_DIR_ENV} at a directory "
            f"holding {spec.name}_notop.h5"
        ) from exc


def _pretrained_source(spec: BackboneSpec) -> str:
    local = os.environ.get(WEIGHTS_DIR_ENV)
    if local:
        for candidate in (f"{spec.name}_notop.h5", f"{spec.name}.h5", f"{spec.name}_notop.weights.h5"):
            path = Path(local) / candidate
            if path.is_file():
                return str(path)
    return "imagenet"


class ClassifierModel:
    """A backbone with a GAP + dense(2, softmax) head."""

    def __init__(
        self,
        spec: BackboneSpec,
        regime: Regime,
        net: keras.Model,
        probe: keras.Model,
        backbone: keras.Model,
        *,
        seed: int = 0,
        input_size: int = 224,
        pretrained: bool = False,
        class_order: tuple[str, str] = CLASS_NAMES,
        preprocess_constants: dict | None = None,
        training_config_digest: str | None = None,
    ):
        self.spec = spec
        self.regime = regime
        self.net = net
        self.probe = probe
        self.backbone = backbone
        self.seed = seed
        self.input_size = input_size
        self.pretrained = pretrained
        self.class_order = tuple(class_order)
        self.preprocess_constants = preprocess_constants or default_constants(spec.preprocess)
        self.training_config_digest = training_config_digest
        if sorted(self.class_order) != sorted(CLASS_NAMES):
            raise ArtifactError(f"class_order must be a permutation of {CLASS_NAMES}, got {self.class_order}")
        # column of the network output holding each canonical class
        self._canon = np.array([self.class_order.index(c) for c in CLASS_NAMES])

    @property
    def preprocess_mode(self) -> PreprocessMode:
        return self.spec.preprocess

    @property
    def head(self) -> keras.layers.Dense:
        return self.net.get_layer("head_dense")

    @property
    def feature_width(self) -> int:
        return int(self.backbone.output.shape[-1])

    def head_params(self) -> tuple[np.ndarray, np.ndarray]:
        kernel, bias = (np.asarray(w) for w in self.head.get_weights())
        return kernel[:, self._canon], bias[self._canon]

    def preprocess(self, images: np.ndarray) -> np.ndarray:
        return preprocess(images, self.preprocess_mode, self.preprocess_constants)

    def predict(self, patches: np.ndarray, mode: PreprocessMode | str | None = None, batch_size: int = 32) -> Prediction:
        """Classify patches.

        With ``mode=None`` the input is raw RGB in [0, 255] and is preprocessed
        here. Otherwise the input must already be preprocessed with ``mode``,
        which has to equal the model's recorded mode.
        """
        x = np.asarray(patches)
        if x.ndim == 3:
            x = x[None]
        if mode is None:
            x = self.preprocess(x)
        elif PreprocessMode(mode) is not self.preprocess_mode:
            raise PreprocessMismatchError(
                f"{self.spec.name} expects {self.preprocess_mode.value} input, got {PreprocessMode(mode).value}"
            )
        feats, probs = [], []
        for i in range(0, len(x), batch_size):
            f, p = self.probe(x[i : i + batch_size], training=False)
            feats.append(np.asarray(f))
            probs.append(np.asarray(p))
        probs_arr = np.concatenate(probs)[:, self._canon].astype(np.float64)
        kernel, bias = self.head_params()
        return Prediction(probs_arr, labels_from_probs(probs_arr), np.concatenate(feats), kernel, bias)

    def trainable_param_count(self) -> int:
        return int(sum(np.prod(w.shape) for w in self.net.trainable_weights))

    def head_param_count(self) -> int:
        return self.feature_width * 2 + 2

    def backbone_checksum(self) -> str:
        h = hashlib.sha256()
        for w in self.backbone.weights:
            h.update(np.ascontiguousarray(np.asarray(w)).tobytes())
        return h.hexdigest()

    def metadata(self) -> dict:
        return {
            "backbone": self.spec.name,
            "preprocess_mode": self.preprocess_mode.value,
            "preprocess_constants": self.preprocess_constants,
            "regime": self.regime.value,
            "class_order": list(self.class_order),
            "seed": self.seed,
            "training_config_digest": self.training_config_digest,
            "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "input_size": self.input_size,
            "pretrained": self.pretrained,
            "head": {"pooling": "global_average", "units": 2, "activation": "softmax", "bias": True},
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        self.net.save_weights(path / WEIGHTS_FILE)
        meta = self.metadata()
        meta["weights_file"] = WEIGHTS_FILE
        meta["weights_sha256"] = _file_digest(path / WEIGHTS_FILE)
        (path / METADATA_FILE).write_text(json.dumps(meta, indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ClassifierModel":
        return load(path)


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build(
    spec: BackboneSpec | str,
    regime: Regime | str = Regime.SCRATCH,
    pretrained: bool = False,
    *,
    seed: int = 0,
    input_size: int = 224,
) -> ClassifierModel:
    """Assemble backbone + head.

    TRANSFER freezes every backbone layer (batch-norm statistics included);
    SCRATCH leaves everything trainable. ``pretrained`` loads ImageNet weights
    into the backbone for either regime.
    """
    spec = get_spec(spec)
    regime = Regime.parse(regime)
    keras.utils.set_random_seed(seed)
    backbone = _backbone(spec, _pretrained_source(spec) if pretrained else None, input_size)

    inputs = keras.Input((input_size, input_size, 3), name="patch")
    if regime is Regime.TRANSFER:
        backbone.trainable = False
        feats = backbone(inputs, training=False)
    else:
        backbone.trainable = True
        feats = backbone(inputs)
    pooled = keras.layers.GlobalAveragePooling2D(name="head_gap")(feats)
    init = keras.initializers.VarianceScaling(1.0, mode="fan_in", distribution="uniform", seed=seed)
    probs = keras.layers.Dense(2, activation="softmax", kernel_initializer=init, name="head_dense")(pooled)
    net = keras.Model(inputs, probs, name=f"{spec.name}_crack")
    probe = keras.Model(inputs, [feats, probs], name=f"{spec.name}_probe")
    return ClassifierModel(
        spec, regime, net, probe, backbone, seed=seed, input_size=input_size, pretrained=pretrained
    )


def load(path: str | Path) -> ClassifierModel:
    """Rebuild a model from an artifact directory written by :meth:`ClassifierModel.save`."""
    path = Path(path)
    meta_path = path / METADATA_FILE
    if not meta_path.is_file():
        raise ArtifactError(f"{path}: missing {METADATA_FILE}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{meta_path}: {exc}") from exc
    weights = path / meta.get("weights_file", WEIGHTS_FILE)
    if not weights.is_file():
        raise ArtifactError(f"{path}: missing weights file {weights.name}")
    digest = meta.get("weights_sha256")
    if digest and _file_digest(weights) != digest:
        raise ArtifactError(f"{path}: weights do not match the digest recorded in {METADATA_FILE}")
    try:
        spec = get_spec(meta["backbone"])
        if PreprocessMode(meta["preprocess_mode"]) is not spec.preprocess:
            raise ArtifactError(f"{path}: recorded preprocess mode {meta['preprocess_mode']} does not match {spec.name}")
        model = build(spec, meta["regime"], pretrained=False, seed=int(meta.get("seed", 0)),
                      input_size=int(meta.get("input_size", 224)))
    except (KeyError, ValueError, RegistryError) as exc:
        raise ArtifactError(f"{path}: malformed metadata ({exc})") from exc
    try:
        model.net.load_weights(weights)
    except Exception as exc:
        raise ArtifactError(f"{path}: weights do not fit a {spec.name} classifier ({exc})") from exc
    model.pretrained = bool(meta.get("pretrained", False))
    model.class_order = tuple(meta.get("class_order", CLASS_NAMES))
    if sorted(model.class_order) != sorted(CLASS_NAMES):
        raise ArtifactError(f"{path}: bad class_order {model.class_order}")
    model._canon = np.array([model.class_order.index(c) for c in CLASS_NAMES])
    model.preprocess_constants = meta.get("preprocess_constants") or default_constants(spec.preprocess)
    model.training_config_digest = meta.get("training_config_digest")
    return model
