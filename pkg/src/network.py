import struct
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from logs.logger import logger
from src.exceptions import InvalidConfigError, MalformedFileError, ShapeMismatchError
from src.models import ClassifierInput, ModelConfig
from src.numgraph import ComputeGraph, as_matrix


CHECKPOINT_MAGIC = b"GCDM"
CHECKPOINT_VERSION = 1

# feature_dim, hidden_dim, projection_dim, num_prototypes, backbone_layers, projector_layers,
# projector_bias, classifier_input, seed
_CONFIG_LAYOUT = struct.Struct("<6QBBq")

PROTOTYPES = "prototypes"

Leaves = Dict[str, int]


def _layer_dims(first: int, hidden: int, last: int, layers: int) -> List[tuple]:
    dims = [first] + [hidden] * (layers - 1) + [last]
    return list(zip(dims[:-1], dims[1:]))


def parameter_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """
    Shapes of every weight matrix, in declaration order.

    Backbone: D -> d_h -> ... -> d_h. Projector: d_h -> d_h -> ... -> d_z.
    Weights are stored (in, out) so a layer is `x @ W + b`.
    """
    shapes: Dict[str, tuple] = {}
    for i, (fan_in, fan_out) in enumerate(_layer_dims(cfg.feature_dim, cfg.hidden_dim,
                                                      cfg.hidden_dim, cfg.backbone_layers)):
        shapes[f"backbone.{i}.weight"] = (fan_in, fan_out)
        shapes[f"backbone.{i}.bias"] = (1, fan_out)
    for i, (fan_in, fan_out) in enumerate(_layer_dims(cfg.hidden_dim, cfg.hidden_dim,
                                                      cfg.projection_dim, cfg.projector_layers)):
        shapes[f"projector.{i}.weight"] = (fan_in, fan_out)
        if cfg.projector_bias:
            shapes[f"projector.{i}.bias"] = (1, fan_out)
    shapes[PROTOTYPES] = (cfg.num_prototypes, cfg.prototype_dim)
    return shapes


class GcdModel:
    """
    Backbone f, projector g and prototype classifier C.

    The parameters live in `params`, an ordered name -> matrix map whose keys
    double as leaf names in a ComputeGraph. Prototypes are stored as
    trained and normalised at every use.
    """

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray]) -> None:
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise InvalidConfigError(f"parameter names {list(params)} do not match {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeMismatchError(-1, str(shape), params[name].shape, name)
        self.config = config
        self.params = {name: as_matrix(value).copy() for name, value in params.items()}

    @classmethod
    def init(cls, cfg: ModelConfig) -> "GcdModel":
        """
        He-scaled Gaussian weights, biases uniform in +-1/sqrt(fan_in) and
        unit-norm Gaussian prototypes. A row whose hidden units are all
        inactive still maps to the non-zero output bias.

        Args:
            cfg: Architecture and init seed.

        Returns:
            A freshly initialised model.
        """
        rng = np.random.default_rng(cfg.seed)
        shapes = parameter_shapes(cfg)
        params: Dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            if name == PROTOTYPES:
                protos = rng.standard_normal(shape)
                params[name] = protos / np.linalg.norm(protos, axis=1, keepdims=True)
            elif name.endswith(".weight"):
                params[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
            else:
                bound = 1.0 / np.sqrt(shapes[name.replace(".bias", ".weight")][0])
                params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(cfg, params)

    @property
    def num_prototypes(self) -> int:
        return self.config.num_prototypes

    def copy(self) -> "GcdModel":
        return GcdModel(self.config, self.params)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GcdModel):
            return NotImplemented
        return (self.config == other.config
                and all(self.params[k].tobytes() == other.params[k].tobytes() for k in self.params))

    __hash__ = None

    # ------------------------------------------------------------ graph parts

    def register(self, graph: ComputeGraph) -> Leaves:
        """
        Declares every parameter as a leaf of `graph`.

        Args:
            graph: Graph the forward pass will be built on.

        Returns:
            Parameter name -> leaf node id.
        """
        return {name: graph.parameter(name) for name in self.params}

    def _mlp(self, graph: ComputeGraph, leaves: Leaves, x: int, prefix: str, layers: int) -> int:
        out = x
        for i in range(layers):
            out = graph.matmul(out, leaves[f"{prefix}.{i}.weight"])
            bias = leaves.get(f"{prefix}.{i}.bias")
            if bias is not None:
                out = graph.add(out, bias)
            if i < layers - 1:
                out = graph.relu(out)
        return out

    def backbone_forward(self, graph: ComputeGraph, leaves: Leaves, x: int) -> int:
        """h = f(x); relu between layers, linear output."""
        return self._mlp(graph, leaves, x, "backbone", self.config.backbone_layers)

    def projector_forward(self, graph: ComputeGraph, leaves: Leaves, h: int) -> int:
        """z = g(h), row-l2-normalised."""
        out = self._mlp(graph, leaves, h, "projector", self.config.projector_layers)
        return graph.row_l2_normalize(out)

    def classifier_features(self, graph: ComputeGraph, h: int, z: int) -> int:
        if self.config.classifier_input is ClassifierInput.POST_PROJECTOR:
            return z
        return h

    # --------------------------------------------------------------- numpy API

    def _run(self, x: np.ndarray, stage: str, tau: float = 1.0) -> np.ndarray:
        x = as_matrix(x)
        if x.shape[1] != self.config.feature_dim:
            raise ShapeMismatchError(-1, f"(*, {self.config.feature_dim})", x.shape, "model input")
        graph = ComputeGraph()
        leaves = self.register(graph)
        out = self.backbone_forward(graph, leaves, graph.constant(x))
        needs_projector = (stage == "projector"
                           or (stage != "backbone"
                               and self.config.classifier_input is ClassifierInput.POST_PROJECTOR))
        if needs_projector:
            out = self.projector_forward(graph, leaves, out)
        if stage == "probs":
            out = soft_assign(graph, out, leaves[PROTOTYPES], tau)
        elif stage == "teacher":
            out = teacher_probs(graph, out, leaves[PROTOTYPES], tau)
        elif stage == "cosine":
            out = cosine_similarity(graph, out, leaves[PROTOTYPES])
        return graph.forward(self.params, output=out)

    def embed(self, x: np.ndarray) -> np.ndarray:
        """Backbone features h = f(x), one row per input row."""
        return self._run(x, "backbone")

    def project(self, x: np.ndarray) -> np.ndarray:
        """Unit-norm projections z = g(f(x))."""
        return self._run(x, "projector")

    def features(self, x: np.ndarray) -> np.ndarray:
        """Classifier-input features (h or z, per `classifier_input`)."""
        return self._run(x, "classifier")

    def cosine_logits(self, x: np.ndarray) -> np.ndarray:
        """
        Cosine similarity of each classifier-input row to each prototype.

        Args:
            x: N x D inputs.

        Returns:
            N x K matrix in [-1, 1].
        """
        return self._run(x, "cosine")

    def predict_proba(self, x: np.ndarray, tau: float) -> np.ndarray:
        """
        Student probabilities p: row softmax of the cosine logits over `tau`.

        Args:
            x: N x D inputs.
            tau: Softmax temperature (tau_s during training).

        Returns:
            Row-stochastic N x K matrix.
        """
        return self._run(x, "probs", tau)

    def teacher_assign(self, x: np.ndarray, tau_t: float) -> np.ndarray:
        """Teacher probabilities q: `predict_proba` at `tau_t`, taken as a constant target."""
        return self._run(x, "teacher", tau_t)

    def predict(self, x: np.ndarray, tau: float = 0.1) -> np.ndarray:
        """Prototype search: argmax of the cosine softmax."""
        return np.argmax(self.predict_proba(x, tau), axis=1)


def init_model(cfg: ModelConfig) -> GcdModel:
    """Seeded initial model; see `GcdModel.init`."""
    return GcdModel.init(cfg)


def cosine_similarity(graph: ComputeGraph, features: int, prototypes: int) -> int:
    """
    cos(f_i, c_k) for every feature row and prototype.

    Args:
        graph: Graph to extend.
        features: N x d node.
        prototypes: K x d node, normalised here.

    Returns:
        N x K node.

    Raises:
        ZeroNormError: At forward time, if a row of either input is all zero.
    """
    return graph.matmul(graph.row_l2_normalize(features), graph.row_l2_normalize(prototypes),
                        transpose_b=True)


def soft_assign(graph: ComputeGraph, features: int, prototypes: int, tau: float) -> int:
    """Row softmax over cos(h_i, c_k) / tau."""
    return graph.row_softmax(cosine_similarity(graph, features, prototypes), tau)


def teacher_probs(graph: ComputeGraph, features: int, prototypes: int, tau_t: float) -> int:
    """soft_assign behind a stop-gradient; nothing upstream receives gradient through it."""
    return graph.stop_gradient(soft_assign(graph, features, prototypes, tau_t))


# ---------------------------------------------------------------------------
# checkpoint


def save_checkpoint(model: GcdModel, path: Union[str, Path]) -> Path:
    """Writes the GCDM layout: magic, version, config fields, then every matrix (f64 LE)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(_CONFIG_LAYOUT.pack(cfg.feature_dim, cfg.hidden_dim, cfg.projection_dim,
                                    cfg.num_prototypes, cfg.backbone_layers, cfg.projector_layers,
                                    int(cfg.projector_bias),
                                    int(cfg.classifier_input is ClassifierInput.POST_PROJECTOR),
                                    cfg.seed))
        for name, value in model.params.items():
            f.write(struct.pack("<2Q", *value.shape))
            f.write(value.astype("<f8").tobytes())
    logger.info(f"Checkpoint saved to '{path}'")
    return path


def load_checkpoint(path: Union[str, Path]) -> GcdModel:
    """
    Reads a GCDM checkpoint.

    Raises:
        MalformedFileError: Bad magic, unknown version, shape mismatch,
            truncation or trailing bytes.
    """
    path = Path(path)
    buffer = path.read_bytes()
    offset = 0

    def take(size: int, what: str) -> bytes:
        nonlocal offset
        if offset + size > len(buffer):
            raise MalformedFileError(f"truncated checkpoint while reading {what}", offset)
        chunk = buffer[offset:offset + size]
        offset += size
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise MalformedFileError(f"bad magic, expected {CHECKPOINT_MAGIC!r}", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise MalformedFileError(f"unsupported checkpoint version {version}", 4)
    fields = _CONFIG_LAYOUT.unpack(take(_CONFIG_LAYOUT.size, "config"))
    try:
        cfg = ModelConfig(feature_dim=fields[0], hidden_dim=fields[1], projection_dim=fields[2],
                          num_prototypes=fields[3], backbone_layers=fields[4],
                          projector_layers=fields[5], projector_bias=bool(fields[6]),
                          classifier_input=(ClassifierInput.POST_PROJECTOR if fields[7]
                                            else ClassifierInput.POST_BACKBONE),
                          seed=fields[8])
    except ValueError as e:
        raise MalformedFileError(f"invalid model config in checkpoint: {e}", 8) from e

    params: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg).items():
        start = offset
        stored = struct.unpack("<2Q", take(16, f"{name} shape"))
        if stored != shape:
            raise MalformedFileError(f"{name} has shape {stored}, expected {shape}", start)
        count = shape[0] * shape[1]
        params[name] = np.frombuffer(take(count * 8, name), dtype="<f8").reshape(shape).astype(np.float64)
    if offset != len(buffer):
        raise MalformedFileError(f"{len(buffer) - offset} trailing bytes", offset)
    return GcdModel(cfg, params)
