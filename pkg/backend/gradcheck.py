"""
Central finite-difference checks of every differentiable piece.

Each suite builds small float64 cases: a scalar loss closure plus the
named leaf tensors (inputs and parameters) whose analytic gradients are
compared against (f(x + h) - f(x - h)) / 2h, element by element.
"""

import logging
from abc import ABC, abstractmethod
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from detector import BoxHead, SCALayer, SCFLayer
from geometry import encode_pair_array
from interaction import Readout, RelationWeightHead, intra_frame_message_passing
from layers import LSTM, Conv2d, LayerNorm, Linear, Module
from losses import binary_cross_entropy, cross_entropy, focal_loss
from tensor import (
    Tensor,
    concat,
    exp,
    global_average_pool,
    index,
    log,
    log_softmax_rows,
    matmul,
    no_grad,
    power,
    roi_align_boxes,
    sigmoid,
    softmax_rows,
    tanh,
    tensor_sum,
)
from training import Stage1Targets, stage1_loss, stage2_loss

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-5
SUITE_SEED = 20240
CHANNELS = 6

# (suite, tensor name, analytic gradient) -> gradient actually compared
CorruptHook = Callable[[str, str, np.ndarray], np.ndarray]


@dataclass
class GradientCase:
    name: str
    loss: Callable[[], Tensor]
    leaves: dict[str, Tensor]


@dataclass
class CheckResult:
    suite: str
    case: str
    tensor: str
    error: float
    passed: bool


@dataclass
class GradcheckReport:
    tolerance: float
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    @property
    def failures(self) -> list[CheckResult]:
        return [result for result in self.results if not result.passed]

    def format_table(self) -> str:
        lines = [f"{'suite':<6} {'case':<16} {'tensor':<28} {'rel.err':>10}  status"]
        for r in self.results:
            status = "pass" if r.passed else "FAIL"
            lines.append(f"{r.suite:<6} {r.case:<16} {r.tensor:<28} {r.error:>10.2e}  {status}")
        verdict = "all passed" if self.passed else f"{len(self.failures)} failed"
        lines.append(f"{len(self.results)} tensors checked at tolerance {self.tolerance:g}: {verdict}")
        return "\n".join(lines) + "\n"


def numerical_gradient(f: Callable[[], float], array: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every element of ``array`` (perturbed in place)"""
    grad = np.zeros_like(array)
    for position in np.ndindex(array.shape):
        original = array[position]
        array[position] = original + step
        plus = f()
        array[position] = original - step
        minus = f()
        array[position] = original
        grad[position] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst coordinate of |a - n| / max(1, |a|, |n|); 0 for empty tensors"""
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_case(
    suite: str,
    case: GradientCase,
    tolerance: float = DEFAULT_TOLERANCE,
    step: float = DEFAULT_STEP,
    corrupt: CorruptHook | None = None,
) -> list[CheckResult]:
    for leaf in case.leaves.values():
        leaf.requires_grad = True
        leaf.zero_grad()
    loss = case.loss()
    if loss.data.size != 1:
        msg = f"gradient case '{case.name}' must produce a scalar, got {loss.shape}"
        raise ValueError(msg)
    loss.backward()

    def evaluate() -> float:
        with no_grad():
            return case.loss().item()

    results = []
    for name, leaf in case.leaves.items():
        analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad.copy()
        if corrupt is not None:
            analytic = corrupt(suite, name, analytic)
        error = relative_error(analytic, numerical_gradient(evaluate, leaf.data, step))
        results.append(CheckResult(suite, case.name, name, error, error < tolerance))
    return results


def leaf(rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def projection(output: Tensor, weights: np.ndarray) -> Tensor:
    """Fixed random linear functional, turns any output into a scalar"""
    return tensor_sum(output * weights)


def with_parameters(module: Module, prefix: str, **inputs: Tensor) -> dict[str, Tensor]:
    leaves: dict[str, Tensor] = dict(inputs)
    leaves.update(module.named_parameters(prefix))
    return leaves


def random_boxes(rng: np.random.Generator, count: int, width: float, height: float) -> np.ndarray:
    x1 = rng.uniform(0, width * 0.6, count)
    y1 = rng.uniform(0, height * 0.6, count)
    w = rng.uniform(0.2, 0.4, count) * width
    h = rng.uniform(0.2, 0.4, count) * height
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


class GradientSuite(ABC):
    """A named group of gradient cases"""

    name: str = ""

    @abstractmethod
    def cases(self, rng: np.random.Generator) -> list[GradientCase]:
        """Build the cases from a seeded generator"""

    def run(
        self,
        tolerance: float = DEFAULT_TOLERANCE,
        step: float = DEFAULT_STEP,
        corrupt: CorruptHook | None = None,
    ) -> list[CheckResult]:
        rng = np.random.default_rng([SUITE_SEED, sum(map(ord, self.name))])
        results = []
        for case in self.cases(rng):
            results.extend(check_case(self.name, case, tolerance, step, corrupt))
        return results


class CoreSuite(GradientSuite):
    """Tensor ops and the basic layers"""

    name = "core"

    def cases(self, rng: np.random.Generator) -> list[GradientCase]:
        x, y = leaf(rng, 3, 4), leaf(rng, 3, 4, low=0.5, high=2.0)
        r_elem = rng.normal(size=(3, 4))
        a, w = leaf(rng, 3, 4), leaf(rng, 4, 5)
        r_mm = rng.normal(size=(5, 3))
        logits = leaf(rng, 3, 5)
        r_sm, r_lsm = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        p, q = leaf(rng, 2, 3), leaf(rng, 2, 2)
        picks = (slice(None), np.array([0, 4, 4, 2]))
        r_cat = rng.normal(size=(2, 4))

        norm, norm_in = LayerNorm(5), leaf(rng, 4, 5)
        norm.scale.data = rng.uniform(0.5, 1.5, 5)
        r_norm = rng.normal(size=(4, 5))

        conv, image = Conv2d(2, 3, 3, rng, stride=2, padding=1), leaf(rng, 2, 7, 9)
        conv.bias.data = rng.normal(size=3)
        r_conv = rng.normal(size=(3, 4, 5))

        fmap = leaf(rng, 3, 6, 8)
        boxes = random_boxes(rng, 3, 32.0, 24.0)
        r_roi = rng.normal(size=(3, 3, 3, 3))

        lstm, steps = LSTM(3, 4, rng), [leaf(rng, 1, 3) for _ in range(3)]
        r_lstm = rng.normal(size=(1, 4))

        head, head_map = BoxHead(4, 3, rng), leaf(rng, 4, 5, 6)
        head_boxes = random_boxes(rng, 2, 24.0, 20.0)
        r_head = rng.normal(size=(2, 4))

        fc, fc_in = Linear(4, 3, rng), leaf(rng, 2, 5, 4)
        r_fc = rng.normal(size=(2, 5, 3))

        step_leaves = {f"x{t}": s for t, s in enumerate(steps)}
        return [
            GradientCase(
                "elementwise",
                lambda: projection(
                    exp(x) * sigmoid(y) + tanh(x) / y + log(y) + power(y, 1.5) - x * x, r_elem
                ),
                {"x": x, "y": y},
            ),
            GradientCase("matmul", lambda: projection(matmul(a, w).T, r_mm), {"a": a, "w": w}),
            GradientCase(
                "softmax",
                lambda: projection(softmax_rows(logits), r_sm)
                + projection(log_softmax_rows(logits), r_lsm),
                {"logits": logits},
            ),
            GradientCase(
                "concat_index",
                lambda: projection(index(concat([p, q], axis=1), picks), r_cat),
                {"p": p, "q": q},
            ),
            GradientCase(
                "layer_norm",
                lambda: projection(norm(norm_in), r_norm),
                with_parameters(norm, "norm.", x=norm_in),
            ),
            GradientCase(
                "conv2d",
                lambda: projection(conv(image), r_conv),
                with_parameters(conv, "conv.", image=image),
            ),
            GradientCase(
                "roi_align",
                lambda: projection(roi_align_boxes(fmap, boxes, 3, 4), r_roi),
                {"feature_map": fmap},
            ),
            GradientCase(
                "lstm",
                lambda: projection(lstm(steps), r_lstm),
                with_parameters(lstm, "lstm.", **step_leaves),
            ),
            GradientCase(
                "box_head",
                lambda: projection(head(head_map, head_boxes, 4), r_head),
                with_parameters(head, "box_head.", feature_map=head_map),
            ),
            GradientCase(
                "linear_3d",
                lambda: projection(fc(fc_in), r_fc),
                with_parameters(fc, "fc.", x=fc_in),
            ),
        ]


class SCFSuite(GradientSuite):
    name = "scf"

    def cases(self, rng: np.random.Generator) -> list[GradientCase]:
        layer = SCFLayer(CHANNELS, rng)
        maps = [leaf(rng, CHANNELS, 3, 4) for _ in range(3)]
        features = leaf(rng, 4, CHANNELS)
        weights = rng.normal(size=(4, CHANNELS))
        map_leaves = {f"f_m{t}": m for t, m in enumerate(maps)}
        return [
            GradientCase(
                "scf_layer",
                lambda: projection(layer(maps, features), weights),
                with_parameters(layer, "scf.", f_v=features, **map_leaves),
            )
        ]


class SCASuite(GradientSuite):
    name = "sca"

    def cases(self, rng: np.random.Generator) -> list[GradientCase]:
        cases = []
        for use_spatial in (True, False):
            layer = SCALayer(CHANNELS, 8, rng, use_spatial=use_spatial)
            features, reference = leaf(rng, 4, CHANNELS), leaf(rng, 8, CHANNELS)
            encoding = encode_pair_array(
                random_boxes(rng, 4, 64.0, 48.0), random_boxes(rng, 8, 64.0, 48.0), 64.0, 48.0
            )
            weights = rng.normal(size=(4, CHANNELS))
            cases.append(
                GradientCase(
                    "sca_layer" if use_spatial else "sca_attention",
                    lambda layer=layer, f=features, ref=reference, e=encoding, w=weights: projection(
                        layer(f, ref, e), w
                    ),
                    with_parameters(layer, "sca.", f_v_re=features, f_ref=reference),
                )
            )
        return cases


class TGSuite(GradientSuite):
    """TW head, intra-frame weights and passing, inter-frame LSTM and readout"""

    name = "tg"

    def cases(self, rng: np.random.Generator) -> list[GradientCase]:
        c = CHANNELS
        instrument_boxes = random_boxes(rng, 2, 64.0, 48.0)
        tissue_boxes = random_boxes(rng, 3, 64.0, 48.0)
        encoding = encode_pair_array(instrument_boxes, tissue_boxes, 64.0, 48.0)

        cases = []
        for mode in ("spatial", "concat"):
            tw = RelationWeightHead(c, rng, mode)
            key, candidates = leaf(rng, 1, c), leaf(rng, 3, c)
            tw_encoding = encode_pair_array(instrument_boxes[:1], tissue_boxes, 64.0, 48.0)
            target = np.array([int(rng.integers(3))])
            cases.append(
                GradientCase(
                    f"tw_{mode}",
                    lambda tw=tw, k=key, cand=candidates, e=tw_encoding, t=target: cross_entropy(
                        tw(k, cand, e), t
                    ),
                    with_parameters(tw, "tw.", key=key, candidates=candidates),
                )
            )

        chain_lstm = LSTM(c, c, rng)
        chain = [leaf(rng, 1, c) for _ in range(3)]
        r_chain = rng.normal(size=(1, c))
        chain_leaves = {f"f_o{t}": node for t, node in enumerate(chain)}
        cases.append(
            GradientCase(
                "inter_frame",
                lambda: projection(chain[-1] + chain_lstm(chain), r_chain),
                with_parameters(chain_lstm, "inter_lstm.", **chain_leaves),
            )
        )

        intra = RelationWeightHead(c, rng, "spatial")
        norm_i, norm_t = LayerNorm(c), LayerNorm(c)
        readout = Readout(c, 5, rng)
        f_i, f_t = leaf(rng, 2, c), leaf(rng, 3, c)
        key_map = leaf(rng, c, 3, 4)
        r_probs = rng.normal(size=(2, 3, 5))

        def intra_and_readout() -> Tensor:
            weights = intra(f_i, f_t, encoding)
            g_i, g_t = intra_frame_message_passing(f_i, f_t, weights, norm_i, norm_t)
            return projection(readout(g_i, g_t, encoding, key_map), r_probs)

        leaves = {"f_i": f_i, "f_t": f_t, "key_map": key_map}
        for prefix, module in (
            ("intra.", intra),
            ("norm_i.", norm_i),
            ("norm_t.", norm_t),
            ("readout.", readout),
        ):
            leaves.update(module.named_parameters(prefix))
        cases.append(GradientCase("intra_readout", intra_and_readout, leaves))

        pooled = leaf(rng, c, 2, 2)
        r_gap = rng.normal(size=(1, c))
        cases.append(
            GradientCase(
                "global_pool", lambda: projection(global_average_pool(pooled), r_gap), {"map": pooled}
            )
        )
        return cases


class LossSuite(GradientSuite):
    name = "loss"

    def cases(self, rng: np.random.Generator) -> list[GradientCase]:
        num_classes, count = 4, 5
        logits = leaf(rng, count, num_classes + 1)
        deltas = leaf(rng, count, 4 * num_classes)
        labels = np.array([0, 2, 4, 0, 1])
        targets = Stage1Targets(
            labels=labels,
            deltas=rng.normal(scale=0.3, size=(count, 4)),
            matched=np.where(labels > 0, np.arange(count), -1),
        )

        scores = leaf(rng, 2, 3, 5, low=-2.0, high=2.0)
        bits = (rng.random((2, 3, 5)) < 0.3).astype(float)

        readout = Readout(CHANNELS, 5, rng)
        f_i, f_t = leaf(rng, 2, CHANNELS), leaf(rng, 3, CHANNELS)
        key_map = leaf(rng, CHANNELS, 3, 4)
        encoding = encode_pair_array(
            random_boxes(rng, 2, 64.0, 48.0), random_boxes(rng, 3, 64.0, 48.0), 64.0, 48.0
        )
        readout_leaves = with_parameters(readout, "readout.", f_i=f_i, f_t=f_t)

        return [
            GradientCase(
                "stage1_loss",
                lambda: stage1_loss(logits, deltas, targets),
                {"class_logits": logits, "box_deltas": deltas},
            ),
            GradientCase(
                "focal_loss", lambda: focal_loss(sigmoid(scores), bits), {"scores": scores}
            ),
            GradientCase(
                "focal_gamma0",
                lambda: focal_loss(sigmoid(scores), bits, alpha=0.25, gamma=0.0),
                {"scores": scores},
            ),
            GradientCase(
                "bce", lambda: binary_cross_entropy(sigmoid(scores), bits), {"scores": scores}
            ),
            GradientCase(
                "readout_focal",
                lambda: stage2_loss(readout(f_i, f_t, encoding, key_map), bits),
                readout_leaves,
            ),
        ]


class SuiteManager:
    """Registry of gradient suites, run by name or all together"""

    def __init__(self) -> None:
        self.suites: dict[str, GradientSuite] = {}

    def register_suite(self, suite: GradientSuite) -> None:
        if not suite.name:
            msg = "Gradient suite must have a name"
            raise ValueError(msg)
        self.suites[suite.name] = suite

    def names(self) -> list[str]:
        return list(self.suites)

    def run(
        self,
        name: str = "all",
        tolerance: float = DEFAULT_TOLERANCE,
        step: float = DEFAULT_STEP,
        corrupt: CorruptHook | None = None,
    ) -> GradcheckReport:
        if name != "all" and name not in self.suites:
            msg = f"unknown gradient suite '{name}'; choose from all, {', '.join(self.suites)}"
            raise ValueError(msg)
        selected = self.names() if name == "all" else [name]
        report = GradcheckReport(tolerance)
        for suite_name in selected:
            results = self.suites[suite_name].run(tolerance, step, corrupt)
            worst = max((r.error for r in results), default=0.0)
            logger.info("Gradient suite %s: %d tensors, worst error %.2e", suite_name, len(results), worst)
            report.results.extend(results)
        return report


def default_manager() -> SuiteManager:
    manager = SuiteManager()
    for suite in (CoreSuite(), SCFSuite(), SCASuite(), TGSuite(), LossSuite()):
        manager.register_suite(suite)
    return manager
