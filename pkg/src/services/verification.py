"""Fast self-check battery: gradient checks, loss identities, AUC oracle, plumbing."""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from src.config import ABLATION_LAMBDAS, EncoderSpec, TrainConfig
from src.numerics.gradcheck import finite_diff_check
from src.numerics.rng import Rng
from src.numerics.tape import Tape
from src.numerics.tensor import NumericsError, unit_rows
from src.services import losses
from src.services.checkpoint import Checkpoint, from_bytes, to_bytes
from src.services.encoders import EncoderParams, forward, init_params
from src.services.evaluation import auc_roc
from src.services.training import OptState, lr_at, sgd_step

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-5
IDENTITY_TOLERANCE = 1e-12
CHECK_SPEC = EncoderSpec(name="check-mlp", input_dim=4, hidden=(8,), output_dim=3)
KINK_MARGIN = 1e-3
MAX_REDRAWS = 50


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class VerificationReport:
    results: List[CheckResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    @property
    def failed(self) -> List[CheckResult]:
        return [result for result in self.results if not result.passed]


@dataclass
class _Case:
    x: np.ndarray
    v: np.ndarray
    u_t: np.ndarray
    class_ids: np.ndarray
    logits_t: np.ndarray
    params: list


def _well_posed(params: EncoderParams, x: np.ndarray, u_t: np.ndarray) -> bool:
    """No ReLU input, output norm or norm tie within KINK_MARGIN of a kink."""
    h = x
    for layer, (weight, bias) in enumerate(zip(params.weights, params.biases)):
        h = h @ weight + bias
        if layer < len(params.weights) - 1:
            if np.min(np.abs(h)) <= KINK_MARGIN:
                return False
            h = np.maximum(h, 0.0)
    norms = np.linalg.norm(h, axis=1)
    gaps = np.abs(norms - np.linalg.norm(u_t, axis=1))
    return bool(norms.min() > KINK_MARGIN and gaps.min() > KINK_MARGIN)


def _case(seed: int, name: str, index: int, n: int = 5) -> _Case:
    rng = Rng(seed).spawn(f"verify/{name}/{index}")
    for attempt in range(MAX_REDRAWS):
        draw = rng.spawn(f"draw/{attempt}")
        params = init_params(CHECK_SPEC, draw.spawn("init"))
        params.biases = [draw.normal(bias.shape, scale=0.5) for bias in params.biases]
        x = draw.normal((n, CHECK_SPEC.input_dim))
        u_t = draw.normal((n, CHECK_SPEC.output_dim))
        if _well_posed(params, x, u_t):
            return _Case(
                x=x,
                v=unit_rows(draw.normal((n, CHECK_SPEC.output_dim))),
                u_t=u_t,
                class_ids=np.arange(n) % 2,
                logits_t=draw.normal((n, CHECK_SPEC.output_dim)),
                params=params.tensors(),
            )
    raise NumericsError(f"no well-posed case for {name}/{index} after {MAX_REDRAWS} draws")


_PARAMS = losses.LossParams(tau=0.5, alpha=0.3, lambda_=0.7)

# scalar loss of the check encoder's output u_s for each objective
GRADIENT_TARGETS: Dict[str, Callable] = {
    "vlcp_loss": lambda c, u_s: losses.vlcp_loss(losses.BatchFeatures(v=c.v, u_s=u_s), _PARAMS),
    "feature_distill_loss": lambda c, u_s: losses.feature_distill_loss(
        losses.BatchFeatures(v=c.v, u_s=u_s, u_t=c.u_t)),
    "kl_logit_loss": lambda c, u_s: losses.kl_logit_loss(losses.LogitPair(p_t=c.logits_t, p_s=u_s)),
    "norm_distill_class": lambda c, u_s: losses.norm_distill_class(
        losses.BatchFeatures(v=c.v, u_s=u_s, u_t=c.u_t, class_ids=c.class_ids),
        losses.build_class_anchors(c.u_t, c.class_ids)),
    "norm_distill_text": lambda c, u_s: losses.norm_distill_text(losses.BatchFeatures(v=c.v, u_s=u_s, u_t=c.u_t)),
    "vlcd_total": lambda c, u_s: losses.vlcd_total(losses.BatchFeatures(v=c.v, u_s=u_s, u_t=c.u_t), _PARAMS),
}


def gradient_check(name: str, cases: int, seed: int = 0) -> CheckResult:
    """Encoder-parameter gradients of one objective against central differences."""
    target = GRADIENT_TARGETS[name]
    worst = 0.0
    for index in range(cases):
        case = _case(seed, name, index)

        def f(tape: Tape, leaves):
            u_s = forward(leaves, tape.constant(case.x), CHECK_SPEC)
            return target(case, u_s).total

        try:
            report = finite_diff_check(f, case.params)
        except NumericsError as e:
            return CheckResult(f"gradient:{name}", False, f"case {index}: {e.message}")
        worst = max(worst, report.max_discrepancy)
    return CheckResult(f"gradient:{name}", worst <= GRAD_TOLERANCE, f"max discrepancy {worst:.2e} over {cases} cases")


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= IDENTITY_TOLERANCE


def loss_identities(seed: int = 0) -> List[CheckResult]:
    rng = Rng(seed).spawn("verify/identities")
    results = []

    single = losses.contrastive_directional(rng.normal((1, 3)), rng.normal((1, 3)), 0.1, "t2x").item()
    results.append(CheckResult("identity:single-pair-zero", single == 0.0, f"loss {single!r}"))

    u, v = rng.normal((6, 3)), rng.normal((6, 3))
    half = losses.LossParams(tau=0.1, alpha=0.5, lambda_=0.1)
    forward_value = losses.vlcp_loss(losses.BatchFeatures(v=v, u_s=u), half).value
    swapped = losses.vlcp_loss(losses.BatchFeatures(v=u, u_s=v), half).value
    results.append(CheckResult("identity:alpha-half-symmetry", _close(forward_value, swapped),
                               f"{forward_value!r} vs {swapped!r}"))

    p_t = rng.normal((6, 4))
    kl_random = losses.kl_logit_loss(losses.LogitPair(p_t=p_t, p_s=rng.normal((6, 4)))).value
    kl_shifted = losses.kl_logit_loss(losses.LogitPair(p_t=p_t, p_s=p_t + 3.0)).value
    results.append(CheckResult("identity:kl-nonnegative", kl_random >= 0.0 and abs(kl_shifted) <= IDENTITY_TOLERANCE,
                               f"random {kl_random:.3e}, shifted {kl_shifted:.3e}"))

    u_s, u_t, v = rng.normal((6, 3)), rng.normal((6, 3)), unit_rows(rng.normal((6, 3)))
    batch = losses.BatchFeatures(v=v, u_s=u_s, u_t=u_t, class_ids=np.arange(6))
    singleton = losses.ClassAnchors(
        classes=list(range(6)),
        anchors=v,
        index_sets={k: np.array([k]) for k in range(6)},
        means=v,
    )
    nd_class = losses.norm_distill_class(batch, singleton).value
    nd_text = losses.norm_distill_text(batch).value
    results.append(CheckResult("identity:text-equals-singleton-class", _close(nd_class, nd_text),
                               f"{nd_class!r} vs {nd_text!r}"))

    denominator = np.maximum(np.linalg.norm(u_s, axis=1), np.linalg.norm(u_t, axis=1))
    inner = np.sum(u_s * v, axis=1) / denominator
    results.append(CheckResult("identity:norm-terms-bounded", bool(np.all(np.abs(inner) <= 1.0)),
                               f"range [{inner.min():.3f}, {inner.max():.3f}]"))

    worst = 0.0
    for lam in ABLATION_LAMBDAS:
        out = losses.vlcd_total(batch, losses.LossParams(lambda_=lam))
        worst = max(worst, abs(out.value - (out.breakdown["l_t"] + lam * out.breakdown["l_gnd"])))
    results.append(CheckResult("identity:vlcd-breakdown", worst <= IDENTITY_TOLERANCE, f"max gap {worst:.2e}"))
    return results


def _brute_force_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos, neg = scores[labels == 1], scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (pos.size * neg.size))


def auc_oracle(instances: int, seed: int = 0) -> List[CheckResult]:
    rng = Rng(seed).spawn("verify/auc")
    worst = 0.0
    invariant = True
    for _ in range(instances):
        n = int(rng.integers(4, 40, 1)[0])
        labels = np.zeros(n, dtype=np.int64)
        labels[rng.permutation(n)[: max(1, n // 3)]] = 1
        # coarse rounding creates ties
        scores = np.round(rng.normal(n), 1)
        value = auc_roc(scores, labels)
        worst = max(worst, abs(value - _brute_force_auc(scores, labels)))
        invariant &= auc_roc(3.0 * scores + 1.0, labels) == value and auc_roc(scores ** 3, labels) == value
    return [
        CheckResult("auc:brute-force-oracle", worst <= IDENTITY_TOLERANCE, f"max gap {worst:.2e}"),
        CheckResult("auc:monotone-invariance", bool(invariant)),
    ]


def schedule_checks() -> List[CheckResult]:
    cfg = TrainConfig(max_epochs=10, warmup_epochs=2, initial_lr=0.1, final_lr=0.0)
    steps = 4
    end_warmup = lr_at(cfg, 2 * steps, steps)
    last = lr_at(cfg, 10 * steps - 1, steps)
    state = OptState.zeros_like([np.ones((1, 1))])
    w = sgd_step([np.ones((1, 1))], [np.ones((1, 1))], state, 0.1, 0.9, 0.0)
    w = sgd_step(w, [np.ones((1, 1))], state, 0.1, 0.9, 0.0)
    return [
        CheckResult("schedule:warmup-and-decay", abs(end_warmup - 0.1) <= 1e-15 and abs(last) <= 1e-15,
                    f"end of warmup {end_warmup!r}, last {last!r}"),
        CheckResult("sgd:momentum-recurrence", abs(float(w[0][0, 0]) - 0.71) <= 1e-12, f"w = {float(w[0][0, 0])!r}"),
    ]


def checkpoint_roundtrip(seed: int = 0) -> CheckResult:
    params = init_params(CHECK_SPEC, Rng(seed).spawn("verify/checkpoint"))
    ckpt = Checkpoint(params=params, stage="teacher", seed=seed, epoch=0, config_hash="0" * 64)
    first = to_bytes(ckpt)
    second = to_bytes(from_bytes(first))
    return CheckResult("checkpoint:roundtrip", first == second, f"{len(first)} bytes")


def run_verification(cases: int = 5, auc_instances: int = 1000, seed: int = 0,
                     fault: Optional[str] = None) -> VerificationReport:
    """Run every check; ``fault`` enables a named loss fault for the duration."""
    start = time.perf_counter()
    report = VerificationReport()

    def battery() -> None:
        for name in GRADIENT_TARGETS:
            report.results.append(gradient_check(name, cases, seed))
        report.results.extend(loss_identities(seed))
        report.results.extend(auc_oracle(auc_instances, seed))
        report.results.extend(schedule_checks())
        report.results.append(checkpoint_roundtrip(seed))

    if fault:
        logger.warning(f"Running verification with injected fault '{fault}'")
        with losses.injected_fault(fault):
            battery()
    else:
        battery()

    report.seconds = time.perf_counter() - start
    for result in report.failed:
        logger.error(f"Check failed: {result.name} ({result.detail})")
    logger.info(f"Verification: {len(report.results) - len(report.failed)}/{len(report.results)} checks passed "
                f"in {report.seconds:.1f}s")
    return report
