"""Self-contained verification suite behind the ``check`` subcommand.

Each check pits an implementation against an independent route: a naive
re-derivation, a Monte-Carlo estimate, central finite differences, or a
brute-force O(n^2) computation. Tolerances are part of the contract and are
not loosened here; the acceptance tests call these functions directly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .metrics import boundary_distances, dice, jaccard, surface_points
from .network import backward, forward_batch, init_params
from .numerics import Rng, SymMat
from .stats_bank import StatsBank, batch_class_stats
from .trainer import supervised_loss
from .tsa_loss import (
    ClassifierHead,
    augmented_logits,
    mc_bound_tightness,
    mc_explicit_loss,
    softmax_cross_entropy,
    tsa_loss,
)

__all__ = [
    "CheckResult",
    "random_instance",
    "make_bank",
    "naive_mean_ce",
    "fd_gradient",
    "rel_err",
    "brute_force_boundary",
    "random_mask",
    "check_ce_collapse",
    "check_jensen_bound",
    "check_mgf_tightness",
    "check_tsa_gradients",
    "check_supervised_gradients",
    "check_network_gradients",
    "check_stats_convergence",
    "check_pooling_identity",
    "check_metric_oracles",
    "run_all",
]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name} ({self.seconds:.2f}s): {self.detail}"


def _timed(name, fn):
    t0 = time.perf_counter()
    passed, detail = fn()
    return CheckResult(name, passed, detail, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# shared generators and oracles
# ---------------------------------------------------------------------------


def random_instance(rng: Rng, d_max: int = 8, c_max: int = 5):
    """One random head + pixel + shift-statistics instance.

    Weight rows scale like 1/sqrt(d) and the covariance like 1/(2d) so the
    exponent (w_c - w_y)' Sigma (w_c - w_y) stays O(1): the Monte-Carlo
    routes then converge at the usual sqrt(M) rate instead of being at the
    mercy of lognormal tails, while every term still matters.
    """
    d = int(rng.integers(1, d_max + 1))
    c = int(rng.integers(2, c_max + 1))
    head = ClassifierHead(
        rng.standard_normal(c * d).reshape(c, d) / np.sqrt(d),
        0.5 * rng.standard_normal(c),
    )
    f = rng.standard_normal(d)
    y = int(rng.integers(0, c))
    dmu = 0.5 * rng.standard_normal(d)
    a = rng.standard_normal(d * d).reshape(d, d)
    cov = SymMat.from_dense(a @ a.T / (2.0 * d))
    return head, f, y, dmu, cov


def make_bank(rng: Rng, d: int, c: int, momentum: float = 0.99) -> StatsBank:
    """Bank with random installed statistics on both sides of every class."""
    bank = StatsBank(d, c, momentum)
    for slots in (bank.source, bank.target):
        for s in slots:
            s.mean = rng.standard_normal(d)
            a = rng.standard_normal(d * d).reshape(d, d)
            s.cov = SymMat.from_dense(a @ a.T / d)
            s.weight = 0.5 + 0.5 * rng.random()
    return bank


def naive_mean_ce(features: np.ndarray, labels: np.ndarray, head: ClassifierHead) -> float:
    """Independent plain-CE route: per-pixel logaddexp reduction."""
    total = 0.0
    for f, y in zip(features, labels):
        z = head.weights @ f + head.biases
        total += np.logaddexp.reduce(z) - z[y]
    return total / len(labels)


def rel_err(a: float, b: float) -> float:
    m = max(abs(a), abs(b))
    if m < 1e-12:
        return 0.0
    return abs(a - b) / max(m, 1e-10)


def fd_gradient(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function over every entry of x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def _max_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    return max(
        (rel_err(float(a), float(b)) for a, b in zip(analytic.reshape(-1), fd.reshape(-1))),
        default=0.0,
    )


def random_mask(rng: Rng, h: int, w: int) -> np.ndarray:
    """0-3 random rectangles/ellipses unioned; sometimes empty on purpose."""
    m = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(0, 4))):
        cy, cx = rng.random() * h, rng.random() * w
        ry = 1.0 + rng.random() * h / 4
        rx = 1.0 + rng.random() * w / 4
        rr, cc = np.ogrid[:h, :w]
        if rng.random() < 0.5:
            m |= ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0
        else:
            m |= (np.abs(rr - cy) <= ry) & (np.abs(cc - cx) <= rx)
    return m


def _percentile_linear(sorted_vals: np.ndarray, q: float) -> float:
    """Order-statistic interpolation, written out by hand for independence."""
    n = sorted_vals.size
    if n == 1:
        return float(sorted_vals[0])
    pos = (q / 100.0) * (n - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return float(sorted_vals[lo] + frac * (sorted_vals[hi] - sorted_vals[lo]))


def brute_force_boundary(a: np.ndarray, b: np.ndarray) -> tuple[float, float, bool]:
    """O(n^2) reference for hd95/asd with the same degenerate conventions."""
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0, 0.0, False
    if ea or eb:
        h, w = a.shape
        s = float(np.sqrt(h * h + w * w))
        return s, s, True
    sa = surface_points(a).astype(np.float64)
    sb = surface_points(b).astype(np.float64)
    dm = np.sqrt(((sa[:, None, :] - sb[None, :, :]) ** 2).sum(axis=2))
    pooled = np.sort(np.concatenate([dm.min(axis=1), dm.min(axis=0)]))
    return _percentile_linear(pooled, 95.0), float(pooled.mean()), False


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------


def check_ce_collapse(seed: int = 101, n_instances: int = 1000) -> CheckResult:
    """alpha = 0 must equal the plain mean CE to 1e-12 (criterion: collapse)."""

    def run():
        rng = Rng(seed)
        worst = 0.0
        for _ in range(n_instances):
            head, _, _, _, _ = random_instance(rng)
            d, c = head.dim, head.n_classes
            n = int(rng.integers(1, 9))
            feats = rng.standard_normal(n * d).reshape(n, d)
            labels = rng.integers(0, c, size=n)
            bank = make_bank(rng, d, c)
            rep = tsa_loss(feats, labels, head, bank, alpha=0.0)
            worst = max(worst, abs(rep.value - naive_mean_ce(feats, labels, head)))
        return worst <= 1e-12, f"max |closed-form - naive CE| = {worst:.2e} (tol 1e-12)"

    return _timed("ce_collapse_alpha0", run)


def check_jensen_bound(
    seed: int = 202,
    n_instances: int = 50,
    n_samples: int = 100000,
    alphas=(0.25, 0.5, 1.0),
) -> CheckResult:
    """Explicit-augmentation MC must not exceed closed form + 3 SE."""

    def run():
        rng = Rng(seed)
        worst = -np.inf
        for _ in range(n_instances):
            head, f, y, dmu, cov = random_instance(rng)
            for alpha in alphas:
                z = augmented_logits(f, y, head, dmu, cov, alpha)
                closed, _ = softmax_cross_entropy(z[None, :], np.array([y]))
                est = mc_explicit_loss(f, y, head, dmu, cov, alpha, n_samples, rng)
                margin = est.value - (float(closed[0]) + 3.0 * est.stderr)
                worst = max(worst, margin)
                if margin > 0:
                    return False, (
                        f"MC explicit loss exceeded the bound by {margin:.3e} "
                        f"(alpha={alpha})"
                    )
        return True, f"bound held on {n_instances}x{len(alphas)} instances; worst margin {worst:.3e}"

    return _timed("jensen_bound_mc", run)


def check_mgf_tightness(
    seed: int = 303,
    n_instances: int = 50,
    n_samples: int = 100000,
    alphas=(0.25, 0.5, 1.0),
) -> CheckResult:
    """MC of the bound itself must match the closed form within 3 SE.

    Sequential two-stage test. The max of 150 honest z-scores sits near 2.75,
    so a single-shot 3-sigma gate on every instance trips on pure MC noise
    about a third of the time. An instance that lands beyond 3 SE is retested
    once with fresh draws at four times the budget: a boundary fluke passes
    the retest with probability ~1 - 3e-3, while a real discrepancy has its
    z-score doubled by the larger sample and fails harder. Tolerance stays
    3 MC standard errors at every stage.
    """

    def run():
        rng = Rng(seed)
        worst = -np.inf
        n_retests = 0
        for _ in range(n_instances):
            head, f, y, dmu, cov = random_instance(rng)
            for alpha in alphas:
                bt = mc_bound_tightness(f, y, head, dmu, cov, alpha, n_samples, rng)
                gap = abs(bt.mc_value - bt.closed_form)
                lim = 3.0 * bt.mc_stderr
                if gap > lim:
                    n_retests += 1
                    bt = mc_bound_tightness(
                        f, y, head, dmu, cov, alpha, 4 * n_samples, rng
                    )
                    gap = abs(bt.mc_value - bt.closed_form)
                    lim = 3.0 * bt.mc_stderr
                worst = max(worst, gap - lim)
                if gap > lim:
                    return False, (
                        f"MC {bt.mc_value:.6f} vs closed {bt.closed_form:.6f}: "
                        f"gap {gap:.3e} > 3*SE {lim:.3e} after a 4x retest (alpha={alpha})"
                    )
        return True, (
            f"identity held on {n_instances}x{len(alphas)} instances "
            f"({n_retests} retested); worst slack {worst:.3e}"
        )

    return _timed("mgf_tightness_mc", run)


def check_tsa_gradients(seed: int = 404, n_instances: int = 20, tol: float = 1e-4) -> CheckResult:
    """Analytic augmented-loss gradients vs central differences."""

    def run():
        rng = Rng(seed)
        worst = 0.0
        for _ in range(n_instances):
            head, _, _, _, _ = random_instance(rng, d_max=6, c_max=5)
            d, c = head.dim, head.n_classes
            n = int(rng.integers(1, 7))
            feats = rng.standard_normal(n * d).reshape(n, d)
            labels = rng.integers(0, c, size=n)
            bank = make_bank(rng, d, c)
            alpha = 0.3 + 0.7 * rng.random()
            rep = tsa_loss(feats, labels, head, bank, alpha)

            def value():
                return tsa_loss(feats, labels, head, bank, alpha).value

            for analytic, arr in (
                (rep.grad_features, feats),
                (rep.grad_weights, head.weights),
                (rep.grad_biases, head.biases),
            ):
                worst = max(worst, _max_rel_err(analytic, fd_gradient(value, arr)))
        return worst <= tol, f"max relative gradient error {worst:.2e} (tol {tol:g})"

    return _timed("tsa_loss_gradients_fd", run)


def check_supervised_gradients(seed: int = 505, n_instances: int = 10, tol: float = 1e-4) -> CheckResult:
    """Analytic CE + soft-Dice logit gradient vs central differences."""

    def run():
        rng = Rng(seed)
        worst = 0.0
        for _ in range(n_instances):
            c = int(rng.integers(2, 5))
            h = w = 5
            logits = rng.standard_normal(c * h * w).reshape(h, w, c)
            target = rng.integers(0, c, size=(h, w))
            weight = 0.25 + rng.random((h, w))
            rep = supervised_loss(logits, target, weight)

            def value():
                return supervised_loss(logits, target, weight).value

            worst = max(worst, _max_rel_err(rep.grad_logits, fd_gradient(value, logits)))
        return worst <= tol, f"max relative gradient error {worst:.2e} (tol {tol:g})"

    return _timed("supervised_loss_gradients_fd", run)


def check_network_gradients(seed: int = 606, tol: float = 1e-4, kink_margin: float = 1e-4) -> CheckResult:
    """End-to-end parameter gradients on an 8x8 input vs central differences.

    Probe points where any ReLU pre-activation sits within the kink margin
    are rejected and redrawn, per the check's contract.
    """

    def run():
        d, c, beta, alpha = 8, 3, 0.4, 0.6
        h = w = 8
        for attempt in range(50):
            rng = Rng(seed + attempt)
            params = init_params(d, c, rng)
            image = rng.random((h, w))
            target = rng.integers(0, c, size=(h, w))
            weight = 0.5 + rng.random((h, w))
            bank = make_bank(rng, d, c)
            _, _, cache = forward_batch(params, image[None])
            margin = min(
                np.abs(cache.z1).min(), np.abs(cache.z2).min(), np.abs(cache.z3).min()
            )
            if margin >= kink_margin:
                break
        else:
            return False, "no kink-free probe point found in 50 attempts"

        labels_flat = target.reshape(-1)

        def loss():
            feats, logits, _ = forward_batch(params, image[None])
            sup = supervised_loss(logits[0], target, weight)
            rep = tsa_loss(feats.reshape(-1, d), labels_flat, params.head, bank, alpha)
            return sup.value + beta * rep.value

        feats, logits, cache = forward_batch(params, image[None])
        sup = supervised_loss(logits[0], target, weight)
        rep = tsa_loss(feats.reshape(-1, d), labels_flat, params.head, bank, alpha)
        grads = backward(
            cache, sup.grad_logits[None], (beta * rep.grad_features).reshape(1, h, w, d)
        )
        grads.head.weights += beta * rep.grad_weights
        grads.head.biases += beta * rep.grad_biases

        worst = 0.0
        for (_, g), (_, p) in zip(grads.arrays(), params.arrays()):
            worst = max(worst, _max_rel_err(g, fd_gradient(loss, p)))
        return worst <= tol, f"max relative gradient error {worst:.2e} (tol {tol:g}, margin {margin:.1e})"

    return _timed("network_gradients_fd", run)


def check_stats_convergence(seed: int = 707) -> CheckResult:
    """EMA bank fed i.i.d. Gaussian batches approaches the population stats."""

    def run():
        rng = Rng(seed)
        d = 8
        mu = rng.standard_normal(d)
        a = rng.standard_normal(d * d).reshape(d, d)
        sigma = a @ a.T / d
        ell = np.linalg.cholesky(sigma)
        bank = StatsBank(d, 1, momentum=0.99)
        n_batches, batch = 100, 100
        for _ in range(n_batches):
            x = mu + rng.standard_normal(batch * d).reshape(batch, d) @ ell.T
            bank.ema_update("source", 0, batch_class_stats(x, np.zeros(batch, dtype=int), 0))
        slot = bank.source[0]
        mean_err = float(np.abs(slot.mean - mu).max())
        cov_err = float(np.abs(slot.cov.full() - sigma).max())
        ok = mean_err <= 0.05 and cov_err <= 0.1
        return ok, (
            f"after {n_batches * batch} pixels: max mean err {mean_err:.4f} (tol 0.05), "
            f"max cov entry err {cov_err:.4f} (tol 0.1)"
        )

    return _timed("stats_bank_convergence", run)


def check_pooling_identity(seed: int = 808, n_instances: int = 50) -> CheckResult:
    """Exact pooled moments of two disjoint sets == stats of their union."""

    def run():
        rng = Rng(seed)
        worst = 0.0
        for _ in range(n_instances):
            d = int(rng.integers(1, 9))
            n1 = int(rng.integers(1, 40))
            n2 = int(rng.integers(1, 40))
            x1 = rng.standard_normal(n1 * d).reshape(n1, d)
            x2 = rng.standard_normal(n2 * d).reshape(n2, d)
            zeros = np.zeros(n1 + n2, dtype=int)
            s1 = batch_class_stats(x1, zeros[:n1], 0)
            s2 = batch_class_stats(x2, zeros[:n2], 0)
            su = batch_class_stats(np.vstack([x1, x2]), zeros, 0)
            n = n1 + n2
            mean = (n1 * s1.mean + n2 * s2.mean) / n
            second = (
                n1 * (s1.cov.full() + np.outer(s1.mean, s1.mean))
                + n2 * (s2.cov.full() + np.outer(s2.mean, s2.mean))
            ) / n
            cov = second - np.outer(mean, mean)
            scale = max(1.0, np.abs(su.cov.full()).max())
            worst = max(
                worst,
                float(np.abs(mean - su.mean).max()),
                float(np.abs(cov - su.cov.full()).max()) / scale,
            )
        return worst <= 1e-10, f"max pooled-vs-union discrepancy {worst:.2e} (tol 1e-10)"

    return _timed("pooled_moment_identity", run)


def check_metric_oracles(seed: int = 909, n_pairs: int = 200) -> CheckResult:
    """KD-tree hd95/asd vs brute force; jaccard-dice identity."""

    def run():
        rng = Rng(seed)
        worst_b = 0.0
        worst_j = 0.0
        sentinels = 0
        for _ in range(n_pairs):
            a = random_mask(rng, 32, 32)
            b = random_mask(rng, 32, 32)
            hd, asd, sent = boundary_distances(a, b)
            hd_o, asd_o, sent_o = brute_force_boundary(a, b)
            if sent != sent_o:
                return False, "sentinel flags disagree with the oracle"
            sentinels += sent
            worst_b = max(worst_b, abs(hd - hd_o), abs(asd - asd_o))
            dc, jc = dice(a, b), jaccard(a, b)
            worst_j = max(worst_j, abs(jc - dc / (2.0 - dc)))
        ok = worst_b <= 1e-9 and worst_j <= 1e-12
        return ok, (
            f"{n_pairs} pairs ({sentinels} sentinel): max boundary err {worst_b:.2e} "
            f"(tol 1e-9), max jaccard identity err {worst_j:.2e} (tol 1e-12)"
        )

    return _timed("metric_oracles", run)


def run_all(mc_samples: int = 100000) -> list[CheckResult]:
    """Full suite in a fixed order with fixed seeds, so a fresh build either
    passes deterministically or is actually broken."""
    return [
        check_ce_collapse(),
        check_jensen_bound(n_samples=mc_samples),
        check_mgf_tightness(n_samples=mc_samples),
        check_tsa_gradients(),
        check_supervised_gradients(),
        check_network_gradients(),
        check_stats_convergence(),
        check_pooling_identity(),
        check_metric_oracles(),
    ]
