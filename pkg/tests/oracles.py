"""Independent reference computations for the test suite.

Everything here is built directly from density definitions (scipy.stats
log-pdfs, explicit numerical integration, naive Metropolis moves) and never
calls the package's linear-algebra reductions, so agreement is evidence of
correctness rather than self-consistency.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate
from scipy.special import betaln, gammaln, logsumexp
from scipy.stats import beta as beta_dist
from scipy.stats import bernoulli, invgamma, norm

from esabre.data import Dataset, Hyperparameters, ModelState


def _norm_logpdf(x, mean, var):
    return -0.5 * np.log(2.0 * np.pi * var) - (x - mean) ** 2 / (2.0 * var)


def _invgamma_logpdf(x, a, b):
    return a * np.log(b) - gammaln(a) - (a + 1.0) * np.log(x) - b / x


def _beta_logpdf(x, a, b):
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)


def log_joint(state: ModelState, data: Dataset, hyper: Hyperparameters, mode="esabre"):
    """Full joint log density of data and parameters, summed term by term
    from the textbook density formulas."""
    h = hyper.for_factors(data.layout.n_factors)
    y = data.obs.y
    zb = data.zb(state.b)
    x_fit = state.w0 + data.design.x @ state.w
    total = 0.0
    if mode == "esabre":
        total += _norm_logpdf(y, state.mu_y[data.obs.pair_id] + zb, state.sigma_y2).sum()
        total += _norm_logpdf(state.mu_y, x_fit, state.sigma_eps2).sum()
        total += _invgamma_logpdf(state.sigma_y2, h.alpha_y, h.beta_y)
    else:
        total += _norm_logpdf(y, x_fit[data.obs.pair_id] + zb, state.sigma_eps2).sum()
    total += _invgamma_logpdf(state.sigma_eps2, h.alpha_eps, h.beta_eps)
    total += _norm_logpdf(state.w0, h.mu_w0, h.sigma_w02 * state.sigma_eps2)
    inc = state.gamma != 0
    total += _norm_logpdf(state.w[inc], state.mu_w, state.sigma_w2 * state.sigma_eps2).sum()
    total += _invgamma_logpdf(state.sigma_w2, h.alpha_w, h.beta_w)
    total += _norm_logpdf(state.mu_w, h.mu0, h.sigma02 * state.sigma_eps2)
    n1 = int(inc.sum())
    total += n1 * np.log(state.pi) + (state.gamma.size - n1) * np.log1p(-state.pi)
    total += _beta_logpdf(state.pi, h.alpha_pi, h.beta_pi)
    offsets = data.layout.offsets
    for k in range(data.layout.n_factors):
        bk = state.b[offsets[k] : offsets[k + 1]]
        total += _norm_logpdf(bk, 0.0, state.sigma_b2[k]).sum()
        total += _invgamma_logpdf(state.sigma_b2[k], h.alpha_b[k], h.beta_b[k])
    return float(total)


def log_beta_bernoulli_quadrature(gamma, hyper) -> float:
    """log integral prod_j Bern(gamma_j | pi) Beta(pi | a, b) dpi, numerically."""
    gamma = np.asarray(gamma)
    n1 = int((gamma != 0).sum())
    n0 = gamma.size - n1

    def f(p):
        return p**n1 * (1.0 - p) ** n0 * beta_dist.pdf(p, hyper.alpha_pi, hyper.beta_pi)

    value, _ = integrate.quad(f, 0.0, 1.0, epsabs=0.0, epsrel=1e-10, limit=200)
    return float(np.log(value))


_BOX_CACHE: dict = {}


def _gauss_legendre_box(n_dims: int, n_nodes: int, half_width: float):
    key = (n_dims, n_nodes, half_width)
    if key not in _BOX_CACHE:
        nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
        nodes = nodes * half_width
        weights = weights * half_width
        node_grids = np.meshgrid(*([nodes] * n_dims), indexing="ij")
        weight_grids = np.meshgrid(*([weights] * n_dims), indexing="ij")
        u = np.stack([g.ravel() for g in node_grids], axis=-1)
        w = np.ones(u.shape[0])
        for g in weight_grids:
            w *= g.ravel()
        _BOX_CACHE[key] = (u, np.log(w))
    return _BOX_CACHE[key]


class _InnerIntegrator:
    """Grid integration of the fixed-noise coefficient block.

    Coordinates (w0, mu_w, included w) are rotated onto the principal axes
    of the stacked likelihood-plus-prior rows (one SVD of an explicit
    design, no package code), where the integrand is an almost perfectly
    standardised Gaussian; the densities themselves are evaluated directly
    at every node.  Every row of the stacked system scales with the noise
    sd, so the geometry is computed once per indicator vector.
    """

    def __init__(self, target, x_gamma, hyper, sigma_w2):
        self.target = np.asarray(target, dtype=float)
        self.x_gamma = np.asarray(x_gamma, dtype=float)
        self.hyper = hyper
        self.sigma_w2 = sigma_w2
        p = self.target.size
        r = self.x_gamma.shape[1]
        self.dims = r + 2
        h = hyper
        # Rows of the unit-noise system: data, then one prior row each for
        # the intercept, the shared mean, and every included coefficient.
        b = np.zeros((p + self.dims, self.dims))
        c = np.zeros(p + self.dims)
        b[:p, 0] = 1.0
        b[:p, 2:] = self.x_gamma
        c[:p] = self.target
        b[p, 0] = 1.0 / np.sqrt(h.sigma_w02)
        c[p] = h.mu_w0 / np.sqrt(h.sigma_w02)
        b[p + 1, 1] = 1.0 / np.sqrt(h.sigma02)
        c[p + 1] = h.mu0 / np.sqrt(h.sigma02)
        for j in range(r):
            b[p + 2 + j, 2 + j] = 1.0 / np.sqrt(sigma_w2)
            b[p + 2 + j, 1] = -1.0 / np.sqrt(sigma_w2)
        self.center, *_ = np.linalg.lstsq(b, c, rcond=None)
        _, sing, vt = np.linalg.svd(b, full_matrices=False)
        self.axes = vt.T / sing  # columns: principal directions * sd at unit noise
        self._logdet_axes = float(np.linalg.slogdet(self.axes)[1])

    def log_integral(self, sigma_eps2, n_nodes=24, half_width=9.0):
        u, log_w = _gauss_legendre_box(self.dims, n_nodes, half_width)
        theta = self.center[None, :] + (u @ self.axes.T) * np.sqrt(sigma_eps2)
        log_jac = self.dims * 0.5 * np.log(sigma_eps2) + self._logdet_axes
        h = self.hyper
        log2pi = np.log(2.0 * np.pi)
        w0 = theta[:, 0]
        mu_w = theta[:, 1]
        mean = w0[:, None] + (theta[:, 2:] @ self.x_gamma.T if self.dims > 2 else 0.0)
        resid = self.target[None, :] - mean
        log_f = (
            -0.5 * self.target.size * np.log(2.0 * np.pi * sigma_eps2)
            - 0.5 * (resid**2).sum(axis=1) / sigma_eps2
        )
        v0 = h.sigma_w02 * sigma_eps2
        log_f += -0.5 * (log2pi + np.log(v0)) - (w0 - h.mu_w0) ** 2 / (2.0 * v0)
        v1 = h.sigma02 * sigma_eps2
        log_f += -0.5 * (log2pi + np.log(v1)) - (mu_w - h.mu0) ** 2 / (2.0 * v1)
        if self.dims > 2:
            vw = self.sigma_w2 * sigma_eps2
            dev = theta[:, 2:] - mu_w[:, None]
            log_f += (
                -0.5 * (self.dims - 2) * (log2pi + np.log(vw))
                - (dev**2).sum(axis=1) / (2.0 * vw)
            )
        return float(logsumexp(log_f + log_w) + log_jac)


def _inner_log_integral_grid(target, x_gamma, hyper, sigma_w2, sigma_eps2, n_nodes=24):
    return _InnerIntegrator(target, x_gamma, hyper, sigma_w2).log_integral(
        sigma_eps2, n_nodes=n_nodes
    )


def quadrature_log_collapsed(gamma, target, x, hyper, sigma_w2,
                             n_nodes=24, rel_tol=1e-8) -> float:
    """Explicit numerical integration of the collapsed mass of ``gamma``.

    Adaptive 1-D quadrature over log sigma_eps2; the inner Gaussian block is
    integrated on a standardised tensor grid wide enough that the excluded
    tails are negligible.  The inclusion-probability integral is evaluated
    separately.  Returns the log of the full marginal.
    """
    gamma = np.asarray(gamma)
    x_gamma = np.asarray(x)[:, gamma != 0]
    target = np.asarray(target, dtype=float)
    integrator = _InnerIntegrator(target, x_gamma, hyper, sigma_w2)

    def log_outer(log_s2):
        s2 = np.exp(log_s2)
        inner = integrator.log_integral(s2, n_nodes=n_nodes)
        # Jacobian of the log substitution: d sigma2 = sigma2 d log
        return inner + invgamma.logpdf(s2, hyper.alpha_eps, scale=hyper.beta_eps) + log_s2

    # Locate the integrand's bulk on a coarse grid, then integrate adaptively.
    grid = np.linspace(np.log(1e-7), np.log(1e7), 41)
    values = np.array([log_outer(g) for g in grid])
    shift = values.max()
    bulk = np.flatnonzero(values > shift - 60.0)
    lo = grid[max(bulk[0] - 1, 0)]
    hi = grid[min(bulk[-1] + 1, len(grid) - 1)]

    def f(g):
        return np.exp(log_outer(g) - shift)

    value, _ = integrate.quad(f, lo, hi, epsabs=0.0, epsrel=rel_tol, limit=400)
    return float(np.log(value) + shift + log_beta_bernoulli_quadrature(gamma, hyper))


def quadrature_log_collapsed_nquad(gamma, target, x, hyper, sigma_w2, rel_tol=1e-9):
    """Fully adaptive nested quadrature over every integrated coordinate.

    Slow; used to cross-check the grid-based oracle on small cases.
    """
    gamma = np.asarray(gamma)
    x_gamma = np.asarray(x)[:, gamma != 0]
    target = np.asarray(target, dtype=float)
    r = x_gamma.shape[1]
    h = hyper

    # Shift by the integrand value at central coordinates for stability.
    def log_integrand(args):
        log_s2 = args[-1]
        s2 = np.exp(log_s2)
        sd = np.sqrt(s2)
        w0 = h.mu_w0 + np.sqrt(h.sigma_w02) * sd * args[0]
        mu_w = h.mu0 + np.sqrt(h.sigma02) * sd * args[1]
        mean = np.full(target.size, w0)
        total_std = -0.5 * (r + 2) * np.log(2 * np.pi) - 0.5 * sum(a * a for a in args[:-1])
        if r:
            w = mu_w + np.sqrt(sigma_w2) * sd * np.asarray(args[2 : 2 + r])
            mean = mean + x_gamma @ w
        ll = -0.5 * target.size * np.log(2 * np.pi * s2) - 0.5 * float(
            ((target - mean) ** 2).sum()
        ) / s2
        return ll + total_std + invgamma.logpdf(s2, h.alpha_eps, scale=h.beta_eps) + log_s2

    center = [0.0] * (r + 2) + [np.log(hyper.beta_eps / (hyper.alpha_eps + 1.0))]
    grid = np.linspace(np.log(1e-8), np.log(1e8), 61)
    best = max(grid, key=lambda g: log_integrand(center[:-1] + [g]))
    shift = log_integrand(center[:-1] + [best])

    def integrand(*args):
        return np.exp(log_integrand(list(args)) - shift)

    ranges = [(-12.0, 12.0)] * (r + 2) + [(np.log(1e-8), np.log(1e8))]
    value, _ = integrate.nquad(
        integrand, ranges, opts={"epsabs": 0.0, "epsrel": rel_tol, "limit": 150}
    )
    return float(np.log(value) + shift + log_beta_bernoulli_quadrature(gamma, hyper))


def random_instance(rng, n_pairs=4, n_vars=2, n_factors=1, n_obs=None, group_sizes=None):
    """Small random dataset plus a valid random state for ratio tests."""
    from esabre.data import ObservationTable, PairDesign, RandomEffectsLayout

    n_obs = n_obs or n_pairs * 2
    group_sizes = group_sizes or [2] * n_factors
    pair_id = np.concatenate(
        [np.arange(n_pairs), rng.integers(0, n_pairs, n_obs - n_pairs)]
    ).astype(np.int64)
    groups = np.column_stack(
        [
            np.concatenate([np.arange(g), rng.integers(0, g, n_obs - g)])
            for g in group_sizes
        ]
    ).astype(np.int64)
    rng.shuffle(pair_id)
    x_star = np.column_stack(
        [np.ones(n_pairs), (rng.random((n_pairs, n_vars)) < 0.5).astype(float)]
    )
    y = rng.normal(2.0, 1.0, n_obs)
    obs = ObservationTable(
        obs_id=np.arange(n_obs, dtype=np.int64), y=y, pair_id=pair_id, groups=groups
    )
    layout = RandomEffectsLayout(
        sizes=tuple(group_sizes), names=tuple(f"f{k}" for k in range(n_factors))
    )
    data = Dataset(obs, PairDesign(x_star), layout, allow_sparse_groups=True)

    gamma = (rng.random(n_vars) < 0.5).astype(np.int8)
    w = np.where(gamma == 1, rng.normal(-0.3, 0.2, n_vars), 0.0)
    state = ModelState(
        mu_y=rng.normal(2.0, 1.0, n_pairs),
        w0=rng.normal(2.0, 1.0),
        w=w,
        gamma=gamma,
        mu_w=rng.normal(-0.3, 0.2),
        sigma_y2=float(rng.uniform(0.1, 1.0)),
        sigma_eps2=float(rng.uniform(0.1, 1.0)),
        sigma_w2=float(rng.uniform(0.1, 1.0)),
        b=rng.normal(0.0, 0.5, sum(group_sizes)),
        sigma_b2=rng.uniform(0.1, 1.0, n_factors),
        pi=float(rng.uniform(0.2, 0.8)),
    )
    return data, state


def random_hyper(rng, vague=False) -> Hyperparameters:
    if vague:
        return Hyperparameters()
    return Hyperparameters(
        alpha_y=float(rng.uniform(0.5, 3.0)),
        beta_y=float(rng.uniform(0.3, 3.0)),
        alpha_eps=float(rng.uniform(0.5, 3.0)),
        beta_eps=float(rng.uniform(0.3, 3.0)),
        alpha_w=float(rng.uniform(0.5, 3.0)),
        beta_w=float(rng.uniform(0.3, 3.0)),
        mu0=float(rng.uniform(-1.0, 1.0)),
        sigma02=float(rng.uniform(0.5, 30.0)),
        mu_w0=float(rng.uniform(-1.0, 3.0)),
        sigma_w02=float(rng.uniform(0.5, 30.0)),
        alpha_pi=float(rng.uniform(0.5, 3.0)),
        beta_pi=float(rng.uniform(0.5, 5.0)),
        alpha_b=(float(rng.uniform(0.5, 3.0)),),
        beta_b=(float(rng.uniform(0.3, 3.0)),),
    )


def batch_means_se(trace: np.ndarray, n_batches: int = 40) -> float:
    """Monte-Carlo standard error of a correlated trace via batch means."""
    n = trace.size // n_batches
    if n < 2:
        return float(np.std(trace) / np.sqrt(max(trace.size, 1)))
    means = trace[: n * n_batches].reshape(n_batches, n).mean(axis=1)
    return float(np.std(means, ddof=1) / np.sqrt(n_batches))


class BruteForceSampler:
    """Naive componentwise Metropolis over the full joint.

    Uses only ``log_joint`` plus elementary proposals: random-walk moves on
    continuous coordinates (log scale for variances, logit scale for the
    inclusion probability) and birth/death flips of single indicators with
    the slab prior as the coefficient proposal, whose density correction is
    applied explicitly.  Slow but built from nothing except the density.
    """

    def __init__(self, data, hyper, rng, mode="esabre", step=0.35):
        self.data = data
        self.hyper = hyper.for_factors(data.layout.n_factors)
        self.rng = rng
        self.mode = mode
        self.step = step
        self._cur_logp = None

    def _logp(self, state):
        return log_joint(state, self.data, self.hyper, mode=self.mode)

    def _try(self, state, mutate, extra_log_ratio=0.0):
        if self._cur_logp is None:
            self._cur_logp = self._logp(state)
        new = state.copy()
        mutate(new)
        new_logp = self._logp(new)
        delta = new_logp - self._cur_logp + extra_log_ratio
        if np.log(self.rng.random()) < delta:
            self._cur_logp = new_logp
            return new, True
        return state, False

    def step_once(self, state):
        rng = self.rng
        data, h = self.data, self.hyper
        kind = rng.integers(0, 9)
        if kind == 0 and self.mode == "esabre":
            p = rng.integers(0, data.n_pairs)

            def m(s, p=p):
                s.mu_y[p] += self.step * rng.standard_normal()

            state, _ = self._try(state, m)
        elif kind == 1:

            def m(s):
                s.w0 += self.step * rng.standard_normal()

            state, _ = self._try(state, m)
        elif kind == 2:

            def m(s):
                s.mu_w += self.step * rng.standard_normal()

            state, _ = self._try(state, m)
        elif kind == 3:
            inc = np.flatnonzero(state.gamma)
            if inc.size:
                j = int(rng.choice(inc))

                def m(s, j=j):
                    s.w[j] += self.step * rng.standard_normal()

                state, _ = self._try(state, m)
        elif kind == 4:
            names = ["sigma_y2", "sigma_eps2", "sigma_w2"]
            if self.mode == "sabre_flat":
                names = ["sigma_eps2", "sigma_w2"]
            name = names[rng.integers(0, len(names))]
            factor = np.exp(self.step * rng.standard_normal())

            def m(s, name=name, factor=factor):
                setattr(s, name, getattr(s, name) * factor)
                if self.mode == "sabre_flat" and name == "sigma_eps2":
                    s.sigma_y2 = s.sigma_eps2

            state, _ = self._try(state, m, extra_log_ratio=np.log(factor))
        elif kind == 5 and state.sigma_b2.size:
            k = int(rng.integers(0, state.sigma_b2.size))
            factor = np.exp(self.step * rng.standard_normal())

            def m(s, k=k, factor=factor):
                s.sigma_b2[k] *= factor

            state, _ = self._try(state, m, extra_log_ratio=np.log(factor))
        elif kind == 6 and state.b.size:
            i = int(rng.integers(0, state.b.size))

            def m(s, i=i):
                s.b[i] += self.step * rng.standard_normal()

            state, _ = self._try(state, m)
        elif kind == 7:
            z = np.log(state.pi / (1.0 - state.pi)) + self.step * rng.standard_normal()
            new_pi = 1.0 / (1.0 + np.exp(-z))
            jac = np.log(new_pi * (1 - new_pi)) - np.log(state.pi * (1 - state.pi))

            def m(s, new_pi=new_pi):
                s.pi = new_pi

            state, _ = self._try(state, m, extra_log_ratio=jac)
        else:
            j = int(rng.integers(0, state.gamma.size))
            slab_sd = np.sqrt(state.sigma_w2 * state.sigma_eps2)
            if state.gamma[j] == 0:
                w_new = state.mu_w + slab_sd * rng.standard_normal()
                log_g = norm.logpdf(w_new, state.mu_w, slab_sd)

                def m(s, j=j, w_new=w_new):
                    s.gamma[j] = 1
                    s.w[j] = w_new

                state, _ = self._try(state, m, extra_log_ratio=-log_g)
            else:
                log_g = norm.logpdf(state.w[j], state.mu_w, slab_sd)

                def m(s, j=j):
                    s.gamma[j] = 0
                    s.w[j] = 0.0

                state, _ = self._try(state, m, extra_log_ratio=log_g)
        return state

    def run(self, state, n_steps, record_every=10):
        pis, sigmas, gammas = [], [], []
        for t in range(n_steps):
            state = self.step_once(state)
            if t % record_every == 0:
                pis.append(state.pi)
                sigmas.append(state.sigma_y2)
                gammas.append(state.gamma.copy())
        return state, np.array(pis), np.array(sigmas), np.array(gammas)
