"""Minimal dense feed-forward networks with reverse-mode gradients,
interval bound propagation (IBP), and Lipschitz upper bounds.

All evaluation routines are pure and accept batched inputs: an input of
shape (d,) returns an unbatched result, (B, d) returns a batch. Interval
routines operate on axis-aligned boxes given as (lower, upper) pairs and
are vectorised over a leading batch axis, which is what makes the
branch-and-bound verifier tractable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "softplus", "identity")

# max |sigma''| per activation; relu has a gradient jump, so no finite bound
_CURVATURE = {
    "identity": 0.0,
    "softplus": 0.25,
    "tanh": 4.0 / (3.0 * np.sqrt(3.0)),
}


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "softplus":
        # exp-overflow safe: softplus(z) = max(z, 0) + log1p(exp(-|z|))
        return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    if name == "identity":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_deriv(name, z):
    # relu subgradient at 0 is defined as 0 for determinism
    if name == "relu":
        return np.where(z > 0.0, 1.0, 0.0)
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "softplus":
        return _sigmoid(z)
    if name == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


def _sigmoid(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act_deriv_interval(name, zl, zu):
    """Sound enclosure of sigma'(z) for z in [zl, zu], elementwise."""
    if name == "identity":
        return np.ones_like(zl), np.ones_like(zu)
    if name == "relu":
        lo = np.where(zl > 0.0, 1.0, 0.0)
        hi = np.where(zu > 0.0, 1.0, 0.0)
        return lo, hi
    if name == "softplus":
        return _sigmoid(zl), _sigmoid(zu)
    if name == "tanh":
        dl = _act_deriv(name, zl)
        du = _act_deriv(name, zu)
        lo = np.minimum(dl, du)
        # tanh' peaks at z = 0
        hi = np.where((zl <= 0.0) & (zu >= 0.0), 1.0, np.maximum(dl, du))
        return lo, hi
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Interval:
    """Axis-aligned box: lower <= upper componentwise."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape:
            raise ValueError("interval endpoint shapes differ")
        if np.any(self.lower > self.upper + 1e-15):
            raise ValueError("interval lower exceeds upper")

    @property
    def width(self):
        return self.upper - self.lower

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    def contains(self, x, tol=1e-12):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))


@dataclass
class Layer:
    w: np.ndarray
    b: np.ndarray
    act: str

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        if self.w.ndim != 2 or self.b.ndim != 1 or self.w.shape[0] != self.b.shape[0]:
            raise ValueError("layer weight/bias shapes inconsistent")
        if self.act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.act!r}")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.b))):
            raise ValueError("non-finite layer parameters")


@dataclass
class FeedForwardNet:
    """Dense network y = act_L(W_L ... act_1(W_1 x + b_1) ... + b_L).

    `frozen_tail` marks that many trailing layers as non-trainable; they
    are used to realise fixed output clamps as min/max compositions so
    the clamped controller stays a plain network for IBP and gradients.
    """

    layers: list[Layer]
    frozen_tail: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if b.w.shape[1] != a.w.shape[0]:
                raise ValueError("consecutive layer dimensions do not chain")

    @property
    def input_dim(self):
        return self.layers[0].w.shape[1]

    @property
    def output_dim(self):
        return self.layers[-1].w.shape[0]

    @property
    def trainable_layers(self):
        n = len(self.layers) - self.frozen_tail
        return self.layers[:n]

    # ---- evaluation -------------------------------------------------

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        self._check_dim(x)
        h = x
        for lay in self.layers:
            h = _act(lay.act, h @ lay.w.T + lay.b)
        return h

    def forward_cached(self, x):
        """Forward pass keeping pre-activations for backprop."""
        x = np.asarray(x, dtype=float)
        self._check_dim(x)
        pre = []
        post = [x]
        h = x
        for lay in self.layers:
            z = h @ lay.w.T + lay.b
            pre.append(z)
            h = _act(lay.act, z)
            post.append(h)
        return h, (pre, post)

    def backprop(self, cache, dy):
        """Reverse pass: returns (dx, [(dW, db) per layer])."""
        pre, post = cache
        dy = np.asarray(dy, dtype=float)
        grads = [None] * len(self.layers)
        g = dy
        for k in range(len(self.layers) - 1, -1, -1):
            lay = self.layers[k]
            g = g * _act_deriv(lay.act, pre[k])
            a = post[k]
            if a.ndim == 1:
                dw = np.outer(g, a)
                db = g.copy()
            else:
                dw = g.T @ a
                db = g.sum(axis=0)
            grads[k] = (dw, db)
            g = g @ lay.w
        return g, grads

    def input_gradient(self, x):
        """Exact reverse-mode Jacobian dy/dx, shape (out_dim, in_dim)."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ValueError("input_gradient expects a single point")
        _, (pre, _) = self.forward_cached(x)
        jac = self.layers[0].w.copy()
        jac = _act_deriv(self.layers[0].act, pre[0])[:, None] * jac
        for k in range(1, len(self.layers)):
            lay = self.layers[k]
            jac = lay.w @ jac
            jac = _act_deriv(lay.act, pre[k])[:, None] * jac
        return jac

    def param_gradient(self, x, upstream):
        """Backprop of upstream^T y into every weight and bias."""
        y, cache = self.forward_cached(x)
        upstream = np.asarray(upstream, dtype=float)
        if upstream.shape != y.shape:
            raise ValueError("upstream cotangent shape mismatch")
        _, grads = self.backprop(cache, upstream)
        return grads

    def _check_dim(self, x):
        if x.shape[-1] != self.input_dim:
            raise ValueError(
                f"input dim {x.shape[-1]} does not match network ({self.input_dim})"
            )

    # ---- interval analysis ------------------------------------------

    def interval_bounds(self, box: Interval) -> Interval:
        """Sound output enclosure by interval propagation."""
        lo, hi = self.bounds_batch(box.lower[None], box.upper[None])
        return Interval(lo[0], hi[0])

    def bounds_batch(self, lo, hi):
        """Batched IBP: lo, hi of shape (B, in_dim) -> (B, out_dim)."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        for lay in self.layers:
            wp = np.maximum(lay.w, 0.0)
            wn = np.minimum(lay.w, 0.0)
            zl = lo @ wp.T + hi @ wn.T + lay.b
            zu = hi @ wp.T + lo @ wn.T + lay.b
            # all supported activations are monotone nondecreasing
            lo = _act(lay.act, zl)
            hi = _act(lay.act, zu)
        return lo, hi

    def jacobian_bounds_batch(self, lo, hi):
        """Sound enclosure of the Jacobian over each box.

        Returns (jl, ju) of shape (B, out_dim, in_dim). Forward
        accumulation: J = D_L W_L ... D_1 W_1 with D_k the diagonal
        activation-derivative intervals at the IBP pre-activations.
        """
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        bsz = lo.shape[0]
        jl = np.broadcast_to(self.layers[0].w, (bsz,) + self.layers[0].w.shape).copy()
        ju = jl.copy()
        for k, lay in enumerate(self.layers):
            if k > 0:
                wp = np.maximum(lay.w, 0.0)
                wn = np.minimum(lay.w, 0.0)
                njl = np.einsum("ok,bki->boi", wp, jl) + np.einsum(
                    "ok,bki->boi", wn, ju
                )
                nju = np.einsum("ok,bki->boi", wp, ju) + np.einsum(
                    "ok,bki->boi", wn, jl
                )
                jl, ju = njl, nju
            wp = np.maximum(lay.w, 0.0)
            wn = np.minimum(lay.w, 0.0)
            zl = lo @ wp.T + hi @ wn.T + lay.b
            zu = hi @ wp.T + lo @ wn.T + lay.b
            dl, du = _act_deriv_interval(lay.act, zl, zu)
            cands = np.stack(
                [
                    dl[:, :, None] * jl,
                    dl[:, :, None] * ju,
                    du[:, :, None] * jl,
                    du[:, :, None] * ju,
                ]
            )
            jl = cands.min(axis=0)
            ju = cands.max(axis=0)
            lo = _act(lay.act, zl)
            hi = _act(lay.act, zu)
        return jl, ju

    # ---- Lipschitz bounds --------------------------------------------

    def lipschitz_upper(self):
        """Product of layer spectral norms; upper-bounds the true constant."""
        bound = 1.0
        for lay in self.layers:
            bound *= spectral_norm(lay.w)
        return bound

    def lipschitz_on_box(self, box: Interval):
        """Box-local Lipschitz bound from the interval Jacobian."""
        jl, ju = self.jacobian_bounds_batch(box.lower[None], box.upper[None])
        mag = np.maximum(np.abs(jl[0]), np.abs(ju[0]))
        return spectral_norm(mag)

    def gradient_lipschitz_upper(self):
        """Upper bound on the Lipschitz constant of x -> J(x).

        Composition rule for g o h: S <= S_h * L_g + L_h^2 * S_g.
        Only defined for networks with C^1 activations.
        """
        lip, smooth = 1.0, 0.0
        for lay in self.layers:
            if lay.act == "relu":
                raise ValueError("gradient smoothness bound undefined for relu")
            wn = spectral_norm(lay.w)
            smooth = smooth * wn + lip * lip * wn * wn * _CURVATURE[lay.act]
            lip = lip * wn
        return smooth

    # ---- serialization ------------------------------------------------

    def to_config(self):
        return {
            "kind": "mlp",
            "frozen_tail": self.frozen_tail,
            "layers": [
                {"w": lay.w.tolist(), "b": lay.b.tolist(), "act": lay.act}
                for lay in self.layers
            ],
        }

    @staticmethod
    def from_config(cfg):
        layers = [
            Layer(np.array(c["w"], dtype=float), np.array(c["b"], dtype=float), c["act"])
            for c in cfg["layers"]
        ]
        return FeedForwardNet(layers, frozen_tail=int(cfg.get("frozen_tail", 0)))


@dataclass
class SquaredNet:
    """Positive-definite scalar function V(x) = ||N(x) - N(0)||^2 + delta*||x||^2.

    Guarantees V(0) = 0, V(x) > 0 for x != 0 (when delta > 0) and radial
    unboundedness, so positive-definiteness holds by construction instead
    of by verification.
    """

    inner: FeedForwardNet
    delta: float = 1e-3

    def __post_init__(self):
        self._n0 = self.inner.forward(np.zeros(self.inner.input_dim))

    @property
    def input_dim(self):
        return self.inner.input_dim

    @property
    def output_dim(self):
        return 1

    def refresh(self):
        """Re-cache N(0) after a parameter update."""
        self._n0 = self.inner.forward(np.zeros(self.inner.input_dim))

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        d = self.inner.forward(x) - self._n0
        return (d * d).sum(axis=-1) + self.delta * (x * x).sum(axis=-1)

    def input_gradient(self, x):
        x = np.asarray(x, dtype=float)
        d = self.inner.forward(x) - self._n0
        jac = self.inner.input_gradient(x)
        return (2.0 * (jac.T @ d) + 2.0 * self.delta * x)[None, :]

    def param_gradient(self, x, upstream):
        """Gradients of upstream * V(x) w.r.t. the inner net parameters."""
        x = np.asarray(x, dtype=float)
        up = float(np.asarray(upstream).reshape(()))
        y, cache = self.inner.forward_cached(x)
        d = y - self._n0
        _, g_x = self.inner.backprop(cache, 2.0 * up * d)
        _, cache0 = self.inner.forward_cached(np.zeros(self.input_dim))
        _, g_0 = self.inner.backprop(cache0, -2.0 * up * d)
        return [(a[0] + b[0], a[1] + b[1]) for a, b in zip(g_x, g_0)]

    def bounds_batch(self, lo, hi):
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        nl, nu = self.inner.bounds_batch(lo, hi)
        dl, du = nl - self._n0, nu - self._n0
        sl, su = _square_interval(dl, du)
        xl, xu = _square_interval(lo, hi)
        vl = sl.sum(axis=-1) + self.delta * xl.sum(axis=-1)
        vu = su.sum(axis=-1) + self.delta * xu.sum(axis=-1)
        return vl[:, None], vu[:, None]

    def interval_bounds(self, box: Interval) -> Interval:
        lo, hi = self.bounds_batch(box.lower[None], box.upper[None])
        return Interval(lo[0], hi[0])

    def jacobian_bounds_batch(self, lo, hi):
        """Enclosure of grad V = 2 J_N(x)^T (N(x)-N(0)) + 2 delta x."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        nl, nu = self.inner.bounds_batch(lo, hi)
        dl, du = nl - self._n0, nu - self._n0
        jl, ju = self.inner.jacobian_bounds_batch(lo, hi)
        # interval mat-vec: sum_k J[k, i] * d[k]
        cands = np.stack(
            [
                jl * dl[:, :, None],
                jl * du[:, :, None],
                ju * dl[:, :, None],
                ju * du[:, :, None],
            ]
        )
        gl = 2.0 * cands.min(axis=0).sum(axis=1) + 2.0 * self.delta * lo
        gu = 2.0 * cands.max(axis=0).sum(axis=1) + 2.0 * self.delta * hi
        return gl[:, None, :], gu[:, None, :]

    def lipschitz_on_box(self, box: Interval):
        gl, gu = self.jacobian_bounds_batch(box.lower[None], box.upper[None])
        mag = np.maximum(np.abs(gl[0, 0]), np.abs(gu[0, 0]))
        return float(np.linalg.norm(mag))

    def gradient_lipschitz_on_box(self, box: Interval):
        """Smoothness bound: 2 (S_N * sup||N-N0|| + L_N^2) + 2 delta."""
        nl, nu = self.inner.bounds_batch(box.lower[None], box.upper[None])
        dmag = np.maximum(np.abs(nl[0] - self._n0), np.abs(nu[0] - self._n0))
        sup_d = float(np.linalg.norm(dmag))
        l_n = self.inner.lipschitz_on_box(box)
        s_n = self.inner.gradient_lipschitz_upper()
        return 2.0 * (s_n * sup_d + l_n * l_n) + 2.0 * self.delta

    def to_config(self):
        return {"kind": "squared", "delta": self.delta, "inner": self.inner.to_config()}

    @staticmethod
    def from_config(cfg):
        return SquaredNet(FeedForwardNet.from_config(cfg["inner"]), delta=float(cfg["delta"]))


def net_from_config(cfg):
    kind = cfg.get("kind", "mlp")
    if kind == "mlp":
        return FeedForwardNet.from_config(cfg)
    if kind == "squared":
        return SquaredNet.from_config(cfg)
    raise ValueError(f"unknown net kind {kind!r}")


def _square_interval(lo, hi):
    """Elementwise enclosure of x^2 for x in [lo, hi]."""
    a, b = lo * lo, hi * hi
    upper = np.maximum(a, b)
    lower = np.where((lo <= 0.0) & (hi >= 0.0), 0.0, np.minimum(a, b))
    return lower, upper


def spectral_norm(w, tol=1e-9, max_iter=2000):
    """Largest singular value by power iteration on w^T w."""
    w = np.asarray(w, dtype=float)
    if w.size == 0:
        return 0.0
    v = np.ones(w.shape[1]) / np.sqrt(w.shape[1])
    sigma = 0.0
    for _ in range(max_iter):
        u = w @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = w.T @ (u / nu)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0
        v /= nv
        if abs(nv - sigma) <= tol:
            sigma = nv
            break
        sigma = nv
    return float(sigma)


def mlp(dims, acts, rng=None, scale=1.0):
    """Build a dense net; random Gaussian init when rng is given, zeros otherwise."""
    if len(acts) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for k in range(len(dims) - 1):
        if rng is None:
            w = np.zeros((dims[k + 1], dims[k]))
        else:
            w = rng.normal(size=(dims[k + 1], dims[k])) * scale / np.sqrt(dims[k])
        layers.append(Layer(w, np.zeros(dims[k + 1]), acts[k]))
    return FeedForwardNet(layers)


def append_output_clamp(net: FeedForwardNet, lower, upper):
    """Clamp outputs into [lower, upper] with relu layers, keeping the
    result IBP-analysable: clamp(y) = hi - relu(hi - lo - relu(y - lo)).

    The appended layers are marked frozen so training never alters them.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    m = net.output_dim
    if lower.shape != (m,) or upper.shape != (m,):
        raise ValueError("clamp bound shapes must match the output dim")
    if np.any(lower >= upper):
        raise ValueError("clamp needs lower < upper")
    eye = np.eye(m)
    if net.layers[-1].act != "identity":
        raise ValueError("clamp expects an identity output layer")
    layers = list(net.layers) + [
        Layer(eye, -lower, "relu"),
        Layer(-eye, upper - lower, "relu"),
        Layer(-eye, upper, "identity"),
    ]
    return FeedForwardNet(layers, frozen_tail=3)
