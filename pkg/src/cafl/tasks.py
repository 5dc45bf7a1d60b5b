"""Synthetic federated learning tasks.

Every task exposes the global objective ``F = sum_k a_k F_k``, per-device
minibatch gradients, a smoothness constant ``L`` and, where available, the
optimum. Data are generated from a seed so tasks are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import expit

from .rng import substream, TASK


class Task:
    kind: str = "task"
    d: int
    K: int
    a: np.ndarray
    L: float
    mu: float = 0.0
    theta0: np.ndarray
    theta_star: np.ndarray | None = None
    F_star: float = 0.0
    F_star_exact: bool = False
    classification: bool = False

    def shard_size(self, k: int) -> int:
        raise NotImplementedError

    def device_grad(self, k: int, theta: np.ndarray, idx=None) -> np.ndarray:
        raise NotImplementedError

    def device_loss(self, k: int, theta: np.ndarray) -> float:
        raise NotImplementedError

    def loss(self, theta) -> float:
        return float(sum(self.a[k] * self.device_loss(k, theta) for k in range(self.K)))

    def grad(self, theta) -> np.ndarray:
        return sum(self.a[k] * self.device_grad(k, theta) for k in range(self.K))

    def accuracy(self, theta) -> float:
        return float("nan")


class QuadraticTask(Task):
    """``f(theta; v) = 0.5 (theta - c_v)^T A_k (theta - c_v)`` with per-sample centres.

    Each device's sample centres average exactly to ``c_k``, so
    ``F_k(theta) = 0.5 (theta - c_k)^T A_k (theta - c_k) + const_k``. The
    curvature matrices share an eigenbasis and their weighted mean has
    eigenvalues spread evenly over ``[mu, L]``.
    """

    kind = "quadratic"

    def __init__(self, d: int, K: int, n: int = 50, mu: float = 0.5, L: float = 2.0,
                 heterogeneity: float = 0.0, curvature_spread: float = 0.0,
                 noise: float = 1.0, center_scale: float = 1.0, seed: int = 0):
        rng = substream(seed, TASK, 1)
        self.d, self.K = d, K
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        lam = np.linspace(mu, L, d) if d > 1 else np.array([L])
        r = rng.uniform(-1, 1, size=(K, d))
        r -= r.mean(axis=0)
        spread = curvature_spread * 0.9 / max(np.abs(r).max(), 1e-12)
        self.A = np.stack([Q @ np.diag(lam * (1 + spread * r[k])) @ Q.T for k in range(K)])
        self.A = 0.5 * (self.A + np.swapaxes(self.A, 1, 2))
        c = center_scale * rng.standard_normal(d)
        self.c = c + heterogeneity * rng.standard_normal((K, d))
        self.n = n
        xi = rng.standard_normal((K, n, d))
        xi -= xi.mean(axis=1, keepdims=True)
        self.samples = self.c[:, None, :] + noise * xi
        self.a = np.full(K, 1.0 / K)
        Abar = np.einsum("k,kij->ij", self.a, self.A)
        ev = np.linalg.eigvalsh(Abar)
        self.mu, self.L = float(ev[0]), float(ev[-1])
        self.theta_star = np.linalg.solve(Abar, np.einsum("k,kij,kj->i", self.a, self.A, self.c))
        self._const = np.array([0.5 * np.mean(np.einsum("ni,ij,nj->n", self.samples[k] - self.c[k], self.A[k],
                                                        self.samples[k] - self.c[k])) for k in range(K)])
        self.theta0 = np.zeros(d)
        self.F_star = self.loss(self.theta_star)
        self.F_star_exact = True

    def shard_size(self, k):
        return self.n

    def device_grad(self, k, theta, idx=None):
        centre = self.c[k] if idx is None else self.samples[k, idx].mean(axis=0)
        return self.A[k] @ (theta - centre)

    def device_loss(self, k, theta):
        r = theta - self.c[k]
        return float(0.5 * r @ self.A[k] @ r + self._const[k])


class LogisticTask(Task):
    """L2-regularized logistic regression with a bias term (``d - 1`` features).

    Devices draw features around their own mean shift, so shards are non-iid.
    """

    kind = "logistic"
    classification = True

    def __init__(self, d: int, K: int, n: int = 100, heterogeneity: float = 0.5, reg: float = 1e-2,
                 label_noise: float = 0.0, signal: float = 2.0, n_test: int = 2000, seed: int = 0):
        rng = substream(seed, TASK, 2)
        self.d, self.K, self.n, self.reg = d, K, n, reg
        p = d - 1
        w = rng.standard_normal(p) * signal / np.sqrt(p)
        b = 0.0
        shifts = heterogeneity * rng.standard_normal((K, p))

        def draw(m, shift):
            X = rng.standard_normal((m, p)) + shift
            prob = expit(X @ w + b)
            y = (rng.uniform(size=m) < prob).astype(float)
            if label_noise:
                flip = rng.uniform(size=m) < label_noise
                y[flip] = 1 - y[flip]
            return np.hstack([X, np.ones((m, 1))]), y

        self.X, self.y = zip(*(draw(n, shifts[k]) for k in range(K)))
        self.X, self.y = np.stack(self.X), np.stack(self.y)
        tests = [draw(n_test // K + 1, shifts[k]) for k in range(K)]
        self.X_test = np.vstack([t[0] for t in tests])
        self.y_test = np.concatenate([t[1] for t in tests])
        self.a = np.full(K, 1.0 / K)
        self.L = float(max(np.linalg.eigvalsh(self.X[k].T @ self.X[k] / n)[-1] for k in range(K)) / 4 + reg)
        self.mu = reg
        self.theta0 = np.zeros(d)
        res = optimize.minimize(self.loss, self.theta0, jac=self.grad, method="L-BFGS-B",
                                options={"maxiter": 10_000, "gtol": 1e-12, "ftol": 1e-15})
        self.theta_star = res.x
        self.F_star = float(res.fun)

    def shard_size(self, k):
        return self.n

    def device_grad(self, k, theta, idx=None):
        X, y = (self.X[k], self.y[k]) if idx is None else (self.X[k][idx], self.y[k][idx])
        return X.T @ (expit(X @ theta) - y) / len(y) + self.reg * theta

    def device_loss(self, k, theta):
        z = self.X[k] @ theta
        return float(np.mean(np.logaddexp(0, z) - self.y[k] * z) + 0.5 * self.reg * theta @ theta)

    def loss(self, theta):
        z = np.einsum("knd,d->kn", self.X, theta)
        per = np.mean(np.logaddexp(0, z) - self.y * z, axis=1)
        return float(self.a @ per + 0.5 * self.reg * theta @ theta)

    def grad(self, theta):
        z = np.einsum("knd,d->kn", self.X, theta)
        r = (expit(z) - self.y) / self.n
        return np.einsum("k,kn,knd->d", self.a, r, self.X) + self.reg * theta

    def accuracy(self, theta):
        return float(np.mean((self.X_test @ theta > 0) == (self.y_test > 0.5)))


def two_moons(m: int, noise: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Two interleaving half circles with Gaussian jitter; labels 0/1."""
    half = m // 2
    t0 = rng.uniform(0, np.pi, half)
    t1 = rng.uniform(0, np.pi, m - half)
    X = np.vstack([np.c_[np.cos(t0), np.sin(t0)], np.c_[1 - np.cos(t1), 0.5 - np.sin(t1)]])
    X += noise * rng.standard_normal(X.shape)
    y = np.r_[np.zeros(half), np.ones(m - half)]
    return X, y


class MLPTask(Task):
    """One-hidden-layer tanh network with a logistic output on two-moons data.

    Parameters are packed as ``[W1 (H x 2), b1 (H), w2 (H), b2]``.
    """

    kind = "mlp"
    classification = True

    def __init__(self, hidden: int = 16, K: int = 10, n: int = 100, noise: float = 0.15,
                 heterogeneity: float = 0.0, reg: float = 1e-3, n_test: int = 2000, seed: int = 0,
                 fstar_iters: int = 20_000):
        if hidden > 64:
            raise ValueError("hidden layer limited to 64 units")
        rng = substream(seed, TASK, 3)
        self.H, self.K, self.n, self.reg = hidden, K, n, reg
        self.d = 4 * hidden + 1
        Xs, ys = [], []
        for k in range(K):
            X, y = two_moons(n, noise, rng)
            X = (X - [0.5, 0.25]) / [1.0, 0.5]
            X = X + heterogeneity * rng.standard_normal(2)
            order = rng.permutation(n)
            Xs.append(X[order]), ys.append(y[order])
        self.X, self.y = np.stack(Xs), np.stack(ys)
        Xt, yt = two_moons(n_test, noise, rng)
        self.X_test, self.y_test = (Xt - [0.5, 0.25]) / [1.0, 0.5], yt
        self.a = np.full(K, 1.0 / K)
        self.theta0 = self._init(rng)
        self._Xall = self.X.reshape(-1, 2)
        self._yall = self.y.reshape(-1)
        self.theta_star = None
        self.F_star = self._estimate_fstar(fstar_iters)
        self.L = self._estimate_smoothness(rng)

    def _init(self, rng):
        H = self.H
        W1 = rng.standard_normal((H, 2)) * 1.0
        b1 = rng.standard_normal(H) * 0.5
        w2 = rng.standard_normal(H) / np.sqrt(H)
        return np.concatenate([W1.ravel(), b1, w2, [0.0]])

    def unpack(self, theta):
        H = self.H
        return theta[:2 * H].reshape(H, 2), theta[2 * H:3 * H], theta[3 * H:4 * H], theta[4 * H]

    def _loss_grad(self, theta, X, y):
        W1, b1, w2, b2 = self.unpack(theta)
        Z = np.tanh(X @ W1.T + b1)
        out = Z @ w2 + b2
        loss = np.mean(np.logaddexp(0, out) - y * out) + 0.5 * self.reg * theta @ theta
        g_out = (expit(out) - y) / len(y)
        g_w2 = Z.T @ g_out
        g_Z = np.outer(g_out, w2) * (1 - Z ** 2)
        g_W1 = g_Z.T @ X
        g_b1 = g_Z.sum(axis=0)
        g = np.concatenate([g_W1.ravel(), g_b1, g_w2, [g_out.sum()]]) + self.reg * theta
        return float(loss), g

    def shard_size(self, k):
        return self.n

    def device_grad(self, k, theta, idx=None):
        X, y = (self.X[k], self.y[k]) if idx is None else (self.X[k][idx], self.y[k][idx])
        return self._loss_grad(theta, X, y)[1]

    def device_loss(self, k, theta):
        return self._loss_grad(theta, self.X[k], self.y[k])[0]

    def loss(self, theta):
        # equal shards: the weighted mean is the pooled mean
        return self._loss_grad(theta, self._Xall, self._yall)[0]

    def grad(self, theta):
        return self._loss_grad(theta, self._Xall, self._yall)[1]

    def accuracy(self, theta):
        W1, b1, w2, b2 = self.unpack(theta)
        out = np.tanh(self.X_test @ W1.T + b1) @ w2 + b2
        return float(np.mean((out > 0) == (self.y_test > 0.5)))

    def _estimate_fstar(self, iters):
        res = optimize.minimize(lambda th: self._loss_grad(th, self._Xall, self._yall), self.theta0,
                                jac=True, method="L-BFGS-B",
                                options={"maxiter": iters, "gtol": 1e-10, "ftol": 1e-15})
        self.theta_fit = res.x
        return float(res.fun)

    def _estimate_smoothness(self, rng, n_points: int = 6, iters: int = 50) -> float:
        """Largest Hessian eigenvalue magnitude seen on the path from init to the fitted model.

        Power iteration on finite-difference Hessian-vector products of every
        device objective; the maximum is inflated by 25 % as a safety margin.
        """
        best = 0.0
        for s in np.linspace(0, 1, n_points):
            th = (1 - s) * self.theta0 + s * self.theta_fit
            for k in range(self.K):
                v = rng.standard_normal(self.d)
                v /= np.linalg.norm(v)
                lam = 0.0
                for _ in range(iters):
                    eps = 1e-5
                    hv = (self.device_grad(k, th + eps * v) - self.device_grad(k, th - eps * v)) / (2 * eps)
                    lam = float(np.linalg.norm(hv))
                    if lam == 0:
                        break
                    v = hv / lam
                best = max(best, lam)
        return 1.25 * best


def build_task(cfg, K: int) -> Task:
    """Instantiate a task from a :class:`cafl.config.TaskConfig`."""
    if cfg.kind == "quadratic":
        return QuadraticTask(d=cfg.d, K=K, n=cfg.samples_per_device, mu=cfg.mu, L=cfg.L,
                             heterogeneity=cfg.heterogeneity, curvature_spread=cfg.curvature_spread,
                             noise=cfg.noise, center_scale=cfg.center_scale, seed=cfg.data_seed)
    if cfg.kind == "logistic":
        return LogisticTask(d=cfg.d, K=K, n=cfg.samples_per_device, heterogeneity=cfg.heterogeneity,
                            reg=cfg.reg, label_noise=cfg.label_noise, signal=cfg.signal,
                            seed=cfg.data_seed)
    if cfg.kind == "mlp":
        return MLPTask(hidden=cfg.hidden, K=K, n=cfg.samples_per_device, noise=cfg.noise,
                       heterogeneity=cfg.heterogeneity, reg=cfg.reg, seed=cfg.data_seed)
    raise ValueError(f"unknown task kind {cfg.kind!r}")
