"""White-box CRATE encoder-decoder in numpy, with an exact backward pass.

Features are kept as ``[batch, h, N]`` stacks (token dimension ``h`` by
token count ``N``). Each block applies one multi-head subspace
self-attention (MSSA) compression step followed by one unrolled ISTA
sparsification step.

The road is cut into ``N = cells / patch`` tokens. The FC layers come in two
layouts. ``dense`` (default) is a full affine map between the flattened
window and the ``h x N`` feature map, and likewise from the features to the
``[lanes, cells, 2]`` output. ``patch`` maps each patch of contiguous cells
to its own token with shared weights plus a per-token bias, and each token
back to its patch.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractError, NumericError
from .rco import EMPTY_SPEED, RCOFrame, RCOWindow

ISTA_VARIANTS = ("printed", "residual")
FC_LAYOUTS = ("patch", "dense")


# --------------------------------------------------------------------------
# coding rate


def coding_rate(Z: np.ndarray, eps: float) -> np.ndarray:
    """``0.5 * logdet(I + h/(N eps^2) Z Z^T)`` for ``Z`` of shape ``[..., h, N]``.

    Uses a Cholesky factorization of whichever Gram matrix is smaller; both
    have the same determinant and all eigenvalues >= 1, so no jitter is needed.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    Z = np.asarray(Z, dtype=np.float64)
    if not np.all(np.isfinite(Z)):
        raise NumericError("coding_rate got non-finite features")
    h, n = Z.shape[-2:]
    alpha = h / (n * eps ** 2)
    Zt = np.swapaxes(Z, -1, -2)
    gram = Z @ Zt if h <= n else Zt @ Z
    m = gram.shape[-1]
    L = np.linalg.cholesky(np.eye(m) + alpha * gram)
    return np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)


def coding_rate_reduction(Z: np.ndarray, U: np.ndarray, eps: float) -> np.ndarray:
    """``R(Z) - sum_k R(U_k^T Z)`` for bases ``U`` of shape ``[K, h, w]``."""
    U = np.asarray(U, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if U.ndim != 3 or U.shape[1] != Z.shape[-2]:
        raise ContractError(f"bases {U.shape} do not match features {Z.shape}")
    projected = np.swapaxes(U, -1, -2) @ Z[..., None, :, :]  # [..., K, w, N]
    return coding_rate(Z, eps) - coding_rate(projected, eps).sum(axis=-1)


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class CrateConfig:
    lanes: int = 1
    n_cells: int = 200
    k: int = 4
    patch: int = 10
    dim: int = 32
    heads: int = 4
    n_encoder: int = 6
    n_decoder: int = 4
    kappa: float = 0.1
    eta: float = 0.1
    lam: float = 0.1
    eps: Optional[float] = None  # None: sqrt(head_dim / n_tokens), making w/(N eps^2) = 1
    ista_variant: str = "printed"
    input_layout: str = "dense"
    output_layout: str = "dense"

    def __post_init__(self):
        if self.input_layout not in FC_LAYOUTS or self.output_layout not in FC_LAYOUTS:
            raise ContractError(f"FC layouts must be one of {FC_LAYOUTS}")
        if self.n_cells % self.patch:
            raise ContractError(f"n_cells={self.n_cells} not divisible by patch={self.patch}")
        if self.dim % self.heads:
            raise ContractError("dim must be divisible by heads")
        if self.ista_variant not in ISTA_VARIANTS:
            raise ContractError(f"unknown ista_variant {self.ista_variant!r}")

    @property
    def n_tokens(self) -> int:
        return self.n_cells // self.patch

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def in_features(self) -> int:
        """Fan-in of the input FC: one patch, or the whole window when dense."""
        cells = self.n_cells if self.input_layout == "dense" else self.patch
        return self.lanes * cells * 2 * self.k

    @property
    def out_features(self) -> int:
        """Outputs per token for ``patch``; the whole frame for ``dense``."""
        cells = self.n_cells if self.output_layout == "dense" else self.patch
        return self.lanes * cells * 2

    @property
    def block_eps(self) -> float:
        return self.eps if self.eps is not None else float(np.sqrt(self.head_dim / self.n_tokens))

    @property
    def n_blocks(self) -> int:
        return self.n_encoder + self.n_decoder

    def replace(self, **changes) -> "CrateConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class BlockHyper:
    kappa: float
    eta: float
    lam: float
    eps: float
    ista_variant: str = "printed"

    def __post_init__(self):
        if not (self.eps > 0 and self.eta > 0 and self.kappa >= 0):
            raise ContractError(f"invalid block hyperparameters {self}")


@dataclass(frozen=True)
class CrateBlockParams:
    """One block's bases ``U`` [K, h, w], dictionary ``D`` [h, h] and step sizes."""

    U: np.ndarray
    D: np.ndarray
    kappa: float = 0.1
    eta: float = 0.1
    lam: float = 0.1
    eps: float = 0.5
    ista_variant: str = "printed"


def _block_name(i: int, n_encoder: int) -> str:
    return f"encoder.{i}" if i < n_encoder else f"decoder.{i - n_encoder}"


@dataclass(eq=False)
class CrateParams:
    config: CrateConfig
    tensors: dict[str, np.ndarray]
    hyper: tuple[BlockHyper, ...] = field(default=())

    def __post_init__(self):
        if not self.hyper:
            c = self.config
            self.hyper = tuple(BlockHyper(c.kappa, c.eta, c.lam, c.block_eps, c.ista_variant)
                               for _ in range(c.n_blocks))
        expected = param_shapes(self.config)
        got = {k: v.shape for k, v in self.tensors.items()}
        if list(got) != list(expected) or any(got[k] != expected[k] for k in expected):
            raise ContractError(f"parameter shapes {got} do not match config {expected}")

    def block(self, i: int) -> CrateBlockParams:
        name = _block_name(i, self.config.n_encoder)
        h = self.hyper[i]
        return CrateBlockParams(self.tensors[f"{name}.U"], self.tensors[f"{name}.D"],
                                h.kappa, h.eta, h.lam, h.eps, h.ista_variant)

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self) -> "CrateParams":
        return CrateParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.hyper)

    def astype(self, dtype) -> "CrateParams":
        return CrateParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()},
                           self.hyper)


def param_shapes(cfg: CrateConfig) -> dict[str, tuple[int, ...]]:
    h, n = cfg.dim, cfg.n_tokens
    rows = h * n if cfg.input_layout == "dense" else h
    shapes = {"input_fc.W": (rows, cfg.in_features), "input_fc.b": (h, n)}
    for i in range(cfg.n_blocks):
        name = _block_name(i, cfg.n_encoder)
        shapes[f"{name}.U"] = (cfg.heads, h, cfg.head_dim)
        shapes[f"{name}.D"] = (h, h)
    if cfg.output_layout == "dense":
        shapes["output_fc.W"] = (cfg.out_features, h * n)
        shapes["output_fc.b"] = (cfg.out_features,)
    else:
        shapes["output_fc.W"] = (cfg.out_features, h)
        shapes["output_fc.b"] = (cfg.out_features, n)
    return shapes


def _orthonormal(rng, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_params(cfg: CrateConfig, seed: int = 0, dtype=np.float32,
                occ_prior: Optional[float] = 0.05) -> CrateParams:
    """Orthonormal bases and dictionaries, fan-in scaled uniform FC layers.

    With ``occ_prior`` set, the occupancy-logit biases start at that prior's
    log-odds instead of random values.
    """
    rng = np.random.default_rng(seed)
    h, K, w = cfg.dim, cfg.heads, cfg.head_dim
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("input_fc"):
            bound = 1.0 / np.sqrt(cfg.in_features)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name.startswith("output_fc"):
            bound = 1.0 / np.sqrt(h * cfg.n_tokens if cfg.output_layout == "dense" else h)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".U"):
            q = _orthonormal(rng, h)
            tensors[name] = q.reshape(h, K, w).transpose(1, 0, 2)
        else:
            tensors[name] = _orthonormal(rng, h)
    if occ_prior is not None:
        tensors["output_fc.b"][0::2] = np.log(occ_prior / (1.0 - occ_prior))
    return CrateParams(cfg, {k: np.ascontiguousarray(v, dtype=dtype) for k, v in tensors.items()})


# --------------------------------------------------------------------------
# block operators


def _softmax_cols(G: np.ndarray) -> np.ndarray:
    e = np.exp(G - G.max(axis=-2, keepdims=True))
    return e / e.sum(axis=-2, keepdims=True)


def ssa(Z: np.ndarray, U_k: np.ndarray) -> np.ndarray:
    """Subspace self-attention ``A softmax(A^T A)`` with ``A = U_k^T Z`` (column softmax)."""
    A = U_k.T @ Z
    return A @ _softmax_cols(A.T @ A)


def _mssa_scale(p: CrateBlockParams, n_tokens: int) -> float:
    return p.U.shape[-1] / (n_tokens * p.eps ** 2)


def mssa_step(Z: np.ndarray, p: CrateBlockParams) -> np.ndarray:
    """Compression half-step ``(1 - c kappa) Z + c kappa MSSA(Z)`` with ``c = w/(N eps^2)``."""
    Z = np.asarray(Z)
    if Z.shape[-2] != p.U.shape[1]:
        raise ContractError(f"features {Z.shape} do not match bases {p.U.shape}")
    c = _mssa_scale(p, Z.shape[-1])
    heads = [U_k @ ssa(Z, U_k) for U_k in p.U]
    mssa = c * np.sum(heads, axis=0)
    return (1.0 - c * p.kappa) * Z + c * p.kappa * mssa


def ista_step(Z_half: np.ndarray, p: CrateBlockParams,
              Z_prev: Optional[np.ndarray] = None) -> np.ndarray:
    """One non-negative proximal step against dictionary ``D``.

    ``printed``:  ReLU(Z_half - eta D^T (D Z_half - Z_half) - eta lam)
    ``residual``: ReLU(Z_prev - eta D^T (D Z_prev - Z_half) - eta lam), starting
    the proximal step from the block input instead of the compressed features.
    """
    D = p.D
    if D.ndim != 2 or D.shape[0] != D.shape[1] or D.shape[0] != Z_half.shape[-2]:
        raise ContractError(f"dictionary {D.shape} does not match features {Z_half.shape}")
    start = Z_half
    if p.ista_variant == "residual":
        if Z_prev is None:
            raise ContractError("residual ISTA needs the block input")
        start = Z_prev
    pre = start - p.eta * (D.T @ (D @ start - Z_half)) - p.eta * p.lam
    return np.maximum(pre, 0.0)


def crate_block(Z: np.ndarray, p: CrateBlockParams) -> np.ndarray:
    return ista_step(mssa_step(Z, p), p, Z_prev=Z)


# --------------------------------------------------------------------------
# batched forward / backward


def _flat_bases(U: np.ndarray) -> np.ndarray:
    """``[K, h, w]`` -> ``[h, K*w]``, the heads' bases side by side."""
    K, h, w = U.shape
    return U.transpose(1, 0, 2).reshape(h, K * w)


def _batch_outer(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """``sum_b X[b] @ Y[b].T`` as one matmul."""
    return np.swapaxes(X, 0, 1).reshape(X.shape[1], -1) @ np.swapaxes(Y, 0, 1).reshape(Y.shape[1], -1).T


def _block_forward(Z, p: CrateBlockParams):
    n = Z.shape[-1]
    c = _mssa_scale(p, n)
    K, h, w = p.U.shape
    B = Z.shape[0]
    Uf = _flat_bases(p.U)                              # [h, K*w]
    A = (Uf.T @ Z).reshape(B, K, w, n)                 # [B, K, w, N]
    S = _softmax_cols(np.swapaxes(A, -1, -2) @ A)      # [B, K, N, N]
    Y = A @ S                                          # [B, K, w, N]
    M = c * (Uf @ Y.reshape(B, K * w, n))
    Zh = (1.0 - c * p.kappa) * Z + c * p.kappa * M
    start = Zh if p.ista_variant == "printed" else Z
    pre = start - p.eta * (p.D.T @ (p.D @ start - Zh)) - p.eta * p.lam
    out = np.maximum(pre, 0.0)
    return out, {"Z": Z, "A": A, "S": S, "Y": Y, "Zh": Zh, "mask": pre > 0}


def _block_backward(dout, cache, p: CrateBlockParams):
    Z, A, S, Y, Zh = cache["Z"], cache["A"], cache["S"], cache["Y"], cache["Zh"]
    n = Z.shape[-1]
    c = _mssa_scale(p, n)
    D, eta = p.D, p.eta
    G = dout * cache["mask"]
    DG = D @ G
    if p.ista_variant == "printed":
        dZh = G - eta * (D.T @ DG) + eta * DG
        dD = -eta * (D @ (Zh @ np.swapaxes(G, -1, -2) + G @ np.swapaxes(Zh, -1, -2))).sum(0)
        dZ = np.zeros_like(Z)
    else:
        dZh = eta * DG
        dD = -eta * (D @ (Z @ np.swapaxes(G, -1, -2) + G @ np.swapaxes(Z, -1, -2))).sum(0)
        dZ = G - eta * (D.T @ DG)
    dD = dD + eta * (Zh @ np.swapaxes(G, -1, -2)).sum(0)

    # MSSA half-step
    dZ = dZ + (1.0 - c * p.kappa) * dZh
    dM = c * p.kappa * dZh
    K, h, w = p.U.shape
    B = Z.shape[0]
    Uf = _flat_bases(p.U)
    dY = c * (Uf.T @ dM).reshape(B, K, w, n)                        # [B, K, w, N]
    dA = dY @ np.swapaxes(S, -1, -2)
    dS = np.swapaxes(A, -1, -2) @ dY
    dG = S * (dS - (S * dS).sum(axis=-2, keepdims=True))
    dA = dA + A @ (dG + np.swapaxes(dG, -1, -2))
    dA = dA.reshape(B, K * w, n)
    dUf = _batch_outer(dM, c * Y.reshape(B, K * w, n)) + _batch_outer(Z, dA)
    dU = dUf.reshape(h, K, w).transpose(1, 0, 2)
    dZ = dZ + Uf @ dA
    return dZ, dU, dD


def _patches(x: np.ndarray, cfg: CrateConfig) -> np.ndarray:
    """``[B, lanes, cells, C]`` -> ``[B, N, lanes*patch*C]``."""
    B, lanes, cells, C = x.shape
    x = x.reshape(B, lanes, cfg.n_tokens, cfg.patch, C).transpose(0, 2, 1, 3, 4)
    return x.reshape(B, cfg.n_tokens, lanes * cfg.patch * C)


def _unpatch(o: np.ndarray, cfg: CrateConfig) -> np.ndarray:
    """``[B, N, lanes*patch*2]`` -> ``[B, lanes, cells, 2]``."""
    B = o.shape[0]
    o = o.reshape(B, cfg.n_tokens, cfg.lanes, cfg.patch, 2).transpose(0, 2, 1, 3, 4)
    return o.reshape(B, cfg.lanes, cfg.n_cells, 2)


@dataclass(eq=False)
class ForwardCache:
    patches: np.ndarray
    features: list[np.ndarray]  # Z^0 (after input FC) then the output of every block
    blocks: list[dict]
    batched: bool


def _as_batch(window, cfg: CrateConfig, dtype) -> tuple[np.ndarray, bool]:
    x = window.tensor if isinstance(window, RCOWindow) else np.asarray(window)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    if x.shape[1:] != (cfg.lanes, cfg.n_cells, 2 * cfg.k):
        raise ContractError(f"window shape {x.shape[1:]} does not match "
                            f"{(cfg.lanes, cfg.n_cells, 2 * cfg.k)}")
    return x.astype(dtype, copy=False), batched


def forward(window, params: CrateParams) -> tuple[np.ndarray, ForwardCache]:
    """Raw output ``[..., lanes, cells, 2]`` (occupancy logit, speed) and the cache.

    ``window`` is an :class:`RCOWindow`, a ``[lanes, cells, 2k]`` array or a
    batch ``[B, lanes, cells, 2k]``.
    """
    cfg, T = params.config, params.tensors
    x, batched = _as_batch(window, cfg, params.dtype)
    if cfg.input_layout == "dense":
        P = x.reshape(len(x), -1)
        Z = (P @ T["input_fc.W"].T).reshape(len(x), cfg.dim, cfg.n_tokens) + T["input_fc.b"]
    else:
        P = _patches(x, cfg)
        Z = np.swapaxes(P @ T["input_fc.W"].T, -1, -2) + T["input_fc.b"]
    features = [Z]
    caches = []
    for i in range(cfg.n_blocks):
        Z, c = _block_forward(Z, params.block(i))
        features.append(Z)
        caches.append(c)
    if cfg.output_layout == "dense":
        o = Z.reshape(len(Z), -1) @ T["output_fc.W"].T + T["output_fc.b"]
        raw = o.reshape(len(Z), cfg.lanes, cfg.n_cells, 2)
    else:
        o = np.swapaxes(Z, -1, -2) @ T["output_fc.W"].T + T["output_fc.b"].T
        raw = _unpatch(o, cfg)
    cache = ForwardCache(P, features, caches, batched)
    return (raw if batched else raw[0]), cache


def backward(loss_grad: np.ndarray, cache: Optional[ForwardCache],
             params: CrateParams) -> dict[str, np.ndarray]:
    """Gradients of every tensor in ``params`` given ``dL/d raw``."""
    if cache is None or not cache.blocks and params.config.n_blocks:
        raise ContractError("backward needs the cache from forward")
    cfg, T = params.config, params.tensors
    g = np.asarray(loss_grad, dtype=params.dtype)
    if not cache.batched:
        g = g[None]
    B = g.shape[0]
    grads: dict[str, np.ndarray] = {}
    Zlast = cache.features[-1]
    if cfg.output_layout == "dense":
        dO = g.reshape(B, -1)
        grads["output_fc.W"] = dO.T @ Zlast.reshape(B, -1)
        grads["output_fc.b"] = dO.sum(0)
        dZ = (dO @ T["output_fc.W"]).reshape(Zlast.shape)
    else:
        dO = g.reshape(B, cfg.lanes, cfg.n_tokens, cfg.patch, 2).transpose(0, 2, 1, 3, 4)
        dO = dO.reshape(B, cfg.n_tokens, cfg.out_features)         # [B, N, out]
        grads["output_fc.W"] = _batch_outer(np.swapaxes(dO, -1, -2), Zlast)
        grads["output_fc.b"] = dO.sum(0).T
        dZ = np.swapaxes(dO @ T["output_fc.W"], -1, -2)             # [B, h, N]
    block_grads = {}
    for i in reversed(range(cfg.n_blocks)):
        dZ, dU, dD = _block_backward(dZ, cache.blocks[i], params.block(i))
        name = _block_name(i, cfg.n_encoder)
        block_grads[f"{name}.U"] = dU
        block_grads[f"{name}.D"] = dD
    if cfg.input_layout == "dense":
        grads["input_fc.W"] = dZ.reshape(B, -1).T @ cache.patches
    else:
        grads["input_fc.W"] = _batch_outer(dZ, np.swapaxes(cache.patches, -1, -2))
    grads["input_fc.b"] = dZ.sum(0)
    ordered = {}
    for name in T:
        ordered[name] = (grads.get(name) if name in grads else block_grads[name]).astype(
            params.dtype, copy=False)
    return ordered


# --------------------------------------------------------------------------
# decoding raw output


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def postprocess(raw: np.ndarray, d_e: int = 6, threshold: float = 0.5,
                anchors: Optional[RCOFrame] = None, cell_length: float = 1.0,
                timestamp: float = 0.0) -> RCOFrame:
    """Turn raw ``[lanes, cells, 2]`` output into a valid frame.

    Cells whose occupancy probability exceeds ``threshold`` are accepted in
    decreasing probability order, each suppressing the ``d_e`` cells on
    either side. Occupied cells of ``anchors`` (known CVs) are accepted first
    and keep their own speeds. Accepted speeds are clamped to [0, 1].
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise NumericError("non-finite network output")
    prob = sigmoid(raw[..., 0])
    score = prob
    speed = np.clip(raw[..., 1], 0.0, 1.0)
    lanes, cells = prob.shape
    occ = np.zeros((lanes, cells))
    spd = np.full((lanes, cells), EMPTY_SPEED)
    for lane in range(lanes):
        blocked = np.zeros(cells, dtype=bool)
        if anchors is not None:
            for c in np.flatnonzero(anchors.occ[lane] > 0.5):
                occ[lane, c] = 1.0
                spd[lane, c] = anchors.spd[lane, c]
                blocked[max(0, c - d_e):c + d_e + 1] = True
        order = np.argsort(-score[lane], kind="stable")
        for c in order:
            if score[lane, c] <= threshold:
                break
            if blocked[c]:
                continue
            occ[lane, c] = 1.0
            spd[lane, c] = speed[lane, c]
            blocked[max(0, c - d_e):c + d_e + 1] = True
    return RCOFrame(occ, spd, cell_length, timestamp)


# --------------------------------------------------------------------------
# checkpoint container

MAGIC = b"CRATECKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: CrateParams, extra: Optional[dict[str, np.ndarray]] = None,
                    meta: Optional[dict] = None) -> Path:
    """Header (magic, version, JSON shape table) then raw little-endian tensors."""
    path = Path(path)
    entries = [(name, arr) for name, arr in params.tensors.items()]
    entries += [(f"extra/{name}", np.asarray(arr)) for name, arr in (extra or {}).items()]
    table = []
    for name, arr in entries:
        if arr.dtype not in (np.float32, np.float64):
            raise ContractError(f"tensor {name} has unsupported dtype {arr.dtype}")
        table.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.replace(">", "<")})
    header = {
        "config": dataclasses.asdict(params.config),
        "hyper": [dataclasses.asdict(h) for h in params.hyper],
        "tensors": table,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for (_, arr), entry in zip(entries, table):
            fh.write(np.ascontiguousarray(arr, dtype=entry["dtype"]).tobytes())
    return path


def load_checkpoint(path) -> tuple[CrateParams, dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ContractError(f"{path} is not a checkpoint")
    version, n = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    offset = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[offset:offset + n])
    offset += n
    tensors, extra = {}, {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(entry["shape"]).copy()
        offset += count * dt.itemsize
        name = entry["name"]
        if name.startswith("extra/"):
            extra[name[len("extra/"):]] = arr
        else:
            tensors[name] = arr
    params = CrateParams(CrateConfig(**header["config"]), tensors,
                         tuple(BlockHyper(**h) for h in header["hyper"]))
    return params, extra, header["meta"]
