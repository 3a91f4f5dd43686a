"""The generative trajectory model: per-timestep spatial attention over map,
signal, and neighbor tokens; directional temporal attention with a learned
motion query; and an axis-aligned Gaussian displacement head.

Map tokens are static within an exemplar, so their key/value projections are
computed once per layer and broadcast across timesteps; the combined softmax
is arithmetically identical to attending over the full concatenated token
set.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import FEATURE_LAYOUT_VERSION, nn
from .pipeline import Dataset, DatasetManifest

LOG_2PI = math.log(2.0 * math.pi)
SIGMA_MIN = 1e-3
SIGMA_MAX = 10.0


class LayoutMismatch(ValueError):
    """Checkpoint and dataset/map disagree on the feature layout."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 2          # per attention block
    ffn_mult: int = 4
    dtype: str = "float32"


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    total_steps: int = 5000
    warmup_steps: int = 4000
    batch_size: int = 32
    seed: int = 0
    val_every: int = 0            # steps between validations; 0 = once per epoch
    scheduled_sampling: bool = False
    sampling_max_p: float = 0.3
    log_every: int = 200

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GaussianPrediction:
    mu_dx: float
    mu_dy: float
    sigma_dx: float
    sigma_dy: float


def displacement_targets(target: np.ndarray, dt: float) -> np.ndarray:
    """(…, 3) speed/sin/cos ground truth -> (…, 2) displacement per step."""
    s = target[..., 0]
    return np.stack([s * target[..., 2] * dt, s * target[..., 1] * dt], axis=-1)


def nll_values(mu: np.ndarray, sigma: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Per-step NLL of an axis-aligned 2D Gaussian at the true displacement."""
    z = (delta - mu) / sigma
    return (LOG_2PI + np.log(sigma[..., 0]) + np.log(sigma[..., 1])
            + 0.5 * (z[..., 0] ** 2 + z[..., 1] ** 2))


def nll_loss_reference(mu, sigma, target, dt) -> float:
    """Mean NLL over future steps, from ground-truth speed and heading."""
    delta = displacement_targets(np.asarray(target), dt)
    return float(np.mean(nll_values(np.asarray(mu), np.asarray(sigma), delta)))


class WorldModel:
    """Actor-centric generative model over one feature layout."""

    def __init__(self, manifest: DatasetManifest, config: ModelConfig = ModelConfig(),
                 seed: int = 0):
        self.manifest = manifest
        self.config = config
        self.dt = manifest.dt
        self.params = nn.ModelParams()
        self._np_dtype = np.float32 if config.dtype == "float32" else np.float64
        self._init_params(seed)
        d = config.d_model
        self._pe = np.stack([
            nn.positional_encoding(t, d, self._np_dtype)
            for t in range(manifest.H + manifest.F + 1)
        ])

    # -- parameters --

    def _init_params(self, seed: int):
        cfg = self.config
        m = self.manifest
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        d = cfg.d_model

        def w(name, fan_in, fan_out, bias=True):
            data = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
            self.params.add(name, data.astype(self._np_dtype))
            if bias:
                self.params.add(name + "_b", np.zeros(fan_out, dtype=self._np_dtype))

        def ln(name, dim):
            self.params.add(name + "_g", np.ones(dim, dtype=self._np_dtype))
            self.params.add(name + "_beta", np.zeros(dim, dtype=self._np_dtype))

        w("embed_actor", 6, d)
        w("embed_map", 6, d)
        w("embed_signal", 10, d)
        w("embed_neighbor", m.nbr_dim, d)
        for block in ("spat", "temp"):
            for i in range(cfg.layers):
                pre = f"{block}{i}_"
                ln(pre + "lnq", d)
                ln(pre + "lnkv", d)
                # attention projections are bias-free (layer norm precedes them)
                w(pre + "Wq", d, d, bias=False)
                w(pre + "Wk", d, d, bias=False)
                w(pre + "Wv", d, d, bias=False)
                w(pre + "Wo", d, d, bias=False)
                ln(pre + "lnf", d)
                w(pre + "ffn1", d, cfg.ffn_mult * d)
                w(pre + "ffn2", cfg.ffn_mult * d, d)
        self.params.add("motion_M", rng.normal(0.0, 1.0, size=(d,)).astype(self._np_dtype))
        w("head", d, 4)

    def _lin(self, x, name):
        bias = name + "_b"
        return nn.linear(x, self.params[name],
                         self.params[bias] if bias in self.params else None)

    def _ln(self, x, name):
        return nn.layer_norm(x, self.params[name + "_g"], self.params[name + "_beta"])

    # -- attention blocks --

    def _proj_kv_shared(self, block: str, layer: int,
                        tokens: nn.Tensor) -> tuple[nn.Tensor, nn.Tensor]:
        """K/V for keys shared by every query step.

        ``tokens``: (B, N, d). Returns K (B, h, dh, N) and V (B, h, N, dh);
        with this layout the query-step reduction in the backward pass runs
        inside the batched GEMM instead of materializing outer products.
        """
        cfg = self.config
        h, dh = cfg.heads, cfg.d_model // cfg.heads
        pre = f"{block}{layer}_"
        B, N = tokens.shape[0], tokens.shape[1]
        t_ln = self._ln(tokens, pre + "lnkv")
        K = self._lin(t_ln, pre + "Wk")
        V = self._lin(t_ln, pre + "Wv")
        Kh = nn.transpose(nn.reshape(K, (B, N, h, dh)), (0, 2, 3, 1))
        Vh = nn.transpose(nn.reshape(V, (B, N, h, dh)), (0, 2, 1, 3))
        return Kh, Vh

    def _proj_kv_step(self, block: str, layer: int,
                      tokens: nn.Tensor) -> tuple[nn.Tensor, nn.Tensor]:
        """K/V for keys private to each query step.

        ``tokens``: (B, T, N, d). Returns K (B, T, h, dh, N), V (B, T, h, N, dh).
        """
        cfg = self.config
        h, dh = cfg.heads, cfg.d_model // cfg.heads
        pre = f"{block}{layer}_"
        B, T, N = tokens.shape[0], tokens.shape[1], tokens.shape[2]
        t_ln = self._ln(tokens, pre + "lnkv")
        K = self._lin(t_ln, pre + "Wk")
        V = self._lin(t_ln, pre + "Wv")
        Kh = nn.transpose(nn.reshape(K, (B, T, N, h, dh)), (0, 1, 3, 4, 2))
        Vh = nn.transpose(nn.reshape(V, (B, T, N, h, dh)), (0, 1, 3, 2, 4))
        return Kh, Vh

    def _run_layers(self, block: str, q: nn.Tensor, groups_per_layer: list) -> nn.Tensor:
        """Pre-norm cross-attention + FFN layers over precomputed key groups.

        q: (B, T, d). ``groups_per_layer[i]`` lists ("shared", K, V, mask)
        with K (B,h,dh,N) / mask (B,N), or ("step", K, V, mask) with
        K (B,T,h,dh,N) / mask (B,T,N). The softmax spans the concatenated
        groups, exactly as if all keys formed one set.
        """
        cfg = self.config
        d, h = cfg.d_model, cfg.heads
        dh = d // h
        B, T = q.shape[0], q.shape[1]
        scale = 1.0 / math.sqrt(dh)
        for i in range(cfg.layers):
            pre = f"{block}{i}_"
            q_ln = self._ln(q, pre + "lnq")
            qp = self._lin(q_ln, pre + "Wq")
            qh = nn.transpose(nn.reshape(qp, (B, T, h, dh)), (0, 2, 1, 3))
            qh_step = None
            score_parts = []   # all (B, h, T, N)
            mask_parts = []
            v_parts = []
            for kind, Kh, Vh, mask in groups_per_layer[i]:
                N = Kh.shape[-1]
                if kind == "shared":
                    score_parts.append(nn.mul(nn.matmul(qh, Kh), scale))
                    mask_parts.append(np.broadcast_to(
                        mask[:, None, None, :], (B, h, T, N)))
                else:
                    if qh_step is None:
                        qh_step = nn.reshape(nn.transpose(qh, (0, 2, 1, 3)),
                                             (B, T, h, 1, dh))
                    s = nn.matmul(qh_step, Kh)           # (B, T, h, 1, N)
                    s = nn.transpose(nn.reshape(s, (B, T, h, N)), (0, 2, 1, 3))
                    score_parts.append(nn.mul(s, scale))
                    mask_parts.append(np.broadcast_to(
                        mask[:, None, :, :], (B, h, T, N)))
                v_parts.append((kind, Vh, N))
            scores = (score_parts[0] if len(score_parts) == 1
                      else nn.concat(score_parts, axis=-1))
            mask = np.concatenate(mask_parts, axis=-1)
            att = nn.softmax_masked(scores, mask)
            off = 0
            out = None
            for kind, Vh, n in v_parts:
                a = att if len(v_parts) == 1 else nn.narrow(att, -1, off, n)
                if kind == "shared":
                    piece = nn.matmul(a, Vh)             # (B, h, T, dh)
                else:
                    a4 = nn.reshape(nn.transpose(a, (0, 2, 1, 3)), (B, T, h, 1, n))
                    p5 = nn.matmul(a4, Vh)               # (B, T, h, 1, dh)
                    piece = nn.transpose(nn.reshape(p5, (B, T, h, dh)), (0, 2, 1, 3))
                out = piece if out is None else nn.add(out, piece)
                off += n
            out = nn.reshape(nn.transpose(out, (0, 2, 1, 3)), (B, T, d))
            q = nn.add(q, self._lin(out, pre + "Wo"))
            f_ln = self._ln(q, pre + "lnf")
            ff = self._lin(nn.relu(self._lin(f_ln, pre + "ffn1")), pre + "ffn2")
            q = nn.add(q, ff)
        return q

    def _block(self, block: str, q: nn.Tensor,
               static: Optional[nn.Tensor], static_mask: Optional[np.ndarray],
               dyn: Optional[nn.Tensor], dyn_mask: Optional[np.ndarray]) -> nn.Tensor:
        """Single-application form of :meth:`_run_layers` (projects K/V on
        the spot; the training forward caches projections instead).

        dyn: (B, T, Nd, d) with T matching q's step count.
        """
        groups = []
        for i in range(self.config.layers):
            layer_groups = []
            if static is not None:
                Kh, Vh = self._proj_kv_shared(block, i, static)
                layer_groups.append(("shared", Kh, Vh, static_mask))
            if dyn is not None and dyn.shape[2] > 0:
                Kh, Vh = self._proj_kv_step(block, i, dyn)
                layer_groups.append(("step", Kh, Vh, dyn_mask))
            groups.append(layer_groups)
        return self._run_layers(block, q, groups)

    # -- feature embedding --

    def _embed_map(self, batch: dict) -> tuple:
        m = self.manifest
        B = batch["actor_hist"].shape[0]
        map_tokens = self._lin(nn.Tensor(batch["map_ctx"].reshape(B, m.P * m.L, 6)),
                               "embed_map")
        return map_tokens, batch["map_mask"].reshape(B, m.P * m.L)

    def _embed_dyn(self, batch: dict, lo: int, length: int) -> tuple:
        """Per-timestep tokens (signals then neighbors) for window steps
        [lo, lo+length); lo counts from the start of the history."""
        H = self.manifest.H
        sig = batch["signal_ctx"][:, lo:lo + length]
        sig_mask = batch["signal_mask"][:, lo:lo + length]
        if lo + length <= H:
            nbr = batch["neighbor_hist"][:, lo:lo + length]
            nbr_mask = batch["neighbor_mask"][:, lo:lo + length]
        elif lo >= H:
            nbr = batch["future_neighbors"][:, lo - H:lo - H + length]
            nbr_mask = batch["future_neighbor_mask"][:, lo - H:lo - H + length]
        else:
            nbr = np.concatenate([batch["neighbor_hist"][:, lo:],
                                  batch["future_neighbors"][:, :lo + length - H]], axis=1)
            nbr_mask = np.concatenate([batch["neighbor_mask"][:, lo:],
                                       batch["future_neighbor_mask"][:, :lo + length - H]],
                                      axis=1)
        sig_e = self._lin(nn.Tensor(sig), "embed_signal")
        nbr_e = self._lin(nn.Tensor(nbr), "embed_neighbor")
        dyn = nn.concat([sig_e, nbr_e], axis=2)          # (B, length, S+K, d)
        dyn_mask = np.concatenate([sig_mask, nbr_mask], axis=2)
        return dyn, dyn_mask

    # -- forward --

    def forward(self, batch: dict, rng: Optional[np.random.Generator] = None,
                sample_p: float = 0.0) -> tuple:
        """Teacher-forced forward pass over a batch.

        Returns (mu, log_sigma) tensors of shape (B, F, 2). When
        ``sample_p`` > 0, each exemplar independently substitutes the model's
        own sampled motion for the refined embedding in the temporal history
        (scheduled sampling); this requires ``rng``.
        """
        m = self.manifest
        cfg = self.config
        B = batch["actor_hist"].shape[0]
        H, F = m.H, m.F
        d = cfg.d_model

        # embed tokens and project keys/values once per layer per time group
        map_tokens, map_mask = self._embed_map(batch)
        shared = [self._proj_kv_shared("spat", i, map_tokens)
                  for i in range(cfg.layers)]
        dyn_hist, mask_hist = self._embed_dyn(batch, 0, H)
        hist_kv = [self._proj_kv_step("spat", i, dyn_hist)
                   for i in range(cfg.layers)]
        fut = [self._embed_dyn(batch, H + k, 1) for k in range(F)]
        fut_kv = [[self._proj_kv_step("spat", i, fut[k][0])
                   for i in range(cfg.layers)] for k in range(F)]

        def spat_groups(step_kv, step_mask) -> list:
            return [[("shared", shared[i][0], shared[i][1], map_mask),
                     ("step", step_kv[i][0], step_kv[i][1], step_mask)]
                    for i in range(cfg.layers)]

        actor_q = self._lin(nn.Tensor(batch["actor_hist"]), "embed_actor")
        se_hist = self._run_layers("spat", actor_q, spat_groups(hist_kv, mask_hist))

        pe = self._pe
        # temporal key/value caches grow by one entry per predicted step
        keys0 = nn.add(se_hist, pe[None, :H, :])
        temp_K = []
        temp_V = []
        for i in range(cfg.layers):
            Kh, Vh = self._proj_kv_shared("temp", i, keys0)
            temp_K.append(Kh)
            temp_V.append(Vh)

        mu_steps = []
        ls_steps = []
        use_sampling = sample_p > 0.0 and rng is not None
        if use_sampling:
            substitute = rng.random(size=(B, F)) < sample_p
            # center-relative positions; polar re-encoding needs no map center
            positions = _positions_from_hist(batch["actor_hist"])
        M = self.params["motion_M"]
        for k in range(F):
            t_idx = H + k
            tq = nn.expand(nn.reshape(nn.add(M, pe[t_idx]), (1, 1, d)), (B, 1, d))
            ones = np.ones((B, H + k), dtype=bool)
            temp_groups = [[("shared", temp_K[i], temp_V[i], ones)]
                           for i in range(cfg.layers)]
            pq = self._run_layers("temp", tq, temp_groups)
            se_k = self._run_layers("spat", pq, spat_groups(fut_kv[k], fut[k][1]))
            head = self._lin(se_k, "head")               # (B, 1, 4)
            mu_k = nn.narrow(head, 2, 0, 2)
            ls_k = nn.clamp(nn.narrow(head, 2, 2, 2),
                            math.log(SIGMA_MIN), math.log(SIGMA_MAX))
            mu_steps.append(mu_k)
            ls_steps.append(ls_k)
            next_key = se_k
            if use_sampling:
                sampled = mu_k.data[:, 0, :] + np.exp(ls_k.data[:, 0, :]) * rng.normal(size=(B, 2))
                positions = positions + sampled
                feats = _polar_state(positions, sampled, self.dt, self._np_dtype)
                alt_q = self._lin(nn.Tensor(feats[:, None, :]), "embed_actor")
                alt_se = self._run_layers("spat", alt_q, spat_groups(fut_kv[k], fut[k][1]))
                mix = substitute[:, k][:, None, None]
                next_key = nn.add(nn.mul(alt_se, mix.astype(self._np_dtype)),
                                  nn.mul(se_k, (~mix).astype(self._np_dtype)))
            if k + 1 < F:
                new_key = nn.add(next_key, pe[None, t_idx:t_idx + 1, :])
                for i in range(cfg.layers):
                    Kn, Vn = self._proj_kv_shared("temp", i, new_key)
                    temp_K[i] = nn.concat([temp_K[i], Kn], axis=-1)
                    temp_V[i] = nn.concat([temp_V[i], Vn], axis=-2)

        mu = nn.concat(mu_steps, axis=1)                 # (B, F, 2)
        log_sigma = nn.concat(ls_steps, axis=1)
        return mu, log_sigma

    def loss(self, batch: dict, rng=None, sample_p: float = 0.0) -> nn.Tensor:
        """Mean NLL of the predicted displacement Gaussians over all future
        steps and exemplars."""
        mu, log_sigma = self.forward(batch, rng=rng, sample_p=sample_p)
        delta = displacement_targets(batch["target"], self.dt).astype(self._np_dtype)
        diff = nn.sub(nn.Tensor(delta), mu)
        inv_var = nn.exp(nn.mul(log_sigma, -2.0))
        quad = nn.mul(nn.mul(nn.square(diff), inv_var), 0.5)
        per_step = nn.add(
            nn.add(nn.sum_last(quad), nn.sum_last(log_sigma)), LOG_2PI)
        return nn.mean_fsum(per_step)

    def predict(self, batch: dict) -> tuple[np.ndarray, np.ndarray]:
        """(mu, sigma) arrays of shape (B, F, 2), no graph recorded."""
        with nn.no_grad():
            mu, log_sigma = self.forward(batch)
        return mu.data.copy(), np.exp(log_sigma.data)

    # -- incremental API for closed-loop rollout --

    def encode_step(self, actor_feats: np.ndarray, map_tokens_np: np.ndarray,
                    map_mask: np.ndarray, dyn_feats: tuple,
                    queries: Optional[np.ndarray] = None) -> np.ndarray:
        """Spatial embedding for n actors at one instant.

        ``actor_feats``: (n, 6) polar states (the attention queries);
        ``dyn_feats``: (signal (n, S, 10), signal mask, neighbors (n, K, nd),
        neighbor mask). Returns (n, d) embeddings.
        """
        sig, sig_mask, nbr, nbr_mask = dyn_feats
        with nn.no_grad():
            if queries is None:
                q = self._lin(nn.Tensor(actor_feats[:, None, :]), "embed_actor")
            else:
                q = nn.Tensor(queries[:, None, :])
            sig_e = self._lin(nn.Tensor(sig[:, None]), "embed_signal")
            nbr_e = self._lin(nn.Tensor(nbr[:, None]), "embed_neighbor")
            dyn = nn.concat([sig_e, nbr_e], axis=2)
            dyn_mask = np.concatenate([sig_mask[:, None], nbr_mask[:, None]], axis=2)
            se = self._block("spat", q, nn.Tensor(map_tokens_np), map_mask,
                             dyn, dyn_mask)
        return se.data[:, 0, :]

    def embed_map_tokens(self, map_ctx: np.ndarray) -> np.ndarray:
        """(n, P*L, d) map token embeddings from raw (n, P, L, 6) context."""
        n = map_ctx.shape[0]
        with nn.no_grad():
            t = self._lin(nn.Tensor(map_ctx.reshape(n, -1, 6)), "embed_map")
        return t.data

    def predict_from_buffer(self, se_buffer: np.ndarray, map_tokens_np, map_mask,
                            dyn_feats) -> tuple[np.ndarray, np.ndarray]:
        """One-step-ahead Gaussian for n actors given their last H spatial
        embeddings. Returns (mu (n,2), sigma (n,2))."""
        n, H, d = se_buffer.shape
        with nn.no_grad():
            keys = nn.Tensor(se_buffer + self._pe[None, :H, :])
            tq = nn.reshape(nn.add(self.params["motion_M"], self._pe[H]), (1, 1, d))
            tq = nn.expand(tq, (n, 1, d))
            pq = self._block("temp", tq, keys, np.ones((n, H), dtype=bool),
                             None, None)
            sig, sig_mask, nbr, nbr_mask = dyn_feats
            sig_e = self._lin(nn.Tensor(sig[:, None]), "embed_signal")
            nbr_e = self._lin(nn.Tensor(nbr[:, None]), "embed_neighbor")
            dyn = nn.concat([sig_e, nbr_e], axis=2)
            dyn_mask = np.concatenate([sig_mask[:, None], nbr_mask[:, None]], axis=2)
            se = self._block("spat", pq, nn.Tensor(map_tokens_np), map_mask,
                             dyn, dyn_mask)
            head = self._lin(se, "head").data[:, 0, :]
        mu = head[:, :2]
        sigma = np.exp(np.clip(head[:, 2:], math.log(SIGMA_MIN), math.log(SIGMA_MAX)))
        return mu, sigma

    # -- persistence --

    def layout_meta(self) -> dict:
        m = self.manifest
        return {
            "layout_version": m.layout_version,
            "H": m.H, "F": m.F, "K_n": m.K_n, "P": m.P, "L": m.L, "S": m.S,
            "nbr_dim": m.nbr_dim, "dt": m.dt, "rear_bumper": m.rear_bumper,
        }

    def save(self, path, opt: Optional[nn.OptimizerState] = None,
             extra_meta: Optional[dict] = None) -> None:
        meta = {
            "model_config": asdict(self.config),
            "manifest": self.manifest.to_dict(),
            "manifest_hash": manifest_hash(self.manifest),
            "layout": self.layout_meta(),
        }
        if extra_meta:
            meta.update(extra_meta)
        nn.save_checkpoint(path, self.params, meta, opt)

    @classmethod
    def load(cls, path) -> tuple["WorldModel", dict, Optional[dict]]:
        arrays, meta, opt_state = nn.load_checkpoint(path)
        manifest = DatasetManifest.from_dict(meta["manifest"])
        model = cls(manifest, ModelConfig(**meta["model_config"]))
        model.params.load_state(arrays)
        return model, meta, opt_state


def manifest_hash(m: DatasetManifest) -> str:
    d = m.to_dict()
    d.pop("count", None)
    d.pop("source_logs", None)
    d.pop("splits", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _positions_from_hist(actor_hist: np.ndarray) -> np.ndarray:
    last = actor_hist[:, -1, :]
    x = last[:, 0] * last[:, 2]
    y = last[:, 0] * last[:, 1]
    return np.stack([x, y], axis=1)


def _polar_state(positions: np.ndarray, delta: np.ndarray, dt: float,
                 dtype) -> np.ndarray:
    dx = positions[:, 0]
    dy = positions[:, 1]
    r = np.hypot(dx, dy)
    safe = np.where(r > 0, r, 1.0)
    st = np.where(r > 0, dy / safe, 0.0)
    ct = np.where(r > 0, dx / safe, 1.0)
    speed = np.hypot(delta[:, 0], delta[:, 1]) / dt
    norm = np.hypot(delta[:, 0], delta[:, 1])
    ok = norm > 1e-9
    sa = np.where(ok, delta[:, 1] / np.where(ok, norm, 1.0), 0.0)
    ca = np.where(ok, delta[:, 0] / np.where(ok, norm, 1.0), 1.0)
    return np.stack([r, st, ct, speed, sa, ca], axis=1).astype(dtype)


# --- batching and training ---------------------------------------------------------


def make_batch(ds: Dataset, indices: np.ndarray) -> dict:
    """Assemble model input arrays for the given exemplar rows."""
    lay = ds.layout
    rows = np.asarray(ds.records[indices], dtype=np.float32)
    m = ds.manifest
    static = lay.view(rows, "signal_static")[:, None, :, :]     # (B,1,S,6)
    onehot = lay.view(rows, "signal_onehot")                    # (B,H+F,S,4)
    T = onehot.shape[1]
    signal_ctx = np.concatenate(
        [np.broadcast_to(static, (rows.shape[0], T, m.S, 6)), onehot], axis=-1)
    return {
        "actor_hist": lay.view(rows, "actor_hist"),
        "neighbor_hist": lay.view(rows, "neighbor_hist"),
        "neighbor_mask": lay.view(rows, "neighbor_mask") > 0.5,
        "future_neighbors": lay.view(rows, "future_neighbors"),
        "future_neighbor_mask": lay.view(rows, "future_neighbor_mask") > 0.5,
        "map_ctx": lay.view(rows, "map_ctx"),
        "map_mask": lay.view(rows, "map_mask") > 0.5,
        "signal_ctx": np.ascontiguousarray(signal_ctx),
        "signal_mask": lay.view(rows, "signal_mask") > 0.5,
        "target": lay.view(rows, "target"),
    }


def open_loop_windows(model: WorldModel, ds: Dataset, indices: np.ndarray,
                      batch_size: int = 256) -> dict:
    """Teacher-forced predictions as position windows for metric evaluation.

    Positions are relative to each window's anchor (the anchor cancels out of
    displacement errors). Returns pred/truth positions and the Gaussians.
    """
    F = model.manifest.F
    n = len(indices)
    pred = np.zeros((n, F, 2))
    truth = np.zeros((n, F, 2))
    mu_all = np.zeros((n, F, 2))
    sigma_all = np.zeros((n, F, 2))
    delta_all = np.zeros((n, F, 2))
    for lo in range(0, n, batch_size):
        sel = indices[lo:lo + batch_size]
        batch = make_batch(ds, sel)
        mu, sigma = model.predict(batch)
        delta = displacement_targets(batch["target"], model.dt)
        pred[lo:lo + len(sel)] = np.cumsum(mu, axis=1)
        truth[lo:lo + len(sel)] = np.cumsum(delta, axis=1)
        mu_all[lo:lo + len(sel)] = mu
        sigma_all[lo:lo + len(sel)] = sigma
        delta_all[lo:lo + len(sel)] = delta
    return {"pred": pred, "truth": truth, "mu": mu_all, "sigma": sigma_all,
            "delta": delta_all}


def evaluate(model: WorldModel, ds: Dataset, indices: np.ndarray,
             batch_size: int = 256, max_windows: int = 4096) -> dict:
    if len(indices) > max_windows:
        indices = indices[:: max(1, len(indices) // max_windows)][:max_windows]
    w = open_loop_windows(model, ds, indices, batch_size)
    err = np.linalg.norm(w["pred"] - w["truth"], axis=-1)
    nll = nll_values(w["mu"], w["sigma"], w["delta"])
    return {"ade": float(err.mean()), "fde": float(err[:, -1].mean()),
            "nll": float(nll.mean()), "count": len(indices)}


@dataclass
class TrainResult:
    checkpoint_path: str
    best_val: dict
    history: list
    steps: int
    wall_seconds: float


def train(ds: Dataset, cfg: TrainConfig, out_path,
          model_config: ModelConfig = ModelConfig(),
          resume_from: Optional[str] = None,
          progress: Optional[callable] = None) -> TrainResult:
    """Mini-batch Adam training with warmup + cosine decay.

    The checkpoint with the best validation NLL is kept at ``out_path``;
    training history (per-epoch validation metrics) is returned. Fully
    deterministic for a fixed seed.
    """
    t0 = time.perf_counter()
    manifest = ds.manifest
    if resume_from is not None:
        model, meta, opt_state = WorldModel.load(resume_from)
        if model.manifest.layout_key() != manifest.layout_key():
            raise LayoutMismatch("resume checkpoint layout differs from dataset")
        opt = nn.OptimizerState(
            base_lr=cfg.base_lr, warmup_steps=cfg.warmup_steps,
            total_steps=cfg.total_steps)
        if opt_state:
            opt.step = opt_state["step"]
            opt.m = opt_state["m"]
            opt.v = opt_state["v"]
    else:
        model = WorldModel(manifest, model_config, seed=cfg.seed)
        opt = nn.OptimizerState(base_lr=cfg.base_lr, warmup_steps=cfg.warmup_steps,
                                total_steps=cfg.total_steps)

    ss = np.random.SeedSequence(cfg.seed)
    shuffle_rng, sample_rng = [np.random.Generator(np.random.Philox(k))
                               for k in ss.spawn(2)]

    train_idx = ds.split_indices("train")
    val_idx = ds.split_indices("val")
    if len(train_idx) == 0:
        train_idx = np.arange(len(ds))
    steps_per_epoch = max(1, len(train_idx) // cfg.batch_size)
    val_every = cfg.val_every or steps_per_epoch

    history = []
    best = {"nll": math.inf}
    best_saved = False
    step0 = opt.step
    order = None
    pos = 0
    for step in range(step0, cfg.total_steps):
        if order is None or pos + cfg.batch_size > len(order):
            order = shuffle_rng.permutation(len(train_idx))
            pos = 0
        sel = train_idx[order[pos:pos + cfg.batch_size]]
        pos += cfg.batch_size
        batch = make_batch(ds, sel)
        model.params.zero_grads()
        p_sched = 0.0
        if cfg.scheduled_sampling and cfg.total_steps > 0:
            p_sched = cfg.sampling_max_p * (step / cfg.total_steps)
        loss = model.loss(batch, rng=sample_rng, sample_p=p_sched)
        nn.backward(loss)
        lr = nn.adam_step(model.params, opt)
        if progress and cfg.log_every and (step + 1) % cfg.log_every == 0:
            progress({"step": step + 1, "loss": float(loss.data), "lr": lr})
        if (step + 1) % val_every == 0 or step + 1 == cfg.total_steps:
            eval_idx = val_idx if len(val_idx) else train_idx
            metrics = evaluate(model, ds, eval_idx)
            metrics["step"] = step + 1
            metrics["train_loss"] = float(loss.data)
            history.append(metrics)
            if progress:
                progress(metrics)
            if metrics["nll"] < best["nll"]:
                best = metrics
                model.save(out_path, opt, extra_meta={
                    "train_config": cfg.to_dict(), "best_val": metrics,
                    "history": history})
                best_saved = True
    if not best_saved:
        model.save(out_path, opt, extra_meta={"train_config": cfg.to_dict(),
                                              "best_val": best,
                                              "history": history})
    return TrainResult(checkpoint_path=str(out_path), best_val=best,
                       history=history, steps=opt.step,
                       wall_seconds=time.perf_counter() - t0)
