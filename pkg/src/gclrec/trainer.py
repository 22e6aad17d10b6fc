"""Joint mini-batch optimization: configuration schema, Adam, the epoch
loop over shuffled positives, periodic ranking evaluation, and early
stopping on Recall@20."""

from dataclasses import dataclass, field, fields

import numpy as np

from . import diffcore as dc
from . import losses as ls
from .dataset import DataError
from .diffcore import DiffError, SparseOperator, Tape
from .graphs import build_graph
from .metrics import alignment_uniformity, rank_topk, topk_metrics
from .model import NoiseSettings, encode, init_params, reconstruct

__all__ = [
    "ConfigError",
    "TrainConfig",
    "AdamState",
    "adam_step",
    "TrainContext",
    "build_context",
    "train_epoch",
    "evaluate_model",
    "FitResult",
    "fit",
    "HISTORY_CSV_HEADER",
]

HISTORY_CSV_HEADER = ("epoch,rec,cl,recon,ddl,reg,total,"
                      "recall20,ndcg20")


class ConfigError(ValueError):
    """Unknown key, unparseable value, or invalid setting combination."""


def _parse_bool(text):
    if text in ("true", "True", "1"):
        return True
    if text in ("false", "False", "0"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


@dataclass
class TrainConfig:
    """Every tunable of a run, addressable by dotted config keys."""

    d: int = 64
    h: int = 64
    L: int = 3
    gamma: float = 3.0
    tau: float = 0.2
    lambda_: float = 1.0
    learning_rate: float = 0.001
    batch_size: int = 2048
    reg_coeff: float = 0.0001
    epochs_max: int = 500
    patience: int = 10
    eval_interval: int = 5
    seed: int = 42
    folds: int = 5
    neg_per_pos: int = 1
    data_path: str = ""
    noise_mode: str = "generative"
    noise_distribution: str = "gaussian"
    noise_scale: str = "variance"
    noise_s_fixed: float = 0.1
    ddl: str = "kl"
    kl_formula: str = "standard"
    mmd_bandwidth: float = 0.0
    complement_enabled: bool = True
    filter_enabled: bool = True
    cl_view_a: str = "avg"
    cl_view_b: str = "1"
    cl_normalize: bool = True
    eval_noise: str = "none"
    diag_uniformity: str = "pairwise"

    # dotted config key -> (field name, parser)
    KEYS = {
        "d": ("d", int),
        "h": ("h", int),
        "L": ("L", int),
        "gamma": ("gamma", float),
        "tau": ("tau", float),
        "lambda": ("lambda_", float),
        "learning_rate": ("learning_rate", float),
        "batch_size": ("batch_size", int),
        "reg_coeff": ("reg_coeff", float),
        "epochs_max": ("epochs_max", int),
        "patience": ("patience", int),
        "eval_interval": ("eval_interval", int),
        "seed": ("seed", int),
        "folds": ("folds", int),
        "neg_per_pos": ("neg_per_pos", int),
        "data.path": ("data_path", str),
        "noise.mode": ("noise_mode", str),
        "noise.distribution": ("noise_distribution", str),
        "noise.scale": ("noise_scale", str),
        "noise.s_fixed": ("noise_s_fixed", float),
        "ddl": ("ddl", str),
        "kl.formula": ("kl_formula", str),
        "mmd.bandwidth": ("mmd_bandwidth", float),
        "complement.enabled": ("complement_enabled", _parse_bool),
        "filter.enabled": ("filter_enabled", _parse_bool),
        "cl.view_a": ("cl_view_a", str),
        "cl.view_b": ("cl_view_b", str),
        "cl.normalize": ("cl_normalize", _parse_bool),
        "eval.noise": ("eval_noise", str),
        "diag.uniformity": ("diag_uniformity", str),
    }

    @classmethod
    def from_strings(cls, table):
        """Build from dotted-key -> string-value pairs, e.g. a parsed
        config file.  Unknown keys raise ConfigError naming the key."""
        cfg = cls()
        cfg.apply_strings(table)
        return cfg

    def apply_strings(self, table):
        for key, raw in table.items():
            if key not in self.KEYS:
                raise ConfigError(f"unknown config key: {key}")
            name, parse = self.KEYS[key]
            try:
                setattr(self, name, parse(raw))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        self.validate()
        return self

    def to_strings(self):
        """Dotted-key -> string-value table; parsing it back is identity."""
        out = {}
        for key, (name, _) in self.KEYS.items():
            value = getattr(self, name)
            if isinstance(value, bool):
                out[key] = "true" if value else "false"
            elif isinstance(value, float):
                out[key] = repr(value)
            else:
                out[key] = str(value)
        return out

    def validate(self):
        checks = [
            (self.d >= 1, "d must be >= 1"),
            (self.h >= 1, "h must be >= 1"),
            (self.L >= 1, "L must be >= 1"),
            (self.gamma >= 0, "gamma must be >= 0"),
            (self.tau > 0, "tau must be positive"),
            (self.lambda_ >= 0, "lambda must be >= 0"),
            (self.learning_rate > 0, "learning_rate must be positive"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.reg_coeff >= 0, "reg_coeff must be >= 0"),
            (self.epochs_max >= 1, "epochs_max must be >= 1"),
            (self.patience >= 1, "patience must be >= 1"),
            (self.eval_interval >= 1, "eval_interval must be >= 1"),
            (self.folds >= 2, "folds must be >= 2"),
            (self.neg_per_pos >= 1, "neg_per_pos must be >= 1"),
            (self.noise_s_fixed > 0, "noise.s_fixed must be positive"),
            (self.mmd_bandwidth >= 0, "mmd.bandwidth must be >= 0"),
            (self.noise_mode in ("generative", "random", "none"),
             f"unknown noise.mode: {self.noise_mode}"),
            (self.noise_distribution in ("gaussian", "uniform"),
             f"unknown noise.distribution: {self.noise_distribution}"),
            (self.noise_scale in ("variance", "stddev"),
             f"unknown noise.scale: {self.noise_scale}"),
            (self.ddl in ("kl", "mmd"), f"unknown ddl: {self.ddl}"),
            (self.kl_formula in ("standard", "paper"),
             f"unknown kl.formula: {self.kl_formula}"),
            (self.eval_noise in ("none", "mean"),
             f"unknown eval.noise: {self.eval_noise}"),
            (self.diag_uniformity in ("pairwise", "paper"),
             f"unknown diag.uniformity: {self.diag_uniformity}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        for key, sel in (("cl.view_a", self.cl_view_a),
                         ("cl.view_b", self.cl_view_b)):
            if sel != "avg":
                try:
                    layer = int(sel)
                except ValueError:
                    raise ConfigError(
                        f"{key} must be a layer number or 'avg', got {sel!r}")
                if not 1 <= layer <= self.L:
                    raise ConfigError(
                        f"{key}={sel} outside layers 1..{self.L}")

    def noise_settings(self):
        return NoiseSettings(mode=self.noise_mode,
                             distribution=self.noise_distribution,
                             scale=self.noise_scale,
                             s_fixed=self.noise_s_fixed)

    def copy(self):
        cfg = TrainConfig()
        for f in fields(self):
            setattr(cfg, f.name, getattr(self, f.name))
        return cfg


# ------------------------------------------------------------------ Adam


@dataclass
class AdamState:
    """First/second moment tables keyed like the parameter table."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(param_table, grads, state, lr=0.001, beta1=0.9, beta2=0.999,
              eps=1e-8):
    """Bias-corrected Adam update, in place on the parameter arrays."""
    state.t += 1
    t = state.t
    for name, p in param_table.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DiffError(f"non-finite gradient for {name!r}; training diverged")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ------------------------------------------------------------- context


@dataclass
class TrainContext:
    """Fold-level immutable training state: the graph operators and the
    per-user train item arrays used for negative sampling and masking."""

    train: object
    ui_op: SparseOperator
    comp_op: object
    items_by_user: dict
    num_users: int
    num_items: int


def build_context(train, cfg):
    graph = build_graph(train, gamma=cfg.gamma,
                        complement_enabled=cfg.complement_enabled,
                        apply_filter=cfg.filter_enabled)
    comp_op = SparseOperator(graph.comp) if graph.comp is not None else None
    return TrainContext(
        train=train,
        ui_op=SparseOperator(graph.ui),
        comp_op=comp_op,
        items_by_user=train.items_by_user(),
        num_users=train.num_users,
        num_items=train.num_items,
    )


def _sample_negatives_batch(ctx, users, count, rng):
    """One uniform non-interacted item per (user, slot); rejection over
    the user's sorted train items."""
    total = len(users) * count
    out = rng.integers(0, ctx.num_items, size=total)
    for row in range(total):
        items = ctx.items_by_user[int(users[row // count])]
        if len(items) >= ctx.num_items:
            raise DataError("a user has interacted with every item; "
                            "no negatives exist")
        while True:
            pos = np.searchsorted(items, out[row])
            if pos >= len(items) or items[pos] != out[row]:
                break
            out[row] = rng.integers(0, ctx.num_items)
    return out.reshape(len(users), count)


def _select_view(out, selector, cls, m, n):
    """Contrastive view node for one entity class: a layer index or the
    layer average."""
    if selector == "avg":
        return {"user": out.z_u, "item": out.z_i, "comp": out.z_c}[cls]
    layer = int(selector) - 1
    if cls == "comp":
        return out.comp_layers[layer]
    full = out.ui_layers[layer]
    return dc.row_slice(full, 0, m) if cls == "user" else dc.row_slice(full, m, m + n)


def _batch_loss(params, ctx, cfg, rng, users, pos_items, neg_items,
                frozen_eps=None):
    """Forward pass and joint loss for one batch; returns (report, total
    node, gradient table)."""
    m, n = ctx.num_users, ctx.num_items
    tape = Tape()
    leaves = params.leaves(tape)
    out = encode(tape, leaves, ctx.ui_op, ctx.comp_op, m, n, cfg.L, rng,
                 cfg.noise_settings(), frozen_eps=frozen_eps)

    u_idx = np.asarray(users, dtype=np.int64)
    p_idx = np.asarray(pos_items, dtype=np.int64)
    neg = np.asarray(neg_items, dtype=np.int64).reshape(len(u_idx), -1)

    zu_b = dc.gather(out.z_u, u_idx)
    pos_scores = dc.reduce_sum(dc.mul(zu_b, dc.gather(out.z_i, p_idx)), axis=1)
    neg_flat = neg.reshape(-1)
    if neg.shape[1] == 1:
        neg_scores = dc.reduce_sum(
            dc.mul(zu_b, dc.gather(out.z_i, neg_flat)), axis=1)
        rec = ls.bpr_loss(pos_scores, neg_scores)
    else:
        zu_rep = dc.gather(out.z_u, np.repeat(u_idx, neg.shape[1]))
        pos_rep = dc.gather(pos_scores, np.repeat(
            np.arange(len(u_idx)), neg.shape[1]))
        neg_scores = dc.reduce_sum(
            dc.mul(zu_rep, dc.gather(out.z_i, neg_flat)), axis=1)
        rec = ls.bpr_loss(pos_rep, neg_scores)

    cl = None
    if cfg.lambda_ > 0:
        uu = np.unique(u_idx)
        ii = np.unique(p_idx)

        def views(cls, idx):
            a = dc.gather(_select_view(out, cfg.cl_view_a, cls, m, n), idx)
            b = dc.gather(_select_view(out, cfg.cl_view_b, cls, m, n), idx)
            return a, b

        comp_views = views("comp", ii) if ctx.comp_op is not None else None
        cl = ls.multi_pair_cl(views("user", uu), views("item", ii),
                              comp_views, cfg.tau, normalize=cfg.cl_normalize)

    recon = ddl = None
    if cfg.noise_mode == "generative":
        block = out.noise_blocks[("ui", 1)]
        pos_pairs = np.column_stack([u_idx, p_idx])
        neg_pairs = np.column_stack([np.repeat(u_idx, neg.shape[1]), neg_flat])
        all_pairs = np.vstack([pos_pairs, neg_pairs])
        targets = np.concatenate([np.ones(len(pos_pairs)),
                                  np.zeros(len(neg_pairs))])
        predicted = reconstruct(block.sample, leaves, all_pairs, m)
        recon = ls.recon_loss(predicted, targets)

        if cfg.ddl == "kl":
            ddl = ls.kl_loss(block.mu, block.sigma2, cfg.kl_formula)
        else:
            touched = np.unique(np.concatenate([u_idx, m + p_idx, m + neg_flat]))
            gen = dc.gather(block.sample, touched)
            if cfg.noise_distribution == "uniform":
                prior = rng.random((len(touched), cfg.d))
            else:
                prior = rng.standard_normal((len(touched), cfg.d))
            bw = cfg.mmd_bandwidth or ls.median_bandwidth(gen.value, prior)
            ddl = ls.mmd_loss(gen, tape.constant(prior), bw)

    touched_rows = np.unique(np.concatenate([u_idx, m + p_idx, m + neg_flat]))
    reg = ls.l2_reg(dc.gather(leaves["base_embedding"], touched_rows),
                    cfg.reg_coeff)

    report, total = ls.joint_loss(rec, cl, recon, ddl, reg, cfg.lambda_)
    grads = dc.backward(total)
    return report, total, grads


def train_epoch(params, ctx, cfg, rng, state):
    """One pass over the shuffled training positives; returns the mean of
    each loss component across batches."""
    pairs = ctx.train.pairs
    order = rng.permutation(len(pairs))
    sums = np.zeros(6)
    batches = 0
    for lo in range(0, len(order), cfg.batch_size):
        batch = pairs[order[lo:lo + cfg.batch_size]]
        users, pos = batch[:, 0], batch[:, 1]
        neg = _sample_negatives_batch(ctx, users, cfg.neg_per_pos, rng)
        report, _, grads = _batch_loss(params, ctx, cfg, rng, users, pos, neg)
        adam_step(params.param_arrays(), grads, state, lr=cfg.learning_rate)
        sums += [report.rec, report.cl, report.recon, report.ddl,
                 report.reg, report.total]
        batches += 1
    mean = (sums / batches).tolist()
    return ls.LossReport(rec=mean[0], cl=mean[1], recon=mean[2],
                         ddl=mean[3], reg=mean[4], total=mean[5])


def eval_embeddings(params, ctx, cfg):
    """Deterministic encoder output for scoring: noise disabled, or the
    learned mean perturbation when eval.noise = mean."""
    tape = Tape()
    leaves = params.leaves(tape)
    if cfg.eval_noise == "mean":
        settings = cfg.noise_settings()
        if settings.mode == "generative":
            rows = {"ui": ctx.num_users + ctx.num_items, "comp": ctx.num_items}
            frozen = {(ch, k): np.zeros((rows[ch], cfg.d))
                      for ch in (("ui", "comp") if ctx.comp_op is not None
                                 else ("ui",))
                      for k in range(1, cfg.L + 1)}
            out = encode(tape, leaves, ctx.ui_op, ctx.comp_op, ctx.num_users,
                         ctx.num_items, cfg.L, None, settings, frozen_eps=frozen)
            return out.z_u.value, out.z_i.value
    out = encode(tape, leaves, ctx.ui_op, ctx.comp_op, ctx.num_users,
                 ctx.num_items, cfg.L, None, NoiseSettings(mode="none"))
    return out.z_u.value, out.z_i.value


def evaluate_model(params, ctx, test, cfg, ks=(5, 10, 20)):
    """Ranking metrics on a held-out split at each cutoff.

    Users without train interactions are excluded; users without test
    interactions are skipped inside the aggregation and tallied.
    """
    z_u, z_i = eval_embeddings(params, ctx, cfg)
    test_by_user = test.items_by_user()
    users = [u for u in range(ctx.num_users) if len(ctx.items_by_user[u])]
    results = {}
    # lists may come back shorter than k when the catalog is small
    depth = min(max(ks), z_i.shape[0])
    top = rank_topk(z_u, z_i, ctx.items_by_user, depth, users=users)
    for k in sorted(ks):
        trimmed = [t[:k] for t in top]
        results[k] = topk_metrics(trimmed, [test_by_user[u] for u in users], k)
    return results


# ---------------------------------------------------------------- fit


@dataclass
class FitResult:
    params: object
    history_rows: list
    eval_log: list
    best_metrics: dict
    best_epoch: int
    epochs_run: int
    geometry_rows: list


def fit(cfg, fold, progress=None, track_geometry=False):
    """Train on one fold with periodic evaluation and early stopping.

    The rng stream and initialization derive from cfg.seed + fold_index,
    so folds are independent and the whole run is reproducible.  Keeps
    the parameters of the best Recall@20 evaluation; stops after
    `patience` evaluations without improvement.
    """
    derived_seed = cfg.seed + fold.fold_index
    rng = np.random.default_rng(derived_seed)
    ctx = build_context(fold.train, cfg)
    params = init_params(ctx.num_users, ctx.num_items, cfg.d, cfg.h,
                         seed=derived_seed)
    state = AdamState()
    history, eval_log, geometry = [], [], []
    best = None
    best_params = params.copy()
    best_epoch = 0
    stale = 0
    epochs_run = 0

    for epoch in range(1, cfg.epochs_max + 1):
        report = train_epoch(params, ctx, cfg, rng, state)
        epochs_run = epoch
        eval_cols = ","
        if epoch % cfg.eval_interval == 0 or epoch == cfg.epochs_max:
            metrics = evaluate_model(params, ctx, fold.test, cfg, ks=(20,))[20]
            eval_log.append((epoch, metrics))
            eval_cols = f"{metrics.recall!r},{metrics.ndcg!r}"
            if best is None or metrics.recall > best:
                best = metrics.recall
                best_params = params.copy()
                best_epoch = epoch
                stale = 0
            else:
                stale += 1
        history.append(f"{epoch},{report.rec!r},{report.cl!r},"
                       f"{report.recon!r},{report.ddl!r},{report.reg!r},"
                       f"{report.total!r},{eval_cols}")
        if track_geometry:
            z_u, z_i = eval_embeddings(params, ctx, cfg)
            align, uniform = alignment_uniformity(
                z_u, z_i, ctx.train.pairs, formula=cfg.diag_uniformity)
            geometry.append(f"{epoch},{align!r},{uniform!r}")
        if progress is not None:
            progress(epoch, report, eval_log)
        if stale >= cfg.patience:
            break

    best_metrics = evaluate_model(best_params, ctx, fold.test, cfg)
    return FitResult(
        params=best_params,
        history_rows=history,
        eval_log=eval_log,
        best_metrics=best_metrics,
        best_epoch=best_epoch,
        epochs_run=epochs_run,
        geometry_rows=geometry,
    )
