"""Problem-to-expression solver that consumes a soft knowledge graph.

The solver is split into a small backbone interface (encode / score /
advance) with two implementations, plus two backbone-agnostic modules that
inject knowledge:

  * the word-graph refiner runs message passing over the problem's
    word-word edges to sharpen word representations before decoding,
  * the operator refiner runs, at every decoding step, a state-conditioned
    pass from the words through word-operator edges into the operator
    representations, so an attended trigger word can raise its operator's
    score at exactly the step where it matters.

Problems are processed in shape buckets (same token/expression/slot
counts), which keeps every tensor rectangular without padding or masks.
The per-step modules accept precomputed projections of the step-invariant
inputs; the cached and direct paths compute the same function.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from . import knowledge as kn
from .corpus import Problem, Vocabulary, parse_prefix, slot_index
from .diffcore import Tensor
from .knowledge import draw_noise, relax_sample


@dataclass
class SolverConfig:
    d: int = 64
    backbone: str = "birnn"            # "birnn" | "pool"
    use_se: bool = True
    use_re: bool = True
    knowledge_mode: str = "learned"    # "learned" | "external" | "none"
    relaxation: str = "logistic"
    dropout: float = 0.5
    max_slots: int = 5
    max_decode_len: int = 15


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _init_params(vocab: Vocabulary, config: SolverConfig,
                 rng: np.random.Generator) -> dict[str, Tensor]:
    """All trainable tensors in a fixed creation order.

    Every module's parameters exist regardless of ablation flags, so runs
    that share a seed share initializations exactly.  The encoder holds
    its two directions stacked on a leading axis.
    """
    d = config.d
    n_words = vocab.size
    n_ops = len(vocab.operators)
    n_const = len(vocab.constants)
    specs: list[tuple[str, tuple, str]] = [
        ("emb.word", (n_words + config.max_slots, d), "emb"),
        ("emb.op", (n_ops, d), "emb"),
        ("emb.const", (n_const, d), "emb"),
    ]
    for net in ("kenc.ww", "kenc.wo"):
        for name, shape in kn.pair_net_shapes(d).items():
            specs.append((f"{net}.{name}", shape, "mat" if len(shape) > 1 else "bias"))
    specs += [
        ("enc.wx", (2, d, 3 * d), "mat"), ("enc.wh", (2, d, 3 * d), "mat"),
        ("enc.b", (2, 1, 3 * d), "bias"),
        ("se.w1", (d, d), "mat"), ("se.b1", (d,), "bias"),
        ("se.w2", (d, d), "mat"), ("se.b2", (d,), "bias"),
        ("attn.w", (2 * d, d), "mat"), ("attn.v", (d, 1), "mat"),
        ("re.w4", (2 * d, d), "mat"), ("re.b4", (d,), "bias"),
        ("re.w5", (d, d), "mat"), ("re.b5", (d,), "bias"),
        ("re.ln_h.g", (d,), "one"), ("re.ln_h.b", (d,), "bias"),
        ("re.w6", (d, d), "mat"), ("re.b6", (d,), "bias"),
        ("re.ln_o.g", (d,), "one"), ("re.ln_o.b", (d,), "bias"),
        ("re.w7", (2 * d, d), "mat"), ("re.b7", (d,), "bias"),
        ("re.ln_f.g", (d,), "one"), ("re.ln_f.b", (d,), "bias"),
        ("dec.wx", (2 * d, 3 * d), "mat"), ("dec.wh", (d, 3 * d), "mat"),
        ("dec.b", (3 * d,), "bias"),
        ("out.w", (3 * d, d), "mat"), ("out.u", (d, 1), "mat"),
        ("out.ln.g", (d,), "one"), ("out.ln.b", (d,), "bias"),
    ]
    params: dict[str, Tensor] = {}
    for name, shape, kind in specs:
        if kind == "emb":
            data = rng.normal(0.0, 0.1, shape)
        elif kind == "mat":
            bound = 1.0 / np.sqrt(shape[-2])
            data = rng.uniform(-bound, bound, shape)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# Backbone interface: encode / score / advance
# ---------------------------------------------------------------------------

def gru_cell(params, prefix: str, x: Tensor, h: Tensor) -> Tensor:
    """Gated recurrent cell; shapes broadcast, so the encoder can run both
    directions stacked on a leading axis with one set of nodes."""
    d = h.shape[-1]
    gx = dc.add(dc.matmul(x, params[f"{prefix}.wx"]), params[f"{prefix}.b"])
    gh = dc.matmul(h, params[f"{prefix}.wh"])
    zr = dc.sigmoid(dc.add(dc.slice_last(gx, 0, 2 * d),
                           dc.slice_last(gh, 0, 2 * d)))
    z = dc.slice_last(zr, 0, d)
    r = dc.slice_last(zr, d, 2 * d)
    n = dc.tanh(dc.add(dc.slice_last(gx, 2 * d, 3 * d),
                       dc.mul(r, dc.slice_last(gh, 2 * d, 3 * d))))
    return dc.add(dc.mul(dc.sub(1.0, z), n), dc.mul(z, h))


def encode_birnn(params, emb_table: Tensor, token_ids: np.ndarray,
                 dropout_p: float = 0.0,
                 dropout_rng: np.random.Generator | None = None
                 ) -> tuple[Tensor, Tensor]:
    """Bidirectional recurrent encoder.

    H sums the direction outputs per position; the initial reasoning state
    sums the two final states.  Step i feeds token i forward and token
    T-1-i backward through one stacked cell evaluation.
    """
    b, t = token_ids.shape
    d = emb_table.shape[-1]
    h = Tensor(np.zeros((2, b, d)))
    outs: list[Tensor] = []
    for i in range(t):
        ids = np.stack([token_ids[:, i], token_ids[:, t - 1 - i]])
        x = dc.embedding(emb_table, ids)
        if dropout_p > 0 and dropout_rng is not None:
            x = dc.dropout(x, dropout_p, rng=dropout_rng)
        h = gru_cell(params, "enc", x, h)
        outs.append(dc.reshape(h, (2, b, 1, d)))
    stacked = dc.concat(outs, axis=2)                      # (2, B, T, d)
    fwd = dc.reshape(dc.slice_rows(stacked, 0, 1), (b, t, d))
    bwd = dc.flip(dc.reshape(dc.slice_rows(stacked, 1, 2), (b, t, d)), 1)
    big_h = dc.add(fwd, bwd)
    final = dc.reshape(dc.slice_rows(h, 0, 1), (b, d))
    final_b = dc.reshape(dc.slice_rows(h, 1, 2), (b, d))
    return big_h, dc.add(final, final_b)


def encode_pool(emb_table: Tensor, token_ids: np.ndarray,
                dropout_p: float = 0.0,
                dropout_rng: np.random.Generator | None = None
                ) -> tuple[Tensor, Tensor]:
    """Order-free baseline: token embeddings plus a mean-pool context."""
    b, _ = token_ids.shape
    d = emb_table.shape[-1]
    emb_seq = dc.embedding(emb_table, token_ids)
    if dropout_p > 0 and dropout_rng is not None:
        emb_seq = dc.dropout(emb_seq, dropout_p, rng=dropout_rng)
    context = dc.tmean(emb_seq, axis=1, keepdims=True)
    return dc.add(emb_seq, context), dc.reshape(context, (b, d))


def advance(params, e_prev: Tensor, context: Tensor, s: Tensor) -> Tensor:
    """Next reasoning state from the consumed symbol and attention context."""
    return gru_cell(params, "dec", dc.concat([e_prev, context], axis=-1), s)


def score_candidates(params, s: Tensor, context: Tensor, cand: Tensor,
                     cand_proj: Tensor | None = None) -> Tensor:
    """Unnormalized candidate scores u^T tanh(W [s, c, e_v]).

    The state/context projection is layer-normalized before entering the
    tanh: the shared offset is softmax-irrelevant but can drift until the
    tanh saturates for every candidate, which kills the gradient that
    separates candidates.  ``cand_proj`` may carry a precomputed
    projection of the candidate rows through the matching weight block.
    """
    b = s.shape[0]
    d = params["out.u"].shape[0]
    if cand_proj is None:
        cand_proj = dc.matmul(cand, dc.slice_rows(params["out.w"], 2 * d, 3 * d))
    v = cand_proj.shape[1]
    sc = dc.matmul(dc.concat([s, context], axis=-1),
                   dc.slice_rows(params["out.w"], 0, 2 * d))
    sc = dc.layer_norm(sc, params["out.ln.g"], params["out.ln.b"])
    h = dc.tanh(dc.add(cand_proj, dc.reshape(sc, (b, 1, d))))
    return dc.reshape(dc.matmul(h, params["out.u"]), (b, v))


# ---------------------------------------------------------------------------
# Knowledge application modules
# ---------------------------------------------------------------------------

def normalize_with_self_loops(a_e: Tensor) -> Tensor:
    """Row-normalized adjacency with self loops added (word-word graph)."""
    n = a_e.shape[-1]
    with_loops = dc.add(a_e, Tensor(np.eye(n)))
    return dc.div(with_loops, dc.tsum(with_loops, axis=-1, keepdims=True))


def normalize_rows(a_d: Tensor, eps: float = 1e-8) -> Tensor:
    """Row normalization that leaves all-zero rows at zero."""
    rowsum = dc.tsum(a_d, axis=-1, keepdims=True)
    return dc.div(a_d, dc.clip(rowsum, eps, None))


def semantics_enhance(params, h: Tensor, a_e_hat: Tensor) -> Tensor:
    """Two-hop message passing over the word-word graph."""
    inner = dc.relu(dc.linear(dc.matmul(a_e_hat, h),
                              params["se.w1"], params["se.b1"]))
    return dc.linear(dc.matmul(a_e_hat, inner), params["se.w2"], params["se.b2"])


def attend(params, s: Tensor, hp: Tensor, hp_proj: Tensor | None = None) -> Tensor:
    """Attention of the reasoning state over word representations."""
    b, n, d = hp.shape
    if hp_proj is None:
        hp_proj = dc.matmul(hp, dc.slice_rows(params["attn.w"], d, 2 * d))
    s_proj = dc.matmul(s, dc.slice_rows(params["attn.w"], 0, d))
    feats = dc.tanh(dc.add(hp_proj, dc.reshape(s_proj, (b, 1, d))))
    logits = dc.reshape(dc.matmul(feats, params["attn.v"]), (b, n))
    return dc.softmax(logits)


@dataclass
class ReCache:
    """Step-invariant projections for the operator refiner."""

    ae_hp_w4b: Tensor   # (A_E_hat @ H') @ W4[word block]
    ops_w7b: Tensor     # base operator rows through W7[base block]


def re_cache(params, hp: Tensor, ops_base: Tensor, a_e_hat: Tensor) -> ReCache:
    d = hp.shape[-1]
    ae_hp = dc.matmul(a_e_hat, hp)
    return ReCache(
        ae_hp_w4b=dc.matmul(ae_hp, dc.slice_rows(params["re.w4"], d, 2 * d)),
        ops_w7b=dc.matmul(ops_base, dc.slice_rows(params["re.w7"], d, 2 * d)))


def reasoning_enhance(params, s: Tensor, ws: Tensor, hp: Tensor,
                      ops_base: Tensor, a_e_hat: Tensor, a_d_hat: Tensor,
                      cache: ReCache | None = None) -> Tensor:
    """State-conditioned update of operator representations.

    Word nodes carry [ws_i * s, h'_i]; two hops over the word-word graph,
    a residual normalization, then aggregation into operators through the
    word-operator graph and a gated residual merge with the base operator
    embeddings.  Output is (B, C, d).
    """
    b, n, d = hp.shape
    if cache is None:
        cache = re_cache(params, hp, ops_base, a_e_hat)
    injected = dc.mul(dc.reshape(ws, (b, n, 1)), dc.reshape(s, (b, 1, d)))
    inj_msg = dc.matmul(dc.matmul(a_e_hat, injected),
                        dc.slice_rows(params["re.w4"], 0, d))
    inner = dc.relu(dc.add(dc.add(inj_msg, cache.ae_hp_w4b), params["re.b4"]))
    h_t = dc.linear(dc.matmul(a_e_hat, inner), params["re.w5"], params["re.b5"])
    h_res = dc.add(h_t, dc.layer_norm(h_t, params["re.ln_h.g"], params["re.ln_h.b"]))
    o_t = dc.layer_norm(
        dc.relu(dc.linear(dc.matmul(a_d_hat, h_res), params["re.w6"], params["re.b6"])),
        params["re.ln_o.g"], params["re.ln_o.b"])
    o_hat = dc.relu(dc.add(
        dc.add(dc.matmul(o_t, dc.slice_rows(params["re.w7"], 0, d)),
               cache.ops_w7b),
        params["re.b7"]))
    return dc.add(ops_base, dc.layer_norm(o_hat, params["re.ln_f.g"],
                                          params["re.ln_f.b"]))


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Problems of identical shape, flattened to index arrays."""

    problems: list[Problem]
    token_ids: np.ndarray        # (B, n) model ids: words then slot markers
    word_rows: np.ndarray        # (B, n) local index into the batch word list, -1 otherwise
    slot_pos: np.ndarray         # (B, k) token position of each slot marker
    gold_ids: np.ndarray | None  # (B, m) candidate-space gold indices
    words: list[int]             # sorted distinct word ids in the batch

    @property
    def size(self) -> int:
        return len(self.problems)


class BatchError(ValueError):
    pass


def make_batch(problems: list[Problem], vocab: Vocabulary,
               max_slots: int, with_gold: bool = True) -> Batch:
    n = len(problems[0].tokens)
    k = problems[0].slot_count()
    n_ops = len(vocab.operators)
    n_const = len(vocab.constants)
    token_ids = np.zeros((len(problems), n), dtype=np.int64)
    slot_pos = np.zeros((len(problems), k), dtype=np.int64)
    gold = None
    if with_gold:
        m = len(problems[0].gold_expression)
        gold = np.zeros((len(problems), m), dtype=np.int64)
    word_set: set[int] = set()
    for b, p in enumerate(problems):
        if len(p.tokens) != n or p.slot_count() != k:
            raise BatchError("problems in a batch must share (n, k)")
        for pos, tok in enumerate(p.tokens):
            si = slot_index(tok)
            if si is not None:
                if si > max_slots:
                    raise BatchError(f"{p.id}: more than {max_slots} numbers")
                token_ids[b, pos] = vocab.size + si - 1
                slot_pos[b, si - 1] = pos
            else:
                wid = vocab.index(tok)
                token_ids[b, pos] = wid
                word_set.add(wid)
        if with_gold:
            if len(p.gold_expression) != gold.shape[1]:
                raise BatchError("problems in a batch must share m")
            for t, sym in enumerate(p.gold_expression):
                si = slot_index(sym)
                if sym in vocab.operators:
                    gold[b, t] = vocab.operators.index(sym)
                elif sym in vocab.constants:
                    gold[b, t] = n_ops + vocab.constants.index(sym)
                elif si is not None and si <= k:
                    gold[b, t] = n_ops + n_const + si - 1
                else:
                    raise BatchError(
                        f"{p.id}: symbol {sym!r} outside its target vocabulary")
    words = sorted(word_set)
    local = {w: i for i, w in enumerate(words)}
    lookup = np.full(vocab.size + max_slots, -1, dtype=np.int64)
    for w, i in local.items():
        lookup[w] = i
    word_rows = lookup[token_ids]
    return Batch(problems=problems, token_ids=token_ids, word_rows=word_rows,
                 slot_pos=slot_pos, gold_ids=gold, words=words)


def bucket_problems(problems: list[Problem], vocab: Vocabulary, batch_size: int,
                    max_slots: int, rng: np.random.Generator | None = None,
                    with_gold: bool = True) -> list[Batch]:
    """Group problems by (n, m, k) shape and chunk each group.

    With an rng, problem order within groups and the batch order are both
    shuffled (one draw stream, fixed order of use).
    """
    groups: dict[tuple, list[Problem]] = {}
    for p in problems:
        key = (len(p.tokens), len(p.gold_expression), p.slot_count())
        groups.setdefault(key, []).append(p)
    batches: list[Batch] = []
    for key in sorted(groups):
        members = groups[key]
        if rng is not None:
            members = [members[i] for i in rng.permutation(len(members))]
        for lo in range(0, len(members), batch_size):
            batches.append(make_batch(members[lo:lo + batch_size], vocab,
                                      max_slots, with_gold=with_gold))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches


# ---------------------------------------------------------------------------
# The solver
# ---------------------------------------------------------------------------

@dataclass
class GraphSample:
    """Soft adjacencies for one batch plus the posterior pieces KL needs."""

    a_e_hat: Tensor
    a_d_hat: Tensor
    kl_probs: Tensor | None
    kl_priors: np.ndarray | None


@dataclass
class DecodeContext:
    """Everything step-invariant for one batch's decoding."""

    hp: Tensor
    s0: Tensor
    ops_base: Tensor
    slots: Tensor
    consts: Tensor
    hp_attn: Tensor
    static_cand_proj: Tensor     # consts+slots through the scorer block
    cache: ReCache | None
    graph: GraphSample


class Solver:
    """Owns the parameters and the batched forward passes."""

    def __init__(self, vocab: Vocabulary, config: SolverConfig,
                 init_rng: np.random.Generator,
                 external_ww: set[tuple[int, int]] | None = None,
                 external_wo: set[tuple[int, int]] | None = None):
        self.vocab = vocab
        self.config = config
        self.params = _init_params(vocab, config, init_rng)
        self.external_ww = external_ww or set()
        self.external_wo = external_wo or set()

    # -- knowledge assembly ---------------------------------------------

    def edge_matrices(self, batch: Batch, train: bool, tau: float = 0.1,
                      noise_rng: np.random.Generator | None = None,
                      prior: kn.KnowledgePrior | None = None,
                      clamp_edge: tuple | None = None) -> GraphSample:
        """Soft word-word and word-operator adjacencies for a batch.

        In "learned" mode entries are relaxed samples of the posterior
        during training and plain posterior probabilities during
        evaluation; one sample per edge is shared across the whole batch.
        ``clamp_edge`` pins a single edge to a constant for influence
        probes: ("ww", i, j, value) or ("wo", i, c, value).
        """
        mode = self.config.knowledge_mode
        words = batch.words
        p_count = len(words)
        n_ops = len(self.vocab.operators)
        b, n = batch.token_ids.shape

        if mode == "learned":
            word_emb = dc.embedding(self.params["emb.word"], np.asarray(words))
            ww_logits = kn.ww_logit_matrix(self.params, word_emb)
            wo_logits = kn.wo_logit_matrix(self.params, word_emb,
                                           self.params["emb.op"])
            if train:
                if noise_rng is None:
                    raise ValueError("training-mode sampling needs an rng")
                upper = np.triu(draw_noise(noise_rng, (p_count, p_count),
                                           self.config.relaxation), k=1)
                ww_soft = relax_sample(ww_logits, tau, upper + upper.T)
                wo_noise = draw_noise(noise_rng, (p_count, n_ops),
                                      self.config.relaxation)
                wo_soft = relax_sample(wo_logits, tau, wo_noise)
            else:
                ww_soft = dc.sigmoid(ww_logits)
                wo_soft = dc.sigmoid(wo_logits)
        elif mode == "external":
            ww_bin = np.zeros((p_count, p_count))
            wo_bin = np.zeros((p_count, n_ops))
            for a, i in enumerate(words):
                for bcol, j in enumerate(words):
                    if (min(i, j), max(i, j)) in self.external_ww:
                        ww_bin[a, bcol] = 1.0
                for c in range(n_ops):
                    if (i, c) in self.external_wo:
                        wo_bin[a, c] = 1.0
            ww_soft, wo_soft = Tensor(ww_bin), Tensor(wo_bin)
        elif mode == "none":
            ww_soft = Tensor(np.zeros((p_count, p_count)))
            wo_soft = Tensor(np.zeros((p_count, n_ops)))
        else:
            raise ValueError(f"unknown knowledge mode {mode!r}")

        if clamp_edge is not None:
            ww_soft, wo_soft = self._apply_clamp(ww_soft, wo_soft, words,
                                                 clamp_edge)

        # scatter the shared edge values into per-problem adjacencies
        rows = batch.word_rows
        ie = rows[:, :, None]
        je = rows[:, None, :]
        valid_e = (ie >= 0) & (je >= 0) & (ie != je)
        idx_e = np.where(valid_e, ie * p_count + je, p_count * p_count)
        ww_flat = dc.concat([dc.reshape(ww_soft, (p_count * p_count,)),
                             Tensor(np.zeros(1))], axis=0)
        a_e = dc.gather(ww_flat, idx_e)

        ic = rows[:, None, :]
        valid_d = ic >= 0
        base = np.arange(n_ops)[None, :, None]
        idx_d = np.where(valid_d, ic * n_ops + base, p_count * n_ops)
        wo_flat = dc.concat([dc.reshape(wo_soft, (p_count * n_ops,)),
                             Tensor(np.zeros(1))], axis=0)
        a_d = dc.gather(wo_flat, np.broadcast_to(idx_d, (b, n_ops, n)))

        kl_probs = kl_priors = None
        if mode == "learned" and prior is not None:
            iu, ju = np.triu_indices(p_count, k=1)
            ww_pair_logits = dc.gather(ww_logits, iu * p_count + ju)
            probs = dc.sigmoid(dc.concat(
                [ww_pair_logits, dc.reshape(wo_logits, (p_count * n_ops,))],
                axis=0))
            priors = np.array(
                [prior.ww_prior(words[a], words[bcol]) for a, bcol in zip(iu, ju)]
                + [prior.wo_prior(i, c) for i in words for c in range(n_ops)])
            kl_probs, kl_priors = probs, priors

        return GraphSample(a_e_hat=normalize_with_self_loops(a_e),
                           a_d_hat=normalize_rows(a_d),
                           kl_probs=kl_probs, kl_priors=kl_priors)

    def _apply_clamp(self, ww_soft, wo_soft, words, clamp_edge):
        kind, i, j, value = clamp_edge
        local = {w: a for a, w in enumerate(words)}
        if kind == "ww" and i in local and j in local:
            mat = ww_soft.data.copy()
            mat[local[i], local[j]] = value
            mat[local[j], local[i]] = value
            ww_soft = Tensor(mat)
        elif kind == "wo" and i in local:
            mat = wo_soft.data.copy()
            mat[local[i], j] = value
            wo_soft = Tensor(mat)
        return ww_soft, wo_soft

    # -- forward ----------------------------------------------------------

    def encode(self, batch: Batch, train: bool = False,
               dropout_rng: np.random.Generator | None = None
               ) -> tuple[Tensor, Tensor]:
        p = self.config.dropout if train else 0.0
        if self.config.backbone == "birnn":
            return encode_birnn(self.params, self.params["emb.word"],
                                batch.token_ids, p, dropout_rng)
        if self.config.backbone == "pool":
            return encode_pool(self.params["emb.word"], batch.token_ids,
                               p, dropout_rng)
        raise ValueError(f"unknown backbone {self.config.backbone!r}")

    def prepare_decode(self, batch: Batch, graph: GraphSample,
                       train: bool = False,
                       dropout_rng: np.random.Generator | None = None
                       ) -> DecodeContext:
        cfg = self.config
        b = batch.size
        d = cfg.d
        n_ops = len(self.vocab.operators)
        n_const = len(self.vocab.constants)
        h, s0 = self.encode(batch, train=train, dropout_rng=dropout_rng)
        hp = semantics_enhance(self.params, h, graph.a_e_hat) if cfg.use_se else h
        ops_base = dc.broadcast_to(
            dc.reshape(self.params["emb.op"], (1, n_ops, d)), (b, n_ops, d))
        slots = dc.gather_rows(hp, batch.slot_pos)
        consts = dc.broadcast_to(
            dc.reshape(self.params["emb.const"], (1, n_const, d)),
            (b, n_const, d))
        hp_attn = dc.matmul(hp, dc.slice_rows(self.params["attn.w"], d, 2 * d))
        w_e = dc.slice_rows(self.params["out.w"], 2 * d, 3 * d)
        static_cand_proj = dc.matmul(dc.concat([consts, slots], axis=1), w_e)
        cache = re_cache(self.params, hp, ops_base, graph.a_e_hat) \
            if cfg.use_re else None
        return DecodeContext(hp=hp, s0=s0, ops_base=ops_base, slots=slots,
                             consts=consts, hp_attn=hp_attn,
                             static_cand_proj=static_cand_proj, cache=cache,
                             graph=graph)

    def _step(self, ctx: DecodeContext, s: Tensor
              ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """One decoding step: (attention, context, candidates, probs)."""
        cfg = self.config
        b = ctx.hp.shape[0]
        d = cfg.d
        ws = attend(self.params, s, ctx.hp, hp_proj=ctx.hp_attn)
        context = dc.reshape(dc.matmul(dc.reshape(ws, (b, 1, -1)), ctx.hp),
                             (b, d))
        if cfg.use_re:
            ops_now = reasoning_enhance(self.params, s, ws, ctx.hp,
                                        ctx.ops_base, ctx.graph.a_e_hat,
                                        ctx.graph.a_d_hat, cache=ctx.cache)
        else:
            ops_now = ctx.ops_base
        cand = dc.concat([ops_now, ctx.consts, ctx.slots], axis=1)
        ops_proj = dc.matmul(ops_now,
                             dc.slice_rows(self.params["out.w"], 2 * d, 3 * d))
        cand_proj = dc.concat([ops_proj, ctx.static_cand_proj], axis=1)
        logits = score_candidates(self.params, s, context, cand,
                                  cand_proj=cand_proj)
        return ws, context, cand, dc.softmax(logits)

    def teacher_forced_nll(self, batch: Batch, graph: GraphSample,
                           train: bool = False,
                           dropout_rng: np.random.Generator | None = None) -> Tensor:
        """Sum over the batch of -log P(gold expression), teacher forcing.

        The operator refinement is recomputed at every step from the
        current reasoning state.
        """
        if batch.gold_ids is None:
            raise BatchError("batch was built without gold expressions")
        b, m = batch.gold_ids.shape
        v = len(self.vocab.operators) + len(self.vocab.constants) \
            + batch.slot_pos.shape[1]
        ctx = self.prepare_decode(batch, graph, train=train,
                                  dropout_rng=dropout_rng)
        s = ctx.s0
        total = Tensor(np.zeros(()))
        for t in range(m):
            ws, context, cand, probs = self._step(ctx, s)
            onehot = np.zeros((b, v))
            onehot[np.arange(b), batch.gold_ids[:, t]] = 1.0
            gold_p = dc.tsum(dc.mul(probs, Tensor(onehot)), axis=-1)
            total = dc.sub(total, dc.tsum(dc.log(gold_p)))
            if t + 1 < m:
                e_prev = dc.reshape(
                    dc.gather_rows(cand, batch.gold_ids[:, t:t + 1]),
                    (b, self.config.d))
                s = advance(self.params, e_prev, context, s)
        return total

    def decode_batch(self, batch: Batch, graph: GraphSample
                     ) -> list[list[str] | None]:
        """Greedy decoding in lockstep; None marks an unclosed prefix."""
        cfg = self.config
        b = batch.size
        n_ops = len(self.vocab.operators)
        k = batch.slot_pos.shape[1]
        symbols = list(self.vocab.operators) + list(self.vocab.constants) \
            + [f"NUM{i + 1}" for i in range(k)]
        ctx = self.prepare_decode(batch, graph, train=False)
        s = ctx.s0
        budgets = np.ones(b, dtype=int)
        done = np.zeros(b, dtype=bool)
        outputs: list[list[str]] = [[] for _ in range(b)]
        for _ in range(cfg.max_decode_len):
            _, context, cand, probs = self._step(ctx, s)
            choice = np.argmax(probs.data, axis=-1)
            for row in range(b):
                if done[row]:
                    continue
                sym = symbols[choice[row]]
                outputs[row].append(sym)
                budgets[row] += 1 if choice[row] < n_ops else -1
                if budgets[row] == 0:
                    done[row] = True
            if done.all():
                break
            e_prev = dc.reshape(dc.gather_rows(cand, choice[:, None]),
                                (b, cfg.d))
            s = advance(self.params, e_prev, context, s)
        return [outputs[row] if done[row] else None for row in range(b)]

    def decode_problem(self, problem: Problem) -> list[str] | None:
        """Greedy decode of a single problem (deterministic)."""
        batch = make_batch([problem], self.vocab, self.config.max_slots,
                           with_gold=False)
        graph = self.edge_matrices(batch, train=False)
        return self.decode_batch(batch, graph)[0]

    def sequence_nll(self, problem: Problem) -> float:
        """Evaluation-mode NLL of one problem's gold expression."""
        batch = make_batch([problem], self.vocab, self.config.max_slots)
        graph = self.edge_matrices(batch, train=False)
        return float(self.teacher_forced_nll(batch, graph).data)

    # -- persistence ------------------------------------------------------

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            incoming = np.asarray(arrays[k], dtype=v.data.dtype)
            if incoming.shape != v.data.shape:
                raise ValueError(
                    f"parameter {k!r} has shape {incoming.shape}, "
                    f"expected {v.data.shape}")
            v.data = incoming


def parse_decode_output(tokens: list[str] | None, k: int):
    """Parse a decoded prefix, or None on failure."""
    if tokens is None:
        return None
    try:
        return parse_prefix(tokens, k)
    except Exception:
        return None


def clone_config(config: SolverConfig, **overrides) -> SolverConfig:
    return replace(config, **overrides)
