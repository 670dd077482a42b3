"""Evaluation suite: contrastive feature extractors and the seven metrics.

A paired HOI-sequence encoder and text encoder are trained contrastively on
the train split and map into a shared 128-d space (L2-normalized). On top of
the shared space: FID between feature distributions, retrieval R-Precision,
MM-Dist, Diversity, and MModality. Contact quality (C_prec, C_%) is measured
geometrically from the 5 cm threshold rule, independent of any encoder.

Stochastic metrics draw from a seeded generator; the evaluation protocol
repeats them 20 times and reports mean with a 95% confidence interval.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .container import load_container, save_container
from .contact import distance_threshold
from .errors import ContractError, DataFormatError, NumericalError
from .kinematics import hand_points, transform_object
from .types import VOCAB

EMBED_DIM = 128
TEMPERATURE = 0.07
RP_POOL = 32
COV_JITTER = 1e-6


# ---------------------------------------------------------------------------
# feature extractors

class HoiFeatureEncoder(nn.Module):
    """Body+object frame track + geometry token -> L2-normalized embedding."""

    def __init__(self, frame_dim=78, width=64, layers=3, heads=4,
                 embed_dim=EMBED_DIM):
        super().__init__()
        self.frame_dim = frame_dim
        self.in_proj = nn.Linear(frame_dim, width)
        self.point_mlp = nn.Sequential(
            nn.Linear(3, 32), nn.ReLU(), nn.Linear(32, width))
        enc_layer = nn.TransformerEncoderLayer(
            d_model=width, nhead=heads, dim_feedforward=4 * width,
            dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(enc_layer, num_layers=layers)
        self.out_proj = nn.Linear(2 * width, embed_dim)

    def forward(self, frames, points):
        if frames.ndim != 3 or frames.shape[-1] != self.frame_dim:
            raise ContractError("HOI frames must be (B, N, %d), got %s"
                                % (self.frame_dim, tuple(frames.shape)))
        geo = self.point_mlp(points).max(dim=1).values          # (B, width)
        tokens = torch.cat([geo[:, None, :], self.in_proj(frames)], dim=1)
        pooled = self.encoder(tokens).mean(dim=1)
        emb = self.out_proj(torch.cat([pooled, geo], dim=-1))
        return emb / emb.norm(dim=-1, keepdim=True).clamp(min=1e-12)


class TextFeatureEncoder(nn.Module):
    """Token ids -> L2-normalized embedding in the shared space."""

    def __init__(self, vocab_size=len(VOCAB), width=64, embed_dim=EMBED_DIM):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, width)
        self.mlp = nn.Sequential(
            nn.Linear(width, width), nn.ReLU(), nn.Linear(width, embed_dim))

    def forward(self, tokens):
        if tokens.ndim != 2:
            raise ContractError("token batch must be (B, L)")
        emb = self.mlp(self.embed(tokens).mean(dim=1))
        return emb / emb.norm(dim=-1, keepdim=True).clamp(min=1e-12)


class FeatureExtractorPair:
    """Jointly trained HOI and text encoders over one embedding space."""

    def __init__(self, hoi=None, text=None, norm_mean=None, norm_std=None):
        self.hoi = hoi or HoiFeatureEncoder()
        self.text = text or TextFeatureEncoder()
        self.norm_mean = norm_mean   # (78,) float32, train-split frame stats
        self.norm_std = norm_std

    def eval(self):
        self.hoi.eval()
        self.text.eval()
        return self

    def _normalize(self, frames):
        if self.norm_mean is None:
            return frames
        mean = torch.as_tensor(self.norm_mean, dtype=frames.dtype)
        std = torch.as_tensor(self.norm_std, dtype=frames.dtype)
        return (frames - mean) / std

    @torch.no_grad()
    def encode_hoi(self, body_frames, obj_frames, points):
        """(B, N, 72) x (B, N, 6) x (B, P, 3) arrays -> (B, 128) float64."""
        frames = torch.cat([torch.as_tensor(np.asarray(body_frames), dtype=torch.float32),
                            torch.as_tensor(np.asarray(obj_frames), dtype=torch.float32)], dim=-1)
        pts = torch.as_tensor(np.asarray(points), dtype=torch.float32)
        self.hoi.eval()
        return self.hoi(self._normalize(frames), pts).double().numpy()

    @torch.no_grad()
    def encode_text(self, tokens):
        """(B, L) int tokens -> (B, 128) float64."""
        self.text.eval()
        t = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
        return self.text(t).double().numpy()

    def save(self, path):
        arrays = {"norm_mean": np.asarray(self.norm_mean, np.float32),
                  "norm_std": np.asarray(self.norm_std, np.float32)}
        for prefix, module in (("hoi", self.hoi), ("text", self.text)):
            for name, tensor in module.state_dict().items():
                arrays["%s.%s" % (prefix, name)] = tensor.numpy().astype(np.float32)
        save_container(path, arrays, "feature-extractors",
                       meta={"embed_dim": EMBED_DIM})

    @classmethod
    def load(cls, path):
        arrays, _meta = load_container(path, kind="feature-extractors")
        pair = cls(norm_mean=arrays["norm_mean"], norm_std=arrays["norm_std"])
        for prefix, module in (("hoi", pair.hoi), ("text", pair.text)):
            state = {}
            for name, tensor in module.state_dict().items():
                key = "%s.%s" % (prefix, name)
                if key not in arrays:
                    raise DataFormatError("feature checkpoint missing array %r" % key)
                state[name] = torch.as_tensor(arrays[key]).to(tensor.dtype)
            module.load_state_dict(state)
        return pair.eval()


def duplicate_text_mask(tokens):
    """(B, L) -> (B, B) bool; True where two rows carry the same instruction."""
    t = np.asarray(tokens)
    return (t[:, None, :] == t[None, :, :]).all(axis=-1)


def info_nce(hoi_emb, text_emb, tokens, temperature=TEMPERATURE):
    """Symmetric contrastive loss with duplicate-instruction negatives masked.

    The closed vocabulary yields many samples per instruction; a batch row
    whose text equals the anchor's is a false negative and is excluded from
    the denominator (its own diagonal term stays).
    """
    if hoi_emb.shape != text_emb.shape:
        raise ContractError("embedding shapes differ: %s vs %s"
                            % (tuple(hoi_emb.shape), tuple(text_emb.shape)))
    logits = hoi_emb @ text_emb.T / temperature
    dup = torch.as_tensor(duplicate_text_mask(tokens))
    mask = dup & ~torch.eye(len(dup), dtype=torch.bool)
    logits_ht = logits.masked_fill(mask, float("-inf"))
    logits_th = logits.T.masked_fill(mask, float("-inf"))
    target = torch.arange(len(logits))
    return 0.5 * (nn.functional.cross_entropy(logits_ht, target)
                  + nn.functional.cross_entropy(logits_th, target))


def _sample_tensors(samples):
    body = np.stack([s.body.frames for s in samples]).astype(np.float32)
    obj = np.stack([s.obj.frames for s in samples]).astype(np.float32)
    pts = np.stack([s.geometry.points for s in samples]).astype(np.float32)
    tokens = np.stack([s.text.tokens for s in samples]).astype(np.int64)
    return body, obj, pts, tokens


def train_feature_extractors(dataset, steps=300, batch=64, lr=3e-4, seed=0,
                             log_every=0):
    """Contrastive training on the train split; returns (pair, loss curve)."""
    samples = dataset.split("train")
    if len(samples) < 2:
        raise ContractError("contrastive training needs at least 2 samples")
    body, obj, pts, tokens = _sample_tensors(samples)
    frames = np.concatenate([body, obj], axis=-1)
    mean = frames.reshape(-1, frames.shape[-1]).mean(axis=0)
    std = frames.reshape(-1, frames.shape[-1]).std(axis=0) + 1e-6

    torch.manual_seed(seed)
    pair = FeatureExtractorPair(norm_mean=mean, norm_std=std)
    params = list(pair.hoi.parameters()) + list(pair.text.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng([seed, 31337])

    frames_t = torch.as_tensor((frames - mean) / std, dtype=torch.float32)
    pts_t = torch.as_tensor(pts)
    tokens_t = torch.as_tensor(tokens)

    losses = []
    for step in range(steps):
        idx = rng.choice(len(samples), size=min(batch, len(samples)),
                         replace=False)
        idx_t = torch.as_tensor(idx, dtype=torch.long)
        opt.zero_grad()
        h = pair.hoi(frames_t[idx_t], pts_t[idx_t])
        t = pair.text(tokens_t[idx_t])
        loss = info_nce(h, t, tokens[idx])
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            print("  contrastive step %d/%d loss %.4f"
                  % (step + 1, steps, losses[-1]))
    return pair.eval(), losses


# ---------------------------------------------------------------------------
# distribution metrics

def _check_features(feats, name, min_rows=1):
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 2:
        raise ContractError("%s features must be 2-D, got %s" % (name, f.shape))
    if len(f) < min_rows:
        raise ContractError("%s features need >= %d rows, got %d"
                            % (name, min_rows, len(f)))
    if not np.isfinite(f).all():
        raise NumericalError("%s features contain non-finite values" % name)
    return f


def _sqrt_eigh(mat, name):
    sym = (mat + mat.T) / 2.0
    w, v = np.linalg.eigh(sym)
    floor = -1e-6 * max(1.0, float(abs(w).max()))
    if w.min() < floor:
        raise NumericalError("degenerate covariance in %s: eigenvalue %.3e"
                             % (name, w.min()))
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid(feats_a, feats_b):
    """Frechet distance between Gaussian fits of the two feature sets."""
    a = _check_features(feats_a, "first", min_rows=2)
    b = _check_features(feats_b, "second", min_rows=2)
    if a.shape[1] != b.shape[1]:
        raise ContractError("feature widths differ: %d vs %d"
                            % (a.shape[1], b.shape[1]))
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    dim = a.shape[1]
    cov_a = np.cov(a, rowvar=False) + COV_JITTER * np.eye(dim)
    cov_b = np.cov(b, rowvar=False) + COV_JITTER * np.eye(dim)
    sq_a = _sqrt_eigh(cov_a, "first covariance")
    prod = sq_a @ cov_b @ sq_a
    w = np.linalg.eigvalsh((prod + prod.T) / 2.0)
    floor = -1e-6 * max(1.0, float(abs(w).max()))
    if w.min() < floor:
        raise NumericalError("degenerate covariance product: eigenvalue %.3e"
                             % w.min())
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def r_precision(hoi_feats, text_feats, top_k=(1, 2, 3), pool_size=RP_POOL,
                rng=None):
    """Retrieval precision: own text vs pool_size-1 seeded distractors.

    Rank counts strictly closer distractors only, so a distractor that
    carries the same instruction (identical embedding) ties and cannot
    displace the matched text.
    """
    hoi = _check_features(hoi_feats, "HOI")
    txt = _check_features(text_feats, "text")
    if hoi.shape != txt.shape:
        raise ContractError("HOI/text feature shapes differ")
    n = len(hoi)
    if n < pool_size:
        raise ContractError("retrieval pool needs >= %d samples, got %d"
                            % (pool_size, n))
    rng = rng or np.random.default_rng(0)
    ks = tuple(top_k) if isinstance(top_k, (tuple, list)) else (top_k,)
    hits = {k: 0 for k in ks}
    for i in range(n):
        others = np.delete(np.arange(n), i)
        distract = rng.choice(others, size=pool_size - 1, replace=False)
        d_own = np.linalg.norm(hoi[i] - txt[i])
        d_dis = np.linalg.norm(hoi[i] - txt[distract], axis=1)
        rank = 1 + int((d_dis < d_own).sum())
        for k in ks:
            hits[k] += rank <= k
    rates = {k: hits[k] / n for k in ks}
    return rates if len(ks) > 1 else rates[ks[0]]


def mm_dist(hoi_feats, text_feats):
    """Mean Euclidean distance between matched (HOI, text) feature pairs."""
    hoi = _check_features(hoi_feats, "HOI")
    txt = _check_features(text_feats, "text")
    if hoi.shape != txt.shape:
        raise ContractError("HOI/text feature shapes differ")
    return float(np.linalg.norm(hoi - txt, axis=1).mean())


def diversity(feats, subset_size=100, rng=None):
    """Mean distance between two disjoint seeded subsets of the features."""
    f = _check_features(feats, "diversity")
    if subset_size < 1:
        raise ContractError("subset size must be positive")
    if len(f) < 2 * subset_size:
        raise ContractError("diversity needs >= %d samples, got %d"
                            % (2 * subset_size, len(f)))
    rng = rng or np.random.default_rng(0)
    idx = rng.choice(len(f), size=2 * subset_size, replace=False)
    first, second = f[idx[:subset_size]], f[idx[subset_size:]]
    return float(np.linalg.norm(first - second, axis=1).mean())


def mmodality(per_text_feats, subset_size=4, rng=None):
    """Mean within-instruction spread over repeated generations.

    per_text_feats: sequence of (R_i, d) arrays, one per distinct instruction;
    each must provide at least 2 * subset_size repeats.
    """
    if not len(per_text_feats):
        raise ContractError("MModality needs at least one instruction group")
    if subset_size < 1:
        raise ContractError("subset size must be positive")
    rng = rng or np.random.default_rng(0)
    dists = []
    for gi, group in enumerate(per_text_feats):
        g = _check_features(group, "repeat group %d" % gi)
        if len(g) < 2 * subset_size:
            raise ContractError(
                "instruction group %d has %d repeats; MModality needs >= %d"
                % (gi, len(g), 2 * subset_size))
        idx = rng.choice(len(g), size=2 * subset_size, replace=False)
        first, second = g[idx[:subset_size]], g[idx[subset_size:]]
        dists.append(np.linalg.norm(first - second, axis=1).mean())
    return float(np.mean(dists))


# ---------------------------------------------------------------------------
# contact metrics (geometric, encoder-free)

def frame_contact_labels(body_frames, obj_frames, points, threshold=None):
    """Per-frame binary contact: closest hand-object distance strictly < 5 cm."""
    threshold = distance_threshold() if threshold is None else threshold
    hands = hand_points(np.asarray(body_frames, dtype=np.float64))
    posed = transform_object(np.asarray(obj_frames, dtype=np.float64),
                             np.asarray(points, dtype=np.float64))
    diff = hands[:, :, None, :] - posed[:, None, :, :]
    mins = np.sqrt((diff ** 2).sum(axis=-1)).min(axis=(1, 2))
    return (mins < threshold).astype(np.int32)


def contact_metrics(generated, reference, threshold=None):
    """(C_prec, C_%) for paired generated/reference (body, obj, geometry).

    Each argument is a sequence of triples (body_frames, obj_frames, points).
    C_prec is the per-frame accuracy of the generated contact labels against
    the reference labels; C_% is the fraction of generated frames in contact.
    """
    if len(generated) != len(reference):
        raise ContractError("generated/reference counts differ: %d vs %d"
                            % (len(generated), len(reference)))
    if not generated:
        raise ContractError("contact metrics need at least one pair")
    agree = total = positive = 0
    for gen, ref in zip(generated, reference):
        lg = frame_contact_labels(*gen, threshold=threshold)
        lr = frame_contact_labels(*ref, threshold=threshold)
        if len(lg) != len(lr):
            raise ContractError("frame counts differ: %d vs %d"
                                % (len(lg), len(lr)))
        agree += int((lg == lr).sum())
        positive += int(lg.sum())
        total += len(lg)
    return agree / total, positive / total


def contact_auc(labels, scores):
    """ROC-AUC of per-point contact probabilities vs binary labels."""
    from sklearn.metrics import roc_auc_score
    labels = np.asarray(labels).reshape(-1)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if labels.shape != scores.shape:
        raise ContractError("labels/scores length mismatch")
    if len(np.unique(labels)) < 2:
        raise ContractError("ROC-AUC needs both classes present")
    return float(roc_auc_score(labels, scores))


# ---------------------------------------------------------------------------
# repeated-evaluation protocol

@dataclass(frozen=True)
class MetricValue:
    """Mean with symmetric 95% confidence interval over seeded repeats."""
    mean: float
    ci95: float
    repeats: int

    def __str__(self):
        return "%.4f +/- %.4f (n=%d)" % (self.mean, self.ci95, self.repeats)


def summarize(values):
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        raise ContractError("cannot summarize an empty repeat list")
    ci = 1.96 * vals.std(ddof=0) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
    return MetricValue(float(vals.mean()), float(ci), len(vals))


def evaluate(real_hoi, real_text, gen_hoi, gen_text, per_text_gen=None,
             repeats=20, seed=0, diversity_subset=None, mmodality_subset=4):
    """Full metric sweep; stochastic metrics re-draw per repeat.

    real_*/gen_*: matched (HOI, text) feature arrays for the real and
    generated evaluation sets. per_text_gen: optional repeat groups for
    MModality. Returns {metric name: MetricValue}.
    """
    real_hoi = _check_features(real_hoi, "real HOI")
    gen_hoi = _check_features(gen_hoi, "generated HOI")
    if diversity_subset is None:
        diversity_subset = max(1, min(len(gen_hoi) // 2, 30))
    report = {}
    report["fid"] = summarize([fid(real_hoi, gen_hoi)])
    report["mm_dist"] = summarize([mm_dist(gen_hoi, gen_text)])

    rp, div = {1: [], 2: [], 3: []}, []
    for rep in range(repeats):
        rng = np.random.default_rng([seed, 1000 + rep])
        rates = r_precision(gen_hoi, gen_text, top_k=(1, 2, 3), rng=rng)
        for k in rp:
            rp[k].append(rates[k])
        div.append(diversity(gen_hoi, subset_size=diversity_subset, rng=rng))
    for k in (1, 2, 3):
        report["r_precision_top%d" % k] = summarize(rp[k])
    report["diversity"] = summarize(div)

    if per_text_gen is not None:
        mm = [mmodality(per_text_gen, subset_size=mmodality_subset,
                        rng=np.random.default_rng([seed, 2000 + rep]))
              for rep in range(repeats)]
        report["mmodality"] = summarize(mm)
    return report


def report_text(report, title="evaluation"):
    lines = ["# %s" % title]
    for name in sorted(report):
        lines.append("%-20s %s" % (name, report[name]))
    return "\n".join(lines) + "\n"


def report_json(report):
    return json.dumps({k: {"mean": v.mean, "ci95": v.ci95, "repeats": v.repeats}
                       for k, v in sorted(report.items())}, indent=2,
                      sort_keys=True) + "\n"


def report_csv(report):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["metric", "mean", "ci95", "repeats"])
    for name in sorted(report):
        v = report[name]
        writer.writerow([name, "%.6f" % v.mean, "%.6f" % v.ci95, v.repeats])
    return buf.getvalue()
