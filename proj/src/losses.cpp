#include "ptsm/losses.hpp"

#include <cmath>

#include "ptsm/errors.hpp"

namespace ptsm {

namespace {

void check_batched(const Shape& a, const Shape& b, const char* op) {
  check_contract(a.size() == 2 && b.size() == 2 && a[0] == b[0],
                 std::string(op) + " expects two (batch, dim) tensors with equal batch");
}

Tensor one_hot(const std::vector<i64>& labels, i64 n_classes) {
  const i64 n = static_cast<i64>(labels.size());
  Tensor out({n, n_classes});
  for (i64 i = 0; i < n; ++i) {
    const i64 y = labels[static_cast<size_t>(i)];
    check_contract(y >= 0 && y < n_classes, "label out of range");
    out.at(i, y) = 1.0;
  }
  return out;
}

}  // namespace

Var cross_entropy_var(Tape& t, Var probs, const std::vector<i64>& labels, i64* clamped) {
  const Shape& ps = t.shape(probs);
  check_contract(ps.size() == 2, "cross_entropy expects (batch, K) probabilities");
  const i64 n = ps[0];
  check_contract(static_cast<i64>(labels.size()) == n, "labels must match the batch");
  Var onehot = t.constant(one_hot(labels, ps[1]));
  Var p_true = t.sum_axis(t.mul(probs, onehot), 1);  // (N)
  if (clamped) {
    const Tensor& v = t.value(p_true);
    for (i64 i = 0; i < n; ++i)
      if (v[i] < 1e-12) ++*clamped;
  }
  Var safe = t.clamp_min(p_true, 1e-12);
  return t.scale(t.sum(t.log(safe)), -1.0 / static_cast<double>(n));
}

namespace {

// Row-wise cosine between two (N, D) matrices with the 1e-12 product guard;
// shared by mask similarity and feature orthogonality.
Var row_cosine(Tape& t, Var a, Var b, i64* zero_norm) {
  Var dots = t.sum_axis(t.mul(a, b), 1);                    // (N)
  Var na = t.sqrt(t.sum_axis(t.mul(a, a), 1));
  Var nb = t.sqrt(t.sum_axis(t.mul(b, b), 1));
  Var prod = t.mul(na, nb);
  if (zero_norm) {
    const Tensor& v = t.value(prod);
    for (i64 i = 0; i < v.numel(); ++i)
      if (v[i] < 1e-12) ++*zero_norm;
  }
  return t.div(dots, t.shift(prod, 1e-12));
}

}  // namespace

Var mask_similarity_var(Tape& t, Var m_p, Var m_c, bool use_abs, i64* zero_norm) {
  check_batched(t.shape(m_p), t.shape(m_c), "mask_similarity");
  Var cos = row_cosine(t, m_p, m_c, zero_norm);
  if (use_abs) cos = t.abs(cos);
  return t.mean(cos);
}

Var mask_sparsity_var(Tape& t, Var m_p, Var m_c) {
  check_batched(t.shape(m_p), t.shape(m_c), "mask_sparsity");
  Var rows = t.add(t.sum_axis(t.abs(m_p), 1), t.sum_axis(t.abs(m_c), 1));
  return t.mean(rows);
}

Var mask_size_var(Tape& t, Var m_p, Var m_c, double alpha_size) {
  check_batched(t.shape(m_p), t.shape(m_c), "mask_size");
  check_contract(alpha_size > 0.0 && alpha_size < 1.0, "alpha_size must lie in (0,1)");
  Var dev_p = t.abs(t.shift(t.mean_axis(m_p, 1), -alpha_size));
  Var dev_c = t.abs(t.shift(t.mean_axis(m_c, 1), -alpha_size));
  return t.mean(t.add(dev_p, dev_c));
}

Var orthogonality_var(Tape& t, Var f_task, Var f_subj, i64* zero_norm) {
  check_batched(t.shape(f_task), t.shape(f_subj), "orthogonality");
  return t.mean(t.abs(row_cosine(t, f_task, f_subj, zero_norm)));
}

Var covariance_decorrelation_var(Tape& t, Var f_task, Var f_subj) {
  check_batched(t.shape(f_task), t.shape(f_subj), "covariance_decorrelation");
  Var num = t.frobenius_norm(t.batch_cross_cov(f_task, f_subj));
  Var den = t.mul(t.frobenius_norm(t.batch_cov(f_task)), t.frobenius_norm(t.batch_cov(f_subj)));
  return t.div(num, t.shift(den, 1e-8));
}

Var info_retention_var(Tape& t, Var f_task, Var f_subj, bool trace_clamp) {
  check_batched(t.shape(f_task), t.shape(f_subj), "info_retention");
  Var tr_t = t.trace(t.batch_cov(f_task));
  Var tr_s = t.trace(t.batch_cov(f_subj));
  if (trace_clamp) {
    tr_t = t.clamp_max(tr_t, 1e3);
    tr_s = t.clamp_max(tr_s, 1e3);
  }
  return t.scale(t.add(tr_t, tr_s), -1.0);
}

Var feature_sparsity_var(Tape& t, Var f_task, Var f_subj) {
  check_batched(t.shape(f_task), t.shape(f_subj), "feature_sparsity");
  return t.add(t.l1_norm(f_task), t.l1_norm(f_subj));
}

Var nt_xent_var(Tape& t, Var embeddings, const std::vector<i64>& labels, double tau,
                bool* degenerate) {
  const Shape& es = t.shape(embeddings);
  check_contract(es.size() == 2 && es[0] >= 2, "nt_xent expects (batch >= 2, dim) embeddings");
  check_contract(tau > 0.0, "tau must be positive");
  const i64 n = es[0];
  check_contract(static_cast<i64>(labels.size()) == n, "labels must match the batch");

  Tensor pos({n, n}), offdiag({n, n});
  Tensor anchor({n}), excluded({n});
  i64 n_anchors = 0;
  for (i64 i = 0; i < n; ++i) {
    bool has_pos = false;
    for (i64 j = 0; j < n; ++j) {
      if (i == j) continue;
      offdiag.at(i, j) = 1.0;
      if (labels[static_cast<size_t>(i)] == labels[static_cast<size_t>(j)]) {
        pos.at(i, j) = 1.0;
        has_pos = true;
      }
    }
    anchor[i] = has_pos ? 1.0 : 0.0;
    excluded[i] = has_pos ? 0.0 : 1.0;
    if (has_pos) ++n_anchors;
  }
  if (degenerate) *degenerate = n_anchors == 0;
  if (n_anchors == 0) return t.constant_scalar(0.0);

  Var norms = t.shift(t.sqrt(t.sum_axis(t.mul(embeddings, embeddings), 1, true)), 1e-12);
  Var unit = t.div(embeddings, norms);                       // (N, d), rows on the sphere
  Var sim = t.matmul(unit, t.transpose(unit));               // (N, N) cosines
  Var ex = t.exp(t.scale(sim, 1.0 / tau));
  Var denom = t.sum_axis(t.mul(ex, t.constant(offdiag)), 1); // (N)
  Var numer = t.sum_axis(t.mul(ex, t.constant(pos)), 1);
  // Excluded anchors get log(1) = 0 in the numerator slot and are then zeroed.
  Var numer_safe = t.add(numer, t.constant(excluded));
  Var per_anchor = t.sub(t.log(denom), t.log(numer_safe));
  Var picked = t.mul(per_anchor, t.constant(anchor));
  return t.scale(t.sum(picked), 1.0 / static_cast<double>(n_anchors));
}

double cross_entropy(const Tensor& probs, const std::vector<i64>& labels, i64* clamped) {
  Tape t;
  return t.value(cross_entropy_var(t, t.constant(probs), labels, clamped)).item();
}

double mask_similarity(const Tensor& m_p, const Tensor& m_c, bool use_abs, i64* zero_norm) {
  Tape t;
  return t.value(mask_similarity_var(t, t.constant(m_p), t.constant(m_c), use_abs, zero_norm))
      .item();
}

double mask_sparsity(const Tensor& m_p, const Tensor& m_c) {
  Tape t;
  return t.value(mask_sparsity_var(t, t.constant(m_p), t.constant(m_c))).item();
}

double mask_size(const Tensor& m_p, const Tensor& m_c, double alpha_size) {
  Tape t;
  return t.value(mask_size_var(t, t.constant(m_p), t.constant(m_c), alpha_size)).item();
}

double orthogonality(const Tensor& f_task, const Tensor& f_subj, i64* zero_norm) {
  Tape t;
  return t.value(orthogonality_var(t, t.constant(f_task), t.constant(f_subj), zero_norm)).item();
}

double covariance_decorrelation(const Tensor& f_task, const Tensor& f_subj) {
  Tape t;
  return t.value(covariance_decorrelation_var(t, t.constant(f_task), t.constant(f_subj))).item();
}

double info_retention(const Tensor& f_task, const Tensor& f_subj, bool trace_clamp) {
  Tape t;
  return t.value(info_retention_var(t, t.constant(f_task), t.constant(f_subj), trace_clamp))
      .item();
}

double feature_sparsity(const Tensor& f_task, const Tensor& f_subj) {
  Tape t;
  return t.value(feature_sparsity_var(t, t.constant(f_task), t.constant(f_subj))).item();
}

double nt_xent(const Tensor& embeddings, const std::vector<i64>& labels, double tau,
               bool* degenerate) {
  Tape t;
  return t.value(nt_xent_var(t, t.constant(embeddings), labels, tau, degenerate)).item();
}

LossReport total_loss(const LossReport& raw, const LossWeights& w) {
  auto finite = [](double v, const char* name) {
    if (!std::isfinite(v)) throw NumericError(name, "loss component is not finite");
  };
  finite(raw.task, "task");
  finite(raw.subj, "subj");
  finite(raw.sim, "sim");
  finite(raw.sparse_mask, "sparse_mask");
  finite(raw.size, "size");
  finite(raw.orth, "orth");
  finite(raw.cov, "cov");
  finite(raw.info, "info");
  finite(raw.sparse_feat, "sparse_feat");
  finite(raw.contrast_task, "contrast_task");
  finite(raw.contrast_subj, "contrast_subj");

  LossReport r = raw;
  r.decouple = w.lambda_orth * r.orth + w.lambda_cov * r.cov + w.lambda_info * r.info +
               w.lambda_sparse_feat * r.sparse_feat;
  r.mask = w.lambda_sim * r.sim + w.lambda_sparse_mask * r.sparse_mask + w.lambda_size * r.size;
  r.contrast = w.lambda_contrast_task * r.contrast_task + w.lambda_contrast_subj * r.contrast_subj;
  r.total = r.task + w.lambda_subj * r.subj + w.lambda_decouple * r.decouple +
            w.lambda_mask * r.mask + w.lambda_contrast * r.contrast;
  finite(r.total, "total");
  return r;
}

}  // namespace ptsm
