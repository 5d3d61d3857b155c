#include "ptsm/tape.hpp"

#include <algorithm>
#include <cmath>

#include "ptsm/errors.hpp"
#include "ptsm/kernels.hpp"

namespace ptsm {

namespace {

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  check_contract(r <= 3, "broadcasting supports rank <= 3");
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    i64 da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    i64 db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    check_contract(da == db || da == 1 || db == 1,
                   "shapes " + Tensor::shape_str(a) + " and " + Tensor::shape_str(b) +
                       " do not broadcast");
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `s` padded with leading 1-dims to rank r; broadcast dims get stride 0.
std::vector<i64> bcast_strides(const Shape& s, size_t r) {
  std::vector<i64> st(r, 0);
  i64 acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i + (r - s.size())] = (s[i] == 1) ? 0 : acc;
    acc *= s[i];
  }
  return st;
}

// Calls f(out_index, a_index, b_index) for every element of the broadcast shape,
// in row-major order. Single-threaded, so gradient accumulation order is fixed.
template <class F>
void bcast_foreach(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
  const size_t r = out.size();
  const auto sta = bcast_strides(sa, r);
  const auto stb = bcast_strides(sb, r);
  std::vector<i64> c(r, 0);
  const i64 n = shape_numel(out);
  for (i64 lin = 0; lin < n; ++lin) {
    i64 ia = 0, ib = 0;
    for (size_t d = 0; d < r; ++d) {
      ia += c[d] * sta[d];
      ib += c[d] * stb[d];
    }
    f(lin, ia, ib);
    for (size_t d = r; d-- > 0;) {
      if (++c[d] < out[d]) break;
      c[d] = 0;
    }
  }
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Flat-index stride of the reduced axis and the sizes around it, for rank <= 3.
struct AxisSplit {
  i64 outer, axis, inner;
};

AxisSplit axis_split(const Shape& s, i64 axis) {
  check_contract(axis >= 0 && axis < static_cast<i64>(s.size()), "reduction axis out of range");
  i64 outer = 1, inner = 1;
  for (i64 i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (i64 i = axis + 1; i < static_cast<i64>(s.size()); ++i) inner *= s[static_cast<size_t>(i)];
  return {outer, s[static_cast<size_t>(axis)], inner};
}

Shape reduced_shape(const Shape& s, i64 axis, bool keepdim) {
  Shape out = s;
  if (keepdim) {
    out[static_cast<size_t>(axis)] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
    if (out.empty()) out = {1};
  }
  return out;
}

// Per-feature layout of a (N, F) or (N, F, T) tensor: feature axis is 1.
struct FeatureSplit {
  i64 features, inner, count;  // count = samples per feature slice
};

FeatureSplit feature_split(const Shape& s) {
  check_contract(s.size() == 2 || s.size() == 3, "batch norm expects rank 2 or 3 input");
  i64 inner = s.size() == 3 ? s[2] : 1;
  return {s[1], inner, s[0] * inner};
}

}  // namespace

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Constant: return "constant";
    case OpKind::Add: return "add";
    case OpKind::Subtract: return "subtract";
    case OpKind::Multiply: return "multiply";
    case OpKind::Divide: return "divide";
    case OpKind::Scale: return "scale";
    case OpKind::Shift: return "shift";
    case OpKind::ClampMin: return "clamp_min";
    case OpKind::ClampMax: return "clamp_max";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Elu: return "elu";
    case OpKind::Relu: return "relu";
    case OpKind::Log: return "log";
    case OpKind::Exp: return "exp";
    case OpKind::Abs: return "abs";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Reshape: return "reshape";
    case OpKind::Transpose: return "transpose";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::Matmul: return "matmul";
    case OpKind::Conv1d: return "conv1d";
    case OpKind::Softmax: return "softmax_rows";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::SumAxis: return "sum_axis";
    case OpKind::MeanAxis: return "mean_axis";
    case OpKind::L1Norm: return "l1_norm";
    case OpKind::L2Norm: return "l2_norm";
    case OpKind::FrobeniusNorm: return "frobenius_norm";
    case OpKind::Trace: return "trace";
    case OpKind::BatchCov: return "batch_cov";
    case OpKind::BatchCrossCov: return "batch_cross_cov";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::Dropout: return "dropout";
    case OpKind::AdaptiveAvgPool: return "adaptive_avg_pool";
  }
  return "?";
}

std::vector<std::string> primitive_set() {
  std::vector<std::string> names;
  for (int k = static_cast<int>(OpKind::Add); k <= static_cast<int>(OpKind::AdaptiveAvgPool); ++k)
    names.push_back(op_name(static_cast<OpKind>(k)));
  return names;
}

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

const Tape::Node& Tape::node(Var v) const {
  check_contract(v.id >= 0 && v.id < static_cast<int>(nodes_.size()), "stale tape handle");
  return nodes_[static_cast<size_t>(v.id)];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

Var Tape::leaf(const Tensor& value) {
  check_contract(value.numel() > 0, "leaf tensor must be non-empty");
  return {push({OpKind::Leaf, -1, -1, -1, value, {}, {}, 0.0, 0, 0})};
}

Var Tape::constant(const Tensor& value) {
  check_contract(value.numel() > 0, "constant tensor must be non-empty");
  return {push({OpKind::Constant, -1, -1, -1, value, {}, {}, 0.0, 0, 0})};
}

Var Tape::add(Var a, Var b) {
  const Tensor &va = value(a), &vb = value(b);
  Tensor out(broadcast_shape(va.shape(), vb.shape()));
  bcast_foreach(out.shape(), va.shape(), vb.shape(),
                [&](i64 i, i64 ia, i64 ib) { out[i] = va[ia] + vb[ib]; });
  return {push({OpKind::Add, a.id, b.id, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::sub(Var a, Var b) {
  const Tensor &va = value(a), &vb = value(b);
  Tensor out(broadcast_shape(va.shape(), vb.shape()));
  bcast_foreach(out.shape(), va.shape(), vb.shape(),
                [&](i64 i, i64 ia, i64 ib) { out[i] = va[ia] - vb[ib]; });
  return {push({OpKind::Subtract, a.id, b.id, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::mul(Var a, Var b) {
  const Tensor &va = value(a), &vb = value(b);
  Tensor out(broadcast_shape(va.shape(), vb.shape()));
  bcast_foreach(out.shape(), va.shape(), vb.shape(),
                [&](i64 i, i64 ia, i64 ib) { out[i] = va[ia] * vb[ib]; });
  return {push({OpKind::Multiply, a.id, b.id, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::div(Var a, Var b) {
  const Tensor &va = value(a), &vb = value(b);
  Tensor out(broadcast_shape(va.shape(), vb.shape()));
  bcast_foreach(out.shape(), va.shape(), vb.shape(),
                [&](i64 i, i64 ia, i64 ib) { out[i] = va[ia] / vb[ib]; });
  return {push({OpKind::Divide, a.id, b.id, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::scale(Var a, double c) {
  Tensor out = value(a);
  for (i64 i = 0; i < out.numel(); ++i) out[i] *= c;
  return {push({OpKind::Scale, a.id, -1, -1, std::move(out), {}, {}, c, 0, 0})};
}

Var Tape::shift(Var a, double c) {
  Tensor out = value(a);
  for (i64 i = 0; i < out.numel(); ++i) out[i] += c;
  return {push({OpKind::Shift, a.id, -1, -1, std::move(out), {}, {}, c, 0, 0})};
}

Var Tape::clamp_min(Var a, double c) {
  Tensor out = value(a);
  for (i64 i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], c);
  return {push({OpKind::ClampMin, a.id, -1, -1, std::move(out), {}, {}, c, 0, 0})};
}

Var Tape::clamp_max(Var a, double c) {
  Tensor out = value(a);
  for (i64 i = 0; i < out.numel(); ++i) out[i] = std::min(out[i], c);
  return {push({OpKind::ClampMax, a.id, -1, -1, std::move(out), {}, {}, c, 0, 0})};
}

Var Tape::sigmoid(Var a) {
  Tensor out = value(a);
  for (i64 i = 0; i < out.numel(); ++i) out[i] = stable_sigmoid(out[i]);
  return {push({OpKind::Sigmoid, a.id, -1, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::elu(Var a) {
  Tensor out = value(a);
  for (i64 i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : std::expm1(out[i]);
  return {push({OpKind::Elu, a.id, -1, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::relu(Var a) {
  Tensor out = value(a);
  for (i64 i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], 0.0);
  return {push({OpKind::Relu, a.id, -1, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::log(Var a) {
  Tensor out = value(a);
  for (i64 i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
  return {push({OpKind::Log, a.id, -1, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::exp(Var a) {
  Tensor out = value(a);
  for (i64 i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
  return {push({OpKind::Exp, a.id, -1, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::abs(Var a) {
  Tensor out = value(a);
  for (i64 i = 0; i < out.numel(); ++i) out[i] = std::abs(out[i]);
  return {push({OpKind::Abs, a.id, -1, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::sqrt(Var a) {
  Tensor out = value(a);
  for (i64 i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
  return {push({OpKind::Sqrt, a.id, -1, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::reshape(Var a, Shape s) {
  Tensor out = value(a).reshaped(std::move(s));
  return {push({OpKind::Reshape, a.id, -1, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::transpose(Var a) {
  const Tensor& va = value(a);
  check_contract(va.rank() == 2, "transpose expects a matrix");
  const i64 r = va.dim(0), c = va.dim(1);
  Tensor out({c, r});
  for (i64 i = 0; i < r; ++i)
    for (i64 j = 0; j < c; ++j) out.at(j, i) = va.at(i, j);
  return {push({OpKind::Transpose, a.id, -1, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::concat_cols(Var a, Var b) {
  const Tensor &va = value(a), &vb = value(b);
  check_contract(va.rank() == 2 && vb.rank() == 2 && va.dim(0) == vb.dim(0),
                 "concat_cols expects matrices with equal row counts");
  const i64 n = va.dim(0), ca = va.dim(1), cb = vb.dim(1);
  Tensor out({n, ca + cb});
  for (i64 i = 0; i < n; ++i) {
    for (i64 j = 0; j < ca; ++j) out.at(i, j) = va.at(i, j);
    for (i64 j = 0; j < cb; ++j) out.at(i, ca + j) = vb.at(i, j);
  }
  return {push({OpKind::ConcatCols, a.id, b.id, -1, std::move(out), {}, {}, 0.0, ca, cb})};
}

Var Tape::matmul(Var a, Var b) {
  const Tensor &va = value(a), &vb = value(b);
  check_contract(va.rank() == 2 && vb.rank() == 2 && va.dim(1) == vb.dim(0),
                 "matmul shape mismatch: " + Tensor::shape_str(va.shape()) + " @ " +
                     Tensor::shape_str(vb.shape()));
  const i64 m = va.dim(0), k = va.dim(1), n = vb.dim(1);
  Tensor out({m, n});
  kernels::gemm(false, false, m, n, k, 1.0, va.data(), k, vb.data(), n, 0.0, out.data(), n);
  return {push({OpKind::Matmul, a.id, b.id, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::sum(Var a) {
  return {push({OpKind::Sum, a.id, -1, -1, Tensor::scalar(value(a).sum()), {}, {}, 0.0, 0, 0})};
}

Var Tape::mean(Var a) {
  const Tensor& va = value(a);
  Tensor out = Tensor::scalar(va.sum() / static_cast<double>(va.numel()));
  return {push({OpKind::Mean, a.id, -1, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::sum_axis(Var a, i64 axis, bool keepdim) {
  const Tensor& va = value(a);
  const auto sp = axis_split(va.shape(), axis);
  Tensor out(reduced_shape(va.shape(), axis, keepdim));
  for (i64 o = 0; o < sp.outer; ++o)
    for (i64 in = 0; in < sp.inner; ++in) {
      double acc = 0.0;
      for (i64 x = 0; x < sp.axis; ++x) acc += va[(o * sp.axis + x) * sp.inner + in];
      out[o * sp.inner + in] = acc;
    }
  return {push({OpKind::SumAxis, a.id, -1, -1, std::move(out), {}, {}, 0.0, axis, keepdim})};
}

Var Tape::mean_axis(Var a, i64 axis, bool keepdim) {
  const Tensor& va = value(a);
  const auto sp = axis_split(va.shape(), axis);
  Tensor out(reduced_shape(va.shape(), axis, keepdim));
  for (i64 o = 0; o < sp.outer; ++o)
    for (i64 in = 0; in < sp.inner; ++in) {
      double acc = 0.0;
      for (i64 x = 0; x < sp.axis; ++x) acc += va[(o * sp.axis + x) * sp.inner + in];
      out[o * sp.inner + in] = acc / static_cast<double>(sp.axis);
    }
  return {push({OpKind::MeanAxis, a.id, -1, -1, std::move(out), {}, {}, 0.0, axis, keepdim})};
}

Var Tape::l1_norm(Var a) {
  const Tensor& va = value(a);
  double acc = 0.0;
  for (i64 i = 0; i < va.numel(); ++i) acc += std::abs(va[i]);
  return {push({OpKind::L1Norm, a.id, -1, -1, Tensor::scalar(acc), {}, {}, 0.0, 0, 0})};
}

Var Tape::l2_norm(Var a) {
  const Tensor& va = value(a);
  double acc = 0.0;
  for (i64 i = 0; i < va.numel(); ++i) acc += va[i] * va[i];
  Tensor out = Tensor::scalar(std::sqrt(acc));
  return {push({OpKind::L2Norm, a.id, -1, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::frobenius_norm(Var a) {
  check_contract(value(a).rank() == 2, "frobenius_norm expects a matrix");
  const Tensor& va = value(a);
  double acc = 0.0;
  for (i64 i = 0; i < va.numel(); ++i) acc += va[i] * va[i];
  Tensor out = Tensor::scalar(std::sqrt(acc));
  return {push({OpKind::FrobeniusNorm, a.id, -1, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

Var Tape::trace(Var a) {
  const Tensor& va = value(a);
  check_contract(va.rank() == 2 && va.dim(0) == va.dim(1), "trace expects a square matrix");
  double acc = 0.0;
  for (i64 i = 0; i < va.dim(0); ++i) acc += va.at(i, i);
  return {push({OpKind::Trace, a.id, -1, -1, Tensor::scalar(acc), {}, {}, 0.0, 0, 0})};
}

// Sample covariance of row vectors: centered, normalized by N - 1.
Var Tape::batch_cov(Var x) {
  const Tensor& vx = value(x);
  check_contract(vx.rank() == 2, "batch_cov expects (N, d)");
  const i64 n = vx.dim(0), d = vx.dim(1);
  check_contract(n >= 2, "batch_cov needs at least 2 rows");
  Tensor centered({n, d});
  for (i64 j = 0; j < d; ++j) {
    double m = 0.0;
    for (i64 i = 0; i < n; ++i) m += vx.at(i, j);
    m /= static_cast<double>(n);
    for (i64 i = 0; i < n; ++i) centered.at(i, j) = vx.at(i, j) - m;
  }
  Tensor out({d, d});
  kernels::gemm(true, false, d, d, n, 1.0 / static_cast<double>(n - 1), centered.data(), d,
                centered.data(), d, 0.0, out.data(), d);
  return {push({OpKind::BatchCov, x.id, -1, -1, std::move(out), std::move(centered), {}, 0.0, 0, 0})};
}

Var Tape::batch_cross_cov(Var x, Var y) {
  const Tensor &vx = value(x), &vy = value(y);
  check_contract(vx.rank() == 2 && vy.rank() == 2 && vx.dim(0) == vy.dim(0),
                 "batch_cross_cov expects (N, d1) and (N, d2)");
  const i64 n = vx.dim(0), d1 = vx.dim(1), d2 = vy.dim(1);
  check_contract(n >= 2, "batch_cross_cov needs at least 2 rows");
  auto center = [n](const Tensor& v, i64 d) {
    Tensor c({n, d});
    for (i64 j = 0; j < d; ++j) {
      double m = 0.0;
      for (i64 i = 0; i < n; ++i) m += v.at(i, j);
      m /= static_cast<double>(n);
      for (i64 i = 0; i < n; ++i) c.at(i, j) = v.at(i, j) - m;
    }
    return c;
  };
  Tensor cx = center(vx, d1), cy = center(vy, d2);
  Tensor out({d1, d2});
  kernels::gemm(true, false, d1, d2, n, 1.0 / static_cast<double>(n - 1), cx.data(), d1, cy.data(),
                d2, 0.0, out.data(), d2);
  return {push(
      {OpKind::BatchCrossCov, x.id, y.id, -1, std::move(out), std::move(cx), std::move(cy), 0.0, 0, 0})};
}

Var Tape::softmax_rows(Var a) {
  const Tensor& va = value(a);
  check_contract(va.rank() == 2, "softmax_rows expects (N, K)");
  const i64 n = va.dim(0), k = va.dim(1);
  Tensor out({n, k});
  for (i64 i = 0; i < n; ++i) {
    double mx = va.at(i, 0);
    for (i64 j = 1; j < k; ++j) mx = std::max(mx, va.at(i, j));
    double z = 0.0;
    for (i64 j = 0; j < k; ++j) {
      out.at(i, j) = std::exp(va.at(i, j) - mx);
      z += out.at(i, j);
    }
    for (i64 j = 0; j < k; ++j) out.at(i, j) /= z;
  }
  return {push({OpKind::Softmax, a.id, -1, -1, std::move(out), {}, {}, 0.0, 0, 0})};
}

// Stride-1 "same" cross-correlation: x (N, C_in, T), w (C_out, C_in, K), b (C_out).
Var Tape::conv1d(Var x, Var w, Var b, i64 pad) {
  const Tensor &vx = value(x), &vw = value(w), &vb = value(b);
  check_contract(vx.rank() == 3 && vw.rank() == 3, "conv1d expects (N,C,T) input and (F,C,K) weight");
  check_contract(vx.dim(1) == vw.dim(1), "conv1d channel mismatch");
  const i64 n = vx.dim(0), t = vx.dim(2);
  const i64 c_out = vw.dim(0), kernel = vw.dim(2);
  check_contract(2 * pad == kernel - 1, "conv1d supports stride-1 same padding only");
  check_contract(vb.numel() == c_out, "conv1d bias size mismatch");

  Tensor col;
  kernels::im2col(vx, kernel, pad, col);  // (C_in*K, N*T)
  Tensor prod({c_out, n * t});
  kernels::gemm(false, false, c_out, n * t, vw.dim(1) * kernel, 1.0, vw.data(), vw.dim(1) * kernel,
                col.data(), n * t, 0.0, prod.data(), n * t);
  Tensor out({n, c_out, t});
  for (i64 co = 0; co < c_out; ++co) {
    const double bias = vb[co];
    const double* src = prod.data() + co * n * t;
    for (i64 i = 0; i < n; ++i) {
      double* dst = out.data() + (i * c_out + co) * t;
      const double* s = src + i * t;
      for (i64 p = 0; p < t; ++p) dst[p] = s[p] + bias;
    }
  }
  return {push({OpKind::Conv1d, x.id, w.id, b.id, std::move(out), std::move(col), {}, 0.0, pad, 0})};
}

Var Tape::batch_norm(Var x, Var gamma, Var beta, BnState& state, Mode mode) {
  const Tensor &vx = value(x), &vg = value(gamma), &vbeta = value(beta);
  const auto fs = feature_split(vx.shape());
  check_contract(vg.numel() == fs.features && vbeta.numel() == fs.features,
                 "batch norm parameter size mismatch");
  check_contract(state.running_mean.numel() == fs.features, "batch norm state size mismatch");

  Tensor out(vx.shape());
  if (mode == Mode::Train) {
    check_contract(fs.count >= 2, "training-mode batch norm needs at least 2 samples per feature");
    Tensor mean({fs.features}), var({fs.features}), invstd({fs.features});
    for (i64 f = 0; f < fs.features; ++f) {
      double m = 0.0;
      for (i64 o = 0; o < vx.dim(0); ++o)
        for (i64 in = 0; in < fs.inner; ++in) m += vx[(o * fs.features + f) * fs.inner + in];
      m /= static_cast<double>(fs.count);
      double v = 0.0;
      for (i64 o = 0; o < vx.dim(0); ++o)
        for (i64 in = 0; in < fs.inner; ++in) {
          const double d = vx[(o * fs.features + f) * fs.inner + in] - m;
          v += d * d;
        }
      v /= static_cast<double>(fs.count);
      mean[f] = m;
      var[f] = v;
      invstd[f] = 1.0 / std::sqrt(v + state.eps);
    }
    Tensor xhat(vx.shape());
    for (i64 i = 0; i < vx.numel(); ++i) {
      const i64 f = (i / fs.inner) % fs.features;
      xhat[i] = (vx[i] - mean[f]) * invstd[f];
      out[i] = vg[f] * xhat[i] + vbeta[f];
    }
    const double unbias = static_cast<double>(fs.count) / static_cast<double>(fs.count - 1);
    for (i64 f = 0; f < fs.features; ++f) {
      state.running_mean[f] = (1.0 - state.momentum) * state.running_mean[f] + state.momentum * mean[f];
      state.running_var[f] =
          (1.0 - state.momentum) * state.running_var[f] + state.momentum * var[f] * unbias;
    }
    return {push({OpKind::BatchNorm, x.id, gamma.id, beta.id, std::move(out), std::move(invstd),
                  std::move(xhat), 0.0, 1, 0})};
  }

  Tensor scale({fs.features}), xhat(vx.shape());
  for (i64 f = 0; f < fs.features; ++f)
    scale[f] = 1.0 / std::sqrt(state.running_var[f] + state.eps);
  for (i64 i = 0; i < vx.numel(); ++i) {
    const i64 f = (i / fs.inner) % fs.features;
    xhat[i] = (vx[i] - state.running_mean[f]) * scale[f];
    out[i] = vg[f] * xhat[i] + vbeta[f];
  }
  Tensor gscale({fs.features});
  for (i64 f = 0; f < fs.features; ++f) gscale[f] = vg[f] * scale[f];
  return {push({OpKind::BatchNorm, x.id, gamma.id, beta.id, std::move(out), std::move(gscale),
                std::move(xhat), 0.0, 0, 0})};
}

Var Tape::dropout(Var a, double rate, Mode mode) {
  check_contract(rate >= 0.0 && rate < 1.0, "dropout rate must be in [0, 1)");
  if (mode == Mode::Eval || rate == 0.0) return a;  // identity, nothing recorded
  const Tensor& va = value(a);
  const double keep = 1.0 - rate;
  Tensor mask(va.shape());
  Tensor out(va.shape());
  for (i64 i = 0; i < va.numel(); ++i) {
    mask[i] = rng_.uniform() < keep ? 1.0 / keep : 0.0;
    out[i] = va[i] * mask[i];
  }
  return {push({OpKind::Dropout, a.id, -1, -1, std::move(out), std::move(mask), {}, rate, 0, 0})};
}

// Equal-width bins over the time axis; the first T % T' bins get one extra sample.
Var Tape::adaptive_avg_pool(Var a, i64 t_out) {
  const Tensor& va = value(a);
  check_contract(va.rank() == 3, "adaptive_avg_pool expects (N, C, T)");
  check_contract(t_out >= 1 && t_out <= va.dim(2), "pool target must be in [1, T]");
  const i64 n = va.dim(0), c = va.dim(1), t = va.dim(2);
  const i64 base = t / t_out, rem = t % t_out;
  Tensor out({n, c, t_out});
  for (i64 i = 0; i < n; ++i)
    for (i64 ch = 0; ch < c; ++ch)
      for (i64 b = 0; b < t_out; ++b) {
        const i64 w = base + (b < rem ? 1 : 0);
        const i64 start = b * base + std::min(b, rem);
        double acc = 0.0;
        for (i64 p = 0; p < w; ++p) acc += va.at(i, ch, start + p);
        out.at(i, ch, b) = acc / static_cast<double>(w);
      }
  return {push({OpKind::AdaptiveAvgPool, a.id, -1, -1, std::move(out), {}, {}, 0.0, t_out, 0})};
}

void Tape::accumulate(int id, const Tensor& g) {
  if (id < 0) return;
  Tensor& slot = grads_[static_cast<size_t>(id)];
  if (slot.empty()) {
    slot = g;
  } else {
    check_contract(slot.same_shape(g), "gradient shape mismatch");
    slot.add_scaled(g, 1.0);
  }
}

void Tape::accumulate_move(int id, Tensor&& g) {
  if (id < 0) return;
  Tensor& slot = grads_[static_cast<size_t>(id)];
  if (slot.empty()) {
    slot = std::move(g);
  } else {
    check_contract(slot.same_shape(g), "gradient shape mismatch");
    slot.add_scaled(g, 1.0);
  }
}

void Tape::backward(Var root) {
  check_contract(root.id >= 0 && root.id < static_cast<int>(nodes_.size()), "stale tape handle");
  check_contract(value(root).numel() == 1, "backward root must be a scalar");
  grads_.assign(nodes_.size(), Tensor());
  grads_[static_cast<size_t>(root.id)] = Tensor::scalar(1.0);
  for (int id = root.id; id >= 0; --id) {
    if (grads_[static_cast<size_t>(id)].empty()) continue;
    backprop_node(id);
  }
}

Tensor Tape::grad(Var v) const {
  check_contract(v.id >= 0 && v.id < static_cast<int>(nodes_.size()), "stale tape handle");
  if (!grads_.empty()) {
    const Tensor& g = grads_[static_cast<size_t>(v.id)];
    if (!g.empty()) return g;
  }
  return Tensor(value(v).shape());
}

void Tape::clear_grads() { grads_.clear(); }

void Tape::backprop_node(int id) {
  Node& nd = nodes_[static_cast<size_t>(id)];
  const Tensor& gy = grads_[static_cast<size_t>(id)];
  switch (nd.op) {
    case OpKind::Leaf:
    case OpKind::Constant:
      return;

    case OpKind::Add: {
      const Tensor &va = nodes_[nd.a].value, &vb = nodes_[nd.b].value;
      Tensor ga(va.shape()), gb(vb.shape());
      bcast_foreach(nd.value.shape(), va.shape(), vb.shape(), [&](i64 i, i64 ia, i64 ib) {
        ga[ia] += gy[i];
        gb[ib] += gy[i];
      });
      accumulate_move(nd.a, std::move(ga));
      accumulate_move(nd.b, std::move(gb));
      return;
    }
    case OpKind::Subtract: {
      const Tensor &va = nodes_[nd.a].value, &vb = nodes_[nd.b].value;
      Tensor ga(va.shape()), gb(vb.shape());
      bcast_foreach(nd.value.shape(), va.shape(), vb.shape(), [&](i64 i, i64 ia, i64 ib) {
        ga[ia] += gy[i];
        gb[ib] -= gy[i];
      });
      accumulate_move(nd.a, std::move(ga));
      accumulate_move(nd.b, std::move(gb));
      return;
    }
    case OpKind::Multiply: {
      const Tensor &va = nodes_[nd.a].value, &vb = nodes_[nd.b].value;
      Tensor ga(va.shape()), gb(vb.shape());
      bcast_foreach(nd.value.shape(), va.shape(), vb.shape(), [&](i64 i, i64 ia, i64 ib) {
        ga[ia] += gy[i] * vb[ib];
        gb[ib] += gy[i] * va[ia];
      });
      accumulate_move(nd.a, std::move(ga));
      accumulate_move(nd.b, std::move(gb));
      return;
    }
    case OpKind::Divide: {
      const Tensor &va = nodes_[nd.a].value, &vb = nodes_[nd.b].value;
      Tensor ga(va.shape()), gb(vb.shape());
      bcast_foreach(nd.value.shape(), va.shape(), vb.shape(), [&](i64 i, i64 ia, i64 ib) {
        ga[ia] += gy[i] / vb[ib];
        gb[ib] -= gy[i] * va[ia] / (vb[ib] * vb[ib]);
      });
      accumulate_move(nd.a, std::move(ga));
      accumulate_move(nd.b, std::move(gb));
      return;
    }
    case OpKind::Scale: {
      Tensor ga = gy;
      for (i64 i = 0; i < ga.numel(); ++i) ga[i] *= nd.d0;
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::Shift:
      accumulate(nd.a, gy);
      return;
    case OpKind::ClampMin: {
      const Tensor& va = nodes_[nd.a].value;
      Tensor ga(va.shape());
      for (i64 i = 0; i < ga.numel(); ++i) ga[i] = va[i] >= nd.d0 ? gy[i] : 0.0;
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::ClampMax: {
      const Tensor& va = nodes_[nd.a].value;
      Tensor ga(va.shape());
      for (i64 i = 0; i < ga.numel(); ++i) ga[i] = va[i] <= nd.d0 ? gy[i] : 0.0;
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::Sigmoid: {
      Tensor ga(nd.value.shape());
      for (i64 i = 0; i < ga.numel(); ++i) ga[i] = gy[i] * nd.value[i] * (1.0 - nd.value[i]);
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::Elu: {
      const Tensor& va = nodes_[nd.a].value;
      Tensor ga(va.shape());
      for (i64 i = 0; i < ga.numel(); ++i) ga[i] = gy[i] * (va[i] > 0.0 ? 1.0 : nd.value[i] + 1.0);
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::Relu: {
      const Tensor& va = nodes_[nd.a].value;
      Tensor ga(va.shape());
      for (i64 i = 0; i < ga.numel(); ++i) ga[i] = va[i] > 0.0 ? gy[i] : 0.0;
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::Log: {
      const Tensor& va = nodes_[nd.a].value;
      Tensor ga(va.shape());
      for (i64 i = 0; i < ga.numel(); ++i) ga[i] = gy[i] / va[i];
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::Exp: {
      Tensor ga(nd.value.shape());
      for (i64 i = 0; i < ga.numel(); ++i) ga[i] = gy[i] * nd.value[i];
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::Abs: {
      const Tensor& va = nodes_[nd.a].value;
      Tensor ga(va.shape());
      for (i64 i = 0; i < ga.numel(); ++i)
        ga[i] = va[i] > 0.0 ? gy[i] : (va[i] < 0.0 ? -gy[i] : 0.0);
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::Sqrt: {
      Tensor ga(nd.value.shape());
      for (i64 i = 0; i < ga.numel(); ++i) ga[i] = gy[i] * 0.5 / nd.value[i];
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::Reshape: {
      accumulate_move(nd.a, gy.reshaped(nodes_[nd.a].value.shape()));
      return;
    }
    case OpKind::Transpose: {
      const i64 r = nd.value.dim(0), c = nd.value.dim(1);
      Tensor ga({c, r});
      for (i64 i = 0; i < r; ++i)
        for (i64 j = 0; j < c; ++j) ga.at(j, i) = gy.at(i, j);
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::ConcatCols: {
      const i64 n = nd.value.dim(0), ca = nd.i0, cb = nd.i1;
      Tensor ga({n, ca}), gb({n, cb});
      for (i64 i = 0; i < n; ++i) {
        for (i64 j = 0; j < ca; ++j) ga.at(i, j) = gy.at(i, j);
        for (i64 j = 0; j < cb; ++j) gb.at(i, j) = gy.at(i, ca + j);
      }
      accumulate_move(nd.a, std::move(ga));
      accumulate_move(nd.b, std::move(gb));
      return;
    }
    case OpKind::Matmul: {
      const Tensor &va = nodes_[nd.a].value, &vb = nodes_[nd.b].value;
      const i64 m = va.dim(0), k = va.dim(1), n = vb.dim(1);
      Tensor ga({m, k}), gb({k, n});
      kernels::gemm(false, true, m, k, n, 1.0, gy.data(), n, vb.data(), n, 0.0, ga.data(), k);
      kernels::gemm(true, false, k, n, m, 1.0, va.data(), k, gy.data(), n, 0.0, gb.data(), n);
      accumulate_move(nd.a, std::move(ga));
      accumulate_move(nd.b, std::move(gb));
      return;
    }
    case OpKind::Conv1d: {
      const Tensor &vx = nodes_[nd.a].value, &vw = nodes_[nd.b].value;
      const i64 n = vx.dim(0), c_in = vx.dim(1), t = vx.dim(2);
      const i64 c_out = vw.dim(0), kernel = vw.dim(2);
      // gy (N, C_out, T) -> row layout (C_out, N*T) matching the patch matrix.
      Tensor gprod({c_out, n * t});
      for (i64 co = 0; co < c_out; ++co)
        for (i64 i = 0; i < n; ++i) {
          const double* src = gy.data() + (i * c_out + co) * t;
          double* dst = gprod.data() + co * n * t + i * t;
          for (i64 p = 0; p < t; ++p) dst[p] = src[p];
        }
      Tensor gb({c_out});
      for (i64 co = 0; co < c_out; ++co) {
        double acc = 0.0;
        const double* src = gprod.data() + co * n * t;
        for (i64 p = 0; p < n * t; ++p) acc += src[p];
        gb[co] = acc;
      }
      Tensor gw({c_out, c_in, kernel});
      kernels::gemm(false, true, c_out, c_in * kernel, n * t, 1.0, gprod.data(), n * t,
                    nd.aux.data(), n * t, 0.0, gw.data(), c_in * kernel);
      Tensor gcol({c_in * kernel, n * t});
      kernels::gemm(true, false, c_in * kernel, n * t, c_out, 1.0, vw.data(), c_in * kernel,
                    gprod.data(), n * t, 0.0, gcol.data(), n * t);
      Tensor gx;
      kernels::col2im(gcol, n, c_in, t, kernel, nd.i0, gx);
      accumulate_move(nd.a, std::move(gx));
      accumulate_move(nd.b, std::move(gw));
      accumulate_move(nd.c, std::move(gb));
      return;
    }
    case OpKind::Softmax: {
      const i64 n = nd.value.dim(0), k = nd.value.dim(1);
      Tensor ga({n, k});
      for (i64 i = 0; i < n; ++i) {
        double dot = 0.0;
        for (i64 j = 0; j < k; ++j) dot += gy.at(i, j) * nd.value.at(i, j);
        for (i64 j = 0; j < k; ++j) ga.at(i, j) = nd.value.at(i, j) * (gy.at(i, j) - dot);
      }
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::Sum: {
      Tensor ga(nodes_[nd.a].value.shape(), gy[0]);
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::Mean: {
      const Tensor& va = nodes_[nd.a].value;
      Tensor ga(va.shape(), gy[0] / static_cast<double>(va.numel()));
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::SumAxis:
    case OpKind::MeanAxis: {
      const Tensor& va = nodes_[nd.a].value;
      const auto sp = axis_split(va.shape(), nd.i0);
      const double div = nd.op == OpKind::MeanAxis ? static_cast<double>(sp.axis) : 1.0;
      Tensor ga(va.shape());
      for (i64 o = 0; o < sp.outer; ++o)
        for (i64 in = 0; in < sp.inner; ++in) {
          const double g = gy[o * sp.inner + in] / div;
          for (i64 x = 0; x < sp.axis; ++x) ga[(o * sp.axis + x) * sp.inner + in] = g;
        }
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::L1Norm: {
      const Tensor& va = nodes_[nd.a].value;
      Tensor ga(va.shape());
      for (i64 i = 0; i < ga.numel(); ++i)
        ga[i] = va[i] > 0.0 ? gy[0] : (va[i] < 0.0 ? -gy[0] : 0.0);
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::L2Norm:
    case OpKind::FrobeniusNorm: {
      const Tensor& va = nodes_[nd.a].value;
      const double norm = std::max(nd.value[0], 1e-12);
      Tensor ga(va.shape());
      for (i64 i = 0; i < ga.numel(); ++i) ga[i] = gy[0] * va[i] / norm;
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::Trace: {
      const i64 d = nodes_[nd.a].value.dim(0);
      Tensor ga({d, d});
      for (i64 i = 0; i < d; ++i) ga.at(i, i) = gy[0];
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::BatchCov: {
      // d/dX of cov = centered @ (G + G^T) / (N-1); centering drops out because
      // the centered matrix has zero column sums.
      const Tensor& centered = nd.aux;
      const i64 n = centered.dim(0), d = centered.dim(1);
      Tensor gsym({d, d});
      for (i64 i = 0; i < d; ++i)
        for (i64 j = 0; j < d; ++j) gsym.at(i, j) = gy.at(i, j) + gy.at(j, i);
      Tensor ga({n, d});
      kernels::gemm(false, false, n, d, d, 1.0 / static_cast<double>(n - 1), centered.data(), d,
                    gsym.data(), d, 0.0, ga.data(), d);
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::BatchCrossCov: {
      const Tensor &cx = nd.aux, &cy = nd.aux2;
      const i64 n = cx.dim(0), d1 = cx.dim(1), d2 = cy.dim(1);
      Tensor ga({n, d1}), gb({n, d2});
      kernels::gemm(false, true, n, d1, d2, 1.0 / static_cast<double>(n - 1), cy.data(), d2,
                    gy.data(), d2, 0.0, ga.data(), d1);
      kernels::gemm(false, false, n, d2, d1, 1.0 / static_cast<double>(n - 1), cx.data(), d1,
                    gy.data(), d2, 0.0, gb.data(), d2);
      accumulate_move(nd.a, std::move(ga));
      accumulate_move(nd.b, std::move(gb));
      return;
    }
    case OpKind::BatchNorm: {
      const Tensor& vx = nodes_[nd.a].value;
      const Tensor& vg = nodes_[nd.b].value;
      const auto fs = feature_split(vx.shape());
      const Tensor& xhat = nd.aux2;
      Tensor dgamma({fs.features}), dbeta({fs.features});
      for (i64 i = 0; i < vx.numel(); ++i) {
        const i64 f = (i / fs.inner) % fs.features;
        dgamma[f] += gy[i] * xhat[i];
        dbeta[f] += gy[i];
      }
      Tensor gx(vx.shape());
      if (nd.i0 == 1) {  // training mode: aux holds 1/sqrt(var + eps)
        const Tensor& invstd = nd.aux;
        Tensor sum_dxh({fs.features}), sum_dxh_xh({fs.features});
        for (i64 i = 0; i < vx.numel(); ++i) {
          const i64 f = (i / fs.inner) % fs.features;
          const double dxh = gy[i] * vg[f];
          sum_dxh[f] += dxh;
          sum_dxh_xh[f] += dxh * xhat[i];
        }
        const double m = static_cast<double>(fs.count);
        for (i64 i = 0; i < vx.numel(); ++i) {
          const i64 f = (i / fs.inner) % fs.features;
          const double dxh = gy[i] * vg[f];
          gx[i] = invstd[f] / m * (m * dxh - sum_dxh[f] - xhat[i] * sum_dxh_xh[f]);
        }
      } else {  // eval mode: aux holds gamma / sqrt(running_var + eps)
        const Tensor& gscale = nd.aux;
        for (i64 i = 0; i < vx.numel(); ++i) {
          const i64 f = (i / fs.inner) % fs.features;
          gx[i] = gy[i] * gscale[f];
        }
      }
      accumulate_move(nd.a, std::move(gx));
      accumulate_move(nd.b, std::move(dgamma));
      accumulate_move(nd.c, std::move(dbeta));
      return;
    }
    case OpKind::Dropout: {
      const Tensor& mask = nd.aux;
      Tensor ga(nd.value.shape());
      for (i64 i = 0; i < ga.numel(); ++i) ga[i] = gy[i] * mask[i];
      accumulate_move(nd.a, std::move(ga));
      return;
    }
    case OpKind::AdaptiveAvgPool: {
      const Tensor& va = nodes_[nd.a].value;
      const i64 n = va.dim(0), c = va.dim(1), t = va.dim(2), t_out = nd.i0;
      const i64 base = t / t_out, rem = t % t_out;
      Tensor ga(va.shape());
      for (i64 i = 0; i < n; ++i)
        for (i64 ch = 0; ch < c; ++ch)
          for (i64 b = 0; b < t_out; ++b) {
            const i64 w = base + (b < rem ? 1 : 0);
            const i64 start = b * base + std::min(b, rem);
            const double g = gy.at(i, ch, b) / static_cast<double>(w);
            for (i64 p = 0; p < w; ++p) ga.at(i, ch, start + p) += g;
          }
      accumulate_move(nd.a, std::move(ga));
      return;
    }
  }
}

}  // namespace ptsm
