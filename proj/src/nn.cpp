#include "ptsm/nn.hpp"

#include <cmath>

#include "ptsm/errors.hpp"

namespace ptsm {

int ParamStore::add(const std::string& name, Tensor value, bool decay) {
  check_contract(by_name_.find(name) == by_name_.end(), "duplicate parameter name: " + name);
  const int idx = static_cast<int>(params_.size());
  params_.push_back({name, std::move(value), decay});
  by_name_[name] = idx;
  return idx;
}

int ParamStore::index_of(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? -1 : it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.name);
  return out;
}

i64 ParamStore::total_elems() const {
  i64 n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

std::vector<int> ParamStore::with_prefix(const std::string& prefix) const {
  std::vector<int> out;
  for (size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name.rfind(prefix, 0) == 0) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<Var> make_leaves(Tape& t, const ParamStore& ps) {
  std::vector<Var> vars;
  vars.reserve(static_cast<size_t>(ps.count()));
  for (i64 i = 0; i < ps.count(); ++i) vars.push_back(t.leaf(ps.param(i).value));
  return vars;
}

namespace {
// Fan-in-scaled uniform init; biases start at zero.
Tensor fan_in_uniform(Shape shape, i64 fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::rand_uniform(std::move(shape), rng, -bound, bound);
}
}  // namespace

void Linear::init(ParamStore& ps, const std::string& prefix, i64 in, i64 out, Rng& rng) {
  w = ps.add(prefix + ".w", fan_in_uniform({in, out}, in, rng), true);
  b = ps.add(prefix + ".b", Tensor({out}), false);
}

Var Linear::operator()(Tape& t, const std::vector<Var>& pv, Var x) const {
  return t.add(t.matmul(x, pv[static_cast<size_t>(w)]), pv[static_cast<size_t>(b)]);
}

void Conv1dLayer::init(ParamStore& ps, const std::string& prefix, i64 c_in, i64 c_out, i64 kernel,
                       i64 pad_, Rng& rng) {
  pad = pad_;
  w = ps.add(prefix + ".w", fan_in_uniform({c_out, c_in, kernel}, c_in * kernel, rng), true);
  b = ps.add(prefix + ".b", Tensor({c_out}), false);
}

Var Conv1dLayer::operator()(Tape& t, const std::vector<Var>& pv, Var x) const {
  return t.conv1d(x, pv[static_cast<size_t>(w)], pv[static_cast<size_t>(b)], pad);
}

void BatchNormLayer::init(ParamStore& ps, const std::string& prefix, i64 features) {
  gamma = ps.add(prefix + ".gamma", Tensor({features}, 1.0), false);
  beta = ps.add(prefix + ".beta", Tensor({features}), false);
  state = BnState(features);
}

Var BatchNormLayer::operator()(Tape& t, const std::vector<Var>& pv, Var x, Mode mode) {
  return t.batch_norm(x, pv[static_cast<size_t>(gamma)], pv[static_cast<size_t>(beta)], state, mode);
}

}  // namespace ptsm
