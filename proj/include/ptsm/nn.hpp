#pragma once

#include <map>
#include <string>
#include <vector>

#include "ptsm/tape.hpp"

namespace ptsm {

struct Param {
  std::string name;
  Tensor value;
  bool decay = true;  // weight decay applies; biases, norm affines and fusion scalars opt out
};

/// Flat registry of trainable tensors. Names are hierarchical ("encoder.conv1.w")
/// so callers can select subsets by prefix (adaptation, freezing, decay groups).
class ParamStore {
 public:
  int add(const std::string& name, Tensor value, bool decay);
  i64 count() const { return static_cast<i64>(params_.size()); }
  Param& param(i64 i) { return params_[static_cast<size_t>(i)]; }
  const Param& param(i64 i) const { return params_[static_cast<size_t>(i)]; }
  int index_of(const std::string& name) const;
  std::vector<std::string> names() const;
  i64 total_elems() const;
  /// Indices of parameters whose name starts with the given prefix.
  std::vector<int> with_prefix(const std::string& prefix) const;

 private:
  std::vector<Param> params_;
  std::map<std::string, int> by_name_;
};

/// One leaf per parameter, in registry order. The model builds this once per
/// forward pass; tape.grad(leaves[i]) is then the gradient of parameter i.
std::vector<Var> make_leaves(Tape& t, const ParamStore& ps);

struct Linear {
  int w = -1, b = -1;
  void init(ParamStore& ps, const std::string& prefix, i64 in, i64 out, Rng& rng);
  Var operator()(Tape& t, const std::vector<Var>& pv, Var x) const;
};

struct Conv1dLayer {
  int w = -1, b = -1;
  i64 pad = 0;
  void init(ParamStore& ps, const std::string& prefix, i64 c_in, i64 c_out, i64 kernel, i64 pad,
            Rng& rng);
  Var operator()(Tape& t, const std::vector<Var>& pv, Var x) const;
};

struct BatchNormLayer {
  int gamma = -1, beta = -1;
  BnState state;
  void init(ParamStore& ps, const std::string& prefix, i64 features);
  Var operator()(Tape& t, const std::vector<Var>& pv, Var x, Mode mode);
};

}  // namespace ptsm
