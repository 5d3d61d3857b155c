#pragma once

#include "ptsm/nn.hpp"

namespace ptsm {

/// Encoder and heads: temporal conv stack, shared perceptron, the two
/// projection heads, and the two classifiers.
struct Tsfd {
  Conv1dLayer conv1, conv2, conv3;
  BatchNormLayer bn1, bn2, bn3;
  Linear sh1, sh2;                  // shared perceptron 128·T' -> 256 -> 128
  Linear task_head, subj_head;      // 128 -> d_f
  BatchNormLayer task_bn, subj_bn;
  Linear task_cls1, task_cls2;      // d_f -> 64 -> K
  Linear subj_cls1, subj_cls2;      // d_f -> 64 -> S
  i64 t_prime = 16;
  double drop = 0.5;

  void init(ParamStore& ps, i64 channels, i64 t_prime, i64 d_f, i64 n_classes, i64 n_subjects,
            double dropout, Rng& rng);

  /// (N, C, T) -> (N, 128, T'): three conv+BN+ELU+dropout blocks, then pooling.
  Var encode_temporal(Tape& t, const std::vector<Var>& pv, Var x, Mode mode);
  /// (N, 128, T') -> (N, 128): flatten, then the shared perceptron.
  Var encode_shared(Tape& t, const std::vector<Var>& pv, Var h, Mode mode);
  /// (N, 128) -> (N, d_f), each head with its own batch norm + ELU.
  Var project_task(Tape& t, const std::vector<Var>& pv, Var h, Mode mode);
  Var project_subj(Tape& t, const std::vector<Var>& pv, Var h, Mode mode);
  /// (N, d_f) -> row-stochastic probabilities over K (task) or S (subject).
  Var classify_task(Tape& t, const std::vector<Var>& pv, Var f, Mode mode);
  Var classify_subj(Tape& t, const std::vector<Var>& pv, Var f, Mode mode);
};

}  // namespace ptsm
