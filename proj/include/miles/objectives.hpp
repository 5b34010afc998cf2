#pragma once

// Training objectives: symmetric in-batch NCE between video and text [CLS]
// embeddings, and an L2 regression of masked-token features onto snapshot
// targets.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "miles/autodiff.hpp"
#include "miles/errors.hpp"

namespace miles {

enum class Reduction { sum, mean };

inline Reduction parse_reduction(const std::string& s) {
  if (s == "sum") return Reduction::sum;
  if (s == "mean") return Reduction::mean;
  throw ConfigError("unknown reduction '" + s + "'");
}

enum class MvmDistance { l2, squared };

inline MvmDistance parse_mvm_distance(const std::string& s) {
  if (s == "l2") return MvmDistance::l2;
  if (s == "squared") return MvmDistance::squared;
  throw ConfigError("unknown MVM distance '" + s + "'");
}

/// -log( exp(x.y_i / tau) / sum_j exp(x.y_j / tau) ) for one query row.
template <typename T>
T nce(std::span<const T> x, const Tensor<T>& ys, std::size_t i, T tau) {
  if (!(tau > T{0})) throw ConfigError("temperature must be positive");
  const std::size_t B = ys.dim(0);
  const std::size_t P = ys.dim(1);
  if (x.size() != P) throw DimensionError("nce: query and gallery widths differ");
  if (i >= B) throw DimensionError("nce: positive index out of range");
  std::vector<T> logits(B);
  for (std::size_t j = 0; j < B; ++j) {
    T s{0};
    for (std::size_t k = 0; k < P; ++k) s += x[k] * ys[j * P + k];
    logits[j] = s / tau;
  }
  const T mx = *std::max_element(logits.begin(), logits.end());
  T z{0};
  for (T l : logits) z += std::exp(l - mx);
  return -(logits[i] - mx - std::log(z));
}

template <typename T>
void check_unit_rows(const Tensor<T>& m, const char* what) {
  const std::size_t P = m.dim(1);
  for (std::size_t r = 0; r < m.dim(0); ++r) {
    T s{0};
    for (std::size_t k = 0; k < P; ++k) s += m[r * P + k] * m[r * P + k];
    if (std::abs(std::sqrt(s) - T{1}) > T(1e-4)) {
      throw ContractError(std::string(what) + " row " + std::to_string(r) + " is not unit norm");
    }
  }
}

/// sum_i NCE(v_i, t_i) + sum_i NCE(t_i, v_i) over the batch (or the mean of
/// each direction when `reduction` is mean). Row i of V pairs with row i of T.
template <typename T>
Var<T> contrastive_loss(const Var<T>& v, const Var<T>& t, T tau, Reduction reduction = Reduction::sum) {
  if (!(tau > T{0})) throw ConfigError("temperature must be positive");
  if (v.rank() != 2 || v.shape() != t.shape()) throw DimensionError("contrastive_loss: V and T must both be (B, P)");
  check_unit_rows(v.value(), "video embedding");
  check_unit_rows(t.value(), "text embedding");
  const std::size_t B = v.dim(0);
  Var<T> logits = scale(matmul(v, t, true), T{1} / tau);  // (B, B), rows = videos
  std::vector<std::size_t> diag(B);
  for (std::size_t i = 0; i < B; ++i) diag[i] = i * B + i;
  Var<T> v2t = gather_rows(reshape(log_softmax(logits, 1), {B * B, 1}), diag);
  Var<T> t2v = gather_rows(reshape(log_softmax(logits, 0), {B * B, 1}), diag);
  Var<T> loss = scale(add(sum(v2t), sum(t2v)), T{-1});
  if (reduction == Reduction::mean) loss = scale(loss, T{1} / static_cast<T>(B));
  return loss;
}

struct MvmOptions {
  MvmDistance distance = MvmDistance::l2;
  Reduction token_reduction = Reduction::mean;
  Reduction batch_reduction = Reduction::sum;
};

template <typename T>
struct MvmLoss {
  Var<T> loss;
  bool empty = false;  // no masked token in the whole batch; loss is 0
};

/// Per clip: the distance between each masked token's predicted and target
/// feature, averaged (or summed) over that clip's tokens; then summed (or
/// averaged) over clips. Targets are constants, so gradient reaches the
/// predictions only.
template <typename T>
MvmLoss<T> mvm_loss(const Var<T>& predicted, const Tensor<T>& targets, const std::vector<std::size_t>& per_clip,
                    const MvmOptions& opt = {}) {
  Tape<T>& tape = predicted.tape();
  if (predicted.shape() != targets.shape()) {
    throw DimensionError("mvm_loss: predictions " + shape_str(predicted.shape()) + " vs targets " +
                         shape_str(targets.shape()));
  }
  std::size_t total = 0;
  for (auto k : per_clip) total += k;
  if (total != predicted.dim(0)) throw DimensionError("mvm_loss: per-clip counts do not cover the rows");
  if (total == 0) return {tape.constant(Tensor<T>::scalar(T{0})), true};
  Var<T> diff = sub(predicted, tape.constant(targets));
  Var<T> dist = opt.distance == MvmDistance::l2 ? row_norm(diff) : sum(mul(diff, diff), -1);
  Tensor<T> w({total});
  std::size_t r = 0;
  for (auto k : per_clip) {
    const T wk = opt.token_reduction == Reduction::mean ? T{1} / static_cast<T>(k) : T{1};
    for (std::size_t j = 0; j < k; ++j) w[r++] = wk;
  }
  Var<T> loss = sum(mul(dist, tape.constant(std::move(w))));
  if (opt.batch_reduction == Reduction::mean) loss = scale(loss, T{1} / static_cast<T>(per_clip.size()));
  return {loss, false};
}

/// L = L_vanilla + weight * L_mvm; the MVM term is dropped during warm-up.
template <typename T>
Var<T> total_loss(const Var<T>& contrastive, const Var<T>& mvm, bool warmup_active, T mvm_weight = T{1}) {
  if (warmup_active) return contrastive;
  return add(contrastive, scale(mvm, mvm_weight));
}

}  // namespace miles
