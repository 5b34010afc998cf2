#pragma once

// Central finite-difference checks of the tape gradients, in 64-bit.
// The numeric side only ever evaluates forwards (on non-recording tapes), so
// it is independent of every backward rule it checks.

#include <cmath>
#include <functional>
#include <memory>
#include <limits>
#include <string>
#include <vector>

#include "miles/autodiff.hpp"
#include "miles/encoders.hpp"
#include "miles/masking.hpp"
#include "miles/objectives.hpp"
#include "miles/params.hpp"
#include "miles/rng.hpp"

namespace miles {

using LossBuilder = std::function<Var<double>(Tape<double>&)>;

/// Parameters to perturb, and a loss over them. The loss closure reads the
/// same stores (usually by shared pointer).
struct GradcheckProblem {
  std::vector<std::shared_ptr<ParamStore<double>>> stores;
  LossBuilder loss;
};

struct GradcheckOptions {
  double step = 1e-5;
  std::size_t max_coords_per_tensor = std::numeric_limits<std::size_t>::max();
  std::uint64_t coord_seed = 0;
};

/// ||analytic - numeric|| / max(||analytic||, ||numeric||) over the checked
/// coordinates of every parameter in the problem's stores.
inline double gradcheck_rel_error(GradcheckProblem& problem, const GradcheckOptions& opt = {}) {
  for (auto& s : problem.stores) s->zero_grad();
  {
    Tape<double> tape;
    Var<double> loss = problem.loss(tape);
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape<double> tape(false);
    return problem.loss(tape).value().item();
  };
  Rng rng(opt.coord_seed);
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (auto& store : problem.stores) for (auto& [name, p] : *store) {
    const std::size_t n = p.value.size();
    std::vector<std::size_t> coords;
    if (n <= opt.max_coords_per_tensor) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (std::size_t i = 0; i < opt.max_coords_per_tensor; ++i) coords.push_back(uniform_index(rng, n));
    }
    for (auto i : coords) {
      const double orig = p.value[i];
      p.value[i] = orig + opt.step;
      const double fp = eval();
      p.value[i] = orig - opt.step;
      const double fm = eval();
      p.value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.step);
      const double analytic = p.has_grad() ? p.grad[i] : 0.0;
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
  }
  const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
  return std::sqrt(diff2) / denom;
}

struct GradcheckCase {
  std::string name;
  double tolerance;
  // Builds the inputs for one seed and the loss over them.
  std::function<GradcheckProblem(std::uint64_t)> make;
  GradcheckOptions options{};
};

struct GradcheckResult {
  std::string name;
  std::uint64_t seed;
  double rel_error;
  double tolerance;
  bool passed() const { return rel_error < tolerance; }
};

namespace detail {

inline Tensor<double> randn(Shape s, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

// Reduces an arbitrary output to a scalar with fixed random weights so that
// every output element carries a distinct gradient.
inline Var<double> weighted_sum(Tape<double>& tape, const Var<double>& y, std::uint64_t seed) {
  Rng rng(seed ^ 0xABCDEFULL);
  return sum(mul(y, tape.constant(randn(y.shape(), rng))));
}

using Inputs = std::vector<std::pair<std::string, Shape>>;

inline GradcheckCase unary_case(std::string name, Inputs inputs,
                                std::function<Var<double>(Tape<double>&, ParamStore<double>&)> op,
                                double tolerance = 1e-4) {
  return GradcheckCase{
      name, tolerance, [inputs, op](std::uint64_t seed) {
        Rng rng(seed);
        auto ps = std::make_shared<ParamStore<double>>();
        for (const auto& [n, s] : inputs) ps->add(n, randn(s, rng));
        LossBuilder f = [op, seed, ps](Tape<double>& tape) { return weighted_sum(tape, op(tape, *ps), seed); };
        return GradcheckProblem{{ps}, f};
      }};
}

}  // namespace detail

/// Tiny dual-encoder setup used by the composite check: two clips, one
/// block, a fixed tube mask and fixed snapshot targets.
inline EncoderConfig tiny_encoder_config() {
  EncoderConfig c;
  c.image_size = 8;
  c.channels = 3;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = 1;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.max_frames = 2;
  c.proj_dim = 4;
  c.text_max_len = 5;
  c.vocab_size = 7;
  c.init_std = 0.3;
  return c;
}

inline GradcheckCase composite_case() {
  return GradcheckCase{
      "encoders+total_loss", 1e-3,
      [](std::uint64_t seed) {
        const EncoderConfig cfg = tiny_encoder_config();
        Rng rng(seed);
        ParamStore<double> video = init_video_params<double>(cfg, rng);
        ParamStore<double> text = init_text_params<double>(cfg, rng);
        std::vector<Tensor<float>> clips;
        for (int b = 0; b < 2; ++b) {
          Tensor<float> f({2, cfg.image_size, cfg.image_size, cfg.channels});
          for (auto& v : f.data()) v = static_cast<float>(uniform01(rng));
          clips.push_back(std::move(f));
        }
        auto vb = std::make_shared<VideoBatch<double>>(make_video_batch<double>(clips, cfg.patch_size));
        auto masks = std::make_shared<std::vector<MaskSpec>>();
        for (int b = 0; b < 2; ++b) {
          masks->push_back(extend_tube(std::vector<std::uint8_t>{1, 0, b == 0 ? std::uint8_t{1} : std::uint8_t{0}, 1}, 2,
                                       MaskStrategy::random_tube, 0.5));
        }
        std::vector<std::vector<int>> ids = {{0, 2, 3, 4, 1}, {0, 5, 6, 1, 1}};
        std::size_t k = 0;
        for (const auto& m : *masks) k += m.count();
        auto targets = std::make_shared<Tensor<double>>(detail::randn({k, cfg.embed_dim}, rng));

        auto vstore = std::make_shared<ParamStore<double>>(std::move(video));
        auto tstore = std::make_shared<ParamStore<double>>(std::move(text));
        LossBuilder f = [cfg, vb, masks, ids, targets, vstore, tstore](Tape<double>& tape) {
          VideoEncoding<double> ve = video_forward(tape, *vstore, cfg, *vb, masks.get());
          TextEncoding<double> te = text_forward(tape, *tstore, cfg, ids);
          Var<double> lv = contrastive_loss(ve.cls, te.cls, 0.5);
          MvmLoss<double> lm = mvm_loss(ve.masked_features, *targets, ve.masked_per_clip);
          return total_loss(lv, lm.loss, false);
        };
        return GradcheckProblem{{vstore, tstore}, f};
      },
      GradcheckOptions{1e-5, 6, 0}};
}

inline std::vector<GradcheckCase> primitive_cases() {
  using detail::unary_case;
  std::vector<GradcheckCase> cases;
  cases.push_back(unary_case("add", {{"a", {3, 4}}, {"b", {3, 4}}},
                             [](auto& t, auto& p) { return add(p.var(t, "a"), p.var(t, "b")); }));
  cases.push_back(unary_case("add_broadcast", {{"a", {2, 3, 4}}, {"b", {4}}},
                             [](auto& t, auto& p) { return add(p.var(t, "a"), p.var(t, "b")); }));
  cases.push_back(unary_case("add_broadcast_general", {{"a", {2, 3, 2, 4}}, {"b", {2, 1, 1, 4}}},
                             [](auto& t, auto& p) { return add(p.var(t, "a"), p.var(t, "b")); }));
  cases.push_back(unary_case("sub", {{"a", {3, 4}}, {"b", {1, 4}}},
                             [](auto& t, auto& p) { return sub(p.var(t, "a"), p.var(t, "b")); }));
  cases.push_back(unary_case("mul", {{"a", {3, 4}}, {"b", {3, 1}}},
                             [](auto& t, auto& p) { return mul(p.var(t, "a"), p.var(t, "b")); }));
  cases.push_back(unary_case("scale", {{"a", {5}}}, [](auto& t, auto& p) { return scale(p.var(t, "a"), 1.7); }));
  cases.push_back(unary_case("matmul", {{"a", {3, 3}}, {"b", {3, 3}}},
                             [](auto& t, auto& p) { return matmul(p.var(t, "a"), p.var(t, "b")); }));
  cases.push_back(unary_case("matmul_rect", {{"a", {2, 5}}, {"b", {5, 3}}},
                             [](auto& t, auto& p) { return matmul(p.var(t, "a"), p.var(t, "b")); }));
  cases.push_back(unary_case("matmul_batched_nt", {{"a", {2, 3, 4}}, {"b", {2, 5, 4}}},
                             [](auto& t, auto& p) { return matmul(p.var(t, "a"), p.var(t, "b"), true); }));
  cases.push_back(unary_case("reshape", {{"a", {2, 6}}},
                             [](auto& t, auto& p) { return reshape(p.var(t, "a"), {3, 4}); }));
  cases.push_back(unary_case("permute", {{"a", {2, 3, 4}}},
                             [](auto& t, auto& p) { return permute(p.var(t, "a"), {2, 0, 1}); }));
  cases.push_back(unary_case("transpose", {{"a", {3, 5}}}, [](auto& t, auto& p) { return transpose(p.var(t, "a")); }));
  cases.push_back(unary_case("concat", {{"a", {2, 3}}, {"b", {2, 2}}},
                             [](auto& t, auto& p) {
                               return concat(std::vector<Var<double>>{p.var(t, "a"), p.var(t, "b")}, 1);
                             }));
  cases.push_back(unary_case("slice", {{"a", {3, 5}}}, [](auto& t, auto& p) { return slice(p.var(t, "a"), 1, 1, 4); }));
  cases.push_back(unary_case("gather_rows", {{"a", {4, 3}}},
                             [](auto& t, auto& p) { return gather_rows(p.var(t, "a"), {2, 0, 2, 3}); }));
  cases.push_back(unary_case("sum", {{"a", {3, 4}}}, [](auto& t, auto& p) { return sum(p.var(t, "a")); }));
  cases.push_back(unary_case("sum_axis", {{"a", {3, 4, 2}}}, [](auto& t, auto& p) { return sum(p.var(t, "a"), 1); }));
  cases.push_back(unary_case("mean", {{"a", {3, 4}}}, [](auto& t, auto& p) { return mean(p.var(t, "a")); }));
  cases.push_back(unary_case("mean_axis", {{"a", {3, 4}}}, [](auto& t, auto& p) { return mean(p.var(t, "a"), 0); }));
  cases.push_back(unary_case("softmax_last", {{"a", {3, 5}}}, [](auto& t, auto& p) { return softmax(p.var(t, "a"), 1); }));
  cases.push_back(unary_case("softmax_first", {{"a", {4, 3}}}, [](auto& t, auto& p) { return softmax(p.var(t, "a"), 0); }));
  cases.push_back(unary_case("log_softmax", {{"a", {3, 5}}},
                             [](auto& t, auto& p) { return log_softmax(p.var(t, "a"), -1); }));
  cases.push_back(unary_case("layer_norm", {{"x", {3, 6}}, {"g", {6}}, {"b", {6}}}, [](auto& t, auto& p) {
    return layer_norm(p.var(t, "x"), p.var(t, "g"), p.var(t, "b"));
  }));
  cases.push_back(unary_case("gelu", {{"a", {4, 4}}}, [](auto& t, auto& p) { return gelu(p.var(t, "a")); }));
  cases.push_back(unary_case("l2_normalize", {{"a", {3, 4}}},
                             [](auto& t, auto& p) { return l2_normalize(p.var(t, "a")); }));
  cases.push_back(unary_case("row_norm", {{"a", {3, 4}}}, [](auto& t, auto& p) { return row_norm(p.var(t, "a")); }));
  return cases;
}

/// Every primitive plus the composite, each over `seeds` seeds.
inline std::vector<GradcheckResult> run_gradcheck_suite(std::size_t seeds = 20) {
  std::vector<GradcheckCase> cases = primitive_cases();
  cases.push_back(composite_case());
  std::vector<GradcheckResult> results;
  for (const auto& c : cases) {
    for (std::uint64_t s = 0; s < seeds; ++s) {
      GradcheckProblem problem = c.make(s + 1);
      GradcheckOptions opt = c.options;
      opt.coord_seed = s;
      results.push_back(GradcheckResult{c.name, s + 1, gradcheck_rel_error(problem, opt), c.tolerance});
    }
  }
  return results;
}

}  // namespace miles
