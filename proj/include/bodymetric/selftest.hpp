#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "bodymetric/dataset.hpp"
#include "bodymetric/evaluation.hpp"
#include "bodymetric/model.hpp"
#include "bodymetric/numerics.hpp"
#include "bodymetric/rng.hpp"

namespace bodymetric {

struct SelfTestResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Quick invariant checks runnable from the shipped binary.
inline std::vector<SelfTestResult> run_selftest() {
  std::vector<SelfTestResult> results;
  auto check = [&](const std::string& name, const std::function<std::string()>& body) {
    try {
      std::string failure = body();
      results.push_back({name, failure.empty(), failure});
    } catch (const std::exception& e) {
      results.push_back({name, false, std::string("exception: ") + e.what()});
    }
  };

  check("consolidation examples", [] {
    const std::vector<std::pair<std::array<int, 5>, double>> cases{
        {{9, 9, 9, 9, 9}, 9.0}, {{1, 2, 2, 3, 10}, 6.5}, {{1, 2, 2, 3, 7}, 2.0}, {{2, 2, 2, 2, 2}, 2.0}};
    for (const auto& [r, want] : cases) {
      if (consolidate_scores(r) != want) return std::string("mismatch on a reference tuple");
    }
    return std::string();
  });

  check("consolidation range and order invariance", [] {
    std::array<int, 5> r{};
    for (int code = 0; code < 100000; ++code) {
      int c = code;
      for (int& v : r) {
        v = c % 10 + 1;
        c /= 10;
      }
      const double s = consolidate_scores(r);
      const auto [lo, hi] = std::minmax_element(r.begin(), r.end());
      if (s < *lo || s > *hi) return "out of range for code " + std::to_string(code);
      std::array<int, 5> rev{r[4], r[3], r[2], r[1], r[0]};
      if (consolidate_scores(rev) != s) return "order dependent for code " + std::to_string(code);
    }
    return std::string();
  });

  check("preference loss identities", [] {
    const Prob2 tie{0.5, 0.5};
    const auto at_equal = kl_preference_loss_from_logits(tie, 0.7, 0.7);
    if (at_equal.loss != 0.0 || at_equal.grad_wrt_logits[0] != 0.0) return std::string("tie not stationary");
    const auto huge = softmax2(1000.0, 0.0);
    if (!std::isfinite(huge[0]) || std::abs(huge[0] + huge[1] - 1.0) > 1e-12) return std::string("softmax overflow");
    const auto half = kl_preference_loss({1.0, 0.0}, {0.5, 0.5});
    if (std::abs(half.loss - std::log(2.0)) > 1e-12) return std::string("KL([1,0],[.5,.5]) != ln 2");
    return std::string();
  });

  check("mlp gradient vs finite differences", [] {
    Rng rng(7);
    const MlpSpec spec{{4, 3, 2}, Activation::gelu};
    MlpParams params = MlpParams::glorot(spec, rng);
    Vector x(4), up(2);
    for (double& v : x) v = rng.normal();
    for (double& v : up) v = rng.normal();
    auto objective = [&](const MlpParams& p) { return dot(mlp_forward(spec, p, x).output, up); };
    const auto fwd = mlp_forward(spec, params, x);
    const auto bwd = mlp_backward(spec, params, fwd.tape, up);
    const double h = 1e-5;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      for (std::size_t i = 0; i < params.layers[l].weight.data.size(); ++i) {
        MlpParams plus = params, minus = params;
        plus.layers[l].weight.data[i] += h;
        minus.layers[l].weight.data[i] -= h;
        const double fd = (objective(plus) - objective(minus)) / (2 * h);
        const double an = bwd.param_grads.layers[l].weight.data[i];
        if (std::abs(fd - an) > 1e-4 * std::max(std::abs(fd), std::abs(an)) + 1e-8) {
          return "layer " + std::to_string(l) + " weight " + std::to_string(i);
        }
      }
    }
    return std::string();
  });

  check("EMB1 round trip", [] {
    EmbeddingTable t(2);
    t.add("a", std::vector<float>{1.0f, 2.0f});
    t.add("b", std::vector<float>{3.0f, 4.0f});
    const auto bytes = serialize_embeddings(t);
    const auto back = parse_embeddings(bytes, "selftest");
    if (!(back == t) || serialize_embeddings(back) != bytes) return std::string("round trip changed the table");
    return std::string();
  });

  check("tie count monotone in threshold", [] {
    Rng rng(11);
    std::vector<Prob2> ps;
    for (int i = 0; i < 500; ++i) ps.push_back(softmax2(rng.normal() * 3, rng.normal() * 3));
    std::size_t last = 0;
    for (double t : threshold_grid(0.01)) {
      std::size_t ties = 0;
      for (const auto& p : ps) ties += predict_outcome(p, t) == PairOutcome::tie ? 1 : 0;
      if (ties < last) return "tie count fell at t=" + std::to_string(t);
      last = ties;
    }
    return last == ps.size() ? std::string() : std::string("not every pair tied at t=1");
  });

  check("benchmark ordering", [] {
    const std::map<std::string, std::vector<double>> scores{
        {"SD-1.4", {-0.45}}, {"SD-XL-T", {-0.26}}, {"SD-2.1", {-0.25}}, {"Wuerstchen", {0.69}}, {"SD-XL", {0.92}}};
    const auto report = benchmark(scores);
    const std::vector<std::string> want{"SD-1.4", "SD-XL-T", "SD-2.1", "Wuerstchen", "SD-XL"};
    for (std::size_t i = 0; i < want.size(); ++i) {
      if (report.entries[i].generator != want[i]) return std::string("wrong order");
    }
    return std::string();
  });

  return results;
}

}  // namespace bodymetric
