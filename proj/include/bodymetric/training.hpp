#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "bodymetric/dataset.hpp"
#include "bodymetric/evaluation.hpp"
#include "bodymetric/model.hpp"
#include "bodymetric/numerics.hpp"
#include "bodymetric/parallel.hpp"
#include "bodymetric/rng.hpp"
#include "bodymetric/scoring.hpp"

namespace bodymetric {

struct TrainConfig {
  std::size_t steps = 4000;
  double peak_lr = 3e-6;
  std::size_t warmup = 500;
  std::size_t batch = 64;
  std::size_t eval_interval = 100;
  std::uint64_t seed = 0;
  Objective objective = Objective::preference;
  PriorMode prior = PriorMode::keypoints;
  double latent_weight = 1.0;
  bool swap_text_preference = false;
  ScorerConfig scorer;
  AdamWConfig optimizer;

  ScoringMode scoring_mode() const { return {objective, prior, swap_text_preference}; }

  void validate() const {
    scorer.validate();
    if (steps > 0 && warmup >= steps) throw DomainError("warmup must be shorter than the number of steps");
    if (batch == 0) throw DomainError("batch size must be positive");
    if (objective != Objective::regression && batch < 2) {
      throw DomainError("preference objectives need a batch of at least 2");
    }
    if (eval_interval == 0) throw DomainError("eval_interval must be positive");
    if (!(peak_lr >= 0.0)) throw DomainError("peak_lr must be non-negative");
    if (!(latent_weight >= 0.0)) throw DomainError("latent_weight must be non-negative");
  }

  bool operator==(const TrainConfig&) const = default;
};

namespace detail {
template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      out = it->get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("config key '") + key + "': " + e.what());
    }
  }
}

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* where) {
  if (!j.is_object()) throw DataError(std::string(where) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw DataError(std::string(where) + ": unknown key '" + key + "'");
    }
  }
}
}  // namespace detail

inline nlohmann::json scorer_config_to_json(const ScorerConfig& c) {
  return {{"dim", c.dim},
          {"keypoint_dim", c.keypoint_dim},
          {"body_hidden", c.body_hidden},
          {"merge_hidden", c.merge_hidden},
          {"regression_hidden", c.regression_hidden},
          {"activation", to_string(c.activation)},
          {"normalize", c.normalize},
          {"init_temperature", c.init_temperature}};
}

inline ScorerConfig scorer_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"dim", "keypoint_dim", "body_hidden", "merge_hidden", "regression_hidden", "activation",
                          "normalize", "init_temperature"},
                         "scorer config");
  ScorerConfig c;
  detail::read_key(j, "dim", c.dim);
  detail::read_key(j, "keypoint_dim", c.keypoint_dim);
  detail::read_key(j, "body_hidden", c.body_hidden);
  detail::read_key(j, "merge_hidden", c.merge_hidden);
  detail::read_key(j, "regression_hidden", c.regression_hidden);
  std::string act = to_string(c.activation);
  detail::read_key(j, "activation", act);
  c.activation = activation_from_string(act);
  detail::read_key(j, "normalize", c.normalize);
  detail::read_key(j, "init_temperature", c.init_temperature);
  return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"peak_lr", c.peak_lr},
          {"warmup", c.warmup},
          {"batch", c.batch},
          {"eval_interval", c.eval_interval},
          {"seed", c.seed},
          {"objective", to_string(c.objective)},
          {"prior", to_string(c.prior)},
          {"latent_weight", c.latent_weight},
          {"swap_text_preference", c.swap_text_preference},
          {"scorer", scorer_config_to_json(c.scorer)},
          {"optimizer",
           {{"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"epsilon", c.optimizer.epsilon},
            {"weight_decay", c.optimizer.weight_decay}}}};
}

inline const std::initializer_list<const char*> kTrainConfigKeys = {
    "steps", "peak_lr", "warmup", "batch", "eval_interval", "seed", "objective", "prior", "latent_weight",
    "swap_text_preference", "scorer", "optimizer"};

// Missing keys keep their defaults; unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, kTrainConfigKeys, "train config");
  TrainConfig c;
  detail::read_key(j, "steps", c.steps);
  detail::read_key(j, "peak_lr", c.peak_lr);
  detail::read_key(j, "warmup", c.warmup);
  detail::read_key(j, "batch", c.batch);
  detail::read_key(j, "eval_interval", c.eval_interval);
  detail::read_key(j, "seed", c.seed);
  std::string objective = to_string(c.objective);
  detail::read_key(j, "objective", objective);
  c.objective = objective_from_string(objective);
  std::string prior = to_string(c.prior);
  detail::read_key(j, "prior", prior);
  c.prior = prior_from_string(prior);
  detail::read_key(j, "latent_weight", c.latent_weight);
  detail::read_key(j, "swap_text_preference", c.swap_text_preference);
  if (auto it = j.find("scorer"); it != j.end()) c.scorer = scorer_config_from_json(*it);
  if (auto it = j.find("optimizer"); it != j.end()) {
    detail::reject_unknown(*it, {"beta1", "beta2", "epsilon", "weight_decay"}, "optimizer config");
    detail::read_key(*it, "beta1", c.optimizer.beta1);
    detail::read_key(*it, "beta2", c.optimizer.beta2);
    detail::read_key(*it, "epsilon", c.optimizer.epsilon);
    detail::read_key(*it, "weight_decay", c.optimizer.weight_decay);
  }
  return c;
}

// ---------------------------------------------------------------------------
// Per-sample losses. Each returns weight * loss and, when `grads` is given, adds
// weight * d(loss)/d(params) into it.

// w_i = 1 / (occurrences of prompt_i in the batch).
inline Vector batch_weights(std::span<const std::string> prompt_ids) {
  if (prompt_ids.empty()) throw ContractError("batch_weights of an empty batch");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& p : prompt_ids) ++counts[p];
  Vector w;
  w.reserve(prompt_ids.size());
  for (const auto& p : prompt_ids) w.push_back(1.0 / static_cast<double>(counts[p]));
  return w;
}

struct LogitGrad {
  double logit = 0.0;
  double cosine = 0.0;
  Vector d_merged;       // d logit / d merged
  double d_temperature;  // d logit / d temperature
};

inline LogitGrad logit_with_grad(const ScorerParams& params, std::span<const double> txt,
                                 std::span<const double> merged) {
  const auto cg = cosine_with_grad(txt, merged);
  LogitGrad out;
  out.cosine = cg.cosine;
  if (params.config.normalize) {
    out.logit = params.temperature * cg.cosine;
    out.d_merged.resize(merged.size());
    for (std::size_t i = 0; i < merged.size(); ++i) out.d_merged[i] = params.temperature * cg.grad_b[i];
    out.d_temperature = cg.cosine;
  } else {
    out.logit = dot(txt, merged);
    out.d_merged.assign(txt.begin(), txt.end());
    out.d_temperature = 0.0;
  }
  return out;
}

struct CosineLoss {
  double loss = 0.0;
  Vector grad_body;  // d loss / d body_emb
};

// 1 - cos(img, body): pulls the body embedding toward the image embedding.
inline CosineLoss latent_cosine_loss(std::span<const double> img_emb, std::span<const double> body_emb) {
  if (img_emb.size() != body_emb.size()) throw ShapeError("latent cosine loss: embedding dims differ");
  const auto cg = cosine_with_grad(img_emb, body_emb);
  CosineLoss out;
  out.loss = 1.0 - cg.cosine;
  out.grad_body.resize(body_emb.size());
  for (std::size_t i = 0; i < body_emb.size(); ++i) out.grad_body[i] = -cg.grad_b[i];
  return out;
}

struct SampleLoss {
  double loss = 0.0;
  double logit_1 = 0.0;
  double logit_2 = 0.0;
};

namespace detail {
inline void backprop_logit(const ScorerParams& params, const MergedForward& fwd, const LogitGrad& lg, double upstream,
                           ScorerParams& grads) {
  grads.temperature += upstream * lg.d_temperature;
  if (!fwd.merge) return;
  Vector d_merged(lg.d_merged.size());
  for (std::size_t i = 0; i < d_merged.size(); ++i) d_merged[i] = upstream * lg.d_merged[i];
  backward_merged(params, fwd, d_merged, grads);
}

inline double latent_auxiliary(const ScorerParams& params, const ImageInputs& in, double scale, ScorerParams* grads) {
  if (prior_unavailable(in.keypoints)) return 0.0;
  const auto& spec = params.config.body_spec();
  const auto body = mlp_forward(spec, params.body, in.keypoints);
  const auto cl = latent_cosine_loss(in.img, body.output);
  if (grads) {
    Vector upstream(cl.grad_body.size());
    for (std::size_t i = 0; i < upstream.size(); ++i) upstream[i] = scale * cl.grad_body[i];
    mlp_backward_accumulate(spec, params.body, body.tape, upstream, grads->body);
  }
  return scale * cl.loss;
}
}  // namespace detail

// Preference loss of one pair sharing the prompt embedding `txt`; with the latent
// prior the auxiliary cosine term (averaged over both images) is added with `latent_weight`.
inline SampleLoss preference_pair_loss(const ScorerParams& params, PriorMode prior, double latent_weight,
                                       std::span<const double> txt, const ImageInputs& first,
                                       const ImageInputs& second, const Prob2& p, double weight,
                                       ScorerParams* grads) {
  const auto f1 = forward_merged(params, prior, first);
  const auto f2 = forward_merged(params, prior, second);
  const auto l1 = logit_with_grad(params, txt, f1.merged);
  const auto l2 = logit_with_grad(params, txt, f2.merged);
  const auto kl = kl_preference_loss_from_logits(p, l1.logit, l2.logit);
  SampleLoss out{weight * kl.loss, l1.logit, l2.logit};
  if (grads) {
    detail::backprop_logit(params, f1, l1, weight * kl.grad_wrt_logits[0], *grads);
    detail::backprop_logit(params, f2, l2, weight * kl.grad_wrt_logits[1], *grads);
  }
  if (prior == PriorMode::latent && latent_weight > 0.0) {
    const double scale = weight * latent_weight * 0.5;
    out.loss += detail::latent_auxiliary(params, first, scale, grads);
    out.loss += detail::latent_auxiliary(params, second, scale, grads);
  }
  return out;
}

// Text-modality objective: compares s(x + realistic suffix, y) with s(x + unrealistic suffix, y).
inline SampleLoss text_variant_loss(const ScorerParams& params, PriorMode prior, std::span<const double> txt_realistic,
                                    std::span<const double> txt_unrealistic, const ImageInputs& image, const Prob2& p,
                                    double weight, ScorerParams* grads) {
  const auto fwd = forward_merged(params, prior, image);
  const auto l1 = logit_with_grad(params, txt_realistic, fwd.merged);
  const auto l2 = logit_with_grad(params, txt_unrealistic, fwd.merged);
  const auto kl = kl_preference_loss_from_logits(p, l1.logit, l2.logit);
  SampleLoss out{weight * kl.loss, l1.logit, l2.logit};
  if (grads) {
    grads->temperature += weight * (kl.grad_wrt_logits[0] * l1.d_temperature + kl.grad_wrt_logits[1] * l2.d_temperature);
    if (fwd.merge) {
      Vector d_merged(fwd.merged.size());
      for (std::size_t i = 0; i < d_merged.size(); ++i) {
        d_merged[i] = weight * (kl.grad_wrt_logits[0] * l1.d_merged[i] + kl.grad_wrt_logits[1] * l2.d_merged[i]);
      }
      backward_merged(params, fwd, d_merged, *grads);
    }
  }
  return out;
}

// Squared error of the regression head F(img) against the consolidated score.
inline SampleLoss regression_sample_loss(const ScorerParams& params, std::span<const double> img, double target,
                                         double weight, ScorerParams* grads) {
  const auto& spec = params.config.regression_spec();
  const auto fwd = mlp_forward(spec, params.regression, img);
  const double err = fwd.output[0] - target;
  if (grads) {
    const double upstream = weight * 2.0 * err;
    mlp_backward_accumulate(spec, params.regression, fwd.tape, std::span<const double>(&upstream, 1),
                            grads->regression);
  }
  return {weight * err * err, fwd.output[0], target};
}

struct RegressionLoss {
  double loss = 0.0;
  MlpParams grads;
};

inline RegressionLoss regression_loss(const ScorerParams& params, std::span<const double> img_emb, double target) {
  ScorerParams g = ScorerParams::zeros(params.config);
  const auto s = regression_sample_loss(params, img_emb, target, 1.0, &g);
  return {s.loss, std::move(g.regression)};
}

// ---------------------------------------------------------------------------
// Training loop

struct Checkpoint {
  ScorerParams params;
  TrainConfig config;
  std::size_t step = 0;
  double val_accuracy = 0.0;

  bool operator==(const Checkpoint&) const = default;
};

struct TrainResult {
  Checkpoint best;
  std::vector<double> losses;                                // one per optimizer step
  std::vector<std::pair<std::size_t, double>> validation;    // (step, accuracy at t = 0)
};

struct TrainData {
  std::span<const PreferencePair> train_pairs;  // preference objective
  std::span<const std::string> train_records;   // regression / text-variant objectives
  std::span<const PreferencePair> val_pairs;
};

namespace detail {
// Fixed partition of a batch into gradient chunks, independent of the thread count.
inline constexpr std::size_t kGradientChunks = 8;
}  // namespace detail

inline TrainResult train(const TrainConfig& config, const TrainData& data, const Corpus& corpus) {
  config.validate();
  if (data.val_pairs.empty()) throw DataError("training needs at least one validation pair");
  const ScoringMode mode = config.scoring_mode();

  std::vector<std::string> sample_ids;  // pair index or record id per sample
  std::size_t sample_count = 0;
  if (config.objective == Objective::preference) {
    sample_count = data.train_pairs.size();
  } else {
    for (const auto& id : data.train_records) {
      if (corpus.at(id).score) sample_ids.push_back(id);
    }
    sample_count = sample_ids.size();
  }
  if (sample_count == 0 && config.steps > 0) throw DataError("no training samples for objective " + to_string(config.objective));

  ScorerParams params = ScorerParams::initialize(config.scorer, derive_seed(config.seed, "init"));
  OptimState optim(config.optimizer);
  Rng order_rng(derive_seed(config.seed, "batches"));
  std::vector<std::size_t> order(sample_count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = sample_count;  // forces a shuffle before the first batch
  const std::size_t batch = std::min(config.batch, std::max<std::size_t>(sample_count, 1));

  TrainResult result;
  auto validate_now = [&](std::size_t step) {
    const double acc = pair_accuracy(params, mode, corpus, data.val_pairs, 0.0);
    result.validation.emplace_back(step, acc);
    if (result.validation.size() == 1 || acc > result.best.val_accuracy) {
      result.best = {params, config, step, acc};
    }
  };
  validate_now(0);

  const ScheduleConfig schedule{config.peak_lr, config.warmup, config.steps};
  ScorerParams grads = ScorerParams::zeros(config.scorer);
  const std::size_t n_chunks = std::min(detail::kGradientChunks, batch);
  std::vector<ScorerParams> chunk_grads(n_chunks, grads);
  std::vector<double> chunk_loss(n_chunks);

  for (std::size_t step = 0; step < config.steps; ++step) {
    if (cursor + batch > sample_count) {
      order_rng.shuffle(std::span<std::size_t>(order));
      cursor = 0;
    }
    const std::span<const std::size_t> members(order.data() + cursor, batch);
    cursor += batch;

    std::vector<std::string> prompts;
    prompts.reserve(batch);
    for (std::size_t idx : members) {
      prompts.push_back(config.objective == Objective::preference ? data.train_pairs[idx].prompt_id
                                                                  : corpus.at(sample_ids[idx]).prompt_id);
    }
    Vector weights = config.objective == Objective::regression ? Vector(batch, 1.0) : batch_weights(prompts);
    const double total_weight = std::accumulate(weights.begin(), weights.end(), 0.0);
    for (double& w : weights) w /= total_weight;

    auto sample_loss = [&](std::size_t k, ScorerParams* g) -> double {
      const std::size_t idx = members[k];
      switch (config.objective) {
        case Objective::preference: {
          const auto& pair = data.train_pairs[idx];
          const auto& a = corpus.at(pair.id_1);
          const auto& b = corpus.at(pair.id_2);
          return preference_pair_loss(params, config.prior, config.latent_weight, a.txt, a.inputs(), b.inputs(),
                                      pair.p, weights[k], g)
              .loss;
        }
        case Objective::regression: {
          const auto& im = corpus.at(sample_ids[idx]);
          return regression_sample_loss(params, im.img, *im.score, weights[k], g).loss;
        }
        case Objective::text_variant: {
          const auto& im = corpus.at(sample_ids[idx]);
          const auto tv = make_text_variant("", *im.score, config.swap_text_preference);
          return text_variant_loss(params, config.prior, im.txt_realistic, im.txt_unrealistic, im.inputs(), tv.p,
                                   weights[k], g)
              .loss;
        }
      }
      return 0.0;
    };

    parallel_for(n_chunks, [&](std::size_t c) {
      chunk_grads[c].set_zero();
      double loss = 0.0;
      for (std::size_t k = c; k < batch; k += n_chunks) {
        const double l = sample_loss(k, &chunk_grads[c]);
        if (!std::isfinite(l)) {
          const std::size_t idx = members[k];
          const std::string what = config.objective == Objective::preference
                                       ? data.train_pairs[idx].id_1 + "/" + data.train_pairs[idx].id_2
                                       : sample_ids[idx];
          throw NumericError("non-finite loss at step " + std::to_string(step) + " on sample " + what);
        }
        loss += l;
      }
      chunk_loss[c] = loss;
    });
    grads.set_zero();
    double batch_loss = 0.0;
    for (std::size_t c = 0; c < n_chunks; ++c) {
      grads.add(chunk_grads[c]);
      batch_loss += chunk_loss[c];
    }

    auto param_views = params.views();
    auto grad_views = grads.views();
    adamw_step(param_views, grad_views, optim, lr_at_step(step, schedule));
    params.temperature = std::clamp(params.temperature, kMinTemperature, kMaxTemperature);
    params.touch();
    result.losses.push_back(batch_loss);

    const std::size_t done = step + 1;
    if (done % config.eval_interval == 0 || done == config.steps) validate_now(done);
  }
  return result;
}

}  // namespace bodymetric
