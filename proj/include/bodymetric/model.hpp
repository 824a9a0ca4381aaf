#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bodymetric/errors.hpp"
#include "bodymetric/numerics.hpp"
#include "bodymetric/rng.hpp"

namespace bodymetric {

inline constexpr std::size_t kKeypointDim = 435;  // 145 SMPL-X joints x 3

// How the body prior reaches the score.
enum class PriorMode {
  keypoints,  // merge(img, E_body(b))
  pixel,      // merge(img, E_img(mesh overlay))
  latent,     // score on img directly; E_body trained by an auxiliary cosine loss
  none,       // merge(img, 0): same head, no body signal
};

inline std::string to_string(PriorMode m) {
  switch (m) {
    case PriorMode::keypoints: return "keypoints";
    case PriorMode::pixel: return "pixel";
    case PriorMode::latent: return "latent";
    case PriorMode::none: return "none";
  }
  return "none";
}

inline PriorMode prior_from_string(const std::string& s) {
  if (s == "keypoints") return PriorMode::keypoints;
  if (s == "pixel") return PriorMode::pixel;
  if (s == "latent") return PriorMode::latent;
  if (s == "none") return PriorMode::none;
  throw DataError("unknown prior '" + s + "'");
}

struct ScorerConfig {
  std::size_t dim = 1024;
  std::size_t keypoint_dim = kKeypointDim;
  std::size_t body_hidden = 512;
  std::size_t merge_hidden = 1024;
  std::size_t regression_hidden = 256;
  Activation activation = Activation::gelu;
  // When false the logit is the raw inner product (temperature unused).
  bool normalize = true;
  double init_temperature = 10.0;

  bool operator==(const ScorerConfig&) const = default;

  MlpSpec body_spec() const { return {{keypoint_dim, body_hidden, dim}, activation}; }
  MlpSpec merge_spec() const { return {{2 * dim, merge_hidden, dim}, activation}; }
  MlpSpec regression_spec() const { return {{dim, regression_hidden, 1}, activation}; }

  void validate() const {
    if (dim == 0 || keypoint_dim == 0 || body_hidden == 0 || merge_hidden == 0 || regression_hidden == 0) {
      throw ShapeError("scorer dimensions must be positive");
    }
    if (!(init_temperature > 0.0)) throw DomainError("temperature must be positive");
  }
};

inline constexpr double kMinTemperature = 1e-2;
inline constexpr double kMaxTemperature = 100.0;

// Trainable state of the scoring head. Tensor order (body, merge, regression head,
// temperature) is the checkpoint order.
struct ScorerParams {
  ScorerConfig config;
  MlpParams body;
  MlpParams merge;
  MlpParams regression;
  double temperature = 10.0;

  static ScorerParams initialize(const ScorerConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ScorerParams p;
    p.config = cfg;
    p.body = MlpParams::glorot(cfg.body_spec(), rng);
    p.merge = MlpParams::glorot(cfg.merge_spec(), rng);
    p.regression = MlpParams::glorot(cfg.regression_spec(), rng);
    p.temperature = cfg.init_temperature;
    return p;
  }

  static ScorerParams zeros(const ScorerConfig& cfg) {
    ScorerParams p;
    p.config = cfg;
    p.body = MlpParams::zeros(cfg.body_spec());
    p.merge = MlpParams::zeros(cfg.merge_spec());
    p.regression = MlpParams::zeros(cfg.regression_spec());
    p.temperature = 0.0;
    return p;
  }

  void check() const {
    config.validate();
    body.check_matches(config.body_spec());
    merge.check_matches(config.merge_spec());
    regression.check_matches(config.regression_spec());
    if (!(temperature > 0.0)) throw DomainError("temperature must be positive");
  }

  std::vector<ParamView> views() {
    std::vector<ParamView> out;
    for (MlpParams* mlp : {&body, &merge, &regression}) {
      for (auto& layer : mlp->layers) {
        out.push_back({layer.weight.data, layer.weight.rows, layer.weight.cols, true});
        out.push_back({layer.bias, 1, layer.bias.size(), false});
      }
    }
    out.push_back({std::span<double>(&temperature, 1), 1, 1, false});
    return out;
  }

  void touch() {
    body.touch();
    merge.touch();
    regression.touch();
  }

  void set_zero() {
    body.set_zero();
    merge.set_zero();
    regression.set_zero();
    temperature = 0.0;
  }

  void add(const ScorerParams& o) {
    body.add(o.body);
    merge.add(o.merge);
    regression.add(o.regression);
    temperature += o.temperature;
  }

  bool operator==(const ScorerParams&) const = default;
};

struct ScoreResult {
  double cosine = 0.0;
  double logit = 0.0;
};

inline void require_dim(std::span<const double> v, std::size_t dim, const char* what) {
  if (v.size() != dim) {
    throw ShapeError(std::string(what) + " has length " + std::to_string(v.size()) + ", expected " +
                     std::to_string(dim));
  }
}

inline Vector encode_body(const ScorerParams& params, std::span<const double> keypoints) {
  require_dim(keypoints, params.config.keypoint_dim, "body keypoints");
  return mlp_forward(params.config.body_spec(), params.body, keypoints).output;
}

inline Vector concat(std::span<const double> a, std::span<const double> b) {
  Vector out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

inline Vector merge_features(const ScorerParams& params, std::span<const double> img, std::span<const double> body) {
  require_dim(img, params.config.dim, "image embedding");
  require_dim(body, params.config.dim, "body embedding");
  return mlp_forward(params.config.merge_spec(), params.merge, concat(img, body)).output;
}

inline ScoreResult score(const ScorerParams& params, std::span<const double> txt, std::span<const double> merged) {
  require_dim(txt, params.config.dim, "text embedding");
  require_dim(merged, params.config.dim, "merged embedding");
  const double nt = l2_norm(txt);
  const double nm = l2_norm(merged);
  if (nt == 0.0 || nm == 0.0) throw DegenerateEmbeddingError("zero-norm embedding passed to score");
  ScoreResult r;
  const double raw = dot(txt, merged);
  r.cosine = std::clamp(raw / (nt * nm), -1.0, 1.0);
  r.logit = params.config.normalize ? params.temperature * r.cosine : raw;
  return r;
}

inline Prob2 pair_probabilities(double logit_1, double logit_2) { return softmax2(logit_1, logit_2); }

inline ScoreResult score_pixel_variant(const ScorerParams& params, std::span<const double> txt,
                                       std::span<const double> img_overlay, std::span<const double> img) {
  return score(params, txt, merge_features(params, img, img_overlay));
}

inline ScoreResult score_latent_variant(const ScorerParams& params, std::span<const double> txt,
                                        std::span<const double> img) {
  return score(params, txt, img);
}

// ---------------------------------------------------------------------------
// Differentiable path from one image's features to its merged embedding.

struct ImageInputs {
  std::span<const double> img;
  std::span<const double> keypoints;  // used by keypoints/latent priors
  std::span<const double> overlay;    // used by the pixel prior
};

// All-zero keypoints mark an image whose body reconstruction failed upstream.
inline bool prior_unavailable(std::span<const double> keypoints) {
  return std::all_of(keypoints.begin(), keypoints.end(), [](double v) { return v == 0.0; });
}

struct MergedForward {
  Vector merged;
  std::optional<MlpForward> body;   // present when E_body ran
  std::optional<MlpForward> merge;  // present when E_m ran
};

inline MergedForward forward_merged(const ScorerParams& params, PriorMode prior, const ImageInputs& in) {
  const auto& cfg = params.config;
  require_dim(in.img, cfg.dim, "image embedding");
  MergedForward out;
  switch (prior) {
    case PriorMode::latent:
      out.merged.assign(in.img.begin(), in.img.end());
      return out;
    case PriorMode::keypoints: {
      require_dim(in.keypoints, cfg.keypoint_dim, "body keypoints");
      Vector body_emb(cfg.dim, 0.0);
      if (!prior_unavailable(in.keypoints)) {
        out.body = mlp_forward(cfg.body_spec(), params.body, in.keypoints);
        body_emb = out.body->output;
      }
      out.merge = mlp_forward(cfg.merge_spec(), params.merge, concat(in.img, body_emb));
      break;
    }
    case PriorMode::pixel:
      require_dim(in.overlay, cfg.dim, "overlay embedding");
      out.merge = mlp_forward(cfg.merge_spec(), params.merge, concat(in.img, in.overlay));
      break;
    case PriorMode::none: {
      const Vector zeros(cfg.dim, 0.0);
      out.merge = mlp_forward(cfg.merge_spec(), params.merge, concat(in.img, zeros));
      break;
    }
  }
  out.merged = out.merge->output;
  return out;
}

inline void backward_merged(const ScorerParams& params, const MergedForward& fwd, std::span<const double> upstream,
                            ScorerParams& grads) {
  if (!fwd.merge) return;  // latent: merged is the frozen image embedding
  const auto& cfg = params.config;
  const Vector d_in = mlp_backward_accumulate(cfg.merge_spec(), params.merge, fwd.merge->tape, upstream, grads.merge);
  if (fwd.body) {
    const std::span<const double> d_body(d_in.data() + cfg.dim, cfg.dim);
    mlp_backward_accumulate(cfg.body_spec(), params.body, fwd.body->tape, d_body, grads.body);
  }
}

// Score of one (text, image) under the given prior.
inline ScoreResult score_image(const ScorerParams& params, PriorMode prior, std::span<const double> txt,
                               const ImageInputs& in) {
  return score(params, txt, forward_merged(params, prior, in).merged);
}

}  // namespace bodymetric
