#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "bodymetric/dataset.hpp"
#include "bodymetric/evaluation.hpp"
#include "bodymetric/model.hpp"

namespace bodymetric {

enum class Objective { preference, regression, text_variant };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::preference: return "preference";
    case Objective::regression: return "regression";
    case Objective::text_variant: return "text_variant";
  }
  return "preference";
}

inline Objective objective_from_string(const std::string& s) {
  if (s == "preference") return Objective::preference;
  if (s == "regression") return Objective::regression;
  if (s == "text_variant") return Objective::text_variant;
  throw DataError("unknown objective '" + s + "'");
}

inline constexpr const char* kRealisticSuffix = ", realistic body";
inline constexpr const char* kUnrealisticSuffix = ", unrealistic body";

struct TextVariant {
  std::string realistic;    // x1
  std::string unrealistic;  // x2
  Prob2 p{0.5, 0.5};
};

// p = [1,0] below the LOW bound, [0,1] above the HIGH bound, tie otherwise;
// `swap` exchanges the two decisive targets.
inline TextVariant make_text_variant(const std::string& prompt, double consolidated, bool swap = false) {
  TextVariant v{prompt + kRealisticSuffix, prompt + kUnrealisticSuffix, {0.5, 0.5}};
  if (consolidated < kLowBucketBelow) {
    v.p = swap ? Prob2{0.0, 1.0} : Prob2{1.0, 0.0};
  } else if (consolidated > kHighBucketAbove) {
    v.p = swap ? Prob2{1.0, 0.0} : Prob2{0.0, 1.0};
  }
  return v;
}

// Which head produces an image's scalar realism score.
struct ScoringMode {
  Objective objective = Objective::preference;
  PriorMode prior = PriorMode::keypoints;
  bool swap_text_preference = false;
};

// Feature stores named by role. Text-variant prompts live in the text store under
// the record's text key with the variant suffix appended.
struct FeatureStores {
  EmbeddingTable txt;
  EmbeddingTable img;
  std::optional<EmbeddingTable> kp;
  std::optional<EmbeddingTable> overlay;

  // Loads <dir>/txt.emb, img.emb and, when present, kp.emb and overlay.emb.
  // An explicit keypoint path overrides <dir>/kp.emb.
  static FeatureStores load(const std::filesystem::path& dir,
                            const std::optional<std::filesystem::path>& kp_path = std::nullopt) {
    FeatureStores s;
    s.txt = load_embeddings(dir / "txt.emb");
    s.img = load_embeddings(dir / "img.emb", s.txt.dim());
    const auto kp_file = kp_path ? *kp_path : dir / "kp.emb";
    if (std::filesystem::exists(kp_file)) s.kp = load_embeddings(kp_file);
    if (std::filesystem::exists(dir / "overlay.emb")) s.overlay = load_embeddings(dir / "overlay.emb", s.txt.dim());
    return s;
  }
};

struct ResolvedImage {
  std::string id;
  std::string prompt_id;
  std::optional<double> score;  // consolidated
  Vector txt;
  Vector img;
  Vector kp;
  Vector overlay;
  Vector txt_realistic;
  Vector txt_unrealistic;

  ImageInputs inputs() const { return {img, kp, overlay}; }
};

// Records with their features pulled out of the stores, indexed by record id.
class Corpus {
public:
  Corpus(std::span<const RealismRecord> records, const FeatureStores& stores, const ScoringMode& mode,
         const ScorerConfig& cfg) {
    for (const auto& r : records) {
      if (index_.contains(r.id)) throw DataError("duplicate record id '" + r.id + "'");
      ResolvedImage im;
      im.id = r.id;
      im.prompt_id = r.prompt_id;
      if (r.has_score()) im.score = r.consolidated;
      im.txt = fetch(stores.txt, r.txt_key(), r.id, "text", cfg.dim);
      im.img = fetch(stores.img, r.img_key(), r.id, "image", cfg.dim);
      const bool needs_kp = (mode.prior == PriorMode::keypoints || mode.prior == PriorMode::latent) &&
                            mode.objective != Objective::regression;
      if (needs_kp) {
        if (!stores.kp) throw DataError("prior '" + to_string(mode.prior) + "' needs a keypoint store");
        im.kp = fetch(*stores.kp, r.kp_key(), r.id, "keypoint", cfg.keypoint_dim);
      }
      if (mode.prior == PriorMode::pixel && mode.objective != Objective::regression) {
        if (!stores.overlay) throw DataError("prior 'pixel' needs an overlay store");
        im.overlay = fetch(*stores.overlay, r.img_key(), r.id, "overlay", cfg.dim);
      }
      if (mode.objective == Objective::text_variant) {
        im.txt_realistic = fetch(stores.txt, r.txt_key() + kRealisticSuffix, r.id, "text", cfg.dim);
        im.txt_unrealistic = fetch(stores.txt, r.txt_key() + kUnrealisticSuffix, r.id, "text", cfg.dim);
      }
      index_.emplace(r.id, images_.size());
      images_.push_back(std::move(im));
    }
  }

  const ResolvedImage& at(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw DataError("pair references unknown record '" + id + "'");
    return images_[it->second];
  }
  bool contains(const std::string& id) const { return index_.contains(id); }
  const std::vector<ResolvedImage>& images() const { return images_; }

private:
  static Vector fetch(const EmbeddingTable& table, const std::string& key, const std::string& record,
                      const char* what, std::size_t dim) {
    auto row = table.find(key);
    if (!row) throw DataError("record '" + record + "': no " + what + " features under key '" + key + "'");
    if (row->size() != dim) {
      throw ShapeError("record '" + record + "': " + what + " features have dim " + std::to_string(row->size()) +
                       ", model expects " + std::to_string(dim));
    }
    return Vector(row->begin(), row->end());
  }

  std::vector<ResolvedImage> images_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Scalar realism score of one image; higher is more realistic. Pair
// probabilities are the softmax of two such scores.
inline double realism_score(const ScorerParams& params, const ScoringMode& mode, const ResolvedImage& im) {
  switch (mode.objective) {
    case Objective::preference:
      return score_image(params, mode.prior, im.txt, im.inputs()).logit;
    case Objective::regression: {
      const auto out = mlp_forward(params.config.regression_spec(), params.regression, im.img);
      return out.output[0];
    }
    case Objective::text_variant: {
      const Vector merged = forward_merged(params, mode.prior, im.inputs()).merged;
      const double s_real = score(params, im.txt_realistic, merged).logit;
      const double s_unreal = score(params, im.txt_unrealistic, merged).logit;
      // As trained, the decisive target on the realistic suffix marks LOW images unless swapped.
      return mode.swap_text_preference ? s_real - s_unreal : s_unreal - s_real;
    }
  }
  return 0.0;
}

// Cosine between text and merged features; temperature-free, used for benchmarking.
inline double realism_cosine(const ScorerParams& params, const ScoringMode& mode, const ResolvedImage& im) {
  return score_image(params, mode.prior, im.txt, im.inputs()).cosine;
}

struct ScoredPairs {
  std::vector<Prob2> p_hats;
  std::vector<PairOutcome> labels;
};

inline ScoredPairs score_pairs(const ScorerParams& params, const ScoringMode& mode, const Corpus& corpus,
                               std::span<const PreferencePair> pairs) {
  std::unordered_map<std::string, double> cache;
  auto image_score = [&](const std::string& id) {
    auto it = cache.find(id);
    if (it != cache.end()) return it->second;
    const double s = realism_score(params, mode, corpus.at(id));
    cache.emplace(id, s);
    return s;
  };
  ScoredPairs out;
  out.p_hats.reserve(pairs.size());
  out.labels.reserve(pairs.size());
  for (const auto& pair : pairs) {
    out.p_hats.push_back(pair_probabilities(image_score(pair.id_1), image_score(pair.id_2)));
    out.labels.push_back(outcome_of(pair.p));
  }
  return out;
}

inline ThresholdCurve select_tie_threshold(std::span<const PreferencePair> val_pairs, const ScorerParams& params,
                                           const ScoringMode& mode, const Corpus& corpus, double grid_step = 0.01) {
  const auto scored = score_pairs(params, mode, corpus, val_pairs);
  return select_tie_threshold(scored.p_hats, scored.labels, grid_step);
}

inline double pair_accuracy(const ScorerParams& params, const ScoringMode& mode, const Corpus& corpus,
                            std::span<const PreferencePair> pairs, double t) {
  const auto scored = score_pairs(params, mode, corpus, pairs);
  return accuracy_at(scored.p_hats, scored.labels, t);
}

}  // namespace bodymetric
