#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "bodymetric/errors.hpp"
#include "bodymetric/io.hpp"
#include "bodymetric/numerics.hpp"
#include "bodymetric/rng.hpp"

namespace bodymetric {

using json = nlohmann::json;

inline constexpr std::size_t kAnnotatorsPerImage = 5;
inline constexpr double kRealImageScore = 9.0;
inline constexpr double kLowBucketBelow = 3.0;
inline constexpr double kHighBucketAbove = 7.0;

// One annotator's judgement: a 1-10 score or the "invalid image" label.
struct Annotation {
  int value = 0;
  bool invalid = false;

  static Annotation score(int v) {
    if (v < 1 || v > 10) throw DomainError("annotation " + std::to_string(v) + " outside 1..10");
    return {v, false};
  }
  static Annotation invalid_label() { return {0, true}; }

  bool operator==(const Annotation&) const = default;
};

enum class Source { generated, real };
enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "'");
}

struct DetectionSummary {
  std::size_t human_count = 0;
  std::size_t unique_class_count = 0;
  double min_human_confidence = 1.0;

  bool operator==(const DetectionSummary&) const = default;
};

struct RealismRecord {
  std::string id;
  std::string prompt;
  std::string prompt_id;
  Source source = Source::generated;
  std::optional<std::string> generator;
  std::vector<Annotation> annotations;
  std::optional<double> consolidated;  // numeric score
  bool consolidated_invalid = false;   // consolidated == "invalid"
  std::optional<Split> split;
  std::optional<std::string> txt_emb;
  std::optional<std::string> img_emb;
  std::optional<std::string> body_kp;
  std::optional<DetectionSummary> detection;

  // Feature-store keys; unset references fall back to the natural owner id.
  const std::string& txt_key() const { return txt_emb ? *txt_emb : prompt_id; }
  const std::string& img_key() const { return img_emb ? *img_emb : id; }
  const std::string& kp_key() const { return body_kp ? *body_kp : id; }

  bool has_score() const { return consolidated.has_value() && !consolidated_invalid; }

  bool operator==(const RealismRecord&) const = default;
};

struct PreferencePair {
  std::string prompt_id;
  std::string id_1;
  std::string id_2;
  Prob2 p{0.5, 0.5};

  bool is_tie() const { return p[0] == 0.5; }
  bool operator==(const PreferencePair&) const = default;
};

// ---------------------------------------------------------------------------
// Annotation consolidation

namespace detail {
inline double median_sorted(std::span<const double> v) {
  const std::size_t n = v.size();
  if (n == 0) return 0.0;
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}
}  // namespace detail

// Interquartile range by Tukey hinges: medians of the lower and upper halves,
// the middle element excluded when the count is odd. Input must be sorted.
inline double tukey_iqr(std::span<const double> sorted) {
  const std::size_t half = sorted.size() / 2;
  if (half == 0) return 0.0;
  const double q1 = detail::median_sorted(sorted.first(half));
  const double q3 = detail::median_sorted(sorted.last(half));
  return q3 - q1;
}

// Consolidation over any non-empty set of 1-10 scores.
inline double consolidate_values(std::span<const int> scores) {
  if (scores.empty()) throw DomainError("cannot consolidate an empty annotation set");
  std::vector<double> r;
  r.reserve(scores.size());
  for (int s : scores) {
    if (s < 1 || s > 10) throw DomainError("annotation " + std::to_string(s) + " outside 1..10");
    r.push_back(static_cast<double>(s));
  }
  std::sort(r.begin(), r.end());
  if (r.back() >= 8.0) {
    const std::size_t k = std::min<std::size_t>(2, r.size());
    return detail::mean(std::span<const double>(r).last(k));
  }
  const double m = detail::median_sorted(r);
  const double half_iqr = 0.5 * tukey_iqr(r);
  const double low = m - half_iqr;
  const double high = m + half_iqr;
  std::vector<double> kept;
  for (double x : r) {
    if (low < x && x < high) kept.push_back(x);
  }
  return kept.empty() ? detail::mean(r) : detail::mean(kept);
}

inline double consolidate_scores(std::span<const int> scores) {
  if (scores.size() != kAnnotatorsPerImage) {
    throw DomainError("expected " + std::to_string(kAnnotatorsPerImage) + " annotations, got " +
                      std::to_string(scores.size()));
  }
  return consolidate_values(scores);
}

inline bool is_invalid(std::span<const Annotation> annotations) {
  return std::count_if(annotations.begin(), annotations.end(), [](const Annotation& a) { return a.invalid; }) >= 3;
}

// Fills `consolidated` for one record. Generated images with fewer than three
// invalid labels are consolidated over their numeric annotations.
inline void consolidate_record(RealismRecord& rec) {
  if (rec.source == Source::real) {
    rec.consolidated = kRealImageScore;
    rec.consolidated_invalid = false;
    return;
  }
  if (rec.annotations.size() != kAnnotatorsPerImage) {
    throw DomainError("record '" + rec.id + "' has " + std::to_string(rec.annotations.size()) +
                      " annotations, expected " + std::to_string(kAnnotatorsPerImage));
  }
  if (is_invalid(rec.annotations)) {
    rec.consolidated.reset();
    rec.consolidated_invalid = true;
    return;
  }
  std::vector<int> values;
  for (const auto& a : rec.annotations) {
    if (!a.invalid) values.push_back(a.value);
  }
  rec.consolidated = consolidate_values(values);
  rec.consolidated_invalid = false;
}

// ---------------------------------------------------------------------------
// Detection-based filtering

enum class FilterReason { too_many_humans, too_many_classes, low_confidence };

inline std::string to_string(FilterReason r) {
  switch (r) {
    case FilterReason::too_many_humans: return "A";
    case FilterReason::too_many_classes: return "B";
    case FilterReason::low_confidence: return "C";
  }
  return "?";
}

inline constexpr std::size_t kMaxHumans = 3;
inline constexpr std::size_t kMaxUniqueClasses = 3;
inline constexpr double kMinHumanConfidence = 0.98;

// Returns the first failing rule, or nullopt to keep the image.
inline std::optional<FilterReason> filter_image(const DetectionSummary& d) {
  if (d.human_count > kMaxHumans) return FilterReason::too_many_humans;
  if (d.unique_class_count > kMaxUniqueClasses) return FilterReason::too_many_classes;
  if (d.min_human_confidence < kMinHumanConfidence) return FilterReason::low_confidence;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Pair construction

enum class Bucket { low, high, excluded };

inline Bucket bucket_of(const RealismRecord& r) {
  if (!r.has_score()) return Bucket::excluded;
  if (*r.consolidated < kLowBucketBelow) return Bucket::low;
  if (*r.consolidated > kHighBucketAbove) return Bucket::high;
  return Bucket::excluded;
}

// Pairs every two eligible records of a prompt (input order decides id_1/id_2).
// Cross-bucket pairs prefer the HIGH record, same-bucket pairs are ties. When both
// classes are present the larger one is subsampled to the size of the smaller.
inline std::vector<PreferencePair> build_pairs(std::span<const RealismRecord> records, std::uint64_t seed) {
  std::vector<std::string> prompt_order;
  std::unordered_map<std::string, std::vector<std::size_t>> by_prompt;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (bucket_of(records[i]) == Bucket::excluded) continue;
    auto [it, inserted] = by_prompt.try_emplace(records[i].prompt_id);
    if (inserted) prompt_order.push_back(records[i].prompt_id);
    it->second.push_back(i);
  }

  std::vector<PreferencePair> all;
  std::vector<std::size_t> ties, decisive;
  for (const auto& prompt : prompt_order) {
    const auto& members = by_prompt[prompt];
    for (std::size_t a = 0; a < members.size(); ++a) {
      for (std::size_t b = a + 1; b < members.size(); ++b) {
        const auto& r1 = records[members[a]];
        const auto& r2 = records[members[b]];
        if (r1.id == r2.id) continue;
        const Bucket b1 = bucket_of(r1);
        const Bucket b2 = bucket_of(r2);
        PreferencePair pair{prompt, r1.id, r2.id, {0.5, 0.5}};
        if (b1 != b2) {
          pair.p = b1 == Bucket::high ? Prob2{1.0, 0.0} : Prob2{0.0, 1.0};
          decisive.push_back(all.size());
        } else {
          ties.push_back(all.size());
        }
        all.push_back(std::move(pair));
      }
    }
  }

  if (ties.empty() || decisive.empty() || ties.size() == decisive.size()) return all;

  auto& larger = ties.size() > decisive.size() ? ties : decisive;
  const std::size_t target = std::min(ties.size(), decisive.size());
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(larger));
  larger.resize(target);

  std::vector<std::size_t> keep;
  keep.reserve(2 * target);
  keep.insert(keep.end(), ties.begin(), ties.end());
  keep.insert(keep.end(), decisive.begin(), decisive.end());
  std::sort(keep.begin(), keep.end());
  std::vector<PreferencePair> out;
  out.reserve(keep.size());
  for (std::size_t i : keep) out.push_back(std::move(all[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Prompt-disjoint splits

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

// Assigns a split per prompt_id; the assignment depends only on the set of prompts and the seed.
inline std::unordered_map<std::string, Split> assign_splits(std::span<const RealismRecord> records,
                                                            const SplitRatios& ratios, std::uint64_t seed) {
  if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw DomainError("split ratios must be non-negative and sum to 1");
  }
  std::vector<std::string> prompts;
  {
    std::unordered_set<std::string> seen;
    for (const auto& r : records) {
      if (seen.insert(r.prompt_id).second) prompts.push_back(r.prompt_id);
    }
  }
  std::sort(prompts.begin(), prompts.end());
  Rng rng(seed);
  rng.shuffle(std::span<std::string>(prompts));

  const auto n = static_cast<double>(prompts.size());
  const auto n_train = std::min(prompts.size(), static_cast<std::size_t>(std::llround(ratios.train * n)));
  const auto n_val =
      std::min(prompts.size() - n_train, static_cast<std::size_t>(std::llround(ratios.val * n)));
  std::unordered_map<std::string, Split> out;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    out[prompts[i]] = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
  }
  return out;
}

inline std::vector<RealismRecord> split_dataset(std::vector<RealismRecord> records, const SplitRatios& ratios,
                                                std::uint64_t seed) {
  const auto assignment = assign_splits(records, ratios, seed);
  for (auto& r : records) r.split = assignment.at(r.prompt_id);
  return records;
}

// ---------------------------------------------------------------------------
// JSON-lines records and pairs

namespace detail {
inline const json& require_field(const json& j, const char* key, const std::string& ctx) {
  auto it = j.find(key);
  if (it == j.end()) throw DataError(ctx + ": missing field '" + key + "'");
  return *it;
}

inline std::optional<std::string> optional_string(const json& j, const char* key, const std::string& ctx) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw DataError(ctx + ": field '" + key + "' must be a string or null");
  return it->get<std::string>();
}

inline std::string required_string(const json& j, const char* key, const std::string& ctx) {
  const auto& v = require_field(j, key, ctx);
  if (!v.is_string()) throw DataError(ctx + ": field '" + key + "' must be a string");
  return v.get<std::string>();
}
}  // namespace detail

inline json record_to_json(const RealismRecord& r) {
  json j = json::object();
  j["id"] = r.id;
  j["prompt"] = r.prompt;
  j["prompt_id"] = r.prompt_id;
  j["source"] = r.source == Source::real ? "real" : "generated";
  j["generator"] = r.generator ? json(*r.generator) : json(nullptr);
  json ann = json::array();
  for (const auto& a : r.annotations) ann.push_back(a.invalid ? json("invalid") : json(a.value));
  j["annotations"] = ann;
  if (r.consolidated_invalid) {
    j["consolidated"] = "invalid";
  } else if (r.consolidated) {
    j["consolidated"] = *r.consolidated;
  } else {
    j["consolidated"] = nullptr;
  }
  j["split"] = r.split ? json(to_string(*r.split)) : json(nullptr);
  j["txt_emb"] = r.txt_emb ? json(*r.txt_emb) : json(nullptr);
  j["img_emb"] = r.img_emb ? json(*r.img_emb) : json(nullptr);
  j["body_kp"] = r.body_kp ? json(*r.body_kp) : json(nullptr);
  if (r.detection) {
    j["detection"] = {{"human_count", r.detection->human_count},
                      {"unique_class_count", r.detection->unique_class_count},
                      {"min_human_confidence", r.detection->min_human_confidence}};
  }
  return j;
}

inline RealismRecord record_from_json(const json& j, const std::string& ctx) {
  static const std::unordered_set<std::string> known{"id",    "prompt",  "prompt_id", "source",
                                                     "generator", "annotations", "consolidated", "split",
                                                     "txt_emb", "img_emb", "body_kp",  "detection"};
  if (!j.is_object()) throw DataError(ctx + ": record must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw DataError(ctx + ": unknown field '" + key + "'");
  }
  RealismRecord r;
  r.id = detail::required_string(j, "id", ctx);
  r.prompt = detail::required_string(j, "prompt", ctx);
  r.prompt_id = detail::required_string(j, "prompt_id", ctx);
  const std::string source = detail::required_string(j, "source", ctx);
  if (source == "generated") {
    r.source = Source::generated;
  } else if (source == "real") {
    r.source = Source::real;
  } else {
    throw DataError(ctx + ": source must be 'generated' or 'real'");
  }
  r.generator = detail::optional_string(j, "generator", ctx);
  if (auto it = j.find("annotations"); it != j.end() && !it->is_null()) {
    if (!it->is_array()) throw DataError(ctx + ": annotations must be an array");
    for (const auto& a : *it) {
      if (a.is_string() && a.get<std::string>() == "invalid") {
        r.annotations.push_back(Annotation::invalid_label());
      } else if (a.is_number_integer()) {
        r.annotations.push_back(Annotation::score(a.get<int>()));
      } else {
        throw DataError(ctx + ": annotation must be an integer or \"invalid\"");
      }
    }
  }
  if (auto it = j.find("consolidated"); it != j.end() && !it->is_null()) {
    if (it->is_string() && it->get<std::string>() == "invalid") {
      r.consolidated_invalid = true;
    } else if (it->is_number()) {
      const double v = it->get<double>();
      if (!(v >= 1.0 && v <= 10.0)) throw DomainError(ctx + ": consolidated score outside [1,10]");
      r.consolidated = v;
    } else {
      throw DataError(ctx + ": consolidated must be a number, \"invalid\" or null");
    }
  }
  if (auto s = detail::optional_string(j, "split", ctx)) r.split = split_from_string(*s);
  r.txt_emb = detail::optional_string(j, "txt_emb", ctx);
  r.img_emb = detail::optional_string(j, "img_emb", ctx);
  r.body_kp = detail::optional_string(j, "body_kp", ctx);
  if (auto it = j.find("detection"); it != j.end() && !it->is_null()) {
    DetectionSummary d;
    try {
      d.human_count = it->at("human_count").get<std::size_t>();
      d.unique_class_count = it->at("unique_class_count").get<std::size_t>();
      d.min_human_confidence = it->at("min_human_confidence").get<double>();
    } catch (const json::exception& e) {
      throw DataError(ctx + ": malformed detection summary: " + e.what());
    }
    if (!(d.min_human_confidence >= 0.0 && d.min_human_confidence <= 1.0)) {
      throw DomainError(ctx + ": detection confidence outside [0,1]");
    }
    r.detection = d;
  }
  if (r.source == Source::generated && !r.annotations.empty() && r.annotations.size() != kAnnotatorsPerImage) {
    throw DomainError(ctx + ": generated records carry " + std::to_string(kAnnotatorsPerImage) + " annotations");
  }
  return r;
}

inline json pair_to_json(const PreferencePair& p) {
  return {{"prompt_id", p.prompt_id}, {"id_1", p.id_1}, {"id_2", p.id_2}, {"p", {p.p[0], p.p[1]}}};
}

inline PreferencePair pair_from_json(const json& j, const std::string& ctx) {
  PreferencePair p;
  p.prompt_id = detail::required_string(j, "prompt_id", ctx);
  p.id_1 = detail::required_string(j, "id_1", ctx);
  p.id_2 = detail::required_string(j, "id_2", ctx);
  const auto& arr = detail::require_field(j, "p", ctx);
  if (!arr.is_array() || arr.size() != 2) throw DataError(ctx + ": p must be a two-element array");
  p.p = {arr[0].get<double>(), arr[1].get<double>()};
  if (!is_allowed_preference(p.p)) throw DomainError(ctx + ": p must be [1,0], [0,1] or [0.5,0.5]");
  if (p.id_1 == p.id_2) throw DataError(ctx + ": pair references the same record twice");
  return p;
}

// Parses JSON-lines text; blank lines are skipped.
template <typename T, typename Parse>
std::vector<T> parse_jsonl(const std::string& text, const std::string& source_name, Parse parse) {
  std::vector<T> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string ctx = source_name + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(ctx + ": invalid JSON: " + e.what());
    }
    out.push_back(parse(j, ctx));
  }
  return out;
}

inline std::vector<RealismRecord> load_records(const std::filesystem::path& path) {
  return parse_jsonl<RealismRecord>(read_file_text(path), path.string(), record_from_json);
}

inline std::string records_to_jsonl(std::span<const RealismRecord> records) {
  std::string out;
  for (const auto& r : records) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

inline void store_records(std::span<const RealismRecord> records, const std::filesystem::path& path) {
  write_file_atomic(path, records_to_jsonl(records));
}

inline std::vector<PreferencePair> load_pairs(const std::filesystem::path& path) {
  return parse_jsonl<PreferencePair>(read_file_text(path), path.string(), pair_from_json);
}

inline std::string pairs_to_jsonl(std::span<const PreferencePair> pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += pair_to_json(p).dump();
    out += '\n';
  }
  return out;
}

inline void store_pairs(std::span<const PreferencePair> pairs, const std::filesystem::path& path) {
  write_file_atomic(path, pairs_to_jsonl(pairs));
}

// ---------------------------------------------------------------------------
// EMB1 feature stores
//
//   "EMB1" | u32 dim | u32 count | count x (u16 id_len | id bytes | dim x f32)
// All integers and floats little-endian.

class EmbeddingTable {
public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::uint32_t dim) : dim_(dim) {}

  std::uint32_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  const std::vector<std::string>& ids() const { return ids_; }

  void add(const std::string& id, std::span<const float> values) {
    if (values.size() != dim_) {
      throw ShapeError("embedding '" + id + "' has length " + std::to_string(values.size()) + ", table dim is " +
                       std::to_string(dim_));
    }
    if (id.size() > UINT16_MAX) throw DataError("embedding id longer than 65535 bytes");
    if (!index_.try_emplace(id, ids_.size()).second) throw DataError("duplicate embedding id '" + id + "'");
    ids_.push_back(id);
    values_.insert(values_.end(), values.begin(), values.end());
  }

  void add(const std::string& id, std::span<const double> values) {
    std::vector<float> f(values.begin(), values.end());
    add(id, std::span<const float>(f));
  }

  bool contains(const std::string& id) const { return index_.contains(id); }

  std::span<const float> row(std::size_t i) const { return {values_.data() + i * dim_, dim_}; }

  std::optional<std::span<const float>> find(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return row(it->second);
  }

  Vector get(const std::string& id) const {
    auto r = find(id);
    if (!r) throw DataError("no embedding for id '" + id + "'");
    return Vector(r->begin(), r->end());
  }

  bool operator==(const EmbeddingTable& o) const {
    return dim_ == o.dim_ && ids_ == o.ids_ && values_ == o.values_;
  }

private:
  std::uint32_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<float> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline std::vector<unsigned char> serialize_embeddings(const EmbeddingTable& table) {
  ByteWriter w;
  w.raw("EMB1");
  w.u32(table.dim());
  w.u32(static_cast<std::uint32_t>(table.size()));
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& id = table.ids()[i];
    w.u16(static_cast<std::uint16_t>(id.size()));
    w.raw(id);
    for (float v : table.row(i)) w.f32(v);
  }
  return w.take();
}

inline EmbeddingTable parse_embeddings(const std::vector<unsigned char>& bytes, const std::string& name,
                                       std::optional<std::uint32_t> expected_dim = std::nullopt) {
  ByteReader r(bytes, name);
  if (bytes.size() < 4 || r.raw(4, "magic") != "EMB1") r.fail("bad magic, expected \"EMB1\"", 0);
  const std::size_t dim_offset = r.offset();
  const std::uint32_t dim = r.u32("dimension");
  if (expected_dim && dim != *expected_dim) {
    r.fail("dimension " + std::to_string(dim) + " does not match expected " + std::to_string(*expected_dim),
           dim_offset);
  }
  const std::uint32_t count = r.u32("record count");
  EmbeddingTable table(dim);
  std::vector<float> values(dim);
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::size_t record_offset = r.offset();
    const std::uint16_t len = r.u16("id length");
    std::string id = r.raw(len, "id bytes");
    for (std::uint32_t d = 0; d < dim; ++d) values[d] = r.f32("embedding values");
    if (table.contains(id)) r.fail("duplicate id '" + id + "'", record_offset);
    table.add(id, std::span<const float>(values));
  }
  if (!r.at_end()) r.fail("trailing bytes after " + std::to_string(count) + " records", r.offset());
  return table;
}

inline EmbeddingTable load_embeddings(const std::filesystem::path& path,
                                      std::optional<std::uint32_t> expected_dim = std::nullopt) {
  return parse_embeddings(read_file_bytes(path), path.string(), expected_dim);
}

inline void store_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_embeddings(table));
}

}  // namespace bodymetric
