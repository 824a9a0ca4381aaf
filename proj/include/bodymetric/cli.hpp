#pragma once

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bodymetric/checkpoint.hpp"
#include "bodymetric/dataset.hpp"
#include "bodymetric/evaluation.hpp"
#include "bodymetric/rng.hpp"
#include "bodymetric/scoring.hpp"
#include "bodymetric/selftest.hpp"
#include "bodymetric/training.hpp"

namespace bodymetric::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericError = 3 };

class UsageError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Flags and config-file values merged; flags win.
struct RunConfig {
  std::optional<fs::path> records;
  std::optional<fs::path> pairs;
  std::optional<fs::path> emb;
  std::optional<fs::path> kp;
  std::optional<fs::path> checkpoint;
  std::optional<fs::path> out;
  std::optional<fs::path> scores;
  double threshold_grid = 0.01;
  std::optional<double> threshold;
  SplitRatios ratios;
  TrainConfig train;
};

namespace detail {

inline const std::initializer_list<const char*> kPathKeys = {"records", "pairs", "emb",   "kp",
                                                             "checkpoint", "out", "scores"};

inline RunConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw DataError("--config must contain a JSON object");
  RunConfig rc;
  nlohmann::json train_part = nlohmann::json::object();
  for (const auto& [key, value] : j.items()) {
    const bool is_path = std::any_of(kPathKeys.begin(), kPathKeys.end(), [&](const char* k) { return key == k; });
    const bool is_train =
        std::any_of(kTrainConfigKeys.begin(), kTrainConfigKeys.end(), [&](const char* k) { return key == k; });
    if (is_path) {
      if (!value.is_string()) throw DataError("config key '" + key + "' must be a path string");
      const fs::path p = value.get<std::string>();
      if (key == "records") rc.records = p;
      if (key == "pairs") rc.pairs = p;
      if (key == "emb") rc.emb = p;
      if (key == "kp") rc.kp = p;
      if (key == "checkpoint") rc.checkpoint = p;
      if (key == "out") rc.out = p;
      if (key == "scores") rc.scores = p;
    } else if (is_train) {
      train_part[key] = value;
    } else if (key == "threshold_grid") {
      rc.threshold_grid = value.get<double>();
    } else if (key == "threshold") {
      rc.threshold = value.get<double>();
    } else if (key == "ratios") {
      if (!value.is_array() || value.size() != 3) throw DataError("config key 'ratios' must be [train, val, test]");
      rc.ratios = {value[0].get<double>(), value[1].get<double>(), value[2].get<double>()};
    } else {
      throw DataError("config: unknown key '" + key + "'");
    }
  }
  rc.train = train_config_from_json(train_part);
  return rc;
}

inline fs::path require_input(const std::optional<fs::path>& p, const char* flag) {
  if (!p) throw UsageError(std::string("missing required option ") + flag);
  if (!fs::exists(*p)) throw DataError(std::string(flag) + ": '" + p->string() + "' does not exist");
  return fs::absolute(*p);
}

inline fs::path require_output(const std::optional<fs::path>& p, const char* flag) {
  if (!p) throw UsageError(std::string("missing required option ") + flag);
  return fs::absolute(*p);
}

inline void resolve_paths(RunConfig& rc) {
  for (auto* p : {&rc.records, &rc.pairs, &rc.emb, &rc.kp, &rc.checkpoint, &rc.out, &rc.scores}) {
    if (*p) *p = fs::absolute(**p);
  }
}

inline std::unordered_map<std::string, Split> prompt_splits(std::span<const RealismRecord> records) {
  std::unordered_map<std::string, Split> out;
  for (const auto& r : records) {
    if (!r.split) continue;
    auto [it, inserted] = out.emplace(r.prompt_id, *r.split);
    if (!inserted && it->second != *r.split) {
      throw DataError("prompt '" + r.prompt_id + "' appears in more than one split");
    }
  }
  return out;
}

inline std::vector<PreferencePair> pairs_in(std::span<const PreferencePair> pairs,
                                            const std::unordered_map<std::string, Split>& splits, Split which) {
  std::vector<PreferencePair> out;
  for (const auto& p : pairs) {
    auto it = splits.find(p.prompt_id);
    if (it != splits.end() && it->second == which) out.push_back(p);
  }
  return out;
}

inline std::vector<PreferencePair> pairs_for(const RunConfig& rc, std::span<const RealismRecord> records,
                                             std::uint64_t seed) {
  if (rc.pairs) return load_pairs(*rc.pairs);
  return build_pairs(records, derive_seed(seed, "pairs"));
}

struct Loaded {
  Checkpoint ck;
  std::vector<RealismRecord> records;
  FeatureStores stores;
};

inline Loaded load_model_inputs(const RunConfig& rc) {
  const auto ck_path = require_input(rc.checkpoint, "--checkpoint");
  const auto rec_path = require_input(rc.records, "--records");
  const auto emb_dir = require_input(rc.emb, "--emb");
  std::optional<fs::path> kp;
  if (rc.kp) kp = require_input(rc.kp, "--kp");
  Loaded l{load_checkpoint(ck_path), load_records(rec_path), {}};
  l.stores = FeatureStores::load(emb_dir, kp);
  return l;
}

// Records that can be scored: consolidated-invalid images are skipped.
inline std::vector<RealismRecord> scorable(std::vector<RealismRecord> records) {
  std::erase_if(records, [](const RealismRecord& r) { return r.consolidated_invalid; });
  return records;
}

inline void emit(std::ostream& out, const std::optional<fs::path>& path, const std::string& text) {
  if (path) {
    write_file_atomic(*path, text);
  } else {
    out << text;
  }
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_consolidate(const RunConfig& rc, std::ostream& out) {
  auto records = load_records(require_input(rc.records, "--records"));
  const auto dest = require_output(rc.out, "--out");
  std::size_t invalid = 0;
  for (auto& r : records) {
    consolidate_record(r);
    invalid += r.consolidated_invalid ? 1 : 0;
  }
  store_records(records, dest);
  out << nlohmann::json{{"records", records.size()}, {"invalid", invalid}}.dump() << '\n';
  return kOk;
}

inline int cmd_filter(const RunConfig& rc, std::ostream& out) {
  const auto records = load_records(require_input(rc.records, "--records"));
  const auto dest = require_output(rc.out, "--out");
  std::vector<RealismRecord> kept;
  std::map<std::string, std::size_t> dropped{{"A", 0}, {"B", 0}, {"C", 0}};
  for (const auto& r : records) {
    if (r.detection) {
      if (auto reason = filter_image(*r.detection)) {
        ++dropped[to_string(*reason)];
        continue;
      }
    }
    kept.push_back(r);
  }
  store_records(kept, dest);
  out << nlohmann::json{{"kept", kept.size()}, {"dropped", dropped}}.dump() << '\n';
  return kOk;
}

inline int cmd_pairs(const RunConfig& rc, std::ostream& out) {
  const auto records = load_records(require_input(rc.records, "--records"));
  const auto dest = require_output(rc.out, "--out");
  const auto pairs = build_pairs(records, derive_seed(rc.train.seed, "pairs"));
  store_pairs(pairs, dest);
  const auto ties = std::count_if(pairs.begin(), pairs.end(), [](const PreferencePair& p) { return p.is_tie(); });
  out << nlohmann::json{{"pairs", pairs.size()}, {"ties", ties}}.dump() << '\n';
  return kOk;
}

inline int cmd_split(const RunConfig& rc, std::ostream& out) {
  auto records = load_records(require_input(rc.records, "--records"));
  const auto dest = require_output(rc.out, "--out");
  records = split_dataset(std::move(records), rc.ratios, derive_seed(rc.train.seed, "split"));
  store_records(records, dest);
  std::map<std::string, std::set<std::string>> prompts;
  for (const auto& r : records) prompts[to_string(*r.split)].insert(r.prompt_id);
  nlohmann::json summary;
  for (const char* s : {"train", "val", "test"}) summary[s] = prompts[s].size();
  out << nlohmann::json{{"prompts", summary}}.dump() << '\n';
  return kOk;
}

inline int cmd_train(const RunConfig& rc, std::ostream& out) {
  const auto rec_path = require_input(rc.records, "--records");
  const auto emb_dir = require_input(rc.emb, "--emb");
  std::optional<fs::path> kp;
  if (rc.kp) kp = require_input(rc.kp, "--kp");
  if (rc.pairs) require_input(rc.pairs, "--pairs");
  const auto ck_path = require_output(rc.checkpoint, "--checkpoint");
  rc.train.validate();

  const auto records = scorable(load_records(rec_path));
  const auto splits = prompt_splits(records);
  if (splits.empty()) throw DataError("records carry no split tags; run the split subcommand first");
  const auto pairs = pairs_for(rc, records, rc.train.seed);
  const auto train_pairs = pairs_in(pairs, splits, Split::train);
  const auto val_pairs = pairs_in(pairs, splits, Split::val);
  std::vector<std::string> train_records;
  for (const auto& r : records) {
    if (r.split == Split::train) train_records.push_back(r.id);
  }

  const auto stores = FeatureStores::load(emb_dir, kp);
  const Corpus corpus(records, stores, rc.train.scoring_mode(), rc.train.scorer);
  const auto result = train(rc.train, {train_pairs, train_records, val_pairs}, corpus);
  save_checkpoint(result.best, ck_path);

  nlohmann::json log;
  log["best_step"] = result.best.step;
  log["val_accuracy"] = result.best.val_accuracy;
  log["train_pairs"] = train_pairs.size();
  log["val_pairs"] = val_pairs.size();
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& [step, acc] : result.validation) curve.push_back({step, acc});
  log["validation"] = curve;
  if (rc.out) {
    nlohmann::json full = log;
    full["losses"] = result.losses;
    write_file_atomic(*rc.out, full.dump() + "\n");
  }
  out << log.dump() << '\n';
  return kOk;
}

inline int cmd_eval(const RunConfig& rc, std::ostream& out) {
  auto l = load_model_inputs(rc);
  if (rc.pairs) require_input(rc.pairs, "--pairs");
  const auto mode = l.ck.config.scoring_mode();
  const auto records = scorable(std::move(l.records));
  const Corpus corpus(records, l.stores, mode, l.ck.params.config);
  const auto pairs = pairs_for(rc, records, rc.train.seed);
  const auto splits = prompt_splits(records);

  const auto val_pairs = pairs_in(pairs, splits, Split::val);
  auto eval_pairs = pairs_in(pairs, splits, Split::test);
  std::string eval_set = "test";
  if (eval_pairs.empty()) {
    eval_set = val_pairs.empty() ? "all" : "non-val";
    for (const auto& p : pairs) {
      auto it = splits.find(p.prompt_id);
      if (it == splits.end() || it->second != Split::val) eval_pairs.push_back(p);
    }
  }
  if (eval_pairs.empty()) throw DataError("no pairs to evaluate");

  ThresholdCurve curve;
  double t = rc.threshold.value_or(0.0);
  if (!rc.threshold && !val_pairs.empty()) {
    curve = select_tie_threshold(val_pairs, l.ck.params, mode, corpus, rc.threshold_grid);
    t = curve.best_threshold;
  }
  const auto scored = score_pairs(l.ck.params, mode, corpus, eval_pairs);
  EvalReport report = evaluate_pairs(scored.p_hats, scored.labels, t);
  report.curve = curve;

  auto j = report_to_json(report);
  j["eval_set"] = eval_set;
  if (rc.out) {
    write_file_atomic(*rc.out / "report.json", j.dump() + "\n");
    write_file_atomic(*rc.out / "report.txt", report_to_text(report));
    if (!curve.thresholds.empty()) write_file_atomic(*rc.out / "curve.csv", curve_to_csv(curve));
  }
  out << j.dump() << '\n';
  return kOk;
}

inline int cmd_score(const RunConfig& rc, std::ostream& out) {
  auto l = load_model_inputs(rc);
  const auto mode = l.ck.config.scoring_mode();
  const auto records = scorable(std::move(l.records));
  const Corpus corpus(records, l.stores, mode, l.ck.params.config);
  std::string text;
  for (const auto& im : corpus.images()) {
    nlohmann::json j{{"id", im.id},
                     {"prompt_id", im.prompt_id},
                     {"score", realism_score(l.ck.params, mode, im)}};
    if (mode.objective == Objective::preference) j["cosine"] = realism_cosine(l.ck.params, mode, im);
    text += j.dump() + "\n";
  }
  emit(out, rc.out, text);
  return kOk;
}

inline int cmd_rank(const RunConfig& rc, std::ostream& out) {
  auto l = load_model_inputs(rc);
  const auto mode = l.ck.config.scoring_mode();
  const auto records = scorable(std::move(l.records));
  const Corpus corpus(records, l.stores, mode, l.ck.params.config);
  std::vector<std::string> prompt_order;
  std::map<std::string, std::vector<std::pair<std::string, double>>> by_prompt;
  for (const auto& im : corpus.images()) {
    if (!by_prompt.contains(im.prompt_id)) prompt_order.push_back(im.prompt_id);
    by_prompt[im.prompt_id].emplace_back(im.id, realism_score(l.ck.params, mode, im));
  }
  std::string text;
  for (const auto& prompt : prompt_order) {
    const auto& scores = by_prompt[prompt];
    text += nlohmann::json{{"prompt_id", prompt}, {"ranking", rank_images(scores)}}.dump() + "\n";
  }
  emit(out, rc.out, text);
  return kOk;
}

// Scores come from a JSON-lines file ({"generator", "score"}) or from scoring
// generated records with a checkpoint (temperature-free cosine).
inline int cmd_benchmark(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  std::map<std::string, std::vector<double>> groups;
  if (rc.scores) {
    const auto path = require_input(rc.scores, "--scores");
    auto rows = parse_jsonl<std::pair<std::string, double>>(
        read_file_text(path), path.string(), [](const nlohmann::json& j, const std::string& ctx) {
          try {
            const double s = j.contains("cosine") ? j.at("cosine").get<double>() : j.at("score").get<double>();
            if (!std::isfinite(s)) throw DataError(ctx + ": non-finite score");
            return std::make_pair(j.at("generator").get<std::string>(), s);
          } catch (const nlohmann::json::exception& e) {
            throw DataError(ctx + ": " + e.what());
          }
        });
    for (auto& [g, s] : rows) groups[g].push_back(s);
  } else {
    auto l = load_model_inputs(rc);
    const auto mode = l.ck.config.scoring_mode();
    if (mode.objective != Objective::preference) {
      throw DataError("benchmarking scores with the preference head; checkpoint objective is " +
                      to_string(mode.objective));
    }
    std::vector<RealismRecord> generated;
    for (auto& r : scorable(std::move(l.records))) {
      if (r.source == Source::generated && r.generator) {
        groups.try_emplace(*r.generator);
        generated.push_back(std::move(r));
      }
    }
    const Corpus corpus(generated, l.stores, mode, l.ck.params.config);
    for (const auto& r : generated) {
      groups[*r.generator].push_back(realism_cosine(l.ck.params, mode, corpus.at(r.id)));
    }
  }
  const auto report = benchmark(groups);
  for (const auto& w : report.warnings) err << "warning: " << w << '\n';
  const auto j = benchmark_to_json(report);
  if (rc.out) {
    write_file_atomic(*rc.out / "benchmark.json", j.dump() + "\n");
    write_file_atomic(*rc.out / "benchmark.txt", benchmark_to_text(report));
  }
  out << benchmark_to_text(report);
  return kOk;
}

inline int cmd_selftest(std::ostream& out) {
  const auto results = run_selftest();
  bool ok = true;
  for (const auto& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name;
    if (!r.detail.empty()) out << "  (" << r.detail << ")";
    out << '\n';
    ok = ok && r.passed;
  }
  return ok ? kOk : kNumericError;
}

}  // namespace detail

inline std::string usage() {
  return "usage: bodymetric <consolidate|filter|pairs|split|train|eval|score|rank|benchmark|selftest> [options]\n"
         "run 'bodymetric <subcommand> --help' for subcommand options\n";
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Body-realism scoring toolkit", "bodymetric"};
  app.require_subcommand(1, 1);

  std::optional<std::string> records, pairs, emb, kp, checkpoint, outp, config, objective, prior, scores;
  std::optional<std::uint64_t> seed;
  std::optional<double> grid, threshold;
  std::optional<std::size_t> steps;
  std::optional<std::vector<double>> ratios;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"consolidate", "consolidate annotations into realism scores"},
      {"filter", "drop records by detector summary"},
      {"pairs", "build preference pairs"},
      {"split", "assign train/val/test splits by prompt"},
      {"train", "train a scorer and write a checkpoint"},
      {"eval", "sweep the tie threshold and report pair accuracy"},
      {"score", "score records with a checkpoint"},
      {"rank", "rank images per prompt"},
      {"benchmark", "per-generator mean and sd of scores"},
      {"selftest", "run built-in consistency checks"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, description] : commands) {
    auto* sub = app.add_subcommand(name, description);
    subs[name] = sub;
    if (name == "selftest") continue;
    sub->add_option("--records", records, "records JSON-lines file");
    sub->add_option("--out", outp, "output file or directory");
    sub->add_option("--seed", seed, "run seed");
    sub->add_option("--config", config, "JSON run configuration");
    if (name == "split") sub->add_option("--ratios", ratios, "train val test ratios")->expected(3);
    if (name == "train" || name == "eval" || name == "score" || name == "rank" || name == "benchmark") {
      sub->add_option("--emb", emb, "feature store directory (txt.emb, img.emb, kp.emb, overlay.emb)");
      sub->add_option("--kp", kp, "keypoint store (overrides <emb>/kp.emb)");
      sub->add_option("--checkpoint", checkpoint, "BMCK checkpoint");
    }
    if (name == "train" || name == "eval") sub->add_option("--pairs", pairs, "preference pairs JSON-lines file");
    if (name == "train") {
      sub->add_option("--objective", objective, "preference | regression | text_variant");
      sub->add_option("--prior", prior, "keypoints | pixel | latent | none");
      sub->add_option("--steps", steps, "optimizer steps");
    }
    if (name == "eval") {
      sub->add_option("--threshold-grid", grid, "tie-threshold grid step");
      sub->add_option("--threshold", threshold, "fixed tie threshold (skips validation sweep)");
    }
    if (name == "benchmark") sub->add_option("--scores", scores, "JSON-lines {generator, score} fixture");
  }

  try {
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << usage();
    return kUsage;
  }

  std::string command;
  for (const auto& [name, sub] : subs) {
    if (sub->parsed()) command = name;
  }

  try {
    if (command == "selftest") return detail::cmd_selftest(out);

    RunConfig rc;
    if (config) rc = detail::config_from_json(nlohmann::json::parse(read_file_text(*config)));
    if (records) rc.records = *records;
    if (pairs) rc.pairs = *pairs;
    if (emb) rc.emb = *emb;
    if (kp) rc.kp = *kp;
    if (checkpoint) rc.checkpoint = *checkpoint;
    if (outp) rc.out = *outp;
    if (scores) rc.scores = *scores;
    if (seed) rc.train.seed = *seed;
    if (grid) rc.threshold_grid = *grid;
    if (threshold) rc.threshold = *threshold;
    if (steps) rc.train.steps = *steps;
    if (objective) rc.train.objective = objective_from_string(*objective);
    if (prior) rc.train.prior = prior_from_string(*prior);
    if (ratios) rc.ratios = {(*ratios)[0], (*ratios)[1], (*ratios)[2]};
    detail::resolve_paths(rc);

    if (command == "consolidate") return detail::cmd_consolidate(rc, out);
    if (command == "filter") return detail::cmd_filter(rc, out);
    if (command == "pairs") return detail::cmd_pairs(rc, out);
    if (command == "split") return detail::cmd_split(rc, out);
    if (command == "train") return detail::cmd_train(rc, out);
    if (command == "eval") return detail::cmd_eval(rc, out);
    if (command == "score") return detail::cmd_score(rc, out);
    if (command == "rank") return detail::cmd_rank(rc, out);
    if (command == "benchmark") return detail::cmd_benchmark(rc, out, err);
    err << usage();
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n' << usage();
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const nlohmann::json::exception& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const ContractError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  }
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv, argv + argc), out, err);
}

}  // namespace bodymetric::cli
