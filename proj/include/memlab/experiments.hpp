#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "memlab/corpus.hpp"
#include "memlab/memory_eval.hpp"
#include "memlab/trainer.hpp"
#include "memlab/transformer.hpp"

namespace memlab {

class ExperimentError : public Error {
 public:
  using Error::Error;
};

// Either a JSONL file or a seeded synthetic corpus.
struct CorpusSpec {
  std::string name = "corpus";
  std::string path;
  std::size_t count = 200;
  std::size_t min_length = 32;
  std::size_t max_length = 64;
  std::optional<std::uint64_t> seed;  // synthetic only; defaults to the experiment seed
  std::string bucket;                 // "short", "long" or empty for no length filter

  bool synthetic() const { return path.empty(); }
  nlohmann::json to_json() const;
  static CorpusSpec from_json(const nlohmann::json& doc);
};

// Model shape without the vocabulary, which comes from the corpus.
struct ModelSpec {
  std::string name;
  std::size_t d_model = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_width = 0;
  std::size_t max_seq_len = 0;  // 0: longest framed record

  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& doc);
};

struct ExperimentConfig {
  static constexpr int kVersion = 1;

  std::string name = "experiment";
  std::uint64_t seed = 0;
  CorpusSpec corpus;
  std::vector<ModelSpec> models;
  TrainConfig train;  // its seed is replaced by the experiment seed
  EvalOptions eval;
  std::string output_dir;

  void validate() const;
  // Everything except output_dir, with defaults filled in.
  nlohmann::json to_json() const;
  // Relative paths (corpus, thresholds, output_dir) resolve against base_dir
  // when it is given; load() passes the directory of the file.
  static ExperimentConfig from_json(const nlohmann::json& doc, const std::string& base_dir = "");
  static ExperimentConfig load(const std::string& path);

  // FNV-1a 64 of to_json().dump(), as 16 hex digits.
  std::string hash() const;
};

std::uint64_t fnv1a64(std::string_view bytes);

struct SummaryRow {
  std::string model_name;
  std::size_t n_params = 0;
  std::string corpus;
  std::string bucket;  // "all" or "(lo,hi]"
  std::size_t n = 0;
  double acc = 0.0;
  std::size_t minor = 0;
  std::size_t severe = 0;
  std::size_t loss = 0;
};

struct ExperimentSummary {
  std::string experiment;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<SummaryRow> rows;  // by parameter count, then model name

  nlohmann::json to_json() const;
  std::string to_csv() const;
  // Accuracy of the "all" row for `model`; throws ValueError if absent.
  double accuracy(const std::string& model) const;
};

// Trains and evaluates one model, writing <output_dir>/<model>/{checkpoint.bin,
// trace.csv, report.json, outcomes.csv}.
void run_experiment_model(const ExperimentConfig& config, const ModelSpec& model,
                          const std::vector<MemoryRecord>& records, const Vocab& vocab);

// Reads every model's report.json and writes summary.json and summary.csv.
ExperimentSummary merge_summary(const ExperimentConfig& config);

std::vector<MemoryRecord> load_experiment_corpus(const ExperimentConfig& config);

struct RunOptions {
  std::vector<std::string> only_models;  // empty runs all
  bool summarize = true;
};

// Each phase error is rethrown as ExperimentError naming the experiment, the
// model and the phase.
ExperimentSummary run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

}  // namespace memlab
