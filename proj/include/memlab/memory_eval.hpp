#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "memlab/corpus.hpp"
#include "memlab/transformer.hpp"

namespace memlab {

enum class DistortionClass { exact, minor, severe, loss };

std::string_view to_string(DistortionClass c);

// Upper bounds on the normalized edit distance for each class.
struct DistortionThresholds {
  double minor = 0.25;
  double severe = 0.9;
  // A non-empty prediction shorter than this fraction of the truth that is
  // also past `severe` is flagged as a refusal.
  double refusal_fraction = 0.2;

  void validate() const;
  nlohmann::json to_json() const;
  static DistortionThresholds from_json(const nlohmann::json& doc);
  static DistortionThresholds load(const std::string& path);
};

// Trims surrounding whitespace, turns CRLF and lone CR into LF and collapses
// runs of spaces. Nothing else is touched.
std::string canonicalize(std::string_view text);

// Edit distance over Unicode scalars (unit insert, delete, substitute).
std::size_t levenshtein(std::u32string_view a, std::u32string_view b);

// levenshtein / max length on canonical forms; 0 when both are empty.
double normalized_distance(std::string_view predicted, std::string_view truth);

struct MatchOutcome {
  std::size_t record_id = 0;
  std::size_t length = 0;  // characters in the canonical truth
  std::string predicted;
  std::string truth;
  double delta = 0.0;
  DistortionClass cls = DistortionClass::loss;
  std::string note;  // "refusal", "empty", "context overflow ..."

  bool exact() const { return cls == DistortionClass::exact; }
};

// Throws ValueError when the truth is empty after canonicalization.
MatchOutcome classify_distortion(std::string_view predicted, std::string_view truth,
                                 const DistortionThresholds& thresholds = {});

// Fraction of pairs equal after canonicalization.
double exact_match_accuracy(std::span<const std::string> predicted, std::span<const std::string> truth);

struct BucketAccuracy {
  std::size_t lower = 0;  // exclusive
  std::size_t upper = 0;  // inclusive
  std::size_t count = 0;
  std::size_t exact = 0;
  double accuracy = 0.0;
  std::array<std::size_t, 4> histogram{};
};

struct EvalReport {
  std::vector<MatchOutcome> outcomes;  // record order
  double accuracy = 0.0;
  std::array<std::size_t, 4> histogram{};  // indexed by DistortionClass
  std::vector<BucketAccuracy> buckets;
  nlohmann::json metadata = nlohmann::json::object();

  std::size_t size() const { return outcomes.size(); }
  std::size_t count(DistortionClass c) const { return histogram[static_cast<std::size_t>(c)]; }

  nlohmann::json to_json() const;
  std::string outcomes_csv() const;  // record_id,length,delta,class,exact
};

// Aggregates outcomes; buckets use `edges` when non-empty.
EvalReport make_report(std::vector<MatchOutcome> outcomes, std::span<const std::size_t> edges = {});

// Per-bucket accuracy over (edges[i], edges[i+1]] of truth length. Buckets
// without outcomes are left out.
std::vector<BucketAccuracy> length_stratified_report(const EvalReport& report, std::span<const std::size_t> edges);

struct EvalOptions {
  DistortionThresholds thresholds;
  std::vector<std::size_t> bucket_edges{0, 64, 128, 256, 512};
  std::size_t threads = 0;  // 0: MEMLAB_THREADS, else hardware concurrency
};

// Worker count from MEMLAB_THREADS, falling back to the hardware.
std::size_t eval_thread_count();

// Greedy-decodes every record from BOS + cue + SEP and classifies the result.
// A record whose framing cannot fit the context counts as loss with a note.
// The model is only read.
EvalReport evaluate_model(const TransformerModel& model, const Vocab& vocab, const std::vector<MemoryRecord>& records,
                          const EvalOptions& options = {});

}  // namespace memlab
