#include "memlab/memory_eval.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include "memlab/errors.hpp"
#include "memlab/utf8.hpp"

namespace memlab {

namespace {

constexpr std::array<std::string_view, 4> kClassNames{"exact", "minor", "severe", "loss"};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\v' || c == '\f' || c == '\r'; }

MatchOutcome overflow_outcome(std::size_t id, const std::string& truth, std::size_t needed, std::size_t context) {
  MatchOutcome o;
  o.record_id = id;
  o.truth = truth;
  o.length = utf8::length(canonicalize(truth));
  o.delta = 1.0;
  o.cls = DistortionClass::loss;
  o.note = "context overflow: needs " + std::to_string(needed) + " positions, context is " + std::to_string(context);
  return o;
}

}  // namespace

std::string_view to_string(DistortionClass c) { return kClassNames[static_cast<std::size_t>(c)]; }

void DistortionThresholds::validate() const {
  if (!(minor > 0.0 && minor < severe && severe < 1.0)) {
    throw ConfigError("thresholds must satisfy 0 < minor < severe < 1");
  }
  if (!(refusal_fraction >= 0.0 && refusal_fraction <= 1.0)) {
    throw ConfigError("refusal_fraction must lie in [0, 1]");
  }
}

nlohmann::json DistortionThresholds::to_json() const {
  return {{"version", 1}, {"minor", minor}, {"severe", severe}, {"refusal_fraction", refusal_fraction}};
}

DistortionThresholds DistortionThresholds::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("thresholds must be a JSON object");
  static const std::set<std::string> known{"version", "minor", "severe", "refusal_fraction"};
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key)) throw ConfigError("unknown thresholds field '" + key + "'");
  }
  DistortionThresholds t;
  try {
    if (doc.value("version", 1) != 1) throw ConfigError("unsupported thresholds version");
    t.minor = doc.value("minor", t.minor);
    t.severe = doc.value("severe", t.severe);
    t.refusal_fraction = doc.value("refusal_fraction", t.refusal_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed thresholds: ") + e.what());
  }
  t.validate();
  return t;
}

DistortionThresholds DistortionThresholds::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open thresholds file " + path);
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("thresholds file " + path + " is not JSON: " + e.what());
  }
}

std::string canonicalize(std::string_view text) {
  std::string lf;
  lf.reserve(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '\r') {
      lf.push_back('\n');
      if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
    } else {
      lf.push_back(text[i]);
    }
  }
  std::size_t begin = 0, end = lf.size();
  while (begin < end && is_space(lf[begin])) ++begin;
  while (end > begin && is_space(lf[end - 1])) --end;
  std::string out;
  out.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) {
    if (lf[i] == ' ' && !out.empty() && out.back() == ' ') continue;
    out.push_back(lf[i]);
  }
  return out;
}

std::size_t levenshtein(std::u32string_view a, std::u32string_view b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({up + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

double normalized_distance(std::string_view predicted, std::string_view truth) {
  const std::u32string p = utf8::decode(canonicalize(predicted));
  const std::u32string t = utf8::decode(canonicalize(truth));
  const std::size_t longest = std::max(p.size(), t.size());
  if (longest == 0) return 0.0;
  return static_cast<double>(levenshtein(p, t)) / static_cast<double>(longest);
}

MatchOutcome classify_distortion(std::string_view predicted, std::string_view truth,
                                 const DistortionThresholds& thresholds) {
  const std::string p = canonicalize(predicted);
  const std::string t = canonicalize(truth);
  if (t.empty()) throw ValueError("classify_distortion: empty ground truth");
  const std::u32string ps = utf8::decode(p), ts = utf8::decode(t);

  MatchOutcome o;
  o.predicted = std::string(predicted);
  o.truth = std::string(truth);
  o.length = ts.size();
  o.delta = static_cast<double>(levenshtein(ps, ts)) / static_cast<double>(std::max(ps.size(), ts.size()));
  if (ps.empty()) {
    o.cls = DistortionClass::loss;
    o.note = "empty";
  } else if (p == t) {
    o.cls = DistortionClass::exact;
  } else if (o.delta <= thresholds.minor) {
    o.cls = DistortionClass::minor;
  } else if (o.delta <= thresholds.severe) {
    o.cls = DistortionClass::severe;
  } else {
    o.cls = DistortionClass::loss;
    if (static_cast<double>(ps.size()) < thresholds.refusal_fraction * static_cast<double>(ts.size())) {
      o.note = "refusal";
    }
  }
  return o;
}

double exact_match_accuracy(std::span<const std::string> predicted, std::span<const std::string> truth) {
  if (predicted.size() != truth.size()) {
    throw ValueError("exact_match_accuracy: " + std::to_string(predicted.size()) + " predictions for " +
                     std::to_string(truth.size()) + " references");
  }
  if (truth.empty()) throw ValueError("exact_match_accuracy: no pairs");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += canonicalize(predicted[i]) == canonicalize(truth[i]);
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

std::vector<BucketAccuracy> length_stratified_report(const EvalReport& report, std::span<const std::size_t> edges) {
  if (edges.size() < 2) throw ValueError("length buckets need at least two edges");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (edges[i] <= edges[i - 1]) throw ValueError("length bucket edges must be strictly increasing");
  }
  std::vector<BucketAccuracy> buckets(edges.size() - 1);
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    buckets[i].lower = edges[i];
    buckets[i].upper = edges[i + 1];
  }
  for (const auto& o : report.outcomes) {
    // first edge >= length closes the bucket (lower, upper]
    const auto it = std::lower_bound(edges.begin(), edges.end(), o.length);
    if (it == edges.begin() || it == edges.end()) continue;
    auto& b = buckets[static_cast<std::size_t>(it - edges.begin()) - 1];
    ++b.count;
    b.exact += o.exact();
    ++b.histogram[static_cast<std::size_t>(o.cls)];
  }
  std::erase_if(buckets, [](const BucketAccuracy& b) { return b.count == 0; });
  for (auto& b : buckets) b.accuracy = static_cast<double>(b.exact) / static_cast<double>(b.count);
  return buckets;
}

EvalReport make_report(std::vector<MatchOutcome> outcomes, std::span<const std::size_t> edges) {
  if (outcomes.empty()) throw ValueError("evaluation report needs at least one outcome");
  EvalReport r;
  r.outcomes = std::move(outcomes);
  for (const auto& o : r.outcomes) ++r.histogram[static_cast<std::size_t>(o.cls)];
  r.accuracy = static_cast<double>(r.count(DistortionClass::exact)) / static_cast<double>(r.size());
  if (!edges.empty()) r.buckets = length_stratified_report(r, edges);
  return r;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json hist = nlohmann::json::object();
  for (std::size_t c = 0; c < 4; ++c) hist[std::string(kClassNames[c])] = histogram[c];
  nlohmann::json bucket_rows = nlohmann::json::array();
  for (const auto& b : buckets) {
    nlohmann::json bh = nlohmann::json::object();
    for (std::size_t c = 0; c < 4; ++c) bh[std::string(kClassNames[c])] = b.histogram[c];
    bucket_rows.push_back({{"lower", b.lower},
                           {"upper", b.upper},
                           {"N", b.count},
                           {"exact", b.exact},
                           {"accuracy", b.accuracy},
                           {"histogram", bh}});
  }
  nlohmann::json notes = nlohmann::json::array();
  for (const auto& o : outcomes) {
    if (!o.note.empty()) notes.push_back({{"record_id", o.record_id}, {"note", o.note}});
  }
  return {{"N", size()},     {"accuracy", accuracy}, {"histogram", hist},
          {"buckets", bucket_rows}, {"notes", notes}, {"metadata", metadata}};
}

std::string EvalReport::outcomes_csv() const {
  std::string out = "record_id,length,delta,class,exact\n";
  char line[128];
  for (const auto& o : outcomes) {
    std::snprintf(line, sizeof line, "%zu,%zu,%.6f,%s,%d\n", o.record_id, o.length, o.delta,
                  std::string(to_string(o.cls)).c_str(), o.exact() ? 1 : 0);
    out += line;
  }
  return out;
}

std::size_t eval_thread_count() {
  if (const char* env = std::getenv("MEMLAB_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && n > 0) return static_cast<std::size_t>(n);
    throw ConfigError(std::string("MEMLAB_THREADS must be a positive integer, got '") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

EvalReport evaluate_model(const TransformerModel& model, const Vocab& vocab, const std::vector<MemoryRecord>& records,
                          const EvalOptions& options) {
  options.thresholds.validate();
  if (records.empty()) throw ValueError("evaluate_model: no records");
  if (vocab.size() != model.config.vocab_size) {
    throw ValueError("vocabulary has " + std::to_string(vocab.size()) + " ids but the model expects " +
                     std::to_string(model.config.vocab_size));
  }
  const std::size_t context = model.config.max_seq_len;

  // encode up front so vocabulary mismatches fail before any decoding
  struct Job {
    std::vector<TokenId> prompt;
    std::vector<TokenId> expected;
  };
  std::vector<Job> jobs(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      jobs[i].prompt = frame_cue(vocab, records[i].cue_text());
      jobs[i].expected = vocab.encode(records[i].content);
    } catch (const TokenizerError& e) {
      throw TokenizerError("record " + std::to_string(i) + " ('" + records[i].cue_text() + "'): " + e.what());
    }
    jobs[i].expected.push_back(kEos);
  }

  std::vector<MatchOutcome> outcomes(records.size());
  const auto run_one = [&](std::size_t i) {
    const Job& job = jobs[i];
    const std::size_t needed = job.prompt.size() + job.expected.size() - 1;
    if (needed > context) {
      outcomes[i] = overflow_outcome(i, records[i].content, needed, context);
      return;
    }
    const std::size_t max_new = context - job.prompt.size();
    const auto out = greedy_decode_guided(model, job.prompt, job.expected, max_new, kEos);
    const std::string text = vocab.decode(std::span(out).subspan(job.prompt.size()));
    outcomes[i] = classify_distortion(text, records[i].content, options.thresholds);
    outcomes[i].record_id = i;
  };

  const std::size_t workers = std::min(records.size(), options.threads ? options.threads : eval_thread_count());
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(records.size());
  const auto worker = [&] {
    for (std::size_t i = next++; i < records.size(); i = next++) {
      try {
        run_one(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return make_report(std::move(outcomes), options.bucket_edges);
}

}  // namespace memlab
