#include "memlab/experiments.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace memlab {

namespace fs = std::filesystem;

namespace {

void reject_unknown(const nlohmann::json& doc, const std::set<std::string>& known, const std::string& what) {
  if (!doc.is_object()) throw ConfigError(what + " must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key)) throw ConfigError("unknown " + what + " field '" + key + "'");
  }
}

std::string shortest(double v) {
  char buf[32];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << bytes;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string provenance_line(const ExperimentConfig& config) {
  return "# experiment=" + config.name + " config_hash=" + config.hash() + " seed=" + std::to_string(config.seed) +
         "\n";
}

template <class F>
auto in_phase(const ExperimentConfig& config, const std::string& model, const std::string& phase, F&& body) {
  try {
    return body();
  } catch (const ExperimentError&) {
    throw;
  } catch (const Error& e) {
    std::string where = "experiment '" + config.name + "'";
    if (!model.empty()) where += ", model '" + model + "'";
    throw ExperimentError(where + ", " + phase + ": " + e.what());
  }
}

TransformerConfig model_config(const ExperimentConfig& config, const ModelSpec& spec,
                               const std::vector<MemoryRecord>& records, const Vocab& vocab) {
  TransformerConfig c;
  c.vocab_size = vocab.size();
  c.d_model = spec.d_model;
  c.layers = spec.layers;
  c.heads = spec.heads;
  c.ffn_width = spec.ffn_width;
  c.seed = config.seed;
  c.max_seq_len = spec.max_seq_len;
  if (c.max_seq_len == 0) {
    for (const auto& r : records) c.max_seq_len = std::max(c.max_seq_len, frame_record(vocab, r).tokens.size() - 1);
  }
  c.validate();
  return c;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

nlohmann::json CorpusSpec::to_json() const {
  nlohmann::json doc{{"name", name}};
  if (synthetic()) {
    doc["count"] = count;
    doc["min_length"] = min_length;
    doc["max_length"] = max_length;
    if (seed) doc["seed"] = *seed;
  } else {
    doc["path"] = path;
  }
  if (!bucket.empty()) doc["bucket"] = bucket;
  return doc;
}

CorpusSpec CorpusSpec::from_json(const nlohmann::json& doc) {
  reject_unknown(doc, {"name", "path", "count", "min_length", "max_length", "seed", "bucket"}, "corpus");
  CorpusSpec c;
  try {
    c.name = doc.value("name", c.name);
    c.path = doc.value("path", c.path);
    if (!c.path.empty() && (doc.contains("count") || doc.contains("min_length") || doc.contains("max_length") ||
                            doc.contains("seed"))) {
      throw ConfigError("corpus '" + c.name + "' has a path and synthetic settings");
    }
    c.count = doc.value("count", c.count);
    c.min_length = doc.value("min_length", c.min_length);
    c.max_length = doc.value("max_length", c.max_length);
    if (doc.contains("seed")) c.seed = doc.at("seed").get<std::uint64_t>();
    c.bucket = doc.value("bucket", c.bucket);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed corpus spec: ") + e.what());
  }
  if (c.name.empty()) throw ConfigError("corpus needs a name");
  if (!c.bucket.empty()) {
    try {
      bucket_by_name(c.bucket);
    } catch (const ValueError& e) {
      throw ConfigError(e.what());
    }
  }
  if (c.synthetic() && (c.count == 0 || c.min_length == 0 || c.min_length > c.max_length)) {
    throw ConfigError("synthetic corpus needs count >= 1 and 1 <= min_length <= max_length");
  }
  return c;
}

nlohmann::json ModelSpec::to_json() const {
  return {{"name", name},           {"d_model", d_model},         {"layers", layers},
          {"heads", heads},         {"ffn_width", ffn_width},     {"max_seq_len", max_seq_len}};
}

ModelSpec ModelSpec::from_json(const nlohmann::json& doc) {
  reject_unknown(doc, {"name", "d_model", "layers", "heads", "ffn_width", "max_seq_len"}, "model");
  ModelSpec m;
  try {
    m.d_model = doc.value("d_model", m.d_model);
    m.layers = doc.value("layers", m.layers);
    m.heads = doc.value("heads", m.heads);
    m.ffn_width = doc.value("ffn_width", m.ffn_width);
    m.max_seq_len = doc.value("max_seq_len", m.max_seq_len);
    m.name = doc.value("name", "d" + std::to_string(m.d_model) + "-L" + std::to_string(m.layers));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model spec: ") + e.what());
  }
  return m;
}

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("experiment needs a name");
  if (models.empty()) throw ConfigError("experiment lists no models");
  std::set<std::string> names;
  for (const auto& m : models) {
    if (m.name.empty() || m.name.find_first_of("/\\") != std::string::npos || m.name == "." || m.name == "..") {
      throw ConfigError("model name '" + m.name + "' cannot be used as a directory name");
    }
    if (!names.insert(m.name).second) throw ConfigError("model name '" + m.name + "' appears twice");
    TransformerConfig probe;
    probe.vocab_size = kReservedCount + 1;
    probe.d_model = m.d_model;
    probe.layers = m.layers;
    probe.heads = m.heads;
    probe.ffn_width = m.ffn_width;
    probe.max_seq_len = m.max_seq_len == 0 ? 2 : m.max_seq_len;
    try {
      probe.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("model '" + m.name + "': " + e.what());
    }
  }
  train.validate();
  eval.thresholds.validate();
  for (std::size_t i = 1; i < eval.bucket_edges.size(); ++i) {
    if (eval.bucket_edges[i] <= eval.bucket_edges[i - 1]) throw ConfigError("bucket edges must increase strictly");
  }
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json model_docs = nlohmann::json::array();
  for (const auto& m : models) model_docs.push_back(m.to_json());
  nlohmann::json train_doc = train.to_json();
  train_doc.erase("seed");
  return {{"version", kVersion},
          {"name", name},
          {"seed", seed},
          {"corpus", corpus.to_json()},
          {"models", model_docs},
          {"train", train_doc},
          {"eval", {{"bucket_edges", eval.bucket_edges}, {"thresholds", eval.thresholds.to_json()}}}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& doc, const std::string& base_dir) {
  const auto resolve = [&](const std::string& p) {
    if (base_dir.empty() || p.empty() || fs::path(p).is_absolute()) return p;
    return (fs::path(base_dir) / p).lexically_normal().string();
  };
  reject_unknown(doc, {"version", "name", "seed", "corpus", "models", "train", "eval", "output_dir"}, "experiment");
  ExperimentConfig c;
  try {
    if (!doc.contains("version")) throw ConfigError("experiment config needs a version field");
    if (doc.at("version") != kVersion) {
      throw ConfigError("unsupported experiment config version " + doc.at("version").dump());
    }
    c.name = doc.value("name", c.name);
    c.seed = doc.value("seed", c.seed);
    c.output_dir = resolve(doc.value("output_dir", c.output_dir));
    if (doc.contains("corpus")) {
      c.corpus = CorpusSpec::from_json(doc.at("corpus"));
      c.corpus.path = resolve(c.corpus.path);
    }
    if (!doc.contains("models") || !doc.at("models").is_array()) {
      throw ConfigError("experiment config needs a models array");
    }
    for (const auto& m : doc.at("models")) c.models.push_back(ModelSpec::from_json(m));
    if (doc.contains("train")) {
      if (doc.at("train").contains("seed")) throw ConfigError("set the seed at the top level, not under train");
      c.train = TrainConfig::from_json(doc.at("train"));
    }
    if (doc.contains("eval")) {
      const auto& e = doc.at("eval");
      reject_unknown(e, {"bucket_edges", "thresholds"}, "eval");
      if (e.contains("bucket_edges")) c.eval.bucket_edges = e.at("bucket_edges").get<std::vector<std::size_t>>();
      if (e.contains("thresholds")) {
        const auto& t = e.at("thresholds");
        c.eval.thresholds = t.is_string() ? DistortionThresholds::load(resolve(t.get<std::string>()))
                                          : DistortionThresholds::from_json(t);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  }
  c.train.seed = c.seed;
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open experiment config " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("experiment config " + path + " is not JSON: " + e.what());
  }
  std::string base = fs::path(path).parent_path().string();
  if (base.empty()) base = ".";
  return from_json(doc, base);
}

std::string ExperimentConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json().dump())));
  return buf;
}

nlohmann::json ExperimentSummary::to_json() const {
  nlohmann::json rows_doc = nlohmann::json::array();
  for (const auto& r : rows) {
    rows_doc.push_back({{"model_name", r.model_name},
                        {"n_params", r.n_params},
                        {"corpus", r.corpus},
                        {"bucket", r.bucket},
                        {"N", r.n},
                        {"acc", r.acc},
                        {"minor", r.minor},
                        {"severe", r.severe},
                        {"loss", r.loss}});
  }
  return {{"experiment", experiment}, {"config_hash", config_hash}, {"seed", seed}, {"rows", rows_doc}};
}

std::string ExperimentSummary::to_csv() const {
  std::string out = "# experiment=" + experiment + " config_hash=" + config_hash + " seed=" + std::to_string(seed) +
                    "\nmodel_name,n_params,corpus,bucket,N,acc,minor,severe,loss\n";
  for (const auto& r : rows) {
    out += r.model_name + "," + std::to_string(r.n_params) + "," + r.corpus + ",\"" + r.bucket + "\"," +
           std::to_string(r.n) + "," + shortest(r.acc) + "," + std::to_string(r.minor) + "," +
           std::to_string(r.severe) + "," + std::to_string(r.loss) + "\n";
  }
  return out;
}

double ExperimentSummary::accuracy(const std::string& model) const {
  for (const auto& r : rows) {
    if (r.model_name == model && r.bucket == "all") return r.acc;
  }
  throw ValueError("summary has no row for model '" + model + "'");
}

std::vector<MemoryRecord> load_experiment_corpus(const ExperimentConfig& config) {
  return in_phase(config, "", "corpus", [&] {
    const CorpusSpec& c = config.corpus;
    std::vector<MemoryRecord> records = c.synthetic()
                                            ? synth_corpus(c.seed.value_or(config.seed), c.count, c.min_length, c.max_length)
                                            : load_records(c.path);
    if (!c.bucket.empty()) records = filter_by_length(records, bucket_by_name(c.bucket));
    if (records.empty()) throw CorpusError("no records left in bucket '" + c.bucket + "'");
    return records;
  });
}

void run_experiment_model(const ExperimentConfig& config, const ModelSpec& spec,
                          const std::vector<MemoryRecord>& records, const Vocab& vocab) {
  const fs::path dir = fs::path(config.output_dir) / spec.name;
  in_phase(config, spec.name, "setup", [&] {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  });
  TransformerModel model =
      in_phase(config, spec.name, "model", [&] { return TransformerModel::init(model_config(config, spec, records, vocab)); });

  TrainConfig tc = config.train;
  tc.checkpoint_path.clear();
  const TrainTrace trace = in_phase(config, spec.name, "train", [&] { return train(model, records, vocab, tc); });

  const nlohmann::json provenance{{"experiment", config.name},
                                  {"config_hash", config.hash()},
                                  {"seed", config.seed},
                                  {"model", spec.name},
                                  {"corpus", config.corpus.name}};
  EvalReport report = in_phase(config, spec.name, "eval", [&] { return evaluate_model(model, vocab, records, config.eval); });
  report.metadata = provenance;
  report.metadata["n_params"] = model.parameter_count();
  report.metadata["model_config"] = model.config.to_json();
  report.metadata["corpus_spec"] = config.corpus.to_json();

  in_phase(config, spec.name, "write", [&] {
    nlohmann::json meta = provenance;
    meta["train"] = tc.to_json();
    save_checkpoint((dir / "checkpoint.bin").string(), model, checkpoint_metadata(vocab, meta));
    write_file(dir / "trace.csv", provenance_line(config) + trace.to_csv(false));
    write_file(dir / "report.json", report.to_json().dump(2) + "\n");
    write_file(dir / "outcomes.csv", provenance_line(config) + report.outcomes_csv());
  });
}

ExperimentSummary merge_summary(const ExperimentConfig& config) {
  return in_phase(config, "", "summary", [&] {
    ExperimentSummary s;
    s.experiment = config.name;
    s.config_hash = config.hash();
    s.seed = config.seed;
    for (const auto& spec : config.models) {
      const fs::path path = fs::path(config.output_dir) / spec.name / "report.json";
      nlohmann::json doc;
      try {
        doc = nlohmann::json::parse(read_file(path));
      } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + " is not JSON: " + e.what());
      }
      const auto& meta = doc.at("metadata");
      if (meta.value("config_hash", std::string()) != s.config_hash) {
        throw IoError(path.string() + " was written by a different configuration");
      }
      const auto& hist = doc.at("histogram");
      SummaryRow all;
      all.model_name = spec.name;
      all.n_params = meta.at("n_params").get<std::size_t>();
      all.corpus = config.corpus.name;
      all.bucket = "all";
      all.n = doc.at("N").get<std::size_t>();
      all.acc = doc.at("accuracy").get<double>();
      all.minor = hist.at("minor").get<std::size_t>();
      all.severe = hist.at("severe").get<std::size_t>();
      all.loss = hist.at("loss").get<std::size_t>();
      s.rows.push_back(all);
      for (const auto& b : doc.at("buckets")) {
        SummaryRow row = all;
        row.bucket = "(" + std::to_string(b.at("lower").get<std::size_t>()) + "," +
                     std::to_string(b.at("upper").get<std::size_t>()) + "]";
        row.n = b.at("N").get<std::size_t>();
        row.acc = b.at("accuracy").get<double>();
        row.minor = b.at("histogram").at("minor").get<std::size_t>();
        row.severe = b.at("histogram").at("severe").get<std::size_t>();
        row.loss = b.at("histogram").at("loss").get<std::size_t>();
        s.rows.push_back(row);
      }
    }
    std::stable_sort(s.rows.begin(), s.rows.end(), [](const SummaryRow& a, const SummaryRow& b) {
      if (a.n_params != b.n_params) return a.n_params < b.n_params;
      return a.model_name < b.model_name;
    });
    write_file(fs::path(config.output_dir) / "summary.json", s.to_json().dump(2) + "\n");
    write_file(fs::path(config.output_dir) / "summary.csv", s.to_csv());
    return s;
  });
}

ExperimentSummary run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  if (config.output_dir.empty()) throw ConfigError("experiment needs an output directory");
  for (const auto& only : options.only_models) {
    const bool known = std::any_of(config.models.begin(), config.models.end(),
                                   [&](const ModelSpec& m) { return m.name == only; });
    if (!known) throw ConfigError("experiment has no model named '" + only + "'");
  }
  const std::vector<MemoryRecord> records = load_experiment_corpus(config);
  const Vocab vocab = in_phase(config, "", "vocabulary", [&] { return build_corpus_vocab(records); });
  for (const auto& spec : config.models) {
    if (!options.only_models.empty() &&
        std::find(options.only_models.begin(), options.only_models.end(), spec.name) == options.only_models.end()) {
      continue;
    }
    run_experiment_model(config, spec, records, vocab);
  }
  if (!options.summarize) return {};
  return merge_summary(config);
}

}  // namespace memlab
