// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any selected criterion fails.
//
//   acceptance [--only 1,2,5] [--work DIR] [--config-dir DIR]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "memlab/experiments.hpp"
#include "memlab/uat.hpp"
#include "memlab/utf8.hpp"

using namespace memlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path work;
  fs::path config_dir;
  std::optional<ExperimentSummary> short_run;  // shared by criteria 6, 7 and 9
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

ExperimentConfig load_config(const Context& ctx, const std::string& file, const std::string& run_dir) {
  ExperimentConfig c = ExperimentConfig::load((ctx.config_dir / file).string());
  c.output_dir = (ctx.work / run_dir).string();
  return c;
}

ExperimentSummary run_fresh(const ExperimentConfig& c) {
  fs::remove_all(c.output_dir);
  return run_experiment(c);
}

std::string only_model(const ExperimentConfig& c) {
  if (c.models.size() != 1) throw ConfigError("expected a single-model experiment");
  return c.models[0].name;
}

const ExperimentSummary& short_run(Context& ctx) {
  if (!ctx.short_run) ctx.short_run = run_fresh(load_config(ctx, "short.json", "short"));
  return *ctx.short_run;
}

Outcome metric_oracle(Context&) {
  std::vector<std::string> pred, truth;
  for (int i = 0; i < 2000; ++i) {
    truth.push_back("record " + std::to_string(i));
    pred.push_back(i < 1938 ? truth.back() : "drifted " + std::to_string(i));
  }
  const double acc = exact_match_accuracy(pred, truth);
  return {std::abs(acc - 0.969) <= 1e-12, "Acc " + fmt("%.12f", acc)};
}

Outcome exemplars(Context&) {
  const std::string a1 =
      "Every object perseveres in its state of rest, or of uniform motion in a right line, except insofar as it "
      "is compelled to change that state by forces impressed thereon.";
  const std::vector<std::pair<std::string, DistortionClass>> cases{
      {a1, DistortionClass::exact},
      {"Every object perseveres in its state of rest, except insofar as it is compelled to change that state by "
       "forces impressed thereon.",
       DistortionClass::minor},
      {"Every object always perseveres in its state of rest.", DistortionClass::severe},
      {"I do not know.", DistortionClass::loss}};
  bool ok = true;
  std::string detail;
  for (const auto& [text, expected] : cases) {
    const MatchOutcome o = classify_distortion(text, a1);
    ok = ok && o.cls == expected;
    detail += std::string(detail.empty() ? "" : ", ") + std::string(to_string(o.cls)) + " " + fmt("%.4f", o.delta);
  }
  return {ok, detail};
}

Outcome gradient(Context&) {
  TransformerConfig c;
  c.vocab_size = 11;
  c.d_model = 16;
  c.layers = 2;
  c.heads = 2;
  c.max_seq_len = 8;
  c.seed = 0;
  TransformerModel m = TransformerModel::init(c);
  randomize_parameters(m, 1, 0.3);
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<TokenId> pick(0, 10);
  std::vector<TokenId> tokens(9);
  for (auto& t : tokens) t = pick(rng);
  const GradCheckResult r = check_model_gradients(m, tokens, 1e-5);
  return {r.max_relative_error < 1e-4 && r.coordinates == m.parameter_count(),
          std::to_string(r.coordinates) + " coordinates, max relative error " + fmt("%.3e", r.max_relative_error)};
}

Outcome uat_density(Context&) {
  const SampleSet s = sample_function(uniform_grid(1, 201), [](const Eigen::VectorXd& x) {
    return Eigen::VectorXd::Constant(1, std::sin(std::numbers::pi * x(0)));
  });
  const FitResult r = uat_fit(s, 32, FitConfig{});
  return {r.sup_error < 0.05, "sup error " + fmt("%.4f", r.sup_error) + " after " + std::to_string(r.iterations) +
                                  " iterations"};
}

Outcome decomposition(Context&) {
  const auto records = synth_corpus(5, 24, 12, 20);
  const Vocab vocab = build_corpus_vocab(records);
  TransformerConfig c;
  c.vocab_size = vocab.size();
  c.d_model = 32;
  c.layers = 4;
  c.heads = 4;
  c.max_seq_len = 48;
  c.seed = 5;
  TransformerModel m = TransformerModel::init(c);
  TrainConfig tc;
  tc.epochs = 5;
  tc.adam.learning_rate = 3e-3;
  tc.seed = 5;
  train(m, records, vocab, tc);

  std::mt19937_64 rng(6);
  std::uniform_int_distribution<TokenId> pick(kReservedCount, static_cast<TokenId>(vocab.size() - 1));
  std::uniform_int_distribution<std::size_t> len(2, c.max_seq_len);
  double worst = 0.0;
  std::vector<std::vector<TokenId>> prompts;
  for (int i = 0; i < 20; ++i) {
    std::vector<TokenId> p(len(rng));
    p[0] = kBos;
    for (std::size_t t = 1; t < p.size(); ++t) p[t] = pick(rng);
    worst = std::max(worst, decompose_residual(m, p).relative_residual);
    prompts.push_back(std::move(p));
  }
  std::vector<TokenId> a{kBos}, b{kBos};
  for (int t = 0; t < 10; ++t) {
    a.push_back(pick(rng));
    b.push_back(pick(rng));
  }
  if (a == b) b.back() = b.back() == kReservedCount ? kReservedCount + 1 : kReservedCount;
  const auto ma = attention_maps(m, a), mb = attention_maps(m, b);
  double diff = 0.0;
  for (std::size_t l = 0; l < ma.size(); ++l)
    for (std::size_t h = 0; h < ma[l].size(); ++h) diff = std::max(diff, (ma[l][h] - mb[l][h]).cwiseAbs().maxCoeff());
  return {worst < 1e-10 && diff > 1e-6,
          "worst relative residual " + fmt("%.3e", worst) + ", attention map difference " + fmt("%.3e", diff)};
}

Outcome memorization(Context& ctx) {
  const ExperimentSummary& s = short_run(ctx);
  const double acc = s.rows.front().acc;
  return {acc >= 0.95, s.rows.front().model_name + " Acc " + fmt("%.4f", acc) + " on " +
                           std::to_string(s.rows.front().n) + " records"};
}

Outcome length_effect(Context& ctx) {
  const double short_acc = short_run(ctx).rows.front().acc;
  int lower = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ExperimentConfig c = load_config(ctx, "long.json", "long-seed" + std::to_string(seed));
    c.seed = seed;
    c.train.seed = seed;
    const double acc = run_fresh(c).accuracy(only_model(c));
    lower += acc < short_acc;
    detail += std::string(detail.empty() ? "" : " ") + fmt("%.3f", acc);
  }
  return {lower >= 4, "long Acc by seed [" + detail + "] vs short " + fmt("%.3f", short_acc) + ", lower in " +
                          std::to_string(lower) + "/5"};
}

Outcome capacity(Context& ctx) {
  ExperimentConfig c = load_config(ctx, "capacity.json", "capacity");
  const ExperimentSummary s = run_fresh(c);
  std::vector<const SummaryRow*> rows;
  for (const auto& r : s.rows) {
    if (r.bucket == "all") rows.push_back(&r);
  }
  if (rows.size() != 2) return {false, "expected two models, got " + std::to_string(rows.size())};
  const SummaryRow& small = *rows[0];
  const SummaryRow& large = *rows[1];
  const bool margin_needed = small.acc < 0.9;
  const bool ok = large.acc >= small.acc && (!margin_needed || large.acc - small.acc >= 0.05);
  return {ok, small.model_name + " (" + std::to_string(small.n_params) + " params) Acc " + fmt("%.4f", small.acc) +
                  ", " + large.model_name + " (" + std::to_string(large.n_params) + " params) Acc " +
                  fmt("%.4f", large.acc)};
}

Outcome determinism(Context& ctx) {
  const ExperimentConfig first = load_config(ctx, "short.json", "short");
  short_run(ctx);
  const ExperimentConfig second = load_config(ctx, "short.json", "short-repeat");
  run_fresh(second);
  std::vector<std::string> files{"summary.json", "summary.csv"};
  for (const auto& m : first.models) files.push_back(m.name + "/checkpoint.bin");
  std::string differing;
  for (const auto& f : files) {
    const std::string a = slurp(fs::path(first.output_dir) / f), b = slurp(fs::path(second.output_dir) / f);
    if (a.empty() || a != b) differing += " " + f;
  }
  return {differing.empty(), differing.empty() ? std::to_string(files.size()) + " files byte-identical"
                                               : "differs:" + differing};
}

Outcome corpus_invariants(Context&) {
  std::vector<MemoryRecord> records = synth_corpus(0, 200, 32, 64);
  for (auto& r : synth_corpus(1, 200, 128, 256)) records.push_back(r);
  for (auto& r : synth_corpus(2, 200, 200, 560)) records.push_back(r);
  // Boundary lengths around the bucket edges, with multi-byte characters.
  const std::u32string alphabet = U"床前明月光疑是地上霜abc\n";
  for (std::size_t n : {24, 255, 256, 257, 511, 512, 513}) {
    MemoryRecord r;
    r.dynasty = "唐";
    r.author = "李白";
    r.title = "静夜思" + std::to_string(n);
    const std::size_t content = n - utf8::length(r.cue_text());
    std::u32string text;
    for (std::size_t i = 0; i < content; ++i) text.push_back(alphabet[i % 10]);
    r.content = utf8::encode(text);
    records.push_back(r);
  }
  const Vocab vocab = build_corpus_vocab(records);
  std::size_t roundtrip_failures = 0;
  for (const auto& r : records) {
    const Prompt p = format_prompt(r);
    if (vocab.decode(vocab.encode(p.cue)) != p.cue || vocab.decode(vocab.encode(p.content)) != p.content) {
      ++roundtrip_failures;
    }
  }
  const auto shorts = filter_by_length(records, short_bucket());
  const auto longs = filter_by_length(records, long_bucket());
  // Every record within 512 lands in exactly one bucket; records are compared
  // whole because cues repeat across the synthetic seeds.
  std::size_t within = 0, both = 0, misplaced = 0;
  for (const auto& r : records) {
    const auto in_short = std::count(shorts.begin(), shorts.end(), r);
    const auto in_long = std::count(longs.begin(), longs.end(), r);
    const auto copies = std::count(records.begin(), records.end(), r);
    if (r.combined_length() <= 512) {
      ++within;
      both += in_short > 0 && in_long > 0;
      misplaced += in_short + in_long != copies;
    } else {
      misplaced += in_short + in_long != 0;
    }
  }
  const bool partition = both == 0 && misplaced == 0 && shorts.size() + longs.size() == within;
  return {roundtrip_failures == 0 && partition,
          std::to_string(records.size()) + " records, " + std::to_string(roundtrip_failures) + " round-trip failures, " +
              std::to_string(shorts.size()) + " short + " + std::to_string(longs.size()) + " long of " +
              std::to_string(within) + " within 512, overlap " + std::to_string(both)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"memlab acceptance criteria"};
  std::vector<int> only;
  std::string work = "acceptance_runs";
  std::string config_dir = MEMLAB_SOURCE_DIR "/config";
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 10));
  app.add_option("--work", work, "Directory for experiment outputs");
  app.add_option("--config-dir", config_dir, "Directory holding short.json, long.json and capacity.json");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome(Context&)>>> criteria{
      {"metric oracle", metric_oracle},
      {"distortion exemplars", exemplars},
      {"gradient check", gradient},
      {"UAT density", uat_density},
      {"residual decomposition", decomposition},
      {"memorization", memorization},
      {"length effect", length_effect},
      {"capacity effect", capacity},
      {"determinism", determinism},
      {"tokenizer and corpus invariants", corpus_invariants},
  };

  Context ctx;
  ctx.work = work;
  ctx.config_dir = config_dir;
  fs::create_directories(ctx.work);
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("criterion %2d %s  %s: %s [%.1fs]\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
